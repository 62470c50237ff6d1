// Retrieval and highlight metrics: recall@1 over IoU thresholds, mean
// average precision, mean IoU, saliency AP / HIT@1, boundary-window IoU,
// and the target-masked diagnostic that measures background reliance.

#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "cva/losses.hpp"
#include "cva/model.hpp"

namespace cva {

// A predicted moment in clip units, [lo, hi) extents, with its confidence.
struct RankedSpan {
  double lo = 0.0;
  double hi = 0.0;
  double confidence = 0.0;
};

// Predictions ordered by descending confidence (ties keep decoder order).
std::vector<RankedSpan> ranked_spans(const ModelOutput& out);

double span_iou(const RankedSpan& pred, const MomentSpan& gt);

// 1 when the top-1 prediction reaches `threshold` IoU against any GT span.
int recall_at_1(const std::vector<RankedSpan>& ranked, const std::vector<MomentSpan>& gt, double threshold);

// Precision-at-correct-rank AP with greedy one-to-one matching at the
// threshold, in confidence order.
double average_precision(const std::vector<RankedSpan>& ranked, const std::vector<MomentSpan>& gt,
                         double threshold);

double top1_best_iou(const std::vector<RankedSpan>& ranked, const std::vector<MomentSpan>& gt);

// 1 when the highest-scoring clip (ties to the lowest index) carries a
// label >= 3.
int hit_at_1(const std::vector<float>& saliency, const std::vector<int>& labels);

// Ranking AP over clips with positives = label >= 3.
double saliency_ap(const std::vector<float>& saliency, const std::vector<int>& labels);

struct BoundaryIou {
  double start_iou = 0.0;
  double end_iou = 0.0;
  double combined = 0.0;
};

// Windows of width w seconds around each boundary, clamped inside the span;
// combined is the mean of the start-window and end-window IoUs.
BoundaryIou boundary_iou(double gt_start, double gt_end, double pred_start, double pred_end, double w);

struct QueryEval {
  std::string query_id;
  double top1_iou = 0.0;
  double ap_avg = 0.0;
  int hit = 0;
  BoundaryIou biou;
  bool biou_qualified = false;  // top-1 whole-span IoU >= 0.7
};

struct EvalReport {
  std::vector<double> r1_thresholds{0.5, 0.7, 0.9};
  std::vector<double> r1;  // parallel to r1_thresholds
  double map_at_05 = 0.0;
  double map_at_075 = 0.0;
  double map_avg = 0.0;  // thresholds 0.50 .. 0.95, step 0.05
  double miou = 0.0;
  double hd_map = 0.0;
  double hit_at_1 = 0.0;
  double biou_start = 0.0, biou_end = 0.0, biou_combined = 0.0;  // IoU >= 0.7 subset
  double biou_start_all = 0.0, biou_end_all = 0.0, biou_combined_all = 0.0;
  int n_queries = 0;
  int n_biou_qualified = 0;
  std::vector<QueryEval> per_query;

  double r1_at(double threshold) const;
};

nlohmann::json eval_report_to_json(const EvalReport& report, bool include_per_query = false);

// Boundary width for the boundary-window metric, in seconds.
inline constexpr double kBoundaryWidthSeconds = 2.0;

EvalReport evaluate_model(GroundingModel& model, const Dataset& ds);

// Masks every query's GT clips before the forward pass; lower scores mean
// less reliance on background context. Seed-deterministic in random mode.
EvalReport spurious_diagnostic(GroundingModel& model, const Dataset& ds, MaskMode mode, uint64_t seed);

}  // namespace cva
