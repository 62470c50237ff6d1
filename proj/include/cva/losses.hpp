// Training objectives: Hungarian span matching with L1 + generalized-IoU
// regression, margin/rank saliency supervision, and the boundary-anchored
// InfoNCE computed across two augmented views with adjacent plus mined hard
// negatives.

#pragma once

#include <random>
#include <utility>
#include <vector>

#include "cva/model.hpp"

namespace cva {

struct LossWeights {
  float lambda_l1 = 10.0f;
  float lambda_giou = 1.0f;
  float lambda_hd = 1.0f;
  float lambda_cbd = 0.005f;
  float margin_delta = 0.2f;  // hinge margin shared by the saliency terms
  float tau = 0.07f;          // contrastive temperature
  // Confidence supervision (matched -> 1, unmatched -> 0); an extension over
  // the plain regression objective, needed to rank predictions.
  bool confidence_bce = true;
};

enum class CbdAnchorMode { kBoundary, kAllClips, kCenter };
CbdAnchorMode cbd_anchor_mode_from_string(const std::string& s);

struct CbdConfig {
  int n_adj = 2;
  int n_hard = 5;
  CbdAnchorMode anchor_mode = CbdAnchorMode::kBoundary;
  void validate() const;
};

// Interval overlap on continuous [lo, hi) extents.
double interval_iou(double a_lo, double a_hi, double b_lo, double b_hi);
double interval_giou(double a_lo, double a_hi, double b_lo, double b_hi);
// Clip spans use [start, end + 1) extents.
double iou_1d(const MomentSpan& a, const MomentSpan& b);
double giou_1d(const MomentSpan& a, const MomentSpan& b);

// Min-cost one-to-one assignment covering min(rows, cols) pairs; returns
// (row, col) pairs. Costs must be finite.
std::vector<std::pair<int, int>> hungarian_match(const std::vector<std::vector<double>>& cost);

// Differentiable generalized IoU between the predicted (center, width)
// scalars and a fixed target interval.
Tensor giou_cw(const Tensor& center, const Tensor& width, float gt_lo, float gt_hi);

struct MrLossResult {
  Tensor loss;
  std::vector<std::pair<int, int>> assignment;  // (prediction, gt) pairs
};
MrLossResult mr_loss(const ModelOutput& out, const std::vector<MomentSpan>& gt_spans, const LossWeights& w);

struct HdTelemetry {
  int margin_skips = 0;
  int rank_skips = 0;
};
// Margin term on one sampled (inside-GT, background) pair plus a rank term
// over all label-ordered within-GT pairs. Either term is skipped (telemetry)
// when its candidate set is empty. Returns lambda_hd * (margin + rank).
Tensor hd_loss(const ModelOutput& out, const std::vector<int>& labels, const std::vector<MomentSpan>& gt_spans,
               const LossWeights& w, std::mt19937_64& rng, HdTelemetry* telemetry = nullptr);

// Start and end clip of every span, deduplicated, ascending.
std::vector<int> select_boundary_anchors(const std::vector<MomentSpan>& spans);
std::vector<int> select_anchors(const std::vector<MomentSpan>& spans, CbdAnchorMode mode);

// Background indices within n_adj of the anchor, plus the n_hard remaining
// background indices most cosine-similar to the anchor's (pre-projection)
// feature row. Empty when there is no background at all.
std::vector<int> mine_negatives(const Tensor& f_m, int anchor, const std::vector<uint8_t>& in_gt, int n_adj,
                                int n_hard);

struct CbdTelemetry {
  int skipped_no_background = 0;
};
// InfoNCE over boundary anchors: anchors/negatives from the first view,
// positives from the second, one negative set shared across anchors.
Tensor cbd_loss(const Mlp& head, const Tensor& f_m_first, const Tensor& f_m_second,
                const std::vector<MomentSpan>& gt_spans, const CbdConfig& cfg, float tau,
                CbdTelemetry* telemetry = nullptr);

struct TotalLoss {
  Tensor value;
  double mr = 0.0;
  double hd = 0.0;
  double cbd = 0.0;
};
// Moment and saliency losses averaged over the two views plus the weighted
// contrastive term.
TotalLoss total_loss(const ModelOutput& first, const ModelOutput& second, const Mlp& contrast_head,
                     const TextQueryRecord& record, const LossWeights& w, const CbdConfig& cbd_cfg,
                     std::mt19937_64& rng, HdTelemetry* hd_telemetry = nullptr,
                     CbdTelemetry* cbd_telemetry = nullptr);

}  // namespace cva
