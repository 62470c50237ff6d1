#include "cva/eval.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace cva {

std::vector<RankedSpan> ranked_spans(const ModelOutput& out) {
  const int n = out.spans_cw.dim(0);
  const double l = out.clip_count;
  std::vector<RankedSpan> spans(static_cast<size_t>(n));
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return out.conf_logits.data()[a] > out.conf_logits.data()[b]; });
  for (int rank = 0; rank < n; ++rank) {
    const int i = order[static_cast<size_t>(rank)];
    const double c = out.spans_cw.data()[i * 2];
    const double w = out.spans_cw.data()[i * 2 + 1];
    RankedSpan& s = spans[static_cast<size_t>(rank)];
    s.lo = std::max(0.0, (c - w / 2.0)) * l;
    s.hi = std::min(1.0, (c + w / 2.0)) * l;
    if (s.hi < s.lo) s.hi = s.lo;
    s.confidence = 1.0 / (1.0 + std::exp(-out.conf_logits.data()[i]));
  }
  return spans;
}

double span_iou(const RankedSpan& pred, const MomentSpan& gt) {
  return interval_iou(pred.lo, pred.hi, gt.start, gt.end + 1.0);
}

double top1_best_iou(const std::vector<RankedSpan>& ranked, const std::vector<MomentSpan>& gt) {
  if (ranked.empty() || gt.empty()) throw std::invalid_argument("metrics: need at least one prediction and one GT");
  double best = 0.0;
  for (const MomentSpan& g : gt) best = std::max(best, span_iou(ranked.front(), g));
  return best;
}

int recall_at_1(const std::vector<RankedSpan>& ranked, const std::vector<MomentSpan>& gt, double threshold) {
  return top1_best_iou(ranked, gt) >= threshold ? 1 : 0;
}

double average_precision(const std::vector<RankedSpan>& ranked, const std::vector<MomentSpan>& gt,
                         double threshold) {
  if (ranked.empty() || gt.empty()) throw std::invalid_argument("metrics: need at least one prediction and one GT");
  std::vector<char> taken(gt.size(), 0);
  double ap = 0.0;
  int correct = 0;
  for (size_t rank = 0; rank < ranked.size(); ++rank) {
    int best_j = -1;
    double best_iou = threshold;
    for (size_t j = 0; j < gt.size(); ++j) {
      if (taken[j]) continue;
      const double iou = span_iou(ranked[rank], gt[j]);
      if (iou >= best_iou) {
        best_iou = iou;
        best_j = static_cast<int>(j);
      }
    }
    if (best_j >= 0) {
      taken[static_cast<size_t>(best_j)] = 1;
      ++correct;
      ap += static_cast<double>(correct) / static_cast<double>(rank + 1);
    }
  }
  return ap / static_cast<double>(gt.size());
}

int hit_at_1(const std::vector<float>& saliency, const std::vector<int>& labels) {
  if (saliency.size() != labels.size() || saliency.empty()) {
    throw std::invalid_argument("hit_at_1: saliency/label length mismatch");
  }
  int best = 0;
  for (size_t i = 1; i < saliency.size(); ++i) {
    if (saliency[i] > saliency[static_cast<size_t>(best)]) best = static_cast<int>(i);
  }
  return labels[static_cast<size_t>(best)] >= 3 ? 1 : 0;
}

double saliency_ap(const std::vector<float>& saliency, const std::vector<int>& labels) {
  if (saliency.size() != labels.size() || saliency.empty()) {
    throw std::invalid_argument("saliency_ap: saliency/label length mismatch");
  }
  std::vector<int> order(saliency.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return saliency[a] > saliency[b]; });
  int n_pos = 0;
  for (int lbl : labels) n_pos += lbl >= 3 ? 1 : 0;
  if (n_pos == 0) return 0.0;
  double ap = 0.0;
  int correct = 0;
  for (size_t rank = 0; rank < order.size(); ++rank) {
    if (labels[static_cast<size_t>(order[rank])] >= 3) {
      ++correct;
      ap += static_cast<double>(correct) / static_cast<double>(rank + 1);
    }
  }
  return ap / static_cast<double>(n_pos);
}

namespace {

BoundaryIou boundaryiou_impl(double s, double e, double sp, double ep, double w) {
  const double gs_hi = std::min(s + w, e);
  const double ge_lo = std::max(e - w, s);
  const double ps_hi = std::min(sp + w, ep);
  const double pe_lo = std::max(ep - w, sp);
  BoundaryIou b;
  b.start_iou = interval_iou(s, gs_hi, sp, ps_hi);
  b.end_iou = interval_iou(ge_lo, e, pe_lo, ep);
  b.combined = (b.start_iou + b.end_iou) / 2.0;
  return b;
}

}  // namespace

BoundaryIou boundary_iou(double gt_start, double gt_end, double pred_start, double pred_end, double w) {
  if (w <= 0.0) throw std::invalid_argument("boundary_iou: width must be positive");
  if (gt_end < gt_start || pred_end < pred_start) {
    throw std::invalid_argument("boundary_iou: spans must have end >= start");
  }
  return boundaryiou_impl(gt_start, gt_end, pred_start, pred_end, w);
}

double EvalReport::r1_at(double threshold) const {
  for (size_t i = 0; i < r1_thresholds.size(); ++i) {
    if (r1_thresholds[i] == threshold) return r1[i];
  }
  throw std::invalid_argument("r1_at: threshold not evaluated");
}

nlohmann::json eval_report_to_json(const EvalReport& r, bool include_per_query) {
  nlohmann::json j;
  nlohmann::json r1 = nlohmann::json::object();
  for (size_t i = 0; i < r.r1_thresholds.size(); ++i) {
    char key[16];
    std::snprintf(key, sizeof(key), "%.2f", r.r1_thresholds[i]);
    r1[key] = r.r1[i];
  }
  j["r1"] = r1;
  j["map_at_05"] = r.map_at_05;
  j["map_at_075"] = r.map_at_075;
  j["map_avg"] = r.map_avg;
  j["miou"] = r.miou;
  j["hd_map"] = r.hd_map;
  j["hit_at_1"] = r.hit_at_1;
  j["boundary_iou"] = {{"start", r.biou_start},
                       {"end", r.biou_end},
                       {"combined", r.biou_combined},
                       {"qualified", r.n_biou_qualified}};
  j["boundary_iou_all"] = {{"start", r.biou_start_all}, {"end", r.biou_end_all}, {"combined", r.biou_combined_all}};
  j["n_queries"] = r.n_queries;
  if (include_per_query) {
    nlohmann::json pq = nlohmann::json::array();
    for (const QueryEval& q : r.per_query) {
      pq.push_back({{"query_id", q.query_id},
                    {"top1_iou", q.top1_iou},
                    {"ap_avg", q.ap_avg},
                    {"hit", q.hit},
                    {"biou_combined", q.biou.combined}});
    }
    j["per_query"] = pq;
  }
  return j;
}

namespace {

std::vector<double> map_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.50 + 0.05 * i);
  return t;
}

EvalReport evaluate_impl(GroundingModel& model, const Dataset& ds,
                         const std::function<FeatureSequence(const VideoEntry&, const TextQueryRecord&)>& input_of) {
  EvalReport report;
  const auto thresholds = map_thresholds();
  std::vector<double> r1_sums(report.r1_thresholds.size(), 0.0);
  double miou_sum = 0, map05_sum = 0, map075_sum = 0, mapavg_sum = 0, hd_sum = 0, hit_sum = 0;
  double bs = 0, be = 0, bc = 0, bs_all = 0, be_all = 0, bc_all = 0;
  int qualified = 0;

  for (const VideoEntry& entry : ds.videos) {
    for (const TextQueryRecord& q : entry.queries) {
      const FeatureSequence input = input_of(entry, q);
      ModelOutput out = model.forward(input, q);
      const auto ranked = ranked_spans(out);

      QueryEval qe;
      qe.query_id = q.query_id;
      qe.top1_iou = top1_best_iou(ranked, q.gt_spans);
      miou_sum += qe.top1_iou;
      for (size_t i = 0; i < report.r1_thresholds.size(); ++i) {
        r1_sums[i] += qe.top1_iou >= report.r1_thresholds[i] ? 1.0 : 0.0;
      }
      double ap_acc = 0;
      for (double t : thresholds) {
        const double ap = average_precision(ranked, q.gt_spans, t);
        ap_acc += ap;
        if (t == 0.50) map05_sum += ap;
        if (t == 0.75) map075_sum += ap;
      }
      qe.ap_avg = ap_acc / static_cast<double>(thresholds.size());
      mapavg_sum += qe.ap_avg;

      std::vector<float> sal(out.saliency.data(), out.saliency.data() + out.saliency.size());
      qe.hit = hit_at_1(sal, q.saliency_labels);
      hit_sum += qe.hit;
      hd_sum += saliency_ap(sal, q.saliency_labels);

      // boundary windows in seconds against the best-overlapping GT span
      const MomentSpan* best_gt = &q.gt_spans.front();
      double best = -1.0;
      for (const MomentSpan& g : q.gt_spans) {
        const double iou = span_iou(ranked.front(), g);
        if (iou > best) {
          best = iou;
          best_gt = &g;
        }
      }
      const double cs = ds.clip_seconds;
      qe.biou = boundary_iou(best_gt->start * cs, (best_gt->end + 1) * cs, ranked.front().lo * cs,
                             ranked.front().hi * cs, kBoundaryWidthSeconds);
      bs_all += qe.biou.start_iou;
      be_all += qe.biou.end_iou;
      bc_all += qe.biou.combined;
      qe.biou_qualified = qe.top1_iou >= 0.7;
      if (qe.biou_qualified) {
        ++qualified;
        bs += qe.biou.start_iou;
        be += qe.biou.end_iou;
        bc += qe.biou.combined;
      }
      report.per_query.push_back(std::move(qe));
      ++report.n_queries;
    }
  }
  if (report.n_queries == 0) throw std::invalid_argument("evaluate: dataset has no queries");
  const double n = report.n_queries;
  report.r1.resize(report.r1_thresholds.size());
  for (size_t i = 0; i < r1_sums.size(); ++i) report.r1[i] = r1_sums[i] / n;
  report.map_at_05 = map05_sum / n;
  report.map_at_075 = map075_sum / n;
  report.map_avg = mapavg_sum / n;
  report.miou = miou_sum / n;
  report.hd_map = hd_sum / n;
  report.hit_at_1 = hit_sum / n;
  report.n_biou_qualified = qualified;
  report.biou_start_all = bs_all / n;
  report.biou_end_all = be_all / n;
  report.biou_combined_all = bc_all / n;
  if (qualified > 0) {
    report.biou_start = bs / qualified;
    report.biou_end = be / qualified;
    report.biou_combined = bc / qualified;
  }
  return report;
}

}  // namespace

EvalReport evaluate_model(GroundingModel& model, const Dataset& ds) {
  return evaluate_impl(model, ds, [](const VideoEntry& entry, const TextQueryRecord&) { return entry.video; });
}

EvalReport spurious_diagnostic(GroundingModel& model, const Dataset& ds, MaskMode mode, uint64_t seed) {
  return evaluate_impl(model, ds, [&](const VideoEntry& entry, const TextQueryRecord& q) {
    std::mt19937_64 rng(derive_seed(seed, "target-mask", fnv1a(q.query_id)));
    return apply_target_mask(entry.video, q.gt_spans, mode, rng);
  });
}

}  // namespace cva
