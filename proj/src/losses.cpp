#include "cva/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>

#include "cva/qcd.hpp"

namespace cva {

CbdAnchorMode cbd_anchor_mode_from_string(const std::string& s) {
  if (s == "boundary") return CbdAnchorMode::kBoundary;
  if (s == "all") return CbdAnchorMode::kAllClips;
  if (s == "center") return CbdAnchorMode::kCenter;
  throw std::invalid_argument("cbd anchor mode must be boundary|all|center, got '" + s + "'");
}

void CbdConfig::validate() const {
  if (n_adj < 0 || n_hard < 0) throw std::invalid_argument("cbd config: negative negative counts");
  if (n_adj == 0 && n_hard == 0) throw std::invalid_argument("cbd config: n_adj and n_hard cannot both be 0");
}

double interval_iou(double a_lo, double a_hi, double b_lo, double b_hi) {
  const double inter = std::max(0.0, std::min(a_hi, b_hi) - std::max(a_lo, b_lo));
  const double uni = (a_hi - a_lo) + (b_hi - b_lo) - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

double interval_giou(double a_lo, double a_hi, double b_lo, double b_hi) {
  const double inter = std::max(0.0, std::min(a_hi, b_hi) - std::max(a_lo, b_lo));
  const double uni = (a_hi - a_lo) + (b_hi - b_lo) - inter;
  const double hull = std::max(a_hi, b_hi) - std::min(a_lo, b_lo);
  if (hull <= 0.0) return uni <= 0.0 ? 0.0 : 1.0;
  const double iou = uni > 0.0 ? inter / uni : 0.0;
  return iou - (hull - uni) / hull;
}

double iou_1d(const MomentSpan& a, const MomentSpan& b) {
  return interval_iou(a.start, a.end + 1.0, b.start, b.end + 1.0);
}

double giou_1d(const MomentSpan& a, const MomentSpan& b) {
  return interval_giou(a.start, a.end + 1.0, b.start, b.end + 1.0);
}

namespace {

// Potential-based shortest augmenting path assignment, rows <= cols.
std::vector<int> hungarian_rows_to_cols(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  const int m = static_cast<int>(cost[0].size());
  const double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(m) + 1, 0.0);
  std::vector<int> p(static_cast<size_t>(m) + 1, 0), way(static_cast<size_t>(m) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(m) + 1, kInf);
    std::vector<char> used(static_cast<size_t>(m) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      const int i0 = p[static_cast<size_t>(j0)];
      double delta = kInf;
      int j1 = -1;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const double cur = cost[static_cast<size_t>(i0) - 1][static_cast<size_t>(j) - 1] -
                           u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_of_col(static_cast<size_t>(m), -1);
  for (int j = 1; j <= m; ++j) {
    if (p[static_cast<size_t>(j)] > 0) row_of_col[static_cast<size_t>(j) - 1] = p[static_cast<size_t>(j)] - 1;
  }
  return row_of_col;
}

}  // namespace

std::vector<std::pair<int, int>> hungarian_match(const std::vector<std::vector<double>>& cost) {
  if (cost.empty() || cost[0].empty()) return {};
  const int rows = static_cast<int>(cost.size());
  const int cols = static_cast<int>(cost[0].size());
  for (const auto& row : cost) {
    if (static_cast<int>(row.size()) != cols) throw std::invalid_argument("hungarian: ragged cost matrix");
    for (double c : row) {
      if (!std::isfinite(c)) throw std::invalid_argument("hungarian: non-finite cost");
    }
  }
  std::vector<std::pair<int, int>> out;
  if (rows <= cols) {
    const auto row_of_col = hungarian_rows_to_cols(cost);
    for (int j = 0; j < cols; ++j) {
      if (row_of_col[static_cast<size_t>(j)] >= 0) out.emplace_back(row_of_col[static_cast<size_t>(j)], j);
    }
  } else {
    std::vector<std::vector<double>> t(static_cast<size_t>(cols), std::vector<double>(static_cast<size_t>(rows)));
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) t[static_cast<size_t>(j)][static_cast<size_t>(i)] = cost[static_cast<size_t>(i)][static_cast<size_t>(j)];
    const auto col_of_row = hungarian_rows_to_cols(t);
    for (int i = 0; i < rows; ++i) {
      if (col_of_row[static_cast<size_t>(i)] >= 0) out.emplace_back(i, col_of_row[static_cast<size_t>(i)]);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

Tensor giou_cw(const Tensor& center, const Tensor& width, float gt_lo, float gt_hi) {
  Tensor half = scale(width, 0.5f);
  Tensor lo = sub(center, half);
  Tensor hi = add(center, half);
  Tensor lo2 = Tensor::scalar(gt_lo);
  Tensor hi2 = Tensor::scalar(gt_hi);
  Tensor inter = relu(sub(minimum(hi, hi2), maximum(lo, lo2)));
  Tensor uni = sub(add(width, Tensor::scalar(gt_hi - gt_lo)), inter);
  Tensor iou = div(inter, uni);
  Tensor hull = sub(maximum(hi, hi2), minimum(lo, lo2));
  return sub(iou, div(sub(hull, uni), hull));
}

namespace {

Tensor softplus_scalar(const Tensor& x) {
  // log(1 + e^x) via a stable two-element logsumexp
  return logsumexp(concat_rows({Tensor::zeros({1}), reshape(x, {1})}));
}

Tensor pick(const Tensor& t, int index) {  // scalar view of element `index` along axis 0
  return reshape(slice_rows(t, index, 1), {1});
}

}  // namespace

MrLossResult mr_loss(const ModelOutput& out, const std::vector<MomentSpan>& gt_spans, const LossWeights& w) {
  if (gt_spans.empty()) throw std::invalid_argument("mr_loss: empty ground truth");
  const int n_pred = out.spans_cw.dim(0);
  const int n_gt = static_cast<int>(gt_spans.size());

  std::vector<CenterWidth> gt_cw(static_cast<size_t>(n_gt));
  for (int j = 0; j < n_gt; ++j) gt_cw[static_cast<size_t>(j)] = span_to_center_width(gt_spans[static_cast<size_t>(j)], out.clip_count);

  // match cost shares the loss weights
  std::vector<std::vector<double>> cost(static_cast<size_t>(n_pred), std::vector<double>(static_cast<size_t>(n_gt)));
  for (int i = 0; i < n_pred; ++i) {
    const double c = out.spans_cw.data()[i * 2];
    const double width = out.spans_cw.data()[i * 2 + 1];
    for (int j = 0; j < n_gt; ++j) {
      const CenterWidth& g = gt_cw[static_cast<size_t>(j)];
      const double l1 = std::abs(c - g.center) + std::abs(width - g.width);
      const double gi = interval_giou(c - width / 2, c + width / 2, g.center - g.width / 2.0, g.center + g.width / 2.0);
      cost[static_cast<size_t>(i)][static_cast<size_t>(j)] = w.lambda_l1 * l1 + w.lambda_giou * (1.0 - gi);
    }
  }
  MrLossResult res;
  res.assignment = hungarian_match(cost);

  std::vector<char> matched(static_cast<size_t>(n_pred), 0);
  std::vector<Tensor> terms;
  for (const auto& [i, j] : res.assignment) {
    matched[static_cast<size_t>(i)] = 1;
    Tensor row = slice_rows(out.spans_cw, i, 1);  // [1 x 2]
    Tensor c = reshape(slice_cols(row, 0, 1), {1});
    Tensor width = reshape(slice_cols(row, 1, 1), {1});
    const CenterWidth& g = gt_cw[static_cast<size_t>(j)];
    Tensor l1 = add(abs_val(sub(c, Tensor::scalar(g.center))), abs_val(sub(width, Tensor::scalar(g.width))));
    Tensor gi = giou_cw(c, width, g.center - g.width / 2.0f, g.center + g.width / 2.0f);
    Tensor term = add(scale(l1, w.lambda_l1), scale(sub(Tensor::scalar(1.0f), gi), w.lambda_giou));
    terms.push_back(term);
  }
  Tensor regression = scale(sum_all(concat_rows(terms)), 1.0f / static_cast<float>(n_gt));

  if (!w.confidence_bce) {
    res.loss = regression;
    return res;
  }
  std::vector<Tensor> bce_terms;
  for (int i = 0; i < n_pred; ++i) {
    Tensor logit = pick(out.conf_logits, i);
    Tensor sp = softplus_scalar(logit);
    // bce(logit, target) = softplus(logit) - target * logit
    bce_terms.push_back(matched[static_cast<size_t>(i)] ? sub(sp, logit) : sp);
  }
  Tensor bce = scale(sum_all(concat_rows(bce_terms)), 1.0f / static_cast<float>(n_pred));
  res.loss = add(regression, bce);
  return res;
}

Tensor hd_loss(const ModelOutput& out, const std::vector<int>& labels, const std::vector<MomentSpan>& gt_spans,
               const LossWeights& w, std::mt19937_64& rng, HdTelemetry* telemetry) {
  const int l = out.clip_count;
  if (static_cast<int>(labels.size()) != l) {
    throw std::invalid_argument("hd_loss: label count " + std::to_string(labels.size()) + " != clip count " +
                                std::to_string(l));
  }
  for (int lbl : labels) {
    if (lbl < 0 || lbl > 4) throw std::invalid_argument("hd_loss: label " + std::to_string(lbl) + " outside 0..4");
  }
  std::vector<uint8_t> in_gt(static_cast<size_t>(l), 0);
  for (const MomentSpan& s : gt_spans)
    for (int i = std::max(0, s.start); i <= s.end && i < l; ++i) in_gt[static_cast<size_t>(i)] = 1;

  std::vector<int> fg, bg;
  for (int i = 0; i < l; ++i) (in_gt[static_cast<size_t>(i)] ? fg : bg).push_back(i);

  std::vector<Tensor> parts;

  // margin: one sampled (high, low) pair with label(high) > label(low)
  bool margin_done = false;
  if (!fg.empty() && !bg.empty()) {
    std::uniform_int_distribution<int> fg_dist(0, static_cast<int>(fg.size()) - 1);
    const int high = fg[static_cast<size_t>(fg_dist(rng))];
    std::vector<int> lows;
    for (int j : bg) {
      if (labels[static_cast<size_t>(j)] < labels[static_cast<size_t>(high)]) lows.push_back(j);
    }
    if (!lows.empty()) {
      std::uniform_int_distribution<int> low_dist(0, static_cast<int>(lows.size()) - 1);
      const int low = lows[static_cast<size_t>(low_dist(rng))];
      Tensor margin = relu(add_const(sub(pick(out.saliency, low), pick(out.saliency, high)), w.margin_delta));
      parts.push_back(margin);
      margin_done = true;
    }
  }
  if (!margin_done && telemetry) ++telemetry->margin_skips;

  // rank: hinge over every within-GT pair ordered by label
  std::vector<Tensor> pair_terms;
  for (size_t ai = 0; ai < fg.size(); ++ai) {
    for (size_t bi = 0; bi < fg.size(); ++bi) {
      const int a = fg[ai], b = fg[bi];
      if (labels[static_cast<size_t>(a)] < labels[static_cast<size_t>(b)]) {
        pair_terms.push_back(relu(add_const(sub(pick(out.saliency, a), pick(out.saliency, b)), w.margin_delta)));
      }
    }
  }
  if (!pair_terms.empty()) {
    parts.push_back(scale(sum_all(concat_rows(pair_terms)), 1.0f / static_cast<float>(pair_terms.size())));
  } else if (telemetry) {
    ++telemetry->rank_skips;
  }

  if (parts.empty()) return Tensor::zeros({1});
  return scale(sum_all(concat_rows(parts)), w.lambda_hd);
}

std::vector<int> select_boundary_anchors(const std::vector<MomentSpan>& spans) {
  std::set<int> anchors;
  for (const MomentSpan& s : spans) {
    anchors.insert(s.start);
    anchors.insert(s.end);
  }
  return {anchors.begin(), anchors.end()};
}

std::vector<int> select_anchors(const std::vector<MomentSpan>& spans, CbdAnchorMode mode) {
  std::set<int> anchors;
  switch (mode) {
    case CbdAnchorMode::kBoundary:
      return select_boundary_anchors(spans);
    case CbdAnchorMode::kAllClips:
      for (const MomentSpan& s : spans)
        for (int i = s.start; i <= s.end; ++i) anchors.insert(i);
      break;
    case CbdAnchorMode::kCenter:
      for (const MomentSpan& s : spans) anchors.insert((s.start + s.end) / 2);
      break;
  }
  return {anchors.begin(), anchors.end()};
}

std::vector<int> mine_negatives(const Tensor& f_m, int anchor, const std::vector<uint8_t>& in_gt, int n_adj,
                                int n_hard) {
  const int l = f_m.dim(0);
  const int d = f_m.dim(1);
  if (static_cast<int>(in_gt.size()) != l) throw std::invalid_argument("mine_negatives: gt mask length mismatch");
  std::vector<int> bg;
  for (int i = 0; i < l; ++i) {
    if (!in_gt[static_cast<size_t>(i)]) bg.push_back(i);
  }
  if (bg.empty()) return {};

  std::set<int> result;
  std::vector<int> remaining;
  for (int j : bg) {
    if (std::abs(j - anchor) <= n_adj) result.insert(j);
    else remaining.push_back(j);
  }
  if (n_hard > 0 && !remaining.empty()) {
    const float* anchor_row = f_m.data() + static_cast<size_t>(anchor) * d;
    std::vector<std::pair<double, int>> scored;
    scored.reserve(remaining.size());
    for (int j : remaining) {
      const double s = cosine_similarity(anchor_row, f_m.data() + static_cast<size_t>(j) * d, d);
      scored.emplace_back(-s, j);  // ascending sort -> highest similarity first, ties by index
    }
    std::sort(scored.begin(), scored.end());
    const int take = std::min<int>(n_hard, static_cast<int>(scored.size()));
    for (int t = 0; t < take; ++t) result.insert(scored[static_cast<size_t>(t)].second);
  }
  return {result.begin(), result.end()};
}

Tensor cbd_loss(const Mlp& head, const Tensor& f_m_first, const Tensor& f_m_second,
                const std::vector<MomentSpan>& gt_spans, const CbdConfig& cfg, float tau,
                CbdTelemetry* telemetry) {
  cfg.validate();
  if (tau <= 0.0f) throw std::invalid_argument("cbd_loss: temperature must be positive");
  if (f_m_first.shape() != f_m_second.shape()) {
    throw std::invalid_argument("cbd_loss: view shapes differ, " + shape_str(f_m_first.shape()) + " vs " +
                                shape_str(f_m_second.shape()));
  }
  const int l = f_m_first.dim(0);
  std::vector<uint8_t> in_gt(static_cast<size_t>(l), 0);
  for (const MomentSpan& s : gt_spans)
    for (int i = std::max(0, s.start); i <= s.end && i < l; ++i) in_gt[static_cast<size_t>(i)] = 1;

  const std::vector<int> anchors = select_anchors(gt_spans, cfg.anchor_mode);

  // one shared negative set: union of every anchor's adjacent + mined indices
  std::set<int> negative_set;
  for (int b : anchors) {
    const auto mined = mine_negatives(f_m_first, b, in_gt, cfg.n_adj, cfg.n_hard);
    negative_set.insert(mined.begin(), mined.end());
  }
  if (negative_set.empty()) {
    if (telemetry) ++telemetry->skipped_no_background;
    return Tensor::zeros({1});
  }

  std::vector<Tensor> neg_rows;
  for (int j : negative_set) neg_rows.push_back(slice_rows(f_m_first, j, 1));
  Tensor z_neg = head(concat_rows(neg_rows));  // [n_neg x Dc]
  const int n_neg = z_neg.dim(0);

  std::vector<Tensor> anchor_rows, pos_rows;
  for (int b : anchors) {
    anchor_rows.push_back(slice_rows(f_m_first, b, 1));
    pos_rows.push_back(slice_rows(f_m_second, b, 1));
  }
  Tensor z_anchor = head(concat_rows(anchor_rows));
  Tensor z_pos = head(concat_rows(pos_rows));

  const float inv_tau = 1.0f / tau;
  std::vector<Tensor> per_anchor;
  for (size_t bi = 0; bi < anchors.size(); ++bi) {
    Tensor za = slice_rows(z_anchor, static_cast<int>(bi), 1);
    Tensor zp = slice_rows(z_pos, static_cast<int>(bi), 1);
    Tensor s_p = scale(cosine_similarity_t(za, zp, 1e-8f), inv_tau);
    std::vector<Tensor> scores{s_p};
    for (int j = 0; j < n_neg; ++j) {
      scores.push_back(scale(cosine_similarity_t(za, slice_rows(z_neg, j, 1), 1e-8f), inv_tau));
    }
    per_anchor.push_back(sub(logsumexp(concat_rows(scores)), s_p));
  }
  return scale(sum_all(concat_rows(per_anchor)), 1.0f / static_cast<float>(anchors.size()));
}

TotalLoss total_loss(const ModelOutput& first, const ModelOutput& second, const Mlp& contrast_head,
                     const TextQueryRecord& record, const LossWeights& w, const CbdConfig& cbd_cfg,
                     std::mt19937_64& rng, HdTelemetry* hd_telemetry, CbdTelemetry* cbd_telemetry) {
  TotalLoss out;
  Tensor mr1 = mr_loss(first, record.gt_spans, w).loss;
  Tensor mr2 = mr_loss(second, record.gt_spans, w).loss;
  Tensor hd1 = hd_loss(first, record.saliency_labels, record.gt_spans, w, rng, hd_telemetry);
  Tensor hd2 = hd_loss(second, record.saliency_labels, record.gt_spans, w, rng, hd_telemetry);
  Tensor cbd = cbd_loss(contrast_head, first.f_m, second.f_m, record.gt_spans, cbd_cfg, w.tau, cbd_telemetry);

  Tensor mr_avg = scale(add(mr1, mr2), 0.5f);
  Tensor hd_avg = scale(add(hd1, hd2), 0.5f);
  out.value = add(add(mr_avg, hd_avg), scale(cbd, w.lambda_cbd));
  out.mr = mr_avg.item();
  out.hd = hd_avg.item();
  out.cbd = cbd.item();
  return out;
}

}  // namespace cva
