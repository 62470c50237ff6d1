#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "cva/losses.hpp"
#include "cva/qcd.hpp"
#include "test_util.hpp"

using namespace cva;
using cva::testing::grad_check;
using cva::testing::random_tensor;

namespace {

ModelOutput make_output(std::vector<float> spans_cw, std::vector<float> conf, std::vector<float> saliency,
                        Tensor f_m) {
  ModelOutput out;
  const int n = static_cast<int>(spans_cw.size()) / 2;
  const int n_conf = static_cast<int>(conf.size());
  const int l = static_cast<int>(saliency.size());
  out.spans_cw = Tensor::from_data({n, 2}, std::move(spans_cw));
  out.conf_logits = Tensor::from_data({n_conf}, std::move(conf));
  out.clip_count = l;
  out.saliency = Tensor::from_data({l}, std::move(saliency));
  out.f_m = f_m;
  return out;
}

// exhaustive min-cost one-to-one assignment over min(rows,cols) pairs
double brute_force_assignment_cost(const std::vector<std::vector<double>>& cost) {
  const int rows = static_cast<int>(cost.size());
  const int cols = static_cast<int>(cost[0].size());
  const bool rows_small = rows <= cols;
  const int small = rows_small ? rows : cols;
  const int large = rows_small ? cols : rows;
  std::vector<int> perm(large);
  for (int i = 0; i < large; ++i) perm[i] = i;
  double best = std::numeric_limits<double>::infinity();
  do {
    double total = 0;
    for (int i = 0; i < small; ++i) total += rows_small ? cost[i][perm[i]] : cost[perm[i]][i];
    best = std::min(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

double assignment_cost(const std::vector<std::vector<double>>& cost,
                       const std::vector<std::pair<int, int>>& pairs) {
  double total = 0;
  for (auto [i, j] : pairs) total += cost[i][j];
  return total;
}

// double-precision replica of the 2-layer relu projection head
std::vector<double> project_oracle(const Mlp& head, const float* row, int d) {
  const int h = head.fc1.w.dim(1);
  const int dc = head.fc2.w.dim(1);
  std::vector<double> hidden(h, 0.0);
  for (int j = 0; j < h; ++j) {
    double acc = head.fc1.b.data()[j];
    for (int i = 0; i < d; ++i) acc += static_cast<double>(row[i]) * head.fc1.w.data()[i * h + j];
    hidden[j] = std::max(0.0, acc);
  }
  std::vector<double> out(dc, 0.0);
  for (int j = 0; j < dc; ++j) {
    double acc = head.fc2.b.data()[j];
    for (int i = 0; i < h; ++i) acc += hidden[i] * head.fc2.w.data()[i * dc + j];
    out[j] = acc;
  }
  return out;
}

double cos_d(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// scalar-arithmetic reimplementation of the boundary InfoNCE over two views
double cbd_oracle(const Mlp& head, const Tensor& f1, const Tensor& f2, const std::vector<MomentSpan>& spans,
                  const CbdConfig& cfg, double tau) {
  const int l = f1.dim(0), d = f1.dim(1);
  std::vector<uint8_t> in_gt(l, 0);
  for (const auto& s : spans)
    for (int i = s.start; i <= s.end; ++i) in_gt[i] = 1;
  std::vector<int> anchors = select_anchors(spans, cfg.anchor_mode);
  std::set<int> negs;
  for (int b : anchors) {
    std::vector<std::pair<double, int>> rem;
    for (int j = 0; j < l; ++j) {
      if (in_gt[j]) continue;
      if (std::abs(j - b) <= cfg.n_adj) {
        negs.insert(j);
      } else {
        std::vector<double> rb(f1.data() + b * d, f1.data() + (b + 1) * d);
        std::vector<double> rj(f1.data() + j * d, f1.data() + (j + 1) * d);
        rem.emplace_back(-cos_d(rb, rj), j);
      }
    }
    std::sort(rem.begin(), rem.end());
    for (int t = 0; t < std::min<int>(cfg.n_hard, static_cast<int>(rem.size())); ++t) negs.insert(rem[t].second);
  }
  if (negs.empty()) return 0.0;
  std::vector<std::vector<double>> z_neg;
  for (int j : negs) z_neg.push_back(project_oracle(head, f1.data() + j * d, d));
  double total = 0;
  for (int b : anchors) {
    const auto za = project_oracle(head, f1.data() + b * d, d);
    const auto zp = project_oracle(head, f2.data() + b * d, d);
    const double sp = cos_d(za, zp) / tau;
    double denom = std::exp(sp);
    for (const auto& zn : z_neg) denom += std::exp(cos_d(za, zn) / tau);
    total += -std::log(std::exp(sp) / denom);
  }
  return total / static_cast<double>(anchors.size());
}

}  // namespace

TEST_CASE("interval iou values") {
  CHECK(iou_1d({2, 5}, {2, 5}) == doctest::Approx(1.0));
  CHECK(iou_1d({0, 1}, {5, 9}) == doctest::Approx(0.0));
  // [0,4) vs [2,6): intersection 2, union 6
  CHECK(iou_1d({0, 3}, {2, 5}) == doctest::Approx(2.0 / 6.0));
}

TEST_CASE("generalized iou values") {
  CHECK(giou_1d({1, 4}, {1, 4}) == doctest::Approx(1.0));
  // [0,1) vs [2,3): iou 0, hull [0,3), gap 1 -> -1/3
  CHECK(giou_1d({0, 0}, {2, 2}) == doctest::Approx(-1.0 / 3.0));
  // touching [0,1) vs [1,2): zero overlap, zero gap
  CHECK(giou_1d({0, 0}, {1, 1}) == doctest::Approx(0.0));
  // bounded in [-1, 1] and equal to iou for overlapping spans
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> d(0, 20);
  for (int t = 0; t < 500; ++t) {
    MomentSpan a{d(rng), 0}, b{d(rng), 0};
    a.end = a.start + d(rng) % 8;
    b.end = b.start + d(rng) % 8;
    const double g = giou_1d(a, b);
    CHECK(g >= -1.0);
    CHECK(g <= 1.0);
    const bool overlap = std::max(a.start, b.start) <= std::min(a.end, b.end);
    if (overlap) CHECK(g == doctest::Approx(iou_1d(a, b)));
  }
}

TEST_CASE("differentiable giou matches the scalar formula") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<float> cdist(0.1f, 0.9f), wdist(0.05f, 0.5f);
  for (int t = 0; t < 100; ++t) {
    const float c = cdist(rng), w = wdist(rng);
    const float glo = cdist(rng) - 0.3f, ghi = glo + wdist(rng);
    Tensor ct = Tensor::scalar(c), wt = Tensor::scalar(w);
    const double expect = interval_giou(c - w / 2, c + w / 2, glo, ghi);
    CHECK(giou_cw(ct, wt, glo, ghi).item() == doctest::Approx(expect).epsilon(1e-5));
  }
  // gradient flows
  Tensor c = Tensor::param({1}, {0.5f});
  Tensor w = Tensor::param({1}, {0.3f});
  auto res = grad_check({c, w}, [&] { return giou_cw(c, w, 0.2f, 0.6f); }, 1e-3, 1e-3);
  INFO(res.detail);
  CHECK(res.ok);
}

TEST_CASE("hungarian known cases") {
  auto one = hungarian_match({{3.0}});
  REQUIRE(one.size() == 1);
  CHECK(one[0] == std::pair<int, int>{0, 0});

  auto diag = hungarian_match({{1, 2}, {2, 1}});
  REQUIRE(diag.size() == 2);
  CHECK(diag[0] == std::pair<int, int>{0, 0});
  CHECK(diag[1] == std::pair<int, int>{1, 1});

  // 3 predictions, 1 target: argmin row wins
  auto tall = hungarian_match({{5.0}, {1.0}, {3.0}});
  REQUIRE(tall.size() == 1);
  CHECK(tall[0] == std::pair<int, int>{1, 0});
}

TEST_CASE("hungarian equals exhaustive search on random matrices") {
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> cost_dist(0.0, 10.0);
  std::uniform_int_distribution<int> size_dist(1, 6);
  for (int t = 0; t < 100; ++t) {
    const int rows = size_dist(rng), cols = size_dist(rng);
    std::vector<std::vector<double>> cost(rows, std::vector<double>(cols));
    for (auto& row : cost)
      for (double& c : row) c = cost_dist(rng);
    const auto pairs = hungarian_match(cost);
    REQUIRE(static_cast<int>(pairs.size()) == std::min(rows, cols));
    CHECK(assignment_cost(cost, pairs) == doctest::Approx(brute_force_assignment_cost(cost)).epsilon(1e-9));
  }
}

TEST_CASE("mr_loss contracts and examples") {
  std::mt19937_64 rng(3);
  Tensor f_m = random_tensor({10, 4}, rng);
  LossWeights w;
  w.confidence_bce = false;

  SUBCASE("empty ground truth is a contract error") {
    auto out = make_output({0.5f, 0.2f}, {0.0f}, std::vector<float>(10, 0.0f), f_m);
    CHECK_THROWS_AS(mr_loss(out, {}, w), std::invalid_argument);
  }

  SUBCASE("exact prediction has zero regression loss") {
    // gt {2,5} in a 10-clip video -> center 0.4 width 0.4
    auto out = make_output({0.4f, 0.4f}, {0.0f}, std::vector<float>(10, 0.0f), f_m);
    auto res = mr_loss(out, {{2, 5}}, w);
    CHECK(res.loss.item() == doctest::Approx(0.0).epsilon(1e-6));
    REQUIRE(res.assignment.size() == 1);
    CHECK(res.assignment[0] == std::pair<int, int>{0, 0});
  }

  SUBCASE("doubling lambda_l1 doubles the l1 component") {
    auto out = make_output({0.3f, 0.3f}, {0.0f}, std::vector<float>(10, 0.0f), f_m);
    LossWeights only_l1 = w;
    only_l1.lambda_giou = 0.0f;
    const double base = mr_loss(out, {{2, 5}}, only_l1).loss.item();
    only_l1.lambda_l1 *= 2.0f;
    CHECK(mr_loss(out, {{2, 5}}, only_l1).loss.item() == doctest::Approx(2.0 * base).epsilon(1e-6));
  }

  SUBCASE("crossed predictions match the iou-maximizing pairing") {
    // pred0 ~ gt1, pred1 ~ gt0
    const CenterWidth g0 = span_to_center_width({1, 2}, 10);
    const CenterWidth g1 = span_to_center_width({6, 9}, 10);
    auto out = make_output({g1.center + 0.01f, g1.width, g0.center - 0.01f, g0.width}, {0, 0},
                           std::vector<float>(10, 0.0f), f_m);
    auto res = mr_loss(out, {{1, 2}, {6, 9}}, w);
    REQUIRE(res.assignment.size() == 2);
    CHECK(res.assignment[0] == std::pair<int, int>{0, 1});
    CHECK(res.assignment[1] == std::pair<int, int>{1, 0});
  }

  SUBCASE("confidence supervision pushes matched up and unmatched down") {
    auto out = make_output({0.4f, 0.4f, 0.9f, 0.1f}, {0.0f, 0.0f}, std::vector<float>(10, 0.0f), f_m);
    LossWeights with_bce = w;
    with_bce.confidence_bce = true;
    // both logits 0: bce = (softplus(0) - 0) + softplus(0) averaged = ln 2
    const double base = mr_loss(out, {{2, 5}}, w).loss.item();
    const double with_conf = mr_loss(out, {{2, 5}}, with_bce).loss.item();
    CHECK(with_conf - base == doctest::Approx(std::log(2.0)).epsilon(1e-5));
  }
}

TEST_CASE("hd_loss examples") {
  std::mt19937_64 rng(4);
  Tensor f_m = random_tensor({8, 4}, rng);
  LossWeights w;
  const std::vector<MomentSpan> gt = {{2, 5}};
  const std::vector<int> labels = {0, 0, 3, 4, 4, 3, 0, 0};

  SUBCASE("satisfied hinge gives zero margin term, ordered labels give zero rank term") {
    // saliency = 10 * label: every hinge is slack
    std::vector<float> sal(8);
    for (int i = 0; i < 8; ++i) sal[i] = 10.0f * labels[i];
    auto out = make_output({0.5f, 0.5f}, {0.0f}, sal, f_m);
    std::mt19937_64 r(1);
    CHECK(hd_loss(out, labels, gt, w, r).item() == doctest::Approx(0.0));
  }

  SUBCASE("uniform labels inside GT produce no rank pairs") {
    const std::vector<int> flat = {0, 0, 3, 3, 3, 3, 0, 0};
    std::vector<float> sal(8, 0.0f);
    auto out = make_output({0.5f, 0.5f}, {0.0f}, sal, f_m);
    std::mt19937_64 r(1);
    HdTelemetry tel;
    // margin term remains: delta + 0 - 0 = 0.2
    CHECK(hd_loss(out, flat, gt, w, r, &tel).item() == doctest::Approx(0.2));
    CHECK(tel.rank_skips == 1);
  }

  SUBCASE("no background clips skips the margin term") {
    const std::vector<MomentSpan> all = {{0, 7}};
    const std::vector<int> lab = {3, 4, 4, 4, 4, 4, 4, 3};
    auto out = make_output({0.5f, 0.5f}, {0.0f}, std::vector<float>(8, 0.0f), f_m);
    std::mt19937_64 r(1);
    HdTelemetry tel;
    const double v = hd_loss(out, lab, all, w, r, &tel).item();
    CHECK(tel.margin_skips == 1);
    CHECK(v == doctest::Approx(0.2));  // rank term over 3-vs-4 pairs, all hinges = delta
  }

  SUBCASE("violated margin is linear in the gap") {
    // one GT clip, one background clip, saliency favoring background by 1
    const std::vector<MomentSpan> tiny = {{0, 0}};
    const std::vector<int> lab = {4, 0};
    auto out = make_output({0.5f, 0.5f}, {0.0f}, {0.0f, 1.0f}, f_m);
    std::mt19937_64 r(1);
    CHECK(hd_loss(out, lab, tiny, w, r).item() == doctest::Approx(1.2));
  }
}

TEST_CASE("boundary anchor selection") {
  CHECK(select_boundary_anchors({{5, 9}}) == std::vector<int>{5, 9});
  CHECK(select_boundary_anchors({{4, 4}}) == std::vector<int>{4});
  CHECK(select_boundary_anchors({{2, 3}, {8, 9}}) == std::vector<int>{2, 3, 8, 9});
  CHECK(select_anchors({{2, 6}}, CbdAnchorMode::kAllClips) == std::vector<int>{2, 3, 4, 5, 6});
  CHECK(select_anchors({{2, 6}}, CbdAnchorMode::kCenter) == std::vector<int>{4});
}

TEST_CASE("mine_negatives follows the adjacency and hardness rules") {
  std::mt19937_64 rng(9);

  SUBCASE("adjacent background indices around the anchor") {
    // G = {5..9}, L = 12, anchor 5, n_adj 2 -> {3,4}
    Tensor f_m = random_tensor({12, 4}, rng);
    std::vector<uint8_t> in_gt(12, 0);
    for (int i = 5; i <= 9; ++i) in_gt[i] = 1;
    CHECK(mine_negatives(f_m, 5, in_gt, 2, 0) == std::vector<int>{3, 4});
  }

  SUBCASE("saturating n_hard takes all remaining background") {
    Tensor f_m = random_tensor({10, 4}, rng);
    std::vector<uint8_t> in_gt(10, 0);
    for (int i = 4; i <= 6; ++i) in_gt[i] = 1;
    auto negs = mine_negatives(f_m, 4, in_gt, 1, 100);
    CHECK(negs == std::vector<int>{0, 1, 2, 3, 7, 8, 9});
  }

  SUBCASE("the most similar background clip is mined first") {
    // clip 7 identical to the anchor's feature row
    std::vector<float> rows(10 * 3, 0.0f);
    auto set_row = [&](int r, float a, float b, float c) {
      rows[r * 3] = a;
      rows[r * 3 + 1] = b;
      rows[r * 3 + 2] = c;
    };
    for (int r = 0; r < 10; ++r) set_row(r, 0.1f, -0.9f, 0.3f);
    set_row(4, 1, 0, 0);   // anchor
    set_row(7, 1, 0, 0);   // identical background clip
    Tensor f_m = Tensor::from_data({10, 3}, rows);
    std::vector<uint8_t> in_gt(10, 0);
    in_gt[4] = 1;
    auto negs = mine_negatives(f_m, 4, in_gt, 0, 1);
    CHECK(negs == std::vector<int>{7});
  }

  SUBCASE("empty background yields empty result") {
    Tensor f_m = random_tensor({4, 3}, rng);
    std::vector<uint8_t> in_gt(4, 1);
    CHECK(mine_negatives(f_m, 0, in_gt, 2, 2).empty());
  }

  SUBCASE("negatives are always disjoint from GT") {
    for (int trial = 0; trial < 50; ++trial) {
      std::uniform_int_distribution<int> ld(4, 20);
      const int l = ld(rng);
      Tensor f_m = random_tensor({l, 5}, rng);
      std::uniform_int_distribution<int> sd(0, l - 2);
      const int s = sd(rng);
      std::uniform_int_distribution<int> ed(s, l - 1);
      const int e = ed(rng);
      std::vector<uint8_t> in_gt(l, 0);
      for (int i = s; i <= e; ++i) in_gt[i] = 1;
      std::uniform_int_distribution<int> par(0, 3);
      for (int b : {s, e}) {
        for (int j : mine_negatives(f_m, b, in_gt, par(rng), par(rng) + 1)) CHECK(in_gt[j] == 0);
      }
    }
  }
}

TEST_CASE("cbd_loss closed-form cases") {
  std::mt19937_64 rng(21);
  ParamRegistry reg;
  Mlp head(reg, "head", 3, 3, 3, rng);

  SUBCASE("one anchor, one negative, equal similarities give ln 2") {
    // span {1}, background {0,2}; f''[1] == f'[0] so z_pos == z_neg
    std::vector<float> f1 = {
        0.9f, 0.1f, 0.05f,  // row 0: the negative, mined as hardest
        1.0f, 0.0f, 0.0f,   // row 1: anchor
        -0.5f, 0.8f, 0.2f,  // row 2: dissimilar background
    };
    std::vector<float> f2 = f1;
    f2[3] = 0.9f;
    f2[4] = 0.1f;
    f2[5] = 0.05f;  // positive equals row 0 of view 1
    CbdConfig cfg;
    cfg.n_adj = 0;
    cfg.n_hard = 1;
    // ensure row 0 really is the hardest: cos(anchor, row0) > cos(anchor, row2)
    REQUIRE(cosine_similarity(f1.data() + 3, f1.data(), 3) > cosine_similarity(f1.data() + 3, f1.data() + 6, 3));
    Tensor t1 = Tensor::from_data({3, 3}, f1);
    Tensor t2 = Tensor::from_data({3, 3}, f2);
    const double loss = cbd_loss(head, t1, t2, {{1, 1}}, cfg, 0.07f).item();
    CHECK(loss == doctest::Approx(std::log(2.0)).epsilon(1e-5));
  }

  SUBCASE("dominant positive drives the loss to zero") {
    // identity head (relu shifted into its linear range) so the projected
    // vectors equal the inputs exactly
    ParamRegistry reg2;
    std::mt19937_64 r2(1);
    Mlp ident(reg2, "ident", 3, 3, 3, r2);
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        ident.fc1.w.data()[i * 3 + j] = i == j ? 1.0f : 0.0f;
        ident.fc2.w.data()[i * 3 + j] = i == j ? 1.0f : 0.0f;
      }
      ident.fc1.b.data()[i] = 2.0f;
      ident.fc2.b.data()[i] = -2.0f;
    }
    std::vector<float> f1 = {
        1.0f, 0.0f, 0.0f,  // background, orthogonal to the anchor
        0.0f, 1.0f, 0.0f,  // anchor
        0.0f, 0.0f, 1.0f,  // background, orthogonal to the anchor
    };
    CbdConfig cfg;
    cfg.n_adj = 2;
    cfg.n_hard = 0;
    Tensor t1 = Tensor::from_data({3, 3}, f1);
    // identical views: s_p = 1/tau with orthogonal negatives at 0; tiny tau
    // makes the positive dominate completely
    const double loss = cbd_loss(ident, t1, t1, {{1, 1}}, cfg, 0.001f).item();
    CHECK(loss == doctest::Approx(0.0).epsilon(1e-4));
  }

  SUBCASE("two anchors and three negatives match the scalar oracle") {
    std::mt19937_64 r2(33);
    Tensor f1 = random_tensor({9, 3}, r2);
    Tensor f2 = random_tensor({9, 3}, r2);
    CbdConfig cfg;
    cfg.n_adj = 1;
    cfg.n_hard = 1;
    const std::vector<MomentSpan> spans = {{3, 5}};
    // tau = 0.5 keeps the fp32 score roundoff below the comparison tolerance
    const double expect = cbd_oracle(head, f1, f2, spans, cfg, 0.5);
    CHECK(cbd_loss(head, f1, f2, spans, cfg, 0.5f).item() == doctest::Approx(expect).epsilon(1e-5));
  }

  SUBCASE("no background skips with telemetry") {
    Tensor f1 = random_tensor({4, 3}, rng);
    CbdTelemetry tel;
    CbdConfig cfg;
    const double loss = cbd_loss(head, f1, f1, {{0, 3}}, cfg, 0.07f, &tel).item();
    CHECK(loss == 0.0);
    CHECK(tel.skipped_no_background == 1);
  }
}

TEST_CASE("cbd_loss monotonicity invariants") {
  std::mt19937_64 rng(55);
  ParamRegistry reg;
  Mlp head(reg, "head", 4, 4, 4, rng);
  Tensor f1 = random_tensor({12, 4}, rng);
  Tensor f2 = random_tensor({12, 4}, rng);
  const std::vector<MomentSpan> spans = {{4, 7}};

  SUBCASE("loss is nonnegative on random fixtures") {
    for (int t = 0; t < 20; ++t) {
      Tensor a = random_tensor({12, 4}, rng);
      Tensor b = random_tensor({12, 4}, rng);
      CbdConfig cfg;
      CHECK(cbd_loss(head, a, b, spans, cfg, 0.07f).item() >= 0.0);
    }
  }

  SUBCASE("growing n_hard never decreases the loss on fixed features") {
    double prev = -1.0;
    for (int nh = 0; nh <= 8; ++nh) {
      CbdConfig cfg;
      cfg.n_adj = 1;
      cfg.n_hard = nh;
      const double v = cbd_loss(head, f1, f2, spans, cfg, 0.07f).item();
      CHECK(v >= prev - 1e-6);
      prev = v;
    }
  }

  SUBCASE("pulling the positive toward the anchor reduces the loss") {
    CbdConfig cfg;
    Tensor closer = f2.clone();
    // move the boundary rows of view 2 toward view 1
    for (int b : {4, 7}) {
      for (int j = 0; j < 4; ++j) {
        closer.data()[b * 4 + j] = 0.9f * f1.data()[b * 4 + j] + 0.1f * f2.data()[b * 4 + j];
      }
    }
    CHECK(cbd_loss(head, f1, closer, spans, cfg, 0.07f).item() <
          cbd_loss(head, f1, f2, spans, cfg, 0.07f).item());
  }
}

TEST_CASE("loss gradients pass finite-difference checks") {
  for (uint64_t seed = 1; seed <= 3; ++seed) {
    std::mt19937_64 rng(seed);
    CAPTURE(seed);
    ParamRegistry reg;
    Mlp head(reg, "head", 4, 4, 4, rng);
    // near-identity head: keeps the projected vectors well away from zero
    // norm, where the cosine curvature would swamp the difference step
    std::uniform_real_distribution<float> jitter(-0.1f, 0.1f);
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 4; ++j) {
        head.fc1.w.data()[i * 4 + j] = (i == j ? 1.0f : 0.0f) + jitter(rng);
        head.fc2.w.data()[i * 4 + j] = (i == j ? 1.0f : 0.0f) + jitter(rng);
      }
      head.fc1.b.data()[i] = 0.5f + jitter(rng);
      head.fc2.b.data()[i] = jitter(rng);
    }
    Tensor raw_spans = random_tensor({3, 2}, rng, -0.8f, 0.8f, true);
    Tensor raw_conf = random_tensor({3}, rng, -0.5f, 0.5f, true);
    Tensor raw_sal = random_tensor({8}, rng, -0.5f, 0.5f, true);
    Tensor f1 = random_tensor({8, 4}, rng, -1, 1, true);
    Tensor f2 = random_tensor({8, 4}, rng, -1, 1, true);
    const std::vector<MomentSpan> gt = {{2, 4}};
    const std::vector<int> labels = {0, 0, 3, 4, 3, 0, 0, 0};
    LossWeights w;

    auto build_out = [&](const Tensor& fm) {
      ModelOutput out;
      out.spans_cw = sigmoid(raw_spans);
      out.conf_logits = raw_conf;
      out.saliency = raw_sal;
      out.f_m = fm;
      out.clip_count = 8;
      return out;
    };

    auto mr_f = [&] { return mr_loss(build_out(f1), gt, w).loss; };
    auto res = grad_check({raw_spans, raw_conf}, mr_f, 1e-3, 1e-3);
    INFO("mr: " << res.detail);
    CHECK(res.ok);

    auto hd_f = [&] {
      std::mt19937_64 r(7);  // frozen pair sampling
      return hd_loss(build_out(f1), labels, gt, w, r);
    };
    res = grad_check({raw_sal}, hd_f, 1e-3, 1e-3);
    INFO("hd: " << res.detail);
    CHECK(res.ok);

    CbdConfig cfg;
    cfg.n_adj = 1;
    cfg.n_hard = 2;
    auto cbd_f = [&] { return cbd_loss(head, f1, f2, gt, cfg, 0.07f); };
    std::vector<Tensor> cbd_params = {f1, f2};
    for (auto& [name, t] : reg.items()) cbd_params.push_back(t);
    res = grad_check(cbd_params, cbd_f, 1e-3, 1e-3);
    INFO("cbd: " << res.detail);
    CHECK(res.ok);
  }
}

TEST_CASE("total_loss composition") {
  std::mt19937_64 rng(77);
  ParamRegistry reg;
  Mlp head(reg, "head", 4, 4, 4, rng);
  TextQueryRecord rec;
  rec.query_id = "q";
  rec.video_id = "v";
  rec.gt_spans = {{2, 4}};
  rec.saliency_labels = {0, 0, 3, 4, 3, 0, 0, 0};

  auto out1 = make_output({0.4f, 0.3f, 0.8f, 0.2f}, {0.3f, -0.2f},
                          {0.1f, 0.2f, 0.9f, 1.0f, 0.8f, 0.1f, 0.0f, 0.2f}, random_tensor({8, 4}, rng));
  auto out2 = make_output({0.45f, 0.25f, 0.7f, 0.3f}, {0.1f, 0.1f},
                          {0.0f, 0.1f, 0.8f, 1.1f, 0.7f, 0.2f, 0.1f, 0.1f}, random_tensor({8, 4}, rng));

  SUBCASE("lambda_cbd = 0 reduces to MR+HD") {
    LossWeights w;
    w.lambda_cbd = 0.0f;
    std::mt19937_64 r1(5), r2(5);
    CbdConfig cfg;
    TotalLoss t = total_loss(out1, out2, head, rec, w, cfg, r1);
    const double mr = 0.5 * (mr_loss(out1, rec.gt_spans, w).loss.item() +
                             mr_loss(out2, rec.gt_spans, w).loss.item());
    ModelOutput o1 = out1, o2 = out2;
    const double hd = 0.5 * (hd_loss(o1, rec.saliency_labels, rec.gt_spans, w, r2).item() +
                             hd_loss(o2, rec.saliency_labels, rec.gt_spans, w, r2).item());
    CHECK(t.value.item() == doctest::Approx(mr + hd).epsilon(1e-6));
    CHECK(t.cbd == doctest::Approx(cbd_loss(head, out1.f_m, out2.f_m, rec.gt_spans, cfg, w.tau).item()));
  }

  SUBCASE("all weights zero with confidence supervision off gives exactly zero") {
    LossWeights w;
    w.lambda_l1 = w.lambda_giou = w.lambda_hd = w.lambda_cbd = 0.0f;
    w.confidence_bce = false;
    std::mt19937_64 r(5);
    CbdConfig cfg;
    CHECK(total_loss(out1, out2, head, rec, w, cfg, r).value.item() == doctest::Approx(0.0));
  }

  SUBCASE("default weights decompose into the separately computed terms") {
    LossWeights w;
    std::mt19937_64 r1(9), r2(9);
    CbdConfig cfg;
    TotalLoss t = total_loss(out1, out2, head, rec, w, cfg, r1);
    ModelOutput o1 = out1, o2 = out2;
    const double mr = 0.5 * (mr_loss(o1, rec.gt_spans, w).loss.item() +
                             mr_loss(o2, rec.gt_spans, w).loss.item());
    const double hd = 0.5 * (hd_loss(o1, rec.saliency_labels, rec.gt_spans, w, r2).item() +
                             hd_loss(o2, rec.saliency_labels, rec.gt_spans, w, r2).item());
    const double cbd = cbd_loss(head, out1.f_m, out2.f_m, rec.gt_spans, cfg, w.tau).item();
    CHECK(t.value.item() == doctest::Approx(mr + hd + 0.005 * cbd).epsilon(1e-5));
    CHECK(t.mr == doctest::Approx(mr));
    CHECK(t.hd == doctest::Approx(hd));
    CHECK(t.cbd == doctest::Approx(cbd));
  }
}
