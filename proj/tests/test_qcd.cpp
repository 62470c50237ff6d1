#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "cva/qcd.hpp"
#include "test_util.hpp"

using namespace cva;

namespace {

SyntheticConfig small_cfg() {
  SyntheticConfig cfg;
  cfg.n_videos = 10;
  cfg.clip_count = 16;
  cfg.feature_dim = 8;
  cfg.n_concepts = 3;
  cfg.moment_min = 3;
  cfg.moment_max = 6;
  return cfg;
}

FeatureSequence random_video(const std::string& id, int l, int d, std::mt19937_64& rng) {
  FeatureSequence v;
  v.video_id = id;
  v.features = cva::testing::random_tensor({l, d}, rng);
  return v;
}

TextQueryRecord random_query(const std::string& id, const std::string& vid, int d, std::mt19937_64& rng) {
  TextQueryRecord q;
  q.query_id = id;
  q.video_id = vid;
  q.pooled_feature = cva::testing::random_tensor({d}, rng);
  q.token_features = cva::testing::random_tensor({1, d}, rng);
  q.gt_spans = {{0, 1}};
  return q;
}

}  // namespace

TEST_CASE("cosine similarity values") {
  std::vector<float> u = {1, 1};
  std::vector<float> e1 = {1, 0};
  std::vector<float> e2 = {0, 1};
  CHECK(cosine_similarity(u, u) == doctest::Approx(1.0));
  CHECK(cosine_similarity(e1, e2) == doctest::Approx(0.0));
  CHECK(cosine_similarity(u, e1) == doctest::Approx(0.70711).epsilon(1e-5));
  std::vector<float> z = {0, 0};
  CHECK_THROWS_AS(cosine_similarity(u, z), std::invalid_argument);
}

TEST_CASE("population statistics by hand") {
  PopulationStats st = population_stats({0.8f, 0.6f});
  CHECK(st.mean == doctest::Approx(0.7));
  CHECK(st.stddev == doctest::Approx(0.1));
}

TEST_CASE("percentile interpolation rule") {
  std::vector<float> v = {1, 2, 3, 4, 5};
  CHECK(percentile(v, 10) == doctest::Approx(1.4));
  CHECK(percentile(v, 0) == doctest::Approx(1.0));
  CHECK(percentile(v, 100) == doctest::Approx(5.0));
  CHECK(percentile({7.5f}, 33.0) == doctest::Approx(7.5));
  CHECK_THROWS_AS(percentile({}, 50.0), std::invalid_argument);

  // random lists against the stated rule computed independently
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> qd(0, 100);
  for (int trial = 0; trial < 200; ++trial) {
    std::uniform_int_distribution<int> nd(1, 40);
    const int n = nd(rng);
    std::vector<float> vals(static_cast<size_t>(n));
    std::uniform_real_distribution<float> vd(-3, 3);
    for (float& x : vals) x = vd(rng);
    std::sort(vals.begin(), vals.end());
    const double q = qd(rng);
    const double pos = q / 100.0 * (n - 1);
    const size_t lo = static_cast<size_t>(pos);
    const double frac = pos - static_cast<double>(lo);
    const double expect = lo + 1 >= vals.size() ? vals.back() : vals[lo] + frac * (vals[lo + 1] - vals[lo]);
    CHECK(percentile(vals, q) == doctest::Approx(expect).epsilon(1e-9));
  }
}

TEST_CASE("similarity stats percentile extremes and recomputation") {
  auto cfg = small_cfg();
  Dataset ds = generate_synthetic(cfg, 12);
  SimilarityStats st = compute_similarity_stats(ds, 0, 100);
  CHECK(st.theta_min == doctest::Approx(st.s_non.front()));
  CHECK(st.theta_max == doctest::Approx(st.s_gt.back()));
  // stored means/stds recompute from the stored populations
  PopulationStats gt = population_stats(st.s_gt);
  PopulationStats non = population_stats(st.s_non);
  CHECK(st.mu_gt == doctest::Approx(gt.mean).epsilon(1e-6));
  CHECK(st.sigma_gt == doctest::Approx(gt.stddev).epsilon(1e-6));
  CHECK(st.mu_non == doctest::Approx(non.mean).epsilon(1e-6));
  CHECK(st.sigma_non == doctest::Approx(non.stddev).epsilon(1e-6));
  // population sizes: clips x queries split between the two sets
  long total = 0;
  for (const auto& v : ds.videos) total += v.video.clip_count();
  CHECK(st.s_gt.size() + st.s_non.size() == static_cast<size_t>(total) * ds.total_queries());
}

TEST_CASE("theta thresholds are monotone in alpha and beta") {
  auto cfg = small_cfg();
  Dataset ds = generate_synthetic(cfg, 13);
  double prev_min = -2.0;
  for (double alpha : {0.0, 10.0, 30.0, 60.0, 90.0, 100.0}) {
    SimilarityStats st = compute_similarity_stats(ds, alpha, 60);
    CHECK(st.theta_min >= prev_min);
    prev_min = st.theta_min;
  }
  double prev_max = -2.0;
  for (double beta : {0.0, 10.0, 30.0, 60.0, 90.0, 100.0}) {
    SimilarityStats st = compute_similarity_stats(ds, 10, beta);
    CHECK(st.theta_max >= prev_max);
    prev_max = st.theta_max;
  }
}

TEST_CASE("widening beta never shrinks candidate pools") {
  auto cfg = small_cfg();
  cfg.noise = 0.2f;
  Dataset ds = generate_synthetic(cfg, 23);
  SimilarityStats narrow = compute_similarity_stats(ds, 10, 40);
  SimilarityStats wide = compute_similarity_stats(ds, 10, 100);
  for (const auto& ve : ds.videos) {
    for (const auto& qe : ds.videos) {
      if (qe.video.video_id == ve.video.video_id) continue;
      const auto& q = qe.queries[0];
      CandidatePool a = build_candidate_pool(ve.video, q, narrow);
      CandidatePool b = build_candidate_pool(ve.video, q, wide);
      CHECK(b.size() >= a.size());
    }
  }
}

TEST_CASE("candidate pool band filtering") {
  std::mt19937_64 rng(3);
  FeatureSequence v = random_video("vb", 8, 6, rng);
  TextQueryRecord q = random_query("q0", "va", 6, rng);

  SimilarityStats all_band;
  all_band.theta_min = -1.0;
  all_band.theta_max = 1.0;
  CHECK(build_candidate_pool(v, q, all_band).size() == 8);

  SimilarityStats impossible;
  impossible.theta_min = 2.0;
  impossible.theta_max = 3.0;
  CHECK(build_candidate_pool(v, q, impossible).empty());
}

TEST_CASE("candidate pool picks exactly the in-band indices") {
  // four clips with similarities 0.1 / 0.3 / 0.5 / 0.9 to the query
  const int d = 4;
  std::vector<float> rows;
  auto clip_with_cos = [&](double c) {
    // unit query along e0; clip = c*e0 + sqrt(1-c^2)*e1
    rows.push_back(static_cast<float>(c));
    rows.push_back(static_cast<float>(std::sqrt(1.0 - c * c)));
    rows.push_back(0);
    rows.push_back(0);
  };
  clip_with_cos(0.1);
  clip_with_cos(0.3);
  clip_with_cos(0.5);
  clip_with_cos(0.9);
  FeatureSequence v;
  v.video_id = "vb";
  v.features = Tensor::from_data({4, d}, rows);
  TextQueryRecord q;
  q.query_id = "q";
  q.video_id = "va";
  q.pooled_feature = Tensor::from_data({d}, {1, 0, 0, 0});
  SimilarityStats band;
  band.theta_min = 0.25;
  band.theta_max = 0.6;
  CandidatePool pool = build_candidate_pool(v, q, band);
  CHECK(pool.clip_indices == std::vector<int>{1, 2});
}

TEST_CASE("pool equals brute-force filter on random instances") {
  std::mt19937_64 rng(29);
  std::uniform_real_distribution<double> band_lo(-0.8, 0.2);
  std::uniform_real_distribution<double> band_w(0.0, 1.2);
  for (int trial = 0; trial < 1000; ++trial) {
    std::uniform_int_distribution<int> ld(1, 12);
    const int l = ld(rng);
    FeatureSequence v = random_video("vb", l, 5, rng);
    TextQueryRecord q = random_query("q", "va", 5, rng);
    SimilarityStats st;
    st.theta_min = band_lo(rng);
    st.theta_max = st.theta_min + band_w(rng);
    CandidatePool pool = build_candidate_pool(v, q, st);
    std::vector<int> naive;
    for (int k = 0; k < l; ++k) {
      const double s = cosine_similarity(v.features.data() + k * 5, q.pooled_feature.data(), 5);
      if (s >= st.theta_min && s <= st.theta_max) naive.push_back(k);
    }
    REQUIRE(pool.clip_indices == naive);
    for (float s : pool.similarities) {
      CHECK(s >= st.theta_min);
      CHECK(s <= st.theta_max);
    }
  }
}

TEST_CASE("extended context dilates spans") {
  auto ext = extended_context({{5, 7}}, 12, 1);
  for (int i = 0; i < 12; ++i) CHECK(static_cast<bool>(ext[i]) == (i >= 4 && i <= 8));
  // clamped at the edges
  auto edge = extended_context({{0, 1}, {10, 11}}, 12, 2);
  for (int i = 0; i < 12; ++i) CHECK(static_cast<bool>(edge[i]) == (i <= 3 || i >= 8));
}

TEST_CASE("preserving mask selection rule") {
  std::mt19937_64 rng(4);
  SUBCASE("exact count outside the context window") {
    PreservingMask m = build_preserving_mask({{4, 5}}, 10, 1, 0.3f, rng);
    int zeros = 0;
    for (int i = 0; i < 10; ++i) {
      if (!m.bits[i]) {
        ++zeros;
        CHECK((i < 3 || i > 6));
      }
    }
    CHECK(zeros == 3);  // floor(0.3 * 10)
  }
  SUBCASE("saturation when the ratio exceeds the background") {
    PreservingMask m = build_preserving_mask({{2, 9}}, 12, 1, 0.9f, rng);
    // context covers 1..10, only 0 and 11 are replaceable
    CHECK(m.bits[0] == 0);
    CHECK(m.bits[11] == 0);
    for (int i = 1; i <= 10; ++i) CHECK(m.bits[i] == 1);
  }
  SUBCASE("full-cover context yields all-ones mask") {
    PreservingMask m = build_preserving_mask({{0, 9}}, 10, 1, 0.3f, rng);
    for (uint8_t b : m.bits) CHECK(b == 1);
  }
}

TEST_CASE("mix follows the mask and pool fallback rules") {
  std::mt19937_64 rng(5);
  FeatureSequence a = random_video("va", 3, 4, rng);
  FeatureSequence b = random_video("vb", 1, 4, rng);

  CandidatePool pool;
  pool.source_video_id = "vb";
  pool.clip_indices = {0};
  pool.similarities = {0.5f};
  pool.clip_features = b.features.clone();

  SUBCASE("all-ones mask is the identity") {
    PreservingMask m{{1, 1, 1}, 0.3f, 1};
    MixTelemetry t;
    FeatureSequence out = mix(a, m, pool, rng, &t);
    CHECK(std::memcmp(out.features.data(), a.features.data(), sizeof(float) * a.features.size()) == 0);
    CHECK(t.replaced == 0);
  }

  SUBCASE("zero bits pull from the pool") {
    PreservingMask m{{1, 1, 0}, 0.3f, 1};
    MixTelemetry t;
    FeatureSequence out = mix(a, m, pool, rng, &t);
    CHECK(std::memcmp(out.features.data(), a.features.data(), sizeof(float) * 8) == 0);
    CHECK(std::memcmp(out.features.data() + 8, b.features.data(), sizeof(float) * 4) == 0);
    CHECK(t.replaced == 1);
    CHECK(t.replaced_indices == std::vector<int>{2});
  }

  SUBCASE("empty pool reverts to the original clip and counts fallbacks") {
    CandidatePool none;
    PreservingMask m{{0, 0, 1}, 0.3f, 1};
    MixTelemetry t;
    FeatureSequence out = mix(a, m, none, rng, &t);
    CHECK(std::memcmp(out.features.data(), a.features.data(), sizeof(float) * a.features.size()) == 0);
    CHECK(t.empty_pool_fallbacks == 2);
    CHECK(t.replaced == 0);
  }
}

TEST_CASE("augment_pair contracts") {
  auto cfg = small_cfg();
  Dataset ds = generate_synthetic(cfg, 77);
  SimilarityStats st = compute_similarity_stats(ds, 10, 60);
  const TextQueryRecord& rec = ds.videos[0].queries[0];

  SUBCASE("single-video dataset refuses") {
    Dataset one = ds;
    one.videos.resize(1);
    std::mt19937_64 rng(1);
    CHECK_THROWS_AS(augment_pair(one, rec, st, 1, 0.3f, rng), std::invalid_argument);
  }

  SUBCASE("empty band refuses") {
    SimilarityStats bad = st;
    bad.theta_min = 0.9;
    bad.theta_max = 0.1;
    std::mt19937_64 rng(1);
    CHECK_THROWS_AS(augment_pair(ds, rec, bad, 1, 0.3f, rng), std::invalid_argument);
  }

  SUBCASE("huge context window reproduces the original video twice") {
    std::mt19937_64 rng(1);
    AugmentedPair pair = augment_pair(ds, rec, st, 1000, 0.3f, rng);
    const Tensor& orig = ds.videos[0].video.features;
    CHECK(std::memcmp(pair.first.features.data(), orig.data(), sizeof(float) * orig.size()) == 0);
    CHECK(std::memcmp(pair.second.features.data(), orig.data(), sizeof(float) * orig.size()) == 0);
  }

  SUBCASE("fixed seed reproduces the pair exactly") {
    std::mt19937_64 rng1(42), rng2(42);
    AugmentedPair a = augment_pair(ds, rec, st, 1, 0.3f, rng1);
    AugmentedPair b = augment_pair(ds, rec, st, 1, 0.3f, rng2);
    CHECK(a.source_video_id == b.source_video_id);
    CHECK(std::memcmp(a.first.features.data(), b.first.features.data(),
                      sizeof(float) * a.first.features.size()) == 0);
    CHECK(std::memcmp(a.second.features.data(), b.second.features.data(),
                      sizeof(float) * a.second.features.size()) == 0);
  }
}

TEST_CASE("augmentation invariants: GT preservation and band safety") {
  auto cfg = small_cfg();
  cfg.n_videos = 12;
  cfg.noise = 0.15f;
  Dataset ds = generate_synthetic(cfg, 314);
  SimilarityStats st = compute_similarity_stats(ds, 10, 60);
  REQUIRE(st.band_valid());
  std::mt19937_64 rng(9);
  const int p = 1;
  for (const auto& ve : ds.videos) {
    for (const auto& rec : ve.queries) {
      AugmentedPair pair = augment_pair(ds, rec, st, p, 0.3f, rng);
      const FeatureSequence& orig = ve.video;
      auto ext = extended_context(rec.gt_spans, orig.clip_count(), p);
      for (const FeatureSequence* view : {&pair.first, &pair.second}) {
        for (int i = 0; i < orig.clip_count(); ++i) {
          const float* orow = orig.features.data() + i * orig.dim();
          const float* vrow = view->features.data() + i * orig.dim();
          const bool same = std::memcmp(orow, vrow, sizeof(float) * orig.dim()) == 0;
          if (ext[i]) {
            CHECK(same);  // context is bit-identical
          } else if (!same) {
            // replaced clip must re-score inside the band
            const double s = cosine_similarity(vrow, rec.pooled_feature.data(), orig.dim());
            CHECK(s >= st.theta_min - 1e-7);
            CHECK(s <= st.theta_max + 1e-7);
          }
        }
      }
    }
  }
}

TEST_CASE("band excluding the query concept keeps mixed clips dissimilar") {
  auto cfg = small_cfg();
  cfg.noise = 0.0f;
  Dataset ds = generate_synthetic(cfg, 8);
  // with zero noise GT-pair similarity is exactly 1; cap the band well below
  SimilarityStats st = compute_similarity_stats(ds, 0, 100);
  st.theta_max = 0.5;
  std::mt19937_64 rng(2);
  const TextQueryRecord& rec = ds.videos[2].queries[0];
  AugmentedPair pair = augment_pair(ds, rec, st, 1, 0.3f, rng);
  const FeatureSequence& orig = ds.videos[2].video;
  for (int i = 0; i < orig.clip_count(); ++i) {
    const float* vrow = pair.first.features.data() + i * orig.dim();
    if (std::memcmp(orig.features.data() + i * orig.dim(), vrow, sizeof(float) * orig.dim()) != 0) {
      CHECK(cosine_similarity(vrow, rec.pooled_feature.data(), orig.dim()) <= st.theta_max + 1e-7);
    }
  }
}
