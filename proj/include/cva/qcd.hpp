// Query-aware context mixing: dataset-level similarity statistics with
// percentile thresholds, per-instance candidate pools, context-preserving
// masks, and the mixing operator that swaps background clips for in-band
// clips from another video.

#pragma once

#include <random>
#include <string>
#include <vector>

#include "cva/data.hpp"

namespace cva {

struct SimilarityStats {
  std::vector<float> s_gt;   // sorted ascending
  std::vector<float> s_non;  // sorted ascending
  double mu_gt = 0.0, sigma_gt = 0.0;
  double mu_non = 0.0, sigma_non = 0.0;
  double theta_min = 0.0, theta_max = 0.0;
  double alpha = 0.0, beta = 0.0;
  bool band_valid() const { return theta_min <= theta_max; }
};

struct PopulationStats {
  double mean = 0.0;
  double stddev = 0.0;  // population form (divide by N)
};
PopulationStats population_stats(const std::vector<float>& values);

double cosine_similarity(const float* u, const float* v, int dim);
double cosine_similarity(const std::vector<float>& u, const std::vector<float>& v);

// Linear interpolation between closest ranks of an ascending-sorted list;
// q in [0,100].
double percentile(const std::vector<float>& sorted_values, double q);

// Scores every (clip, query) pair in the dataset against the query's pooled
// feature. A pair is GT iff the clip lies inside one of the query's spans in
// the query's own video; everything else is non-GT.
SimilarityStats compute_similarity_stats(const Dataset& ds, double alpha, double beta);

struct CandidatePool {
  std::string source_video_id;
  std::vector<int> clip_indices;
  std::vector<float> similarities;
  Tensor clip_features;  // [pool_size x D_v] rows copied from the source video
  bool empty() const { return clip_indices.empty(); }
  int size() const { return static_cast<int>(clip_indices.size()); }
};

CandidatePool build_candidate_pool(const FeatureSequence& source, const TextQueryRecord& query,
                                   const SimilarityStats& stats);

struct PreservingMask {
  std::vector<uint8_t> bits;  // 1 = keep, 0 = replace
  float replace_ratio = 0.0f;
  int context_p = 0;
};

// Union of spans dilated by p clips on each side, clamped to [0, L).
std::vector<uint8_t> extended_context(const std::vector<MomentSpan>& spans, int clip_count, int p);

// Zeros floor(r * L) uniformly chosen indices outside the extended context
// (all of them when fewer exist).
PreservingMask build_preserving_mask(const std::vector<MomentSpan>& gt_spans, int clip_count, int p, float r,
                                     std::mt19937_64& rng);

struct MixTelemetry {
  int replaced = 0;
  int empty_pool_fallbacks = 0;
  std::vector<int> replaced_indices;
};

// Keeps bit=1 clips, draws bit=0 clips uniformly with replacement from the
// pool; an empty pool reverts the bit to keep-original and counts a fallback.
FeatureSequence mix(const FeatureSequence& video, const PreservingMask& mask, const CandidatePool& pool,
                    std::mt19937_64& rng, MixTelemetry* telemetry = nullptr);

struct AugmentedPair {
  FeatureSequence first;
  FeatureSequence second;
  MixTelemetry telemetry_first;
  MixTelemetry telemetry_second;
  std::string source_video_id;
};

// Samples one replacement-source video B != A, builds one pool, and produces
// two independently masked-and-mixed copies of the record's video.
AugmentedPair augment_pair(const Dataset& ds, const TextQueryRecord& record, const SimilarityStats& stats, int p,
                           float r, std::mt19937_64& rng);

}  // namespace cva
