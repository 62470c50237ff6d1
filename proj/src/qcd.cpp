#include "cva/qcd.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace cva {

PopulationStats population_stats(const std::vector<float>& values) {
  if (values.empty()) throw std::invalid_argument("population_stats: empty population");
  double mean = 0.0;
  for (float v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (float v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size());
  return {mean, std::sqrt(var)};
}

double cosine_similarity(const float* u, const float* v, int dim) {
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (int i = 0; i < dim; ++i) {
    dot += static_cast<double>(u[i]) * v[i];
    nu += static_cast<double>(u[i]) * u[i];
    nv += static_cast<double>(v[i]) * v[i];
  }
  if (nu == 0.0 || nv == 0.0) throw std::invalid_argument("cosine_similarity: zero-norm vector");
  return dot / (std::sqrt(nu) * std::sqrt(nv));
}

double cosine_similarity(const std::vector<float>& u, const std::vector<float>& v) {
  if (u.size() != v.size()) {
    throw std::invalid_argument("cosine_similarity: length mismatch " + std::to_string(u.size()) + " vs " +
                                std::to_string(v.size()));
  }
  return cosine_similarity(u.data(), v.data(), static_cast<int>(u.size()));
}

double percentile(const std::vector<float>& sorted_values, double q) {
  if (sorted_values.empty()) throw std::invalid_argument("percentile: empty list");
  if (q < 0.0 || q > 100.0) throw std::invalid_argument("percentile: q outside [0,100]");
  const double pos = q / 100.0 * static_cast<double>(sorted_values.size() - 1);
  const size_t lo = static_cast<size_t>(pos);
  const double frac = pos - static_cast<double>(lo);
  if (lo + 1 >= sorted_values.size()) return sorted_values.back();
  return sorted_values[lo] + frac * (sorted_values[lo + 1] - sorted_values[lo]);
}

SimilarityStats compute_similarity_stats(const Dataset& ds, double alpha, double beta) {
  SimilarityStats st;
  st.alpha = alpha;
  st.beta = beta;
  for (const VideoEntry& ve : ds.videos) {
    const FeatureSequence& video = ve.video;
    for (const VideoEntry& qe : ds.videos) {
      for (const TextQueryRecord& q : qe.queries) {
        const bool own_video = q.video_id == video.video_id;
        std::vector<uint8_t> in_gt;
        if (own_video) {
          in_gt.assign(static_cast<size_t>(video.clip_count()), 0);
          for (const MomentSpan& s : q.gt_spans)
            for (int i = s.start; i <= s.end; ++i) in_gt[static_cast<size_t>(i)] = 1;
        }
        for (int i = 0; i < video.clip_count(); ++i) {
          const float s = static_cast<float>(cosine_similarity(
              video.features.data() + static_cast<size_t>(i) * video.dim(), q.pooled_feature.data(), video.dim()));
          if (own_video && in_gt[static_cast<size_t>(i)]) st.s_gt.push_back(s);
          else st.s_non.push_back(s);
        }
      }
    }
  }
  if (st.s_gt.empty() || st.s_non.empty()) {
    throw std::invalid_argument("similarity stats: need at least one GT pair and one non-GT pair");
  }
  std::sort(st.s_gt.begin(), st.s_gt.end());
  std::sort(st.s_non.begin(), st.s_non.end());
  const PopulationStats gt = population_stats(st.s_gt);
  const PopulationStats non = population_stats(st.s_non);
  st.mu_gt = gt.mean;
  st.sigma_gt = gt.stddev;
  st.mu_non = non.mean;
  st.sigma_non = non.stddev;
  st.theta_min = percentile(st.s_non, alpha);
  st.theta_max = percentile(st.s_gt, beta);
  return st;
}

CandidatePool build_candidate_pool(const FeatureSequence& source, const TextQueryRecord& query,
                                   const SimilarityStats& stats) {
  CandidatePool pool;
  pool.source_video_id = source.video_id;
  std::vector<float> rows;
  for (int k = 0; k < source.clip_count(); ++k) {
    const float* clip = source.features.data() + static_cast<size_t>(k) * source.dim();
    const double s = cosine_similarity(clip, query.pooled_feature.data(), source.dim());
    if (s >= stats.theta_min && s <= stats.theta_max) {
      pool.clip_indices.push_back(k);
      pool.similarities.push_back(static_cast<float>(s));
      rows.insert(rows.end(), clip, clip + source.dim());
    }
  }
  if (!pool.clip_indices.empty()) {
    pool.clip_features = Tensor::from_data({pool.size(), source.dim()}, std::move(rows));
  }
  return pool;
}

std::vector<uint8_t> extended_context(const std::vector<MomentSpan>& spans, int clip_count, int p) {
  std::vector<uint8_t> ext(static_cast<size_t>(clip_count), 0);
  for (const MomentSpan& s : spans) {
    const int lo = std::max(0, s.start - p);
    const int hi = std::min(clip_count - 1, s.end + p);
    for (int i = lo; i <= hi; ++i) ext[static_cast<size_t>(i)] = 1;
  }
  return ext;
}

PreservingMask build_preserving_mask(const std::vector<MomentSpan>& gt_spans, int clip_count, int p, float r,
                                     std::mt19937_64& rng) {
  if (p < 0) throw std::invalid_argument("preserving mask: context p must be >= 0");
  if (r <= 0.0f || r >= 1.0f) throw std::invalid_argument("preserving mask: replace ratio must lie in (0,1)");
  PreservingMask mask;
  mask.replace_ratio = r;
  mask.context_p = p;
  mask.bits = extended_context(gt_spans, clip_count, p);  // 1 on G_ext so far

  std::vector<int> candidates;
  for (int i = 0; i < clip_count; ++i) {
    if (!mask.bits[static_cast<size_t>(i)]) candidates.push_back(i);
  }
  // all non-context bits start as keep; zero a uniform sample of them
  for (uint8_t& b : mask.bits) b = 1;
  const int want = static_cast<int>(r * static_cast<float>(clip_count));
  const int n_zero = std::min<int>(want, static_cast<int>(candidates.size()));
  for (int pick = 0; pick < n_zero; ++pick) {
    std::uniform_int_distribution<int> dist(pick, static_cast<int>(candidates.size()) - 1);
    std::swap(candidates[static_cast<size_t>(pick)], candidates[static_cast<size_t>(dist(rng))]);
    mask.bits[static_cast<size_t>(candidates[static_cast<size_t>(pick)])] = 0;
  }
  return mask;
}

FeatureSequence mix(const FeatureSequence& video, const PreservingMask& mask, const CandidatePool& pool,
                    std::mt19937_64& rng, MixTelemetry* telemetry) {
  if (static_cast<int>(mask.bits.size()) != video.clip_count()) {
    throw std::invalid_argument("mix: mask length " + std::to_string(mask.bits.size()) + " != clip count " +
                                std::to_string(video.clip_count()));
  }
  FeatureSequence out;
  out.video_id = video.video_id;
  out.clip_seconds = video.clip_seconds;
  out.features = video.features.clone();
  const int d = video.dim();
  for (int i = 0; i < video.clip_count(); ++i) {
    if (mask.bits[static_cast<size_t>(i)]) continue;
    if (pool.empty()) {
      if (telemetry) ++telemetry->empty_pool_fallbacks;
      continue;
    }
    std::uniform_int_distribution<int> dist(0, pool.size() - 1);
    const int pick = dist(rng);
    std::memcpy(out.features.data() + static_cast<size_t>(i) * d,
                pool.clip_features.data() + static_cast<size_t>(pick) * d, sizeof(float) * static_cast<size_t>(d));
    if (telemetry) {
      ++telemetry->replaced;
      telemetry->replaced_indices.push_back(i);
    }
  }
  return out;
}

AugmentedPair augment_pair(const Dataset& ds, const TextQueryRecord& record, const SimilarityStats& stats, int p,
                           float r, std::mt19937_64& rng) {
  if (ds.videos.size() < 2) throw std::invalid_argument("augment: dataset must contain at least 2 videos");
  if (!stats.band_valid()) {
    throw std::invalid_argument("augment: empty similarity band, theta_min " + std::to_string(stats.theta_min) +
                                " > theta_max " + std::to_string(stats.theta_max));
  }
  const int target_idx = ds.video_index(record.video_id);
  if (target_idx < 0) throw std::invalid_argument("augment: unknown video " + record.video_id);
  const FeatureSequence& target = ds.videos[static_cast<size_t>(target_idx)].video;

  std::uniform_int_distribution<int> dist(0, static_cast<int>(ds.videos.size()) - 2);
  int source_idx = dist(rng);
  if (source_idx >= target_idx) ++source_idx;
  const FeatureSequence& source = ds.videos[static_cast<size_t>(source_idx)].video;

  const CandidatePool pool = build_candidate_pool(source, record, stats);

  AugmentedPair pair;
  pair.source_video_id = source.video_id;
  const PreservingMask mask1 = build_preserving_mask(record.gt_spans, target.clip_count(), p, r, rng);
  pair.first = mix(target, mask1, pool, rng, &pair.telemetry_first);
  const PreservingMask mask2 = build_preserving_mask(record.gt_spans, target.clip_count(), p, r, rng);
  pair.second = mix(target, mask2, pool, rng, &pair.telemetry_second);
  return pair;
}

}  // namespace cva
