// Dataset records, the binary tensor-file format, the JSON manifest, and the
// seeded synthetic task generator.
//
// Tensor files: 8-byte magic "CVAF0001", little-endian u32 rank, u32
// dims[rank], then the raw little-endian f32 payload. Round trips are
// bit-exact.

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cva/tensor.hpp"

namespace cva {

struct MomentSpan {
  int start = 0;
  int end = 0;  // inclusive clip index
  bool operator==(const MomentSpan&) const = default;
};

struct CenterWidth {
  float center = 0.0f;  // in (0,1)
  float width = 0.0f;   // in (0,1]
};

CenterWidth span_to_center_width(const MomentSpan& span, int clip_count);
// Exact inverse of span_to_center_width for spans valid in a length
// clip_count video; arbitrary (center,width) pairs are clamped into range.
MomentSpan center_width_to_span(float center, float width, int clip_count);

struct FeatureSequence {
  std::string video_id;
  Tensor features;  // [L x D_v]
  float clip_seconds = 2.0f;
  int clip_count() const { return features.dim(0); }
  int dim() const { return features.dim(1); }
};

struct TextQueryRecord {
  std::string query_id;
  std::string video_id;
  Tensor token_features;  // [N_t x D_t]
  Tensor pooled_feature;  // [D_t]
  std::vector<MomentSpan> gt_spans;
  std::vector<int> saliency_labels;  // one label in 0..4 per clip
};

struct VideoEntry {
  FeatureSequence video;
  std::vector<TextQueryRecord> queries;
};

struct Dataset {
  int version = 1;
  float clip_seconds = 2.0f;
  int d_v = 0;
  int d_t = 0;
  uint64_t seed = 0;
  std::vector<VideoEntry> videos;

  int total_queries() const;
  int video_index(const std::string& video_id) const;  // -1 when absent
};

void write_tensor_file(const std::string& path, const Tensor& t);
Tensor read_tensor_file(const std::string& path);

// Writes manifest.json plus one tensor file per video / query under dir.
void write_dataset(const Dataset& ds, const std::string& dir);
// Loads and eagerly validates; violations name the offending record.
Dataset load_dataset(const std::string& manifest_path);
void validate_dataset(const Dataset& ds);

struct SyntheticConfig {
  int n_videos = 125;
  int clip_count = 32;
  int feature_dim = 16;
  int n_concepts = 4;
  float noise = 0.1f;
  int moment_min = 4;
  int moment_max = 10;
  int queries_per_video = 1;
  // Pairwise cosine between concept prototypes; 0 = orthogonal, larger
  // values make the concepts confusable.
  float concept_cos = 0.0f;
  float clip_seconds = 2.0f;
};

// Every video holds exactly one contiguous moment of a concept that appears
// nowhere else in that video; its queries are noisy copies of the concept
// prototype. Deterministic given (cfg, seed).
Dataset generate_synthetic(const SyntheticConfig& cfg, uint64_t seed);

// Deterministic held-out split: the floor(eval_fraction * n) videos with the
// highest id hashes form the eval set.
std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double eval_fraction);

uint64_t fnv1a(const std::string& s);
// Stateless stream derivation used for per-record / per-epoch RNGs.
uint64_t derive_seed(uint64_t base, const std::string& tag, uint64_t a = 0, uint64_t b = 0);

}  // namespace cva
