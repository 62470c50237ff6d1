#include "cva/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace cva {

namespace {

constexpr char kMagic[8] = {'C', 'V', 'A', 'F', '0', '0', '0', '1'};
constexpr uint32_t kMaxDim = 1u << 28;

void put_u32_le(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

bool get_u32_le(std::istream& is, uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) | (static_cast<uint32_t>(b[2]) << 16) |
      (static_cast<uint32_t>(b[3]) << 24);
  return true;
}

[[noreturn]] void format_error(const std::string& path, const std::string& what, std::streamoff offset) {
  throw std::runtime_error("tensor file " + path + ": " + what + " at byte " + std::to_string(offset));
}

}  // namespace

CenterWidth span_to_center_width(const MomentSpan& span, int clip_count) {
  const float l = static_cast<float>(clip_count);
  return {static_cast<float>(span.start + span.end + 1) / (2.0f * l),
          static_cast<float>(span.end - span.start + 1) / l};
}

MomentSpan center_width_to_span(float center, float width, int clip_count) {
  const float l = static_cast<float>(clip_count);
  int start = static_cast<int>(std::lround(center * l - width * l / 2.0f));
  int end = static_cast<int>(std::lround(center * l + width * l / 2.0f)) - 1;
  start = std::clamp(start, 0, clip_count - 1);
  end = std::clamp(end, 0, clip_count - 1);
  if (end < start) end = start;
  return {start, end};
}

int Dataset::total_queries() const {
  int n = 0;
  for (const auto& v : videos) n += static_cast<int>(v.queries.size());
  return n;
}

int Dataset::video_index(const std::string& video_id) const {
  for (size_t i = 0; i < videos.size(); ++i) {
    if (videos[i].video.video_id == video_id) return static_cast<int>(i);
  }
  return -1;
}

void write_tensor_file(const std::string& path, const Tensor& t) {
  if (!t.all_finite()) throw std::invalid_argument("write_tensor_file: non-finite values, refusing " + path);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  os.write(kMagic, 8);
  put_u32_le(os, static_cast<uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) put_u32_le(os, static_cast<uint32_t>(t.dim(i)));
  for (int i = 0; i < t.size(); ++i) {
    uint32_t bits;
    std::memcpy(&bits, &t.data()[i], 4);
    put_u32_le(os, bits);
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

Tensor read_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open tensor file: " + path);
  char magic[8] = {};
  is.read(magic, 8);
  if (is.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0) format_error(path, "bad magic", 0);
  uint32_t rank = 0;
  if (!get_u32_le(is, rank)) format_error(path, "truncated header", 8);
  if (rank == 0 || rank > 8) format_error(path, "invalid rank " + std::to_string(rank), 8);
  std::vector<int> shape(rank);
  uint64_t count = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    uint32_t d = 0;
    if (!get_u32_le(is, d)) format_error(path, "truncated header", 12 + 4 * i);
    if (d == 0 || d > kMaxDim) format_error(path, "dim overflow (" + std::to_string(d) + ")", 12 + 4 * i);
    count *= d;
    if (count > kMaxDim) format_error(path, "element count overflow", 12 + 4 * i);
    shape[i] = static_cast<int>(d);
  }
  const std::streamoff payload_start = 12 + 4 * static_cast<std::streamoff>(rank);
  std::vector<float> data(count);
  for (uint64_t i = 0; i < count; ++i) {
    uint32_t bits = 0;
    if (!get_u32_le(is, bits)) {
      format_error(path, "truncated payload (expected " + std::to_string(count) + " floats, got " +
                             std::to_string(i) + ")",
                   payload_start + static_cast<std::streamoff>(4 * i));
    }
    std::memcpy(&data[i], &bits, 4);
  }
  return Tensor::from_data(std::move(shape), std::move(data));
}

namespace {

void validate_query(const TextQueryRecord& q, int clip_count, int d_t) {
  const std::string who = "query " + q.query_id;
  if (q.token_features.rank() != 2 || q.token_features.dim(1) != d_t) {
    throw std::invalid_argument(who + ": token features " + shape_str(q.token_features.shape()) +
                                " do not match d_t " + std::to_string(d_t));
  }
  if (q.pooled_feature.rank() != 1 || q.pooled_feature.dim(0) != d_t) {
    throw std::invalid_argument(who + ": pooled feature " + shape_str(q.pooled_feature.shape()) +
                                " does not match d_t " + std::to_string(d_t));
  }
  if (!q.token_features.all_finite() || !q.pooled_feature.all_finite()) {
    throw std::invalid_argument(who + ": non-finite feature values");
  }
  if (q.gt_spans.empty()) throw std::invalid_argument(who + ": empty gt_spans");
  std::vector<MomentSpan> sorted = q.gt_spans;
  std::sort(sorted.begin(), sorted.end(), [](const MomentSpan& a, const MomentSpan& b) { return a.start < b.start; });
  int prev_end = -1;
  for (const MomentSpan& s : sorted) {
    if (s.start > s.end) {
      throw std::invalid_argument(who + ": span end " + std::to_string(s.end) + " < start " +
                                  std::to_string(s.start));
    }
    if (s.start < 0 || s.end >= clip_count) {
      throw std::invalid_argument(who + ": span [" + std::to_string(s.start) + "," + std::to_string(s.end) +
                                  "] outside video of length " + std::to_string(clip_count));
    }
    if (s.start <= prev_end) throw std::invalid_argument(who + ": overlapping gt_spans");
    prev_end = s.end;
  }
  if (static_cast<int>(q.saliency_labels.size()) != clip_count) {
    throw std::invalid_argument(who + ": saliency length " + std::to_string(q.saliency_labels.size()) +
                                " != clip count " + std::to_string(clip_count));
  }
  for (int lbl : q.saliency_labels) {
    if (lbl < 0 || lbl > 4) throw std::invalid_argument(who + ": saliency label " + std::to_string(lbl) +
                                                        " outside 0..4");
  }
}

}  // namespace

void validate_dataset(const Dataset& ds) {
  for (const VideoEntry& entry : ds.videos) {
    const FeatureSequence& v = entry.video;
    const std::string who = "video " + v.video_id;
    if (v.features.rank() != 2 || v.features.dim(1) != ds.d_v) {
      throw std::invalid_argument(who + ": features " + shape_str(v.features.shape()) + " do not match d_v " +
                                  std::to_string(ds.d_v));
    }
    if (v.clip_count() < 1) throw std::invalid_argument(who + ": empty video");
    if (!v.features.all_finite()) throw std::invalid_argument(who + ": non-finite feature values");
    if (v.clip_seconds != ds.clip_seconds || v.clip_seconds <= 0.0f) {
      throw std::invalid_argument(who + ": clip_seconds not uniform with dataset");
    }
    for (const TextQueryRecord& q : entry.queries) {
      if (q.video_id != v.video_id) {
        throw std::invalid_argument("query " + q.query_id + ": video_id " + q.video_id + " does not match " +
                                    v.video_id);
      }
      validate_query(q, v.clip_count(), ds.d_t);
    }
  }
}

void write_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(dir);
  fs::create_directories(fs::path(dir) / "tensors");
  json manifest;
  manifest["version"] = ds.version;
  manifest["clip_seconds"] = ds.clip_seconds;
  manifest["d_v"] = ds.d_v;
  manifest["d_t"] = ds.d_t;
  manifest["seed"] = ds.seed;
  manifest["videos"] = json::array();
  for (const VideoEntry& entry : ds.videos) {
    json jv;
    jv["video_id"] = entry.video.video_id;
    const std::string feat_rel = "tensors/" + entry.video.video_id + ".cvaf";
    write_tensor_file((fs::path(dir) / feat_rel).string(), entry.video.features);
    jv["features_path"] = feat_rel;
    jv["queries"] = json::array();
    for (const TextQueryRecord& q : entry.queries) {
      json jq;
      jq["query_id"] = q.query_id;
      const std::string tok_rel = "tensors/" + q.query_id + "_tokens.cvaf";
      const std::string pool_rel = "tensors/" + q.query_id + "_pooled.cvaf";
      write_tensor_file((fs::path(dir) / tok_rel).string(), q.token_features);
      write_tensor_file((fs::path(dir) / pool_rel).string(), q.pooled_feature);
      jq["tokens_path"] = tok_rel;
      jq["pooled_path"] = pool_rel;
      jq["gt_spans"] = json::array();
      for (const MomentSpan& s : q.gt_spans) jq["gt_spans"].push_back({s.start, s.end});
      jq["saliency"] = q.saliency_labels;
      jv["queries"].push_back(std::move(jq));
    }
    manifest["videos"].push_back(std::move(jv));
  }
  std::ofstream os(fs::path(dir) / "manifest.json");
  os << manifest.dump(2) << "\n";
  if (!os) throw std::runtime_error("failed to write manifest under " + dir);
}

Dataset load_dataset(const std::string& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw std::runtime_error("cannot open manifest: " + manifest_path);
  json manifest;
  try {
    is >> manifest;
  } catch (const json::exception& e) {
    throw std::runtime_error("manifest " + manifest_path + ": invalid JSON: " + e.what());
  }
  const fs::path base = fs::path(manifest_path).parent_path();
  Dataset ds;
  try {
    ds.version = manifest.at("version").get<int>();
    ds.clip_seconds = manifest.at("clip_seconds").get<float>();
    ds.d_v = manifest.at("d_v").get<int>();
    ds.d_t = manifest.at("d_t").get<int>();
    ds.seed = manifest.value("seed", 0ULL);
    for (const json& jv : manifest.at("videos")) {
      VideoEntry entry;
      entry.video.video_id = jv.at("video_id").get<std::string>();
      entry.video.clip_seconds = ds.clip_seconds;
      entry.video.features = read_tensor_file((base / jv.at("features_path").get<std::string>()).string());
      for (const json& jq : jv.at("queries")) {
        TextQueryRecord q;
        q.query_id = jq.at("query_id").get<std::string>();
        q.video_id = entry.video.video_id;
        q.token_features = read_tensor_file((base / jq.at("tokens_path").get<std::string>()).string());
        q.pooled_feature = read_tensor_file((base / jq.at("pooled_path").get<std::string>()).string());
        for (const json& js : jq.at("gt_spans")) {
          if (!js.is_array() || js.size() != 2) {
            throw std::invalid_argument("query " + q.query_id + ": gt_spans entries must be [start,end]");
          }
          q.gt_spans.push_back({js[0].get<int>(), js[1].get<int>()});
        }
        q.saliency_labels = jq.at("saliency").get<std::vector<int>>();
        entry.queries.push_back(std::move(q));
      }
      ds.videos.push_back(std::move(entry));
    }
  } catch (const json::exception& e) {
    throw std::runtime_error("manifest " + manifest_path + ": schema error: " + e.what());
  }
  validate_dataset(ds);
  return ds;
}

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

uint64_t derive_seed(uint64_t base, const std::string& tag, uint64_t a, uint64_t b) {
  uint64_t h = splitmix64(base ^ 0x6a09e667f3bcc909ULL);
  h = splitmix64(h ^ fnv1a(tag));
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ b);
  return h;
}

namespace {

// Orthonormal vectors via Gram-Schmidt over gaussian draws.
std::vector<std::vector<float>> orthonormal_basis(int count, int dim, std::mt19937_64& rng) {
  if (count > dim) {
    throw std::invalid_argument("synthetic: need feature_dim >= n_concepts + 1, got " + std::to_string(dim));
  }
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<std::vector<double>> basis;
  while (static_cast<int>(basis.size()) < count) {
    std::vector<double> v(dim);
    for (double& x : v) x = gauss(rng);
    for (const auto& u : basis) {
      double dot = 0;
      for (int i = 0; i < dim; ++i) dot += v[i] * u[i];
      for (int i = 0; i < dim; ++i) v[i] -= dot * u[i];
    }
    double norm = 0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-6) continue;  // rejected: colinear draw
    for (double& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  std::vector<std::vector<float>> out(count, std::vector<float>(dim));
  for (int i = 0; i < count; ++i)
    for (int j = 0; j < dim; ++j) out[i][j] = static_cast<float>(basis[i][j]);
  return out;
}

std::vector<float> noisy_copy(const std::vector<float>& proto, float noise, std::mt19937_64& rng) {
  std::vector<float> v = proto;
  if (noise > 0.0f) {
    const float per_dim = noise / std::sqrt(static_cast<float>(proto.size()));
    std::normal_distribution<float> gauss(0.0f, per_dim);
    for (float& x : v) x += gauss(rng);
  }
  return v;
}

}  // namespace

Dataset generate_synthetic(const SyntheticConfig& cfg, uint64_t seed) {
  if (cfg.n_concepts < 2) throw std::invalid_argument("synthetic: need at least 2 concept prototypes");
  if (cfg.moment_min < 1 || cfg.moment_max < cfg.moment_min) {
    throw std::invalid_argument("synthetic: invalid moment length range");
  }
  if (cfg.moment_max > cfg.clip_count) {
    throw std::invalid_argument("synthetic: moment length " + std::to_string(cfg.moment_max) +
                                " exceeds video length " + std::to_string(cfg.clip_count));
  }
  if (cfg.concept_cos < 0.0f || cfg.concept_cos >= 1.0f) {
    throw std::invalid_argument("synthetic: concept_cos must lie in [0,1)");
  }
  if (cfg.noise < 0.0f) throw std::invalid_argument("synthetic: negative noise");

  std::mt19937_64 proto_rng(derive_seed(seed, "prototypes"));
  // p_i = sqrt(c)*shared + sqrt(1-c)*e_i gives unit norm and pairwise cosine c.
  auto basis = orthonormal_basis(cfg.n_concepts + 1, cfg.feature_dim, proto_rng);
  const float cs = std::sqrt(cfg.concept_cos);
  const float co = std::sqrt(1.0f - cfg.concept_cos);
  std::vector<std::vector<float>> protos(cfg.n_concepts, std::vector<float>(cfg.feature_dim));
  for (int k = 0; k < cfg.n_concepts; ++k)
    for (int j = 0; j < cfg.feature_dim; ++j) protos[k][j] = cs * basis[0][j] + co * basis[k + 1][j];

  Dataset ds;
  ds.version = 1;
  ds.clip_seconds = cfg.clip_seconds;
  ds.d_v = cfg.feature_dim;
  ds.d_t = cfg.feature_dim;
  ds.seed = seed;
  ds.videos.reserve(static_cast<size_t>(cfg.n_videos));

  for (int vi = 0; vi < cfg.n_videos; ++vi) {
    std::mt19937_64 rng(derive_seed(seed, "video", static_cast<uint64_t>(vi)));
    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "v%04d", vi);
    const std::string video_id = idbuf;

    std::uniform_int_distribution<int> len_dist(cfg.moment_min, cfg.moment_max);
    const int m_len = len_dist(rng);
    std::uniform_int_distribution<int> start_dist(0, cfg.clip_count - m_len);
    const int m_start = start_dist(rng);
    std::uniform_int_distribution<int> concept_dist(0, cfg.n_concepts - 1);
    const int m_concept = concept_dist(rng);

    // Concept id per clip; background runs never reuse the moment concept,
    // so the GT span is exactly the moment run.
    std::vector<int> concept_of(static_cast<size_t>(cfg.clip_count), -1);
    for (int i = m_start; i < m_start + m_len; ++i) concept_of[i] = m_concept;
    std::uniform_int_distribution<int> other_dist(0, cfg.n_concepts - 2);
    auto fill_background = [&](int from, int to) {
      int pos = from;
      while (pos < to) {
        int len = std::min(len_dist(rng), to - pos);
        int c = other_dist(rng);
        if (c >= m_concept) ++c;
        for (int i = pos; i < pos + len; ++i) concept_of[i] = c;
        pos += len;
      }
    };
    fill_background(0, m_start);
    fill_background(m_start + m_len, cfg.clip_count);

    VideoEntry entry;
    entry.video.video_id = video_id;
    entry.video.clip_seconds = cfg.clip_seconds;
    std::vector<float> feats;
    feats.reserve(static_cast<size_t>(cfg.clip_count) * cfg.feature_dim);
    for (int i = 0; i < cfg.clip_count; ++i) {
      auto row = noisy_copy(protos[concept_of[i]], cfg.noise, rng);
      feats.insert(feats.end(), row.begin(), row.end());
    }
    entry.video.features = Tensor::from_data({cfg.clip_count, cfg.feature_dim}, std::move(feats));

    const MomentSpan gt{m_start, m_start + m_len - 1};
    std::vector<int> saliency(static_cast<size_t>(cfg.clip_count), 0);
    saliency[gt.start] = 3;
    saliency[gt.end] = 3;
    for (int i = gt.start + 1; i < gt.end; ++i) saliency[i] = 4;

    for (int qi = 0; qi < cfg.queries_per_video; ++qi) {
      TextQueryRecord q;
      char qbuf[24];
      std::snprintf(qbuf, sizeof(qbuf), "%s_q%02d", video_id.c_str(), qi);
      q.query_id = qbuf;
      q.video_id = video_id;
      auto qvec = noisy_copy(protos[m_concept], cfg.noise, rng);
      q.token_features = Tensor::from_data({1, cfg.feature_dim}, qvec);
      q.pooled_feature = Tensor::from_data({cfg.feature_dim}, qvec);
      q.gt_spans = {gt};
      q.saliency_labels = saliency;
      entry.queries.push_back(std::move(q));
    }
    ds.videos.push_back(std::move(entry));
  }
  validate_dataset(ds);
  return ds;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double eval_fraction) {
  if (eval_fraction < 0.0 || eval_fraction >= 1.0) {
    throw std::invalid_argument("split: eval fraction must lie in [0,1)");
  }
  std::vector<size_t> order(ds.videos.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    const uint64_t ha = fnv1a(ds.videos[a].video.video_id);
    const uint64_t hb = fnv1a(ds.videos[b].video.video_id);
    if (ha != hb) return ha < hb;
    return ds.videos[a].video.video_id < ds.videos[b].video.video_id;
  });
  const size_t n_eval = static_cast<size_t>(eval_fraction * static_cast<double>(ds.videos.size()));
  std::set<size_t> eval_idx(order.end() - static_cast<std::ptrdiff_t>(n_eval), order.end());

  Dataset train = ds, eval = ds;
  train.videos.clear();
  eval.videos.clear();
  for (size_t i = 0; i < ds.videos.size(); ++i) {
    (eval_idx.count(i) ? eval : train).videos.push_back(ds.videos[i]);
  }
  return {train, eval};
}

}  // namespace cva
