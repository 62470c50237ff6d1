#include "cva/model.hpp"

#include <cmath>
#include <stdexcept>

namespace cva {

void ModelConfig::validate() const {
  if (d_v < 1 || d_t < 1 || d_model < 1) throw std::invalid_argument("model config: dims must be positive");
  if (n_heads < 1 || d_model % n_heads != 0) {
    throw std::invalid_argument("model config: d_model " + std::to_string(d_model) + " not divisible by heads " +
                                std::to_string(n_heads));
  }
  if (n_blocks < 1 || static_cast<int>(window_sizes.size()) != n_blocks) {
    throw std::invalid_argument("model config: need one window size per block, got " +
                                std::to_string(window_sizes.size()) + " for " + std::to_string(n_blocks) +
                                " blocks");
  }
  for (int w : window_sizes) {
    if (w < 1) throw std::invalid_argument("model config: window sizes must be >= 1");
  }
  if (n_cte_queries < 1 || n_moment_queries < 1 || n_decoder_layers < 1 || contrast_dim < 1) {
    throw std::invalid_argument("model config: query/layer counts must be positive");
  }
}

CteBlock::CteBlock(ParamRegistry& reg, const std::string& prefix, int d_model, int n_heads, int window,
                   std::mt19937_64& rng)
    : win_attn_(reg, prefix + ".win_attn", d_model, n_heads, rng),
      query_attn_(reg, prefix + ".query_attn", d_model, n_heads, rng),
      video_cross_(reg, prefix + ".video_cross", d_model, n_heads, rng),
      query_cross_(reg, prefix + ".query_cross", d_model, n_heads, rng),
      video_mlp_(reg, prefix + ".video_mlp", d_model, d_model, d_model, rng),
      query_mlp_(reg, prefix + ".query_mlp", d_model, d_model, d_model, rng),
      video_norm_(reg, prefix + ".video_norm", d_model),
      query_norm_(reg, prefix + ".query_norm", d_model),
      window_(window) {}

Tensor CteBlock::windowed_self_attention(const Tensor& f) const {
  const int l = f.dim(0);
  if (window_ >= l) return win_attn_(f, f, f);
  std::vector<Tensor> pieces;
  pieces.reserve(static_cast<size_t>((l + window_ - 1) / window_));
  for (int start = 0; start < l; start += window_) {
    const int len = std::min(window_, l - start);
    Tensor win = slice_rows(f, start, len);
    pieces.push_back(win_attn_(win, win, win));
  }
  return concat_rows(pieces);
}

std::pair<Tensor, Tensor> CteBlock::operator()(const Tensor& f_prev, const Tensor& q_prev) const {
  Tensor f_local = windowed_self_attention(f_prev);
  Tensor q_global = query_attn_(q_prev, q_prev, q_prev);
  Tensor f_hat = video_cross_(f_local, q_global, q_global);
  Tensor q_hat = query_cross_(q_global, f_local, f_local);
  Tensor f_next = add(video_norm_(video_mlp_(f_hat)), f_prev);
  Tensor q_next = add(query_norm_(query_mlp_(q_hat)), q_prev);
  return {f_next, q_next};
}

GroundingModel::DecoderLayer::DecoderLayer(ParamRegistry& reg, const std::string& prefix, int d, int heads,
                                           std::mt19937_64& rng)
    : self_attn(reg, prefix + ".self_attn", d, heads, rng),
      cross_attn(reg, prefix + ".cross_attn", d, heads, rng),
      ffn(reg, prefix + ".ffn", d, d, d, rng),
      norm1(reg, prefix + ".norm1", d),
      norm2(reg, prefix + ".norm2", d),
      norm3(reg, prefix + ".norm3", d) {}

GroundingModel::GroundingModel(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(derive_seed(seed, "model-init"));
  const int d = cfg_.d_model;

  video_proj_ = Linear(params_, "video_proj", cfg_.d_v, d, rng);
  text_proj_ = Linear(params_, "text_proj", cfg_.d_t, d, rng);

  blocks_.reserve(static_cast<size_t>(cfg_.n_blocks));
  for (int b = 0; b < cfg_.n_blocks; ++b) {
    blocks_.emplace_back(params_, "cte.block" + std::to_string(b), d, cfg_.n_heads, cfg_.window_sizes[b], rng);
  }
  cte_queries_ = params_.add("cte.queries", normal_init({cfg_.n_cte_queries, d}, 1.0f, rng));
  aggregate_mlp_ = Mlp(params_, "cte.aggregate_mlp", cfg_.n_blocks * d, d, d, rng);
  aggregate_norm_ = LayerNormLayer(params_, "cte.aggregate_norm", d);
  raw_omega_ = params_.add("cte.raw_omega", Tensor::zeros({1}));

  mm_cross_ = MultiHeadAttention(params_, "mm.cross", d, cfg_.n_heads, rng);
  mm_norm1_ = LayerNormLayer(params_, "mm.norm1", d);
  mm_self1_ = MultiHeadAttention(params_, "mm.self1", d, cfg_.n_heads, rng);
  mm_norm2_ = LayerNormLayer(params_, "mm.norm2", d);
  mm_conv_ = Conv1dLayer(params_, "mm.conv", 3, d, d, rng);
  mm_norm3_ = LayerNormLayer(params_, "mm.norm3", d);
  mm_self2_ = MultiHeadAttention(params_, "mm.self2", d, cfg_.n_heads, rng);
  mm_norm4_ = LayerNormLayer(params_, "mm.norm4", d);

  moment_queries_ = params_.add("decoder.queries", normal_init({cfg_.n_moment_queries, d}, 1.0f, rng));
  decoder_.reserve(static_cast<size_t>(cfg_.n_decoder_layers));
  for (int i = 0; i < cfg_.n_decoder_layers; ++i) {
    decoder_.emplace_back(params_, "decoder.layer" + std::to_string(i), d, cfg_.n_heads, rng);
  }
  span_fc1_ = Linear(params_, "span_head.fc1", d, d, rng);
  span_fc2_ = Linear(params_, "span_head.fc2", d, d, rng);
  span_fc3_ = Linear(params_, "span_head.fc3", d, 2, rng);
  conf_head_ = Linear(params_, "conf_head", d, 1, rng);
  saliency_head_ = Linear(params_, "saliency_head", d, 1, rng);
  contrast_head_ = Mlp(params_, "contrast_head", d, d, cfg_.contrast_dim, rng);
}

Tensor GroundingModel::omega() const { return sigmoid(raw_omega_); }

Tensor GroundingModel::cte_forward(const Tensor& f_v) {
  Tensor f = f_v;
  Tensor q = cte_queries_;
  std::vector<Tensor> block_outputs;
  block_outputs.reserve(blocks_.size());
  for (const CteBlock& block : blocks_) {
    auto [f_next, q_next] = block(f, q);
    f = f_next;
    q = q_next;
    block_outputs.push_back(f);
  }
  Tensor aggregated = aggregate_norm_(aggregate_mlp_(concat_cols(block_outputs)));
  Tensor w = omega();
  Tensor one_minus = add_const(scale(w, -1.0f), 1.0f);
  return add(mul_scalar(f_v, w), mul_scalar(aggregated, one_minus));
}

Tensor GroundingModel::multimodal_encode(const Tensor& f_cte, const Tensor& f_t) {
  Tensor x = mm_norm1_(add(f_cte, mm_cross_(f_cte, f_t, f_t)));
  x = mm_norm2_(add(x, mm_self1_(x, x, x)));
  x = mm_norm3_(add(x, mm_conv_(x)));
  x = mm_norm4_(add(x, mm_self2_(x, x, x)));
  return x;
}

ModelOutput GroundingModel::decode(const Tensor& f_m) {
  Tensor q = moment_queries_;
  for (const DecoderLayer& layer : decoder_) {
    q = layer.norm1(add(q, layer.self_attn(q, q, q)));
    q = layer.norm2(add(q, layer.cross_attn(q, f_m, f_m)));
    q = layer.norm3(add(q, layer.ffn(q)));
  }
  ModelOutput out;
  out.spans_cw = sigmoid(span_fc3_(relu(span_fc2_(relu(span_fc1_(q))))));
  out.conf_logits = reshape(conf_head_(q), {cfg_.n_moment_queries});
  out.saliency = reshape(saliency_head_(f_m), {f_m.dim(0)});
  out.f_m = f_m;
  out.clip_count = f_m.dim(0);
  return out;
}

ModelOutput GroundingModel::forward_features(const Tensor& video_features, const Tensor& token_features) {
  if (video_features.rank() != 2 || video_features.dim(1) != cfg_.d_v) {
    throw std::invalid_argument("forward: video features " + shape_str(video_features.shape()) +
                                " do not match configured d_v " + std::to_string(cfg_.d_v));
  }
  if (token_features.rank() != 2 || token_features.dim(1) != cfg_.d_t) {
    throw std::invalid_argument("forward: token features " + shape_str(token_features.shape()) +
                                " do not match configured d_t " + std::to_string(cfg_.d_t));
  }
  const int l = video_features.dim(0);
  Tensor f_v = add(video_proj_(video_features), sinusoidal_positions(l, cfg_.d_model));
  Tensor f_t = text_proj_(token_features);
  Tensor f_cte = cte_forward(f_v);
  Tensor f_m = multimodal_encode(f_cte, f_t);
  return decode(f_m);
}

ModelOutput GroundingModel::forward(const FeatureSequence& video, const TextQueryRecord& query) {
  return forward_features(video.features, query.token_features);
}

MaskMode mask_mode_from_string(const std::string& s) {
  if (s == "zero") return MaskMode::kZero;
  if (s == "random") return MaskMode::kRandom;
  throw std::invalid_argument("mask mode must be 'zero' or 'random', got '" + s + "'");
}

FeatureSequence apply_target_mask(const FeatureSequence& video, const std::vector<MomentSpan>& gt_spans,
                                  MaskMode mode, std::mt19937_64& rng) {
  FeatureSequence out;
  out.video_id = video.video_id;
  out.clip_seconds = video.clip_seconds;
  out.features = video.features.clone();
  const int l = video.clip_count(), d = video.dim();

  std::vector<float> mean(static_cast<size_t>(d), 0.0f), stddev(static_cast<size_t>(d), 0.0f);
  if (mode == MaskMode::kRandom) {
    for (int i = 0; i < l; ++i)
      for (int j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += video.features.data()[i * d + j];
    for (float& m : mean) m /= static_cast<float>(l);
    for (int i = 0; i < l; ++i)
      for (int j = 0; j < d; ++j) {
        const float dv = video.features.data()[i * d + j] - mean[static_cast<size_t>(j)];
        stddev[static_cast<size_t>(j)] += dv * dv;
      }
    for (float& s : stddev) s = std::sqrt(s / static_cast<float>(l));
  }

  for (const MomentSpan& span : gt_spans) {
    for (int i = span.start; i <= span.end && i < l; ++i) {
      float* row = out.features.data() + static_cast<size_t>(i) * d;
      if (mode == MaskMode::kZero) {
        for (int j = 0; j < d; ++j) row[j] = 0.0f;
      } else {
        for (int j = 0; j < d; ++j) {
          std::normal_distribution<float> dist(mean[static_cast<size_t>(j)], stddev[static_cast<size_t>(j)]);
          row[j] = dist(rng);
        }
      }
    }
  }
  return out;
}

}  // namespace cva
