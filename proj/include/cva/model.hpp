// The grounding network. A stack of context blocks mixes windowed video
// self-attention with a set of learnable global queries through bidirectional
// cross-attention; block outputs are aggregated by a learnable weight into
// context-enhanced features, fused with the text query by a multimodal
// encoder, and decoded into moment spans plus per-clip saliency scores. A
// small projection head exposes the multimodal features to the boundary
// contrastive loss.

#pragma once

#include <random>
#include <string>
#include <vector>

#include "cva/data.hpp"
#include "cva/nn.hpp"

namespace cva {

struct ModelConfig {
  int d_v = 16;  // raw video feature dim
  int d_t = 16;  // raw text feature dim
  int d_model = 64;
  int n_heads = 4;
  int n_blocks = 3;
  std::vector<int> window_sizes = {5, 15, 75};  // one temporal receptive field per block
  int n_cte_queries = 100;
  int n_decoder_layers = 2;
  int n_moment_queries = 10;
  int contrast_dim = 64;

  void validate() const;
};

struct ModelOutput {
  Tensor spans_cw;     // [M_dec x 2], sigmoid-bounded (center, width)
  Tensor conf_logits;  // [M_dec]
  Tensor saliency;     // [L]
  Tensor f_m;          // [L x d_model] multimodal features
  int clip_count = 0;
};

class CteBlock {
 public:
  CteBlock(ParamRegistry& reg, const std::string& prefix, int d_model, int n_heads, int window,
           std::mt19937_64& rng);

  // Partitions the sequence into consecutive windows of `window` positions
  // (final window may be shorter) and runs self-attention inside each.
  Tensor windowed_self_attention(const Tensor& f) const;

  std::pair<Tensor, Tensor> operator()(const Tensor& f_prev, const Tensor& q_prev) const;

  int window() const { return window_; }

 private:
  MultiHeadAttention win_attn_, query_attn_, video_cross_, query_cross_;
  Mlp video_mlp_, query_mlp_;
  LayerNormLayer video_norm_, query_norm_;
  int window_;
};

enum class MaskMode { kZero, kRandom };
MaskMode mask_mode_from_string(const std::string& s);

// Replaces GT-span clip features with zeros or with gaussian noise matching
// the per-dimension mean/std of the whole video.
FeatureSequence apply_target_mask(const FeatureSequence& video, const std::vector<MomentSpan>& gt_spans,
                                  MaskMode mode, std::mt19937_64& rng);

class GroundingModel {
 public:
  GroundingModel(ModelConfig cfg, uint64_t seed);

  ModelOutput forward(const FeatureSequence& video, const TextQueryRecord& query);
  // Raw-feature entry point used by both forward() and the tests.
  ModelOutput forward_features(const Tensor& video_features, const Tensor& token_features);

  // Individual stages, exposed for tests; all operate at model dim.
  Tensor cte_forward(const Tensor& f_v);
  Tensor multimodal_encode(const Tensor& f_cte, const Tensor& f_t);
  ModelOutput decode(const Tensor& f_m);
  Tensor project_contrast(const Tensor& rows) const { return contrast_head_(rows); }

  const Mlp& contrast_head() const { return contrast_head_; }
  const std::vector<CteBlock>& blocks() const { return blocks_; }
  Tensor omega() const;  // sigmoid of the raw aggregation weight, in (0,1)

  ParamRegistry& params() { return params_; }
  const ParamRegistry& params() const { return params_; }
  const ModelConfig& config() const { return cfg_; }

 private:
  struct DecoderLayer {
    MultiHeadAttention self_attn, cross_attn;
    Mlp ffn;
    LayerNormLayer norm1, norm2, norm3;
    DecoderLayer(ParamRegistry& reg, const std::string& prefix, int d, int heads, std::mt19937_64& rng);
  };

  ModelConfig cfg_;
  ParamRegistry params_;

  Linear video_proj_, text_proj_;
  std::vector<CteBlock> blocks_;
  Tensor cte_queries_;  // [M x d_model]
  Mlp aggregate_mlp_;
  LayerNormLayer aggregate_norm_;
  Tensor raw_omega_;  // scalar, omega = sigmoid(raw)

  MultiHeadAttention mm_cross_, mm_self1_, mm_self2_;
  Conv1dLayer mm_conv_;
  LayerNormLayer mm_norm1_, mm_norm2_, mm_norm3_, mm_norm4_;

  Tensor moment_queries_;  // [M_dec x d_model]
  std::vector<DecoderLayer> decoder_;
  Linear span_fc1_, span_fc2_, span_fc3_;  // 3-layer span head -> (center, width)
  Linear conf_head_;
  Linear saliency_head_;
  Mlp contrast_head_;
};

}  // namespace cva
