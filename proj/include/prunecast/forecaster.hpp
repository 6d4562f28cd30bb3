#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "prunecast/autodiff.hpp"
#include "prunecast/masked_linear.hpp"
#include "prunecast/tensor.hpp"

namespace prunecast {

enum class NormKind { layernorm, rmsnorm };
enum class ActivationKind { relu, gelu };
enum class AttentionStyle { bidirectional, causal };

const char* to_string(NormKind k);
const char* to_string(ActivationKind k);
const char* to_string(AttentionStyle k);
NormKind norm_kind_from_string(const std::string& s);
ActivationKind activation_from_string(const std::string& s);
AttentionStyle attention_style_from_string(const std::string& s);

struct ForecasterConfig {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t d_model = 32;
  std::size_t d_ffn = 64;
  std::size_t patch = 8;
  std::size_t context = 64;
  std::size_t horizon = 16;
  NormKind norm = NormKind::layernorm;
  ActivationKind activation = ActivationKind::gelu;
  AttentionStyle attention = AttentionStyle::bidirectional;
  double norm_eps = 1e-5;
  std::uint64_t seed = 1;

  std::size_t head_dim() const { return heads ? d_model / heads : 0; }
  std::size_t tokens() const { return patch ? context / patch : 0; }

  /// Every violated invariant, empty when valid.
  std::vector<std::string> violations() const;
  void validate() const;
  /// Parameter count of an unpruned model with this config.
  std::size_t dense_parameter_count() const;

  bool operator==(const ForecasterConfig&) const = default;
};

struct Norm {
  NormKind kind = NormKind::layernorm;
  Tensor gain;
  Tensor offset;  // empty for rmsnorm
  double eps = 1e-5;
};

/// Column groups of the folded Q/K/V projections. A dense block has
/// d/H columns per head; slicing may shrink or drop heads. head_ids keeps
/// the original index of each surviving head.
struct HeadLayout {
  std::vector<std::size_t> qk_offsets;
  std::vector<std::size_t> v_offsets;
  std::vector<std::size_t> head_ids;
  double scale = 1.0;

  std::size_t count() const { return head_ids.size(); }
  std::size_t head_of_qk_column(std::size_t c) const;
  std::size_t head_of_v_column(std::size_t c) const;
};

struct Block {
  Norm norm1, norm2;
  MaskedLinear q, k, v, o, up, down;
  HeadLayout heads;
};

struct ForwardOptions {
  bool param_grads = false;
  bool norm_grads = true;  // only consulted when param_grads is set
  bool mask_grads = false;
  bool apply_masks = true;
};

/// Tape leaves registered for one forward pass, keyed by the tensor they view.
struct ModelVars {
  std::map<const Tensor*, Var> by_tensor;
  Var at(const Tensor& t) const;
};

/// Intermediate values recorded by an inspecting forward pass.
struct BlockCapture {
  Tensor residual;       // X entering the attention sublayer
  Tensor attention;      // per-head softmax(.)V, concatenated by column group
  Tensor mha_output;     // output of the W^O layer
  Tensor ffn_residual;   // X entering the FFN sublayer
  Tensor activation;     // sigma(up(x)), input of the down projection
};
struct ForwardCapture {
  std::vector<BlockCapture> blocks;
};

struct ParamRef {
  std::string name;
  Tensor* tensor = nullptr;
  MaskedLinear* layer = nullptr;  // owning layer for weights/biases
  bool is_bias = false;
  bool is_norm = false;
};

struct MaskRef {
  MaskedLinear* layer = nullptr;
  ChannelSide side = ChannelSide::input;
  Tensor* mask = nullptr;
};

/// Per-window instance normalization statistics.
struct WindowStats {
  double mean = 0.0;
  double std = 1.0;
};
WindowStats window_stats(std::span<const double> context);
inline constexpr double kStdFloor = 1e-8;

class Forecaster {
 public:
  /// Randomly initialized from config.seed.
  explicit Forecaster(ForecasterConfig config);

  const ForecasterConfig& config() const { return config_; }

  /// Normalized contexts [N x L] -> normalized forecasts [N x horizon].
  Var forward(Tape& tape, const Tensor& contexts, const ForwardOptions& opts, ModelVars* vars = nullptr,
              ForwardCapture* capture = nullptr) const;

  Tensor predict_normalized(const Tensor& contexts, bool apply_masks = true) const;
  /// Raw windows [N x L] -> raw forecasts [N x horizon] via instance normalization.
  Tensor predict(const Tensor& raw_contexts) const;

  std::vector<MaskedLinear*> linear_layers();
  std::vector<const MaskedLinear*> linear_layers() const;
  MaskedLinear& layer(const std::string& id);
  const MaskedLinear& layer(const std::string& id) const;

  std::vector<ParamRef> parameters();
  std::vector<MaskRef> masks();
  std::size_t parameter_count() const;
  /// Parameter count after slicing away everything the masks disable.
  std::size_t effective_parameter_count() const;
  /// effective_parameter_count() / dense_parameter_count().
  double remaining_fraction() const;

  bool masks_all_ones() const;
  bool is_sliced() const;

  /// Physically removes masked rows/columns. Output is numerically
  /// equivalent to the masked model; every mask of the result is all-ones.
  Forecaster sliced() const;

  MaskedLinear& embed() { return embed_; }
  const MaskedLinear& embed() const { return embed_; }
  Tensor& positional() { return pos_; }
  const Tensor& positional() const { return pos_; }
  std::vector<Block>& blocks() { return blocks_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  Norm& final_norm() { return final_norm_; }
  const Norm& final_norm() const { return final_norm_; }
  MaskedLinear& head() { return head_; }
  const MaskedLinear& head() const { return head_; }

 private:
  ForecasterConfig config_;
  MaskedLinear embed_;
  Tensor pos_;  // [tokens x d_model]
  std::vector<Block> blocks_;
  Norm final_norm_;
  MaskedLinear head_;
};

/// Output of one surviving head projected through W^O (bias excluded):
/// (A_h V_h masked by m_in of W^O) W^O_h, masked by m_out and scattered to d.
Tensor head_output(const Block& block, const Tensor& attention, std::size_t head);

}  // namespace prunecast
