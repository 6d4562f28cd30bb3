#pragma once

#include <optional>
#include <string>
#include <vector>

#include "prunecast/autodiff.hpp"
#include "prunecast/tensor.hpp"

namespace prunecast {

enum class ChannelSide { input, output };

const char* to_string(ChannelSide side);
ChannelSide channel_side_from_string(const std::string& s);

/// Linear layer h = ((x[:, in_index] * m_in) W + b) * m_out, scattered back
/// to out_width columns when out_index is set.
///
/// A dense layer has no index maps. Slicing keeps only surviving rows and
/// columns of W; residual-facing sides record which coordinates of the
/// original input/output space the stored rows/columns correspond to.
struct MaskedLinear {
  std::string id;
  Tensor weight;       // [rows x cols]
  Tensor bias;         // [cols], empty when the layer has no bias
  Tensor mask_in;      // [rows], 0/1
  Tensor mask_out;     // [cols], 0/1
  std::optional<std::vector<std::size_t>> in_index;   // gather from incoming columns
  std::optional<std::vector<std::size_t>> out_index;  // scatter into out_width columns
  std::size_t in_width = 0;   // columns of the incoming tensor
  std::size_t out_width = 0;  // columns of the produced tensor

  MaskedLinear() = default;
  MaskedLinear(std::string id, std::size_t d_in, std::size_t d_out, bool has_bias);

  std::size_t rows() const { return weight.rows(); }
  std::size_t cols() const { return weight.cols(); }
  bool has_bias() const { return !bias.empty(); }

  /// Random init uniform in +-1/sqrt(rows); masks reset to ones.
  void init_uniform(Rng& rng);

  std::size_t parameter_count() const { return weight.size() + bias.size(); }
  /// Weight and bias entries not zeroed by the masks.
  std::size_t unmasked_parameter_count() const;
  bool masks_binary() const;
  bool masks_all_ones() const;

  /// x(W . (m_in^T m_out)) + b . m_out, evaluated with folded weights.
  Tensor folded_forward(const Tensor& x) const;
};

/// Tape handles for one layer's leaves during a forward pass.
struct LinearVars {
  Var weight, bias, mask_in, mask_out;
  bool has_bias = false;
};

struct LinearGradMode {
  bool params = false;
  bool masks = false;
  bool apply_masks = true;
};

/// Registers the layer's tensors on the tape as leaves (by reference).
LinearVars bind(Tape& tape, const MaskedLinear& layer, const LinearGradMode& mode);

/// Forward on the tape. x must have layer.in_width columns.
Var forward(const MaskedLinear& layer, const LinearVars& vars, Var x, bool apply_masks = true);

}  // namespace prunecast
