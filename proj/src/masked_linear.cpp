#include "prunecast/masked_linear.hpp"

#include <cmath>

#include "prunecast/errors.hpp"

namespace prunecast {

const char* to_string(ChannelSide side) { return side == ChannelSide::input ? "input" : "output"; }

ChannelSide channel_side_from_string(const std::string& s) {
  if (s == "input") return ChannelSide::input;
  if (s == "output") return ChannelSide::output;
  throw ConfigError("unknown channel side '" + s + "'");
}

MaskedLinear::MaskedLinear(std::string layer_id, std::size_t d_in, std::size_t d_out, bool has_bias)
    : id(std::move(layer_id)),
      weight(Tensor::matrix(d_in, d_out)),
      bias(has_bias ? Tensor::vector(d_out) : Tensor()),
      mask_in(Tensor::vector(d_in, 1.0)),
      mask_out(Tensor::vector(d_out, 1.0)),
      in_width(d_in),
      out_width(d_out) {}

void MaskedLinear::init_uniform(Rng& rng) {
  const double bound = rows() > 0 ? 1.0 / std::sqrt(static_cast<double>(rows())) : 0.0;
  for (auto& w : weight.data()) w = rng.uniform(-bound, bound);
  for (auto& b : bias.data()) b = rng.uniform(-bound, bound);
  mask_in.fill(1.0);
  mask_out.fill(1.0);
}

std::size_t MaskedLinear::unmasked_parameter_count() const {
  std::size_t alive_in = 0, alive_out = 0;
  for (double m : mask_in.data()) alive_in += m != 0.0;
  for (double m : mask_out.data()) alive_out += m != 0.0;
  return alive_in * alive_out + (has_bias() ? alive_out : 0);
}

bool MaskedLinear::masks_binary() const {
  for (double m : mask_in.data())
    if (m != 0.0 && m != 1.0) return false;
  for (double m : mask_out.data())
    if (m != 0.0 && m != 1.0) return false;
  return true;
}

bool MaskedLinear::masks_all_ones() const {
  for (double m : mask_in.data())
    if (m != 1.0) return false;
  for (double m : mask_out.data())
    if (m != 1.0) return false;
  return true;
}

Tensor MaskedLinear::folded_forward(const Tensor& x) const {
  if (x.cols() != in_width) {
    throw DimensionError("layer " + id + ": input " + shape_str(x.shape()) + " but expected width " +
                         std::to_string(in_width));
  }
  const std::size_t r = x.rows(), din = rows(), dout = cols();
  Tensor folded = weight;
  for (std::size_t i = 0; i < din; ++i)
    for (std::size_t j = 0; j < dout; ++j) folded.at(i, j) *= mask_in[i] * mask_out[j];
  Tensor gathered({r, din});
  for (std::size_t t = 0; t < r; ++t)
    for (std::size_t i = 0; i < din; ++i)
      gathered.at(t, i) = x.at(t, in_index ? (*in_index)[i] : i);
  Tensor h({r, dout});
  linalg::gemm(gathered.raw(), folded.raw(), h.raw(), r, din, dout, false);
  if (has_bias()) {
    for (std::size_t t = 0; t < r; ++t)
      for (std::size_t j = 0; j < dout; ++j) h.at(t, j) += bias[j] * mask_out[j];
  }
  if (!out_index) return h;
  Tensor out({r, out_width}, 0.0);
  for (std::size_t t = 0; t < r; ++t)
    for (std::size_t j = 0; j < dout; ++j) out.at(t, (*out_index)[j]) = h.at(t, j);
  return out;
}

LinearVars bind(Tape& tape, const MaskedLinear& layer, const LinearGradMode& mode) {
  LinearVars v;
  v.weight = tape.leaf_ref(layer.weight, mode.params);
  v.has_bias = layer.has_bias();
  if (v.has_bias) v.bias = tape.leaf_ref(layer.bias, mode.params);
  v.mask_in = tape.leaf_ref(layer.mask_in, mode.masks);
  v.mask_out = tape.leaf_ref(layer.mask_out, mode.masks);
  return v;
}

Var forward(const MaskedLinear& layer, const LinearVars& vars, Var x, bool apply_masks) {
  if (x.value().cols() != layer.in_width) {
    throw DimensionError("layer " + layer.id + ": input " + shape_str(x.shape()) + " but expected width " +
                         std::to_string(layer.in_width));
  }
  Var h = x;
  if (layer.in_index) h = ad::gather_columns(h, *layer.in_index);
  if (apply_masks) h = ad::mask_columns(h, vars.mask_in);
  h = ad::matmul(h, vars.weight);
  if (vars.has_bias) h = ad::add(h, vars.bias);
  if (apply_masks) h = ad::mask_columns(h, vars.mask_out);
  if (layer.out_index) h = ad::scatter_columns(h, *layer.out_index, layer.out_width);
  return h;
}

}  // namespace prunecast
