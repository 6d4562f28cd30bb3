#include "prunecast/forecaster.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "prunecast/errors.hpp"

namespace prunecast {

const char* to_string(NormKind k) { return k == NormKind::layernorm ? "layernorm" : "rmsnorm"; }
const char* to_string(ActivationKind k) { return k == ActivationKind::relu ? "relu" : "gelu"; }
const char* to_string(AttentionStyle k) { return k == AttentionStyle::bidirectional ? "bidirectional" : "causal"; }

NormKind norm_kind_from_string(const std::string& s) {
  if (s == "layernorm") return NormKind::layernorm;
  if (s == "rmsnorm") return NormKind::rmsnorm;
  throw ConfigError("unknown norm kind '" + s + "'");
}

ActivationKind activation_from_string(const std::string& s) {
  if (s == "relu") return ActivationKind::relu;
  if (s == "gelu") return ActivationKind::gelu;
  throw ConfigError("unknown activation '" + s + "'");
}

AttentionStyle attention_style_from_string(const std::string& s) {
  if (s == "bidirectional") return AttentionStyle::bidirectional;
  if (s == "causal") return AttentionStyle::causal;
  throw ConfigError("unknown attention style '" + s + "'");
}

std::vector<std::string> ForecasterConfig::violations() const {
  std::vector<std::string> v;
  if (layers == 0) v.push_back("model.layers must be >= 1");
  if (heads == 0) v.push_back("model.heads must be >= 1");
  if (d_model == 0) v.push_back("model.d_model must be >= 1");
  if (heads && d_model % heads != 0) v.push_back("model.d_model must be divisible by model.heads");
  if (d_ffn == 0) v.push_back("model.d_ffn must be >= 1");
  if (patch == 0) v.push_back("model.patch must be >= 1");
  if (context == 0) v.push_back("model.context must be >= 1");
  if (patch && context % patch != 0) v.push_back("model.context must be divisible by model.patch");
  if (horizon == 0) v.push_back("model.horizon must be >= 1");
  if (!(norm_eps > 0.0)) v.push_back("model.norm_eps must be positive");
  return v;
}

void ForecasterConfig::validate() const {
  auto v = violations();
  if (v.empty()) return;
  std::ostringstream os;
  os << "invalid model config:";
  for (auto& s : v) os << "\n  - " << s;
  throw ConfigError(os.str());
}

std::size_t ForecasterConfig::dense_parameter_count() const {
  const std::size_t d = d_model;
  const std::size_t nrm = norm == NormKind::layernorm ? 2 * d : d;
  std::size_t per_block = 2 * nrm;
  per_block += 2 * d * d;            // q, k
  per_block += 2 * (d * d + d);      // v, o
  per_block += d * d_ffn + d_ffn;    // up
  per_block += d_ffn * d + d;        // down
  return (patch * d + d) + tokens() * d + layers * per_block + nrm + (d * horizon + horizon);
}

std::size_t HeadLayout::head_of_qk_column(std::size_t c) const {
  for (std::size_t h = 0; h < count(); ++h)
    if (c < qk_offsets[h + 1]) return h;
  throw DimensionError("q/k column " + std::to_string(c) + " outside head layout");
}

std::size_t HeadLayout::head_of_v_column(std::size_t c) const {
  for (std::size_t h = 0; h < count(); ++h)
    if (c < v_offsets[h + 1]) return h;
  throw DimensionError("v column " + std::to_string(c) + " outside head layout");
}

Var ModelVars::at(const Tensor& t) const {
  auto it = by_tensor.find(&t);
  if (it == by_tensor.end()) throw ContractError("tensor was not bound in this forward pass");
  return it->second;
}

WindowStats window_stats(std::span<const double> context) {
  if (context.empty()) throw ContractError("window_stats: empty context");
  double mean = 0.0;
  for (double x : context) mean += x;
  mean /= static_cast<double>(context.size());
  double var = 0.0;
  for (double x : context) var += (x - mean) * (x - mean);
  var /= static_cast<double>(context.size());
  return {mean, std::max(std::sqrt(var), kStdFloor)};
}

namespace {

Norm make_norm(NormKind kind, std::size_t d, double eps) {
  Norm n;
  n.kind = kind;
  n.gain = Tensor::vector(d, 1.0);
  if (kind == NormKind::layernorm) n.offset = Tensor::vector(d, 0.0);
  n.eps = eps;
  return n;
}

HeadLayout dense_layout(std::size_t heads, std::size_t head_dim) {
  HeadLayout l;
  for (std::size_t h = 0; h <= heads; ++h) {
    l.qk_offsets.push_back(h * head_dim);
    l.v_offsets.push_back(h * head_dim);
  }
  l.head_ids.resize(heads);
  std::iota(l.head_ids.begin(), l.head_ids.end(), 0);
  l.scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  return l;
}

Var apply_norm(Tape& tape, const Norm& n, Var x, bool grads, ModelVars* vars) {
  Var gain = tape.leaf_ref(n.gain, grads);
  if (vars) vars->by_tensor[&n.gain] = gain;
  if (n.kind == NormKind::rmsnorm) return ad::rms_norm(x, gain, n.eps);
  Var offset = tape.leaf_ref(n.offset, grads);
  if (vars) vars->by_tensor[&n.offset] = offset;
  return ad::layer_norm(x, gain, offset, n.eps);
}

Var apply_linear(Tape& tape, const MaskedLinear& layer, Var x, const ForwardOptions& opts, ModelVars* vars) {
  LinearGradMode mode{opts.param_grads, opts.mask_grads, opts.apply_masks};
  LinearVars lv = bind(tape, layer, mode);
  if (vars) {
    vars->by_tensor[&layer.weight] = lv.weight;
    if (lv.has_bias) vars->by_tensor[&layer.bias] = lv.bias;
    vars->by_tensor[&layer.mask_in] = lv.mask_in;
    vars->by_tensor[&layer.mask_out] = lv.mask_out;
  }
  return forward(layer, lv, x, opts.apply_masks);
}

std::vector<std::size_t> ones_of(const Tensor& mask, const std::string& what) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] == 1.0) {
      keep.push_back(i);
    } else if (mask[i] != 0.0) {
      throw ContractError("cannot slice " + what + ": mask value " + std::to_string(mask[i]) + " at " +
                          std::to_string(i) + " is not binary");
    }
  }
  return keep;
}

std::optional<std::vector<std::size_t>> compose(const std::optional<std::vector<std::size_t>>& base,
                                                const std::vector<std::size_t>& keep, std::size_t full) {
  if (!base && keep.size() == full) return std::nullopt;
  std::vector<std::size_t> out;
  out.reserve(keep.size());
  for (auto k : keep) out.push_back(base ? (*base)[k] : k);
  return out;
}

// Keeps rows/cols of `src`. Gathering/scattering sides keep their original
// width and record the surviving coordinates; interior sides shrink.
MaskedLinear slice_layer(const MaskedLinear& src, const std::vector<std::size_t>& rows,
                         const std::vector<std::size_t>& cols, bool gather_in, bool scatter_out) {
  MaskedLinear out;
  out.id = src.id;
  out.weight = Tensor::matrix(rows.size(), cols.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j) out.weight.at(i, j) = src.weight.at(rows[i], cols[j]);
  if (src.has_bias()) {
    out.bias = Tensor::vector(cols.size());
    for (std::size_t j = 0; j < cols.size(); ++j) out.bias[j] = src.bias[cols[j]];
  }
  out.mask_in = Tensor::vector(rows.size(), 1.0);
  out.mask_out = Tensor::vector(cols.size(), 1.0);
  if (gather_in) {
    out.in_index = compose(src.in_index, rows, src.rows());
    out.in_width = src.in_width;
  } else {
    if (src.in_index) throw StateError("layer " + src.id + ": interior input carries a gather map");
    out.in_width = rows.size();
  }
  if (scatter_out) {
    out.out_index = compose(src.out_index, cols, src.cols());
    out.out_width = src.out_width;
  } else {
    if (src.out_index) throw StateError("layer " + src.id + ": interior output carries a scatter map");
    out.out_width = cols.size();
  }
  return out;
}

std::size_t norm_count(const Norm& n) { return n.gain.size() + n.offset.size(); }

}  // namespace

Forecaster::Forecaster(ForecasterConfig config) : config_(std::move(config)) {
  config_.validate();
  const std::size_t d = config_.d_model, f = config_.d_ffn;
  Rng rng(config_.seed);
  embed_ = MaskedLinear("embed", config_.patch, d, true);
  embed_.init_uniform(rng);
  pos_ = Tensor::matrix(config_.tokens(), d);
  for (auto& x : pos_.data()) x = 0.02 * rng.normal();
  for (std::size_t b = 0; b < config_.layers; ++b) {
    const std::string p = "block" + std::to_string(b);
    Block blk;
    blk.norm1 = make_norm(config_.norm, d, config_.norm_eps);
    blk.norm2 = make_norm(config_.norm, d, config_.norm_eps);
    blk.q = MaskedLinear(p + ".attn.q", d, d, false);
    blk.k = MaskedLinear(p + ".attn.k", d, d, false);
    blk.v = MaskedLinear(p + ".attn.v", d, d, true);
    blk.o = MaskedLinear(p + ".attn.o", d, d, true);
    blk.up = MaskedLinear(p + ".ffn.up", d, f, true);
    blk.down = MaskedLinear(p + ".ffn.down", f, d, true);
    for (MaskedLinear* l : {&blk.q, &blk.k, &blk.v, &blk.o, &blk.up, &blk.down}) l->init_uniform(rng);
    blk.heads = dense_layout(config_.heads, config_.head_dim());
    blocks_.push_back(std::move(blk));
  }
  final_norm_ = make_norm(config_.norm, d, config_.norm_eps);
  head_ = MaskedLinear("head", d, config_.horizon, true);
  head_.init_uniform(rng);
}

Var Forecaster::forward(Tape& tape, const Tensor& contexts, const ForwardOptions& opts, ModelVars* vars,
                        ForwardCapture* capture) const {
  const std::size_t L = config_.context, P = config_.patch, T = config_.tokens();
  if (contexts.rank() != 2 || contexts.cols() != L) {
    throw DimensionError("forecaster expects contexts [N x " + std::to_string(L) + "], got " +
                         shape_str(contexts.shape()));
  }
  const std::size_t N = contexts.rows();
  if (N == 0) throw ContractError("forecaster: empty batch");
  if (capture) capture->blocks.clear();

  Var x = tape.constant(contexts.reshaped({N * T, P}));
  x = apply_linear(tape, embed_, x, opts, vars);
  Var pos = tape.leaf_ref(pos_, opts.param_grads);
  if (vars) vars->by_tensor[&pos_] = pos;
  x = ad::add(x, pos);

  const bool norm_grads = opts.param_grads && opts.norm_grads;
  for (const Block& blk : blocks_) {
    BlockCapture* cap = nullptr;
    if (capture) cap = &capture->blocks.emplace_back();
    if (cap) cap->residual = x.value();
    Var y = apply_norm(tape, blk.norm1, x, norm_grads, vars);
    Var q = apply_linear(tape, blk.q, y, opts, vars);
    Var k = apply_linear(tape, blk.k, y, opts, vars);
    Var v = apply_linear(tape, blk.v, y, opts, vars);
    ad::AttentionLayout layout{N, T, blk.heads.qk_offsets, blk.heads.v_offsets, blk.heads.scale,
                               config_.attention == AttentionStyle::causal};
    Var a = ad::attention(q, k, v, layout);
    if (cap) cap->attention = a.value();
    Var o = apply_linear(tape, blk.o, a, opts, vars);
    if (cap) cap->mha_output = o.value();
    x = ad::add(x, o);

    if (cap) cap->ffn_residual = x.value();
    y = apply_norm(tape, blk.norm2, x, norm_grads, vars);
    Var u = apply_linear(tape, blk.up, y, opts, vars);
    u = config_.activation == ActivationKind::relu ? ad::relu(u) : ad::gelu(u);
    if (cap) cap->activation = u.value();
    Var f = apply_linear(tape, blk.down, u, opts, vars);
    x = ad::add(x, f);
  }
  Var y = apply_norm(tape, final_norm_, x, norm_grads, vars);
  std::vector<std::size_t> last(N);
  for (std::size_t n = 0; n < N; ++n) last[n] = n * T + T - 1;
  y = ad::take_rows(y, last);
  return apply_linear(tape, head_, y, opts, vars);
}

Tensor Forecaster::predict_normalized(const Tensor& contexts, bool apply_masks) const {
  Tape tape;
  ForwardOptions opts;
  opts.apply_masks = apply_masks;
  return forward(tape, contexts, opts).value();
}

Tensor Forecaster::predict(const Tensor& raw_contexts) const {
  const std::size_t L = config_.context;
  if (raw_contexts.cols() != L || raw_contexts.rank() != 2) {
    throw DimensionError("forecaster expects windows of length " + std::to_string(L) + ", got " +
                         shape_str(raw_contexts.shape()));
  }
  const std::size_t N = raw_contexts.rows();
  Tensor norm = raw_contexts;
  std::vector<WindowStats> stats(N);
  for (std::size_t n = 0; n < N; ++n) {
    stats[n] = window_stats(raw_contexts.data().subspan(n * L, L));
    for (std::size_t t = 0; t < L; ++t) norm.at(n, t) = (norm.at(n, t) - stats[n].mean) / stats[n].std;
  }
  Tensor out = predict_normalized(norm);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t h = 0; h < out.cols(); ++h) out.at(n, h) = out.at(n, h) * stats[n].std + stats[n].mean;
  return out;
}

std::vector<MaskedLinear*> Forecaster::linear_layers() {
  std::vector<MaskedLinear*> out{&embed_};
  for (auto& b : blocks_)
    for (MaskedLinear* l : {&b.q, &b.k, &b.v, &b.o, &b.up, &b.down}) out.push_back(l);
  out.push_back(&head_);
  return out;
}

std::vector<const MaskedLinear*> Forecaster::linear_layers() const {
  auto mut = const_cast<Forecaster*>(this)->linear_layers();
  return {mut.begin(), mut.end()};
}

MaskedLinear& Forecaster::layer(const std::string& id) {
  for (MaskedLinear* l : linear_layers())
    if (l->id == id) return *l;
  throw ContractError("no layer with id '" + id + "'");
}

const MaskedLinear& Forecaster::layer(const std::string& id) const {
  return const_cast<Forecaster*>(this)->layer(id);
}

std::vector<ParamRef> Forecaster::parameters() {
  std::vector<ParamRef> out;
  auto add_linear = [&](MaskedLinear& l) {
    out.push_back({l.id + ".weight", &l.weight, &l, false, false});
    if (l.has_bias()) out.push_back({l.id + ".bias", &l.bias, &l, true, false});
  };
  auto add_norm = [&](Norm& n, const std::string& name) {
    out.push_back({name + ".gain", &n.gain, nullptr, false, true});
    if (!n.offset.empty()) out.push_back({name + ".offset", &n.offset, nullptr, false, true});
  };
  add_linear(embed_);
  out.push_back({"pos", &pos_, nullptr, false, false});
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    Block& blk = blocks_[b];
    const std::string p = "block" + std::to_string(b);
    add_norm(blk.norm1, p + ".norm1");
    for (MaskedLinear* l : {&blk.q, &blk.k, &blk.v, &blk.o}) add_linear(*l);
    add_norm(blk.norm2, p + ".norm2");
    add_linear(blk.up);
    add_linear(blk.down);
  }
  add_norm(final_norm_, "final_norm");
  add_linear(head_);
  return out;
}

std::vector<MaskRef> Forecaster::masks() {
  std::vector<MaskRef> out;
  for (MaskedLinear* l : linear_layers()) {
    out.push_back({l, ChannelSide::input, &l->mask_in});
    out.push_back({l, ChannelSide::output, &l->mask_out});
  }
  return out;
}

std::size_t Forecaster::parameter_count() const {
  std::size_t n = pos_.size() + norm_count(final_norm_);
  for (const MaskedLinear* l : linear_layers()) n += l->parameter_count();
  for (const Block& b : blocks_) n += norm_count(b.norm1) + norm_count(b.norm2);
  return n;
}

std::size_t Forecaster::effective_parameter_count() const { return sliced().parameter_count(); }

double Forecaster::remaining_fraction() const {
  return static_cast<double>(effective_parameter_count()) / static_cast<double>(config_.dense_parameter_count());
}

bool Forecaster::masks_all_ones() const {
  for (const MaskedLinear* l : linear_layers())
    if (!l->masks_all_ones()) return false;
  return true;
}

bool Forecaster::is_sliced() const {
  for (const MaskedLinear* l : linear_layers())
    if (l->in_index || l->out_index) return true;
  for (const Block& b : blocks_) {
    if (b.q.cols() != config_.d_model || b.v.cols() != config_.d_model || b.up.cols() != config_.d_ffn) return true;
  }
  return false;
}

Forecaster Forecaster::sliced() const {
  Forecaster out = *this;
  out.embed_ = slice_layer(embed_, ones_of(embed_.mask_in, embed_.id), ones_of(embed_.mask_out, embed_.id), true, true);
  out.head_ = slice_layer(head_, ones_of(head_.mask_in, head_.id), ones_of(head_.mask_out, head_.id), true, true);

  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const Block& src = blocks_[b];
    Block& dst = out.blocks_[b];
    const HeadLayout& hl = src.heads;

    // V/W^O pairs survive when both sides are unmasked; a head with no
    // surviving pair contributes nothing and is dropped with its Q/K.
    const auto v_out = ones_of(src.v.mask_out, src.v.id);
    const auto o_in = ones_of(src.o.mask_in, src.o.id);
    std::vector<bool> v_alive(src.v.cols(), false), head_alive(hl.count(), false);
    for (auto c : v_out) v_alive[c] = true;
    std::vector<bool> o_in_alive(src.o.rows(), false);
    for (auto c : o_in) o_in_alive[c] = true;
    for (std::size_t c = 0; c < v_alive.size(); ++c) {
      v_alive[c] = v_alive[c] && o_in_alive[c];
      if (v_alive[c]) head_alive[hl.head_of_v_column(c)] = true;
    }
    std::vector<bool> qk_alive(src.q.cols(), false);
    for (auto c : ones_of(src.q.mask_out, src.q.id)) qk_alive[c] = true;
    std::vector<bool> k_alive(src.k.cols(), false);
    for (auto c : ones_of(src.k.mask_out, src.k.id)) k_alive[c] = true;
    for (std::size_t c = 0; c < qk_alive.size(); ++c) {
      qk_alive[c] = qk_alive[c] && k_alive[c] && head_alive[hl.head_of_qk_column(c)];
    }

    HeadLayout nl;
    nl.scale = hl.scale;
    nl.qk_offsets.push_back(0);
    nl.v_offsets.push_back(0);
    std::vector<std::size_t> qk_keep, v_keep;
    for (std::size_t h = 0; h < hl.count(); ++h) {
      if (!head_alive[h]) continue;
      for (std::size_t c = hl.qk_offsets[h]; c < hl.qk_offsets[h + 1]; ++c)
        if (qk_alive[c]) qk_keep.push_back(c);
      for (std::size_t c = hl.v_offsets[h]; c < hl.v_offsets[h + 1]; ++c)
        if (v_alive[c]) v_keep.push_back(c);
      nl.qk_offsets.push_back(qk_keep.size());
      nl.v_offsets.push_back(v_keep.size());
      nl.head_ids.push_back(hl.head_ids[h]);
    }
    dst.heads = std::move(nl);

    dst.q = slice_layer(src.q, ones_of(src.q.mask_in, src.q.id), qk_keep, true, false);
    dst.k = slice_layer(src.k, ones_of(src.k.mask_in, src.k.id), qk_keep, true, false);
    dst.v = slice_layer(src.v, ones_of(src.v.mask_in, src.v.id), v_keep, true, false);
    dst.o = slice_layer(src.o, v_keep, ones_of(src.o.mask_out, src.o.id), false, true);

    std::vector<bool> f_alive(src.up.cols(), false);
    for (auto j : ones_of(src.up.mask_out, src.up.id)) f_alive[j] = true;
    std::vector<bool> down_in(src.down.rows(), false);
    for (auto j : ones_of(src.down.mask_in, src.down.id)) down_in[j] = true;
    std::vector<std::size_t> f_keep;
    for (std::size_t j = 0; j < f_alive.size(); ++j)
      if (f_alive[j] && down_in[j]) f_keep.push_back(j);
    dst.up = slice_layer(src.up, ones_of(src.up.mask_in, src.up.id), f_keep, true, false);
    dst.down = slice_layer(src.down, f_keep, ones_of(src.down.mask_out, src.down.id), false, true);
  }
  return out;
}

Tensor head_output(const Block& block, const Tensor& attention, std::size_t head) {
  const HeadLayout& hl = block.heads;
  if (head >= hl.count()) throw ContractError("head " + std::to_string(head) + " out of range");
  const MaskedLinear& o = block.o;
  const std::size_t v0 = hl.v_offsets[head], v1 = hl.v_offsets[head + 1];
  const std::size_t R = attention.rows(), dout = o.cols();
  Tensor part({R, dout}, 0.0);
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = v0; c < v1; ++c) {
      const double a = attention.at(r, c) * o.mask_in[c];
      if (a == 0.0) continue;
      for (std::size_t j = 0; j < dout; ++j) part.at(r, j) += a * o.weight.at(c, j);
    }
    for (std::size_t j = 0; j < dout; ++j) part.at(r, j) *= o.mask_out[j];
  }
  if (!o.out_index) return part;
  Tensor out({R, o.out_width}, 0.0);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < dout; ++j) out.at(r, (*o.out_index)[j]) = part.at(r, j);
  return out;
}

}  // namespace prunecast
