#include "prunecast/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "prunecast/errors.hpp"

namespace prunecast {

using nlohmann::json;

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

void put_f64(std::vector<std::uint8_t>& out, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

double get_f64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(v);
}

std::uint32_t crc_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

json bits(const Tensor& mask) {
  json a = json::array();
  for (double m : mask.data()) {
    if (m != 0.0 && m != 1.0) throw ContractError("checkpoint masks must be binary");
    a.push_back(m == 1.0 ? 1 : 0);
  }
  return a;
}

Tensor from_bits(const json& a, std::size_t expected, const std::string& what) {
  if (!a.is_array() || a.size() != expected) throw FormatError("checkpoint: bad mask for " + what);
  Tensor t = Tensor::vector(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    const int b = a[i].get<int>();
    if (b != 0 && b != 1) throw FormatError("checkpoint: non-binary mask bit for " + what);
    t[i] = b;
  }
  return t;
}

json index_json(const std::optional<std::vector<std::size_t>>& idx) {
  if (!idx) return nullptr;
  return json(*idx);
}

std::optional<std::vector<std::size_t>> index_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<std::vector<std::size_t>>();
}

template <class T>
void read_key(const json& j, const char* key, T& dst, std::vector<std::string>& violations, const std::string& prefix) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception&) {
    violations.push_back(prefix + key + " has the wrong type");
  }
}

}  // namespace

json to_json(const ForecasterConfig& c) {
  return json{{"layers", c.layers},     {"heads", c.heads},
              {"d_model", c.d_model},   {"d_ffn", c.d_ffn},
              {"patch", c.patch},       {"context", c.context},
              {"horizon", c.horizon},   {"norm", to_string(c.norm)},
              {"activation", to_string(c.activation)},
              {"attention", to_string(c.attention)},
              {"norm_eps", c.norm_eps}, {"seed", c.seed}};
}

ForecasterConfig forecaster_config_from_json(const json& j, std::vector<std::string>& violations,
                                             const std::string& prefix) {
  ForecasterConfig c;
  if (!j.is_object()) {
    violations.push_back(prefix + " must be an object");
    return c;
  }
  static const char* known[] = {"layers", "heads",     "d_model",   "d_ffn",    "patch", "context",
                                "horizon", "norm",     "activation", "attention", "norm_eps", "seed"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return it.key() == k; }) ==
        std::end(known)) {
      violations.push_back("unknown key " + prefix + it.key());
    }
  }
  read_key(j, "layers", c.layers, violations, prefix);
  read_key(j, "heads", c.heads, violations, prefix);
  read_key(j, "d_model", c.d_model, violations, prefix);
  read_key(j, "d_ffn", c.d_ffn, violations, prefix);
  read_key(j, "patch", c.patch, violations, prefix);
  read_key(j, "context", c.context, violations, prefix);
  read_key(j, "horizon", c.horizon, violations, prefix);
  read_key(j, "norm_eps", c.norm_eps, violations, prefix);
  read_key(j, "seed", c.seed, violations, prefix);
  auto read_enum = [&](const char* key, auto parse, auto& dst) {
    if (!j.contains(key)) return;
    try {
      dst = parse(j.at(key).get<std::string>());
    } catch (const std::exception& e) {
      violations.push_back(prefix + key + ": " + e.what());
    }
  };
  read_enum("norm", norm_kind_from_string, c.norm);
  read_enum("activation", activation_from_string, c.activation);
  read_enum("attention", attention_style_from_string, c.attention);
  for (auto& v : c.violations()) violations.push_back(v);
  return c;
}

std::vector<std::uint8_t> encode_checkpoint(const Forecaster& model, const ImportanceLedger* ledger) {
  Forecaster& m = const_cast<Forecaster&>(model);  // parameters() hands out mutable refs; we only read
  json header;
  header["format"] = "prunecast-checkpoint";
  header["version"] = kCheckpointVersion;
  header["config"] = to_json(model.config());

  json layers = json::array();
  for (const MaskedLinear* l : model.linear_layers()) {
    layers.push_back(json{{"id", l->id},
                          {"rows", l->rows()},
                          {"cols", l->cols()},
                          {"has_bias", l->has_bias()},
                          {"in_width", l->in_width},
                          {"out_width", l->out_width},
                          {"in_index", index_json(l->in_index)},
                          {"out_index", index_json(l->out_index)},
                          {"mask_in", bits(l->mask_in)},
                          {"mask_out", bits(l->mask_out)}});
  }
  header["layers"] = std::move(layers);

  json blocks = json::array();
  for (const Block& b : model.blocks()) {
    blocks.push_back(json{{"qk_offsets", b.heads.qk_offsets},
                          {"v_offsets", b.heads.v_offsets},
                          {"head_ids", b.heads.head_ids},
                          {"scale_bits", std::bit_cast<std::uint64_t>(b.heads.scale)}});
  }
  header["blocks"] = std::move(blocks);

  std::vector<std::uint8_t> payload;
  json tensors = json::array();
  auto add_tensor = [&](const std::string& name, const Tensor& t) {
    tensors.push_back(json{{"name", name}, {"shape", t.shape()}, {"offset", payload.size()}});
    for (double d : t.data()) put_f64(payload, d);
  };
  for (const ParamRef& p : m.parameters()) add_tensor(p.name, *p.tensor);

  if (ledger) {
    json refs = json::array();
    json alive = json::array();
    json prot = json::array();
    Tensor ema = Tensor::vector(ledger->size());
    Tensor raw = Tensor::vector(ledger->size());
    for (std::size_t i = 0; i < ledger->size(); ++i) {
      const LedgerEntry& e = ledger->entries()[i];
      refs.push_back(json::array({e.ref.layer_id, to_string(e.ref.side), e.ref.index}));
      alive.push_back(e.alive ? 1 : 0);
      prot.push_back(e.is_protected ? 1 : 0);
      ema[i] = e.ema;
      raw[i] = e.last_raw;
    }
    if (ledger->size() > 0) {
      add_tensor("ledger.ema", ema);
      add_tensor("ledger.last_raw", raw);
    }
    header["ledger"] = json{{"channels", std::move(refs)},
                            {"alive", std::move(alive)},
                            {"protected", std::move(prot)},
                            {"alpha_bits", std::bit_cast<std::uint64_t>(ledger->alpha)},
                            {"batches", ledger->batches}};
  }
  header["tensors"] = std::move(tensors);
  header["payload_bytes"] = payload.size();

  const std::string text = header.dump();
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  put_u32(out, crc_of(out.data(), out.size()));
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 5 || std::memcmp(bytes.data(), kCheckpointMagic, 5) != 0) {
    throw FormatError("not a prunecast checkpoint (bad magic)");
  }
  if (bytes.size() < 8) throw TruncatedError("checkpoint truncated inside magic");
  if (std::memcmp(bytes.data() + 5, kCheckpointMagic + 5, 3) != 0) {
    throw VersionError("unsupported checkpoint version bytes " + std::to_string(bytes[5]) + "." +
                       std::to_string(bytes[6]) + "." + std::to_string(bytes[7]));
  }
  if (bytes.size() < 12) throw TruncatedError("checkpoint truncated before header length");
  const std::size_t hlen = get_u32(bytes.data() + 8);
  if (bytes.size() < 12 + hlen) throw TruncatedError("checkpoint truncated inside header");
  json header;
  try {
    header = json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const json::exception& e) {
    // A damaged header is either corruption or truncation; the CRC decides.
    if (bytes.size() >= 16 && crc_of(bytes.data(), bytes.size() - 4) != get_u32(bytes.data() + bytes.size() - 4)) {
      throw ChecksumError("checkpoint checksum mismatch");
    }
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const std::size_t payload_bytes = header.value("payload_bytes", std::size_t{0});
  const std::size_t expected = 12 + hlen + payload_bytes + 4;
  if (bytes.size() < expected) throw TruncatedError("checkpoint truncated: expected " + std::to_string(expected) +
                                                    " bytes, found " + std::to_string(bytes.size()));
  if (bytes.size() > expected) throw FormatError("checkpoint has trailing bytes");
  if (crc_of(bytes.data(), expected - 4) != get_u32(bytes.data() + expected - 4)) {
    throw ChecksumError("checkpoint checksum mismatch");
  }
  if (header.value("version", -1) != kCheckpointVersion) {
    throw VersionError("unsupported checkpoint header version");
  }

  try {
    std::vector<std::string> violations;
    ForecasterConfig cfg = forecaster_config_from_json(header.at("config"), violations, "config.");
    if (!violations.empty()) throw FormatError("checkpoint config invalid: " + violations.front());
    Forecaster model(cfg);

    const std::uint8_t* payload = bytes.data() + 12 + hlen;
    std::map<std::string, Tensor> tensors;
    for (const auto& t : header.at("tensors")) {
      Shape shape = t.at("shape").get<Shape>();
      const std::size_t off = t.at("offset").get<std::size_t>();
      const std::size_t n = shape_size(shape);
      if (off + 8 * n > payload_bytes) throw FormatError("checkpoint tensor out of payload bounds");
      std::vector<double> data(n);
      for (std::size_t i = 0; i < n; ++i) data[i] = get_f64(payload + off + 8 * i);
      tensors.emplace(t.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data)));
    }

    const auto& layers = header.at("layers");
    for (const auto& lj : layers) {
      MaskedLinear& l = model.layer(lj.at("id").get<std::string>());
      const std::size_t rows = lj.at("rows").get<std::size_t>(), cols = lj.at("cols").get<std::size_t>();
      l.weight = Tensor::matrix(rows, cols);
      l.bias = lj.at("has_bias").get<bool>() ? Tensor::vector(cols) : Tensor();
      l.in_width = lj.at("in_width").get<std::size_t>();
      l.out_width = lj.at("out_width").get<std::size_t>();
      l.in_index = index_from(lj.at("in_index"));
      l.out_index = index_from(lj.at("out_index"));
      l.mask_in = from_bits(lj.at("mask_in"), rows, l.id);
      l.mask_out = from_bits(lj.at("mask_out"), cols, l.id);
    }
    const auto& blocks = header.at("blocks");
    if (blocks.size() != model.blocks().size()) throw FormatError("checkpoint block count mismatch");
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      HeadLayout& hl = model.blocks()[b].heads;
      hl.qk_offsets = blocks[b].at("qk_offsets").get<std::vector<std::size_t>>();
      hl.v_offsets = blocks[b].at("v_offsets").get<std::vector<std::size_t>>();
      hl.head_ids = blocks[b].at("head_ids").get<std::vector<std::size_t>>();
      hl.scale = std::bit_cast<double>(blocks[b].at("scale_bits").get<std::uint64_t>());
    }
    for (const ParamRef& p : model.parameters()) {
      auto it = tensors.find(p.name);
      if (it == tensors.end()) throw FormatError("checkpoint is missing tensor " + p.name);
      if (it->second.shape() != p.tensor->shape()) {
        throw FormatError("checkpoint tensor " + p.name + " has shape " + shape_str(it->second.shape()) +
                          ", expected " + shape_str(p.tensor->shape()));
      }
      *p.tensor = it->second;
    }

    Checkpoint ck{std::move(model), std::nullopt};
    if (header.contains("ledger")) {
      const auto& lj = header.at("ledger");
      ImportanceLedger ledger;
      ledger.alpha = std::bit_cast<double>(lj.at("alpha_bits").get<std::uint64_t>());
      ledger.batches = lj.at("batches").get<std::size_t>();
      const auto& refs = lj.at("channels");
      const Tensor* ema = refs.empty() ? nullptr : &tensors.at("ledger.ema");
      const Tensor* raw = refs.empty() ? nullptr : &tensors.at("ledger.last_raw");
      for (std::size_t i = 0; i < refs.size(); ++i) {
        LedgerEntry e;
        e.ref = ChannelRef{refs[i].at(0).get<std::string>(), channel_side_from_string(refs[i].at(1).get<std::string>()),
                           refs[i].at(2).get<std::size_t>()};
        e.alive = lj.at("alive").at(i).get<int>() == 1;
        e.is_protected = lj.at("protected").at(i).get<int>() == 1;
        e.ema = (*ema)[i];
        e.last_raw = (*raw)[i];
        ledger.add(std::move(e));
      }
      ck.ledger = std::move(ledger);
    }
    return ck;
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header malformed: ") + e.what());
  } catch (const std::out_of_range& e) {
    throw FormatError(std::string("checkpoint header malformed: ") + e.what());
  }
}

void save_checkpoint(const std::string& path, const Forecaster& model, const ImportanceLedger* ledger) {
  const auto bytes = encode_checkpoint(model, ledger);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("failed writing " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace prunecast
