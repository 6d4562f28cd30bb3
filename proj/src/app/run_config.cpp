#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

#include "prunecast/app.hpp"
#include "prunecast/checkpoint.hpp"
#include "prunecast/errors.hpp"

namespace prunecast {

using nlohmann::json;
namespace fs = std::filesystem;

const char* to_string(PruneVariant v) {
  switch (v) {
    case PruneVariant::importance: return "importance";
    case PruneVariant::stat: return "stat";
    case PruneVariant::stat_then_importance: return "stat_then_importance";
  }
  return "?";
}

PruneVariant prune_variant_from_string(const std::string& s) {
  if (s == "importance") return PruneVariant::importance;
  if (s == "stat") return PruneVariant::stat;
  if (s == "stat_then_importance") return PruneVariant::stat_then_importance;
  throw ConfigError("unknown prune variant '" + s + "'");
}

namespace {

// Collects problems instead of stopping at the first one.
struct Reader {
  std::vector<std::string>& bad;

  bool object(const json& j, const std::string& where, std::initializer_list<const char*> known) {
    if (!j.is_object()) {
      bad.push_back(where + " must be an object");
      return false;
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
      bool ok = false;
      for (const char* k : known) ok = ok || it.key() == k;
      if (!ok) bad.push_back("unknown key " + where + "." + it.key());
    }
    return true;
  }

  void get(const json& j, const char* key, const std::string& where, std::size_t& dst) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    if (v.is_number_unsigned()) {
      dst = v.get<std::size_t>();
    } else if (v.is_number_integer() && v.get<long long>() >= 0) {
      dst = static_cast<std::size_t>(v.get<long long>());
    } else {
      bad.push_back(where + "." + key + " must be a non-negative integer");
    }
  }
  void get(const json& j, const char* key, const std::string& where, double& dst) {
    if (!j.contains(key)) return;
    if (j.at(key).is_number()) {
      dst = j.at(key).get<double>();
    } else {
      bad.push_back(where + "." + key + " must be a number");
    }
  }
  void get(const json& j, const char* key, const std::string& where, bool& dst) {
    if (!j.contains(key)) return;
    if (j.at(key).is_boolean()) {
      dst = j.at(key).get<bool>();
    } else {
      bad.push_back(where + "." + key + " must be a boolean");
    }
  }
  void get(const json& j, const char* key, const std::string& where, std::string& dst) {
    if (!j.contains(key)) return;
    if (j.at(key).is_string()) {
      dst = j.at(key).get<std::string>();
    } else {
      bad.push_back(where + "." + key + " must be a string");
    }
  }
  void get_opt(const json& j, const char* key, const std::string& where, std::optional<std::size_t>& dst) {
    if (!j.contains(key) || j.at(key).is_null()) return;
    std::size_t v = 0;
    const auto before = bad.size();
    get(j, key, where, v);
    if (bad.size() == before) dst = v;
  }
  // Scalar or non-empty array of numbers.
  void get_grid(const json& j, const char* key, const std::string& where, std::vector<double>& dst) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    if (v.is_number()) {
      dst = {v.get<double>()};
      return;
    }
    if (v.is_array() && !v.empty()) {
      std::vector<double> out;
      for (const auto& x : v) {
        if (!x.is_number()) {
          bad.push_back(where + "." + key + " entries must be numbers");
          return;
        }
        out.push_back(x.get<double>());
      }
      dst = out;
      return;
    }
    bad.push_back(where + "." + key + " must be a number or a non-empty array of numbers");
  }
};

std::string resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  if (path.is_relative()) path = base / path;
  return fs::absolute(path).lexically_normal().string();
}

ChannelRef parse_ref(const std::string& s) {
  const auto a = s.find(':');
  const auto b = s.rfind(':');
  if (a == std::string::npos || a == b) throw ConfigError("channel ref '" + s + "' is not layer:side:index");
  ChannelRef r;
  r.layer_id = s.substr(0, a);
  r.side = channel_side_from_string(s.substr(a + 1, b - a - 1));
  try {
    r.index = std::stoul(s.substr(b + 1));
  } catch (const std::exception&) {
    throw ConfigError("channel ref '" + s + "' has a bad index");
  }
  return r;
}

}  // namespace

RunConfig RunConfig::from_json(const json& j, const fs::path& base_dir) {
  std::vector<std::string> bad;
  Reader rd{bad};
  RunConfig c;
  if (!rd.object(j, "config", {"seed", "model", "data", "prune", "train", "eval", "out_dir"})) {
    throw ConfigError("config must be a JSON object");
  }

  if (j.contains("model")) {
    c.model = forecaster_config_from_json(j.at("model"), bad, "model.");
    if (j.at("model").is_object())
      for (auto it = j.at("model").begin(); it != j.at("model").end(); ++it) c.model_keys.push_back(it.key());
  }

  if (j.contains("data") && rd.object(j.at("data"), "data",
                                      {"csv", "schema", "synthetic", "channels", "channel_prefix", "split", "stride"})) {
    const json& d = j.at("data");
    std::string s;
    if (d.contains("csv") && !d.at("csv").is_null()) {
      rd.get(d, "csv", "data", s);
      if (!s.empty()) c.data.csv = resolve(base_dir, s);
    }
    if (d.contains("schema") && !d.at("schema").is_null()) {
      s.clear();
      rd.get(d, "schema", "data", s);
      if (!s.empty()) c.data.schema = resolve(base_dir, s);
    }
    if (d.contains("synthetic") && !d.at("synthetic").is_null() &&
        rd.object(d.at("synthetic"), "data.synthetic", {"kind", "seed", "length", "channels", "noise", "ar_coefficient"})) {
      const json& sy = d.at("synthetic");
      std::string kind = "sines";
      rd.get(sy, "kind", "data.synthetic", kind);
      try {
        c.data.synthetic = synth_kind_from_string(kind);
      } catch (const Error& e) {
        bad.push_back(std::string("data.synthetic.kind: ") + e.what());
      }
      rd.get(sy, "seed", "data.synthetic", c.data.synthetic_seed);
      rd.get(sy, "length", "data.synthetic", c.data.synth.length);
      rd.get(sy, "channels", "data.synthetic", c.data.synth.channels);
      rd.get(sy, "noise", "data.synthetic", c.data.synth.noise);
      rd.get(sy, "ar_coefficient", "data.synthetic", c.data.synth.ar_coefficient);
      if (c.data.synth.length == 0 || c.data.synth.channels == 0)
        bad.push_back("data.synthetic.length and data.synthetic.channels must be >= 1");
    }
    if (c.data.csv && c.data.synthetic) bad.push_back("data.csv and data.synthetic are mutually exclusive");
    if (!c.data.csv && !c.data.synthetic) bad.push_back("data needs either csv or synthetic");
    if (d.contains("channels")) {
      if (d.at("channels").is_array() && std::all_of(d.at("channels").begin(), d.at("channels").end(),
                                                    [](const json& x) { return x.is_string(); })) {
        c.data.channels = d.at("channels").get<std::vector<std::string>>();
      } else {
        bad.push_back("data.channels must be an array of strings");
      }
    }
    rd.get(d, "channel_prefix", "data", c.data.channel_prefix);
    rd.get(d, "stride", "data", c.data.stride);
    if (c.data.stride == 0) bad.push_back("data.stride must be >= 1");
    if (d.contains("split") &&
        rd.object(d.at("split"), "data.split", {"train", "test", "train_points", "val_points", "test_points"})) {
      const json& sp = d.at("split");
      rd.get(sp, "train", "data.split", c.data.train_fraction);
      rd.get(sp, "test", "data.split", c.data.test_fraction);
      rd.get_opt(sp, "train_points", "data.split", c.data.train_points);
      rd.get_opt(sp, "val_points", "data.split", c.data.val_points);
      rd.get_opt(sp, "test_points", "data.split", c.data.test_points);
      const int given = !!c.data.train_points + !!c.data.val_points + !!c.data.test_points;
      if (given != 0 && given != 3) bad.push_back("data.split point counts need train_points, val_points and test_points");
      if (!(c.data.train_fraction > 0.0) || c.data.test_fraction < 0.0 ||
          c.data.train_fraction + c.data.test_fraction > 1.0) {
        bad.push_back("data.split fractions must satisfy 0 < train, 0 <= test, train + test <= 1");
      }
    }
  } else if (!j.contains("data")) {
    bad.push_back("missing section data");
  }

  if (j.contains("prune") &&
      rd.object(j.at("prune"), "prune",
                {"variant", "alpha", "ratio", "epochs", "batch_size", "k_per_batch", "target_param_fraction",
                 "protect_io", "protected", "seed", "head_threshold", "act_threshold"})) {
    const json& p = j.at("prune");
    std::string variant = "importance";
    rd.get(p, "variant", "prune", variant);
    try {
      c.prune.variant = prune_variant_from_string(variant);
    } catch (const Error& e) {
      bad.push_back(std::string("prune.variant: ") + e.what());
    }
    rd.get_grid(p, "alpha", "prune", c.prune.alphas);
    rd.get_grid(p, "ratio", "prune", c.prune.ratios);
    for (double a : c.prune.alphas)
      if (!(a > 0.0 && a <= 1.0)) bad.push_back("prune.alpha values must lie in (0, 1]");
    for (double r : c.prune.ratios)
      if (!(r >= 0.0 && r <= 1.0)) bad.push_back("prune.ratio values must lie in [0, 1]");
    auto& s = c.prune.schedule;
    rd.get(p, "epochs", "prune", s.epochs);
    rd.get(p, "batch_size", "prune", s.batch_size);
    rd.get_opt(p, "k_per_batch", "prune", s.k_per_batch);
    rd.get(p, "target_param_fraction", "prune", s.target_param_fraction);
    rd.get(p, "protect_io", "prune", s.protect_io);
    rd.get(p, "seed", "prune", s.seed);
    if (p.contains("protected")) {
      if (!p.at("protected").is_array()) {
        bad.push_back("prune.protected must be an array of layer:side:index strings");
      } else {
        for (const auto& r : p.at("protected")) {
          try {
            s.protected_channels.push_back(parse_ref(r.get<std::string>()));
          } catch (const std::exception& e) {
            bad.push_back(std::string("prune.protected: ") + e.what());
          }
        }
      }
    }
    rd.get(p, "head_threshold", "prune", c.prune.head_threshold);
    rd.get(p, "act_threshold", "prune", c.prune.act_threshold);
    if (!(c.prune.head_threshold >= 0.0 && c.prune.head_threshold <= 1.0))
      bad.push_back("prune.head_threshold must lie in [0, 1]");
    if (!(c.prune.act_threshold >= 0.0 && c.prune.act_threshold <= 1.0))
      bad.push_back("prune.act_threshold must lie in [0, 1]");
    s.alpha = c.prune.alphas.front();
    s.ratio = c.prune.ratios.front();
    for (auto& v : s.violations())
      if (v.rfind("prune.alpha", 0) != 0 && v.rfind("prune.ratio", 0) != 0) bad.push_back(v);
  }

  if (j.contains("train") &&
      rd.object(j.at("train"), "train",
                {"lr", "batch_size", "max_epochs", "patience", "optimizer", "seed", "clip_norm", "train_norms",
                 "max_steps", "sliced"})) {
    const json& t = j.at("train");
    auto& tc = c.train;
    rd.get(t, "lr", "train", tc.lr);
    rd.get(t, "batch_size", "train", tc.batch_size);
    rd.get(t, "max_epochs", "train", tc.max_epochs);
    rd.get(t, "patience", "train", tc.patience);
    std::string opt = to_string(tc.optimizer);
    rd.get(t, "optimizer", "train", opt);
    try {
      tc.optimizer = optimizer_from_string(opt);
    } catch (const Error& e) {
      bad.push_back(std::string("train.optimizer: ") + e.what());
    }
    rd.get(t, "seed", "train", tc.seed);
    rd.get(t, "clip_norm", "train", tc.clip_norm);
    rd.get(t, "train_norms", "train", tc.train_norms);
    rd.get_opt(t, "max_steps", "train", tc.max_steps);
    rd.get(t, "sliced", "train", c.finetune_sliced);
    for (auto& v : tc.violations()) bad.push_back(v);
  }

  if (j.contains("eval") &&
      rd.object(j.at("eval"), "eval", {"raw_scale", "bench_repeats", "bench_batch", "analyze_windows"})) {
    const json& e = j.at("eval");
    rd.get(e, "raw_scale", "eval", c.eval.raw_scale);
    rd.get(e, "bench_repeats", "eval", c.eval.bench_repeats);
    rd.get(e, "bench_batch", "eval", c.eval.bench_batch);
    rd.get(e, "analyze_windows", "eval", c.eval.analyze_windows);
    if (c.eval.bench_repeats == 0) bad.push_back("eval.bench_repeats must be >= 1");
    if (c.eval.bench_batch == 0) bad.push_back("eval.bench_batch must be >= 1");
  }

  std::string out = c.out_dir;
  rd.get(j, "out_dir", "config", out);
  c.out_dir = resolve(base_dir, out);

  if (j.contains("seed")) {
    std::uint64_t seed = 0;
    const auto before = bad.size();
    rd.get(j, "seed", "config", seed);
    if (bad.size() == before) c.set_seed(seed);
  }

  if (!bad.empty()) {
    std::string msg = "invalid config (" + std::to_string(bad.size()) + " problem" + (bad.size() == 1 ? "" : "s") + "):";
    for (const auto& b : bad) msg += "\n  - " + b;
    throw ConfigError(msg);
  }
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return from_json(j, fs::absolute(fs::path(path)).parent_path());
}

void RunConfig::set_seed(std::uint64_t seed) {
  model.seed = seed;
  train.seed = seed;
  prune.schedule.seed = seed;
}

json RunConfig::to_json() const {
  json refs = json::array();
  for (const auto& r : prune.schedule.protected_channels) refs.push_back(r.str());
  auto opt = [](const auto& o) { return o ? json(*o) : json(nullptr); };
  json data_j{{"csv", opt(data.csv)},
              {"schema", opt(data.schema)},
              {"channels", data.channels},
              {"channel_prefix", data.channel_prefix},
              {"stride", data.stride},
              {"split",
               {{"train", data.train_fraction},
                {"test", data.test_fraction},
                {"train_points", opt(data.train_points)},
                {"val_points", opt(data.val_points)},
                {"test_points", opt(data.test_points)}}}};
  if (data.synthetic) {
    data_j["synthetic"] = {{"kind", prunecast::to_string(*data.synthetic)},
                           {"seed", data.synthetic_seed},
                           {"length", data.synth.length},
                           {"channels", data.synth.channels},
                           {"noise", data.synth.noise},
                           {"ar_coefficient", data.synth.ar_coefficient}};
  } else {
    data_j["synthetic"] = nullptr;
  }
  return {{"model", prunecast::to_json(model)},
          {"data", data_j},
          {"prune",
           {{"variant", prunecast::to_string(prune.variant)},
            {"alpha", prune.alphas},
            {"ratio", prune.ratios},
            {"epochs", prune.schedule.epochs},
            {"batch_size", prune.schedule.batch_size},
            {"k_per_batch", opt(prune.schedule.k_per_batch)},
            {"target_param_fraction", prune.schedule.target_param_fraction},
            {"protect_io", prune.schedule.protect_io},
            {"protected", refs},
            {"seed", prune.schedule.seed},
            {"head_threshold", prune.head_threshold},
            {"act_threshold", prune.act_threshold}}},
          {"train",
           {{"lr", train.lr},
            {"batch_size", train.batch_size},
            {"max_epochs", train.max_epochs},
            {"patience", train.patience},
            {"optimizer", prunecast::to_string(train.optimizer)},
            {"seed", train.seed},
            {"clip_norm", train.clip_norm},
            {"train_norms", train.train_norms},
            {"max_steps", opt(train.max_steps)},
            {"sliced", finetune_sliced}}},
          {"eval",
           {{"raw_scale", eval.raw_scale},
            {"bench_repeats", eval.bench_repeats},
            {"bench_batch", eval.bench_batch},
            {"analyze_windows", eval.analyze_windows}}},
          {"out_dir", out_dir}};
}

std::string RunConfig::hash() const {
  json j = to_json();
  j.erase("out_dir");
  const std::string text = j.dump();
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 failed");
  }
  std::ostringstream os;
  for (unsigned i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

std::shared_ptr<const SeriesTable> load_table(const DataConfig& cfg) {
  SeriesTable t;
  if (cfg.csv) {
    CsvSchema schema = cfg.schema ? CsvSchema::from_sidecar(*cfg.schema) : CsvSchema{};
    t = load_csv(*cfg.csv, schema);
  } else if (cfg.synthetic) {
    t = synth_dataset(*cfg.synthetic, cfg.synthetic_seed, cfg.synth);
  } else {
    throw ConfigError("data needs either csv or synthetic");
  }
  std::vector<std::string> keep = cfg.channels;
  if (!cfg.channel_prefix.empty()) {
    for (const auto& c : t.channels)
      if (c.rfind(cfg.channel_prefix, 0) == 0 && std::find(keep.begin(), keep.end(), c) == keep.end())
        keep.push_back(c);
    if (keep.empty()) throw ConfigError("no channel starts with '" + cfg.channel_prefix + "'");
  }
  if (!keep.empty()) t = t.select(keep);
  return std::make_shared<const SeriesTable>(std::move(t));
}

SplitSpec make_split(const DataConfig& cfg, std::size_t length, std::size_t context, std::size_t horizon) {
  SplitSpec s;
  if (cfg.train_points) {
    s.train = *cfg.train_points;
    s.val = *cfg.val_points;
    s.test = *cfg.test_points;
    s.context = context;
    s.horizon = horizon;
    s.stride = cfg.stride;
  } else {
    s = SplitSpec::from_fractions(length, cfg.train_fraction, cfg.test_fraction, context, horizon, cfg.stride);
  }
  s.validate(length);
  return s;
}

}  // namespace prunecast
