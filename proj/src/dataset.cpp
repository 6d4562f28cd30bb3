#include "prunecast/dataset.hpp"

#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "prunecast/errors.hpp"

namespace prunecast {

std::vector<double> SeriesTable::column(std::size_t c) const {
  std::vector<double> out(length());
  for (std::size_t t = 0; t < length(); ++t) out[t] = values.at(t, c);
  return out;
}

SeriesTable SeriesTable::select(const std::vector<std::string>& names) const {
  SeriesTable out;
  out.frequency = frequency;
  std::vector<std::size_t> cols;
  for (const auto& n : names) {
    auto it = std::find(channels.begin(), channels.end(), n);
    if (it == channels.end()) throw ConfigError("unknown channel '" + n + "'");
    cols.push_back(static_cast<std::size_t>(it - channels.begin()));
    out.channels.push_back(n);
  }
  out.values = Tensor::matrix(length(), cols.size());
  for (std::size_t t = 0; t < length(); ++t)
    for (std::size_t j = 0; j < cols.size(); ++j) out.values.at(t, j) = values.at(t, cols[j]);
  return out;
}

CsvSchema CsvSchema::from_sidecar(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open schema " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("schema is not valid JSON: ") + e.what(), 0);
  }
  CsvSchema s;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() != "timestamp_column" && it.key() != "frequency") {
      throw ConfigError("schema " + path + ": unknown key '" + it.key() + "'");
    }
  }
  if (j.contains("timestamp_column")) {
    const auto& tc = j.at("timestamp_column");
    s.timestamp_column = tc.is_boolean() ? tc.get<bool>() : tc.is_string();
  }
  if (j.contains("frequency") && j.at("frequency").is_string()) s.frequency = j.at("frequency").get<std::string>();
  return s;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, ',')) out.push_back(trim(cur));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

SeriesTable parse_csv(std::istream& in, const CsvSchema& schema) {
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++lineno;
    if (!trim(line).empty()) {
      header = split_fields(line);
      break;
    }
  }
  if (header.empty()) throw ParseError("empty file", 0);
  const std::size_t skip = schema.timestamp_column ? 1 : 0;
  if (header.size() <= skip) throw ParseError("no data columns in header", lineno);

  SeriesTable table;
  table.frequency = schema.frequency;
  table.channels.assign(header.begin() + static_cast<std::ptrdiff_t>(skip), header.end());
  const std::size_t C = table.channels.size();
  std::vector<double> data;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto fields = split_fields(line);
    if (fields.size() != header.size()) {
      throw ParseError("ragged row: expected " + std::to_string(header.size()) + " fields, found " +
                           std::to_string(fields.size()),
                       lineno);
    }
    for (std::size_t c = skip; c < fields.size(); ++c) {
      const std::string& cell = fields[c];
      char* end = nullptr;
      errno = 0;
      const double v = cell.empty() ? 0.0 : std::strtod(cell.c_str(), &end);
      if (cell.empty() || end != cell.c_str() + cell.size()) {
        throw ParseError("non-numeric cell '" + cell + "' in column " + header[c], lineno);
      }
      if (!std::isfinite(v)) {
        throw ParseError("non-finite value '" + cell + "' in column " + header[c] + " (row " + std::to_string(rows) + ")",
                         lineno);
      }
      data.push_back(v);
    }
    ++rows;
  }
  if (rows == 0) throw ParseError("no data rows", lineno);
  table.values = Tensor({rows, C}, std::move(data));
  return table;
}

SeriesTable load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open " + path);
  return parse_csv(is, schema);
}

void write_csv(const SeriesTable& table, std::ostream& out) {
  out << "t";
  for (const auto& c : table.channels) out << ',' << c;
  out << '\n';
  out << std::setprecision(17);
  for (std::size_t t = 0; t < table.length(); ++t) {
    out << t;
    for (std::size_t c = 0; c < table.channel_count(); ++c) out << ',' << table.at(t, c);
    out << '\n';
  }
}

const char* to_string(Part p) {
  switch (p) {
    case Part::train: return "train";
    case Part::val: return "val";
    case Part::test: return "test";
  }
  return "?";
}

SplitSpec SplitSpec::from_fractions(std::size_t length, double train, double test, std::size_t context,
                                    std::size_t horizon, std::size_t stride) {
  if (train <= 0.0 || test < 0.0 || train + test > 1.0) {
    throw ConfigError("split fractions must satisfy 0 < train, 0 <= test, train + test <= 1");
  }
  SplitSpec s;
  s.train = static_cast<std::size_t>(std::floor(static_cast<double>(length) * train));
  s.test = static_cast<std::size_t>(std::floor(static_cast<double>(length) * test));
  s.val = length - s.train - s.test;
  s.context = context;
  s.horizon = horizon;
  s.stride = stride;
  return s;
}

std::size_t SplitSpec::begin(Part p) const {
  switch (p) {
    case Part::train: return 0;
    case Part::val: return train;
    case Part::test: return train + val;
  }
  return 0;
}

std::size_t SplitSpec::end(Part p) const {
  switch (p) {
    case Part::train: return train;
    case Part::val: return train + val;
    case Part::test: return train + val + test;
  }
  return 0;
}

void SplitSpec::validate(std::size_t table_length) const {
  if (context == 0 || horizon == 0) throw ConfigError("split: context and horizon must be >= 1");
  if (stride == 0) throw ConfigError("split: stride must be >= 1");
  if (train + val + test > table_length) {
    throw ConfigError("split (" + std::to_string(train) + ", " + std::to_string(val) + ", " + std::to_string(test) +
                      ") exceeds table length " + std::to_string(table_length));
  }
}

std::size_t windows_per_channel(const SplitSpec& split, Part part) {
  const std::size_t b = split.begin(part), e = split.end(part);
  const std::size_t first = std::max(b, split.context);
  if (e < split.horizon || e - split.horizon < first) {
    const std::size_t lookback = std::min(split.context, b);
    throw ContractError(std::string(to_string(part)) + " part has " + std::to_string(e - b) +
                        " points; needs at least " + std::to_string(split.context + split.horizon - lookback) +
                        " for context " + std::to_string(split.context) + " and horizon " +
                        std::to_string(split.horizon));
  }
  return (e - split.horizon - first) / split.stride + 1;
}

WindowSet::WindowSet(std::shared_ptr<const SeriesTable> table, std::size_t context, std::size_t horizon,
                     std::vector<Window> windows)
    : table_(std::move(table)), context_(context), horizon_(horizon), windows_(std::move(windows)) {}

std::vector<double> WindowSet::context(std::size_t i) const {
  const Window& w = windows_.at(i);
  std::vector<double> out(context_);
  for (std::size_t t = 0; t < context_; ++t) out[t] = table_->at(w.start - context_ + t, w.channel);
  return out;
}

std::vector<double> WindowSet::target(std::size_t i) const {
  const Window& w = windows_.at(i);
  std::vector<double> out(horizon_);
  for (std::size_t t = 0; t < horizon_; ++t) out[t] = table_->at(w.start + t, w.channel);
  return out;
}

WindowSet make_windows(std::shared_ptr<const SeriesTable> table, const SplitSpec& split, Part part) {
  split.validate(table->length());
  const std::size_t per = windows_per_channel(split, part);
  const std::size_t first = std::max(split.begin(part), split.context);
  std::vector<Window> windows;
  windows.reserve(per * table->channel_count());
  for (std::size_t c = 0; c < table->channel_count(); ++c)
    for (std::size_t i = 0; i < per; ++i) windows.push_back({c, first + i * split.stride});
  return WindowSet(std::move(table), split.context, split.horizon, std::move(windows));
}

WindowBatch make_batch(const WindowSet& set, std::span<const std::size_t> indices) {
  const std::size_t N = indices.size(), L = set.context_length(), H = set.horizon();
  WindowBatch b;
  b.contexts = Tensor::matrix(N, L);
  b.targets = Tensor::matrix(N, H);
  b.norm_contexts = Tensor::matrix(N, L);
  b.norm_targets = Tensor::matrix(N, H);
  b.stats.resize(N);
  const SeriesTable& tab = set.table();
  for (std::size_t n = 0; n < N; ++n) {
    const Window& w = set.windows().at(indices[n]);
    for (std::size_t t = 0; t < L; ++t) b.contexts.at(n, t) = tab.at(w.start - L + t, w.channel);
    for (std::size_t t = 0; t < H; ++t) b.targets.at(n, t) = tab.at(w.start + t, w.channel);
    b.stats[n] = window_stats(b.contexts.data().subspan(n * L, L));
    for (std::size_t t = 0; t < L; ++t)
      b.norm_contexts.at(n, t) = (b.contexts.at(n, t) - b.stats[n].mean) / b.stats[n].std;
    for (std::size_t t = 0; t < H; ++t)
      b.norm_targets.at(n, t) = (b.targets.at(n, t) - b.stats[n].mean) / b.stats[n].std;
  }
  return b;
}

WindowBatch make_batch(const WindowSet& set, std::size_t first, std::size_t count) {
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = first + i;
  return make_batch(set, idx);
}

SynthKind synth_kind_from_string(const std::string& s) {
  if (s == "sines") return SynthKind::sines;
  if (s == "ar1") return SynthKind::ar1;
  if (s == "planted_redundancy") return SynthKind::planted_redundancy;
  throw ConfigError("unknown synthetic kind '" + s + "'");
}

const char* to_string(SynthKind k) {
  switch (k) {
    case SynthKind::sines: return "sines";
    case SynthKind::ar1: return "ar1";
    case SynthKind::planted_redundancy: return "planted_redundancy";
  }
  return "?";
}

SeriesTable synth_dataset(SynthKind kind, std::uint64_t seed, const SynthOptions& opt) {
  if (opt.length == 0 || opt.channels == 0) throw ConfigError("synthetic dataset needs length and channels >= 1");
  Rng rng(seed);
  SeriesTable table;
  table.frequency = "synthetic";
  table.values = Tensor::matrix(opt.length, opt.channels);
  const double two_pi = 2.0 * M_PI;
  switch (kind) {
    case SynthKind::sines:
      for (std::size_t c = 0; c < opt.channels; ++c) {
        table.channels.push_back("s" + std::to_string(c));
        const double p1 = rng.uniform(8.0, 48.0), p2 = rng.uniform(4.0, 16.0);
        const double a1 = rng.uniform(0.5, 1.5), a2 = rng.uniform(0.1, 0.5);
        const double f1 = rng.uniform(0.0, two_pi), f2 = rng.uniform(0.0, two_pi);
        const double level = rng.uniform(-1.0, 1.0);
        for (std::size_t t = 0; t < opt.length; ++t) {
          const double x = static_cast<double>(t);
          table.values.at(t, c) = level + a1 * std::sin(two_pi * x / p1 + f1) + a2 * std::sin(two_pi * x / p2 + f2) +
                                  opt.noise * rng.normal();
        }
      }
      break;
    case SynthKind::ar1:
      for (std::size_t c = 0; c < opt.channels; ++c) {
        table.channels.push_back("ar" + std::to_string(c));
        double prev = 0.0;
        for (std::size_t t = 0; t < opt.length; ++t) {
          prev = opt.ar_coefficient * prev + rng.normal();
          table.values.at(t, c) = prev;
        }
      }
      break;
    case SynthKind::planted_redundancy: {
      // Two sub-tasks with distinct dominant periods; a model fitted to the
      // mixture carries capacity that any single sub-task does not need.
      const std::size_t a_count = (opt.channels + 1) / 2;
      for (std::size_t c = 0; c < opt.channels; ++c) {
        const bool task_a = c < a_count;
        table.channels.push_back((task_a ? "A" : "B") + std::to_string(task_a ? c : c - a_count));
        const double p1 = task_a ? 24.0 : 10.0;
        const double p2 = task_a ? 8.0 : 5.0;
        const double a1 = rng.uniform(0.8, 1.2), a2 = rng.uniform(0.2, 0.4);
        const double f1 = rng.uniform(0.0, two_pi), f2 = rng.uniform(0.0, two_pi);
        const double level = rng.uniform(-0.5, 0.5);
        for (std::size_t t = 0; t < opt.length; ++t) {
          const double x = static_cast<double>(t);
          table.values.at(t, c) = level + a1 * std::sin(two_pi * x / p1 + f1) + a2 * std::sin(two_pi * x / p2 + f2) +
                                  opt.noise * rng.normal();
        }
      }
      break;
    }
  }
  return table;
}

}  // namespace prunecast
