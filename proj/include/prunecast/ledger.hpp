#pragma once

#include <compare>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "prunecast/masked_linear.hpp"

namespace prunecast {

class Forecaster;

/// One input or output channel of a linear layer.
struct ChannelRef {
  std::string layer_id;
  ChannelSide side = ChannelSide::input;
  std::size_t index = 0;

  auto operator<=>(const ChannelRef&) const = default;
  bool operator==(const ChannelRef&) const = default;
  std::string str() const;
};

struct LedgerEntry {
  ChannelRef ref;
  double ema = 0.0;
  double last_raw = 0.0;
  bool alive = true;
  bool is_protected = false;
};

/// Registry of every maskable channel of a model with its smoothed score.
class ImportanceLedger {
 public:
  ImportanceLedger() = default;

  /// One entry per mask coordinate, in linear-layer order. Channels whose
  /// mask is already 0 start dead. Embedding inputs and head outputs are
  /// protected when protect_io is set; `extra_protected` adds more.
  static ImportanceLedger from_model(const Forecaster& model, bool protect_io = true,
                                     const std::vector<ChannelRef>& extra_protected = {});

  const std::vector<LedgerEntry>& entries() const { return entries_; }
  std::vector<LedgerEntry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

  /// Index of ref, or size() when absent.
  std::size_t find(const ChannelRef& ref) const;
  LedgerEntry& at(const ChannelRef& ref);
  const LedgerEntry& at(const ChannelRef& ref) const;

  std::size_t alive_count() const;
  std::size_t prunable_count() const;  // alive and not protected

  double alpha = 0.5;
  std::size_t batches = 0;  // EMA updates applied so far

  void add(LedgerEntry entry);

 private:
  std::vector<LedgerEntry> entries_;
  std::map<ChannelRef, std::size_t> index_;
};

}  // namespace prunecast
