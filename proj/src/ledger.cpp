#include "prunecast/ledger.hpp"

#include "prunecast/errors.hpp"
#include "prunecast/forecaster.hpp"

namespace prunecast {

std::string ChannelRef::str() const {
  return layer_id + ":" + to_string(side) + ":" + std::to_string(index);
}

ImportanceLedger ImportanceLedger::from_model(const Forecaster& model, bool protect_io,
                                              const std::vector<ChannelRef>& extra_protected) {
  ImportanceLedger ledger;
  for (const MaskedLinear* l : model.linear_layers()) {
    for (ChannelSide side : {ChannelSide::input, ChannelSide::output}) {
      const Tensor& mask = side == ChannelSide::input ? l->mask_in : l->mask_out;
      for (std::size_t i = 0; i < mask.size(); ++i) {
        LedgerEntry e;
        e.ref = ChannelRef{l->id, side, i};
        e.alive = mask[i] != 0.0;
        e.is_protected = protect_io && ((l->id == "embed" && side == ChannelSide::input) ||
                                        (l->id == "head" && side == ChannelSide::output));
        ledger.add(std::move(e));
      }
    }
  }
  for (const auto& ref : extra_protected) ledger.at(ref).is_protected = true;
  return ledger;
}

void ImportanceLedger::add(LedgerEntry entry) {
  if (index_.count(entry.ref)) throw ContractError("duplicate channel " + entry.ref.str());
  index_.emplace(entry.ref, entries_.size());
  entries_.push_back(std::move(entry));
}

std::size_t ImportanceLedger::find(const ChannelRef& ref) const {
  auto it = index_.find(ref);
  return it == index_.end() ? entries_.size() : it->second;
}

LedgerEntry& ImportanceLedger::at(const ChannelRef& ref) {
  auto it = index_.find(ref);
  if (it == index_.end()) throw ContractError("unknown channel " + ref.str());
  return entries_[it->second];
}

const LedgerEntry& ImportanceLedger::at(const ChannelRef& ref) const {
  return const_cast<ImportanceLedger*>(this)->at(ref);
}

std::size_t ImportanceLedger::alive_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.alive;
  return n;
}

std::size_t ImportanceLedger::prunable_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.alive && !e.is_protected;
  return n;
}

}  // namespace prunecast
