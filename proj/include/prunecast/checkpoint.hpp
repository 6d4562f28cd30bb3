#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "prunecast/forecaster.hpp"
#include "prunecast/ledger.hpp"

namespace prunecast {

/// File layout: 8-byte magic "PCKPT\0\0\1", u32 LE header length, UTF-8 JSON
/// header, concatenated LE f64 payloads, u32 LE CRC32 of all prior bytes.
inline constexpr char kCheckpointMagic[8] = {'P', 'C', 'K', 'P', 'T', '\0', '\0', '\1'};
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  Forecaster model;
  std::optional<ImportanceLedger> ledger;
};

std::vector<std::uint8_t> encode_checkpoint(const Forecaster& model, const ImportanceLedger* ledger = nullptr);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::string& path, const Forecaster& model, const ImportanceLedger* ledger = nullptr);
Checkpoint load_checkpoint(const std::string& path);

nlohmann::json to_json(const ForecasterConfig& cfg);
/// Reads known keys over defaults; unknown keys and bad values are
/// appended to `violations` with the given key prefix.
ForecasterConfig forecaster_config_from_json(const nlohmann::json& j, std::vector<std::string>& violations,
                                             const std::string& prefix = "model.");

}  // namespace prunecast
