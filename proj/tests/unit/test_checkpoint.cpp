#include <gtest/gtest.h>

#include <filesystem>

#include "prunecast/checkpoint.hpp"
#include "prunecast/errors.hpp"
#include "test_util.hpp"

using namespace prunecast;

namespace {

Forecaster pruned_model() {
  Forecaster m(testutil::tiny_config(21));
  Rng rng(1);
  testutil::random_masks(m, 0.25, rng);
  return m;
}

ImportanceLedger scored_ledger(const Forecaster& m) {
  ImportanceLedger l = ImportanceLedger::from_model(m);
  Rng rng(2);
  for (auto& e : l.entries()) {
    e.ema = rng.uniform();
    e.last_raw = rng.uniform();
  }
  l.alpha = 0.3;
  l.batches = 17;
  return l;
}

Tensor contexts() {
  Rng rng(3);
  return testutil::random_tensor({6, 16}, rng);
}

}  // namespace

TEST(Checkpoint, ReencodingIsByteIdentical) {
  const Forecaster m = pruned_model();
  const ImportanceLedger l = scored_ledger(m);
  const auto bytes = encode_checkpoint(m, &l);
  const Checkpoint ck = decode_checkpoint(bytes);
  ASSERT_TRUE(ck.ledger.has_value());
  EXPECT_EQ(encode_checkpoint(ck.model, &*ck.ledger), bytes);
}

TEST(Checkpoint, RoundTripPreservesForwardBitwise) {
  const Forecaster m = pruned_model();
  const Checkpoint ck = decode_checkpoint(encode_checkpoint(m));
  EXPECT_FALSE(ck.ledger.has_value());
  EXPECT_EQ(ck.model.predict_normalized(contexts()), m.predict_normalized(contexts()));
}

TEST(Checkpoint, RoundTripPreservesMasksScoresAndIndexMaps) {
  const Forecaster m = pruned_model();
  const Forecaster s = m.sliced();
  const ImportanceLedger l = scored_ledger(m);
  const Checkpoint ck = decode_checkpoint(encode_checkpoint(s, &l));
  const auto a = s.linear_layers(), b = ck.model.linear_layers();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i]->in_index, b[i]->in_index) << a[i]->id;
    EXPECT_EQ(a[i]->out_index, b[i]->out_index) << a[i]->id;
    EXPECT_EQ(a[i]->mask_in, b[i]->mask_in);
    EXPECT_EQ(a[i]->weight, b[i]->weight);
  }
  for (std::size_t i = 0; i < l.size(); ++i) {
    EXPECT_EQ(l.entries()[i].ema, ck.ledger->entries()[i].ema);
    EXPECT_EQ(l.entries()[i].alive, ck.ledger->entries()[i].alive);
  }
  EXPECT_EQ(ck.ledger->alpha, 0.3);
  EXPECT_EQ(ck.ledger->batches, 17u);
  EXPECT_EQ(ck.model.predict_normalized(contexts()), s.predict_normalized(contexts()));
}

TEST(Checkpoint, FileRoundTripIsIdempotent) {
  const auto dir = std::filesystem::temp_directory_path() / "prunecast_ckpt_test";
  std::filesystem::create_directories(dir);
  const Forecaster m = pruned_model();
  save_checkpoint((dir / "a.ckpt").string(), m);
  const Checkpoint ck = load_checkpoint((dir / "a.ckpt").string());
  save_checkpoint((dir / "b.ckpt").string(), ck.model);
  EXPECT_EQ(encode_checkpoint(load_checkpoint((dir / "b.ckpt").string()).model), encode_checkpoint(m));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, CorruptMagicIsAFormatError) {
  auto bytes = encode_checkpoint(pruned_model());
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
}

TEST(Checkpoint, ForeignVersionIsAVersionError) {
  auto bytes = encode_checkpoint(pruned_model());
  bytes[7] = 2;
  EXPECT_THROW(decode_checkpoint(bytes), VersionError);
}

TEST(Checkpoint, TruncatedFileIsATruncatedError) {
  auto bytes = encode_checkpoint(pruned_model());
  bytes.resize(bytes.size() - 100);
  EXPECT_THROW(decode_checkpoint(bytes), TruncatedError);
  bytes.resize(10);
  EXPECT_THROW(decode_checkpoint(bytes), TruncatedError);
}

TEST(Checkpoint, FlippedPayloadBitIsAChecksumError) {
  auto bytes = encode_checkpoint(pruned_model());
  bytes[bytes.size() - 20] ^= 0x10;
  EXPECT_THROW(decode_checkpoint(bytes), ChecksumError);
}

TEST(Checkpoint, ErrorKindsAreDistinct) {
  auto bytes = encode_checkpoint(pruned_model());
  bytes[bytes.size() - 20] ^= 0x10;
  try {
    decode_checkpoint(bytes);
  } catch (const FormatError&) {
    FAIL() << "checksum failure reported as a format error";
  } catch (const ChecksumError&) {
  }
}

TEST(Checkpoint, MissingFileIsReported) {
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/x.ckpt"), Error);
}
