// SPDX-License-Identifier: Apache-2.0

#include "catch_amalgamated.hpp"
#include "oracles.hpp"
#include <pacter/pac_codec.hpp>

#include <random>
#include <set>

using namespace pacter;

namespace {

const Key128 kKey{0x0123456789ABCDEF, 0xFEDCBA9876543210};

u64 random_raw(std::mt19937_64 &rng) {
  return kRegionBase | (rng() & kRegionMask & ~u64(3));
}

FnIndexTable table_of(std::size_t n) {
  FnIndexTable t;
  for (std::size_t i = 0; i < n; ++i)
    t.add("fn" + std::to_string(i), kRegionBase + 0x10000 + 16 * i);
  return t;
}

} // namespace

TEST_CASE("pac_codec: prf matches frozen script vectors") {
  CHECK(prf64(kKey, 0xFFFFE00000010000, 0xFFFFE00000100008) ==
        0xF753754E344BE0B7ull);
  CHECK(compute_pac(kKey, 0xFFFFE00000010000, 0xFFFFE00000100008) == 0x37);
  CHECK(prf64(Key128{1, 2}, 0xFFFFE00000010000, 0xFFFFE00000100008) ==
        0xD74A3C5A512D0B90ull);
  CHECK(compute_pac(Key128{1, 2}, 0xFFFFE00000010000, 0xFFFFE00000100008) ==
        0x10);
  CHECK(prf64(Key128{0xD6E8FEB86659FD93, 0x9E3779B97F4A7C15},
              0xFFFFFFFFFFFFFFF8, 0) == 0xD0E6CE2FEAE5A8B7ull);
}

TEST_CASE("pac_codec: prf agrees with the reference implementation") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 5000; ++i) {
    Key128 k{rng(), rng()};
    u64 p = rng(), c = rng();
    CHECK(prf64(k, p, c) == oracle::prf_reference(k.hi, k.lo, p, c));
  }
}

TEST_CASE("pac_codec: classify covers every form") {
  CHECK(classify(0xFFFFE00000010000) == PtrForm::RawKernel);
  CHECK(classify(0xFFFFFFFFFFFFFFF8) == PtrForm::RawKernel);
  CHECK(classify(0x0000000000000008) == PtrForm::Other);
  CHECK(classify(0) == PtrForm::Other);

  u64 paced = sign(kKey, 0xFFFFE00000010000, 0x1234);
  if (((paced >> 45) & 0x7F) != 0x7F)
    CHECK(classify(paced) == PtrForm::Paced);

  // A word with the PAC field forced to a non-ones value is PACed.
  u64 forced = (0xFFFFE00000010000 & ~kPacFieldMask) | (u64(0x12) << 45);
  CHECK(classify(forced) == PtrForm::Paced);

  CHECK(classify(poison(forced)) == PtrForm::Poisoned);

  FnIndexTable t = table_of(3);
  u64 pb = encode_piggyback(t, kRegionBase + 0x10000, 0x15,
                            kRegionBase + 0x2000);
  CHECK(classify(pb) == PtrForm::Piggyback);
}

TEST_CASE("pac_codec: misaligned all-ones word is PACed, not raw") {
  // Raw kernel code pointers are word aligned; an all-ones-pattern word with
  // low bits set still parses as a PACed word whose PAC is 0x7F.
  u64 w = 0xFFFFE00000010001;
  CHECK(classify(w) == PtrForm::Paced);
}

TEST_CASE("pac_codec: sign/authenticate round trip") {
  std::mt19937_64 rng(2);
  int alias_raw = 0;
  for (int i = 0; i < 100000; ++i) {
    u64 raw = random_raw(rng);
    u64 ctx = rng();
    u64 signed_w = sign(kKey, raw, ctx);
    CHECK(authenticate(kKey, signed_w, ctx) == raw);
    if (classify(signed_w) == PtrForm::RawKernel) {
      // PAC collided with 0x7F: the signed word aliases the raw form and
      // still authenticates.
      ++alias_raw;
      CHECK(signed_w == raw);
    } else {
      CHECK(classify(signed_w) == PtrForm::Paced);
    }
  }
  // ~1/128 of signatures alias the raw form.
  CHECK(alias_raw > 300);
  CHECK(alias_raw < 1500);
}

TEST_CASE("pac_codec: authentication is context bound") {
  std::mt19937_64 rng(3);
  int poisoned = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    u64 raw = random_raw(rng);
    u64 w = sign(kKey, raw, rng());
    u64 out = authenticate(kKey, w, rng());
    if (classify(out) == PtrForm::Poisoned) {
      ++poisoned;
      CHECK((out >> 62) == 0);
    } else {
      CHECK(out == raw); // PAC collision under the second context
    }
  }
  CHECK(double(poisoned) / n >= 0.98);
}

TEST_CASE("pac_codec: one-bit flips poison with probability ~127/128") {
  std::mt19937_64 rng(4);
  int poisoned = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    u64 raw = random_raw(rng);
    u64 ctx = rng();
    u64 w = sign(kKey, raw, ctx) ^ (u64(1) << (rng() % 45));
    u64 out = authenticate(kKey, w, ctx);
    if (classify(out) == PtrForm::Poisoned)
      ++poisoned;
  }
  CHECK(double(poisoned) / n >= 0.98);
}

TEST_CASE("pac_codec: sign rejects non-raw input") {
  FnIndexTable t = table_of(1);
  u64 pb =
      encode_piggyback(t, kRegionBase + 0x10000, 1, kRegionBase + 0x2000);
  CHECK_THROWS_AS(sign(kKey, pb, 0), CodecError);
  u64 paced = (0xFFFFE00000010000 & ~kPacFieldMask) | (u64(0x12) << 45);
  CHECK_THROWS_AS(sign(kKey, poison(paced), 0), CodecError);
  CHECK_THROWS_AS(sign(kKey, u64(0x8), 0), CodecError);
  try {
    sign(kKey, u64(0x8), 0);
  } catch (const CodecError &e) {
    CHECK(e.kind == CodecErr::NotRawPointer);
  }
}

TEST_CASE("pac_codec: exhaustive piggyback index sweep") {
  FnIndexTable t = table_of(kMaxFnIndex);
  u64 cell = kRegionBase + 0x200000;
  std::set<u64> words;
  for (u32 idx = 1; idx <= kMaxFnIndex; ++idx) {
    u64 fn = t.entry(idx).addr;
    u64 w = encode_piggyback(t, fn, 0x2A, cell);
    REQUIRE(classify(w) == PtrForm::Piggyback);
    words.insert(w);
    PiggybackParts parts = decode_piggyback(t, w);
    REQUIRE(parts.index == idx);
    REQUIRE(parts.pac == 0x2A);
    REQUIRE(parts.storage_addr == cell);
    REQUIRE(strip_pac(parts.paced_fn) == fn);
  }
  CHECK(words.size() == kMaxFnIndex);
}

TEST_CASE("pac_codec: piggyback round trip across addresses") {
  FnIndexTable t = table_of(64);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 20000; ++i) {
    u32 idx = u32(rng() % 64) + 1;
    u64 fn = t.entry(idx).addr;
    u8 pac = u8(rng() & 0x7F);
    u64 cell = kRegionBase | (rng() & kRegionMask & ~u64(3));
    u64 w = encode_piggyback(t, fn, pac, cell);
    PiggybackParts parts = decode_piggyback(t, w);
    CHECK(parts.index == idx);
    CHECK(parts.pac == pac);
    CHECK(parts.storage_addr == cell);
  }
}

TEST_CASE("pac_codec: piggyback error cases") {
  FnIndexTable t = table_of(4);
  u64 fn = t.entry(1).addr;
  u64 cell = kRegionBase + 0x2000;

  CHECK_THROWS_AS(encode_piggyback(t, fn + 8, 1, cell), CodecError);
  CHECK_THROWS_AS(encode_piggyback(t, fn, 1, cell + 2), CodecError);
  CHECK_THROWS_AS(encode_piggyback(t, fn, 1, 0x2000), CodecError);

  try {
    encode_piggyback(t, fn, 1, 0x2000);
    FAIL("expected AddressOutOfRegion");
  } catch (const CodecError &e) {
    CHECK(e.kind == CodecErr::AddressOutOfRegion);
  }

  // Not piggyback at all.
  CHECK_THROWS_AS(decode_piggyback(t, 0xFFFFE00000010000), CodecError);
  // Reserved index 0.
  u64 idx0 = kIndexBias << 50;
  try {
    decode_piggyback(t, idx0);
    FAIL("expected UnknownIndex");
  } catch (const CodecError &e) {
    CHECK(e.kind == CodecErr::UnknownIndex);
  }
  // In-range index with no table entry.
  u64 idx9 = (kIndexBias + 9) << 50;
  try {
    decode_piggyback(t, idx9);
    FAIL("expected UnknownIndex");
  } catch (const CodecError &e) {
    CHECK(e.kind == CodecErr::UnknownIndex);
  }
}

TEST_CASE("pac_codec: poisoned words never alias piggyback") {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 20000; ++i) {
    u64 raw = random_raw(rng);
    u64 w = sign(kKey, raw, rng());
    u64 bad = authenticate(kKey, w ^ (u64(1) << (rng() % 52)), rng());
    PtrForm f = classify(bad);
    CHECK((f == PtrForm::Poisoned || f == PtrForm::RawKernel ||
           f == PtrForm::Paced));
    CHECK(f != PtrForm::Piggyback);
  }
}

TEST_CASE("pac_codec: match_paced_fp strict matching") {
  FnIndexTable t = table_of(8);
  u64 fn = t.entry(3).addr;
  u64 w = sign(kKey, fn, kRegionBase + 0x4000);
  CHECK(match_paced_fp(t, w));
  CHECK(match_paced_fp(t, fn)); // raw aliasing form
  CHECK_FALSE(match_paced_fp(t, fn + 16 * 100)); // unregistered
  CHECK_FALSE(match_paced_fp(t, u64(42)));
  CHECK_FALSE(match_paced_fp(t, poison(w)));

  std::mt19937_64 rng(7);
  const int n = 100000;
  int hits = 0;
  for (int i = 0; i < n; ++i)
    hits += match_paced_fp(t, rng()) ? 1 : 0;
  double bound = double(t.size()) / double(u64(1) << 19);
  CHECK(double(hits) / n <= bound);
}

TEST_CASE("pac_codec: fn index table serialization") {
  FnIndexTable t;
  t.add("ptmx_open", kRegionBase + 0x10000);
  t.add("tty_release", kRegionBase + 0x10040);
  CHECK(t.serialize() == "fnidx 1 ptmx_open\nfnidx 2 tty_release\n");
  CHECK(t.index_of(kRegionBase + 0x10040).value() == 2);
  CHECK_FALSE(t.index_of(0).has_value());
  CHECK_THROWS_AS(t.entry(3), CodecError);
  CHECK_THROWS_AS(t.add("dup", kRegionBase + 0x10000), CodecError);
}
