//===- pac_codec.hpp - pointer signing and piggyback encoding --*- C++ -*-===//
//
// SPDX-License-Identifier: Apache-2.0
//
// Bit-level formats for authenticated kernel function pointers:
//
//   raw kernel    bits[63:45] all ones, bits[1:0] zero
//   PACed         bits[63:52] = 0xFFF, bits[51:45] = 7-bit PAC
//   piggyback     bits[63:50] = fn index + 4096, bits[49:43] = PAC,
//                 bits[42:0]  = word-aligned storage address >> 2
//   poisoned      bits[63:62] cleared on a failed authentication
//
// The PAC is the low 7 bits of a keyed PRF over (pointer, context). The
// piggyback form lets a register carry the function index, the PAC, and the
// address the pointer was loaded from, all in one 64-bit word. The index
// field is biased by 4096 so that a poisoned word (top 12 bits = 0x3FF) can
// never alias a valid piggyback pattern.
//
//===----------------------------------------------------------------------===//

#pragma once

#include <cstdint>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace pacter {

using u8 = std::uint8_t;
using u32 = std::uint32_t;
using u64 = std::uint64_t;

struct Key128 {
  u64 hi = 0;
  u64 lo = 0;
};

inline constexpr u64 kRegionMask = (u64(1) << 45) - 1; // 45-bit VA offset
inline constexpr u64 kRegionBase = ~kRegionMask;       // top 19 bits set
inline constexpr unsigned kPacShift = 45;
inline constexpr u64 kPacFieldMask = u64(0x7F) << kPacShift;
inline constexpr u32 kMaxFnIndex = 10000;
inline constexpr u64 kIndexBias = 4096;
// Shared context for pointers that have no storage cell of their own
// (computed constants, physical-address call sites). Offset 0 of the region
// survives the piggyback address round trip; plain 0 would not.
inline constexpr u64 kConstCtx = kRegionBase;

enum class PtrForm { RawKernel, Paced, Piggyback, Poisoned, Other };

enum class CodecErr {
  NotRawPointer,
  UnregisteredFunction,
  UnalignedAddress,
  AddressOutOfRegion,
  NotPiggyback,
  UnknownIndex,
};

struct CodecError : std::runtime_error {
  CodecErr kind;
  CodecError(CodecErr k, const std::string &msg)
      : std::runtime_error(msg), kind(k) {}
};

inline constexpr u64 rotl64(u64 x, unsigned n) {
  return (x << n) | (x >> (64 - n));
}

// Keyed PRF standing in for QARMA. Not cryptographic; fixed so that every
// build and every test sees bit-identical PACs.
inline u64 prf64(const Key128 &key, u64 ptr, u64 ctx) {
  u64 s = ptr ^ key.lo;
  for (int round = 0; round < 4; ++round) {
    s = rotl64(s * u64(0x9E3779B97F4A7C15), 23) ^ ctx;
    s ^= key.hi;
    s = rotl64(s, 17) + key.lo;
  }
  return s ^ (s >> 32);
}

inline u8 compute_pac(const Key128 &key, u64 ptr, u64 ctx) {
  return u8(prf64(key, ptr, ctx) & 0x7F);
}

inline constexpr bool in_region(u64 addr) {
  return (addr & kRegionBase) == kRegionBase;
}

// Candidate raw pointer for a PACed word: PAC field back to all ones.
inline constexpr u64 strip_pac(u64 w) { return w | kPacFieldMask; }

inline constexpr u64 poison(u64 w) { return w & ~(u64(3) << 62); }

inline constexpr u64 piggyback_field(u64 w) { return w >> 50; }

inline PtrForm classify(u64 w) {
  if (in_region(w) && (w & 3) == 0)
    return PtrForm::RawKernel;
  u64 top12 = w >> 52;
  if (top12 == 0xFFF)
    return PtrForm::Paced;
  if (top12 == 0x3FF)
    return PtrForm::Poisoned;
  u64 field = piggyback_field(w);
  if (field > kIndexBias && field <= kIndexBias + kMaxFnIndex)
    return PtrForm::Piggyback;
  return PtrForm::Other;
}

inline u64 sign(const Key128 &key, u64 raw, u64 ctx) {
  if (classify(raw) != PtrForm::RawKernel) {
    std::ostringstream os;
    os << "sign: not a raw kernel pointer: 0x" << std::hex << raw;
    throw CodecError(CodecErr::NotRawPointer, os.str());
  }
  u8 pac = compute_pac(key, raw, ctx); // raw form is already canonical
  return (raw & ~kPacFieldMask) | (u64(pac) << kPacShift);
}

// Total: garbage in, poisoned out. Matches the hardware convention that a
// failed authentication flips top bits instead of trapping; the trap comes
// when the result is dereferenced or branched to.
inline u64 authenticate(const Key128 &key, u64 w, u64 ctx) {
  u64 candidate = strip_pac(w);
  u8 embedded = u8((w >> kPacShift) & 0x7F);
  if (embedded == compute_pac(key, candidate, ctx))
    return candidate;
  return poison(w);
}

// Dense index <-> entry-address table for address-taken functions.
class FnIndexTable {
public:
  struct Entry {
    u32 index;
    std::string symbol;
    u64 addr;
  };

  u32 add(const std::string &symbol, u64 addr) {
    if (entries_.size() >= kMaxFnIndex)
      throw CodecError(CodecErr::UnregisteredFunction,
                       "fn index table full (10000 entries)");
    if (by_addr_.count(addr))
      throw CodecError(CodecErr::UnregisteredFunction,
                       "duplicate fn entry address for " + symbol);
    u32 index = u32(entries_.size()) + 1;
    entries_.push_back({index, symbol, addr});
    by_addr_[addr] = index;
    return index;
  }

  std::size_t size() const { return entries_.size(); }

  std::optional<u32> index_of(u64 addr) const {
    auto it = by_addr_.find(addr);
    if (it == by_addr_.end())
      return std::nullopt;
    return it->second;
  }

  bool has_index(u32 index) const {
    return index >= 1 && index <= entries_.size();
  }

  const Entry &entry(u32 index) const {
    if (!has_index(index))
      throw CodecError(CodecErr::UnknownIndex, "no fn index " +
                                                   std::to_string(index));
    return entries_[index - 1];
  }

  const std::vector<Entry> &entries() const { return entries_; }

  std::string serialize() const {
    std::ostringstream os;
    for (const Entry &e : entries_)
      os << "fnidx " << e.index << " " << e.symbol << "\n";
    return os.str();
  }

private:
  std::vector<Entry> entries_;
  std::unordered_map<u64, u32> by_addr_;
};

struct PiggybackParts {
  u64 paced_fn;     // table address re-embedded with the carried PAC
  u64 storage_addr; // cell the pointer was loaded from
  u32 index;
  u8 pac;
};

inline u64 encode_piggyback(const FnIndexTable &table, u64 raw_fn, u8 pac,
                            u64 storage_addr) {
  auto index = table.index_of(raw_fn);
  if (!index) {
    std::ostringstream os;
    os << "encode_piggyback: unregistered function 0x" << std::hex << raw_fn;
    throw CodecError(CodecErr::UnregisteredFunction, os.str());
  }
  if (storage_addr & 3)
    throw CodecError(CodecErr::UnalignedAddress,
                     "encode_piggyback: unaligned storage address");
  if (!in_region(storage_addr))
    throw CodecError(CodecErr::AddressOutOfRegion,
                     "encode_piggyback: storage address outside region");
  u64 field = u64(*index) + kIndexBias;
  return (field << 50) | (u64(pac & 0x7F) << 43) |
         ((storage_addr & kRegionMask) >> 2);
}

inline PiggybackParts decode_piggyback(const FnIndexTable &table, u64 w) {
  u64 field = piggyback_field(w);
  if (field < kIndexBias || field > kIndexBias + kMaxFnIndex)
    throw CodecError(CodecErr::NotPiggyback, "decode_piggyback: wrong form");
  u32 index = u32(field - kIndexBias);
  if (index == 0 || !table.has_index(index))
    throw CodecError(CodecErr::UnknownIndex,
                     "decode_piggyback: unknown index " +
                         std::to_string(index));
  u8 pac = u8((w >> 43) & 0x7F);
  u64 storage_addr = kRegionBase | ((w & ((u64(1) << 43) - 1)) << 2);
  u64 fn = table.entry(index).addr;
  u64 paced = (fn & ~kPacFieldMask) | (u64(pac) << kPacShift);
  return {paced, storage_addr, index, pac};
}

// Strict matcher used by the copy helper: pattern and table membership.
inline bool match_paced_fp(const FnIndexTable &table, u64 w) {
  PtrForm form = classify(w);
  if (form != PtrForm::Paced && form != PtrForm::RawKernel)
    return false;
  return table.index_of(strip_pac(w)).has_value();
}

} // namespace pacter
