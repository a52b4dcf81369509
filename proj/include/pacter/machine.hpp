//===- machine.hpp - register machine with pointer signing ------*- C++ -*-===//
//
// SPDX-License-Identifier: Apache-2.0
//
// Byte-addressed sparse memory, 31 registers, 4-byte instructions. The
// signing ops are gated twice: pa_on models whether the hardware has the
// extension at all, pa_ready tracks whether pa_init has generated keys.
// Before pa_init every signing op is an identity (with pacia.st recording
// its destination cell) so init code runs unmodified; pa_init then signs
// the recorded cells and the static function-pointer table in place.
//
// Keys live in machine state only. They are never written to memory, and
// the resume pc of an interrupt is likewise internal: the register save
// area is ordinary memory and deliberately remains an attack surface.
//
//===----------------------------------------------------------------------===//

#pragma once

#include "machine_inst.hpp"
#include "pac_codec.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace pacter {

enum class TrapKind { None, FetchFault, MemFault, NullCall, FuelExhausted };

inline const char *trap_name(TrapKind k) {
  switch (k) {
  case TrapKind::None:
    return "none";
  case TrapKind::FetchFault:
    return "fetch_fault";
  case TrapKind::MemFault:
    return "mem_fault";
  case TrapKind::NullCall:
    return "null_call";
  case TrapKind::FuelExhausted:
    return "fuel_exhausted";
  }
  return "?";
}

struct TrapInfo {
  TrapKind kind = TrapKind::None;
  u64 pc = 0;
  u64 addr = 0;
  std::string detail;
};

struct MemWrite {
  u64 addr = 0;
  u64 value = 0;
};

struct TraceEvent {
  u64 step = 0;
  u64 pc = 0;
  std::string kind;
  std::string detail;
};

struct MachineError : std::runtime_error {
  explicit MachineError(const std::string &m) : std::runtime_error(m) {}
};

namespace detail {

inline u64 splitmix64(u64 &s) {
  u64 z = (s += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

} // namespace detail

class Machine {
public:
  struct Options {
    u64 seed = 0x5EED;
    bool pa_on = true;
    bool trace = false;
  };

  explicit Machine(MachineProgram prog); // defaulted options, defined below
  Machine(MachineProgram prog, Options o)
      : prog_(std::move(prog)), opt_(o) {
    if (!prog_.laid_out)
      throw MachineError("program has no layout");
    boot();
  }
  // The decoded text map points into prog_, so the machine stays put.
  Machine(const Machine &) = delete;
  Machine &operator=(const Machine &) = delete;

  //===--- execution --------------------------------------------------------===//

  bool running() const {
    return !halted_ && trap_.kind == TrapKind::None;
  }

  bool step() {
    if (!running())
      return false;
    if (pc_ == at_pa_init_) {
      native_pa_init();
      pc_ = r_[kLr];
      ++retired_;
      return true;
    }
    if (pc_ == at_memcpy_ || pc_ == at_pac_memcpy_) {
      native_copy(pc_ == at_pac_memcpy_);
      if (!running())
        return false;
      pc_ = r_[kLr];
      ++retired_;
      return true;
    }
    auto it = text_.find(pc_);
    if (it == text_.end()) {
      fault(TrapKind::FetchFault, pc_, "no instruction at pc");
      return false;
    }
    if (init_freed_ && pc_ >= kInitTextBase && pc_ < init_end_) {
      fault(TrapKind::FetchFault, pc_, "init text already retired");
      return false;
    }
    exec(*it->second);
    if (trap_.kind == TrapKind::None)
      ++retired_;
    return running();
  }

  // Run until halt, trap, or the fuel limit.
  u64 run(u64 fuel = 1'000'000) {
    u64 start = retired_;
    while (running()) {
      if (retired_ - start >= fuel) {
        fault(TrapKind::FuelExhausted, pc_, "fuel limit reached");
        break;
      }
      step();
    }
    return retired_ - start;
  }

  // Interrupt: spill every register to the save area, let the supplied
  // writes land, run the (empty) handler, then reload the full register
  // file from memory. The interrupted pc is internal state and cannot be
  // overwritten; everything else can.
  void irq(const std::vector<MemWrite> &writes) {
    if (!running())
      return;
    trace("irq", "retired=" + std::to_string(retired_));
    for (int i = 0; i <= 28; ++i)
      poke64(kIrqSaveBase + 8 * u64(i), r_[i]);
    poke64(kIrqSaveBase + 232, r_[kLr]);
    poke64(kIrqSaveBase + 240, r_[kSp]);
    for (const MemWrite &w : writes) {
      if (!write_mem(w.addr, w.value)) {
        fault(TrapKind::MemFault, pc_, "interrupt write outside memory");
        return;
      }
    }
    u64 resume = pc_;
    if (auto h = prog_.symbol("irq_handler")) {
      pc_ = *h;
      for (int i = 0; i < 4 && running(); ++i)
        step();
      if (!running())
        return;
    }
    for (int i = 0; i <= 28; ++i)
      r_[i] = peek64(kIrqSaveBase + 8 * u64(i));
    r_[kLr] = peek64(kIrqSaveBase + 232);
    r_[kSp] = peek64(kIrqSaveBase + 240);
    pc_ = resume;
    ++irq_count_;
  }

  //===--- attack surface ----------------------------------------------------===//

  bool write_mem(u64 addr, u64 v) {
    if ((addr & 7) || !writable(addr))
      return false;
    poke64(addr, v);
    return true;
  }
  std::optional<u64> read_mem(u64 addr) const {
    if ((addr & 7) || !writable(addr))
      return std::nullopt;
    return peek64(addr);
  }

  //===--- state -------------------------------------------------------------===//

  u64 pc() const { return pc_; }
  u64 reg(int i) const { return r_.at(std::size_t(i)); }
  u64 retired() const { return retired_; }
  int irqs_taken() const { return irq_count_; }
  bool halted() const { return halted_; }
  bool pa_ready() const { return pa_ready_; }
  const TrapInfo &trap() const { return trap_; }
  const MachineProgram &program() const { return prog_; }
  const FnIndexTable &fn_table() const { return fnidx_; }
  const std::map<u64, u8> &memory() const { return mem_; }
  const std::vector<TraceEvent> &events() const { return events_; }
  const MachineInst *inst_at(u64 a) const {
    auto it = text_.find(a);
    return it == text_.end() ? nullptr : it->second;
  }
  // For the audit that keys never leak into memory. Not part of the model.
  const Key128 &key_for_audit() const { return key_; }

private:
  MachineProgram prog_;
  Options opt_;
  std::map<u64, const MachineInst *> text_;
  std::map<u64, u8> mem_;
  std::array<u64, kNumRegs> r_{};
  u64 pc_ = 0;
  bool zflag_ = false;
  Key128 key_;
  bool pa_ready_ = false;
  bool halted_ = false;
  bool init_freed_ = false;
  u64 retired_ = 0;
  int irq_count_ = 0;
  u64 text_end_ = 0;
  u64 init_end_ = 0;
  u64 irq_end_ = 0;
  u64 at_pa_init_ = ~u64(0);
  u64 at_memcpy_ = ~u64(0);
  u64 at_pac_memcpy_ = ~u64(0);
  std::vector<u64> prekey_;
  FnIndexTable fnidx_;
  TrapInfo trap_;
  std::vector<TraceEvent> events_;

  void trace(std::string kind, std::string detail = "") {
    if (opt_.trace)
      events_.push_back({retired_, pc_, std::move(kind), std::move(detail)});
  }

  void fault(TrapKind k, u64 addr, std::string detail) {
    trap_.kind = k;
    trap_.pc = pc_;
    trap_.addr = addr;
    trap_.detail = std::move(detail);
    if (opt_.trace)
      events_.push_back({retired_, pc_, trap_name(k), trap_.detail});
  }

  //===--- memory ------------------------------------------------------------===//

  bool writable(u64 a) const {
    if (a >= kIrqSaveBase && a < kIrqSaveBase + 0x1000)
      return true;
    return a >= kDataBase && a < kStackTop;
  }

  u64 peek64(u64 a) const {
    u64 v = 0;
    for (int i = 7; i >= 0; --i) {
      auto it = mem_.find(a + u64(i));
      v = (v << 8) | (it == mem_.end() ? 0 : it->second);
    }
    return v;
  }
  void poke64(u64 a, u64 v) {
    for (int i = 0; i < 8; ++i) {
      mem_[a + u64(i)] = u8(v & 0xFF);
      v >>= 8;
    }
  }

  bool load64(u64 a, u64 &out) {
    if ((a & 7) || !writable(a)) {
      fault(TrapKind::MemFault, a, "load outside accessible memory");
      return false;
    }
    out = peek64(a);
    return true;
  }
  bool store64(u64 a, u64 v) {
    if ((a & 7) || !writable(a)) {
      fault(TrapKind::MemFault, a, "store outside accessible memory");
      return false;
    }
    poke64(a, v);
    return true;
  }

  //===--- boot ---------------------------------------------------------------===//

  void boot() {
    auto map_section = [&](const std::vector<MachineProgram::Item> &items,
                           u64 base) {
      u64 a = base;
      for (const auto &it : items) {
        text_[a] = &it.inst;
        a += kInstBytes;
      }
      return a;
    };
    text_end_ = map_section(prog_.text, kTextBase);
    init_end_ = map_section(prog_.init_text, kInitTextBase);
    irq_end_ = map_section(prog_.irq_text, kIrqTextBase);

    for (const auto &w : prog_.words)
      poke64(sym_or_throw(w.global) + w.off, w.value);
    for (const auto &f : prog_.fnwords)
      poke64(sym_or_throw(f.global) + f.off, sym_or_throw(f.fn));
    for (const std::string &fn : prog_.fn_index)
      fnidx_.add(fn, sym_or_throw(fn));

    if (auto a = prog_.symbol("pa_init"))
      at_pa_init_ = *a;
    if (auto a = prog_.symbol("memcpy"))
      at_memcpy_ = *a;
    if (auto a = prog_.symbol("pac_memcpy"))
      at_pac_memcpy_ = *a;

    r_[kSp] = kStackTop;
    auto entry = prog_.symbol("_start");
    if (!entry)
      throw MachineError("program has no _start");
    pc_ = *entry;
    trace("boot", "entry=_start");
  }

  u64 sym_or_throw(const std::string &n) const {
    auto s = prog_.symbol(n);
    if (!s)
      throw MachineError("undefined symbol " + n);
    return *s;
  }

  //===--- native services -----------------------------------------------------===//

  void native_pa_init() {
    trace("pa_init", pa_ready_ ? "again" : "first");
    if (!opt_.pa_on) {
      // No extension: pointers stay raw and the records are moot.
      prekey_.clear();
      return;
    }
    if (pa_ready_)
      return; // second call changes nothing, keys are already live
    u64 s = opt_.seed;
    key_.lo = detail::splitmix64(s);
    key_.hi = detail::splitmix64(s);

    auto sign_cell = [&](u64 addr, u64 ctx) {
      u64 cur = peek64(addr);
      if (cur == 0 || classify(cur) != PtrForm::RawKernel)
        return; // already signed, empty, or not a pointer at all
      poke64(addr, sign(key_, cur, ctx));
    };
    for (const auto &f : prog_.fnwords) {
      u64 addr = sym_or_throw(f.global) + f.off;
      switch (f.ctx) {
      case MachineProgram::PatchCtx::Addr:
        sign_cell(addr, addr);
        break;
      case MachineProgram::PatchCtx::Hash:
        sign_cell(addr, f.hash);
        break;
      case MachineProgram::PatchCtx::None:
        break;
      }
    }
    for (u64 a : prekey_)
      sign_cell(a, a);
    prekey_.clear();
    pa_ready_ = true;
  }

  void native_copy(bool resign) {
    u64 dst = r_[0], src = r_[1], n = r_[2];
    if (n > (u64(1) << 20)) {
      fault(TrapKind::MemFault, dst, "copy length over limit");
      return;
    }
    for (u64 off = 0; off < n; ++off) {
      u64 ds = dst + off, ss = src + off;
      if (!writable(ds) || !writable(ss)) {
        fault(TrapKind::MemFault, !writable(ds) ? ds : ss,
              "copy outside accessible memory");
        return;
      }
    }
    std::vector<u8> buf(static_cast<std::size_t>(n));
    for (u64 off = 0; off < n; ++off) {
      auto it = mem_.find(src + off);
      buf[std::size_t(off)] = it == mem_.end() ? 0 : it->second;
    }
    for (u64 off = 0; off < n; ++off)
      mem_[dst + off] = buf[std::size_t(off)];
    if (!resign || !pa_ready_)
      return;
    // Signed pointers are bound to their cell. Walk the copied cells,
    // check each signed value against where it came from, and bind it to
    // where it now lives. A value that fails the check is poisoned in
    // place rather than generously re-signed.
    for (u64 off = 0; off + 8 <= n; off += 8) {
      u64 a = dst + off;
      if (a & 7)
        continue;
      u64 w = peek64(a);
      if (w == 0 || classify(w) != PtrForm::Paced)
        continue;
      if (!match_paced_fp(fnidx_, w))
        continue;
      u64 t = authenticate(key_, w, src + off);
      poke64(a, classify(t) == PtrForm::RawKernel ? sign(key_, t, a)
                                                  : t);
    }
  }

  //===--- signing helpers ------------------------------------------------------===//

  bool pa_live() const { return opt_.pa_on && pa_ready_; }

  // Authenticate-then-sign. Raw pointers are signed directly; a paced value
  // must check out against the new context (matching re-stores of a value
  // in place or hash contexts); transport form carries its own evidence.
  u64 resign(u64 v, u64 ctx) {
    switch (classify(v)) {
    case PtrForm::RawKernel:
      return sign(key_, v, ctx);
    case PtrForm::Paced: {
      u64 t = authenticate(key_, v, ctx);
      return classify(t) == PtrForm::RawKernel ? sign(key_, t, ctx)
                                               : poison(v);
    }
    case PtrForm::Piggyback: {
      try {
        PiggybackParts parts = decode_piggyback(fnidx_, v);
        u64 t = authenticate(key_, parts.paced_fn, parts.storage_addr);
        if (classify(t) == PtrForm::RawKernel)
          return sign(key_, t, ctx);
      } catch (const CodecError &) {
      }
      return poison(v);
    }
    case PtrForm::Poisoned:
    case PtrForm::Other:
      return poison(v);
    }
    return poison(v);
  }

  u64 transport_encode(u64 v, u64 ctx) {
    u64 raw = 0;
    switch (classify(v)) {
    case PtrForm::RawKernel:
      raw = v;
      break;
    case PtrForm::Paced:
      // Unverified strip: the authenticate in front of this op is what
      // makes it safe, and dropping it is a deliberate ablation.
      raw = strip_pac(v);
      break;
    case PtrForm::Piggyback: {
      try {
        PiggybackParts parts = decode_piggyback(fnidx_, v);
        u64 t = authenticate(key_, parts.paced_fn, parts.storage_addr);
        if (classify(t) == PtrForm::RawKernel) {
          raw = t;
          break;
        }
      } catch (const CodecError &) {
      }
      return poison(v);
    }
    default:
      return poison(v);
    }
    if (!fnidx_.index_of(raw))
      return poison(v);
    try {
      u8 pac = compute_pac(key_, raw, ctx);
      return encode_piggyback(fnidx_, raw, pac, ctx);
    } catch (const CodecError &) {
      return poison(v);
    }
  }

  //===--- execute --------------------------------------------------------------===//

  void exec(const MachineInst &in) {
    u64 next = pc_ + kInstBytes;
    auto rm_or_imm = [&]() {
      return in.rm >= 0 ? r_[std::size_t(in.rm)] : u64(in.imm);
    };
    switch (in.op) {
    case MOp::Ldr: {
      u64 v;
      if (!load64(r_[std::size_t(in.rn)] + u64(in.imm), v))
        return;
      r_[std::size_t(in.rd)] = v;
      break;
    }
    case MOp::Str:
      if (!store64(r_[std::size_t(in.rn)] + u64(in.imm),
                   r_[std::size_t(in.rd)]))
        return;
      break;
    case MOp::Ldp: {
      u64 a = r_[std::size_t(in.rn)] + u64(in.imm);
      u64 v1, v2;
      if (!load64(a, v1) || !load64(a + 8, v2))
        return;
      r_[std::size_t(in.rd)] = v1;
      r_[std::size_t(in.rm)] = v2;
      break;
    }
    case MOp::Stp: {
      u64 a = r_[std::size_t(in.rn)] + u64(in.imm);
      if (!store64(a, r_[std::size_t(in.rd)]) ||
          !store64(a + 8, r_[std::size_t(in.rm)]))
        return;
      break;
    }
    case MOp::Mov:
      r_[std::size_t(in.rd)] = r_[std::size_t(in.rn)];
      break;
    case MOp::MovImm:
      r_[std::size_t(in.rd)] = u64(in.imm);
      break;
    case MOp::Add:
      r_[std::size_t(in.rd)] = r_[std::size_t(in.rn)] + rm_or_imm();
      break;
    case MOp::Sub:
      r_[std::size_t(in.rd)] = r_[std::size_t(in.rn)] - rm_or_imm();
      break;
    case MOp::Cmp:
      zflag_ = r_[std::size_t(in.rn)] == rm_or_imm();
      break;
    case MOp::B:
      next = in.target;
      break;
    case MOp::BCond:
      if (in.cond == "eq" ? zflag_ : !zflag_)
        next = in.target;
      break;
    case MOp::Bl:
      r_[kLr] = next;
      next = in.target;
      break;
    case MOp::Blr: {
      u64 t = r_[std::size_t(in.rd)];
      if (t == 0) {
        fault(TrapKind::NullCall, 0, "indirect call through null");
        return;
      }
      r_[kLr] = next;
      next = t;
      break;
    }
    case MOp::Blraa: {
      u64 t = r_[std::size_t(in.rd)];
      if (t == 0) {
        fault(TrapKind::NullCall, 0, "indirect call through null");
        return;
      }
      r_[kLr] = next;
      next = pa_live() ? authenticate(key_, t, r_[std::size_t(in.rn)]) : t;
      break;
    }
    case MOp::Ret:
      next = r_[kLr];
      break;
    case MOp::Retaa:
      next = pa_live() ? authenticate(key_, r_[kLr], r_[kSp]) : r_[kLr];
      break;
    case MOp::Pacia: {
      u64 v = r_[std::size_t(in.rd)];
      u64 ctx = r_[std::size_t(in.rn)];
      if (!pa_live()) {
        if (in.store_record)
          prekey_.push_back(ctx); // context doubles as the cell address
        break;
      }
      if (v != 0)
        r_[std::size_t(in.rd)] = resign(v, ctx);
      break;
    }
    case MOp::Autia: {
      u64 v = r_[std::size_t(in.rd)];
      if (pa_live() && v != 0)
        r_[std::size_t(in.rd)] =
            authenticate(key_, v, r_[std::size_t(in.rn)]);
      break;
    }
    case MOp::Paciasp:
      if (pa_live() && r_[kLr] != 0)
        r_[kLr] = resign(r_[kLr], r_[kSp]);
      break;
    case MOp::Autiasp:
      if (pa_live() && r_[kLr] != 0)
        r_[kLr] = authenticate(key_, r_[kLr], r_[kSp]);
      break;
    case MOp::Pbenc: {
      u64 v = r_[std::size_t(in.rd)];
      if (pa_live() && v != 0)
        r_[std::size_t(in.rd)] =
            transport_encode(v, r_[std::size_t(in.rn)]);
      break;
    }
    case MOp::Pbdec: {
      u64 v = r_[std::size_t(in.rd)];
      if (!pa_live()) {
        r_[std::size_t(in.rn)] = 0;
        break;
      }
      if (v == 0) {
        r_[std::size_t(in.rn)] = 0;
        break;
      }
      if (classify(v) == PtrForm::Piggyback) {
        try {
          PiggybackParts parts = decode_piggyback(fnidx_, v);
          r_[std::size_t(in.rd)] = parts.paced_fn;
          r_[std::size_t(in.rn)] = parts.storage_addr;
          break;
        } catch (const CodecError &) {
        }
      }
      r_[std::size_t(in.rd)] = poison(v);
      r_[std::size_t(in.rn)] = 0;
      break;
    }
    case MOp::Adrp:
      r_[std::size_t(in.rd)] = in.target;
      break;
    case MOp::Nop:
      break;
    case MOp::Halt:
      halted_ = true;
      trace("halt");
      break;
    case MOp::SysFreeInit:
      init_freed_ = true;
      trace("free_init");
      break;
    }
    if (trap_.kind == TrapKind::None && !halted_)
      pc_ = next;
  }
};

inline Machine::Machine(MachineProgram prog)
    : Machine(std::move(prog), Options()) {}

} // namespace pacter
