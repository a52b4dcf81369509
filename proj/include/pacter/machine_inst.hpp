//===- machine_inst.hpp - target ISA and program container ------*- C++ -*-===//
//
// SPDX-License-Identifier: Apache-2.0
//
// The target is a small fixed-width register machine living entirely in the
// kernel half of the address space. 4-byte instructions, 8-byte cells,
// registers r0..r28 plus lr and sp.
//
// Pointer-signing ops mirror their hardware counterparts: pacia/autia with
// an explicit context register, paciasp/autiasp/retaa against sp, blraa for
// combined authenticate-and-branch. pacia.st is pacia plus a boot-time
// record of the destination cell (see pa_init). pbenc/pbdec convert between
// a verified pointer and its transport form that carries the signature and
// table index piggybacked in the upper bits.
//
// A program is kept as labeled sections plus data images and is serialized
// to a line-oriented object text that parses back losslessly. assign_layout
// pins every section to its base address and resolves symbols.
//
//===----------------------------------------------------------------------===//

#pragma once

#include "pac_codec.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pacter {

//===----------------------------------------------------------------------===//
// Address map
//===----------------------------------------------------------------------===//

inline constexpr u64 kIrqTextBase = kRegionBase + 0x4000;
inline constexpr u64 kIrqSaveBase = kRegionBase + 0x8000;
inline constexpr u64 kTextBase = kRegionBase + 0x10000;
inline constexpr u64 kInitTextBase = kRegionBase + 0x80000;
inline constexpr u64 kDataBase = kRegionBase + 0x100000;
inline constexpr u64 kStackTop = kRegionBase + 0x200000;
inline constexpr u64 kInstBytes = 4;

// Register numbering. r0..r3 carry arguments and the return value, r4..r28
// are the callee-saved allocation pool.
inline constexpr int kLr = 29;
inline constexpr int kSp = 30;
inline constexpr int kNumRegs = 31;
inline constexpr int kPoolFirst = 4;
inline constexpr int kPoolLast = 28;
inline constexpr int kPairFirst = 19; // blraa operand pair class

inline std::string reg_name(int r) {
  if (r == kLr)
    return "lr";
  if (r == kSp)
    return "sp";
  return "r" + std::to_string(r);
}

inline std::optional<int> parse_reg(const std::string &s) {
  if (s == "lr")
    return kLr;
  if (s == "sp")
    return kSp;
  if (s.size() >= 2 && s[0] == 'r') {
    int v = 0;
    for (std::size_t i = 1; i < s.size(); ++i) {
      if (!isdigit(static_cast<unsigned char>(s[i])))
        return std::nullopt;
      v = v * 10 + (s[i] - '0');
    }
    if (v <= 28)
      return v;
  }
  return std::nullopt;
}

//===----------------------------------------------------------------------===//
// Instructions
//===----------------------------------------------------------------------===//

enum class MOp {
  Ldr,
  Str,
  Ldp,
  Stp,
  Mov,
  MovImm,
  Add,
  Sub,
  Cmp,
  B,
  BCond,
  Bl,
  Blr,
  Blraa,
  Ret,
  Retaa,
  Pacia,
  Autia,
  Paciasp,
  Autiasp,
  Adrp,
  Nop,
  Halt,
  SysFreeInit,
  Pbenc,
  Pbdec,
};

struct MachineInst {
  MOp op = MOp::Nop;
  int rd = -1;
  int rn = -1;
  int rm = -1;
  std::int64_t imm = 0;
  std::string sym;  // branch target or adrp symbol
  std::string cond; // b.cond: eq | ne
  bool store_record = false; // the pacia.st variant
  u64 target = 0;   // resolved symbol value, filled by assign_layout
};

struct LayoutError : std::runtime_error {
  explicit LayoutError(const std::string &m) : std::runtime_error(m) {}
};

namespace detail {

inline std::string imm_str(std::int64_t v) {
  std::ostringstream os;
  if (v < 0) {
    os << "#-0x" << std::hex << std::uppercase << -v;
  } else {
    os << "#0x" << std::hex << std::uppercase << v;
  }
  return os.str();
}

} // namespace detail

inline std::string minst_to_string(const MachineInst &in) {
  using detail::imm_str;
  std::ostringstream os;
  switch (in.op) {
  case MOp::Ldr:
    os << "ldr " << reg_name(in.rd) << ", [" << reg_name(in.rn) << ", "
       << imm_str(in.imm) << "]";
    break;
  case MOp::Str:
    os << "str " << reg_name(in.rd) << ", [" << reg_name(in.rn) << ", "
       << imm_str(in.imm) << "]";
    break;
  case MOp::Ldp:
    os << "ldp " << reg_name(in.rd) << ", " << reg_name(in.rm) << ", ["
       << reg_name(in.rn) << ", " << imm_str(in.imm) << "]";
    break;
  case MOp::Stp:
    os << "stp " << reg_name(in.rd) << ", " << reg_name(in.rm) << ", ["
       << reg_name(in.rn) << ", " << imm_str(in.imm) << "]";
    break;
  case MOp::Mov:
    os << "mov " << reg_name(in.rd) << ", " << reg_name(in.rn);
    break;
  case MOp::MovImm:
    os << "movimm " << reg_name(in.rd) << ", " << imm_str(in.imm);
    break;
  case MOp::Add:
    os << "add " << reg_name(in.rd) << ", " << reg_name(in.rn) << ", ";
    if (in.rm >= 0)
      os << reg_name(in.rm);
    else
      os << imm_str(in.imm);
    break;
  case MOp::Sub:
    os << "sub " << reg_name(in.rd) << ", " << reg_name(in.rn) << ", ";
    if (in.rm >= 0)
      os << reg_name(in.rm);
    else
      os << imm_str(in.imm);
    break;
  case MOp::Cmp:
    os << "cmp " << reg_name(in.rn) << ", ";
    if (in.rm >= 0)
      os << reg_name(in.rm);
    else
      os << imm_str(in.imm);
    break;
  case MOp::B:
    os << "b " << in.sym;
    break;
  case MOp::BCond:
    os << "b." << in.cond << " " << in.sym;
    break;
  case MOp::Bl:
    os << "bl " << in.sym;
    break;
  case MOp::Blr:
    os << "blr " << reg_name(in.rd);
    break;
  case MOp::Blraa:
    os << "blraa " << reg_name(in.rd) << ", " << reg_name(in.rn);
    break;
  case MOp::Ret:
    os << "ret";
    break;
  case MOp::Retaa:
    os << "retaa";
    break;
  case MOp::Pacia:
    os << (in.store_record ? "pacia.st " : "pacia ") << reg_name(in.rd)
       << ", " << reg_name(in.rn);
    break;
  case MOp::Autia:
    os << "autia " << reg_name(in.rd) << ", " << reg_name(in.rn);
    break;
  case MOp::Paciasp:
    os << "paciasp";
    break;
  case MOp::Autiasp:
    os << "autiasp";
    break;
  case MOp::Adrp:
    os << "adrp " << reg_name(in.rd) << ", " << in.sym;
    break;
  case MOp::Nop:
    os << "nop";
    break;
  case MOp::Halt:
    os << "halt";
    break;
  case MOp::SysFreeInit:
    os << "sys_free_init";
    break;
  case MOp::Pbenc:
    os << "pbenc " << reg_name(in.rd) << ", " << reg_name(in.rn);
    break;
  case MOp::Pbdec:
    os << "pbdec " << reg_name(in.rd) << ", " << reg_name(in.rn);
    break;
  }
  return os.str();
}

//===----------------------------------------------------------------------===//
// Program container
//===----------------------------------------------------------------------===//

struct MachineProgram {
  struct Label {
    std::string name;
    bool is_func = false;
  };
  struct Item {
    std::vector<Label> labels; // attach to this instruction's address
    MachineInst inst;
  };
  struct Global {
    std::string name;
    u64 size = 0;
  };
  struct Word {
    std::string global;
    u64 off = 0;
    u64 value = 0;
  };
  // A data cell initialized with a function address. The loader writes the
  // raw address; pa_init signs it in place using the context noted here.
  enum class PatchCtx { Addr, Hash, None };
  struct FnWord {
    std::string global;
    u64 off = 0;
    std::string fn;
    PatchCtx ctx = PatchCtx::Addr;
    u64 hash = 0; // context value when ctx == Hash
  };

  std::string mode = "protected";
  std::vector<std::string> fn_index; // transport table, 1-based order
  std::vector<Global> globals;
  std::vector<Word> words;
  std::vector<FnWord> fnwords;
  std::vector<Item> text;
  std::vector<Item> init_text;
  std::vector<Item> irq_text;

  // Filled by assign_layout.
  std::map<std::string, u64> symbols;
  bool laid_out = false;

  std::optional<u64> symbol(const std::string &name) const {
    auto it = symbols.find(name);
    if (it == symbols.end())
      return std::nullopt;
    return it->second;
  }
};

// Pin sections to their bases, record every label and global address, then
// resolve branch and adrp symbols into inst.target.
inline void assign_layout(MachineProgram &p) {
  p.symbols.clear();
  auto place = [&](std::vector<MachineProgram::Item> &items, u64 base) {
    u64 a = base;
    for (MachineProgram::Item &it : items) {
      for (const MachineProgram::Label &l : it.labels) {
        if (p.symbols.count(l.name))
          throw LayoutError("duplicate symbol " + l.name);
        p.symbols[l.name] = a;
      }
      a += kInstBytes;
    }
    return a;
  };
  u64 text_end = place(p.text, kTextBase);
  if (text_end > kInitTextBase)
    throw LayoutError("text section overflows into init text");
  u64 init_end = place(p.init_text, kInitTextBase);
  if (init_end > kDataBase)
    throw LayoutError("init text section overflows into data");
  u64 irq_end = place(p.irq_text, kIrqTextBase);
  if (irq_end > kIrqSaveBase)
    throw LayoutError("irq text section overflows into the save area");

  u64 d = kDataBase;
  for (const MachineProgram::Global &g : p.globals) {
    if (p.symbols.count(g.name))
      throw LayoutError("duplicate symbol " + g.name);
    p.symbols[g.name] = d;
    d += (g.size + 7) & ~u64(7);
  }
  if (d > kStackTop - 0x10000)
    throw LayoutError("data section runs into the stack");

  auto resolve = [&](std::vector<MachineProgram::Item> &items) {
    for (MachineProgram::Item &it : items) {
      MachineInst &in = it.inst;
      if (in.sym.empty())
        continue;
      auto s = p.symbol(in.sym);
      if (!s)
        throw LayoutError("unresolved symbol " + in.sym);
      in.target = *s;
    }
  };
  resolve(p.text);
  resolve(p.init_text);
  resolve(p.irq_text);
  p.laid_out = true;
}

//===----------------------------------------------------------------------===//
// Object text
//===----------------------------------------------------------------------===//

inline std::string serialize_program(const MachineProgram &p) {
  std::ostringstream os;
  os << "; pacter object\n";
  os << "mode " << p.mode << "\n";
  for (std::size_t i = 0; i < p.fn_index.size(); ++i)
    os << "fnidx " << (i + 1) << " " << p.fn_index[i] << "\n";
  for (const auto &g : p.globals)
    os << "global " << g.name << " 0x" << std::hex << g.size << std::dec
       << "\n";
  for (const auto &w : p.words)
    os << "word " << w.global << "+0x" << std::hex << w.off << " 0x"
       << w.value << std::dec << "\n";
  for (const auto &f : p.fnwords) {
    os << "fnword " << f.global << "+0x" << std::hex << f.off << std::dec
       << " " << f.fn << " ";
    switch (f.ctx) {
    case MachineProgram::PatchCtx::Addr:
      os << "addr";
      break;
    case MachineProgram::PatchCtx::Hash:
      os << "hash:0x" << std::hex << f.hash << std::dec;
      break;
    case MachineProgram::PatchCtx::None:
      os << "none";
      break;
    }
    os << "\n";
  }
  auto section = [&](const char *name,
                     const std::vector<MachineProgram::Item> &items) {
    if (items.empty())
      return;
    os << name << "\n";
    for (const auto &it : items) {
      for (const auto &l : it.labels)
        os << (l.is_func ? "func " : "label ") << l.name << "\n";
      os << "  " << minst_to_string(it.inst) << "\n";
    }
  };
  section("text", p.text);
  section("inittext", p.init_text);
  section("irqtext", p.irq_text);
  return os.str();
}

struct ObjectParseError : std::runtime_error {
  explicit ObjectParseError(const std::string &m) : std::runtime_error(m) {}
};

namespace detail {

inline std::vector<std::string> split_ws(const std::string &line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  for (std::string t; is >> t;)
    out.push_back(t);
  return out;
}

inline u64 parse_u64(const std::string &s) {
  return std::stoull(s, nullptr, 0);
}

inline std::int64_t parse_imm(std::string s) {
  if (s.empty() || s[0] != '#')
    throw ObjectParseError("expected immediate, got " + s);
  s = s.substr(1);
  bool neg = !s.empty() && s[0] == '-';
  if (neg)
    s = s.substr(1);
  std::int64_t v = std::int64_t(std::stoull(s, nullptr, 0));
  return neg ? -v : v;
}

inline int parse_reg_or_throw(std::string s) {
  while (!s.empty() && (s.back() == ',' || s.back() == ']'))
    s.pop_back();
  if (!s.empty() && s.front() == '[')
    s = s.substr(1);
  auto r = parse_reg(s);
  if (!r)
    throw ObjectParseError("bad register " + s);
  return *r;
}

inline std::int64_t parse_imm_tok(std::string s) {
  while (!s.empty() && (s.back() == ',' || s.back() == ']'))
    s.pop_back();
  return parse_imm(s);
}

inline MachineInst parse_minst(const std::vector<std::string> &t) {
  MachineInst in;
  const std::string &op = t[0];
  auto reg = [&](std::size_t i) { return parse_reg_or_throw(t.at(i)); };
  auto imm = [&](std::size_t i) { return parse_imm_tok(t.at(i)); };
  auto reg_or_imm = [&](std::size_t i, int &r, std::int64_t &v) {
    std::string s = t.at(i);
    if (!s.empty() && (s[0] == '#' || (s[0] == '[' && s[1] == '#'))) {
      r = -1;
      v = parse_imm_tok(s);
    } else {
      r = parse_reg_or_throw(s);
      v = 0;
    }
  };
  if (op == "ldr" || op == "str") {
    in.op = op == "ldr" ? MOp::Ldr : MOp::Str;
    in.rd = reg(1);
    in.rn = reg(2);
    in.imm = imm(3);
  } else if (op == "ldp" || op == "stp") {
    in.op = op == "ldp" ? MOp::Ldp : MOp::Stp;
    in.rd = reg(1);
    in.rm = reg(2);
    in.rn = reg(3);
    in.imm = imm(4);
  } else if (op == "mov") {
    in.op = MOp::Mov;
    in.rd = reg(1);
    in.rn = reg(2);
  } else if (op == "movimm") {
    in.op = MOp::MovImm;
    in.rd = reg(1);
    in.imm = imm(2);
  } else if (op == "add" || op == "sub") {
    in.op = op == "add" ? MOp::Add : MOp::Sub;
    in.rd = reg(1);
    in.rn = reg(2);
    reg_or_imm(3, in.rm, in.imm);
  } else if (op == "cmp") {
    in.op = MOp::Cmp;
    in.rn = reg(1);
    reg_or_imm(2, in.rm, in.imm);
  } else if (op == "b") {
    in.op = MOp::B;
    in.sym = t.at(1);
  } else if (op == "b.eq" || op == "b.ne") {
    in.op = MOp::BCond;
    in.cond = op.substr(2);
    in.sym = t.at(1);
  } else if (op == "bl") {
    in.op = MOp::Bl;
    in.sym = t.at(1);
  } else if (op == "blr") {
    in.op = MOp::Blr;
    in.rd = reg(1);
  } else if (op == "blraa") {
    in.op = MOp::Blraa;
    in.rd = reg(1);
    in.rn = reg(2);
  } else if (op == "ret") {
    in.op = MOp::Ret;
  } else if (op == "retaa") {
    in.op = MOp::Retaa;
  } else if (op == "pacia" || op == "pacia.st") {
    in.op = MOp::Pacia;
    in.store_record = op == "pacia.st";
    in.rd = reg(1);
    in.rn = reg(2);
  } else if (op == "autia") {
    in.op = MOp::Autia;
    in.rd = reg(1);
    in.rn = reg(2);
  } else if (op == "paciasp") {
    in.op = MOp::Paciasp;
  } else if (op == "autiasp") {
    in.op = MOp::Autiasp;
  } else if (op == "adrp") {
    in.op = MOp::Adrp;
    in.rd = reg(1);
    in.sym = t.at(2);
  } else if (op == "nop") {
    in.op = MOp::Nop;
  } else if (op == "halt") {
    in.op = MOp::Halt;
  } else if (op == "sys_free_init") {
    in.op = MOp::SysFreeInit;
  } else if (op == "pbenc" || op == "pbdec") {
    in.op = op == "pbenc" ? MOp::Pbenc : MOp::Pbdec;
    in.rd = reg(1);
    in.rn = reg(2);
  } else {
    throw ObjectParseError("unknown op " + op);
  }
  return in;
}

// "name+0xOFF" -> (name, off)
inline std::pair<std::string, u64> parse_cell_ref(const std::string &s) {
  auto plus = s.find('+');
  if (plus == std::string::npos)
    throw ObjectParseError("expected cell reference, got " + s);
  return {s.substr(0, plus), parse_u64(s.substr(plus + 1))};
}

} // namespace detail

inline MachineProgram parse_program(const std::string &textsrc) {
  using namespace detail;
  MachineProgram p;
  p.mode.clear();
  std::vector<MachineProgram::Item> *cur = nullptr;
  std::vector<MachineProgram::Label> pending;
  std::istringstream is(textsrc);
  int lineno = 0;
  for (std::string line; std::getline(is, line);) {
    ++lineno;
    auto sc = line.find(';');
    if (sc != std::string::npos)
      line = line.substr(0, sc);
    std::vector<std::string> t = split_ws(line);
    if (t.empty())
      continue;
    try {
      const std::string &k = t[0];
      if (k == "mode") {
        p.mode = t.at(1);
      } else if (k == "fnidx") {
        u64 idx = parse_u64(t.at(1));
        if (idx != p.fn_index.size() + 1)
          throw ObjectParseError("fn index out of order");
        p.fn_index.push_back(t.at(2));
      } else if (k == "global") {
        p.globals.push_back({t.at(1), parse_u64(t.at(2))});
      } else if (k == "word") {
        auto [g, off] = parse_cell_ref(t.at(1));
        p.words.push_back({g, off, parse_u64(t.at(2))});
      } else if (k == "fnword") {
        auto [g, off] = parse_cell_ref(t.at(1));
        MachineProgram::FnWord f;
        f.global = g;
        f.off = off;
        f.fn = t.at(2);
        const std::string &c = t.at(3);
        if (c == "addr")
          f.ctx = MachineProgram::PatchCtx::Addr;
        else if (c == "none")
          f.ctx = MachineProgram::PatchCtx::None;
        else if (c.rfind("hash:", 0) == 0) {
          f.ctx = MachineProgram::PatchCtx::Hash;
          f.hash = parse_u64(c.substr(5));
        } else
          throw ObjectParseError("bad fnword context " + c);
        p.fnwords.push_back(f);
      } else if (k == "text") {
        cur = &p.text;
      } else if (k == "inittext") {
        cur = &p.init_text;
      } else if (k == "irqtext") {
        cur = &p.irq_text;
      } else if (k == "func" || k == "label") {
        pending.push_back({t.at(1), k == "func"});
      } else {
        if (!cur)
          throw ObjectParseError("instruction outside a section");
        MachineProgram::Item item;
        item.labels = std::move(pending);
        pending.clear();
        item.inst = parse_minst(t);
        cur->push_back(std::move(item));
      }
    } catch (const std::out_of_range &) {
      throw ObjectParseError("line " + std::to_string(lineno) +
                             ": truncated directive");
    } catch (const ObjectParseError &e) {
      throw ObjectParseError("line " + std::to_string(lineno) + ": " +
                             e.what());
    }
  }
  if (!pending.empty())
    throw ObjectParseError("trailing label without instruction");
  if (p.mode.empty())
    throw ObjectParseError("missing mode line");
  return p;
}

//===----------------------------------------------------------------------===//
// Static coverage
//===----------------------------------------------------------------------===//

struct CoverageReport {
  int n_blr = 0;
  int n_blraa = 0;
  int n_ret = 0;
  int n_retaa = 0;
  int n_paciasp = 0;
  int n_autiasp = 0;
  struct Offender {
    std::string func;
    std::string reason;
  };
  std::vector<Offender> offenders;
};

// Walk the main text by function extents and flag return and indirect-call
// sites that leave a corruption or swap window open. Functions that never
// spill lr may use a plain ret: the return address never touches memory.
inline CoverageReport coverage_scan(const MachineProgram &p) {
  CoverageReport rep;
  std::string cur = "(none)";
  bool lr_spilled = false;
  bool saw_autiasp = false;
  auto flush_pending = [&]() {
    lr_spilled = false;
    saw_autiasp = false;
  };
  for (const MachineProgram::Item &it : p.text) {
    for (const MachineProgram::Label &l : it.labels)
      if (l.is_func) {
        cur = l.name;
        flush_pending();
      }
    const MachineInst &in = it.inst;
    switch (in.op) {
    case MOp::Blr:
      ++rep.n_blr;
      rep.offenders.push_back({cur, "raw indirect call"});
      break;
    case MOp::Blraa:
      ++rep.n_blraa;
      break;
    case MOp::Str:
      if (in.rd == kLr)
        lr_spilled = true;
      break;
    case MOp::Stp:
      if (in.rd == kLr || in.rm == kLr)
        lr_spilled = true;
      break;
    case MOp::Paciasp:
      ++rep.n_paciasp;
      break;
    case MOp::Autiasp:
      ++rep.n_autiasp;
      saw_autiasp = true;
      break;
    case MOp::Ret:
      ++rep.n_ret;
      if (saw_autiasp)
        rep.offenders.push_back(
            {cur, "window between authenticate and return"});
      else if (lr_spilled)
        rep.offenders.push_back({cur, "plain return after lr spill"});
      break;
    case MOp::Retaa:
      ++rep.n_retaa;
      break;
    default:
      break;
    }
  }
  return rep;
}

} // namespace pacter
