//===- lower.hpp - IR to machine lowering -----------------------*- C++ -*-===//
//
// SPDX-License-Identifier: Apache-2.0
//
// Turns an (optionally instrumented) module into a MachineProgram. Four
// build modes:
//
//   protected    signed pointers with address contexts, signed returns
//   compat       signed pointers with type-hash contexts, signed returns;
//                cells are position independent, which is exactly the
//                weakness the protected scheme removes
//   legacy       protected forward edges, but returns authenticate with
//                autiasp and then ret as two separate steps
//   unprotected  plain loads, stores, calls and returns
//
// The lowering is deliberately simple: one virtual register per IR value,
// linear scan over r4..r28, per-return epilogues. blraa operands get a
// dedicated r19..r28 class so attack scenarios can name them.
//
//===----------------------------------------------------------------------===//

#pragma once

#include "ir.hpp"
#include "machine_inst.hpp"

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pacter {

enum class BuildMode { Protected, Compat, Legacy, Unprotected };

inline const char *build_mode_name(BuildMode m) {
  switch (m) {
  case BuildMode::Protected:
    return "protected";
  case BuildMode::Compat:
    return "compat";
  case BuildMode::Legacy:
    return "legacy";
  case BuildMode::Unprotected:
    return "unprotected";
  }
  return "?";
}

inline std::optional<BuildMode> parse_build_mode(std::string_view s) {
  if (s == "protected")
    return BuildMode::Protected;
  if (s == "compat")
    return BuildMode::Compat;
  if (s == "legacy")
    return BuildMode::Legacy;
  if (s == "unprotected")
    return BuildMode::Unprotected;
  return std::nullopt;
}

struct BuildOptions {
  BuildMode mode = BuildMode::Protected;
  // When false, signed loads skip the authenticate step and re-sign
  // whatever they read. Kept as a switch because the resulting signing
  // gadget is worth demonstrating.
  bool load_auth = true;
};

struct LowerError : std::runtime_error {
  explicit LowerError(const std::string &m) : std::runtime_error(m) {}
};

inline u64 fnv1a64(std::string_view s) {
  u64 h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

namespace lowerdetail {

inline constexpr int kVRegBase = 64;

struct RetNote {}; // marker: MOp::Ret emitted by Op::Ret, expanded later

class FnLower {
public:
  FnLower(const IRModule &m, const IRFunction &f, const BuildOptions &o)
      : m_(m), f_(f), o_(o) {}

  std::vector<MachineProgram::Item> run() {
    if (f_.blocks.empty())
      throw LowerError("function " + f_.name + " has no body");
    label(f_.name, true);
    label(block_label(f_.blocks.front().name));
    for (std::size_t i = 0; i < f_.params.size(); ++i) {
      if (i >= 4)
        throw LowerError("function " + f_.name + " has more than 4 params");
      emit_mov(vreg(f_.params[i].name), int(i));
    }
    collect_phi_copies();
    for (const BasicBlock &bb : f_.blocks)
      lower_block(bb);
    allocate();
    return frame();
  }

private:
  const IRModule &m_;
  const IRFunction &f_;
  const BuildOptions &o_;

  std::vector<MachineProgram::Item> body_;
  std::vector<MachineProgram::Label> pend_;
  std::map<std::string, int> vregs_;
  std::set<int> pair_class_;
  std::set<int> used_pool_;
  bool has_call_ = false;
  int next_vreg_ = kVRegBase;
  int tmp_labels_ = 0;
  // phi destination copies to run at the end of each predecessor block
  std::map<std::string, std::vector<std::pair<int, Value>>> phi_copies_;

  bool protected_returns() const {
    return o_.mode != BuildMode::Unprotected && !f_.init_text;
  }
  bool signing_mode() const {
    return o_.mode == BuildMode::Protected || o_.mode == BuildMode::Legacy;
  }

  //===--- emit helpers ---------------------------------------------------===//

  void emit(MachineInst in) {
    MachineProgram::Item it;
    it.labels = std::move(pend_);
    pend_.clear();
    it.inst = std::move(in);
    body_.push_back(std::move(it));
  }
  void label(std::string n, bool fn = false) {
    pend_.push_back({std::move(n), fn});
  }
  void emit_mov(int rd, int rn) {
    MachineInst in;
    in.op = MOp::Mov;
    in.rd = rd;
    in.rn = rn;
    emit(in);
  }
  void emit_movimm(int rd, std::int64_t v) {
    MachineInst in;
    in.op = MOp::MovImm;
    in.rd = rd;
    in.imm = v;
    emit(in);
  }
  void emit_rr(MOp op, int rd, int rn) {
    MachineInst in;
    in.op = op;
    in.rd = rd;
    in.rn = rn;
    emit(in);
  }
  void emit_mem(MOp op, int rd, int rn, std::int64_t off) {
    MachineInst in;
    in.op = op;
    in.rd = rd;
    in.rn = rn;
    in.imm = off;
    emit(in);
  }
  void emit_b(const std::string &target) {
    MachineInst in;
    in.op = MOp::B;
    in.sym = target;
    emit(in);
  }
  void emit_bcond(const std::string &cond, const std::string &target) {
    MachineInst in;
    in.op = MOp::BCond;
    in.cond = cond;
    in.sym = target;
    emit(in);
  }
  void emit_bl(const std::string &target) {
    MachineInst in;
    in.op = MOp::Bl;
    in.sym = target;
    emit(in);
    has_call_ = true;
  }
  void emit_adrp(int rd, const std::string &sym) {
    MachineInst in;
    in.op = MOp::Adrp;
    in.rd = rd;
    in.sym = sym;
    emit(in);
  }

  int vreg(const std::string &n) {
    auto it = vregs_.find(n);
    if (it != vregs_.end())
      return it->second;
    int v = next_vreg_++;
    vregs_.emplace(n, v);
    return v;
  }
  int scratch() { return next_vreg_++; }
  int scratch_pair() {
    int v = next_vreg_++;
    pair_class_.insert(v);
    return v;
  }

  std::string block_label(const std::string &bb) const {
    return f_.name + "." + bb;
  }
  std::string fresh_label() {
    return f_.name + ".L" + std::to_string(tmp_labels_++);
  }

  // Load a value into a register.
  int materialize(const Value &v) {
    switch (v.kind) {
    case ValueKind::Local:
      return vreg(v.name);
    case ValueKind::Global: {
      int s = scratch();
      emit_adrp(s, v.name);
      return s;
    }
    case ValueKind::Func: {
      int s = scratch();
      emit_adrp(s, v.name);
      return s;
    }
    case ValueKind::ConstInt: {
      int s = scratch();
      emit_movimm(s, v.imm);
      return s;
    }
    case ValueKind::Null: {
      int s = scratch();
      emit_movimm(s, 0);
      return s;
    }
    case ValueKind::None:
      break;
    }
    throw LowerError("cannot materialize operand in " + f_.name);
  }

  u64 sig_hash(const Value &v) const {
    TypeRef t = value_type(m_, f_, v);
    std::string s = t == kNoType ? std::string("fn(?)")
                                 : type_to_string(m_.types, t);
    return fnv1a64(s);
  }

  //===--- instruction selection -------------------------------------------===//

  void collect_phi_copies() {
    for (const BasicBlock &bb : f_.blocks)
      for (const IRInst &in : bb.insts) {
        if (in.op != Op::Phi)
          continue;
        int dst = vreg(in.result);
        for (std::size_t i = 0; i < in.args.size(); ++i)
          phi_copies_[in.labels.at(i)].push_back({dst, in.args[i]});
      }
  }

  void run_phi_copies(const std::string &bb) {
    auto it = phi_copies_.find(bb);
    if (it == phi_copies_.end())
      return;
    // Copies run in program order. Good enough while no phi reads another
    // phi of the same block; the corpus never swaps values through phis.
    for (const auto &[dst, src] : it->second) {
      switch (src.kind) {
      case ValueKind::Local:
        emit_mov(dst, vregs_.count(src.name) ? vregs_[src.name]
                                             : vreg(src.name));
        break;
      case ValueKind::ConstInt:
        emit_movimm(dst, src.imm);
        break;
      case ValueKind::Null:
        emit_movimm(dst, 0);
        break;
      case ValueKind::Func:
      case ValueKind::Global:
        emit_adrp(dst, src.name);
        break;
      case ValueKind::None:
        throw LowerError("bad phi operand in " + f_.name);
      }
    }
  }

  int use_count(const std::string &name) const {
    int n = 0;
    for (const BasicBlock &bb : f_.blocks)
      for (const IRInst &in : bb.insts)
        for (const Value &a : in.args)
          if (a.kind == ValueKind::Local && a.name == name)
            ++n;
    return n;
  }

  void lower_block(const BasicBlock &bb) {
    if (&bb != &f_.blocks.front())
      label(block_label(bb.name)); // the entry label is pinned in run()
    for (std::size_t i = 0; i < bb.insts.size(); ++i) {
      const IRInst &in = bb.insts[i];
      // Fuse icmp directly into a following conditional branch when the
      // flag value has no other use.
      if (in.op == Op::Icmp && i + 1 < bb.insts.size()) {
        const IRInst &nx = bb.insts[i + 1];
        if (nx.op == Op::Br && nx.labels.size() == 2 &&
            nx.args.size() == 1 && nx.args[0] == Value::local(in.result) &&
            use_count(in.result) == 1) {
          emit_cmp(in.args[0], in.args[1]);
          run_phi_copies(bb.name);
          emit_bcond(in.pred, block_label(nx.labels[0]));
          emit_b(block_label(nx.labels[1]));
          ++i;
          continue;
        }
      }
      if (is_terminator(in.op))
        run_phi_copies(bb.name);
      lower_inst(in);
    }
  }

  static bool is_terminator(Op op) { return op == Op::Br || op == Op::Ret; }

  void emit_cmp(const Value &a, const Value &b) {
    int rn = materialize(a);
    MachineInst in;
    in.op = MOp::Cmp;
    in.rn = rn;
    if (b.kind == ValueKind::ConstInt) {
      in.imm = b.imm;
    } else if (b.kind == ValueKind::Null) {
      in.imm = 0;
    } else {
      in.rm = materialize(b);
    }
    emit(in);
  }

  void lower_inst(const IRInst &in) {
    switch (in.op) {
    case Op::Mov:
    case Op::Bitcast:
      lower_mov_like(in);
      break;
    case Op::Add:
    case Op::Sub:
      lower_arith(in);
      break;
    case Op::Gep:
      lower_gep(in);
      break;
    case Op::Load:
      lower_load(in);
      break;
    case Op::Store:
      lower_store(in);
      break;
    case Op::Icmp:
      lower_icmp(in);
      break;
    case Op::Br:
      lower_br(in);
      break;
    case Op::Phi:
      vreg(in.result); // value lives in its own register, copies in preds
      break;
    case Op::Call:
      lower_call(in, /*direct=*/true);
      break;
    case Op::CallPtr:
      lower_call(in, /*direct=*/false);
      break;
    case Op::Memcpy:
    case Op::Memmove:
      lower_memcpy(in);
      break;
    case Op::Ret:
      lower_ret(in);
      break;
    case Op::Nop:
      break;
    }
  }

  // Wrap a freshly produced verified pointer into transport form
  // (protected/legacy) or attach a type-hash signature (compat).
  void emit_const_sign(int rd, const Value &src) {
    if (o_.mode == BuildMode::Unprotected)
      return;
    int vc = scratch();
    if (signing_mode()) {
      emit_movimm(vc, std::int64_t(kConstCtx));
      emit_rr(MOp::Pbenc, rd, vc);
    } else {
      emit_movimm(vc, std::int64_t(sig_hash(src)));
      emit_rr(MOp::Pacia, rd, vc);
    }
  }

  void lower_mov_like(const IRInst &in) {
    int rd = vreg(in.result);
    const Value &src = in.args.at(0);
    switch (src.kind) {
    case ValueKind::Local:
      emit_mov(rd, vreg(src.name));
      break;
    case ValueKind::Func:
    case ValueKind::Global:
      emit_adrp(rd, src.name);
      break;
    case ValueKind::ConstInt:
      emit_movimm(rd, src.imm);
      break;
    case ValueKind::Null:
      emit_movimm(rd, 0);
      break;
    case ValueKind::None:
      throw LowerError("bad operand in " + f_.name);
    }
    if (in.stub == "pac_const") {
      emit_const_sign(rd, src);
    } else if (in.stub == "pb_restore") {
      if (o_.mode == BuildMode::Unprotected)
        return;
      int vc = scratch();
      if (signing_mode()) {
        emit_rr(MOp::Pbdec, rd, vc);
        emit_rr(MOp::Autia, rd, vc);
      } else {
        emit_movimm(vc, std::int64_t(sig_hash(src)));
        emit_rr(MOp::Autia, rd, vc);
      }
    }
  }

  void lower_arith(const IRInst &in) {
    int rd = vreg(in.result);
    MachineInst mi;
    mi.op = in.op == Op::Add ? MOp::Add : MOp::Sub;
    mi.rd = rd;
    mi.rn = materialize(in.args.at(0));
    const Value &b = in.args.at(1);
    if (b.kind == ValueKind::ConstInt)
      mi.imm = b.imm;
    else
      mi.rm = materialize(b);
    emit(mi);
    if (in.stub == "pac_const")
      emit_const_sign(rd, in.args.at(0));
  }

  void lower_gep(const IRInst &in) {
    TypeRef base = value_type(m_, f_, in.args.at(0));
    if (base == kNoType || m_.types.at(base).kind != TypeKind::Ptr)
      throw LowerError("gep through untyped pointer in " + f_.name);
    std::vector<int> path;
    for (std::size_t i = 1; i < in.args.size(); ++i)
      path.push_back(int(in.args[i].imm));
    u64 off = offset_of_path(m_.types, m_.types.at(base).pointee, path);
    int rb = materialize(in.args.at(0));
    MachineInst mi;
    mi.op = MOp::Add;
    mi.rd = vreg(in.result);
    mi.rn = rb;
    mi.imm = std::int64_t(off);
    emit(mi);
  }

  void lower_load(const IRInst &in) {
    int ra = materialize(in.args.at(0));
    int rd = vreg(in.result);
    emit_mem(MOp::Ldr, rd, ra, 0);
    if (in.stub != "pac_load" || !signing_mode())
      return;
    int ctx = ra;
    if (in.phys) {
      ctx = scratch();
      emit_movimm(ctx, std::int64_t(kConstCtx));
    }
    if (o_.load_auth)
      emit_rr(MOp::Autia, rd, ctx);
    emit_rr(MOp::Pbenc, rd, ctx);
  }

  void lower_store(const IRInst &in) {
    int rv = materialize(in.args.at(0));
    int ra = materialize(in.args.at(1));
    if (in.stub != "pac_store" || o_.mode == BuildMode::Unprotected) {
      emit_mem(MOp::Str, rv, ra, 0);
      return;
    }
    int rt = scratch();
    emit_mov(rt, rv);
    if (signing_mode()) {
      if (in.phys) {
        // Fixed context: the cell is expected to move (device state save
        // areas and the like), so the address cannot take part.
        int vc = scratch();
        emit_movimm(vc, std::int64_t(kConstCtx));
        emit_rr(MOp::Pacia, rt, vc);
      } else {
        MachineInst mi;
        mi.op = MOp::Pacia;
        mi.rd = rt;
        mi.rn = ra;
        // .st: before keys exist this records the cell so pa_init can sign
        // it in place. Only meaningful when the context is the cell address.
        mi.store_record = true;
        emit(mi);
      }
    } else {
      int vc = scratch();
      emit_movimm(vc, std::int64_t(sig_hash(in.args.at(0))));
      emit_rr(MOp::Pacia, rt, vc);
    }
    emit_mem(MOp::Str, rt, ra, 0);
  }

  void lower_icmp(const IRInst &in) {
    int rd = vreg(in.result);
    emit_movimm(rd, 1);
    emit_cmp(in.args.at(0), in.args.at(1));
    std::string done = fresh_label();
    emit_bcond(in.pred, done);
    emit_movimm(rd, 0);
    // A terminator always follows an icmp, so the label lands on whatever
    // comes next in this block.
    label(done);
  }

  void lower_br(const IRInst &in) {
    if (in.labels.size() == 1) {
      emit_b(block_label(in.labels[0]));
      return;
    }
    int rc = materialize(in.args.at(0));
    MachineInst mi;
    mi.op = MOp::Cmp;
    mi.rn = rc;
    mi.imm = 0;
    emit(mi);
    emit_bcond("eq", block_label(in.labels[1]));
    emit_b(block_label(in.labels[0]));
  }

  void lower_call(const IRInst &in, bool direct) {
    if (in.args.size() > 5)
      throw LowerError("call with more than 4 arguments in " + f_.name);
    // Arguments first: the callee register is read before r0..r3 are set
    // up, so the two never clash.
    std::vector<int> argregs;
    for (std::size_t i = 1; i < in.args.size(); ++i)
      argregs.push_back(materialize(in.args[i]));
    int rf = -1;
    if (!direct)
      rf = materialize(in.args.at(0));
    for (std::size_t i = 0; i < argregs.size(); ++i)
      emit_mov(int(i), argregs[i]);
    if (direct) {
      emit_bl(in.args.at(0).name);
    } else if (in.stub == "pac_call" &&
               o_.mode != BuildMode::Unprotected) {
      int va = scratch_pair();
      int vb = scratch_pair();
      emit_mov(va, rf);
      if (signing_mode()) {
        emit_rr(MOp::Pbdec, va, vb);
      } else {
        emit_movimm(vb, std::int64_t(sig_hash(in.args.at(0))));
      }
      MachineInst mi;
      mi.op = MOp::Blraa;
      mi.rd = va;
      mi.rn = vb;
      emit(mi);
      has_call_ = true;
    } else {
      MachineInst mi;
      mi.op = MOp::Blr;
      mi.rd = rf;
      emit(mi);
      has_call_ = true;
    }
    if (!in.result.empty())
      emit_mov(vreg(in.result), 0);
  }

  void lower_memcpy(const IRInst &in) {
    int a0 = materialize(in.args.at(0));
    int a1 = materialize(in.args.at(1));
    int a2 = materialize(in.args.at(2));
    emit_mov(0, a0);
    emit_mov(1, a1);
    emit_mov(2, a2);
    bool resign = in.stub == "pac_memcpy" && signing_mode();
    emit_bl(resign ? "pac_memcpy" : "memcpy");
  }

  void lower_ret(const IRInst &in) {
    if (!in.args.empty() && in.args[0].kind != ValueKind::None) {
      int rv = materialize(in.args[0]);
      emit_mov(0, rv);
    }
    MachineInst mi;
    mi.op = MOp::Ret; // placeholder, replaced by the epilogue expansion
    emit(mi);
  }

  //===--- linear scan -----------------------------------------------------===//

  struct Range {
    int vr;
    int first;
    int last;
  };

  void allocate() {
    std::map<int, std::pair<int, int>> ranges; // vr -> [first,last]
    auto touch = [&](int r, int pos) {
      if (r < kVRegBase)
        return;
      auto it = ranges.find(r);
      if (it == ranges.end())
        ranges[r] = {pos, pos};
      else {
        it->second.first = std::min(it->second.first, pos);
        it->second.second = std::max(it->second.second, pos);
      }
    };
    std::map<std::string, int> label_pos;
    for (std::size_t i = 0; i < body_.size(); ++i)
      for (const auto &l : body_[i].labels)
        label_pos[l.name] = int(i);
    for (std::size_t i = 0; i < body_.size(); ++i) {
      const MachineInst &in = body_[i].inst;
      touch(in.rd, int(i));
      touch(in.rn, int(i));
      touch(in.rm, int(i));
    }
    // Loop bodies: a value live anywhere inside a backward branch's span is
    // live across the whole span.
    std::vector<std::pair<int, int>> backedges;
    for (std::size_t i = 0; i < body_.size(); ++i) {
      const MachineInst &in = body_[i].inst;
      if (in.op != MOp::B && in.op != MOp::BCond)
        continue;
      auto it = label_pos.find(in.sym);
      if (it != label_pos.end() && it->second <= int(i))
        backedges.push_back({it->second, int(i)});
    }
    bool grew = true;
    while (grew) {
      grew = false;
      for (auto &[vr, r] : ranges)
        for (auto [t, s] : backedges)
          if (r.first <= s && r.second >= t &&
              (r.first > t || r.second < s)) {
            r.first = std::min(r.first, t);
            r.second = std::max(r.second, s);
            grew = true;
          }
    }

    std::vector<Range> order;
    for (auto &[vr, r] : ranges)
      order.push_back({vr, r.first, r.second});
    std::sort(order.begin(), order.end(), [](const Range &a, const Range &b) {
      return a.first != b.first ? a.first < b.first : a.vr < b.vr;
    });

    std::map<int, int> assign;           // vr -> phys
    std::map<int, int> active;           // phys -> last pos
    auto take = [&](int lo, int hi, int pos) {
      for (auto it = active.begin(); it != active.end();) {
        if (it->second < pos)
          it = active.erase(it);
        else
          ++it;
      }
      for (int r = lo; r <= hi; ++r)
        if (!active.count(r))
          return r;
      return -1;
    };
    for (const Range &r : order) {
      bool pair = pair_class_.count(r.vr) != 0;
      int phys = take(pair ? kPairFirst : kPoolFirst, kPoolLast, r.first);
      if (phys < 0)
        throw LowerError("register pressure in " + f_.name +
                         ": more than 25 values live at once");
      assign[r.vr] = phys;
      active[phys] = r.last;
      used_pool_.insert(phys);
    }
    for (auto &it : body_) {
      MachineInst &in = it.inst;
      auto fix = [&](int &r) {
        if (r >= kVRegBase)
          r = assign.at(r);
      };
      fix(in.rd);
      fix(in.rn);
      fix(in.rm);
    }
  }

  //===--- prologue and epilogue --------------------------------------------===//

  std::vector<MachineProgram::Item> frame() {
    std::vector<int> saves;
    if (has_call_)
      saves.push_back(kLr);
    for (int r : used_pool_)
      saves.push_back(r);
    std::int64_t fsz = std::int64_t(align_up(8 * saves.size(), 16));
    bool sign_ret = protected_returns() && has_call_;

    std::vector<MachineInst> pro, epi;
    auto push = [](std::vector<MachineInst> &v, MachineInst in) {
      v.push_back(std::move(in));
    };
    if (sign_ret) {
      MachineInst in;
      in.op = MOp::Paciasp;
      push(pro, in);
    }
    if (!saves.empty()) {
      MachineInst sub;
      sub.op = MOp::Sub;
      sub.rd = kSp;
      sub.rn = kSp;
      sub.imm = fsz;
      push(pro, sub);
      for (std::size_t i = 0; i < saves.size(); i += 2) {
        MachineInst in;
        in.rn = kSp;
        in.imm = std::int64_t(8 * i);
        if (i + 1 < saves.size()) {
          in.op = MOp::Stp;
          in.rd = saves[i];
          in.rm = saves[i + 1];
        } else {
          in.op = MOp::Str;
          in.rd = saves[i];
        }
        push(pro, in);
      }
      for (std::size_t i = 0; i < saves.size(); i += 2) {
        MachineInst in;
        in.rn = kSp;
        in.imm = std::int64_t(8 * i);
        if (i + 1 < saves.size()) {
          in.op = MOp::Ldp;
          in.rd = saves[i];
          in.rm = saves[i + 1];
        } else {
          in.op = MOp::Ldr;
          in.rd = saves[i];
        }
        push(epi, in);
      }
      MachineInst add;
      add.op = MOp::Add;
      add.rd = kSp;
      add.rn = kSp;
      add.imm = fsz;
      push(epi, add);
    }
    if (sign_ret && o_.mode == BuildMode::Legacy) {
      MachineInst in;
      in.op = MOp::Autiasp;
      push(epi, in);
    }
    MachineInst ret;
    ret.op = sign_ret && o_.mode != BuildMode::Legacy ? MOp::Retaa : MOp::Ret;
    push(epi, ret);

    std::vector<MachineProgram::Item> out;
    bool first = true;
    for (auto &it : body_) {
      std::vector<MachineProgram::Label> labels = std::move(it.labels);
      if (first) {
        for (const MachineInst &in : pro) {
          out.push_back({std::move(labels), in});
          labels.clear();
        }
        first = false;
      }
      if (it.inst.op == MOp::Ret) {
        for (const MachineInst &in : epi) {
          out.push_back({std::move(labels), in});
          labels.clear();
        }
        continue;
      }
      out.push_back({std::move(labels), std::move(it.inst)});
    }
    return out;
  }
};

inline void emit_data(const IRModule &m, BuildMode mode, MachineProgram &p) {
  auto fn_hash = [&](const std::string &name) {
    const IRFunction *fn = m.func(name);
    std::string sig = fn ? fn_signature(m, *fn) : std::string("?");
    return fnv1a64("fn(" + sig + ")");
  };
  for (const IRGlobal &g : m.globals) {
    p.globals.push_back({g.name, type_size(m.types, g.type)});
    // Walk the initializer against the type shape, emitting one record per
    // non-zero leaf. A list under a union initializes its first member.
    auto walk = [&](auto &&self, const InitNode &n, TypeRef t,
                    u64 off) -> void {
      switch (n.kind) {
      case InitNode::Kind::Zero:
      case InitNode::Kind::Null:
        return;
      case InitNode::Kind::Int:
        if (n.value != 0)
          p.words.push_back({g.name, off, u64(n.value)});
        return;
      case InitNode::Kind::Fn: {
        MachineProgram::FnWord f;
        f.global = g.name;
        f.off = off;
        f.fn = n.fn;
        switch (mode) {
        case BuildMode::Protected:
        case BuildMode::Legacy:
          f.ctx = MachineProgram::PatchCtx::Addr;
          break;
        case BuildMode::Compat:
          f.ctx = MachineProgram::PatchCtx::Hash;
          f.hash = fn_hash(n.fn);
          break;
        case BuildMode::Unprotected:
          f.ctx = MachineProgram::PatchCtx::None;
          break;
        }
        p.fnwords.push_back(f);
        return;
      }
      case InitNode::Kind::List: {
        const IRType &ty = m.types.at(t);
        if (ty.kind == TypeKind::Array) {
          u64 esz = type_size(m.types, ty.elem);
          for (std::size_t i = 0; i < n.elems.size(); ++i)
            self(self, n.elems[i], ty.elem, off + esz * i);
        } else if (ty.kind == TypeKind::Struct) {
          for (std::size_t i = 0; i < n.elems.size(); ++i)
            self(self, n.elems[i], ty.fields.at(i).type,
                 off + field_offset(m.types, t, i));
        } else if (ty.kind == TypeKind::Union) {
          if (!n.elems.empty())
            self(self, n.elems[0], ty.fields.at(0).type, off);
        } else {
          throw LowerError("initializer list for scalar global @" + g.name);
        }
        return;
      }
      }
    };
    walk(walk, g.init, g.type, 0);
  }
}

} // namespace lowerdetail

inline MachineProgram lower_module(const IRModule &mod, const BuildOptions &o) {
  // Lowering consults value types throughout.
  IRModule m = mod;
  infer_value_types(m);

  MachineProgram p;
  p.mode = build_mode_name(o.mode);
  for (const std::string &fn : address_taken(m)) {
    if (!m.func(fn))
      throw LowerError("address taken of unknown function @" + fn);
    p.fn_index.push_back(fn);
  }

  // Boot stub. Init code runs before keys exist, then pa_init signs every
  // recorded cell, the init region is retired, and control enters main.
  {
    auto bl = [&](const std::string &t) {
      MachineInst in;
      in.op = MOp::Bl;
      in.sym = t;
      return in;
    };
    MachineProgram::Item first;
    first.labels.push_back({"_start", true});
    bool any = false;
    for (const IRFunction &f : m.funcs)
      if (f.init_text) {
        MachineProgram::Item it;
        it.inst = bl(f.name);
        if (!any) {
          it.labels = first.labels;
          any = true;
        }
        p.text.push_back(std::move(it));
      }
    MachineProgram::Item painit;
    painit.inst = bl("pa_init");
    if (!any)
      painit.labels = first.labels;
    p.text.push_back(std::move(painit));
    MachineInst sfi;
    sfi.op = MOp::SysFreeInit;
    p.text.push_back({{}, sfi});
    if (!m.func("main"))
      throw LowerError("module has no main function");
    p.text.push_back({{}, bl("main")});
    MachineInst h;
    h.op = MOp::Halt;
    p.text.push_back({{}, h});
  }

  for (const IRFunction &f : m.funcs) {
    lowerdetail::FnLower fl(m, f, o);
    auto items = fl.run();
    auto &sect = f.init_text ? p.init_text : p.text;
    for (auto &it : items)
      sect.push_back(std::move(it));
  }

  // Builtin entry points. Calls to these labels are handled natively; the
  // ret bodies only exist so the labels land on fetchable instructions.
  for (const char *name : {"pa_init", "memcpy", "pac_memcpy"}) {
    MachineProgram::Item it;
    it.labels.push_back({name, true});
    it.inst.op = MOp::Ret;
    p.text.push_back(std::move(it));
  }

  // Interrupt entry: four cycles of nothing, state handling is the
  // machine's job.
  {
    MachineProgram::Item it;
    it.labels.push_back({"irq_handler", true});
    it.inst.op = MOp::Nop;
    p.irq_text.push_back(it);
    MachineProgram::Item nop;
    nop.inst.op = MOp::Nop;
    p.irq_text.push_back(nop);
    p.irq_text.push_back(nop);
    p.irq_text.push_back(nop);
  }

  lowerdetail::emit_data(m, o.mode, p);
  assign_layout(p);
  return p;
}

} // namespace pacter
