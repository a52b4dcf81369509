//===- instrument.hpp - protection stub insertion ---------------*- C++ -*-===//
//
// SPDX-License-Identifier: Apache-2.0
//
// Rewrites a module so that every value the analysis marked as a function
// pointer is carried in an authenticated form at machine level. The pass
// only tags instructions with a stub name (and inserts a few carrier movs);
// the lowering expands each stub into its machine sequence.
//
// Stubs:
//   pac_store   store of an fp cell: sign with the cell address as context
//   pac_load    load of an fp cell: authenticate, then re-wrap for transport
//   pac_call    indirect call through a transported fp
//   pac_const   materialize a function symbol (or annotated arithmetic
//               result) as a transported fp with the constant context
//   pb_restore  unwrap a transported fp back to a raw address for compares
//   pac_memcpy  bulk copy over a region that contains fp cells
//
// Accesses annotated [phys] alias the cell through a second mapping, so the
// cell address cannot serve as context; those sign and check with the
// constant context instead.
//
// The pass is idempotent: tagged instructions are skipped and inserted
// carriers never match a rewrite pattern again.
//
//===----------------------------------------------------------------------===//

#pragma once

#include "fp_analysis.hpp"
#include "ir.hpp"

#include <set>
#include <string>
#include <vector>

namespace pacter {

struct InstrumentError : std::runtime_error {
  explicit InstrumentError(const std::string &m) : std::runtime_error(m) {}
};

struct InstrumentStats {
  int pac_store = 0;
  int pac_load = 0;
  int pac_call = 0;
  int pac_const = 0;
  int pb_restore = 0;
  int pac_memcpy = 0;

  int total() const {
    return pac_store + pac_load + pac_call + pac_const + pb_restore +
           pac_memcpy;
  }
};

namespace detail {

class Instrumenter {
public:
  Instrumenter(IRModule &m, const AnalysisResult &r) : m_(m), r_(r) {}

  InstrumentStats run() {
    for (IRFunction &f : m_.funcs) {
      used_.clear();
      for (const BasicBlock &bb : f.blocks)
        for (const IRInst &in : bb.insts)
          if (!in.result.empty())
            used_.insert(in.result);
      hoist_phi_fn_args(f);
      // Tag in place first: the callee-def scan must see stable vectors.
      for (BasicBlock &bb : f.blocks)
        tag_block(f, bb);
      for (BasicBlock &bb : f.blocks)
        insert_carriers(f, bb);
    }
    infer_value_types(m_);
    return stats_;
  }

private:
  std::optional<int> lvl(const IRFunction &f, const Value &v) const {
    if (v.kind == ValueKind::Local)
      return r_.fpset.level(f.name, "%" + v.name);
    if (v.kind == ValueKind::Global)
      return r_.fpset.level("", "@" + v.name);
    return std::nullopt;
  }

  const IRInst *def_of(const IRFunction &f, const std::string &name) const {
    for (const BasicBlock &bb : f.blocks)
      for (const IRInst &in : bb.insts)
        if (in.result == name)
          return &in;
    return nullptr;
  }

  std::string fresh(const IRFunction &, const char *base) {
    std::string n;
    do {
      n = std::string(base) + std::to_string(counter_++);
    } while (used_.count(n));
    used_.insert(n);
    return n;
  }

  IRInst carrier_mov(const std::string &result, const Value &src,
                     const char *stub, int line) {
    IRInst mv;
    mv.op = Op::Mov;
    mv.result = result;
    mv.args.push_back(src);
    mv.stub = stub;
    mv.line = line;
    return mv;
  }

  // A phi whose value is an fp cannot take a bare function symbol: the
  // symbol must enter transported form in the predecessor block.
  void hoist_phi_fn_args(IRFunction &f) {
    for (BasicBlock &bb : f.blocks) {
      for (IRInst &in : bb.insts) {
        if (in.op != Op::Phi || lvl(f, Value::local(in.result)) != 0)
          continue;
        for (std::size_t i = 0; i < in.args.size(); ++i) {
          if (in.args[i].kind != ValueKind::Func)
            continue;
          BasicBlock *pred = nullptr;
          for (BasicBlock &cand : f.blocks)
            if (cand.name == in.labels[i])
              pred = &cand;
          if (!pred || pred->insts.empty())
            continue;
          std::string tmp = fresh(f, "pacc");
          pred->insts.insert(pred->insts.end() - 1,
                             carrier_mov(tmp, in.args[i], "pac_const",
                                         in.line));
          in.args[i] = Value::local(tmp);
          ++stats_.pac_const;
        }
      }
    }
  }

  // True when the value reaching this operand is in transported form and a
  // raw address is needed instead. A value that already went through a
  // restore carrier is raw.
  bool needs_restore(const IRFunction &f, const Value &v) const {
    if ((v.kind != ValueKind::Local && v.kind != ValueKind::Global) ||
        lvl(f, v) != 0)
      return false;
    if (v.kind == ValueKind::Local)
      if (const IRInst *d = def_of(f, v.name))
        if (d->stub == "pb_restore")
          return false;
    return true;
  }

  void tag_block(IRFunction &f, BasicBlock &bb) {
    for (IRInst &in : bb.insts) {
      if (!in.stub.empty())
        continue;
      switch (in.op) {
      case Op::Store:
        if (lvl(f, in.args[1]) == 1) {
          in.stub = "pac_store";
          ++stats_.pac_store;
        }
        break;
      case Op::Load:
        if (lvl(f, Value::local(in.result)) == 0) {
          in.stub = "pac_load";
          ++stats_.pac_load;
        }
        break;
      case Op::CallPtr:
        in.stub = "pac_call";
        ++stats_.pac_call;
        tag_callee_def(f, in);
        break;
      case Op::Memcpy:
      case Op::Memmove: {
        TypeRef t = value_type(m_, f, in.args[0]);
        if (t != kNoType && m_.types.at(t).kind == TypeKind::Ptr) {
          const IRType &pt = m_.types.at(m_.types.at(t).pointee);
          if ((pt.kind == TypeKind::Struct || pt.kind == TypeKind::Union) &&
              r_.dag.any_path_in(pt.name)) {
            in.stub = "pac_memcpy";
            ++stats_.pac_memcpy;
          }
        }
        break;
      }
      default:
        break;
      }
    }
  }

  void insert_carriers(IRFunction &f, BasicBlock &bb) {
    std::vector<IRInst> out;
    out.reserve(bb.insts.size());
    for (IRInst &in : bb.insts) {
      switch (in.op) {
      case Op::CallPtr:
      case Op::Call:
        wrap_fn_symbol_args(f, out, in, 1);
        break;
      case Op::Icmp:
        for (Value &v : in.args) {
          if (!needs_restore(f, v))
            continue;
          std::string tmp = fresh(f, "pacr");
          out.push_back(carrier_mov(tmp, v, "pb_restore", in.line));
          v = Value::local(tmp);
          ++stats_.pb_restore;
        }
        break;
      default:
        break;
      }
      // Copy rather than move: the def scans above must keep seeing the
      // block's original instructions while the rebuilt list grows.
      out.push_back(in);
    }
    bb.insts = std::move(out);
  }

  // The value feeding an indirect call must be transported. Loads already
  // are; a symbol mov or an annotated address computation is tagged here.
  void tag_callee_def(IRFunction &f, const IRInst &call) {
    const Value &callee = call.args[0];
    if (callee.kind != ValueKind::Local)
      return;
    for (BasicBlock &bb : f.blocks)
      for (IRInst &d : bb.insts) {
        if (d.result != callee.name || !d.stub.empty())
          continue;
        if ((d.op == Op::Mov || d.op == Op::Bitcast) &&
            d.args[0].kind == ValueKind::Func) {
          d.stub = "pac_const";
          ++stats_.pac_const;
        } else if (d.op == Op::Add || d.op == Op::Sub) {
          if (!d.constant_ctx)
            throw InstrumentError(
                "missing annotation: line " + std::to_string(d.line) +
                ": indirect call target computed by arithmetic needs "
                "[constant_ctx]");
          d.stub = "pac_const";
          ++stats_.pac_const;
        }
      }
  }

  // A bare function symbol passed where the receiver expects a transported
  // fp gets a carrier mov in front of the call.
  void wrap_fn_symbol_args(IRFunction &f, std::vector<IRInst> &out,
                           IRInst &call, std::size_t first_arg) {
    const IRFunction *callee = nullptr;
    if (call.op == Op::Call)
      callee = m_.func(call.args[0].name);
    for (std::size_t i = first_arg; i < call.args.size(); ++i) {
      if (call.args[i].kind != ValueKind::Func)
        continue;
      bool expects_fp = true;
      if (callee && i - first_arg < callee->params.size())
        expects_fp = r_.fpset
                         .level(callee->name,
                                "%" + callee->params[i - first_arg].name)
                         .has_value();
      if (!expects_fp)
        continue;
      std::string tmp = fresh(f, "pacc");
      out.push_back(carrier_mov(tmp, call.args[i], "pac_const", call.line));
      call.args[i] = Value::local(tmp);
      ++stats_.pac_const;
    }
  }

  IRModule &m_;
  const AnalysisResult &r_;
  InstrumentStats stats_;
  std::set<std::string> used_;
  int counter_ = 0;
};

} // namespace detail

// Tag every fp-bearing instruction with its protection stub. Mutates the
// module in place and refreshes inferred value types.
inline InstrumentStats instrument_module(IRModule &m,
                                         const AnalysisResult &r) {
  return detail::Instrumenter(m, r).run();
}

// Stub histogram of an already-processed module, for reports and tests.
inline InstrumentStats count_stubs(const IRModule &m) {
  InstrumentStats s;
  for (const IRFunction &f : m.funcs)
    for (const BasicBlock &bb : f.blocks)
      for (const IRInst &in : bb.insts) {
        if (in.stub == "pac_store")
          ++s.pac_store;
        else if (in.stub == "pac_load")
          ++s.pac_load;
        else if (in.stub == "pac_call")
          ++s.pac_call;
        else if (in.stub == "pac_const")
          ++s.pac_const;
        else if (in.stub == "pb_restore")
          ++s.pb_restore;
        else if (in.stub == "pac_memcpy")
          ++s.pac_memcpy;
      }
  return s;
}

} // namespace pacter
