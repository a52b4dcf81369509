// SPDX-License-Identifier: Apache-2.0
//
// Test-side reference implementations. These are written independently of
// the library headers on purpose: the unit and acceptance suites compare
// library output against these plus values frozen from one-off scripts.

#pragma once

#include "pacter/ir.hpp"

#include <algorithm>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace oracle {

// Reference PRF. Anchored by three vectors computed with a standalone
// python script before the library existed:
//   key=(0x0123456789ABCDEF,0xFEDCBA9876543210)
//     ptr=0xFFFFE00000010000 ctx=0xFFFFE00000100008
//     -> prf 0xF753754E344BE0B7, pac 0x37
//   key=(1,2) same ptr/ctx -> prf 0xD74A3C5A512D0B90, pac 0x10
//   key=(0xD6E8FEB86659FD93,0x9E3779B97F4A7C15)
//     ptr=0xFFFFFFFFFFFFFFF8 ctx=0
//     -> prf 0xD0E6CE2FEAE5A8B7, pac 0x37
inline std::uint64_t prf_reference(std::uint64_t key_hi, std::uint64_t key_lo,
                                   std::uint64_t ptr, std::uint64_t ctx) {
  const std::uint64_t gold = 0x9E3779B97F4A7C15ull;
  auto rol = [](std::uint64_t v, int k) {
    return (v << k) | (v >> (64 - k));
  };
  std::uint64_t state = ptr ^ key_lo;
  int rounds = 4;
  while (rounds-- > 0) {
    state = rol(state * gold, 23);
    state ^= ctx;
    state ^= key_hi;
    state = rol(state, 17);
    state += key_lo;
  }
  return state ^ (state >> 32);
}

inline std::uint8_t pac_reference(std::uint64_t key_hi, std::uint64_t key_lo,
                                  std::uint64_t ptr, std::uint64_t ctx) {
  return std::uint8_t(prf_reference(key_hi, key_lo, ptr, ctx) & 0x7F);
}

// Brute-force fp identification. Consumes the parsed IR structures but
// recomputes the result its own way: every (function, instruction) pair goes
// into one flat list, the list is shuffled each pass, and single-rule
// applications repeat until a full pass changes nothing. For conflict-free
// programs the rules are monotone, so any visit order reaches the same
// least fixpoint; comparing several shuffle seeds against the library's
// structured sweeps checks both the rules and the order-independence claim.
struct FpFacts {
  std::map<std::pair<std::string, std::string>, int> levels;
  std::set<std::pair<std::string, std::vector<int>>> paths;
};

namespace brute {

inline int fp_depth(const pacter::TypeTable &tt, pacter::TypeRef r) {
  if (r == pacter::kNoType)
    return -1;
  int d = 0;
  while (tt.at(r).kind == pacter::TypeKind::Ptr && d <= 4) {
    r = tt.at(r).pointee;
    ++d;
  }
  if (tt.at(r).kind != pacter::TypeKind::FnPtr)
    return -1;
  return d > 3 ? 3 : d;
}

inline bool path_matches(const std::vector<int> &stored,
                         const std::vector<int> &probe) {
  if (stored.size() != probe.size())
    return false;
  for (std::size_t i = 0; i < stored.size(); ++i)
    if (stored[i] != -1 && stored[i] != probe[i])
      return false;
  return true;
}

inline bool have_path(const FpFacts &ff, const std::string &ty,
                      const std::vector<int> &probe) {
  for (const auto &p : ff.paths)
    if (p.first == ty && path_matches(p.second, probe))
      return true;
  return false;
}

inline void seed_decl_paths(const pacter::IRModule &m, FpFacts &ff) {
  using namespace pacter;
  // Iterative: (type under the root, prefix) stack per named root.
  for (TypeRef root : m.types.named_order()) {
    const std::string &rname = m.types.at(root).name;
    std::vector<std::pair<TypeRef, std::vector<int>>> work{{root, {}}};
    int guard = 0;
    while (!work.empty()) {
      if (++guard > 4096)
        throw std::runtime_error("type walk did not terminate");
      auto [t, pre] = work.back();
      work.pop_back();
      const IRType &ty = m.types.at(t);
      if (ty.kind == TypeKind::FnPtr && !pre.empty())
        ff.paths.insert({rname, pre});
      else if (ty.kind == TypeKind::Struct || ty.kind == TypeKind::Union)
        for (std::size_t i = 0; i < ty.fields.size(); ++i) {
          auto p = pre;
          p.push_back(int(i));
          work.push_back({ty.fields[i].type, p});
        }
      else if (ty.kind == TypeKind::Array) {
        auto p = pre;
        p.push_back(-1);
        work.push_back({ty.elem, p});
      }
    }
  }
}

inline void seed_globals(const pacter::IRModule &m, bool width_rule,
                         FpFacts &ff) {
  using namespace pacter;
  for (const IRGlobal &g : m.globals) {
    if (int d = fp_depth(m.types, g.type); d >= 0)
      ff.levels.insert({{"", "@" + g.name}, d + 1 > 3 ? 3 : d + 1});
    // Fn leaves anywhere in the initializer.
    struct Item {
      const InitNode *n;
      TypeRef t;
      std::vector<int> path;
    };
    std::vector<Item> work{{&g.init, g.type, {}}};
    while (!work.empty()) {
      Item it = work.back();
      work.pop_back();
      const IRType &ty = m.types.at(it.t);
      if (it.n->kind == InitNode::Kind::Fn) {
        ff.levels.insert({{"", "@" + g.name}, 1});
        const IRType &gt = m.types.at(g.type);
        bool named_agg =
            gt.kind == TypeKind::Struct || gt.kind == TypeKind::Union;
        if (named_agg && !it.path.empty()) {
          bool allow = true;
          if (gt.kind == TypeKind::Union && width_rule)
            allow = it.path.size() == 1 &&
                    gt.fields.at(std::size_t(it.path[0])).align == 8;
          if (allow)
            ff.paths.insert({gt.name, it.path});
        }
      } else if (it.n->kind == InitNode::Kind::List) {
        for (std::size_t i = 0; i < it.n->elems.size(); ++i) {
          std::size_t fi = ty.kind == TypeKind::Union ? 0 : i;
          TypeRef et = kNoType;
          if (ty.kind == TypeKind::Struct || ty.kind == TypeKind::Union)
            et = ty.fields.at(fi).type;
          else if (ty.kind == TypeKind::Array)
            et = ty.elem;
          else
            break;
          auto p = it.path;
          p.push_back(int(fi));
          work.push_back({&it.n->elems[i], et, p});
        }
      }
    }
  }
}

} // namespace brute

inline FpFacts analyze_brute(const pacter::IRModule &m, bool width_rule,
                             unsigned seed) {
  using namespace pacter;
  FpFacts ff;
  brute::seed_decl_paths(m, ff);
  brute::seed_globals(m, width_rule, ff);

  auto get = [&](const std::string &scope, const std::string &name) -> int {
    auto it = ff.levels.find({scope, name});
    return it == ff.levels.end() ? -9 : it->second;
  };
  // First write wins; later different writes are the conflict case, which
  // the comparison corpus avoids.
  auto put = [&](const std::string &scope, const std::string &name,
                 int lvl) -> bool {
    if (lvl > 3)
      lvl = 3;
    if (ff.levels.count({scope, name}))
      return false;
    ff.levels[{scope, name}] = lvl;
    return true;
  };
  auto vname = [](const Value &v) -> std::string {
    if (v.name.empty())
      return "";
    if (v.kind == ValueKind::Local)
      return "%" + v.name;
    if (v.kind == ValueKind::Global)
      return "@" + v.name;
    return "";
  };
  auto vlevel = [&](const IRFunction *f, const Value &v) -> int {
    if (v.kind == ValueKind::Func)
      return 0;
    std::string n = vname(v);
    if (n.empty())
      return -9;
    return get(v.kind == ValueKind::Local ? f->name : "", n);
  };
  auto vput = [&](const IRFunction *f, const Value &v, int lvl) -> bool {
    std::string n = vname(v);
    if (n.empty())
      return false;
    return put(v.kind == ValueKind::Local ? f->name : "", n, lvl);
  };

  // gep helpers
  auto gep_root = [&](const IRFunction *f,
                      const IRInst *gep) -> const IRType * {
    TypeRef base = value_type(m, *f, gep->args[0]);
    if (base == kNoType || m.types.at(base).kind != TypeKind::Ptr)
      return nullptr;
    const IRType &rt = m.types.at(m.types.at(base).pointee);
    if (rt.kind != TypeKind::Struct && rt.kind != TypeKind::Union)
      return nullptr;
    return &rt;
  };
  auto gep_ixs = [](const IRInst *gep) {
    std::vector<int> p;
    for (std::size_t i = 1; i < gep->args.size(); ++i)
      p.push_back(int(gep->args[i].imm));
    return p;
  };
  auto gep_bits = [&](const IRFunction *f, const IRInst *gep) -> unsigned {
    TypeRef base = value_type(m, *f, gep->args[0]);
    if (base == kNoType || m.types.at(base).kind != TypeKind::Ptr)
      return 64;
    try {
      TypeRef ft =
          type_of_path(m.types, m.types.at(base).pointee, gep_ixs(gep));
      return unsigned(type_size(m.types, ft) * 8);
    } catch (const std::exception &) {
      return 64;
    }
  };

  std::vector<std::pair<const IRFunction *, const IRInst *>> items;
  std::map<std::pair<std::string, std::string>, const IRInst *> defs;
  for (const IRFunction &f : m.funcs)
    for (const BasicBlock &bb : f.blocks)
      for (const IRInst &in : bb.insts) {
        items.push_back({&f, &in});
        if (!in.result.empty())
          defs[{f.name, in.result}] = &in;
      }

  auto apply = [&](const IRFunction *f, const IRInst *in) -> bool {
    bool ch = false;
    auto seed_typed = [&](const Value &v) {
      if (v.kind != ValueKind::Local && v.kind != ValueKind::Global)
        return;
      int d = brute::fp_depth(m.types, value_type(m, *f, v));
      if (d >= 0)
        ch |= vput(f, v, d);
    };
    for (const Value &a : in->args)
      seed_typed(a);
    Value res = Value::local(in->result);
    if (!in->result.empty())
      seed_typed(res);

    if (in->op == Op::Bitcast || in->op == Op::Mov) {
      int la = vlevel(f, in->args[0]), lr = vlevel(f, res);
      if (la != -9 && lr == -9)
        ch |= vput(f, res, la);
      if (lr != -9 && la == -9)
        ch |= vput(f, in->args[0], lr);
    } else if (in->op == Op::Icmp) {
      int l0 = vlevel(f, in->args[0]), l1 = vlevel(f, in->args[1]);
      if (l0 == 0 && l1 == -9)
        ch |= vput(f, in->args[1], 0);
      if (l1 == 0 && l0 == -9)
        ch |= vput(f, in->args[0], 0);
    } else if (in->op == Op::Phi) {
      int lvl = vlevel(f, res);
      for (const Value &a : in->args)
        if (lvl == -9)
          lvl = vlevel(f, a);
      if (lvl != -9) {
        for (const Value &a : in->args)
          ch |= vput(f, a, lvl);
        ch |= vput(f, res, lvl);
      }
    } else if (in->op == Op::Store) {
      int lv = vlevel(f, in->args[0]), la = vlevel(f, in->args[1]);
      if (lv != -9)
        ch |= vput(f, in->args[1], lv + 1);
      if (la >= 1)
        ch |= vput(f, in->args[0], la - 1);
      if (vlevel(f, in->args[0]) == 0 &&
          in->args[1].kind == ValueKind::Local) {
        auto dit = defs.find({f->name, in->args[1].name});
        if (dit != defs.end() && dit->second->op == Op::Gep) {
          const IRInst *gp = dit->second;
          if (const IRType *rt = gep_root(f, gp)) {
            bool allow = true;
            if (rt->kind == TypeKind::Union && width_rule)
              allow = gep_bits(f, gp) == 64;
            if (allow)
              ch |= ff.paths.insert({rt->name, gep_ixs(gp)}).second;
          }
        }
      }
    } else if (in->op == Op::Load) {
      int la = vlevel(f, in->args[0]), lr = vlevel(f, res);
      if (la >= 1)
        ch |= vput(f, res, la - 1);
      if (lr != -9)
        ch |= vput(f, in->args[0], lr + 1);
    } else if (in->op == Op::Gep) {
      if (const IRType *rt = gep_root(f, in)) {
        std::vector<int> p = gep_ixs(in);
        bool hit;
        if (rt->kind == TypeKind::Union) {
          if (width_rule)
            hit = p.size() == 1 && gep_bits(f, in) == 64 &&
                  rt->fields.at(std::size_t(p[0])).align == 8 &&
                  brute::have_path(ff, rt->name, p);
          else {
            hit = false;
            for (const auto &q : ff.paths)
              if (q.first == rt->name)
                hit = true;
          }
        } else {
          hit = brute::have_path(ff, rt->name, p);
        }
        if (hit)
          ch |= vput(f, res, 1);
      }
    } else if (in->op == Op::Call) {
      if (const IRFunction *callee = m.func(in->args[0].name))
        for (std::size_t i = 1;
             i < in->args.size() && i - 1 < callee->params.size(); ++i) {
          int la = vlevel(f, in->args[i]);
          if (la != -9)
            ch |= put(callee->name, "%" + callee->params[i - 1].name, la);
        }
    } else if (in->op == Op::CallPtr) {
      ch |= vput(f, in->args[0], 0);
    }
    return ch;
  };

  std::mt19937 rng(seed);
  for (int pass = 0; pass < 500; ++pass) {
    std::shuffle(items.begin(), items.end(), rng);
    bool ch = false;
    for (auto &[f, in] : items)
      ch |= apply(f, in);
    if (!ch)
      return ff;
  }
  throw std::runtime_error("brute analysis did not stabilize");
}

} // namespace oracle
