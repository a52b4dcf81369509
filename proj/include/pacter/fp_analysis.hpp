//===- fp_analysis.hpp - function pointer identification -------*- C++ -*-===//
//
// SPDX-License-Identifier: Apache-2.0
//
// Finds every value that holds a function pointer (level 0) or a pointer
// chain leading to one (level n = pointer to a level n-1 value). Three
// sources feed the set: declared types, global initializers, and a
// field-sensitive walk of each function that runs one forward and one
// backward sweep, repeated across the module until nothing changes.
//
// Struct/union fields that hold function pointers are tracked as index
// paths rooted at a named type (the field DAG). A store of a level-0 value
// through a gep teaches the DAG new paths, which is what catches fields
// typed as void* or long.
//
//===----------------------------------------------------------------------===//

#pragma once

#include "ir.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace pacter {

struct AnalysisError : std::runtime_error {
  explicit AnalysisError(const std::string &m) : std::runtime_error(m) {}
};

inline constexpr int kMaxLevel = 3;

// (scope, value) -> pointer level. Scope is the enclosing function name,
// empty for module-scope values. Names keep their sigil: "%x", "@g".
class FPSet {
public:
  using Key = std::pair<std::string, std::string>;

  bool add(const std::string &scope, const std::string &name, int level,
           std::vector<std::string> &diags) {
    if (level > kMaxLevel) {
      note_once(diags, "level cap: " + scope + ":" + name + " collapsed to 3");
      level = kMaxLevel;
    }
    auto it = levels_.find({scope, name});
    if (it == levels_.end()) {
      levels_[{scope, name}] = level;
      return true;
    }
    if (it->second != level)
      note_once(diags, "conflicting levels for " + scope + ":" + name + ": " +
                           std::to_string(it->second) + " vs " +
                           std::to_string(level));
    return false;
  }

  std::optional<int> level(const std::string &scope,
                           const std::string &name) const {
    auto it = levels_.find({scope, name});
    if (it == levels_.end())
      return std::nullopt;
    return it->second;
  }

  const std::map<Key, int> &entries() const { return levels_; }
  std::size_t size() const { return levels_.size(); }

  bool operator==(const FPSet &o) const { return levels_ == o.levels_; }

  // True when every entry of this set appears in o with the same level.
  bool subset_of(const FPSet &o) const {
    for (const auto &[k, v] : levels_) {
      auto it = o.levels_.find(k);
      if (it == o.levels_.end() || it->second != v)
        return false;
    }
    return true;
  }

private:
  static void note_once(std::vector<std::string> &diags,
                        const std::string &msg) {
    if (std::find(diags.begin(), diags.end(), msg) == diags.end())
      diags.push_back(msg);
  }

  std::map<Key, int> levels_;
};

// Function-pointer field paths rooted at named aggregate types. A path
// segment of -1 stands for any array element index.
class FieldDag {
public:
  using Path = std::pair<std::string, std::vector<int>>;

  bool add(const std::string &type_name, const std::vector<int> &path) {
    return paths_.insert({type_name, path}).second;
  }

  bool has(const std::string &type_name, const std::vector<int> &path) const {
    if (paths_.count({type_name, path}))
      return true;
    // Wildcard segments for array elements.
    for (const Path &p : paths_) {
      if (p.first != type_name || p.second.size() != path.size())
        continue;
      bool ok = true;
      for (std::size_t i = 0; i < path.size(); ++i)
        if (p.second[i] != -1 && p.second[i] != path[i]) {
          ok = false;
          break;
        }
      if (ok)
        return true;
    }
    return false;
  }

  bool any_path_in(const std::string &type_name) const {
    for (const Path &p : paths_)
      if (p.first == type_name)
        return true;
    return false;
  }

  const std::set<Path> &paths() const { return paths_; }
  bool operator==(const FieldDag &o) const { return paths_ == o.paths_; }

private:
  std::set<Path> paths_;
};

struct GlobalInitEntry {
  std::string global;
  std::string type_name; // empty for scalar fp globals
  std::vector<int> path;
  std::string fn;
};

struct AnalysisOptions {
  // Distinguish union members by access width: 32-bit members are data even
  // when the union also holds a function pointer. Disabled only by tests.
  bool union_width_heuristic = true;
};

struct AnalysisResult {
  FPSet fpset;
  FieldDag dag;
  std::vector<GlobalInitEntry> global_inits;
  std::vector<std::string> diagnostics;
};

//===----------------------------------------------------------------------===//
// Type-driven seeding
//===----------------------------------------------------------------------===//

// fn(..) -> 0, fn(..)* -> 1, fn(..)** -> 2; anything else: no level.
inline std::optional<int> level_from_type(const TypeTable &tt, TypeRef r) {
  if (r == kNoType)
    return std::nullopt;
  int depth = 0;
  TypeRef cur = r;
  while (tt.at(cur).kind == TypeKind::Ptr && depth <= kMaxLevel) {
    ++depth;
    cur = tt.at(cur).pointee;
  }
  if (tt.at(cur).kind == TypeKind::FnPtr)
    return std::min(depth, kMaxLevel);
  return std::nullopt;
}

//===----------------------------------------------------------------------===//
// Struct walk
//===----------------------------------------------------------------------===//

namespace detail {

inline void walk_type_paths(const TypeTable &tt, const std::string &root,
                            TypeRef cur, std::vector<int> &prefix,
                            std::vector<std::string> &stack, FieldDag &dag) {
  const IRType &t = tt.at(cur);
  if (t.kind == TypeKind::Struct || t.kind == TypeKind::Union) {
    if (std::find(stack.begin(), stack.end(), t.name) != stack.end())
      throw AnalysisError("cyclic type definition through %" + t.name);
    stack.push_back(t.name);
    for (std::size_t i = 0; i < t.fields.size(); ++i) {
      prefix.push_back(int(i));
      walk_type_paths(tt, root, t.fields[i].type, prefix, stack, dag);
      prefix.pop_back();
    }
    stack.pop_back();
    return;
  }
  if (t.kind == TypeKind::Array) {
    prefix.push_back(-1);
    walk_type_paths(tt, root, t.elem, prefix, stack, dag);
    prefix.pop_back();
    return;
  }
  if (t.kind == TypeKind::FnPtr && !prefix.empty())
    dag.add(root, prefix);
}

} // namespace detail

// Declared fp fields of every named type, any by-value nesting depth.
// Throws AnalysisError on a by-value cycle.
inline FieldDag analyze_struct(const IRModule &m) {
  FieldDag dag;
  for (TypeRef r : m.types.named_order()) {
    const IRType &t = m.types.at(r);
    std::vector<int> prefix;
    std::vector<std::string> stack;
    detail::walk_type_paths(m.types, t.name, r, prefix, stack, dag);
  }
  return dag;
}

//===----------------------------------------------------------------------===//
// Global initializers
//===----------------------------------------------------------------------===//

namespace detail {

inline void walk_init(const TypeTable &tt, const IRGlobal &g,
                      const InitNode &n, TypeRef ty, std::vector<int> &path,
                      std::vector<GlobalInitEntry> &out) {
  const IRType &t = tt.at(ty);
  if (n.kind == InitNode::Kind::Fn) {
    const IRType &gt = tt.at(g.type);
    GlobalInitEntry e;
    e.global = g.name;
    if (gt.kind == TypeKind::Struct || gt.kind == TypeKind::Union)
      e.type_name = gt.name;
    e.path = path;
    e.fn = n.fn;
    out.push_back(e);
    return;
  }
  if (n.kind == InitNode::Kind::List) {
    for (std::size_t i = 0; i < n.elems.size(); ++i) {
      std::size_t field_i = t.kind == TypeKind::Union ? 0 : i;
      TypeRef et = kNoType;
      if (t.kind == TypeKind::Struct || t.kind == TypeKind::Union)
        et = t.fields.at(field_i).type;
      else if (t.kind == TypeKind::Array)
        et = t.elem;
      else
        return;
      path.push_back(int(t.kind == TypeKind::Union ? 0 : i));
      walk_init(tt, g, n.elems[i], et, path, out);
      path.pop_back();
    }
  }
}

} // namespace detail

inline std::vector<GlobalInitEntry> analyze_global_fp(const IRModule &m) {
  std::vector<GlobalInitEntry> out;
  for (const IRGlobal &g : m.globals) {
    std::vector<int> path;
    detail::walk_init(m.types, g, g.init, g.type, path, out);
  }
  return out;
}

//===----------------------------------------------------------------------===//
// Per-instruction transfer
//===----------------------------------------------------------------------===//

inline bool union_field_is_fp(const TypeTable &tt, const FieldDag &dag,
                              TypeRef union_ty, int field_index,
                              unsigned access_bits) {
  const IRType &t = tt.at(union_ty);
  if (t.kind != TypeKind::Union)
    return false;
  if (access_bits != 64)
    return false;
  const IRField &f = t.fields.at(std::size_t(field_index));
  if (f.align != 8)
    return false;
  return dag.has(t.name, {field_index});
}

namespace detail {

struct InstCtx {
  const IRModule &m;
  const IRFunction &f;
  const AnalysisOptions &opts;
  FPSet &S;
  FieldDag &dag;
  std::vector<std::string> &diags;
  // def map for gep lookups
  const std::map<std::string, const IRInst *> &defs;
};

inline std::string key_name(const Value &v) {
  if (v.name.empty())
    return "";
  switch (v.kind) {
  case ValueKind::Local:
    return "%" + v.name;
  case ValueKind::Global:
    return "@" + v.name;
  default:
    return "";
  }
}

inline std::string key_scope(const InstCtx &cx, const Value &v) {
  return v.kind == ValueKind::Local ? cx.f.name : "";
}

inline std::optional<int> value_level(const InstCtx &cx, const Value &v) {
  if (v.kind == ValueKind::Func)
    return 0; // a function symbol is itself a function pointer
  std::string n = key_name(v);
  if (n.empty())
    return std::nullopt;
  return cx.S.level(key_scope(cx, v), n);
}

inline bool set_level(InstCtx &cx, const Value &v, int level) {
  std::string n = key_name(v);
  if (n.empty())
    return false; // constants and function symbols are not tracked
  return cx.S.add(key_scope(cx, v), n, level, cx.diags);
}

// Equal levels across two values, propagated both ways.
inline bool unify(InstCtx &cx, const Value &a, const Value &b) {
  bool changed = false;
  auto la = value_level(cx, a), lb = value_level(cx, b);
  if (la && !lb)
    changed |= set_level(cx, b, *la);
  else if (lb && !la)
    changed |= set_level(cx, a, *lb);
  return changed;
}

// The gep's (root type name, index path), when the base is a typed pointer
// to a named aggregate.
inline std::optional<std::pair<std::string, std::vector<int>>>
gep_path(const InstCtx &cx, const IRInst &gep) {
  TypeRef base = value_type(cx.m, cx.f, gep.args[0]);
  if (base == kNoType || cx.m.types.at(base).kind != TypeKind::Ptr)
    return std::nullopt;
  TypeRef root = cx.m.types.at(base).pointee;
  const IRType &rt = cx.m.types.at(root);
  if (rt.kind != TypeKind::Struct && rt.kind != TypeKind::Union)
    return std::nullopt;
  std::vector<int> path;
  for (std::size_t i = 1; i < gep.args.size(); ++i)
    path.push_back(int(gep.args[i].imm));
  return std::make_pair(rt.name, path);
}

// Width in bits of the field a gep designates, from the field's type.
inline unsigned gep_field_bits(const InstCtx &cx, const IRInst &gep) {
  TypeRef base = value_type(cx.m, cx.f, gep.args[0]);
  if (base == kNoType || cx.m.types.at(base).kind != TypeKind::Ptr)
    return 64;
  std::vector<int> path;
  for (std::size_t i = 1; i < gep.args.size(); ++i)
    path.push_back(int(gep.args[i].imm));
  try {
    TypeRef ft = type_of_path(cx.m.types, cx.m.types.at(base).pointee, path);
    return unsigned(type_size(cx.m.types, ft) * 8);
  } catch (const std::exception &) {
    return 64;
  }
}

inline bool gep_targets_union(const InstCtx &cx, const IRInst &gep) {
  TypeRef base = value_type(cx.m, cx.f, gep.args[0]);
  if (base == kNoType || cx.m.types.at(base).kind != TypeKind::Ptr)
    return false;
  return cx.m.types.at(cx.m.types.at(base).pointee).kind == TypeKind::Union;
}

inline bool analyze_inst_impl(InstCtx &cx, const IRInst &in) {
  bool changed = false;

  // Type-driven membership for every tracked operand and the result.
  auto seed = [&](const Value &v) {
    if (v.kind != ValueKind::Local && v.kind != ValueKind::Global)
      return;
    auto lt = level_from_type(cx.m.types, value_type(cx.m, cx.f, v));
    if (lt)
      changed |= set_level(cx, v, *lt);
  };
  for (const Value &a : in.args)
    seed(a);
  if (!in.result.empty())
    seed(Value::local(in.result));

  Value res = Value::local(in.result);
  switch (in.op) {
  case Op::Bitcast:
  case Op::Mov:
    changed |= unify(cx, in.args[0], res);
    break;
  case Op::Icmp: {
    auto l0 = value_level(cx, in.args[0]);
    auto l1 = value_level(cx, in.args[1]);
    if (l0 == 0 && !l1)
      changed |= set_level(cx, in.args[1], 0);
    if (l1 == 0 && !l0)
      changed |= set_level(cx, in.args[0], 0);
    break;
  }
  case Op::Phi: {
    std::optional<int> lvl = value_level(cx, res);
    for (const Value &a : in.args)
      if (!lvl)
        lvl = value_level(cx, a);
    if (lvl) {
      for (const Value &a : in.args)
        changed |= set_level(cx, a, *lvl);
      changed |= set_level(cx, res, *lvl);
    }
    break;
  }
  case Op::Store: {
    const Value &v = in.args[0], &a = in.args[1];
    if (auto lv = value_level(cx, v))
      changed |= set_level(cx, a, *lv + 1);
    if (auto la = value_level(cx, a); la && *la >= 1)
      changed |= set_level(cx, v, *la - 1);
    // A level-0 store through a gep marks the field as fp-holding.
    if (value_level(cx, v) == 0 && a.kind == ValueKind::Local) {
      auto it = cx.defs.find(a.name);
      if (it != cx.defs.end() && it->second->op == Op::Gep) {
        if (auto p = gep_path(cx, *it->second)) {
          bool allow = true;
          if (gep_targets_union(cx, *it->second) &&
              cx.opts.union_width_heuristic)
            allow = gep_field_bits(cx, *it->second) == 64;
          if (allow)
            changed |= cx.dag.add(p->first, p->second);
        }
      }
    }
    break;
  }
  case Op::Load: {
    const Value &a = in.args[0];
    if (auto la = value_level(cx, a); la && *la >= 1)
      changed |= set_level(cx, res, *la - 1);
    if (auto lr = value_level(cx, res))
      changed |= set_level(cx, a, *lr + 1);
    break;
  }
  case Op::Gep: {
    auto p = gep_path(cx, in);
    if (!p)
      break;
    bool is_fp_path;
    if (gep_targets_union(cx, in)) {
      if (cx.opts.union_width_heuristic) {
        TypeRef base = value_type(cx.m, cx.f, in.args[0]);
        TypeRef uty = cx.m.types.at(base).pointee;
        is_fp_path = p->second.size() == 1 &&
                     union_field_is_fp(cx.m.types, cx.dag, uty,
                                       p->second[0], gep_field_bits(cx, in));
      } else {
        // Width-blind: any union with an fp member taints every access.
        is_fp_path = cx.dag.any_path_in(p->first);
      }
    } else {
      is_fp_path = cx.dag.has(p->first, p->second);
    }
    if (is_fp_path)
      changed |= set_level(cx, res, 1);
    break;
  }
  case Op::Call: {
    const IRFunction *callee = cx.m.func(in.args[0].name);
    if (!callee)
      break;
    for (std::size_t i = 1;
         i < in.args.size() && i - 1 < callee->params.size(); ++i) {
      const Value &arg = in.args[i];
      std::optional<int> la = value_level(cx, arg);
      if (la)
        changed |= cx.S.add(callee->name, "%" + callee->params[i - 1].name,
                            *la, cx.diags);
    }
    break;
  }
  case Op::CallPtr:
    changed |= set_level(cx, in.args[0], 0);
    break;
  default:
    break;
  }
  return changed;
}

} // namespace detail

inline bool analyze_inst(const IRModule &m, const IRFunction &f,
                         const IRInst &in, const AnalysisOptions &opts,
                         FPSet &S, FieldDag &dag,
                         std::vector<std::string> &diags,
                         const std::map<std::string, const IRInst *> &defs) {
  detail::InstCtx cx{m, f, opts, S, dag, diags, defs};
  return detail::analyze_inst_impl(cx, in);
}

inline std::map<std::string, const IRInst *> def_map(const IRFunction &f) {
  std::map<std::string, const IRInst *> defs;
  for (const BasicBlock &bb : f.blocks)
    for (const IRInst &in : bb.insts)
      if (!in.result.empty())
        defs[in.result] = &in;
  return defs;
}

// One forward then one backward instruction sweep.
inline bool analyze_function(const IRModule &m, const IRFunction &f,
                             const AnalysisOptions &opts, FPSet &S,
                             FieldDag &dag, std::vector<std::string> &diags) {
  auto defs = def_map(f);
  bool changed = false;
  for (const BasicBlock &bb : f.blocks)
    for (const IRInst &in : bb.insts)
      changed |= analyze_inst(m, f, in, opts, S, dag, diags, defs);
  for (auto bb = f.blocks.rbegin(); bb != f.blocks.rend(); ++bb)
    for (auto in = bb->insts.rbegin(); in != bb->insts.rend(); ++in)
      changed |= analyze_inst(m, f, *in, opts, S, dag, diags, defs);
  return changed;
}

inline AnalysisResult analyze_module(const IRModule &m,
                                     const AnalysisOptions &opts = {}) {
  AnalysisResult r;
  r.dag = analyze_struct(m);
  r.global_inits = analyze_global_fp(m);
  for (const GlobalInitEntry &e : r.global_inits) {
    r.fpset.add("", "@" + e.global, 1, r.diagnostics);
    if (!e.type_name.empty() && !e.path.empty()) {
      bool allow = true;
      const IRGlobal *g = m.global(e.global);
      if (g && m.types.at(g->type).kind == TypeKind::Union &&
          opts.union_width_heuristic) {
        const IRType &ut = m.types.at(g->type);
        allow = e.path.size() == 1 &&
                ut.fields.at(std::size_t(e.path[0])).align == 8;
      }
      if (allow)
        r.dag.add(e.type_name, e.path);
    }
  }
  // Globals of fp-chain type join by declaration even without initializers.
  for (const IRGlobal &g : m.globals) {
    auto lt = level_from_type(m.types, g.type);
    if (lt)
      r.fpset.add("", "@" + g.name, *lt + 1, r.diagnostics);
  }

  bool changed = true;
  while (changed) {
    changed = false;
    for (const IRFunction &f : m.funcs)
      changed |=
          analyze_function(m, f, opts, r.fpset, r.dag, r.diagnostics);
  }
  return r;
}

//===----------------------------------------------------------------------===//
// Dump format (also the ground-truth label format)
//===----------------------------------------------------------------------===//

inline std::string dump_fpset(const AnalysisResult &r) {
  std::ostringstream os;
  for (const auto &[k, lvl] : r.fpset.entries())
    os << "fp " << k.first << ":" << k.second << " level=" << lvl << "\n";
  for (const auto &p : r.dag.paths()) {
    os << "fpfield " << p.first << " ";
    for (std::size_t i = 0; i < p.second.size(); ++i) {
      if (i)
        os << ".";
      if (p.second[i] == -1)
        os << "*";
      else
        os << p.second[i];
    }
    os << "\n";
  }
  return os.str();
}

} // namespace pacter
