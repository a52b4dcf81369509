//===- ir.hpp - small typed IR for kernel-style modules ---------*- C++ -*-===//
//
// SPDX-License-Identifier: Apache-2.0
//
//===----------------------------------------------------------------------===//

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace pacter {

using TypeRef = std::int32_t;
inline constexpr TypeRef kNoType = -1;

enum class TypeKind { Int32, Int64, Ptr, FnPtr, Struct, Union, Array, VoidPtr };

struct IRField {
  std::string name;
  TypeRef type = kNoType;
  unsigned align = 8; // declared, 4 or 8
};

struct IRType {
  TypeKind kind = TypeKind::Int64;
  std::string name;               // struct/union
  TypeRef pointee = kNoType;      // Ptr
  std::string signature;          // FnPtr
  std::vector<IRField> fields;    // struct/union
  TypeRef elem = kNoType;         // Array
  std::uint64_t count = 0;        // Array
};

class TypeTable {
public:
  TypeTable() {
    i32_ = intern_basic(TypeKind::Int32);
    i64_ = intern_basic(TypeKind::Int64);
    voidp_ = intern_basic(TypeKind::VoidPtr);
  }

  TypeRef i32() const { return i32_; }
  TypeRef i64() const { return i64_; }
  TypeRef void_ptr() const { return voidp_; }

  TypeRef fn_ptr(const std::string &sig) {
    std::string key = "fn(" + sig + ")";
    auto it = interned_.find(key);
    if (it != interned_.end())
      return it->second;
    IRType t;
    t.kind = TypeKind::FnPtr;
    t.signature = sig;
    return put(key, t);
  }

  TypeRef ptr_to(TypeRef pointee) {
    std::string key = "ptr:" + std::to_string(pointee);
    auto it = interned_.find(key);
    if (it != interned_.end())
      return it->second;
    IRType t;
    t.kind = TypeKind::Ptr;
    t.pointee = pointee;
    return put(key, t);
  }

  TypeRef array_of(TypeRef elem, std::uint64_t count) {
    std::string key = "arr:" + std::to_string(elem) + ":" +
                      std::to_string(count);
    auto it = interned_.find(key);
    if (it != interned_.end())
      return it->second;
    IRType t;
    t.kind = TypeKind::Array;
    t.elem = elem;
    t.count = count;
    return put(key, t);
  }

  // Named struct/union. Declared once; a forward reference is an error at
  // parse time, so registration happens in definition order.
  TypeRef declare_named(const IRType &t) {
    if (named_.count(t.name))
      throw std::runtime_error("duplicate type %" + t.name);
    TypeRef r = put("named:" + t.name, t);
    named_[t.name] = r;
    named_order_.push_back(r);
    return r;
  }

  std::optional<TypeRef> named(const std::string &name) const {
    auto it = named_.find(name);
    if (it == named_.end())
      return std::nullopt;
    return it->second;
  }

  const IRType &at(TypeRef r) const { return types_.at(std::size_t(r)); }
  IRType &mutable_at(TypeRef r) { return types_.at(std::size_t(r)); }
  std::size_t size() const { return types_.size(); }
  const std::vector<TypeRef> &named_order() const { return named_order_; }

private:
  TypeRef intern_basic(TypeKind k) {
    IRType t;
    t.kind = k;
    return put("basic:" + std::to_string(int(k)), t);
  }

  TypeRef put(const std::string &key, const IRType &t) {
    TypeRef r = TypeRef(types_.size());
    types_.push_back(t);
    interned_[key] = r;
    return r;
  }

  std::vector<IRType> types_;
  std::unordered_map<std::string, TypeRef> interned_;
  std::unordered_map<std::string, TypeRef> named_;
  std::vector<TypeRef> named_order_;
  TypeRef i32_ = kNoType;
  TypeRef i64_ = kNoType;
  TypeRef voidp_ = kNoType;
};

enum class ValueKind { Local, Global, Func, ConstInt, Null, None };

struct Value {
  ValueKind kind = ValueKind::None;
  std::string name;
  std::int64_t imm = 0;

  static Value local(const std::string &n) { return {ValueKind::Local, n, 0}; }
  static Value global(const std::string &n) {
    return {ValueKind::Global, n, 0};
  }
  static Value func(const std::string &n) { return {ValueKind::Func, n, 0}; }
  static Value cint(std::int64_t v) { return {ValueKind::ConstInt, "", v}; }
  static Value null() { return {ValueKind::Null, "", 0}; }

  bool operator==(const Value &o) const {
    return kind == o.kind && name == o.name && imm == o.imm;
  }
};

enum class Op {
  Bitcast,
  Icmp,
  Phi,
  Store,
  Load,
  Gep,
  Call,
  CallPtr,
  Add,
  Sub,
  Mov,
  Ret,
  Br,
  Memcpy,
  Memmove,
  Nop,
};

struct IRInst {
  Op op = Op::Nop;
  std::string result;              // empty when none
  std::vector<Value> args;         // call/callptr: args[0] is the callee
  std::vector<std::string> labels; // br targets, phi incoming blocks
  TypeRef type = kNoType;          // load result type / bitcast target type
  std::string pred;                // icmp predicate: eq | ne
  bool constant_ctx = false;       // [constant_ctx] annotation
  bool phys = false;               // [phys] annotation
  std::string stub;                // protection stub chosen for lowering
  int line = 0;
};

struct BasicBlock {
  std::string name;
  std::vector<IRInst> insts;
};

struct IRParam {
  std::string name;
  TypeRef type = kNoType;
};

struct IRFunction {
  std::string name;
  std::vector<IRParam> params;
  std::vector<BasicBlock> blocks;
  bool init_text = false;
  // Inferred local value types, filled after parsing.
  std::unordered_map<std::string, TypeRef> value_types;
};

// Initializer tree. Leaves: integers, null, function symbols.
struct InitNode {
  enum class Kind { Int, Null, Fn, List, Zero } kind = Kind::Zero;
  std::int64_t value = 0;
  std::string fn;
  std::vector<InitNode> elems;
};

struct IRGlobal {
  std::string name;
  TypeRef type = kNoType;
  InitNode init;
};

struct IRModule {
  TypeTable types;
  std::vector<IRGlobal> globals;
  std::vector<IRFunction> funcs;

  const IRFunction *func(const std::string &name) const {
    for (const auto &f : funcs)
      if (f.name == name)
        return &f;
    return nullptr;
  }
  const IRGlobal *global(const std::string &name) const {
    for (const auto &g : globals)
      if (g.name == name)
        return &g;
    return nullptr;
  }
};

//===----------------------------------------------------------------------===//
// Layout
//===----------------------------------------------------------------------===//

inline std::uint64_t align_up(std::uint64_t v, std::uint64_t a) {
  return (v + a - 1) & ~(a - 1);
}

inline std::uint64_t type_align(const TypeTable &tt, TypeRef r) {
  const IRType &t = tt.at(r);
  switch (t.kind) {
  case TypeKind::Int32:
    return 4;
  case TypeKind::Int64:
  case TypeKind::Ptr:
  case TypeKind::FnPtr:
  case TypeKind::VoidPtr:
    return 8;
  case TypeKind::Array:
    return type_align(tt, t.elem);
  case TypeKind::Struct:
  case TypeKind::Union: {
    std::uint64_t a = 4;
    for (const IRField &f : t.fields)
      a = std::max<std::uint64_t>(a, f.align);
    return a;
  }
  }
  return 8;
}

inline std::uint64_t type_size(const TypeTable &tt, TypeRef r) {
  const IRType &t = tt.at(r);
  switch (t.kind) {
  case TypeKind::Int32:
    return 4;
  case TypeKind::Int64:
  case TypeKind::Ptr:
  case TypeKind::FnPtr:
  case TypeKind::VoidPtr:
    return 8;
  case TypeKind::Array:
    return t.count * type_size(tt, t.elem);
  case TypeKind::Struct: {
    std::uint64_t off = 0;
    for (const IRField &f : t.fields) {
      off = align_up(off, f.align);
      off += type_size(tt, f.type);
    }
    return align_up(off, type_align(tt, r));
  }
  case TypeKind::Union: {
    std::uint64_t sz = 0;
    for (const IRField &f : t.fields)
      sz = std::max(sz, type_size(tt, f.type));
    return align_up(sz, type_align(tt, r));
  }
  }
  return 8;
}

// Byte offset of field i. Union members all sit at offset 0.
inline std::uint64_t field_offset(const TypeTable &tt, TypeRef r,
                                  std::size_t i) {
  const IRType &t = tt.at(r);
  if (t.kind == TypeKind::Union)
    return 0;
  if (t.kind == TypeKind::Array)
    return i * type_size(tt, t.elem);
  std::uint64_t off = 0;
  for (std::size_t k = 0; k < t.fields.size(); ++k) {
    off = align_up(off, t.fields[k].align);
    if (k == i)
      return off;
    off += type_size(tt, t.fields[k].type);
  }
  throw std::runtime_error("field index out of range");
}

// Offset of an index path rooted at an aggregate type.
inline std::uint64_t offset_of_path(const TypeTable &tt, TypeRef root,
                                    const std::vector<int> &path) {
  std::uint64_t off = 0;
  TypeRef cur = root;
  for (int idx : path) {
    const IRType &t = tt.at(cur);
    if (t.kind == TypeKind::Struct || t.kind == TypeKind::Union) {
      off += field_offset(tt, cur, std::size_t(idx));
      cur = t.fields.at(std::size_t(idx)).type;
    } else if (t.kind == TypeKind::Array) {
      off += std::uint64_t(idx) * type_size(tt, t.elem);
      cur = t.elem;
    } else {
      throw std::runtime_error("path steps into a non-aggregate");
    }
  }
  return off;
}

inline TypeRef type_of_path(const TypeTable &tt, TypeRef root,
                            const std::vector<int> &path) {
  TypeRef cur = root;
  for (int idx : path) {
    const IRType &t = tt.at(cur);
    if (t.kind == TypeKind::Struct || t.kind == TypeKind::Union)
      cur = t.fields.at(std::size_t(idx)).type;
    else if (t.kind == TypeKind::Array)
      cur = t.elem;
    else
      throw std::runtime_error("path steps into a non-aggregate");
  }
  return cur;
}

//===----------------------------------------------------------------------===//
// Derived facts
//===----------------------------------------------------------------------===//

inline void collect_init_fns(const InitNode &n, std::set<std::string> &out) {
  if (n.kind == InitNode::Kind::Fn)
    out.insert(n.fn);
  for (const InitNode &e : n.elems)
    collect_init_fns(e, out);
}

// Function symbols whose address escapes: initializer leaves plus any
// instruction operand that is not the callee of a direct call.
inline std::set<std::string> address_taken(const IRModule &m) {
  std::set<std::string> out;
  for (const IRGlobal &g : m.globals)
    collect_init_fns(g.init, out);
  for (const IRFunction &f : m.funcs)
    for (const BasicBlock &bb : f.blocks)
      for (const IRInst &in : bb.insts)
        for (std::size_t i = 0; i < in.args.size(); ++i) {
          if (in.op == Op::Call && i == 0)
            continue;
          if (in.args[i].kind == ValueKind::Func)
            out.insert(in.args[i].name);
        }
  return out;
}

//===----------------------------------------------------------------------===//
// Printing
//===----------------------------------------------------------------------===//

inline std::string type_to_string(const TypeTable &tt, TypeRef r) {
  const IRType &t = tt.at(r);
  switch (t.kind) {
  case TypeKind::Int32:
    return "i32";
  case TypeKind::Int64:
    return "i64";
  case TypeKind::VoidPtr:
    return "void*";
  case TypeKind::FnPtr:
    return "fn(" + t.signature + ")";
  case TypeKind::Ptr:
    return type_to_string(tt, t.pointee) + "*";
  case TypeKind::Struct:
  case TypeKind::Union:
    return "%" + t.name;
  case TypeKind::Array:
    return "[" + std::to_string(t.count) + " x " +
           type_to_string(tt, t.elem) + "]";
  }
  return "?";
}

inline std::string value_to_string(const Value &v) {
  switch (v.kind) {
  case ValueKind::Local:
    return "%" + v.name;
  case ValueKind::Global:
    return "@" + v.name;
  case ValueKind::Func:
    return "@" + v.name;
  case ValueKind::ConstInt:
    return std::to_string(v.imm);
  case ValueKind::Null:
    return "null";
  case ValueKind::None:
    return "<none>";
  }
  return "?";
}

inline std::string init_to_string(const InitNode &n) {
  switch (n.kind) {
  case InitNode::Kind::Int:
    return std::to_string(n.value);
  case InitNode::Kind::Null:
    return "null";
  case InitNode::Kind::Fn:
    return "@" + n.fn;
  case InitNode::Kind::Zero:
    return "zeroinit";
  case InitNode::Kind::List: {
    std::string s = "{ ";
    for (std::size_t i = 0; i < n.elems.size(); ++i) {
      if (i)
        s += ", ";
      s += init_to_string(n.elems[i]);
    }
    return s + " }";
  }
  }
  return "?";
}

inline std::string inst_to_string(const TypeTable &tt, const IRInst &in) {
  std::ostringstream os;
  auto res = [&]() -> std::ostringstream & {
    if (!in.result.empty())
      os << "%" << in.result << " = ";
    return os;
  };
  auto call_args = [&](std::size_t from) {
    os << "(";
    for (std::size_t i = from; i < in.args.size(); ++i) {
      if (i > from)
        os << ", ";
      os << value_to_string(in.args[i]);
    }
    os << ")";
  };
  switch (in.op) {
  case Op::Bitcast:
    res() << "bitcast " << value_to_string(in.args[0]) << " to "
          << type_to_string(tt, in.type);
    break;
  case Op::Icmp:
    res() << "icmp " << in.pred << " " << value_to_string(in.args[0]) << ", "
          << value_to_string(in.args[1]);
    break;
  case Op::Phi: {
    res() << "phi ";
    for (std::size_t i = 0; i < in.args.size(); ++i) {
      if (i)
        os << ", ";
      os << "[" << value_to_string(in.args[i]) << ", " << in.labels[i] << "]";
    }
    break;
  }
  case Op::Store:
    os << "store " << value_to_string(in.args[0]) << ", "
       << value_to_string(in.args[1]);
    break;
  case Op::Load:
    res() << "load " << type_to_string(tt, in.type) << ", "
          << value_to_string(in.args[0]);
    break;
  case Op::Gep: {
    res() << "gep " << value_to_string(in.args[0]);
    for (std::size_t i = 1; i < in.args.size(); ++i)
      os << ", " << in.args[i].imm;
    break;
  }
  case Op::Call:
    res() << "call " << value_to_string(in.args[0]);
    call_args(1);
    break;
  case Op::CallPtr:
    res() << "callptr " << value_to_string(in.args[0]);
    call_args(1);
    break;
  case Op::Add:
    res() << "add " << value_to_string(in.args[0]) << ", "
          << value_to_string(in.args[1]);
    break;
  case Op::Sub:
    res() << "sub " << value_to_string(in.args[0]) << ", "
          << value_to_string(in.args[1]);
    break;
  case Op::Mov:
    res() << "mov " << value_to_string(in.args[0]);
    break;
  case Op::Ret:
    os << "ret";
    if (!in.args.empty())
      os << " " << value_to_string(in.args[0]);
    break;
  case Op::Br:
    if (in.args.empty())
      os << "br " << in.labels[0];
    else
      os << "br " << value_to_string(in.args[0]) << ", " << in.labels[0]
         << ", " << in.labels[1];
    break;
  case Op::Memcpy:
    os << "memcpy " << value_to_string(in.args[0]) << ", "
       << value_to_string(in.args[1]) << ", " << value_to_string(in.args[2]);
    break;
  case Op::Memmove:
    os << "memmove " << value_to_string(in.args[0]) << ", "
       << value_to_string(in.args[1]) << ", " << value_to_string(in.args[2]);
    break;
  case Op::Nop:
    os << "nop";
    break;
  }
  if (in.constant_ctx)
    os << " [constant_ctx]";
  if (in.phys)
    os << " [phys]";
  if (!in.stub.empty())
    os << " [stub=" << in.stub << "]";
  return os.str();
}

inline std::string print_module(const IRModule &m) {
  std::ostringstream os;
  for (TypeRef r : m.types.named_order()) {
    const IRType &t = m.types.at(r);
    os << "type %" << t.name << " = "
       << (t.kind == TypeKind::Struct ? "struct" : "union") << " { ";
    for (std::size_t i = 0; i < t.fields.size(); ++i) {
      if (i)
        os << ", ";
      os << t.fields[i].name << ": " << type_to_string(m.types, t.fields[i].type)
         << " @" << t.fields[i].align;
    }
    os << " }\n";
  }
  if (!m.types.named_order().empty())
    os << "\n";
  for (const IRGlobal &g : m.globals)
    os << "global @" << g.name << " : " << type_to_string(m.types, g.type)
       << " = " << init_to_string(g.init) << "\n";
  if (!m.globals.empty())
    os << "\n";
  for (const IRFunction &f : m.funcs) {
    os << "func @" << f.name << "(";
    for (std::size_t i = 0; i < f.params.size(); ++i) {
      if (i)
        os << ", ";
      os << "%" << f.params[i].name << ": "
         << type_to_string(m.types, f.params[i].type);
    }
    os << ")";
    if (f.init_text)
      os << " [init_text]";
    os << " {\n";
    for (const BasicBlock &bb : f.blocks) {
      os << bb.name << ":\n";
      for (const IRInst &in : bb.insts)
        os << "  " << inst_to_string(m.types, in) << "\n";
    }
    os << "}\n\n";
  }
  return os.str();
}

//===----------------------------------------------------------------------===//
// Type inference for locals
//===----------------------------------------------------------------------===//

inline std::string fn_signature(const IRModule &m, const IRFunction &f) {
  std::string sig;
  for (std::size_t i = 0; i < f.params.size(); ++i) {
    if (i)
      sig += ",";
    sig += type_to_string(m.types, f.params[i].type);
  }
  return sig;
}

inline TypeRef value_type(const IRModule &m, const IRFunction &f,
                          const Value &v);

// Fill f.value_types. Two passes handle phis that reference later defs.
inline void infer_value_types(IRModule &m) {
  for (IRFunction &f : m.funcs) {
    f.value_types.clear();
    for (const IRParam &p : f.params)
      f.value_types[p.name] = p.type;
    for (int pass = 0; pass < 2; ++pass) {
      for (const BasicBlock &bb : f.blocks) {
        for (const IRInst &in : bb.insts) {
          if (in.result.empty())
            continue;
          TypeRef r = kNoType;
          switch (in.op) {
          case Op::Load:
          case Op::Bitcast:
            r = in.type;
            break;
          case Op::Gep: {
            TypeRef base = value_type(m, f, in.args[0]);
            if (base != kNoType &&
                m.types.at(base).kind == TypeKind::Ptr) {
              std::vector<int> path;
              for (std::size_t i = 1; i < in.args.size(); ++i)
                path.push_back(int(in.args[i].imm));
              try {
                r = m.types.ptr_to(
                    type_of_path(m.types, m.types.at(base).pointee, path));
              } catch (const std::exception &) {
                r = kNoType;
              }
            }
            break;
          }
          case Op::Icmp:
            r = m.types.i32();
            break;
          case Op::Mov:
          case Op::Phi: {
            for (const Value &a : in.args) {
              TypeRef t = value_type(m, f, a);
              if (t != kNoType) {
                r = t;
                break;
              }
            }
            break;
          }
          case Op::Add:
          case Op::Sub:
          case Op::Call:
          case Op::CallPtr:
            r = m.types.i64();
            break;
          default:
            break;
          }
          if (r != kNoType)
            f.value_types[in.result] = r;
        }
      }
    }
  }
}

inline TypeRef value_type(const IRModule &m, const IRFunction &f,
                          const Value &v) {
  switch (v.kind) {
  case ValueKind::Local: {
    auto it = f.value_types.find(v.name);
    return it == f.value_types.end() ? kNoType : it->second;
  }
  case ValueKind::Global: {
    const IRGlobal *g = m.global(v.name);
    if (!g)
      return kNoType;
    return const_cast<TypeTable &>(m.types).ptr_to(g->type);
  }
  case ValueKind::Func: {
    const IRFunction *fn = m.func(v.name);
    if (!fn)
      return kNoType;
    return const_cast<TypeTable &>(m.types).fn_ptr(fn_signature(m, *fn));
  }
  case ValueKind::ConstInt:
    return const_cast<TypeTable &>(m.types).i64();
  case ValueKind::Null:
    return const_cast<TypeTable &>(m.types).void_ptr();
  case ValueKind::None:
    return kNoType;
  }
  return kNoType;
}

//===----------------------------------------------------------------------===//
// Validation
//===----------------------------------------------------------------------===//

inline bool is_terminator(const IRInst &in) {
  return in.op == Op::Ret || in.op == Op::Br;
}

inline std::vector<std::string> validate_module(const IRModule &m) {
  std::vector<std::string> diags;
  auto err = [&](const std::string &s) { diags.push_back(s); };

  if (address_taken(m).size() > 10000)
    err("more than 10000 address-taken functions");

  for (const IRFunction &f : m.funcs) {
    if (f.blocks.empty()) {
      err(f.name + ": no blocks");
      continue;
    }
    std::set<std::string> block_names;
    for (const BasicBlock &bb : f.blocks)
      if (!block_names.insert(bb.name).second)
        err(f.name + ": duplicate block " + bb.name);
    for (const BasicBlock &bb : f.blocks) {
      if (bb.insts.empty() || !is_terminator(bb.insts.back()))
        err(f.name + ":" + bb.name + ": block does not end in a terminator");
      for (std::size_t k = 0; k < bb.insts.size(); ++k) {
        const IRInst &in = bb.insts[k];
        if (is_terminator(in) && k + 1 != bb.insts.size())
          err(f.name + ":" + bb.name + ": terminator not last");
        for (const std::string &l : in.labels)
          if (in.op == Op::Br || in.op == Op::Phi)
            if (!block_names.count(l))
              err(f.name + ":" + bb.name + ": unknown block " + l);
        if (in.op == Op::Phi && in.args.size() != in.labels.size())
          err(f.name + ": phi arity mismatch");
        if (in.op == Op::Gep) {
          TypeRef base = value_type(m, f, in.args[0]);
          if (base == kNoType || m.types.at(base).kind != TypeKind::Ptr)
            err(f.name + ": gep base is not a pointer");
        }
      }
    }
  }
  return diags;
}

} // namespace pacter
