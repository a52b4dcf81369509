//===- ir_parse.hpp - text format parser ------------------------*- C++ -*-===//
//
// SPDX-License-Identifier: Apache-2.0
//
// Line-oriented grammar:
//
//   type %name = struct { field: type @align, ... }     (union likewise)
//   global @name : type = init
//   func @name(%p: type, ...) [init_text] { block: inst... }
//
// Instructions carry optional [constant_ctx] / [phys] annotations at the end
// of the line. Comments run from ';' to end of line.
//
//===----------------------------------------------------------------------===//

#pragma once

#include "ir.hpp"

#include <cctype>
#include <cstdint>
#include <string>
#include <vector>

namespace pacter {

enum class ParseErr { Syntax, UnresolvedSymbol, TypeMismatch };

struct ParseError : std::runtime_error {
  ParseErr kind;
  int line;
  ParseError(ParseErr k, int ln, const std::string &msg)
      : std::runtime_error("line " + std::to_string(ln) + ": " + msg),
        kind(k), line(ln) {}
};

namespace detail {

struct Tok {
  enum class K { Ident, Local, Sym, Align, Int, Punct, End } k = K::End;
  std::string s;
  std::int64_t num = 0;
  char punct = 0;
};

class Lexer {
public:
  Lexer(const std::string &text, int line) : s_(text), line_(line) { next(); }

  const Tok &peek() const { return tok_; }
  Tok take() {
    Tok t = tok_;
    next();
    return t;
  }
  bool at_end() const { return tok_.k == Tok::K::End; }
  int line() const { return line_; }

  [[noreturn]] void fail(const std::string &msg) const {
    throw ParseError(ParseErr::Syntax, line_, msg);
  }

  void expect_punct(char c) {
    if (tok_.k != Tok::K::Punct || tok_.punct != c)
      fail(std::string("expected '") + c + "'");
    next();
  }

  bool eat_punct(char c) {
    if (tok_.k == Tok::K::Punct && tok_.punct == c) {
      next();
      return true;
    }
    return false;
  }

  std::string expect_ident() {
    if (tok_.k != Tok::K::Ident)
      fail("expected identifier");
    std::string s = tok_.s;
    next();
    return s;
  }

  // Current token must be '('. Captures raw text up to the matching ')'.
  std::string capture_parens() {
    if (tok_.k != Tok::K::Punct || tok_.punct != '(')
      fail("expected '('");
    std::string out;
    while (i_ < s_.size() && s_[i_] != ')')
      out += s_[i_++];
    if (i_ >= s_.size())
      fail("unterminated '('");
    ++i_; // consume ')'
    next();
    return out;
  }

private:
  static bool ident_ch(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.';
  }

  void next() {
    while (i_ < s_.size() &&
           std::isspace(static_cast<unsigned char>(s_[i_])))
      ++i_;
    if (i_ >= s_.size()) {
      tok_ = {};
      tok_.k = Tok::K::End;
      return;
    }
    char c = s_[i_];
    if (c == '%' || c == '@') {
      ++i_;
      if (c == '@' && i_ < s_.size() &&
          std::isdigit(static_cast<unsigned char>(s_[i_]))) {
        std::size_t j = i_;
        while (j < s_.size() && std::isdigit(static_cast<unsigned char>(s_[j])))
          ++j;
        tok_ = {};
        tok_.k = Tok::K::Align;
        tok_.num = std::stoll(s_.substr(i_, j - i_));
        i_ = j;
        return;
      }
      std::size_t j = i_;
      while (j < s_.size() && ident_ch(s_[j]))
        ++j;
      if (j == i_)
        fail(std::string("dangling '") + c + "'");
      tok_ = {};
      tok_.k = c == '%' ? Tok::K::Local : Tok::K::Sym;
      tok_.s = s_.substr(i_, j - i_);
      i_ = j;
      return;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) ||
        (c == '-' && i_ + 1 < s_.size() &&
         std::isdigit(static_cast<unsigned char>(s_[i_ + 1])))) {
      std::size_t j = i_ + 1;
      bool hex = false;
      if (c == '0' && j < s_.size() && (s_[j] == 'x' || s_[j] == 'X')) {
        hex = true;
        ++j;
      }
      while (j < s_.size() &&
             (std::isalnum(static_cast<unsigned char>(s_[j]))))
        ++j;
      tok_ = {};
      tok_.k = Tok::K::Int;
      tok_.num = std::int64_t(
          std::stoull(s_.substr(i_, j - i_), nullptr, hex ? 16 : 10));
      i_ = j;
      return;
    }
    if (ident_ch(c)) {
      std::size_t j = i_;
      while (j < s_.size() && ident_ch(s_[j]))
        ++j;
      tok_ = {};
      tok_.k = Tok::K::Ident;
      tok_.s = s_.substr(i_, j - i_);
      i_ = j;
      return;
    }
    tok_ = {};
    tok_.k = Tok::K::Punct;
    tok_.punct = c;
    ++i_;
  }

  std::string s_;
  std::size_t i_ = 0;
  int line_;
  Tok tok_;
};

} // namespace detail

class Parser {
public:
  IRModule parse(const std::string &text) {
    split_lines(text);
    while (line_no_ < lines_.size()) {
      std::string ln = current_line();
      if (ln.empty()) {
        ++line_no_;
        continue;
      }
      detail::Lexer lx(ln, int(line_no_) + 1);
      std::string head = lx.peek().k == detail::Tok::K::Ident
                             ? lx.peek().s
                             : std::string();
      if (head == "type")
        parse_type(lx);
      else if (head == "global")
        parse_global(lx);
      else if (head == "func")
        parse_func(lx);
      else
        lx.fail("expected type/global/func at top level");
      ++line_no_;
    }
    resolve_symbols();
    infer_value_types(m_);
    return std::move(m_);
  }

private:
  void split_lines(const std::string &text) {
    std::string cur;
    for (char c : text) {
      if (c == '\n') {
        lines_.push_back(strip(cur));
        cur.clear();
      } else {
        cur += c;
      }
    }
    if (!cur.empty())
      lines_.push_back(strip(cur));
  }

  static std::string strip(const std::string &s) {
    std::string t = s;
    auto sc = t.find(';');
    if (sc != std::string::npos)
      t = t.substr(0, sc);
    std::size_t b = 0, e = t.size();
    while (b < e && std::isspace(static_cast<unsigned char>(t[b])))
      ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(t[e - 1])))
      --e;
    return t.substr(b, e - b);
  }

  std::string current_line() const { return lines_[line_no_]; }

  TypeRef parse_type_ref(detail::Lexer &lx) {
    TypeRef base = kNoType;
    const detail::Tok &t = lx.peek();
    if (t.k == detail::Tok::K::Ident) {
      if (t.s == "i32") {
        lx.take();
        base = m_.types.i32();
      } else if (t.s == "i64") {
        lx.take();
        base = m_.types.i64();
      } else if (t.s == "void") {
        lx.take();
        lx.expect_punct('*');
        base = m_.types.void_ptr();
      } else if (t.s == "fn") {
        lx.take();
        std::string sig = lx.capture_parens();
        base = m_.types.fn_ptr(strip(sig));
      } else {
        lx.fail("unknown type " + t.s);
      }
    } else if (t.k == detail::Tok::K::Local) {
      auto named = m_.types.named(t.s);
      if (!named)
        throw ParseError(ParseErr::UnresolvedSymbol, lx.line(),
                         "unknown type %" + t.s);
      lx.take();
      base = *named;
    } else if (t.k == detail::Tok::K::Punct && t.punct == '[') {
      lx.take();
      if (lx.peek().k != detail::Tok::K::Int)
        lx.fail("expected array length");
      std::uint64_t n = std::uint64_t(lx.take().num);
      if (lx.expect_ident() != "x")
        lx.fail("expected 'x' in array type");
      TypeRef elem = parse_type_ref(lx);
      lx.expect_punct(']');
      base = m_.types.array_of(elem, n);
    } else {
      lx.fail("expected type");
    }
    while (lx.eat_punct('*'))
      base = m_.types.ptr_to(base);
    return base;
  }

  void parse_type(detail::Lexer &lx) {
    lx.take(); // type
    if (lx.peek().k != detail::Tok::K::Local)
      lx.fail("expected %name");
    std::string name = lx.take().s;
    lx.expect_punct('=');
    std::string kind = lx.expect_ident();
    if (kind != "struct" && kind != "union")
      lx.fail("expected struct or union");
    IRType t;
    t.kind = kind == "struct" ? TypeKind::Struct : TypeKind::Union;
    t.name = name;
    // Register before parsing fields so self references parse (the analysis
    // rejects by-value cycles later).
    TypeRef ref = m_.types.declare_named(t);
    lx.expect_punct('{');
    std::vector<IRField> fields;
    if (!lx.eat_punct('}')) {
      while (true) {
        IRField f;
        f.name = lx.expect_ident();
        lx.expect_punct(':');
        f.type = parse_type_ref(lx);
        if (lx.peek().k != detail::Tok::K::Align)
          lx.fail("expected @align");
        f.align = unsigned(lx.take().num);
        if (f.align != 4 && f.align != 8)
          throw ParseError(ParseErr::TypeMismatch, lx.line(),
                           "field alignment must be 4 or 8");
        fields.push_back(f);
        if (lx.eat_punct('}'))
          break;
        lx.expect_punct(',');
      }
    }
    m_.types.mutable_at(ref).fields = std::move(fields);
    if (!lx.at_end())
      lx.fail("trailing tokens after type");
  }

  InitNode parse_init(detail::Lexer &lx) {
    const detail::Tok &t = lx.peek();
    InitNode n;
    if (t.k == detail::Tok::K::Int) {
      n.kind = InitNode::Kind::Int;
      n.value = lx.take().num;
      return n;
    }
    if (t.k == detail::Tok::K::Ident && t.s == "null") {
      lx.take();
      n.kind = InitNode::Kind::Null;
      return n;
    }
    if (t.k == detail::Tok::K::Ident && t.s == "zeroinit") {
      lx.take();
      n.kind = InitNode::Kind::Zero;
      return n;
    }
    if (t.k == detail::Tok::K::Sym) {
      n.kind = InitNode::Kind::Fn;
      n.fn = lx.take().s;
      return n;
    }
    if (t.k == detail::Tok::K::Punct && t.punct == '{') {
      lx.take();
      n.kind = InitNode::Kind::List;
      if (!lx.eat_punct('}')) {
        while (true) {
          n.elems.push_back(parse_init(lx));
          if (lx.eat_punct('}'))
            break;
          lx.expect_punct(',');
        }
      }
      return n;
    }
    lx.fail("expected initializer");
  }

  void check_init_shape(const InitNode &n, TypeRef ty, int line) {
    const IRType &t = m_.types.at(ty);
    switch (n.kind) {
    case InitNode::Kind::Zero:
      return;
    case InitNode::Kind::Int:
      if (t.kind == TypeKind::Struct || t.kind == TypeKind::Union ||
          t.kind == TypeKind::Array)
        throw ParseError(ParseErr::TypeMismatch, line,
                         "scalar initializer for aggregate");
      return;
    case InitNode::Kind::Null:
    case InitNode::Kind::Fn:
      if (t.kind == TypeKind::Struct || t.kind == TypeKind::Array)
        throw ParseError(ParseErr::TypeMismatch, line,
                         "pointer initializer for aggregate");
      return;
    case InitNode::Kind::List:
      if (t.kind == TypeKind::Struct) {
        if (n.elems.size() != t.fields.size())
          throw ParseError(ParseErr::TypeMismatch, line,
                           "initializer count != field count");
        for (std::size_t i = 0; i < n.elems.size(); ++i)
          check_init_shape(n.elems[i], t.fields[i].type, line);
      } else if (t.kind == TypeKind::Union) {
        if (n.elems.size() != 1)
          throw ParseError(ParseErr::TypeMismatch, line,
                           "union initializer takes one element");
        check_init_shape(n.elems[0], t.fields.at(0).type, line);
      } else if (t.kind == TypeKind::Array) {
        if (n.elems.size() != t.count)
          throw ParseError(ParseErr::TypeMismatch, line,
                           "initializer count != array length");
        for (const InitNode &e : n.elems)
          check_init_shape(e, t.elem, line);
      } else {
        throw ParseError(ParseErr::TypeMismatch, line,
                         "list initializer for scalar");
      }
      return;
    }
  }

  void parse_global(detail::Lexer &lx) {
    lx.take(); // global
    if (lx.peek().k != detail::Tok::K::Sym)
      lx.fail("expected @name");
    IRGlobal g;
    g.name = lx.take().s;
    lx.expect_punct(':');
    g.type = parse_type_ref(lx);
    lx.expect_punct('=');
    g.init = parse_init(lx);
    check_init_shape(g.init, g.type, lx.line());
    if (!lx.at_end())
      lx.fail("trailing tokens after global");
    m_.globals.push_back(std::move(g));
  }

  Value parse_operand(detail::Lexer &lx) {
    const detail::Tok &t = lx.peek();
    if (t.k == detail::Tok::K::Local)
      return Value::local(lx.take().s);
    if (t.k == detail::Tok::K::Sym)
      return Value::global(lx.take().s); // kind fixed in resolve_symbols
    if (t.k == detail::Tok::K::Int)
      return Value::cint(lx.take().num);
    if (t.k == detail::Tok::K::Ident && t.s == "null") {
      lx.take();
      return Value::null();
    }
    lx.fail("expected operand");
  }

  void parse_annotations(detail::Lexer &lx, IRInst &in) {
    while (lx.eat_punct('[')) {
      std::string a = lx.expect_ident();
      if (a == "constant_ctx")
        in.constant_ctx = true;
      else if (a == "phys")
        in.phys = true;
      else if (a == "stub") {
        lx.expect_punct('=');
        in.stub = lx.expect_ident();
      } else
        lx.fail("unknown annotation " + a);
      lx.expect_punct(']');
    }
    if (!lx.at_end())
      lx.fail("trailing tokens");
  }

  void parse_call_args(detail::Lexer &lx, IRInst &in) {
    lx.expect_punct('(');
    if (lx.eat_punct(')'))
      return;
    while (true) {
      in.args.push_back(parse_operand(lx));
      if (lx.eat_punct(')'))
        break;
      lx.expect_punct(',');
    }
  }

  IRInst parse_inst(detail::Lexer &lx) {
    IRInst in;
    in.line = lx.line();
    std::string result;
    if (lx.peek().k == detail::Tok::K::Local) {
      result = lx.take().s;
      lx.expect_punct('=');
    }
    in.result = result;
    std::string op = lx.expect_ident();
    if (op == "load") {
      in.op = Op::Load;
      in.type = parse_type_ref(lx);
      lx.expect_punct(',');
      in.args.push_back(parse_operand(lx));
    } else if (op == "store") {
      in.op = Op::Store;
      in.args.push_back(parse_operand(lx));
      lx.expect_punct(',');
      in.args.push_back(parse_operand(lx));
    } else if (op == "gep") {
      in.op = Op::Gep;
      in.args.push_back(parse_operand(lx));
      while (lx.eat_punct(',')) {
        if (lx.peek().k != detail::Tok::K::Int)
          lx.fail("gep index must be an integer literal");
        in.args.push_back(Value::cint(lx.take().num));
      }
      if (in.args.size() < 2)
        lx.fail("gep needs at least one index");
    } else if (op == "bitcast") {
      in.op = Op::Bitcast;
      in.args.push_back(parse_operand(lx));
      if (lx.expect_ident() != "to")
        lx.fail("expected 'to'");
      in.type = parse_type_ref(lx);
    } else if (op == "icmp") {
      in.op = Op::Icmp;
      in.pred = lx.expect_ident();
      if (in.pred != "eq" && in.pred != "ne")
        lx.fail("icmp predicate must be eq or ne");
      in.args.push_back(parse_operand(lx));
      lx.expect_punct(',');
      in.args.push_back(parse_operand(lx));
    } else if (op == "phi") {
      in.op = Op::Phi;
      while (true) {
        lx.expect_punct('[');
        in.args.push_back(parse_operand(lx));
        lx.expect_punct(',');
        in.labels.push_back(lx.expect_ident());
        lx.expect_punct(']');
        if (!lx.eat_punct(','))
          break;
      }
    } else if (op == "call") {
      in.op = Op::Call;
      if (lx.peek().k != detail::Tok::K::Sym)
        lx.fail("call target must be @symbol");
      in.args.push_back(Value::global(lx.take().s));
      parse_call_args(lx, in);
    } else if (op == "callptr") {
      in.op = Op::CallPtr;
      if (lx.peek().k != detail::Tok::K::Local)
        lx.fail("callptr target must be %value");
      in.args.push_back(Value::local(lx.take().s));
      parse_call_args(lx, in);
    } else if (op == "add" || op == "sub") {
      in.op = op == "add" ? Op::Add : Op::Sub;
      in.args.push_back(parse_operand(lx));
      lx.expect_punct(',');
      in.args.push_back(parse_operand(lx));
    } else if (op == "mov") {
      in.op = Op::Mov;
      in.args.push_back(parse_operand(lx));
    } else if (op == "ret") {
      in.op = Op::Ret;
      if (!lx.at_end() && !(lx.peek().k == detail::Tok::K::Punct &&
                            lx.peek().punct == '['))
        in.args.push_back(parse_operand(lx));
    } else if (op == "br") {
      in.op = Op::Br;
      if (lx.peek().k == detail::Tok::K::Local) {
        in.args.push_back(parse_operand(lx));
        lx.expect_punct(',');
        in.labels.push_back(lx.expect_ident());
        lx.expect_punct(',');
        in.labels.push_back(lx.expect_ident());
      } else {
        in.labels.push_back(lx.expect_ident());
      }
    } else if (op == "memcpy" || op == "memmove") {
      in.op = op == "memcpy" ? Op::Memcpy : Op::Memmove;
      in.args.push_back(parse_operand(lx));
      lx.expect_punct(',');
      in.args.push_back(parse_operand(lx));
      lx.expect_punct(',');
      in.args.push_back(parse_operand(lx));
    } else if (op == "nop") {
      in.op = Op::Nop;
    } else {
      lx.fail("unknown instruction " + op);
    }
    parse_annotations(lx, in);
    return in;
  }

  void parse_func(detail::Lexer &lx) {
    lx.take(); // func
    IRFunction f;
    if (lx.peek().k != detail::Tok::K::Sym)
      lx.fail("expected @name");
    f.name = lx.take().s;
    lx.expect_punct('(');
    if (!lx.eat_punct(')')) {
      while (true) {
        IRParam p;
        if (lx.peek().k != detail::Tok::K::Local)
          lx.fail("expected %param");
        p.name = lx.take().s;
        lx.expect_punct(':');
        p.type = parse_type_ref(lx);
        f.params.push_back(p);
        if (lx.eat_punct(')'))
          break;
        lx.expect_punct(',');
      }
    }
    if (lx.eat_punct('[')) {
      if (lx.expect_ident() != "init_text")
        lx.fail("unknown function attribute");
      lx.expect_punct(']');
      f.init_text = true;
    }
    lx.expect_punct('{');
    if (!lx.at_end())
      lx.fail("function body starts on the next line");

    // Body lines until a lone '}'.
    BasicBlock *bb = nullptr;
    while (true) {
      ++line_no_;
      if (line_no_ >= lines_.size())
        throw ParseError(ParseErr::Syntax, int(line_no_),
                         "unterminated function " + f.name);
      std::string ln = current_line();
      if (ln.empty())
        continue;
      if (ln == "}")
        break;
      // Block label: single identifier followed by ':'.
      if (ln.back() == ':' && ln.find_first_of(" \t,(") == std::string::npos) {
        BasicBlock nb;
        nb.name = ln.substr(0, ln.size() - 1);
        f.blocks.push_back(nb);
        bb = &f.blocks.back();
        continue;
      }
      detail::Lexer il(ln, int(line_no_) + 1);
      if (!bb)
        il.fail("instruction before first block label");
      bb->insts.push_back(parse_inst(il));
    }
    m_.funcs.push_back(std::move(f));
  }

  // Second pass: @name operands become Func or Global; unknown names fail.
  void resolve_symbols() {
    std::set<std::string> fn_names, gl_names;
    for (const IRFunction &f : m_.funcs)
      fn_names.insert(f.name);
    for (const IRGlobal &g : m_.globals)
      gl_names.insert(g.name);

    for (IRGlobal &g : m_.globals)
      check_init_fns(g.init, fn_names);

    for (IRFunction &f : m_.funcs)
      for (BasicBlock &bb : f.blocks)
        for (IRInst &in : bb.insts)
          for (std::size_t i = 0; i < in.args.size(); ++i) {
            Value &v = in.args[i];
            if (v.kind != ValueKind::Global)
              continue;
            if (in.op == Op::Call && i == 0) {
              if (fn_names.count(v.name)) {
                v.kind = ValueKind::Func;
                continue;
              }
              throw ParseError(ParseErr::UnresolvedSymbol, in.line,
                               "unknown function @" + v.name);
            }
            if (fn_names.count(v.name))
              v.kind = ValueKind::Func;
            else if (!gl_names.count(v.name))
              throw ParseError(ParseErr::UnresolvedSymbol, in.line,
                               "unknown symbol @" + v.name);
          }
  }

  void check_init_fns(const InitNode &n, const std::set<std::string> &fns) {
    if (n.kind == InitNode::Kind::Fn && !fns.count(n.fn))
      throw ParseError(ParseErr::UnresolvedSymbol, 0,
                       "initializer references unknown function @" + n.fn);
    for (const InitNode &e : n.elems)
      check_init_fns(e, fns);
  }

  IRModule m_;
  std::vector<std::string> lines_;
  std::size_t line_no_ = 0;
};

inline IRModule parse_module(const std::string &text) {
  Parser p;
  return p.parse(text);
}

} // namespace pacter
