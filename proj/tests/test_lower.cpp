#include "catch_amalgamated.hpp"

#include "pacter/fp_analysis.hpp"
#include "pacter/instrument.hpp"
#include "pacter/ir_parse.hpp"
#include "pacter/lower.hpp"

#include <string>
#include <vector>

using namespace pacter;

namespace {

const char *kDispatch = R"(
type %fops = struct { open: fn(i64) @8, count: i64 @8 }
global @ops : %fops = { @ptmx_open, 0 }
global @slot : fn(i64) = null

func @ptmx_open(%fd: i64) {
entry:
  %r = add %fd, 1
  ret %r
}

func @install() {
entry:
  %p = gep @ops, 0
  %f = load fn(i64), %p
  store %f, @slot
  ret
}

func @main() {
entry:
  call @install()
  %g = load fn(i64), @slot
  %r = callptr %g(7)
  ret %r
}
)";

const char *kLeafy = R"(
func @leaf(%a: i64, %b: i64) {
entry:
  %s = add %a, %b
  ret %s
}

func @main() {
entry:
  %r = call @leaf(2, 3)
  ret %r
}
)";

const char *kBranchy = R"(
func @main() {
entry:
  %x = mov 5
  %c = icmp eq %x, 5
  br %c, yes, no
yes:
  ret 1
no:
  ret 0
}
)";

const char *kPhi = R"(
func @main() {
entry:
  %c = icmp eq 1, 1
  br %c, a, b
a:
  %x = mov 10
  br join
b:
  %y = mov 20
  br join
join:
  %v = phi [%x, a], [%y, b]
  ret %v
}
)";

const char *kInit = R"(
global @cb : fn(i64) = null

func @handler(%x: i64) {
entry:
  ret %x
}

func @early() [init_text] {
entry:
  %f = mov @handler
  store %f, @cb
  ret
}

func @main() {
entry:
  %g = load fn(i64), @cb
  %r = callptr %g(1)
  ret %r
}
)";

IRModule build(const char *src) {
  IRModule m = parse_module(src);
  AnalysisResult r = analyze_module(m);
  instrument_module(m, r);
  return m;
}

std::vector<MachineInst> fn_insts(const MachineProgram &p,
                                  const std::string &fn) {
  std::vector<MachineInst> out;
  bool in = false;
  for (const auto &it : p.text) {
    for (const auto &l : it.labels)
      if (l.is_func)
        in = l.name == fn;
    if (in)
      out.push_back(it.inst);
  }
  in = false;
  for (const auto &it : p.init_text) {
    for (const auto &l : it.labels)
      if (l.is_func)
        in = l.name == fn;
    if (in)
      out.push_back(it.inst);
  }
  return out;
}

int count_op(const std::vector<MachineInst> &v, MOp op) {
  int n = 0;
  for (const auto &in : v)
    if (in.op == op)
      ++n;
  return n;
}

bool has_subsequence(const std::vector<MachineInst> &v,
                     const std::vector<MOp> &seq) {
  std::size_t k = 0;
  for (const auto &in : v) {
    if (k < seq.size() && in.op == seq[k])
      ++k;
  }
  return k == seq.size();
}

} // namespace

TEST_CASE("protected build uses signed calls and returns") {
  IRModule m = build(kDispatch);
  MachineProgram p = lower_module(m, {BuildMode::Protected, true});
  CHECK(p.mode == "protected");

  CoverageReport rep = coverage_scan(p);
  CHECK(rep.n_blr == 0);
  CHECK(rep.n_blraa == 1);
  CHECK(rep.offenders.empty());
  CHECK(rep.n_retaa >= 1); // main calls, so it signs its return

  // install: the transported value is re-signed into the destination cell
  // with the destination address as context.
  auto inst = fn_insts(p, "install");
  CHECK(has_subsequence(inst, {MOp::Ldr, MOp::Autia, MOp::Pbenc, MOp::Mov,
                               MOp::Pacia, MOp::Str}));
  bool saw_record = false;
  for (const auto &in : inst)
    if (in.op == MOp::Pacia && in.store_record)
      saw_record = true;
  CHECK(saw_record);

  // main: transported callee is unpacked next to the branch.
  auto mi = fn_insts(p, "main");
  CHECK(has_subsequence(mi, {MOp::Ldr, MOp::Autia, MOp::Pbenc, MOp::Pbdec,
                             MOp::Blraa}));
  for (const auto &in : mi)
    if (in.op == MOp::Blraa) {
      CHECK(in.rd >= kPairFirst);
      CHECK(in.rd <= kPoolLast);
      CHECK(in.rn >= kPairFirst);
      CHECK(in.rn <= kPoolLast);
    }
}

TEST_CASE("load ablation drops only the authenticate step") {
  IRModule m = build(kDispatch);
  MachineProgram p = lower_module(m, {BuildMode::Protected, false});
  auto inst = fn_insts(p, "install");
  CHECK(count_op(inst, MOp::Autia) == 0);
  CHECK(count_op(inst, MOp::Pbenc) == 1);
}

TEST_CASE("compat build signs with type hashes") {
  IRModule m = build(kDispatch);
  MachineProgram p = lower_module(m, {BuildMode::Compat, true});

  // No address ever enters a context: stores sign against a hash constant,
  // loads stay plain, calls authenticate against the same hash.
  auto inst = fn_insts(p, "install");
  CHECK(count_op(inst, MOp::Pbenc) == 0);
  bool record = false;
  for (const auto &in : inst)
    if (in.op == MOp::Pacia)
      record = record || in.store_record;
  CHECK(count_op(inst, MOp::Pacia) == 1);
  CHECK_FALSE(record);

  auto mi = fn_insts(p, "main");
  CHECK(count_op(mi, MOp::Pbdec) == 0);
  CHECK(count_op(mi, MOp::Blraa) == 1);

  // The store-side and call-side hashes agree, or nothing would run.
  u64 h = fnv1a64("fn(i64)");
  bool store_hash = false, call_hash = false;
  for (const auto &in : inst)
    if (in.op == MOp::MovImm && u64(in.imm) == h)
      store_hash = true;
  for (const auto &in : mi)
    if (in.op == MOp::MovImm && u64(in.imm) == h)
      call_hash = true;
  CHECK(store_hash);
  CHECK(call_hash);

  // Static cells carry the hash context for pa_init.
  REQUIRE(p.fnwords.size() == 1);
  CHECK(p.fnwords[0].ctx == MachineProgram::PatchCtx::Hash);
  CHECK(p.fnwords[0].hash == h);
}

TEST_CASE("legacy build leaves the return window open") {
  IRModule m = build(kDispatch);
  MachineProgram p = lower_module(m, {BuildMode::Legacy, true});
  CoverageReport rep = coverage_scan(p);
  CHECK(rep.n_blraa == 1); // forward edges match the protected build
  CHECK(rep.n_retaa == 0);
  CHECK(rep.n_autiasp >= 1);
  bool window = false;
  for (const auto &o : rep.offenders)
    window = window || o.reason == "window between authenticate and return";
  CHECK(window);
}

TEST_CASE("unprotected build emits no pointer signing at all") {
  IRModule m = parse_module(kDispatch); // not instrumented either
  MachineProgram p = lower_module(m, {BuildMode::Unprotected, true});
  CoverageReport rep = coverage_scan(p);
  CHECK(rep.n_blraa == 0);
  CHECK(rep.n_blr == 1);
  CHECK(rep.n_retaa == 0);
  for (const auto &sect : {p.text, p.init_text})
    for (const auto &it : sect) {
      CHECK(it.inst.op != MOp::Pacia);
      CHECK(it.inst.op != MOp::Autia);
      CHECK(it.inst.op != MOp::Pbenc);
      CHECK(it.inst.op != MOp::Pbdec);
      CHECK(it.inst.op != MOp::Paciasp);
    }
  // Instrumented IR lowered unprotected also stays plain.
  IRModule mi = build(kDispatch);
  MachineProgram q = lower_module(mi, {BuildMode::Unprotected, true});
  CHECK(coverage_scan(q).n_blr == 1);
}

TEST_CASE("leaf functions skip the return protection") {
  IRModule m = build(kLeafy);
  MachineProgram p = lower_module(m, {BuildMode::Protected, true});
  auto leaf = fn_insts(p, "leaf");
  CHECK(count_op(leaf, MOp::Paciasp) == 0);
  CHECK(count_op(leaf, MOp::Retaa) == 0);
  CHECK(count_op(leaf, MOp::Ret) == 1);
  auto mn = fn_insts(p, "main");
  CHECK(count_op(mn, MOp::Paciasp) == 1);
  CHECK(count_op(mn, MOp::Retaa) == 1);
  // main saves lr below its frame
  CHECK(has_subsequence(mn, {MOp::Paciasp, MOp::Sub, MOp::Stp, MOp::Bl}));
}

TEST_CASE("boot stub runs init code before key setup") {
  IRModule m = build(kInit);
  MachineProgram p = lower_module(m, {BuildMode::Protected, true});

  std::vector<std::string> bl_order;
  bool saw_sfi = false, saw_halt = false;
  for (const auto &it : p.text) {
    bool at_start = false;
    for (const auto &l : it.labels)
      if (l.name == "_start")
        at_start = true;
    (void)at_start;
    if (it.inst.op == MOp::Bl)
      bl_order.push_back(it.inst.sym);
    if (it.inst.op == MOp::SysFreeInit)
      saw_sfi = true;
    if (it.inst.op == MOp::Halt) {
      saw_halt = true;
      break; // _start group ends here
    }
  }
  REQUIRE(bl_order.size() == 3);
  CHECK(bl_order[0] == "early");
  CHECK(bl_order[1] == "pa_init");
  CHECK(bl_order[2] == "main");
  CHECK(saw_sfi);
  CHECK(saw_halt);

  // init code lands in its own section and never signs returns
  auto early = fn_insts(p, "early");
  CHECK_FALSE(early.empty());
  CHECK(count_op(early, MOp::Paciasp) == 0);
  CHECK(count_op(early, MOp::Retaa) == 0);
  CHECK(p.symbols.at("early") >= kInitTextBase);
  CHECK(p.symbols.at("main") < kInitTextBase);

  // the store in early still records its cell for pa_init
  bool record = false;
  for (const auto &in : early)
    if (in.op == MOp::Pacia && in.store_record)
      record = true;
  CHECK(record);
}

TEST_CASE("branch fusion and materialized booleans") {
  IRModule m = parse_module(kBranchy);
  MachineProgram p = lower_module(m, {BuildMode::Unprotected, true});
  auto mn = fn_insts(p, "main");
  // The flag feeds the branch directly. Unfused lowering would need a
  // second cmp against the materialized 0/1 value and a second b.cond.
  CHECK(count_op(mn, MOp::Cmp) == 1);
  CHECK(count_op(mn, MOp::BCond) == 1);
}

TEST_CASE("phi values get copies on both incoming edges") {
  IRModule m = parse_module(kPhi);
  MachineProgram p = lower_module(m, {BuildMode::Unprotected, true});
  auto mn = fn_insts(p, "main");
  // both constants are written somewhere before the join
  bool ten = false, twenty = false;
  for (const auto &in : mn) {
    if (in.op == MOp::MovImm && in.imm == 10)
      ten = true;
    if (in.op == MOp::MovImm && in.imm == 20)
      twenty = true;
  }
  CHECK(ten);
  CHECK(twenty);
}

TEST_CASE("gep becomes a constant offset add") {
  const char *src = R"(
type %fops = struct { open: fn(i64) @8, pad: i64 @8, count: i64 @8 }
global @ops : %fops = zeroinit

func @main() {
entry:
  %p = gep @ops, 2
  %v = load i64, %p
  ret %v
}
)";
  IRModule m = parse_module(src);
  MachineProgram p = lower_module(m, {BuildMode::Unprotected, true});
  auto mn = fn_insts(p, "main");
  bool off16 = false;
  for (const auto &in : mn)
    if (in.op == MOp::Add && in.rm < 0 && in.imm == 16)
      off16 = true;
  CHECK(off16);
}

TEST_CASE("function index lists address-taken symbols in name order") {
  IRModule m = build(kDispatch);
  MachineProgram p = lower_module(m, {BuildMode::Protected, true});
  REQUIRE(p.fn_index.size() == 1);
  CHECK(p.fn_index[0] == "ptmx_open");

  IRModule mi = build(kInit);
  MachineProgram q = lower_module(mi, {BuildMode::Protected, true});
  REQUIRE(q.fn_index.size() == 1);
  CHECK(q.fn_index[0] == "handler");
}

TEST_CASE("data emission covers words and function cells") {
  const char *src = R"(
type %fops = struct { open: fn(i64) @8, count: i64 @8, tag: i64 @8 }
global @ops : %fops = { @h, 11, 0 }
global @n : i64 = 7

func @h(%x: i64) {
entry:
  ret %x
}

func @main() {
entry:
  ret
}
)";
  IRModule m = parse_module(src);
  MachineProgram p = lower_module(m, {BuildMode::Protected, true});
  REQUIRE(p.globals.size() == 2);
  CHECK(p.globals[0].name == "ops");
  CHECK(p.globals[0].size == 24);
  REQUIRE(p.fnwords.size() == 1);
  CHECK(p.fnwords[0].global == "ops");
  CHECK(p.fnwords[0].off == 0);
  CHECK(p.fnwords[0].fn == "h");
  CHECK(p.fnwords[0].ctx == MachineProgram::PatchCtx::Addr);
  bool w11 = false, w7 = false;
  for (const auto &w : p.words) {
    if (w.global == "ops" && w.off == 8 && w.value == 11)
      w11 = true;
    if (w.global == "n" && w.off == 0 && w.value == 7)
      w7 = true;
  }
  CHECK(w11);
  CHECK(w7);
  // zero fields are left to the zero default
  CHECK(p.words.size() == 2);
}

TEST_CASE("lowered object text round trips through the assembler") {
  for (BuildMode mode : {BuildMode::Protected, BuildMode::Compat,
                         BuildMode::Legacy, BuildMode::Unprotected}) {
    IRModule m = build(kDispatch);
    MachineProgram p = lower_module(m, {mode, true});
    std::string one = serialize_program(p);
    MachineProgram q = parse_program(one);
    assign_layout(q);
    CHECK(serialize_program(q) == one);
    CHECK(q.symbols == p.symbols);
  }
}

TEST_CASE("lowering failure modes") {
  // no main
  const char *nomain = "func @f() {\nentry:\n  ret\n}\n";
  IRModule m1 = parse_module(nomain);
  CHECK_THROWS_AS(lower_module(m1, {}), LowerError);

  // too many call arguments
  const char *manyargs = R"(
func @g(%a: i64, %b: i64, %c: i64, %d: i64) {
entry:
  ret
}
func @main() {
entry:
  call @g(1, 2, 3, 4, 5)
  ret
}
)";
  IRModule m2 = parse_module(manyargs);
  CHECK_THROWS_AS(lower_module(m2, {}), LowerError);

  // register pressure: 26 values all live across one point
  std::string hot = "func @main() {\nentry:\n";
  for (int i = 0; i < 26; ++i)
    hot += "  %v" + std::to_string(i) + " = mov " + std::to_string(i) + "\n";
  hot += "  %s0 = add %v0, %v1\n";
  for (int i = 2; i < 26; ++i)
    hot += "  %s" + std::to_string(i - 1) + " = add %s" + std::to_string(i - 2) +
           ", %v" + std::to_string(i) + "\n";
  hot += "  ret %s24\n}\n";
  IRModule m3 = parse_module(hot);
  CHECK_THROWS_WITH(lower_module(m3, {}),
                    Catch::Matchers::ContainsSubstring("register pressure"));
}
