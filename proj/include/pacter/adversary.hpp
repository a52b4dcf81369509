//===--- pacter/adversary.hpp - scripted attacks against a machine -------===//
//
// An attack scenario is a benign program plus a schedule of memory edits and
// interrupt injections, replayed against a private machine. The adversary
// owns data memory and the interrupt save area; it never touches text,
// registers, or the key. A scenario succeeds when the program counter
// reaches the attacker's chosen code address after the whole schedule has
// landed; a trap before that counts as blocked.
//
//===----------------------------------------------------------------------===//

#pragma once

#include "pacter/fp_analysis.hpp"
#include "pacter/instrument.hpp"
#include "pacter/ir_parse.hpp"
#include "pacter/lower.hpp"
#include "pacter/machine.hpp"

#include <cstdio>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pacter {

struct ScheduleInvalid : std::runtime_error {
  explicit ScheduleInvalid(const std::string &m) : std::runtime_error(m) {}
};

enum class Outcome { Blocked, Hijacked, Ineffective };

inline const char *outcome_name(Outcome o) {
  switch (o) {
  case Outcome::Blocked:
    return "BLOCKED";
  case Outcome::Hijacked:
    return "HIJACKED";
  case Outcome::Ineffective:
    return "INEFFECTIVE";
  }
  return "?";
}

// When an action fires: at a retired-instruction count, or when the n-th
// occurrence of a named machine event (boot, pa_init, free_init, irq, halt)
// has been observed.
struct Trigger {
  u64 retired = 0;
  std::string event;
  int occurrence = 1;
  bool is_event() const { return !event.empty(); }
};

inline Trigger at_retired(u64 n) {
  Trigger t;
  t.retired = n;
  return t;
}

inline Trigger at_event(std::string e, int occurrence = 1) {
  Trigger t;
  t.event = std::move(e);
  t.occurrence = occurrence;
  return t;
}

// One memory cell edit. `addr` is symbolic: "@global+0x18", "irqsave+0xE8"
// for the interrupt save area, or a bare hex address.
struct CellEdit {
  std::string addr;
  u64 value = 0;
  bool from_read = false; // replay the last captured read instead of `value`
};

struct AttackAction {
  enum class Kind { Write, Read, Irq };
  Kind kind = Kind::Write;
  CellEdit edit;                    // Write: the edit; Read: the cell to capture
  std::vector<CellEdit> irq_writes; // Irq: edits applied while spilled
};

struct AttackStep {
  Trigger when;
  AttackAction act;
};

inline AttackStep mem_write(Trigger t, std::string addr, u64 value) {
  AttackStep s;
  s.when = std::move(t);
  s.act.kind = AttackAction::Kind::Write;
  s.act.edit = {std::move(addr), value, false};
  return s;
}

inline AttackStep mem_read(Trigger t, std::string addr) {
  AttackStep s;
  s.when = std::move(t);
  s.act.kind = AttackAction::Kind::Read;
  s.act.edit = {std::move(addr), 0, false};
  return s;
}

// Write the value captured by the most recent read.
inline AttackStep mem_replay(Trigger t, std::string addr) {
  AttackStep s;
  s.when = std::move(t);
  s.act.kind = AttackAction::Kind::Write;
  s.act.edit = {std::move(addr), 0, true};
  return s;
}

inline AttackStep irq_inject(Trigger t, std::vector<CellEdit> edits) {
  AttackStep s;
  s.when = std::move(t);
  s.act.kind = AttackAction::Kind::Irq;
  s.act.irq_writes = std::move(edits);
  return s;
}

// The target is a code address the benign run never reaches; scenarios are
// built so that hitting it is unambiguous evidence of a redirect.
struct AttackScenario {
  std::string name;
  MachineProgram program;
  std::vector<AttackStep> schedule;
  std::string target;
  Machine::Options options;
};

struct AttackVerdict {
  std::string name;
  Outcome outcome = Outcome::Ineffective;
  TrapKind trap = TrapKind::None; // set when outcome == Blocked
  std::string trap_detail;
  u64 steps = 0; // instructions retired when the run settled
  u64 pc = 0;    // where control ended up
};

namespace advdetail {

inline std::string hex(u64 v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "0x%llx", (unsigned long long)v);
  return buf;
}

} // namespace advdetail

//===--- address resolution -------------------------------------------------//

inline u64 resolve_addr(const MachineProgram &p, const std::string &spec) {
  if (spec.empty())
    throw ScheduleInvalid("empty address");
  std::string base = spec;
  u64 off = 0;
  if (auto plus = spec.find('+'); plus != std::string::npos) {
    base = spec.substr(0, plus);
    try {
      off = std::stoull(spec.substr(plus + 1), nullptr, 0);
    } catch (const std::exception &) {
      throw ScheduleInvalid("bad offset in " + spec);
    }
  }
  if (!base.empty() && base[0] == '@') {
    auto a = p.symbol(base.substr(1));
    if (!a)
      throw ScheduleInvalid("unknown symbol " + base);
    return *a + off;
  }
  if (base == "irqsave")
    return kIrqSaveBase + off;
  try {
    return std::stoull(base, nullptr, 0) + off;
  } catch (const std::exception &) {
    throw ScheduleInvalid("bad address " + spec);
  }
}

//===--- validation and execution --------------------------------------------//

namespace advdetail {

// Mirrors the machine's writable window: the interrupt save page and the
// data/stack region. Everything else (text in particular) is off limits.
inline bool adversary_writable(u64 a) {
  return (a >= kIrqSaveBase && a < kIrqSaveBase + 0x1000) ||
         (a >= kDataBase && a < kStackTop);
}

inline void check_cell(const MachineProgram &p, const std::string &name,
                       const std::string &spec) {
  u64 a = resolve_addr(p, spec);
  if (a & 7)
    throw ScheduleInvalid(name + ": unaligned cell " + spec);
  if (!adversary_writable(a))
    throw ScheduleInvalid(name + ": cell outside attacker memory " + spec);
}

} // namespace advdetail

inline void validate_scenario(const AttackScenario &sc) {
  resolve_addr(sc.program, sc.target);
  bool captured = false;
  for (const AttackStep &st : sc.schedule) {
    switch (st.act.kind) {
    case AttackAction::Kind::Write:
      advdetail::check_cell(sc.program, sc.name, st.act.edit.addr);
      if (st.act.edit.from_read && !captured)
        throw ScheduleInvalid(sc.name + ": replay before any read");
      break;
    case AttackAction::Kind::Read:
      advdetail::check_cell(sc.program, sc.name, st.act.edit.addr);
      captured = true;
      break;
    case AttackAction::Kind::Irq:
      for (const CellEdit &e : st.act.irq_writes) {
        advdetail::check_cell(sc.program, sc.name, e.addr);
        if (e.from_read && !captured)
          throw ScheduleInvalid(sc.name + ": replay before any read");
      }
      break;
    }
  }
}

inline AttackVerdict run_scenario(const AttackScenario &sc, u64 seed) {
  validate_scenario(sc);
  Machine::Options o = sc.options;
  o.seed = seed;
  for (const AttackStep &st : sc.schedule)
    if (st.when.is_event())
      o.trace = true; // event triggers watch the machine's event stream
  Machine m(sc.program, o);
  const u64 target = resolve_addr(sc.program, sc.target);

  std::vector<char> fired(sc.schedule.size(), 0);
  std::size_t remaining = sc.schedule.size();
  std::optional<u64> tape;

  auto event_count = [&](const std::string &k) {
    int n = 0;
    for (const TraceEvent &e : m.events())
      n += (e.kind == k);
    return n;
  };
  auto due = [&](const Trigger &t) {
    return t.is_event() ? event_count(t.event) >= t.occurrence
                        : m.retired() >= t.retired;
  };
  auto value_of = [&](const CellEdit &e) {
    if (!e.from_read)
      return e.value;
    if (!tape)
      throw ScheduleInvalid(sc.name + ": replay before any read");
    return *tape;
  };

  AttackVerdict v;
  v.name = sc.name;
  // The success check only arms once every scheduled action has landed, so a
  // benign visit to a would-be target during setup cannot masquerade as a
  // redirect.
  bool armed = remaining == 0;
  const u64 cap = 1'000'000;
  while (m.running() && m.retired() < cap) {
    for (std::size_t i = 0; i < sc.schedule.size(); ++i) {
      if (fired[i] || !due(sc.schedule[i].when))
        continue;
      fired[i] = 1;
      --remaining;
      const AttackAction &a = sc.schedule[i].act;
      switch (a.kind) {
      case AttackAction::Kind::Write:
        if (!m.write_mem(resolve_addr(sc.program, a.edit.addr),
                         value_of(a.edit)))
          throw ScheduleInvalid(sc.name + ": write refused at " + a.edit.addr);
        break;
      case AttackAction::Kind::Read: {
        auto r = m.read_mem(resolve_addr(sc.program, a.edit.addr));
        if (!r)
          throw ScheduleInvalid(sc.name + ": read refused at " + a.edit.addr);
        tape = *r;
        break;
      }
      case AttackAction::Kind::Irq: {
        std::vector<MemWrite> ws;
        ws.reserve(a.irq_writes.size());
        for (const CellEdit &e : a.irq_writes)
          ws.push_back({resolve_addr(sc.program, e.addr), value_of(e)});
        m.irq(ws);
        break;
      }
      }
      if (!m.running())
        break;
    }
    if (remaining == 0)
      armed = true;
    if (!m.running())
      break;
    m.step();
    if (armed && m.running() && m.pc() == target) {
      v.outcome = Outcome::Hijacked;
      v.steps = m.retired();
      v.pc = m.pc();
      return v;
    }
  }

  v.steps = m.retired();
  v.pc = m.pc();
  if (m.trap().kind != TrapKind::None) {
    v.outcome = Outcome::Blocked;
    v.trap = m.trap().kind;
    v.trap_detail = m.trap().detail;
  } else {
    v.outcome = Outcome::Ineffective; // ran to halt (or out of patience)
  }
  return v;
}

inline AttackVerdict run_scenario(const AttackScenario &sc) {
  return run_scenario(sc, sc.options.seed);
}

//===--- probes ---------------------------------------------------------------//
//
// Scenario construction peeks at one benign run to learn layout facts an
// attacker with full memory read access would also learn: where a frame
// lands, which retired count corresponds to which fetch. All of these are
// key independent, so probe results hold across seeds.

namespace advdetail {

inline MachineProgram build_obj(const std::string &src, BuildOptions bo) {
  IRModule m = parse_module(src);
  AnalysisResult r = analyze_module(m);
  instrument_module(m, r);
  return lower_module(m, bo);
}

// Address range [lo, hi) of a named function's body in main text.
inline std::pair<u64, u64> func_extent(const MachineProgram &p,
                                       const std::string &fn) {
  u64 lo = 0;
  bool found = false;
  for (std::size_t i = 0; i < p.text.size(); ++i) {
    for (const auto &l : p.text[i].labels) {
      if (!l.is_func)
        continue;
      if (found)
        return {lo, kTextBase + kInstBytes * i};
      if (l.name == fn) {
        lo = kTextBase + kInstBytes * i;
        found = true;
      }
    }
  }
  if (!found)
    throw ScheduleInvalid("no function " + fn);
  return {lo, kTextBase + kInstBytes * p.text.size()};
}

struct FetchPoint {
  u64 retired = 0;
  u64 pc = 0;
};

// Pre-step (retired, pc) pairs of one benign run.
inline std::vector<FetchPoint> benign_points(const MachineProgram &p,
                                             Machine::Options o,
                                             u64 cap = 100000) {
  Machine m(p, o);
  std::vector<FetchPoint> out;
  while (m.running() && m.retired() < cap) {
    out.push_back({m.retired(), m.pc()});
    m.step();
  }
  return out;
}

// The n-th fetch inside `fn` whose instruction satisfies `pred`.
template <class Pred>
FetchPoint find_fetch(const MachineProgram &p, Machine::Options o,
                      const std::string &fn, Pred pred, int occurrence = 1) {
  auto [lo, hi] = func_extent(p, fn);
  Machine m(p, o);
  int seen = 0;
  while (m.running() && m.retired() < 100000) {
    if (m.pc() >= lo && m.pc() < hi) {
      const MachineInst *in = m.inst_at(m.pc());
      if (in && pred(*in) && ++seen == occurrence)
        return {m.retired(), m.pc()};
    }
    m.step();
  }
  throw ScheduleInvalid("probe never matched in " + fn);
}

// Value of sp when execution reaches `pc` for the n-th time.
inline u64 sp_at_fetch(const MachineProgram &p, Machine::Options o, u64 pc,
                       int occurrence = 1) {
  Machine m(p, o);
  int seen = 0;
  while (m.running() && m.retired() < 100000) {
    if (m.pc() == pc && ++seen == occurrence)
      return m.reg(kSp);
    m.step();
  }
  throw ScheduleInvalid("probe never reached " + hex(pc));
}

// Retired count at which a data cell first becomes nonzero.
inline u64 retired_when_cell_set(const MachineProgram &p, Machine::Options o,
                                 u64 addr) {
  Machine m(p, o);
  while (m.running() && m.retired() < 100000) {
    auto v = m.read_mem(addr);
    if (v && *v != 0)
      return m.retired();
    m.step();
  }
  throw ScheduleInvalid("cell never written: " + hex(addr));
}

// Address of the instruction after the n-th `bl callee` inside `fn`; this is
// the return address a frame of `callee` holds when called from there.
inline u64 return_site(const MachineProgram &p, const std::string &fn,
                       const std::string &callee, int occurrence = 1) {
  auto [lo, hi] = func_extent(p, fn);
  int seen = 0;
  for (std::size_t i = 0; i < p.text.size(); ++i) {
    u64 a = kTextBase + kInstBytes * i;
    if (a < lo || a >= hi)
      continue;
    const MachineInst &in = p.text[i].inst;
    if (in.op == MOp::Bl && in.sym == callee && ++seen == occurrence)
      return a + kInstBytes;
  }
  throw ScheduleInvalid("no call to " + callee + " in " + fn);
}

//===--- victim programs -----------------------------------------------------//

// Table dispatch. @svc_debug is a live, registered handler that the benign
// run never calls; every forward-edge scenario tries to reach it.
inline const char *kVictimCall = R"(
type %tbl = struct { pri: fn(i64) @8, alt: fn(i64) @8 }
global @handlers : %tbl = { @svc_read, @svc_debug }

func @svc_read(%x: i64) {
entry:
  %r = add %x, 1
  ret %r
}

func @svc_debug(%x: i64) {
entry:
  %r = add %x, 99
  ret %r
}

func @main() {
entry:
  %p = gep @handlers, 0
  %f = load fn(i64), %p
  %r = callptr %f(7)
  ret %r
}
)";

// Load, store to a second cell, reload, call. The store leg is the signing
// surface; @spare keeps the unreached handler registered.
inline const char *kVictimStore = R"(
global @active : fn(i64) = null
global @preset : fn(i64) = @svc_read
global @spare : fn(i64) = @svc_debug

func @svc_read(%x: i64) {
entry:
  %r = add %x, 1
  ret %r
}

func @svc_debug(%x: i64) {
entry:
  %r = add %x, 99
  ret %r
}

func @main() {
entry:
  %f = load fn(i64), @preset
  store %f, @active
  %g = load fn(i64), @active
  %r = callptr %g(7)
  ret %r
}
)";

// Return-edge victim: main spills its return address around two calls.
inline const char *kVictimRet = R"(
func @compute(%a: i64) {
entry:
  %r = add %a, 3
  ret %r
}

func @svc_debug(%x: i64) {
entry:
  %r = add %x, 99
  ret %r
}

func @main() {
entry:
  %x = call @compute(1)
  %y = call @compute(2)
  %s = add %x, %y
  ret %s
}
)";

// Replay victim: @work is entered at two different stack depths, once under
// @outer and once directly, so its two frames sign against different sp.
inline const char *kVictimReplay = R"(
func @compute(%a: i64) {
entry:
  %r = add %a, 3
  ret %r
}

func @work(%a: i64) {
entry:
  %r = call @compute(%a)
  ret %r
}

func @outer(%a: i64) {
entry:
  %r = call @work(%a)
  ret %r
}

func @main() {
entry:
  %x = call @outer(1)
  %y = call @work(2)
  %s = add %x, %y
  ret %s
}
)";

inline u64 raw_fn_addr(const MachineProgram &p, const std::string &fn) {
  auto a = p.symbol(fn);
  if (!a)
    throw ScheduleInvalid("no function " + fn);
  return *a;
}

} // namespace advdetail

//===--- catalog --------------------------------------------------------------//

struct CatalogCase {
  AttackScenario scenario;
  Outcome expected;
};

inline std::vector<CatalogCase> scenario_catalog() {
  using namespace advdetail;
  std::vector<CatalogCase> out;
  const Machine::Options probe{};

  // Forward edge, dispatch table victims.
  {
    MachineProgram prot = build_obj(kVictimCall, {BuildMode::Protected, true});
    MachineProgram compat = build_obj(kVictimCall, {BuildMode::Compat, true});
    u64 evil = raw_fn_addr(prot, "svc_debug");

    // Overwrite the signed slot with a raw function address.
    AttackScenario sc;
    sc.name = "fp_corruption";
    sc.program = prot;
    sc.target = "@svc_debug";
    sc.schedule.push_back(mem_write(at_event("free_init"), "@handlers+0x0", evil));
    out.push_back({sc, Outcome::Blocked});

    // Replay a validly signed pointer into a different slot of the same type.
    AttackScenario sub;
    sub.name = "fp_substitution_cross_address";
    sub.program = prot;
    sub.target = "@svc_debug";
    sub.schedule.push_back(mem_read(at_event("free_init"), "@handlers+0x8"));
    sub.schedule.push_back(mem_replay(at_event("free_init"), "@handlers+0x0"));
    out.push_back({sub, Outcome::Blocked});

    // Same substitution against type-hash contexts: both slots share a
    // signature, so the replay authenticates.
    AttackScenario subc = sub;
    subc.name = "fp_substitution_same_type_compat";
    subc.program = compat;
    out.push_back({subc, Outcome::Hijacked});

    // Guess the 7-bit code outright. One fixed guess; at the default seed it
    // misses. The hit rate across seeds is measured by guess_pac_trials.
    AttackScenario g;
    g.name = "guess_pac";
    g.program = prot;
    g.target = "@svc_debug";
    u64 forged = (evil & ~kPacFieldMask) | (u64(0x2A) << kPacShift);
    g.schedule.push_back(mem_write(at_event("free_init"), "@handlers+0x0", forged));
    out.push_back({g, Outcome::Blocked});
  }

  // Store leg: corruption between the signed store and its later use, and
  // the sign-then-store gadget.
  {
    MachineProgram prot = build_obj(kVictimStore, {BuildMode::Protected, true});
    MachineProgram gadget = build_obj(kVictimStore, {BuildMode::Protected, false});
    u64 evil = raw_fn_addr(prot, "svc_debug");
    u64 active = resolve_addr(prot, "@active");

    AttackScenario w;
    w.name = "store_window";
    w.program = prot;
    w.target = "@svc_debug";
    w.schedule.push_back(mem_write(
        at_retired(retired_when_cell_set(prot, probe, active)), "@active", evil));
    out.push_back({w, Outcome::Blocked});

    // Feed a raw address into the load-then-store path. With load
    // authentication the bad value dies at the load; without it the store
    // leg launders it into a validly signed pointer.
    AttackScenario s;
    s.name = "signing_gadget";
    s.program = prot;
    s.target = "@svc_debug";
    s.schedule.push_back(mem_write(at_event("free_init"), "@preset", evil));
    out.push_back({s, Outcome::Blocked});

    AttackScenario su = s;
    su.name = "signing_gadget_unchecked_load";
    su.program = gadget;
    out.push_back({su, Outcome::Hijacked});
  }

  // Return edge.
  {
    MachineProgram prot = build_obj(kVictimRet, {BuildMode::Protected, true});
    MachineProgram legacy = build_obj(kVictimRet, {BuildMode::Legacy, true});
    u64 evil = raw_fn_addr(prot, "svc_debug");

    // Overwrite the spilled return address mid-body.
    auto spill = find_fetch(prot, probe, "main", [](const MachineInst &in) {
      return in.op == MOp::Stp || in.op == MOp::Str;
    });
    u64 slot = sp_at_fetch(prot, probe, spill.pc);
    auto mid = find_fetch(
        prot, probe, "main",
        [](const MachineInst &in) { return in.op == MOp::Bl; }, 2);
    AttackScenario rc;
    rc.name = "ret_corruption";
    rc.program = prot;
    rc.target = "@svc_debug";
    rc.schedule.push_back(mem_write(at_retired(mid.retired), hex(slot), evil));
    out.push_back({rc, Outcome::Blocked});

    // Interrupt in the authenticate-to-return window. The split epilogue
    // leaves a gap at the final plain return; the combined return closes it.
    auto legacy_ret = find_fetch(legacy, probe, "main", [](const MachineInst &in) {
      return in.op == MOp::Ret;
    });
    AttackScenario tl;
    tl.name = "toctou_legacy_ret";
    tl.program = legacy;
    tl.target = "@svc_debug";
    tl.schedule.push_back(
        irq_inject(at_retired(legacy_ret.retired), {{"irqsave+0xE8", evil, false}}));
    out.push_back({tl, Outcome::Hijacked});

    auto prot_ret = find_fetch(prot, probe, "main", [](const MachineInst &in) {
      return in.op == MOp::Retaa;
    });
    AttackScenario tr;
    tr.name = "toctou_retaa";
    tr.program = prot;
    tr.target = "@svc_debug";
    tr.schedule.push_back(
        irq_inject(at_retired(prot_ret.retired), {{"irqsave+0xE8", evil, false}}));
    out.push_back({tr, Outcome::Blocked});
  }

  // Cross-frame replay: capture @work's signed return address from the
  // deeper activation, inject it into the shallower one.
  {
    MachineProgram prot = build_obj(kVictimReplay, {BuildMode::Protected, true});
    auto spill1 = find_fetch(prot, probe, "work", [](const MachineInst &in) {
      return in.op == MOp::Stp || in.op == MOp::Str;
    });
    auto spill2 = find_fetch(
        prot, probe, "work",
        [](const MachineInst &in) {
          return in.op == MOp::Stp || in.op == MOp::Str;
        },
        2);
    u64 slot_deep = sp_at_fetch(prot, probe, spill1.pc, 1);
    u64 slot_shallow = sp_at_fetch(prot, probe, spill1.pc, 2);
    AttackScenario rp;
    rp.name = "ret_replay_cross_frame";
    rp.program = prot;
    rp.target = hex(return_site(prot, "outer", "work"));
    rp.schedule.push_back(mem_read(at_retired(spill1.retired + 1), hex(slot_deep)));
    rp.schedule.push_back(
        mem_replay(at_retired(spill2.retired + 1), hex(slot_shallow)));
    out.push_back({rp, Outcome::Blocked});
  }

  return out;
}

//===--- sweeps and statistics ------------------------------------------------//

// Interrupt at every fetch point of main's activation after its return
// address is signed, corrupting both the spilled register file and the stack
// slot. Counts how each injection fares.
struct SweepReport {
  int points = 0;
  int blocked = 0;
  int hijacked = 0;
  int ineffective = 0;
  u64 first_hijack_retired = 0;
};

inline SweepReport toctou_sweep(BuildMode mode,
                                u64 seed = Machine::Options{}.seed) {
  using namespace advdetail;
  MachineProgram p = build_obj(kVictimRet, {mode, true});
  u64 evil = raw_fn_addr(p, "svc_debug");
  auto [lo, hi] = func_extent(p, "main");
  Machine::Options o;
  o.seed = seed;

  auto signp = find_fetch(p, o, "main", [](const MachineInst &in) {
    return in.op == MOp::Paciasp;
  });
  auto spill = find_fetch(p, o, "main", [](const MachineInst &in) {
    return in.op == MOp::Stp || in.op == MOp::Str;
  });
  u64 slot = sp_at_fetch(p, o, spill.pc);

  SweepReport rep;
  for (const FetchPoint &fp : benign_points(p, o)) {
    if (fp.pc < lo || fp.pc >= hi || fp.retired <= signp.retired)
      continue;
    AttackScenario sc;
    sc.name = "toctou_sweep@" + std::to_string(fp.retired);
    sc.program = p;
    sc.target = "@svc_debug";
    sc.schedule.push_back(irq_inject(
        at_retired(fp.retired),
        {{"irqsave+0xE8", evil, false}, {hex(slot), evil, false}}));
    AttackVerdict v = run_scenario(sc, seed);
    ++rep.points;
    switch (v.outcome) {
    case Outcome::Blocked:
      ++rep.blocked;
      break;
    case Outcome::Hijacked:
      ++rep.hijacked;
      if (rep.first_hijack_retired == 0)
        rep.first_hijack_retired = fp.retired;
      break;
    case Outcome::Ineffective:
      ++rep.ineffective;
      break;
    }
  }
  return rep;
}

// Fresh key per trial, one fixed 7-bit guess per trial. Hits should track a
// 1-in-128 rate.
struct GuessReport {
  int trials = 0;
  int hits = 0;
};

inline GuessReport guess_pac_trials(int trials = 1280, u64 seed_base = 1) {
  using namespace advdetail;
  MachineProgram p = build_obj(kVictimCall, {BuildMode::Protected, true});
  u64 evil = raw_fn_addr(p, "svc_debug");
  u64 forged = (evil & ~kPacFieldMask) | (u64(0x2A) << kPacShift);

  AttackScenario sc;
  sc.name = "guess_pac";
  sc.program = p;
  sc.target = "@svc_debug";
  sc.schedule.push_back(mem_write(at_event("free_init"), "@handlers+0x0", forged));

  GuessReport r;
  r.trials = trials;
  for (int i = 0; i < trials; ++i)
    if (run_scenario(sc, seed_base + u64(i)).outcome == Outcome::Hijacked)
      ++r.hits;
  return r;
}

} // namespace pacter
