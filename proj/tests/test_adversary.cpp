#include "catch_amalgamated.hpp"

#include "pacter/adversary.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <map>
#include <string>
#include <vector>

using namespace pacter;

namespace {

const CatalogCase &pick(const std::vector<CatalogCase> &cat,
                        const std::string &name) {
  for (const CatalogCase &c : cat)
    if (c.scenario.name == name)
      return c;
  FAIL("no catalog case named " << name);
  static CatalogCase dummy;
  return dummy;
}

// Same derivation the machine uses at boot: two splitmix64 draws, low half
// first.
Key128 key_for_seed(u64 seed) {
  u64 s = seed;
  Key128 k;
  k.lo = pacter::detail::splitmix64(s);
  k.hi = pacter::detail::splitmix64(s);
  return k;
}

u8 pac_of(u64 signed_word) { return u8((signed_word >> kPacShift) & 0x7F); }

// Central 99% region of Binomial(n, p), computed from the pmf directly:
// trim 0.5% tails from each side.
std::pair<int, int> binom99(int n, double p) {
  std::vector<double> pmf(std::size_t(n) + 1);
  for (int k = 0; k <= n; ++k) {
    double logc = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) -
                  std::lgamma(double(n - k) + 1.0);
    pmf[std::size_t(k)] =
        std::exp(logc + k * std::log(p) + (n - k) * std::log1p(-p));
  }
  int lo = 0;
  double acc = 0;
  while (lo <= n && acc + pmf[std::size_t(lo)] <= 0.005)
    acc += pmf[std::size_t(lo)], ++lo;
  int hi = n;
  acc = 0;
  while (hi >= 0 && acc + pmf[std::size_t(hi)] <= 0.005)
    acc += pmf[std::size_t(hi)], --hi;
  return {lo, hi};
}

} // namespace

TEST_CASE("catalog verdicts match their expected outcomes") {
  auto cat = scenario_catalog();
  REQUIRE(cat.size() >= 9);
  for (const CatalogCase &c : cat) {
    AttackVerdict v = run_scenario(c.scenario);
    INFO(c.scenario.name);
    CHECK(v.outcome == c.expected);
    if (c.expected == Outcome::Blocked)
      CHECK(v.trap != TrapKind::None);
    if (c.expected == Outcome::Hijacked)
      CHECK(v.pc == resolve_addr(c.scenario.program, c.scenario.target));
  }
}

TEST_CASE("raw slot corruption is caught at the branch, not at the write") {
  auto cat = scenario_catalog();
  const AttackScenario &sc = pick(cat, "fp_corruption").scenario;
  AttackVerdict v = run_scenario(sc);
  REQUIRE(v.outcome == Outcome::Blocked);
  // The bad value travels all the way to the indirect branch and dies as a
  // stripped-tag fetch, not as a memory fault at the overwrite.
  CHECK(v.trap == TrapKind::FetchFault);

  // The same overwrite on a build without pointer signing lands.
  AttackScenario bare = sc;
  bare.program =
      advdetail::build_obj(advdetail::kVictimCall, {BuildMode::Unprotected, true});
  AttackVerdict w = run_scenario(bare);
  CHECK(w.outcome == Outcome::Hijacked);
  CHECK(w.pc == *bare.program.symbol("svc_debug"));
}

TEST_CASE("substitution verdicts track pac collisions exactly, per seed") {
  auto cat = scenario_catalog();
  const AttackScenario &prot = pick(cat, "fp_substitution_cross_address").scenario;
  const AttackScenario &compat =
      pick(cat, "fp_substitution_same_type_compat").scenario;

  u64 evil = *prot.program.symbol("svc_debug");
  u64 h0 = resolve_addr(prot.program, "@handlers+0x0");
  u64 h8 = resolve_addr(prot.program, "@handlers+0x8");

  int collisions = 0;
  for (u64 seed = 0; seed < 100; ++seed) {
    // Oracle: the replayed word authenticates at the new slot iff the two
    // address contexts truncate to the same 7-bit code under this key.
    Key128 k = key_for_seed(seed);
    bool collide = pac_of(sign(k, evil, h8)) == pac_of(sign(k, evil, h0));
    collisions += collide;

    AttackVerdict pv = run_scenario(prot, seed);
    INFO("seed " << seed);
    CHECK(pv.outcome == (collide ? Outcome::Hijacked : Outcome::Blocked));

    // Type-hash contexts are position independent, so the replay always
    // authenticates regardless of key.
    AttackVerdict cv = run_scenario(compat, seed);
    CHECK(cv.outcome == Outcome::Hijacked);
  }
  // ~1/128 per seed; anything beyond a handful means the oracle and the
  // machine disagree about what a collision is.
  CHECK(collisions <= 5);
}

TEST_CASE("cross-frame return replay dies on the frame context") {
  auto cat = scenario_catalog();
  const CatalogCase &c = pick(cat, "ret_replay_cross_frame");
  AttackVerdict v = run_scenario(c.scenario);
  CHECK(v.outcome == Outcome::Blocked);
  CHECK(v.trap == TrapKind::FetchFault);

  // Oracle for why: the captured word really is a valid signature for the
  // deep frame and an invalid one for the shallow frame.
  MachineProgram p = c.scenario.program;
  REQUIRE(c.scenario.schedule.size() == 2);
  u64 slot_deep = resolve_addr(p, c.scenario.schedule[0].act.edit.addr);
  u64 slot_shallow = resolve_addr(p, c.scenario.schedule[1].act.edit.addr);
  REQUIRE(slot_deep != slot_shallow);

  Machine m(p);
  u64 captured = 0;
  while (m.running() && m.retired() < 100000) {
    auto cell = m.read_mem(slot_deep);
    if (m.pa_ready() && cell && *cell != 0) {
      captured = *cell;
      break;
    }
    m.step();
  }
  REQUIRE(captured != 0);
  // The signing context is the frame's entry sp, which sits one frame size
  // above the spill slot. Recover both entry sp values from the prologue.
  using namespace advdetail;
  auto sig1 = find_fetch(p, Machine::Options{}, "work", [](const MachineInst &in) {
    return in.op == MOp::Paciasp;
  });
  u64 ctx_deep = sp_at_fetch(p, Machine::Options{}, sig1.pc, 1);
  u64 ctx_shallow = sp_at_fetch(p, Machine::Options{}, sig1.pc, 2);
  REQUIRE(ctx_deep != ctx_shallow);
  const Key128 &k = m.key_for_audit();
  CHECK(authenticate(k, captured, ctx_deep) == strip_pac(captured));
  CHECK(classify(authenticate(k, captured, ctx_shallow)) == PtrForm::Poisoned);
  // And the replay's destination is the landing pad the attack aims for.
  CHECK(strip_pac(captured) == resolve_addr(p, c.scenario.target));
}

TEST_CASE("split epilogue leaves an interrupt window; fused return does not") {
  auto cat = scenario_catalog();
  AttackVerdict legacy = run_scenario(pick(cat, "toctou_legacy_ret").scenario);
  CHECK(legacy.outcome == Outcome::Hijacked);

  AttackVerdict fused = run_scenario(pick(cat, "toctou_retaa").scenario);
  CHECK(fused.outcome == Outcome::Blocked);
  CHECK(fused.trap == TrapKind::FetchFault);
}

TEST_CASE("interrupt sweep: no point in the protected activation is open") {
  SweepReport prot = toctou_sweep(BuildMode::Protected);
  CHECK(prot.points > 5);
  CHECK(prot.points <= 10000);
  CHECK(prot.hijacked == 0);
  CHECK(prot.ineffective == 0);
  CHECK(prot.blocked == prot.points);

  // The split epilogue has one extra instruction (the authenticate) in the
  // swept window, so its activation is one point longer.
  SweepReport legacy = toctou_sweep(BuildMode::Legacy);
  CHECK(legacy.points == prot.points + 1);
  CHECK(legacy.hijacked == 1);
  CHECK(legacy.blocked == legacy.points - 1);

  // The one open point is the plain return after the authenticate, and
  // nowhere else.
  using namespace advdetail;
  MachineProgram lp = build_obj(kVictimRet, {BuildMode::Legacy, true});
  auto ret = find_fetch(lp, Machine::Options{}, "main", [](const MachineInst &in) {
    return in.op == MOp::Ret;
  });
  CHECK(legacy.first_hijack_retired == ret.retired);
}

TEST_CASE("unchecked loads turn the store path into a signing oracle") {
  auto cat = scenario_catalog();
  AttackVerdict guarded = run_scenario(pick(cat, "signing_gadget").scenario);
  CHECK(guarded.outcome == Outcome::Blocked);

  const AttackScenario &sc = pick(cat, "signing_gadget_unchecked_load").scenario;
  AttackVerdict laundered = run_scenario(sc);
  CHECK(laundered.outcome == Outcome::Hijacked);

  // Oracle: after the gadget runs, @active holds a word that authenticates
  // against its own address and strips to the attacker's raw target. The
  // attacker never knew the key; the victim signed for them.
  u64 active = resolve_addr(sc.program, "@active");
  u64 evil = *sc.program.symbol("svc_debug");
  Machine::Options o;
  o.trace = true;
  Machine m(sc.program, o);
  bool planted = false;
  u64 cell = 0;
  while (m.running() && m.retired() < 100000) {
    if (!planted) {
      int freed = 0;
      for (const TraceEvent &e : m.events())
        freed += (e.kind == "free_init");
      if (freed) {
        REQUIRE(m.write_mem(resolve_addr(sc.program, "@preset"), evil));
        planted = true;
      }
    }
    auto v = m.read_mem(active);
    if (planted && v && *v != 0) {
      cell = *v;
      break;
    }
    m.step();
  }
  REQUIRE(cell != 0);
  const Key128 &k = m.key_for_audit();
  CHECK(authenticate(k, cell, active) == strip_pac(cell));
  CHECK(strip_pac(cell) == evil);
}

TEST_CASE("store window corruption is still caught at the branch") {
  auto cat = scenario_catalog();
  AttackVerdict v = run_scenario(pick(cat, "store_window").scenario);
  CHECK(v.outcome == Outcome::Blocked);
  CHECK(v.trap == TrapKind::FetchFault);
}

TEST_CASE("guessing the code succeeds at the truncation rate and no more") {
  auto [lo, hi] = binom99(1280, 1.0 / 128.0);
  // Sanity on the oracle itself: the region surrounds the mean of 10 and is
  // far from letting 0 or 10x the mean through.
  REQUIRE(lo >= 1);
  REQUIRE(lo <= 10);
  REQUIRE(hi >= 10);
  REQUIRE(hi <= 25);

  GuessReport r = guess_pac_trials(1280, 1);
  CHECK(r.trials == 1280);
  CHECK(r.hits >= lo);
  CHECK(r.hits <= hi);

  // Exact per-seed oracle: a trial hits iff the true code for the target at
  // the attacked slot equals the fixed guess under that trial's key.
  MachineProgram p =
      advdetail::build_obj(advdetail::kVictimCall, {BuildMode::Protected, true});
  u64 evil = *p.symbol("svc_debug");
  u64 h0 = resolve_addr(p, "@handlers+0x0");
  int predicted = 0;
  for (u64 seed = 1; seed <= 1280; ++seed)
    predicted += (pac_of(sign(key_for_seed(seed), evil, h0)) == 0x2A);
  CHECK(r.hits == predicted);
}

TEST_CASE("schedules cannot touch text, registers, or unmapped space") {
  auto cat = scenario_catalog();
  AttackScenario sc = pick(cat, "fp_corruption").scenario;

  AttackScenario text_write = sc;
  text_write.schedule = {mem_write(at_retired(0), "@main", 0)};
  CHECK_THROWS_AS(run_scenario(text_write), ScheduleInvalid);

  AttackScenario unknown = sc;
  unknown.schedule = {mem_write(at_retired(0), "@no_such_thing", 0)};
  CHECK_THROWS_AS(run_scenario(unknown), ScheduleInvalid);

  AttackScenario unaligned = sc;
  unaligned.schedule = {mem_write(at_retired(0), "@handlers+0x3", 0)};
  CHECK_THROWS_AS(run_scenario(unaligned), ScheduleInvalid);

  AttackScenario replay_first = sc;
  replay_first.schedule = {mem_replay(at_retired(0), "@handlers+0x0")};
  CHECK_THROWS_AS(run_scenario(replay_first), ScheduleInvalid);

  AttackScenario bad_target = sc;
  bad_target.target = "@nowhere";
  CHECK_THROWS_AS(run_scenario(bad_target), ScheduleInvalid);
}

TEST_CASE("writes before key setup are blessed by boot signing") {
  // The model trusts whatever the table holds when the keys come up. A write
  // that lands before then is indistinguishable from init data, which is why
  // the threat model starts the adversary after boot.
  auto cat = scenario_catalog();
  AttackScenario sc = pick(cat, "fp_corruption").scenario;
  u64 evil = *sc.program.symbol("svc_debug");
  sc.name = "preboot_write";
  sc.schedule = {mem_write(at_retired(0), "@handlers+0x0", evil)};
  AttackVerdict v = run_scenario(sc);
  CHECK(v.outcome == Outcome::Hijacked);
}

TEST_CASE("an attack that never perturbs the used path is ineffective") {
  auto cat = scenario_catalog();
  AttackScenario sc = pick(cat, "fp_corruption").scenario;
  u64 evil = *sc.program.symbol("svc_debug");
  sc.name = "wrong_slot";
  // Clobber the slot the benign run never loads.
  sc.schedule = {mem_write(at_event("free_init"), "@handlers+0x8", evil)};
  AttackVerdict v = run_scenario(sc);
  CHECK(v.outcome == Outcome::Ineffective);
  CHECK(v.trap == TrapKind::None);
}

TEST_CASE("verdicts are reproducible and scenarios are isolated") {
  auto cat = scenario_catalog();
  const AttackScenario &sc = pick(cat, "fp_substitution_cross_address").scenario;

  AttackVerdict a = run_scenario(sc, 7);
  AttackVerdict b = run_scenario(sc, 7);
  CHECK(a.outcome == b.outcome);
  CHECK(a.steps == b.steps);
  CHECK(a.pc == b.pc);
  CHECK(a.trap == b.trap);

  // The whole catalog run concurrently agrees with the serial run: every
  // scenario owns its machine and shares nothing.
  std::vector<AttackVerdict> serial;
  for (const CatalogCase &c : cat)
    serial.push_back(run_scenario(c.scenario));
  std::vector<std::future<AttackVerdict>> futs;
  for (const CatalogCase &c : cat)
    futs.push_back(std::async(std::launch::async,
                              [&c] { return run_scenario(c.scenario); }));
  for (std::size_t i = 0; i < futs.size(); ++i) {
    AttackVerdict v = futs[i].get();
    CHECK(v.outcome == serial[i].outcome);
    CHECK(v.steps == serial[i].steps);
  }
}
