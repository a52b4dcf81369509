//===--- pacter/harness.hpp - corpus driver and regression suite ---------===//
//
// Loads .ir corpus cases with optional hand-written .labels (ground truth
// for the identification pass) and .expect (observable results) sidecars,
// builds each case with and without pointer signing, runs both images, and
// aggregates everything together with the attack catalog into one report.
//
//===----------------------------------------------------------------------===//

#pragma once

#include "pacter/adversary.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <future>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace pacter {

struct HarnessError : std::runtime_error {
  explicit HarnessError(const std::string &m) : std::runtime_error(m) {}
};

struct CorpusCase {
  std::string name;
  std::filesystem::path ir_path;
  std::string ir_text;
  std::optional<std::string> labels_text;

  struct Expect {
    std::optional<u64> ret;
    std::vector<std::pair<std::string, u64>> cells; // ("@out+0x0", value)
    std::optional<u64> retired_on;
    std::optional<u64> retired_off;
  };
  std::optional<Expect> expect;
};

namespace hdetail {

inline std::string slurp(const std::filesystem::path &p) {
  std::ifstream in(p, std::ios::binary);
  if (!in)
    throw HarnessError("cannot read " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline std::string trim(const std::string &s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos)
    return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Line set for order-insensitive comparison of label files.
inline std::multiset<std::string> label_lines(const std::string &text) {
  std::multiset<std::string> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    std::string t = trim(line);
    if (!t.empty() && t[0] != '#')
      out.insert(t);
  }
  return out;
}

inline u64 parse_u64(const std::string &s, const std::string &where) {
  try {
    return std::stoull(s, nullptr, 0);
  } catch (const std::exception &) {
    throw HarnessError("bad number '" + s + "' in " + where);
  }
}

inline CorpusCase::Expect parse_expect(const std::string &text,
                                       const std::string &where) {
  CorpusCase::Expect e;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    std::string t = trim(line);
    if (t.empty() || t[0] == '#')
      continue;
    std::istringstream ls(t);
    std::string key;
    ls >> key;
    if (key == "ret") {
      std::string v;
      ls >> v;
      e.ret = parse_u64(v, where);
    } else if (key == "cell") {
      std::string addr, v;
      ls >> addr >> v;
      if (addr.empty() || v.empty())
        throw HarnessError("bad cell line in " + where);
      e.cells.emplace_back(addr, parse_u64(v, where));
    } else if (key == "retired_on") {
      std::string v;
      ls >> v;
      e.retired_on = parse_u64(v, where);
    } else if (key == "retired_off") {
      std::string v;
      ls >> v;
      e.retired_off = parse_u64(v, where);
    } else {
      throw HarnessError("unknown expect key '" + key + "' in " + where);
    }
  }
  return e;
}

} // namespace hdetail

inline CorpusCase load_case(const std::filesystem::path &ir_path) {
  CorpusCase c;
  c.name = ir_path.stem().string();
  c.ir_path = ir_path;
  c.ir_text = hdetail::slurp(ir_path);
  std::filesystem::path labels = ir_path;
  labels.replace_extension(".labels");
  if (std::filesystem::exists(labels))
    c.labels_text = hdetail::slurp(labels);
  std::filesystem::path expect = ir_path;
  expect.replace_extension(".expect");
  if (std::filesystem::exists(expect))
    c.expect = hdetail::parse_expect(hdetail::slurp(expect), expect.string());
  return c;
}

inline std::vector<CorpusCase> load_corpus(const std::filesystem::path &dir) {
  std::vector<CorpusCase> out;
  if (!std::filesystem::exists(dir))
    return out;
  for (const auto &de : std::filesystem::directory_iterator(dir))
    if (de.is_regular_file() && de.path().extension() == ".ir")
      out.push_back(load_case(de.path()));
  std::sort(out.begin(), out.end(),
            [](const CorpusCase &a, const CorpusCase &b) { return a.name < b.name; });
  return out;
}

//===--- per-case execution ---------------------------------------------------//

struct OverheadReport {
  u64 retired_on = 0;
  u64 retired_off = 0;
  double ratio = 0;
  u64 image_on = 0; // code bytes, all sections
  u64 image_off = 0;
  double image_ratio = 0;
};

struct CaseResult {
  std::string name;
  bool ok = false;
  std::vector<std::string> failures;
  bool labels_checked = false;
  bool labels_match = false;
  CoverageReport coverage; // of the signed build
  u64 ret_on = 0;
  u64 ret_off = 0;
  OverheadReport overhead;
};

namespace hdetail {

inline u64 image_bytes(const MachineProgram &p) {
  return kInstBytes * (p.text.size() + p.init_text.size() + p.irq_text.size());
}

struct RunOut {
  u64 retired = 0;
  u64 r0 = 0;
  bool clean = false;
  std::string why;
  std::vector<u64> cells;
};

inline RunOut run_image(const MachineProgram &p, u64 seed,
                        const std::vector<u64> &cell_addrs) {
  Machine::Options o;
  o.seed = seed;
  Machine m(p, o);
  u64 before = m.retired();
  m.run(1'000'000);
  RunOut r;
  r.retired = m.retired() - before;
  r.r0 = m.reg(0);
  if (m.trap().kind != TrapKind::None)
    r.why = std::string("trap: ") + trap_name(m.trap().kind) + " " +
            m.trap().detail;
  else if (!m.halted())
    r.why = "did not halt";
  else
    r.clean = true;
  for (u64 a : cell_addrs) {
    auto v = m.read_mem(a);
    r.cells.push_back(v ? *v : ~u64(0));
  }
  return r;
}

} // namespace hdetail

inline CaseResult run_case(const CorpusCase &c, u64 seed = Machine::Options{}.seed) {
  CaseResult res;
  res.name = c.name;
  auto fail = [&](std::string m) { res.failures.push_back(std::move(m)); };
  try {
    IRModule mod = parse_module(c.ir_text);
    AnalysisResult ar = analyze_module(mod);
    if (c.labels_text) {
      res.labels_checked = true;
      res.labels_match =
          hdetail::label_lines(dump_fpset(ar)) == hdetail::label_lines(*c.labels_text);
      if (!res.labels_match)
        fail("identified fp set differs from hand labels");
    }
    instrument_module(mod, ar);
    MachineProgram on = lower_module(mod, {BuildMode::Protected, true});
    MachineProgram off = lower_module(mod, {BuildMode::Unprotected, true});

    res.coverage = coverage_scan(on);
    if (res.coverage.n_blr != 0)
      fail("signed build still contains raw indirect calls");
    for (const auto &off_ : res.coverage.offenders)
      fail("coverage: " + off_.func + ": " + off_.reason);

    std::vector<u64> cell_addrs;
    if (c.expect)
      for (const auto &[spec, want] : c.expect->cells) {
        (void)want;
        cell_addrs.push_back(resolve_addr(on, spec));
      }

    hdetail::RunOut ron = hdetail::run_image(on, seed, cell_addrs);
    hdetail::RunOut roff = hdetail::run_image(off, seed, cell_addrs);
    if (!ron.clean)
      fail("signed build: " + ron.why);
    if (!roff.clean)
      fail("plain build: " + roff.why);
    res.ret_on = ron.r0;
    res.ret_off = roff.r0;

    if (ron.clean && roff.clean) {
      if (ron.r0 != roff.r0)
        fail("result register differs between builds");
      for (std::size_t i = 0; i < cell_addrs.size(); ++i)
        if (ron.cells[i] != roff.cells[i])
          fail("observable cell " + c.expect->cells[i].first +
               " differs between builds");
      if (c.expect) {
        if (c.expect->ret && ron.r0 != *c.expect->ret)
          fail("result register != expected");
        for (std::size_t i = 0; i < cell_addrs.size(); ++i)
          if (ron.cells[i] != c.expect->cells[i].second)
            fail("cell " + c.expect->cells[i].first + " != expected");
        if (c.expect->retired_on && ron.retired != *c.expect->retired_on)
          fail("signed build retired " + std::to_string(ron.retired) +
               ", expected " + std::to_string(*c.expect->retired_on));
        if (c.expect->retired_off && roff.retired != *c.expect->retired_off)
          fail("plain build retired " + std::to_string(roff.retired) +
               ", expected " + std::to_string(*c.expect->retired_off));
      }
    }

    res.overhead.retired_on = ron.retired;
    res.overhead.retired_off = roff.retired;
    res.overhead.ratio =
        roff.retired ? double(ron.retired) / double(roff.retired) : 0.0;
    res.overhead.image_on = hdetail::image_bytes(on);
    res.overhead.image_off = hdetail::image_bytes(off);
    res.overhead.image_ratio =
        res.overhead.image_off
            ? double(res.overhead.image_on) / double(res.overhead.image_off)
            : 0.0;
  } catch (const std::exception &e) {
    fail(e.what());
  }
  res.ok = res.failures.empty();
  return res;
}

inline OverheadReport overhead_report(const CorpusCase &c,
                                      u64 seed = Machine::Options{}.seed) {
  return run_case(c, seed).overhead;
}

//===--- suite ---------------------------------------------------------------//

struct SuiteReport {
  std::vector<CaseResult> cases; // sorted by name
  struct VerdictRow {
    std::string name;
    Outcome expected = Outcome::Blocked;
    AttackVerdict got;
    bool ok = false;
  };
  std::vector<VerdictRow> verdicts;
  int cases_passed = 0;
  int verdicts_passed = 0;
  bool ok = false;
};

inline SuiteReport run_suite(const std::filesystem::path &corpus_dir,
                             u64 seed = Machine::Options{}.seed) {
  SuiteReport rep;

  std::vector<CorpusCase> cases = load_corpus(corpus_dir);
  if (cases.empty()) {
    // Nothing to drive. An empty directory almost always means a wrong
    // path, so report exactly that instead of padding the output with
    // catalog rows that say nothing about the user's corpus.
    rep.ok = true;
    return rep;
  }
  std::vector<std::future<CaseResult>> case_futs;
  case_futs.reserve(cases.size());
  for (const CorpusCase &c : cases)
    case_futs.push_back(std::async(std::launch::async,
                                   [&c, seed] { return run_case(c, seed); }));
  for (auto &f : case_futs)
    rep.cases.push_back(f.get());

  std::vector<CatalogCase> cat = scenario_catalog();
  std::vector<std::future<AttackVerdict>> v_futs;
  v_futs.reserve(cat.size());
  for (const CatalogCase &c : cat)
    v_futs.push_back(std::async(std::launch::async, [&c, seed] {
      return run_scenario(c.scenario, seed);
    }));
  for (std::size_t i = 0; i < cat.size(); ++i) {
    SuiteReport::VerdictRow row;
    row.name = cat[i].scenario.name;
    row.expected = cat[i].expected;
    row.got = v_futs[i].get();
    row.ok = row.got.outcome == row.expected;
    rep.verdicts.push_back(std::move(row));
  }

  for (const CaseResult &r : rep.cases)
    rep.cases_passed += r.ok;
  for (const auto &v : rep.verdicts)
    rep.verdicts_passed += v.ok;
  rep.ok = rep.cases_passed == int(rep.cases.size()) &&
           rep.verdicts_passed == int(rep.verdicts.size());
  return rep;
}

//===--- plain-text rendering --------------------------------------------------//

inline std::string report_to_text(const SuiteReport &rep) {
  std::ostringstream os;
  for (const CaseResult &r : rep.cases) {
    os << (r.ok ? "PASS " : "FAIL ") << r.name;
    char buf[64];
    std::snprintf(buf, sizeof buf, " ratio=%.3f", r.overhead.ratio);
    os << "  on=" << r.overhead.retired_on << " off=" << r.overhead.retired_off
       << buf;
    if (r.labels_checked)
      os << (r.labels_match ? " labels=ok" : " labels=BAD");
    os << "\n";
    for (const std::string &f : r.failures)
      os << "     " << f << "\n";
  }
  for (const auto &v : rep.verdicts)
    os << (v.ok ? "PASS " : "FAIL ") << v.name << "  verdict="
       << outcome_name(v.got.outcome) << " expected=" << outcome_name(v.expected)
       << "\n";
  os << (rep.ok ? "OK" : "FAILED") << " cases=" << rep.cases_passed << "/"
     << rep.cases.size() << " attacks=" << rep.verdicts_passed << "/"
     << rep.verdicts.size() << "\n";
  return os.str();
}

} // namespace pacter
