//===--- tools/pacter.cpp - command line front end ------------------------===//
//
// Verbs:
//   pacter build   <in.ir> [-o out.obj] [--mode M] [--no-load-auth]
//   pacter run     <prog.obj|prog.ir> [--mode M] [--fuel N] [--trace]
//   pacter analyze <in.ir> [--dump-fpset]
//   pacter attack  <scenario.json>
//   pacter suite   <corpus_dir>
//   pacter report  <corpus_dir>
//
// Every verb takes --json and --seed; PACTER_SEED overrides the default
// seed, an explicit --seed beats both.
//
//===----------------------------------------------------------------------===//

#include "CLI11.hpp"
#include "json.hpp"

#include "pacter/harness.hpp"
#include "pacter/scenario_io.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

using namespace pacter;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

u64 env_seed() {
  if (const char *e = std::getenv("PACTER_SEED")) {
    try {
      return std::stoull(e, nullptr, 0);
    } catch (const std::exception &) {
      throw std::runtime_error(std::string("PACTER_SEED is not a number: ") + e);
    }
  }
  return Machine::Options{}.seed;
}

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  if (!in)
    throw std::runtime_error("cannot read " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string hex(u64 v) { return advdetail::hex(v); }

struct Built {
  MachineProgram prog;
  AnalysisResult analysis;
  InstrumentStats stubs;
};

Built build_ir(const std::string &text, const BuildOptions &bo) {
  Built b;
  IRModule mod = parse_module(text);
  b.analysis = analyze_module(mod);
  b.stubs = instrument_module(mod, b.analysis);
  b.prog = lower_module(mod, bo);
  assign_layout(b.prog);
  return b;
}

MachineProgram load_program(const fs::path &file, const BuildOptions &bo) {
  if (file.extension() == ".ir")
    return build_ir(slurp(file), bo).prog;
  MachineProgram p = parse_program(slurp(file));
  if (!p.laid_out)
    assign_layout(p);
  return p;
}

json coverage_json(const CoverageReport &c) {
  json j;
  j["blr"] = c.n_blr;
  j["blraa"] = c.n_blraa;
  j["ret"] = c.n_ret;
  j["retaa"] = c.n_retaa;
  j["paciasp"] = c.n_paciasp;
  j["autiasp"] = c.n_autiasp;
  json off = json::array();
  for (const auto &o : c.offenders)
    off.push_back({{"func", o.func}, {"reason", o.reason}});
  j["offenders"] = std::move(off);
  return j;
}

json overhead_json(const OverheadReport &o) {
  json j;
  j["retired_on"] = o.retired_on;
  j["retired_off"] = o.retired_off;
  j["ratio"] = o.ratio;
  j["image_on"] = o.image_on;
  j["image_off"] = o.image_off;
  j["image_ratio"] = o.image_ratio;
  return j;
}

int cmd_build(const fs::path &in, fs::path out, const std::string &mode,
              bool no_load_auth, bool as_json) {
  auto m = parse_build_mode(mode);
  if (!m)
    throw std::runtime_error("unknown mode '" + mode + "'");
  if (out.empty())
    out = fs::path(in).replace_extension(".obj");
  Built b = build_ir(slurp(in), {*m, !no_load_auth});
  std::ofstream os(out, std::ios::binary);
  if (!os)
    throw std::runtime_error("cannot write " + out.string());
  os << serialize_program(b.prog);
  os.close();

  CoverageReport cov = coverage_scan(b.prog);
  if (as_json) {
    json j;
    j["out"] = out.string();
    j["mode"] = build_mode_name(*m);
    j["insts"] = {{"text", b.prog.text.size()},
                  {"init_text", b.prog.init_text.size()},
                  {"irq_text", b.prog.irq_text.size()}};
    j["stubs"] = {{"pac_store", b.stubs.pac_store},
                  {"pac_load", b.stubs.pac_load},
                  {"pac_call", b.stubs.pac_call},
                  {"pac_const", b.stubs.pac_const},
                  {"pb_restore", b.stubs.pb_restore},
                  {"pac_memcpy", b.stubs.pac_memcpy}};
    j["coverage"] = coverage_json(cov);
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << "wrote " << out.string() << " mode=" << build_mode_name(*m)
              << " text=" << b.prog.text.size()
              << " init=" << b.prog.init_text.size()
              << " blr=" << cov.n_blr << " blraa=" << cov.n_blraa << "\n";
    for (const auto &o : cov.offenders)
      std::cout << "coverage: " << o.func << ": " << o.reason << "\n";
  }
  return cov.offenders.empty() && cov.n_blr == 0 ? 0 : 1;
}

int cmd_run(const fs::path &file, const std::string &mode, bool no_load_auth,
            u64 seed, u64 fuel, bool trace, bool as_json) {
  auto m = parse_build_mode(mode);
  if (!m)
    throw std::runtime_error("unknown mode '" + mode + "'");
  MachineProgram p = load_program(file, {*m, !no_load_auth});
  Machine::Options o;
  o.seed = seed;
  o.trace = trace;
  Machine mach(p, o);
  u64 retired = mach.run(fuel);
  bool clean = mach.halted() && mach.trap().kind == TrapKind::None;

  if (as_json) {
    json j;
    j["halted"] = mach.halted();
    j["ret"] = hex(mach.reg(0));
    j["retired"] = retired;
    j["pc"] = hex(mach.pc());
    if (mach.trap().kind != TrapKind::None) {
      j["trap"] = trap_name(mach.trap().kind);
      j["trap_detail"] = mach.trap().detail;
    }
    if (trace) {
      json ev = json::array();
      for (const TraceEvent &e : mach.events())
        ev.push_back({{"retired", e.step},
                      {"pc", hex(e.pc)},
                      {"kind", e.kind},
                      {"detail", e.detail}});
      j["events"] = std::move(ev);
    }
    std::cout << j.dump(2) << "\n";
  } else {
    if (trace)
      for (const TraceEvent &e : mach.events())
        std::cout << "[" << e.step << "] " << e.kind
                  << (e.detail.empty() ? "" : " " + e.detail) << "\n";
    if (clean)
      std::cout << "halt ret=" << hex(mach.reg(0)) << " retired=" << retired
                << "\n";
    else if (mach.trap().kind != TrapKind::None)
      std::cout << "trap " << trap_name(mach.trap().kind) << " at "
                << hex(mach.trap().addr) << ": " << mach.trap().detail << "\n";
    else
      std::cout << "stalled after " << retired << " instructions\n";
  }
  return clean ? 0 : 1;
}

int cmd_analyze(const fs::path &in, bool as_json) {
  IRModule mod = parse_module(slurp(in));
  AnalysisResult r = analyze_module(mod);
  if (as_json) {
    json j;
    json fps = json::array();
    for (const auto &[k, lvl] : r.fpset.entries())
      fps.push_back({{"func", k.first}, {"name", k.second}, {"level", lvl}});
    j["fp"] = std::move(fps);
    json fields = json::array();
    for (const auto &p : r.dag.paths())
      fields.push_back({{"type", p.first}, {"path", p.second}});
    j["fpfield"] = std::move(fields);
    j["diagnostics"] = r.diagnostics;
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << dump_fpset(r);
    for (const std::string &d : r.diagnostics)
      std::cout << "# " << d << "\n";
  }
  return 0;
}

int cmd_attack(const fs::path &file, u64 seed, bool as_json) {
  AttackScenario sc = load_scenario(file);
  AttackVerdict v = run_scenario(sc, seed);
  if (as_json) {
    std::cout << verdict_to_json(v).dump(2) << "\n";
  } else {
    std::cout << v.name << ": " << outcome_name(v.outcome);
    if (v.outcome == Outcome::Blocked)
      std::cout << " trap=" << trap_name(v.trap) << " (" << v.trap_detail
                << ")";
    std::cout << " steps=" << v.steps << " pc=" << hex(v.pc) << "\n";
  }
  return 0;
}

int cmd_suite(const fs::path &dir, u64 seed, bool as_json) {
  SuiteReport rep = run_suite(dir, seed);
  if (as_json) {
    json j;
    json cases = json::array();
    for (const CaseResult &r : rep.cases) {
      json c;
      c["name"] = r.name;
      c["ok"] = r.ok;
      c["failures"] = r.failures;
      if (r.labels_checked)
        c["labels_match"] = r.labels_match;
      c["coverage"] = coverage_json(r.coverage);
      c["ret"] = hex(r.ret_on);
      c["overhead"] = overhead_json(r.overhead);
      cases.push_back(std::move(c));
    }
    j["cases"] = std::move(cases);
    json atk = json::array();
    for (const auto &v : rep.verdicts) {
      json a;
      a["name"] = v.name;
      a["expected"] = outcome_name(v.expected);
      a["got"] = verdict_to_json(v.got);
      a["ok"] = v.ok;
      atk.push_back(std::move(a));
    }
    j["attacks"] = std::move(atk);
    j["cases_passed"] = rep.cases_passed;
    j["attacks_passed"] = rep.verdicts_passed;
    j["ok"] = rep.ok;
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << report_to_text(rep);
  }
  return rep.ok ? 0 : 1;
}

int cmd_report(const fs::path &dir, u64 seed, bool as_json) {
  std::vector<CorpusCase> cases = load_corpus(dir);
  bool all_ok = true;
  json rows = json::array();
  for (const CorpusCase &c : cases) {
    CaseResult r = run_case(c, seed);
    all_ok = all_ok && r.ok;
    if (as_json) {
      json row = overhead_json(r.overhead);
      row["name"] = r.name;
      row["ok"] = r.ok;
      rows.push_back(std::move(row));
    } else {
      char buf[128];
      std::snprintf(buf, sizeof buf, "%-24s on=%-7llu off=%-7llu ratio=%.3f image=%.3f%s\n",
                    r.name.c_str(), (unsigned long long)r.overhead.retired_on,
                    (unsigned long long)r.overhead.retired_off,
                    r.overhead.ratio, r.overhead.image_ratio,
                    r.ok ? "" : "  (FAILED)");
      std::cout << buf;
    }
  }
  if (as_json)
    std::cout << rows.dump(2) << "\n";
  return all_ok ? 0 : 1;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"signed function pointer toolchain"};
  app.require_subcommand(1);

  std::string in, out, mode = "protected", dir;
  bool no_load_auth = false, as_json = false, trace = false, dump = false;
  u64 fuel = 1'000'000;
  u64 seed = 0;
  bool seed_set = false;
  auto add_common = [&](CLI::App *sub) {
    sub->add_flag("--json", as_json, "machine readable output");
    sub->add_option("--seed", seed, "key generation seed")
        ->each([&](const std::string &) { seed_set = true; });
  };

  CLI::App *build = app.add_subcommand("build", "lower ir to an object file");
  build->add_option("input", in, "ir file")->required();
  build->add_option("-o,--output", out, "object file (default: input.obj)");
  build->add_option("--mode", mode,
                    "protected | compat | legacy | unprotected");
  build->add_flag("--no-load-auth", no_load_auth,
                  "skip authentication on signed loads");
  add_common(build);

  CLI::App *run = app.add_subcommand("run", "execute an object or ir file");
  run->add_option("input", in, "obj or ir file")->required();
  run->add_option("--mode", mode, "build mode when input is ir");
  run->add_flag("--no-load-auth", no_load_auth, "ablation, ir input only");
  run->add_option("--fuel", fuel, "instruction budget");
  run->add_flag("--trace", trace, "print boot and interrupt events");
  add_common(run);

  CLI::App *analyze = app.add_subcommand("analyze", "identify function pointers");
  analyze->add_option("input", in, "ir file")->required();
  analyze->add_flag("--dump-fpset", dump, "print the identified set (default)");
  add_common(analyze);

  CLI::App *attack = app.add_subcommand("attack", "run a scenario file");
  attack->add_option("scenario", in, "scenario json")->required();
  add_common(attack);

  CLI::App *suite = app.add_subcommand("suite", "run the regression corpus");
  suite->add_option("corpus", dir, "corpus directory")->required();
  add_common(suite);

  CLI::App *report = app.add_subcommand("report", "per-case overhead table");
  report->add_option("corpus", dir, "corpus directory")->required();
  add_common(report);

  CLI11_PARSE(app, argc, argv);

  try {
    if (!seed_set)
      seed = env_seed();
    if (build->parsed())
      return cmd_build(in, out, mode, no_load_auth, as_json);
    if (run->parsed())
      return cmd_run(in, mode, no_load_auth, seed, fuel, trace, as_json);
    if (analyze->parsed())
      return cmd_analyze(in, as_json);
    if (attack->parsed())
      return cmd_attack(in, seed, as_json);
    if (suite->parsed())
      return cmd_suite(dir, seed, as_json);
    if (report->parsed())
      return cmd_report(dir, seed, as_json);
  } catch (const std::exception &e) {
    std::cerr << "pacter: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
