//===--- pacter/scenario_io.hpp - attack scenarios as JSON files ----------===//
//
// File shape:
//
//   {
//     "name": "fp_corruption",
//     "obj": "attack_dispatch.obj",          // relative to the JSON file
//     "target": "@svc_debug",
//     "schedule": [
//       {"at": {"event": "free_init", "n": 1},
//        "do": "write", "addr": "@handlers+0x0", "value": "@svc_debug"},
//       {"at": 120, "do": "read", "addr": "@handlers+0x8"},
//       {"at": 125, "do": "write", "addr": "@handlers+0x0", "from_read": true},
//       {"at": 200, "do": "irq",
//        "writes": [{"addr": "irqsave+0xE8", "value": "0xffffe000000104a0"}]}
//     ]
//   }
//
// "value" accepts a plain integer, a string number ("0x2a"), or a "@symbol"
// spec resolved against the loaded object. Addresses stay symbolic; the
// scenario runner resolves them at fire time.
//
//===----------------------------------------------------------------------===//

#pragma once

#include "pacter/adversary.hpp"

#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace pacter {

struct ScenarioFileError : std::runtime_error {
  explicit ScenarioFileError(const std::string &m) : std::runtime_error(m) {}
};

namespace sio {

using nlohmann::json;

inline std::string slurp_file(const std::filesystem::path &p) {
  std::ifstream in(p, std::ios::binary);
  if (!in)
    throw ScenarioFileError("cannot read " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline u64 value_field(const json &j, const MachineProgram &prog,
                       const std::string &where) {
  if (j.is_number_unsigned())
    return j.get<u64>();
  if (j.is_number_integer())
    return u64(j.get<long long>());
  if (j.is_string()) {
    std::string s = j.get<std::string>();
    if (!s.empty() && s[0] == '@')
      return resolve_addr(prog, s);
    try {
      return std::stoull(s, nullptr, 0);
    } catch (const std::exception &) {
      throw ScenarioFileError(where + ": bad value '" + s + "'");
    }
  }
  throw ScenarioFileError(where + ": value must be integer or string");
}

inline Trigger trigger_field(const json &j, const std::string &where) {
  if (j.is_number_unsigned() || j.is_number_integer())
    return at_retired(j.get<u64>());
  if (j.is_object()) {
    if (!j.contains("event") || !j["event"].is_string())
      throw ScenarioFileError(where + ": event trigger needs \"event\"");
    int n = j.value("n", 1);
    if (n < 1)
      throw ScenarioFileError(where + ": occurrence must be >= 1");
    return at_event(j["event"].get<std::string>(), n);
  }
  throw ScenarioFileError(where + ": \"at\" must be a count or {event,n}");
}

inline CellEdit edit_fields(const json &j, const MachineProgram &prog,
                            const std::string &where, bool allow_replay) {
  CellEdit e;
  if (!j.contains("addr") || !j["addr"].is_string())
    throw ScenarioFileError(where + ": missing \"addr\"");
  e.addr = j["addr"].get<std::string>();
  e.from_read = j.value("from_read", false);
  if (e.from_read && !allow_replay)
    throw ScenarioFileError(where + ": from_read not allowed here");
  if (j.contains("value")) {
    if (e.from_read)
      throw ScenarioFileError(where + ": value and from_read are exclusive");
    e.value = value_field(j["value"], prog, where);
  } else if (!e.from_read && allow_replay) {
    throw ScenarioFileError(where + ": write needs value or from_read");
  }
  return e;
}

} // namespace sio

// Build a scenario from parsed JSON. `base_dir` anchors the "obj" path.
inline AttackScenario scenario_from_json(const nlohmann::json &j,
                                         const std::filesystem::path &base_dir) {
  using sio::json;
  if (!j.is_object())
    throw ScenarioFileError("scenario: top level must be an object");
  for (const char *key : {"name", "obj", "target"})
    if (!j.contains(key) || !j[key].is_string())
      throw ScenarioFileError(std::string("scenario: missing \"") + key + "\"");

  AttackScenario sc;
  sc.name = j["name"].get<std::string>();
  std::filesystem::path obj = base_dir / j["obj"].get<std::string>();
  sc.program = parse_program(sio::slurp_file(obj));
  if (!sc.program.laid_out)
    assign_layout(sc.program);
  sc.target = j["target"].get<std::string>();

  const json empty = json::array();
  const json &sched = j.contains("schedule") ? j["schedule"] : empty;
  if (!sched.is_array())
    throw ScenarioFileError(sc.name + ": \"schedule\" must be an array");
  int idx = 0;
  for (const json &sj : sched) {
    std::string where = sc.name + "/schedule[" + std::to_string(idx++) + "]";
    if (!sj.is_object() || !sj.contains("at") || !sj.contains("do"))
      throw ScenarioFileError(where + ": need \"at\" and \"do\"");
    Trigger t = sio::trigger_field(sj["at"], where);
    std::string act = sj["do"].get<std::string>();
    if (act == "write") {
      CellEdit e = sio::edit_fields(sj, sc.program, where, true);
      AttackStep s;
      s.when = t;
      s.act.kind = AttackAction::Kind::Write;
      s.act.edit = e;
      sc.schedule.push_back(std::move(s));
    } else if (act == "read") {
      CellEdit e = sio::edit_fields(sj, sc.program, where, false);
      sc.schedule.push_back(mem_read(t, e.addr));
    } else if (act == "irq") {
      if (!sj.contains("writes") || !sj["writes"].is_array())
        throw ScenarioFileError(where + ": irq needs \"writes\"");
      std::vector<CellEdit> ws;
      for (const json &wj : sj["writes"])
        ws.push_back(sio::edit_fields(wj, sc.program, where, true));
      sc.schedule.push_back(irq_inject(t, std::move(ws)));
    } else {
      throw ScenarioFileError(where + ": unknown action '" + act + "'");
    }
  }
  return sc;
}

inline AttackScenario load_scenario(const std::filesystem::path &file) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(sio::slurp_file(file));
  } catch (const nlohmann::json::parse_error &e) {
    throw ScenarioFileError(file.string() + ": " + e.what());
  }
  return scenario_from_json(j, file.parent_path());
}

// Canonical emission. Resolved values travel as hex strings so nothing is
// at the mercy of double-precision JSON numbers.
inline nlohmann::json scenario_to_json(const AttackScenario &sc,
                                       const std::string &obj_relpath) {
  using sio::json;
  json j;
  j["name"] = sc.name;
  j["obj"] = obj_relpath;
  j["target"] = sc.target;
  json sched = json::array();
  for (const AttackStep &s : sc.schedule) {
    json sj;
    if (s.when.is_event())
      sj["at"] = {{"event", s.when.event}, {"n", s.when.occurrence}};
    else
      sj["at"] = s.when.retired;
    auto put_edit = [](json &out, const CellEdit &e) {
      out["addr"] = e.addr;
      if (e.from_read)
        out["from_read"] = true;
      else
        out["value"] = advdetail::hex(e.value);
    };
    switch (s.act.kind) {
    case AttackAction::Kind::Write:
      sj["do"] = "write";
      put_edit(sj, s.act.edit);
      break;
    case AttackAction::Kind::Read:
      sj["do"] = "read";
      sj["addr"] = s.act.edit.addr;
      break;
    case AttackAction::Kind::Irq: {
      sj["do"] = "irq";
      json ws = json::array();
      for (const CellEdit &e : s.act.irq_writes) {
        json wj;
        put_edit(wj, e);
        ws.push_back(std::move(wj));
      }
      sj["writes"] = std::move(ws);
      break;
    }
    }
    sched.push_back(std::move(sj));
  }
  j["schedule"] = std::move(sched);
  return j;
}

inline nlohmann::json verdict_to_json(const AttackVerdict &v) {
  nlohmann::json j;
  j["name"] = v.name;
  j["outcome"] = outcome_name(v.outcome);
  if (v.outcome == Outcome::Blocked) {
    j["trap"] = trap_name(v.trap);
    j["trap_detail"] = v.trap_detail;
  }
  j["steps"] = v.steps;
  j["pc"] = advdetail::hex(v.pc);
  return j;
}

} // namespace pacter
