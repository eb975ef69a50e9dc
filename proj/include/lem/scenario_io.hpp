#pragma once

// Scenario documents, run summaries and CSV tables.
//
// Node ids in files are 1-based. A scenario document looks like
//
//   {
//     "name": "fig2",
//     "topology": {"nodes": 4, "destinations": [4]},
//     "links": [{"from": 1, "to": 2, "good_prob": 0.5}, ...],
//     "rates": {"good": 2, "bad": 1},
//     "harvest": [{"node": 1, "amount": 2, "prob": 0.6}, ...],
//     "utilities": [{"node": 1, "commodity": 1, "weight": 3}, ...],
//     "parameters": {"V": 100, "c": 0.6667, "theta_override": null,
//                    "T_L_override": null, "horizon": 1000000, "seed": 1,
//                    "r_max": 2, "integer_admissions": true},
//     "regime_changes": [{"slot": 5000, "link_good_prob": [...],
//                         "harvest_prob": [...]}]
//   }
//
// Commodity k is the k-th entry of "destinations". Unlisted nodes harvest
// nothing; omitted regime fields keep the base value.

#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lem/learning.hpp"
#include "lem/network_model.hpp"
#include "lem/sim.hpp"

namespace lem {

using json = nlohmann::json;

/// Malformed or inconsistent scenario input.
class ScenarioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline const json& require(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw ScenarioError(std::string("missing field '") + key + "'");
  return j.at(key);
}

inline double number(const json& j, const char* what) {
  if (!j.is_number()) throw ScenarioError(std::string("field '") + what + "' must be a number");
  return j.get<double>();
}

inline NodeId node_index(const json& j, std::size_t N, const char* what) {
  if (!j.is_number_integer()) throw ScenarioError(std::string("field '") + what + "' must be an integer node id");
  const auto v = j.get<std::int64_t>();
  if (v < 1 || static_cast<std::size_t>(v) > N)
    throw ScenarioError(std::string("node id out of range in '") + what + "'");
  return static_cast<NodeId>(v - 1);
}

inline std::vector<double> number_list(const json& j, std::size_t expect, const char* what) {
  if (!j.is_array() || j.size() != expect)
    throw ScenarioError(std::string("field '") + what + "' must be an array of " + std::to_string(expect) +
                        " numbers");
  std::vector<double> v;
  for (const auto& x : j) v.push_back(number(x, what));
  return v;
}

template <typename T>
std::optional<T> optional_field(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  if (!j.at(key).is_number()) throw ScenarioError(std::string("field '") + key + "' must be a number");
  return j.at(key).get<T>();
}

}  // namespace detail

/// Builds a scenario from a parsed document. Throws ScenarioError on schema
/// problems and std::invalid_argument on model violations.
namespace detail {

inline ScenarioConfig scenario_from_json_unchecked(const json& doc) {
  ScenarioConfig s;
  s.name = doc.value("name", std::string("custom"));

  const json& topo = require(doc, "topology");
  const json& nodes = require(topo, "nodes");
  if (!nodes.is_number_integer() || nodes.get<std::int64_t>() < 1)
    throw ScenarioError("topology.nodes must be a positive integer");
  const auto N = static_cast<std::size_t>(nodes.get<std::int64_t>());
  std::vector<NodeId> dests;
  const json& dj = require(topo, "destinations");
  if (!dj.is_array() || dj.empty()) throw ScenarioError("topology.destinations must be a non-empty array");
  for (const auto& d : dj) dests.push_back(node_index(d, N, "destinations"));

  const json& lj = require(doc, "links");
  if (!lj.is_array()) throw ScenarioError("links must be an array");
  std::vector<Link> links;
  ProductMarginals mg;
  for (const auto& l : lj) {
    links.push_back({node_index(require(l, "from"), N, "links.from"), node_index(require(l, "to"), N, "links.to")});
    mg.link_good_prob.push_back(number(require(l, "good_prob"), "links.good_prob"));
  }
  s.topology = Topology(N, std::move(links), std::move(dests));

  mg.harvest_amount.assign(N, 0.0);
  mg.harvest_prob.assign(N, 0.0);
  if (doc.contains("harvest")) {
    const json& hj = doc.at("harvest");
    if (!hj.is_array()) throw ScenarioError("harvest must be an array");
    for (const auto& h : hj) {
      const NodeId n = node_index(require(h, "node"), N, "harvest.node");
      mg.harvest_amount[n] = number(require(h, "amount"), "harvest.amount");
      mg.harvest_prob[n] = number(require(h, "prob"), "harvest.prob");
    }
  }
  s.states = StateSpace::product(s.topology, mg);
  s.marginals = mg;

  double good = 2.0;
  double bad = 1.0;
  if (doc.contains("rates")) {
    const json& rj = doc.at("rates");
    if (rj.contains("good")) good = number(rj.at("good"), "rates.good");
    if (rj.contains("bad")) bad = number(rj.at("bad"), "rates.bad");
  }
  s.rates = std::make_shared<UnitPowerModel>(s.topology, good, bad);

  const json params = doc.value("parameters", json::object());
  if (!params.is_object()) throw ScenarioError("parameters must be an object");
  const double r_max = optional_field<double>(params, "r_max").value_or(2.0);
  const bool integer = params.value("integer_admissions", true);

  Grid<double> w(N, s.topology.commodity_count(), 0.0);
  const json& uj = require(doc, "utilities");
  if (!uj.is_array()) throw ScenarioError("utilities must be an array");
  for (const auto& u : uj) {
    const NodeId n = node_index(require(u, "node"), N, "utilities.node");
    const json& cj = require(u, "commodity");
    if (!cj.is_number_integer() || cj.get<std::int64_t>() < 1 ||
        static_cast<std::size_t>(cj.get<std::int64_t>()) > s.topology.commodity_count())
      throw ScenarioError("utilities.commodity out of range");
    w(n, static_cast<CommodityId>(cj.get<std::int64_t>() - 1)) = number(require(u, "weight"), "utilities.weight");
  }
  s.utility = UtilityModel(std::move(w), r_max, integer);

  if (auto v = optional_field<double>(params, "V")) s.V = *v;
  if (auto v = optional_field<double>(params, "c")) s.c = *v;
  s.theta_override = optional_field<double>(params, "theta_override");
  s.learning_time_override = optional_field<Slot>(params, "T_L_override");
  if (auto v = optional_field<Slot>(params, "horizon")) s.horizon = *v;
  if (auto v = optional_field<std::uint64_t>(params, "seed")) s.seed = *v;

  if (doc.contains("regime_changes")) {
    const json& rcj = doc.at("regime_changes");
    if (!rcj.is_array()) throw ScenarioError("regime_changes must be an array");
    for (const auto& r : rcj) {
      RegimeChange rc;
      const json& sl = require(r, "slot");
      if (!sl.is_number_integer() || sl.get<std::int64_t>() < 0)
        throw ScenarioError("regime_changes.slot must be a non-negative integer");
      rc.slot = sl.get<Slot>();
      ProductMarginals next = mg;
      if (r.contains("link_good_prob"))
        next.link_good_prob = number_list(r.at("link_good_prob"), s.topology.link_count(), "link_good_prob");
      if (r.contains("harvest_prob")) {
        // One entry per energy node, in id order.
        std::vector<NodeId> energy_nodes;
        for (NodeId n = 0; n < N; ++n)
          if (s.topology.has_energy(n)) energy_nodes.push_back(n);
        const auto hp = number_list(r.at("harvest_prob"), energy_nodes.size(), "harvest_prob");
        for (std::size_t k = 0; k < energy_nodes.size(); ++k) next.harvest_prob[energy_nodes[k]] = hp[k];
      }
      rc.states = StateSpace::product(s.topology, next);
      rc.marginals = next;
      s.regime_changes.push_back(std::move(rc));
    }
  }
  s.validate();
  return s;
}

}  // namespace detail

/// Builds a scenario from a parsed document. Schema and model violations
/// surface as ScenarioError.
inline ScenarioConfig scenario_from_json(const json& doc) {
  try {
    return detail::scenario_from_json_unchecked(doc);
  } catch (const std::invalid_argument& e) {
    throw ScenarioError(e.what());
  } catch (const json::exception& e) {
    throw ScenarioError(e.what());
  }
}

/// Inverse of scenario_from_json for product-form scenarios.
inline json scenario_to_json(const ScenarioConfig& s) {
  if (!s.marginals) throw std::invalid_argument("only product-form scenarios can be serialized");
  const auto& topo = s.topology;
  const auto& mg = *s.marginals;
  const auto* unit = dynamic_cast<const UnitPowerModel*>(s.rates.get());
  if (!unit) throw std::invalid_argument("only the unit-power rate model can be serialized");
  json doc;
  doc["name"] = s.name;
  json dests = json::array();
  for (NodeId d : topo.destinations()) dests.push_back(d + 1);
  doc["topology"] = {{"nodes", topo.node_count()}, {"destinations", dests}};
  json links = json::array();
  for (LinkId l = 0; l < topo.link_count(); ++l)
    links.push_back({{"from", topo.link(l).from + 1}, {"to", topo.link(l).to + 1}, {"good_prob", mg.link_good_prob[l]}});
  doc["links"] = links;
  doc["rates"] = {{"good", unit->good_rate()}, {"bad", unit->bad_rate()}};
  json harvest = json::array();
  for (NodeId n = 0; n < topo.node_count(); ++n)
    if (mg.harvest_amount[n] > 0.0)
      harvest.push_back({{"node", n + 1}, {"amount", mg.harvest_amount[n]}, {"prob", mg.harvest_prob[n]}});
  doc["harvest"] = harvest;
  json utils = json::array();
  for (NodeId n = 0; n < topo.node_count(); ++n)
    for (CommodityId c = 0; c < topo.commodity_count(); ++c)
      if (s.utility.is_source(n, c)) utils.push_back({{"node", n + 1}, {"commodity", c + 1}, {"weight", s.utility.weight(n, c)}});
  doc["utilities"] = utils;
  doc["parameters"] = {{"V", s.V},
                       {"c", s.c},
                       {"theta_override", s.theta_override ? json(*s.theta_override) : json(nullptr)},
                       {"T_L_override", s.learning_time_override ? json(*s.learning_time_override) : json(nullptr)},
                       {"horizon", s.horizon},
                       {"seed", s.seed},
                       {"r_max", s.utility.r_max()},
                       {"integer_admissions", s.utility.integer_admissions()}};
  json changes = json::array();
  for (const auto& rc : s.regime_changes) {
    if (!rc.marginals) throw std::invalid_argument("regime change without marginals cannot be serialized");
    json hp = json::array();
    for (NodeId n = 0; n < topo.node_count(); ++n)
      if (topo.has_energy(n)) hp.push_back(rc.marginals->harvest_prob[n]);
    changes.push_back({{"slot", rc.slot}, {"link_good_prob", rc.marginals->link_good_prob}, {"harvest_prob", hp}});
  }
  doc["regime_changes"] = changes;
  return doc;
}

inline ScenarioConfig parse_scenario(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ScenarioError(std::string("scenario is not valid JSON: ") + e.what());
  }
  return scenario_from_json(doc);
}

inline ScenarioConfig load_scenario_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ScenarioError("cannot open scenario file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scenario(ss.str());
}

/// Built-in names (fig2, fig5, tiny1node) or a path to a scenario document.
inline ScenarioConfig load_scenario(const std::string& ref, double V = 100.0, double c = 2.0 / 3.0,
                                    std::uint64_t seed = 1) {
  if (ref == "fig2") return build_fig2_scenario(V, c, seed);
  if (ref == "fig5") return build_fig5_scenario(V, c, seed);
  if (ref == "tiny1node") return build_tiny_scenario(V, seed);
  return load_scenario_file(ref);
}

inline json multipliers_json(const Multipliers& m, const Topology& topo) {
  json data = json::array();
  for (NodeId n = 0; n < topo.node_count(); ++n) {
    json row = json::array();
    for (CommodityId c = 0; c < topo.commodity_count(); ++c) row.push_back(m.data(n, c));
    data.push_back(row);
  }
  return {{"upsilon", data}, {"nu", m.energy}};
}

inline json solver_json(const SolverReport& r, const Topology& topo) {
  return {{"multipliers", multipliers_json(r.multipliers, topo)},
          {"value", r.value},
          {"iterations", r.iterations},
          {"runtime_seconds", r.runtime_seconds},
          {"stopped_on_tolerance", r.stopped_on_tolerance}};
}

inline json metrics_json(const RunMetrics& m) {
  auto grid = [](const NodeCommodity<double>& g) {
    json out = json::array();
    for (std::size_t r = 0; r < g.rows(); ++r) {
      json row = json::array();
      for (std::size_t c = 0; c < g.cols(); ++c) row.push_back(g(r, c));
      out.push_back(row);
    }
    return out;
  };
  return {{"scenario", m.scenario},
          {"algorithm", to_string(m.algorithm)},
          {"V", m.V},
          {"c", m.c},
          {"seed", m.seed},
          {"horizon", m.horizon},
          {"learning_time", m.learning_time},
          {"avg_admitted", grid(m.avg_admitted)},
          {"total_utility", m.total_utility},
          {"avg_data_queue", grid(m.avg_data_queue)},
          {"avg_data_queue_total", m.avg_data_queue_total},
          {"avg_energy", m.avg_energy},
          {"max_energy", m.max_energy},
          {"avg_energy_total", m.avg_energy_total},
          {"admitted", m.admitted},
          {"delivered", m.delivered},
          {"in_network", m.in_network},
          {"delay_mean", m.delay_mean},
          {"delay_p50", m.delay_p50},
          {"delay_p95", m.delay_p95},
          {"delay_p99", m.delay_p99},
          {"dropped", m.dropped},
          {"drop_events", m.drop_events},
          {"drops_before_learning", m.drops_before_learning},
          {"drop_rate", m.drop_rate},
          {"outages", m.outages}};
}

inline json convergence_json(const ConvergenceReport& r) {
  json segs = json::array();
  for (const auto& s : r.segments)
    segs.push_back({{"start", s.start},
                    {"end", s.end},
                    {"long_run_mean", s.long_run_mean},
                    {"steady_time", s.steady_time ? json(*s.steady_time) : json(nullptr)}});
  return {{"t_zeta", r.t_zeta ? json(*r.t_zeta) : json("not reached")},
          {"segments", segs},
          {"unapplied_changes", r.unapplied_changes}};
}

/// Run summary: metrics, solver report and learned offsets.
inline json summary_json(const RunResult& r, const ScenarioConfig& s) {
  json doc = metrics_json(r.metrics);
  doc["theta"] = s.theta_vector();
  doc["solver"] = r.learning ? solver_json(*r.learning, s.topology) : json(nullptr);
  json xi_q = json::array();
  for (NodeId n = 0; n < s.topology.node_count(); ++n) {
    json row = json::array();
    for (CommodityId c = 0; c < s.topology.commodity_count(); ++c) row.push_back(r.augmentation.data(n, c));
    xi_q.push_back(row);
  }
  doc["augmentation"] = {{"xi_Q", xi_q}, {"xi_E", r.augmentation.energy}};
  doc["applied_regime_changes"] = r.applied_changes;
  return doc;
}

/// One row per sweep cell with mean and standard deviation of each metric.
inline void write_sweep_csv(std::ostream& out, const std::vector<SweepCell>& cells) {
  using Field = double (*)(const RunMetrics&);
  static const std::vector<std::pair<const char*, Field>> fields{
      {"utility", [](const RunMetrics& m) { return m.total_utility; }},
      {"avg_data_queue", [](const RunMetrics& m) { return m.avg_data_queue_total; }},
      {"avg_energy", [](const RunMetrics& m) { return m.avg_energy_total; }},
      {"delay_mean", [](const RunMetrics& m) { return m.delay_mean; }},
      {"delay_p99", [](const RunMetrics& m) { return static_cast<double>(m.delay_p99); }},
      {"dropped", [](const RunMetrics& m) { return static_cast<double>(m.dropped); }},
      {"outages", [](const RunMetrics& m) { return static_cast<double>(m.outages); }},
  };
  out << "V,algorithm,runs";
  for (const auto& [name, f] : fields) out << ',' << name << "_mean," << name << "_std";
  out << '\n';
  for (const auto& cell : cells) {
    out << format_number(cell.V) << ',' << to_string(cell.algorithm) << ',' << cell.runs.size();
    for (const auto& [name, f] : fields) {
      const auto [mean, sd] = cell.mean_std(f);
      out << ',' << format_number(mean) << ',' << format_number(sd);
    }
    out << '\n';
  }
}

/// Plot series: V against utility, aggregate queue, energy and delay, with
/// one column per algorithm.
inline void write_plot_csv(std::ostream& out, const std::vector<SweepCell>& cells) {
  std::map<double, std::map<Algorithm, const SweepCell*>> byV;
  std::vector<Algorithm> algos;
  for (const auto& c : cells) {
    byV[c.V][c.algorithm] = &c;
    if (std::find(algos.begin(), algos.end(), c.algorithm) == algos.end()) algos.push_back(c.algorithm);
  }
  out << "V";
  for (const char* metric : {"utility", "avg_data_queue", "avg_energy", "delay_mean"})
    for (Algorithm a : algos) out << ',' << metric << '_' << to_string(a);
  out << '\n';
  using Field = double (*)(const RunMetrics&);
  const Field fs[] = {[](const RunMetrics& m) { return m.total_utility; },
                      [](const RunMetrics& m) { return m.avg_data_queue_total; },
                      [](const RunMetrics& m) { return m.avg_energy_total; },
                      [](const RunMetrics& m) { return m.delay_mean; }};
  for (const auto& [V, row] : byV) {
    out << format_number(V);
    for (Field f : fs)
      for (Algorithm a : algos) {
        out << ',';
        if (auto it = row.find(a); it != row.end()) out << format_number(it->second->mean_std(f).first);
      }
    out << '\n';
  }
}

/// Energy time series (raw and augmented) of one run, one row per slot.
inline void write_energy_series_csv(std::ostream& out, const AugmentedSeries& s, const Topology& topo) {
  std::vector<NodeId> nodes;
  for (NodeId n = 0; n < topo.node_count(); ++n)
    if (topo.has_energy(n)) nodes.push_back(n);
  out << "slot";
  for (NodeId n : nodes) out << ",E" << n + 1;
  for (NodeId n : nodes) out << ",Ehat" << n + 1;
  out << '\n';
  for (Slot t = 0; t < s.length(); ++t) {
    out << t;
    for (std::size_t i = 0; i < nodes.size(); ++i) out << ',' << format_number(s.raw_energy_at(t, i));
    for (std::size_t i = 0; i < nodes.size(); ++i) out << ',' << format_number(s.energy_at(t, i));
    out << '\n';
  }
}

}  // namespace lem
