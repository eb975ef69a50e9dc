// Command-line front end for the simulator.
//
//   lem run      --scenario fig2 --algo lem --V 100 --horizon 1000000 --seed 1
//   lem sweep    --V 30 40 50 80 100 150 --seeds 5
//   lem converge --scenario fig5 --V 150 --seeds 10
//   lem validate --scenario fig2
//   lem oracle   --scenario tiny1node --V 10
//
// Exit codes: 0 success, 2 invalid input, 3 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lem/lem.hpp"

namespace fs = std::filesystem;
using lem::json;

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 2;
constexpr int kRuntime = 3;

struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonArgs {
  std::string scenario;
  std::optional<double> V;
  std::optional<double> c;
  std::optional<std::uint64_t> seed;
  std::optional<lem::Slot> horizon;
  std::optional<double> theta;
  std::optional<lem::Slot> learning_time;
  std::string out;
};

void add_common(CLI::App* app, CommonArgs& a, const std::string& default_scenario, bool with_V = true) {
  a.scenario = default_scenario;
  app->add_option("--scenario", a.scenario, "fig2, fig5, tiny1node or a scenario file")->capture_default_str();
  if (with_V) app->add_option("--V", a.V, "control parameter V (>= 1)");
  app->add_option("--c", a.c, "learning exponent c in (0,1)");
  app->add_option("--seed", a.seed, "random seed");
  app->add_option("--horizon", a.horizon, "number of slots");
  app->add_option("--theta", a.theta, "energy perturbation override");
  app->add_option("--learning-time", a.learning_time, "learning slot override");
  app->add_option("--out", a.out, "output directory (default: $LEM_OUTPUT_DIR or .)");
}

void check_overrides(const CommonArgs& a) {
  if (a.V && !(*a.V >= 1.0)) throw InputError("V must be >= 1");
  if (a.c && !(*a.c > 0.0 && *a.c < 1.0)) throw InputError("c must lie in (0,1)");
  if (a.horizon && *a.horizon <= 0) throw InputError("horizon must be positive");
  if (a.learning_time && *a.learning_time <= 0) throw InputError("learning time must be positive");
}

bool builtin(const std::string& name) { return name == "fig2" || name == "fig5" || name == "tiny1node"; }

/// Loads the scenario and applies command-line overrides, which win over
/// file values.
lem::ScenarioConfig make_scenario(const CommonArgs& a, double default_V, std::optional<double> V_override = {},
                                  std::optional<std::uint64_t> seed_override = {}) {
  check_overrides(a);
  const double V = V_override.value_or(a.V.value_or(default_V));
  const std::uint64_t seed = seed_override.value_or(a.seed.value_or(1));
  lem::ScenarioConfig s;
  if (builtin(a.scenario)) {
    s = lem::load_scenario(a.scenario, V, a.c.value_or(2.0 / 3.0), seed);
  } else {
    if (!fs::exists(a.scenario)) throw InputError("scenario file not found: " + a.scenario);
    s = lem::load_scenario_file(a.scenario);
    if (V_override || a.V) s.V = V;
    if (a.c) s.c = *a.c;
    if (seed_override || a.seed) s.seed = seed;
  }
  if (a.horizon) s.horizon = *a.horizon;
  if (a.theta) s.theta_override = *a.theta;
  if (a.learning_time) s.learning_time_override = *a.learning_time;
  s.validate();
  return s;
}

json overrides_json(const CommonArgs& a) {
  json o = json::object();
  if (a.V) o["V"] = *a.V;
  if (a.c) o["c"] = *a.c;
  if (a.seed) o["seed"] = *a.seed;
  if (a.horizon) o["horizon"] = *a.horizon;
  if (a.theta) o["theta"] = *a.theta;
  if (a.learning_time) o["learning_time"] = *a.learning_time;
  return o;
}

fs::path output_dir(const CommonArgs& a) {
  fs::path dir = a.out;
  if (dir.empty()) {
    const char* env = std::getenv("LEM_OUTPUT_DIR");
    dir = env && *env ? env : ".";
  }
  fs::create_directories(dir);
  return dir;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  return f;
}

lem::Algorithm parse_algo(const std::string& s) {
  if (s == "lem") return lem::Algorithm::Lem;
  if (s == "esa") return lem::Algorithm::Esa;
  throw InputError("unknown algorithm " + s);
}

// ---------------------------------------------------------------------------

struct RunArgs {
  CommonArgs common;
  std::string algo = "lem";
  bool no_learning = false;
  std::string offset = "practical";
  std::string order;
  bool trace = false;
  bool check = false;
  bool timing = false;
};

int cmd_run(const RunArgs& a) {
  const auto s = make_scenario(a.common, 100.0);
  lem::RunOptions opt;
  opt.algorithm = parse_algo(a.algo);
  opt.learning = !a.no_learning;
  opt.offset = a.offset == "theoretical" ? lem::OffsetVariant::Theoretical : lem::OffsetVariant::Practical;
  if (!a.order.empty()) opt.order = a.order == "fifo" ? lem::ServiceOrder::Fifo : lem::ServiceOrder::Lifo;
  opt.check_invariants = a.check;

  const auto dir = output_dir(a.common);
  const std::string stem = s.name + "_" + a.algo;
  std::ofstream trace;
  if (a.trace) {
    trace = open_out(dir / (stem + "_trace.csv"));
    opt.trace = &trace;
  }
  const auto r = lem::run(s, opt);
  json doc = lem::summary_json(r, s);
  doc["overrides"] = overrides_json(a.common);
  doc["options"] = {{"learning", opt.learning},
                    {"offset", a.offset},
                    {"service_order", opt.order.value_or(lem::default_service_order(opt.algorithm)) ==
                                              lem::ServiceOrder::Lifo
                                          ? "lifo"
                                          : "fifo"}};
  if (!a.timing && doc["solver"].is_object()) doc["solver"].erase("runtime_seconds");
  open_out(dir / (stem + "_summary.json")) << doc.dump(2) << '\n';
  std::cout << doc.dump(2) << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------

struct SweepArgs {
  CommonArgs common;
  std::vector<double> V_list{30, 40, 50, 80, 100, 150};
  std::vector<std::string> algos{"lem", "esa"};
  std::size_t seeds = 1;
};

int cmd_sweep(SweepArgs a) {
  if (a.V_list.empty()) throw InputError("empty V list");
  if (a.seeds == 0) throw InputError("need at least one seed");
  for (double V : a.V_list)
    if (!(V >= 1.0)) throw InputError("V must be >= 1");
  std::vector<lem::Algorithm> algos;
  for (const auto& s : a.algos) algos.push_back(parse_algo(s));
  std::vector<std::uint64_t> seeds;
  for (std::size_t k = 0; k < a.seeds; ++k) seeds.push_back(a.common.seed.value_or(1) + k);
  make_scenario(a.common, a.V_list.front(), a.V_list.front(), seeds.front());  // validate up front

  const auto cells = lem::sweep(
      [&](double V, std::uint64_t seed) { return make_scenario(a.common, V, V, seed); }, a.V_list, algos, seeds);
  const auto dir = output_dir(a.common);
  auto table = open_out(dir / "sweep.csv");
  lem::write_sweep_csv(table, cells);
  auto plot = open_out(dir / "plot.csv");
  lem::write_plot_csv(plot, cells);
  lem::write_sweep_csv(std::cout, cells);
  return kOk;
}

// ---------------------------------------------------------------------------

struct ConvergeArgs {
  CommonArgs common;
  std::size_t seeds = 1;
  std::optional<double> zeta;
  double band = 0.10;
  lem::Slot window = 200;
};

int cmd_converge(const ConvergeArgs& a) {
  if (a.seeds == 0) throw InputError("need at least one seed");
  if (!(a.band > 0.0) || a.window <= 0) throw InputError("band and window must be positive");
  const auto dir = output_dir(a.common);
  lem::SteadyWindowOptions sw{a.band, a.window};
  json doc;
  doc["overrides"] = overrides_json(a.common);
  json runs = json::array();
  std::map<std::string, std::vector<double>> totals;
  std::optional<std::vector<double>> target;
  for (std::size_t k = 0; k < a.seeds; ++k) {
    const std::uint64_t seed = a.common.seed.value_or(1) + k;
    const auto s = make_scenario(a.common, 150.0, std::nullopt, seed);
    if (a.zeta && !target) target = lem::convergence_target(lem::oracle_multipliers(s).multipliers, s.topology);
    std::vector<lem::Slot> changes;
    for (const auto& rc : s.regime_changes) changes.push_back(rc.slot);
    for (lem::Algorithm algo : {lem::Algorithm::Lem, lem::Algorithm::Esa}) {
      lem::RunOptions opt;
      opt.algorithm = algo;
      opt.record_series = true;
      const auto r = lem::run(s, opt);
      const auto rep = lem::measure_convergence(r.series, target ? &*target : nullptr, a.zeta.value_or(0.0),
                                                changes, sw);
      const std::string name = lem::to_string(algo);
      auto f = open_out(dir / ("energy_" + name + "_s" + std::to_string(seed) + ".csv"));
      lem::write_energy_series_csv(f, r.series, s.topology);
      json entry = lem::convergence_json(rep);
      if (!a.zeta) entry.erase("t_zeta");
      entry["algorithm"] = name;
      entry["seed"] = seed;
      entry["dropped"] = r.metrics.dropped;
      entry["outages"] = r.metrics.outages;
      runs.push_back(entry);
      auto& tot = totals[name];
      tot.resize(rep.segments.size(), 0.0);
      for (std::size_t i = 0; i < rep.segments.size(); ++i)
        tot[i] += static_cast<double>(rep.segments[i].steady_time.value_or(rep.segments[i].end - rep.segments[i].start));
    }
  }
  doc["runs"] = runs;
  json means = json::object();
  for (auto& [name, tot] : totals) {
    for (double& v : tot) v /= static_cast<double>(a.seeds);
    means[name] = tot;
  }
  doc["mean_steady_time"] = means;
  open_out(dir / "converge.json") << doc.dump(2) << '\n';
  std::cout << "mean steady-window time per segment:\n";
  for (auto& [name, tot] : totals) {
    std::cout << "  " << name;
    for (double v : tot) std::cout << ' ' << lem::format_number(v);
    std::cout << '\n';
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct ValidateArgs {
  CommonArgs common;
  std::size_t samples = 1'000'000;
};

int cmd_validate(const ValidateArgs& a) {
  const auto s = make_scenario(a.common, 100.0);
  const auto rep = lem::verify_rate_properties(s, a.samples, s.seed);
  double total = 0.0;
  for (double p : s.states.probabilities()) total += p;
  const bool utility_ok = s.utility.shape_ok();
  json doc = {{"scenario", s.name},
              {"states", s.states.size()},
              {"probability_sum", total},
              {"kappa", s.rates->kappa()},
              {"rate_properties", rep.pass},
              {"pairs_checked", rep.pairs_checked},
              {"counterexamples", rep.counterexamples},
              {"utility_shape", utility_ok}};
  std::cout << doc.dump(2) << '\n';
  return rep.pass && utility_ok ? kOk : kInvalid;
}

// ---------------------------------------------------------------------------

struct OracleArgs {
  CommonArgs common;
};

int cmd_oracle(const OracleArgs& a) {
  const auto s = make_scenario(a.common, a.common.scenario == "tiny1node" ? 10.0 : 150.0);
  const lem::DualProblem d(s);
  const auto probs = s.states.probabilities();
  const auto theta = s.theta_vector();
  const auto rep = lem::oracle_multipliers(s);
  json doc = {{"scenario", s.name}, {"V", s.V}, {"theta", theta}, {"oracle", lem::solver_json(rep, s.topology)}};
  doc["oracle"].erase("runtime_seconds");
  bool nu_in_range = true;
  for (lem::NodeId n = 0; n < s.topology.node_count(); ++n)
    if (s.topology.has_energy(n))
      nu_in_range = nu_in_range && rep.multipliers.energy[n] > 0.0 && rep.multipliers.energy[n] < 2.0 * theta[n];
  doc["nu_in_0_2theta"] = nu_in_range;

  const lem::MultiplierLayout lay(s.topology);
  if (lay.size() <= 2) {
    const auto g = lem::grid_search_dual(d, probs, theta, lem::default_dual_box(s));
    doc["grid_search"] = {{"multipliers", lem::multipliers_json(g.multipliers, s.topology)},
                          {"value", g.value},
                          {"evaluations", g.evaluations},
                          {"relative_gap", std::abs(rep.value - g.value) / std::max(1.0, std::abs(g.value))}};
  }
  if (s.topology.commodity_count() == 1) {
    try {
      const auto p = lem::brute_force_primal(s, probs);
      doc["primal"] = {{"value", p.value}, {"policies", p.policies}, {"weak_duality", rep.value >= p.value - 1e-6}};
    } catch (const std::invalid_argument&) {
      doc["primal"] = "too large to enumerate";
    }
  }
  std::cout << doc.dump(2) << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Energy-harvesting network simulator with learning-aided control"};
  app.require_subcommand(1);

  RunArgs run_args;
  auto* run = app.add_subcommand("run", "simulate one scenario");
  add_common(run, run_args.common, "fig2");
  run->add_option("--algo", run_args.algo, "lem or esa")->check(CLI::IsMember({"lem", "esa"}))->capture_default_str();
  run->add_flag("--no-learning", run_args.no_learning, "keep the augmentation at zero");
  run->add_option("--offset", run_args.offset, "practical or theoretical")
      ->check(CLI::IsMember({"practical", "theoretical"}))
      ->capture_default_str();
  run->add_option("--order", run_args.order, "lifo or fifo (default: lifo for lem, fifo for esa)")
      ->check(CLI::IsMember({"lifo", "fifo"}));
  run->add_flag("--trace", run_args.trace, "write the per-slot trace CSV");
  run->add_flag("--check-invariants", run_args.check, "assert queue and energy invariants every slot");
  run->add_flag("--timing", run_args.timing, "include solver runtime in the summary");

  SweepArgs sweep_args;
  auto* sweep = app.add_subcommand("sweep", "run a grid of V values and algorithms");
  add_common(sweep, sweep_args.common, "fig2", false);
  sweep->add_option("--V", sweep_args.V_list, "V values")->capture_default_str();
  sweep->add_option("--algo", sweep_args.algos, "algorithms")->check(CLI::IsMember({"lem", "esa"}))->capture_default_str();
  sweep->add_option("--seeds", sweep_args.seeds, "seeds per cell, counting up from --seed")->capture_default_str();

  ConvergeArgs conv_args;
  auto* conv = app.add_subcommand("converge", "paired convergence experiment");
  add_common(conv, conv_args.common, "fig5");
  conv->add_option("--seeds", conv_args.seeds, "number of seeds")->capture_default_str();
  conv->add_option("--zeta", conv_args.zeta, "radius for the oracle-based convergence time");
  conv->add_option("--band", conv_args.band, "steady-window relative band")->capture_default_str();
  conv->add_option("--window", conv_args.window, "steady-window length in slots")->capture_default_str();

  ValidateArgs val_args;
  auto* val = app.add_subcommand("validate", "check the rate model and scenario");
  add_common(val, val_args.common, "fig2");
  val->add_option("--samples", val_args.samples, "state/vector pairs to check")->capture_default_str();

  OracleArgs ora_args;
  auto* ora = app.add_subcommand("oracle", "multipliers under the true distribution");
  add_common(ora, ora_args.common, "tiny1node");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kInvalid;
  }

  try {
    if (*run) return cmd_run(run_args);
    if (*sweep) return cmd_sweep(sweep_args);
    if (*conv) return cmd_converge(conv_args);
    if (*val) return cmd_validate(val_args);
    if (*ora) return cmd_oracle(ora_args);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInvalid;
  } catch (const lem::ScenarioError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInvalid;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << '\n';
    return kRuntime;
  }
  return kRuntime;
}
