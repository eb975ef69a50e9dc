#pragma once

// Slot loop, metrics, convergence measurement and parameter sweeps.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <future>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "lem/controller.hpp"
#include "lem/learning.hpp"
#include "lem/network_model.hpp"
#include "lem/queues.hpp"

namespace lem {

enum class Algorithm { Lem, Esa };

inline const char* to_string(Algorithm a) { return a == Algorithm::Lem ? "lem" : "esa"; }

/// Service order used when none is requested: LIFO for LEM, FIFO for ESA.
inline ServiceOrder default_service_order(Algorithm a) {
  return a == Algorithm::Lem ? ServiceOrder::Lifo : ServiceOrder::Fifo;
}

/// Independent random streams derived from the master seed.
enum class Stream : std::uint64_t { StateSampling = 1 };

inline std::mt19937_64 make_stream(std::uint64_t seed, Stream purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(purpose)};
  return std::mt19937_64(seq);
}

inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

struct RunOptions {
  Algorithm algorithm = Algorithm::Lem;
  bool learning = true;  // ignored for ESA
  OffsetVariant offset = OffsetVariant::Practical;
  std::optional<ServiceOrder> order;
  SolverOptions solver;
  bool record_series = false;
  bool check_invariants = false;
  std::ostream* trace = nullptr;
};

/// (Q^(t), E^(t)) per slot, start of slot.
struct AugmentedSeries {
  std::size_t data_width = 0;    // active (node, commodity) pairs
  std::size_t energy_width = 0;  // energy nodes
  std::vector<double> data;
  std::vector<double> energy;
  std::vector<double> raw_energy;

  Slot length() const {
    return energy_width ? static_cast<Slot>(energy.size() / energy_width)
                        : static_cast<Slot>(data_width ? data.size() / data_width : 0);
  }
  double data_at(Slot t, std::size_t i) const { return data[static_cast<std::size_t>(t) * data_width + i]; }
  double energy_at(Slot t, std::size_t i) const {
    return energy[static_cast<std::size_t>(t) * energy_width + i];
  }
  double raw_energy_at(Slot t, std::size_t i) const {
    return raw_energy[static_cast<std::size_t>(t) * energy_width + i];
  }
};

struct RunMetrics {
  std::string scenario;
  Algorithm algorithm = Algorithm::Lem;
  double V = 0.0;
  double c = 0.0;
  std::uint64_t seed = 0;
  Slot horizon = 0;
  Slot learning_time = 0;

  NodeCommodity<double> avg_admitted;
  double total_utility = 0.0;
  NodeCommodity<double> avg_data_queue;
  double avg_data_queue_total = 0.0;
  std::vector<double> avg_energy;
  std::vector<double> max_energy;
  double avg_energy_total = 0.0;

  std::uint64_t admitted = 0;
  std::uint64_t delivered = 0;
  std::uint64_t in_network = 0;
  double delay_mean = 0.0;
  Slot delay_p50 = 0;
  Slot delay_p95 = 0;
  Slot delay_p99 = 0;

  std::uint64_t dropped = 0;
  std::uint64_t drop_events = 0;
  std::uint64_t drops_before_learning = 0;
  double drop_rate = 0.0;
  std::uint64_t outages = 0;
};

struct RunResult {
  RunMetrics metrics;
  std::optional<SolverReport> learning;
  AugmentationVectors augmentation;
  AugmentedSeries series;
  std::vector<Slot> applied_changes;
};

inline std::string format_number(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

class Engine {
 public:
  Engine(const ScenarioConfig& s, RunOptions opt)
      : s_(s),
        opt_(std::move(opt)),
        space_(s.states),
        rng_(make_stream(s.seed, Stream::StateSampling)),
        queues_(s_.topology, opt_.order.value_or(default_service_order(opt_.algorithm)), s.utility.r_max()),
        xi_(AugmentationVectors::zero(s_.topology)),
        empirical_(s.states.size()),
        theta_(s.theta_vector()),
        learning_time_(s.learning_time()) {
    s_.validate();
    const auto& topo = s_.topology;
    sum_admitted_ = NodeCommodity<double>(topo.node_count(), topo.commodity_count(), 0.0);
    sum_data_ = NodeCommodity<double>(topo.node_count(), topo.commodity_count(), 0.0);
    sum_energy_.assign(topo.node_count(), 0.0);
    for (NodeId n = 0; n < topo.node_count(); ++n)
      if (topo.has_energy(n)) energy_nodes_.push_back(n);
    for (NodeId n = 0; n < topo.node_count(); ++n)
      for (CommodityId c = 0; c < topo.commodity_count(); ++c)
        if (!topo.is_destination(n, c)) data_pairs_.emplace_back(n, c);
    series_.data_width = data_pairs_.size();
    series_.energy_width = energy_nodes_.size();
    if (opt_.trace) write_trace_header();
  }

  Slot slot() const { return t_; }
  const QueueNetwork& queues() const { return queues_; }
  const AugmentationVectors& augmentation() const { return xi_; }
  const StateSpace& current_space() const { return space_; }
  bool learned() const { return learning_.has_value(); }
  /// Index of the state drawn in the most recent step.
  std::size_t last_state_index() const { return last_state_; }

  /// From the next slot on, states are drawn from `next`. Queues and learned
  /// offsets are untouched.
  void apply_regime_change(const StateSpace& next) {
    if (!next.same_support(space_)) throw std::invalid_argument("regime change must keep the same state set");
    space_ = next;
    applied_changes_.push_back(t_);
  }

  /// Advances one slot and returns the decision taken.
  ControlDecision step() {
    for (const auto& rc : s_.regime_changes)
      if (rc.slot == t_) apply_regime_change(rc.states);

    const bool lem = opt_.algorithm == Algorithm::Lem && opt_.learning;
    if (lem && t_ == learning_time_ && !learning_) learn();

    const std::size_t m = space_.sample_index(uniform01(rng_));
    last_state_ = m;
    if (t_ < learning_time_) empirical_.observe(m);
    const JointState& z = space_.state(m);

    const QueueSnapshot snap = queues_.snapshot();
    ControlDecision d = lem_step(s_, snap, z, xi_);
    if (opt_.check_invariants) check_decision(snap, d);

    apply(d);

    accumulate(snap, d);
    if (opt_.record_series) record(snap);
    if (opt_.trace) write_trace_row(m, snap, d);

    queues_.end_slot();
    if (opt_.check_invariants) check_after(snap, d);
    ++t_;
    return d;
  }

  void run_until(Slot horizon) {
    while (t_ < horizon) step();
  }

  RunResult finish() const {
    RunResult r;
    auto& mt = r.metrics;
    const auto& topo = s_.topology;
    mt.scenario = s_.name;
    mt.algorithm = opt_.algorithm;
    mt.V = s_.V;
    mt.c = s_.c;
    mt.seed = s_.seed;
    mt.horizon = t_;
    mt.learning_time = learning_time_;
    const double T = t_ > 0 ? static_cast<double>(t_) : 1.0;
    mt.avg_admitted = sum_admitted_;
    mt.avg_data_queue = sum_data_;
    for (auto& v : mt.avg_admitted.flat()) v /= T;
    for (auto& v : mt.avg_data_queue.flat()) v /= T;
    for (NodeId n = 0; n < topo.node_count(); ++n)
      for (CommodityId c = 0; c < topo.commodity_count(); ++c) {
        if (s_.utility.is_source(n, c)) mt.total_utility += s_.utility.value(n, c, mt.avg_admitted(n, c));
        mt.avg_data_queue_total += mt.avg_data_queue(n, c);
      }
    mt.avg_energy.resize(topo.node_count());
    mt.max_energy.resize(topo.node_count());
    for (NodeId n = 0; n < topo.node_count(); ++n) {
      mt.avg_energy[n] = sum_energy_[n] / T;
      mt.max_energy[n] = queues_.max_energy(n);
      mt.avg_energy_total += mt.avg_energy[n];
    }
    mt.admitted = queues_.admitted();
    mt.delivered = queues_.delivered();
    mt.in_network = queues_.in_network();
    mt.delay_mean = queues_.delays().mean();
    mt.delay_p50 = queues_.delays().percentile(0.50);
    mt.delay_p95 = queues_.delays().percentile(0.95);
    mt.delay_p99 = queues_.delays().percentile(0.99);
    mt.dropped = queues_.dropped();
    mt.drop_events = drop_events_;
    mt.drops_before_learning = drops_before_learning_;
    mt.drop_rate = mt.admitted ? static_cast<double>(mt.dropped) / static_cast<double>(mt.admitted) : 0.0;
    mt.outages = queues_.outages();
    r.learning = learning_;
    r.augmentation = xi_;
    r.series = series_;
    r.applied_changes = applied_changes_;
    return r;
  }

 private:
  void learn() {
    const DualProblem dual(s_);
    learning_ = solve_perturbed_dual(dual, empirical_.probabilities(), theta_, opt_.solver);
    xi_ = make_augmentation(learning_->multipliers, s_.topology, s_.V, s_.c, opt_.offset);
  }

  static std::int64_t as_count(double v) {
    const auto k = std::llround(v);
    if (std::abs(v - static_cast<double>(k)) > 1e-9)
      throw std::logic_error("packet-level queues need integer amounts");
    return k;
  }

  void apply(const ControlDecision& d) {
    const auto& topo = s_.topology;
    for (LinkId l = 0; l < topo.link_count(); ++l)
      for (CommodityId c = 0; c < topo.commodity_count(); ++c)
        if (d.rates(l, c) > 0.0) queues_.transfer(l, c, as_count(d.rates(l, c)), t_);
    for (LinkId l = 0; l < topo.link_count(); ++l)
      for (CommodityId c = 0; c < topo.commodity_count(); ++c)
        if (d.drops(l, c) > 0.0) queues_.drop(topo.link(l).from, c, as_count(d.drops(l, c)));
    for (NodeId n = 0; n < topo.node_count(); ++n)
      for (CommodityId c = 0; c < topo.commodity_count(); ++c)
        if (d.admit(n, c) > 0.0) queues_.admit(n, c, as_count(d.admit(n, c)), t_);
    for (NodeId n : energy_nodes_) queues_.energy_step(n, d.consumed[n], d.harvest[n]);
    drop_events_ += d.dropped_nodes.size();
    if (t_ < learning_time_ && !d.dropped_nodes.empty()) {
      for (LinkId l = 0; l < topo.link_count(); ++l)
        for (CommodityId c = 0; c < topo.commodity_count(); ++c) drops_before_learning_ += as_count(d.drops(l, c));
    }
  }

  void accumulate(const QueueSnapshot& snap, const ControlDecision& d) {
    auto sa = sum_admitted_.flat();
    auto ad = d.admit.flat();
    for (std::size_t i = 0; i < sa.size(); ++i) sa[i] += ad[i];
    auto sd = sum_data_.flat();
    auto qd = snap.data.flat();
    for (std::size_t i = 0; i < sd.size(); ++i) sd[i] += qd[i];
    for (NodeId n = 0; n < sum_energy_.size(); ++n) sum_energy_[n] += snap.energy[n];
  }

  void record(const QueueSnapshot& snap) {
    for (auto [n, c] : data_pairs_) series_.data.push_back(snap.data(n, c) + xi_.data(n, c));
    for (NodeId n : energy_nodes_) {
      series_.energy.push_back(snap.energy[n] + xi_.energy[n]);
      series_.raw_energy.push_back(snap.energy[n]);
    }
  }

  void check_decision(const QueueSnapshot& snap, const ControlDecision& d) const {
    const auto& topo = s_.topology;
    for (NodeId n = 0; n < topo.node_count(); ++n) {
      double psum = 0.0;
      for (LinkId l : topo.out_links(n)) psum += d.power[l];
      if (psum > snap.energy[n]) throw std::logic_error("energy availability violated");
    }
  }

  void check_after(const QueueSnapshot& before, const ControlDecision& d) const {
    const auto& topo = s_.topology;
    const auto after = queues_.snapshot();
    for (NodeId n = 0; n < topo.node_count(); ++n) {
      for (CommodityId c = 0; c < topo.commodity_count(); ++c) {
        if (topo.is_destination(n, c)) {
          if (after.data(n, c) != 0.0) throw std::logic_error("destination queue not empty");
          continue;
        }
        double out = 0.0;
        double in = 0.0;
        for (LinkId l : topo.out_links(n)) out += d.rates(l, c);
        for (LinkId l : topo.in_links(n)) in += d.rates(l, c);
        const double bound = std::max(before.data(n, c) - out, 0.0) + in + d.admit(n, c);
        if (after.data(n, c) > bound) throw std::logic_error("queue recursion bound violated");
      }
    }
    if (queues_.admitted() != queues_.in_network() + queues_.delivered() + queues_.dropped())
      throw std::logic_error("packet conservation violated");
    if (queues_.outages() != 0) throw std::logic_error("energy outage");
  }

  void write_trace_header() {
    auto& os = *opt_.trace;
    os << "slot,state";
    for (auto [n, c] : data_pairs_) os << ",Q" << n + 1 << '_' << s_.topology.destination(c) + 1;
    for (NodeId n : energy_nodes_) os << ",E" << n + 1;
    for (auto [n, c] : data_pairs_) os << ",Qhat" << n + 1 << '_' << s_.topology.destination(c) + 1;
    for (NodeId n : energy_nodes_) os << ",Ehat" << n + 1;
    os << ",admitted,transmitting,delivered_total,dropped_total\n";
  }

  void write_trace_row(std::size_t m, const QueueSnapshot& snap, const ControlDecision& d) {
    auto& os = *opt_.trace;
    os << t_ << ',' << m;
    for (auto [n, c] : data_pairs_) os << ',' << format_number(snap.data(n, c));
    for (NodeId n : energy_nodes_) os << ',' << format_number(snap.energy[n]);
    for (auto [n, c] : data_pairs_) os << ',' << format_number(snap.data(n, c) + xi_.data(n, c));
    for (NodeId n : energy_nodes_) os << ',' << format_number(snap.energy[n] + xi_.energy[n]);
    double adm = 0.0;
    for (double v : d.admit.flat()) adm += v;
    int tx = 0;
    for (double p : d.power) tx += p > 0.0;
    os << ',' << format_number(adm) << ',' << tx << ',' << queues_.delivered() << ',' << queues_.dropped()
       << '\n';
  }

  ScenarioConfig s_;
  RunOptions opt_;
  StateSpace space_;
  std::mt19937_64 rng_;
  QueueNetwork queues_;
  AugmentationVectors xi_;
  EmpiricalDistribution empirical_;
  std::vector<double> theta_;
  Slot learning_time_;
  std::optional<SolverReport> learning_;
  Slot t_ = 0;
  std::size_t last_state_ = 0;

  std::vector<NodeId> energy_nodes_;
  std::vector<std::pair<NodeId, CommodityId>> data_pairs_;
  NodeCommodity<double> sum_admitted_;
  NodeCommodity<double> sum_data_;
  std::vector<double> sum_energy_;
  std::uint64_t drop_events_ = 0;
  std::uint64_t drops_before_learning_ = 0;
  AugmentedSeries series_;
  std::vector<Slot> applied_changes_;
};

inline RunResult run(const ScenarioConfig& s, const RunOptions& opt) {
  if (s.horizon <= 0) throw std::invalid_argument("horizon must be positive");
  Engine e(s, opt);
  e.run_until(s.horizon);
  return e.finish();
}

struct SteadyWindowOptions {
  double band = 0.10;  // relative half-width around the long-run mean
  Slot window = 200;
};

struct SegmentConvergence {
  Slot start = 0;
  Slot end = 0;
  std::vector<double> long_run_mean;
  std::optional<Slot> steady_time;  // relative to segment start
};

struct ConvergenceReport {
  std::optional<Slot> t_zeta;
  std::vector<SegmentConvergence> segments;
  std::vector<Slot> unapplied_changes;
};

/// First slot at which ||(Q^, E^) - target|| < zeta.
inline std::optional<Slot> first_entry_time(const AugmentedSeries& s, std::span<const double> target,
                                            double zeta) {
  const std::size_t w = s.data_width + s.energy_width;
  if (target.size() != w) throw std::invalid_argument("target dimension mismatch");
  for (Slot t = 0; t < s.length(); ++t) {
    double d2 = 0.0;
    for (std::size_t i = 0; i < s.data_width; ++i) {
      const double x = s.data_at(t, i) - target[i];
      d2 += x * x;
    }
    for (std::size_t i = 0; i < s.energy_width; ++i) {
      const double x = s.energy_at(t, i) - target[s.data_width + i];
      d2 += x * x;
    }
    if (std::sqrt(d2) < zeta) return t;
  }
  return std::nullopt;
}

/// Oracle-free settling time of E^ on [start, end): the first slot from which
/// every E^_n stays within band * |mean_n| of its mean over the second half of
/// the segment for `window` consecutive slots.
inline SegmentConvergence steady_window_time(const AugmentedSeries& s, Slot start, Slot end,
                                             const SteadyWindowOptions& opt = {}) {
  SegmentConvergence seg{start, end, std::vector<double>(s.energy_width, 0.0), std::nullopt};
  if (end <= start) return seg;
  const Slot mid = start + (end - start) / 2;
  for (std::size_t i = 0; i < s.energy_width; ++i) {
    double sum = 0.0;
    for (Slot t = mid; t < end; ++t) sum += s.energy_at(t, i);
    seg.long_run_mean[i] = sum / static_cast<double>(end - mid);
  }
  Slot run_start = start;
  for (Slot t = start; t < end; ++t) {
    bool in = true;
    for (std::size_t i = 0; i < s.energy_width && in; ++i)
      in = std::abs(s.energy_at(t, i) - seg.long_run_mean[i]) <= opt.band * std::abs(seg.long_run_mean[i]);
    if (!in) {
      run_start = t + 1;
      continue;
    }
    if (t + 1 - run_start >= opt.window) {
      seg.steady_time = run_start - start;
      break;
    }
  }
  return seg;
}

inline ConvergenceReport measure_convergence(const AugmentedSeries& s, const std::vector<double>* target,
                                             double zeta, const std::vector<Slot>& change_slots,
                                             const SteadyWindowOptions& opt = {}) {
  ConvergenceReport rep;
  if (target) rep.t_zeta = first_entry_time(s, *target, zeta);
  std::vector<Slot> bounds{0};
  for (Slot c : change_slots) {
    if (c > 0 && c < s.length()) {
      bounds.push_back(c);
    } else if (c >= s.length()) {
      rep.unapplied_changes.push_back(c);
    }
  }
  bounds.push_back(s.length());
  for (std::size_t k = 0; k + 1 < bounds.size(); ++k)
    rep.segments.push_back(steady_window_time(s, bounds[k], bounds[k + 1], opt));
  return rep;
}

/// Oracle target (upsilon*, nu* + theta) flattened in series order.
inline std::vector<double> convergence_target(const Multipliers& m, const Topology& topo) {
  return MultiplierLayout(topo).flatten(m);
}

struct SweepCell {
  double V = 0.0;
  Algorithm algorithm = Algorithm::Lem;
  std::vector<RunMetrics> runs;

  template <typename F>
  std::pair<double, double> mean_std(F field) const {
    double s = 0.0;
    double s2 = 0.0;
    for (const auto& r : runs) {
      const double v = field(r);
      s += v;
      s2 += v * v;
    }
    const double n = static_cast<double>(runs.size());
    const double mean = s / n;
    const double var = runs.size() > 1 ? std::max(0.0, (s2 - n * mean * mean) / (n - 1.0)) : 0.0;
    return {mean, std::sqrt(var)};
  }
};

/// Runs every (V, algorithm, seed) combination; `make` builds the scenario
/// for a given V and seed. Runs execute on up to hardware_concurrency threads.
template <typename MakeScenario>
std::vector<SweepCell> sweep(MakeScenario make, const std::vector<double>& V_list,
                             const std::vector<Algorithm>& algorithms, const std::vector<std::uint64_t>& seeds,
                             const RunOptions& base = {}) {
  struct Job {
    std::size_t cell;
    ScenarioConfig scenario;
    RunOptions options;
  };
  std::vector<SweepCell> cells;
  std::vector<Job> jobs;
  for (double V : V_list) {
    for (Algorithm a : algorithms) {
      cells.push_back({V, a, {}});
      for (std::uint64_t seed : seeds) {
        RunOptions o = base;
        o.algorithm = a;
        o.trace = nullptr;
        jobs.push_back({cells.size() - 1, make(V, seed), o});
      }
    }
  }
  std::vector<RunMetrics> results(jobs.size());
  const std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
  for (std::size_t first = 0; first < jobs.size(); first += workers) {
    std::vector<std::future<RunMetrics>> batch;
    for (std::size_t j = first; j < std::min(jobs.size(), first + workers); ++j)
      batch.push_back(std::async(std::launch::async, [&jobs, j] { return run(jobs[j].scenario, jobs[j].options).metrics; }));
    for (std::size_t j = 0; j < batch.size(); ++j) results[first + j] = batch[j].get();
  }
  for (std::size_t j = 0; j < jobs.size(); ++j) cells[jobs[j].cell].runs.push_back(std::move(results[j]));
  return cells;
}

}  // namespace lem
