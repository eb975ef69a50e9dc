#pragma once

// Empirical state distribution, the dual function of the offline utility
// program, and the perturbed dual learning step.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <utility>
#include <algorithm>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "lem/arrays.hpp"
#include "lem/controller.hpp"
#include "lem/network_model.hpp"

namespace lem {

class EmpiricalDistribution {
 public:
  explicit EmpiricalDistribution(std::size_t state_count) : counts_(state_count, 0) {}

  void observe(std::size_t m) {
    counts_.at(m) += 1;
    ++total_;
  }

  std::uint64_t total() const { return total_; }
  std::uint64_t count(std::size_t m) const { return counts_.at(m); }
  std::size_t size() const { return counts_.size(); }

  std::vector<double> probabilities() const {
    if (total_ == 0) throw std::logic_error("empirical distribution has no observations");
    std::vector<double> p(counts_.size());
    for (std::size_t m = 0; m < p.size(); ++m)
      p[m] = static_cast<double>(counts_[m]) / static_cast<double>(total_);
    return p;
  }

 private:
  std::vector<std::uint64_t> counts_;
  std::uint64_t total_ = 0;
};

/// Lagrange multipliers: upsilon >= 0 for flow conservation per
/// (node, commodity), nu (free sign) for energy balance per node.
/// Destination entries of upsilon and nu of nodes without an energy queue
/// are pinned to zero.
struct Multipliers {
  NodeCommodity<double> data;
  std::vector<double> energy;

  static Multipliers zero(const Topology& topo) {
    return {NodeCommodity<double>(topo.node_count(), topo.commodity_count(), 0.0),
            std::vector<double>(topo.node_count(), 0.0)};
  }
};

/// Coordinates of a Multipliers value that are free variables.
class MultiplierLayout {
 public:
  explicit MultiplierLayout(const Topology& topo) : topo_(&topo) {}

  bool data_active(NodeId n, CommodityId c) const { return !topo_->is_destination(n, c); }
  bool energy_active(NodeId n) const { return topo_->has_energy(n); }

  std::size_t data_size() const {
    std::size_t k = 0;
    for (NodeId n = 0; n < topo_->node_count(); ++n)
      for (CommodityId c = 0; c < topo_->commodity_count(); ++c) k += data_active(n, c);
    return k;
  }
  std::size_t size() const { return data_size() + topo_->energy_node_count(); }

  std::vector<double> flatten(const Multipliers& m) const {
    std::vector<double> v;
    for (NodeId n = 0; n < topo_->node_count(); ++n)
      for (CommodityId c = 0; c < topo_->commodity_count(); ++c)
        if (data_active(n, c)) v.push_back(m.data(n, c));
    for (NodeId n = 0; n < topo_->node_count(); ++n)
      if (energy_active(n)) v.push_back(m.energy[n]);
    return v;
  }

  Multipliers unflatten(std::span<const double> v) const {
    Multipliers m = Multipliers::zero(*topo_);
    std::size_t k = 0;
    for (NodeId n = 0; n < topo_->node_count(); ++n)
      for (CommodityId c = 0; c < topo_->commodity_count(); ++c)
        if (data_active(n, c)) m.data(n, c) = v[k++];
    for (NodeId n = 0; n < topo_->node_count(); ++n)
      if (energy_active(n)) m.energy[n] = v[k++];
    return m;
  }

 private:
  const Topology* topo_;
};

inline double distance(const Multipliers& a, const Multipliers& b, const Topology& topo) {
  MultiplierLayout lay(topo);
  const auto x = lay.flatten(a);
  const auto y = lay.flatten(b);
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  return std::sqrt(s);
}

inline double norm(const Multipliers& a, const Topology& topo) {
  return distance(a, Multipliers::zero(topo), topo);
}

/// Maximizing action of one per-state dual term.
struct DualAction {
  NodeCommodity<double> admit;
  PowerVector power;
  LinkCommodity<double> rates;
  std::vector<double> harvest;
};

struct DualStateResult {
  double value = 0.0;
  DualAction action;
};

/// g_m(upsilon, nu) = sup { V sum U(r) - sum upsilon [r + in - out]
///                          - sum nu [e - sum_b P] }
/// evaluated exactly by decomposing the sup into admission, power/routing
/// and harvesting parts.
class DualProblem {
 public:
  explicit DualProblem(const ScenarioConfig& s)
      : topo_(s.topology), utility_(s.utility), rates_(s.rates), V_(s.V), states_(s.states.states()) {
    const auto L = topo_.link_count();
    for (const auto& z : states_) {
      StateOptions opt;
      opt.unit_rate.resize(L);
      for (LinkId l = 0; l < L; ++l) opt.unit_rate[l] = rates_->unit_rate(z, l);
      if (!rates_->per_node_unit_choice()) {
        for (auto& p : rates_->feasible_power_vectors(z)) {
          PowerOption po;
          po.rate.resize(L);
          po.node_power.assign(topo_.node_count(), 0.0);
          for (LinkId l = 0; l < L; ++l) {
            po.rate[l] = rates_->rate(z, p, l);
            po.node_power[topo_.link(l).from] += p[l];
          }
          po.power = std::move(p);
          opt.vectors.push_back(std::move(po));
        }
      }
      options_.push_back(std::move(opt));
    }
  }

  const Topology& topology() const { return topo_; }
  std::size_t state_count() const { return states_.size(); }
  double V() const { return V_; }

  /// sup over admissions; state independent.
  double admission_part(const Multipliers& mult, NodeCommodity<double>* admit = nullptr) const {
    double v = 0.0;
    for (NodeId n = 0; n < topo_.node_count(); ++n) {
      for (CommodityId c = 0; c < topo_.commodity_count(); ++c) {
        if (!utility_.is_source(n, c)) continue;
        const double ups = mult.data(n, c);
        const double r = admit_amount(V_, utility_.weight(n, c), ups, utility_.r_max(),
                                      utility_.integer_admissions());
        v += V_ * utility_.value(n, c, r) - ups * r;
        if (admit) (*admit)(n, c) = r;
      }
    }
    return v;
  }

  /// Per link: best commodity differential [max_c (ups_a - ups_b)]^+ and its index.
  void link_differentials(const Multipliers& mult, std::vector<double>& w,
                          std::vector<CommodityId>& best) const {
    w.assign(topo_.link_count(), 0.0);
    best.assign(topo_.link_count(), 0);
    for (LinkId l = 0; l < topo_.link_count(); ++l) {
      const auto [a, b] = topo_.link(l);
      for (CommodityId c = 0; c < topo_.commodity_count(); ++c) {
        const double ua = topo_.is_destination(a, c) ? 0.0 : mult.data(a, c);
        const double ub = topo_.is_destination(b, c) ? 0.0 : mult.data(b, c);
        if (ua - ub > w[l]) {
          w[l] = ua - ub;
          best[l] = c;
        }
      }
    }
  }

  /// Power/routing plus harvesting part of g_m for precomputed link
  /// differentials. Writes the maximizing power vector when asked.
  double state_part(std::size_t m, const std::vector<double>& w, std::span<const double> nu,
                    PowerVector* power = nullptr) const {
    const auto& opt = options_[m];
    const auto& z = states_[m];
    double v = 0.0;
    if (rates_->per_node_unit_choice()) {
      if (power) power->assign(topo_.link_count(), 0.0);
      for (NodeId n = 0; n < topo_.node_count(); ++n) {
        if (!topo_.has_energy(n)) continue;
        double best = 0.0;
        std::optional<LinkId> pick;
        for (LinkId l : topo_.out_links(n)) {
          const double score = opt.unit_rate[l] * w[l] + nu[n];
          if (score > best) {
            best = score;
            pick = l;
          }
        }
        v += best;
        if (power && pick) (*power)[*pick] = 1.0;
      }
    } else {
      double best = -std::numeric_limits<double>::infinity();
      std::size_t best_k = 0;
      for (std::size_t k = 0; k < opt.vectors.size(); ++k) {
        const auto& po = opt.vectors[k];
        double s = 0.0;
        for (LinkId l = 0; l < po.rate.size(); ++l) s += po.rate[l] * w[l];
        for (NodeId n = 0; n < po.node_power.size(); ++n) s += nu[n] * po.node_power[n];
        if (s > best) {
          best = s;
          best_k = k;
        }
      }
      v += best;
      if (power) *power = opt.vectors[best_k].power;
    }
    for (NodeId n = 0; n < topo_.node_count(); ++n)
      if (topo_.has_energy(n) && nu[n] < 0.0) v += -nu[n] * z.harvest[n];
    return v;
  }

  /// g_m(upsilon, nu) with its maximizing action.
  DualStateResult state_value(std::size_t m, const Multipliers& mult) const {
    DualStateResult r;
    r.action.admit = NodeCommodity<double>(topo_.node_count(), topo_.commodity_count(), 0.0);
    r.action.rates = LinkCommodity<double>(topo_.link_count(), topo_.commodity_count(), 0.0);
    r.action.harvest.assign(topo_.node_count(), 0.0);
    std::vector<double> w;
    std::vector<CommodityId> best;
    link_differentials(mult, w, best);
    r.value = admission_part(mult, &r.action.admit) + state_part(m, w, mult.energy, &r.action.power);
    const auto& z = states_[m];
    for (LinkId l = 0; l < topo_.link_count(); ++l) {
      if (w[l] <= 0.0) continue;
      const double mu = rates_->rate(z, r.action.power, l);
      r.action.rates(l, best[l]) = mu;
    }
    for (NodeId n = 0; n < topo_.node_count(); ++n)
      if (topo_.has_energy(n) && mult.energy[n] < 0.0) r.action.harvest[n] = z.harvest[n];
    return r;
  }

  /// sum_m pi_m g_m(upsilon, nu - shift), over states with pi_m > 0.
  double value(const Multipliers& mult, std::span<const double> probs,
               std::span<const double> shift = {}) const {
    check_probs(probs);
    const auto nu = shifted(mult.energy, shift);
    std::vector<double> w;
    std::vector<CommodityId> best;
    link_differentials(mult, w, best);
    double v = admission_part(mult);
    for (std::size_t m = 0; m < states_.size(); ++m)
      if (probs[m] > 0.0) v += probs[m] * state_part(m, w, nu);
    return v;
  }

  /// Expected constraint slack at the per-state maximizers: a subgradient of
  /// value() at (upsilon, nu).
  Multipliers subgradient(const Multipliers& mult, std::span<const double> probs,
                          std::span<const double> shift = {}, double* value_out = nullptr) const {
    check_probs(probs);
    const auto nu = shifted(mult.energy, shift);
    std::vector<double> w;
    std::vector<CommodityId> best;
    link_differentials(mult, w, best);
    Multipliers g = Multipliers::zero(topo_);
    NodeCommodity<double> admit(topo_.node_count(), topo_.commodity_count(), 0.0);
    const double adm = admission_part(mult, &admit);
    double mass = 0.0;
    double v = 0.0;
    PowerVector power;
    for (std::size_t m = 0; m < states_.size(); ++m) {
      const double p = probs[m];
      if (p <= 0.0) continue;
      mass += p;
      v += p * state_part(m, w, nu, &power);
      const auto& z = states_[m];
      for (LinkId l = 0; l < topo_.link_count(); ++l) {
        if (power[l] <= 0.0 || w[l] <= 0.0) continue;
        const double mu = rates_->rate(z, power, l);
        const auto [a, b] = topo_.link(l);
        g.data(a, best[l]) += p * mu;
        if (!topo_.is_destination(b, best[l])) g.data(b, best[l]) -= p * mu;
      }
      for (NodeId n = 0; n < topo_.node_count(); ++n) {
        if (!topo_.has_energy(n)) continue;
        double psum = 0.0;
        for (LinkId l : topo_.out_links(n)) psum += power[l];
        const double e = nu[n] < 0.0 ? z.harvest[n] : 0.0;
        g.energy[n] -= p * (e - psum);
      }
    }
    for (NodeId n = 0; n < topo_.node_count(); ++n)
      for (CommodityId c = 0; c < topo_.commodity_count(); ++c)
        if (!topo_.is_destination(n, c)) g.data(n, c) -= mass * admit(n, c);
    if (value_out) *value_out = v + mass * adm;
    return g;
  }

  /// Adds -p * [r + in - out] and -p * [e - sum_b P] to g.
  void accumulate_slack(const DualAction& a, double p, Multipliers& g) const {
    for (NodeId n = 0; n < topo_.node_count(); ++n) {
      for (CommodityId c = 0; c < topo_.commodity_count(); ++c) {
        if (topo_.is_destination(n, c)) continue;
        double slack = a.admit(n, c);
        for (LinkId l : topo_.in_links(n)) slack += a.rates(l, c);
        for (LinkId l : topo_.out_links(n)) slack -= a.rates(l, c);
        g.data(n, c) -= p * slack;
      }
      if (!topo_.has_energy(n)) continue;
      double psum = 0.0;
      for (LinkId l : topo_.out_links(n)) psum += a.power[l];
      g.energy[n] -= p * (a.harvest[n] - psum);
    }
  }

 private:
  struct PowerOption {
    PowerVector power;
    std::vector<double> rate;
    std::vector<double> node_power;
  };
  struct StateOptions {
    std::vector<double> unit_rate;
    std::vector<PowerOption> vectors;
  };

  void check_probs(std::span<const double> probs) const {
    if (probs.size() != states_.size()) throw std::invalid_argument("distribution size mismatch");
  }

  std::vector<double> shifted(std::span<const double> nu, std::span<const double> shift) const {
    std::vector<double> out(nu.begin(), nu.end());
    if (!shift.empty())
      for (std::size_t n = 0; n < out.size(); ++n) out[n] -= shift[n];
    return out;
  }

  Topology topo_;
  UtilityModel utility_;
  std::shared_ptr<const RatePowerModel> rates_;
  double V_;
  std::vector<JointState> states_;
  std::vector<StateOptions> options_;
};

inline DualStateResult dual_state_value(const DualProblem& d, std::size_t m, const Multipliers& mult) {
  return d.state_value(m, mult);
}

inline double dual_value(const DualProblem& d, const Multipliers& mult, std::span<const double> probs) {
  return d.value(mult, probs);
}

inline Multipliers dual_subgradient(const DualProblem& d, const Multipliers& mult,
                                    std::span<const double> probs) {
  return d.subgradient(mult, probs);
}

struct SolverOptions {
  double step0 = 0.0;  // 0 selects V
  std::size_t max_iterations = 20'000;
  std::size_t min_iterations = 2'000;
  std::size_t window = 50;
  double rel_tol = 1e-6;
  bool record_history = false;
};

struct SolverReport {
  Multipliers multipliers;
  double value = 0.0;
  std::size_t iterations = 0;
  double runtime_seconds = 0.0;
  bool stopped_on_tolerance = false;
  std::vector<double> best_history;
};

/// Minimizes sum_m pi_m g_m(upsilon, nu - theta) over upsilon >= 0 by
/// projected subgradient with step step0/sqrt(k), starting at
/// (upsilon, nu) = (0, theta). Returns the best iterate; its nu coordinate
/// is the unshifted variable, so it sits near nu* + theta.
inline SolverReport solve_perturbed_dual(const DualProblem& d, std::span<const double> probs,
                                         std::span<const double> theta, const SolverOptions& opt = {}) {
  const auto start = std::chrono::steady_clock::now();
  double total = 0.0;
  for (double p : probs) total += p;
  if (probs.size() != d.state_count() || !(total > 0.0))
    throw std::invalid_argument("degenerate distribution");
  const auto& topo = d.topology();
  const MultiplierLayout lay(topo);
  const double step0 = opt.step0 > 0.0 ? opt.step0 : d.V();

  Multipliers x = Multipliers::zero(topo);
  for (NodeId n = 0; n < topo.node_count(); ++n)
    if (lay.energy_active(n)) x.energy[n] = theta[n];

  SolverReport rep;
  rep.multipliers = x;
  rep.value = std::numeric_limits<double>::infinity();
  std::vector<double> history;
  std::size_t k = 0;
  for (k = 1; k <= opt.max_iterations; ++k) {
    double v = 0.0;
    const Multipliers g = d.subgradient(x, probs, theta, &v);
    if (v < rep.value) {
      rep.value = v;
      rep.multipliers = x;
    }
    history.push_back(rep.value);
    if (k >= opt.min_iterations && k > opt.window) {
      const double old = history[k - 1 - opt.window];
      if (old - rep.value <= opt.rel_tol * std::max(1.0, std::abs(rep.value))) {
        rep.stopped_on_tolerance = true;
        break;
      }
    }
    const double step = step0 / std::sqrt(static_cast<double>(k));
    auto xf = lay.flatten(x);
    const auto gf = lay.flatten(g);
    for (std::size_t i = 0; i < xf.size(); ++i) xf[i] -= step * gf[i];
    x = lay.unflatten(xf);
    for (NodeId n = 0; n < topo.node_count(); ++n)
      for (CommodityId c = 0; c < topo.commodity_count(); ++c)
        x.data(n, c) = std::max(x.data(n, c), 0.0);
  }
  rep.iterations = std::min(k, opt.max_iterations);
  if (opt.record_history) rep.best_history = std::move(history);
  rep.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

enum class OffsetVariant { Practical, Theoretical };

/// V^{1-c/2} ln V (practical) or V^{1-c/2} (ln V)^2 (theoretical).
inline double augmentation_offset(double V, double c, OffsetVariant variant) {
  const double base = std::pow(V, 1.0 - c / 2.0) * std::log(V);
  return variant == OffsetVariant::Theoretical ? base * std::log(V) : base;
}

/// xi_Q = upsilon*(T_L) - offset, xi_E = nu*(T_L) - offset on the free
/// coordinates; pinned coordinates stay zero.
inline AugmentationVectors make_augmentation(const Multipliers& m, const Topology& topo, double V, double c,
                                             OffsetVariant variant = OffsetVariant::Practical) {
  const double off = augmentation_offset(V, c, variant);
  const MultiplierLayout lay(topo);
  AugmentationVectors xi = AugmentationVectors::zero(topo);
  for (NodeId n = 0; n < topo.node_count(); ++n) {
    for (CommodityId c2 = 0; c2 < topo.commodity_count(); ++c2)
      if (lay.data_active(n, c2)) xi.data(n, c2) = m.data(n, c2) - off;
    if (lay.energy_active(n)) xi.energy[n] = m.energy[n] - off;
  }
  return xi;
}

inline SolverOptions oracle_solver_options() {
  SolverOptions o;
  o.max_iterations = 100'000;
  o.min_iterations = 20'000;
  o.rel_tol = 1e-9;
  return o;
}

/// The learning step run on the true distribution.
inline SolverReport oracle_multipliers(const ScenarioConfig& s, const SolverOptions& opt = oracle_solver_options()) {
  const DualProblem d(s);
  return solve_perturbed_dual(d, s.states.probabilities(), s.theta_vector(), opt);
}

struct GridSearchResult {
  Multipliers multipliers;
  double value = 0.0;
  std::size_t evaluations = 0;
};

/// Box for grid_search_dual: upsilon in [0, 2 V beta], nu within
/// 2 V beta mu_max of theta.
inline std::vector<std::pair<double, double>> default_dual_box(const ScenarioConfig& s) {
  const MultiplierLayout lay(s.topology);
  const double span = 2.0 * s.V * s.utility.beta();
  std::vector<std::pair<double, double>> box;
  for (NodeId n = 0; n < s.topology.node_count(); ++n)
    for (CommodityId c = 0; c < s.topology.commodity_count(); ++c)
      if (lay.data_active(n, c)) box.emplace_back(0.0, span);
  for (NodeId n = 0; n < s.topology.node_count(); ++n)
    if (lay.energy_active(n)) box.emplace_back(s.theta(n) - span * s.rates->mu_max(), s.theta(n) + span * s.rates->mu_max());
  return box;
}

/// Exhaustive coarse-to-fine search of sum_m pi_m g_m(upsilon, nu - theta)
/// over a box of the active coordinates (flattened order). Each round scans
/// `points` values per axis and halves the box around the best point.
inline GridSearchResult grid_search_dual(const DualProblem& d, std::span<const double> probs,
                                         std::span<const double> theta,
                                         std::vector<std::pair<double, double>> box, std::size_t points = 41,
                                         std::size_t rounds = 40) {
  const MultiplierLayout lay(d.topology());
  const std::size_t dim = lay.size();
  if (box.size() != dim) throw std::invalid_argument("box dimension mismatch");
  if (dim == 0 || dim > 3) throw std::invalid_argument("grid search supports 1 to 3 free coordinates");
  if (points < 3) throw std::invalid_argument("need at least 3 grid points per axis");
  const std::size_t n_data = lay.data_size();

  GridSearchResult best;
  best.value = std::numeric_limits<double>::infinity();
  std::vector<double> x(dim);
  std::vector<double> arg(dim);
  for (std::size_t round = 0; round < rounds; ++round) {
    std::size_t total = 1;
    for (std::size_t i = 0; i < dim; ++i) total *= points;
    for (std::size_t k = 0; k < total; ++k) {
      std::size_t rem = k;
      for (std::size_t i = 0; i < dim; ++i) {
        const std::size_t j = rem % points;
        rem /= points;
        const auto [lo, hi] = box[i];
        x[i] = lo + (hi - lo) * static_cast<double>(j) / static_cast<double>(points - 1);
        if (i < n_data) x[i] = std::max(x[i], 0.0);
      }
      const double v = d.value(lay.unflatten(x), probs, theta);
      ++best.evaluations;
      if (v < best.value) {
        best.value = v;
        arg = x;
      }
    }
    for (std::size_t i = 0; i < dim; ++i) {
      const double half = (box[i].second - box[i].first) / 4.0;
      box[i] = {arg[i] - half, arg[i] + half};
      if (i < n_data && box[i].first < 0.0) box[i] = {0.0, 2.0 * half};
    }
  }
  best.multipliers = lay.unflatten(arg);
  return best;
}

struct PrimalResult {
  double value = -std::numeric_limits<double>::infinity();  // V * U_tot(r*)
  NodeCommodity<double> rates;
  std::size_t policies = 0;
};

namespace detail {

/// Max flow from a super source (supplies at nodes) to node `sink`.
inline double max_flow(std::size_t N, const std::vector<Link>& links, const std::vector<double>& cap,
                       const std::vector<double>& supply, NodeId sink) {
  const std::size_t S = N;
  const std::size_t V = N + 1;
  std::vector<std::vector<double>> c(V, std::vector<double>(V, 0.0));
  for (std::size_t l = 0; l < links.size(); ++l) c[links[l].from][links[l].to] += cap[l];
  for (NodeId n = 0; n < N; ++n) c[S][n] += supply[n];
  double flow = 0.0;
  for (;;) {
    std::vector<std::size_t> parent(V, V);
    std::vector<std::size_t> queue{S};
    parent[S] = S;
    for (std::size_t h = 0; h < queue.size() && parent[sink] == V; ++h)
      for (std::size_t v = 0; v < V; ++v)
        if (parent[v] == V && c[queue[h]][v] > 1e-12) {
          parent[v] = queue[h];
          queue.push_back(v);
        }
    if (parent[sink] == V) return flow;
    double push = std::numeric_limits<double>::infinity();
    for (std::size_t v = sink; v != S; v = parent[v]) push = std::min(push, c[parent[v]][v]);
    for (std::size_t v = sink; v != S; v = parent[v]) {
      c[parent[v]][v] -= push;
      c[v][parent[v]] += push;
    }
    flow += push;
  }
}

}  // namespace detail

/// Optimum of the offline utility program by enumeration, for one commodity:
/// every assignment of a feasible power vector to each state is tried, the
/// energy constraint is checked on average, and the admission vector is the
/// best one routable through the average link capacities. Integer
/// admissions range over {0..R_max}; continuous ones over a grid of
/// `rate_grid` steps, or exactly when there is a single source.
inline PrimalResult brute_force_primal(const ScenarioConfig& s, std::span<const double> probs,
                                       std::size_t rate_grid = 200, std::size_t max_policies = 1'000'000) {
  const auto& topo = s.topology;
  if (topo.commodity_count() != 1) throw std::invalid_argument("brute-force primal needs a single commodity");
  const auto& states = s.states.states();
  if (probs.size() != states.size()) throw std::invalid_argument("distribution size mismatch");
  const NodeId dest = topo.destination(0);
  std::vector<NodeId> sources;
  for (NodeId n = 0; n < topo.node_count(); ++n)
    if (s.utility.is_source(n, 0)) sources.push_back(n);

  std::vector<std::vector<PowerVector>> options;
  std::size_t total = 1;
  for (const auto& z : states) {
    options.push_back(s.rates->feasible_power_vectors(z));
    if (total > max_policies / options.back().size()) throw std::invalid_argument("too many policies to enumerate");
    total *= options.back().size();
  }

  std::vector<double> levels;
  if (s.utility.integer_admissions()) {
    for (int r = 0; r <= static_cast<int>(std::floor(s.utility.r_max())); ++r) levels.push_back(r);
  } else {
    for (std::size_t k = 0; k <= rate_grid; ++k)
      levels.push_back(s.utility.r_max() * static_cast<double>(k) / static_cast<double>(rate_grid));
  }
  const bool exact_single = !s.utility.integer_admissions() && sources.size() == 1;

  PrimalResult best;
  best.rates = NodeCommodity<double>(topo.node_count(), 1, 0.0);
  std::vector<std::size_t> pick(states.size(), 0);
  std::vector<double> cap(topo.link_count());
  std::vector<double> supply(topo.node_count());
  std::vector<double> power(topo.node_count());
  std::vector<double> harvest(topo.node_count());
  auto utility = [&](const std::vector<double>& r) {
    double u = 0.0;
    for (std::size_t i = 0; i < sources.size(); ++i) u += s.V * s.utility.value(sources[i], 0, r[i]);
    return u;
  };
  for (std::size_t k = 0; k < total; ++k) {
    std::size_t rem = k;
    for (std::size_t m = 0; m < states.size(); ++m) {
      pick[m] = rem % options[m].size();
      rem /= options[m].size();
    }
    std::fill(cap.begin(), cap.end(), 0.0);
    std::fill(power.begin(), power.end(), 0.0);
    std::fill(harvest.begin(), harvest.end(), 0.0);
    for (std::size_t m = 0; m < states.size(); ++m) {
      const auto& p = options[m][pick[m]];
      for (LinkId l = 0; l < topo.link_count(); ++l) {
        cap[l] += probs[m] * s.rates->rate(states[m], p, l);
        power[topo.link(l).from] += probs[m] * p[l];
      }
      for (NodeId n = 0; n < topo.node_count(); ++n) harvest[n] += probs[m] * states[m].harvest[n];
    }
    ++best.policies;
    bool energy_ok = true;
    for (NodeId n = 0; n < topo.node_count(); ++n)
      if (power[n] > harvest[n] + 1e-12) energy_ok = false;
    if (!energy_ok) continue;

    std::vector<double> r(sources.size(), 0.0);
    if (exact_single) {
      std::fill(supply.begin(), supply.end(), 0.0);
      supply[sources[0]] = s.utility.r_max();
      r[0] = std::min(s.utility.r_max(), detail::max_flow(topo.node_count(), topo.links(), cap, supply, dest));
      if (const double v = utility(r); v > best.value) {
        best.value = v;
        best.rates(sources[0], 0) = r[0];
      }
      continue;
    }
    std::vector<std::size_t> idx(sources.size(), 0);
    for (;;) {
      std::fill(supply.begin(), supply.end(), 0.0);
      double want = 0.0;
      for (std::size_t i = 0; i < sources.size(); ++i) {
        r[i] = levels[idx[i]];
        supply[sources[i]] = r[i];
        want += r[i];
      }
      const double v = utility(r);
      if (v > best.value &&
          detail::max_flow(topo.node_count(), topo.links(), cap, supply, dest) >= want - 1e-9) {
        best.value = v;
        for (std::size_t i = 0; i < sources.size(); ++i) best.rates(sources[i], 0) = r[i];
      }
      std::size_t i = 0;
      while (i < idx.size() && ++idx[i] == levels.size()) idx[i++] = 0;
      if (i == idx.size()) break;
    }
  }
  return best;
}

}  // namespace lem
