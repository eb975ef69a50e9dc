#pragma once

// Network graph, stochastic joint state space, rate-power functions, utility
// functions and scenario configuration.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lem/arrays.hpp"

namespace lem {

struct Link {
  NodeId from = 0;
  NodeId to = 0;
  bool operator==(const Link&) const = default;
};

/// Directed graph with one commodity per destination node.
class Topology {
 public:
  Topology() = default;

  Topology(std::size_t node_count, std::vector<Link> links,
           std::vector<NodeId> destinations)
      : node_count_(node_count),
        links_(std::move(links)),
        destinations_(std::move(destinations)),
        out_(node_count),
        in_(node_count) {
    if (node_count_ == 0) throw std::invalid_argument("topology needs at least one node");
    std::set<std::pair<NodeId, NodeId>> seen;
    for (LinkId l = 0; l < links_.size(); ++l) {
      const auto& [a, b] = links_[l];
      if (a >= node_count_ || b >= node_count_)
        throw std::invalid_argument("link endpoint out of range");
      if (a == b) throw std::invalid_argument("self-loop link");
      if (!seen.insert({a, b}).second) throw std::invalid_argument("duplicate link");
      out_[a].push_back(l);
      in_[b].push_back(l);
    }
    if (destinations_.empty()) throw std::invalid_argument("no commodities");
    std::set<NodeId> dests;
    for (NodeId d : destinations_) {
      if (d >= node_count_) throw std::invalid_argument("destination out of range");
      if (!dests.insert(d).second) throw std::invalid_argument("duplicate destination");
    }
    for (NodeId n = 0; n < node_count_; ++n)
      d_max_ = std::max({d_max_, out_[n].size(), in_[n].size()});
  }

  std::size_t node_count() const { return node_count_; }
  std::size_t link_count() const { return links_.size(); }
  std::size_t commodity_count() const { return destinations_.size(); }

  const std::vector<Link>& links() const { return links_; }
  const Link& link(LinkId l) const { return links_.at(l); }
  NodeId destination(CommodityId c) const { return destinations_.at(c); }
  const std::vector<NodeId>& destinations() const { return destinations_; }

  const std::vector<LinkId>& out_links(NodeId n) const { return out_.at(n); }
  const std::vector<LinkId>& in_links(NodeId n) const { return in_.at(n); }

  std::size_t d_max() const { return d_max_; }

  /// Nodes that can transmit carry an energy queue; pure sinks do not.
  bool has_energy(NodeId n) const { return !out_.at(n).empty(); }

  std::size_t energy_node_count() const {
    std::size_t k = 0;
    for (NodeId n = 0; n < node_count_; ++n) k += has_energy(n);
    return k;
  }

  /// Packets of commodity c are never queued at the commodity's destination.
  bool is_destination(NodeId n, CommodityId c) const { return destinations_.at(c) == n; }

  std::optional<LinkId> find_link(NodeId from, NodeId to) const {
    for (LinkId l : out_.at(from))
      if (links_[l].to == to) return l;
    return std::nullopt;
  }

 private:
  std::size_t node_count_ = 0;
  std::vector<Link> links_;
  std::vector<NodeId> destinations_;
  std::vector<std::vector<LinkId>> out_;
  std::vector<std::vector<LinkId>> in_;
  std::size_t d_max_ = 0;
};

enum class Channel : std::uint8_t { Bad = 0, Good = 1 };

/// One realization z = (channel per link, harvestable energy per node).
struct JointState {
  std::vector<Channel> channel;
  std::vector<double> harvest;
  bool operator==(const JointState&) const = default;
};

/// Independent two-state marginals from which a product state space is built.
/// Nodes without an energy queue must have harvest_amount 0.
struct ProductMarginals {
  std::vector<double> link_good_prob;
  std::vector<double> harvest_amount;
  std::vector<double> harvest_prob;
};

class StateSpace {
 public:
  StateSpace() = default;

  StateSpace(std::vector<JointState> states, std::vector<double> probabilities)
      : states_(std::move(states)), probs_(std::move(probabilities)) {
    if (states_.empty()) throw std::invalid_argument("state space is empty");
    if (states_.size() != probs_.size())
      throw std::invalid_argument("state/probability count mismatch");
    double sum = 0.0;
    for (double p : probs_) {
      if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("probability outside [0,1]");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-12)
      throw std::invalid_argument("state probabilities do not sum to 1");
    for (std::size_t i = 0; i < states_.size(); ++i) {
      if (states_[i].channel.size() != states_[0].channel.size() ||
          states_[i].harvest.size() != states_[0].harvest.size())
        throw std::invalid_argument("states have inconsistent dimensions");
      for (double h : states_[i].harvest)
        if (h < 0.0) throw std::invalid_argument("negative harvestable energy");
      for (std::size_t j = 0; j < i; ++j)
        if (states_[i] == states_[j]) throw std::invalid_argument("duplicate state");
    }
    cdf_.resize(probs_.size());
    std::partial_sum(probs_.begin(), probs_.end(), cdf_.begin());
    last_positive_ = 0;
    for (std::size_t m = 0; m < probs_.size(); ++m)
      if (probs_[m] > 0.0) last_positive_ = m;
  }

  /// Enumerates all 2^links x 2^(energy nodes) combinations. Index bit l
  /// (l < links) is the Good flag of link l; the following bits are the
  /// harvest flags of energy nodes in id order.
  static StateSpace product(const Topology& topo, const ProductMarginals& mg) {
    const std::size_t L = topo.link_count();
    const std::size_t N = topo.node_count();
    if (mg.link_good_prob.size() != L) throw std::invalid_argument("need one good-state probability per link");
    if (mg.harvest_amount.size() != N || mg.harvest_prob.size() != N)
      throw std::invalid_argument("need one harvest entry per node");
    std::vector<NodeId> energy_nodes;
    for (NodeId n = 0; n < N; ++n) {
      if (topo.has_energy(n)) {
        energy_nodes.push_back(n);
      } else if (mg.harvest_amount[n] != 0.0) {
        throw std::invalid_argument("sink node cannot harvest energy");
      }
      if (mg.harvest_amount[n] < 0.0) throw std::invalid_argument("negative harvest amount");
    }
    auto check_p = [](double p) {
      if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("marginal probability outside [0,1]");
    };
    for (double p : mg.link_good_prob) check_p(p);
    for (double p : mg.harvest_prob) check_p(p);

    const std::size_t bits = L + energy_nodes.size();
    if (bits > 20) throw std::invalid_argument("product state space too large to enumerate");
    const std::size_t M = std::size_t{1} << bits;
    std::vector<JointState> states;
    std::vector<double> probs;
    states.reserve(M);
    probs.reserve(M);
    for (std::size_t m = 0; m < M; ++m) {
      JointState z{std::vector<Channel>(L, Channel::Bad), std::vector<double>(N, 0.0)};
      double p = 1.0;
      for (LinkId l = 0; l < L; ++l) {
        const bool good = (m >> l) & 1u;
        z.channel[l] = good ? Channel::Good : Channel::Bad;
        p *= good ? mg.link_good_prob[l] : 1.0 - mg.link_good_prob[l];
      }
      for (std::size_t k = 0; k < energy_nodes.size(); ++k) {
        const NodeId n = energy_nodes[k];
        const bool arrive = (m >> (L + k)) & 1u;
        z.harvest[n] = arrive ? mg.harvest_amount[n] : 0.0;
        p *= arrive ? mg.harvest_prob[n] : 1.0 - mg.harvest_prob[n];
      }
      states.push_back(std::move(z));
      probs.push_back(p);
    }
    // Rounding in the products is far below the 1e-12 tolerance.
    return StateSpace(std::move(states), std::move(probs));
  }

  std::size_t size() const { return states_.size(); }
  const JointState& state(std::size_t m) const { return states_.at(m); }
  const std::vector<JointState>& states() const { return states_; }
  double probability(std::size_t m) const { return probs_.at(m); }
  const std::vector<double>& probabilities() const { return probs_; }

  /// Maps one uniform draw u in [0,1) to a state index through the CDF.
  std::size_t sample_index(double u) const {
    const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    const auto m = static_cast<std::size_t>(it - cdf_.begin());
    return std::min(m, last_positive_);
  }

  double h_max() const {
    double h = 0.0;
    for (const auto& z : states_)
      for (double v : z.harvest) h = std::max(h, v);
    return h;
  }

  bool same_support(const StateSpace& other) const { return states_ == other.states_; }

 private:
  std::vector<JointState> states_;
  std::vector<double> probs_;
  std::vector<double> cdf_;
  std::size_t last_positive_ = 0;
};

/// Deterministic map (state, power vector, link) -> rate, plus the feasible
/// power set generator for each state.
class RatePowerModel {
 public:
  virtual ~RatePowerModel() = default;

  virtual double rate(const JointState& z, std::span<const double> power, LinkId link) const = 0;
  virtual std::vector<PowerVector> feasible_power_vectors(const JointState& z) const = 0;

  /// True when the feasible set is the product over nodes of {idle} and
  /// "unit power on one outgoing link", and a link's rate depends only on its
  /// own power and channel. Enables per-node decomposition of the power
  /// objective.
  virtual bool per_node_unit_choice() const { return false; }

  /// Rate of `link` when it alone carries unit power.
  virtual double unit_rate(const JointState& z, LinkId link) const {
    PowerVector p(z.channel.size(), 0.0);
    p.at(link) = 1.0;
    return rate(z, p, link);
  }

  bool is_feasible(const JointState& z, std::span<const double> power) const {
    for (const auto& p : feasible_power_vectors(z))
      if (std::equal(p.begin(), p.end(), power.begin(), power.end())) return true;
    return false;
  }

  virtual double mu_max() const = 0;
  virtual double p_max() const = 0;
  virtual double kappa() const = 0;
};

/// Each transmitting node either idles or puts one power unit on exactly one
/// outgoing link. A powered link carries `good_rate` packets in a Good
/// channel and `bad_rate` in a Bad one. Links do not interfere.
class UnitPowerModel final : public RatePowerModel {
 public:
  UnitPowerModel(const Topology& topo, double good_rate = 2.0, double bad_rate = 1.0)
      : good_rate_(good_rate), bad_rate_(bad_rate), link_count_(topo.link_count()) {
    if (good_rate < 0.0 || bad_rate < 0.0) throw std::invalid_argument("negative rate");
    std::vector<std::vector<LinkId>> choices;
    for (NodeId n = 0; n < topo.node_count(); ++n)
      if (topo.has_energy(n)) choices.push_back(topo.out_links(n));
    // Mixed-radix enumeration, first node most significant; per node the
    // order is idle, then outgoing links in id order.
    std::size_t total = 1;
    for (const auto& ch : choices) total *= ch.size() + 1;
    vectors_.reserve(total);
    std::vector<std::size_t> digit(choices.size(), 0);
    for (std::size_t k = 0; k < total; ++k) {
      PowerVector p(link_count_, 0.0);
      for (std::size_t i = 0; i < choices.size(); ++i)
        if (digit[i] > 0) p[choices[i][digit[i] - 1]] = 1.0;
      vectors_.push_back(std::move(p));
      for (std::size_t i = choices.size(); i-- > 0;) {
        if (++digit[i] <= choices[i].size()) break;
        digit[i] = 0;
      }
    }
  }

  double rate(const JointState& z, std::span<const double> power, LinkId link) const override {
    if (power[link] <= 0.0) return 0.0;
    return z.channel.at(link) == Channel::Good ? good_rate_ : bad_rate_;
  }

  double unit_rate(const JointState& z, LinkId link) const override {
    return z.channel.at(link) == Channel::Good ? good_rate_ : bad_rate_;
  }

  std::vector<PowerVector> feasible_power_vectors(const JointState&) const override {
    return vectors_;
  }

  bool per_node_unit_choice() const override { return true; }

  double good_rate() const { return good_rate_; }
  double bad_rate() const { return bad_rate_; }

  double mu_max() const override { return std::max(good_rate_, bad_rate_); }
  double p_max() const override { return 1.0; }
  double kappa() const override { return std::max(good_rate_, bad_rate_); }

 private:
  double good_rate_;
  double bad_rate_;
  std::size_t link_count_;
  std::vector<PowerVector> vectors_;
};

/// Weighted logarithmic utilities U(r) = w * ln(1 + r) per (node, commodity).
/// A zero weight marks a pair that is not a traffic source.
class UtilityModel {
 public:
  UtilityModel() = default;
  UtilityModel(Grid<double> weights, double r_max, bool integer_admissions)
      : weights_(std::move(weights)), r_max_(r_max), integer_(integer_admissions) {
    if (!(r_max_ > 0.0)) throw std::invalid_argument("R_max must be positive");
    for (double w : weights_.flat())
      if (w < 0.0) throw std::invalid_argument("utility weight must be non-negative");
  }

  double weight(NodeId n, CommodityId c) const { return weights_(n, c); }
  bool is_source(NodeId n, CommodityId c) const { return weights_(n, c) > 0.0; }
  double value(NodeId n, CommodityId c, double r) const { return weights_(n, c) * std::log1p(r); }
  double derivative(NodeId n, CommodityId c, double r) const { return weights_(n, c) / (1.0 + r); }
  double r_max() const { return r_max_; }
  bool integer_admissions() const { return integer_; }
  const Grid<double>& weights() const { return weights_; }

  /// Largest first derivative at zero over all pairs.
  double beta() const {
    double b = 0.0;
    for (double w : weights_.flat()) b = std::max(b, w);
    return b;
  }

  /// Sampled shape check: U(0)=0, strictly increasing and concave on
  /// [0, R_max] for every source pair.
  bool shape_ok(std::size_t samples = 64) const {
    for (NodeId n = 0; n < weights_.rows(); ++n) {
      for (CommodityId c = 0; c < weights_.cols(); ++c) {
        if (!is_source(n, c)) continue;
        if (value(n, c, 0.0) != 0.0) return false;
        const double h = r_max_ / static_cast<double>(samples);
        double prev_slope = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < samples; ++k) {
          const double r1 = h * static_cast<double>(k);
          const double slope = (value(n, c, r1 + h) - value(n, c, r1)) / h;
          if (!(slope > 0.0) || slope > prev_slope + 1e-12) return false;
          prev_slope = slope;
        }
      }
    }
    return true;
  }

 private:
  Grid<double> weights_;
  double r_max_ = 1.0;
  bool integer_ = true;
};

struct RegimeChange {
  Slot slot = 0;
  StateSpace states;
  std::optional<ProductMarginals> marginals;
};

inline double default_theta(double V) { return V * std::log(V); }

inline Slot default_learning_time(double V, double c) {
  return static_cast<Slot>(std::ceil(std::pow(V, c) * std::log(V)));
}

struct ScenarioConfig {
  std::string name;
  Topology topology;
  StateSpace states;  // ground truth, never shown to the controller
  std::shared_ptr<const RatePowerModel> rates;
  UtilityModel utility;
  double V = 100.0;
  double c = 2.0 / 3.0;
  std::optional<double> theta_override;
  std::optional<Slot> learning_time_override;
  Slot horizon = 1'000'000;
  std::uint64_t seed = 1;
  std::vector<RegimeChange> regime_changes;
  std::optional<ProductMarginals> marginals;

  double theta(NodeId n) const {
    if (!topology.has_energy(n)) return 0.0;
    return theta_override ? *theta_override : default_theta(V);
  }

  std::vector<double> theta_vector() const {
    std::vector<double> t(topology.node_count());
    for (NodeId n = 0; n < t.size(); ++n) t[n] = theta(n);
    return t;
  }

  Slot learning_time() const {
    return learning_time_override ? *learning_time_override : default_learning_time(V, c);
  }

  void validate() const {
    if (!(V >= 1.0)) throw std::invalid_argument("V must be >= 1");
    if (!(c > 0.0 && c < 1.0)) throw std::invalid_argument("c must lie in (0,1)");
    if (horizon <= 0) throw std::invalid_argument("horizon must be positive");
    if (learning_time_override && *learning_time_override <= 0)
      throw std::invalid_argument("learning time must be positive");
    if (!rates) throw std::invalid_argument("scenario has no rate model");
    const auto N = topology.node_count();
    if (utility.weights().rows() != N || utility.weights().cols() != topology.commodity_count())
      throw std::invalid_argument("utility weights do not match topology");
    if (states.size() == 0 || states.state(0).channel.size() != topology.link_count() ||
        states.state(0).harvest.size() != N)
      throw std::invalid_argument("state space does not match topology");
    for (CommodityId c2 = 0; c2 < topology.commodity_count(); ++c2)
      if (utility.is_source(topology.destination(c2), c2))
        throw std::invalid_argument("destination cannot admit its own commodity");
    for (const auto& rc : regime_changes)
      if (!rc.states.same_support(states))
        throw std::invalid_argument("regime change must keep the same state set");
  }
};

/// Marginals of the four-node data collection network: links (1,2), (1,3),
/// (2,3), (2,4), (3,4); 2-unit energy arrivals at nodes 1-3.
inline ProductMarginals fig2_marginals() {
  return {{0.5, 0.2, 0.3, 0.5, 0.7}, {2.0, 2.0, 2.0, 0.0}, {0.6, 0.3, 0.5, 0.0}};
}

/// Statistics installed by the regime-change experiment.
inline ProductMarginals fig2_changed_marginals() {
  return {{0.3, 0.2, 0.2, 0.5, 0.7}, {2.0, 2.0, 2.0, 0.0}, {0.1, 0.6, 0.2, 0.0}};
}

inline Topology fig2_topology() {
  return Topology(4, {{0, 1}, {0, 2}, {1, 2}, {1, 3}, {2, 3}}, {3});
}

inline ScenarioConfig build_fig2_scenario(double V, double c, std::uint64_t seed) {
  if (!(V >= 1.0)) throw std::invalid_argument("V must be >= 1");
  ScenarioConfig s;
  s.name = "fig2";
  s.topology = fig2_topology();
  s.marginals = fig2_marginals();
  s.states = StateSpace::product(s.topology, *s.marginals);
  s.rates = std::make_shared<UnitPowerModel>(s.topology, 2.0, 1.0);
  Grid<double> w(4, 1, 0.0);
  w(0, 0) = 3.0;
  w(1, 0) = 2.0;
  w(2, 0) = 1.0;
  s.utility = UtilityModel(std::move(w), 2.0, true);
  s.V = V;
  s.c = c;
  s.seed = seed;
  s.validate();
  return s;
}

/// The convergence experiment: fig2 for 10^4 slots with the statistics
/// replaced at slot 5000.
inline ScenarioConfig build_fig5_scenario(double V, double c, std::uint64_t seed) {
  auto s = build_fig2_scenario(V, c, seed);
  s.name = "fig5";
  s.horizon = 10'000;
  RegimeChange rc;
  rc.slot = 5'000;
  rc.marginals = fig2_changed_marginals();
  rc.states = StateSpace::product(s.topology, *rc.marginals);
  s.regime_changes.push_back(std::move(rc));
  s.validate();
  return s;
}

/// One source node feeding a sink over one link, with two joint states:
/// (Good, 2 units harvestable) w.p. 0.6 and (Bad, nothing) w.p. 0.4.
inline ScenarioConfig build_tiny_scenario(double V, std::uint64_t seed = 1) {
  ScenarioConfig s;
  s.name = "tiny1node";
  s.topology = Topology(2, {{0, 1}}, {1});
  s.states = StateSpace({JointState{{Channel::Good}, {2.0, 0.0}},
                         JointState{{Channel::Bad}, {0.0, 0.0}}},
                        {0.6, 0.4});
  s.rates = std::make_shared<UnitPowerModel>(s.topology, 2.0, 1.0);
  Grid<double> w(2, 1, 0.0);
  w(0, 0) = 1.0;
  s.utility = UtilityModel(std::move(w), 2.0, true);
  s.V = V;
  s.seed = seed;
  s.horizon = 100'000;
  s.validate();
  return s;
}

inline std::vector<PowerVector> feasible_power_vectors(const ScenarioConfig& s, const JointState& z) {
  return s.rates->feasible_power_vectors(z);
}

inline double link_rate(const ScenarioConfig& s, const JointState& z, std::span<const double> power,
                        LinkId link) {
  if (link >= s.topology.link_count()) throw std::invalid_argument("link out of range");
  if (!s.rates->is_feasible(z, power)) throw std::invalid_argument("infeasible power vector");
  return s.rates->rate(z, power, link);
}

struct RateCheckReport {
  bool pass = true;
  std::size_t pairs_checked = 0;
  std::vector<std::string> counterexamples;
};

/// Checks, for (state, feasible vector) pairs, the power and rate bounds,
/// closure of the feasible set under zeroing one entry, the bound
/// mu(P) <= mu(P') + kappa * P_l and that zeroing one link never lowers
/// another link's rate. Exhaustive when `samples` covers every pair,
/// otherwise a seeded random sample of `samples` pairs.
inline RateCheckReport verify_rate_properties(const Topology& topo, const StateSpace& space,
                                              const RatePowerModel& model, std::size_t samples,
                                              std::uint64_t seed = 0) {
  RateCheckReport rep;
  if (samples == 0) return rep;
  std::vector<std::vector<PowerVector>> sets;
  std::size_t total = 0;
  for (const auto& z : space.states()) {
    sets.push_back(model.feasible_power_vectors(z));
    total += sets.back().size();
  }
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t m = 0; m < sets.size(); ++m)
    for (std::size_t k = 0; k < sets[m].size(); ++k) pairs.emplace_back(m, k);
  if (samples < total) {
    std::mt19937_64 rng(seed);
    std::shuffle(pairs.begin(), pairs.end(), rng);
    pairs.resize(samples);
  }
  const double kappa = model.kappa();
  auto fail = [&](std::string msg) {
    rep.pass = false;
    if (rep.counterexamples.size() < 20) rep.counterexamples.push_back(std::move(msg));
  };
  for (auto [m, k] : pairs) {
    const auto& z = space.state(m);
    const auto& P = sets[m][k];
    ++rep.pairs_checked;
    for (NodeId n = 0; n < topo.node_count(); ++n) {
      double sum = 0.0;
      for (LinkId l : topo.out_links(n)) sum += P[l];
      if (sum > model.p_max() + 1e-12)
        fail("state " + std::to_string(m) + " vector " + std::to_string(k) + ": node power exceeds P_max");
    }
    for (LinkId l = 0; l < topo.link_count(); ++l)
      if (model.rate(z, P, l) > model.mu_max() + 1e-12)
        fail("state " + std::to_string(m) + " vector " + std::to_string(k) + ": rate exceeds mu_max");
    for (LinkId l = 0; l < topo.link_count(); ++l) {
      if (P[l] == 0.0) continue;
      PowerVector Pz = P;
      Pz[l] = 0.0;
      const bool closed = std::find(sets[m].begin(), sets[m].end(), Pz) != sets[m].end();
      if (!closed) {
        fail("state " + std::to_string(m) + " vector " + std::to_string(k) + ": zeroing link " +
             std::to_string(l) + " leaves the feasible set");
        continue;
      }
      if (model.rate(z, P, l) > model.rate(z, Pz, l) + kappa * P[l] + 1e-12)
        fail("state " + std::to_string(m) + " vector " + std::to_string(k) + ": kappa bound fails on link " +
             std::to_string(l));
      for (LinkId o = 0; o < topo.link_count(); ++o) {
        if (o == l) continue;
        if (model.rate(z, P, o) > model.rate(z, Pz, o))
          fail("state " + std::to_string(m) + " vector " + std::to_string(k) + ": zeroing link " +
               std::to_string(l) + " lowers rate of link " + std::to_string(o));
      }
    }
  }
  return rep;
}

inline RateCheckReport verify_rate_properties(const ScenarioConfig& s, std::size_t samples,
                                              std::uint64_t seed = 0) {
  return verify_rate_properties(s.topology, s.states, *s.rates, samples, seed);
}

}  // namespace lem
