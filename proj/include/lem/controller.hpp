#pragma once

// Per-slot decision rules driven by augmented queues. With zero augmentation
// the same rules form the ESA baseline.

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "lem/arrays.hpp"
#include "lem/network_model.hpp"
#include "lem/queues.hpp"

namespace lem {

/// Learned offsets added to the data and energy queues.
struct AugmentationVectors {
  NodeCommodity<double> data;
  std::vector<double> energy;

  static AugmentationVectors zero(const Topology& topo) {
    return {NodeCommodity<double>(topo.node_count(), topo.commodity_count(), 0.0),
            std::vector<double>(topo.node_count(), 0.0)};
  }

  bool is_zero() const {
    for (double v : data.flat())
      if (v != 0.0) return false;
    for (double v : energy)
      if (v != 0.0) return false;
    return true;
  }
};

struct LinkWeights {
  LinkCommodity<double> per_commodity;
  std::vector<double> per_link;
};

struct ControlDecision {
  std::vector<double> harvest;
  NodeCommodity<double> admit;
  PowerVector scheduled_power;  // maximizer of the power objective
  PowerVector power;            // after energy enforcement
  LinkCommodity<double> rates;  // per-commodity allocation after enforcement
  LinkCommodity<double> drops;  // allocation cancelled by enforcement; packets to discard
  std::vector<double> consumed;
  std::vector<NodeId> dropped_nodes;
};

/// Q^ = Q + xi_Q, E^ = E + xi_E. Destination entries stay zero.
inline QueueSnapshot augmented_queues(const QueueSnapshot& q, const AugmentationVectors& xi,
                                      const Topology& topo) {
  QueueSnapshot out = q;
  for (NodeId n = 0; n < topo.node_count(); ++n) {
    for (CommodityId c = 0; c < topo.commodity_count(); ++c)
      out.data(n, c) = topo.is_destination(n, c) ? 0.0 : q.data(n, c) + xi.data(n, c);
    out.energy[n] = q.energy[n] + xi.energy[n];
  }
  return out;
}

inline std::vector<double> harvest_decision(std::span<const double> aug_energy,
                                            std::span<const double> theta,
                                            std::span<const double> harvestable) {
  std::vector<double> e(aug_energy.size(), 0.0);
  for (std::size_t n = 0; n < e.size(); ++n)
    if (aug_energy[n] - theta[n] < 0.0) e[n] = harvestable[n];
  return e;
}

/// argmax over r in [0, r_max] of V*w*ln(1+r) - qhat*r. Integer admissions
/// enumerate {0, 1, ..., floor(r_max)} and keep the smallest maximizer.
inline double admit_amount(double V, double weight, double qhat, double r_max, bool integer) {
  if (weight <= 0.0) return 0.0;
  if (integer) {
    const auto top = static_cast<int>(std::floor(r_max));
    double best_r = 0.0;
    double best = 0.0;
    for (int r = 1; r <= top; ++r) {
      const double obj = V * weight * std::log1p(r) - qhat * r;
      if (obj > best) {
        best = obj;
        best_r = r;
      }
    }
    return best_r;
  }
  if (qhat <= 0.0) return r_max;
  return std::clamp(V * weight / qhat - 1.0, 0.0, r_max);
}

inline NodeCommodity<double> admission_decision(const NodeCommodity<double>& aug_data, double V,
                                                const UtilityModel& u, const Topology& topo) {
  NodeCommodity<double> r(topo.node_count(), topo.commodity_count(), 0.0);
  for (NodeId n = 0; n < topo.node_count(); ++n)
    for (CommodityId c = 0; c < topo.commodity_count(); ++c)
      if (u.is_source(n, c))
        r(n, c) = admit_amount(V, u.weight(n, c), aug_data(n, c), u.r_max(), u.integer_admissions());
  return r;
}

/// W^c_[n,b] = [Q^c_n - Q^c_b]^+ and W_[n,b] = max_c W^c_[n,b].
inline LinkWeights link_weights(const NodeCommodity<double>& aug_data, const Topology& topo) {
  LinkWeights w{LinkCommodity<double>(topo.link_count(), topo.commodity_count(), 0.0),
                std::vector<double>(topo.link_count(), 0.0)};
  for (LinkId l = 0; l < topo.link_count(); ++l) {
    const auto [a, b] = topo.link(l);
    for (CommodityId c = 0; c < topo.commodity_count(); ++c) {
      const double qa = topo.is_destination(a, c) ? 0.0 : aug_data(a, c);
      const double qb = topo.is_destination(b, c) ? 0.0 : aug_data(b, c);
      const double v = std::max(qa - qb, 0.0);
      w.per_commodity(l, c) = v;
      w.per_link[l] = std::max(w.per_link[l], v);
    }
  }
  return w;
}

/// G(P) = sum_n [ sum_b mu_[n,b](z,P) W_[n,b] + (E^_n - theta_n) sum_b P_[n,b] ].
inline double power_objective(const Topology& topo, const RatePowerModel& model, const JointState& z,
                              std::span<const double> aug_energy, std::span<const double> theta,
                              const LinkWeights& w, std::span<const double> power) {
  double g = 0.0;
  for (NodeId n = 0; n < topo.node_count(); ++n) {
    if (!topo.has_energy(n)) continue;
    double flow = 0.0;
    double psum = 0.0;
    for (LinkId l : topo.out_links(n)) {
      flow += model.rate(z, power, l) * w.per_link[l];
      psum += power[l];
    }
    g += flow + (aug_energy[n] - theta[n]) * psum;
  }
  return g;
}

/// Exact maximizer of G over the feasible set. Per-node-choice models are
/// decomposed node by node (idle preferred on ties, then the lowest link
/// id); other models are enumerated and the first maximizer is kept.
inline PowerVector power_allocation(const Topology& topo, const RatePowerModel& model,
                                    const JointState& z, std::span<const double> aug_energy,
                                    std::span<const double> theta, const LinkWeights& w) {
  if (model.per_node_unit_choice()) {
    PowerVector p(topo.link_count(), 0.0);
    for (NodeId n = 0; n < topo.node_count(); ++n) {
      if (!topo.has_energy(n)) continue;
      const double energy_term = aug_energy[n] - theta[n];
      double best = 0.0;
      std::optional<LinkId> pick;
      for (LinkId l : topo.out_links(n)) {
        // Same arithmetic as the node's term in power_objective().
        const double score = model.unit_rate(z, l) * w.per_link[l] + energy_term * 1.0;
        if (score > best) {
          best = score;
          pick = l;
        }
      }
      if (pick) p[*pick] = 1.0;
    }
    return p;
  }
  const auto options = model.feasible_power_vectors(z);
  if (options.empty()) throw std::logic_error("empty feasible power set");
  std::size_t best_k = 0;
  double best = power_objective(topo, model, z, aug_energy, theta, w, options[0]);
  for (std::size_t k = 1; k < options.size(); ++k) {
    const double g = power_objective(topo, model, z, aug_energy, theta, w, options[k]);
    if (g > best) {
      best = g;
      best_k = k;
    }
  }
  return options[best_k];
}

/// Full link rate to the lowest-index commodity with the largest positive
/// weight; nothing moves on a link whose best weight is zero.
inline LinkCommodity<double> routing_scheduling(const Topology& topo, const RatePowerModel& model,
                                                const JointState& z, const LinkWeights& w,
                                                std::span<const double> power) {
  LinkCommodity<double> mu(topo.link_count(), topo.commodity_count(), 0.0);
  for (LinkId l = 0; l < topo.link_count(); ++l) {
    const double rate = model.rate(z, power, l);
    if (rate <= 0.0) continue;
    CommodityId best = 0;
    for (CommodityId c = 1; c < topo.commodity_count(); ++c)
      if (w.per_commodity(l, c) > w.per_commodity(l, best)) best = c;
    if (w.per_commodity(l, best) > 0.0) mu(l, best) = rate;
  }
  return mu;
}

struct EnforcementResult {
  PowerVector power;
  LinkCommodity<double> rates;
  LinkCommodity<double> drops;
  std::vector<double> consumed;
  std::vector<NodeId> dropped_nodes;
};

/// A node whose scheduled power exceeds its stored energy has all of its
/// transmissions cancelled, its scheduled packets dropped, and its whole
/// energy E_n(t) consumed.
inline EnforcementResult enforce_energy_and_drop(const Topology& topo, std::span<const double> power,
                                                 std::span<const double> energy,
                                                 const LinkCommodity<double>& rates) {
  EnforcementResult r{PowerVector(power.begin(), power.end()), rates,
                      LinkCommodity<double>(rates.rows(), rates.cols(), 0.0),
                      std::vector<double>(topo.node_count(), 0.0), {}};
  for (NodeId n = 0; n < topo.node_count(); ++n) {
    double psum = 0.0;
    for (LinkId l : topo.out_links(n)) psum += power[l];
    if (psum <= energy[n]) {
      r.consumed[n] = psum;
      continue;
    }
    r.dropped_nodes.push_back(n);
    r.consumed[n] = energy[n];
    for (LinkId l : topo.out_links(n)) {
      r.power[l] = 0.0;
      for (CommodityId c = 0; c < rates.cols(); ++c) {
        r.drops(l, c) = rates(l, c);
        r.rates(l, c) = 0.0;
      }
    }
  }
  return r;
}

/// One slot of the controller: augment, harvest, admit, allocate power,
/// route, then enforce energy availability.
inline ControlDecision lem_step(const ScenarioConfig& s, const QueueSnapshot& snap, const JointState& z,
                                const AugmentationVectors& xi) {
  const auto& topo = s.topology;
  const auto theta = s.theta_vector();
  const QueueSnapshot aug = augmented_queues(snap, xi, topo);

  ControlDecision d;
  d.harvest = harvest_decision(aug.energy, theta, z.harvest);
  d.admit = admission_decision(aug.data, s.V, s.utility, topo);
  const LinkWeights w = link_weights(aug.data, topo);
  d.scheduled_power = power_allocation(topo, *s.rates, z, aug.energy, theta, w);
  const auto mu = routing_scheduling(topo, *s.rates, z, w, d.scheduled_power);
  auto enf = enforce_energy_and_drop(topo, d.scheduled_power, snap.energy, mu);
  d.power = std::move(enf.power);
  d.rates = std::move(enf.rates);
  d.drops = std::move(enf.drops);
  d.consumed = std::move(enf.consumed);
  d.dropped_nodes = std::move(enf.dropped_nodes);
  return d;
}

struct DriftDiagnostics {
  double lyapunov = 0.0;  // L(t)
  double bound = 0.0;     // drift constant B
};

/// L = 1/2 sum Q^2 + 1/2 sum_{energy nodes} (E - theta)^2 and
/// B = N^2 (1.5 d_max^2 mu_max^2 + R_max^2) + N/2 (P_max + h_max)^2.
inline DriftDiagnostics drift_diagnostics(const ScenarioConfig& s, const QueueSnapshot& snap) {
  const auto& topo = s.topology;
  DriftDiagnostics d;
  for (double q : snap.data.flat()) d.lyapunov += 0.5 * q * q;
  for (NodeId n = 0; n < topo.node_count(); ++n) {
    if (!topo.has_energy(n)) continue;
    const double gap = snap.energy[n] - s.theta(n);
    d.lyapunov += 0.5 * gap * gap;
  }
  const auto N = static_cast<double>(topo.node_count());
  const auto dm = static_cast<double>(topo.d_max());
  const double mu = s.rates->mu_max();
  const double rm = s.utility.r_max();
  const double ph = s.rates->p_max() + s.states.h_max();
  d.bound = N * N * (1.5 * dm * dm * mu * mu + rm * rm) + N / 2.0 * ph * ph;
  return d;
}

}  // namespace lem
