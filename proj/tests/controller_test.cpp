#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lem/controller.hpp"

using namespace lem;

namespace {

JointState all_good_full_harvest() {
  return {{Channel::Good, Channel::Good, Channel::Good, Channel::Good, Channel::Good}, {2, 2, 2, 0}};
}

QueueSnapshot zero_snapshot(const Topology& t) {
  return {NodeCommodity<double>(t.node_count(), t.commodity_count(), 0.0), std::vector<double>(t.node_count(), 0.0)};
}

}  // namespace

TEST(Augmentation, ZeroIsIdentity) {
  const auto s = build_fig2_scenario(100, 2.0 / 3.0, 1);
  auto q = zero_snapshot(s.topology);
  q.data(0, 0) = 5;
  q.energy[1] = 7;
  const auto a = augmented_queues(q, AugmentationVectors::zero(s.topology), s.topology);
  EXPECT_EQ(a.data, q.data);
  EXPECT_EQ(a.energy, q.energy);
  EXPECT_TRUE(AugmentationVectors::zero(s.topology).is_zero());
}

TEST(Augmentation, AddsOffsetsAndAllowsNegativeEnergy) {
  const auto s = build_fig2_scenario(100, 2.0 / 3.0, 1);
  auto q = zero_snapshot(s.topology);
  q.data(0, 0) = 5;
  q.energy[2] = 3;
  auto xi = AugmentationVectors::zero(s.topology);
  xi.data(0, 0) = 12.5;
  xi.data(3, 0) = 99;  // destination entry is ignored
  xi.energy[2] = -10;
  const auto a = augmented_queues(q, xi, s.topology);
  EXPECT_EQ(a.data(0, 0), 17.5);
  EXPECT_EQ(a.data(3, 0), 0.0);
  EXPECT_EQ(a.energy[2], -7.0);
}

TEST(Harvest, StrictThresholdRule) {
  const double theta = default_theta(150);
  const std::vector<double> th{theta};
  EXPECT_EQ(harvest_decision(std::vector<double>{10.0}, th, std::vector<double>{2.0})[0], 2.0);
  EXPECT_EQ(harvest_decision(std::vector<double>{theta}, th, std::vector<double>{2.0})[0], 0.0);
  EXPECT_EQ(harvest_decision(std::vector<double>{10.0}, th, std::vector<double>{0.0})[0], 0.0);
}

TEST(Admission, Examples) {
  EXPECT_EQ(admit_amount(30, 3, 0, 2, true), 2.0);
  // 90 ln2 - 60 = 2.38 beats 0 and 90 ln3 - 120 = -21.1.
  EXPECT_NEAR(30 * 3 * std::log(2.0) - 60, 2.38, 0.01);
  EXPECT_NEAR(30 * 3 * std::log(3.0) - 120, -21.1, 0.1);
  EXPECT_EQ(admit_amount(30, 3, 60, 2, true), 1.0);
  EXPECT_EQ(admit_amount(30, 3, 90, 2, true), 0.0);    // q^ = V beta
  EXPECT_EQ(admit_amount(30, 3, 500, 2, true), 0.0);
  EXPECT_EQ(admit_amount(30, 0, 0, 2, true), 0.0);     // not a source
}

TEST(Admission, TiesGoToTheSmallerAmount) {
  // V w ln2 - q = 0 exactly: r = 0 and r = 1 tie.
  const double q = std::log1p(1.0);
  EXPECT_EQ(admit_amount(1, 1, q, 2, true), 0.0);
}

TEST(Admission, ContinuousClamp) {
  EXPECT_DOUBLE_EQ(admit_amount(10, 1, 5, 2, false), 1.0);
  EXPECT_EQ(admit_amount(10, 1, 0, 2, false), 2.0);
  EXPECT_EQ(admit_amount(10, 1, 1, 2, false), 2.0);
  EXPECT_EQ(admit_amount(10, 1, 50, 2, false), 0.0);
}

TEST(Admission, MaximizesObjectiveOverAdmissibleSet) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> qd(-50, 600);
  for (int k = 0; k < 1000; ++k) {
    const double q = qd(rng);
    const double r = admit_amount(100, 3, q, 2, true);
    const double best = 100 * 3 * std::log1p(r) - q * r;
    for (int c = 0; c <= 2; ++c) EXPECT_GE(best, 100 * 3 * std::log1p(c) - q * c);
  }
}

TEST(Weights, PositivePartAndDestination) {
  const Topology t(3, {{0, 1}, {1, 0}, {1, 2}}, {2});
  NodeCommodity<double> q(3, 1, 0.0);
  q(0, 0) = 10;
  q(1, 0) = 4;
  const auto w = link_weights(q, t);
  EXPECT_EQ(w.per_link[0], 6.0);
  EXPECT_EQ(w.per_link[1], 0.0);
  EXPECT_EQ(w.per_link[2], 4.0);
  q(0, 0) = 3;
  q(1, 0) = 7;
  EXPECT_EQ(link_weights(q, t).per_link[0], 0.0);
}

TEST(Power, IdlesWhenEnergyTermDominates) {
  const auto s = build_fig2_scenario(150, 2.0 / 3.0, 1);
  const auto z = all_good_full_harvest();
  LinkWeights w{LinkCommodity<double>(5, 1, 300.0), std::vector<double>(5, 300.0)};
  const std::vector<double> theta(4, 700.0);
  const std::vector<double> e(4, 0.0);
  const auto p = power_allocation(s.topology, *s.rates, z, e, theta, w);
  for (double v : p) EXPECT_EQ(v, 0.0);
}

TEST(Power, IdlesWithZeroWeights) {
  const auto s = build_fig2_scenario(150, 2.0 / 3.0, 1);
  LinkWeights w{LinkCommodity<double>(5, 1, 0.0), std::vector<double>(5, 0.0)};
  const std::vector<double> theta(4, 10.0);
  const std::vector<double> e(4, 5.0);
  for (double v : power_allocation(s.topology, *s.rates, all_good_full_harvest(), e, theta, w)) EXPECT_EQ(v, 0.0);
}

TEST(Power, TieChoosesLowerLink) {
  const auto s = build_fig2_scenario(150, 2.0 / 3.0, 1);
  LinkWeights w{LinkCommodity<double>(5, 1, 0.0), std::vector<double>(5, 0.0)};
  w.per_link[0] = w.per_link[1] = 50;
  const std::vector<double> theta(4, 0.0);
  const std::vector<double> e(4, 0.0);
  const auto p = power_allocation(s.topology, *s.rates, all_good_full_harvest(), e, theta, w);
  EXPECT_EQ(p[0], 1.0);
  EXPECT_EQ(p[1], 0.0);
}

// The per-node decomposition must reach the same objective value as full
// enumeration of the 18 vectors, bit for bit.
TEST(Power, DecompositionMatchesEnumeration) {
  const auto s = build_fig2_scenario(150, 2.0 / 3.0, 1);
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> qd(0, 400);
  std::uniform_real_distribution<double> ed(-900, 300);
  std::uniform_int_distribution<std::size_t> md(0, 255);
  const auto theta = s.theta_vector();
  for (int k = 0; k < 2000; ++k) {
    NodeCommodity<double> q(4, 1, 0.0);
    for (NodeId n = 0; n < 3; ++n) q(n, 0) = std::floor(qd(rng));
    std::vector<double> e(4, 0.0);
    for (NodeId n = 0; n < 3; ++n) e[n] = std::floor(ed(rng)) + theta[n];
    const auto& z = s.states.state(md(rng));
    const auto w = link_weights(q, s.topology);
    const auto p = power_allocation(s.topology, *s.rates, z, e, theta, w);
    const double chosen = power_objective(s.topology, *s.rates, z, e, theta, w, p);
    double best = -1e300;
    for (const auto& v : s.rates->feasible_power_vectors(z))
      best = std::max(best, power_objective(s.topology, *s.rates, z, e, theta, w, v));
    EXPECT_EQ(chosen, best);
  }
}

TEST(Routing, FullRateToBestCommodity) {
  const auto s = build_fig2_scenario(150, 2.0 / 3.0, 1);
  const auto z = all_good_full_harvest();
  LinkWeights w{LinkCommodity<double>(5, 1, 0.0), std::vector<double>(5, 0.0)};
  w.per_commodity(3, 0) = w.per_link[3] = 5;
  const PowerVector p{0, 0, 0, 1, 1};
  const auto mu = routing_scheduling(s.topology, *s.rates, z, w, p);
  EXPECT_EQ(mu(3, 0), 2.0);
  EXPECT_EQ(mu(4, 0), 0.0);  // powered but zero weight
}

TEST(Routing, CommodityTieGoesToLowerIndex) {
  const Topology t(3, {{0, 1}}, {1, 2});
  const UnitPowerModel model(t);
  const JointState z{{Channel::Good}, {1, 0, 0}};
  LinkWeights w{LinkCommodity<double>(1, 2, 5.0), std::vector<double>(1, 5.0)};
  const auto mu = routing_scheduling(t, model, z, w, PowerVector{1});
  EXPECT_EQ(mu(0, 0), 2.0);
  EXPECT_EQ(mu(0, 1), 0.0);
}

TEST(Enforcement, CancelsAndDropsOnShortfall) {
  const auto s = build_fig2_scenario(150, 2.0 / 3.0, 1);
  const PowerVector p{1, 0, 0, 1, 0};
  LinkCommodity<double> mu(5, 1, 0.0);
  mu(0, 0) = 2;
  mu(3, 0) = 1;
  const std::vector<double> e{0.5, 3, 0, 0};
  const auto r = enforce_energy_and_drop(s.topology, p, e, mu);
  EXPECT_EQ(r.power[0], 0.0);
  EXPECT_EQ(r.rates(0, 0), 0.0);
  EXPECT_EQ(r.drops(0, 0), 2.0);
  EXPECT_EQ(r.consumed[0], 0.5);
  ASSERT_EQ(r.dropped_nodes.size(), 1u);
  EXPECT_EQ(r.dropped_nodes[0], 0u);
  EXPECT_EQ(r.power[3], 1.0);  // node 2 unaffected
  EXPECT_EQ(r.rates(3, 0), 1.0);
  EXPECT_EQ(r.consumed[1], 1.0);
}

TEST(Enforcement, IdentityWhenEnergySuffices) {
  const auto s = build_fig2_scenario(150, 2.0 / 3.0, 1);
  const PowerVector p{1, 0, 0, 1, 1};
  LinkCommodity<double> mu(5, 1, 1.0);
  const std::vector<double> e{1, 1, 1, 0};
  const auto r = enforce_energy_and_drop(s.topology, p, e, mu);
  EXPECT_TRUE(r.dropped_nodes.empty());
  EXPECT_EQ(r.power, p);
  EXPECT_EQ(r.rates, mu);
}

TEST(LemStep, ZeroStateAdmitsMaxIdlesAndHarvests) {
  const auto s = build_fig2_scenario(150, 2.0 / 3.0, 1);
  const auto d = lem_step(s, zero_snapshot(s.topology), all_good_full_harvest(), AugmentationVectors::zero(s.topology));
  for (NodeId n = 0; n < 3; ++n) {
    EXPECT_EQ(d.admit(n, 0), 2.0);
    EXPECT_EQ(d.harvest[n], 2.0);
  }
  for (double v : d.power) EXPECT_EQ(v, 0.0);
  EXPECT_TRUE(d.dropped_nodes.empty());
}

TEST(LemStep, PureFunctionOfInputs) {
  const auto s = build_fig2_scenario(150, 2.0 / 3.0, 1);
  auto q = zero_snapshot(s.topology);
  q.data(0, 0) = 300;
  q.energy = {5, 0, 9, 0};
  auto xi = AugmentationVectors::zero(s.topology);
  xi.energy = {600, 600, 600, 0};
  const auto z = s.states.state(77);
  const auto a = lem_step(s, q, z, xi);
  const auto b = lem_step(s, q, z, xi);
  EXPECT_EQ(a.power, b.power);
  EXPECT_EQ(a.rates, b.rates);
  EXPECT_EQ(a.admit, b.admit);
  EXPECT_EQ(a.harvest, b.harvest);
  EXPECT_EQ(a.drops, b.drops);
}

TEST(LemStep, EnergyAvailabilityAfterEnforcement) {
  const auto s = build_fig2_scenario(150, 2.0 / 3.0, 1);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> qd(0, 500);
  std::uniform_int_distribution<int> ed(0, 4);
  auto xi = AugmentationVectors::zero(s.topology);
  xi.energy = {700, 700, 700, 0};
  for (int k = 0; k < 1000; ++k) {
    auto q = zero_snapshot(s.topology);
    for (NodeId n = 0; n < 3; ++n) {
      q.data(n, 0) = std::floor(qd(rng));
      q.energy[n] = ed(rng);
    }
    const auto d = lem_step(s, q, s.states.state(static_cast<std::size_t>(k) % 256), xi);
    for (NodeId n = 0; n < 4; ++n) {
      double sum = 0.0;
      for (LinkId l : s.topology.out_links(n)) sum += d.power[l];
      EXPECT_LE(sum, q.energy[n]);
    }
    for (LinkId l = 0; l < 5; ++l)
      EXPECT_LE(d.rates(l, 0), s.rates->rate(s.states.state(static_cast<std::size_t>(k) % 256), d.power, l));
  }
}

TEST(Drift, ConstantAndZeroStateValue) {
  const auto s = build_fig2_scenario(150, 2.0 / 3.0, 1);
  const auto d = drift_diagnostics(s, zero_snapshot(s.topology));
  EXPECT_DOUBLE_EQ(d.bound, 466.0);
  const double th = default_theta(150);
  EXPECT_NEAR(d.lyapunov, 0.5 * 3 * th * th, 1e-6);
  EXPECT_GE(d.lyapunov, 0.0);
}
