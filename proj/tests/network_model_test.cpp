#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "lem/network_model.hpp"

using namespace lem;

namespace {

std::size_t all_good_all_harvest_index(const StateSpace& space) {
  for (std::size_t m = 0; m < space.size(); ++m) {
    const auto& z = space.state(m);
    const bool good = std::all_of(z.channel.begin(), z.channel.end(), [](Channel c) { return c == Channel::Good; });
    if (good && z.harvest[0] == 2.0 && z.harvest[1] == 2.0 && z.harvest[2] == 2.0) return m;
  }
  return space.size();
}

// Link 1 only carries data while link 0 is powered too, so switching link 0
// off lowers link 1's rate.
class CoupledModel final : public RatePowerModel {
 public:
  double rate(const JointState&, std::span<const double> p, LinkId l) const override {
    if (p[l] <= 0.0) return 0.0;
    return l == 1 && p[0] <= 0.0 ? 0.0 : 1.0;
  }
  std::vector<PowerVector> feasible_power_vectors(const JointState&) const override {
    return {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  }
  double mu_max() const override { return 1.0; }
  double p_max() const override { return 2.0; }
  double kappa() const override { return 1.0; }
};

}  // namespace

TEST(Topology, DerivedNeighbourSetsAndDegree) {
  const Topology t = fig2_topology();
  EXPECT_EQ(t.node_count(), 4u);
  EXPECT_EQ(t.link_count(), 5u);
  EXPECT_EQ(t.d_max(), 2u);
  EXPECT_EQ(t.out_links(0).size(), 2u);
  EXPECT_EQ(t.in_links(3).size(), 2u);
  EXPECT_FALSE(t.has_energy(3));
  EXPECT_EQ(t.energy_node_count(), 3u);
  EXPECT_TRUE(t.is_destination(3, 0));
  EXPECT_EQ(t.find_link(1, 3), LinkId{3});
  EXPECT_FALSE(t.find_link(3, 1).has_value());
}

TEST(Topology, RejectsBadEndpointsLoopsAndDuplicates) {
  EXPECT_THROW(Topology(2, {{0, 2}}, {1}), std::invalid_argument);
  EXPECT_THROW(Topology(2, {{1, 1}}, {1}), std::invalid_argument);
  EXPECT_THROW(Topology(2, {{0, 1}, {0, 1}}, {1}), std::invalid_argument);
  EXPECT_THROW(Topology(2, {{0, 1}}, {}), std::invalid_argument);
  EXPECT_THROW(Topology(2, {{0, 1}}, {5}), std::invalid_argument);
}

TEST(StateSpace, Fig2ProductHas256StatesSummingToOne) {
  const auto s = build_fig2_scenario(100, 2.0 / 3.0, 1);
  EXPECT_EQ(s.states.size(), 256u);
  double sum = 0.0;
  for (double p : s.states.probabilities()) {
    EXPECT_GE(p, 0.0);
    EXPECT_LE(p, 1.0);
    sum += p;
  }
  EXPECT_NEAR(sum, 1.0, 1e-12);
}

TEST(StateSpace, AllGoodAllHarvestProbability) {
  const auto s = build_fig2_scenario(100, 2.0 / 3.0, 1);
  const auto m = all_good_all_harvest_index(s.states);
  ASSERT_LT(m, s.states.size());
  EXPECT_NEAR(s.states.probability(m), 9.45e-4, 1e-15);
}

TEST(StateSpace, StatesAreDistinctAndHarvestBounded) {
  const auto s = build_fig2_scenario(100, 2.0 / 3.0, 1);
  std::set<std::pair<std::vector<Channel>, std::vector<double>>> seen;
  for (const auto& z : s.states.states()) {
    EXPECT_TRUE(seen.insert({z.channel, z.harvest}).second);
    for (double h : z.harvest) EXPECT_LE(h, s.states.h_max());
  }
  EXPECT_EQ(s.states.h_max(), 2.0);
}

TEST(StateSpace, ValidationErrors) {
  const JointState a{{Channel::Good}, {1.0, 0.0}};
  const JointState b{{Channel::Bad}, {1.0, 0.0}};
  EXPECT_THROW(StateSpace({}, {}), std::invalid_argument);
  EXPECT_THROW(StateSpace({a, b}, {0.5, 0.4}), std::invalid_argument);
  EXPECT_THROW(StateSpace({a, a}, {0.5, 0.5}), std::invalid_argument);
  EXPECT_THROW(StateSpace({a, b}, {1.5, -0.5}), std::invalid_argument);
  EXPECT_NO_THROW(StateSpace({a, b}, {0.5, 0.5}));
}

TEST(StateSpace, SamplingFollowsTheCdf) {
  const JointState a{{Channel::Good}, {1.0, 0.0}};
  const JointState b{{Channel::Bad}, {1.0, 0.0}};
  const JointState c{{Channel::Bad}, {0.0, 0.0}};
  const StateSpace sp({a, b, c}, {0.25, 0.75, 0.0});
  EXPECT_EQ(sp.sample_index(0.0), 0u);
  EXPECT_EQ(sp.sample_index(0.2499), 0u);
  EXPECT_EQ(sp.sample_index(0.25), 1u);
  EXPECT_EQ(sp.sample_index(0.999999), 1u);
  EXPECT_EQ(sp.sample_index(std::nextafter(1.0, 0.0)), 1u);  // never the zero-probability tail
}

TEST(StateSpace, SinkCannotHarvest) {
  ProductMarginals mg = fig2_marginals();
  mg.harvest_amount[3] = 1.0;
  EXPECT_THROW(StateSpace::product(fig2_topology(), mg), std::invalid_argument);
}

TEST(Fig2Scenario, DestinationHasNoUtility) {
  const auto s = build_fig2_scenario(100, 2.0 / 3.0, 1);
  EXPECT_FALSE(s.utility.is_source(3, 0));
  EXPECT_EQ(s.utility.weight(0, 0), 3.0);
  EXPECT_EQ(s.utility.weight(1, 0), 2.0);
  EXPECT_EQ(s.utility.weight(2, 0), 1.0);
  EXPECT_EQ(s.utility.r_max(), 2.0);
  EXPECT_TRUE(s.utility.integer_admissions());
}

TEST(Fig2Scenario, ThetaAndLearningTimeDefaults) {
  const auto s = build_fig2_scenario(150, 2.0 / 3.0, 1);
  EXPECT_NEAR(s.theta(0), 751.595, 1e-3);
  EXPECT_EQ(s.theta(3), 0.0);  // sink
  EXPECT_EQ(s.learning_time(), static_cast<Slot>(std::ceil(std::pow(150.0, 2.0 / 3.0) * std::log(150.0))));
  EXPECT_EQ(default_learning_time(100, 2.0 / 3.0), 100);
  auto o = s;
  o.theta_override = 10.0;
  o.learning_time_override = 7;
  EXPECT_EQ(o.theta(1), 10.0);
  EXPECT_EQ(o.learning_time(), 7);
}

TEST(Fig2Scenario, ValidationOfParameters) {
  EXPECT_THROW(build_fig2_scenario(0.5, 0.5, 1), std::invalid_argument);
  auto s = build_fig2_scenario(10, 0.5, 1);
  s.c = 1.0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s.c = 0.5;
  s.horizon = 0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(FeasiblePower, EighteenVectorsWithPerNodeChoices) {
  const auto s = build_fig2_scenario(100, 2.0 / 3.0, 1);
  const auto vs = feasible_power_vectors(s, s.states.state(0));
  EXPECT_EQ(vs.size(), 18u);
  std::set<std::pair<double, double>> node0;
  for (const auto& p : vs) node0.insert({p[0], p[1]});
  EXPECT_EQ(node0.size(), 3u);  // idle, link (1,2), link (1,3)
  for (const auto& p : vs)
    for (NodeId n = 0; n < 3; ++n) {
      double sum = 0.0;
      for (LinkId l : s.topology.out_links(n)) sum += p[l];
      EXPECT_LE(sum, 1.0);
    }
}

TEST(FeasiblePower, ClosedUnderZeroingAnyEntry) {
  const auto s = build_fig2_scenario(100, 2.0 / 3.0, 1);
  const auto vs = feasible_power_vectors(s, s.states.state(0));
  for (const auto& p : vs)
    for (std::size_t l = 0; l < p.size(); ++l) {
      auto q = p;
      q[l] = 0.0;
      EXPECT_NE(std::find(vs.begin(), vs.end(), q), vs.end());
    }
}

TEST(LinkRate, GoodBadAndIdle) {
  const auto s = build_fig2_scenario(100, 2.0 / 3.0, 1);
  JointState z{{Channel::Good, Channel::Bad, Channel::Good, Channel::Good, Channel::Good}, {0, 0, 0, 0}};
  const PowerVector p1{1, 0, 0, 0, 0};
  const PowerVector p2{0, 1, 0, 0, 0};
  EXPECT_EQ(link_rate(s, z, p1, 0), 2.0);
  EXPECT_EQ(link_rate(s, z, p2, 1), 1.0);
  EXPECT_EQ(link_rate(s, z, p1, 1), 0.0);
  EXPECT_THROW(link_rate(s, z, PowerVector{1, 1, 0, 0, 0}, 0), std::invalid_argument);
  EXPECT_THROW(link_rate(s, z, p1, 9), std::invalid_argument);
}

TEST(RateProperties, Fig2PassesExhaustively) {
  const auto s = build_fig2_scenario(100, 2.0 / 3.0, 1);
  const auto rep = verify_rate_properties(s, 1'000'000);
  EXPECT_TRUE(rep.pass);
  EXPECT_EQ(rep.pairs_checked, 256u * 18u);
  EXPECT_EQ(s.rates->kappa(), 2.0);
}

TEST(RateProperties, SampledCheckCountsSamples) {
  const auto s = build_fig2_scenario(100, 2.0 / 3.0, 1);
  const auto rep = verify_rate_properties(s, 500, 3);
  EXPECT_TRUE(rep.pass);
  EXPECT_EQ(rep.pairs_checked, 500u);
}

TEST(RateProperties, EmptyRequestIsVacuous) {
  const auto s = build_fig2_scenario(100, 2.0 / 3.0, 1);
  const auto rep = verify_rate_properties(s, 0);
  EXPECT_TRUE(rep.pass);
  EXPECT_EQ(rep.pairs_checked, 0u);
}

TEST(RateProperties, CoupledModelFailsWithCounterexample) {
  const Topology t(3, {{0, 1}, {0, 2}}, {2});
  const StateSpace sp({JointState{{Channel::Good, Channel::Good}, {0, 0, 0}}}, {1.0});
  const CoupledModel model;
  const auto rep = verify_rate_properties(t, sp, model, 100);
  EXPECT_FALSE(rep.pass);
  ASSERT_FALSE(rep.counterexamples.empty());
  EXPECT_NE(rep.counterexamples.front().find("lowers rate of link 1"), std::string::npos);
}

TEST(Utility, ShapeAndBeta) {
  const auto s = build_fig2_scenario(100, 2.0 / 3.0, 1);
  EXPECT_TRUE(s.utility.shape_ok());
  EXPECT_EQ(s.utility.beta(), 3.0);
  EXPECT_EQ(s.utility.derivative(0, 0, 0.0), s.utility.beta());
  EXPECT_EQ(s.utility.value(1, 0, 0.0), 0.0);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int k = 0; k < 200; ++k) {
    double r1 = u(rng);
    double r2 = u(rng);
    if (r1 > r2) std::swap(r1, r2);
    if (r2 - r1 < 1e-6) continue;
    const double h = 1e-3;
    EXPECT_LT(s.utility.value(0, 0, r1), s.utility.value(0, 0, r2));
    const double s1 = (s.utility.value(0, 0, r2) - s.utility.value(0, 0, r1)) / (r2 - r1);
    const double s2 = (s.utility.value(0, 0, r2 + h) - s.utility.value(0, 0, r1 + h)) / (r2 - r1);
    EXPECT_LE(s2, s1 + 1e-12);
  }
}
