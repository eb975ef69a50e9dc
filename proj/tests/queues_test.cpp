#include <gtest/gtest.h>

#include <map>
#include <random>

#include "lem/queues.hpp"

using namespace lem;

namespace {

// Source 0 feeds relay 1, which feeds the sink 2.
Topology line3() { return Topology(3, {{0, 1}, {1, 2}}, {2}); }

}  // namespace

TEST(Queues, InitialSnapshotIsZero) {
  const Topology t = line3();
  QueueNetwork q(t, ServiceOrder::Lifo, 2);
  const auto s = q.snapshot();
  for (double v : s.data.flat()) EXPECT_EQ(v, 0.0);
  for (double e : s.energy) EXPECT_EQ(e, 0.0);
}

TEST(Queues, AdmitStampsAndBecomesVisibleAtBoundary) {
  const Topology t = line3();
  QueueNetwork q(t, ServiceOrder::Lifo, 2);
  const auto ids = q.admit(0, 0, 2, 7);
  EXPECT_EQ(ids.size(), 2u);
  EXPECT_EQ(q.size(0, 0), 0u);
  q.end_slot();
  EXPECT_EQ(q.size(0, 0), 2u);
  for (const auto& p : q.packets(0, 0)) EXPECT_EQ(p.admit_slot, 7);
  EXPECT_EQ(q.snapshot().data(0, 0), 2.0);
}

TEST(Queues, ZeroAdmissionChangesNothing) {
  const Topology t = line3();
  QueueNetwork q(t, ServiceOrder::Lifo, 2);
  EXPECT_TRUE(q.admit(0, 0, 0, 1).empty());
  q.end_slot();
  EXPECT_EQ(q.size(0, 0), 0u);
  EXPECT_EQ(q.admitted(), 0u);
}

TEST(Queues, AdmissionRangeAndDestinationRejected) {
  const Topology t = line3();
  QueueNetwork q(t, ServiceOrder::Lifo, 2);
  EXPECT_THROW(q.admit(2, 0, 1, 0), std::invalid_argument);
  EXPECT_THROW(q.admit(0, 0, 3, 0), std::invalid_argument);
  EXPECT_THROW(q.admit(0, 0, -1, 0), std::invalid_argument);
  EXPECT_THROW(q.admit(5, 0, 1, 0), std::invalid_argument);
}

TEST(Queues, LifoMovesMostRecentPackets) {
  const Topology t = line3();
  QueueNetwork q(t, ServiceOrder::Lifo, 2);
  for (Slot s = 0; s < 3; ++s) {
    q.admit(0, 0, 1, s);
    q.end_slot();
  }
  EXPECT_EQ(q.transfer(0, 0, 2, 3), 2);
  const auto& dep = q.departed_this_slot();
  ASSERT_EQ(dep.size(), 2u);
  EXPECT_EQ(dep[0].admit_slot, 2);
  EXPECT_EQ(dep[1].admit_slot, 1);
  q.end_slot();
  EXPECT_EQ(q.size(0, 0), 1u);
  EXPECT_EQ(q.packets(0, 0).front().admit_slot, 0);
  EXPECT_EQ(q.size(1, 0), 2u);
}

TEST(Queues, FifoMovesOldestPackets) {
  const Topology t = line3();
  QueueNetwork q(t, ServiceOrder::Fifo, 2);
  for (Slot s = 0; s < 3; ++s) {
    q.admit(0, 0, 1, s);
    q.end_slot();
  }
  q.transfer(0, 0, 2, 3);
  const auto& dep = q.departed_this_slot();
  ASSERT_EQ(dep.size(), 2u);
  EXPECT_EQ(dep[0].admit_slot, 0);
  EXPECT_EQ(dep[1].admit_slot, 1);
}

TEST(Queues, IdleFillWhenShort) {
  const Topology t = line3();
  QueueNetwork q(t, ServiceOrder::Lifo, 2);
  q.admit(0, 0, 1, 0);
  q.end_slot();
  EXPECT_EQ(q.transfer(0, 0, 2, 1), 1);
}

TEST(Queues, TransfersReadStartOfSlotContent) {
  const Topology t = line3();
  QueueNetwork q(t, ServiceOrder::Lifo, 2);
  q.admit(0, 0, 2, 0);
  q.end_slot();
  EXPECT_EQ(q.transfer(0, 0, 2, 1), 2);
  EXPECT_EQ(q.transfer(1, 0, 2, 1), 0);  // arrivals at node 1 are not visible yet
  q.end_slot();
  EXPECT_EQ(q.transfer(1, 0, 2, 2), 2);
}

TEST(Queues, DeliveryDelayIsExitMinusAdmit) {
  const Topology t = line3();
  QueueNetwork q(t, ServiceOrder::Lifo, 2);
  q.admit(0, 0, 1, 4);
  q.end_slot();
  q.transfer(0, 0, 1, 5);
  q.end_slot();
  q.transfer(1, 0, 1, 6);
  q.end_slot();
  EXPECT_EQ(q.delivered(), 1u);
  EXPECT_EQ(q.delays().min(), 3);  // exit slot 7
  const auto s = q.snapshot();
  for (double v : s.data.flat()) EXPECT_EQ(v, 0.0);
}

TEST(Queues, DropRemovesPackets) {
  const Topology t = line3();
  QueueNetwork q(t, ServiceOrder::Lifo, 2);
  q.admit(0, 0, 2, 0);
  q.end_slot();
  EXPECT_EQ(q.drop(0, 0, 5), 2);
  EXPECT_EQ(q.dropped(), 2u);
  EXPECT_EQ(q.in_network(), 0u);
}

TEST(EnergyQueue, StepExamples) {
  const Topology t = line3();
  QueueNetwork q(t, ServiceOrder::Lifo, 2);
  q.energy_step(0, 0.0, 5.0);
  EXPECT_EQ(q.energy_step(0, 1.0, 2.0), 6.0);
  EXPECT_FALSE(q.last_step_clipped());
  EXPECT_EQ(q.energy_step(0, 0.0, 0.0), 6.0);

  q.energy_step(1, 0.0, 0.5);
  EXPECT_EQ(q.energy_step(1, 1.0, 0.0), 0.0);
  EXPECT_TRUE(q.last_step_clipped());
  EXPECT_EQ(q.outages(), 1u);
  EXPECT_EQ(q.max_energy(0), 6.0);
  EXPECT_THROW(q.energy_step(0, -1.0, 0.0), std::invalid_argument);
}

TEST(DelayHistogram, ExactPercentiles) {
  DelayHistogram h;
  for (Slot d = 1; d <= 100; ++d) h.add(d);
  EXPECT_EQ(h.percentile(0.50), 50);
  EXPECT_EQ(h.percentile(0.95), 95);
  EXPECT_EQ(h.percentile(0.99), 99);
  EXPECT_DOUBLE_EQ(h.mean(), 50.5);
  EXPECT_THROW(h.add(-1), std::logic_error);
}

// Random admissions, transfers and drops on a small mesh. Conservation and
// the one-slot recursion bound must hold at every boundary; a stack with no
// upstream links pops in reverse admission order under LIFO.
TEST(QueueProperties, RandomOperationsKeepInvariants) {
  const Topology t(4, {{0, 1}, {0, 2}, {1, 2}, {1, 3}, {2, 3}}, {3});
  const double r_max = 2;
  const double mu_max = 2;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> amount(0, 2);
    QueueNetwork q(t, ServiceOrder::Lifo, r_max);
    for (Slot s = 0; s < 300; ++s) {
      const auto before = q.snapshot();
      std::vector<double> out(4, 0.0);
      std::vector<double> in(4, 0.0);
      std::vector<double> adm(4, 0.0);
      for (LinkId l = 0; l < t.link_count(); ++l) {
        const int rate = amount(rng);
        const auto moved = q.transfer(l, 0, rate, s);
        out[t.link(l).from] += rate;
        in[t.link(l).to] += static_cast<double>(moved);
      }
      if (amount(rng) == 0) q.drop(1, 0, 1);
      for (NodeId n = 0; n < 3; ++n) {
        const int a = amount(rng);
        q.admit(n, 0, a, s);
        adm[n] = a;
      }
      std::map<NodeId, Slot> last;
      for (const auto& p : q.departed_this_slot()) {
        if (p.current_node != 0) continue;
        if (last.count(0)) {
          EXPECT_LE(p.admit_slot, last[0]);
        }
        last[0] = p.admit_slot;
      }
      q.end_slot();
      const auto after = q.snapshot();
      EXPECT_EQ(q.admitted(), q.in_network() + q.delivered() + q.dropped());
      for (NodeId n = 0; n < 3; ++n) {
        const double bound = std::max(before.data(n, 0) - out[n], 0.0) + in[n] + adm[n];
        EXPECT_LE(after.data(n, 0), bound);
        EXPECT_LE(after.data(n, 0) - before.data(n, 0), t.d_max() * mu_max + r_max);
        EXPECT_LE(before.data(n, 0) - after.data(n, 0), t.d_max() * mu_max + 1.0);  // +1 for the random drop
      }
      EXPECT_EQ(after.data(3, 0), 0.0);
    }
    if (q.delays().count() > 0) {
      EXPECT_GE(q.delays().min(), 1);
    }
  }
}
