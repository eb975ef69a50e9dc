#pragma once

// Packet-level data queues and per-node energy queues.
//
// Within a slot every pop reads the start-of-slot content: packets moved by
// transfer() and created by admit() are held back and only become visible
// at end_slot(). Upstream arrivals are pushed before fresh admissions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <stdexcept>
#include <vector>

#include "lem/arrays.hpp"
#include "lem/network_model.hpp"

namespace lem {

enum class ServiceOrder { Lifo, Fifo };

struct Packet {
  std::uint64_t id = 0;
  CommodityId commodity = 0;
  Slot admit_slot = 0;
  NodeId current_node = 0;
};

/// Exact histogram of integer delays, so that percentiles are exact.
class DelayHistogram {
 public:
  void add(Slot delay) {
    if (delay < 0) throw std::logic_error("negative delay");
    const auto d = static_cast<std::size_t>(delay);
    if (d >= counts_.size()) counts_.resize(d + 1, 0);
    ++counts_[d];
    ++count_;
    sum_ += static_cast<double>(delay);
    min_ = std::min(min_, delay);
  }

  std::uint64_t count() const { return count_; }
  double mean() const { return count_ ? sum_ / static_cast<double>(count_) : 0.0; }
  Slot min() const { return min_; }

  /// Smallest delay d with P(delay <= d) >= q.
  Slot percentile(double q) const {
    if (count_ == 0) return 0;
    const auto target = static_cast<std::uint64_t>(std::ceil(q * static_cast<double>(count_)));
    std::uint64_t acc = 0;
    for (std::size_t d = 0; d < counts_.size(); ++d) {
      acc += counts_[d];
      if (acc >= std::max<std::uint64_t>(target, 1)) return static_cast<Slot>(d);
    }
    return static_cast<Slot>(counts_.size() - 1);
  }

 private:
  std::vector<std::uint64_t> counts_;
  std::uint64_t count_ = 0;
  double sum_ = 0.0;
  Slot min_ = std::numeric_limits<Slot>::max();
};

struct QueueSnapshot {
  NodeCommodity<double> data;
  std::vector<double> energy;
};

class QueueNetwork {
 public:
  QueueNetwork(const Topology& topo, ServiceOrder order, double r_max)
      : topo_(&topo),
        order_(order),
        r_max_(r_max),
        stacks_(topo.node_count() * topo.commodity_count()),
        energy_(topo.node_count(), 0.0),
        max_energy_(topo.node_count(), 0.0) {}

  /// Creates `amount` packets of commodity c at node n stamped with `slot`.
  /// They join the queue at the slot boundary.
  std::vector<std::uint64_t> admit(NodeId n, CommodityId c, std::int64_t amount, Slot slot) {
    if (n >= topo_->node_count() || c >= topo_->commodity_count())
      throw std::invalid_argument("admit: node or commodity out of range");
    if (amount < 0 || static_cast<double>(amount) > r_max_)
      throw std::invalid_argument("admit: amount outside [0, R_max]");
    if (topo_->is_destination(n, c)) throw std::invalid_argument("admit: destination node cannot admit");
    std::vector<std::uint64_t> ids;
    ids.reserve(static_cast<std::size_t>(amount));
    for (std::int64_t k = 0; k < amount; ++k) {
      Packet p{next_id_++, c, slot, n};
      ids.push_back(p.id);
      pending_.push_back(p);
    }
    admitted_ += static_cast<std::uint64_t>(amount);
    return ids;
  }

  /// Serves up to `rate` packets of commodity c over link l. Packets reaching
  /// their destination are delivered with exit slot slot+1; the rest join
  /// the next queue at the boundary. Returns the number moved.
  std::int64_t transfer(LinkId l, CommodityId c, std::int64_t rate, Slot slot) {
    if (rate < 0) throw std::invalid_argument("transfer: negative rate");
    const auto& link = topo_->link(l);
    auto& q = stack(link.from, c);
    std::int64_t moved = 0;
    while (moved < rate && !q.empty()) {
      Packet p = pop(q);
      departed_.push_back(p);
      if (topo_->is_destination(link.to, c)) {
        delays_.add(slot + 1 - p.admit_slot);
        ++delivered_;
      } else {
        p.current_node = link.to;
        pending_.push_back(p);
      }
      ++moved;
    }
    return moved;
  }

  /// Removes up to `count` packets of commodity c at node n from the network,
  /// in service order. Returns the number removed.
  std::int64_t drop(NodeId n, CommodityId c, std::int64_t count) {
    auto& q = stack(n, c);
    std::int64_t removed = 0;
    while (removed < count && !q.empty()) {
      departed_.push_back(pop(q));
      ++removed;
    }
    dropped_ += static_cast<std::uint64_t>(removed);
    return removed;
  }

  /// E <- (E - consumed)^+ + harvested. Clipping is counted as an outage.
  double energy_step(NodeId n, double consumed, double harvested) {
    if (consumed < 0.0 || harvested < 0.0) throw std::invalid_argument("energy_step: negative amount");
    double& e = energy_.at(n);
    double after = e - consumed;
    if (after < 0.0) {
      ++outages_;
      last_outage_ = true;
      after = 0.0;
    } else {
      last_outage_ = false;
    }
    e = after + harvested;
    max_energy_[n] = std::max(max_energy_[n], e);
    return e;
  }

  /// Slot boundary: queued arrivals become visible.
  void end_slot() {
    for (const Packet& p : pending_) stack(p.current_node, p.commodity).push_back(p);
    pending_.clear();
    departed_.clear();
  }

  QueueSnapshot snapshot() const {
    QueueSnapshot s{NodeCommodity<double>(topo_->node_count(), topo_->commodity_count()), energy_};
    for (NodeId n = 0; n < topo_->node_count(); ++n)
      for (CommodityId c = 0; c < topo_->commodity_count(); ++c)
        s.data(n, c) = static_cast<double>(stack(n, c).size());
    return s;
  }

  std::size_t size(NodeId n, CommodityId c) const { return stack(n, c).size(); }
  const std::deque<Packet>& packets(NodeId n, CommodityId c) const { return stack(n, c); }
  double energy(NodeId n) const { return energy_.at(n); }
  double max_energy(NodeId n) const { return max_energy_.at(n); }

  /// Packets popped since the last boundary, in pop order.
  const std::vector<Packet>& departed_this_slot() const { return departed_; }

  std::uint64_t admitted() const { return admitted_; }
  std::uint64_t delivered() const { return delivered_; }
  std::uint64_t dropped() const { return dropped_; }
  std::uint64_t outages() const { return outages_; }
  bool last_step_clipped() const { return last_outage_; }
  const DelayHistogram& delays() const { return delays_; }

  std::uint64_t in_network() const {
    std::uint64_t k = pending_.size();
    for (const auto& q : stacks_) k += q.size();
    return k;
  }

  ServiceOrder order() const { return order_; }

 private:
  std::deque<Packet>& stack(NodeId n, CommodityId c) {
    return stacks_[n * topo_->commodity_count() + c];
  }
  const std::deque<Packet>& stack(NodeId n, CommodityId c) const {
    return stacks_[n * topo_->commodity_count() + c];
  }

  Packet pop(std::deque<Packet>& q) {
    Packet p;
    if (order_ == ServiceOrder::Lifo) {
      p = q.back();
      q.pop_back();
    } else {
      p = q.front();
      q.pop_front();
    }
    return p;
  }

  const Topology* topo_;
  ServiceOrder order_;
  double r_max_;
  std::vector<std::deque<Packet>> stacks_;
  std::vector<Packet> pending_;
  std::vector<Packet> departed_;
  std::vector<double> energy_;
  std::vector<double> max_energy_;
  DelayHistogram delays_;
  std::uint64_t next_id_ = 0;
  std::uint64_t admitted_ = 0;
  std::uint64_t delivered_ = 0;
  std::uint64_t dropped_ = 0;
  std::uint64_t outages_ = 0;
  bool last_outage_ = false;
};

}  // namespace lem
