#include "dflsim/simnet.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

#include <fmt/format.h>

namespace dflsim {

bool event_before(const SimEvent& a, const SimEvent& b) {
  return std::tuple(a.timestamp, static_cast<int>(a.kind), a.src, a.dst, a.payload) <
         std::tuple(b.timestamp, static_cast<int>(b.kind), b.src, b.dst, b.payload);
}

void EventQueue::post(const SimEvent& e) {
  if (!std::isfinite(e.timestamp) || e.timestamp < 0.0) {
    throw SimError(fmt::format("event timestamp {} must be finite and nonnegative", e.timestamp));
  }
  heap_.push(e);
}

std::optional<SimEvent> EventQueue::next_event() {
  if (heap_.empty()) return std::nullopt;
  SimEvent e = heap_.top();
  heap_.pop();
  return e;
}

void ExactSum::add(double x) {
  std::size_t i = 0;
  for (double y : partials_) {
    if (std::abs(x) < std::abs(y)) std::swap(x, y);
    const double hi = x + y;
    const double lo = y - (hi - x);
    if (lo != 0.0) partials_[i++] = lo;
    x = hi;
  }
  partials_.resize(i);
  partials_.push_back(x);
}

double ExactSum::value() const {
  if (partials_.empty()) return 0.0;
  std::size_t n = partials_.size();
  double hi = partials_[--n];
  double lo = 0.0;
  while (n > 0) {
    const double x = hi;
    const double y = partials_[--n];
    hi = x + y;
    const double yr = hi - x;
    lo = y - yr;
    if (lo != 0.0) break;
  }
  // Round half-even across the remaining partials.
  if (n > 0 && ((lo < 0.0 && partials_[n - 1] < 0.0) || (lo > 0.0 && partials_[n - 1] > 0.0))) {
    const double y = lo * 2.0;
    const double x = hi + y;
    const double yr = x - hi;
    if (y == yr) hi = x;
  }
  return hi;
}

double exact_sum(std::span<const double> values) {
  ExactSum s;
  for (double v : values) s.add(v);
  return s.value();
}

void Clock::advance(double round_duration) {
  if (!(round_duration > 0.0) || !std::isfinite(round_duration)) {
    throw SimError(fmt::format("round duration {} must be positive", round_duration));
  }
  durations_.push_back(round_duration);
  total_.add(round_duration);
}

StarTopology StarTopology::around(const ConnectivityGraph& g, double latency_s, double bandwidth_Bps,
                                  double server_compute_s) {
  StarTopology s;
  for (const auto& silo : g.silos()) {
    s.silo_compute_s.push_back(silo.compute_time_s);
    s.latency_s.push_back(latency_s);
    s.bandwidth_Bps.push_back(bandwidth_Bps);
  }
  s.server_compute_s = server_compute_s;
  return s;
}

double simulate_dfl_round(const Overlay& o, const DelayParams& p) {
  EventQueue q;
  const auto& g = o.parent();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const auto id = static_cast<SiloId>(i);
    q.post({p.local_steps * g.silo(id).compute_time_s, EventKind::compute_done, id, id, 0});
  }
  const auto edges = o.edges();
  std::size_t pending = edges.size();
  double last_arrival = 0.0;
  while (auto e = q.next_event()) {
    switch (e->kind) {
      case EventKind::compute_done:
        // Arrival times come straight from the edge delay so the round
        // length matches cycle_time bit for bit.
        for (std::size_t k = 0; k < edges.size(); ++k) {
          if (edges[k].src == e->src) q.post({edge_delay(o, edges[k], p), EventKind::message_arrival, edges[k].src, edges[k].dst, k});
        }
        break;
      case EventKind::message_arrival:
        last_arrival = std::max(last_arrival, e->timestamp);
        if (--pending == 0) q.post({last_arrival, EventKind::round_barrier, 0, 0, 0});
        break;
      case EventKind::round_barrier:
        return e->timestamp;
    }
  }
  throw SimError("dfl round ended without a barrier");
}

double simulate_sfl_round(const StarTopology& star, const DelayParams& p) {
  const std::size_t n = star.size();
  if (n == 0 || star.latency_s.size() != n || star.bandwidth_Bps.size() != n) {
    throw SimError("star topology needs one access link per silo");
  }
  auto transfer = [&](std::size_t i) { return star.latency_s[i] + p.model_size_bytes / star.bandwidth_Bps[i]; };
  const auto server = static_cast<SiloId>(n);
  EventQueue q;
  for (std::size_t i = 0; i < n; ++i) {
    q.post({p.local_steps * star.silo_compute_s[i] + transfer(i), EventKind::message_arrival, static_cast<SiloId>(i),
            server, 0});
  }
  std::size_t uploads = n, downloads = n;
  double round_end = 0.0;
  while (auto e = q.next_event()) {
    if (e->kind == EventKind::message_arrival && e->dst == server) {
      if (--uploads == 0) q.post({e->timestamp + star.server_compute_s, EventKind::compute_done, server, server, 0});
    } else if (e->kind == EventKind::compute_done) {
      for (std::size_t i = 0; i < n; ++i) {
        q.post({e->timestamp + transfer(i), EventKind::message_arrival, server, static_cast<SiloId>(i), 1});
      }
    } else if (e->kind == EventKind::message_arrival) {
      round_end = std::max(round_end, e->timestamp);
      if (--downloads == 0) return round_end;
    }
  }
  throw SimError("sfl round ended early");
}

double simulate_cll_round(double compute_time_s, const DelayParams& p) {
  if (!(compute_time_s >= 0.0)) throw SimError("compute time must be nonnegative");
  return p.local_steps * compute_time_s;
}

double simulate_round(const RoundTopology& topo, const DelayParams& p, RoundMode mode) {
  switch (mode) {
    case RoundMode::dfl_ring:
      if (!topo.overlay || topo.star || topo.single_compute_s) throw SimError("dfl_ring mode needs an overlay only");
      return simulate_dfl_round(*topo.overlay, p);
    case RoundMode::sfl_star:
      if (!topo.star || topo.overlay || topo.single_compute_s) throw SimError("sfl_star mode needs a star only");
      return simulate_sfl_round(*topo.star, p);
    case RoundMode::cll_single:
      if (!topo.single_compute_s || topo.overlay || topo.star) {
        throw SimError("cll_single mode needs a single compute time only");
      }
      return simulate_cll_round(*topo.single_compute_s, p);
  }
  throw SimError("unknown round mode");
}

}  // namespace dflsim
