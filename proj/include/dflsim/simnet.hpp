#pragma once

#include <cstdint>
#include <optional>
#include <queue>
#include <span>
#include <stdexcept>
#include <vector>

#include "dflsim/topology.hpp"

namespace dflsim {

class SimError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class EventKind : int { compute_done = 0, message_arrival = 1, round_barrier = 2 };

struct SimEvent {
  double timestamp = 0.0;
  EventKind kind = EventKind::compute_done;
  SiloId src = 0;
  SiloId dst = 0;
  std::uint64_t payload = 0;

  friend bool operator==(const SimEvent&, const SimEvent&) = default;
};

// Strict total order (timestamp, kind, src, dst, payload).
bool event_before(const SimEvent& a, const SimEvent& b);

class EventQueue {
 public:
  void post(const SimEvent& e);
  // std::nullopt once the queue is drained.
  std::optional<SimEvent> next_event();
  bool empty() const { return heap_.empty(); }
  std::size_t size() const { return heap_.size(); }

 private:
  struct Later {
    bool operator()(const SimEvent& a, const SimEvent& b) const { return event_before(b, a); }
  };
  std::priority_queue<SimEvent, std::vector<SimEvent>, Later> heap_;
};

// Correctly rounded sum of a sequence (Shewchuk partials), so R rounds of
// duration t total exactly the double nearest R*t.
class ExactSum {
 public:
  void add(double x);
  double value() const;

 private:
  std::vector<double> partials_;
};

double exact_sum(std::span<const double> values);

// Simulated wall clock, decoupled from host time.
class Clock {
 public:
  void advance(double round_duration);
  double now() const { return total_.value(); }
  std::span<const double> rounds() const { return durations_; }

 private:
  ExactSum total_;
  std::vector<double> durations_;
};

enum class RoundMode { dfl_ring, sfl_star, cll_single };

// Silo-to-server access links of a star, symmetric per silo.
struct StarTopology {
  std::vector<double> silo_compute_s;
  std::vector<double> latency_s;
  std::vector<double> bandwidth_Bps;
  double server_compute_s = 0.0;

  // Every silo of `g` gets the same access link to the virtual server.
  static StarTopology around(const ConnectivityGraph& g, double latency_s, double bandwidth_Bps,
                             double server_compute_s);
  std::size_t size() const { return silo_compute_s.size(); }
};

// What one round runs over; exactly the member matching the mode is set.
struct RoundTopology {
  const Overlay* overlay = nullptr;
  const StarTopology* star = nullptr;
  std::optional<double> single_compute_s;
};

// dfl_ring: every silo computes then sends along each out-edge; the round
// ends at the last arrival, i.e. the cycle time.
// sfl_star: uploads, a barrier at the server, its compute, then downloads.
// cll_single: s local updates on one node.
double simulate_round(const RoundTopology& topo, const DelayParams& p, RoundMode mode);

double simulate_dfl_round(const Overlay& o, const DelayParams& p);
double simulate_sfl_round(const StarTopology& star, const DelayParams& p);
double simulate_cll_round(double compute_time_s, const DelayParams& p);

}  // namespace dflsim
