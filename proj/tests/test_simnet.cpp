#include <doctest.h>

#include <algorithm>

#include "dflsim/model.hpp"
#include "dflsim/simnet.hpp"
#include "support.hpp"

using namespace dflsim;

namespace {

std::shared_ptr<const ConnectivityGraph> uniform_ring(std::size_t n, double latency) {
  std::vector<Silo> silos;
  std::vector<Link> links;
  for (std::size_t i = 0; i < n; ++i) {
    silos.push_back({static_cast<SiloId>(i), 0.0});
    links.push_back({static_cast<SiloId>(i), static_cast<SiloId>((i + 1) % n), latency, 1e300});
  }
  return std::make_shared<const ConnectivityGraph>(silos, links, true);
}

}  // namespace

TEST_CASE("events dequeue in (timestamp, kind, src, dst) order") {
  EventQueue q;
  q.post({1.0, EventKind::message_arrival, 1, 0, 0});
  q.post({1.0, EventKind::message_arrival, 0, 1, 0});
  const auto first = q.next_event();
  REQUIRE(first);
  CHECK(first->src == 0);
  CHECK(q.next_event()->src == 1);
  CHECK_FALSE(q.next_event().has_value());
  CHECK_THROWS_AS(q.post({-1.0, EventKind::compute_done, 0, 0, 0}), SimError);
  CHECK_THROWS_AS(q.post({std::numeric_limits<double>::infinity(), EventKind::compute_done, 0, 0, 0}), SimError);
}

TEST_CASE("event order does not depend on insertion order") {
  Rng rng(2);
  std::vector<SimEvent> events;
  for (int k = 0; k < 60; ++k) {
    events.push_back({static_cast<double>(rng.below(4)), static_cast<EventKind>(rng.below(3)),
                      static_cast<SiloId>(rng.below(3)), static_cast<SiloId>(rng.below(3)), rng.below(2)});
  }
  auto drain = [](const std::vector<SimEvent>& in) {
    EventQueue q;
    for (const auto& e : in) q.post(e);
    std::vector<SimEvent> out;
    while (auto e = q.next_event()) out.push_back(*e);
    return out;
  };
  const auto reference = drain(events);
  CHECK(std::is_sorted(reference.begin(), reference.end(), event_before));
  for (int trial = 0; trial < 10; ++trial) {
    auto shuffled = events;
    rng.shuffle(std::span(shuffled));
    CHECK(drain(shuffled) == reference);
  }
  // Interleaved posting and popping still yields the global order.
  EventQueue q;
  q.post({3.0, EventKind::compute_done, 0, 0, 0});
  q.post({1.0, EventKind::compute_done, 0, 0, 0});
  CHECK(q.next_event()->timestamp == 1.0);
  q.post({2.0, EventKind::compute_done, 0, 0, 0});
  CHECK(q.next_event()->timestamp == 2.0);
  CHECK(q.next_event()->timestamp == 3.0);
  CHECK(q.empty());
}

TEST_CASE("dfl round on a uniform ring lasts one edge delay") {
  const auto g = uniform_ring(5, 0.5);
  const auto r = build_overlay_christofides(g, {1e-300, 1});
  CHECK(simulate_dfl_round(r.overlay, {1e-300, 1}) == 0.5);
}

TEST_CASE("sfl round with symmetric legs") {
  StarTopology star{{0.0, 0.0, 0.0}, {0.2, 0.2, 0.2}, {1e300, 1e300, 1e300}, 0.0};
  CHECK(simulate_sfl_round(star, {1e-300, 1}) == doctest::Approx(0.4).epsilon(1e-15));
  star.server_compute_s = 0.05;
  CHECK(simulate_sfl_round(star, {1e-300, 1}) == doctest::Approx(0.45).epsilon(1e-15));
  // The slowest silo gates the barrier, the slowest downlink ends the round.
  StarTopology uneven{{0.1, 0.0}, {0.2, 0.3}, {1e300, 1e300}, 0.0};
  CHECK(simulate_sfl_round(uneven, {1e-300, 1}) == doctest::Approx(0.3 + 0.3).epsilon(1e-15));
}

TEST_CASE("sfl round is at least the dfl cycle time on the gaia fixture") {
  const auto g = std::make_shared<const ConnectivityGraph>(load_topology(testsupport::fixture("gaia11.json")));
  const DelayParams p{8.0 * 25211, 1};
  const auto r = build_overlay_christofides(g, p);
  // Symmetric access links at the fixture's slowest link values.
  double lat = 0.0, bw = 1e300;
  for (const auto& l : g->links()) {
    lat = std::max(lat, l.latency_s);
    bw = std::min(bw, l.bandwidth_Bps);
  }
  const auto star = StarTopology::around(*g, lat, bw, 0.0);
  CHECK(simulate_sfl_round(star, p) >= cycle_time(r.overlay, p));
}

TEST_CASE("cll round is s compute times") {
  CHECK(simulate_cll_round(0.04, {1.0, 3}) == 3 * 0.04);
  CHECK_THROWS_AS(simulate_cll_round(-1.0, {1.0, 1}), SimError);
}

TEST_CASE("simulate_round dispatches and rejects mode mismatches") {
  const auto g = uniform_ring(4, 0.25);
  const auto r = build_overlay_christofides(g, {1e-300, 1});
  RoundTopology ring{&r.overlay, nullptr, std::nullopt};
  CHECK(simulate_round(ring, {1e-300, 1}, RoundMode::dfl_ring) == 0.25);
  CHECK_THROWS_AS(simulate_round(ring, {1e-300, 1}, RoundMode::sfl_star), SimError);
  RoundTopology single{nullptr, nullptr, 0.5};
  CHECK(simulate_round(single, {1.0, 2}, RoundMode::cll_single) == 1.0);
  CHECK_THROWS_AS(simulate_round(single, {1.0, 2}, RoundMode::dfl_ring), SimError);
}

TEST_CASE("dfl round duration equals the cycle time on both fixtures") {
  for (const char* name : {"gaia11.json", "nws22.json"}) {
    const auto g = std::make_shared<const ConnectivityGraph>(load_topology(testsupport::fixture(name)));
    for (int s : {1, 2, 5}) {
      const DelayParams p{8.0 * 25211, s};
      const auto r = build_overlay_christofides(g, p);
      CHECK(simulate_dfl_round(r.overlay, p) == cycle_time(r.overlay, p));
    }
  }
}

TEST_CASE("clock totals are exact sums") {
  Clock c;
  for (int k = 0; k < 1000; ++k) c.advance(0.1);
  CHECK(c.now() == 1000 * 0.1);
  CHECK(c.now() == 100.0);
  CHECK(c.rounds().size() == 1000);
  CHECK_THROWS_AS(c.advance(0.0), SimError);
  Rng rng(1);
  std::vector<double> d(500);
  for (double& v : d) v = rng.uniform(0.001, 3.0);
  Clock c2;
  for (double v : d) c2.advance(v);
  CHECK(c2.now() == exact_sum(d));
  std::reverse(d.begin(), d.end());
  CHECK(exact_sum(d) == c2.now());
  CHECK(exact_sum(std::vector<double>{1e16, 1.0, -1e16}) == 1.0);
}
