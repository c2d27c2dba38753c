#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "dflsim/random.hpp"
#include "dflsim/topology.hpp"

namespace testsupport {

inline std::filesystem::path fixture(const std::string& name) {
  return std::filesystem::path(DFLSIM_FIXTURE_DIR) / name;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("dflsim_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Points in the unit square; latency is Euclidean distance. With one
// bandwidth for every link the hop cost stays metric. `keep` < 1 drops
// links at random but keeps a spanning path so the graph stays connected.
inline std::shared_ptr<const dflsim::ConnectivityGraph> random_instance(std::size_t n, std::uint64_t seed,
                                                                        double keep = 1.0) {
  dflsim::Rng rng(seed);
  std::vector<double> x(n), y(n);
  std::vector<dflsim::Silo> silos;
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = rng.uniform();
    y[i] = rng.uniform();
    silos.push_back({static_cast<dflsim::SiloId>(i), rng.uniform(0.0, 0.05)});
  }
  std::vector<dflsim::Link> links;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (j != i + 1 && !rng.bernoulli(keep)) continue;
      links.push_back({static_cast<dflsim::SiloId>(i), static_cast<dflsim::SiloId>(j),
                       std::hypot(x[i] - x[j], y[i] - y[j]), 1e7});
    }
  }
  return std::make_shared<const dflsim::ConnectivityGraph>(std::move(silos), std::move(links), true);
}

// Symmetrized closure weights computed from scratch: Floyd-Warshall on hop
// costs l + M/B, then s*T_c(i) added to each direction and averaged.
inline std::vector<std::vector<double>> oracle_weights(const dflsim::ConnectivityGraph& g,
                                                       const dflsim::DelayParams& p) {
  const std::size_t n = g.size();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> h(n, std::vector<double>(n, inf));
  for (std::size_t i = 0; i < n; ++i) h[i][i] = 0.0;
  for (const auto& l : g.links()) {
    auto& cell = h[static_cast<std::size_t>(l.src)][static_cast<std::size_t>(l.dst)];
    cell = std::min(cell, l.latency_s + p.model_size_bytes / l.bandwidth_Bps);
  }
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) h[i][j] = std::min(h[i][j], h[i][k] + h[k][j]);
  std::vector<std::vector<double>> w(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double dij = p.local_steps * g.silo(static_cast<dflsim::SiloId>(i)).compute_time_s + h[i][j];
      const double dji = p.local_steps * g.silo(static_cast<dflsim::SiloId>(j)).compute_time_s + h[j][i];
      w[i][j] = 0.5 * (dij + dji);
    }
  }
  return w;
}

// Held-Karp optimum over a dense weight matrix.
inline double held_karp(const std::vector<std::vector<double>>& w) {
  const std::size_t n = w.size();
  if (n == 2) return 2.0 * w[0][1];
  const std::size_t full = std::size_t{1} << (n - 1);
  const double inf = std::numeric_limits<double>::infinity();
  // dp[mask][j]: cheapest path from 0 through `mask` (over silos 1..n-1) ending at j.
  std::vector<std::vector<double>> dp(full, std::vector<double>(n, inf));
  for (std::size_t j = 1; j < n; ++j) dp[std::size_t{1} << (j - 1)][j] = w[0][j];
  for (std::size_t mask = 1; mask < full; ++mask) {
    for (std::size_t j = 1; j < n; ++j) {
      if (!(mask & (std::size_t{1} << (j - 1))) || dp[mask][j] == inf) continue;
      for (std::size_t k = 1; k < n; ++k) {
        if (mask & (std::size_t{1} << (k - 1))) continue;
        auto& next = dp[mask | (std::size_t{1} << (k - 1))][k];
        next = std::min(next, dp[mask][j] + w[j][k]);
      }
    }
  }
  double best = inf;
  for (std::size_t j = 1; j < n; ++j) best = std::min(best, dp[full - 1][j] + w[j][0]);
  return best;
}

inline double cycle_weight(const std::vector<std::vector<double>>& w, const std::vector<dflsim::SiloId>& tour) {
  double total = 0.0;
  for (std::size_t k = 0; k < tour.size(); ++k) {
    total += w[static_cast<std::size_t>(tour[k])][static_cast<std::size_t>(tour[(k + 1) % tour.size()])];
  }
  return total;
}

inline bool is_hamiltonian(const std::vector<dflsim::SiloId>& tour, std::size_t n) {
  if (tour.size() != n) return false;
  std::vector<int> seen(n, 0);
  for (auto v : tour) {
    if (v < 0 || static_cast<std::size_t>(v) >= n || seen[static_cast<std::size_t>(v)]++) return false;
  }
  return true;
}

}  // namespace testsupport
