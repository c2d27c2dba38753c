#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dflsim {

using SiloId = int;

class TopologyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Silo {
  SiloId id = 0;
  double compute_time_s = 0.0;  // T_c: seconds per local update
};

struct Link {
  SiloId src = 0;
  SiloId dst = 0;
  double latency_s = 0.0;
  double bandwidth_Bps = 1.0;
};

// Silos plus delay-annotated links. Always stored as directed links; an
// undirected input is mirrored at construction.
class ConnectivityGraph {
 public:
  ConnectivityGraph(std::vector<Silo> silos, std::vector<Link> links, bool undirected);

  std::size_t size() const { return silos_.size(); }
  const Silo& silo(SiloId i) const { return silos_.at(static_cast<std::size_t>(i)); }
  std::span<const Silo> silos() const { return silos_; }
  std::span<const Link> links() const { return links_; }
  bool undirected() const { return undirected_; }

  // nullptr when (src, dst) is not a link.
  const Link* find_link(SiloId src, SiloId dst) const;
  bool has_link(SiloId src, SiloId dst) const { return find_link(src, dst) != nullptr; }

 private:
  std::vector<Silo> silos_;
  std::vector<Link> links_;
  std::vector<int> link_index_;  // dense N*N, -1 for no link
  bool undirected_ = true;
};

struct DelayParams {
  double model_size_bytes = 1.0;  // M
  int local_steps = 1;            // s

  void validate() const;
};

ConnectivityGraph parse_topology(std::string_view json_text);
ConnectivityGraph load_topology(const std::filesystem::path& path);
std::string topology_to_json(const ConnectivityGraph& g);

// d_o(i,j) = s * T_c(i) + l(i,j) + M / B(i,j)
double link_delay(const ConnectivityGraph& g, SiloId i, SiloId j, const DelayParams& p);

// A directed overlay edge. `route` lists the silos visited from src to dst;
// it has two entries when the edge is a real link and more when a
// metric-closure edge was expanded back into a relay path.
struct OverlayEdge {
  SiloId src = 0;
  SiloId dst = 0;
  std::vector<SiloId> route;

  bool is_direct() const { return route.size() == 2; }
};

class MetricClosure;

class Overlay {
 public:
  Overlay(std::shared_ptr<const ConnectivityGraph> parent, std::vector<OverlayEdge> edges);

  // Both orientations of every consecutive pair in `tour` (closing the
  // cycle), each routed over the closure's cheapest relay path.
  static Overlay from_tour(std::shared_ptr<const ConnectivityGraph> parent,
                           std::vector<SiloId> tour, const MetricClosure& closure);

  const ConnectivityGraph& parent() const { return *parent_; }
  std::shared_ptr<const ConnectivityGraph> parent_ptr() const { return parent_; }
  std::size_t size() const { return parent_->size(); }
  std::span<const OverlayEdge> edges() const { return edges_; }
  // Empty unless built from a tour.
  std::span<const SiloId> tour() const { return tour_; }
  const std::vector<SiloId>& in_neighbors(SiloId i) const { return in_.at(static_cast<std::size_t>(i)); }
  const std::vector<SiloId>& out_neighbors(SiloId i) const { return out_.at(static_cast<std::size_t>(i)); }
  bool strongly_connected() const;

 private:
  std::shared_ptr<const ConnectivityGraph> parent_;
  std::vector<OverlayEdge> edges_;
  std::vector<SiloId> tour_;
  std::vector<std::vector<SiloId>> in_;
  std::vector<std::vector<SiloId>> out_;
};

// Delay of one overlay edge: the sender's s local updates, then
// latency plus transfer time on every hop of its route. Equals link_delay
// for direct edges.
double edge_delay(const Overlay& o, const OverlayEdge& e, const DelayParams& p);

// Synchronous round duration: the slowest overlay edge.
double cycle_time(const Overlay& o, const DelayParams& p);

// Shortest-path completion of the graph under symmetrized delays, used as
// the metric for tour construction.
class MetricClosure {
 public:
  MetricClosure(const ConnectivityGraph& g, const DelayParams& p);

  std::size_t size() const { return n_; }
  double weight(SiloId i, SiloId j) const { return sym_[idx(i, j)]; }
  // Silo sequence of the cheapest directed relay path from i to j.
  std::vector<SiloId> route(SiloId i, SiloId j) const;
  double tour_weight(std::span<const SiloId> tour) const;

 private:
  std::size_t idx(SiloId i, SiloId j) const {
    return static_cast<std::size_t>(i) * n_ + static_cast<std::size_t>(j);
  }
  std::size_t n_;
  std::vector<double> sym_;
  std::vector<int> next_;
};

struct TourResult {
  Overlay overlay;
  std::vector<SiloId> tour;
  double weight = 0.0;
};

TourResult build_overlay_christofides(std::shared_ptr<const ConnectivityGraph> g, const DelayParams& p);
TourResult brute_force_tsp(std::shared_ptr<const ConnectivityGraph> g, const DelayParams& p);

// Exact minimum-weight perfect matching over `vertices` for up to 16
// entries, greedy nearest pair above that. Pairs are (lower, higher) id.
std::vector<std::pair<SiloId, SiloId>> min_weight_matching(const MetricClosure& m,
                                                           std::span<const SiloId> vertices);

inline constexpr std::size_t kExactMatchingLimit = 22;
inline constexpr std::size_t kBruteForceLimit = 12;

// Row-stochastic mixing weights over an overlay.
class ConsensusMatrix {
 public:
  explicit ConsensusMatrix(std::size_t order);
  ConsensusMatrix(std::size_t order, std::vector<double> entries);

  static ConsensusMatrix identity(std::size_t order);

  std::size_t order() const { return n_; }
  double operator()(std::size_t i, std::size_t j) const { return a_[i * n_ + j]; }
  double& operator()(std::size_t i, std::size_t j) { return a_[i * n_ + j]; }
  std::span<const double> row(std::size_t i) const { return {a_.data() + i * n_, n_}; }
  std::span<const double> data() const { return a_; }

 private:
  std::size_t n_;
  std::vector<double> a_;
};

// Metropolis-Hastings weights: 1/(1+max(deg_i,deg_j)) on overlay edges, the
// remainder on the diagonal.
ConsensusMatrix consensus_matrix(const Overlay& o);

}  // namespace dflsim
