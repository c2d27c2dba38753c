#include "dflsim/topology.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "json.hpp"

namespace dflsim {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

bool connected_undirected(std::size_t n, std::span<const Link> links) {
  std::vector<std::vector<SiloId>> adj(n);
  for (const auto& l : links) {
    adj[static_cast<std::size_t>(l.src)].push_back(l.dst);
    adj[static_cast<std::size_t>(l.dst)].push_back(l.src);
  }
  std::vector<char> seen(n, 0);
  std::vector<SiloId> stack{0};
  seen[0] = 1;
  std::size_t count = 1;
  while (!stack.empty()) {
    SiloId v = stack.back();
    stack.pop_back();
    for (SiloId w : adj[static_cast<std::size_t>(v)]) {
      if (!seen[static_cast<std::size_t>(w)]) {
        seen[static_cast<std::size_t>(w)] = 1;
        ++count;
        stack.push_back(w);
      }
    }
  }
  return count == n;
}

}  // namespace

ConnectivityGraph::ConnectivityGraph(std::vector<Silo> silos, std::vector<Link> links, bool undirected)
    : undirected_(undirected) {
  const std::size_t n = silos.size();
  if (n < 2) throw TopologyError(fmt::format("topology needs at least 2 silos, got {}", n));

  std::vector<char> seen(n, 0);
  for (const auto& s : silos) {
    if (s.id < 0 || static_cast<std::size_t>(s.id) >= n) {
      throw TopologyError(fmt::format("non-contiguous silo ids: id {} outside 0..{}", s.id, n - 1));
    }
    if (seen[static_cast<std::size_t>(s.id)]) throw TopologyError(fmt::format("duplicate silo id {}", s.id));
    seen[static_cast<std::size_t>(s.id)] = 1;
    if (!(s.compute_time_s >= 0.0) || !std::isfinite(s.compute_time_s)) {
      throw TopologyError(fmt::format("silo {}: compute_time_s must be finite and >= 0", s.id));
    }
  }
  std::sort(silos.begin(), silos.end(), [](const Silo& a, const Silo& b) { return a.id < b.id; });
  silos_ = std::move(silos);

  link_index_.assign(n * n, -1);
  auto add = [&](const Link& l) {
    const std::size_t slot = static_cast<std::size_t>(l.src) * n + static_cast<std::size_t>(l.dst);
    if (link_index_[slot] >= 0) {
      throw TopologyError(fmt::format("duplicate link {} -> {}", l.src, l.dst));
    }
    link_index_[slot] = static_cast<int>(links_.size());
    links_.push_back(l);
  };
  for (const auto& l : links) {
    for (SiloId end : {l.src, l.dst}) {
      if (end < 0 || static_cast<std::size_t>(end) >= n) {
        throw TopologyError(fmt::format("link {} -> {}: dangling endpoint {}", l.src, l.dst, end));
      }
    }
    if (l.src == l.dst) throw TopologyError(fmt::format("self-loop on silo {}", l.src));
    if (!(l.latency_s >= 0.0) || !std::isfinite(l.latency_s)) {
      throw TopologyError(fmt::format("link {} -> {}: latency_s must be finite and >= 0", l.src, l.dst));
    }
    if (!(l.bandwidth_Bps > 0.0) || !std::isfinite(l.bandwidth_Bps)) {
      throw TopologyError(fmt::format("link {} -> {}: nonpositive bandwidth {}", l.src, l.dst, l.bandwidth_Bps));
    }
    add(l);
    if (undirected_) add(Link{l.dst, l.src, l.latency_s, l.bandwidth_Bps});
  }
  if (!connected_undirected(n, links_)) throw TopologyError("connectivity graph is disconnected");
}

const Link* ConnectivityGraph::find_link(SiloId src, SiloId dst) const {
  const auto n = size();
  if (src < 0 || dst < 0 || static_cast<std::size_t>(src) >= n || static_cast<std::size_t>(dst) >= n) return nullptr;
  const int k = link_index_[static_cast<std::size_t>(src) * n + static_cast<std::size_t>(dst)];
  return k < 0 ? nullptr : &links_[static_cast<std::size_t>(k)];
}

void DelayParams::validate() const {
  if (!(model_size_bytes > 0.0)) throw TopologyError("model size must be positive");
  if (local_steps < 1) throw TopologyError("local steps must be >= 1");
}

ConnectivityGraph parse_topology(std::string_view json_text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw TopologyError(fmt::format("topology parse failure: {}", e.what()));
  }
  try {
    std::vector<Silo> silos;
    for (const auto& s : doc.at("silos")) {
      silos.push_back(Silo{s.at("id").get<int>(), s.at("compute_time_s").get<double>()});
    }
    std::vector<Link> links;
    for (const auto& l : doc.at("links")) {
      links.push_back(Link{l.at("src").get<int>(), l.at("dst").get<int>(), l.at("latency_s").get<double>(),
                           l.at("bandwidth_Bps").get<double>()});
    }
    const bool undirected = doc.value("undirected", true);
    return ConnectivityGraph(std::move(silos), std::move(links), undirected);
  } catch (const nlohmann::json::exception& e) {
    throw TopologyError(fmt::format("topology parse failure: {}", e.what()));
  }
}

ConnectivityGraph load_topology(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw TopologyError(fmt::format("cannot read topology file {}", path.string()));
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return parse_topology(buf.str());
  } catch (const TopologyError& e) {
    throw TopologyError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

std::string topology_to_json(const ConnectivityGraph& g) {
  nlohmann::json doc;
  doc["undirected"] = false;
  doc["silos"] = nlohmann::json::array();
  for (const auto& s : g.silos()) doc["silos"].push_back({{"id", s.id}, {"compute_time_s", s.compute_time_s}});
  doc["links"] = nlohmann::json::array();
  for (const auto& l : g.links()) {
    doc["links"].push_back(
        {{"src", l.src}, {"dst", l.dst}, {"latency_s", l.latency_s}, {"bandwidth_Bps", l.bandwidth_Bps}});
  }
  return doc.dump(1);
}

double link_delay(const ConnectivityGraph& g, SiloId i, SiloId j, const DelayParams& p) {
  const Link* l = g.find_link(i, j);
  if (!l) throw TopologyError(fmt::format("no link {} -> {}", i, j));
  return p.local_steps * g.silo(i).compute_time_s + l->latency_s + p.model_size_bytes / l->bandwidth_Bps;
}

// ---------------------------------------------------------------- overlay

Overlay::Overlay(std::shared_ptr<const ConnectivityGraph> parent, std::vector<OverlayEdge> edges)
    : parent_(std::move(parent)), edges_(std::move(edges)) {
  const std::size_t n = parent_->size();
  in_.assign(n, {});
  out_.assign(n, {});
  for (auto& e : edges_) {
    if (e.route.empty()) e.route = {e.src, e.dst};
    if (e.route.size() < 2 || e.route.front() != e.src || e.route.back() != e.dst) {
      throw TopologyError(fmt::format("overlay edge {} -> {}: route does not join its endpoints", e.src, e.dst));
    }
    for (std::size_t h = 0; h + 1 < e.route.size(); ++h) {
      if (!parent_->has_link(e.route[h], e.route[h + 1])) {
        throw TopologyError(fmt::format("overlay edge {} -> {} uses missing link {} -> {}", e.src, e.dst,
                                        e.route[h], e.route[h + 1]));
      }
    }
    auto& outs = out_[static_cast<std::size_t>(e.src)];
    if (std::find(outs.begin(), outs.end(), e.dst) != outs.end()) {
      throw TopologyError(fmt::format("duplicate overlay edge {} -> {}", e.src, e.dst));
    }
    outs.push_back(e.dst);
    in_[static_cast<std::size_t>(e.dst)].push_back(e.src);
  }
  for (auto& v : in_) std::sort(v.begin(), v.end());
  for (auto& v : out_) std::sort(v.begin(), v.end());
  if (!strongly_connected()) throw TopologyError("overlay is not strongly connected");
}

Overlay Overlay::from_tour(std::shared_ptr<const ConnectivityGraph> parent, std::vector<SiloId> tour,
                           const MetricClosure& closure) {
  const std::size_t n = parent->size();
  std::vector<char> seen(n, 0);
  for (SiloId v : tour) {
    if (v < 0 || static_cast<std::size_t>(v) >= n || seen[static_cast<std::size_t>(v)]) {
      throw TopologyError("tour must visit every silo exactly once");
    }
    seen[static_cast<std::size_t>(v)] = 1;
  }
  if (tour.size() != n) throw TopologyError("tour must visit every silo exactly once");

  std::vector<OverlayEdge> edges;
  auto add = [&](SiloId a, SiloId b) {
    for (const auto& e : edges) {
      if (e.src == a && e.dst == b) return;
    }
    edges.push_back(OverlayEdge{a, b, closure.route(a, b)});
  };
  const std::size_t cycle_edges = n == 2 ? 1 : n;
  for (std::size_t k = 0; k < cycle_edges; ++k) {
    const SiloId a = tour[k];
    const SiloId b = tour[(k + 1) % n];
    add(a, b);
    add(b, a);
  }
  Overlay o(std::move(parent), std::move(edges));
  o.tour_ = std::move(tour);
  return o;
}

bool Overlay::strongly_connected() const {
  const std::size_t n = size();
  auto reach_all = [&](const std::vector<std::vector<SiloId>>& adj) {
    std::vector<char> seen(n, 0);
    std::vector<SiloId> stack{0};
    seen[0] = 1;
    std::size_t count = 1;
    while (!stack.empty()) {
      SiloId v = stack.back();
      stack.pop_back();
      for (SiloId w : adj[static_cast<std::size_t>(v)]) {
        if (!seen[static_cast<std::size_t>(w)]) {
          seen[static_cast<std::size_t>(w)] = 1;
          ++count;
          stack.push_back(w);
        }
      }
    }
    return count == n;
  };
  return reach_all(out_) && reach_all(in_);
}

double edge_delay(const Overlay& o, const OverlayEdge& e, const DelayParams& p) {
  if (e.is_direct()) return link_delay(o.parent(), e.src, e.dst, p);
  double d = p.local_steps * o.parent().silo(e.src).compute_time_s;
  for (std::size_t h = 0; h + 1 < e.route.size(); ++h) {
    const Link* l = o.parent().find_link(e.route[h], e.route[h + 1]);
    d += l->latency_s + p.model_size_bytes / l->bandwidth_Bps;
  }
  return d;
}

double cycle_time(const Overlay& o, const DelayParams& p) {
  double worst = 0.0;
  for (const auto& e : o.edges()) worst = std::max(worst, edge_delay(o, e, p));
  return worst;
}

// --------------------------------------------------------- metric closure

MetricClosure::MetricClosure(const ConnectivityGraph& g, const DelayParams& p) : n_(g.size()) {
  p.validate();
  // Directed relay cost excludes the compute term, which the sender pays once.
  std::vector<double> hop(n_ * n_, kInf);
  next_.assign(n_ * n_, -1);
  for (std::size_t i = 0; i < n_; ++i) {
    hop[i * n_ + i] = 0.0;
    next_[i * n_ + i] = static_cast<int>(i);
  }
  for (const auto& l : g.links()) {
    const std::size_t k = idx(l.src, l.dst);
    hop[k] = l.latency_s + p.model_size_bytes / l.bandwidth_Bps;
    next_[k] = l.dst;
  }
  for (std::size_t m = 0; m < n_; ++m) {
    for (std::size_t i = 0; i < n_; ++i) {
      const double him = hop[i * n_ + m];
      if (him == kInf) continue;
      for (std::size_t j = 0; j < n_; ++j) {
        const double cand = him + hop[m * n_ + j];
        if (cand < hop[i * n_ + j]) {
          hop[i * n_ + j] = cand;
          next_[i * n_ + j] = next_[i * n_ + m];
        }
      }
    }
  }
  sym_.assign(n_ * n_, 0.0);
  for (std::size_t i = 0; i < n_; ++i) {
    for (std::size_t j = 0; j < n_; ++j) {
      if (i == j) continue;
      if (hop[i * n_ + j] == kInf) {
        throw TopologyError(fmt::format("no directed path from silo {} to silo {}", i, j));
      }
      const double dij = p.local_steps * g.silo(static_cast<SiloId>(i)).compute_time_s + hop[i * n_ + j];
      const double dji = p.local_steps * g.silo(static_cast<SiloId>(j)).compute_time_s + hop[j * n_ + i];
      sym_[i * n_ + j] = 0.5 * (dij + dji);
    }
  }
}

std::vector<SiloId> MetricClosure::route(SiloId i, SiloId j) const {
  std::vector<SiloId> path{i};
  SiloId v = i;
  while (v != j) {
    v = next_[idx(v, j)];
    path.push_back(v);
  }
  return path;
}

double MetricClosure::tour_weight(std::span<const SiloId> tour) const {
  if (tour.size() < 2) return 0.0;
  if (tour.size() == 2) return 2.0 * weight(tour[0], tour[1]);
  double w = 0.0;
  for (std::size_t k = 0; k < tour.size(); ++k) w += weight(tour[k], tour[(k + 1) % tour.size()]);
  return w;
}

// ------------------------------------------------------------ christofides

std::vector<std::pair<SiloId, SiloId>> min_weight_matching(const MetricClosure& m,
                                                           std::span<const SiloId> vertices) {
  std::vector<SiloId> vs(vertices.begin(), vertices.end());
  std::sort(vs.begin(), vs.end());
  const std::size_t k = vs.size();
  if (k % 2 != 0) throw TopologyError("perfect matching needs an even vertex count");
  std::vector<std::pair<SiloId, SiloId>> pairs;
  if (k == 0) return pairs;

  if (k <= kExactMatchingLimit) {
    // Pair the lowest unmatched vertex with each candidate partner in turn.
    const std::size_t full = (std::size_t{1} << k) - 1;
    std::vector<double> best(full + 1, kInf);
    std::vector<int> choice(full + 1, -1);
    best[0] = 0.0;
    for (std::size_t mask = 1; mask <= full; ++mask) {
      if (std::popcount(mask) % 2 != 0) continue;
      const int i = std::countr_zero(mask);
      const std::size_t rest = mask & ~(std::size_t{1} << i);
      for (std::size_t j = static_cast<std::size_t>(i) + 1; j < k; ++j) {
        if (!(rest & (std::size_t{1} << j))) continue;
        const std::size_t sub = rest & ~(std::size_t{1} << j);
        const double cand = best[sub] + m.weight(vs[static_cast<std::size_t>(i)], vs[j]);
        if (cand < best[mask]) {
          best[mask] = cand;
          choice[mask] = static_cast<int>(j);
        }
      }
    }
    std::size_t mask = full;
    while (mask) {
      const int i = std::countr_zero(mask);
      const int j = choice[mask];
      pairs.emplace_back(vs[static_cast<std::size_t>(i)], vs[static_cast<std::size_t>(j)]);
      mask &= ~(std::size_t{1} << i);
      mask &= ~(std::size_t{1} << j);
    }
    return pairs;
  }

  spdlog::warn("odd-degree set has {} vertices (> {}); using greedy nearest-pair matching", k,
               kExactMatchingLimit);
  std::vector<char> used(k, 0);
  for (std::size_t matched = 0; matched < k; matched += 2) {
    double best = kInf;
    std::size_t bi = 0, bj = 0;
    for (std::size_t i = 0; i < k; ++i) {
      if (used[i]) continue;
      for (std::size_t j = i + 1; j < k; ++j) {
        if (used[j]) continue;
        const double w = m.weight(vs[i], vs[j]);
        if (w < best) {
          best = w;
          bi = i;
          bj = j;
        }
      }
    }
    used[bi] = used[bj] = 1;
    pairs.emplace_back(vs[bi], vs[bj]);
  }
  return pairs;
}

namespace {

// Prim's algorithm on the complete closure graph; ties go to the lowest id.
std::vector<std::pair<SiloId, SiloId>> minimum_spanning_tree(const MetricClosure& m) {
  const std::size_t n = m.size();
  std::vector<char> in_tree(n, 0);
  std::vector<double> dist(n, kInf);
  std::vector<SiloId> from(n, -1);
  std::vector<std::pair<SiloId, SiloId>> tree;
  dist[0] = 0.0;
  for (std::size_t step = 0; step < n; ++step) {
    std::size_t v = n;
    for (std::size_t u = 0; u < n; ++u) {
      if (!in_tree[u] && (v == n || dist[u] < dist[v])) v = u;
    }
    in_tree[v] = 1;
    if (from[v] >= 0) tree.emplace_back(std::min<SiloId>(from[v], static_cast<SiloId>(v)),
                                        std::max<SiloId>(from[v], static_cast<SiloId>(v)));
    for (std::size_t u = 0; u < n; ++u) {
      if (in_tree[u]) continue;
      const double w = m.weight(static_cast<SiloId>(v), static_cast<SiloId>(u));
      if (w < dist[u]) {
        dist[u] = w;
        from[u] = static_cast<SiloId>(v);
      }
    }
  }
  return tree;
}

// Hierholzer's algorithm over a connected multigraph with all degrees even,
// starting at silo 0 and always leaving through the lowest-id unused edge.
std::vector<SiloId> euler_circuit(std::size_t n, const std::vector<std::pair<SiloId, SiloId>>& edges) {
  std::vector<std::vector<std::pair<SiloId, std::size_t>>> adj(n);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    adj[static_cast<std::size_t>(edges[e].first)].emplace_back(edges[e].second, e);
    adj[static_cast<std::size_t>(edges[e].second)].emplace_back(edges[e].first, e);
  }
  for (auto& a : adj) std::sort(a.begin(), a.end());
  std::vector<char> used(edges.size(), 0);
  std::vector<std::size_t> cursor(n, 0);
  std::vector<SiloId> stack{0}, circuit;
  while (!stack.empty()) {
    const auto v = static_cast<std::size_t>(stack.back());
    auto& c = cursor[v];
    while (c < adj[v].size() && used[adj[v][c].second]) ++c;
    if (c == adj[v].size()) {
      circuit.push_back(stack.back());
      stack.pop_back();
    } else {
      used[adj[v][c].second] = 1;
      stack.push_back(adj[v][c].first);
    }
  }
  std::reverse(circuit.begin(), circuit.end());
  return circuit;
}

TourResult degenerate_pair(std::shared_ptr<const ConnectivityGraph> g, const MetricClosure& closure) {
  std::vector<SiloId> tour{0, 1};
  const double w = closure.tour_weight(tour);
  auto o = Overlay::from_tour(std::move(g), tour, closure);
  return TourResult{std::move(o), std::move(tour), w};
}

}  // namespace

TourResult build_overlay_christofides(std::shared_ptr<const ConnectivityGraph> g, const DelayParams& p) {
  const MetricClosure closure(*g, p);
  const std::size_t n = g->size();
  if (n == 2) return degenerate_pair(std::move(g), closure);

  auto multigraph = minimum_spanning_tree(closure);
  std::vector<int> degree(n, 0);
  for (const auto& [a, b] : multigraph) {
    ++degree[static_cast<std::size_t>(a)];
    ++degree[static_cast<std::size_t>(b)];
  }
  std::vector<SiloId> odd;
  for (std::size_t v = 0; v < n; ++v) {
    if (degree[v] % 2 != 0) odd.push_back(static_cast<SiloId>(v));
  }
  for (const auto& pr : min_weight_matching(closure, odd)) multigraph.push_back(pr);

  std::vector<SiloId> tour;
  std::vector<char> visited(n, 0);
  for (SiloId v : euler_circuit(n, multigraph)) {
    if (!visited[static_cast<std::size_t>(v)]) {
      visited[static_cast<std::size_t>(v)] = 1;
      tour.push_back(v);
    }
  }
  const double w = closure.tour_weight(tour);
  auto o = Overlay::from_tour(std::move(g), tour, closure);
  return TourResult{std::move(o), std::move(tour), w};
}

TourResult brute_force_tsp(std::shared_ptr<const ConnectivityGraph> g, const DelayParams& p) {
  const std::size_t n = g->size();
  if (n > kBruteForceLimit) {
    throw TopologyError(fmt::format("brute-force TSP limited to {} silos, got {}", kBruteForceLimit, n));
  }
  const MetricClosure closure(*g, p);
  if (n == 2) return degenerate_pair(std::move(g), closure);

  std::vector<SiloId> perm(n - 1);
  std::iota(perm.begin(), perm.end(), 1);
  std::vector<SiloId> best_tour;
  double best = kInf;
  std::vector<SiloId> tour(n);
  tour[0] = 0;
  do {
    if (perm.front() > perm.back()) continue;  // each cycle once, not its reversal
    std::copy(perm.begin(), perm.end(), tour.begin() + 1);
    const double w = closure.tour_weight(tour);
    if (w < best) {
      best = w;
      best_tour = tour;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  auto o = Overlay::from_tour(std::move(g), best_tour, closure);
  return TourResult{std::move(o), std::move(best_tour), best};
}

// -------------------------------------------------------------- consensus

ConsensusMatrix::ConsensusMatrix(std::size_t order) : n_(order), a_(order * order, 0.0) {}

ConsensusMatrix::ConsensusMatrix(std::size_t order, std::vector<double> entries)
    : n_(order), a_(std::move(entries)) {
  if (a_.size() != n_ * n_) throw TopologyError("consensus matrix entry count does not match order");
}

ConsensusMatrix ConsensusMatrix::identity(std::size_t order) {
  ConsensusMatrix a(order);
  for (std::size_t i = 0; i < order; ++i) a(i, i) = 1.0;
  return a;
}

ConsensusMatrix consensus_matrix(const Overlay& o) {
  const std::size_t n = o.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (o.in_neighbors(static_cast<SiloId>(i)) != o.out_neighbors(static_cast<SiloId>(i))) {
      throw TopologyError(fmt::format("silo {}: asymmetric neighbor sets", i));
    }
  }
  ConsensusMatrix a(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& nbrs = o.in_neighbors(static_cast<SiloId>(i));
    const double deg_i = static_cast<double>(nbrs.size());
    double off = 0.0;
    for (SiloId j : nbrs) {
      const double deg_j = static_cast<double>(o.in_neighbors(j).size());
      const double w = 1.0 / (1.0 + std::max(deg_i, deg_j));
      a(i, static_cast<std::size_t>(j)) = w;
      off += w;
    }
    a(i, i) = 1.0 - off;
  }
  return a;
}

}  // namespace dflsim
