#include "acme/ot.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <queue>
#include <utility>
#include <vector>

#include "acme/errors.hpp"

namespace acme {

namespace {

// Min-cost flow with successive shortest paths. Costs are doubles, so the
// path search is Dijkstra over reduced costs with node potentials; reduced
// costs are clamped at zero because rounding can push an exactly-zero
// residual cycle a few ulps negative (collinear points tie exactly in real
// arithmetic), and Dijkstra pops each node once, so termination never
// depends on the cost values.
struct FlowGraph {
  struct Edge {
    int to;
    std::int64_t cap;
    double cost;
    int rev;  // index of the reverse edge in adj[to]
  };
  std::vector<std::vector<Edge>> adj;

  explicit FlowGraph(int n) : adj(n) {}

  void add(int u, int v, std::int64_t cap, double cost) {
    adj[u].push_back({v, cap, cost, (int)adj[v].size()});
    adj[v].push_back({u, 0, -cost, (int)adj[u].size() - 1});
  }

  // sends `need` units s -> t, returns total cost; throws if it cannot
  double run(int s, int t, std::int64_t need) {
    const double inf = std::numeric_limits<double>::infinity();
    const int n = (int)adj.size();
    std::vector<double> pot(n, 0.0);
    double total = 0.0;
    while (need > 0) {
      std::vector<double> dist(n, inf);
      std::vector<int> pv(n, -1), pe(n, -1);
      std::vector<char> done(n, 0);
      using Item = std::pair<double, int>;
      std::priority_queue<Item, std::vector<Item>, std::greater<Item>> q;
      dist[s] = 0.0;
      q.push({0.0, s});
      while (!q.empty()) {
        auto [d, u] = q.top();
        q.pop();
        if (done[u]) continue;
        done[u] = 1;
        for (int i = 0; i < (int)adj[u].size(); ++i) {
          const Edge& e = adj[u][i];
          if (e.cap <= 0 || done[e.to]) continue;
          double reduced = std::max(e.cost + pot[u] - pot[e.to], 0.0);
          if (dist[u] + reduced >= dist[e.to]) continue;
          dist[e.to] = dist[u] + reduced;
          pv[e.to] = u;
          pe[e.to] = i;
          q.push({dist[e.to], e.to});
        }
      }
      if (dist[t] == inf) throw StateError("transport: flow network disconnected");
      for (int v = 0; v < n; ++v)
        if (dist[v] < inf) pot[v] += dist[v];
      std::int64_t push = need;
      for (int v = t; v != s; v = pv[v]) push = std::min(push, adj[pv[v]][pe[v]].cap);
      for (int v = t; v != s; v = pv[v]) {
        Edge& e = adj[pv[v]][pe[v]];
        e.cap -= push;
        adj[v][e.rev].cap += push;
        total += push * e.cost;
      }
      need -= push;
    }
    return total;
  }
};

std::int64_t gcd64(std::int64_t a, std::int64_t b) { return b ? gcd64(b, a % b) : a; }

}  // namespace

double transport_cost(const Eigen::MatrixXd& cost) {
  const int n = (int)cost.rows(), m = (int)cost.cols();
  if (n == 0 || m == 0) throw ConfigError("transport: empty cost matrix");
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      if (!std::isfinite(cost(i, j)) || cost(i, j) < 0.0)
        throw NumericError("transport: costs must be finite and nonnegative");

  // uniform masses 1/n and 1/m on a common integer grid: source supply m/g,
  // sink demand n/g, total mass n*m/g units, each worth g/(n*m) probability
  std::int64_t g = gcd64(n, m);
  std::int64_t supply = m / g, demand = n / g, total_units = (std::int64_t)n * m / g;

  FlowGraph fg(n + m + 2);
  int s = n + m, t = n + m + 1;
  for (int i = 0; i < n; ++i) fg.add(s, i, supply, 0.0);
  for (int j = 0; j < m; ++j) fg.add(n + j, t, demand, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) fg.add(i, n + j, std::min(supply, demand), cost(i, j));

  return fg.run(s, t, total_units) / (double)total_units;
}

double wasserstein_distance(const DataSketch& a, const DataSketch& b, int p_order) {
  if (a.size() == 0 || b.size() == 0) throw ConfigError("wasserstein: empty sketch");
  if (a.dim() != b.dim())
    throw ShapeError("wasserstein: sketch dims differ (" + std::to_string(a.dim()) + " vs " +
                     std::to_string(b.dim()) + ")");
  if (p_order < 1) throw ConfigError("wasserstein: order must be >= 1");

  Eigen::MatrixXd cost(a.size(), b.size());
  for (int i = 0; i < a.size(); ++i)
    for (int j = 0; j < b.size(); ++j) {
      double d = (a.features.row(i) - b.features.row(j)).cwiseAbs().sum();
      cost(i, j) = p_order == 1 ? d : std::pow(d, (double)p_order);
    }
  double c = transport_cost(cost);
  return p_order == 1 ? c : std::pow(c, 1.0 / (double)p_order);
}

}  // namespace acme
