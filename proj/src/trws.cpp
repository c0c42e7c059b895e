#include "msflow/trws.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "msflow/common.hpp"

namespace msf {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Incidence {
  int edge = 0;
  int other = 0;
  bool is_a = false;  // true when the node is edges[edge].a
};

// Pairwise cost seen from `node`: theta(x_node, x_other). lb is the label
// count of the edge's b endpoint (the row-major stride of e.cost).
inline double edge_cost(const MatchProblem::Edge& e, bool node_is_a, int lb,
                        int x_node, int x_other) {
  return node_is_a ? e.cost[static_cast<std::size_t>(x_node) * lb + x_other]
                   : e.cost[static_cast<std::size_t>(x_other) * lb + x_node];
}

}  // namespace

double MatchProblem::energy(const std::vector<int>& labels) const {
  MSF_CHECK(static_cast<int>(labels.size()) == n_nodes(),
            "energy: labeling has " << labels.size() << " entries for " << n_nodes()
                                    << " nodes");
  double acc = 0.0;
  for (int i = 0; i < n_nodes(); ++i) {
    MSF_CHECK(labels[i] >= 0 && labels[i] < n_labels(i),
              "energy: label " << labels[i] << " out of range at node " << i);
    acc += unary[i][labels[i]];
  }
  for (const auto& e : edges) {
    acc += e.cost[static_cast<std::size_t>(labels[e.a]) * n_labels(e.b) + labels[e.b]];
  }
  return acc;
}

void MatchProblem::check() const {
  MSF_CHECK(!unary.empty(), "match problem: no nodes");
  for (int i = 0; i < n_nodes(); ++i) {
    MSF_CHECK(!unary[i].empty(), "match problem: node " << i << " has no labels");
    for (double c : unary[i]) {
      MSF_CHECK(std::isfinite(c), "match problem: non-finite unary at node " << i);
    }
  }
  for (const auto& e : edges) {
    MSF_CHECK(e.a >= 0 && e.b < n_nodes() && e.a < e.b,
              "match problem: bad edge (" << e.a << "," << e.b << ")");
    MSF_CHECK(e.cost.size() == static_cast<std::size_t>(n_labels(e.a)) * n_labels(e.b),
              "match problem: edge (" << e.a << "," << e.b << ") has " << e.cost.size()
                                      << " costs for " << n_labels(e.a) << "x"
                                      << n_labels(e.b) << " labels");
    for (double c : e.cost) {
      MSF_CHECK(std::isfinite(c),
                "match problem: non-finite pairwise cost on edge (" << e.a << "," << e.b
                                                                    << ")");
    }
  }
  if (!cand_ids.empty()) {
    MSF_CHECK(static_cast<int>(cand_ids.size()) == n_nodes(),
              "match problem: cand_ids size mismatch");
    for (int i = 0; i < n_nodes(); ++i) {
      MSF_CHECK(static_cast<int>(cand_ids[i].size()) == n_labels(i) - 1,
                "match problem: node " << i << " has " << cand_ids[i].size()
                                       << " candidate ids for " << n_labels(i)
                                       << " labels");
    }
  }
}

TrwsResult solve_trws(const MatchProblem& problem, const TrwsOptions& options) {
  problem.check();
  const int n = problem.n_nodes();
  const int m = static_cast<int>(problem.edges.size());

  std::vector<std::vector<Incidence>> adj(n);
  for (int e = 0; e < m; ++e) {
    adj[problem.edges[e].a].push_back({e, problem.edges[e].b, true});
    adj[problem.edges[e].b].push_back({e, problem.edges[e].a, false});
  }

  // gamma_i = 1 / max(1, forward degree, backward degree) under the fixed
  // node order 0..n-1.
  std::vector<double> gamma(n);
  for (int i = 0; i < n; ++i) {
    int fwd = 0, bwd = 0;
    for (const auto& inc : adj[i]) (inc.other > i ? fwd : bwd)++;
    gamma[i] = 1.0 / std::max({1, fwd, bwd});
  }

  // msg_to_b[e]: message a->b over edge e, indexed by b's label; msg_to_a
  // symmetric. All messages start at zero.
  std::vector<std::vector<double>> msg_to_b(m), msg_to_a(m);
  for (int e = 0; e < m; ++e) {
    msg_to_b[e].assign(problem.n_labels(problem.edges[e].b), 0.0);
    msg_to_a[e].assign(problem.n_labels(problem.edges[e].a), 0.0);
  }
  auto incoming = [&](const Incidence& inc) -> std::vector<double>& {
    return inc.is_a ? msg_to_a[inc.edge] : msg_to_b[inc.edge];
  };
  auto outgoing = [&](const Incidence& inc) -> std::vector<double>& {
    return inc.is_a ? msg_to_b[inc.edge] : msg_to_a[inc.edge];
  };

  auto collect = [&](int i, std::vector<double>& d) {
    d = problem.unary[i];
    for (const auto& inc : adj[i]) {
      const auto& msg = incoming(inc);
      for (std::size_t l = 0; l < d.size(); ++l) d[l] += msg[l];
    }
  };

  // m_{i->j}(xj) = min_xi [ gamma_i * d(xi) - m_{j->i}(xi) + theta(xi,xj) ],
  // normalized to min zero; returns the subtracted minimum.
  auto update_message = [&](int i, const Incidence& inc,
                            const std::vector<double>& d) -> double {
    const auto& e = problem.edges[inc.edge];
    const int lb = problem.n_labels(e.b);
    const auto& back = incoming(inc);
    auto& out = outgoing(inc);
    const double g = gamma[i];
    for (int xj = 0; xj < problem.n_labels(inc.other); ++xj) {
      double best = kInf;
      for (int xi = 0; xi < problem.n_labels(i); ++xi) {
        const double v = g * d[xi] - back[xi] + edge_cost(e, inc.is_a, lb, xi, xj);
        best = std::min(best, v);
      }
      out[xj] = best;
    }
    const double vmin = *std::min_element(out.begin(), out.end());
    for (auto& v : out) v -= vmin;
    return vmin;
  };

  auto try_labeling = [&](const std::vector<int>& labels, TrwsResult& best) {
    const double value = problem.energy(labels);
    if (best.labels.empty() || value < best.energy) {
      best.labels = labels;
      best.energy = value;
    }
  };

  TrwsResult best;
  std::vector<double> d;
  double prev_bound = -kInf;

  for (int iter = 0; iter < std::max(1, options.max_iters); ++iter) {
    // Forward pass: refresh messages toward higher-indexed neighbors.
    for (int i = 0; i < n; ++i) {
      collect(i, d);
      for (const auto& inc : adj[i]) {
        if (inc.other > i) update_message(i, inc, d);
      }
    }

    // Backward pass accumulates the lower bound from the normalization
    // constants it strips off.
    double bound = 0.0;
    for (int i = n - 1; i >= 0; --i) {
      collect(i, d);
      const double vmin = *std::min_element(d.begin(), d.end());
      for (auto& v : d) v -= vmin;
      bound += vmin;
      for (const auto& inc : adj[i]) {
        if (inc.other < i) bound += update_message(i, inc, d);
      }
    }

    // Primal rounding on the reparameterized potentials, conditioning each
    // node on its already-assigned neighbors; plus a plain greedy pass on
    // the original potentials. Keep whichever labeling evaluates best.
    std::vector<int> lab_rep(n), lab_orig(n);
    for (int i = 0; i < n; ++i) {
      collect(i, d);
      double best_rep = kInf, best_orig = kInf;
      for (int xi = 0; xi < problem.n_labels(i); ++xi) {
        double v_rep = d[xi];
        double v_orig = problem.unary[i][xi];
        for (const auto& inc : adj[i]) {
          if (inc.other >= i) continue;
          const auto& e = problem.edges[inc.edge];
          const int lb = problem.n_labels(e.b);
          const double theta_rep = edge_cost(e, inc.is_a, lb, xi, lab_rep[inc.other]) -
                                   incoming(inc)[xi] -
                                   outgoing(inc)[lab_rep[inc.other]];
          v_rep += theta_rep;
          v_orig += edge_cost(e, inc.is_a, lb, xi, lab_orig[inc.other]);
        }
        if (v_rep < best_rep) {
          best_rep = v_rep;
          lab_rep[i] = xi;
        }
        if (v_orig < best_orig) {
          best_orig = v_orig;
          lab_orig[i] = xi;
        }
      }
    }
    try_labeling(lab_rep, best);
    try_labeling(lab_orig, best);

    best.bound_history.push_back(bound);
    best.iters = iter + 1;
    best.lower_bound = bound;
    if (iter > 0 && bound - prev_bound < options.tol) break;
    if (best.energy - bound < options.tol) break;  // certified optimal
    prev_bound = bound;
  }
  return best;
}

TrwsResult solve_exhaustive(const MatchProblem& problem, long long max_configs) {
  problem.check();
  const int n = problem.n_nodes();
  long long total = 1;
  for (int i = 0; i < n; ++i) {
    total *= problem.n_labels(i);
    MSF_CHECK(total <= max_configs,
              "solve_exhaustive: more than " << max_configs << " configurations");
  }
  std::vector<int> labels(n, 0);
  TrwsResult best;
  for (long long c = 0; c < total; ++c) {
    long long rest = c;
    for (int i = 0; i < n; ++i) {
      labels[i] = static_cast<int>(rest % problem.n_labels(i));
      rest /= problem.n_labels(i);
    }
    const double value = problem.energy(labels);
    if (best.labels.empty() || value < best.energy) {
      best.labels = labels;
      best.energy = value;
    }
  }
  best.lower_bound = best.energy;
  best.iters = 1;
  best.bound_history = {best.energy};
  return best;
}

}  // namespace msf
