#pragma once

#include <vector>

namespace msf {

// Pairwise discrete energy over a sparse graph. Node i has
// unary[i].size() labels; by convention the last label of every node is its
// outlier label when the problem comes from the correspondence miner, but
// the solver treats all labels uniformly. Edge costs are dense matrices in
// row-major (label_a, label_b) order.
struct MatchProblem {
  std::vector<std::vector<double>> unary;
  struct Edge {
    int a = 0, b = 0;                // a < b
    std::vector<double> cost;        // size labels(a) * labels(b)
  };
  std::vector<Edge> edges;

  // Candidate ids per node for the miner's one-to-one bookkeeping; one id
  // per non-outlier label, parallel to unary[i] minus its last entry. May
  // be empty for problems that carry no candidate structure.
  std::vector<std::vector<int>> cand_ids;

  int n_nodes() const { return static_cast<int>(unary.size()); }
  int n_labels(int node) const { return static_cast<int>(unary[node].size()); }
  double energy(const std::vector<int>& labels) const;
  void check() const;  // throws msf::Error on a malformed problem
};

struct TrwsOptions {
  int max_iters = 100;
  double tol = 1e-9;  // stop when the bound improves less than this
};

struct TrwsResult {
  std::vector<int> labels;
  double energy = 0.0;
  double lower_bound = 0.0;
  int iters = 0;
  std::vector<double> bound_history;  // one entry per completed iteration
};

// Sequential tree-reweighted message passing with per-iteration primal
// rounding; returns the best labeling seen. The reported energy is a direct
// evaluation of that labeling, and the lower bound never decreases from one
// iteration to the next.
TrwsResult solve_trws(const MatchProblem& problem, const TrwsOptions& options = {});

// Reference solver for tests: full enumeration. Feasible only for tiny
// problems; throws when the label-configuration count exceeds max_configs.
TrwsResult solve_exhaustive(const MatchProblem& problem,
                            long long max_configs = 20'000'000);

}  // namespace msf
