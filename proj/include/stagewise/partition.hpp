#pragma once

#include "stagewise/affinity.hpp"
#include "stagewise/corpus.hpp"

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace stagewise::partition {

struct ObjectiveParams {
  double lambda = 0.5;
  double mu_theta = 1.0;
  double mu_phi = 1.0;
  double rho_theta = 0.1;
  double rho_phi = 0.1;
  std::size_t max_stages = 2;
  double beta = 1.0;
  double lipschitz_l = 1.0;
  double lipschitz_b = 1.0;
  double delta = 0.05;
  // Divide intra-stage discrepancy/synergy sums by the stage's pair count.
  bool pair_average = false;

  // Throws ParameterError on any range violation.
  void validate() const;
};

// Ordered stages of domain indices. The canonical form sorts each stage and
// orders stages by their smallest member.
struct Partition {
  std::vector<std::vector<std::size_t>> stages;

  std::size_t domain_count() const;
  // Disjoint, non-empty, covers 0..k-1. Throws ParameterError otherwise.
  void validate(std::size_t k) const;
  Partition canonical() const;
  // Restricted growth string: label of each domain under the canonical form.
  std::vector<std::size_t> labels() const;
  static Partition from_labels(std::span<const std::size_t> labels);

  bool operator==(const Partition&) const = default;
};

struct SolveResult {
  Partition partition;
  double g = 0.0;
};

// Cap(S) = mu_theta rho_theta^2 + mu_phi |S| rho_phi^2.
double capacity_proxy(std::size_t stage_size, const ObjectiveParams& params);

double objective_g(const Partition& p, const affinity::AffinityMatrices& m,
                   const ObjectiveParams& params);

inline constexpr std::size_t kExactGuard = 14;

// Visits every partition of {0..k-1} into at most `max_blocks` blocks as a
// restricted growth string, in lexicographic order.
void for_each_partition(std::size_t k, std::size_t max_blocks,
                        const std::function<void(std::span<const std::size_t>)>& visit);

// Globally optimal partition into at most params.max_stages stages, ties broken
// towards the lexicographically smallest canonical form. k <= kExactGuard.
SolveResult enumerate_exact(const affinity::AffinityMatrices& m, const ObjectiveParams& params);

// Greedy merging from singletons (largest objective gain first, forced merges
// while above the stage limit) followed by single-domain relocation passes.
SolveResult agglomerative(const affinity::AffinityMatrices& m, const ObjectiveParams& params);

enum class Solver { kAuto, kExact, kAgglomerative };
SolveResult solve(const affinity::AffinityMatrices& m, const ObjectiveParams& params,
                  Solver solver = Solver::kAuto);

// Gamma = 2 L B (rho_theta + sum_j alpha_j rho_phi).
double gamma_bound(const ObjectiveParams& params, std::span<const double> alphas);

// Constant multiplying sqrt(ln(1/delta)/n) in the single-stage bound; matches the
// explicit Hoeffding tail sqrt(ln(1/delta)/(2n)).
inline constexpr double kStatisticalConstant = 0.70710678118654752440;

struct BoundReport {
  double empirical = 0.0;
  double gamma = 0.0;
  double discrepancy_term = 0.0;
  double statistical_term = 0.0;
  double total = 0.0;
  double g = 0.0;
  double stage_bound = 0.0;
};

// Single-stage bound: empirical + Gamma + (beta/k) sum_{i,j} d + c sqrt(ln(1/delta)/n).
// `alphas` defaults to uniform weights; `g` feeds the multi-stage bound.
BoundReport theorem1_bound(double empirical, const affinity::AffinityMatrices& m,
                           const ObjectiveParams& params, double n,
                           std::span<const double> alphas = {}, double g = 0.0);

// [1 - G]_+ + sqrt(ln(1/delta)/N).
double theorem2_bound(double g, double total_samples, double delta);

enum class GroupingDecision { kGroup, kNoGuarantee };

struct GroupingCheck {
  GroupingDecision decision = GroupingDecision::kNoGuarantee;
  double min_synergy = 0.0;       // Lambda
  double max_discrepancy = 0.0;   // gamma
  double capacity = 0.0;          // Cap(U)
  double threshold = 0.0;         // (gamma + Cap(U)) / lambda
};

GroupingCheck check_grouping_condition(std::span<const std::size_t> subset,
                                       const affinity::AffinityMatrices& m,
                                       const ObjectiveParams& params);

struct StagePlan {
  std::vector<std::vector<std::string>> stages;             // domain ids per stage, run order
  std::vector<std::map<std::string, double>> alpha;         // per stage: domain -> weight
  double rho_theta = 0.1;
  double rho_phi = 0.1;
  double lambda = 0.5;
  double g = 0.0;
  double g_pair_averaged = 0.0;
  double bound = 0.0;
  std::string variant = "full";
  std::string ordering_rationale;
};

// Stage weights alpha_j = n_j / sum_{i in S_t} n_i; stages run in order of
// descending mean intra-stage synergy.
StagePlan make_stage_plan(const Partition& p, const affinity::AffinityMatrices& m,
                          std::span<const std::size_t> sample_counts,
                          const ObjectiveParams& params);
StagePlan make_stage_plan(const Partition& p, const affinity::AffinityMatrices& m,
                          std::span<const corpus::DomainStats> stats,
                          const ObjectiveParams& params);

// Recover index stages of a plan against the affinity ordering of domain ids.
Partition plan_partition(const StagePlan& plan, std::span<const std::string> domain_ids);

std::string to_json_string(const StagePlan& plan);
StagePlan plan_from_json_string(const std::string& text);

std::string to_json_string(const BoundReport& report);

}  // namespace stagewise::partition
