#include "stagewise/partition.hpp"

#include "stagewise/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <queue>
#include <set>
#include <sstream>

using json = nlohmann::json;

namespace stagewise::partition {

namespace {

double pair_count(std::size_t n) { return 0.5 * static_cast<double>(n) * static_cast<double>(n - 1); }

// Combined pairwise weight d - lambda s: the per-pair cost of sharing a stage.
Eigen::MatrixXd pair_costs(const affinity::AffinityMatrices& m, double lambda) {
  return m.d - lambda * m.s;
}

// Contribution of one stage to -G, from its size and summed pair cost.
struct StageTerm {
  const ObjectiveParams& params;

  double operator()(std::size_t size, double cost) const {
    if (params.pair_average && size > 1) cost /= pair_count(size);
    return cost + capacity_proxy(size, params);
  }
};

void require_matrices(const affinity::AffinityMatrices& m) {
  if (m.k() == 0) throw AffinityError("affinity matrices have no domains");
  if (static_cast<std::size_t>(m.d.rows()) != m.k() || static_cast<std::size_t>(m.s.rows()) != m.k()) {
    throw AffinityError("affinity matrices do not match the domain count");
  }
}

// Local search after merging: relocate one domain to another (or a fresh)
// stage, or exchange two domains between stages, taking the best strictly
// improving change until none is left. Per-domain link sums to every stage are
// kept up to date, so evaluating all changes costs O(k^2) per round.
class Refiner {
 public:
  Refiner(const Eigen::MatrixXd& cost, const StageTerm& term, std::size_t max_stages,
          std::vector<std::size_t>& label)
      : cost_(cost), term_(term), max_stages_(max_stages), label_(label), k_(label.size()) {
    std::size_t stages = 0;
    for (auto l : label_) stages = std::max(stages, l + 1);
    size_.assign(stages, 0);
    intra_.assign(stages, 0.0);
    link_ = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k_), static_cast<Eigen::Index>(std::min(max_stages, k_) + 1));
    for (std::size_t i = 0; i < k_; ++i) {
      ++size_[label_[i]];
      for (std::size_t j = 0; j < k_; ++j) {
        if (i == j) continue;
        link_(idx(i), idx(label_[j])) += cost_(idx(i), idx(j));
        if (j < i && label_[j] == label_[i]) intra_[label_[i]] += cost_(idx(i), idx(j));
      }
    }
  }

  void run() {
    const double eps = 1e-12;
    for (std::size_t round = 0; round < 8 * k_ * k_ + 16; ++round) {
      const std::size_t stages = size_.size();
      const bool can_open = stages < max_stages_;
      double best = eps;
      std::size_t bi = k_, bj = k_, bt = 0;

      for (std::size_t i = 0; i < k_; ++i) {
        const auto from = label_[i];
        const double own = link_(idx(i), idx(from));
        const double before_from = term_(size_[from], intra_[from]);
        const double after_from = size_[from] > 1 ? term_(size_[from] - 1, intra_[from] - own) : 0.0;
        for (std::size_t t = 0; t < stages + (can_open ? 1 : 0); ++t) {
          if (t == from || (t == stages && size_[from] == 1)) continue;
          double gain = before_from - after_from;
          if (t < stages) {
            gain += term_(size_[t], intra_[t]) - term_(size_[t] + 1, intra_[t] + link_(idx(i), idx(t)));
          } else {
            gain -= term_(1, 0.0);
          }
          if (gain > best) {
            best = gain;
            bi = i;
            bj = k_;
            bt = t;
          }
        }
      }
      for (std::size_t i = 0; i < k_; ++i) {
        for (std::size_t j = i + 1; j < k_; ++j) {
          const auto a = label_[i], b = label_[j];
          if (a == b) continue;
          const double w = cost_(idx(i), idx(j));
          const double new_a = intra_[a] - link_(idx(i), idx(a)) + link_(idx(j), idx(a)) - w;
          const double new_b = intra_[b] - link_(idx(j), idx(b)) + link_(idx(i), idx(b)) - w;
          const double gain = term_(size_[a], intra_[a]) + term_(size_[b], intra_[b]) -
                              term_(size_[a], new_a) - term_(size_[b], new_b);
          if (gain > best) {
            best = gain;
            bi = i;
            bj = j;
          }
        }
      }
      if (bi == k_) return;

      if (bj == k_) {
        if (bt == stages) {
          size_.push_back(0);
          intra_.push_back(0.0);
        }
        const auto from = label_[bi];
        move(bi, bt);
        if (size_[from] == 0) drop(from);
      } else {
        const auto a = label_[bi], b = label_[bj];
        move(bi, b);
        move(bj, a);
      }
    }
  }

 private:
  static Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

  void move(std::size_t i, std::size_t to) {
    const auto from = label_[i];
    intra_[from] -= link_(idx(i), idx(from));
    --size_[from];
    intra_[to] += link_(idx(i), idx(to));
    ++size_[to];
    label_[i] = to;
    for (std::size_t x = 0; x < k_; ++x) {
      if (x == i) continue;
      link_(idx(x), idx(from)) -= cost_(idx(x), idx(i));
      link_(idx(x), idx(to)) += cost_(idx(x), idx(i));
    }
  }

  // Removes an empty stage by moving the last stage into its slot.
  void drop(std::size_t stage) {
    const auto last = size_.size() - 1;
    if (stage != last) {
      size_[stage] = size_[last];
      intra_[stage] = intra_[last];
      link_.col(idx(stage)) = link_.col(idx(last));
      for (auto& l : label_) {
        if (l == last) l = stage;
      }
    }
    link_.col(idx(last)).setZero();
    size_.pop_back();
    intra_.pop_back();
  }

  const Eigen::MatrixXd& cost_;
  const StageTerm& term_;
  std::size_t max_stages_;
  std::vector<std::size_t>& label_;
  std::size_t k_;
  std::vector<std::size_t> size_;
  std::vector<double> intra_;
  Eigen::MatrixXd link_;  // link_(i, t) = sum of cost(i, j) over j != i in stage t
};

}  // namespace

void ObjectiveParams::validate() const {
  auto non_negative = [](double v, const char* name) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ParameterError(std::string(name) + " must be >= 0");
  };
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ParameterError(std::string(name) + " must be > 0");
  };
  non_negative(lambda, "lambda");
  non_negative(mu_theta, "mu_theta");
  non_negative(mu_phi, "mu_phi");
  non_negative(rho_theta, "rho_theta");
  non_negative(rho_phi, "rho_phi");
  positive(beta, "beta");
  positive(lipschitz_l, "L");
  positive(lipschitz_b, "B");
  if (max_stages < 1) throw ParameterError("stage count M must be >= 1");
  if (!(delta > 0.0 && delta < 1.0)) throw ParameterError("delta must lie in (0, 1)");
}

std::size_t Partition::domain_count() const {
  std::size_t n = 0;
  for (const auto& s : stages) n += s.size();
  return n;
}

void Partition::validate(std::size_t k) const {
  std::vector<bool> seen(k, false);
  std::size_t total = 0;
  for (const auto& stage : stages) {
    if (stage.empty()) throw ParameterError("partition has an empty stage");
    for (auto j : stage) {
      if (j >= k) throw ParameterError("partition references domain index " + std::to_string(j));
      if (seen[j]) throw ParameterError("partition stages overlap at domain " + std::to_string(j));
      seen[j] = true;
      ++total;
    }
  }
  if (total != k) throw ParameterError("partition does not cover every domain");
}

Partition Partition::canonical() const {
  Partition out = *this;
  for (auto& s : out.stages) std::sort(s.begin(), s.end());
  std::sort(out.stages.begin(), out.stages.end(),
            [](const auto& a, const auto& b) { return a.front() < b.front(); });
  return out;
}

std::vector<std::size_t> Partition::labels() const {
  const auto c = canonical();
  std::vector<std::size_t> out(domain_count());
  for (std::size_t b = 0; b < c.stages.size(); ++b) {
    for (auto j : c.stages[b]) out[j] = b;
  }
  return out;
}

Partition Partition::from_labels(std::span<const std::size_t> labels) {
  Partition p;
  std::map<std::size_t, std::size_t> block;
  for (std::size_t j = 0; j < labels.size(); ++j) {
    auto [it, inserted] = block.try_emplace(labels[j], p.stages.size());
    if (inserted) p.stages.emplace_back();
    p.stages[it->second].push_back(j);
  }
  return p;
}

double capacity_proxy(std::size_t stage_size, const ObjectiveParams& params) {
  return params.mu_theta * params.rho_theta * params.rho_theta +
         params.mu_phi * static_cast<double>(stage_size) * params.rho_phi * params.rho_phi;
}

double objective_g(const Partition& p, const affinity::AffinityMatrices& m,
                   const ObjectiveParams& params) {
  p.validate(m.k());
  // Canonical order makes the floating-point sum independent of stage labels.
  double total = 0.0;
  for (const auto& stage : p.canonical().stages) {
    double sum_d = 0.0, sum_s = 0.0;
    for (std::size_t a = 0; a < stage.size(); ++a) {
      for (std::size_t b = a + 1; b < stage.size(); ++b) {
        const auto i = static_cast<Eigen::Index>(stage[a]);
        const auto j = static_cast<Eigen::Index>(stage[b]);
        sum_d += m.d(i, j);
        sum_s += m.s(i, j);
      }
    }
    double pairs_term = sum_d - params.lambda * sum_s;
    if (params.pair_average && stage.size() > 1) pairs_term /= pair_count(stage.size());
    total += pairs_term + capacity_proxy(stage.size(), params);
  }
  return -total;
}

void for_each_partition(std::size_t k, std::size_t max_blocks,
                        const std::function<void(std::span<const std::size_t>)>& visit) {
  if (k == 0 || max_blocks == 0) return;
  std::vector<std::size_t> labels(k, 0);
  // labels[0] is always block 0; recurse on the rest keeping growth restricted.
  std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t i, std::size_t used) {
    if (i == k) {
      visit(labels);
      return;
    }
    const auto limit = std::min(used + 1, max_blocks);
    for (std::size_t b = 0; b < limit; ++b) {
      labels[i] = b;
      rec(i + 1, std::max(used, b + 1));
    }
  };
  rec(1, 1);
}

SolveResult enumerate_exact(const affinity::AffinityMatrices& m, const ObjectiveParams& params) {
  params.validate();
  require_matrices(m);
  const auto k = m.k();
  if (k > kExactGuard) {
    throw CapabilityError("exact enumeration is limited to k <= " + std::to_string(kExactGuard) +
                          " domains (got " + std::to_string(k) +
                          "); use the agglomerative solver instead");
  }
  const auto cost = pair_costs(m, params.lambda);
  const auto max_blocks = std::min(params.max_stages, k);
  const StageTerm term{params};

  std::vector<std::size_t> labels(k, 0), sizes(max_blocks, 0);
  std::vector<double> block_cost(max_blocks, 0.0);
  std::vector<std::size_t> best_labels;
  double best_approx = -std::numeric_limits<double>::infinity();
  double best_exact = best_approx;

  auto leaf = [&](std::size_t used, double raw_cost_sum) {
    double approx;
    if (params.pair_average) {
      double t = 0.0;
      for (std::size_t b = 0; b < used; ++b) t += term(sizes[b], block_cost[b]);
      approx = -t;
    } else {
      approx = -(raw_cost_sum +
                 static_cast<double>(used) * params.mu_theta * params.rho_theta * params.rho_theta +
                 static_cast<double>(k) * params.mu_phi * params.rho_phi * params.rho_phi);
    }
    const double tol = 1e-9 * (1.0 + std::abs(approx));
    if (best_labels.empty() || approx > best_approx + tol) {
      best_labels = labels;
      best_approx = approx;
      best_exact = objective_g(Partition::from_labels(labels), m, params);
    } else if (approx >= best_approx - tol) {
      // Near tie: decide on the exact objective; enumeration order keeps the
      // lexicographically smaller labelling on equality.
      const double exact = objective_g(Partition::from_labels(labels), m, params);
      if (exact > best_exact) {
        best_labels = labels;
        best_approx = approx;
        best_exact = exact;
      }
    }
  };

  std::function<void(std::size_t, std::size_t, double)> rec = [&](std::size_t i, std::size_t used,
                                                                   double raw_cost_sum) {
    if (i == k) {
      leaf(used, raw_cost_sum);
      return;
    }
    const auto limit = std::min(used + 1, max_blocks);
    for (std::size_t b = 0; b < limit; ++b) {
      double link = 0.0;
      for (std::size_t j = 0; j < i; ++j) {
        if (labels[j] == b) link += cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      }
      labels[i] = b;
      ++sizes[b];
      block_cost[b] += link;
      rec(i + 1, std::max(used, b + 1), raw_cost_sum + link);
      block_cost[b] -= link;
      --sizes[b];
    }
  };
  labels[0] = 0;
  sizes[0] = 1;
  rec(1, 1, 0.0);
  return {Partition::from_labels(best_labels), best_exact};
}

SolveResult agglomerative(const affinity::AffinityMatrices& m, const ObjectiveParams& params) {
  params.validate();
  require_matrices(m);
  const auto k = m.k();
  const auto cost = pair_costs(m, params.lambda);
  const StageTerm term{params};

  // Cluster ids are the smallest original member; link(a, b) sums pair costs
  // across clusters a and b.
  Eigen::MatrixXd link = cost;
  auto at = [](std::size_t i) { return static_cast<Eigen::Index>(i); };
  std::vector<std::size_t> size(k, 1), merged_into(k, k);
  std::vector<double> intra(k, 0.0);
  std::vector<std::uint32_t> version(k, 0);
  std::vector<bool> active(k, true);

  // Lazy max-heap of pair gains; entries go stale when either side changes.
  struct Candidate {
    double gain;
    std::uint32_t a, b, va, vb;
  };
  auto worse = [](const Candidate& x, const Candidate& y) {
    if (x.gain != y.gain) return x.gain < y.gain;
    if (x.a != y.a) return x.a > y.a;
    return x.b > y.b;
  };
  std::vector<Candidate> storage;
  storage.reserve(k * k + k * (k - 1) / 2);
  std::priority_queue<Candidate, std::vector<Candidate>, decltype(worse)> heap(worse, std::move(storage));

  auto merge_gain = [&](std::size_t a, std::size_t b) {
    const double merged = intra[a] + intra[b] + link(at(a), at(b));
    return term(size[a], intra[a]) + term(size[b], intra[b]) - term(size[a] + size[b], merged);
  };
  auto push = [&](std::size_t a, std::size_t b) {
    if (a > b) std::swap(a, b);
    heap.push({merge_gain(a, b), static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b), version[a],
               version[b]});
  };
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = a + 1; b < k; ++b) push(a, b);
  }

  std::size_t remaining = k;
  while (remaining > 1 && !heap.empty()) {
    const auto top = heap.top();
    heap.pop();
    if (!active[top.a] || !active[top.b] || version[top.a] != top.va || version[top.b] != top.vb) {
      continue;
    }
    if (!(top.gain > 0.0) && remaining <= params.max_stages) break;

    const std::size_t a = top.a, b = top.b;
    intra[a] += intra[b] + link(at(a), at(b));
    size[a] += size[b];
    merged_into[b] = a;
    active[b] = false;
    ++version[a];
    --remaining;
    for (std::size_t c = 0; c < k; ++c) {
      if (!active[c] || c == a) continue;
      link(at(a), at(c)) += link(at(b), at(c));
      link(at(c), at(a)) = link(at(a), at(c));
      push(a, c);
    }
  }

  std::vector<std::size_t> label(k), stage_of(k, k);
  std::size_t next = 0;
  for (std::size_t i = 0; i < k; ++i) {
    auto root = i;
    while (merged_into[root] != k) root = merged_into[root];
    if (stage_of[root] == k) stage_of[root] = next++;
    label[i] = stage_of[root];
  }
  Refiner(cost, term, params.max_stages, label).run();

  auto p = Partition::from_labels(label).canonical();
  return {p, objective_g(p, m, params)};
}

SolveResult solve(const affinity::AffinityMatrices& m, const ObjectiveParams& params, Solver solver) {
  switch (solver) {
    case Solver::kExact:
      return enumerate_exact(m, params);
    case Solver::kAgglomerative:
      return agglomerative(m, params);
    default:
      return m.k() <= kExactGuard ? enumerate_exact(m, params) : agglomerative(m, params);
  }
}

double gamma_bound(const ObjectiveParams& params, std::span<const double> alphas) {
  if (alphas.empty()) throw ParameterError("gamma bound needs at least one mixing weight");
  double sum = 0.0;
  for (double a : alphas) {
    if (a < 0.0) throw ParameterError("mixing weights must be non-negative");
    sum += a;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ParameterError("mixing weights must sum to 1");
  double adapter = 0.0;
  for (double a : alphas) adapter += a * params.rho_phi;
  return 2.0 * params.lipschitz_l * params.lipschitz_b * (params.rho_theta + adapter);
}

BoundReport theorem1_bound(double empirical, const affinity::AffinityMatrices& m,
                           const ObjectiveParams& params, double n,
                           std::span<const double> alphas, double g) {
  params.validate();
  if (!(empirical >= 0.0)) throw ParameterError("empirical risk must be >= 0");
  if (!(n >= 1.0)) throw ParameterError("sample count must be >= 1");
  const auto k = m.k();
  std::vector<double> uniform;
  if (alphas.empty()) {
    uniform.assign(k, 1.0 / static_cast<double>(k));
    alphas = uniform;
  }
  BoundReport r;
  r.empirical = empirical;
  r.gamma = gamma_bound(params, alphas);
  r.discrepancy_term = params.beta / static_cast<double>(k) * m.d.sum();
  r.statistical_term = kStatisticalConstant * std::sqrt(std::log(1.0 / params.delta) / n);
  r.total = r.empirical + r.gamma + r.discrepancy_term + r.statistical_term;
  r.g = g;
  r.stage_bound = theorem2_bound(g, n, params.delta);
  return r;
}

double theorem2_bound(double g, double total_samples, double delta) {
  if (!(total_samples >= 1.0)) throw ParameterError("sample count must be >= 1");
  if (!(delta > 0.0 && delta < 1.0)) throw ParameterError("delta must lie in (0, 1)");
  return std::max(0.0, 1.0 - g) + std::sqrt(std::log(1.0 / delta) / total_samples);
}

GroupingCheck check_grouping_condition(std::span<const std::size_t> subset,
                                       const affinity::AffinityMatrices& m,
                                       const ObjectiveParams& params) {
  if (subset.size() < 2) throw ParameterError("grouping check needs at least two domains");
  GroupingCheck c;
  c.min_synergy = std::numeric_limits<double>::infinity();
  c.max_discrepancy = 0.0;
  for (std::size_t a = 0; a < subset.size(); ++a) {
    for (std::size_t b = a + 1; b < subset.size(); ++b) {
      const auto i = static_cast<Eigen::Index>(subset[a]);
      const auto j = static_cast<Eigen::Index>(subset[b]);
      if (subset[a] >= m.k() || subset[b] >= m.k()) throw ParameterError("subset index out of range");
      c.min_synergy = std::min(c.min_synergy, m.s(i, j));
      c.max_discrepancy = std::max(c.max_discrepancy, m.d(i, j));
    }
  }
  c.capacity = capacity_proxy(subset.size(), params);
  if (params.lambda <= 0.0) {
    c.threshold = std::numeric_limits<double>::infinity();
    return c;
  }
  c.threshold = (c.max_discrepancy + c.capacity) / params.lambda;
  c.decision = c.min_synergy > c.threshold ? GroupingDecision::kGroup : GroupingDecision::kNoGuarantee;
  return c;
}

StagePlan make_stage_plan(const Partition& p, const affinity::AffinityMatrices& m,
                          std::span<const std::size_t> sample_counts,
                          const ObjectiveParams& params) {
  params.validate();
  p.validate(m.k());
  if (sample_counts.size() != m.k()) throw ParameterError("need one sample count per domain");
  for (auto n : sample_counts) {
    if (n == 0) throw ParameterError("sample counts must be positive");
  }

  auto mean_synergy = [&](const std::vector<std::size_t>& stage) {
    if (stage.size() < 2) return 0.0;
    double sum = 0.0;
    for (std::size_t a = 0; a < stage.size(); ++a) {
      for (std::size_t b = a + 1; b < stage.size(); ++b) {
        sum += m.s(static_cast<Eigen::Index>(stage[a]), static_cast<Eigen::Index>(stage[b]));
      }
    }
    return sum / pair_count(stage.size());
  };
  auto ordered = p.canonical().stages;
  std::stable_sort(ordered.begin(), ordered.end(), [&](const auto& x, const auto& y) {
    return mean_synergy(x) > mean_synergy(y);
  });

  StagePlan plan;
  plan.rho_theta = params.rho_theta;
  plan.rho_phi = params.rho_phi;
  plan.lambda = params.lambda;
  plan.variant = m.variant.to_string();
  plan.ordering_rationale = "descending-mean-synergy";
  double total_n = 0.0;
  for (const auto& stage : ordered) {
    std::vector<std::string> ids;
    std::map<std::string, double> alpha;
    double stage_n = 0.0;
    for (auto j : stage) stage_n += static_cast<double>(sample_counts[j]);
    for (auto j : stage) {
      ids.push_back(m.domain_ids[j]);
      alpha[m.domain_ids[j]] = static_cast<double>(sample_counts[j]) / stage_n;
    }
    total_n += stage_n;
    plan.stages.push_back(std::move(ids));
    plan.alpha.push_back(std::move(alpha));
  }
  auto raw = params;
  raw.pair_average = false;
  auto averaged = params;
  averaged.pair_average = true;
  plan.g = objective_g(p, m, raw);
  plan.g_pair_averaged = objective_g(p, m, averaged);
  plan.bound = theorem2_bound(plan.g_pair_averaged, total_n, params.delta);
  return plan;
}

StagePlan make_stage_plan(const Partition& p, const affinity::AffinityMatrices& m,
                          std::span<const corpus::DomainStats> stats,
                          const ObjectiveParams& params) {
  if (stats.size() != m.k()) throw ParameterError("need statistics for every domain");
  std::vector<std::size_t> counts;
  for (std::size_t j = 0; j < m.k(); ++j) {
    if (stats[j].domain_id != m.domain_ids[j]) {
      throw InputError("statistics order does not match affinity domain ids");
    }
    counts.push_back(stats[j].n);
  }
  return make_stage_plan(p, m, counts, params);
}

Partition plan_partition(const StagePlan& plan, std::span<const std::string> domain_ids) {
  std::map<std::string, std::size_t> index;
  for (std::size_t j = 0; j < domain_ids.size(); ++j) index[domain_ids[j]] = j;
  Partition p;
  for (const auto& stage : plan.stages) {
    std::vector<std::size_t> idx;
    for (const auto& id : stage) {
      auto it = index.find(id);
      if (it == index.end()) throw InputError("plan names unknown domain '" + id + "'");
      idx.push_back(it->second);
    }
    p.stages.push_back(std::move(idx));
  }
  p.validate(domain_ids.size());
  return p;
}

std::string to_json_string(const StagePlan& plan) {
  json j;
  j["stages"] = plan.stages;
  json alpha = json::object();
  for (std::size_t t = 0; t < plan.alpha.size(); ++t) alpha[std::to_string(t)] = plan.alpha[t];
  j["alpha"] = alpha;
  j["rho_theta"] = plan.rho_theta;
  j["rho_phi"] = plan.rho_phi;
  j["lambda"] = plan.lambda;
  j["G"] = plan.g;
  j["G_pair_averaged"] = plan.g_pair_averaged;
  j["bound"] = plan.bound;
  j["variant"] = plan.variant;
  j["ordering_rationale"] = plan.ordering_rationale;
  return j.dump(2);
}

StagePlan plan_from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("plan file is not valid JSON: ") + e.what());
  }
  StagePlan plan;
  try {
    plan.stages = j.at("stages").get<std::vector<std::vector<std::string>>>();
    const auto& alpha = j.at("alpha");
    for (std::size_t t = 0; t < plan.stages.size(); ++t) {
      plan.alpha.push_back(alpha.at(std::to_string(t)).get<std::map<std::string, double>>());
    }
    plan.rho_theta = j.at("rho_theta").get<double>();
    plan.rho_phi = j.at("rho_phi").get<double>();
    plan.lambda = j.at("lambda").get<double>();
    plan.g = j.at("G").get<double>();
    plan.g_pair_averaged = j.at("G_pair_averaged").get<double>();
    plan.bound = j.at("bound").get<double>();
    plan.variant = j.value("variant", std::string("full"));
    plan.ordering_rationale = j.value("ordering_rationale", std::string());
  } catch (const json::exception& e) {
    throw ParseError(std::string("plan file: ") + e.what());
  }
  std::set<std::string> seen;
  for (std::size_t t = 0; t < plan.stages.size(); ++t) {
    if (plan.stages[t].empty()) throw ParseError("plan stage " + std::to_string(t) + " is empty");
    double sum = 0.0;
    for (const auto& id : plan.stages[t]) {
      if (!seen.insert(id).second) throw ParseError("plan lists domain '" + id + "' twice");
      auto it = plan.alpha[t].find(id);
      if (it == plan.alpha[t].end() || !(it->second > 0.0)) {
        throw ParseError("plan alpha missing or non-positive for '" + id + "'");
      }
      sum += it->second;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ParseError("plan alphas of stage " + std::to_string(t) + " do not sum to 1");
  }
  return plan;
}

std::string to_json_string(const BoundReport& r) {
  json j;
  j["empirical"] = r.empirical;
  j["gamma"] = r.gamma;
  j["discrepancy_term"] = r.discrepancy_term;
  j["statistical_term"] = r.statistical_term;
  j["statistical_constant"] = kStatisticalConstant;
  j["total"] = r.total;
  j["G"] = r.g;
  j["stage_bound"] = r.stage_bound;
  j["stage_bound_constant"] = 1.0;
  return j.dump(2);
}

}  // namespace stagewise::partition
