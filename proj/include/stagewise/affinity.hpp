#pragma once

#include "stagewise/corpus.hpp"

#include <Eigen/Dense>

#include <iosfwd>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace stagewise::affinity {

enum class Variant { kFull, kJsOnly, kEmbedOnly, kGradientMix };

struct VariantTag {
  Variant kind = Variant::kFull;
  double gradient_weight = 0.0;  // only meaningful for kGradientMix

  std::string to_string() const;
  static VariantTag parse(const std::string& text);
  bool operator==(const VariantTag&) const = default;
};

// Pairwise discrepancy d (zero diagonal) and synergy s (unit diagonal), both
// symmetric with entries in [0, 1].
struct AffinityMatrices {
  std::vector<std::string> domain_ids;
  Eigen::MatrixXd d;
  Eigen::MatrixXd s;
  VariantTag variant;
  // Documents per domain when known (empty otherwise); carried into plans.
  std::vector<std::size_t> samples;

  std::size_t k() const { return domain_ids.size(); }
  // Throws AffinityError when an invariant does not hold.
  void validate() const;
};

// Normalized Jensen-Shannon divergence, in [0, 1].
double js_divergence(const corpus::TokenDistribution& p, const corpus::TokenDistribution& q);

double jaccard(const std::set<std::string>& a, const std::set<std::string>& b);

// Cosine similarity with negative values clamped to 0.
double embedding_cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

// Mean of vocabulary Jaccard and mean-embedding cosine.
double synergy(const corpus::DomainStats& a, const corpus::DomainStats& b);

AffinityMatrices build_matrices(std::span<const corpus::DomainStats> stats,
                                VariantTag variant = {});

// s' = (1 - w) s + w clamp(grad_cos, 0, 1); d is untouched.
AffinityMatrices blend_gradient_affinity(const AffinityMatrices& base,
                                         const Eigen::MatrixXd& grad_cos, double w);

std::string to_json_string(const AffinityMatrices& m);
AffinityMatrices from_json_string(const std::string& text);
void write_csv(std::ostream& out, const AffinityMatrices& m);

}  // namespace stagewise::affinity
