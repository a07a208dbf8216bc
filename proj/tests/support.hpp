#pragma once

// Instance generators and independent oracles shared by the unit tests and the
// acceptance suite.

#include "stagewise/affinity.hpp"
#include "stagewise/partition.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace support {

using stagewise::affinity::AffinityMatrices;
using stagewise::partition::ObjectiveParams;
using stagewise::partition::Partition;

// Scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;

  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() / ("stagewise-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::filesystem::path write(const std::string& name, const std::string& text) const {
    const auto p = path / name;
    std::filesystem::create_directories(p.parent_path());
    std::ofstream(p) << text;
    return p;
  }
};

inline std::vector<std::string> ids(std::size_t k) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back("dom" + std::to_string(i));
  return out;
}

// Uniform symmetric entries in [0, 1]; `levels` > 0 snaps them to a grid,
// which produces many exact ties.
inline AffinityMatrices uniform_instance(std::size_t k, std::mt19937_64& rng, int levels = 0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto draw = [&] {
    double v = u(rng);
    if (levels > 0) v = std::round(v * levels) / levels;
    return v;
  };
  AffinityMatrices m;
  m.domain_ids = ids(k);
  const auto n = static_cast<Eigen::Index>(k);
  m.d = Eigen::MatrixXd::Zero(n, n);
  m.s = Eigen::MatrixXd::Identity(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      m.d(i, j) = m.d(j, i) = draw();
      m.s(i, j) = m.s(j, i) = draw();
    }
  }
  return m;
}

// Domains as noisy copies of a few latent cluster centres; synergy is the
// clipped cosine and discrepancy its complement plus independent noise.
inline AffinityMatrices clustered_instance(std::size_t k, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_int_distribution<int> clusters_d(1, 4);
  const int clusters = clusters_d(rng);
  const int dim = 8;
  std::vector<Eigen::VectorXd> centres(static_cast<std::size_t>(clusters), Eigen::VectorXd(dim));
  for (auto& c : centres) {
    for (int t = 0; t < dim; ++t) c(t) = g(rng);
  }
  std::uniform_int_distribution<int> pick(0, clusters - 1);
  std::vector<Eigen::VectorXd> v;
  for (std::size_t i = 0; i < k; ++i) {
    Eigen::VectorXd x = centres[static_cast<std::size_t>(pick(rng))];
    for (int t = 0; t < dim; ++t) x(t) += 0.5 * g(rng);
    v.push_back(x.normalized());
  }
  AffinityMatrices m;
  m.domain_ids = ids(k);
  const auto n = static_cast<Eigen::Index>(k);
  m.d = Eigen::MatrixXd::Zero(n, n);
  m.s = Eigen::MatrixXd::Identity(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double c = v[static_cast<std::size_t>(i)].dot(v[static_cast<std::size_t>(j)]);
      m.s(i, j) = m.s(j, i) = std::clamp(c, 0.0, 1.0);
      m.d(i, j) = m.d(j, i) = std::clamp((1.0 - c) / 2.0 + 0.05 * g(rng), 0.0, 1.0);
    }
  }
  return m;
}

// All set partitions by inserting each element into an existing block or a
// new one; independent of the restricted-growth enumeration.
inline void naive_partitions(std::size_t k, std::vector<std::vector<std::size_t>>& blocks,
                             std::size_t next,
                             const std::function<void(const std::vector<std::vector<std::size_t>>&)>& out) {
  if (next == k) {
    out(blocks);
    return;
  }
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    blocks[b].push_back(next);
    naive_partitions(k, blocks, next + 1, out);
    blocks[b].pop_back();
  }
  blocks.push_back({next});
  naive_partitions(k, blocks, next + 1, out);
  blocks.pop_back();
}

// The objective written out directly from its definition.
inline double naive_g(const std::vector<std::vector<std::size_t>>& stages, const AffinityMatrices& m,
                      const ObjectiveParams& p) {
  double total = 0.0;
  for (auto stage : stages) {
    std::sort(stage.begin(), stage.end());
    double sd = 0.0, ss = 0.0;
    for (std::size_t a = 0; a < stage.size(); ++a) {
      for (std::size_t b = a + 1; b < stage.size(); ++b) {
        sd += m.d(static_cast<Eigen::Index>(stage[a]), static_cast<Eigen::Index>(stage[b]));
        ss += m.s(static_cast<Eigen::Index>(stage[a]), static_cast<Eigen::Index>(stage[b]));
      }
    }
    double inner = sd - p.lambda * ss;
    const double n = static_cast<double>(stage.size());
    if (p.pair_average && stage.size() > 1) inner /= n * (n - 1) / 2.0;
    const double cap = p.mu_theta * p.rho_theta * p.rho_theta + p.mu_phi * n * p.rho_phi * p.rho_phi;
    total += inner + cap;
  }
  return -total;
}

// Labels of a partition in restricted-growth form (first appearance order).
inline std::vector<std::size_t> rgs(const std::vector<std::vector<std::size_t>>& stages, std::size_t k) {
  std::vector<std::size_t> block_of(k);
  for (std::size_t b = 0; b < stages.size(); ++b) {
    for (auto j : stages[b]) block_of[j] = b;
  }
  std::vector<std::size_t> relabel(stages.size(), k), out(k);
  std::size_t next = 0;
  for (std::size_t j = 0; j < k; ++j) {
    auto& r = relabel[block_of[j]];
    if (r == k) r = next++;
    out[j] = r;
  }
  return out;
}

struct NaiveBest {
  std::vector<std::size_t> labels;
  double g = -INFINITY;
};

// Best partition with at most p.max_stages blocks; exact ties go to the
// lexicographically smallest restricted-growth labelling.
inline NaiveBest naive_optimum(const AffinityMatrices& m, const ObjectiveParams& p) {
  NaiveBest best;
  std::vector<std::vector<std::size_t>> blocks;
  naive_partitions(m.k(), blocks, 0, [&](const auto& stages) {
    if (stages.size() > p.max_stages) return;
    const double g = naive_g(stages, m, p);
    const auto labels = rgs(stages, m.k());
    if (g > best.g || (g == best.g && labels < best.labels)) {
      best.g = g;
      best.labels = labels;
    }
  });
  return best;
}

}  // namespace support
