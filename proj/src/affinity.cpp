#include "stagewise/affinity.hpp"

#include "stagewise/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>

using json = nlohmann::json;

namespace stagewise::affinity {

namespace {

constexpr double kTol = 1e-9;

double kl_term(double p, double m) { return p > 0.0 ? p * std::log(p / m) : 0.0; }

Eigen::MatrixXd to_matrix(const json& rows, std::size_t k, const char* name) {
  if (!rows.is_array() || rows.size() != k) {
    throw ParseError(std::string("affinity matrix '") + name + "' must be " + std::to_string(k) +
                     " rows");
  }
  Eigen::MatrixXd m(k, k);
  for (std::size_t i = 0; i < k; ++i) {
    if (!rows[i].is_array() || rows[i].size() != k) {
      throw ParseError(std::string("affinity matrix '") + name + "' row " + std::to_string(i) +
                       " has the wrong length");
    }
    for (std::size_t j = 0; j < k; ++j) m(i, j) = rows[i][j].get<double>();
  }
  return m;
}

json to_rows(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

std::string VariantTag::to_string() const {
  switch (kind) {
    case Variant::kFull:
      return "full";
    case Variant::kJsOnly:
      return "js-only";
    case Variant::kEmbedOnly:
      return "embed-only";
    case Variant::kGradientMix: {
      std::ostringstream os;
      os << "gradient-mix(" << gradient_weight << ")";
      return os.str();
    }
  }
  return "full";
}

VariantTag VariantTag::parse(const std::string& text) {
  if (text == "full") return {Variant::kFull, 0.0};
  if (text == "js-only") return {Variant::kJsOnly, 0.0};
  if (text == "embed-only") return {Variant::kEmbedOnly, 0.0};
  const std::string prefix = "gradient-mix(";
  if (text.rfind(prefix, 0) == 0 && text.back() == ')') {
    try {
      const double w = std::stod(text.substr(prefix.size(), text.size() - prefix.size() - 1));
      if (w >= 0.0 && w <= 1.0) return {Variant::kGradientMix, w};
    } catch (const std::exception&) {
    }
  }
  throw ParameterError("unknown affinity variant '" + text +
                       "' (expected full, js-only, embed-only or gradient-mix(w))");
}

void AffinityMatrices::validate() const {
  const auto n = static_cast<Eigen::Index>(k());
  if (d.rows() != n || d.cols() != n || s.rows() != n || s.cols() != n) {
    throw AffinityError("affinity matrices do not match the domain count");
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    if (std::abs(d(i, i)) > kTol) throw AffinityError("discrepancy diagonal must be zero");
    if (std::abs(s(i, i) - 1.0) > kTol) throw AffinityError("synergy diagonal must be one");
    for (Eigen::Index j = 0; j < n; ++j) {
      for (const auto* m : {&d, &s}) {
        const double v = (*m)(i, j);
        if (!std::isfinite(v) || v < -kTol || v > 1.0 + kTol) {
          throw AffinityError("affinity entries must lie in [0, 1]");
        }
        if (std::abs(v - (*m)(j, i)) > kTol) throw AffinityError("affinity matrices must be symmetric");
      }
    }
  }
}

double js_divergence(const corpus::TokenDistribution& p, const corpus::TokenDistribution& q) {
  const auto& a = p.probs();
  const auto& b = q.probs();
  double kl_p = 0.0, kl_q = 0.0;
  auto ia = a.begin();
  auto ib = b.begin();
  // Merge walk over the sorted supports.
  while (ia != a.end() || ib != b.end()) {
    double pa = 0.0, pb = 0.0;
    if (ib == b.end() || (ia != a.end() && ia->first < ib->first)) {
      pa = (ia++)->second;
    } else if (ia == a.end() || ib->first < ia->first) {
      pb = (ib++)->second;
    } else {
      pa = (ia++)->second;
      pb = (ib++)->second;
    }
    const double m = 0.5 * (pa + pb);
    kl_p += kl_term(pa, m);
    kl_q += kl_term(pb, m);
  }
  const double js = (0.5 * kl_p + 0.5 * kl_q) / std::log(2.0);
  return std::clamp(js, 0.0, 1.0);
}

double jaccard(const std::set<std::string>& a, const std::set<std::string>& b) {
  if (a.empty() && b.empty()) throw AffinityError("jaccard of two empty vocabularies is undefined");
  std::size_t common = 0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (*ia < *ib) {
      ++ia;
    } else if (*ib < *ia) {
      ++ib;
    } else {
      ++common;
      ++ia;
      ++ib;
    }
  }
  return static_cast<double>(common) / static_cast<double>(a.size() + b.size() - common);
}

double embedding_cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw AffinityError("embedding dimensions differ");
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 && nb == 0.0) throw AffinityError("cosine of two zero embeddings is undefined");
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(a.dot(b) / (na * nb), 0.0, 1.0);
}

double synergy(const corpus::DomainStats& a, const corpus::DomainStats& b) {
  return 0.5 * (jaccard(a.vocab, b.vocab) + embedding_cosine(a.mean_embedding, b.mean_embedding));
}

AffinityMatrices build_matrices(std::span<const corpus::DomainStats> stats, VariantTag variant) {
  const auto k = stats.size();
  if (k < 2) throw AffinityError("affinity needs at least two domains");
  if (variant.kind == Variant::kGradientMix) {
    throw AffinityError("gradient-mix matrices come from blend_gradient_affinity");
  }
  AffinityMatrices m;
  m.variant = variant;
  std::set<std::string> seen;
  for (const auto& st : stats) {
    if (!seen.insert(st.domain_id).second) {
      throw AffinityError("duplicate domain id '" + st.domain_id + "'");
    }
    if (st.mean_embedding.size() != stats.front().mean_embedding.size()) {
      throw AffinityError("domains disagree on embedding dimension");
    }
    m.domain_ids.push_back(st.domain_id);
    m.samples.push_back(st.n);
  }
  const auto n = static_cast<Eigen::Index>(k);
  m.d = Eigen::MatrixXd::Zero(n, n);
  m.s = Eigen::MatrixXd::Identity(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const auto& a = stats[static_cast<std::size_t>(i)];
      const auto& b = stats[static_cast<std::size_t>(j)];
      double d = 0.0, s = 0.0;
      switch (variant.kind) {
        case Variant::kJsOnly:
          d = js_divergence(a.distribution, b.distribution);
          break;
        case Variant::kEmbedOnly:
          s = embedding_cosine(a.mean_embedding, b.mean_embedding);
          d = 1.0 - s;
          break;
        default:
          d = js_divergence(a.distribution, b.distribution);
          s = synergy(a, b);
          break;
      }
      m.d(i, j) = m.d(j, i) = d;
      m.s(i, j) = m.s(j, i) = s;
    }
  }
  return m;
}

AffinityMatrices blend_gradient_affinity(const AffinityMatrices& base,
                                         const Eigen::MatrixXd& grad_cos, double w) {
  const auto n = static_cast<Eigen::Index>(base.k());
  if (grad_cos.rows() != n || grad_cos.cols() != n) {
    throw AffinityError("gradient cosine matrix does not match the domain count");
  }
  if (!(w >= 0.0 && w <= 1.0)) throw AffinityError("gradient-mix weight must lie in [0, 1]");
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (std::abs(grad_cos(i, j) - grad_cos(j, i)) > kTol) {
        throw AffinityError("gradient cosine matrix must be symmetric");
      }
    }
  }
  AffinityMatrices out = base;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      out.s(i, j) = (1.0 - w) * base.s(i, j) + w * std::clamp(grad_cos(i, j), 0.0, 1.0);
    }
  }
  out.variant = {Variant::kGradientMix, w};
  return out;
}

std::string to_json_string(const AffinityMatrices& m) {
  json j;
  j["domain_ids"] = m.domain_ids;
  j["d"] = to_rows(m.d);
  j["s"] = to_rows(m.s);
  j["variant"] = m.variant.to_string();
  if (!m.samples.empty()) j["samples"] = m.samples;
  return j.dump(2);
}

AffinityMatrices from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("affinity file is not valid JSON: ") + e.what());
  }
  for (const char* key : {"domain_ids", "d", "s"}) {
    if (!j.contains(key)) throw ParseError(std::string("affinity file lacks \"") + key + "\"");
  }
  AffinityMatrices m;
  m.domain_ids = j["domain_ids"].get<std::vector<std::string>>();
  m.d = to_matrix(j["d"], m.k(), "d");
  m.s = to_matrix(j["s"], m.k(), "s");
  m.variant = VariantTag::parse(j.value("variant", std::string("full")));
  if (j.contains("samples")) {
    m.samples = j["samples"].get<std::vector<std::size_t>>();
    if (m.samples.size() != m.k()) throw AffinityError("affinity file needs one sample count per domain");
  }
  std::set<std::string> ids(m.domain_ids.begin(), m.domain_ids.end());
  if (ids.size() != m.domain_ids.size()) throw AffinityError("duplicate domain ids in affinity file");
  m.validate();
  return m;
}

void write_csv(std::ostream& out, const AffinityMatrices& m) {
  out << "matrix,domain";
  for (const auto& id : m.domain_ids) out << ',' << id;
  out << '\n';
  auto block = [&](const char* name, const Eigen::MatrixXd& x) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      out << name << ',' << m.domain_ids[static_cast<std::size_t>(i)];
      for (Eigen::Index j = 0; j < x.cols(); ++j) out << ',' << x(i, j);
      out << '\n';
    }
  };
  block("d", m.d);
  block("s", m.s);
}

}  // namespace stagewise::affinity
