#include "stagewise/trainer.hpp"

#include "stagewise/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

using json = nlohmann::json;

namespace stagewise::trainer {

namespace {

// Sufficient statistics of one dataset for the squared loss.
struct Moments {
  Eigen::MatrixXd sxx;  // X^T X / n
  Eigen::MatrixXd syx;  // Y^T X / n
  double yy = 0.0;      // ||Y||^2 / n
  double d_out = 1.0;

  explicit Moments(const Dataset& data) {
    const double n = static_cast<double>(data.n());
    sxx = data.x.transpose() * data.x / n;
    syx = data.y.transpose() * data.x / n;
    yy = data.y.squaredNorm() / n;
    d_out = static_cast<double>(data.y.cols());
  }

  Eigen::MatrixXd gradient(const Eigen::MatrixXd& w) const { return (2.0 / d_out) * (w * sxx - syx); }

  double risk(const Eigen::MatrixXd& w) const {
    const double quad = (w * sxx).cwiseProduct(w).sum();
    const double cross = syx.cwiseProduct(w).sum();
    const double r = (quad - 2.0 * cross + yy) / d_out;
    // Clamp rounding below zero but let NaN through to the divergence check.
    return std::isnan(r) ? r : std::max(0.0, r);
  }
};

void check_dataset(const ModelState& state, const Dataset& data) {
  if (data.n() == 0) throw InputError("dataset '" + data.domain_id + "' is empty");
  if (data.x.cols() != state.theta.cols() || data.y.cols() != state.theta.rows() ||
      data.y.rows() != data.x.rows()) {
    throw InputError("dataset '" + data.domain_id + "' does not match the model dimensions");
  }
}

Eigen::MatrixXd gaussian(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  // Fill column-major order explicitly so the draw sequence is fixed.
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = scale * normal(rng);
  }
  return m;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

json matrix_rows(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

// Held-out set for `id` when the options carry one, else the training set.
const Dataset& risk_data(const RunOptions& opt, const Dataset& train) {
  for (const auto& d : opt.evaluation) {
    if (d.domain_id == train.domain_id) return d;
  }
  return train;
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

// Trains domains `members` (state indices) jointly for one stage.
StageRecord train_stage(ModelState& state, std::span<const Dataset* const> data,
                        const std::vector<std::size_t>& members, const std::vector<double>& alpha,
                        const Budgets& budgets, const RunOptions& opt, std::size_t stage_no) {
  StageRecord rec;
  std::vector<Moments> moments;
  for (std::size_t m = 0; m < members.size(); ++m) {
    const auto j = members[m];
    moments.emplace_back(*data[j]);
    rec.domains.push_back(state.domain_ids[j]);
    rec.alpha[state.domain_ids[j]] = alpha[m];
  }
  state.theta_ref = state.theta;

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    Eigen::MatrixXd g_theta = Eigen::MatrixXd::Zero(state.theta.rows(), state.theta.cols());
    std::vector<Eigen::MatrixXd> g_u, g_v;
    for (std::size_t m = 0; m < members.size(); ++m) {
      const auto j = members[m];
      const Eigen::MatrixXd g = alpha[m] * moments[m].gradient(state.theta + state.adapter(j));
      g_theta += g;
      g_u.push_back(g * state.v[j]);
      g_v.push_back(g.transpose() * state.u[j]);
    }
    state.theta -= opt.step_size * g_theta;
    for (std::size_t m = 0; m < members.size(); ++m) {
      state.u[members[m]] -= opt.step_size * g_u[m];
      state.v[members[m]] -= opt.step_size * g_v[m];
    }
    project_norms(state, budgets.rho_theta, budgets.rho_phi, members);
    if (opt.on_step) opt.on_step(state, stage_no - 1, epoch);

    double objective = 0.0;
    for (std::size_t m = 0; m < members.size(); ++m) {
      const auto j = members[m];
      const double r = moments[m].risk(state.theta + state.adapter(j));
      if (!std::isfinite(r)) {
        throw TrainingError("non-finite loss for domain '" + state.domain_ids[j] + "' at stage " +
                            std::to_string(stage_no) + ", step " + std::to_string(epoch + 1));
      }
      rec.loss_trajectory[state.domain_ids[j]].push_back(r);
      objective += alpha[m] * r;
    }
    rec.objective_trajectory.push_back(objective);
  }

  StageNorms norms;
  norms.theta_drift = (state.theta - state.theta_ref).norm();
  rec.theta_drift = norms.theta_drift;
  rec.realized_cap = opt.mu_theta * norms.theta_drift * norms.theta_drift;
  for (std::size_t m = 0; m < members.size(); ++m) {
    const auto j = members[m];
    const double a = state.adapter(j).norm();
    norms.adapter_norms[state.domain_ids[j]] = a;
    rec.realized_cap += opt.mu_phi * a * a;
  }
  rec.adapter_norms = norms.adapter_norms;
  state.update_norms.push_back(std::move(norms));

  for (std::size_t m = 0; m < members.size(); ++m) {
    const auto j = members[m];
    rec.exit_risk += alpha[m] * domain_risk(state, risk_data(opt, *data[j]), j);
  }
  return rec;
}

double weighted_max(const std::vector<StageRecord>& stages, const std::map<std::string, double>& risks) {
  double worst = 0.0;
  for (const auto& st : stages) {
    double r = 0.0;
    for (const auto& [id, a] : st.alpha) r += a * risks.at(id);
    worst = std::max(worst, r);
  }
  return worst;
}

double posthoc_g(const std::vector<StageRecord>& stages, const affinity::AffinityMatrices* m,
                 double lambda) {
  if (m == nullptr) return std::numeric_limits<double>::quiet_NaN();
  std::map<std::string, Eigen::Index> index;
  for (std::size_t j = 0; j < m->k(); ++j) index[m->domain_ids[j]] = static_cast<Eigen::Index>(j);
  double total = 0.0;
  for (const auto& st : stages) {
    std::vector<Eigen::Index> idx;
    for (const auto& id : st.domains) {
      auto it = index.find(id);
      if (it == index.end()) throw InputError("affinity matrices lack domain '" + id + "'");
      idx.push_back(it->second);
    }
    for (std::size_t a = 0; a < idx.size(); ++a) {
      for (std::size_t b = a + 1; b < idx.size(); ++b) {
        total += m->d(idx[a], idx[b]) - lambda * m->s(idx[a], idx[b]);
      }
    }
    total += st.realized_cap;
  }
  return -total;
}

}  // namespace

void ToyModelConfig::validate() const {
  if (d_in < 1 || d_out < 1) throw ParameterError("model dimensions must be >= 1");
  if (adapter_rank < 1) throw ParameterError("adapter rank must be >= 1");
  if (loss != "squared-error") throw ParameterError("only the squared-error loss is supported");
  if (!(adapter_init_scale >= 0.0)) throw ParameterError("adapter init scale must be >= 0");
}

ModelState ModelState::init(const ToyModelConfig& cfg, std::vector<std::string> domain_ids) {
  cfg.validate();
  ModelState s;
  s.theta = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(cfg.d_out), static_cast<Eigen::Index>(cfg.d_in));
  s.theta_ref = s.theta;
  for (std::size_t j = 0; j < domain_ids.size(); ++j) s.add_domain(domain_ids[j], cfg, mix_seed(cfg.seed, j));
  return s;
}

std::size_t ModelState::index_of(const std::string& id) const {
  for (std::size_t j = 0; j < domain_ids.size(); ++j) {
    if (domain_ids[j] == id) return j;
  }
  throw InputError("model has no domain '" + id + "'");
}

void ModelState::add_domain(const std::string& id, const ToyModelConfig& cfg, std::uint64_t seed) {
  if (std::find(domain_ids.begin(), domain_ids.end(), id) != domain_ids.end()) {
    throw InputError("duplicate domain id '" + id + "'");
  }
  std::mt19937_64 rng(seed);
  const auto r = static_cast<Eigen::Index>(cfg.adapter_rank);
  domain_ids.push_back(id);
  u.push_back(Eigen::MatrixXd::Zero(theta.rows(), r));
  v.push_back(gaussian(rng, theta.cols(), r, cfg.adapter_init_scale));
}

void project_norms(ModelState& state, double rho_theta, double rho_phi,
                   std::span<const std::size_t> trainable) {
  // A relative slack keeps the projection exactly idempotent: a point just
  // rescaled onto the sphere is not rescaled again by rounding noise.
  constexpr double kSlack = 1e-12;
  const Eigen::MatrixXd dev = state.theta - state.theta_ref;
  const double n = dev.stableNorm();
  if (n > rho_theta * (1.0 + kSlack)) state.theta = state.theta_ref + dev * (rho_theta / n);
  for (auto j : trainable) {
    const double a = state.adapter(j).stableNorm();
    if (a > rho_phi * (1.0 + kSlack)) {
      const double f = std::sqrt(rho_phi / a);
      state.u[j] *= f;
      state.v[j] *= f;
    }
  }
}

void project_norms(ModelState& state, double rho_theta, double rho_phi) {
  std::vector<std::size_t> all(state.k());
  std::iota(all.begin(), all.end(), 0);
  project_norms(state, rho_theta, rho_phi, all);
}

double domain_risk(const ModelState& state, const Dataset& data, std::size_t j) {
  check_dataset(state, data);
  const Eigen::MatrixXd w = state.theta + state.adapter(j);
  const Eigen::MatrixXd e = data.x * w.transpose() - data.y;
  return e.squaredNorm() / (static_cast<double>(data.n()) * static_cast<double>(data.y.cols()));
}

Gradients risk_gradients(const ModelState& state, const Dataset& data, std::size_t j) {
  check_dataset(state, data);
  const Eigen::MatrixXd w = state.theta + state.adapter(j);
  const Eigen::MatrixXd e = data.x * w.transpose() - data.y;
  const Eigen::MatrixXd g =
      (2.0 / (static_cast<double>(data.n()) * static_cast<double>(data.y.cols()))) * e.transpose() * data.x;
  return {g, g * state.v[j], g.transpose() * state.u[j]};
}

double gradient_check(const ModelState& state, const Dataset& data, std::size_t j, double eps,
                      std::size_t probes, std::uint64_t seed) {
  if (!(eps > 1e-8 && eps < 1e-2)) throw ParameterError("finite-difference step must lie in (1e-8, 1e-2)");
  const auto grads = risk_gradients(state, data, j);
  const auto n_theta = static_cast<std::size_t>(grads.theta.size());
  const auto n_u = static_cast<std::size_t>(grads.u.size());
  const auto n_v = static_cast<std::size_t>(grads.v.size());
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n_theta + n_u + n_v - 1);

  double worst = 0.0;
  ModelState probe = state;
  for (std::size_t p = 0; p < probes; ++p) {
    auto c = pick(rng);
    double* param;
    double analytic;
    if (c < n_theta) {
      param = probe.theta.data() + c;
      analytic = grads.theta.data()[c];
    } else if ((c -= n_theta) < n_u) {
      param = probe.u[j].data() + c;
      analytic = grads.u.data()[c];
    } else {
      c -= n_u;
      param = probe.v[j].data() + c;
      analytic = grads.v.data()[c];
    }
    const double saved = *param;
    *param = saved + eps;
    const double up = domain_risk(probe, data, j);
    *param = saved - eps;
    const double down = domain_risk(probe, data, j);
    *param = saved;
    const double numeric = (up - down) / (2.0 * eps);
    if (std::abs(analytic) < 1e-10 && std::abs(numeric) < 1e-10) continue;
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic - numeric) / denom);
  }
  return worst;
}

CosineReport gradient_cosine_matrix(const ModelState& state, std::span<const Dataset> data,
                                    std::size_t probe_size) {
  if (probe_size < 1) throw ParameterError("probe size must be >= 1");
  if (data.size() != state.k()) throw InputError("need one dataset per model domain");
  const auto k = data.size();
  std::vector<Eigen::MatrixXd> grads;
  for (std::size_t j = 0; j < k; ++j) {
    const auto rows = static_cast<Eigen::Index>(std::min(probe_size, data[j].n()));
    Dataset head{data[j].domain_id, data[j].x.topRows(rows), data[j].y.topRows(rows)};
    grads.push_back(risk_gradients(state, head, j).theta);
  }
  CosineReport out;
  out.cosine = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
  for (std::size_t j = 0; j < k; ++j) {
    if (grads[j].norm() == 0.0) {
      out.warnings.push_back("zero backbone gradient for domain '" + data[j].domain_id +
                             "'; its cosines are reported as 0");
    }
  }
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i + 1; j < k; ++j) {
      const double ni = grads[i].norm(), nj = grads[j].norm();
      double c = 0.0;
      if (ni > 0.0 && nj > 0.0) c = std::clamp(grads[i].cwiseProduct(grads[j]).sum() / (ni * nj), -1.0, 1.0);
      out.cosine(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = c;
      out.cosine(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = c;
    }
  }
  return out;
}

void SyntheticDomainSpec::validate() const {
  const auto n = static_cast<Eigen::Index>(k());
  if (k() == 0) throw SpecError("synthetic spec has no domains");
  if (std::set<std::string>(domain_ids.begin(), domain_ids.end()).size() != k()) {
    throw SpecError("synthetic spec repeats a domain id");
  }
  if (cosine_plan.rows() != n || cosine_plan.cols() != n) throw SpecError("cosine plan must be k x k");
  if (samples.size() != k()) throw SpecError("need one sample count per domain");
  for (auto s : samples) {
    if (s < 8) throw SpecError("every domain needs at least 8 samples");
  }
  if (!(noise >= 0.0)) throw SpecError("noise must be >= 0");
  if (!(teacher_scale > 0.0)) throw SpecError("teacher scale must be > 0");
  if (d_in < 1 || d_out < 1) throw SpecError("dimensions must be >= 1");
  if (eval_samples < 1) throw SpecError("evaluation sample count must be >= 1");
  if (k() > d_in * d_out) throw SpecError("more domains than teacher dimensions");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (std::abs(cosine_plan(i, i) - 1.0) > 1e-12) throw SpecError("cosine plan diagonal must be 1");
    for (Eigen::Index j = 0; j < n; ++j) {
      const double c = cosine_plan(i, j);
      if (!(c >= -1.0 && c <= 1.0)) throw SpecError("cosine plan entries must lie in [-1, 1]");
      if (std::abs(c - cosine_plan(j, i)) > 1e-12) throw SpecError("cosine plan must be symmetric");
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cosine_plan);
  if (eig.eigenvalues().minCoeff() < -1e-10) {
    throw SpecError("cosine plan is not positive semidefinite; no teachers can realize it");
  }
}

SyntheticData synth_domains(const SyntheticDomainSpec& spec, std::uint64_t seed) {
  spec.validate();
  const auto k = static_cast<Eigen::Index>(spec.k());
  const auto dim = static_cast<Eigen::Index>(spec.d_in * spec.d_out);
  std::mt19937_64 rng(seed);

  // Factor the plan as B B^T and mix an orthonormal basis with the rows of B.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(spec.cosine_plan);
  const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd b = eig.eigenvectors() * root.asDiagonal();
  const Eigen::MatrixXd z = gaussian(rng, dim, k, 1.0);
  const Eigen::MatrixXd basis = Eigen::HouseholderQR<Eigen::MatrixXd>(z).householderQ() *
                                Eigen::MatrixXd::Identity(dim, k);

  SyntheticData out;
  for (Eigen::Index j = 0; j < k; ++j) {
    const Eigen::VectorXd flat = spec.teacher_scale * basis * b.row(j).transpose();
    out.teachers.push_back(Eigen::Map<const Eigen::MatrixXd>(flat.data(), static_cast<Eigen::Index>(spec.d_out),
                                                             static_cast<Eigen::Index>(spec.d_in)));
  }
  for (Eigen::Index j = 0; j < k; ++j) {
    const auto n = static_cast<Eigen::Index>(spec.samples[static_cast<std::size_t>(j)]);
    Dataset d;
    d.domain_id = spec.domain_ids[static_cast<std::size_t>(j)];
    d.x = gaussian(rng, n, static_cast<Eigen::Index>(spec.d_in), 1.0);
    d.y = d.x * out.teachers[static_cast<std::size_t>(j)].transpose() +
          gaussian(rng, n, static_cast<Eigen::Index>(spec.d_out), spec.noise);
    out.datasets.push_back(std::move(d));
  }
  for (Eigen::Index j = 0; j < k; ++j) {
    const auto n = static_cast<Eigen::Index>(spec.eval_samples);
    Dataset d;
    d.domain_id = spec.domain_ids[static_cast<std::size_t>(j)];
    d.x = gaussian(rng, n, static_cast<Eigen::Index>(spec.d_in), 1.0);
    d.y = d.x * out.teachers[static_cast<std::size_t>(j)].transpose() +
          gaussian(rng, n, static_cast<Eigen::Index>(spec.d_out), spec.noise);
    out.evaluation.push_back(std::move(d));
  }
  return out;
}

SyntheticData corpus_tasks(std::span<const corpus::DomainCorpus> corpora,
                           const corpus::TokenizerConfig& tok, const corpus::EmbeddingConfig& emb,
                           const CorpusTaskSpec& spec, std::uint64_t seed) {
  emb.validate();
  if (corpora.empty()) throw InputError("no corpora to derive tasks from");
  if (spec.d_in < 1 || spec.d_out < 1) throw SpecError("dimensions must be >= 1");
  if (!(spec.noise >= 0.0)) throw SpecError("noise must be >= 0");
  if (!(spec.teacher_scale > 0.0)) throw SpecError("teacher scale must be > 0");

  const auto idf = corpus::IdfTable::build(corpora, tok);
  const auto* weights = emb.weighting == corpus::Weighting::kTfIdf ? &idf : nullptr;
  std::mt19937_64 rng(seed);
  const Eigen::MatrixXd map = gaussian(rng, static_cast<Eigen::Index>(spec.d_in),
                                       static_cast<Eigen::Index>(emb.dimension), 1.0);
  const Eigen::VectorXd g = gaussian(rng, static_cast<Eigen::Index>(spec.d_out), 1, 1.0).col(0).normalized();

  SyntheticData out;
  for (const auto& c : corpora) {
    if (c.documents.empty()) throw InputError("domain '" + c.domain_id + "' has no documents");
    const auto n = static_cast<Eigen::Index>(c.n());
    Dataset d;
    d.domain_id = c.domain_id;
    d.x.resize(n, static_cast<Eigen::Index>(spec.d_in));
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(emb.dimension));
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto e = corpus::embed_document(corpus::tokenize(c.documents[static_cast<std::size_t>(i)], tok),
                                            emb, weights);
      mean += e;
      d.x.row(i) = (map * e).transpose();
    }
    const Eigen::VectorXd probe = map * (mean / static_cast<double>(n));
    if (probe.norm() == 0.0) {
      throw SpecError("domain '" + c.domain_id + "' has a zero mean embedding; no teacher can be built");
    }
    const Eigen::MatrixXd teacher = spec.teacher_scale * g * probe.normalized().transpose();
    d.y = d.x * teacher.transpose() +
          gaussian(rng, n, static_cast<Eigen::Index>(spec.d_out), spec.noise);
    out.teachers.push_back(teacher);
    out.datasets.push_back(std::move(d));
  }
  return out;
}

SyntheticDomainSpec standard_suite() {
  SyntheticDomainSpec spec;
  spec.domain_ids = {"a1", "a2", "b1", "b2"};
  spec.cosine_plan.resize(4, 4);
  spec.cosine_plan << 1.0, 0.9, 0.2, 0.2,  //
      0.9, 1.0, 0.2, 0.2,                   //
      0.2, 0.2, 1.0, 0.9,                   //
      0.2, 0.2, 0.9, 1.0;
  spec.samples = {256, 256, 256, 256};
  return spec;
}

affinity::AffinityMatrices teacher_affinity(const std::vector<std::string>& domain_ids,
                                            const Eigen::MatrixXd& cosines) {
  affinity::AffinityMatrices m;
  m.domain_ids = domain_ids;
  m.d = (1.0 - cosines.array()).matrix() / 2.0;
  m.s = cosines.cwiseMax(0.0);
  for (Eigen::Index i = 0; i < cosines.rows(); ++i) {
    m.d(i, i) = 0.0;
    m.s(i, i) = 1.0;
  }
  m.validate();
  return m;
}

Eigen::MatrixXd measured_cosines(std::span<const Eigen::MatrixXd> teachers) {
  const auto k = static_cast<Eigen::Index>(teachers.size());
  Eigen::MatrixXd c(k, k);
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) {
      const auto& a = teachers[static_cast<std::size_t>(i)];
      const auto& b = teachers[static_cast<std::size_t>(j)];
      c(i, j) = a.cwiseProduct(b).sum() / (a.norm() * b.norm());
    }
  }
  return c;
}

TrainingReport run_plan(const partition::StagePlan& plan, std::span<const Dataset> data,
                        const ToyModelConfig& cfg, const RunOptions& opt, ModelState* final_state) {
  if (!(opt.step_size > 0.0)) throw ParameterError("step size must be > 0");
  std::vector<std::string> ids;
  for (const auto& d : data) ids.push_back(d.domain_id);
  auto state = ModelState::init(cfg, ids);
  for (const auto& d : data) check_dataset(state, d);

  std::set<std::string> planned;
  for (const auto& st : plan.stages) {
    for (const auto& id : st) {
      if (!planned.insert(id).second) throw InputError("plan lists domain '" + id + "' twice");
    }
  }
  if (planned != std::set<std::string>(ids.begin(), ids.end())) {
    throw InputError("plan domains do not match the data domains");
  }

  std::vector<const Dataset*> ptrs;
  for (const auto& d : data) ptrs.push_back(&d);

  TrainingReport report;
  report.domain_ids = ids;
  auto risk = [&](std::size_t j) { return domain_risk(state, risk_data(opt, data[j]), j); };
  for (std::size_t j = 0; j < ids.size(); ++j) report.initial_risks[ids[j]] = risk(j);

  const Budgets budgets{plan.rho_theta, plan.rho_phi};
  for (std::size_t t = 0; t < plan.stages.size(); ++t) {
    std::vector<std::size_t> members;
    std::vector<double> alpha;
    for (const auto& id : plan.stages[t]) {
      members.push_back(state.index_of(id));
      double a = 1.0 / static_cast<double>(plan.stages[t].size());
      if (t < plan.alpha.size()) {
        if (auto it = plan.alpha[t].find(id); it != plan.alpha[t].end()) a = it->second;
      }
      alpha.push_back(a);
    }
    auto rec = train_stage(state, ptrs, members, alpha, budgets, opt, t + 1);
    for (auto j : members) report.exit_risks[ids[j]] = risk(j);
    report.stages.push_back(std::move(rec));
  }
  for (std::size_t j = 0; j < ids.size(); ++j) report.final_risks[ids[j]] = risk(j);
  report.r_max = weighted_max(report.stages, report.exit_risks);
  report.r_max_final = weighted_max(report.stages, report.final_risks);
  report.g_posthoc = posthoc_g(report.stages, opt.affinity, plan.lambda);
  if (final_state != nullptr) *final_state = std::move(state);
  return report;
}

Extension extend_plan(const ModelState& state, const TrainingReport& report,
                      std::span<const Dataset> old_data, const Dataset& new_domain,
                      const Budgets& budgets, const ToyModelConfig& cfg, const RunOptions& opt) {
  if (old_data.size() != state.k()) throw InputError("need one dataset per trained domain");
  Extension ext;
  ext.state = state;
  ext.report = report;
  ext.state.add_domain(new_domain.domain_id, cfg, mix_seed(cfg.seed, state.k()));
  const auto j_new = state.k();
  check_dataset(ext.state, new_domain);

  std::vector<const Dataset*> ptrs;
  for (const auto& d : old_data) ptrs.push_back(&d);
  ptrs.push_back(&new_domain);

  std::vector<double> before;
  for (std::size_t j = 0; j < state.k(); ++j) before.push_back(domain_risk(ext.state, risk_data(opt, old_data[j]), j));
  ext.new_risk_before = domain_risk(ext.state, risk_data(opt, new_domain), j_new);

  auto rec = train_stage(ext.state, ptrs, {j_new}, {1.0}, budgets, opt, report.stages.size() + 1);
  ext.report.stages.push_back(std::move(rec));
  ext.report.domain_ids.push_back(new_domain.domain_id);
  ext.new_risk_after = domain_risk(ext.state, risk_data(opt, new_domain), j_new);
  ext.report.initial_risks[new_domain.domain_id] = ext.new_risk_before;
  ext.report.exit_risks[new_domain.domain_id] = ext.new_risk_after;
  ext.report.final_risks[new_domain.domain_id] = ext.new_risk_after;

  double total = 0.0;
  for (std::size_t j = 0; j < state.k(); ++j) {
    DriftRow row{state.domain_ids[j], before[j], domain_risk(ext.state, risk_data(opt, old_data[j]), j), 0.0};
    const double change = std::abs(row.after - row.before);
    row.relative = row.before > 0.0 ? change / row.before : change;
    total += row.relative;
    ext.report.final_risks[row.domain_id] = row.after;
    ext.drift.push_back(row);
  }
  ext.mean_relative_drift = state.k() > 0 ? total / static_cast<double>(state.k()) : 0.0;
  ext.report.r_max = weighted_max(ext.report.stages, ext.report.exit_risks);
  ext.report.r_max_final = weighted_max(ext.report.stages, ext.report.final_risks);
  return ext;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ParameterError("pearson needs two equal samples of size >= 2");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

namespace {

json report_json(const TrainingReport& r) {
  json j;
  json stages = json::array();
  for (const auto& st : r.stages) {
    json s;
    s["domains"] = st.domains;
    s["alpha"] = st.alpha;
    s["theta_drift"] = st.theta_drift;
    s["adapter_norms"] = st.adapter_norms;
    s["realized_cap"] = st.realized_cap;
    s["exit_risk"] = st.exit_risk;
    s["epochs"] = st.objective_trajectory.size();
    s["final_objective"] = st.objective_trajectory.empty() ? 0.0 : st.objective_trajectory.back();
    stages.push_back(std::move(s));
  }
  j["stages"] = stages;
  j["risks"] = r.final_risks;
  j["initial_risks"] = r.initial_risks;
  j["exit_risks"] = r.exit_risks;
  j["R_max"] = r.r_max;
  j["R_max_final"] = r.r_max_final;
  json caps = json::array();
  for (const auto& st : r.stages) caps.push_back(st.realized_cap);
  j["realized_cap"] = caps;
  j["G_posthoc"] = number_or_null(r.g_posthoc);
  return j;
}

}  // namespace

std::string to_json_string(const TrainingReport& report) { return report_json(report).dump(2); }

std::string to_json_string(const Extension& ext) {
  json j;
  json rows = json::array();
  for (const auto& row : ext.drift) {
    rows.push_back({{"domain", row.domain_id}, {"before", row.before}, {"after", row.after},
                    {"relative_drift", row.relative}});
  }
  j["drift"] = rows;
  j["mean_relative_drift"] = ext.mean_relative_drift;
  j["new_domain_risk_before"] = ext.new_risk_before;
  j["new_domain_risk_after"] = ext.new_risk_after;
  j["report"] = report_json(ext.report);
  return j.dump(2);
}

void write_loss_csv(std::ostream& out, const TrainingReport& report) {
  out << "stage,epoch,domain,loss\n";
  for (std::size_t t = 0; t < report.stages.size(); ++t) {
    for (const auto& [id, traj] : report.stages[t].loss_trajectory) {
      for (std::size_t e = 0; e < traj.size(); ++e) out << t + 1 << ',' << e + 1 << ',' << id << ',' << traj[e] << '\n';
    }
  }
}

SyntheticDomainSpec spec_from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("synthetic spec is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParseError("synthetic spec must be a JSON object");
  static const std::set<std::string> known = {"domain_ids", "cosine_plan", "samples", "noise",
                                              "teacher_scale", "d_in", "d_out", "eval_samples"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ParseError("unknown key '" + key + "' in synthetic spec");
  }
  SyntheticDomainSpec spec;
  try {
    spec.domain_ids = j.at("domain_ids").get<std::vector<std::string>>();
    const auto rows = j.at("cosine_plan").get<std::vector<std::vector<double>>>();
    const auto k = static_cast<Eigen::Index>(rows.size());
    spec.cosine_plan.resize(k, k);
    for (Eigen::Index r = 0; r < k; ++r) {
      if (static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)].size()) != k) {
        throw SpecError("cosine plan must be square");
      }
      for (Eigen::Index c = 0; c < k; ++c) spec.cosine_plan(r, c) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
    }
    spec.samples = j.at("samples").get<std::vector<std::size_t>>();
    spec.noise = j.value("noise", spec.noise);
    spec.teacher_scale = j.value("teacher_scale", spec.teacher_scale);
    spec.d_in = j.value("d_in", spec.d_in);
    spec.d_out = j.value("d_out", spec.d_out);
    spec.eval_samples = j.value("eval_samples", spec.eval_samples);
  } catch (const json::exception& e) {
    throw ParseError(std::string("synthetic spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

std::string to_json_string(const SyntheticDomainSpec& spec) {
  json j;
  j["domain_ids"] = spec.domain_ids;
  j["cosine_plan"] = matrix_rows(spec.cosine_plan);
  j["samples"] = spec.samples;
  j["noise"] = spec.noise;
  j["teacher_scale"] = spec.teacher_scale;
  j["d_in"] = spec.d_in;
  j["d_out"] = spec.d_out;
  j["eval_samples"] = spec.eval_samples;
  return j.dump(2);
}

Dataset load_dataset_jsonl(const std::string& path, const std::string& fallback_id) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open dataset '" + path + "'");
  std::vector<std::vector<double>> xs, ys;
  std::string id = fallback_id, line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
      xs.push_back(j.at("x").get<std::vector<double>>());
      ys.push_back(j.at("y").get<std::vector<double>>());
      if (j.contains("domain")) id = j["domain"].get<std::string>();
    } catch (const json::exception& e) {
      throw ParseError(std::string("dataset row: ") + e.what(), line_no);
    }
    if (xs.back().size() != xs.front().size() || ys.back().size() != ys.front().size()) {
      throw ParseError("dataset rows disagree on dimensions", line_no);
    }
  }
  if (xs.empty()) throw InputError("dataset '" + path + "' has no rows");
  Dataset d;
  d.domain_id = id;
  d.x.resize(static_cast<Eigen::Index>(xs.size()), static_cast<Eigen::Index>(xs.front().size()));
  d.y.resize(static_cast<Eigen::Index>(ys.size()), static_cast<Eigen::Index>(ys.front().size()));
  for (std::size_t r = 0; r < xs.size(); ++r) {
    for (std::size_t c = 0; c < xs[r].size(); ++c) d.x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = xs[r][c];
    for (std::size_t c = 0; c < ys[r].size(); ++c) d.y(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = ys[r][c];
  }
  return d;
}

}  // namespace stagewise::trainer
