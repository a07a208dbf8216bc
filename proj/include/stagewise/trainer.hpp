#pragma once

#include "stagewise/affinity.hpp"
#include "stagewise/corpus.hpp"
#include "stagewise/partition.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace stagewise::trainer {

struct ToyModelConfig {
  std::size_t d_in = 16;
  std::size_t d_out = 8;
  std::size_t adapter_rank = 1;
  std::string loss = "squared-error";
  std::uint64_t seed = 0;
  // Standard deviation of the initial v factors; u starts at zero so A_j = 0.
  double adapter_init_scale = 0.1;

  void validate() const;
};

// Rows are samples: x is n x d_in, y is n x d_out.
struct Dataset {
  std::string domain_id;
  Eigen::MatrixXd x;
  Eigen::MatrixXd y;

  std::size_t n() const { return static_cast<std::size_t>(x.rows()); }
};

struct StageNorms {
  double theta_drift = 0.0;                     // ||theta^t - theta^{t-1}||_F
  std::map<std::string, double> adapter_norms;  // ||A_j||_F for j in S_t
};

struct ModelState {
  std::vector<std::string> domain_ids;
  Eigen::MatrixXd theta;      // d_out x d_in
  Eigen::MatrixXd theta_ref;  // snapshot at the start of the current stage
  std::vector<Eigen::MatrixXd> u;  // d_out x r per domain
  std::vector<Eigen::MatrixXd> v;  // d_in x r per domain
  std::vector<StageNorms> update_norms;

  // theta = 0, u_j = 0, v_j ~ N(0, init_scale^2) from cfg.seed.
  static ModelState init(const ToyModelConfig& cfg, std::vector<std::string> domain_ids);

  std::size_t k() const { return domain_ids.size(); }
  std::size_t index_of(const std::string& id) const;
  Eigen::MatrixXd adapter(std::size_t j) const { return u[j] * v[j].transpose(); }
  // Appends a domain with u = 0 and seeded v.
  void add_domain(const std::string& id, const ToyModelConfig& cfg, std::uint64_t seed);
};

// Radial projection of theta - theta_ref onto the rho_theta ball and of each
// listed adapter onto the rho_phi ball (both factors scaled by sqrt of the
// ratio). Points already inside a ball are left bit-for-bit unchanged.
void project_norms(ModelState& state, double rho_theta, double rho_phi,
                   std::span<const std::size_t> trainable);
void project_norms(ModelState& state, double rho_theta, double rho_phi);

// Mean squared error of (theta + A_j) over data rows and output coordinates.
double domain_risk(const ModelState& state, const Dataset& data, std::size_t j);

struct Gradients {
  Eigen::MatrixXd theta;
  Eigen::MatrixXd u;
  Eigen::MatrixXd v;
};

// Analytic gradient of domain_risk for domain j.
Gradients risk_gradients(const ModelState& state, const Dataset& data, std::size_t j);

// Compares analytic gradients with central differences on `probes` randomly
// chosen coordinates of theta, u_j and v_j; returns the largest
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). Coordinates where
// both sides are below 1e-10 count as agreeing.
double gradient_check(const ModelState& state, const Dataset& data, std::size_t j, double eps,
                      std::size_t probes = 100, std::uint64_t seed = 0);

struct CosineReport {
  Eigen::MatrixXd cosine;
  std::vector<std::string> warnings;
};

// Cosine between flattened backbone gradients of each domain's risk over its
// first `probe_size` samples. Pairs involving a zero gradient are reported as 0.
CosineReport gradient_cosine_matrix(const ModelState& state, std::span<const Dataset> data,
                                    std::size_t probe_size);

struct SyntheticDomainSpec {
  std::vector<std::string> domain_ids;
  Eigen::MatrixXd cosine_plan;        // target pairwise teacher cosines
  std::vector<std::size_t> samples;   // n_j >= 8
  double noise = 0.01;
  double teacher_scale = 1.0;         // Frobenius norm of every teacher
  std::size_t d_in = 16;
  std::size_t d_out = 8;
  std::size_t eval_samples = 4096;  // independent draws per domain for risk estimates

  std::size_t k() const { return domain_ids.size(); }
  void validate() const;
};

struct SyntheticData {
  std::vector<Dataset> datasets;
  std::vector<Dataset> evaluation;  // same teachers, fresh inputs and noise
  std::vector<Eigen::MatrixXd> teachers;
};

// Teachers are fixed linear combinations of Frobenius-orthonormal random
// matrices whose Gram matrix equals the cosine plan; x ~ N(0, I),
// y = T_j x + noise. Evaluation sets are drawn after all training sets.
SyntheticData synth_domains(const SyntheticDomainSpec& spec, std::uint64_t seed);

// Four domains: {a1, a2} and {b1, b2} with teacher cosine 0.9 inside each pair
// and 0.2 across pairs, 256 samples each.
SyntheticDomainSpec standard_suite();

struct CorpusTaskSpec {
  double noise = 0.01;
  double teacher_scale = 1.0;
  std::size_t d_in = 16;
  std::size_t d_out = 8;
};

// Linear-probe tasks built from real documents: inputs are hashed document
// embeddings pushed through a shared Gaussian map G (d_in x D), and domain j's
// teacher is teacher_scale * g (G mu_j)^T / (|g| |G mu_j|) for a shared random
// output direction g, so teacher cosines follow the mean-embedding cosines.
// There is no held-out split; `evaluation` stays empty.
SyntheticData corpus_tasks(std::span<const corpus::DomainCorpus> corpora,
                           const corpus::TokenizerConfig& tok, const corpus::EmbeddingConfig& emb,
                           const CorpusTaskSpec& spec, std::uint64_t seed);

// Affinity implied by teacher cosines: s = max(c, 0), d = (1 - c) / 2.
affinity::AffinityMatrices teacher_affinity(const std::vector<std::string>& domain_ids,
                                            const Eigen::MatrixXd& cosines);
Eigen::MatrixXd measured_cosines(std::span<const Eigen::MatrixXd> teachers);

struct RunOptions {
  double step_size = 0.05;
  std::size_t epochs = 200;  // full-batch steps per stage
  double mu_theta = 1.0;
  double mu_phi = 1.0;
  // When set, G is re-evaluated with the realized capacity of each stage.
  const affinity::AffinityMatrices* affinity = nullptr;
  // Held-out data (matched by domain id) for every reported risk; empty means
  // the training data are used.
  std::span<const Dataset> evaluation;
  // Called after every projected step with (state, stage index from 0, step from 0).
  std::function<void(const ModelState&, std::size_t, std::size_t)> on_step;
};

struct StageRecord {
  std::vector<std::string> domains;
  std::map<std::string, double> alpha;
  std::map<std::string, std::vector<double>> loss_trajectory;  // per domain, one entry per epoch
  std::vector<double> objective_trajectory;                    // weighted stage loss per epoch
  double theta_drift = 0.0;
  std::map<std::string, double> adapter_norms;
  double realized_cap = 0.0;
  double exit_risk = 0.0;  // sum_j alpha_j risk_j right after the stage
};

struct TrainingReport {
  std::vector<std::string> domain_ids;
  std::vector<StageRecord> stages;
  std::map<std::string, double> initial_risks;
  std::map<std::string, double> exit_risks;   // each domain evaluated after its own stage
  std::map<std::string, double> final_risks;  // after the last stage
  double r_max = 0.0;        // max over stages of the weighted exit risk
  double r_max_final = 0.0;  // same weighting, final predictor
  double g_posthoc = 0.0;    // NaN without affinity matrices
};

// Runs the stages of `plan` in order on a fresh model. Data are matched to plan
// domains by id; the data order fixes the model's domain indexing.
TrainingReport run_plan(const partition::StagePlan& plan, std::span<const Dataset> data,
                        const ToyModelConfig& cfg, const RunOptions& opt,
                        ModelState* final_state = nullptr);

struct Budgets {
  double rho_theta = 0.1;
  double rho_phi = 0.1;
};

struct DriftRow {
  std::string domain_id;
  double before = 0.0;
  double after = 0.0;
  double relative = 0.0;  // |after - before| / before (absolute change when before = 0)
};

struct Extension {
  ModelState state;
  TrainingReport report;
  std::vector<DriftRow> drift;
  double mean_relative_drift = 0.0;
  double new_risk_before = 0.0;
  double new_risk_after = 0.0;
};

// One extra stage that trains only the new domain's adapter and the backbone
// (fresh rho_theta budget from the current theta); prior adapters stay frozen.
// Risks use opt.evaluation when it covers the domains.
Extension extend_plan(const ModelState& state, const TrainingReport& report,
                      std::span<const Dataset> old_data, const Dataset& new_domain,
                      const Budgets& budgets, const ToyModelConfig& cfg, const RunOptions& opt);

double pearson(std::span<const double> a, std::span<const double> b);

std::string to_json_string(const TrainingReport& report);
// Drift table plus the extended report.
std::string to_json_string(const Extension& ext);
void write_loss_csv(std::ostream& out, const TrainingReport& report);

// Synthetic spec JSON: {"domain_ids", "cosine_plan", "samples", "noise",
// "teacher_scale", "d_in", "d_out", "eval_samples"}; unknown keys are rejected.
SyntheticDomainSpec spec_from_json_string(const std::string& text);
std::string to_json_string(const SyntheticDomainSpec& spec);

// JSONL rows {"x": [...], "y": [...]} (optionally "domain") for one dataset.
Dataset load_dataset_jsonl(const std::string& path, const std::string& fallback_id);

}  // namespace stagewise::trainer
