#include "stagewise/cli.hpp"

#include "stagewise/affinity.hpp"
#include "stagewise/errors.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <type_traits>
#include <utility>

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace stagewise::cli {

namespace {

using partition::ObjectiveParams;
using partition::Partition;
using partition::StagePlan;

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string num(double v) { return fmt("%.6g", v); }

std::string read_file(const std::string& path, const char* what) {
  if (path.empty()) throw InputError(std::string("no ") + what + " given");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError(std::string("cannot read ") + what + " '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out << text;
  if (text.empty() || text.back() != '\n') out << '\n';
}

// Companion output next to the primary file: report.json -> report.loss.csv.
fs::path sibling(const std::string& primary, const std::string& suffix) {
  fs::path p(primary);
  return p.parent_path() / (p.stem().string() + suffix);
}

std::string output_path(const RunConfig& cfg, const char* fallback) {
  return cfg.paths.out.empty() ? std::string(fallback) : cfg.paths.out;
}

void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ParseError("config section '" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) ==
        allowed.end()) {
      throw ParseError("unknown config key '" + (where.empty() ? key : where + "." + key) + "'");
    }
  }
}

template <class T>
void take(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

std::string pooling_name(corpus::Pooling p) {
  return p == corpus::Pooling::kHalfSplit ? "half-split" : "equal-events";
}

corpus::Pooling parse_pooling(const std::string& s) {
  if (s == "equal-events") return corpus::Pooling::kEqualEvents;
  if (s == "half-split") return corpus::Pooling::kHalfSplit;
  throw ParameterError("unknown pooling '" + s + "' (expected equal-events or half-split)");
}

std::string weighting_name(corpus::Weighting w) { return w == corpus::Weighting::kTf ? "tf" : "tf-idf"; }

corpus::Weighting parse_weighting(const std::string& s) {
  if (s == "tf") return corpus::Weighting::kTf;
  if (s == "tf-idf") return corpus::Weighting::kTfIdf;
  throw ParameterError("unknown weighting '" + s + "' (expected tf or tf-idf)");
}

corpus::CorpusFormat parse_format(const std::string& s) {
  if (s == "auto") return corpus::CorpusFormat::kAuto;
  if (s == "directory") return corpus::CorpusFormat::kDirectory;
  if (s == "jsonl") return corpus::CorpusFormat::kJsonl;
  if (s == "manifest") return corpus::CorpusFormat::kManifest;
  throw ParameterError("unknown corpus format '" + s + "'");
}

partition::Solver parse_solver(const std::string& s) {
  if (s == "auto") return partition::Solver::kAuto;
  if (s == "exact") return partition::Solver::kExact;
  if (s == "agglomerative") return partition::Solver::kAgglomerative;
  throw ParameterError("unknown solver '" + s + "' (expected auto, exact or agglomerative)");
}

std::string stages_text(const std::vector<std::vector<std::string>>& stages) {
  std::string s;
  for (std::size_t t = 0; t < stages.size(); ++t) {
    if (t) s += " | ";
    for (std::size_t i = 0; i < stages[t].size(); ++i) s += (i ? " " : "") + stages[t][i];
  }
  return s;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Training data shared by simulate and correlate.

struct Workload {
  std::vector<trainer::Dataset> datasets;
  std::vector<trainer::Dataset> evaluation;
  std::vector<Eigen::MatrixXd> teachers;
  std::vector<std::string> ids;
  std::vector<std::size_t> counts;
  trainer::ToyModelConfig model;
  std::string source;
};

Workload load_workload(const RunConfig& cfg, bool allow_corpus) {
  Workload w;
  w.model = cfg.model;
  w.model.seed = cfg.seed;
  trainer::SyntheticData data;
  if (allow_corpus && !cfg.paths.corpus.empty()) {
    const auto corpora = corpus::load_corpus(cfg.paths.corpus);
    trainer::CorpusTaskSpec spec;
    spec.noise = cfg.training.noise;
    spec.teacher_scale = cfg.training.teacher_scale;
    spec.d_in = cfg.model.d_in;
    spec.d_out = cfg.model.d_out;
    data = trainer::corpus_tasks(corpora, cfg.tokenizer, cfg.embedding, spec, cfg.seed);
    w.source = "corpus:" + cfg.paths.corpus;
  } else {
    auto spec = trainer::standard_suite();
    w.source = "standard-suite";
    if (!cfg.paths.spec.empty()) {
      spec = trainer::spec_from_json_string(read_file(cfg.paths.spec, "synthetic spec"));
      w.source = "spec:" + cfg.paths.spec;
    }
    w.model.d_in = spec.d_in;
    w.model.d_out = spec.d_out;
    data = trainer::synth_domains(spec, cfg.seed);
  }
  w.datasets = std::move(data.datasets);
  w.evaluation = std::move(data.evaluation);
  w.teachers = std::move(data.teachers);
  for (const auto& d : w.datasets) {
    w.ids.push_back(d.domain_id);
    w.counts.push_back(d.n());
  }
  return w;
}

// Affinity from the file when given (its domains must match the data), else
// from the teachers' cosines.
affinity::AffinityMatrices workload_affinity(const RunConfig& cfg, const Workload& w) {
  if (cfg.paths.affinity.empty()) {
    return trainer::teacher_affinity(w.ids, trainer::measured_cosines(w.teachers));
  }
  auto m = affinity::from_json_string(read_file(cfg.paths.affinity, "affinity file"));
  if (std::set<std::string>(m.domain_ids.begin(), m.domain_ids.end()) !=
      std::set<std::string>(w.ids.begin(), w.ids.end())) {
    throw InputError("affinity file and training data cover different domains");
  }
  // Reorder to the data's domain order.
  std::vector<Eigen::Index> perm;
  for (const auto& id : w.ids) {
    perm.push_back(static_cast<Eigen::Index>(std::find(m.domain_ids.begin(), m.domain_ids.end(), id) -
                                             m.domain_ids.begin()));
  }
  affinity::AffinityMatrices r = m;
  r.domain_ids = w.ids;
  r.samples.clear();
  for (std::size_t i = 0; i < perm.size(); ++i) {
    for (std::size_t j = 0; j < perm.size(); ++j) {
      r.d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = m.d(perm[i], perm[j]);
      r.s(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = m.s(perm[i], perm[j]);
    }
  }
  return r;
}

trainer::RunOptions run_options(const RunConfig& cfg, const Workload& w, const affinity::AffinityMatrices* m) {
  trainer::RunOptions opt;
  opt.step_size = cfg.training.step_size;
  opt.epochs = cfg.training.epochs;
  opt.mu_theta = cfg.objective.mu_theta;
  opt.mu_phi = cfg.objective.mu_phi;
  opt.affinity = m;
  opt.evaluation = w.evaluation;
  return opt;
}

void check_plan_domains(const StagePlan& plan, const Workload& w) {
  std::set<std::string> planned;
  for (const auto& stage : plan.stages) planned.insert(stage.begin(), stage.end());
  const std::set<std::string> have(w.ids.begin(), w.ids.end());
  if (planned == have) return;
  std::string missing, extra;
  for (const auto& id : planned) {
    if (!have.count(id)) extra += " " + id;
  }
  for (const auto& id : have) {
    if (!planned.count(id)) missing += " " + id;
  }
  throw InputError("plan and data cover different domains (only in plan:" + (extra.empty() ? " -" : extra) +
                   "; only in data:" + (missing.empty() ? " -" : missing) + ")");
}

// Uniformly labelled random partition into exactly `blocks` stages, avoiding
// `avoid` when any alternative exists.
Partition random_partition(std::size_t k, std::size_t blocks, const Partition& avoid, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, blocks - 1);
  const auto avoid_c = avoid.canonical();
  Partition fallback;
  for (int attempt = 0; attempt < 10000; ++attempt) {
    std::vector<std::size_t> labels(k);
    for (auto& l : labels) l = pick(rng);
    if (std::set<std::size_t>(labels.begin(), labels.end()).size() != blocks) continue;
    auto p = Partition::from_labels(labels).canonical();
    if (p != avoid_c) return p;
    fallback = p;
  }
  if (fallback.stages.empty()) throw InputError("cannot draw a random partition");
  return fallback;
}

// ---------------------------------------------------------------------------
// Subcommands.

int cmd_analyze(const RunConfig& cfg, const std::string& format, std::ostream& out) {
  if (cfg.paths.corpus.empty()) throw InputError("analyze needs --corpus");
  const auto corpora = corpus::load_corpus(cfg.paths.corpus, parse_format(format));
  corpus::EmbeddingImport import;
  const corpus::EmbeddingImport* import_ptr = nullptr;
  if (!cfg.paths.embeddings.empty()) {
    import = corpus::load_embedding_import(cfg.paths.embeddings);
    import_ptr = &import;
  }
  const auto stats = corpus::compute_all_stats(corpora, cfg.tokenizer, cfg.embedding, import_ptr);
  const auto variant = affinity::VariantTag::parse(cfg.variant);

  affinity::AffinityMatrices m;
  if (variant.kind == affinity::Variant::kGradientMix) {
    const auto base = affinity::build_matrices(stats, {});
    trainer::CorpusTaskSpec spec;
    spec.noise = cfg.training.noise;
    spec.teacher_scale = cfg.training.teacher_scale;
    spec.d_in = cfg.model.d_in;
    spec.d_out = cfg.model.d_out;
    const auto tasks = trainer::corpus_tasks(corpora, cfg.tokenizer, cfg.embedding, spec, cfg.seed);
    auto model = cfg.model;
    model.seed = cfg.seed;
    std::vector<std::string> ids;
    for (const auto& d : tasks.datasets) ids.push_back(d.domain_id);
    const auto state = trainer::ModelState::init(model, ids);
    const auto cos = trainer::gradient_cosine_matrix(state, tasks.datasets, 64);
    for (const auto& w : cos.warnings) out << "warning: " << w << '\n';
    m = affinity::blend_gradient_affinity(base, cos.cosine, variant.gradient_weight);
  } else {
    m = affinity::build_matrices(stats, variant);
  }

  const auto path = output_path(cfg, "affinity.json");
  write_file(path, affinity::to_json_string(m));
  std::ostringstream csv;
  affinity::write_csv(csv, m);
  write_file(sibling(path, ".csv"), csv.str());

  out << "domains " << m.k() << ", variant " << m.variant.to_string() << "\n";
  out << std::left << std::setw(14) << "domain" << std::setw(10) << "docs" << "vocab\n";
  for (const auto& st : stats) {
    out << std::setw(14) << st.domain_id << std::setw(10) << st.n << st.vocab.size() << '\n';
  }
  out << std::setw(14) << "pair" << std::setw(14) << "" << std::setw(12) << "d" << "s\n";
  for (std::size_t i = 0; i < m.k(); ++i) {
    for (std::size_t j = i + 1; j < m.k(); ++j) {
      const auto a = static_cast<Eigen::Index>(i), b = static_cast<Eigen::Index>(j);
      out << std::setw(14) << m.domain_ids[i] << std::setw(14) << m.domain_ids[j] << std::setw(12)
          << num(m.d(a, b)) << num(m.s(a, b)) << '\n';
    }
  }
  out << "wrote " << path << " and " << sibling(path, ".csv").string() << '\n';
  return 0;
}

int cmd_plan(const RunConfig& cfg, std::ostream& out) {
  const auto m = affinity::from_json_string(read_file(cfg.paths.affinity, "affinity file (--affinity)"));
  const auto solver = parse_solver(cfg.solver);
  const auto result = partition::solve(m, cfg.objective, solver);
  std::vector<std::size_t> counts = m.samples;
  if (counts.empty()) counts.assign(m.k(), cfg.training.samples);
  const auto plan = partition::make_stage_plan(result.partition, m, counts, cfg.objective);

  const auto path = output_path(cfg, "plan.json");
  write_file(path, partition::to_json_string(plan));

  const bool exact = solver == partition::Solver::kExact ||
                     (solver == partition::Solver::kAuto && m.k() <= partition::kExactGuard);
  out << "solver " << (exact ? "exact" : "agglomerative") << ", " << plan.stages.size() << " stage(s)\n";
  for (std::size_t t = 0; t < plan.stages.size(); ++t) {
    out << "  stage " << t + 1 << ":";
    for (const auto& id : plan.stages[t]) out << ' ' << id << " (alpha " << num(plan.alpha[t].at(id)) << ')';
    out << '\n';
  }
  out << "G                   " << num(plan.g) << '\n';
  out << "G (pair-averaged)   " << num(plan.g_pair_averaged) << '\n';
  out << "stage-wise bound    " << num(plan.bound) << '\n';
  out << "wrote " << path << '\n';
  return 0;
}

void print_drift(const trainer::Extension& ext, std::ostream& out) {
  out << std::left << std::setw(14) << "domain" << std::setw(14) << "risk before" << std::setw(14)
      << "risk after" << "relative drift\n";
  for (const auto& row : ext.drift) {
    out << std::setw(14) << row.domain_id << std::setw(14) << num(row.before) << std::setw(14) << num(row.after)
        << num(row.relative) << '\n';
  }
  out << "mean relative drift " << num(ext.mean_relative_drift) << ", new domain risk " << num(ext.new_risk_before)
      << " -> " << num(ext.new_risk_after) << '\n';
}

int cmd_simulate(const RunConfig& cfg, std::ostream& out) {
  const auto w = load_workload(cfg, true);
  const auto m = workload_affinity(cfg, w);
  StagePlan plan;
  if (cfg.paths.plan.empty()) {
    plan = partition::make_stage_plan(partition::solve(m, cfg.objective, parse_solver(cfg.solver)).partition, m,
                                      w.counts, cfg.objective);
  } else {
    plan = partition::plan_from_json_string(read_file(cfg.paths.plan, "plan file"));
  }
  check_plan_domains(plan, w);
  const auto opt = run_options(cfg, w, &m);

  trainer::ModelState state;
  const auto report = trainer::run_plan(plan, w.datasets, w.model, opt, &state);
  const auto path = output_path(cfg, "report.json");
  write_file(path, trainer::to_json_string(report));
  std::ostringstream loss;
  trainer::write_loss_csv(loss, report);
  write_file(sibling(path, ".loss.csv"), loss.str());

  out << "data " << w.source << ", seed " << cfg.seed << '\n';
  struct Row {
    std::string name;
    StagePlan plan;
    trainer::TrainingReport report;
  };
  std::vector<Row> rows{{"plan", plan, report}};
  for (const auto& which : cfg.compare) {
    Partition p;
    if (which == "single") {
      p.stages.emplace_back();
      for (std::size_t j = 0; j < w.ids.size(); ++j) p.stages.back().push_back(j);
    } else {
      std::mt19937_64 rng(derive_seed(cfg.seed, 1));
      auto blocks = std::min(w.ids.size(), std::max<std::size_t>(2, plan.stages.size()));
      // All singletons is a single partition; step down so the draw can differ from the plan.
      if (blocks == w.ids.size() && blocks > 2) --blocks;
      p = random_partition(w.ids.size(), blocks, partition::plan_partition(plan, w.ids), rng);
    }
    auto alt = partition::make_stage_plan(p, m, w.counts, cfg.objective);
    alt.rho_theta = plan.rho_theta;
    alt.rho_phi = plan.rho_phi;
    auto alt_report = trainer::run_plan(alt, w.datasets, w.model, opt);
    json j;
    j["plan"] = json::parse(partition::to_json_string(alt));
    j["report"] = json::parse(trainer::to_json_string(alt_report));
    write_file(sibling(path, "." + which + ".json"), j.dump(2));
    rows.push_back({which, std::move(alt), std::move(alt_report)});
  }

  out << std::left << std::setw(10) << "run" << std::setw(12) << "G" << std::setw(12) << "R_max" << std::setw(14)
      << "R_max_final" << "stages\n";
  for (const auto& r : rows) {
    out << std::setw(10) << r.name << std::setw(12) << num(r.plan.g) << std::setw(12) << num(r.report.r_max)
        << std::setw(14) << num(r.report.r_max_final) << stages_text(r.plan.stages) << '\n';
  }

  if (!cfg.paths.extend.empty()) {
    const auto fresh = trainer::load_dataset_jsonl(cfg.paths.extend, fs::path(cfg.paths.extend).stem().string());
    const auto ext = trainer::extend_plan(state, report, w.datasets, fresh, {plan.rho_theta, plan.rho_phi}, w.model,
                                          opt);
    write_file(sibling(path, ".extend.json"), trainer::to_json_string(ext));
    std::ostringstream csv;
    csv << "domain,risk_before,risk_after,relative_drift\n" << std::setprecision(17);
    for (const auto& row : ext.drift) {
      csv << row.domain_id << ',' << row.before << ',' << row.after << ',' << row.relative << '\n';
    }
    write_file(sibling(path, ".drift.csv"), csv.str());
    out << "extension stage for '" << fresh.domain_id << "'\n";
    print_drift(ext, out);
  }
  out << "wrote " << path << '\n';
  return 0;
}

int cmd_bound(const RunConfig& cfg, std::ostream& out) {
  const auto& b = cfg.bound;
  affinity::AffinityMatrices m;
  if (!cfg.paths.affinity.empty()) {
    m = affinity::from_json_string(read_file(cfg.paths.affinity, "affinity file"));
  } else {
    // No affinity file: zero discrepancy over as many domains as weights.
    const auto k = static_cast<Eigen::Index>(std::max<std::size_t>(1, b.alphas.size()));
    m.domain_ids.clear();
    for (Eigen::Index j = 0; j < k; ++j) m.domain_ids.push_back("d" + std::to_string(j));
    m.d = Eigen::MatrixXd::Zero(k, k);
    m.s = Eigen::MatrixXd::Identity(k, k);
  }
  if (!b.alphas.empty() && b.alphas.size() != m.k()) {
    throw ParameterError("--alphas needs one weight per domain of the affinity file");
  }
  const auto report = partition::theorem1_bound(b.empirical, m, cfg.objective, b.n, b.alphas, b.g);
  const auto text = partition::to_json_string(report);
  if (!cfg.paths.out.empty()) write_file(cfg.paths.out, text);
  out << text << "\n\n";
  out << std::left << std::setw(30) << "term" << "value\n";
  out << std::setw(30) << "empirical risk" << num(report.empirical) << '\n';
  out << std::setw(30) << "Gamma" << num(report.gamma) << '\n';
  out << std::setw(30) << "discrepancy term" << num(report.discrepancy_term) << '\n';
  out << std::setw(30) << "statistical term" << num(report.statistical_term) << '\n';
  out << std::setw(30) << "single-stage bound" << num(report.total) << '\n';
  out << std::setw(30) << "G" << num(report.g) << '\n';
  out << std::setw(30) << "stage-wise bound" << num(report.stage_bound) << '\n';
  return 0;
}

int cmd_correlate(const RunConfig& cfg, std::ostream& out) {
  if (cfg.trials < 10) throw ParameterError("correlate needs at least 10 trials");
  const auto w = load_workload(cfg, false);
  const auto m = workload_affinity(cfg, w);
  const auto opt = run_options(cfg, w, &m);
  const std::size_t k = w.ids.size();

  std::vector<Partition> pool;
  if (k <= 10) {
    partition::for_each_partition(k, k, [&](std::span<const std::size_t> labels) {
      pool.push_back(Partition::from_labels(labels));
    });
  }
  std::mt19937_64 rng(derive_seed(cfg.seed, 2));
  std::vector<double> gs, rs, rs_final;
  json points = json::array();
  std::ostringstream csv;
  csv << "trial,partition,G,G_pair_averaged,R_max,R_max_final\n" << std::setprecision(17);
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    Partition p;
    if (!pool.empty()) {
      p = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    } else {
      std::vector<std::size_t> labels(k);
      for (auto& l : labels) l = std::uniform_int_distribution<std::size_t>(0, k - 1)(rng);
      p = Partition::from_labels(labels);
    }
    const auto plan = partition::make_stage_plan(p, m, w.counts, cfg.objective);
    const auto report = trainer::run_plan(plan, w.datasets, w.model, opt);
    gs.push_back(plan.g);
    rs.push_back(report.r_max);
    rs_final.push_back(report.r_max_final);
    const auto label = stages_text(plan.stages);
    points.push_back({{"partition", plan.stages}, {"G", plan.g}, {"G_pair_averaged", plan.g_pair_averaged},
                      {"R_max", report.r_max}, {"R_max_final", report.r_max_final}});
    csv << t << ",\"" << label << "\"," << plan.g << ',' << plan.g_pair_averaged << ',' << report.r_max << ','
        << report.r_max_final << '\n';
  }
  const double rho = trainer::pearson(gs, rs);
  const double rho_final = trainer::pearson(gs, rs_final);
  json j;
  j["trials"] = cfg.trials;
  j["seed"] = cfg.seed;
  j["data"] = w.source;
  j["pearson_G_R_max"] = std::isfinite(rho) ? json(rho) : json(nullptr);
  j["pearson_G_R_max_final"] = std::isfinite(rho_final) ? json(rho_final) : json(nullptr);
  j["points"] = points;
  const auto path = output_path(cfg, "correlation.json");
  write_file(path, j.dump(2));
  write_file(sibling(path, ".csv"), csv.str());
  out << "trials " << cfg.trials << ", data " << w.source << ", seed " << cfg.seed << '\n';
  out << "Pearson(G, R_max)        " << num(rho) << '\n';
  out << "Pearson(G, R_max_final)  " << num(rho_final) << '\n';
  out << "wrote " << path << " and " << sibling(path, ".csv").string() << '\n';
  return 0;
}

}  // namespace

void RunConfig::validate() const {
  objective.validate();
  embedding.validate();
  model.validate();
  if (tokenizer.max_tokens_per_doc && *tokenizer.max_tokens_per_doc == 0) {
    throw ParameterError("max tokens per document must be positive");
  }
  if (!(training.step_size > 0.0)) throw ParameterError("step size must be > 0");
  if (training.epochs < 1) throw ParameterError("epochs must be >= 1");
  if (!(training.noise >= 0.0)) throw ParameterError("noise must be >= 0");
  if (!(training.teacher_scale > 0.0)) throw ParameterError("teacher scale must be > 0");
  if (training.samples < 1) throw ParameterError("samples must be >= 1");
  if (!(bound.n > 0.0)) throw ParameterError("sample size for the bound must be > 0");
  affinity::VariantTag::parse(variant);
  parse_solver(solver);
  for (const auto& c : compare) {
    if (c != "random" && c != "single") {
      throw ParameterError("unknown comparison '" + c + "' (expected random and/or single)");
    }
  }
}

std::string to_json_string(const RunConfig& c) {
  json j;
  const auto& o = c.objective;
  j["objective"] = {{"lambda", o.lambda},       {"mu_theta", o.mu_theta},   {"mu_phi", o.mu_phi},
                    {"rho_theta", o.rho_theta}, {"rho_phi", o.rho_phi},     {"stages", o.max_stages},
                    {"beta", o.beta},           {"lipschitz_l", o.lipschitz_l}, {"lipschitz_b", o.lipschitz_b},
                    {"delta", o.delta},         {"pair_average", o.pair_average}};
  j["tokenizer"] = {{"lowercase", c.tokenizer.lowercase},
                    {"strip_punct", c.tokenizer.strip_punct},
                    {"max_tokens_per_doc", c.tokenizer.max_tokens_per_doc ? json(*c.tokenizer.max_tokens_per_doc)
                                                                          : json(nullptr)},
                    {"pooling", pooling_name(c.tokenizer.pooling)}};
  j["embedding"] = {{"dimension", c.embedding.dimension},
                    {"hash_seed", c.embedding.hash_seed},
                    {"weighting", weighting_name(c.embedding.weighting)}};
  j["model"] = {{"d_in", c.model.d_in},
                {"d_out", c.model.d_out},
                {"adapter_rank", c.model.adapter_rank},
                {"loss", c.model.loss},
                {"adapter_init_scale", c.model.adapter_init_scale}};
  j["training"] = {{"step_size", c.training.step_size},
                   {"epochs", c.training.epochs},
                   {"noise", c.training.noise},
                   {"teacher_scale", c.training.teacher_scale},
                   {"samples", c.training.samples}};
  j["bound"] = {{"empirical", c.bound.empirical}, {"g", c.bound.g}, {"n", c.bound.n}, {"alphas", c.bound.alphas}};
  j["paths"] = {{"corpus", c.paths.corpus}, {"embeddings", c.paths.embeddings}, {"affinity", c.paths.affinity},
                {"plan", c.paths.plan},     {"spec", c.paths.spec},             {"extend", c.paths.extend},
                {"out", c.paths.out}};
  j["variant"] = c.variant;
  j["solver"] = c.solver;
  j["compare"] = c.compare;
  j["trials"] = c.trials;
  j["seed"] = c.seed;
  return j.dump(2);
}

RunConfig config_from_json_string(const std::string& text) {
  RunConfig c;
  try {
    const auto j = json::parse(text);
    reject_unknown(j,
                   {"objective", "tokenizer", "embedding", "model", "training", "bound", "paths", "variant", "solver",
                    "compare", "trials", "seed"},
                   "");
    if (j.contains("objective")) {
      const auto& o = j["objective"];
      reject_unknown(o,
                     {"lambda", "mu_theta", "mu_phi", "rho_theta", "rho_phi", "stages", "beta", "lipschitz_l",
                      "lipschitz_b", "delta", "pair_average"},
                     "objective");
      auto& p = c.objective;
      take(o, "lambda", p.lambda);
      take(o, "mu_theta", p.mu_theta);
      take(o, "mu_phi", p.mu_phi);
      take(o, "rho_theta", p.rho_theta);
      take(o, "rho_phi", p.rho_phi);
      take(o, "stages", p.max_stages);
      take(o, "beta", p.beta);
      take(o, "lipschitz_l", p.lipschitz_l);
      take(o, "lipschitz_b", p.lipschitz_b);
      take(o, "delta", p.delta);
      take(o, "pair_average", p.pair_average);
    }
    if (j.contains("tokenizer")) {
      const auto& t = j["tokenizer"];
      reject_unknown(t, {"lowercase", "strip_punct", "max_tokens_per_doc", "pooling"}, "tokenizer");
      take(t, "lowercase", c.tokenizer.lowercase);
      take(t, "strip_punct", c.tokenizer.strip_punct);
      if (t.contains("max_tokens_per_doc")) {
        const auto& v = t["max_tokens_per_doc"];
        c.tokenizer.max_tokens_per_doc =
            v.is_null() ? std::nullopt : std::optional<std::size_t>(v.get<std::size_t>());
      }
      if (t.contains("pooling")) c.tokenizer.pooling = parse_pooling(t["pooling"].get<std::string>());
    }
    if (j.contains("embedding")) {
      const auto& e = j["embedding"];
      reject_unknown(e, {"dimension", "hash_seed", "weighting"}, "embedding");
      take(e, "dimension", c.embedding.dimension);
      take(e, "hash_seed", c.embedding.hash_seed);
      if (e.contains("weighting")) c.embedding.weighting = parse_weighting(e["weighting"].get<std::string>());
    }
    if (j.contains("model")) {
      const auto& m = j["model"];
      reject_unknown(m, {"d_in", "d_out", "adapter_rank", "loss", "adapter_init_scale"}, "model");
      take(m, "d_in", c.model.d_in);
      take(m, "d_out", c.model.d_out);
      take(m, "adapter_rank", c.model.adapter_rank);
      take(m, "loss", c.model.loss);
      take(m, "adapter_init_scale", c.model.adapter_init_scale);
    }
    if (j.contains("training")) {
      const auto& t = j["training"];
      reject_unknown(t, {"step_size", "epochs", "noise", "teacher_scale", "samples"}, "training");
      take(t, "step_size", c.training.step_size);
      take(t, "epochs", c.training.epochs);
      take(t, "noise", c.training.noise);
      take(t, "teacher_scale", c.training.teacher_scale);
      take(t, "samples", c.training.samples);
    }
    if (j.contains("bound")) {
      const auto& b = j["bound"];
      reject_unknown(b, {"empirical", "g", "n", "alphas"}, "bound");
      take(b, "empirical", c.bound.empirical);
      take(b, "g", c.bound.g);
      take(b, "n", c.bound.n);
      take(b, "alphas", c.bound.alphas);
    }
    if (j.contains("paths")) {
      const auto& p = j["paths"];
      reject_unknown(p, {"corpus", "embeddings", "affinity", "plan", "spec", "extend", "out"}, "paths");
      take(p, "corpus", c.paths.corpus);
      take(p, "embeddings", c.paths.embeddings);
      take(p, "affinity", c.paths.affinity);
      take(p, "plan", c.paths.plan);
      take(p, "spec", c.paths.spec);
      take(p, "extend", c.paths.extend);
      take(p, "out", c.paths.out);
    }
    take(j, "variant", c.variant);
    take(j, "solver", c.solver);
    take(j, "compare", c.compare);
    take(j, "trials", c.trials);
    take(j, "seed", c.seed);
  } catch (const json::exception& e) {
    throw ParseError(std::string("invalid config file: ") + e.what());
  }
  c.model.seed = c.seed;
  return c;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Stage-wise domain partitioning: corpus affinities, partition plans, bounds and simulations",
               "stagewise"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  // Flags are recorded as edits and applied after the config file is loaded.
  std::vector<std::function<void(RunConfig&)>> edits;
  std::string config_path, write_config, format = "auto";

  auto value = [&](CLI::App* sub, const std::string& name, auto field, const std::string& help) {
    using T = std::remove_reference_t<decltype(std::invoke(field, std::declval<RunConfig&>()))>;
    return sub->add_option_function<T>(
        name, [&edits, field](const T& v) { edits.push_back([field, v](RunConfig& c) { std::invoke(field, c) = v; }); },
        help);
  };
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run configuration; flags override its values");
    sub->add_option("--write-config", write_config, "Write the effective configuration to this file");
    value(sub, "--seed", &RunConfig::seed, "Root seed");
    sub->add_option_function<std::string>(
        "--out", [&](const std::string& v) { edits.push_back([v](RunConfig& c) { c.paths.out = v; }); },
        "Primary output file");
  };
  auto objective = [&](CLI::App* sub) {
    auto obj = [](auto member) {
      return [member](RunConfig& c) -> auto& { return std::invoke(member, c.objective); };
    };
    value(sub, "--lambda", obj(&ObjectiveParams::lambda), "Synergy weight");
    value(sub, "--mu-theta", obj(&ObjectiveParams::mu_theta), "Backbone capacity weight");
    value(sub, "--mu-phi", obj(&ObjectiveParams::mu_phi), "Adapter capacity weight");
    value(sub, "--rho-theta", obj(&ObjectiveParams::rho_theta), "Backbone drift budget per stage");
    value(sub, "--rho-phi", obj(&ObjectiveParams::rho_phi), "Adapter norm budget");
    value(sub, "--stages", obj(&ObjectiveParams::max_stages), "Maximum number of stages M");
    value(sub, "--delta", obj(&ObjectiveParams::delta), "Confidence parameter in (0, 1)");
    value(sub, "--beta", obj(&ObjectiveParams::beta), "Discrepancy weight of the single-stage bound");
    value(sub, "--lipschitz-l", obj(&ObjectiveParams::lipschitz_l), "Loss Lipschitz constant");
    value(sub, "--lipschitz-b", obj(&ObjectiveParams::lipschitz_b), "Input norm bound");
    sub->add_flag_function(
        "--pair-average",
        [&](std::int64_t) { edits.push_back([](RunConfig& c) { c.objective.pair_average = true; }); },
        "Average intra-stage terms over pairs");
  };
  auto training = [&](CLI::App* sub) {
    auto tr = [](auto member) {
      return [member](RunConfig& c) -> auto& { return std::invoke(member, c.training); };
    };
    value(sub, "--epochs", tr(&TrainingConfig::epochs), "Full-batch steps per stage");
    value(sub, "--step-size", tr(&TrainingConfig::step_size), "Gradient step size");
    value(sub, "--spec", [](RunConfig& c) -> auto& { return c.paths.spec; }, "Synthetic domain spec (JSON)");
    value(sub, "--affinity", [](RunConfig& c) -> auto& { return c.paths.affinity; },
          "Affinity file used for G (defaults to teacher cosines)");
    value(sub, "--solver", &RunConfig::solver, "auto, exact or agglomerative");
  };
  auto corpus_opts = [&](CLI::App* sub) {
    value(sub, "--corpus", [](RunConfig& c) -> auto& { return c.paths.corpus; },
          "Corpus directory, JSONL file or JSON manifest");
    value(sub, "--dimension", [](RunConfig& c) -> auto& { return c.embedding.dimension; }, "Embedding dimension");
    value(sub, "--hash-seed", [](RunConfig& c) -> auto& { return c.embedding.hash_seed; }, "Feature hashing seed");
    sub->add_option_function<std::string>(
        "--weighting",
        [&](const std::string& v) {
          const auto w = parse_weighting(v);
          edits.push_back([w](RunConfig& c) { c.embedding.weighting = w; });
        },
        "tf or tf-idf");
    sub->add_option_function<std::string>(
        "--pooling",
        [&](const std::string& v) {
          const auto p = parse_pooling(v);
          edits.push_back([p](RunConfig& c) { c.tokenizer.pooling = p; });
        },
        "equal-events or half-split");
    sub->add_option_function<std::size_t>(
        "--max-tokens",
        [&](std::size_t v) { edits.push_back([v](RunConfig& c) { c.tokenizer.max_tokens_per_doc = v; }); },
        "Truncate documents to this many tokens");
  };

  auto* analyze = app.add_subcommand("analyze", "Compute discrepancy and synergy matrices from a corpus");
  common(analyze);
  corpus_opts(analyze);
  value(analyze, "--variant", &RunConfig::variant, "full, js-only, embed-only or gradient-mix(w)");
  value(analyze, "--embeddings", [](RunConfig& c) -> auto& { return c.paths.embeddings; },
        "Per-document embedding import (JSONL)");
  analyze->add_option("--format", format, "auto, directory, jsonl or manifest");

  auto* plan = app.add_subcommand("plan", "Partition domains into stages");
  common(plan);
  objective(plan);
  value(plan, "--affinity", [](RunConfig& c) -> auto& { return c.paths.affinity; }, "Affinity file from analyze");
  value(plan, "--solver", &RunConfig::solver, "auto, exact or agglomerative");
  value(plan, "--samples", [](RunConfig& c) -> auto& { return c.training.samples; },
        "Samples per domain when the affinity file carries no counts");

  auto* simulate = app.add_subcommand("simulate", "Train the toy model stage by stage");
  common(simulate);
  objective(simulate);
  training(simulate);
  corpus_opts(simulate);
  value(simulate, "--plan", [](RunConfig& c) -> auto& { return c.paths.plan; },
        "Plan file (solved from the affinity when absent)");
  simulate
      ->add_option_function<std::vector<std::string>>(
          "--compare", [&](const std::vector<std::string>& v) { edits.push_back([v](RunConfig& c) { c.compare = v; }); },
          "Baselines to run side by side: random,single")
      ->delimiter(',');
  value(simulate, "--extend", [](RunConfig& c) -> auto& { return c.paths.extend; },
        "JSONL rows of a new domain to add as one more stage");

  auto* bound = app.add_subcommand("bound", "Evaluate the single-stage and stage-wise bounds");
  common(bound);
  objective(bound);
  value(bound, "--affinity", [](RunConfig& c) -> auto& { return c.paths.affinity; },
        "Affinity file for the discrepancy term");
  value(bound, "--empirical", [](RunConfig& c) -> auto& { return c.bound.empirical; }, "Empirical risk");
  value(bound, "--g", [](RunConfig& c) -> auto& { return c.bound.g; }, "Objective value G");
  value(bound, "--n", [](RunConfig& c) -> auto& { return c.bound.n; }, "Sample size");
  bound
      ->add_option_function<std::vector<double>>(
          "--alphas",
          [&](const std::vector<double>& v) { edits.push_back([v](RunConfig& c) { c.bound.alphas = v; }); },
          "Mixing weights (comma separated)")
      ->delimiter(',');

  auto* correlate = app.add_subcommand("correlate", "Correlate G with R_max over random partitions");
  common(correlate);
  objective(correlate);
  training(correlate);
  value(correlate, "--trials", &RunConfig::trials, "Number of random partitions (>= 10)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) cfg = config_from_json_string(read_file(config_path, "config file"));
    for (const auto& edit : edits) edit(cfg);
    cfg.model.seed = cfg.seed;
    cfg.validate();
    if (!write_config.empty()) write_file(write_config, to_json_string(cfg));

    if (analyze->parsed()) return cmd_analyze(cfg, format, out);
    if (plan->parsed()) return cmd_plan(cfg, out);
    if (simulate->parsed()) return cmd_simulate(cfg, out);
    if (bound->parsed()) return cmd_bound(cfg, out);
    if (correlate->parsed()) return cmd_correlate(cfg, out);
    err << "error: no subcommand\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.user_error() ? 2 : 1;
  } catch (const json::exception& e) {
    err << "error: malformed JSON input: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace stagewise::cli
