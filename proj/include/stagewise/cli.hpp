#pragma once

#include "stagewise/corpus.hpp"
#include "stagewise/partition.hpp"
#include "stagewise/trainer.hpp"

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace stagewise::cli {

struct Paths {
  std::string corpus;      // directory, JSONL or manifest
  std::string embeddings;  // optional per-document embedding import
  std::string affinity;
  std::string plan;
  std::string spec;        // synthetic domain spec
  std::string extend;      // JSONL rows of one new domain
  std::string out;         // primary output file; companions share its stem
};

struct TrainingConfig {
  double step_size = 0.05;
  std::size_t epochs = 200;
  double noise = 0.01;          // corpus-derived tasks only
  double teacher_scale = 1.0;   // corpus-derived tasks only
  std::size_t samples = 256;    // per-domain count when an affinity file carries none
};

struct BoundInputs {
  double empirical = 0.0;
  double g = 0.0;
  double n = 1000.0;
  std::vector<double> alphas;  // empty = uniform
};

// Everything a subcommand reads. The model seed always equals `seed`.
struct RunConfig {
  partition::ObjectiveParams objective;
  corpus::TokenizerConfig tokenizer;
  corpus::EmbeddingConfig embedding;
  trainer::ToyModelConfig model;
  TrainingConfig training;
  BoundInputs bound;
  Paths paths;
  std::string variant = "full";
  std::string solver = "auto";
  std::vector<std::string> compare;  // subset of {random, single}
  std::size_t trials = 20;
  std::uint64_t seed = 0;

  // Throws ParameterError on any invalid field.
  void validate() const;
};

std::string to_json_string(const RunConfig& cfg);
// Missing keys keep their defaults; unknown keys raise ParseError.
RunConfig config_from_json_string(const std::string& text);

// Runs one subcommand; `args` excludes the program name. Returns 0 on success,
// 2 on a user or input error and 1 on an internal failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace stagewise::cli
