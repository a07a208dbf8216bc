#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace stagewise::corpus {

// One source domain: a label plus its raw documents in input order.
struct DomainCorpus {
  std::string domain_id;
  std::vector<std::string> documents;

  std::size_t n() const { return documents.size(); }
};

enum class CorpusFormat { kAuto, kDirectory, kJsonl, kManifest };

// Accepts `root/<domain_id>/*.txt` directories, JSONL records
// `{"domain": ..., "text": ...}`, or a JSON manifest
// `{"domains": [{"id": ..., "path": ...}]}` where each path is either a
// directory of .txt files or a text file holding one document per line.
std::vector<DomainCorpus> load_corpus(const std::filesystem::path& source,
                                      CorpusFormat format = CorpusFormat::kAuto);
std::vector<DomainCorpus> parse_jsonl(std::istream& in);

// How unigram and bigram events share the single token simplex.
enum class Pooling {
  kEqualEvents,  // every unigram and bigram occurrence counts once
  kHalfSplit,    // unigrams and bigrams each receive half of the mass
};

struct TokenizerConfig {
  bool lowercase = true;
  bool strip_punct = true;
  std::optional<std::size_t> max_tokens_per_doc;  // nullopt = unbounded
  Pooling pooling = Pooling::kEqualEvents;
};

using Tokens = std::vector<std::string>;

Tokens tokenize(std::string_view text, const TokenizerConfig& cfg);

// Normalized distribution over unigram keys ("tok") and bigram keys
// ("tok1 tok2"). Tokens never contain whitespace, so the keys are unambiguous.
class TokenDistribution {
 public:
  TokenDistribution() = default;

  static TokenDistribution from_counts(const std::map<std::string, std::size_t>& unigrams,
                                       const std::map<std::string, std::size_t>& bigrams,
                                       Pooling pooling);
  // Masses must be positive; they are renormalized.
  static TokenDistribution from_masses(std::map<std::string, double> masses);

  const std::map<std::string, double>& probs() const { return probs_; }
  std::size_t support_size() const { return probs_.size(); }
  double mass(const std::string& key) const;

 private:
  std::map<std::string, double> probs_;
};

enum class Weighting { kTf, kTfIdf };

struct EmbeddingConfig {
  std::size_t dimension = 256;
  std::uint64_t hash_seed = 0x5eedULL;
  Weighting weighting = Weighting::kTfIdf;

  void validate() const;
};

// Document frequencies over every document of a run. idf(t) = 1 + ln(N / df(t));
// unseen tokens get weight 1.
class IdfTable {
 public:
  IdfTable() = default;
  static IdfTable build(std::span<const DomainCorpus> corpora, const TokenizerConfig& tok);

  double idf(const std::string& token) const;
  std::size_t documents() const { return documents_; }
  bool empty() const { return documents_ == 0; }

 private:
  std::size_t documents_ = 0;
  std::unordered_map<std::string, std::size_t> df_;
};

// Signed feature hashing of the token bag, L2-normalized unless zero. A null or
// empty idf table means plain term frequencies.
Eigen::VectorXd embed_document(const Tokens& tokens, const EmbeddingConfig& cfg,
                               const IdfTable* idf = nullptr);

struct DomainStats {
  std::string domain_id;
  TokenDistribution distribution;
  std::set<std::string> vocab;
  Eigen::VectorXd mean_embedding;
  std::size_t n = 0;
};

DomainStats compute_domain_stats(const DomainCorpus& corpus, const TokenizerConfig& tok,
                                 const EmbeddingConfig& emb, const IdfTable* idf = nullptr);

// Variant for externally computed per-document embeddings.
DomainStats compute_domain_stats(const DomainCorpus& corpus, const TokenizerConfig& tok,
                                 std::span<const Eigen::VectorXd> doc_embeddings);

// Per-document embeddings imported from JSONL
// `{"domain": ..., "doc_index": ..., "vector": [...]}`, keyed by domain.
using EmbeddingImport = std::map<std::string, std::vector<Eigen::VectorXd>>;
EmbeddingImport load_embedding_import(const std::filesystem::path& path);
EmbeddingImport parse_embedding_import(std::istream& in);

// Statistics for every corpus, one task per domain. tf-idf weights come from a
// table built over all corpora; `import` (when given) bypasses hashing.
std::vector<DomainStats> compute_all_stats(std::span<const DomainCorpus> corpora,
                                           const TokenizerConfig& tok,
                                           const EmbeddingConfig& emb,
                                           const EmbeddingImport* import = nullptr);

struct DeviationInterval {
  double lo = 0.0;
  double hi = 0.0;
  std::string warning;
};

// 95% percentile interval of ||bootstrap centroid - full centroid||_2.
DeviationInterval bootstrap_centroid_deviation(const DomainCorpus& corpus,
                                               const TokenizerConfig& tok,
                                               const EmbeddingConfig& emb,
                                               std::size_t resamples, std::uint64_t seed,
                                               const IdfTable* idf = nullptr);

}  // namespace stagewise::corpus
