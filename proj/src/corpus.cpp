#include "stagewise/corpus.hpp"

#include "stagewise/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <future>
#include <iterator>
#include <random>
#include <sstream>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace stagewise::corpus {

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> read_txt_documents(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".txt") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<std::string> docs;
  docs.reserve(files.size());
  for (const auto& f : files) docs.push_back(read_file(f));
  return docs;
}

std::vector<std::string> read_line_documents(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw InputError("cannot open " + file.string());
  std::vector<std::string> docs;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) docs.push_back(std::move(line));
  }
  return docs;
}

std::vector<DomainCorpus> load_directory(const fs::path& root) {
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<DomainCorpus> out;
  for (const auto& dir : dirs) {
    auto docs = read_txt_documents(dir);
    if (docs.empty()) continue;
    out.push_back({dir.filename().string(), std::move(docs)});
  }
  if (out.empty()) throw InputError("no domain directories with .txt documents under " + root.string());
  return out;
}

std::vector<DomainCorpus> load_manifest(const fs::path& file) {
  json manifest;
  try {
    manifest = json::parse(read_file(file));
  } catch (const json::parse_error& e) {
    throw ParseError("manifest " + file.string() + ": " + e.what());
  }
  if (!manifest.contains("domains") || !manifest["domains"].is_array()) {
    throw ParseError("manifest " + file.string() + " lacks a \"domains\" array");
  }
  std::vector<DomainCorpus> out;
  std::set<std::string> seen;
  for (const auto& entry : manifest["domains"]) {
    if (!entry.contains("id") || !entry.contains("path")) {
      throw ParseError("manifest entry needs \"id\" and \"path\"");
    }
    DomainCorpus c{entry["id"].get<std::string>(), {}};
    if (c.domain_id.empty() || !seen.insert(c.domain_id).second) {
      throw InputError("manifest domain ids must be non-empty and unique: '" + c.domain_id + "'");
    }
    fs::path p = entry["path"].get<std::string>();
    if (p.is_relative()) p = file.parent_path() / p;
    if (!fs::exists(p)) throw InputError("manifest path does not exist: " + p.string());
    c.documents = fs::is_directory(p) ? read_txt_documents(p) : read_line_documents(p);
    if (c.documents.empty()) throw InputError("domain '" + c.domain_id + "' has no documents");
    out.push_back(std::move(c));
  }
  if (out.empty()) throw InputError("manifest lists no domains");
  return out;
}

bool is_punct(unsigned char c) { return std::ispunct(c) != 0; }

// FNV-1a with a seeded basis, finished with the splitmix64 mixer.
std::uint64_t hash_token(const std::string& token, std::uint64_t seed) {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ (seed * 0x9e3779b97f4a7c15ULL);
  for (unsigned char c : token) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  h ^= h >> 30;
  h *= 0xbf58476d1ce4e5b9ULL;
  h ^= h >> 27;
  h *= 0x94d049bb133111ebULL;
  h ^= h >> 31;
  return h;
}

void add_counts(const Tokens& tokens, std::map<std::string, std::size_t>& uni,
                std::map<std::string, std::size_t>& bi) {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    ++uni[tokens[i]];
    if (i + 1 < tokens.size()) ++bi[tokens[i] + ' ' + tokens[i + 1]];
  }
}

DomainStats stats_from_tokens(const DomainCorpus& corpus, const std::vector<Tokens>& docs,
                              const TokenizerConfig& tok, Eigen::VectorXd mean_embedding) {
  std::map<std::string, std::size_t> uni, bi;
  for (const auto& d : docs) add_counts(d, uni, bi);
  if (uni.empty()) {
    throw StatisticsError("every document of domain '" + corpus.domain_id +
                          "' tokenizes to nothing");
  }
  DomainStats s;
  s.domain_id = corpus.domain_id;
  s.distribution = TokenDistribution::from_counts(uni, bi, tok.pooling);
  for (const auto& [t, _] : uni) s.vocab.insert(s.vocab.end(), t);
  s.mean_embedding = std::move(mean_embedding);
  s.n = corpus.n();
  return s;
}

std::vector<Tokens> tokenize_all(const DomainCorpus& corpus, const TokenizerConfig& tok) {
  std::vector<Tokens> docs;
  docs.reserve(corpus.n());
  for (const auto& d : corpus.documents) docs.push_back(tokenize(d, tok));
  return docs;
}

void require_non_empty(const DomainCorpus& corpus) {
  if (corpus.domain_id.empty()) throw InputError("domain id must be non-empty");
  if (corpus.documents.empty()) {
    throw InputError("domain '" + corpus.domain_id + "' has no documents");
  }
}

}  // namespace

std::vector<DomainCorpus> parse_jsonl(std::istream& in) {
  std::vector<DomainCorpus> out;
  std::map<std::string, std::size_t> index;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error&) {
      throw ParseError("malformed JSON record", line_no);
    }
    if (!rec.is_object() || !rec.contains("domain") || !rec["domain"].is_string()) {
      throw ParseError("record lacks string field \"domain\"", line_no);
    }
    if (!rec.contains("text") || !rec["text"].is_string()) {
      throw ParseError("record lacks string field \"text\"", line_no);
    }
    auto domain = rec["domain"].get<std::string>();
    if (domain.empty()) throw ParseError("empty \"domain\" label", line_no);
    auto [it, inserted] = index.try_emplace(domain, out.size());
    if (inserted) out.push_back({domain, {}});
    out[it->second].documents.push_back(rec["text"].get<std::string>());
  }
  return out;
}

std::vector<DomainCorpus> load_corpus(const fs::path& source, CorpusFormat format) {
  if (!fs::exists(source)) throw InputError("corpus source does not exist: " + source.string());
  if (format == CorpusFormat::kAuto) {
    if (fs::is_directory(source)) {
      format = CorpusFormat::kDirectory;
    } else if (source.extension() == ".json") {
      format = CorpusFormat::kManifest;
    } else {
      format = CorpusFormat::kJsonl;
    }
  }
  switch (format) {
    case CorpusFormat::kDirectory:
      return load_directory(source);
    case CorpusFormat::kManifest:
      return load_manifest(source);
    default: {
      std::ifstream in(source);
      if (!in) throw InputError("cannot open " + source.string());
      auto out = parse_jsonl(in);
      if (out.empty()) throw InputError("corpus file has no records: " + source.string());
      return out;
    }
  }
}

Tokens tokenize(std::string_view text, const TokenizerConfig& cfg) {
  Tokens out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
      if (cfg.max_tokens_per_doc && out.size() >= *cfg.max_tokens_per_doc) break;
      continue;
    }
    if (cfg.strip_punct && is_punct(c)) continue;
    cur.push_back(cfg.lowercase ? static_cast<char>(std::tolower(c)) : ch);
  }
  flush();
  if (cfg.max_tokens_per_doc && out.size() > *cfg.max_tokens_per_doc) {
    out.resize(*cfg.max_tokens_per_doc);
  }
  return out;
}

TokenDistribution TokenDistribution::from_counts(const std::map<std::string, std::size_t>& unigrams,
                                                 const std::map<std::string, std::size_t>& bigrams,
                                                 Pooling pooling) {
  std::size_t uni_total = 0, bi_total = 0;
  for (const auto& [_, c] : unigrams) uni_total += c;
  for (const auto& [_, c] : bigrams) bi_total += c;

  double uni_scale, bi_scale;
  if (pooling == Pooling::kHalfSplit && bi_total > 0) {
    uni_scale = 0.5 / static_cast<double>(uni_total);
    bi_scale = 0.5 / static_cast<double>(bi_total);
  } else if (pooling == Pooling::kHalfSplit) {
    uni_scale = 1.0 / static_cast<double>(uni_total);
    bi_scale = 0.0;
  } else {
    uni_scale = bi_scale = 1.0 / static_cast<double>(uni_total + bi_total);
  }

  TokenDistribution d;
  for (const auto& [k, c] : unigrams) d.probs_.emplace(k, static_cast<double>(c) * uni_scale);
  for (const auto& [k, c] : bigrams) d.probs_.emplace(k, static_cast<double>(c) * bi_scale);
  return d;
}

TokenDistribution TokenDistribution::from_masses(std::map<std::string, double> masses) {
  double total = 0.0;
  for (const auto& [k, m] : masses) {
    if (!(m > 0.0)) throw StatisticsError("distribution mass for '" + k + "' must be positive");
    total += m;
  }
  if (masses.empty()) throw StatisticsError("distribution needs at least one key");
  for (auto& [_, m] : masses) m /= total;
  TokenDistribution d;
  d.probs_ = std::move(masses);
  return d;
}

double TokenDistribution::mass(const std::string& key) const {
  auto it = probs_.find(key);
  return it == probs_.end() ? 0.0 : it->second;
}

void EmbeddingConfig::validate() const {
  if (dimension < 2) throw ParameterError("embedding dimension must be at least 2");
}

IdfTable IdfTable::build(std::span<const DomainCorpus> corpora, const TokenizerConfig& tok) {
  IdfTable t;
  for (const auto& c : corpora) {
    for (const auto& doc : c.documents) {
      auto tokens = tokenize(doc, tok);
      std::sort(tokens.begin(), tokens.end());
      tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
      for (auto& tkn : tokens) ++t.df_[std::move(tkn)];
      ++t.documents_;
    }
  }
  return t;
}

double IdfTable::idf(const std::string& token) const {
  auto it = df_.find(token);
  if (it == df_.end() || documents_ == 0) return 1.0;
  return 1.0 + std::log(static_cast<double>(documents_) / static_cast<double>(it->second));
}

Eigen::VectorXd embed_document(const Tokens& tokens, const EmbeddingConfig& cfg,
                               const IdfTable* idf) {
  cfg.validate();
  Eigen::VectorXd v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(cfg.dimension));
  if (tokens.empty()) return v;

  std::map<std::string, std::size_t> tf;
  for (const auto& t : tokens) ++tf[t];
  const bool use_idf = cfg.weighting == Weighting::kTfIdf && idf != nullptr && !idf->empty();
  for (const auto& [t, count] : tf) {
    const auto h = hash_token(t, cfg.hash_seed);
    const auto slot = static_cast<Eigen::Index>(h % cfg.dimension);
    const double sign = (h >> 63) ? -1.0 : 1.0;
    double w = static_cast<double>(count);
    if (use_idf) w *= idf->idf(t);
    v[slot] += sign * w;
  }
  const double norm = v.norm();
  if (norm > 0.0) v /= norm;
  return v;
}

DomainStats compute_domain_stats(const DomainCorpus& corpus, const TokenizerConfig& tok,
                                 const EmbeddingConfig& emb, const IdfTable* idf) {
  require_non_empty(corpus);
  emb.validate();
  auto docs = tokenize_all(corpus, tok);

  IdfTable own;
  if (emb.weighting == Weighting::kTfIdf && idf == nullptr) {
    own = IdfTable::build(std::span<const DomainCorpus>(&corpus, 1), tok);
    idf = &own;
  }
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(emb.dimension));
  for (const auto& d : docs) mean += embed_document(d, emb, idf);
  mean /= static_cast<double>(docs.size());
  return stats_from_tokens(corpus, docs, tok, std::move(mean));
}

DomainStats compute_domain_stats(const DomainCorpus& corpus, const TokenizerConfig& tok,
                                 std::span<const Eigen::VectorXd> doc_embeddings) {
  require_non_empty(corpus);
  if (doc_embeddings.size() != corpus.n()) {
    throw InputError("domain '" + corpus.domain_id + "' has " + std::to_string(corpus.n()) +
                     " documents but " + std::to_string(doc_embeddings.size()) +
                     " imported embeddings");
  }
  const auto dim = doc_embeddings.front().size();
  if (dim < 2) throw InputError("imported embeddings must have dimension >= 2");
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(dim);
  for (const auto& e : doc_embeddings) {
    if (e.size() != dim) throw InputError("imported embeddings disagree on dimension");
    mean += e;
  }
  mean /= static_cast<double>(doc_embeddings.size());
  return stats_from_tokens(corpus, tokenize_all(corpus, tok), tok, std::move(mean));
}

EmbeddingImport parse_embedding_import(std::istream& in) {
  std::map<std::string, std::map<std::size_t, Eigen::VectorXd>> staged;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error&) {
      throw ParseError("malformed embedding record", line_no);
    }
    if (!rec.contains("domain") || !rec.contains("doc_index") || !rec.contains("vector") ||
        !rec["vector"].is_array()) {
      throw ParseError("embedding record needs \"domain\", \"doc_index\" and \"vector\"", line_no);
    }
    const auto values = rec["vector"].get<std::vector<double>>();
    Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(values.data(),
                                                          static_cast<Eigen::Index>(values.size()));
    auto& slots = staged[rec["domain"].get<std::string>()];
    if (!slots.emplace(rec["doc_index"].get<std::size_t>(), std::move(v)).second) {
      throw ParseError("duplicate doc_index", line_no);
    }
  }
  EmbeddingImport out;
  for (auto& [domain, slots] : staged) {
    auto& vecs = out[domain];
    std::size_t expected = 0;
    for (auto& [idx, v] : slots) {
      if (idx != expected++) {
        throw InputError("embedding import for '" + domain + "' skips doc_index " +
                         std::to_string(expected - 1));
      }
      vecs.push_back(std::move(v));
    }
  }
  return out;
}

EmbeddingImport load_embedding_import(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open embedding import " + path.string());
  return parse_embedding_import(in);
}

std::vector<DomainStats> compute_all_stats(std::span<const DomainCorpus> corpora,
                                           const TokenizerConfig& tok,
                                           const EmbeddingConfig& emb,
                                           const EmbeddingImport* import) {
  std::set<std::string> ids;
  for (const auto& c : corpora) {
    if (!ids.insert(c.domain_id).second) {
      throw InputError("duplicate domain id '" + c.domain_id + "'");
    }
  }
  IdfTable idf;
  if (import == nullptr && emb.weighting == Weighting::kTfIdf) idf = IdfTable::build(corpora, tok);

  std::vector<std::future<DomainStats>> jobs;
  jobs.reserve(corpora.size());
  for (const auto& c : corpora) {
    jobs.push_back(std::async(std::launch::async, [&c, &tok, &emb, &idf, import] {
      if (import != nullptr) {
        auto it = import->find(c.domain_id);
        if (it == import->end()) {
          throw InputError("embedding import has no vectors for domain '" + c.domain_id + "'");
        }
        return compute_domain_stats(c, tok, std::span<const Eigen::VectorXd>(it->second));
      }
      return compute_domain_stats(c, tok, emb, &idf);
    }));
  }
  std::vector<DomainStats> out;
  out.reserve(jobs.size());
  for (auto& j : jobs) out.push_back(j.get());
  return out;
}

DeviationInterval bootstrap_centroid_deviation(const DomainCorpus& corpus,
                                               const TokenizerConfig& tok,
                                               const EmbeddingConfig& emb,
                                               std::size_t resamples, std::uint64_t seed,
                                               const IdfTable* idf) {
  if (resamples < 10) throw ParameterError("bootstrap needs at least 10 resamples");
  require_non_empty(corpus);
  if (corpus.n() == 1) {
    return {0.0, 0.0, "single-document corpus: centroid deviation is degenerate"};
  }
  IdfTable own;
  if (emb.weighting == Weighting::kTfIdf && idf == nullptr) {
    own = IdfTable::build(std::span<const DomainCorpus>(&corpus, 1), tok);
    idf = &own;
  }
  std::vector<Eigen::VectorXd> embeddings;
  embeddings.reserve(corpus.n());
  for (const auto& d : corpus.documents) embeddings.push_back(embed_document(tokenize(d, tok), emb, idf));

  Eigen::VectorXd centroid = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(emb.dimension));
  for (const auto& e : embeddings) centroid += e;
  centroid /= static_cast<double>(embeddings.size());

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, embeddings.size() - 1);
  std::vector<double> dist;
  dist.reserve(resamples);
  for (std::size_t b = 0; b < resamples; ++b) {
    Eigen::VectorXd c = Eigen::VectorXd::Zero(centroid.size());
    for (std::size_t i = 0; i < embeddings.size(); ++i) c += embeddings[pick(rng)];
    c /= static_cast<double>(embeddings.size());
    dist.push_back((c - centroid).norm());
  }
  std::sort(dist.begin(), dist.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(dist.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, dist.size() - 1);
    return dist[lo] + (pos - static_cast<double>(lo)) * (dist[hi] - dist[lo]);
  };
  return {quantile(0.025), quantile(0.975), {}};
}

}  // namespace stagewise::corpus
