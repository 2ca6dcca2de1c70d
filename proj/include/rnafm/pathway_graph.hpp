#pragma once

// Gene-set ingestion and the inter-pathway graph: overlap adjacency,
// symmetric degree normalization and the additive attention mask.

#include "rnafm/common.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace rnafm {

class GeneVocabulary {
 public:
  GeneVocabulary() = default;
  explicit GeneVocabulary(std::vector<std::string> genes) : genes_(std::move(genes)) {
    index_.reserve(genes_.size());
    for (std::size_t i = 0; i < genes_.size(); ++i) {
      if (genes_[i].empty()) throw ParseError("gene vocabulary: empty identifier at position " + std::to_string(i));
      auto [it, inserted] = index_.emplace(genes_[i], i);
      if (!inserted) throw ParseError("gene vocabulary: duplicate identifier '" + genes_[i] + "'");
    }
  }

  std::size_t size() const { return genes_.size(); }
  const std::vector<std::string>& genes() const { return genes_; }
  const std::string& gene(std::size_t i) const { return genes_.at(i); }

  std::optional<std::size_t> find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::string fingerprint() const {
    Fnv1a h;
    h.update(std::uint64_t{genes_.size()});
    for (const auto& g : genes_) h.update(g);
    return h.hex();
  }

 private:
  std::vector<std::string> genes_;
  std::unordered_map<std::string, std::size_t> index_;
};

// One symbol per line; blank lines are skipped.
inline GeneVocabulary load_vocabulary(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open gene vocabulary '" + path + "'");
  std::vector<std::string> genes;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    genes.push_back(line);
  }
  if (genes.empty()) throw ParseError("gene vocabulary '" + path + "' is empty");
  return GeneVocabulary(std::move(genes));
}

inline void save_vocabulary(const GeneVocabulary& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  for (const auto& g : vocab.genes()) out << g << '\n';
}

struct RawGeneSet {
  std::string name;
  std::vector<std::size_t> members;  // sorted, unique
};

struct GmtDiagnostics {
  std::size_t lines = 0;
  std::size_t dropped = 0;  // symbols not in the vocabulary
  std::size_t duplicates = 0;
};

struct GmtResult {
  std::vector<RawGeneSet> sets;
  GmtDiagnostics diagnostics;
};

inline GmtResult parse_gmt(std::istream& in, const GeneVocabulary& vocab, const std::string& source = "<gmt>") {
  GmtResult result;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() < 3) {
      throw ParseError(source + ":" + std::to_string(line_no) + ": expected name, description and genes (" +
                       std::to_string(fields.size()) + " tab-separated fields)");
    }
    RawGeneSet set;
    set.name = fields[0];
    for (std::size_t f = 2; f < fields.size(); ++f) {
      if (fields[f].empty()) continue;
      if (auto idx = vocab.find(fields[f])) {
        set.members.push_back(*idx);
      } else {
        ++result.diagnostics.dropped;
      }
    }
    std::sort(set.members.begin(), set.members.end());
    auto last = std::unique(set.members.begin(), set.members.end());
    result.diagnostics.duplicates += static_cast<std::size_t>(set.members.end() - last);
    set.members.erase(last, set.members.end());
    result.sets.push_back(std::move(set));
    ++result.diagnostics.lines;
  }
  if (result.diagnostics.lines == 0) throw ParseError(source + ": empty gene-set file");
  return result;
}

inline GmtResult load_gmt(const std::string& path, const GeneVocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open GMT file '" + path + "'");
  return parse_gmt(in, vocab, path);
}

struct Pathway {
  std::string name;
  std::vector<std::size_t> members;
};

class PathwayCollection {
 public:
  PathwayCollection(std::size_t gene_count, std::vector<Pathway> pathways)
      : gene_count_(gene_count), pathways_(std::move(pathways)) {
    if (pathways_.empty()) throw ConfigError("pathway collection: no pathways retained (need P >= 1)");
    std::vector<char> covered(gene_count_, 0);
    for (const auto& p : pathways_) {
      if (p.members.empty()) throw ConfigError("pathway '" + p.name + "' is empty");
      for (std::size_t i = 0; i < p.members.size(); ++i) {
        if (p.members[i] >= gene_count_) throw ConfigError("pathway '" + p.name + "' has out-of-range gene index");
        if (i > 0 && p.members[i] <= p.members[i - 1])
          throw ConfigError("pathway '" + p.name + "' members must be sorted and unique");
        covered[p.members[i]] = 1;
      }
    }
    for (std::size_t g = 0; g < gene_count_; ++g)
      if (!covered[g]) background_.push_back(g);
    cover_count_.assign(gene_count_, 0);
    for (const auto& p : pathways_)
      for (auto g : p.members) ++cover_count_[g];
    for (auto g : background_) ++cover_count_[g];
  }

  std::size_t gene_count() const { return gene_count_; }
  std::size_t size() const { return pathways_.size(); }
  const std::vector<Pathway>& pathways() const { return pathways_; }
  const Pathway& pathway(std::size_t i) const { return pathways_.at(i); }
  const std::vector<std::size_t>& background() const { return background_; }
  // Number of homes (pathways plus background) of each gene.
  const std::vector<std::size_t>& cover_count() const { return cover_count_; }

  std::string fingerprint(const GeneVocabulary& vocab) const {
    Fnv1a h;
    h.update(vocab.fingerprint());
    h.update(std::uint64_t{pathways_.size()});
    for (const auto& p : pathways_) {
      h.update(p.name);
      h.update(std::uint64_t{p.members.size()});
      for (auto g : p.members) h.update(std::uint64_t{g});
    }
    return h.hex();
  }

 private:
  std::size_t gene_count_;
  std::vector<Pathway> pathways_;
  std::vector<std::size_t> background_;
  std::vector<std::size_t> cover_count_;
};

struct PathwayFilter {
  std::size_t min_size = 10;
  std::size_t max_size = 200;
};

inline PathwayCollection filter_pathways(const std::vector<RawGeneSet>& raw, const PathwayFilter& filter,
                                         const GeneVocabulary& vocab) {
  if (filter.min_size < 1) throw ConfigError("pathway filter: min_size must be >= 1");
  if (filter.max_size < filter.min_size) throw ConfigError("pathway filter: max_size must be >= min_size");
  std::vector<Pathway> kept;
  for (const auto& set : raw) {
    if (set.members.size() < filter.min_size || set.members.size() > filter.max_size) continue;
    kept.push_back({set.name, set.members});
  }
  if (kept.empty()) {
    throw ConfigError("pathway filter: no gene sets with size in [" + std::to_string(filter.min_size) + ", " +
                      std::to_string(filter.max_size) + "]");
  }
  return PathwayCollection(vocab.size(), std::move(kept));
}

// A_ij = 1 iff i != j and the two pathways share at least one gene.
inline Mat build_adjacency(const PathwayCollection& collection) {
  const auto p = static_cast<Eigen::Index>(collection.size());
  Mat a = Mat::Zero(p, p);
  // gene -> pathways containing it; avoids the quadratic set-intersection scan
  std::vector<std::vector<Eigen::Index>> homes(collection.gene_count());
  for (Eigen::Index i = 0; i < p; ++i)
    for (auto g : collection.pathway(static_cast<std::size_t>(i)).members) homes[g].push_back(i);
  for (const auto& list : homes)
    for (std::size_t u = 0; u < list.size(); ++u)
      for (std::size_t v = u + 1; v < list.size(); ++v) {
        a(list[u], list[v]) = 1.0;
        a(list[v], list[u]) = 1.0;
      }
  return a;
}

// D^(-1/2) (max(A, A^T) + I) D^(-1/2), D the degree diagonal of the self-looped graph.
inline Mat normalize_adjacency(const Mat& a) {
  require_shape(a.rows() == a.cols(), "normalize_adjacency: adjacency must be square");
  const auto p = a.rows();
  Mat s(p, p);
  for (Eigen::Index i = 0; i < p; ++i)
    for (Eigen::Index j = 0; j < p; ++j) s(i, j) = (i == j) ? 1.0 : std::max(a(i, j), a(j, i));
  Vec inv_sqrt(p);
  for (Eigen::Index i = 0; i < p; ++i) inv_sqrt(i) = 1.0 / std::sqrt(s.row(i).sum());
  Mat out(p, p);
  for (Eigen::Index i = 0; i < p; ++i)
    for (Eigen::Index j = 0; j < p; ++j) out(i, j) = inv_sqrt(i) * s(i, j) * inv_sqrt(j);
  // exact symmetry regardless of multiplication order
  for (Eigen::Index i = 0; i < p; ++i)
    for (Eigen::Index j = i + 1; j < p; ++j) out(j, i) = out(i, j);
  return out;
}

// Value standing in for -inf when added to attention logits.
inline constexpr double kMaskedLogit = std::numeric_limits<double>::lowest();

// Entries are 0 on edges and kMaskedLogit elsewhere.
inline Mat build_attention_mask(const Mat& a_norm) {
  require_shape(a_norm.rows() == a_norm.cols(), "build_attention_mask: matrix must be square");
  Mat m(a_norm.rows(), a_norm.cols());
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const double v = a_norm.data()[i];
    if (v < 0.0) throw ShapeError("build_attention_mask: negative entry in normalized adjacency");
    m.data()[i] = v > 0.0 ? 0.0 : kMaskedLogit;
  }
  return m;
}

inline bool is_masked(double mask_entry) { return mask_entry <= kMaskedLogit; }

struct PathwayGraph {
  Mat adjacency;
  Mat normalized;
  Mat mask;

  static PathwayGraph build(const PathwayCollection& collection) {
    PathwayGraph g;
    g.adjacency = build_adjacency(collection);
    g.normalized = normalize_adjacency(g.adjacency);
    g.mask = build_attention_mask(g.normalized);
    return g;
  }
};

// Inspection container {genes, pathways, background, edges}.
inline nlohmann::json graph_to_json(const GeneVocabulary& vocab, const PathwayCollection& collection,
                                    const PathwayGraph& graph) {
  nlohmann::json j;
  j["genes"] = vocab.genes();
  auto& pw = j["pathways"] = nlohmann::json::array();
  for (const auto& p : collection.pathways()) pw.push_back({{"name", p.name}, {"members", p.members}});
  j["background"] = collection.background();
  auto& edges = j["edges"] = nlohmann::json::array();
  for (Eigen::Index i = 0; i < graph.adjacency.rows(); ++i)
    for (Eigen::Index j2 = i + 1; j2 < graph.adjacency.cols(); ++j2)
      if (graph.adjacency(i, j2) != 0.0) edges.push_back({i, j2});
  j["fingerprint"] = collection.fingerprint(vocab);
  return j;
}

}  // namespace rnafm
