#pragma once

// Category meta-graph: word embeddings, cosine adjacency and the
// row-normalized propagation matrix.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fskt/tensor.hpp"

namespace fskt {

class WordEmbeddingTable {
 public:
  std::size_t dimension() const { return dimension_; }
  std::size_t size() const { return vectors_.size(); }
  bool contains(const std::string& token) const { return vectors_.count(token) != 0; }
  // Throws LookupError naming the token.
  const std::vector<double>& at(const std::string& token) const;

  // Throws ValidationError on a zero-norm vector or a dimension mismatch.
  void insert(const std::string& token, std::vector<double> vector);

 private:
  std::size_t dimension_ = 0;
  std::map<std::string, std::vector<double>> vectors_;
};

// Parses `token v1 ... vd` lines. The dimension comes from the first entry;
// a later line with a different count is a ParseError carrying its line
// number. With a filter, only listed tokens are kept, and every listed token
// must be present (LookupError otherwise).
WordEmbeddingTable load_embeddings(std::istream& in,
                                   const std::optional<std::set<std::string>>& filter = {});
WordEmbeddingTable load_embeddings_file(const std::filesystem::path& path,
                                        const std::optional<std::set<std::string>>& filter = {});

// Detector category names, their embedding tokens and annotation spellings.
class AliasTable {
 public:
  // Lines: `name token [annotation-name ...]`, `#` comments.
  static AliasTable parse(std::istream& in);
  static AliasTable load(const std::filesystem::path& path);

  // Embedding token for a detector name. Throws LookupError listing the
  // known names.
  std::string token(const std::string& name) const;
  // Detector name for a name found in annotation files (detector names map
  // to themselves). Throws LookupError.
  std::string canonical(const std::string& annotation_name) const;
  std::vector<std::string> names() const;

 private:
  std::map<std::string, std::string> tokens_;
  std::map<std::string, std::string> canonical_;
};

// Ordered category list with a base/novel designation.
class CategorySet {
 public:
  CategorySet() = default;
  CategorySet(std::vector<std::string> names, std::vector<bool> novel, int split = 0);

  // The 20 VOC categories in their standard order with the novel set of
  // split 1, 2 or 3. Throws ConfigError for any other split.
  static CategorySet voc(int split);

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  bool is_novel(std::size_t i) const { return novel_.at(i); }
  int split() const { return split_; }
  // Throws LookupError.
  std::size_t index_of(const std::string& name) const;
  std::vector<std::size_t> base_indices() const;
  std::vector<std::size_t> novel_indices() const;
  // Categories at the given indices, in that order.
  CategorySet subset(const std::vector<std::size_t>& indices) const;

 private:
  std::vector<std::string> names_;
  std::vector<bool> novel_;
  int split_ = 0;
};

// Dense C x C matrices stored row-major.
struct MetaGraph {
  CategorySet categories;
  std::vector<double> adjacency;
  std::vector<double> propagation;

  std::size_t size() const { return categories.size(); }
  double a(std::size_t i, std::size_t j) const { return adjacency[i * size() + j]; }
  double p(std::size_t i, std::size_t j) const { return propagation[i * size() + j]; }
  Tensor propagation_tensor() const;
  // Induced subgraph on the given categories, re-normalized.
  MetaGraph subgraph(const std::vector<std::size_t>& indices) const;
};

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);

// Divides each row by its sum. Throws NumericalError on a nonpositive sum.
std::vector<double> row_normalize(const std::vector<double>& a, std::size_t n);

// A[i][j] = max(0, cos(w_i, w_j)), diagonal 1, one evaluation per pair.
MetaGraph adjacency_from_vectors(const std::vector<std::vector<double>>& vectors,
                                 const CategorySet& categories);
MetaGraph build_adjacency(const WordEmbeddingTable& table, const AliasTable& aliases,
                          const CategorySet& categories);
// Uniform(0,1) upper triangle mirrored below, unit diagonal.
MetaGraph random_adjacency(const CategorySet& categories, std::uint64_t seed);

// Header of category names, then one row per category, 17 significant digits.
void write_matrix_csv(std::ostream& out, const CategorySet& categories,
                      const std::vector<double>& matrix);

struct GraphDiagnostics {
  double max_asymmetry = 0.0;
  double max_row_sum_error = 0.0;
  double min_entry = 0.0;
  double max_entry = 0.0;
  double max_diagonal_error = 0.0;
};
GraphDiagnostics diagnose(const MetaGraph& graph);

}  // namespace fskt
