#include "fskt/knowledge_graph.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "fskt/errors.hpp"
#include "fskt/rng.hpp"

namespace fskt {

namespace {

double squared_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

std::vector<std::string> split_whitespace(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> out;
  for (std::string field; in >> field;) out.push_back(field);
  return out;
}

std::string strip_comment(const std::string& line) {
  const auto hash = line.find('#');
  return hash == std::string::npos ? line : line.substr(0, hash);
}

double parse_double(const std::string& text, std::size_t line) {
  double value = 0.0;
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || !std::isfinite(value)) {
    throw ParseError("not a finite number: '" + text + "'", line);
  }
  return value;
}

}  // namespace

// ---- embeddings ------------------------------------------------------------

const std::vector<double>& WordEmbeddingTable::at(const std::string& token) const {
  auto it = vectors_.find(token);
  if (it == vectors_.end()) throw LookupError("embedding token not found: '" + token + "'");
  return it->second;
}

void WordEmbeddingTable::insert(const std::string& token, std::vector<double> vector) {
  if (vector.empty()) throw ValidationError("empty embedding for '" + token + "'");
  if (dimension_ != 0 && vector.size() != dimension_) {
    throw ValidationError("embedding for '" + token + "' has dimension " +
                          std::to_string(vector.size()) + ", expected " +
                          std::to_string(dimension_));
  }
  if (squared_norm(vector) == 0.0) throw ValidationError("zero-norm embedding for '" + token + "'");
  dimension_ = vector.size();
  vectors_[token] = std::move(vector);
}

WordEmbeddingTable load_embeddings(std::istream& in,
                                   const std::optional<std::set<std::string>>& filter) {
  WordEmbeddingTable table;
  std::size_t dim = 0;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    auto fields = split_whitespace(line);
    if (fields.empty()) continue;
    if (fields.size() < 2) throw ParseError("token '" + fields[0] + "' has no values", line_no);
    const std::size_t d = fields.size() - 1;
    if (dim == 0) {
      dim = d;
    } else if (d != dim) {
      throw ParseError("expected " + std::to_string(dim) + " values, found " + std::to_string(d),
                       line_no);
    }
    if (filter && !filter->count(fields[0])) continue;
    std::vector<double> v(d);
    for (std::size_t i = 0; i < d; ++i) v[i] = parse_double(fields[i + 1], line_no);
    if (squared_norm(v) == 0.0) throw ParseError("zero-norm vector for '" + fields[0] + "'", line_no);
    table.insert(fields[0], std::move(v));
  }
  if (filter) {
    for (const auto& token : *filter) {
      if (!table.contains(token)) throw LookupError("embedding token not found: '" + token + "'");
    }
  }
  return table;
}

WordEmbeddingTable load_embeddings_file(const std::filesystem::path& path,
                                        const std::optional<std::set<std::string>>& filter) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open embedding file " + path.string());
  return load_embeddings(in, filter);
}

// ---- aliases ---------------------------------------------------------------

AliasTable AliasTable::parse(std::istream& in) {
  AliasTable table;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    auto fields = split_whitespace(strip_comment(line));
    if (fields.empty()) continue;
    if (fields.size() < 2) throw ParseError("alias line needs a name and a token", line_no);
    const std::string& name = fields[0];
    if (table.tokens_.count(name)) throw ParseError("duplicate category '" + name + "'", line_no);
    table.tokens_[name] = fields[1];
    table.canonical_[name] = name;
    for (std::size_t i = 2; i < fields.size(); ++i) {
      auto [it, fresh] = table.canonical_.emplace(fields[i], name);
      if (!fresh && it->second != name) {
        throw ParseError("annotation name '" + fields[i] + "' maps to two categories", line_no);
      }
    }
  }
  if (table.tokens_.empty()) throw ParseError("alias table is empty");
  return table;
}

AliasTable AliasTable::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open alias table " + path.string());
  return parse(in);
}

std::vector<std::string> AliasTable::names() const {
  std::vector<std::string> out;
  for (const auto& [name, token] : tokens_) out.push_back(name);
  return out;
}

std::string AliasTable::token(const std::string& name) const {
  auto it = tokens_.find(name);
  if (it != tokens_.end()) return it->second;
  std::string known;
  for (const auto& [n, t] : tokens_) known += (known.empty() ? "" : ", ") + n + "->" + t;
  throw LookupError("unknown category '" + name + "'; known aliases: " + known);
}

std::string AliasTable::canonical(const std::string& annotation_name) const {
  auto it = canonical_.find(annotation_name);
  if (it == canonical_.end()) throw LookupError("unknown category name '" + annotation_name + "'");
  return it->second;
}

// ---- categories ------------------------------------------------------------

CategorySet::CategorySet(std::vector<std::string> names, std::vector<bool> novel, int split)
    : names_(std::move(names)), novel_(std::move(novel)), split_(split) {
  if (names_.size() != novel_.size()) throw ValidationError("category set: flag count mismatch");
  for (std::size_t i = 0; i < names_.size(); ++i)
    for (std::size_t j = i + 1; j < names_.size(); ++j)
      if (names_[i] == names_[j]) throw ValidationError("duplicate category '" + names_[i] + "'");
}

CategorySet CategorySet::voc(int split) {
  static const std::vector<std::string> kNames = {
      "aero", "bike",  "bird",  "boat",   "bottle", "bus",   "car",
      "cat",  "chair", "cow",   "table",  "dog",    "horse", "mbike",
      "person", "plant", "sheep", "sofa", "train",  "tv"};
  std::set<std::string> novel;
  switch (split) {
    case 1: novel = {"bird", "bus", "cow", "mbike", "sofa"}; break;
    case 2: novel = {"aero", "bottle", "cow", "horse", "sofa"}; break;
    case 3: novel = {"boat", "cat", "mbike", "sheep", "sofa"}; break;
    default: throw ConfigError("split must be 1, 2 or 3, got " + std::to_string(split));
  }
  std::vector<bool> flags;
  for (const auto& n : kNames) flags.push_back(novel.count(n) != 0);
  return CategorySet(kNames, flags, split);
}

std::size_t CategorySet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return i;
  throw LookupError("category '" + name + "' is not in the category set");
}

std::vector<std::size_t> CategorySet::base_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < size(); ++i)
    if (!novel_[i]) out.push_back(i);
  return out;
}

std::vector<std::size_t> CategorySet::novel_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < size(); ++i)
    if (novel_[i]) out.push_back(i);
  return out;
}

CategorySet CategorySet::subset(const std::vector<std::size_t>& indices) const {
  std::vector<std::string> names;
  std::vector<bool> flags;
  for (std::size_t i : indices) {
    names.push_back(names_.at(i));
    flags.push_back(novel_.at(i));
  }
  return CategorySet(std::move(names), std::move(flags), split_);
}

// ---- graph -----------------------------------------------------------------

Tensor MetaGraph::propagation_tensor() const {
  return Tensor::matrix(size(), size(), propagation);
}

MetaGraph MetaGraph::subgraph(const std::vector<std::size_t>& indices) const {
  const std::size_t n = indices.size();
  MetaGraph g;
  g.categories = categories.subset(indices);
  g.adjacency.resize(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) g.adjacency[i * n + j] = a(indices[i], indices[j]);
  g.propagation = row_normalize(g.adjacency, n);
  return g;
}

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionError("cosine: vectors of different length");
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  const double denom = std::sqrt(squared_norm(a)) * std::sqrt(squared_norm(b));
  if (denom == 0.0) throw NumericalError("cosine: zero-norm vector");
  return dot / denom;
}

std::vector<double> row_normalize(const std::vector<double>& a, std::size_t n) {
  if (a.size() != n * n) throw DimensionError("row_normalize: matrix is not square");
  std::vector<double> out(a);
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += a[i * n + j];
    if (!(total > 0.0)) {
      throw NumericalError("row_normalize: row " + std::to_string(i) + " sums to " +
                           std::to_string(total));
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] / total;
  }
  return out;
}

MetaGraph adjacency_from_vectors(const std::vector<std::vector<double>>& vectors,
                                 const CategorySet& categories) {
  const std::size_t n = categories.size();
  if (n == 0) throw ValidationError("empty category set");
  if (vectors.size() != n) throw DimensionError("one embedding per category required");
  MetaGraph g;
  g.categories = categories;
  g.adjacency.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    g.adjacency[i * n + i] = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double c = std::max(0.0, cosine_similarity(vectors[i], vectors[j]));
      g.adjacency[i * n + j] = c;
      g.adjacency[j * n + i] = c;
    }
  }
  g.propagation = row_normalize(g.adjacency, n);
  return g;
}

MetaGraph build_adjacency(const WordEmbeddingTable& table, const AliasTable& aliases,
                          const CategorySet& categories) {
  std::vector<std::vector<double>> vectors;
  for (const auto& name : categories.names()) vectors.push_back(table.at(aliases.token(name)));
  return adjacency_from_vectors(vectors, categories);
}

MetaGraph random_adjacency(const CategorySet& categories, std::uint64_t seed) {
  const std::size_t n = categories.size();
  if (n == 0) throw ValidationError("empty category set");
  Rng rng(seed, "random-graph");
  MetaGraph g;
  g.categories = categories;
  g.adjacency.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    g.adjacency[i * n + i] = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double u = rng.uniform();
      g.adjacency[i * n + j] = u;
      g.adjacency[j * n + i] = u;
    }
  }
  g.propagation = row_normalize(g.adjacency, n);
  return g;
}

void write_matrix_csv(std::ostream& out, const CategorySet& categories,
                      const std::vector<double>& matrix) {
  const std::size_t n = categories.size();
  if (matrix.size() != n * n) throw DimensionError("matrix does not match category count");
  out << "category";
  for (const auto& name : categories.names()) out << ',' << name;
  out << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < n; ++i) {
    out << categories.name(i);
    for (std::size_t j = 0; j < n; ++j) out << ',' << matrix[i * n + j];
    out << '\n';
  }
}

GraphDiagnostics diagnose(const MetaGraph& graph) {
  const std::size_t n = graph.size();
  GraphDiagnostics d;
  d.min_entry = 1.0;
  d.max_entry = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      d.max_asymmetry = std::max(d.max_asymmetry, std::abs(graph.a(i, j) - graph.a(j, i)));
      d.min_entry = std::min(d.min_entry, graph.a(i, j));
      d.max_entry = std::max(d.max_entry, graph.a(i, j));
      row += graph.p(i, j);
    }
    d.max_row_sum_error = std::max(d.max_row_sum_error, std::abs(row - 1.0));
    d.max_diagonal_error = std::max(d.max_diagonal_error, std::abs(graph.a(i, i) - 1.0));
  }
  return d;
}

}  // namespace fskt
