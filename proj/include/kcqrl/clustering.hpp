#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "kcqrl/corpus.hpp"
#include "kcqrl/errors.hpp"
#include "kcqrl/numerics.hpp"
#include "kcqrl/util.hpp"

namespace kcqrl {

// KC texts are keyed by their lowercased, trimmed form.
inline std::string kc_key(std::string_view text) { return to_lower_ascii(trim(text)); }

// Dense KC ids: position in the sorted list of distinct keys across a corpus.
inline std::vector<std::string> kc_universe(const std::vector<AnnotatedQuestion>& corpus) {
  std::vector<std::string> keys;
  for (const auto& q : corpus)
    for (const auto& c : q.kcs) keys.push_back(kc_key(c));
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  return keys;
}

struct ClusterParams {
  double threshold = 0.15;  // cosine distance cutoff for single linkage
  int min_cluster_size = 2;
};

struct ClusterAssignment {
  std::vector<int> cluster_of;         // indexed by KcId
  std::vector<std::string> kc_texts;   // indexed by KcId

  std::size_t size() const { return cluster_of.size(); }

  int cluster(KcId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= cluster_of.size()) {
      throw InputError("unknown kc id " + std::to_string(id));
    }
    return cluster_of[static_cast<std::size_t>(id)];
  }

  KcId id_of(std::string_view text) const {
    const auto key = kc_key(text);
    auto it = std::lower_bound(kc_texts.begin(), kc_texts.end(), key);
    if (it == kc_texts.end() || *it != key) throw InputError("kc not in cluster map: '" + std::string(text) + "'");
    return static_cast<KcId>(it - kc_texts.begin());
  }

  int cluster_of_text(std::string_view text) const { return cluster(id_of(text)); }

  int num_clusters() const {
    return cluster_of.empty() ? 0 : *std::max_element(cluster_of.begin(), cluster_of.end()) + 1;
  }
};

inline bool same_cluster(const ClusterAssignment& a, KcId kc1, KcId kc2) { return a.cluster(kc1) == a.cluster(kc2); }

// ---- embedding providers ----

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::size_t dim() const = 0;
  // Embeds kcs[i] into row i.
  virtual DenseMatrix embed(const std::vector<std::string>& kcs) const = 0;
};

// Signed feature hashing of word tokens.
class HashedTokenProvider : public EmbeddingProvider {
 public:
  explicit HashedTokenProvider(std::size_t dim = 256) : dim_(dim) {
    if (dim < 2) throw InputError("hashed provider: dim must be >= 2");
  }
  std::size_t dim() const override { return dim_; }
  DenseMatrix embed(const std::vector<std::string>& kcs) const override {
    DenseMatrix m(kcs.size(), dim_);
    for (std::size_t i = 0; i < kcs.size(); ++i) {
      for (const auto& tok : tokenize_words(kcs[i])) {
        const auto h = fnv1a64(tok);
        m(i, h % dim_) += (h >> 63) ? -1.0 : 1.0;
      }
    }
    return m;
  }

 private:
  std::size_t dim_;
};

// Vectors read from a file: header "dim=<d>", then "<kc id> f1 ... fd" per KC.
class ExternalFileProvider : public EmbeddingProvider {
 public:
  explicit ExternalFileProvider(const std::filesystem::path& path) {
    const auto lines = split_lines(read_file(path));
    std::size_t ln = 0;
    while (ln < lines.size() && trim(lines[ln]).empty()) ++ln;
    if (ln == lines.size()) throw InputError(path.string() + ": empty embedding file");
    const auto header = trim(lines[ln]);
    if (header.substr(0, 4) != "dim=") throw InputError(path.string() + ": expected 'dim=<d>' header");
    dim_ = static_cast<std::size_t>(parse_double(header.substr(4)));
    if (dim_ < 2) throw InputError(path.string() + ": dim must be >= 2");
    for (++ln; ln < lines.size(); ++ln) {
      if (trim(lines[ln]).empty()) continue;
      const auto tok = split_ws(lines[ln]);
      if (tok.size() != dim_ + 1) {
        throw InputError(path.string() + " line " + std::to_string(ln + 1) + ": expected " +
                         std::to_string(dim_ + 1) + " fields, got " + std::to_string(tok.size()));
      }
      const auto id = static_cast<KcId>(parse_double(tok[0]));
      Vec v;
      for (std::size_t d = 1; d < tok.size(); ++d) v.push_back(parse_double(tok[d]));
      if (!rows_.emplace(id, std::move(v)).second) {
        throw InputError(path.string() + ": duplicate kc id " + std::to_string(id));
      }
    }
  }

  std::size_t dim() const override { return dim_; }

  // kcs[i] is looked up under id i; the file must hold exactly one row per KC.
  DenseMatrix embed(const std::vector<std::string>& kcs) const override {
    if (rows_.size() != kcs.size()) {
      throw InputError("external embeddings: file has " + std::to_string(rows_.size()) + " rows for " +
                       std::to_string(kcs.size()) + " kcs");
    }
    DenseMatrix m(kcs.size(), dim_);
    for (std::size_t i = 0; i < kcs.size(); ++i) {
      auto it = rows_.find(static_cast<KcId>(i));
      if (it == rows_.end()) throw InputError("external embeddings: missing kc id " + std::to_string(i));
      std::copy(it->second.begin(), it->second.end(), m.row(i).begin());
    }
    return m;
  }

 private:
  std::size_t dim_ = 0;
  std::map<KcId, Vec> rows_;
};

inline DenseMatrix embed_kc_texts(const EmbeddingProvider& provider, const std::vector<std::string>& kcs) {
  if (kcs.empty()) throw InputError("embed_kc_texts: no kcs");
  if (provider.dim() < 2) throw InputError("embed_kc_texts: provider dimension must be >= 2");
  DenseMatrix m = provider.embed(kcs);
  if (m.rows() != kcs.size() || m.cols() != provider.dim()) {
    throw InputError("embed_kc_texts: provider returned " + shape_str(m));
  }
  if (!m.all_finite()) throw NumericalError("embed_kc_texts: non-finite embedding");
  return m;
}

// ---- single-linkage clustering ----

namespace detail {

struct UnionFind {
  std::vector<std::size_t> parent;
  explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

}  // namespace detail

// Cosine distance 1 - cos; zero vectors are at distance 1 from everything.
inline double cosine_distance(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) return 1.0;
  return 1.0 - dot(a, b) / (na * nb);
}

// Components of the graph joining rows at cosine distance <= threshold.
// Components smaller than min_cluster_size become singletons. Cluster ids
// are assigned in order of each cluster's lowest member index.
inline ClusterAssignment cluster_kcs(const DenseMatrix& emb, const ClusterParams& params,
                                     std::vector<std::string> kc_texts = {}) {
  if (params.min_cluster_size < 2) throw InputError("cluster_kcs: min_cluster_size must be >= 2");
  if (!(params.threshold > 0.0 && params.threshold < 1.0)) throw InputError("cluster_kcs: threshold must be in (0,1)");
  if (!emb.all_finite()) throw NumericalError("cluster_kcs: non-finite embeddings");
  const std::size_t n = emb.rows();
  detail::UnionFind uf(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (cosine_distance(emb.row(i), emb.row(j)) <= params.threshold) uf.unite(i, j);

  std::vector<std::size_t> comp_size(n, 0);
  for (std::size_t i = 0; i < n; ++i) ++comp_size[uf.find(i)];

  ClusterAssignment out;
  out.cluster_of.assign(n, -1);
  std::unordered_map<std::size_t, int> id_of_root;
  int next = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto root = uf.find(i);
    if (comp_size[root] < static_cast<std::size_t>(params.min_cluster_size)) {
      out.cluster_of[i] = next++;
      continue;
    }
    auto [it, inserted] = id_of_root.emplace(root, next);
    if (inserted) ++next;
    out.cluster_of[i] = it->second;
  }
  out.kc_texts = std::move(kc_texts);
  return out;
}

// Clusters every distinct KC of a corpus.
inline ClusterAssignment cluster_corpus(const std::vector<AnnotatedQuestion>& corpus, const EmbeddingProvider& provider,
                                        const ClusterParams& params) {
  auto texts = kc_universe(corpus);
  const auto emb = embed_kc_texts(provider, texts);
  return cluster_kcs(emb, params, std::move(texts));
}

// A map with every KC in its own cluster; the indicator then never masks.
inline ClusterAssignment singleton_clusters(const std::vector<AnnotatedQuestion>& corpus) {
  ClusterAssignment a;
  a.kc_texts = kc_universe(corpus);
  a.cluster_of.resize(a.kc_texts.size());
  std::iota(a.cluster_of.begin(), a.cluster_of.end(), 0);
  return a;
}

inline std::string serialize_clusters(const ClusterAssignment& a) {
  nlohmann::ordered_json j;
  j["version"] = 1;
  auto arr = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < a.size(); ++i) {
    nlohmann::ordered_json e;
    e["id"] = i;
    e["text"] = i < a.kc_texts.size() ? a.kc_texts[i] : "";
    e["cluster"] = a.cluster_of[i];
    arr.push_back(std::move(e));
  }
  j["kcs"] = std::move(arr);
  return j.dump(1) + "\n";
}

inline ClusterAssignment parse_clusters(std::string_view text) {
  ClusterAssignment a;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("version").get<int>() != 1) throw InputError("cluster file: unsupported version");
    const auto& arr = j.at("kcs");
    a.cluster_of.resize(arr.size());
    a.kc_texts.resize(arr.size());
    for (const auto& e : arr) {
      const auto id = e.at("id").get<std::size_t>();
      if (id >= arr.size()) throw InputError("cluster file: kc id out of range");
      a.cluster_of[id] = e.at("cluster").get<int>();
      a.kc_texts[id] = e.at("text").get<std::string>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("cluster file: ") + e.what());
  }
  if (!std::is_sorted(a.kc_texts.begin(), a.kc_texts.end())) throw InputError("cluster file: kc texts not sorted by id");
  return a;
}

}  // namespace kcqrl
