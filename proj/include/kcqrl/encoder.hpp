#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kcqrl/clustering.hpp"
#include "kcqrl/corpus.hpp"
#include "kcqrl/errors.hpp"
#include "kcqrl/numerics.hpp"
#include "kcqrl/util.hpp"

namespace kcqrl {

enum class Role { question = 0, step = 1, kc = 2 };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::question: return "question";
    case Role::step: return "step";
    case Role::kc: return "kc";
  }
  return "?";
}

// Word-level vocabulary built once from a corpus, then frozen. Id 0 is unk.
class Tokenizer {
 public:
  static constexpr int kUnk = 0;

  Tokenizer() = default;
  explicit Tokenizer(std::vector<std::string> tokens) : tokens_(std::move(tokens)) { reindex(); }

  static Tokenizer from_corpus(const std::vector<AnnotatedQuestion>& corpus) {
    std::vector<std::string> toks;
    auto add = [&](const std::string& s) {
      for (auto& t : tokenize_words(s)) toks.push_back(std::move(t));
    };
    for (const auto& q : corpus) {
      add(q.question.text);
      for (const auto& s : q.steps) add(s);
      for (const auto& c : q.kcs) add(c);
    }
    std::sort(toks.begin(), toks.end());
    toks.erase(std::unique(toks.begin(), toks.end()), toks.end());
    return Tokenizer(std::move(toks));
  }

  std::size_t vocab_size() const { return tokens_.size() + 1; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  // Non-empty text without any word token maps to a single unk.
  std::vector<int> encode(std::string_view text) const {
    if (trim(text).empty()) throw InputError("encode: empty text");
    std::vector<int> ids;
    for (const auto& t : tokenize_words(text)) {
      auto it = index_.find(t);
      ids.push_back(it == index_.end() ? kUnk : it->second);
    }
    if (ids.empty()) ids.push_back(kUnk);
    return ids;
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<int>(i) + 1);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct EncoderConfig {
  std::size_t token_dim = 64;
  std::size_t hidden_dim = 128;
  std::size_t emb_dim = 64;
  double dropout = 0.1;
};

// Mean-pooled token embeddings plus a role vector, then
// linear -> tanh -> linear.
struct EncoderWeights {
  EncoderConfig config;
  Param tok;    // V x token_dim
  Param role;   // 3 x token_dim
  Param w1;     // hidden x token_dim
  Param b1;     // hidden x 1
  Param w2;     // emb x hidden
  Param b2;     // emb x 1

  EncoderWeights() = default;
  EncoderWeights(const EncoderConfig& cfg, std::size_t vocab, std::uint64_t seed)
      : config(cfg),
        tok(vocab, cfg.token_dim),
        role(3, cfg.token_dim),
        w1(cfg.hidden_dim, cfg.token_dim),
        b1(cfg.hidden_dim, 1),
        w2(cfg.emb_dim, cfg.hidden_dim),
        b2(cfg.emb_dim, 1) {
    Rng rng(seed);
    fill_uniform(tok.value, 0.5, rng);
    fill_uniform(role.value, 0.5, rng);
    fill_uniform(w1.value, std::sqrt(6.0 / static_cast<double>(cfg.token_dim + cfg.hidden_dim)), rng);
    fill_uniform(w2.value, std::sqrt(6.0 / static_cast<double>(cfg.hidden_dim + cfg.emb_dim)), rng);
  }

  std::vector<Param*> params() { return {&tok, &role, &w1, &b1, &w2, &b2}; }
  std::vector<const Param*> params() const { return {&tok, &role, &w1, &b1, &w2, &b2}; }
  static std::vector<std::string> param_names() { return {"tok", "role", "w1", "b1", "w2", "b2"}; }

  void zero_grad() {
    for (Param* p : params()) p->zero_grad();
  }

  bool all_finite() const {
    for (const Param* p : params())
      if (!p->value.all_finite()) return false;
    return true;
  }
};

struct Encoder {
  Tokenizer tokenizer;
  EncoderWeights weights;
};

inline Encoder make_encoder(const std::vector<AnnotatedQuestion>& corpus, const EncoderConfig& cfg,
                            std::uint64_t seed) {
  Encoder e;
  e.tokenizer = Tokenizer::from_corpus(corpus);
  e.weights = EncoderWeights(cfg, e.tokenizer.vocab_size(), seed);
  return e;
}

// Forward activations kept for the backward pass.
struct EncodeCache {
  std::vector<int> ids;
  Role role = Role::question;
  Vec mask;    // dropout scale per pooled coordinate (empty in eval mode)
  Vec pooled;  // after dropout
  Vec hidden;  // tanh output
  Vec z;
};

// rng == nullptr selects eval mode (no dropout).
inline EncodeCache encode_cached(const Encoder& enc, Role role, std::string_view text, Rng* rng = nullptr) {
  const auto& w = enc.weights;
  const std::size_t d = w.config.token_dim;
  EncodeCache c;
  c.ids = enc.tokenizer.encode(text);
  c.role = role;
  c.pooled.assign(d, 0.0);
  const double inv = 1.0 / static_cast<double>(c.ids.size());
  for (int id : c.ids) axpy(inv, w.tok.value.row(static_cast<std::size_t>(id)), c.pooled);
  axpy(1.0, w.role.value.row(static_cast<std::size_t>(role)), c.pooled);
  if (rng && w.config.dropout > 0.0) {
    std::bernoulli_distribution keep(1.0 - w.config.dropout);
    const double scale = 1.0 / (1.0 - w.config.dropout);
    c.mask.resize(d);
    for (std::size_t k = 0; k < d; ++k) {
      c.mask[k] = keep(*rng) ? scale : 0.0;
      c.pooled[k] *= c.mask[k];
    }
  }
  c.hidden = matvec(w.w1.value, c.pooled);
  for (std::size_t h = 0; h < c.hidden.size(); ++h) c.hidden[h] = std::tanh(c.hidden[h] + w.b1.value(h, 0));
  c.z = matvec(w.w2.value, c.hidden);
  for (std::size_t k = 0; k < c.z.size(); ++k) c.z[k] += w.b2.value(k, 0);
  return c;
}

inline Vec encode(const Encoder& enc, Role role, std::string_view text) { return encode_cached(enc, role, text).z; }

// Accumulates parameter gradients for dL/dz into weights' grad buffers.
inline void encode_backward(EncoderWeights& w, const EncodeCache& c, std::span<const double> dz) {
  add_outer(w.w2.grad, dz, c.hidden);
  axpy(1.0, dz, w.b2.grad.values());
  Vec da(c.hidden.size(), 0.0);
  matvec_t_acc(w.w2.value, dz, da);
  for (std::size_t h = 0; h < da.size(); ++h) da[h] *= 1.0 - c.hidden[h] * c.hidden[h];
  add_outer(w.w1.grad, da, c.pooled);
  axpy(1.0, da, w.b1.grad.values());
  Vec du(c.pooled.size(), 0.0);
  matvec_t_acc(w.w1.value, da, du);
  if (!c.mask.empty())
    for (std::size_t k = 0; k < du.size(); ++k) du[k] *= c.mask[k];
  axpy(1.0, du, w.role.grad.row(static_cast<std::size_t>(c.role)));
  const double inv = 1.0 / static_cast<double>(c.ids.size());
  for (int id : c.ids) axpy(inv, du, w.tok.grad.row(static_cast<std::size_t>(id)));
}

// ---- similarity & contrastive losses ----

inline double cosine(std::span<const double> u, std::span<const double> v) {
  const double nu = norm(u), nv = norm(v);
  if (nu == 0.0 || nv == 0.0) throw NumericalError("similarity of a zero-norm vector");
  return dot(u, v) / (nu * nv);
}

// exp(cos(u, v) / tau)
inline double sim(std::span<const double> u, std::span<const double> v, double tau) {
  if (!(tau > 0.0)) throw InputError("sim: tau must be > 0");
  return std::exp(cosine(u, v) / tau);
}

// KC vectors of a batch, grouped by question, with their cluster ids.
struct InBatchKcs {
  std::vector<std::vector<Vec>> vecs;
  std::vector<std::vector<int>> cluster;
};

using KcRef = std::pair<std::size_t, std::size_t>;  // (question in batch, kc index), 0-based

// Negatives for the question anchor of (i, j): KCs of the other questions,
// minus those sharing the positive's cluster when masking.
inline std::vector<KcRef> question_negative_pool(const InBatchKcs& b, std::size_t i, std::size_t j, bool mask) {
  std::vector<KcRef> pool;
  const int pos_cluster = b.cluster[i][j];
  for (std::size_t ip = 0; ip < b.vecs.size(); ++ip) {
    if (ip == i) continue;
    for (std::size_t jp = 0; jp < b.vecs[ip].size(); ++jp)
      if (!mask || b.cluster[ip][jp] != pos_cluster) pool.emplace_back(ip, jp);
  }
  return pool;
}

// Negatives for a step anchor of (i, j): every KC in the batch, including
// question i's own, except those in the positive's cluster. The positive is
// excluded only through the indicator, so without masking it is part of the
// sum as well.
inline std::vector<KcRef> step_negative_pool(const InBatchKcs& b, std::size_t i, std::size_t j, bool mask) {
  std::vector<KcRef> pool;
  const int pos_cluster = b.cluster[i][j];
  for (std::size_t ip = 0; ip < b.vecs.size(); ++ip)
    for (std::size_t jp = 0; jp < b.vecs[ip].size(); ++jp)
      if (!mask || b.cluster[ip][jp] != pos_cluster) pool.emplace_back(ip, jp);
  return pool;
}

// -log( sim(a,pos) / (sim(a,pos) + sum sim(a,neg)) ), evaluated as lse - s_pos.
inline double contrastive_term(std::span<const double> anchor, const InBatchKcs& b, KcRef positive,
                               const std::vector<KcRef>& negatives, double tau) {
  if (!(tau > 0.0)) throw InputError("tau must be > 0");
  Vec logits;
  logits.reserve(negatives.size() + 1);
  logits.push_back(cosine(anchor, b.vecs[positive.first][positive.second]) / tau);
  for (const auto& [ip, jp] : negatives) logits.push_back(cosine(anchor, b.vecs[ip][jp]) / tau);
  return log_sum_exp(logits) - logits[0];
}

inline double loss_question(std::span<const double> z_q, const InBatchKcs& b, std::size_t i, std::size_t j,
                            double tau, bool mask = true) {
  return contrastive_term(z_q, b, {i, j}, question_negative_pool(b, i, j, mask), tau);
}

inline double loss_step(std::span<const double> z_s, const InBatchKcs& b, std::size_t i, std::size_t j, double tau,
                        bool mask = true) {
  return contrastive_term(z_s, b, {i, j}, step_negative_pool(b, i, j, mask), tau);
}

struct ClLossConfig {
  double tau = 0.1;
  double alpha = 1.0;
  bool mask = true;  // false drops the false-negative indicator
};

struct ClTrainConfig {
  double tau = 0.1;
  double alpha = 1.0;
  std::size_t batch_size = 32;
  int epochs = 50;
  double lr = 5e-5;
  double dropout = 0.1;
  std::uint64_t seed = 0;
  bool mask = true;

  ClLossConfig loss() const { return {tau, alpha, mask}; }
};

struct ClLossResult {
  double loss = 0.0;
  double question_term = 0.0;  // batch mean of L_question
  double step_term = 0.0;      // batch mean of L_step (before alpha)
};

namespace detail {

// d cos(a, c) / da = (c_hat - cos * a_hat) / |a|
inline void add_cosine_grad(std::span<const double> a, std::span<const double> c, double coeff, std::span<double> da) {
  const double na = norm(a), nc = norm(c);
  if (na == 0.0 || nc == 0.0) throw NumericalError("similarity of a zero-norm vector");
  const double cs = dot(a, c) / (na * nc);
  for (std::size_t k = 0; k < a.size(); ++k) da[k] += coeff * (c[k] / nc - cs * a[k] / na) / na;
}

// Adds weight * d(term)/d(vectors) for one contrastive term.
inline void contrastive_term_grad(std::span<const double> anchor, std::span<double> d_anchor, const InBatchKcs& b,
                                  std::vector<std::vector<Vec>>& d_kc, KcRef positive,
                                  const std::vector<KcRef>& negatives, double tau, double weight) {
  std::vector<KcRef> refs;
  refs.reserve(negatives.size() + 1);
  refs.push_back(positive);
  refs.insert(refs.end(), negatives.begin(), negatives.end());
  Vec logits(refs.size());
  for (std::size_t r = 0; r < refs.size(); ++r) logits[r] = cosine(anchor, b.vecs[refs[r].first][refs[r].second]) / tau;
  const double lse = log_sum_exp(logits);
  for (std::size_t r = 0; r < refs.size(); ++r) {
    const double p = std::exp(logits[r] - lse);
    const double dl_dlogit = weight * ((r == 0 ? p - 1.0 : p) / tau);
    if (dl_dlogit == 0.0) continue;
    const auto& c = b.vecs[refs[r].first][refs[r].second];
    add_cosine_grad(anchor, c, dl_dlogit, d_anchor);
    add_cosine_grad(c, anchor, dl_dlogit, d_kc[refs[r].first][refs[r].second]);
  }
}

}  // namespace detail

// Loss over precomputed batch vectors. When d_* are non-null they receive
// dL/dz for every vector (same layout as the inputs).
inline ClLossResult cl_loss_from_vectors(const std::vector<Vec>& z_q, const std::vector<std::vector<Vec>>& z_s,
                                         const InBatchKcs& kcs,
                                         const std::vector<std::vector<std::vector<int>>>& step_kcs,
                                         const ClLossConfig& cfg, std::vector<Vec>* d_q = nullptr,
                                         std::vector<std::vector<Vec>>* d_s = nullptr,
                                         std::vector<std::vector<Vec>>* d_kc = nullptr) {
  const std::size_t nb = z_q.size();
  if (nb == 0) throw InputError("cl loss: empty batch");
  const bool grads = d_q && d_s && d_kc;
  if (grads) {
    d_q->assign(nb, {});
    d_s->assign(nb, {});
    d_kc->assign(nb, {});
    for (std::size_t i = 0; i < nb; ++i) {
      (*d_q)[i].assign(z_q[i].size(), 0.0);
      (*d_s)[i].assign(z_s[i].size(), Vec(z_q[i].size(), 0.0));
      (*d_kc)[i].assign(kcs.vecs[i].size(), Vec(z_q[i].size(), 0.0));
    }
  }
  ClLossResult res;
  const double inv_b = 1.0 / static_cast<double>(nb);
  for (std::size_t i = 0; i < nb; ++i) {
    const std::size_t m = kcs.vecs[i].size();
    if (m == 0) throw InputError("cl loss: question at batch position " + std::to_string(i) + " has no kcs");
    double lq = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const auto pool = question_negative_pool(kcs, i, j, cfg.mask);
      lq += contrastive_term(z_q[i], kcs, {i, j}, pool, cfg.tau);
      if (grads)
        detail::contrastive_term_grad(z_q[i], (*d_q)[i], kcs, *d_kc, {i, j}, pool, cfg.tau,
                                      inv_b / static_cast<double>(m));
    }
    res.question_term += inv_b * lq / static_cast<double>(m);

    const std::size_t n = z_s[i].size();
    if (n == 0 || cfg.alpha == 0.0) continue;
    double ls = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const auto& mapped = step_kcs[i][k];
      if (mapped.empty()) throw InputError("cl loss: step without mapped kcs");
      const double inv_p = 1.0 / static_cast<double>(mapped.size());
      for (int j : mapped) {
        const auto jj = static_cast<std::size_t>(j);
        const auto pool = step_negative_pool(kcs, i, jj, cfg.mask);
        ls += inv_p * contrastive_term(z_s[i][k], kcs, {i, jj}, pool, cfg.tau);
        if (grads)
          detail::contrastive_term_grad(z_s[i][k], (*d_s)[i][k], kcs, *d_kc, {i, jj}, pool, cfg.tau,
                                        cfg.alpha * inv_b * inv_p / static_cast<double>(n));
      }
    }
    res.step_term += inv_b * ls / static_cast<double>(n);
  }
  res.loss = res.question_term + cfg.alpha * res.step_term;
  return res;
}

// Forward + backward over a batch of annotated questions. Gradients are
// accumulated into enc.weights' grad buffers (zeroed first). rng enables dropout.
inline ClLossResult loss_total(Encoder& enc, const std::vector<const AnnotatedQuestion*>& batch,
                               const ClusterAssignment& clusters, const ClLossConfig& cfg, Rng* rng = nullptr,
                               bool compute_grads = true) {
  const std::size_t nb = batch.size();
  std::vector<EncodeCache> cq(nb);
  std::vector<std::vector<EncodeCache>> cs(nb), ck(nb);
  std::vector<Vec> z_q(nb);
  std::vector<std::vector<Vec>> z_s(nb);
  InBatchKcs kcs;
  kcs.vecs.resize(nb);
  kcs.cluster.resize(nb);
  std::vector<std::vector<std::vector<int>>> step_kcs(nb);

  for (std::size_t i = 0; i < nb; ++i) {
    const auto& q = *batch[i];
    if (q.kcs.empty()) throw InputError("question " + std::to_string(q.id()) + " has no kcs (M_i = 0)");
    cq[i] = encode_cached(enc, Role::question, q.question.text, rng);
    z_q[i] = cq[i].z;
    for (const auto& s : q.steps) {
      cs[i].push_back(encode_cached(enc, Role::step, s, rng));
      z_s[i].push_back(cs[i].back().z);
    }
    for (const auto& c : q.kcs) {
      ck[i].push_back(encode_cached(enc, Role::kc, c, rng));
      kcs.vecs[i].push_back(ck[i].back().z);
      kcs.cluster[i].push_back(clusters.cluster_of_text(c));
    }
    for (int k = 1; k <= static_cast<int>(q.steps.size()); ++k) {
      std::vector<int> mapped;
      for (int j : q.kcs_of_step(k)) mapped.push_back(j - 1);
      step_kcs[i].push_back(std::move(mapped));
    }
  }

  if (!compute_grads) return cl_loss_from_vectors(z_q, z_s, kcs, step_kcs, cfg);

  std::vector<Vec> d_q;
  std::vector<std::vector<Vec>> d_s, d_kc;
  const auto res = cl_loss_from_vectors(z_q, z_s, kcs, step_kcs, cfg, &d_q, &d_s, &d_kc);
  enc.weights.zero_grad();
  for (std::size_t i = 0; i < nb; ++i) {
    encode_backward(enc.weights, cq[i], d_q[i]);
    for (std::size_t k = 0; k < cs[i].size(); ++k) encode_backward(enc.weights, cs[i][k], d_s[i][k]);
    for (std::size_t j = 0; j < ck[i].size(); ++j) encode_backward(enc.weights, ck[i][j], d_kc[i][j]);
  }
  return res;
}

struct TrainedEncoder {
  Encoder encoder;
  std::vector<double> loss_trace;  // mean batch loss per epoch
};

// Mini-batch Adam over seeded shuffles of the corpus.
inline TrainedEncoder train_encoder(const std::vector<AnnotatedQuestion>& corpus, const ClusterAssignment& clusters,
                                    const ClTrainConfig& cfg, EncoderConfig enc_cfg = {}) {
  if (corpus.empty()) throw InputError("train_encoder: empty corpus");
  if (!(cfg.tau > 0.0)) throw InputError("train_encoder: tau must be > 0");
  if (cfg.alpha < 0.0) throw InputError("train_encoder: alpha must be >= 0");
  if (cfg.batch_size == 0 || cfg.epochs < 0) throw InputError("train_encoder: bad batch size or epochs");
  for (const auto& q : corpus) {
    if (q.kcs.empty()) throw InputError("train_encoder: question " + std::to_string(q.id()) + " is not annotated");
    for (const auto& c : q.kcs) clusters.id_of(c);
  }
  enc_cfg.dropout = cfg.dropout;
  TrainedEncoder out;
  out.encoder = make_encoder(corpus, enc_cfg, cfg.seed);
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  AdamState adam(AdamConfig{cfg.lr});
  const auto params = out.encoder.weights.params();
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<const AnnotatedQuestion*> batch;
      for (std::size_t b = start; b < std::min(order.size(), start + cfg.batch_size); ++b)
        batch.push_back(&corpus[order[b]]);
      const auto res = loss_total(out.encoder, batch, clusters, cfg.loss(), &rng);
      if (!std::isfinite(res.loss)) {
        throw NumericalError("train_encoder: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batches));
      }
      adam_step(adam, params);
      total += res.loss;
      ++batches;
    }
    out.loss_trace.push_back(total / batches);
  }
  return out;
}

// ---- question embeddings ----

struct QuestionEmbedding {
  QuestionId id = 0;
  Vec z_q;
  std::vector<Vec> step_vectors;
  Vec aggregated;  // [z_q ; mean of step vectors], zeros for the step half without steps
};

// Never reads the KC annotations.
inline QuestionEmbedding embed_question(const Encoder& enc, const AnnotatedQuestion& q) {
  QuestionEmbedding e;
  e.id = q.id();
  e.z_q = encode(enc, Role::question, q.question.text);
  const std::size_t d = e.z_q.size();
  Vec mean(d, 0.0);
  for (const auto& s : q.steps) {
    e.step_vectors.push_back(encode(enc, Role::step, s));
    axpy(1.0 / static_cast<double>(q.steps.size()), e.step_vectors.back(), mean);
  }
  e.aggregated = e.z_q;
  e.aggregated.insert(e.aggregated.end(), mean.begin(), mean.end());
  return e;
}

inline Vec aggregate_embedding(const Vec& z_q, const std::vector<Vec>& steps) {
  Vec out = z_q;
  Vec mean(z_q.size(), 0.0);
  for (const auto& s : steps) axpy(1.0 / static_cast<double>(steps.size()), s, mean);
  out.insert(out.end(), mean.begin(), mean.end());
  return out;
}

// ---- export files ----

// Question id -> vector; every row has `dim` entries.
struct EmbeddingTable {
  std::size_t dim = 0;
  std::map<QuestionId, Vec> rows;
};

inline std::string serialize_embedding_table(const EmbeddingTable& t) {
  std::string out = "dim=" + std::to_string(t.dim) + " count=" + std::to_string(t.rows.size()) + "\n";
  for (const auto& [id, v] : t.rows) {
    if (v.size() != t.dim) throw InputError("embedding row " + std::to_string(id) + " has wrong dimension");
    out += std::to_string(id);
    for (double x : v) {
      out += ' ';
      out += format_double(x);
    }
    out += '\n';
  }
  return out;
}

inline EmbeddingTable parse_embedding_table(std::string_view text) {
  const auto lines = split_lines(text);
  if (lines.empty()) throw InputError("embedding file: missing header");
  EmbeddingTable t;
  std::size_t count = 0;
  {
    const auto head = split_ws(lines[0]);
    if (head.size() != 2 || head[0].substr(0, 4) != "dim=" || head[1].substr(0, 6) != "count=") {
      throw InputError("embedding file: header must be 'dim=<d> count=<n>'");
    }
    t.dim = static_cast<std::size_t>(parse_double(head[0].substr(4)));
    count = static_cast<std::size_t>(parse_double(head[1].substr(6)));
  }
  for (std::size_t ln = 1; ln < lines.size(); ++ln) {
    if (trim(lines[ln]).empty()) continue;
    const auto tok = split_ws(lines[ln]);
    if (tok.size() != t.dim + 1) {
      throw InputError("embedding file line " + std::to_string(ln + 1) + ": expected " + std::to_string(t.dim + 1) +
                       " fields, got " + std::to_string(tok.size()));
    }
    const auto id = static_cast<QuestionId>(std::stoll(std::string(tok[0])));
    Vec v;
    v.reserve(t.dim);
    for (std::size_t k = 1; k < tok.size(); ++k) v.push_back(parse_double(tok[k]));
    if (!t.rows.emplace(id, std::move(v)).second) throw InputError("embedding file: duplicate id " + std::to_string(id));
  }
  if (t.rows.size() != count) {
    throw InputError("embedding file: header count " + std::to_string(count) + " but " + std::to_string(t.rows.size()) +
                     " rows");
  }
  return t;
}

inline EmbeddingTable load_embedding_table(const std::filesystem::path& p) {
  try {
    return parse_embedding_table(read_file(p));
  } catch (const InputError& e) {
    throw InputError(p.string() + ": " + e.what());
  }
}

inline EmbeddingTable aggregated_table(const std::vector<QuestionEmbedding>& es) {
  EmbeddingTable t;
  if (!es.empty()) t.dim = es.front().aggregated.size();
  for (const auto& e : es) t.rows[e.id] = e.aggregated;
  return t;
}

// Sidecar with raw z_q and step vectors, one JSON object per question.
inline std::string serialize_raw_embeddings(const std::vector<QuestionEmbedding>& es) {
  std::string out;
  for (const auto& e : es) {
    nlohmann::ordered_json j;
    j["id"] = e.id;
    j["z_q"] = e.z_q;
    j["steps"] = e.step_vectors;
    out += j.dump() + "\n";
  }
  return out;
}

// ---- checkpoints ----

inline nlohmann::ordered_json matrix_to_json(const DenseMatrix& m) {
  nlohmann::ordered_json j;
  j["rows"] = m.rows();
  j["cols"] = m.cols();
  j["data"] = std::vector<double>(m.values().begin(), m.values().end());
  return j;
}

inline void matrix_from_json(const nlohmann::json& j, DenseMatrix& m, const std::string& name) {
  const auto rows = j.at("rows").get<std::size_t>();
  const auto cols = j.at("cols").get<std::size_t>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (data.size() != rows * cols) throw InputError("checkpoint: " + name + " data length mismatch");
  if (!m.empty() && (m.rows() != rows || m.cols() != cols)) {
    throw InputError("checkpoint: " + name + " has shape " + std::to_string(rows) + "x" + std::to_string(cols) +
                     ", expected " + shape_str(m));
  }
  m = DenseMatrix(rows, cols);
  std::copy(data.begin(), data.end(), m.values().begin());
}

inline std::string serialize_encoder(const Encoder& enc) {
  nlohmann::ordered_json j;
  j["format"] = "kcqrl-encoder";
  j["version"] = 1;
  const auto& c = enc.weights.config;
  j["config"] = {{"token_dim", c.token_dim}, {"hidden_dim", c.hidden_dim}, {"emb_dim", c.emb_dim}, {"dropout", c.dropout}};
  j["vocab"] = enc.tokenizer.tokens();
  nlohmann::ordered_json ps;
  const auto names = EncoderWeights::param_names();
  const auto params = enc.weights.params();
  for (std::size_t i = 0; i < params.size(); ++i) ps[names[i]] = matrix_to_json(params[i]->value);
  j["params"] = std::move(ps);
  return j.dump() + "\n";
}

inline Encoder parse_encoder(std::string_view text) {
  Encoder enc;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format").get<std::string>() != "kcqrl-encoder" || j.at("version").get<int>() != 1) {
      throw InputError("encoder checkpoint: unsupported format/version");
    }
    const auto& c = j.at("config");
    EncoderConfig cfg;
    cfg.token_dim = c.at("token_dim").get<std::size_t>();
    cfg.hidden_dim = c.at("hidden_dim").get<std::size_t>();
    cfg.emb_dim = c.at("emb_dim").get<std::size_t>();
    cfg.dropout = c.at("dropout").get<double>();
    enc.tokenizer = Tokenizer(j.at("vocab").get<std::vector<std::string>>());
    enc.weights = EncoderWeights(cfg, enc.tokenizer.vocab_size(), 0);
    const auto names = EncoderWeights::param_names();
    auto params = enc.weights.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      matrix_from_json(j.at("params").at(names[i]), params[i]->value, names[i]);
      params[i]->grad = DenseMatrix(params[i]->value.rows(), params[i]->value.cols());
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("encoder checkpoint: ") + e.what());
  }
  if (!enc.weights.all_finite()) throw NumericalError("encoder checkpoint: non-finite weights");
  return enc;
}

}  // namespace kcqrl
