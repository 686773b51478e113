#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kcqrl/corpus.hpp"
#include "kcqrl/encoder.hpp"
#include "kcqrl/errors.hpp"
#include "kcqrl/numerics.hpp"
#include "kcqrl/util.hpp"

namespace kcqrl {

enum class KtArch { recurrent, attention };
enum class EmbeddingMode { random_id, enriched_frozen, enriched_finetune };
enum class ItemKind { question, kc };

inline std::string to_string(KtArch a) { return a == KtArch::recurrent ? "recurrent" : "attention"; }
inline std::string to_string(ItemKind k) { return k == ItemKind::question ? "question" : "kc"; }
inline std::string to_string(EmbeddingMode m) {
  switch (m) {
    case EmbeddingMode::random_id: return "random_id";
    case EmbeddingMode::enriched_frozen: return "enriched_frozen";
    case EmbeddingMode::enriched_finetune: return "enriched_finetune";
  }
  return "?";
}

inline KtArch parse_arch(std::string_view s) {
  if (s == "recurrent") return KtArch::recurrent;
  if (s == "attention") return KtArch::attention;
  throw InputError("unknown architecture '" + std::string(s) + "' (recurrent|attention)");
}
inline EmbeddingMode parse_mode(std::string_view s) {
  if (s == "random_id") return EmbeddingMode::random_id;
  if (s == "enriched_frozen") return EmbeddingMode::enriched_frozen;
  if (s == "enriched_finetune") return EmbeddingMode::enriched_finetune;
  throw InputError("unknown embedding mode '" + std::string(s) + "' (random_id|enriched_frozen|enriched_finetune)");
}
inline ItemKind parse_item_kind(std::string_view s) {
  if (s == "question") return ItemKind::question;
  if (s == "kc") return ItemKind::kc;
  throw InputError("unknown item kind '" + std::string(s) + "' (question|kc)");
}

inline bool is_enriched(EmbeddingMode m) { return m != EmbeddingMode::random_id; }

// One model input step: an item (question or KC id) and its response.
struct Interaction {
  std::int64_t item = 0;
  int response = 0;
  friend bool operator==(const Interaction&, const Interaction&) = default;
};

inline std::vector<Interaction> question_stream(const StudentHistory& h) {
  std::vector<Interaction> out;
  out.reserve(h.exercises.size());
  for (const auto& e : h.exercises) out.push_back({e.question_id, e.response});
  return out;
}

// Each exercise becomes one step per KC, all carrying the question's label.
inline std::vector<Interaction> kc_stream(std::span<const Exercise> exercises) {
  std::vector<Interaction> out;
  for (const auto& e : exercises) {
    if (e.kc_ids.empty()) throw InputError("exercise on question " + std::to_string(e.question_id) + " has no kc ids");
    for (KcId c : e.kc_ids) out.push_back({c, e.response});
  }
  return out;
}

struct KtTrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 32;
  int epochs = 10;
  std::size_t max_seq_len = 200;  // longer histories are cut into consecutive windows
  std::uint64_t seed = 0;
  std::size_t emb_dim = 300;
  std::size_t hidden_dim = 64;
  std::size_t response_dim = 16;
  std::size_t head_dim = 64;
  bool use_kc_embedding = false;  // add a mean KC embedding to question items
  double grad_clip = 5.0;         // global-norm clip; 0 disables
  double weight_decay = 0.0;      // L2 penalty on trainable parameters, added after clipping
  // Held-out share of training students; when > 0 the parameters of the epoch
  // with the lowest validation BCE are kept.
  double validation_fraction = 0.0;
};

struct KtVocabulary {
  std::vector<std::int64_t> items;
  std::map<std::int64_t, std::vector<KcId>> kcs_of_item;
  std::vector<KcId> kcs;
};

inline KtVocabulary build_vocabulary(const std::vector<StudentHistory>& hs, ItemKind kind) {
  KtVocabulary v;
  std::set<std::int64_t> items;
  std::set<KcId> kcs;
  for (const auto& h : hs) {
    for (const auto& e : h.exercises) {
      for (KcId c : e.kc_ids) kcs.insert(c);
      if (kind == ItemKind::question) {
        items.insert(e.question_id);
        v.kcs_of_item.emplace(e.question_id, e.kc_ids);
      } else {
        if (e.kc_ids.empty()) {
          throw InputError("kc-sequence model: exercise on question " + std::to_string(e.question_id) + " has no kc ids");
        }
        for (KcId c : e.kc_ids) items.insert(c);
      }
    }
  }
  v.items.assign(items.begin(), items.end());
  v.kcs.assign(kcs.begin(), kcs.end());
  return v;
}

// F_theta: item embedding stage, a sequence core (GRU or single-head causal
// attention) and a two-layer head over [state ; next item embedding].
struct KtModel {
  KtArch arch = KtArch::recurrent;
  EmbeddingMode mode = EmbeddingMode::random_id;
  ItemKind kind = ItemKind::question;
  KtTrainConfig config;
  std::size_t input_dim = 0;  // width of `table` rows

  std::vector<std::int64_t> items;
  std::unordered_map<std::int64_t, std::size_t> row_of;
  std::vector<KcId> kcs;
  std::vector<std::vector<std::size_t>> kc_rows_of_item;

  Param table;      // items x input_dim
  Param adapter_w;  // emb x input_dim (enriched)
  Param adapter_b;  // emb x 1 (enriched)
  Param kc_table;   // kcs x emb (use_kc_embedding); zeros and frozen when enriched
  Param resp;       // 2 x response_dim

  Param wz, wr, wn, uz, ur, un, bz, br, bn, bun;  // recurrent
  Param wq, wk, wv;                              // attention

  Param h1w, h1b, h2w, h2b;  // head

  std::size_t emb_dim() const { return config.emb_dim; }
  // [E(item) if correct ; E(item) if incorrect ; response embedding]
  std::size_t step_dim() const { return 2 * config.emb_dim + config.response_dim; }

  std::size_t row(std::int64_t item) const {
    auto it = row_of.find(item);
    if (it == row_of.end()) {
      throw InputError("unknown " + to_string(kind) + " id " + std::to_string(item));
    }
    return it->second;
  }

  std::vector<std::pair<std::string, Param*>> named_params() {
    std::vector<std::pair<std::string, Param*>> out = {{"table", &table}};
    if (is_enriched(mode)) {
      out.emplace_back("adapter_w", &adapter_w);
      out.emplace_back("adapter_b", &adapter_b);
    }
    if (config.use_kc_embedding) out.emplace_back("kc_table", &kc_table);
    out.emplace_back("resp", &resp);
    for (auto& e : core_named()) out.push_back(e);
    out.emplace_back("h1w", &h1w);
    out.emplace_back("h1b", &h1b);
    out.emplace_back("h2w", &h2w);
    out.emplace_back("h2b", &h2b);
    return out;
  }

  std::vector<std::pair<std::string, Param*>> core_named() {
    if (arch == KtArch::recurrent) {
      return {{"wz", &wz}, {"wr", &wr}, {"wn", &wn}, {"uz", &uz}, {"ur", &ur},
              {"un", &un}, {"bz", &bz}, {"br", &br}, {"bn", &bn}, {"bun", &bun}};
    }
    return {{"wq", &wq}, {"wk", &wk}, {"wv", &wv}};
  }

  std::vector<Param*> trainable() {
    std::vector<Param*> out;
    for (auto& [name, p] : named_params()) {
      if (name == "table" && mode == EmbeddingMode::enriched_frozen) continue;
      if (name == "kc_table" && is_enriched(mode)) continue;
      out.push_back(p);
    }
    return out;
  }

  // Parameters downstream of the item embedding (response table, core, head).
  std::size_t core_parameter_count() const {
    auto& self = const_cast<KtModel&>(*this);
    std::size_t n = resp.value.size() + h1w.value.size() + h1b.value.size() + h2w.value.size() + h2b.value.size();
    for (auto& [name, p] : self.core_named()) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, p] : named_params()) p->zero_grad();
  }
};

namespace detail {

inline void xavier(Param& p, Rng& rng) {
  fill_uniform(p.value, std::sqrt(6.0 / static_cast<double>(p.value.rows() + p.value.cols())), rng);
}

}  // namespace detail

// Random-id mode draws the table from a seeded uniform; enriched modes copy
// `source` rows verbatim and add a trainable linear adapter to emb_dim.
inline KtModel build_kt_model(KtArch arch, EmbeddingMode mode, ItemKind kind, const KtVocabulary& vocab,
                              const EmbeddingTable* source, const KtTrainConfig& cfg) {
  if (cfg.emb_dim == 0 || cfg.hidden_dim == 0 || cfg.response_dim == 0 || cfg.head_dim == 0) {
    throw InputError("build_kt_model: dimensions must be positive");
  }
  if (vocab.items.empty()) throw InputError("build_kt_model: empty item vocabulary");
  KtModel m;
  m.arch = arch;
  m.mode = mode;
  m.kind = kind;
  m.config = cfg;
  m.items = vocab.items;
  for (std::size_t r = 0; r < m.items.size(); ++r) m.row_of[m.items[r]] = r;
  m.kcs = vocab.kcs;

  Rng rng(cfg.seed);
  const std::size_t n = m.items.size(), d = cfg.emb_dim, h = cfg.hidden_dim, s = m.step_dim();

  if (is_enriched(mode)) {
    if (!source) throw InputError("enriched mode needs question embeddings; run `embed` first");
    if (source->dim == 0) throw InputError("embedding table has dimension 0");
    m.input_dim = source->dim;
    m.table = Param(n, m.input_dim);
    for (std::size_t r = 0; r < n; ++r) {
      auto it = source->rows.find(m.items[r]);
      if (it == source->rows.end()) {
        throw InputError("embedding export is missing " + to_string(kind) + " id " + std::to_string(m.items[r]));
      }
      if (it->second.size() != m.input_dim) {
        throw InputError("embedding row " + std::to_string(m.items[r]) + " has dimension " +
                         std::to_string(it->second.size()) + ", expected " + std::to_string(m.input_dim));
      }
      std::copy(it->second.begin(), it->second.end(), m.table.value.row(r).begin());
    }
    m.adapter_w = Param(d, m.input_dim);
    m.adapter_b = Param(d, 1);
    detail::xavier(m.adapter_w, rng);
  } else {
    m.input_dim = d;
    m.table = Param(n, d);
    fill_uniform(m.table.value, std::sqrt(3.0 / static_cast<double>(d)), rng);
  }

  if (cfg.use_kc_embedding) {
    if (kind != ItemKind::question) throw InputError("use_kc_embedding applies to question-sequence models only");
    std::unordered_map<KcId, std::size_t> kc_row;
    for (std::size_t r = 0; r < m.kcs.size(); ++r) kc_row[m.kcs[r]] = r;
    m.kc_table = Param(std::max<std::size_t>(1, m.kcs.size()), d);
    if (!is_enriched(mode)) fill_uniform(m.kc_table.value, std::sqrt(3.0 / static_cast<double>(d)), rng);
    m.kc_rows_of_item.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
      auto it = vocab.kcs_of_item.find(m.items[r]);
      if (it == vocab.kcs_of_item.end()) continue;
      for (KcId c : it->second) m.kc_rows_of_item[r].push_back(kc_row.at(c));
    }
  }

  m.resp = Param(2, cfg.response_dim);
  fill_uniform(m.resp.value, std::sqrt(3.0 / static_cast<double>(cfg.response_dim)), rng);

  if (arch == KtArch::recurrent) {
    for (Param* p : {&m.wz, &m.wr, &m.wn}) {
      *p = Param(h, s);
      detail::xavier(*p, rng);
    }
    for (Param* p : {&m.uz, &m.ur, &m.un}) {
      *p = Param(h, h);
      detail::xavier(*p, rng);
    }
    for (Param* p : {&m.bz, &m.br, &m.bn, &m.bun}) *p = Param(h, 1);
  } else {
    m.wq = Param(h, d);
    m.wk = Param(h, s);
    m.wv = Param(h, s);
    detail::xavier(m.wq, rng);
    detail::xavier(m.wk, rng);
    detail::xavier(m.wv, rng);
  }

  m.h1w = Param(cfg.head_dim, h + d);
  m.h1b = Param(cfg.head_dim, 1);
  m.h2w = Param(1, cfg.head_dim);
  m.h2b = Param(1, 1);
  detail::xavier(m.h1w, rng);
  detail::xavier(m.h2w, rng);
  return m;
}

// ---- forward / backward ----

namespace detail {

// Item embeddings after adapter and KC slot, one row per item.
inline DenseMatrix materialize_items(const KtModel& m) {
  const std::size_t n = m.items.size(), d = m.emb_dim();
  DenseMatrix e(n, d);
  for (std::size_t r = 0; r < n; ++r) {
    auto out = e.row(r);
    if (is_enriched(m.mode)) {
      matvec(m.adapter_w.value, m.table.value.row(r), out);
      axpy(1.0, m.adapter_b.value.values(), out);
    } else {
      std::copy(m.table.value.row(r).begin(), m.table.value.row(r).end(), out.begin());
    }
    if (m.config.use_kc_embedding && !m.kc_rows_of_item[r].empty()) {
      const double inv = 1.0 / static_cast<double>(m.kc_rows_of_item[r].size());
      for (std::size_t kr : m.kc_rows_of_item[r]) axpy(inv, m.kc_table.value.row(kr), out);
    }
  }
  return e;
}

inline void items_backward(KtModel& m, const DenseMatrix& d_items) {
  for (std::size_t r = 0; r < m.items.size(); ++r) {
    auto de = d_items.row(r);
    if (std::all_of(de.begin(), de.end(), [](double v) { return v == 0.0; })) continue;
    if (is_enriched(m.mode)) {
      add_outer(m.adapter_w.grad, de, m.table.value.row(r));
      axpy(1.0, de, m.adapter_b.grad.values());
      if (m.mode == EmbeddingMode::enriched_finetune) matvec_t_acc(m.adapter_w.value, de, m.table.grad.row(r));
    } else {
      axpy(1.0, de, m.table.grad.row(r));
    }
    if (m.config.use_kc_embedding && !is_enriched(m.mode) && !m.kc_rows_of_item[r].empty()) {
      const double inv = 1.0 / static_cast<double>(m.kc_rows_of_item[r].size());
      for (std::size_t kr : m.kc_rows_of_item[r]) axpy(inv, de, m.kc_table.grad.row(kr));
    }
  }
}

// The item embedding goes to the half selected by the response, so the core
// sees item-response interactions directly.
inline Vec step_input(const KtModel& m, const DenseMatrix& items, const Interaction& x) {
  const std::size_t d = m.emb_dim();
  Vec u(m.step_dim(), 0.0);
  const auto e = items.row(m.row(x.item));
  std::copy(e.begin(), e.end(), u.begin() + static_cast<std::ptrdiff_t>(x.response ? 0 : d));
  const auto r = m.resp.value.row(x.response ? 1 : 0);
  std::copy(r.begin(), r.end(), u.begin() + static_cast<std::ptrdiff_t>(2 * d));
  return u;
}

inline void step_input_backward(KtModel& m, DenseMatrix& d_items, const Interaction& x, std::span<const double> du) {
  const std::size_t d = m.emb_dim();
  axpy(1.0, du.subspan(x.response ? 0 : d, d), d_items.row(m.row(x.item)));
  axpy(1.0, du.subspan(2 * d), m.resp.grad.row(x.response ? 1 : 0));
}

struct HeadCache {
  Vec g;  // [state ; item embedding]
  Vec f;  // tanh hidden
  double logit = 0.0;
};

inline HeadCache head_forward(const KtModel& m, std::span<const double> state, std::span<const double> item_emb) {
  HeadCache c;
  c.g.assign(state.begin(), state.end());
  c.g.insert(c.g.end(), item_emb.begin(), item_emb.end());
  c.f = matvec(m.h1w.value, c.g);
  for (std::size_t k = 0; k < c.f.size(); ++k) c.f[k] = std::tanh(c.f[k] + m.h1b.value(k, 0));
  c.logit = dot(m.h2w.value.row(0), c.f) + m.h2b.value(0, 0);
  return c;
}

// Returns d/d[state ; item embedding].
inline Vec head_backward(KtModel& m, const HeadCache& c, double dlogit) {
  axpy(dlogit, c.f, m.h2w.grad.row(0));
  m.h2b.grad(0, 0) += dlogit;
  Vec da(c.f.size());
  for (std::size_t k = 0; k < da.size(); ++k) da[k] = dlogit * m.h2w.value(0, k) * (1.0 - c.f[k] * c.f[k]);
  add_outer(m.h1w.grad, da, c.g);
  axpy(1.0, da, m.h1b.grad.values());
  Vec dg(c.g.size(), 0.0);
  matvec_t_acc(m.h1w.value, da, dg);
  return dg;
}

struct GruCache {
  Vec u, h_prev, z, r, hn, n, h;
};

inline GruCache gru_forward(const KtModel& m, Vec u, const Vec& h_prev) {
  GruCache c;
  const std::size_t h = m.config.hidden_dim;
  c.u = std::move(u);
  c.h_prev = h_prev;
  c.z.assign(h, 0.0);
  c.r.assign(h, 0.0);
  c.hn.assign(h, 0.0);
  c.n.assign(h, 0.0);
  c.h.assign(h, 0.0);
  matvec(m.wz.value, c.u, c.z);
  matvec(m.uz.value, h_prev, c.z, true);
  matvec(m.wr.value, c.u, c.r);
  matvec(m.ur.value, h_prev, c.r, true);
  matvec(m.un.value, h_prev, c.hn);
  Vec an(h, 0.0);
  matvec(m.wn.value, c.u, an);
  for (std::size_t k = 0; k < h; ++k) {
    c.z[k] = sigmoid(c.z[k] + m.bz.value(k, 0));
    c.r[k] = sigmoid(c.r[k] + m.br.value(k, 0));
    c.hn[k] += m.bun.value(k, 0);
    c.n[k] = std::tanh(an[k] + m.bn.value(k, 0) + c.r[k] * c.hn[k]);
    c.h[k] = (1.0 - c.z[k]) * c.n[k] + c.z[k] * h_prev[k];
  }
  return c;
}

// Given dL/dh, accumulates parameter grads; returns (du, dh_prev).
inline std::pair<Vec, Vec> gru_backward(KtModel& m, const GruCache& c, std::span<const double> dh) {
  const std::size_t h = m.config.hidden_dim;
  Vec daz(h), dar(h), dan(h), dhn(h), dh_prev(h);
  for (std::size_t k = 0; k < h; ++k) {
    const double dn = dh[k] * (1.0 - c.z[k]);
    const double dz = dh[k] * (c.h_prev[k] - c.n[k]);
    dh_prev[k] = dh[k] * c.z[k];
    dan[k] = dn * (1.0 - c.n[k] * c.n[k]);
    const double dr = dan[k] * c.hn[k];
    dhn[k] = dan[k] * c.r[k];
    dar[k] = dr * c.r[k] * (1.0 - c.r[k]);
    daz[k] = dz * c.z[k] * (1.0 - c.z[k]);
  }
  add_outer(m.wz.grad, daz, c.u);
  add_outer(m.uz.grad, daz, c.h_prev);
  axpy(1.0, daz, m.bz.grad.values());
  add_outer(m.wr.grad, dar, c.u);
  add_outer(m.ur.grad, dar, c.h_prev);
  axpy(1.0, dar, m.br.grad.values());
  add_outer(m.wn.grad, dan, c.u);
  axpy(1.0, dan, m.bn.grad.values());
  add_outer(m.un.grad, dhn, c.h_prev);
  axpy(1.0, dhn, m.bun.grad.values());
  Vec du(c.u.size(), 0.0);
  matvec_t_acc(m.wz.value, daz, du);
  matvec_t_acc(m.wr.value, dar, du);
  matvec_t_acc(m.wn.value, dan, du);
  matvec_t_acc(m.uz.value, daz, dh_prev);
  matvec_t_acc(m.ur.value, dar, dh_prev);
  matvec_t_acc(m.un.value, dhn, dh_prev);
  return {std::move(du), std::move(dh_prev)};
}

// Teacher-forced BCE summed over every position of `seq`; position t is
// predicted from steps < t. With d_items != nullptr, gradients scaled by
// `weight` are accumulated into the model and d_items.
inline double recurrent_sequence(KtModel& m, const DenseMatrix& items, std::span<const Interaction> seq,
                                 DenseMatrix* d_items, double weight) {
  const std::size_t T = seq.size(), hd = m.config.hidden_dim, d = m.emb_dim();
  std::vector<GruCache> steps;
  std::vector<HeadCache> heads;
  steps.reserve(T);
  heads.reserve(T);
  Vec h(hd, 0.0);
  double loss = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    heads.push_back(head_forward(m, h, items.row(m.row(seq[t].item))));
    loss += bce_with_logit(heads.back().logit, seq[t].response);
    if (t + 1 < T) {
      steps.push_back(gru_forward(m, step_input(m, items, seq[t]), h));
      h = steps.back().h;
    }
  }
  if (!d_items) return loss;
  Vec dh(hd, 0.0);
  for (std::size_t t = T; t-- > 0;) {
    const double dlogit = weight * (sigmoid(heads[t].logit) - seq[t].response);
    const Vec dg = head_backward(m, heads[t], dlogit);
    axpy(1.0, std::span<const double>(dg).first(hd), dh);
    axpy(1.0, std::span<const double>(dg).subspan(hd, d), d_items->row(m.row(seq[t].item)));
    if (t == 0) break;
    // h_{t} here is the state after step t-1
    auto [du, dh_prev] = gru_backward(m, steps[t - 1], dh);
    step_input_backward(m, *d_items, seq[t - 1], du);
    dh = std::move(dh_prev);
  }
  return loss;
}

inline double attention_sequence(KtModel& m, const DenseMatrix& items, std::span<const Interaction> seq,
                                 DenseMatrix* d_items, double weight) {
  const std::size_t T = seq.size(), hd = m.config.hidden_dim, d = m.emb_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Vec> u(T), k(T), v(T), q(T), ctx(T);
  std::vector<Vec> attn(T);
  std::vector<HeadCache> heads;
  heads.reserve(T);
  for (std::size_t t = 0; t < T; ++t) {
    u[t] = step_input(m, items, seq[t]);
    k[t] = matvec(m.wk.value, u[t]);
    v[t] = matvec(m.wv.value, u[t]);
    q[t] = matvec(m.wq.value, items.row(m.row(seq[t].item)));
  }
  double loss = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    ctx[t].assign(hd, 0.0);
    if (t > 0) {
      Vec s(t);
      for (std::size_t i = 0; i < t; ++i) s[i] = scale * dot(q[t], k[i]);
      const double lse = log_sum_exp(s);
      attn[t].resize(t);
      for (std::size_t i = 0; i < t; ++i) {
        attn[t][i] = std::exp(s[i] - lse);
        axpy(attn[t][i], v[i], ctx[t]);
      }
    }
    heads.push_back(head_forward(m, ctx[t], items.row(m.row(seq[t].item))));
    loss += bce_with_logit(heads.back().logit, seq[t].response);
  }
  if (!d_items) return loss;
  std::vector<Vec> dk(T, Vec(hd, 0.0)), dv(T, Vec(hd, 0.0));
  for (std::size_t t = 0; t < T; ++t) {
    const double dlogit = weight * (sigmoid(heads[t].logit) - seq[t].response);
    const Vec dg = head_backward(m, heads[t], dlogit);
    const auto dctx = std::span<const double>(dg).first(hd);
    auto drow = d_items->row(m.row(seq[t].item));
    axpy(1.0, std::span<const double>(dg).subspan(hd, d), drow);
    if (t == 0) continue;
    Vec da(t);
    double mean = 0.0;
    for (std::size_t i = 0; i < t; ++i) {
      axpy(attn[t][i], dctx, dv[i]);
      da[i] = dot(dctx, v[i]);
      mean += attn[t][i] * da[i];
    }
    Vec dq(hd, 0.0);
    for (std::size_t i = 0; i < t; ++i) {
      const double ds = attn[t][i] * (da[i] - mean) * scale;
      axpy(ds, k[i], dq);
      axpy(ds, q[t], dk[i]);
    }
    add_outer(m.wq.grad, dq, items.row(m.row(seq[t].item)));
    matvec_t_acc(m.wq.value, dq, drow);
  }
  for (std::size_t t = 0; t < T; ++t) {
    add_outer(m.wk.grad, dk[t], u[t]);
    add_outer(m.wv.grad, dv[t], u[t]);
    Vec du(u[t].size(), 0.0);
    matvec_t_acc(m.wk.value, dk[t], du);
    matvec_t_acc(m.wv.value, dv[t], du);
    step_input_backward(m, *d_items, seq[t], du);
  }
  return loss;
}

inline double sequence_loss(KtModel& m, const DenseMatrix& items, std::span<const Interaction> seq,
                            DenseMatrix* d_items, double weight) {
  return m.arch == KtArch::recurrent ? recurrent_sequence(m, items, seq, d_items, weight)
                                     : attention_sequence(m, items, seq, d_items, weight);
}

}  // namespace detail

// Mean BCE over all positions of all sequences; fills model grads when asked.
inline double kt_batch_loss(KtModel& m, const std::vector<std::vector<Interaction>>& seqs, bool compute_grads) {
  std::size_t count = 0;
  for (const auto& s : seqs) count += s.size();
  if (count == 0) throw InputError("kt: empty batch");
  const auto items = detail::materialize_items(m);
  const double w = 1.0 / static_cast<double>(count);
  double loss = 0.0;
  if (!compute_grads) {
    for (const auto& s : seqs) loss += detail::sequence_loss(m, items, s, nullptr, w);
    return loss * w;
  }
  m.zero_grad();
  DenseMatrix d_items(items.rows(), items.cols());
  for (const auto& s : seqs) loss += detail::sequence_loss(m, items, s, &d_items, w);
  detail::items_backward(m, d_items);
  return loss * w;
}

// Read-only predictor with item embeddings materialized once.
class KtInference {
 public:
  explicit KtInference(const KtModel& m) : m_(&m), items_(detail::materialize_items(m)) {}

  double predict_logit(std::span<const Interaction> prefix, std::int64_t next_item) const {
    auto& m = const_cast<KtModel&>(*m_);
    const auto next_row = m.row(next_item);
    const std::size_t hd = m.config.hidden_dim;
    Vec state(hd, 0.0);
    if (m.arch == KtArch::recurrent) {
      for (const auto& x : prefix) state = detail::gru_forward(m, detail::step_input(m, items_, x), state).h;
    } else if (!prefix.empty()) {
      const Vec q = matvec(m.wq.value, items_.row(next_row));
      const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
      Vec s(prefix.size());
      std::vector<Vec> v(prefix.size());
      for (std::size_t i = 0; i < prefix.size(); ++i) {
        const Vec u = detail::step_input(m, items_, prefix[i]);
        s[i] = scale * dot(q, matvec(m.wk.value, u));
        v[i] = matvec(m.wv.value, u);
      }
      const double lse = log_sum_exp(s);
      for (std::size_t i = 0; i < prefix.size(); ++i) axpy(std::exp(s[i] - lse), v[i], state);
    }
    return detail::head_forward(m, state, items_.row(next_row)).logit;
  }

  double predict_next(std::span<const Interaction> prefix, std::int64_t next_item) const {
    return sigmoid(predict_logit(prefix, next_item));
  }

 private:
  const KtModel* m_;
  DenseMatrix items_;
};

inline double predict_next(const KtModel& m, std::span<const Interaction> prefix, std::int64_t next_item) {
  return KtInference(m).predict_next(prefix, next_item);
}

template <class P>
concept NextResponsePredictor = requires(const P& p, std::span<const Interaction> prefix, std::int64_t item) {
  { p.predict_next(prefix, item) } -> std::convertible_to<double>;
};

// ---- training ----

inline std::vector<std::vector<Interaction>> training_windows(const std::vector<StudentHistory>& hs, ItemKind kind,
                                                              std::size_t max_len) {
  std::vector<const StudentHistory*> sorted;
  for (const auto& h : hs) sorted.push_back(&h);
  std::sort(sorted.begin(), sorted.end(),
            [](const StudentHistory* a, const StudentHistory* b) { return a->student_id < b->student_id; });
  std::vector<std::vector<Interaction>> out;
  for (const auto* h : sorted) {
    const auto stream = kind == ItemKind::question ? question_stream(*h) : kc_stream(h->exercises);
    for (std::size_t s = 0; s < stream.size(); s += max_len) {
      out.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(s),
                       stream.begin() + static_cast<std::ptrdiff_t>(std::min(stream.size(), s + max_len)));
    }
  }
  return out;
}

struct KtTrainResult {
  std::vector<double> loss_trace;        // mean BCE per epoch
  std::vector<double> validation_trace;  // held-out BCE per epoch, empty without a validation split
  int best_epoch = -1;                   // epoch whose parameters were kept (0 = initial), -1 without validation
};

// Teacher-forced BCE with Adam. Students are ordered by id before the seeded
// per-epoch shuffle, so the input order of `train` does not matter.
inline KtTrainResult train_kt(KtModel& m, const std::vector<StudentHistory>& train) {
  if (train.empty()) throw InputError("train_kt: no training histories");
  const auto& cfg = m.config;
  if (cfg.batch_size == 0 || cfg.max_seq_len == 0 || cfg.epochs < 0 || !(cfg.lr > 0.0) || cfg.weight_decay < 0.0) {
    throw InputError("train_kt: batch_size, max_seq_len and lr must be positive, weight_decay non-negative");
  }
  if (cfg.validation_fraction < 0.0 || cfg.validation_fraction >= 1.0) {
    throw InputError("train_kt: validation_fraction must be in [0,1)");
  }
  std::vector<StudentHistory> fit = train, held;
  if (cfg.validation_fraction > 0.0) {
    std::sort(fit.begin(), fit.end(),
              [](const StudentHistory& a, const StudentHistory& b) { return a.student_id < b.student_id; });
    Rng split_rng(cfg.seed ^ 0x2545f4914f6cdd1dULL);
    std::shuffle(fit.begin(), fit.end(), split_rng);
    const auto n_val = static_cast<std::size_t>(std::ceil(cfg.validation_fraction * static_cast<double>(fit.size())));
    if (n_val >= fit.size()) throw InputError("train_kt: validation split leaves no training students");
    held.assign(fit.begin(), fit.begin() + static_cast<std::ptrdiff_t>(n_val));
    fit.erase(fit.begin(), fit.begin() + static_cast<std::ptrdiff_t>(n_val));
  }
  const auto windows = training_windows(fit, m.kind, cfg.max_seq_len);
  const auto val_windows = training_windows(held, m.kind, cfg.max_seq_len);
  std::vector<std::size_t> order(windows.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(cfg.seed ^ 0x5851f42d4c957f2dULL);
  AdamState adam(AdamConfig{cfg.lr});
  const auto params = m.trainable();
  KtTrainResult res;
  std::vector<DenseMatrix> best;
  double best_val = std::numeric_limits<double>::infinity();
  auto snapshot = [&] {
    best.clear();
    for (const Param* p : params) best.push_back(p->value);
  };
  if (!val_windows.empty()) {
    best_val = kt_batch_loss(m, val_windows, false);
    snapshot();
    res.best_epoch = 0;
  }
  std::size_t batch_index = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      std::vector<std::vector<Interaction>> batch;
      std::size_t n = 0;
      for (std::size_t b = start; b < std::min(order.size(), start + cfg.batch_size); ++b) {
        batch.push_back(windows[order[b]]);
        n += batch.back().size();
      }
      const double loss = kt_batch_loss(m, batch, true);
      if (!std::isfinite(loss)) {
        throw NumericalError("train_kt: non-finite loss at batch " + std::to_string(batch_index));
      }
      if (cfg.grad_clip > 0.0) {
        double sq = 0.0;
        for (const Param* p : params)
          for (double g : p->grad.values()) sq += g * g;
        const double gn = std::sqrt(sq);
        if (gn > cfg.grad_clip)
          for (Param* p : params)
            for (double& g : p->grad.values()) g *= cfg.grad_clip / gn;
      }
      if (cfg.weight_decay > 0.0)
        for (Param* p : params) axpy(cfg.weight_decay, p->value.values(), p->grad.values());
      adam_step(adam, params);
      total += loss * static_cast<double>(n);
      count += n;
    }
    res.loss_trace.push_back(total / static_cast<double>(count));
    if (!val_windows.empty()) {
      const double v = kt_batch_loss(m, val_windows, false);
      res.validation_trace.push_back(v);
      if (v < best_val) {
        best_val = v;
        snapshot();
        res.best_epoch = epoch + 1;
      }
    }
  }
  if (!val_windows.empty())
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best[i];
  return res;
}

inline std::string loss_trace_csv(const std::vector<double>& trace) {
  std::string out = "epoch,loss\n";
  for (std::size_t e = 0; e < trace.size(); ++e) out += std::to_string(e + 1) + "," + format_double(trace[e]) + "\n";
  return out;
}

// ---- leakage-free evaluation of KC-sequence models ----

// KC-expanded history of the exercises before position t (0-based).
inline std::vector<Interaction> kc_expanded_prefix(const StudentHistory& h, std::size_t t) {
  return kc_stream(std::span<const Exercise>(h.exercises).first(t));
}

struct ScoredLabel {
  int label = 0;
  double score = 0.0;
  friend bool operator==(const ScoredLabel&, const ScoredLabel&) = default;
};

// For every position t >= 1 (having at least one earlier exercise): each KC
// of the target is appended on its own to the expanded earlier history and
// predicted independently; the score is their mean. Labels of the target's
// other KCs never enter the prefix.
template <NextResponsePredictor P>
std::vector<ScoredLabel> evaluate_kc_expanded(const P& model, const std::vector<StudentHistory>& histories) {
  std::vector<ScoredLabel> out;
  for (const auto& h : histories) {
    for (std::size_t t = 1; t < h.exercises.size(); ++t) {
      const auto& target = h.exercises[t];
      if (target.kc_ids.empty()) {
        throw InputError("evaluate_kc_expanded: exercise on question " + std::to_string(target.question_id) +
                         " has no kc ids");
      }
      const auto prefix = kc_expanded_prefix(h, t);
      double sum = 0.0;
      for (KcId c : target.kc_ids) sum += model.predict_next(prefix, c);
      out.push_back({target.response, sum / static_cast<double>(target.kc_ids.size())});
    }
  }
  return out;
}

// ---- checkpoints ----

inline std::string serialize_kt_model(KtModel& m) {
  nlohmann::ordered_json j;
  j["format"] = "kcqrl-kt";
  j["version"] = 1;
  j["arch"] = to_string(m.arch);
  j["mode"] = to_string(m.mode);
  j["kind"] = to_string(m.kind);
  const auto& c = m.config;
  j["config"] = {{"lr", c.lr},
                 {"batch_size", c.batch_size},
                 {"epochs", c.epochs},
                 {"max_seq_len", c.max_seq_len},
                 {"seed", c.seed},
                 {"emb_dim", c.emb_dim},
                 {"hidden_dim", c.hidden_dim},
                 {"response_dim", c.response_dim},
                 {"head_dim", c.head_dim},
                 {"use_kc_embedding", c.use_kc_embedding},
                 {"grad_clip", c.grad_clip},
                 {"weight_decay", c.weight_decay},
                 {"validation_fraction", c.validation_fraction}};
  j["input_dim"] = m.input_dim;
  j["items"] = m.items;
  j["kcs"] = m.kcs;
  nlohmann::ordered_json kc_rows = nlohmann::ordered_json::array();
  for (const auto& r : m.kc_rows_of_item) kc_rows.push_back(r);
  j["kc_rows_of_item"] = kc_rows;
  nlohmann::ordered_json ps;
  for (auto& [name, p] : m.named_params()) ps[name] = matrix_to_json(p->value);
  j["params"] = std::move(ps);
  return j.dump() + "\n";
}

inline KtModel parse_kt_model(std::string_view text) {
  KtModel m;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format").get<std::string>() != "kcqrl-kt" || j.at("version").get<int>() != 1) {
      throw InputError("kt checkpoint: unsupported format/version");
    }
    m.arch = parse_arch(j.at("arch").get<std::string>());
    m.mode = parse_mode(j.at("mode").get<std::string>());
    m.kind = parse_item_kind(j.at("kind").get<std::string>());
    const auto& c = j.at("config");
    m.config.lr = c.at("lr").get<double>();
    m.config.batch_size = c.at("batch_size").get<std::size_t>();
    m.config.epochs = c.at("epochs").get<int>();
    m.config.max_seq_len = c.at("max_seq_len").get<std::size_t>();
    m.config.seed = c.at("seed").get<std::uint64_t>();
    m.config.emb_dim = c.at("emb_dim").get<std::size_t>();
    m.config.hidden_dim = c.at("hidden_dim").get<std::size_t>();
    m.config.response_dim = c.at("response_dim").get<std::size_t>();
    m.config.head_dim = c.at("head_dim").get<std::size_t>();
    m.config.use_kc_embedding = c.at("use_kc_embedding").get<bool>();
    m.config.grad_clip = c.at("grad_clip").get<double>();
    m.config.weight_decay = c.value("weight_decay", 0.0);
    m.config.validation_fraction = c.value("validation_fraction", 0.0);
    m.input_dim = j.at("input_dim").get<std::size_t>();
    m.items = j.at("items").get<std::vector<std::int64_t>>();
    for (std::size_t r = 0; r < m.items.size(); ++r) m.row_of[m.items[r]] = r;
    m.kcs = j.at("kcs").get<std::vector<KcId>>();
    m.kc_rows_of_item = j.at("kc_rows_of_item").get<std::vector<std::vector<std::size_t>>>();
    for (auto& [name, p] : m.named_params()) {
      matrix_from_json(j.at("params").at(name), p->value, name);
      p->grad = DenseMatrix(p->value.rows(), p->value.cols());
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("kt checkpoint: ") + e.what());
  }
  if (m.table.value.rows() != m.items.size() || m.table.value.cols() != m.input_dim) {
    throw InputError("kt checkpoint: table shape does not match item list");
  }
  return m;
}

}  // namespace kcqrl
