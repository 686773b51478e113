#pragma once

#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "kcqrl/annotator.hpp"
#include "kcqrl/clustering.hpp"
#include "kcqrl/corpus.hpp"
#include "kcqrl/encoder.hpp"
#include "kcqrl/errors.hpp"
#include "kcqrl/eval.hpp"
#include "kcqrl/kt.hpp"
#include "kcqrl/numerics.hpp"
#include "kcqrl/util.hpp"

namespace kcqrl {

inline std::size_t default_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

struct RunConfig {
  struct Paths {
    std::string questions;     // unannotated questions (annotate input)
    std::string corpus;        // annotated corpus
    std::string interactions;
    std::string cache = "annotation_cache.jsonl";
    std::string out_dir = "out";
    std::string embeddings;    // defaults to <out_dir>/embeddings.txt
  } paths;

  struct Backend {
    std::string kind = "mock";  // mock | http
    std::string fixture;        // mock script
    std::string url = "http://localhost:8000/v1";
    std::string model = "gpt-4o";
    std::string token_env = "OPENAI_API_KEY";
    double temperature = 0.0;
    int max_attempts = 3;
    int backoff_ms = 500;
    int parallelism = 4;
  } backend;

  struct Cluster {
    double threshold = 0.15;
    int min_size = 2;
    std::string provider = "hashed";  // hashed | file
    int provider_dim = 256;
    std::string provider_file;
  } cluster;

  ClTrainConfig cl;
  EncoderConfig encoder;

  KtTrainConfig kt;
  std::string kt_arch = "recurrent";
  std::string kt_mode = "enriched_frozen";
  std::string kt_item_kind = "question";

  struct Eval {
    int k = 5;
    int folds = 0;  // folds actually run; 0 = all k
    std::uint64_t split_seed = 0;
    std::string archs = "recurrent,attention";
    bool multi_step = true;
    double observed_fraction = 0.6;
  } eval;

  struct Sweep {
    std::string fractions = "0.05,0.1,0.25,0.5,1.0";
    std::string seeds = "0";
    int folds = 1;
  } sweep;

  struct Ablation {
    std::string variants = "a,b,c,d,e,f,g,full";
    int folds = 1;
  } ablation;

  SynthConfig synth;
  std::uint64_t synth_seed = 0;

  int workers = static_cast<int>(default_workers());

  std::filesystem::path out() const { return paths.out_dir; }
  std::filesystem::path embeddings_path() const {
    return paths.embeddings.empty() ? out() / "embeddings.txt" : std::filesystem::path(paths.embeddings);
  }
};

// ---- field registry: dotted keys shared by config files and flags ----

struct ConfigField {
  enum class Type { integer, unsigned_integer, real, boolean, string };
  std::string key;
  Type type;
  std::string help;
  std::function<nlohmann::json(const RunConfig&)> get;
  std::function<void(RunConfig&, const nlohmann::json&)> set;
};

namespace detail {

template <class M>
ConfigField make_field(std::string key, std::string help, std::function<M&(RunConfig&)> ref) {
  using T = std::decay_t<M>;
  ConfigField f;
  f.key = std::move(key);
  f.help = std::move(help);
  if constexpr (std::is_same_v<T, bool>) {
    f.type = ConfigField::Type::boolean;
  } else if constexpr (std::is_floating_point_v<T>) {
    f.type = ConfigField::Type::real;
  } else if constexpr (std::is_integral_v<T> && std::is_signed_v<T>) {
    f.type = ConfigField::Type::integer;
  } else if constexpr (std::is_integral_v<T>) {
    f.type = ConfigField::Type::unsigned_integer;
  } else {
    f.type = ConfigField::Type::string;
  }
  f.get = [ref](const RunConfig& c) { return nlohmann::json(ref(const_cast<RunConfig&>(c))); };
  f.set = [ref, k = f.key](RunConfig& c, const nlohmann::json& v) {
    try {
      if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
        if (!v.is_number_integer()) throw InputError("");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.get<std::int64_t>() < 0 && !v.is_number_unsigned()) throw InputError("");
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw InputError("");
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw InputError("");
      } else {
        if (!v.is_string()) throw InputError("");
      }
      ref(c) = v.get<T>();
    } catch (const std::exception&) {
      throw InputError("config key '" + k + "': bad value " + v.dump());
    }
  };
  return f;
}

}  // namespace detail

inline const std::vector<ConfigField>& config_fields() {
  using detail::make_field;
  using R = RunConfig;
#define KCQRL_FIELD(key, help, expr) \
  make_field<decltype(std::declval<R&>().expr)>(key, help, [](R& c) -> decltype(c.expr)& { return c.expr; })
  static const std::vector<ConfigField> fields = {
      KCQRL_FIELD("paths.questions", "unannotated questions JSONL (annotate input)", paths.questions),
      KCQRL_FIELD("paths.corpus", "annotated corpus JSONL", paths.corpus),
      KCQRL_FIELD("paths.interactions", "student interactions JSONL", paths.interactions),
      KCQRL_FIELD("paths.cache", "annotation cache JSONL", paths.cache),
      KCQRL_FIELD("paths.out_dir", "output directory", paths.out_dir),
      KCQRL_FIELD("paths.embeddings", "question embedding export (default <out_dir>/embeddings.txt)",
                  paths.embeddings),
      KCQRL_FIELD("backend.kind", "completion backend: mock | http", backend.kind),
      KCQRL_FIELD("backend.fixture", "mock backend script JSONL", backend.fixture),
      KCQRL_FIELD("backend.url", "chat-completions base URL", backend.url),
      KCQRL_FIELD("backend.model", "model name sent to the backend", backend.model),
      KCQRL_FIELD("backend.token_env", "environment variable holding the bearer token", backend.token_env),
      KCQRL_FIELD("backend.temperature", "sampling temperature", backend.temperature),
      KCQRL_FIELD("backend.max_attempts", "attempts per request on transport errors", backend.max_attempts),
      KCQRL_FIELD("backend.backoff_ms", "initial retry backoff in ms (doubles)", backend.backoff_ms),
      KCQRL_FIELD("backend.parallelism", "questions annotated concurrently", backend.parallelism),
      KCQRL_FIELD("cluster.threshold", "cosine-distance merge threshold", cluster.threshold),
      KCQRL_FIELD("cluster.min_size", "minimum cluster size", cluster.min_size),
      KCQRL_FIELD("cluster.provider", "KC embedding provider: hashed | file", cluster.provider),
      KCQRL_FIELD("cluster.provider_dim", "hashed provider dimension", cluster.provider_dim),
      KCQRL_FIELD("cluster.provider_file", "KC vectors file for provider=file", cluster.provider_file),
      KCQRL_FIELD("cl.tau", "contrastive temperature", cl.tau),
      KCQRL_FIELD("cl.alpha", "weight of the step loss", cl.alpha),
      KCQRL_FIELD("cl.batch_size", "questions per contrastive batch", cl.batch_size),
      KCQRL_FIELD("cl.epochs", "contrastive training epochs", cl.epochs),
      KCQRL_FIELD("cl.lr", "contrastive learning rate", cl.lr),
      KCQRL_FIELD("cl.dropout", "encoder dropout", cl.dropout),
      KCQRL_FIELD("cl.seed", "encoder seed", cl.seed),
      KCQRL_FIELD("cl.mask", "mask same-cluster negatives", cl.mask),
      KCQRL_FIELD("encoder.token_dim", "token embedding width", encoder.token_dim),
      KCQRL_FIELD("encoder.hidden_dim", "encoder hidden width", encoder.hidden_dim),
      KCQRL_FIELD("encoder.emb_dim", "encoder output width", encoder.emb_dim),
      KCQRL_FIELD("kt.arch", "KT architecture: recurrent | attention", kt_arch),
      KCQRL_FIELD("kt.mode", "embedding mode: random_id | enriched_frozen | enriched_finetune", kt_mode),
      KCQRL_FIELD("kt.item_kind", "sequence items: question | kc", kt_item_kind),
      KCQRL_FIELD("kt.lr", "KT learning rate", kt.lr),
      KCQRL_FIELD("kt.batch_size", "sequences per KT batch", kt.batch_size),
      KCQRL_FIELD("kt.epochs", "KT training epochs", kt.epochs),
      KCQRL_FIELD("kt.max_seq_len", "window length for long histories", kt.max_seq_len),
      KCQRL_FIELD("kt.seed", "KT seed", kt.seed),
      KCQRL_FIELD("kt.emb_dim", "KT item embedding width", kt.emb_dim),
      KCQRL_FIELD("kt.hidden_dim", "KT state width", kt.hidden_dim),
      KCQRL_FIELD("kt.response_dim", "response embedding width", kt.response_dim),
      KCQRL_FIELD("kt.head_dim", "prediction head width", kt.head_dim),
      KCQRL_FIELD("kt.use_kc_embedding", "add a KC embedding slot to question items", kt.use_kc_embedding),
      KCQRL_FIELD("kt.grad_clip", "global gradient-norm clip (0 = off)", kt.grad_clip),
      KCQRL_FIELD("kt.weight_decay", "L2 penalty on trainable KT parameters", kt.weight_decay),
      KCQRL_FIELD("kt.validation_fraction", "held-out training students for best-epoch selection (0 = off)",
                  kt.validation_fraction),
      KCQRL_FIELD("eval.k", "number of student folds", eval.k),
      KCQRL_FIELD("eval.folds", "folds to run (0 = all)", eval.folds),
      KCQRL_FIELD("eval.split_seed", "fold split seed", eval.split_seed),
      KCQRL_FIELD("eval.archs", "architectures evaluated, comma separated", eval.archs),
      KCQRL_FIELD("eval.multi_step", "also run multi-step prediction", eval.multi_step),
      KCQRL_FIELD("eval.observed_fraction", "observed share of each history for multi-step", eval.observed_fraction),
      KCQRL_FIELD("sweep.fractions", "student fractions, comma separated", sweep.fractions),
      KCQRL_FIELD("sweep.seeds", "subsample seeds, comma separated", sweep.seeds),
      KCQRL_FIELD("sweep.folds", "folds run per fraction and seed", sweep.folds),
      KCQRL_FIELD("ablation.variants", "ablation variants, comma separated (a-g, full)", ablation.variants),
      KCQRL_FIELD("ablation.folds", "folds run per variant", ablation.folds),
      KCQRL_FIELD("synth.questions", "synthetic question count", synth.num_questions),
      KCQRL_FIELD("synth.kcs", "synthetic KC count", synth.num_kcs),
      KCQRL_FIELD("synth.students", "synthetic student count", synth.num_students),
      KCQRL_FIELD("synth.seq_len", "exercises per synthetic student", synth.seq_len),
      KCQRL_FIELD("synth.learn_rate", "mastery gain per practice", synth.learn_rate),
      KCQRL_FIELD("synth.guess", "guess probability", synth.guess),
      KCQRL_FIELD("synth.slip", "slip probability", synth.slip),
      KCQRL_FIELD("synth.multi_kc_prob", "chance of a second KC per question", synth.multi_kc_prob),
      KCQRL_FIELD("synth.seed", "synthetic data seed", synth_seed),
      KCQRL_FIELD("workers", "worker threads for evaluation and annotation", workers),
  };
#undef KCQRL_FIELD
  return fields;
}

inline const ConfigField& config_field(std::string_view key) {
  for (const auto& f : config_fields())
    if (f.key == key) return f;
  throw InputError("unknown config key '" + std::string(key) + "'");
}

inline void set_config_value(RunConfig& c, std::string_view key, const nlohmann::json& v) { config_field(key).set(c, v); }

// Flag text -> typed JSON value for the field.
inline void set_config_string(RunConfig& c, std::string_view key, const std::string& text) {
  const auto& f = config_field(key);
  nlohmann::json v;
  try {
    switch (f.type) {
      case ConfigField::Type::integer: v = std::stoll(text); break;
      case ConfigField::Type::unsigned_integer:
        if (!text.empty() && text[0] == '-') throw InputError("");
        v = std::stoull(text);
        break;
      case ConfigField::Type::real: v = parse_double(text); break;
      case ConfigField::Type::boolean:
        if (text == "true" || text == "1") v = true;
        else if (text == "false" || text == "0") v = false;
        else throw InputError("");
        break;
      case ConfigField::Type::string: v = text; break;
    }
  } catch (const std::exception&) {
    throw InputError("flag --" + std::string(key) + ": cannot parse '" + text + "'");
  }
  f.set(c, v);
}

inline std::string config_value_string(const RunConfig& c, const ConfigField& f) {
  const auto v = f.get(c);
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_float()) return format_double(v.get<double>());
  return v.dump();
}

// Accepts nested objects or dotted keys; unknown keys are errors.
inline void apply_config_json(RunConfig& c, const nlohmann::json& j, const std::string& prefix = "") {
  if (!j.is_object()) throw InputError("config: expected an object" + (prefix.empty() ? "" : " at '" + prefix + "'"));
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object()) {
      apply_config_json(c, *it, key);
    } else {
      set_config_value(c, key, *it);
    }
  }
}

inline void load_config_file(RunConfig& c, const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
  apply_config_json(c, j);
}

inline nlohmann::ordered_json config_snapshot(const RunConfig& c, bool include_workers = false) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& f : config_fields()) {
    if (f.key == "workers" && !include_workers) continue;
    j[f.key] = f.get(c);
  }
  return j;
}

// ---- list parsing ----

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    auto comma = s.find(',', start);
    if (comma == std::string_view::npos) comma = s.size();
    auto tok = trim(s.substr(start, comma - start));
    if (!tok.empty()) out.emplace_back(tok);
    start = comma + 1;
  }
  return out;
}

inline std::vector<double> parse_double_list(std::string_view s) {
  std::vector<double> out;
  for (const auto& t : split_list(s)) out.push_back(parse_double(t));
  return out;
}

inline std::vector<std::uint64_t> parse_seed_list(std::string_view s) {
  std::vector<std::uint64_t> out;
  for (const auto& t : split_list(s)) {
    const double v = parse_double(t);
    if (v < 0 || v != std::floor(v)) throw InputError("seed '" + t + "' is not a non-negative integer");
    out.push_back(static_cast<std::uint64_t>(v));
  }
  return out;
}

// Rethrows with a stage tag, keeping the error category (and exit code).
template <class Fn>
auto with_stage(const std::string& stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const BackendError& e) {
    throw BackendError("[" + stage + "] " + e.what());
  } catch (const NumericalError& e) {
    throw NumericalError("[" + stage + "] " + e.what());
  } catch (const InputError& e) {
    throw InputError("[" + stage + "] " + e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    throw InputError("[" + stage + "] " + e.what());
  }
}

// ---- stages ----

inline void require_path(const std::string& p, const std::string& key) {
  if (p.empty()) throw InputError("missing required path --" + key);
}

inline std::vector<AnnotatedQuestion> load_annotated_corpus(const RunConfig& c) {
  require_path(c.paths.corpus, "paths.corpus");
  return load_corpus(c.paths.corpus);
}

inline std::vector<StudentHistory> load_run_interactions(const RunConfig& c, const std::vector<AnnotatedQuestion>* corpus) {
  require_path(c.paths.interactions, "paths.interactions");
  return load_interactions(c.paths.interactions, corpus);
}

inline std::unique_ptr<CompletionBackend> make_backend(const RunConfig& c) {
  if (c.backend.kind == "mock") {
    if (c.backend.fixture.empty()) return std::make_unique<MockBackend>();
    return std::make_unique<MockBackend>(std::filesystem::path(c.backend.fixture));
  }
  if (c.backend.kind == "http") {
    HttpBackendConfig h;
    h.base_url = c.backend.url;
    h.model = c.backend.model;
    h.token_env = c.backend.token_env;
    h.max_attempts = c.backend.max_attempts;
    h.backoff_ms = c.backend.backoff_ms;
    return std::make_unique<HttpBackend>(h);
  }
  throw InputError("unknown backend kind '" + c.backend.kind + "' (mock|http)");
}

struct AnnotateSummary {
  std::size_t questions = 0;
  std::size_t calls[3] = {0, 0, 0};
  std::size_t hits[3] = {0, 0, 0};
  std::vector<AnnotationFailure> failures;
};

// Reads paths.questions (question records; existing annotations ignored) and
// writes the annotated corpus to paths.corpus, or <out_dir>/corpus.jsonl.
inline AnnotateSummary stage_annotate(const RunConfig& c, CompletionBackend& backend) {
  require_path(c.paths.questions, "paths.questions");
  std::vector<Question> qs;
  for (const auto& a : load_corpus(c.paths.questions)) qs.push_back(a.question);
  AnnotationCache cache{std::filesystem::path(c.paths.cache)};
  AnnotateStats stats;
  auto res = annotate_corpus(backend, cache, qs, static_cast<std::size_t>(std::max(1, c.backend.parallelism)), &stats,
                             {c.backend.temperature});
  AnnotateSummary s;
  s.questions = qs.size();
  for (int i = 0; i < 3; ++i) {
    s.calls[i] = stats.backend_calls[i];
    s.hits[i] = stats.cache_hits[i];
  }
  s.failures = std::move(res.failures);
  const auto out = c.paths.corpus.empty() ? c.out() / "corpus.jsonl" : std::filesystem::path(c.paths.corpus);
  save_corpus(out, res.questions);
  return s;
}

inline std::unique_ptr<EmbeddingProvider> make_kc_provider(const RunConfig& c) {
  if (c.cluster.provider == "hashed") return std::make_unique<HashedTokenProvider>(static_cast<std::size_t>(c.cluster.provider_dim));
  if (c.cluster.provider == "file") {
    require_path(c.cluster.provider_file, "cluster.provider_file");
    return std::make_unique<ExternalFileProvider>(c.cluster.provider_file);
  }
  throw InputError("unknown kc embedding provider '" + c.cluster.provider + "' (hashed|file)");
}

inline std::filesystem::path clusters_path(const RunConfig& c) { return c.out() / "clusters.json"; }
inline std::filesystem::path encoder_path(const RunConfig& c) { return c.out() / "encoder.json"; }

inline ClusterAssignment stage_cluster(const RunConfig& c) {
  const auto corpus = load_annotated_corpus(c);
  const auto provider = make_kc_provider(c);
  auto a = cluster_corpus(corpus, *provider, {c.cluster.threshold, c.cluster.min_size});
  write_file(clusters_path(c), serialize_clusters(a));
  return a;
}

inline ClusterAssignment load_clusters_or_fail(const RunConfig& c) {
  const auto p = clusters_path(c);
  if (!std::filesystem::exists(p)) throw InputError(p.string() + " not found; run `cluster` first");
  return parse_clusters(read_file(p));
}

inline TrainedEncoder stage_train_encoder(const RunConfig& c) {
  const auto corpus = load_annotated_corpus(c);
  const auto clusters = load_clusters_or_fail(c);
  auto t = train_encoder(corpus, clusters, c.cl, c.encoder);
  write_file(encoder_path(c), serialize_encoder(t.encoder));
  write_file(c.out() / "cl_loss.csv", loss_trace_csv(t.loss_trace));
  return t;
}

inline EmbeddingTable stage_embed(const RunConfig& c) {
  const auto corpus = load_annotated_corpus(c);
  const auto p = encoder_path(c);
  if (!std::filesystem::exists(p)) throw InputError(p.string() + " not found; run `train-encoder` first");
  const auto enc = parse_encoder(read_file(p));
  std::vector<QuestionEmbedding> es;
  for (const auto& q : corpus) es.push_back(embed_question(enc, q));
  auto table = aggregated_table(es);
  write_file(c.embeddings_path(), serialize_embedding_table(table));
  write_file(c.out() / "embeddings_raw.jsonl", serialize_raw_embeddings(es));
  return table;
}

inline std::optional<EmbeddingTable> load_embeddings_for(const RunConfig& c, EmbeddingMode mode) {
  if (!is_enriched(mode)) return std::nullopt;
  const auto p = c.embeddings_path();
  if (!std::filesystem::exists(p)) {
    throw InputError("enriched mode needs question embeddings at " + p.string() + "; run `embed` first");
  }
  return load_embedding_table(p);
}

inline KtSpec kt_spec(const RunConfig& c, KtArch arch, EmbeddingMode mode) {
  return {arch, mode, parse_item_kind(c.kt_item_kind), c.kt};
}

struct TrainedKt {
  KtModel model;
  std::vector<double> loss_trace;
  std::filesystem::path checkpoint;
};

// Trains on every student and writes kt_<arch>_<mode>.json plus its loss CSV.
inline TrainedKt stage_train_kt(const RunConfig& c, KtArch arch, EmbeddingMode mode) {
  const auto corpus = load_annotated_corpus(c);
  const auto hs = load_run_interactions(c, &corpus);
  const auto emb = load_embeddings_for(c, mode);
  const auto spec = kt_spec(c, arch, mode);
  if (is_enriched(mode) && spec.kind == ItemKind::kc) {
    throw InputError("enriched embeddings are per question; use kt.item_kind=question");
  }
  TrainedKt t{build_kt_model(arch, mode, spec.kind, build_vocabulary(hs, spec.kind), emb ? &*emb : nullptr, spec.train),
              {}, {}};
  t.loss_trace = train_kt(t.model, hs).loss_trace;
  const std::string stem = "kt_" + to_string(arch) + "_" + to_string(mode);
  t.checkpoint = c.out() / (stem + ".json");
  write_file(t.checkpoint, serialize_kt_model(t.model));
  write_file(c.out() / (stem + "_loss.csv"), loss_trace_csv(t.loss_trace));
  return t;
}

inline std::vector<KtArch> eval_archs(const RunConfig& c) {
  std::vector<KtArch> out;
  for (const auto& a : split_list(c.eval.archs)) out.push_back(parse_arch(a));
  if (out.empty()) throw InputError("eval.archs is empty");
  return out;
}

inline nlohmann::ordered_json provenance(const RunConfig& c) {
  nlohmann::ordered_json p;
  p["seeds"] = {{"cl", c.cl.seed}, {"kt", c.kt.seed}, {"split", c.eval.split_seed}, {"synth", c.synth_seed}};
  nlohmann::ordered_json h = nlohmann::ordered_json::object();
  for (const auto& [name, path] : std::vector<std::pair<std::string, std::string>>{
           {"corpus", c.paths.corpus}, {"interactions", c.paths.interactions}}) {
    if (!path.empty() && std::filesystem::exists(path)) h[name] = file_sha256(path);
  }
  if (std::filesystem::exists(c.embeddings_path())) h["embeddings"] = file_sha256(c.embeddings_path());
  p["sha256"] = std::move(h);
  return p;
}

// k-fold next-step AUC (and optional multi-step AUCs) for each architecture
// in random_id and enriched_frozen mode; the folds are shared by all models.
inline EvalReport stage_evaluate(const RunConfig& c) {
  const auto corpus = load_annotated_corpus(c);
  const auto hs = load_run_interactions(c, &corpus);
  const std::size_t workers = static_cast<std::size_t>(std::max(1, c.workers));
  const auto folds = split_by_student(hs, c.eval.k, c.eval.split_seed);
  const int nfolds = c.eval.folds <= 0 || c.eval.folds > c.eval.k ? c.eval.k : c.eval.folds;
  const auto emb = load_embeddings_for(c, EmbeddingMode::enriched_frozen);
  const auto kind = parse_item_kind(c.kt_item_kind);
  const auto vocab = build_vocabulary(hs, kind);
  EvalReport rep;
  rep.experiment = "evaluate";
  for (KtArch arch : eval_archs(c)) {
    for (EmbeddingMode mode : {EmbeddingMode::random_id, EmbeddingMode::enriched_frozen}) {
      const auto spec = kt_spec(c, arch, mode);
      if (is_enriched(mode) && kind == ItemKind::kc) continue;
      for (int f = 0; f < nfolds; ++f) {
        auto model = build_kt_model(arch, mode, kind, vocab, is_enriched(mode) ? &*emb : nullptr, spec.train);
        train_kt(model, select_fold(hs, folds, f, false));
        const auto test = select_fold(hs, folds, f, true);
        rep.rows.push_back({"next_step", variant_name(spec), f, 1.0, evaluate_model(model, test, workers).auc});
        if (c.eval.multi_step && kind == ItemKind::question) {
          const KtInference inf(model);
          for (auto ms : {MultiStepMode::non_accumulative, MultiStepMode::accumulative}) {
            const auto r = multi_step_eval(inf, test, c.eval.observed_fraction, ms, workers);
            rep.rows.push_back({"multi_step_" + to_string(ms), variant_name(spec), f, 1.0, r.auc});
          }
        }
      }
    }
  }
  return rep;
}

inline std::vector<PcaPoint> embedding_pca(const EmbeddingTable& t, const std::vector<AnnotatedQuestion>& corpus,
                                           const ClusterAssignment& clusters) {
  if (t.rows.size() < 2) return {};
  DenseMatrix x(t.rows.size(), t.dim);
  std::vector<QuestionId> ids;
  std::size_t r = 0;
  for (const auto& [id, v] : t.rows) {
    std::copy(v.begin(), v.end(), x.row(r++).begin());
    ids.push_back(id);
  }
  const auto proj = pca_2d(x, 0);
  std::map<QuestionId, std::string> label;
  for (const auto& q : corpus)
    if (!q.kcs.empty()) label[q.id()] = "cluster" + std::to_string(clusters.cluster_of_text(q.kcs[0]));
  std::vector<PcaPoint> out;
  for (std::size_t i = 0; i < ids.size(); ++i) out.push_back({ids[i], proj(i, 0), proj(i, 1), label[ids[i]]});
  return out;
}

inline SweepConfig sweep_config(const RunConfig& c) {
  SweepConfig s;
  s.fractions = parse_double_list(c.sweep.fractions);
  s.seeds = parse_seed_list(c.sweep.seeds);
  s.k = c.eval.k;
  s.folds_to_run = c.sweep.folds;
  const auto kind = parse_item_kind(c.kt_item_kind);
  for (KtArch a : eval_archs(c)) {
    s.models.push_back({a, EmbeddingMode::random_id, kind, c.kt});
    if (kind == ItemKind::question) s.models.push_back({a, EmbeddingMode::enriched_frozen, kind, c.kt});
  }
  return s;
}

inline EvalReport stage_sweep(const RunConfig& c) {
  const auto corpus = load_annotated_corpus(c);
  const auto hs = load_run_interactions(c, &corpus);
  const auto emb = load_embeddings_for(c, EmbeddingMode::enriched_frozen);
  auto rep = sensitivity_sweep(sweep_config(c), hs, &*emb, static_cast<std::size_t>(std::max(1, c.workers)));
  rep.config = config_snapshot(c);
  rep.provenance = provenance(c);
  return rep;
}

inline EvalReport stage_ablate(const RunConfig& c) {
  auto corpus = load_annotated_corpus(c);
  const auto hs = load_run_interactions(c, &corpus);
  const auto clusters = load_clusters_or_fail(c);
  AblationConfig a;
  a.variants = split_list(c.ablation.variants);
  a.cl = c.cl;
  a.encoder = c.encoder;
  a.kt = {parse_arch(c.kt_arch), EmbeddingMode::enriched_frozen, ItemKind::question, c.kt};
  a.k = c.eval.k;
  a.folds_to_run = c.ablation.folds;
  a.split_seed = c.eval.split_seed;
  auto rep = ablation_grid(corpus, clusters, hs, a, static_cast<std::size_t>(std::max(1, c.workers)));
  rep.config = config_snapshot(c);
  rep.provenance = provenance(c);
  return rep;
}

// Progress messages go to `log`; nothing timing-dependent enters the report.
inline EvalReport run_pipeline(const RunConfig& c, std::ostream& log) {
  const auto clusters = with_stage("cluster", [&] { return stage_cluster(c); });
  log << "cluster: " << clusters.size() << " kcs in " << clusters.num_clusters() << " clusters\n";
  const auto enc = with_stage("train-encoder", [&] { return stage_train_encoder(c); });
  log << "train-encoder: final loss " << (enc.loss_trace.empty() ? 0.0 : enc.loss_trace.back()) << "\n";
  const auto table = with_stage("embed", [&] { return stage_embed(c); });
  log << "embed: " << table.rows.size() << " questions, dim " << table.dim << "\n";
  for (KtArch arch : with_stage("train-kt", [&] { return eval_archs(c); })) {
    for (EmbeddingMode mode : {EmbeddingMode::random_id, EmbeddingMode::enriched_frozen}) {
      if (is_enriched(mode) && c.kt_item_kind != "question") continue;
      const auto t = with_stage("train-kt", [&] { return stage_train_kt(c, arch, mode); });
      log << "train-kt: " << t.checkpoint.filename().string() << "\n";
    }
  }
  auto rep = with_stage("evaluate", [&] { return stage_evaluate(c); });
  rep.experiment = "pipeline";
  rep.config = config_snapshot(c);
  rep.provenance = provenance(c);
  rep.pca = embedding_pca(table, load_annotated_corpus(c), clusters);
  with_stage("report", [&] { return emit_report(rep, c.out()); });
  log << "report: " << (c.out() / "report.json").string() << "\n";
  return rep;
}

struct SynthOutputs {
  std::filesystem::path questions, corpus, interactions, fixture;
};

// Writes questions.jsonl (texts and answers only), corpus.jsonl (reference
// annotations), interactions.jsonl and mock_fixture.jsonl into out_dir.
inline SynthOutputs stage_synth(const RunConfig& c) {
  const auto data = generate_synthetic(c.synth, c.synth_seed);
  SynthOutputs o{c.out() / "questions.jsonl", c.out() / "corpus.jsonl", c.out() / "interactions.jsonl",
                 c.out() / "mock_fixture.jsonl"};
  std::vector<AnnotatedQuestion> bare;
  for (const auto& q : data.questions) bare.push_back({q.question, {}, {}, {}});
  save_corpus(o.questions, bare);
  save_corpus(o.corpus, data.questions);
  save_interactions(o.interactions, data.histories);
  write_file(o.fixture, mock_fixture_for(data.questions));
  return o;
}

}  // namespace kcqrl
