// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "fixtures.hpp"

using namespace kcqrl;
using namespace fixtures;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(const std::string& name, double time_limit_s, const std::function<Outcome()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (time_limit_s > 0 && secs >= time_limit_s) {
    o.pass = false;
    o.detail += " [over time limit " + std::to_string(time_limit_s) + " s]";
  }
  if (!o.pass) ++failures;
  std::printf("%s %s: %s (%.2f s)\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string num(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

std::vector<const AnnotatedQuestion*> pointers(const std::vector<AnnotatedQuestion>& qs) {
  std::vector<const AnnotatedQuestion*> out;
  for (const auto& q : qs) out.push_back(&q);
  return out;
}

RunConfig demo_config() {
  RunConfig c;
  load_config_file(c, std::filesystem::path(KCQRL_SOURCE_DIR) / "configs" / "demo.json");
  return c;
}

Outcome gradient_exactness() {
  const auto corpus = toy_corpus();
  const auto clusters = toy_clusters(corpus);
  auto enc = make_encoder(corpus, small_encoder(8), 7);
  Rng rng(11);
  for (auto* p : enc.weights.params()) fill_uniform(p->value, 0.8, rng);
  const auto batch = pointers(corpus);
  const ClLossConfig cfg{0.1, 1.0, true};
  const auto params = enc.weights.params();
  auto loss = [&](const Vec& x, Vec* grad) {
    assign_values(params, x);
    const auto r = loss_total(enc, batch, clusters, cfg, nullptr, grad != nullptr);
    if (grad) *grad = flatten_grads(params);
    return r.loss;
  };
  const auto rep = finite_diff_check(loss, flatten_values(params), 1e-6);
  return {rep.max_rel_error < 1e-4,
          "max relative error " + num(rep.max_rel_error) + " over " + std::to_string(rep.checked) + " coordinates"};
}

Outcome loss_oracle() {
  const auto corpus = toy_corpus();
  const auto clusters = toy_clusters(corpus);
  const auto enc = make_encoder(corpus, small_encoder(8), 3);
  std::vector<AnnotatedQuestion> two(corpus.begin(), corpus.begin() + 2);
  auto e = enc;
  double worst = 0.0;
  for (double alpha : {1.0, 0.5}) {
    for (bool mask : {true, false}) {
      const double lib = loss_total(e, pointers(two), clusters, {0.1, alpha, mask}, nullptr, false).loss;
      const double ref = oracle_loss(oracle_batch(enc, pointers(two), clusters), 0.1, alpha, mask);
      worst = std::max(worst, std::abs(lib - ref));
    }
  }
  return {worst <= 1e-9, "max |library - scalar| " + num(worst)};
}

Outcome masking_exactness() {
  // q1 and q2 each carry a KC in the shared "addition" cluster, and q4/q3
  // share "multiplication facts".
  const auto corpus = toy_corpus();
  const auto clusters = toy_clusters(corpus);
  auto enc = make_encoder(corpus, small_encoder(8), 5);
  const auto batch = pointers(corpus);
  const double masked = loss_total(enc, batch, clusters, {0.1, 1.0, true}, nullptr, false).loss;
  const double unmasked = loss_total(enc, batch, clusters, {0.1, 1.0, false}, nullptr, false).loss;
  const double deleted = oracle_loss(oracle_batch(enc, batch, clusters), 0.1, 1.0, true);
  const double diff = std::abs(masked - deleted);
  return {diff <= 1e-12 && masked != unmasked,
          "|masked - deleted-pairs| " + num(diff) + ", masked " + num(masked) + " vs unmasked " + num(unmasked)};
}

Outcome trivial_zeros() {
  // Single-KC question and a question whose two KCs fall in one cluster.
  std::vector<AnnotatedQuestion> qs = {
      make_question(1, "multiply 6 by 7", {"six groups of seven", "forty two"}, {"Multiplication facts"},
                    {{1, 1}, {2, 1}}),
      make_question(2, "add 3 and 4", {"three plus four", "seven"},
                    {"Understanding of addition", "understanding of addition."}, {{1, 1}, {2, 2}, {2, 1}}),
  };
  auto clusters = toy_clusters(toy_corpus());
  auto enc = make_encoder(qs, small_encoder(8), 9);
  std::string detail;
  bool ok = true;
  for (const auto& q : qs) {
    for (double alpha : {1.0, 0.3}) {
      const auto r = loss_total(enc, {&q}, clusters, {0.1, alpha, true}, nullptr, false);
      ok = ok && r.question_term == 0.0 && r.step_term == 0.0 && r.loss == 0.0;
      detail += "q" + std::to_string(q.id()) + " (" + num(r.question_term) + ", " + num(r.step_term) + ") ";
    }
  }
  return {ok, "question/step terms " + detail};
}

Outcome auc_oracle() {
  Rng rng(2024);
  std::uniform_int_distribution<int> len(2, 1000);
  std::uniform_int_distribution<int> levels(1, 20);
  int done = 0, mismatches = 0;
  while (done < 1000) {
    const int n = len(rng);
    const int k = levels(rng);  // few distinct scores -> many ties
    std::uniform_int_distribution<int> score(0, k);
    std::bernoulli_distribution coin(0.5);
    std::vector<int> labels(static_cast<std::size_t>(n));
    std::vector<double> scores(static_cast<std::size_t>(n));
    int pos = 0;
    for (int i = 0; i < n; ++i) {
      labels[static_cast<std::size_t>(i)] = coin(rng) ? 1 : 0;
      pos += labels[static_cast<std::size_t>(i)];
      scores[static_cast<std::size_t>(i)] = static_cast<double>(score(rng)) / static_cast<double>(k);
    }
    if (pos == 0 || pos == n) continue;
    if (auc(labels, scores) != auc_pairs(labels, scores)) ++mismatches;
    ++done;
  }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches over " + std::to_string(done) + " instances"};
}

Outcome cl_separation() {
  const auto data = generate_synthetic(SynthConfig{}, 0);
  const auto clusters = cluster_corpus(data.questions, HashedTokenProvider(256), {});
  ClTrainConfig cfg;
  cfg.epochs = 200;
  cfg.seed = 0;
  const auto demo = demo_config();
  cfg.lr = demo.cl.lr;
  cfg.batch_size = demo.cl.batch_size;
  const auto t = train_encoder(data.questions, clusters, cfg, demo.encoder);
  std::vector<Vec> kc_vecs;
  for (const auto& text : clusters.kc_texts) kc_vecs.push_back(encode(t.encoder, Role::kc, text));
  double own = 0.0, other = 0.0;
  for (const auto& q : data.questions) {
    const Vec zq = encode(t.encoder, Role::question, q.question.text);
    std::set<int> own_clusters;
    double s = 0.0;
    for (const auto& c : q.kcs) {
      own_clusters.insert(clusters.cluster_of_text(c));
      s += cosine(zq, kc_vecs[static_cast<std::size_t>(clusters.id_of(c))]);
    }
    own += s / static_cast<double>(q.kcs.size());
    double o = 0.0;
    int n = 0;
    for (std::size_t id = 0; id < kc_vecs.size(); ++id) {
      if (own_clusters.count(clusters.cluster_of[id])) continue;
      o += cosine(zq, kc_vecs[id]);
      ++n;
    }
    other += o / n;
  }
  own /= static_cast<double>(data.questions.size());
  other /= static_cast<double>(data.questions.size());
  return {own - other >= 0.2, "own-KC " + num(own) + " - other-cluster " + num(other) + " = " + num(own - other)};
}

Outcome directional() {
  const auto demo = demo_config();
  const std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::map<std::string, double> mean;
  for (auto seed : seeds) {
    auto synth = demo.synth;
    const auto data = generate_synthetic(synth, seed);
    const auto clusters =
        cluster_corpus(data.questions, HashedTokenProvider(static_cast<std::size_t>(demo.cluster.provider_dim)),
                       {demo.cluster.threshold, demo.cluster.min_size});
    auto cl = demo.cl;
    cl.seed = seed;
    const auto enc = train_encoder(data.questions, clusters, cl, demo.encoder).encoder;
    std::vector<QuestionEmbedding> es;
    for (const auto& q : data.questions) es.push_back(embed_question(enc, q));
    const auto table = aggregated_table(es);
    for (KtArch arch : {KtArch::recurrent, KtArch::attention}) {
      for (EmbeddingMode mode : {EmbeddingMode::random_id, EmbeddingMode::enriched_frozen}) {
        KtSpec spec{arch, mode, ItemKind::question, demo.kt};
        spec.train.seed = seed;
        const auto r = run_kfold(spec, data.histories, &table, 5, seed, 1);
        mean[variant_name(spec)] += r.front().auc / static_cast<double>(seeds.size());
      }
    }
  }
  bool ok = true;
  std::string detail;
  for (KtArch arch : {KtArch::recurrent, KtArch::attention}) {
    const auto a = to_string(arch);
    const double gap = mean[a + "/enriched_frozen"] - mean[a + "/random_id"];
    ok = ok && gap >= 0.02;
    detail += a + ": enriched " + num(mean[a + "/enriched_frozen"]) + " vs random " + num(mean[a + "/random_id"]) +
              " (gap " + num(gap) + "); ";
  }
  return {ok, detail};
}

Outcome leakage_free() {
  // Three exercises with two KCs each: q1 {10, 11}, q2 {12, 13}, q3 {14, 15}.
  StudentHistory h;
  h.student_id = 1;
  h.exercises = {{1, {10, 11}, 1}, {2, {12, 13}, 0}, {3, {14, 15}, 1}};
  const auto prefix = kc_expanded_prefix(h, 2);
  const std::vector<Interaction> expected = {{10, 1}, {11, 1}, {12, 0}, {13, 0}};

  // Records every prefix it is asked about; KC 14 -> 0.6, KC 15 -> 0.8.
  struct Recorder {
    mutable std::vector<std::pair<std::vector<Interaction>, std::int64_t>> calls;
    double predict_next(std::span<const Interaction> p, std::int64_t item) const {
      calls.emplace_back(std::vector<Interaction>(p.begin(), p.end()), item);
      if (item == 14) return 0.6;
      if (item == 15) return 0.8;
      return 0.1;
    }
  } rec;
  const auto scored = evaluate_kc_expanded(rec, {h});
  bool ok = prefix == expected && scored.size() == 2 && scored[1].score == 0.7 && scored[1].label == 1;
  for (const auto& [p, item] : rec.calls) {
    if (item == 14 || item == 15) ok = ok && p == expected;
    for (const auto& x : p) ok = ok && x.item != 14 && x.item != 15;
  }
  return {ok, "prefix length " + std::to_string(prefix.size()) + ", aggregated score " +
                  (scored.size() == 2 ? num(scored[1].score) : std::string("n/a"))};
}

Outcome multi_step() {
  const auto hs = oracle_histories(30, 10, 12, 4);
  const OraclePredictor oracle;
  const auto acc = multi_step_eval(oracle, hs, 0.6, MultiStepMode::accumulative);
  const auto non = multi_step_eval(oracle, hs, 0.6, MultiStepMode::non_accumulative);
  const auto tr = multi_step_history(oracle, hs.front(), 0.6, MultiStepMode::non_accumulative);
  bool same = acc.pairs == non.pairs;
  return {acc.auc == 1.0 && non.auc == 1.0 && same && tr.pairs.size() == 4 && observed_count(10, 0.6) == 6,
          "AUC accumulative " + num(acc.auc) + ", non-accumulative " + num(non.auc) +
              (same ? ", identical scores" : ", scores differ") + ", predicted positions " +
              std::to_string(tr.pairs.size())};
}

Outcome annotation() {
  const auto dir = temp_dir("accept_annot");
  MockBackend backend;
  script_worked(backend);
  AnnotateStats stats;
  AnnotatedQuestion q;
  {
    AnnotationCache cache(dir / "cache.jsonl");
    q = annotate_question(backend, cache, worked_question(), &stats);
  }
  validate_question(q);
  bool ok = q.steps == worked_steps() && q.kcs == worked_kcs() && q.step_kc_pairs == parse_mapping(kLegalMapping, 4, 5);
  const auto first_calls = backend.calls();

  bool rejected = false;
  try {
    parse_mapping("5-2", 4, 5);
  } catch (const InputError&) {
    rejected = true;
  }

  MockBackend silent;  // no script: any call would throw
  AnnotateStats again;
  AnnotatedQuestion q2;
  {
    AnnotationCache cache(dir / "cache.jsonl");
    q2 = annotate_question(silent, cache, worked_question(), &again);
  }
  std::filesystem::remove_all(dir);
  ok = ok && rejected && first_calls == 3 && silent.calls() == 0 && q2 == q;
  return {ok, "first run " + std::to_string(first_calls) + " calls, rerun " + std::to_string(silent.calls()) +
                  " calls, '5-2' " + (rejected ? "rejected" : "accepted")};
}

std::string sha_of(const std::filesystem::path& p) { return sha256_hex(read_file(p)); }

Outcome determinism() {
  const auto dir = temp_dir("accept_det");
  const std::string cli = KCQRL_CLI_PATH;
  const std::string cfg = (std::filesystem::path(KCQRL_SOURCE_DIR) / "configs" / "demo.json").string();
  const auto data = dir / "data";
  auto run = [&](const std::string& args) {
    const std::string cmd = "\"" + cli + "\" --config \"" + cfg + "\" " + args + " > \"" + (dir / "log.txt").string() +
                            "\" 2>&1";
    return std::system(cmd.c_str());
  };
  if (run("--paths.out_dir \"" + data.string() + "\" synth") != 0) return {false, "synth failed"};
  // Both executions share one output directory: the report records the resolved config, paths included.
  std::vector<std::string> hashes;
  const auto out = dir / "run";
  for (const char* name : {"first run", "second run"}) {
    std::filesystem::remove_all(out);
    const std::string args = "--paths.out_dir \"" + out.string() + "\" --paths.corpus \"" +
                             (data / "corpus.jsonl").string() + "\" --paths.interactions \"" +
                             (data / "interactions.jsonl").string() + "\" pipeline";
    if (run(args) != 0) return {false, std::string(name) + " failed: " + read_file(dir / "log.txt")};
    hashes.push_back(sha_of(out / "report.json"));
  }
  std::filesystem::remove_all(dir);
  return {hashes[0] == hashes[1], "report.json sha256 " + hashes[0].substr(0, 16) + "... vs " + hashes[1].substr(0, 16) + "..."};
}

}  // namespace

int main() {
  criterion("gradient exactness", 10, gradient_exactness);
  criterion("loss oracle equivalence", 0, loss_oracle);
  criterion("masking exactness", 0, masking_exactness);
  criterion("trivial-batch zeros", 0, trivial_zeros);
  criterion("AUC oracle", 30, auc_oracle);
  criterion("CL separation", 120, cl_separation);
  criterion("directional enriched vs random", 600, directional);
  criterion("leakage-free KC expansion", 0, leakage_free);
  criterion("multi-step protocol", 0, multi_step);
  criterion("annotation pipeline", 0, annotation);
  criterion("determinism", 0, determinism);
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
