#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "kcqrl/clustering.hpp"
#include "kcqrl/corpus.hpp"
#include "kcqrl/encoder.hpp"
#include "kcqrl/errors.hpp"
#include "kcqrl/kt.hpp"
#include "kcqrl/numerics.hpp"
#include "kcqrl/util.hpp"

namespace kcqrl {

// ---- AUC ----

// Mann-Whitney U with average ranks for ties, divided by (#pos * #neg).
inline double auc(std::span<const int> labels, std::span<const double> scores) {
  if (labels.size() != scores.size()) throw InputError("auc: labels and scores differ in length");
  const std::size_t n = labels.size();
  std::size_t pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw InputError("auc: labels must be 0 or 1");
    pos += static_cast<std::size_t>(l);
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw InputError("auc: both classes must be present");
  for (double s : scores)
    if (std::isnan(s)) throw NumericalError("auc: NaN score");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;  // ranks are 1-based
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]] == 1) rank_sum += avg_rank;
    i = j + 1;
  }
  const double p = static_cast<double>(pos);
  const double u = rank_sum - p * (p + 1.0) / 2.0;
  return u / (p * static_cast<double>(neg));
}

inline double auc(const std::vector<ScoredLabel>& pairs) {
  std::vector<int> l;
  std::vector<double> s;
  l.reserve(pairs.size());
  s.reserve(pairs.size());
  for (const auto& p : pairs) {
    l.push_back(p.label);
    s.push_back(p.score);
  }
  return auc(l, s);
}

// ---- protocols ----

struct EvalFragment {
  std::vector<ScoredLabel> pairs;
  double auc = 0.0;
  std::size_t skipped = 0;  // histories too short for the protocol
};

// One (label, score) pair per position t+1 >= 2, pooled over students.
template <NextResponsePredictor P>
EvalFragment next_step_eval(const P& model, const std::vector<StudentHistory>& histories, std::size_t workers = 1) {
  if (histories.empty()) throw InputError("next_step_eval: empty test set");
  std::vector<std::vector<ScoredLabel>> per(histories.size());
  parallel_ordered(histories.size(), workers, [&](std::size_t i) {
    const auto stream = question_stream(histories[i]);
    for (std::size_t t = 1; t < stream.size(); ++t) {
      per[i].push_back({stream[t].response, model.predict_next(std::span(stream).first(t), stream[t].item)});
    }
  });
  EvalFragment f;
  for (auto& p : per) f.pairs.insert(f.pairs.end(), p.begin(), p.end());
  if (f.pairs.empty()) throw InputError("next_step_eval: no history has two or more exercises");
  f.auc = auc(f.pairs);
  return f;
}

// Dispatches on the model's item kind; KC-sequence models use the
// leakage-free expansion.
inline EvalFragment evaluate_model(const KtModel& model, const std::vector<StudentHistory>& histories,
                                   std::size_t workers = 1) {
  const KtInference inf(model);
  if (model.kind == ItemKind::question) return next_step_eval(inf, histories, workers);
  if (histories.empty()) throw InputError("evaluate_model: empty test set");
  std::vector<std::vector<ScoredLabel>> per(histories.size());
  parallel_ordered(histories.size(), workers,
                   [&](std::size_t i) { per[i] = evaluate_kc_expanded(inf, std::vector{histories[i]}); });
  EvalFragment f;
  for (auto& p : per) f.pairs.insert(f.pairs.end(), p.begin(), p.end());
  f.auc = auc(f.pairs);
  return f;
}

enum class MultiStepMode { accumulative, non_accumulative };

inline std::string to_string(MultiStepMode m) {
  return m == MultiStepMode::accumulative ? "accumulative" : "non_accumulative";
}

inline MultiStepMode parse_multi_step_mode(std::string_view s) {
  if (s == "accumulative") return MultiStepMode::accumulative;
  if (s == "non_accumulative") return MultiStepMode::non_accumulative;
  throw InputError("unknown multi-step mode '" + std::string(s) + "' (accumulative|non_accumulative)");
}

inline std::size_t observed_count(std::size_t length, double fraction) {
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(length) + 1e-9));
}

struct MultiStepTrace {
  std::size_t observed = 0;
  std::vector<ScoredLabel> pairs;  // hidden positions in order
  std::vector<Interaction> rolled; // final conditioning sequence (accumulative only)
};

// Empty trace when the history has no observed or no hidden position.
template <NextResponsePredictor P>
MultiStepTrace multi_step_history(const P& model, const StudentHistory& h, double fraction, MultiStepMode mode) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw InputError("multi_step_eval: observed_fraction must be in (0,1)");
  MultiStepTrace tr;
  const auto stream = question_stream(h);
  tr.observed = observed_count(stream.size(), fraction);
  if (tr.observed == 0 || tr.observed >= stream.size()) {
    tr.observed = 0;
    return tr;
  }
  std::vector<Interaction> prefix(stream.begin(), stream.begin() + static_cast<std::ptrdiff_t>(tr.observed));
  for (std::size_t t = tr.observed; t < stream.size(); ++t) {
    const double p = model.predict_next(prefix, stream[t].item);
    tr.pairs.push_back({stream[t].response, p});
    if (mode == MultiStepMode::accumulative) prefix.push_back({stream[t].item, p >= 0.5 ? 1 : 0});
  }
  if (mode == MultiStepMode::accumulative) tr.rolled = std::move(prefix);
  return tr;
}

template <NextResponsePredictor P>
EvalFragment multi_step_eval(const P& model, const std::vector<StudentHistory>& histories, double observed_fraction,
                             MultiStepMode mode, std::size_t workers = 1) {
  if (!(observed_fraction > 0.0 && observed_fraction < 1.0)) {
    throw InputError("multi_step_eval: observed_fraction must be in (0,1)");
  }
  if (histories.empty()) throw InputError("multi_step_eval: empty test set");
  std::vector<MultiStepTrace> per(histories.size());
  parallel_ordered(histories.size(), workers, [&](std::size_t i) {
    per[i] = multi_step_history(model, histories[i], observed_fraction, mode);
  });
  EvalFragment f;
  for (auto& tr : per) {
    if (tr.pairs.empty()) ++f.skipped;
    f.pairs.insert(f.pairs.end(), tr.pairs.begin(), tr.pairs.end());
  }
  if (f.pairs.empty()) throw InputError("multi_step_eval: every history is too short");
  f.auc = auc(f.pairs);
  return f;
}

// ---- reports ----

struct ResultRow {
  std::string experiment;
  std::string variant;
  int fold = 0;
  double fraction = 1.0;
  double auc = 0.0;
};

struct PcaPoint {
  std::int64_t id = 0;
  double x = 0.0, y = 0.0;
  std::string label;
};

struct EvalReport {
  std::string experiment;
  std::vector<ResultRow> rows;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  nlohmann::ordered_json provenance = nlohmann::ordered_json::object();  // seeds, input hashes
  std::vector<PcaPoint> pca;

  void append(const EvalReport& other) { rows.insert(rows.end(), other.rows.begin(), other.rows.end()); }
};

struct SummaryRow {
  std::string experiment, variant;
  double fraction = 1.0;
  std::vector<double> aucs;
  double mean = 0.0, std = 0.0;  // sample standard deviation; 0 for a single fold
};

inline std::vector<SummaryRow> summarize(const EvalReport& r) {
  std::vector<SummaryRow> out;
  std::map<std::tuple<std::string, std::string, double>, std::size_t> index;
  for (const auto& row : r.rows) {
    const auto key = std::make_tuple(row.experiment, row.variant, row.fraction);
    auto it = index.find(key);
    if (it == index.end()) {
      it = index.emplace(key, out.size()).first;
      out.push_back({row.experiment, row.variant, row.fraction, {}, 0.0, 0.0});
    }
    out[it->second].aucs.push_back(row.auc);
  }
  for (auto& s : out) {
    const double n = static_cast<double>(s.aucs.size());
    s.mean = std::accumulate(s.aucs.begin(), s.aucs.end(), 0.0) / n;
    double sq = 0.0;
    for (double a : s.aucs) sq += (a - s.mean) * (a - s.mean);
    s.std = s.aucs.size() > 1 ? std::sqrt(sq / (n - 1.0)) : 0.0;
  }
  return out;
}

inline std::string report_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["experiment"] = r.experiment;
  j["config"] = r.config;
  j["provenance"] = r.provenance;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"experiment", row.experiment},
                    {"variant", row.variant},
                    {"fold", row.fold},
                    {"fraction", row.fraction},
                    {"auc", row.auc}});
  }
  j["rows"] = std::move(rows);
  auto summary = nlohmann::ordered_json::array();
  for (const auto& s : summarize(r)) {
    summary.push_back({{"experiment", s.experiment},
                       {"variant", s.variant},
                       {"fraction", s.fraction},
                       {"folds", s.aucs.size()},
                       {"mean", s.mean},
                       {"std", s.std}});
  }
  j["summary"] = std::move(summary);
  return j.dump(2) + "\n";
}

inline std::string tables_csv(const EvalReport& r) {
  std::string out = "experiment,variant,fold,fraction,auc\n";
  for (const auto& row : r.rows) {
    out += row.experiment + "," + row.variant + "," + std::to_string(row.fold) + "," + format_double(row.fraction) +
           "," + format_double(row.auc) + "\n";
  }
  return out;
}

inline std::string pca_csv(const std::vector<PcaPoint>& pts) {
  std::string out = "id,x,y,label\n";
  for (const auto& p : pts) {
    out += std::to_string(p.id) + "," + format_double(p.x) + "," + format_double(p.y) + "," + p.label + "\n";
  }
  return out;
}

namespace detail {

inline std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};

}  // namespace detail

// Mean AUC per variant against fraction: a line chart when the experiment
// spans several fractions, otherwise a bar chart over variants.
inline std::string render_svg(const std::vector<SummaryRow>& rows, const std::string& title) {
  if (rows.empty()) throw InputError("render_svg: nothing to plot");
  const double W = 640, H = 400, L = 60, R = 170, T = 40, B = 50;
  const double pw = W - L - R, ph = H - T - B;
  std::vector<std::string> variants;
  std::set<double> fractions;
  for (const auto& r : rows) {
    if (std::find(variants.begin(), variants.end(), r.variant) == variants.end()) variants.push_back(r.variant);
    fractions.insert(r.fraction);
  }
  double lo = 1.0, hi = 0.0;
  for (const auto& r : rows) {
    lo = std::min(lo, r.mean);
    hi = std::max(hi, r.mean);
  }
  lo = std::max(0.0, std::floor(lo * 20.0 - 1.0) / 20.0);
  hi = std::min(1.0, std::ceil(hi * 20.0 + 1.0) / 20.0);
  if (hi <= lo) hi = lo + 0.05;
  auto ymap = [&](double v) { return T + ph * (1.0 - (v - lo) / (hi - lo)); };

  using detail::svg_num;
  std::string s;
  s += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" + svg_num(W) + "\" height=\"" +
       svg_num(H) + "\">\n";
  s += "<rect x=\"0\" y=\"0\" width=\"" + svg_num(W) + "\" height=\"" + svg_num(H) + "\" fill=\"white\"/>\n";
  s += "<text x=\"" + svg_num(L) + "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">" +
       detail::xml_escape(title) + "</text>\n";
  s += "<line x1=\"" + svg_num(L) + "\" y1=\"" + svg_num(T + ph) + "\" x2=\"" + svg_num(L + pw) + "\" y2=\"" +
       svg_num(T + ph) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + svg_num(L) + "\" y1=\"" + svg_num(T) + "\" x2=\"" + svg_num(L) + "\" y2=\"" + svg_num(T + ph) +
       "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = lo + (hi - lo) * k / 4.0;
    s += "<text x=\"" + svg_num(L - 6) + "\" y=\"" + svg_num(ymap(v) + 4) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" + svg_num(v) + "</text>\n";
  }
  s += "<text x=\"16\" y=\"" + svg_num(T + ph / 2) + "\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 " +
       svg_num(T + ph / 2) + ")\">AUC</text>\n";

  const bool line_chart = fractions.size() > 1;
  if (line_chart) {
    const double fmin = *fractions.begin(), fmax = *fractions.rbegin();
    auto xmap = [&](double f) { return L + pw * (f - fmin) / (fmax - fmin); };
    for (double f : fractions) {
      s += "<text x=\"" + svg_num(xmap(f)) + "\" y=\"" + svg_num(T + ph + 18) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" + format_double(f) + "</text>\n";
    }
    s += "<text x=\"" + svg_num(L + pw / 2) + "\" y=\"" + svg_num(H - 10) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">fraction of students</text>\n";
    for (std::size_t v = 0; v < variants.size(); ++v) {
      std::vector<std::pair<double, double>> pts;
      for (const auto& r : rows)
        if (r.variant == variants[v]) pts.emplace_back(r.fraction, r.mean);
      std::sort(pts.begin(), pts.end());
      std::string poly;
      for (const auto& [f, m] : pts) poly += svg_num(xmap(f)) + "," + svg_num(ymap(m)) + " ";
      if (!poly.empty()) poly.pop_back();
      const char* color = detail::kPalette[v % std::size(detail::kPalette)];
      s += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"2\" points=\"" + poly + "\"/>\n";
    }
  } else {
    const double slot = pw / static_cast<double>(variants.size());
    for (std::size_t v = 0; v < variants.size(); ++v) {
      double m = 0.0;
      for (const auto& r : rows)
        if (r.variant == variants[v]) m = r.mean;
      const char* color = detail::kPalette[v % std::size(detail::kPalette)];
      const double x = L + slot * static_cast<double>(v) + slot * 0.15;
      s += "<rect x=\"" + svg_num(x) + "\" y=\"" + svg_num(ymap(m)) + "\" width=\"" + svg_num(slot * 0.7) +
           "\" height=\"" + svg_num(T + ph - ymap(m)) + "\" fill=\"" + color + "\"/>\n";
    }
  }
  for (std::size_t v = 0; v < variants.size(); ++v) {
    const double y = T + 14.0 + 18.0 * static_cast<double>(v);
    const char* color = detail::kPalette[v % std::size(detail::kPalette)];
    s += "<rect x=\"" + svg_num(L + pw + 14) + "\" y=\"" + svg_num(y - 9) + "\" width=\"10\" height=\"10\" fill=\"" +
         color + "\"/>\n";
    s += "<text x=\"" + svg_num(L + pw + 30) + "\" y=\"" + svg_num(y) +
         "\" font-family=\"sans-serif\" font-size=\"11\">" + detail::xml_escape(variants[v]) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

// Writes report.json, tables.csv, pca_scatter.csv and one chart_<experiment>.svg
// per experiment; returns the written paths in order.
inline std::vector<std::filesystem::path> emit_report(const EvalReport& r, const std::filesystem::path& dir) {
  if (r.rows.empty()) throw InputError("emit_report: report has no rows");
  std::vector<std::filesystem::path> out;
  auto put = [&](const std::string& name, const std::string& content) {
    write_file(dir / name, content);
    out.push_back(dir / name);
  };
  put("report.json", report_json(r));
  put("tables.csv", tables_csv(r));
  put("pca_scatter.csv", pca_csv(r.pca));
  const auto summary = summarize(r);
  std::vector<std::string> experiments;
  for (const auto& s : summary)
    if (std::find(experiments.begin(), experiments.end(), s.experiment) == experiments.end())
      experiments.push_back(s.experiment);
  for (const auto& e : experiments) {
    std::vector<SummaryRow> sub;
    for (const auto& s : summary)
      if (s.experiment == e) sub.push_back(s);
    put("chart_" + e + ".svg", render_svg(sub, e));
  }
  return out;
}

// ---- experiment runners ----

struct KtSpec {
  KtArch arch = KtArch::recurrent;
  EmbeddingMode mode = EmbeddingMode::enriched_frozen;
  ItemKind kind = ItemKind::question;
  KtTrainConfig train;
};

inline std::string variant_name(const KtSpec& s) {
  std::string v = to_string(s.arch) + "/" + to_string(s.mode);
  if (s.kind == ItemKind::kc) v += "/kc";
  return v;
}

struct FoldResult {
  int fold = 0;
  double auc = 0.0;
  std::vector<double> loss_trace;
};

// Trains on every student outside `fold` and evaluates on the fold. The
// vocabulary spans all histories so held-out questions have table rows.
inline FoldResult run_kt_fold(const KtSpec& spec, const std::vector<StudentHistory>& all, const FoldAssignment& folds,
                              int fold, const EmbeddingTable* embeddings, std::size_t workers = 1) {
  if (is_enriched(spec.mode) && spec.kind == ItemKind::kc) {
    throw InputError("enriched embeddings are per question; use item kind 'question'");
  }
  const auto vocab = build_vocabulary(all, spec.kind);
  auto model = build_kt_model(spec.arch, spec.mode, spec.kind, vocab, embeddings, spec.train);
  const auto train = select_fold(all, folds, fold, false);
  const auto test = select_fold(all, folds, fold, true);
  FoldResult r;
  r.fold = fold;
  r.loss_trace = train_kt(model, train).loss_trace;
  r.auc = evaluate_model(model, test, workers).auc;
  return r;
}

inline std::vector<FoldResult> run_kfold(const KtSpec& spec, const std::vector<StudentHistory>& all,
                                         const EmbeddingTable* embeddings, int k, std::uint64_t split_seed,
                                         int folds_to_run, std::size_t workers = 1) {
  const auto folds = split_by_student(all, k, split_seed);
  if (folds_to_run <= 0 || folds_to_run > k) folds_to_run = k;
  std::vector<FoldResult> out;
  for (int f = 0; f < folds_to_run; ++f) out.push_back(run_kt_fold(spec, all, folds, f, embeddings, workers));
  return out;
}

struct SweepConfig {
  std::vector<double> fractions = {0.05, 0.1, 0.25, 0.5, 1.0};
  std::vector<std::uint64_t> seeds = {0};
  int k = 5;
  int folds_to_run = 1;
  std::vector<KtSpec> models;  // typically the same architecture in random_id and enriched_frozen
};

// For each fraction and seed, all models see the same student subsample and
// the same folds, so the rows pair up.
inline EvalReport sensitivity_sweep(const SweepConfig& cfg, const std::vector<StudentHistory>& histories,
                                    const EmbeddingTable* embeddings, std::size_t workers = 1) {
  if (cfg.fractions.empty() || cfg.seeds.empty() || cfg.models.empty()) {
    throw InputError("sensitivity_sweep: fractions, seeds and models must be non-empty");
  }
  EvalReport rep;
  rep.experiment = "sweep";
  for (double f : cfg.fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw InputError("sensitivity_sweep: fraction " + format_double(f) + " not in (0,1]");
  }
  for (double f : cfg.fractions) {
    for (std::size_t si = 0; si < cfg.seeds.size(); ++si) {
      const auto seed = cfg.seeds[si];
      const auto sub = subsample_students(histories, f, seed);
      for (const auto& m : cfg.models) {
        KtSpec spec = m;
        spec.train.seed = m.train.seed + seed;
        for (const auto& fr : run_kfold(spec, sub, embeddings, cfg.k, seed, cfg.folds_to_run, workers)) {
          rep.rows.push_back({"sweep", variant_name(m),
                              static_cast<int>(si) * cfg.folds_to_run + fr.fold, f, fr.auc});
        }
      }
    }
  }
  return rep;
}

// ---- ablations ----

inline const std::vector<std::string>& ablation_variant_keys() {
  static const std::vector<std::string> keys = {"a", "b", "c", "d", "e", "f", "g", "full"};
  return keys;
}

inline std::string ablation_description(std::string_view v) {
  if (v == "a") return "question text, untrained encoder";
  if (v == "b") return "question + KCs, untrained encoder";
  if (v == "c") return "question + steps, untrained encoder";
  if (v == "d") return "question + steps + KCs, untrained encoder";
  if (v == "e") return "KCs only, untrained encoder";
  if (v == "f") return "contrastive, no false-negative mask";
  if (v == "g") return "contrastive, no step loss";
  if (v == "full") return "contrastive, full";
  throw InputError("unknown ablation variant '" + std::string(v) + "' (a-g, full)");
}

inline bool is_text_variant(std::string_view v) { return v == "a" || v == "b" || v == "c" || v == "d" || v == "e"; }

inline std::string ablation_input_text(const AnnotatedQuestion& q, std::string_view v) {
  ablation_description(v);
  if (!is_text_variant(v)) throw InputError("variant " + std::string(v) + " has no concatenated input text");
  std::vector<std::string> parts;
  if (v != "e") parts.push_back(q.question.text);
  if (v == "c" || v == "d") parts.insert(parts.end(), q.steps.begin(), q.steps.end());
  if (v == "b" || v == "d" || v == "e") parts.insert(parts.end(), q.kcs.begin(), q.kcs.end());
  std::string out;
  for (const auto& p : parts) {
    if (!out.empty()) out.push_back(' ');
    out += p;
  }
  if (out.empty()) throw InputError("question " + std::to_string(q.id()) + ": empty input for variant " + std::string(v));
  return out;
}

// Question embeddings for one ablation variant.
inline EmbeddingTable ablation_embeddings(std::string_view v, const std::vector<AnnotatedQuestion>& corpus,
                                          const ClusterAssignment& clusters, const ClTrainConfig& cl,
                                          const EncoderConfig& enc) {
  ablation_description(v);
  if (is_text_variant(v)) {
    const auto encoder = make_encoder(corpus, enc, cl.seed);
    EmbeddingTable t;
    t.dim = enc.emb_dim;
    for (const auto& q : corpus) t.rows[q.id()] = encode(encoder, Role::question, ablation_input_text(q, v));
    return t;
  }
  ClTrainConfig c = cl;
  if (v == "f") c.mask = false;
  if (v == "g") c.alpha = 0.0;
  const auto trained = train_encoder(corpus, clusters, c, enc);
  std::vector<QuestionEmbedding> es;
  for (const auto& q : corpus) es.push_back(embed_question(trained.encoder, q));
  return aggregated_table(es);
}

struct AblationConfig {
  std::vector<std::string> variants = ablation_variant_keys();
  ClTrainConfig cl;
  EncoderConfig encoder;
  KtSpec kt;  // mode is forced to an enriched mode
  int k = 5;
  int folds_to_run = 1;
  std::uint64_t split_seed = 0;
};

inline EvalReport ablation_grid(const std::vector<AnnotatedQuestion>& corpus, const ClusterAssignment& clusters,
                                const std::vector<StudentHistory>& histories, const AblationConfig& cfg,
                                std::size_t workers = 1) {
  if (cfg.variants.empty()) throw InputError("ablation_grid: no variants");
  for (const auto& v : cfg.variants) ablation_description(v);
  KtSpec spec = cfg.kt;
  if (!is_enriched(spec.mode)) spec.mode = EmbeddingMode::enriched_frozen;
  EvalReport rep;
  rep.experiment = "ablation";
  std::vector<EmbeddingTable> tables(cfg.variants.size());
  parallel_ordered(cfg.variants.size(), workers, [&](std::size_t i) {
    tables[i] = ablation_embeddings(cfg.variants[i], corpus, clusters, cfg.cl, cfg.encoder);
  });
  for (std::size_t i = 0; i < cfg.variants.size(); ++i) {
    for (const auto& fr : run_kfold(spec, histories, &tables[i], cfg.k, cfg.split_seed, cfg.folds_to_run, workers)) {
      rep.rows.push_back({"ablation", cfg.variants[i], fr.fold, 1.0, fr.auc});
    }
  }
  return rep;
}

}  // namespace kcqrl
