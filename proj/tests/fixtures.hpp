#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "kcqrl/kcqrl.hpp"

namespace fixtures {

using namespace kcqrl;

// The worked factoring example: 4 steps, 5 KCs.
inline Question worked_question() {
  return {101, "65*34+65*45+79*35=?", "7900"};
}

inline std::vector<std::string> worked_steps() {
  return {"First, factor out the common factor from the first two terms, which is 65. So, the expression becomes "
          "65*(34+45) + 79*35.",
          "Next, simplify the addition inside the parentheses: 34+45 = 79. So, the expression now is 65*79 + 79*35.",
          "Notice that 79 is a common factor in both terms, so factor it out: 79*(65+35).",
          "Simplify the addition inside the parentheses: 65+35 = 100. So, the final result is 79*100 = 7900."};
}

inline std::vector<std::string> worked_kcs() {
  return {"Understanding of multiplication", "Understanding of addition", "Factoring out a common factor",
          "Simplifications of expressions", "Distributive property"};
}

inline const char* kLegalMapping = "1-1, 1-3, 1-5, 2-4, 3-2, 3-5, 4-2, 4-3, 4-5";

// Mock scripted with one question's three responses.
inline void script_worked(MockBackend& b) {
  const auto q = worked_question();
  const auto steps = worked_steps();
  const auto kcs = worked_kcs();
  std::string step_text;
  for (const auto& s : steps) step_text += s + "\n";
  std::string kc_text;
  for (const auto& c : kcs) kc_text += "- " + c + "\n";
  b.script(build_solution_prompt(q), {step_text});
  b.script(build_kc_prompt(q, steps), {kc_text});
  b.script(build_mapping_prompt(q, steps, kcs), {kLegalMapping});
}

inline AnnotatedQuestion make_question(QuestionId id, std::string text, std::vector<std::string> steps,
                                       std::vector<std::string> kcs, StepKcPairs pairs) {
  AnnotatedQuestion q;
  q.question = {id, std::move(text), std::nullopt};
  q.steps = std::move(steps);
  q.kcs = std::move(kcs);
  q.step_kc_pairs = std::move(pairs);
  validate_question(q);
  return q;
}

// Four small questions; two KC texts differ only in case/punctuation so a
// hand-built cluster map can put them together.
inline std::vector<AnnotatedQuestion> toy_corpus() {
  return {
      make_question(1, "add the two numbers 3 and 4", {"three plus four", "equals seven"},
                    {"Understanding of addition", "Number sense"}, {{1, 1}, {2, 2}, {2, 1}}),
      make_question(2, "what is the total of 5 and 9", {"five plus nine is fourteen"},
                    {"understanding of addition.", "Place value"}, {{1, 1}, {1, 2}}),
      make_question(3, "multiply 6 by 7", {"six groups of seven", "forty two"},
                    {"Multiplication facts"}, {{1, 1}, {2, 1}}),
      make_question(4, "factor 12 into primes", {"twelve is two times six", "six is two times three", "done"},
                    {"Prime factorization", "Multiplication facts", "Divisibility"},
                    {{1, 1}, {1, 2}, {2, 1}, {2, 3}, {3, 1}}),
  };
}

// Clusters by kc_key with the two "addition" spellings merged.
inline ClusterAssignment toy_clusters(const std::vector<AnnotatedQuestion>& corpus) {
  auto a = singleton_clusters(corpus);
  const auto x = a.id_of("Understanding of addition");
  const auto y = a.id_of("understanding of addition.");
  a.cluster_of[static_cast<std::size_t>(y)] = a.cluster_of[static_cast<std::size_t>(x)];
  return a;
}

inline EncoderConfig small_encoder(std::size_t d = 8) { return {d, 12, d, 0.0}; }

// ---- independent scalar oracle for the contrastive objective ----

inline double cos_scalar(const Vec& a, const Vec& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    ab += a[k] * b[k];
    aa += a[k] * a[k];
    bb += b[k] * b[k];
  }
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

struct OracleBatch {
  std::vector<Vec> zq;
  std::vector<std::vector<Vec>> zs, zc;
  std::vector<std::vector<int>> cluster;
  std::vector<std::vector<std::vector<int>>> step_kcs;  // 0-based kc indices per step
};

inline OracleBatch oracle_batch(const Encoder& enc, const std::vector<const AnnotatedQuestion*>& batch,
                                const ClusterAssignment& clusters) {
  OracleBatch o;
  for (const auto* q : batch) {
    o.zq.push_back(encode(enc, Role::question, q->question.text));
    o.zs.emplace_back();
    for (const auto& s : q->steps) o.zs.back().push_back(encode(enc, Role::step, s));
    o.zc.emplace_back();
    o.cluster.emplace_back();
    for (const auto& c : q->kcs) {
      o.zc.back().push_back(encode(enc, Role::kc, c));
      o.cluster.back().push_back(clusters.cluster_of_text(c));
    }
    o.step_kcs.emplace_back();
    for (std::size_t k = 0; k < q->steps.size(); ++k) {
      std::vector<int> m;
      for (const auto& [s, c] : q->step_kc_pairs)
        if (s == static_cast<int>(k) + 1) m.push_back(c - 1);
      o.step_kcs.back().push_back(m);
    }
  }
  return o;
}

// -log(sim+ / (sim+ + sum of negatives)), negatives given as explicit vectors.
inline double info_term(const Vec& anchor, const Vec& pos, const std::vector<Vec>& negs, double tau) {
  const double sp = std::exp(cos_scalar(anchor, pos) / tau);
  double denom = sp;
  for (const auto& n : negs) denom += std::exp(cos_scalar(anchor, n) / tau);
  return -std::log(sp / denom);
}

// Direct evaluation of the batch objective; with `mask` the same-cluster
// pairs are removed from the pools before summing.
inline double oracle_loss(const OracleBatch& o, double tau, double alpha, bool mask) {
  const std::size_t nb = o.zq.size();
  double total = 0.0;
  for (std::size_t i = 0; i < nb; ++i) {
    const std::size_t m = o.zc[i].size();
    double lq = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      std::vector<Vec> negs;
      for (std::size_t ip = 0; ip < nb; ++ip) {
        if (ip == i) continue;
        for (std::size_t jp = 0; jp < o.zc[ip].size(); ++jp)
          if (!mask || o.cluster[ip][jp] != o.cluster[i][j]) negs.push_back(o.zc[ip][jp]);
      }
      lq += info_term(o.zq[i], o.zc[i][j], negs, tau);
    }
    double per_q = lq / static_cast<double>(m);
    const std::size_t n = o.zs[i].size();
    if (n > 0) {
      double ls = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const auto& mapped = o.step_kcs[i][k];
        double lk = 0.0;
        for (int j : mapped) {
          std::vector<Vec> negs;
          for (std::size_t ip = 0; ip < nb; ++ip)
            for (std::size_t jp = 0; jp < o.zc[ip].size(); ++jp)
              if (!mask || o.cluster[ip][jp] != o.cluster[i][static_cast<std::size_t>(j)])
                negs.push_back(o.zc[ip][jp]);
          lk += info_term(o.zs[i][k], o.zc[i][static_cast<std::size_t>(j)], negs, tau);
        }
        ls += lk / static_cast<double>(mapped.size());
      }
      per_q += alpha * ls / static_cast<double>(n);
    }
    total += per_q;
  }
  return total / static_cast<double>(nb);
}

// ---- AUC pair-counting oracle ----

inline double auc_pairs(const std::vector<int>& labels, const std::vector<double>& scores) {
  double num = 0.0;
  std::size_t pos = 0, neg = 0;
  for (int l : labels) (l ? pos : neg)++;
  for (std::size_t a = 0; a < labels.size(); ++a) {
    if (labels[a] != 1) continue;
    for (std::size_t b = 0; b < labels.size(); ++b) {
      if (labels[b] != 0) continue;
      if (scores[a] > scores[b]) num += 1.0;
      else if (scores[a] == scores[b]) num += 0.5;
    }
  }
  return num / (static_cast<double>(pos) * static_cast<double>(neg));
}

// ---- predictors ----

// Response is a fixed function of the question id.
inline int oracle_response(std::int64_t q) { return (q * 7 + 3) % 5 < 2 ? 1 : 0; }

struct OraclePredictor {
  double predict_next(std::span<const Interaction>, std::int64_t item) const {
    return oracle_response(item) ? 1.0 : 0.0;
  }
};

struct ConstantPredictor {
  double value = 0.5;
  double predict_next(std::span<const Interaction>, std::int64_t) const { return value; }
};

inline std::vector<StudentHistory> oracle_histories(int students, int length, int questions, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> pick(1, questions);
  std::vector<StudentHistory> out;
  for (int s = 0; s < students; ++s) {
    StudentHistory h;
    h.student_id = s + 1;
    for (int t = 0; t < length; ++t) {
      const int q = pick(rng);
      h.exercises.push_back({q, {static_cast<KcId>(q % 3)}, oracle_response(q)});
    }
    out.push_back(std::move(h));
  }
  return out;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("kcqrl_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace fixtures
