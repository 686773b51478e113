#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kcqrl/errors.hpp"
#include "kcqrl/numerics.hpp"
#include "kcqrl/util.hpp"

namespace kcqrl {

using QuestionId = std::int64_t;
using KcId = std::int64_t;
using StudentId = std::int64_t;

struct Question {
  QuestionId id = 0;
  std::string text;
  std::optional<std::string> final_answer;

  friend bool operator==(const Question&, const Question&) = default;
};

// 1-based (step index, kc index) pairs.
using StepKcPairs = std::set<std::pair<int, int>>;

struct AnnotatedQuestion {
  Question question;
  std::vector<std::string> steps;
  std::vector<std::string> kcs;
  StepKcPairs step_kc_pairs;

  QuestionId id() const { return question.id; }
  bool annotated() const { return !kcs.empty(); }

  // 1-based KC indices mapped to 1-based step k.
  std::vector<int> kcs_of_step(int k) const {
    std::vector<int> out;
    for (const auto& [s, c] : step_kc_pairs)
      if (s == k) out.push_back(c);
    return out;
  }

  friend bool operator==(const AnnotatedQuestion&, const AnnotatedQuestion&) = default;
};

struct Exercise {
  QuestionId question_id = 0;
  std::vector<KcId> kc_ids;
  int response = 0;

  friend bool operator==(const Exercise&, const Exercise&) = default;
};

struct StudentHistory {
  StudentId student_id = 0;
  std::vector<Exercise> exercises;

  friend bool operator==(const StudentHistory&, const StudentHistory&) = default;
};

struct FoldAssignment {
  int k = 0;
  std::map<StudentId, int> fold_of_student;

  std::vector<StudentId> students_in(int fold) const {
    std::vector<StudentId> out;
    for (const auto& [s, f] : fold_of_student)
      if (f == fold) out.push_back(s);
    return out;
  }
};

// Throws InputError naming the question when an invariant is broken.
// Pre-annotation records (no KCs) may carry neither steps' pairs nor KCs.
inline void validate_question(const AnnotatedQuestion& q) {
  const std::string who = "question " + std::to_string(q.id());
  if (trim(q.question.text).empty()) throw InputError(who + ": empty text");
  const int n = static_cast<int>(q.steps.size());
  const int m = static_cast<int>(q.kcs.size());
  if (m == 0) {
    if (!q.step_kc_pairs.empty()) throw InputError(who + ": step_kc_pairs given without kcs");
    return;
  }
  std::vector<bool> step_seen(n + 1, false), kc_seen(m + 1, false);
  for (const auto& [s, c] : q.step_kc_pairs) {
    if (s < 1 || s > n) {
      throw InputError(who + ": illegal pair " + std::to_string(s) + "-" + std::to_string(c) + " (only " +
                       std::to_string(n) + " steps)");
    }
    if (c < 1 || c > m) {
      throw InputError(who + ": illegal pair " + std::to_string(s) + "-" + std::to_string(c) + " (only " +
                       std::to_string(m) + " kcs)");
    }
    step_seen[s] = kc_seen[c] = true;
  }
  for (int s = 1; s <= n; ++s)
    if (!step_seen[s]) throw InputError(who + ": step " + std::to_string(s) + " is not mapped to any kc");
  // With zero steps there are no pairs, so KC coverage only applies when N >= 1.
  if (n > 0) {
    for (int c = 1; c <= m; ++c)
      if (!kc_seen[c]) throw InputError(who + ": kc " + std::to_string(c) + " is not mapped to any step");
  }
}

// ---- JSONL serialization ----

inline nlohmann::ordered_json to_json(const AnnotatedQuestion& q) {
  nlohmann::ordered_json j;
  j["id"] = q.question.id;
  j["text"] = q.question.text;
  j["final_answer"] = q.question.final_answer ? nlohmann::ordered_json(*q.question.final_answer) : nullptr;
  j["steps"] = q.steps;
  j["kcs"] = q.kcs;
  auto pairs = nlohmann::ordered_json::array();
  for (const auto& [s, c] : q.step_kc_pairs) pairs.push_back({s, c});
  j["step_kc_pairs"] = pairs;
  return j;
}

inline std::string serialize_corpus(const std::vector<AnnotatedQuestion>& qs) {
  std::string out;
  for (const auto& q : qs) {
    out += to_json(q).dump();
    out += '\n';
  }
  return out;
}

inline AnnotatedQuestion question_from_json(const nlohmann::json& j) {
  AnnotatedQuestion q;
  q.question.id = j.at("id").get<QuestionId>();
  q.question.text = j.at("text").get<std::string>();
  if (j.contains("final_answer") && !j["final_answer"].is_null())
    q.question.final_answer = j["final_answer"].get<std::string>();
  if (j.contains("steps")) q.steps = j["steps"].get<std::vector<std::string>>();
  if (j.contains("kcs")) q.kcs = j["kcs"].get<std::vector<std::string>>();
  if (j.contains("step_kc_pairs")) {
    for (const auto& p : j["step_kc_pairs"]) {
      if (!p.is_array() || p.size() != 2) throw InputError("step_kc_pairs entries must be [int,int]");
      q.step_kc_pairs.insert({p[0].get<int>(), p[1].get<int>()});
    }
  }
  return q;
}

inline std::vector<AnnotatedQuestion> parse_corpus(std::string_view text) {
  std::vector<AnnotatedQuestion> out;
  std::unordered_set<QuestionId> ids;
  const auto lines = split_lines(text);
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    if (trim(lines[ln]).empty()) continue;
    AnnotatedQuestion q;
    try {
      q = question_from_json(nlohmann::json::parse(lines[ln]));
    } catch (const nlohmann::json::exception& e) {
      throw InputError("corpus line " + std::to_string(ln + 1) + ": " + e.what());
    } catch (const InputError& e) {
      throw InputError("corpus line " + std::to_string(ln + 1) + ": " + e.what());
    }
    validate_question(q);
    if (!ids.insert(q.id()).second) throw InputError("question " + std::to_string(q.id()) + ": duplicate id");
    out.push_back(std::move(q));
  }
  return out;
}

inline std::vector<AnnotatedQuestion> load_corpus(const std::filesystem::path& path) {
  return parse_corpus(read_file(path));
}

inline void save_corpus(const std::filesystem::path& path, const std::vector<AnnotatedQuestion>& qs) {
  write_file(path, serialize_corpus(qs));
}

inline std::string serialize_interactions(const std::vector<StudentHistory>& hs) {
  std::string out;
  for (const auto& h : hs) {
    nlohmann::ordered_json j;
    j["student_id"] = h.student_id;
    auto ex = nlohmann::ordered_json::array();
    for (const auto& e : h.exercises) {
      nlohmann::ordered_json je;
      je["q"] = e.question_id;
      je["kcs"] = e.kc_ids;
      je["r"] = e.response;
      ex.push_back(std::move(je));
    }
    j["exercises"] = std::move(ex);
    out += j.dump();
    out += '\n';
  }
  return out;
}

// When `corpus` is given, every question id must exist in it.
inline std::vector<StudentHistory> parse_interactions(std::string_view text,
                                                      const std::vector<AnnotatedQuestion>* corpus = nullptr) {
  std::unordered_set<QuestionId> known;
  if (corpus)
    for (const auto& q : *corpus) known.insert(q.id());
  std::vector<StudentHistory> out;
  std::unordered_set<StudentId> seen;
  const auto lines = split_lines(text);
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    if (trim(lines[ln]).empty()) continue;
    const std::string where = "interactions line " + std::to_string(ln + 1);
    StudentHistory h;
    try {
      const auto j = nlohmann::json::parse(lines[ln]);
      h.student_id = j.at("student_id").get<StudentId>();
      for (const auto& je : j.at("exercises")) {
        Exercise e;
        e.question_id = je.at("q").get<QuestionId>();
        if (je.contains("kcs")) e.kc_ids = je["kcs"].get<std::vector<KcId>>();
        const auto& r = je.at("r");
        if (!r.is_number_integer() || (r.get<long long>() != 0 && r.get<long long>() != 1)) {
          throw InputError("response must be 0 or 1, got " + r.dump());
        }
        e.response = r.get<int>();
        if (corpus && !known.count(e.question_id)) {
          throw InputError("unknown question_id " + std::to_string(e.question_id));
        }
        h.exercises.push_back(std::move(e));
      }
    } catch (const nlohmann::json::exception& e) {
      throw InputError(where + ": " + e.what());
    } catch (const InputError& e) {
      throw InputError(where + ": " + e.what());
    }
    if (h.exercises.empty()) throw InputError(where + ": student " + std::to_string(h.student_id) + " has no exercises");
    if (!seen.insert(h.student_id).second) {
      throw InputError(where + ": duplicate student_id " + std::to_string(h.student_id));
    }
    out.push_back(std::move(h));
  }
  return out;
}

inline std::vector<StudentHistory> load_interactions(const std::filesystem::path& path,
                                                     const std::vector<AnnotatedQuestion>* corpus = nullptr) {
  return parse_interactions(read_file(path), corpus);
}

inline void save_interactions(const std::filesystem::path& path, const std::vector<StudentHistory>& hs) {
  write_file(path, serialize_interactions(hs));
}

// ---- splitting ----

inline std::vector<StudentId> sorted_student_ids(const std::vector<StudentHistory>& hs) {
  std::vector<StudentId> ids;
  for (const auto& h : hs) ids.push_back(h.student_id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

// Student-level k-fold partition. Students are canonically ordered by id
// before the seeded shuffle, so input order does not matter.
inline FoldAssignment split_by_student(const std::vector<StudentHistory>& hs, int k, std::uint64_t seed) {
  if (k < 2) throw InputError("split_by_student: k must be >= 2");
  if (static_cast<std::size_t>(k) > hs.size()) {
    throw InputError("split_by_student: k=" + std::to_string(k) + " exceeds " + std::to_string(hs.size()) +
                     " students");
  }
  auto ids = sorted_student_ids(hs);
  Rng rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  FoldAssignment fa;
  fa.k = k;
  for (std::size_t i = 0; i < ids.size(); ++i) fa.fold_of_student[ids[i]] = static_cast<int>(i % k);
  return fa;
}

// Histories of the given fold (test) or all other folds (train), in input order.
inline std::vector<StudentHistory> select_fold(const std::vector<StudentHistory>& hs, const FoldAssignment& fa,
                                               int fold, bool in_fold) {
  std::vector<StudentHistory> out;
  for (const auto& h : hs) {
    const bool is_in = fa.fold_of_student.at(h.student_id) == fold;
    if (is_in == in_fold) out.push_back(h);
  }
  return out;
}

// ceil(fraction * N) students drawn without replacement; input order kept.
inline std::vector<StudentHistory> subsample_students(const std::vector<StudentHistory>& hs, double fraction,
                                                      std::uint64_t seed) {
  if (!(fraction > 0.0) || fraction > 1.0) {
    throw InputError("subsample_students: fraction must be in (0,1], got " + format_double(fraction));
  }
  const auto n = hs.size();
  const auto m = std::min<std::size_t>(
      n, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9)));
  auto ids = sorted_student_ids(hs);
  Rng rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  std::unordered_set<StudentId> keep(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(m));
  std::vector<StudentHistory> out;
  for (const auto& h : hs)
    if (keep.count(h.student_id)) out.push_back(h);
  return out;
}

// ---- synthetic generator ----

struct SynthConfig {
  int num_questions = 50;
  int num_kcs = 10;
  int num_students = 200;
  int seq_len = 50;
  double learn_rate = 0.1;       // mastery gain per practice: m += rate * (1 - m)
  double guess = 0.2;
  double slip = 0.1;
  double init_mastery_max = 1.0;  // initial mastery ~ U(0, max) per (student, kc)
  double multi_kc_prob = 0.2;    // chance a question exercises a second KC
  bool force_mastery = false;    // mastery fixed to 1
};

struct SyntheticData {
  std::vector<AnnotatedQuestion> questions;
  std::vector<StudentHistory> histories;
  std::vector<std::vector<KcId>> true_kcs;          // per question (same order)
  std::vector<std::vector<double>> correct_prob;    // per student, per exercise
  std::vector<std::string> kc_names;                // indexed by KcId
};

namespace detail {

struct Topic {
  const char* name;
  std::vector<const char*> words;
};

inline const std::vector<Topic>& synth_topics() {
  static const std::vector<Topic> topics = {
      {"addition", {"sum", "add", "plus", "total"}},
      {"subtraction", {"difference", "minus", "subtract", "remaining"}},
      {"multiplication", {"product", "times", "multiply", "groups"}},
      {"division", {"quotient", "divide", "share", "equally"}},
      {"fractions", {"numerator", "denominator", "fraction", "half"}},
      {"percentages", {"percent", "discount", "rate", "proportion"}},
      {"geometry", {"triangle", "angle", "perimeter", "area"}},
      {"equations", {"unknown", "variable", "solve", "equation"}},
      {"factoring", {"factor", "common", "prime", "divisor"}},
      {"sequences", {"pattern", "term", "sequence", "next"}},
      {"probability", {"chance", "dice", "outcome", "likely"}},
      {"measurement", {"length", "meters", "weight", "volume"}},
  };
  return topics;
}

inline std::string topic_name(int k) {
  const auto& t = synth_topics();
  return k < static_cast<int>(t.size()) ? t[k].name : "topic" + std::to_string(k);
}

inline std::string topic_word(int k, int w) {
  const auto& t = synth_topics();
  if (k < static_cast<int>(t.size())) return t[k].words[w % t[k].words.size()];
  return "t" + std::to_string(k) + "w" + std::to_string(w % 4);
}

}  // namespace detail

inline SyntheticData generate_synthetic(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.num_questions <= 0 || cfg.num_students <= 0 || cfg.num_kcs <= 0 || cfg.seq_len <= 0) {
    throw InputError("generate_synthetic: questions, kcs, students and seq_len must all be positive");
  }
  if (cfg.guess < 0 || cfg.guess > 1 || cfg.slip < 0 || cfg.slip > 1) {
    throw InputError("generate_synthetic: guess and slip must lie in [0,1]");
  }
  Rng rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto pick = [&](int n) { return static_cast<int>(std::uniform_int_distribution<int>(0, n - 1)(rng)); };

  static const char* openers[] = {"Find the", "Compute the", "Determine the", "What is the"};
  static const char* fillers[] = {"given", "value", "result", "each", "using", "number", "problem", "exact"};
  static const char* kc_forms[] = {"Understanding of %s", "Understanding of %s.", "Ability to perform %s"};

  SyntheticData out;
  for (int k = 0; k < cfg.num_kcs; ++k) out.kc_names.push_back(detail::topic_name(k));

  for (int i = 0; i < cfg.num_questions; ++i) {
    std::vector<KcId> kcs{i % cfg.num_kcs};
    if (cfg.num_kcs > 1 && unif(rng) < cfg.multi_kc_prob) {
      int second = pick(cfg.num_kcs - 1);
      if (second >= kcs[0]) ++second;
      kcs.push_back(second);
    }
    AnnotatedQuestion q;
    q.question.id = i + 1;
    const int answer = 1 + pick(999);
    q.question.final_answer = std::to_string(answer);

    std::string text = openers[pick(4)];
    for (std::size_t c = 0; c < kcs.size(); ++c) {
      const int k = static_cast<int>(kcs[c]);
      text += " " + detail::topic_word(k, pick(4)) + " " + fillers[pick(8)] + " " + detail::topic_word(k, pick(4));
    }
    text += " for " + std::to_string(2 + pick(97)) + "?";
    q.question.text = text;

    for (std::size_t c = 0; c < kcs.size(); ++c) {
      const int k = static_cast<int>(kcs[c]);
      char buf[128];
      std::snprintf(buf, sizeof buf, kc_forms[pick(3)], detail::topic_name(k).c_str());
      q.kcs.emplace_back(buf);
      const int nsteps = 1 + pick(2);
      for (int s = 0; s < nsteps; ++s) {
        q.steps.push_back("Use " + detail::topic_name(k) + " with the " + detail::topic_word(k, pick(4)) + " and " +
                          detail::topic_word(k, pick(4)) + ".");
        q.step_kc_pairs.insert({static_cast<int>(q.steps.size()), static_cast<int>(c) + 1});
      }
    }
    q.steps.push_back("So the final answer is " + std::to_string(answer) + ".");
    q.step_kc_pairs.insert({static_cast<int>(q.steps.size()), 1});
    validate_question(q);
    out.questions.push_back(std::move(q));
    out.true_kcs.push_back(std::move(kcs));
  }

  for (int s = 0; s < cfg.num_students; ++s) {
    std::vector<double> mastery(cfg.num_kcs);
    for (double& m : mastery) m = cfg.force_mastery ? 1.0 : unif(rng) * cfg.init_mastery_max;
    StudentHistory h;
    h.student_id = s + 1;
    std::vector<double> probs;
    for (int t = 0; t < cfg.seq_len; ++t) {
      const int qi = pick(cfg.num_questions);
      const auto& kcs = out.true_kcs[qi];
      double m = 1.0;
      for (KcId k : kcs) m *= mastery[k];
      const double p = m * (1.0 - cfg.slip) + (1.0 - m) * cfg.guess;
      Exercise e;
      e.question_id = out.questions[qi].id();
      e.kc_ids = kcs;
      e.response = unif(rng) < p ? 1 : 0;
      h.exercises.push_back(std::move(e));
      probs.push_back(p);
      if (!cfg.force_mastery)
        for (KcId k : kcs) mastery[k] += cfg.learn_rate * (1.0 - mastery[k]);
    }
    out.histories.push_back(std::move(h));
    out.correct_prob.push_back(std::move(probs));
  }
  return out;
}

}  // namespace kcqrl
