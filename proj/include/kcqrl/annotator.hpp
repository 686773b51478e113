#pragma once

// CPPHTTPLIB_OPENSSL_SUPPORT is set by the build so https base URLs work.
#include <httplib.h>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "kcqrl/corpus.hpp"
#include "kcqrl/errors.hpp"
#include "kcqrl/util.hpp"

namespace kcqrl {

// ---- prompts ----

namespace prompts {

inline constexpr std::string_view kSolution =
    "Your task is to generate clear and concise step by step solutions of the provided Math problem. "
    "Please consider the below instructions in your generation.\n"
    "\n"
    "- You will also be provided with the final answer. When generating the step by step solution, you can "
    "leverage those information pieces, but you can also use your own judgment.\n"
    "\n"
    "- It is important that your generated step by step solution should be understandable as stand-alone, "
    "meaning that the student should not need to additionally check final answer or explanation provided.\n"
    "\n"
    "- Please provide your step-by-step solution as each step in a new line. Don't enumerate the steps. "
    "Don't put any bullet points. Separate the solution steps only with one newline \\n.\n"
    "\n"
    "Question: <QUESTION TEXT>\n"
    "Final Answer: <FINAL ANSWER>\n"
    "Step by Step Solution:";

inline constexpr std::string_view kKc =
    "You will be provided with a  Math question, its final answer and its step by step solution. Your task is "
    "to provide the concise and comprehensive list of knowledge concepts in the Math curriculum required to "
    "correctly answer the questions. Please carefully follow the below instructions:\n"
    "\n"
    "- Provide multiple knowledge concepts only when it is actually needed.\n"
    "\n"
    "- Some questions may require a figure, which you won't be provided. As the step-by-step solution is "
    "already provided, Use your judgment to infer which knowledge concept(s) might be needed.\n"
    "\n"
    "- For a small set of solutions, their last step(s) might be missing due to limited token size. Use your "
    "judgment based on your input and your ability to infer how the solution would conclude.\n"
    "\n"
    "- Remember that knowledge concepts should be appropriate for Math curriculum between 1st and 8th grade. "
    "If the annotated step-by-step solution involves more advanced techniques, use your judgment for more "
    "simplified alternatives.\n"
    "\n"
    "Question: <QUESTION TEXT>\n"
    "Final Answer: <FINAL ANSWER>\n"
    "Step by Step Solution: <SOLUTION STEPS>";

inline constexpr std::string_view kMapping =
    "You are expert in Math education. You are given a Math question, its solution steps, and its knowledge "
    "concept(s), which you have annotated earlier. Your task is to associate which solution steps require "
    "which knowledge concepts. Note that all solution steps and all knowledge concepts must be mapped, while "
    "many-to-many mapping is indeed possible.\n"
    "\n"
    "Each solution step and each knowledge concept is numbered. Your output should enumerate all solution "
    "step - knowledge concept pairs as numbers.\n"
    "\n"
    "Your output should meet all the below criteria:\n"
    "\n"
    "- Each solution step has to be paired.\n"
    "\n"
    "- Each knowledge concept has to be paired.\n"
    "\n"
    "- Map a solution step with a knowledge concept only if they are relevant.\n"
    "\n"
    "- Your pairs cannot contain artificial solution steps. For instance, If there are 4 solution steps, the "
    "pair \"5-2\" is indeed illegal.\n"
    "\n"
    "- Your pairs cannot contain artificial knowledge concepts. For instance, If there are 3 knowledge "
    "concepts, the pair \"3-5\" is indeed illegal.\n"
    "\n"
    "You will output solution step - knowledge concept pairs in a comma separated manner and in a single line. "
    "For example, if there are 4 solution steps and 5 knowledge concepts, one potential output could be the "
    "following: \"1-1, 1-3, 1-5, 2-4, 3-2, 3-5, 4-2, 4-3, 4-5\".\n"
    "\n"
    "Observe that this output also meets all the criteria explained above.\n"
    "\n"
    "Now, for the given question, solution steps and knowledge concepts, please provide your mapping as the "
    "output.\n"
    "\n"
    "Question: <QUESTION TEXT>\n"
    "Solution steps: <SOLUTION STEP>\n"
    "Knowledge concepts: <ANNOTATED KCS>\n"
    "Solution step - KC mapping:";

// Substitutes each slot once, scanning the template only, so slot-like text
// inside a value is never expanded.
inline std::string fill(std::string_view tmpl, const std::vector<std::pair<std::string_view, std::string>>& slots) {
  std::string out;
  std::size_t used = 0;
  for (std::size_t i = 0; i < tmpl.size();) {
    bool hit = false;
    for (const auto& [slot, value] : slots) {
      if (tmpl.substr(i, slot.size()) == slot) {
        out += value;
        i += slot.size();
        ++used;
        hit = true;
        break;
      }
    }
    if (!hit) out.push_back(tmpl[i++]);
  }
  if (used != slots.size()) throw std::logic_error("prompt template slot count mismatch");
  return out;
}

inline std::string numbered(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out.push_back('\n');
    out += std::to_string(i + 1) + ". " + items[i];
  }
  return out;
}

inline std::string joined(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out.push_back('\n');
    out += items[i];
  }
  return out;
}

}  // namespace prompts

inline std::string build_solution_prompt(const Question& q) {
  if (trim(q.text).empty()) throw InputError("question " + std::to_string(q.id) + ": empty text");
  return prompts::fill(prompts::kSolution,
                       {{"<QUESTION TEXT>", q.text}, {"<FINAL ANSWER>", q.final_answer.value_or("")}});
}

inline std::string build_kc_prompt(const Question& q, const std::vector<std::string>& steps) {
  if (trim(q.text).empty()) throw InputError("question " + std::to_string(q.id) + ": empty text");
  if (steps.empty()) throw InputError("question " + std::to_string(q.id) + ": kc prompt needs solution steps");
  return prompts::fill(prompts::kKc, {{"<QUESTION TEXT>", q.text},
                                      {"<FINAL ANSWER>", q.final_answer.value_or("")},
                                      {"<SOLUTION STEPS>", prompts::joined(steps)}});
}

inline std::string build_mapping_prompt(const Question& q, const std::vector<std::string>& steps,
                                        const std::vector<std::string>& kcs) {
  if (trim(q.text).empty()) throw InputError("question " + std::to_string(q.id) + ": empty text");
  if (steps.empty()) throw InputError("question " + std::to_string(q.id) + ": mapping prompt needs solution steps");
  if (kcs.empty()) throw InputError("question " + std::to_string(q.id) + ": mapping prompt needs kcs");
  return prompts::fill(prompts::kMapping, {{"<QUESTION TEXT>", q.text},
                                           {"<SOLUTION STEP>", prompts::numbered(steps)},
                                           {"<ANNOTATED KCS>", prompts::numbered(kcs)}});
}

// ---- response parsing ----

namespace detail {

// Drops a leading "1." / "2)" / "-" / "*" / bullet marker.
inline std::string strip_list_marker(std::string_view line) {
  static const std::regex marker(R"(^\s*(?:\d+\s*[.):]|[-*+]|\xE2\x80\xA2)\s+)");
  std::string s(trim(line));
  std::smatch m;
  if (std::regex_search(s, m, marker)) s = s.substr(static_cast<std::size_t>(m.length(0)));
  return std::string(trim(s));
}

}  // namespace detail

inline std::vector<std::string> parse_solution_steps(std::string_view raw) {
  std::vector<std::string> out;
  for (const auto& line : split_lines(raw)) {
    auto s = detail::strip_list_marker(line);
    if (!s.empty()) out.push_back(std::move(s));
  }
  if (out.empty()) throw InputError("solution response has no steps");
  return out;
}

inline std::vector<std::string> parse_kc_list(std::string_view raw) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& line : split_lines(raw)) {
    auto s = detail::strip_list_marker(line);
    if (s.empty()) continue;
    if (seen.insert(to_lower_ascii(s)).second) out.push_back(std::move(s));
  }
  if (out.empty()) throw InputError("kc response has no knowledge concepts");
  return out;
}

inline StepKcPairs parse_mapping(std::string_view raw, int n_steps, int m_kcs) {
  if (n_steps < 1 || m_kcs < 1) throw InputError("parse_mapping: need at least one step and one kc");
  std::string text(raw);
  for (char& c : text)
    if (c == '\n' || c == '\r') c = ',';
  static const std::regex pair_re(R"(^(\d+)\s*-\s*(\d+)$)");
  StepKcPairs pairs;
  std::size_t index = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto comma = text.find(',', start);
    if (comma == std::string::npos) comma = text.size();
    std::string tok(trim(std::string_view(text).substr(start, comma - start)));
    start = comma + 1;
    while (!tok.empty() && (tok.front() == '"' || tok.front() == '\'')) tok.erase(tok.begin());
    while (!tok.empty() && (tok.back() == '"' || tok.back() == '\'' || tok.back() == '.')) tok.pop_back();
    tok = std::string(trim(tok));
    if (tok.empty()) continue;
    ++index;
    std::smatch m;
    if (!std::regex_match(tok, m, pair_re)) {
      throw InputError("mapping token " + std::to_string(index) + " '" + tok + "' is malformed (expected a-b)");
    }
    const int a = std::stoi(m[1].str()), b = std::stoi(m[2].str());
    if (a < 1 || a > n_steps) {
      throw InputError("mapping pair '" + tok + "' is illegal: only " + std::to_string(n_steps) + " solution steps");
    }
    if (b < 1 || b > m_kcs) {
      throw InputError("mapping pair '" + tok + "' is illegal: only " + std::to_string(m_kcs) + " knowledge concepts");
    }
    pairs.emplace(a, b);
  }
  if (pairs.empty()) throw InputError("mapping response has no pairs");
  std::vector<bool> step_seen(static_cast<std::size_t>(n_steps) + 1), kc_seen(static_cast<std::size_t>(m_kcs) + 1);
  for (const auto& [a, b] : pairs) step_seen[a] = kc_seen[b] = true;
  for (int a = 1; a <= n_steps; ++a)
    if (!step_seen[a]) throw InputError("mapping leaves solution step " + std::to_string(a) + " unpaired");
  for (int b = 1; b <= m_kcs; ++b)
    if (!kc_seen[b]) throw InputError("mapping leaves knowledge concept " + std::to_string(b) + " unpaired");
  return pairs;
}

inline std::string serialize_mapping(const StepKcPairs& pairs) {
  std::string out;
  for (const auto& [a, b] : pairs) {
    if (!out.empty()) out += ", ";
    out += std::to_string(a) + "-" + std::to_string(b);
  }
  return out;
}

// ---- backends ----

class CompletionBackend {
 public:
  virtual ~CompletionBackend() = default;
  virtual std::string complete(const std::string& prompt, double temperature) = 0;
  virtual std::string name() const = 0;
  virtual std::string model() const = 0;
};

// Scripted responses keyed by prompt (or its SHA-256). One JSON object per
// fixture line: {"prompt"|"prompt_sha256": ..., "response": "..."} or
// {"...", "responses": [...]} served in order, the last one repeating.
class MockBackend : public CompletionBackend {
 public:
  MockBackend() = default;

  explicit MockBackend(const std::filesystem::path& fixture) { load_fixture(fixture); }

  void load_fixture(const std::filesystem::path& path) {
    const auto lines = split_lines(read_file(path));
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (trim(lines[i]).empty()) continue;
      try {
        const auto j = nlohmann::json::parse(lines[i]);
        const std::string key = j.contains("prompt_sha256") ? j.at("prompt_sha256").get<std::string>()
                                                            : sha256_hex(j.at("prompt").get<std::string>());
        std::vector<std::string> rs;
        if (j.contains("responses")) {
          rs = j.at("responses").get<std::vector<std::string>>();
        } else {
          rs.push_back(j.at("response").get<std::string>());
        }
        script_hash(key, std::move(rs));
      } catch (const nlohmann::json::exception& e) {
        throw InputError(path.string() + " line " + std::to_string(i + 1) + ": " + e.what());
      }
    }
  }

  void script(const std::string& prompt, std::vector<std::string> responses) {
    script_hash(sha256_hex(prompt), std::move(responses));
  }
  void script_hash(const std::string& hash, std::vector<std::string> responses) {
    if (responses.empty()) throw InputError("mock script needs at least one response");
    std::lock_guard lock(mu_);
    script_[hash] = {std::move(responses), 0};
  }

  std::string complete(const std::string& prompt, double) override {
    std::lock_guard lock(mu_);
    ++calls_;
    prompts_.push_back(prompt);
    auto it = script_.find(sha256_hex(prompt));
    if (it == script_.end()) {
      throw BackendError("mock backend: no scripted response for prompt " + sha256_hex(prompt).substr(0, 12));
    }
    auto& [rs, next] = it->second;
    const auto& r = rs[std::min(next, rs.size() - 1)];
    ++next;
    return r;
  }

  std::string name() const override { return "mock"; }
  std::string model() const override { return "mock"; }

  std::size_t calls() const {
    std::lock_guard lock(mu_);
    return calls_;
  }
  std::vector<std::string> prompts() const {
    std::lock_guard lock(mu_);
    return prompts_;
  }

 private:
  mutable std::mutex mu_;
  std::unordered_map<std::string, std::pair<std::vector<std::string>, std::size_t>> script_;
  std::size_t calls_ = 0;
  std::vector<std::string> prompts_;
};

struct HttpBackendConfig {
  std::string base_url = "http://localhost:8000/v1";  // POSTs to <base>/chat/completions
  std::string model = "gpt-4o";
  std::string token_env = "OPENAI_API_KEY";
  int max_attempts = 3;
  int backoff_ms = 500;  // doubles after each failed attempt
  int timeout_s = 120;
};

// Minimal chat-completions client: {model, messages, temperature}.
class HttpBackend : public CompletionBackend {
 public:
  explicit HttpBackend(HttpBackendConfig cfg) : cfg_(std::move(cfg)) {
    const auto scheme_end = cfg_.base_url.find("://");
    if (scheme_end == std::string::npos) throw InputError("backend url needs a scheme: " + cfg_.base_url);
    const auto path_start = cfg_.base_url.find('/', scheme_end + 3);
    origin_ = cfg_.base_url.substr(0, path_start);
    path_ = path_start == std::string::npos ? "" : cfg_.base_url.substr(path_start);
    while (!path_.empty() && path_.back() == '/') path_.pop_back();
    path_ += "/chat/completions";
    if (cfg_.max_attempts < 1) throw InputError("backend max_attempts must be >= 1");
  }

  std::string complete(const std::string& prompt, double temperature) override {
    nlohmann::json body = {{"model", cfg_.model},
                           {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
                           {"temperature", temperature}};
    httplib::Headers headers;
    if (!cfg_.token_env.empty()) {
      if (const char* tok = std::getenv(cfg_.token_env.c_str())) headers.emplace("Authorization", std::string("Bearer ") + tok);
    }
    std::string last_error;
    int delay = cfg_.backoff_ms;
    for (int attempt = 1; attempt <= cfg_.max_attempts; ++attempt) {
      if (attempt > 1) {
        std::this_thread::sleep_for(std::chrono::milliseconds(delay));
        delay *= 2;
      }
      httplib::Client cli(origin_);
      cli.set_connection_timeout(cfg_.timeout_s);
      cli.set_read_timeout(cfg_.timeout_s);
      auto res = cli.Post(path_, headers, body.dump(), "application/json");
      if (!res) {
        last_error = "transport error: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status == 429 || res->status >= 500) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) {
        throw BackendError("backend returned HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
      }
      try {
        const auto j = nlohmann::json::parse(res->body);
        return j.at("choices").at(0).at("message").at("content").get<std::string>();
      } catch (const nlohmann::json::exception& e) {
        throw BackendError(std::string("backend response is not a chat completion: ") + e.what());
      }
    }
    throw BackendError("backend unreachable after " + std::to_string(cfg_.max_attempts) + " attempts (" +
                       last_error + ")");
  }

  std::string name() const override { return "http"; }
  std::string model() const override { return cfg_.model; }

 private:
  HttpBackendConfig cfg_;
  std::string origin_;
  std::string path_;
};

// ---- cache ----

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct CacheEntry {
  QuestionId question_id = 0;
  std::string stage;
  std::string prompt_sha256;
  std::string response;
  std::string backend;
  std::string model;
  std::string timestamp;
};

// Append-only JSONL keyed by (question id, stage, prompt hash). The first
// entry for a key wins; later writes to the same key are ignored.
class AnnotationCache {
 public:
  AnnotationCache() = default;  // in-memory only
  explicit AnnotationCache(std::filesystem::path path) : path_(std::move(path)) {
    if (!std::filesystem::exists(*path_)) return;
    const auto lines = split_lines(read_file(*path_));
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (trim(lines[i]).empty()) continue;
      try {
        const auto j = nlohmann::json::parse(lines[i]);
        CacheEntry e{j.at("question_id").get<QuestionId>(), j.at("stage").get<std::string>(),
                     j.at("prompt_sha256").get<std::string>(), j.at("response").get<std::string>(),
                     j.value("backend", ""), j.value("model", ""), j.value("timestamp", "")};
        entries_.emplace(key(e.question_id, e.stage, e.prompt_sha256), std::move(e));
      } catch (const nlohmann::json::exception& ex) {
        throw InputError(path_->string() + " line " + std::to_string(i + 1) + ": " + ex.what());
      }
    }
  }

  std::optional<std::string> get(QuestionId q, const std::string& stage, const std::string& prompt_hash) const {
    std::lock_guard lock(mu_);
    auto it = entries_.find(key(q, stage, prompt_hash));
    if (it == entries_.end()) return std::nullopt;
    return it->second.response;
  }

  void put(CacheEntry e) {
    std::lock_guard lock(mu_);
    const auto k = key(e.question_id, e.stage, e.prompt_sha256);
    if (entries_.count(k)) return;
    if (path_) {
      nlohmann::ordered_json j = {{"question_id", e.question_id}, {"stage", e.stage},
                                  {"prompt_sha256", e.prompt_sha256}, {"response", e.response},
                                  {"backend", e.backend}, {"model", e.model}, {"timestamp", e.timestamp}};
      if (path_->has_parent_path()) std::filesystem::create_directories(path_->parent_path());
      std::ofstream out(*path_, std::ios::app | std::ios::binary);
      if (!out) throw InputError("cannot append to cache " + path_->string());
      out << j.dump() << '\n';
    }
    entries_.emplace(k, std::move(e));
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
  }

 private:
  static std::string key(QuestionId q, const std::string& stage, const std::string& h) {
    return std::to_string(q) + "|" + stage + "|" + h;
  }
  std::optional<std::filesystem::path> path_;
  mutable std::mutex mu_;
  std::map<std::string, CacheEntry> entries_;
};

// ---- annotation ----

struct AnnotateStats {
  std::atomic<std::size_t> backend_calls[3] = {0, 0, 0};
  std::atomic<std::size_t> cache_hits[3] = {0, 0, 0};
};

inline constexpr const char* kStageNames[3] = {"solution", "kcs", "mapping"};

struct AnnotateOptions {
  double temperature = 0.0;
};

namespace detail {

// Cached response for a stage, or a fresh completion. A response is cached
// only once it parses; an unparsable one is re-asked exactly once.
template <class Parse>
auto run_stage(CompletionBackend& backend, AnnotationCache& cache, AnnotateStats* stats, const Question& q, int stage,
               const std::string& prompt, const AnnotateOptions& opt, Parse&& parse) {
  const std::string stage_name = kStageNames[stage];
  const std::string tag = "[" + stage_name + "] question " + std::to_string(q.id) + ": ";
  const auto hash = sha256_hex(prompt);
  if (auto hit = cache.get(q.id, stage_name, hash)) {
    if (stats) ++stats->cache_hits[stage];
    try {
      return parse(*hit);
    } catch (const InputError& e) {
      throw InputError(tag + "cached response does not parse: " + e.what());
    }
  }
  std::string last_error;
  for (int attempt = 0; attempt < 2; ++attempt) {
    std::string response;
    try {
      response = backend.complete(prompt, opt.temperature);
    } catch (const BackendError& e) {
      throw BackendError(tag + e.what());
    }
    if (stats) ++stats->backend_calls[stage];
    try {
      auto parsed = parse(response);
      cache.put({q.id, stage_name, hash, response, backend.name(), backend.model(), utc_timestamp()});
      return parsed;
    } catch (const InputError& e) {
      last_error = e.what();
    }
  }
  throw BackendError(tag + "unusable response after one re-ask: " + last_error);
}

}  // namespace detail

// Stages run in order; each prompt embeds the parsed output of the previous ones.
inline AnnotatedQuestion annotate_question(CompletionBackend& backend, AnnotationCache& cache, const Question& q,
                                           AnnotateStats* stats = nullptr, const AnnotateOptions& opt = {}) {
  AnnotatedQuestion out;
  out.question = q;
  out.steps = detail::run_stage(backend, cache, stats, q, 0, build_solution_prompt(q), opt,
                                [](const std::string& r) { return parse_solution_steps(r); });
  out.kcs = detail::run_stage(backend, cache, stats, q, 1, build_kc_prompt(q, out.steps), opt,
                              [](const std::string& r) { return parse_kc_list(r); });
  const int n = static_cast<int>(out.steps.size()), m = static_cast<int>(out.kcs.size());
  out.step_kc_pairs = detail::run_stage(backend, cache, stats, q, 2, build_mapping_prompt(q, out.steps, out.kcs), opt,
                                        [&](const std::string& r) { return parse_mapping(r, n, m); });
  try {
    validate_question(out);
  } catch (const InputError& e) {
    throw InputError(std::string("[validate] ") + e.what());
  }
  return out;
}

struct AnnotationFailure {
  QuestionId question_id = 0;
  std::string message;
  int exit_code = 1;  // 1 input, 2 backend
};

struct CorpusAnnotation {
  std::vector<AnnotatedQuestion> questions;  // successful ones, input order
  std::vector<AnnotationFailure> failures;
};

// Up to `parallelism` questions in flight; each question's chain is sequential.
inline CorpusAnnotation annotate_corpus(CompletionBackend& backend, AnnotationCache& cache,
                                        const std::vector<Question>& qs, std::size_t parallelism = 4,
                                        AnnotateStats* stats = nullptr, const AnnotateOptions& opt = {}) {
  std::vector<std::optional<AnnotatedQuestion>> done(qs.size());
  std::vector<std::optional<AnnotationFailure>> failed(qs.size());
  parallel_ordered(qs.size(), parallelism, [&](std::size_t i) {
    try {
      done[i] = annotate_question(backend, cache, qs[i], stats, opt);
    } catch (const BackendError& e) {
      failed[i] = AnnotationFailure{qs[i].id, e.what(), 2};
    } catch (const InputError& e) {
      failed[i] = AnnotationFailure{qs[i].id, e.what(), 1};
    }
  });
  CorpusAnnotation out;
  for (std::size_t i = 0; i < qs.size(); ++i) {
    if (done[i]) out.questions.push_back(std::move(*done[i]));
    if (failed[i]) out.failures.push_back(std::move(*failed[i]));
  }
  return out;
}

// Mock fixture that replays an already-annotated corpus through the three
// prompts, so `annotate` can run offline.
inline std::string mock_fixture_for(const std::vector<AnnotatedQuestion>& corpus) {
  std::string out;
  for (const auto& q : corpus) {
    if (q.steps.empty() || q.kcs.empty()) {
      throw InputError("mock fixture: question " + std::to_string(q.id()) + " needs steps and kcs");
    }
    std::string kc_lines;
    for (const auto& c : q.kcs) kc_lines += "- " + c + "\n";
    const std::pair<std::string, std::string> rows[] = {
        {build_solution_prompt(q.question), prompts::joined(q.steps)},
        {build_kc_prompt(q.question, q.steps), kc_lines},
        {build_mapping_prompt(q.question, q.steps, q.kcs), serialize_mapping(q.step_kc_pairs)}};
    for (const auto& [prompt, response] : rows) {
      nlohmann::ordered_json j = {{"prompt_sha256", sha256_hex(prompt)}, {"response", response}};
      out += j.dump() + "\n";
    }
  }
  return out;
}

}  // namespace kcqrl
