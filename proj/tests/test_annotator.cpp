#include <gtest/gtest.h>

#include <thread>

#include "fixtures.hpp"

using namespace kcqrl;

namespace {

bool contains(const std::string& hay, const std::string& needle) { return hay.find(needle) != std::string::npos; }

std::size_t count_of(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + needle.size())) ++n;
  return n;
}

// Template text outside the slots, so prompts can be checked piece by piece.
std::vector<std::string> outside_slots(std::string_view tmpl) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto open = tmpl.find('<', start);
    if (open == std::string_view::npos) break;
    const auto close = tmpl.find('>', open);
    parts.emplace_back(tmpl.substr(start, open - start));
    start = close + 1;
  }
  parts.emplace_back(tmpl.substr(start));
  return parts;
}

// Local chat-completions server answering from a queue of (status, body).
class FakeServer {
 public:
  explicit FakeServer(std::vector<std::pair<int, std::string>> replies) : replies_(std::move(replies)) {
    srv_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(mu_);
      requests_.push_back(req.body);
      auth_.push_back(req.get_header_value("Authorization"));
      const auto& [status, body] = replies_[std::min(hits_, replies_.size() - 1)];
      ++hits_;
      res.status = status;
      res.set_content(body, "application/json");
    });
    port_ = srv_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { srv_.listen_after_bind(); });
    srv_.wait_until_ready();
  }
  ~FakeServer() {
    srv_.stop();
    thread_.join();
  }
  std::string base() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }
  std::size_t hits() {
    std::lock_guard lock(mu_);
    return hits_;
  }
  std::vector<std::string> requests() {
    std::lock_guard lock(mu_);
    return requests_;
  }
  std::vector<std::string> auth() {
    std::lock_guard lock(mu_);
    return auth_;
  }

 private:
  httplib::Server srv_;
  std::thread thread_;
  int port_ = 0;
  std::mutex mu_;
  std::vector<std::pair<int, std::string>> replies_;
  std::size_t hits_ = 0;
  std::vector<std::string> requests_, auth_;
};

std::string completion(const std::string& content) {
  return nlohmann::json{{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}}}.dump();
}

HttpBackendConfig fast(const std::string& base) {
  HttpBackendConfig c;
  c.base_url = base;
  c.backoff_ms = 1;
  c.timeout_s = 5;
  return c;
}

}  // namespace

TEST(SolutionPrompt, SubstitutesQuestionAndAnswer) {
  const auto p = build_solution_prompt(fixtures::worked_question());
  EXPECT_TRUE(contains(p, "Question: 65*34+65*45+79*35=?\n"));
  EXPECT_TRUE(contains(p, "Final Answer: 7900\n"));
  for (const auto& part : outside_slots(prompts::kSolution)) EXPECT_TRUE(contains(p, part)) << part;
  EXPECT_EQ(p, build_solution_prompt(fixtures::worked_question()));
}

TEST(SolutionPrompt, MissingAnswerLeavesSlotEmpty) {
  Question q{7, "What is 2+2?", std::nullopt};
  EXPECT_TRUE(contains(build_solution_prompt(q), "Final Answer: \n"));
}

TEST(SolutionPrompt, SlotLikeTextInQuestionIsNotReplaced) {
  Question q{8, "Explain <FINAL ANSWER> here", "3"};
  const auto p = build_solution_prompt(q);
  EXPECT_TRUE(contains(p, "Question: Explain <FINAL ANSWER> here\n"));
  EXPECT_TRUE(contains(p, "Final Answer: 3\n"));
}

TEST(KcPrompt, EmbedsEveryStepOnItsOwnLine) {
  const auto steps = fixtures::worked_steps();
  const auto p = build_kc_prompt(fixtures::worked_question(), steps);
  for (const auto& s : steps) EXPECT_EQ(count_of(p, s + "\n") + (p.ends_with(s) ? 1 : 0), 1u) << s;
  for (const auto& part : outside_slots(prompts::kKc)) EXPECT_TRUE(contains(p, part)) << part;
  EXPECT_THROW(build_kc_prompt(fixtures::worked_question(), {}), InputError);
}

TEST(MappingPrompt, NumberedStepsAndKcs) {
  const auto p = build_mapping_prompt(fixtures::worked_question(), fixtures::worked_steps(), fixtures::worked_kcs());
  EXPECT_TRUE(contains(p, "1. " + fixtures::worked_steps()[0]));
  EXPECT_TRUE(contains(p, "4. " + fixtures::worked_steps()[3]));
  EXPECT_TRUE(contains(p, "5. Distributive property"));
  EXPECT_FALSE(contains(p, "6. "));
  for (const auto& part : outside_slots(prompts::kMapping)) EXPECT_TRUE(contains(p, part)) << part;
  EXPECT_EQ(p, build_mapping_prompt(fixtures::worked_question(), fixtures::worked_steps(), fixtures::worked_kcs()));
}

TEST(MappingPrompt, MinimalAndErrors) {
  Question q{3, "1+1?", "2"};
  const auto p = build_mapping_prompt(q, {"add"}, {"Addition"});
  EXPECT_TRUE(contains(p, "1. add"));
  EXPECT_TRUE(contains(p, "1. Addition"));
  EXPECT_THROW(build_mapping_prompt(q, {}, {"Addition"}), InputError);
  EXPECT_THROW(build_mapping_prompt(q, {"add"}, {}), InputError);
}

TEST(ParseSolution, PlainAndNumberedLines) {
  EXPECT_EQ(parse_solution_steps("step A\nstep B"), (std::vector<std::string>{"step A", "step B"}));
  EXPECT_EQ(parse_solution_steps("1. step A\n2. step B"), (std::vector<std::string>{"step A", "step B"}));
  EXPECT_EQ(parse_solution_steps("  - step A\r\n\n* step B  "), (std::vector<std::string>{"step A", "step B"}));
  EXPECT_THROW(parse_solution_steps("\n\n"), InputError);
}

TEST(ParseKcs, BulletsAndDuplicates) {
  EXPECT_EQ(parse_kc_list("- Understanding of addition\n- Distributive property").size(), 2u);
  EXPECT_EQ(parse_kc_list("A\na"), std::vector<std::string>{"A"});
  EXPECT_THROW(parse_kc_list(""), InputError);
}

TEST(ParseMapping, LegalExampleGivesNinePairs) {
  const auto pairs = parse_mapping(fixtures::kLegalMapping, 4, 5);
  EXPECT_EQ(pairs.size(), 9u);
  EXPECT_TRUE(pairs.count({2, 4}));
}

TEST(ParseMapping, IllegalPairNamesToken) {
  try {
    parse_mapping("1-1, 2-2, 3-1, 4-2, 5-2", 4, 2);
    FAIL();
  } catch (const InputError& e) {
    EXPECT_TRUE(contains(e.what(), "5-2")) << e.what();
  }
  EXPECT_THROW(parse_mapping("5-2", 4, 5), InputError);
}

TEST(ParseMapping, CoverageAndMalformedTokens) {
  try {
    parse_mapping("1-1", 1, 2);
    FAIL();
  } catch (const InputError& e) {
    EXPECT_TRUE(contains(e.what(), "knowledge concept 2")) << e.what();
  }
  try {
    parse_mapping("1-1, one-two", 1, 1);
    FAIL();
  } catch (const InputError& e) {
    EXPECT_TRUE(contains(e.what(), "token 2")) << e.what();
  }
  EXPECT_THROW(parse_mapping("", 1, 1), InputError);
}

TEST(ParseMapping, TolerantOfQuotesNewlinesAndTrailingPeriod) {
  EXPECT_EQ(parse_mapping("\"1-1\", '2-1'\n2-2.", 2, 2), (StepKcPairs{{1, 1}, {2, 1}, {2, 2}}));
}

TEST(ParseMapping, RoundTripsSerializedPairs) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 6), m = 1 + static_cast<int>(rng() % 6);
    StepKcPairs pairs;
    for (int a = 1; a <= n; ++a) pairs.insert({a, 1 + static_cast<int>(rng() % m)});
    for (int b = 1; b <= m; ++b) pairs.insert({1 + static_cast<int>(rng() % n), b});
    EXPECT_EQ(parse_mapping(serialize_mapping(pairs), n, m), pairs);
  }
}

TEST(MockBackend, FixtureFileAndOrderedResponses) {
  const auto dir = fixtures::temp_dir("mockfx");
  write_file(dir / "fx.jsonl", nlohmann::json{{"prompt", "hello"}, {"responses", {"one", "two"}}}.dump() + "\n" +
                                   nlohmann::json{{"prompt_sha256", sha256_hex("bye")}, {"response", "ciao"}}.dump() +
                                   "\n");
  MockBackend b(dir / "fx.jsonl");
  EXPECT_EQ(b.complete("hello", 0), "one");
  EXPECT_EQ(b.complete("hello", 0), "two");
  EXPECT_EQ(b.complete("hello", 0), "two");
  EXPECT_EQ(b.complete("bye", 0), "ciao");
  EXPECT_THROW(b.complete("unknown", 0), BackendError);
  write_file(dir / "bad.jsonl", "{\"response\": \"x\"}\n");
  EXPECT_THROW(MockBackend{dir / "bad.jsonl"}, InputError);
  std::filesystem::remove_all(dir);
}

TEST(Annotate, WorkedExampleThroughMock) {
  MockBackend b;
  fixtures::script_worked(b);
  AnnotationCache cache;
  const auto q = annotate_question(b, cache, fixtures::worked_question());
  EXPECT_NE(std::find(q.kcs.begin(), q.kcs.end(), "Factoring out a common factor"), q.kcs.end());
  EXPECT_EQ(q.steps.size(), 4u);
  EXPECT_EQ(q.step_kc_pairs.size(), 9u);
  EXPECT_NO_THROW(validate_question(q));
}

TEST(Annotate, StagesEmbedParsedOutputsOfEarlierStages) {
  MockBackend b;
  fixtures::script_worked(b);
  AnnotationCache cache;
  annotate_question(b, cache, fixtures::worked_question());
  const auto ps = b.prompts();
  ASSERT_EQ(ps.size(), 3u);
  EXPECT_FALSE(contains(ps[0], fixtures::worked_steps()[0]));
  EXPECT_TRUE(contains(ps[1], fixtures::worked_steps()[0]));
  EXPECT_TRUE(contains(ps[2], fixtures::worked_steps()[3]));
  EXPECT_TRUE(contains(ps[2], "Simplifications of expressions"));
}

TEST(Annotate, CachedRerunMakesNoCalls) {
  const auto dir = fixtures::temp_dir("anncache");
  MockBackend b;
  fixtures::script_worked(b);
  AnnotatedQuestion first;
  {
    AnnotationCache cache(dir / "cache.jsonl");
    AnnotateStats s;
    first = annotate_question(b, cache, fixtures::worked_question(), &s);
    EXPECT_EQ(s.backend_calls[0] + s.backend_calls[1] + s.backend_calls[2], 3u);
  }
  AnnotationCache reread(dir / "cache.jsonl");
  EXPECT_EQ(reread.size(), 3u);
  MockBackend silent;
  AnnotateStats s;
  EXPECT_EQ(annotate_question(silent, reread, fixtures::worked_question(), &s), first);
  EXPECT_EQ(silent.calls(), 0u);
  EXPECT_EQ(s.cache_hits[0] + s.cache_hits[1] + s.cache_hits[2], 3u);
  // A second annotation through the same backend is served from the cache too.
  AnnotationCache mem;
  annotate_question(b, mem, fixtures::worked_question());
  const auto before = b.calls();
  annotate_question(b, mem, fixtures::worked_question());
  EXPECT_EQ(b.calls(), before);
  std::filesystem::remove_all(dir);
}

TEST(Annotate, UnparsableResponseIsReaskedOnce) {
  const auto q = fixtures::worked_question();
  MockBackend b;
  fixtures::script_worked(b);
  b.script(build_mapping_prompt(q, fixtures::worked_steps(), fixtures::worked_kcs()),
           {"no pairs here", fixtures::kLegalMapping});
  AnnotationCache cache;
  EXPECT_EQ(annotate_question(b, cache, q).step_kc_pairs.size(), 9u);
  EXPECT_EQ(b.calls(), 4u);
}

TEST(Annotate, IllegalMappingTwiceIsTaggedError) {
  const auto q = fixtures::worked_question();
  MockBackend b;
  fixtures::script_worked(b);
  b.script(build_mapping_prompt(q, fixtures::worked_steps(), fixtures::worked_kcs()), {"5-2"});
  AnnotationCache cache;
  try {
    annotate_question(b, cache, q);
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_TRUE(contains(e.what(), "[mapping]")) << e.what();
    EXPECT_TRUE(contains(e.what(), "question 101")) << e.what();
  }
  EXPECT_EQ(b.calls(), 4u);
  EXPECT_EQ(cache.size(), 2u);  // the bad mapping is never cached
}

TEST(AnnotateCorpus, FailuresAreReportedPerQuestion) {
  MockBackend b;
  fixtures::script_worked(b);
  AnnotationCache cache;
  const std::vector<Question> qs = {fixtures::worked_question(), {202, "unscripted question", std::nullopt}};
  const auto r = annotate_corpus(b, cache, qs, 2);
  ASSERT_EQ(r.questions.size(), 1u);
  ASSERT_EQ(r.failures.size(), 1u);
  EXPECT_EQ(r.failures[0].question_id, 202);
  EXPECT_EQ(r.failures[0].exit_code, 2);
}

TEST(MockFixture, ReplaysAnAnnotatedCorpus) {
  const auto corpus = fixtures::toy_corpus();
  const auto dir = fixtures::temp_dir("replay");
  write_file(dir / "fx.jsonl", mock_fixture_for(corpus));
  MockBackend b(dir / "fx.jsonl");
  AnnotationCache cache;
  std::vector<Question> bare;
  for (const auto& q : corpus) bare.push_back(q.question);
  const auto r = annotate_corpus(b, cache, bare, 1);
  ASSERT_TRUE(r.failures.empty());
  EXPECT_EQ(r.questions, corpus);
  std::filesystem::remove_all(dir);
}

TEST(HttpBackend, ChatCompletionWireShapeAndToken) {
  FakeServer srv({{200, completion("step one")}});
  ::setenv("KCQRL_TEST_TOKEN", "sekret", 1);
  auto cfg = fast(srv.base());
  cfg.token_env = "KCQRL_TEST_TOKEN";
  cfg.model = "test-model";
  HttpBackend b(cfg);
  EXPECT_EQ(b.complete("hi there", 0.0), "step one");
  const auto body = nlohmann::json::parse(srv.requests().at(0));
  EXPECT_EQ(body.at("model"), "test-model");
  EXPECT_EQ(body.at("messages").at(0).at("content"), "hi there");
  EXPECT_EQ(body.at("temperature"), 0.0);
  EXPECT_EQ(srv.auth().at(0), "Bearer sekret");
  ::unsetenv("KCQRL_TEST_TOKEN");
}

TEST(HttpBackend, RetriesServerErrorsThenSucceeds) {
  FakeServer srv({{503, "busy"}, {429, "slow down"}, {200, completion("ok")}});
  HttpBackend b(fast(srv.base()));
  EXPECT_EQ(b.complete("x", 0.0), "ok");
  EXPECT_EQ(srv.hits(), 3u);
}

TEST(HttpBackend, GivesUpAfterThreeAttempts) {
  FakeServer srv({{500, "down"}});
  HttpBackend b(fast(srv.base()));
  EXPECT_THROW(b.complete("x", 0.0), BackendError);
  EXPECT_EQ(srv.hits(), 3u);
}

TEST(HttpBackend, ClientErrorAndBadBodyFailFast) {
  FakeServer srv({{400, "bad request"}, {200, "{\"nope\":1}"}});
  HttpBackend b(fast(srv.base()));
  EXPECT_THROW(b.complete("x", 0.0), BackendError);
  EXPECT_THROW(b.complete("x", 0.0), BackendError);
  EXPECT_EQ(srv.hits(), 2u);
}

TEST(HttpBackend, UnreachableHostIsBackendError) {
  auto cfg = fast("http://127.0.0.1:1/v1");
  cfg.max_attempts = 2;
  HttpBackend b(cfg);
  EXPECT_THROW(b.complete("x", 0.0), BackendError);
  EXPECT_THROW(HttpBackend(fast("no-scheme")), InputError);
}
