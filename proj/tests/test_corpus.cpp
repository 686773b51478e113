#include <gtest/gtest.h>

#include "fixtures.hpp"

using namespace kcqrl;

namespace {

const char* kTwoQuestions =
    R"({"id":1,"text":"2+2?","final_answer":"4","steps":["add"],"kcs":["Addition"],"step_kc_pairs":[[1,1]]})"
    "\n"
    R"({"id":2,"text":"3*3?","final_answer":null,"steps":["a","b"],"kcs":["Multiplication","Squares"],"step_kc_pairs":[[1,1],[2,2]]})"
    "\n";

std::string history_line(StudentId s, int n, int r = 1) {
  nlohmann::json ex = nlohmann::json::array();
  for (int i = 0; i < n; ++i) ex.push_back({{"q", 1 + i % 2}, {"kcs", {0}}, {"r", r}});
  return nlohmann::json{{"student_id", s}, {"exercises", ex}}.dump() + "\n";
}

std::vector<StudentHistory> students(int n) {
  std::vector<StudentHistory> hs;
  for (int s = 0; s < n; ++s) hs.push_back({100 + s, {{1, {0}, s % 2}}});
  return hs;
}

}  // namespace

TEST(LoadCorpus, TwoValidLines) {
  const auto qs = parse_corpus(kTwoQuestions);
  ASSERT_EQ(qs.size(), 2u);
  EXPECT_EQ(qs[0].question.final_answer, "4");
  EXPECT_FALSE(qs[1].question.final_answer.has_value());
  EXPECT_EQ(qs[1].kcs_of_step(2), std::vector<int>{2});
}

TEST(LoadCorpus, IllegalPairNamesQuestion) {
  const std::string line =
      R"({"id":42,"text":"q","steps":["a","b","c","d"],"kcs":["k1","k2"],"step_kc_pairs":[[1,1],[2,2],[3,1],[4,1],[5,2]]})";
  try {
    parse_corpus(line);
    FAIL() << "expected an error";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("question 42"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("5-2"), std::string::npos) << e.what();
  }
}

TEST(LoadCorpus, EmptyFileGivesEmptyList) { EXPECT_TRUE(parse_corpus("").empty()); }

TEST(LoadCorpus, CoverageAndDuplicateIds) {
  EXPECT_THROW(parse_corpus(R"({"id":1,"text":"q","steps":["a"],"kcs":["k1","k2"],"step_kc_pairs":[[1,1]]})"),
               InputError);
  EXPECT_THROW(parse_corpus(R"({"id":1,"text":"q","steps":["a","b"],"kcs":["k"],"step_kc_pairs":[[1,1]]})"),
               InputError);
  const std::string dup = R"({"id":1,"text":"a"})"
                          "\n"
                          R"({"id":1,"text":"b"})";
  EXPECT_THROW(parse_corpus(dup), InputError);
  EXPECT_THROW(parse_corpus("{not json"), InputError);
}

TEST(LoadCorpus, PreAnnotationRecordsAreAccepted) {
  const auto qs = parse_corpus(R"({"id":9,"text":"bare question"})");
  ASSERT_EQ(qs.size(), 1u);
  EXPECT_TRUE(qs[0].kcs.empty());
}

TEST(LoadCorpus, RoundTripsThroughFile) {
  const auto dir = fixtures::temp_dir("corpus_rt");
  const auto qs = parse_corpus(kTwoQuestions);
  save_corpus(dir / "c.jsonl", qs);
  EXPECT_EQ(load_corpus(dir / "c.jsonl"), qs);
  std::filesystem::remove_all(dir);
}

TEST(LoadInteractions, ThreeStudentsOfLengthTen) {
  const auto hs = parse_interactions(history_line(1, 10) + history_line(2, 10) + history_line(3, 10));
  ASSERT_EQ(hs.size(), 3u);
  for (const auto& h : hs) EXPECT_EQ(h.exercises.size(), 10u);
}

TEST(LoadInteractions, ResponseTwoIsAnError) { EXPECT_THROW(parse_interactions(history_line(1, 3, 2)), InputError); }

TEST(LoadInteractions, DuplicateStudentIsAnError) {
  EXPECT_THROW(parse_interactions(history_line(1, 3) + history_line(1, 3)), InputError);
}

TEST(LoadInteractions, UnknownQuestionAgainstCorpus) {
  const auto corpus = parse_corpus(kTwoQuestions);
  const auto ok = parse_interactions(history_line(1, 4), &corpus);
  EXPECT_EQ(ok.size(), 1u);
  const std::string bad = R"({"student_id":5,"exercises":[{"q":77,"kcs":[0],"r":1}]})";
  try {
    parse_interactions(bad, &corpus);
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("77"), std::string::npos);
  }
}

TEST(SplitByStudent, BalancedFolds) {
  const auto fa = split_by_student(students(10), 5, 3);
  for (int f = 0; f < 5; ++f) EXPECT_EQ(fa.students_in(f).size(), 2u);
}

TEST(SplitByStudent, SameSeedSameAssignment) {
  const auto hs = students(23);
  EXPECT_EQ(split_by_student(hs, 5, 8).fold_of_student, split_by_student(hs, 5, 8).fold_of_student);
}

TEST(SplitByStudent, IndependentOfInputOrder) {
  auto hs = students(17);
  const auto a = split_by_student(hs, 4, 1);
  std::reverse(hs.begin(), hs.end());
  EXPECT_EQ(a.fold_of_student, split_by_student(hs, 4, 1).fold_of_student);
}

TEST(SplitByStudent, TooFewStudents) { EXPECT_THROW(split_by_student(students(3), 5, 0), InputError); }

TEST(SelectFold, TrainAndTestPartitionStudents) {
  const auto hs = students(12);
  const auto fa = split_by_student(hs, 3, 0);
  const auto test = select_fold(hs, fa, 1, true);
  const auto train = select_fold(hs, fa, 1, false);
  EXPECT_EQ(test.size() + train.size(), hs.size());
  for (const auto& h : test)
    for (const auto& g : train) EXPECT_NE(h.student_id, g.student_id);
}

TEST(Subsample, FivePercentOfHundred) { EXPECT_EQ(subsample_students(students(100), 0.05, 0).size(), 5u); }

TEST(Subsample, FullFractionIsIdentity) {
  const auto hs = students(40);
  EXPECT_EQ(subsample_students(hs, 1.0, 3), hs);
}

TEST(Subsample, FixedSeedRepeats) {
  const auto hs = students(40);
  EXPECT_EQ(subsample_students(hs, 0.25, 6), subsample_students(hs, 0.25, 6));
  EXPECT_THROW(subsample_students(hs, 0.0, 0), InputError);
  EXPECT_THROW(subsample_students(hs, 1.5, 0), InputError);
}

TEST(Synthetic, PerfectMasteryWithoutNoiseIsAllCorrect) {
  SynthConfig c;
  c.guess = 0.0;
  c.slip = 0.0;
  c.force_mastery = true;
  c.num_students = 20;
  const auto d = generate_synthetic(c, 5);
  for (const auto& h : d.histories)
    for (const auto& e : h.exercises) EXPECT_EQ(e.response, 1);
}

TEST(Synthetic, SameSeedGivesIdenticalFiles) {
  const auto a = generate_synthetic(SynthConfig{}, 3);
  const auto b = generate_synthetic(SynthConfig{}, 3);
  EXPECT_EQ(serialize_corpus(a.questions), serialize_corpus(b.questions));
  EXPECT_EQ(serialize_interactions(a.histories), serialize_interactions(b.histories));
  const auto c = generate_synthetic(SynthConfig{}, 4);
  EXPECT_NE(serialize_interactions(a.histories), serialize_interactions(c.histories));
}

TEST(Synthetic, DefaultSizeAndValidity) {
  const auto d = generate_synthetic(SynthConfig{}, 0);
  EXPECT_EQ(d.questions.size(), 50u);
  std::size_t total = 0;
  for (const auto& h : d.histories) total += h.exercises.size();
  EXPECT_EQ(total, 10000u);
  for (const auto& q : d.questions) EXPECT_NO_THROW(validate_question(q));
  // The files parse back with the same content.
  const auto corpus = parse_corpus(serialize_corpus(d.questions));
  EXPECT_EQ(parse_interactions(serialize_interactions(d.histories), &corpus), d.histories);
}

TEST(Synthetic, RejectsBadConfig) {
  SynthConfig c;
  c.num_students = 0;
  EXPECT_THROW(generate_synthetic(c, 0), InputError);
  c = {};
  c.guess = 1.5;
  EXPECT_THROW(generate_synthetic(c, 0), InputError);
}
