#include <algorithm>
#include <filesystem>
#include <random>
#include <set>

#include "../support/expect_error.h"
#include "../support/score_oracle.h"
#include "doctest.h"
#include "tlvm/datagen.h"
#include "tlvm/eval.h"

using namespace tlvm;
using tlvm::testing::code_of;
using namespace tlvm::testing::oracle;

namespace {

QASample closed(std::string qid, std::string gold) {
  return {std::move(qid), "img.ppm", "Is there a mass?", std::move(gold), AnswerType::kClosed};
}

QASample open(std::string qid, std::string gold) {
  return {std::move(qid), "img.ppm", "Where?", std::move(gold), AnswerType::kOpen};
}

}  // namespace

TEST_CASE("normalize_answer examples") {
  CHECK(normalize_answer("Yes.") == std::vector<std::string>{"yes"});
  CHECK(normalize_answer("  Left   LUNG ") == std::vector<std::string>{"left", "lung"});
  CHECK(normalize_answer("").empty());
  CHECK(normalize_answer("x-ray, (CT)") == std::vector<std::string>{"xray", "ct"});
}

TEST_CASE("closed_accuracy examples") {
  const std::vector<QASample> s{closed("a", "yes"), closed("b", "yes")};
  CHECK(closed_accuracy(s, std::vector<Prediction>{{"a", "yes"}, {"b", "yes"}}) == 1.0);
  CHECK(closed_accuracy(s, std::vector<Prediction>{{"a", "Yes."}, {"b", "no"}}) == 0.5);
  CHECK(closed_accuracy(s, std::vector<Prediction>{{"a", "no, yes"}, {"b", ""}}) == 0.0);
  CHECK(code_of([] { closed_accuracy({}, {}); }) == ErrorCode::kUndefinedMetric);
  CHECK(code_of([&] { closed_accuracy(s, std::vector<Prediction>{{"b", "yes"}, {"a", "yes"}}); }) ==
        ErrorCode::kQidMismatch);
  CHECK(code_of([&] { closed_accuracy(s, std::vector<Prediction>{{"a", "yes"}}); }) ==
        ErrorCode::kQidMismatch);
  const std::vector<QASample> bad{closed("a", "maybe")};
  CHECK(code_of([&] { closed_accuracy(bad, std::vector<Prediction>{{"a", "yes"}}); }) ==
        ErrorCode::kInvalidArgument);
}

TEST_CASE("open_recall examples") {
  const std::vector<QASample> s{open("a", "left lung")};
  CHECK(open_recall(s, std::vector<Prediction>{{"a", "the left lung shows opacity"}}) == 1.0);
  CHECK(open_recall(s, std::vector<Prediction>{{"a", "the heart"}}) == 0.0);
  CHECK(open_recall(s, std::vector<Prediction>{{"a", "lung"}}) == 0.5);
  // Duplicate gold words count once.
  const std::vector<QASample> dup{open("a", "lung lung left")};
  CHECK(open_recall(dup, std::vector<Prediction>{{"a", "lung"}}) == 0.5);
  const std::vector<QASample> empty_gold{open("a", " ... ")};
  CHECK(code_of([&] { open_recall(empty_gold, std::vector<Prediction>{{"a", "x"}}); }) ==
        ErrorCode::kUndefinedMetric);
  CHECK(code_of([] { open_recall({}, {}); }) == ErrorCode::kUndefinedMetric);
}

TEST_CASE("metrics agree with a brute-force scorer on 1000 random pairs") {
  std::mt19937_64 rng(20240611);
  const std::vector<std::string> vocab{"left", "right", "lung", "the", "mass", "ct", "mri", "upper", "a", "in"};
  for (int round = 0; round < 4; ++round) {
    std::vector<QASample> cs, os;
    std::vector<Prediction> cp, op;
    std::vector<std::string> cg, cpt, og, opt;
    for (int i = 0; i < 1000; ++i) {
      const std::string qid = "q" + std::to_string(i);
      std::string gold = rng() % 2 ? "yes" : "No.";
      std::string pred = rng() % 3 == 0 ? noisy(rng, vocab, 1 + rng() % 4)
                                        : std::string(rng() % 2 ? "Yes" : "no") + (rng() % 2 ? ", it is" : "");
      cs.push_back(closed(qid, gold));
      cp.push_back({qid, pred});
      cg.push_back(gold);
      cpt.push_back(pred);

      // At most 5 unique gold words keeps the oracle's common denominator fixed.
      std::string ogold;
      do ogold = noisy(rng, vocab, 1 + rng() % 5);
      while (unique_sorted(words(ogold)).empty());
      const std::string opred = noisy(rng, vocab, rng() % 7);
      os.push_back(open(qid, ogold));
      op.push_back({qid, opred});
      og.push_back(ogold);
      opt.push_back(opred);
    }
    CHECK(closed_accuracy(cs, cp) == oracle_closed(cg, cpt));
    CHECK(open_recall(os, op) == oracle_open(og, opt));
  }
}

TEST_CASE("aggregates are order-independent") {
  std::mt19937_64 rng(5);
  const std::vector<std::string> vocab{"alpha", "beta", "gamma", "delta", "eps", "zeta", "eta"};
  std::vector<std::pair<QASample, Prediction>> pairs;
  for (int i = 0; i < 300; ++i) {
    const std::string qid = "q" + std::to_string(i);
    pairs.push_back({open(qid, noisy(rng, vocab, 1 + rng() % 6)), {qid, noisy(rng, vocab, rng() % 6)}});
  }
  auto score = [&] {
    std::vector<QASample> s;
    std::vector<Prediction> p;
    for (auto& [a, b] : pairs) s.push_back(a), p.push_back(b);
    return open_recall(s, p);
  };
  const double base = score();
  for (int k = 0; k < 10; ++k) {
    std::shuffle(pairs.begin(), pairs.end(), rng);
    CHECK(score() == base);
  }
}

TEST_CASE("exact_mean") {
  const std::vector<SampleScore> thirds{{1, 3}, {1, 3}, {1, 3}};
  CHECK(exact_mean(thirds) == 1.0 / 3.0);
  CHECK(exact_mean(thirds, 100) == 100.0 / 3.0);
  const std::vector<SampleScore> halves{{1, 2}, {0, 1}, {1, 1}, {1, 2}};
  CHECK(exact_mean(halves, 100) == 50.0);
  CHECK(code_of([] { exact_mean({}); }) == ErrorCode::kUndefinedMetric);
  const std::vector<SampleScore> zero{{0, 0}};
  CHECK(code_of([&] { exact_mean(zero); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("report JSON round-trip and table") {
  EvalReport r;
  r.dataset = "vqa_test";
  r.n_open = 1;
  r.n_closed = 1;
  r.open_recall_pct = 100.0 / 3.0;
  r.closed_accuracy_pct = 100.0;
  r.n_failed = 1;
  r.failures = {"x: image decode"};
  r.records = {{"a", AnswerType::kClosed, "Is there a mass?", "yes", "Yes.", 1, 1, 1.0},
               {"b", AnswerType::kOpen, "Where?", "left lung \"x\"", "lungé", 1, 3, 1.0 / 3.0}};
  CHECK(report_from_json(report_to_json(r)) == r);
  CHECK(code_of([] { report_from_json("{}"); }) == ErrorCode::kSchemaMismatch);
  CHECK(code_of([] { report_from_json("not json"); }) == ErrorCode::kSchemaMismatch);

  const std::string table = report_table(r);
  CHECK(std::count(table.begin(), table.end(), '\n') == 2);
  CHECK(table.find("33.33") != std::string::npos);
  CHECK(table.find("100.00") != std::string::npos);
}

TEST_CASE("evaluate_split with stub predictors") {
  const auto root = std::filesystem::temp_directory_path() / "tlvm_eval_test";
  std::filesystem::remove_all(root);
  CorpusOptions opts;
  opts.captions = 1;
  opts.conversations = 1;
  opts.vqa_open = 100;
  opts.vqa_closed = 100;
  opts.seed = 3;
  const CorpusFiles files = write_corpus(root, opts);

  const EvalReport echo = evaluate_split(files.vqa_test, echo_predictor());
  CHECK(echo.open_recall_pct == 100.0);
  CHECK(echo.closed_accuracy_pct == 100.0);
  CHECK(echo.n_failed == 0);
  CHECK(echo.n_open + echo.n_closed == read_qa_samples(files.vqa_test).size());
  CHECK(std::is_sorted(echo.records.begin(), echo.records.end(),
                       [](const auto& a, const auto& b) { return a.qid < b.qid; }));

  const EvalReport yes = evaluate_split(files.vqa_test, [](const QASample&, const ImageTensor&) {
    return std::string("Yes, definitely.");
  });
  const double quantum = 100.0 / static_cast<double>(yes.n_closed);
  CHECK(std::abs(yes.closed_accuracy_pct - 50.0) <= quantum + 1e-12);

  // Recompute the percentages from the per-record scores.
  long long closed_hits = 0;
  for (const auto& rec : yes.records)
    if (rec.answer_type == AnswerType::kClosed) closed_hits += (rec.prediction == "Yes, definitely." && rec.gold == "yes");
  CHECK(yes.closed_accuracy_pct == static_cast<double>(closed_hits * 100) / static_cast<double>(yes.n_closed));
  CHECK(yes.open_recall_pct == 0.0);

  // One unreadable image is counted and excluded.
  const auto samples = read_qa_samples(files.vqa_test);
  std::filesystem::remove(root / samples.front().image);
  const EvalReport partial = evaluate_split(files.vqa_test, echo_predictor());
  CHECK(partial.n_failed == 1);
  CHECK(partial.failures.front().starts_with(samples.front().qid));
  CHECK(partial.n_open + partial.n_closed == samples.size() - 1);
  CHECK(partial.closed_accuracy_pct == 100.0);

  // A predictor that throws marks the sample failed.
  const EvalReport some_fail = evaluate_split(files.vqa_test, [](const QASample& s, const ImageTensor&) {
    if (s.qid == "closed_00009" || s.qid == "open_00009") throw Error(ErrorCode::kSequenceTooLong, "too long");
    return s.answer;
  });
  CHECK(some_fail.n_failed == (samples.front().qid.ends_with("00009") ? 2u : 3u));

  // Only closed samples: recall is undefined.
  std::vector<std::string> lines;
  for (const auto& s : samples)
    if (s.answer_type == AnswerType::kClosed) lines.push_back(to_json_line(s));
  write_jsonl(root / "closed_only.jsonl", lines);
  CHECK(code_of([&] { evaluate_split(root / "closed_only.jsonl", echo_predictor()); }) ==
        ErrorCode::kUndefinedMetric);
  std::filesystem::remove_all(root);
}
