#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tlvm/dataset.h"
#include "tlvm/image.h"
#include "tlvm/model.h"

namespace tlvm {

// Lowercase, ASCII punctuation removed, split on whitespace.
std::vector<std::string> normalize_answer(std::string_view text);

struct Prediction {
  std::string qid;
  std::string text;
};

// Samples and predictions must be aligned by qid (kQidMismatch); an empty set
// is kUndefinedMetric. Closed golds must normalize to "yes" or "no".
double closed_accuracy(std::span<const QASample> samples, std::span<const Prediction> predictions);
// Unique-word recall of the gold answer; gold normalizing to nothing is
// kUndefinedMetric.
double open_recall(std::span<const QASample> samples, std::span<const Prediction> predictions);

struct SampleScore {
  std::size_t hits = 0;
  std::size_t total = 1;
  double value() const { return static_cast<double>(hits) / static_cast<double>(total); }
};

// Per-sample scores, the building blocks of the two metrics.
SampleScore closed_score(const QASample& sample, std::string_view prediction);
SampleScore open_score(const QASample& sample, std::string_view prediction);

// Exact mean of hits/total fractions, rounded once; times `scale`.
// Order-independent bit for bit.
double exact_mean(std::span<const SampleScore> scores, std::uint64_t scale = 1);

struct EvalRecord {
  std::string qid;
  AnswerType answer_type = AnswerType::kOpen;
  std::string question;
  std::string gold;
  std::string prediction;
  // score == hits / total: closed 0/1 or 1/1, open matched unique gold words
  // over unique gold words.
  std::size_t hits = 0;
  std::size_t total = 1;
  double score = 0.0;
  bool operator==(const EvalRecord&) const = default;
};

struct EvalReport {
  std::string dataset;
  std::size_t n_open = 0;
  std::size_t n_closed = 0;
  double open_recall_pct = 0.0;
  double closed_accuracy_pct = 0.0;
  std::size_t n_failed = 0;
  std::vector<std::string> failures;  // "qid: reason"
  std::vector<EvalRecord> records;    // sorted by qid
  bool operator==(const EvalReport&) const = default;
};

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(std::string_view json);
// Fixed-width table: one header row, one data row for the dataset.
std::string report_table(const EvalReport& report);

// Answers a question about an image; throws to mark the sample failed.
using Predictor = std::function<std::string(const QASample&, const ImageTensor&)>;

// Greedy (or policy-driven) generation from a one-turn conversation.
Predictor model_predictor(const ModelBundle& bundle, const DecodePolicy& policy,
                          std::size_t max_new = 32);
// Test hook: answers with the gold answer.
Predictor echo_predictor();

// Scores every sample of the split; unreadable images and predictor errors
// are counted as failures and excluded. Throws kUndefinedMetric if either
// answer type has no scored sample.
EvalReport evaluate_split(const std::filesystem::path& split, const Predictor& predictor);

}  // namespace tlvm
