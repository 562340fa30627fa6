#include "tlvm/eval.h"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <numeric>
#include <set>

#include "json.hpp"
#include "tlvm/error.h"

namespace tlvm {

namespace {

using nlohmann::ordered_json;
using i128 = __int128;

void check_aligned(std::span<const QASample> samples, std::span<const Prediction> predictions) {
  if (samples.empty()) throw Error(ErrorCode::kUndefinedMetric, "metric over an empty sample set");
  if (samples.size() != predictions.size()) {
    throw Error(ErrorCode::kQidMismatch, std::to_string(samples.size()) + " samples but " +
                                             std::to_string(predictions.size()) + " predictions");
  }
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].qid != predictions[i].qid) {
      throw Error(ErrorCode::kQidMismatch, "sample " + samples[i].qid + " paired with prediction " +
                                               predictions[i].qid);
    }
  }
}

std::set<std::string> unique_words(std::string_view text) {
  const auto words = normalize_answer(text);
  return {words.begin(), words.end()};
}

i128 gcd128(i128 a, i128 b) {
  while (b != 0) {
    const i128 t = a % b;
    a = b;
    b = t;
  }
  return a < 0 ? -a : a;
}

double to_double(i128 num, i128 den) {
  constexpr i128 kExact = i128{1} << 53;
  if (num < kExact && den < kExact) return static_cast<double>(num) / static_cast<double>(den);
  return static_cast<double>(static_cast<long double>(num) / static_cast<long double>(den));
}

}  // namespace

std::vector<std::string> normalize_answer(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) words.push_back(std::move(current));
    current.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      continue;
    } else {
      current.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return words;
}

SampleScore closed_score(const QASample& sample, std::string_view prediction) {
  const auto gold = normalize_answer(sample.answer);
  if (gold.size() != 1 || (gold[0] != "yes" && gold[0] != "no")) {
    throw Error(ErrorCode::kInvalidArgument,
                "closed sample " + sample.qid + " has gold answer \"" + sample.answer + "\"");
  }
  const auto pred = normalize_answer(prediction);
  return {!pred.empty() && pred[0] == gold[0] ? 1u : 0u, 1};
}

SampleScore open_score(const QASample& sample, std::string_view prediction) {
  const auto gold = unique_words(sample.answer);
  if (gold.empty()) {
    throw Error(ErrorCode::kUndefinedMetric, "open sample " + sample.qid + " has an empty gold answer");
  }
  const auto pred = unique_words(prediction);
  std::size_t hits = 0;
  for (const auto& w : gold) hits += pred.count(w);
  return {hits, gold.size()};
}

double exact_mean(std::span<const SampleScore> scores, std::uint64_t scale) {
  if (scores.empty()) throw Error(ErrorCode::kUndefinedMetric, "mean over an empty score set");
  i128 num = 0, den = 1;
  for (const SampleScore& s : scores) {
    if (s.total == 0) throw Error(ErrorCode::kInvalidArgument, "score with zero denominator");
    // num/den + hits/total
    const i128 t = static_cast<i128>(s.total);
    const i128 g = gcd128(den, t);
    num = num * (t / g) + static_cast<i128>(s.hits) * (den / g);
    den = den / g * t;
    const i128 r = gcd128(num, den);
    if (r > 1) num /= r, den /= r;
  }
  return to_double(num * static_cast<i128>(scale), den * static_cast<i128>(scores.size()));
}

double closed_accuracy(std::span<const QASample> samples, std::span<const Prediction> predictions) {
  check_aligned(samples, predictions);
  std::vector<SampleScore> scores;
  for (std::size_t i = 0; i < samples.size(); ++i) scores.push_back(closed_score(samples[i], predictions[i].text));
  return exact_mean(scores);
}

double open_recall(std::span<const QASample> samples, std::span<const Prediction> predictions) {
  check_aligned(samples, predictions);
  std::vector<SampleScore> scores;
  for (std::size_t i = 0; i < samples.size(); ++i) scores.push_back(open_score(samples[i], predictions[i].text));
  return exact_mean(scores);
}

std::string report_to_json(const EvalReport& report) {
  ordered_json j;
  j["dataset"] = report.dataset;
  j["n_open"] = report.n_open;
  j["n_closed"] = report.n_closed;
  j["open_recall_pct"] = report.open_recall_pct;
  j["closed_accuracy_pct"] = report.closed_accuracy_pct;
  j["n_failed"] = report.n_failed;
  j["failures"] = report.failures;
  j["records"] = ordered_json::array();
  for (const EvalRecord& r : report.records) {
    j["records"].push_back({{"qid", r.qid},
                            {"answer_type", answer_type_name(r.answer_type)},
                            {"question", r.question},
                            {"gold", r.gold},
                            {"prediction", r.prediction},
                            {"hits", r.hits},
                            {"total", r.total},
                            {"score", r.score}});
  }
  return j.dump(2);
}

EvalReport report_from_json(std::string_view text) {
  try {
    const ordered_json j = ordered_json::parse(text);
    EvalReport report;
    report.dataset = j.at("dataset").get<std::string>();
    report.n_open = j.at("n_open").get<std::size_t>();
    report.n_closed = j.at("n_closed").get<std::size_t>();
    report.open_recall_pct = j.at("open_recall_pct").get<double>();
    report.closed_accuracy_pct = j.at("closed_accuracy_pct").get<double>();
    report.n_failed = j.at("n_failed").get<std::size_t>();
    report.failures = j.at("failures").get<std::vector<std::string>>();
    for (const auto& r : j.at("records")) {
      EvalRecord rec;
      rec.qid = r.at("qid").get<std::string>();
      const auto type = r.at("answer_type").get<std::string>();
      if (type != "OPEN" && type != "CLOSED") {
        throw Error(ErrorCode::kSchemaMismatch, "report record " + rec.qid + " has answer_type " + type);
      }
      rec.answer_type = type == "OPEN" ? AnswerType::kOpen : AnswerType::kClosed;
      rec.question = r.at("question").get<std::string>();
      rec.gold = r.at("gold").get<std::string>();
      rec.prediction = r.at("prediction").get<std::string>();
      rec.hits = r.at("hits").get<std::size_t>();
      rec.total = r.at("total").get<std::size_t>();
      rec.score = r.at("score").get<double>();
      report.records.push_back(std::move(rec));
    }
    return report;
  } catch (const ordered_json::exception& e) {
    throw Error(ErrorCode::kSchemaMismatch, std::string("eval report: ") + e.what());
  }
}

std::string report_table(const EvalReport& report) {
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof(buf), "%-20s %10s %12s %8s %10s %8s\n", "Dataset", "Open (%)", "Closed (%)",
                "N open", "N closed", "Failed");
  out += buf;
  std::snprintf(buf, sizeof(buf), "%-20s %10.2f %12.2f %8zu %10zu %8zu\n", report.dataset.c_str(),
                report.open_recall_pct, report.closed_accuracy_pct, report.n_open, report.n_closed,
                report.n_failed);
  out += buf;
  return out;
}

Predictor model_predictor(const ModelBundle& bundle, const DecodePolicy& policy, std::size_t max_new) {
  return [&bundle, policy, max_new](const QASample& sample, const ImageTensor& image) {
    const RenderedSequence prompt = render_prompt({{{Role::kUser, sample.question}}}, true);
    return generate(bundle, prompt, image, policy, max_new).text;
  };
}

Predictor echo_predictor() {
  return [](const QASample& sample, const ImageTensor&) { return sample.answer; };
}

EvalReport evaluate_split(const std::filesystem::path& split, const Predictor& predictor) {
  const std::vector<QASample> samples = read_qa_samples(split);
  EvalReport report;
  report.dataset = split.stem().string();
  std::vector<SampleScore> open, closed;
  for (const QASample& s : samples) {
    std::string prediction;
    try {
      const ImageTensor image = normalize(read_ppm(split.parent_path() / s.image));
      prediction = predictor(s, image);
    } catch (const Error& e) {
      report.failures.push_back(s.qid + ": " + e.what());
      continue;
    }
    const SampleScore score =
        s.answer_type == AnswerType::kClosed ? closed_score(s, prediction) : open_score(s, prediction);
    (s.answer_type == AnswerType::kClosed ? closed : open).push_back(score);
    report.records.push_back({s.qid, s.answer_type, s.question, s.answer, prediction, score.hits,
                              score.total, score.value()});
  }
  report.n_failed = report.failures.size();
  report.n_open = open.size();
  report.n_closed = closed.size();
  if (closed.empty()) {
    throw Error(ErrorCode::kUndefinedMetric,
                split.string() + " has no scorable closed-ended samples; closed accuracy is undefined");
  }
  if (open.empty()) {
    throw Error(ErrorCode::kUndefinedMetric,
                split.string() + " has no scorable open-ended samples; open recall is undefined");
  }
  report.open_recall_pct = exact_mean(open, 100);
  report.closed_accuracy_pct = exact_mean(closed, 100);
  std::sort(report.records.begin(), report.records.end(),
            [](const EvalRecord& a, const EvalRecord& b) { return a.qid < b.qid; });
  return report;
}

}  // namespace tlvm
