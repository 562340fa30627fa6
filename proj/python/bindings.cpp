#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "tlvm/checkpoint.h"
#include "tlvm/datagen.h"
#include "tlvm/error.h"
#include "tlvm/eval.h"
#include "tlvm/telemetry.h"
#include "tlvm/tokenizer.h"
#include "tlvm/version.h"

namespace py = pybind11;
using namespace tlvm;

namespace {

// Scores parallel gold/prediction lists with synthetic qids.
std::pair<std::vector<QASample>, std::vector<Prediction>> pair_up(const std::vector<std::string>& golds,
                                                                  const std::vector<std::string>& predictions,
                                                                  AnswerType type) {
  if (golds.size() != predictions.size()) throw py::value_error("golds and predictions differ in length");
  std::vector<QASample> samples;
  std::vector<Prediction> preds;
  for (std::size_t i = 0; i < golds.size(); ++i) {
    const std::string qid = std::to_string(i);
    samples.push_back({qid, "", "", golds[i], type});
    preds.push_back({qid, predictions[i]});
  }
  return {std::move(samples), std::move(preds)};
}

std::string generate_text(const ModelBundle& bundle, const std::string& prompt,
                          const std::optional<std::filesystem::path>& image, std::size_t max_new,
                          std::optional<double> temperature, std::uint64_t seed) {
  std::optional<ImageTensor> img;
  if (image) img = normalize(read_ppm(*image));
  const DecodePolicy policy = temperature ? DecodePolicy::sample(*temperature, seed) : DecodePolicy::greedy();
  py::gil_scoped_release release;
  return generate(bundle, render_prompt({{{Role::kUser, prompt}}}, img.has_value()), img, policy, max_new).text;
}

}  // namespace

PYBIND11_MODULE(_tlvm, m) {
  m.doc() = "Desk-scale vision-language model toolkit";

  static py::exception<Error> error(m, "TlvmError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      PyErr_SetString(error.ptr(), (std::string(error_code_name(e.code())) + ": " + e.what()).c_str());
    }
  });

  m.def("version", [] { return std::string(version()); });

  m.def("encode", [](const std::string& text) { return encode(text); }, py::arg("text"));
  m.def("decode", [](const std::vector<TokenId>& ids) { return decode(ids); }, py::arg("ids"));

  m.def(
      "write_corpus",
      [](const std::filesystem::path& out, std::size_t captions, std::size_t conversations, std::size_t turns,
         std::size_t vqa_open, std::size_t vqa_closed, std::uint64_t seed) {
        const CorpusFiles f = write_corpus(out, {captions, conversations, turns, vqa_open, vqa_closed, seed});
        return py::dict(py::arg("align") = f.align, py::arg("instruct") = f.instruct,
                        py::arg("vqa_train") = f.vqa_train, py::arg("vqa_test") = f.vqa_test,
                        py::arg("image_count") = f.image_count);
      },
      py::arg("out"), py::arg("captions") = CorpusOptions{}.captions,
      py::arg("conversations") = CorpusOptions{}.conversations, py::arg("turns") = CorpusOptions{}.turns,
      py::arg("vqa_open") = CorpusOptions{}.vqa_open, py::arg("vqa_closed") = CorpusOptions{}.vqa_closed,
      py::arg("seed") = 0);

  m.def("normalize_answer", [](const std::string& text) { return normalize_answer(text); }, py::arg("text"));
  m.def(
      "closed_accuracy",
      [](const std::vector<std::string>& golds, const std::vector<std::string>& predictions) {
        const auto [s, p] = pair_up(golds, predictions, AnswerType::kClosed);
        return closed_accuracy(s, p);
      },
      py::arg("golds"), py::arg("predictions"));
  m.def(
      "open_recall",
      [](const std::vector<std::string>& golds, const std::vector<std::string>& predictions) {
        const auto [s, p] = pair_up(golds, predictions, AnswerType::kOpen);
        return open_recall(s, p);
      },
      py::arg("golds"), py::arg("predictions"));

  m.def(
      "check_budget",
      [](std::optional<double> power_w, std::uint64_t resident_bytes, std::optional<double> utilization_pct) {
        TelemetrySnapshot s;
        s.power_w = power_w;
        s.resident_bytes = resident_bytes;
        s.utilization_pct = utilization_pct;
        std::vector<std::string> names;
        for (Verdict v : check_budget(s, BudgetEnvelope{})) names.emplace_back(verdict_name(v));
        return names;
      },
      py::arg("power_w") = py::none(), py::arg("resident_bytes") = 0, py::arg("utilization_pct") = py::none());

  py::class_<ModelBundle>(m, "Model")
      .def_static(
          "init", [](std::uint64_t seed) { return init_model(ModelConfig{}, seed); }, py::arg("seed") = 0,
          "Fresh model with the default configuration")
      .def_static("load", &load_checkpoint, py::arg("path"))
      .def("save", [](const ModelBundle& b, const std::filesystem::path& p) { save_checkpoint(b, p); }, py::arg("path"))
      .def("to_bytes",
           [](const ModelBundle& b) {
             const auto bytes = serialize_checkpoint(b);
             return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
           })
      .def_property_readonly("parameter_count", &ModelBundle::parameter_count)
      .def_property_readonly("lineage",
                             [](const ModelBundle& b) {
                               py::list out;
                               for (const auto& e : b.lineage) {
                                 out.append(py::dict(py::arg("stage") = e.stage, py::arg("data") = e.data,
                                                     py::arg("steps") = e.steps, py::arg("seed") = e.seed));
                               }
                               return out;
                             })
      .def("generate", &generate_text, py::arg("prompt"), py::arg("image") = py::none(), py::arg("max_new") = 64,
           py::arg("temperature") = py::none(), py::arg("seed") = 0)
      .def(
          "evaluate",
          [](const ModelBundle& b, const std::filesystem::path& split, std::size_t max_new) {
            py::gil_scoped_release release;
            const EvalReport r = evaluate_split(split, model_predictor(b, DecodePolicy::greedy(), max_new));
            return std::make_tuple(r.open_recall_pct, r.closed_accuracy_pct, r.n_failed);
          },
          py::arg("split"), py::arg("max_new") = 32, "(open recall %, closed accuracy %, failed samples)");

  m.def(
      "evaluate_echo",
      [](const std::filesystem::path& split) {
        const EvalReport r = evaluate_split(split, echo_predictor());
        return std::make_tuple(r.open_recall_pct, r.closed_accuracy_pct, r.n_failed);
      },
      py::arg("split"), "Scores the gold answers against themselves");
}
