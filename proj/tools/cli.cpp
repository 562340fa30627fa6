#include "cli.h"

#include <pthread.h>
#include <signal.h>

#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "tlvm/checkpoint.h"
#include "tlvm/datagen.h"
#include "tlvm/error.h"
#include "tlvm/eval.h"
#include "tlvm/serving.h"
#include "tlvm/training.h"
#include "tlvm/version.h"

namespace tlvm {

namespace {

using nlohmann::ordered_json;
namespace fs = std::filesystem;

constexpr int kOk = 0;
constexpr int kInternal = 1;
constexpr int kUsage = 2;

// Thresholds the end-to-end run is held to; recorded in eval manifests.
constexpr double kClosedThresholdPct = 80.0;
constexpr double kOpenThresholdPct = 60.0;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string iso_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw Error(ErrorCode::kIo, "cannot write " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot rename " + tmp.string() + ": " + ec.message());
}

struct Manifest {
  std::string command;
  ordered_json config = ordered_json::object();
  std::uint64_t seed = 0;
  ordered_json inputs = ordered_json::object();
  ordered_json outputs = ordered_json::object();
  ordered_json extra = ordered_json::object();
  std::string started = iso_now();

  void write(const fs::path& path) const {
    ordered_json j;
    j["command"] = command;
    j["version"] = std::string(version());
    j["config"] = config;
    j["seed"] = seed;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    for (const auto& [k, v] : extra.items()) j[k] = v;
    j["started_at"] = started;
    j["finished_at"] = iso_now();
    write_atomic(path, j.dump(2) + "\n");
  }
};

fs::path sidecar(const fs::path& output, const std::string& suffix) { return output.string() + suffix; }

// Library errors caused by user input map to exit 2; the rest are internal.
int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNonFiniteLoss:
    case ErrorCode::kShapeMismatch:
      return kInternal;
    default:
      return kUsage;
  }
}

// ---- datagen --------------------------------------------------------------

struct DatagenArgs {
  std::string out;
  CorpusOptions opts;
};

void add_datagen(CLI::App& app, DatagenArgs& a) {
  app.add_option("--out", a.out, "Output directory")->required();
  app.add_option("--captions", a.opts.captions, "Caption pairs for ALIGN")->capture_default_str();
  app.add_option("--conversations", a.opts.conversations, "Conversations for INSTRUCT")->capture_default_str();
  app.add_option("--turns", a.opts.turns, "Question/answer turns per conversation")->capture_default_str();
  app.add_option("--vqa-open", a.opts.vqa_open, "Open-ended VQA samples")->capture_default_str();
  app.add_option("--vqa-closed", a.opts.vqa_closed, "Closed-ended VQA samples")->capture_default_str();
  app.add_option("--seed", a.opts.seed, "Generator seed")->capture_default_str();
}

int cmd_datagen(const DatagenArgs& a, std::ostream& out) {
  Manifest m;
  m.command = "datagen";
  m.seed = a.opts.seed;
  m.config = {{"captions", a.opts.captions}, {"conversations", a.opts.conversations}, {"turns", a.opts.turns},
              {"vqa_open", a.opts.vqa_open},  {"vqa_closed", a.opts.vqa_closed},       {"seed", a.opts.seed}};
  const fs::path dir = a.out;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw UsageError("cannot create output directory " + dir.string());
  const CorpusFiles files = write_corpus(dir, a.opts);
  m.outputs = {{"dir", dir.string()},
               {"align", files.align.string()},
               {"instruct", files.instruct.string()},
               {"vqa_train", files.vqa_train.string()},
               {"vqa_test", files.vqa_test.string()},
               {"image_count", files.image_count}};
  m.write(dir / "manifest.json");
  out << "wrote " << files.image_count << " images and 4 splits to " << dir.string() << "\n";
  return kOk;
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  std::string stage;
  std::string data;
  std::optional<std::string> init;
  std::string out;
  std::optional<std::uint64_t> steps;
  std::optional<std::size_t> batch_size;
  std::optional<double> lr;
  std::optional<std::string> freeze;
  std::uint64_t seed = 0;
  std::uint64_t model_seed = 0;
  std::optional<std::string> loss_csv;
  std::uint64_t log_every = 20;
};

void add_train(CLI::App& app, TrainArgs& a) {
  app.add_option("--stage", a.stage, "align, instruct or finetune")->required();
  app.add_option("--data", a.data, "Stage data (JSON-lines)")->required();
  app.add_option("--init", a.init, "Checkpoint to start from (required after ALIGN)");
  app.add_option("--out", a.out, "Output checkpoint")->required();
  app.add_option("--steps", a.steps, "Optimizer steps (stage default if omitted)");
  app.add_option("--batch-size", a.batch_size, "Samples per step");
  app.add_option("--lr", a.lr, "Learning rate");
  app.add_option("--freeze", a.freeze, "Frozen families, e.g. VISION,LM; 'none' for none");
  app.add_option("--seed", a.seed, "Batch sampling seed")->capture_default_str();
  app.add_option("--model-seed", a.model_seed, "Initialization seed when --init is absent")->capture_default_str();
  app.add_option("--loss-csv", a.loss_csv, "Loss log path (default <out>.loss.csv)");
  app.add_option("--log-every", a.log_every, "Progress interval in steps (0 = quiet)")->capture_default_str();
}

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  const Stage stage = parse_stage(a.stage);
  if (stage != Stage::kAlign && !a.init) {
    throw UsageError("--stage " + std::string(stage_name(stage)) +
                     " must start from an earlier stage's checkpoint; pass --init");
  }
  StageConfig cfg = StageConfig::defaults(stage);
  cfg.data = a.data;
  if (a.steps) cfg.steps = *a.steps;
  if (a.batch_size) cfg.batch_size = *a.batch_size;
  if (a.lr) cfg.lr = *a.lr;
  if (a.freeze) cfg.freeze = *a.freeze == "none" ? FreezeSet{} : parse_freeze_set(*a.freeze);
  cfg.seed = a.seed;
  cfg.checkpoint_out = a.out;
  cfg.validate();
  if (!fs::exists(cfg.data)) throw Error(ErrorCode::kIo, "data file not found: " + cfg.data.string());

  Manifest m;
  m.command = "train";
  m.seed = a.seed;
  m.config = {{"stage", stage_name(stage)},
              {"steps", cfg.steps},
              {"batch_size", cfg.batch_size},
              {"lr", cfg.lr},
              {"weight_decay", cfg.weight_decay},
              {"freeze", freeze_set_string(cfg.freeze)},
              {"seed", cfg.seed},
              {"model_seed", a.model_seed}};
  m.inputs = {{"data", a.data}, {"init", a.init ? ordered_json(*a.init) : ordered_json(nullptr)}};

  const ModelBundle init = a.init ? load_checkpoint(*a.init) : init_model(ModelConfig{}, a.model_seed);
  const auto t0 = std::chrono::steady_clock::now();
  const StageResult r = run_stage(init, cfg, [&](std::uint64_t step, double loss) {
    if (a.log_every && (step % a.log_every == 0 || step == 1)) {
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      err << stage_name(stage) << " step " << step << "/" << cfg.steps << " loss " << loss << " (" << s << " s)\n";
    }
  });
  const fs::path csv = a.loss_csv ? fs::path(*a.loss_csv) : sidecar(a.out, ".loss.csv");
  export_loss_csv(r.log, csv);
  m.outputs = {{"checkpoint", a.out}, {"loss_csv", csv.string()}};
  if (!r.log.empty()) {
    const auto ma = r.log.moving_average(20);
    m.extra["loss"] = {{"initial", r.log.initial()}, {"final", r.log.final()}, {"moving_average_final", ma.back()}};
  }
  m.write(sidecar(a.out, ".manifest.json"));
  out << "wrote " << a.out << " after " << cfg.steps << " " << stage_name(stage) << " steps\n";
  return kOk;
}

// ---- eval -----------------------------------------------------------------

struct EvalArgs {
  std::optional<std::string> model;
  std::string split;
  std::string report;
  bool oracle_echo = false;
  std::size_t max_new = 32;
};

void add_eval(CLI::App& app, EvalArgs& a) {
  app.add_option("--model", a.model, "Checkpoint to evaluate");
  app.add_option("--split", a.split, "VQA split (JSON-lines)")->required();
  app.add_option("--report", a.report, "Report JSON path")->required();
  app.add_flag("--oracle-echo", a.oracle_echo, "Test hook: answer with the gold answer");
  app.add_option("--max-new", a.max_new, "Generation budget per answer")->capture_default_str();
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  if (!a.oracle_echo && !a.model) throw UsageError("--model is required unless --oracle-echo is given");
  if (!fs::exists(a.split)) throw Error(ErrorCode::kIo, "split file not found: " + a.split);
  Manifest m;
  m.command = "eval";
  m.config = {{"oracle_echo", a.oracle_echo}, {"max_new", a.max_new}, {"decode", "greedy"}};
  m.inputs = {{"split", a.split}, {"model", a.model ? ordered_json(*a.model) : ordered_json(nullptr)}};

  std::optional<ModelBundle> bundle;
  if (!a.oracle_echo) bundle = load_checkpoint(*a.model);
  const Predictor predictor =
      a.oracle_echo ? echo_predictor() : model_predictor(*bundle, DecodePolicy::greedy(), a.max_new);
  const EvalReport report = evaluate_split(a.split, predictor);

  const fs::path json_path = a.report;
  fs::path table_path = json_path;
  table_path.replace_extension(".txt");
  write_atomic(json_path, report_to_json(report) + "\n");
  write_atomic(table_path, report_table(report));
  m.outputs = {{"report", json_path.string()}, {"table", table_path.string()}};
  m.extra["metrics"] = {{"open_recall_pct", report.open_recall_pct},
                        {"closed_accuracy_pct", report.closed_accuracy_pct},
                        {"n_failed", report.n_failed}};
  m.extra["thresholds"] = {{"closed_accuracy_pct", kClosedThresholdPct}, {"open_recall_pct", kOpenThresholdPct}};
  m.write(sidecar(json_path, ".manifest.json"));

  out << report_table(report);
  char buf[128];
  std::snprintf(buf, sizeof(buf), "open recall %.2f%%, closed accuracy %.2f%%\n", report.open_recall_pct,
                report.closed_accuracy_pct);
  out << buf;
  return kOk;
}

// ---- generate -------------------------------------------------------------

struct GenerateArgs {
  std::string model;
  std::optional<std::string> image;
  std::string prompt;
  bool greedy = false;
  std::optional<double> temperature;
  std::uint64_t seed = 0;
  std::size_t max_new = 64;
};

void add_generate(CLI::App& app, GenerateArgs& a) {
  app.add_option("--model", a.model, "Checkpoint")->required();
  app.add_option("--image", a.image, "PPM image");
  app.add_option("--prompt", a.prompt, "User message")->required();
  auto* greedy = app.add_flag("--greedy", a.greedy, "Greedy decoding (default)");
  app.add_option("--temp", a.temperature, "Sampling temperature")->excludes(greedy);
  app.add_option("--seed", a.seed, "Sampling seed")->capture_default_str();
  app.add_option("--max-new", a.max_new, "Maximum new tokens")->capture_default_str();
}

int cmd_generate(const GenerateArgs& a, std::ostream& out) {
  if (a.max_new == 0) throw UsageError("--max-new must be at least 1");
  if (a.temperature && !(*a.temperature > 0.0)) throw UsageError("--temp must be positive");
  std::optional<ImageTensor> image;
  if (a.image) {
    try {
      image = normalize(read_ppm(*a.image));
    } catch (const Error& e) {
      throw Error(ErrorCode::kImageDecode, "IMAGE_DECODE: " + *a.image + ": " + e.what());
    }
  }
  const ModelBundle bundle = load_checkpoint(a.model);
  const DecodePolicy policy =
      a.temperature ? DecodePolicy::sample(*a.temperature, a.seed) : DecodePolicy::greedy();
  const RenderedSequence prompt = render_prompt({{{Role::kUser, a.prompt}}}, image.has_value());
  const GenerationResult r = generate(bundle, prompt, image, policy, a.max_new);
  Utf8Stream utf8;
  out << utf8.push(r.text) << utf8.finish() << "\n";
  return kOk;
}

// ---- serve ----------------------------------------------------------------

struct ServeArgs {
  std::optional<std::string> model;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string power = "none";
  std::string report = "serve_report.json";
  int sample_ms = 100;
};

void add_serve(CLI::App& app, ServeArgs& a) {
  app.add_option("--model", a.model, "Checkpoint to serve");
  app.add_option("--host", a.host, "Bind address")->capture_default_str();
  app.add_option("--port", a.port, "Port (0 picks a free one)")->capture_default_str();
  app.add_option("--power-provider", a.power, "none, sim:<w>,<pct> or file:<path>")->capture_default_str();
  app.add_option("--report", a.report, "Final telemetry report written on shutdown")->capture_default_str();
  app.add_option("--sample-ms", a.sample_ms, "Telemetry sampling period")->capture_default_str();
}

int cmd_serve(const ServeArgs& a, std::ostream& out, std::ostream& err) {
  ServerOptions opts;
  if (a.model) {
    if (!fs::exists(*a.model)) throw Error(ErrorCode::kIo, "model not found: " + *a.model);
    opts.model = fs::path(*a.model);
  }
  opts.host = a.host;
  opts.port = a.port;
  opts.power = PowerProvider::parse(a.power);
  if (a.sample_ms <= 0) throw UsageError("--sample-ms must be positive");
  opts.sample_period = std::chrono::milliseconds(a.sample_ms);

  Manifest m;
  m.command = "serve";
  m.config = {{"host", a.host}, {"port", a.port}, {"power_provider", opts.power.describe()}, {"sample_ms", a.sample_ms}};
  m.inputs = {{"model", a.model ? ordered_json(*a.model) : ordered_json(nullptr)}};

  // Signals are taken synchronously by one waiter thread; every thread
  // created below inherits the blocked mask.
  sigset_t stop_signals, previous;
  sigemptyset(&stop_signals);
  sigaddset(&stop_signals, SIGTERM);
  sigaddset(&stop_signals, SIGINT);
  pthread_sigmask(SIG_BLOCK, &stop_signals, &previous);
  struct RestoreMask {
    sigset_t mask;
    ~RestoreMask() { pthread_sigmask(SIG_SETMASK, &mask, nullptr); }
  } restore{previous};

  InferenceServer server(opts);
  const int port = server.bind();
  out << "listening on " << a.host << ":" << port << std::endl;

  std::thread waiter([&] {
    int sig = 0;
    sigwait(&stop_signals, &sig);
    server.stop();
  });
  server.serve();
  pthread_kill(waiter.native_handle(), SIGTERM);  // releases the waiter if serve() ended on its own
  waiter.join();
  // Discard a signal that raced with shutdown.
  timespec zero{0, 0};
  while (sigtimedwait(&stop_signals, nullptr, &zero) > 0) {
  }

  const RunReport report = server.final_report();
  write_atomic(a.report, run_report_to_json(report) + "\n");
  m.config["port"] = port;
  m.outputs = {{"report", a.report}};
  m.write(sidecar(a.report, ".manifest.json"));
  err << run_report_table(report);
  return kOk;
}

// Flat key=value files: keys are the long option names of whichever
// subcommand is running.
class FlatConfig : public CLI::ConfigBase {
 public:
  explicit FlatConfig(const CLI::App& app) : app_(app) {}

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    std::vector<CLI::ConfigItem> items = CLI::ConfigBase::from_config(input);
    const auto subs = app_.get_subcommands();
    if (subs.empty()) return items;
    for (auto& item : items) {
      if (!item.parents.empty()) throw CLI::ConfigError("config files are flat; no [sections]: " + item.fullname());
      item.parents = {subs.front()->get_name()};
    }
    return items;
  }

 private:
  const CLI::App& app_;
};

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Desk-scale vision-language model toolkit"};
  app.set_version_flag("--version", std::string(version()));
  app.require_subcommand(1);

  DatagenArgs datagen;
  TrainArgs train;
  EvalArgs eval;
  GenerateArgs gen;
  ServeArgs serve;
  auto* c_datagen = app.add_subcommand("datagen", "Write the synthetic corpus");
  auto* c_train = app.add_subcommand("train", "Run one training stage");
  auto* c_eval = app.add_subcommand("eval", "Score a checkpoint on a VQA split");
  auto* c_gen = app.add_subcommand("generate", "Answer one prompt");
  auto* c_serve = app.add_subcommand("serve", "Run the HTTP inference service");
  app.config_formatter(std::make_shared<FlatConfig>(app));
  app.set_config("--config", "", "Flat key=value file; flags override it");
  for (auto* sub : {c_datagen, c_train, c_eval, c_gen, c_serve}) sub->fallthrough();
  app.allow_config_extras(CLI::config_extras_mode::error);
  add_datagen(*c_datagen, datagen);
  add_train(*c_train, train);
  add_eval(*c_eval, eval);
  add_generate(*c_gen, gen);
  add_serve(*c_serve, serve);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*c_datagen) return cmd_datagen(datagen, out);
    if (*c_train) return cmd_train(train, out, err);
    if (*c_eval) return cmd_eval(eval, out);
    if (*c_gen) return cmd_generate(gen, out);
    if (*c_serve) return cmd_serve(serve, out, err);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const Error& e) {
    err << "error [" << error_code_name(e.code()) << "]: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kUsage;
}

}  // namespace tlvm
