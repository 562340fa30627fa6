#include "tlvm/training.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <unordered_map>

#include "tlvm/checkpoint.h"
#include "tlvm/dataset.h"
#include "tlvm/error.h"
#include "tlvm/optim.h"

namespace tlvm {

namespace {

std::string upper(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

// Fits the sequence into the positional table once the IMAGE slot expands.
RenderedSequence fit(const RenderedSequence& seq, const ModelConfig& config, const std::string& id) {
  const std::size_t extra = seq.image_slot ? config.num_patches() - 1 : 0;
  RenderedSequence out;
  try {
    out = truncate(seq, config.max_seq_len - extra);
  } catch (const Error& e) {
    throw Error(e.code(), "record " + id + ": " + e.what());
  }
  // The last position has no next-token target, so require a supervised
  // token somewhere after the first.
  if (std::find(out.loss_mask.begin() + 1, out.loss_mask.end(), 1) == out.loss_mask.end()) {
    throw Error(ErrorCode::kTruncation, "record " + id + " has no supervised tokens after truncation");
  }
  return out;
}

class ImageTable {
 public:
  ImageTable(std::filesystem::path root, std::vector<ImageTensor>& images)
      : root_(std::move(root)), images_(images) {}

  std::size_t index_of(const std::string& relative, const std::string& id) {
    const auto it = index_.find(relative);
    if (it != index_.end()) return it->second;
    ImageTensor tensor;
    try {
      tensor = normalize(read_ppm(root_ / relative));
    } catch (const Error& e) {
      throw Error(ErrorCode::kImageDecode, "record " + id + ": image " + relative + ": " + e.what());
    }
    images_.push_back(std::move(tensor));
    index_.emplace(relative, images_.size() - 1);
    return images_.size() - 1;
  }

 private:
  std::filesystem::path root_;
  std::vector<ImageTensor>& images_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace

std::string_view stage_name(Stage stage) {
  switch (stage) {
    case Stage::kAlign: return "ALIGN";
    case Stage::kInstruct: return "INSTRUCT";
    case Stage::kFinetune: return "FINETUNE";
  }
  return "?";
}

Stage parse_stage(std::string_view name) {
  const std::string u = upper(name);
  if (u == "ALIGN") return Stage::kAlign;
  if (u == "INSTRUCT") return Stage::kInstruct;
  if (u == "FINETUNE") return Stage::kFinetune;
  throw Error(ErrorCode::kInvalidArgument, "unknown stage \"" + std::string(name) +
                                               "\" (expected align, instruct or finetune)");
}

FreezeSet parse_freeze_set(std::string_view text) {
  FreezeSet out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = std::min(text.find(',', start), text.size());
    const std::string item = trim(text.substr(start, comma - start));
    if (!item.empty()) out.insert(parse_family(item));
    start = comma + 1;
  }
  return out;
}

std::string freeze_set_string(const FreezeSet& freeze) {
  std::string out;
  for (Family f : freeze) {
    if (!out.empty()) out += ',';
    out += family_name(f);
  }
  return out;
}

StageConfig StageConfig::defaults(Stage stage) {
  StageConfig cfg;
  cfg.stage = stage;
  cfg.batch_size = 8;
  switch (stage) {
    case Stage::kAlign:
      cfg.steps = 300;
      cfg.lr = 3e-4;
      break;
    case Stage::kInstruct:
      cfg.steps = 500;
      cfg.lr = 1e-4;
      cfg.freeze = {Family::kVision};
      break;
    case Stage::kFinetune:
      cfg.steps = 300;
      cfg.lr = 1e-4;
      break;
  }
  return cfg;
}

void StageConfig::validate() const {
  auto fail = [](const std::string& why) { throw Error(ErrorCode::kInvalidConfig, why); };
  if (batch_size == 0) fail("batch_size must be at least 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) fail("lr must be positive and finite");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) fail("weight_decay must be >= 0");
  if (stage == Stage::kInstruct && !freeze.count(Family::kVision)) {
    fail("the INSTRUCT stage must keep the VISION family frozen");
  }
}

double LossLog::initial() const {
  if (entries.empty()) throw Error(ErrorCode::kInvalidArgument, "empty loss log");
  return entries.front().second;
}

double LossLog::final() const {
  if (entries.empty()) throw Error(ErrorCode::kInvalidArgument, "empty loss log");
  return entries.back().second;
}

std::vector<double> LossLog::moving_average(std::size_t window) const {
  if (window == 0) throw Error(ErrorCode::kInvalidArgument, "moving-average window must be positive");
  std::vector<double> out;
  out.reserve(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const std::size_t first = i + 1 >= window ? i + 1 - window : 0;
    double sum = 0.0;
    for (std::size_t j = first; j <= i; ++j) sum += entries[j].second;
    out.push_back(sum / static_cast<double>(i - first + 1));
  }
  return out;
}

void export_loss_csv(const LossLog& log, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << "step,loss\n";
  char buf[64];
  for (const auto& [step, loss] : log.entries) {
    std::snprintf(buf, sizeof(buf), "%llu,%.17g\n", static_cast<unsigned long long>(step), loss);
    out << buf;
  }
  if (!out) throw Error(ErrorCode::kIo, "cannot write loss log " + path.string());
}

void apply_freeze_mask(GradMap& grads, const FreezeSet& freeze) {
  for (auto& [name, grad] : grads) {
    if (freeze.count(family_of(name))) std::fill(grad.begin(), grad.end(), 0.0);
  }
}

void apply_freeze_mask(GradMap& grads, std::span<const std::string> freeze_names) {
  FreezeSet freeze;
  for (const auto& name : freeze_names) freeze.insert(parse_family(name));
  apply_freeze_mask(grads, freeze);
}

TrainingSet load_training_set(Stage stage, const std::filesystem::path& data,
                              const ModelConfig& config) {
  TrainingSet set;
  ImageTable images(data.parent_path(), set.images);
  if (stage == Stage::kFinetune) {
    for (const QASample& s : read_qa_samples(data)) {
      Conversation conv{{{Role::kUser, s.question}, {Role::kAssistant, s.answer}}};
      TrainingExample ex{s.qid, fit(render_conversation(conv, true), config, s.qid),
                         images.index_of(s.image, s.qid)};
      set.examples.push_back(std::move(ex));
    }
  } else {
    for (const ConversationRecord& r : read_conversations(data)) {
      bool with_image = false;
      Conversation conv;
      RenderedSequence seq;
      try {
        conv = to_conversation(r, &with_image);
        seq = render_conversation(conv, with_image);
      } catch (const Error& e) {
        throw Error(ErrorCode::kSchemaMismatch, data.string() + ": record " + r.id + ": " + e.what());
      }
      if (with_image && r.image.empty()) {
        throw Error(ErrorCode::kSchemaMismatch, "record " + r.id + " has an image marker but no image");
      }
      TrainingExample ex{r.id, fit(seq, config, r.id), std::nullopt};
      if (with_image) ex.image = images.index_of(r.image, r.id);
      set.examples.push_back(std::move(ex));
    }
  }
  if (set.examples.empty()) {
    throw Error(ErrorCode::kSchemaMismatch, data.string() + " contains no records");
  }
  return set;
}

StageResult run_stage(const ModelBundle& bundle, const StageConfig& cfg, const StepCallback& on_step) {
  cfg.validate();
  if (cfg.steps == 0) {
    StageResult result{bundle.deep_copy(), {}};
    if (cfg.checkpoint_out) save_checkpoint(result.bundle, *cfg.checkpoint_out);
    return result;
  }
  return run_stage(bundle, cfg, load_training_set(cfg.stage, cfg.data, bundle.config), on_step);
}

StageResult run_stage(const ModelBundle& bundle, const StageConfig& cfg, const TrainingSet& data,
                      const StepCallback& on_step) {
  cfg.validate();
  StageResult result{bundle.deep_copy(), {}};
  ModelBundle& model = result.bundle;

  std::vector<std::string> names;
  std::vector<Tensor> trainable;
  for (auto& [name, t] : model.params) {
    const bool train = !cfg.freeze.count(family_of(name));
    t.set_requires_grad(train);
    if (train) {
      names.push_back(name);
      trainable.push_back(t);
    }
  }
  const bool vision_frozen = cfg.freeze.count(Family::kVision) > 0;
  std::vector<std::optional<Tensor>> feature_cache(data.images.size());

  AdamConfig adam;
  adam.lr = cfg.lr;
  adam.weight_decay = cfg.weight_decay;
  AdamState state;
  std::mt19937_64 rng(cfg.seed);
  const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);

  for (std::uint64_t step = 1; step <= cfg.steps; ++step) {
    for (Tensor& p : trainable) p.clear_grad();
    double total = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const TrainingExample& ex = data.examples[rng() % data.examples.size()];
      Tape tape;
      TapeScope scope(tape);
      std::optional<Tensor> visual;
      if (ex.image) {
        Tensor features;
        if (vision_frozen) {
          auto& cached = feature_cache[*ex.image];
          if (!cached) {
            NoGradScope no_grad;
            cached = encode_image(model, data.images[*ex.image]);
          }
          features = *cached;
        } else {
          features = encode_image(model, data.images[*ex.image]);
        }
        visual = project_features(model, features);
      }
      const Tensor loss = next_token_loss(model, merge_sequence(model, ex.sequence, visual));
      total += loss.item();
      if (loss.requires_grad()) tape.backward(ops::scale(loss, inv_batch));
    }
    const double mean = total * inv_batch;
    if (!std::isfinite(mean)) {
      throw Error(ErrorCode::kNonFiniteLoss, std::string(stage_name(cfg.stage)) +
                                                 ": non-finite loss at step " + std::to_string(step));
    }

    GradMap grads;
    std::vector<std::span<const double>> grad_views;
    for (std::size_t i = 0; i < trainable.size(); ++i) {
      grads.emplace(names[i], trainable[i].grad_buffer());
      grad_views.push_back(trainable[i].grad_buffer());
    }
    apply_freeze_mask(grads, cfg.freeze);
    if (!trainable.empty()) adam_step(trainable, grad_views, state, adam);

    result.log.entries.emplace_back(step, mean);
    if (on_step) on_step(step, mean);
  }

  for (auto& [name, t] : model.params) {
    t.clear_grad();
    t.set_requires_grad(false);
  }
  model.lineage.push_back({std::string(stage_name(cfg.stage)), cfg.data.filename().string(), cfg.steps, cfg.seed});
  if (cfg.checkpoint_out) save_checkpoint(model, *cfg.checkpoint_out);
  return result;
}

}  // namespace tlvm
