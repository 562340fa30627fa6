#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tlvm/image.h"
#include "tlvm/model.h"
#include "tlvm/tokenizer.h"

namespace tlvm {

enum class Stage { kAlign, kInstruct, kFinetune };

std::string_view stage_name(Stage stage);
// Case-insensitive; throws kInvalidArgument.
Stage parse_stage(std::string_view name);

using FreezeSet = std::set<Family>;
// Comma-separated family names, e.g. "VISION,LM". Empty string is the empty
// set. Throws kUnknownFamily.
FreezeSet parse_freeze_set(std::string_view text);
std::string freeze_set_string(const FreezeSet& freeze);

struct StageConfig {
  Stage stage = Stage::kAlign;
  std::filesystem::path data;
  std::uint64_t steps = 0;
  std::size_t batch_size = 8;
  double lr = 1e-4;
  double weight_decay = 0.0;
  FreezeSet freeze;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> checkpoint_out;

  // Per-stage defaults for steps, lr, batch size and freeze set.
  static StageConfig defaults(Stage stage);
  // Throws kInvalidConfig, e.g. INSTRUCT without VISION frozen.
  void validate() const;
};

struct LossLog {
  std::vector<std::pair<std::uint64_t, double>> entries;

  bool empty() const { return entries.empty(); }
  double initial() const;
  double final() const;
  // Trailing mean over up to `window` entries ending at each entry.
  std::vector<double> moving_average(std::size_t window = 20) const;
};

// "step,loss" header, then one row per entry with round-trippable floats.
void export_loss_csv(const LossLog& log, const std::filesystem::path& path);

using GradMap = std::map<std::string, std::span<double>>;
// Zeroes the gradients of parameters whose family is frozen.
void apply_freeze_mask(GradMap& grads, const FreezeSet& freeze);
// Same, with the freeze set given by family names.
void apply_freeze_mask(GradMap& grads, std::span<const std::string> freeze_names);

// A rendered training sequence and the image it refers to, if any.
struct TrainingExample {
  std::string id;
  RenderedSequence sequence;
  std::optional<std::size_t> image;
};

struct TrainingSet {
  std::vector<TrainingExample> examples;
  std::vector<ImageTensor> images;
};

// ALIGN/INSTRUCT read conversation JSON-lines, FINETUNE reads VQA JSON-lines.
// Sequences are truncated to fit max_seq_len after the visual splice. Throws
// kSchemaMismatch, kTruncation or kImageDecode naming the record.
TrainingSet load_training_set(Stage stage, const std::filesystem::path& data,
                              const ModelConfig& config);

struct StageResult {
  ModelBundle bundle;
  LossLog log;
};

using StepCallback = std::function<void(std::uint64_t step, double loss)>;

// Runs cfg.steps optimizer steps on a private copy of `bundle`. Batches are
// drawn from a generator seeded with cfg.seed; frozen families are never
// touched. Appends a lineage entry when steps > 0 and writes
// cfg.checkpoint_out if set. Throws kNonFiniteLoss naming the step.
StageResult run_stage(const ModelBundle& bundle, const StageConfig& cfg,
                      const StepCallback& on_step = {});
StageResult run_stage(const ModelBundle& bundle, const StageConfig& cfg, const TrainingSet& data,
                      const StepCallback& on_step = {});

}  // namespace tlvm
