#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tlvm/image.h"
#include "tlvm/ops.h"
#include "tlvm/tensor.h"
#include "tlvm/tokenizer.h"

namespace tlvm {

// Parameter families: the vision encoder, the connector that projects patch
// features into the LM embedding space, and the decoder-only language model.
enum class Family { kVision, kConnector, kLm };

std::string_view family_name(Family family);
// Accepts "VISION"/"vision", "CONNECTOR", "LM". Throws kUnknownFamily.
Family parse_family(std::string_view name);
inline constexpr Family kAllFamilies[] = {Family::kVision, Family::kConnector, Family::kLm};

struct ModelConfig {
  std::size_t d_model = 128;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_ff = 512;
  std::size_t vocab_size = vocab::kSize;
  std::size_t max_seq_len = 512;

  std::size_t image_size = ImageTensor::kSide;
  std::size_t patch_size = 8;
  std::size_t d_vision = 96;
  std::size_t n_vision_layers = 2;
  std::size_t n_vision_heads = 4;
  std::size_t d_vision_ff = 384;

  std::size_t connector_hidden = 128;

  std::uint64_t seed = 0;

  std::size_t num_patches() const {
    return (image_size / patch_size) * (image_size / patch_size);
  }
  std::size_t patch_dim() const { return patch_size * patch_size * ImageTensor::kChannels; }

  // Throws kInvalidConfig.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

// One executed tuning stage, recorded in checkpoints.
struct LineageEntry {
  std::string stage;
  std::string data;
  std::uint64_t steps = 0;
  std::uint64_t seed = 0;

  bool operator==(const LineageEntry&) const = default;
};

struct ModelBundle {
  ModelConfig config;
  // Sorted by canonical name; every name starts with its family prefix.
  std::map<std::string, Tensor> params;
  std::vector<LineageEntry> lineage;

  const Tensor& param(const std::string& name) const;
  std::size_t parameter_count() const;
  // A bundle whose tensors are independent copies of this one's.
  ModelBundle deep_copy() const;
};

// Family is encoded in the name prefix ("vision.", "connector.", "lm.").
Family family_of(std::string_view param_name);

// Canonical (name, shape) list implied by the config, in creation order.
std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& config);

// Closed form of the parameter count implied by the config.
std::size_t parameter_count(const ModelConfig& config);

// Uniform(-s, s) weights with s = 1/sqrt(rows), zero biases, unit LN gains,
// drawn in a fixed order from one mt19937_64 stream seeded with `seed`.
ModelBundle init_model(const ModelConfig& config, std::uint64_t seed);

// [num_patches x d_vision] patch features, bidirectional encoder.
Tensor encode_image(const ModelBundle& bundle, const ImageTensor& image);
// Row-wise Linear -> GELU -> Linear into the LM embedding width.
Tensor project_features(const ModelBundle& bundle, const Tensor& features);

struct MergedSequence {
  Tensor embeddings;                  // [L' x d_model]
  std::vector<TokenId> token_ids;     // -1 on spliced visual rows
  std::vector<std::uint8_t> loss_mask;
};

// Embeds text tokens and splices the visual tokens in place of the IMAGE slot.
MergedSequence merge_sequence(const ModelBundle& bundle, const RenderedSequence& rendered,
                              const std::optional<Tensor>& visual_tokens);

// Per-layer keys and values for positions [0, length).
struct KVCache {
  struct Layer {
    std::vector<double> keys;
    std::vector<double> values;
  };
  std::vector<Layer> layers;
  std::size_t length = 0;
};

// Pre-norm causal decoder over already-embedded rows. With a cache, rows are
// placed after the cached positions and their keys/values are appended.
Tensor forward_lm(const ModelBundle& bundle, const Tensor& embedded, KVCache* cache = nullptr);

// Mean next-token cross-entropy over supervised positions of a merged sequence.
Tensor next_token_loss(const ModelBundle& bundle, const MergedSequence& merged);

struct DecodePolicy {
  enum class Mode { kGreedy, kSample };
  Mode mode = Mode::kGreedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  static DecodePolicy greedy() { return {}; }
  static DecodePolicy sample(double temperature, std::uint64_t seed) {
    return {Mode::kSample, temperature, seed};
  }
};

struct GenerationResult {
  std::vector<TokenId> tokens;  // includes the terminating EOS, if any
  std::string text;
  bool stopped_on_eos = false;
};

using TokenCallback = std::function<void(TokenId)>;

// Autoregressive decode with a private KV cache. Greedy ties resolve to the
// lowest token id. Throws kSequenceTooLong if the merged prompt does not fit.
GenerationResult generate(const ModelBundle& bundle, const RenderedSequence& prompt,
                          const std::optional<ImageTensor>& image, const DecodePolicy& policy,
                          std::size_t max_new, const TokenCallback& on_token = {});

}  // namespace tlvm
