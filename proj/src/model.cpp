#include "tlvm/model.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <random>

#include "tlvm/error.h"

namespace tlvm {

namespace {

enum class InitKind { kUniform, kZeros, kOnes };

struct ParamSpec {
  std::string name;
  Shape shape;
  InitKind init;
};

void add_linear(std::vector<ParamSpec>& specs, const std::string& prefix, std::size_t in,
                std::size_t out) {
  specs.push_back({prefix + ".weight", {in, out}, InitKind::kUniform});
  specs.push_back({prefix + ".bias", {out}, InitKind::kZeros});
}

void add_norm(std::vector<ParamSpec>& specs, const std::string& prefix, std::size_t d) {
  specs.push_back({prefix + ".gamma", {d}, InitKind::kOnes});
  specs.push_back({prefix + ".beta", {d}, InitKind::kZeros});
}

void add_block(std::vector<ParamSpec>& specs, const std::string& prefix, std::size_t d,
               std::size_t ff) {
  add_norm(specs, prefix + ".norm1", d);
  for (const char* proj : {"q", "k", "v", "o"}) {
    add_linear(specs, prefix + ".attn." + proj, d, d);
  }
  add_norm(specs, prefix + ".norm2", d);
  add_linear(specs, prefix + ".mlp.fc1", d, ff);
  add_linear(specs, prefix + ".mlp.fc2", ff, d);
}

// Canonical creation order; init_model consumes the RNG in this order.
std::vector<ParamSpec> param_specs(const ModelConfig& c) {
  std::vector<ParamSpec> specs;
  add_linear(specs, "vision.patch_embed", c.patch_dim(), c.d_vision);
  specs.push_back({"vision.pos_embed", {c.num_patches(), c.d_vision}, InitKind::kUniform});
  for (std::size_t i = 0; i < c.n_vision_layers; ++i) {
    add_block(specs, "vision.layers." + std::to_string(i), c.d_vision, c.d_vision_ff);
  }
  add_norm(specs, "vision.final_norm", c.d_vision);

  add_linear(specs, "connector.fc1", c.d_vision, c.connector_hidden);
  add_linear(specs, "connector.fc2", c.connector_hidden, c.d_model);

  specs.push_back({"lm.tok_embed", {c.vocab_size, c.d_model}, InitKind::kUniform});
  specs.push_back({"lm.pos_embed", {c.max_seq_len, c.d_model}, InitKind::kUniform});
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    add_block(specs, "lm.layers." + std::to_string(i), c.d_model, c.d_ff);
  }
  add_norm(specs, "lm.final_norm", c.d_model);
  add_linear(specs, "lm.head", c.d_model, c.vocab_size);
  return specs;
}

Tensor linear(const ModelBundle& m, const std::string& prefix, const Tensor& x) {
  return ops::add_bias(ops::matmul(x, m.param(prefix + ".weight")), m.param(prefix + ".bias"));
}

Tensor norm(const ModelBundle& m, const std::string& prefix, const Tensor& x) {
  return ops::layer_norm(x, m.param(prefix + ".gamma"), m.param(prefix + ".beta"));
}

// Appends `rows` to the cached buffer and returns the whole buffer as a tensor.
Tensor extend_cache(std::vector<double>& cached, const Tensor& rows) {
  cached.insert(cached.end(), rows.data().begin(), rows.data().end());
  const std::size_t width = rows.dim(1);
  return Tensor(Shape{cached.size() / width, width}, cached);
}

Tensor transformer_block(const ModelBundle& m, const std::string& prefix, const Tensor& x,
                         std::size_t heads, bool causal, KVCache::Layer* cache,
                         std::size_t offset) {
  const Tensor h = norm(m, prefix + ".norm1", x);
  const Tensor q = linear(m, prefix + ".attn.q", h);
  Tensor k = linear(m, prefix + ".attn.k", h);
  Tensor v = linear(m, prefix + ".attn.v", h);
  if (cache != nullptr) {
    k = extend_cache(cache->keys, k);
    v = extend_cache(cache->values, v);
  }
  const Tensor attn = ops::attention(q, k, v, {heads, causal, offset});
  Tensor out = ops::add(x, linear(m, prefix + ".attn.o", attn));
  const Tensor h2 = norm(m, prefix + ".norm2", out);
  const Tensor ff =
      linear(m, prefix + ".mlp.fc2", ops::gelu(linear(m, prefix + ".mlp.fc1", h2)));
  return ops::add(out, ff);
}

double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace

std::string_view family_name(Family family) {
  switch (family) {
    case Family::kVision: return "VISION";
    case Family::kConnector: return "CONNECTOR";
    case Family::kLm: return "LM";
  }
  return "?";
}

Family parse_family(std::string_view name) {
  std::string upper(name);
  for (char& ch : upper) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  for (Family f : kAllFamilies) {
    if (family_name(f) == upper) return f;
  }
  throw Error(ErrorCode::kUnknownFamily, "unknown parameter family \"" + std::string(name) + "\"");
}

Family family_of(std::string_view param_name) {
  if (param_name.starts_with("vision.")) return Family::kVision;
  if (param_name.starts_with("connector.")) return Family::kConnector;
  if (param_name.starts_with("lm.")) return Family::kLm;
  throw Error(ErrorCode::kUnknownFamily,
              "parameter \"" + std::string(param_name) + "\" belongs to no family");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& why) { throw Error(ErrorCode::kInvalidConfig, why); };
  for (std::size_t v : {d_model, n_layers, n_heads, d_ff, max_seq_len, image_size, patch_size,
                        d_vision, n_vision_layers, n_vision_heads, d_vision_ff, connector_hidden}) {
    if (v == 0) fail("model dimensions must be positive");
  }
  if (vocab_size != static_cast<std::size_t>(vocab::kSize)) {
    fail("vocab_size must be " + std::to_string(vocab::kSize));
  }
  if (d_model % n_heads != 0) {
    fail("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
         std::to_string(n_heads));
  }
  if (d_vision % n_vision_heads != 0) {
    fail("d_vision " + std::to_string(d_vision) + " is not divisible by n_vision_heads " +
         std::to_string(n_vision_heads));
  }
  if (image_size != ImageTensor::kSide || image_size % patch_size != 0) {
    fail("image_size must be " + std::to_string(ImageTensor::kSide) +
         " and a multiple of patch_size");
  }
  if (num_patches() >= max_seq_len) fail("max_seq_len cannot hold the visual tokens");
}

const Tensor& ModelBundle::param(const std::string& name) const {
  const auto it = params.find(name);
  if (it == params.end()) {
    throw Error(ErrorCode::kInvalidArgument, "model has no parameter \"" + name + "\"");
  }
  return it->second;
}

std::size_t ModelBundle::parameter_count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : params) total += t.numel();
  return total;
}

ModelBundle ModelBundle::deep_copy() const {
  ModelBundle copy;
  copy.config = config;
  copy.lineage = lineage;
  for (const auto& [name, t] : params) copy.params.emplace(name, t.clone());
  return copy;
}

std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& config) {
  std::vector<std::pair<std::string, Shape>> out;
  for (ParamSpec& spec : param_specs(config)) out.emplace_back(std::move(spec.name), std::move(spec.shape));
  return out;
}

std::size_t parameter_count(const ModelConfig& config) {
  std::size_t total = 0;
  for (const ParamSpec& spec : param_specs(config)) total += shape_numel(spec.shape);
  return total;
}

ModelBundle init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelBundle bundle;
  bundle.config = config;
  bundle.config.seed = seed;
  std::mt19937_64 rng(seed);
  for (const ParamSpec& spec : param_specs(config)) {
    std::vector<double> values(shape_numel(spec.shape), 0.0);
    switch (spec.init) {
      case InitKind::kZeros: break;
      case InitKind::kOnes: std::fill(values.begin(), values.end(), 1.0); break;
      case InitKind::kUniform: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(spec.shape.front()));
        for (double& v : values) v = (2.0 * unit_uniform(rng) - 1.0) * bound;
        break;
      }
    }
    bundle.params.emplace(spec.name, Tensor(spec.shape, std::move(values)));
  }
  return bundle;
}

Tensor encode_image(const ModelBundle& bundle, const ImageTensor& image) {
  const ModelConfig& c = bundle.config;
  const std::size_t side = c.image_size;
  if (image.values.size() != side * side * ImageTensor::kChannels) {
    throw Error(ErrorCode::kShapeMismatch,
                "encode_image expects a " + std::to_string(side) + "x" + std::to_string(side) +
                    "x3 image, got " + std::to_string(image.values.size()) + " values");
  }
  const std::size_t grid = side / c.patch_size;
  const std::size_t p = c.patch_size;
  // Patch-major rows; each row lists its pixels (dy, dx, channel).
  std::vector<double> patches(c.num_patches() * c.patch_dim());
  double* dst = patches.data();
  for (std::size_t py = 0; py < grid; ++py) {
    for (std::size_t px = 0; px < grid; ++px) {
      for (std::size_t dy = 0; dy < p; ++dy) {
        const std::size_t pixel = (py * p + dy) * side + px * p;
        dst = std::copy_n(image.values.data() + pixel * ImageTensor::kChannels,
                          p * ImageTensor::kChannels, dst);
      }
    }
  }
  Tensor x = linear(bundle, "vision.patch_embed",
                    Tensor(Shape{c.num_patches(), c.patch_dim()}, std::move(patches)));
  x = ops::add(x, bundle.param("vision.pos_embed"));
  for (std::size_t i = 0; i < c.n_vision_layers; ++i) {
    x = transformer_block(bundle, "vision.layers." + std::to_string(i), x, c.n_vision_heads,
                          /*causal=*/false, nullptr, 0);
  }
  return norm(bundle, "vision.final_norm", x);
}

Tensor project_features(const ModelBundle& bundle, const Tensor& features) {
  if (features.rank() != 2 || features.dim(1) != bundle.config.d_vision) {
    throw Error(ErrorCode::kShapeMismatch,
                "project_features expects [n x " + std::to_string(bundle.config.d_vision) +
                    "] features, got " + shape_string(features.shape()));
  }
  return linear(bundle, "connector.fc2", ops::gelu(linear(bundle, "connector.fc1", features)));
}

MergedSequence merge_sequence(const ModelBundle& bundle, const RenderedSequence& rendered,
                              const std::optional<Tensor>& visual_tokens) {
  if (rendered.tokens.empty() || rendered.loss_mask.size() != rendered.tokens.size()) {
    throw Error(ErrorCode::kInvalidArgument, "merge_sequence: empty or inconsistent sequence");
  }
  if (rendered.image_slot.has_value() != visual_tokens.has_value()) {
    throw Error(ErrorCode::kInvalidArgument,
                rendered.image_slot ? "sequence has an IMAGE slot but no visual tokens"
                                    : "visual tokens supplied for a sequence without an IMAGE slot");
  }
  const Tensor& table = bundle.param("lm.tok_embed");
  MergedSequence merged;
  if (!rendered.image_slot) {
    merged.embeddings = ops::embedding(table, rendered.tokens);
    merged.token_ids = rendered.tokens;
    merged.loss_mask = rendered.loss_mask;
    return merged;
  }
  const std::size_t slot = *rendered.image_slot;
  if (slot >= rendered.tokens.size() || rendered.tokens[slot] != vocab::kImage) {
    throw Error(ErrorCode::kInvalidArgument, "image_slot does not point at an IMAGE token");
  }
  const Tensor& visual = *visual_tokens;
  if (visual.rank() != 2 || visual.dim(1) != bundle.config.d_model) {
    throw Error(ErrorCode::kShapeMismatch,
                "visual tokens must be [n x d_model], got " + shape_string(visual.shape()));
  }
  const std::span<const TokenId> tokens(rendered.tokens);
  std::vector<Tensor> parts;
  if (slot > 0) parts.push_back(ops::embedding(table, tokens.first(slot)));
  parts.push_back(visual);
  if (slot + 1 < tokens.size()) parts.push_back(ops::embedding(table, tokens.subspan(slot + 1)));
  merged.embeddings = ops::concat_rows(parts);

  const std::size_t n_visual = visual.dim(0);
  merged.token_ids.assign(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(slot));
  merged.token_ids.insert(merged.token_ids.end(), n_visual, -1);
  merged.token_ids.insert(merged.token_ids.end(), tokens.begin() + static_cast<std::ptrdiff_t>(slot) + 1,
                          tokens.end());
  merged.loss_mask.assign(rendered.loss_mask.begin(),
                          rendered.loss_mask.begin() + static_cast<std::ptrdiff_t>(slot));
  merged.loss_mask.insert(merged.loss_mask.end(), n_visual, 0);
  merged.loss_mask.insert(merged.loss_mask.end(),
                          rendered.loss_mask.begin() + static_cast<std::ptrdiff_t>(slot) + 1,
                          rendered.loss_mask.end());
  return merged;
}

Tensor forward_lm(const ModelBundle& bundle, const Tensor& embedded, KVCache* cache) {
  const ModelConfig& c = bundle.config;
  if (embedded.rank() != 2 || embedded.dim(1) != c.d_model) {
    throw Error(ErrorCode::kShapeMismatch, "forward_lm expects [L x " +
                                               std::to_string(c.d_model) + "] input, got " +
                                               shape_string(embedded.shape()));
  }
  const std::size_t offset = cache ? cache->length : 0;
  const std::size_t rows = embedded.dim(0);
  if (offset + rows > c.max_seq_len) {
    throw Error(ErrorCode::kSequenceTooLong,
                "sequence of " + std::to_string(offset + rows) + " positions exceeds max_seq_len " +
                    std::to_string(c.max_seq_len));
  }
  if (cache != nullptr && cache->layers.size() != c.n_layers) cache->layers.resize(c.n_layers);
  Tensor x = ops::add(embedded, ops::slice_rows(bundle.param("lm.pos_embed"), offset, rows));
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    x = transformer_block(bundle, "lm.layers." + std::to_string(i), x, c.n_heads,
                          /*causal=*/true, cache ? &cache->layers[i] : nullptr, offset);
  }
  x = norm(bundle, "lm.final_norm", x);
  if (cache != nullptr) cache->length += rows;
  return linear(bundle, "lm.head", x);
}

Tensor next_token_loss(const ModelBundle& bundle, const MergedSequence& merged) {
  const std::size_t n = merged.token_ids.size();
  std::vector<TokenId> targets(n, 0);
  ops::Mask mask(n, 0);
  for (std::size_t t = 0; t + 1 < n; ++t) {
    if (!merged.loss_mask[t + 1]) continue;
    targets[t] = merged.token_ids[t + 1];
    mask[t] = 1;
  }
  return ops::cross_entropy(forward_lm(bundle, merged.embeddings), targets, mask);
}

namespace {

TokenId pick_token(std::span<const double> logits, const DecodePolicy& policy,
                   std::mt19937_64& rng) {
  if (policy.mode == DecodePolicy::Mode::kGreedy) {
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  if (!(policy.temperature > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "sampling temperature must be positive");
  }
  const double peak = *std::max_element(logits.begin(), logits.end());
  std::vector<double> weights(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    weights[i] = std::exp((logits[i] - peak) / policy.temperature);
    total += weights[i];
  }
  const double u = unit_uniform(rng) * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(weights.size() - 1);
}

}  // namespace

GenerationResult generate(const ModelBundle& bundle, const RenderedSequence& prompt,
                          const std::optional<ImageTensor>& image, const DecodePolicy& policy,
                          std::size_t max_new, const TokenCallback& on_token) {
  if (max_new == 0) throw Error(ErrorCode::kInvalidArgument, "max_new must be at least 1");
  NoGradScope no_grad;
  std::optional<Tensor> visual;
  if (image) visual = project_features(bundle, encode_image(bundle, *image));
  const MergedSequence merged = merge_sequence(bundle, prompt, visual);
  const std::size_t limit = bundle.config.max_seq_len;
  if (merged.token_ids.size() > limit) {
    throw Error(ErrorCode::kSequenceTooLong,
                "prompt of " + std::to_string(merged.token_ids.size()) +
                    " positions exceeds max_seq_len " + std::to_string(limit));
  }
  std::mt19937_64 rng(policy.seed);
  KVCache cache;
  Tensor logits = forward_lm(bundle, merged.embeddings, &cache);
  GenerationResult result;
  const Tensor& table = bundle.param("lm.tok_embed");
  const std::size_t vocab_size = bundle.config.vocab_size;
  while (true) {
    const auto last = logits.data().subspan((logits.dim(0) - 1) * vocab_size, vocab_size);
    const TokenId next = pick_token(last, policy, rng);
    result.tokens.push_back(next);
    if (on_token) on_token(next);
    if (next == vocab::kEos) {
      result.stopped_on_eos = true;
      break;
    }
    if (result.tokens.size() >= max_new || cache.length >= limit) break;
    const TokenId ids[] = {next};
    logits = forward_lm(bundle, ops::embedding(table, ids), &cache);
  }
  result.text = decode(result.tokens);
  return result;
}

}  // namespace tlvm
