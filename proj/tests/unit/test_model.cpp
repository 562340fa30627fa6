#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "../support/expect_error.h"
#include "doctest.h"
#include "tlvm/model.h"
#include "tlvm/optim.h"

using namespace tlvm;
using tlvm::testing::code_of;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 32;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 64;
  c.max_seq_len = 160;
  c.d_vision = 16;
  c.n_vision_layers = 1;
  c.n_vision_heads = 2;
  c.d_vision_ff = 32;
  c.connector_hidden = 24;
  return c;
}

// Written out by hand from the architecture description.
std::size_t count_oracle(const ModelConfig& c) {
  auto linear = [](std::size_t in, std::size_t out) { return in * out + out; };
  auto norm = [](std::size_t d) { return 2 * d; };
  auto block = [&](std::size_t d, std::size_t ff) {
    return 2 * norm(d) + 4 * linear(d, d) + linear(d, ff) + linear(ff, d);
  };
  const std::size_t patches = (c.image_size / c.patch_size) * (c.image_size / c.patch_size);
  const std::size_t patch_dim = c.patch_size * c.patch_size * 3;
  const std::size_t vision = linear(patch_dim, c.d_vision) + patches * c.d_vision +
                             c.n_vision_layers * block(c.d_vision, c.d_vision_ff) +
                             norm(c.d_vision);
  const std::size_t connector =
      linear(c.d_vision, c.connector_hidden) + linear(c.connector_hidden, c.d_model);
  const std::size_t lm = c.vocab_size * c.d_model + c.max_seq_len * c.d_model +
                         c.n_layers * block(c.d_model, c.d_ff) + norm(c.d_model) +
                         linear(c.d_model, c.vocab_size);
  return vision + connector + lm;
}

ImageTensor random_image(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  ImageTensor img;
  img.values.resize(64 * 64 * 3);
  for (double& v : img.values) v = u(rng);
  return img;
}

Tensor random_rows(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(rows * cols);
  for (double& x : v) x = n(rng);
  return Tensor(Shape{rows, cols}, std::move(v));
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

RenderedSequence qa_sequence(const std::string& q, const std::string& a, bool image) {
  return render_conversation({{{Role::kUser, q}, {Role::kAssistant, a}}}, image);
}

}  // namespace

TEST_CASE("parameter count matches the closed form") {
  const ModelConfig def;
  CHECK(parameter_count(def) == count_oracle(def));
  CHECK(init_model(def, 1).parameter_count() == count_oracle(def));
  CHECK(init_model(small_config(), 1).parameter_count() == count_oracle(small_config()));
}

TEST_CASE("every parameter belongs to exactly one family") {
  const ModelBundle m = init_model(small_config(), 2);
  std::size_t per_family[3] = {0, 0, 0};
  for (const auto& [name, t] : m.params) ++per_family[static_cast<int>(family_of(name))];
  CHECK(per_family[0] > 0);
  CHECK(per_family[1] == 4);
  CHECK(per_family[0] + per_family[1] + per_family[2] == m.params.size());
  CHECK(code_of([] { family_of("decoder.x"); }) == ErrorCode::kUnknownFamily);
  CHECK(parse_family("vision") == Family::kVision);
  CHECK(parse_family("LM") == Family::kLm);
  CHECK(code_of([] { parse_family("head"); }) == ErrorCode::kUnknownFamily);
}

TEST_CASE("init is deterministic and seed dependent") {
  const ModelBundle a = init_model(small_config(), 7);
  const ModelBundle b = init_model(small_config(), 7);
  const ModelBundle c = init_model(small_config(), 8);
  bool any_diff = false;
  for (const auto& [name, t] : a.params) {
    CHECK(bitwise_equal(t.data(), b.param(name).data()));
    any_diff = any_diff || !bitwise_equal(t.data(), c.param(name).data());
  }
  CHECK(any_diff);
  const double bound = 1.0 / std::sqrt(static_cast<double>(small_config().d_model));
  for (double v : a.param("lm.layers.0.attn.q.weight").data()) CHECK(std::abs(v) <= bound);
  for (double v : a.param("lm.head.bias").data()) CHECK(v == 0.0);
  for (double v : a.param("lm.final_norm.gamma").data()) CHECK(v == 1.0);
}

TEST_CASE("invalid configs are rejected") {
  ModelConfig c;
  c.n_heads = 3;
  CHECK(code_of([&] { init_model(c, 0); }) == ErrorCode::kInvalidConfig);
  c = ModelConfig{};
  c.patch_size = 7;
  CHECK(code_of([&] { init_model(c, 0); }) == ErrorCode::kInvalidConfig);
}

TEST_CASE("default config yields 64 visual tokens of the right widths") {
  const ModelBundle m = init_model(ModelConfig{}, 3);
  const Tensor f = encode_image(m, random_image(1));
  CHECK(f.shape() == Shape{64, 96});
  const Tensor v = project_features(m, f);
  CHECK(v.shape() == Shape{64, 128});
  CHECK_FALSE(bitwise_equal(f.data(), encode_image(m, random_image(2)).data()));

  ImageTensor bad;
  bad.values.resize(10);
  CHECK(code_of([&] { encode_image(m, bad); }) == ErrorCode::kShapeMismatch);
  CHECK(code_of([&] { project_features(m, Tensor(Shape{64, 95})); }) == ErrorCode::kShapeMismatch);
}

TEST_CASE("patch permutation is equivariant without position embeddings") {
  ModelBundle m = init_model(small_config(), 4);
  std::fill(m.params.at("vision.pos_embed").mutable_data().begin(),
            m.params.at("vision.pos_embed").mutable_data().end(), 0.0);
  const ImageTensor img = random_image(9);
  std::vector<std::size_t> perm(64);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(10));
  // Output patch i holds input patch perm[i].
  ImageTensor shuffled;
  shuffled.values.resize(img.values.size());
  for (std::size_t i = 0; i < 64; ++i) {
    const std::size_t sy = perm[i] / 8, sx = perm[i] % 8, dy = i / 8, dx = i % 8;
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t x = 0; x < 8; ++x)
        for (std::size_t ch = 0; ch < 3; ++ch)
          shuffled.values[((dy * 8 + y) * 64 + dx * 8 + x) * 3 + ch] =
              img.values[((sy * 8 + y) * 64 + sx * 8 + x) * 3 + ch];
  }
  const Tensor a = encode_image(m, img);
  const Tensor b = encode_image(m, shuffled);
  const std::size_t d = a.dim(1);
  double worst = 0.0;
  for (std::size_t i = 0; i < 64; ++i) {
    worst = std::max(worst, max_abs_diff(b.data().subspan(i * d, d), a.data().subspan(perm[i] * d, d)));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("project_features examples") {
  ModelBundle m = init_model(small_config(), 5);
  const Tensor f = random_rows(64, 16, 1);
  const Tensor full = project_features(m, f);
  const Tensor row = project_features(m, Tensor(Shape{1, 16}, std::vector<double>(f.data().begin() + 16 * 5, f.data().begin() + 16 * 6)));
  // GEMM blocking depends on the row count, so only rounding may differ.
  CHECK(max_abs_diff(row.data(), full.data().subspan(5 * 32, 32)) < 1e-12);

  for (const char* name : {"connector.fc1.weight", "connector.fc2.weight"}) {
    auto w = m.params.at(name).mutable_data();
    std::fill(w.begin(), w.end(), 0.0);
  }
  auto b2 = m.params.at("connector.fc2.bias").mutable_data();
  for (std::size_t i = 0; i < b2.size(); ++i) b2[i] = 0.1 * static_cast<double>(i);
  const Tensor z = project_features(m, f);
  for (std::size_t r = 0; r < 64; ++r)
    for (std::size_t i = 0; i < 32; ++i) CHECK(z.data()[r * 32 + i] == b2[i]);
}

TEST_CASE("merge length and mask laws") {
  const ModelBundle m = init_model(small_config(), 6);
  RenderedSequence seq = qa_sequence("abc", "de", true);
  REQUIRE(seq.size() == 10);
  const Tensor visual = project_features(m, encode_image(m, random_image(3)));
  const MergedSequence merged = merge_sequence(m, seq, visual);
  CHECK(merged.embeddings.dim(0) == 73);
  CHECK(merged.loss_mask.size() == 73);
  CHECK(merged.token_ids.size() == 73);
  for (std::size_t i = 1; i < 65; ++i) CHECK(merged.loss_mask[i] == 0);
  CHECK(std::count(merged.loss_mask.begin(), merged.loss_mask.end(), 1) ==
        std::count(seq.loss_mask.begin(), seq.loss_mask.end(), 1));

  const RenderedSequence text = qa_sequence("abc", "de", false);
  const MergedSequence plain = merge_sequence(m, text, std::nullopt);
  CHECK(plain.embeddings.dim(0) == text.size());
  const auto& table = m.param("lm.tok_embed");
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto id = static_cast<std::size_t>(text.tokens[i]);
    CHECK(bitwise_equal(plain.embeddings.data().subspan(i * 32, 32), table.data().subspan(id * 32, 32)));
  }
  CHECK(code_of([&] { merge_sequence(m, seq, std::nullopt); }) == ErrorCode::kInvalidArgument);
  CHECK(code_of([&] { merge_sequence(m, text, visual); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("forward_lm shape and causality") {
  const ModelBundle m = init_model(small_config(), 7);
  const Tensor x = random_rows(30, 32, 2);
  const Tensor logits = forward_lm(m, x);
  CHECK(logits.shape() == Shape{30, 262});
  for (std::size_t j : {0u, 1u, 13u, 29u}) {
    Tensor y = x.clone();
    y.mutable_data()[j * 32 + 3] += 0.5;
    const Tensor perturbed = forward_lm(m, y);
    CHECK(bitwise_equal(logits.data().first(j * 262), perturbed.data().first(j * 262)));
    CHECK_FALSE(bitwise_equal(logits.data().subspan(j * 262, 262), perturbed.data().subspan(j * 262, 262)));
  }
  CHECK(code_of([&] { forward_lm(m, random_rows(161, 32, 1)); }) == ErrorCode::kSequenceTooLong);
}

TEST_CASE("KV cache matches full recompute over 100 decode steps") {
  const ModelBundle m = init_model(small_config(), 8);
  const std::size_t prefix = 20, steps = 100;
  const Tensor x = random_rows(prefix + steps, 32, 3);
  const Tensor full = forward_lm(m, x);
  KVCache cache;
  const Tensor head = forward_lm(m, Tensor(Shape{prefix, 32}, std::vector<double>(x.data().begin(), x.data().begin() + prefix * 32)), &cache);
  double worst = max_abs_diff(head.data(), full.data().first(prefix * 262));
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t row = prefix + s;
    const Tensor one(Shape{1, 32}, std::vector<double>(x.data().begin() + row * 32, x.data().begin() + (row + 1) * 32));
    const Tensor step = forward_lm(m, one, &cache);
    worst = std::max(worst, max_abs_diff(step.data(), full.data().subspan(row * 262, 262)));
  }
  CHECK(cache.length == prefix + steps);
  CHECK(worst < 1e-9);
}

TEST_CASE("generation: determinism, max_new and errors") {
  const ModelBundle m = init_model(small_config(), 9);
  const RenderedSequence prompt = render_prompt({{{Role::kUser, "hello"}}}, true);
  const ImageTensor img = random_image(4);
  const auto a = generate(m, prompt, img, DecodePolicy::greedy(), 12);
  const auto b = generate(m, prompt, img, DecodePolicy::greedy(), 12);
  CHECK(a.tokens == b.tokens);
  CHECK(a.tokens.size() <= 12);
  CHECK(generate(m, prompt, img, DecodePolicy::greedy(), 1).tokens.size() == 1);

  const auto s1 = generate(m, prompt, img, DecodePolicy::sample(1.0, 42), 12);
  const auto s2 = generate(m, prompt, img, DecodePolicy::sample(1.0, 42), 12);
  CHECK(s1.tokens == s2.tokens);

  std::vector<TokenId> streamed;
  const auto c = generate(m, prompt, img, DecodePolicy::greedy(), 12, [&](TokenId t) { streamed.push_back(t); });
  CHECK(streamed == c.tokens);

  CHECK(code_of([&] { generate(m, prompt, img, DecodePolicy::greedy(), 0); }) == ErrorCode::kInvalidArgument);
  RenderedSequence longp = render_prompt({{{Role::kUser, std::string(150, 'x')}}}, true);
  CHECK(code_of([&] { generate(m, longp, img, DecodePolicy::greedy(), 4); }) == ErrorCode::kSequenceTooLong);
}

TEST_CASE("greedy ties resolve to the lowest token id") {
  ModelBundle m = init_model(small_config(), 10);
  auto w = m.params.at("lm.head.weight").mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  auto bias = m.params.at("lm.head.bias").mutable_data();
  std::fill(bias.begin(), bias.end(), 0.0);
  bias[70] = 1.0;
  bias[90] = 1.0;
  const RenderedSequence prompt = render_prompt({{{Role::kUser, "q"}}}, false);
  CHECK(generate(m, prompt, std::nullopt, DecodePolicy::greedy(), 1).tokens ==
        std::vector<TokenId>{70});
}

TEST_CASE("connector receives gradient from image-bearing sequences") {
  ModelBundle m = init_model(small_config(), 11);
  for (auto& [name, t] : m.params) t.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  const Tensor visual = project_features(m, encode_image(m, random_image(5)));
  const Tensor loss = next_token_loss(m, merge_sequence(m, qa_sequence("q", "yes", true), visual));
  tape.backward(loss);
  for (const auto& [name, t] : m.params) {
    if (family_of(name) != Family::kConnector || name.find("weight") == std::string::npos) continue;
    double norm = 0.0;
    for (double g : t.grad()) norm += g * g;
    CHECK_MESSAGE(norm > 0.0, name);
  }
}

TEST_CASE("overfit one sample, then greedy decode reproduces its answer") {
  ModelBundle m = init_model(small_config(), 12);
  std::vector<Tensor> params;
  for (auto& [name, t] : m.params) {
    t.set_requires_grad(true);
    params.push_back(t);
  }
  const ImageTensor img = random_image(6);
  const std::string answer = "a mass on the left";
  const RenderedSequence seq = qa_sequence("describe", answer, true);
  AdamState state;
  AdamConfig cfg;
  cfg.lr = 3e-3;
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 120; ++step) {
    Tape tape;
    TapeScope scope(tape);
    for (Tensor& p : params) p.clear_grad();
    const Tensor visual = project_features(m, encode_image(m, img));
    const Tensor loss = next_token_loss(m, merge_sequence(m, seq, visual));
    tape.backward(loss);
    std::vector<std::span<const double>> grads;
    for (Tensor& p : params) grads.push_back(p.grad_buffer());
    adam_step(params, grads, state, cfg);
    if (step == 0) first = loss.item();
    last = loss.item();
  }
  CHECK(last < 0.05 * first);
  const RenderedSequence prompt = render_prompt({{{Role::kUser, "describe"}}}, true);
  const auto out = generate(m, prompt, img, DecodePolicy::greedy(), 40);
  CHECK(out.text == answer);
  CHECK(out.stopped_on_eos);
}
