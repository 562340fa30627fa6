#include "tlvm/checkpoint.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "json.hpp"
#include "tlvm/error.h"

namespace tlvm {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'T', 'L', 'V', 'M'};

class ByteWriter {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  template <typename T>
  void little(T value) {
    using U = std::make_unsigned_t<T>;
    const U u = static_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
  void f64(double value) { little(std::bit_cast<std::uint64_t>(value)); }
  void string(const std::string& s) {
    little(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}

  bool has(std::size_t n) const { return in_.size() - pos_ >= n; }

  template <typename T>
  T little(const std::string& context) {
    need(sizeof(T), context);
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      u |= static_cast<std::make_unsigned_t<T>>(in_[pos_ + i]) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }

  std::string string(const std::string& context) {
    const auto n = little<std::uint32_t>(context);
    need(n, context);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void f64s(std::span<double> out, const std::string& context) {
    need(out.size() * 8, context);
    for (double& v : out) v = std::bit_cast<double>(little<std::uint64_t>(context));
  }

  bool at_end() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n, const std::string& context) const {
    if (!has(n)) throw Error(ErrorCode::kTruncatedTable, "checkpoint truncated in " + context);
  }

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

json config_json(const ModelConfig& c) {
  return json{{"d_model", c.d_model},
              {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},
              {"d_ff", c.d_ff},
              {"vocab_size", c.vocab_size},
              {"max_seq_len", c.max_seq_len},
              {"image_size", c.image_size},
              {"patch_size", c.patch_size},
              {"d_vision", c.d_vision},
              {"n_vision_layers", c.n_vision_layers},
              {"n_vision_heads", c.n_vision_heads},
              {"d_vision_ff", c.d_vision_ff},
              {"connector_hidden", c.connector_hidden},
              {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.image_size = j.at("image_size").get<std::size_t>();
  c.patch_size = j.at("patch_size").get<std::size_t>();
  c.d_vision = j.at("d_vision").get<std::size_t>();
  c.n_vision_layers = j.at("n_vision_layers").get<std::size_t>();
  c.n_vision_heads = j.at("n_vision_heads").get<std::size_t>();
  c.d_vision_ff = j.at("d_vision_ff").get<std::size_t>();
  c.connector_hidden = j.at("connector_hidden").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

std::string config_document(const ModelBundle& bundle) {
  json lineage = json::array();
  for (const LineageEntry& e : bundle.lineage) {
    lineage.push_back({{"stage", e.stage}, {"data", e.data}, {"steps", e.steps}, {"seed", e.seed}});
  }
  return json{{"model", config_json(bundle.config)}, {"lineage", lineage}}.dump();
}

std::vector<std::uint8_t> serialize_checkpoint(const ModelBundle& bundle) {
  ByteWriter w;
  w.bytes(kMagic, sizeof(kMagic));
  w.little(kCheckpointVersion);
  w.string(config_document(bundle));
  w.little(static_cast<std::uint32_t>(bundle.params.size()));
  for (const auto& [name, tensor] : bundle.params) {
    w.string(name);
    w.little(kDtypeFloat64);
    w.little(static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t extent : tensor.shape()) w.little(static_cast<std::uint64_t>(extent));
    for (double v : tensor.data()) w.f64(v);
  }
  return w.take();
}

ModelBundle deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw Error(ErrorCode::kBadMagic, "not a TLVM checkpoint (bad magic)");
  }
  ByteReader r(bytes.subspan(4));
  const auto version = r.little<std::uint32_t>("version field");
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::kVersionMismatch, "checkpoint version " + std::to_string(version) +
                                                 " is not supported (expected " +
                                                 std::to_string(kCheckpointVersion) + ")");
  }
  const std::string doc = r.string("config document");
  ModelBundle bundle;
  try {
    const json j = json::parse(doc);
    bundle.config = config_from_json(j.at("model"));
    for (const json& e : j.at("lineage")) {
      bundle.lineage.push_back({e.at("stage").get<std::string>(), e.at("data").get<std::string>(),
                                e.at("steps").get<std::uint64_t>(),
                                e.at("seed").get<std::uint64_t>()});
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, std::string("checkpoint config document: ") + e.what());
  }
  bundle.config.validate();

  std::map<std::string, Shape> expected;
  for (auto& [name, shape] : parameter_shapes(bundle.config)) expected.emplace(name, shape);

  const auto count = r.little<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string record = "tensor record #" + std::to_string(i);
    const std::string name = r.string(record + " name");
    const std::string where = "tensor \"" + name + "\"";
    const auto dtype = r.little<std::uint8_t>(where + " dtype");
    if (dtype != kDtypeFloat64) {
      throw Error(ErrorCode::kSchemaMismatch, where + " has unsupported dtype code " +
                                                  std::to_string(dtype));
    }
    const auto rank = r.little<std::uint32_t>(where + " rank");
    Shape shape(rank);
    for (auto& extent : shape) extent = static_cast<std::size_t>(r.little<std::uint64_t>(where + " extents"));
    const auto want = expected.find(name);
    if (want == expected.end() || want->second != shape) {
      throw Error(ErrorCode::kSchemaMismatch,
                  where + " with shape " + shape_string(shape) + " does not match the config");
    }
    std::vector<double> values(shape_numel(shape));
    r.f64s(values, where + " payload");
    bundle.params.emplace(name, Tensor(shape, std::move(values)));
  }
  if (bundle.params.size() != expected.size()) {
    throw Error(ErrorCode::kTruncatedTable, "checkpoint holds " + std::to_string(bundle.params.size()) +
                                                " of " + std::to_string(expected.size()) +
                                                " tensors");
  }
  if (!r.at_end()) throw Error(ErrorCode::kSchemaMismatch, "trailing bytes after tensor table");
  return bundle;
}

void save_checkpoint(const ModelBundle& bundle, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(bundle);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::kIo, "cannot write checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot move checkpoint into place: " + ec.message());
}

ModelBundle load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace tlvm
