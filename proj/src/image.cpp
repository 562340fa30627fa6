#include "tlvm/image.h"

#include <cctype>
#include <fstream>
#include <iterator>
#include <string>

#include "tlvm/error.h"

namespace tlvm {

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void skip_whitespace_and_comments() {
    while (pos_ < bytes_.size()) {
      if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t read_number(const char* what) {
    skip_whitespace_and_comments();
    if (pos_ >= bytes_.size()) {
      throw Error(ErrorCode::kTruncatedPayload, std::string("PPM header ends before ") + what);
    }
    if (!std::isdigit(bytes_[pos_])) {
      throw Error(ErrorCode::kMalformedHeader, std::string("PPM header: expected ") + what);
    }
    std::size_t value = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + static_cast<std::size_t>(bytes_[pos_] - '0');
      if (value > (1u << 24)) {
        throw Error(ErrorCode::kMalformedHeader, std::string("PPM header: ") + what + " too large");
      }
      ++pos_;
    }
    return value;
  }

  std::size_t pos() const { return pos_; }
  void advance(std::size_t n) { pos_ += n; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

RawImage decode_ppm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    throw Error(ErrorCode::kUnsupportedFormat, "not a binary PPM (expected magic \"P6\")");
  }
  HeaderReader reader(bytes);
  reader.advance(2);
  if (reader.pos() < bytes.size() && !std::isspace(bytes[reader.pos()])) {
    throw Error(ErrorCode::kUnsupportedFormat, "not a binary PPM (expected magic \"P6\")");
  }
  RawImage image;
  image.width = reader.read_number("width");
  image.height = reader.read_number("height");
  const std::size_t maxval = reader.read_number("maxval");
  if (maxval != 255) {
    throw Error(ErrorCode::kBadMaxval,
                "PPM maxval must be 255, got " + std::to_string(maxval));
  }
  if (reader.pos() >= bytes.size() || !std::isspace(bytes[reader.pos()])) {
    throw Error(ErrorCode::kTruncatedPayload, "PPM header is not followed by pixel data");
  }
  reader.advance(1);
  if (image.width == 0 || image.height == 0) {
    throw Error(ErrorCode::kEmptyImage, "PPM has zero extent");
  }
  const std::size_t expected = image.width * image.height * 3;
  const std::size_t available = bytes.size() - reader.pos();
  if (available < expected) {
    throw Error(ErrorCode::kTruncatedPayload, "PPM payload has " + std::to_string(available) +
                                                  " bytes, expected " +
                                                  std::to_string(expected));
  }
  image.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(reader.pos()),
                      bytes.begin() + static_cast<std::ptrdiff_t>(reader.pos() + expected));
  return image;
}

std::vector<std::uint8_t> encode_ppm(const RawImage& image) {
  const std::string header = "P6\n" + std::to_string(image.width) + " " +
                             std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.pixels.begin(), image.pixels.end());
  return out;
}

RawImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kImageDecode, "cannot open image " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_ppm(bytes);
}

void write_ppm(const std::filesystem::path& path, const RawImage& image) {
  const auto bytes = encode_ppm(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "cannot write image " + path.string());
}

ImageTensor normalize(const RawImage& image) {
  if (image.width == 0 || image.height == 0) {
    throw Error(ErrorCode::kEmptyImage, "cannot normalize an image with zero extent");
  }
  constexpr std::size_t side = ImageTensor::kSide;
  ImageTensor out;
  out.values.resize(side * side * 3);
  for (std::size_t y = 0; y < side; ++y) {
    const std::size_t sy = y * image.height / side;
    for (std::size_t x = 0; x < side; ++x) {
      const std::size_t sx = x * image.width / side;
      for (std::size_t c = 0; c < 3; ++c) {
        out.values[(y * side + x) * 3 + c] = image.at(sy, sx, c) / 127.5 - 1.0;
      }
    }
  }
  return out;
}

}  // namespace tlvm
