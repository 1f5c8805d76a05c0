#include "ccvim/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace ccvim {

namespace {

// Reads one whitespace/comment-delimited header token.
std::string next_token(std::istream& is) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {}
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) throw ConfigError("truncated netpbm header");
  return tok;
}

void expect_magic(std::istream& is, const char* magic, const std::string& path) {
  std::string m = next_token(is);
  if (m != magic) throw ConfigError(path + ": expected " + magic + " file, got '" + m + "'");
}

}  // namespace

void write_ppm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.shape()[0] != 3) {
    throw DimensionError("write_ppm: image must be [3,H,W]");
  }
  int64_t h = image.shape()[1], w = image.shape()[2];
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + path);
  os << "P6\n" << w << " " << h << "\n255\n";
  const auto& d = image.data();
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t c = 0; c < 3; ++c) {
        double v = std::clamp(d[c * h * w + y * w + x], 0.0, 1.0);
        os.put(static_cast<char>(std::lround(v * 255.0)));
      }
    }
  }
}

Tensor read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + path);
  expect_magic(is, "P6", path);
  int64_t w = std::stoll(next_token(is));
  int64_t h = std::stoll(next_token(is));
  int64_t maxval = std::stoll(next_token(is));
  if (maxval != 255) throw ConfigError(path + ": only maxval 255 PPM supported");
  Tensor image = Tensor::zeros({3, h, w});
  auto& d = image.data();
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t c = 0; c < 3; ++c) {
        int v = is.get();
        if (v == EOF) throw ConfigError(path + ": truncated pixel data");
        d[c * h * w + y * w + x] = static_cast<double>(v) / 255.0;
      }
    }
  }
  return image;
}

void write_pgm8(const std::string& path, const IntMap& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + path);
  os << "P5\n" << m.w << " " << m.h << "\n255\n";
  for (int32_t v : m.v) os.put(v != 0 ? static_cast<char>(255) : 0);
}

IntMap read_pgm8(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + path);
  expect_magic(is, "P5", path);
  int64_t w = std::stoll(next_token(is));
  int64_t h = std::stoll(next_token(is));
  int64_t maxval = std::stoll(next_token(is));
  if (maxval != 255) throw ConfigError(path + ": expected 8-bit PGM");
  IntMap m(h, w);
  for (auto& v : m.v) {
    int b = is.get();
    if (b == EOF) throw ConfigError(path + ": truncated pixel data");
    v = b > 127 ? 1 : 0;
  }
  return m;
}

void write_pgm16(const std::string& path, const IntMap& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + path);
  os << "P5\n" << m.w << " " << m.h << "\n65535\n";
  for (int32_t v : m.v) {
    if (v < 0 || v > 65535) throw ContractError("write_pgm16: value out of 16-bit range");
    os.put(static_cast<char>((v >> 8) & 0xff));  // most significant byte first
    os.put(static_cast<char>(v & 0xff));
  }
}

IntMap read_pgm16(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + path);
  expect_magic(is, "P5", path);
  int64_t w = std::stoll(next_token(is));
  int64_t h = std::stoll(next_token(is));
  int64_t maxval = std::stoll(next_token(is));
  if (maxval != 65535) throw ConfigError(path + ": expected 16-bit PGM");
  IntMap m(h, w);
  for (auto& v : m.v) {
    int hi = is.get();
    int lo = is.get();
    if (hi == EOF || lo == EOF) throw ConfigError(path + ": truncated pixel data");
    v = static_cast<int32_t>((hi << 8) | lo);
  }
  return m;
}

}  // namespace ccvim
