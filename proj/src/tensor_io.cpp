#include "ccvim/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace ccvim {

namespace {

void put_u32_le(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void put_f64_le(std::ostream& os, double v) {
  uint64_t u;
  std::memcpy(&u, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64_le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

}  // namespace

void write_ccvt(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot open for writing: " + path);
  os.write("CCVT", 4);
  put_u32_le(os, static_cast<uint32_t>(t.rank()));
  for (int64_t d : t.shape()) put_u32_le(os, static_cast<uint32_t>(d));
  for (double v : t.data()) put_f64_le(os, v);
  if (!os) throw ConfigError("write failed: " + path);
}

Tensor read_ccvt(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open for reading: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "CCVT", 4) != 0) {
    throw ConfigError("not a CCVT tensor file: " + path);
  }
  uint32_t rank = get_u32_le(is);
  if (rank > 8) throw ConfigError("CCVT rank too large in " + path);
  Shape shape;
  for (uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<int64_t>(get_u32_le(is)));
  int64_t n = shape_numel(shape);
  std::vector<double> data(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) data[static_cast<size_t>(i)] = get_f64_le(is);
  if (!is) throw ConfigError("truncated CCVT tensor file: " + path);
  return Tensor::from_data(std::move(shape), std::move(data));
}

}  // namespace ccvim
