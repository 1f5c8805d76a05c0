#pragma once

#include <string>

#include "ccvim/maps.hpp"
#include "ccvim/tensor.hpp"

namespace ccvim {

// 8-bit binary PPM (P6). Values clamped to [0,1] and rounded to 0..255.
void write_ppm(const std::string& path, const Tensor& image);
Tensor read_ppm(const std::string& path);

// 8-bit binary PGM (P5); nonzero map values are written as 255.
void write_pgm8(const std::string& path, const IntMap& m);
IntMap read_pgm8(const std::string& path);

// 16-bit binary PGM (P5, maxval 65535, big-endian samples per the format).
void write_pgm16(const std::string& path, const IntMap& m);
IntMap read_pgm16(const std::string& path);

}  // namespace ccvim
