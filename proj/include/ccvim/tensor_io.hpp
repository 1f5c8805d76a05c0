#pragma once

#include <string>

#include "ccvim/tensor.hpp"

namespace ccvim {

// Binary tensor file: magic "CCVT", u32 LE rank, rank x u32 LE dims,
// row-major f64 LE payload. Round-trips bit-exactly.
void write_ccvt(const std::string& path, const Tensor& t);
Tensor read_ccvt(const std::string& path);

}  // namespace ccvim
