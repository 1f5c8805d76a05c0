#pragma once

#include <string>
#include <vector>

#include "ccvim/maps.hpp"
#include "ccvim/postproc.hpp"
#include "ccvim/tensor.hpp"

namespace ccvim {

enum class SynthMode { Nuclei, Lesion };

SynthMode parse_synth_mode(const std::string& s);

// Desk-scale stand-in for the licensed datasets: textured scenes with known
// instance maps and regression targets.
struct SynthScene {
  Tensor image;  // [3,S,S] in [0,1]
  IntMap semantic;
  IntMap instances;
  DistanceMaps hv;
};

// Deterministic in (n, size, seed, mode). Nuclei scenes hold 5..15 ellipses
// (radii 3..8 px, touching allowed); lesion scenes hold one irregular blob.
std::vector<SynthScene> synth_dataset(int64_t n, int64_t size, uint64_t seed, SynthMode mode);

// One of identity / h-flip / v-flip / rot90 / rot180 / rot270 chosen by the
// seed, applied consistently to image, masks and HV maps.
SynthScene augment(const SynthScene& scene, uint64_t seed);

// On-disk layout: scene_%04d.ppm / _sem.pgm / _inst.pgm (16-bit).
void save_scene(const std::string& dir, int64_t index, const SynthScene& scene);
SynthScene load_scene(const std::string& dir, int64_t index);
int64_t count_scenes(const std::string& dir);

}  // namespace ccvim
