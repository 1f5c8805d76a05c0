#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ccvim/errors.hpp"
#include "ccvim/network.hpp"
#include "ccvim/postproc.hpp"

namespace ccvim {

struct TrainConfig {
  double lr = 1e-3;
  int64_t batch_size = 8;
  int64_t epochs = 30;
  double weight_decay = 0.01;
  uint64_t seed = 42;
  int64_t t_max = 0;            // 0: use epochs
  std::string mode = "lesion";  // lesion | nuclei

  void validate() const;
};

// Plain-text config: `key = value` lines, `#` comments, bracketed section
// headers. Unknown keys and sections are errors.
struct ConfigFile {
  struct Entry {
    std::string section;
    std::string key;
    std::string value;
    int line = 0;
  };
  std::string path;
  std::vector<Entry> entries;

  const Entry* find(const std::string& section, const std::string& key) const;
  std::vector<const Entry*> section(const std::string& name) const;
};

ConfigFile parse_config_file(const std::string& path);

// Apply the [branches] section onto an already-sized plan. Supports the
// whole-network "plan" shorthand and per-layer encK/stageK/decK lines.
void apply_branch_section(const ConfigFile& file, NetworkConfig& cfg);

double parse_double(const ConfigFile::Entry& e);
int64_t parse_int(const ConfigFile::Entry& e);
bool parse_bool(const ConfigFile::Entry& e);

struct FullConfig {
  NetworkConfig network;
  TrainConfig train;
  WatershedParams watershed;
};

FullConfig load_full_config(const std::string& path);

// Normalized round-trip used to embed the config inside checkpoints.
void save_full_config(const std::string& path, const FullConfig& cfg);

}  // namespace ccvim
