#include "ccvim/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace ccvim {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
  if (mode != "lesion" && mode != "nuclei") {
    throw ConfigError("train: mode must be 'lesion' or 'nuclei'");
  }
}

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void config_fail(const ConfigFile::Entry& e, const std::string& msg) {
  throw ConfigError(msg + " (line " + std::to_string(e.line) + ")");
}

}  // namespace

const ConfigFile::Entry* ConfigFile::find(const std::string& section, const std::string& key) const {
  const Entry* found = nullptr;
  for (const Entry& e : entries) {
    if (e.section == section && e.key == key) found = &e;  // last one wins
  }
  return found;
}

std::vector<const ConfigFile::Entry*> ConfigFile::section(const std::string& name) const {
  std::vector<const Entry*> out;
  for (const Entry& e : entries) {
    if (e.section == name) out.push_back(&e);
  }
  return out;
}

ConfigFile parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  ConfigFile file;
  file.path = path;
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::string t = trim(line);
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') {
        throw ConfigError("malformed section header (line " + std::to_string(lineno) + ")");
      }
      section = trim(t.substr(1, t.size() - 2));
      if (section != "network" && section != "train" && section != "branches" &&
          section != "watershed") {
        throw ConfigError("unknown section [" + section + "] (line " + std::to_string(lineno) + ")");
      }
      continue;
    }
    size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("expected 'key = value' (line " + std::to_string(lineno) + ")");
    }
    if (section.empty()) {
      throw ConfigError("key outside any section (line " + std::to_string(lineno) + ")");
    }
    ConfigFile::Entry e;
    e.section = section;
    e.key = trim(t.substr(0, eq));
    e.value = trim(t.substr(eq + 1));
    e.line = lineno;
    if (e.key.empty() || e.value.empty()) {
      throw ConfigError("empty key or value (line " + std::to_string(lineno) + ")");
    }
    file.entries.push_back(std::move(e));
  }
  return file;
}

double parse_double(const ConfigFile::Entry& e) {
  try {
    size_t used = 0;
    double v = std::stod(e.value, &used);
    if (used != e.value.size()) throw std::invalid_argument("");
    return v;
  } catch (...) {
    config_fail(e, "expected a number for '" + e.key + "'");
  }
}

int64_t parse_int(const ConfigFile::Entry& e) {
  try {
    size_t used = 0;
    long long v = std::stoll(e.value, &used);
    if (used != e.value.size()) throw std::invalid_argument("");
    return static_cast<int64_t>(v);
  } catch (...) {
    config_fail(e, "expected an integer for '" + e.key + "'");
  }
}

bool parse_bool(const ConfigFile::Entry& e) {
  if (e.value == "true" || e.value == "1") return true;
  if (e.value == "false" || e.value == "0") return false;
  config_fail(e, "expected true/false for '" + e.key + "'");
}

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(trim(cur));
  return out;
}

std::array<int, 4> parse_depths(const ConfigFile::Entry& e) {
  auto parts = split(e.value, ',');
  if (parts.size() != 4) config_fail(e, "'" + e.key + "' needs 4 comma-separated counts");
  std::array<int, 4> d;
  for (int i = 0; i < 4; ++i) {
    try {
      d[i] = std::stoi(parts[i]);
    } catch (...) {
      config_fail(e, "bad depth in '" + e.key + "'");
    }
  }
  return d;
}

// encK.layerJ / stageK.layerJ / decK.layerJ -> (is_enc, stage, layer)
bool parse_layer_key(const std::string& key, bool* is_enc, int* stage, int* layer) {
  std::string prefix;
  size_t i = 0;
  while (i < key.size() && std::isalpha(static_cast<unsigned char>(key[i]))) prefix.push_back(key[i++]);
  if (prefix == "enc" || prefix == "stage") *is_enc = true;
  else if (prefix == "dec") *is_enc = false;
  else return false;
  size_t dot = key.find('.', i);
  if (dot == std::string::npos || dot == i) return false;
  if (key.compare(dot, 6, ".layer") != 0) return false;
  try {
    *stage = std::stoi(key.substr(i, dot - i));
    *layer = std::stoi(key.substr(dot + 6));
  } catch (...) {
    return false;
  }
  return true;
}

BranchList parse_branch_list(const ConfigFile::Entry& e, char sep, size_t min_arity,
                             size_t max_arity) {
  auto tokens = split(e.value, sep);
  if (tokens.size() < min_arity || tokens.size() > max_arity) {
    config_fail(e, "'" + e.key + "' holds " + std::to_string(tokens.size()) +
                       " branch tokens, expected " +
                       (min_arity == max_arity
                            ? std::to_string(min_arity)
                            : std::to_string(min_arity) + ".." + std::to_string(max_arity)));
  }
  BranchList list;
  for (const std::string& t : tokens) {
    try {
      list.push_back(parse_branch_token(t));
    } catch (const ConfigError& err) {
      config_fail(e, err.what());
    }
  }
  return list;
}

}  // namespace

void apply_branch_section(const ConfigFile& file, NetworkConfig& cfg) {
  for (const auto* e : file.section("branches")) {
    if (e->key == "plan") {
      BranchList list = parse_branch_list(*e, '-', 1, 4);
      for (auto& stage : cfg.enc_plan) {
        for (auto& layer : stage) layer = list;
      }
      for (auto& stage : cfg.dec_plan) {
        for (auto& layer : stage) layer = list;
      }
      continue;
    }
    bool is_enc = false;
    int stage = 0, layer = 0;
    if (!parse_layer_key(e->key, &is_enc, &stage, &layer)) {
      config_fail(*e, "unknown key '" + e->key + "' in [branches]");
    }
    auto& plan = is_enc ? cfg.enc_plan : cfg.dec_plan;
    if (stage < 1 || stage > 4) config_fail(*e, "stage index out of range in '" + e->key + "'");
    if (layer < 1 || layer > static_cast<int>(plan[stage - 1].size())) {
      config_fail(*e, "layer index out of range in '" + e->key + "'");
    }
    plan[stage - 1][layer - 1] = parse_branch_list(*e, ',', 4, 4);
  }
}

FullConfig load_full_config(const std::string& path) {
  ConfigFile file = parse_config_file(path);
  FullConfig cfg;
  for (const auto* e : file.section("network")) {
    if (e->key == "base_channels") cfg.network.base_channels = parse_int(*e);
    else if (e->key == "state_size") cfg.network.state_size = parse_int(*e);
    else if (e->key == "num_classes") cfg.network.num_classes = parse_int(*e);
    else if (e->key == "instance_head") cfg.network.instance_head = parse_bool(*e);
    else if (e->key == "cc_window") cfg.network.cc_window = parse_int(*e);
    else if (e->key == "cc_knn") cfg.network.cc_knn = parse_int(*e);
    else if (e->key == "enc_depths") cfg.network.enc_depths = parse_depths(*e);
    else if (e->key == "dec_depths") cfg.network.dec_depths = parse_depths(*e);
    else config_fail(*e, "unknown key '" + e->key + "' in [network]");
  }
  for (const auto* e : file.section("train")) {
    if (e->key == "lr") cfg.train.lr = parse_double(*e);
    else if (e->key == "batch_size") cfg.train.batch_size = parse_int(*e);
    else if (e->key == "epochs") cfg.train.epochs = parse_int(*e);
    else if (e->key == "weight_decay") cfg.train.weight_decay = parse_double(*e);
    else if (e->key == "seed") cfg.train.seed = static_cast<uint64_t>(parse_int(*e));
    else if (e->key == "t_max") cfg.train.t_max = parse_int(*e);
    else if (e->key == "mode") cfg.train.mode = e->value;
    else config_fail(*e, "unknown key '" + e->key + "' in [train]");
  }
  for (const auto* e : file.section("watershed")) {
    if (e->key == "r") cfg.watershed.r = parse_double(*e);
    else if (e->key == "k_grad") cfg.watershed.k_grad = parse_double(*e);
    else if (e->key == "h_prob") cfg.watershed.h_prob = parse_double(*e);
    else config_fail(*e, "unknown key '" + e->key + "' in [watershed]");
  }
  fill_default_plan(cfg.network);
  apply_branch_section(file, cfg.network);
  cfg.network.validate();
  cfg.train.validate();
  cfg.watershed.validate();
  return cfg;
}

void save_full_config(const std::string& path, const FullConfig& cfg) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write config: " + path);
  char buf[64];
  auto num = [&buf](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  os << "[network]\n";
  os << "base_channels = " << cfg.network.base_channels << "\n";
  os << "state_size = " << cfg.network.state_size << "\n";
  os << "num_classes = " << cfg.network.num_classes << "\n";
  os << "instance_head = " << (cfg.network.instance_head ? "true" : "false") << "\n";
  os << "cc_window = " << cfg.network.cc_window << "\n";
  os << "cc_knn = " << cfg.network.cc_knn << "\n";
  os << "enc_depths = " << cfg.network.enc_depths[0] << "," << cfg.network.enc_depths[1] << ","
     << cfg.network.enc_depths[2] << "," << cfg.network.enc_depths[3] << "\n";
  os << "dec_depths = " << cfg.network.dec_depths[0] << "," << cfg.network.dec_depths[1] << ","
     << cfg.network.dec_depths[2] << "," << cfg.network.dec_depths[3] << "\n";
  os << "\n[train]\n";
  os << "lr = " << num(cfg.train.lr) << "\n";
  os << "batch_size = " << cfg.train.batch_size << "\n";
  os << "epochs = " << cfg.train.epochs << "\n";
  os << "weight_decay = " << num(cfg.train.weight_decay) << "\n";
  os << "seed = " << cfg.train.seed << "\n";
  os << "t_max = " << cfg.train.t_max << "\n";
  os << "mode = " << cfg.train.mode << "\n";
  os << "\n[watershed]\n";
  os << "r = " << num(cfg.watershed.r) << "\n";
  os << "k_grad = " << num(cfg.watershed.k_grad) << "\n";
  os << "h_prob = " << num(cfg.watershed.h_prob) << "\n";
  os << "\n[branches]\n";
  // Per-layer lines must carry exactly four tokens; narrower layers can only
  // come from a whole-network "plan" line, so emit that first.
  const BranchList* narrow = nullptr;
  for (const auto& plan : {&cfg.network.enc_plan, &cfg.network.dec_plan}) {
    for (const auto& stage : *plan) {
      for (const auto& layer : stage) {
        if (layer.size() < 4) narrow = &layer;
      }
    }
  }
  if (narrow) {
    os << "plan = ";
    for (size_t b = 0; b < narrow->size(); ++b) {
      if (b) os << "-";
      os << branch_token((*narrow)[b]);
    }
    os << "\n";
  }
  auto write_plan = [&os](const char* prefix, const std::vector<StagePlan>& plan) {
    for (size_t s = 0; s < plan.size(); ++s) {
      for (size_t l = 0; l < plan[s].size(); ++l) {
        if (plan[s][l].size() != 4) continue;
        os << prefix << (s + 1) << ".layer" << (l + 1) << " = ";
        for (size_t b = 0; b < plan[s][l].size(); ++b) {
          if (b) os << ",";
          os << branch_token(plan[s][l][b]);
        }
        os << "\n";
      }
    }
  };
  write_plan("enc", cfg.network.enc_plan);
  write_plan("dec", cfg.network.dec_plan);
}

}  // namespace ccvim
