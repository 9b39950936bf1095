#include "acme/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "acme/errors.hpp"

namespace acme {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// strips a # comment, respecting quoted strings
std::string strip_comment(const std::string& line) {
  bool in_str = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') in_str = !in_str;
    if (line[i] == '#' && !in_str) return line.substr(0, i);
  }
  return line;
}

struct Cursor {
  std::string file;
  int line = 0;

  std::string ctx() const { return file + ":" + std::to_string(line) + ": "; }
  [[noreturn]] void fail(const std::string& what) const { throw ConfigError(ctx() + what); }
};

std::string parse_string(const Cursor& at, const std::string& key, const std::string& v) {
  if (v.size() < 2 || v.front() != '"' || v.back() != '"')
    at.fail("key '" + key + "' expects a quoted string");
  return v.substr(1, v.size() - 2);
}

long long parse_int(const Cursor& at, const std::string& key, const std::string& v) {
  char* end = nullptr;
  const long long out = std::strtoll(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0') at.fail("key '" + key + "' expects an integer");
  return out;
}

std::uint64_t parse_u64(const Cursor& at, const std::string& key, const std::string& v) {
  if (v.empty() || v[0] == '-') at.fail("key '" + key + "' expects a non-negative integer");
  char* end = nullptr;
  const unsigned long long out = std::strtoull(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0') at.fail("key '" + key + "' expects a non-negative integer");
  return out;
}

double parse_float(const Cursor& at, const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0') at.fail("key '" + key + "' expects a number");
  return out;
}

std::vector<std::string> split_array(const Cursor& at, const std::string& key,
                                     const std::string& v) {
  if (v.size() < 2 || v.front() != '[' || v.back() != ']')
    at.fail("key '" + key + "' expects an array");
  std::vector<std::string> items;
  int depth = 0;
  std::string cur;
  for (std::size_t i = 1; i + 1 < v.size(); ++i) {
    const char c = v[i];
    if (c == '[') ++depth;
    if (c == ']') --depth;
    if (c == ',' && depth == 0) {
      items.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!trim(cur).empty()) items.push_back(trim(cur));
  return items;
}

std::vector<double> parse_float_array(const Cursor& at, const std::string& key,
                                      const std::string& v) {
  std::vector<double> out;
  for (const std::string& item : split_array(at, key, v)) out.push_back(parse_float(at, key, item));
  return out;
}

std::vector<int> parse_int_array(const Cursor& at, const std::string& key, const std::string& v) {
  std::vector<int> out;
  for (const std::string& item : split_array(at, key, v))
    out.push_back(static_cast<int>(parse_int(at, key, item)));
  return out;
}

std::vector<std::pair<int, int>> parse_pair_array(const Cursor& at, const std::string& key,
                                                  const std::string& v) {
  std::vector<std::pair<int, int>> out;
  for (const std::string& item : split_array(at, key, v)) {
    const std::vector<int> pair = parse_int_array(at, key, item);
    if (pair.size() != 2) at.fail("key '" + key + "' expects [round, device] pairs");
    out.push_back({pair[0], pair[1]});
  }
  return out;
}

// shortest decimal that reads back to the same double, always float-typed
std::string fmt_double(double v) {
  char buf[48];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  if (!std::strpbrk(buf, ".eni")) std::strcat(buf, ".0");
  return buf;
}

}  // namespace

PipelineConfig parse_config(const std::string& text, const std::string& name) {
  PipelineConfig cfg;
  cfg.profiles.clear();
  cfg.widths.clear();
  cfg.depths.clear();

  Cursor at;
  at.file = name;
  std::string section;
  std::set<std::string> seen;
  std::vector<int> device_lines;

  std::istringstream in(text);
  std::string raw;
  while (std::getline(in, raw)) {
    ++at.line;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;

    if (line == "[[device]]") {
      cfg.profiles.emplace_back();
      cfg.profiles.back().device_id.clear();
      device_lines.push_back(at.line);
      section = "device";
      continue;
    }
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) at.fail("malformed section header");
      section = line.substr(1, line.size() - 2);
      static const char* known[] = {"reference", "train",       "family", "distill", "selection",
                                    "nas",       "nas.header",  "personalize", "data", "traffic"};
      bool ok = false;
      for (const char* k : known) ok = ok || section == k;
      if (!ok) at.fail("unknown section '[" + section + "]'");
      continue;
    }

    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) at.fail("expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty() || val.empty()) at.fail("expected 'key = value'");
    const std::string dotted = section.empty() ? key : section + "." + key;
    const std::string scope =
        section == "device" ? dotted + "#" + std::to_string(cfg.profiles.size()) : dotted;
    if (!seen.insert(scope).second) at.fail("duplicate key '" + dotted + "'");

    if (section.empty()) {
      if (key == "seed") cfg.seed = parse_u64(at, dotted, val);
      else if (key == "threads") cfg.threads = (int)parse_int(at, dotted, val);
      else if (key == "out_dir") cfg.out_dir = parse_string(at, dotted, val);
      else at.fail("unknown key '" + dotted + "'");
    } else if (section == "reference") {
      if (key == "depth") cfg.reference.depth = (int)parse_int(at, dotted, val);
      else if (key == "num_heads") cfg.reference.num_heads = (int)parse_int(at, dotted, val);
      else if (key == "hidden_dim") cfg.reference.hidden_dim = (int)parse_int(at, dotted, val);
      else if (key == "ffn_dim") cfg.reference.ffn_dim = (int)parse_int(at, dotted, val);
      else if (key == "head_dim") cfg.reference.head_dim = (int)parse_int(at, dotted, val);
      else if (key == "num_patches") cfg.reference.num_patches = (int)parse_int(at, dotted, val);
      else if (key == "patch_dim") cfg.reference.patch_dim = (int)parse_int(at, dotted, val);
      else if (key == "num_classes") cfg.reference.num_classes = (int)parse_int(at, dotted, val);
      else at.fail("unknown key '" + dotted + "'");
    } else if (section == "train") {
      if (key == "reference_steps") cfg.reference_train_steps = (int)parse_int(at, dotted, val);
      else if (key == "reference_lr") cfg.reference_lr = parse_float(at, dotted, val);
      else if (key == "batch_size") cfg.train_batch_size = (int)parse_int(at, dotted, val);
      else at.fail("unknown key '" + dotted + "'");
    } else if (section == "family") {
      if (key == "widths") cfg.widths = parse_float_array(at, dotted, val);
      else if (key == "depths") cfg.depths = parse_int_array(at, dotted, val);
      else at.fail("unknown key '" + dotted + "'");
    } else if (section == "distill") {
      if (key == "lambda1") cfg.distill.lambda1 = parse_float(at, dotted, val);
      else if (key == "lambda2") cfg.distill.lambda2 = parse_float(at, dotted, val);
      else if (key == "steps") cfg.distill.steps = (int)parse_int(at, dotted, val);
      else if (key == "lr") cfg.distill.lr = parse_float(at, dotted, val);
      else if (key == "batch_size") cfg.distill.batch_size = (int)parse_int(at, dotted, val);
      else at.fail("unknown key '" + dotted + "'");
    } else if (section == "selection") {
      if (key == "clusters") cfg.clusters = (int)parse_int(at, dotted, val);
      else if (key == "gamma_p") cfg.gamma_p = parse_float(at, dotted, val);
      else if (key == "sigma") cfg.sigma = parse_float(at, dotted, val);
      else at.fail("unknown key '" + dotted + "'");
    } else if (section == "nas") {
      if (key == "blocks") cfg.nas.blocks = (int)parse_int(at, dotted, val);
      else if (key == "alternations") cfg.nas.alternations = (int)parse_int(at, dotted, val);
      else if (key == "shared_steps") cfg.nas.shared_steps = (int)parse_int(at, dotted, val);
      else if (key == "shared_samples") cfg.nas.shared_samples = (int)parse_int(at, dotted, val);
      else if (key == "controller_samples") cfg.nas.controller_samples = (int)parse_int(at, dotted, val);
      else if (key == "shared_lr") cfg.nas.shared_lr = parse_float(at, dotted, val);
      else if (key == "controller_lr") cfg.nas.controller_lr = parse_float(at, dotted, val);
      else if (key == "batch_size") cfg.nas.batch_size = (int)parse_int(at, dotted, val);
      else if (key == "holdout_fraction") cfg.nas.holdout_fraction = parse_float(at, dotted, val);
      else at.fail("unknown key '" + dotted + "'");
    } else if (section == "nas.header") {
      if (key == "channels") cfg.nas.header.channels = (int)parse_int(at, dotted, val);
      else if (key == "mlp_hidden") cfg.nas.header.mlp_hidden = (int)parse_int(at, dotted, val);
      else if (key == "repeats") cfg.nas.header.repeats = (int)parse_int(at, dotted, val);
      else if (key == "lstm_hidden") cfg.nas.header.lstm_hidden = (int)parse_int(at, dotted, val);
      else if (key == "embed_dim") cfg.nas.header.embed_dim = (int)parse_int(at, dotted, val);
      else if (key == "baseline_momentum")
        cfg.nas.header.baseline_momentum = parse_float(at, dotted, val);
      else at.fail("unknown key '" + dotted + "'");
    } else if (section == "personalize") {
      if (key == "rounds") cfg.personalize.rounds = (int)parse_int(at, dotted, val);
      else if (key == "discard_per_round")
        cfg.personalize.discard_per_round = (int)parse_int(at, dotted, val);
      else if (key == "local_steps") cfg.personalize.local_steps = (int)parse_int(at, dotted, val);
      else if (key == "lr") cfg.personalize.lr = parse_float(at, dotted, val);
      else if (key == "batch_size") cfg.personalize.batch_size = (int)parse_int(at, dotted, val);
      else if (key == "accumulation_steps")
        cfg.personalize.accumulation_steps = (int)parse_int(at, dotted, val);
      else if (key == "sketch_size") cfg.personalize.sketch_size = (int)parse_int(at, dotted, val);
      else if (key == "p_order") cfg.personalize.p_order = (int)parse_int(at, dotted, val);
      else if (key == "absences") cfg.personalize.absences = parse_pair_array(at, dotted, val);
      else at.fail("unknown key '" + dotted + "'");
    } else if (section == "data") {
      if (key == "num_classes") cfg.data.num_classes = (int)parse_int(at, dotted, val);
      else if (key == "patches") cfg.data.patches = (int)parse_int(at, dotted, val);
      else if (key == "patch_dim") cfg.data.patch_dim = (int)parse_int(at, dotted, val);
      else if (key == "class_sep") cfg.data.class_sep = parse_float(at, dotted, val);
      else if (key == "noise") cfg.data.noise = parse_float(at, dotted, val);
      else if (key == "cloud_samples") cfg.cloud_samples = (int)parse_int(at, dotted, val);
      else if (key == "probe_samples") cfg.probe_samples = (int)parse_int(at, dotted, val);
      else if (key == "edge_samples") cfg.edge_samples = (int)parse_int(at, dotted, val);
      else if (key == "device_samples") cfg.device_samples = (int)parse_int(at, dotted, val);
      else if (key == "classes_per_device")
        cfg.classes_per_device = (int)parse_int(at, dotted, val);
      else at.fail("unknown key '" + dotted + "'");
    } else if (section == "traffic") {
      if (key == "centralized_search_space")
        cfg.centralized_search_space = parse_float(at, dotted, val);
      else at.fail("unknown key '" + dotted + "'");
    } else if (section == "device") {
      DeviceProfile& p = cfg.profiles.back();
      if (key == "id") p.device_id = parse_string(at, dotted, val);
      else if (key == "vcpus") p.vcpus = (int)parse_int(at, dotted, val);
      else if (key == "storage_params") p.storage_params = parse_int(at, dotted, val);
      else if (key == "base_power") p.base_power = parse_float(at, dotted, val);
      else if (key == "alpha_g") p.alpha_g = parse_float(at, dotted, val);
      else if (key == "alpha_beta") p.alpha_beta = parse_float(at, dotted, val);
      else if (key == "base_latency") p.base_latency = parse_float(at, dotted, val);
      else if (key == "alpha_l") p.alpha_l = parse_float(at, dotted, val);
      else if (key == "epochs") p.epochs = (int)parse_int(at, dotted, val);
      else at.fail("unknown key '" + dotted + "'");
    }
  }

  for (std::size_t i = 0; i < cfg.profiles.size(); ++i) {
    if (cfg.profiles[i].device_id.empty())
      throw ConfigError(name + ":" + std::to_string(device_lines[i]) +
                        ": device table is missing 'id'");
    // patch counts are a property of the model, not of the device
    cfg.profiles[i].patches = cfg.reference.num_patches;
  }
  // one seed drives everything, including parameter init
  cfg.reference.seed = cfg.seed;
  return cfg;
}

PipelineConfig load_config(const std::string& file) {
  std::ifstream in(file);
  if (!in) throw StateError("cannot open '" + file + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  PipelineConfig cfg = parse_config(ss.str(), file);
  cfg.validate();
  return cfg;
}

std::string config_to_toml(const PipelineConfig& cfg) {
  std::ostringstream out;
  out << "seed = " << cfg.seed << "\n";
  out << "threads = " << cfg.threads << "\n";
  out << "out_dir = \"" << cfg.out_dir << "\"\n";

  out << "\n[reference]\n";
  out << "depth = " << cfg.reference.depth << "\n";
  out << "num_heads = " << cfg.reference.num_heads << "\n";
  out << "hidden_dim = " << cfg.reference.hidden_dim << "\n";
  out << "ffn_dim = " << cfg.reference.ffn_dim << "\n";
  out << "head_dim = " << cfg.reference.head_dim << "\n";
  out << "num_patches = " << cfg.reference.num_patches << "\n";
  out << "patch_dim = " << cfg.reference.patch_dim << "\n";
  out << "num_classes = " << cfg.reference.num_classes << "\n";

  out << "\n[train]\n";
  out << "reference_steps = " << cfg.reference_train_steps << "\n";
  out << "reference_lr = " << fmt_double(cfg.reference_lr) << "\n";
  out << "batch_size = " << cfg.train_batch_size << "\n";

  out << "\n[family]\n";
  out << "widths = [";
  for (std::size_t i = 0; i < cfg.widths.size(); ++i)
    out << (i ? ", " : "") << fmt_double(cfg.widths[i]);
  out << "]\n";
  out << "depths = [";
  for (std::size_t i = 0; i < cfg.depths.size(); ++i) out << (i ? ", " : "") << cfg.depths[i];
  out << "]\n";

  out << "\n[distill]\n";
  out << "lambda1 = " << fmt_double(cfg.distill.lambda1) << "\n";
  out << "lambda2 = " << fmt_double(cfg.distill.lambda2) << "\n";
  out << "steps = " << cfg.distill.steps << "\n";
  out << "lr = " << fmt_double(cfg.distill.lr) << "\n";
  out << "batch_size = " << cfg.distill.batch_size << "\n";

  out << "\n[selection]\n";
  out << "clusters = " << cfg.clusters << "\n";
  out << "gamma_p = " << fmt_double(cfg.gamma_p) << "\n";
  out << "sigma = " << fmt_double(cfg.sigma) << "\n";

  out << "\n[nas]\n";
  out << "blocks = " << cfg.nas.blocks << "\n";
  out << "alternations = " << cfg.nas.alternations << "\n";
  out << "shared_steps = " << cfg.nas.shared_steps << "\n";
  out << "shared_samples = " << cfg.nas.shared_samples << "\n";
  out << "controller_samples = " << cfg.nas.controller_samples << "\n";
  out << "shared_lr = " << fmt_double(cfg.nas.shared_lr) << "\n";
  out << "controller_lr = " << fmt_double(cfg.nas.controller_lr) << "\n";
  out << "batch_size = " << cfg.nas.batch_size << "\n";
  out << "holdout_fraction = " << fmt_double(cfg.nas.holdout_fraction) << "\n";

  out << "\n[nas.header]\n";
  out << "channels = " << cfg.nas.header.channels << "\n";
  out << "mlp_hidden = " << cfg.nas.header.mlp_hidden << "\n";
  out << "repeats = " << cfg.nas.header.repeats << "\n";
  out << "lstm_hidden = " << cfg.nas.header.lstm_hidden << "\n";
  out << "embed_dim = " << cfg.nas.header.embed_dim << "\n";
  out << "baseline_momentum = " << fmt_double(cfg.nas.header.baseline_momentum) << "\n";

  out << "\n[personalize]\n";
  out << "rounds = " << cfg.personalize.rounds << "\n";
  out << "discard_per_round = " << cfg.personalize.discard_per_round << "\n";
  out << "local_steps = " << cfg.personalize.local_steps << "\n";
  out << "lr = " << fmt_double(cfg.personalize.lr) << "\n";
  out << "batch_size = " << cfg.personalize.batch_size << "\n";
  out << "accumulation_steps = " << cfg.personalize.accumulation_steps << "\n";
  out << "sketch_size = " << cfg.personalize.sketch_size << "\n";
  out << "p_order = " << cfg.personalize.p_order << "\n";
  if (!cfg.personalize.absences.empty()) {
    out << "absences = [";
    for (std::size_t i = 0; i < cfg.personalize.absences.size(); ++i)
      out << (i ? ", " : "") << "[" << cfg.personalize.absences[i].first << ", "
          << cfg.personalize.absences[i].second << "]";
    out << "]\n";
  }

  out << "\n[data]\n";
  out << "num_classes = " << cfg.data.num_classes << "\n";
  out << "patches = " << cfg.data.patches << "\n";
  out << "patch_dim = " << cfg.data.patch_dim << "\n";
  out << "class_sep = " << fmt_double(cfg.data.class_sep) << "\n";
  out << "noise = " << fmt_double(cfg.data.noise) << "\n";
  out << "cloud_samples = " << cfg.cloud_samples << "\n";
  out << "probe_samples = " << cfg.probe_samples << "\n";
  out << "edge_samples = " << cfg.edge_samples << "\n";
  out << "device_samples = " << cfg.device_samples << "\n";
  out << "classes_per_device = " << cfg.classes_per_device << "\n";

  out << "\n[traffic]\n";
  out << "centralized_search_space = " << fmt_double(cfg.centralized_search_space) << "\n";

  for (const DeviceProfile& p : cfg.profiles) {
    out << "\n[[device]]\n";
    out << "id = \"" << p.device_id << "\"\n";
    out << "vcpus = " << p.vcpus << "\n";
    out << "storage_params = " << p.storage_params << "\n";
    out << "base_power = " << fmt_double(p.base_power) << "\n";
    out << "alpha_g = " << fmt_double(p.alpha_g) << "\n";
    out << "alpha_beta = " << fmt_double(p.alpha_beta) << "\n";
    out << "base_latency = " << fmt_double(p.base_latency) << "\n";
    out << "alpha_l = " << fmt_double(p.alpha_l) << "\n";
    out << "epochs = " << p.epochs << "\n";
  }
  return out.str();
}

void save_config(const PipelineConfig& cfg, const std::string& file) {
  std::ofstream out(file);
  if (!out) throw StateError("cannot write '" + file + "'");
  out << config_to_toml(cfg);
  if (!out.good()) throw StateError("write failed for '" + file + "'");
}

}  // namespace acme
