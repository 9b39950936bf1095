#include "acme/orchestrator.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "acme/errors.hpp"
#include "acme/rng.hpp"
#include "json.hpp"

namespace acme {

using nlohmann::json;

void Topology::validate() const {
  std::vector<int> seen(num_devices, 0);
  for (const auto& c : clusters) {
    if (c.empty()) throw StateError("topology: empty cluster");
    for (int i : c) {
      if (i < 0 || i >= num_devices)
        throw StateError("topology: device index " + std::to_string(i) + " out of range");
      if (seen[i]++) throw StateError("topology: device index " + std::to_string(i) + " assigned twice");
    }
  }
  for (int i = 0; i < num_devices; ++i)
    if (!seen[i]) throw StateError("topology: device index " + std::to_string(i) + " unassigned");
}

Topology partition_devices(const std::vector<DeviceProfile>& profiles, int S, std::uint64_t seed) {
  const int n = static_cast<int>(profiles.size());
  if (n == 0) throw ConfigError("partition: no device profiles");
  if (S < 1) throw ConfigError("partition: cluster count must be positive");
  if (S > n)
    throw ConfigError("partition: " + std::to_string(S) + " clusters for " + std::to_string(n) +
                      " devices");

  // min-max normalize both attributes so neither scale dominates the distance
  std::vector<std::array<double, 2>> x(n);
  for (int i = 0; i < n; ++i)
    x[i] = {static_cast<double>(profiles[i].vcpus), static_cast<double>(profiles[i].storage_params)};
  for (int d = 0; d < 2; ++d) {
    double lo = x[0][d], hi = x[0][d];
    for (int i = 1; i < n; ++i) {
      lo = std::min(lo, x[i][d]);
      hi = std::max(hi, x[i][d]);
    }
    for (int i = 0; i < n; ++i) x[i][d] = hi > lo ? (x[i][d] - lo) / (hi - lo) : 0.0;
  }
  auto d2 = [](const std::array<double, 2>& a, const std::array<double, 2>& b) {
    const double u = a[0] - b[0], v = a[1] - b[1];
    return u * u + v * v;
  };

  // seeded k-means++ over distinct device indices
  CounterRng rng(seed, "partition");
  std::vector<std::array<double, 2>> centroid;
  std::vector<char> used(n, 0);
  const int first = static_cast<int>(rng.uniform_int(static_cast<std::uint32_t>(n)));
  used[first] = 1;
  centroid.push_back(x[first]);
  while (static_cast<int>(centroid.size()) < S) {
    std::vector<double> w(n, 0.0);
    double tot = 0.0;
    for (int i = 0; i < n; ++i) {
      if (used[i]) continue;
      double best = d2(x[i], centroid[0]);
      for (std::size_t c = 1; c < centroid.size(); ++c) best = std::min(best, d2(x[i], centroid[c]));
      w[i] = best;
      tot += best;
    }
    int pick = -1;
    if (tot > 0.0) {
      double r = rng.uniform() * tot;
      for (int i = 0; i < n && pick < 0; ++i) {
        if (used[i]) continue;
        r -= w[i];
        if (r <= 0.0) pick = i;
      }
    }
    if (pick < 0)  // every remaining point coincides with a centroid
      for (int i = 0; i < n && pick < 0; ++i)
        if (!used[i]) pick = i;
    used[pick] = 1;
    centroid.push_back(x[pick]);
  }

  std::vector<int> assign(n, -1);
  std::vector<int> count(S, 0);
  for (int iter = 0; iter < 32; ++iter) {
    bool changed = false;
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double bd = d2(x[i], centroid[0]);
      for (int c = 1; c < S; ++c) {
        const double dc = d2(x[i], centroid[c]);
        if (dc < bd) {
          bd = dc;
          best = c;
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
    }
    count.assign(S, 0);
    for (int i = 0; i < n; ++i) ++count[assign[i]];
    // an empty cluster steals the farthest member of the largest one
    for (int c = 0; c < S; ++c) {
      while (count[c] == 0) {
        int donor = 0;
        for (int k = 1; k < S; ++k)
          if (count[k] > count[donor]) donor = k;
        int victim = -1;
        double vd = -1.0;
        for (int i = 0; i < n; ++i) {
          if (assign[i] != donor) continue;
          const double di = d2(x[i], centroid[donor]);
          if (di > vd) {
            vd = di;
            victim = i;
          }
        }
        assign[victim] = c;
        --count[donor];
        ++count[c];
        changed = true;
      }
    }
    std::vector<std::array<double, 2>> mean(S, {0.0, 0.0});
    for (int i = 0; i < n; ++i) {
      mean[assign[i]][0] += x[i][0];
      mean[assign[i]][1] += x[i][1];
    }
    for (int c = 0; c < S; ++c) {
      mean[c][0] /= count[c];
      mean[c][1] /= count[c];
    }
    centroid = mean;
    if (!changed) break;
  }

  Topology t;
  t.num_devices = n;
  t.clusters.assign(S, {});
  for (int i = 0; i < n; ++i) t.clusters[assign[i]].push_back(i);
  t.validate();
  return t;
}

const char* kind_name(MessageKind k) {
  switch (k) {
    case MessageKind::AttributeStats: return "AttributeStats";
    case MessageKind::BackboneAssignment: return "BackboneAssignment";
    case MessageKind::HeaderDistribution: return "HeaderDistribution";
    case MessageKind::ImportanceUpload: return "ImportanceUpload";
    case MessageKind::AggregatedImportance: return "AggregatedImportance";
  }
  throw StateError("unknown message kind");
}

MessageKind kind_from_name(const std::string& name) {
  static constexpr MessageKind all[] = {
      MessageKind::AttributeStats, MessageKind::BackboneAssignment, MessageKind::HeaderDistribution,
      MessageKind::ImportanceUpload, MessageKind::AggregatedImportance};
  for (MessageKind k : all)
    if (name == kind_name(k)) return k;
  throw ConfigError("unknown message kind '" + name + "'");
}

int node_tier(const std::string& node_id) {
  if (node_id == "cloud") return 2;
  if (node_id.rfind("edge/", 0) == 0) return 1;
  return 0;
}

namespace {

enum class FieldType { Str, Int, Num, Obj, Arr };

struct Field {
  const char* key;
  FieldType type;
};

void check_keys(const json& j, const std::string& where, std::initializer_list<Field> fields) {
  if (!j.is_object()) throw ConfigError(where + ": payload must be a json object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const Field& f : fields) known = known || item.key() == f.key;
    if (!known) throw ConfigError(where + ": unexpected key '" + item.key() + "'");
  }
  for (const Field& f : fields) {
    auto it = j.find(f.key);
    if (it == j.end()) throw ConfigError(where + ": missing key '" + std::string(f.key) + "'");
    bool ok = false;
    switch (f.type) {
      case FieldType::Str: ok = it->is_string(); break;
      case FieldType::Int: ok = it->is_number_integer(); break;
      case FieldType::Num: ok = it->is_number(); break;
      case FieldType::Obj: ok = it->is_object(); break;
      case FieldType::Arr: ok = it->is_array(); break;
    }
    if (!ok) throw ConfigError(where + ": key '" + std::string(f.key) + "' has the wrong type");
  }
}

// scores may only map parameter slots to plain numbers; anything shaped like
// samples, labels, or nested structure is refused at the boundary
void check_scores(const json& scores, const std::string& where) {
  for (const auto& item : scores.items()) {
    const std::string& key = item.key();
    if (key.rfind("hdr/", 0) != 0 || key.find('[') == std::string::npos)
      throw ConfigError(where + ": scores key '" + key + "' is not a parameter slot");
    if (!item.value().is_number())
      throw ConfigError(where + ": scores entry '" + key + "' must be a number");
  }
}

void check_direction(const Message& m, int from_tier, int to_tier) {
  if (node_tier(m.sender) != from_tier || node_tier(m.receiver) != to_tier)
    throw ConfigError(std::string(kind_name(m.kind)) + ": link " + m.sender + " -> " + m.receiver +
                      " crosses the wrong tiers");
}

}  // namespace

void validate_message(const Message& m) {
  const std::string where = kind_name(m.kind);
  if (m.sender.empty() || m.receiver.empty())
    throw ConfigError(where + ": sender and receiver are required");
  if (m.byte_size != static_cast<std::int64_t>(m.payload.size()))
    throw ConfigError(where + ": byte_size does not match the payload");
  json j;
  try {
    j = json::parse(m.payload);
  } catch (const json::exception& e) {
    throw ConfigError(where + ": payload is not valid json: " + e.what());
  }
  using FT = FieldType;
  switch (m.kind) {
    case MessageKind::AttributeStats:
      check_direction(m, 0, 2);
      check_keys(j, where,
                 {{"alpha_beta", FT::Num},
                  {"alpha_g", FT::Num},
                  {"alpha_l", FT::Num},
                  {"base_latency", FT::Num},
                  {"base_power", FT::Num},
                  {"device_id", FT::Str},
                  {"epochs", FT::Int},
                  {"patches", FT::Int},
                  {"storage_params", FT::Int},
                  {"vcpus", FT::Int}});
      break;
    case MessageKind::BackboneAssignment:
      check_direction(m, 2, 1);
      check_keys(j, where,
                 {{"cluster", FT::Str},
                  {"d", FT::Int},
                  {"param_count", FT::Num},
                  {"w", FT::Num},
                  {"weights_ref", FT::Str}});
      break;
    case MessageKind::HeaderDistribution: {
      check_direction(m, 1, 0);
      check_keys(j, where, {{"cluster", FT::Str}, {"dag", FT::Obj}});
      const json& dag = j["dag"];
      check_keys(dag, where + ".dag",
                 {{"blocks", FT::Arr}, {"opset_version", FT::Int}, {"repeats", FT::Int}});
      if (dag["blocks"].empty()) throw ConfigError(where + ": dag has no blocks");
      for (const json& b : dag["blocks"])
        check_keys(b, where + ".dag.blocks",
                   {{"i1", FT::Int}, {"i2", FT::Int}, {"o1", FT::Int}, {"o2", FT::Int}});
      break;
    }
    case MessageKind::ImportanceUpload:
      check_direction(m, 0, 1);
      check_keys(j, where, {{"device_id", FT::Str}, {"round", FT::Int}, {"scores", FT::Obj}});
      check_scores(j["scores"], where);
      break;
    case MessageKind::AggregatedImportance:
      check_direction(m, 1, 0);
      check_keys(j, where, {{"device_id", FT::Str}, {"round", FT::Int}, {"scores", FT::Obj}});
      check_scores(j["scores"], where);
      break;
  }
}

Message make_message(MessageKind kind, const std::string& sender, const std::string& receiver,
                     const std::string& payload) {
  Message m;
  m.kind = kind;
  m.sender = sender;
  m.receiver = receiver;
  m.payload = payload;
  m.byte_size = static_cast<std::int64_t>(m.payload.size());
  validate_message(m);
  return m;
}

void TrafficLedger::record(const Message& m) {
  const std::string k = kind_name(m.kind);
  links[{m.sender, m.receiver}][k] += m.byte_size;
  kind_bytes[k] += m.byte_size;
  kind_count[k] += 1;
  total_bytes += m.byte_size;
}

std::int64_t TrafficLedger::link_total(const std::string& from, const std::string& to) const {
  auto it = links.find({from, to});
  if (it == links.end()) return 0;
  std::int64_t t = 0;
  for (const auto& [kind, bytes] : it->second) t += bytes;
  return t;
}

void MessageBus::post(Message m) {
  validate_message(m);
  ledger_.record(m);
  boxes_[m.receiver].push_back(std::move(m));
}

std::vector<Message> MessageBus::drain(const std::string& receiver) {
  auto it = boxes_.find(receiver);
  if (it == boxes_.end()) return {};
  std::vector<Message> out = std::move(it->second);
  boxes_.erase(it);
  return out;
}

TrafficSummary account_traffic(const TrafficLedger& ledger) {
  TrafficSummary s;
  auto grab = [&ledger](MessageKind k) -> std::int64_t {
    auto it = ledger.kind_bytes.find(kind_name(k));
    return it == ledger.kind_bytes.end() ? 0 : it->second;
  };
  s.acme_upload_bytes = grab(MessageKind::AttributeStats) + grab(MessageKind::ImportanceUpload);
  s.centralized_bytes = ledger.centralized_bytes;
  s.ratio = s.centralized_bytes > 0
                ? static_cast<double>(s.acme_upload_bytes) / static_cast<double>(s.centralized_bytes)
                : 0.0;
  return s;
}

double upload_ratio(double acme_bytes, double centralized_bytes) {
  return acme_bytes / centralized_bytes;
}

SearchSpaceSummary compare_search_space(int blocks, int opset_size, double centralized) {
  SearchSpaceSummary s;
  s.ours = search_space_size(blocks, opset_size).to_string();
  try {
    s.ours_value = std::stod(s.ours);
  } catch (const std::out_of_range&) {
    s.ours_value = std::numeric_limits<double>::infinity();
  }
  s.centralized = centralized;
  s.ratio = s.ours_value / centralized;
  return s;
}

void PipelineConfig::validate() const {
  if (reference_train_steps < 0) throw ConfigError("reference_train_steps must be >= 0");
  if (!(reference_lr > 0.0)) throw ConfigError("reference_lr must be positive");
  if (train_batch_size < 1) throw ConfigError("train_batch_size must be positive");
  if (widths.empty()) throw ConfigError("widths: at least one width fraction is required");
  for (double w : widths)
    if (!(w > 0.0) || w > 1.0) throw ConfigError("widths: fractions must lie in (0, 1]");
  if (depths.empty()) throw ConfigError("depths: at least one depth is required");
  for (int d : depths)
    if (d < 1 || d > reference.depth)
      throw ConfigError("depths: values must lie in [1, " + std::to_string(reference.depth) + "]");
  if (profiles.empty()) throw ConfigError("profiles: at least one device is required");
  std::vector<std::string> ids;
  for (const DeviceProfile& p : profiles) {
    p.validate();
    if (node_tier(p.device_id) != 0)
      throw ConfigError("profiles: '" + p.device_id + "' collides with an upstream node name");
    if (p.patches != reference.num_patches)
      throw ConfigError("profiles: '" + p.device_id + "' patch count does not match the reference");
    ids.push_back(p.device_id);
  }
  std::sort(ids.begin(), ids.end());
  auto dup = std::adjacent_find(ids.begin(), ids.end());
  if (dup != ids.end()) throw ConfigError("profiles: duplicate device id '" + *dup + "'");
  if (clusters < 1 || clusters > static_cast<int>(profiles.size()))
    throw ConfigError("clusters must lie in [1, number of devices]");
  if (!(gamma_p > 0.0)) throw ConfigError("gamma_p must be positive");
  if (sigma < 0.0) throw ConfigError("sigma must be >= 0");
  if (nas.blocks < 1) throw ConfigError("nas.blocks must be >= 1");
  if (nas.alternations < 0) throw ConfigError("nas.alternations must be >= 0");
  if (nas.ops.ops.empty()) throw ConfigError("nas.ops: the operation menu is empty");
  if (nas.header.channels < 1 || nas.header.mlp_hidden < 1)
    throw ConfigError("nas.header: dimensions must be positive");
  if (personalize.rounds < 0) throw ConfigError("personalize.rounds must be >= 0");
  if (personalize.discard_per_round < 0) throw ConfigError("personalize.discard_per_round must be >= 0");
  if (personalize.rounds * personalize.discard_per_round >= nas.header.mlp_hidden)
    throw ConfigError("personalize: refinement would exhaust the header's hidden units");
  if (cloud_samples < 1 || probe_samples < 1 || edge_samples < 1 || device_samples < 1)
    throw ConfigError("sample counts must be positive");
  if (classes_per_device < 1 || classes_per_device > data.num_classes)
    throw ConfigError("classes_per_device must lie in [1, data.num_classes]");
  if (data.num_classes != reference.num_classes)
    throw ConfigError("data.num_classes must match the reference model");
  if (data.patches != reference.num_patches)
    throw ConfigError("data.patches must match the reference model");
  if (data.patch_dim != reference.patch_dim)
    throw ConfigError("data.patch_dim must match the reference model");
  if (!(centralized_search_space > 0.0)) throw ConfigError("centralized_search_space must be positive");
  if (threads < 1) throw ConfigError("threads must be >= 1");
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& label) {
  return CounterRng(seed, label).next_u64();
}

std::vector<int> device_class_slice(const PipelineConfig& cfg, int device_index) {
  const std::string& id = cfg.profiles.at(device_index).device_id;
  std::vector<int> pool(cfg.data.num_classes);
  std::iota(pool.begin(), pool.end(), 0);
  // partial Fisher-Yates: the first classes_per_device entries are the draw
  CounterRng crng(cfg.seed, "classes/" + id);
  for (int j = 0; j < cfg.classes_per_device; ++j) {
    const int pick = j + static_cast<int>(crng.uniform_int(static_cast<std::uint32_t>(pool.size() - j)));
    std::swap(pool[j], pool[pick]);
  }
  pool.resize(cfg.classes_per_device);
  std::sort(pool.begin(), pool.end());
  return pool;
}

Dataset device_dataset(const PipelineConfig& cfg, int device_index) {
  return make_class_gaussian(cfg.data, device_class_slice(cfg, device_index), cfg.device_samples,
                             cfg.seed, "device/" + cfg.profiles.at(device_index).device_id);
}

Dataset edge_dataset(const PipelineConfig& cfg, const Topology& topo, int cluster) {
  std::vector<int> pool;
  for (int i : topo.clusters.at(cluster)) {
    const std::vector<int> slice = device_class_slice(cfg, i);
    pool.insert(pool.end(), slice.begin(), slice.end());
  }
  std::sort(pool.begin(), pool.end());
  pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
  return make_class_gaussian(cfg.data, pool, cfg.edge_samples, cfg.seed,
                             "edge/" + std::to_string(cluster) + "/search");
}

namespace {

json profile_payload(const DeviceProfile& p) {
  return {{"alpha_beta", p.alpha_beta}, {"alpha_g", p.alpha_g},
          {"alpha_l", p.alpha_l},       {"base_latency", p.base_latency},
          {"base_power", p.base_power}, {"device_id", p.device_id},
          {"epochs", p.epochs},         {"patches", p.patches},
          {"storage_params", p.storage_params}, {"vcpus", p.vcpus}};
}

DeviceProfile profile_from_payload(const std::string& text) {
  const json j = json::parse(text);
  DeviceProfile p;
  p.device_id = j.at("device_id").get<std::string>();
  p.base_power = j.at("base_power").get<double>();
  p.alpha_g = j.at("alpha_g").get<double>();
  p.alpha_beta = j.at("alpha_beta").get<double>();
  p.patches = j.at("patches").get<int>();
  p.base_latency = j.at("base_latency").get<double>();
  p.alpha_l = j.at("alpha_l").get<double>();
  p.storage_params = j.at("storage_params").get<std::int64_t>();
  p.epochs = j.at("epochs").get<int>();
  p.vcpus = j.at("vcpus").get<int>();
  return p;
}

json dag_payload(const HeaderDAG& dag) {
  json blocks = json::array();
  for (const BlockSpec& b : dag.blocks)
    blocks.push_back({{"i1", b.i1}, {"i2", b.i2}, {"o1", b.o1}, {"o2", b.o2}});
  return {{"blocks", blocks}, {"opset_version", dag.opset_version}, {"repeats", dag.repeats}};
}

HeaderDAG dag_from_payload(const json& j) {
  HeaderDAG dag;
  dag.repeats = j.at("repeats").get<int>();
  dag.opset_version = j.at("opset_version").get<int>();
  for (const auto& jb : j.at("blocks")) {
    BlockSpec b;
    b.i1 = jb.at("i1").get<int>();
    b.i2 = jb.at("i2").get<int>();
    b.o1 = jb.at("o1").get<int>();
    b.o2 = jb.at("o2").get<int>();
    dag.blocks.push_back(b);
  }
  return dag;
}

// mirrors each refinement exchange onto the bus so the ledger sees it
struct BusMirror : PersonalizeObserver {
  MessageBus* bus = nullptr;
  std::string edge_id;

  void on_upload(int, const std::string& device_id, const ImportanceSet& q) override {
    bus->post(make_message(MessageKind::ImportanceUpload, device_id, edge_id, importance_to_json(q)));
  }
  void on_distribute(int, const std::string& device_id, const ImportanceSet& agg) override {
    bus->post(
        make_message(MessageKind::AggregatedImportance, edge_id, device_id, importance_to_json(agg)));
  }
};

}  // namespace

RunReport run_full_pipeline(const PipelineConfig& cfg) {
  RunReport rep;
  rep.seed = cfg.seed;
  MessageBus bus;
  std::string stage = "config";
  try {
    cfg.validate();
    const std::string family_dir = cfg.out_dir + "/family";
    std::filesystem::create_directories(family_dir);

    stage = "data";
    const int n_devices = static_cast<int>(cfg.profiles.size());
    std::vector<int> all_classes(cfg.data.num_classes);
    std::iota(all_classes.begin(), all_classes.end(), 0);
    const Dataset cloud_data = make_class_gaussian(cfg.data, all_classes, cfg.cloud_samples, cfg.seed, "cloud");
    const Dataset probe = make_class_gaussian(cfg.data, all_classes, cfg.probe_samples, cfg.seed, "probe");

    std::vector<Dataset> device_data;
    device_data.reserve(n_devices);
    for (int i = 0; i < n_devices; ++i) {
      device_data.push_back(device_dataset(cfg, i));
      // what shipping this device's raw samples upstream would have cost
      bus.ledger().centralized_bytes += serialized_bytes(device_data.back());
    }

    stage = "attributes";
    for (int i = 0; i < n_devices; ++i)
      bus.post(make_message(MessageKind::AttributeStats, cfg.profiles[i].device_id, "cloud",
                            profile_payload(cfg.profiles[i]).dump()));
    std::vector<DeviceProfile> received;
    for (const Message& m : bus.drain("cloud")) received.push_back(profile_from_payload(m.payload));

    stage = "partition";
    const Topology topo = partition_devices(received, cfg.clusters, cfg.seed);
    rep.topology = topo.clusters;
    const int S = static_cast<int>(topo.clusters.size());

    stage = "reference";
    TransformerNet reference = make_reference_model(cfg.reference);
    TrainOptions ropt;
    ropt.steps = cfg.reference_train_steps;
    ropt.lr = cfg.reference_lr;
    ropt.batch_size = cfg.train_batch_size;
    ropt.seed = cfg.seed;
    ropt.stream = "reference";
    train_ce(reference, cloud_data, ropt);

    stage = "family";
    const ImportanceTable imp = head_importance(reference, probe, cfg.train_batch_size);
    DistillationConfig dcfg = cfg.distill;
    dcfg.seed = derive_seed(cfg.seed, "distill");
    const FamilyManifest manifest =
        build_family(reference, imp, cfg.widths, cfg.depths, dcfg, cloud_data, family_dir);

    stage = "phase1";
    std::vector<ClusterSpec> specs(S);
    for (int k = 0; k < S; ++k) {
      specs[k].cluster_id = "edge/" + std::to_string(k);
      for (int i : topo.clusters[k]) specs[k].devices.push_back(received[i]);
    }
    const std::vector<ClusterPhase1> phase1 =
        run_phase1(manifest, family_dir, reference, specs, probe, cfg.gamma_p, cfg.sigma, cfg.threads);

    rep.clusters.resize(S);
    for (int k = 0; k < S; ++k) {
      ClusterReport& cr = rep.clusters[k];
      const ClusterPhase1& p1 = phase1[k];
      cr.cluster_id = p1.cluster_id;
      cr.selection = p1.selection;
      const MenuCandidate& sel = p1.audit[p1.selected_index];
      cr.selection_params = sel.f.size;
      cr.selection_energy = sel.f.energy;
      cr.selection_loss = sel.f.loss;
      cr.grid_cells = p1.grid.K;
      for (const MenuCandidate& c : p1.audit) {
        CandidateRow row;
        row.w = c.spec.w;
        row.d = c.spec.d;
        row.loss = c.f.loss;
        row.energy = c.f.energy;
        row.size = c.f.size;
        row.in_pfg = c.in_pfg;
        row.feasible = c.feasible;
        row.selected = c.selected;
        cr.candidates.push_back(row);
      }
      const FamilyMember* member = nullptr;
      for (const FamilyMember& fm : manifest.members)
        if (fm.spec.w == p1.selection.w && fm.spec.d == p1.selection.d) member = &fm;
      if (!member) throw StateError(p1.cluster_id + ": selected spec missing from the family manifest");
      const json payload = {{"cluster", p1.cluster_id},
                            {"d", p1.selection.d},
                            {"param_count", sel.f.size},
                            {"w", p1.selection.w},
                            {"weights_ref", member->weights_file}};
      bus.post(make_message(MessageKind::BackboneAssignment, "cloud", p1.cluster_id, payload.dump()));
    }

    stage = "phase2-1";
    std::vector<TransformerNet> backbones;
    backbones.reserve(S);
    for (int k = 0; k < S; ++k) {
      const std::string edge_id = "edge/" + std::to_string(k);
      const std::vector<Message> inbox = bus.drain(edge_id);
      if (inbox.size() != 1 || inbox[0].kind != MessageKind::BackboneAssignment)
        throw StateError(edge_id + ": expected exactly one backbone assignment");
      const json j = json::parse(inbox[0].payload);
      const std::string ref = j.at("weights_ref").get<std::string>();
      const FamilyMember* member = nullptr;
      for (const FamilyMember& fm : manifest.members)
        if (fm.weights_file == ref) member = &fm;
      if (!member) throw StateError(edge_id + ": assigned weights '" + ref + "' not in the manifest");
      backbones.push_back(load_family_member(manifest, *member, family_dir));

      const Dataset edge_data = edge_dataset(cfg, topo, k);

      NasSearchConfig ncfg = cfg.nas;
      ncfg.seed = derive_seed(cfg.seed, "nas/" + std::to_string(k));
      const NasSearchResult found = run_phase2_stage1(edge_id, backbones[k], edge_data, ncfg);
      rep.clusters[k].dag = found.dag;
      rep.clusters[k].stage1_holdout_accuracy = found.holdout_accuracy;

      const json dist = {{"cluster", edge_id}, {"dag", dag_payload(found.dag)}};
      for (int i : topo.clusters[k])
        bus.post(make_message(MessageKind::HeaderDistribution, edge_id, received[i].device_id, dist.dump()));
    }

    stage = "phase2-2";
    const FamilyMember* lightest = &manifest.members.front();
    for (const FamilyMember& fm : manifest.members)
      if (fm.spec.w < lightest->spec.w || (fm.spec.w == lightest->spec.w && fm.spec.d < lightest->spec.d))
        lightest = &fm;
    TransformerNet extractor = load_family_member(manifest, *lightest, family_dir);

    double coarse_sum = 0.0, final_sum = 0.0;
    for (int k = 0; k < S; ++k) {
      const std::string edge_id = "edge/" + std::to_string(k);
      ClusterReport& cr = rep.clusters[k];
      HeaderDAG coarse;
      std::vector<PersonalizeDevice> devs;
      for (std::size_t a = 0; a < topo.clusters[k].size(); ++a) {
        const int i = topo.clusters[k][a];
        const std::vector<Message> inbox = bus.drain(received[i].device_id);
        if (inbox.size() != 1 || inbox[0].kind != MessageKind::HeaderDistribution)
          throw StateError(received[i].device_id + ": expected exactly one header distribution");
        HeaderDAG got = dag_from_payload(json::parse(inbox[0].payload).at("dag"));
        got.validate(static_cast<int>(cfg.nas.ops.ops.size()));
        if (a == 0)
          coarse = got;
        else if (!(got == coarse))
          throw StateError(edge_id + ": header distribution diverged across devices");
        devs.push_back({received[i].device_id, device_data[i]});
      }

      for (const PersonalizeDevice& dev : devs) {
        HeaderNet h = instantiate_header(backbones[k], coarse, cfg.nas.ops, cfg.nas.header);
        DeviceReport dr;
        dr.device_id = dev.device_id;
        dr.coarse_accuracy = eval_accuracy(h, dev.data.all());
        cr.devices.push_back(dr);
      }

      PersonalizeConfig pcfg = cfg.personalize;
      pcfg.seed = derive_seed(cfg.seed, "personalize/" + std::to_string(k));
      BusMirror mirror;
      mirror.bus = &bus;
      mirror.edge_id = edge_id;
      const PersonalizeResult refined =
          run_phase2_stage2(backbones[k], coarse, cfg.nas.ops, cfg.nas.header, extractor, devs, pcfg, &mirror);

      cr.rounds_run = refined.rounds_run;
      cr.round_loss = refined.round_loss;
      cr.similarity = refined.similarity.norm;
      for (std::size_t a = 0; a < devs.size(); ++a) {
        cr.devices[a].final_accuracy = refined.final_accuracy[a];
        cr.devices[a].masked = masked_neurons(refined.headers[a]);
        coarse_sum += cr.devices[a].coarse_accuracy;
        final_sum += cr.devices[a].final_accuracy;
      }
    }

    stage = "traffic";
    rep.search_space =
        compare_search_space(cfg.nas.blocks, static_cast<int>(cfg.nas.ops.ops.size()), cfg.centralized_search_space);

    stage = "evaluation";
    rep.mean_coarse_accuracy = coarse_sum / n_devices;
    rep.mean_final_accuracy = final_sum / n_devices;
    rep.accuracy_improved = rep.mean_final_accuracy + 1e-12 >= rep.mean_coarse_accuracy;
    if (!rep.accuracy_improved)
      std::fprintf(stderr, "[run %llu] personalization did not lift mean accuracy: %.4f -> %.4f\n",
                   static_cast<unsigned long long>(cfg.seed), rep.mean_coarse_accuracy,
                   rep.mean_final_accuracy);
  } catch (const ConfigError& e) {
    rep.stage_error = stage + ": " + e.what();
    rep.error_kind = "config";
  } catch (const InfeasibleError& e) {
    rep.stage_error = stage + ": " + e.what();
    rep.error_kind = "infeasible";
  } catch (const NumericError& e) {
    rep.stage_error = stage + ": " + e.what();
    rep.error_kind = "numeric";
  } catch (const ShapeError& e) {
    rep.stage_error = stage + ": " + e.what();
    rep.error_kind = "shape";
  } catch (const StateError& e) {
    rep.stage_error = stage + ": " + e.what();
    rep.error_kind = "state";
  } catch (const std::exception& e) {
    rep.stage_error = stage + ": " + e.what();
    rep.error_kind = "internal";
  }
  rep.ledger = bus.ledger();
  rep.traffic = account_traffic(rep.ledger);
  return rep;
}

namespace {

double num_or_nan(const json& v) {
  return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
}

json ledger_to_json(const TrafficLedger& l) {
  json links = json::array();
  for (const auto& [link, kinds] : l.links)
    for (const auto& [kind, bytes] : kinds)
      links.push_back({{"bytes", bytes}, {"from", link.first}, {"kind", kind}, {"to", link.second}});
  json kinds = json::object();
  for (const auto& [kind, bytes] : l.kind_bytes)
    kinds[kind] = {{"bytes", bytes}, {"count", l.kind_count.at(kind)}};
  return {{"centralized_bytes", l.centralized_bytes},
          {"kinds", kinds},
          {"links", links},
          {"total_bytes", l.total_bytes}};
}

TrafficLedger ledger_from_json(const json& j) {
  TrafficLedger l;
  for (const auto& e : j.at("links"))
    l.links[{e.at("from").get<std::string>(), e.at("to").get<std::string>()}]
           [e.at("kind").get<std::string>()] = e.at("bytes").get<std::int64_t>();
  for (const auto& item : j.at("kinds").items()) {
    l.kind_bytes[item.key()] = item.value().at("bytes").get<std::int64_t>();
    l.kind_count[item.key()] = item.value().at("count").get<std::int64_t>();
  }
  l.total_bytes = j.at("total_bytes").get<std::int64_t>();
  l.centralized_bytes = j.at("centralized_bytes").get<std::int64_t>();
  return l;
}

}  // namespace

std::string report_to_json(const RunReport& r) {
  json j;
  j["clusters"] = json::array();
  for (const ClusterReport& c : r.clusters) {
    json jc;
    jc["candidates"] = json::array();
    for (const CandidateRow& row : c.candidates)
      jc["candidates"].push_back({{"d", row.d},
                                  {"energy", row.energy},
                                  {"feasible", row.feasible},
                                  {"in_pfg", row.in_pfg},
                                  {"loss", row.loss},
                                  {"selected", row.selected},
                                  {"size", row.size},
                                  {"w", row.w}});
    jc["cluster_id"] = c.cluster_id;
    jc["dag"] = dag_payload(c.dag);
    jc["devices"] = json::array();
    for (const DeviceReport& d : c.devices)
      jc["devices"].push_back({{"coarse_accuracy", d.coarse_accuracy},
                               {"device_id", d.device_id},
                               {"final_accuracy", d.final_accuracy},
                               {"masked", d.masked}});
    jc["grid_cells"] = c.grid_cells;
    jc["round_loss"] = c.round_loss;
    jc["rounds_run"] = c.rounds_run;
    jc["selection"] = {{"d", c.selection.d},
                       {"energy", c.selection_energy},
                       {"loss", c.selection_loss},
                       {"params", c.selection_params},
                       {"w", c.selection.w}};
    json sim = json::array();
    for (int a = 0; a < c.similarity.rows(); ++a) {
      json row = json::array();
      for (int b = 0; b < c.similarity.cols(); ++b) row.push_back(c.similarity(a, b));
      sim.push_back(row);
    }
    jc["similarity"] = sim;
    jc["stage1_holdout_accuracy"] = c.stage1_holdout_accuracy;
    j["clusters"].push_back(jc);
  }
  j["error_kind"] = r.error_kind;
  j["evaluation"] = {{"improved", r.accuracy_improved},
                     {"mean_coarse_accuracy", r.mean_coarse_accuracy},
                     {"mean_final_accuracy", r.mean_final_accuracy}};
  j["search_space"] = {{"centralized", r.search_space.centralized},
                       {"ours", r.search_space.ours},
                       {"ours_value", r.search_space.ours_value},
                       {"ratio", r.search_space.ratio}};
  j["seed"] = r.seed;
  j["stage_error"] = r.stage_error;
  j["topology"] = r.topology;
  j["traffic"] = ledger_to_json(r.ledger);
  j["traffic"]["summary"] = {{"acme_upload_bytes", r.traffic.acme_upload_bytes},
                             {"centralized_bytes", r.traffic.centralized_bytes},
                             {"ratio", r.traffic.ratio}};
  return j.dump(2);
}

RunReport report_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    RunReport r;
    r.seed = j.at("seed").get<std::uint64_t>();
    r.stage_error = j.at("stage_error").get<std::string>();
    r.error_kind = j.at("error_kind").get<std::string>();
    r.topology = j.at("topology").get<std::vector<std::vector<int>>>();
    for (const json& jc : j.at("clusters")) {
      ClusterReport c;
      c.cluster_id = jc.at("cluster_id").get<std::string>();
      const json& sel = jc.at("selection");
      c.selection.w = sel.at("w").get<double>();
      c.selection.d = sel.at("d").get<int>();
      c.selection_params = num_or_nan(sel.at("params"));
      c.selection_energy = num_or_nan(sel.at("energy"));
      c.selection_loss = num_or_nan(sel.at("loss"));
      c.grid_cells = jc.at("grid_cells").get<int>();
      for (const json& row : jc.at("candidates")) {
        CandidateRow cr;
        cr.w = row.at("w").get<double>();
        cr.d = row.at("d").get<int>();
        cr.loss = num_or_nan(row.at("loss"));
        cr.energy = num_or_nan(row.at("energy"));
        cr.size = num_or_nan(row.at("size"));
        cr.in_pfg = row.at("in_pfg").get<bool>();
        cr.feasible = row.at("feasible").get<bool>();
        cr.selected = row.at("selected").get<bool>();
        c.candidates.push_back(cr);
      }
      c.dag = dag_from_payload(jc.at("dag"));
      c.stage1_holdout_accuracy = num_or_nan(jc.at("stage1_holdout_accuracy"));
      c.rounds_run = jc.at("rounds_run").get<int>();
      for (const json& v : jc.at("round_loss")) c.round_loss.push_back(num_or_nan(v));
      const json& sim = jc.at("similarity");
      const int rows = static_cast<int>(sim.size());
      const int cols = rows > 0 ? static_cast<int>(sim.at(0).size()) : 0;
      c.similarity.resize(rows, cols);
      for (int a = 0; a < rows; ++a)
        for (int b = 0; b < cols; ++b) c.similarity(a, b) = num_or_nan(sim.at(a).at(b));
      for (const json& jd : jc.at("devices")) {
        DeviceReport d;
        d.device_id = jd.at("device_id").get<std::string>();
        d.coarse_accuracy = num_or_nan(jd.at("coarse_accuracy"));
        d.final_accuracy = num_or_nan(jd.at("final_accuracy"));
        d.masked = jd.at("masked").get<std::vector<int>>();
        c.devices.push_back(d);
      }
      r.clusters.push_back(std::move(c));
    }
    r.ledger = ledger_from_json(j.at("traffic"));
    const json& ts = j.at("traffic").at("summary");
    r.traffic.acme_upload_bytes = ts.at("acme_upload_bytes").get<std::int64_t>();
    r.traffic.centralized_bytes = ts.at("centralized_bytes").get<std::int64_t>();
    r.traffic.ratio = num_or_nan(ts.at("ratio"));
    const json& ss = j.at("search_space");
    r.search_space.ours = ss.at("ours").get<std::string>();
    r.search_space.ours_value = num_or_nan(ss.at("ours_value"));
    r.search_space.centralized = num_or_nan(ss.at("centralized"));
    r.search_space.ratio = num_or_nan(ss.at("ratio"));
    const json& ev = j.at("evaluation");
    r.mean_coarse_accuracy = num_or_nan(ev.at("mean_coarse_accuracy"));
    r.mean_final_accuracy = num_or_nan(ev.at("mean_final_accuracy"));
    r.accuracy_improved = ev.at("improved").get<bool>();
    return r;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run report: ") + e.what());
  }
}

void write_run_report(const RunReport& r, const std::string& file) {
  std::ofstream out(file);
  if (!out) throw StateError("cannot write '" + file + "'");
  out << report_to_json(r) << "\n";
}

RunReport load_run_report(const std::string& file) {
  std::ifstream in(file);
  if (!in) throw StateError("cannot open '" + file + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return report_from_json(ss.str());
}

void write_traffic_csv(const TrafficLedger& ledger, const std::string& file) {
  std::ofstream out(file);
  if (!out) throw StateError("cannot write '" + file + "'");
  out << "link,kind,bytes,direction\n";
  for (const auto& [link, kinds] : ledger.links)
    for (const auto& [kind, bytes] : kinds)
      out << link.first << "->" << link.second << "," << kind << "," << bytes << ","
          << (node_tier(link.second) > node_tier(link.first) ? "up" : "down") << "\n";
}

}  // namespace acme
