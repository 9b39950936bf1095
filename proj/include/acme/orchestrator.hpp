#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "acme/nas.hpp"
#include "acme/pareto.hpp"
#include "acme/personalize.hpp"

namespace acme {

// Cloud / edges / devices. Clusters hold indices into the device profile
// list; together they cover every device exactly once.
struct Topology {
  int num_devices = 0;
  std::vector<std::vector<int>> clusters;

  void validate() const;  // StateError when the partition is not a disjoint cover
};

// k-means over min-max-normalized (vcpus, storage budget) with seeded
// k-means++ init; empty clusters are repaired by stealing the farthest
// member of the largest cluster, so exactly S nonempty clusters come back.
Topology partition_devices(const std::vector<DeviceProfile>& profiles, int S,
                           std::uint64_t seed = 1);

// Everything that crosses a tier boundary is one of these. The payload
// schemas are closed: validation rejects any key outside the whitelist, which
// is what structurally keeps raw samples and labels off the network.
enum class MessageKind {
  AttributeStats,        // device -> cloud: hardware profile numbers
  BackboneAssignment,    // cloud -> edge: selected (w, d) + weight file name
  HeaderDistribution,    // edge -> device: coarse header architecture
  ImportanceUpload,      // device -> edge: per-parameter importance scores
  AggregatedImportance,  // edge -> device: neighbor-weighted scores
};

const char* kind_name(MessageKind k);
MessageKind kind_from_name(const std::string& name);

struct Message {
  MessageKind kind = MessageKind::AttributeStats;
  std::string sender;
  std::string receiver;
  std::string payload;         // JSON text, schema fixed by `kind`
  std::int64_t byte_size = 0;  // always payload.size()
};

// Throws ConfigError naming the kind and offending key on any schema
// violation: unknown key, missing key, wrong value type, malformed scores.
void validate_message(const Message& m);

// Builds and validates in one step; byte_size is the payload length.
Message make_message(MessageKind kind, const std::string& sender, const std::string& receiver,
                     const std::string& payload);

// 0 = device, 1 = edge ("edge/k"), 2 = cloud
int node_tier(const std::string& node_id);

struct TrafficLedger {
  // (sender, receiver) -> kind name -> bytes
  std::map<std::pair<std::string, std::string>, std::map<std::string, std::int64_t>> links;
  std::map<std::string, std::int64_t> kind_bytes;
  std::map<std::string, std::int64_t> kind_count;
  std::int64_t total_bytes = 0;
  // what shipping every device's raw samples upstream would have cost
  std::int64_t centralized_bytes = 0;

  void record(const Message& m);
  std::int64_t link_total(const std::string& from, const std::string& to) const;
};

// Validates, ledgers, and enqueues; delivery order per receiver is post
// order, and every post happens on the single scheduler thread, so a fixed
// seed replays the exact same traffic.
class MessageBus {
 public:
  void post(Message m);
  std::vector<Message> drain(const std::string& receiver);
  const TrafficLedger& ledger() const { return ledger_; }
  TrafficLedger& ledger() { return ledger_; }

 private:
  std::map<std::string, std::vector<Message>> boxes_;
  TrafficLedger ledger_;
};

struct TrafficSummary {
  std::int64_t acme_upload_bytes = 0;  // AttributeStats + ImportanceUpload
  std::int64_t centralized_bytes = 0;
  double ratio = 0.0;  // upload / centralized
};

TrafficSummary account_traffic(const TrafficLedger& ledger);

// Plain ratio for paper-scale accounting where both sides are configured
// numbers rather than measured bytes.
double upload_ratio(double acme_bytes, double centralized_bytes);

struct SearchSpaceSummary {
  std::string ours;          // exact count, decimal string
  double ours_value = 0.0;   // same, as a double for the ratio
  double centralized = 0.0;  // configured whole-model search space
  double ratio = 0.0;
};

SearchSpaceSummary compare_search_space(int blocks, int opset_size, double centralized);

// Whole-run configuration. The TOML loader fills this; defaults give the
// two-cluster desk-scale run.
struct PipelineConfig {
  TransformerConfig reference;
  int reference_train_steps = 60;
  double reference_lr = 0.1;
  int train_batch_size = 16;

  std::vector<double> widths = {0.5, 1.0};
  std::vector<int> depths = {1};
  DistillationConfig distill;

  std::vector<DeviceProfile> profiles;
  int clusters = 2;
  double gamma_p = 0.25;
  double sigma = 0.0;

  NasSearchConfig nas;
  PersonalizeConfig personalize;

  SyntheticSpec data;
  int cloud_samples = 96;
  int probe_samples = 64;
  int edge_samples = 64;
  int device_samples = 48;
  int classes_per_device = 2;  // non-IID slice each device sees

  double centralized_search_space = 1.695e6;
  std::uint64_t seed = 1;
  int threads = 1;
  std::string out_dir = "out";

  void validate() const;  // ConfigError with the offending field
};

struct CandidateRow {
  double w = 1.0;
  int d = 1;
  double loss = 0.0;
  double energy = 0.0;
  double size = 0.0;
  bool in_pfg = false;
  bool feasible = false;
  bool selected = false;
};

struct DeviceReport {
  std::string device_id;
  double coarse_accuracy = 0.0;  // header as distributed, before any local work
  double final_accuracy = 0.0;   // after local training + refinement rounds
  std::vector<int> masked;
};

struct ClusterReport {
  std::string cluster_id;
  WidthDepthSpec selection;
  double selection_params = 0.0;
  double selection_energy = 0.0;
  double selection_loss = 0.0;
  int grid_cells = 1;
  std::vector<CandidateRow> candidates;
  HeaderDAG dag;
  double stage1_holdout_accuracy = 0.0;
  int rounds_run = 0;
  std::vector<double> round_loss;
  Eigen::MatrixXd similarity;  // row-stochastic weights, device order
  std::vector<DeviceReport> devices;
};

struct RunReport {
  std::uint64_t seed = 0;
  std::string stage_error;  // empty on success, else "stage: what"
  std::string error_kind;   // config / infeasible / numeric / state / shape / internal
  std::vector<std::vector<int>> topology;
  std::vector<ClusterReport> clusters;
  TrafficLedger ledger;
  TrafficSummary traffic;
  SearchSpaceSummary search_space;
  double mean_coarse_accuracy = 0.0;
  double mean_final_accuracy = 0.0;
  bool accuracy_improved = false;  // soft check, logged not fatal
};

// Every stage seed derives from the run seed through a fixed label, so the
// staged commands and the one-shot pipeline agree on every stream.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& label);

// Non-IID slice each device sees: a seeded draw of `classes_per_device`
// classes, and a dataset over them. Pure functions of the configuration.
std::vector<int> device_class_slice(const PipelineConfig& cfg, int device_index);
Dataset device_dataset(const PipelineConfig& cfg, int device_index);

// Edge search split, drawn over the union of the cluster's device classes.
Dataset edge_dataset(const PipelineConfig& cfg, const Topology& topo, int cluster);

// partition -> phase 1 (backbone selection per cluster) -> phase 2-1 (header
// search per edge) -> phase 2-2 (personalization rounds) -> evaluation.
// Every cross-tier flow goes through the bus; any stage failure returns the
// partial report with stage_error/error_kind set instead of throwing.
RunReport run_full_pipeline(const PipelineConfig& cfg);

// Deterministic serialization: no timings, no absolute paths, stable key
// order, exact double round-trip.
std::string report_to_json(const RunReport& r);
RunReport report_from_json(const std::string& text);
void write_run_report(const RunReport& r, const std::string& file);
RunReport load_run_report(const std::string& file);

// link,kind,bytes,direction rows, sorted; direction is up when the receiver
// sits on a higher tier.
void write_traffic_csv(const TrafficLedger& ledger, const std::string& file);

}  // namespace acme
