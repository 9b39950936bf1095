#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "acme/nas.hpp"
#include "acme/ot.hpp"

namespace acme {

// Per-scalar importance of a device's header parameters. Keys are
// "path[index]" over the header entries and are identical across devices
// holding the same header, which is what makes aggregation well defined.
struct ImportanceSet {
  std::string device_id;
  int round = 0;
  std::map<std::string, double> scores;
};

// Wire form used when a set crosses a tier boundary:
// {"device_id": ..., "round": ..., "scores": {path: value}}
std::string importance_to_json(const ImportanceSet& s);
ImportanceSet importance_from_json(const std::string& text);

// (gradient * value)^2 per header parameter scalar, averaged over
// `accumulation_steps` minibatches of the local data. Backbone parameters do
// not contribute keys; the neuron mask enters through its effect only.
ImportanceSet param_importance(HeaderNet& model, const Dataset& local, int accumulation_steps,
                               int batch_size = 16, std::uint64_t seed = 1,
                               const std::string& stream = "importance");

struct SimilarityMatrix {
  Eigen::MatrixXd raw;   // w_ij = 1 / (1 + dist_ij); diagonal exactly 1
  Eigen::MatrixXd sym;   // sqrt(w_ij * w_ji); exactly symmetric
  Eigen::MatrixXd norm;  // row softmax of sym; rows sum to 1, entries > 0
};

// Raw pairwise similarity from data sketches. The distance of each unordered
// pair is solved once, so the raw matrix is symmetric by construction here;
// normalize_similarity symmetrizes whatever it is given.
Eigen::MatrixXd similarity_from_sketches(const std::vector<DataSketch>& sketches, int p_order = 1);

SimilarityMatrix normalize_similarity(const Eigen::MatrixXd& raw);

// Q'_n = sum_i norm(n, i) * Q_i. Every set must carry exactly the same keys;
// divergent paths are named in the error.
ImportanceSet aggregate_importance(const std::vector<ImportanceSet>& sets,
                                   const Eigen::MatrixXd& norm, int n);

// Joint importance of a tail neuron = summed scores of its fan-in column,
// its bias and its fan-out row. The `discard` least important of the
// still-active neurons get their mask entry zeroed; neurons masked earlier
// stay masked, so masks only ever grow.
void refine_header(HeaderNet& model, const ImportanceSet& agg, int discard);

std::vector<int> masked_neurons(const HeaderNet& model);  // ascending ids

// Feature rows for `sample_size` points drawn from the device's data with
// its seeded stream, embedded by the shared extractor's CLS output.
DataSketch extract_sketch(TransformerNet& extractor, const Dataset& data, int sample_size,
                          std::uint64_t seed, const std::string& stream);

struct PersonalizeDevice {
  std::string device_id;
  Dataset data;
};

struct PersonalizeConfig {
  int rounds = 2;
  int discard_per_round = 1;
  int local_steps = 10;       // header-only SGD steps before each upload
  double lr = 0.05;
  int batch_size = 8;
  int accumulation_steps = 4;
  int sketch_size = 16;
  int p_order = 1;
  std::uint64_t seed = 1;
  std::vector<std::pair<int, int>> absences;  // (round, device index) sits that round out
};

struct PersonalizeResult {
  SimilarityMatrix similarity;
  std::vector<HeaderNet> headers;           // per device, refined in place
  std::vector<ImportanceSet> last_uploads;  // most recent Q_n each device sent
  std::vector<double> round_loss;           // mean local training loss per round
  std::vector<double> final_accuracy;       // on each device's own data
  int rounds_run = 0;
};

// Fine header customization for one cluster: the similarity weights are
// computed once up front, then every round each present device trains its
// header locally, uploads importance, receives the weighted aggregate and
// discards its least important neurons. Devices absent from a round are
// skipped and the weight rows are renormalized over those present.
// Round-by-round taps on the refinement loop. The full simulator mirrors each
// exchange onto its transport through these; standalone runs leave it null.
struct PersonalizeObserver {
  virtual ~PersonalizeObserver() = default;
  virtual void on_upload(int round, const std::string& device_id, const ImportanceSet& q) = 0;
  virtual void on_distribute(int round, const std::string& device_id, const ImportanceSet& agg) = 0;
};

PersonalizeResult run_phase2_stage2(const TransformerNet& backbone, const HeaderDAG& coarse,
                                    const OperationSet& ops, const NasConfig& ncfg,
                                    TransformerNet& extractor,
                                    const std::vector<PersonalizeDevice>& devices,
                                    const PersonalizeConfig& cfg,
                                    PersonalizeObserver* observer = nullptr);

}  // namespace acme
