#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "acme/biguint.hpp"
#include "acme/dataset.hpp"
#include "acme/rng.hpp"
#include "acme/transformer.hpp"

namespace acme {

// Primitive ops a block can apply to a feature map. Every op keeps the
// channel count; downsample halves the spatial dims, the rest keep them.
enum class HeaderOp { Conv1, Conv3, Conv5, Identity, Downsample, AvgPool, MaxPool };

const char* op_name(HeaderOp op);

struct OperationSet {
  std::vector<HeaderOp> ops;
  int version = 1;

  static OperationSet default_set();  // the seven ops above, in order
  void validate() const;
  int size() const { return (int)ops.size(); }
};

// One block: two input selectors, two op selectors, outputs are added.
// Selector 0 is the module input (the adapted backbone map on the first
// repeat, the previous repeat's output after that), selector 1 the adapted
// penultimate-layer map, selector 2+j the output of block j+1.
struct BlockSpec {
  int i1 = 0;
  int i2 = 0;
  int o1 = 0;
  int o2 = 0;
};

struct HeaderDAG {
  std::vector<BlockSpec> blocks;
  int repeats = 1;
  int opset_version = 1;

  void validate(int opset_size) const;  // selector ranges, repeats >= 1
  std::string canonical() const;        // compact text form, for hashing/logs
};

bool operator==(const HeaderDAG& a, const HeaderDAG& b);

void save_dag(const HeaderDAG& dag, const std::string& file);
HeaderDAG load_dag(const std::string& file);

// Number of distinct block lists for B blocks over an op menu of the given
// size: the product over blocks of (inputs)^2 * (ops)^2. Exact at any size.
BigUint search_space_size(int B, int opset_size);

// Fixed header dimensions; independent of which DAG is searched.
struct NasConfig {
  int channels = 8;    // feature-map width inside the header
  int mlp_hidden = 16; // tail MLP hidden units
  int repeats = 1;     // module repetitions (not searched)
  int lstm_hidden = 100;
  int embed_dim = 16;
  double baseline_momentum = 0.05;
};

// Intermediate nodes of one built header, for inspection in audits.
struct HeaderTrace {
  std::vector<std::vector<NodeRef>> repeat_nodes;  // per repeat: inputs then block outputs
  NodeRef pooled;  // [B, channels]
  NodeRef tail_in; // pooled map concatenated with the CLS token
  NodeRef logits;
};

// Builds the header graph for `dag` on top of the backbone's feature maps,
// creating any missing parameters in the backbone's store under "hdr/".
// Parameters are keyed by (repeat, block, position, op), so two DAGs that
// agree on a selection share those weights exactly.
NodeRef build_dag_logits(Tape& t, TransformerNet& backbone, const HeaderDAG& dag,
                         const OperationSet& ops, const NasConfig& ncfg, const TensorBuf& x,
                         HeaderTrace* trace = nullptr);

// A backbone with a DAG header grafted on; owns a private copy of both.
class HeaderNet : public Network {
 public:
  HeaderNet(const TransformerNet& backbone, HeaderDAG dag, OperationSet ops, NasConfig ncfg);

  ParamStore& params() override { return backbone_.params(); }
  using Network::params;
  NodeRef build_logits(Tape& t, const TensorBuf& x) override;

  const HeaderDAG& dag() const { return dag_; }
  const TransformerConfig& backbone_config() const { return backbone_.config(); }
  std::int64_t header_param_count() const;  // "hdr/" entries only

 private:
  TransformerNet backbone_;
  HeaderDAG dag_;
  OperationSet ops_;
  NasConfig ncfg_;
};

HeaderNet instantiate_header(const TransformerNet& backbone, const HeaderDAG& dag,
                             const OperationSet& ops, const NasConfig& ncfg);

// Loss / accuracy of one candidate header under the shared weight bundle.
double dag_ce_loss(TransformerNet& shared, const HeaderDAG& dag, const OperationSet& ops,
                   const NasConfig& ncfg, const Batch& batch);
double dag_accuracy(TransformerNet& shared, const HeaderDAG& dag, const OperationSet& ops,
                    const NasConfig& ncfg, const Batch& batch);

// Recurrent policy over the 4B block decisions. Decision order per block:
// input 1, input 2, op 1, op 2; each step feeds the previous choice back in
// through a per-step embedding table. Output heads start at zero, so the
// initial policy is exactly uniform over every support.
class Controller {
 public:
  Controller(int num_blocks, const OperationSet& ops, const NasConfig& ncfg, std::uint64_t seed);

  struct Sample {
    HeaderDAG dag;
    std::vector<int> decisions;  // length 4B
    double log_prob = 0.0;
    double value = 0.0;  // sigmoid reward estimate from the value head
  };

  Sample sample(CounterRng& rng);
  Sample decode_argmax();  // temperature -> 0

  // log pi(decisions) under the current parameters
  double log_prob(const std::vector<int>& decisions);
  // flat gradient of log pi(decisions) over all policy parameters
  Eigen::VectorXd grad_log_prob(const std::vector<int>& decisions);
  std::vector<std::string> policy_param_paths() const;

  double baseline() const { return baseline_; }
  void set_baseline(double b) { baseline_ = b; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  int num_blocks() const { return num_blocks_; }
  std::vector<int> supports() const;  // per-decision choice counts
  int repeats() const { return ncfg_.repeats; }

 private:
  friend void update_controller(Controller&, const std::vector<Controller::Sample>&,
                                const std::vector<double>&, double);

  struct Rollout {
    std::vector<int> decisions;
    NodeRef log_prob;
    NodeRef value;
  };
  // teacher-forced when `forced` is given, sampled otherwise
  Rollout roll(Tape& t, const std::vector<int>* forced, CounterRng* rng);
  HeaderDAG to_dag(const std::vector<int>& decisions) const;

  int num_blocks_;
  int opset_size_;
  NasConfig ncfg_;
  ParamStore params_;
  double baseline_ = 0.0;
};

// One REINFORCE step: descend -(sum_i (R_i - baseline) * log pi_i), then move
// the baseline toward mean(R) and fit the value head toward the rewards
// (value-head error never reaches the recurrent core). Rewards and samples
// must line up index by index.
void update_controller(Controller& c, const std::vector<Controller::Sample>& samples,
                       const std::vector<double>& rewards, double lr);

struct SharedTrainConfig {
  int steps = 100;
  int samples_per_step = 4;  // Monte Carlo width M
  int batch_size = 16;
  double lr = 0.05;
  std::uint64_t seed = 1;
  std::string stream = "nas-shared";
};

struct SharedTrainStats {
  int steps = 0;
  int skipped = 0;  // children dropped for non-finite loss
  std::vector<double> loss_trace;  // per-step mean child loss
};

// Trains the shared bundle (header slots AND the backbone; nothing frozen)
// on children sampled from the fixed controller policy. Per step the M child
// gradients are averaged; a child with non-finite loss is skipped and logged.
SharedTrainStats train_shared_weights(TransformerNet& shared, const OperationSet& ops,
                                      const NasConfig& ncfg, Controller& controller,
                                      const Dataset& data, const SharedTrainConfig& cfg);

struct NasSearchConfig {
  OperationSet ops = OperationSet::default_set();
  NasConfig header;
  int blocks = 2;             // DAG size the controller searches over
  int alternations = 6;       // search budget: shared-weight rounds + policy rounds
  int shared_steps = 30;      // weight steps per alternation
  int shared_samples = 4;     // Monte Carlo width per weight step
  int controller_samples = 8; // architectures scored per policy round
  double shared_lr = 0.05;
  double controller_lr = 0.05;
  int batch_size = 16;
  double holdout_fraction = 0.25;  // rear slice of edge data, reward measurement
  std::uint64_t seed = 1;
};

struct NasSearchResult {
  HeaderDAG dag;           // argmax decode after the final alternation
  double holdout_accuracy = 0.0;
  std::vector<double> reward_trace;  // mean sampled reward per alternation
  int alternations_run = 0;
};

// Alternates shared-weight training and controller updates within the
// budget, then argmax-decodes the policy. Budget 0 returns the decode of the
// freshly initialized controller. The shared bundle is trained in place.
NasSearchResult run_phase2_stage1(const std::string& edge_id, TransformerNet& backbone,
                                  const Dataset& edge_data, const NasSearchConfig& cfg);

}  // namespace acme
