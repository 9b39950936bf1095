#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "acme/network.hpp"

namespace acme {

// Width applies to head count, hidden width and ffn width via ceil(w*x);
// head_dim stays fixed across a family so narrow variants remain composable.
struct TransformerConfig {
  int depth = 2;
  double width_fraction = 1.0;
  int num_heads = 4;
  int hidden_dim = 16;
  int ffn_dim = 32;
  int head_dim = 4;
  int num_patches = 16;
  int patch_dim = 8;
  int num_classes = 8;
  std::uint64_t seed = 1;

  int eff_heads() const { return eff(num_heads); }
  int eff_hidden() const { return eff(hidden_dim); }
  int eff_ffn() const { return eff(ffn_dim); }
  int seq_len() const { return num_patches + 1; }

  void validate() const;
  std::string canonical() const;
  std::uint64_t hash() const;

 private:
  int eff(int x) const;
};

class TransformerNet : public Network {
 public:
  TransformerNet(TransformerConfig cfg, bool reference_origin);

  ParamStore& params() override { return params_; }
  using Network::params;  // keep the base const accessor visible
  NodeRef build_logits(Tape& t, const TensorBuf& x) override;

  struct Features {
    NodeRef embed;                    // transformer input [B*S, C]
    NodeRef seq;                      // final norm output [B*S, C]
    NodeRef penult;                   // one layer before the top (embed if depth == 1)
    NodeRef cls;                      // [B, C]
    std::vector<NodeRef> layer_outs;  // post-residual per layer
    std::vector<NodeRef> head_outs;   // per layer, [B*S, H*Dh], pre-mask
    std::vector<NodeRef> ffn_hidden;  // per layer, [B*S, F], pre-mask
    std::vector<NodeRef> attn_probs;  // per layer, [B*H, S, S]
    int B = 0, S = 0;
  };
  Features build_features(Tape& t, const TensorBuf& x);
  NodeRef attach_header(Tape& t, NodeRef cls);

  const TransformerConfig& config() const { return cfg_; }
  bool reference_origin() const { return reference_origin_; }
  // populated by the most recent build (valid while its tape is alive)
  const Features& last_features() const { return last_; }

  void set_head_mask(int layer, const Eigen::VectorXd& m);
  void set_neuron_mask(int layer, const Eigen::VectorXd& m);
  const Eigen::VectorXd& head_mask(int layer) const { return head_masks_.at(layer); }
  const Eigen::VectorXd& neuron_mask(int layer) const { return neuron_masks_.at(layer); }
  // keep the first ceil(keep*H) heads and ceil(keep*F) ffn units per layer
  void mask_to_width(double keep);
  void clear_masks();

  std::int64_t backbone_param_count() const;
  std::int64_t header_param_count() const;

 private:
  void init_params();

  TransformerConfig cfg_;
  ParamStore params_;
  bool reference_origin_;
  std::vector<Eigen::VectorXd> head_masks_;
  std::vector<Eigen::VectorXd> neuron_masks_;
  Features last_;
};

inline bool is_header_path(const std::string& path) { return path.rfind("head/", 0) == 0; }

TransformerNet make_reference_model(const TransformerConfig& cfg);

}  // namespace acme
