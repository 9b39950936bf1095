#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "acme/dataset.hpp"
#include "acme/transformer.hpp"

namespace acme {

// One family member: width fraction applied to heads/hidden/ffn, first-d-layers depth.
struct WidthDepthSpec {
  double w = 1.0;
  int d = 1;
};

// Per-layer scores; higher means removing the unit hurts the loss more.
// Head h of layer l: |<dF/dO_h, O_h>| summed over probe batches; neurons use
// the ffn hidden activation the same way. Scores are nonnegative by
// construction and zero exactly when the unit's output or gradient vanishes.
struct ImportanceTable {
  std::vector<std::vector<double>> head_scores;    // [layer][head]
  std::vector<std::vector<double>> neuron_scores;  // [layer][neuron]
};

ImportanceTable head_importance(TransformerNet& model, const Dataset& probe, int batch_size);

// descending score, ties by lower index first
std::vector<int> importance_order(const std::vector<double>& scores);

// Returns a copy of the model with heads and ffn units reorered to descending
// importance per layer. Reordering permutes qkv/out projections and ffn rows
// consistently, so the w=1 function is unchanged up to summation order.
// Width-w variants then keep the first ceil(w*count) units, which makes the
// kept sets nested across any ascending fraction menu.
TransformerNet derive_variable_width(const TransformerNet& model, const ImportanceTable& imp,
                                     const std::vector<double>& keep_fractions);

// Architecture of the (w, d) family member: first d layers, head count /
// hidden width / ffn width all scaled by ceil(w * x). Defined only on the
// reference model.
TransformerConfig delta_transform(const TransformerNet& reference, const WidthDepthSpec& spec);

// Analytic size d*w*(H + 2*xi_h*xi_f); H is the full-width per-layer head
// parameter count supplied by the caller.
double analytic_param_count(double w, int d, double H, double xi_h, double xi_f);

// Side-by-side analytic and instantiated counts. The analytic formula models
// per-layer attention and ffn weight matrices only; everything it omits is
// listed here explicitly so the gap is auditable. residual is whatever is
// left after removing the enumerated exclusions (width rounding and the
// quadratic effect of scaling the hidden width); it is 0 at w = 1.
struct ZetaReport {
  double analytic = 0.0;
  std::int64_t exact_total = 0;       // instantiated backbone parameter count
  std::int64_t attention_weights = 0;
  std::int64_t ffn_weights = 0;
  std::int64_t excluded_biases = 0;
  std::int64_t excluded_norms = 0;
  std::int64_t excluded_embeddings = 0;
  double residual = 0.0;
};

ZetaReport zeta_report(const TransformerConfig& reference_cfg, const WidthDepthSpec& spec);

struct DistillationConfig {
  double lambda1 = 1.0;  // logit term weight
  double lambda2 = 1.0;  // embedding term weight
  int steps = 200;
  double lr = 0.05;
  int batch_size = 16;
  std::uint64_t seed = 1;
};

struct DistillResult {
  TransformerNet student;
  std::vector<double> loss_trace;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

// Trains a (w, d) student against a width-adjustable teacher. The teacher is
// evaluated masked to the student's width so targets live in the student's
// function class; hidden states pair student layer i with teacher layer
// ceil(i * d_t / d_s) and compare the first student-width channels. The
// student starts from the teacher's corresponding weight slices.
DistillResult distill(const TransformerNet& teacher, const WidthDepthSpec& spec,
                      const DistillationConfig& cfg, const Dataset& data);

struct FamilyMember {
  WidthDepthSpec spec;
  ZetaReport size;
  double distill_loss = 0.0;
  std::string weights_file;
};

struct FamilyManifest {
  std::uint64_t reference_hash = 0;
  TransformerConfig reference_cfg;
  std::vector<FamilyMember> members;
};

// Distills every (w, d) in the menu grid and writes weights plus a JSON
// manifest under out_dir.
FamilyManifest build_family(const TransformerNet& reference, const ImportanceTable& imp,
                            const std::vector<double>& widths, const std::vector<int>& depths,
                            const DistillationConfig& dcfg, const Dataset& data,
                            const std::string& out_dir);

void save_manifest(const FamilyManifest& m, const std::string& file);
FamilyManifest load_manifest(const std::string& file);

// Instantiates one manifest member with its distilled weights.
TransformerNet load_family_member(const FamilyManifest& m, const FamilyMember& member,
                                  const std::string& dir);

}  // namespace acme
