#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "acme/tape.hpp"

namespace acme {

struct Batch {
  TensorBuf x;
  std::vector<int> labels;
};

// A network is a parameter store plus a graph builder. forward(cache=true)
// retains the tape so backward() and intermediate-gradient reads work;
// forward(cache=false) keeps nothing.
class Network {
 public:
  Network() = default;
  // copies never carry the activation cache; the tape is tied to one pass
  Network(const Network&) noexcept {}
  Network& operator=(const Network&) noexcept {
    tape_.reset();
    out_ = NodeRef{};
    return *this;
  }
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;
  virtual ~Network() = default;
  virtual ParamStore& params() = 0;
  const ParamStore& params() const { return const_cast<Network*>(this)->params(); }
  virtual NodeRef build_logits(Tape& t, const TensorBuf& x) = 0;

  TensorBuf forward(const TensorBuf& x, bool cache = false);
  // Seeds d(loss)/d(logits); StateError unless a cached forward precedes it.
  void backward(const Eigen::VectorXd& logits_grad);

  Tape* cached_tape() { return tape_ ? &*tape_ : nullptr; }
  NodeRef cached_logits() const { return out_; }
  void drop_cache();

 private:
  std::optional<Tape> tape_;
  NodeRef out_{};
};

double eval_ce_loss(Network& net, const Batch& batch);
double eval_accuracy(Network& net, const Batch& batch);
// Builds loss, runs backward, leaves gradients accumulated in params().
double ce_backward(Network& net, const Batch& batch);

struct GradProbe {
  std::string path;
  std::int64_t index = 0;
  double analytic = 0.0;
  double fd = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_path;
  std::vector<GradProbe> probes;
  std::vector<GradProbe> failures;
  bool ok(double tol) const { return max_rel_err <= tol; }
};

struct GradCheckOptions {
  double tol = 1e-4;
  double step = 1e-5;
  int probes = 200;
  std::uint64_t seed = 0;
  // test hook: transform an analytic gradient before comparison (fault injection)
  std::function<double(const std::string&, std::int64_t, double)> grad_hook;
};

// Central finite differences of the cross-entropy loss against the analytic
// gradients, over a random sample of parameter elements. Relative error uses
// |a - f| / max(|a|, |f|, 1e-6) so that near-zero gradients are judged on an
// absolute scale commensurate with the fd truncation error.
GradCheckReport grad_check(Network& net, const Batch& batch, const GradCheckOptions& opts = {});

}  // namespace acme
