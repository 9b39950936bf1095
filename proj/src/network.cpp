#include "acme/network.hpp"

#include <algorithm>

#include "acme/rng.hpp"

namespace acme {

TensorBuf Network::forward(const TensorBuf& x, bool cache) {
  if (cache) {
    tape_.emplace();
    out_ = build_logits(*tape_, x);
    return tape_->val(out_);
  }
  tape_.reset();
  out_ = NodeRef{};
  Tape t;
  NodeRef out = build_logits(t, x);
  return t.val(out);
}

void Network::backward(const Eigen::VectorXd& logits_grad) {
  if (!tape_ || !out_.valid())
    throw StateError("backward before forward: no cached activations (forward with cache=true)");
  tape_->backward(out_, logits_grad);
}

void Network::drop_cache() {
  tape_.reset();
  out_ = NodeRef{};
}

double eval_ce_loss(Network& net, const Batch& batch) {
  Tape t;
  NodeRef logits = net.build_logits(t, batch.x);
  NodeRef loss = t.cross_entropy(logits, batch.labels);
  return t.val(loss).values[0];
}

double eval_accuracy(Network& net, const Batch& batch) {
  const TensorBuf logits = net.forward(batch.x);
  ConstMatMap lm = logits.as2d();
  int hits = 0;
  for (std::int64_t i = 0; i < lm.rows(); ++i) {
    Eigen::Index arg;
    lm.row(i).maxCoeff(&arg);
    if (static_cast<int>(arg) == batch.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(lm.rows());
}

double ce_backward(Network& net, const Batch& batch) {
  Tape t;
  NodeRef logits = net.build_logits(t, batch.x);
  NodeRef loss = t.cross_entropy(logits, batch.labels);
  double v = t.val(loss).values[0];
  t.backward(loss);
  return v;
}

GradCheckReport grad_check(Network& net, const Batch& batch, const GradCheckOptions& opts) {
  ParamStore& store = net.params();
  store.zero_grad();
  ce_backward(net, batch);

  // flat list of (path, size) so probes can be drawn uniformly over elements
  std::vector<std::pair<std::string, std::int64_t>> spans;
  std::int64_t total = 0;
  for (const auto& [path, t] : store.entries()) {
    spans.emplace_back(path, t.size());
    total += t.size();
  }
  if (total == 0) throw StateError("grad_check: empty parameter store");

  CounterRng rng(opts.seed, "grad_check");
  GradCheckReport rep;
  for (int p = 0; p < opts.probes; ++p) {
    std::int64_t flat = static_cast<std::int64_t>(rng.next_u64() % static_cast<std::uint64_t>(total));
    std::size_t si = 0;
    while (flat >= spans[si].second) {
      flat -= spans[si].second;
      ++si;
    }
    const std::string& path = spans[si].first;
    TensorBuf& t = store.at(path);
    double saved = t.values[flat];
    t.values[flat] = saved + opts.step;
    double up = eval_ce_loss(net, batch);
    t.values[flat] = saved - opts.step;
    double down = eval_ce_loss(net, batch);
    t.values[flat] = saved;

    GradProbe probe;
    probe.path = path;
    probe.index = flat;
    probe.fd = (up - down) / (2.0 * opts.step);
    probe.analytic = t.grad.size() ? t.grad[flat] : 0.0;
    if (opts.grad_hook) probe.analytic = opts.grad_hook(path, flat, probe.analytic);
    double denom = std::max({std::abs(probe.analytic), std::abs(probe.fd), 1e-6});
    probe.rel_err = std::abs(probe.analytic - probe.fd) / denom;
    if (probe.rel_err > rep.max_rel_err) {
      rep.max_rel_err = probe.rel_err;
      rep.worst_path = path;
    }
    if (probe.rel_err > opts.tol) rep.failures.push_back(probe);
    rep.probes.push_back(std::move(probe));
  }
  return rep;
}

}  // namespace acme
