#include "acme/param_store.hpp"

#include "acme/rng.hpp"

namespace acme {

TensorBuf& ParamStore::get_or_create(const std::string& path, const std::vector<int>& shape,
                                     Init init) {
  auto it = params_.find(path);
  if (it != params_.end()) {
    if (!same_shape(it->second.shape, shape))
      throw ShapeError("param '" + path + "': existing shape " + shape_str(it->second.shape) +
                       " vs requested " + shape_str(shape));
    return it->second;
  }
  TensorBuf t = TensorBuf::zeros(shape);
  switch (init) {
    case Init::Zeros:
      break;
    case Init::Ones:
      t.values.setOnes();
      break;
    case Init::TruncNormal002: {
      CounterRng rng(seed_, path);
      for (std::int64_t i = 0; i < t.size(); ++i)
        t.values[i] = rng.trunc_normal(0.02, -0.04, 0.04);
      break;
    }
  }
  return params_.emplace(path, std::move(t)).first->second;
}

TensorBuf& ParamStore::at(const std::string& path) {
  auto it = params_.find(path);
  if (it == params_.end()) throw StateError("param '" + path + "' not found");
  return it->second;
}

const TensorBuf& ParamStore::at(const std::string& path) const {
  auto it = params_.find(path);
  if (it == params_.end()) throw StateError("param '" + path + "' not found");
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& [path, t] : params_) t.grad.resize(0);
}

void ParamStore::accumulate_grad(const std::string& path, const Eigen::VectorXd& g) {
  TensorBuf& t = at(path);
  if (g.size() != t.size())
    throw ShapeError("grad for '" + path + "': size " + std::to_string(g.size()) + " vs " +
                     std::to_string(t.size()));
  if (t.grad.size() == 0) t.grad = Eigen::VectorXd::Zero(t.size());
  t.grad += g;
}

void ParamStore::freeze_prefix(const std::string& prefix) { frozen_prefixes_.push_back(prefix); }

bool ParamStore::is_frozen(const std::string& path) const {
  for (const std::string& p : frozen_prefixes_)
    if (path.compare(0, p.size(), p) == 0) return true;
  return false;
}

std::int64_t ParamStore::total_params() const {
  std::int64_t n = 0;
  for (const auto& [path, t] : params_) n += t.size();
  return n;
}

void sgd_step(ParamStore& store, double lr) {
  for (auto& [path, t] : store.entries()) {
    if (t.grad.size() == 0 || store.is_frozen(path)) continue;
    t.values -= lr * t.grad;
    if (!all_finite(t.values)) throw NumericError("sgd_step: non-finite update for '" + path + "'");
  }
}

}  // namespace acme
