#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "acme/tensor.hpp"

namespace acme {

enum class Init { Zeros, Ones, TruncNormal002 };

// Parameters keyed by stable path names ("layer0/attn/wq", ...). Init draws
// come from a counter stream keyed on (store seed, path), so creation order
// and the presence of unrelated parameters never change a path's init values.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed) : seed_(seed) {}

  TensorBuf& get_or_create(const std::string& path, const std::vector<int>& shape, Init init);

  bool has(const std::string& path) const { return params_.count(path) != 0; }
  TensorBuf& at(const std::string& path);
  const TensorBuf& at(const std::string& path) const;

  std::map<std::string, TensorBuf>& entries() { return params_; }
  const std::map<std::string, TensorBuf>& entries() const { return params_; }

  void zero_grad();
  void accumulate_grad(const std::string& path, const Eigen::VectorXd& g);

  void freeze_prefix(const std::string& prefix);
  void clear_frozen() { frozen_prefixes_.clear(); }
  bool is_frozen(const std::string& path) const;

  std::int64_t total_params() const;
  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::map<std::string, TensorBuf> params_;
  std::vector<std::string> frozen_prefixes_;
};

// theta <- theta - lr * grad for every unfrozen entry that has a gradient.
void sgd_step(ParamStore& store, double lr);

}  // namespace acme
