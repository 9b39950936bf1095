#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "acme/network.hpp"

namespace acme {

struct Dataset {
  TensorBuf x;               // [N, patches*patch_dim]
  std::vector<int> labels;   // size N
  int num_classes = 0;
  int patches = 0;
  int patch_dim = 0;

  int size() const { return x.shape.empty() ? 0 : x.shape[0]; }
  Batch batch(int begin, int count) const;
  Batch all() const { return batch(0, size()); }
};

struct SyntheticSpec {
  int num_classes = 8;
  int patches = 16;
  int patch_dim = 8;
  double class_sep = 1.0;   // scale of class mean vectors
  double noise = 0.35;      // per-feature noise std around the class mean
};

// Class-conditional Gaussians over patch features. Class means depend only on
// (seed, class), so every consumer of a class sees the same distribution; the
// sample stream is keyed separately so device draws are independent.
Dataset make_class_gaussian(const SyntheticSpec& spec, const std::vector<int>& class_pool, int n,
                            std::uint64_t seed, const std::string& stream);

// External loader hook: CSV rows "label,f0,f1,...". Feature count must equal
// patches*patch_dim.
Dataset load_dataset_csv(const std::string& file, int patches, int patch_dim, int num_classes);

// Deterministic index shuffler for minibatching.
std::vector<int> shuffled_indices(int n, std::uint64_t seed, const std::string& stream, int round);
Batch gather_batch(const Dataset& d, const std::vector<int>& idx, int begin, int count);

// Serialized size of the raw set, used for the centralized-upload counterfactual.
std::int64_t serialized_bytes(const Dataset& d);

struct TrainOptions {
  int steps = 100;
  double lr = 0.1;
  int batch_size = 16;
  std::uint64_t seed = 1;
  std::string stream = "train";
};

// Plain minibatch SGD on cross entropy; returns the per-step loss trace.
std::vector<double> train_ce(Network& net, const Dataset& data, const TrainOptions& opts);

}  // namespace acme
