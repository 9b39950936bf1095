#include "acme/dataset.hpp"

#include <fstream>
#include <sstream>

#include "acme/rng.hpp"

namespace acme {

Batch Dataset::batch(int begin, int count) const {
  if (begin < 0 || count <= 0 || begin + count > size())
    throw StateError("dataset batch [" + std::to_string(begin) + "," +
                     std::to_string(begin + count) + ") of " + std::to_string(size()));
  int fw = patches * patch_dim;
  Batch b;
  b.x = TensorBuf::zeros({count, fw});
  b.x.values = x.values.segment(std::int64_t(begin) * fw, std::int64_t(count) * fw);
  b.labels.assign(labels.begin() + begin, labels.begin() + begin + count);
  return b;
}

Dataset make_class_gaussian(const SyntheticSpec& spec, const std::vector<int>& class_pool, int n,
                            std::uint64_t seed, const std::string& stream) {
  if (class_pool.empty()) throw ConfigError("make_class_gaussian: empty class pool");
  for (int c : class_pool)
    if (c < 0 || c >= spec.num_classes)
      throw ConfigError("make_class_gaussian: class " + std::to_string(c) + " out of range");
  int fw = spec.patches * spec.patch_dim;
  Dataset d;
  d.num_classes = spec.num_classes;
  d.patches = spec.patches;
  d.patch_dim = spec.patch_dim;
  d.x = TensorBuf::zeros({n, fw});
  d.labels.resize(n);

  std::vector<Eigen::VectorXd> means(spec.num_classes);
  for (int c : class_pool) {
    CounterRng mr(seed, "classmean/" + std::to_string(c));
    means[c].resize(fw);
    for (int i = 0; i < fw; ++i) means[c][i] = spec.class_sep * mr.normal();
  }

  CounterRng sr(seed, "samples/" + stream);
  for (int i = 0; i < n; ++i) {
    int c = class_pool[sr.uniform_int(static_cast<std::uint32_t>(class_pool.size()))];
    d.labels[i] = c;
    for (int j = 0; j < fw; ++j)
      d.x.values[std::int64_t(i) * fw + j] = means[c][j] + spec.noise * sr.normal();
  }
  return d;
}

Dataset load_dataset_csv(const std::string& file, int patches, int patch_dim, int num_classes) {
  std::ifstream is(file);
  if (!is) throw ConfigError("dataset: cannot open '" + file + "'");
  int fw = patches * patch_dim;
  std::vector<double> vals;
  std::vector<int> labels;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cellv;
    std::vector<double> row;
    while (std::getline(ss, cellv, ',')) {
      try {
        row.push_back(std::stod(cellv));
      } catch (const std::exception&) {
        throw ConfigError("dataset '" + file + "' line " + std::to_string(lineno) +
                          ": bad number '" + cellv + "'");
      }
    }
    if (static_cast<int>(row.size()) != fw + 1)
      throw ConfigError("dataset '" + file + "' line " + std::to_string(lineno) + ": expected " +
                        std::to_string(fw + 1) + " fields, got " + std::to_string(row.size()));
    int label = static_cast<int>(row[0]);
    if (label < 0 || label >= num_classes)
      throw ConfigError("dataset '" + file + "' line " + std::to_string(lineno) + ": label " +
                        std::to_string(label) + " out of range");
    labels.push_back(label);
    vals.insert(vals.end(), row.begin() + 1, row.end());
  }
  Dataset d;
  d.num_classes = num_classes;
  d.patches = patches;
  d.patch_dim = patch_dim;
  d.labels = std::move(labels);
  d.x = TensorBuf::zeros({static_cast<int>(d.labels.size()), fw});
  for (std::size_t i = 0; i < vals.size(); ++i) d.x.values[i] = vals[i];
  return d;
}

std::vector<int> shuffled_indices(int n, std::uint64_t seed, const std::string& stream,
                                  int round) {
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  CounterRng rng(seed, "shuffle/" + stream + "/" + std::to_string(round));
  for (int i = n - 1; i > 0; --i) {
    int j = static_cast<int>(rng.uniform_int(static_cast<std::uint32_t>(i + 1)));
    std::swap(idx[i], idx[j]);
  }
  return idx;
}

Batch gather_batch(const Dataset& d, const std::vector<int>& idx, int begin, int count) {
  int fw = d.patches * d.patch_dim;
  Batch b;
  b.x = TensorBuf::zeros({count, fw});
  b.labels.resize(count);
  for (int i = 0; i < count; ++i) {
    int src = idx[(begin + i) % idx.size()];
    b.x.values.segment(std::int64_t(i) * fw, fw) = d.x.values.segment(std::int64_t(src) * fw, fw);
    b.labels[i] = d.labels[src];
  }
  return b;
}

std::int64_t serialized_bytes(const Dataset& d) {
  // raw excursion cost of shipping the set: one f64 per feature plus a 4-byte label
  return static_cast<std::int64_t>(d.size()) * (std::int64_t(d.patches) * d.patch_dim * 8 + 4);
}

std::vector<double> train_ce(Network& net, const Dataset& data, const TrainOptions& opts) {
  if (data.size() == 0) throw ConfigError("train_ce: empty dataset");
  int bs = std::min(opts.batch_size, data.size());
  int per_epoch = (data.size() + bs - 1) / bs;
  std::vector<double> trace;
  trace.reserve(opts.steps);
  std::vector<int> idx;
  for (int step = 0; step < opts.steps; ++step) {
    if (step % per_epoch == 0) idx = shuffled_indices(data.size(), opts.seed, opts.stream, step / per_epoch);
    Batch b = gather_batch(data, idx, (step % per_epoch) * bs, bs);
    net.params().zero_grad();
    trace.push_back(ce_backward(net, b));
    sgd_step(net.params(), opts.lr);
  }
  return trace;
}

}  // namespace acme
