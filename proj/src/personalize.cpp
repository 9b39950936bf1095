#include "acme/personalize.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "json.hpp"

namespace acme {

std::string importance_to_json(const ImportanceSet& s) {
  nlohmann::json j;
  j["device_id"] = s.device_id;
  j["round"] = s.round;
  j["scores"] = nlohmann::json::object();
  for (const auto& [path, q] : s.scores) j["scores"][path] = q;
  return j.dump();
}

ImportanceSet importance_from_json(const std::string& text) {
  try {
    nlohmann::json j = nlohmann::json::parse(text);
    ImportanceSet s;
    s.device_id = j.at("device_id").get<std::string>();
    s.round = j.at("round").get<int>();
    for (const auto& [path, q] : j.at("scores").items()) s.scores[path] = q.get<double>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("importance set json: ") + e.what());
  }
}

ImportanceSet param_importance(HeaderNet& model, const Dataset& local, int accumulation_steps,
                               int batch_size, std::uint64_t seed, const std::string& stream) {
  if (local.size() == 0) throw ConfigError("param_importance: empty local data");
  if (accumulation_steps < 1) throw ConfigError("param_importance: need at least one batch");

  int bs = std::min(batch_size, local.size());
  int per_epoch = (local.size() + bs - 1) / bs;
  std::vector<int> idx;
  std::map<std::string, Eigen::VectorXd> acc;

  for (int step = 0; step < accumulation_steps; ++step) {
    if (step % per_epoch == 0)
      idx = shuffled_indices(local.size(), seed, stream, step / per_epoch);
    Batch b = gather_batch(local, idx, (step % per_epoch) * bs, bs);

    model.params().zero_grad();
    Tape t;
    t.backward(t.cross_entropy(model.build_logits(t, b.x), b.labels));

    for (const auto& [path, buf] : model.params().entries()) {
      if (path.rfind("hdr/", 0) != 0 || path == "hdr/mlp/mask") continue;
      Eigen::VectorXd q = buf.grad.size()
                              ? Eigen::VectorXd((buf.grad.array() * buf.values.array()).square())
                              : Eigen::VectorXd(Eigen::VectorXd::Zero(buf.size()));
      auto it = acc.find(path);
      if (it == acc.end())
        acc[path] = q;
      else
        it->second += q;
    }
  }

  ImportanceSet out;
  for (const auto& [path, sum] : acc) {
    for (std::int64_t i = 0; i < sum.size(); ++i) {
      double q = sum[i] / accumulation_steps;
      if (!std::isfinite(q))
        throw NumericError("param_importance: non-finite importance at " + path);
      out.scores[path + "[" + std::to_string(i) + "]"] = q;
    }
  }
  return out;
}

Eigen::MatrixXd similarity_from_sketches(const std::vector<DataSketch>& sketches, int p_order) {
  if (sketches.empty()) throw ConfigError("similarity: no sketches");
  int n = (int)sketches.size();
  Eigen::MatrixXd w(n, n);
  for (int i = 0; i < n; ++i) {
    w(i, i) = 1.0;
    for (int j = i + 1; j < n; ++j) {
      double d = wasserstein_distance(sketches[i], sketches[j], p_order);
      w(i, j) = w(j, i) = 1.0 / (1.0 + d);
    }
  }
  return w;
}

SimilarityMatrix normalize_similarity(const Eigen::MatrixXd& raw) {
  int n = (int)raw.rows();
  if (n == 0 || raw.cols() != n) throw ConfigError("normalize_similarity: matrix must be square");
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (!(raw(i, j) > 0.0 && raw(i, j) <= 1.0))
        throw ConfigError("normalize_similarity: entries must lie in (0, 1]");

  SimilarityMatrix s;
  s.raw = raw;
  s.sym.resize(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) {
      // equal pair short-circuits so a symmetric input survives bit for bit
      double v = raw(i, j) == raw(j, i) ? raw(i, j) : std::sqrt(raw(i, j) * raw(j, i));
      s.sym(i, j) = s.sym(j, i) = v;
    }
  s.norm.resize(n, n);
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd row = s.sym.row(i);
    Eigen::VectorXd e = (row.array() - row.maxCoeff()).exp();
    s.norm.row(i) = e / e.sum();
  }
  return s;
}

ImportanceSet aggregate_importance(const std::vector<ImportanceSet>& sets,
                                   const Eigen::MatrixXd& norm, int n) {
  if (sets.empty()) throw ConfigError("aggregate_importance: no importance sets");
  if (norm.rows() != (int)sets.size() || norm.cols() != (int)sets.size())
    throw ConfigError("aggregate_importance: weight matrix does not match the set count");
  if (n < 0 || n >= (int)sets.size())
    throw ConfigError("aggregate_importance: device index out of range");
  if (std::abs(norm.row(n).sum() - 1.0) > 1e-9)
    throw ConfigError("aggregate_importance: weight row for '" + sets[n].device_id +
                      "' does not sum to 1");

  for (std::size_t i = 1; i < sets.size(); ++i) {
    auto a = sets[0].scores.begin();
    auto b = sets[i].scores.begin();
    std::string divergent;
    int listed = 0;
    while ((a != sets[0].scores.end() || b != sets[i].scores.end()) && listed < 3) {
      if (b == sets[i].scores.end() || (a != sets[0].scores.end() && a->first < b->first)) {
        divergent += " '" + a->first + "' missing from '" + sets[i].device_id + "'";
        ++a, ++listed;
      } else if (a == sets[0].scores.end() || b->first < a->first) {
        divergent += " '" + b->first + "' extra in '" + sets[i].device_id + "'";
        ++b, ++listed;
      } else {
        ++a, ++b;
      }
    }
    if (!divergent.empty())
      throw ConfigError("aggregate_importance: importance sets are misaligned:" + divergent);
  }

  ImportanceSet out;
  out.device_id = sets[n].device_id;
  out.round = sets[n].round;
  for (const auto& [path, q0] : sets[0].scores) {
    double v = 0.0;
    for (std::size_t i = 0; i < sets.size(); ++i) v += norm(n, (int)i) * sets[i].scores.at(path);
    out.scores[path] = v;
  }
  return out;
}

namespace {

double joint_importance(const ImportanceSet& agg, const std::string& path, std::int64_t idx) {
  std::string key = path + "[" + std::to_string(idx) + "]";
  auto it = agg.scores.find(key);
  if (it == agg.scores.end())
    throw ConfigError("refine_header: importance set missing '" + key + "'");
  return it->second;
}

}  // namespace

void refine_header(HeaderNet& model, const ImportanceSet& agg, int discard) {
  if (discard < 0) throw ConfigError("refine_header: negative discard count");
  ParamStore& ps = model.params();
  if (!ps.entries().count("hdr/mlp/mask"))
    throw StateError("refine_header: header parameters not materialized yet");
  TensorBuf& mask = ps.at("hdr/mlp/mask");
  const TensorBuf& w1 = ps.at("hdr/mlp/w1");
  const TensorBuf& w2 = ps.at("hdr/mlp/w2");
  int H = (int)mask.size();
  int fan_in = w1.shape[0], classes = w2.shape[1];

  std::vector<int> active;
  for (int j = 0; j < H; ++j)
    if (mask.values[j] > 0.5) active.push_back(j);
  if (discard >= (int)active.size())
    throw ConfigError("refine_header: cannot discard " + std::to_string(discard) + " of " +
                      std::to_string(active.size()) + " active neurons");
  if (discard == 0) return;

  std::vector<std::pair<double, int>> ranked;
  for (int j : active) {
    double joint = joint_importance(agg, "hdr/mlp/b1", j);
    for (int i = 0; i < fan_in; ++i)
      joint += joint_importance(agg, "hdr/mlp/w1", (std::int64_t)i * H + j);
    for (int c = 0; c < classes; ++c)
      joint += joint_importance(agg, "hdr/mlp/w2", (std::int64_t)j * classes + c);
    ranked.push_back({joint, j});
  }
  std::sort(ranked.begin(), ranked.end());
  for (int k = 0; k < discard; ++k) mask.values[ranked[k].second] = 0.0;
}

std::vector<int> masked_neurons(const HeaderNet& model) {
  const ParamStore& ps = model.params();
  if (!ps.entries().count("hdr/mlp/mask"))
    throw StateError("masked_neurons: header parameters not materialized yet");
  const TensorBuf& mask = ps.entries().at("hdr/mlp/mask");
  std::vector<int> out;
  for (std::int64_t j = 0; j < mask.size(); ++j)
    if (mask.values[j] < 0.5) out.push_back((int)j);
  return out;
}

DataSketch extract_sketch(TransformerNet& extractor, const Dataset& data, int sample_size,
                          std::uint64_t seed, const std::string& stream) {
  if (data.size() == 0) throw ConfigError("extract_sketch: empty dataset");
  if (sample_size < 1) throw ConfigError("extract_sketch: sample size must be >= 1");
  int k = std::min(sample_size, data.size());
  std::vector<int> idx = shuffled_indices(data.size(), seed, stream, 0);
  Batch b = gather_batch(data, idx, 0, k);

  Tape t;
  TransformerNet::Features f = extractor.build_features(t, b.x);
  const TensorBuf& cls = t.val(f.cls);
  DataSketch s;
  s.features = ConstMatMap(cls.values.data(), k, cls.view_cols());
  return s;
}

PersonalizeResult run_phase2_stage2(const TransformerNet& backbone, const HeaderDAG& coarse,
                                    const OperationSet& ops, const NasConfig& ncfg,
                                    TransformerNet& extractor,
                                    const std::vector<PersonalizeDevice>& devices,
                                    const PersonalizeConfig& cfg, PersonalizeObserver* observer) {
  if (devices.empty()) throw ConfigError("phase2-2: no devices");
  if (cfg.rounds < 0) throw ConfigError("phase2-2: negative round count");
  for (const PersonalizeDevice& d : devices)
    if (d.data.size() == 0) throw ConfigError("phase2-2: device '" + d.device_id + "' has no data");
  for (auto [r, i] : cfg.absences)
    if (r < 0 || r >= cfg.rounds || i < 0 || i >= (int)devices.size())
      throw ConfigError("phase2-2: absence entry outside the schedule");

  int n = (int)devices.size();
  PersonalizeResult res;

  // schedule streams are shared, not device-keyed: devices holding identical
  // data then behave identically, so the whole round is symmetric under
  // device relabeling (identical sketches, uploads, and masks)
  std::vector<DataSketch> sketches;
  for (const PersonalizeDevice& d : devices)
    sketches.push_back(extract_sketch(extractor, d.data, cfg.sketch_size, cfg.seed, "sketch"));
  res.similarity = normalize_similarity(similarity_from_sketches(sketches, cfg.p_order));

  res.last_uploads.resize(n);
  for (int i = 0; i < n; ++i) {
    HeaderNet h = instantiate_header(backbone, coarse, ops, ncfg);
    h.forward(devices[i].data.batch(0, 1).x);  // materialize the header slots
    std::vector<std::string> to_freeze;
    for (const auto& [path, buf] : h.params().entries())
      if (path.rfind("hdr/", 0) != 0 && !h.params().is_frozen(path)) to_freeze.push_back(path);
    for (const std::string& p : to_freeze) h.params().freeze_prefix(p);
    res.headers.push_back(std::move(h));
    res.last_uploads[i].device_id = devices[i].device_id;
  }

  for (int t = 0; t < cfg.rounds; ++t) {
    std::vector<int> present;
    for (int i = 0; i < n; ++i) {
      bool absent = false;
      for (auto [r, j] : cfg.absences) absent = absent || (r == t && j == i);
      if (absent)
        std::fprintf(stderr, "phase2-2 round %d: device '%s' absent; reweighting the rest\n", t,
                     devices[i].device_id.c_str());
      else
        present.push_back(i);
    }
    if (present.empty()) {
      std::fprintf(stderr, "phase2-2 round %d: no devices present, skipping\n", t);
      res.round_loss.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }

    std::vector<ImportanceSet> uploads;
    double loss_sum = 0.0;
    int loss_count = 0;
    for (int i : present) {
      TrainOptions topt;
      topt.steps = cfg.local_steps;
      topt.lr = cfg.lr;
      topt.batch_size = cfg.batch_size;
      topt.seed = cfg.seed;
      topt.stream = "local/r" + std::to_string(t);
      std::vector<double> trace = train_ce(res.headers[i], devices[i].data, topt);
      for (double l : trace) loss_sum += l, ++loss_count;

      ImportanceSet q =
          param_importance(res.headers[i], devices[i].data, cfg.accumulation_steps,
                           cfg.batch_size, cfg.seed, "imp/r" + std::to_string(t));
      q.device_id = devices[i].device_id;
      q.round = t;
      if (observer) observer->on_upload(t, q.device_id, q);
      res.last_uploads[i] = q;
      uploads.push_back(std::move(q));
    }

    int p = (int)present.size();
    Eigen::MatrixXd wsub(p, p);
    for (int a = 0; a < p; ++a)
      for (int b = 0; b < p; ++b) wsub(a, b) = res.similarity.norm(present[a], present[b]);
    for (int a = 0; a < p; ++a) wsub.row(a) /= wsub.row(a).sum();

    for (int a = 0; a < p; ++a) {
      ImportanceSet agg = aggregate_importance(uploads, wsub, a);
      if (observer) observer->on_distribute(t, devices[present[a]].device_id, agg);
      refine_header(res.headers[present[a]], agg, cfg.discard_per_round);
    }
    res.round_loss.push_back(loss_count ? loss_sum / loss_count
                                        : std::numeric_limits<double>::quiet_NaN());
  }

  for (int i = 0; i < n; ++i)
    res.final_accuracy.push_back(eval_accuracy(res.headers[i], devices[i].data.all()));
  res.rounds_run = cfg.rounds;
  return res;
}

}  // namespace acme
