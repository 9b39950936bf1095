#include "acme/nas.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "json.hpp"

namespace acme {

const char* op_name(HeaderOp op) {
  switch (op) {
    case HeaderOp::Conv1: return "conv1";
    case HeaderOp::Conv3: return "conv3";
    case HeaderOp::Conv5: return "conv5";
    case HeaderOp::Identity: return "identity";
    case HeaderOp::Downsample: return "downsample";
    case HeaderOp::AvgPool: return "avg_pool";
    case HeaderOp::MaxPool: return "max_pool";
  }
  return "?";
}

OperationSet OperationSet::default_set() {
  OperationSet s;
  s.ops = {HeaderOp::Conv1, HeaderOp::Conv3,      HeaderOp::Conv5,  HeaderOp::Identity,
           HeaderOp::Downsample, HeaderOp::AvgPool, HeaderOp::MaxPool};
  s.version = 1;
  return s;
}

void OperationSet::validate() const {
  if (ops.empty()) throw ConfigError("operation set is empty");
}

void HeaderDAG::validate(int opset_size) const {
  if (blocks.empty()) throw ConfigError("header dag: at least one block required");
  if (repeats < 1) throw ConfigError("header dag: repeats must be >= 1");
  if (opset_size < 1) throw ConfigError("header dag: empty operation set");
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const BlockSpec& s = blocks[b];
    const int inputs = (int)b + 2;  // module input, penultimate skip, earlier blocks
    auto bad = [&](const char* what, int v, int n) {
      throw ConfigError("header dag block " + std::to_string(b + 1) + ": " + what + " " +
                        std::to_string(v) + " outside [0, " + std::to_string(n - 1) + "]");
    };
    if (s.i1 < 0 || s.i1 >= inputs) bad("input selector", s.i1, inputs);
    if (s.i2 < 0 || s.i2 >= inputs) bad("input selector", s.i2, inputs);
    if (s.o1 < 0 || s.o1 >= opset_size) bad("op selector", s.o1, opset_size);
    if (s.o2 < 0 || s.o2 >= opset_size) bad("op selector", s.o2, opset_size);
  }
}

std::string HeaderDAG::canonical() const {
  std::string s = "U" + std::to_string(repeats) + ";V" + std::to_string(opset_version) + ";";
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    if (b) s += "|";
    s += std::to_string(blocks[b].i1) + "," + std::to_string(blocks[b].i2) + "," +
         std::to_string(blocks[b].o1) + "," + std::to_string(blocks[b].o2);
  }
  return s;
}

bool operator==(const HeaderDAG& a, const HeaderDAG& b) {
  if (a.repeats != b.repeats || a.opset_version != b.opset_version ||
      a.blocks.size() != b.blocks.size())
    return false;
  for (std::size_t i = 0; i < a.blocks.size(); ++i) {
    const BlockSpec &x = a.blocks[i], &y = b.blocks[i];
    if (x.i1 != y.i1 || x.i2 != y.i2 || x.o1 != y.o1 || x.o2 != y.o2) return false;
  }
  return true;
}

void save_dag(const HeaderDAG& dag, const std::string& file) {
  nlohmann::json j;
  j["blocks"] = nlohmann::json::array();
  for (const BlockSpec& b : dag.blocks)
    j["blocks"].push_back({{"i1", b.i1}, {"i2", b.i2}, {"o1", b.o1}, {"o2", b.o2}});
  j["repeats"] = dag.repeats;
  j["opset_version"] = dag.opset_version;
  std::ofstream out(file);
  if (!out) throw StateError("cannot write '" + file + "'");
  out << j.dump(2) << "\n";
}

HeaderDAG load_dag(const std::string& file) {
  std::ifstream in(file);
  if (!in) throw StateError("cannot open '" + file + "'");
  HeaderDAG dag;
  try {
    nlohmann::json j = nlohmann::json::parse(in);
    dag.repeats = j.at("repeats").get<int>();
    dag.opset_version = j.at("opset_version").get<int>();
    for (const auto& jb : j.at("blocks")) {
      BlockSpec b;
      b.i1 = jb.at("i1").get<int>();
      b.i2 = jb.at("i2").get<int>();
      b.o1 = jb.at("o1").get<int>();
      b.o2 = jb.at("o2").get<int>();
      dag.blocks.push_back(b);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("header dag '" + file + "': " + e.what());
  }
  if (dag.opset_version == 1) dag.validate((int)OperationSet::default_set().ops.size());
  return dag;
}

BigUint search_space_size(int B, int opset_size) {
  if (B < 1) throw ConfigError("search_space_size: need at least one block");
  if (opset_size < 1) throw ConfigError("search_space_size: empty operation set");
  BigUint n = BigUint::from_u64(1);
  for (int b = 1; b <= B; ++b) {
    n.mul_u32((std::uint32_t)(b + 1) * (std::uint32_t)(b + 1));
    n.mul_u32((std::uint32_t)opset_size * (std::uint32_t)opset_size);
  }
  return n;
}

namespace {

int spatial_h(const Tape& t, NodeRef n) { return t.shape(n)[2]; }
int spatial_w(const Tape& t, NodeRef n) { return t.shape(n)[3]; }

// halve until the map matches the target; maps grown apart are irrecoverable
NodeRef bridge_to(Tape& t, NodeRef n, int th, int tw) {
  int guard = 0;
  while (spatial_h(t, n) > th || spatial_w(t, n) > tw) {
    n = t.downsample_avg2(n);
    if (++guard > 32) break;
  }
  if (spatial_h(t, n) != th || spatial_w(t, n) != tw)
    throw ShapeError("header: cannot align a " + std::to_string(spatial_h(t, n)) + "x" +
                     std::to_string(spatial_w(t, n)) + " map to " + std::to_string(th) + "x" +
                     std::to_string(tw));
  return n;
}

NodeRef conv1x1(Tape& t, ParamStore& ps, NodeRef x, const std::string& slot, int cin, int cout) {
  ps.get_or_create(slot + "/w", {cout, cin}, Init::TruncNormal002);
  ps.get_or_create(slot + "/b", {cout}, Init::Zeros);
  return t.conv2d(x, t.param(ps, slot + "/w"), t.param(ps, slot + "/b"), 1);
}

NodeRef apply_op(Tape& t, ParamStore& ps, NodeRef x, HeaderOp op, const std::string& slot,
                 int channels) {
  switch (op) {
    case HeaderOp::Conv1:
    case HeaderOp::Conv3:
    case HeaderOp::Conv5: {
      int k = op == HeaderOp::Conv1 ? 1 : (op == HeaderOp::Conv3 ? 3 : 5);
      std::string base = slot + "/" + op_name(op);
      ps.get_or_create(base + "/w", {channels, channels * k * k}, Init::TruncNormal002);
      ps.get_or_create(base + "/b", {channels}, Init::Zeros);
      return t.conv2d(x, t.param(ps, base + "/w"), t.param(ps, base + "/b"), k);
    }
    case HeaderOp::Identity: return x;
    case HeaderOp::Downsample: return t.downsample_avg2(x);
    case HeaderOp::AvgPool: return t.avg_pool3(x);
    case HeaderOp::MaxPool: return t.max_pool3(x);
  }
  throw ConfigError("header: unknown op selector");
}

}  // namespace

NodeRef build_dag_logits(Tape& t, TransformerNet& backbone, const HeaderDAG& dag,
                         const OperationSet& ops, const NasConfig& ncfg, const TensorBuf& x,
                         HeaderTrace* trace) {
  ops.validate();
  dag.validate(ops.size());
  if (ncfg.channels < 1 || ncfg.mlp_hidden < 1)
    throw ConfigError("header: channels and mlp_hidden must be >= 1");

  const TransformerConfig& bc = backbone.config();
  int g = (int)std::lround(std::sqrt((double)bc.num_patches));
  if (g * g != bc.num_patches)
    throw ShapeError("header needs a square patch grid, got " + std::to_string(bc.num_patches) +
                     " patches");

  TransformerNet::Features f = backbone.build_features(t, x);
  ParamStore& ps = backbone.params();
  const int C = ncfg.channels;

  NodeRef map0 = t.drop_cls_to_grid(f.seq, f.B, f.S, g, g);
  NodeRef map1 = t.drop_cls_to_grid(f.penult, f.B, f.S, g, g);
  NodeRef cur = conv1x1(t, ps, map0, "hdr/entry0", bc.eff_hidden(), C);
  NodeRef skip = conv1x1(t, ps, map1, "hdr/entry1", bc.eff_hidden(), C);

  if (trace) trace->repeat_nodes.assign(dag.repeats, {});
  for (int u = 0; u < dag.repeats; ++u) {
    std::string rep = "hdr/rep" + std::to_string(u);
    std::vector<NodeRef> nodes;
    nodes.push_back(cur);
    nodes.push_back(bridge_to(t, skip, spatial_h(t, cur), spatial_w(t, cur)));

    std::vector<bool> consumed(dag.blocks.size(), false);
    for (std::size_t b = 0; b < dag.blocks.size(); ++b) {
      const BlockSpec& s = dag.blocks[b];
      if (s.i1 >= 2) consumed[s.i1 - 2] = true;
      if (s.i2 >= 2) consumed[s.i2 - 2] = true;
      std::string slot = rep + "/blk" + std::to_string(b + 1);
      NodeRef a = apply_op(t, ps, nodes[s.i1], ops.ops[s.o1], slot + "/p1", C);
      NodeRef c = apply_op(t, ps, nodes[s.i2], ops.ops[s.o2], slot + "/p2", C);
      int th = std::min(spatial_h(t, a), spatial_h(t, c));
      int tw = std::min(spatial_w(t, a), spatial_w(t, c));
      nodes.push_back(t.add(bridge_to(t, a, th, tw), bridge_to(t, c, th, tw)));
    }

    std::vector<NodeRef> loose;
    for (std::size_t b = 0; b < dag.blocks.size(); ++b)
      if (!consumed[b]) loose.push_back(nodes[b + 2]);
    int th = spatial_h(t, loose[0]), tw = spatial_w(t, loose[0]);
    for (NodeRef n : loose) {
      th = std::min(th, spatial_h(t, n));
      tw = std::min(tw, spatial_w(t, n));
    }
    std::vector<NodeRef> flat;
    for (NodeRef n : loose) flat.push_back(t.reshape(bridge_to(t, n, th, tw), {f.B, C * th * tw}));
    NodeRef cat = t.reshape(t.concat_cols(flat), {f.B, (int)loose.size() * C, th, tw});
    // fan-in varies with the dag, so the reducer is keyed by it
    cur = conv1x1(t, ps, cat, rep + "/reduce" + std::to_string(loose.size()),
                  (int)loose.size() * C, C);
    if (trace) trace->repeat_nodes[u] = nodes;
  }

  NodeRef pooled = t.global_avg_pool(cur);
  NodeRef tail_in = t.concat_cols({pooled, f.cls});
  ps.get_or_create("hdr/mlp/w1", {C + bc.eff_hidden(), ncfg.mlp_hidden}, Init::TruncNormal002);
  ps.get_or_create("hdr/mlp/b1", {ncfg.mlp_hidden}, Init::Zeros);
  ps.get_or_create("hdr/mlp/w2", {ncfg.mlp_hidden, bc.num_classes}, Init::TruncNormal002);
  ps.get_or_create("hdr/mlp/b2", {bc.num_classes}, Init::Zeros);
  // 0/1 neuron mask, flipped by importance-driven refinement; never trained
  ps.get_or_create("hdr/mlp/mask", {ncfg.mlp_hidden}, Init::Ones);
  if (!ps.is_frozen("hdr/mlp/mask")) ps.freeze_prefix("hdr/mlp/mask");
  NodeRef h1 = t.relu(t.add_rowvec(t.matmul(tail_in, t.param(ps, "hdr/mlp/w1")),
                                   t.param(ps, "hdr/mlp/b1")));
  h1 = t.mul_rowvec(h1, t.param(ps, "hdr/mlp/mask"));
  NodeRef logits =
      t.add_rowvec(t.matmul(h1, t.param(ps, "hdr/mlp/w2")), t.param(ps, "hdr/mlp/b2"));
  if (trace) {
    trace->pooled = pooled;
    trace->tail_in = tail_in;
    trace->logits = logits;
  }
  return logits;
}

HeaderNet::HeaderNet(const TransformerNet& backbone, HeaderDAG dag, OperationSet ops,
                     NasConfig ncfg)
    : backbone_(backbone), dag_(std::move(dag)), ops_(std::move(ops)), ncfg_(ncfg) {
  ops_.validate();
  dag_.validate(ops_.size());
}

NodeRef HeaderNet::build_logits(Tape& t, const TensorBuf& x) {
  return build_dag_logits(t, backbone_, dag_, ops_, ncfg_, x);
}

std::int64_t HeaderNet::header_param_count() const {
  std::int64_t n = 0;
  for (const auto& [path, buf] : backbone_.params().entries())
    if (path.rfind("hdr/", 0) == 0) n += buf.size();
  return n;
}

HeaderNet instantiate_header(const TransformerNet& backbone, const HeaderDAG& dag,
                             const OperationSet& ops, const NasConfig& ncfg) {
  return HeaderNet(backbone, dag, ops, ncfg);
}

double dag_ce_loss(TransformerNet& shared, const HeaderDAG& dag, const OperationSet& ops,
                   const NasConfig& ncfg, const Batch& batch) {
  Tape t;
  NodeRef logits = build_dag_logits(t, shared, dag, ops, ncfg, batch.x);
  return t.val(t.cross_entropy(logits, batch.labels)).values[0];
}

double dag_accuracy(TransformerNet& shared, const HeaderDAG& dag, const OperationSet& ops,
                    const NasConfig& ncfg, const Batch& batch) {
  Tape t;
  NodeRef logits = build_dag_logits(t, shared, dag, ops, ncfg, batch.x);
  ConstMatMap lm = t.val(logits).as2d();
  int hits = 0;
  for (int r = 0; r < lm.rows(); ++r) {
    int arg = 0;
    lm.row(r).maxCoeff(&arg);
    if (arg == batch.labels[(std::size_t)r]) ++hits;
  }
  return lm.rows() ? (double)hits / (double)lm.rows() : 0.0;
}

// ---- controller ----

Controller::Controller(int num_blocks, const OperationSet& ops, const NasConfig& ncfg,
                       std::uint64_t seed)
    : num_blocks_(num_blocks), opset_size_(ops.size()), ncfg_(ncfg), params_(seed) {
  if (num_blocks_ < 1) throw ConfigError("controller: need at least one block");
  ops.validate();
  if (ncfg_.lstm_hidden < 1 || ncfg_.embed_dim < 1)
    throw ConfigError("controller: lstm_hidden and embed_dim must be >= 1");
  const int H = ncfg_.lstm_hidden, E = ncfg_.embed_dim;
  params_.get_or_create("lstm/wx", {E, 4 * H}, Init::TruncNormal002);
  params_.get_or_create("lstm/wh", {H, 4 * H}, Init::TruncNormal002);
  params_.get_or_create("lstm/b", {4 * H}, Init::Zeros);
  params_.get_or_create("emb/start", {1, E}, Init::TruncNormal002);
  std::vector<int> sup = supports();
  for (std::size_t s = 0; s < sup.size(); ++s) {
    std::string id = std::to_string(s);
    params_.get_or_create("emb/step" + id, {sup[s], E}, Init::TruncNormal002);
    // zero heads make the starting policy exactly uniform on every support
    params_.get_or_create("head/step" + id + "/w", {H, sup[s]}, Init::Zeros);
    params_.get_or_create("head/step" + id + "/b", {sup[s]}, Init::Zeros);
  }
  params_.get_or_create("value/w", {H, 1}, Init::TruncNormal002);
  params_.get_or_create("value/b", {1}, Init::Zeros);
}

std::vector<int> Controller::supports() const {
  std::vector<int> sup;
  for (int b = 1; b <= num_blocks_; ++b) {
    sup.push_back(b + 1);
    sup.push_back(b + 1);
    sup.push_back(opset_size_);
    sup.push_back(opset_size_);
  }
  return sup;
}

Controller::Rollout Controller::roll(Tape& t, const std::vector<int>* forced, CounterRng* rng) {
  const int H = ncfg_.lstm_hidden;
  std::vector<int> sup = supports();
  if (forced && forced->size() != sup.size())
    throw ConfigError("controller: expected " + std::to_string(sup.size()) + " decisions, got " +
                      std::to_string(forced ? forced->size() : 0));

  NodeRef wx = t.param(params_, "lstm/wx");
  NodeRef wh = t.param(params_, "lstm/wh");
  NodeRef bb = t.param(params_, "lstm/b");
  NodeRef h = t.input(TensorBuf::zeros({1, H}));
  NodeRef c = t.input(TensorBuf::zeros({1, H}));
  NodeRef in = t.param(params_, "emb/start");

  Rollout out;
  std::vector<std::pair<double, NodeRef>> logp_terms;
  for (std::size_t s = 0; s < sup.size(); ++s) {
    NodeRef z = t.add_rowvec(t.add(t.matmul(in, wx), t.matmul(h, wh)), bb);
    NodeRef gi = t.sigmoid_(t.slice_cols(z, 0, H));
    NodeRef gf = t.sigmoid_(t.slice_cols(z, H, H));
    NodeRef gg = t.tanh_(t.slice_cols(z, 2 * H, H));
    NodeRef go = t.sigmoid_(t.slice_cols(z, 3 * H, H));
    c = t.add(t.hadamard(gf, c), t.hadamard(gi, gg));
    h = t.hadamard(go, t.tanh_(c));

    std::string id = std::to_string(s);
    NodeRef logits = t.add_rowvec(t.matmul(h, t.param(params_, "head/step" + id + "/w")),
                                  t.param(params_, "head/step" + id + "/b"));
    NodeRef probs = t.row_softmax(logits);

    int choice;
    if (forced) {
      choice = (*forced)[s];
      if (choice < 0 || choice >= sup[s])
        throw ConfigError("controller: decision " + id + " out of range");
    } else if (rng) {
      double u = rng->uniform();
      const Eigen::VectorXd& p = t.val(probs).values;
      double cum = 0.0;
      choice = sup[s] - 1;
      for (int k = 0; k < sup[s]; ++k) {
        cum += p[k];
        if (u < cum) {
          choice = k;
          break;
        }
      }
    } else {  // temperature -> 0
      int arg = 0;
      t.val(probs).as2d().row(0).maxCoeff(&arg);
      choice = arg;
    }
    out.decisions.push_back(choice);
    logp_terms.push_back({1.0, t.slice_cols(t.log_(probs), choice, 1)});
    in = t.gather_rows(t.param(params_, "emb/step" + id), {choice});
  }
  out.log_prob = t.weighted_sum(logp_terms);

  // reward estimate reads the final state but never trains it
  NodeRef hv = t.input(t.val(h));
  out.value = t.sigmoid_(t.add_rowvec(t.matmul(hv, t.param(params_, "value/w")),
                                      t.param(params_, "value/b")));
  return out;
}

HeaderDAG Controller::to_dag(const std::vector<int>& decisions) const {
  HeaderDAG dag;
  dag.repeats = ncfg_.repeats;
  dag.opset_version = 1;
  for (int b = 0; b < num_blocks_; ++b) {
    BlockSpec s;
    s.i1 = decisions[(std::size_t)4 * b];
    s.i2 = decisions[(std::size_t)4 * b + 1];
    s.o1 = decisions[(std::size_t)4 * b + 2];
    s.o2 = decisions[(std::size_t)4 * b + 3];
    dag.blocks.push_back(s);
  }
  return dag;
}

Controller::Sample Controller::sample(CounterRng& rng) {
  Tape t;
  Rollout r = roll(t, nullptr, &rng);
  Sample s;
  s.dag = to_dag(r.decisions);
  s.decisions = r.decisions;
  s.log_prob = t.val(r.log_prob).values[0];
  s.value = t.val(r.value).values[0];
  return s;
}

Controller::Sample Controller::decode_argmax() {
  Tape t;
  Rollout r = roll(t, nullptr, nullptr);
  Sample s;
  s.dag = to_dag(r.decisions);
  s.decisions = r.decisions;
  s.log_prob = t.val(r.log_prob).values[0];
  s.value = t.val(r.value).values[0];
  return s;
}

std::vector<std::string> Controller::policy_param_paths() const {
  std::vector<std::string> paths;
  for (const auto& [path, buf] : params_.entries())
    if (path.rfind("value/", 0) != 0) paths.push_back(path);
  return paths;
}

double Controller::log_prob(const std::vector<int>& decisions) {
  Tape t;
  Rollout r = roll(t, &decisions, nullptr);
  return t.val(r.log_prob).values[0];
}

Eigen::VectorXd Controller::grad_log_prob(const std::vector<int>& decisions) {
  Tape t;
  params_.zero_grad();
  Rollout r = roll(t, &decisions, nullptr);
  t.backward(r.log_prob);
  std::int64_t total = 0;
  for (const std::string& p : policy_param_paths()) total += params_.at(p).size();
  Eigen::VectorXd g = Eigen::VectorXd::Zero(total);
  std::int64_t off = 0;
  for (const std::string& p : policy_param_paths()) {
    const TensorBuf& buf = params_.at(p);
    if (buf.grad.size()) g.segment(off, buf.size()) = buf.grad;
    off += buf.size();
  }
  return g;
}

void update_controller(Controller& c, const std::vector<Controller::Sample>& samples,
                       const std::vector<double>& rewards, double lr) {
  if (samples.empty() || samples.size() != rewards.size())
    throw ConfigError("update_controller: rewards must align with samples");
  Tape t;
  std::vector<std::pair<double, NodeRef>> terms;
  const double base = c.baseline_;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Controller::Rollout r = c.roll(t, &samples[i].decisions, nullptr);
    terms.push_back({-(rewards[i] - base), r.log_prob});
    TensorBuf target = TensorBuf::zeros({1, 1});
    target.values[0] = rewards[i];
    terms.push_back({1.0 / (double)samples.size(), t.mse(r.value, t.input(target))});
  }
  c.params_.zero_grad();
  t.backward(t.weighted_sum(terms));
  sgd_step(c.params_, lr);

  double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / (double)rewards.size();
  c.baseline_ = (1.0 - c.ncfg_.baseline_momentum) * base + c.ncfg_.baseline_momentum * mean;
}

// ---- shared-weight training and the search loop ----

SharedTrainStats train_shared_weights(TransformerNet& shared, const OperationSet& ops,
                                      const NasConfig& ncfg, Controller& controller,
                                      const Dataset& data, const SharedTrainConfig& cfg) {
  if (data.size() == 0) throw ConfigError("train_shared_weights: empty dataset");
  if (cfg.samples_per_step < 1) throw ConfigError("train_shared_weights: need M >= 1");
  int bs = std::min(cfg.batch_size, data.size());
  int per_epoch = (data.size() + bs - 1) / bs;
  CounterRng srng(cfg.seed, cfg.stream + "/sample");
  SharedTrainStats stats;
  std::vector<int> idx;
  for (int step = 0; step < cfg.steps; ++step) {
    if (step % per_epoch == 0)
      idx = shuffled_indices(data.size(), cfg.seed, cfg.stream, step / per_epoch);
    Batch b = gather_batch(data, idx, (step % per_epoch) * bs, bs);

    shared.params().zero_grad();
    int ok = 0;
    double loss_sum = 0.0;
    for (int m = 0; m < cfg.samples_per_step; ++m) {
      Controller::Sample child = controller.sample(srng);
      try {
        Tape t;
        NodeRef logits = build_dag_logits(t, shared, child.dag, ops, ncfg, b.x);
        NodeRef loss = t.cross_entropy(logits, b.labels);
        double lv = t.val(loss).values[0];
        if (!std::isfinite(lv)) throw NumericError("non-finite child loss");
        t.backward(loss);
        loss_sum += lv;
        ++ok;
      } catch (const NumericError& e) {
        ++stats.skipped;
        std::fprintf(stderr, "shared-weights step %d: child '%s' skipped: %s\n", step,
                     child.dag.canonical().c_str(), e.what());
      }
    }
    if (ok > 0) sgd_step(shared.params(), cfg.lr / (double)ok);
    stats.loss_trace.push_back(ok ? loss_sum / ok : std::numeric_limits<double>::quiet_NaN());
    ++stats.steps;
  }
  return stats;
}

namespace {

Dataset slice_dataset(const Dataset& d, int begin, int count) {
  Dataset out;
  out.num_classes = d.num_classes;
  out.patches = d.patches;
  out.patch_dim = d.patch_dim;
  out.x = TensorBuf::zeros({count, d.x.shape[1]});
  out.x.as2d() = d.x.as2d().middleRows(begin, count);
  out.labels.assign(d.labels.begin() + begin, d.labels.begin() + begin + count);
  return out;
}

}  // namespace

NasSearchResult run_phase2_stage1(const std::string& edge_id, TransformerNet& backbone,
                                  const Dataset& edge_data, const NasSearchConfig& cfg) {
  if (cfg.blocks < 1) throw ConfigError("search: need at least one block");
  if (cfg.alternations < 0) throw ConfigError("search: negative budget");
  if (!(cfg.holdout_fraction > 0.0 && cfg.holdout_fraction < 1.0))
    throw ConfigError("search: holdout fraction must be inside (0, 1)");
  if (edge_data.size() < 2) throw ConfigError("search: edge dataset too small to split");

  int hold = std::max(1, (int)std::llround(edge_data.size() * cfg.holdout_fraction));
  if (hold >= edge_data.size()) hold = edge_data.size() - 1;
  Dataset train = slice_dataset(edge_data, 0, edge_data.size() - hold);
  Dataset holdset = slice_dataset(edge_data, edge_data.size() - hold, hold);
  Batch holdb = holdset.all();

  Controller ctrl(cfg.blocks, cfg.ops, cfg.header, cfg.seed);
  CounterRng prng(cfg.seed, "nas-policy/" + edge_id);

  NasSearchResult res;
  for (int a = 0; a < cfg.alternations; ++a) {
    SharedTrainConfig sc;
    sc.steps = cfg.shared_steps;
    sc.samples_per_step = cfg.shared_samples;
    sc.batch_size = cfg.batch_size;
    sc.lr = cfg.shared_lr;
    sc.seed = cfg.seed;
    sc.stream = "nas-shared/" + edge_id + "/alt" + std::to_string(a);
    train_shared_weights(backbone, cfg.ops, cfg.header, ctrl, train, sc);

    std::vector<Controller::Sample> ss;
    std::vector<double> rs;
    for (int i = 0; i < cfg.controller_samples; ++i) {
      ss.push_back(ctrl.sample(prng));
      rs.push_back(dag_accuracy(backbone, ss.back().dag, cfg.ops, cfg.header, holdb));
    }
    update_controller(ctrl, ss, rs, cfg.controller_lr);
    res.reward_trace.push_back(std::accumulate(rs.begin(), rs.end(), 0.0) / (double)rs.size());
    ++res.alternations_run;
  }

  res.dag = ctrl.decode_argmax().dag;
  res.holdout_accuracy = dag_accuracy(backbone, res.dag, cfg.ops, cfg.header, holdb);
  if (cfg.alternations > 0)
    std::fprintf(stderr, "phase2-1[%s]: budget of %d alternations spent, returning argmax decode\n",
                 edge_id.c_str(), cfg.alternations);
  return res;
}

}  // namespace acme
