#include "acme/family.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "acme/serialize.hpp"
#include "json.hpp"

namespace acme {

namespace {

// concrete dims of the (w, d) member: first d layers, every width ceil-scaled
TransformerConfig scale_config(const TransformerConfig& rc, const WidthDepthSpec& spec) {
  if (!(spec.w > 0.0 && spec.w <= 1.0))
    throw ConfigError("width fraction " + std::to_string(spec.w) + " outside (0, 1]");
  if (spec.d < 1 || spec.d > rc.depth)
    throw ConfigError("depth " + std::to_string(spec.d) + " outside [1, " +
                      std::to_string(rc.depth) + "]");
  TransformerConfig scaled = rc;
  scaled.width_fraction = spec.w;
  TransformerConfig out = rc;
  out.depth = spec.d;
  out.num_heads = scaled.eff_heads();
  out.hidden_dim = scaled.eff_hidden();
  out.ffn_dim = scaled.eff_ffn();
  out.width_fraction = 1.0;
  return out;
}

void permute_col_blocks(TensorBuf& t, int nblocks, int bs, const std::vector<int>& order) {
  MatMap m(t.values.data(), t.view_rows(), t.view_cols());
  RowMat src = m;
  for (int b = 0; b < nblocks; ++b) m.middleCols(b * bs, bs) = src.middleCols(order[b] * bs, bs);
}

void permute_row_blocks(TensorBuf& t, int nblocks, int bs, const std::vector<int>& order) {
  MatMap m(t.values.data(), t.view_rows(), t.view_cols());
  RowMat src = m;
  for (int b = 0; b < nblocks; ++b) m.middleRows(b * bs, bs) = src.middleRows(order[b] * bs, bs);
}

void permute_vec_blocks(TensorBuf& t, int nblocks, int bs, const std::vector<int>& order) {
  Eigen::VectorXd src = t.values;
  for (int b = 0; b < nblocks; ++b) t.values.segment(b * bs, bs) = src.segment(order[b] * bs, bs);
}

TensorBuf trunc_cols(const TensorBuf& t, int cols) {
  TensorBuf out = TensorBuf::zeros({static_cast<int>(t.view_rows()), cols});
  out.as2d() = t.as2d().leftCols(cols);
  return out;
}

std::string member_file(const WidthDepthSpec& s) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "member_w%g_d%d.acmew", s.w, s.d);
  return buf;
}

}  // namespace

ImportanceTable head_importance(TransformerNet& model, const Dataset& probe, int batch_size) {
  if (probe.size() == 0) throw ConfigError("head_importance: empty probe set");
  if (batch_size < 1) throw ConfigError("head_importance: batch_size must be >= 1");
  const TransformerConfig& cfg = model.config();
  int H = cfg.eff_heads(), F = cfg.eff_ffn(), Dh = cfg.head_dim;

  ImportanceTable tab;
  tab.head_scores.assign(cfg.depth, std::vector<double>(H, 0.0));
  tab.neuron_scores.assign(cfg.depth, std::vector<double>(F, 0.0));

  for (int begin = 0; begin < probe.size(); begin += batch_size) {
    Batch b = probe.batch(begin, std::min(batch_size, probe.size() - begin));
    Tape t;
    TransformerNet::Features f = model.build_features(t, b.x);
    NodeRef loss = t.cross_entropy(model.attach_header(t, f.cls), b.labels);
    model.params().zero_grad();
    t.backward(loss);
    std::int64_t rows = std::int64_t(f.B) * f.S;
    for (int l = 0; l < cfg.depth; ++l) {
      const Eigen::VectorXd& hg = t.grad(f.head_outs[l]);
      if (hg.size()) {
        ConstMatMap gm(hg.data(), rows, std::int64_t(H) * Dh);
        ConstMatMap om(t.val(f.head_outs[l]).values.data(), rows, std::int64_t(H) * Dh);
        for (int h = 0; h < H; ++h)
          tab.head_scores[l][h] += std::abs(
              (gm.middleCols(h * Dh, Dh).array() * om.middleCols(h * Dh, Dh).array()).sum());
      }
      const Eigen::VectorXd& ng = t.grad(f.ffn_hidden[l]);
      if (ng.size()) {
        ConstMatMap gm(ng.data(), rows, F);
        ConstMatMap om(t.val(f.ffn_hidden[l]).values.data(), rows, F);
        for (int n = 0; n < F; ++n)
          tab.neuron_scores[l][n] += std::abs((gm.col(n).array() * om.col(n).array()).sum());
      }
    }
  }
  return tab;
}

std::vector<int> importance_order(const std::vector<double>& scores) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });
  return order;
}

TransformerNet derive_variable_width(const TransformerNet& model, const ImportanceTable& imp,
                                     const std::vector<double>& keep_fractions) {
  const TransformerConfig& cfg = model.config();
  int H = cfg.eff_heads(), F = cfg.eff_ffn(), Dh = cfg.head_dim;
  if (static_cast<int>(imp.head_scores.size()) != cfg.depth ||
      static_cast<int>(imp.neuron_scores.size()) != cfg.depth)
    throw ShapeError("derive_variable_width: importance table depth mismatch");
  double prev = 0.0;
  for (double w : keep_fractions) {
    if (!(w > 0.0 && w <= 1.0))
      throw ConfigError("derive_variable_width: fraction " + std::to_string(w) +
                        " outside (0, 1]");
    if (w < prev) throw ConfigError("derive_variable_width: fractions must ascend");
    prev = w;
    if (static_cast<int>(std::ceil(w * H - 1e-9)) < 1)
      throw ConfigError("derive_variable_width: fraction " + std::to_string(w) +
                        " keeps 0 of " + std::to_string(H) + " heads");
  }

  TransformerNet out = model;
  for (int l = 0; l < cfg.depth; ++l) {
    if (static_cast<int>(imp.head_scores[l].size()) != H ||
        static_cast<int>(imp.neuron_scores[l].size()) != F)
      throw ShapeError("derive_variable_width: importance table width mismatch at layer " +
                       std::to_string(l));
    std::vector<int> ho = importance_order(imp.head_scores[l]);
    std::string L = "layer" + std::to_string(l) + "/";
    for (const char* w : {"attn/wq", "attn/wk", "attn/wv"})
      permute_col_blocks(out.params().at(L + w), H, Dh, ho);
    for (const char* b : {"attn/bq", "attn/bk", "attn/bv"})
      permute_vec_blocks(out.params().at(L + b), H, Dh, ho);
    permute_row_blocks(out.params().at(L + "attn/wo"), H, Dh, ho);

    std::vector<int> no = importance_order(imp.neuron_scores[l]);
    permute_col_blocks(out.params().at(L + "ffn/w1"), F, 1, no);
    permute_vec_blocks(out.params().at(L + "ffn/b1"), F, 1, no);
    permute_row_blocks(out.params().at(L + "ffn/w2"), F, 1, no);
  }
  return out;
}

TransformerConfig delta_transform(const TransformerNet& reference, const WidthDepthSpec& spec) {
  if (!reference.reference_origin())
    throw StateError("width/depth transform is defined only on the reference model");
  return scale_config(reference.config(), spec);
}

double analytic_param_count(double w, int d, double H, double xi_h, double xi_f) {
  return double(d) * w * (H + 2.0 * xi_h * xi_f);
}

ZetaReport zeta_report(const TransformerConfig& reference_cfg, const WidthDepthSpec& spec) {
  const TransformerConfig& rc = reference_cfg;
  double head_params = 4.0 * rc.hidden_dim * (double(rc.num_heads) * rc.head_dim);

  TransformerConfig c = scale_config(rc, spec);
  std::int64_t HD = std::int64_t(c.num_heads) * c.head_dim, C = c.hidden_dim, F = c.ffn_dim;
  std::int64_t d = c.depth;

  ZetaReport r;
  r.analytic = analytic_param_count(spec.w, spec.d, head_params, rc.hidden_dim, rc.ffn_dim);
  r.attention_weights = d * 4 * C * HD;
  r.ffn_weights = d * 2 * C * F;
  r.excluded_biases = d * (3 * HD + C + F + C) + C;           // qkv, out, ffn, patch embed
  r.excluded_norms = d * 4 * C + 2 * C;                       // two norms per layer plus final
  r.excluded_embeddings = rc.patch_dim * C + C + std::int64_t(c.seq_len()) * C;
  r.exact_total = r.attention_weights + r.ffn_weights + r.excluded_biases + r.excluded_norms +
                  r.excluded_embeddings;
  r.residual = double(r.attention_weights + r.ffn_weights) - r.analytic;
  return r;
}

DistillResult distill(const TransformerNet& teacher, const WidthDepthSpec& spec,
                      const DistillationConfig& cfg, const Dataset& data) {
  if (cfg.lambda1 < 0.0 || cfg.lambda2 < 0.0)
    throw ConfigError("distill: loss weights must be nonnegative");
  if (data.size() == 0) throw ConfigError("distill: empty dataset");

  TransformerConfig scfg = delta_transform(teacher, spec);
  const TransformerConfig& tcfg = teacher.config();
  int Cs = scfg.hidden_dim;
  int ds = scfg.depth, dt = tcfg.depth;

  TransformerNet tnet = teacher;
  tnet.mask_to_width(spec.w);

  TransformerNet student(scfg, /*reference_origin=*/false);
  for (auto& [path, t] : student.params().entries()) {
    const TensorBuf& src = teacher.params().at(path);
    if (t.shape == src.shape) {
      t.values = src.values;
    } else if (t.shape.size() == 1) {
      t.values = src.values.head(t.size());
    } else {
      ConstMatMap sm(src.values.data(), src.view_rows(), src.view_cols());
      t.as2d() = sm.topLeftCorner(t.view_rows(), t.view_cols());
    }
  }

  // student layer i (1-based) learns from teacher layer ceil(i * dt / ds)
  std::vector<int> pair_to(ds);
  for (int i = 1; i <= ds; ++i) pair_to[i - 1] = (i * dt + ds - 1) / ds;

  int bs = std::min(cfg.batch_size, data.size());
  int per_epoch = (data.size() + bs - 1) / bs;

  auto loss_on = [&](const Batch& b, Tape& ts, bool with_grad) {
    Tape tt;
    TransformerNet::Features tf = tnet.build_features(tt, b.x);
    NodeRef tlogits = tnet.attach_header(tt, tf.cls);
    TensorBuf target_logits = tt.val(tlogits);
    TensorBuf target_embed = trunc_cols(tt.val(tf.embed), Cs);
    std::vector<TensorBuf> target_hidden;
    for (int i = 0; i < ds; ++i)
      target_hidden.push_back(trunc_cols(tt.val(tf.layer_outs[pair_to[i] - 1]), Cs));

    TransformerNet::Features sf = student.build_features(ts, b.x);
    NodeRef slogits = student.attach_header(ts, sf.cls);
    std::vector<std::pair<double, NodeRef>> terms;
    terms.emplace_back(cfg.lambda1, ts.mse(slogits, ts.constant(target_logits)));
    terms.emplace_back(cfg.lambda2, ts.mse(sf.embed, ts.constant(target_embed)));
    for (int i = 0; i < ds; ++i)
      terms.emplace_back(1.0 / ds, ts.mse(sf.layer_outs[i], ts.constant(target_hidden[i])));
    NodeRef loss = ts.weighted_sum(terms);
    double v = ts.val(loss).values[0];
    if (with_grad) {
      student.params().zero_grad();
      ts.backward(loss);
    }
    return v;
  };

  Batch probe = data.batch(0, std::min(data.size(), 128));
  double initial_loss;
  {
    Tape ts;
    initial_loss = loss_on(probe, ts, false);
  }
  std::vector<double> trace;
  trace.reserve(cfg.steps);
  std::vector<int> idx;
  try {
    for (int step = 0; step < cfg.steps; ++step) {
      if (step % per_epoch == 0)
        idx = shuffled_indices(data.size(), cfg.seed, "distill", step / per_epoch);
      Batch b = gather_batch(data, idx, (step % per_epoch) * bs, bs);
      Tape ts;
      trace.push_back(loss_on(b, ts, true));
      sgd_step(student.params(), cfg.lr);
    }
  } catch (const NumericError& e) {
    std::string tail;
    int n = static_cast<int>(trace.size());
    for (int i = std::max(0, n - 5); i < n; ++i)
      tail += (tail.empty() ? "" : ", ") + std::to_string(trace[i]);
    throw NumericError(std::string(e.what()) + "; distill aborted after " + std::to_string(n) +
                       " steps, trailing losses [" + tail + "]");
  }
  double final_loss;
  {
    Tape ts;
    final_loss = loss_on(probe, ts, false);
  }
  return DistillResult{std::move(student), std::move(trace), initial_loss, final_loss};
}

FamilyManifest build_family(const TransformerNet& reference, const ImportanceTable& imp,
                            const std::vector<double>& widths, const std::vector<int>& depths,
                            const DistillationConfig& dcfg, const Dataset& data,
                            const std::string& out_dir) {
  if (widths.empty() || depths.empty()) throw ConfigError("build_family: empty width/depth menu");
  TransformerNet base = derive_variable_width(reference, imp, widths);
  std::filesystem::create_directories(out_dir);

  FamilyManifest m;
  m.reference_cfg = reference.config();
  m.reference_hash = m.reference_cfg.hash();
  for (int d : depths) {
    for (double w : widths) {
      WidthDepthSpec spec{w, d};
      DistillResult r = distill(base, spec, dcfg, data);
      FamilyMember fm;
      fm.spec = spec;
      fm.size = zeta_report(m.reference_cfg, spec);
      fm.distill_loss = r.final_loss;
      fm.weights_file = member_file(spec);
      save_params(r.student.params(), out_dir + "/" + fm.weights_file,
                  r.student.config().hash());
      m.members.push_back(std::move(fm));
    }
  }
  save_manifest(m, out_dir + "/family.json");
  return m;
}

void save_manifest(const FamilyManifest& m, const std::string& file) {
  nlohmann::json j;
  j["reference"] = {{"hash", m.reference_hash},
                    {"depth", m.reference_cfg.depth},
                    {"heads", m.reference_cfg.num_heads},
                    {"head_dim", m.reference_cfg.head_dim},
                    {"hidden", m.reference_cfg.hidden_dim},
                    {"ffn", m.reference_cfg.ffn_dim},
                    {"patches", m.reference_cfg.num_patches},
                    {"patch_dim", m.reference_cfg.patch_dim},
                    {"classes", m.reference_cfg.num_classes},
                    {"seed", m.reference_cfg.seed}};
  j["members"] = nlohmann::json::array();
  for (const FamilyMember& fm : m.members) {
    j["members"].push_back({{"w", fm.spec.w},
                            {"d", fm.spec.d},
                            {"zeta_analytic", fm.size.analytic},
                            {"zeta_exact", fm.size.exact_total},
                            {"zeta_residual", fm.size.residual},
                            {"excluded_biases", fm.size.excluded_biases},
                            {"excluded_norms", fm.size.excluded_norms},
                            {"excluded_embeddings", fm.size.excluded_embeddings},
                            {"distill_loss", fm.distill_loss},
                            {"weights", fm.weights_file}});
  }
  std::ofstream os(file);
  if (!os) throw StateError("cannot write manifest '" + file + "'");
  os << j.dump(2) << "\n";
}

FamilyManifest load_manifest(const std::string& file) {
  std::ifstream is(file);
  if (!is) throw StateError("cannot open manifest '" + file + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const std::exception& e) {
    throw StateError("manifest '" + file + "': " + e.what());
  }
  FamilyManifest m;
  const auto& r = j.at("reference");
  m.reference_hash = r.at("hash").get<std::uint64_t>();
  m.reference_cfg.depth = r.at("depth").get<int>();
  m.reference_cfg.num_heads = r.at("heads").get<int>();
  m.reference_cfg.head_dim = r.at("head_dim").get<int>();
  m.reference_cfg.hidden_dim = r.at("hidden").get<int>();
  m.reference_cfg.ffn_dim = r.at("ffn").get<int>();
  m.reference_cfg.num_patches = r.at("patches").get<int>();
  m.reference_cfg.patch_dim = r.at("patch_dim").get<int>();
  m.reference_cfg.num_classes = r.at("classes").get<int>();
  m.reference_cfg.seed = r.at("seed").get<std::uint64_t>();
  m.reference_cfg.width_fraction = 1.0;
  if (m.reference_cfg.hash() != m.reference_hash)
    throw StateError("manifest '" + file + "': reference hash does not match its config");
  for (const auto& e : j.at("members")) {
    FamilyMember fm;
    fm.spec.w = e.at("w").get<double>();
    fm.spec.d = e.at("d").get<int>();
    fm.size = zeta_report(m.reference_cfg, fm.spec);
    fm.distill_loss = e.at("distill_loss").get<double>();
    fm.weights_file = e.at("weights").get<std::string>();
    m.members.push_back(std::move(fm));
  }
  return m;
}

TransformerNet load_family_member(const FamilyManifest& m, const FamilyMember& member,
                                  const std::string& dir) {
  TransformerConfig cfg = scale_config(m.reference_cfg, member.spec);
  TransformerNet net(cfg, /*reference_origin=*/false);
  load_params(net.params(), dir + "/" + member.weights_file, cfg.hash());
  return net;
}

}  // namespace acme
