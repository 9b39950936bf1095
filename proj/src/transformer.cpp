#include "acme/transformer.hpp"

#include <cmath>

#include "acme/rng.hpp"

namespace acme {

int TransformerConfig::eff(int x) const {
  int v = static_cast<int>(std::ceil(width_fraction * x - 1e-9));
  return v < 1 ? 1 : v;
}

void TransformerConfig::validate() const {
  if (depth < 1) throw ConfigError("transformer: depth must be >= 1");
  if (!(width_fraction > 0.0 && width_fraction <= 1.0))
    throw ConfigError("transformer: width_fraction must be in (0, 1]");
  if (num_heads < 1 || hidden_dim < 1 || ffn_dim < 1 || head_dim < 1)
    throw ConfigError("transformer: head/width dims must be >= 1");
  if (num_patches < 1 || patch_dim < 1) throw ConfigError("transformer: patch dims must be >= 1");
  if (num_classes < 2) throw ConfigError("transformer: num_classes must be >= 2");
}

std::string TransformerConfig::canonical() const {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "d=%d;w=%.12g;h=%d;hd=%d;xh=%d;xf=%d;p=%d;pd=%d;c=%d;s=%llu",
                depth, width_fraction, num_heads, head_dim, hidden_dim, ffn_dim, num_patches,
                patch_dim, num_classes, static_cast<unsigned long long>(seed));
  return buf;
}

std::uint64_t TransformerConfig::hash() const { return fnv1a64(canonical()); }

TransformerNet::TransformerNet(TransformerConfig cfg, bool reference_origin)
    : cfg_(cfg), params_(cfg.seed), reference_origin_(reference_origin) {
  cfg_.validate();
  head_masks_.assign(cfg_.depth, Eigen::VectorXd::Ones(cfg_.eff_heads()));
  neuron_masks_.assign(cfg_.depth, Eigen::VectorXd::Ones(cfg_.eff_ffn()));
  init_params();
}

void TransformerNet::init_params() {
  int C = cfg_.eff_hidden(), F = cfg_.eff_ffn(), HD = cfg_.eff_heads() * cfg_.head_dim;
  params_.get_or_create("embed/w", {cfg_.patch_dim, C}, Init::TruncNormal002);
  params_.get_or_create("embed/b", {C}, Init::Zeros);
  params_.get_or_create("embed/cls", {1, C}, Init::TruncNormal002);
  params_.get_or_create("embed/pos", {cfg_.seq_len(), C}, Init::TruncNormal002);
  for (int i = 0; i < cfg_.depth; ++i) {
    std::string L = "layer" + std::to_string(i) + "/";
    params_.get_or_create(L + "ln1/gamma", {C}, Init::Ones);
    params_.get_or_create(L + "ln1/beta", {C}, Init::Zeros);
    params_.get_or_create(L + "attn/wq", {C, HD}, Init::TruncNormal002);
    params_.get_or_create(L + "attn/bq", {HD}, Init::Zeros);
    params_.get_or_create(L + "attn/wk", {C, HD}, Init::TruncNormal002);
    params_.get_or_create(L + "attn/bk", {HD}, Init::Zeros);
    params_.get_or_create(L + "attn/wv", {C, HD}, Init::TruncNormal002);
    params_.get_or_create(L + "attn/bv", {HD}, Init::Zeros);
    params_.get_or_create(L + "attn/wo", {HD, C}, Init::TruncNormal002);
    params_.get_or_create(L + "attn/bo", {C}, Init::Zeros);
    params_.get_or_create(L + "ln2/gamma", {C}, Init::Ones);
    params_.get_or_create(L + "ln2/beta", {C}, Init::Zeros);
    params_.get_or_create(L + "ffn/w1", {C, F}, Init::TruncNormal002);
    params_.get_or_create(L + "ffn/b1", {F}, Init::Zeros);
    params_.get_or_create(L + "ffn/w2", {F, C}, Init::TruncNormal002);
    params_.get_or_create(L + "ffn/b2", {C}, Init::Zeros);
  }
  params_.get_or_create("final_ln/gamma", {C}, Init::Ones);
  params_.get_or_create("final_ln/beta", {C}, Init::Zeros);
  params_.get_or_create("head/w", {C, cfg_.num_classes}, Init::TruncNormal002);
  params_.get_or_create("head/b", {cfg_.num_classes}, Init::Zeros);
}

void TransformerNet::set_head_mask(int layer, const Eigen::VectorXd& m) {
  if (layer < 0 || layer >= cfg_.depth) throw StateError("set_head_mask: bad layer");
  if (m.size() != cfg_.eff_heads()) throw ShapeError("set_head_mask: mask size");
  head_masks_[layer] = m;
}

void TransformerNet::set_neuron_mask(int layer, const Eigen::VectorXd& m) {
  if (layer < 0 || layer >= cfg_.depth) throw StateError("set_neuron_mask: bad layer");
  if (m.size() != cfg_.eff_ffn()) throw ShapeError("set_neuron_mask: mask size");
  neuron_masks_[layer] = m;
}

void TransformerNet::mask_to_width(double keep) {
  if (!(keep > 0.0 && keep <= 1.0)) throw ConfigError("mask_to_width: keep must be in (0, 1]");
  int kh = std::max(1, static_cast<int>(std::ceil(keep * cfg_.eff_heads() - 1e-9)));
  int kf = std::max(1, static_cast<int>(std::ceil(keep * cfg_.eff_ffn() - 1e-9)));
  for (int i = 0; i < cfg_.depth; ++i) {
    Eigen::VectorXd hm = Eigen::VectorXd::Zero(cfg_.eff_heads());
    hm.head(kh).setOnes();
    Eigen::VectorXd nm = Eigen::VectorXd::Zero(cfg_.eff_ffn());
    nm.head(kf).setOnes();
    head_masks_[i] = hm;
    neuron_masks_[i] = nm;
  }
}

void TransformerNet::clear_masks() {
  for (int i = 0; i < cfg_.depth; ++i) {
    head_masks_[i].setOnes();
    neuron_masks_[i].setOnes();
  }
}

TransformerNet::Features TransformerNet::build_features(Tape& t, const TensorBuf& x) {
  int C = cfg_.eff_hidden(), H = cfg_.eff_heads(), Dh = cfg_.head_dim;
  int P = cfg_.num_patches, S = cfg_.seq_len();
  if (x.shape.size() != 2 || x.shape[1] != P * cfg_.patch_dim)
    throw ShapeError("transformer input " + shape_str(x.shape) + ", want [B," +
                     std::to_string(P * cfg_.patch_dim) + "]");
  int B = x.shape[0];

  Features f;
  f.B = B;
  f.S = S;

  NodeRef xin = t.input(x);
  NodeRef tokens = t.reshape(xin, {B * P, cfg_.patch_dim});
  NodeRef tok = t.add_rowvec(t.matmul(tokens, t.param(params_, "embed/w")),
                             t.param(params_, "embed/b"));
  NodeRef cls_tile = t.tile_rows(t.param(params_, "embed/cls"), B);
  NodeRef seq = t.prepend_cls(cls_tile, tok, B, P);
  seq = t.add_posemb(seq, t.param(params_, "embed/pos"), B, S);
  f.embed = seq;
  t.set_label(f.embed, "embed_out");

  NodeRef h = seq;
  double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(Dh));
  for (int i = 0; i < cfg_.depth; ++i) {
    std::string L = "layer" + std::to_string(i) + "/";
    NodeRef n1 = t.add_rowvec(
        t.mul_rowvec(t.layer_norm_raw(h), t.param(params_, L + "ln1/gamma")),
        t.param(params_, L + "ln1/beta"));
    NodeRef q = t.add_rowvec(t.matmul(n1, t.param(params_, L + "attn/wq")),
                             t.param(params_, L + "attn/bq"));
    NodeRef k = t.add_rowvec(t.matmul(n1, t.param(params_, L + "attn/wk")),
                             t.param(params_, L + "attn/bk"));
    NodeRef v = t.add_rowvec(t.matmul(n1, t.param(params_, L + "attn/wv")),
                             t.param(params_, L + "attn/bv"));
    NodeRef qh = t.to_heads(q, B, S, H, Dh);
    NodeRef kh = t.to_heads(k, B, S, H, Dh);
    NodeRef vh = t.to_heads(v, B, S, H, Dh);
    NodeRef probs = t.row_softmax(t.scale(t.bmm(qh, kh, /*trans_b=*/true), inv_sqrt_dh));
    f.attn_probs.push_back(probs);
    NodeRef oh = t.bmm(probs, vh);
    NodeRef heads = t.from_heads(oh, B, S, H, Dh);
    t.set_label(heads, L + "head_out");
    f.head_outs.push_back(heads);
    Eigen::VectorXd hm(H * Dh);
    for (int hh = 0; hh < H; ++hh) hm.segment(hh * Dh, Dh).setConstant(head_masks_[i][hh]);
    NodeRef masked = t.colmask(heads, hm);
    NodeRef attn_out = t.add_rowvec(t.matmul(masked, t.param(params_, L + "attn/wo")),
                                    t.param(params_, L + "attn/bo"));
    h = t.add(h, attn_out);

    NodeRef n2 = t.add_rowvec(
        t.mul_rowvec(t.layer_norm_raw(h), t.param(params_, L + "ln2/gamma")),
        t.param(params_, L + "ln2/beta"));
    NodeRef hid = t.gelu(t.add_rowvec(t.matmul(n2, t.param(params_, L + "ffn/w1")),
                                      t.param(params_, L + "ffn/b1")));
    t.set_label(hid, L + "ffn_hidden");
    f.ffn_hidden.push_back(hid);
    NodeRef hid_m = t.colmask(hid, neuron_masks_[i]);
    NodeRef ffn_out = t.add_rowvec(t.matmul(hid_m, t.param(params_, L + "ffn/w2")),
                                   t.param(params_, L + "ffn/b2"));
    h = t.add(h, ffn_out);
    f.layer_outs.push_back(h);
  }

  f.penult = cfg_.depth >= 2 ? f.layer_outs[cfg_.depth - 2] : f.embed;
  f.seq = t.add_rowvec(t.mul_rowvec(t.layer_norm_raw(h), t.param(params_, "final_ln/gamma")),
                       t.param(params_, "final_ln/beta"));
  f.cls = t.take_seq_pos(f.seq, B, S, 0);
  (void)C;
  last_ = f;
  return f;
}

NodeRef TransformerNet::attach_header(Tape& t, NodeRef cls) {
  return t.add_rowvec(t.matmul(cls, t.param(params_, "head/w")), t.param(params_, "head/b"));
}

NodeRef TransformerNet::build_logits(Tape& t, const TensorBuf& x) {
  Features f = build_features(t, x);
  return attach_header(t, f.cls);
}

std::int64_t TransformerNet::backbone_param_count() const {
  std::int64_t n = 0;
  for (const auto& [path, t] : params_.entries())
    if (!is_header_path(path)) n += t.size();
  return n;
}

std::int64_t TransformerNet::header_param_count() const {
  std::int64_t n = 0;
  for (const auto& [path, t] : params_.entries())
    if (is_header_path(path)) n += t.size();
  return n;
}

TransformerNet make_reference_model(const TransformerConfig& cfg) {
  if (cfg.width_fraction != 1.0)
    throw ConfigError("reference model must have width_fraction == 1");
  TransformerNet net(cfg, /*reference_origin=*/true);
  // the customization story assumes the backbone dwarfs the task header
  if (net.backbone_param_count() < 10 * net.header_param_count())
    throw ConfigError("reference model: backbone/header parameter ratio below 10 (" +
                      std::to_string(net.backbone_param_count()) + " vs " +
                      std::to_string(net.header_param_count()) + ")");
  return net;
}

}  // namespace acme
