#include "acme/tape.hpp"

#include <algorithm>
#include <cmath>

namespace acme {

namespace {
constexpr double kLnEps = 1e-12;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

Tape::Node& Tape::node(NodeRef r) {
  if (!r.valid() || r.i >= size()) throw StateError("tape: dangling node reference");
  return nodes_[r.i];
}

const Tape::Node& Tape::node(NodeRef r) const {
  if (!r.valid() || r.i >= size()) throw StateError("tape: dangling node reference");
  return nodes_[r.i];
}

std::string Tape::describe(NodeRef n) const {
  const Node& nd = node(n);
  std::string s = "node #" + std::to_string(n.i) + " " + shape_str(nd.value.shape);
  if (!nd.label.empty()) s += " '" + nd.label + "'";
  return s;
}

void Tape::shape_fail(const char* op, const std::string& detail) const {
  throw ShapeError(std::string(op) + ": " + detail);
}

NodeRef Tape::push(TensorBuf value, const char* op) {
  if (!all_finite(value.values))
    throw NumericError(std::string(op) + ": non-finite output at node #" +
                       std::to_string(size()));
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return NodeRef{size() - 1};
}

Eigen::VectorXd& Tape::grad_buf(int i) {
  Node& n = nodes_[i];
  if (n.grad.size() == 0) n.grad = Eigen::VectorXd::Zero(n.value.size());
  return n.grad;
}

MatMap Tape::val2d(int i) {
  TensorBuf& t = nodes_[i].value;
  return MatMap(t.values.data(), t.view_rows(), t.view_cols());
}

const Eigen::VectorXd& Tape::grad(NodeRef n) const {
  const Node& nd = node(n);
  if (nd.grad.size() == 0) {
    // never touched by backward; report zeros of the right size lazily
    const_cast<Node&>(nd).grad = Eigen::VectorXd::Zero(nd.value.size());
  }
  return nd.grad;
}

NodeRef Tape::input(const TensorBuf& x) {
  TensorBuf t;
  t.shape = x.shape;
  t.values = x.values;
  return push(std::move(t), "input");
}

NodeRef Tape::param(ParamStore& store, const std::string& path) {
  const TensorBuf& p = store.at(path);
  TensorBuf t;
  t.shape = p.shape;
  t.values = p.values;
  NodeRef r = push(std::move(t), "param");
  nodes_[r.i].store = &store;
  nodes_[r.i].label = path;
  return r;
}

NodeRef Tape::matmul(NodeRef a, NodeRef b) {
  const auto& sa = shape(a);
  const auto& sb = shape(b);
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    shape_fail("matmul", shape_str(sa) + " x " + shape_str(sb) + " (" + describe(a) + ", " +
                             describe(b) + ")");
  TensorBuf out = TensorBuf::zeros({sa[0], sb[1]});
  out.as2d() = node(a).value.as2d() * node(b).value.as2d();
  NodeRef r = push(std::move(out), "matmul");
  back_ops_.push_back([this, ai = a.i, bi = b.i, ri = r.i] {
    ConstMatMap d(grad_buf(ri).data(), nodes_[ri].value.view_rows(), nodes_[ri].value.view_cols());
    MatMap ga(grad_buf(ai).data(), nodes_[ai].value.view_rows(), nodes_[ai].value.view_cols());
    MatMap gb(grad_buf(bi).data(), nodes_[bi].value.view_rows(), nodes_[bi].value.view_cols());
    ga.noalias() += d * val2d(bi).transpose();
    gb.noalias() += val2d(ai).transpose() * d;
  });
  return r;
}

NodeRef Tape::bmm(NodeRef a, NodeRef b, bool trans_b) {
  const auto& sa = shape(a);
  const auto& sb = shape(b);
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0])
    shape_fail("bmm", shape_str(sa) + " x " + shape_str(sb));
  int N = sa[0], rr = sa[1], c = sa[2];
  int k = trans_b ? sb[1] : sb[2];
  if ((trans_b ? sb[2] : sb[1]) != c) shape_fail("bmm", "inner dims disagree");
  TensorBuf out = TensorBuf::zeros({N, rr, k});
  for (int n = 0; n < N; ++n) {
    ConstMatMap A(node(a).value.values.data() + std::int64_t(n) * rr * c, rr, c);
    MatMap O(out.values.data() + std::int64_t(n) * rr * k, rr, k);
    if (trans_b) {
      ConstMatMap B(node(b).value.values.data() + std::int64_t(n) * k * c, k, c);
      O.noalias() = A * B.transpose();
    } else {
      ConstMatMap B(node(b).value.values.data() + std::int64_t(n) * c * k, c, k);
      O.noalias() = A * B;
    }
  }
  NodeRef r = push(std::move(out), "bmm");
  back_ops_.push_back([this, ai = a.i, bi = b.i, ri = r.i, N, rr, c, k, trans_b] {
    Eigen::VectorXd& gr = grad_buf(ri);
    Eigen::VectorXd& ga = grad_buf(ai);
    Eigen::VectorXd& gb = grad_buf(bi);
    for (int n = 0; n < N; ++n) {
      ConstMatMap D(gr.data() + std::int64_t(n) * rr * k, rr, k);
      ConstMatMap A(nodes_[ai].value.values.data() + std::int64_t(n) * rr * c, rr, c);
      MatMap GA(ga.data() + std::int64_t(n) * rr * c, rr, c);
      if (trans_b) {
        ConstMatMap B(nodes_[bi].value.values.data() + std::int64_t(n) * k * c, k, c);
        MatMap GB(gb.data() + std::int64_t(n) * k * c, k, c);
        GA.noalias() += D * B;
        GB.noalias() += D.transpose() * A;
      } else {
        ConstMatMap B(nodes_[bi].value.values.data() + std::int64_t(n) * c * k, c, k);
        MatMap GB(gb.data() + std::int64_t(n) * c * k, c, k);
        GA.noalias() += D * B.transpose();
        GB.noalias() += A.transpose() * D;
      }
    }
  });
  return r;
}

NodeRef Tape::add(NodeRef a, NodeRef b) {
  if (!same_shape(shape(a), shape(b)))
    shape_fail("add", shape_str(shape(a)) + " vs " + shape_str(shape(b)) + " (" + describe(a) +
                          ", " + describe(b) + ")");
  TensorBuf out;
  out.shape = shape(a);
  out.values = node(a).value.values + node(b).value.values;
  NodeRef r = push(std::move(out), "add");
  back_ops_.push_back([this, ai = a.i, bi = b.i, ri = r.i] {
    grad_buf(ai) += grad_buf(ri);
    grad_buf(bi) += grad_buf(ri);
  });
  return r;
}

NodeRef Tape::sub(NodeRef a, NodeRef b) {
  if (!same_shape(shape(a), shape(b)))
    shape_fail("sub", shape_str(shape(a)) + " vs " + shape_str(shape(b)));
  TensorBuf out;
  out.shape = shape(a);
  out.values = node(a).value.values - node(b).value.values;
  NodeRef r = push(std::move(out), "sub");
  back_ops_.push_back([this, ai = a.i, bi = b.i, ri = r.i] {
    grad_buf(ai) += grad_buf(ri);
    grad_buf(bi) -= grad_buf(ri);
  });
  return r;
}

NodeRef Tape::hadamard(NodeRef a, NodeRef b) {
  if (!same_shape(shape(a), shape(b)))
    shape_fail("hadamard", shape_str(shape(a)) + " vs " + shape_str(shape(b)));
  TensorBuf out;
  out.shape = shape(a);
  out.values = node(a).value.values.cwiseProduct(node(b).value.values);
  NodeRef r = push(std::move(out), "hadamard");
  back_ops_.push_back([this, ai = a.i, bi = b.i, ri = r.i] {
    grad_buf(ai) += grad_buf(ri).cwiseProduct(nodes_[bi].value.values);
    grad_buf(bi) += grad_buf(ri).cwiseProduct(nodes_[ai].value.values);
  });
  return r;
}

NodeRef Tape::scale(NodeRef a, double c) {
  TensorBuf out;
  out.shape = shape(a);
  out.values = node(a).value.values * c;
  NodeRef r = push(std::move(out), "scale");
  back_ops_.push_back([this, ai = a.i, ri = r.i, c] { grad_buf(ai) += c * grad_buf(ri); });
  return r;
}

NodeRef Tape::add_rowvec(NodeRef x, NodeRef v) {
  std::int64_t C = node(x).value.view_cols();
  if (node(v).value.size() != C)
    shape_fail("add_rowvec", "vector size " + std::to_string(node(v).value.size()) +
                                 " vs row width " + std::to_string(C));
  TensorBuf out;
  out.shape = shape(x);
  out.values = node(x).value.values;
  MatMap(out.values.data(), node(x).value.view_rows(), C).rowwise() +=
      Eigen::RowVectorXd::Map(node(v).value.values.data(), C);
  NodeRef r = push(std::move(out), "add_rowvec");
  back_ops_.push_back([this, xi = x.i, vi = v.i, ri = r.i, C] {
    std::int64_t R = nodes_[ri].value.view_rows();
    ConstMatMap d(grad_buf(ri).data(), R, C);
    grad_buf(xi) += grad_buf(ri);
    Eigen::VectorXd& gv = grad_buf(vi);
    Eigen::RowVectorXd::Map(gv.data(), C) += d.colwise().sum();
  });
  return r;
}

NodeRef Tape::mul_rowvec(NodeRef x, NodeRef v) {
  std::int64_t C = node(x).value.view_cols();
  if (node(v).value.size() != C)
    shape_fail("mul_rowvec", "vector size " + std::to_string(node(v).value.size()) +
                                 " vs row width " + std::to_string(C));
  TensorBuf out;
  out.shape = shape(x);
  out.values = node(x).value.values;
  MatMap(out.values.data(), node(x).value.view_rows(), C).array().rowwise() *=
      Eigen::RowVectorXd::Map(node(v).value.values.data(), C).array();
  NodeRef r = push(std::move(out), "mul_rowvec");
  back_ops_.push_back([this, xi = x.i, vi = v.i, ri = r.i, C] {
    std::int64_t R = nodes_[ri].value.view_rows();
    ConstMatMap d(grad_buf(ri).data(), R, C);
    MatMap gx(grad_buf(xi).data(), R, C);
    gx.array() += d.array().rowwise() *
                  Eigen::RowVectorXd::Map(nodes_[vi].value.values.data(), C).array();
    Eigen::RowVectorXd::Map(grad_buf(vi).data(), C).array() +=
        (d.array() * val2d(xi).array()).colwise().sum();
  });
  return r;
}

NodeRef Tape::colmask(NodeRef x, const Eigen::VectorXd& mask) {
  std::int64_t C = node(x).value.view_cols();
  if (mask.size() != C)
    shape_fail("colmask", "mask size " + std::to_string(mask.size()) + " vs row width " +
                              std::to_string(C));
  TensorBuf out;
  out.shape = shape(x);
  out.values = node(x).value.values;
  MatMap(out.values.data(), node(x).value.view_rows(), C).array().rowwise() *=
      mask.transpose().array();
  NodeRef r = push(std::move(out), "colmask");
  back_ops_.push_back([this, xi = x.i, ri = r.i, C, mask] {
    std::int64_t R = nodes_[ri].value.view_rows();
    ConstMatMap d(grad_buf(ri).data(), R, C);
    MatMap gx(grad_buf(xi).data(), R, C);
    gx.array() += d.array().rowwise() * mask.transpose().array();
  });
  return r;
}

NodeRef Tape::relu(NodeRef x) {
  TensorBuf out;
  out.shape = shape(x);
  out.values = node(x).value.values.cwiseMax(0.0);
  NodeRef r = push(std::move(out), "relu");
  back_ops_.push_back([this, xi = x.i, ri = r.i] {
    const Eigen::VectorXd& xv = nodes_[xi].value.values;
    grad_buf(xi).array() +=
        grad_buf(ri).array() * (xv.array() > 0.0).cast<double>();
  });
  return r;
}

NodeRef Tape::gelu(NodeRef x) {
  const Eigen::VectorXd& xv = node(x).value.values;
  TensorBuf out;
  out.shape = shape(x);
  out.values.resize(xv.size());
  for (std::int64_t i = 0; i < xv.size(); ++i)
    out.values[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * kInvSqrt2));
  NodeRef r = push(std::move(out), "gelu");
  back_ops_.push_back([this, xi = x.i, ri = r.i] {
    const Eigen::VectorXd& xv2 = nodes_[xi].value.values;
    Eigen::VectorXd& gx = grad_buf(xi);
    const Eigen::VectorXd& d = grad_buf(ri);
    for (std::int64_t i = 0; i < xv2.size(); ++i) {
      double cdf = 0.5 * (1.0 + std::erf(xv2[i] * kInvSqrt2));
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * xv2[i] * xv2[i]);
      gx[i] += d[i] * (cdf + xv2[i] * pdf);
    }
  });
  return r;
}

NodeRef Tape::tanh_(NodeRef x) {
  TensorBuf out;
  out.shape = shape(x);
  out.values = node(x).value.values.array().tanh();
  NodeRef r = push(std::move(out), "tanh");
  back_ops_.push_back([this, xi = x.i, ri = r.i] {
    const Eigen::VectorXd& y = nodes_[ri].value.values;
    grad_buf(xi).array() += grad_buf(ri).array() * (1.0 - y.array().square());
  });
  return r;
}

NodeRef Tape::sigmoid_(NodeRef x) {
  TensorBuf out;
  out.shape = shape(x);
  out.values = (1.0 + (-node(x).value.values.array()).exp()).inverse();
  NodeRef r = push(std::move(out), "sigmoid");
  back_ops_.push_back([this, xi = x.i, ri = r.i] {
    const Eigen::VectorXd& y = nodes_[ri].value.values;
    grad_buf(xi).array() += grad_buf(ri).array() * y.array() * (1.0 - y.array());
  });
  return r;
}

NodeRef Tape::log_(NodeRef x) {
  if ((node(x).value.values.array() <= 0.0).any())
    throw NumericError("log: non-positive input at " + describe(x));
  TensorBuf out;
  out.shape = shape(x);
  out.values = node(x).value.values.array().log();
  NodeRef r = push(std::move(out), "log");
  back_ops_.push_back([this, xi = x.i, ri = r.i] {
    grad_buf(xi).array() += grad_buf(ri).array() / nodes_[xi].value.values.array();
  });
  return r;
}

NodeRef Tape::row_softmax(NodeRef x) {
  std::int64_t R = node(x).value.view_rows(), C = node(x).value.view_cols();
  TensorBuf out;
  out.shape = shape(x);
  out.values.resize(R * C);
  ConstMatMap xm(node(x).value.values.data(), R, C);
  MatMap ym(out.values.data(), R, C);
  for (std::int64_t i = 0; i < R; ++i) {
    Eigen::RowVectorXd z = xm.row(i).array() - xm.row(i).maxCoeff();
    Eigen::RowVectorXd e = z.array().exp();
    ym.row(i) = e / e.sum();
  }
  NodeRef r = push(std::move(out), "row_softmax");
  back_ops_.push_back([this, xi = x.i, ri = r.i, R, C] {
    ConstMatMap y(nodes_[ri].value.values.data(), R, C);
    ConstMatMap d(grad_buf(ri).data(), R, C);
    MatMap gx(grad_buf(xi).data(), R, C);
    for (std::int64_t i = 0; i < R; ++i) {
      double dot = d.row(i).dot(y.row(i));
      gx.row(i).array() += y.row(i).array() * (d.row(i).array() - dot);
    }
  });
  return r;
}

NodeRef Tape::layer_norm_raw(NodeRef x) {
  std::int64_t R = node(x).value.view_rows(), C = node(x).value.view_cols();
  TensorBuf out;
  out.shape = shape(x);
  out.values.resize(R * C);
  Eigen::VectorXd istd(R);
  {
    ConstMatMap xm(node(x).value.values.data(), R, C);
    MatMap ym(out.values.data(), R, C);
    for (std::int64_t i = 0; i < R; ++i) {
      double mu = xm.row(i).mean();
      double var = (xm.row(i).array() - mu).square().mean();
      istd[i] = 1.0 / std::sqrt(var + kLnEps);
      ym.row(i) = (xm.row(i).array() - mu) * istd[i];
    }
  }
  NodeRef r = push(std::move(out), "layer_norm");
  back_ops_.push_back([this, xi = x.i, ri = r.i, R, C, istd] {
    ConstMatMap xhat(nodes_[ri].value.values.data(), R, C);
    ConstMatMap d(grad_buf(ri).data(), R, C);
    MatMap gx(grad_buf(xi).data(), R, C);
    for (std::int64_t i = 0; i < R; ++i) {
      double m1 = d.row(i).mean();
      double m2 = d.row(i).cwiseProduct(xhat.row(i)).mean();
      gx.row(i).array() += istd[i] * (d.row(i).array() - m1 - xhat.row(i).array() * m2);
    }
  });
  return r;
}

NodeRef Tape::reshape(NodeRef x, std::vector<int> s) {
  if (numel(s) != node(x).value.size())
    shape_fail("reshape", shape_str(shape(x)) + " -> " + shape_str(s));
  TensorBuf out;
  out.shape = std::move(s);
  out.values = node(x).value.values;
  NodeRef r = push(std::move(out), "reshape");
  back_ops_.push_back([this, xi = x.i, ri = r.i] { grad_buf(xi) += grad_buf(ri); });
  return r;
}

NodeRef Tape::transpose2d(NodeRef x) {
  const auto& s = shape(x);
  if (s.size() != 2) shape_fail("transpose2d", shape_str(s));
  TensorBuf out = TensorBuf::zeros({s[1], s[0]});
  out.as2d() = node(x).value.as2d().transpose();
  NodeRef r = push(std::move(out), "transpose2d");
  back_ops_.push_back([this, xi = x.i, ri = r.i] {
    MatMap gx(grad_buf(xi).data(), nodes_[xi].value.view_rows(), nodes_[xi].value.view_cols());
    ConstMatMap d(grad_buf(ri).data(), nodes_[ri].value.view_rows(), nodes_[ri].value.view_cols());
    gx += d.transpose();
  });
  return r;
}

NodeRef Tape::slice_cols(NodeRef x, int begin, int len) {
  std::int64_t R = node(x).value.view_rows(), C = node(x).value.view_cols();
  if (begin < 0 || len <= 0 || begin + len > C)
    shape_fail("slice_cols", "range [" + std::to_string(begin) + "," +
                                 std::to_string(begin + len) + ") of width " + std::to_string(C));
  std::vector<int> s = shape(x);
  s.back() = len;
  TensorBuf out = TensorBuf::zeros(std::move(s));
  MatMap(out.values.data(), R, len) =
      ConstMatMap(node(x).value.values.data(), R, C).middleCols(begin, len);
  NodeRef r = push(std::move(out), "slice_cols");
  back_ops_.push_back([this, xi = x.i, ri = r.i, begin, len, R, C] {
    MatMap gx(grad_buf(xi).data(), R, C);
    gx.middleCols(begin, len) += ConstMatMap(grad_buf(ri).data(), R, len);
  });
  return r;
}

NodeRef Tape::concat_cols(const std::vector<NodeRef>& xs) {
  if (xs.empty()) shape_fail("concat_cols", "no inputs");
  std::int64_t R = node(xs[0]).value.view_rows();
  int total = 0;
  for (NodeRef n : xs) {
    if (node(n).value.view_rows() != R) shape_fail("concat_cols", "row counts differ");
    total += static_cast<int>(node(n).value.view_cols());
  }
  std::vector<int> s = shape(xs[0]);
  s.back() = total;
  TensorBuf out = TensorBuf::zeros(std::move(s));
  MatMap om(out.values.data(), R, total);
  int off = 0;
  for (NodeRef n : xs) {
    int c = static_cast<int>(node(n).value.view_cols());
    om.middleCols(off, c) = ConstMatMap(node(n).value.values.data(), R, c);
    off += c;
  }
  NodeRef r = push(std::move(out), "concat_cols");
  std::vector<int> idxs;
  for (NodeRef n : xs) idxs.push_back(n.i);
  back_ops_.push_back([this, idxs, ri = r.i, R, total] {
    ConstMatMap d(grad_buf(ri).data(), R, total);
    int off2 = 0;
    for (int xi : idxs) {
      int c = static_cast<int>(nodes_[xi].value.view_cols());
      MatMap gx(grad_buf(xi).data(), R, c);
      gx += d.middleCols(off2, c);
      off2 += c;
    }
  });
  return r;
}

NodeRef Tape::tile_rows(NodeRef v, int rows) {
  std::int64_t C = node(v).value.size();
  TensorBuf out = TensorBuf::zeros({rows, static_cast<int>(C)});
  MatMap(out.values.data(), rows, C).rowwise() =
      Eigen::RowVectorXd::Map(node(v).value.values.data(), C);
  NodeRef r = push(std::move(out), "tile_rows");
  back_ops_.push_back([this, vi = v.i, ri = r.i, rows, C] {
    ConstMatMap d(grad_buf(ri).data(), rows, C);
    Eigen::RowVectorXd::Map(grad_buf(vi).data(), C) += d.colwise().sum();
  });
  return r;
}

NodeRef Tape::to_heads(NodeRef x, int B, int S, int H, int Dh) {
  if (node(x).value.size() != std::int64_t(B) * S * H * Dh)
    shape_fail("to_heads", shape_str(shape(x)));
  TensorBuf out = TensorBuf::zeros({B * H, S, Dh});
  const double* src = node(x).value.values.data();
  double* dst = out.values.data();
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < H; ++h)
      for (int s = 0; s < S; ++s)
        std::copy_n(src + (std::int64_t(b) * S + s) * H * Dh + h * Dh, Dh,
                    dst + ((std::int64_t(b) * H + h) * S + s) * Dh);
  NodeRef r = push(std::move(out), "to_heads");
  back_ops_.push_back([this, xi = x.i, ri = r.i, B, S, H, Dh] {
    const double* d = grad_buf(ri).data();
    double* gx = grad_buf(xi).data();
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < H; ++h)
        for (int s = 0; s < S; ++s) {
          const double* dd = d + ((std::int64_t(b) * H + h) * S + s) * Dh;
          double* gg = gx + (std::int64_t(b) * S + s) * H * Dh + h * Dh;
          for (int k = 0; k < Dh; ++k) gg[k] += dd[k];
        }
  });
  return r;
}

NodeRef Tape::from_heads(NodeRef x, int B, int S, int H, int Dh) {
  if (node(x).value.size() != std::int64_t(B) * S * H * Dh)
    shape_fail("from_heads", shape_str(shape(x)));
  TensorBuf out = TensorBuf::zeros({B * S, H * Dh});
  const double* src = node(x).value.values.data();
  double* dst = out.values.data();
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < H; ++h)
      for (int s = 0; s < S; ++s)
        std::copy_n(src + ((std::int64_t(b) * H + h) * S + s) * Dh, Dh,
                    dst + (std::int64_t(b) * S + s) * H * Dh + h * Dh);
  NodeRef r = push(std::move(out), "from_heads");
  back_ops_.push_back([this, xi = x.i, ri = r.i, B, S, H, Dh] {
    const double* d = grad_buf(ri).data();
    double* gx = grad_buf(xi).data();
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < H; ++h)
        for (int s = 0; s < S; ++s) {
          const double* dd = d + (std::int64_t(b) * S + s) * H * Dh + h * Dh;
          double* gg = gx + ((std::int64_t(b) * H + h) * S + s) * Dh;
          for (int k = 0; k < Dh; ++k) gg[k] += dd[k];
        }
  });
  return r;
}

NodeRef Tape::gather_rows(NodeRef table, const std::vector<int>& idx) {
  const auto& s = shape(table);
  if (s.size() != 2) shape_fail("gather_rows", shape_str(s));
  int E = s[1];
  TensorBuf out = TensorBuf::zeros({static_cast<int>(idx.size()), E});
  ConstMatMap tm(node(table).value.values.data(), s[0], E);
  MatMap om(out.values.data(), idx.size(), E);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= s[0])
      shape_fail("gather_rows", "index " + std::to_string(idx[i]) + " out of " +
                                    std::to_string(s[0]) + " rows");
    om.row(i) = tm.row(idx[i]);
  }
  NodeRef r = push(std::move(out), "gather_rows");
  back_ops_.push_back([this, ti = table.i, ri = r.i, idx, E] {
    MatMap gt(grad_buf(ti).data(), nodes_[ti].value.shape[0], E);
    ConstMatMap d(grad_buf(ri).data(), idx.size(), E);
    for (std::size_t i = 0; i < idx.size(); ++i) gt.row(idx[i]) += d.row(i);
  });
  return r;
}

NodeRef Tape::prepend_cls(NodeRef cls, NodeRef tokens, int B, int P) {
  std::int64_t C = node(cls).value.view_cols();
  if (node(cls).value.view_rows() != B || node(tokens).value.view_rows() != std::int64_t(B) * P ||
      node(tokens).value.view_cols() != C)
    shape_fail("prepend_cls", shape_str(shape(cls)) + " + " + shape_str(shape(tokens)));
  int S = P + 1;
  TensorBuf out = TensorBuf::zeros({B * S, static_cast<int>(C)});
  ConstMatMap cm(node(cls).value.values.data(), B, C);
  ConstMatMap tm(node(tokens).value.values.data(), std::int64_t(B) * P, C);
  MatMap om(out.values.data(), std::int64_t(B) * S, C);
  for (int b = 0; b < B; ++b) {
    om.row(std::int64_t(b) * S) = cm.row(b);
    om.middleRows(std::int64_t(b) * S + 1, P) = tm.middleRows(std::int64_t(b) * P, P);
  }
  NodeRef r = push(std::move(out), "prepend_cls");
  back_ops_.push_back([this, ci = cls.i, ti = tokens.i, ri = r.i, B, P, C] {
    int S = P + 1;
    ConstMatMap d(grad_buf(ri).data(), std::int64_t(B) * S, C);
    MatMap gc(grad_buf(ci).data(), B, C);
    MatMap gt(grad_buf(ti).data(), std::int64_t(B) * P, C);
    for (int b = 0; b < B; ++b) {
      gc.row(b) += d.row(std::int64_t(b) * S);
      gt.middleRows(std::int64_t(b) * P, P) += d.middleRows(std::int64_t(b) * S + 1, P);
    }
  });
  return r;
}

NodeRef Tape::add_posemb(NodeRef x, NodeRef pos, int B, int S) {
  std::int64_t C = node(x).value.view_cols();
  if (node(x).value.view_rows() != std::int64_t(B) * S || node(pos).value.view_rows() != S ||
      node(pos).value.view_cols() != C)
    shape_fail("add_posemb", shape_str(shape(x)) + " + " + shape_str(shape(pos)));
  TensorBuf out;
  out.shape = shape(x);
  out.values = node(x).value.values;
  MatMap om(out.values.data(), std::int64_t(B) * S, C);
  ConstMatMap pm(node(pos).value.values.data(), S, C);
  for (int b = 0; b < B; ++b) om.middleRows(std::int64_t(b) * S, S) += pm;
  NodeRef r = push(std::move(out), "add_posemb");
  back_ops_.push_back([this, xi = x.i, pi = pos.i, ri = r.i, B, S, C] {
    ConstMatMap d(grad_buf(ri).data(), std::int64_t(B) * S, C);
    grad_buf(xi) += grad_buf(ri);
    MatMap gp(grad_buf(pi).data(), S, C);
    for (int b = 0; b < B; ++b) gp += d.middleRows(std::int64_t(b) * S, S);
  });
  return r;
}

NodeRef Tape::take_seq_pos(NodeRef x, int B, int S, int pos) {
  std::int64_t C = node(x).value.view_cols();
  if (node(x).value.view_rows() != std::int64_t(B) * S || pos < 0 || pos >= S)
    shape_fail("take_seq_pos", shape_str(shape(x)) + " pos " + std::to_string(pos));
  TensorBuf out = TensorBuf::zeros({B, static_cast<int>(C)});
  ConstMatMap xm(node(x).value.values.data(), std::int64_t(B) * S, C);
  MatMap om(out.values.data(), B, C);
  for (int b = 0; b < B; ++b) om.row(b) = xm.row(std::int64_t(b) * S + pos);
  NodeRef r = push(std::move(out), "take_seq_pos");
  back_ops_.push_back([this, xi = x.i, ri = r.i, B, S, pos, C] {
    MatMap gx(grad_buf(xi).data(), std::int64_t(B) * S, C);
    ConstMatMap d(grad_buf(ri).data(), B, C);
    for (int b = 0; b < B; ++b) gx.row(std::int64_t(b) * S + pos) += d.row(b);
  });
  return r;
}

NodeRef Tape::drop_cls_to_grid(NodeRef x, int B, int S, int gh, int gw) {
  std::int64_t C = node(x).value.view_cols();
  if (node(x).value.view_rows() != std::int64_t(B) * S || gh * gw != S - 1)
    shape_fail("drop_cls_to_grid", shape_str(shape(x)) + " grid " + std::to_string(gh) + "x" +
                                       std::to_string(gw));
  TensorBuf out = TensorBuf::zeros({B, static_cast<int>(C), gh, gw});
  const double* src = node(x).value.values.data();
  double* dst = out.values.data();
  for (int b = 0; b < B; ++b)
    for (int p = 0; p < S - 1; ++p)
      for (std::int64_t c = 0; c < C; ++c)
        dst[((std::int64_t(b) * C + c) * gh * gw) + p] =
            src[(std::int64_t(b) * S + 1 + p) * C + c];
  NodeRef r = push(std::move(out), "drop_cls_to_grid");
  back_ops_.push_back([this, xi = x.i, ri = r.i, B, S, gh, gw, C] {
    const double* d = grad_buf(ri).data();
    double* gx = grad_buf(xi).data();
    for (int b = 0; b < B; ++b)
      for (int p = 0; p < S - 1; ++p)
        for (std::int64_t c = 0; c < C; ++c)
          gx[(std::int64_t(b) * S + 1 + p) * C + c] +=
              d[((std::int64_t(b) * C + c) * gh * gw) + p];
  });
  return r;
}

namespace {
// out-of-range reads treated as zero padding
inline std::int64_t cell(std::int64_t b, std::int64_t c, std::int64_t y, std::int64_t x,
                         std::int64_t C, std::int64_t H, std::int64_t W) {
  return ((b * C + c) * H + y) * W + x;
}
}  // namespace

NodeRef Tape::conv2d(NodeRef x, NodeRef w, NodeRef b, int k) {
  const auto& sx = shape(x);
  const auto& sw = shape(w);
  if (sx.size() != 4) shape_fail("conv2d", "input " + shape_str(sx));
  int B = sx[0], Cin = sx[1], H = sx[2], W = sx[3];
  if (sw.size() != 2 || sw[1] != Cin * k * k)
    shape_fail("conv2d", "kernel " + shape_str(sw) + " for Cin=" + std::to_string(Cin) +
                             " k=" + std::to_string(k));
  int Cout = sw[0];
  if (node(b).value.size() != Cout) shape_fail("conv2d", "bias size");
  int pad = k / 2;
  std::int64_t HW = std::int64_t(H) * W;
  TensorBuf out = TensorBuf::zeros({B, Cout, H, W});
  ConstMatMap wm(node(w).value.values.data(), Cout, Cin * k * k);
  // im2col per sample, then one matmul per sample
  RowMat col(Cin * k * k, HW);
  for (int bb = 0; bb < B; ++bb) {
    col.setZero();
    const double* xp = node(x).value.values.data();
    for (int ci = 0; ci < Cin; ++ci)
      for (int di = 0; di < k; ++di)
        for (int dj = 0; dj < k; ++dj) {
          int row = (ci * k + di) * k + dj;
          for (int y = 0; y < H; ++y) {
            int sy = y + di - pad;
            if (sy < 0 || sy >= H) continue;
            for (int xx = 0; xx < W; ++xx) {
              int sx2 = xx + dj - pad;
              if (sx2 < 0 || sx2 >= W) continue;
              col(row, std::int64_t(y) * W + xx) = xp[cell(bb, ci, sy, sx2, Cin, H, W)];
            }
          }
        }
    MatMap om(out.values.data() + std::int64_t(bb) * Cout * HW, Cout, HW);
    om.noalias() = wm * col;
    om.colwise() += Eigen::VectorXd::Map(node(b).value.values.data(), Cout);
  }
  NodeRef r = push(std::move(out), "conv2d");
  back_ops_.push_back([this, xi = x.i, wi = w.i, bi = b.i, ri = r.i, B, Cin, H, W, k] {
    int Cout = nodes_[wi].value.shape[0];
    int pad = k / 2;
    std::int64_t HW = std::int64_t(H) * W;
    ConstMatMap wm(nodes_[wi].value.values.data(), Cout, Cin * k * k);
    MatMap gw(grad_buf(wi).data(), Cout, Cin * k * k);
    Eigen::VectorXd& gb = grad_buf(bi);
    Eigen::VectorXd& gx = grad_buf(xi);
    RowMat col(Cin * k * k, HW);
    RowMat dcol(Cin * k * k, HW);
    for (int bb = 0; bb < B; ++bb) {
      col.setZero();
      const double* xp = nodes_[xi].value.values.data();
      for (int ci = 0; ci < Cin; ++ci)
        for (int di = 0; di < k; ++di)
          for (int dj = 0; dj < k; ++dj) {
            int row = (ci * k + di) * k + dj;
            for (int y = 0; y < H; ++y) {
              int sy = y + di - pad;
              if (sy < 0 || sy >= H) continue;
              for (int xx = 0; xx < W; ++xx) {
                int sx2 = xx + dj - pad;
                if (sx2 < 0 || sx2 >= W) continue;
                col(row, std::int64_t(y) * W + xx) = xp[cell(bb, ci, sy, sx2, Cin, H, W)];
              }
            }
          }
      ConstMatMap d(grad_buf(ri).data() + std::int64_t(bb) * Cout * HW, Cout, HW);
      gw.noalias() += d * col.transpose();
      gb += d.rowwise().sum();
      dcol.noalias() = wm.transpose() * d;
      for (int ci = 0; ci < Cin; ++ci)
        for (int di = 0; di < k; ++di)
          for (int dj = 0; dj < k; ++dj) {
            int row = (ci * k + di) * k + dj;
            for (int y = 0; y < H; ++y) {
              int sy = y + di - pad;
              if (sy < 0 || sy >= H) continue;
              for (int xx = 0; xx < W; ++xx) {
                int sx2 = xx + dj - pad;
                if (sx2 < 0 || sx2 >= W) continue;
                gx[cell(bb, ci, sy, sx2, Cin, H, W)] += dcol(row, std::int64_t(y) * W + xx);
              }
            }
          }
    }
  });
  return r;
}

NodeRef Tape::avg_pool3(NodeRef x) {
  const auto& s = shape(x);
  if (s.size() != 4) shape_fail("avg_pool3", shape_str(s));
  int B = s[0], C = s[1], H = s[2], W = s[3];
  TensorBuf out = TensorBuf::zeros(s);
  const double* xp = node(x).value.values.data();
  double* op = out.values.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) {
          double acc = 0.0;
          int cnt = 0;
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              int sy = y + di, sx2 = xx + dj;
              if (sy < 0 || sy >= H || sx2 < 0 || sx2 >= W) continue;
              acc += xp[cell(b, c, sy, sx2, C, H, W)];
              ++cnt;
            }
          op[cell(b, c, y, xx, C, H, W)] = acc / cnt;
        }
  NodeRef r = push(std::move(out), "avg_pool3");
  back_ops_.push_back([this, xi = x.i, ri = r.i, B, C, H, W] {
    const double* d = grad_buf(ri).data();
    double* gx = grad_buf(xi).data();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
          for (int xx = 0; xx < W; ++xx) {
            int cnt = 0;
            for (int di = -1; di <= 1; ++di)
              for (int dj = -1; dj <= 1; ++dj) {
                int sy = y + di, sx2 = xx + dj;
                if (sy >= 0 && sy < H && sx2 >= 0 && sx2 < W) ++cnt;
              }
            double dv = d[cell(b, c, y, xx, C, H, W)] / cnt;
            for (int di = -1; di <= 1; ++di)
              for (int dj = -1; dj <= 1; ++dj) {
                int sy = y + di, sx2 = xx + dj;
                if (sy < 0 || sy >= H || sx2 < 0 || sx2 >= W) continue;
                gx[cell(b, c, sy, sx2, C, H, W)] += dv;
              }
          }
  });
  return r;
}

NodeRef Tape::max_pool3(NodeRef x) {
  const auto& s = shape(x);
  if (s.size() != 4) shape_fail("max_pool3", shape_str(s));
  int B = s[0], C = s[1], H = s[2], W = s[3];
  TensorBuf out = TensorBuf::zeros(s);
  std::vector<std::int64_t> arg(out.values.size());
  const double* xp = node(x).value.values.data();
  double* op = out.values.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) {
          double best = 0.0;
          std::int64_t bi = -1;
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              int sy = y + di, sx2 = xx + dj;
              if (sy < 0 || sy >= H || sx2 < 0 || sx2 >= W) continue;
              std::int64_t idx = cell(b, c, sy, sx2, C, H, W);
              if (bi < 0 || xp[idx] > best) {  // strict >, so ties keep the first scanned cell
                best = xp[idx];
                bi = idx;
              }
            }
          std::int64_t oi = cell(b, c, y, xx, C, H, W);
          op[oi] = best;
          arg[oi] = bi;
        }
  NodeRef r = push(std::move(out), "max_pool3");
  back_ops_.push_back([this, xi = x.i, ri = r.i, arg] {
    const double* d = grad_buf(ri).data();
    double* gx = grad_buf(xi).data();
    for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += d[i];
  });
  return r;
}

NodeRef Tape::downsample_avg2(NodeRef x) {
  const auto& s = shape(x);
  if (s.size() != 4) shape_fail("downsample_avg2", shape_str(s));
  int B = s[0], C = s[1], H = s[2], W = s[3];
  int Ho = (H + 1) / 2, Wo = (W + 1) / 2;
  TensorBuf out = TensorBuf::zeros({B, C, Ho, Wo});
  const double* xp = node(x).value.values.data();
  double* op = out.values.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < Ho; ++y)
        for (int xx = 0; xx < Wo; ++xx) {
          double acc = 0.0;
          int cnt = 0;
          for (int di = 0; di < 2; ++di)
            for (int dj = 0; dj < 2; ++dj) {
              int sy = 2 * y + di, sx2 = 2 * xx + dj;
              if (sy >= H || sx2 >= W) continue;
              acc += xp[cell(b, c, sy, sx2, C, H, W)];
              ++cnt;
            }
          op[cell(b, c, y, xx, C, Ho, Wo)] = acc / cnt;
        }
  NodeRef r = push(std::move(out), "downsample_avg2");
  back_ops_.push_back([this, xi = x.i, ri = r.i, B, C, H, W, Ho, Wo] {
    const double* d = grad_buf(ri).data();
    double* gx = grad_buf(xi).data();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < Ho; ++y)
          for (int xx = 0; xx < Wo; ++xx) {
            int cnt = 0;
            for (int di = 0; di < 2; ++di)
              for (int dj = 0; dj < 2; ++dj)
                if (2 * y + di < H && 2 * xx + dj < W) ++cnt;
            double dv = d[cell(b, c, y, xx, C, Ho, Wo)] / cnt;
            for (int di = 0; di < 2; ++di)
              for (int dj = 0; dj < 2; ++dj) {
                int sy = 2 * y + di, sx2 = 2 * xx + dj;
                if (sy >= H || sx2 >= W) continue;
                gx[cell(b, c, sy, sx2, C, H, W)] += dv;
              }
          }
  });
  return r;
}

NodeRef Tape::global_avg_pool(NodeRef x) {
  const auto& s = shape(x);
  if (s.size() != 4) shape_fail("global_avg_pool", shape_str(s));
  int B = s[0], C = s[1];
  std::int64_t HW = std::int64_t(s[2]) * s[3];
  TensorBuf out = TensorBuf::zeros({B, C});
  const double* xp = node(x).value.values.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < HW; ++i) acc += xp[(std::int64_t(b) * C + c) * HW + i];
      out.values[std::int64_t(b) * C + c] = acc / static_cast<double>(HW);
    }
  NodeRef r = push(std::move(out), "global_avg_pool");
  back_ops_.push_back([this, xi = x.i, ri = r.i, B, C, HW] {
    const double* d = grad_buf(ri).data();
    double* gx = grad_buf(xi).data();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        double dv = d[std::int64_t(b) * C + c] / static_cast<double>(HW);
        for (std::int64_t i = 0; i < HW; ++i) gx[(std::int64_t(b) * C + c) * HW + i] += dv;
      }
  });
  return r;
}

NodeRef Tape::channel_mask(NodeRef x, const Eigen::VectorXd& mask) {
  const auto& s = shape(x);
  if (s.size() != 4 || mask.size() != s[1])
    shape_fail("channel_mask", shape_str(s) + " mask " + std::to_string(mask.size()));
  int B = s[0], C = s[1];
  std::int64_t HW = std::int64_t(s[2]) * s[3];
  TensorBuf out;
  out.shape = s;
  out.values = node(x).value.values;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      out.values.segment((std::int64_t(b) * C + c) * HW, HW) *= mask[c];
  NodeRef r = push(std::move(out), "channel_mask");
  back_ops_.push_back([this, xi = x.i, ri = r.i, B, C, HW, mask] {
    Eigen::VectorXd& gx = grad_buf(xi);
    const Eigen::VectorXd& d = grad_buf(ri);
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        gx.segment((std::int64_t(b) * C + c) * HW, HW) +=
            mask[c] * d.segment((std::int64_t(b) * C + c) * HW, HW);
  });
  return r;
}

NodeRef Tape::cross_entropy(NodeRef logits, const std::vector<int>& labels) {
  std::int64_t B = node(logits).value.view_rows(), K = node(logits).value.view_cols();
  if (static_cast<std::int64_t>(labels.size()) != B)
    shape_fail("cross_entropy", std::to_string(labels.size()) + " labels for " +
                                    std::to_string(B) + " rows");
  ConstMatMap lm(node(logits).value.values.data(), B, K);
  RowMat probs(B, K);
  double loss = 0.0;
  for (std::int64_t i = 0; i < B; ++i) {
    if (labels[i] < 0 || labels[i] >= K)
      shape_fail("cross_entropy", "label " + std::to_string(labels[i]) + " out of " +
                                      std::to_string(K) + " classes");
    Eigen::RowVectorXd z = lm.row(i).array() - lm.row(i).maxCoeff();
    double lse = std::log(z.array().exp().sum());
    probs.row(i) = (z.array() - lse).exp();
    loss -= z[labels[i]] - lse;
  }
  loss /= static_cast<double>(B);
  TensorBuf out({1}, Eigen::VectorXd::Constant(1, loss));
  NodeRef r = push(std::move(out), "cross_entropy");
  back_ops_.push_back([this, li = logits.i, ri = r.i, labels, probs, B, K] {
    double d = grad_buf(ri)[0];
    MatMap gl(grad_buf(li).data(), B, K);
    for (std::int64_t i = 0; i < B; ++i) {
      gl.row(i) += (d / static_cast<double>(B)) * probs.row(i);
      gl(i, labels[i]) -= d / static_cast<double>(B);
    }
  });
  return r;
}

NodeRef Tape::mse(NodeRef a, NodeRef b) {
  if (!same_shape(shape(a), shape(b)))
    shape_fail("mse", shape_str(shape(a)) + " vs " + shape_str(shape(b)));
  std::int64_t n = node(a).value.size();
  Eigen::VectorXd diff = node(a).value.values - node(b).value.values;
  TensorBuf out({1}, Eigen::VectorXd::Constant(1, diff.squaredNorm() / static_cast<double>(n)));
  NodeRef r = push(std::move(out), "mse");
  back_ops_.push_back([this, ai = a.i, bi = b.i, ri = r.i, n] {
    double d = grad_buf(ri)[0] * 2.0 / static_cast<double>(n);
    Eigen::VectorXd diff2 = nodes_[ai].value.values - nodes_[bi].value.values;
    grad_buf(ai) += d * diff2;
    grad_buf(bi) -= d * diff2;
  });
  return r;
}

NodeRef Tape::mean_all(NodeRef x) {
  std::int64_t n = node(x).value.size();
  TensorBuf out({1}, Eigen::VectorXd::Constant(1, node(x).value.values.mean()));
  NodeRef r = push(std::move(out), "mean_all");
  back_ops_.push_back([this, xi = x.i, ri = r.i, n] {
    grad_buf(xi).array() += grad_buf(ri)[0] / static_cast<double>(n);
  });
  return r;
}

NodeRef Tape::weighted_sum(const std::vector<std::pair<double, NodeRef>>& terms) {
  double acc = 0.0;
  for (const auto& [w, n] : terms) {
    if (node(n).value.size() != 1) shape_fail("weighted_sum", "non-scalar term " + describe(n));
    acc += w * node(n).value.values[0];
  }
  TensorBuf out({1}, Eigen::VectorXd::Constant(1, acc));
  NodeRef r = push(std::move(out), "weighted_sum");
  std::vector<std::pair<double, int>> caps;
  for (const auto& [w, n] : terms) caps.emplace_back(w, n.i);
  back_ops_.push_back([this, caps, ri = r.i] {
    double d = grad_buf(ri)[0];
    for (const auto& [w, i] : caps) grad_buf(i)[0] += w * d;
  });
  return r;
}

void Tape::backward(NodeRef root) {
  backward(root, Eigen::VectorXd::Ones(node(root).value.size()));
}

void Tape::backward(NodeRef root, const Eigen::VectorXd& seed) {
  if (backward_done_) throw StateError("tape: backward already run on this graph");
  if (back_ops_.empty() && nodes_.empty()) throw StateError("tape: backward before forward");
  if (seed.size() != node(root).value.size())
    throw ShapeError("backward: seed size " + std::to_string(seed.size()) + " vs root " +
                     std::to_string(node(root).value.size()));
  grad_buf(root.i) += seed;
  for (auto it = back_ops_.rbegin(); it != back_ops_.rend(); ++it) (*it)();
  for (Node& n : nodes_) {
    if (n.store != nullptr && n.grad.size() != 0) n.store->accumulate_grad(n.label, n.grad);
    if (n.grad.size() != 0 && !all_finite(n.grad))
      throw NumericError("backward: non-finite gradient at '" + n.label + "'");
  }
  backward_done_ = true;
}

}  // namespace acme
