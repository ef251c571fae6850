#include "uniref/autodiff.hpp"

#include <cmath>
#include <string>

namespace uniref::ad {
namespace {

void check_same_tape(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) throw InvalidArgument("vars belong to different tapes");
}

void check_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw InvalidArgument(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                          std::to_string(b.cols()));
}

constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC = 0.044715;

}  // namespace

Var Tape::constant(Mat value) { return push(std::move(value), false, nullptr); }

Var Tape::variable(Mat value) {
  nodes_.push_back(Node{std::move(value), Mat(), true, nullptr});
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::push(Mat value, bool requires_grad, Backward backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::backward(Var root) {
  if (root.tape != this) throw InvalidArgument("backward root belongs to another tape");
  if (nodes_[root.id].value.size() != 1) throw InvalidArgument("backward root must be a scalar");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  if (!nodes_[root.id].requires_grad) return;
  nodes_[root.id].grad = Mat::Ones(1, 1);
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.backward && n.grad.size() != 0) n.backward(*this, n.grad);
  }
}

Mat Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Var matmul(Var a, Var b) {
  check_same_tape(a, b);
  if (a.cols() != b.rows()) throw InvalidArgument("matmul: inner dimensions differ");
  Mat out = a.value() * b.value();
  const bool rg = a.tape->requires_grad(a) || a.tape->requires_grad(b);
  return a.tape->push(std::move(out), rg, [ia = a.id, ib = b.id](Tape& t, const Mat& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  check_same_tape(a, b);
  if (a.cols() != b.cols()) throw InvalidArgument("matmul_nt: inner dimensions differ");
  Mat out = a.value() * b.value().transpose();
  const bool rg = a.tape->requires_grad(a) || a.tape->requires_grad(b);
  return a.tape->push(std::move(out), rg, [ia = a.id, ib = b.id](Tape& t, const Mat& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib));
    if (t.requires_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
  });
}

Var linear(Var x, Var w, Var bias) {
  check_same_tape(x, w);
  check_same_tape(x, bias);
  if (x.cols() != w.rows()) throw InvalidArgument("linear: input width does not match weight rows");
  if (bias.rows() != 1 || bias.cols() != w.cols()) throw InvalidArgument("linear: bias shape mismatch");
  Mat out = x.value() * w.value();
  out.rowwise() += bias.value().row(0);
  Tape& tp = *x.tape;
  const bool rg = tp.requires_grad(x) || tp.requires_grad(w) || tp.requires_grad(bias);
  return tp.push(std::move(out), rg, [ix = x.id, iw = w.id, ib = bias.id](Tape& t, const Mat& g) {
    if (t.requires_grad(ix)) t.accumulate(ix, g * t.value(iw).transpose());
    if (t.requires_grad(iw)) t.accumulate(iw, t.value(ix).transpose() * g);
    if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
  });
}

Var add(Var a, Var b) {
  check_same_tape(a, b);
  check_same_shape(a.value(), b.value(), "add");
  Mat out = a.value() + b.value();
  const bool rg = a.tape->requires_grad(a) || a.tape->requires_grad(b);
  return a.tape->push(std::move(out), rg, [ia = a.id, ib = b.id](Tape& t, const Mat& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  check_same_tape(a, b);
  check_same_shape(a.value(), b.value(), "sub");
  Mat out = a.value() - b.value();
  const bool rg = a.tape->requires_grad(a) || a.tape->requires_grad(b);
  return a.tape->push(std::move(out), rg, [ia = a.id, ib = b.id](Tape& t, const Mat& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

Var mul(Var a, Var b) {
  check_same_tape(a, b);
  check_same_shape(a.value(), b.value(), "mul");
  Mat out = a.value().cwiseProduct(b.value());
  const bool rg = a.tape->requires_grad(a) || a.tape->requires_grad(b);
  return a.tape->push(std::move(out), rg, [ia = a.id, ib = b.id](Tape& t, const Mat& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

Var scale(Var a, double s) {
  Mat out = a.value() * s;
  return a.tape->push(std::move(out), a.tape->requires_grad(a),
                      [ia = a.id, s](Tape& t, const Mat& g) { t.accumulate(ia, g * s); });
}

Var add_row(Var a, Var row) {
  check_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw InvalidArgument("add_row: row shape mismatch");
  Mat out = a.value();
  out.rowwise() += row.value().row(0);
  const bool rg = a.tape->requires_grad(a) || a.tape->requires_grad(row);
  return a.tape->push(std::move(out), rg, [ia = a.id, ir = row.id](Tape& t, const Mat& g) {
    t.accumulate(ia, g);
    if (t.requires_grad(ir)) t.accumulate(ir, g.colwise().sum());
  });
}

namespace {

using Arr = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// tanh(u) = 1 - 2 / (exp(2u) + 1); goes through the vectorized exp.
Arr gelu_tanh(const Mat& x) {
  const auto a = x.array();
  const Arr u = kGeluK * (a + kGeluC * a.cube());
  return 1.0 - 2.0 / ((2.0 * u).exp() + 1.0);
}

}  // namespace

double gelu_value(double x) {
  Mat m(1, 1);
  m(0, 0) = x;
  return 0.5 * x * (1.0 + gelu_tanh(m)(0, 0));
}

Var gelu(Var x) {
  const Mat& xv = x.value();
  Arr th = gelu_tanh(xv);
  Mat out = (0.5 * xv.array() * (1.0 + th)).matrix();
  return x.tape->push(std::move(out), x.tape->requires_grad(x), [ix = x.id, th = std::move(th)](Tape& t, const Mat& g) {
    const auto v = t.value(ix).array();
    const Arr d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th.square()) * kGeluK * (1.0 + 3.0 * kGeluC * v.square());
    t.accumulate(ix, (g.array() * d).matrix());
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  check_same_tape(x, gain);
  check_same_tape(x, bias);
  const Mat& xv = x.value();
  const auto n = xv.rows(), d = xv.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d)
    throw InvalidArgument("layer_norm: gain/bias shape mismatch");
  Mat xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Mat out = xhat.array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  Tape& tp = *x.tape;
  const bool rg = tp.requires_grad(x) || tp.requires_grad(gain) || tp.requires_grad(bias);
  return tp.push(std::move(out), rg,
                 [ix = x.id, ig = gain.id, ib = bias.id, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                     Tape& t, const Mat& g) {
                   if (t.requires_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
                   if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
                   if (!t.requires_grad(ix)) return;
                   Mat dxhat = g.array().rowwise() * t.value(ig).row(0).array();
                   Mat dx(dxhat.rows(), dxhat.cols());
                   for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                     const double m1 = dxhat.row(r).mean();
                     const double m2 = dxhat.row(r).dot(xhat.row(r)) / double(dxhat.cols());
                     dx.row(r) = (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r);
                   }
                   t.accumulate(ix, dx);
                 });
}

namespace {

void softmax_inplace(Mat& m) {
  const Eigen::VectorXd mx = m.rowwise().maxCoeff();
  m.array().colwise() -= mx.array();
  m.array() = m.array().exp();
  const Eigen::VectorXd inv = m.rowwise().sum().cwiseInverse();
  m.array().colwise() *= inv.array();
}

// dS = P .* (dP - rowsum(dP .* P))
Mat softmax_backward(const Mat& p, const Mat& dp) {
  const Eigen::VectorXd dots = p.cwiseProduct(dp).rowwise().sum();
  return (p.array() * (dp.array().colwise() - dots.array())).matrix();
}

}  // namespace

Var softmax_rows(Var x) {
  Mat out = x.value();
  softmax_inplace(out);
  const int self = static_cast<int>(x.tape->size());
  return x.tape->push(std::move(out), x.tape->requires_grad(x), [ix = x.id, self](Tape& t, const Mat& g) {
    t.accumulate(ix, softmax_backward(t.value(self), g));
  });
}

Var attention(Var q, Var k, Var v, int heads) {
  check_same_tape(q, k);
  check_same_tape(q, v);
  const Mat& qv = q.value();
  const Mat& kv = k.value();
  const Mat& vv = v.value();
  if (qv.cols() != kv.cols() || qv.cols() != vv.cols() || kv.rows() != vv.rows())
    throw InvalidArgument("attention: q/k/v shapes disagree");
  if (heads < 1 || qv.cols() % heads != 0) throw InvalidArgument("attention: width not divisible by heads");
  const auto dh = qv.cols() / heads;
  const double sc = 1.0 / std::sqrt(double(dh));

  std::vector<Mat> probs(heads);
  Mat out(qv.rows(), qv.cols());
  for (int h = 0; h < heads; ++h) {
    Mat s(qv.rows(), kv.rows());
    s.noalias() = qv.middleCols(h * dh, dh) * kv.middleCols(h * dh, dh).transpose();
    s *= sc;
    softmax_inplace(s);
    out.middleCols(h * dh, dh).noalias() = s * vv.middleCols(h * dh, dh);
    probs[h] = std::move(s);
  }
  Tape& tp = *q.tape;
  const bool rg = tp.requires_grad(q) || tp.requires_grad(k) || tp.requires_grad(v);
  if (!rg) probs.clear();
  return tp.push(std::move(out), rg,
                 [iq = q.id, ik = k.id, iv = v.id, heads, dh, sc, probs = std::move(probs)](Tape& t, const Mat& g) {
                   const Mat& qv = t.value(iq);
                   const Mat& kv = t.value(ik);
                   const Mat& vv = t.value(iv);
                   Mat dq = Mat::Zero(qv.rows(), qv.cols());
                   Mat dk = Mat::Zero(kv.rows(), kv.cols());
                   Mat dv = Mat::Zero(vv.rows(), vv.cols());
                   for (int h = 0; h < heads; ++h) {
                     const Mat& p = probs[h];
                     const auto go = g.middleCols(h * dh, dh);
                     dv.middleCols(h * dh, dh).noalias() = p.transpose() * go;
                     Mat dp(p.rows(), p.cols());
                     dp.noalias() = go * vv.middleCols(h * dh, dh).transpose();
                     Mat ds = softmax_backward(p, dp);
                     ds *= sc;
                     dq.middleCols(h * dh, dh).noalias() = ds * kv.middleCols(h * dh, dh);
                     dk.middleCols(h * dh, dh).noalias() = ds.transpose() * qv.middleCols(h * dh, dh);
                   }
                   t.accumulate(iq, dq);
                   t.accumulate(ik, dk);
                   t.accumulate(iv, dv);
                 });
}

Var top_rows(Var a, Eigen::Index n) {
  if (n < 0 || n > a.rows()) throw InvalidArgument("top_rows: row count out of range");
  Mat out = a.value().topRows(n);
  return a.tape->push(std::move(out), a.tape->requires_grad(a), [ia = a.id, n](Tape& t, const Mat& g) {
    Mat full = Mat::Zero(t.value(ia).rows(), t.value(ia).cols());
    full.topRows(n) = g;
    t.accumulate(ia, full);
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_rows: no inputs");
  Tape& tp = *parts.front().tape;
  const auto cols = parts.front().cols();
  Eigen::Index rows = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.tape != &tp) throw InvalidArgument("concat_rows: vars belong to different tapes");
    if (p.cols() != cols) throw InvalidArgument("concat_rows: column mismatch");
    rows += p.rows();
    rg = rg || tp.requires_grad(p);
  }
  Mat out(rows, cols);
  std::vector<int> ids;
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    if (p.rows() > 0) out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
    ids.push_back(p.id);
  }
  return tp.push(std::move(out), rg, [ids = std::move(ids)](Tape& t, const Mat& g) {
    Eigen::Index r = 0;
    for (int id : ids) {
      const auto n = t.value(id).rows();
      if (t.requires_grad(id) && n > 0) t.accumulate(id, g.middleRows(r, n));
      r += n;
    }
  });
}

Var gather_rows(Var table, const std::vector<int>& ids) {
  const Mat& tv = table.value();
  Mat out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows())
      throw InvalidArgument("gather_rows: index " + std::to_string(ids[i]) + " out of range");
    out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  return table.tape->push(std::move(out), table.tape->requires_grad(table),
                          [it = table.id, ids](Tape& t, const Mat& g) {
                            Mat full = Mat::Zero(t.value(it).rows(), t.value(it).cols());
                            for (std::size_t i = 0; i < ids.size(); ++i)
                              full.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
                            t.accumulate(it, full);
                          });
}

Var sum(Var a) {
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape->push(std::move(out), a.tape->requires_grad(a), [ia = a.id](Tape& t, const Mat& g) {
    t.accumulate(ia, Mat::Constant(t.value(ia).rows(), t.value(ia).cols(), g(0, 0)));
  });
}

Var sum_square(Var a) {
  Mat out(1, 1);
  out(0, 0) = a.value().squaredNorm();
  return a.tape->push(std::move(out), a.tape->requires_grad(a),
                      [ia = a.id](Tape& t, const Mat& g) { t.accumulate(ia, t.value(ia) * (2.0 * g(0, 0))); });
}

Var mean_square(Var a) {
  const double n = double(a.value().size());
  if (n == 0) throw InvalidArgument("mean_square of an empty matrix");
  return scale(sum_square(a), 1.0 / n);
}

}  // namespace uniref::ad
