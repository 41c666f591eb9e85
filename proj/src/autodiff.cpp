#include "csaw/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <utility>

namespace csaw::ad {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using MapCM = Eigen::Map<const EMat>;

const Tensor& Var::val() const { return g->val(id); }
const Tensor& Var::grad() const { return g->grad(id); }
bool Var::requires_grad() const { return g->req(id); }

Var Graph::emplace(Tensor v, bool req, std::function<void(Graph&, int)> back) {
  Node n;
  n.value = std::move(v);
  n.req = req;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Tensor& Graph::grad_acc(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
  return n.grad;
}

const Tensor& Graph::grad(int id) const {
  const Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.empty()) throw Error("gradient not computed for node " + std::to_string(id));
  return n.grad;
}

void Graph::backward(Var loss) {
  if (loss.g != this) throw Error("backward: node belongs to another graph");
  if (val(loss.id).numel() != 1) throw Error("backward: loss must be scalar");
  grad_acc(loss.id).fill(1.0);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.req || n.grad.empty() || !n.back) continue;
    n.back(*this, i);
  }
}

namespace {

void check_same_graph(Var a, Var b) {
  if (a.g != b.g) throw Error("operands belong to different graphs");
}

bool any_req(std::initializer_list<Var> vs) {
  for (Var v : vs)
    if (v.requires_grad()) return true;
  return false;
}

// Accumulate src into the grad of node `pid` if it requires grad.
void acc_into(Graph& g, int pid, const Tensor& src) {
  if (!g.req(pid)) return;
  Tensor& dst = g.grad_acc(pid);
  double* d = dst.mut();
  const double* s = src.data();
  const std::int64_t n = dst.numel();
  for (std::int64_t i = 0; i < n; ++i) d[i] += s[i];
}

}  // namespace

// ---------- elementwise ----------

static Var elementwise2(Var a, Var b, double (*fwd)(double, double),
                        void (*bwd)(double, double, double, double&, double&)) {
  check_same_graph(a, b);
  if (!a.val().same_shape(b.val()))
    throw Error("elementwise op shape mismatch " + a.val().shape_str() + " vs " + b.val().shape_str());
  Tensor out(a.shape());
  {
    double* o = out.mut();
    const double* pa = a.val().data();
    const double* pb = b.val().data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) o[i] = fwd(pa[i], pb[i]);
  }
  bool req = any_req({a, b});
  int ai = a.id, bi = b.id;
  auto fb = bwd;
  return a.g->emplace(std::move(out), req, !req ? nullptr : std::function<void(Graph&, int)>([ai, bi, fb](Graph& g, int self) {
    const Tensor& gr = g.grad(self);
    const Tensor& va = g.val(ai);
    const Tensor& vb = g.val(bi);
    const std::int64_t n = gr.numel();
    const bool ra = g.req(ai), rb = g.req(bi);
    double* da = ra ? g.grad_acc(ai).mut() : nullptr;
    double* db = rb ? g.grad_acc(bi).mut() : nullptr;
    for (std::int64_t i = 0; i < n; ++i) {
      double ga = 0, gb = 0;
      fb(va[i], vb[i], gr[i], ga, gb);
      if (da) da[i] += ga;
      if (db) db[i] += gb;
    }
  }));
}

Var add(Var a, Var b) {
  return elementwise2(
      a, b, [](double x, double y) { return x + y; },
      [](double, double, double g, double& ga, double& gb) { ga = g; gb = g; });
}

Var sub(Var a, Var b) {
  return elementwise2(
      a, b, [](double x, double y) { return x - y; },
      [](double, double, double g, double& ga, double& gb) { ga = g; gb = -g; });
}

Var mul(Var a, Var b) {
  return elementwise2(
      a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& ga, double& gb) { ga = g * y; gb = g * x; });
}

static Var elementwise1(Var a, double (*fwd)(double), double (*dfd)(double, double)) {
  Tensor out(a.shape());
  {
    double* o = out.mut();
    const double* p = a.val().data();
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) o[i] = fwd(p[i]);
  }
  bool req = a.requires_grad();
  int ai = a.id;
  auto df = dfd;
  return a.g->emplace(std::move(out), req, !req ? nullptr : std::function<void(Graph&, int)>([ai, df](Graph& g, int self) {
    const Tensor& gr = g.grad(self);
    const Tensor& y = g.val(self);
    const Tensor& x = g.val(ai);
    double* da = g.grad_acc(ai).mut();
    const std::int64_t n = gr.numel();
    for (std::int64_t i = 0; i < n; ++i) da[i] += gr[i] * df(x[i], y[i]);
  }));
}

Var scale(Var a, double c) {
  Tensor out(a.shape());
  double* o = out.mut();
  const double* p = a.val().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) o[i] = p[i] * c;
  bool req = a.requires_grad();
  int ai = a.id;
  return a.g->emplace(std::move(out), req, !req ? nullptr : std::function<void(Graph&, int)>([ai, c](Graph& g, int self) {
    const Tensor& gr = g.grad(self);
    double* da = g.grad_acc(ai).mut();
    for (std::int64_t i = 0; i < gr.numel(); ++i) da[i] += gr[i] * c;
  }));
}

Var add_scalar(Var a, double c) {
  Tensor out(a.shape());
  double* o = out.mut();
  const double* p = a.val().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) o[i] = p[i] + c;
  bool req = a.requires_grad();
  int ai = a.id;
  return a.g->emplace(std::move(out), req, !req ? nullptr : std::function<void(Graph&, int)>([ai](Graph& g, int self) {
    acc_into(g, ai, g.grad(self));
  }));
}

Var relu(Var a) {
  return elementwise1(
      a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a) {
  return elementwise1(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Var sqrt_elem(Var a) {
  const double* p = a.val().data();
  for (std::int64_t i = 0; i < a.val().numel(); ++i)
    if (p[i] < 0) throw Error("sqrt_elem: negative input");
  return elementwise1(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / std::max(y, 1e-150); });
}

Var log_clamped(Var a, double lo, bool* clamped) {
  if (clamped) {
    const double* p = a.val().data();
    for (std::int64_t i = 0; i < a.val().numel(); ++i)
      if (p[i] < lo) *clamped = true;
  }
  Tensor out(a.shape());
  double* o = out.mut();
  const double* p = a.val().data();
  for (std::int64_t i = 0; i < out.numel(); ++i) o[i] = std::log(std::max(p[i], lo));
  bool req = a.requires_grad();
  int ai = a.id;
  return a.g->emplace(std::move(out), req, !req ? nullptr : std::function<void(Graph&, int)>([ai, lo](Graph& g, int self) {
    const Tensor& gr = g.grad(self);
    const Tensor& x = g.val(ai);
    double* da = g.grad_acc(ai).mut();
    for (std::int64_t i = 0; i < gr.numel(); ++i)
      if (x[i] > lo) da[i] += gr[i] / x[i];
  }));
}

Var xlogx(Var a) {
  constexpr double kLo = 1e-12;
  return elementwise1(
      a, [](double x) { return x > 1e-12 ? x * std::log(x) : 0.0; },
      [](double x, double) { return x > 1e-12 ? std::log(x) + 1.0 : 0.0; });
  (void)kLo;
}

// ---------- linear algebra ----------

Var matmul(Var a, Var b) {
  check_same_graph(a, b);
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
    throw Error("matmul shape mismatch " + A.shape_str() + " x " + B.shape_str());
  const int m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor out({m, n});
  MapM(out.mut(), m, n).noalias() = MapCM(A.data(), m, k) * MapCM(B.data(), k, n);
  bool req = any_req({a, b});
  int ai = a.id, bi = b.id;
  return a.g->emplace(std::move(out), req, !req ? nullptr : std::function<void(Graph&, int)>([ai, bi, m, k, n](Graph& g, int self) {
    MapCM G(g.grad(self).data(), m, n);
    if (g.req(ai)) {
      MapCM B(g.val(bi).data(), k, n);
      MapM(g.grad_acc(ai).mut(), m, k).noalias() += G * B.transpose();
    }
    if (g.req(bi)) {
      MapCM A(g.val(ai).data(), m, k);
      MapM(g.grad_acc(bi).mut(), k, n).noalias() += A.transpose() * G;
    }
  }));
}

Var transpose(Var a) {
  const Tensor& A = a.val();
  if (A.rank() != 2) throw Error("transpose expects rank-2, got " + A.shape_str());
  const int m = A.dim(0), n = A.dim(1);
  Tensor out({n, m});
  MapM(out.mut(), n, m) = MapCM(A.data(), m, n).transpose();
  bool req = a.requires_grad();
  int ai = a.id;
  return a.g->emplace(std::move(out), req, !req ? nullptr : std::function<void(Graph&, int)>([ai, m, n](Graph& g, int self) {
    MapCM G(g.grad(self).data(), n, m);
    MapM(g.grad_acc(ai).mut(), m, n).noalias() += G.transpose();
  }));
}

Var linear(Var x, Var w, Var b) {
  check_same_graph(x, w);
  check_same_graph(x, b);
  const Tensor& X = x.val();
  const Tensor& W = w.val();
  const Tensor& B = b.val();
  if (X.rank() != 2 || W.rank() != 2 || X.dim(1) != W.dim(1))
    throw Error("linear shape mismatch x" + X.shape_str() + " w" + W.shape_str());
  const int n = X.dim(0), in = X.dim(1), out_dim = W.dim(0);
  if (B.rank() != 1 || B.dim(0) != out_dim)
    throw Error("linear bias shape mismatch " + B.shape_str());
  Tensor out({n, out_dim});
  {
    MapM O(out.mut(), n, out_dim);
    O.noalias() = MapCM(X.data(), n, in) * MapCM(W.data(), out_dim, in).transpose();
    O.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(B.data(), out_dim);
  }
  bool req = any_req({x, w, b});
  int xi = x.id, wi = w.id, bi = b.id;
  return x.g->emplace(std::move(out), req, !req ? nullptr : std::function<void(Graph&, int)>([xi, wi, bi, n, in, out_dim](Graph& g, int self) {
    MapCM G(g.grad(self).data(), n, out_dim);
    if (g.req(xi)) {
      MapCM W(g.val(wi).data(), out_dim, in);
      MapM(g.grad_acc(xi).mut(), n, in).noalias() += G * W;
    }
    if (g.req(wi)) {
      MapCM X(g.val(xi).data(), n, in);
      MapM(g.grad_acc(wi).mut(), out_dim, in).noalias() += G.transpose() * X;
    }
    if (g.req(bi)) {
      Eigen::Map<Eigen::VectorXd> db(g.grad_acc(bi).mut(), out_dim);
      db.noalias() += G.colwise().sum().transpose();
    }
  }));
}

Var softmax_rows(Var a) {
  const Tensor& A = a.val();
  if (A.rank() != 2) throw Error("softmax_rows expects rank-2, got " + A.shape_str());
  const int rows = A.dim(0), cols = A.dim(1);
  Tensor out({rows, cols});
  double* o = out.mut();
  const double* p = A.data();
  for (int r = 0; r < rows; ++r) {
    const double* x = p + static_cast<std::int64_t>(r) * cols;
    double* y = o + static_cast<std::int64_t>(r) * cols;
    double mx = x[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    double s = 0;
    for (int c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - mx);
      s += y[c];
    }
    for (int c = 0; c < cols; ++c) y[c] /= s;
  }
  bool req = a.requires_grad();
  int ai = a.id;
  return a.g->emplace(std::move(out), req, !req ? nullptr : std::function<void(Graph&, int)>([ai, rows, cols](Graph& g, int self) {
    const Tensor& gr = g.grad(self);
    const Tensor& y = g.val(self);
    double* da = g.grad_acc(ai).mut();
    for (int r = 0; r < rows; ++r) {
      const std::int64_t off = static_cast<std::int64_t>(r) * cols;
      double dot = 0;
      for (int c = 0; c < cols; ++c) dot += gr[off + c] * y[off + c];
      for (int c = 0; c < cols; ++c) da[off + c] += y[off + c] * (gr[off + c] - dot);
    }
  }));
}

Var l2_normalize_rows(Var a) {
  const Tensor& A = a.val();
  if (A.rank() != 2) throw Error("l2_normalize_rows expects rank-2, got " + A.shape_str());
  const int rows = A.dim(0), cols = A.dim(1);
  Tensor out({rows, cols});
  std::vector<double> norms(static_cast<size_t>(rows));
  {
    double* o = out.mut();
    const double* p = A.data();
    for (int r = 0; r < rows; ++r) {
      const std::int64_t off = static_cast<std::int64_t>(r) * cols;
      double s = 0;
      for (int c = 0; c < cols; ++c) s += p[off + c] * p[off + c];
      double nrm = std::sqrt(s);
      if (nrm < 1e-300) throw Error("l2_normalize_rows: zero-norm row " + std::to_string(r));
      norms[static_cast<size_t>(r)] = nrm;
      for (int c = 0; c < cols; ++c) o[off + c] = p[off + c] / nrm;
    }
  }
  bool req = a.requires_grad();
  int ai = a.id;
  return a.g->emplace(std::move(out), req, !req ? nullptr : std::function<void(Graph&, int)>([ai, rows, cols, norms](Graph& g, int self) {
    const Tensor& gr = g.grad(self);
    const Tensor& y = g.val(self);
    double* da = g.grad_acc(ai).mut();
    for (int r = 0; r < rows; ++r) {
      const std::int64_t off = static_cast<std::int64_t>(r) * cols;
      double dot = 0;
      for (int c = 0; c < cols; ++c) dot += gr[off + c] * y[off + c];
      const double inv = 1.0 / norms[static_cast<size_t>(r)];
      for (int c = 0; c < cols; ++c) da[off + c] += (gr[off + c] - y[off + c] * dot) * inv;
    }
  }));
}

Var layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  check_same_graph(x, gamma);
  check_same_graph(x, beta);
  const Tensor& X = x.val();
  if (X.rank() != 2) throw Error("layer_norm_rows expects rank-2, got " + X.shape_str());
  const int rows = X.dim(0), cols = X.dim(1);
  if (gamma.val().numel() != cols || beta.val().numel() != cols)
    throw Error("layer_norm_rows affine shape mismatch");
  Tensor out({rows, cols});
  Tensor xhat({rows, cols});
  std::vector<double> inv_std(static_cast<size_t>(rows));
  {
    double* o = out.mut();
    double* xh = xhat.mut();
    const double* p = X.data();
    const double* gm = gamma.val().data();
    const double* bt = beta.val().data();
    for (int r = 0; r < rows; ++r) {
      const std::int64_t off = static_cast<std::int64_t>(r) * cols;
      double m = 0;
      for (int c = 0; c < cols; ++c) m += p[off + c];
      m /= cols;
      double v = 0;
      for (int c = 0; c < cols; ++c) {
        const double d = p[off + c] - m;
        v += d * d;
      }
      v /= cols;
      const double is = 1.0 / std::sqrt(v + eps);
      inv_std[static_cast<size_t>(r)] = is;
      for (int c = 0; c < cols; ++c) {
        xh[off + c] = (p[off + c] - m) * is;
        o[off + c] = gm[c] * xh[off + c] + bt[c];
      }
    }
  }
  bool req = any_req({x, gamma, beta});
  int xi = x.id, gi = gamma.id, bi = beta.id;
  return x.g->emplace(std::move(out), req, !req ? nullptr : std::function<void(Graph&, int)>([xi, gi, bi, rows, cols, xhat, inv_std](Graph& g, int self) {
    const Tensor& gr = g.grad(self);
    const double* gm = g.val(gi).data();
    const double* xh = xhat.data();
    if (g.req(gi)) {
      double* dg = g.grad_acc(gi).mut();
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) dg[c] += gr[r * cols + c] * xh[r * cols + c];
    }
    if (g.req(bi)) {
      double* db = g.grad_acc(bi).mut();
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) db[c] += gr[r * cols + c];
    }
    if (g.req(xi)) {
      double* dx = g.grad_acc(xi).mut();
      for (int r = 0; r < rows; ++r) {
        const std::int64_t off = static_cast<std::int64_t>(r) * cols;
        double m1 = 0, m2 = 0;
        for (int c = 0; c < cols; ++c) {
          const double dxh = gr[off + c] * gm[c];
          m1 += dxh;
          m2 += dxh * xh[off + c];
        }
        m1 /= cols;
        m2 /= cols;
        const double is = inv_std[static_cast<size_t>(r)];
        for (int c = 0; c < cols; ++c) {
          const double dxh = gr[off + c] * gm[c];
          dx[off + c] += (dxh - m1 - xh[off + c] * m2) * is;
        }
      }
    }
  }));
}

// ---------- reductions / indexing ----------

Var colwise_mean(Var a) {
  const Tensor& A = a.val();
  if (A.rank() != 2) throw Error("colwise_mean expects rank-2, got " + A.shape_str());
  const int rows = A.dim(0), cols = A.dim(1);
  if (rows == 0) throw Error("colwise_mean: empty batch");
  Tensor out({cols});
  double* o = out.mut();
  const double* p = A.data();
  for (int c = 0; c < cols; ++c) o[c] = 0;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) o[c] += p[r * cols + c];
  for (int c = 0; c < cols; ++c) o[c] /= rows;
  bool req = a.requires_grad();
  int ai = a.id;
  return a.g->emplace(std::move(out), req, !req ? nullptr : std::function<void(Graph&, int)>([ai, rows, cols](Graph& g, int self) {
    const Tensor& gr = g.grad(self);
    double* da = g.grad_acc(ai).mut();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) da[r * cols + c] += gr[c] / rows;
  }));
}

static Var row_broadcast(Var a, Var v, int mode) {  // 0 add, 1 sub, 2 div
  check_same_graph(a, v);
  const Tensor& A = a.val();
  const Tensor& V = v.val();
  if (A.rank() != 2 || V.rank() != 1 || V.dim(0) != A.dim(1))
    throw Error("row broadcast shape mismatch " + A.shape_str() + " vs " + V.shape_str());
  const int rows = A.dim(0), cols = A.dim(1);
  Tensor out({rows, cols});
  {
    double* o = out.mut();
    const double* p = A.data();
    const double* q = V.data();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        const double x = p[r * cols + c];
        o[r * cols + c] = mode == 0 ? x + q[c] : mode == 1 ? x - q[c] : x / q[c];
      }
  }
  bool req = any_req({a, v});
  int ai = a.id, vi = v.id;
  return a.g->emplace(std::move(out), req, !req ? nullptr : std::function<void(Graph&, int)>([ai, vi, rows, cols, mode](Graph& g, int self) {
    const Tensor& gr = g.grad(self);
    const double* q = g.val(vi).data();
    if (g.req(ai)) {
      double* da = g.grad_acc(ai).mut();
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
          da[r * cols + c] += mode == 2 ? gr[r * cols + c] / q[c] : gr[r * cols + c];
    }
    if (g.req(vi)) {
      double* dv = g.grad_acc(vi).mut();
      const Tensor& y = g.val(self);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
          const double gg = gr[r * cols + c];
          if (mode == 0) dv[c] += gg;
          else if (mode == 1) dv[c] -= gg;
          else dv[c] -= gg * y[r * cols + c] / q[c];
        }
    }
  }));
}

Var row_broadcast_add(Var a, Var v) { return row_broadcast(a, v, 0); }
Var row_broadcast_sub(Var a, Var v) { return row_broadcast(a, v, 1); }
Var row_broadcast_div(Var a, Var v) { return row_broadcast(a, v, 2); }

Var diag(Var a) {
  const Tensor& A = a.val();
  if (A.rank() != 2 || A.dim(0) != A.dim(1))
    throw Error("diag expects square matrix, got " + A.shape_str());
  const int n = A.dim(0);
  Tensor out({n});
  double* o = out.mut();
  for (int i = 0; i < n; ++i) o[i] = A[static_cast<std::int64_t>(i) * n + i];
  bool req = a.requires_grad();
  int ai = a.id;
  return a.g->emplace(std::move(out), req, !req ? nullptr : std::function<void(Graph&, int)>([ai, n](Graph& g, int self) {
    const Tensor& gr = g.grad(self);
    double* da = g.grad_acc(ai).mut();
    for (int i = 0; i < n; ++i) da[static_cast<std::int64_t>(i) * n + i] += gr[i];
  }));
}

Var gather_rows(Var p, std::vector<int> cols) {
  const Tensor& P = p.val();
  if (P.rank() != 2) throw Error("gather_rows expects rank-2, got " + P.shape_str());
  const int rows = P.dim(0), k = P.dim(1);
  if (static_cast<int>(cols.size()) != rows) throw Error("gather_rows: one index per row required");
  for (int c : cols)
    if (c < 0 || c >= k) throw Error("gather_rows: index " + std::to_string(c) + " out of [0," + std::to_string(k) + ")");
  Tensor out({rows});
  double* o = out.mut();
  for (int r = 0; r < rows; ++r) o[r] = P[static_cast<std::int64_t>(r) * k + cols[static_cast<size_t>(r)]];
  bool req = p.requires_grad();
  int pi = p.id;
  return p.g->emplace(std::move(out), req, !req ? nullptr : std::function<void(Graph&, int)>([pi, rows, k, cols](Graph& g, int self) {
    const Tensor& gr = g.grad(self);
    double* dp = g.grad_acc(pi).mut();
    for (int r = 0; r < rows; ++r) dp[static_cast<std::int64_t>(r) * k + cols[static_cast<size_t>(r)]] += gr[r];
  }));
}

Var min_rows(Var p) {
  const Tensor& P = p.val();
  if (P.rank() != 2) throw Error("min_rows expects rank-2, got " + P.shape_str());
  const int rows = P.dim(0), k = P.dim(1);
  if (k == 0) throw Error("min_rows: empty rows");
  Tensor out({rows});
  std::vector<int> arg(static_cast<size_t>(rows), 0);
  double* o = out.mut();
  for (int r = 0; r < rows; ++r) {
    const std::int64_t off = static_cast<std::int64_t>(r) * k;
    int best = 0;
    for (int c = 1; c < k; ++c)
      if (P[off + c] < P[off + best]) best = c;
    arg[static_cast<size_t>(r)] = best;
    o[r] = P[off + best];
  }
  bool req = p.requires_grad();
  int pi = p.id;
  return p.g->emplace(std::move(out), req, !req ? nullptr : std::function<void(Graph&, int)>([pi, rows, k, arg](Graph& g, int self) {
    const Tensor& gr = g.grad(self);
    double* dp = g.grad_acc(pi).mut();
    for (int r = 0; r < rows; ++r) dp[static_cast<std::int64_t>(r) * k + arg[static_cast<size_t>(r)]] += gr[r];
  }));
}

Var sum_all(Var a) {
  const Tensor& A = a.val();
  double s = 0;
  const double* p = A.data();
  for (std::int64_t i = 0; i < A.numel(); ++i) s += p[i];
  bool req = a.requires_grad();
  int ai = a.id;
  return a.g->emplace(Tensor::scalar(s), req, !req ? nullptr : std::function<void(Graph&, int)>([ai](Graph& g, int self) {
    const double gg = g.grad(self)[0];
    Tensor& da = g.grad_acc(ai);
    double* d = da.mut();
    for (std::int64_t i = 0; i < da.numel(); ++i) d[i] += gg;
  }));
}

Var mean_all(Var a) {
  const std::int64_t n = a.val().numel();
  if (n == 0) throw Error("mean_all: empty tensor");
  return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

Var sample_sqnorm(Var a) {
  const Tensor& A = a.val();
  if (A.rank() < 1) throw Error("sample_sqnorm expects rank>=1");
  const int n = A.dim(0);
  const std::int64_t per = n > 0 ? A.numel() / n : 0;
  Tensor out({n});
  double* o = out.mut();
  const double* p = A.data();
  for (int r = 0; r < n; ++r) {
    double s = 0;
    const double* x = p + r * per;
    for (std::int64_t i = 0; i < per; ++i) s += x[i] * x[i];
    o[r] = s;
  }
  bool req = a.requires_grad();
  int ai = a.id;
  return a.g->emplace(std::move(out), req, !req ? nullptr : std::function<void(Graph&, int)>([ai, n, per](Graph& g, int self) {
    const Tensor& gr = g.grad(self);
    const Tensor& x = g.val(ai);
    double* da = g.grad_acc(ai).mut();
    for (int r = 0; r < n; ++r) {
      const double gg = gr[r];
      const std::int64_t off = r * per;
      for (std::int64_t i = 0; i < per; ++i) da[off + i] += 2.0 * x[off + i] * gg;
    }
  }));
}

Var concat_rows(Var a, Var b) {
  check_same_graph(a, b);
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(1))
    throw Error("concat_rows shape mismatch " + A.shape_str() + " vs " + B.shape_str());
  const int r1 = A.dim(0), r2 = B.dim(0), cols = A.dim(1);
  Tensor out({r1 + r2, cols});
  double* o = out.mut();
  std::copy(A.data(), A.data() + A.numel(), o);
  std::copy(B.data(), B.data() + B.numel(), o + A.numel());
  bool req = any_req({a, b});
  int ai = a.id, bi = b.id;
  return a.g->emplace(std::move(out), req, !req ? nullptr : std::function<void(Graph&, int)>([ai, bi, r1, r2, cols](Graph& g, int self) {
    const Tensor& gr = g.grad(self);
    if (g.req(ai)) {
      double* da = g.grad_acc(ai).mut();
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(r1) * cols; ++i) da[i] += gr[i];
    }
    if (g.req(bi)) {
      double* db = g.grad_acc(bi).mut();
      const std::int64_t off = static_cast<std::int64_t>(r1) * cols;
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(r2) * cols; ++i) db[i] += gr[off + i];
    }
  }));
}

Var slice_rows(Var a, int r0, int r1) {
  const Tensor& A = a.val();
  if (A.rank() != 2 || r0 < 0 || r1 > A.dim(0) || r0 >= r1)
    throw Error("slice_rows bad range on " + A.shape_str());
  const int cols = A.dim(1);
  Tensor out({r1 - r0, cols});
  std::copy(A.data() + static_cast<std::int64_t>(r0) * cols, A.data() + static_cast<std::int64_t>(r1) * cols, out.mut());
  bool req = a.requires_grad();
  int ai = a.id;
  return a.g->emplace(std::move(out), req, !req ? nullptr : std::function<void(Graph&, int)>([ai, r0, r1, cols](Graph& g, int self) {
    const Tensor& gr = g.grad(self);
    double* da = g.grad_acc(ai).mut();
    const std::int64_t off = static_cast<std::int64_t>(r0) * cols;
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(r1 - r0) * cols; ++i) da[off + i] += gr[i];
  }));
}

Var slice_cols(Var a, int c0, int c1) {
  const Tensor& A = a.val();
  if (A.rank() != 2 || c0 < 0 || c1 > A.dim(1) || c0 >= c1)
    throw Error("slice_cols bad range on " + A.shape_str());
  const int rows = A.dim(0), cols = A.dim(1), w = c1 - c0;
  Tensor out({rows, w});
  double* o = out.mut();
  const double* p = A.data();
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < w; ++c) o[r * w + c] = p[static_cast<std::int64_t>(r) * cols + c0 + c];
  bool req = a.requires_grad();
  int ai = a.id;
  return a.g->emplace(std::move(out), req, !req ? nullptr : std::function<void(Graph&, int)>([ai, rows, cols, c0, w](Graph& g, int self) {
    const Tensor& gr = g.grad(self);
    double* da = g.grad_acc(ai).mut();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < w; ++c) da[static_cast<std::int64_t>(r) * cols + c0 + c] += gr[r * w + c];
  }));
}

Var reshape(Var a, std::vector<int> shape) {
  Tensor out = a.val().reshaped(shape);
  bool req = a.requires_grad();
  int ai = a.id;
  return a.g->emplace(std::move(out), req, !req ? nullptr : std::function<void(Graph&, int)>([ai](Graph& g, int self) {
    const Tensor& gr = g.grad(self);
    double* da = g.grad_acc(ai).mut();
    for (std::int64_t i = 0; i < gr.numel(); ++i) da[i] += gr[i];
  }));
}

Var add_constmat(Var a, const Tensor& m) {
  if (!a.val().same_shape(m))
    throw Error("add_constmat shape mismatch " + a.val().shape_str() + " vs " + m.shape_str());
  Tensor out(a.shape());
  double* o = out.mut();
  const double* p = a.val().data();
  const double* q = m.data();
  for (std::int64_t i = 0; i < out.numel(); ++i) o[i] = p[i] + q[i];
  bool req = a.requires_grad();
  int ai = a.id;
  return a.g->emplace(std::move(out), req, !req ? nullptr : std::function<void(Graph&, int)>([ai](Graph& g, int self) {
    acc_into(g, ai, g.grad(self));
  }));
}

// ---------- conv / image ----------

namespace {

// Valid (k, in) pairs for one transposed-convolution output coordinate.
struct Taps {
  std::vector<std::vector<std::pair<int, int>>> at;  // per output coord: (kernel, input)
};

Taps make_taps(int out_size, int in_size, int kernel, int stride, int pad) {
  Taps t;
  t.at.resize(static_cast<size_t>(out_size));
  for (int y = 0; y < out_size; ++y) {
    for (int k = (y + pad) % stride; k < kernel; k += stride) {
      const int iy = (y + pad - k) / stride;
      if (iy >= 0 && iy < in_size) t.at[static_cast<size_t>(y)].push_back({k, iy});
    }
  }
  return t;
}

}  // namespace

Var conv_transpose2d(Var x, Var w, Var b, int stride, int pad, int out_pad) {
  check_same_graph(x, w);
  check_same_graph(x, b);
  const Tensor& X = x.val();
  const Tensor& W = w.val();
  const Tensor& B = b.val();
  if (X.rank() != 4 || W.rank() != 4) throw Error("conv_transpose2d expects 4-D x and w");
  const int N = X.dim(0), Ci = X.dim(1), H = X.dim(2), Wd = X.dim(3);
  if (W.dim(0) != Ci) throw Error("conv_transpose2d: weight in-channels " + std::to_string(W.dim(0)) +
                                  " != input channels " + std::to_string(Ci));
  const int Co = W.dim(1), kh = W.dim(2), kw = W.dim(3);
  if (B.numel() != Co) throw Error("conv_transpose2d bias size mismatch");
  const int OH = (H - 1) * stride - 2 * pad + kh + out_pad;
  const int OW = (Wd - 1) * stride - 2 * pad + kw + out_pad;
  if (OH <= 0 || OW <= 0) throw Error("conv_transpose2d: non-positive output size");
  const Taps ty = make_taps(OH, H, kh, stride, pad);
  const Taps tx = make_taps(OW, Wd, kw, stride, pad);

  Tensor out({N, Co, OH, OW});
  {
    double* o = out.mut();
    const double* px = X.data();
    const double* pw = W.data();
    const double* pb = B.data();
    for (int n = 0; n < N; ++n)
      for (int co = 0; co < Co; ++co) {
        double* op = o + ((static_cast<std::int64_t>(n) * Co + co) * OH) * OW;
        for (int y = 0; y < OH; ++y) {
          const auto& ys = ty.at[static_cast<size_t>(y)];
          for (int xo = 0; xo < OW; ++xo) {
            const auto& xs = tx.at[static_cast<size_t>(xo)];
            double acc = pb[co];
            for (const auto& [ky, iy] : ys)
              for (const auto& [kx, ix] : xs) {
                const double* xrow = px + ((static_cast<std::int64_t>(n) * Ci) * H + iy) * Wd + ix;
                const double* wrow = pw + (static_cast<std::int64_t>(co) * kh + ky) * kw + kx;
                for (int ci = 0; ci < Ci; ++ci)
                  acc += xrow[static_cast<std::int64_t>(ci) * H * Wd] *
                         wrow[static_cast<std::int64_t>(ci) * Co * kh * kw];
              }
            op[static_cast<std::int64_t>(y) * OW + xo] = acc;
          }
        }
      }
  }
  bool req = any_req({x, w, b});
  int xi = x.id, wi = w.id, bi = b.id;
  return x.g->emplace(std::move(out), req, !req ? nullptr : std::function<void(Graph&, int)>(
      [xi, wi, bi, N, Ci, H, Wd, Co, kh, kw, OH, OW, ty, tx](Graph& g, int self) {
        const Tensor& gr = g.grad(self);
        const double* pg = gr.data();
        const double* px = g.val(xi).data();
        const double* pw = g.val(wi).data();
        const bool rx = g.req(xi), rw = g.req(wi), rb = g.req(bi);
        double* dx = rx ? g.grad_acc(xi).mut() : nullptr;
        double* dw = rw ? g.grad_acc(wi).mut() : nullptr;
        if (rb) {
          double* db = g.grad_acc(bi).mut();
          for (int n = 0; n < N; ++n)
            for (int co = 0; co < Co; ++co) {
              const double* gp = pg + ((static_cast<std::int64_t>(n) * Co + co) * OH) * OW;
              double s = 0;
              for (std::int64_t i = 0; i < static_cast<std::int64_t>(OH) * OW; ++i) s += gp[i];
              db[co] += s;
            }
        }
        if (!rx && !rw) return;
        for (int n = 0; n < N; ++n)
          for (int y = 0; y < OH; ++y) {
            const auto& ys = ty.at[static_cast<size_t>(y)];
            for (int xo = 0; xo < OW; ++xo) {
              const auto& xs = tx.at[static_cast<size_t>(xo)];
              for (const auto& [ky, iy] : ys)
                for (const auto& [kx, ix] : xs)
                  for (int ci = 0; ci < Ci; ++ci) {
                    const std::int64_t xoff = ((static_cast<std::int64_t>(n) * Ci + ci) * H + iy) * Wd + ix;
                    const std::int64_t woff0 = ((static_cast<std::int64_t>(ci) * Co) * kh + ky) * kw + kx;
                    for (int co = 0; co < Co; ++co) {
                      const double gg = pg[((static_cast<std::int64_t>(n) * Co + co) * OH + y) * OW + xo];
                      const std::int64_t woff = woff0 + static_cast<std::int64_t>(co) * kh * kw;
                      if (dx) dx[xoff] += gg * pw[woff];
                      if (dw) dw[woff] += gg * px[xoff];
                    }
                  }
            }
          }
      }));
}

namespace {

struct Lerp {
  std::vector<int> i0, i1;
  std::vector<double> w0, w1;
};

Lerp make_lerp(int out_size, int in_size) {
  Lerp l;
  l.i0.resize(static_cast<size_t>(out_size));
  l.i1.resize(static_cast<size_t>(out_size));
  l.w0.resize(static_cast<size_t>(out_size));
  l.w1.resize(static_cast<size_t>(out_size));
  const double s = static_cast<double>(in_size) / out_size;
  for (int o = 0; o < out_size; ++o) {
    double src = (o + 0.5) * s - 0.5;
    src = std::max(0.0, std::min(src, static_cast<double>(in_size - 1)));
    const int i0 = static_cast<int>(std::floor(src));
    const int i1 = std::min(i0 + 1, in_size - 1);
    const double d = src - i0;
    l.i0[static_cast<size_t>(o)] = i0;
    l.i1[static_cast<size_t>(o)] = i1;
    l.w0[static_cast<size_t>(o)] = 1.0 - d;
    l.w1[static_cast<size_t>(o)] = d;
  }
  return l;
}

}  // namespace

Var bilinear_resize2d(Var x, int oh, int ow) {
  const Tensor& X = x.val();
  if (X.rank() != 4) throw Error("bilinear_resize2d expects 4-D input");
  const int N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  const Lerp ly = make_lerp(oh, H), lx = make_lerp(ow, W);
  Tensor out({N, C, oh, ow});
  {
    double* o = out.mut();
    const double* p = X.data();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const double* ip = p + ((static_cast<std::int64_t>(n) * C + c) * H) * W;
        double* op = o + ((static_cast<std::int64_t>(n) * C + c) * oh) * ow;
        for (int y = 0; y < oh; ++y)
          for (int xo = 0; xo < ow; ++xo) {
            const double v =
                ly.w0[y] * (lx.w0[xo] * ip[static_cast<std::int64_t>(ly.i0[y]) * W + lx.i0[xo]] +
                            lx.w1[xo] * ip[static_cast<std::int64_t>(ly.i0[y]) * W + lx.i1[xo]]) +
                ly.w1[y] * (lx.w0[xo] * ip[static_cast<std::int64_t>(ly.i1[y]) * W + lx.i0[xo]] +
                            lx.w1[xo] * ip[static_cast<std::int64_t>(ly.i1[y]) * W + lx.i1[xo]]);
            op[static_cast<std::int64_t>(y) * ow + xo] = v;
          }
      }
  }
  bool req = x.requires_grad();
  int xi = x.id;
  return x.g->emplace(std::move(out), req, !req ? nullptr : std::function<void(Graph&, int)>(
      [xi, N, C, H, W, oh, ow, ly, lx](Graph& g, int self) {
        const Tensor& gr = g.grad(self);
        const double* pg = gr.data();
        double* dx = g.grad_acc(xi).mut();
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) {
            double* ip = dx + ((static_cast<std::int64_t>(n) * C + c) * H) * W;
            const double* op = pg + ((static_cast<std::int64_t>(n) * C + c) * oh) * ow;
            for (int y = 0; y < oh; ++y)
              for (int xo = 0; xo < ow; ++xo) {
                const double gg = op[static_cast<std::int64_t>(y) * ow + xo];
                ip[static_cast<std::int64_t>(ly.i0[y]) * W + lx.i0[xo]] += ly.w0[y] * lx.w0[xo] * gg;
                ip[static_cast<std::int64_t>(ly.i0[y]) * W + lx.i1[xo]] += ly.w0[y] * lx.w1[xo] * gg;
                ip[static_cast<std::int64_t>(ly.i1[y]) * W + lx.i0[xo]] += ly.w1[y] * lx.w0[xo] * gg;
                ip[static_cast<std::int64_t>(ly.i1[y]) * W + lx.i1[xo]] += ly.w1[y] * lx.w1[xo] * gg;
              }
          }
      }));
}

}  // namespace csaw::ad
