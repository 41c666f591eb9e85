#pragma once

#include <functional>
#include <vector>

#include "csaw/tensor.hpp"

namespace csaw::ad {

class Graph;

/// Handle to a node in a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* g = nullptr;
  int id = -1;

  bool valid() const { return g != nullptr && id >= 0; }
  const Tensor& val() const;
  const Tensor& grad() const;
  bool requires_grad() const;
  const std::vector<int>& shape() const { return val().shape(); }
};

/// Reverse-mode tape. Nodes are appended in topological order; backward()
/// walks them in reverse. One graph per forward pass.
class Graph {
 public:
  struct Node {
    Tensor value;
    Tensor grad;  // lazily allocated
    bool req = false;
    std::function<void(Graph&, int)> back;  // reads grad(id), accumulates into parents
  };

  Var constant(Tensor v) { return emplace(std::move(v), false, {}); }
  Var leaf(Tensor v) { return emplace(std::move(v), true, {}); }

  Var emplace(Tensor v, bool req, std::function<void(Graph&, int)> back);

  const Tensor& val(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  bool req(int id) const { return nodes_[static_cast<size_t>(id)].req; }
  /// Gradient accumulator for node id; allocates zeros on first touch.
  Tensor& grad_acc(int id);
  const Tensor& grad(int id) const;

  /// Run reverse pass from a scalar node (numel 1).
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

// ---- elementwise / scalar ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var relu(Var a);
Var sigmoid(Var a);
Var sqrt_elem(Var a);
Var log_clamped(Var a, double lo, bool* clamped = nullptr);
Var xlogx(Var a);  // x*ln(x), 0 at x<=0

// ---- linear algebra ----
Var matmul(Var a, Var b);               // (m,k)x(k,n)
Var transpose(Var a);                   // 2-D
Var linear(Var x, Var w, Var b);        // (n,in)x(out,in)^T + b -> (n,out)
Var softmax_rows(Var a);                // (B,K), numerically stable
Var l2_normalize_rows(Var a);           // (B,D); throws on zero row
Var layer_norm_rows(Var x, Var gamma, Var beta, double eps);  // (L,D)

// ---- reductions / indexing ----
Var colwise_mean(Var a);                             // (B,D)->(D)
Var row_broadcast_add(Var a, Var v);                 // (B,D)+(D)
Var row_broadcast_sub(Var a, Var v);
Var row_broadcast_div(Var a, Var v);
Var diag(Var a);                                     // (n,n)->(n)
Var gather_rows(Var p, std::vector<int> cols);       // (B,K)->(B)
Var min_rows(Var p);                                 // (B,K)->(B), argmin subgradient
Var sum_all(Var a);                                  // ->(1)
Var mean_all(Var a);
Var sample_sqnorm(Var a);                            // (N,...)->(N) sum of squares per row 0
Var concat_rows(Var a, Var b);                       // (r1,D)+(r2,D)->(r1+r2,D)
Var slice_rows(Var a, int r0, int r1);
Var slice_cols(Var a, int c0, int c1);
Var reshape(Var a, std::vector<int> shape);
Var add_constmat(Var a, const Tensor& m);            // a + constant, same shape

// ---- conv / image ----
Var conv_transpose2d(Var x, Var w, Var b, int stride, int pad, int out_pad);
Var bilinear_resize2d(Var x, int oh, int ow);        // (N,C,H,W)->(N,C,oh,ow)

}  // namespace csaw::ad
