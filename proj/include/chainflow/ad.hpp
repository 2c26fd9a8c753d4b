#pragma once

#include <Eigen/Dense>
#include <functional>
#include <stdexcept>
#include <vector>

namespace chainflow::ad {

using Mat = Eigen::MatrixXd;

class Tape;

// Handle to a node on a tape. Cheap to copy; lifetime bound to the tape.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Mat& val() const;
    int rows() const;
    int cols() const;
};

// Dynamic reverse-mode tape over dense matrices.
class Tape {
public:
    Var leaf(Mat value, bool needs_grad = false);
    Var constant(Mat value) { return leaf(std::move(value), false); }

    void backward(const Var& scalar);  // scalar must be 1x1
    void clear() { nodes_.clear(); }
    size_t size() const { return nodes_.size(); }

    const Mat& value(int id) const { return nodes_[id].val; }
    const Mat& grad(int id) const { return nodes_[id].grad; }

    // internal use by ops; backward closure receives the node's output grad
    using BackFn = std::function<void(Tape&, const Mat&)>;
    Var make(Mat value, bool needs_grad, BackFn back);
    bool needs_grad(int id) const { return nodes_[id].needs_grad; }
    void accumulate(int id, const Mat& g);

private:
    struct Node {
        Mat val;
        Mat grad;
        BackFn back;
        bool needs_grad = false;
    };
    std::vector<Node> nodes_;
};

// --- elementwise / arithmetic ---
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var neg(Var a);
Var cmul(Var a, double c);
Var cadd(Var a, double c);
Var sigmoid(Var a);
Var silu(Var a);
Var leaky_relu(Var a, double slope);
Var square(Var a);

// --- linear algebra ---
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add_rowvec(Var x, Var b);  // b is 1 x cols, broadcast over rows

// --- reductions ---
Var sum(Var a);       // -> 1x1
Var mean_all(Var a);  // -> 1x1
Var sum_rows(Var a);  // -> 1 x cols

// --- shape ---
Var concat_cols(Var a, Var b);
Var concat_cols(Var a, Var b, Var c);
Var concat_rows(Var a, Var b);
Var slice_cols(Var a, int c0, int n);
Var slice_rows(Var a, int r0, int n);
Var gather_rows(Var a, std::vector<int> idx);  // backward scatter-adds
Var pad(Var a, int rows, int cols, int r0, int c0);  // embed into zeros at (r0, c0)

// --- normalization / attention ---
Var layer_norm_rows(Var x, double eps = 1e-5);  // no learned affine
Var softmax_rows(Var x);

// Mean over rows of (logsumexp(row) - logit[target]); natural log.
Var cross_entropy_mean(Var logits, std::vector<int> targets);

// Column `col` of a (N*N) x C pair matrix viewed as an N x N square,
// row-major pair index (i,j) -> i*N+j.
Var col_to_square(Var pair, int col, int n);

// Triangle multiplicative combination over a (N*N) x C pair layout.
// outgoing: out[(i,j),c] = sum_k a[(i,k),c] * b[(j,k),c]
// incoming: out[(i,j),c] = sum_k a[(k,i),c] * b[(k,j),c]
Var tri_combine(Var a, Var b, int n, bool incoming);

// out[(i,j),c] = 0.5 * (x[(i,j),c] + x[(j,i),c])
Var sym_pair(Var x, int n);

}  // namespace chainflow::ad
