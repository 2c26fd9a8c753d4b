#include "chainflow/ad.hpp"

#include <cmath>

namespace chainflow::ad {

const Mat& Var::val() const { return tape->value(id); }
int Var::rows() const { return static_cast<int>(val().rows()); }
int Var::cols() const { return static_cast<int>(val().cols()); }

Var Tape::leaf(Mat value, bool needs_grad) {
    Node n;
    n.val = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::make(Mat value, bool needs_grad, BackFn back) {
    Var v = leaf(std::move(value), needs_grad);
    if (needs_grad) nodes_[v.id].back = std::move(back);
    return v;
}

void Tape::accumulate(int id, const Mat& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
        n.grad = g;
    } else {
        n.grad += g;
    }
}

void Tape::backward(const Var& scalar) {
    if (scalar.val().rows() != 1 || scalar.val().cols() != 1)
        throw std::invalid_argument("backward needs a 1x1 node");
    nodes_[scalar.id].grad = Mat::Ones(1, 1);
    for (int i = scalar.id; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.needs_grad && n.back && n.grad.size() != 0) n.back(*this, n.grad);
    }
}

namespace {

bool ng(Var a) { return a.tape->needs_grad(a.id); }
bool ng2(Var a, Var b) { return ng(a) || ng(b); }

void check_same_tape(Var a, Var b) {
    if (a.tape != b.tape) throw std::invalid_argument("vars from different tapes");
}

}  // namespace

Var add(Var a, Var b) {
    check_same_tape(a, b);
    return a.tape->make(a.val() + b.val(), ng2(a, b), [a, b](Tape& t, const Mat& g) {
        t.accumulate(a.id, g);
        t.accumulate(b.id, g);
    });
}

Var sub(Var a, Var b) {
    check_same_tape(a, b);
    return a.tape->make(a.val() - b.val(), ng2(a, b), [a, b](Tape& t, const Mat& g) {
        t.accumulate(a.id, g);
        t.accumulate(b.id, -g);
    });
}

Var mul(Var a, Var b) {
    check_same_tape(a, b);
    return a.tape->make(a.val().cwiseProduct(b.val()), ng2(a, b), [a, b](Tape& t, const Mat& g) {
        t.accumulate(a.id, g.cwiseProduct(b.val()));
        t.accumulate(b.id, g.cwiseProduct(a.val()));
    });
}

Var neg(Var a) {
    return a.tape->make(-a.val(), ng(a),
                        [a](Tape& t, const Mat& g) { t.accumulate(a.id, -g); });
}

Var cmul(Var a, double c) {
    return a.tape->make(a.val() * c, ng(a),
                        [a, c](Tape& t, const Mat& g) { t.accumulate(a.id, g * c); });
}

Var cadd(Var a, double c) {
    return a.tape->make(a.val().array() + c, ng(a),
                        [a](Tape& t, const Mat& g) { t.accumulate(a.id, g); });
}

Var sigmoid(Var a) {
    Mat y = (1.0 / (1.0 + (-a.val().array()).exp())).matrix();
    return a.tape->make(std::move(y), ng(a), [a](Tape& t, const Mat& g) {
        // re-derive y from the stored output would need the id; recompute from a
        const Mat y2 = (1.0 / (1.0 + (-a.val().array()).exp())).matrix();
        t.accumulate(a.id, g.cwiseProduct((y2.array() * (1.0 - y2.array())).matrix()));
    });
}

Var silu(Var a) {
    const Mat s = (1.0 / (1.0 + (-a.val().array()).exp())).matrix();
    return a.tape->make(a.val().cwiseProduct(s), ng(a), [a](Tape& t, const Mat& g) {
        const Eigen::ArrayXXd x = a.val().array();
        const Eigen::ArrayXXd s2 = 1.0 / (1.0 + (-x).exp());
        t.accumulate(a.id, (g.array() * (s2 * (1.0 + x * (1.0 - s2)))).matrix());
    });
}

Var leaky_relu(Var a, double slope) {
    Mat y = a.val().unaryExpr([slope](double x) { return x > 0.0 ? x : slope * x; });
    return a.tape->make(std::move(y), ng(a), [a, slope](Tape& t, const Mat& g) {
        Mat da = g;
        for (int j = 0; j < da.cols(); ++j)
            for (int i = 0; i < da.rows(); ++i)
                if (a.val()(i, j) <= 0.0) da(i, j) *= slope;
        t.accumulate(a.id, da);
    });
}

Var square(Var a) {
    return a.tape->make(a.val().cwiseProduct(a.val()), ng(a), [a](Tape& t, const Mat& g) {
        t.accumulate(a.id, 2.0 * g.cwiseProduct(a.val()));
    });
}

Var matmul(Var a, Var b) {
    check_same_tape(a, b);
    return a.tape->make(a.val() * b.val(), ng2(a, b), [a, b](Tape& t, const Mat& g) {
        if (t.needs_grad(a.id)) t.accumulate(a.id, g * b.val().transpose());
        if (t.needs_grad(b.id)) t.accumulate(b.id, a.val().transpose() * g);
    });
}

Var transpose(Var a) {
    return a.tape->make(a.val().transpose(), ng(a),
                        [a](Tape& t, const Mat& g) { t.accumulate(a.id, g.transpose()); });
}

Var add_rowvec(Var x, Var b) {
    check_same_tape(x, b);
    if (b.rows() != 1 || b.cols() != x.cols())
        throw std::invalid_argument("add_rowvec: shape mismatch");
    Mat y = x.val().rowwise() + Eigen::RowVectorXd(b.val().row(0));
    return x.tape->make(std::move(y), ng2(x, b), [x, b](Tape& t, const Mat& g) {
        t.accumulate(x.id, g);
        if (t.needs_grad(b.id)) t.accumulate(b.id, g.colwise().sum());
    });
}

Var sum(Var a) {
    Mat y(1, 1);
    y(0, 0) = a.val().sum();
    return a.tape->make(std::move(y), ng(a), [a](Tape& t, const Mat& g) {
        t.accumulate(a.id, Mat::Constant(a.rows(), a.cols(), g(0, 0)));
    });
}

Var mean_all(Var a) {
    const double n = static_cast<double>(a.val().size());
    Mat y(1, 1);
    y(0, 0) = a.val().sum() / n;
    return a.tape->make(std::move(y), ng(a), [a, n](Tape& t, const Mat& g) {
        t.accumulate(a.id, Mat::Constant(a.rows(), a.cols(), g(0, 0) / n));
    });
}

Var sum_rows(Var a) {
    Mat y = a.val().colwise().sum();
    return a.tape->make(std::move(y), ng(a), [a](Tape& t, const Mat& g) {
        t.accumulate(a.id, g.replicate(a.rows(), 1));
    });
}

Var concat_cols(Var a, Var b) {
    check_same_tape(a, b);
    if (a.rows() != b.rows()) throw std::invalid_argument("concat_cols: row mismatch");
    Mat y(a.rows(), a.cols() + b.cols());
    y << a.val(), b.val();
    return a.tape->make(std::move(y), ng2(a, b), [a, b](Tape& t, const Mat& g) {
        t.accumulate(a.id, g.leftCols(a.cols()));
        t.accumulate(b.id, g.rightCols(b.cols()));
    });
}

Var concat_cols(Var a, Var b, Var c) { return concat_cols(concat_cols(a, b), c); }

Var concat_rows(Var a, Var b) {
    check_same_tape(a, b);
    if (a.cols() != b.cols()) throw std::invalid_argument("concat_rows: col mismatch");
    Mat y(a.rows() + b.rows(), a.cols());
    y << a.val(), b.val();
    return a.tape->make(std::move(y), ng2(a, b), [a, b](Tape& t, const Mat& g) {
        t.accumulate(a.id, g.topRows(a.rows()));
        t.accumulate(b.id, g.bottomRows(b.rows()));
    });
}

Var slice_cols(Var a, int c0, int n) {
    Mat y = a.val().middleCols(c0, n);
    return a.tape->make(std::move(y), ng(a), [a, c0, n](Tape& t, const Mat& g) {
        Mat da = Mat::Zero(a.rows(), a.cols());
        da.middleCols(c0, n) = g;
        t.accumulate(a.id, da);
    });
}

Var slice_rows(Var a, int r0, int n) {
    Mat y = a.val().middleRows(r0, n);
    return a.tape->make(std::move(y), ng(a), [a, r0, n](Tape& t, const Mat& g) {
        Mat da = Mat::Zero(a.rows(), a.cols());
        da.middleRows(r0, n) = g;
        t.accumulate(a.id, da);
    });
}

Var pad(Var a, int rows, int cols, int r0, int c0) {
    if (r0 + a.rows() > rows || c0 + a.cols() > cols)
        throw std::invalid_argument("pad: block exceeds target shape");
    Mat y = Mat::Zero(rows, cols);
    y.block(r0, c0, a.rows(), a.cols()) = a.val();
    return a.tape->make(std::move(y), ng(a), [a, r0, c0](Tape& t, const Mat& g) {
        t.accumulate(a.id, g.block(r0, c0, a.rows(), a.cols()));
    });
}

Var gather_rows(Var a, std::vector<int> idx) {
    Mat y(static_cast<int>(idx.size()), a.cols());
    for (size_t i = 0; i < idx.size(); ++i) y.row(static_cast<int>(i)) = a.val().row(idx[i]);
    return a.tape->make(std::move(y), ng(a), [a, idx = std::move(idx)](Tape& t, const Mat& g) {
        Mat da = Mat::Zero(a.rows(), a.cols());
        for (size_t i = 0; i < idx.size(); ++i) da.row(idx[i]) += g.row(static_cast<int>(i));
        t.accumulate(a.id, da);
    });
}

Var layer_norm_rows(Var x, double eps) {
    const int r = x.rows(), c = x.cols();
    Mat y(r, c);
    Eigen::VectorXd inv_std(r);
    for (int i = 0; i < r; ++i) {
        const double mu = x.val().row(i).mean();
        const Eigen::RowVectorXd d = x.val().row(i).array() - mu;
        const double var = d.squaredNorm() / static_cast<double>(c);
        inv_std(i) = 1.0 / std::sqrt(var + eps);
        y.row(i) = d * inv_std(i);
    }
    Mat ycopy = y;
    return x.tape->make(std::move(y), ng(x),
                        [x, yv = std::move(ycopy), inv_std](Tape& t, const Mat& g) {
        const int rr = g.rows();
        const double cc = static_cast<double>(g.cols());
        Mat dx(g.rows(), g.cols());
        for (int i = 0; i < rr; ++i) {
            const double gmean = g.row(i).mean();
            const double gy = g.row(i).cwiseProduct(yv.row(i)).sum() / cc;
            dx.row(i) = inv_std(i) * (g.row(i).array() - gmean - yv.row(i).array() * gy);
        }
        t.accumulate(x.id, dx);
    });
}

Var softmax_rows(Var x) {
    Mat y(x.rows(), x.cols());
    for (int i = 0; i < x.rows(); ++i) {
        const Eigen::ArrayXd row = x.val().row(i).transpose().array();
        const Eigen::ArrayXd e = (row - row.maxCoeff()).exp();
        y.row(i) = (e / e.sum()).matrix().transpose();
    }
    Mat ycopy = y;
    return x.tape->make(std::move(y), ng(x), [x, yv = std::move(ycopy)](Tape& t, const Mat& g) {
        Mat dx(g.rows(), g.cols());
        for (int i = 0; i < g.rows(); ++i) {
            const double dot = g.row(i).cwiseProduct(yv.row(i)).sum();
            dx.row(i) = (yv.row(i).array() * (g.row(i).array() - dot)).matrix();
        }
        t.accumulate(x.id, dx);
    });
}

Var cross_entropy_mean(Var logits, std::vector<int> targets) {
    const int r = logits.rows();
    if (static_cast<int>(targets.size()) != r)
        throw std::invalid_argument("cross_entropy_mean: target count mismatch");
    Mat probs(r, logits.cols());
    double loss = 0.0;
    for (int i = 0; i < r; ++i) {
        const Eigen::ArrayXd row = logits.val().row(i).transpose().array();
        const double m = row.maxCoeff();
        const Eigen::ArrayXd e = (row - m).exp();
        const double z = e.sum();
        probs.row(i) = (e / z).matrix().transpose();
        loss += std::log(z) + m - logits.val()(i, targets[i]);
    }
    Mat y(1, 1);
    y(0, 0) = loss / static_cast<double>(r);
    return logits.tape->make(std::move(y), ng(logits),
                             [logits, targets = std::move(targets),
                              probs = std::move(probs)](Tape& t, const Mat& g) {
        Mat dl = probs;
        for (size_t i = 0; i < targets.size(); ++i) dl(static_cast<int>(i), targets[i]) -= 1.0;
        dl *= g(0, 0) / static_cast<double>(targets.size());
        t.accumulate(logits.id, dl);
    });
}

Var col_to_square(Var pair, int col, int n) {
    if (pair.rows() != n * n) throw std::invalid_argument("col_to_square: bad layout");
    Mat y(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) y(i, j) = pair.val()(i * n + j, col);
    return pair.tape->make(std::move(y), ng(pair), [pair, col, n](Tape& t, const Mat& g) {
        Mat da = Mat::Zero(pair.rows(), pair.cols());
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) da(i * n + j, col) = g(i, j);
        t.accumulate(pair.id, da);
    });
}

namespace {

// (N*N) x C column c as an N x N square, row-major (i,j) -> i*N+j.
Mat unpack(const Mat& p, int c, int n) {
    Mat m(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) m(i, j) = p(i * n + j, c);
    return m;
}

void pack_into(Mat& p, const Mat& m, int c, int n) {
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) p(i * n + j, c) += m(i, j);
}

}  // namespace

Var tri_combine(Var a, Var b, int n, bool incoming) {
    check_same_tape(a, b);
    const int c = a.cols();
    if (a.rows() != n * n || b.rows() != n * n || b.cols() != c)
        throw std::invalid_argument("tri_combine: bad layout");
    Mat y(n * n, c);
    for (int ch = 0; ch < c; ++ch) {
        const Mat am = unpack(a.val(), ch, n);
        const Mat bm = unpack(b.val(), ch, n);
        Mat om;
        if (incoming) {
            om.noalias() = am.transpose() * bm;
        } else {
            om.noalias() = am * bm.transpose();
        }
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) y(i * n + j, ch) = om(i, j);
    }
    return a.tape->make(std::move(y), ng2(a, b), [a, b, n, c, incoming](Tape& t, const Mat& g) {
        Mat da = Mat::Zero(n * n, c);
        Mat db = Mat::Zero(n * n, c);
        for (int ch = 0; ch < c; ++ch) {
            const Mat am = unpack(a.val(), ch, n);
            const Mat bm = unpack(b.val(), ch, n);
            const Mat gm = unpack(g, ch, n);
            Mat dam, dbm;
            if (incoming) {
                dam.noalias() = bm * gm.transpose();
                dbm.noalias() = am * gm;
            } else {
                dam.noalias() = gm * bm;
                dbm.noalias() = gm.transpose() * am;
            }
            pack_into(da, dam, ch, n);
            pack_into(db, dbm, ch, n);
        }
        t.accumulate(a.id, da);
        t.accumulate(b.id, db);
    });
}

Var sym_pair(Var x, int n) {
    const int c = x.cols();
    if (x.rows() != n * n) throw std::invalid_argument("sym_pair: bad layout");
    Mat y(n * n, c);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            y.row(i * n + j) = 0.5 * (x.val().row(i * n + j) + x.val().row(j * n + i));
    return x.tape->make(std::move(y), ng(x), [x, n](Tape& t, const Mat& g) {
        Mat da(g.rows(), g.cols());
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                da.row(i * n + j) = 0.5 * (g.row(i * n + j) + g.row(j * n + i));
        t.accumulate(x.id, da);
    });
}

}  // namespace chainflow::ad
