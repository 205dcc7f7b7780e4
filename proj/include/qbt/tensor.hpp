#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "qbt/error.hpp"
#include "qbt/rng.hpp"

namespace qbt {

namespace detail {

struct TensorImpl {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad; // empty = absent

    std::size_t size() const { return data.size(); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

inline std::size_t shape_product(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

} // namespace detail

/// Dense 64-bit tensor, row-major, with optional gradient buffer. Value-type
/// handle over shared storage so tape closures can reference operands.
class Tensor {
public:
    Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {}

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
        return filled(std::move(shape), 0.0, requires_grad);
    }

    static Tensor filled(std::vector<std::size_t> shape, double value, bool requires_grad = false) {
        Tensor t;
        t.impl_->data.assign(detail::shape_product(shape), value);
        t.impl_->shape = std::move(shape);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor from(std::vector<double> data, std::vector<std::size_t> shape,
                       bool requires_grad = false) {
        if (detail::shape_product(shape) != data.size()) {
            throw DimensionError("data length " + std::to_string(data.size()) +
                                 " does not match shape " + detail::shape_str(shape));
        }
        Tensor t;
        t.impl_->data = std::move(data);
        t.impl_->shape = std::move(shape);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from({value}, {1}, requires_grad);
    }

    static Tensor randn(std::vector<std::size_t> shape, Rng& rng, double stddev,
                        bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.impl_->data) v = rng.gaussian(0.0, stddev);
        return t;
    }

    const std::vector<std::size_t>& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t size() const { return impl_->data.size(); }
    bool is_scalar() const { return size() == 1; }

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

    bool has_grad() const { return impl_->grad.size() == impl_->data.size() && !impl_->data.empty(); }
    std::vector<double>& grad() { return impl_->grad; }
    const std::vector<double>& grad() const { return impl_->grad; }
    void ensure_grad() { impl_->ensure_grad(); }
    void zero_grad() {
        impl_->ensure_grad();
        std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
    }

    double item() const {
        if (!is_scalar()) {
            throw ContractError("item() requires a scalar tensor, got shape " +
                                detail::shape_str(impl_->shape));
        }
        return impl_->data[0];
    }

    double& at(std::size_t i) { return impl_->data[i]; }
    double at(std::size_t i) const { return impl_->data[i]; }
    double& at(std::size_t i, std::size_t j) { return impl_->data[i * impl_->shape[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return impl_->data[i * impl_->shape[1] + j]; }

    std::size_t rows() const { return impl_->shape.empty() ? 0 : impl_->shape[0]; }
    std::size_t cols() const { return impl_->shape.size() < 2 ? 1 : impl_->shape[1]; }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

/// Records one backward rule per forward operation, in execution order, which
/// is a topological order by construction. backward() replays in reverse and
/// accumulates into every requires_grad tensor reachable from the loss.
class Tape {
public:
    void record(std::shared_ptr<detail::TensorImpl> output, std::function<void()> backward) {
        nodes_.push_back(Node{std::move(output), std::move(backward)});
    }

    std::size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }
    void clear() { nodes_.clear(); }

    void backward(const Tensor& loss) {
        if (!loss.is_scalar()) {
            throw ContractError("backward() requires a scalar loss, got shape " +
                                detail::shape_str(loss.shape()));
        }
        if (!loss.requires_grad()) return;
        if (!nodes_.empty() && nodes_.back().output != loss.impl()) {
            throw ContractError("loss must be the last operation recorded on the tape");
        }
        loss.impl()->ensure_grad();
        loss.impl()->grad[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            // Nodes whose output never received gradient are not ancestors of
            // the loss; skipping them leaves unreachable grads absent.
            if (it->output->grad.size() != it->output->data.size()) continue;
            it->backward();
        }
    }

private:
    struct Node {
        std::shared_ptr<detail::TensorImpl> output;
        std::function<void()> backward;
    };
    std::vector<Node> nodes_;
};

namespace detail {

// out = A(m x k) * B(k x n), accumulate into pre-sized C.
inline void mm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C(m x n) += A(m x k) * B(n x k)^T
inline void mm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C(k x n) += A(m x k)^T * B(m x n)
inline void mm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

inline void require_matrix(const Tensor& t, const char* who) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(who) + " requires a rank-2 tensor, got " +
                             shape_str(t.shape()));
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Core operations. Each forward may record a backward rule on the tape.
// ---------------------------------------------------------------------------

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::require_matrix(a, "matmul lhs");
    detail::require_matrix(b, "matmul rhs");
    const std::size_t m = a.shape()[0], k = a.shape()[1];
    if (b.shape()[0] != k) {
        throw DimensionError("matmul inner dimensions disagree: " + detail::shape_str(a.shape()) +
                             " vs " + detail::shape_str(b.shape()));
    }
    const std::size_t n = b.shape()[1];
    Tensor out = Tensor::zeros({m, n}, a.requires_grad() || b.requires_grad());
    detail::mm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    if (out.requires_grad()) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape.record(oi, [ai, bi, oi, m, k, n]() {
            if (ai->requires_grad) {
                ai->ensure_grad();
                detail::mm_nt(oi->grad.data(), bi->data.data(), ai->grad.data(), m, n, k);
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                detail::mm_tn(ai->data.data(), oi->grad.data(), bi->grad.data(), m, k, n);
            }
        });
    }
    return out;
}

namespace detail {

enum class BinOp { Add, Sub, Mul };

inline Tensor binary_ew(Tape& tape, const Tensor& a, const Tensor& b, BinOp op) {
    const bool a_scalar = a.is_scalar(), b_scalar = b.is_scalar();
    if (!a_scalar && !b_scalar && a.shape() != b.shape()) {
        throw DimensionError("elementwise shapes do not match: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    const Tensor& big = a_scalar ? b : a;
    Tensor out = Tensor::zeros(big.shape(), a.requires_grad() || b.requires_grad());
    const std::size_t n = out.size();
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double av = a_scalar ? ad[0] : ad[i];
        const double bv = b_scalar ? bd[0] : bd[i];
        switch (op) {
            case BinOp::Add: od[i] = av + bv; break;
            case BinOp::Sub: od[i] = av - bv; break;
            case BinOp::Mul: od[i] = av * bv; break;
        }
    }
    if (out.requires_grad()) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape.record(oi, [ai, bi, oi, op, a_scalar, b_scalar, n]() {
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    double g = oi->grad[i];
                    if (op == BinOp::Mul) g *= b_scalar ? bi->data[0] : bi->data[i];
                    ai->grad[a_scalar ? 0 : i] += g;
                }
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    double g = oi->grad[i];
                    switch (op) {
                        case BinOp::Add: break;
                        case BinOp::Sub: g = -g; break;
                        case BinOp::Mul: g *= a_scalar ? ai->data[0] : ai->data[i]; break;
                    }
                    bi->grad[b_scalar ? 0 : i] += g;
                }
            }
        });
    }
    return out;
}

enum class UnOp { Relu, Gelu, Sigmoid, Tanh };

inline double gelu_fwd(double x) {
    const double c = std::sqrt(2.0 / M_PI);
    const double t = std::tanh(c * (x + 0.044715 * x * x * x));
    return 0.5 * x * (1.0 + t);
}

inline double gelu_bwd(double x) {
    const double c = std::sqrt(2.0 / M_PI);
    const double inner = c * (x + 0.044715 * x * x * x);
    const double t = std::tanh(inner);
    const double dinner = c * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
}

inline double sigmoid_fwd(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Tensor unary_ew(Tape& tape, const Tensor& x, UnOp op) {
    Tensor out = Tensor::zeros(x.shape(), x.requires_grad());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double v = x.data()[i];
        switch (op) {
            case UnOp::Relu: out.data()[i] = v > 0.0 ? v : 0.0; break;
            case UnOp::Gelu: out.data()[i] = gelu_fwd(v); break;
            case UnOp::Sigmoid: out.data()[i] = sigmoid_fwd(v); break;
            case UnOp::Tanh: out.data()[i] = std::tanh(v); break;
        }
    }
    if (out.requires_grad()) {
        auto xi = x.impl(), oi = out.impl();
        tape.record(oi, [xi, oi, op, n]() {
            xi->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const double v = xi->data[i];
                double d = 0.0;
                switch (op) {
                    case UnOp::Relu: d = v > 0.0 ? 1.0 : 0.0; break;
                    case UnOp::Gelu: d = gelu_bwd(v); break;
                    case UnOp::Sigmoid: {
                        const double s = oi->data[i];
                        d = s * (1.0 - s);
                        break;
                    }
                    case UnOp::Tanh: {
                        const double t = oi->data[i];
                        d = 1.0 - t * t;
                        break;
                    }
                }
                xi->grad[i] += d * oi->grad[i];
            }
        });
    }
    return out;
}

} // namespace detail

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    return detail::binary_ew(tape, a, b, detail::BinOp::Add);
}
inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    return detail::binary_ew(tape, a, b, detail::BinOp::Sub);
}
inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    return detail::binary_ew(tape, a, b, detail::BinOp::Mul);
}
inline Tensor relu(Tape& tape, const Tensor& x) {
    return detail::unary_ew(tape, x, detail::UnOp::Relu);
}
inline Tensor gelu(Tape& tape, const Tensor& x) {
    return detail::unary_ew(tape, x, detail::UnOp::Gelu);
}
inline Tensor sigmoid(Tape& tape, const Tensor& x) {
    return detail::unary_ew(tape, x, detail::UnOp::Sigmoid);
}
inline Tensor tanh_act(Tape& tape, const Tensor& x) {
    return detail::unary_ew(tape, x, detail::UnOp::Tanh);
}

inline Tensor scale(Tape& tape, const Tensor& x, double c) {
    Tensor out = Tensor::zeros(x.shape(), x.requires_grad());
    for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = c * x.data()[i];
    if (out.requires_grad()) {
        auto xi = x.impl(), oi = out.impl();
        tape.record(oi, [xi, oi, c]() {
            xi->ensure_grad();
            for (std::size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += c * oi->grad[i];
        });
    }
    return out;
}

/// Adds row vector v (shape [m]) to every row of x (shape [n x m]).
inline Tensor add_rowvec(Tape& tape, const Tensor& x, const Tensor& v) {
    detail::require_matrix(x, "add_rowvec");
    if (v.rank() != 1 || v.shape()[0] != x.shape()[1]) {
        throw DimensionError("add_rowvec vector shape " + detail::shape_str(v.shape()) +
                             " does not match matrix " + detail::shape_str(x.shape()));
    }
    const std::size_t n = x.shape()[0], m = x.shape()[1];
    Tensor out = Tensor::zeros({n, m}, x.requires_grad() || v.requires_grad());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out.data()[i * m + j] = x.data()[i * m + j] + v.data()[j];
    if (out.requires_grad()) {
        auto xi = x.impl(), vi = v.impl(), oi = out.impl();
        tape.record(oi, [xi, vi, oi, n, m]() {
            if (xi->requires_grad) {
                xi->ensure_grad();
                for (std::size_t i = 0; i < n * m; ++i) xi->grad[i] += oi->grad[i];
            }
            if (vi->requires_grad) {
                vi->ensure_grad();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j) vi->grad[j] += oi->grad[i * m + j];
            }
        });
    }
    return out;
}

/// Multiplies every row of x (shape [n x m]) elementwise by v (shape [m]).
inline Tensor mul_rowvec(Tape& tape, const Tensor& x, const Tensor& v) {
    detail::require_matrix(x, "mul_rowvec");
    if (v.rank() != 1 || v.shape()[0] != x.shape()[1]) {
        throw DimensionError("mul_rowvec vector shape " + detail::shape_str(v.shape()) +
                             " does not match matrix " + detail::shape_str(x.shape()));
    }
    const std::size_t n = x.shape()[0], m = x.shape()[1];
    Tensor out = Tensor::zeros({n, m}, x.requires_grad() || v.requires_grad());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out.data()[i * m + j] = x.data()[i * m + j] * v.data()[j];
    if (out.requires_grad()) {
        auto xi = x.impl(), vi = v.impl(), oi = out.impl();
        tape.record(oi, [xi, vi, oi, n, m]() {
            if (xi->requires_grad) {
                xi->ensure_grad();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j)
                        xi->grad[i * m + j] += vi->data[j] * oi->grad[i * m + j];
            }
            if (vi->requires_grad) {
                vi->ensure_grad();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j)
                        vi->grad[j] += xi->data[i * m + j] * oi->grad[i * m + j];
            }
        });
    }
    return out;
}

/// Row lookup: out[i, :] = table[ids[i], :]. Backward scatter-adds.
inline Tensor embedding_rows(Tape& tape, const Tensor& table, const std::vector<int>& ids) {
    detail::require_matrix(table, "embedding_rows");
    const std::size_t v = table.shape()[0], h = table.shape()[1];
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= v) {
            throw IndexError("embedding id " + std::to_string(id) + " out of range [0, " +
                             std::to_string(v) + ")");
        }
    }
    const std::size_t n = ids.size();
    Tensor out = Tensor::zeros({n, h}, table.requires_grad());
    for (std::size_t i = 0; i < n; ++i) {
        const double* src = table.data().data() + static_cast<std::size_t>(ids[i]) * h;
        std::copy(src, src + h, out.data().data() + i * h);
    }
    if (out.requires_grad()) {
        auto ti = table.impl(), oi = out.impl();
        tape.record(oi, [ti, oi, ids, h]() {
            ti->ensure_grad();
            for (std::size_t i = 0; i < ids.size(); ++i) {
                double* dst = ti->grad.data() + static_cast<std::size_t>(ids[i]) * h;
                const double* src = oi->grad.data() + i * h;
                for (std::size_t j = 0; j < h; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

/// Gathers rows of x at the given positions (with duplicates allowed).
inline Tensor gather_rows(Tape& tape, const Tensor& x, const std::vector<int>& positions) {
    detail::require_matrix(x, "gather_rows");
    const std::size_t n = x.shape()[0], m = x.shape()[1];
    for (int p : positions) {
        if (p < 0 || static_cast<std::size_t>(p) >= n) {
            throw IndexError("row position " + std::to_string(p) + " out of range [0, " +
                             std::to_string(n) + ")");
        }
    }
    Tensor out = Tensor::zeros({positions.size(), m}, x.requires_grad());
    for (std::size_t i = 0; i < positions.size(); ++i) {
        const double* src = x.data().data() + static_cast<std::size_t>(positions[i]) * m;
        std::copy(src, src + m, out.data().data() + i * m);
    }
    if (out.requires_grad()) {
        auto xi = x.impl(), oi = out.impl();
        tape.record(oi, [xi, oi, positions, m]() {
            xi->ensure_grad();
            for (std::size_t i = 0; i < positions.size(); ++i) {
                double* dst = xi->grad.data() + static_cast<std::size_t>(positions[i]) * m;
                const double* src = oi->grad.data() + i * m;
                for (std::size_t j = 0; j < m; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

/// Column slice [c0, c1) of a matrix.
inline Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t c0, std::size_t c1) {
    detail::require_matrix(x, "slice_cols");
    const std::size_t n = x.shape()[0], m = x.shape()[1];
    if (c0 >= c1 || c1 > m) {
        throw DimensionError("slice_cols [" + std::to_string(c0) + ", " + std::to_string(c1) +
                             ") invalid for " + detail::shape_str(x.shape()));
    }
    const std::size_t w = c1 - c0;
    Tensor out = Tensor::zeros({n, w}, x.requires_grad());
    for (std::size_t i = 0; i < n; ++i) {
        const double* src = x.data().data() + i * m + c0;
        std::copy(src, src + w, out.data().data() + i * w);
    }
    if (out.requires_grad()) {
        auto xi = x.impl(), oi = out.impl();
        tape.record(oi, [xi, oi, n, m, c0, w]() {
            xi->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                double* dst = xi->grad.data() + i * m + c0;
                const double* src = oi->grad.data() + i * w;
                for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

/// Concatenates matrices with equal row counts along columns.
inline Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols requires at least one input");
    const std::size_t n = parts[0].shape().empty() ? 0 : parts[0].shape()[0];
    std::size_t total = 0;
    bool rg = false;
    for (const auto& p : parts) {
        detail::require_matrix(p, "concat_cols");
        if (p.shape()[0] != n) {
            throw DimensionError("concat_cols row counts differ: " +
                                 detail::shape_str(parts[0].shape()) + " vs " +
                                 detail::shape_str(p.shape()));
        }
        total += p.shape()[1];
        rg = rg || p.requires_grad();
    }
    Tensor out = Tensor::zeros({n, total}, rg);
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.shape()[1];
        for (std::size_t i = 0; i < n; ++i) {
            const double* src = p.data().data() + i * w;
            std::copy(src, src + w, out.data().data() + i * total + off);
        }
        off += w;
    }
    if (rg) {
        std::vector<std::shared_ptr<detail::TensorImpl>> impls;
        impls.reserve(parts.size());
        for (const auto& p : parts) impls.push_back(p.impl());
        auto oi = out.impl();
        tape.record(oi, [impls, oi, n, total]() {
            std::size_t off = 0;
            for (const auto& pi : impls) {
                const std::size_t w = pi->shape[1];
                if (pi->requires_grad) {
                    pi->ensure_grad();
                    for (std::size_t i = 0; i < n; ++i) {
                        double* dst = pi->grad.data() + i * w;
                        const double* src = oi->grad.data() + i * total + off;
                        for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
                    }
                }
                off += w;
            }
        });
    }
    return out;
}

inline Tensor transpose(Tape& tape, const Tensor& x) {
    detail::require_matrix(x, "transpose");
    const std::size_t n = x.shape()[0], m = x.shape()[1];
    Tensor out = Tensor::zeros({m, n}, x.requires_grad());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out.data()[j * n + i] = x.data()[i * m + j];
    if (out.requires_grad()) {
        auto xi = x.impl(), oi = out.impl();
        tape.record(oi, [xi, oi, n, m]() {
            xi->ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) xi->grad[i * m + j] += oi->grad[j * n + i];
        });
    }
    return out;
}

/// Row-wise softmax with max-subtraction stabilization.
inline Tensor softmax_rows(Tape& tape, const Tensor& x) {
    detail::require_matrix(x, "softmax_rows");
    const std::size_t n = x.shape()[0], m = x.shape()[1];
    Tensor out = Tensor::zeros({n, m}, x.requires_grad());
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = x.data().data() + i * m;
        double* orow = out.data().data() + i * m;
        const double mx = *std::max_element(row, row + m);
        double sum = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (std::size_t j = 0; j < m; ++j) orow[j] /= sum;
    }
    if (out.requires_grad()) {
        auto xi = x.impl(), oi = out.impl();
        tape.record(oi, [xi, oi, n, m]() {
            xi->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const double* y = oi->data.data() + i * m;
                const double* dy = oi->grad.data() + i * m;
                double dot = 0.0;
                for (std::size_t j = 0; j < m; ++j) dot += dy[j] * y[j];
                double* dx = xi->grad.data() + i * m;
                for (std::size_t j = 0; j < m; ++j) dx[j] += (dy[j] - dot) * y[j];
            }
        });
    }
    return out;
}

/// Row-wise layer normalization with learnable scale/shift.
inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-12) {
    detail::require_matrix(x, "layer_norm");
    const std::size_t n = x.shape()[0], m = x.shape()[1];
    if (gamma.rank() != 1 || gamma.shape()[0] != m || beta.rank() != 1 || beta.shape()[0] != m) {
        throw DimensionError("layer_norm scale/shift must be rank-1 of width " + std::to_string(m));
    }
    Tensor out =
        Tensor::zeros({n, m}, x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    std::vector<double> inv_std(n), xhat(n * m);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = x.data().data() + i * m;
        double mean = 0.0;
        for (std::size_t j = 0; j < m; ++j) mean += row[j];
        mean /= static_cast<double>(m);
        double var = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(m);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        for (std::size_t j = 0; j < m; ++j) {
            const double xh = (row[j] - mean) * is;
            xhat[i * m + j] = xh;
            out.data()[i * m + j] = xh * gamma.data()[j] + beta.data()[j];
        }
    }
    if (out.requires_grad()) {
        auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
        tape.record(oi, [xi, gi, bi, oi, n, m, inv_std = std::move(inv_std),
                         xhat = std::move(xhat)]() {
            if (gi->requires_grad) gi->ensure_grad();
            if (bi->requires_grad) bi->ensure_grad();
            if (xi->requires_grad) xi->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const double* dy = oi->grad.data() + i * m;
                const double* xh = xhat.data() + i * m;
                if (gi->requires_grad || bi->requires_grad) {
                    for (std::size_t j = 0; j < m; ++j) {
                        if (gi->requires_grad) gi->grad[j] += dy[j] * xh[j];
                        if (bi->requires_grad) bi->grad[j] += dy[j];
                    }
                }
                if (xi->requires_grad) {
                    double mean_g = 0.0, mean_gx = 0.0;
                    for (std::size_t j = 0; j < m; ++j) {
                        const double g = gi->data[j] * dy[j];
                        mean_g += g;
                        mean_gx += g * xh[j];
                    }
                    mean_g /= static_cast<double>(m);
                    mean_gx /= static_cast<double>(m);
                    double* dx = xi->grad.data() + i * m;
                    for (std::size_t j = 0; j < m; ++j) {
                        const double g = gi->data[j] * dy[j];
                        dx[j] += (g - mean_g - xh[j] * mean_gx) * inv_std[i];
                    }
                }
            }
        });
    }
    return out;
}

/// Mean negative log-softmax of the target logit per row, max-stabilized.
inline Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits,
                                    const std::vector<int>& targets) {
    detail::require_matrix(logits, "softmax_cross_entropy");
    const std::size_t n = logits.shape()[0], v = logits.shape()[1];
    if (targets.size() != n) {
        throw DimensionError("softmax_cross_entropy targets length " +
                             std::to_string(targets.size()) + " != rows " + std::to_string(n));
    }
    for (int t : targets) {
        if (t < 0 || static_cast<std::size_t>(t) >= v) {
            throw IndexError("cross-entropy target " + std::to_string(t) + " out of range [0, " +
                             std::to_string(v) + ")");
        }
    }
    std::vector<double> probs(n * v);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = logits.data().data() + i * v;
        double* prow = probs.data() + i * v;
        const double mx = *std::max_element(row, row + v);
        double sum = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            prow[j] = std::exp(row[j] - mx);
            sum += prow[j];
        }
        for (std::size_t j = 0; j < v; ++j) prow[j] /= sum;
        total += -(row[static_cast<std::size_t>(targets[i])] - mx - std::log(sum));
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(n), logits.requires_grad());
    if (out.requires_grad()) {
        auto li = logits.impl(), oi = out.impl();
        tape.record(oi, [li, oi, n, v, targets, probs = std::move(probs)]() {
            li->ensure_grad();
            const double g = oi->grad[0] / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double* prow = probs.data() + i * v;
                double* drow = li->grad.data() + i * v;
                for (std::size_t j = 0; j < v; ++j) drow[j] += g * prow[j];
                drow[static_cast<std::size_t>(targets[i])] -= g;
            }
        });
    }
    return out;
}

/// Mean binary cross-entropy of probabilities against 0/1 labels, with the
/// probabilities clamped to [1e-12, 1 - 1e-12] before the logs.
inline Tensor bce_loss(Tape& tape, const Tensor& probs, const std::vector<double>& labels) {
    if (probs.size() != labels.size() || probs.size() == 0) {
        throw DimensionError("bce_loss needs equal, nonzero prob/label counts (" +
                             std::to_string(probs.size()) + " vs " + std::to_string(labels.size()) +
                             ")");
    }
    constexpr double kLo = 1e-12, kHi = 1.0 - 1e-12;
    const std::size_t n = probs.size();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double p = std::clamp(probs.data()[i], kLo, kHi);
        total += -(labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p));
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(n), probs.requires_grad());
    if (out.requires_grad()) {
        auto pi = probs.impl(), oi = out.impl();
        tape.record(oi, [pi, oi, labels, n]() {
            pi->ensure_grad();
            const double g = oi->grad[0] / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double raw = pi->data[i];
                if (raw < kLo || raw > kHi) continue; // clamped region: zero slope
                pi->grad[i] += g * (raw - labels[i]) / (raw * (1.0 - raw));
            }
        });
    }
    return out;
}

inline Tensor sum(Tape& tape, const Tensor& x) {
    double s = std::accumulate(x.data().begin(), x.data().end(), 0.0);
    Tensor out = Tensor::scalar(s, x.requires_grad());
    if (out.requires_grad()) {
        auto xi = x.impl(), oi = out.impl();
        tape.record(oi, [xi, oi]() {
            xi->ensure_grad();
            for (auto& g : xi->grad) g += oi->grad[0];
        });
    }
    return out;
}

inline Tensor mean_all(Tape& tape, const Tensor& x) {
    if (x.size() == 0) throw DimensionError("mean_all of empty tensor");
    double s = std::accumulate(x.data().begin(), x.data().end(), 0.0);
    const double inv = 1.0 / static_cast<double>(x.size());
    Tensor out = Tensor::scalar(s * inv, x.requires_grad());
    if (out.requires_grad()) {
        auto xi = x.impl(), oi = out.impl();
        tape.record(oi, [xi, oi, inv]() {
            xi->ensure_grad();
            for (auto& g : xi->grad) g += inv * oi->grad[0];
        });
    }
    return out;
}

inline Tensor l2_norm(Tape& tape, const Tensor& x) {
    double ss = 0.0;
    for (double v : x.data()) ss += v * v;
    const double nrm = std::sqrt(ss);
    Tensor out = Tensor::scalar(nrm, x.requires_grad());
    if (out.requires_grad()) {
        auto xi = x.impl(), oi = out.impl();
        tape.record(oi, [xi, oi, nrm]() {
            if (nrm == 0.0) return;
            xi->ensure_grad();
            for (std::size_t i = 0; i < xi->grad.size(); ++i)
                xi->grad[i] += oi->grad[0] * xi->data[i] / nrm;
        });
    }
    return out;
}

/// Packs scalar tensors into a rank-1 vector.
inline Tensor stack_scalars(Tape& tape, const std::vector<Tensor>& xs) {
    if (xs.empty()) throw DimensionError("stack_scalars requires at least one input");
    bool rg = false;
    for (const auto& x : xs) {
        if (!x.is_scalar()) {
            throw DimensionError("stack_scalars input must be scalar, got " +
                                 detail::shape_str(x.shape()));
        }
        rg = rg || x.requires_grad();
    }
    Tensor out = Tensor::zeros({xs.size()}, rg);
    for (std::size_t i = 0; i < xs.size(); ++i) out.data()[i] = xs[i].data()[0];
    if (rg) {
        std::vector<std::shared_ptr<detail::TensorImpl>> impls;
        impls.reserve(xs.size());
        for (const auto& x : xs) impls.push_back(x.impl());
        auto oi = out.impl();
        tape.record(oi, [impls, oi]() {
            for (std::size_t i = 0; i < impls.size(); ++i) {
                if (!impls[i]->requires_grad) continue;
                impls[i]->ensure_grad();
                impls[i]->grad[0] += oi->grad[i];
            }
        });
    }
    return out;
}

/// Minimum over all entries; gradient routes to the first minimizer.
inline Tensor reduce_min(Tape& tape, const Tensor& x) {
    if (x.size() == 0) throw DimensionError("reduce_min of empty tensor");
    const auto it = std::min_element(x.data().begin(), x.data().end());
    const std::size_t idx = static_cast<std::size_t>(it - x.data().begin());
    Tensor out = Tensor::scalar(*it, x.requires_grad());
    if (out.requires_grad()) {
        auto xi = x.impl(), oi = out.impl();
        tape.record(oi, [xi, oi, idx]() {
            xi->ensure_grad();
            xi->grad[idx] += oi->grad[0];
        });
    }
    return out;
}

/// Maximum over all entries; gradient routes to the first maximizer.
inline Tensor reduce_max(Tape& tape, const Tensor& x) {
    if (x.size() == 0) throw DimensionError("reduce_max of empty tensor");
    const auto it = std::max_element(x.data().begin(), x.data().end());
    const std::size_t idx = static_cast<std::size_t>(it - x.data().begin());
    Tensor out = Tensor::scalar(*it, x.requires_grad());
    if (out.requires_grad()) {
        auto xi = x.impl(), oi = out.impl();
        tape.record(oi, [xi, oi, idx]() {
            xi->ensure_grad();
            xi->grad[idx] += oi->grad[0];
        });
    }
    return out;
}

/// Adam with bias correction. Moment state persists across calls and is keyed
/// by parameter order, so the parameter set must not change after construction.
class Adam {
public:
    explicit Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].size(), 0.0);
            v_[i].assign(params_[i].size(), 0.0);
        }
    }

    void step() {
        for (const auto& p : params_) {
            if (!p.has_grad()) {
                throw ContractError("adam step: parameter of shape " +
                                    detail::shape_str(p.shape()) + " has no gradient");
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i].data();
            const auto& g = params_[i].grad();
            for (std::size_t j = 0; j < p.size(); ++j) {
                m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
                v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
                const double mhat = m_[i][j] / bc1;
                const double vhat = v_[i][j] / bc2;
                p[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }
    std::size_t step_count() const { return t_; }
    const std::vector<Tensor>& params() const { return params_; }

private:
    std::vector<Tensor> params_;
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

} // namespace qbt
