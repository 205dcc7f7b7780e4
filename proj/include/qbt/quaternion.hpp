#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "qbt/error.hpp"
#include "qbt/rng.hpp"
#include "qbt/tensor.hpp"

namespace qbt {

/// Hypercomplex number r + a*i + b*j + c*k.
struct Quaternion {
    double r = 0.0, a = 0.0, b = 0.0, c = 0.0;

    double norm() const { return std::sqrt(r * r + a * a + b * b + c * c); }
};

inline bool operator==(const Quaternion& p, const Quaternion& q) {
    return p.r == q.r && p.a == q.a && p.b == q.b && p.c == q.c;
}

/// Hamilton product P (x) Q. Non-commutative: ij = k but ji = -k.
inline Quaternion hamilton_product(const Quaternion& p, const Quaternion& q) {
    return Quaternion{
        p.r * q.r - p.a * q.a - p.b * q.b - p.c * q.c,
        p.r * q.a + p.a * q.r + p.b * q.c - p.c * q.b,
        p.r * q.b - p.a * q.c + p.b * q.r + p.c * q.a,
        p.r * q.c + p.a * q.b - p.b * q.a + p.c * q.r,
    };
}

/// Split activation: a scalar activation applied to each component.
template <typename F>
Quaternion split_activation(const Quaternion& p, F&& f) {
    return Quaternion{f(p.r), f(p.a), f(p.b), f(p.c)};
}

/// Real d-vector -> d/4 quaternions. The first d/4 entries become the real
/// parts, the next three d/4 blocks the i, j, k parts.
inline std::vector<Quaternion> convert_real_to_quat(const std::vector<double>& v) {
    if (v.size() % 4 != 0) {
        throw ConfigError("quaternion conversion needs a dimension divisible by 4, got " +
                          std::to_string(v.size()));
    }
    const std::size_t q = v.size() / 4;
    std::vector<Quaternion> out(q);
    for (std::size_t i = 0; i < q; ++i) {
        out[i] = Quaternion{v[i], v[q + i], v[2 * q + i], v[3 * q + i]};
    }
    return out;
}

/// Inverse of convert_real_to_quat: concatenates the four component blocks.
inline std::vector<double> convert_quat_to_real(const std::vector<Quaternion>& qs) {
    const std::size_t q = qs.size();
    std::vector<double> out(4 * q);
    for (std::size_t i = 0; i < q; ++i) {
        out[i] = qs[i].r;
        out[q + i] = qs[i].a;
        out[2 * q + i] = qs[i].b;
        out[3 * q + i] = qs[i].c;
    }
    return out;
}

/// Linear map realized by a grid of quaternion weights under the Hamilton
/// product: output quaternion j = sum_i W[i][j] (x) x_i. Weights are stored as
/// four real component matrices so the forward pass is sixteen real matmuls
/// over quarter-width slices, and the map trains in_dim*out_dim/4 weight
/// scalars instead of in_dim*out_dim.
class QuaternionLinear {
public:
    QuaternionLinear() = default;

    QuaternionLinear(std::size_t in_dim, std::size_t out_dim, Rng& rng, double init_stddev = 0.02,
                     bool with_bias = true) {
        if (in_dim % 4 != 0 || out_dim % 4 != 0) {
            throw ConfigError("quaternion linear dimensions must be divisible by 4, got " +
                              std::to_string(in_dim) + " -> " + std::to_string(out_dim));
        }
        in_quats_ = in_dim / 4;
        out_quats_ = out_dim / 4;
        for (auto* w : {&wr_, &wa_, &wb_, &wc_}) {
            *w = Tensor::randn({in_quats_, out_quats_}, rng, init_stddev, true);
        }
        if (with_bias) bias_ = Tensor::zeros({out_dim}, true);
        with_bias_ = with_bias;
    }

    std::size_t in_dim() const { return 4 * in_quats_; }
    std::size_t out_dim() const { return 4 * out_quats_; }

    /// x: [t x in_dim] rows of real vectors. Returns [t x out_dim].
    Tensor forward(Tape& tape, const Tensor& x) const {
        if (x.rank() != 2 || x.shape()[1] != in_dim()) {
            throw ConfigError("quaternion linear input must be [t x " + std::to_string(in_dim()) +
                              "], got " + detail::shape_str(x.shape()));
        }
        const std::size_t q = in_quats_;
        Tensor xr = slice_cols(tape, x, 0, q);
        Tensor xa = slice_cols(tape, x, q, 2 * q);
        Tensor xb = slice_cols(tape, x, 2 * q, 3 * q);
        Tensor xc = slice_cols(tape, x, 3 * q, 4 * q);

        auto mm = [&](const Tensor& lhs, const Tensor& w) { return matmul(tape, lhs, w); };
        Tensor out_r = sub(tape, sub(tape, sub(tape, mm(xr, wr_), mm(xa, wa_)), mm(xb, wb_)),
                           mm(xc, wc_));
        Tensor out_i = sub(tape, add(tape, add(tape, mm(xa, wr_), mm(xr, wa_)), mm(xc, wb_)),
                           mm(xb, wc_));
        Tensor out_j = add(tape, add(tape, sub(tape, mm(xb, wr_), mm(xc, wa_)), mm(xr, wb_)),
                           mm(xa, wc_));
        Tensor out_k = add(tape, sub(tape, add(tape, mm(xc, wr_), mm(xb, wa_)), mm(xa, wb_)),
                           mm(xr, wc_));

        Tensor out = concat_cols(tape, {out_r, out_i, out_j, out_k});
        if (with_bias_) out = add_rowvec(tape, out, bias_);
        return out;
    }

    Quaternion weight_at(std::size_t i, std::size_t j) const {
        const std::size_t idx = i * out_quats_ + j;
        return Quaternion{wr_.data()[idx], wa_.data()[idx], wb_.data()[idx], wc_.data()[idx]};
    }

    void set_weight(std::size_t i, std::size_t j, const Quaternion& w) {
        const std::size_t idx = i * out_quats_ + j;
        wr_.data()[idx] = w.r;
        wa_.data()[idx] = w.a;
        wb_.data()[idx] = w.b;
        wc_.data()[idx] = w.c;
    }

    /// Materializes the equivalent dense map B (in_dim x out_dim) so that
    /// forward(x) == x * B (+ bias).
    Tensor to_real_matrix() const {
        const std::size_t n = in_dim(), m = out_dim(), qi = in_quats_, qo = out_quats_;
        Tensor b = Tensor::zeros({n, m});
        for (std::size_t i = 0; i < qi; ++i) {
            for (std::size_t j = 0; j < qo; ++j) {
                const Quaternion w = weight_at(i, j);
                // rows: input component blocks r,a,b,c; cols: output blocks
                const double block[4][4] = {
                    {w.r, w.a, w.b, w.c},
                    {-w.a, w.r, w.c, -w.b},
                    {-w.b, -w.c, w.r, w.a},
                    {-w.c, w.b, -w.a, w.r},
                };
                for (int ci = 0; ci < 4; ++ci)
                    for (int co = 0; co < 4; ++co)
                        b.at(i + ci * qi, j + co * qo) = block[ci][co];
            }
        }
        return b;
    }

    std::vector<Tensor> params() const {
        std::vector<Tensor> p = {wr_, wa_, wb_, wc_};
        if (with_bias_) p.push_back(bias_);
        return p;
    }

    /// Trainable weight scalars, excluding bias: in_dim*out_dim/4.
    std::size_t weight_param_count() const { return 4 * in_quats_ * out_quats_; }

    bool has_bias() const { return with_bias_; }
    const Tensor& bias() const { return bias_; }
    Tensor& component(int k) { return k == 0 ? wr_ : k == 1 ? wa_ : k == 2 ? wb_ : wc_; }
    const Tensor& component(int k) const { return k == 0 ? wr_ : k == 1 ? wa_ : k == 2 ? wb_ : wc_; }

private:
    std::size_t in_quats_ = 0, out_quats_ = 0;
    Tensor wr_, wa_, wb_, wc_;
    Tensor bias_;
    bool with_bias_ = false;
};

/// Convenience single-vector version of the quaternion linear map.
inline std::vector<double> quaternion_linear(Tape& tape, const std::vector<double>& x,
                                             const QuaternionLinear& layer) {
    Tensor xt = Tensor::from(std::vector<double>(x), {1, x.size()});
    return layer.forward(tape, xt).data();
}

} // namespace qbt
