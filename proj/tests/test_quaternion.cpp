#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "qbt/quaternion.hpp"
#include "test_util.hpp"

using namespace qbt;
using qbt::test::max_grad_rel_err;
using qbt::test::random_tensor;

namespace {

const Quaternion kOne{1, 0, 0, 0};
const Quaternion kI{0, 1, 0, 0};
const Quaternion kJ{0, 0, 1, 0};
const Quaternion kK{0, 0, 0, 1};

Quaternion neg(const Quaternion& q) { return {-q.r, -q.a, -q.b, -q.c}; }

double comp_dist(const Quaternion& p, const Quaternion& q) {
    return std::max({std::fabs(p.r - q.r), std::fabs(p.a - q.a), std::fabs(p.b - q.b),
                     std::fabs(p.c - q.c)});
}

Quaternion random_quat(Rng& rng, double lo = -2.0, double hi = 2.0) {
    return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
}

} // namespace

TEST_CASE("hamilton product multiplication table") {
    const Quaternion minus_one = neg(kOne);
    // the twelve identities: unit rules, squares, and the triple product
    CHECK(hamilton_product(kI, kJ) == kK);
    CHECK(hamilton_product(kJ, kK) == kI);
    CHECK(hamilton_product(kK, kI) == kJ);
    CHECK(hamilton_product(kJ, kI) == neg(kK));
    CHECK(hamilton_product(kK, kJ) == neg(kI));
    CHECK(hamilton_product(kI, kK) == neg(kJ));
    CHECK(hamilton_product(kI, kI) == minus_one);
    CHECK(hamilton_product(kJ, kJ) == minus_one);
    CHECK(hamilton_product(kK, kK) == minus_one);
    CHECK(hamilton_product(hamilton_product(kI, kJ), kK) == minus_one);
    const Quaternion p{0.3, -1.2, 2.5, 0.7};
    CHECK(hamilton_product(p, kOne) == p);
    CHECK(hamilton_product(kOne, p) == p);
}

TEST_CASE("hamilton product hand-expanded example") {
    const Quaternion p{1, 2, 3, 4}, q{5, 6, 7, 8};
    const Quaternion got = hamilton_product(p, q);
    CHECK(got.r == -60.0);
    CHECK(got.a == 12.0);
    CHECK(got.b == 30.0);
    CHECK(got.c == 24.0);
}

TEST_CASE("norm multiplicativity over 1000 random pairs") {
    Rng rng(101);
    for (int t = 0; t < 1000; ++t) {
        const Quaternion p = random_quat(rng), q = random_quat(rng);
        const double lhs = hamilton_product(p, q).norm();
        const double rhs = p.norm() * q.norm();
        if (rhs > 1e-12) {
            CHECK(std::fabs(lhs - rhs) / rhs < 1e-10);
        }
    }
}

TEST_CASE("associativity over 1000 random triples") {
    Rng rng(202);
    for (int t = 0; t < 1000; ++t) {
        const Quaternion p = random_quat(rng), q = random_quat(rng), r = random_quat(rng);
        const Quaternion lhs = hamilton_product(hamilton_product(p, q), r);
        const Quaternion rhs = hamilton_product(p, hamilton_product(q, r));
        CHECK(comp_dist(lhs, rhs) < 1e-10);
    }
}

TEST_CASE("non-commutativity witness") {
    CHECK_FALSE(hamilton_product(kI, kJ) == hamilton_product(kJ, kI));
}

TEST_CASE("split activation") {
    const Quaternion p{-1, 2, -3, 4};
    const Quaternion ident = split_activation(p, [](double x) { return x; });
    CHECK(ident == p);
    const Quaternion r = split_activation(p, [](double x) { return x > 0 ? x : 0.0; });
    CHECK(r == Quaternion{0, 2, 0, 4});
    const Quaternion s =
        split_activation(Quaternion{0, 0, 0, 0}, [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    CHECK(s == Quaternion{0.5, 0.5, 0.5, 0.5});
}

TEST_CASE("real/quaternion conversion") {
    auto qs = convert_real_to_quat({1, 2, 3, 4});
    REQUIRE(qs.size() == 1);
    CHECK(qs[0] == Quaternion{1, 2, 3, 4});

    auto qs8 = convert_real_to_quat({1, 2, 3, 4, 5, 6, 7, 8});
    REQUIRE(qs8.size() == 2);
    CHECK(qs8[0] == Quaternion{1, 3, 5, 7});
    CHECK(qs8[1] == Quaternion{2, 4, 6, 8});

    Rng rng(9);
    std::vector<double> v(16);
    for (auto& x : v) x = rng.uniform(-3, 3);
    CHECK(convert_quat_to_real(convert_real_to_quat(v)) == v);

    CHECK_THROWS_AS(convert_real_to_quat({1, 2, 3}), ConfigError);
}

TEST_CASE("quaternion linear with identity weights is the identity map") {
    Rng rng(1);
    QuaternionLinear layer(8, 8, rng, 0.0, /*with_bias=*/false);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j)
            layer.set_weight(i, j, i == j ? Quaternion{1, 0, 0, 0} : Quaternion{});
    std::vector<double> x = {0.5, -1, 2, 3, -0.25, 4, 1, -2};
    Tape tape;
    auto y = quaternion_linear(tape, x, layer);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == Catch::Approx(x[i]).margin(1e-15));
}

TEST_CASE("quaternion linear equals explicit block-matrix oracle") {
    Rng rng(33);
    const std::vector<std::pair<std::size_t, std::size_t>> shapes = {
        {4, 4}, {8, 4}, {4, 8}, {8, 8}, {12, 8}, {16, 16}};
    for (auto [n, m] : shapes) {
        QuaternionLinear layer(n, m, rng, 0.5, /*with_bias=*/false);

        // Build the dense equivalent independently: feed each basis vector
        // through scalar Hamilton-product arithmetic.
        std::vector<std::vector<double>> basis_rows;
        for (std::size_t k = 0; k < n; ++k) {
            std::vector<double> e(n, 0.0);
            e[k] = 1.0;
            auto qs = convert_real_to_quat(e);
            std::vector<Quaternion> out(m / 4);
            for (std::size_t j = 0; j < m / 4; ++j) {
                Quaternion acc{};
                for (std::size_t i = 0; i < n / 4; ++i) {
                    const Quaternion prod = hamilton_product(layer.weight_at(i, j), qs[i]);
                    acc.r += prod.r;
                    acc.a += prod.a;
                    acc.b += prod.b;
                    acc.c += prod.c;
                }
                out[j] = acc;
            }
            basis_rows.push_back(convert_quat_to_real(out));
        }

        for (int trial = 0; trial < 5; ++trial) {
            std::vector<double> x(n);
            for (auto& v : x) v = rng.uniform(-2, 2);
            Tape tape;
            const auto got = quaternion_linear(tape, x, layer);
            for (std::size_t col = 0; col < m; ++col) {
                double expect = 0.0;
                for (std::size_t row = 0; row < n; ++row) expect += x[row] * basis_rows[row][col];
                CHECK(std::fabs(got[col] - expect) < 1e-12);
            }
        }

        // to_real_matrix agrees with the same oracle
        Tensor b = layer.to_real_matrix();
        for (std::size_t row = 0; row < n; ++row)
            for (std::size_t col = 0; col < m; ++col)
                CHECK(std::fabs(b.at(row, col) - basis_rows[row][col]) < 1e-15);
    }
}

TEST_CASE("quaternion linear trains exactly one quarter of the dense weights") {
    Rng rng(4);
    QuaternionLinear layer(384, 192, rng);
    CHECK(layer.weight_param_count() == 18432);
    CHECK(layer.weight_param_count() == 384 * 192 / 4);
    QuaternionLinear small(8, 12, rng);
    CHECK(small.weight_param_count() == 8 * 12 / 4);
}

TEST_CASE("quaternion linear gradients match finite differences") {
    Rng rng(55);
    QuaternionLinear layer(8, 4, rng, 0.5);
    Tensor x = random_tensor({3, 8}, rng, true);
    Tensor w = random_tensor({3, 4}, rng, false);
    auto fn = [&](Tape& t) { return sum(t, mul(t, layer.forward(t, x), w)); };
    CHECK(max_grad_rel_err(fn, x) < 1e-6);
    for (auto p : layer.params()) {
        CHECK(max_grad_rel_err(fn, p) < 1e-6);
    }
}

TEST_CASE("quaternion linear rejects dimensions not divisible by 4") {
    Rng rng(2);
    CHECK_THROWS_AS(QuaternionLinear(6, 8, rng), ConfigError);
    CHECK_THROWS_AS(QuaternionLinear(8, 7, rng), ConfigError);
}
