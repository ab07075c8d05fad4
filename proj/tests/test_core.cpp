#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "rf/kernels.hpp"
#include "rf/rng.hpp"
#include "rf/tensor.hpp"

using namespace rf;

TEST_CASE("gelu matches frozen oracle values") {
    CHECK(kernels::gelu(0.0) == 0.0);
    CHECK(kernels::gelu(1.0) == doctest::Approx(0.84119199060827676).epsilon(1e-12));
    CHECK(kernels::gelu(-1.0) == doctest::Approx(-0.15880800939172324).epsilon(1e-12));
    CHECK(kernels::gelu(0.5) == doctest::Approx(0.34571400982514394).epsilon(1e-12));
    CHECK(kernels::gelu(10.0) == doctest::Approx(10.0).epsilon(1e-9));
    CHECK(std::abs(kernels::gelu(-10.0)) < 1e-9);
}

TEST_CASE("gelu_grad matches oracle and finite differences") {
    CHECK(kernels::gelu_grad(0.7) == doctest::Approx(0.97635721865610403).epsilon(1e-12));
    const double h = 1e-6;
    for (double x : {-2.0, -0.5, 0.0, 0.3, 1.7, 4.0}) {
        const double fd = (kernels::gelu(x + h) - kernels::gelu(x - h)) / (2 * h);
        CHECK(kernels::gelu_grad(x) == doctest::Approx(fd).epsilon(1e-7));
    }
}

TEST_CASE("stable_softmax oracle, shift invariance, overflow safety") {
    std::vector<double> in = {0.0, std::log(3.0)};
    std::vector<double> out(2);
    stable_softmax(in, out);
    CHECK(out[0] == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(out[1] == doctest::Approx(0.75).epsilon(1e-15));

    std::vector<double> v = {0.3, -1.2, 2.5, 0.0, 1.1};
    std::vector<double> a(5), b(5), shifted(5);
    for (int i = 0; i < 5; ++i) shifted[i] = v[i] + 123.456;
    stable_softmax(v, a);
    stable_softmax(shifted, b);
    double sum = 0.0;
    for (int i = 0; i < 5; ++i) {
        CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-14));
        sum += a[i];
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-14));

    std::vector<double> big = {1000.0, 1000.0};
    std::vector<double> ob(2);
    stable_softmax(big, ob);
    CHECK(ob[0] == doctest::Approx(0.5).epsilon(1e-15));

    std::vector<double> bad = {0.0, std::numeric_limits<double>::infinity()};
    std::vector<double> ignored(2);
    CHECK_THROWS_AS(stable_softmax(bad, ignored), numeric_error);
    std::vector<double> nan_in = {std::nan(""), 0.0};
    CHECK_THROWS_AS(stable_softmax(nan_in, ignored), numeric_error);
}

TEST_CASE("layer_norm matches frozen oracle and normalizes") {
    const std::vector<double> x = {1.0, 2.0, 3.0, 4.0};
    const std::vector<double> gain = {1.0, 1.0, 1.0, 1.0};
    const std::vector<double> bias = {0.0, 0.0, 0.0, 0.0};
    std::vector<double> y(4);
    double mean = 0.0, invstd = 0.0;
    kernels::layer_norm_rows(x.data(), 1, 4, gain.data(), bias.data(), 1e-5, y.data(), &mean,
                             &invstd);
    CHECK(mean == doctest::Approx(2.5).epsilon(1e-15));
    CHECK(invstd == doctest::Approx(0.89442361331261799).epsilon(1e-14));
    const std::vector<double> expect = {-1.3416354199689269, -0.447211806656309,
                                        0.447211806656309, 1.3416354199689269};
    for (int i = 0; i < 4; ++i) CHECK(y[i] == doctest::Approx(expect[i]).epsilon(1e-14));

    // affine: gain/bias move the output as documented
    const std::vector<double> g2 = {2.0, 2.0, 2.0, 2.0};
    const std::vector<double> b2 = {-1.0, -1.0, -1.0, -1.0};
    std::vector<double> y2(4);
    kernels::layer_norm_rows(x.data(), 1, 4, g2.data(), b2.data(), 1e-5, y2.data(), nullptr,
                             nullptr);
    for (int i = 0; i < 4; ++i) CHECK(y2[i] == doctest::Approx(2.0 * y[i] - 1.0).epsilon(1e-13));

    // random rows come out with mean ~0 and unit variance
    RngStream rng(42);
    std::vector<double> xr(64), yr(64), g(64, 1.0), b(64, 0.0);
    for (auto& v : xr) v = 3.0 * rng.normal() + 0.5;
    kernels::layer_norm_rows(xr.data(), 1, 64, g.data(), b.data(), 1e-8, yr.data(), nullptr,
                             nullptr);
    double mu = 0.0, var = 0.0;
    for (double v : yr) mu += v;
    mu /= 64;
    for (double v : yr) var += (v - mu) * (v - mu);
    var /= 64;
    CHECK(std::abs(mu) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("matmul kernels match hand-computed products") {
    // A = [[1,2],[3,4]], B_rows = [[5,6],[7,8]] -> A . B^T = [[17,23],[39,53]]
    const std::vector<double> A = {1, 2, 3, 4};
    const std::vector<double> B = {5, 6, 7, 8};
    std::vector<double> C(4);
    kernels::matmul_nt(A.data(), 2, 2, B.data(), 2, C.data());
    CHECK(C == std::vector<double>{17, 23, 39, 53});

    // A . B = [[19,22],[43,50]]
    kernels::matmul_nn(A.data(), 2, 2, B.data(), 2, C.data());
    CHECK(C == std::vector<double>{19, 22, 43, 50});

    // A^T . B = [[26,30],[38,44]]
    kernels::matmul_tn(A.data(), 2, 2, B.data(), 2, C.data());
    CHECK(C == std::vector<double>{26, 30, 38, 44});
}

TEST_CASE("matmul variants are mutually consistent on random data") {
    RngStream rng(7);
    const std::size_t n = 5, k = 9, m = 4;
    std::vector<double> A(n * k), B(k * m), Bt(m * k);
    for (auto& v : A) v = rng.normal();
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            B[i * m + j] = rng.normal();
            Bt[j * k + i] = B[i * m + j];
        }
    std::vector<double> C1(n * m), C2(n * m);
    kernels::matmul_nn(A.data(), n, k, B.data(), m, C1.data());
    kernels::matmul_nt(A.data(), n, k, Bt.data(), m, C2.data());
    for (std::size_t e = 0; e < n * m; ++e) CHECK(C1[e] == doctest::Approx(C2[e]).epsilon(1e-13));
}

TEST_CASE("parallel kernels are bit-identical to the serial reference") {
    RngStream rng(123);
    const std::size_t n = 33, k = 65, m = 17;
    std::vector<double> A(n * k), B(m * k), Bn(k * m);
    for (auto& v : A) v = rng.normal();
    for (auto& v : B) v = rng.normal();
    for (auto& v : Bn) v = rng.normal();

    std::vector<double> Cp(n * m), Cs(n * m);
    kernels::matmul_nt(A.data(), n, k, B.data(), m, Cp.data());
    kernels::serial::matmul_nt(A.data(), n, k, B.data(), m, Cs.data());
    for (std::size_t e = 0; e < n * m; ++e) CHECK(Cp[e] == Cs[e]);

    kernels::matmul_nn(A.data(), n, k, Bn.data(), m, Cp.data());
    kernels::serial::matmul_nn(A.data(), n, k, Bn.data(), m, Cs.data());
    for (std::size_t e = 0; e < n * m; ++e) CHECK(Cp[e] == Cs[e]);

    std::vector<double> Tp(k * 33), Ts(k * 33);
    std::vector<double> B2(n * 33);
    for (auto& v : B2) v = rng.normal();
    kernels::matmul_tn(A.data(), n, k, B2.data(), 33, Tp.data());
    kernels::serial::matmul_tn(A.data(), n, k, B2.data(), 33, Ts.data());
    for (std::size_t e = 0; e < k * 33; ++e) CHECK(Tp[e] == Ts[e]);

    const std::size_t d = 48;
    std::vector<double> X(n * d), gain(d), bias(d), Yp(n * d), Ys(n * d), mp(n), ms(n),
        sp(n), ss(n);
    for (auto& v : X) v = rng.normal();
    for (auto& v : gain) v = 1.0 + 0.1 * rng.normal();
    for (auto& v : bias) v = 0.1 * rng.normal();
    kernels::layer_norm_rows(X.data(), n, d, gain.data(), bias.data(), 1e-5, Yp.data(),
                             mp.data(), sp.data());
    kernels::serial::layer_norm_rows(X.data(), n, d, gain.data(), bias.data(), 1e-5, Ys.data(),
                                     ms.data(), ss.data());
    for (std::size_t e = 0; e < n * d; ++e) CHECK(Yp[e] == Ys[e]);
    for (std::size_t e = 0; e < n; ++e) {
        CHECK(mp[e] == ms[e]);
        CHECK(sp[e] == ss[e]);
    }

    std::vector<double> Sp(n * n), Ss(n * n);
    for (std::size_t e = 0; e < n * n; ++e) Sp[e] = Ss[e] = rng.normal();
    kernels::softmax_causal_rows(Sp.data(), n);
    kernels::serial::softmax_causal_rows(Ss.data(), n);
    for (std::size_t e = 0; e < n * n; ++e) CHECK(Sp[e] == Ss[e]);

    std::vector<double> Gp(n * d), Gs(n * d);
    kernels::gelu_rows(X.data(), n, d, Gp.data());
    kernels::serial::gelu_rows(X.data(), n, d, Gs.data());
    for (std::size_t e = 0; e < n * d; ++e) CHECK(Gp[e] == Gs[e]);
}

TEST_CASE("causal softmax rows are masked and normalized") {
    RngStream rng(9);
    const std::size_t n = 6;
    std::vector<double> S(n * n);
    for (auto& v : S) v = rng.normal();
    kernels::softmax_causal_rows(S.data(), n);
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            CHECK(S[i * n + j] > 0.0);
            sum += S[i * n + j];
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-14));
        for (std::size_t j = i + 1; j < n; ++j) CHECK(S[i * n + j] == 0.0);
    }

    std::vector<double> bad(n * n, 0.0);
    bad[2 * n + 1] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(kernels::softmax_causal_rows(bad.data(), n), numeric_error);
}

TEST_CASE("splitmix64 stream matches the reference sequence") {
    RngStream rng(0);
    CHECK(rng.next_u64() == 0xE220A8397B1DCDAFull);
    CHECK(rng.next_u64() == 0x6E789E6AA1B965F4ull);
    CHECK(rng.next_u64() == 0x06C45D188009454Full);
}

TEST_CASE("rng streams are deterministic and child derivation is documented mixing") {
    RngStream a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    RngStream parent(7);
    parent.next_u64(); // advancing the parent must not move children
    RngStream c = parent.child(0x2a);
    CHECK(c.seed() == 0x6EAB8625DF268FBCull); // mix64(mix64(7) ^ 0x2a)
    CHECK(RngStream(7).child(0x2a).seed() == c.seed());
    CHECK(RngStream(7).child(1).seed() != RngStream(7).child(2).seed());
}

TEST_CASE("rng uniform and normal have sane distributions") {
    RngStream rng(2024);
    double mn = 1.0, mx = 0.0;
    for (int i = 0; i < 10000; ++i) {
        const double u = rng.uniform();
        CHECK(u > 0.0);
        CHECK(u <= 1.0);
        mn = std::min(mn, u);
        mx = std::max(mx, u);
    }
    CHECK(mn < 0.01);
    CHECK(mx > 0.99);

    double mean = 0.0, var = 0.0;
    const int N = 50000;
    std::vector<double> zs(N);
    for (auto& z : zs) z = rng.normal();
    for (double z : zs) mean += z;
    mean /= N;
    for (double z : zs) var += (z - mean) * (z - mean);
    var /= N;
    CHECK(std::abs(mean) < 0.02);
    CHECK(var == doctest::Approx(1.0).epsilon(0.03));
}

TEST_CASE("unit_vector is normalized and seed-stable") {
    RngStream rng(5);
    auto v = unit_vector(rng, 32);
    CHECK(norm2(v) == doctest::Approx(1.0).epsilon(1e-12));
    RngStream rng2(5);
    auto w = unit_vector(rng2, 32);
    for (int i = 0; i < 32; ++i) CHECK(v[i] == w[i]);
}

TEST_CASE("tensor and field indexing are row-major") {
    Tensor t({2, 3});
    t.at(1, 2) = 7.0;
    CHECK(t.data[5] == 7.0);
    CHECK(t.numel() == 6);

    Field3 f(2, 3, 4);
    f.at(1, 2, 3) = 9.0;
    CHECK(f.v[(1 * 3 + 2) * 4 + 3] == 9.0);
    CHECK(f.row(1, 2)[3] == 9.0);
    CHECK(f.layer(1).size() == 12);

    std::vector<double> bad = {1.0, std::numeric_limits<double>::infinity()};
    CHECK_THROWS_AS(check_finite(bad, "probe"), numeric_error);
}
