// Kernel benchmark: OpenMP versions against the serial reference. Reports
// timings, speedup, and the max |difference| column — which must print as 0
// everywhere (the parallel kernels are bit-identical by construction).
//
// Not registered with ctest; run manually: build/bench/bench_kernels [reps]

#include <omp.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <string>
#include <vector>

#include "rf/kernels.hpp"
#include "rf/rng.hpp"

using namespace rf;

namespace {

std::vector<double> randv(RngStream& rng, std::size_t n) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal();
    return v;
}

struct Case {
    std::string name;
    std::size_t out_elems;
    std::function<void(double*)> par;
    std::function<void(double*)> ser;
};

double time_of(const std::function<void(double*)>& fn, double* out, int reps) {
    fn(out); // warm up
    const double t0 = omp_get_wtime();
    for (int r = 0; r < reps; ++r) fn(out);
    return (omp_get_wtime() - t0) / reps;
}

} // namespace

int main(int argc, char** argv) {
    const int reps = argc > 1 ? std::atoi(argv[1]) : 20;
    RngStream rng(42);

    const std::size_t n = 256, k = 256, m = 256;
    auto A = randv(rng, n * k);
    auto B = randv(rng, m * k);
    auto gain = randv(rng, k);
    auto bias = randv(rng, k);
    auto S0 = randv(rng, n * n);

    std::vector<Case> cases;
    cases.push_back({"matmul_nt 256^3", n * m,
                     [&](double* o) { kernels::matmul_nt(A.data(), n, k, B.data(), m, o); },
                     [&](double* o) { kernels::serial::matmul_nt(A.data(), n, k, B.data(), m, o); }});
    cases.push_back({"matmul_nn 256^3", n * m,
                     [&](double* o) { kernels::matmul_nn(A.data(), n, k, B.data(), m, o); },
                     [&](double* o) { kernels::serial::matmul_nn(A.data(), n, k, B.data(), m, o); }});
    cases.push_back({"matmul_tn 256^3", k * m,
                     [&](double* o) { kernels::matmul_tn(A.data(), n, m, B.data(), k, o); },
                     [&](double* o) { kernels::serial::matmul_tn(A.data(), n, m, B.data(), k, o); }});
    cases.push_back({"layer_norm 256x256", n * k,
                     [&](double* o) {
                         kernels::layer_norm_rows(A.data(), n, k, gain.data(), bias.data(), 1e-5,
                                                  o, nullptr, nullptr);
                     },
                     [&](double* o) {
                         kernels::serial::layer_norm_rows(A.data(), n, k, gain.data(), bias.data(),
                                                          1e-5, o, nullptr, nullptr);
                     }});
    cases.push_back({"softmax_causal 256x256", n * n,
                     [&](double* o) {
                         std::copy(S0.begin(), S0.end(), o);
                         kernels::softmax_causal_rows(o, n);
                     },
                     [&](double* o) {
                         std::copy(S0.begin(), S0.end(), o);
                         kernels::serial::softmax_causal_rows(o, n);
                     }});
    cases.push_back({"gelu 256x256", n * k,
                     [&](double* o) { kernels::gelu_rows(A.data(), n, k, o); },
                     [&](double* o) { kernels::serial::gelu_rows(A.data(), n, k, o); }});

    std::printf("threads=%d reps=%d\n", omp_get_max_threads(), reps);
    std::printf("%-24s %12s %12s %9s %12s\n", "kernel", "serial (ms)", "openmp (ms)", "speedup",
                "max |diff|");
    for (const Case& c : cases) {
        std::vector<double> out_s(c.out_elems), out_p(c.out_elems);
        const double ts = time_of(c.ser, out_s.data(), reps);
        const double tp = time_of(c.par, out_p.data(), reps);
        double max_diff = 0.0;
        for (std::size_t i = 0; i < c.out_elems; ++i)
            max_diff = std::max(max_diff, std::abs(out_s[i] - out_p[i]));
        std::printf("%-24s %12.3f %12.3f %9.2f %12g\n", c.name.c_str(), ts * 1e3, tp * 1e3,
                    ts / tp, max_diff);
    }
    return 0;
}
