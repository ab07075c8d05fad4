#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "rf/autodiff.hpp"
#include "rf/kvtask.hpp"
#include "rf/model.hpp"
#include "rf/rng.hpp"

using namespace rf;

namespace {

ModelConfig cfg3() {
    ModelConfig c;
    c.n_layers = 3;
    c.d_model = 32;
    c.n_heads = 4;
    c.d_mlp = 64;
    c.vocab = 48;
    c.n_ctx = 32;
    c.seed = 5;
    return c;
}

std::vector<int> prompt_of(int n, int vocab) {
    std::vector<int> t(n);
    for (int i = 0; i < n; ++i) t[i] = (i * 5 + 1) % vocab;
    return t;
}

double rel_err(double got, double want) {
    return std::abs(got - want) / std::max(std::abs(want), 1e-300);
}

} // namespace

TEST_CASE("sensitivity field matches central finite differences at random sites") {
    Parameters p = init_model(cfg3());
    auto tokens = prompt_of(8, p.cfg.vocab);
    Observable obs{4, 9, -1, false};
    SensitivityField a = sensitivity_field(p, tokens, obs);

    RngStream rng(1);
    int checked = 0;
    for (int trial = 0; trial < 60; ++trial) {
        Site s{static_cast<int>(rng.uniform_index(p.cfg.n_layers + 1)),
               static_cast<int>(rng.uniform_index(8))};
        auto dir = unit_vector(rng, p.cfg.d_model);
        const double analytic = dot(a.row(s.layer, s.token), dir);
        const double fd = fd_patch_derivative(p, tokens, s, dir, obs, 1e-5);
        if (std::abs(analytic) > 1e-8) {
            CHECK(rel_err(fd, analytic) < 1e-6);
            ++checked;
        } else {
            CHECK(std::abs(fd) < 1e-7);
        }
    }
    CHECK(checked >= 30); // most random sites upstream of the readout are live
}

TEST_CASE("sensitivity field in linear-readout mode: exact final slice, FD elsewhere") {
    Parameters p = init_model(cfg3());
    auto tokens = prompt_of(7, p.cfg.vocab);
    const int L = p.cfg.n_layers;
    const int d = p.cfg.d_model;
    Observable obs{2, 11, -1, true};
    SensitivityField a = sensitivity_field(p, tokens, obs);

    for (int i = 0; i < d; ++i) {
        CHECK(a.at(L, 6, i) == p.unembed.at(2, i) - p.unembed.at(11, i));
    }
    for (int x = 0; x < 6; ++x) {
        for (int i = 0; i < d; ++i) CHECK(a.at(L, x, i) == 0.0);
    }
    RngStream rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        Site s{static_cast<int>(rng.uniform_index(L)), static_cast<int>(rng.uniform_index(7))};
        auto dir = unit_vector(rng, d);
        const double analytic = dot(a.row(s.layer, s.token), dir);
        const double fd = fd_patch_derivative(p, tokens, s, dir, obs, 1e-5);
        if (std::abs(analytic) > 1e-8) CHECK(rel_err(fd, analytic) < 1e-6);
    }
}

TEST_CASE("sensitivity rows after the readout position are zero") {
    Parameters p = init_model(cfg3());
    auto tokens = prompt_of(8, p.cfg.vocab);
    Observable obs{4, 9, 4, false}; // readout at position 4
    SensitivityField a = sensitivity_field(p, tokens, obs);
    for (int l = 0; l <= p.cfg.n_layers; ++l) {
        for (int x = 5; x < 8; ++x) {
            for (int i = 0; i < p.cfg.d_model; ++i) CHECK(a.at(l, x, i) == 0.0);
        }
    }
}

TEST_CASE("jvp tangent field: seed structure, causal zeros, FD agreement") {
    Parameters p = init_model(cfg3());
    auto tokens = prompt_of(8, p.cfg.vocab);
    ForwardTrace tr = forward_trace(p, tokens);
    const int L = p.cfg.n_layers;
    const std::size_t d = p.cfg.d_model;

    RngStream rng(3);
    auto dir = unit_vector(rng, d);
    Site s{1, 3};
    TangentField t = jvp_residual(tr, s, dir);

    // slices below the source are exactly zero; the seed slice is the direction
    for (int x = 0; x < 8; ++x)
        for (std::size_t i = 0; i < d; ++i) CHECK(t.at(0, x, i) == 0.0);
    for (std::size_t i = 0; i < d; ++i) CHECK(t.at(1, 3, i) == dir[i]);
    for (int x = 0; x < 8; ++x) {
        if (x == 3) continue;
        for (std::size_t i = 0; i < d; ++i) CHECK(t.at(1, x, i) == 0.0);
    }
    // tokens before the source stay exactly zero at all layers (causal cone)
    for (int l = 1; l <= L; ++l)
        for (int x = 0; x < 3; ++x)
            for (std::size_t i = 0; i < d; ++i) CHECK(t.at(l, x, i) == 0.0);

    // d(residual)/d(eps) against central differences on patched forwards
    const double h = 1e-5;
    LayerDelta dp{s.layer, Tensor({8, d})};
    LayerDelta dm{s.layer, Tensor({8, d})};
    for (std::size_t i = 0; i < d; ++i) {
        dp.delta.at(3, i) = h * dir[i];
        dm.delta.at(3, i) = -h * dir[i];
    }
    ForwardResult rp = forward(p, tokens, {dp});
    ForwardResult rm = forward(p, tokens, {dm});
    for (int l = s.layer; l <= L; ++l) {
        for (int x = 3; x < 8; ++x) {
            for (std::size_t i = 0; i < d; ++i) {
                const double fd = (rp.residuals.at(l, x, i) - rm.residuals.at(l, x, i)) / (2 * h);
                CHECK(std::abs(t.at(l, x, i) - fd) < 1e-7);
            }
        }
    }
}

TEST_CASE("adjoint identity: observable derivative via JVP equals sensitivity dot") {
    Parameters p = init_model(cfg3());
    auto tokens = prompt_of(8, p.cfg.vocab);
    ForwardTrace tr = forward_trace(p, tokens);
    for (bool linear : {false, true}) {
        Observable obs{4, 9, -1, linear};
        SensitivityField a = sensitivity_field(tr, obs);
        RngStream rng(4);
        for (int trial = 0; trial < 25; ++trial) {
            Site s{static_cast<int>(rng.uniform_index(p.cfg.n_layers + 1)),
                   static_cast<int>(rng.uniform_index(8))};
            auto dir = unit_vector(rng, p.cfg.d_model);
            TangentField t = jvp_residual(tr, s, dir);
            const double via_jvp = tangent_observable(tr, t, obs);
            const double via_vjp = dot(a.row(s.layer, s.token), dir);
            CHECK(std::abs(via_jvp - via_vjp) <=
                  1e-10 * std::max(1.0, std::abs(via_vjp)));
        }
    }
}

TEST_CASE("vjp_component: seed basis vector, causal transpose cone, JVP transpose") {
    Parameters p = init_model(cfg3());
    auto tokens = prompt_of(8, p.cfg.vocab);
    ForwardTrace tr = forward_trace(p, tokens);
    const std::size_t d = p.cfg.d_model;

    Site tgt{2, 5};
    const int ch = 13;
    SensitivityField g = vjp_component(tr, tgt, ch);

    for (std::size_t i = 0; i < d; ++i) CHECK(g.at(2, 5, i) == (static_cast<int>(i) == ch ? 1.0 : 0.0));
    for (int x = 0; x < 8; ++x) {
        if (x == 5) continue;
        for (std::size_t i = 0; i < d; ++i) CHECK(g.at(2, x, i) == 0.0);
    }
    // slices above the target are zero; tokens after the target never matter
    for (int x = 0; x < 8; ++x)
        for (std::size_t i = 0; i < d; ++i) CHECK(g.at(3, x, i) == 0.0);
    for (int l = 0; l <= 2; ++l)
        for (int x = 6; x < 8; ++x)
            for (std::size_t i = 0; i < d; ++i) CHECK(g.at(l, x, i) == 0.0);

    // transpose identity against the JVP at a random source
    RngStream rng(6);
    for (int trial = 0; trial < 10; ++trial) {
        Site src{static_cast<int>(rng.uniform_index(2)), static_cast<int>(rng.uniform_index(5))};
        auto dir = unit_vector(rng, d);
        TangentField t = jvp_residual(tr, src, dir);
        const double via_jvp = t.at(tgt.layer, tgt.token, ch);
        const double via_vjp = dot(g.row(src.layer, src.token), dir);
        CHECK(std::abs(via_jvp - via_vjp) <= 1e-10 * std::max(1.0, std::abs(via_vjp)));
    }
}

TEST_CASE("site and direction validation") {
    Parameters p = init_model(cfg3());
    auto tokens = prompt_of(6, p.cfg.vocab);
    ForwardTrace tr = forward_trace(p, tokens);
    Observable obs{1, 2, -1, false};
    std::vector<double> dir(p.cfg.d_model, 0.1);
    CHECK_THROWS_AS(jvp_residual(tr, Site{4, 0}, dir), config_error);
    CHECK_THROWS_AS(jvp_residual(tr, Site{0, 6}, dir), config_error);
    CHECK_THROWS_AS(vjp_component(tr, Site{1, 1}, 32), config_error);
    std::vector<double> short_dir(p.cfg.d_model - 1, 0.1);
    CHECK_THROWS_AS(jvp_residual(tr, Site{0, 0}, short_dir), config_error);
    CHECK_THROWS_AS(fd_patch_derivative(p, tokens, Site{0, 0}, dir, obs, 0.0), config_error);
}

TEST_CASE("cross-entropy parameter gradients match finite differences") {
    ModelConfig c = cfg3();
    c.n_layers = 2;
    Parameters p = init_model(c);
    KvTask task = make_kv_task(9, 8, 8, c.vocab, 3);
    const auto prompt = task.prompt_for_key(5);
    const int ans = task.answer_token(5);
    const int pos = task.readout_position();

    ForwardTrace tr = forward_trace(p, prompt);
    double loss0 = 0.0;
    Parameters g = grads_cross_entropy(tr, ans, pos, &loss0);
    CHECK(loss0 > 0.0);

    auto fd_param = [&](Tensor Parameters::* field, std::size_t idx) {
        const double h = 1e-5;
        Parameters pp = p;
        (pp.*field).data[idx] += h;
        double lp = 0.0;
        grads_cross_entropy(forward_trace(pp, prompt), ans, pos, &lp);
        Parameters pm = p;
        (pm.*field).data[idx] -= h;
        double lm = 0.0;
        grads_cross_entropy(forward_trace(pm, prompt), ans, pos, &lm);
        return (lp - lm) / (2 * h);
    };
    CHECK(rel_err((g.*(&Parameters::unembed)).data[ans * c.d_model + 3],
                  fd_param(&Parameters::unembed, ans * c.d_model + 3)) < 1e-5);
    CHECK(rel_err(g.lnf_g.data[7], fd_param(&Parameters::lnf_g, 7)) < 1e-5);
    const std::size_t tok_idx = static_cast<std::size_t>(prompt[pos - 1]) * c.d_model + 2;
    CHECK(rel_err(g.tok_emb.data[tok_idx], fd_param(&Parameters::tok_emb, tok_idx)) < 1e-5);
    CHECK(rel_err(g.pos_emb.data[2 * c.d_model + 5], fd_param(&Parameters::pos_emb, 2 * c.d_model + 5)) < 1e-5);

    auto fd_block = [&](Tensor BlockParams::* field, int bi, std::size_t idx) {
        const double h = 1e-5;
        Parameters pp = p;
        (pp.blocks[bi].*field).data[idx] += h;
        double lp = 0.0;
        grads_cross_entropy(forward_trace(pp, prompt), ans, pos, &lp);
        Parameters pm = p;
        (pm.blocks[bi].*field).data[idx] -= h;
        double lm = 0.0;
        grads_cross_entropy(forward_trace(pm, prompt), ans, pos, &lm);
        return (lp - lm) / (2 * h);
    };
    CHECK(rel_err(g.blocks[0].wq.data[45], fd_block(&BlockParams::wq, 0, 45)) < 1e-4);
    CHECK(rel_err(g.blocks[1].wo.data[100], fd_block(&BlockParams::wo, 1, 100)) < 1e-4);
    CHECK(rel_err(g.blocks[0].w1.data[333], fd_block(&BlockParams::w1, 0, 333)) < 1e-4);
    CHECK(rel_err(g.blocks[1].w2.data[222], fd_block(&BlockParams::w2, 1, 222)) < 1e-4);
    CHECK(rel_err(g.blocks[0].ln1_g.data[4], fd_block(&BlockParams::ln1_g, 0, 4)) < 1e-4);
    CHECK(rel_err(g.blocks[1].ln2_b.data[8], fd_block(&BlockParams::ln2_b, 1, 8)) < 1e-4);
    CHECK(rel_err(g.blocks[0].bv.data[12], fd_block(&BlockParams::bv, 0, 12)) < 1e-4);
    CHECK(rel_err(g.blocks[1].b2.data[20], fd_block(&BlockParams::b2, 1, 20)) < 1e-4);
}
