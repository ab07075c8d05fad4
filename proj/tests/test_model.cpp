#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <fstream>
#include <vector>

#include "rf/kvtask.hpp"
#include "rf/model.hpp"
#include "rf/rng.hpp"

using namespace rf;

namespace {

ModelConfig small_cfg() {
    ModelConfig c;
    c.n_layers = 3;
    c.d_model = 32;
    c.n_heads = 4;
    c.d_mlp = 64;
    c.vocab = 48;
    c.n_ctx = 32;
    c.seed = 11;
    return c;
}

std::vector<int> ramp_prompt(int n, int vocab) {
    std::vector<int> t(n);
    for (int i = 0; i < n; ++i) t[i] = (i * 7 + 3) % vocab;
    return t;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

} // namespace

TEST_CASE("config validation and head dim") {
    ModelConfig c = small_cfg();
    CHECK(c.head_dim() == 8);
    CHECK_NOTHROW(c.validate());
    c.d_model = 30;
    CHECK_THROWS_AS(c.validate(), config_error);
    c = small_cfg();
    c.vocab = 1;
    CHECK_THROWS_AS(c.validate(), config_error);
    c = small_cfg();
    c.ln_eps = 0.0;
    CHECK_THROWS_AS(c.validate(), config_error);
    CHECK(small_cfg().normalized_depth(3) == 1.0);
}

TEST_CASE("init draws N(0, 0.02) weights, unit gains, zero biases") {
    ModelConfig c;
    c.n_layers = 1;
    c.d_model = 64;
    c.n_heads = 4;
    c.d_mlp = 128;
    c.vocab = 256;
    c.n_ctx = 32;
    c.seed = 0;
    Parameters p = init_model(c);

    // d*V = 16384 samples: sample variance within 20% of 0.0004
    double mean = 0.0, var = 0.0;
    for (double v : p.tok_emb.data) mean += v;
    mean /= p.tok_emb.numel();
    for (double v : p.tok_emb.data) var += (v - mean) * (v - mean);
    var /= p.tok_emb.numel();
    CHECK(var > 0.8 * 0.0004);
    CHECK(var < 1.2 * 0.0004);

    for (double v : p.blocks[0].ln1_g.data) CHECK(v == 1.0);
    for (double v : p.blocks[0].bq.data) CHECK(v == 0.0);
    for (double v : p.lnf_b.data) CHECK(v == 0.0);

    Parameters q = init_model(c);
    CHECK(p.unembed.data == q.unembed.data); // same seed, same weights
    c.seed = 1;
    Parameters r = init_model(c);
    CHECK(p.unembed.data != r.unembed.data);
}

TEST_CASE("forward shapes, embedding slice, determinism") {
    Parameters p = init_model(small_cfg());
    auto tokens = ramp_prompt(10, p.cfg.vocab);
    ForwardResult r = forward(p, tokens);
    CHECK(r.logits.rows() == 10);
    CHECK(r.logits.cols() == 48);
    CHECK(r.residuals.layers == 4);
    CHECK(r.residuals.tokens == 10);
    CHECK(r.residuals.dim == 32);

    for (int x = 0; x < 10; ++x) {
        auto row = r.residuals.row(0, x);
        for (int i = 0; i < 32; ++i) {
            CHECK(row[i] == p.tok_emb.at(tokens[x], i) + p.pos_emb.at(x, i));
        }
    }

    ForwardResult r2 = forward(p, tokens);
    CHECK(r.logits.data == r2.logits.data); // bit-deterministic rerun
}

TEST_CASE("forward input validation") {
    Parameters p = init_model(small_cfg());
    std::vector<int> empty;
    CHECK_THROWS_AS(forward(p, empty), config_error);
    auto long_prompt = ramp_prompt(33, p.cfg.vocab);
    CHECK_THROWS_AS(forward(p, long_prompt), config_error);
    std::vector<int> bad = {0, 1, 48};
    CHECK_THROWS_AS(forward(p, bad), config_error);
    std::vector<int> neg = {0, -1};
    CHECK_THROWS_AS(forward(p, neg), config_error);
}

TEST_CASE("causal masking: logits at x depend only on tokens <= x") {
    Parameters p = init_model(small_cfg());
    auto tokens = ramp_prompt(9, p.cfg.vocab);
    ForwardResult base = forward(p, tokens);
    auto mutated = tokens;
    mutated[8] = (tokens[8] + 5) % p.cfg.vocab;
    ForwardResult r = forward(p, mutated);
    for (int x = 0; x < 8; ++x) {
        for (int v = 0; v < p.cfg.vocab; ++v) CHECK(r.logits.at(x, v) == base.logits.at(x, v));
    }
    // and the mutated position itself moved
    double diff = 0.0;
    for (int v = 0; v < p.cfg.vocab; ++v) diff += std::abs(r.logits.at(8, v) - base.logits.at(8, v));
    CHECK(diff > 1e-6);
}

TEST_CASE("recomputing from a recorded slice reproduces downstream slices") {
    Parameters p = init_model(small_cfg());
    auto tokens = ramp_prompt(8, p.cfg.vocab);
    ForwardResult base = forward(p, tokens);
    for (int l0 = 0; l0 <= p.cfg.n_layers; ++l0) {
        ForwardResult r = forward_from_slice(p, tokens, l0, base.residuals.layer(l0));
        for (int l = l0; l <= p.cfg.n_layers; ++l) {
            auto a = base.residuals.layer(l);
            auto b = r.residuals.layer(l);
            for (std::size_t e = 0; e < a.size(); ++e) CHECK(std::abs(a[e] - b[e]) <= 1e-12);
        }
        for (std::size_t e = 0; e < base.logits.numel(); ++e) {
            CHECK(std::abs(base.logits.data[e] - r.logits.data[e]) <= 1e-12);
        }
    }
}

TEST_CASE("zero-layer model still runs the head") {
    ModelConfig c = small_cfg();
    c.n_layers = 0;
    Parameters p = init_model(c);
    auto tokens = ramp_prompt(5, c.vocab);
    ForwardResult r = forward(p, tokens);
    CHECK(r.residuals.layers == 1);
    CHECK(r.logits.rows() == 5);
}

TEST_CASE("read_observable is the logit difference at the readout position") {
    Parameters p = init_model(small_cfg());
    auto tokens = ramp_prompt(6, p.cfg.vocab);
    ForwardResult r = forward(p, tokens);
    Observable obs{3, 7, -1, false};
    CHECK(read_observable(r.logits, obs) == r.logits.at(5, 3) - r.logits.at(5, 7));
    Observable at2{3, 7, 2, false};
    CHECK(read_observable(r.logits, at2) == r.logits.at(2, 3) - r.logits.at(2, 7));
    Observable bad{48, 0, -1, false};
    CHECK_THROWS_AS(read_observable(r.logits, bad), config_error);
    Observable badpos{0, 1, 6, false};
    CHECK_THROWS_AS(read_observable(r.logits, badpos), config_error);
}

TEST_CASE("linear readout is exactly linear in a final-slice patch") {
    Parameters p = init_model(small_cfg());
    auto tokens = ramp_prompt(7, p.cfg.vocab);
    const int L = p.cfg.n_layers;
    const std::size_t d = p.cfg.d_model;
    Observable obs{5, 9, -1, true};

    ForwardResult clean = forward(p, tokens);
    const double y0 = observable_value(p, clean, obs);

    RngStream rng(3);
    auto dir = unit_vector(rng, d);
    double w_dot_j = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        w_dot_j += (p.unembed.at(5, i) - p.unembed.at(9, i)) * dir[i];
    }
    for (double eps : {1e-3, 0.1, 2.0}) {
        LayerDelta delta{L, Tensor({7, d})};
        for (std::size_t i = 0; i < d; ++i) delta.delta.at(6, i) = eps * dir[i];
        ForwardResult patched = forward(p, tokens, {delta});
        const double y1 = observable_value(p, patched, obs);
        CHECK(y1 - y0 == doctest::Approx(eps * w_dot_j).epsilon(1e-12));
    }
}

TEST_CASE("checkpoint round trip: exact logits, byte-identical resave") {
    Parameters p = init_model(small_cfg());
    auto tokens = ramp_prompt(8, p.cfg.vocab);
    ForwardResult before = forward(p, tokens);

    const std::string path = "ckpt_test.rftc";
    save_checkpoint(path, p);
    Parameters q = load_checkpoint(path);
    ForwardResult after = forward(q, tokens);
    CHECK(before.logits.data == after.logits.data);

    const std::string path2 = "ckpt_test2.rftc";
    save_checkpoint(path2, q);
    CHECK(slurp(path) == slurp(path2));

    // f32 blobs load back within float precision
    const std::string path3 = "ckpt_test_f32.rftc";
    save_checkpoint(path3, p, "f32");
    Parameters qf = load_checkpoint(path3);
    for (std::size_t e = 0; e < p.unembed.numel(); ++e) {
        CHECK(qf.unembed.data[e] ==
              doctest::Approx(p.unembed.data[e]).epsilon(1e-6));
    }
    std::remove(path.c_str());
    std::remove(path2.c_str());
    std::remove(path3.c_str());
}

TEST_CASE("zero-layer checkpoint round trips") {
    ModelConfig c = small_cfg();
    c.n_layers = 0;
    Parameters p = init_model(c);
    const std::string path = "ckpt_l0.rftc";
    save_checkpoint(path, p);
    Parameters q = load_checkpoint(path);
    CHECK(q.cfg.n_layers == 0);
    CHECK(q.tok_emb.data == p.tok_emb.data);
    std::remove(path.c_str());
}

TEST_CASE("checkpoint loader raises distinct errors") {
    CHECK_THROWS_WITH_AS(load_checkpoint("no_such_file.rftc"),
                         doctest::Contains("not found"), io_error);

    const std::string path = "ckpt_bad.rftc";
    { std::ofstream f(path, std::ios::binary); f << "JUNKJUNKJUNKJUNKJUNK"; }
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("magic"), io_error);

    ModelConfig c = small_cfg();
    c.n_layers = 0;
    Parameters p = init_model(c);
    save_checkpoint(path, p);
    {
        // bump the version field (bytes 4..7)
        std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(4);
        const std::uint32_t v = 99;
        f.write(reinterpret_cast<const char*>(&v), 4);
    }
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("version"), io_error);

    save_checkpoint(path, p);
    {
        // truncate the blob: manifest no longer matches the data section
        std::string bytes = slurp(path);
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        f.write(bytes.data(), bytes.size() - 64);
    }
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("truncated"), io_error);
    std::remove(path.c_str());
}

TEST_CASE("kv task construction and prompt template") {
    KvTask t = make_kv_task(7, 16, 16, 64, 4);
    CHECK(t.prompt_len() == 11);
    CHECK(t.cue_token() == 33);
    auto pa = t.prompt_for_key(2);
    auto pb = t.prompt_for_key(9);
    REQUIRE(pa.size() == pb.size());
    int n_diff = 0;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (pa[i] != pb[i]) {
            ++n_diff;
            CHECK(static_cast<int>(i) == t.query_position());
        }
    }
    CHECK(n_diff == 1);
    CHECK(pa.back() == t.cue_token());
    CHECK(t.answer_token(2) == t.value_token(t.value_of[2]));
    CHECK(t.distractor_token(2) != t.answer_token(2));

    CHECK_THROWS_AS(make_kv_task(7, 40, 40, 64, 4), config_error);  // alphabet > vocab
    CHECK_THROWS_AS(make_kv_task(7, 16, 16, 64, 17), config_error); // more facts than keys
    CHECK(make_kv_task(7, 16, 16, 64, 4).value_of == make_kv_task(7, 16, 16, 64, 4).value_of);
}

TEST_CASE("training improves task accuracy; zero steps is the identity") {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 32;
    c.n_heads = 4;
    c.d_mlp = 64;
    c.vocab = 16;
    c.n_ctx = 16;
    c.seed = 3;
    Parameters p = init_model(c);
    KvTask task = make_kv_task(5, 4, 4, c.vocab, 2);

    Parameters same = train_on_task(p, task, 0, 1e-3, 4, 1);
    CHECK(same.unembed.data == p.unembed.data);

    const double acc0 = task_accuracy(p, task);
    TrainReport rep;
    Parameters trained = train_on_task(p, task, 400, 3e-3, 4, 1, &rep, 1.0, 25);
    const double acc1 = task_accuracy(trained, task);
    CHECK(acc1 >= 0.75);
    CHECK(acc1 > acc0 - 1e-9);
    CHECK(rep.final_accuracy == acc1);
    CHECK(rep.steps_run <= 400);

    // deterministic retrain
    Parameters trained2 = train_on_task(p, task, 400, 3e-3, 4, 1, nullptr, 1.0, 25);
    CHECK(trained.unembed.data == trained2.unembed.data);
}
