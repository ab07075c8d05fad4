#include "rf/kvtask.hpp"

#include <algorithm>
#include <cmath>

#include "param_walk.hpp"
#include "rf/autodiff.hpp"
#include "rf/rng.hpp"

namespace rf {

std::vector<int> KvTask::prompt_for_key(int k) const {
    if (k < 0 || k >= n_keys) throw config_error("key index out of range");
    std::vector<int> p;
    p.reserve(prompt_len());
    for (int f : fact_keys) {
        p.push_back(key_token(f));
        p.push_back(value_token(value_of[f]));
    }
    p.push_back(qry_token());
    p.push_back(key_token(k));
    p.push_back(cue_token());
    return p;
}

int KvTask::distractor_token(int k) const {
    const int ans = value_of[k];
    for (int v = 0; v < n_vals; ++v) {
        if (v != ans) return value_token(v);
    }
    throw config_error("task needs at least two values for a distractor");
}

KvTask make_kv_task(std::uint64_t seed, int n_keys, int n_vals, int vocab,
                    int n_context_facts) {
    if (n_keys < 1 || n_vals < 1) throw config_error("task needs at least one key and one value");
    if (n_context_facts < 0 || n_context_facts > n_keys) {
        throw config_error("n_context_facts must be in [0, n_keys]");
    }
    if (n_keys + n_vals + 2 > vocab) {
        throw config_error("task alphabet (" + std::to_string(n_keys + n_vals + 2) +
                           " tokens) exceeds vocab " + std::to_string(vocab));
    }
    KvTask t;
    t.n_keys = n_keys;
    t.n_vals = n_vals;
    t.n_context_facts = n_context_facts;
    t.seed = seed;

    RngStream master(seed);
    RngStream map_rng = master.child(1);
    t.value_of.resize(n_keys);
    for (int k = 0; k < n_keys; ++k) t.value_of[k] = static_cast<int>(map_rng.uniform_index(n_vals));

    // Fact prefix: the first n_context_facts keys of a seeded permutation,
    // fixed per task so every prompt shares the same template positions.
    RngStream perm_rng = master.child(2);
    std::vector<int> perm(n_keys);
    for (int k = 0; k < n_keys; ++k) perm[k] = k;
    for (int i = n_keys - 1; i > 0; --i) {
        const int j = static_cast<int>(perm_rng.uniform_index(i + 1));
        std::swap(perm[i], perm[j]);
    }
    t.fact_keys.assign(perm.begin(), perm.begin() + n_context_facts);
    return t;
}

double task_accuracy(const Parameters& p, const KvTask& task) {
    int correct = 0;
    for (int k = 0; k < task.n_keys; ++k) {
        const auto prompt = task.prompt_for_key(k);
        ForwardResult r = forward(p, prompt);
        const auto logits = r.logits.row(task.readout_position());
        // argmax restricted to the value alphabet; ties to the lower token id
        int best = 0;
        for (int v = 1; v < task.n_vals; ++v) {
            if (logits[task.value_token(v)] > logits[task.value_token(best)]) best = v;
        }
        if (task.value_token(best) == task.answer_token(k)) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(task.n_keys);
}

Parameters train_on_task(const Parameters& p, const KvTask& task, int steps, double lr,
                         int batch, std::uint64_t seed, TrainReport* report,
                         double target_accuracy, int eval_every) {
    if (steps < 0) throw config_error("steps must be >= 0");
    if (batch < 1) throw config_error("batch must be >= 1");
    if (!(lr > 0.0)) throw config_error("learning rate must be positive");
    if (task.n_keys + task.n_vals + 2 > p.cfg.vocab) {
        throw config_error("task alphabet exceeds model vocab");
    }
    if (task.prompt_len() > p.cfg.n_ctx) throw config_error("task prompt exceeds n_ctx");

    Parameters w = p;
    Parameters m = zeros_like(p), v = zeros_like(p);
    std::vector<Tensor*> wt, mt, vt;
    for_each_tensor(w, [&](const std::string&, Tensor& t) { wt.push_back(&t); });
    for_each_tensor(m, [&](const std::string&, Tensor& t) { mt.push_back(&t); });
    for_each_tensor(v, [&](const std::string&, Tensor& t) { vt.push_back(&t); });

    const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    RngStream batch_rng = RngStream(seed).child(1);

    double last_loss = 0.0;
    int steps_run = 0;
    for (int step = 0; step < steps; ++step) {
        Parameters acc = zeros_like(p);
        std::vector<Tensor*> at;
        for_each_tensor(acc, [&](const std::string&, Tensor& t) { at.push_back(&t); });

        double loss_sum = 0.0;
        for (int b = 0; b < batch; ++b) {
            const int k = static_cast<int>(batch_rng.uniform_index(task.n_keys));
            const auto prompt = task.prompt_for_key(k);
            ForwardTrace tr = forward_trace(w, prompt);
            double loss = 0.0;
            Parameters g =
                grads_cross_entropy(tr, task.answer_token(k), task.readout_position(), &loss);
            loss_sum += loss;
            std::size_t ti = 0;
            for_each_tensor(g, [&](const std::string&, Tensor& t) {
                Tensor* a = at[ti++];
                for (std::size_t e = 0; e < t.numel(); ++e) a->data[e] += t.data[e];
            });
        }
        last_loss = loss_sum / batch;
        if (!std::isfinite(last_loss)) {
            throw numeric_error("training diverged: non-finite loss at step " +
                                std::to_string(step));
        }

        const double bc1 = 1.0 - std::pow(beta1, step + 1);
        const double bc2 = 1.0 - std::pow(beta2, step + 1);
        for (std::size_t ti = 0; ti < wt.size(); ++ti) {
            Tensor& tw = *wt[ti];
            Tensor& tm = *mt[ti];
            Tensor& tv = *vt[ti];
            const Tensor& tg = *at[ti];
            for (std::size_t e = 0; e < tw.numel(); ++e) {
                const double gd = tg.data[e] / batch;
                tm.data[e] = beta1 * tm.data[e] + (1.0 - beta1) * gd;
                tv.data[e] = beta2 * tv.data[e] + (1.0 - beta2) * gd * gd;
                tw.data[e] -= lr * (tm.data[e] / bc1) / (std::sqrt(tv.data[e] / bc2) + adam_eps);
            }
        }
        steps_run = step + 1;

        if (target_accuracy > 0.0 && eval_every > 0 && (step + 1) % eval_every == 0) {
            if (task_accuracy(w, task) >= target_accuracy) break;
        }
    }

    if (report) {
        report->steps_run = steps_run;
        report->final_loss = last_loss;
        report->final_accuracy = task_accuracy(w, task);
    }
    return w;
}

} // namespace rf
