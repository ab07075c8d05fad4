#pragma once

#include <cstdint>
#include <vector>

#include "rf/model.hpp"

namespace rf {

// Key-value recall task. The token alphabet is carved out of the model vocab:
//   keys   -> token ids [0, n_keys)
//   values -> token ids [n_keys, n_keys + n_vals)
//   QRY    -> n_keys + n_vals      (query marker)
//   CUE    -> n_keys + n_vals + 1  (answer-cue token, the readout position)
// Every prompt shares a fixed fact prefix (n_context_facts key/value pairs
// drawn once per task) and ends [QRY, key, CUE]; the answer is read at the CUE
// position. Two prompts for different keys therefore differ at exactly one
// interior position (the key slot), which is what the displacement
// experiments rely on.
struct KvTask {
    int n_keys = 16;
    int n_vals = 16;
    int n_context_facts = 4;
    std::uint64_t seed = 0;
    std::vector<int> value_of;  // key index -> value index
    std::vector<int> fact_keys; // keys spelled out in the shared prefix

    int key_token(int k) const { return k; }
    int value_token(int v) const { return n_keys + v; }
    int qry_token() const { return n_keys + n_vals; }
    int cue_token() const { return n_keys + n_vals + 1; }

    int prompt_len() const { return 2 * n_context_facts + 3; }
    int query_position() const { return prompt_len() - 2; }
    int readout_position() const { return prompt_len() - 1; }

    std::vector<int> prompt_for_key(int k) const;
    int answer_token(int k) const { return value_token(value_of[k]); }
    // Fixed distractor: the smallest value index different from the answer.
    int distractor_token(int k) const;
};

// Deterministic task from a seed; throws config_error when the alphabet does
// not fit the vocab (needs n_keys + n_vals + 2 <= vocab) or sizes are invalid.
KvTask make_kv_task(std::uint64_t seed, int n_keys, int n_vals, int vocab,
                    int n_context_facts = 4);

// Fraction of keys whose argmax over the value-token alphabet at the readout
// position equals the correct answer.
double task_accuracy(const Parameters& p, const KvTask& task);

struct TrainReport {
    int steps_run = 0;
    double final_loss = 0.0;
    double final_accuracy = 0.0;
};

// Adam on the cross-entropy of the answer token at the readout position.
// Deterministic given (params, task, seed). steps == 0 returns params
// unchanged. Stops early once accuracy over all keys reaches target_accuracy
// (checked every eval_every steps); target_accuracy <= 0 disables the check.
Parameters train_on_task(const Parameters& p, const KvTask& task, int steps,
                         double lr, int batch, std::uint64_t seed,
                         TrainReport* report = nullptr,
                         double target_accuracy = 0.995, int eval_every = 25);

} // namespace rf
