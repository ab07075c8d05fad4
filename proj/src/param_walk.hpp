#pragma once

// Single enumeration of every parameter tensor (name + reference), shared by
// checkpoint IO, gradient containers, the Adam state and depth refinement so
// they can never drift out of sync.

#include <functional>
#include <string>

#include "rf/model.hpp"

namespace rf {

template <typename Params, typename Fn>
void for_each_tensor(Params& p, Fn&& fn) {
    fn("tok_emb", p.tok_emb);
    fn("pos_emb", p.pos_emb);
    for (std::size_t b = 0; b < p.blocks.size(); ++b) {
        auto& blk = p.blocks[b];
        const std::string pre = "blocks." + std::to_string(b) + ".";
        fn(pre + "ln1_g", blk.ln1_g);
        fn(pre + "ln1_b", blk.ln1_b);
        fn(pre + "wq", blk.wq);
        fn(pre + "bq", blk.bq);
        fn(pre + "wk", blk.wk);
        fn(pre + "bk", blk.bk);
        fn(pre + "wv", blk.wv);
        fn(pre + "bv", blk.bv);
        fn(pre + "wo", blk.wo);
        fn(pre + "bo", blk.bo);
        fn(pre + "ln2_g", blk.ln2_g);
        fn(pre + "ln2_b", blk.ln2_b);
        fn(pre + "w1", blk.w1);
        fn(pre + "b1", blk.b1);
        fn(pre + "w2", blk.w2);
        fn(pre + "b2", blk.b2);
    }
    fn("lnf_g", p.lnf_g);
    fn("lnf_b", p.lnf_b);
    fn("unembed", p.unembed);
}

// Same shapes, all values zero (gradient / moment containers).
Parameters zeros_like(const Parameters& p);

// Allocate all tensors for a config without initializing values.
Parameters alloc_params(const ModelConfig& cfg);

} // namespace rf
