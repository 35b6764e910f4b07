#pragma once

#include <string>
#include <utility>
#include <vector>

#include "iclm/batch.hpp"
#include "iclm/rng.hpp"
#include "iclm/tensor.hpp"

namespace iclm {

struct LmConfig {
    std::size_t vocab_size = 64;
    std::size_t max_seq_len = 64;
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    bool has_lm_head = true;

    void validate() const;
};

// All layer activations of one forward pass plus the final hidden state.
// layers[0] is the embedding output, layers[i] the output of block i.
struct LmActivations {
    std::vector<Tensor> layers;
    Tensor final_hidden;  // [B,T,D], after the final layer norm
};

// Tiny decoder-only transformer: learned positional embeddings, pre-norm
// blocks, GELU MLP, optional language modelling head. Router instances
// are built with has_lm_head = false.
class LmModule {
public:
    LmModule() = default;
    LmModule(LmConfig cfg, Rng& rng);

    const LmConfig& config() const { return cfg_; }

    LmActivations forward(const TokenBatch& batch) const;
    Tensor lm_head(const Tensor& hidden) const;

    // Copies parameter values from another module with the same config;
    // the head is skipped if this module has none.
    void copy_weights_from(const LmModule& other);

    std::vector<std::pair<std::string, Tensor>> named_params(const std::string& prefix) const;
    void set_trainable(bool trainable);
    void zero_grad();

private:
    struct Block {
        Tensor ln1_g, ln1_b;
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor ln2_g, ln2_b;
        Tensor w1, b1, w2, b2;
    };

    Tensor attention(const Tensor& x, const Block& blk, std::size_t batch,
                     std::size_t seq) const;

    LmConfig cfg_;
    Tensor tok_emb_;  // [V,D]
    Tensor pos_emb_;  // [L,D]
    std::vector<Block> blocks_;
    Tensor lnf_g_, lnf_b_;
    Tensor head_w_, head_b_;  // present iff has_lm_head
};

// Deterministic argmax decoding from a per-step logits provider. Stops
// after max_new tokens or at the end-of-answer id; ties break toward the
// lowest token id. Returns only the continuation (without the stop id).
std::vector<int> generate_greedy(const LmModule& module, const std::vector<int>& prompt,
                                 std::size_t max_new, int eoa_id);

}  // namespace iclm
