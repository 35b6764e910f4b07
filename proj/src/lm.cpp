#include "iclm/lm.hpp"

#include <cmath>

#include "iclm/errors.hpp"

namespace iclm {

void LmConfig::validate() const {
    if (vocab_size < 2) throw ConfigError("lm: vocab_size must be >= 2");
    if (max_seq_len < 1) throw ConfigError("lm: max_seq_len must be >= 1");
    if (n_heads == 0 || d_model % n_heads != 0) {
        throw ConfigError("lm: d_model " + std::to_string(d_model) +
                          " not divisible by n_heads " + std::to_string(n_heads));
    }
}

namespace {

Tensor init_weight(Rng& rng, std::vector<std::size_t> shape, double stddev = 0.02) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.gaussian(0.0, stddev);
    return t;
}

}  // namespace

LmModule::LmModule(LmConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t d = cfg_.d_model;
    tok_emb_ = init_weight(rng, {cfg_.vocab_size, d});
    pos_emb_ = init_weight(rng, {cfg_.max_seq_len, d});
    blocks_.resize(cfg_.n_layers);
    for (auto& blk : blocks_) {
        blk.ln1_g = Tensor::full({d}, 1.0, true);
        blk.ln1_b = Tensor::zeros({d}, true);
        blk.wq = init_weight(rng, {d, d});
        blk.bq = Tensor::zeros({d}, true);
        blk.wk = init_weight(rng, {d, d});
        blk.bk = Tensor::zeros({d}, true);
        blk.wv = init_weight(rng, {d, d});
        blk.bv = Tensor::zeros({d}, true);
        blk.wo = init_weight(rng, {d, d});
        blk.bo = Tensor::zeros({d}, true);
        blk.ln2_g = Tensor::full({d}, 1.0, true);
        blk.ln2_b = Tensor::zeros({d}, true);
        blk.w1 = init_weight(rng, {d, 4 * d});
        blk.b1 = Tensor::zeros({4 * d}, true);
        blk.w2 = init_weight(rng, {4 * d, d});
        blk.b2 = Tensor::zeros({d}, true);
    }
    lnf_g_ = Tensor::full({d}, 1.0, true);
    lnf_b_ = Tensor::zeros({d}, true);
    if (cfg_.has_lm_head) {
        head_w_ = init_weight(rng, {d, cfg_.vocab_size});
        head_b_ = Tensor::zeros({cfg_.vocab_size}, true);
    }
}

Tensor LmModule::attention(const Tensor& x, const Block& blk, std::size_t batch,
                           std::size_t seq) const {
    const std::size_t d = cfg_.d_model;
    const std::size_t h = cfg_.n_heads;
    const std::size_t dh = d / h;

    auto split_heads = [&](const Tensor& t) {
        return permute(reshape(t, {batch, seq, h, dh}), {0, 2, 1, 3});
    };
    Tensor q = split_heads(add_bias(matmul(x, blk.wq), blk.bq));
    Tensor k = split_heads(add_bias(matmul(x, blk.wk), blk.bk));
    Tensor v = split_heads(add_bias(matmul(x, blk.wv), blk.bv));

    Tensor scores = scale(matmul(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(dh)));

    // Additive causal mask; exp(-1e30 - mx) underflows to exactly zero, so
    // future positions cannot perturb earlier outputs even in the last bit.
    Tensor mask = Tensor::zeros({batch, h, seq, seq}, false);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t hh = 0; hh < h; ++hh)
            for (std::size_t i = 0; i < seq; ++i)
                for (std::size_t j = i + 1; j < seq; ++j)
                    mask.data()[((b * h + hh) * seq + i) * seq + j] = -1e30;

    Tensor attn = softmax(add(scores, mask), 3);
    Tensor ctx = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {batch, seq, d});
    return add_bias(matmul(ctx, blk.wo), blk.bo);
}

LmActivations LmModule::forward(const TokenBatch& batch) const {
    if (batch.seq > cfg_.max_seq_len) {
        throw DataError("lm: sequence length " + std::to_string(batch.seq) +
                        " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len) +
                        "; refusing to truncate");
    }
    if (batch.batch == 0 || batch.seq == 0) throw DataError("lm: empty batch");

    std::vector<int> pos_ids(batch.batch * batch.seq);
    for (std::size_t b = 0; b < batch.batch; ++b)
        for (std::size_t t = 0; t < batch.seq; ++t)
            pos_ids[b * batch.seq + t] = static_cast<int>(t);

    Tensor x = add(embedding(tok_emb_, batch.tokens, batch.batch, batch.seq),
                   embedding(pos_emb_, pos_ids, batch.batch, batch.seq));

    LmActivations acts;
    acts.layers.push_back(x);
    for (const auto& blk : blocks_) {
        x = add(x, attention(layer_norm(x, blk.ln1_g, blk.ln1_b), blk, batch.batch, batch.seq));
        Tensor mlp_in = layer_norm(x, blk.ln2_g, blk.ln2_b);
        Tensor mlp = add_bias(matmul(gelu(add_bias(matmul(mlp_in, blk.w1), blk.b1)), blk.w2),
                              blk.b2);
        x = add(x, mlp);
        acts.layers.push_back(x);
    }
    acts.final_hidden = layer_norm(x, lnf_g_, lnf_b_);
    return acts;
}

Tensor LmModule::lm_head(const Tensor& hidden) const {
    if (!cfg_.has_lm_head) {
        throw ConfigError("lm: module has no language modelling head (router instance)");
    }
    return add_bias(matmul(hidden, head_w_), head_b_);
}

void LmModule::copy_weights_from(const LmModule& other) {
    auto src = other.named_params("m");
    auto dst = named_params("m");
    std::size_t copied = 0;
    for (auto& [name, tensor] : dst) {
        for (auto& [sname, stensor] : src) {
            if (sname == name) {
                if (stensor.shape() != tensor.shape()) {
                    throw ShapeError("lm: cannot copy " + name + ", shape " +
                                     shape_str(stensor.shape()) + " vs " +
                                     shape_str(tensor.shape()));
                }
                std::copy(stensor.data(), stensor.data() + stensor.size(), tensor.data());
                ++copied;
                break;
            }
        }
    }
    if (copied != dst.size()) throw ConfigError("lm: copy_weights_from left parameters unset");
}

std::vector<std::pair<std::string, Tensor>> LmModule::named_params(
    const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back(prefix + ".tok_emb", tok_emb_);
    out.emplace_back(prefix + ".pos_emb", pos_emb_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const std::string base = prefix + ".block" + std::to_string(i);
        const Block& blk = blocks_[i];
        out.emplace_back(base + ".ln1_g", blk.ln1_g);
        out.emplace_back(base + ".ln1_b", blk.ln1_b);
        out.emplace_back(base + ".wq", blk.wq);
        out.emplace_back(base + ".bq", blk.bq);
        out.emplace_back(base + ".wk", blk.wk);
        out.emplace_back(base + ".bk", blk.bk);
        out.emplace_back(base + ".wv", blk.wv);
        out.emplace_back(base + ".bv", blk.bv);
        out.emplace_back(base + ".wo", blk.wo);
        out.emplace_back(base + ".bo", blk.bo);
        out.emplace_back(base + ".ln2_g", blk.ln2_g);
        out.emplace_back(base + ".ln2_b", blk.ln2_b);
        out.emplace_back(base + ".w1", blk.w1);
        out.emplace_back(base + ".b1", blk.b1);
        out.emplace_back(base + ".w2", blk.w2);
        out.emplace_back(base + ".b2", blk.b2);
    }
    out.emplace_back(prefix + ".lnf_g", lnf_g_);
    out.emplace_back(prefix + ".lnf_b", lnf_b_);
    if (cfg_.has_lm_head) {
        out.emplace_back(prefix + ".head_w", head_w_);
        out.emplace_back(prefix + ".head_b", head_b_);
    }
    return out;
}

void LmModule::set_trainable(bool trainable) {
    for (auto& [name, tensor] : named_params("m")) {
        tensor.raw()->requires_grad = trainable;
        if (trainable) tensor.ensure_grad();
    }
}

void LmModule::zero_grad() {
    for (auto& [name, tensor] : named_params("m")) tensor.zero_grad();
}

std::vector<int> generate_greedy(const LmModule& module, const std::vector<int>& prompt,
                                 std::size_t max_new, int eoa_id) {
    if (prompt.empty()) throw DataError("generate: prompt must be nonempty");
    std::vector<int> seq = prompt;
    std::vector<int> out;
    for (std::size_t step = 0; step < max_new; ++step) {
        TokenBatch b;
        b.batch = 1;
        b.seq = seq.size();
        b.tokens = seq;
        b.targets.assign(seq.size(), 0);
        b.loss_mask.assign(seq.size(), 0.0);
        b.pad_mask.assign(seq.size(), 1.0);
        Tensor logits = module.lm_head(module.forward(b).final_hidden);
        const std::size_t v = logits.shape()[2];
        const double* row = logits.data() + (seq.size() - 1) * v;
        int best = 0;
        for (std::size_t j = 1; j < v; ++j) {
            if (row[j] > row[best]) best = static_cast<int>(j);  // ties keep lowest id
        }
        if (best == eoa_id) break;
        out.push_back(best);
        seq.push_back(best);
        if (seq.size() > module.config().max_seq_len) break;
    }
    return out;
}

}  // namespace iclm
