#include "iclm/aggregate.hpp"

#include <cmath>

#include "iclm/errors.hpp"

namespace iclm {

AggScheme agg_scheme_from_string(const std::string& s) {
    if (s == "shared-head") return AggScheme::SharedHead;
    if (s == "logit-space") return AggScheme::LogitSpace;
    if (s == "prob-space") return AggScheme::ProbSpace;
    throw ConfigError("aggregation.scheme: unknown value '" + s +
                      "' (shared-head | logit-space | prob-space)");
}

std::string to_string(AggScheme s) {
    switch (s) {
        case AggScheme::SharedHead: return "shared-head";
        case AggScheme::LogitSpace: return "logit-space";
        case AggScheme::ProbSpace: return "prob-space";
    }
    return "?";
}

Aggregator::Aggregator(AggregationConfig cfg, std::size_t d_model, std::size_t vocab, Rng& rng)
    : cfg_(cfg), d_model_(d_model), vocab_(vocab) {
    if (cfg_.w_inv < 0.0 || cfg_.w_inv > 1.0) {
        throw ConfigError("aggregation.w_inv: " + std::to_string(cfg_.w_inv) +
                          " outside [0,1]");
    }
    if (cfg_.scheme == AggScheme::SharedHead) {
        head_w_ = Tensor::zeros({2 * d_model, vocab}, true);
        for (std::size_t i = 0; i < head_w_.size(); ++i)
            head_w_.data()[i] = rng.gaussian(0.0, 0.02);
        head_b_ = Tensor::zeros({vocab}, true);
        bn_ = BatchNormParams::make(d_model);
    } else if (cfg_.scheme == AggScheme::LogitSpace) {
        bn_ = BatchNormParams::make(vocab);
    }
}

void Aggregator::require_scheme(AggScheme expected, const char* op) const {
    if (cfg_.scheme != expected) {
        throw ConfigError(std::string(op) + ": aggregator configured for scheme '" +
                          to_string(cfg_.scheme) + "'");
    }
}

Tensor Aggregator::aggregate_shared_head(const Tensor& h_inv, const Tensor& h_spec,
                                         bool training) {
    require_scheme(AggScheme::SharedHead, "aggregate_shared_head");
    if (h_inv.shape() != h_spec.shape()) {
        throw ShapeError("aggregate_shared_head: state shapes differ, " +
                         shape_str(h_inv.shape()) + " vs " + shape_str(h_spec.shape()));
    }
    auto normalized = shared_batch_norm({h_inv, h_spec}, bn_, training);
    Tensor joint = concat_last(normalized[0], normalized[1]);
    return add_bias(matmul(joint, head_w_), head_b_);
}

Tensor Aggregator::aggregate_logit_space(const Tensor& logits_inv,
                                         const std::vector<Tensor>& spec_logits, const Tensor& r,
                                         bool training) {
    require_scheme(AggScheme::LogitSpace, "aggregate_logit_space");
    if (spec_logits.empty()) throw ShapeError("aggregate_logit_space: no module logits");
    const std::size_t n = spec_logits.size();
    if (r.rank() != 2 || r.shape()[1] != n || r.shape()[0] != logits_inv.shape()[0]) {
        throw ShapeError("aggregate_logit_space: routing weights must be [B," +
                         std::to_string(n) + "]");
    }
    for (std::size_t i = 0; i < r.size(); ++i) {
        const double w = r.data()[i];
        if (w < 0.0 || w > 1.0) {
            throw ConfigError("aggregate_logit_space: routing weight " + std::to_string(w) +
                              " outside [0,1]");
        }
    }

    // Joint normalization over all active modules' logits (the 2x|B|
    // rule generalizes to (n+1)x|B| samples), then the bounded sum.
    std::vector<Tensor> all = {logits_inv};
    all.insert(all.end(), spec_logits.begin(), spec_logits.end());
    auto normalized = shared_batch_norm(all, bn_, training);

    Tensor out = scale(normalized[0], cfg_.w_inv);
    const std::size_t b = r.shape()[0];
    for (std::size_t k = 0; k < n; ++k) {
        // w_{S_k}(i) = r_k(i) * (1 - w_inv), one weight per input.
        std::vector<std::size_t> rows(b);
        for (std::size_t i = 0; i < b; ++i) rows[i] = i * n + k;
        Tensor rk = rows_gather(reshape(r, {b * n, 1}), rows);
        Tensor w = expand_rows(reshape(scale(rk, 1.0 - cfg_.w_inv), {b}),
                               normalized[k + 1].shape());
        out = add(out, mul(w, normalized[k + 1]));
    }
    return out;
}

Tensor prob_space_combine(const std::vector<Tensor>& probs,
                          const std::vector<Tensor>& weights_per_module) {
    if (probs.empty() || probs.size() != weights_per_module.size()) {
        throw ShapeError("prob_space_combine: probs/weights mismatch");
    }
    const std::size_t v = probs[0].shape().back();
    const double half_v = static_cast<double>(v) / 2.0;
    Tensor total;
    for (std::size_t a = 0; a < probs.size(); ++a) {
        const Tensor& p = probs[a];
        const Tensor& w = weights_per_module[a];  // [B]
        if (w.rank() != 1 || w.shape()[0] != p.shape()[0]) {
            throw ShapeError("prob_space_combine: per-module weight must be [B]");
        }
        for (std::size_t i = 0; i < w.size(); ++i) {
            if (w.data()[i] < 0.0 || w.data()[i] > 1.0) {
                throw ConfigError("prob_space_combine: weight outside [0,1]");
            }
        }
        Tensor wb = expand_rows(w, p.shape());
        // (1-w)/2 + w*P  ==  0.5 + w*(P - 0.5)
        Tensor smoothed = add_const(mul(wb, add_const(p, -0.5)), 0.5);
        // ln B_a with B_a = 1 / ((1-w) V/2 + w); the affine in w below is
        // V/2 + w (1 - V/2).
        Tensor denom = add_const(scale(expand_rows(w, p.shape()), 1.0 - half_v), half_v);
        Tensor l_tilde = sub(elem_log(smoothed), elem_log(denom));
        total = total.defined() ? add(total, l_tilde) : l_tilde;
    }
    return total;
}

Tensor Aggregator::aggregate_prob_space_logits(const Tensor& probs_inv,
                                               const std::vector<Tensor>& spec_probs,
                                               const Tensor& r) {
    require_scheme(AggScheme::ProbSpace, "aggregate_prob_space");
    const std::size_t n = spec_probs.size();
    const std::size_t b = probs_inv.shape()[0];
    if (r.rank() != 2 || r.shape()[1] != n || r.shape()[0] != b) {
        throw ShapeError("aggregate_prob_space: routing weights must be [B," +
                         std::to_string(n) + "]");
    }
    std::vector<Tensor> probs = {probs_inv};
    std::vector<Tensor> weights;
    weights.push_back(Tensor::full({b}, cfg_.w_inv, false));
    for (std::size_t k = 0; k < n; ++k) {
        probs.push_back(spec_probs[k]);
        std::vector<std::size_t> rows(b);
        for (std::size_t i = 0; i < b; ++i) rows[i] = i * n + k;
        Tensor rk = reshape(rows_gather(reshape(r, {b * n, 1}), rows), {b});
        weights.push_back(scale(rk, 1.0 - cfg_.w_inv));
    }
    return prob_space_combine(probs, weights);
}

Tensor Aggregator::aggregate_prob_space(const Tensor& probs_inv,
                                        const std::vector<Tensor>& spec_probs, const Tensor& r) {
    Tensor logits = aggregate_prob_space_logits(probs_inv, spec_probs, r);
    return softmax(logits, logits.rank() - 1);
}

std::vector<std::pair<std::string, Tensor>> Aggregator::named_params(
    const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor>> out;
    if (cfg_.scheme == AggScheme::SharedHead) {
        out.emplace_back(prefix + ".head_w", head_w_);
        out.emplace_back(prefix + ".head_b", head_b_);
    }
    if (cfg_.scheme == AggScheme::SharedHead || cfg_.scheme == AggScheme::LogitSpace) {
        out.emplace_back(prefix + ".bn_gamma", bn_.gamma);
        out.emplace_back(prefix + ".bn_beta", bn_.beta);
    }
    return out;
}

}  // namespace iclm
