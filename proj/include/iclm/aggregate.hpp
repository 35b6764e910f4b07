#pragma once

#include <string>
#include <utility>
#include <vector>

#include "iclm/rng.hpp"
#include "iclm/tensor.hpp"

namespace iclm {

enum class AggScheme { SharedHead, LogitSpace, ProbSpace };

AggScheme agg_scheme_from_string(const std::string& s);
std::string to_string(AggScheme s);

struct AggregationConfig {
    AggScheme scheme = AggScheme::SharedHead;
    double w_inv = 0.5;  // invariant weight for the weighted-sum schemes
};

// Combines the domain-invariant state with the routed domain-specific
// state. Shared-head: joint batch norm over both hidden-state blocks,
// feature concatenation, one dense head. Logit/prob space: per-module
// heads (owned by the modules), combined by bounded weighted sums.
class Aggregator {
public:
    Aggregator() = default;
    Aggregator(AggregationConfig cfg, std::size_t d_model, std::size_t vocab, Rng& rng);

    const AggregationConfig& config() const { return cfg_; }

    // scheme = shared-head. States are [B,T,D]; returns [B,T,V].
    Tensor aggregate_shared_head(const Tensor& h_inv, const Tensor& h_spec, bool training);

    // scheme = logit-space. spec_logits holds per-module logits (a single
    // pre-gathered tensor under one-hot routing); r is [B, n_spec] with
    // rows summing to 1. Returns combined logits [B,T,V].
    Tensor aggregate_logit_space(const Tensor& logits_inv, const std::vector<Tensor>& spec_logits,
                                 const Tensor& r, bool training);

    // scheme = prob-space, Eq. 8-10 style. Returns pre-softmax logits l;
    // probabilities are softmax(l).
    Tensor aggregate_prob_space_logits(const Tensor& probs_inv,
                                       const std::vector<Tensor>& spec_probs, const Tensor& r);
    Tensor aggregate_prob_space(const Tensor& probs_inv, const std::vector<Tensor>& spec_probs,
                                const Tensor& r);

    std::vector<std::pair<std::string, Tensor>> named_params(const std::string& prefix) const;
    BatchNormParams& batch_norm() { return bn_; }

private:
    void require_scheme(AggScheme expected, const char* op) const;

    AggregationConfig cfg_;
    std::size_t d_model_ = 0;
    std::size_t vocab_ = 0;
    Tensor head_w_, head_b_;  // shared head, [2D,V] and [V]
    BatchNormParams bn_;      // hidden-space (shared-head) or logit-space
};

// Core of the probability-space combination: per module a with weight
// w_a (one value per input), l~_a = ln((1-w_a)/2 + w_a P_a) + ln B_a with
// B_a = 1 / ((1-w_a) V/2 + w_a); the result is sum_a l~_a.
Tensor prob_space_combine(const std::vector<Tensor>& probs,
                          const std::vector<Tensor>& weights_per_module);

}  // namespace iclm
