#pragma once

#include <string>
#include <vector>

#include "iclm/tensor.hpp"

namespace iclm {

// Feature distribution: softmax of a per-input last hidden state,
// interpreted over K = d_model feature bins.
std::vector<double> conditional_distribution(const std::vector<double>& hidden);

// Tape version for rows of pooled hidden states, [B,D] -> [B,D].
Tensor conditional_distribution_rows(const Tensor& pooled);

struct MiEstimate {
    double value = 0.0;  // nats, clamped at 0 after the -1e-9 tolerance check
    std::size_t batch_size = 0;
    std::string pair_id;
    bool degenerate = false;  // |B| = 1, estimator is 0 by construction
};

// Batch-level MI between paired conditional distributions. Marginals are
// approximated by mixing contexts uniformly over the batch; the joint per
// context is the outer product of the two conditionals.
MiEstimate mi_estimate(const std::vector<std::vector<double>>& p_inv,
                       const std::vector<std::vector<double>>& p_spec,
                       std::string pair_id = "");

// Differentiable MI term between two pooled hidden-state blocks [B,D];
// softmax binning happens inside.
Tensor mi_pair_loss(const Tensor& inv_pooled, const Tensor& spec_pooled);

}  // namespace iclm
