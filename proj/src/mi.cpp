#include "iclm/mi.hpp"

#include <algorithm>
#include <cmath>

#include "iclm/errors.hpp"

namespace iclm {

std::vector<double> conditional_distribution(const std::vector<double>& hidden) {
    if (hidden.empty()) throw ShapeError("conditional_distribution: empty hidden state");
    const double mx = *std::max_element(hidden.begin(), hidden.end());
    std::vector<double> out(hidden.size());
    double denom = 0.0;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
        out[i] = std::exp(hidden[i] - mx);
        denom += out[i];
    }
    for (auto& v : out) v /= denom;
    return out;
}

Tensor conditional_distribution_rows(const Tensor& pooled) {
    if (pooled.rank() != 2) throw ShapeError("conditional_distribution_rows: expected [B,D]");
    return softmax(pooled, 1);
}

MiEstimate mi_estimate(const std::vector<std::vector<double>>& p_inv,
                       const std::vector<std::vector<double>>& p_spec, std::string pair_id) {
    if (p_inv.size() != p_spec.size()) {
        throw DataError("mi_estimate: pairing error, " + std::to_string(p_inv.size()) +
                        " invariant vs " + std::to_string(p_spec.size()) +
                        " specific distributions");
    }
    if (p_inv.empty()) throw DataError("mi_estimate: empty batch");

    MiEstimate est;
    est.batch_size = p_inv.size();
    est.pair_id = std::move(pair_id);
    est.degenerate = p_inv.size() == 1;

    double value = mi_kl_value(p_inv, p_spec);
    if (value < -1e-9) {
        throw DegenerateInputError("mi_estimate: negative value " + std::to_string(value) +
                                   " beyond numeric tolerance");
    }
    est.value = std::max(value, 0.0);
    return est;
}

Tensor mi_pair_loss(const Tensor& inv_pooled, const Tensor& spec_pooled) {
    return mi_kl(conditional_distribution_rows(inv_pooled),
                 conditional_distribution_rows(spec_pooled));
}

}  // namespace iclm
