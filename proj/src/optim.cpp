#include "iclm/optim.hpp"

#include <cmath>

#include "iclm/errors.hpp"

namespace iclm {

void AdamW::register_group(const std::string& name, std::vector<Tensor> params) {
    if (has_group(name)) throw ConfigError("optimizer: group '" + name + "' already registered");
    groups_.emplace_back(name, std::move(params));
}

bool AdamW::has_group(const std::string& name) const {
    for (const auto& [n, p] : groups_) {
        if (n == name) return true;
    }
    return false;
}

void AdamW::step(const std::set<std::string>& active_groups) {
    for (auto& [name, params] : groups_) {
        if (!active_groups.count(name)) continue;
        for (auto& param : params) {
            if (!param.requires_grad()) continue;  // frozen (the trainable flag)
            auto& st = state_[param.raw()];
            if (st.m.empty()) {
                st.m.assign(param.size(), 0.0);
                st.v.assign(param.size(), 0.0);
            }
            st.t += 1;
            const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(st.t));
            const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(st.t));
            double* w = param.data();
            const std::vector<double>& g = param.grad_vec();
            for (std::size_t i = 0; i < param.size(); ++i) {
                st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g[i];
                st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mhat = st.m[i] / bc1;
                const double vhat = st.v[i] / bc2;
                w[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                   cfg_.weight_decay * w[i]);
            }
        }
    }
}

}  // namespace iclm
