#pragma once

#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "iclm/tensor.hpp"

namespace iclm {

struct AdamWConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// AdamW with decoupled weight decay, stepped per parameter group. A group
// that is not listed as active for a step is not touched at all: no
// gradient update, no decay, no moment/time advance. That is what keeps
// never-activated modules bit-identical across training phases.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    void register_group(const std::string& name, std::vector<Tensor> params);
    bool has_group(const std::string& name) const;
    void step(const std::set<std::string>& active_groups);

    const AdamWConfig& config() const { return cfg_; }

private:
    struct ParamState {
        std::vector<double> m, v;
        long t = 0;
    };
    AdamWConfig cfg_;
    std::vector<std::pair<std::string, std::vector<Tensor>>> groups_;
    std::map<const TapeNode*, ParamState> state_;
};

}  // namespace iclm
