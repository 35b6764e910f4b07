#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace iclm {

// Padded batch of token-id sequences. `loss_mask` marks positions whose
// next-token target participates in the loss (the answer span);
// `pad_mask` marks real (non-pad) token positions and drives pooling.
// Labels are evaluation-only metadata and never reach any model input.
struct TokenBatch {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<int> tokens;        // [batch*seq]
    std::vector<int> targets;       // [batch*seq] shifted next-token ids
    std::vector<double> loss_mask;  // [batch*seq]
    std::vector<double> pad_mask;   // [batch*seq]
    std::vector<std::string> labels;        // per input, "format/split"
    std::vector<std::size_t> instance_ids;  // per input, dataset index

    // Select a subset of inputs, preserving order.
    TokenBatch rows(const std::vector<std::size_t>& idx) const {
        TokenBatch out;
        out.batch = idx.size();
        out.seq = seq;
        out.tokens.reserve(idx.size() * seq);
        out.targets.reserve(idx.size() * seq);
        out.loss_mask.reserve(idx.size() * seq);
        out.pad_mask.reserve(idx.size() * seq);
        for (std::size_t i : idx) {
            out.tokens.insert(out.tokens.end(), tokens.begin() + i * seq,
                              tokens.begin() + (i + 1) * seq);
            out.targets.insert(out.targets.end(), targets.begin() + i * seq,
                               targets.begin() + (i + 1) * seq);
            out.loss_mask.insert(out.loss_mask.end(), loss_mask.begin() + i * seq,
                                 loss_mask.begin() + (i + 1) * seq);
            out.pad_mask.insert(out.pad_mask.end(), pad_mask.begin() + i * seq,
                                pad_mask.begin() + (i + 1) * seq);
            if (!labels.empty()) out.labels.push_back(labels[i]);
            if (!instance_ids.empty()) out.instance_ids.push_back(instance_ids[i]);
        }
        return out;
    }
};

}  // namespace iclm
