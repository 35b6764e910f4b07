#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "iclm/batch.hpp"
#include "iclm/tokenizer.hpp"

namespace iclm {

// One reasoning-task instance rendered for a language model. Labels are
// evaluation-only; no model input ever sees them.
struct TaskInstance {
    std::string prompt;
    std::string answer;
    std::string format;  // "text" | "symbolic"
    std::string split;   // "train" | "iid-test" | "ood-A" | "ood-B"
};

using Dataset = std::vector<TaskInstance>;

// Sequence-rule-completion generator: three attribute tuples (count,
// color, shape) follow a cyclic progression on exactly one attribute;
// the task is to produce the fourth tuple. Every base instance is
// rendered twice, as a natural-language-like template and as a compact
// symbolic template. ood-A starts from held-out (color, shape)
// combinations; ood-B shifts which attribute progresses.
struct SynthConfig {
    std::size_t n_train = 2000;   // total instances (both formats)
    std::size_t n_iid_test = 200;
    std::size_t n_ood_a = 200;
    std::size_t n_ood_b = 200;
    std::uint64_t seed = 42;
    std::size_t max_prompt_tokens = 48;
};

Dataset synth_generate(const SynthConfig& config);

// The fixed task vocabulary (specials + every word both renderings use).
Tokenizer synth_tokenizer();

// Recomputes the gold answer of an instance from its prompt alone by
// re-deriving the progression rule. Returns the rendered answer string.
std::string derive_answer_from_prompt(const std::string& prompt, const std::string& format);

Dataset ingest_jsonl(const std::string& path, const Tokenizer& tokenizer,
                     std::size_t max_prompt_tokens);
void export_jsonl(const Dataset& dataset, const std::string& path);

std::vector<TaskInstance> filter_split(const Dataset& dataset, const std::string& split);

// Builds one padded TokenBatch from instances. Token stream per item:
// <bos> prompt <sep> answer <eoa>; loss positions are those whose target
// falls in the answer span (answer tokens and the <eoa> marker).
TokenBatch make_token_batch(const Dataset& dataset, const std::vector<std::size_t>& indices,
                            const Tokenizer& tokenizer, std::size_t max_seq_len);

// Seeded shuffle per epoch, final short batch kept.
std::vector<TokenBatch> batch_iter(const Dataset& dataset, const Tokenizer& tokenizer,
                                   std::size_t batch_size, std::uint64_t seed,
                                   std::size_t epoch, std::size_t max_seq_len);

}  // namespace iclm
