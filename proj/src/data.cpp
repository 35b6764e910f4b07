#include "iclm/data.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "iclm/errors.hpp"
#include "iclm/rng.hpp"

namespace iclm {

namespace {

const std::vector<std::string> kColors = {"red",    "blue", "green", "yellow",
                                          "purple", "orange", "pink", "brown"};
const std::vector<std::string> kColorSyms = {"R", "B", "G", "Y", "P", "O", "K", "W"};
const std::vector<std::string> kShapes = {"square", "circle", "triangle",
                                          "star",   "hexagon", "diamond"};
const std::vector<std::string> kShapeSyms = {"Q", "C", "T", "S", "H", "D"};
const std::vector<std::string> kCounts = {"one", "two", "three", "four", "five", "six"};
const std::vector<std::string> kCountSyms = {"1", "2", "3", "4", "5", "6"};

constexpr std::size_t kHeldOutPairs = 8;
const std::vector<int> kSteps = {1, 2, 3};

struct Tuple {
    int count, color, shape;
};

struct Candidate {
    int attr;  // 0 = count, 1 = color, 2 = shape
    int step;
    Tuple start;
};

Tuple advance(const Tuple& t, int attr, int step) {
    Tuple out = t;
    if (attr == 0) out.count = (t.count + step) % static_cast<int>(kCounts.size());
    if (attr == 1) out.color = (t.color + step) % static_cast<int>(kColors.size());
    if (attr == 2) out.shape = (t.shape + step) % static_cast<int>(kShapes.size());
    return out;
}

std::string render_tuple(const Tuple& t, bool symbolic) {
    if (symbolic) {
        return kCountSyms[t.count] + " " + kColorSyms[t.color] + " " + kShapeSyms[t.shape];
    }
    return kCounts[t.count] + " " + kColors[t.color] + " " + kShapes[t.shape];
}

std::pair<std::string, std::string> render(const Candidate& c, bool symbolic) {
    Tuple o1 = c.start;
    Tuple o2 = advance(o1, c.attr, c.step);
    Tuple o3 = advance(o2, c.attr, c.step);
    Tuple o4 = advance(o3, c.attr, c.step);
    std::string prompt;
    if (symbolic) {
        prompt = render_tuple(o1, true) + " | " + render_tuple(o2, true) + " | " +
                 render_tuple(o3, true) + " =>";
    } else {
        prompt = "first " + render_tuple(o1, false) + " , then " + render_tuple(o2, false) +
                 " , then " + render_tuple(o3, false) + " ; next ?";
    }
    return {prompt, render_tuple(o4, symbolic)};
}

int index_of(const std::vector<std::string>& pool, const std::string& word) {
    for (std::size_t i = 0; i < pool.size(); ++i) {
        if (pool[i] == word) return static_cast<int>(i);
    }
    return -1;
}

Tuple parse_tuple(const std::vector<std::string>& words, std::size_t at, bool symbolic) {
    Tuple t;
    t.count = index_of(symbolic ? kCountSyms : kCounts, words.at(at));
    t.color = index_of(symbolic ? kColorSyms : kColors, words.at(at + 1));
    t.shape = index_of(symbolic ? kShapeSyms : kShapes, words.at(at + 2));
    if (t.count < 0 || t.color < 0 || t.shape < 0) {
        throw DataError("task parser: unrecognized tuple near token " + std::to_string(at));
    }
    return t;
}

}  // namespace

std::string derive_answer_from_prompt(const std::string& prompt, const std::string& format) {
    const bool symbolic = format == "symbolic";
    std::vector<std::string> words;
    std::istringstream ss(prompt);
    std::string w;
    while (ss >> w) words.push_back(w);

    Tuple o1, o2, o3;
    if (symbolic) {
        // <t> | <t> | <t> =>
        o1 = parse_tuple(words, 0, true);
        o2 = parse_tuple(words, 4, true);
        o3 = parse_tuple(words, 8, true);
    } else {
        // first <t> , then <t> , then <t> ; next ?
        o1 = parse_tuple(words, 1, false);
        o2 = parse_tuple(words, 6, false);
        o3 = parse_tuple(words, 11, false);
    }

    auto cyc = [](int a, int b, int n) { return ((b - a) % n + n) % n; };
    const int dc = cyc(o1.count, o2.count, static_cast<int>(kCounts.size()));
    const int dcol = cyc(o1.color, o2.color, static_cast<int>(kColors.size()));
    const int dsh = cyc(o1.shape, o2.shape, static_cast<int>(kShapes.size()));
    if ((dc != 0) + (dcol != 0) + (dsh != 0) != 1) {
        throw DataError("task parser: expected exactly one progressing attribute");
    }
    if (cyc(o2.count, o3.count, kCounts.size()) != dc ||
        cyc(o2.color, o3.color, kColors.size()) != dcol ||
        cyc(o2.shape, o3.shape, kShapes.size()) != dsh) {
        throw DataError("task parser: progression is not constant across the sequence");
    }
    int attr = dc != 0 ? 0 : (dcol != 0 ? 1 : 2);
    int step = dc + dcol + dsh;
    Tuple o4 = advance(o3, attr, step);
    return render_tuple(o4, symbolic);
}

Tokenizer synth_tokenizer() {
    std::vector<std::string> words = {"first", "then", "next", ";", "?", ",", "|", "=>"};
    auto extend = [&words](const std::vector<std::string>& more) {
        words.insert(words.end(), more.begin(), more.end());
    };
    extend(kCounts);
    extend(kColors);
    extend(kShapes);
    extend(kCountSyms);
    extend(kColorSyms);
    extend(kShapeSyms);
    return Tokenizer::with_specials(std::move(words));
}

Dataset synth_generate(const SynthConfig& config) {
    if (config.n_train % 2 || config.n_iid_test % 2 || config.n_ood_a % 2 ||
        config.n_ood_b % 2) {
        throw DataError("synth: split sizes must be even (each base instance renders twice)");
    }
    Rng rng(config.seed);

    // Held-out (color, shape) start combinations for the ood-A split.
    std::vector<std::pair<int, int>> pairs;
    for (std::size_t c = 0; c < kColors.size(); ++c)
        for (std::size_t s = 0; s < kShapes.size(); ++s)
            pairs.emplace_back(static_cast<int>(c), static_cast<int>(s));
    rng.shuffle(pairs);
    std::set<std::pair<int, int>> held(pairs.begin(), pairs.begin() + kHeldOutPairs);

    // Candidate rule space, grouped by progressing attribute and by
    // whether the start pair is held out.
    std::vector<std::vector<Candidate>> in_dist(3), held_out(3);
    for (int attr = 0; attr < 3; ++attr) {
        for (int step : kSteps) {
            for (std::size_t cnt = 0; cnt < kCounts.size(); ++cnt) {
                for (std::size_t col = 0; col < kColors.size(); ++col) {
                    for (std::size_t sh = 0; sh < kShapes.size(); ++sh) {
                        Candidate c{attr, step,
                                    Tuple{static_cast<int>(cnt), static_cast<int>(col),
                                          static_cast<int>(sh)}};
                        const bool ho = held.count({static_cast<int>(col),
                                                    static_cast<int>(sh)}) > 0;
                        (ho ? held_out : in_dist)[attr].push_back(c);
                    }
                }
            }
        }
    }
    for (auto& group : in_dist) rng.shuffle(group);
    for (auto& group : held_out) rng.shuffle(group);

    const double train_mix[3] = {0.10, 0.45, 0.45};  // count, color, shape
    const double ood_b_mix[3] = {0.80, 0.10, 0.10};

    std::vector<std::size_t> cursor_in = {0, 0, 0}, cursor_held = {0, 0, 0};
    auto draw = [&](std::vector<std::vector<Candidate>>& groups, std::vector<std::size_t>& cursor,
                    const double mix[3], std::size_t bases,
                    const char* split) -> std::vector<Candidate> {
        std::vector<Candidate> out;
        std::size_t want[3];
        want[0] = static_cast<std::size_t>(mix[0] * static_cast<double>(bases) + 0.5);
        want[1] = static_cast<std::size_t>(mix[1] * static_cast<double>(bases) + 0.5);
        want[2] = bases - want[0] - want[1];
        for (int attr = 0; attr < 3; ++attr) {
            if (cursor[attr] + want[attr] > groups[attr].size()) {
                throw DataError(std::string("synth: attribute pool too small for split '") +
                                split + "'");
            }
            for (std::size_t i = 0; i < want[attr]; ++i) {
                out.push_back(groups[attr][cursor[attr]++]);
            }
        }
        return out;
    };

    struct SplitSpec {
        const char* name;
        std::size_t total;
        bool from_held;
        const double* mix;
    };
    const SplitSpec specs[] = {
        {"train", config.n_train, false, train_mix},
        {"iid-test", config.n_iid_test, false, train_mix},
        {"ood-A", config.n_ood_a, true, train_mix},
        {"ood-B", config.n_ood_b, false, ood_b_mix},
    };

    Dataset dataset;
    Tokenizer tok = synth_tokenizer();
    for (const auto& spec : specs) {
        auto candidates = spec.from_held
                              ? draw(held_out, cursor_held, spec.mix, spec.total / 2, spec.name)
                              : draw(in_dist, cursor_in, spec.mix, spec.total / 2, spec.name);
        for (const auto& c : candidates) {
            for (bool symbolic : {false, true}) {
                auto [prompt, answer] = render(c, symbolic);
                if (tok.encode(prompt).size() > config.max_prompt_tokens) {
                    throw DataError("synth: rendered prompt exceeds max_prompt_tokens");
                }
                dataset.push_back(
                    {prompt, answer, symbolic ? "symbolic" : "text", spec.name});
            }
        }
    }
    // Every emitted answer must be re-derivable from its prompt alone.
    for (const auto& inst : dataset) {
        if (derive_answer_from_prompt(inst.prompt, inst.format) != inst.answer) {
            throw DataError("synth: internal inconsistency, answer not derivable for '" +
                            inst.prompt + "'");
        }
    }
    return dataset;
}

Dataset ingest_jsonl(const std::string& path, const Tokenizer& tokenizer,
                     std::size_t max_prompt_tokens) {
    std::ifstream in(path);
    if (!in) throw MissingArtifactError("ingest: cannot open " + path);
    Dataset dataset;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError("ingest: parse error at line " + std::to_string(line_no) + ": " +
                            e.what());
        }
        if (!obj.contains("prompt") || !obj["prompt"].is_string()) {
            throw DataError("ingest: line " + std::to_string(line_no) +
                            " is missing required string field 'prompt'");
        }
        if (!obj.contains("answer") || !obj["answer"].is_string()) {
            throw DataError("ingest: line " + std::to_string(line_no) +
                            " is missing required string field 'answer'");
        }
        TaskInstance inst;
        inst.prompt = obj["prompt"].get<std::string>();
        inst.answer = obj["answer"].get<std::string>();
        inst.format = obj.value("format", std::string("text"));
        inst.split = obj.value("split", std::string("train"));
        std::size_t prompt_len;
        try {
            prompt_len = tokenizer.encode(inst.prompt).size();
            tokenizer.encode(inst.answer);
        } catch (const DataError& e) {
            throw DataError("ingest: line " + std::to_string(line_no) + ": " + e.what());
        }
        if (prompt_len > max_prompt_tokens) {
            throw DataError("ingest: line " + std::to_string(line_no) + " prompt has " +
                            std::to_string(prompt_len) + " tokens, limit " +
                            std::to_string(max_prompt_tokens));
        }
        dataset.push_back(std::move(inst));
    }
    return dataset;
}

void export_jsonl(const Dataset& dataset, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("export: cannot write " + path);
    for (const auto& inst : dataset) {
        nlohmann::json obj;
        obj["prompt"] = inst.prompt;
        obj["answer"] = inst.answer;
        obj["format"] = inst.format;
        obj["split"] = inst.split;
        out << obj.dump() << "\n";
    }
}

std::vector<TaskInstance> filter_split(const Dataset& dataset, const std::string& split) {
    std::vector<TaskInstance> out;
    for (const auto& inst : dataset) {
        if (inst.split == split) out.push_back(inst);
    }
    return out;
}

TokenBatch make_token_batch(const Dataset& dataset, const std::vector<std::size_t>& indices,
                            const Tokenizer& tokenizer, std::size_t max_seq_len) {
    if (indices.empty()) throw DataError("batch: empty index list");
    struct Row {
        std::vector<int> tokens;
        std::size_t answer_start;  // first answer-token position
    };
    std::vector<Row> rows;
    std::size_t longest = 0;
    for (std::size_t idx : indices) {
        const TaskInstance& inst = dataset.at(idx);
        Row row;
        row.tokens.push_back(Tokenizer::kBos);
        auto p = tokenizer.encode(inst.prompt);
        row.tokens.insert(row.tokens.end(), p.begin(), p.end());
        row.tokens.push_back(Tokenizer::kSep);
        row.answer_start = row.tokens.size();
        auto a = tokenizer.encode(inst.answer);
        row.tokens.insert(row.tokens.end(), a.begin(), a.end());
        row.tokens.push_back(Tokenizer::kEoa);
        if (row.tokens.size() > max_seq_len) {
            throw DataError("batch: instance " + std::to_string(idx) + " needs " +
                            std::to_string(row.tokens.size()) + " tokens, model limit " +
                            std::to_string(max_seq_len));
        }
        longest = std::max(longest, row.tokens.size());
        rows.push_back(std::move(row));
    }

    TokenBatch b;
    b.batch = rows.size();
    b.seq = longest;
    b.tokens.assign(b.batch * b.seq, Tokenizer::kPad);
    b.targets.assign(b.batch * b.seq, Tokenizer::kPad);
    b.loss_mask.assign(b.batch * b.seq, 0.0);
    b.pad_mask.assign(b.batch * b.seq, 0.0);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& row = rows[i];
        for (std::size_t t = 0; t < row.tokens.size(); ++t) {
            b.tokens[i * b.seq + t] = row.tokens[t];
            b.pad_mask[i * b.seq + t] = 1.0;
            if (t + 1 < row.tokens.size()) {
                b.targets[i * b.seq + t] = row.tokens[t + 1];
                // Loss over targets in the answer span, <eoa> included.
                if (t + 1 >= row.answer_start) b.loss_mask[i * b.seq + t] = 1.0;
            }
        }
        const TaskInstance& inst = dataset.at(indices[i]);
        b.labels.push_back(inst.format + "/" + inst.split);
        b.instance_ids.push_back(indices[i]);
    }
    return b;
}

std::vector<TokenBatch> batch_iter(const Dataset& dataset, const Tokenizer& tokenizer,
                                   std::size_t batch_size, std::uint64_t seed,
                                   std::size_t epoch, std::size_t max_seq_len) {
    if (dataset.empty()) throw DataError("batch_iter: empty dataset");
    if (batch_size == 0) throw DataError("batch_iter: batch_size must be positive");
    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed);
    Rng epoch_rng = rng.fork(epoch);
    epoch_rng.shuffle(order);

    std::vector<TokenBatch> batches;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const std::size_t end = std::min(start + batch_size, order.size());
        std::vector<std::size_t> idx(order.begin() + start, order.begin() + end);
        batches.push_back(make_token_batch(dataset, idx, tokenizer, max_seq_len));
    }
    return batches;
}

}  // namespace iclm
