#include "iclm/tokenizer.hpp"

#include <fstream>
#include <sstream>

#include "iclm/errors.hpp"

namespace iclm {

Tokenizer::Tokenizer(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (tokens_[i].empty()) throw DataError("tokenizer: empty token at line " + std::to_string(i));
        auto [it, inserted] = index_.emplace(tokens_[i], static_cast<int>(i));
        if (!inserted) throw DataError("tokenizer: duplicate token '" + tokens_[i] + "'");
    }
}

Tokenizer Tokenizer::with_specials(std::vector<std::string> extra_tokens) {
    std::vector<std::string> all = {pad_token(), bos_token(), sep_token(), eoa_token()};
    all.insert(all.end(), extra_tokens.begin(), extra_tokens.end());
    return Tokenizer(std::move(all));
}

Tokenizer Tokenizer::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifactError("tokenizer: cannot open vocabulary file " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        tokens.push_back(line);
    }
    return Tokenizer(std::move(tokens));
}

void Tokenizer::save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("tokenizer: cannot write vocabulary file " + path);
    for (const auto& t : tokens_) out << t << "\n";
}

const std::string& Tokenizer::token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw IndexError("tokenizer: id " + std::to_string(id) + " outside vocabulary of size " +
                         std::to_string(tokens_.size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
}

int Tokenizer::id(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) throw DataError("tokenizer: unknown token '" + token + "'");
    return it->second;
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<int> ids;
    std::istringstream stream(text);
    std::string word;
    while (stream >> word) {
        auto it = index_.find(word);
        if (it != index_.end()) {
            ids.push_back(it->second);
            continue;
        }
        for (char c : word) {
            auto cit = index_.find(std::string(1, c));
            if (cit == index_.end()) {
                throw DataError("tokenizer: word '" + word + "' contains character '" +
                                std::string(1, c) + "' not in vocabulary");
            }
            ids.push_back(cit->second);
        }
    }
    return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        if (!out.empty()) out += ' ';
        out += token(id);
    }
    return out;
}

}  // namespace iclm
