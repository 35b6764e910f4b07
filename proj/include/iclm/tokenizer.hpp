#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace iclm {

// Whitespace/character hybrid tokenizer. A whitespace-delimited word that
// exists in the vocabulary becomes one token; otherwise it falls back to
// its individual characters, each of which must be in the vocabulary.
// The vocabulary file stores one token per line; line index = id.
class Tokenizer {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kSep = 2;
    static constexpr int kEoa = 3;  // end of answer

    static const char* pad_token() { return "<pad>"; }
    static const char* bos_token() { return "<bos>"; }
    static const char* sep_token() { return "<sep>"; }
    static const char* eoa_token() { return "<eoa>"; }

    Tokenizer() = default;
    explicit Tokenizer(std::vector<std::string> tokens);

    static Tokenizer with_specials(std::vector<std::string> extra_tokens);
    static Tokenizer load(const std::string& path);
    void save(const std::string& path) const;

    std::size_t vocab_size() const { return tokens_.size(); }
    const std::string& token(int id) const;
    bool contains(const std::string& token) const { return index_.count(token) > 0; }
    int id(const std::string& token) const;

    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

}  // namespace iclm
