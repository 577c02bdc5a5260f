#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "grounder/common.hpp"

#include <nlohmann/json.hpp>

namespace grounder {

// Fixed-id special tokens. Real words start at kFirstWordId.
struct SpecialTokens {
    static constexpr int PAD = 0;
    static constexpr int CLS = 1;
    static constexpr int SEP = 2;
    static constexpr int UNK = 3;
    static constexpr int kFirstWordId = 4;
};

// Lowercases, strips non-alphanumeric characters, splits on whitespace.
std::vector<std::string> normalize_words(const std::string& phrase);

class Vocabulary {
public:
    Vocabulary();
    static Vocabulary from_words(const std::vector<std::string>& words);
    static Vocabulary from_corpus(const std::vector<std::string>& phrases);

    int size() const { return static_cast<int>(words_.size()); }
    int id_of(const std::string& word) const;  // UNK for unknown words
    const std::string& word_at(int id) const;

    nlohmann::json to_json() const;
    static Vocabulary from_json(const nlohmann::json& j);

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

// Whitespace word tokenizer over a closed vocabulary.
// Swap the implementation here to change tokenization; the model only
// consumes the id sequence and vocabulary size.
class Tokenizer {
public:
    explicit Tokenizer(Vocabulary vocab) : vocab_(std::move(vocab)) {}

    // [CLS] w1 .. wn [SEP] padded to max_len. Words beyond max_len - 2 are
    // dropped. A phrase with no usable words is an InputError.
    std::vector<int> encode(const std::string& phrase, int max_len) const;

    const Vocabulary& vocab() const { return vocab_; }

private:
    Vocabulary vocab_;
};

}  // namespace grounder
