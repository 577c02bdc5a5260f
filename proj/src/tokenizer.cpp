#include "grounder/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <set>

namespace grounder {

std::vector<std::string> normalize_words(const std::string& phrase) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : phrase) {
        const auto u = static_cast<unsigned char>(ch);
        if (std::isalnum(u)) {
            cur.push_back(static_cast<char>(std::tolower(u)));
        } else if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

Vocabulary::Vocabulary() {
    words_ = {"[PAD]", "[CLS]", "[SEP]", "[UNK]"};
    for (size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = static_cast<int>(i);
}

Vocabulary Vocabulary::from_words(const std::vector<std::string>& words) {
    Vocabulary v;
    for (const auto& w : words) {
        if (v.index_.count(w)) continue;
        v.index_[w] = static_cast<int>(v.words_.size());
        v.words_.push_back(w);
    }
    return v;
}

Vocabulary Vocabulary::from_corpus(const std::vector<std::string>& phrases) {
    std::set<std::string> uniq;
    for (const auto& p : phrases)
        for (const auto& w : normalize_words(p)) uniq.insert(w);
    return from_words({uniq.begin(), uniq.end()});
}

int Vocabulary::id_of(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? SpecialTokens::UNK : it->second;
}

const std::string& Vocabulary::word_at(int id) const {
    if (id < 0 || id >= size()) throw InputError("vocabulary id out of range: " + std::to_string(id));
    return words_[static_cast<size_t>(id)];
}

nlohmann::json Vocabulary::to_json() const {
    return nlohmann::json{{"words", words_}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
    const auto words = j.at("words").get<std::vector<std::string>>();
    if (words.size() < static_cast<size_t>(SpecialTokens::kFirstWordId) ||
        words[0] != "[PAD]" || words[1] != "[CLS]" || words[2] != "[SEP]" || words[3] != "[UNK]")
        throw DataError("vocabulary json missing the reserved special tokens");
    Vocabulary v;
    for (size_t i = SpecialTokens::kFirstWordId; i < words.size(); ++i) {
        if (v.index_.count(words[i])) throw DataError("vocabulary json has duplicate word: " + words[i]);
        v.index_[words[i]] = static_cast<int>(v.words_.size());
        v.words_.push_back(words[i]);
    }
    return v;
}

std::vector<int> Tokenizer::encode(const std::string& phrase, int max_len) const {
    if (max_len < 3) throw ConfigError("tokenizer max_len must be >= 3");
    const auto words = normalize_words(phrase);
    if (words.empty()) throw InputError("phrase has no usable words: \"" + phrase + "\"");
    std::vector<int> ids;
    ids.reserve(static_cast<size_t>(max_len));
    ids.push_back(SpecialTokens::CLS);
    const size_t room = static_cast<size_t>(max_len - 2);
    for (size_t i = 0; i < words.size() && i < room; ++i) ids.push_back(vocab_.id_of(words[i]));
    ids.push_back(SpecialTokens::SEP);
    ids.resize(static_cast<size_t>(max_len), SpecialTokens::PAD);
    return ids;
}

}  // namespace grounder
