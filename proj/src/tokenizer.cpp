#include "stem/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "stem/errors.hpp"

namespace stem {

Tokenizer Tokenizer::byte_level() {
    Tokenizer t;
    t.mode_ = Mode::byte;
    return t;
}

Tokenizer Tokenizer::word_level(std::string_view text, std::size_t max_vocab) {
    if (max_vocab <= kFirstContent) throw ConfigError("word vocabulary too small for reserved ids");
    Tokenizer t;
    t.mode_ = Mode::word;
    std::map<std::string, std::size_t> freq;
    std::istringstream stream{std::string(text)};
    std::string word;
    while (stream >> word) ++freq[word];
    std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    const std::size_t keep = std::min(ranked.size(), max_vocab - kFirstContent);
    for (std::size_t i = 0; i < keep; ++i) {
        t.lookup_.emplace(ranked[i].first, static_cast<std::int32_t>(kFirstContent + i));
        t.words_.push_back(ranked[i].first);
    }
    return t;
}

std::vector<std::int32_t> Tokenizer::encode(std::string_view text) const {
    std::vector<std::int32_t> out;
    if (mode_ == Mode::byte) {
        out.reserve(text.size());
        for (unsigned char c : text) out.push_back(kFirstContent + static_cast<std::int32_t>(c));
        return out;
    }
    std::istringstream stream{std::string(text)};
    std::string word;
    while (stream >> word) {
        auto it = lookup_.find(word);
        out.push_back(it == lookup_.end() ? kUnknown : it->second);
    }
    return out;
}

std::string Tokenizer::decode(std::span<const std::int32_t> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const std::int32_t id = ids[i];
        if (id == kPad) continue;
        if (mode_ == Mode::byte) {
            if (id == kUnknown) continue;
            if (id < kFirstContent || id >= kFirstContent + 256) {
                throw IndexError("byte tokenizer cannot decode id " + std::to_string(id));
            }
            out.push_back(static_cast<char>(id - kFirstContent));
        } else {
            if (!out.empty()) out.push_back(' ');
            if (id == kUnknown) {
                out += "<unk>";
            } else {
                const auto idx = static_cast<std::size_t>(id - kFirstContent);
                if (id < kFirstContent || idx >= words_.size()) {
                    throw IndexError("word tokenizer cannot decode id " + std::to_string(id));
                }
                out += words_[idx];
            }
        }
    }
    return out;
}

std::size_t Tokenizer::vocab_size() const {
    return mode_ == Mode::byte ? kFirstContent + 256 : kFirstContent + words_.size();
}

std::vector<std::int32_t> ingest_corpus(const std::string& path, const Tokenizer& tokenizer) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open corpus file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return tokenizer.encode(buf.str());
}

}  // namespace stem
