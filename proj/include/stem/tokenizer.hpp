#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace stem {

// Reserved ids: 0 = pad, 1 = unknown; content ids start at 2.
class Tokenizer {
public:
    enum class Mode { byte, word };

    static Tokenizer byte_level();
    // Whitespace-word tokenizer with a frequency-ranked vocabulary built from
    // `text` (ties broken lexicographically), capped at max_vocab total ids.
    static Tokenizer word_level(std::string_view text, std::size_t max_vocab);

    std::vector<std::int32_t> encode(std::string_view text) const;
    std::string decode(std::span<const std::int32_t> ids) const;

    Mode mode() const { return mode_; }
    std::size_t vocab_size() const;

    static constexpr std::int32_t kPad = 0;
    static constexpr std::int32_t kUnknown = 1;
    static constexpr std::int32_t kFirstContent = 2;

private:
    Mode mode_ = Mode::byte;
    std::vector<std::string> words_;  // word mode: index i <-> id i + 2
    std::unordered_map<std::string, std::int32_t> lookup_;
};

// Reads a UTF-8 text file and encodes it.
std::vector<std::int32_t> ingest_corpus(const std::string& path, const Tokenizer& tokenizer);

}  // namespace stem
