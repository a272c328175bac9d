#pragma once

// Whitespace/punctuation tokenization and the lowercase + whitespace-collapse
// normalization used by the graph, corpus and metrics.

#include <cctype>
#include <string>
#include <string_view>
#include <vector>

namespace kiest {

inline std::string to_lower_ascii(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

inline bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

// Trim and collapse internal whitespace runs to single spaces.
inline std::string collapse_whitespace(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    bool pending = false;
    for (char c : s) {
        if (is_space(c)) {
            pending = !out.empty();
        } else {
            if (pending) out.push_back(' ');
            pending = false;
            out.push_back(c);
        }
    }
    return out;
}

inline std::string normalize_text(std::string_view s) { return to_lower_ascii(collapse_whitespace(s)); }

inline std::vector<std::string> split_whitespace(std::string_view s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (is_space(c)) {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep = " ") {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

inline bool is_split_punct(char c) {
    switch (c) {
        case '.': case ',': case '!': case '?': case ';': case ':': case '(': case ')': case '"':
            return true;
        default:
            return false;
    }
}

// Lowercases, then splits on whitespace and peels sentence punctuation into
// separate tokens ("happens?" -> "happens", "?").
inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    for (auto& word : split_whitespace(to_lower_ascii(text))) {
        std::size_t b = 0, e = word.size();
        std::vector<std::string> tail;
        while (b < e && is_split_punct(word[b])) out.emplace_back(1, word[b++]);
        while (e > b && is_split_punct(word[e - 1])) tail.emplace_back(1, word[--e]);
        if (e > b) out.push_back(word.substr(b, e - b));
        out.insert(out.end(), tail.rbegin(), tail.rend());
    }
    return out;
}

}  // namespace kiest
