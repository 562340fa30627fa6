#pragma once

#include <algorithm>
#include <cctype>
#include <iterator>
#include <random>
#include <string>
#include <vector>

namespace tlvm::testing::oracle {

// Brute-force scorer written without the library: character classes by
// explicit table, word sets by sorted vectors, means over a fixed common
// denominator.
inline bool is_punct(char c) {
  static const std::string punct = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";
  return punct.find(c) != std::string::npos;
}

inline std::vector<std::string> words(const std::string& text) {
  std::vector<std::string> out{""};
  for (char c : text) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
      out.emplace_back();
    } else if (!is_punct(c)) {
      out.back() += (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c;
    }
  }
  out.erase(std::remove(out.begin(), out.end(), std::string()), out.end());
  return out;
}

inline std::vector<std::string> unique_sorted(std::vector<std::string> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

constexpr long long kLcm = 60;  // lcm(1..5): every gold has at most 5 unique words

inline double oracle_closed(const std::vector<std::string>& golds, const std::vector<std::string>& preds) {
  long long hits = 0;
  for (std::size_t i = 0; i < golds.size(); ++i) {
    const auto p = words(preds[i]);
    if (!p.empty() && p[0] == words(golds[i])[0]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(golds.size());
}

inline double oracle_open(const std::vector<std::string>& golds, const std::vector<std::string>& preds) {
  long long numerator = 0;
  for (std::size_t i = 0; i < golds.size(); ++i) {
    const auto g = unique_sorted(words(golds[i]));
    const auto p = unique_sorted(words(preds[i]));
    std::vector<std::string> common;
    std::set_intersection(g.begin(), g.end(), p.begin(), p.end(), std::back_inserter(common));
    numerator += static_cast<long long>(common.size()) * (kLcm / static_cast<long long>(g.size()));
  }
  return static_cast<double>(numerator) / static_cast<double>(kLcm * static_cast<long long>(golds.size()));
}

// Random answer text: vocabulary words with mixed case, stray punctuation
// and assorted separators.
inline std::string noisy(std::mt19937_64& rng, const std::vector<std::string>& vocab, std::size_t n) {
  static const std::vector<std::string> seps{" ", "  ", "\t", " , ", ". ", "\n"};
  std::string out = rng() % 3 == 0 ? " " : "";
  for (std::size_t i = 0; i < n; ++i) {
    std::string w = vocab[rng() % vocab.size()];
    if (rng() % 4 == 0) std::transform(w.begin(), w.end(), w.begin(), ::toupper);
    if (rng() % 5 == 0) w += "?!"[rng() % 2];
    if (i) out += seps[rng() % seps.size()];
    out += w;
  }
  return out;
}

}  // namespace tlvm::testing::oracle
