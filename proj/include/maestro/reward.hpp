#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "maestro/core.hpp"

namespace maestro {

// Content of the last balanced \boxed{...} in `text`.
inline std::optional<std::string> extract_final_answer(std::string_view text) {
  static constexpr std::string_view kOpen = "\\boxed{";
  std::optional<std::string> found;
  std::size_t pos = text.find(kOpen);
  while (pos != std::string_view::npos) {
    const std::size_t start = pos + kOpen.size();
    int depth = 1;
    std::size_t i = start;
    for (; i < text.size() && depth > 0; ++i) {
      if (text[i] == '{') ++depth;
      if (text[i] == '}') --depth;
    }
    if (depth == 0) found = std::string(text.substr(start, i - 1 - start));
    pos = text.find(kOpen, pos + 1);
  }
  return found;
}

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

// True when s[0] == '{' and its matching brace is the last character.
inline bool wrapped_in_braces(std::string_view s) {
  if (s.size() < 2 || s.front() != '{' || s.back() != '}') return false;
  int depth = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '{') ++depth;
    if (s[i] == '}') --depth;
    if (depth == 0 && i + 1 < s.size()) return false;
  }
  return depth == 0;
}

using Wide = __int128;

inline bool parse_wide(std::string_view digits, Wide& out) {
  if (digits.empty() || digits.size() > 30) return false;
  Wide v = 0;
  for (char c : digits) {
    if (!std::isdigit(static_cast<unsigned char>(c))) return false;
    v = v * 10 + (c - '0');
  }
  out = v;
  return true;
}

inline Wide gcd_wide(Wide a, Wide b) {
  if (a < 0) a = -a;
  if (b < 0) b = -b;
  while (b != 0) {
    const Wide t = a % b;
    a = b;
    b = t;
  }
  return a;
}

inline std::string wide_to_string(Wide v) {
  if (v == 0) return "0";
  const bool neg = v < 0;
  if (neg) v = -v;
  std::string s;
  while (v > 0) {
    s.push_back(static_cast<char>('0' + static_cast<int>(v % 10)));
    v /= 10;
  }
  if (neg) s.push_back('-');
  std::reverse(s.begin(), s.end());
  return s;
}

struct Rational {
  Wide num = 0;
  Wide den = 1;
};

// Integer, decimal or a/b literal, optionally signed.
inline std::optional<Rational> parse_rational(std::string_view s) {
  bool neg = false;
  if (!s.empty() && (s.front() == '-' || s.front() == '+')) {
    neg = s.front() == '-';
    s.remove_prefix(1);
  }
  Rational r;
  if (const auto slash = s.find('/'); slash != std::string_view::npos) {
    if (!parse_wide(s.substr(0, slash), r.num) || !parse_wide(s.substr(slash + 1), r.den) ||
        r.den == 0)
      return std::nullopt;
  } else if (const auto dot = s.find('.'); dot != std::string_view::npos) {
    const auto whole = s.substr(0, dot);
    const auto frac = s.substr(dot + 1);
    if (whole.empty() && frac.empty()) return std::nullopt;
    if (whole.size() + frac.size() > 30) return std::nullopt;
    Wide w = 0, f = 0;
    if (!whole.empty() && !parse_wide(whole, w)) return std::nullopt;
    if (!frac.empty() && !parse_wide(frac, f)) return std::nullopt;
    Wide scale = 1;
    for (std::size_t i = 0; i < frac.size(); ++i) scale *= 10;
    r.num = w * scale + f;
    r.den = scale;
  } else if (!parse_wide(s, r.num)) {
    return std::nullopt;
  }
  if (neg) r.num = -r.num;
  const Wide g = gcd_wide(r.num, r.den);
  if (g > 1) {
    r.num /= g;
    r.den /= g;
  }
  return r;
}

inline std::string collapse_whitespace(std::string_view s) {
  std::string out;
  bool in_space = false;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      in_space = true;
      continue;
    }
    if (in_space && !out.empty()) out.push_back(' ');
    in_space = false;
    out.push_back(c);
  }
  return out;
}

}  // namespace detail

// Canonical answer string: trimmed, lowercased, commas/"$"/trailing "%" and
// enclosing braces removed; exact rationals re-emitted as "p" or "p/q" in
// lowest terms. Idempotent.
inline std::string normalize_answer(std::string_view raw) {
  std::string s;
  s.reserve(raw.size());
  for (char c : raw) {
    if (c == ',' || c == '$') continue;
    s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  for (;;) {
    std::string next = detail::trim(s);
    while (!next.empty() && next.back() == '%') next = detail::trim(next.substr(0, next.size() - 1));
    if (detail::wrapped_in_braces(next)) next = next.substr(1, next.size() - 2);
    if (next == s) break;
    s = std::move(next);
  }
  if (auto r = detail::parse_rational(s)) {
    if (r->den == 1) return detail::wide_to_string(r->num);
    return detail::wide_to_string(r->num) + "/" + detail::wide_to_string(r->den);
  }
  return detail::collapse_whitespace(s);
}

struct RewardConfig {
  double rationale_bonus_weight = 0.0;  // beta
  double numeric_tolerance = 1e-9;      // relative
};

// Rationale quality in [0, 1]. The default judge scores every rationale 0.
using RationaleJudge = std::function<double(const Candidate&, const Question&)>;

inline double zero_judge(const Candidate&, const Question&) { return 0.0; }

inline bool answers_match(std::string_view answer, std::string_view gold,
                          double numeric_tolerance = 1e-9) {
  const auto a = normalize_answer(answer);
  if (a.empty()) return false;
  const auto g = normalize_answer(gold);
  if (a == g) return true;
  const auto ra = detail::parse_rational(a);
  const auto rg = detail::parse_rational(g);
  if (!ra || !rg) return false;
  const double x = static_cast<double>(ra->num) / static_cast<double>(ra->den);
  const double y = static_cast<double>(rg->num) / static_cast<double>(rg->den);
  return std::abs(x - y) <= numeric_tolerance * std::max(std::abs(x), std::abs(y));
}

inline bool is_correct(const Candidate& c, const Question& q, double numeric_tolerance = 1e-9) {
  if (!q.gold_answer) throw Error("is_correct: question '" + q.id + "' has no gold answer");
  return answers_match(c.final_answer, *q.gold_answer, numeric_tolerance);
}

inline double compute_reward(const Candidate& candidate, const Question& question,
                             const RewardConfig& config = {},
                             const RationaleJudge& judge = zero_judge) {
  if (config.rationale_bonus_weight < 0) throw Error("compute_reward: negative bonus weight");
  double r = is_correct(candidate, question, config.numeric_tolerance) ? 1.0 : 0.0;
  if (config.rationale_bonus_weight > 0) {
    const double quality = std::clamp(judge(candidate, question), 0.0, 1.0);
    r += config.rationale_bonus_weight * quality;
  }
  return r;
}

struct SlateRewards {
  std::vector<double> rewards;
  double mean = 0.0;
};

inline SlateRewards candidate_rewards(const Slate& slate, const Question& question,
                                      const RewardConfig& config = {},
                                      const RationaleJudge& judge = zero_judge) {
  SlateRewards out;
  out.rewards.reserve(slate.size());
  for (const auto& c : slate.candidates)
    out.rewards.push_back(compute_reward(c, question, config, judge));
  if (!out.rewards.empty())
    out.mean = std::accumulate(out.rewards.begin(), out.rewards.end(), 0.0) /
               static_cast<double>(out.rewards.size());
  return out;
}

}  // namespace maestro
