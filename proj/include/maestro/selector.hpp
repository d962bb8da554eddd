#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "maestro/chat_client.hpp"
#include "maestro/core.hpp"
#include "maestro/math.hpp"
#include "maestro/prompts.hpp"
#include "maestro/reward.hpp"
#include "maestro/rng.hpp"

namespace maestro {

inline constexpr int kDefaultVocabSize = 16;
inline constexpr int kDefaultFeatureDim = 6;

// Trainable central policy over a slate.
//   choice head:      logit_k = w . x_k
//   rationale scorer: next-token logits = U [onehot(prev token) ; x_k]
// The choice head never reads U and the scorer never reads w.
struct PolicyParams {
  Eigen::VectorXd w;  // d
  Eigen::MatrixXd U;  // |V| x (|V| + d)
  int bos_token = 0;

  int feature_dim() const noexcept { return static_cast<int>(w.size()); }
  int vocab_size() const noexcept { return static_cast<int>(U.rows()); }

  static PolicyParams zeros(int d = kDefaultFeatureDim, int vocab = kDefaultVocabSize) {
    PolicyParams p;
    p.w = Eigen::VectorXd::Zero(d);
    p.U = Eigen::MatrixXd::Zero(vocab, vocab + d);
    return p;
  }

  static PolicyParams random(Rng& rng, double scale, int d = kDefaultFeatureDim,
                             int vocab = kDefaultVocabSize) {
    auto p = zeros(d, vocab);
    for (Eigen::Index i = 0; i < p.w.size(); ++i) p.w(i) = scale * rng.normal();
    for (Eigen::Index i = 0; i < p.U.size(); ++i) p.U.data()[i] = scale * rng.normal();
    return p;
  }

  void validate() const {
    if (w.size() < 1) throw Error("PolicyParams: empty choice head");
    if (U.rows() < 1 || U.cols() != U.rows() + w.size())
      throw Error("PolicyParams: rationale scorer must be |V| x (|V| + d)");
    if (bos_token < 0 || bos_token >= U.rows()) throw Error("PolicyParams: bos token out of range");
    if (!w.allFinite() || !U.allFinite()) throw Error("PolicyParams: non-finite entries");
  }

  friend bool operator==(const PolicyParams& a, const PolicyParams& b) {
    return a.bos_token == b.bos_token && a.w.size() == b.w.size() && a.U.rows() == b.U.rows() &&
           a.U.cols() == b.U.cols() && a.w == b.w && a.U == b.U;
  }
};

inline void to_json(nlohmann::json& j, const PolicyParams& p) {
  std::vector<double> w(p.w.data(), p.w.data() + p.w.size());
  std::vector<std::vector<double>> U(static_cast<std::size_t>(p.U.rows()));
  for (Eigen::Index r = 0; r < p.U.rows(); ++r)
    for (Eigen::Index c = 0; c < p.U.cols(); ++c) U[r].push_back(p.U(r, c));
  j = nlohmann::json{{"w", w}, {"U", U}, {"bos_token", p.bos_token}};
}

inline void from_json(const nlohmann::json& j, PolicyParams& p) {
  const auto w = j.at("w").get<std::vector<double>>();
  const auto U = j.at("U").get<std::vector<std::vector<double>>>();
  p.w = Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
  const auto rows = static_cast<Eigen::Index>(U.size());
  const auto cols = rows == 0 ? 0 : static_cast<Eigen::Index>(U[0].size());
  p.U.resize(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (static_cast<Eigen::Index>(U[r].size()) != cols) throw Error("PolicyParams: ragged U");
    for (Eigen::Index c = 0; c < cols; ++c) p.U(r, c) = U[r][c];
  }
  p.bos_token = j.value("bos_token", 0);
  p.validate();
}

namespace policy_detail {

inline Eigen::Map<const Eigen::VectorXd> features_of(const PolicyParams& params,
                                                     const Candidate& c) {
  if (static_cast<Eigen::Index>(c.features.size()) != params.w.size())
    throw Error("feature dimension mismatch: candidate has " + std::to_string(c.features.size()) +
                ", policy expects " + std::to_string(params.w.size()));
  return {c.features.data(), static_cast<Eigen::Index>(c.features.size())};
}

inline void check_tokens(const PolicyParams& params, const Candidate& c) {
  for (int t : c.rationale_tokens)
    if (t < 0 || t >= params.vocab_size())
      throw Error("rationale token " + std::to_string(t) + " outside vocabulary of size " +
                  std::to_string(params.vocab_size()));
}

}  // namespace policy_detail

inline std::vector<double> choice_logits(const PolicyParams& params,
                                         std::span<const Candidate> candidates) {
  std::vector<double> z;
  z.reserve(candidates.size());
  for (const auto& c : candidates) z.push_back(params.w.dot(policy_detail::features_of(params, c)));
  return z;
}

inline std::vector<double> choice_log_probs(const PolicyParams& params,
                                            std::span<const Candidate> candidates) {
  const auto z = choice_logits(params, candidates);
  return math::log_softmax<double>(z);
}

inline std::vector<double> choice_log_probs(const PolicyParams& params, const Slate& slate) {
  return choice_log_probs(params, std::span<const Candidate>(slate.candidates));
}

// Next-token logits at every rationale position of candidate c; column tau
// holds the logits used to score token tau (previous token = BOS at tau = 0).
inline Eigen::MatrixXd rationale_logits(const PolicyParams& params, const Candidate& c) {
  const auto x = policy_detail::features_of(params, c);
  policy_detail::check_tokens(params, c);
  const int V = params.vocab_size();
  const Eigen::VectorXd feature_part = params.U.rightCols(params.w.size()) * x;
  Eigen::MatrixXd logits(V, static_cast<Eigen::Index>(c.rationale_tokens.size()));
  int prev = params.bos_token;
  for (std::size_t tau = 0; tau < c.rationale_tokens.size(); ++tau) {
    logits.col(static_cast<Eigen::Index>(tau)) = params.U.col(prev) + feature_part;
    prev = c.rationale_tokens[tau];
  }
  return logits;
}

inline std::vector<double> rationale_token_log_probs(const PolicyParams& params,
                                                     std::span<const Candidate> candidates,
                                                     std::size_t k) {
  const auto& c = candidates[k];
  const auto logits = rationale_logits(params, c);
  std::vector<double> out;
  out.reserve(c.rationale_tokens.size());
  for (Eigen::Index tau = 0; tau < logits.cols(); ++tau) {
    const Eigen::VectorXd col = logits.col(tau);
    const double lse = math::logsumexp<double>(std::span<const double>(col.data(), col.size()));
    out.push_back(col(c.rationale_tokens[static_cast<std::size_t>(tau)]) - lse);
  }
  return out;
}

inline std::vector<double> rationale_token_log_probs(const PolicyParams& params, const Slate& slate,
                                                     std::size_t k) {
  return rationale_token_log_probs(params, std::span<const Candidate>(slate.candidates), k);
}

// Length-normalized mean token log-probability of candidate k's rationale.
inline double rationale_score(const PolicyParams& params, std::span<const Candidate> candidates,
                              std::size_t k) {
  if (candidates[k].rationale_tokens.empty())
    throw Error("rationale_score: candidate " + std::to_string(k) + " has no rationale tokens");
  const auto lp = rationale_token_log_probs(params, candidates, k);
  return math::mean<double>(lp);
}

inline double rationale_score(const PolicyParams& params, const Slate& slate, std::size_t k) {
  return rationale_score(params, std::span<const Candidate>(slate.candidates), k);
}

inline std::vector<double> rationale_scores(const PolicyParams& params,
                                            std::span<const Candidate> candidates) {
  std::vector<double> s;
  s.reserve(candidates.size());
  for (std::size_t k = 0; k < candidates.size(); ++k) s.push_back(rationale_score(params, candidates, k));
  return s;
}

struct CentralDecision {
  int chosen_flat_index = 0;
  std::string reason_text;
  std::string final_answer;
  std::vector<double> choice_log_probs;  // trainable policy only
  std::vector<double> rationale_scores;  // trainable policy only
  bool fallback = false;                 // endpoint parse failure resolved by majority vote
};

enum class SelectionMode { argmax, sample };

inline CentralDecision select_trainable(const PolicyParams& params, const Slate& slate,
                                        SelectionMode mode, Rng* rng = nullptr) {
  if (slate.candidates.empty()) throw Error("select_trainable: empty slate");
  CentralDecision d;
  d.choice_log_probs = choice_log_probs(params, slate);
  if (mode == SelectionMode::argmax) {
    d.chosen_flat_index = static_cast<int>(
        std::max_element(d.choice_log_probs.begin(), d.choice_log_probs.end()) -
        d.choice_log_probs.begin());
  } else {
    if (rng == nullptr) throw Error("select_trainable: sample mode needs an rng");
    std::vector<double> probs;
    for (double lp : d.choice_log_probs) probs.push_back(std::exp(lp));
    d.chosen_flat_index = static_cast<int>(rng->categorical(probs));
  }
  const bool have_tokens = std::all_of(slate.candidates.begin(), slate.candidates.end(),
                                       [](const Candidate& c) { return !c.rationale_tokens.empty(); });
  if (have_tokens && params.U.size() > 0)
    d.rationale_scores = rationale_scores(params, slate.candidates);
  const auto& chosen = slate.candidates[static_cast<std::size_t>(d.chosen_flat_index)];
  d.final_answer = chosen.final_answer;
  char buf[96];
  std::snprintf(buf, sizeof buf, "Policy endorses candidate %d (choice probability %.4f).",
                d.chosen_flat_index + 1,
                std::exp(d.choice_log_probs[static_cast<std::size_t>(d.chosen_flat_index)]));
  d.reason_text = buf;
  return d;
}

// ---- Arbiter output format -------------------------------------------------

struct CentralOutput {
  std::string reason;
  int chosen_index = 0;  // 0-based
  std::string final_answer;

  friend bool operator==(const CentralOutput&, const CentralOutput&) = default;
};

enum class CentralParseError {
  missing_reason,
  missing_chosen,
  missing_final,
  field_order,
  non_integer_chosen,
  chosen_out_of_range,
  unparseable_boxed,
};

inline const char* to_string(CentralParseError e) {
  switch (e) {
    case CentralParseError::missing_reason: return "missing Reason field";
    case CentralParseError::missing_chosen: return "missing Chosen field";
    case CentralParseError::missing_final: return "missing Final field";
    case CentralParseError::field_order: return "fields out of order";
    case CentralParseError::non_integer_chosen: return "Chosen is not an integer";
    case CentralParseError::chosen_out_of_range: return "Chosen out of range";
    case CentralParseError::unparseable_boxed: return "Final has no balanced \\boxed{...}";
  }
  return "unknown";
}

using CentralParseResult = std::variant<CentralOutput, CentralParseError>;

// Parses the arbiter's three-line reply. Markers must start a line (leading
// whitespace allowed) and appear in the order Reason, Chosen, Final; the reason
// may continue over several lines; anything after the boxed answer is ignored.
// Chosen is 1-based in the reply and returned 0-based.
inline CentralParseResult parse_central_output(std::string_view text, std::size_t slate_size) {
  struct Field {
    std::string_view marker;
    std::size_t value_begin = std::string_view::npos;  // offset just past the marker
    std::size_t line_begin = std::string_view::npos;
  };
  Field fields[3] = {{"Reason:"}, {"Chosen:"}, {"Final:"}};

  std::size_t line_start = 0;
  while (line_start <= text.size()) {
    std::size_t line_end = text.find('\n', line_start);
    if (line_end == std::string_view::npos) line_end = text.size();
    std::size_t p = line_start;
    while (p < line_end && (text[p] == ' ' || text[p] == '\t' || text[p] == '\r')) ++p;
    for (auto& f : fields) {
      if (f.value_begin == std::string_view::npos && text.substr(p, f.marker.size()) == f.marker) {
        f.value_begin = p + f.marker.size();
        f.line_begin = line_start;
        break;
      }
    }
    if (line_end == text.size()) break;
    line_start = line_end + 1;
  }
  if (fields[0].value_begin == std::string_view::npos) return CentralParseError::missing_reason;
  if (fields[1].value_begin == std::string_view::npos) return CentralParseError::missing_chosen;
  if (fields[2].value_begin == std::string_view::npos) return CentralParseError::missing_final;
  if (!(fields[0].line_begin < fields[1].line_begin && fields[1].line_begin < fields[2].line_begin))
    return CentralParseError::field_order;

  CentralOutput out;
  out.reason = detail::trim(text.substr(fields[0].value_begin, fields[1].line_begin - fields[0].value_begin));

  std::size_t chosen_end = text.find('\n', fields[1].value_begin);
  if (chosen_end == std::string_view::npos) chosen_end = text.size();
  const std::string chosen = detail::trim(text.substr(fields[1].value_begin, chosen_end - fields[1].value_begin));
  if (chosen.empty() || chosen.size() > 9 ||
      !std::all_of(chosen.begin(), chosen.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }))
    return CentralParseError::non_integer_chosen;
  const long id = std::stol(chosen);
  if (id < 1 || static_cast<std::size_t>(id) > slate_size) return CentralParseError::chosen_out_of_range;
  out.chosen_index = static_cast<int>(id - 1);

  static constexpr std::string_view kBox = "\\boxed{";
  std::size_t p = fields[2].value_begin;
  while (p < text.size() && std::isspace(static_cast<unsigned char>(text[p]))) ++p;
  if (text.substr(p, kBox.size()) != kBox) return CentralParseError::unparseable_boxed;
  const std::size_t start = p + kBox.size();
  int depth = 1;
  std::size_t i = start;
  for (; i < text.size() && depth > 0; ++i) {
    if (text[i] == '{') ++depth;
    if (text[i] == '}') --depth;
  }
  if (depth != 0) return CentralParseError::unparseable_boxed;
  out.final_answer = std::string(text.substr(start, i - 1 - start));
  return out;
}

inline std::string format_central_output(const CentralOutput& o) {
  return "Reason: " + o.reason + "\nChosen: " + std::to_string(o.chosen_index + 1) +
         "\nFinal: \\boxed{" + o.final_answer + "}";
}

// Most frequent normalized non-empty answer; ties go to the answer whose first
// occurrence has the lowest flat index. Returns that first occurrence.
inline int majority_vote_index(const Slate& slate) {
  std::map<std::string, std::pair<int, int>> tally;  // answer -> (count, first index)
  for (std::size_t k = 0; k < slate.size(); ++k) {
    const auto a = normalize_answer(slate.candidates[k].final_answer);
    if (a.empty()) continue;
    auto [it, inserted] = tally.try_emplace(a, 0, static_cast<int>(k));
    ++it->second.first;
  }
  int best = 0, best_count = 0, best_first = static_cast<int>(slate.size());
  for (const auto& [a, cf] : tally) {
    if (cf.first > best_count || (cf.first == best_count && cf.second < best_first)) {
      best_count = cf.first;
      best_first = cf.second;
      best = cf.second;
    }
  }
  return best;
}

class SelectorError : public Error {
 public:
  using Error::Error;
};

// Arbiter prompt at temperature 0; one re-prompt on a malformed reply, then a
// majority vote over candidate answers flagged as fallback.
inline CentralDecision select_endpoint(const EndpointSpec& spec, const Question& question,
                                       const Slate& slate,
                                       std::shared_ptr<const HttpTransport> transport = std::make_shared<HttplibTransport>(),
                                       Sleeper sleeper = real_sleep) {
  if (slate.candidates.empty()) throw SelectorError("select_endpoint: empty slate");
  ChatClient client(spec, std::move(transport), std::move(sleeper));
  std::vector<ChatMessage> messages{{"user", prompts::arbiter(question, slate)}};
  for (int attempt = 0; attempt < 2; ++attempt) {
    std::string reply;
    try {
      reply = client.complete(messages, 0.0);
    } catch (const TransportError& e) {
      throw SelectorError(std::string("central agent: ") + e.what());
    }
    const auto parsed = parse_central_output(reply, slate.size());
    if (const auto* ok = std::get_if<CentralOutput>(&parsed)) {
      CentralDecision d;
      d.chosen_flat_index = ok->chosen_index;
      d.reason_text = ok->reason;
      d.final_answer = ok->final_answer;
      return d;
    }
    messages.push_back({"assistant", reply});
    messages.push_back({"user", prompts::kFormatReminder});
  }
  CentralDecision d;
  d.fallback = true;
  d.chosen_flat_index = majority_vote_index(slate);
  d.final_answer = slate.candidates[static_cast<std::size_t>(d.chosen_flat_index)].final_answer;
  d.reason_text = "Arbiter reply unparseable; majority vote over candidate answers.";
  return d;
}

// ---- Selector policies used by the orchestrator ----------------------------

class Selector {
 public:
  virtual ~Selector() = default;
  virtual CentralDecision select(const Question& question, const Slate& slate, Rng& rng) const = 0;
};

namespace selector_detail {
inline CentralDecision pick(const Slate& slate, int index, std::string reason) {
  CentralDecision d;
  d.chosen_flat_index = index;
  d.final_answer = slate.candidates.at(static_cast<std::size_t>(index)).final_answer;
  d.reason_text = std::move(reason);
  return d;
}
}  // namespace selector_detail

// Picks the first correct candidate when one exists (needs gold answers).
class OracleSelector final : public Selector {
 public:
  CentralDecision select(const Question& q, const Slate& slate, Rng&) const override {
    for (std::size_t k = 0; k < slate.size(); ++k)
      if (is_correct(slate.candidates[k], q))
        return selector_detail::pick(slate, static_cast<int>(k), "oracle: first correct candidate");
    return selector_detail::pick(slate, 0, "oracle: no correct candidate");
  }
};

// Picks the first wrong candidate when one exists.
class AdversarialSelector final : public Selector {
 public:
  CentralDecision select(const Question& q, const Slate& slate, Rng&) const override {
    for (std::size_t k = 0; k < slate.size(); ++k)
      if (!is_correct(slate.candidates[k], q))
        return selector_detail::pick(slate, static_cast<int>(k), "adversary: first wrong candidate");
    return selector_detail::pick(slate, 0, "adversary: every candidate correct");
  }
};

class UniformSelector final : public Selector {
 public:
  CentralDecision select(const Question&, const Slate& slate, Rng& rng) const override {
    const auto k = static_cast<int>(rng.below(slate.size()));
    return selector_detail::pick(slate, k, "uniform random pick");
  }
};

class ConstantSelector final : public Selector {
 public:
  explicit ConstantSelector(int index) : index_(index) {}
  CentralDecision select(const Question&, const Slate& slate, Rng&) const override {
    return selector_detail::pick(slate, std::min<int>(index_, static_cast<int>(slate.size()) - 1),
                                 "constant pick");
  }

 private:
  int index_;
};

class MajorityVoteSelector final : public Selector {
 public:
  CentralDecision select(const Question&, const Slate& slate, Rng&) const override {
    return selector_detail::pick(slate, majority_vote_index(slate), "majority vote");
  }
};

class TrainableSelector final : public Selector {
 public:
  explicit TrainableSelector(std::shared_ptr<const PolicyParams> params,
                             SelectionMode mode = SelectionMode::argmax)
      : params_(std::move(params)), mode_(mode) {}
  CentralDecision select(const Question&, const Slate& slate, Rng& rng) const override {
    return select_trainable(*params_, slate, mode_, &rng);
  }

 private:
  std::shared_ptr<const PolicyParams> params_;
  SelectionMode mode_;
};

class EndpointSelector final : public Selector {
 public:
  explicit EndpointSelector(EndpointSpec spec,
                            std::shared_ptr<const HttpTransport> transport = std::make_shared<HttplibTransport>(),
                            Sleeper sleeper = real_sleep)
      : spec_(std::move(spec)), transport_(std::move(transport)), sleeper_(std::move(sleeper)) {}
  CentralDecision select(const Question& q, const Slate& slate, Rng&) const override {
    return select_endpoint(spec_, q, slate, transport_, sleeper_);
  }

 private:
  EndpointSpec spec_;
  std::shared_ptr<const HttpTransport> transport_;
  Sleeper sleeper_;
};

}  // namespace maestro
