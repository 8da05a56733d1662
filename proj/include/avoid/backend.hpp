#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "avoid/corpus.hpp"
#include "avoid/error.hpp"
#include "avoid/text.hpp"

namespace avoid {

enum class PromptKind { DiffuserAction, VerifierAction, Distill, Consolidate, Decompose, PolicyReflect };

inline constexpr std::array kAllPromptKinds = {PromptKind::DiffuserAction, PromptKind::VerifierAction,
                                               PromptKind::Distill,        PromptKind::Consolidate,
                                               PromptKind::Decompose,      PromptKind::PolicyReflect};

inline const char* to_string(PromptKind k) {
  switch (k) {
    case PromptKind::DiffuserAction: return "diffuser-action";
    case PromptKind::VerifierAction: return "verifier-action";
    case PromptKind::Distill: return "distill";
    case PromptKind::Consolidate: return "consolidate";
    case PromptKind::Decompose: return "decompose";
    case PromptKind::PolicyReflect: return "policy-reflect";
  }
  return "?";
}

inline std::optional<PromptKind> parse_prompt_kind(std::string_view s) {
  for (auto k : kAllPromptKinds)
    if (s == to_string(k)) return k;
  return std::nullopt;
}

inline const std::vector<Action>& diffuser_actions() {
  static const std::vector<Action> a{Action::Comment, Action::Forward, Action::Like, Action::View};
  return a;
}

inline const std::vector<Action>& verifier_actions() {
  static const std::vector<Action> a{Action::Comment, Action::Forward, Action::Like,
                                     Action::View,    Action::FactCheck, Action::Warn};
  return a;
}

// ---- prompt templates ------------------------------------------------------

namespace prompts {

inline constexpr const char* kDiffuserAction =
    "You are {persona}. Friends in your network just shared this news: {news}\n"
    "Short-term memory (recent interactions): {stm}\n"
    "Long-term memory (relevant background): {ltm}\n"
    "Choose the single most fitting action from [{actions}] and write its name alone on the last line.";

inline constexpr const char* kVerifierAction =
    "You are {persona}, a user on a social network who assesses the veracity of what you see.\n"
    "Your policies: {policies}\n"
    "Fact-checking tool output: {fact_check}\n"
    "News: {news}\n"
    "Choose one action from [{actions}]. WARN means this news might be fake. "
    "Write the action name alone on the last line.";

inline constexpr const char* kDistillGenerate =
    "Persona: {persona}\n"
    "Write one short comment this persona would post in reply to a news item from its usual topic.";

inline constexpr const char* kDistillRefine =
    "Persona: {persona}\n"
    "Comment you generated: {comment}\n"
    "Comment actually observed: {next_comment}\n"
    "The generated comment conflicts with the observed one. State the reason, decide how the persona "
    "must change, and write the updated persona alone on the last line.";

inline constexpr const char* kConsolidate =
    "Condense these recent interactions into one compact memory record:\n{records}";

inline constexpr const char* kDecompose =
    "Break the news below into its main entity, event and topic. Answer with exactly three lines "
    "'entity: ...', 'event: ...', 'topic: ...'.\nNews: {news}";

inline constexpr const char* kPolicyReflect =
    "News: {news}\nPolicy memory: {policy}\nSocial context: {context}\n"
    "Your assessment: {judgment}\nYour reasoning: {trace}\nGround truth: {ground_truth}\n"
    "If the assessment disagrees with the ground truth, reason step by step about the mistake and then "
    "output revised policy entries, one per line, formatted as level|key|guidance with level one of "
    "entity, event, meta.";

}  // namespace prompts

// Substitutes {name} placeholders of `tmpl` from `slots`. Substituted text is
// not rescanned. A placeholder without a slot is a ConfigError.
inline std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& slots) {
  std::string out;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      auto close = tmpl.find('}', i);
      if (close == std::string_view::npos) throw ConfigError("unterminated placeholder in template");
      std::string name(tmpl.substr(i + 1, close - i - 1));
      auto it = slots.find(name);
      if (it == slots.end()) throw ConfigError("template placeholder {" + name + "} not substituted");
      out += it->second;
      i = close + 1;
    } else {
      out.push_back(tmpl[i++]);
    }
  }
  return out;
}

// ---- requests and responses ------------------------------------------------

// Numeric features computed by the simulation engine alongside the rendered
// prompt. The mock backend decides from these; remote backends ignore them.
struct DecisionSignals {
  double persona_news_cosine = 0.0;
  double memory_coherence = 0.0;  // mean similarity of the top short-term hits
  double jitter = 0.0;            // uniform [0,1) draw from the agent's stream
  bool warning_present = false;
  bool keyword_hit = false;
  bool policy_hit = false;
};

struct DecisionRequest {
  PromptKind kind = PromptKind::DiffuserAction;
  std::map<std::string, std::string> slots;
  std::string prompt;  // fully rendered template
  std::vector<Action> allowed_actions;
  std::string context_digest;
  DecisionSignals signals;
};

inline const char* template_for(PromptKind kind, const std::map<std::string, std::string>& slots) {
  switch (kind) {
    case PromptKind::DiffuserAction: return prompts::kDiffuserAction;
    case PromptKind::VerifierAction: return prompts::kVerifierAction;
    case PromptKind::Distill: {
      auto it = slots.find("stage");
      return (it != slots.end() && it->second == "refine") ? prompts::kDistillRefine : prompts::kDistillGenerate;
    }
    case PromptKind::Consolidate: return prompts::kConsolidate;
    case PromptKind::Decompose: return prompts::kDecompose;
    case PromptKind::PolicyReflect: return prompts::kPolicyReflect;
  }
  return "";
}

inline std::string action_list(const std::vector<Action>& actions) {
  std::vector<std::string> names;
  for (auto a : actions) names.emplace_back(to_string(a));
  return text::join(names, ", ");
}

inline DecisionRequest make_request(PromptKind kind, std::map<std::string, std::string> slots,
                                    std::vector<Action> allowed = {}, DecisionSignals signals = {}) {
  DecisionRequest r;
  r.kind = kind;
  if (!allowed.empty()) slots["actions"] = action_list(allowed);
  r.prompt = render_template(template_for(kind, slots), slots);
  r.slots = std::move(slots);
  r.allowed_actions = std::move(allowed);
  r.signals = signals;
  return r;
}

struct DecisionResponse {
  std::string text;
  std::optional<Action> action;
  std::optional<Stance> stance;
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;
  bool coerced = false;  // remote reply named an illegal action and was mapped to view
};

// Reads the action from the last non-empty line of a free-text reply.
// Anything outside the allowed set becomes `view` with coerced = true.
inline std::pair<Action, bool> parse_action_reply(std::string_view reply, const std::vector<Action>& allowed) {
  std::string last;
  std::istringstream in{std::string(reply)};
  for (std::string line; std::getline(in, line);)
    if (!text::trim(line).empty()) last = line;
  auto toks = text::words(last);
  std::string name = toks.empty() ? "" : toks.back();
  if (toks.size() >= 2 && toks[toks.size() - 2] == "fact" && name == "check") name = "fact_check";
  if (name == "warning") name = "warn";
  auto a = parse_action(name);
  if (a && std::find(allowed.begin(), allowed.end(), *a) != allowed.end()) return {*a, false};
  return {Action::View, true};
}

// ---- token ledger ----------------------------------------------------------

struct TokenTotals {
  std::int64_t calls = 0;
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;

  std::int64_t total() const { return prompt_tokens + completion_tokens; }
  friend bool operator==(const TokenTotals&, const TokenTotals&) = default;
};

class TokenLedger {
 public:
  void record(PromptKind kind, std::int64_t prompt_tokens, std::int64_t completion_tokens) {
    if (prompt_tokens < 0 || completion_tokens < 0) throw DomainError("negative token count");
    auto& t = totals_[kind];
    ++t.calls;
    t.prompt_tokens += prompt_tokens;
    t.completion_tokens += completion_tokens;
  }

  void merge(const TokenLedger& other) {
    for (const auto& [k, t] : other.totals_) {
      auto& mine = totals_[k];
      mine.calls += t.calls;
      mine.prompt_tokens += t.prompt_tokens;
      mine.completion_tokens += t.completion_tokens;
    }
  }

  TokenTotals totals(PromptKind k) const {
    auto it = totals_.find(k);
    return it == totals_.end() ? TokenTotals{} : it->second;
  }

  TokenTotals grand_total() const {
    TokenTotals g;
    for (const auto& [k, t] : totals_) {
      g.calls += t.calls;
      g.prompt_tokens += t.prompt_tokens;
      g.completion_tokens += t.completion_tokens;
    }
    return g;
  }

  friend bool operator==(const TokenLedger& a, const TokenLedger& b) {
    for (auto k : kAllPromptKinds)
      if (!(a.totals(k) == b.totals(k))) return false;
    return true;
  }

  json to_json() const {
    json rows = json::object();
    for (auto k : kAllPromptKinds) {
      auto t = totals(k);
      rows[to_string(k)] = {{"calls", t.calls}, {"prompt_tokens", t.prompt_tokens},
                            {"completion_tokens", t.completion_tokens}};
    }
    auto g = grand_total();
    return json{{"per_kind", rows},
                {"grand_total", {{"calls", g.calls}, {"prompt_tokens", g.prompt_tokens},
                                 {"completion_tokens", g.completion_tokens}, {"total_tokens", g.total()}}}};
  }

  static TokenLedger from_json(const json& j) {
    TokenLedger l;
    for (const auto& [name, row] : j.at("per_kind").items()) {
      auto k = parse_prompt_kind(name);
      if (!k) throw ParseError("ledger", 0, "unknown prompt kind " + name);
      TokenTotals t{row.at("calls").get<std::int64_t>(), row.at("prompt_tokens").get<std::int64_t>(),
                    row.at("completion_tokens").get<std::int64_t>()};
      if (t.calls || t.prompt_tokens || t.completion_tokens) l.totals_[*k] = t;
    }
    return l;
  }

 private:
  std::map<PromptKind, TokenTotals> totals_;
};

// Fixed-column text table: one row per prompt kind in declaration order, then the grand total.
inline std::string ledger_report(const TokenLedger& ledger) {
  std::ostringstream os;
  auto row = [&](const std::string& name, const TokenTotals& t) {
    os << std::left << std::setw(16) << name << std::right << std::setw(8) << t.calls << std::setw(16)
       << t.prompt_tokens << std::setw(18) << t.completion_tokens << std::setw(14) << t.total() << '\n';
  };
  os << std::left << std::setw(16) << "kind" << std::right << std::setw(8) << "calls" << std::setw(16)
     << "prompt_tokens" << std::setw(18) << "completion_tokens" << std::setw(14) << "total" << '\n';
  for (auto k : kAllPromptKinds) row(to_string(k), ledger.totals(k));
  row("TOTAL", ledger.grand_total());
  return os.str();
}

// ---- backends --------------------------------------------------------------

class DecisionBackend {
 public:
  virtual ~DecisionBackend() = default;
  virtual DecisionResponse decide(const DecisionRequest& req) = 0;
  virtual std::string name() const = 0;
};

struct MockBackendConfig {
  double w_persona = 0.6;
  double w_memory = 0.3;
  double w_jitter = 0.1;
  double forward_threshold = 0.55;
  double comment_threshold = 0.45;
  double like_threshold = 0.35;
};

/// Deterministic rule-based stand-in for a language model.
///
/// Diffusers score 0.6*persona/news cosine + 0.3*memory coherence + 0.1*jitter
/// and map the score to forward / comment / like / view; a warning about the
/// item in short-term memory forces view. Verifiers warn when the keyword
/// oracle or a "misjudged" policy rule fires and forward otherwise. Text
/// kinds (distill, consolidate, decompose, policy-reflect) are answered from
/// the request slots. Token counts are whitespace-token counts.
class MockBackend : public DecisionBackend {
 public:
  explicit MockBackend(MockBackendConfig cfg = {}) : cfg_(cfg) {}

  std::string name() const override { return "mock"; }

  double diffuser_score(const DecisionSignals& s) const {
    return cfg_.w_persona * s.persona_news_cosine + cfg_.w_memory * s.memory_coherence + cfg_.w_jitter * s.jitter;
  }

  Action diffuser_rule(const DecisionSignals& s) const {
    if (s.warning_present) return Action::View;
    const double score = diffuser_score(s);
    if (score > cfg_.forward_threshold) return Action::Forward;
    if (score > cfg_.comment_threshold) return Action::Comment;
    if (score > cfg_.like_threshold) return Action::Like;
    return Action::View;
  }

  static Stance stance_rule(const DecisionSignals& s) {
    if (s.persona_news_cosine > 0.4) return Stance::Pos;
    if (s.persona_news_cosine > 0.2) return Stance::Neu;
    return Stance::Neg;
  }

  DecisionResponse decide(const DecisionRequest& req) override {
    DecisionResponse r;
    switch (req.kind) {
      case PromptKind::DiffuserAction: {
        Action a = diffuser_rule(req.signals);
        if (a == Action::Comment) {
          r.stance = stance_rule(req.signals);
          r.text = "My take (" + std::string(to_string(*r.stance)) + "): " + slot(req, "news_head") + "\n";
        }
        r.text += to_string(a);
        r.action = a;
        break;
      }
      case PromptKind::VerifierAction: {
        Action a = (req.signals.keyword_hit || req.signals.policy_hit) ? Action::Warn : Action::Forward;
        r.text = a == Action::Warn ? "WARN this news might be fake\nwarn" : "forward";
        r.action = a;
        break;
      }
      case PromptKind::Distill:
        if (slot(req, "stage") == "refine")
          r.text = slot(req, "persona") + " | " + text::head_tokens(text::normalize_ws(slot(req, "next_comment")), 25);
        else
          r.text = slot(req, "persona");
        break;
      case PromptKind::Consolidate: r.text = "digest: " + slot(req, "records"); break;
      case PromptKind::Decompose: r.text = mock_decompose(slot(req, "news")); break;
      case PromptKind::PolicyReflect: {
        const std::string key = slot(req, "entity_key");
        r.text = "entity|" + key + "|misjudged: " + slot(req, "ground_truth");
        break;
      }
    }
    r.prompt_tokens = static_cast<std::int64_t>(text::whitespace_tokens(req.prompt));
    r.completion_tokens = static_cast<std::int64_t>(text::whitespace_tokens(r.text));
    return r;
  }

  // Capitalized tokens -> entity, verb-like tokens -> event, the rest -> topic.
  static std::string mock_decompose(const std::string& news) {
    std::vector<std::string> ent, ev, top;
    static const std::vector<std::string> verbs{"is",   "are",  "was",    "were", "be",   "says", "said",
                                                "has",  "have", "had",    "will", "can",  "claims", "shows",
                                                "reveals", "announces", "denies", "makes", "gets", "goes"};
    for (const auto& w : text::raw_words(news)) {
      const std::string lw = text::lower(w);
      if (std::isupper(static_cast<unsigned char>(w[0])))
        ent.push_back(lw);
      else if (std::find(verbs.begin(), verbs.end(), lw) != verbs.end() || ends_with(lw, "ed") ||
               ends_with(lw, "ing"))
        ev.push_back(lw);
      else
        top.push_back(lw);
    }
    return "entity: " + text::join(ent, " ") + "\nevent: " + text::join(ev, " ") + "\ntopic: " + text::join(top, " ");
  }

 private:
  static bool ends_with(const std::string& s, const std::string& suf) {
    return s.size() > suf.size() + 1 && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
  }

  static std::string slot(const DecisionRequest& req, const std::string& key) {
    auto it = req.slots.find(key);
    return it == req.slots.end() ? std::string{} : it->second;
  }

  MockBackendConfig cfg_;
};

// Routes requests to a backend, charges the ledger, and optionally keeps a
// transcript of (prompt, reply) pairs for audit.
class DecisionClient {
 public:
  struct Exchange {
    PromptKind kind;
    std::string prompt;
    std::string reply;
  };

  explicit DecisionClient(DecisionBackend& backend, bool keep_transcript = false)
      : backend_(&backend), keep_(keep_transcript) {}

  DecisionResponse dispatch(const DecisionRequest& req) {
    if (req.prompt.empty()) throw ConfigError("request prompt not rendered");
    auto resp = backend_->decide(req);
    if (!req.allowed_actions.empty()) {
      if (!resp.action) {
        auto [a, coerced] = parse_action_reply(resp.text, req.allowed_actions);
        resp.action = a;
        resp.coerced = coerced;
      } else if (std::find(req.allowed_actions.begin(), req.allowed_actions.end(), *resp.action) ==
                 req.allowed_actions.end()) {
        resp.action = Action::View;
        resp.coerced = true;
      }
    }
    ledger_.record(req.kind, resp.prompt_tokens, resp.completion_tokens);
    if (keep_) transcript_.push_back({req.kind, req.prompt, resp.text});
    return resp;
  }

  DecisionBackend& backend() { return *backend_; }
  const TokenLedger& ledger() const { return ledger_; }
  TokenLedger& ledger() { return ledger_; }
  const std::vector<Exchange>& transcript() const { return transcript_; }

 private:
  DecisionBackend* backend_;
  bool keep_;
  TokenLedger ledger_;
  std::vector<Exchange> transcript_;
};

}  // namespace avoid
