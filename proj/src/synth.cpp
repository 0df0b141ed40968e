#include "mrg/synth.hpp"

#include <cmath>
#include <random>
#include <sstream>

namespace mrg {

namespace {

// "@" marks where the entity goes. The last utterance never contains it.
struct Template {
  std::vector<std::string> utterances;
  std::string question;
  std::string response;
};

const std::vector<Template>& family(ReasoningType type) {
  static const std::vector<Template> paraphrasing{
      {{"have you heard of @", "yes i know it well", "i really love it"},
       "what does the speaker love",
       "i love @ too"},
      {{"i tried @ yesterday", "how was it", "it was really great"},
       "what was really great",
       "i want to try @ too"},
  };
  static const std::vector<Template> lexical{
      {{"my friend talked about @", "what did your friend say", "that we should try it"},
       "what should we try",
       "we should try @ together"},
      {{"do you like @", "i do", "i like it a lot"},
       "what does the speaker like",
       "i like @ a lot too"},
  };
  static const std::vector<Template> pragmatics{
      {{"are you free this weekend", "yes i plan to see @", "can i join you"},
       "what does the speaker plan to see",
       "sure we can see @ together"},
      {{"what are you doing now", "i am reading about @", "is it fun"},
       "what is the speaker reading about",
       "yes @ is really fun"},
  };
  switch (type) {
    case ReasoningType::Paraphrasing: return paraphrasing;
    case ReasoningType::LexicalMatch: return lexical;
    case ReasoningType::Pragmatics: return pragmatics;
  }
  return paraphrasing;
}

const std::vector<std::string> kGreetings{"hello there", "hi how are you"};

// Portable draws from the raw engine output; the standard distributions are
// implementation-defined and would break byte-identical corpora across toolchains.
double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

std::string fill(const std::string& text, const std::string& entity) {
  std::string out;
  for (char c : text) {
    if (c == '@') out += entity;
    else out += c;
  }
  return out;
}

}  // namespace

SynthConfig SynthConfig::defaults() {
  SynthConfig c;
  c.entity_pool = {"jazz",      "tennis",    "sushi",     "paris",      "chess",       "pizza",
                   "new york",  "hip hop",   "green tea", "ice cream",  "rock music",  "yoga",
                   "football",  "coffee",    "tokyo",     "piano",      "hiking",      "star wars",
                   "london",    "soccer",    "ramen",     "painting",   "harry potter", "the beach"};
  return c;
}

std::vector<SynthRecord> synth_generate(std::uint64_t seed, std::size_t n, const SynthConfig& config) {
  if (n == 0) throw ConfigError("synthetic corpus size must be at least 1");
  if (config.diversity == 0) throw ConfigError("synthetic diversity must be at least 1");
  if (config.entity_pool.size() < config.diversity) {
    throw ConfigError("entity pool has " + std::to_string(config.entity_pool.size()) +
                      " entries but diversity " + std::to_string(config.diversity) + " was requested");
  }
  double total = 0.0;
  for (double w : config.mixture) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("mixture weights must be finite and non-negative");
    total += w;
  }
  if (total <= 0.0) throw ConfigError("mixture weights sum to zero");
  for (const auto& e : config.entity_pool) {
    if (tokenize(e, false).empty() || e.find('@') != std::string::npos) {
      throw ConfigError("invalid entity '" + e + "'");
    }
  }

  std::mt19937_64 rng(seed);
  std::vector<SynthRecord> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double u = uniform01(rng) * total;
    ReasoningType type = ReasoningType::Pragmatics;
    if (u < config.mixture[0]) type = ReasoningType::Paraphrasing;
    else if (u < config.mixture[0] + config.mixture[1]) type = ReasoningType::LexicalMatch;
    const auto& templates = family(type);
    const auto& tpl = templates[uniform_index(rng, templates.size())];
    const auto& entity = config.entity_pool[uniform_index(rng, config.diversity)];
    const bool greet = uniform01(rng) < config.greeting_probability;
    const auto& greeting = kGreetings[uniform_index(rng, kGreetings.size())];

    SynthRecord rec{{}, type, entity};
    auto& d = rec.dialog;
    if (greet) d.utterances.push_back(greeting);
    std::size_t offset = 0;
    for (const auto& u : d.utterances) offset += tokenize(u, false).size();
    const auto entity_len = tokenize(entity, false).size();
    for (const auto& text : tpl.utterances) {
      const auto pieces = tokenize(text, false);
      for (std::size_t i = 0, pos = offset; i < pieces.size(); ++i) {
        if (pieces[i] == "@") {
          for (std::size_t t = 0; t < entity_len; ++t) d.answer_token_indices.push_back(pos + t);
          pos += entity_len;
        } else {
          ++pos;
        }
      }
      d.utterances.push_back(fill(text, entity));
      offset += tokenize(d.utterances.back(), false).size();
    }
    d.question = tpl.question;
    d.response = fill(tpl.response, entity);
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<RawDialog> synth_corpus(std::uint64_t seed, std::size_t n, const SynthConfig& config) {
  std::vector<RawDialog> out;
  for (auto& r : synth_generate(seed, n, config)) out.push_back(std::move(r.dialog));
  return out;
}

}  // namespace mrg
