#include "mrg/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include "json.hpp"
#include <sstream>

namespace mrg {

namespace {

const char* kReservedTokens[] = {"<pad>", "<unk>", "<sos>", "<eos>"};

bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;
}

}  // namespace

std::size_t DialogExample::context_tokens() const {
  std::size_t n = 0;
  for (const auto& u : utterances) n += u.size();
  return n;
}

std::vector<std::string> tokenize(std::string_view text, bool char_level) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (is_space(c)) {
      ++i;
      continue;
    }
    if (char_level) {
      const auto len = std::min(utf8_length(c), text.size() - i);
      out.emplace_back(text.substr(i, len));
      i += len;
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && !is_space(static_cast<unsigned char>(text[j]))) ++j;
    out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

// ---- Vocabulary ------------------------------------------------------------

Vocabulary::Vocabulary() {
  for (const char* t : kReservedTokens) append(t);
}

void Vocabulary::append(std::string token) {
  ids_.emplace(token, tokens_.size());
  tokens_.push_back(std::move(token));
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& token_streams, std::size_t max_size) {
  if (max_size < kReserved) throw std::invalid_argument("vocabulary size must leave room for the reserved tokens");
  std::map<std::string, std::size_t> counts;
  for (const auto& stream : token_streams)
    for (const auto& t : stream) ++counts[t];
  for (const char* t : kReservedTokens) counts.erase(t);

  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary v;
  for (auto& [token, count] : ranked) {
    if (v.size() >= max_size) break;
    v.append(token);
  }
  return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary file " + path.string());
  Vocabulary v;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || v.contains(line)) {
      throw DataError(path.string() + ":" + std::to_string(line_number) + ": empty or duplicate token");
    }
    v.append(line);
  }
  return v;
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens) {
  Vocabulary v;
  if (tokens.size() < kReserved || !std::equal(v.tokens_.begin(), v.tokens_.end(), tokens.begin())) {
    throw DataError("token list must start with the reserved tokens");
  }
  for (std::size_t i = kReserved; i < tokens.size(); ++i) {
    if (tokens[i].empty() || v.contains(tokens[i])) throw DataError("empty or duplicate token '" + tokens[i] + "'");
    v.append(tokens[i]);
  }
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write vocabulary file " + path.string());
  for (std::size_t i = kReserved; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
}

bool Vocabulary::contains(std::string_view token) const { return ids_.count(std::string(token)) != 0; }

TokenId Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id >= tokens_.size()) throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[id];
}

std::vector<TokenId> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<TokenId> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<TokenId>& ids, bool strip_special) const {
  std::vector<std::string> out;
  for (auto id : ids) {
    if (strip_special && (id == kPad || id == kSos || id == kEos)) continue;
    out.push_back(token(id));
  }
  return out;
}

// ---- JSONL -----------------------------------------------------------------

std::string to_jsonl_line(const RawDialog& d) {
  nlohmann::ordered_json j;
  j["utterances"] = d.utterances;
  j["question"] = d.question;
  j["answer_token_indices"] = d.answer_token_indices;
  j["response"] = d.response;
  return j.dump();
}

RawDialog parse_jsonl_line(std::string_view line, std::size_t line_number) {
  const auto where = "line " + std::to_string(line_number) + ": ";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(where + "malformed JSON (" + e.what() + ")");
  }
  RawDialog d;
  try {
    d.utterances = j.at("utterances").get<std::vector<std::string>>();
    d.question = j.at("question").get<std::string>();
    d.answer_token_indices = j.at("answer_token_indices").get<std::vector<std::size_t>>();
    d.response = j.at("response").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + "missing or mistyped field (" + e.what() + ")");
  }
  return d;
}

std::vector<RawDialog> read_raw_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus " + path.string());
  std::vector<RawDialog> out;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_jsonl_line(line, line_number));
  }
  return out;
}

void write_raw_corpus(const std::filesystem::path& path, const std::vector<RawDialog>& corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write corpus " + path.string());
  for (const auto& d : corpus) out << to_jsonl_line(d) << '\n';
}

std::vector<std::vector<std::string>> token_streams(const std::vector<RawDialog>& corpus, bool char_level) {
  std::vector<std::vector<std::string>> streams;
  for (const auto& d : corpus) {
    for (const auto& u : d.utterances) streams.push_back(tokenize(u, char_level));
    streams.push_back(tokenize(d.question, char_level));
    streams.push_back(tokenize(d.response, char_level));
  }
  return streams;
}

Vocabulary build_vocab(const std::vector<RawDialog>& corpus, bool char_level, std::size_t max_size) {
  if (corpus.empty()) throw std::invalid_argument("cannot build a vocabulary from an empty corpus");
  return Vocabulary::build(token_streams(corpus, char_level), max_size);
}

// ---- preprocessing ---------------------------------------------------------

DialogExample truncate(const DialogExample& ex, const Layout& layout) {
  DialogExample out;
  out.raw = ex.raw;
  const std::size_t first = ex.utterances.size() > layout.max_utterances
                                ? ex.utterances.size() - layout.max_utterances
                                : 0;
  std::size_t offset = 0;
  for (std::size_t j = 0; j < ex.utterances.size(); ++j) {
    const auto& u = ex.utterances[j];
    if (j >= first) {
      const auto keep = std::min(u.size(), layout.max_utterance_len);
      out.utterances.emplace_back(u.begin(), u.begin() + static_cast<std::ptrdiff_t>(keep));
      for (std::size_t i = 0; i < keep; ++i) out.answer_mask.push_back(ex.answer_mask.at(offset + i));
    }
    offset += u.size();
  }
  out.question.assign(ex.question.begin(),
                      ex.question.begin() + static_cast<std::ptrdiff_t>(std::min(ex.question.size(), layout.max_question_len)));
  const auto resp = std::min(ex.response.size(), layout.max_response_len - 1);
  out.response.assign(ex.response.begin(), ex.response.begin() + static_cast<std::ptrdiff_t>(resp));
  const auto resp_tokens = std::min(ex.response_tokens.size(), resp);
  out.response_tokens.assign(ex.response_tokens.begin(),
                             ex.response_tokens.begin() + static_cast<std::ptrdiff_t>(resp_tokens));
  return out;
}

DialogExample preprocess(const RawDialog& raw, const Vocabulary& vocab, const Layout& layout, bool char_level) {
  if (raw.utterances.empty()) throw DataError("record has no utterances");
  DialogExample ex;
  ex.raw = raw;
  for (const auto& u : raw.utterances) {
    auto tokens = tokenize(u, char_level);
    if (tokens.empty()) throw DataError("record has an empty utterance");
    ex.utterances.push_back(vocab.encode(tokens));
  }
  ex.question = vocab.encode(tokenize(raw.question, char_level));
  if (ex.question.empty()) throw DataError("record has an empty question");
  ex.response_tokens = tokenize(raw.response, char_level);
  ex.response = vocab.encode(ex.response_tokens);
  ex.answer_mask.assign(ex.context_tokens(), 0);
  for (auto idx : raw.answer_token_indices) {
    if (idx >= ex.answer_mask.size()) {
      throw DataError("answer index " + std::to_string(idx) + " outside a context of " +
                      std::to_string(ex.answer_mask.size()) + " tokens");
    }
    ex.answer_mask[idx] = 1;
  }
  return truncate(ex, layout);
}

std::vector<DialogExample> load_corpus(const std::filesystem::path& path, const Vocabulary& vocab,
                                       const Layout& layout, bool char_level) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus " + path.string());
  std::vector<DialogExample> out;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto raw = parse_jsonl_line(line, line_number);
    try {
      out.push_back(preprocess(raw, vocab, layout, char_level));
    } catch (const DataError& e) {
      throw DataError("line " + std::to_string(line_number) + ": " + e.what());
    }
  }
  return out;
}

PaddedContext pad(const DialogExample& ex, const Layout& layout) {
  if (ex.utterances.empty() || ex.utterances.size() > layout.max_utterances) {
    throw DataError("example has " + std::to_string(ex.utterances.size()) + " utterances; layout allows 1.." +
                    std::to_string(layout.max_utterances));
  }
  const auto U = layout.max_utterances, L = layout.max_utterance_len;
  PaddedContext p;
  p.ids.assign(U * L, Vocabulary::kPad);
  p.token_mask.assign(U * L, 0);
  p.answer_target.assign(U * L, 0);
  p.utterance_mask.assign(U, 0);
  p.utterance_token_masks.assign(U, Mask(L, 0));
  std::size_t flat = 0;
  for (std::size_t j = 0; j < ex.utterances.size(); ++j) {
    const auto& u = ex.utterances[j];
    if (u.empty() || u.size() > L) throw DataError("utterance length outside 1.." + std::to_string(L));
    p.utterance_mask[j] = 1;
    for (std::size_t i = 0; i < u.size(); ++i) {
      p.ids[j * L + i] = u[i];
      p.token_mask[j * L + i] = 1;
      p.utterance_token_masks[j][i] = 1;
      p.answer_target[j * L + i] = ex.answer_mask.at(flat++);
    }
  }
  return p;
}

}  // namespace mrg
