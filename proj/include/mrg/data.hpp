#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mrg/tensor.hpp"

namespace mrg {

using TokenId = std::size_t;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Truncation/padding geometry shared by the data layer and the model.
struct Layout {
  std::size_t max_utterances = 5;
  std::size_t max_utterance_len = 20;
  std::size_t max_question_len = 20;
  /// Decoder steps including the terminating eos, so stored responses keep
  /// at most max_response_len - 1 tokens.
  std::size_t max_response_len = 20;

  std::size_t context_capacity() const { return max_utterances * max_utterance_len; }
};

/// One corpus record as stored on disk.
struct RawDialog {
  std::vector<std::string> utterances;
  std::string question;
  /// Indices into the whitespace/char tokenization of all utterances, flattened in order.
  std::vector<std::size_t> answer_token_indices;
  std::string response;

  bool operator==(const RawDialog&) const = default;
};

struct DialogExample {
  std::vector<std::vector<TokenId>> utterances;
  std::vector<TokenId> question;
  /// One entry per real context token, aligned with the flattened utterances.
  Mask answer_mask;
  std::vector<TokenId> response;
  /// Token strings of the (truncated) response, used as the metric reference.
  std::vector<std::string> response_tokens;
  RawDialog raw;

  std::size_t context_tokens() const;
};

/// Fixed-shape view of one example: utterance slots × tokens, padded with kPad.
struct PaddedContext {
  std::vector<TokenId> ids;            // max_utterances * max_utterance_len
  Mask token_mask;                     // same length
  Mask utterance_mask;                 // max_utterances
  std::vector<Mask> utterance_token_masks;
  std::vector<std::uint8_t> answer_target;  // same length as ids
};

std::vector<std::string> tokenize(std::string_view text, bool char_level);

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kSos = 2;
  static constexpr TokenId kEos = 3;
  static constexpr std::size_t kReserved = 4;
  static constexpr std::size_t kDefaultMaxSize = 50000;

  Vocabulary();

  /// Frequency-ranked, ties broken lexicographically, capped at max_size
  /// entries including the reserved ones.
  static Vocabulary build(const std::vector<std::vector<std::string>>& token_streams,
                          std::size_t max_size = kDefaultMaxSize);
  static Vocabulary load(const std::filesystem::path& path);
  /// Inverse of tokens(): the full id-ordered list, reserved tokens first.
  static Vocabulary from_tokens(const std::vector<std::string>& tokens);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  bool contains(std::string_view token) const;
  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const;
  std::vector<TokenId> encode(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode(const std::vector<TokenId>& ids, bool strip_special = true) const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void append(std::string token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

std::vector<RawDialog> read_raw_corpus(const std::filesystem::path& path);
void write_raw_corpus(const std::filesystem::path& path, const std::vector<RawDialog>& corpus);
std::string to_jsonl_line(const RawDialog& dialog);
RawDialog parse_jsonl_line(std::string_view line, std::size_t line_number);

/// Tokens of every utterance, question and response, for vocabulary building.
std::vector<std::vector<std::string>> token_streams(const std::vector<RawDialog>& corpus, bool char_level);
Vocabulary build_vocab(const std::vector<RawDialog>& corpus, bool char_level,
                       std::size_t max_size = Vocabulary::kDefaultMaxSize);

/// Keeps the most recent max_utterances utterances and the first
/// max_utterance_len tokens of each; answer labels on dropped tokens vanish.
DialogExample truncate(const DialogExample& example, const Layout& layout);
DialogExample preprocess(const RawDialog& raw, const Vocabulary& vocab, const Layout& layout, bool char_level);
std::vector<DialogExample> load_corpus(const std::filesystem::path& path, const Vocabulary& vocab,
                                       const Layout& layout, bool char_level);
PaddedContext pad(const DialogExample& example, const Layout& layout);

}  // namespace mrg
