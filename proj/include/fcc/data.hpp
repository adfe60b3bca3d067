#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace fcc {

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kUnkId = 1;
inline constexpr std::size_t kCandidatesPerList = 10;
inline constexpr std::string_view kTurnSeparator = "__EOT__";

using TokenSeq = std::vector<std::string>;
using IdSeq = std::vector<std::int32_t>;

// Truncation limits applied at load time and padding extents used by batches.
struct TextLimits {
  std::size_t max_turns = 10;
  std::size_t max_len_utterance = 90;
  std::size_t max_len_candidate = 90;
  std::size_t max_len_provenance = 30;

  void validate() const;
  bool operator==(const TextLimits&) const = default;
};

// Lowercases ASCII and splits on whitespace and ASCII punctuation.
TokenSeq tokenize(std::string_view text);

// A ranking list as tokens: shared context (oldest turn first), ten
// candidates with their provenance, one positive.
struct TextRankingList {
  std::vector<TokenSeq> context;
  std::vector<TokenSeq> candidates;
  std::vector<TokenSeq> provenances;
  std::size_t positive = 0;
  std::size_t first_line = 0;  // 1-based source line, 0 when generated

  void validate() const;
};

// Parses canonical TSV rows:
//   label \t turn_1 __EOT__ turn_2 ... \t candidate \t provenance
// ten consecutive rows per list. Keeps the latest max_turns turns and the
// leading tokens of every text.
std::vector<TextRankingList> parse_ranking_lists(std::istream& in, const TextLimits& limits,
                                                 const std::string& source = "<stream>");
std::vector<TextRankingList> load_ranking_lists(const std::filesystem::path& path, const TextLimits& limits);

// Inverse of parse_ranking_lists for already tokenized lists.
void write_ranking_lists(std::ostream& out, const std::vector<TextRankingList>& lists);
void save_ranking_lists(const std::filesystem::path& path, const std::vector<TextRankingList>& lists);

class Vocabulary {
 public:
  static constexpr std::string_view kPadToken = "<pad>";
  static constexpr std::string_view kUnkToken = "<unk>";

  Vocabulary();

  // Tokens with count >= min_count, by descending count then lexicographically.
  static Vocabulary build(const std::vector<TextRankingList>& lists, std::size_t min_count = 1);
  // Restores a vocabulary from its id-ordered token list (reserved entries included).
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  std::int32_t id(std::string_view token) const;
  const std::string& token(std::int32_t id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  IdSeq encode(const TokenSeq& tokens) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> ids_;
};

// One (context, candidate, provenance, label) ranking instance.
struct DialogueExample {
  std::vector<IdSeq> context;
  IdSeq candidate;
  IdSeq provenance;
  int label = 0;
};

struct RankingList {
  std::vector<IdSeq> context;
  std::vector<IdSeq> candidates;
  std::vector<IdSeq> provenances;
  std::size_t positive = 0;

  std::size_t history_length() const { return context.size(); }
  DialogueExample example(std::size_t candidate) const;
  void validate() const;
};

RankingList encode_list(const TextRankingList& list, const Vocabulary& vocab);
std::vector<RankingList> encode_lists(const std::vector<TextRankingList>& lists, const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// Padding and batching

// Fixed-length id sequence; mask is true on real tokens, which form a prefix.
struct PaddedText {
  IdSeq ids;
  std::vector<bool> mask;

  std::size_t length() const;
};

struct PaddedContext {
  std::vector<PaddedText> turns;
  std::vector<bool> turn_mask;
};

struct PaddedList {
  PaddedContext context;
  std::vector<PaddedText> candidates;
  std::vector<PaddedText> provenances;
  std::size_t positive = 0;
  std::size_t history_length = 0;
};

PaddedText pad_text(const IdSeq& ids, std::size_t length);
PaddedContext pad_context(const std::vector<IdSeq>& turns, const TextLimits& limits);
PaddedList pad_list(const RankingList& list, const TextLimits& limits);

// (positive, negative) candidate indices within one list of a batch.
struct TrainingPair {
  std::size_t list = 0;  // index into Batch::lists
  std::size_t positive = 0;
  std::size_t negative = 0;
};

struct Batch {
  std::vector<std::size_t> source_lists;  // indices into the input list vector
  std::vector<PaddedList> lists;
  std::vector<TrainingPair> pairs;
};

// Shuffles lists with `seed`, expands each into its nine pairs and cuts the
// pair stream into batches of `batch_size` pairs.
std::vector<Batch> make_batches(const std::vector<RankingList>& lists, std::size_t batch_size, std::uint64_t seed,
                                const TextLimits& limits);

// ---------------------------------------------------------------------------
// Synthetic corpora

enum class SignalMode { kHistory, kProvenance, kBoth };

SignalMode parse_signal_mode(std::string_view name);
std::string_view signal_mode_name(SignalMode mode);

struct SyntheticOptions {
  std::size_t num_lists = 100;
  SignalMode mode = SignalMode::kProvenance;
  std::uint64_t seed = 1;
  std::size_t min_turns = 2;
  std::size_t max_turns = 4;
  std::size_t utterance_length = 6;
  std::size_t candidate_length = 6;
  std::size_t provenance_length = 3;
  std::size_t num_keywords = 40;
  std::size_t num_fillers = 100;

  void validate() const;
};

// Templated dialogues whose only ranking signal is a keyword shared between
// the context and the true candidate's text, provenance, or both.
std::vector<TextRankingList> generate_synthetic(const SyntheticOptions& options);

// The keyword a synthetic context is built around (tokens start with "kw").
bool is_synthetic_keyword(std::string_view token);

}  // namespace fcc
