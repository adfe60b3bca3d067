#include "fcc/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "fcc/errors.hpp"
#include "fcc/random.hpp"

namespace fcc {

void TextLimits::validate() const {
  if (max_turns == 0 || max_len_utterance == 0 || max_len_candidate == 0 || max_len_provenance == 0) {
    throw ConfigError("text limits must all be positive");
  }
}

TokenSeq tokenize(std::string_view text) {
  TokenSeq tokens;
  std::string current;
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    const bool ascii = c < 0x80;
    if (ascii && (std::isspace(c) || std::ispunct(c) || std::iscntrl(c))) {
      if (!current.empty()) tokens.push_back(std::move(current));
      current.clear();
      continue;
    }
    current.push_back(ascii ? static_cast<char>(std::tolower(c)) : raw);
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

void TextRankingList::validate() const {
  if (context.empty()) throw DataError("ranking list has an empty context");
  if (candidates.size() != kCandidatesPerList || provenances.size() != kCandidatesPerList) {
    throw DataError("ranking list needs exactly 10 candidates, got " + std::to_string(candidates.size()));
  }
  if (positive >= kCandidatesPerList) throw DataError("ranking list positive index out of range");
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return fields;
}

TokenSeq truncated(TokenSeq tokens, std::size_t limit) {
  if (tokens.size() > limit) tokens.resize(limit);
  return tokens;
}

std::vector<TokenSeq> split_context(const std::string& raw, std::size_t max_turns, std::size_t max_len) {
  std::vector<TokenSeq> turns;
  std::size_t start = 0;
  while (true) {
    const std::size_t sep = raw.find(kTurnSeparator, start);
    auto tokens = tokenize(std::string_view(raw).substr(start, sep == std::string::npos ? std::string::npos
                                                                                        : sep - start));
    if (!tokens.empty()) turns.push_back(truncated(std::move(tokens), max_len));
    if (sep == std::string::npos) break;
    start = sep + kTurnSeparator.size();
  }
  if (turns.size() > max_turns) turns.erase(turns.begin(), turns.end() - static_cast<std::ptrdiff_t>(max_turns));
  return turns;
}

struct RawRow {
  int label;
  std::string context, candidate, provenance;
  std::size_t line;
};

TextRankingList assemble(const std::vector<RawRow>& rows, std::size_t index, const TextLimits& limits,
                         const std::string& source) {
  const std::string where = source + ": list " + std::to_string(index) + " (line " + std::to_string(rows[0].line) + ")";
  TextRankingList list;
  list.first_line = rows[0].line;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].label == 1) {
      ++positives;
      list.positive = i;
    }
    list.candidates.push_back(truncated(tokenize(rows[i].candidate), limits.max_len_candidate));
    list.provenances.push_back(truncated(tokenize(rows[i].provenance), limits.max_len_provenance));
  }
  if (positives != 1) {
    throw DataError(where + ": expected exactly one positive, found " + std::to_string(positives));
  }
  list.context = split_context(rows[0].context, limits.max_turns, limits.max_len_utterance);
  if (list.context.empty()) throw DataError(where + ": empty context");
  return list;
}

}  // namespace

std::vector<TextRankingList> parse_ranking_lists(std::istream& in, const TextLimits& limits,
                                                 const std::string& source) {
  limits.validate();
  std::vector<TextRankingList> lists;
  std::vector<RawRow> pending;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    auto fields = split_tabs(line);
    if (fields.size() != 4) {
      throw DataError(source + ": line " + std::to_string(line_no) + ": expected 4 tab-separated fields, got " +
                      std::to_string(fields.size()));
    }
    if (fields[0] != "0" && fields[0] != "1") {
      throw DataError(source + ": line " + std::to_string(line_no) + ": label must be 0 or 1, got '" + fields[0] +
                      "'");
    }
    if (!pending.empty() && fields[1] != pending.front().context) {
      throw DataError(source + ": list " + std::to_string(lists.size()) + " (line " +
                      std::to_string(pending.front().line) + ") has " + std::to_string(pending.size()) +
                      " rows before its context changes at line " + std::to_string(line_no) +
                      "; every list needs exactly 10 rows");
    }
    pending.push_back(RawRow{fields[0] == "1" ? 1 : 0, std::move(fields[1]), std::move(fields[2]),
                             std::move(fields[3]), line_no});
    if (pending.size() == kCandidatesPerList) {
      lists.push_back(assemble(pending, lists.size(), limits, source));
      pending.clear();
    }
  }
  if (!pending.empty()) {
    throw DataError(source + ": list " + std::to_string(lists.size()) + " (line " +
                    std::to_string(pending.front().line) + ") has only " + std::to_string(pending.size()) +
                    " rows; every list needs exactly 10 rows");
  }
  return lists;
}

std::vector<TextRankingList> load_ranking_lists(const std::filesystem::path& path, const TextLimits& limits) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open ranking file " + path.string());
  return parse_ranking_lists(in, limits, path.string());
}

namespace {

std::string join(const TokenSeq& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

}  // namespace

void write_ranking_lists(std::ostream& out, const std::vector<TextRankingList>& lists) {
  for (const auto& list : lists) {
    list.validate();
    std::string context;
    for (std::size_t t = 0; t < list.context.size(); ++t) {
      if (t) context += " " + std::string(kTurnSeparator) + " ";
      context += join(list.context[t]);
    }
    for (std::size_t k = 0; k < kCandidatesPerList; ++k) {
      out << (k == list.positive ? '1' : '0') << '\t' << context << '\t' << join(list.candidates[k]) << '\t'
          << join(list.provenances[k]) << '\n';
    }
  }
}

void save_ranking_lists(const std::filesystem::path& path, const std::vector<TextRankingList>& lists) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write ranking file " + path.string());
  write_ranking_lists(out, lists);
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary()
    : tokens_{std::string(kPadToken), std::string(kUnkToken)}, ids_{{tokens_[0], kPadId}, {tokens_[1], kUnkId}} {}

Vocabulary Vocabulary::build(const std::vector<TextRankingList>& lists, std::size_t min_count) {
  std::map<std::string, std::size_t> counts;
  auto count = [&](const TokenSeq& seq) {
    for (const auto& t : seq) ++counts[t];
  };
  for (const auto& list : lists) {
    for (const auto& turn : list.context) count(turn);
    for (const auto& c : list.candidates) count(c);
    for (const auto& p : list.provenances) count(p);
  }
  if (counts.empty()) throw DataError("cannot build a vocabulary from an empty corpus");
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens{std::string(kPadToken), std::string(kUnkToken)};
  for (auto& [token, n] : ranked) {
    if (n >= min_count && token != kPadToken && token != kUnkToken) tokens.push_back(token);
  }
  return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < 2 || tokens[0] != kPadToken || tokens[1] != kUnkToken) {
    throw DataError("vocabulary must start with the reserved <pad> and <unk> entries");
  }
  Vocabulary v;
  v.tokens_.clear();
  v.ids_.clear();
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (!v.ids_.emplace(tokens[i], static_cast<std::int32_t>(i)).second) {
      throw DataError("duplicate vocabulary token '" + tokens[i] + "'");
    }
  }
  v.tokens_ = std::move(tokens);
  return v;
}

std::int32_t Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DataError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

IdSeq Vocabulary::encode(const TokenSeq& tokens) const {
  IdSeq ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

// ---------------------------------------------------------------------------
// Encoded lists

DialogueExample RankingList::example(std::size_t candidate) const {
  if (candidate >= candidates.size()) throw DataError("candidate index out of range");
  return DialogueExample{context, candidates[candidate], provenances[candidate], candidate == positive ? 1 : 0};
}

void RankingList::validate() const {
  if (context.empty()) throw DataError("ranking list has an empty context");
  if (candidates.size() != kCandidatesPerList || provenances.size() != kCandidatesPerList) {
    throw DataError("ranking list needs exactly 10 candidates, got " + std::to_string(candidates.size()));
  }
  if (positive >= kCandidatesPerList) throw DataError("ranking list positive index out of range");
}

RankingList encode_list(const TextRankingList& list, const Vocabulary& vocab) {
  list.validate();
  RankingList out;
  for (const auto& turn : list.context) out.context.push_back(vocab.encode(turn));
  for (const auto& c : list.candidates) out.candidates.push_back(vocab.encode(c));
  for (const auto& p : list.provenances) out.provenances.push_back(vocab.encode(p));
  out.positive = list.positive;
  return out;
}

std::vector<RankingList> encode_lists(const std::vector<TextRankingList>& lists, const Vocabulary& vocab) {
  std::vector<RankingList> out;
  out.reserve(lists.size());
  for (const auto& l : lists) out.push_back(encode_list(l, vocab));
  return out;
}

// ---------------------------------------------------------------------------
// Padding and batches

std::size_t PaddedText::length() const {
  std::size_t n = 0;
  while (n < mask.size() && mask[n]) ++n;
  return n;
}

PaddedText pad_text(const IdSeq& ids, std::size_t length) {
  PaddedText out;
  out.ids.assign(length, kPadId);
  out.mask.assign(length, false);
  const std::size_t n = std::min(length, ids.size());
  for (std::size_t i = 0; i < n; ++i) {
    out.ids[i] = ids[i];
    out.mask[i] = ids[i] != kPadId;
  }
  return out;
}

PaddedContext pad_context(const std::vector<IdSeq>& turns, const TextLimits& limits) {
  PaddedContext out;
  const std::size_t skip = turns.size() > limits.max_turns ? turns.size() - limits.max_turns : 0;
  for (std::size_t t = skip; t < turns.size(); ++t) {
    out.turns.push_back(pad_text(turns[t], limits.max_len_utterance));
    out.turn_mask.push_back(out.turns.back().length() > 0);
  }
  while (out.turns.size() < limits.max_turns) {
    out.turns.push_back(pad_text({}, limits.max_len_utterance));
    out.turn_mask.push_back(false);
  }
  return out;
}

PaddedList pad_list(const RankingList& list, const TextLimits& limits) {
  list.validate();
  PaddedList out;
  out.context = pad_context(list.context, limits);
  for (const auto& c : list.candidates) out.candidates.push_back(pad_text(c, limits.max_len_candidate));
  for (const auto& p : list.provenances) out.provenances.push_back(pad_text(p, limits.max_len_provenance));
  out.positive = list.positive;
  out.history_length = std::min(list.context.size(), limits.max_turns);
  return out;
}

std::vector<Batch> make_batches(const std::vector<RankingList>& lists, std::size_t batch_size, std::uint64_t seed,
                                const TextLimits& limits) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  std::vector<std::size_t> order(lists.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  std::vector<Batch> batches;
  Batch current;
  auto flush = [&] {
    if (!current.pairs.empty()) batches.push_back(std::move(current));
    current = Batch{};
  };
  for (std::size_t source : order) {
    const auto& list = lists[source];
    for (std::size_t neg = 0; neg < kCandidatesPerList; ++neg) {
      if (neg == list.positive) continue;
      if (current.source_lists.empty() || current.source_lists.back() != source) {
        current.source_lists.push_back(source);
        current.lists.push_back(pad_list(list, limits));
      }
      current.pairs.push_back(TrainingPair{current.lists.size() - 1, list.positive, neg});
      if (current.pairs.size() == batch_size) flush();
    }
  }
  flush();
  return batches;
}

// ---------------------------------------------------------------------------
// Synthetic corpora

SignalMode parse_signal_mode(std::string_view name) {
  if (name == "history") return SignalMode::kHistory;
  if (name == "provenance") return SignalMode::kProvenance;
  if (name == "both") return SignalMode::kBoth;
  throw ConfigError("unknown signal mode '" + std::string(name) + "' (expected history, provenance or both)");
}

std::string_view signal_mode_name(SignalMode mode) {
  switch (mode) {
    case SignalMode::kHistory: return "history";
    case SignalMode::kProvenance: return "provenance";
    case SignalMode::kBoth: return "both";
  }
  return "?";
}

void SyntheticOptions::validate() const {
  if (num_lists == 0) throw ConfigError("synthetic corpus needs at least one list");
  if (min_turns == 0 || min_turns > max_turns) throw ConfigError("synthetic turns: need 0 < min_turns <= max_turns");
  if (utterance_length == 0 || candidate_length == 0 || provenance_length == 0) {
    throw ConfigError("synthetic text lengths must be positive");
  }
  if (num_keywords < kCandidatesPerList + 3) throw ConfigError("synthetic corpus needs at least 13 keywords");
  if (num_fillers == 0) throw ConfigError("synthetic corpus needs filler words");
}

bool is_synthetic_keyword(std::string_view token) { return token.size() > 2 && token.substr(0, 2) == "kw"; }

namespace {

std::string keyword(std::size_t i) { return "kw" + std::to_string(i); }

TokenSeq filler_text(Rng& rng, std::size_t length, std::size_t vocab, const char* prefix) {
  TokenSeq out;
  for (std::size_t i = 0; i < length; ++i) out.push_back(prefix + std::to_string(rng.below(vocab)));
  return out;
}

// Replaces a random filler token; earlier keywords are never overwritten.
void plant(Rng& rng, TokenSeq& text, const std::string& word) {
  std::vector<std::size_t> free;
  for (std::size_t i = 0; i < text.size(); ++i)
    if (!is_synthetic_keyword(text[i])) free.push_back(i);
  if (free.empty()) {
    text.push_back(word);
    return;
  }
  text[free[rng.below(free.size())]] = word;
}

}  // namespace

std::vector<TextRankingList> generate_synthetic(const SyntheticOptions& options) {
  options.validate();
  Rng rng(options.seed);
  std::vector<TextRankingList> lists;
  lists.reserve(options.num_lists);
  for (std::size_t n = 0; n < options.num_lists; ++n) {
    // Context keywords: the target plus, in 'both' mode, two distractors
    // that each match exactly one channel of one negative.
    std::vector<std::size_t> pool(options.num_keywords);
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
    rng.shuffle(pool);
    const std::size_t used = options.mode == SignalMode::kBoth ? 3 : 1;
    const std::string target = keyword(pool[0]);
    const std::string text_distractor = keyword(pool[1]);
    const std::string provenance_distractor = keyword(pool[2]);
    auto outside = [&] { return keyword(pool[used + rng.below(pool.size() - used)]); };

    TextRankingList list;
    const std::size_t turns = options.min_turns + rng.below(options.max_turns - options.min_turns + 1);
    for (std::size_t t = 0; t < turns; ++t) list.context.push_back(filler_text(rng, options.utterance_length,
                                                                               options.num_fillers, "w"));
    for (std::size_t k = 0; k < used; ++k) plant(rng, list.context[rng.below(turns)], keyword(pool[k]));

    list.positive = rng.below(kCandidatesPerList);
    std::size_t text_slot = (list.positive + 1 + rng.below(kCandidatesPerList - 1)) % kCandidatesPerList;
    std::size_t provenance_slot = text_slot;
    while (provenance_slot == text_slot || provenance_slot == list.positive) {
      provenance_slot = rng.below(kCandidatesPerList);
    }
    for (std::size_t k = 0; k < kCandidatesPerList; ++k) {
      auto text = filler_text(rng, options.candidate_length, options.num_fillers, "w");
      auto title = filler_text(rng, options.provenance_length, options.num_fillers, "t");
      const bool pos = k == list.positive;
      switch (options.mode) {
        case SignalMode::kProvenance:
          plant(rng, text, outside());
          plant(rng, title, pos ? target : outside());
          break;
        case SignalMode::kHistory:
          plant(rng, text, pos ? target : outside());
          plant(rng, title, outside());
          break;
        case SignalMode::kBoth:
          plant(rng, text, pos ? target : k == text_slot ? text_distractor : outside());
          plant(rng, title, pos ? target : k == provenance_slot ? provenance_distractor : outside());
          break;
      }
      list.candidates.push_back(std::move(text));
      list.provenances.push_back(std::move(title));
    }
    lists.push_back(std::move(list));
  }
  return lists;
}

}  // namespace fcc
