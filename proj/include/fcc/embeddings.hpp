#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "fcc/data.hpp"

namespace fcc {

// Vocabulary-indexed word vectors; row 0 (PAD) is always zero.
struct EmbeddingTable {
  std::size_t vocab_size = 0;
  std::size_t dim = 0;
  std::vector<double> values;  // row-major [vocab_size, dim]
  bool trainable = true;

  std::span<const double> row(std::size_t id) const { return {values.data() + id * dim, dim}; }
  std::span<double> row(std::size_t id) { return {values.data() + id * dim, dim}; }
};

// uniform(-1/sqrt(dim), 1/sqrt(dim)) with a zero PAD row.
EmbeddingTable random_embeddings(std::size_t vocab_size, std::size_t dim, std::uint64_t seed);

struct SkipGramOptions {
  std::size_t dim = 200;
  std::size_t window = 5;
  std::size_t negatives = 5;
  std::size_t epochs = 5;
  double learning_rate = 0.025;
  std::uint64_t seed = 1;
};

// Skip-gram with negative sampling (unigram^0.75 noise, linearly decaying
// learning rate) starting from random_embeddings(vocab_size, dim, seed).
EmbeddingTable pretrain_skipgram(const std::vector<IdSeq>& corpus, std::size_t vocab_size,
                                 const SkipGramOptions& options);

// Every non-empty context turn, candidate and provenance as its own sentence.
std::vector<IdSeq> skipgram_corpus(const std::vector<RankingList>& lists);

double cosine_similarity(const EmbeddingTable& table, std::size_t a, std::size_t b);

// Word-vector text format: "<vocab_size> <dim>" header, then "token v1 ... vdim".
void save_embeddings(const std::filesystem::path& path, const EmbeddingTable& table, const Vocabulary& vocab);

// Reads a word-vector file and aligns it to `vocab`. Tokens missing from the
// file keep a random_embeddings(seed) row; tokens absent from `vocab` are skipped.
struct LoadedEmbeddings {
  EmbeddingTable table;
  std::size_t matched = 0;
};
LoadedEmbeddings load_embeddings(const std::filesystem::path& path, const Vocabulary& vocab, std::uint64_t seed);

}  // namespace fcc
