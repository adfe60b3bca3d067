#include "fcc/embeddings.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "fcc/errors.hpp"
#include "fcc/random.hpp"

namespace fcc {

EmbeddingTable random_embeddings(std::size_t vocab_size, std::size_t dim, std::uint64_t seed) {
  if (dim == 0) throw ConfigError("embedding dim must be positive");
  if (vocab_size < 2) throw ConfigError("embedding table needs the reserved PAD and UNK rows");
  EmbeddingTable table{vocab_size, dim, std::vector<double>(vocab_size * dim, 0.0), true};
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  for (std::size_t i = dim; i < table.values.size(); ++i) table.values[i] = rng.uniform(-bound, bound);
  return table;
}

namespace {

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

EmbeddingTable pretrain_skipgram(const std::vector<IdSeq>& corpus, std::size_t vocab_size,
                                 const SkipGramOptions& options) {
  if (options.dim == 0) throw ConfigError("skip-gram dim must be positive");
  if (options.window == 0) throw ConfigError("skip-gram window must be positive");
  EmbeddingTable input = random_embeddings(vocab_size, options.dim, options.seed);
  if (options.epochs == 0) return input;

  std::vector<double> counts(vocab_size, 0.0);
  std::size_t total = 0;
  for (const auto& sentence : corpus) {
    for (auto id : sentence) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
        throw DataError("skip-gram corpus id " + std::to_string(id) + " outside vocabulary");
      }
      if (id == kPadId) continue;
      counts[static_cast<std::size_t>(id)] += 1.0;
      ++total;
    }
  }
  if (total == 0) return input;

  // Cumulative unigram^0.75 noise distribution sampled by binary search.
  std::vector<double> cumulative(vocab_size, 0.0);
  double acc = 0.0;
  for (std::size_t i = 0; i < vocab_size; ++i) {
    acc += counts[i] > 0 ? std::pow(counts[i], 0.75) : 0.0;
    cumulative[i] = acc;
  }
  Rng rng(options.seed ^ 0x9e3779b97f4a7c15ULL);
  auto sample_noise = [&]() -> std::size_t {
    const double u = rng.uniform() * acc;
    return static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
  };

  const std::size_t dim = options.dim;
  std::vector<double> output(vocab_size * dim, 0.0);
  std::vector<double> update(dim);
  const double schedule = static_cast<double>(options.epochs * total);
  std::size_t processed = 0;

  auto train_pair = [&](std::size_t center, std::size_t target, double lr) {
    double* u = input.values.data() + center * dim;
    std::fill(update.begin(), update.end(), 0.0);
    for (std::size_t n = 0; n <= options.negatives; ++n) {
      std::size_t word = target;
      double label = 1.0;
      if (n > 0) {
        word = sample_noise();
        if (word == target || word >= vocab_size) continue;
        label = 0.0;
      }
      double* v = output.data() + word * dim;
      double dot = 0.0;
      for (std::size_t d = 0; d < dim; ++d) dot += u[d] * v[d];
      const double g = (label - sigmoid(dot)) * lr;
      for (std::size_t d = 0; d < dim; ++d) {
        update[d] += g * v[d];
        v[d] += g * u[d];
      }
    }
    for (std::size_t d = 0; d < dim; ++d) u[d] += update[d];
  };

  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    for (const auto& sentence : corpus) {
      for (std::size_t i = 0; i < sentence.size(); ++i) {
        if (sentence[i] == kPadId) continue;
        const double lr = options.learning_rate * std::max(1e-4, 1.0 - static_cast<double>(processed) / schedule);
        ++processed;
        const std::size_t reach = 1 + rng.below(options.window);
        const std::size_t lo = i >= reach ? i - reach : 0;
        const std::size_t hi = std::min(sentence.size(), i + reach + 1);
        for (std::size_t j = lo; j < hi; ++j) {
          if (j == i || sentence[j] == kPadId) continue;
          train_pair(static_cast<std::size_t>(sentence[i]), static_cast<std::size_t>(sentence[j]), lr);
        }
      }
    }
  }
  std::fill(input.values.begin(), input.values.begin() + static_cast<std::ptrdiff_t>(dim), 0.0);
  return input;
}

std::vector<IdSeq> skipgram_corpus(const std::vector<RankingList>& lists) {
  std::vector<IdSeq> corpus;
  auto add = [&](const IdSeq& s) {
    if (!s.empty()) corpus.push_back(s);
  };
  for (const auto& list : lists) {
    for (const auto& turn : list.context) add(turn);
    for (const auto& c : list.candidates) add(c);
    for (const auto& p : list.provenances) add(p);
  }
  return corpus;
}

double cosine_similarity(const EmbeddingTable& table, std::size_t a, std::size_t b) {
  auto x = table.row(a), y = table.row(b);
  double dot = 0.0, nx = 0.0, ny = 0.0;
  for (std::size_t d = 0; d < table.dim; ++d) {
    dot += x[d] * y[d];
    nx += x[d] * x[d];
    ny += y[d] * y[d];
  }
  if (nx == 0.0 || ny == 0.0) return 0.0;
  return dot / std::sqrt(nx * ny);
}

void save_embeddings(const std::filesystem::path& path, const EmbeddingTable& table, const Vocabulary& vocab) {
  if (vocab.size() != table.vocab_size) {
    throw DataError("embedding table has " + std::to_string(table.vocab_size) + " rows but the vocabulary has " +
                    std::to_string(vocab.size()) + " tokens");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write embedding file " + path.string());
  out << table.vocab_size << ' ' << table.dim << '\n';
  char buf[32];
  for (std::size_t i = 0; i < table.vocab_size; ++i) {
    out << vocab.token(static_cast<std::int32_t>(i));
    for (double v : table.row(i)) {
      std::snprintf(buf, sizeof buf, " %.17g", v);
      out << buf;
    }
    out << '\n';
  }
}

LoadedEmbeddings load_embeddings(const std::filesystem::path& path, const Vocabulary& vocab, std::uint64_t seed) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open embedding file " + path.string());
  std::string line;
  std::size_t rows = 0, dim = 0;
  if (!std::getline(in, line) || !(std::istringstream(line) >> rows >> dim) || dim == 0) {
    throw DataError(path.string() + ": line 1: expected '<vocab_size> <dim>' header");
  }
  LoadedEmbeddings loaded{random_embeddings(vocab.size(), dim, seed), 0};
  std::vector<bool> seen(vocab.size(), false);
  std::size_t line_no = 1;
  std::vector<double> values(dim);
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string token;
    row >> token;
    for (std::size_t d = 0; d < dim; ++d) {
      if (!(row >> values[d]) || !std::isfinite(values[d])) {
        throw DataError(path.string() + ": line " + std::to_string(line_no) + ": expected " + std::to_string(dim) +
                        " finite values for '" + token + "'");
      }
    }
    const auto id = vocab.id(token);
    if (id == kUnkId && token != Vocabulary::kUnkToken) continue;
    if (id == kPadId || seen[static_cast<std::size_t>(id)]) continue;
    seen[static_cast<std::size_t>(id)] = true;
    std::copy(values.begin(), values.end(), loaded.table.row(static_cast<std::size_t>(id)).begin());
    ++loaded.matched;
  }
  return loaded;
}

}  // namespace fcc
