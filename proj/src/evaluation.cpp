#include "fcc/evaluation.hpp"

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "fcc/errors.hpp"

namespace fcc {

void ScoredList::validate() const {
  if (scores.empty()) throw ContractError("scored list " + std::to_string(list_id) + " has no scores");
  if (true_index >= scores.size()) {
    throw ContractError("scored list " + std::to_string(list_id) + ": true index " + std::to_string(true_index) +
                        " out of range");
  }
}

std::size_t rank_of_true(const std::vector<double>& scores, std::size_t true_index) {
  if (true_index >= scores.size()) throw ContractError("rank_of_true: true index out of range");
  const double s = scores[true_index];
  std::size_t rank = 1;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (scores[j] > s || (j < true_index && scores[j] == s)) ++rank;
  }
  return rank;
}

double recall_at_k(const std::vector<ScoredList>& lists, std::size_t k) {
  if (k == 0) throw ContractError("recall_at_k: k must be positive");
  if (lists.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& l : lists) {
    l.validate();
    if (rank_of_true(l.scores, l.true_index) <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(lists.size());
}

double average_precision(const std::vector<double>& scores, const std::vector<bool>& relevant) {
  if (scores.size() != relevant.size()) throw ContractError("average_precision: size mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double total = 0.0;
  std::size_t found = 0;
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    if (relevant[order[pos]]) {
      ++found;
      total += static_cast<double>(found) / static_cast<double>(pos + 1);
    }
  }
  return found == 0 ? 0.0 : total / static_cast<double>(found);
}

double mean_average_precision(const std::vector<ScoredList>& lists) {
  if (lists.empty()) return 0.0;
  double total = 0.0;
  for (const auto& l : lists) {
    l.validate();
    std::vector<bool> relevant(l.scores.size(), false);
    relevant[l.true_index] = true;
    total += average_precision(l.scores, relevant);
  }
  return total / static_cast<double>(lists.size());
}

std::vector<LengthBucket> non_optimal_rate_by_length(const std::vector<ScoredList>& lists) {
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> buckets;  // length -> (non-optimal, count)
  for (const auto& l : lists) {
    l.validate();
    auto& b = buckets[l.history_length];
    if (rank_of_true(l.scores, l.true_index) > 1) ++b.first;
    ++b.second;
  }
  std::vector<LengthBucket> out;
  for (const auto& [length, b] : buckets) {
    out.push_back({length, static_cast<double>(b.first) / static_cast<double>(b.second), b.second});
  }
  return out;
}

MetricsReport compute_metrics(const std::vector<ScoredList>& lists) {
  MetricsReport r;
  r.num_lists = lists.size();
  r.r10_1 = recall_at_k(lists, 1);
  r.r10_2 = recall_at_k(lists, 2);
  r.r10_5 = recall_at_k(lists, 5);
  r.map = mean_average_precision(lists);
  r.buckets = non_optimal_rate_by_length(lists);
  return r;
}

std::vector<double> per_list_reciprocal_rank(const std::vector<ScoredList>& lists) {
  std::vector<double> out;
  for (const auto& l : lists) out.push_back(1.0 / static_cast<double>(rank_of_true(l.scores, l.true_index)));
  return out;
}

std::vector<double> per_list_top1(const std::vector<ScoredList>& lists) {
  std::vector<double> out;
  for (const auto& l : lists) out.push_back(rank_of_true(l.scores, l.true_index) == 1 ? 1.0 : 0.0);
  return out;
}

TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ContractError("paired_t_test: samples differ in length");
  if (a.size() < 2) throw ContractError("paired_t_test: need at least two pairs");
  const std::size_t n = a.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double x : d) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));

  TTestResult r;
  r.n = n;
  r.mean_difference = mean;
  if (std::all_of(d.begin(), d.end(), [](double x) { return x == 0.0; })) return r;
  // Spread at rounding level counts as zero variance.
  if (sd <= 1e-12 * std::abs(mean)) {
    r.t = mean > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    r.p = 0.0;
    return r;
  }
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  const boost::math::students_t dist(static_cast<double>(n - 1));
  r.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t))));
  return r;
}

// ---------------------------------------------------------------------------
// Report writers

std::string format_real(double value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", value);
  return buf;
}

void write_metrics_table(std::ostream& out, const std::string& name, const MetricsReport& r) {
  char line[160];
  std::snprintf(line, sizeof line, "%-16s %8s %8s %8s %8s %8s\n", "model", "lists", "R10@1", "R10@2", "R10@5", "MAP");
  out << line;
  std::snprintf(line, sizeof line, "%-16s %8zu %8.4f %8.4f %8.4f %8.4f\n", name.c_str(), r.num_lists, r.r10_1,
                r.r10_2, r.r10_5, r.map);
  out << line;
  if (!r.buckets.empty()) {
    out << "\nnon-optimal rate by history length\n";
    std::snprintf(line, sizeof line, "%8s %8s %8s\n", "length", "rate", "count");
    out << line;
    for (const auto& b : r.buckets) {
      std::snprintf(line, sizeof line, "%8zu %8.4f %8zu\n", b.length, b.rate, b.count);
      out << line;
    }
  }
}

void write_metrics_record(std::ostream& out, const std::string& name, const MetricsReport& r) {
  out << "name=" << name << " lists=" << r.num_lists << " r10_1=" << format_real(r.r10_1)
      << " r10_2=" << format_real(r.r10_2) << " r10_5=" << format_real(r.r10_5) << " map=" << format_real(r.map)
      << '\n';
  for (const auto& b : r.buckets) {
    out << "name=" << name << " bucket_length=" << b.length << " non_optimal_rate=" << format_real(b.rate)
        << " count=" << b.count << '\n';
  }
}

void write_non_optimal_csv(std::ostream& out, const std::vector<LengthBucket>& buckets) {
  out << "length,rate,count\n";
  for (const auto& b : buckets) out << b.length << ',' << format_real(b.rate) << ',' << b.count << '\n';
}

void write_scores(std::ostream& out, const std::vector<ScoredList>& lists) {
  char buf[32];
  for (const auto& l : lists) {
    out << l.list_id << '\t' << l.history_length << '\t' << l.true_index << '\t';
    for (std::size_t k = 0; k < l.scores.size(); ++k) {
      std::snprintf(buf, sizeof buf, "%.17g", l.scores[k]);
      out << (k ? "," : "") << buf;
    }
    out << '\n';
  }
}

std::vector<ScoredList> read_scores(std::istream& in, const std::string& source) {
  std::vector<ScoredList> lists;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fail = [&](const std::string& why) {
      return DataError(source + ": line " + std::to_string(line_no) + ": " + why);
    };
    std::istringstream row(line);
    ScoredList l;
    std::string scores;
    if (!(row >> l.list_id >> l.history_length >> l.true_index >> scores)) {
      throw fail("expected list_id, history_length, true_index and scores");
    }
    std::istringstream parts(scores);
    std::string item;
    while (std::getline(parts, item, ',')) {
      try {
        std::size_t used = 0;
        l.scores.push_back(std::stod(item, &used));
        if (used != item.size()) throw std::invalid_argument(item);
      } catch (const std::exception&) {
        throw fail("bad score '" + item + "'");
      }
    }
    if (l.true_index >= l.scores.size()) throw fail("true index out of range");
    lists.push_back(std::move(l));
  }
  return lists;
}

}  // namespace fcc
