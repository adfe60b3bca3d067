#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

namespace fcc {

struct ScoredList {
  std::size_t list_id = 0;
  std::size_t history_length = 0;  // context turns fed to the model
  std::vector<double> scores;
  std::size_t true_index = 0;

  void validate() const;
};

// 1-based rank of the true response under descending score; it loses ties to
// earlier-indexed candidates and wins ties against later ones.
std::size_t rank_of_true(const std::vector<double>& scores, std::size_t true_index);

double recall_at_k(const std::vector<ScoredList>& lists, std::size_t k);

// Average precision of one ranking given relevance flags in candidate order.
double average_precision(const std::vector<double>& scores, const std::vector<bool>& relevant);

// Mean AP over single-relevant lists (equals the mean reciprocal rank).
double mean_average_precision(const std::vector<ScoredList>& lists);

struct LengthBucket {
  std::size_t length = 0;
  double rate = 0.0;  // fraction of lists whose true response is not ranked first
  std::size_t count = 0;
};

// Ascending by length; empty buckets are omitted.
std::vector<LengthBucket> non_optimal_rate_by_length(const std::vector<ScoredList>& lists);

struct MetricsReport {
  std::size_t num_lists = 0;
  double r10_1 = 0.0, r10_2 = 0.0, r10_5 = 0.0, map = 0.0;
  std::vector<LengthBucket> buckets;
};

MetricsReport compute_metrics(const std::vector<ScoredList>& lists);

// Per-list values used for significance tests.
std::vector<double> per_list_reciprocal_rank(const std::vector<ScoredList>& lists);
std::vector<double> per_list_top1(const std::vector<ScoredList>& lists);

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  std::size_t n = 0;
  double mean_difference = 0.0;
};

// Paired two-sided Student's t-test on a - b.
TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

// ---------------------------------------------------------------------------
// Report writers

void write_metrics_table(std::ostream& out, const std::string& name, const MetricsReport& report);
// One line: "name=... lists=... r10_1=... r10_2=... r10_5=... map=..."
void write_metrics_record(std::ostream& out, const std::string& name, const MetricsReport& report);
// "length,rate,count" CSV.
void write_non_optimal_csv(std::ostream& out, const std::vector<LengthBucket>& buckets);
// "list_id<TAB>history_length<TAB>true_index<TAB>s0,...,s9"
void write_scores(std::ostream& out, const std::vector<ScoredList>& lists);
std::vector<ScoredList> read_scores(std::istream& in, const std::string& source = "<stream>");

std::string format_real(double value);

}  // namespace fcc
