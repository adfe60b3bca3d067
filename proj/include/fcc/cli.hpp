#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "fcc/config.hpp"

namespace fcc {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

// Runs one command line; returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Everything a run reads from its configuration document.
//   {"seed", "precision", "threads",
//    "data": {"train", "valid", "test", "embeddings", "min_count"},
//    "model": {...}, "train": {...}, "skipgram": {...}, "synthetic": {...}}
// Relative data paths resolve against the config file's directory. A
// top-level seed overrides the seeds of every section.
struct RunConfig {
  std::uint64_t seed = 1;
  std::string precision = "f32";
  std::size_t threads = 1;
  std::filesystem::path train_data, valid_data, test_data, embeddings;
  std::size_t min_count = 1;
  ModelConfig model;
  TrainConfig train;
  SkipGramOptions skipgram;
  SyntheticOptions synthetic;

  void set_seed(std::uint64_t s);
};

RunConfig run_config_from_json(const Json& value, const std::filesystem::path& base_dir);
RunConfig load_run_config(const std::filesystem::path& path);
Json to_json(const RunConfig& cfg);

std::uint64_t fnv1a64_file(const std::filesystem::path& path);

// Raw ranking rows "label \t turn_1 \t ... \t turn_n \t response", ten per
// list, to canonical TSV. `titles`, when given, holds one title per raw row.
// Unparseable rows and lists left incomplete by them are skipped; more than
// 10% skipped rows is a DataError.
struct ConvertStats {
  std::size_t rows = 0;
  std::size_t written = 0;
  std::size_t skipped = 0;
  std::size_t missing_titles = 0;
};

ConvertStats convert_ranking_rows(std::istream& raw, std::istream* titles, std::ostream& out, std::ostream& warn);

}  // namespace fcc
