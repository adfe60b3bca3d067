#include "fcc/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "fcc/errors.hpp"
#include "fcc/evaluation.hpp"

namespace fcc {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Run configuration

void RunConfig::set_seed(std::uint64_t s) {
  seed = s;
  train.seed = s;
  skipgram.seed = s;
  synthetic.seed = s;
}

namespace {

fs::path resolve(const std::string& value, const fs::path& base_dir) {
  if (value.empty()) return {};
  fs::path p(value);
  return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
}

void check_precision(const std::string& p, const std::string& where) {
  if (p != "f32" && p != "f64") throw ConfigError(where + ": expected f32 or f64, got '" + p + "'");
}

}  // namespace

RunConfig run_config_from_json(const Json& value, const fs::path& base_dir) {
  RunConfig rc;
  ObjectReader r(value, "");
  std::optional<std::uint64_t> seed;
  if (r.has("seed")) {
    std::uint64_t s = 0;
    r.read("seed", s);
    seed = s;
  }
  r.read("precision", rc.precision);
  check_precision(rc.precision, "precision");
  r.read("threads", rc.threads);
  if (const Json* data = r.child("data")) {
    ObjectReader d(*data, "data");
    std::string train, valid, test, embeddings;
    d.read("train", train);
    d.read("valid", valid);
    d.read("test", test);
    d.read("embeddings", embeddings);
    d.read("min_count", rc.min_count);
    d.finish();
    rc.train_data = resolve(train, base_dir);
    rc.valid_data = resolve(valid, base_dir);
    rc.test_data = resolve(test, base_dir);
    rc.embeddings = resolve(embeddings, base_dir);
  }
  if (const Json* m = r.child("model")) rc.model = model_config_from_json(*m, "model");
  if (const Json* t = r.child("train")) rc.train = train_config_from_json(*t, "train");
  rc.skipgram.dim = rc.model.embedding_dim;
  if (const Json* s = r.child("skipgram")) rc.skipgram = skipgram_from_json(*s, "skipgram", rc.skipgram);
  if (const Json* s = r.child("synthetic")) rc.synthetic = synthetic_from_json(*s, "synthetic");
  r.finish();
  if (seed) rc.set_seed(*seed);
  else rc.seed = rc.train.seed;
  return rc;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  Json value;
  try {
    value = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(value, path.parent_path());
}

Json to_json(const RunConfig& rc) {
  return Json{{"seed", rc.seed},
              {"precision", rc.precision},
              {"threads", rc.threads},
              {"data",
               {{"train", rc.train_data.string()},
                {"valid", rc.valid_data.string()},
                {"test", rc.test_data.string()},
                {"embeddings", rc.embeddings.string()},
                {"min_count", rc.min_count}}},
              {"model", to_json(rc.model)},
              {"train", to_json(rc.train)},
              {"skipgram", to_json(rc.skipgram)},
              {"synthetic", to_json(rc.synthetic)}};
}

std::uint64_t fnv1a64_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::uint64_t h = 14695981039346656037ull;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Conversion

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return fields;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \r\n");
  return s.substr(b, e - b + 1);
}

struct RawRow {
  int label = 0;
  std::string context;
  std::string response;
  std::string title;
};

}  // namespace

ConvertStats convert_ranking_rows(std::istream& raw, std::istream* titles, std::ostream& out, std::ostream& warn) {
  ConvertStats stats;
  std::vector<RawRow> group;
  std::string line, title;
  std::size_t line_no = 0;

  auto flush = [&] {
    if (group.empty()) return;
    bool ok = group.size() % kCandidatesPerList == 0;
    for (std::size_t s = 0; ok && s < group.size(); s += kCandidatesPerList) {
      int positives = 0;
      for (std::size_t k = s; k < s + kCandidatesPerList; ++k) positives += group[k].label;
      ok = positives == 1;
    }
    if (ok) {
      for (const auto& row : group) {
        out << row.label << '\t' << row.context << '\t' << row.response << '\t' << row.title << '\n';
      }
      stats.written += group.size();
    } else {
      warn << "warning: skipping " << group.size() << " rows ending at line " << line_no
           << ": a list needs ten rows with one positive\n";
      stats.skipped += group.size();
    }
    group.clear();
  };

  while (std::getline(raw, line)) {
    ++line_no;
    bool have_title = false;
    if (titles && std::getline(*titles, title)) {
      title = trim(title);
      std::replace(title.begin(), title.end(), '\t', ' ');
      have_title = !title.empty();
    }
    if (trim(line).empty()) continue;
    ++stats.rows;
    const auto fields = split_tabs(line);
    RawRow row;
    std::vector<std::string> turns;
    for (std::size_t i = 1; i + 1 < fields.size(); ++i) {
      auto t = trim(fields[i]);
      if (!t.empty()) turns.push_back(std::move(t));
    }
    const std::string label = fields.empty() ? "" : trim(fields[0]);
    row.response = fields.size() >= 3 ? trim(fields.back()) : "";
    if ((label != "0" && label != "1") || turns.empty() || row.response.empty()) {
      warn << "warning: line " << line_no << ": unparseable row skipped\n";
      ++stats.skipped;
      continue;
    }
    row.label = label == "1" ? 1 : 0;
    for (std::size_t i = 0; i < turns.size(); ++i) row.context += (i ? " __EOT__ " : "") + turns[i];
    if (have_title) {
      row.title = title;
    } else {
      ++stats.missing_titles;
    }
    if (!group.empty() && group.back().context != row.context) flush();
    group.push_back(std::move(row));
  }
  flush();
  if (stats.missing_titles > 0) {
    warn << "warning: " << stats.missing_titles << " rows have no title; their provenance is empty\n";
  }
  if (stats.rows > 0 && stats.skipped * 10 > stats.rows) {
    throw DataError("skipped " + std::to_string(stats.skipped) + " of " + std::to_string(stats.rows) +
                    " rows (more than 10%)");
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Commands

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Written when a command starts and rewritten with its end time.
class Manifest {
 public:
  Manifest(fs::path path, std::string command, Json config, std::uint64_t seed) : path_(std::move(path)) {
    j_["command"] = std::move(command);
    j_["config"] = std::move(config);
    j_["seed"] = seed;
    j_["inputs"] = Json::array();
    j_["outputs"] = Json::array();
    j_["start_time"] = utc_now();
    j_["end_time"] = nullptr;
  }

  void add_input(const std::string& role, const fs::path& p) {
    j_["inputs"].push_back({{"role", role}, {"path", p.string()}, {"fnv1a64", hex64(fnv1a64_file(p))}});
  }
  void add_output(const fs::path& p) { j_["outputs"].push_back(p.string()); }
  void write() const {
    if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
    std::ofstream out(path_);
    if (!out) throw DataError("cannot write manifest " + path_.string());
    out << j_.dump(2) << '\n';
  }
  void finish() {
    j_["end_time"] = utc_now();
    write();
  }

 private:
  fs::path path_;
  Json j_;
};

template <typename Fn>
decltype(auto) with_precision(const std::string& precision, Fn&& fn) {
  check_precision(precision, "--precision");
  if (precision == "f64") return fn(double{});
  return fn(float{});
}

void require_file(const fs::path& p, const std::string& key) {
  if (p.empty()) throw ConfigError(key + ": no path configured");
  if (!fs::is_regular_file(p)) throw DataError(key + ": file not found: " + p.string());
}

std::ofstream open_output(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  return out;
}

// Common flag values shared by every subcommand.
struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> threads;
  std::string precision;

  void add_to(CLI::App* app, bool out_required) {
    app->add_option("--config", config, "Configuration file (JSON)");
    app->add_option("--seed", seed, "Seed overriding every configured seed");
    auto* o = app->add_option("--out", out, "Output path");
    if (out_required) o->required();
    app->add_option("--threads", threads, "Worker threads");
    app->add_option("--precision", precision, "Floating point precision")->check(CLI::IsMember({"f32", "f64"}));
  }

  RunConfig resolve() const {
    RunConfig rc = config.empty() ? RunConfig{} : load_run_config(config);
    if (seed) rc.set_seed(*seed);
    if (threads) rc.threads = *threads;
    if (!precision.empty()) rc.precision = precision;
    rc.train.threads = rc.threads;
    return rc;
  }
};

// ---- train ----

template <typename T>
void train_into(RunConfig rc, const fs::path& dir, Manifest& manifest, std::ostream& out) {
  require_file(rc.train_data, "data.train");
  if (!rc.valid_data.empty()) require_file(rc.valid_data, "data.valid");
  if (!rc.embeddings.empty()) require_file(rc.embeddings, "data.embeddings");
  {
    auto probe = rc.model;
    probe.vocab_size = std::max<std::size_t>(probe.vocab_size, 2);
    probe.validate();
  }
  rc.train.validate();
  manifest.add_input("train", rc.train_data);
  if (!rc.valid_data.empty()) manifest.add_input("valid", rc.valid_data);
  if (!rc.embeddings.empty()) manifest.add_input("embeddings", rc.embeddings);
  manifest.write();

  const auto train_text = load_ranking_lists(rc.train_data, rc.model.limits);
  const auto vocab = Vocabulary::build(train_text, rc.min_count);
  const auto train_lists = encode_lists(train_text, vocab);
  std::vector<RankingList> valid_lists;
  if (!rc.valid_data.empty()) valid_lists = encode_lists(load_ranking_lists(rc.valid_data, rc.model.limits), vocab);
  rc.model.vocab_size = vocab.size();

  std::optional<EmbeddingTable> table;
  if (!rc.embeddings.empty()) {
    auto loaded = load_embeddings(rc.embeddings, vocab, rc.seed);
    if (loaded.table.dim != rc.model.embedding_dim) {
      throw ConfigError("model.embedding_dim is " + std::to_string(rc.model.embedding_dim) + " but " +
                        rc.embeddings.string() + " holds " + std::to_string(loaded.table.dim) + "-d vectors");
    }
    out << "embeddings: matched " << loaded.matched << " of " << vocab.size() << " tokens\n";
    table = std::move(loaded.table);
  }
  auto params = init_params<T>(rc.model, rc.seed, table ? &*table : nullptr);
  out << "train: " << train_lists.size() << " lists, valid: " << valid_lists.size() << " lists, vocabulary "
      << vocab.size() << ", " << params.scalar_count() << " parameters\n";

  const auto log_path = dir / "train.log";
  auto log = open_output(log_path);
  auto result = train(rc.model, std::move(params), train_lists, valid_lists, rc.train, &log);
  log.close();
  const auto ckpt = dir / "checkpoint.fcc";
  save_checkpoint(ckpt, rc.model, vocab, result.best_params);
  manifest.add_output(log_path);
  manifest.add_output(ckpt);
  out << "best step " << result.best_step;
  if (!valid_lists.empty()) out << ", validation R10@1 " << format_real(result.best_r10_1);
  out << "\ncheckpoint: " << ckpt.string() << '\n';
}

// ---- eval ----

struct EvalOutputs {
  MetricsReport report;
  std::vector<ScoredList> scored;
};

void write_eval_outputs(const fs::path& dir, const std::string& name, const std::vector<ScoredList>& scored,
                        Manifest& manifest, std::ostream& out) {
  const auto report = compute_metrics(scored);
  {
    auto f = open_output(dir / "metrics.txt");
    write_metrics_table(f, name, report);
  }
  {
    auto f = open_output(dir / "metrics.records");
    write_metrics_record(f, name, report);
  }
  {
    auto f = open_output(dir / "non_optimal.csv");
    write_non_optimal_csv(f, report.buckets);
  }
  {
    auto f = open_output(dir / "scores.tsv");
    write_scores(f, scored);
  }
  for (const char* f : {"metrics.txt", "metrics.records", "non_optimal.csv", "scores.tsv"}) {
    manifest.add_output(dir / f);
  }
  write_metrics_table(out, name, report);
}

void warn_on_reused_data(const fs::path& checkpoint, const fs::path& data, std::ostream& err) {
  const auto mpath = checkpoint.parent_path() / "manifest.json";
  if (!fs::is_regular_file(mpath)) return;
  try {
    std::ifstream in(mpath);
    const auto m = Json::parse(in);
    const auto sum = hex64(fnv1a64_file(data));
    for (const auto& input : m.at("inputs")) {
      if (input.at("fnv1a64") == sum && input.at("role") != "embeddings") {
        err << "warning: evaluation data has the same checksum as the " << input.at("role").get<std::string>()
            << " data of this checkpoint\n";
      }
    }
  } catch (const Json::exception&) {
    err << "warning: could not read " << mpath.string() << '\n';
  }
}

template <typename T>
std::vector<ScoredList> score_with_checkpoint(const fs::path& ckpt_path, const std::optional<Variant>& expected,
                                              const fs::path& data, std::size_t threads, Manifest& manifest,
                                              std::ostream& err) {
  require_file(ckpt_path, "--checkpoint");
  require_file(data, "--data");
  manifest.add_input("checkpoint", ckpt_path);
  manifest.add_input("test", data);
  manifest.write();
  warn_on_reused_data(ckpt_path, data, err);
  const auto ckpt = expected ? load_checkpoint<T>(ckpt_path, *expected) : load_checkpoint<T>(ckpt_path);
  const auto lists = encode_lists(load_ranking_lists(data, ckpt.config.limits), ckpt.vocabulary);
  return score_ranking_lists(ckpt.config, ckpt.params, lists, threads);
}

// ---- report ----

struct ModelScores {
  std::string name;
  std::vector<ScoredList> scored;
};

std::vector<double> per_list_recall(const std::vector<ScoredList>& lists, std::size_t k) {
  std::vector<double> out;
  for (const auto& l : lists) out.push_back(rank_of_true(l.scores, l.true_index) <= k ? 1.0 : 0.0);
  return out;
}

// Comparison table against the first model plus all pairwise t-tests.
void write_comparison(const fs::path& dir, const std::vector<ModelScores>& models, Manifest& manifest,
                      std::ostream& out) {
  if (models.size() < 2) throw ConfigError("a comparison needs at least two models");
  for (const auto& m : models) {
    if (m.scored.size() != models.front().scored.size()) {
      throw DataError("models '" + models.front().name + "' and '" + m.name +
                      "' were scored on different numbers of lists");
    }
  }
  struct Metric {
    const char* name;
    std::function<std::vector<double>(const std::vector<ScoredList>&)> per_list;
  };
  const std::vector<Metric> metrics{
      {"R10@1", [](const auto& l) { return per_list_recall(l, 1); }},
      {"R10@2", [](const auto& l) { return per_list_recall(l, 2); }},
      {"R10@5", [](const auto& l) { return per_list_recall(l, 5); }},
      {"MAP", [](const auto& l) { return per_list_reciprocal_rank(l); }},
  };

  auto tests = open_output(dir / "ttests.tsv");
  tests << "model_a\tmodel_b\tmetric\tmean_difference\tt\tp\tn\n";
  std::map<std::pair<std::size_t, std::size_t>, double> p_vs_first;  // (model, metric) -> p
  for (std::size_t a = 0; a < models.size(); ++a) {
    for (std::size_t b = a + 1; b < models.size(); ++b) {
      for (std::size_t k = 0; k < metrics.size(); ++k) {
        const auto r = paired_t_test(metrics[k].per_list(models[b].scored), metrics[k].per_list(models[a].scored));
        tests << models[b].name << '\t' << models[a].name << '\t' << metrics[k].name << '\t'
              << format_real(r.mean_difference) << '\t' << format_real(r.t) << '\t' << format_real(r.p) << '\t'
              << r.n << '\n';
        if (a == 0) p_vs_first[{b, k}] = r.p;
      }
    }
  }
  tests.close();

  std::ostringstream table;
  char line[200];
  std::snprintf(line, sizeof line, "%-20s %8s %10s %10s %10s %10s\n", "model", "lists", "R10@1", "R10@2", "R10@5",
                "MAP");
  table << line;
  auto csv = open_output(dir / "non_optimal_all.csv");
  csv << "model,length,rate,count\n";
  auto records = open_output(dir / "report.records");
  for (std::size_t m = 0; m < models.size(); ++m) {
    const auto r = compute_metrics(models[m].scored);
    const double values[4] = {r.r10_1, r.r10_2, r.r10_5, r.map};
    std::snprintf(line, sizeof line, "%-20s %8zu", models[m].name.c_str(), r.num_lists);
    table << line;
    for (std::size_t k = 0; k < 4; ++k) {
      const bool sig = m > 0 && p_vs_first.at({m, k}) < 0.05;
      std::snprintf(line, sizeof line, " %9.4f%c", values[k], sig ? '*' : ' ');
      table << line;
    }
    table << '\n';
    for (const auto& b : r.buckets) csv << models[m].name << ',' << b.length << ',' << format_real(b.rate) << ','
                                        << b.count << '\n';
    write_metrics_record(records, models[m].name, r);
  }
  table << "* p < 0.05 against " << models.front().name << " (paired Student's t-test over lists)\n";
  {
    auto f = open_output(dir / "report.txt");
    f << table.str();
  }
  for (const char* f : {"report.txt", "report.records", "ttests.tsv", "non_optimal_all.csv"}) {
    manifest.add_output(dir / f);
  }
  out << table.str();
}

ModelScores read_eval_dir(const fs::path& dir) {
  const auto scores_path = dir / "scores.tsv";
  require_file(scores_path, "--inputs");
  ModelScores m;
  m.name = dir.filename().string();
  std::ifstream rec(dir / "metrics.records");
  std::string first;
  if (rec && std::getline(rec, first) && first.rfind("name=", 0) == 0) {
    m.name = first.substr(5, first.find(' ') - 5);
  }
  std::ifstream in(scores_path);
  m.scored = read_scores(in, scores_path.string());
  return m;
}

int dispatch(CLI::App& app, const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Response ranking with conversation history and candidate provenance", "fcc"};
  try {
    return dispatch(app, args, out, err);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, er;
    const int code = app.exit(e, o, er);
    out << o.str();
    err << er.str();
    return code == 0 ? kExitOk : kExitConfig;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const TrainingError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

namespace {

int dispatch(CLI::App& app, const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  app.require_subcommand(1);

  // convert
  auto* convert = app.add_subcommand("convert", "Raw ranking rows and titles to canonical TSV");
  std::string convert_input, convert_titles;
  CommonFlags convert_flags;
  convert->add_option("--input", convert_input, "Raw rows: label, context turns..., response")->required();
  convert->add_option("--titles", convert_titles, "One title per raw row");
  convert_flags.add_to(convert, true);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic canonical TSV corpus");
  std::string synth_mode;
  std::optional<std::size_t> synth_size;
  CommonFlags synth_flags;
  synth->add_option("--mode", synth_mode, "history, provenance or both");
  synth->add_option("--size", synth_size, "Number of ranking lists");
  synth_flags.add_to(synth, true);

  // pretrain-embeddings
  auto* pretrain = app.add_subcommand("pretrain-embeddings", "Skip-gram vectors over the training data");
  std::string pretrain_data;
  CommonFlags pretrain_flags;
  pretrain->add_option("--data", pretrain_data, "Training TSV (default: data.train)");
  pretrain_flags.add_to(pretrain, true);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model; writes checkpoint, log and manifest");
  CommonFlags train_flags;
  train_flags.add_to(train_cmd, true);

  // eval
  auto* eval = app.add_subcommand("eval", "Score a test set and write metrics");
  std::string eval_ckpt, eval_data, eval_scores, eval_variant, eval_name;
  CommonFlags eval_flags;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file");
  eval->add_option("--data", eval_data, "Test TSV (default: data.test)");
  eval->add_option("--scores", eval_scores, "Evaluate an existing scores file instead of a checkpoint");
  eval->add_option("--variant", eval_variant, "Expected model variant");
  eval->add_option("--name", eval_name, "Model name used in reports");
  eval_flags.add_to(eval, true);

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate several variants on identical data and seeds");
  std::vector<std::string> ablate_variants;
  CommonFlags ablate_flags;
  ablate->add_option("--variants", ablate_variants, "Variants, e.g. DMN_ATTENTION FCC_GRU FCC_ATTENTION")
      ->required()
      ->delimiter(',');
  ablate_flags.add_to(ablate, true);

  // report
  auto* report = app.add_subcommand("report", "Compare evaluation directories");
  std::vector<std::string> report_inputs;
  CommonFlags report_flags;
  report->add_option("--inputs", report_inputs, "Directories written by eval")->required();
  report_flags.add_to(report, true);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  app.parse(std::move(reversed));

  if (convert->parsed()) {
    const fs::path out_path = convert_flags.out;
    Manifest manifest(fs::path(out_path.string() + ".manifest.json"), "convert", Json::object(), 0);
    require_file(convert_input, "--input");
    manifest.add_input("raw", convert_input);
    std::ifstream raw(convert_input);
    std::ifstream titles;
    if (!convert_titles.empty()) {
      require_file(convert_titles, "--titles");
      manifest.add_input("titles", convert_titles);
      titles.open(convert_titles);
    }
    manifest.write();
    std::ostringstream buffer;
    const auto stats = convert_ranking_rows(raw, convert_titles.empty() ? nullptr : &titles, buffer, err);
    auto f = open_output(out_path);
    f << buffer.str();
    f.close();
    manifest.add_output(out_path);
    manifest.finish();
    out << "converted " << stats.written << " of " << stats.rows << " rows (" << stats.skipped << " skipped, "
        << stats.missing_titles << " without title) to " << out_path.string() << '\n';
    return kExitOk;
  }

  if (synth->parsed()) {
    auto rc = synth_flags.resolve();
    if (!synth_mode.empty()) rc.synthetic.mode = parse_signal_mode(synth_mode);
    if (synth_size) rc.synthetic.num_lists = *synth_size;
    const fs::path out_path = synth_flags.out;
    Manifest manifest(fs::path(out_path.string() + ".manifest.json"), "synth", to_json(rc.synthetic),
                      rc.synthetic.seed);
    manifest.write();
    save_ranking_lists(out_path, generate_synthetic(rc.synthetic));
    manifest.add_output(out_path);
    manifest.finish();
    out << "wrote " << rc.synthetic.num_lists << " " << signal_mode_name(rc.synthetic.mode) << " lists to "
        << out_path.string() << '\n';
    return kExitOk;
  }

  if (pretrain->parsed()) {
    auto rc = pretrain_flags.resolve();
    if (!pretrain_data.empty()) rc.train_data = pretrain_data;
    require_file(rc.train_data, "data.train");
    const fs::path out_path = pretrain_flags.out;
    Manifest manifest(fs::path(out_path.string() + ".manifest.json"), "pretrain-embeddings", to_json(rc), rc.seed);
    manifest.add_input("train", rc.train_data);
    manifest.write();
    const auto text = load_ranking_lists(rc.train_data, rc.model.limits);
    const auto vocab = Vocabulary::build(text, rc.min_count);
    const auto corpus = skipgram_corpus(encode_lists(text, vocab));
    const auto table = pretrain_skipgram(corpus, vocab.size(), rc.skipgram);
    save_embeddings(out_path, table, vocab);
    manifest.add_output(out_path);
    manifest.finish();
    out << "wrote " << vocab.size() << " x " << table.dim << " vectors to " << out_path.string() << '\n';
    return kExitOk;
  }

  if (train_cmd->parsed()) {
    if (train_flags.config.empty()) throw ConfigError("train: --config is required");
    const auto rc = train_flags.resolve();
    const fs::path dir = train_flags.out;
    Manifest manifest(dir / "manifest.json", "train", to_json(rc), rc.seed);
    with_precision(rc.precision, [&](auto tag) {
      using T = decltype(tag);
      train_into<T>(rc, dir, manifest, out);
    });
    manifest.add_output(dir / "manifest.json");
    manifest.finish();
    return kExitOk;
  }

  if (eval->parsed()) {
    auto rc = eval_flags.resolve();
    const fs::path dir = eval_flags.out;
    Manifest manifest(dir / "manifest.json", "eval", to_json(rc), rc.seed);
    std::vector<ScoredList> scored;
    std::string name = eval_name;
    if (!eval_scores.empty()) {
      require_file(eval_scores, "--scores");
      manifest.add_input("scores", eval_scores);
      manifest.write();
      std::ifstream in(eval_scores);
      scored = read_scores(in, eval_scores);
      if (name.empty()) name = "scores";
    } else {
      if (eval_ckpt.empty()) throw ConfigError("eval: either --checkpoint or --scores is required");
      const fs::path data = eval_data.empty() ? rc.test_data : fs::path(eval_data);
      std::optional<Variant> expected;
      if (!eval_variant.empty()) expected = parse_variant(eval_variant);
      scored = with_precision(rc.precision, [&](auto tag) {
        using T = decltype(tag);
        return score_with_checkpoint<T>(eval_ckpt, expected, data, rc.threads, manifest, err);
      });
      if (name.empty()) {
        name = std::string(variant_name(load_checkpoint<double>(eval_ckpt).config.variant));
      }
    }
    write_eval_outputs(dir, name, scored, manifest, out);
    manifest.finish();
    return kExitOk;
  }

  if (ablate->parsed()) {
    if (ablate_flags.config.empty()) throw ConfigError("ablate: --config is required");
    if (ablate_variants.size() < 2) throw ConfigError("ablate: at least two variants are required");
    const auto base = ablate_flags.resolve();
    std::vector<Variant> variants;
    for (const auto& v : ablate_variants) variants.push_back(parse_variant(v));
    require_file(base.train_data, "data.train");
    require_file(base.test_data, "data.test");
    const fs::path root = ablate_flags.out;
    Manifest manifest(root / "manifest.json", "ablate", to_json(base), base.seed);
    manifest.add_input("train", base.train_data);
    manifest.add_input("test", base.test_data);
    manifest.write();

    std::vector<ModelScores> models;
    for (std::size_t i = 0; i < variants.size(); ++i) {
      auto rc = base;
      rc.model.variant = variants[i];
      const std::string name = std::string(variant_name(variants[i]));
      char prefix[24];
      std::snprintf(prefix, sizeof prefix, "%02zu_", i + 1);
      const fs::path dir = root / (prefix + name);
      out << "== " << name << " (" << dir.string() << ")\n";
      Manifest train_manifest(dir / "manifest.json", "train", to_json(rc), rc.seed);
      Manifest eval_manifest(dir / "eval" / "manifest.json", "eval", to_json(rc), rc.seed);
      auto scored = with_precision(rc.precision, [&](auto tag) {
        using T = decltype(tag);
        train_into<T>(rc, dir, train_manifest, out);
        train_manifest.finish();
        return score_with_checkpoint<T>(dir / "checkpoint.fcc", variants[i], rc.test_data, rc.threads,
                                        eval_manifest, err);
      });
      write_eval_outputs(dir / "eval", name, scored, eval_manifest, out);
      eval_manifest.finish();
      manifest.add_output(dir);
      models.push_back({name, std::move(scored)});
    }
    out << "== comparison\n";
    write_comparison(root, models, manifest, out);
    manifest.finish();
    return kExitOk;
  }

  if (report->parsed()) {
    const fs::path dir = report_flags.out;
    Manifest manifest(dir / "manifest.json", "report", Json::object(), 0);
    std::vector<ModelScores> models;
    for (const auto& input : report_inputs) {
      models.push_back(read_eval_dir(input));
      manifest.add_input("scores", fs::path(input) / "scores.tsv");
    }
    manifest.write();
    write_comparison(dir, models, manifest, out);
    manifest.finish();
    return kExitOk;
  }
  return kExitFailure;
}

}  // namespace

}  // namespace fcc
