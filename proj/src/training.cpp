#include "fcc/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <thread>

#include "fcc/errors.hpp"

namespace fcc {

LossKind parse_loss(std::string_view name) {
  if (name == "hinge") return LossKind::kHinge;
  if (name == "logistic") return LossKind::kLogistic;
  throw ConfigError("unknown loss '" + std::string(name) + "' (expected hinge or logistic)");
}

std::string_view loss_name(LossKind loss) { return loss == LossKind::kHinge ? "hinge" : "logistic"; }

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("train.learning_rate must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train.beta1 and train.beta2 must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw ConfigError("train.epsilon must be positive");
  if (epochs == 0) throw ConfigError("train.epochs must be positive");
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (!(clip_norm >= 0.0)) throw ConfigError("train.clip_norm must be >= 0");
  if (!(margin >= 0.0)) throw ConfigError("train.margin must be >= 0");
  if (threads == 0) throw ConfigError("train.threads must be positive");
}

template <typename T>
Tensor<T> pairwise_loss(const Tensor<T>& s_pos, const Tensor<T>& s_neg, const TrainConfig& cfg) {
  auto diff = sub(s_neg, s_pos);
  if (cfg.loss == LossKind::kHinge) return relu(add_scalar(diff, static_cast<T>(cfg.margin)));
  return softplus(diff);
}

double pairwise_loss_value(double s_pos, double s_neg, const TrainConfig& cfg) {
  const double diff = s_neg - s_pos;
  if (cfg.loss == LossKind::kHinge) return std::max(0.0, cfg.margin + diff);
  return diff > 0 ? diff + std::log1p(std::exp(-diff)) : std::log1p(std::exp(diff));
}

template <typename T>
double global_norm(const Gradients<T>& grads) {
  double total = 0.0;
  for (const auto& g : grads)
    for (T v : g) total += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(total);
}

template <typename T>
double clip_by_global_norm(Gradients<T>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& g : grads)
      for (T& v : g) v = static_cast<T>(static_cast<double>(v) * factor);
  }
  return norm;
}

template <typename T>
void adam_step(ParamStore<T>& params, Gradients<T> grads, AdamState<T>& state, const TrainConfig& cfg) {
  auto& entries = params.entries();
  if (grads.size() != entries.size()) throw ContractError("adam_step: gradient count does not match parameters");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (grads[i].size() != entries[i].second.numel()) {
      throw ContractError("adam_step: gradient for '" + entries[i].first + "' has the wrong size");
    }
    for (T v : grads[i]) {
      if (!std::isfinite(static_cast<double>(v))) {
        throw TrainingError("non-finite gradient in tensor '" + entries[i].first + "'");
      }
    }
  }
  clip_by_global_norm(grads, cfg.clip_norm);
  if (state.m.size() != entries.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& [name, t] : entries) {
      state.m.emplace_back(t.numel(), T(0));
      state.v.emplace_back(t.numel(), T(0));
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& t = entries[i].second;
    if (!t.requires_grad()) continue;
    auto values = t.mutable_values();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = cfg.beta1 * static_cast<double>(m[j]) + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * static_cast<double>(v[j]) + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = cfg.learning_rate * (mj / bc1) / (std::sqrt(vj / bc2) + cfg.epsilon);
      values[j] = static_cast<T>(static_cast<double>(values[j]) - update);
    }
  }
}

namespace {

// Runs fn(i) for i in [0, n) on up to `threads` workers; each index is
// handled by exactly one worker and results are written by index.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < threads; ++w) {
    workers.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : workers) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

template <typename T>
void accumulate_grad(std::vector<T>& into, const Tensor<T>& leaf) {
  if (!leaf.requires_grad() || !leaf.has_grad()) return;
  if (leaf.sparse_grad_enabled()) {
    const std::size_t width = leaf.dim(1);
    for (const auto& [row, values] : leaf.sparse_grad()) {
      if (row == static_cast<std::size_t>(kPadId)) continue;  // PAD row stays frozen
      for (std::size_t d = 0; d < width; ++d) into[row * width + d] += values[d];
    }
    return;
  }
  const auto g = leaf.grad();
  for (std::size_t j = 0; j < g.size(); ++j) into[j] += g[j];
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (epoch + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

template <typename T>
BatchResult<T> batch_loss_and_grad(const ModelConfig& model_cfg, const ParamStore<T>& params, const Batch& batch,
                                   const TrainConfig& cfg) {
  if (batch.pairs.empty()) throw ContractError("batch has no pairs");
  std::vector<std::vector<const TrainingPair*>> by_list(batch.lists.size());
  for (const auto& pair : batch.pairs) by_list.at(pair.list).push_back(&pair);
  const T weight = static_cast<T>(1.0 / static_cast<double>(batch.pairs.size()));

  std::vector<ParamStore<T>> leaves(batch.lists.size());
  std::vector<double> list_loss(batch.lists.size(), 0.0);
  parallel_for(batch.lists.size(), cfg.threads, [&](std::size_t li) {
    if (by_list[li].empty()) return;
    leaves[li] = params.shared_leaves();
    const FccModel<T> model(model_cfg, leaves[li]);
    const auto& list = batch.lists[li];
    auto column = reshape(model.score_list(list), {list.candidates.size(), 1});
    Tensor<T> total;
    for (const auto* pair : by_list[li]) {
      auto l = pairwise_loss(slice_rows(column, pair->positive, pair->positive + 1),
                             slice_rows(column, pair->negative, pair->negative + 1), cfg);
      total = total.defined() ? add(total, l) : l;
    }
    auto loss = scale(sum(total), weight);
    loss.backward();
    list_loss[li] = static_cast<double>(loss.item());
  });

  BatchResult<T> result;
  for (const auto& [name, t] : params.entries()) result.grads.emplace_back(t.numel(), T(0));
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    if (by_list[li].empty()) continue;
    result.loss += list_loss[li];
    const auto& entries = leaves[li].entries();
    for (std::size_t i = 0; i < entries.size(); ++i) accumulate_grad(result.grads[i], entries[i].second);
  }
  return result;
}

template <typename T>
std::vector<ScoredList> score_ranking_lists(const ModelConfig& model_cfg, const ParamStore<T>& params,
                                            const std::vector<RankingList>& lists, std::size_t threads) {
  std::vector<ScoredList> out(lists.size());
  const FccModel<T> model(model_cfg, params);
  parallel_for(lists.size(), threads, [&](std::size_t i) {
    NoGradGuard guard;
    const auto padded = pad_list(lists[i], model_cfg.limits);
    const auto scores = model.score_list(padded);
    ScoredList& s = out[i];
    s.list_id = i;
    s.history_length = padded.history_length;
    s.true_index = padded.positive;
    for (T v : scores.values()) s.scores.push_back(static_cast<double>(v));
  });
  return out;
}

template <typename T>
TrainResult<T> train(const ModelConfig& model_cfg, ParamStore<T> params, const std::vector<RankingList>& train_lists,
                     const std::vector<RankingList>& valid_lists, const TrainConfig& cfg, std::ostream* log) {
  cfg.validate();
  model_cfg.validate();
  check_params(params, model_cfg);
  if (train_lists.empty()) throw DataError("training set is empty");

  TrainResult<T> result;
  AdamState<T> state;
  std::size_t step = 0;
  std::size_t last_eval_step = 0;
  bool evaluated = false;

  auto evaluate = [&](std::size_t epoch) {
    const auto scored = score_ranking_lists(model_cfg, params, valid_lists, cfg.threads);
    EvalRecord rec{step, epoch, compute_metrics(scored)};
    if (log) {
      *log << "kind=eval step=" << step << " epoch=" << epoch << " r10_1=" << format_real(rec.metrics.r10_1)
           << " r10_2=" << format_real(rec.metrics.r10_2) << " r10_5=" << format_real(rec.metrics.r10_5)
           << " map=" << format_real(rec.metrics.map) << '\n';
    }
    if (rec.metrics.r10_1 > result.best_r10_1) {
      result.best_r10_1 = rec.metrics.r10_1;
      result.best_step = step;
      result.best_params = params.clone();
    }
    result.evaluations.push_back(std::move(rec));
    last_eval_step = step;
    evaluated = true;
  };

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto batches = make_batches(train_lists, cfg.batch_size, epoch_seed(cfg.seed, epoch), model_cfg.limits);
    for (const auto& batch : batches) {
      ++step;
      auto br = batch_loss_and_grad(model_cfg, params, batch, cfg);
      if (!std::isfinite(br.loss)) {
        throw TrainingError("non-finite loss at step " + std::to_string(step) + " (epoch " + std::to_string(epoch) +
                            ")");
      }
      try {
        adam_step(params, std::move(br.grads), state, cfg);
      } catch (const TrainingError& e) {
        throw TrainingError(std::string(e.what()) + " at step " + std::to_string(step));
      }
      result.step_losses.push_back(br.loss);
      if (log) *log << "kind=step step=" << step << " epoch=" << epoch << " loss=" << fmt(br.loss) << '\n';
      if (!valid_lists.empty() && cfg.eval_every > 0 && step % cfg.eval_every == 0) evaluate(epoch);
    }
    if (!valid_lists.empty() && cfg.eval_every == 0) evaluate(epoch);
  }
  if (!valid_lists.empty() && (!evaluated || last_eval_step != step)) evaluate(cfg.epochs);
  if (valid_lists.empty()) {
    result.best_params = params.clone();
    result.best_step = step;
  }
  if (log) {
    *log << "kind=best step=" << result.best_step;
    if (!valid_lists.empty()) *log << " r10_1=" << format_real(result.best_r10_1);
    *log << '\n';
  }
  return result;
}

#define FCC_INSTANTIATE_TRAINING(T)                                                                           \
  template Tensor<T> pairwise_loss<T>(const Tensor<T>&, const Tensor<T>&, const TrainConfig&);                \
  template double global_norm<T>(const Gradients<T>&);                                                        \
  template double clip_by_global_norm<T>(Gradients<T>&, double);                                              \
  template void adam_step<T>(ParamStore<T>&, Gradients<T>, AdamState<T>&, const TrainConfig&);                \
  template BatchResult<T> batch_loss_and_grad<T>(const ModelConfig&, const ParamStore<T>&, const Batch&,      \
                                                 const TrainConfig&);                                         \
  template std::vector<ScoredList> score_ranking_lists<T>(const ModelConfig&, const ParamStore<T>&,           \
                                                          const std::vector<RankingList>&, std::size_t);      \
  template TrainResult<T> train<T>(const ModelConfig&, ParamStore<T>, const std::vector<RankingList>&,        \
                                   const std::vector<RankingList>&, const TrainConfig&, std::ostream*);

FCC_INSTANTIATE_TRAINING(float)
FCC_INSTANTIATE_TRAINING(double)

}  // namespace fcc
