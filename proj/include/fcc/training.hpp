#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "fcc/data.hpp"
#include "fcc/evaluation.hpp"
#include "fcc/model.hpp"
#include "fcc/params.hpp"

namespace fcc {

enum class LossKind { kHinge, kLogistic };

LossKind parse_loss(std::string_view name);
std::string_view loss_name(LossKind loss);

struct TrainConfig {
  LossKind loss = LossKind::kHinge;
  double margin = 1.0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t epochs = 10;
  std::size_t batch_size = 50;  // (positive, negative) pairs per step
  std::uint64_t seed = 1;
  double clip_norm = 5.0;  // 0 disables clipping
  std::size_t eval_every = 0;  // steps; 0 evaluates at the end of every epoch
  std::size_t threads = 1;

  void validate() const;
};

// hinge: max(0, margin - (pos - neg)); logistic: log(1 + exp(neg - pos)).
template <typename T>
Tensor<T> pairwise_loss(const Tensor<T>& s_pos, const Tensor<T>& s_neg, const TrainConfig& cfg);
double pairwise_loss_value(double s_pos, double s_neg, const TrainConfig& cfg);

// Dense gradients aligned with ParamStore::entries().
template <typename T>
using Gradients = std::vector<std::vector<T>>;

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::size_t step = 0;
};

template <typename T>
double global_norm(const Gradients<T>& grads);

// Clips `grads` in place to global norm `max_norm` (no-op when max_norm is 0
// or the norm is within bounds). Returns the norm before clipping.
template <typename T>
double clip_by_global_norm(Gradients<T>& grads, double max_norm);

// Global-norm clipping followed by one bias-corrected Adam update. Throws
// TrainingError naming the first tensor holding a non-finite gradient.
template <typename T>
void adam_step(ParamStore<T>& params, Gradients<T> grads, AdamState<T>& state, const TrainConfig& cfg);

// Loss of one batch and its gradient. Lists are evaluated on independent
// tapes (optionally in parallel) and reduced in list order.
template <typename T>
struct BatchResult {
  double loss = 0.0;  // mean over pairs
  Gradients<T> grads;
};

template <typename T>
BatchResult<T> batch_loss_and_grad(const ModelConfig& model_cfg, const ParamStore<T>& params, const Batch& batch,
                                   const TrainConfig& cfg);

// Scores every list without recording a tape.
template <typename T>
std::vector<ScoredList> score_ranking_lists(const ModelConfig& model_cfg, const ParamStore<T>& params,
                                            const std::vector<RankingList>& lists, std::size_t threads = 1);

struct EvalRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  MetricsReport metrics;
};

template <typename T>
struct TrainResult {
  ParamStore<T> best_params;
  double best_r10_1 = -1.0;
  std::size_t best_step = 0;
  std::vector<double> step_losses;
  std::vector<EvalRecord> evaluations;
};

// Seeded pairwise training with best-validation checkpoint selection. Log
// records (key=value, one per line) go to `log` when given. Without
// validation lists the final parameters are returned.
template <typename T>
TrainResult<T> train(const ModelConfig& model_cfg, ParamStore<T> params, const std::vector<RankingList>& train_lists,
                     const std::vector<RankingList>& valid_lists, const TrainConfig& cfg, std::ostream* log = nullptr);

}  // namespace fcc
