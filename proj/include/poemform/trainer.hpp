#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "poemform/corpus.hpp"
#include "poemform/model.hpp"

namespace poemform {

struct TrainConfig {
  lm::LossMode mode = lm::LossMode::kEnhanced;
  int steps = 1000;
  int batch_size = 32;
  double learning_rate = 2.5e-4;
  int warmup_steps = 2000;
  double weight_decay = 0.01;
  double grad_clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  // 0 disables periodic checkpoints.
  int checkpoint_every = 0;
  int report_every = 100;

  void validate() const;
  std::string to_json() const;
};

// Rescales grad in place so its L2 norm is at most max_norm; returns the norm before clipping.
double clip_global_norm(std::span<float> grad, double max_norm);

// Linear warmup to learning_rate, then linear decay reaching zero at `steps`.
double learning_rate_at(const TrainConfig& config, int step);

// One padded row per sample, reshuffled every epoch from (seed, epoch).
class BatchSchedule {
 public:
  BatchSchedule(const TokenStream& stream, int batch_size, int max_seq_len, std::uint64_t seed);

  std::size_t batches_per_epoch() const;
  // Batch used at a global step: epoch = step / batches_per_epoch.
  lm::Batch batch_at(std::uint64_t step) const;
  std::vector<lm::Batch> epoch(std::uint64_t epoch) const;
  std::vector<std::size_t> epoch_order(std::uint64_t epoch) const;
  // Samples longer than max_seq_len (truncated when batched).
  std::size_t truncated_samples() const { return truncated_; }

 private:
  const TokenStream* stream_;
  int batch_size_;
  int max_seq_len_;
  std::uint64_t seed_;
  std::size_t truncated_ = 0;
};

// Batches of one epoch of `stream`; see BatchSchedule.
std::vector<lm::Batch> make_batches(const TokenStream& stream, int batch_size, int max_seq_len,
                                    std::uint64_t seed, std::size_t* truncated = nullptr);

struct TrainReportRow {
  int step = 0;
  double loss = 0.0;  // mean over the interval ending at `step`
  double learning_rate = 0.0;
  double wall_ms = 0.0;
};

struct TrainReport {
  std::vector<TrainReportRow> rows;
  std::size_t truncated_samples = 0;

  // "step,loss,lr,wall_ms"
  std::string to_csv() const;
};

// Fresh parameters and empty optimizer state at step 0.
lm::Checkpoint initial_checkpoint(const lm::ModelConfig& config, std::uint64_t vocab_hash, std::uint64_t seed);

struct TrainHooks {
  // Receives config.json, report.csv, periodic checkpoint-<step>.pmc and final.pmc.
  std::optional<std::filesystem::path> run_dir;
  // Stop early after this many total steps (still <= config.steps).
  std::optional<int> stop_at_step;
  std::function<void(const TrainReportRow&)> on_report;
};

struct TrainResult {
  lm::Checkpoint final;
  TrainReport report;
};

// Adam with decoupled weight decay on matrices, global-norm clipping and the
// warmup/decay schedule. Continues from start.step.
TrainResult train(const lm::Checkpoint& start, const TokenStream& stream, std::uint64_t stream_vocab_hash,
                  const TrainConfig& config, const TrainHooks& hooks = {});

}  // namespace poemform
