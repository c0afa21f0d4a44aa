#include "poemform/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "poemform/errors.hpp"
#include "poemform/rng.hpp"

namespace poemform {

namespace {

constexpr const char* kAdamM = "adam.m";
constexpr const char* kAdamV = "adam.v";

void write_text(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw RuntimeFailure("cannot write '" + tmp + "'");
    out << text;
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

void TrainConfig::validate() const {
  if (steps < 1) throw ValidationError("steps must be >= 1");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ValidationError("learning_rate must be finite and >= 0");
  }
  if (warmup_steps < 0) throw ValidationError("warmup_steps must be >= 0");
  if (weight_decay < 0.0) throw ValidationError("weight_decay must be >= 0");
  if (!(grad_clip_norm > 0.0)) throw ValidationError("grad_clip_norm must be > 0");
  if (checkpoint_every < 0) throw ValidationError("checkpoint_every must be >= 0");
  if (report_every < 1) throw ValidationError("report_every must be >= 1");
}

std::string TrainConfig::to_json() const {
  nlohmann::json j = {{"mode", std::string(lm::to_string(mode))},
                      {"steps", steps},
                      {"batch_size", batch_size},
                      {"learning_rate", learning_rate},
                      {"warmup_steps", warmup_steps},
                      {"weight_decay", weight_decay},
                      {"grad_clip_norm", grad_clip_norm},
                      {"beta1", beta1},
                      {"beta2", beta2},
                      {"adam_eps", adam_eps},
                      {"seed", seed},
                      {"checkpoint_every", checkpoint_every},
                      {"report_every", report_every}};
  return j.dump();
}

double clip_global_norm(std::span<float> grad, double max_norm) {
  double norm_sq = 0.0;
  for (float x : grad) norm_sq += static_cast<double>(x) * x;
  const double norm = std::sqrt(norm_sq);
  if (norm > max_norm) {
    const float s = static_cast<float>(max_norm / norm);
    for (float& x : grad) x *= s;
  }
  return norm;
}

double learning_rate_at(const TrainConfig& config, int step) {
  const int warmup = std::min(config.warmup_steps, config.steps);
  if (step < warmup) return config.learning_rate * static_cast<double>(step + 1) / warmup;
  const int decay_span = config.steps - warmup;
  if (decay_span <= 0) return 0.0;
  return config.learning_rate * static_cast<double>(config.steps - step) / decay_span;
}

BatchSchedule::BatchSchedule(const TokenStream& stream, int batch_size, int max_seq_len, std::uint64_t seed)
    : stream_(&stream), batch_size_(batch_size), max_seq_len_(max_seq_len), seed_(seed) {
  if (stream.sample_count() == 0) throw ValidationError("token stream is empty");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (max_seq_len < 2) throw ValidationError("max_seq_len must be >= 2");
  for (std::size_t i = 0; i < stream.sample_count(); ++i) {
    if (stream.sample(i).size() > static_cast<std::size_t>(max_seq_len)) ++truncated_;
  }
}

std::size_t BatchSchedule::batches_per_epoch() const {
  const std::size_t n = stream_->sample_count();
  return (n + batch_size_ - 1) / batch_size_;
}

std::vector<std::size_t> BatchSchedule::epoch_order(std::uint64_t epoch) const {
  std::vector<std::size_t> order(stream_->sample_count());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(mix_seed(seed_, epoch));
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[rng.below(i)]);
  }
  return order;
}

lm::Batch BatchSchedule::batch_at(std::uint64_t step) const {
  const std::size_t per_epoch = batches_per_epoch();
  const auto order = epoch_order(step / per_epoch);
  const std::size_t first = (step % per_epoch) * batch_size_;
  const std::size_t last = std::min(order.size(), first + batch_size_);
  std::vector<std::span<const TokenId>> rows;
  for (std::size_t i = first; i < last; ++i) rows.push_back(stream_->sample(order[i]));
  return lm::make_batch(rows, max_seq_len_);
}

std::vector<lm::Batch> BatchSchedule::epoch(std::uint64_t epoch) const {
  std::vector<lm::Batch> out;
  const std::size_t per_epoch = batches_per_epoch();
  for (std::size_t b = 0; b < per_epoch; ++b) out.push_back(batch_at(epoch * per_epoch + b));
  return out;
}

std::vector<lm::Batch> make_batches(const TokenStream& stream, int batch_size, int max_seq_len, std::uint64_t seed,
                                    std::size_t* truncated) {
  BatchSchedule schedule(stream, batch_size, max_seq_len, seed);
  if (truncated) *truncated = schedule.truncated_samples();
  return schedule.epoch(0);
}

std::string TrainReport::to_csv() const {
  std::ostringstream out;
  out << "step,loss,lr,wall_ms\n";
  out.precision(9);
  for (const auto& r : rows) out << r.step << ',' << r.loss << ',' << r.learning_rate << ',' << r.wall_ms << '\n';
  return out.str();
}

lm::Checkpoint initial_checkpoint(const lm::ModelConfig& config, std::uint64_t vocab_hash, std::uint64_t seed) {
  lm::Checkpoint ckpt(config);
  ckpt.params = lm::init_parameters(config, seed);
  ckpt.vocab_hash = vocab_hash;
  ckpt.step = 0;
  return ckpt;
}

TrainResult train(const lm::Checkpoint& start, const TokenStream& stream, std::uint64_t stream_vocab_hash,
                  const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  if (start.vocab_hash != stream_vocab_hash) {
    throw ValidationError("vocabulary hash of the corpus does not match the model");
  }
  const lm::ModelConfig& mc = start.config;
  stream.validate();
  const BatchSchedule schedule(stream, config.batch_size, mc.max_seq_len, config.seed);
  const lm::TokenWeights weights = lm::weights_for(config.mode, static_cast<std::size_t>(mc.vocab_size));
  const int end_step = std::min(config.steps, hooks.stop_at_step.value_or(config.steps));

  TrainResult result{start, {}};
  result.report.truncated_samples = schedule.truncated_samples();
  lm::Checkpoint& state = result.final;
  auto params = state.params.values();
  const std::size_t n = params.size();
  auto& m = state.extra[kAdamM];
  auto& v = state.extra[kAdamV];
  if (m.empty()) m.assign(n, 0.0f);
  if (v.empty()) v.assign(n, 0.0f);
  if (m.size() != n || v.size() != n) throw ValidationError("optimizer state does not match the model");

  std::vector<bool> decayed(n, false);
  for (const auto& info : state.params.layout().tensors()) {
    if (info.shape.size() > 1) std::fill_n(decayed.begin() + static_cast<std::ptrdiff_t>(info.offset), info.size, true);
  }

  if (hooks.run_dir) {
    std::filesystem::create_directories(*hooks.run_dir);
    write_text(*hooks.run_dir / "config.json",
               "{\"model\":" + mc.to_json() + ",\"train\":" + config.to_json() + "}\n");
  }
  auto save = [&](const std::string& file) {
    if (hooks.run_dir) lm::save_checkpoint(*hooks.run_dir / file, state);
  };

  lm::Parameters<float> grad(mc);
  auto g = grad.values();
  const auto t0 = std::chrono::steady_clock::now();
  double interval_loss = 0.0;
  int interval_steps = 0;

  for (int step = static_cast<int>(state.step); step < end_step; ++step) {
    const lm::Batch batch = schedule.batch_at(static_cast<std::uint64_t>(step));
    std::optional<lm::DropoutOptions> dropout;
    if (mc.dropout_rate > 0.0) dropout = lm::DropoutOptions{mc.dropout_rate, mix_seed(config.seed ^ 0x5eed, step)};

    float loss;
    try {
      loss = lm::gradients(state.params, batch, weights, grad, dropout);
    } catch (const RuntimeFailure& e) {
      save("last_good.pmc");
      throw RuntimeFailure(std::string("step ") + std::to_string(step) + ": " + e.what() +
                           (hooks.run_dir ? " (last good checkpoint saved)" : ""));
    }

    clip_global_norm(g, config.grad_clip_norm);

    const double lr = learning_rate_at(config, step);
    const double t = static_cast<double>(step + 1);
    const double bc1 = 1.0 - std::pow(config.beta1, t);
    const double bc2 = 1.0 - std::pow(config.beta2, t);
    const float b1 = static_cast<float>(config.beta1);
    const float b2 = static_cast<float>(config.beta2);
    const float lr_f = static_cast<float>(lr);
    const float step_scale = static_cast<float>(1.0 / bc1);
    const float v_scale = static_cast<float>(1.0 / bc2);
    const float eps = static_cast<float>(config.adam_eps);
    const float wd = static_cast<float>(config.weight_decay);
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      float update = (m[i] * step_scale) / (std::sqrt(v[i] * v_scale) + eps);
      if (decayed[i]) update += wd * params[i];
      params[i] -= lr_f * update;
    }
    state.step = static_cast<std::uint64_t>(step + 1);

    interval_loss += loss;
    ++interval_steps;
    const bool last = step + 1 == end_step;
    if ((step + 1) % config.report_every == 0 || last) {
      const double wall =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      TrainReportRow row{step + 1, interval_loss / interval_steps, lr, wall};
      result.report.rows.push_back(row);
      if (hooks.on_report) hooks.on_report(row);
      interval_loss = 0.0;
      interval_steps = 0;
    }
    if (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0) {
      save("checkpoint-" + std::to_string(step + 1) + ".pmc");
    }
  }

  if (hooks.run_dir) {
    save("final.pmc");
    write_text(*hooks.run_dir / "report.csv", result.report.to_csv());
  }
  return result;
}

}  // namespace poemform
