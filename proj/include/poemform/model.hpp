#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "poemform/corpus.hpp"

namespace poemform::lm {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// GPT-2 style decoder: learned positions, pre-LayerNorm blocks, GELU MLP.
struct ModelConfig {
  int layers = 8;
  int heads = 8;
  int embed_dim = 512;
  int ff_dim = 1024;
  int vocab_size = 0;
  int max_seq_len = 256;
  double dropout_rate = 0.1;
  bool tie_embeddings = false;

  void validate() const;
  int head_dim() const { return embed_dim / heads; }

  std::string to_json() const;
  static ModelConfig from_json(std::string_view text);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TensorInfo {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

// Named slices of one flat parameter buffer. Weights are stored [in, out].
class ParameterLayout {
 public:
  explicit ParameterLayout(const ModelConfig& config);

  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  const TensorInfo& find(std::string_view name) const;
  std::size_t total_size() const { return total_; }

 private:
  std::vector<TensorInfo> tensors_;
  std::size_t total_ = 0;
};

template <typename T>
class Parameters {
 public:
  // All zeros.
  explicit Parameters(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const ParameterLayout& layout() const { return *layout_; }
  std::size_t size() const { return values_.size(); }

  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }
  std::span<T> tensor(std::string_view name);
  std::span<const T> tensor(std::string_view name) const;

  template <typename U>
  Parameters<U> cast() const {
    Parameters<U> out(config_);
    auto dst = out.values();
    for (std::size_t i = 0; i < values_.size(); ++i) dst[i] = static_cast<U>(values_[i]);
    return out;
  }

 private:
  ModelConfig config_;
  std::shared_ptr<const ParameterLayout> layout_;
  std::vector<T> values_;
};

// normal(0, 0.02) weights and embeddings, zero biases, unit LayerNorm gains.
Parameters<float> init_parameters(const ModelConfig& config, std::uint64_t seed);

// Per-token-type loss multipliers.
class TokenWeights {
 public:
  // All ones.
  explicit TokenWeights(std::size_t vocab_size) : weights_(vocab_size, 1.0) {}

  static TokenWeights uniform(std::size_t vocab_size) { return TokenWeights(vocab_size); }
  // ',' and '&' weigh 2, EOS weighs 3, everything else 1.
  static TokenWeights form_stressed(std::size_t vocab_size);

  double operator[](TokenId id) const { return weights_.at(id); }
  void set(TokenId id, double weight);
  TokenWeights scaled(double factor) const;
  std::size_t size() const { return weights_.size(); }

 private:
  std::vector<double> weights_;
};

enum class LossMode { kBasic, kEnhanced };
std::string_view to_string(LossMode mode);
LossMode parse_loss_mode(std::string_view text);
TokenWeights weights_for(LossMode mode, std::size_t vocab_size);

// -x[target] + log sum_j exp(x[j]), evaluated with max subtraction.
template <typename T>
T ce_loss(std::span<const T> logits, TokenId target);

template <typename T>
T weighted_loss(std::span<const T> logits, TokenId target, const TokenWeights& weights) {
  return static_cast<T>(weights[target]) * ce_loss(logits, target);
}

// One logit row per input position.
template <typename T>
Matrix<T> forward(const Parameters<T>& params, std::span<const TokenId> ids);

// Right-padded rows; a row's length is its count of leading non-PAD ids.
struct Batch {
  int rows = 0;
  int cols = 0;
  std::vector<TokenId> ids;
  std::vector<int> lengths;

  std::span<const TokenId> row(int r) const {
    return std::span<const TokenId>(ids).subspan(static_cast<std::size_t>(r) * cols, lengths[r]);
  }
  // Number of next-token targets (sum of length - 1 over rows).
  std::size_t target_count() const;
};

// Pads with PAD to the longest row; rows longer than max_len are truncated.
Batch make_batch(const std::vector<std::span<const TokenId>>& rows, int max_len);

struct DropoutOptions {
  double rate = 0.0;
  std::uint64_t seed = 0;
};

// Mean weighted next-token loss over all non-PAD targets.
template <typename T>
T batch_loss(const Parameters<T>& params, const Batch& batch, const TokenWeights& weights,
             std::optional<DropoutOptions> dropout = std::nullopt);

// Writes d(batch_loss)/d(params) into grad (same config) and returns the loss.
template <typename T>
T gradients(const Parameters<T>& params, const Batch& batch, const TokenWeights& weights,
            Parameters<T>& grad, std::optional<DropoutOptions> dropout = std::nullopt);

// Incremental decoding with a key/value cache.
template <typename T>
class DecoderState {
 public:
  explicit DecoderState(const Parameters<T>& params);
  ~DecoderState();
  DecoderState(DecoderState&&) noexcept;
  DecoderState& operator=(DecoderState&&) noexcept;

  // Appends one token and returns the logits predicting the next one.
  std::span<const T> push(TokenId id);
  int length() const;
  void reset();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Binary checkpoint: "PMC1", config (JSON record), vocab hash, step, and
// named little-endian float32 arrays. Arrays prefixed "param:" are the model;
// anything else (optimizer state) is carried in `extra`.
struct Checkpoint {
  ModelConfig config;
  std::uint64_t vocab_hash = 0;
  std::uint64_t step = 0;
  Parameters<float> params;
  std::map<std::string, std::vector<float>> extra;

  explicit Checkpoint(const ModelConfig& c) : config(c), params(c) {}
};

// Writes to a temporary file and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace poemform::lm
