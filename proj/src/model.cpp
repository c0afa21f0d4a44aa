#include "poemform/model.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "poemform/errors.hpp"
#include "poemform/rng.hpp"

namespace poemform::lm {

namespace {

using nlohmann::json;

template <typename T>
using Mat = Matrix<T>;
template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using ConstMap = Eigen::Map<const Mat<T>>;
template <typename T>
using MutMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstRowMap = Eigen::Map<const RowVec<T>>;
template <typename T>
using MutRowMap = Eigen::Map<RowVec<T>>;

constexpr double kLayerNormEps = 1e-5;

std::string layer_name(int layer, std::string_view leaf) {
  return "h." + std::to_string(layer) + "." + std::string(leaf);
}

// Offsets of one block's tensors inside the flat buffer.
struct BlockOffsets {
  std::size_t ln1_w, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_w, ln2_b, fc_w, fc_b, fc2_w, fc2_b;
};

struct Offsets {
  std::size_t wte, wpe, lnf_w, lnf_b, lm_head;
  std::vector<BlockOffsets> blocks;
};

Offsets offsets_of(const ParameterLayout& layout, const ModelConfig& c) {
  Offsets o{};
  o.wte = layout.find("wte").offset;
  o.wpe = layout.find("wpe").offset;
  o.lnf_w = layout.find("ln_f.weight").offset;
  o.lnf_b = layout.find("ln_f.bias").offset;
  o.lm_head = c.tie_embeddings ? o.wte : layout.find("lm_head.weight").offset;
  for (int l = 0; l < c.layers; ++l) {
    auto at = [&](std::string_view leaf) { return layout.find(layer_name(l, leaf)).offset; };
    o.blocks.push_back({at("ln_1.weight"), at("ln_1.bias"), at("attn.c_attn.weight"), at("attn.c_attn.bias"),
                        at("attn.c_proj.weight"), at("attn.c_proj.bias"), at("ln_2.weight"), at("ln_2.bias"),
                        at("mlp.c_fc.weight"), at("mlp.c_fc.bias"), at("mlp.c_proj.weight"),
                        at("mlp.c_proj.bias")});
  }
  return o;
}

template <typename T>
void layer_norm(const Mat<T>& x, const T* gamma, const T* beta, Mat<T>& xhat, ColVec<T>& rstd, Mat<T>& y) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  xhat.resize(n, d);
  rstd.resize(n);
  y.resize(n, d);
  ConstRowMap<T> g(gamma, d);
  ConstRowMap<T> b(beta, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    const T r = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    rstd(i) = r;
    xhat.row(i) = (x.row(i).array() - mean) * r;
    y.row(i) = xhat.row(i).cwiseProduct(g) + b;
  }
}

// Accumulates the input gradient into dx and parameter gradients into dgamma/dbeta.
template <typename T>
void layer_norm_backward(const Mat<T>& dy, const Mat<T>& xhat, const ColVec<T>& rstd, const T* gamma,
                         T* dgamma, T* dbeta, Mat<T>& dx) {
  const Eigen::Index d = dy.cols();
  ConstRowMap<T> g(gamma, d);
  MutRowMap<T> dg(dgamma, d);
  MutRowMap<T> db(dbeta, d);
  dg += RowVec<T>(dy.cwiseProduct(xhat).colwise().sum());
  db += RowVec<T>(dy.colwise().sum());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const RowVec<T> dxhat = dy.row(i).cwiseProduct(g);
    const T mean_dxhat = dxhat.mean();
    const T mean_dxhat_xhat = dxhat.cwiseProduct(xhat.row(i)).mean();
    dx.row(i).array() +=
        rstd(i) * (dxhat.array() - mean_dxhat - xhat.row(i).array() * mean_dxhat_xhat);
  }
}

template <typename T>
constexpr T kGeluC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
template <typename T>
constexpr T kGeluA = static_cast<T>(0.044715);

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::tanh(kGeluC<T> * (x + kGeluA<T> * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
  const T t = std::tanh(kGeluC<T> * (x + kGeluA<T> * x * x * x));
  return T(0.5) * (T(1) + t) +
         T(0.5) * x * (T(1) - t * t) * kGeluC<T> * (T(1) + T(3) * kGeluA<T> * x * x);
}

template <typename T>
void add_bias(Mat<T>& y, const T* bias) {
  y.rowwise() += ConstRowMap<T>(bias, y.cols());
}

// Causally masked softmax of each row of `scores` in place; row i keeps j <= offset + i.
template <typename T>
void causal_softmax(Mat<T>& scores, Eigen::Index offset = 0) {
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    const Eigen::Index keep = std::min<Eigen::Index>(offset + i + 1, scores.cols());
    auto row = scores.row(i);
    const T mx = row.head(keep).maxCoeff();
    T sum = 0;
    for (Eigen::Index j = 0; j < keep; ++j) {
      row(j) = std::exp(row(j) - mx);
      sum += row(j);
    }
    row.head(keep) /= sum;
    row.tail(scores.cols() - keep).setZero();
  }
}

template <typename T>
Mat<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, const DropoutOptions& opt, std::uint64_t site) {
  Mat<T> mask(rows, cols);
  Rng rng(mix_seed(opt.seed, site));
  const T keep_scale = static_cast<T>(1.0 / (1.0 - opt.rate));
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = rng.uniform() < opt.rate ? T(0) : keep_scale;
  }
  return mask;
}

template <typename T>
struct LayerCache {
  Mat<T> xhat1, a, qkv, att, drop1, xhat2, m, f, g, drop2;
  ColVec<T> rstd1, rstd2;
  std::vector<Mat<T>> probs;  // [row * heads + head]
};

template <typename T>
struct ForwardCache {
  std::vector<Eigen::Index> start, len;
  std::vector<TokenId> ids;
  std::vector<int> pos;
  Mat<T> drop0, xhatf, xf, logits;
  ColVec<T> rstdf;
  std::vector<LayerCache<T>> layers;
  bool dropout = false;
};

template <typename T>
void check_ids(const ModelConfig& c, std::span<const TokenId> ids) {
  if (static_cast<int>(ids.size()) > c.max_seq_len) {
    throw ValidationError("sequence length " + std::to_string(ids.size()) + " exceeds max_seq_len " +
                          std::to_string(c.max_seq_len));
  }
  for (TokenId id : ids) {
    if (id >= static_cast<TokenId>(c.vocab_size)) {
      throw ValidationError("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(c.vocab_size));
    }
  }
}

template <typename T>
void run_forward(const Parameters<T>& params, const std::vector<std::span<const TokenId>>& rows,
                 const std::optional<DropoutOptions>& dropout, ForwardCache<T>& cache) {
  const ModelConfig& c = params.config();
  const Offsets off = offsets_of(params.layout(), c);
  const T* base = params.values().data();
  const Eigen::Index d = c.embed_dim;
  const Eigen::Index hd = c.head_dim();
  const Eigen::Index V = c.vocab_size;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  cache.dropout = dropout && dropout->rate > 0.0;

  Eigen::Index n = 0;
  cache.start.clear();
  cache.len.clear();
  cache.ids.clear();
  cache.pos.clear();
  for (const auto& r : rows) {
    check_ids<T>(c, r);
    cache.start.push_back(n);
    cache.len.push_back(static_cast<Eigen::Index>(r.size()));
    for (std::size_t t = 0; t < r.size(); ++t) {
      cache.ids.push_back(r[t]);
      cache.pos.push_back(static_cast<int>(t));
    }
    n += static_cast<Eigen::Index>(r.size());
  }

  ConstMap<T> wte(base + off.wte, V, d);
  ConstMap<T> wpe(base + off.wpe, c.max_seq_len, d);
  Mat<T> x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) x.row(i) = wte.row(cache.ids[i]) + wpe.row(cache.pos[i]);
  std::uint64_t site = 0;
  if (cache.dropout) {
    cache.drop0 = dropout_mask<T>(n, d, *dropout, site++);
    x.array() *= cache.drop0.array();
  }

  cache.layers.resize(static_cast<std::size_t>(c.layers));
  for (int l = 0; l < c.layers; ++l) {
    const BlockOffsets& b = off.blocks[l];
    LayerCache<T>& lc = cache.layers[l];
    layer_norm<T>(x, base + b.ln1_w, base + b.ln1_b, lc.xhat1, lc.rstd1, lc.a);
    lc.qkv.noalias() = lc.a * ConstMap<T>(base + b.qkv_w, d, 3 * d);
    add_bias<T>(lc.qkv, base + b.qkv_b);

    lc.att.setZero(n, d);
    lc.probs.resize(rows.size() * c.heads);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const Eigen::Index s = cache.start[r];
      const Eigen::Index L = cache.len[r];
      if (L == 0) continue;
      for (int h = 0; h < c.heads; ++h) {
        Mat<T>& P = lc.probs[r * c.heads + h];
        P.noalias() = lc.qkv.block(s, h * hd, L, hd) * lc.qkv.block(s, d + h * hd, L, hd).transpose();
        P *= scale;
        causal_softmax<T>(P);
        lc.att.block(s, h * hd, L, hd).noalias() = P * lc.qkv.block(s, 2 * d + h * hd, L, hd);
      }
    }
    Mat<T> proj;
    proj.noalias() = lc.att * ConstMap<T>(base + b.proj_w, d, d);
    add_bias<T>(proj, base + b.proj_b);
    if (cache.dropout) {
      lc.drop1 = dropout_mask<T>(n, d, *dropout, site++);
      proj.array() *= lc.drop1.array();
    }
    x += proj;

    layer_norm<T>(x, base + b.ln2_w, base + b.ln2_b, lc.xhat2, lc.rstd2, lc.m);
    lc.f.noalias() = lc.m * ConstMap<T>(base + b.fc_w, d, c.ff_dim);
    add_bias<T>(lc.f, base + b.fc_b);
    lc.g = lc.f.unaryExpr([](T v) { return gelu(v); });
    Mat<T> out;
    out.noalias() = lc.g * ConstMap<T>(base + b.fc2_w, c.ff_dim, d);
    add_bias<T>(out, base + b.fc2_b);
    if (cache.dropout) {
      lc.drop2 = dropout_mask<T>(n, d, *dropout, site++);
      out.array() *= lc.drop2.array();
    }
    x += out;
  }

  layer_norm<T>(x, base + off.lnf_w, base + off.lnf_b, cache.xhatf, cache.rstdf, cache.xf);
  cache.logits.noalias() = cache.xf * ConstMap<T>(base + off.lm_head, V, d).transpose();
}

template <typename T>
T row_ce(const T* x, Eigen::Index n, TokenId target) {
  Eigen::Index arg = 0;
  for (Eigen::Index j = 0; j < n; ++j) {
    if (!std::isfinite(x[j])) throw RuntimeFailure("non-finite logit at index " + std::to_string(j));
    if (x[j] > x[arg]) arg = j;
  }
  const T mx = x[arg];
  T rest = 0;
  for (Eigen::Index j = 0; j < n; ++j) {
    if (j != arg) rest += std::exp(x[j] - mx);
  }
  return (mx - x[target]) + std::log1p(rest);
}

// Loss over the cached logits and, when dlogits is non-null, its gradient.
template <typename T>
T loss_from_cache(const ForwardCache<T>& cache, const TokenWeights& weights, Mat<T>* dlogits) {
  const Eigen::Index V = cache.logits.cols();
  if (weights.size() != static_cast<std::size_t>(V)) {
    throw ValidationError("token weights cover " + std::to_string(weights.size()) + " ids, model has " +
                          std::to_string(V));
  }
  std::size_t count = 0;
  for (std::size_t r = 0; r < cache.start.size(); ++r) {
    for (Eigen::Index t = 0; t + 1 < cache.len[r]; ++t) {
      if (cache.ids[cache.start[r] + t + 1] != Vocabulary::kPad) ++count;
    }
  }
  if (count == 0) throw ValidationError("batch has no non-PAD targets");
  if (dlogits) dlogits->setZero(cache.logits.rows(), V);

  double total = 0.0;
  const T inv_count = static_cast<T>(1.0 / static_cast<double>(count));
  for (std::size_t r = 0; r < cache.start.size(); ++r) {
    for (Eigen::Index t = 0; t + 1 < cache.len[r]; ++t) {
      const Eigen::Index i = cache.start[r] + t;
      const TokenId target = cache.ids[i + 1];
      if (target == Vocabulary::kPad) continue;
      const T w = static_cast<T>(weights[target]);
      const T* x = cache.logits.row(i).data();
      total += static_cast<double>(w * row_ce(x, V, target));
      if (dlogits) {
        auto drow = dlogits->row(i);
        const T mx = cache.logits.row(i).maxCoeff();
        drow = (cache.logits.row(i).array() - mx).exp();
        drow /= drow.sum();
        drow(target) -= T(1);
        drow *= w * inv_count;
      }
    }
  }
  const T loss = static_cast<T>(total / static_cast<double>(count));
  if (!std::isfinite(loss)) throw RuntimeFailure("non-finite batch loss");
  return loss;
}

template <typename T>
void run_backward(const Parameters<T>& params, const ForwardCache<T>& cache, const Mat<T>& dlogits,
                  Parameters<T>& grad) {
  const ModelConfig& c = params.config();
  const Offsets off = offsets_of(params.layout(), c);
  const T* base = params.values().data();
  T* gbase = grad.values().data();
  const Eigen::Index d = c.embed_dim;
  const Eigen::Index hd = c.head_dim();
  const Eigen::Index V = c.vocab_size;
  const Eigen::Index n = cache.logits.rows();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  MutMap<T>(gbase + off.lm_head, V, d).noalias() += dlogits.transpose() * cache.xf;
  Mat<T> dxf;
  dxf.noalias() = dlogits * ConstMap<T>(base + off.lm_head, V, d);
  Mat<T> dx = Mat<T>::Zero(n, d);
  layer_norm_backward<T>(dxf, cache.xhatf, cache.rstdf, base + off.lnf_w, gbase + off.lnf_w, gbase + off.lnf_b,
                         dx);

  for (int l = c.layers - 1; l >= 0; --l) {
    const BlockOffsets& b = off.blocks[l];
    const LayerCache<T>& lc = cache.layers[l];

    Mat<T> dout = dx;
    if (cache.dropout) dout.array() *= lc.drop2.array();
    MutMap<T>(gbase + b.fc2_w, c.ff_dim, d).noalias() += lc.g.transpose() * dout;
    MutRowMap<T>(gbase + b.fc2_b, d) += RowVec<T>(dout.colwise().sum());
    Mat<T> df;
    df.noalias() = dout * ConstMap<T>(base + b.fc2_w, c.ff_dim, d).transpose();
    df.array() *= lc.f.unaryExpr([](T v) { return gelu_grad(v); }).array();
    MutMap<T>(gbase + b.fc_w, d, c.ff_dim).noalias() += lc.m.transpose() * df;
    MutRowMap<T>(gbase + b.fc_b, c.ff_dim) += RowVec<T>(df.colwise().sum());
    Mat<T> dm;
    dm.noalias() = df * ConstMap<T>(base + b.fc_w, d, c.ff_dim).transpose();
    layer_norm_backward<T>(dm, lc.xhat2, lc.rstd2, base + b.ln2_w, gbase + b.ln2_w, gbase + b.ln2_b, dx);

    Mat<T> dproj = dx;
    if (cache.dropout) dproj.array() *= lc.drop1.array();
    MutMap<T>(gbase + b.proj_w, d, d).noalias() += lc.att.transpose() * dproj;
    MutRowMap<T>(gbase + b.proj_b, d) += RowVec<T>(dproj.colwise().sum());
    Mat<T> datt;
    datt.noalias() = dproj * ConstMap<T>(base + b.proj_w, d, d).transpose();

    Mat<T> dqkv = Mat<T>::Zero(n, 3 * d);
    for (std::size_t r = 0; r < cache.start.size(); ++r) {
      const Eigen::Index s = cache.start[r];
      const Eigen::Index L = cache.len[r];
      if (L == 0) continue;
      for (int h = 0; h < c.heads; ++h) {
        const Mat<T>& P = lc.probs[r * c.heads + h];
        const auto dO = datt.block(s, h * hd, L, hd);
        const auto Q = lc.qkv.block(s, h * hd, L, hd);
        const auto K = lc.qkv.block(s, d + h * hd, L, hd);
        const auto Vv = lc.qkv.block(s, 2 * d + h * hd, L, hd);
        Mat<T> dP;
        dP.noalias() = dO * Vv.transpose();
        dqkv.block(s, 2 * d + h * hd, L, hd).noalias() += P.transpose() * dO;
        const ColVec<T> rowdot = dP.cwiseProduct(P).rowwise().sum();
        Mat<T> dS = P.cwiseProduct(dP.colwise() - rowdot);
        dS *= scale;
        dqkv.block(s, h * hd, L, hd).noalias() += dS * K;
        dqkv.block(s, d + h * hd, L, hd).noalias() += dS.transpose() * Q;
      }
    }
    MutMap<T>(gbase + b.qkv_w, d, 3 * d).noalias() += lc.a.transpose() * dqkv;
    MutRowMap<T>(gbase + b.qkv_b, 3 * d) += RowVec<T>(dqkv.colwise().sum());
    Mat<T> da;
    da.noalias() = dqkv * ConstMap<T>(base + b.qkv_w, d, 3 * d).transpose();
    layer_norm_backward<T>(da, lc.xhat1, lc.rstd1, base + b.ln1_w, gbase + b.ln1_w, gbase + b.ln1_b, dx);
  }

  if (cache.dropout) dx.array() *= cache.drop0.array();
  MutMap<T> dwte(gbase + off.wte, V, d);
  MutMap<T> dwpe(gbase + off.wpe, c.max_seq_len, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    dwte.row(cache.ids[i]) += dx.row(i);
    dwpe.row(cache.pos[i]) += dx.row(i);
  }
}

std::vector<std::span<const TokenId>> batch_rows(const Batch& batch) {
  std::vector<std::span<const TokenId>> rows;
  rows.reserve(static_cast<std::size_t>(batch.rows));
  for (int r = 0; r < batch.rows; ++r) rows.push_back(batch.row(r));
  return rows;
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  Reader(std::string data, std::string name) : data_(std::move(data)), name_(std::move(name)) {}
  std::uint64_t le(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw ValidationError("checkpoint '" + name_ + "' is truncated");
  }
  std::string data_;
  std::string name_;
  std::size_t pos_ = 0;
};

}  // namespace

void ModelConfig::validate() const {
  if (layers < 1 || heads < 1 || embed_dim < 1 || ff_dim < 1 || vocab_size < 1 || max_seq_len < 1) {
    throw ValidationError("model dimensions must all be >= 1");
  }
  if (embed_dim % heads != 0) {
    throw ValidationError("embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " +
                          std::to_string(heads));
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ValidationError("dropout_rate must be in [0, 1)");
}

std::string ModelConfig::to_json() const {
  json j = {{"layers", layers},         {"heads", heads},
            {"embed_dim", embed_dim},   {"ff_dim", ff_dim},
            {"vocab_size", vocab_size}, {"max_seq_len", max_seq_len},
            {"dropout_rate", dropout_rate}, {"tie_embeddings", tie_embeddings}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("model config is not valid JSON: ") + e.what());
  }
  ModelConfig c;
  try {
    c.layers = j.at("layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.ff_dim = j.at("ff_dim").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
    c.tie_embeddings = j.value("tie_embeddings", false);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

ParameterLayout::ParameterLayout(const ModelConfig& c) {
  c.validate();
  auto add = [this](std::string name, std::vector<int> shape) {
    std::size_t size = 1;
    for (int s : shape) size *= static_cast<std::size_t>(s);
    tensors_.push_back({std::move(name), std::move(shape), total_, size});
    total_ += size;
  };
  const int d = c.embed_dim;
  add("wte", {c.vocab_size, d});
  add("wpe", {c.max_seq_len, d});
  for (int l = 0; l < c.layers; ++l) {
    add(layer_name(l, "ln_1.weight"), {d});
    add(layer_name(l, "ln_1.bias"), {d});
    add(layer_name(l, "attn.c_attn.weight"), {d, 3 * d});
    add(layer_name(l, "attn.c_attn.bias"), {3 * d});
    add(layer_name(l, "attn.c_proj.weight"), {d, d});
    add(layer_name(l, "attn.c_proj.bias"), {d});
    add(layer_name(l, "ln_2.weight"), {d});
    add(layer_name(l, "ln_2.bias"), {d});
    add(layer_name(l, "mlp.c_fc.weight"), {d, c.ff_dim});
    add(layer_name(l, "mlp.c_fc.bias"), {c.ff_dim});
    add(layer_name(l, "mlp.c_proj.weight"), {c.ff_dim, d});
    add(layer_name(l, "mlp.c_proj.bias"), {d});
  }
  add("ln_f.weight", {d});
  add("ln_f.bias", {d});
  if (!c.tie_embeddings) add("lm_head.weight", {c.vocab_size, d});
}

const TensorInfo& ParameterLayout::find(std::string_view name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return t;
  }
  throw ValidationError("no parameter named '" + std::string(name) + "'");
}

template <typename T>
Parameters<T>::Parameters(const ModelConfig& config)
    : config_(config), layout_(std::make_shared<const ParameterLayout>(config)) {
  values_.assign(layout_->total_size(), T(0));
}

template <typename T>
std::span<T> Parameters<T>::tensor(std::string_view name) {
  const auto& info = layout_->find(name);
  return std::span<T>(values_).subspan(info.offset, info.size);
}

template <typename T>
std::span<const T> Parameters<T>::tensor(std::string_view name) const {
  const auto& info = layout_->find(name);
  return std::span<const T>(values_).subspan(info.offset, info.size);
}

Parameters<float> init_parameters(const ModelConfig& config, std::uint64_t seed) {
  Parameters<float> params(config);
  Rng rng(seed);
  for (const auto& info : params.layout().tensors()) {
    auto span = params.tensor(info.name);
    const bool is_gain = info.name.ends_with("ln_1.weight") || info.name.ends_with("ln_2.weight") ||
                         info.name == "ln_f.weight";
    const bool is_bias = info.name.ends_with(".bias");
    for (float& v : span) {
      if (is_gain) {
        v = 1.0f;
      } else if (is_bias) {
        v = 0.0f;
      } else {
        v = static_cast<float>(0.02 * rng.normal());
      }
    }
  }
  return params;
}

TokenWeights TokenWeights::form_stressed(std::size_t vocab_size) {
  if (vocab_size < Vocabulary::kSpecialCount) {
    throw ValidationError("vocabulary of " + std::to_string(vocab_size) + " ids lacks the special tokens");
  }
  TokenWeights w(vocab_size);
  w.set(Vocabulary::kLineSep, 2.0);
  w.set(Vocabulary::kStanzaSep, 2.0);
  w.set(Vocabulary::kEos, 3.0);
  return w;
}

void TokenWeights::set(TokenId id, double weight) {
  if (!(weight >= 0.0) || !std::isfinite(weight)) throw ValidationError("token weight must be finite and >= 0");
  if (id >= weights_.size()) throw ValidationError("token id " + std::to_string(id) + " outside the vocabulary");
  weights_[id] = weight;
}

TokenWeights TokenWeights::scaled(double factor) const {
  TokenWeights out = *this;
  for (double& w : out.weights_) w *= factor;
  return out;
}

std::string_view to_string(LossMode mode) { return mode == LossMode::kBasic ? "basic" : "enhanced"; }

LossMode parse_loss_mode(std::string_view text) {
  if (text == "basic") return LossMode::kBasic;
  if (text == "enhanced") return LossMode::kEnhanced;
  throw ValidationError("unknown mode '" + std::string(text) + "' (expected basic or enhanced)");
}

TokenWeights weights_for(LossMode mode, std::size_t vocab_size) {
  return mode == LossMode::kBasic ? TokenWeights::uniform(vocab_size) : TokenWeights::form_stressed(vocab_size);
}

template <typename T>
T ce_loss(std::span<const T> logits, TokenId target) {
  if (target >= logits.size()) throw ValidationError("target id outside logit vector");
  return row_ce(logits.data(), static_cast<Eigen::Index>(logits.size()), target);
}

template <typename T>
Matrix<T> forward(const Parameters<T>& params, std::span<const TokenId> ids) {
  if (ids.empty()) throw ValidationError("forward pass needs at least one token");
  ForwardCache<T> cache;
  run_forward<T>(params, {ids}, std::nullopt, cache);
  if (!cache.logits.allFinite()) throw RuntimeFailure("forward pass produced non-finite logits");
  return std::move(cache.logits);
}

std::size_t Batch::target_count() const {
  std::size_t n = 0;
  for (int len : lengths) n += len > 1 ? static_cast<std::size_t>(len - 1) : 0;
  return n;
}

Batch make_batch(const std::vector<std::span<const TokenId>>& rows, int max_len) {
  Batch batch;
  batch.rows = static_cast<int>(rows.size());
  for (const auto& r : rows) batch.cols = std::max(batch.cols, std::min<int>(static_cast<int>(r.size()), max_len));
  batch.ids.assign(static_cast<std::size_t>(batch.rows) * batch.cols, Vocabulary::kPad);
  for (int i = 0; i < batch.rows; ++i) {
    const int len = std::min<int>(static_cast<int>(rows[i].size()), max_len);
    int real = 0;
    while (real < len && rows[i][real] != Vocabulary::kPad) ++real;
    std::copy_n(rows[i].begin(), len, batch.ids.begin() + static_cast<std::ptrdiff_t>(i) * batch.cols);
    batch.lengths.push_back(real);
  }
  return batch;
}

template <typename T>
T batch_loss(const Parameters<T>& params, const Batch& batch, const TokenWeights& weights,
             std::optional<DropoutOptions> dropout) {
  ForwardCache<T> cache;
  run_forward<T>(params, batch_rows(batch), dropout, cache);
  return loss_from_cache<T>(cache, weights, nullptr);
}

template <typename T>
T gradients(const Parameters<T>& params, const Batch& batch, const TokenWeights& weights, Parameters<T>& grad,
            std::optional<DropoutOptions> dropout) {
  if (!(grad.config() == params.config())) throw ValidationError("gradient buffer config differs from model");
  ForwardCache<T> cache;
  run_forward<T>(params, batch_rows(batch), dropout, cache);
  Mat<T> dlogits;
  const T loss = loss_from_cache<T>(cache, weights, &dlogits);
  std::fill(grad.values().begin(), grad.values().end(), T(0));
  run_backward<T>(params, cache, dlogits, grad);
  for (const auto& info : grad.layout().tensors()) {
    for (T v : grad.tensor(info.name)) {
      if (!std::isfinite(v)) throw RuntimeFailure("non-finite gradient in parameter '" + info.name + "'");
    }
  }
  return loss;
}

template <typename T>
struct DecoderState<T>::Impl {
  const Parameters<T>* params;
  Offsets off;
  std::vector<Mat<T>> keys, values;
  Mat<T> logits;
  int pos = 0;
};

template <typename T>
DecoderState<T>::DecoderState(const Parameters<T>& params) : impl_(std::make_unique<Impl>()) {
  const ModelConfig& c = params.config();
  impl_->params = &params;
  impl_->off = offsets_of(params.layout(), c);
  impl_->keys.assign(static_cast<std::size_t>(c.layers), Mat<T>(c.max_seq_len, c.embed_dim));
  impl_->values.assign(static_cast<std::size_t>(c.layers), Mat<T>(c.max_seq_len, c.embed_dim));
}

template <typename T>
DecoderState<T>::~DecoderState() = default;
template <typename T>
DecoderState<T>::DecoderState(DecoderState&&) noexcept = default;
template <typename T>
DecoderState<T>& DecoderState<T>::operator=(DecoderState&&) noexcept = default;

template <typename T>
int DecoderState<T>::length() const {
  return impl_->pos;
}

template <typename T>
void DecoderState<T>::reset() {
  impl_->pos = 0;
}

template <typename T>
std::span<const T> DecoderState<T>::push(TokenId id) {
  Impl& s = *impl_;
  const ModelConfig& c = s.params->config();
  if (s.pos >= c.max_seq_len) throw ValidationError("decoder reached max_seq_len");
  if (id >= static_cast<TokenId>(c.vocab_size)) throw ValidationError("token id outside vocabulary");
  const T* base = s.params->values().data();
  const Eigen::Index d = c.embed_dim;
  const Eigen::Index hd = c.head_dim();
  const Eigen::Index t = s.pos;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  Mat<T> x = ConstMap<T>(base + s.off.wte, c.vocab_size, d).row(id) +
             ConstMap<T>(base + s.off.wpe, c.max_seq_len, d).row(t);
  Mat<T> xhat, y, qkv, att(1, d), tmp;
  ColVec<T> rstd;
  for (int l = 0; l < c.layers; ++l) {
    const BlockOffsets& b = s.off.blocks[l];
    layer_norm<T>(x, base + b.ln1_w, base + b.ln1_b, xhat, rstd, y);
    qkv.noalias() = y * ConstMap<T>(base + b.qkv_w, d, 3 * d);
    add_bias<T>(qkv, base + b.qkv_b);
    s.keys[l].row(t) = qkv.block(0, d, 1, d);
    s.values[l].row(t) = qkv.block(0, 2 * d, 1, d);
    for (int h = 0; h < c.heads; ++h) {
      Mat<T> scores;
      scores.noalias() = qkv.block(0, h * hd, 1, hd) * s.keys[l].block(0, h * hd, t + 1, hd).transpose();
      scores *= scale;
      causal_softmax<T>(scores, t);
      att.block(0, h * hd, 1, hd).noalias() = scores * s.values[l].block(0, h * hd, t + 1, hd);
    }
    tmp.noalias() = att * ConstMap<T>(base + b.proj_w, d, d);
    add_bias<T>(tmp, base + b.proj_b);
    x += tmp;
    layer_norm<T>(x, base + b.ln2_w, base + b.ln2_b, xhat, rstd, y);
    Mat<T> f;
    f.noalias() = y * ConstMap<T>(base + b.fc_w, d, c.ff_dim);
    add_bias<T>(f, base + b.fc_b);
    f = f.unaryExpr([](T v) { return gelu(v); });
    tmp.noalias() = f * ConstMap<T>(base + b.fc2_w, c.ff_dim, d);
    add_bias<T>(tmp, base + b.fc2_b);
    x += tmp;
  }
  layer_norm<T>(x, base + s.off.lnf_w, base + s.off.lnf_b, xhat, rstd, y);
  s.logits.noalias() = y * ConstMap<T>(base + s.off.lm_head, c.vocab_size, d).transpose();
  ++s.pos;
  return std::span<const T>(s.logits.data(), static_cast<std::size_t>(s.logits.size()));
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  if (!(checkpoint.params.config() == checkpoint.config)) {
    throw ValidationError("checkpoint parameters do not match its config");
  }
  std::string bytes = "PMC1";
  const std::string config = checkpoint.config.to_json();
  put_u32(bytes, static_cast<std::uint32_t>(config.size()));
  bytes += config;
  put_u64(bytes, checkpoint.vocab_hash);
  put_u64(bytes, checkpoint.step);

  auto put_array = [&bytes](const std::string& name, const std::vector<int>& shape, std::span<const float> data) {
    put_u32(bytes, static_cast<std::uint32_t>(name.size()));
    bytes += name;
    put_u32(bytes, static_cast<std::uint32_t>(shape.size()));
    for (int s : shape) put_u32(bytes, static_cast<std::uint32_t>(s));
    for (float v : data) put_u32(bytes, std::bit_cast<std::uint32_t>(v));
  };
  const auto& tensors = checkpoint.params.layout().tensors();
  put_u32(bytes, static_cast<std::uint32_t>(tensors.size() + checkpoint.extra.size()));
  for (const auto& info : tensors) put_array("param:" + info.name, info.shape, checkpoint.params.tensor(info.name));
  for (const auto& [name, data] : checkpoint.extra) {
    if (name.starts_with("param:")) throw ValidationError("extra checkpoint array uses reserved prefix");
    put_array(name, {static_cast<int>(data.size())}, data);
  }

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw RuntimeFailure("cannot write checkpoint '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw RuntimeFailure("short write to '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  Reader reader(buffer.str(), path.string());
  if (reader.bytes(4) != "PMC1") throw ValidationError("'" + path.string() + "' is not a checkpoint (bad magic)");
  const auto config_len = reader.le(4);
  Checkpoint ckpt(ModelConfig::from_json(reader.bytes(config_len)));
  ckpt.vocab_hash = reader.le(8);
  ckpt.step = reader.le(8);
  const auto count = reader.le(4);
  std::size_t params_seen = 0;
  for (std::uint64_t a = 0; a < count; ++a) {
    const std::string name = reader.bytes(reader.le(4));
    const auto rank = reader.le(4);
    std::vector<int> shape;
    std::size_t size = 1;
    for (std::uint64_t k = 0; k < rank; ++k) {
      shape.push_back(static_cast<int>(reader.le(4)));
      size *= static_cast<std::size_t>(shape.back());
    }
    std::vector<float> data(size);
    for (float& v : data) v = std::bit_cast<float>(static_cast<std::uint32_t>(reader.le(4)));
    if (name.starts_with("param:")) {
      const auto& info = ckpt.params.layout().find(name.substr(6));
      if (info.shape != shape) throw ValidationError("checkpoint array '" + name + "' has the wrong shape");
      std::copy(data.begin(), data.end(), ckpt.params.tensor(info.name).begin());
      ++params_seen;
    } else {
      ckpt.extra.emplace(name, std::move(data));
    }
  }
  if (params_seen != ckpt.params.layout().tensors().size()) {
    throw ValidationError("checkpoint '" + path.string() + "' is missing parameter arrays");
  }
  if (!reader.done()) throw ValidationError("checkpoint '" + path.string() + "' has trailing bytes");
  return ckpt;
}

template class Parameters<float>;
template class Parameters<double>;
template class DecoderState<float>;
template class DecoderState<double>;
template float ce_loss<float>(std::span<const float>, TokenId);
template double ce_loss<double>(std::span<const double>, TokenId);
template Matrix<float> forward<float>(const Parameters<float>&, std::span<const TokenId>);
template Matrix<double> forward<double>(const Parameters<double>&, std::span<const TokenId>);
template float batch_loss<float>(const Parameters<float>&, const Batch&, const TokenWeights&,
                                 std::optional<DropoutOptions>);
template double batch_loss<double>(const Parameters<double>&, const Batch&, const TokenWeights&,
                                   std::optional<DropoutOptions>);
template float gradients<float>(const Parameters<float>&, const Batch&, const TokenWeights&, Parameters<float>&,
                                std::optional<DropoutOptions>);
template double gradients<double>(const Parameters<double>&, const Batch&, const TokenWeights&,
                                  Parameters<double>&, std::optional<DropoutOptions>);

}  // namespace poemform::lm
