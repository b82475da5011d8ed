#pragma once

// Dense layers with explicit reverse-mode passes. A gradient is stored in an
// instance of the same type as the layer, so `grad.weight` mirrors `weight`.

#include <Eigen/Dense>
#include <concepts>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "sempool/tokenizer.hpp"

namespace sempool {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;
using Rng = std::mt19937_64;

template <class T, class U>
concept SameBase = std::same_as<std::remove_const_t<T>, U>;

void fill_uniform(Matrix& m, Rng& rng, double bound);
void fill_uniform(Vector& v, Rng& rng, double bound);
void fill_normal(Matrix& m, Rng& rng, double stddev);

struct Linear {
  Matrix weight;  // out x in
  Vector bias;    // out

  Linear() = default;
  Linear(Index in, Index out);

  Index in() const { return weight.cols(); }
  Index out() const { return weight.rows(); }

  /// Rows of `x` are samples.
  Matrix forward(const Matrix& x) const;
  /// Accumulates into `grad`; returns d/dx.
  Matrix backward(const Matrix& x, const Matrix& dy, Linear& grad) const;

  void init(Rng& rng);  // U(-1/sqrt(in), 1/sqrt(in)) weights, zero bias
};

template <SameBase<Linear> L, class F>
void visit_params(L& l, const std::string& prefix, F&& f) {
  f(prefix + ".weight", l.weight);
  f(prefix + ".bias", l.bias);
}

struct LayerNorm {
  static constexpr double kEps = 1e-5;
  Vector gamma;
  Vector beta;

  struct Cache {
    Matrix normalized;
    Vector inv_std;
  };

  LayerNorm() = default;
  explicit LayerNorm(Index width);

  Matrix forward(const Matrix& x, Cache& cache) const;
  Matrix backward(const Cache& cache, const Matrix& dy, LayerNorm& grad) const;
};

template <SameBase<LayerNorm> L, class F>
void visit_params(L& l, const std::string& prefix, F&& f) {
  f(prefix + ".gamma", l.gamma);
  f(prefix + ".beta", l.beta);
}

Matrix gelu(const Matrix& x);
Matrix gelu_grad(const Matrix& x);

struct SelfAttention {
  int heads = 1;
  Linear qkv;  // width -> 3*width
  Linear out;

  struct Cache {
    Matrix input;
    Matrix qkv;
    std::vector<Matrix> probs;  // per head, T x T
    Matrix mixed;
  };

  SelfAttention() = default;
  SelfAttention(Index width, int heads);

  Matrix forward(const Matrix& x, Cache& cache) const;
  Matrix backward(const Cache& cache, const Matrix& dy, SelfAttention& grad) const;
};

template <SameBase<SelfAttention> A, class F>
void visit_params(A& a, const std::string& prefix, F&& f) {
  visit_params(a.qkv, prefix + ".qkv", f);
  visit_params(a.out, prefix + ".out", f);
}

/// Pre-norm block: x + attn(ln1(x)), then + ffn(ln2(.)).
struct TransformerLayer {
  LayerNorm ln1;
  SelfAttention attn;
  LayerNorm ln2;
  Linear ff_in;
  Linear ff_out;

  struct Cache {
    LayerNorm::Cache ln1;
    SelfAttention::Cache attn;
    LayerNorm::Cache ln2;
    Matrix ln2_out;
    Matrix hidden_pre;
    Matrix hidden;
  };

  TransformerLayer() = default;
  TransformerLayer(Index width, int heads, Index ffn_width);

  Matrix forward(const Matrix& x, Cache& cache) const;
  Matrix backward(const Cache& cache, const Matrix& dy, TransformerLayer& grad) const;
};

template <SameBase<TransformerLayer> T, class F>
void visit_params(T& t, const std::string& prefix, F&& f) {
  visit_params(t.ln1, prefix + ".ln1", f);
  visit_params(t.attn, prefix + ".attn", f);
  visit_params(t.ln2, prefix + ".ln2", f);
  visit_params(t.ff_in, prefix + ".ff_in", f);
  visit_params(t.ff_out, prefix + ".ff_out", f);
}

/// Token/position embeddings, a stack of layers and a final norm. Position 0
/// can be overridden by an externally supplied vector (the graph token) and
/// that row can receive additive injections between layers.
struct Transformer {
  Matrix token_embedding;     // vocab x width
  Matrix position_embedding;  // max_tokens x width
  std::vector<TransformerLayer> layers;
  LayerNorm final_norm;

  struct Cache {
    std::vector<TokenId> tokens;
    bool row0_overridden = false;
    std::vector<int> injected_at;  // layer input index j for late[k-1]
    std::vector<TransformerLayer::Cache> layers;
    LayerNorm::Cache final_norm;
    std::vector<Vector> row0_states;  // row 0 entering layer j (post-injection), then pre-norm output
    Matrix output;
  };

  struct InputGrads {
    Vector row0;               // d/d(initial row-0 vector), when overridden
    std::vector<Vector> late;  // d/d(late[k-1])
  };

  Transformer() = default;
  Transformer(int vocab, int max_tokens, Index width, int heads, int layers, Index ffn_width);

  Index width() const { return token_embedding.cols(); }
  int depth() const { return static_cast<int>(layers.size()); }
  int max_tokens() const { return static_cast<int>(position_embedding.rows()); }

  void init(Rng& rng);

  /// `late[k-1]` is added to row 0 of the hidden state after L-k layers.
  Matrix forward(std::span<const TokenId> tokens, const Vector* row0, std::span<const Vector> late,
                 Cache& cache) const;

  InputGrads backward(const Cache& cache, const Matrix& d_output, Transformer& grad) const;
};

template <SameBase<Transformer> T, class F>
void visit_params(T& t, const std::string& prefix, F&& f) {
  f(prefix + ".token_embedding", t.token_embedding);
  f(prefix + ".position_embedding", t.position_embedding);
  for (std::size_t i = 0; i < t.layers.size(); ++i) {
    visit_params(t.layers[i], prefix + ".layer" + std::to_string(i), f);
  }
  visit_params(t.final_norm, prefix + ".final_norm", f);
}

/// Two-layer scorer width -> hidden -> 1 with a tanh hidden layer.
struct ScoreMlp {
  Linear hidden;
  Linear out;

  struct Cache {
    Matrix input;
    Matrix activation;
  };

  ScoreMlp() = default;
  ScoreMlp(Index width, Index hidden_width);

  void init(Rng& rng);
  double forward(const Vector& x, Cache& cache) const;
  Vector backward(const Cache& cache, double dy, ScoreMlp& grad) const;
};

template <SameBase<ScoreMlp> M, class F>
void visit_params(M& m, const std::string& prefix, F&& f) {
  visit_params(m.hidden, prefix + ".hidden", f);
  visit_params(m.out, prefix + ".out", f);
}

/// Sets every parameter reachable by visit_params to zero; the usual way to
/// turn a copy of a model into its gradient accumulator.
template <class T>
void zero_params(T& t) {
  visit_params(t, "", [](const std::string&, auto& x) { x.setZero(); });
}

}  // namespace sempool
