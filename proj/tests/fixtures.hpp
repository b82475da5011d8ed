#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "sempool/harness.hpp"
#include "sempool/lm_core.hpp"

namespace fixture {

using namespace sempool;

/// Perturbs every parameter so that no weight sits at a special value.
template <class T>
void jitter(T& params, Rng& rng, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  visit_params(params, "", [&](const std::string&, auto& x) {
    for (Index i = 0; i < x.size(); ++i) x.data()[i] += n(rng);
  });
}

inline PoolingHead random_head(Index d, Rng& rng) {
  PoolingHead h(d);
  h.init(rng);
  jitter(h, rng, 0.3);
  return h;
}

inline Matrix random_matrix(Index rows, Index cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  fill_normal(m, rng, scale);
  return m;
}

inline Vector random_vector(Index n, Rng& rng, double scale = 1.0) {
  Matrix m = random_matrix(n, 1, rng, scale);
  return m.col(0);
}

inline ModelConfig tiny_config(ModelKind kind = ModelKind::sempool, int K = 0,
                               FusionMode mode = FusionMode::early) {
  ModelConfig c;
  c.model = kind;
  c.L = 2;
  c.d = 8;
  c.heads = 2;
  c.K = K;
  c.fusion_mode = mode;
  c.max_tokens = 16;
  c.vocab = 64;
  c.epochs = 2;
  c.batch_size = 2;
  c.gnn_layers = 2;
  return c;
}

/// Small KG over which tiny synthetic questions are posed.
inline SyntheticSpec tiny_spec(int questions = 6, std::uint64_t seed = 0) {
  SyntheticSpec s;
  s.questions = questions;
  s.candidates = 2;
  s.answer_pool = 4;
  s.entities = 400;
  s.kg_fraction = 1.0;
  s.distractor_rate = 0.0;
  s.seed = seed;
  return s;
}

struct Prepared {
  Benchmark bench;
  QaModel model;
  std::vector<PreparedQuestion> train;
};

inline Prepared prepare_tiny(const ModelConfig& cfg, int questions = 6, std::uint64_t seed = 0,
                             bool remove_answers = false) {
  Prepared p{split_benchmark(generate_synthetic(tiny_spec(questions, seed)), questions), {}, {}};
  p.model = QaModel::create(cfg, RelationVocab(p.bench.kg.relations()));
  const auto enc = make_encoder(p.model);
  const Pipeline pipe(p.bench.kg, p.bench.templates, *enc, p.model.config, p.model.relations);
  p.train = pipe.prepare_all(p.bench.train, remove_answers);
  return p;
}

inline bool same_matrix(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

inline bool same_params(ModelParams a, ModelParams b) {
  std::vector<Matrix> xs, ys;
  visit_params(a, "", [&](const std::string&, auto& x) { xs.emplace_back(Matrix(x)); });
  visit_params(b, "", [&](const std::string&, auto& x) { ys.emplace_back(Matrix(x)); });
  if (xs.size() != ys.size()) return false;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!same_matrix(xs[i], ys[i])) return false;
  }
  return true;
}

inline std::string temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "sempool_tests";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace fixture
