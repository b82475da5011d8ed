#pragma once

// The statement encoder and its graph grounding. One QaModel covers three
// scoring variants so that comparisons share every component but the graph
// pathway:
//   sempool  s = f_q(h_CLS) + f_g(g^(0))            early fusion
//            s = f_q(h_CLS) + f_g(h_GRAPH)          early&late fusion, K > 0
//   lm_only  s = f_q(h_CLS) + f_g(0)                graph token fed zeros
//   gnn      s = f_q(h_CLS) + f_g(h_question)       message passing readout

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sempool/gnn_baseline.hpp"
#include "sempool/kg_store.hpp"
#include "sempool/nn.hpp"
#include "sempool/pooling.hpp"
#include "sempool/tokenizer.hpp"
#include "sempool/verbalize_encode.hpp"

namespace sempool {

enum class FusionMode { early, early_late };
enum class ModelKind { sempool, lm_only, gnn };

FusionMode parse_fusion_mode(std::string_view s);
ModelKind parse_model_kind(std::string_view s);
std::string to_string(FusionMode m);
std::string to_string(ModelKind m);

struct ModelConfig {
  ModelKind model = ModelKind::sempool;
  int L = 4;
  Index d = 64;
  int heads = 4;
  int K = 0;
  FusionMode fusion_mode = FusionMode::early;
  int max_tokens = 32;
  int max_nodes = kDefaultMaxNodes;
  TokenPooling token_pooling = TokenPooling::mean;
  EncoderKind encoder_kind = EncoderKind::shared_toy;
  std::string embedding_cache;  // external-file encoder only
  double lr_lm = 1e-3;
  double lr_graph = 1e-2;
  int epochs = 4;
  int batch_size = 8;
  std::uint64_t seed = 0;
  Index ffn = 0;  // 0 -> 2d
  int vocab = 8192;
  int gnn_layers = 2;
  Aggregation gnn_aggregation = Aggregation::sum;

  Index ffn_width() const { return ffn > 0 ? ffn : 2 * d; }
  int pool_heads() const { return fusion_mode == FusionMode::early ? 1 : K + 1; }
  void validate() const;
};

/// Flat `key=value` lines; `#` starts a comment. Unknown keys are errors.
ModelConfig parse_config(std::string_view text, ModelConfig base = {});
ModelConfig load_config(const std::filesystem::path& path, ModelConfig base = {});
std::string serialize_config(const ModelConfig& config);

/// Everything the optimizer updates.
struct ModelParams {
  Transformer lm;
  std::vector<PoolingHead> pool;
  ScoreMlp f_q;
  ScoreMlp f_g;
  GnnParams gnn;
};

template <SameBase<ModelParams> P, class F>
void visit_params(P& p, const std::string&, F&& f) {
  visit_params(p.lm, "lm", f);
  for (std::size_t k = 0; k < p.pool.size(); ++k) visit_params(p.pool[k], "pool" + std::to_string(k), f);
  visit_params(p.f_q, "f_q", f);
  visit_params(p.f_g, "f_g", f);
  visit_params(p.gnn, "gnn", f);
}

/// Which learning rate a parameter gets: the language side (lm.*, f_q) or
/// the graph side (pooling heads, f_g, gnn).
bool is_lm_param(const std::string& name);

struct QaModel {
  ModelConfig config;
  ModelParams params;
  Transformer snapshot;  // frozen copy of `params.lm` taken at init
  RelationVocab relations;
  std::uint64_t step = 0;

  static QaModel create(const ModelConfig& config, const RelationVocab& relations);
};

std::unique_ptr<TextEncoder> make_encoder(const QaModel& model);

// ---------------------------------------------------------------------------
// Inputs

struct QuestionRecord {
  std::string id;
  std::string context;
  std::string question;
  std::vector<std::string> candidates;
  int answer = 0;
  std::optional<std::vector<EntityId>> question_entities;
  std::optional<std::vector<std::vector<EntityId>>> candidate_entities;
};

struct PreparedCandidate {
  std::vector<TokenId> tokens;
  Subgraph subgraph;
  Matrix edges;  // one embedding per subgraph edge, canonical order
  std::vector<std::string> fact_texts;
  GnnGraph graph;
};

struct PreparedQuestion {
  std::string id;
  int answer = 0;
  std::vector<PreparedCandidate> candidates;
};

/// Stage hashes of one question's preprocessing, in pipeline order.
struct PipelineTrace {
  std::vector<std::pair<std::string, std::uint64_t>> stages;
  std::uint64_t get(const std::string& stage) const;
};

/// Statement -> tokens, subgraph, edge embeddings and GNN graph.
class Pipeline {
 public:
  Pipeline(const KnowledgeGraph& kg, const TemplateTable& templates, const TextEncoder& encoder,
           const ModelConfig& config, const RelationVocab& relations);

  GroundedStatement ground(const QuestionRecord& q, std::size_t candidate) const;
  PreparedQuestion prepare(const QuestionRecord& q, bool remove_answers,
                           PipelineTrace* trace = nullptr) const;
  std::vector<PreparedQuestion> prepare_all(const std::vector<QuestionRecord>& qs,
                                            bool remove_answers) const;

 private:
  const KnowledgeGraph& kg_;
  const TemplateTable& templates_;
  const TextEncoder& encoder_;
  const ModelConfig& config_;
  const RelationVocab& relations_;
  Tokenizer tokenizer_;
  mutable EmbeddingCache cache_;
};

// ---------------------------------------------------------------------------
// Forward / scoring

struct AggregationCounter {
  std::uint64_t pool_aggregations = 0;
  std::uint64_t node_updates = 0;
};

struct ForwardTrace {
  Transformer::Cache lm;
  Matrix hidden;                          // final hidden states, row 0 = [GRAPH], row 1 = [CLS]
  std::vector<Vector> graph_reprs;        // g^(0..K) (or the single zero vector)
  std::vector<PoolCache> pools;           // per pooling head
  std::vector<Vector> graph_token_states; // row 0 entering each layer, then pre-norm output
  Vector readout;                         // argument of f_g
  ScoreMlp::Cache f_q;
  ScoreMlp::Cache f_g;
  GnnCache gnn;
  std::vector<Matrix> gnn_states;
  double score_q = 0;
  double score_g = 0;
  double score = 0;
  AggregationCounter counter;
};

/// The transformer pass alone. early takes exactly one graph representation,
/// early_late takes K+1.
Matrix lm_forward(const QaModel& model, std::span<const TokenId> tokens,
                  std::span<const Vector> graph_reprs, FusionMode mode, ForwardTrace& trace);

/// s = f_q(h_CLS) + f_g(readout); fills the score fields of `trace`.
double score_candidate(const QaModel& model, ForwardTrace& trace, const Vector& readout);

ForwardTrace forward_candidate(const QaModel& model, const PreparedCandidate& c);

/// Accumulates d(score)/d(params) * dscore into `grad`.
void backward_candidate(const QaModel& model, const PreparedCandidate& c, const ForwardTrace& trace,
                        double dscore, ModelParams& grad);

struct CandidateScores {
  std::vector<double> scores;
  std::vector<double> probs;
};

CandidateScores score_question(const QaModel& model, const PreparedQuestion& q,
                               std::vector<ForwardTrace>* traces = nullptr);

/// argmax of the scores, lowest index on ties.
int choose(const std::vector<double>& scores);

struct Prediction {
  int choice = 0;
  CandidateScores scores;
};

Prediction predict(const QaModel& model, const PreparedQuestion& q);
Prediction predict(const QaModel& model, const QuestionRecord& record, const KnowledgeGraph& kg,
                   const TemplateTable& templates, const TextEncoder& encoder,
                   bool remove_answers = false);

/// Mean cross-entropy over `batch`; accumulates its gradient when `grad` is set.
double batch_loss(const QaModel& model, std::span<const PreparedQuestion> batch,
                  ModelParams* grad = nullptr);

double accuracy(const QaModel& model, const std::vector<PreparedQuestion>& qs);

// ---------------------------------------------------------------------------
// Training

struct RAdam {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t t = 0;
  ModelParams m;
  ModelParams v;

  explicit RAdam(const ModelParams& shape);
  void step(ModelParams& params, const ModelParams& grad, double lr_lm, double lr_graph);
};

struct TrainOptions {
  int epochs = 4;
  int batch_size = 8;
  double lr_lm = 1e-3;
  double lr_graph = 1e-2;
  std::uint64_t seed = 0;
  int max_steps = -1;  // stop early when >= 0
  std::filesystem::path checkpoint_dir;  // one checkpoint per epoch when non-empty
  std::function<void(int epoch, double loss)> on_epoch;
};

TrainOptions train_options(const ModelConfig& config);

struct TrainResult {
  std::vector<double> step_losses;
  std::vector<double> epoch_losses;
};

/// Deterministic for a fixed seed. Throws on a non-finite loss.
TrainResult train(QaModel& model, const std::vector<PreparedQuestion>& data, const TrainOptions& opts);

struct GradCheckReport {
  std::map<std::string, double> group_max_rel_error;  // lm, pool, f_q, f_g, gnn
  double max_rel_error = 0;
  double snapshot_grad_max_abs = 0;  // frozen: always exactly 0
  std::size_t checked = 0;
};

/// Central differences (h = 1e-5) on up to `per_tensor` entries of every tensor.
GradCheckReport gradient_check(const QaModel& model, std::span<const PreparedQuestion> batch,
                               int per_tensor = 24, std::uint64_t seed = 0);

double relative_error(double analytic, double numeric);

// ---------------------------------------------------------------------------
// Persistence

void save_checkpoint(const QaModel& model, const std::filesystem::path& path);
QaModel load_checkpoint(const std::filesystem::path& path);

/// Visits every tensor written to a checkpoint (trainable params then snapshot.*).
void visit_checkpoint_tensors(QaModel& model,
                              const std::function<void(const std::string&, Matrix*, Vector*)>& f);

}  // namespace sempool
