#include "sempool/lm_core.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "sempool/binary_io.hpp"
#include "sempool/error.hpp"

namespace sempool {

namespace {

constexpr char kCheckpointMagic[] = "SEMPOOLC";
constexpr std::uint64_t kCheckpointVersion = 1;

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw Error("config key '" + key + "': expected an integer, got '" + v + "'");
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw Error("config key '" + key + "': expected a number, got '" + v + "'");
}

std::string format_double(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

std::uint64_t hash_text(const std::string& s) { return fnv1a(s); }

/// TextEncoder wrapper that memoises by fact key and by text.
class MemoEncoder final : public TextEncoder {
 public:
  MemoEncoder(const TextEncoder& inner, EmbeddingCache& cache) : inner_(inner), cache_(cache) {}
  Index width() const override { return inner_.width(); }
  EncoderKind kind() const override { return inner_.kind(); }
  Vector encode_text(std::string_view text) const override {
    const auto key = text_cache_key(text);
    if (const Vector* v = cache_.find(key)) return *v;
    Vector v = inner_.encode_text(text);
    cache_.insert(key, v);
    return v;
  }
  Vector encode_fact(const VerbalizedFact& vf) const override {
    const auto key = vf.fact.key();
    if (const Vector* v = cache_.find(key)) return *v;
    Vector v = inner_.encode_fact(vf);
    cache_.insert(key, v);
    return v;
  }

 private:
  const TextEncoder& inner_;
  EmbeddingCache& cache_;
};

struct Slot {
  std::string name;
  double* data;
  Index size;
};

std::vector<Slot> slots_of(ModelParams& p) {
  std::vector<Slot> out;
  visit_params(p, "", [&](const std::string& name, auto& x) { out.push_back({name, x.data(), x.size()}); });
  return out;
}

std::string group_of(const std::string& name) {
  const auto dot = name.find('.');
  std::string head = name.substr(0, dot);
  if (head.rfind("pool", 0) == 0) return "pool";
  return head;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

FusionMode parse_fusion_mode(std::string_view s) {
  if (s == "early") return FusionMode::early;
  if (s == "early_late") return FusionMode::early_late;
  throw Error("unknown fusion_mode '" + std::string(s) + "'");
}

ModelKind parse_model_kind(std::string_view s) {
  if (s == "sempool") return ModelKind::sempool;
  if (s == "lm_only") return ModelKind::lm_only;
  if (s == "gnn") return ModelKind::gnn;
  throw Error("unknown model '" + std::string(s) + "'");
}

std::string to_string(FusionMode m) { return m == FusionMode::early ? "early" : "early_late"; }

std::string to_string(ModelKind m) {
  switch (m) {
    case ModelKind::sempool: return "sempool";
    case ModelKind::lm_only: return "lm_only";
    case ModelKind::gnn: return "gnn";
  }
  return "?";
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error("invalid config: " + msg); };
  if (L < 1) fail("L must be >= 1");
  if (d < 1) fail("d must be >= 1");
  if (heads < 1 || d % heads != 0) fail("d must be divisible by heads");
  if (K < 0 || K > L) fail("K must satisfy 0 <= K <= L");
  if (max_tokens < 5) fail("max_tokens must be >= 5");
  if (max_nodes < 1) fail("max_nodes must be >= 1");
  if (lr_lm < 0 || lr_graph < 0) fail("learning rates must be non-negative");
  if (epochs < 0) fail("epochs must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (ffn < 0) fail("ffn must be >= 0");
  if (vocab < 1) fail("vocab must be >= 1");
  if (gnn_layers < 0) fail("gnn_layers must be >= 0");
  if (encoder_kind == EncoderKind::hash_bag && token_pooling == TokenPooling::cls) {
    fail("hash-bag encoder has no cls token; use token_pooling=mean");
  }
  if (encoder_kind == EncoderKind::external_file && embedding_cache.empty()) {
    fail("external-file encoder needs embedding_cache");
  }
}

ModelConfig parse_config(std::string_view text, ModelConfig c) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(line_no) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    if (key == "model") c.model = parse_model_kind(v);
    else if (key == "L") c.L = static_cast<int>(parse_int(key, v));
    else if (key == "d") c.d = static_cast<Index>(parse_int(key, v));
    else if (key == "heads") c.heads = static_cast<int>(parse_int(key, v));
    else if (key == "K") c.K = static_cast<int>(parse_int(key, v));
    else if (key == "fusion_mode") c.fusion_mode = parse_fusion_mode(v);
    else if (key == "max_tokens") c.max_tokens = static_cast<int>(parse_int(key, v));
    else if (key == "max_nodes") c.max_nodes = static_cast<int>(parse_int(key, v));
    else if (key == "token_pooling") c.token_pooling = parse_token_pooling(v);
    else if (key == "encoder_kind") c.encoder_kind = parse_encoder_kind(v);
    else if (key == "embedding_cache") c.embedding_cache = v;
    else if (key == "lr_lm") c.lr_lm = parse_double(key, v);
    else if (key == "lr_graph") c.lr_graph = parse_double(key, v);
    else if (key == "epochs") c.epochs = static_cast<int>(parse_int(key, v));
    else if (key == "batch_size") c.batch_size = static_cast<int>(parse_int(key, v));
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_int(key, v));
    else if (key == "ffn") c.ffn = static_cast<Index>(parse_int(key, v));
    else if (key == "vocab") c.vocab = static_cast<int>(parse_int(key, v));
    else if (key == "gnn_layers") c.gnn_layers = static_cast<int>(parse_int(key, v));
    else if (key == "gnn_aggregation") c.gnn_aggregation = parse_aggregation(v);
    else throw Error("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

ModelConfig load_config(const std::filesystem::path& path, ModelConfig base) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), std::move(base));
}

std::string serialize_config(const ModelConfig& c) {
  std::ostringstream os;
  os << "model=" << to_string(c.model) << '\n'
     << "L=" << c.L << '\n'
     << "d=" << c.d << '\n'
     << "heads=" << c.heads << '\n'
     << "K=" << c.K << '\n'
     << "fusion_mode=" << to_string(c.fusion_mode) << '\n'
     << "max_tokens=" << c.max_tokens << '\n'
     << "max_nodes=" << c.max_nodes << '\n'
     << "token_pooling=" << to_string(c.token_pooling) << '\n'
     << "encoder_kind=" << to_string(c.encoder_kind) << '\n';
  if (!c.embedding_cache.empty()) os << "embedding_cache=" << c.embedding_cache << '\n';
  os << "lr_lm=" << format_double(c.lr_lm) << '\n'
     << "lr_graph=" << format_double(c.lr_graph) << '\n'
     << "epochs=" << c.epochs << '\n'
     << "batch_size=" << c.batch_size << '\n'
     << "seed=" << c.seed << '\n'
     << "ffn=" << c.ffn << '\n'
     << "vocab=" << c.vocab << '\n'
     << "gnn_layers=" << c.gnn_layers << '\n'
     << "gnn_aggregation=" << to_string(c.gnn_aggregation) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Model

bool is_lm_param(const std::string& name) {
  return name.rfind("lm.", 0) == 0 || name.rfind("f_q.", 0) == 0;
}

QaModel QaModel::create(const ModelConfig& config, const RelationVocab& relations) {
  config.validate();
  QaModel m;
  m.config = config;
  m.relations = relations;
  Rng rng(config.seed);
  const Tokenizer tok(config.vocab);
  m.params.lm = Transformer(tok.vocab_size(), config.max_tokens, config.d, config.heads, config.L,
                            config.ffn_width());
  m.params.lm.init(rng);
  m.snapshot = m.params.lm;
  for (int k = 0; k < config.pool_heads(); ++k) {
    m.params.pool.emplace_back(config.d);
    m.params.pool.back().init(rng);
  }
  m.params.f_q = ScoreMlp(config.d, config.d);
  m.params.f_q.init(rng);
  m.params.f_g = ScoreMlp(config.d, config.d);
  m.params.f_g.init(rng);
  m.params.gnn = GnnParams({config.gnn_layers, config.d, config.gnn_aggregation}, relations.size());
  m.params.gnn.init(rng);
  return m;
}

std::unique_ptr<TextEncoder> make_encoder(const QaModel& model) {
  const auto& c = model.config;
  switch (c.encoder_kind) {
    case EncoderKind::shared_toy:
      return std::make_unique<SnapshotEncoder>(model.snapshot, Tokenizer(c.vocab), c.token_pooling);
    case EncoderKind::hash_bag:
      if (c.token_pooling == TokenPooling::cls) throw Error("hash-bag encoder has no cls token");
      return std::make_unique<HashBagEncoder>(c.d, c.seed);
    case EncoderKind::external_file: {
      auto cache = EmbeddingCache::load(c.embedding_cache);
      if (cache.width() != c.d) {
        throw Error("embedding cache width " + std::to_string(cache.width()) + " != d " + std::to_string(c.d));
      }
      return std::make_unique<ExternalFileEncoder>(std::move(cache));
    }
  }
  throw Error("unknown encoder kind");
}

// ---------------------------------------------------------------------------
// Pipeline

std::uint64_t PipelineTrace::get(const std::string& stage) const {
  for (const auto& [name, h] : stages) {
    if (name == stage) return h;
  }
  throw Error("no pipeline stage '" + stage + "'");
}

Pipeline::Pipeline(const KnowledgeGraph& kg, const TemplateTable& templates, const TextEncoder& encoder,
                   const ModelConfig& config, const RelationVocab& relations)
    : kg_(kg), templates_(templates), encoder_(encoder), config_(config), relations_(relations),
      tokenizer_(config.vocab), cache_(encoder.width()) {
  templates.check_covers(kg);
}

GroundedStatement Pipeline::ground(const QuestionRecord& q, std::size_t candidate) const {
  GroundedStatement s = ground_statement(q.context, q.question, q.candidates.at(candidate), kg_);
  auto check = [&](const EntityId& e) {
    if (!kg_.contains(e)) throw Error("question " + q.id + ": entity '" + e + "' not in KG");
  };
  if (q.candidate_entities) {
    if (q.candidate_entities->size() != q.candidates.size()) {
      throw Error("question " + q.id + ": candidate_entities size mismatch");
    }
    s.answer_entities.clear();
    for (const auto& e : (*q.candidate_entities)[candidate]) {
      check(e);
      s.answer_entities.insert(e);
    }
  }
  if (q.question_entities) {
    s.question_entities.clear();
    for (const auto& e : *q.question_entities) {
      check(e);
      s.question_entities.insert(e);
    }
  }
  for (const auto& e : s.answer_entities) s.question_entities.erase(e);
  s.label = static_cast<int>(candidate) == q.answer;
  return s;
}

PreparedQuestion Pipeline::prepare(const QuestionRecord& q, bool remove_answers,
                                   PipelineTrace* trace) const {
  if (q.candidates.empty()) throw Error("question " + q.id + " has no candidates");
  if (q.answer < 0 || q.answer >= static_cast<int>(q.candidates.size())) {
    throw Error("question " + q.id + ": answer index out of range");
  }
  const MemoEncoder encoder(encoder_, cache_);
  PreparedQuestion out;
  out.id = q.id;
  out.answer = q.answer;
  std::string h_ground, h_retrieve, h_virtual, h_perturb, h_tokens;
  for (std::size_t i = 0; i < q.candidates.size(); ++i) {
    const GroundedStatement stmt = ground(q, i);
    PreparedCandidate c;
    c.tokens = tokenize_statement(q.context, q.question, q.candidates[i], tokenizer_, config_.max_tokens);
    Subgraph retrieved = retrieve_subgraph(kg_, stmt, config_.max_nodes);
    Subgraph with_virtual = add_virtual_question_node(retrieved, stmt);
    c.subgraph = remove_answers ? remove_answer_edges(with_virtual, stmt) : with_virtual;
    if (trace) {
      for (const auto& e : stmt.question_entities) h_ground += "q " + e + '\n';
      for (const auto& e : stmt.answer_entities) h_ground += "a " + e + '\n';
      h_retrieve += retrieved.serialize();
      h_virtual += with_virtual.serialize();
      h_perturb += c.subgraph.serialize();
      for (TokenId t : c.tokens) h_tokens += std::to_string(t) + ' ';
      h_tokens += '\n';
    }
    if (config_.model == ModelKind::sempool) {
      const auto emb = encode_subgraph(c.subgraph, templates_, encoder);
      c.edges = stack_embeddings(emb, config_.d);
      for (const auto& e : c.subgraph.edges) c.fact_texts.push_back(verbalize(e.fact, templates_).text);
    } else if (config_.model == ModelKind::gnn) {
      c.graph = build_gnn_graph(c.subgraph, relations_, encoder);
    }
    out.candidates.push_back(std::move(c));
  }
  if (trace) {
    trace->stages = {{"ground", hash_text(h_ground)},
                     {"retrieve", hash_text(h_retrieve)},
                     {"virtual", hash_text(h_virtual)},
                     {"perturb", hash_text(h_perturb)},
                     {"tokens", hash_text(h_tokens)}};
  }
  return out;
}

std::vector<PreparedQuestion> Pipeline::prepare_all(const std::vector<QuestionRecord>& qs,
                                                    bool remove_answers) const {
  std::vector<PreparedQuestion> out;
  out.reserve(qs.size());
  for (const auto& q : qs) out.push_back(prepare(q, remove_answers));
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward

Matrix lm_forward(const QaModel& model, std::span<const TokenId> tokens,
                  std::span<const Vector> graph_reprs, FusionMode mode, ForwardTrace& trace) {
  const std::size_t expected =
      mode == FusionMode::early ? 1 : static_cast<std::size_t>(model.config.K + 1);
  if (graph_reprs.size() != expected) {
    throw Error(to_string(mode) + " fusion expects " + std::to_string(expected) +
                " graph representations, got " + std::to_string(graph_reprs.size()));
  }
  if (tokens.size() < 2) throw Error("statement needs [GRAPH] and [CLS] tokens");
  trace.graph_reprs.assign(graph_reprs.begin(), graph_reprs.end());
  trace.hidden = model.params.lm.forward(tokens, &graph_reprs[0], graph_reprs.subspan(1), trace.lm);
  trace.graph_token_states = trace.lm.row0_states;
  return trace.hidden;
}

double score_candidate(const QaModel& model, ForwardTrace& trace, const Vector& readout) {
  trace.readout = readout;
  trace.score_q = model.params.f_q.forward(trace.hidden.row(1).transpose(), trace.f_q);
  trace.score_g = model.params.f_g.forward(readout, trace.f_g);
  trace.score = trace.score_q + trace.score_g;
  return trace.score;
}

namespace {

bool reads_graph_token(const ModelConfig& c) {
  return c.model == ModelKind::sempool && c.fusion_mode == FusionMode::early_late && c.K > 0;
}

}  // namespace

ForwardTrace forward_candidate(const QaModel& model, const PreparedCandidate& c) {
  const auto& cfg = model.config;
  ForwardTrace t;
  if (cfg.model == ModelKind::sempool) {
    if (c.edges.rows() > 0 && c.edges.cols() != cfg.d) throw Error("edge embedding width mismatch");
    const Matrix edges = c.edges.rows() > 0 ? c.edges : Matrix(0, cfg.d);
    const auto reprs = pool_multi(model.params.pool, edges, &t.pools);
    t.counter.pool_aggregations += reprs.size();
    lm_forward(model, c.tokens, reprs, cfg.fusion_mode, t);
    score_candidate(model, t, reads_graph_token(cfg) ? Vector(t.hidden.row(0).transpose()) : reprs[0]);
    return t;
  }
  const std::vector<Vector> zero{Vector::Zero(cfg.d)};
  lm_forward(model, c.tokens, zero, FusionMode::early, t);
  if (cfg.model == ModelKind::lm_only) {
    score_candidate(model, t, zero[0]);
    return t;
  }
  const GnnConfig gcfg{cfg.gnn_layers, cfg.d, cfg.gnn_aggregation};
  const Matrix h0 = init_nodes(c.graph, t.hidden.row(1).transpose());
  GnnCounter counter;
  t.gnn_states = gnn_forward(model.params.gnn, gcfg, c.graph, h0, &t.gnn, &counter);
  t.counter.node_updates = counter.node_updates;
  if (c.graph.question_node < 0) throw Error("gnn graph has no question node");
  score_candidate(model, t, t.gnn_states.back().row(c.graph.question_node).transpose());
  return t;
}

void backward_candidate(const QaModel& model, const PreparedCandidate& c, const ForwardTrace& t,
                        double dscore, ModelParams& grad) {
  const auto& cfg = model.config;
  const auto& p = model.params;
  const Vector dq = p.f_q.backward(t.f_q, dscore, grad.f_q);
  const Vector dread = p.f_g.backward(t.f_g, dscore, grad.f_g);
  Matrix d_out = Matrix::Zero(t.hidden.rows(), t.hidden.cols());
  d_out.row(1) += dq.transpose();

  if (cfg.model == ModelKind::gnn) {
    Matrix dfinal = Matrix::Zero(t.gnn_states.back().rows(), t.gnn_states.back().cols());
    dfinal.row(c.graph.question_node) = dread.transpose();
    const Matrix dh0 = gnn_backward(p.gnn, t.gnn, dfinal, grad.gnn);
    d_out.row(1) += dh0.row(c.graph.question_node);
  }
  const bool late_readout = reads_graph_token(cfg);
  if (late_readout) d_out.row(0) += dread.transpose();

  const auto in = p.lm.backward(t.lm, d_out, grad.lm);
  if (cfg.model != ModelKind::sempool) return;

  std::vector<Vector> dg(t.pools.size(), Vector::Zero(cfg.d));
  dg[0] = in.row0;
  if (!late_readout) dg[0] += dread;
  for (std::size_t k = 1; k < dg.size(); ++k) dg[k] = in.late[k - 1];
  for (std::size_t k = 0; k < dg.size(); ++k) {
    if (t.pools[k].edges.rows() == 0) continue;
    pool_backward_into(p.pool[k], t.pools[k], dg[k], grad.pool[k]);
  }
}

CandidateScores score_question(const QaModel& model, const PreparedQuestion& q,
                               std::vector<ForwardTrace>* traces) {
  CandidateScores s;
  for (const auto& c : q.candidates) {
    ForwardTrace t = forward_candidate(model, c);
    s.scores.push_back(t.score);
    if (traces) traces->push_back(std::move(t));
  }
  const Vector probs = softmax(Eigen::Map<const Vector>(s.scores.data(), static_cast<Index>(s.scores.size())));
  s.probs.assign(probs.data(), probs.data() + probs.size());
  return s;
}

int choose(const std::vector<double>& scores) {
  if (scores.empty()) throw Error("no candidates to choose from");
  int best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

Prediction predict(const QaModel& model, const PreparedQuestion& q) {
  Prediction p;
  p.scores = score_question(model, q);
  p.choice = choose(p.scores.scores);
  return p;
}

Prediction predict(const QaModel& model, const QuestionRecord& record, const KnowledgeGraph& kg,
                   const TemplateTable& templates, const TextEncoder& encoder, bool remove_answers) {
  const Pipeline pipe(kg, templates, encoder, model.config, model.relations);
  return predict(model, pipe.prepare(record, remove_answers));
}

namespace {

double batch_loss_ptr(const QaModel& model, const std::vector<const PreparedQuestion*>& batch,
                      ModelParams* grad) {
  if (batch.empty()) return 0.0;
  const double scale = 1.0 / static_cast<double>(batch.size());
  double total = 0;
  for (const PreparedQuestion* q : batch) {
    std::vector<ForwardTrace> traces;
    const auto s = score_question(model, *q, &traces);
    const double mx = *std::max_element(s.scores.begin(), s.scores.end());
    double z = 0;
    for (double x : s.scores) z += std::exp(x - mx);
    total += mx + std::log(z) - s.scores[static_cast<std::size_t>(q->answer)];
    if (!grad) continue;
    for (std::size_t i = 0; i < traces.size(); ++i) {
      const double target = static_cast<int>(i) == q->answer ? 1.0 : 0.0;
      const double ds = (s.probs[i] - target) * scale;
      backward_candidate(model, q->candidates[i], traces[i], ds, *grad);
    }
  }
  return total * scale;
}

}  // namespace

double batch_loss(const QaModel& model, std::span<const PreparedQuestion> batch, ModelParams* grad) {
  std::vector<const PreparedQuestion*> ptrs;
  for (const auto& q : batch) ptrs.push_back(&q);
  return batch_loss_ptr(model, ptrs, grad);
}

double accuracy(const QaModel& model, const std::vector<PreparedQuestion>& qs) {
  if (qs.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& q : qs) correct += predict(model, q).choice == q.answer ? 1 : 0;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(qs.size());
}

// ---------------------------------------------------------------------------
// Training

RAdam::RAdam(const ModelParams& shape) : m(shape), v(shape) {
  zero_params(m);
  zero_params(v);
}

void RAdam::step(ModelParams& params, const ModelParams& grad, double lr_lm, double lr_graph) {
  ++t;
  const double td = static_cast<double>(t);
  const double bc1 = 1.0 - std::pow(beta1, td);
  const double b2t = std::pow(beta2, td);
  const double bc2 = 1.0 - b2t;
  const double rho_inf = 2.0 / (1.0 - beta2) - 1.0;
  const double rho_t = rho_inf - 2.0 * td * b2t / bc2;
  const bool rectify = rho_t > 5.0;
  const double r = rectify ? std::sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf /
                                       ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                           : 0.0;

  auto ps = slots_of(params);
  auto gs = slots_of(const_cast<ModelParams&>(grad));
  auto ms = slots_of(m);
  auto vs = slots_of(v);
  for (std::size_t s = 0; s < ps.size(); ++s) {
    const double lr = is_lm_param(ps[s].name) ? lr_lm : lr_graph;
    for (Index i = 0; i < ps[s].size; ++i) {
      const double g = gs[s].data[i];
      double& mi = ms[s].data[i];
      double& vi = vs[s].data[i];
      mi = beta1 * mi + (1.0 - beta1) * g;
      vi = beta2 * vi + (1.0 - beta2) * g * g;
      const double m_hat = mi / bc1;
      if (rectify) {
        ps[s].data[i] -= lr * m_hat * r * std::sqrt(bc2) / (std::sqrt(vi) + eps);
      } else {
        ps[s].data[i] -= lr * m_hat;
      }
    }
  }
}

TrainOptions train_options(const ModelConfig& c) {
  TrainOptions o;
  o.epochs = c.epochs;
  o.batch_size = c.batch_size;
  o.lr_lm = c.lr_lm;
  o.lr_graph = c.lr_graph;
  o.seed = c.seed;
  return o;
}

TrainResult train(QaModel& model, const std::vector<PreparedQuestion>& data, const TrainOptions& opts) {
  if (data.empty()) throw Error("training set is empty");
  for (const auto& q : data) {
    if (q.candidates.size() < 2) throw Error("question " + q.id + " needs at least 2 candidates");
  }
  if (!opts.checkpoint_dir.empty()) std::filesystem::create_directories(opts.checkpoint_dir);
  RAdam opt(model.params);
  ModelParams grad = model.params;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(opts.seed ^ 0x9e3779b97f4a7c15ULL);
  TrainResult result;
  int steps = 0;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_total = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opts.batch_size)) {
      if (opts.max_steps >= 0 && steps >= opts.max_steps) break;
      std::vector<const PreparedQuestion*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + static_cast<std::size_t>(opts.batch_size)); ++i) {
        batch.push_back(&data[order[i]]);
      }
      zero_params(grad);
      const double loss = batch_loss_ptr(model, batch, &grad);
      if (!std::isfinite(loss)) {
        double worst = 0;
        visit_params(model.params, "", [&](const std::string&, auto& x) {
          worst = std::max(worst, x.cwiseAbs().maxCoeff());
        });
        throw Error("training diverged at epoch " + std::to_string(epoch) + " step " +
                    std::to_string(model.step) + ": loss " + format_double(loss) +
                    ", max |param| " + format_double(worst));
      }
      opt.step(model.params, grad, opts.lr_lm, opts.lr_graph);
      ++model.step;
      ++steps;
      result.step_losses.push_back(loss);
      epoch_total += loss;
      ++batches;
    }
    const double mean = batches ? epoch_total / static_cast<double>(batches) : 0.0;
    result.epoch_losses.push_back(mean);
    if (!opts.checkpoint_dir.empty()) {
      save_checkpoint(model, opts.checkpoint_dir / ("epoch_" + std::to_string(epoch + 1) + ".ckpt"));
    }
    if (opts.on_epoch) opts.on_epoch(epoch + 1, mean);
  }
  return result;
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

GradCheckReport gradient_check(const QaModel& model, std::span<const PreparedQuestion> batch,
                               int per_tensor, std::uint64_t seed) {
  constexpr double h = 1e-5;
  GradCheckReport report;
  ModelParams grad = model.params;
  zero_params(grad);
  batch_loss(model, batch, &grad);

  QaModel work = model;
  auto ps = slots_of(work.params);
  auto gs = slots_of(grad);
  Rng rng(seed);
  auto pick = [&](Index size) {
    std::vector<Index> idx(static_cast<std::size_t>(size));
    std::iota(idx.begin(), idx.end(), 0);
    if (size > per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(static_cast<std::size_t>(per_tensor));
    }
    return idx;
  };
  for (std::size_t s = 0; s < ps.size(); ++s) {
    double& worst = report.group_max_rel_error[group_of(ps[s].name)];
    for (Index i : pick(ps[s].size)) {
      double& x = ps[s].data[i];
      const double keep = x;
      x = keep + h;
      const double up = batch_loss(work, batch);
      x = keep - h;
      const double down = batch_loss(work, batch);
      x = keep;
      const double err = relative_error(gs[s].data[i], (up - down) / (2 * h));
      worst = std::max(worst, err);
      report.max_rel_error = std::max(report.max_rel_error, err);
      ++report.checked;
    }
  }
  // The snapshot only feeds preprocessing, so the loss cannot move with it.
  std::vector<Slot> snap;
  visit_params(work.snapshot, "snapshot", [&](const std::string& name, auto& x) {
    snap.push_back({name, x.data(), x.size()});
  });
  for (auto& s : snap) {
    for (Index i : pick(std::min<Index>(s.size, 4))) {
      double& x = s.data[i];
      const double keep = x;
      x = keep + h;
      const double up = batch_loss(work, batch);
      x = keep - h;
      const double down = batch_loss(work, batch);
      x = keep;
      report.snapshot_grad_max_abs = std::max(report.snapshot_grad_max_abs, std::abs(up - down) / (2 * h));
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Persistence

void visit_checkpoint_tensors(QaModel& model,
                              const std::function<void(const std::string&, Matrix*, Vector*)>& f) {
  auto adapt = [&](const std::string& name, auto& x) {
    if constexpr (std::is_same_v<std::remove_cvref_t<decltype(x)>, Matrix>) {
      f(name, &x, nullptr);
    } else {
      f(name, nullptr, &x);
    }
  };
  visit_params(model.params, "", adapt);
  visit_params(model.snapshot, "snapshot", adapt);
}

void save_checkpoint(const QaModel& model, const std::filesystem::path& path) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + tmp);
    out.write(kCheckpointMagic, 8);
    bin::put_u64(out, kCheckpointVersion);
    bin::put_string(out, serialize_config(model.config));
    bin::put_u64(out, model.config.seed);
    bin::put_u64(out, model.step);
    bin::put_u64(out, static_cast<std::uint64_t>(model.relations.size()));
    for (const auto& r : model.relations.names()) bin::put_string(out, r);
    std::vector<std::pair<std::string, const double*>> tensors;
    std::vector<std::pair<Index, Index>> shapes;
    auto& mut = const_cast<QaModel&>(model);
    visit_checkpoint_tensors(mut, [&](const std::string& name, Matrix* m, Vector* v) {
      if (m) {
        tensors.emplace_back(name, m->data());
        shapes.emplace_back(m->rows(), m->cols());
      } else {
        tensors.emplace_back(name, v->data());
        shapes.emplace_back(v->size(), 1);
      }
    });
    bin::put_u64(out, tensors.size());
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      bin::put_string(out, tensors[i].first);
      bin::put_u64(out, static_cast<std::uint64_t>(shapes[i].first));
      bin::put_u64(out, static_cast<std::uint64_t>(shapes[i].second));
      const Index n = shapes[i].first * shapes[i].second;
      for (Index k = 0; k < n; ++k) bin::put_f64(out, tensors[i].second[k]);
    }
    if (!out) throw Error("write failed for checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

QaModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::string_view(magic, 8) != std::string_view(kCheckpointMagic, 8)) {
    throw Error("not a checkpoint: " + path.string());
  }
  if (bin::get_u64(in) != kCheckpointVersion) throw Error("unsupported checkpoint version");
  ModelConfig config = parse_config(bin::get_string(in));
  config.seed = bin::get_u64(in);
  const auto step = bin::get_u64(in);
  std::vector<RelationId> rels(bin::get_u64(in));
  for (auto& r : rels) r = bin::get_string(in);
  QaModel model = QaModel::create(config, RelationVocab::from_names(rels));
  model.step = step;

  std::map<std::string, std::pair<std::pair<Index, Index>, std::vector<double>>> stored;
  const auto count = bin::get_u64(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = bin::get_string(in);
    const auto rows = static_cast<Index>(bin::get_u64(in));
    const auto cols = static_cast<Index>(bin::get_u64(in));
    std::vector<double> data(static_cast<std::size_t>(rows * cols));
    for (double& x : data) x = bin::get_f64(in);
    stored[name] = {{rows, cols}, std::move(data)};
  }
  std::size_t used = 0;
  visit_checkpoint_tensors(model, [&](const std::string& name, Matrix* m, Vector* v) {
    auto it = stored.find(name);
    if (it == stored.end()) throw Error("checkpoint missing tensor " + name);
    const auto [rows, cols] = it->second.first;
    const Index want_rows = m ? m->rows() : v->size();
    const Index want_cols = m ? m->cols() : 1;
    if (rows != want_rows || cols != want_cols) throw Error("checkpoint shape mismatch for " + name);
    double* dst = m ? m->data() : v->data();
    std::copy(it->second.second.begin(), it->second.second.end(), dst);
    ++used;
  });
  if (used != stored.size()) throw Error("checkpoint has unexpected tensors");
  return model;
}

}  // namespace sempool
