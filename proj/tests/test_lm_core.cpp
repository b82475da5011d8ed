#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "sempool/lm_core.hpp"

using namespace sempool;

namespace {

Transformer random_transformer(Rng& rng, int vocab, int tokens, Index d, int heads, int layers) {
  Transformer tr(vocab, tokens, d, heads, layers, 2 * d);
  tr.init(rng);
  fixture::jitter(tr, rng, 0.1);
  return tr;
}

std::vector<TokenId> random_tokens(Rng& rng, int n, int vocab) {
  std::uniform_int_distribution<int> id(0, vocab - 1);
  std::vector<TokenId> t;
  for (int i = 0; i < n; ++i) t.push_back(id(rng));
  return t;
}

std::vector<Vector> random_vectors(Rng& rng, int n, Index d) {
  std::vector<Vector> v;
  for (int i = 0; i < n; ++i) v.push_back(fixture::random_vector(d, rng));
  return v;
}

std::vector<oracle::Vec> to_vecs(const std::vector<Vector>& v) {
  std::vector<oracle::Vec> out;
  for (const auto& x : v) out.push_back(oracle::to_vec(x));
  return out;
}

/// Two candidates told apart only by which one the KG links to the cue.
struct Toy {
  KnowledgeGraph kg;
  TemplateTable templates;
  std::vector<QuestionRecord> questions;
};

Toy discriminating_toy() {
  Toy t;
  t.kg = parse_kg(
      "bird\tcapable_of\tfly\n"
      "fish\tcapable_of\tswim\n"
      "bat\tcapable_of\tfly\n"
      "eel\tcapable_of\tswim\n");
  t.templates.set("capable_of", "{h} can {t}");
  t.questions = {
      {"a", "", "which one can fly", {"bird", "fish"}, 0, {}, {}},
      {"b", "", "which one can swim", {"bird", "fish"}, 1, {}, {}},
      {"c", "", "which one can fly", {"eel", "bat"}, 1, {}, {}},
      {"d", "", "which one can swim", {"eel", "bat"}, 0, {}, {}},
  };
  return t;
}

QaModel zero_heads(QaModel m) {
  zero_params(m.params.f_q);
  zero_params(m.params.f_g);
  return m;
}

}  // namespace

TEST_CASE("transformer matches the loop oracle, including late injection") {
  Rng rng(1);
  for (int trial = 0; trial < 8; ++trial) {
    const int L = 4;
    const int K = trial % 3;
    const Index d = 16;
    const auto tr = random_transformer(rng, 40, 12, d, 4, L);
    const auto tokens = random_tokens(rng, 5 + trial % 6, 40);
    const Vector row0 = fixture::random_vector(d, rng);
    const auto late = random_vectors(rng, K, d);
    Transformer::Cache cache;
    const Matrix out = tr.forward(tokens, &row0, late, cache);
    const auto r0 = oracle::to_vec(row0);
    const auto want = oracle::transformer(tr, std::vector<int>(tokens.begin(), tokens.end()), &r0, to_vecs(late));
    const auto got = oracle::to_mat(out);
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(oracle::max_abs_diff(got[i], want.output[i]) < 1e-10);
    // Graph-token state after the last layer and before the final norm.
    REQUIRE(cache.row0_states.size() == static_cast<std::size_t>(L + 1));
    CHECK(oracle::max_abs_diff(oracle::to_vec(cache.row0_states[L]), want.row0_after[L - 1]) < 1e-10);
    // Entering layer L-1 the state carries the first late vector when K >= 1.
    oracle::Vec entering = want.row0_after[L - 2];
    if (K >= 1) {
      for (Index j = 0; j < d; ++j) entering[static_cast<std::size_t>(j)] += late[0](j);
    }
    CHECK(oracle::max_abs_diff(oracle::to_vec(cache.row0_states[L - 1]), entering) < 1e-10);
    for (int k = 1; k <= K; ++k) CHECK(cache.injected_at[static_cast<std::size_t>(k - 1)] == L - k);
  }
}

TEST_CASE("transformer without an override embeds token 0 normally") {
  Rng rng(2);
  const auto tr = random_transformer(rng, 30, 8, 8, 2, 2);
  const auto tokens = random_tokens(rng, 6, 30);
  Transformer::Cache cache;
  const Matrix out = tr.forward(tokens, nullptr, {}, cache);
  const auto want = oracle::transformer(tr, std::vector<int>(tokens.begin(), tokens.end()), nullptr, {});
  const auto got = oracle::to_mat(out);
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(oracle::max_abs_diff(got[i], want.output[i]) < 1e-10);
}

TEST_CASE("transformer backward matches central differences") {
  Rng rng(3);
  const Index d = 8;
  const auto tr = random_transformer(rng, 20, 8, d, 2, 3);
  const auto tokens = random_tokens(rng, 5, 20);
  const Vector row0 = fixture::random_vector(d, rng);
  const auto late = random_vectors(rng, 2, d);
  const Matrix w = fixture::random_matrix(5, d, rng);
  auto objective = [&](const Transformer& t, const Vector& r, const std::vector<Vector>& lt) {
    Transformer::Cache c;
    return (t.forward(tokens, &r, lt, c).array() * w.array()).sum();
  };
  Transformer::Cache cache;
  tr.forward(tokens, &row0, late, cache);
  Transformer grad = tr;
  zero_params(grad);
  const auto in = tr.backward(cache, w, grad);
  const double h = 1e-6;
  for (Index j = 0; j < d; ++j) {
    Vector a = row0, b = row0;
    a(j) += h;
    b(j) -= h;
    CHECK(std::abs((objective(tr, a, late) - objective(tr, b, late)) / (2 * h) - in.row0(j)) < 1e-7);
    for (std::size_t k = 0; k < late.size(); ++k) {
      auto la = late, lb = late;
      la[k](j) += h;
      lb[k](j) -= h;
      CHECK(std::abs((objective(tr, row0, la) - objective(tr, row0, lb)) / (2 * h) - in.late[k](j)) < 1e-7);
    }
  }
  Transformer probe = tr;
  std::vector<double*> ps, gs;
  visit_params(probe, "", [&](const std::string&, auto& x) {
    for (Index i = 0; i < x.size(); ++i) ps.push_back(x.data() + i);
  });
  visit_params(grad, "", [&](const std::string&, auto& x) {
    for (Index i = 0; i < x.size(); ++i) gs.push_back(x.data() + i);
  });
  std::uniform_int_distribution<std::size_t> pick(0, ps.size() - 1);
  for (int n = 0; n < 300; ++n) {
    const std::size_t i = pick(rng);
    const double keep = *ps[i];
    *ps[i] = keep + h;
    const double up = objective(probe, row0, late);
    *ps[i] = keep - h;
    const double down = objective(probe, row0, late);
    *ps[i] = keep;
    const double num = (up - down) / (2 * h);
    CHECK(std::abs(*gs[i] - num) < 1e-7 * std::max(1.0, std::abs(num)));
  }
}

TEST_CASE("all-zero late vectors reproduce early fusion exactly") {
  Rng rng(4);
  const auto tr = random_transformer(rng, 20, 10, 8, 2, 4);
  const auto tokens = random_tokens(rng, 7, 20);
  const Vector row0 = fixture::random_vector(8, rng);
  Transformer::Cache a, b;
  const Matrix early = tr.forward(tokens, &row0, {}, a);
  const std::vector<Vector> zeros(3, Vector::Zero(8));
  const Matrix late = tr.forward(tokens, &row0, zeros, b);
  CHECK(fixture::same_matrix(early, late));
}

TEST_CASE("K=0 early_late is bit-identical to early") {
  auto early = fixture::prepare_tiny(fixture::tiny_config(ModelKind::sempool, 0, FusionMode::early));
  auto late = fixture::prepare_tiny(fixture::tiny_config(ModelKind::sempool, 0, FusionMode::early_late));
  CHECK(fixture::same_params(early.model.params, late.model.params));
  for (std::size_t q = 0; q < early.train.size(); ++q) {
    std::vector<ForwardTrace> ta, tb;
    const auto sa = score_question(early.model, early.train[q], &ta);
    const auto sb = score_question(late.model, late.train[q], &tb);
    CHECK(sa.scores == sb.scores);
    for (std::size_t c = 0; c < ta.size(); ++c) {
      CHECK(fixture::same_matrix(ta[c].hidden, tb[c].hidden));
      CHECK(fixture::same_matrix(ta[c].readout, tb[c].readout));
    }
  }
  const auto ra = train(early.model, early.train, train_options(early.model.config));
  const auto rb = train(late.model, late.train, train_options(late.model.config));
  CHECK(ra.step_losses == rb.step_losses);
  CHECK(fixture::same_params(early.model.params, late.model.params));
}

TEST_CASE("lm_forward rejects the wrong number of graph representations") {
  auto p = fixture::prepare_tiny(fixture::tiny_config(ModelKind::sempool, 2, FusionMode::early_late));
  ForwardTrace t;
  const auto& tokens = p.train[0].candidates[0].tokens;
  const std::vector<Vector> two(2, Vector::Zero(8));
  CHECK_THROWS_WITH_AS(lm_forward(p.model, tokens, two, FusionMode::early_late, t),
                       doctest::Contains("expects 3"), Error);
  CHECK_THROWS_AS(lm_forward(p.model, tokens, two, FusionMode::early, t), Error);
  const std::vector<Vector> three(3, Vector::Zero(8));
  CHECK_NOTHROW(lm_forward(p.model, tokens, three, FusionMode::early_late, t));
}

TEST_CASE("zero scoring heads give uniform probabilities") {
  for (auto kind : {ModelKind::sempool, ModelKind::gnn, ModelKind::lm_only}) {
    auto p = fixture::prepare_tiny(fixture::tiny_config(kind));
    const auto model = zero_heads(p.model);
    for (const auto& q : p.train) {
      const auto s = score_question(model, q);
      for (double prob : s.probs) CHECK(prob == doctest::Approx(1.0 / q.candidates.size()).epsilon(1e-15));
      CHECK(batch_loss(model, std::span(&q, 1)) == doctest::Approx(std::log(double(q.candidates.size()))));
    }
  }
}

TEST_CASE("probabilities are a softmax over scores") {
  auto p = fixture::prepare_tiny(fixture::tiny_config(ModelKind::sempool, 2, FusionMode::early_late));
  for (const auto& q : p.train) {
    const auto s = score_question(p.model, q);
    double sum = 0;
    for (double x : s.probs) sum += x;
    CHECK(std::abs(sum - 1.0) < 1e-12);
    CHECK(s.probs[1] / s.probs[0] == doctest::Approx(std::exp(s.scores[1] - s.scores[0])).epsilon(1e-12));
  }
}

TEST_CASE("choose is shift invariant and breaks ties to the lowest index") {
  Rng rng(5);
  std::uniform_int_distribution<int> k(-64, 64);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(5);
    for (double& x : s) x = k(rng) / 8.0;
    std::vector<double> shifted = s;
    for (double& x : shifted) x += 3.0;
    CHECK(choose(s) == choose(shifted));
  }
  CHECK(choose({1.0, 2.0, 2.0}) == 1);
  CHECK(choose({0.5}) == 0);
  CHECK_THROWS_AS(choose({}), Error);
}

TEST_CASE("single and identical candidates") {
  auto p = fixture::prepare_tiny(fixture::tiny_config());
  PreparedQuestion one = p.train[0];
  one.candidates.resize(1);
  one.answer = 0;
  const auto solo = predict(p.model, one);
  CHECK(solo.choice == 0);
  CHECK(solo.scores.probs[0] == 1.0);

  PreparedQuestion twins = p.train[0];
  twins.candidates = {twins.candidates[0], twins.candidates[0]};
  twins.answer = 1;
  const auto tie = predict(p.model, twins);
  CHECK(tie.choice == 0);
  CHECK(tie.scores.probs[0] == 0.5);

  ModelParams grad = p.model.params;
  zero_params(grad);
  batch_loss(p.model, std::span(&twins, 1), &grad);
  double worst = 0;
  visit_params(grad, "", [&](const std::string&, auto& x) { worst = std::max(worst, x.cwiseAbs().maxCoeff()); });
  CHECK(worst < 1e-12);
}

TEST_CASE("explicit entity lists override text linking") {
  auto p = fixture::prepare_tiny(fixture::tiny_config());
  const auto enc = make_encoder(p.model);
  const Pipeline pipe(p.bench.kg, p.bench.templates, *enc, p.model.config, p.model.relations);
  QuestionRecord q = p.bench.train[0];
  const auto linked = pipe.ground(q, 0);
  const EntityId other = *p.bench.kg.entities().rbegin();
  q.question_entities = std::vector<EntityId>{other};
  const auto forced = pipe.ground(q, 0);
  CHECK(forced.question_entities == std::set<EntityId>{other});
  CHECK(forced.answer_entities == linked.answer_entities);
  CHECK(pipe.prepare(q, false).candidates[0].subgraph.serialize() !=
        pipe.prepare(p.bench.train[0], false).candidates[0].subgraph.serialize());
  q.question_entities = std::vector<EntityId>{"no_such_entity"};
  CHECK_THROWS_WITH_AS(pipe.ground(q, 0), doctest::Contains("not in KG"), Error);
}

TEST_CASE("zero learning rates leave parameters unchanged") {
  auto p = fixture::prepare_tiny(fixture::tiny_config(ModelKind::sempool, 2, FusionMode::early_late));
  const auto before = p.model.params;
  auto opts = train_options(p.model.config);
  opts.lr_lm = 0;
  opts.lr_graph = 0;
  train(p.model, p.train, opts);
  CHECK(fixture::same_params(before, p.model.params));
}

TEST_CASE("only the lm group moves when lr_graph is zero") {
  auto p = fixture::prepare_tiny(fixture::tiny_config());
  const auto before = p.model.params;
  auto opts = train_options(p.model.config);
  opts.lr_graph = 0;
  train(p.model, p.train, opts);
  CHECK(fixture::same_matrix(before.f_g.hidden.weight, p.model.params.f_g.hidden.weight));
  CHECK(fixture::same_matrix(before.pool[0].value.weight, p.model.params.pool[0].value.weight));
  CHECK(!fixture::same_matrix(before.f_q.hidden.weight, p.model.params.f_q.hidden.weight));
  CHECK(is_lm_param("lm.layer0.attn.qkv.weight"));
  CHECK(is_lm_param("f_q.out.bias"));
  CHECK(!is_lm_param("f_g.out.bias"));
  CHECK(!is_lm_param("pool0.value.weight"));
  CHECK(!is_lm_param("gnn.relation_embedding"));
}

TEST_CASE("training is deterministic for a fixed seed") {
  for (auto kind : {ModelKind::sempool, ModelKind::gnn}) {
    auto a = fixture::prepare_tiny(fixture::tiny_config(kind), 8);
    auto b = fixture::prepare_tiny(fixture::tiny_config(kind), 8);
    const auto ra = train(a.model, a.train, train_options(a.model.config));
    const auto rb = train(b.model, b.train, train_options(b.model.config));
    CHECK(ra.step_losses == rb.step_losses);
    CHECK(fixture::same_params(a.model.params, b.model.params));
  }
}

TEST_CASE("a single example can be fit") {
  auto p = fixture::prepare_tiny(fixture::tiny_config(), 2);
  const std::vector<PreparedQuestion> one{p.train[0]};
  auto opts = train_options(p.model.config);
  opts.epochs = 200;
  opts.batch_size = 1;
  opts.lr_lm = 1e-2;
  const auto r = train(p.model, one, opts);
  CHECK(r.step_losses.size() == 200);
  CHECK(batch_loss(p.model, one) < 1e-2);
}

TEST_CASE("non-finite loss aborts training with a diagnostic") {
  auto p = fixture::prepare_tiny(fixture::tiny_config());
  p.model.params.f_q.out.bias(0) = std::nan("");
  CHECK_THROWS_WITH_AS(train(p.model, p.train, train_options(p.model.config)),
                       doctest::Contains("diverged"), Error);
}

TEST_CASE("analytic gradients agree with central differences") {
  struct Case {
    ModelKind kind;
    int K;
    FusionMode mode;
  };
  for (const Case c : {Case{ModelKind::sempool, 0, FusionMode::early}, Case{ModelKind::sempool, 2, FusionMode::early_late},
                       Case{ModelKind::gnn, 0, FusionMode::early}, Case{ModelKind::lm_only, 0, FusionMode::early}}) {
    auto p = fixture::prepare_tiny(fixture::tiny_config(c.kind, c.K, c.mode), 4);
    Rng rng(6);
    fixture::jitter(p.model.params, rng, 0.05);
    const auto report = gradient_check(p.model, std::span(p.train.data(), 2));
    INFO(to_string(c.kind), " K=", c.K);
    CHECK(report.max_rel_error < 1e-4);
    CHECK(report.snapshot_grad_max_abs == 0.0);
    CHECK(report.checked > 100);
  }
}

TEST_CASE("checkpoints round trip exactly") {
  auto p = fixture::prepare_tiny(fixture::tiny_config(ModelKind::sempool, 1, FusionMode::early_late));
  train(p.model, p.train, train_options(p.model.config));
  const auto path = fixture::temp_path("model.ckpt");
  save_checkpoint(p.model, path);
  const auto back = load_checkpoint(path);
  CHECK(fixture::same_params(back.params, p.model.params));
  CHECK(fixture::same_params(ModelParams{back.snapshot, {}, {}, {}, {}}, ModelParams{p.model.snapshot, {}, {}, {}, {}}));
  CHECK(back.step == p.model.step);
  CHECK(serialize_config(back.config) == serialize_config(p.model.config));
  CHECK(back.relations.names() == p.model.relations.names());
  for (const auto& q : p.train) CHECK(score_question(back, q).scores == score_question(p.model, q).scores);
  const auto again = fixture::temp_path("model2.ckpt");
  save_checkpoint(back, again);
  CHECK(fixture::read_file(path) == fixture::read_file(again));
}

TEST_CASE("corrupt checkpoints are rejected") {
  auto p = fixture::prepare_tiny(fixture::tiny_config());
  const auto path = fixture::temp_path("good.ckpt");
  save_checkpoint(p.model, path);
  const auto bytes = fixture::read_file(path);
  const auto bad = fixture::temp_path("bad.ckpt");
  {
    std::ofstream out(bad, std::ios::binary);
    out << bytes.substr(0, bytes.size() / 2);
  }
  CHECK_THROWS_AS(load_checkpoint(bad), Error);
  {
    std::ofstream out(bad, std::ios::binary);
    out << "NOTACKPT" << bytes.substr(8);
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(bad), doctest::Contains("not a checkpoint"), Error);
  CHECK_THROWS_AS(load_checkpoint(fixture::temp_path("missing.ckpt")), Error);
}

TEST_CASE("config text round trips and rejects unknown keys") {
  ModelConfig c = fixture::tiny_config(ModelKind::gnn, 1, FusionMode::early_late);
  c.lr_lm = 0.1 + 0.2;
  c.gnn_aggregation = Aggregation::mean;
  const auto back = parse_config(serialize_config(c));
  CHECK(serialize_config(back) == serialize_config(c));
  CHECK(back.lr_lm == c.lr_lm);
  CHECK(parse_config("# comment\nK = 2\nfusion_mode=early_late\n").K == 2);
  CHECK_THROWS_WITH_AS(parse_config("colour=blue\n"), doctest::Contains("unknown key"), Error);
  CHECK_THROWS_AS(parse_config("K=9\n"), Error);
  CHECK_THROWS_AS(parse_config("d=10\nheads=4\n"), Error);
  CHECK_THROWS_AS(parse_config("encoder_kind=hash-bag\ntoken_pooling=cls\n"), Error);
  CHECK_THROWS_AS(parse_config("L=two\n"), Error);
}

TEST_CASE("a fact that separates the candidates is learned") {
  const auto toy = discriminating_toy();
  ModelConfig cfg = fixture::tiny_config();
  cfg.max_tokens = 12;
  cfg.epochs = 400;
  cfg.lr_lm = 1e-2;
  cfg.batch_size = 4;
  const auto model0 = QaModel::create(cfg, RelationVocab(toy.kg.relations()));
  QaModel model = model0;
  const auto enc = make_encoder(model);
  const Pipeline pipe(toy.kg, toy.templates, *enc, model.config, model.relations);
  const auto data = pipe.prepare_all(toy.questions, false);
  // Each candidate's subgraph holds exactly the fact linking it to the question.
  CHECK(std::find_if(data[0].candidates[0].fact_texts.begin(), data[0].candidates[0].fact_texts.end(),
                     [](const std::string& s) { return s == "bird can fly"; }) !=
        data[0].candidates[0].fact_texts.end());
  train(model, data, train_options(cfg));
  CHECK(batch_loss(model, data) < 1e-3);
  CHECK(accuracy(model, data) == 100.0);
}
