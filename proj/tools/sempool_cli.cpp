// Command-line front end: data generation, retrieval inspection, training,
// evaluation, experiments and sweeps.

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <iostream>
#include <sstream>

#include "sempool/harness.hpp"

namespace fs = std::filesystem;
using namespace sempool;

namespace {

struct Globals {
  std::string config;
  long long seed = -1;
  std::string out = "out";
};

ModelConfig base_config(const Globals& g) {
  ModelConfig c = g.config.empty() ? ModelConfig{} : load_config(g.config);
  if (g.seed >= 0) c.seed = static_cast<std::uint64_t>(g.seed);
  c.validate();
  return c;
}

const std::vector<QuestionRecord>& pick_split(const Benchmark& b, const std::string& split) {
  if (split == "train") return b.train;
  if (split == "test") return b.test;
  throw Error("split must be train or test");
}

const QuestionRecord& find_question(const std::vector<QuestionRecord>& qs, const std::string& id) {
  for (const auto& q : qs) {
    if (q.id == id) return q;
  }
  throw Error("no question with id '" + id + "'");
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

std::vector<ModelKind> parse_models(const std::string& csv) {
  std::vector<ModelKind> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_model_kind(item));
  if (out.empty()) throw Error("no models given");
  return out;
}

std::vector<std::uint64_t> seed_list(std::uint64_t first, int count) {
  std::vector<std::uint64_t> s;
  for (int i = 0; i < count; ++i) s.push_back(first + static_cast<std::uint64_t>(i));
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge-graph fact pooling for multiple-choice QA"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "key=value model config file");
  app.add_option("--seed", g.seed, "seed override");
  app.add_option("--out", g.out, "output directory");

  std::string data = "data";
  std::string split = "test";
  std::string question_id;
  int candidate = 0;
  bool remove_answers = false;
  std::string checkpoint;

  // generate
  auto* gen = app.add_subcommand("generate", "write a synthetic benchmark to --out");
  gen->fallthrough();
  SyntheticSpec spec;
  int train_count = 500;
  gen->add_option("--questions", spec.questions, "total questions")->check(CLI::PositiveNumber);
  gen->add_option("--train", train_count, "questions in the train split");
  gen->add_option("--entities", spec.entities, "entity budget");
  gen->add_option("--candidates", spec.candidates, "candidates per question");
  gen->add_option("--answer-pool", spec.answer_pool, "shared answer entities");
  gen->add_option("--distractor-rate", spec.distractor_rate, "probability of a distractor path");
  gen->add_option("--kg-fraction", spec.kg_fraction, "fraction of KG-determined questions");
  gen->add_option("--relations", spec.extra_relations, "neutral relations");

  auto add_pick = [&](CLI::App* sub) {
    sub->fallthrough();
    sub->add_option("--data", data, "benchmark directory")->required();
    sub->add_option("--split", split, "train or test");
    sub->add_option("--question", question_id, "question id")->required();
    sub->add_option("--candidate", candidate, "candidate index");
  };

  auto* retrieve = app.add_subcommand("retrieve", "print the subgraph of one statement");
  add_pick(retrieve);
  retrieve->add_flag("--remove-answers", remove_answers, "apply answer-edge removal");

  auto* perturb = app.add_subcommand("perturb", "show answer-edge removal on one statement");
  add_pick(perturb);

  auto* encode = app.add_subcommand("encode", "encode every fact and entity into an embedding cache");
  encode->fallthrough();
  encode->add_option("--data", data, "benchmark directory")->required();

  auto* train_cmd = app.add_subcommand("train", "train one model; writes model.ckpt and loss.txt");
  train_cmd->fallthrough();
  train_cmd->add_option("--data", data, "benchmark directory")->required();
  train_cmd->add_flag("--remove-answers", remove_answers, "train under answer-edge removal");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->fallthrough();
  eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  eval->add_option("--data", data, "benchmark directory")->required();
  eval->add_option("--split", split, "train or test");
  eval->add_flag("--remove-answers", remove_answers, "evaluate under answer-edge removal");

  std::string models = "sempool,gnn,lm_only";
  int seeds = 3;
  auto* experiment = app.add_subcommand("experiment", "with/without-answers comparison; writes metrics.txt");
  experiment->fallthrough();
  experiment->add_option("--data", data, "benchmark directory")->required();
  experiment->add_option("--models", models, "comma-separated model kinds");
  experiment->add_option("--seeds", seeds, "seed count")->check(CLI::PositiveNumber);

  std::string axis = "K";
  std::vector<int> values;
  auto* sweep_cmd = app.add_subcommand("sweep", "one experiment per axis value; writes sweep.txt");
  sweep_cmd->fallthrough();
  sweep_cmd->add_option("--data", data, "benchmark directory")->required();
  sweep_cmd->add_option("--axis", axis, "K or max_nodes");
  sweep_cmd->add_option("--values", values, "axis values")->required()->delimiter(',');
  sweep_cmd->add_option("--models", models, "comma-separated model kinds");
  sweep_cmd->add_option("--seeds", seeds, "seed count")->check(CLI::PositiveNumber);

  int top = 3;
  auto* explain_cmd = app.add_subcommand("explain", "top-weighted facts per pooling head");
  add_pick(explain_cmd);
  explain_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  explain_cmd->add_option("--top", top, "facts per head");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check on a tiny model");
  gradcheck->fallthrough();
  std::string gc_model = "sempool";
  gradcheck->add_option("--model", gc_model, "model kind");

  auto* count = app.add_subcommand("count-aggs", "aggregation counts per statement");
  count->fallthrough();
  count->add_option("--data", data, "benchmark directory")->required();
  count->add_option("--split", split, "train or test");

  CLI11_PARSE(app, argc, argv);

  try {
    const fs::path out = g.out;
    if (*gen) {
      if (g.seed >= 0) spec.seed = static_cast<std::uint64_t>(g.seed);
      const auto synth = generate_synthetic(spec);
      write_synthetic(out, synth, train_count);
      std::cout << "wrote " << synth.questions.size() << " questions, " << synth.kg.facts().size()
                << " facts to " << out << '\n';
      return 0;
    }

    if (*retrieve || *perturb) {
      const Benchmark b = load_benchmark(data);
      const ModelConfig c = base_config(g);
      const QuestionRecord& q = find_question(pick_split(b, split), question_id);
      const auto rels = RelationVocab(b.kg.relations());
      const HashBagEncoder dummy(c.d, c.seed);
      const Pipeline pipe(b.kg, b.templates, dummy, c, rels);
      const GroundedStatement stmt = pipe.ground(q, static_cast<std::size_t>(candidate));
      const Subgraph full = build_subgraph(b.kg, stmt, c.max_nodes, false);
      if (*retrieve) {
        std::cout << (remove_answers ? remove_answer_edges(full, stmt) : full).serialize();
      } else {
        const Subgraph cut = remove_answer_edges(full, stmt);
        std::cout << "before\n" << full.serialize() << "after\n" << cut.serialize() << "removed\n";
        for (const auto& e : full.edges) {
          if (!std::binary_search(cut.edges.begin(), cut.edges.end(), e)) std::cout << e.fact.key() << '\n';
        }
      }
      return 0;
    }

    if (*encode) {
      const Benchmark b = load_benchmark(data);
      const ModelConfig c = base_config(g);
      QaModel model = QaModel::create(c, RelationVocab(b.kg.relations()));
      const auto encoder = make_encoder(model);
      EmbeddingCache cache(c.d);
      for (const auto& f : b.kg.facts()) cache.insert(f.key(), encode_fact(verbalize(f, b.templates), *encoder).vector);
      for (const auto& e : b.kg.entities()) cache.insert(text_cache_key(surface_of(e)), encoder->encode_text(surface_of(e)));
      // Virtual edges reach only entities, so their templates are enumerable.
      for (const auto& e : b.kg.entities()) {
        for (auto rel : {kEntityRelation, kAnswerEntityRelation}) {
          const Fact f{std::string(kVirtualNode), std::string(rel), e};
          cache.insert(f.key(), encode_fact(verbalize(f, b.templates), *encoder).vector);
        }
      }
      fs::create_directories(out);
      cache.save(out / "embeddings.bin");
      std::cout << "cached " << cache.size() << " vectors in " << (out / "embeddings.bin") << '\n';
      return 0;
    }

    if (*train_cmd) {
      const Benchmark b = load_benchmark(data);
      const ModelConfig c = base_config(g);
      QaModel model = QaModel::create(c, RelationVocab(b.kg.relations()));
      const auto encoder = make_encoder(model);
      const Pipeline pipe(b.kg, b.templates, *encoder, model.config, model.relations);
      const auto train_set = pipe.prepare_all(b.train, remove_answers);
      TrainOptions opts = train_options(c);
      opts.checkpoint_dir = out / "checkpoints";
      opts.on_epoch = [](int epoch, double loss) {
        log_line("epoch " + std::to_string(epoch) + " loss " + std::to_string(loss));
      };
      const auto result = train(model, train_set, opts);
      save_checkpoint(model, out / "model.ckpt");
      std::string curve;
      for (std::size_t i = 0; i < result.step_losses.size(); ++i) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%zu\t%.10f\n", i + 1, result.step_losses[i]);
        curve += buf;
      }
      write_file_atomic(out / "loss.txt", curve);
      std::cout << "wrote " << (out / "model.ckpt") << '\n';
      return 0;
    }

    if (*eval) {
      const Benchmark b = load_benchmark(data);
      const QaModel model = load_checkpoint(checkpoint);
      const auto encoder = make_encoder(model);
      const Pipeline pipe(b.kg, b.templates, *encoder, model.config, model.relations);
      const double acc = accuracy(model, pipe.prepare_all(pick_split(b, split), remove_answers));
      char buf[128];
      std::snprintf(buf, sizeof buf, "model=%s\ncondition=%s\naccuracy=%.4f\n", to_string(model.config.model).c_str(),
                    remove_answers ? "without_answers" : "with_answers", acc);
      fs::create_directories(out);
      write_file_atomic(out / "eval.txt", buf);
      std::cout << buf;
      return 0;
    }

    if (*experiment || *sweep_cmd) {
      const Benchmark b = load_benchmark(data);
      ExperimentConfig cfg;
      cfg.model = base_config(g);
      cfg.models = parse_models(models);
      cfg.seeds = seed_list(cfg.model.seed, seeds);
      cfg.log = log_line;
      fs::create_directories(out);
      if (*experiment) {
        const Metrics m = run_experiment(cfg, b);
        write_metrics(out / "metrics.txt", m);
        std::cout << m.to_text();
      } else {
        const SweepAxis ax = parse_sweep_axis(axis);
        const auto rows = sweep(cfg, b, ax, values);
        const std::string table = sweep_table(ax, rows);
        write_file_atomic(out / "sweep.txt", table);
        std::cout << table;
      }
      return 0;
    }

    if (*explain_cmd) {
      const Benchmark b = load_benchmark(data);
      const QaModel model = load_checkpoint(checkpoint);
      const auto encoder = make_encoder(model);
      const Pipeline pipe(b.kg, b.templates, *encoder, model.config, model.relations);
      const auto prepared = pipe.prepare(find_question(pick_split(b, split), question_id), remove_answers);
      std::cout << explain(model, prepared, candidate, top).to_text();
      return 0;
    }

    if (*gradcheck) {
      SyntheticSpec tiny;
      tiny.questions = 3;
      tiny.candidates = 2;
      tiny.answer_pool = 4;
      tiny.entities = 200;
      tiny.kg_fraction = 1.0;
      tiny.seed = g.seed >= 0 ? static_cast<std::uint64_t>(g.seed) : 0;
      const Benchmark b = split_benchmark(generate_synthetic(tiny), 3);
      ModelConfig c = g.config.empty() ? ModelConfig{} : load_config(g.config);
      if (g.config.empty()) {
        c.L = 2;
        c.d = 8;
        c.heads = 2;
        c.K = 2;
        c.fusion_mode = FusionMode::early_late;
        c.vocab = 64;
        c.max_tokens = 16;
      }
      c.model = parse_model_kind(gc_model);
      c.seed = tiny.seed;
      const QaModel model = QaModel::create(c, RelationVocab(b.kg.relations()));
      const auto encoder = make_encoder(model);
      const Pipeline pipe(b.kg, b.templates, *encoder, model.config, model.relations);
      const auto batch = pipe.prepare_all(b.train, false);
      const auto report = gradient_check(model, batch);
      for (const auto& [group, err] : report.group_max_rel_error) {
        std::printf("%s\t%.3e\n", group.c_str(), err);
      }
      std::printf("max\t%.3e\nsnapshot_grad\t%.3e\nchecked\t%zu\n", report.max_rel_error,
                  report.snapshot_grad_max_abs, report.checked);
      return report.max_rel_error < 1e-4 ? 0 : 1;
    }

    if (*count) {
      const Benchmark b = load_benchmark(data);
      const ModelConfig c = base_config(g);
      const QaModel model = QaModel::create(c, RelationVocab(b.kg.relations()));
      const auto encoder = make_encoder(model);
      const Pipeline pipe(b.kg, b.templates, *encoder, model.config, model.relations);
      std::cout << "question\tcandidate\tnodes\tpool_aggregations\tnode_updates\n";
      for (const auto& q : pick_split(b, split)) {
        const auto p = pipe.prepare(q, false);
        for (std::size_t i = 0; i < p.candidates.size(); ++i) {
          const auto n = count_aggregations(model, p.candidates[i]);
          std::cout << q.id << '\t' << i << '\t' << p.candidates[i].subgraph.nodes.size() << '\t'
                    << n.pool_aggregations << '\t' << n.node_updates << '\n';
        }
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
