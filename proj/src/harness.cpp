#include "sempool/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "sempool/error.hpp"

namespace sempool {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Datasets

QuestionRecord parse_question(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw Error(std::string("malformed dataset record: ") + e.what());
  }
  try {
    QuestionRecord q;
    q.id = j.value("id", std::string());
    q.context = j.value("context", std::string());
    q.question = j.at("question").get<std::string>();
    q.candidates = j.at("candidates").get<std::vector<std::string>>();
    q.answer = j.at("answer").get<int>();
    if (j.contains("question_entities")) {
      q.question_entities = j["question_entities"].get<std::vector<EntityId>>();
    }
    if (j.contains("candidate_entities")) {
      q.candidate_entities = j["candidate_entities"].get<std::vector<std::vector<EntityId>>>();
    }
    if (q.question.empty()) throw Error("record " + q.id + ": empty question");
    if (q.candidates.empty()) throw Error("record " + q.id + ": no candidates");
    if (q.answer < 0 || q.answer >= static_cast<int>(q.candidates.size())) {
      throw Error("record " + q.id + ": answer index out of range");
    }
    return q;
  } catch (const json::exception& e) {
    throw Error(std::string("bad dataset record: ") + e.what());
  }
}

std::string dump_question(const QuestionRecord& q) {
  json j;
  j["id"] = q.id;
  j["context"] = q.context;
  j["question"] = q.question;
  j["candidates"] = q.candidates;
  j["answer"] = q.answer;
  if (q.question_entities) j["question_entities"] = *q.question_entities;
  if (q.candidate_entities) j["candidate_entities"] = *q.candidate_entities;
  return j.dump();
}

std::vector<QuestionRecord> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset " + path.string());
  std::vector<QuestionRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_question(line));
    } catch (const Error& e) {
      throw Error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (out.back().id.empty()) out.back().id = "q" + std::to_string(out.size() - 1);
  }
  return out;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    out << text;
    if (!out) throw Error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

void write_dataset(const std::filesystem::path& path, const std::vector<QuestionRecord>& qs) {
  std::string text;
  for (const auto& q : qs) text += dump_question(q) + '\n';
  write_file_atomic(path, text);
}

// ---------------------------------------------------------------------------
// Synthetic benchmark

namespace {

const std::vector<std::string> kCategories = {"animal", "tool", "color", "city",
                                              "food",   "metal", "plant", "sport"};

struct NeutralRelation {
  const char* id;
  const char* templ;
};

const std::vector<NeutralRelation> kNeutral = {
    {"near", "{h} is near {t}"},         {"part_of", "{h} is part of {t}"},
    {"made_by", "{h} is made by {t}"},   {"seen_with", "{h} is seen with {t}"},
    {"older_than", "{h} is older than {t}"}, {"named_after", "{h} is named after {t}"},
    {"found_in", "{h} is found in {t}"}, {"used_for", "{h} is used for {t}"},
};

class NameSource {
 public:
  explicit NameSource(Rng& rng) : rng_(rng) {
    for (const auto& c : kCategories) used_.insert(c);
    for (const char* w : {"what", "does", "cause", "causes", "question", "supports", "contradicts",
                          "relates", "to", "is", "by", "with", "than", "in", "for", "of", "after",
                          "near", "part", "made", "seen", "older", "named", "found", "used",
                          "mentions", "asks", "about"}) {
      used_.insert(w);
    }
  }

  std::string next() {
    static constexpr std::string_view consonants = "bdfgklmnprstvz";
    static constexpr std::string_view vowels = "aeiou";
    std::uniform_int_distribution<std::size_t> c(0, consonants.size() - 1);
    std::uniform_int_distribution<std::size_t> v(0, vowels.size() - 1);
    for (;;) {
      std::string name;
      for (int s = 0; s < 3; ++s) {
        name += consonants[c(rng_)];
        name += vowels[v(rng_)];
      }
      if (used_.insert(name).second) return name;
    }
  }

 private:
  Rng& rng_;
  std::set<std::string> used_;
};

int kg_question_count(const SyntheticSpec& spec) {
  return static_cast<int>(std::lround(spec.questions * spec.kg_fraction));
}

constexpr int kFillerPool = 32;

}  // namespace

int required_entities(const SyntheticSpec& spec) {
  const int kg_q = kg_question_count(spec);
  const int text_q = spec.questions - kg_q;
  const int distractors = spec.distractor_rate > 0 ? kg_q : 0;
  return spec.answer_pool + kg_q * (1 + 2 * spec.candidates) + distractors + text_q + kFillerPool;
}

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  if (spec.questions < 1 || spec.candidates < 2 || spec.answer_pool < spec.candidates) {
    throw Error("synthetic spec needs questions >= 1, candidates >= 2, answer_pool >= candidates");
  }
  if (spec.kg_fraction < 0 || spec.kg_fraction > 1 || spec.distractor_rate < 0 || spec.distractor_rate > 1) {
    throw Error("synthetic spec fractions must lie in [0, 1]");
  }
  if (spec.extra_relations < 0 || spec.extra_relations > static_cast<int>(kNeutral.size())) {
    throw Error("extra_relations must be in [0, " + std::to_string(kNeutral.size()) + "]");
  }
  if (spec.candidates > static_cast<int>(kCategories.size())) {
    throw Error("at most " + std::to_string(kCategories.size()) + " candidates per question");
  }
  const int need = required_entities(spec);
  if (spec.entities < need) {
    throw Error("infeasible synthetic spec: needs " + std::to_string(need) + " entities, budget is " +
                std::to_string(spec.entities));
  }
  if (spec.distractor_rate > 0 && spec.extra_relations < 1) {
    throw Error("distractors need at least one extra relation");
  }

  Rng rng(spec.seed);
  NameSource names(rng);
  SyntheticData data;
  data.templates.set("related_to", "{h} relates to {t}");
  data.templates.set("causes", "{h} causes {t}");
  data.templates.set("supports", "{h} supports {t}");
  data.templates.set("contradicts", "{h} contradicts {t}");
  std::vector<RelationId> neutral;
  for (int i = 0; i < spec.extra_relations; ++i) {
    neutral.push_back(kNeutral[static_cast<std::size_t>(i)].id);
    data.templates.set(kNeutral[static_cast<std::size_t>(i)].id, kNeutral[static_cast<std::size_t>(i)].templ);
  }

  std::vector<EntityId> pool(static_cast<std::size_t>(spec.answer_pool));
  for (auto& e : pool) e = names.next();
  std::vector<EntityId> fillers(kFillerPool);
  for (auto& e : fillers) e = names.next();

  std::vector<Fact> facts;
  // Neutral links among fillers so every filler is part of the KG.
  const RelationId filler_rel = neutral.empty() ? RelationId("related_to") : neutral[0];
  for (std::size_t i = 0; i + 1 < fillers.size(); ++i) facts.push_back({fillers[i], filler_rel, fillers[i + 1]});

  const int kg_q = kg_question_count(spec);
  std::vector<bool> is_kg(static_cast<std::size_t>(spec.questions), false);
  std::fill(is_kg.begin(), is_kg.begin() + kg_q, true);
  std::shuffle(is_kg.begin(), is_kg.end(), rng);

  auto pick = [&](std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  };
  std::bernoulli_distribution distract(spec.distractor_rate);
  const auto C = static_cast<std::size_t>(spec.candidates);

  for (int qi = 0; qi < spec.questions; ++qi) {
    QuestionRecord q;
    q.id = "q" + std::to_string(qi);
    const EntityId e = names.next();
    std::vector<std::size_t> chosen;
    while (chosen.size() < C) {
      const std::size_t a = pick(pool.size());
      if (std::find(chosen.begin(), chosen.end(), a) == chosen.end()) chosen.push_back(a);
    }
    q.answer = static_cast<int>(pick(C));
    const EntityId& correct = pool[chosen[static_cast<std::size_t>(q.answer)]];
    const std::string& category = kCategories[pick(kCategories.size())];
    q.question = "what " + category + " does " + e + " cause ?";

    if (is_kg[static_cast<std::size_t>(qi)]) {
      for (std::size_t j = 0; j < C; ++j) {
        const EntityId& a = pool[chosen[j]];
        q.candidates.push_back(a + " " + category);
        const EntityId m = names.next();
        const EntityId n = names.next();
        facts.push_back({e, "related_to", m});
        facts.push_back({m, "related_to", a});
        facts.push_back({e, "related_to", n});
        facts.push_back({n, "related_to", a});
        facts.push_back({m, static_cast<int>(j) == q.answer ? "supports" : "contradicts", n});
      }
      facts.push_back({e, "causes", correct});
      if (distract(rng)) {
        const EntityId f = names.next();
        facts.push_back({e, neutral[pick(neutral.size())], f});
        facts.push_back({f, neutral[pick(neutral.size())], pool[chosen[pick(C)]]});
      }
    } else {
      std::vector<std::string> cats{category};
      while (cats.size() < C) {
        const std::string& c = kCategories[pick(kCategories.size())];
        if (std::find(cats.begin(), cats.end(), c) == cats.end()) cats.push_back(c);
      }
      std::swap(cats[0], cats[static_cast<std::size_t>(q.answer)]);
      for (std::size_t j = 0; j < C; ++j) q.candidates.push_back(pool[chosen[j]] + " " + cats[j]);
      facts.push_back({e, filler_rel, fillers[pick(fillers.size())]});
      facts.push_back({fillers[pick(fillers.size())], filler_rel, e});
    }
    data.questions.push_back(std::move(q));
    data.kg_determined.push_back(is_kg[static_cast<std::size_t>(qi)]);
    data.question_entity.push_back(e);
    data.answer_entity.push_back(correct);
  }
  data.kg = KnowledgeGraph::from_facts(std::move(facts));
  if (static_cast<int>(data.kg.entities().size()) > spec.entities) {
    throw Error("synthetic generation exceeded the entity budget");
  }
  return data;
}

Benchmark split_benchmark(const SyntheticData& data, int train_count) {
  if (train_count < 0 || train_count > static_cast<int>(data.questions.size())) {
    throw Error("train split larger than the question set");
  }
  Benchmark b;
  b.kg = data.kg;
  b.templates = data.templates;
  b.train.assign(data.questions.begin(), data.questions.begin() + train_count);
  b.test.assign(data.questions.begin() + train_count, data.questions.end());
  return b;
}

void write_synthetic(const std::filesystem::path& dir, const SyntheticData& data, int train_count) {
  std::filesystem::create_directories(dir);
  const Benchmark b = split_benchmark(data, train_count);
  write_kg(dir / "kg.tsv", data.kg);
  write_templates(dir / "templates.tsv", data.templates);
  write_dataset(dir / "train.jsonl", b.train);
  write_dataset(dir / "test.jsonl", b.test);
}

Benchmark load_benchmark(const std::filesystem::path& dir) {
  Benchmark b;
  b.kg = load_kg(dir / "kg.tsv");
  b.templates = load_templates(dir / "templates.tsv");
  b.train = load_dataset(dir / "train.jsonl");
  b.test = load_dataset(dir / "test.jsonl");
  return b;
}

// ---------------------------------------------------------------------------
// Experiments

double delta_acc(double acc_with, double acc_without) {
  if (acc_with == 0) return 0.0;
  const double pct = (acc_without - acc_with) / acc_with * 100.0;
  return std::round(pct * 10.0) / 10.0 + 0.0;
}

const ModelSummary& Metrics::summary(ModelKind m) const {
  for (const auto& s : summaries) {
    if (s.model == m) return s;
  }
  throw Error("no results for model " + to_string(m));
}

namespace {

std::string fixed(double x, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, x + 0.0);
  return buf;
}

}  // namespace

std::string Metrics::to_text() const {
  std::string out = "protocol=matched_training\n";
  out += "baselines=1\n";
  for (const auto& s : summaries) {
    const std::string p = to_string(s.model) + ".";
    out += p + "acc_with=" + fixed(s.acc_with_mean, 4) + '\n';
    out += p + "acc_with_dev=" + fixed(s.acc_with_dev, 4) + '\n';
    out += p + "acc_without=" + fixed(s.acc_without_mean, 4) + '\n';
    out += p + "acc_without_dev=" + fixed(s.acc_without_dev, 4) + '\n';
    out += p + "delta_acc=" + fixed(s.delta, 1) + '\n';
  }
  out += "[table]\nmodel\tseed\tacc_with\tacc_without\tdelta_acc\n";
  for (const auto& r : runs) {
    out += to_string(r.model) + '\t' + std::to_string(r.seed) + '\t' + fixed(r.acc_with, 4) + '\t' +
           fixed(r.acc_without, 4) + '\t' + fixed(r.delta, 1) + '\n';
  }
  out += "[/table]\n";
  return out;
}

Metrics summarize(std::vector<RunResult> runs) {
  Metrics m;
  m.runs = std::move(runs);
  std::vector<ModelKind> order;
  for (const auto& r : m.runs) {
    if (std::find(order.begin(), order.end(), r.model) == order.end()) order.push_back(r.model);
  }
  for (ModelKind kind : order) {
    std::vector<double> w, wo;
    for (const auto& r : m.runs) {
      if (r.model != kind) continue;
      w.push_back(r.acc_with);
      wo.push_back(r.acc_without);
    }
    auto mean = [](const std::vector<double>& x) {
      return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
    };
    auto dev = [](const std::vector<double>& x, double mu) {
      double d = 0;
      for (double v : x) d = std::max(d, std::abs(v - mu));
      return d;
    };
    ModelSummary s;
    s.model = kind;
    s.acc_with_mean = mean(w);
    s.acc_with_dev = dev(w, s.acc_with_mean);
    s.acc_without_mean = mean(wo);
    s.acc_without_dev = dev(wo, s.acc_without_mean);
    s.delta = delta_acc(s.acc_with_mean, s.acc_without_mean);
    m.summaries.push_back(s);
  }
  return m;
}

void write_metrics(const std::filesystem::path& path, const Metrics& m) {
  write_file_atomic(path, m.to_text());
}

RunResult run_single(const ModelConfig& base, const Benchmark& bench, std::uint64_t seed,
                     const std::function<void(const std::string&)>& log) {
  ModelConfig cfg = base;
  cfg.seed = seed;
  const RelationVocab relations(bench.kg.relations());
  RunResult r;
  r.model = cfg.model;
  r.seed = seed;
  const bool graph_free = cfg.model == ModelKind::lm_only;
  for (bool remove : {false, true}) {
    if (remove && graph_free) {
      r.acc_without = r.acc_with;
      break;
    }
    QaModel model = QaModel::create(cfg, relations);
    const auto encoder = make_encoder(model);
    const Pipeline pipe(bench.kg, bench.templates, *encoder, model.config, model.relations);
    const auto train_set = pipe.prepare_all(bench.train, remove);
    const auto test_set = pipe.prepare_all(bench.test, remove);
    TrainOptions opts = train_options(cfg);
    if (log) {
      opts.on_epoch = [&](int epoch, double loss) {
        log(to_string(cfg.model) + " seed " + std::to_string(seed) + (remove ? " w/o" : " w/") +
            " epoch " + std::to_string(epoch) + " loss " + fixed(loss, 4));
      };
    }
    train(model, train_set, opts);
    (remove ? r.acc_without : r.acc_with) = accuracy(model, test_set);
  }
  r.delta = delta_acc(r.acc_with, r.acc_without);
  if (log) {
    log(to_string(cfg.model) + " seed " + std::to_string(seed) + ": w/ " + fixed(r.acc_with, 2) +
        " w/o " + fixed(r.acc_without, 2) + " delta " + fixed(r.delta, 1));
  }
  return r;
}

Metrics run_experiment(const ExperimentConfig& cfg, const Benchmark& bench) {
  if (cfg.seeds.empty()) throw Error("experiment needs at least one seed");
  std::vector<RunResult> runs;
  for (ModelKind kind : cfg.models) {
    ModelConfig mc = cfg.model;
    mc.model = kind;
    for (std::uint64_t seed : cfg.seeds) runs.push_back(run_single(mc, bench, seed, cfg.log));
  }
  return summarize(std::move(runs));
}

SweepAxis parse_sweep_axis(std::string_view s) {
  if (s == "K") return SweepAxis::K;
  if (s == "max_nodes") return SweepAxis::max_nodes;
  throw Error("unknown sweep axis '" + std::string(s) + "'");
}

std::string to_string(SweepAxis a) { return a == SweepAxis::K ? "K" : "max_nodes"; }

std::vector<SweepRow> sweep(const ExperimentConfig& cfg, const Benchmark& bench, SweepAxis axis,
                            const std::vector<int>& values) {
  if (values.empty()) throw Error("sweep needs at least one value");
  std::vector<SweepRow> rows;
  for (int v : values) {
    ExperimentConfig c = cfg;
    if (axis == SweepAxis::K) {
      c.model.K = v;
      if (v > 0) c.model.fusion_mode = FusionMode::early_late;
    } else {
      c.model.max_nodes = v;
    }
    c.model.validate();
    rows.push_back({v, run_experiment(c, bench)});
  }
  return rows;
}

std::string sweep_table(SweepAxis axis, const std::vector<SweepRow>& rows) {
  std::string out = "[table]\n" + to_string(axis) + "\tmodel\tacc_with\tacc_with_dev\tacc_without\tacc_without_dev\tdelta_acc\n";
  for (const auto& row : rows) {
    for (const auto& s : row.metrics.summaries) {
      out += std::to_string(row.value) + '\t' + to_string(s.model) + '\t' + fixed(s.acc_with_mean, 4) + '\t' +
             fixed(s.acc_with_dev, 4) + '\t' + fixed(s.acc_without_mean, 4) + '\t' +
             fixed(s.acc_without_dev, 4) + '\t' + fixed(s.delta, 1) + '\n';
    }
  }
  out += "[/table]\n";
  return out;
}

// ---------------------------------------------------------------------------
// Explain / counters

ExplainReport explain(const QaModel& model, const PreparedQuestion& q, int candidate, int top_n) {
  if (model.config.model != ModelKind::sempool) throw Error("explain needs a sempool model");
  if (candidate < 0 || candidate >= static_cast<int>(q.candidates.size())) {
    throw Error("candidate index out of range");
  }
  if (top_n < 0) throw Error("top-N must be non-negative");
  const PreparedCandidate& c = q.candidates[static_cast<std::size_t>(candidate)];
  const ForwardTrace t = forward_candidate(model, c);
  ExplainReport r;
  r.question_id = q.id;
  r.candidate = candidate;
  for (std::size_t k = 0; k < t.pools.size(); ++k) {
    ExplainLayer layer;
    layer.head = static_cast<int>(k);
    const Vector& w = t.pools[k].weights;
    layer.all.assign(w.data(), w.data() + w.size());
    layer.weight_sum = w.sum();
    std::vector<std::size_t> idx(layer.all.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return layer.all[a] > layer.all[b]; });
    idx.resize(std::min(idx.size(), static_cast<std::size_t>(top_n)));
    for (std::size_t i : idx) layer.top.push_back({c.subgraph.edges[i].fact, c.fact_texts[i], layer.all[i]});
    r.layers.push_back(std::move(layer));
  }
  return r;
}

std::string ExplainReport::to_text() const {
  std::string out = "question\t" + question_id + "\ncandidate\t" + std::to_string(candidate) + '\n';
  for (const auto& l : layers) {
    out += "[head " + std::to_string(l.head) + "] edges=" + std::to_string(l.all.size()) +
           " sum=" + fixed(l.weight_sum, 9) + '\n';
    out += "rank\tweight\tfact\n";
    for (std::size_t i = 0; i < l.top.size(); ++i) {
      out += std::to_string(i + 1) + '\t' + fixed(l.top[i].weight, 6) + '\t' + l.top[i].text + '\n';
    }
  }
  return out;
}

AggregationCounter count_aggregations(const QaModel& model, const PreparedCandidate& c) {
  return forward_candidate(model, c).counter;
}

}  // namespace sempool
