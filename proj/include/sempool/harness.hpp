#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sempool/kg_store.hpp"
#include "sempool/lm_core.hpp"
#include "sempool/verbalize_encode.hpp"

namespace sempool {

// ---------------------------------------------------------------------------
// Datasets: one JSON object per line.

QuestionRecord parse_question(std::string_view json_line);
std::string dump_question(const QuestionRecord& q);
std::vector<QuestionRecord> load_dataset(const std::filesystem::path& path);
void write_dataset(const std::filesystem::path& path, const std::vector<QuestionRecord>& qs);

/// Writes `text` to `path` through a temporary file and a rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

// ---------------------------------------------------------------------------
// Synthetic benchmark.
//
// Every question reads "what <category> does <entity> cause ?" and every
// candidate reads "<answer entity> <category>".
//
// Text-determined questions: exactly one candidate repeats the question's
// category word. The graph carries no signal.
//
// KG-determined questions: all candidates repeat the category, so text alone
// is at chance. Candidate j reaches the question entity E through two
// mediators, E - M_j - A_j and E - N_j - A_j (related_to), and the mediators
// are joined by a cue fact M_j supports N_j for the correct answer and
// M_j contradicts N_j otherwise. The correct answer also has E causes A*.
// Removing answer edges keeps the cue, which is three hops from the virtual
// question node.

struct SyntheticSpec {
  int entities = 6000;        // budget; generation fails if it cannot be met
  int extra_relations = 4;    // neutral relations besides the four structural ones
  int questions = 700;
  int candidates = 4;
  double distractor_rate = 0.3;
  double kg_fraction = 0.6;
  int answer_pool = 48;
  std::uint64_t seed = 0;
};

struct SyntheticData {
  KnowledgeGraph kg;
  TemplateTable templates;
  std::vector<QuestionRecord> questions;
  std::vector<bool> kg_determined;
  std::vector<EntityId> question_entity;  // E per question
  std::vector<EntityId> answer_entity;    // A* per question
};

/// Entities needed for `spec`; generate_synthetic throws when the budget is smaller.
int required_entities(const SyntheticSpec& spec);

SyntheticData generate_synthetic(const SyntheticSpec& spec);

/// kg.tsv, templates.tsv, and train/test JSONL split at `train_count`.
void write_synthetic(const std::filesystem::path& dir, const SyntheticData& data, int train_count);

struct Benchmark {
  KnowledgeGraph kg;
  TemplateTable templates;
  std::vector<QuestionRecord> train;
  std::vector<QuestionRecord> test;
};

Benchmark load_benchmark(const std::filesystem::path& dir);
Benchmark split_benchmark(const SyntheticData& data, int train_count);

// ---------------------------------------------------------------------------
// Experiments

/// Relative change (without - with) / with in percent, rounded half away from
/// zero to one decimal. Zero when acc_with is zero.
double delta_acc(double acc_with, double acc_without);

struct RunResult {
  ModelKind model = ModelKind::sempool;
  std::uint64_t seed = 0;
  double acc_with = 0;
  double acc_without = 0;
  double delta = 0;
};

struct ModelSummary {
  ModelKind model = ModelKind::sempool;
  double acc_with_mean = 0;
  double acc_with_dev = 0;  // max |x - mean| over seeds
  double acc_without_mean = 0;
  double acc_without_dev = 0;
  double delta = 0;  // from the seed means
};

struct Metrics {
  std::vector<RunResult> runs;
  std::vector<ModelSummary> summaries;

  const ModelSummary& summary(ModelKind m) const;
  std::string to_text() const;
};

struct ExperimentConfig {
  ModelConfig model;
  std::vector<ModelKind> models{ModelKind::sempool, ModelKind::gnn, ModelKind::lm_only};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::function<void(const std::string&)> log;
};

/// Trains one model per (model kind, seed, condition) and evaluates it under
/// the same condition. lm_only ignores the graph, so it runs once per seed and
/// reports the same accuracy for both conditions.
Metrics run_experiment(const ExperimentConfig& cfg, const Benchmark& bench);

RunResult run_single(const ModelConfig& config, const Benchmark& bench, std::uint64_t seed,
                     const std::function<void(const std::string&)>& log = {});

Metrics summarize(std::vector<RunResult> runs);

void write_metrics(const std::filesystem::path& path, const Metrics& m);

enum class SweepAxis { K, max_nodes };
SweepAxis parse_sweep_axis(std::string_view s);
std::string to_string(SweepAxis a);

struct SweepRow {
  int value = 0;
  Metrics metrics;
};

std::vector<SweepRow> sweep(const ExperimentConfig& cfg, const Benchmark& bench, SweepAxis axis,
                            const std::vector<int>& values);
std::string sweep_table(SweepAxis axis, const std::vector<SweepRow>& rows);

// ---------------------------------------------------------------------------
// Interpretability and instrumentation

struct ExplainRow {
  Fact fact;
  std::string text;
  double weight = 0;
};

struct ExplainLayer {
  int head = 0;              // pooling head k; head 0 feeds the [GRAPH] input
  double weight_sum = 0;     // over the full edge set
  std::vector<ExplainRow> top;
  std::vector<double> all;   // every a_e in canonical edge order
};

struct ExplainReport {
  std::string question_id;
  int candidate = 0;
  std::vector<ExplainLayer> layers;
  std::string to_text() const;
};

ExplainReport explain(const QaModel& model, const PreparedQuestion& q, int candidate, int top_n);

AggregationCounter count_aggregations(const QaModel& model, const PreparedCandidate& c);

}  // namespace sempool
