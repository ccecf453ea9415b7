#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spd/distill.hpp"
#include "spd/subspace.hpp"

namespace spd {

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Raised when a pipeline phase fails; artifacts of earlier phases stay on disk.
class PhaseError : public Error {
 public:
  PhaseError(std::string phase, const std::string& msg)
      : Error("phase '" + phase + "' failed: " + msg), phase_(std::move(phase)) {}
  const std::string& phase() const { return phase_; }

 private:
  std::string phase_;
};

struct RunConfig {
  std::string model = "toy";
  TaskKind task = TaskKind::Math;
  std::size_t n_train = 200;
  std::size_t n_calibration = 50;
  std::size_t n_eval = 100;
  std::string rank_mode = "half_full";
  std::string layers = "last_mid";  // or a comma list of 1-based layers
  ProjectMode project_mode = ProjectMode::Both;
  LossMode calibration_source = LossMode::Aligned;
  std::vector<TaskKind> cross_tasks;  // empty: every other task

  ModelConfig model_config;
  SamplingConfig sampling;
  TrainConfig train;
  double ssd_fraction = 0.5;

  std::uint64_t seed = 42;       // sampling, adapter init, data order
  std::uint64_t data_seed = 42;  // task generators
  std::string preset = "default";

  PretrainConfig pretrain;
  std::vector<TaskKind> pretrain_tasks = {TaskKind::Math};
  std::size_t pretrain_pool = 20000;  // examples per task
  std::string base_checkpoint;       // reuse instead of pretraining

  std::string output_dir = "runs/default";
  std::int64_t timestamp = 0;  // bundle creation time; 0 = wall clock

  static RunConfig defaults();
  // Flat key=value text; '#' starts a comment. Unknown keys are errors.
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::string& path);

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();
  static std::string describe_keys();

  // Canonical key=value dump in key order.
  std::string dump() const;
  // Hash over every key that influences artifacts (excludes output_dir).
  std::uint64_t hash() const;
  std::vector<int> resolved_layers() const;
  std::vector<TaskKind> resolved_cross_tasks() const;
  void validate() const;
};

// Applies a preset. "desk" is the toy-scale recipe; it overrides lr.
void apply_preset(RunConfig& cfg, const std::string& name);

struct ArtifactRecord {
  std::string path;  // relative to the run directory
  std::uint64_t checksum = 0;
};

struct PhaseRecord {
  std::string name;
  bool done = false;
  double wall_seconds = 0.0;
  std::map<std::string, ArtifactRecord> artifacts;
};

struct RunManifest {
  std::string run_kind;  // spd | base | psr | ssd_approx
  std::string config_hash;
  std::string run_dir;
  std::vector<PhaseRecord> phases;

  PhaseRecord* find(const std::string& phase);
  const PhaseRecord* find(const std::string& phase) const;
  bool complete() const;
  std::string artifact(const std::string& phase, const std::string& name) const;  // absolute path

  void save(const std::string& path) const;
  static RunManifest load(const std::string& path);
  // Every artifact exists and hashes to its stored checksum.
  bool verify(std::string* problem = nullptr) const;
};

enum class RunKind { Spd, Base, Psr, SsdApprox };
std::string to_string(RunKind k);
RunKind parse_run_kind(const std::string& s);

// Phase order; a run of a given kind executes the subset it needs.
//   pretrain, data, calibrate, extract, generate, finetune, evaluate
std::vector<std::string> phases_for(RunKind k);

struct RunResult {
  RunManifest manifest;
  std::vector<std::string> ran;      // phases executed in this call
  std::vector<std::string> skipped;  // phases restored from the manifest
};

struct PipelineOptions {
  std::string stop_after;  // empty: run every phase
  bool verbose = false;
};

// Resumable pipeline: completed phases whose artifacts verify are skipped; the
// first phase that must rerun invalidates every later phase.
RunResult run_pipeline(const RunConfig& cfg, RunKind kind, const PipelineOptions& opts = {});
RunResult run_spd(const RunConfig& cfg, const PipelineOptions& opts = {});
RunResult run_baseline(const RunConfig& cfg, RunKind which, const PipelineOptions& opts = {});

struct EvalRow {
  std::string task;
  std::string split;  // in_task | cross_task
  double accuracy = 0.0;
  double nll = 0.0;
  std::size_t n = 0;
};

// Parsed report.csv of a finished run.
std::vector<EvalRow> read_report(const std::string& run_dir);
double in_task_accuracy(const std::vector<EvalRow>& rows);

enum class AblationAxis { LossMode, CalibSize, Rank, ProjectMode };
std::string to_string(AblationAxis a);
AblationAxis parse_ablation_axis(const std::string& s);
std::vector<std::string> default_axis_values(AblationAxis a);
// The config key an axis value is written to.
std::string axis_key(AblationAxis a);

struct AblationRow {
  std::string value;
  std::string run_dir;
  double in_task_accuracy = 0.0;
  double in_task_nll = 0.0;
  double cross_task_accuracy = 0.0;
  std::string bundle_checksum;
  std::string corpus_checksum;
};

// One SPD run per value in <output_dir>/<axis>_<value>, sharing one base
// checkpoint. Writes <output_dir>/sweep_<axis>.csv.
std::vector<AblationRow> run_ablation(const RunConfig& cfg, AblationAxis axis,
                                      const std::vector<std::string>& values,
                                      const PipelineOptions& opts = {});
std::string ablation_csv(AblationAxis axis, const std::vector<AblationRow>& rows);
AblationRow ablation_row(const std::string& value, const std::string& run_dir);

// Output root override.
inline constexpr const char* kOutputRootEnv = "SPD_OUTPUT_ROOT";
std::string resolve_output_dir(const std::string& dir);

}  // namespace spd
