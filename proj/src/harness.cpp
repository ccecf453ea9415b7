#include "spd/harness.hpp"

#include <charconv>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "json.hpp"
#include "spd/binio.hpp"
#include "spd/checkpoint.hpp"

namespace fs = std::filesystem;

namespace spd {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto r = std::from_chars(v.data(), end, out);
  if (r.ec != std::errc() || r.ptr != end)
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  return out;
}

std::string join_tasks(const std::vector<TaskKind>& ks) {
  std::string s;
  for (std::size_t i = 0; i < ks.size(); ++i) s += (i ? "," : "") + to_string(ks[i]);
  return s;
}

std::vector<TaskKind> parse_tasks(const std::string& v) {
  std::vector<TaskKind> out;
  for (const auto& t : split_list(v)) out.push_back(parse_task_kind(t));
  return out;
}

struct KeyDef {
  const char* name;
  const char* doc;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define SPD_NUM(key, field, type, doc)                                                  \
  KeyDef {                                                                              \
    key, doc, [](RunConfig& c, const std::string& v) { c.field = parse_number<type>(key, v); }, \
        [](const RunConfig& c) {                                                        \
          if constexpr (std::is_floating_point_v<type>)                                 \
            return fmt_double(c.field);                                                 \
          else                                                                          \
            return std::to_string(c.field);                                             \
        }                                                                               \
  }

const std::vector<KeyDef>& key_defs() {
  static const std::vector<KeyDef> defs = {
      {"model", "model label echoed into reports",
       [](RunConfig& c, const std::string& v) { c.model = v; },
       [](const RunConfig& c) { return c.model; }},
      {"task", "in-task family: math | choice | program",
       [](RunConfig& c, const std::string& v) { c.task = parse_task_kind(v); },
       [](const RunConfig& c) { return to_string(c.task); }},
      SPD_NUM("n_train", n_train, std::size_t, "prompts in the self-generated corpus"),
      SPD_NUM("n_calibration", n_calibration, std::size_t, "calibration examples"),
      SPD_NUM("n_eval", n_eval, std::size_t, "evaluation examples per task"),
      {"rank_mode", "half_full | fixed:<k> | energy:<tau>",
       [](RunConfig& c, const std::string& v) {
         RankMode::parse(v);
         c.rank_mode = v;
       },
       [](const RunConfig& c) { return c.rank_mode; }},
      {"layers", "last_mid or a comma list of 1-based layers",
       [](RunConfig& c, const std::string& v) { c.layers = v; },
       [](const RunConfig& c) { return c.layers; }},
      {"project_mode", "K | V | both",
       [](RunConfig& c, const std::string& v) { c.project_mode = parse_project_mode(v); },
       [](const RunConfig& c) { return to_string(c.project_mode); }},
      {"calibration_source", "calibration loss: aligned | full_sequence",
       [](RunConfig& c, const std::string& v) { c.calibration_source = parse_loss_mode(v); },
       [](const RunConfig& c) { return to_string(c.calibration_source); }},
      {"cross_tasks", "comma list of cross-task eval families (empty: all others)",
       [](RunConfig& c, const std::string& v) { c.cross_tasks = parse_tasks(v); },
       [](const RunConfig& c) { return join_tasks(c.cross_tasks); }},
      SPD_NUM("n_layers", model_config.n_layers, int, "transformer blocks"),
      SPD_NUM("d_model", model_config.d_model, int, "residual width"),
      SPD_NUM("n_heads", model_config.n_heads, int, "attention heads"),
      SPD_NUM("head_dim", model_config.head_dim, int, "per-head width"),
      SPD_NUM("max_seq_len", model_config.max_seq_len, int, "context length"),
      SPD_NUM("mlp_hidden", model_config.mlp_hidden, int, "MLP hidden width"),
      {"sampling", "greedy | ancestral",
       [](RunConfig& c, const std::string& v) { c.sampling.strategy = parse_sampling_strategy(v); },
       [](const RunConfig& c) { return to_string(c.sampling.strategy); }},
      SPD_NUM("temperature", sampling.temperature, double, "ancestral sampling temperature"),
      SPD_NUM("max_new_tokens", sampling.max_new_tokens, int, "decode budget per completion"),
      SPD_NUM("lr", train.lr, double, "fine-tuning learning rate"),
      SPD_NUM("weight_decay", train.weight_decay, double, "decoupled weight decay"),
      {"schedule", "learning-rate schedule (cosine)",
       [](RunConfig& c, const std::string& v) { c.train.schedule = v; },
       [](const RunConfig& c) { return c.train.schedule; }},
      SPD_NUM("epochs", train.epochs, int, "fine-tuning epochs"),
      SPD_NUM("batch_size", train.batch_size, int, "records per optimizer step"),
      SPD_NUM("lora_r", train.lora_r, int, "adapter rank"),
      SPD_NUM("lora_alpha", train.lora_alpha, double, "adapter alpha"),
      SPD_NUM("lora_dropout", train.lora_dropout, double, "adapter input dropout"),
      {"loss_region", "full_concat | completion_only",
       [](RunConfig& c, const std::string& v) { c.train.region = parse_loss_region(v); },
       [](const RunConfig& c) { return to_string(c.train.region); }},
      SPD_NUM("ssd_fraction", ssd_fraction, double, "truncation fraction of max_new_tokens"),
      {"seed", "run seed: sampling, adapter init, data order",
       [](RunConfig& c, const std::string& v) {
         c.seed = parse_number<std::uint64_t>("seed", v);
         c.sampling.seed = c.seed;
         c.train.seed = c.seed;
       },
       [](const RunConfig& c) { return std::to_string(c.seed); }},
      SPD_NUM("data_seed", data_seed, std::uint64_t, "task generator seed"),
      {"preset", "default | desk",
       [](RunConfig& c, const std::string& v) { apply_preset(c, v); },
       [](const RunConfig& c) { return c.preset; }},
      SPD_NUM("pretrain_steps", pretrain.max_steps, int, "toy base pretraining step cap"),
      SPD_NUM("pretrain_lr", pretrain.lr, double, "toy base pretraining learning rate"),
      SPD_NUM("pretrain_warmup", pretrain.warmup, int, "linear warmup steps"),
      SPD_NUM("pretrain_batch", pretrain.batch_size, int, "pretraining batch size"),
      SPD_NUM("pretrain_eval_every", pretrain.eval_every, int, "steps between band checks"),
      SPD_NUM("band_lo", pretrain.band_lo, double, "lower edge of the target accuracy band"),
      SPD_NUM("band_hi", pretrain.band_hi, double, "upper edge of the target accuracy band"),
      SPD_NUM("init_seed", pretrain.init_seed, std::uint64_t, "base weight init seed"),
      {"pretrain_region", "full_concat | completion_only",
       [](RunConfig& c, const std::string& v) { c.pretrain.region = parse_loss_region(v); },
       [](const RunConfig& c) { return to_string(c.pretrain.region); }},
      {"pretrain_tasks", "comma list of task families in the pretraining mix",
       [](RunConfig& c, const std::string& v) { c.pretrain_tasks = parse_tasks(v); },
       [](const RunConfig& c) { return join_tasks(c.pretrain_tasks); }},
      SPD_NUM("pretrain_pool", pretrain_pool, std::size_t, "pretraining examples per task"),
      {"base_checkpoint", "existing base checkpoint (skips pretraining)",
       [](RunConfig& c, const std::string& v) { c.base_checkpoint = v; },
       [](const RunConfig& c) { return c.base_checkpoint; }},
      {"output_dir", "run directory",
       [](RunConfig& c, const std::string& v) { c.output_dir = v; },
       [](const RunConfig& c) { return c.output_dir; }},
      SPD_NUM("timestamp", timestamp, std::int64_t, "bundle creation time, unix s (0: now)"),
  };
  return defs;
}

#undef SPD_NUM

const KeyDef& find_key(const std::string& key) {
  for (const auto& d : key_defs())
    if (key == d.name) return d;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

// ---- RunConfig ----------------------------------------------------------------

RunConfig RunConfig::defaults() {
  RunConfig c;
  c.model_config.vocab_size = Tokenizer::vocab_size();
  c.sampling = default_generation_sampling(c.seed);
  c.train.seed = c.seed;
  return c;
}

void apply_preset(RunConfig& cfg, const std::string& name) {
  if (name == "default") {
    cfg.train.lr = 1e-5;
  } else if (name == "desk") {
    cfg.train.lr = 3e-4;
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected default | desk)");
  }
  cfg.preset = name;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  try {
    find_key(key).set(*this, trim(value));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

std::string RunConfig::get(const std::string& key) const { return find_key(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& d : key_defs()) out.emplace_back(d.name);
    return out;
  }();
  return k;
}

std::string RunConfig::describe_keys() {
  std::ostringstream os;
  const RunConfig d = defaults();
  for (const auto& k : key_defs())
    os << "  " << std::left << std::setw(20) << k.name << std::setw(14) << k.get(d) << k.doc << "\n";
  return os.str();
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig c = defaults();
  std::vector<std::pair<std::string, std::string>> kv;
  std::istringstream is(text);
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(n) + ": expected key=value");
    kv.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  // the preset goes first so explicit keys override it
  for (const auto& [k, v] : kv)
    if (k == "preset") c.set(k, v);
  for (const auto& [k, v] : kv)
    if (k != "preset") c.set(k, v);
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

std::string RunConfig::dump() const {
  std::ostringstream os;
  for (const auto& d : key_defs()) os << d.name << " = " << d.get(*this) << "\n";
  return os.str();
}

std::uint64_t RunConfig::hash() const {
  std::string s;
  for (const auto& d : key_defs()) {
    const std::string k = d.name;
    if (k == "output_dir") continue;
    s += k + "=" + d.get(*this) + "\n";
  }
  return fnv1a(std::as_bytes(std::span(s.data(), s.size())));
}

std::vector<int> RunConfig::resolved_layers() const {
  if (layers == "last_mid") return model_config.last_mid_layers();
  std::vector<int> out;
  for (const auto& t : split_list(layers)) out.push_back(parse_number<int>("layers", t));
  return out;
}

std::vector<TaskKind> RunConfig::resolved_cross_tasks() const {
  if (!cross_tasks.empty()) return cross_tasks;
  std::vector<TaskKind> out;
  for (TaskKind k : all_task_kinds())
    if (k != task) out.push_back(k);
  return out;
}

void RunConfig::validate() const {
  try {
    model_config.validate();
    sampling.validate();
    train.validate();
    RankMode::parse(rank_mode);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (model_config.vocab_size != Tokenizer::vocab_size())
    throw ConfigError("vocab_size must equal the tokenizer alphabet size");
  if (n_train == 0 || n_calibration == 0 || n_eval == 0)
    throw ConfigError("n_train, n_calibration and n_eval must be positive");
  const auto ls = resolved_layers();
  if (ls.empty()) throw ConfigError("layers: empty layer set");
  for (int l : ls)
    if (l < 1 || l > model_config.n_layers)
      throw ConfigError("layers: " + std::to_string(l) + " outside [1, n_layers]");
  if (!(ssd_fraction > 0.0 && ssd_fraction <= 1.0))
    throw ConfigError("ssd_fraction must lie in (0, 1]");
  if (pretrain_tasks.empty()) throw ConfigError("pretrain_tasks: empty");
  if (pretrain.max_steps < 1 || pretrain.eval_every < 1 || pretrain.batch_size < 1 ||
      !(pretrain.lr > 0.0))
    throw ConfigError("pretraining recipe: steps, eval interval, batch and lr must be positive");
  if (!(pretrain.band_lo <= pretrain.band_hi))
    throw ConfigError("band_lo must not exceed band_hi");
}

std::string resolve_output_dir(const std::string& dir) {
  const char* root = std::getenv(kOutputRootEnv);
  if (!root || !*root || fs::path(dir).is_absolute()) return dir;
  return (fs::path(root) / dir).string();
}

// ---- manifest ------------------------------------------------------------------

PhaseRecord* RunManifest::find(const std::string& phase) {
  for (auto& p : phases)
    if (p.name == phase) return &p;
  return nullptr;
}

const PhaseRecord* RunManifest::find(const std::string& phase) const {
  return const_cast<RunManifest*>(this)->find(phase);
}

bool RunManifest::complete() const {
  for (const auto& p : phases)
    if (!p.done) return false;
  return true;
}

std::string RunManifest::artifact(const std::string& phase, const std::string& name) const {
  const PhaseRecord* p = find(phase);
  if (!p) throw Error("manifest has no phase '" + phase + "'");
  auto it = p->artifacts.find(name);
  if (it == p->artifacts.end()) throw Error("phase '" + phase + "' has no artifact '" + name + "'");
  const fs::path rel(it->second.path);
  return rel.is_absolute() ? rel.string() : (fs::path(run_dir) / rel).string();
}

void RunManifest::save(const std::string& path) const {
  nlohmann::ordered_json j;
  j["run_kind"] = run_kind;
  j["config_hash"] = config_hash;
  auto& ph = j["phases"] = nlohmann::ordered_json::array();
  for (const auto& p : phases) {
    nlohmann::ordered_json pj;
    pj["name"] = p.name;
    pj["done"] = p.done;
    pj["wall_seconds"] = p.wall_seconds;
    auto& aj = pj["artifacts"] = nlohmann::ordered_json::object();
    for (const auto& [k, a] : p.artifacts) aj[k] = {{"path", a.path}, {"checksum", hex64(a.checksum)}};
    ph.push_back(pj);
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw Error("cannot write manifest " + path);
    os << j.dump(2) << "\n";
  }
  fs::rename(tmp, path);
}

RunManifest RunManifest::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read manifest " + path);
  const auto j = nlohmann::json::parse(is);
  RunManifest m;
  m.run_kind = j.at("run_kind").get<std::string>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.run_dir = fs::path(path).parent_path().string();
  for (const auto& pj : j.at("phases")) {
    PhaseRecord p;
    p.name = pj.at("name").get<std::string>();
    p.done = pj.at("done").get<bool>();
    p.wall_seconds = pj.at("wall_seconds").get<double>();
    for (const auto& [k, a] : pj.at("artifacts").items())
      p.artifacts[k] = {a.at("path").get<std::string>(),
                        std::stoull(a.at("checksum").get<std::string>(), nullptr, 16)};
    m.phases.push_back(std::move(p));
  }
  return m;
}

namespace {

bool verify_phase(const RunManifest& m, const PhaseRecord& p, std::string* problem) {
  for (const auto& [name, a] : p.artifacts) {
    const std::string path = m.artifact(p.name, name);
    if (!fs::exists(path)) {
      if (problem) *problem = "missing artifact " + path;
      return false;
    }
    if (file_checksum(path) != a.checksum) {
      if (problem) *problem = "checksum mismatch for " + path;
      return false;
    }
  }
  return true;
}

}  // namespace

bool RunManifest::verify(std::string* problem) const {
  for (const auto& p : phases)
    if (p.done && !verify_phase(*this, p, problem)) return false;
  return true;
}

// ---- pipeline ------------------------------------------------------------------

std::string to_string(RunKind k) {
  switch (k) {
    case RunKind::Spd: return "spd";
    case RunKind::Base: return "base";
    case RunKind::Psr: return "psr";
    case RunKind::SsdApprox: return "ssd_approx";
  }
  return "?";
}

RunKind parse_run_kind(const std::string& s) {
  if (s == "spd") return RunKind::Spd;
  if (s == "base") return RunKind::Base;
  if (s == "psr") return RunKind::Psr;
  if (s == "ssd_approx" || s == "ssd") return RunKind::SsdApprox;
  throw ConfigError("unknown run kind '" + s + "' (expected spd | base | psr | ssd_approx)");
}

std::vector<std::string> phases_for(RunKind k) {
  switch (k) {
    case RunKind::Spd:
      return {"pretrain", "data", "calibrate", "extract", "generate", "finetune", "evaluate"};
    case RunKind::Base: return {"pretrain", "data", "evaluate"};
    case RunKind::Psr:
    case RunKind::SsdApprox: return {"pretrain", "data", "generate", "finetune", "evaluate"};
  }
  return {};
}

namespace {

using Artifacts = std::map<std::string, ArtifactRecord>;

struct Ctx {
  const RunConfig& cfg;
  RunKind kind;
  fs::path dir;
  RunManifest& manifest;
  bool verbose;

  std::string path(const std::string& rel) const { return (dir / rel).string(); }
  ArtifactRecord record(const std::string& rel) const { return {rel, file_checksum(path(rel))}; }
  void say(const std::string& s) const {
    if (verbose) std::cerr << "[" << to_string(kind) << "] " << s << "\n";
  }
  ModelState base_model() const { return load_checkpoint(manifest.artifact("pretrain", "checkpoint")); }
  std::vector<Example> dataset(const std::string& name) const {
    std::vector<Example> out;
    for (auto& r : read_dataset(manifest.artifact("data", name))) out.push_back(std::move(r.example));
    return out;
  }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  os << text;
}

std::string grad_name(int layer, KvKind kind) {
  return "grad_L" + std::to_string(layer) + "_" + to_string(kind);
}

Artifacts phase_pretrain(Ctx& c) {
  Artifacts a;
  if (!c.cfg.base_checkpoint.empty()) {
    const std::string p = fs::absolute(c.cfg.base_checkpoint).string();
    const ModelState m = load_checkpoint(p);
    if (!(m.config == c.cfg.model_config))
      throw ConfigError("base checkpoint does not match the configured model shape");
    a["checkpoint"] = {p, file_checksum(p)};
    return a;
  }
  std::vector<Example> pool;
  for (TaskKind k : c.cfg.pretrain_tasks) {
    auto v = make_split(k, Split::Pretrain, c.cfg.data_seed, c.cfg.pretrain_pool);
    pool.insert(pool.end(), v.begin(), v.end());
  }
  // held-out train-split examples after the corpus prompts
  auto band = make_split(c.cfg.task, Split::Train, c.cfg.data_seed, c.cfg.n_train + c.cfg.n_eval);
  band.erase(band.begin(), band.begin() + static_cast<std::ptrdiff_t>(c.cfg.n_train));
  const PretrainResult r = pretrain(c.cfg.model_config, c.cfg.pretrain, pool, band);
  save_checkpoint(c.path("base.ckpt"), r.model);
  std::ostringstream log;
  log << "step,loss,accuracy\n";
  for (const auto& e : r.log) log << e.step << ',' << fmt_double(e.loss) << ',' << fmt_double(e.accuracy) << '\n';
  write_text(c.path("pretrain_log.csv"), log.str());
  std::ostringstream sum;
  sum << "steps = " << r.steps << "\naccuracy = " << fmt_double(r.accuracy)
      << "\nin_band = " << (r.in_band ? "true" : "false") << "\n";
  write_text(c.path("pretrain.txt"), sum.str());
  c.say("pretrained " + std::to_string(r.steps) + " steps, in-task accuracy " +
        fmt_double(r.accuracy) + (r.in_band ? " (in band)" : " (outside band)"));
  a["checkpoint"] = c.record("base.ckpt");
  a["log"] = c.record("pretrain_log.csv");
  a["summary"] = c.record("pretrain.txt");
  return a;
}

Artifacts phase_data(Ctx& c) {
  Artifacts a;
  const auto& cfg = c.cfg;
  write_dataset(c.path("train.jsonl"), make_split(cfg.task, Split::Train, cfg.data_seed, cfg.n_train));
  a["train"] = c.record("train.jsonl");
  if (c.kind == RunKind::Spd) {
    write_dataset(c.path("calibration.jsonl"),
                  make_split(cfg.task, Split::Calibration, cfg.data_seed, cfg.n_calibration));
    a["calibration"] = c.record("calibration.jsonl");
  }
  std::vector<TaskKind> evals{cfg.task};
  for (TaskKind k : cfg.resolved_cross_tasks()) evals.push_back(k);
  for (TaskKind k : evals) {
    const std::string name = "eval_" + to_string(k);
    write_dataset(c.path(name + ".jsonl"), make_split(k, Split::Eval, cfg.data_seed, cfg.n_eval));
    a[name] = c.record(name + ".jsonl");
  }
  return a;
}

Artifacts phase_calibrate(Ctx& c) {
  const ModelState model = c.base_model();
  HarvestOptions ho;
  ho.layers = c.cfg.resolved_layers();
  ho.mode = c.cfg.calibration_source;
  HarvestLog log;
  const HarvestResult h = harvest(model, c.dataset("calibration"), ho, &log);
  Artifacts a;
  std::ostringstream text;
  text << "examples_used = " << log.examples_used << "\nexamples_rejected = " << log.examples_rejected
       << "\n";
  for (const auto& [key, g] : h) {
    const std::string name = grad_name(key.first, key.second);
    write_gradient_dump(c.path(name + ".bin"), g);
    a[name] = c.record(name + ".bin");
    text << name << ": rows = " << g.rows.rows() << " of " << g.total_rows << " (dropped "
         << g.dropped_rows << ")\n";
  }
  for (const auto& l : log.lines) text << l << "\n";
  write_text(c.path("harvest_log.txt"), text.str());
  a["log"] = c.record("harvest_log.txt");
  c.say("harvested gradients from " + std::to_string(log.examples_used) + " calibration examples");
  return a;
}

Artifacts phase_extract(Ctx& c) {
  const ModelState model = c.base_model();
  HarvestResult h;
  for (int layer : c.cfg.resolved_layers())
    for (KvKind kind : {KvKind::K, KvKind::V}) {
      GradientMatrix g = read_gradient_dump(c.manifest.artifact("calibrate", grad_name(layer, kind)));
      h[{layer, kind}] = std::move(g);
    }
  BundleMeta meta;
  meta.model_checksum = model.base_checksum();
  meta.config = model.config;
  meta.calibration_seed = c.cfg.data_seed;
  meta.loss_mode = c.cfg.calibration_source;
  meta.created_unix = c.cfg.timestamp ? c.cfg.timestamp : static_cast<std::int64_t>(std::time(nullptr));
  const ProjectionBundle b =
      extract_all(h, c.cfg.resolved_layers(), RankMode::parse(c.cfg.rank_mode), meta);
  save_bundle(c.path("bundle.bin"), b);
  write_text(c.path("bundle_diagnostics.txt"), diagnostics_text(b));
  Artifacts a;
  a["bundle"] = c.record("bundle.bin");
  a["diagnostics"] = c.record("bundle_diagnostics.txt");
  return a;
}

Artifacts phase_generate(Ctx& c) {
  const ModelState model = c.base_model();
  std::optional<ProjectionBundle> bundle;
  if (c.kind == RunKind::Spd) bundle = load_bundle(c.manifest.artifact("extract", "bundle"), &model);
  Projection proj;
  proj.bundle = bundle ? &*bundle : nullptr;
  proj.mode = c.cfg.project_mode;
  SamplingConfig sc = c.cfg.sampling;
  sc.seed = c.cfg.seed;
  if (sc.stop_tokens.empty()) sc.stop_tokens = {Tokenizer::eos()};
  auto corpus = generate_corpus(model, c.dataset("train"), proj, sc);
  if (c.kind == RunKind::SsdApprox) {
    TruncationPolicy tp;
    tp.fraction = c.cfg.ssd_fraction;
    tp.max_new_tokens = sc.max_new_tokens;
    corpus = truncate_ssd(corpus, tp);
  }
  write_corpus(c.path("corpus.jsonl"), corpus, sc);
  Artifacts a;
  a["corpus"] = c.record("corpus.jsonl");
  c.say("generated " + std::to_string(corpus.size()) + " completions");
  return a;
}

Artifacts phase_finetune(Ctx& c) {
  const ModelState model = c.base_model();
  const auto corpus = read_corpus(c.manifest.artifact("generate", "corpus"));
  const SftResult r = sft(model, corpus, c.cfg.train);
  save_adapters(c.path("adapters.bin"), r.model);
  write_loss_curve(c.path("loss_curve.csv"), r.steps);
  Artifacts a;
  a["adapters"] = c.record("adapters.bin");
  a["loss_curve"] = c.record("loss_curve.csv");
  c.say("fine-tuned " + std::to_string(r.steps.size()) + " steps, final epoch loss " +
        fmt_double(r.epoch_loss.back()));
  return a;
}

Artifacts phase_evaluate(Ctx& c) {
  ModelState model = c.base_model();
  if (c.manifest.find("finetune")) load_adapters(c.manifest.artifact("finetune", "adapters"), model);
  const auto& cfg = c.cfg;
  std::vector<std::pair<TaskKind, std::string>> evals{{cfg.task, "in_task"}};
  for (TaskKind k : cfg.resolved_cross_tasks()) evals.emplace_back(k, "cross_task");
  Artifacts a;
  std::ostringstream csv, txt;
  csv << "run_kind,task,split,n,accuracy,nll\n";
  txt << "run: " << to_string(c.kind) << "   model: " << cfg.model << "   seed: " << cfg.seed
      << "   rank_mode: " << cfg.rank_mode << "   layers: " << cfg.layers
      << "   project_mode: " << to_string(cfg.project_mode) << "\n";
  if (c.kind == RunKind::SsdApprox)
    txt << "note: ssd_approx uses an approximate truncation rule (fraction " << fmt_double(cfg.ssd_fraction)
        << " of max_new_tokens)\n";
  txt << std::left << std::setw(10) << "task" << std::setw(12) << "split" << std::setw(6) << "n"
      << std::setw(10) << "accuracy" << "nll\n";
  for (const auto& [k, split] : evals) {
    const auto ex = c.dataset("eval_" + to_string(k));
    const AccuracyReport acc = eval_accuracy(model, ex, cfg.sampling.max_new_tokens);
    const double nll = eval_nll(model, ex);
    const std::string vname = "verdicts_" + to_string(k);
    write_verdicts(c.path(vname + ".jsonl"), acc);
    a[vname] = c.record(vname + ".jsonl");
    csv << to_string(c.kind) << ',' << to_string(k) << ',' << split << ',' << acc.total << ','
        << fmt_double(acc.accuracy) << ',' << fmt_double(nll) << '\n';
    std::ostringstream accs, nlls;
    accs << std::fixed << std::setprecision(3) << acc.accuracy;
    nlls << std::fixed << std::setprecision(4) << nll;
    txt << std::setw(10) << to_string(k) << std::setw(12) << split << std::setw(6) << acc.total
        << std::setw(10) << accs.str() << nlls.str() << "\n";
    c.say(to_string(k) + " accuracy " + accs.str() + " nll " + nlls.str());
  }
  write_text(c.path("report.csv"), csv.str());
  write_text(c.path("summary.txt"), txt.str());
  a["report"] = c.record("report.csv");
  a["summary"] = c.record("summary.txt");
  return a;
}

Artifacts run_phase(const std::string& name, Ctx& c) {
  if (name == "pretrain") return phase_pretrain(c);
  if (name == "data") return phase_data(c);
  if (name == "calibrate") return phase_calibrate(c);
  if (name == "extract") return phase_extract(c);
  if (name == "generate") return phase_generate(c);
  if (name == "finetune") return phase_finetune(c);
  if (name == "evaluate") return phase_evaluate(c);
  throw Error("unknown phase " + name);
}

}  // namespace

RunResult run_pipeline(const RunConfig& cfg, RunKind kind, const PipelineOptions& opts) {
  cfg.validate();
  const auto phases = phases_for(kind);
  if (!opts.stop_after.empty() &&
      std::find(phases.begin(), phases.end(), opts.stop_after) == phases.end())
    throw ConfigError("run kind " + to_string(kind) + " has no phase '" + opts.stop_after + "'");

  const fs::path dir = resolve_output_dir(cfg.output_dir);
  fs::create_directories(dir);
  const std::string mpath = (dir / "manifest.json").string();
  const std::string chash = hex64(cfg.hash());

  RunResult res;
  RunManifest& m = res.manifest;
  bool fresh = true;
  if (fs::exists(mpath)) {
    try {
      m = RunManifest::load(mpath);
      fresh = !(m.config_hash == chash && m.run_kind == to_string(kind));
    } catch (const std::exception&) {
      fresh = true;
    }
  }
  if (fresh) {
    m = RunManifest{};
    m.run_kind = to_string(kind);
    m.config_hash = chash;
    for (const auto& p : phases) m.phases.push_back({p, false, 0.0, {}});
  }
  m.run_dir = dir.string();
  write_text((dir / "config.txt").string(), cfg.dump());

  Ctx ctx{cfg, kind, dir, m, opts.verbose};
  bool invalid = false;
  for (const auto& name : phases) {
    PhaseRecord* rec = m.find(name);
    if (!invalid && rec->done && verify_phase(m, *rec, nullptr)) {
      res.skipped.push_back(name);
    } else {
      invalid = true;
      rec->done = false;
      rec->artifacts.clear();
      m.save(mpath);
      const auto t0 = std::chrono::steady_clock::now();
      try {
        rec->artifacts = run_phase(name, ctx);
      } catch (const PhaseError&) {
        m.save(mpath);
        throw;
      } catch (const std::exception& e) {
        m.save(mpath);
        throw PhaseError(name, e.what());
      }
      rec->wall_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      rec->done = true;
      m.save(mpath);
      res.ran.push_back(name);
    }
    if (name == opts.stop_after) break;
  }
  return res;
}

RunResult run_spd(const RunConfig& cfg, const PipelineOptions& opts) {
  return run_pipeline(cfg, RunKind::Spd, opts);
}

RunResult run_baseline(const RunConfig& cfg, RunKind which, const PipelineOptions& opts) {
  if (which == RunKind::Spd) throw ConfigError("run_baseline: spd is not a baseline");
  return run_pipeline(cfg, which, opts);
}

// ---- reports and ablations ---------------------------------------------------------

std::vector<EvalRow> read_report(const std::string& run_dir) {
  std::ifstream is((fs::path(run_dir) / "report.csv").string());
  if (!is) throw Error("no report.csv in " + run_dir);
  std::vector<EvalRow> rows;
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw Error("malformed report row: " + line);
    EvalRow r;
    r.task = f[1];
    r.split = f[2];
    r.n = std::stoull(f[3]);
    r.accuracy = std::stod(f[4]);
    r.nll = std::stod(f[5]);
    rows.push_back(r);
  }
  return rows;
}

double in_task_accuracy(const std::vector<EvalRow>& rows) {
  for (const auto& r : rows)
    if (r.split == "in_task") return r.accuracy;
  throw Error("report has no in-task row");
}

std::string to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::LossMode: return "loss_mode";
    case AblationAxis::CalibSize: return "calib_size";
    case AblationAxis::Rank: return "rank";
    case AblationAxis::ProjectMode: return "project_mode";
  }
  return "?";
}

AblationAxis parse_ablation_axis(const std::string& s) {
  if (s == "loss_mode") return AblationAxis::LossMode;
  if (s == "calib_size") return AblationAxis::CalibSize;
  if (s == "rank") return AblationAxis::Rank;
  if (s == "project_mode") return AblationAxis::ProjectMode;
  throw ConfigError("unknown ablation axis '" + s + "'");
}

std::vector<std::string> default_axis_values(AblationAxis a) {
  switch (a) {
    case AblationAxis::LossMode: return {"aligned", "full_sequence"};
    case AblationAxis::CalibSize: return {"20", "50", "100", "200", "500"};
    case AblationAxis::Rank: return {"fixed:4", "fixed:16", "half_full", "fixed:48", "fixed:64"};
    case AblationAxis::ProjectMode: return {"K", "V", "both"};
  }
  return {};
}

std::string axis_key(AblationAxis a) {
  switch (a) {
    case AblationAxis::LossMode: return "calibration_source";
    case AblationAxis::CalibSize: return "n_calibration";
    case AblationAxis::Rank: return "rank_mode";
    case AblationAxis::ProjectMode: return "project_mode";
  }
  return "";
}

AblationRow ablation_row(const std::string& value, const std::string& run_dir) {
  AblationRow row;
  row.value = value;
  row.run_dir = run_dir;
  const auto rows = read_report(run_dir);
  double cross = 0.0;
  int n_cross = 0;
  for (const auto& r : rows) {
    if (r.split == "in_task") {
      row.in_task_accuracy = r.accuracy;
      row.in_task_nll = r.nll;
    } else {
      cross += r.accuracy;
      ++n_cross;
    }
  }
  row.cross_task_accuracy = n_cross ? cross / n_cross : 0.0;
  const RunManifest m = RunManifest::load((fs::path(run_dir) / "manifest.json").string());
  row.bundle_checksum = hex64(load_bundle(m.artifact("extract", "bundle")).checksum());
  row.corpus_checksum = hex64(file_checksum(m.artifact("generate", "corpus")));
  return row;
}

std::string ablation_csv(AblationAxis axis, const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << to_string(axis) << ",in_task_accuracy,in_task_nll,cross_task_accuracy,bundle_checksum,corpus_checksum\n";
  for (const auto& r : rows)
    os << r.value << ',' << fmt_double(r.in_task_accuracy) << ',' << fmt_double(r.in_task_nll) << ','
       << fmt_double(r.cross_task_accuracy) << ',' << r.bundle_checksum << ',' << r.corpus_checksum
       << '\n';
  return os.str();
}

std::vector<AblationRow> run_ablation(const RunConfig& cfg, AblationAxis axis,
                                      const std::vector<std::string>& values,
                                      const PipelineOptions& opts) {
  if (values.empty()) throw ConfigError("ablation: empty value list");
  cfg.validate();
  const fs::path root = resolve_output_dir(cfg.output_dir);
  fs::create_directories(root);

  std::string base = cfg.base_checkpoint;
  if (base.empty()) {
    RunConfig bc = cfg;
    bc.output_dir = (root / "base").string();
    const RunResult r = run_pipeline(bc, RunKind::Base, {"pretrain", opts.verbose});
    base = r.manifest.artifact("pretrain", "checkpoint");
  }

  std::vector<AblationRow> rows;
  for (const auto& v : values) {
    RunConfig c = cfg;
    c.set(axis_key(axis), v);
    c.base_checkpoint = base;
    std::string tag = v;
    std::replace(tag.begin(), tag.end(), ':', '-');
    c.output_dir = (root / (to_string(axis) + "_" + tag)).string();
    c.validate();
    run_spd(c, {"", opts.verbose});
    rows.push_back(ablation_row(v, c.output_dir));
  }
  write_text((root / ("sweep_" + to_string(axis) + ".csv")).string(), ablation_csv(axis, rows));
  return rows;
}

}  // namespace spd
