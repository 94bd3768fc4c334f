#include "slpmt/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "json_util.hpp"

namespace slpmt {
namespace {

using detail::json;
namespace fs = std::filesystem;

LanguageSpec language(std::string id, Tier tier, std::size_t size, std::size_t offset, std::uint64_t table_seed,
                      bool reverse) {
  LanguageSpec l;
  l.id = std::move(id);
  l.tier = tier;
  l.corpus_size = size;
  l.range_offset = offset;
  l.table_seed = table_seed;
  l.transduction.reverse = reverse;
  return l;
}

json train_to_json(const TrainConfig& t) {
  return {{"learning_rate", t.learning_rate},
          {"warmup_steps", t.warmup_steps},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"adam_epsilon", t.adam_epsilon},
          {"label_smoothing", t.label_smoothing},
          {"batch_tokens", t.batch_tokens},
          {"stage1_epochs", t.stage1_epochs},
          {"stage2_epochs", t.stage2_epochs},
          {"alternation_probability", t.alternation_probability},
          {"disparity", t.disparity},
          {"disparity_weight", t.disparity_weight},
          {"disparity_in_stage2", t.disparity_in_stage2},
          {"checkpoint_average", t.checkpoint_average},
          {"seed", t.seed}};
}

TrainConfig train_from_json(const json& j) {
  detail::StrictObject o(j, "train");
  TrainConfig t;
  t.learning_rate = o.get_or("learning_rate", t.learning_rate);
  t.warmup_steps = o.get_or("warmup_steps", t.warmup_steps);
  t.beta1 = o.get_or("beta1", t.beta1);
  t.beta2 = o.get_or("beta2", t.beta2);
  t.adam_epsilon = o.get_or("adam_epsilon", t.adam_epsilon);
  t.label_smoothing = o.get_or("label_smoothing", t.label_smoothing);
  t.batch_tokens = o.get_or("batch_tokens", t.batch_tokens);
  t.stage1_epochs = o.get_or("stage1_epochs", t.stage1_epochs);
  t.stage2_epochs = o.get_or("stage2_epochs", t.stage2_epochs);
  t.alternation_probability = o.get_or("alternation_probability", t.alternation_probability);
  t.disparity = o.get_or("disparity", t.disparity);
  t.disparity_weight = o.get_or("disparity_weight", t.disparity_weight);
  t.disparity_in_stage2 = o.get_or("disparity_in_stage2", t.disparity_in_stage2);
  t.checkpoint_average = o.get_or("checkpoint_average", t.checkpoint_average);
  t.seed = o.get_or("seed", t.seed);
  o.finish();
  t.validate();
  return t;
}

json model_to_json(const ModelShape& m) {
  return {{"embed_dim", m.embed_dim},           {"slp_hidden_dim", m.slp_hidden_dim},
          {"pool_size", m.pool_size},           {"encoder_layers", m.encoder_layers},
          {"decoder_layers", m.decoder_layers}, {"heads", m.heads},
          {"ffn_dim", m.ffn_dim},               {"max_sequence_length", m.max_sequence_length},
          {"dropout", m.dropout}};
}

ModelShape model_from_json(const json& j) {
  detail::StrictObject o(j, "model");
  ModelShape m;
  m.embed_dim = o.get_or("embed_dim", m.embed_dim);
  m.slp_hidden_dim = o.get_or("slp_hidden_dim", m.slp_hidden_dim);
  m.pool_size = o.get_or("pool_size", m.pool_size);
  m.encoder_layers = o.get_or("encoder_layers", m.encoder_layers);
  m.decoder_layers = o.get_or("decoder_layers", m.decoder_layers);
  m.heads = o.get_or("heads", m.heads);
  m.ffn_dim = o.get_or("ffn_dim", m.ffn_dim);
  m.max_sequence_length = o.get_or("max_sequence_length", m.max_sequence_length);
  m.dropout = o.get_or("dropout", m.dropout);
  o.finish();
  return m;
}

std::uint64_t epoch_stream(Stage stage, std::size_t epoch) {
  const std::uint64_t base = stage == Stage::one ? 1000 : stage == Stage::two ? 2000 : 3000;
  return base * 1000 + epoch;
}

std::string epoch_file(Stage stage, std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "-epoch-%03zu.ckpt", epoch);
  return std::string(stage == Stage::baseline ? "baseline" : std::string("stage") + stage_name(stage)) + buf;
}

}  // namespace

SuiteConfig default_suite_config() {
  SuiteConfig c;
  c.languages = {
      language("fr", Tier::high, 20000, 0, 11, false),  language("de", Tier::high, 20000, 8, 12, true),
      language("zh", Tier::high, 20000, 18, 13, false), language("ja", Tier::high, 20000, 34, 14, true),
      language("ro", Tier::low, 500, 0, 11, true),      language("gu", Tier::low, 500, 26, 15, false),
  };
  return c;
}

ExperimentConfig default_experiment_config() {
  ExperimentConfig c;
  c.data = default_suite_config();
  return c;
}

std::string experiment_config_to_json(const ExperimentConfig& c) {
  json j;
  j["paths"] = {{"data", c.data_dir}, {"output", c.output_dir}};
  j["data"] = json::parse(suite_config_to_json(c.data));
  j["model"] = model_to_json(c.model);
  j["train"] = train_to_json(c.train);
  j["sampling"] = {{"initial_temperature", c.sampling.initial_temperature},
                   {"peak_temperature", c.sampling.peak_temperature},
                   {"warmup_epochs", c.sampling.warmup_epochs}};
  j["eval"] = {{"beam", c.beam}, {"length_penalty", c.length_penalty}};
  return j.dump(2);
}

ExperimentConfig experiment_config_from_json(std::string_view text) {
  const json j = detail::parse_json(text, "experiment config");
  detail::StrictObject o(j, "experiment config");
  ExperimentConfig c = default_experiment_config();
  if (o.has("paths")) {
    detail::StrictObject p(o.at("paths"), "paths");
    c.data_dir = p.get_or<std::string>("data", "");
    c.output_dir = p.get_or<std::string>("output", "");
    p.finish();
  }
  if (o.has("data")) c.data = suite_config_from_json(o.at("data").dump());
  if (o.has("model")) c.model = model_from_json(o.at("model"));
  if (o.has("train")) c.train = train_from_json(o.at("train"));
  if (o.has("sampling")) {
    detail::StrictObject s(o.at("sampling"), "sampling");
    c.sampling.initial_temperature = s.get_or("initial_temperature", c.sampling.initial_temperature);
    c.sampling.peak_temperature = s.get_or("peak_temperature", c.sampling.peak_temperature);
    c.sampling.warmup_epochs = s.get_or("warmup_epochs", c.sampling.warmup_epochs);
    s.finish();
    c.sampling.validate();
  }
  if (o.has("eval")) {
    detail::StrictObject e(o.at("eval"), "eval");
    c.beam = e.get_or("beam", c.beam);
    c.length_penalty = e.get_or("length_penalty", c.length_penalty);
    e.finish();
    if (c.beam < 1) throw std::invalid_argument("eval.beam must be at least 1");
  }
  o.finish();
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open config " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  ExperimentConfig c = experiment_config_from_json(ss.str());
  const fs::path base = file.parent_path();
  for (std::string* p : {&c.data_dir, &c.output_dir})
    if (!p->empty() && fs::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  return c;
}

ModelConfig model_config_for(const ModelShape& s, const SyntheticSuite& suite, Stage stage) {
  ModelConfig m;
  m.embed_dim = s.embed_dim;
  m.slp_hidden_dim = s.slp_hidden_dim;
  m.pool_size = s.pool_size;
  m.encoder_layers = s.encoder_layers;
  m.decoder_layers = s.decoder_layers;
  m.heads = s.heads;
  m.ffn_dim = s.ffn_dim;
  m.max_sequence_length = s.max_sequence_length;
  m.dropout = s.dropout;
  m.vocab_size = suite.vocab.size();
  m.language_specific = stage != Stage::baseline;
  for (const auto& l : suite.config.languages) m.languages.push_back({l.id, l.tier});
  m.validate();
  return m;
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string file_hash(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return fnv1a_hex(ss.str());
}

void write_manifest(const fs::path& dir, const std::string& command, const std::string& config_text,
                    std::uint64_t seed, const std::map<std::string, fs::path>& inputs) {
  json j;
  j["command"] = command;
  j["config_hash"] = fnv1a_hex(config_text);
  j["seed"] = seed;
  j["tool_version"] = kToolVersion;
  j["inputs"] = json::object();
  for (const auto& [name, path] : inputs) j["inputs"][name] = file_hash(path);
  fs::create_directories(dir);
  std::ofstream(dir / "manifest.json", std::ios::binary) << j.dump(2) << '\n';
}

TrainingRun run_training(const ExperimentConfig& cfg, const SyntheticSuite& suite, Stage stage,
                         const std::optional<Checkpoint>& resume, const fs::path& out_dir, const TrainingHooks& hooks) {
  cfg.train.validate();
  cfg.sampling.validate();
  const ModelConfig mc = model_config_for(cfg.model, suite, stage);

  std::vector<const ParallelCorpus*> corpora;
  for (const auto& c : suite.train)
    if (stage != Stage::one || c.tier == Tier::high) corpora.push_back(&c);
  const BatchSampler sampler(corpora, cfg.train.batch_tokens);
  const std::size_t steps = sampler.steps_per_epoch();
  const std::size_t epochs = stage == Stage::one   ? cfg.train.stage1_epochs
                             : stage == Stage::two ? cfg.train.stage2_epochs
                                                   : cfg.train.stage1_epochs + cfg.train.stage2_epochs;
  // Temperature epochs continue across stages.
  const std::size_t epoch_offset = stage == Stage::two ? cfg.train.stage1_epochs : 0;
  const std::string tag = stage_name(stage);

  Optimizer opt(cfg.train);
  std::optional<ModelParams> params;
  std::size_t start = 0;
  if (stage == Stage::two && !resume)
    throw std::invalid_argument("stage 2 needs --resume pointing at a stage-1 checkpoint");
  if (resume) {
    const bool fresh_stage2 = stage == Stage::two && resume->stage == "1";
    if (!fresh_stage2 && resume->stage != tag)
      throw std::invalid_argument("cannot resume stage " + tag + " from a stage " + resume->stage + " checkpoint");
    if (resume->config != mc)
      throw std::invalid_argument("checkpoint model config does not match the experiment config");
    params = resume->to_params();
    if (fresh_stage2) {
      Rng init = Rng::derive(cfg.train.seed, 2);
      params->universal = init_bottleneck(mc.embed_dim, mc.slp_hidden_dim, init);
    } else {
      resume->restore_optimizer(opt);
      if (resume->step % steps != 0) throw std::invalid_argument("checkpoint is not at an epoch boundary");
      start = static_cast<std::size_t>(resume->step / steps);
    }
  } else {
    Rng init = Rng::derive(cfg.train.seed, 1);
    params = ModelParams::initialize(mc, init);
  }

  if (start >= epochs) throw std::invalid_argument("checkpoint already completes stage " + tag);

  // The averaged checkpoints are spread evenly over the last epoch, the final
  // one at its end.
  const std::size_t n = std::min(std::max<std::size_t>(1, cfg.train.checkpoint_average), steps);
  std::vector<std::size_t> snapshot_at;
  for (std::size_t j = 1; j <= n; ++j) snapshot_at.push_back((j * steps + n - 1) / n);
  std::vector<Checkpoint> snapshots;

  const fs::path ckdir = out_dir / "checkpoints";
  fs::create_directories(ckdir);
  for (std::size_t e = start; e < epochs; ++e) {
    const double tau = temperature_at_epoch(cfg.sampling, epoch_offset + e);
    const std::vector<double> weights = direction_sampling_weights(sampler.sizes(), tau);
    Rng rng = Rng::derive(cfg.train.seed, epoch_stream(stage, e));
    const bool last_epoch = e + 1 == epochs;
    for (std::size_t s = 0; s < steps; ++s) {
      const Batch batch = sampler.sample(weights, rng);
      const StepReport r = train_step(stage, *params, opt, batch, cfg.train, rng);
      if (hooks.log) *hooks.log << step_report_json(r, mc) << '\n';
      if (last_epoch && s + 1 < steps && std::find(snapshot_at.begin(), snapshot_at.end(), s + 1) != snapshot_at.end())
        snapshots.push_back(Checkpoint::capture(*params, nullptr, opt.steps(), tag));
    }
    Checkpoint epoch_end = Checkpoint::capture(*params, &opt, opt.steps(), tag);
    epoch_end.save(ckdir / epoch_file(stage, e + 1));
    if (last_epoch) snapshots.push_back(std::move(epoch_end));
    if (hooks.on_epoch) hooks.on_epoch(e + 1, *params);
  }

  TrainingRun run;
  run.epochs_trained = epochs;
  run.steps_per_epoch = steps;
  run.final_checkpoint = average_checkpoints(snapshots);
  run.final_checkpoint.save(out_dir / "final.ckpt");
  return run;
}

Batch probe_batch(const ParallelCorpus& corpus, std::size_t token_budget) {
  if (corpus.pairs.empty()) throw std::invalid_argument("probe batch: empty corpus " + corpus.target_language);
  std::vector<std::size_t> idx;
  std::size_t widest = 0;
  for (std::size_t i = 0; i < corpus.pairs.size(); ++i) {
    const auto& p = corpus.pairs[i];
    const std::size_t w = std::max({widest, p.source.size(), p.target.size()});
    if (!idx.empty() && (idx.size() + 1) * w > token_budget) break;
    idx.push_back(i);
    widest = w;
  }
  return make_batch(corpus, idx);
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

std::size_t thread_cap() {
  const char* v = std::getenv("SLP_MNMT_THREADS");
  if (!v || !*v) return 1;
  std::size_t n = 0;
  const std::string_view s(v);
  auto res = std::from_chars(s.data(), s.data() + s.size(), n);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size() || n == 0)
    throw std::invalid_argument("SLP_MNMT_THREADS must be a positive integer, got '" + std::string(s) + "'");
  return n;
}

}  // namespace slpmt
