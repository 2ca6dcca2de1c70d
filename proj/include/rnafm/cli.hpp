#pragma once

// Pipeline commands behind the `rnafm` executable: synth, train, sample, eval.
// Each command reads one RunConfig; outputs carry a provenance block and are
// byte-identical for identical inputs and seeds.

#include "rnafm/conditioning.hpp"
#include "rnafm/data_metrics.hpp"
#include "rnafm/flow_engine.hpp"
#include "rnafm/io.hpp"
#include "rnafm/pathway_graph.hpp"
#include "rnafm/velocity_network.hpp"

#include <json.hpp>

#include <atomic>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

namespace rnafm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kVersion = "0.1.0";

struct Paths {
  fs::path genes;       // one gene id per line
  fs::path gmt;
  fs::path expression;  // samples x genes TSV
  fs::path conditions;  // directory of <sample_id>.bin / .tsv condition files
  fs::path splits;      // {sample_id: fold}
  fs::path output = "out";
  fs::path checkpoint;  // defaults to <output>/checkpoint.bin
};

struct SynthSettings {
  SyntheticTaskConfig task;
  int samples = 500;
  int pathways = 6;
  int min_pathway_size = 5;
  int max_pathway_size = 12;
};

struct RunConfig {
  Paths paths;
  std::uint64_t seed = 0;
  PathwayFilter filter;
  NetworkConfig network;
  FlowConfig flow;
  InterpolantKind interpolant = InterpolantKind::Linear;
  double logistic_steepness = 10.0;
  ExpressionSpace expression_space = ExpressionSpace::Raw;
  int ensemble_n = 32;
  std::vector<std::size_t> top_k = default_top_k();
  int folds = 5;
  int test_fold = 0;
  int threads = 1;
  bool per_gene_report = false;
  SynthSettings synth;

  Interpolant make_interpolant() const { return Interpolant(interpolant, logistic_steepness); }
  fs::path checkpoint_path() const { return paths.checkpoint.empty() ? paths.output / "checkpoint.bin" : paths.checkpoint; }

  void validate() const {
    network.validate();
    flow.validate();
    (void)make_interpolant();
    if (ensemble_n < 1) throw ConfigError("ensemble_n must be >= 1");
    if (folds < 1) throw ConfigError("folds must be >= 1");
    if (test_fold < 0 || test_fold >= folds) throw ConfigError("test_fold must be in [0, folds)");
    if (threads < 1) throw ConfigError("threads must be >= 1");
    if (filter.min_size < 1 || filter.max_size < filter.min_size)
      throw ConfigError("pathway_filter: need 1 <= min_size <= max_size");
    if (synth.samples < 2 || synth.pathways < 1 || synth.min_pathway_size < 1 ||
        synth.max_pathway_size < synth.min_pathway_size)
      throw ConfigError("synth: invalid sample or pathway counts");
  }
};

inline ExpressionSpace parse_space(const std::string& s) {
  if (s == "raw") return ExpressionSpace::Raw;
  if (s == "log") return ExpressionSpace::Log;
  throw ConfigError("expression_space must be 'raw' or 'log', got '" + s + "'");
}

// Paths are written as given; everything else is the full effective setting.
inline json to_json(const RunConfig& c) {
  json j;
  j["paths"] = {{"genes", c.paths.genes.generic_string()},       {"gmt", c.paths.gmt.generic_string()},
                {"expression", c.paths.expression.generic_string()}, {"conditions", c.paths.conditions.generic_string()},
                {"splits", c.paths.splits.generic_string()},     {"output", c.paths.output.generic_string()},
                {"checkpoint", c.paths.checkpoint.generic_string()}};
  j["seed"] = c.seed;
  j["pathway_filter"] = {{"min_size", c.filter.min_size}, {"max_size", c.filter.max_size}};
  j["network"] = c.network;
  j["flow"] = c.flow;
  j["interpolant"] = {{"kind", to_string(c.interpolant)}, {"steepness", c.logistic_steepness}};
  j["expression_space"] = to_string(c.expression_space);
  j["ensemble_n"] = c.ensemble_n;
  j["top_k"] = c.top_k;
  j["folds"] = c.folds;
  j["test_fold"] = c.test_fold;
  j["threads"] = c.threads;
  j["per_gene_report"] = c.per_gene_report;
  const auto& t = c.synth.task;
  j["synth"] = {{"samples", c.synth.samples},
                {"pathways", c.synth.pathways},
                {"min_pathway_size", c.synth.min_pathway_size},
                {"max_pathway_size", c.synth.max_pathway_size},
                {"genes", t.genes},
                {"condition_dim", t.condition_dim},
                {"clusters", t.clusters},
                {"noise", t.noise},
                {"signal_scale", t.signal_scale},
                {"cluster_spread", t.cluster_spread}};
  return j;
}

// Relative paths are taken relative to `base` (the config file's directory).
inline RunConfig config_from_json(const json& j, const fs::path& base = {}) {
  static const std::set<std::string> known{"paths",   "seed",      "pathway_filter", "network",   "flow",
                                           "interpolant", "expression_space", "ensemble_n", "top_k", "folds",
                                           "test_fold", "threads", "per_gene_report", "synth"};
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("config: unknown field '" + key + "'");
  RunConfig c;
  try {
    auto path_of = [&](const json& p, const char* key, fs::path& dst) {
      if (!p.contains(key)) return;
      fs::path v = p.at(key).get<std::string>();
      dst = (v.empty() || v.is_absolute() || base.empty()) ? v : base / v;
    };
    if (j.contains("paths")) {
      const auto& p = j["paths"];
      path_of(p, "genes", c.paths.genes);
      path_of(p, "gmt", c.paths.gmt);
      path_of(p, "expression", c.paths.expression);
      path_of(p, "conditions", c.paths.conditions);
      path_of(p, "splits", c.paths.splits);
      path_of(p, "output", c.paths.output);
      path_of(p, "checkpoint", c.paths.checkpoint);
    }
    c.seed = j.value("seed", c.seed);
    if (j.contains("pathway_filter")) {
      c.filter.min_size = j["pathway_filter"].value("min_size", c.filter.min_size);
      c.filter.max_size = j["pathway_filter"].value("max_size", c.filter.max_size);
    }
    if (j.contains("network")) c.network = j["network"].get<NetworkConfig>();
    if (j.contains("flow")) c.flow = j["flow"].get<FlowConfig>();
    if (j.contains("interpolant")) {
      c.interpolant = parse_interpolant(j["interpolant"].value("kind", std::string("linear")));
      c.logistic_steepness = j["interpolant"].value("steepness", c.logistic_steepness);
    }
    if (j.contains("expression_space")) c.expression_space = parse_space(j["expression_space"].get<std::string>());
    c.ensemble_n = j.value("ensemble_n", c.ensemble_n);
    if (j.contains("top_k")) c.top_k = j["top_k"].get<std::vector<std::size_t>>();
    c.folds = j.value("folds", c.folds);
    c.test_fold = j.value("test_fold", c.test_fold);
    c.threads = j.value("threads", c.threads);
    c.per_gene_report = j.value("per_gene_report", c.per_gene_report);
    if (j.contains("synth")) {
      const auto& s = j["synth"];
      c.synth.samples = s.value("samples", c.synth.samples);
      c.synth.pathways = s.value("pathways", c.synth.pathways);
      c.synth.min_pathway_size = s.value("min_pathway_size", c.synth.min_pathway_size);
      c.synth.max_pathway_size = s.value("max_pathway_size", c.synth.max_pathway_size);
      auto& t = c.synth.task;
      t.genes = s.value("genes", t.genes);
      t.condition_dim = s.value("condition_dim", t.condition_dim);
      t.clusters = s.value("clusters", t.clusters);
      t.noise = s.value("noise", t.noise);
      t.signal_scale = s.value("signal_scale", t.signal_scale);
      t.cluster_spread = s.value("cluster_spread", t.cluster_spread);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.synth.task.seed = c.seed;
  return c;
}

inline RunConfig load_config(const fs::path& path) {
  return config_from_json(io::read_json(path), path.parent_path());
}

// Hash of the effective settings; paths and thread count do not affect outputs.
inline std::string config_hash(const RunConfig& c) {
  json j = to_json(c);
  j.erase("paths");
  j.erase("threads");
  Fnv1a h;
  h.update(j.dump());
  return h.hex();
}

inline json provenance(const RunConfig& c, const std::string& command) {
  return {{"command", command}, {"version", kVersion}, {"seed", c.seed}, {"config_hash", config_hash(c)}};
}

inline void require_file(const fs::path& p, const std::string& field) {
  if (p.empty()) throw ConfigError(field + " is not set");
  if (!fs::exists(p)) throw ConfigError(field + ": '" + p.string() + "' does not exist");
}

inline void log_line(const std::string& s) { std::cerr << s << '\n'; }

// ---------------------------------------------------------------------------
// Shared loading

struct PathwayContext {
  GeneVocabulary vocab;
  std::shared_ptr<const PathwayCollection> collection;
  std::string fingerprint;
};

inline PathwayContext load_pathways(const RunConfig& c) {
  require_file(c.paths.genes, "paths.genes");
  require_file(c.paths.gmt, "paths.gmt");
  PathwayContext ctx;
  ctx.vocab = load_vocabulary(c.paths.genes.string());
  auto gmt = load_gmt(c.paths.gmt.string(), ctx.vocab);
  ctx.collection = std::make_shared<const PathwayCollection>(filter_pathways(gmt.sets, c.filter, ctx.vocab));
  ctx.fingerprint = ctx.collection->fingerprint(ctx.vocab);
  return ctx;
}

// Expression in log space with columns checked against the vocabulary.
inline ExpressionMatrix load_expression(const RunConfig& c, const GeneVocabulary& vocab) {
  require_file(c.paths.expression, "paths.expression");
  auto e = io::read_expression_tsv(c.paths.expression, c.expression_space);
  if (e.genes != vocab.genes())
    throw FingerprintError("expression columns (vocabulary " + e.vocabulary_fingerprint() +
                           ") do not match the gene vocabulary " + vocab.fingerprint());
  return c.expression_space == ExpressionSpace::Raw ? log_transform(e) : e;
}

inline std::map<std::string, int> load_splits(const RunConfig& c) {
  require_file(c.paths.splits, "paths.splits");
  std::map<std::string, int> out;
  try {
    const auto j = io::read_json(c.paths.splits);
    if (!j.is_object()) throw ParseError(c.paths.splits.string() + ": expected an object {sample_id: fold}");
    for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = it.value().get<int>();
  } catch (const json::exception& e) {
    throw ParseError(c.paths.splits.string() + ": " + e.what());
  }
  return out;
}

inline int fold_of(const std::map<std::string, int>& splits, const std::string& id) {
  auto it = splits.find(id);
  if (it == splits.end()) throw ConfigError("sample '" + id + "' has no entry in paths.splits");
  return it->second;
}

inline Mat load_sample_condition(const RunConfig& c, const std::string& id) {
  for (const char* ext : {".bin", ".tsv"}) {
    const fs::path p = c.paths.conditions / (id + ext);
    if (fs::exists(p)) {
      Mat y = io::load_condition(p, c.network.cluster_count).y;
      if (y.rows() != c.network.cluster_count || y.cols() != c.network.condition_dim)
        throw ConfigError("condition '" + p.string() + "' is " + std::to_string(y.rows()) + "x" +
                          std::to_string(y.cols()) + ", network expects " + std::to_string(c.network.cluster_count) +
                          "x" + std::to_string(c.network.condition_dim));
      return y;
    }
  }
  throw ConfigError("paths.conditions: no condition file for sample '" + id + "'");
}

// ---------------------------------------------------------------------------
// synth

struct SynthOutputs {
  fs::path config;  // ready-to-use RunConfig pointing at the generated files
};

// Pathway sizes are drawn in [min, max] and the largest are shrunk until the
// sets fit; pathways 0 and 1 share two genes, all others are disjoint.
inline std::vector<Pathway> synth_pathways(const SynthSettings& s, Rng& rng) {
  const auto genes = static_cast<int>(s.task.genes);
  const int overlap = s.pathways >= 2 ? 2 : 0;
  if (s.pathways * s.min_pathway_size - overlap > genes)
    throw ConfigError("synth: " + std::to_string(s.pathways) + " pathways of size >= " +
                      std::to_string(s.min_pathway_size) + " do not fit in " + std::to_string(genes) + " genes");
  if (overlap > 0 && s.min_pathway_size <= overlap) throw ConfigError("synth: min_pathway_size must exceed 2");
  std::uniform_int_distribution<int> size_dist(s.min_pathway_size, s.max_pathway_size);
  std::vector<int> sizes(static_cast<std::size_t>(s.pathways));
  for (auto& z : sizes) z = size_dist(rng);
  auto total = [&] { return std::accumulate(sizes.begin(), sizes.end(), 0) - overlap; };
  while (total() > genes) --*std::max_element(sizes.begin(), sizes.end());

  std::vector<std::size_t> perm(static_cast<std::size_t>(genes));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<Pathway> out;
  std::size_t cursor = 0;
  for (int i = 0; i < s.pathways; ++i) {
    if (i == 1) cursor -= static_cast<std::size_t>(overlap);
    Pathway p;
    p.name = "SYN_PATHWAY_" + std::to_string(i);
    p.members.assign(perm.begin() + static_cast<std::ptrdiff_t>(cursor),
                     perm.begin() + static_cast<std::ptrdiff_t>(cursor + static_cast<std::size_t>(sizes[static_cast<std::size_t>(i)])));
    std::sort(p.members.begin(), p.members.end());
    cursor += static_cast<std::size_t>(sizes[static_cast<std::size_t>(i)]);
    out.push_back(std::move(p));
  }
  return out;
}

inline std::string sample_id(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "S%04d", i);
  return buf;
}

inline SynthOutputs cmd_synth(const RunConfig& c) {
  c.validate();
  const auto& s = c.synth;
  const fs::path out = c.paths.output;
  try {
    fs::create_directories(out / "conditions");
  } catch (const fs::filesystem_error& e) {
    throw ConfigError("paths.output: cannot create '" + out.string() + "': " + e.what());
  }
  SyntheticTaskConfig tc = s.task;
  tc.seed = c.seed;
  const SyntheticTask task(tc);

  std::vector<std::string> genes;
  for (Eigen::Index g = 0; g < tc.genes; ++g) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "GENE%04ld", static_cast<long>(g));
    genes.emplace_back(buf);
  }
  const GeneVocabulary vocab(genes);
  save_vocabulary(vocab, (out / "genes.txt").string());

  Rng pathway_rng = derive_rng(c.seed, 0x9a7b);
  const auto pathways = synth_pathways(s, pathway_rng);
  {
    auto gmt = io::open_out(out / "pathways.gmt");
    for (const auto& p : pathways) {
      gmt << p.name << "\tsynthetic";
      for (auto g : p.members) gmt << '\t' << genes[g];
      gmt << '\n';
    }
  }

  ExpressionMatrix expr;
  expr.genes = genes;
  expr.space = ExpressionSpace::Log;
  expr.values.resize(s.samples, tc.genes);
  Rng data_rng = derive_rng(c.seed, 0xda7a);
  for (int i = 0; i < s.samples; ++i) {
    auto [x, y] = task.sample_pair(data_rng);
    const std::string id = sample_id(i);
    expr.sample_ids.push_back(id);
    expr.values.row(i) = x.transpose();
    io::write_slide(out / "conditions" / (id + ".bin"), {id, y});
  }
  io::write_expression_tsv(out / "expression.tsv", expr);

  const auto folds = assign_folds(static_cast<std::size_t>(s.samples), c.folds, c.seed);
  io::write_json(out / "splits.json", io::split_to_json(expr.sample_ids, folds));

  json t;
  t["provenance"] = provenance(c, "synth");
  t["genes"] = tc.genes;
  t["condition_dim"] = tc.condition_dim;
  t["clusters"] = tc.clusters;
  t["noise"] = tc.noise;
  t["signal_scale"] = tc.signal_scale;
  t["cluster_spread"] = tc.cluster_spread;
  auto& w = t["mixing"] = json::array();
  for (Eigen::Index r = 0; r < task.mixing().rows(); ++r) {
    std::vector<double> row(task.mixing().row(r).data(), task.mixing().row(r).data() + task.mixing().cols());
    w.push_back(row);
  }
  io::write_json(out / "task.json", t);

  // a config that trains on exactly this dataset
  RunConfig next = c;
  next.paths = {"genes.txt", "pathways.gmt", "expression.tsv", "conditions", "splits.json", "run", ""};
  next.expression_space = ExpressionSpace::Log;
  next.network.condition_dim = static_cast<int>(tc.condition_dim);
  next.network.cluster_count = static_cast<int>(tc.clusters);
  next.filter = {static_cast<std::size_t>(1), static_cast<std::size_t>(std::max(s.max_pathway_size, 1))};
  io::write_json(out / "config.json", to_json(next));
  return {out / "config.json"};
}

// Reads back the analytic task written by cmd_synth.
inline SyntheticTask load_task(const fs::path& path) {
  const auto j = io::read_json(path);
  SyntheticTaskConfig tc;
  tc.genes = j.at("genes").get<Eigen::Index>();
  tc.condition_dim = j.at("condition_dim").get<Eigen::Index>();
  tc.clusters = j.at("clusters").get<Eigen::Index>();
  tc.noise = j.at("noise").get<double>();
  tc.signal_scale = j.at("signal_scale").get<double>();
  tc.cluster_spread = j.at("cluster_spread").get<double>();
  Mat w(tc.genes, tc.condition_dim);
  const auto& rows = j.at("mixing");
  for (Eigen::Index r = 0; r < tc.genes; ++r)
    for (Eigen::Index col = 0; col < tc.condition_dim; ++col) w(r, col) = rows.at(static_cast<std::size_t>(r)).at(static_cast<std::size_t>(col)).get<double>();
  return SyntheticTask(tc, std::move(w));
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  bool resume = false;
  bool quiet = false;
};

inline std::uint64_t training_seed(std::uint64_t seed) {
  Fnv1a h;
  h.update(seed);
  h.update("train");
  return h.digest();
}

inline void cmd_train(const RunConfig& c, const TrainOptions& opts = {}) {
  c.validate();
  const auto ctx = load_pathways(c);
  const auto expr = load_expression(c, ctx.vocab);
  const auto splits = load_splits(c);
  require_file(c.paths.conditions, "paths.conditions");

  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < expr.sample_ids.size(); ++i)
    if (fold_of(splits, expr.sample_ids[i]) != c.test_fold) rows.push_back(static_cast<Eigen::Index>(i));
  if (rows.size() < 2) throw ConfigError("train: fewer than two training samples outside the test fold");

  Mat train_log(static_cast<Eigen::Index>(rows.size()), expr.values.cols());
  Dataset data;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    train_log.row(static_cast<Eigen::Index>(i)) = expr.values.row(rows[i]);
    data.conditions.push_back(load_sample_condition(c, expr.sample_ids[static_cast<std::size_t>(rows[i])]));
  }
  const auto standardizer = Standardizer::fit(train_log, ctx.vocab.fingerprint());
  data.x1 = standardizer.apply(train_log, ctx.vocab.fingerprint());

  const fs::path ckpt_path = c.checkpoint_path();
  VelocityModel model(c.network, ctx.collection, ctx.fingerprint, c.seed);
  TrainState state = make_train_state(model);
  if (opts.resume && fs::exists(ckpt_path)) {
    const auto ck = io::load_checkpoint(ckpt_path);
    model = io::restore_model(ck, ctx.collection, ctx.fingerprint, false);
    state = ck.train;
    if (state.optimizer.first_moment.empty()) state.optimizer = nn::make_adamw_state(model.parameters());
    if (!opts.quiet) log_line("resuming from epoch " + std::to_string(state.epochs_done));
  }

  const auto result = train(model, data, c.flow, c.make_interpolant(), state, training_seed(c.seed),
                            [&](int epoch, double loss) {
                              if (!opts.quiet && (epoch % 10 == 0 || epoch + 1 == c.flow.max_epochs))
                                log_line("epoch " + std::to_string(epoch) + " loss " + format_double(loss));
                            });

  json meta = provenance(c, "train");
  meta["vocabulary_fingerprint"] = ctx.vocab.fingerprint();
  meta["interpolant"] = {{"kind", to_string(c.interpolant)}, {"steepness", c.logistic_steepness}};
  meta["flow"] = c.flow;
  io::save_checkpoint(ckpt_path, model, state, &standardizer, meta);
  json hist;
  hist["provenance"] = meta;
  hist["provenance"]["model_fingerprint"] = ctx.fingerprint;
  hist["epochs_completed"] = state.epochs_done;
  hist["loss"] = state.loss_history;
  io::write_json(c.paths.output / "loss_history.json", hist);
  if (result.diverged) throw NumericalError("training diverged (" + result.message + "); last good state saved");
}

// ---------------------------------------------------------------------------
// sample

inline std::uint64_t condition_seed(std::uint64_t seed, const std::string& id) {
  Fnv1a h;
  h.update(seed);
  h.update(id);
  return h.digest();
}

inline void cmd_sample(const RunConfig& c) {
  c.validate();
  const auto ctx = load_pathways(c);
  require_file(c.checkpoint_path(), "paths.checkpoint");
  const auto ck = io::load_checkpoint(c.checkpoint_path());
  const VelocityModel model = io::restore_model(ck, ctx.collection, ctx.fingerprint, true);
  if (!ck.standardizer) throw ConfigError("checkpoint has no standardizer");
  ck.standardizer->check(ctx.vocab.fingerprint(), model.gene_count());
  const auto splits = load_splits(c);
  require_file(c.paths.conditions, "paths.conditions");

  std::vector<std::string> ids;
  for (const auto& [id, fold] : splits)
    if (fold == c.test_fold) ids.push_back(id);
  if (ids.empty()) throw ConfigError("sample: no samples in test fold " + std::to_string(c.test_fold));
  std::vector<Mat> conditions;
  for (const auto& id : ids) conditions.push_back(load_sample_condition(c, id));

  std::vector<SampleSet> sets(ids.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < ids.size(); i = next++) {
      try {
        Rng rng = derive_rng(condition_seed(c.seed, ids[i]), 0x5a3b);
        sets[i] = generate_ensemble(model, &conditions[i], model.gene_count(), c.ensemble_n, c.flow, rng,
                                    &*ck.standardizer, ids[i]);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const auto n_threads = std::min<std::size_t>(static_cast<std::size_t>(c.threads), ids.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);

  json prov = provenance(c, "sample");
  prov["model_fingerprint"] = ctx.fingerprint;
  prov["cfg_scale"] = c.flow.cfg_scale;
  prov["steps"] = c.flow.steps;
  prov["ensemble_n"] = c.ensemble_n;
  prov["interpolant"] = ck.meta.value("interpolant", json::object());

  const fs::path ens_dir = c.paths.output / "ensembles";
  ExpressionMatrix pred;
  pred.genes = ctx.vocab.genes();
  pred.space = ExpressionSpace::Log;
  pred.values.resize(static_cast<Eigen::Index>(ids.size()), model.gene_count());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    io::write_ensemble_tsv(ens_dir / (ids[i] + ".tsv"), pred.genes, sets[i].samples);
    json side = {{"condition_id", ids[i]},
                 {"N", c.ensemble_n},
                 {"seed", c.seed},
                 {"condition_seed", condition_seed(c.seed, ids[i])},
                 {"cfg_scale", c.flow.cfg_scale},
                 {"steps", c.flow.steps},
                 {"model_fingerprint", ctx.fingerprint},
                 {"provenance", prov}};
    io::write_json(ens_dir / (ids[i] + ".json"), side);
    pred.sample_ids.push_back(ids[i]);
    pred.values.row(static_cast<Eigen::Index>(i)) = sets[i].mean.transpose();
  }
  io::write_expression_tsv(c.paths.output / "predictions.tsv", pred);
  io::write_json(c.paths.output / "predictions.json", {{"provenance", prov}, {"samples", ids}});
}

// ---------------------------------------------------------------------------
// eval

struct EvalInputs {
  fs::path predictions;  // defaults to <output>/predictions.tsv
  fs::path ensembles;    // defaults to <output>/ensembles when present
};

// Rows of `truth` reordered to match `ids`; missing ids are listed in the error.
inline Mat join_by_id(const ExpressionMatrix& truth, const std::vector<std::string>& ids) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < truth.sample_ids.size(); ++i) index[truth.sample_ids[i]] = i;
  std::vector<std::string> missing;
  Mat out(static_cast<Eigen::Index>(ids.size()), truth.values.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto it = index.find(ids[i]);
    if (it == index.end()) {
      missing.push_back(ids[i]);
      continue;
    }
    out.row(static_cast<Eigen::Index>(i)) = truth.values.row(static_cast<Eigen::Index>(it->second));
  }
  if (!missing.empty()) {
    std::string list;
    for (std::size_t i = 0; i < missing.size() && i < 20; ++i) list += (i ? ", " : "") + missing[i];
    if (missing.size() > 20) list += ", ...";
    throw ConfigError("eval: " + std::to_string(missing.size()) + " predicted sample ids absent from truths: " + list);
  }
  return out;
}

inline json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline void cmd_eval(const RunConfig& c, const EvalInputs& in = {}) {
  c.validate();
  require_file(c.paths.genes, "paths.genes");
  const auto vocab = load_vocabulary(c.paths.genes.string());
  const auto truth = load_expression(c, vocab);
  const fs::path pred_path = in.predictions.empty() ? c.paths.output / "predictions.tsv" : in.predictions;
  require_file(pred_path, "predictions");
  auto pred = io::read_expression_tsv(pred_path, ExpressionSpace::Log);
  if (pred.genes != truth.genes) throw FingerprintError("eval: prediction genes differ from the truth vocabulary");
  {
    std::set<std::string> seen;
    for (const auto& id : pred.sample_ids)
      if (!seen.insert(id).second) throw ConfigError("eval: duplicate prediction id '" + id + "'");
  }
  // canonical row order so shuffled inputs give identical reports
  std::vector<std::size_t> order(pred.sample_ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return pred.sample_ids[a] < pred.sample_ids[b]; });
  std::vector<std::string> ids;
  Mat p(pred.values.rows(), pred.values.cols());
  for (std::size_t i = 0; i < order.size(); ++i) {
    ids.push_back(pred.sample_ids[order[i]]);
    p.row(static_cast<Eigen::Index>(i)) = pred.values.row(static_cast<Eigen::Index>(order[i]));
  }
  const Mat t = join_by_id(truth, ids);

  std::vector<int> folds;
  if (!c.paths.splits.empty() && fs::exists(c.paths.splits)) {
    const auto splits = load_splits(c);
    for (const auto& id : ids) folds.push_back(fold_of(splits, id));
  }
  const auto metrics = compute_metrics(p, t, c.top_k, folds);

  json prov = provenance(c, "eval");
  prov["vocabulary_fingerprint"] = vocab.fingerprint();
  prov["samples"] = ids.size();

  json m;
  m["provenance"] = prov;
  m["mean_pcc"] = metrics.mean_pcc;
  m["mean_rmse"] = metrics.mean_rmse;
  m["undefined_pcc"] = metrics.undefined_pcc;
  auto& tk = m["top_k"] = json::array();
  for (const auto& s : metrics.top_k) {
    std::vector<std::string> names;
    for (auto g : s.genes) names.push_back(vocab.gene(g));
    tk.push_back({{"k", s.k}, {"mean_pcc", s.mean_pcc}, {"mean_rmse", s.mean_rmse}, {"genes", names}});
  }
  io::write_json(c.paths.output / "metrics.json", m);

  const fs::path ens_dir = in.ensembles.empty() ? c.paths.output / "ensembles" : in.ensembles;
  std::vector<double> mean_std(static_cast<std::size_t>(p.cols()), std::numeric_limits<double>::quiet_NaN());
  if (fs::exists(ens_dir)) {
    std::vector<Mat> ensembles;
    for (const auto& id : ids) {
      const fs::path f = ens_dir / (id + ".tsv");
      require_file(f, "ensemble for '" + id + "'");
      auto [genes, samples] = io::read_ensemble_tsv(f);
      if (genes != truth.genes) throw FingerprintError("eval: ensemble '" + f.string() + "' has different genes");
      ensembles.push_back(std::move(samples));
    }
    const auto u = compute_uncertainty(ensembles, t, default_coverage_levels());
    for (Eigen::Index g = 0; g < p.cols(); ++g) {
      double s = 0.0;
      for (const auto& e : ensembles) s += std::sqrt(ensemble_variance(e)(g));
      mean_std[static_cast<std::size_t>(g)] = s / static_cast<double>(ensembles.size());
    }
    json uj;
    uj["provenance"] = prov;
    uj["levels"] = u.levels;
    uj["coverage"] = u.coverage;
    uj["nll"] = u.nll;
    uj["variance_error_spearman"] = optional_json(u.spearman);
    uj["mean_ensemble_std"] = mean_std;
    io::write_json(c.paths.output / "uncertainty.json", uj);
  }

  if (c.per_gene_report) {
    auto out = io::open_out(c.paths.output / "per_gene.tsv");
    out << "gene\tpcc\trmse\tensemble_std\n";
    for (std::size_t g = 0; g < vocab.size(); ++g) {
      out << vocab.gene(g) << '\t' << (metrics.pcc[g] ? format_double(*metrics.pcc[g]) : "NA") << '\t'
          << format_double(metrics.rmse[g]) << '\t'
          << (std::isnan(mean_std[g]) ? std::string("NA") : format_double(mean_std[g])) << '\n';
    }
  }
}

}  // namespace rnafm::cli
