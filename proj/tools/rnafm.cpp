// rnafm: synth | train | sample | eval
//
// Exit codes: 0 ok, 2 configuration or input error, 3 numerical failure,
// 4 fingerprint mismatch.

#include "rnafm/cli.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <sstream>

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> cfg_scale;
  std::optional<int> steps;
  std::optional<std::string> interpolant;
  std::optional<double> lr;
  std::optional<int> ensemble_n;
  std::optional<std::string> top_k;
  std::optional<int> max_epochs;
  std::optional<int> threads;
  std::optional<std::string> output;
  std::optional<std::string> checkpoint;
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "JSON run configuration");
  cmd->add_option("--seed", o.seed, "master seed");
  cmd->add_option("--cfg-scale", o.cfg_scale, "classifier-free guidance scale");
  cmd->add_option("--steps", o.steps, "Euler steps");
  cmd->add_option("--interpolant", o.interpolant, "linear or logistic")->check(CLI::IsMember({"linear", "logistic"}));
  cmd->add_option("--lr", o.lr, "learning rate");
  cmd->add_option("--ensemble-n", o.ensemble_n, "samples per condition");
  cmd->add_option("--top-k", o.top_k, "comma-separated top-K list");
  cmd->add_option("--max-epochs", o.max_epochs, "training epoch cap");
  cmd->add_option("--threads", o.threads, "worker threads for sampling");
  cmd->add_option("--output", o.output, "output directory");
  cmd->add_option("--checkpoint", o.checkpoint, "checkpoint path");
}

rnafm::cli::RunConfig resolve(const Overrides& o) {
  using rnafm::ConfigError;
  rnafm::cli::RunConfig c = o.config.empty() ? rnafm::cli::RunConfig{} : rnafm::cli::load_config(o.config);
  if (o.seed) c.seed = c.synth.task.seed = *o.seed;
  if (o.cfg_scale) c.flow.cfg_scale = *o.cfg_scale;
  if (o.steps) c.flow.steps = *o.steps;
  if (o.interpolant) c.interpolant = rnafm::parse_interpolant(*o.interpolant);
  if (o.lr) c.flow.learning_rate = *o.lr;
  if (o.ensemble_n) c.ensemble_n = *o.ensemble_n;
  if (o.max_epochs) c.flow.max_epochs = *o.max_epochs;
  if (o.threads) c.threads = *o.threads;
  if (o.output) c.paths.output = *o.output;
  if (o.checkpoint) c.paths.checkpoint = *o.checkpoint;
  if (o.top_k) {
    c.top_k.clear();
    std::stringstream ss(*o.top_k);
    std::string item;
    while (std::getline(ss, item, ',')) {
      try {
        c.top_k.push_back(static_cast<std::size_t>(std::stoul(item)));
      } catch (const std::exception&) {
        throw ConfigError("--top-k: '" + item + "' is not a positive integer");
      }
    }
  }
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pathway-aware conditional flow matching for expression prediction"};
  app.require_subcommand(1);

  Overrides synth_o, train_o, sample_o, eval_o;
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset with a known conditional law");
  add_overrides(synth, synth_o);

  auto* train = app.add_subcommand("train", "train the velocity network");
  add_overrides(train, train_o);
  bool resume = false, quiet = false;
  train->add_flag("--resume", resume, "continue from an existing checkpoint");
  train->add_flag("--quiet", quiet, "suppress per-epoch logging");

  auto* sample = app.add_subcommand("sample", "draw ensembles for the test-fold conditions");
  add_overrides(sample, sample_o);

  auto* eval = app.add_subcommand("eval", "score predictions and ensembles against truths");
  add_overrides(eval, eval_o);
  rnafm::cli::EvalInputs eval_in;
  std::string predictions, ensembles;
  bool per_gene = false;
  eval->add_option("--predictions", predictions, "predictions TSV");
  eval->add_option("--ensembles", ensembles, "directory of ensemble TSVs");
  eval->add_flag("--per-gene", per_gene, "also write per_gene.tsv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*synth) {
      auto out = rnafm::cli::cmd_synth(resolve(synth_o));
      std::cout << out.config.string() << '\n';
    } else if (*train) {
      rnafm::cli::cmd_train(resolve(train_o), {resume, quiet});
    } else if (*sample) {
      rnafm::cli::cmd_sample(resolve(sample_o));
    } else if (*eval) {
      auto c = resolve(eval_o);
      if (per_gene) c.per_gene_report = true;
      eval_in.predictions = predictions;
      eval_in.ensembles = ensembles;
      rnafm::cli::cmd_eval(c, eval_in);
    }
  } catch (const rnafm::Error& e) {
    std::cerr << "rnafm: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "rnafm: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
