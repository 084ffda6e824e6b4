// SPDX-License-Identifier: Apache-2.0
//
// vecrag — context-vector retrieval-augmented QA at desk scale.
//
//   vecrag prepare-data --config cfg.json
//   vecrag train        --config cfg.json [--seed N] [--add-count N] [--checkpoint DIR]
//   vecrag eval         --config cfg.json [--checkpoint PATH] [--setting S]
//   vecrag generate     --config cfg.json --question "..." [--context "..." ...]
//   vecrag bench        --config cfg.json [--add-count N]
//
// Exit codes: 0 success, 1 usage/config error, 2 runtime failure.

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "vecrag/commands.hpp"
#include "vecrag/config.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::string checkpoint;
  std::string setting;
  int add_count = -1;
  long seed = -1;
  std::string out_dir;
};

void add_common(CLI::App* cmd, CommonFlags& flags, bool config_required = true) {
  auto* c = cmd->add_option("--config", flags.config_path, "run configuration (JSON)");
  if (config_required) c->required();
  cmd->add_option("--checkpoint", flags.checkpoint, "checkpoint file or step directory");
  cmd->add_option("--setting", flags.setting,
                  "held-in | icl-ctx | icl-noctx | contexts-only");
  cmd->add_option("--add-count", flags.add_count, "contexts routed through the encoder");
  cmd->add_option("--seed", flags.seed, "training / init seed");
  cmd->add_option("--out", flags.out_dir, "output directory");
}

// flags win over the config file
vecrag::RunConfig resolve_config(const CommonFlags& flags) {
  vecrag::RunConfig cfg = vecrag::load_run_config(flags.config_path);
  if (!flags.setting.empty()) cfg.setting = vecrag::setting_from_string(flags.setting);
  if (flags.add_count >= 0) cfg.add_count = flags.add_count;
  if (flags.seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(flags.seed);
  if (!flags.out_dir.empty()) cfg.out_dir = flags.out_dir;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"context-vector retrieval-augmented QA"};
  app.require_subcommand(1);

  CommonFlags prep_flags, train_flags, eval_flags, gen_flags, bench_flags;
  std::string question;
  std::vector<std::string> contexts;

  CLI::App* prep = app.add_subcommand("prepare-data", "attach ranked contexts, write splits");
  add_common(prep, prep_flags);
  CLI::App* train = app.add_subcommand("train", "fine-tune with the configured freeze policy");
  add_common(train, train_flags);
  CLI::App* eval = app.add_subcommand("eval", "exact-match evaluation of a checkpoint");
  add_common(eval, eval_flags);
  CLI::App* gen = app.add_subcommand("generate", "answer one question");
  add_common(gen, gen_flags);
  gen->add_option("--question", question, "question text")->required();
  gen->add_option("--context", contexts, "context attached to the question (repeatable)");
  CLI::App* bench = app.add_subcommand("bench", "train/generate step timings");
  add_common(bench, bench_flags);

  CLI11_PARSE(app, argc, argv);

  try {
    if (prep->parsed()) {
      vecrag::run_prepare_data(resolve_config(prep_flags));
    } else if (train->parsed()) {
      vecrag::run_train(resolve_config(train_flags), train_flags.checkpoint);
    } else if (eval->parsed()) {
      vecrag::run_eval(resolve_config(eval_flags), eval_flags.checkpoint);
    } else if (gen->parsed()) {
      std::cout << vecrag::run_generate(resolve_config(gen_flags), gen_flags.checkpoint,
                                        question, contexts)
                << "\n";
    } else if (bench->parsed()) {
      vecrag::run_bench(resolve_config(bench_flags));
    }
  } catch (const vecrag::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
