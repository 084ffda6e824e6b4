// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "vecrag/training.hpp"

// The training loop: deterministic epoch shuffling, periodic dev evaluation,
// step-N checkpoint directories, and a best-pointer record selected by dev
// loss. Resuming from a step-N directory continues the exact trajectory of an
// uninterrupted run because the epoch order derives from (seed, epoch) alone.

namespace vecrag {

struct TrainerOptions {
  ModelConfig model;
  TrainConfig train;
  FreezePolicy freeze;
  std::string out_dir;
  std::string resume_from;  // step-N directory; empty = fresh start
  std::uint64_t model_seed = 0;
  bool with_adapters = true;
  long max_steps = 0;  // > 0: stop (and save) after this global step
};

struct TrainResult {
  long steps_run = 0;
  long best_step = -1;
  double best_dev_loss = std::numeric_limits<double>::infinity();
  std::string best_dir;
  ModelParams params;
  std::vector<EvalRecord> history;
};

namespace detail {

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, long epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(epoch + 1)));
  for (std::size_t i = n; i > 1; --i) {
    std::swap(order[i - 1], order[rng.below(i)]);
  }
  return order;
}

inline double dataset_loss(const std::vector<FormattedSample>& data, const ModelParams& params,
                           const ModelConfig& cfg, int batch_size) {
  double total = 0.0;
  long tokens = 0;
  for (std::size_t off = 0; off < data.size(); off += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(data.size(), off + static_cast<std::size_t>(batch_size));
    const std::vector<FormattedSample> batch(data.begin() + off, data.begin() + end);
    const LossReport r = lm_loss(batch, params, cfg);
    total += r.total_nll;
    tokens += r.n_tokens;
  }
  return tokens > 0 ? total / static_cast<double>(tokens) : 0.0;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace detail

inline TrainResult run_training(const TrainerOptions& opt,
                                const std::vector<FormattedSample>& train_set,
                                const std::vector<FormattedSample>& dev_set) {
  opt.model.validate();
  opt.train.validate();
  if (train_set.empty()) throw std::invalid_argument("training: empty train set");
  namespace fs = std::filesystem;
  fs::create_directories(opt.out_dir);

  const long steps_per_epoch =
      static_cast<long>((train_set.size() + opt.train.batch_size - 1) /
                        static_cast<std::size_t>(opt.train.batch_size));
  const long total_steps = steps_per_epoch * opt.train.max_epochs;
  const long end_step =
      opt.max_steps > 0 ? std::min(total_steps, opt.max_steps) : total_steps;

  FreezePolicy policy = opt.freeze;
  if (policy.strategy == FreezeStrategy::delayed_unfreeze && policy.unfreeze_step < 0) {
    policy.unfreeze_step = steps_per_epoch;  // one epoch
  }

  TrainResult result;
  long start_step = 0;
  Rng rng(opt.train.seed);
  AdamW* opt_state = nullptr;
  if (!opt.resume_from.empty()) {
    Checkpoint ck = load_checkpoint(opt.resume_from + "/params.ckpt");
    result.params = ck.params;
    start_step = ck.step;
    rng.set_state(ck.rng_state);
    opt_state = new AdamW(result.params);
    opt_state->load(opt.resume_from + "/optimizer.bin");
  } else {
    result.params = init_model(opt.model, opt.model_seed, opt.with_adapters);
    opt_state = new AdamW(result.params);
  }
  std::unique_ptr<AdamW> opt_guard(opt_state);

  std::ofstream log(opt.out_dir + "/log.jsonl",
                    opt.resume_from.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw std::runtime_error("cannot write training log in " + opt.out_dir);

  auto save_step_dir = [&](long step) {
    const std::string dir = opt.out_dir + "/step-" + std::to_string(step);
    fs::create_directories(dir);
    save_checkpoint(dir + "/params.ckpt", result.params, opt.model, step, rng.state());
    opt_state->save(dir + "/optimizer.bin");
    return dir;
  };

  for (long step = start_step; step < end_step; ++step) {
    const long epoch = step / steps_per_epoch;
    const long pos = step % steps_per_epoch;
    const std::vector<std::size_t> order =
        detail::epoch_order(train_set.size(), opt.train.seed, epoch);
    std::vector<FormattedSample> batch;
    for (long i = pos * opt.train.batch_size;
         i < (pos + 1) * opt.train.batch_size && i < static_cast<long>(train_set.size()); ++i) {
      batch.push_back(train_set[order[static_cast<std::size_t>(i)]]);
    }
    const LossReport report =
        train_step(batch, result.params, *opt_state, policy, step, total_steps, opt.train,
                   opt.model);

    nlohmann::json line = {{"step", step},
                           {"lr", lr_at(step, total_steps, opt.train)},
                           {"train_loss", report.mean_nll},
                           {"phi_hash",
                            detail::hex64(group_hash(result.params, ParamGroup::encoder_phi))}};

    const bool last = step + 1 == end_step;
    const bool eval_now =
        !dev_set.empty() && (last || (opt.train.eval_interval > 0 &&
                                      (step + 1) % opt.train.eval_interval == 0));
    const bool save_now = last || eval_now || (opt.train.save_interval > 0 &&
                                               (step + 1) % opt.train.save_interval == 0);
    if (eval_now) {
      const double dev = detail::dataset_loss(dev_set, result.params, opt.model,
                                              opt.train.batch_size);
      result.history.push_back({step + 1, dev});
      line["dev_loss"] = dev;
    }
    if (save_now) {
      const std::string dir = save_step_dir(step + 1);
      if (eval_now && result.history.back().dev_loss < result.best_dev_loss) {
        result.best_dev_loss = result.history.back().dev_loss;
        result.best_step = step + 1;
        result.best_dir = dir;
      }
    }
    log << line.dump() << "\n";
    result.steps_run = step + 1;
  }

  if (!result.history.empty()) {
    // argmin dev loss, earlier step on ties; matches the incremental tracking
    result.best_step = select_best_checkpoint(result.history);
    for (const EvalRecord& r : result.history) {
      if (r.step == result.best_step) result.best_dev_loss = r.dev_loss;
    }
    result.best_dir = opt.out_dir + "/step-" + std::to_string(result.best_step);
    nlohmann::json best = {{"step", result.best_step}, {"dev_loss", result.best_dev_loss}};
    std::ofstream best_out(opt.out_dir + "/best.json");
    best_out << best.dump() << "\n";
  } else if (result.steps_run > 0) {
    result.best_step = result.steps_run;
    result.best_dir = opt.out_dir + "/step-" + std::to_string(result.steps_run);
    nlohmann::json best = {{"step", result.best_step}};
    std::ofstream best_out(opt.out_dir + "/best.json");
    best_out << best.dump() << "\n";
  }
  return result;
}

}  // namespace vecrag
