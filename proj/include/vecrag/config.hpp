// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <set>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "vecrag/checkpoint.hpp"
#include "vecrag/pipeline.hpp"
#include "vecrag/training.hpp"

// One structured config file drives every command; flags override single
// fields afterwards. Unknown keys are rejected outright so that a typo never
// silently runs with defaults.

namespace vecrag {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataPaths {
  std::string train;
  std::string dev;
  std::string test;
  std::string corpus;      // empty: records must already carry ranked contexts
  int retrieve_count = 20; // contexts attached per question when a corpus is given
  int icl_examples = 2;
  bool mask_prompt = true;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  FreezePolicy freeze;
  DataPaths data;
  Setting setting = Setting::held_in;
  int add_count = 0;
  int max_new = 32;
  std::string out_dir = "run_out";

  void validate() const {
    model.validate();
    train.validate();
    if (add_count < 0) throw ConfigError("config: add_count must be >= 0");
    if (add_count > model.max_ctx_vectors) {
      throw ConfigError("config: add_count " + std::to_string(add_count) +
                        " exceeds model.max_ctx_vectors " +
                        std::to_string(model.max_ctx_vectors));
    }
    if (max_new < 1) throw ConfigError("config: max_new must be >= 1");
    if (out_dir.empty()) throw ConfigError("config: out_dir must not be empty");
  }

  PipelineConfig pipeline() const {
    PipelineConfig pc;
    pc.setting = setting;
    pc.add_count = static_cast<std::size_t>(add_count);
    pc.max_seq_len = static_cast<std::size_t>(model.max_seq_len);
    pc.enc_max_len = static_cast<std::size_t>(model.enc_max_len);
    pc.icl_examples = static_cast<std::size_t>(data.icl_examples);
    pc.mask_prompt = data.mask_prompt;
    return pc;
  }
};

namespace config_detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed,
                           const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) {
      throw ConfigError("config: unknown key '" + key + "' in " + where);
    }
  }
}

template <typename T>
void read_into(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key)) {
    try {
      field = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config: bad value for '" + std::string(key) + "': " + e.what());
    }
  }
}

}  // namespace config_detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using config_detail::read_into;
  using config_detail::reject_unknown;
  reject_unknown(j, {"model", "train", "freeze", "data", "setting", "add_count", "max_new",
                     "out_dir"},
                 "the top level");
  RunConfig cfg;
  if (j.contains("model")) {
    const auto& m = j.at("model");
    reject_unknown(m, {"vocab_size", "d_dec", "d_enc", "n_layers_dec", "n_layers_enc",
                       "n_heads", "max_seq_len", "max_ctx_vectors", "enc_max_len"},
                   "model");
    read_into(m, "vocab_size", cfg.model.vocab_size);
    read_into(m, "d_dec", cfg.model.d_dec);
    read_into(m, "d_enc", cfg.model.d_enc);
    read_into(m, "n_layers_dec", cfg.model.n_layers_dec);
    read_into(m, "n_layers_enc", cfg.model.n_layers_enc);
    read_into(m, "n_heads", cfg.model.n_heads);
    read_into(m, "max_seq_len", cfg.model.max_seq_len);
    read_into(m, "max_ctx_vectors", cfg.model.max_ctx_vectors);
    read_into(m, "enc_max_len", cfg.model.enc_max_len);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    reject_unknown(t, {"peak_lr", "warmup_ratio", "batch_size", "max_epochs", "eval_interval",
                       "save_interval", "weight_decay", "clip_norm", "seed"},
                   "train");
    read_into(t, "peak_lr", cfg.train.peak_lr);
    read_into(t, "warmup_ratio", cfg.train.warmup_ratio);
    read_into(t, "batch_size", cfg.train.batch_size);
    read_into(t, "max_epochs", cfg.train.max_epochs);
    read_into(t, "eval_interval", cfg.train.eval_interval);
    read_into(t, "save_interval", cfg.train.save_interval);
    read_into(t, "weight_decay", cfg.train.weight_decay);
    read_into(t, "clip_norm", cfg.train.clip_norm);
    read_into(t, "seed", cfg.train.seed);
  }
  if (j.contains("freeze")) {
    const auto& f = j.at("freeze");
    reject_unknown(f, {"strategy", "unfreeze_step"}, "freeze");
    std::string strategy = "frozen-encoder";
    read_into(f, "strategy", strategy);
    if (strategy == "frozen-encoder") {
      cfg.freeze.strategy = FreezeStrategy::frozen_encoder;
    } else if (strategy == "delayed-unfreeze") {
      cfg.freeze.strategy = FreezeStrategy::delayed_unfreeze;
    } else {
      throw ConfigError("config: unknown freeze strategy '" + strategy + "'");
    }
    read_into(f, "unfreeze_step", cfg.freeze.unfreeze_step);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    reject_unknown(d, {"train", "dev", "test", "corpus", "retrieve_count", "icl_examples",
                       "mask_prompt"},
                   "data");
    read_into(d, "train", cfg.data.train);
    read_into(d, "dev", cfg.data.dev);
    read_into(d, "test", cfg.data.test);
    read_into(d, "corpus", cfg.data.corpus);
    read_into(d, "retrieve_count", cfg.data.retrieve_count);
    read_into(d, "icl_examples", cfg.data.icl_examples);
    read_into(d, "mask_prompt", cfg.data.mask_prompt);
  }
  if (j.contains("setting")) {
    try {
      cfg.setting = setting_from_string(j.at("setting").get<std::string>());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  config_detail::read_into(j, "add_count", cfg.add_count);
  config_detail::read_into(j, "max_new", cfg.max_new);
  config_detail::read_into(j, "out_dir", cfg.out_dir);
  cfg.validate();
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace vecrag
