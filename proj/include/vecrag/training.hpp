// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "vecrag/checkpoint.hpp"
#include "vecrag/data.hpp"
#include "vecrag/model.hpp"

// Language-modeling objective over formatted samples, the warmup+cosine
// schedule, decoupled-weight-decay Adam, and the two encoder freeze
// schedules: keep phi frozen for the whole run, or unfreeze it after a fixed
// number of steps (default: one epoch) once the random projectors have
// settled enough not to scramble it.

namespace vecrag {

struct TrainConfig {
  double peak_lr = 2e-5;
  double warmup_ratio = 0.03;
  int batch_size = 8;
  int max_epochs = 4;
  long eval_interval = 4000;
  long save_interval = 4000;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const {
    if (warmup_ratio < 0.0 || warmup_ratio >= 1.0) {
      throw std::invalid_argument("train config: warmup_ratio must be in [0,1)");
    }
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (max_epochs < 1) throw std::invalid_argument("train config: max_epochs must be >= 1");
  }
};

enum class FreezeStrategy { frozen_encoder, delayed_unfreeze };

struct FreezePolicy {
  FreezeStrategy strategy = FreezeStrategy::frozen_encoder;
  long unfreeze_step = -1;  // < 0: resolved to one epoch by the trainer

  bool encoder_trainable_at(long step) const {
    return strategy == FreezeStrategy::delayed_unfreeze && step >= unfreeze_step;
  }
};

struct LossReport {
  double total_nll = 0.0;  // summed over supervised tokens
  double mean_nll = 0.0;   // per supervised token
  long n_tokens = 0;
  long step = -1;
  std::string split = "train";
};

/// Linear warmup from 0 to the peak, then cosine decay to 0 at total_steps.
inline double lr_at(long step, long total_steps, const TrainConfig& cfg) {
  if (step >= total_steps) return 0.0;
  const long warmup = static_cast<long>(std::ceil(cfg.warmup_ratio * static_cast<double>(total_steps)));
  if (step < warmup) {
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  }
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

namespace detail {

/// Builds the batch loss tensor: per-sample masked cross entropy, combined
/// so the result is the mean over every supervised token in the batch.
inline Tensor batch_loss(const std::vector<FormattedSample>& batch, const ModelParams& params,
                         const ModelConfig& cfg, LossReport* report) {
  if (batch.empty()) throw std::invalid_argument("lm_loss: empty batch");
  long total_tokens = 0;
  std::vector<long> counts;
  for (const FormattedSample& s : batch) {
    long n = 0;
    for (std::size_t t = 1; t < s.loss_mask.size(); ++t) n += s.loss_mask[t] ? 1 : 0;
    if (n == 0) {
      throw std::invalid_argument("lm_loss: sample '" + s.id + "' has no supervised tokens");
    }
    counts.push_back(n);
    total_tokens += n;
  }
  Tensor loss;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const FormattedSample& s = batch[i];
    const std::vector<int> inputs(s.tokens.begin(), s.tokens.end() - 1);
    const std::vector<int> targets(s.tokens.begin() + 1, s.tokens.end());
    const std::vector<bool> mask(s.loss_mask.begin() + 1, s.loss_mask.end());
    Tensor logits = forward(inputs, s.k_add_tokens, params, cfg);
    Tensor ce = cross_entropy_mean(logits, targets, mask);
    Tensor weighted =
        scale(ce, static_cast<double>(counts[i]) / static_cast<double>(total_tokens));
    loss = loss.defined() ? add(loss, weighted) : weighted;
  }
  if (report) {
    report->mean_nll = loss.item();
    report->n_tokens = total_tokens;
    report->total_nll = report->mean_nll * static_cast<double>(total_tokens);
  }
  return loss;
}

}  // namespace detail

/// Mean masked next-token loss of a batch (no gradients recorded).
inline LossReport lm_loss(const std::vector<FormattedSample>& batch, const ModelParams& params,
                          const ModelConfig& cfg) {
  LossReport report;
  detail::batch_loss(batch, params, cfg, &report);
  return report;
}

// Decoupled-weight-decay Adam. Decay touches matrices only; vectors (biases,
// norm gains) and frozen parameters are left alone. Per-parameter step
// counters mean a group unfrozen late starts with fresh bias correction.
class AdamW {
 public:
  explicit AdamW(const ModelParams& params) {
    for (const NamedParam& np : named_parameters(params)) {
      slots_.push_back({np.name, Tensor(np.tensor.shape(), 0.0), Tensor(np.tensor.shape(), 0.0), 0});
    }
  }

  void step(const ModelParams& params, double lr, const TrainConfig& cfg) {
    const std::vector<NamedParam> named = named_parameters(params);
    if (named.size() != slots_.size()) {
      throw std::runtime_error("optimizer state does not match the model");
    }
    for (std::size_t i = 0; i < named.size(); ++i) {
      const Tensor& p = named[i].tensor;
      if (!p.requires_grad()) continue;
      Slot& slot = slots_[i];
      slot.t += 1;
      const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(slot.t));
      const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(slot.t));
      const bool decay = p.ndim() >= 2;
      double* w = p.data();
      const double* g = p.grad();
      double* m = slot.m.data();
      double* v = slot.v.data();
      for (std::size_t j = 0; j < p.numel(); ++j) {
        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
        const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg.adam_eps);
        w[j] -= lr * (update + (decay ? cfg.weight_decay * w[j] : 0.0));
      }
    }
  }

  long steps_taken(const std::string& name) const {
    for (const Slot& s : slots_) {
      if (s.name == name) return s.t;
    }
    throw std::invalid_argument("optimizer: unknown parameter '" + name + "'");
  }

  double moment_magnitude(const std::string& name) const {
    for (const Slot& s : slots_) {
      if (s.name != name) continue;
      double mag = 0.0;
      for (std::size_t j = 0; j < s.m.numel(); ++j) mag += std::fabs(s.m.data()[j]);
      return mag;
    }
    throw std::invalid_argument("optimizer: unknown parameter '" + name + "'");
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write optimizer state: " + path);
    nlohmann::json manifest = nlohmann::json::array();
    for (const Slot& s : slots_) {
      manifest.push_back({{"name", s.name}, {"shape", s.m.shape()}, {"t", s.t}});
    }
    const std::string header = manifest.dump();
    ckpt_detail::write_u64(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const Slot& s : slots_) {
      out.write(reinterpret_cast<const char*>(s.m.data()),
                static_cast<std::streamsize>(s.m.numel() * sizeof(double)));
      out.write(reinterpret_cast<const char*>(s.v.data()),
                static_cast<std::streamsize>(s.v.numel() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("short write to optimizer state: " + path);
  }

  void load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open optimizer state: " + path);
    const std::uint64_t header_len = ckpt_detail::read_u64(in);
    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));
    const nlohmann::json manifest = nlohmann::json::parse(header);
    if (manifest.size() != slots_.size()) {
      throw std::runtime_error("optimizer state does not match the model");
    }
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      if (manifest.at(i).at("name").get<std::string>() != slots_[i].name) {
        throw std::runtime_error("optimizer state tensor mismatch at index " + std::to_string(i));
      }
      slots_[i].t = manifest.at(i).at("t").get<long>();
      in.read(reinterpret_cast<char*>(slots_[i].m.data()),
              static_cast<std::streamsize>(slots_[i].m.numel() * sizeof(double)));
      in.read(reinterpret_cast<char*>(slots_[i].v.data()),
              static_cast<std::streamsize>(slots_[i].v.numel() * sizeof(double)));
    }
    if (!in) throw std::runtime_error("truncated optimizer state: " + path);
  }

 private:
  struct Slot {
    std::string name;
    Tensor m, v;
    long t = 0;
  };
  std::vector<Slot> slots_;
};

/// One optimizer update: forward + backward on the batch, clip the global
/// gradient norm, apply AdamW at lr_at(step). Frozen groups receive neither
/// gradients nor updates, per the policy at this step.
inline LossReport train_step(const std::vector<FormattedSample>& batch, const ModelParams& params,
                             AdamW& opt, const FreezePolicy& policy, long step, long total_steps,
                             const TrainConfig& tcfg, const ModelConfig& mcfg) {
  set_group_trainable(params, ParamGroup::encoder_phi, policy.encoder_trainable_at(step));
  set_group_trainable(params, ParamGroup::decoder_theta, true);
  set_group_trainable(params, ParamGroup::adapter_pi, true);
  for (const NamedParam& np : named_parameters(params)) np.tensor.zero_grad();

  LossReport report;
  report.step = step;
  {
    Tape tape;
    Tensor loss = detail::batch_loss(batch, params, mcfg, &report);
    if (!std::isfinite(report.mean_nll)) {
      throw std::runtime_error("train_step: non-finite loss " + std::to_string(report.mean_nll) +
                               " at step " + std::to_string(step));
    }
    backward_all(loss, tape);
  }

  if (tcfg.clip_norm > 0.0) {
    double sq = 0.0;
    for (const NamedParam& np : named_parameters(params)) {
      if (!np.tensor.requires_grad() || !np.tensor.has_grad()) continue;
      for (double g : np.tensor.grad_vec()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > tcfg.clip_norm) {
      const double factor = tcfg.clip_norm / norm;
      for (const NamedParam& np : named_parameters(params)) {
        if (!np.tensor.requires_grad() || !np.tensor.has_grad()) continue;
        double* g = np.tensor.grad();
        for (std::size_t j = 0; j < np.tensor.numel(); ++j) g[j] *= factor;
      }
    }
  }

  opt.step(params, lr_at(step, total_steps, tcfg), tcfg);
  for (const NamedParam& np : named_parameters(params)) np.tensor.zero_grad();
  return report;
}

struct EvalRecord {
  long step = 0;
  double dev_loss = 0.0;
};

/// Lowest dev loss wins; ties go to the earlier step.
inline long select_best_checkpoint(const std::vector<EvalRecord>& history) {
  if (history.empty()) {
    throw std::invalid_argument("select_best_checkpoint: empty eval history");
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (history[i].dev_loss < history[best].dev_loss) best = i;
  }
  return history[best].step;
}

}  // namespace vecrag
