// SPDX-License-Identifier: Apache-2.0
//
// Objectives, the warmup+cosine schedule, freeze policies, optimizer state
// hygiene across the delayed unfreeze, deterministic training runs, and
// resume equivalence.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "support/naive_model.hpp"
#include "vecrag/trainer.hpp"
#include "vecrag/training.hpp"

using namespace vecrag;
namespace naive = vecrag::testing::naive;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.vocab_size = 13;
  cfg.d_dec = 8;
  cfg.d_enc = 4;
  cfg.n_layers_dec = 2;
  cfg.n_layers_enc = 1;
  cfg.n_heads = 2;
  cfg.max_seq_len = 16;
  cfg.max_ctx_vectors = 4;
  cfg.enc_max_len = 8;
  return cfg;
}

FormattedSample fake_sample(std::vector<int> tokens, std::size_t answer_from,
                            std::vector<std::vector<int>> k_add = {}) {
  FormattedSample s;
  s.id = "fake";
  s.tokens = std::move(tokens);
  s.loss_mask.assign(s.tokens.size(), false);
  for (std::size_t t = answer_from; t < s.tokens.size(); ++t) s.loss_mask[t] = true;
  s.k_add_tokens = std::move(k_add);
  return s;
}

std::vector<FormattedSample> fake_dataset(int n, Rng& rng, const ModelConfig& cfg) {
  std::vector<FormattedSample> out;
  for (int i = 0; i < n; ++i) {
    std::vector<int> tokens;
    const std::size_t len = 6 + rng.below(4);
    for (std::size_t t = 0; t < len; ++t) {
      tokens.push_back(5 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.vocab_size - 5))));
    }
    std::vector<std::vector<int>> k_add = {{5 + static_cast<int>(rng.below(8))},
                                           {5 + static_cast<int>(rng.below(8)), 6}};
    out.push_back(fake_sample(tokens, len - 2, k_add));
    out.back().id = "fake" + std::to_string(i);
  }
  return out;
}

}  // namespace

TEST_CASE("lr schedule") {
  TrainConfig cfg;  // peak 2e-5, warmup ratio 0.03
  const long total = 1000;
  const long warmup = static_cast<long>(std::ceil(0.03 * 1000));  // 30
  SECTION("ramp start is zero") { CHECK(lr_at(0, total, cfg) == 0.0); }
  SECTION("warmup end hits the peak") {
    CHECK(lr_at(warmup, total, cfg) == Catch::Approx(2e-5).margin(1e-18));
  }
  SECTION("middle of the decay span is half the peak") {
    const long mid = warmup + (total - warmup) / 2;
    CHECK(lr_at(mid, total, cfg) == Catch::Approx(1e-5).epsilon(1e-9));
  }
  SECTION("steps beyond the horizon clamp to zero") {
    CHECK(lr_at(total, total, cfg) == 0.0);
    CHECK(lr_at(total + 500, total, cfg) == 0.0);
  }
  SECTION("decay is monotone") {
    double prev = lr_at(warmup, total, cfg);
    for (long s = warmup + 1; s <= total; s += 97) {
      const double cur = lr_at(s, total, cfg);
      CHECK(cur <= prev);
      prev = cur;
    }
  }
}

TEST_CASE("lm_loss") {
  const ModelConfig cfg = tiny_config();
  SECTION("untrained model sits near ln V") {
    Rng rng(7);
    const ModelParams params = init_model(cfg, 7);
    const auto data = fake_dataset(8, rng, cfg);
    const LossReport r = lm_loss(data, params, cfg);
    CHECK(r.mean_nll == Catch::Approx(std::log(13.0)).epsilon(0.15));
    CHECK(r.n_tokens > 0);
    CHECK(r.total_nll == Catch::Approx(r.mean_nll * r.n_tokens));
  }
  SECTION("no additional contexts equals the pure decoder loss exactly") {
    const ModelParams params = init_model(cfg, 9);
    ModelParams baseline;
    baseline.decoder = params.decoder;
    std::vector<FormattedSample> batch = {fake_sample({5, 6, 7, 8, 9}, 3),
                                          fake_sample({6, 7, 8, 9, 10, 11}, 4)};
    CHECK(lm_loss(batch, params, cfg).mean_nll == lm_loss(batch, baseline, cfg).mean_nll);
  }
  SECTION("single sample matches a straight-line forward + log-sum-exp oracle") {
    const ModelParams params = init_model(cfg, 11);
    FormattedSample s = fake_sample({5, 6, 7, 8, 9, 10}, 4, {{6, 7}});
    const LossReport r = lm_loss({s}, params, cfg);

    // oracle: naive embedding -> layers -> final norm -> logits -> naive CE
    const std::vector<int> inputs(s.tokens.begin(), s.tokens.end() - 1);
    naive::Mat ctx_all = naive::encoder_forward(s.k_add_tokens[0], params.encoder, cfg);
    naive::Mat h_add = {ctx_all[0]};
    const naive::Mat emb = naive::from_tensor(params.decoder.tok_emb);
    const naive::Mat pos = naive::from_tensor(params.decoder.pos_emb);
    naive::Mat h(inputs.size());
    for (std::size_t t = 0; t < inputs.size(); ++t) {
      h[t] = emb[static_cast<std::size_t>(inputs[t])];
      for (std::size_t j = 0; j < h[t].size(); ++j) h[t][j] += pos[t][j];
    }
    for (std::size_t l = 0; l < params.decoder.layers.size(); ++l) {
      const naive::Mat h_kv =
          naive::matmul(h_add, naive::from_tensor(params.adapters.layers[l].projector));
      h = naive::decoder_layer(h, h_kv, params.decoder.layers[l], &params.adapters.layers[l], cfg);
    }
    h = naive::layer_norm(h, naive::vec_from_tensor(params.decoder.ln_final.gain),
                          naive::vec_from_tensor(params.decoder.ln_final.bias));
    naive::Mat logits = naive::add_bias(naive::matmul(h, naive::from_tensor(params.decoder.w_out)),
                                        naive::vec_from_tensor(params.decoder.b_out));
    double expect = 0.0;
    long n = 0;
    for (std::size_t t = 0; t + 1 < s.tokens.size(); ++t) {
      if (!s.loss_mask[t + 1]) continue;
      double denom = 0.0;
      for (double v : logits[t]) denom += std::exp(v);
      expect += std::log(denom) - logits[t][static_cast<std::size_t>(s.tokens[t + 1])];
      ++n;
    }
    expect /= static_cast<double>(n);
    CHECK(r.mean_nll == Catch::Approx(expect).margin(1e-9));
  }
  SECTION("a fully masked sample is rejected") {
    FormattedSample s = fake_sample({5, 6, 7}, 3);  // answer_from past the end
    const ModelParams params = init_model(cfg, 5);
    CHECK_THROWS_AS(lm_loss({s}, params, cfg), std::invalid_argument);
  }
}

TEST_CASE("train_step freeze contracts") {
  const ModelConfig cfg = tiny_config();
  TrainConfig tcfg;
  tcfg.peak_lr = 1e-2;
  tcfg.batch_size = 2;
  Rng rng(21);
  const auto data = fake_dataset(4, rng, cfg);
  const std::vector<FormattedSample> batch(data.begin(), data.begin() + 2);

  SECTION("frozen encoder: phi bytes never move, theta and pi do") {
    ModelParams params = init_model(cfg, 3);
    AdamW opt(params);
    FreezePolicy policy{FreezeStrategy::frozen_encoder, -1};
    const auto phi0 = group_hash(params, ParamGroup::encoder_phi);
    const auto theta0 = group_hash(params, ParamGroup::decoder_theta);
    const auto pi0 = group_hash(params, ParamGroup::adapter_pi);
    for (long s = 0; s < 5; ++s) train_step(batch, params, opt, policy, s, 100, tcfg, cfg);
    CHECK(group_hash(params, ParamGroup::encoder_phi) == phi0);
    CHECK(group_hash(params, ParamGroup::decoder_theta) != theta0);
    CHECK(group_hash(params, ParamGroup::adapter_pi) != pi0);
  }
  SECTION("delayed unfreeze: phi moves exactly at the unfreeze step") {
    ModelParams params = init_model(cfg, 3);
    AdamW opt(params);
    FreezePolicy policy{FreezeStrategy::delayed_unfreeze, 3};
    const auto phi0 = group_hash(params, ParamGroup::encoder_phi);
    for (long s = 0; s < 3; ++s) {
      train_step(batch, params, opt, policy, s, 100, tcfg, cfg);
      CHECK(group_hash(params, ParamGroup::encoder_phi) == phi0);
      CHECK(opt.steps_taken("enc.tok_emb") == 0);
      CHECK(opt.moment_magnitude("enc.tok_emb") == 0.0);
    }
    train_step(batch, params, opt, policy, 3, 100, tcfg, cfg);
    CHECK(group_hash(params, ParamGroup::encoder_phi) != phi0);
    CHECK(opt.steps_taken("enc.tok_emb") == 1);  // fresh bias correction at unfreeze
    CHECK(opt.moment_magnitude("enc.tok_emb") > 0.0);
  }
  SECTION("loss on a fixed batch decreases over 50 steps") {
    ModelParams params = init_model(cfg, 3);
    AdamW opt(params);
    FreezePolicy policy{FreezeStrategy::delayed_unfreeze, 10};
    double first = 0.0, last = 0.0;
    for (long s = 0; s < 50; ++s) {
      const LossReport r = train_step(batch, params, opt, policy, s, 50, tcfg, cfg);
      if (s == 0) first = r.mean_nll;
      last = r.mean_nll;
    }
    CHECK(last < first);
    CHECK(last < 0.8 * first);
  }
  SECTION("non-finite loss aborts the step") {
    ModelParams params = init_model(cfg, 3);
    params.decoder.w_out.data()[0] = std::numeric_limits<double>::quiet_NaN();
    AdamW opt(params);
    FreezePolicy policy{FreezeStrategy::frozen_encoder, -1};
    CHECK_THROWS_AS(train_step(batch, params, opt, policy, 0, 10, tcfg, cfg),
                    std::runtime_error);
  }
}

TEST_CASE("select_best_checkpoint") {
  SECTION("argmin dev loss") {
    CHECK(select_best_checkpoint({{10, 3.1}, {20, 2.7}, {30, 2.9}}) == 20);
  }
  SECTION("ties go to the earlier step") {
    CHECK(select_best_checkpoint({{10, 2.7}, {20, 2.7}}) == 10);
  }
  SECTION("single record wins by default") {
    CHECK(select_best_checkpoint({{5, 9.0}}) == 5);
  }
  SECTION("empty history throws") {
    CHECK_THROWS_AS(select_best_checkpoint({}), std::invalid_argument);
  }
}

TEST_CASE("training runs are deterministic and resumable") {
  namespace fs = std::filesystem;
  const ModelConfig cfg = tiny_config();
  Rng rng(31);
  const auto train_data = fake_dataset(6, rng, cfg);
  const auto dev_data = fake_dataset(3, rng, cfg);

  TrainerOptions base;
  base.model = cfg;
  base.train.peak_lr = 5e-3;
  base.train.batch_size = 2;
  base.train.max_epochs = 2;  // 3 steps per epoch -> 6 total
  base.train.eval_interval = 3;
  base.train.save_interval = 3;
  base.train.seed = 77;
  base.model_seed = 77;
  base.freeze = {FreezeStrategy::delayed_unfreeze, 3};

  SECTION("identical config and seed give identical trajectories and checkpoints") {
    TrainerOptions a = base;
    a.out_dir = "train_det_a";
    TrainerOptions b = base;
    b.out_dir = "train_det_b";
    const TrainResult ra = run_training(a, train_data, dev_data);
    const TrainResult rb = run_training(b, train_data, dev_data);
    CHECK(ra.best_step == rb.best_step);
    CHECK(group_hash(ra.params, ParamGroup::decoder_theta) ==
          group_hash(rb.params, ParamGroup::decoder_theta));
    CHECK(group_hash(ra.params, ParamGroup::encoder_phi) ==
          group_hash(rb.params, ParamGroup::encoder_phi));
    CHECK(group_hash(ra.params, ParamGroup::adapter_pi) ==
          group_hash(rb.params, ParamGroup::adapter_pi));
    std::ifstream la("train_det_a/log.jsonl"), lb("train_det_b/log.jsonl");
    std::string sa((std::istreambuf_iterator<char>(la)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(lb)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);
    CHECK_FALSE(sa.empty());
    fs::remove_all("train_det_a");
    fs::remove_all("train_det_b");
  }
  SECTION("resuming continues the uninterrupted trajectory exactly") {
    TrainerOptions full = base;
    full.out_dir = "train_full";
    const TrainResult rf = run_training(full, train_data, dev_data);

    TrainerOptions part1 = base;
    part1.out_dir = "train_part";
    part1.max_steps = 3;
    run_training(part1, train_data, dev_data);
    TrainerOptions part2 = base;
    part2.out_dir = "train_part";
    part2.resume_from = "train_part/step-3";
    const TrainResult rp = run_training(part2, train_data, dev_data);

    CHECK(group_hash(rf.params, ParamGroup::decoder_theta) ==
          group_hash(rp.params, ParamGroup::decoder_theta));
    CHECK(group_hash(rf.params, ParamGroup::encoder_phi) ==
          group_hash(rp.params, ParamGroup::encoder_phi));
    CHECK(group_hash(rf.params, ParamGroup::adapter_pi) ==
          group_hash(rp.params, ParamGroup::adapter_pi));
    fs::remove_all("train_full");
    fs::remove_all("train_part");
  }
}
