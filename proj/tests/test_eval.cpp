// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "vecrag/eval.hpp"

using namespace vecrag;

TEST_CASE("normalize_answer") {
  CHECK(normalize_answer("The Bank.") == "bank");
  CHECK(normalize_answer("Johannes Gutenberg") == "johannes gutenberg");
  CHECK(normalize_answer("  a  dog ") == "dog");
  CHECK(normalize_answer("An apple, a day!") == "apple day");
  CHECK(normalize_answer("") == "");
  CHECK(normalize_answer("THE THE THE") == "");
  SECTION("idempotence") {
    for (const std::string s : {"The Bank.", "a b c", "42nd Street", "  ", "O'Brien's cat"}) {
      CHECK(normalize_answer(normalize_answer(s)) == normalize_answer(s));
    }
  }
}

TEST_CASE("exact_match") {
  CHECK(exact_match("bank", {"1", "bank"}) == 1);
  CHECK(exact_match("1", {"1", "bank"}) == 1);
  CHECK(exact_match("river bank", {"bank"}) == 0);
  CHECK(exact_match("The Bank", {"bank!"}) == 1);
  SECTION("gold order does not matter") {
    CHECK(exact_match("bank", {"bank", "1"}) == exact_match("bank", {"1", "bank"}));
  }
  SECTION("no golds throws") {
    CHECK_THROWS_AS(exact_match("x", {}), std::invalid_argument);
  }
}

TEST_CASE("evaluate_dataset on predictors") {
  std::vector<QAExample> data;
  for (int i = 0; i < 5; ++i) {
    data.push_back({"e" + std::to_string(i), "q", {"gold" + std::to_string(i)}, {}});
  }
  SECTION("an oracle predictor scores 100") {
    const EMResult r =
        evaluate_dataset(data, [](const QAExample& ex, std::size_t) { return ex.answers[0]; });
    CHECK(r.em == 100.0);
    CHECK(r.n_exact == 5);
  }
  SECTION("an empty predictor scores 0 when no gold is empty") {
    const EMResult r = evaluate_dataset(data, [](const QAExample&, std::size_t) { return ""; });
    CHECK(r.em == 0.0);
  }
  SECTION("2 of 5 correct is 40 percent") {
    const EMResult r = evaluate_dataset(data, [](const QAExample& ex, std::size_t i) {
      return i < 2 ? ex.answers[0] : std::string("wrong");
    });
    CHECK(r.em == 40.0);
  }
  SECTION("empty dataset throws") {
    CHECK_THROWS_AS(
        evaluate_dataset({}, [](const QAExample&, std::size_t) { return ""; }),
        std::invalid_argument);
  }
  SECTION("deterministic across calls") {
    auto f = [](const QAExample& ex, std::size_t) { return ex.answers[0]; };
    CHECK(evaluate_dataset(data, f).em == evaluate_dataset(data, f).em);
  }
}

TEST_CASE("evaluate_dataset drives the model path") {
  ModelConfig cfg;
  cfg.vocab_size = CharTokenizer().vocab_size();
  cfg.d_dec = 8;
  cfg.d_enc = 4;
  cfg.n_layers_dec = 1;
  cfg.n_layers_enc = 1;
  cfg.n_heads = 2;
  cfg.max_seq_len = 128;
  cfg.max_ctx_vectors = 4;
  cfg.enc_max_len = 16;
  ModelParams params = init_model(cfg, 5);
  // force an immediate stop token: every prediction is the empty string
  params.decoder.w_out = Tensor(Shape{8, static_cast<std::size_t>(cfg.vocab_size)}, 0.0, true);
  params.decoder.b_out = Tensor(Shape{static_cast<std::size_t>(cfg.vocab_size)}, 0.0, true);
  params.decoder.b_out.data()[CharTokenizer::kEos] = 10.0;

  std::vector<QAExample> data = {{"e1", "what color", {"blue"}, {"ctx one", "ctx two"}},
                                 {"e2", "what shape", {"round"}, {"ctx three"}}};
  PipelineConfig pc;
  pc.setting = Setting::contexts_only;
  pc.add_count = 2;
  pc.max_seq_len = 128;
  pc.enc_max_len = 16;
  const EMResult r =
      evaluate_dataset(data, params, cfg, pc, PromptSet{}, CharTokenizer(), 8);
  CHECK(r.n_examples == 2);
  CHECK(r.em == 0.0);
}

TEST_CASE("bench timing reports") {
  ModelConfig cfg;
  cfg.vocab_size = 32;
  cfg.d_dec = 32;
  cfg.d_enc = 16;
  cfg.n_layers_dec = 2;
  cfg.n_layers_enc = 1;
  cfg.n_heads = 4;
  cfg.max_seq_len = 96;
  cfg.max_ctx_vectors = 4;
  cfg.enc_max_len = 16;
  const ModelParams params = init_model(cfg, 8);
  FormattedSample sample;
  sample.tokens.assign(48, 7);
  sample.loss_mask.assign(48, true);
  sample.loss_mask[0] = false;

  SECTION("report carries exactly five raw values and their exact mean") {
    const TimingReport r = bench_generate("baseline", sample, params, cfg, 16, 1);
    double sum = 0.0;
    for (double v : r.raw_s) {
      CHECK(v > 0.0);
      sum += v;
    }
    CHECK(r.mean_s == sum / 5.0);
    CHECK(r.raw_s.size() == 5);
    CHECK(r.phase == "generate");
  }
  SECTION("repeat runs on an idle machine agree within 20 percent") {
    const TimingReport a = bench_generate("baseline", sample, params, cfg, 16, 2);
    const TimingReport b = bench_generate("baseline", sample, params, cfg, 16, 2);
    CHECK(std::fabs(a.mean_s - b.mean_s) / std::max(a.mean_s, b.mean_s) < 0.2);
  }
  SECTION("train phase timing works end to end") {
    ModelParams m = init_model(cfg, 9);
    AdamW opt(m);
    TrainConfig tcfg;
    tcfg.peak_lr = 1e-3;
    FormattedSample s = sample;
    s.k_add_tokens = {{7, 8, 9}, {10, 11}};
    const TimingReport r = bench_train_step("+2vec", s, m, opt, cfg, tcfg, 1);
    CHECK(r.phase == "train");
    CHECK(r.mean_s > 0.0);
  }
}
