#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"
#include "kiest/trainer.hpp"

using namespace kiest;
using namespace kiest::fixtures;

namespace {

std::string params_bytes(const DkgedModel& m) { return encode_checkpoint(snapshot(m.params())); }

CoherenceClassifier toy_classifier(const ToyCorpus& toy) {
    ClassifierConfig c;
    c.d_model = 8;
    c.d_ff = 16;
    c.epochs = 1;
    std::vector<StateChange> pos;
    for (const auto& ex : toy.corpus.examples) pos.insert(pos.end(), ex.gold.begin(), ex.gold.end());
    CoherenceClassifier clf(toy.vocab.tokens(), c);
    train_classifier(clf, pos);
    return clf;
}

ModelConfig tiny_model(std::uint64_t seed) {
    ModelConfig mc;
    mc.d_model = 16;
    mc.d_ff = 32;
    mc.seed = seed;
    return mc;
}

}  // namespace

TEST(CombinedLoss, Examples) {
    const Tensor ce = Tensor::scalar(2.0), rl = Tensor::scalar(-0.5);
    EXPECT_EQ(combined_loss(ce, rl, 0.0).item(), 2.0);
    EXPECT_EQ(combined_loss(ce, rl, 1.0).item(), -0.5);
    EXPECT_NEAR(combined_loss(ce, rl, 0.1).item(), 1.75, 1e-15);
    EXPECT_THROW(combined_loss(ce, rl, 1.1), ConfigError);
    EXPECT_THROW(combined_loss(ce, rl, -0.1), ConfigError);
}

TEST(CombinedLoss, GradientIsTheConvexCombination) {
    Tensor a = Tensor::from({1, 1}, {0.3}, true), b = Tensor::from({1, 1}, {-1.2}, true);
    backward(combined_loss(sum(mul(a, a)), sum(mul(b, b)), 0.25));
    EXPECT_NEAR(a.grad()[0], 0.75 * 2 * 0.3, 1e-15);
    EXPECT_NEAR(b.grad()[0], 0.25 * 2 * -1.2, 1e-15);
}

TEST(TrainConfig, Validation) {
    TrainConfig c;
    EXPECT_NO_THROW(validate(c));
    c.lambda = 2;
    EXPECT_THROW(validate(c), ConfigError);
    c = {};
    c.lr_model = 0;
    EXPECT_THROW(validate(c), ConfigError);
    c = {};
    c.batch_model = 0;
    EXPECT_THROW(validate(c), ConfigError);
    const auto toy = toy_corpus(6, 1);
    DkgedModel m(toy.vocab, tiny_model(1), {});
    TrainConfig rl = desk_config(2);
    rl.rl_start_epoch = 1;
    EXPECT_THROW(Trainer(m, rl), ConfigError);
}

TEST(Trainer, EqualSeedsGiveIdenticalLogsAndWeights) {
    const auto toy = toy_corpus(12, 2);
    TrainConfig tc = desk_config(4, 2);
    tc.eval_train = true;
    std::string bytes[2];
    std::string logs[2];
    for (int r = 0; r < 2; ++r) {
        DkgedModel m(toy.vocab, tiny_model(2), {});
        const auto res = Trainer(m, tc).run(toy.train, {});
        bytes[r] = params_bytes(m);
        logs[r] = log_csv(res.state.log);
    }
    EXPECT_EQ(bytes[0], bytes[1]);
    EXPECT_EQ(logs[0], logs[1]);
    EXPECT_EQ(logs[0].substr(0, logs[0].find('\n')), kLogHeader);
}

TEST(Trainer, LambdaZeroMatchesPureCrossEntropy) {
    const auto toy = toy_corpus(8, 3);
    const auto clf = toy_classifier(toy);
    TrainConfig ce = desk_config(3, 3);
    TrainConfig mixed = ce;
    mixed.rl_start_epoch = 1;
    mixed.lambda = 0.0;
    DkgedModel a(toy.vocab, tiny_model(3), {}), b(toy.vocab, tiny_model(3), {});
    Trainer(a, ce).run(toy.train, {});
    Trainer(b, mixed, &clf).run(toy.train, {});
    EXPECT_EQ(params_bytes(a), params_bytes(b));
}

TEST(Trainer, RlPhaseChangesTheUpdateWhenLambdaIsPositive) {
    const auto toy = toy_corpus(8, 4);
    const auto clf = toy_classifier(toy);
    TrainConfig ce = desk_config(2, 4);
    TrainConfig mixed = ce;
    mixed.rl_start_epoch = 2;
    mixed.lambda = 0.5;
    DkgedModel a(toy.vocab, tiny_model(4), {}), b(toy.vocab, tiny_model(4), {});
    Trainer(a, ce).run(toy.train, {});
    Trainer(b, mixed, &clf).run(toy.train, {});
    EXPECT_NE(params_bytes(a), params_bytes(b));
}

TEST(Trainer, ResumeContinuesTheRunExactly) {
    const auto toy = toy_corpus(10, 5);
    TrainConfig tc = desk_config(6, 5);
    tc.eval_train = true;
    tc.eval_every = 2;
    DkgedModel full(toy.vocab, tiny_model(5), {});
    const auto whole = Trainer(full, tc).run(toy.train, {});

    TrainConfig first = tc;
    first.epochs = 4;
    DkgedModel part(toy.vocab, tiny_model(5), {});
    Trainer t1(part, first);
    t1.run(toy.train, {});
    const std::string state = t1.save_state();

    DkgedModel resumed(toy.vocab, tiny_model(99), {});
    Trainer t2(resumed, tc);
    t2.load_state(state);
    EXPECT_EQ(t2.state().epoch, 4u);
    const auto rest = t2.run(toy.train, {});
    EXPECT_EQ(params_bytes(resumed), params_bytes(full));
    ASSERT_EQ(rest.state.log.size(), whole.state.log.size());
    for (std::size_t i = 0; i < rest.state.log.size(); ++i) {
        EXPECT_EQ(rest.state.log[i].epoch, whole.state.log[i].epoch);
        if (i > 0) {
            EXPECT_GT(rest.state.log[i].epoch, rest.state.log[i - 1].epoch);
        }
    }
    EXPECT_EQ(rest.state.log.back().epoch, 6u);
    EXPECT_EQ(rest.state.best_epoch, whole.state.best_epoch);
    const auto a = decode_checkpoint(rest.state.best_checkpoint), b = decode_checkpoint(whole.state.best_checkpoint);
    ASSERT_EQ(a.records.size(), b.records.size());
    for (std::size_t i = 0; i < a.records.size(); ++i) EXPECT_EQ(a.records[i].values, b.records[i].values);
}

TEST(Trainer, ClippedNormNeverExceedsTheBound) {
    const auto toy = toy_corpus(12, 6);
    TrainConfig tc = desk_config(3, 6);
    tc.clip_norm = 0.05;
    tc.batch_model = 2;
    DkgedModel m(toy.vocab, tiny_model(6), {});
    const auto res = Trainer(m, tc).run(toy.train, {});
    ASSERT_FALSE(res.clipped_norms.empty());
    std::size_t at_bound = 0;
    for (double n : res.clipped_norms) {
        EXPECT_LE(n, tc.clip_norm + 1e-9);
        at_bound += std::abs(n - tc.clip_norm) < 1e-9;
    }
    EXPECT_GT(at_bound, 0u);
}

TEST(Trainer, NonFiniteLossAbortsWithTheBatch) {
    const auto toy = toy_corpus(6, 7);
    DkgedModel m(toy.vocab, tiny_model(7), {});
    Tensor out = m.output_weight();
    out.mutable_data()[0] = std::nan("");
    try {
        Trainer(m, desk_config(1, 7)).run(toy.train, {});
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("non-finite loss"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("syn-"), std::string::npos) << e.what();
    }
}

TEST(Trainer, BestDevCheckpointAndPatience) {
    const auto toy = toy_corpus(12, 8);
    TrainConfig tc = desk_config(40, 8);
    tc.lr_model = 1e-9;  // essentially frozen, so dev F1 never improves
    tc.patience = 3;
    const std::vector<PreparedExample> dev(toy.train.begin(), toy.train.begin() + 4);
    DkgedModel m(toy.vocab, tiny_model(8), {});
    const auto res = Trainer(m, tc).run(toy.train, dev);
    EXPECT_TRUE(res.stopped_early);
    EXPECT_EQ(res.state.best_epoch, 1u);
    EXPECT_EQ(res.state.epoch, 4u);
    EXPECT_FALSE(res.state.best_checkpoint.empty());
    for (const auto& r : res.state.log) EXPECT_EQ(r.split, "dev");
}

TEST(Trainer, TiedExactScoresFallBackToRougeL) {
    const auto toy = toy_corpus(12, 8);
    TrainConfig tc = desk_config(12, 8);
    tc.eval_every = 3;
    const std::vector<PreparedExample> dev(toy.train.begin(), toy.train.begin() + 4);
    DkgedModel m(toy.vocab, tiny_model(8), {});
    const auto res = Trainer(m, tc).run(toy.train, dev);
    double best_exact = -1, best_rouge = -1;
    std::size_t expect = 0;
    for (const auto& r : res.state.log)
        if (r.exact_f1 > best_exact || (r.exact_f1 == best_exact && r.rougeL_f1 > best_rouge)) {
            best_exact = r.exact_f1;
            best_rouge = r.rougeL_f1;
            expect = r.epoch;
        }
    EXPECT_EQ(res.state.best_epoch, expect);
    EXPECT_EQ(res.state.best_tiebreak, best_rouge);
}

TEST(Trainer, LogRowsRoundTrip) {
    const LogRow r{7, "dev", 0.25, 0.5, 0.125, 1.0 / 3.0};
    const LogRow back = Trainer::parse_log_row(log_row_csv(r));
    EXPECT_EQ(back.epoch, 7u);
    EXPECT_EQ(back.split, "dev");
    EXPECT_EQ(back.exact_f1, 0.25);
    EXPECT_NEAR(back.loss, 1.0 / 3.0, 1e-9);
    EXPECT_THROW(Trainer::parse_log_row("1,dev,0.5"), ParseError);
}

TEST(Overfit, FiftyExamplesReachExactMatch) {
    const auto run = overfit_run(11);
    EXPECT_TRUE(run.result.reached_target);
    EXPECT_GE(run.train_exact, 0.95);
    EXPECT_LE(run.result.state.epoch, 300u);
    EXPECT_LT(run.seconds, 600.0);
}

TEST(Overfit, LossFallsOverEveryTwentyEpochWindow) {
    const auto toy = toy_corpus(50, 12);
    ModelConfig mc;
    mc.seed = 12;
    DkgedModel m(toy.vocab, mc, {});
    const auto res = Trainer(m, desk_config(80, 12)).run(toy.train, {});
    const auto& L = res.train_losses;
    bool reached = false;
    for (std::size_t e = 0; e + 20 < L.size(); ++e) {
        if (L[e] < 0.05) {
            reached = true;
            break;
        }
        EXPECT_LT(L[e + 20], L[e]) << "epoch " << e + 1;
    }
    EXPECT_TRUE(reached);
}
