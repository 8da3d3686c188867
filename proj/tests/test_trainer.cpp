#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "da2net/checkpoint.hpp"
#include "da2net/trainer.hpp"
#include "doctest.h"
#include "json.hpp"
#include "oracles.hpp"

using namespace da2;

namespace {

BackboneConfig tiny_backbone(bool attention) {
    BackboneConfig b;
    b.widths = {4, 8};
    b.blocks = {1, 1};
    b.num_classes = 2;
    if (attention) b.attention = AttentionBlockConfig::from_filters({3, 5}, 1, 3);
    return b;
}

TrainConfig quick_train(int epochs) {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = 8;
    t.lr = 0.05;
    t.lr_period = 5;
    return t;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("step schedule") {
    TrainConfig c;
    c.lr = 0.1;
    c.lr_decay = 10;
    c.lr_period = 60;
    CHECK(lr_schedule(0, c) == doctest::Approx(0.1));
    CHECK(lr_schedule(59, c) == doctest::Approx(0.1));
    CHECK(lr_schedule(60, c) == doctest::Approx(0.01));
    CHECK(lr_schedule(120, c) == doctest::Approx(0.001));
    c.lr_period = 30;
    CHECK(lr_schedule(29, c) == 0.1);
    CHECK(lr_schedule(30, c) == doctest::Approx(0.01));
    CHECK_THROWS_AS(lr_schedule(-1, c), ConfigError);
}

TEST_CASE("train config invariants") {
    auto bad = [](auto edit) {
        TrainConfig c;
        edit(c);
        CHECK_THROWS_AS(validate_train_config(c), ConfigError);
    };
    bad([](TrainConfig& c) { c.lr = -0.1; });
    bad([](TrainConfig& c) { c.momentum = 1.0; });
    bad([](TrainConfig& c) { c.lr_decay = 1.0; });
    bad([](TrainConfig& c) { c.batch_size = 1; });
    bad([](TrainConfig& c) { c.lr_period = 0; });
    CHECK_NOTHROW(validate_train_config(TrainConfig{}));
}

TEST_CASE("sgd update: plain descent, fixed point and the two-step closed form") {
    OptimState st;
    Tensor p({3}, std::vector<float>{1, 2, 3});
    const Tensor g({3}, std::vector<float>{0.5f, -1, 2});
    sgd_update("w", p, g, st, 0.1, 0.0, 0.0);
    for (int i = 0; i < 3; ++i) CHECK(p[i] == doctest::Approx(std::vector<float>{0.95f, 2.1f, 2.8f}[i]));

    OptimState st2;
    Tensor q({2}, std::vector<float>{1, -1});
    const Tensor before = q;
    for (int i = 0; i < 5; ++i) sgd_update("w", q, Tensor({2}), st2, 0.1, 0.9, 0.0);
    CHECK(q == before);

    // v1 = g, v2 = m g + g: displacement lr g (1 + 1 + m).
    OptimState st3;
    Tensor r({1}, 0.0f);
    const double lr = 0.05, m = 0.9, gv = 1.5;
    for (int i = 0; i < 2; ++i) sgd_update("w", r, Tensor({1}, static_cast<float>(gv)), st3, lr, m, 0.0);
    CHECK(-r[0] == doctest::Approx(lr * gv * (2 + m)).epsilon(1e-6));
    CHECK(st3.velocity.at("w").shape() == Shape{1});
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
    OptimState st;
    auto p = oracle::random<float>({4, 3}, 1);
    const auto before = p;
    for (int i = 0; i < 10; ++i) sgd_update("w", p, oracle::random<float>({4, 3}, 2 + i), st, 0.0, 0.9, 1e-4);
    CHECK(p == before);
}

TEST_CASE("weight decay alone contracts the norm monotonically") {
    OptimState st;
    auto p = oracle::random<float>({16}, 3);
    double prev = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 20; ++i) {
        sgd_update("w", p, Tensor({16}), st, 0.1, 0.0, 0.05);
        double norm = 0;
        for (float v : p.data()) norm += static_cast<double>(v) * v;
        CHECK(norm < prev);
        prev = norm;
    }
}

TEST_CASE("non-finite gradients abort with the parameter name") {
    OptimState st;
    Tensor p({2});
    Tensor g({2});
    g[1] = std::numeric_limits<float>::quiet_NaN();
    try {
        sgd_update("s1.b0.conv1.weight", p, g, st, 0.1, 0.9, 0.0);
        FAIL("expected numeric error");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("s1.b0.conv1.weight") != std::string::npos);
    }
    CHECK_THROWS_AS(sgd_update("w", p, Tensor({3}), st, 0.1, 0.9, 0.0), ShapeError);
}

TEST_CASE("zero epochs: empty metrics and a checkpoint equal to the initialization") {
    const auto dir = std::filesystem::temp_directory_path() / "da2net_test_zero_epochs";
    std::filesystem::remove_all(dir);
    auto net = Network<float>::build(describe_backbone(tiny_backbone(true)), 4);
    const auto init = network_state(net);
    const auto data = synth_dataset(2, 4, 5);
    const auto stats = compute_channel_stats(data);
    const auto result = train_loop(net, data, nullptr, quick_train(0), stats, {dir, {}});
    CHECK(result.metrics.empty());
    CHECK(slurp(dir / "metrics.jsonl").empty());
    CHECK(slurp(dir / "final.da2c") == std::string(reinterpret_cast<const char*>(serialize_checkpoint(init).data()),
                                                   serialize_checkpoint(init).size()));
    std::filesystem::remove_all(dir);
}

TEST_CASE("same seed, same curves, same checkpoint bytes") {
    const auto data = synth_dataset(2, 8, 6);
    const auto eval = synth_dataset(2, 4, 7);
    const auto stats = compute_channel_stats(data);
    std::string logs[2], ckpts[2];
    for (int run = 0; run < 2; ++run) {
        const auto dir = std::filesystem::temp_directory_path() / ("da2net_test_det" + std::to_string(run));
        std::filesystem::remove_all(dir);
        auto net = Network<float>::build(describe_backbone(tiny_backbone(true)), 8);
        const auto r = train_loop(net, data, &eval, quick_train(2), stats, {dir, {}});
        CHECK(r.metrics.size() == 2);
        logs[run] = slurp(dir / "metrics.jsonl");
        ckpts[run] = slurp(dir / "final.da2c");
        CHECK(std::filesystem::exists(dir / "best.da2c"));
        CHECK_FALSE(std::filesystem::exists(dir / "metrics.jsonl.partial"));
        std::filesystem::remove_all(dir);
    }
    CHECK_FALSE(logs[0].empty());
    CHECK(logs[0] == logs[1]);
    CHECK(ckpts[0] == ckpts[1]);
}

TEST_CASE("metrics lines carry the five keys, eval_acc null when not evaluated") {
    EpochMetrics m;
    m.epoch = 3;
    m.lr = 0.01;
    m.train_loss = 0.5;
    m.train_acc = 0.75;
    auto j = nlohmann::json::parse(metrics_to_json_line(m));
    for (const char* k : {"epoch", "lr", "train_loss", "train_acc", "eval_acc"}) CHECK(j.contains(k));
    CHECK(j.at("eval_acc").is_null());
    m.eval_acc = 0.5;
    j = nlohmann::json::parse(metrics_to_json_line(m));
    CHECK(j.at("eval_acc").get<double>() == 0.5);
}

TEST_CASE("on_epoch callback sees every epoch and eval respects the period") {
    const auto data = synth_dataset(2, 6, 9);
    const auto stats = compute_channel_stats(data);
    auto net = Network<float>::build(describe_backbone(tiny_backbone(false)), 10);
    auto cfg = quick_train(3);
    cfg.eval_period = 2;
    int seen = 0;
    const auto r = train_loop(net, data, &data, cfg, stats, {{}, [&](const EpochMetrics&) { ++seen; }});
    CHECK(seen == 3);
    CHECK(r.metrics[0].eval_acc.has_value() == false);
    CHECK(r.metrics[1].eval_acc.has_value());
    CHECK(r.metrics[2].eval_acc.has_value());  // always after the last epoch
}

TEST_CASE("a tiny network fits a two-class synthetic set") {
    // Learnability smoke test: low-frequency vs high-frequency gratings, no augmentation.
    const auto data = synth_dataset(2, 24, 11);
    const auto stats = compute_channel_stats(data);
    auto net = Network<float>::build(describe_backbone(tiny_backbone(false)), 12);
    auto cfg = quick_train(30);
    cfg.augment = false;
    cfg.batch_size = 4;
    cfg.lr_period = 15;
    const auto r = train_loop(net, data, &data, cfg, stats);
    CHECK(r.metrics.back().train_loss < r.metrics.front().train_loss);
    // The set carries distractor gratings, so a 4-8 channel net is not expected to be perfect.
    CHECK(*r.final_eval_acc > 0.8);
}
