#include <cmath>
#include <set>

#include "da2net/analyzer.hpp"
#include "da2net/backbone.hpp"
#include "da2net/gradcheck.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace da2;

namespace {

BackboneConfig micro(BlockKind kind = BlockKind::Basic) {
    BackboneConfig b;
    b.widths = {16, 32, 64};
    b.blocks = {1, 1, 1};
    b.block = kind;
    b.num_classes = 10;
    return b;
}

std::int64_t learnable_floats(Network<float>& net) {
    std::int64_t n = 0;
    net.visit_parameters([&](const std::string&, Tensor& t) { n += static_cast<std::int64_t>(t.size()); });
    return n;
}

}  // namespace

TEST_CASE("micro backbone produces (N, classes) logits") {
    auto net = Network<float>::build(describe_backbone(micro()), 1);
    const auto y = net.predict(oracle::random<float>({2, 3, 32, 32}, 1));
    CHECK(y.shape() == Shape{2, 10});
}

TEST_CASE("one insertion point per stage, at the stage's first block") {
    const auto spec = describe_backbone(micro());
    CHECK(spec.insertion_points == std::vector<std::string>{"s0.b0", "s1.b0", "s2.b0"});

    auto deeper = micro();
    deeper.blocks = {2, 3, 2};
    const auto ds = describe_backbone(deeper);
    REQUIRE(ds.insertion_points.size() == 3);
    // Later stage transitions are exactly where the spatial extent halves.
    const auto shapes = propagate_shapes(ds, {1, 3, 32, 32});
    for (std::size_t i = 1; i < ds.units.size(); ++i) {
        const bool halves = shapes[i].size() == 4 && shapes[i][2] * 2 == shapes[i - 1][2];
        const bool registered =
            std::find(ds.insertion_points.begin(), ds.insertion_points.end(), ds.units[i].name) != ds.insertion_points.end();
        if (halves) CHECK(registered);
        if (registered && ds.units[i].name != "s0.b0") CHECK(halves);
    }
}

TEST_CASE("parameter count of the plain config equals the analyzer's sum") {
    for (auto kind : {BlockKind::Plain, BlockKind::Basic, BlockKind::Bottleneck}) {
        const auto spec = describe_backbone(micro(kind));
        auto net = Network<float>::build(spec, 2);
        CHECK(learnable_floats(net) == count_params(spec).params);
        CHECK(net.parameter_count() == count_params(spec).params);
    }
    // Closed form for the plain network: stem, 2 conv-bn per block, head.
    const std::int64_t widths[3] = {16, 32, 64};
    std::int64_t expect = 27 * 16 + 2 * 16;
    std::int64_t in = 16;
    for (auto w : widths) {
        expect += 9 * in * w + 2 * w + 9 * w * w + 2 * w;
        in = w;
    }
    expect += 64 * 10 + 10;
    CHECK(count_params(describe_backbone(micro(BlockKind::Plain))).params == expect);
}

TEST_CASE("inserting attention adds the closed-form block parameters and keeps shapes") {
    auto cfg = micro();
    const auto base = describe_backbone(cfg);
    cfg.attention = AttentionBlockConfig::defaults();
    const auto with = describe_backbone(cfg);
    CHECK(with.attention_count() == 3);
    auto nb = Network<float>::build(base, 3);
    auto na = Network<float>::build(with, 3);
    const std::int64_t expect = attention_block_param_count(*cfg.attention, 16) +
                                attention_block_param_count(*cfg.attention, 32) +
                                attention_block_param_count(*cfg.attention, 64);
    CHECK(na.parameter_count() - nb.parameter_count() == expect);

    const auto x = oracle::random<float>({2, 3, 32, 32}, 4);
    CHECK(na.predict(x).shape() == nb.predict(x).shape());
    const auto sb = propagate_shapes(base, {2, 3, 32, 32});
    const auto sa = propagate_shapes(with, {2, 3, 32, 32});
    CHECK(sa.back() == sb.back());

    std::set<std::string> names;
    for (const auto& n : na.parameter_names()) CHECK(names.insert(n).second);
    CHECK(names.count("attn0.l0.omega") == 1);
    CHECK(names.count("attn2.l2.conv.weight") == 1);
}

TEST_CASE("insertion by index and its errors") {
    const auto base = describe_backbone(micro());
    const auto one = insert_attention(base, AttentionBlockConfig::defaults(), InsertionPolicy::at({1}));
    CHECK(one.attention_count() == 1);
    CHECK_THROWS_AS(insert_attention(base, AttentionBlockConfig::defaults(), InsertionPolicy::at({3})), ConfigError);
    CHECK_THROWS_AS(insert_attention(base, AttentionBlockConfig::defaults(), InsertionPolicy::at({-1})), ConfigError);
    CHECK_THROWS_AS(insert_attention(base, AttentionBlockConfig::defaults(), InsertionPolicy::at({0, 0})),
                    ConfigError);
    CHECK_THROWS_AS(insert_attention(one, AttentionBlockConfig::defaults(), InsertionPolicy::at({1})), ConfigError);
    CHECK(strip_attention(one).units.size() == base.units.size());
}

TEST_CASE("config errors for mismatched stage lists") {
    auto bad = micro();
    bad.blocks = {1, 1};
    CHECK_THROWS_AS(describe_backbone(bad), ConfigError);
    auto zero = micro();
    zero.num_classes = 0;
    CHECK_THROWS_AS(describe_backbone(zero), ConfigError);
}

TEST_CASE("zero classifier gives uniform logits and ln K loss") {
    auto net = Network<float>::build(describe_backbone(micro()), 5);
    net.visit_parameters([](const std::string& n, Tensor& t) {
        if (n.rfind("head.", 0) == 0) std::fill(t.data().begin(), t.data().end(), 0.0f);
    });
    const auto logits = net.predict(oracle::random<float>({3, 3, 32, 32}, 6));
    for (float v : logits.data()) CHECK(v == 0.0f);
    std::vector<int> labels{0, 4, 9};
    CHECK(softmax_cross_entropy(logits, labels).loss == doctest::Approx(std::log(10.0)));
}

TEST_CASE("eval forward is deterministic and rejects wrong channel counts") {
    auto cfg = micro();
    cfg.attention = AttentionBlockConfig::defaults();
    auto net = Network<float>::build(describe_backbone(cfg), 7);
    const auto x = oracle::random<float>({2, 3, 32, 32}, 8);
    CHECK(net.predict(x) == net.predict(x));
    CHECK_THROWS_AS(net.predict(Tensor({1, 4, 32, 32})), ShapeError);
}

TEST_CASE("disabling attention reproduces the baseline bit-exactly") {
    auto cfg = micro();
    const auto base_spec = describe_backbone(cfg);
    cfg.attention = AttentionBlockConfig::defaults();
    auto with = Network<float>::build(describe_backbone(cfg), 9);
    auto base = Network<float>::build(base_spec, 9);
    const auto x = oracle::random<float>({2, 3, 32, 32}, 10);
    CHECK_FALSE(with.predict(x) == base.predict(x));
    with.set_attention_enabled(false);
    CHECK(with.predict(x) == base.predict(x));
}

TEST_CASE("full network gradient check on a (1,3,8,8) input") {
    BackboneConfig b;
    b.widths = {4, 8};
    b.blocks = {1, 1};
    b.num_classes = 3;
    b.attention = AttentionBlockConfig::from_filters({3, 5}, 1, 3);
    auto net = Network<double>::build(describe_backbone(b), 11, 8);
    auto x = oracle::random<double>({1, 3, 8, 8}, 12);
    GradLeaves leaves{{"input", &x}};
    net.visit_parameters([&](const std::string& n, Tensor64& t) { leaves.emplace_back(n, &t); });
    const auto entries = check_gradients("full-n1", leaves, [&](Tape<double>& t) {
        return softmax_cross_entropy(t, net.forward(t, t.parameter("input", x), Mode::Train), std::vector<int>{2});
    });
    CHECK(entries.size() == leaves.size());
    for (const auto& e : entries) {
        CAPTURE(e.group);
        CHECK(e.max_rel_err < 1e-4);
    }
}
