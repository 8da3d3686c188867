#include <cstring>
#include <filesystem>

#include "da2net/checkpoint.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace da2;

namespace {

// Independent FNV-1a 64, used to re-seal edited files.
std::uint64_t fnv(const std::vector<std::uint8_t>& b, std::size_t n) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 0x100000001B3ull;
    }
    return h;
}

void reseal(std::vector<std::uint8_t>& b) {
    const auto h = fnv(b, b.size() - 8);
    for (int i = 0; i < 8; ++i) b[b.size() - 8 + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(h >> (8 * i));
}

Network<float> small_net(std::uint64_t seed) {
    BackboneConfig b;
    b.widths = {4, 8};
    b.blocks = {1, 1};
    b.num_classes = 3;
    b.attention = AttentionBlockConfig::from_filters({3, 5}, 2, 3);
    return Network<float>::build(describe_backbone(b), seed);
}

}  // namespace

TEST_CASE("byte layout: magic, version, count, records, checksum") {
    NamedTensors t{{"ab", Tensor({2}, std::vector<float>{1.0f, -2.0f})}};
    const auto b = serialize_checkpoint(t);
    // 4 magic + 4 version + 4 count + (2 + 2 name + 4 rank + 4 extent + 8 payload) + 8 checksum
    REQUIRE(b.size() == 4 + 4 + 4 + 2 + 2 + 4 + 4 + 8 + 8);
    CHECK(std::memcmp(b.data(), "DA2C", 4) == 0);
    CHECK(b[4] == 1);
    CHECK(b[8] == 1);
    CHECK(b[12] == 2);
    CHECK(b[14] == 'a');
    float v;
    std::memcpy(&v, b.data() + 4 + 4 + 4 + 2 + 2 + 4 + 4 + 4, 4);
    CHECK(v == -2.0f);
    std::uint64_t stored;
    std::memcpy(&stored, b.data() + b.size() - 8, 8);
    CHECK(stored == fnv(b, b.size() - 8));
    const auto back = parse_checkpoint(b);
    REQUIRE(back.size() == 1);
    CHECK(back[0].first == "ab");
    CHECK(back[0].second == t[0].second);
}

TEST_CASE("save, load, eval gives bit-identical logits") {
    const auto path = std::filesystem::temp_directory_path() / "da2net_test_roundtrip.da2c";
    auto a = small_net(1);
    // Perturb running statistics so buffers matter.
    a.visit_buffers([](const std::string&, Tensor& t) {
        for (auto& v : t.data()) v += 0.25f;
    });
    save_checkpoint(a, path);
    auto b = small_net(2);
    const auto x = oracle::random<float>({2, 3, 16, 16}, 3);
    CHECK_FALSE(a.predict(x) == b.predict(x));
    load_checkpoint(b, path);
    CHECK(a.predict(x) == b.predict(x));
    std::filesystem::remove(path);
}

TEST_CASE("corruption is detected") {
    auto net = small_net(4);
    const auto good = serialize_checkpoint(network_state(net));
    auto flipped = good;
    flipped[40] ^= 0x01;
    CHECK_THROWS_WITH_AS(parse_checkpoint(flipped), doctest::Contains("checksum"), FormatError);

    auto truncated = good;
    truncated.erase(truncated.end() - 20, truncated.end() - 8);
    reseal(truncated);
    CHECK_THROWS_WITH_AS(parse_checkpoint(truncated), doctest::Contains("truncated"), FormatError);

    auto trailing = good;
    trailing.insert(trailing.end() - 8, {0, 0, 0});
    reseal(trailing);
    CHECK_THROWS_WITH_AS(parse_checkpoint(trailing), doctest::Contains("trailing"), FormatError);

    auto magic = good;
    magic[0] = 'X';
    CHECK_THROWS_AS(parse_checkpoint(magic), FormatError);

    auto version = good;
    version[4] = 9;
    reseal(version);
    CHECK_THROWS_WITH_AS(parse_checkpoint(version), doctest::Contains("version"), FormatError);
}

TEST_CASE("restoring into a different architecture fails and leaves the network untouched") {
    auto net = small_net(5);
    BackboneConfig other;
    other.widths = {4, 8};
    other.blocks = {1, 1};
    other.num_classes = 3;
    auto plain = Network<float>::build(describe_backbone(other), 5);
    const auto x = oracle::random<float>({1, 3, 8, 8}, 6);
    const auto before = plain.predict(x);
    CHECK_THROWS_AS(restore_network_state(plain, network_state(net)), FormatError);
    CHECK(plain.predict(x) == before);
    CHECK_THROWS_AS(load_checkpoint(plain, "/nonexistent/x.da2c"), IoError);
}
