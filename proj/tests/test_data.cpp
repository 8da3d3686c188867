#include <cmath>
#include <filesystem>
#include <map>

#include "da2net/data.hpp"
#include "doctest.h"

using namespace da2;

namespace {

std::vector<std::uint8_t> cifar_bytes(int records, std::uint64_t seed) {
    Rng rng(seed, 3);
    std::vector<std::uint8_t> b;
    for (int r = 0; r < records; ++r) {
        b.push_back(static_cast<std::uint8_t>(rng.below(20)));
        b.push_back(static_cast<std::uint8_t>(r % 100));
        for (int i = 0; i < 3072; ++i) b.push_back(static_cast<std::uint8_t>(rng.below(256)));
    }
    return b;
}

std::filesystem::path temp_dir(const std::string& name) {
    auto d = std::filesystem::temp_directory_path() / ("da2net_test_" + name);
    std::filesystem::remove_all(d);
    std::filesystem::create_directories(d);
    return d;
}

}  // namespace

TEST_CASE("cifar records decode planes, scale by 255 and keep order") {
    auto bytes = cifar_bytes(3, 1);
    // Record 1: every pixel byte 255.
    std::fill(bytes.begin() + 3074 + 2, bytes.begin() + 2 * 3074, 255);
    const auto ds = parse_cifar100(bytes);
    REQUIRE(ds.size() == 3);
    CHECK(ds.labels == std::vector<int>{0, 1, 2});
    for (std::int64_t i = 0; i < 3072; ++i) CHECK(ds.images[3072 + i] == 1.0f);
    // Record 2, channel G, row 5, column 7 is byte 2 + 1024 + 5*32 + 7 of the record.
    CHECK(ds.images.at(2, 1, 5, 7) == static_cast<float>(bytes[2 * 3074 + 2 + 1024 + 5 * 32 + 7]) / 255.0f);
}

TEST_CASE("cifar round-trip reproduces the bytes") {
    const auto bytes = cifar_bytes(7, 2);
    CHECK(serialize_cifar100(parse_cifar100(bytes)) == bytes);
}

TEST_CASE("cifar format errors") {
    auto bytes = cifar_bytes(2, 3);
    bytes.resize(3074 + 10);
    try {
        (void)parse_cifar100(bytes, "t.bin");
        FAIL("expected format error");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("offset 3074") != std::string::npos);
    }
    auto bad_label = cifar_bytes(1, 4);
    bad_label[1] = 100;
    CHECK_THROWS_AS(parse_cifar100(bad_label), FormatError);
    CHECK_THROWS_AS(parse_cifar100(std::vector<std::uint8_t>{}), FormatError);
    try {
        (void)load_cifar100("/nonexistent/dir");
        FAIL("expected io error");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("/nonexistent/dir/train.bin") != std::string::npos);
    }
}

TEST_CASE("cifar loader reads train and test files from a directory") {
    const auto dir = temp_dir("cifar");
    const auto train = cifar_bytes(200, 5), test = cifar_bytes(4, 6);
    write_file_bytes(dir / "train.bin", train);
    write_file_bytes(dir / "test.bin", test);
    const auto a = load_cifar100(dir, Split::Train);
    const auto b = load_cifar100(dir, Split::Test);
    CHECK(a.size() == 200);
    CHECK(b.size() == 4);
    std::map<int, int> counts;
    for (int l : a.labels) ++counts[l];
    CHECK(counts.size() == 100);
    for (const auto& [label, n] : counts) CHECK(n == 2);
    std::filesystem::remove_all(dir);
}

TEST_CASE("converted container round-trip and header checks") {
    Dataset ds = synth_dataset(3, 2, 7);
    // Quantize so the byte encoding is exact.
    for (auto& v : ds.images.data()) v = std::round(v * 255.0f) / 255.0f;
    const auto bytes = serialize_converted(ds);
    CHECK(bytes.size() == 16 + 6 * 3073);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "DA2D");
    const auto back = parse_converted(bytes);
    CHECK(back.classes == 3);
    CHECK(back.labels == ds.labels);
    CHECK(back.images == ds.images);
    auto truncated = bytes;
    truncated.pop_back();
    CHECK_THROWS_AS(parse_converted(truncated), FormatError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(parse_converted(bad_magic), FormatError);
    auto bad_label = bytes;
    bad_label[16] = 3;
    CHECK_THROWS_AS(parse_converted(bad_label), FormatError);
}

TEST_CASE("augmentation: identity crop, involutive flip, range and determinism") {
    const auto ds = synth_dataset(2, 1, 8);
    const auto img = ds.image(0);
    AugmentSpec spec;
    CHECK(augment_at(img, spec, 4, 4, false) == img);
    const auto once = augment_at(img, spec, 4, 4, true);
    CHECK_FALSE(once == img);
    CHECK(augment_at(once, spec, 4, 4, true) == img);

    // Shifted crop: row 0 col 0 of a crop at (0,0) is padding.
    const auto shifted = augment_at(img, spec, 0, 0, false);
    CHECK(shifted[0] == 0.0f);
    CHECK(shifted.at(0, 0, 0, 0) == 0.0f);
    CHECK(shifted[static_cast<std::size_t>(4 * 32 + 4)] == img[0]);

    Rng a(9, 1), b(9, 1);
    for (int i = 0; i < 20; ++i) {
        const auto x = augment(img, spec, a);
        CHECK(x == augment(img, spec, b));
        CHECK(x.shape() == img.shape());
        for (float v : x.data()) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
    CHECK_THROWS_AS(validate_augment_spec({4, 41, 0.5}, 32), ConfigError);
    CHECK_THROWS_AS(validate_augment_spec({-1, 32, 0.5}, 32), ConfigError);
}

TEST_CASE("normalization cases") {
    const auto ds = synth_dataset(2, 5, 10);
    const std::vector<double> zero{0, 0, 0}, one{1, 1, 1};
    CHECK(normalize(ds.images, zero, one) == ds.images);

    Tensor img({3, 2, 2});
    const std::vector<double> mean{0.25, 0.5, 0.75};
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 4; ++i) img[static_cast<std::size_t>(c * 4 + i)] = static_cast<float>(mean[c]);
    const auto centered = normalize(img, mean, one);
    for (float v : centered.data()) CHECK(v == 0.0f);

    const auto stats = compute_channel_stats(ds);
    const auto n = normalize(ds.images, stats.mean, stats.stddev);
    const auto N = n.dim(0), HW = n.dim(2) * n.dim(3);
    for (std::int64_t c = 0; c < 3; ++c) {
        double m = 0, q = 0;
        for (std::int64_t k = 0; k < N; ++k)
            for (std::int64_t i = 0; i < HW; ++i) m += n[static_cast<std::size_t>((k * 3 + c) * HW + i)];
        m /= static_cast<double>(N * HW);
        for (std::int64_t k = 0; k < N; ++k)
            for (std::int64_t i = 0; i < HW; ++i) q += std::pow(n[static_cast<std::size_t>((k * 3 + c) * HW + i)] - m, 2);
        CHECK(std::abs(m) < 1e-3);
        CHECK(std::sqrt(q / static_cast<double>(N * HW)) == doctest::Approx(1.0).epsilon(1e-3));
    }
    const std::vector<double> bad{1, 0, 1};
    CHECK_THROWS_AS(normalize(img, mean, bad), ConfigError);
}

TEST_CASE("synthetic dataset: counts, determinism, range") {
    const auto ds = synth_dataset(2, 10, 11);
    CHECK(ds.size() == 20);
    std::map<int, int> counts;
    for (int l : ds.labels) ++counts[l];
    CHECK(counts[0] == 10);
    CHECK(counts[1] == 10);
    CHECK(synth_dataset(2, 10, 11).images == ds.images);
    CHECK_FALSE(synth_dataset(2, 10, 12).images == ds.images);
    for (float v : ds.images.data()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    CHECK_THROWS_AS(synth_dataset(1, 10, 0), ConfigError);
    CHECK_THROWS_AS(synth_dataset(2, 0, 0), ConfigError);
}

TEST_CASE("synthetic classes differ in spatial frequency") {
    // Mean absolute horizontal+vertical gradient grows with the class index.
    const auto ds = synth_dataset(4, 40, 13);
    std::vector<double> energy(4, 0.0);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        double e = 0;
        for (std::int64_t c = 0; c < 3; ++c)
            for (std::int64_t y = 0; y < 31; ++y)
                for (std::int64_t x = 0; x < 31; ++x) {
                    const auto base = ds.images.at(static_cast<std::int64_t>(i), c, y, x);
                    e += std::abs(ds.images.at(static_cast<std::int64_t>(i), c, y, x + 1) - base) +
                         std::abs(ds.images.at(static_cast<std::int64_t>(i), c, y + 1, x) - base);
                }
        energy[static_cast<std::size_t>(ds.labels[i])] += e;
    }
    for (int k = 1; k < 4; ++k) CHECK(energy[static_cast<std::size_t>(k)] > energy[static_cast<std::size_t>(k - 1)]);
}
