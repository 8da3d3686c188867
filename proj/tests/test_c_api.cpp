// Exercises the shared library only through its C header.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "da2net/c_api.h"
#include "doctest.h"
#include "json.hpp"

extern "C" int da2_c_header_status_ok(void);

namespace {

const char* kTiny =
    "[model]\nblock = \"basic\"\nwidths = [4, 8]\nblocks = [1, 1]\nnum_classes = 3\n"
    "[attention]\nfilters = [3, 5]\nalpha = 3\n";

struct Str {
    char* p = nullptr;
    ~Str() { da2_string_free(p); }
    nlohmann::json json() const { return nlohmann::json::parse(p); }
};

struct Net {
    da2_network* p = nullptr;
    ~Net() { da2_network_free(p); }
};

std::filesystem::path tmp(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("da2net_capi_" + name);
}

}  // namespace

TEST_CASE("version, status names, header compiles as C") {
    CHECK(std::string(da2_version()).size() > 0);
    CHECK(std::string(da2_status_name(DA2_ERR_CONFIG)) == "config error");
    CHECK(da2_c_header_status_ok() == 1);
}

TEST_CASE("network lifecycle: create, count, forward, toggle attention") {
    Net net;
    REQUIRE(da2_network_from_string(kTiny, nullptr, 0, &net.p) == DA2_OK);
    int64_t params = 0, classes = 0;
    CHECK(da2_network_param_count(net.p, &params) == DA2_OK);
    CHECK(params > 0);
    CHECK(da2_network_num_classes(net.p, &classes) == DA2_OK);
    CHECK(classes == 3);

    std::vector<float> x(2 * 3 * 8 * 8);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(i % 7) / 7.0f;
    std::vector<float> a(6), b(6), c(6);
    CHECK(da2_network_forward(net.p, x.data(), 2, 3, 8, 8, a.data(), a.size()) == DA2_OK);
    CHECK(da2_network_set_attention_enabled(net.p, 0) == DA2_OK);
    CHECK(da2_network_forward(net.p, x.data(), 2, 3, 8, 8, b.data(), b.size()) == DA2_OK);
    CHECK(a != b);
    CHECK(da2_network_set_attention_enabled(net.p, 1) == DA2_OK);
    CHECK(da2_network_forward(net.p, x.data(), 2, 3, 8, 8, c.data(), c.size()) == DA2_OK);
    CHECK(a == c);
}

TEST_CASE("errors map to status codes with a message") {
    Net net;
    CHECK(da2_network_from_string("[model]\nwidths = [4,\n", nullptr, 0, &net.p) == DA2_ERR_CONFIG);
    CHECK(net.p == nullptr);
    CHECK(std::string(da2_last_error()).find("<string>") != std::string::npos);
    const char* bad[] = {"attention.filters=[7,5]"};
    CHECK(da2_network_from_string(kTiny, bad, 1, &net.p) == DA2_ERR_CONFIG);
    CHECK(std::string(da2_last_error()).find("non-decreasing") != std::string::npos);
    CHECK(da2_network_create("no_such_preset", nullptr, 0, &net.p) == DA2_ERR_CONFIG);
    CHECK(da2_network_create(nullptr, nullptr, 0, &net.p) == DA2_ERR_ARGUMENT);

    REQUIRE(da2_network_from_string(kTiny, nullptr, 0, &net.p) == DA2_OK);
    std::vector<float> x(3 * 8 * 8), y(3);
    CHECK(da2_network_forward(net.p, x.data(), 1, 3, 8, 8, y.data(), 2) == DA2_ERR_ARGUMENT);
    std::vector<float> x4(4 * 8 * 8);
    CHECK(da2_network_forward(net.p, x4.data(), 1, 4, 8, 8, y.data(), 3) == DA2_ERR_SHAPE);
    CHECK(da2_network_load(net.p, "/nonexistent/file.da2c") == DA2_ERR_IO);
    CHECK(da2_network_param_count(nullptr, nullptr) == DA2_ERR_ARGUMENT);
}

TEST_CASE("save and load through the C interface") {
    const auto path = tmp("ckpt.da2c").string();
    Net a, b;
    const char* seed1[] = {"train.seed=1"};
    const char* seed2[] = {"train.seed=2"};
    REQUIRE(da2_network_from_string(kTiny, seed1, 1, &a.p) == DA2_OK);
    REQUIRE(da2_network_from_string(kTiny, seed2, 1, &b.p) == DA2_OK);
    std::vector<float> x(3 * 8 * 8, 0.3f), ya(3), yb(3);
    CHECK(da2_network_save(a.p, path.c_str()) == DA2_OK);
    CHECK(da2_network_load(b.p, path.c_str()) == DA2_OK);
    da2_network_forward(a.p, x.data(), 1, 3, 8, 8, ya.data(), 3);
    da2_network_forward(b.p, x.data(), 1, 3, 8, 8, yb.data(), 3);
    CHECK(ya == yb);

    // Corrupt one byte: format error, network unchanged.
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(30);
        f.put('\x7f');
    }
    CHECK(da2_network_load(b.p, path.c_str()) == DA2_ERR_FORMAT);
    da2_network_forward(b.p, x.data(), 1, 3, 8, 8, yb.data(), 3);
    CHECK(ya == yb);
    std::filesystem::remove(path);
}

TEST_CASE("analyze returns a table or JSON with deltas") {
    Str table, js;
    const char* with[] = {"attention.enabled=true"};
    CHECK(da2_analyze("micro", with, 1, "32x32", nullptr, 1, 0, &table.p) == DA2_OK);
    CHECK(std::string(table.p).find("attn0.l0.conv") != std::string::npos);
    CHECK(da2_analyze("micro", with, 1, "32x32", nullptr, 1, 1, &js.p) == DA2_OK);
    const auto j = js.json();
    CHECK(j.at("delta").at("params").get<int64_t>() > 0);
    Str bad;
    CHECK(da2_analyze("micro", nullptr, 0, "32", nullptr, 0, 0, &bad.p) == DA2_ERR_CONFIG);
}

TEST_CASE("gradcheck passes and its negative control fails") {
    Str ok, broken;
    CHECK(da2_gradcheck("sigmoid", 1, nullptr, &ok.p) == DA2_OK);
    CHECK(ok.json().at("pass").get<bool>());
    CHECK(da2_gradcheck("sigmoid", 1, "sigmoid", &broken.p) == DA2_ERR_CHECK);
    CHECK_FALSE(broken.json().at("pass").get<bool>());
    CHECK(std::string(da2_last_error()).find("sigmoid") != std::string::npos);
    // The hook is reset afterwards.
    Str again;
    CHECK(da2_gradcheck("sigmoid", 1, nullptr, &again.p) == DA2_OK);
}

TEST_CASE("bench reports throughput and the attention comparison") {
    Str r, cmp;
    const char* small[] = {"model.widths=[4,8,8]", "attention.enabled=true"};
    CHECK(da2_bench("micro", small, 2, 2, 2, 1, 1, 0, &r.p) == DA2_OK);
    CHECK(r.json().at("spread").is_null());
    CHECK(da2_bench("micro", small, 2, 2, 2, 2, 1, 1, &cmp.p) == DA2_OK);
    const auto j = cmp.json();
    CHECK(j.contains("latency_overhead"));
    CHECK(j.at("baseline").contains("throughput"));
    Str bad;
    CHECK(da2_bench("micro", nullptr, 0, 2, 2, 1, 1, 1, &bad.p) == DA2_ERR_CONFIG);
}

TEST_CASE("train writes the run directory and a JSON summary") {
    const auto dir = tmp("train");
    std::filesystem::remove_all(dir);
    const auto cfg = tmp("train.toml");
    {
        std::ofstream f(cfg);
        f << kTiny << "[train]\nepochs = 1\nbatch_size = 4\n[data]\nclasses = 3\nper_class = 4\neval_per_class = 2\n"
          << "[output]\ndir = \"" << dir.string() << "\"\n";
    }
    Str s;
    REQUIRE(da2_train(cfg.c_str(), nullptr, 0, &s.p) == DA2_OK);
    const auto j = s.json();
    CHECK(j.at("epochs").get<int>() == 1);
    for (const char* f : {"metrics.jsonl", "config.resolved.toml", "final.da2c", "best.da2c"}) {
        CAPTURE(f);
        CHECK(std::filesystem::exists(dir / f));
    }
    Str bad;
    const char* o[] = {"train.lr=-1"};
    CHECK(da2_train(cfg.c_str(), o, 1, &bad.p) == DA2_ERR_CONFIG);
    std::filesystem::remove_all(dir);
    std::filesystem::remove(cfg);
}
