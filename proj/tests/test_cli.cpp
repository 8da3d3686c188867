// Runs the command-line binary as a subprocess and checks exit codes and outputs.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out;
};

Run run(const std::string& args) {
    const std::string cmd = std::string(DA2NET_CLI) + " " + args + " 2>/dev/null";
    FILE* p = popen(cmd.c_str(), "r");
    REQUIRE(p != nullptr);
    std::string out;
    std::array<char, 4096> buf;
    while (const auto n = fread(buf.data(), 1, buf.size(), p)) out.append(buf.data(), n);
    const int status = pclose(p);
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path write_config(const std::string& name, const fs::path& out_dir) {
    const auto path = fs::temp_directory_path() / ("da2net_cli_" + name + ".toml");
    std::ofstream f(path);
    f << "[model]\nblock = \"basic\"\nwidths = [4, 8]\nblocks = [1, 1]\nnum_classes = 2\n"
      << "[attention]\nfilters = [3, 5]\nalpha = 3\n"
      << "[train]\nepochs = 2\nbatch_size = 4\nlr = 0.05\n"
      << "[data]\nclasses = 2\nper_class = 6\neval_per_class = 2\n"
      << "[output]\ndir = \"" << out_dir.string() << "\"\n";
    return path;
}

}  // namespace

TEST_CASE("train: metrics per epoch, resolved config, identical reruns") {
    const auto d1 = fs::temp_directory_path() / "da2net_cli_run1";
    const auto d2 = fs::temp_directory_path() / "da2net_cli_run2";
    fs::remove_all(d1);
    fs::remove_all(d2);
    const auto cfg = write_config("train", d1);
    const auto r1 = run("train --config " + cfg.string());
    REQUIRE(r1.code == 0);
    CHECK(nlohmann::json::parse(r1.out).at("epochs").get<int>() == 2);
    const auto r2 = run("train --config " + cfg.string() + " --set output.dir=" + d2.string());
    REQUIRE(r2.code == 0);
    const auto m1 = slurp(d1 / "metrics.jsonl");
    CHECK(std::count(m1.begin(), m1.end(), '\n') == 2);
    CHECK(m1 == slurp(d2 / "metrics.jsonl"));
    CHECK(slurp(d1 / "final.da2c") == slurp(d2 / "final.da2c"));
    // The override is persisted in the resolved config.
    CHECK(slurp(d2 / "config.resolved.toml").find(d2.string()) != std::string::npos);
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST_CASE("train with zero epochs writes the initial weights") {
    const auto d = fs::temp_directory_path() / "da2net_cli_zero";
    fs::remove_all(d);
    const auto cfg = write_config("zero", d);
    REQUIRE(run("train --config " + cfg.string() + " --set train.epochs=0").code == 0);
    CHECK(slurp(d / "metrics.jsonl").empty());
    CHECK(fs::exists(d / "final.da2c"));
    fs::remove_all(d);
}

TEST_CASE("exit codes: config errors are 2, usage errors are 2") {
    const auto d = fs::temp_directory_path() / "da2net_cli_bad";
    const auto cfg = write_config("bad", d);
    CHECK(run("train --config " + cfg.string() + " --set attention.alpha=8").code == 2);
    CHECK(run("train --config " + cfg.string() + " --set train.nonsense=1").code == 2);
    CHECK(run("train --config /nonexistent.toml").code == 2);
    CHECK(run("frobnicate").code == 2);
    CHECK(run("analyze --arch nope").code == 2);
    CHECK_FALSE(fs::exists(d / "final.da2c"));
}

TEST_CASE("gradcheck: pass is 0, corrupted op is 1") {
    CHECK(run("gradcheck --scope conv1d").code == 0);
    const auto bad = run("gradcheck --scope conv1d --corrupt conv1d");
    CHECK(bad.code == 1);
    CHECK(bad.out.find("conv1d") != std::string::npos);
    CHECK(run("gradcheck --scope nope").code == 2);
}

TEST_CASE("analyze: resnet-50 baseline and the attention delta as JSON") {
    const auto base = run("analyze --arch resnet50_cifar --json");
    REQUIRE(base.code == 0);
    const auto b = nlohmann::json::parse(base.out);
    CHECK(b.at("params").get<double>() / 1e6 == doctest::Approx(23.71).epsilon(0.1));
    const auto att = run("analyze --arch resnet50_cifar --attention 3,5,7 --g 1 --alpha 9 --json");
    REQUIRE(att.code == 0);
    const auto a = nlohmann::json::parse(att.out);
    CHECK(a.at("delta").at("params").get<double>() / 1e6 == doctest::Approx(0.34).epsilon(0.1));
    const auto g16 = nlohmann::json::parse(run("analyze --arch resnet50_cifar --attention 3,5,7 --g 16 --json").out);
    CHECK(g16.at("delta").at("params").get<std::int64_t>() > a.at("delta").at("params").get<std::int64_t>());
    CHECK(run("analyze --arch micro").out.find("params") != std::string::npos);
}

TEST_CASE("bench: JSON with null spread for one repeat, comparison mode") {
    const auto r = run("bench --arch micro --set 'model.widths=[4,8,8]' --batch 2 --batches 2 --repeats 1 --warmup 1");
    REQUIRE(r.code == 0);
    const auto j = nlohmann::json::parse(r.out);
    CHECK(j.at("spread").is_null());
    CHECK(j.at("throughput").get<double>() > 0);
    const auto c = run(
        "bench --arch micro --set 'model.widths=[4,8,8]' --set attention.enabled=true --batch 2 --batches 2 --repeats 2 "
        "--warmup 1 --compare");
    REQUIRE(c.code == 0);
    CHECK(nlohmann::json::parse(c.out).contains("latency_overhead"));
}
