#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

const std::string kCli = TERNQ_CLI_PATH;
const fs::path kTmp = fs::path(TERNQ_TEST_TMP) / "cli";

struct RunResult {
    int exit_code;
    std::string output;
};

RunResult run_cli(const std::string& args) {
    const fs::path out_file = kTmp / "last_output.txt";
    const std::string cmd = "cd " + kTmp.string() + " && " + kCli + " " + args + " > " +
                            out_file.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(out_file);
    r.output.assign((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return r;
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream out(p);
    REQUIRE(out.good());
    out << text;
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::vector<char>((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
}

const char* kSmokeConfig = R"({
  "net": {"levels": 2, "base_channels": 4, "num_classes": 3, "scheme": "3dq"},
  "train": {"iterations": 20, "patch_size": 8, "batch_size": 2,
            "learning_rate": 0.001, "seed": 5},
  "data": {"volumes": 4, "volume_size": 16, "noise_sigma": 0.08, "seed": 3},
  "output": {"checkpoint": "smoke", "metrics": "smoke_metrics.csv"}
})";

}  // namespace

TEST_CASE("cli setup") { fs::create_directories(kTmp); }

TEST_CASE("missing config file fails without producing outputs") {
    fs::create_directories(kTmp);
    auto r = run_cli("train --config does_not_exist.json --out ghost");
    CHECK(r.exit_code == 1);
    CHECK(r.output.find("error") != std::string::npos);
    CHECK_FALSE(fs::exists(kTmp / "ghost.tqck"));
}

TEST_CASE("unknown config keys are rejected") {
    fs::create_directories(kTmp);
    write_file(kTmp / "bad.json", R"({"net": {"levls": 3}})");
    auto r = run_cli("train --config bad.json");
    CHECK(r.exit_code == 1);
    CHECK(r.output.find("levls") != std::string::npos);
}

TEST_CASE("smoke training run completes and is deterministic") {
    fs::create_directories(kTmp);
    write_file(kTmp / "smoke.json", kSmokeConfig);

    auto r1 = run_cli("train --config smoke.json");
    REQUIRE(r1.exit_code == 0);
    REQUIRE(fs::exists(kTmp / "smoke.tqck"));
    REQUIRE(fs::exists(kTmp / "smoke.3dqp"));
    REQUIRE(fs::exists(kTmp / "smoke_metrics.csv"));

    auto ck1 = slurp(kTmp / "smoke.tqck");
    auto packed1 = slurp(kTmp / "smoke.3dqp");
    auto csv1 = slurp(kTmp / "smoke_metrics.csv");

    auto r2 = run_cli("train --config smoke.json");
    REQUIRE(r2.exit_code == 0);
    CHECK(slurp(kTmp / "smoke.tqck") == ck1);
    CHECK(slurp(kTmp / "smoke.3dqp") == packed1);
    CHECK(slurp(kTmp / "smoke_metrics.csv") == csv1);

    // a different seed changes the checkpoint
    auto r3 = run_cli("train --config smoke.json --seed 99 --out smoke_alt");
    REQUIRE(r3.exit_code == 0);
    CHECK(slurp(kTmp / "smoke_alt.tqck") != ck1);
}

TEST_CASE("eval prints per-class dice and writes the CSV") {
    fs::create_directories(kTmp);
    write_file(kTmp / "smoke.json", kSmokeConfig);
    REQUIRE(run_cli("train --config smoke.json").exit_code == 0);

    auto r = run_cli("eval --model smoke.tqck --config smoke.json --out eval.csv");
    REQUIRE(r.exit_code == 0);
    CHECK(r.output.find("class 0 dice") != std::string::npos);
    CHECK(r.output.find("mean foreground dice") != std::string::npos);
    auto csv = slurp(kTmp / "eval.csv");
    CHECK(std::string(csv.begin(), csv.end()).find("class,dice") != std::string::npos);
}

TEST_CASE("eval rejects class-count mismatches") {
    fs::create_directories(kTmp);
    write_file(kTmp / "smoke.json", kSmokeConfig);
    REQUIRE(run_cli("train --config smoke.json").exit_code == 0);
    std::string other = kSmokeConfig;
    const auto pos = other.find("\"num_classes\": 3");
    REQUIRE(pos != std::string::npos);
    other.replace(pos, 16, "\"num_classes\": 4");
    write_file(kTmp / "other.json", other);
    auto r = run_cli("eval --model smoke.tqck --config other.json");
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("class count mismatch") != std::string::npos);
}

TEST_CASE("pack, unpack and report round trip") {
    fs::create_directories(kTmp);
    write_file(kTmp / "smoke.json", kSmokeConfig);
    REQUIRE(run_cli("train --config smoke.json").exit_code == 0);

    auto p1 = run_cli("pack --model smoke.tqck --out repacked.3dqp");
    REQUIRE(p1.exit_code == 0);
    // train already packed the same model; pack must reproduce it bit-exactly
    CHECK(slurp(kTmp / "repacked.3dqp") == slurp(kTmp / "smoke.3dqp"));

    auto u = run_cli("unpack --model repacked.3dqp --out unpacked.tqck");
    REQUIRE(u.exit_code == 0);
    auto p2 = run_cli("pack --model unpacked.tqck --out repacked2.3dqp");
    REQUIRE(p2.exit_code == 0);
    CHECK(slurp(kTmp / "repacked2.3dqp") == slurp(kTmp / "repacked.3dqp"));

    auto rep = run_cli("report --model smoke.3dqp --out report.csv");
    REQUIRE(rep.exit_code == 0);
    CHECK(rep.output.find("compression ratio") != std::string::npos);
    CHECK(fs::exists(kTmp / "report.csv"));

    // the printed packed size matches the report's packed size
    const std::string needle = "(";
    const auto paren = p1.output.find(needle);
    REQUIRE(paren != std::string::npos);
    const long long printed = std::atoll(p1.output.c_str() + paren + 1);
    const auto packed_size = static_cast<long long>(fs::file_size(kTmp / "repacked.3dqp"));
    CHECK(printed == packed_size);
    const std::string rep_text = rep.output;
    CHECK(rep_text.find("total packed bytes: " + std::to_string(packed_size)) !=
          std::string::npos);
}

TEST_CASE("corrupt packed input is reported with a distinct exit code") {
    fs::create_directories(kTmp);
    write_file(kTmp / "smoke.json", kSmokeConfig);
    REQUIRE(run_cli("train --config smoke.json").exit_code == 0);
    auto bytes = slurp(kTmp / "smoke.3dqp");
    bytes[bytes.size() / 2] ^= 0x20;
    {
        std::ofstream out(kTmp / "corrupt.3dqp", std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    auto r = run_cli("unpack --model corrupt.3dqp --out nothing.tqck");
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("CRC") != std::string::npos);
}

TEST_CASE("report on a FULL checkpoint shows ratio 1.0") {
    fs::create_directories(kTmp);
    std::string full_cfg = kSmokeConfig;
    const auto pos = full_cfg.find("\"3dq\"");
    REQUIRE(pos != std::string::npos);
    full_cfg.replace(pos, 5, "\"full\"");
    const auto opos = full_cfg.find("\"checkpoint\": \"smoke\"");
    REQUIRE(opos != std::string::npos);
    full_cfg.replace(opos, 21, "\"checkpoint\": \"fullm\"");
    write_file(kTmp / "full.json", full_cfg);
    REQUIRE(run_cli("train --config full.json").exit_code == 0);
    CHECK_FALSE(fs::exists(kTmp / "fullm.3dqp"));  // FULL writes no packed file

    auto r = run_cli("report --model fullm.tqck");
    REQUIRE(r.exit_code == 0);
    CHECK(r.output.find("compression ratio:  1.000") != std::string::npos);
}

TEST_CASE("gradient verification flag runs the double-precision suite") {
    fs::create_directories(kTmp);
    auto r = run_cli("--double-check-grads");
    REQUIRE(r.exit_code == 0);
    CHECK(r.output.find("gradient suite: PASS") != std::string::npos);
    CHECK(r.output.find("conv3d") != std::string::npos);
}
