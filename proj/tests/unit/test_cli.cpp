#include <doctest.h>
#include <json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const std::string kCli = KVCOMM_CLI_PATH;
const std::string kTiny = KVCOMM_TEST_DATA "/tiny.json";

struct Result {
    int code = -1;
    std::string output;
};

fs::path scratch(const std::string& name) {
    const auto d = fs::temp_directory_path() / ("kvcomm_cli_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

Result run(const std::string& args, const std::string& env = "") {
    const auto log = fs::temp_directory_path() / "kvcomm_cli_last.log";
    const std::string cmd = env + " " + kCli + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

} // namespace

TEST_CASE("missing config exits 2 and names the path") {
    const auto r = run("run --config /no/such/config.json --out " + scratch("missing").string());
    CHECK(r.code == 2);
    CHECK(r.output.find("/no/such/config.json") != std::string::npos);
}

TEST_CASE("malformed config and bad arguments exit 2") {
    const auto d = scratch("bad");
    std::ofstream(d / "bad.json") << R"({"gamma": 2})";
    CHECK(run("run --config " + (d / "bad.json").string() + " --out " + d.string()).code == 2);
    CHECK(run("run").code == 2);
    CHECK(run("sweep --config " + kTiny + " --param gamma --values \"\" --out " + d.string()).code == 2);
    CHECK(run("sweep --config " + kTiny + " --param depth --values 1 --out " + d.string()).code == 2);
    CHECK(run("run --config " + kTiny + " --out " + d.string(), "KVCOMM_SEED=abc").code == 2);
}

TEST_CASE("run applies default gamma and capacity and is reproducible") {
    const auto a = scratch("run_a"), b = scratch("run_b");
    const auto before = slurp(kTiny);
    REQUIRE(run("run --config " + kTiny + " --out " + a.string()).code == 0);
    REQUIRE(run("run --config " + kTiny + " --out " + b.string() + " --threads 1").code == 0);
    CHECK(slurp(a / "transcript.jsonl") == slurp(b / "transcript.jsonl"));
    CHECK(slurp(a / "pools.json") == slurp(b / "pools.json"));
    CHECK(slurp(kTiny) == before);

    const auto report = nlohmann::json::parse(slurp(a / "report.json"));
    CHECK(report.at("config").at("gamma").get<double>() == 0.3);
    CHECK(report.at("config").at("capacity").get<int>() == 20);
    CHECK(report.at("version").get<std::string>().rfind("kvcomm ", 0) == 0);
}

TEST_CASE("seed precedence: flag over environment over file") {
    const auto d = scratch("seed");
    REQUIRE(run("run --config " + kTiny + " --out " + d.string(), "KVCOMM_SEED=9").code == 0);
    auto seed = nlohmann::json::parse(slurp(d / "report.json")).at("config").at("seed").get<int>();
    CHECK(seed == 9);
    REQUIRE(run("run --config " + kTiny + " --out " + d.string() + " --seed 13", "KVCOMM_SEED=9").code == 0);
    seed = nlohmann::json::parse(slurp(d / "report.json")).at("config").at("seed").get<int>();
    CHECK(seed == 13);
}

TEST_CASE("single-value sweep equals the run report") {
    const auto d = scratch("sweep");
    REQUIRE(run("run --config " + kTiny + " --out " + d.string()).code == 0);
    REQUIRE(run("sweep --config " + kTiny + " --param gamma --values 0.3 --out " + d.string()).code == 0);
    const auto report = nlohmann::json::parse(slurp(d / "report.json"));
    const auto sweep = nlohmann::json::parse(slurp(d / "sweep-gamma.json"));
    REQUIRE(sweep.at("rows").size() == 1);
    const auto& row = sweep.at("rows")[0].at("savings");
    CHECK(row.at("reuse_rate") == report.at("savings").at("reuse_rate"));
    CHECK(row.at("dense_tokens") == report.at("savings").at("dense_tokens"));
    CHECK(row.at("reused_tokens") == report.at("savings").at("reused_tokens"));
}

TEST_CASE("analyze experiments") {
    const auto a = scratch("an_a"), b = scratch("an_b");
    REQUIRE(run("analyze --config " + kTiny + " --experiment proximity --seed 7 --out " + a.string()).code == 0);
    REQUIRE(run("analyze --config " + kTiny + " --experiment proximity --seed 7 --out " + b.string() + " --threads 8").code == 0);
    CHECK(slurp(a / "proximity.csv") == slurp(b / "proximity.csv"));
    CHECK_FALSE(slurp(a / "proximity.csv").empty());

    REQUIRE(run("analyze --config " + kTiny + " --experiment offset-variance --out " + a.string()).code == 0);
    const auto csv = slurp(a / "offset-variance.csv");
    CHECK(csv.find("dk_rot_mean") != std::string::npos);
    CHECK(csv.find("dk_unrot_mean") != std::string::npos);
    const auto js = nlohmann::json::parse(slurp(a / "offset-variance.json"));
    CHECK(js.contains("config"));
    CHECK(js.contains("version"));

    const auto bad = run("analyze --config " + kTiny + " --experiment telepathy --out " + a.string());
    CHECK(bad.code == 2);
    CHECK(bad.output.find("offset-variance") != std::string::npos);
}
