// Copyright (c) 2026, The FlexFed Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "flexfed/cli/checkpoint.hpp"
#include "flexfed/cli/commands.hpp"
#include "flexfed/error.hpp"

using namespace flexfed;
using namespace flexfed::cli;
namespace fs = std::filesystem;

namespace {

const fs::path kSmoke = fs::path(FLEXFED_SOURCE_DIR) / "configs" / "smoke.cfg";

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void spit(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream(p, std::ios::binary) << text;
}

fs::path scratch(const std::string& name) {
    const auto dir = fs::path(FLEXFED_TEST_TMP) / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string replace(std::string text, const std::string& from, const std::string& to) {
    const auto pos = text.find(from);
    REQUIRE(pos != std::string::npos);
    return text.replace(pos, from.size(), to);
}

struct CapturedErr {
    std::ostringstream buf;
    std::streambuf* old;
    CapturedErr() : old(std::cerr.rdbuf(buf.rdbuf())) {}
    ~CapturedErr() { std::cerr.rdbuf(old); }
};

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

/// One smoke run shared by the cases that only read its outputs.
const fs::path& smoke_run() {
    static const fs::path dir = [] {
        auto d = scratch("smoke");
        REQUIRE(cmd_run(kSmoke, d) == kExitOk);
        return d;
    }();
    return dir;
}

fs::path ckpt(const fs::path& dir, int round) {
    return dir / "checkpoints" / ("round_000" + std::to_string(round) + ".ckpt");
}

}  // namespace

TEST_CASE("smoke run writes every output and three rows per client", "[cli]") {
    const auto& dir = smoke_run();
    for (const char* f : {"metrics.csv", "ledger.csv", "report.json", "manifest.json"}) CHECK(fs::exists(dir / f));
    for (int r = 0; r <= 3; ++r) CHECK(fs::exists(ckpt(dir, r)));

    const auto metrics = slurp(dir / "metrics.csv");
    CHECK(count_lines(metrics) == 1 + 3 * 2);
    CHECK(metrics.find("\n1,0,") != std::string::npos);
    CHECK(metrics.find("\n3,1,") != std::string::npos);
    // Down and up for each of 2 clients over 3 rounds.
    CHECK(count_lines(slurp(dir / "ledger.csv")) == 1 + 12);

    const auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
    CHECK(manifest["config"] == slurp(kSmoke));
    CHECK(manifest["inputs"][kSmoke.string()] == content_hash(slurp(kSmoke)));
    CHECK(manifest["inputs"][kSmoke.string()].get<std::string>().size() == 40);
}

TEST_CASE("content hash is the git blob hash", "[cli]") {
    // `printf 'hello\n' | git hash-object --stdin`
    CHECK(content_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
    CHECK(content_hash("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}

TEST_CASE("rerunning a config reproduces every output byte", "[cli]") {
    const auto& a = smoke_run();
    const auto b = scratch("smoke_rerun");
    REQUIRE(cmd_run(kSmoke, b) == kExitOk);
    for (const char* f : {"metrics.csv", "ledger.csv", "report.json"}) CHECK(slurp(a / f) == slurp(b / f));
    for (int r = 0; r <= 3; ++r) CHECK(slurp(ckpt(a, r)) == slurp(ckpt(b, r)));
}

TEST_CASE("sequential clients reproduce the parallel run", "[cli]") {
    const auto dir = scratch("sequential");
    const auto cfg = dir / "seq.cfg";
    spit(cfg, replace(slurp(kSmoke), "[federation]\n", "[federation]\nparallel_clients = false\n"));
    REQUIRE(cmd_run(cfg, dir / "out") == kExitOk);
    CHECK(slurp(dir / "out" / "metrics.csv") == slurp(smoke_run() / "metrics.csv"));
}

TEST_CASE("overrides change the run", "[cli]") {
    const auto dir = scratch("overrides");
    Overrides o;
    o.seed = 99;
    REQUIRE(cmd_run(kSmoke, dir / "seed", o) == kExitOk);
    CHECK(slurp(dir / "seed" / "metrics.csv") != slurp(smoke_run() / "metrics.csv"));

    Overrides local;
    local.mode = fed::Mode::LocalOnly;
    REQUIRE(cmd_run(kSmoke, dir / "local", local) == kExitOk);
    CHECK(count_lines(slurp(dir / "local" / "ledger.csv")) == 1);
    const auto ck = load_checkpoint(ckpt(dir / "local", 3));
    CHECK(ck.config.run.mode == fed::Mode::LocalOnly);
}

TEST_CASE("configuration errors exit with code 2 and name the field", "[cli]") {
    const auto dir = scratch("bad_config");
    const auto text = slurp(kSmoke);

    auto missing = replace(text, "source = synth\n", "source = jsonl\ntrain_path = no_such_file.jsonl\n");
    spit(dir / "missing.cfg", missing);
    {
        CapturedErr err;
        CHECK(cmd_run(dir / "missing.cfg", dir / "out") == kExitConfig);
        CHECK(err.buf.str().find("data.train_path") != std::string::npos);
    }

    spit(dir / "typo.cfg", replace(text, "rounds = 3", "roundz = 3"));
    {
        CapturedErr err;
        CHECK(cmd_run(dir / "typo.cfg", dir / "out") == kExitConfig);
        CHECK(err.buf.str().find("federation.roundz") != std::string::npos);
    }

    spit(dir / "topk.cfg", replace(text, "top_k = 2", "top_k = 9"));
    {
        CapturedErr err;
        CHECK(cmd_run(dir / "topk.cfg", dir / "out") == kExitConfig);
        CHECK(err.buf.str().find("top_k") != std::string::npos);
    }

    CapturedErr err;
    CHECK(cmd_run(dir / "absent.cfg", dir / "out") == kExitConfig);
}

TEST_CASE("checkpoints round-trip every tensor", "[cli]") {
    const auto path = ckpt(smoke_run(), 2);
    const auto ck = load_checkpoint(path);
    CHECK(ck.version == kCheckpointVersion);
    CHECK(ck.state.rounds_done == 2);
    CHECK(ck.state.clients.size() == 2);
    CHECK(ck.state.metrics.size() == 4);
    REQUIRE(ck.state.clients[0].prune_report.has_value());

    const auto dir = scratch("roundtrip");
    save_checkpoint(dir / "again.ckpt", ck.config, ck.base, ck.state);
    CHECK(slurp(dir / "again.ckpt") == slurp(path));

    const auto again = load_checkpoint(dir / "again.ckpt");
    for (std::size_t c = 0; c < 2; ++c) {
        const auto a = ck.state.clients[c].adapters.parameters();
        const auto b = again.state.clients[c].adapters.parameters();
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].name == b[i].name);
            const auto da = a[i].tensor.data(), db = b[i].tensor.data();
            CHECK(std::equal(da.begin(), da.end(), db.begin(), db.end()));
        }
    }
    CHECK(again.state.server.global == ck.state.server.global);
}

TEST_CASE("truncated or foreign checkpoints are refused", "[cli]") {
    const auto bytes = slurp(ckpt(smoke_run(), 1));
    const auto dir = scratch("corrupt");
    for (std::size_t cut : {std::size_t{0}, std::size_t{4}, std::size_t{13}, std::size_t{100}, bytes.size() / 2,
                            bytes.size() - 1}) {
        spit(dir / "cut.ckpt", bytes.substr(0, cut));
        CHECK_THROWS_AS(load_checkpoint(dir / "cut.ckpt"), CorruptionError);
    }
    spit(dir / "extra.ckpt", bytes + "x");
    CHECK_THROWS_AS(load_checkpoint(dir / "extra.ckpt"), CorruptionError);

    auto future = bytes;
    future[8] = 2;
    spit(dir / "future.ckpt", future);
    CHECK_THROWS_AS(load_checkpoint(dir / "future.ckpt"), VersionError);
    {
        CapturedErr err;
        CHECK(cmd_eval(dir / "future.ckpt", dir / "eval.json") == kExitCheckpoint);
        CHECK(err.buf.str().find("version 2") != std::string::npos);
        CHECK_FALSE(fs::exists(dir / "eval.json"));
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "absent.ckpt"), IoError);
}

TEST_CASE("resuming from round 2 reproduces round 3 bitwise", "[cli]") {
    const auto& full = smoke_run();
    const auto dir = scratch("resume");
    REQUIRE(cmd_run(kSmoke, dir, {}, ckpt(full, 2)) == kExitOk);
    CHECK(slurp(dir / "metrics.csv") == slurp(full / "metrics.csv"));
    CHECK(slurp(dir / "ledger.csv") == slurp(full / "ledger.csv"));
    CHECK(slurp(ckpt(dir, 3)) == slurp(ckpt(full, 3)));
    CHECK_FALSE(fs::exists(ckpt(dir, 2)));

    Overrides other;
    other.seed = 1234;
    CapturedErr err;
    CHECK(cmd_run(kSmoke, scratch("resume_mismatch"), other, ckpt(full, 2)) == kExitConfig);
}

TEST_CASE("prune report is self-consistent and deterministic", "[cli]") {
    const auto dir = scratch("prune");
    REQUIRE(cmd_prune(kSmoke, dir / "a.json") == kExitOk);
    REQUIRE(cmd_prune(kSmoke, dir / "b.json") == kExitOk);
    CHECK(slurp(dir / "a.json") == slurp(dir / "b.json"));

    const auto r = nlohmann::json::parse(slurp(dir / "a.json"));
    REQUIRE(r["clients"].size() == 2);
    for (const auto& c : r["clients"]) {
        for (const auto& l : c["layers"]) {
            const auto losses = l["losses"].get<std::vector<double>>();
            const auto argmin = static_cast<std::size_t>(std::min_element(losses.begin(), losses.end()) - losses.begin());
            CHECK(l["selected"].get<std::size_t>() == argmin);
        }
    }

    const auto single = dir / "single.cfg";
    spit(single, replace(replace(slurp(kSmoke), "n_experts = 4", "n_experts = 1"), "top_k = 2", "top_k = 1"));
    REQUIRE(cmd_prune(single, dir / "single.json") == kExitOk);
    for (const auto& c : nlohmann::json::parse(slurp(dir / "single.json"))["clients"]) {
        for (const auto& l : c["layers"]) CHECK(l["selected"] == 0);
    }
}

TEST_CASE("eval is repeatable and improves across saved rounds", "[cli]") {
    const auto& run = smoke_run();
    const auto dir = scratch("eval");
    std::vector<double> means;
    for (int r = 0; r <= 3; ++r) {
        const auto out = dir / ("r" + std::to_string(r) + ".json");
        REQUIRE(cmd_eval(ckpt(run, r), out) == kExitOk);
        const auto j = nlohmann::json::parse(slurp(out));
        means.push_back(j["mean_eval_loss"].get<double>());
        for (const auto& c : j["clients"]) {
            CHECK(c["rouge_l_f"].get<double>() >= 0.0);
            CHECK(c["rouge_l_f"].get<double>() <= 1.0);
        }
    }
    REQUIRE(cmd_eval(ckpt(run, 3), dir / "again.json") == kExitOk);
    CHECK(slurp(dir / "again.json") == slurp(dir / "r3.json"));
    INFO(means[0] << ' ' << means[1] << ' ' << means[2] << ' ' << means[3]);
    for (std::size_t r = 1; r < means.size(); ++r) CHECK(means[r] < means[r - 1]);
}

TEST_CASE("inspect prints the config echo", "[cli]") {
    std::ostringstream buf;
    auto* old = std::cout.rdbuf(buf.rdbuf());
    const int rc = cmd_inspect(ckpt(smoke_run(), 1));
    std::cout.rdbuf(old);
    CHECK(rc == kExitOk);
    CHECK(buf.str().find("rounds_done: 1") != std::string::npos);
    CHECK(buf.str().find("[federation]") != std::string::npos);
}
