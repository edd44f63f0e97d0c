#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "circuitbox/workbench.hpp"

using namespace circuitbox;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config() {
    ExperimentConfig cfg = ExperimentConfig::defaults();
    auto set = [&](const std::string& k, const std::string& v) { cfg.set(k, v); };
    set("model.n_layers", "4");
    set("model.n_heads", "2");
    set("model.d_model", "32");
    set("model.d_mlp", "64");
    set("data.discovery_pairs", "6");
    set("data.eval_tasks", "12");
    set("data.dcm_train", "8");
    set("data.dcm_eval", "8");
    set("data.mean_tasks", "6");
    set("train.steps", "0");
    set("train.eval_tasks", "12");
    set("train.band_lo", "0.0");
    set("train.band_hi", "1.0");
    set("finetune.steps", "0");
    set("finetune.eval_tasks", "12");
    set("finetune.min_gap", "0.0");
    set("discover.group_sizes", "[2,1]");
    set("completeness.random_draws", "2");
    set("baseline.random_circuits", "2");
    set("dcm.epochs", "1");
    set("dcm.batch", "8");
    set("dcm.repeats", "2");
    set("dcm.kinds", "[\"object\"]");
    set("knockout.from_roles", "[\"query_label\"]");
    return cfg;
}

std::string fresh_dir(const std::string& name) {
    std::string d = (fs::temp_directory_path() / name).string();
    fs::remove_all(d);
    return d;
}

}  // namespace

TEST_CASE("sha256 matches the published test vector") {
    CHECK(sha256_hex("abc") ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256_hex("") ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("atomic write leaves no temp file and round-trips") {
    std::string dir = fresh_dir("cb_wb_io");
    fs::create_directories(dir);
    atomic_write(dir + "/x.txt", "hello\n");
    CHECK(read_file(dir + "/x.txt") == "hello\n");
    CHECK(!fs::exists(dir + "/x.txt.tmp"));
    atomic_write(dir + "/x.txt", "replaced");
    CHECK(read_file(dir + "/x.txt") == "replaced");
    CHECK_THROWS_AS(read_file(dir + "/missing.txt"), IoError);
}

TEST_CASE("config defaults, overrides, and hashing") {
    ExperimentConfig cfg = ExperimentConfig::defaults();
    CHECK(cfg.geti("model.n_layers") == 3);
    CHECK(cfg.getd("dcm.lambda") == 0.01);
    CHECK(cfg.geti("data.discovery_pairs") == 300);
    CHECK(cfg.geti("data.eval_tasks") == 500);
    CHECK(cfg.geti("data.dcm_train") == 1000);
    CHECK(cfg.geti("dcm.repeats") == 10);
    CHECK(cfg.getd("minimality.threshold") == 0.01);
    CHECK(cfg.getd("minimality.subset_fraction") == 0.30);

    const std::string h0 = cfg.hash();
    CHECK(cfg.hash() == h0);  // stable
    cfg.set("model.n_layers", "5");
    CHECK(cfg.geti("model.n_layers") == 5);
    CHECK(cfg.hash() != h0);

    cfg.set("model.positional", "learned");
    CHECK(cfg.gets("model.positional") == "learned");
    cfg.set("discover.group_sizes", "[3,1]");
    CHECK(cfg.get_ints("discover.group_sizes") == std::vector<int>{3, 1});

    CHECK_THROWS_AS(cfg.set("no.such.key", "1"), UsageError);
    CHECK_THROWS_AS(cfg.geti("model.positional"), UsageError);
    CHECK_THROWS_AS(ExperimentConfig::defaults().gets("nope"), UsageError);
}

TEST_CASE("config file loading rejects unknown keys") {
    std::string dir = fresh_dir("cb_wb_cfg");
    fs::create_directories(dir);
    atomic_write(dir + "/ok.json", "{\"model.n_layers\": 2}");
    ExperimentConfig cfg = ExperimentConfig::load_file(dir + "/ok.json");
    CHECK(cfg.geti("model.n_layers") == 2);
    CHECK(cfg.geti("model.n_heads") == 4);  // default retained

    atomic_write(dir + "/bad.json", "{\"model.depth\": 2}");
    CHECK_THROWS_AS(ExperimentConfig::load_file(dir + "/bad.json"), UsageError);
    atomic_write(dir + "/notjson.json", "nope");
    CHECK_THROWS_AS(ExperimentConfig::load_file(dir + "/notjson.json"), UsageError);
}

TEST_CASE("pipeline runs, is idempotent, and renders deterministic reports") {
    ExperimentConfig cfg = tiny_config();
    std::string dir = fresh_dir("cb_wb_run");

    PipelineResult first = run_pipeline(cfg, dir);
    CHECK(first.executed.size() == 13);
    CHECK(first.skipped.empty());

    for (const char* f :
         {"manifest.json", "config.json", "data/discovery_orig.jsonl", "data/eval.jsonl",
          "checkpoints/base.ckpt", "checkpoints/tuned.ckpt", "circuits/base.json",
          "circuits/base_pruned.json", "scores/minimality.json", "scores/faithfulness.json",
          "scores/completeness.json", "scores/random_circuits.json", "scores/knockout.json",
          "dcm/summary.json", "cmap/cmap.json", "report/scores.svg", "report/knockout.svg",
          "report/dcm.svg", "report/cmap.svg", "report/completeness.svg"})
        CHECK_MESSAGE(fs::exists(dir + "/" + f), f);

    // result files carry the config hash and seeds they were produced under
    for (const char* f : {"scores/faithfulness.json", "scores/minimality.json",
                          "scores/knockout.json", "dcm/summary.json", "cmap/cmap.json"}) {
        nlohmann::json j = nlohmann::json::parse(read_file(dir + "/" + f));
        CHECK(j.at("config_hash").get<std::string>() == cfg.hash());
        CHECK(j.at("seeds").contains("data.seed"));
        CHECK(j.at("seeds").at("model.seed") == cfg.geti("model.seed"));
    }

    // completed pipeline re-run is a no-op
    PipelineResult second = run_pipeline(cfg, dir);
    CHECK(second.executed.empty());
    CHECK(second.skipped.size() == 13);

    // deleting the report regenerates byte-identical SVGs
    std::map<std::string, std::string> hashes;
    for (const auto& e : fs::directory_iterator(dir + "/report"))
        hashes[e.path().filename().string()] = sha256_file(e.path().string());
    fs::remove_all(dir + "/report");
    PipelineResult third = run_pipeline(cfg, dir);
    CHECK(third.executed == std::vector<std::string>{"report"});
    for (const auto& [name, h] : hashes)
        CHECK(sha256_file(dir + "/report/" + name) == h);

    // svg files are xml documents
    for (const auto& [name, h] : hashes) {
        std::string body = read_file(dir + "/report/" + name);
        CHECK(body.rfind("<?xml", 0) == 0);
        CHECK(body.find("</svg>") != std::string::npos);
    }

    // a config change invalidates completed stages
    ExperimentConfig cfg2 = cfg;
    cfg2.set("completeness.random_draws", "3");
    PipelineResult fourth = run_pipeline(cfg2, dir);
    CHECK(fourth.executed.size() == 13);
}

TEST_CASE("stage failure names the stage and preserves outputs") {
    ExperimentConfig cfg = tiny_config();
    cfg.set("train.band_lo", "0.99");  // a random model cannot reach this
    cfg.set("train.band_hi", "1.0");
    cfg.set("train.steps", "1");
    cfg.set("train.eval_every", "1");
    std::string dir = fresh_dir("cb_wb_fail");
    try {
        run_pipeline(cfg, dir);
        FAIL("expected the train stage to fail");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("stage train") != std::string::npos);
    }
    CHECK(fs::exists(dir + "/data/eval.jsonl"));        // gen-data preserved
    CHECK(fs::exists(dir + "/scores/train_log.json"));  // curves emitted
}

TEST_CASE("missing artifacts are reported with their path") {
    ExperimentConfig cfg = tiny_config();
    std::string dir = fresh_dir("cb_wb_missing");
    try {
        run_stages(cfg, dir, {"discover"});
        FAIL("expected a missing-artifact error");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("missing artifact") != std::string::npos);
        CHECK(std::string(e.what()).find(dir) != std::string::npos);
    }
    CHECK_THROWS_AS(run_stages(cfg, dir, {"no-such-stage"}), UsageError);
}

TEST_CASE("cli exit codes") {
    std::string dir = fresh_dir("cb_wb_cli");
    fs::create_directories(dir);

    Circuit cir;
    cir.groups["A"].nodes = {{1, 0, "last", -0.5, "direct"}};
    save_circuit(dir + "/a.json", cir);

    const std::string a = dir + "/a.json";
    {
        std::vector<const char*> argv = {"cbx", "diff", "--circuit", a.c_str(), "--circuit-b",
                                         a.c_str()};
        CHECK(cli_main(static_cast<int>(argv.size()), argv.data()) == 0);
    }
    {
        std::vector<const char*> argv = {"cbx", "frobnicate"};
        CHECK(cli_main(static_cast<int>(argv.size()), argv.data()) == 2);
    }
    {
        std::vector<const char*> argv = {"cbx"};
        CHECK(cli_main(static_cast<int>(argv.size()), argv.data()) == 2);
    }
    {
        // discovery without a trained checkpoint: missing artifact
        std::string out = dir + "/run";
        std::vector<const char*> argv = {"cbx",   "discover", "--out", out.c_str(),
                                         "--set", "model.d_model=32"};
        CHECK(cli_main(static_cast<int>(argv.size()), argv.data()) == 4);
    }
    {
        std::vector<const char*> argv = {"cbx", "gen-data", "--set", "bogus-key=1"};
        CHECK(cli_main(static_cast<int>(argv.size()), argv.data()) == 2);
    }
}
