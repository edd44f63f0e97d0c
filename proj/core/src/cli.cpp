#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "circuitbox/error.hpp"
#include "circuitbox/workbench.hpp"

namespace circuitbox {

namespace {

struct Common {
    std::string config_path;
    std::string out_dir = "run";
    std::vector<std::string> sets;
    long long seed = -1;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "experiment config JSON");
    cmd->add_option("--out", c.out_dir, "run directory");
    cmd->add_option("--set", c.sets, "override, key=value")->take_all();
    cmd->add_option("--seed", c.seed, "override model and training seed");
}

ExperimentConfig build_config(const Common& c) {
    ExperimentConfig cfg =
        c.config_path.empty() ? ExperimentConfig::defaults() : ExperimentConfig::load_file(c.config_path);
    if (c.seed >= 0) {
        cfg.kv["model.seed"] = c.seed;
        cfg.kv["train.seed"] = c.seed;
        cfg.kv["finetune.seed"] = c.seed + 1;
    }
    for (const std::string& s : c.sets) {
        auto eq = s.find('=');
        if (eq == std::string::npos) throw UsageError("--set expects key=value, got: " + s);
        cfg.set(s.substr(0, eq), s.substr(eq + 1));
    }
    return cfg;
}

void print_result(const PipelineResult& r) {
    for (const auto& s : r.skipped) std::printf("skipped %s (up to date)\n", s.c_str());
    for (const auto& s : r.executed) std::printf("ran %s\n", s.c_str());
}

int do_diff(const std::string& a_path, const std::string& b_path) {
    Circuit a = load_circuit(a_path);
    Circuit b = load_circuit(b_path);
    std::printf("%-12s %10s %10s %6s %6s %6s\n", "group", "precision", "recall", "small", "big",
                "common");
    for (const auto& [name, d] : circuit_diff(a, b))
        std::printf("%-12s %10.4f %10.4f %6d %6d %6d\n", name.c_str(), d.precision, d.recall,
                    d.n_small, d.n_big, d.intersection);
    return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
    CLI::App app{"entity-tracking circuit workbench"};
    app.require_subcommand(1);

    Common common;
    std::string circuit_a, circuit_b, checkpoint_a, checkpoint_b, group, desideratum;
    int random_baseline = -1;

    struct Sub {
        CLI::App* cmd;
        std::vector<std::string> stages;
    };
    std::vector<Sub> subs;
    auto add_stage_cmd = [&](const std::string& name, const std::string& desc,
                             std::vector<std::string> stages) {
        CLI::App* cmd = app.add_subcommand(name, desc);
        add_common(cmd, common);
        subs.push_back({cmd, std::move(stages)});
        return cmd;
    };

    add_stage_cmd("run", "full pipeline", {});
    add_stage_cmd("gen-data", "generate datasets", {"gen-data"});
    add_stage_cmd("train", "pretrain the base checkpoint", {"train"});
    add_stage_cmd("finetune", "continued training from the base checkpoint", {"finetune"});
    CLI::App* cmd_discover =
        add_stage_cmd("discover", "path-patching circuit discovery", {"mean-cache", "discover"});
    CLI::App* cmd_eval = add_stage_cmd(
        "eval-circuit", "minimality, faithfulness, completeness",
        {"mean-cache", "minimality", "faithfulness", "completeness"});
    cmd_eval->add_option("--random-baseline", random_baseline,
                         "evaluate N random matched circuits instead");
    cmd_eval->add_option("--circuit", circuit_a, "circuit file to evaluate");
    CLI::App* cmd_dcm = add_stage_cmd("dcm", "desiderata-based component masking", {"dcm"});
    cmd_dcm->add_option("--group", group, "restrict to one circuit group");
    cmd_dcm->add_option("--desideratum", desideratum, "restrict to one desideratum kind");
    cmd_dcm->add_option("--circuit", circuit_a, "circuit file with candidate groups");
    CLI::App* cmd_cmap = add_stage_cmd("cmap", "cross-model activation patching", {"cmap"});
    cmd_cmap->add_option("--checkpoint", checkpoint_a, "weak (base) checkpoint");
    cmd_cmap->add_option("--checkpoint-b", checkpoint_b, "strong (tuned) checkpoint");
    cmd_cmap->add_option("--circuit", circuit_a, "circuit file with annotated groups");
    add_stage_cmd("knockout", "attention knockout sweeps", {"knockout"});
    add_stage_cmd("report", "render SVG report", {"report"});

    CLI::App* cmd_diff = app.add_subcommand("diff", "compare two circuit files");
    cmd_diff->add_option("--circuit", circuit_a, "first circuit")->required();
    cmd_diff->add_option("--circuit-b", circuit_b, "second circuit")->required();

    (void)cmd_discover;

    try {
        try {
            app.parse(argc, argv);
        } catch (const CLI::ParseError& e) {
            const int code = app.exit(e);
            return code == 0 ? 0 : 2;
        }

        if (cmd_diff->parsed()) return do_diff(circuit_a, circuit_b);

        ExperimentConfig cfg = build_config(common);
        if (!circuit_a.empty() && !cmd_diff->parsed()) cfg.kv["paths.circuit"] = circuit_a;
        if (!checkpoint_a.empty()) cfg.kv["paths.base_checkpoint"] = checkpoint_a;
        if (!checkpoint_b.empty()) cfg.kv["paths.tuned_checkpoint"] = checkpoint_b;
        if (!group.empty()) cfg.kv["dcm.only_group"] = group;
        if (!desideratum.empty()) cfg.kv["dcm.only_kind"] = desideratum;

        for (const Sub& s : subs) {
            if (!s.cmd->parsed()) continue;
            std::vector<std::string> stages = s.stages;
            if (s.cmd == cmd_eval && random_baseline >= 0) {
                cfg.kv["baseline.random_circuits"] = random_baseline;
                stages = {"mean-cache", "random-baseline"};
            }
            print_result(run_stages(cfg, common.out_dir, stages));
            return 0;
        }
        return 2;  // no subcommand matched
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

}  // namespace circuitbox
