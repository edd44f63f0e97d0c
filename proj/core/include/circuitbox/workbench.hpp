#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "circuitbox/circuit.hpp"
#include "circuitbox/dcm.hpp"
#include "circuitbox/trainer.hpp"

namespace circuitbox {

std::string sha256_hex(const std::string& data);
std::string sha256_file(const std::string& path);

std::string read_file(const std::string& path);
/// write-temp-then-rename so readers never observe a partial file
void atomic_write(const std::string& path, const std::string& content);

/// Flat dotted-key configuration with defaults for the full pipeline.
struct ExperimentConfig {
    std::map<std::string, nlohmann::json> kv;

    static ExperimentConfig defaults();
    static ExperimentConfig load_file(const std::string& path);

    /// `--set key=value` override; the value is parsed as JSON when possible
    /// and treated as a string otherwise
    void set(const std::string& key, const std::string& value);

    bool has(const std::string& key) const { return kv.count(key) != 0; }
    int geti(const std::string& key) const;
    double getd(const std::string& key) const;
    bool getb(const std::string& key) const;
    std::string gets(const std::string& key) const;
    std::vector<int> get_ints(const std::string& key) const;
    std::uint64_t getu(const std::string& key) const;

    std::string dump() const;  // canonical (sorted keys)
    std::string hash() const;

    ModelConfig model_config(const Vocab& v) const;
    TrainRecipe recipe(const std::string& prefix) const;  // "train" or "finetune"
};

struct RunPaths {
    std::string root;

    std::string data() const { return root + "/data"; }
    std::string checkpoints() const { return root + "/checkpoints"; }
    std::string circuits() const { return root + "/circuits"; }
    std::string scores() const { return root + "/scores"; }
    std::string dcm() const { return root + "/dcm"; }
    std::string cmap() const { return root + "/cmap"; }
    std::string report() const { return root + "/report"; }
    std::string manifest() const { return root + "/manifest.json"; }

    void ensure_layout() const;
};

/// Tracks completed stages and their output hashes; a stage re-runs only
/// when the config hash or any output file changed.
class Manifest {
  public:
    static Manifest load(const RunPaths& paths, const ExperimentConfig& cfg);

    bool stage_done(const std::string& stage) const;
    void mark_done(const std::string& stage, const std::vector<std::string>& outputs);
    void save() const;

    const std::string& config_hash() const { return config_hash_; }

  private:
    std::string path_;
    std::string root_;
    std::string config_hash_;
    nlohmann::json stages_ = nlohmann::json::object();
};

struct PipelineResult {
    std::vector<std::string> executed;
    std::vector<std::string> skipped;
};

/// gen-data -> train -> finetune -> discover -> minimality -> faithfulness
/// -> completeness -> random baseline -> dcm -> cmap -> knockout -> report.
/// Throws with the failing stage's name; completed outputs are preserved.
PipelineResult run_pipeline(const ExperimentConfig& cfg, const std::string& out_dir);

/// Runs only the named stages (all when empty), skipping completed ones.
PipelineResult run_stages(const ExperimentConfig& cfg, const std::string& out_dir,
                          const std::vector<std::string>& wanted);

/// Entry point behind the `cbx` binary; returns the process exit code
/// (0 ok, 2 usage, 3 numeric failure, 4 missing artifact).
int cli_main(int argc, const char* const* argv);

// report rendering (deterministic byte-for-byte)
void write_report(const ExperimentConfig& cfg, const RunPaths& paths);

}  // namespace circuitbox
