#include "circuitbox/workbench.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "circuitbox/error.hpp"
#include "circuitbox/patch.hpp"

namespace fs = std::filesystem;

namespace circuitbox {

std::string sha256_hex(const std::string& data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    EVP_DigestUpdate(ctx, data.data(), data.size());
    EVP_DigestFinal_ex(ctx, md, &len);
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xf]);
    }
    return out;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::string sha256_file(const std::string& path) { return sha256_hex(read_file(path)); }

void atomic_write(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp);
        out << content;
        if (!out) throw IoError("short write to " + tmp);
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

ExperimentConfig ExperimentConfig::defaults() {
    ExperimentConfig c;
    auto& kv = c.kv;
    kv["model.n_layers"] = 3;
    kv["model.n_heads"] = 4;
    kv["model.d_model"] = 96;
    kv["model.d_mlp"] = 384;
    kv["model.max_seq_len"] = 64;
    kv["model.positional"] = "rotary";
    kv["model.seed"] = 1;

    kv["data.seed"] = 10000;
    kv["data.n_boxes"] = 7;
    kv["data.discovery_pairs"] = 300;
    kv["data.eval_tasks"] = 500;
    kv["data.dcm_train"] = 1000;
    kv["data.dcm_eval"] = 500;
    kv["data.dcm_seed"] = 30000;
    kv["data.mean_tasks"] = 100;
    kv["data.mean_seed"] = 20000;

    kv["train.steps"] = 4000;
    kv["train.batch"] = 16;
    kv["train.seq_len"] = 48;
    kv["train.seed"] = 1;
    kv["train.eval_every"] = 50;
    kv["train.eval_tasks"] = 200;
    kv["train.eval_seed"] = 990000;
    kv["train.boxes_min"] = 2;
    kv["train.boxes_max"] = 7;
    kv["train.eval_boxes"] = 7;
    kv["train.box_tasks"] = 0.8;
    kv["train.filler_lm"] = 0.1;
    kv["train.arithmetic_style"] = 0.1;
    kv["train.lr_warmup"] = 100;
    kv["train.lr_peak"] = 1e-3;
    kv["train.lr_floor"] = 1e-4;
    kv["train.band_lo"] = 0.55;
    kv["train.band_hi"] = 0.75;

    kv["finetune.steps"] = 3000;
    kv["finetune.batch"] = 16;
    kv["finetune.seq_len"] = 48;
    kv["finetune.seed"] = 2;
    kv["finetune.eval_every"] = 50;
    kv["finetune.eval_tasks"] = 200;
    kv["finetune.eval_seed"] = 990000;
    kv["finetune.boxes_min"] = 2;
    kv["finetune.boxes_max"] = 7;
    kv["finetune.eval_boxes"] = 7;
    kv["finetune.box_tasks"] = 0.4;
    kv["finetune.filler_lm"] = 0.0;
    kv["finetune.arithmetic_style"] = 0.6;
    kv["finetune.lr_warmup"] = 50;
    kv["finetune.lr_peak"] = 5e-4;
    kv["finetune.lr_floor"] = 5e-5;
    kv["finetune.min_gap"] = 0.10;

    kv["discover.group_sizes"] = std::vector<int>{4, 2, 2, 2};
    kv["discover.chunk"] = 25;

    kv["minimality.threshold"] = 0.01;
    kv["minimality.subset_fraction"] = 0.30;

    kv["completeness.random_draws"] = 10;
    kv["completeness.seed"] = 40000;

    kv["baseline.random_circuits"] = 10;
    kv["baseline.seed"] = 50000;

    kv["dcm.lambda"] = 0.01;
    kv["dcm.epochs"] = 2;
    kv["dcm.batch"] = 32;
    kv["dcm.lr"] = 0.01;
    kv["dcm.repeats"] = 10;
    kv["dcm.kinds"] = std::vector<std::string>{"object", "label", "position"};

    kv["cmap.min_gain"] = 0.03;

    kv["knockout.from_roles"] =
        std::vector<std::string>{"query_label", "prev_query_label", "correct_object"};
    kv["knockout.to_role"] = "last";

    kv["dcm.only_group"] = "";
    kv["dcm.only_kind"] = "";
    // optional absolute-path overrides for artifacts normally read from the run dir
    kv["paths.base_checkpoint"] = "";
    kv["paths.tuned_checkpoint"] = "";
    kv["paths.circuit"] = "";
    return c;
}

ExperimentConfig ExperimentConfig::load_file(const std::string& path) {
    ExperimentConfig c = defaults();
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw UsageError("config " + path + ": " + e.what());
    }
    if (!j.is_object()) throw UsageError("config " + path + ": top level must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!c.kv.count(it.key())) throw UsageError("config " + path + ": unknown key " + it.key());
        c.kv[it.key()] = it.value();
    }
    return c;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
    if (!kv.count(key)) throw UsageError("config: unknown key " + key);
    nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
    kv[key] = parsed.is_discarded() ? nlohmann::json(value) : parsed;
}

namespace {

const nlohmann::json& need(const std::map<std::string, nlohmann::json>& kv,
                           const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw UsageError("config: missing key " + key);
    return it->second;
}

}  // namespace

int ExperimentConfig::geti(const std::string& key) const {
    const auto& j = need(kv, key);
    if (!j.is_number_integer()) throw UsageError("config: " + key + " must be an integer");
    return j.get<int>();
}

double ExperimentConfig::getd(const std::string& key) const {
    const auto& j = need(kv, key);
    if (!j.is_number()) throw UsageError("config: " + key + " must be a number");
    return j.get<double>();
}

bool ExperimentConfig::getb(const std::string& key) const {
    const auto& j = need(kv, key);
    if (!j.is_boolean()) throw UsageError("config: " + key + " must be a boolean");
    return j.get<bool>();
}

std::string ExperimentConfig::gets(const std::string& key) const {
    const auto& j = need(kv, key);
    if (!j.is_string()) throw UsageError("config: " + key + " must be a string");
    return j.get<std::string>();
}

std::vector<int> ExperimentConfig::get_ints(const std::string& key) const {
    const auto& j = need(kv, key);
    if (!j.is_array()) throw UsageError("config: " + key + " must be an array");
    try {
        return j.get<std::vector<int>>();
    } catch (const nlohmann::json::exception&) {
        throw UsageError("config: " + key + " must be an array of integers");
    }
}

std::uint64_t ExperimentConfig::getu(const std::string& key) const {
    const auto& j = need(kv, key);
    if (!j.is_number_unsigned() && !j.is_number_integer())
        throw UsageError("config: " + key + " must be an integer");
    return j.get<std::uint64_t>();
}

std::string ExperimentConfig::dump() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : kv) j[k] = v;
    return j.dump(2);
}

std::string ExperimentConfig::hash() const { return sha256_hex(dump()); }

ModelConfig ExperimentConfig::model_config(const Vocab& v) const {
    ModelConfig m;
    m.n_layers = geti("model.n_layers");
    m.n_heads = geti("model.n_heads");
    m.d_model = geti("model.d_model");
    m.d_mlp = geti("model.d_mlp");
    m.max_seq_len = geti("model.max_seq_len");
    m.positional = gets("model.positional");
    m.seed = getu("model.seed");
    m.vocab_size = v.size();
    m.validate();
    return m;
}

TrainRecipe ExperimentConfig::recipe(const std::string& p) const {
    TrainRecipe r;
    r.box_tasks = getd(p + ".box_tasks");
    r.filler_lm = getd(p + ".filler_lm");
    r.arithmetic_style = getd(p + ".arithmetic_style");
    r.steps = geti(p + ".steps");
    r.batch = geti(p + ".batch");
    r.seq_len = geti(p + ".seq_len");
    r.seed = getu(p + ".seed");
    r.eval_every = geti(p + ".eval_every");
    r.eval_tasks = geti(p + ".eval_tasks");
    r.eval_seed = getu(p + ".eval_seed");
    r.boxes_min = geti(p + ".boxes_min");
    r.boxes_max = geti(p + ".boxes_max");
    r.eval_boxes = geti(p + ".eval_boxes");
    r.lr.warmup = geti(p + ".lr_warmup");
    r.lr.peak = getd(p + ".lr_peak");
    r.lr.floor = getd(p + ".lr_floor");
    r.validate();
    return r;
}

void RunPaths::ensure_layout() const {
    for (const std::string& d :
         {root, data(), checkpoints(), circuits(), scores(), dcm(), cmap(), report()})
        fs::create_directories(d);
}

Manifest Manifest::load(const RunPaths& paths, const ExperimentConfig& cfg) {
    Manifest m;
    m.path_ = paths.manifest();
    m.root_ = paths.root;
    m.config_hash_ = cfg.hash();
    if (fs::exists(m.path_)) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(read_file(m.path_));
        } catch (const nlohmann::json::exception& e) {
            throw IoError("manifest " + m.path_ + ": " + e.what());
        }
        if (j.value("config_hash", "") == m.config_hash_ && j.contains("stages"))
            m.stages_ = j["stages"];
        // a changed config invalidates every recorded stage
    }
    return m;
}

bool Manifest::stage_done(const std::string& stage) const {
    if (!stages_.contains(stage)) return false;
    const auto& st = stages_.at(stage);
    for (auto it = st.at("outputs").begin(); it != st.at("outputs").end(); ++it) {
        const std::string p = root_ + "/" + it.key();
        if (!fs::exists(p)) return false;
        if (sha256_file(p) != it.value().get<std::string>()) return false;
    }
    return true;
}

void Manifest::mark_done(const std::string& stage, const std::vector<std::string>& outputs) {
    nlohmann::json outs = nlohmann::json::object();
    for (const std::string& rel : outputs) outs[rel] = sha256_file(root_ + "/" + rel);
    stages_[stage] = {{"outputs", outs}};
    save();
}

void Manifest::save() const {
    nlohmann::json j;
    j["config_hash"] = config_hash_;
    j["stages"] = stages_;
    atomic_write(path_, j.dump(2));
}

namespace {

struct Ctx {
    const ExperimentConfig& cfg;
    RunPaths paths;
    Manifest& mf;
    Vocab vocab = Vocab::standard();

    std::string rel(const std::string& sub) const { return sub; }
    std::string abs(const std::string& sub) const { return paths.root + "/" + sub; }

    void require_input(const std::string& sub) const { require_file(abs(sub)); }

    static void require_file(const std::string& path) {
        if (!fs::exists(path)) throw IoError("missing artifact: " + path);
    }

    std::string override_or(const std::string& key, const std::string& sub) const {
        const std::string o = cfg.gets(key);
        std::string p = o.empty() ? abs(sub) : o;
        require_file(p);
        return p;
    }
    std::string base_ckpt() const { return override_or("paths.base_checkpoint", "checkpoints/base.ckpt"); }
    std::string tuned_ckpt() const { return override_or("paths.tuned_checkpoint", "checkpoints/tuned.ckpt"); }
    std::string circuit_path() const { return override_or("paths.circuit", "circuits/base_pruned.json"); }
};

std::vector<TaskInstance> read_tasks(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    std::vector<TaskInstance> out;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) out.push_back(task_from_jsonl(line));
    return out;
}

std::vector<DesideratumTriple> read_triples(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    std::vector<DesideratumTriple> out;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) out.push_back(triple_from_jsonl(line));
    return out;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
    std::string body;
    for (const auto& l : lines) {
        body += l;
        body += '\n';
    }
    atomic_write(path, body);
}

DesKind kind_from_string(const std::string& s) {
    if (s == "object") return DesKind::Object;
    if (s == "label") return DesKind::Label;
    if (s == "position") return DesKind::Position;
    throw UsageError("unknown desideratum kind: " + s);
}

std::vector<std::string> string_list(const ExperimentConfig& cfg, const std::string& key) {
    const auto it = cfg.kv.find(key);
    if (it == cfg.kv.end()) throw UsageError("config: missing key " + key);
    try {
        return it->second.get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception&) {
        throw UsageError("config: " + key + " must be an array of strings");
    }
}

// every result file carries the config hash and the seeds it was produced under
nlohmann::json stamped(const Ctx& c, nlohmann::json j) {
    if (!j.is_object()) j = nlohmann::json{{"entries", std::move(j)}};
    j["config_hash"] = c.cfg.hash();
    nlohmann::json seeds = nlohmann::json::object();
    for (const auto& [k, v] : c.cfg.kv)
        if (k.size() >= 4 && k.compare(k.size() - 4, 4, "seed") == 0) seeds[k] = v;
    j["seeds"] = seeds;
    return j;
}

std::string stamped_dump(const Ctx& c, nlohmann::json j) { return stamped(c, std::move(j)).dump(2); }

void stage_gen_data(Ctx& c) {
    const auto& cfg = c.cfg;
    const int nb = cfg.geti("data.n_boxes");
    const std::uint64_t seed = cfg.getu("data.seed");
    std::vector<std::string> outs;

    std::vector<std::string> orig_lines, noise_lines;
    const int pairs = cfg.geti("data.discovery_pairs");
    for (int i = 0; i < pairs; ++i) {
        TaskInstance t = gen_task(c.vocab, nb, seed + static_cast<std::uint64_t>(i));
        TaskInstance n = gen_noise_task(c.vocab, t, seed + 100000 + static_cast<std::uint64_t>(i));
        orig_lines.push_back(task_to_jsonl(t));
        noise_lines.push_back(task_to_jsonl(n));
    }
    write_lines(c.abs("data/discovery_orig.jsonl"), orig_lines);
    write_lines(c.abs("data/discovery_noise.jsonl"), noise_lines);
    outs.push_back("data/discovery_orig.jsonl");
    outs.push_back("data/discovery_noise.jsonl");

    std::vector<std::string> eval_lines;
    for (int i = 0; i < cfg.geti("data.eval_tasks"); ++i)
        eval_lines.push_back(
            task_to_jsonl(gen_task(c.vocab, nb, seed + 200000 + static_cast<std::uint64_t>(i))));
    write_lines(c.abs("data/eval.jsonl"), eval_lines);
    outs.push_back("data/eval.jsonl");

    std::vector<std::string> mean_lines;
    const std::uint64_t mseed = cfg.getu("data.mean_seed");
    for (int i = 0; i < cfg.geti("data.mean_tasks"); ++i)
        mean_lines.push_back(
            task_to_jsonl(gen_task(c.vocab, nb, mseed + static_cast<std::uint64_t>(i))));
    write_lines(c.abs("data/mean.jsonl"), mean_lines);
    outs.push_back("data/mean.jsonl");

    const std::uint64_t dseed = cfg.getu("data.dcm_seed");
    std::uint64_t off = 0;
    for (const std::string& kind : string_list(cfg, "dcm.kinds")) {
        DesKind dk = kind_from_string(kind);
        std::vector<std::string> tr_lines, ev_lines;
        for (int i = 0; i < cfg.geti("data.dcm_train"); ++i)
            tr_lines.push_back(triple_to_jsonl(
                gen_desideratum(c.vocab, dk, nb, dseed + off + static_cast<std::uint64_t>(i))));
        off += 1000000;
        for (int i = 0; i < cfg.geti("data.dcm_eval"); ++i)
            ev_lines.push_back(triple_to_jsonl(
                gen_desideratum(c.vocab, dk, nb, dseed + off + static_cast<std::uint64_t>(i))));
        off += 1000000;
        write_lines(c.abs("data/dcm_" + kind + "_train.jsonl"), tr_lines);
        write_lines(c.abs("data/dcm_" + kind + "_eval.jsonl"), ev_lines);
        outs.push_back("data/dcm_" + kind + "_train.jsonl");
        outs.push_back("data/dcm_" + kind + "_eval.jsonl");
    }
    c.mf.mark_done("gen-data", outs);
}

void save_checkpoint_atomic(const std::string& path, const ModelWeights& w) {
    const std::string tmp = path + ".tmp";
    save_checkpoint(tmp, w);
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

void stage_train(Ctx& c) {
    const auto& cfg = c.cfg;
    TrainRecipe r = cfg.recipe("train");
    ModelConfig mc = cfg.model_config(c.vocab);
    TrainResult res =
        pretrain(mc, c.vocab, r, cfg.getd("train.band_lo"), cfg.getd("train.band_hi"));
    atomic_write(c.abs("scores/train_log.json"),
                 stamped_dump(c, nlohmann::json::parse(train_result_to_json(res))));
    if (!res.reached_target)
        throw NumericError("stage train: " + res.note + " (curves in scores/train_log.json)");
    save_checkpoint_atomic(c.abs("checkpoints/base.ckpt"), res.weights);
    c.mf.mark_done("train", {"checkpoints/base.ckpt", "scores/train_log.json"});
}

void stage_finetune(Ctx& c) {
    const auto& cfg = c.cfg;
    ModelWeights base = load_checkpoint(c.base_ckpt());
    TrainRecipe r = cfg.recipe("finetune");
    TrainResult res = finetune(base, c.vocab, r, cfg.getd("finetune.min_gap"));
    atomic_write(c.abs("scores/finetune_log.json"),
                 stamped_dump(c, nlohmann::json::parse(train_result_to_json(res))));
    if (!res.reached_target)
        throw NumericError("stage finetune: " + res.note +
                           " (curves in scores/finetune_log.json)");
    save_checkpoint_atomic(c.abs("checkpoints/tuned.ckpt"), res.weights);
    c.mf.mark_done("finetune", {"checkpoints/tuned.ckpt", "scores/finetune_log.json"});
}

void stage_mean_cache(Ctx& c) {
    c.require_input("data/mean.jsonl");
    std::vector<TaskInstance> tasks = read_tasks(c.abs("data/mean.jsonl"));
    {
        ModelWeights w = load_checkpoint(c.base_ckpt());
        save_mean_cache(c.abs("data/mean_base.mc"), build_mean_cache(w, tasks));
    }
    {
        ModelWeights w = load_checkpoint(c.tuned_ckpt());
        save_mean_cache(c.abs("data/mean_tuned.mc"), build_mean_cache(w, tasks));
    }
    c.mf.mark_done("mean-cache", {"data/mean_base.mc", "data/mean_tuned.mc"});
}

const char* kAnnotations[] = {"Value Fetcher", "Position Transmitter", "Position Detector",
                              "Structure Reader"};

void stage_discover(Ctx& c) {
    const auto& cfg = c.cfg;
    c.require_input("data/discovery_orig.jsonl");
    ModelWeights w = load_checkpoint(c.base_ckpt());
    std::vector<TaskInstance> origs = read_tasks(c.abs("data/discovery_orig.jsonl"));
    std::vector<TaskInstance> noises = read_tasks(c.abs("data/discovery_noise.jsonl"));
    DiscoverOptions opt;
    opt.patch.chunk = cfg.geti("discover.chunk");
    Circuit cir = discover(w, origs, noises, cfg.get_ints("discover.group_sizes"), opt);
    int gi = 0;
    for (auto& [name, g] : cir.groups) {
        if (gi < 4) g.annotation = kAnnotations[gi];
        ++gi;
    }
    save_circuit(c.abs("circuits/base.json"), cir);
    c.mf.mark_done("discover", {"circuits/base.json"});
}

void stage_minimality(Ctx& c) {
    const auto& cfg = c.cfg;
    c.require_input("circuits/base.json");
    c.require_input("data/eval.jsonl");
    c.require_input("data/mean_base.mc");
    ModelWeights w = load_checkpoint(c.base_ckpt());
    Circuit cir = load_circuit(c.abs("circuits/base.json"));
    std::vector<TaskInstance> tasks = read_tasks(c.abs("data/eval.jsonl"));
    MeanCache mc = load_mean_cache(c.abs("data/mean_base.mc"));
    auto [pruned, entries] = minimality_prune(w, cir, tasks, mc, cfg.getd("minimality.threshold"),
                                              cfg.getd("minimality.subset_fraction"));
    // keep the unpruned circuit when every node falls below the threshold,
    // so downstream stages still have something to evaluate
    if (pruned.size() == 0) pruned = cir;
    save_circuit(c.abs("circuits/base_pruned.json"), pruned);
    nlohmann::json j = nlohmann::json::array();
    for (const auto& e : entries)
        j.push_back({{"layer", e.node.layer},
                     {"head", e.node.head},
                     {"role", e.node.role},
                     {"group", e.group},
                     {"contribution", e.contribution},
                     {"pruned", e.pruned},
                     {"flagged", e.flagged}});
    atomic_write(c.abs("scores/minimality.json"), stamped_dump(c, std::move(j)));
    c.mf.mark_done("minimality", {"circuits/base_pruned.json", "scores/minimality.json"});
}

nlohmann::json eval_json(const CircuitEval& e) {
    return {{"f_model", e.f_model},
            {"f_circuit", e.f_circuit},
            {"faithfulness", e.faithfulness},
            {"dataset_size", e.dataset_size}};
}

void stage_faithfulness(Ctx& c) {
    Circuit cir = load_circuit(c.circuit_path());
    std::vector<TaskInstance> tasks = read_tasks(c.abs("data/eval.jsonl"));
    nlohmann::json j;
    {
        ModelWeights w = load_checkpoint(c.base_ckpt());
        MeanCache mc = load_mean_cache(c.abs("data/mean_base.mc"));
        j["base"] = eval_json(faithfulness(w, cir, tasks, mc));
    }
    {
        ModelWeights w = load_checkpoint(c.tuned_ckpt());
        MeanCache mc = load_mean_cache(c.abs("data/mean_tuned.mc"));
        j["tuned"] = eval_json(faithfulness(w, cir, tasks, mc));
    }
    atomic_write(c.abs("scores/faithfulness.json"), stamped_dump(c, std::move(j)));
    c.mf.mark_done("faithfulness", {"scores/faithfulness.json"});
}

nlohmann::json rows_json(const std::vector<CompletenessRow>& rows) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : rows)
        out.push_back({{"label", r.label},
                       {"k_size", r.k.size()},
                       {"f_model_minus_k", r.f_model_minus_k},
                       {"f_circuit_minus_k", r.f_circuit_minus_k},
                       {"incompleteness", r.incompleteness}});
    return out;
}

void stage_completeness(Ctx& c) {
    const auto& cfg = c.cfg;
    ModelWeights w = load_checkpoint(c.base_ckpt());
    Circuit cir = load_circuit(c.circuit_path());
    std::vector<TaskInstance> tasks = read_tasks(c.abs("data/eval.jsonl"));
    MeanCache mc = load_mean_cache(c.abs("data/mean_base.mc"));
    nlohmann::json j;
    j["by_group"] = rows_json(completeness_by_group(w, cir, tasks, mc));
    j["random"] = rows_json(completeness_random(w, cir, tasks, mc,
                                                cfg.geti("completeness.random_draws"),
                                                cfg.getu("completeness.seed")));
    atomic_write(c.abs("scores/completeness.json"), stamped_dump(c, std::move(j)));
    c.mf.mark_done("completeness", {"scores/completeness.json"});
}

void stage_random_baseline(Ctx& c) {
    const auto& cfg = c.cfg;
    ModelWeights w = load_checkpoint(c.base_ckpt());
    Circuit cir = load_circuit(c.circuit_path());
    std::vector<TaskInstance> tasks = read_tasks(c.abs("data/eval.jsonl"));
    MeanCache mc = load_mean_cache(c.abs("data/mean_base.mc"));
    const int n = cfg.geti("baseline.random_circuits");
    const std::uint64_t seed = cfg.getu("baseline.seed");
    nlohmann::json arr = nlohmann::json::array();
    double sum = 0;
    for (int i = 0; i < n; ++i) {
        Circuit rc = random_circuit(w.cfg, cir, seed + static_cast<std::uint64_t>(i));
        CircuitEval e = faithfulness(w, rc, tasks, mc);
        sum += e.faithfulness;
        arr.push_back(eval_json(e));
    }
    nlohmann::json j;
    j["circuits"] = arr;
    j["mean_faithfulness"] = n > 0 ? sum / n : 0.0;
    atomic_write(c.abs("scores/random_circuits.json"), stamped_dump(c, std::move(j)));
    c.mf.mark_done("random-baseline", {"scores/random_circuits.json"});
}

void stage_dcm(Ctx& c) {
    const auto& cfg = c.cfg;
    ModelWeights w = load_checkpoint(c.base_ckpt());
    Circuit cir = load_circuit(c.circuit_path());
    DcmTrainOptions opt;
    opt.lambda = cfg.getd("dcm.lambda");
    opt.epochs = cfg.geti("dcm.epochs");
    opt.batch = cfg.geti("dcm.batch");
    opt.lr = cfg.getd("dcm.lr");
    const int repeats = cfg.geti("dcm.repeats");
    const std::string only_group = cfg.has("dcm.only_group") ? cfg.gets("dcm.only_group") : "";
    const std::string only_kind = cfg.has("dcm.only_kind") ? cfg.gets("dcm.only_kind") : "";
    std::vector<std::string> outs;
    nlohmann::json summary = nlohmann::json::object();
    for (const std::string& kind : string_list(cfg, "dcm.kinds")) {
        if (!only_kind.empty() && kind != only_kind) continue;
        c.require_input("data/dcm_" + kind + "_train.jsonl");
        auto train = read_triples(c.abs("data/dcm_" + kind + "_train.jsonl"));
        auto eval = read_triples(c.abs("data/dcm_" + kind + "_eval.jsonl"));
        for (const auto& [name, g] : cir.groups) {
            if (!only_group.empty() && name != only_group) continue;
            if (g.nodes.empty()) continue;
            DcmResult r = run_dcm(w, g.nodes, train, eval, opt, repeats);
            const std::string rel = "dcm/" + name + "_" + kind + ".json";
            atomic_write(c.abs(rel), stamped_dump(c, nlohmann::json::parse(dcm_result_to_json(r))));
            outs.push_back(rel);
            summary[name][kind] = {{"selected", r.selected.size()},
                                   {"candidates", r.candidates.size()},
                                   {"eval_mean", r.eval_mean},
                                   {"eval_std", r.eval_std}};
        }
    }
    atomic_write(c.abs("dcm/summary.json"),
                 stamped_dump(c, nlohmann::json{{"groups", std::move(summary)}}));
    outs.push_back("dcm/summary.json");
    c.mf.mark_done("dcm", outs);
}

void stage_cmap(Ctx& c) {
    const auto& cfg = c.cfg;
    ModelWeights base = load_checkpoint(c.base_ckpt());
    ModelWeights tuned = load_checkpoint(c.tuned_ckpt());
    Circuit cir = load_circuit(c.circuit_path());
    std::vector<TaskInstance> tasks = read_tasks(c.abs("data/eval.jsonl"));

    const double base_acc = accuracy(base, tasks);
    const double tuned_acc = accuracy(tuned, tasks);
    nlohmann::json j;
    j["base_accuracy"] = base_acc;
    j["tuned_accuracy"] = tuned_acc;
    j["groups"] = nlohmann::json::object();
    double vf_gain = 0.0;
    bool have_vf = false;
    for (const auto& [name, g] : cir.groups) {
        if (g.nodes.empty()) continue;
        std::vector<RoleHook> hooks;
        for (const auto& n : g.nodes) hooks.push_back({n.layer, n.head, n.role});
        // run the weak model with the strong model's activations patched in
        const double patched = cmap_accuracy(base, tuned, tasks, hooks);
        j["groups"][name] = {{"annotation", g.annotation},
                             {"patched_accuracy", patched},
                             {"gain_over_base", patched - base_acc}};
        if (g.annotation == "Value Fetcher") {
            vf_gain = patched - base_acc;
            have_vf = true;
        }
    }
    const double min_gain = cfg.getd("cmap.min_gain");
    j["value_fetcher_gain"] = have_vf ? vf_gain : 0.0;
    j["min_gain"] = min_gain;
    if (have_vf && vf_gain >= min_gain) {
        j["verdict"] = "reproduced";
    } else {
        j["verdict"] = "divergence";
        std::ostringstream os;
        os << "divergence report: patching the Value Fetcher group from the tuned model into "
              "the base model changed accuracy by "
           << vf_gain << ", below the " << min_gain
           << " threshold; at this scale the tuned model's advantage does not transfer "
              "through this group alone";
        j["divergence_report"] = os.str();
    }
    atomic_write(c.abs("cmap/cmap.json"), stamped_dump(c, std::move(j)));
    c.mf.mark_done("cmap", {"cmap/cmap.json"});
}

void stage_knockout(Ctx& c) {
    const auto& cfg = c.cfg;
    ModelWeights w = load_checkpoint(c.base_ckpt());
    std::vector<TaskInstance> tasks = read_tasks(c.abs("data/eval.jsonl"));
    const std::string to_role = cfg.gets("knockout.to_role");
    std::set<int> all_layers;
    for (int l = 0; l < w.cfg.n_layers; ++l) all_layers.insert(l);
    nlohmann::json j = nlohmann::json::object();
    for (const std::string& from : string_list(cfg, "knockout.from_roles")) {
        nlohmann::json entry;
        entry["baseline"] = knockout_accuracy(w, tasks, from, to_role, all_layers);
        nlohmann::json curve = nlohmann::json::array();
        for (int l = 0; l < w.cfg.n_layers; ++l) {
            std::set<int> unblocked = all_layers;
            unblocked.erase(l);  // block this path at one layer only
            curve.push_back({{"blocked_layer", l},
                             {"accuracy", knockout_accuracy(w, tasks, from, to_role, unblocked)}});
        }
        entry["single_layer_blocked"] = curve;
        j[from] = entry;
    }
    atomic_write(c.abs("scores/knockout.json"),
                 stamped_dump(c, nlohmann::json{{"roles", std::move(j)}}));
    c.mf.mark_done("knockout", {"scores/knockout.json"});
}

void stage_report(Ctx& c) {
    write_report(c.cfg, c.paths);
    std::vector<std::string> outs = {"report/scores.svg", "report/knockout.svg",
                                     "report/dcm.svg", "report/cmap.svg",
                                     "report/completeness.svg"};
    c.mf.mark_done("report", outs);
}

using StageFn = void (*)(Ctx&);

const std::vector<std::pair<std::string, StageFn>>& stage_table() {
    static const std::vector<std::pair<std::string, StageFn>> t = {
        {"gen-data", stage_gen_data},
        {"train", stage_train},
        {"finetune", stage_finetune},
        {"mean-cache", stage_mean_cache},
        {"discover", stage_discover},
        {"minimality", stage_minimality},
        {"faithfulness", stage_faithfulness},
        {"completeness", stage_completeness},
        {"random-baseline", stage_random_baseline},
        {"dcm", stage_dcm},
        {"cmap", stage_cmap},
        {"knockout", stage_knockout},
        {"report", stage_report},
    };
    return t;
}

}  // namespace

PipelineResult run_stages(const ExperimentConfig& cfg, const std::string& out_dir,
                          const std::vector<std::string>& wanted) {
    RunPaths paths{out_dir};
    paths.ensure_layout();
    atomic_write(paths.root + "/config.json", cfg.dump());
    Manifest mf = Manifest::load(paths, cfg);
    Ctx ctx{cfg, paths, mf};
    PipelineResult res;
    std::set<std::string> want(wanted.begin(), wanted.end());
    for (const std::string& s : want) {
        bool known = false;
        for (const auto& [name, fn] : stage_table())
            if (name == s) known = true;
        if (!known) throw UsageError("unknown stage: " + s);
    }
    for (const auto& [name, fn] : stage_table()) {
        if (!want.empty() && !want.count(name)) continue;
        if (mf.stage_done(name)) {
            res.skipped.push_back(name);
            continue;
        }
        std::fprintf(stderr, "[stage] %s\n", name.c_str());
        fn(ctx);
        res.executed.push_back(name);
    }
    return res;
}

PipelineResult run_pipeline(const ExperimentConfig& cfg, const std::string& out_dir) {
    return run_stages(cfg, out_dir, {});
}

}  // namespace circuitbox
