#include <cstdint>
#include <map>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "circuitbox/model.hpp"

namespace circuitbox {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'C', 'S', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

struct NamedTensor {
    std::string name;
    Tensor t;
};

std::vector<NamedTensor> named_tensors(const ModelWeights& w) {
    std::vector<NamedTensor> out;
    out.push_back({"tok_emb", w.tok_emb});
    if (w.pos_emb.defined()) out.push_back({"pos_emb", w.pos_emb});
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        const LayerWeights& lw = w.layers[l];
        out.push_back({p + "attn_norm", lw.attn_norm});
        out.push_back({p + "wq", lw.wq});
        out.push_back({p + "wk", lw.wk});
        out.push_back({p + "wv", lw.wv});
        out.push_back({p + "wo", lw.wo});
        out.push_back({p + "mlp_norm", lw.mlp_norm});
        out.push_back({p + "w1", lw.w1});
        out.push_back({p + "w2", lw.w2});
    }
    out.push_back({"final_norm", w.final_norm});
    out.push_back({"unembed", w.unembed});
    return out;
}

json config_to_json(const ModelConfig& c) {
    return json{{"n_layers", c.n_layers},   {"n_heads", c.n_heads},
                {"d_model", c.d_model},     {"d_mlp", c.d_mlp},
                {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
                {"positional", c.positional}, {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_mlp = j.at("d_mlp").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.positional = j.at("positional").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelWeights& w) {
    const auto tensors = named_tensors(w);
    json manifest = json::array();
    std::uint64_t offset = 0;
    for (const NamedTensor& nt : tensors) {
        manifest.push_back({{"name", nt.name}, {"shape", nt.t.shape()}, {"offset", offset}});
        offset += nt.t.size() * sizeof(float);
    }
    const std::string header =
        json{{"config", config_to_json(w.cfg)}, {"tensors", manifest}}.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path);
    f.write(kMagic, 4);
    const std::uint32_t ver = kVersion;
    f.write(reinterpret_cast<const char*>(&ver), 4);
    const std::uint64_t hlen = header.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(header.data(), static_cast<std::streamsize>(header.size()));
    std::vector<float> buf;
    for (const NamedTensor& nt : tensors) {
        buf.resize(nt.t.size());
        const double* src = nt.t.data();
        for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(src[i]);
        f.write(reinterpret_cast<const char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!f) throw IoError("checkpoint write failed: " + path);
}

ModelWeights load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("not a checkpoint file: " + path);
    std::uint32_t ver = 0;
    f.read(reinterpret_cast<char*>(&ver), 4);
    if (ver != kVersion) throw IoError("unsupported checkpoint version");
    std::uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    std::string header(hlen, '\0');
    f.read(header.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw IoError("truncated checkpoint header: " + path);

    json j;
    try {
        j = json::parse(header);
    } catch (const json::exception& e) {
        throw IoError(std::string("bad checkpoint header: ") + e.what());
    }
    ModelWeights w;
    w.cfg = config_from_json(j.at("config"));
    w.cfg.validate();

    std::map<std::string, Tensor> by_name;
    for (const auto& entry : j.at("tensors")) {
        const auto shape = entry.at("shape").get<std::vector<int>>();
        std::vector<float> buf(shape_size(shape));
        f.read(reinterpret_cast<char*>(buf.data()),
               static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!f) throw IoError("truncated checkpoint payload: " + path);
        std::vector<double> vals(buf.begin(), buf.end());
        by_name[entry.at("name").get<std::string>()] = Tensor::from(shape, std::move(vals));
    }
    auto take = [&](const std::string& name) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw IoError("checkpoint missing tensor " + name);
        return it->second;
    };
    w.tok_emb = take("tok_emb");
    if (w.cfg.positional == "learned") w.pos_emb = take("pos_emb");
    for (int l = 0; l < w.cfg.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        LayerWeights lw;
        lw.attn_norm = take(p + "attn_norm");
        lw.wq = take(p + "wq");
        lw.wk = take(p + "wk");
        lw.wv = take(p + "wv");
        lw.wo = take(p + "wo");
        lw.mlp_norm = take(p + "mlp_norm");
        lw.w1 = take(p + "w1");
        lw.w2 = take(p + "w2");
        w.layers.push_back(std::move(lw));
    }
    w.final_norm = take("final_norm");
    w.unembed = take("unembed");
    return w;
}

}  // namespace circuitbox
