#include "circuitbox/boxtask.hpp"

#include <algorithm>
#include <set>

#include <json.hpp>

#include "circuitbox/error.hpp"

namespace circuitbox {

using nlohmann::json;

namespace {

const char* kObjects[] = {
    "apple",   "bag",      "ball",    "banana",  "basket",  "bell",    "belt",    "bench",
    "bill",    "bird",     "blanket", "bomb",    "book",    "boot",    "bottle",  "bowl",
    "brick",   "brush",    "bus",     "button",  "cable",   "camera",  "candle",  "cap",
    "car",     "card",     "carpet",  "chain",   "chair",   "clock",   "cloth",   "coat",
    "coffee",  "coin",     "comb",    "computer","cord",    "cross",   "crown",   "cup",
    "disk",    "document", "doll",    "dress",   "drug",    "drum",    "engine",  "fan",
    "feather", "file",     "flag",    "flower",  "fork",    "frame",   "game",    "gift",
    "glass",   "glove",    "guitar",  "hammer",  "hat",     "heart",   "helmet",  "hook",
    "horn",    "ice",      "iron",    "jacket",  "jar",     "kettle",  "key",     "kite",
    "knife",   "ladder",   "lamp",    "leaf",    "lemon",   "letter",  "lock",    "magazine",
    "magnet",  "map",      "mask",    "milk",    "mirror",  "nail",    "needle",  "net",
    "newspaper","note",    "orange",  "paint",   "painting","pan",     "pear",    "pen",
    "pencil",  "phone",    "photo",   "piano",   "pillow",  "pipe",    "plane",   "plate",
    "pot",     "radio",    "ring",    "rope",    "rose",    "ruler",   "scarf",   "shell",
    "shirt",   "shoe",     "soap",    "sock",    "spoon",   "stamp",   "stone",   "string",
    "suit",    "sword",    "tape",    "ticket",  "tie",     "towel",   "train",   "watch",
    "wheel",   "wire",
};

constexpr int kNumObjects = static_cast<int>(sizeof(kObjects) / sizeof(kObjects[0]));
constexpr int kMaxAttempts = 100;

/// k distinct indices from [0, n) by partial Fisher-Yates.
std::vector<int> sample_distinct(std::mt19937_64& rng, int n, int k) {
    std::vector<int> pool(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < k; ++i)
        std::swap(pool[static_cast<std::size_t>(i)],
                  pool[static_cast<std::size_t>(i + rand_below(rng, n - i))]);
    pool.resize(static_cast<std::size_t>(k));
    return pool;
}

struct SegTokens {
    std::vector<int> toks;
    int obj_off = -1;
    int label_off = -1;
    int object = -1;
    int label = -1;
};

SegTokens plain_segment(const Vocab& v, int obj, int label, int sep) {
    SegTokens s;
    s.toks = {v.the_, obj, v.is_, v.in_, v.box_, label, sep};
    s.obj_off = 1;
    s.label_off = 5;
    s.object = obj;
    s.label = label;
    return s;
}

/// Assembles an instance from a token prefix, rendered segments, optional
/// tokens before the query, and the query itself.
TaskInstance assemble(const Vocab& v, const std::vector<int>& prefix,
                      const std::vector<SegTokens>& segs, const std::vector<int>& pre_query,
                      int query_label, int queried) {
    TaskInstance t;
    t.n_boxes = static_cast<int>(segs.size());
    t.tokens = prefix;
    for (const SegTokens& s : segs) {
        TaskInstance::Segment seg;
        seg.object = s.object;
        seg.label = s.label;
        seg.start = static_cast<int>(t.tokens.size());
        t.segments.push_back(seg);
        t.tokens.insert(t.tokens.end(), s.toks.begin(), s.toks.end());
    }
    t.tokens.insert(t.tokens.end(), pre_query.begin(), pre_query.end());
    const int qstart = static_cast<int>(t.tokens.size());
    t.tokens.insert(t.tokens.end(), {v.box_, query_label, v.contains_, v.the_});
    t.query_label = query_label;
    t.queried = queried;
    t.target = segs[static_cast<std::size_t>(queried)].object;
    const int seg_start = t.segments[static_cast<std::size_t>(queried)].start;
    t.positions["correct_object"] =
        seg_start + segs[static_cast<std::size_t>(queried)].obj_off;
    t.positions["prev_query_label"] =
        seg_start + segs[static_cast<std::size_t>(queried)].label_off;
    t.positions["query_label"] = qstart + 1;
    t.positions["last"] = qstart + 3;
    return t;
}

TaskInstance plain_task(const Vocab& v, int n_boxes, std::mt19937_64& rng) {
    const auto labels = sample_distinct(rng, v.n_labels, n_boxes);
    const auto objs = sample_distinct(rng, v.n_objects, n_boxes);
    const int queried = rand_below(rng, n_boxes);
    std::vector<SegTokens> segs;
    for (int i = 0; i < n_boxes; ++i)
        segs.push_back(plain_segment(v, v.object(objs[static_cast<std::size_t>(i)]),
                                     v.label(labels[static_cast<std::size_t>(i)]),
                                     i + 1 == n_boxes ? v.period_ : v.comma_));
    return assemble(v, {}, segs, {},
                    v.label(labels[static_cast<std::size_t>(queried)]), queried);
}

}  // namespace

Vocab Vocab::standard() {
    Vocab v;
    auto add = [&v](const std::string& w) {
        v.ids[w] = static_cast<int>(v.tokens.size());
        v.tokens.push_back(w);
        return static_cast<int>(v.tokens.size()) - 1;
    };
    v.the_ = add("the");
    v.is_ = add("is");
    v.in_ = add("in");
    v.box_ = add("Box");
    v.contains_ = add("contains");
    v.comma_ = add(",");
    v.period_ = add(".");
    v.not_ = add("not");
    for (int i = 0; i < 8; ++i) v.fillers.push_back(add("w" + std::to_string(i)));
    v.first_digit = static_cast<int>(v.tokens.size());
    for (int i = 0; i < 10; ++i) add(std::to_string(i));
    v.plus_ = add("+");
    v.equals_ = add("=");
    v.first_label = static_cast<int>(v.tokens.size());
    v.n_labels = 26;
    for (int i = 0; i < 26; ++i) add(std::string(1, static_cast<char>('A' + i)));
    v.first_object = static_cast<int>(v.tokens.size());
    v.n_objects = kNumObjects;
    for (int i = 0; i < kNumObjects; ++i) add(kObjects[i]);
    return v;
}

int Vocab::id_of(const std::string& w) const {
    auto it = ids.find(w);
    if (it == ids.end()) throw UsageError("unknown token: " + w);
    return it->second;
}

std::string Vocab::decode(const std::vector<int>& toks) const {
    std::string out;
    for (std::size_t i = 0; i < toks.size(); ++i) {
        if (toks[i] < 0 || toks[i] >= size())
            throw UsageError("token id out of range: " + std::to_string(toks[i]));
        if (i) out += " ";
        out += tokens[static_cast<std::size_t>(toks[i])];
    }
    return out;
}

TaskInstance gen_task(const Vocab& v, int n_boxes, std::mt19937_64& rng) {
    if (n_boxes < 1 || n_boxes > v.n_labels || n_boxes > v.n_objects)
        throw UsageError("gen_task: n_boxes out of range: " + std::to_string(n_boxes));
    return plain_task(v, n_boxes, rng);
}

TaskInstance gen_task(const Vocab& v, int n_boxes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    TaskInstance t = gen_task(v, n_boxes, rng);
    t.seed = seed;
    return t;
}

TaskInstance gen_noise_task(const Vocab& v, const TaskInstance& task, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    TaskInstance t = plain_task(v, task.n_boxes, rng);
    t.seed = seed;
    t.positions = task.positions;  // keep patching positions aligned
    return t;
}

DesideratumTriple gen_desideratum(const Vocab& v, DesKind kind, int n_boxes,
                                  std::uint64_t seed) {
    if (n_boxes < 2) throw UsageError("gen_desideratum: needs n_boxes >= 2");
    std::mt19937_64 rng(seed);
    DesideratumTriple d;
    d.original = plain_task(v, n_boxes, rng);
    d.original.seed = seed;
    switch (kind) {
        case DesKind::Object: {
            d.kind = "object";
            // fresh objects: disjoint from the original's, so the alternate
            // answer is never already present in the original context
            std::set<int> used;
            for (const auto& s : d.original.segments) used.insert(s.object);
            for (int attempt = 0;; ++attempt) {
                if (attempt >= kMaxAttempts)
                    throw UsageError("gen_desideratum: object resampling exhausted");
                d.alternate = plain_task(v, n_boxes, rng);
                bool clash = false;
                for (const auto& s : d.alternate.segments)
                    if (used.count(s.object)) clash = true;
                if (!clash) break;
            }
            d.target = d.alternate.target;
            break;
        }
        case DesKind::Label: {
            d.kind = "label";
            // permute the original's label set over fresh objects; query a
            // label different from the original's query
            std::vector<int> labels;
            for (const auto& s : d.original.segments) labels.push_back(s.label);
            for (int attempt = 0;; ++attempt) {
                if (attempt >= kMaxAttempts)
                    throw UsageError("gen_desideratum: label resampling exhausted");
                std::vector<int> perm = sample_distinct(rng, n_boxes, n_boxes);
                const auto objs = sample_distinct(rng, v.n_objects, n_boxes);
                const int queried = rand_below(rng, n_boxes);
                const int qlabel = labels[static_cast<std::size_t>(
                    perm[static_cast<std::size_t>(queried)])];
                if (qlabel == d.original.query_label) continue;
                std::vector<SegTokens> segs;
                for (int i = 0; i < n_boxes; ++i)
                    segs.push_back(plain_segment(
                        v, v.object(objs[static_cast<std::size_t>(i)]),
                        labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])],
                        i + 1 == n_boxes ? v.period_ : v.comma_));
                d.alternate = assemble(v, {}, segs, {}, qlabel, queried);
                break;
            }
            d.target = -1;
            for (const auto& s : d.original.segments)
                if (s.label == d.alternate.query_label) d.target = s.object;
            if (d.target < 0)
                throw UsageError("gen_desideratum: alternate query label not in original");
            break;
        }
        case DesKind::Position: {
            d.kind = "position";
            for (int attempt = 0;; ++attempt) {
                if (attempt >= kMaxAttempts)
                    throw UsageError("gen_desideratum: position resampling exhausted");
                d.alternate = plain_task(v, n_boxes, rng);
                if (d.alternate.queried != d.original.queried) break;
            }
            d.target =
                d.original.segments[static_cast<std::size_t>(d.alternate.queried)].object;
            break;
        }
    }
    d.alternate.seed = seed;
    return d;
}

DesideratumTriple gen_positional_variant(const Vocab& v, int variant, int n_boxes,
                                         std::uint64_t seed) {
    if (variant < 1 || variant > 11)
        throw UsageError("gen_positional_variant: variant must be in 1..11");
    if (n_boxes < 3) throw UsageError("gen_positional_variant: needs n_boxes >= 3");
    std::mt19937_64 rng(seed);
    DesideratumTriple d;
    d.kind = "positional" + std::to_string(variant);
    d.original = plain_task(v, n_boxes, rng);
    d.original.seed = seed;

    const bool extra_start = variant == 4;
    const bool extra_end = variant == 5;
    const int alt_n = n_boxes + (extra_start || extra_end ? 1 : 0);

    for (int attempt = 0;; ++attempt) {
        if (attempt >= kMaxAttempts)
            throw UsageError("gen_positional_variant: resampling exhausted");
        const auto labels = sample_distinct(rng, v.n_labels, alt_n + 2);
        const auto objs = sample_distinct(rng, v.n_objects, alt_n);
        const int j = rand_below(rng, alt_n);  // queried segment in the alternate

        // segment index of the target inside the ORIGINAL
        int tidx;
        if (variant == 4)
            tidx = j - 1;
        else if (variant == 7 || variant == 11)
            tidx = j + 1;
        else
            tidx = j;
        if (tidx < 0 || tidx >= n_boxes) continue;
        if (extra_start && j == 0) continue;  // dummy segment cannot be queried
        if (extra_end && j == alt_n - 1) continue;
        if (tidx == d.original.queried) continue;  // degenerate, resample

        std::vector<int> prefix;
        std::vector<int> pre_query;
        std::vector<SegTokens> segs;
        const auto& F = v.fillers;
        if (variant == 1) prefix = {F[0], F[1], F[2], F[3], v.comma_};
        for (int i = 0; i < alt_n; ++i) {
            const int obj = v.object(objs[static_cast<std::size_t>(i)]);
            const int lab = v.label(labels[static_cast<std::size_t>(i)]);
            const bool last = i + 1 == alt_n;
            int sep = last ? v.period_ : v.comma_;
            SegTokens s;
            if (variant == 3 && i == j) {
                s.toks = {v.the_, obj, v.is_, F[0], F[1], v.in_, v.box_, lab, sep};
                s.obj_off = 1;
                s.label_off = 7;
            } else if (variant == 7 && i == j) {
                // the box mention of the queried segment is corrupted
                s.toks = {v.the_, obj, v.is_, v.in_, F[0], lab, sep};
                s.obj_off = 1;
                s.label_off = 5;
            } else if (variant == 8 && i == j) {
                s.toks = {v.box_, lab, v.contains_, v.the_, obj, sep};
                s.obj_off = 4;
                s.label_off = 1;
            } else if (variant == 9 && i == j) {
                s.toks = {v.the_, obj, v.is_, v.not_, v.in_, v.box_, lab, sep};
                s.obj_off = 1;
                s.label_off = 6;
            } else if (variant == 10) {
                s.toks = {v.the_, obj, v.is_, v.in_, v.box_, lab};
                s.obj_off = 1;
                s.label_off = 5;
            } else if (variant == 11) {
                s.toks = {v.the_, obj, v.comma_, v.is_, v.in_, v.box_, lab, sep};
                s.obj_off = 1;
                s.label_off = 6;
            } else {
                s = plain_segment(v, obj, lab, variant == 2 ? v.comma_ : sep);
            }
            s.object = obj;
            s.label = lab;
            if (variant == 6 && i == j) {
                // extra box mentions just before the correct segment
                const int lx = v.label(labels[static_cast<std::size_t>(alt_n)]);
                const int ly = v.label(labels[static_cast<std::size_t>(alt_n + 1)]);
                std::vector<int> clause = {F[0],    v.box_,   lx,      v.comma_,
                                           v.box_,  ly,       v.comma_};
                clause.insert(clause.end(), s.toks.begin(), s.toks.end());
                s.obj_off += 7;
                s.label_off += 7;
                s.toks = std::move(clause);
            }
            segs.push_back(std::move(s));
        }
        if (variant == 2) pre_query = {F[0], F[1], F[2], F[3], v.period_};
        if (variant == 10) pre_query = {v.period_};

        d.alternate =
            assemble(v, prefix, segs, pre_query,
                     v.label(labels[static_cast<std::size_t>(j)]), j);
        d.alternate.variant = variant;
        d.alternate.seed = seed;
        d.target = d.original.segments[static_cast<std::size_t>(tidx)].object;
        return d;
    }
}

namespace {

json task_to_json(const TaskInstance& t) {
    json segs = json::array();
    for (const auto& s : t.segments) segs.push_back({s.object, s.label, s.start});
    return json{{"tokens", t.tokens},           {"n_boxes", t.n_boxes},
                {"segments", segs},             {"query_label", t.query_label},
                {"target", t.target},           {"queried", t.queried},
                {"positions", t.positions},     {"seed", t.seed},
                {"variant", t.variant}};
}

TaskInstance task_from_json(const json& j) {
    TaskInstance t;
    t.tokens = j.at("tokens").get<std::vector<int>>();
    t.n_boxes = j.at("n_boxes").get<int>();
    for (const auto& s : j.at("segments"))
        t.segments.push_back({s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>()});
    t.query_label = j.at("query_label").get<int>();
    t.target = j.at("target").get<int>();
    t.queried = j.at("queried").get<int>();
    t.positions = j.at("positions").get<std::map<std::string, int>>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.variant = j.at("variant").get<int>();
    return t;
}

}  // namespace

std::string task_to_jsonl(const TaskInstance& t) { return task_to_json(t).dump(); }

TaskInstance task_from_jsonl(const std::string& line) {
    try {
        return task_from_json(json::parse(line));
    } catch (const json::exception& e) {
        throw IoError(std::string("bad task record: ") + e.what());
    }
}

std::string triple_to_jsonl(const DesideratumTriple& t) {
    return json{{"kind", t.kind},
                {"original", task_to_json(t.original)},
                {"alternate", task_to_json(t.alternate)},
                {"target", t.target}}
        .dump();
}

DesideratumTriple triple_from_jsonl(const std::string& line) {
    try {
        const json j = json::parse(line);
        DesideratumTriple d;
        d.kind = j.at("kind").get<std::string>();
        d.original = task_from_json(j.at("original"));
        d.alternate = task_from_json(j.at("alternate"));
        d.target = j.at("target").get<int>();
        return d;
    } catch (const json::exception& e) {
        throw IoError(std::string("bad triple record: ") + e.what());
    }
}

}  // namespace circuitbox
