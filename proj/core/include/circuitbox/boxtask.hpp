#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace circuitbox {

/// Closed word-level vocabulary. One word (or punctuation mark) is one token.
struct Vocab {
    std::vector<std::string> tokens;
    std::unordered_map<std::string, int> ids;

    int the_, is_, in_, box_, contains_, comma_, period_, not_;
    std::vector<int> fillers;
    int first_digit, plus_, equals_;
    int first_label, n_labels;
    int first_object, n_objects;

    static Vocab standard();

    int size() const { return static_cast<int>(tokens.size()); }
    int label(int i) const { return first_label + i; }
    int object(int i) const { return first_object + i; }
    bool is_object(int id) const { return id >= first_object && id < first_object + n_objects; }
    bool is_label(int id) const { return id >= first_label && id < first_label + n_labels; }
    int id_of(const std::string& w) const;
    std::string decode(const std::vector<int>& toks) const;
};

/// Bias is negligible for our pool sizes; avoids std::uniform_int_distribution
/// so streams are identical across standard libraries.
inline int rand_below(std::mt19937_64& rng, int n) {
    return static_cast<int>(rng() % static_cast<std::uint64_t>(n));
}

struct TaskInstance {
    std::vector<int> tokens;
    int n_boxes = 0;
    struct Segment {
        int object;  // token id
        int label;   // token id
        int start;   // index of first token of the segment
    };
    std::vector<Segment> segments;
    int query_label = -1;  // token id
    int target = -1;       // token id
    int queried = -1;      // segment index
    // role -> token index: correct_object, prev_query_label, query_label, last
    std::map<std::string, int> positions;
    std::uint64_t seed = 0;
    int variant = 0;  // 0 = plain template, 1..11 = positional variant id
};

enum class DesKind { Object, Label, Position };

struct DesideratumTriple {
    std::string kind;  // "object", "label", "position", "positional1".."positional11"
    TaskInstance original;
    TaskInstance alternate;
    int target = -1;  // token id of the desideratum answer
};

TaskInstance gen_task(const Vocab& v, int n_boxes, std::uint64_t seed);
TaskInstance gen_task(const Vocab& v, int n_boxes, std::mt19937_64& rng);
/// Same template and length; labels, objects, and queried segment are all
/// re-randomized. The returned role map is copied from `task` so that
/// patching positions stay aligned with the original.
TaskInstance gen_noise_task(const Vocab& v, const TaskInstance& task, std::uint64_t seed);
DesideratumTriple gen_desideratum(const Vocab& v, DesKind kind, int n_boxes,
                                  std::uint64_t seed);
DesideratumTriple gen_positional_variant(const Vocab& v, int variant, int n_boxes,
                                         std::uint64_t seed);

std::string task_to_jsonl(const TaskInstance& t);
TaskInstance task_from_jsonl(const std::string& line);
std::string triple_to_jsonl(const DesideratumTriple& t);
DesideratumTriple triple_from_jsonl(const std::string& line);

}  // namespace circuitbox
