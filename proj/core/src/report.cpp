#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include <json.hpp>

#include "circuitbox/error.hpp"
#include "circuitbox/workbench.hpp"

namespace circuitbox {

namespace {

// fixed-precision formatting keeps renders byte-identical across runs
std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

const char* kPalette[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"};

struct Svg {
    std::string body;
    double width, height;

    Svg(double w, double h) : width(w), height(h) {
        body = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
               num(w) + "\" height=\"" + num(h) + "\" viewBox=\"0 0 " + num(w) + " " + num(h) +
               "\">\n<rect width=\"" + num(w) + "\" height=\"" + num(h) + "\" fill=\"white\"/>\n";
    }
    void line(double x1, double y1, double x2, double y2, const std::string& stroke,
              const std::string& extra = "") {
        body += "<line x1=\"" + num(x1) + "\" y1=\"" + num(y1) + "\" x2=\"" + num(x2) +
                "\" y2=\"" + num(y2) + "\" stroke=\"" + stroke + "\" " + extra + "/>\n";
    }
    void rect(double x, double y, double w, double h, const std::string& fill) {
        body += "<rect x=\"" + num(x) + "\" y=\"" + num(y) + "\" width=\"" + num(w) +
                "\" height=\"" + num(h) + "\" fill=\"" + fill + "\"/>\n";
    }
    void circle(double cx, double cy, double r, const std::string& fill) {
        body += "<circle cx=\"" + num(cx) + "\" cy=\"" + num(cy) + "\" r=\"" + num(r) +
                "\" fill=\"" + fill + "\"/>\n";
    }
    void text(double x, double y, const std::string& s, int size = 11,
              const std::string& anchor = "start") {
        body += "<text x=\"" + num(x) + "\" y=\"" + num(y) + "\" font-family=\"sans-serif\" font-size=\"" +
                std::to_string(size) + "\" text-anchor=\"" + anchor + "\">" + s + "</text>\n";
    }
    void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke) {
        body += "<polyline fill=\"none\" stroke=\"" + stroke + "\" stroke-width=\"1.5\" points=\"";
        for (const auto& [x, y] : pts) body += num(x) + "," + num(y) + " ";
        body += "\"/>\n";
    }
    std::string finish() { return body + "</svg>\n"; }
};

struct Frame {
    double x0 = 60, y0 = 30, x1 = 600, y1 = 350;
    double lo = 0, hi = 1;

    double px(double t) const { return x0 + t * (x1 - x0); }            // t in [0,1]
    double py(double v) const {                                          // v in [lo,hi]
        return y1 - (v - lo) / (hi - lo) * (y1 - y0);
    }
    void axes(Svg& s, const std::string& title) const {
        s.line(x0, y1, x1, y1, "#333333");
        s.line(x0, y0, x0, y1, "#333333");
        for (int i = 0; i <= 4; ++i) {
            double v = lo + (hi - lo) * i / 4.0;
            s.line(x0 - 3, py(v), x0, py(v), "#333333");
            s.text(x0 - 6, py(v) + 4, num(v), 10, "end");
        }
        s.text((x0 + x1) / 2, y0 - 12, title, 13, "middle");
    }
};

nlohmann::json load_json(const std::string& path) {
    try {
        return nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": " + e.what());
    }
}

void render_scores(const RunPaths& p) {
    Circuit cir = load_circuit(p.circuits() + "/base.json");
    std::vector<std::pair<std::string, double>> bars;
    double lo = 0;
    for (const auto& [name, g] : cir.groups)
        for (const auto& n : g.nodes) {
            bars.push_back({name, n.score});
            lo = std::min(lo, n.score);
        }
    Svg s(640, 400);
    Frame f;
    f.lo = lo * 1.1 - 1e-9;
    f.hi = 0.0;
    f.axes(s, "discovery patching scores by group");
    const double bw = (f.x1 - f.x0) / std::max<std::size_t>(1, bars.size());
    int ci = 0;
    std::string prev;
    int color = -1;
    for (std::size_t i = 0; i < bars.size(); ++i) {
        if (bars[i].first != prev) {
            prev = bars[i].first;
            ++color;
            s.text(f.x0 + i * bw + 2, f.y1 + 14, prev, 10);
        }
        const double top = f.py(0);
        const double bot = f.py(bars[i].second);
        s.rect(f.x0 + i * bw + 1, top, std::max(1.0, bw - 2), std::max(0.5, bot - top),
               kPalette[color % 6]);
        (void)ci;
    }
    atomic_write(p.report() + "/scores.svg", s.finish());
}

void render_knockout(const RunPaths& p) {
    nlohmann::json j = load_json(p.scores() + "/knockout.json").at("roles");
    Svg s(640, 400);
    Frame f;
    f.axes(s, "accuracy with one layer's attention path blocked");
    int ci = 0;
    double ly = 46;
    for (auto it = j.begin(); it != j.end(); ++it, ++ci) {
        const auto& curve = it.value().at("single_layer_blocked");
        const std::size_t n = curve.size();
        std::vector<std::pair<double, double>> pts;
        for (std::size_t i = 0; i < n; ++i)
            pts.push_back({f.px(n > 1 ? static_cast<double>(i) / (n - 1) : 0.5),
                           f.py(curve[i].at("accuracy").get<double>())});
        s.polyline(pts, kPalette[ci % 6]);
        const double base = it.value().at("baseline").get<double>();
        s.line(f.x0, f.py(base), f.x1, f.py(base), kPalette[ci % 6],
               "stroke-dasharray=\"4 3\"");
        s.text(f.x0 + 8, ly, it.key() + " &#8594; last", 10);
        s.rect(f.x0 + 90, ly - 8, 10, 10, kPalette[ci % 6]);
        ly += 14;
    }
    s.text((f.x0 + f.x1) / 2, f.y1 + 16, "blocked layer", 11, "middle");
    atomic_write(p.report() + "/knockout.svg", s.finish());
}

void render_dcm(const RunPaths& p) {
    nlohmann::json j = load_json(p.dcm() + "/summary.json").at("groups");
    Svg s(640, 400);
    Frame f;
    f.axes(s, "desideratum eval accuracy by group and kind");
    const std::size_t ngroups = j.size();
    const double gw = (f.x1 - f.x0) / std::max<std::size_t>(1, ngroups);
    std::size_t gi = 0;
    for (auto g = j.begin(); g != j.end(); ++g, ++gi) {
        const std::size_t nk = g.value().size();
        const double bw = gw / std::max<std::size_t>(1, nk + 1);
        std::size_t ki = 0;
        for (auto k = g.value().begin(); k != g.value().end(); ++k, ++ki) {
            const double v = k.value().at("eval_mean").get<double>();
            const double x = f.x0 + gi * gw + ki * bw + bw / 2;
            s.rect(x, f.py(v), std::max(1.0, bw - 2), f.y1 - f.py(v), kPalette[ki % 6]);
        }
        s.text(f.x0 + gi * gw + gw / 2, f.y1 + 14, g.key(), 10, "middle");
    }
    atomic_write(p.report() + "/dcm.svg", s.finish());
}

void render_cmap(const RunPaths& p) {
    nlohmann::json j = load_json(p.cmap() + "/cmap.json");
    Svg s(640, 400);
    Frame f;
    f.axes(s, "cross-model patched accuracy by group");
    const double base = j.at("base_accuracy").get<double>();
    const double tuned = j.at("tuned_accuracy").get<double>();
    s.line(f.x0, f.py(base), f.x1, f.py(base), "#888888", "stroke-dasharray=\"4 3\"");
    s.text(f.x1 - 4, f.py(base) - 4, "base " + num(base), 10, "end");
    s.line(f.x0, f.py(tuned), f.x1, f.py(tuned), "#333333", "stroke-dasharray=\"4 3\"");
    s.text(f.x1 - 4, f.py(tuned) - 4, "tuned " + num(tuned), 10, "end");
    const auto& groups = j.at("groups");
    const double bw = (f.x1 - f.x0) / std::max<std::size_t>(1, groups.size());
    std::size_t i = 0;
    for (auto g = groups.begin(); g != groups.end(); ++g, ++i) {
        const double v = g.value().at("patched_accuracy").get<double>();
        s.rect(f.x0 + i * bw + bw * 0.2, f.py(v), bw * 0.6, f.y1 - f.py(v), kPalette[i % 6]);
        s.text(f.x0 + i * bw + bw / 2, f.y1 + 14, g.key(), 10, "middle");
    }
    atomic_write(p.report() + "/cmap.svg", s.finish());
}

void render_completeness(const RunPaths& p) {
    nlohmann::json j = load_json(p.scores() + "/completeness.json");
    Svg s(640, 400);
    Frame f;
    f.axes(s, "completeness: F(M\\K) vs F(Cir\\K)");
    s.line(f.px(0), f.py(0), f.px(1), f.py(1), "#aaaaaa", "stroke-dasharray=\"3 3\"");
    auto draw = [&](const nlohmann::json& rows, const std::string& color) {
        for (const auto& r : rows)
            s.circle(f.x0 + r.at("f_model_minus_k").get<double>() * (f.x1 - f.x0),
                     f.py(r.at("f_circuit_minus_k").get<double>()), 3.5, color);
    };
    draw(j.at("by_group"), kPalette[0]);
    draw(j.at("random"), kPalette[1]);
    s.text(f.x0 + 8, 46, "group subsets", 10);
    s.rect(f.x0 + 90, 38, 10, 10, kPalette[0]);
    s.text(f.x0 + 8, 60, "random subsets", 10);
    s.rect(f.x0 + 90, 52, 10, 10, kPalette[1]);
    s.text((f.x0 + f.x1) / 2, f.y1 + 16, "F(M\\K)", 11, "middle");
    atomic_write(p.report() + "/completeness.svg", s.finish());
}

}  // namespace

void write_report(const ExperimentConfig&, const RunPaths& paths) {
    render_scores(paths);
    render_knockout(paths);
    render_dcm(paths);
    render_cmap(paths);
    render_completeness(paths);
}

}  // namespace circuitbox
