#include "pfdetr/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include <fmt/format.h>

#include "pfdetr/binary_io.hpp"

namespace pfdetr {

namespace fs = std::filesystem;

namespace {

// Box–Muller on top of uniform01 so streams only depend on mt19937_64.
class NormalSource {
public:
    explicit NormalSource(std::mt19937_64& rng) : rng_(rng) {}
    double operator()() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform01(rng_);
        const double u2 = uniform01(rng_);
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    std::mt19937_64& rng_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

std::size_t uniform_index(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    const auto span = static_cast<double>(hi - lo + 1);
    return lo + std::min(hi - lo, static_cast<std::size_t>(uniform01(rng) * span));
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(line);
    while (std::getline(is, cur, sep)) out.push_back(cur);
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

double parse_double(const std::string& s, const std::string& what) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw DataError("malformed number '" + s + "' in " + what);
    }
}

std::size_t class_index(const std::vector<std::string>& names, const std::string& name) {
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw DataError("unknown class '" + name + "'");
    return static_cast<std::size_t>(it - names.begin());
}

// Score descending, earlier start, lower input index.
bool ranks_before(const Detection& a, std::size_t ia, const Detection& b, std::size_t ib) {
    if (a.score != b.score) return a.score > b.score;
    if (a.seconds.start != b.seconds.start) return a.seconds.start < b.seconds.start;
    return ia < ib;
}

}  // namespace

// ---- synthetic data --------------------------------------------------------

void SyntheticSpec::validate() const {
    if (videos == 0) throw std::invalid_argument("synthetic spec: video count must be positive");
    if (min_length == 0 || min_length > max_length)
        throw std::invalid_argument("synthetic spec: empty length range");
    if (input_dim == 0 || classes == 0 || classes > input_dim)
        throw std::invalid_argument("synthetic spec: need 0 < classes <= input_dim");
    if (min_actions > max_actions) throw std::invalid_argument("synthetic spec: empty action range");
    if (!(min_fraction > 0.0 && min_fraction <= max_fraction && max_fraction <= 1.0))
        throw std::invalid_argument("synthetic spec: fraction range must lie in (0,1]");
    if (!(snr > 0.0)) throw std::invalid_argument("synthetic spec: SNR must be positive");
    if (!(seconds_per_step > 0.0))
        throw std::invalid_argument("synthetic spec: seconds_per_step must be positive");
    if (static_cast<double>(min_actions) * min_fraction > 1.0)
        throw DataError("synthetic spec infeasible: actions cannot fit without overlap");
}

Tensor class_signatures(std::size_t classes, std::size_t dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    NormalSource normal(rng);
    Tensor sig(classes, dim);
    for (std::size_t c = 0; c < classes; ++c) {
        for (;;) {
            for (std::size_t j = 0; j < dim; ++j) sig(c, j) = normal();
            for (std::size_t p = 0; p < c; ++p) {
                double dot = 0.0;
                for (std::size_t j = 0; j < dim; ++j) dot += sig(c, j) * sig(p, j);
                for (std::size_t j = 0; j < dim; ++j) sig(c, j) -= dot * sig(p, j);
            }
            double n2 = 0.0;
            for (std::size_t j = 0; j < dim; ++j) n2 += sig(c, j) * sig(c, j);
            if (n2 > 1e-6) {
                const double inv = 1.0 / std::sqrt(n2);
                for (std::size_t j = 0; j < dim; ++j) sig(c, j) *= inv;
                break;
            }
        }
    }
    return sig;
}

Dataset synth_generate(const SyntheticSpec& spec) {
    spec.validate();
    constexpr int kLengthAttempts = 1000;
    std::mt19937_64 rng(spec.seed);
    NormalSource normal(rng);
    const Tensor sig = class_signatures(spec.classes, spec.input_dim, spec.signature_seed);

    Dataset data;
    for (std::size_t c = 0; c < spec.classes; ++c) data.class_names.push_back(fmt::format("class_{}", c));
    for (std::size_t v = 0; v < spec.videos; ++v) {
        VideoSample s;
        s.id = fmt::format("video_{:04d}", v);
        const std::size_t T = uniform_index(rng, spec.min_length, spec.max_length);
        s.duration = static_cast<double>(T) * spec.seconds_per_step;
        s.features = Tensor(T, spec.input_dim);
        for (double& x : s.features.data()) x = normal();

        const std::size_t n = uniform_index(rng, spec.min_actions, spec.max_actions);
        std::vector<std::size_t> lengths(n);
        std::size_t total = T + 1;
        for (int attempt = 0; attempt < kLengthAttempts && total > T; ++attempt) {
            total = 0;
            for (auto& len : lengths) {
                const double frac = spec.min_fraction + (spec.max_fraction - spec.min_fraction) * uniform01(rng);
                len = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(frac * static_cast<double>(T))), 1, T);
                total += len;
            }
        }
        if (total > T)
            throw DataError(fmt::format(
                "synthetic spec infeasible: cannot fit {} non-overlapping actions in {}", n, s.id));
        // Free steps are split into n + 1 random gaps around the actions.
        std::vector<std::size_t> cuts(n);
        for (auto& c : cuts) c = uniform_index(rng, 0, T - total);
        std::sort(cuts.begin(), cuts.end());
        std::size_t used = 0;
        for (std::size_t a = 0; a < n; ++a) {
            const std::size_t b = cuts[a] + used;
            const std::size_t e = b + lengths[a];
            used += lengths[a];
            const std::size_t label = uniform_index(rng, 0, spec.classes - 1);
            for (std::size_t t = b; t < e; ++t)
                for (std::size_t j = 0; j < spec.input_dim; ++j) s.features(t, j) += spec.snr * sig(label, j);
            s.annotations.push_back({label,
                                     {static_cast<double>(b) * spec.seconds_per_step,
                                      static_cast<double>(e) * spec.seconds_per_step}});
        }
        std::sort(s.annotations.begin(), s.annotations.end(),
                  [](const Annotation& x, const Annotation& y) { return x.seconds.start < y.seconds.start; });
        data.videos.push_back(std::move(s));
    }
    return data;
}

// ---- windowing -------------------------------------------------------------

std::string to_string(SequenceMode m) { return m == SequenceMode::Slice ? "slice" : "resize"; }

SequenceMode parse_sequence_mode(const std::string& s) {
    if (s == "slice") return SequenceMode::Slice;
    if (s == "resize") return SequenceMode::Resize;
    throw std::invalid_argument("unknown sequence mode '" + s + "'");
}

std::vector<SequenceWindow> prepare_sequence(const Tensor& features, SequenceMode mode,
                                             std::size_t length, std::size_t overlap) {
    const std::size_t T = features.rows();
    const std::size_t D = features.cols();
    if (T == 0) throw std::invalid_argument("prepare_sequence: empty feature sequence");
    if (length == 0 || overlap >= length)
        throw std::invalid_argument("prepare_sequence: overlap must be smaller than the window");
    std::vector<SequenceWindow> out;

    if (mode == SequenceMode::Resize) {
        SequenceWindow w;
        w.features = Tensor(length, D);
        w.source_start = 0.0;
        w.source_span = static_cast<double>(T);
        for (std::size_t i = 0; i < length; ++i) {
            const double x = (T == 1 || length == 1)
                                 ? 0.0
                                 : static_cast<double>(i) * static_cast<double>(T - 1) /
                                       static_cast<double>(length - 1);
            const std::size_t lo = std::min(static_cast<std::size_t>(x), T - 1);
            const std::size_t hi = std::min(lo + 1, T - 1);
            const double f = x - static_cast<double>(lo);
            for (std::size_t j = 0; j < D; ++j)
                w.features(i, j) = f == 0.0 ? features(lo, j)
                                            : (1.0 - f) * features(lo, j) + f * features(hi, j);
        }
        out.push_back(std::move(w));
        return out;
    }

    const std::size_t stride = length - overlap;
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (;;) {
        offsets.push_back(off);
        if (off + length >= T) break;
        off += stride;
        if (off + length > T) {
            offsets.push_back(T - length);
            break;
        }
    }
    for (std::size_t o : offsets) {
        SequenceWindow w;
        w.features = Tensor(length, D);
        for (std::size_t i = 0; i < length && o + i < T; ++i)
            for (std::size_t j = 0; j < D; ++j) w.features(i, j) = features(o + i, j);
        w.source_start = static_cast<double>(o);
        w.source_span = static_cast<double>(length);
        out.push_back(std::move(w));
    }
    return out;
}

std::vector<GroundTruthAction> window_targets(const VideoSample& video,
                                              const SequenceWindow& window) {
    const double steps_per_second =
        static_cast<double>(video.features.rows()) / std::max(video.duration, 1e-12);
    std::vector<GroundTruthAction> out;
    for (const auto& a : video.annotations) {
        const double s = (a.seconds.start * steps_per_second - window.source_start) / window.source_span;
        const double e = (a.seconds.end * steps_per_second - window.source_start) / window.source_span;
        const double cs = std::clamp(s, 0.0, 1.0);
        const double ce = std::clamp(e, 0.0, 1.0);
        if (!(ce > cs) || (ce - cs) < 0.5 * (e - s)) continue;
        out.push_back({a.label, {cs, ce}});
    }
    return out;
}

// ---- post-processing -------------------------------------------------------

std::vector<Detection> soft_nms(std::vector<Detection> dets, double iou_threshold) {
    std::map<std::pair<std::string, std::size_t>, std::size_t> group_of;
    std::vector<std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < dets.size(); ++i) {
        const auto key = std::make_pair(dets[i].video_id, dets[i].label);
        auto [it, inserted] = group_of.emplace(key, groups.size());
        if (inserted) groups.emplace_back();
        groups[it->second].push_back(i);
    }
    std::vector<Detection> out;
    out.reserve(dets.size());
    for (auto& remaining : groups) {
        while (!remaining.empty()) {
            auto best_it = remaining.begin();
            for (auto it = remaining.begin(); it != remaining.end(); ++it)
                if (ranks_before(dets[*it], *it, dets[*best_it], *best_it)) best_it = it;
            const std::size_t best = *best_it;
            remaining.erase(best_it);
            out.push_back(dets[best]);
            for (std::size_t i : remaining) {
                const double iou = tiou(dets[best].seconds, dets[i].seconds);
                if (iou > iou_threshold) dets[i].score *= (1.0 - iou);
            }
        }
    }
    return out;
}

std::vector<Detection> top_k(std::vector<Detection> dets, std::size_t k) {
    if (k == 0) throw std::invalid_argument("top_k: k must be >= 1");
    std::map<std::string, std::size_t> group_of;
    std::vector<std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < dets.size(); ++i) {
        auto [it, inserted] = group_of.emplace(dets[i].video_id, groups.size());
        if (inserted) groups.emplace_back();
        groups[it->second].push_back(i);
    }
    std::vector<Detection> out;
    for (auto& g : groups) {
        std::sort(g.begin(), g.end(), [&](std::size_t a, std::size_t b) {
            return ranks_before(dets[a], a, dets[b], b);
        });
        for (std::size_t i = 0; i < std::min(k, g.size()); ++i) out.push_back(dets[g[i]]);
    }
    return out;
}

// ---- evaluation ------------------------------------------------------------

double average_precision(const std::vector<bool>& ranked_tp, std::size_t positives) {
    if (positives == 0 || ranked_tp.empty()) return 0.0;
    const std::size_t n = ranked_tp.size();
    std::vector<double> prec(n + 2, 0.0), rec(n + 2, 0.0);
    double tp = 0.0, fp = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        (ranked_tp[i] ? tp : fp) += 1.0;
        prec[i + 1] = tp / (tp + fp);
        rec[i + 1] = tp / static_cast<double>(positives);
    }
    rec[n + 1] = 1.0;
    for (std::size_t i = n + 1; i-- > 0;) prec[i] = std::max(prec[i], prec[i + 1]);
    double ap = 0.0;
    for (std::size_t i = 1; i < n + 2; ++i)
        if (rec[i] != rec[i - 1]) ap += (rec[i] - rec[i - 1]) * prec[i];
    return ap;
}

EvalReport evaluate_map(const std::vector<Detection>& dets, const std::vector<VideoSample>& videos,
                        const std::vector<std::string>& class_names,
                        const std::vector<double>& thresholds) {
    for (double t : thresholds)
        if (!(t > 0.0 && t < 1.0)) throw std::invalid_argument("evaluate_map: threshold outside (0,1)");
    if (thresholds.empty()) throw std::invalid_argument("evaluate_map: no thresholds");
    const std::size_t C = class_names.size();
    EvalReport rep;
    rep.class_names = class_names;
    rep.thresholds = thresholds;
    rep.ap.assign(C, std::vector<double>(thresholds.size(), 0.0));
    rep.evaluated.assign(C, false);
    rep.map.assign(thresholds.size(), 0.0);

    std::map<std::string, const VideoSample*> by_id;
    for (const auto& v : videos) by_id[v.id] = &v;

    for (std::size_t c = 0; c < C; ++c) {
        std::map<std::string, std::vector<Interval>> gt;
        std::size_t positives = 0;
        for (const auto& v : videos)
            for (const auto& a : v.annotations)
                if (a.label == c) {
                    gt[v.id].push_back(a.seconds);
                    ++positives;
                }
        if (positives == 0) continue;
        rep.evaluated[c] = true;
        std::vector<std::size_t> order;
        for (std::size_t i = 0; i < dets.size(); ++i)
            if (dets[i].label == c) order.push_back(i);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
        for (std::size_t ti = 0; ti < thresholds.size(); ++ti) {
            std::map<std::string, std::vector<char>> used;
            for (const auto& [id, list] : gt) used[id].assign(list.size(), 0);
            std::vector<bool> tp;
            tp.reserve(order.size());
            for (std::size_t i : order) {
                const auto it = gt.find(dets[i].video_id);
                bool hit = false;
                if (it != gt.end()) {
                    double best = -1.0;
                    std::size_t best_j = 0;
                    auto& u = used[it->first];
                    for (std::size_t j = 0; j < it->second.size(); ++j) {
                        if (u[j]) continue;
                        const double iou = tiou(dets[i].seconds, it->second[j]);
                        if (iou > best) {
                            best = iou;
                            best_j = j;
                        }
                    }
                    if (best >= thresholds[ti]) {
                        u[best_j] = 1;
                        hit = true;
                    }
                }
                tp.push_back(hit);
            }
            rep.ap[c][ti] = average_precision(tp, positives);
        }
    }
    const auto n_eval = static_cast<double>(std::count(rep.evaluated.begin(), rep.evaluated.end(), true));
    for (std::size_t ti = 0; ti < thresholds.size(); ++ti) {
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c)
            if (rep.evaluated[c]) s += rep.ap[c][ti];
        rep.map[ti] = n_eval > 0 ? s / n_eval : 0.0;
    }
    double s = 0.0;
    for (double m : rep.map) s += m;
    rep.average_map = s / static_cast<double>(rep.map.size());
    return rep;
}

// ---- files -----------------------------------------------------------------

void write_features(const fs::path& path, const Tensor& features) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write " + path.string());
    os << "TAD-FEAT v1 " << features.rows() << ' ' << features.cols() << '\n';
    for (double v : features.data()) io::write_le(os, static_cast<float>(v));
    if (!os) throw DataError("failed writing " + path.string());
}

Tensor read_features(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path.string());
    std::string line;
    std::getline(is, line);
    std::istringstream hs(line);
    std::string magic, version;
    std::size_t T = 0, D = 0;
    if (!(hs >> magic >> version >> T >> D) || magic != "TAD-FEAT" || version != "v1")
        throw DataError(path.string() + ": malformed feature header '" + line + "'");
    Tensor f(T, D);
    try {
        for (double& v : f.data()) v = static_cast<double>(io::read_le<float>(is));
    } catch (const std::runtime_error&) {
        throw DataError(fmt::format("{}: payload shorter than {}x{} floats", path.string(), T, D));
    }
    if (is.peek() != std::char_traits<char>::eof())
        throw DataError(fmt::format("{}: payload longer than {}x{} floats", path.string(), T, D));
    return f;
}

void save_dataset(const Dataset& data, const fs::path& dir) {
    fs::create_directories(dir / "features");
    std::ofstream classes(dir / "classes.tsv");
    for (std::size_t c = 0; c < data.class_names.size(); ++c)
        classes << data.class_names[c] << '\t' << c << '\n';
    std::ofstream videos(dir / "videos.tsv");
    std::ofstream ann(dir / "annotations.tsv");
    for (const auto& v : data.videos) {
        videos << v.id << '\t' << fmt::format("{:.17g}", v.duration) << '\n';
        for (const auto& a : v.annotations)
            ann << fmt::format("{}\t{:.17g}\t{:.17g}\t{:.17g}\t{}\n", v.id, v.duration,
                               a.seconds.start, a.seconds.end, data.class_names.at(a.label));
        write_features(dir / "features" / (v.id + ".feat"), v.features);
    }
    if (!classes || !videos || !ann) throw DataError("failed writing dataset to " + dir.string());
}

Dataset load_dataset(const fs::path& dir) {
    Dataset data;
    std::ifstream classes(dir / "classes.tsv");
    if (!classes) throw DataError("missing " + (dir / "classes.tsv").string());
    std::string line;
    std::vector<std::pair<std::size_t, std::string>> ids;
    while (std::getline(classes, line)) {
        if (line.empty()) continue;
        const auto f = split(line, '\t');
        if (f.size() != 2) throw DataError("malformed class-map line '" + line + "'");
        ids.emplace_back(static_cast<std::size_t>(parse_double(f[1], "class map")), f[0]);
    }
    std::sort(ids.begin(), ids.end());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i].first != i) throw DataError("class ids must be 0..C-1 without gaps");
        data.class_names.push_back(ids[i].second);
    }

    std::map<std::string, std::size_t> index;
    std::ifstream videos(dir / "videos.tsv");
    if (!videos) throw DataError("missing " + (dir / "videos.tsv").string());
    while (std::getline(videos, line)) {
        if (line.empty()) continue;
        const auto f = split(line, '\t');
        if (f.size() != 2) throw DataError("malformed video line '" + line + "'");
        VideoSample v;
        v.id = f[0];
        v.duration = parse_double(f[1], "videos.tsv");
        if (!(v.duration > 0.0)) throw DataError("video " + v.id + " has non-positive duration");
        v.features = read_features(dir / "features" / (v.id + ".feat"));
        if (v.features.rows() == 0) throw DataError("video " + v.id + " has no features");
        if (!data.videos.empty() && v.features.cols() != data.videos.front().features.cols())
            throw DataError("video " + v.id + " feature width differs from the first video");
        index[v.id] = data.videos.size();
        data.videos.push_back(std::move(v));
    }

    std::ifstream ann(dir / "annotations.tsv");
    if (!ann) throw DataError("missing " + (dir / "annotations.tsv").string());
    while (std::getline(ann, line)) {
        if (line.empty()) continue;
        const auto f = split(line, '\t');
        if (f.size() != 5) throw DataError("malformed annotation line '" + line + "'");
        const auto it = index.find(f[0]);
        if (it == index.end()) throw DataError("annotation for unknown video '" + f[0] + "'");
        VideoSample& v = data.videos[it->second];
        const double dur = parse_double(f[1], "annotations.tsv");
        const double s = parse_double(f[2], "annotations.tsv");
        const double e = parse_double(f[3], "annotations.tsv");
        if (!(s < e)) throw DataError("annotation start >= end in '" + line + "'");
        if (s < 0.0 || e > dur || dur != v.duration)
            throw DataError("annotation outside [0, duration] in '" + line + "'");
        v.annotations.push_back({class_index(data.class_names, f[4]), {s, e}});
    }
    return data;
}

void save_results(const std::vector<Detection>& dets, const std::vector<std::string>& class_names,
                  const fs::path& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    os << "video_id,start,end,class,score\n";
    for (const auto& d : dets)
        os << fmt::format("{},{:.17g},{:.17g},{},{:.17g}\n", d.video_id, d.seconds.start,
                          d.seconds.end, class_names.at(d.label), d.score);
}

std::vector<Detection> load_results(const fs::path& path, const std::vector<std::string>& class_names) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open " + path.string());
    std::string line;
    std::getline(is, line);
    if (line != "video_id,start,end,class,score")
        throw DataError(path.string() + ": unexpected results header '" + line + "'");
    std::vector<Detection> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto f = split(line, ',');
        if (f.size() != 5) throw DataError("malformed results line '" + line + "'");
        Detection d;
        d.video_id = f[0];
        d.seconds = {parse_double(f[1], "results"), parse_double(f[2], "results")};
        d.label = class_index(class_names, f[3]);
        d.score = parse_double(f[4], "results");
        out.push_back(std::move(d));
    }
    return out;
}

void save_eval_report(const EvalReport& r, const fs::path& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    os << "class,threshold,ap\n";
    for (std::size_t c = 0; c < r.class_names.size(); ++c) {
        if (!r.evaluated[c]) continue;
        for (std::size_t t = 0; t < r.thresholds.size(); ++t)
            os << fmt::format("{},{:.2f},{:.17g}\n", r.class_names[c], r.thresholds[t], r.ap[c][t]);
    }
    os << "\nthreshold,mAP\n";
    for (std::size_t t = 0; t < r.thresholds.size(); ++t)
        os << fmt::format("{:.2f},{:.17g}\n", r.thresholds[t], r.map[t]);
    os << fmt::format("average,{:.17g}\n", r.average_map);
}

}  // namespace pfdetr
