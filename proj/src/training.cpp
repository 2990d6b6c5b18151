#include "pfdetr/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include <fmt/format.h>

namespace pfdetr {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) { return fmt::format("{:.17g}", v); }

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used == v.size() && std::isfinite(d)) return d;
    } catch (const std::exception&) {
    }
    throw ConfigError(fmt::format("{}: expected a number, got '{}'", key, v));
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
        throw ConfigError(fmt::format("{}: expected a non-negative integer, got '{}'", key, v));
    try {
        return std::stoull(v);
    } catch (const std::exception&) {
        throw ConfigError(fmt::format("{}: integer out of range '{}'", key, v));
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw ConfigError(fmt::format("{}: expected true/false, got '{}'", key, v));
}

struct Field {
    std::string key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

Field size_field(std::string key, std::size_t RunConfig::*member) {
    return {key, [member](const RunConfig& c) { return std::to_string(c.*member); },
            [member, key](RunConfig& c, const std::string& v) { c.*member = to_uint(key, v); }};
}

template <class Owner>
Field nested_size(std::string key, Owner RunConfig::*owner, std::size_t Owner::*member) {
    return {key, [=](const RunConfig& c) { return std::to_string(c.*owner.*member); },
            [=](RunConfig& c, const std::string& v) { c.*owner.*member = to_uint(key, v); }};
}

template <class Owner>
Field nested_double(std::string key, Owner RunConfig::*owner, double Owner::*member) {
    return {key, [=](const RunConfig& c) { return fmt_double(c.*owner.*member); },
            [=](RunConfig& c, const std::string& v) { c.*owner.*member = to_double(key, v); }};
}

Field double_field(std::string key, double RunConfig::*member) {
    return {key, [member](const RunConfig& c) { return fmt_double(c.*member); },
            [member, key](RunConfig& c, const std::string& v) { c.*member = to_double(key, v); }};
}

Field bool_field(std::string key, bool RunConfig::*member) {
    return {key, [member](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); },
            [member, key](RunConfig& c, const std::string& v) { c.*member = to_bool(key, v); }};
}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = [] {
        std::vector<Field> f;
        f.push_back({"seed", [](const RunConfig& c) { return std::to_string(c.seed); },
                     [](RunConfig& c, const std::string& v) { c.seed = to_uint("seed", v); }});
        f.push_back(bool_field("deterministic", &RunConfig::deterministic));
        // model
        f.push_back(nested_size("input_dim", &RunConfig::model, &ModelConfig::input_dim));
        f.push_back(nested_size("model_dim", &RunConfig::model, &ModelConfig::model_dim));
        f.push_back(nested_size("heads", &RunConfig::model, &ModelConfig::heads));
        f.push_back(nested_size("ffn_dim", &RunConfig::model, &ModelConfig::ffn_dim));
        f.push_back(nested_size("encoder_layers", &RunConfig::model, &ModelConfig::encoder_layers));
        f.push_back(nested_size("decoder_layers", &RunConfig::model, &ModelConfig::decoder_layers));
        f.push_back(nested_size("queries", &RunConfig::model, &ModelConfig::queries));
        f.push_back(nested_size("classes", &RunConfig::model, &ModelConfig::classes));
        f.push_back(nested_size("hybrid_queries", &RunConfig::model, &ModelConfig::hybrid_queries));
        f.push_back(nested_double("anchor_width", &RunConfig::model, &ModelConfig::anchor_width));
        f.push_back(nested_double("encoder_anchor_width", &RunConfig::model,
                                  &ModelConfig::encoder_anchor_width));
        // objective
        f.push_back(bool_field("stable", &RunConfig::stable));
        f.push_back(bool_field("hybrid", &RunConfig::hybrid));
        f.push_back(bool_field("two_stage", &RunConfig::two_stage));
        f.push_back(size_field("hybrid_k", &RunConfig::hybrid_k));
        f.push_back(double_field("hybrid_weight", &RunConfig::hybrid_weight));
        f.push_back(nested_double("lambda_encoder_sa", &RunConfig::feedback, &FeedbackConfig::encoder_sa));
        f.push_back(nested_double("lambda_decoder_sa", &RunConfig::feedback, &FeedbackConfig::decoder_sa));
        f.push_back(nested_double("lambda_decoder_ca", &RunConfig::feedback, &FeedbackConfig::decoder_ca));
        f.push_back({"feedback_target", [](const RunConfig& c) { return to_string(c.feedback.target); },
                     [](RunConfig& c, const std::string& v) {
                         try {
                             c.feedback.target = parse_feedback_target(v);
                         } catch (const std::invalid_argument& e) {
                             throw ConfigError(std::string("feedback_target: ") + e.what());
                         }
                     }});
        // synthetic data
        f.push_back(nested_size("videos", &RunConfig::synth, &SyntheticSpec::videos));
        f.push_back(nested_size("min_length", &RunConfig::synth, &SyntheticSpec::min_length));
        f.push_back(nested_size("max_length", &RunConfig::synth, &SyntheticSpec::max_length));
        f.push_back(nested_size("min_actions", &RunConfig::synth, &SyntheticSpec::min_actions));
        f.push_back(nested_size("max_actions", &RunConfig::synth, &SyntheticSpec::max_actions));
        f.push_back(nested_double("min_fraction", &RunConfig::synth, &SyntheticSpec::min_fraction));
        f.push_back(nested_double("max_fraction", &RunConfig::synth, &SyntheticSpec::max_fraction));
        f.push_back(nested_double("snr", &RunConfig::synth, &SyntheticSpec::snr));
        f.push_back(nested_double("seconds_per_step", &RunConfig::synth, &SyntheticSpec::seconds_per_step));
        f.push_back(nested_size("signature_seed", &RunConfig::synth, &SyntheticSpec::signature_seed));
        // sequence handling
        f.push_back({"mode", [](const RunConfig& c) { return to_string(c.mode); },
                     [](RunConfig& c, const std::string& v) {
                         try {
                             c.mode = parse_sequence_mode(v);
                         } catch (const std::invalid_argument& e) {
                             throw ConfigError(std::string("mode: ") + e.what());
                         }
                     }});
        f.push_back(size_field("window", &RunConfig::window));
        f.push_back(size_field("overlap", &RunConfig::overlap));
        // optimization
        f.push_back(size_field("batch_size", &RunConfig::batch_size));
        f.push_back(size_field("epochs", &RunConfig::epochs));
        f.push_back(size_field("warmup_epochs", &RunConfig::warmup_epochs));
        f.push_back(double_field("lr", &RunConfig::lr));
        f.push_back(double_field("min_lr", &RunConfig::min_lr));
        f.push_back(double_field("weight_decay", &RunConfig::weight_decay));
        f.push_back(double_field("grad_clip", &RunConfig::grad_clip));
        // evaluation and diagnostics
        f.push_back({"probe_dir", [](const RunConfig& c) { return c.probe_dir; },
                     [](RunConfig& c, const std::string& v) { c.probe_dir = v; }});
        f.push_back(size_field("probe_size", &RunConfig::probe_size));
        f.push_back(size_field("top_k", &RunConfig::top_k));
        f.push_back({"thresholds",
                     [](const RunConfig& c) {
                         std::string s;
                         for (std::size_t i = 0; i < c.thresholds.size(); ++i)
                             s += (i ? "," : "") + fmt_double(c.thresholds[i]);
                         return s;
                     },
                     [](RunConfig& c, const std::string& v) {
                         std::vector<double> t;
                         std::istringstream is(v);
                         std::string item;
                         while (std::getline(is, item, ','))
                             t.push_back(to_double("thresholds", trim(item)));
                         c.thresholds = std::move(t);
                     }});
        f.push_back(size_field("diagnose_samples", &RunConfig::diagnose_samples));
        return f;
    }();
    return table;
}

const Field& field(const std::string& key) {
    for (const auto& f : fields())
        if (f.key == key) return f;
    throw ConfigError("unknown config key '" + key + "'");
}

// Deterministic Fisher–Yates on top of uniform01.
std::vector<std::size_t> permutation(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        const auto j = std::min(i - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i)));
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

void add_into(LossBreakdown& acc, const LossBreakdown& b, double w) {
    acc.classification += w * b.classification;
    acc.l1 += w * b.l1;
    acc.iou += w * b.iou;
    acc.aux_layers += w * b.aux_layers;
    acc.hybrid += w * b.hybrid;
    acc.encoder += w * b.encoder;
    acc.detr += w * b.detr;
    acc.encoder_sa += w * b.encoder_sa;
    acc.decoder_sa += w * b.decoder_sa;
    acc.decoder_ca += w * b.decoder_ca;
    acc.total += w * b.total;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    os << text;
    if (!os) throw DataError("failed writing " + path.string());
}

}  // namespace

// ---- RunConfig -------------------------------------------------------------

RunConfig::RunConfig() { model.hybrid_queries = 2 * model.queries; }

void RunConfig::validate() const {
    try {
        model_config().validate();
        feedback.validate();
        synth_spec().validate();
    } catch (const DataError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (warmup_epochs > epochs) throw ConfigError("warmup_epochs must not exceed epochs");
    if (!(lr > 0.0) || min_lr < 0.0 || min_lr > lr) throw ConfigError("need 0 <= min_lr <= lr, lr > 0");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (grad_clip < 0.0) throw ConfigError("grad_clip must be non-negative");
    if (window == 0 || overlap >= window) throw ConfigError("need 0 <= overlap < window");
    if (hybrid && model.hybrid_queries == 0) throw ConfigError("hybrid enabled with hybrid_queries = 0");
    if (hybrid && hybrid_k == 0) throw ConfigError("hybrid_k must be >= 1");
    if (hybrid_weight < 0.0) throw ConfigError("hybrid_weight must be non-negative");
    if (top_k == 0) throw ConfigError("top_k must be >= 1");
    if (thresholds.empty()) throw ConfigError("thresholds must not be empty");
    for (double t : thresholds)
        if (!(t > 0.0 && t < 1.0)) throw ConfigError("thresholds must lie in (0,1)");
}

ModelConfig RunConfig::model_config() const {
    ModelConfig m = model;
    if (!hybrid) m.hybrid_queries = 0;
    return m;
}

ObjectiveOptions RunConfig::objective_options() const {
    ObjectiveOptions o;
    o.stable = stable;
    o.two_stage = two_stage;
    o.hybrid_k = hybrid_k;
    o.hybrid_weight = hybrid_weight;
    o.feedback = feedback;
    return o;
}

SyntheticSpec RunConfig::synth_spec() const {
    SyntheticSpec s = synth;
    s.input_dim = model.input_dim;
    s.classes = model.classes;
    s.seed = seed;
    return s;
}

void RunConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, trim(value)); }

std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
    static const std::vector<std::string> k = [] {
        std::vector<std::string> out;
        for (const auto& f : fields()) out.push_back(f.key);
        return out;
    }();
    return k;
}

std::string RunConfig::to_text() const {
    std::string s;
    for (const auto& f : fields()) s += f.key + " = " + f.get(*this) + "\n";
    return s;
}

void RunConfig::apply_text(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(fmt::format("config line {}: expected key = value", lineno));
        set(trim(line.substr(0, eq)), line.substr(eq + 1));
    }
}

void RunConfig::save(const fs::path& path) const { write_text(path, to_text()); }

RunConfig RunConfig::load(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    RunConfig c;
    c.apply_text(ss.str());
    return c;
}

// ---- training --------------------------------------------------------------

double learning_rate(const RunConfig& cfg, std::size_t step, std::size_t steps_per_epoch) {
    const std::size_t total = cfg.epochs * steps_per_epoch;
    const std::size_t warm = cfg.warmup_epochs * steps_per_epoch;
    if (step < warm) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warm);
    const std::size_t span = total - warm;
    if (span == 0) return cfg.lr;
    const double progress = static_cast<double>(step - warm) / static_cast<double>(span);
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

void check_compatible(const Dataset& data, const RunConfig& cfg) {
    if (data.videos.empty()) throw DataError("dataset is empty");
    if (data.class_names.size() != cfg.model.classes)
        throw DataError(fmt::format("dataset has {} classes, config expects {}", data.class_names.size(),
                                    cfg.model.classes));
    for (const auto& v : data.videos)
        if (v.features.cols() != cfg.model.input_dim)
            throw DataError(fmt::format("video {} has feature width {}, config input_dim is {}", v.id,
                                        v.features.cols(), cfg.model.input_dim));
}

std::vector<TrainingSample> make_samples(const Dataset& data, const RunConfig& cfg) {
    std::vector<TrainingSample> out;
    for (std::size_t v = 0; v < data.videos.size(); ++v)
        for (auto& w : prepare_sequence(data.videos[v].features, cfg.mode, cfg.window, cfg.overlap)) {
            TrainingSample s;
            s.video = v;
            s.targets = window_targets(data.videos[v], w);
            s.window = std::move(w);
            out.push_back(std::move(s));
        }
    return out;
}

std::vector<std::string> metrics_header(const ModelConfig& model) {
    std::vector<std::string> h = {"epoch",     "lr",      "classification", "l1",         "iou",
                                  "aux_layers", "hybrid",  "encoder",        "detr",       "encoder_sa",
                                  "decoder_sa", "decoder_ca", "total",        "grad_norm",  "probe_map"};
    for (std::size_t l = 0; l < model.encoder_layers; ++l)
        h.push_back("div:" + provenance_tag(AttnKind::EncoderSelf, l));
    for (std::size_t l = 0; l < model.decoder_layers; ++l)
        h.push_back("div:" + provenance_tag(AttnKind::DecoderSelf, l));
    for (std::size_t l = 0; l < model.decoder_layers; ++l)
        h.push_back("div:" + provenance_tag(AttnKind::DecoderCross, l));
    return h;
}

std::string metrics_row(const EpochMetrics& m) {
    const LossBreakdown& b = m.loss;
    std::string s = std::to_string(m.epoch);
    for (double v : {m.lr, b.classification, b.l1, b.iou, b.aux_layers, b.hybrid, b.encoder, b.detr,
                     b.encoder_sa, b.decoder_sa, b.decoder_ca, b.total, m.grad_norm, m.probe_map})
        s += "," + fmt_double(v);
    for (AttnKind kind : {AttnKind::EncoderSelf, AttnKind::DecoderSelf, AttnKind::DecoderCross})
        for (const auto& e : m.diversity.entries)
            if (e.kind == kind) s += "," + fmt_double(e.mean);
    return s;
}

TrainResult train(DetrModel& model, const RunConfig& cfg, const Dataset& train_set,
                  const Dataset& probe_set, const TrainOptions& options) {
    cfg.validate();
    check_compatible(train_set, cfg);
    check_compatible(probe_set, cfg);

    const std::vector<TrainingSample> samples = make_samples(train_set, cfg);
    const std::size_t steps_per_epoch = (samples.size() + cfg.batch_size - 1) / cfg.batch_size;
    const ObjectiveOptions objective = cfg.objective_options();
    const std::vector<Tensor> probe = probe_features(probe_set, cfg, cfg.probe_size);
    Dataset probe_videos;
    probe_videos.class_names = probe_set.class_names;
    probe_videos.videos.assign(probe_set.videos.begin(),
                               probe_set.videos.begin() +
                                   static_cast<std::ptrdiff_t>(std::min(cfg.probe_size, probe_set.videos.size())));

    std::ofstream metrics;
    if (!options.out_dir.empty()) {
        fs::create_directories(options.out_dir);
        cfg.save(options.out_dir / "config.txt");
        metrics.open(options.out_dir / "metrics.csv");
        if (!metrics) throw DataError("cannot write metrics.csv in " + options.out_dir.string());
        const auto header = metrics_header(model.config());
        for (std::size_t i = 0; i < header.size(); ++i) metrics << (i ? "," : "") << header[i];
        metrics << '\n';
    }

    ad::AdamW hp;
    hp.weight_decay = cfg.weight_decay;
    ad::ParamStore& params = model.params();
    std::mt19937_64 shuffle_rng(cfg.seed ^ 0x9e37'79b9'7f4a'7c15ULL);
    TrainResult result;
    double best_map = -1.0;
    std::size_t step = 0;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const std::vector<std::size_t> order = permutation(samples.size(), shuffle_rng);
        EpochMetrics em;
        em.epoch = epoch;
        for (std::size_t first = 0; first < order.size(); first += cfg.batch_size, ++step) {
            const std::size_t last = std::min(order.size(), first + cfg.batch_size);
            const double inv = 1.0 / static_cast<double>(last - first);
            params.zero_grad();
            std::vector<LossBreakdown> parts(last - first);
            auto run_sample = [&](std::size_t i) {
                const TrainingSample& s = samples[order[first + i]];
                ad::Tape tape;
                const ModelOutput out = model.forward(tape, s.window.features, true);
                Objective obj = compute_objective(tape, out, s.targets, objective);
                if (!std::isfinite(obj.breakdown.total))
                    throw NumericalError(fmt::format("non-finite loss at epoch {} on video {}", epoch,
                                                     train_set.videos[s.video].id));
                tape.backward(obj.total);
                parts[i] = obj.breakdown;
                return tape;
            };
            if (cfg.deterministic) {
                for (std::size_t i = 0; i < last - first; ++i) run_sample(i).accumulate_param_grads(params);
            } else {
                std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
                for (std::size_t i = 0; i < last - first; ++i) {
                    try {
                        ad::Tape tape = run_sample(i);
#pragma omp critical(pfdetr_grad_accumulate)
                        tape.accumulate_param_grads(params);
                    } catch (...) {
#pragma omp critical(pfdetr_grad_failure)
                        if (!failure) failure = std::current_exception();
                    }
                }
                if (failure) std::rethrow_exception(failure);
            }
            for (const auto& p : parts) add_into(em.loss, p, 1.0);

            double norm2 = 0.0;
            for (auto& p : params)
                for (double& g : p.grad.data()) {
                    g *= inv;
                    norm2 += g * g;
                }
            const double norm = std::sqrt(norm2);
            if (!std::isfinite(norm)) throw NumericalError(fmt::format("non-finite gradient at epoch {}", epoch));
            em.grad_norm += norm;
            if (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) {
                const double scale = cfg.grad_clip / norm;
                for (auto& p : params)
                    for (double& g : p.grad.data()) g *= scale;
            }
            hp.lr = learning_rate(cfg, step, steps_per_epoch);
            em.lr = hp.lr;
            ad::adamw_step(params, hp);
        }
        LossBreakdown mean;
        add_into(mean, em.loss, 1.0 / static_cast<double>(samples.size()));
        em.loss = mean;
        em.grad_norm /= static_cast<double>(steps_per_epoch);
        em.diversity = diversity_curve(model, probe);
        em.probe_map = evaluate_model(model, probe_videos, cfg).average_map;

        if (!options.out_dir.empty()) {
            metrics << metrics_row(em) << '\n' << std::flush;
            if (em.probe_map > best_map) params.save(options.out_dir / "best.ckpt");
        }
        if (em.probe_map > best_map) {
            best_map = em.probe_map;
            result.best_epoch = epoch;
        }
        if (options.on_epoch) options.on_epoch(em);
        result.epochs.push_back(std::move(em));
        if (options.stop_after && options.stop_after(result.epochs.back())) break;
    }
    if (!options.out_dir.empty()) params.save(options.out_dir / "final.ckpt");
    return result;
}

// ---- inference -------------------------------------------------------------

std::vector<Detection> predict_video(const DetrModel& model, const VideoSample& video,
                                     const RunConfig& cfg) {
    const double seconds_per_step = video.duration / static_cast<double>(video.features.rows());
    std::vector<Detection> dets;
    for (const auto& w : prepare_sequence(video.features, cfg.mode, cfg.window, cfg.overlap)) {
        ad::Tape tape;
        const ModelOutput out = model.forward(tape, w.features, false);
        const LayerPrediction& last = out.decoder.back();
        const Tensor& logits = last.logits.value();
        const Tensor& anchors = last.anchors.value();
        for (std::size_t q = 0; q < logits.rows(); ++q) {
            const Interval p = anchor_to_interval(sigmoid(anchors(q, 0)), sigmoid(anchors(q, 1)));
            Interval sec{std::clamp((w.source_start + p.start * w.source_span) * seconds_per_step, 0.0, video.duration),
                         std::clamp((w.source_start + p.end * w.source_span) * seconds_per_step, 0.0, video.duration)};
            if (!(sec.end > sec.start)) continue;
            for (std::size_t c = 0; c < logits.cols(); ++c)
                dets.push_back({video.id, sec, c, sigmoid(logits(q, c))});
        }
    }
    return dets;
}

std::vector<Detection> run_inference(const DetrModel& model, const std::vector<VideoSample>& videos,
                                     const RunConfig& cfg) {
    std::vector<Detection> pooled;
    for (const auto& v : videos) {
        auto d = predict_video(model, v, cfg);
        pooled.insert(pooled.end(), std::make_move_iterator(d.begin()), std::make_move_iterator(d.end()));
    }
    return top_k(soft_nms(std::move(pooled)), cfg.top_k);
}

EvalReport evaluate_model(const DetrModel& model, const Dataset& data, const RunConfig& cfg,
                          std::vector<Detection>* detections) {
    std::vector<Detection> dets = run_inference(model, data.videos, cfg);
    EvalReport r = evaluate_map(dets, data.videos, data.class_names, cfg.thresholds);
    if (detections) *detections = std::move(dets);
    return r;
}

// ---- diagnostics -----------------------------------------------------------

std::vector<Tensor> probe_features(const Dataset& data, const RunConfig& cfg, std::size_t count) {
    const std::size_t n = count == 0 ? data.videos.size() : std::min(count, data.videos.size());
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < n; ++i)
        for (auto& w : prepare_sequence(data.videos[i].features, cfg.mode, cfg.window, cfg.overlap))
            out.push_back(std::move(w.features));
    return out;
}

void save_diversity_csv(const DiversityReport& report, const fs::path& path) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    os << "provenance,layer,mean,count\n";
    for (const auto& e : report.entries)
        os << fmt::format("{},{},{:.17g},{}\n", to_string(e.kind), e.layer, e.mean, e.count);
}

DiversityReport diagnose(const DetrModel& model, const Dataset& data, const RunConfig& cfg,
                         const fs::path& out_dir) {
    if (data.videos.empty()) throw DataError("dataset is empty");
    fs::create_directories(out_dir / "maps");
    std::vector<std::vector<AttentionMap>> per_sample;
    const std::size_t exported = std::min(cfg.diagnose_samples, data.videos.size());
    for (std::size_t v = 0; v < data.videos.size(); ++v) {
        const auto windows = prepare_sequence(data.videos[v].features, cfg.mode, cfg.window, cfg.overlap);
        for (std::size_t w = 0; w < windows.size(); ++w) {
            per_sample.push_back(inference_maps(model, windows[w].features));
            if (v >= exported) continue;
            for (const AttentionMap& m : per_sample.back()) {
                std::string kind = to_string(m.kind);
                const std::string stem =
                    fmt::format("{}_w{}_{}_L{}", data.videos[v].id, w, kind, m.layer);
                write_attention_map(out_dir / "maps" / (stem + ".attn"), m);
                write_heatmap_pgm(out_dir / "maps" / (stem + ".pgm"), m.matrix);
            }
        }
    }
    DiversityReport report = aggregate_diversity(per_sample);
    save_diversity_csv(report, out_dir / "diversity.csv");
    return report;
}

void collapse_attention(DetrModel& model) {
    for (auto& p : model.params()) {
        const std::string& n = p.name;
        for (const char* part : {".sa.q.", ".sa.k.", ".ca.q.", ".ca.k."})
            if (n.find(part) != std::string::npos) p.value.fill(0.0);
    }
}

}  // namespace pfdetr
