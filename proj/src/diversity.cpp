#include "pfdetr/diversity.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "pfdetr/binary_io.hpp"

namespace pfdetr {

namespace {

constexpr int kMaxSweeps = 50;
constexpr double kSweepTolerance = 1e-10;
constexpr double kGoldenTolerance = 1e-12;
constexpr int kGoldenMaxIterations = 200;

// Rows in lexicographic order of their values. Summing columns in this order
// makes every result depend only on the multiset of rows, so row
// permutations leave the metric bit-identical.
std::vector<std::size_t> canonical_rows(const Tensor& a) {
    std::vector<std::size_t> order(a.rows());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        const auto rx = a.row(x), ry = a.row(y);
        return std::lexicographical_compare(rx.begin(), rx.end(), ry.begin(), ry.end());
    });
    return order;
}

// Column and row absolute sums of A − 𝟙aᵀ, kept incrementally so that a
// single-coordinate move costs O(rows).
struct Residual {
    const Tensor& a;
    std::vector<std::size_t> order;
    std::vector<double> shift;
    std::vector<double> col_sums;
    std::vector<double> row_sums;

    Residual(const Tensor& m, std::vector<double> s)
        : a(m), order(canonical_rows(m)), shift(std::move(s)), col_sums(m.cols(), 0.0),
          row_sums(m.rows(), 0.0) {
        for (std::size_t i : order)
            for (std::size_t j = 0; j < a.cols(); ++j) {
                const double d = std::abs(a(i, j) - shift[j]);
                col_sums[j] += d;
                row_sums[i] += d;
            }
    }

    double norm() const {
        const double c = *std::max_element(col_sums.begin(), col_sums.end());
        const double r = *std::max_element(row_sums.begin(), row_sums.end());
        return std::sqrt(c * r);
    }

    double max_col_except(std::size_t j) const {
        double m = 0.0;
        for (std::size_t k = 0; k < col_sums.size(); ++k)
            if (k != j) m = std::max(m, col_sums[k]);
        return m;
    }

    // Norm after moving coordinate j to value x, without committing.
    double norm_with(std::size_t j, double x, double other_cols_max) const {
        double col_j = 0.0;
        double max_r = 0.0;
        for (std::size_t i : order) {
            const double aij = a(i, j);
            const double r = row_sums[i] - std::abs(aij - shift[j]) + std::abs(aij - x);
            col_j += std::abs(aij - x);
            max_r = std::max(max_r, r);
        }
        return std::sqrt(std::max(other_cols_max, col_j) * max_r);
    }

    void commit(std::size_t j, double x) {
        double col_j = 0.0;
        for (std::size_t i : order) {
            const double old_d = std::abs(a(i, j) - shift[j]);
            const double new_d = std::abs(a(i, j) - x);
            row_sums[i] += new_d - old_d;
            col_j += new_d;
        }
        col_sums[j] = col_j;
        shift[j] = x;
    }
};

// Smooth surrogate of the composite norm: log-sum-exp at temperature tau in
// place of both maxima and sqrt(x² + tau²) in place of |x|. Returns the
// value and, if asked, the gradient with respect to the shift vector.
class SmoothResidual {
public:
    SmoothResidual(const Tensor& a, const std::vector<std::size_t>& order)
        : a_(a), order_(order), col_(a.cols()), row_(a.rows()), wc_(a.cols()), wr_(a.rows()) {}

    double eval(const std::vector<double>& shift, double tau, std::vector<double>* grad) {
        std::fill(col_.begin(), col_.end(), 0.0);
        std::fill(row_.begin(), row_.end(), 0.0);
        for (std::size_t i : order_)
            for (std::size_t j = 0; j < a_.cols(); ++j) {
                const double x = a_(i, j) - shift[j];
                const double d = std::sqrt(x * x + tau * tau);
                col_[j] += d;
                row_[i] += d;
            }
        const double lc = soft_max(col_, wc_, tau, nullptr);
        const double lr = soft_max(row_, wr_, tau, &order_);
        const double f = std::sqrt(lc * lr);
        if (grad) {
            grad->assign(a_.cols(), 0.0);
            for (std::size_t i : order_)
                for (std::size_t j = 0; j < a_.cols(); ++j) {
                    const double x = a_(i, j) - shift[j];
                    (*grad)[j] -= (lr * wc_[j] + lc * wr_[i]) * x / std::sqrt(x * x + tau * tau);
                }
            for (double& g : *grad) g /= 2.0 * f;
        }
        return f;
    }

private:
    // Terms are added in `order` when given, so row sums stay permutation-exact.
    static double soft_max(const std::vector<double>& v, std::vector<double>& w, double tau,
                           const std::vector<std::size_t>* order) {
        const double m = *std::max_element(v.begin(), v.end());
        double z = 0.0;
        if (order) {
            for (std::size_t k : *order) z += w[k] = std::exp((v[k] - m) / tau);
        } else {
            for (std::size_t k = 0; k < v.size(); ++k) z += w[k] = std::exp((v[k] - m) / tau);
        }
        for (double& x : w) x /= z;
        return m + tau * std::log(z);
    }

    const Tensor& a_;
    const std::vector<std::size_t>& order_;
    std::vector<double> col_, row_, wc_, wr_;
};

constexpr double kSmoothingSchedule[] = {1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4};
constexpr int kSmoothSteps = 20;

// Backtracking gradient descent on the surrogate, temperature lowered in
// stages relative to the starting objective, each step clipped to the
// columns' value ranges.
std::vector<double> smoothed_descent(const Tensor& a, std::vector<double> shift, double scale,
                                     const std::vector<double>& lo, const std::vector<double>& hi) {
    const auto order = canonical_rows(a);
    SmoothResidual sr(a, order);
    std::vector<double> grad, trial(shift.size());
    double step = 1.0;
    for (double rel : kSmoothingSchedule) {
        const double tau = rel * scale;
        double f = sr.eval(shift, tau, &grad);
        for (int it = 0; it < kSmoothSteps; ++it) {
            double g2 = 0.0;
            for (double g : grad) g2 += g * g;
            if (g2 == 0.0) break;
            step *= 2.0;
            double ft = f;
            while (step > 1e-14) {
                for (std::size_t j = 0; j < shift.size(); ++j)
                    trial[j] = std::clamp(shift[j] - step * grad[j], lo[j], hi[j]);
                ft = sr.eval(trial, tau, nullptr);
                if (ft <= f - 0.25 * step * g2) break;
                step *= 0.5;
            }
            if (!(ft < f)) break;
            shift = trial;
            f = sr.eval(shift, tau, &grad);
        }
    }
    return shift;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

double composite_norm(const Tensor& a) {
    if (a.empty()) throw std::invalid_argument("composite_norm: empty matrix");
    std::vector<double> cols(a.cols(), 0.0);
    double max_row = 0.0;
    for (std::size_t i : canonical_rows(a)) {
        double r = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
            r += std::abs(a(i, j));
            cols[j] += std::abs(a(i, j));
        }
        max_row = std::max(max_row, r);
    }
    return std::sqrt(*std::max_element(cols.begin(), cols.end()) * max_row);
}

double rank1_residual(const Tensor& a, std::span<const double> row) {
    if (row.size() != a.cols())
        throw std::invalid_argument("rank1_residual: vector length mismatch");
    Tensor r = a;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) r(i, j) -= row[j];
    return composite_norm(r);
}

std::vector<double> rank1_minimizer(const Tensor& a) {
    if (a.empty()) throw std::invalid_argument("rank1_minimizer: empty matrix");
    std::vector<double> start(a.cols());
    std::vector<double> lo(a.cols()), hi(a.cols());
    for (std::size_t j = 0; j < a.cols(); ++j) {
        std::vector<double> col(a.rows());
        for (std::size_t i = 0; i < a.rows(); ++i) col[i] = a(i, j);
        start[j] = median(col);
        lo[j] = *std::min_element(col.begin(), col.end());
        hi[j] = *std::max_element(col.begin(), col.end());
    }
    // Coordinate moves alone stall where several rows or columns tie for the
    // maximum, so a smoothed descent runs first and the exact sweeps polish
    // from whichever point is better.
    const double start_value = rank1_residual(a, start);
    if (start_value > 0.0) {
        auto smoothed = smoothed_descent(a, start, start_value, lo, hi);
        if (rank1_residual(a, smoothed) < start_value) start = std::move(smoothed);
    }
    Residual res(a, std::move(start));
    double best = res.norm();
    const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;

    for (int sweep = 0; sweep < kMaxSweeps && best > 0.0; ++sweep) {
        const double before = best;
        for (std::size_t j = 0; j < a.cols(); ++j) {
            // The optimum coordinate lies within the column's range: moving
            // outside it grows every entry of that column's residual.
            double l = lo[j], h = hi[j];
            if (h - l <= 0.0) continue;
            const double tmp = res.max_col_except(j);
            double x1 = h - inv_phi * (h - l), x2 = l + inv_phi * (h - l);
            double f1 = res.norm_with(j, x1, tmp), f2 = res.norm_with(j, x2, tmp);
            for (int it = 0; it < kGoldenMaxIterations && h - l > kGoldenTolerance; ++it) {
                if (f1 <= f2) {
                    h = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = h - inv_phi * (h - l);
                    f1 = res.norm_with(j, x1, tmp);
                } else {
                    l = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = l + inv_phi * (h - l);
                    f2 = res.norm_with(j, x2, tmp);
                }
            }
            const double x = f1 <= f2 ? x1 : x2;
            const double fx = std::min(f1, f2);
            if (fx < best) {
                res.commit(j, x);
                best = res.norm();
            }
        }
        if (before - best < kSweepTolerance) break;
    }
    return res.shift;
}

double diversity(const Tensor& a) {
    const double n = composite_norm(a);
    if (n == 0.0) throw std::invalid_argument("diversity: zero-norm map");
    return rank1_residual(a, rank1_minimizer(a)) / n;
}

const DiversityEntry& DiversityReport::at(AttnKind kind, std::size_t layer) const {
    for (const auto& e : entries)
        if (e.kind == kind && e.layer == layer) return e;
    throw std::out_of_range("no diversity entry for " + provenance_tag(kind, layer));
}

std::string provenance_tag(AttnKind kind, std::size_t layer) {
    return to_string(kind) + "/L" + std::to_string(layer);
}

std::vector<AttentionMap> inference_maps(const DetrModel& model, const Tensor& features) {
    ad::Tape tape;
    const ModelOutput out = model.forward(tape, features, false);
    std::vector<AttentionMap> maps;
    for (const auto* group : {&out.encoder_self, &out.decoder_self, &out.decoder_cross})
        for (const auto& r : *group) maps.push_back(r.snapshot());
    return maps;
}

DiversityReport aggregate_diversity(const std::vector<std::vector<AttentionMap>>& per_sample) {
    if (per_sample.empty()) throw std::invalid_argument("diversity: empty dataset");
    std::map<std::pair<int, std::size_t>, std::pair<double, std::size_t>> acc;
    for (const auto& maps : per_sample)
        for (const auto& m : maps) {
            auto& slot = acc[{static_cast<int>(m.kind), m.layer}];
            slot.first += diversity(m.matrix);
            slot.second += 1;
        }
    DiversityReport report;
    for (const auto& [key, v] : acc)
        report.entries.push_back({static_cast<AttnKind>(key.first), key.second,
                                  v.first / static_cast<double>(v.second), v.second});
    return report;
}

DiversityReport diversity_curve(const DetrModel& model, const std::vector<Tensor>& features) {
    if (features.empty()) throw std::invalid_argument("diversity_curve: empty dataset");
    std::vector<std::vector<AttentionMap>> per_sample;
    per_sample.reserve(features.size());
    for (const auto& f : features) per_sample.push_back(inference_maps(model, f));
    return aggregate_diversity(per_sample);
}

void write_attention_map(const std::filesystem::path& path, const AttentionMap& map) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "ATTN v1 " << map.matrix.rows() << ' ' << map.matrix.cols() << ' '
       << provenance_tag(map.kind, map.layer) << '\n';
    for (double v : map.matrix.data()) io::write_le(os, v);
}

AttentionMap read_attention_map(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    std::getline(is, line);
    std::istringstream hs(line);
    std::string magic, version, prov;
    std::size_t rows = 0, cols = 0;
    if (!(hs >> magic >> version >> rows >> cols >> prov) || magic != "ATTN" || version != "v1")
        throw std::runtime_error(path.string() + ": malformed ATTN header '" + line + "'");
    AttentionMap m;
    m.matrix = Tensor(rows, cols);
    for (double& v : m.matrix.data()) v = io::read_le<double>(is);
    const auto slash = prov.find("/L");
    if (slash == std::string::npos) throw std::runtime_error("malformed provenance '" + prov + "'");
    const std::string kind = prov.substr(0, slash);
    bool found = false;
    for (auto k : {AttnKind::EncoderSelf, AttnKind::DecoderSelf, AttnKind::DecoderCross})
        if (to_string(k) == kind) {
            m.kind = k;
            found = true;
        }
    if (!found) throw std::runtime_error("unknown attention kind '" + kind + "'");
    m.layer = std::stoul(prov.substr(slash + 2));
    return m;
}

void write_heatmap_pgm(const std::filesystem::path& path, const Tensor& map) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "P5\n" << map.cols() << ' ' << map.rows() << "\n255\n";
    double mx = 0.0;
    for (double v : map.data()) mx = std::max(mx, v);
    for (double v : map.data()) {
        const double scaled = mx > 0.0 ? std::clamp(v / mx, 0.0, 1.0) * 255.0 : 0.0;
        os.put(static_cast<char>(static_cast<unsigned char>(std::lround(scaled))));
    }
}

}  // namespace pfdetr
