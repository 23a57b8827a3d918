#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mocae/detections.hpp"
#include "mocae/matching.hpp"

namespace mocae {

enum class CalibratorMode { class_agnostic, class_wise };
enum class CalibratorMethod { isotonic, linear };

// Monotone score map fitted by pool-adjacent-violators. Knots have
// strictly increasing x; evaluation interpolates linearly between knots
// and extrapolates with the boundary values.
struct IsotonicCalibrator {
    std::vector<double> knot_x;
    std::vector<double> knot_y;

    double operator()(double x) const {
        if (knot_x.empty()) return x;
        if (x <= knot_x.front()) return knot_y.front();
        if (x >= knot_x.back()) return knot_y.back();
        const auto it = std::upper_bound(knot_x.begin(), knot_x.end(), x);
        const size_t hi = static_cast<size_t>(it - knot_x.begin());
        const size_t lo = hi - 1;
        const double t = (x - knot_x[lo]) / (knot_x[hi] - knot_x[lo]);
        return knot_y[lo] + t * (knot_y[hi] - knot_y[lo]);
    }
};

// Two-parameter least-squares fit, clamped to [0,1] on evaluation.
struct LinearCalibrator {
    double a = 1.0;
    double b = 0.0;

    double operator()(double x) const { return std::clamp(a * x + b, 0.0, 1.0); }
};

inline IsotonicCalibrator fit_isotonic(const std::vector<TargetPair>& pairs) {
    if (pairs.empty()) throw std::invalid_argument("fit_isotonic: no pairs");

    std::vector<std::pair<double, double>> pts;
    pts.reserve(pairs.size());
    for (const auto& p : pairs) pts.emplace_back(p.score, p.target_iou);
    std::sort(pts.begin(), pts.end());

    // Pre-pool equal scores so knot x values are strictly increasing.
    std::vector<double> xs, ys, ws;
    for (size_t i = 0; i < pts.size();) {
        size_t j = i;
        double sum = 0.0;
        while (j < pts.size() && pts[j].first == pts[i].first) sum += pts[j++].second;
        xs.push_back(pts[i].first);
        ys.push_back(sum / static_cast<double>(j - i));
        ws.push_back(static_cast<double>(j - i));
        i = j;
    }

    // PAVA over the pooled points: merge adjacent blocks while the
    // running means decrease.
    struct Block {
        double sum;
        double weight;
        size_t count;  // pooled points covered
    };
    std::vector<Block> blocks;
    for (size_t i = 0; i < xs.size(); ++i) {
        blocks.push_back({ys[i] * ws[i], ws[i], 1});
        while (blocks.size() >= 2) {
            const Block& prev = blocks[blocks.size() - 2];
            const Block& last = blocks.back();
            if (prev.sum / prev.weight <= last.sum / last.weight) break;
            Block merged{prev.sum + last.sum, prev.weight + last.weight,
                         prev.count + last.count};
            blocks.pop_back();
            blocks.back() = merged;
        }
    }

    IsotonicCalibrator cal;
    size_t at = 0;
    for (const Block& blk : blocks) {
        const double mean = blk.sum / blk.weight;
        for (size_t k = 0; k < blk.count; ++k) {
            cal.knot_x.push_back(xs[at]);
            cal.knot_y.push_back(mean);
            ++at;
        }
    }
    return cal;
}

inline LinearCalibrator fit_linear(const std::vector<TargetPair>& pairs) {
    if (pairs.size() < 2) throw std::invalid_argument("fit_linear: need >= 2 pairs");
    double sx = 0.0, sy = 0.0;
    for (const auto& p : pairs) {
        sx += p.score;
        sy += p.target_iou;
    }
    const double n = static_cast<double>(pairs.size());
    const double mx = sx / n;
    const double my = sy / n;
    double sxx = 0.0, sxy = 0.0;
    for (const auto& p : pairs) {
        sxx += (p.score - mx) * (p.score - mx);
        sxy += (p.score - mx) * (p.target_iou - my);
    }
    if (sxx == 0.0) throw std::invalid_argument("fit_linear: all scores equal");
    LinearCalibrator cal;
    cal.a = sxy / sxx;
    cal.b = my - cal.a * mx;
    return cal;
}

struct Calibrator {
    enum class Kind { identity, isotonic, linear };
    Kind kind = Kind::identity;
    IsotonicCalibrator ir;
    LinearCalibrator lr;

    double operator()(double x) const {
        switch (kind) {
            case Kind::isotonic: return std::clamp(ir(x), 0.0, 1.0);
            case Kind::linear: return lr(x);
            default: return x;
        }
    }

    static Calibrator identity() { return Calibrator{}; }
    static Calibrator from_isotonic(IsotonicCalibrator c) {
        Calibrator cal;
        cal.kind = Kind::isotonic;
        cal.ir = std::move(c);
        return cal;
    }
    static Calibrator from_linear(LinearCalibrator c) {
        Calibrator cal;
        cal.kind = Kind::linear;
        cal.lr = c;
        return cal;
    }
};

// Class-agnostic sets hold one calibrator under the "*" slot; class-wise
// sets hold one per fitted class with identity fallback for the rest.
struct CalibratorSet {
    CalibratorMode mode = CalibratorMode::class_agnostic;
    CalibratorMethod method = CalibratorMethod::isotonic;
    Calibrator global;
    std::map<int, Calibrator> per_class;
    std::vector<std::string> warnings;

    const Calibrator& for_class(int class_id) const {
        static const Calibrator kIdentity = Calibrator::identity();
        if (mode == CalibratorMode::class_agnostic) return global;
        auto it = per_class.find(class_id);
        return it == per_class.end() ? kIdentity : it->second;
    }

    static CalibratorSet identity() { return CalibratorSet{}; }
};

namespace detail {

inline Calibrator fit_one(const std::vector<TargetPair>& pairs, CalibratorMethod method,
                          std::vector<std::string>& warnings, const std::string& label) {
    if (pairs.size() < 2) return Calibrator::identity();
    if (method == CalibratorMethod::isotonic) {
        return Calibrator::from_isotonic(fit_isotonic(pairs));
    }
    LinearCalibrator lr;
    try {
        lr = fit_linear(pairs);
    } catch (const std::invalid_argument&) {
        return Calibrator::identity();
    }
    if (lr.a < 0.0) {
        warnings.push_back("negative linear slope for " + label +
                           "; ranking is not preserved");
    }
    return Calibrator::from_linear(lr);
}

}  // namespace detail

inline CalibratorSet fit_calibrator_set(const DetectionStore& dets,
                                        const GroundTruthStore& gts,
                                        CalibratorMode mode, CalibratorMethod method) {
    const std::vector<TargetPair> pairs = match_psi(dets, gts);
    if (pairs.empty()) throw std::invalid_argument("fit_calibrator_set: no pairs");

    CalibratorSet set;
    set.mode = mode;
    set.method = method;
    if (mode == CalibratorMode::class_agnostic) {
        set.global = detail::fit_one(pairs, method, set.warnings, "all classes");
        return set;
    }
    std::map<int, std::vector<TargetPair>> by_class;
    for (const auto& p : pairs) by_class[p.class_id].push_back(p);
    for (const auto& [cls, cls_pairs] : by_class) {
        Calibrator cal = detail::fit_one(cls_pairs, method, set.warnings,
                                         "class " + std::to_string(cls));
        if (cal.kind != Calibrator::Kind::identity) set.per_class[cls] = std::move(cal);
    }
    return set;
}

inline DetectionStore apply_calibrators(const DetectionStore& store,
                                        const CalibratorSet& cals) {
    DetectionStore out = store;
    for (auto& d : out.dets) d.score = cals.for_class(d.class_id)(d.score);
    out.finalize();
    return out;
}

inline nlohmann::json calibrator_to_json(const Calibrator& cal) {
    nlohmann::json j;
    switch (cal.kind) {
        case Calibrator::Kind::identity:
            j["kind"] = "identity";
            break;
        case Calibrator::Kind::isotonic: {
            j["kind"] = "isotonic";
            nlohmann::json knots = nlohmann::json::array();
            for (size_t i = 0; i < cal.ir.knot_x.size(); ++i) {
                knots.push_back({cal.ir.knot_x[i], cal.ir.knot_y[i]});
            }
            j["knots"] = std::move(knots);
            break;
        }
        case Calibrator::Kind::linear:
            j["kind"] = "linear";
            j["a"] = cal.lr.a;
            j["b"] = cal.lr.b;
            break;
    }
    return j;
}

inline Calibrator calibrator_from_json(const nlohmann::json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "identity") return Calibrator::identity();
    if (kind == "isotonic") {
        IsotonicCalibrator ir;
        for (const auto& kn : j.at("knots")) {
            ir.knot_x.push_back(kn.at(0).get<double>());
            ir.knot_y.push_back(kn.at(1).get<double>());
        }
        if (!std::is_sorted(ir.knot_x.begin(), ir.knot_x.end())) {
            throw std::runtime_error("calibrator knots not sorted");
        }
        return Calibrator::from_isotonic(std::move(ir));
    }
    if (kind == "linear") {
        LinearCalibrator lr;
        lr.a = j.at("a").get<double>();
        lr.b = j.at("b").get<double>();
        return Calibrator::from_linear(lr);
    }
    throw std::runtime_error("unknown calibrator kind: " + kind);
}

inline void save_calibrators(const CalibratorSet& set, const std::string& path) {
    nlohmann::json doc;
    doc["mode"] = set.mode == CalibratorMode::class_agnostic ? "ca" : "cw";
    doc["method"] = set.method == CalibratorMethod::isotonic ? "ir" : "lr";
    if (set.mode == CalibratorMode::class_agnostic) {
        doc["calibrators"]["*"] = calibrator_to_json(set.global);
    } else {
        doc["calibrators"] = nlohmann::json::object();
        for (const auto& [cls, cal] : set.per_class) {
            doc["calibrators"][std::to_string(cls)] = calibrator_to_json(cal);
        }
    }
    if (!set.warnings.empty()) doc["warnings"] = set.warnings;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open calibrator file: " + path);
    out << doc.dump(1) << '\n';
}

inline CalibratorSet load_calibrators(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open calibrator file: " + path);
    nlohmann::json doc;
    in >> doc;
    CalibratorSet set;
    const std::string mode = doc.at("mode").get<std::string>();
    const std::string method = doc.at("method").get<std::string>();
    if (mode != "ca" && mode != "cw") throw std::runtime_error("bad calibrator mode: " + mode);
    if (method != "ir" && method != "lr") throw std::runtime_error("bad calibrator method: " + method);
    set.mode = mode == "ca" ? CalibratorMode::class_agnostic : CalibratorMode::class_wise;
    set.method = method == "ir" ? CalibratorMethod::isotonic : CalibratorMethod::linear;
    for (const auto& [key, val] : doc.at("calibrators").items()) {
        if (key == "*") {
            set.global = calibrator_from_json(val);
        } else {
            set.per_class[std::stoi(key)] = calibrator_from_json(val);
        }
    }
    if (doc.contains("warnings")) {
        set.warnings = doc["warnings"].get<std::vector<std::string>>();
    }
    return set;
}

}  // namespace mocae
