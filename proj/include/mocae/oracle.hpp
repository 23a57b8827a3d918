#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "mocae/calib.hpp"
#include "mocae/detections.hpp"
#include "mocae/fuse.hpp"
#include "mocae/matching.hpp"
#include "mocae/metrics.hpp"

namespace mocae {

// Replaces every score by the detection's psi-target IoU, making the
// store perfectly calibrated by construction.
inline DetectionStore make_oracle_store(const DetectionStore& dets,
                                        const GroundTruthStore& gts) {
    const std::vector<TargetPair> pairs = match_psi(dets, gts);
    DetectionStore out = dets;
    for (size_t i = 0; i < out.dets.size(); ++i) out.dets[i].score = pairs[i].target_iou;
    out.finalize();
    return out;
}

inline std::vector<DetectionStore> make_oracle_moe(const std::vector<DetectionStore>& stores,
                                                   const GroundTruthStore& gts) {
    std::vector<DetectionStore> out;
    out.reserve(stores.size());
    for (const auto& s : stores) out.push_back(make_oracle_store(s, gts));
    return out;
}

// From-definition AP at one IoU threshold, written independently of
// coco_ap: naive per-image greedy matching, cumulative precision/recall,
// envelope and 101-point sampling with plain loops.
inline double brute_force_ap(const DetectionStore& dets, const GroundTruthStore& gts,
                             double tau) {
    std::vector<int> classes;
    for (const auto& g : gts.gts) {
        if (g.ignore) continue;
        bool seen = false;
        for (int c : classes) seen = seen || (c == g.class_id);
        if (!seen) classes.push_back(g.class_id);
    }
    for (size_t i = 0; i + 1 < classes.size(); ++i) {
        for (size_t j = i + 1; j < classes.size(); ++j) {
            if (classes[j] < classes[i]) std::swap(classes[i], classes[j]);
        }
    }
    if (classes.empty()) return 0.0;

    double ap_sum = 0.0;
    for (int cls : classes) {
        std::vector<size_t> order;
        for (size_t i = 0; i < dets.dets.size(); ++i) {
            if (dets.dets[i].class_id == cls) order.push_back(i);
        }
        for (size_t i = 0; i + 1 < order.size(); ++i) {
            for (size_t j = i + 1; j < order.size(); ++j) {
                const Detection& a = dets.dets[order[i]];
                const Detection& b = dets.dets[order[j]];
                if (b.score > a.score || (b.score == a.score && b.det_id < a.det_id)) {
                    std::swap(order[i], order[j]);
                }
            }
        }
        std::size_t num_gt = 0;
        std::vector<bool> taken(gts.gts.size(), false);
        for (const auto& g : gts.gts) {
            if (!g.ignore && g.class_id == cls) ++num_gt;
        }
        std::vector<double> recall, precision;
        std::size_t tp = 0, fp = 0;
        for (size_t i : order) {
            const Detection& d = dets.dets[i];
            double best_iou = 0.0;
            size_t best = gts.gts.size();
            for (size_t g = 0; g < gts.gts.size(); ++g) {
                const GroundTruth& gt = gts.gts[g];
                if (gt.ignore || taken[g] || gt.class_id != cls || gt.image_id != d.image_id) {
                    continue;
                }
                const double v = iou(d.box, gt.box);
                if (v < tau) continue;
                if (v > best_iou ||
                    (v == best_iou && best < gts.gts.size() && gt.gt_id < gts.gts[best].gt_id)) {
                    best_iou = v;
                    best = g;
                }
            }
            if (best < gts.gts.size()) {
                taken[best] = true;
                ++tp;
            } else {
                bool absorbed = false;
                for (size_t g = 0; g < gts.gts.size(); ++g) {
                    const GroundTruth& gt = gts.gts[g];
                    if (gt.ignore && gt.class_id == cls && gt.image_id == d.image_id &&
                        iou(d.box, gt.box) >= tau) {
                        absorbed = true;
                    }
                }
                if (absorbed) continue;
                ++fp;
            }
            recall.push_back(num_gt ? static_cast<double>(tp) / static_cast<double>(num_gt)
                                    : 0.0);
            precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        }
        for (size_t i = precision.size(); i-- > 1;) {
            if (precision[i] > precision[i - 1]) precision[i - 1] = precision[i];
        }
        double acc = 0.0;
        for (int i = 0; i <= 100; ++i) {
            const double r = static_cast<double>(i) / 100.0;
            for (size_t k = 0; k < recall.size(); ++k) {
                if (recall[k] >= r) {
                    acc += precision[k];
                    break;
                }
            }
        }
        ap_sum += acc / 101.0;
    }
    return ap_sum / static_cast<double>(classes.size());
}

enum class MiscalKind { identity, overconfident, underconfident, affine };

struct ExpertSpec {
    double noise_scale = 0.02;  // corner jitter as a fraction of box size
    double miss_prob = 0.0;
    double fp_rate = 0.0;  // expected false positives per image
    MiscalKind miscal = MiscalKind::identity;
    double gamma = 1.0;  // exponent for the power miscalibrations
    double affine_a = 1.0;
    double affine_b = 0.0;

    double miscalibrate(double x) const {
        switch (miscal) {
            case MiscalKind::overconfident:
            case MiscalKind::underconfident:
                return std::clamp(std::pow(x, gamma), 0.0, 1.0);
            case MiscalKind::affine:
                return std::clamp(affine_a * x + affine_b, 0.0, 1.0);
            default:
                return x;
        }
    }
};

struct SyntheticSceneSpec {
    int num_images = 20;
    int gts_per_image = 4;
    double fp_max_iou = 0.3;  // FP boxes stay below this IoU against every gt
    std::vector<ExpertSpec> experts;
    std::uint64_t seed = 0;
};

namespace detail {

struct Rng {
    std::mt19937_64 gen;
    explicit Rng(std::uint64_t seed) : gen(seed) {}
    double uniform() { return static_cast<double>(gen() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
};

constexpr double kFieldSize = 1000.0;

inline AxisAlignedBox random_box(Rng& rng, double min_side, double max_side) {
    const double w = rng.uniform(min_side, max_side);
    const double h = rng.uniform(min_side, max_side);
    const double x = rng.uniform(0.0, kFieldSize - w);
    const double y = rng.uniform(0.0, kFieldSize - h);
    return AxisAlignedBox{x, y, x + w, y + h};
}

inline AxisAlignedBox jitter_box(Rng& rng, const AxisAlignedBox& b, double scale) {
    const double s = scale * std::min(b.width(), b.height());
    AxisAlignedBox out{b.x_min + rng.uniform(-s, s), b.y_min + rng.uniform(-s, s),
                       b.x_max + rng.uniform(-s, s), b.y_max + rng.uniform(-s, s)};
    if (out.x_min > out.x_max) std::swap(out.x_min, out.x_max);
    if (out.y_min > out.y_max) std::swap(out.y_min, out.y_max);
    return out;
}

}  // namespace detail

struct SyntheticScene {
    std::vector<DetectionStore> experts;
    GroundTruthStore gts;
    int rejected_layouts = 0;  // gt layouts re-drawn to keep gts disjoint
};

// Deterministic scene generator. Ground truths of one image are pairwise
// disjoint (rejection sampling); each expert's raw detections carry the
// expert's miscalibration of their true psi-IoU as the score.
inline SyntheticScene gen_synthetic(const SyntheticSceneSpec& spec) {
    if (spec.experts.empty()) throw std::invalid_argument("gen_synthetic: no experts");
    detail::Rng rng(spec.seed);
    SyntheticScene scene;
    scene.gts.kind = GeometryKind::axis_aligned;
    scene.experts.resize(spec.experts.size());
    for (auto& s : scene.experts) s.kind = GeometryKind::axis_aligned;

    std::int64_t next_gt = 0;
    std::vector<std::int64_t> det_counters(spec.experts.size(), 0);
    for (int img = 0; img < spec.num_images; ++img) {
        const std::string image_id = std::to_string(img);
        std::vector<AxisAlignedBox> boxes;
        for (int k = 0; k < spec.gts_per_image; ++k) {
            AxisAlignedBox box;
            bool placed = false;
            for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
                box = detail::random_box(rng, 60.0, 140.0);
                placed = true;
                for (const auto& other : boxes) {
                    if (iou_aabb(box, other) > 0.0) {
                        placed = false;
                        ++scene.rejected_layouts;
                        break;
                    }
                }
            }
            if (!placed) throw std::runtime_error("gen_synthetic: cannot place disjoint gts");
            boxes.push_back(box);
            scene.gts.gts.push_back({image_id, 1, box, next_gt++, false});
        }

        for (size_t e = 0; e < spec.experts.size(); ++e) {
            const ExpertSpec& ex = spec.experts[e];
            auto add_detection = [&](const AxisAlignedBox& det_box) {
                double target = 0.0;
                for (const auto& g : boxes) target = std::max(target, iou_aabb(det_box, g));
                Detection d;
                d.image_id = image_id;
                d.class_id = 1;
                d.box = det_box;
                d.score = ex.miscalibrate(target);
                d.expert_id = static_cast<int>(e);
                d.det_id = det_counters[e]++;
                scene.experts[e].dets.push_back(std::move(d));
            };
            for (const auto& g : boxes) {
                if (rng.uniform() < ex.miss_prob) continue;
                add_detection(detail::jitter_box(rng, g, ex.noise_scale));
            }
            int num_fp = static_cast<int>(std::floor(ex.fp_rate));
            if (rng.uniform() < ex.fp_rate - std::floor(ex.fp_rate)) ++num_fp;
            for (int k = 0; k < num_fp; ++k) {
                AxisAlignedBox fp_box;
                for (int attempt = 0; attempt < 1000; ++attempt) {
                    fp_box = detail::random_box(rng, 60.0, 140.0);
                    double worst = 0.0;
                    for (const auto& g : boxes) worst = std::max(worst, iou_aabb(fp_box, g));
                    if (worst < spec.fp_max_iou) break;
                }
                add_detection(fp_box);
            }
        }
    }
    scene.gts.finalize();
    for (auto& s : scene.experts) s.finalize();
    return scene;
}

struct SceneCheck {
    std::uint64_t seed = 0;
    std::size_t num_gts = 0;
    std::vector<double> taus;
    std::vector<std::size_t> n_tp;
    std::vector<double> fused_ap;
    std::vector<double> expected_ap;
    bool pass = false;
    int rejected_layouts = 0;
};

struct OracleCheckReport {
    std::vector<SceneCheck> scenes;
    int passed = 0;

    bool all_pass() const { return passed == static_cast<int>(scenes.size()); }
};

// Builds the Oracle mixture on raw expert detections, fuses it with
// standard NMS and checks the optimal-AP identity AP = N_TP(raw)/M per
// IoU threshold. Uses the exact-area AP rule, under which the identity
// holds to numerical precision.
inline SceneCheck verify_scene(const SyntheticSceneSpec& spec, const FusionConfig& cfg,
                               const std::vector<double>& taus) {
    SyntheticScene scene = gen_synthetic(spec);
    SceneCheck check;
    check.seed = spec.seed;
    check.taus = taus;
    check.rejected_layouts = scene.rejected_layouts;
    check.num_gts = scene.gts.size();

    const std::vector<DetectionStore> oracle = make_oracle_moe(scene.experts, scene.gts);
    const DetectionStore raw_union = concat_experts(oracle);
    const std::vector<CalibratorSet> identities(oracle.size(), CalibratorSet::identity());
    FusionConfig fuse_cfg = cfg;
    fuse_cfg.nms_kind = NmsKind::standard;
    fuse_cfg.score_voting = false;
    const DetectionStore fused = fuse_pipeline(oracle, identities, fuse_cfg);

    check.pass = true;
    for (double tau : taus) {
        const MatchResult match = greedy_tp_match(raw_union, scene.gts, tau);
        std::size_t n_tp = 0;
        for (const auto& m : match.per_detection) n_tp += m.is_tp ? 1 : 0;
        const double expected =
            static_cast<double>(n_tp) / static_cast<double>(check.num_gts);
        const double ap = coco_ap(fused, scene.gts, {tau}, fuse_cfg.top_k,
                                  ApRule::exact_area).ap;
        check.n_tp.push_back(n_tp);
        check.expected_ap.push_back(expected);
        check.fused_ap.push_back(ap);
        if (std::abs(ap - expected) > 1e-9) check.pass = false;
    }
    return check;
}

inline SyntheticSceneSpec theorem_scene_spec(std::uint64_t seed) {
    SyntheticSceneSpec spec;
    spec.num_images = 8;
    spec.gts_per_image = 5;
    spec.fp_max_iou = 0.25;
    spec.seed = seed;
    ExpertSpec a;
    a.noise_scale = 0.02;
    a.miss_prob = 0.3;
    a.fp_rate = 1.5;
    a.miscal = MiscalKind::overconfident;
    a.gamma = 0.4;
    ExpertSpec b = a;
    b.miss_prob = 0.35;
    b.miscal = MiscalKind::underconfident;
    b.gamma = 2.5;
    spec.experts = {a, b};
    return spec;
}

// Scenes are independent; `threads` caps the worker count. Results are
// aggregated in seed order regardless of scheduling.
inline OracleCheckReport verify_theorem(int num_scenes, std::uint64_t base_seed,
                                        const FusionConfig& cfg,
                                        const std::vector<double>& taus = {0.5, 0.75},
                                        int threads = 1) {
    OracleCheckReport report;
    report.scenes.resize(num_scenes);
    threads = std::clamp(threads, 1, std::max(1, num_scenes));
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&]() {
            for (int i = next.fetch_add(1); i < num_scenes; i = next.fetch_add(1)) {
                report.scenes[i] = verify_scene(theorem_scene_spec(base_seed + i), cfg, taus);
            }
        });
    }
    for (auto& th : pool) th.join();
    for (const auto& s : report.scenes) {
        if (s.pass) ++report.passed;
    }
    return report;
}

inline nlohmann::json oracle_report_to_json(const OracleCheckReport& report) {
    nlohmann::json scenes = nlohmann::json::array();
    for (const auto& s : report.scenes) {
        scenes.push_back({{"seed", s.seed},
                          {"num_gts", s.num_gts},
                          {"taus", s.taus},
                          {"n_tp", s.n_tp},
                          {"fused_ap", s.fused_ap},
                          {"expected_ap", s.expected_ap},
                          {"rejected_layouts", s.rejected_layouts},
                          {"pass", s.pass}});
    }
    return {{"passed", report.passed},
            {"total", report.scenes.size()},
            {"scenes", std::move(scenes)}};
}

struct DemoEntry {
    std::string name;
    double ap = 0.0;
    double ap50 = 0.0;
    double ar = 0.0;
};

struct DemoReport {
    std::vector<DemoEntry> entries;  // per expert, vanilla MoE, calibrated MoE
    std::vector<double> vanilla_share;
    std::vector<double> calibrated_share;
};

namespace detail {

inline std::vector<double> expert_shares(const DetectionStore& fused, int num_experts) {
    std::vector<double> shares(num_experts, 0.0);
    if (fused.empty()) return shares;
    for (const auto& d : fused.dets) {
        if (d.expert_id >= 0 && d.expert_id < num_experts) shares[d.expert_id] += 1.0;
    }
    for (auto& s : shares) s /= static_cast<double>(fused.size());
    return shares;
}

inline DetectionStore filter_images(const DetectionStore& store, bool keep_even) {
    DetectionStore out;
    out.kind = store.kind;
    out.num_experts = store.num_experts;
    for (const auto& d : store.dets) {
        if ((std::stoi(d.image_id) % 2 == 0) == keep_even) out.dets.push_back(d);
    }
    out.finalize();
    return out;
}

inline GroundTruthStore filter_images(const GroundTruthStore& store, bool keep_even) {
    GroundTruthStore out;
    out.kind = store.kind;
    for (const auto& g : store.gts) {
        if ((std::stoi(g.image_id) % 2 == 0) == keep_even) out.gts.push_back(g);
    }
    out.finalize();
    return out;
}

}  // namespace detail

inline SyntheticSceneSpec demo_scene_spec(std::uint64_t seed) {
    SyntheticSceneSpec spec;
    spec.num_images = 120;
    spec.gts_per_image = 4;
    spec.fp_max_iou = 0.4;
    spec.seed = seed;
    ExpertSpec over;  // sloppy boxes, inflated confidence
    over.noise_scale = 0.16;
    over.miss_prob = 0.25;
    over.fp_rate = 2.0;
    over.miscal = MiscalKind::overconfident;
    over.gamma = 0.25;
    ExpertSpec under;  // tight boxes, deflated confidence
    under.noise_scale = 0.04;
    under.miss_prob = 0.25;
    under.fp_rate = 1.0;
    under.miscal = MiscalKind::underconfident;
    under.gamma = 4.0;
    spec.experts = {over, under};
    return spec;
}

// Two-expert study of the calibration effect: one overconfident, one
// underconfident expert of similar true quality. Calibrators are fitted
// on the even-numbered images and everything is evaluated on the odd
// ones.
inline DemoReport miscalibration_demo(const SyntheticSceneSpec& spec,
                                      const FusionConfig& cfg) {
    const SyntheticScene scene = gen_synthetic(spec);
    const GroundTruthStore fit_gts = detail::filter_images(scene.gts, true);
    const GroundTruthStore eval_gts = detail::filter_images(scene.gts, false);

    std::vector<DetectionStore> fit_experts, eval_experts;
    std::vector<CalibratorSet> fitted, identities;
    for (const auto& expert : scene.experts) {
        fit_experts.push_back(detail::filter_images(expert, true));
        eval_experts.push_back(detail::filter_images(expert, false));
        fitted.push_back(fit_calibrator_set(fit_experts.back(), fit_gts,
                                            CalibratorMode::class_agnostic,
                                            CalibratorMethod::isotonic));
        identities.push_back(CalibratorSet::identity());
    }

    DemoReport report;
    auto evaluate_store = [&](const std::string& name, const DetectionStore& store) {
        const EvalReport r = coco_ap(store, eval_gts, coco_tau_grid(), cfg.top_k);
        DemoEntry entry;
        entry.name = name;
        entry.ap = r.ap;
        entry.ap50 = r.ap50;
        entry.ar = average_recall(store, eval_gts, coco_tau_grid(), cfg.top_k);
        report.entries.push_back(entry);
    };

    for (size_t e = 0; e < eval_experts.size(); ++e) {
        evaluate_store("expert_" + std::to_string(e),
                       fuse_pipeline({eval_experts[e]}, {identities[e]}, cfg));
    }
    const DetectionStore vanilla = fuse_pipeline(eval_experts, identities, cfg);
    const DetectionStore calibrated = fuse_pipeline(eval_experts, fitted, cfg);
    evaluate_store("vanilla_moe", vanilla);
    evaluate_store("calibrated_moe", calibrated);
    report.vanilla_share = detail::expert_shares(vanilla, static_cast<int>(eval_experts.size()));
    report.calibrated_share =
        detail::expert_shares(calibrated, static_cast<int>(eval_experts.size()));
    return report;
}

inline nlohmann::json demo_report_to_json(const DemoReport& report) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : report.entries) {
        entries.push_back({{"name", e.name}, {"AP", e.ap}, {"AP50", e.ap50}, {"AR", e.ar}});
    }
    return {{"entries", std::move(entries)},
            {"vanilla_share", report.vanilla_share},
            {"calibrated_share", report.calibrated_share}};
}

}  // namespace mocae
