#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mocae/calib.hpp"
#include "mocae/detections.hpp"
#include "mocae/geometry.hpp"

namespace mocae {

enum class NmsKind { standard, soft_linear, soft_gaussian };

struct FusionConfig {
    NmsKind nms_kind = NmsKind::standard;
    double iou_nms = 0.65;
    double sigma_nms = 0.4;
    bool score_voting = true;
    double sigma_sv = 0.04;
    double background_threshold = 0.05;
    int top_k = 100;
    double prune_after_soft = 1e-3;

    void validate() const {
        if (iou_nms <= 0.0 || iou_nms > 1.0) throw std::domain_error("iou_nms must be in (0,1]");
        if (sigma_nms <= 0.0) throw std::domain_error("sigma_nms must be positive");
        if (sigma_sv <= 0.0) throw std::domain_error("sigma_sv must be positive");
        if (background_threshold < 0.0 || background_threshold > 1.0) {
            throw std::domain_error("background_threshold must be in [0,1]");
        }
        if (top_k < 0) throw std::domain_error("top_k must be nonnegative");
        if (prune_after_soft < 0.0 || prune_after_soft > 1.0) {
            throw std::domain_error("prune_after_soft must be in [0,1]");
        }
    }
};

inline NmsKind nms_kind_from_string(const std::string& s) {
    if (s == "standard") return NmsKind::standard;
    if (s == "soft-linear") return NmsKind::soft_linear;
    if (s == "soft-gaussian") return NmsKind::soft_gaussian;
    throw std::runtime_error("unknown nms kind: " + s);
}

inline std::string to_string(NmsKind k) {
    switch (k) {
        case NmsKind::standard: return "standard";
        case NmsKind::soft_linear: return "soft-linear";
        default: return "soft-gaussian";
    }
}

inline FusionConfig fusion_config_from_json(const nlohmann::json& doc) {
    FusionConfig cfg;
    for (const auto& [key, val] : doc.items()) {
        if (key == "nms_kind") cfg.nms_kind = nms_kind_from_string(val.get<std::string>());
        else if (key == "iou_nms") cfg.iou_nms = val.get<double>();
        else if (key == "sigma_nms") cfg.sigma_nms = val.get<double>();
        else if (key == "score_voting") cfg.score_voting = val.get<bool>();
        else if (key == "sigma_sv") cfg.sigma_sv = val.get<double>();
        else if (key == "background_threshold") cfg.background_threshold = val.get<double>();
        else if (key == "top_k") cfg.top_k = val.get<int>();
        else if (key == "prune_after_soft") cfg.prune_after_soft = val.get<double>();
        else throw std::runtime_error("unknown fusion config key: " + key);
    }
    cfg.validate();
    return cfg;
}

inline nlohmann::json fusion_config_to_json(const FusionConfig& cfg) {
    return {{"nms_kind", to_string(cfg.nms_kind)},
            {"iou_nms", cfg.iou_nms},
            {"sigma_nms", cfg.sigma_nms},
            {"score_voting", cfg.score_voting},
            {"sigma_sv", cfg.sigma_sv},
            {"background_threshold", cfg.background_threshold},
            {"top_k", cfg.top_k},
            {"prune_after_soft", cfg.prune_after_soft}};
}

// Keeps detections with score >= threshold (boundary inclusive).
inline DetectionStore background_removal(const DetectionStore& store, double threshold) {
    DetectionStore out;
    out.kind = store.kind;
    out.num_experts = store.num_experts;
    for (const auto& d : store.dets) {
        if (d.score >= threshold) out.dets.push_back(d);
    }
    out.finalize();
    return out;
}

namespace detail {

// Per-group greedy selection shared by the NMS family. Soft variants
// rescore instead of discarding; the full rescored pool is kept so Score
// Voting can use post-rescoring confidences.
struct NmsGroupResult {
    std::vector<Detection> survivors;
    std::vector<Detection> rescored_pool;
};

inline NmsGroupResult nms_group(std::vector<Detection> group, const FusionConfig& cfg) {
    NmsGroupResult result;
    std::vector<bool> done(group.size(), false);
    size_t remaining = group.size();
    while (remaining > 0) {
        size_t best = group.size();
        for (size_t i = 0; i < group.size(); ++i) {
            if (done[i]) continue;
            if (best == group.size() || group[i].score > group[best].score ||
                (group[i].score == group[best].score && group[i].det_id < group[best].det_id)) {
                best = i;
            }
        }
        done[best] = true;
        --remaining;
        result.survivors.push_back(group[best]);
        for (size_t i = 0; i < group.size(); ++i) {
            if (done[i]) continue;
            const double v = iou(group[i].box, group[best].box);
            switch (cfg.nms_kind) {
                case NmsKind::standard:
                    if (v >= cfg.iou_nms) {
                        done[i] = true;
                        --remaining;
                    }
                    break;
                case NmsKind::soft_linear:
                    if (v >= cfg.iou_nms) group[i].score *= (1.0 - v);
                    break;
                case NmsKind::soft_gaussian:
                    group[i].score *= std::exp(-(v * v) / cfg.sigma_nms);
                    break;
            }
        }
    }
    result.rescored_pool = std::move(group);
    return result;
}

struct NmsResult {
    DetectionStore survivors;
    DetectionStore rescored_pool;
};

inline NmsResult run_nms(const DetectionStore& store, const FusionConfig& cfg) {
    NmsResult out;
    out.survivors.kind = store.kind;
    out.survivors.num_experts = store.num_experts;
    out.rescored_pool.kind = store.kind;
    out.rescored_pool.num_experts = store.num_experts;
    for (const auto& [key, idx] : store.index) {
        std::vector<Detection> group;
        group.reserve(idx.size());
        for (size_t i : idx) group.push_back(store.dets[i]);
        NmsGroupResult res = nms_group(std::move(group), cfg);
        const bool soft = cfg.nms_kind != NmsKind::standard;
        for (auto& d : res.survivors) {
            if (soft && d.score < cfg.prune_after_soft) continue;
            out.survivors.dets.push_back(std::move(d));
        }
        for (auto& d : res.rescored_pool) out.rescored_pool.dets.push_back(std::move(d));
    }
    out.survivors.finalize();
    out.rescored_pool.finalize();
    return out;
}

}  // namespace detail

inline DetectionStore standard_nms(const DetectionStore& store, double iou_thr) {
    FusionConfig cfg;
    cfg.nms_kind = NmsKind::standard;
    cfg.iou_nms = iou_thr;
    cfg.validate();
    return detail::run_nms(store, cfg).survivors;
}

inline DetectionStore soft_nms(const DetectionStore& store, const FusionConfig& cfg) {
    if (cfg.nms_kind == NmsKind::standard) {
        throw std::invalid_argument("soft_nms requires a soft nms_kind");
    }
    cfg.validate();
    return detail::run_nms(store, cfg).survivors;
}

// Replaces each survivor's box by the confidence- and IoU-weighted mean
// of all overlapping same-image same-class raw boxes. Weight of raw box
// j is p_j * exp(-(1 - IoU)^2 / sigma_sv). Scores stay untouched;
// rotated boxes are passed through unrefined.
inline DetectionStore score_voting(const DetectionStore& survivors,
                                   const DetectionStore& raw, double sigma_sv) {
    if (sigma_sv <= 0.0) throw std::domain_error("sigma_sv must be positive");
    if (survivors.kind == GeometryKind::rotated) return survivors;
    DetectionStore out = survivors;
    for (auto& d : out.dets) {
        auto it = raw.index.find({d.image_id, d.class_id});
        if (it == raw.index.end()) continue;
        double wx0 = 0.0, wy0 = 0.0, wx1 = 0.0, wy1 = 0.0, wsum = 0.0;
        bool degenerate = true;  // every voter sits exactly on the survivor
        for (size_t ri : it->second) {
            const Detection& r = raw.dets[ri];
            const double v = iou(d.box, r.box);
            if (v <= 0.0) continue;
            const double gap = 1.0 - v;
            const double w = r.score * std::exp(-(gap * gap) / sigma_sv);
            const auto& box = std::get<AxisAlignedBox>(r.box);
            degenerate = degenerate && box == std::get<AxisAlignedBox>(d.box);
            wx0 += w * box.x_min;
            wy0 += w * box.y_min;
            wx1 += w * box.x_max;
            wy1 += w * box.y_max;
            wsum += w;
        }
        if (wsum > 0.0 && !degenerate) {
            d.box = AxisAlignedBox{wx0 / wsum, wy0 / wsum, wx1 / wsum, wy1 / wsum};
        }
    }
    out.finalize();
    return out;
}

// Per image (across classes), keep the k highest-scoring detections.
inline DetectionStore top_k_survival(const DetectionStore& store, int k) {
    if (k < 0) throw std::domain_error("top_k must be nonnegative");
    std::map<std::string, std::vector<size_t>> by_image;
    for (size_t i = 0; i < store.dets.size(); ++i) {
        by_image[store.dets[i].image_id].push_back(i);
    }
    DetectionStore out;
    out.kind = store.kind;
    out.num_experts = store.num_experts;
    for (auto& [img, idx] : by_image) {
        std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
            if (store.dets[a].score != store.dets[b].score) {
                return store.dets[a].score > store.dets[b].score;
            }
            return store.dets[a].det_id < store.dets[b].det_id;
        });
        const size_t keep = std::min(idx.size(), static_cast<size_t>(k));
        for (size_t i = 0; i < keep; ++i) out.dets.push_back(store.dets[idx[i]]);
    }
    out.finalize();
    return out;
}

// Soft NMS followed by Score Voting over the post-rescoring raw pool,
// then top-k survival.
inline DetectionStore refining_nms(const DetectionStore& store, const FusionConfig& cfg) {
    cfg.validate();
    detail::NmsResult nms = detail::run_nms(store, cfg);
    DetectionStore refined = cfg.score_voting
                                 ? score_voting(nms.survivors, nms.rescored_pool, cfg.sigma_sv)
                                 : nms.survivors;
    return top_k_survival(refined, cfg.top_k);
}

// Full mixture pipeline: calibrate each expert, pool, background
// removal, cluster (standard or Refining NMS), top-k.
inline DetectionStore fuse_pipeline(const std::vector<DetectionStore>& expert_stores,
                                    const std::vector<CalibratorSet>& calibrator_sets,
                                    const FusionConfig& cfg) {
    cfg.validate();
    if (expert_stores.size() != calibrator_sets.size()) {
        throw std::invalid_argument("one calibrator set per expert store required");
    }
    std::vector<DetectionStore> calibrated;
    calibrated.reserve(expert_stores.size());
    for (size_t e = 0; e < expert_stores.size(); ++e) {
        calibrated.push_back(apply_calibrators(expert_stores[e], calibrator_sets[e]));
    }
    DetectionStore pooled = background_removal(concat_experts(calibrated),
                                               cfg.background_threshold);
    if (cfg.nms_kind == NmsKind::standard) {
        DetectionStore kept = standard_nms(pooled, cfg.iou_nms);
        if (cfg.score_voting) kept = score_voting(kept, pooled, cfg.sigma_sv);
        return top_k_survival(kept, cfg.top_k);
    }
    return refining_nms(pooled, cfg);
}

}  // namespace mocae
