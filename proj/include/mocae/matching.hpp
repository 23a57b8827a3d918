#pragma once

#include <cstdint>
#include <vector>

#include "mocae/detections.hpp"
#include "mocae/geometry.hpp"

namespace mocae {

// One (confidence, IoU-target) pair per detection. target_iou is the
// highest IoU against any same-image same-class non-ignored ground
// truth, or 0 when there is none.
struct TargetPair {
    double score = 0.0;
    double target_iou = 0.0;
    int class_id = 0;
    int expert_id = 0;
};

struct DetectionMatch {
    std::int64_t matched_gt_id = -1;
    bool is_tp = false;
    bool is_ignored = false;  // absorbed by an ignore-flagged ground truth
    double iou_with_match = 0.0;
};

// Aligned with store iteration order.
struct MatchResult {
    std::vector<DetectionMatch> per_detection;
    double tau = 0.0;
};

// Max-IoU matching used to extract calibration targets. Independent per
// detection: one ground truth may be the target of many detections.
// Ignore-flagged ground truths are excluded.
inline std::vector<TargetPair> match_psi(const DetectionStore& dets,
                                         const GroundTruthStore& gts) {
    std::vector<TargetPair> pairs;
    pairs.reserve(dets.size());
    for (const auto& d : dets.dets) {
        TargetPair p;
        p.score = d.score;
        p.class_id = d.class_id;
        p.expert_id = d.expert_id;
        auto it = gts.index.find({d.image_id, d.class_id});
        if (it != gts.index.end()) {
            for (size_t gi : it->second) {
                const auto& g = gts.gts[gi];
                if (g.ignore) continue;
                p.target_iou = std::max(p.target_iou, iou(d.box, g.box));
            }
        }
        pairs.push_back(p);
    }
    return pairs;
}

// Greedy COCO-style TP assignment at IoU threshold tau. Per (image,
// class), detections are visited score-descending (det_id ascending on
// ties); each takes the unmatched non-ignored ground truth of highest
// IoU >= tau (lower gt_id on ties). Detections that only reach an
// ignore-flagged ground truth are marked ignored, not FP.
inline MatchResult greedy_tp_match(const DetectionStore& dets,
                                   const GroundTruthStore& gts, double tau) {
    MatchResult result;
    result.tau = tau;
    result.per_detection.assign(dets.size(), DetectionMatch{});

    for (const auto& [key, det_idx] : dets.index) {
        std::vector<size_t> gt_idx;
        if (auto it = gts.index.find(key); it != gts.index.end()) gt_idx = it->second;
        std::vector<bool> taken(gt_idx.size(), false);
        for (size_t di : det_idx) {
            const auto& d = dets.dets[di];
            DetectionMatch& m = result.per_detection[di];
            double best_iou = 0.0;
            std::int64_t best = -1;
            size_t best_slot = 0;
            for (size_t k = 0; k < gt_idx.size(); ++k) {
                const auto& g = gts.gts[gt_idx[k]];
                if (g.ignore || taken[k]) continue;
                const double v = iou(d.box, g.box);
                if (v < tau) continue;
                if (v > best_iou || (v == best_iou && best >= 0 && g.gt_id < best)) {
                    best_iou = v;
                    best = g.gt_id;
                    best_slot = k;
                }
            }
            if (best >= 0) {
                taken[best_slot] = true;
                m.matched_gt_id = best;
                m.is_tp = true;
                m.iou_with_match = best_iou;
                continue;
            }
            for (size_t k = 0; k < gt_idx.size(); ++k) {
                const auto& g = gts.gts[gt_idx[k]];
                if (!g.ignore) continue;
                if (iou(d.box, g.box) >= tau) {
                    m.is_ignored = true;
                    break;
                }
            }
        }
    }
    return result;
}

}  // namespace mocae
