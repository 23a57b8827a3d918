#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mocae/detections.hpp"
#include "mocae/fuse.hpp"
#include "mocae/matching.hpp"

namespace mocae {

enum class BinWeighting { reduced, precision };

struct BinStat {
    std::size_t count = 0;
    double sum_conf = 0.0;
    double sum_iou = 0.0;  // psi-target IoU in reduced mode
    std::size_t tp_count = 0;
    double sum_tp_iou = 0.0;

    double mean_conf() const { return count ? sum_conf / static_cast<double>(count) : 0.0; }
    double mean_iou() const { return count ? sum_iou / static_cast<double>(count) : 0.0; }
    double precision() const {
        return count ? static_cast<double>(tp_count) / static_cast<double>(count) : 0.0;
    }
    double mean_tp_iou() const {
        return tp_count ? sum_tp_iou / static_cast<double>(tp_count) : 0.0;
    }
};

struct ClassBins {
    std::vector<BinStat> bins;
    std::size_t total = 0;
};

// Equal-width bins over [0,1]: bin j covers [j/J, (j+1)/J), the last bin
// is closed at 1.
struct ReliabilityBins {
    int J = 25;
    BinWeighting weighting = BinWeighting::reduced;
    double tau = 0.0;
    std::map<int, ClassBins> per_class;

    int bin_of(double score) const {
        const int j = static_cast<int>(std::floor(score * J));
        return std::clamp(j, 0, J - 1);
    }
};

inline ReliabilityBins build_bins(const DetectionStore& dets, const GroundTruthStore& gts,
                                  int J, BinWeighting weighting, double tau = 0.5) {
    if (J < 1) throw std::domain_error("bin count must be >= 1");
    ReliabilityBins rb;
    rb.J = J;
    rb.weighting = weighting;
    rb.tau = tau;
    const std::vector<TargetPair> pairs = match_psi(dets, gts);
    MatchResult match;
    if (weighting == BinWeighting::precision) match = greedy_tp_match(dets, gts, tau);
    for (size_t i = 0; i < dets.dets.size(); ++i) {
        const Detection& d = dets.dets[i];
        ClassBins& cb = rb.per_class[d.class_id];
        if (cb.bins.empty()) cb.bins.resize(J);
        BinStat& bin = cb.bins[rb.bin_of(d.score)];
        ++bin.count;
        ++cb.total;
        bin.sum_conf += d.score;
        bin.sum_iou += pairs[i].target_iou;
        if (weighting == BinWeighting::precision && match.per_detection[i].is_tp) {
            ++bin.tp_count;
            bin.sum_tp_iou += match.per_detection[i].iou_with_match;
        }
    }
    return rb;
}

namespace detail {

template <typename PerClass>
inline double mean_over_classes(const ReliabilityBins& rb, PerClass&& per_class_error) {
    double sum = 0.0;
    int classes = 0;
    for (const auto& [cls, cb] : rb.per_class) {
        if (cb.total == 0) continue;
        sum += per_class_error(cb);
        ++classes;
    }
    return classes ? sum / classes : 0.0;
}

}  // namespace detail

// Count-weighted mean absolute gap between confidence and IoU, averaged
// over classes with at least one detection.
inline double laece(const ReliabilityBins& rb) {
    return detail::mean_over_classes(rb, [](const ClassBins& cb) {
        double err = 0.0;
        for (const BinStat& bin : cb.bins) {
            if (bin.count == 0) continue;
            err += (static_cast<double>(bin.count) / static_cast<double>(cb.total)) *
                   std::abs(bin.mean_conf() - bin.mean_iou());
        }
        return err;
    });
}

// Unweighted mean over non-empty bins.
inline double laace(const ReliabilityBins& rb) {
    return detail::mean_over_classes(rb, [](const ClassBins& cb) {
        double err = 0.0;
        int used = 0;
        for (const BinStat& bin : cb.bins) {
            if (bin.count == 0) continue;
            err += std::abs(bin.mean_conf() - bin.mean_iou());
            ++used;
        }
        return used ? err / used : 0.0;
    });
}

// Worst non-empty bin.
inline double lamce(const ReliabilityBins& rb) {
    return detail::mean_over_classes(rb, [](const ClassBins& cb) {
        double worst = 0.0;
        for (const BinStat& bin : cb.bins) {
            if (bin.count == 0) continue;
            worst = std::max(worst, std::abs(bin.mean_conf() - bin.mean_iou()));
        }
        return worst;
    });
}

// Precision-weighted variant: bin target is precision(j) * mean IoU of
// the TPs validated at tau.
inline double laece_precision(const DetectionStore& dets, const GroundTruthStore& gts,
                              int J, double tau) {
    const ReliabilityBins rb = build_bins(dets, gts, J, BinWeighting::precision, tau);
    return detail::mean_over_classes(rb, [](const ClassBins& cb) {
        double err = 0.0;
        for (const BinStat& bin : cb.bins) {
            if (bin.count == 0) continue;
            err += (static_cast<double>(bin.count) / static_cast<double>(cb.total)) *
                   std::abs(bin.mean_conf() - bin.precision() * bin.mean_tp_iou());
        }
        return err;
    });
}

struct EvalReport {
    double ap = 0.0;
    double ap50 = 0.0;
    double ap75 = 0.0;
    double ar = 0.0;
    double laece = 0.0;
    double laace = 0.0;
    double lamce = 0.0;
    std::map<int, double> per_class_ap;
    std::size_t num_detections = 0;
    std::size_t num_ground_truths = 0;
};

inline std::vector<double> coco_tau_grid() {
    std::vector<double> taus;
    for (int i = 0; i < 10; ++i) taus.push_back(static_cast<double>(50 + 5 * i) / 100.0);
    return taus;
}

namespace detail {

struct ClassCurve {
    std::vector<double> recall;
    std::vector<double> env_precision;  // monotone non-increasing envelope
    std::size_t tp_total = 0;
};

// Cumulative precision/recall in global score order for one class at one
// IoU threshold, with the COCO precision envelope applied.
inline ClassCurve class_curve(const DetectionStore& dets, const GroundTruthStore& gts,
                              const MatchResult& match, int class_id, std::size_t num_gt) {
    std::vector<size_t> order;
    for (size_t i = 0; i < dets.dets.size(); ++i) {
        if (dets.dets[i].class_id == class_id) order.push_back(i);
    }
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (dets.dets[a].score != dets.dets[b].score) {
            return dets.dets[a].score > dets.dets[b].score;
        }
        return dets.dets[a].det_id < dets.dets[b].det_id;
    });
    ClassCurve curve;
    std::size_t tp = 0, fp = 0;
    for (size_t i : order) {
        const DetectionMatch& m = match.per_detection[i];
        if (m.is_ignored) continue;
        m.is_tp ? ++tp : ++fp;
        curve.recall.push_back(num_gt ? static_cast<double>(tp) / static_cast<double>(num_gt)
                                      : 0.0);
        curve.env_precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    }
    for (size_t i = curve.env_precision.size(); i-- > 1;) {
        curve.env_precision[i - 1] = std::max(curve.env_precision[i - 1], curve.env_precision[i]);
    }
    curve.tp_total = tp;
    return curve;
}

// 101-point interpolated AP over recall points {0, 0.01, ..., 1.00}.
inline double sampled_ap(const ClassCurve& curve) {
    double acc = 0.0;
    for (int i = 0; i <= 100; ++i) {
        const double r = static_cast<double>(i) / 100.0;
        const auto it = std::lower_bound(curve.recall.begin(), curve.recall.end(), r);
        if (it != curve.recall.end()) {
            acc += curve.env_precision[static_cast<size_t>(it - curve.recall.begin())];
        }
    }
    return acc / 101.0;
}

// Exact area under the interpolated precision-recall curve. Used where
// the optimal-AP identity must hold to numerical precision.
inline double exact_ap(const ClassCurve& curve) {
    double acc = 0.0;
    double prev_recall = 0.0;
    for (size_t i = 0; i < curve.recall.size(); ++i) {
        acc += (curve.recall[i] - prev_recall) * curve.env_precision[i];
        prev_recall = curve.recall[i];
    }
    return acc;
}

inline std::map<int, std::size_t> gt_counts(const GroundTruthStore& gts) {
    std::map<int, std::size_t> counts;
    for (const auto& g : gts.gts) {
        if (!g.ignore) ++counts[g.class_id];
    }
    return counts;
}

}  // namespace detail

enum class ApRule { coco_101_point, exact_area };

// COCO-style AP: per (class, tau) greedy matching in score order,
// precision envelope, 101-point sampling; classes averaged when they
// have at least one ground truth, then averaged over taus.
inline EvalReport coco_ap(const DetectionStore& dets, const GroundTruthStore& gts,
                          const std::vector<double>& taus, int max_dets,
                          ApRule rule = ApRule::coco_101_point) {
    if (taus.empty()) throw std::invalid_argument("coco_ap: empty tau list");
    const DetectionStore capped = top_k_survival(dets, max_dets);
    const std::map<int, std::size_t> num_gt = detail::gt_counts(gts);

    EvalReport report;
    report.num_detections = capped.size();
    for (const auto& [cls, n] : num_gt) report.num_ground_truths += n;

    std::map<int, double> per_class_sum;
    for (double tau : taus) {
        const MatchResult match = greedy_tp_match(capped, gts, tau);
        double sum = 0.0;
        for (const auto& [cls, n] : num_gt) {
            const detail::ClassCurve curve = detail::class_curve(capped, gts, match, cls, n);
            const double ap = rule == ApRule::coco_101_point ? detail::sampled_ap(curve)
                                                             : detail::exact_ap(curve);
            sum += ap;
            per_class_sum[cls] += ap;
            if (tau == 0.5) report.ap50 += ap;
            if (tau == 0.75) report.ap75 += ap;
        }
        if (!num_gt.empty()) report.ap += sum / static_cast<double>(num_gt.size());
    }
    report.ap /= static_cast<double>(taus.size());
    if (!num_gt.empty()) {
        report.ap50 /= static_cast<double>(num_gt.size());
        report.ap75 /= static_cast<double>(num_gt.size());
        for (const auto& [cls, s] : per_class_sum) {
            report.per_class_ap[cls] = s / static_cast<double>(taus.size());
        }
    }
    return report;
}

inline double average_recall(const DetectionStore& dets, const GroundTruthStore& gts,
                             const std::vector<double>& taus, int max_dets) {
    if (taus.empty()) throw std::invalid_argument("average_recall: empty tau list");
    const DetectionStore capped = top_k_survival(dets, max_dets);
    const std::map<int, std::size_t> num_gt = detail::gt_counts(gts);
    if (num_gt.empty()) return 0.0;

    double acc = 0.0;
    for (double tau : taus) {
        const MatchResult match = greedy_tp_match(capped, gts, tau);
        std::map<int, std::size_t> tp;
        for (size_t i = 0; i < capped.dets.size(); ++i) {
            if (match.per_detection[i].is_tp) ++tp[capped.dets[i].class_id];
        }
        double recall = 0.0;
        for (const auto& [cls, n] : num_gt) {
            recall += static_cast<double>(tp[cls]) / static_cast<double>(n);
        }
        acc += recall / static_cast<double>(num_gt.size());
    }
    return acc / static_cast<double>(taus.size());
}

inline EvalReport evaluate(const DetectionStore& dets, const GroundTruthStore& gts,
                           int J, int max_dets) {
    EvalReport report = coco_ap(dets, gts, coco_tau_grid(), max_dets);
    report.ar = average_recall(dets, gts, coco_tau_grid(), max_dets);
    const ReliabilityBins rb = build_bins(dets, gts, J, BinWeighting::reduced);
    report.laece = laece(rb);
    report.laace = laace(rb);
    report.lamce = lamce(rb);
    return report;
}

struct SweepRow {
    double threshold = 0.0;
    double mean_survivors_per_image = 0.0;  // after background removal, before NMS
    double ap = 0.0;
};

inline std::vector<SweepRow> threshold_sweep(const DetectionStore& store,
                                             const GroundTruthStore& gts,
                                             const std::vector<double>& thresholds,
                                             const FusionConfig& cfg, int max_dets) {
    std::vector<SweepRow> rows;
    for (double thr : thresholds) {
        const DetectionStore kept = background_removal(store, thr);
        std::map<std::string, std::size_t> per_image;
        for (const auto& d : kept.dets) ++per_image[d.image_id];
        SweepRow row;
        row.threshold = thr;
        if (!per_image.empty()) {
            double sum = 0.0;
            for (const auto& [img, n] : per_image) sum += static_cast<double>(n);
            row.mean_survivors_per_image = sum / static_cast<double>(per_image.size());
        }
        row.ap = coco_ap(standard_nms(kept, cfg.iou_nms), gts, coco_tau_grid(), max_dets).ap;
        rows.push_back(row);
    }
    return rows;
}

namespace detail {

// Shortest decimal that parses back to the same double.
inline std::string fmt_double(double v) { return nlohmann::json(v).dump(); }

}  // namespace detail

inline void reliability_to_csv(const ReliabilityBins& rb, std::ostream& out) {
    out << "class,bin,lo,hi,count,mean_conf,mean_iou,precision\n";
    for (const auto& [cls, cb] : rb.per_class) {
        for (int j = 0; j < rb.J; ++j) {
            const BinStat& bin = cb.bins[j];
            const double prec =
                rb.weighting == BinWeighting::precision ? bin.precision() : 1.0;
            out << cls << ',' << j << ',' << detail::fmt_double(static_cast<double>(j) / rb.J)
                << ',' << detail::fmt_double(static_cast<double>(j + 1) / rb.J) << ','
                << bin.count << ',' << detail::fmt_double(bin.mean_conf()) << ','
                << detail::fmt_double(bin.mean_iou()) << ',' << detail::fmt_double(prec)
                << '\n';
        }
    }
}

inline void reliability_to_svg(const ReliabilityBins& rb, std::ostream& out) {
    const int width = 320;
    const int height = 320;
    const int margin = 20;
    const int plot = width - 2 * margin;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
        << "\" height=\"" << height * std::max<size_t>(rb.per_class.size(), 1) << "\">\n";
    int panel = 0;
    for (const auto& [cls, cb] : rb.per_class) {
        const int oy = panel * height;
        out << "<g>\n<text x=\"" << margin << "\" y=\"" << oy + 14
            << "\" font-size=\"11\">class " << cls << "</text>\n";
        for (int j = 0; j < rb.J; ++j) {
            const BinStat& bin = cb.bins[j];
            if (bin.count == 0) continue;
            const double x = margin + plot * static_cast<double>(j) / rb.J;
            const double bw = static_cast<double>(plot) / rb.J;
            const double v = bin.mean_iou();
            out << "<rect x=\"" << x << "\" y=\"" << oy + margin + plot * (1.0 - v)
                << "\" width=\"" << bw << "\" height=\"" << plot * v
                << "\" fill=\"steelblue\" stroke=\"white\"/>\n";
        }
        out << "<line x1=\"" << margin << "\" y1=\"" << oy + margin + plot << "\" x2=\""
            << margin + plot << "\" y2=\"" << oy + margin
            << "\" stroke=\"gray\" stroke-dasharray=\"4 2\"/>\n</g>\n";
        ++panel;
    }
    out << "</svg>\n";
}

inline void reliability_export(const ReliabilityBins& rb, const std::string& path,
                               const std::string& format) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open output file: " + path);
    if (format == "csv") {
        reliability_to_csv(rb, out);
    } else if (format == "svg") {
        reliability_to_svg(rb, out);
    } else {
        throw std::runtime_error("unknown reliability export format: " + format);
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

inline nlohmann::json eval_report_to_json(const EvalReport& r) {
    nlohmann::json per_class = nlohmann::json::object();
    for (const auto& [cls, ap] : r.per_class_ap) per_class[std::to_string(cls)] = ap;
    return {{"AP", r.ap},       {"AP50", r.ap50},   {"AP75", r.ap75},
            {"AR", r.ar},       {"LaECE", r.laece}, {"LaACE", r.laace},
            {"LaMCE", r.lamce}, {"per_class_AP", per_class},
            {"num_detections", r.num_detections},
            {"num_ground_truths", r.num_ground_truths}};
}

}  // namespace mocae
