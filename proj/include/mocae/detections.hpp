#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mocae/geometry.hpp"

namespace mocae {

enum class GeometryKind { axis_aligned, rotated };

struct Detection {
    std::string image_id;
    int class_id = 0;
    BoxGeometry box;
    double score = 0.0;
    int expert_id = 0;
    std::int64_t det_id = 0;
};

struct GroundTruth {
    std::string image_id;
    int class_id = 0;
    BoxGeometry box;
    std::int64_t gt_id = 0;
    bool ignore = false;
};

using ImageClassKey = std::pair<std::string, int>;

namespace detail {

// Files may carry image_id as a string or an integer; normalize to a
// string key. Integer-looking strings serialize back as numbers.
inline std::string image_key(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
    throw std::runtime_error("image_id must be a string or an integer");
}

inline nlohmann::json image_json(const std::string& key) {
    if (key.empty()) return key;
    size_t i = (key[0] == '-') ? 1 : 0;
    if (i == key.size()) return key;
    for (size_t j = i; j < key.size(); ++j) {
        if (!std::isdigit(static_cast<unsigned char>(key[j]))) return key;
    }
    try {
        return nlohmann::json(std::stoll(key));
    } catch (const std::exception&) {
        return key;
    }
}

inline BoxGeometry parse_bbox(const nlohmann::json& arr, GeometryKind kind) {
    if (!arr.is_array()) throw std::runtime_error("bbox must be an array");
    if (kind == GeometryKind::axis_aligned) {
        if (arr.size() != 4) throw std::runtime_error("axis-aligned bbox needs 4 numbers");
        const double w = arr[2].get<double>();
        const double h = arr[3].get<double>();
        if (w < 0.0 || h < 0.0) throw std::domain_error("bbox width/height must be nonnegative");
        return AxisAlignedBox::from_xywh(arr[0].get<double>(), arr[1].get<double>(), w, h);
    }
    if (arr.size() != 5) throw std::runtime_error("rotated bbox needs 5 numbers");
    const double w = arr[2].get<double>();
    const double h = arr[3].get<double>();
    if (w < 0.0 || h < 0.0) throw std::domain_error("bbox width/height must be nonnegative");
    return RotatedBox{arr[0].get<double>(), arr[1].get<double>(), w, h, arr[4].get<double>()};
}

// Width value whose addition to `lo` reproduces `hi` exactly, so that a
// write/load cycle is a fixed point on corner coordinates.
inline double exact_extent(double lo, double hi) {
    double w = hi - lo;
    for (int i = 0; i < 4 && lo + w != hi; ++i) {
        w = std::nextafter(w, lo + w < hi ? std::numeric_limits<double>::infinity()
                                          : -std::numeric_limits<double>::infinity());
    }
    return std::max(w, 0.0);
}

inline nlohmann::json bbox_json(const BoxGeometry& box) {
    nlohmann::json arr = nlohmann::json::array();
    if (const auto* a = std::get_if<AxisAlignedBox>(&box)) {
        arr = {a->x_min, a->y_min, exact_extent(a->x_min, a->x_max),
               exact_extent(a->y_min, a->y_max)};
    } else {
        const auto& r = std::get<RotatedBox>(box);
        arr = {r.cx, r.cy, r.w, r.h, r.theta};
    }
    return arr;
}

}  // namespace detail

// Detections indexed by (image_id, class_id). Immutable by convention
// after finalize(); iteration order is image_id, class_id, score
// descending, det_id ascending.
struct DetectionStore {
    GeometryKind kind = GeometryKind::axis_aligned;
    std::vector<Detection> dets;
    int num_experts = 1;
    std::map<ImageClassKey, std::vector<size_t>> index;

    void finalize() {
        std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
            if (a.image_id != b.image_id) return a.image_id < b.image_id;
            if (a.class_id != b.class_id) return a.class_id < b.class_id;
            if (a.score != b.score) return a.score > b.score;
            return a.det_id < b.det_id;
        });
        index.clear();
        for (size_t i = 0; i < dets.size(); ++i) {
            index[{dets[i].image_id, dets[i].class_id}].push_back(i);
        }
        int max_expert = 0;
        for (const auto& d : dets) max_expert = std::max(max_expert, d.expert_id);
        num_experts = std::max(num_experts, max_expert + 1);
    }

    size_t size() const { return dets.size(); }
    bool empty() const { return dets.empty(); }
};

struct GroundTruthStore {
    GeometryKind kind = GeometryKind::axis_aligned;
    std::vector<GroundTruth> gts;
    std::map<ImageClassKey, std::vector<size_t>> index;

    void finalize() {
        std::stable_sort(gts.begin(), gts.end(), [](const GroundTruth& a, const GroundTruth& b) {
            if (a.image_id != b.image_id) return a.image_id < b.image_id;
            if (a.class_id != b.class_id) return a.class_id < b.class_id;
            return a.gt_id < b.gt_id;
        });
        index.clear();
        for (size_t i = 0; i < gts.size(); ++i) {
            index[{gts[i].image_id, gts[i].class_id}].push_back(i);
        }
    }

    size_t size() const { return gts.size(); }
};

inline DetectionStore detections_from_json(const nlohmann::json& doc, GeometryKind kind) {
    if (!doc.is_array()) throw std::runtime_error("detections file must be a JSON array");
    DetectionStore store;
    store.kind = kind;
    store.dets.reserve(doc.size());
    std::int64_t next_id = 0;
    for (const auto& rec : doc) {
        Detection d;
        d.image_id = detail::image_key(rec.at("image_id"));
        d.class_id = rec.at("category_id").get<int>();
        d.box = detail::parse_bbox(rec.at("bbox"), kind);
        d.score = rec.at("score").get<double>();
        if (d.score < 0.0 || d.score > 1.0) {
            throw std::domain_error("score out of [0,1]: " + std::to_string(d.score));
        }
        d.expert_id = rec.contains("expert_id") ? rec["expert_id"].get<int>() : 0;
        d.det_id = next_id++;
        store.dets.push_back(std::move(d));
    }
    store.finalize();
    return store;
}

inline DetectionStore load_detections(const std::string& path, GeometryKind kind) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open detections file: " + path);
    nlohmann::json doc;
    in >> doc;
    return detections_from_json(doc, kind);
}

inline GroundTruthStore ground_truth_from_json(const nlohmann::json& doc, GeometryKind kind) {
    if (!doc.is_object() || !doc.contains("annotations")) {
        throw std::runtime_error("ground-truth file must be an object with \"annotations\"");
    }
    GroundTruthStore store;
    store.kind = kind;
    std::int64_t next_id = 0;
    for (const auto& rec : doc["annotations"]) {
        GroundTruth g;
        g.image_id = detail::image_key(rec.at("image_id"));
        g.class_id = rec.at("category_id").get<int>();
        g.box = detail::parse_bbox(rec.at("bbox"), kind);
        g.gt_id = rec.contains("id") ? rec["id"].get<std::int64_t>() : next_id;
        if (rec.contains("iscrowd")) {
            g.ignore = rec["iscrowd"].get<int>() != 0;
        } else if (rec.contains("ignore")) {
            g.ignore = rec["ignore"].get<bool>();
        }
        ++next_id;
        store.gts.push_back(std::move(g));
    }
    store.finalize();
    return store;
}

inline GroundTruthStore load_ground_truth(const std::string& path, GeometryKind kind) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open ground-truth file: " + path);
    nlohmann::json doc;
    in >> doc;
    return ground_truth_from_json(doc, kind);
}

// Union of the expert stores; expert_id becomes the list position and
// det_ids are re-issued in concatenation order.
inline DetectionStore concat_experts(const std::vector<DetectionStore>& stores) {
    DetectionStore out;
    if (!stores.empty()) out.kind = stores.front().kind;
    std::int64_t next_id = 0;
    for (size_t e = 0; e < stores.size(); ++e) {
        if (stores[e].kind != out.kind) {
            throw std::runtime_error("geometry-kind mismatch across expert stores");
        }
        for (const auto& d : stores[e].dets) {
            Detection copy = d;
            copy.expert_id = static_cast<int>(e);
            copy.det_id = next_id++;
            out.dets.push_back(std::move(copy));
        }
    }
    out.num_experts = static_cast<int>(stores.size());
    out.finalize();
    return out;
}

inline nlohmann::json detections_to_json(const DetectionStore& store) {
    nlohmann::json doc = nlohmann::json::array();
    for (const auto& d : store.dets) {
        nlohmann::json rec;
        rec["image_id"] = detail::image_json(d.image_id);
        rec["category_id"] = d.class_id;
        rec["bbox"] = detail::bbox_json(d.box);
        rec["score"] = d.score;
        rec["expert_id"] = d.expert_id;
        doc.push_back(std::move(rec));
    }
    return doc;
}

inline nlohmann::json ground_truth_to_json(const GroundTruthStore& store) {
    nlohmann::json anns = nlohmann::json::array();
    for (const auto& g : store.gts) {
        anns.push_back({{"image_id", detail::image_json(g.image_id)},
                        {"category_id", g.class_id},
                        {"bbox", detail::bbox_json(g.box)},
                        {"id", g.gt_id},
                        {"iscrowd", g.ignore ? 1 : 0}});
    }
    return nlohmann::json{{"annotations", std::move(anns)}};
}

inline void write_ground_truth(const GroundTruthStore& store, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open output file: " + path);
    out << ground_truth_to_json(store).dump(1) << '\n';
    if (!out) throw std::runtime_error("write failed: " + path);
}

inline void write_detections(const DetectionStore& store, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open output file: " + path);
    out << detections_to_json(store).dump(1) << '\n';
    if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace mocae
