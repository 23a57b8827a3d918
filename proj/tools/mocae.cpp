#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mocae/calib.hpp"
#include "mocae/detections.hpp"
#include "mocae/fuse.hpp"
#include "mocae/matching.hpp"
#include "mocae/metrics.hpp"
#include "mocae/oracle.hpp"

namespace {

using namespace mocae;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitDomain = 2;

std::string pct(double v) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(4) << v * 100.0;
    return out.str();
}

GeometryKind geometry_from_string(const std::string& s) {
    if (s == "aabb") return GeometryKind::axis_aligned;
    if (s == "rotated") return GeometryKind::rotated;
    throw std::runtime_error("unknown geometry: " + s);
}

std::vector<double> parse_list(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stod(item));
    }
    return out;
}

void write_json(const nlohmann::json& doc, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open output file: " + path);
    out << doc.dump(1) << '\n';
}

int default_threads() {
    if (const char* env = std::getenv("MOCAE_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) return n;
    }
    return 1;
}

struct FuseFlags {
    std::string nms;
    double iou_nms = 0.0;
    double sigma_nms = 0.0;
    double sigma_sv = 0.0;
    double bg_threshold = 0.0;
    int top_k = 0;
    double prune = 0.0;
    bool voting_on = false;
    bool voting_off = false;
};

// Config file values first, explicit flags win.
void add_fusion_flags(CLI::App* cmd, FuseFlags& flags) {
    cmd->add_option("--nms", flags.nms,
                    "NMS kind: standard|soft-linear|soft-gaussian (default standard)");
    cmd->add_option("--iou-nms", flags.iou_nms, "IoU threshold for standard/linear NMS (default 0.65)");
    cmd->add_option("--sigma-nms", flags.sigma_nms, "Gaussian Soft NMS sigma (default 0.4)");
    cmd->add_option("--sigma-sv", flags.sigma_sv, "Score Voting sigma (default 0.04)");
    cmd->add_option("--bg-threshold", flags.bg_threshold,
                    "background removal score threshold (default 0.05)");
    cmd->add_option("--top-k", flags.top_k, "per-image detection cap (default 100)");
    cmd->add_option("--prune", flags.prune,
                    "post-Soft-NMS pruning threshold (default 0.001)");
    cmd->add_flag("--score-voting", flags.voting_on, "enable Score Voting (default on)");
    cmd->add_flag("--no-score-voting", flags.voting_off, "disable Score Voting");
}

FusionConfig resolve_fusion_config(const CLI::App* cmd, const FuseFlags& flags,
                                   const std::string& config_path) {
    FusionConfig cfg;
    if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw std::runtime_error("cannot open config file: " + config_path);
        nlohmann::json doc;
        in >> doc;
        cfg = fusion_config_from_json(doc);
    }
    if (cmd->count("--nms")) cfg.nms_kind = nms_kind_from_string(flags.nms);
    if (cmd->count("--iou-nms")) cfg.iou_nms = flags.iou_nms;
    if (cmd->count("--sigma-nms")) cfg.sigma_nms = flags.sigma_nms;
    if (cmd->count("--sigma-sv")) cfg.sigma_sv = flags.sigma_sv;
    if (cmd->count("--bg-threshold")) cfg.background_threshold = flags.bg_threshold;
    if (cmd->count("--top-k")) cfg.top_k = flags.top_k;
    if (cmd->count("--prune")) cfg.prune_after_soft = flags.prune;
    if (flags.voting_on) cfg.score_voting = true;
    if (flags.voting_off) cfg.score_voting = false;
    cfg.validate();
    return cfg;
}

SyntheticSceneSpec spec_from_json(const nlohmann::json& doc) {
    SyntheticSceneSpec spec;
    for (const auto& [key, val] : doc.items()) {
        if (key == "num_images") spec.num_images = val.get<int>();
        else if (key == "gts_per_image") spec.gts_per_image = val.get<int>();
        else if (key == "fp_max_iou") spec.fp_max_iou = val.get<double>();
        else if (key == "seed") spec.seed = val.get<std::uint64_t>();
        else if (key == "experts") {
            for (const auto& ej : val) {
                ExpertSpec ex;
                for (const auto& [ek, ev] : ej.items()) {
                    if (ek == "noise_scale") ex.noise_scale = ev.get<double>();
                    else if (ek == "miss_prob") ex.miss_prob = ev.get<double>();
                    else if (ek == "fp_rate") ex.fp_rate = ev.get<double>();
                    else if (ek == "gamma") ex.gamma = ev.get<double>();
                    else if (ek == "a") ex.affine_a = ev.get<double>();
                    else if (ek == "b") ex.affine_b = ev.get<double>();
                    else if (ek == "miscal") {
                        const std::string m = ev.get<std::string>();
                        if (m == "identity") ex.miscal = MiscalKind::identity;
                        else if (m == "overconfident") ex.miscal = MiscalKind::overconfident;
                        else if (m == "underconfident") ex.miscal = MiscalKind::underconfident;
                        else if (m == "affine") ex.miscal = MiscalKind::affine;
                        else throw std::runtime_error("unknown miscal kind: " + m);
                    } else {
                        throw std::runtime_error("unknown expert spec key: " + ek);
                    }
                }
                spec.experts.push_back(ex);
            }
        } else {
            throw std::runtime_error("unknown scene spec key: " + key);
        }
    }
    if (spec.experts.empty()) spec.experts.push_back(ExpertSpec{});
    return spec;
}

int cmd_calibrate(const std::string& dets_path, const std::string& gt_path,
                  const std::string& method, const std::string& mode,
                  const std::string& out_path, const std::string& geometry, int bins) {
    const GeometryKind kind = geometry_from_string(geometry);
    const DetectionStore dets = load_detections(dets_path, kind);
    const GroundTruthStore gts = load_ground_truth(gt_path, kind);
    const CalibratorMethod m =
        method == "ir" ? CalibratorMethod::isotonic : CalibratorMethod::linear;
    const CalibratorMode md =
        mode == "ca" ? CalibratorMode::class_agnostic : CalibratorMode::class_wise;

    CalibratorSet set;
    try {
        set = fit_calibrator_set(dets, gts, md, m);
    } catch (const std::invalid_argument& e) {
        std::cerr << "fit failed: " << e.what() << '\n';
        return kExitDomain;
    }
    save_calibrators(set, out_path);

    const double before = laece(build_bins(dets, gts, bins, BinWeighting::reduced));
    const double after =
        laece(build_bins(apply_calibrators(dets, set), gts, bins, BinWeighting::reduced));
    std::cout << "LaECE before calibration: " << pct(before) << '\n';
    std::cout << "LaECE after calibration:  " << pct(after) << '\n';
    for (const auto& w : set.warnings) std::cout << "warning: " << w << '\n';
    return kExitOk;
}

int cmd_fuse(const std::vector<std::string>& dets_paths,
             const std::vector<std::string>& cal_paths, const std::string& out_path,
             const FusionConfig& cfg, const std::string& geometry) {
    if (!cal_paths.empty() && cal_paths.size() != dets_paths.size()) {
        std::cerr << "need one --cal per --dets (or none at all)\n";
        return kExitUsage;
    }
    const GeometryKind kind = geometry_from_string(geometry);
    std::vector<DetectionStore> experts;
    std::vector<CalibratorSet> cals;
    for (size_t e = 0; e < dets_paths.size(); ++e) {
        experts.push_back(load_detections(dets_paths[e], kind));
        if (cal_paths.empty() || cal_paths[e] == "identity") {
            cals.push_back(CalibratorSet::identity());
        } else {
            cals.push_back(load_calibrators(cal_paths[e]));
        }
    }
    const DetectionStore fused = fuse_pipeline(experts, cals, cfg);
    write_detections(fused, out_path);
    std::cout << "fused " << experts.size() << " expert file(s) -> " << fused.size()
              << " detections\n";
    return kExitOk;
}

int cmd_eval(const std::string& dets_path, const std::string& gt_path,
             const std::string& geometry, int bins, int max_dets,
             const std::string& json_path) {
    const GeometryKind kind = geometry_from_string(geometry);
    const DetectionStore dets = load_detections(dets_path, kind);
    const GroundTruthStore gts = load_ground_truth(gt_path, kind);
    const EvalReport report = evaluate(dets, gts, bins, max_dets);

    std::cout << std::left << std::setw(8) << "AP" << std::setw(8) << "AP50" << std::setw(8)
              << "AP75" << std::setw(8) << "AR" << std::setw(9) << "LaECE" << std::setw(9)
              << "LaACE" << std::setw(9) << "LaMCE" << '\n';
    std::cout << std::left << std::setw(8) << pct(report.ap) << std::setw(8)
              << pct(report.ap50) << std::setw(8) << pct(report.ap75) << std::setw(8)
              << pct(report.ar) << std::setw(9) << pct(report.laece) << std::setw(9)
              << pct(report.laace) << std::setw(9) << pct(report.lamce) << '\n';
    if (!json_path.empty()) write_json(eval_report_to_json(report), json_path);
    return kExitOk;
}

int cmd_reliability(const std::string& dets_path, const std::string& gt_path,
                    const std::string& geometry, int bins, const std::string& weighting,
                    double tau, const std::string& csv_path, const std::string& svg_path) {
    const GeometryKind kind = geometry_from_string(geometry);
    const DetectionStore dets = load_detections(dets_path, kind);
    const GroundTruthStore gts = load_ground_truth(gt_path, kind);
    const BinWeighting w =
        weighting == "precision" ? BinWeighting::precision : BinWeighting::reduced;
    const ReliabilityBins rb = build_bins(dets, gts, bins, w, tau);
    if (!csv_path.empty()) reliability_export(rb, csv_path, "csv");
    if (!svg_path.empty()) reliability_export(rb, svg_path, "svg");
    std::cout << "LaECE " << pct(laece(rb)) << "  LaACE " << pct(laace(rb)) << "  LaMCE "
              << pct(lamce(rb)) << '\n';
    return kExitOk;
}

int cmd_sweep(const std::string& dets_path, const std::string& gt_path,
              const std::string& geometry, const std::string& thresholds_csv,
              const FusionConfig& cfg, int max_dets, const std::string& json_path) {
    const GeometryKind kind = geometry_from_string(geometry);
    const DetectionStore dets = load_detections(dets_path, kind);
    const GroundTruthStore gts = load_ground_truth(gt_path, kind);
    const std::vector<double> thresholds = parse_list(thresholds_csv);
    const std::vector<SweepRow> rows = threshold_sweep(dets, gts, thresholds, cfg, max_dets);

    std::cout << std::left << std::setw(12) << "threshold" << std::setw(16) << "mean_dets/img"
              << std::setw(10) << "AP" << '\n';
    nlohmann::json out = nlohmann::json::array();
    for (const auto& row : rows) {
        std::cout << std::left << std::setw(12) << row.threshold << std::setw(16)
                  << row.mean_survivors_per_image << std::setw(10) << pct(row.ap) << '\n';
        out.push_back({{"threshold", row.threshold},
                       {"mean_survivors_per_image", row.mean_survivors_per_image},
                       {"AP", row.ap}});
    }
    if (!json_path.empty()) write_json(out, json_path);
    return kExitOk;
}

int cmd_synth(const std::string& spec_path, std::uint64_t seed, int images, int gts_per_image,
              const std::string& out_dir) {
    SyntheticSceneSpec spec;
    if (!spec_path.empty()) {
        std::ifstream in(spec_path);
        if (!in) throw std::runtime_error("cannot open spec file: " + spec_path);
        nlohmann::json doc;
        in >> doc;
        spec = spec_from_json(doc);
    } else {
        spec = demo_scene_spec(seed);
    }
    if (seed != 0) spec.seed = seed;
    if (images > 0) spec.num_images = images;
    if (gts_per_image > 0) spec.gts_per_image = gts_per_image;

    const SyntheticScene scene = gen_synthetic(spec);
    write_ground_truth(scene.gts, out_dir + "/gt.json");
    for (size_t e = 0; e < scene.experts.size(); ++e) {
        write_detections(scene.experts[e], out_dir + "/expert_" + std::to_string(e) + ".json");
    }
    std::cout << "wrote " << scene.experts.size() << " expert file(s) and gt.json ("
              << scene.gts.size() << " objects) to " << out_dir << '\n';
    return kExitOk;
}

int cmd_oracle_check(int scenes, std::uint64_t seed, const std::string& taus_csv,
                     const FusionConfig& cfg, int threads, const std::string& json_path) {
    const std::vector<double> taus = parse_list(taus_csv);
    const OracleCheckReport report = verify_theorem(scenes, seed, cfg, taus, threads);
    std::cout << "pass " << report.passed << "/" << report.scenes.size() << '\n';
    if (!json_path.empty()) write_json(oracle_report_to_json(report), json_path);
    return report.all_pass() ? kExitOk : kExitDomain;
}

int cmd_demo(std::uint64_t seed, const FusionConfig& cfg, const std::string& json_path) {
    const DemoReport report = miscalibration_demo(demo_scene_spec(seed), cfg);
    std::cout << std::left << std::setw(18) << "method" << std::setw(10) << "AP"
              << std::setw(10) << "AP50" << std::setw(10) << "AR" << '\n';
    for (const auto& e : report.entries) {
        std::cout << std::left << std::setw(18) << e.name << std::setw(10) << pct(e.ap)
                  << std::setw(10) << pct(e.ap50) << std::setw(10) << pct(e.ar) << '\n';
    }
    std::cout << "survivor share (vanilla):   ";
    for (double s : report.vanilla_share) std::cout << pct(s) << ' ';
    std::cout << "\nsurvivor share (calibrated): ";
    for (double s : report.calibrated_share) std::cout << pct(s) << ' ';
    std::cout << '\n';
    if (!json_path.empty()) write_json(demo_report_to_json(report), json_path);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mixture-of-calibrated-experts toolkit for object detectors"};
    app.require_subcommand(1);

    std::string dets_path, gt_path, out_path, geometry = "aabb";
    std::vector<std::string> dets_paths, cal_paths;
    std::string method = "ir", mode = "ca", weighting = "reduced";
    std::string config_path, json_path, csv_path, svg_path, spec_path, out_dir = ".";
    std::string thresholds = "0,0.05,0.1,0.2", taus = "0.5,0.75";
    int bins = 25, max_dets = 100, scenes = 100, images = 0, gts_per_image = 0;
    int threads = default_threads();
    double tau = 0.5;
    std::uint64_t seed = 0;
    FuseFlags fuse_flags;

    auto* calibrate = app.add_subcommand("calibrate", "fit a calibrator set on held-out data");
    calibrate->add_option("--dets", dets_path, "detections JSON")->required();
    calibrate->add_option("--gt", gt_path, "ground-truth JSON")->required();
    calibrate->add_option("--method", method, "ir|lr (default ir)")
        ->check(CLI::IsMember({"ir", "lr"}));
    calibrate->add_option("--mode", mode, "ca|cw (default ca)")
        ->check(CLI::IsMember({"ca", "cw"}));
    calibrate->add_option("--out", out_path, "calibrator JSON output")->required();
    calibrate->add_option("--geometry", geometry, "aabb|rotated (default aabb)");
    calibrate->add_option("--bins", bins, "reliability bin count (default 25)");

    auto* fuse = app.add_subcommand("fuse", "calibrate + aggregate expert detection files");
    fuse->add_option("--dets", dets_paths, "detections JSON, one per expert")->required();
    fuse->add_option("--cal", cal_paths, "calibrator JSON per expert, or 'identity'");
    fuse->add_option("--out", out_path, "fused detections output")->required();
    fuse->add_option("--config", config_path, "fusion config JSON (flags override)");
    fuse->add_option("--geometry", geometry, "aabb|rotated (default aabb)");
    add_fusion_flags(fuse, fuse_flags);

    auto* eval = app.add_subcommand("eval", "accuracy and calibration report");
    eval->add_option("--dets", dets_path, "detections JSON")->required();
    eval->add_option("--gt", gt_path, "ground-truth JSON")->required();
    eval->add_option("--geometry", geometry, "aabb|rotated (default aabb)");
    eval->add_option("--bins", bins, "reliability bin count (default 25)");
    eval->add_option("--max-dets", max_dets, "per-image detection cap (default 100)");
    eval->add_option("--json", json_path, "machine-readable report path");

    auto* reliability = app.add_subcommand("reliability", "reliability diagram data");
    reliability->add_option("--dets", dets_path, "detections JSON")->required();
    reliability->add_option("--gt", gt_path, "ground-truth JSON")->required();
    reliability->add_option("--geometry", geometry, "aabb|rotated (default aabb)");
    reliability->add_option("--bins", bins, "bin count (default 25)");
    reliability->add_option("--weighting", weighting, "reduced|precision (default reduced)")
        ->check(CLI::IsMember({"reduced", "precision"}));
    reliability->add_option("--tau", tau, "TP IoU threshold for precision weighting (default 0.5)");
    reliability->add_option("--csv", csv_path, "CSV output path");
    reliability->add_option("--svg", svg_path, "SVG output path");

    auto* sweep = app.add_subcommand("sweep", "background-removal threshold sweep");
    sweep->add_option("--dets", dets_path, "detections JSON")->required();
    sweep->add_option("--gt", gt_path, "ground-truth JSON")->required();
    sweep->add_option("--geometry", geometry, "aabb|rotated (default aabb)");
    sweep->add_option("--thresholds", thresholds,
                      "comma-separated thresholds (default 0,0.05,0.1,0.2)");
    sweep->add_option("--max-dets", max_dets, "per-image detection cap (default 100)");
    sweep->add_option("--json", json_path, "machine-readable table path");
    FuseFlags sweep_flags;
    sweep->add_option("--iou-nms", sweep_flags.iou_nms, "NMS IoU threshold (default 0.65)");

    auto* synth = app.add_subcommand("synth", "generate a synthetic multi-expert scene");
    synth->add_option("--spec", spec_path, "scene spec JSON (defaults to the demo scene)");
    synth->add_option("--seed", seed, "rng seed (default 0)");
    synth->add_option("--images", images, "override image count");
    synth->add_option("--gts-per-image", gts_per_image, "override objects per image");
    synth->add_option("--out-dir", out_dir, "output directory (default .)");

    auto* oracle_check = app.add_subcommand("oracle-check",
                                            "optimal-AP identity on synthetic scenes");
    oracle_check->add_option("--scenes", scenes, "scene count (default 100)");
    oracle_check->add_option("--seed", seed, "base seed (default 0)");
    oracle_check->add_option("--taus", taus, "comma-separated IoU thresholds (default 0.5,0.75)");
    oracle_check->add_option("--threads", threads, "worker cap (default $MOCAE_THREADS or 1)");
    oracle_check->add_option("--json", json_path, "machine-readable report path");

    auto* demo = app.add_subcommand("demo", "two-expert miscalibration study");
    demo->add_option("--seed", seed, "rng seed (default 0)");
    demo->add_option("--json", json_path, "machine-readable report path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // Collapse CLI11's error-code zoo onto the uniform scheme; --help
        // stays exit 0.
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (calibrate->parsed()) {
            return cmd_calibrate(dets_path, gt_path, method, mode, out_path, geometry, bins);
        }
        if (fuse->parsed()) {
            return cmd_fuse(dets_paths, cal_paths, out_path,
                            resolve_fusion_config(fuse, fuse_flags, config_path), geometry);
        }
        if (eval->parsed()) {
            return cmd_eval(dets_path, gt_path, geometry, bins, max_dets, json_path);
        }
        if (reliability->parsed()) {
            return cmd_reliability(dets_path, gt_path, geometry, bins, weighting, tau,
                                   csv_path, svg_path);
        }
        if (sweep->parsed()) {
            FusionConfig cfg;
            if (sweep->count("--iou-nms")) cfg.iou_nms = sweep_flags.iou_nms;
            return cmd_sweep(dets_path, gt_path, geometry, thresholds, cfg, max_dets,
                             json_path);
        }
        if (synth->parsed()) return cmd_synth(spec_path, seed, images, gts_per_image, out_dir);
        if (oracle_check->parsed()) {
            return cmd_oracle_check(scenes, seed, taus, FusionConfig{}, threads, json_path);
        }
        if (demo->parsed()) return cmd_demo(seed, FusionConfig{}, json_path);
    } catch (const std::domain_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitDomain;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitDomain;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    }
    return kExitUsage;
}
