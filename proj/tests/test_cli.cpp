#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#ifndef MOCAE_CLI_PATH
#error "MOCAE_CLI_PATH must point at the mocae binary"
#endif

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct RunResult {
    int code = -1;
    std::string out;
    std::string err;
};

fs::path work_dir() {
    static const fs::path dir = [] {
        const fs::path d = fs::temp_directory_path() / "mocae_cli_test";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

RunResult run(const std::string& args) {
    static int serial = 0;
    const fs::path out = work_dir() / ("stdout_" + std::to_string(serial) + ".txt");
    const fs::path err = work_dir() / ("stderr_" + std::to_string(serial) + ".txt");
    ++serial;
    const std::string cmd = std::string(MOCAE_CLI_PATH) + " " + args + " > " +
                            out.string() + " 2> " + err.string();
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = (status >= 0 && (status & 0x7f) == 0) ? (status >> 8) & 0xff : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
}

void write_file(const fs::path& p, const json& doc) {
    std::ofstream out(p);
    out << doc.dump(1) << '\n';
}

json det(int image, int cls, std::initializer_list<double> xywh, double score) {
    return {{"image_id", image}, {"category_id", cls}, {"bbox", xywh}, {"score", score}};
}

json ann(int image, int cls, std::initializer_list<double> xywh, int id) {
    return {{"image_id", image}, {"category_id", cls}, {"bbox", xywh}, {"id", id},
            {"iscrowd", 0}};
}

// Detections fully inside their own gts: area ratio == psi target ==
// score, i.e. a perfectly calibrated fixture.
void write_calibrated_fixture(const fs::path& dets_path, const fs::path& gt_path) {
    json dj = json::array(), gj = json::array();
    const double targets[] = {0.3, 0.5, 0.8, 1.0};
    int cls = 1;
    for (int i = 0; i < 4; ++i) {
        const double x = 30.0 * i;
        gj.push_back(ann(1, cls, {x, 0, 1, 10}, i));
        dj.push_back(det(1, cls, {x, 10.0 * (1.0 - targets[i]), 1, 10.0 * targets[i]},
                         targets[i]));
        cls = (i % 2) ? 1 : 2;  // alternate classes 1/2
    }
    write_file(dets_path, dj);
    write_file(gt_path, {{"annotations", gj}});
}

// Two gts, one perfect TP plus one far FP: half coverage.
void write_half_fixture(const fs::path& dets_path, const fs::path& gt_path) {
    write_file(dets_path, json::array({det(1, 1, {0, 0, 2, 2}, 0.9),
                                       det(1, 1, {50, 50, 2, 2}, 0.5)}));
    write_file(gt_path, {{"annotations", json::array({ann(1, 1, {0, 0, 2, 2}, 0),
                                                      ann(1, 1, {80, 80, 2, 2}, 1)})}});
}

}  // namespace

TEST_CASE("help output covers every subcommand and exits 0") {
    const RunResult top = run("--help");
    CHECK(top.code == 0);
    for (const char* sub : {"calibrate", "fuse", "eval", "reliability", "sweep", "synth",
                            "oracle-check", "demo"}) {
        CHECK(top.out.find(sub) != std::string::npos);
        const RunResult r = run(std::string(sub) + " --help");
        CHECK(r.code == 0);
        CHECK(r.out.find("--") != std::string::npos);
    }
}

TEST_CASE("usage errors exit 1") {
    CHECK(run("").code == 1);                      // missing subcommand
    CHECK(run("eval --dets only.json").code == 1); // missing required --gt
    CHECK(run("frobnicate").code == 1);            // unknown subcommand
    const fs::path gt = work_dir() / "missing_gt.json";
    CHECK(run("eval --dets " + (work_dir() / "nope.json").string() + " --gt " +
              gt.string()).code == 1);
}

TEST_CASE("domain errors exit 2") {
    const fs::path dets = work_dir() / "bad_score.json";
    const fs::path gt = work_dir() / "bad_score_gt.json";
    write_file(dets, json::array({det(1, 1, {0, 0, 2, 2}, 1.2)}));
    write_file(gt, {{"annotations", json::array({ann(1, 1, {0, 0, 2, 2}, 0)})}});
    CHECK(run("eval --dets " + dets.string() + " --gt " + gt.string()).code == 2);
}

TEST_CASE("calibrate") {
    const fs::path dets = work_dir() / "cal_dets.json";
    const fs::path gt = work_dir() / "cal_gt.json";
    write_calibrated_fixture(dets, gt);

    SUBCASE("perfectly calibrated input reports post-LaECE 0.0000") {
        const fs::path out = work_dir() / "cal_ca.json";
        const RunResult r = run("calibrate --dets " + dets.string() + " --gt " + gt.string() +
                                " --out " + out.string());
        CHECK(r.code == 0);
        CHECK(r.out.find("LaECE after calibration:  0.0000") != std::string::npos);
        CHECK(fs::exists(out));
    }
    SUBCASE("class-wise mode writes one calibrator per class") {
        const fs::path out = work_dir() / "cal_cw.json";
        REQUIRE(run("calibrate --dets " + dets.string() + " --gt " + gt.string() +
                    " --mode cw --out " + out.string()).code == 0);
        json doc;
        std::ifstream(out) >> doc;
        CHECK(doc.at("mode") == "cw");
        CHECK(doc.at("calibrators").size() == 2);
    }
}

TEST_CASE("fuse") {
    const fs::path dets = work_dir() / "fuse_dets.json";
    write_file(dets, json::array({det(1, 1, {0, 0, 1, 10}, 0.9),
                                  det(1, 1, {0, 1, 1, 9}, 0.8),
                                  det(1, 1, {50, 50, 2, 2}, 0.7)}));

    SUBCASE("identity calibrator with standard NMS suppresses the duplicate") {
        const fs::path out = work_dir() / "fused.json";
        const RunResult r = run("fuse --dets " + dets.string() +
                                " --cal identity --nms standard --no-score-voting --out " +
                                out.string());
        CHECK(r.code == 0);
        json doc;
        std::ifstream(out) >> doc;
        CHECK(doc.size() == 2);  // the IoU-0.9 pair collapses to one box
    }
    SUBCASE("arity mismatch exits 1") {
        const RunResult r = run("fuse --dets " + dets.string() + " --dets " + dets.string() +
                                " --cal identity --out " + (work_dir() / "x.json").string());
        CHECK(r.code == 1);
    }
    SUBCASE("soft-gaussian flags are accepted") {
        const fs::path out = work_dir() / "fused_sg.json";
        CHECK(run("fuse --dets " + dets.string() +
                  " --nms soft-gaussian --sigma-nms 0.4 --out " + out.string()).code == 0);
    }
    SUBCASE("config file applies and flags win") {
        const fs::path cfg = work_dir() / "fuse_cfg.json";
        write_file(cfg, {{"top_k", 1}, {"nms_kind", "standard"}, {"score_voting", false}});
        const fs::path out1 = work_dir() / "fused_k1.json";
        REQUIRE(run("fuse --dets " + dets.string() + " --config " + cfg.string() + " --out " +
                    out1.string()).code == 0);
        json doc1;
        std::ifstream(out1) >> doc1;
        CHECK(doc1.size() == 1);
        const fs::path out2 = work_dir() / "fused_k9.json";
        REQUIRE(run("fuse --dets " + dets.string() + " --config " + cfg.string() +
                    " --top-k 9 --out " + out2.string()).code == 0);
        json doc2;
        std::ifstream(out2) >> doc2;
        CHECK(doc2.size() == 2);
    }
    SUBCASE("invalid config value exits 2") {
        const fs::path cfg = work_dir() / "bad_cfg.json";
        write_file(cfg, {{"iou_nms", 0.0}});
        CHECK(run("fuse --dets " + dets.string() + " --config " + cfg.string() + " --out " +
                  (work_dir() / "y.json").string()).code == 2);
    }
}

TEST_CASE("eval prints the percentage table and writes JSON") {
    const fs::path dets = work_dir() / "eval_dets.json";
    const fs::path gt = work_dir() / "eval_gt.json";
    write_half_fixture(dets, gt);
    const fs::path report = work_dir() / "eval_report.json";
    const RunResult r = run("eval --dets " + dets.string() + " --gt " + gt.string() +
                            " --json " + report.string());
    CHECK(r.code == 0);
    // Half coverage under 101-point sampling: 51/101 = 50.4950 percent.
    CHECK(r.out.find("50.4950") != std::string::npos);
    json doc;
    std::ifstream(report) >> doc;
    CHECK(std::abs(doc.at("AP").get<double>() - 51.0 / 101.0) <= 1e-12);
    CHECK(doc.at("num_ground_truths") == 2);
}

TEST_CASE("reliability emits a 25-row CSV per class") {
    const fs::path dets = work_dir() / "rel_dets.json";
    const fs::path gt = work_dir() / "rel_gt.json";
    write_calibrated_fixture(dets, gt);
    const fs::path csv = work_dir() / "rel.csv";
    const RunResult r = run("reliability --dets " + dets.string() + " --gt " + gt.string() +
                            " --bins 25 --csv " + csv.string());
    CHECK(r.code == 0);
    std::ifstream in(csv);
    std::string line;
    int rows = -1;  // discount the header
    while (std::getline(in, line)) ++rows;
    CHECK(rows == 50);  // two classes
}

TEST_CASE("sweep runs over the threshold list") {
    const fs::path dets = work_dir() / "sweep_dets.json";
    const fs::path gt = work_dir() / "sweep_gt.json";
    write_half_fixture(dets, gt);
    const fs::path table = work_dir() / "sweep.json";
    const RunResult r = run("sweep --dets " + dets.string() + " --gt " + gt.string() +
                            " --thresholds 0,0.6 --json " + table.string());
    CHECK(r.code == 0);
    json doc;
    std::ifstream(table) >> doc;
    REQUIRE(doc.size() == 2);
    CHECK(doc[0].at("threshold") == 0.0);
    CHECK(doc[0].at("mean_survivors_per_image").get<double>() >=
          doc[1].at("mean_survivors_per_image").get<double>());
}

TEST_CASE("synth writes deterministic expert and gt files") {
    const fs::path dir1 = work_dir() / "scene1";
    const fs::path dir2 = work_dir() / "scene2";
    fs::create_directories(dir1);
    fs::create_directories(dir2);
    const std::string flags = " --seed 4 --images 6 --gts-per-image 3 --out-dir ";
    REQUIRE(run("synth" + flags + dir1.string()).code == 0);
    REQUIRE(run("synth" + flags + dir2.string()).code == 0);
    for (const char* name : {"gt.json", "expert_0.json", "expert_1.json"}) {
        CHECK(fs::exists(dir1 / name));
        CHECK(slurp(dir1 / name) == slurp(dir2 / name));
        CHECK(!slurp(dir1 / name).empty());
    }
}

TEST_CASE("oracle-check reports full passes and honors --threads") {
    const fs::path j1 = work_dir() / "oracle1.json";
    const fs::path j2 = work_dir() / "oracle2.json";
    const RunResult r1 = run("oracle-check --scenes 6 --threads 1 --json " + j1.string());
    const RunResult r2 = run("oracle-check --scenes 6 --threads 3 --json " + j2.string());
    CHECK(r1.code == 0);
    CHECK(r1.out.find("pass 6/6") != std::string::npos);
    CHECK(slurp(j1) == slurp(j2));
}

TEST_CASE("repeated runs are byte-identical") {
    const fs::path dets = work_dir() / "det_dets.json";
    const fs::path gt = work_dir() / "det_gt.json";
    write_calibrated_fixture(dets, gt);

    const fs::path a = work_dir() / "det_a.json";
    const fs::path b = work_dir() / "det_b.json";
    REQUIRE(run("eval --dets " + dets.string() + " --gt " + gt.string() + " --json " +
                a.string()).code == 0);
    REQUIRE(run("eval --dets " + dets.string() + " --gt " + gt.string() + " --json " +
                b.string()).code == 0);
    CHECK(slurp(a) == slurp(b));

    const fs::path fa = work_dir() / "fuse_a.json";
    const fs::path fb = work_dir() / "fuse_b.json";
    REQUIRE(run("fuse --dets " + dets.string() + " --out " + fa.string()).code == 0);
    REQUIRE(run("fuse --dets " + dets.string() + " --out " + fb.string()).code == 0);
    CHECK(slurp(fa) == slurp(fb));
    CHECK(!slurp(fa).empty());
}
