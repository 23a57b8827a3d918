#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "mocae/calib.hpp"
#include "mocae/metrics.hpp"

using namespace mocae;
using nlohmann::json;

namespace {

std::vector<TargetPair> pairs_of(std::initializer_list<std::pair<double, double>> xy) {
    std::vector<TargetPair> out;
    for (const auto& [x, y] : xy) out.push_back({x, y, 1, 0});
    return out;
}

double sse_of_fit(const IsotonicCalibrator& cal, const std::vector<TargetPair>& pairs) {
    double acc = 0.0;
    for (const auto& p : pairs) {
        const double r = cal(p.score) - p.target_iou;
        acc += r * r;
    }
    return acc;
}

// Exhaustive reference: every partition of the sorted points into
// consecutive blocks, fitted by block means, restricted to monotone
// block means.
double brute_force_monotone_sse(std::vector<TargetPair> pairs) {
    std::sort(pairs.begin(), pairs.end(),
              [](const TargetPair& a, const TargetPair& b) { return a.score < b.score; });
    const size_t n = pairs.size();
    double best = std::numeric_limits<double>::infinity();
    for (unsigned mask = 0; mask < (1u << (n - 1)); ++mask) {
        double sse = 0.0;
        double prev_mean = -std::numeric_limits<double>::infinity();
        bool ok = true;
        size_t start = 0;
        for (size_t i = 0; i < n && ok; ++i) {
            const bool boundary = (i == n - 1) || (mask & (1u << i));
            if (!boundary) continue;
            double sum = 0.0;
            for (size_t k = start; k <= i; ++k) sum += pairs[k].target_iou;
            const double mean = sum / static_cast<double>(i - start + 1);
            if (mean < prev_mean) {
                ok = false;
                break;
            }
            for (size_t k = start; k <= i; ++k) {
                const double r = pairs[k].target_iou - mean;
                sse += r * r;
            }
            prev_mean = mean;
            start = i + 1;
        }
        if (ok) best = std::min(best, sse);
    }
    return best;
}

}  // namespace

TEST_CASE("isotonic fit") {
    SUBCASE("monotone input is interpolated exactly") {
        const auto pairs = pairs_of({{0.1, 0.2}, {0.4, 0.5}, {0.8, 0.9}});
        const IsotonicCalibrator cal = fit_isotonic(pairs);
        for (const auto& p : pairs) CHECK(cal(p.score) == doctest::Approx(p.target_iou));
    }
    SUBCASE("violating pair is pooled to its mean") {
        const IsotonicCalibrator cal =
            fit_isotonic(pairs_of({{0.1, 0.3}, {0.2, 0.2}, {0.3, 0.6}}));
        CHECK(cal(0.1) == doctest::Approx(0.25));
        CHECK(cal(0.2) == doctest::Approx(0.25));
        CHECK(cal(0.3) == doctest::Approx(0.6));
    }
    SUBCASE("constant targets give a constant map") {
        const IsotonicCalibrator cal =
            fit_isotonic(pairs_of({{0.1, 0.4}, {0.5, 0.4}, {0.9, 0.4}}));
        CHECK(cal(0.0) == doctest::Approx(0.4));
        CHECK(cal(0.77) == doctest::Approx(0.4));
        CHECK(cal(1.0) == doctest::Approx(0.4));
    }
    SUBCASE("equal scores are pre-pooled") {
        const IsotonicCalibrator cal =
            fit_isotonic(pairs_of({{0.5, 0.2}, {0.5, 0.8}, {0.9, 0.9}}));
        CHECK(cal(0.5) == doctest::Approx(0.5));
        CHECK(std::is_sorted(cal.knot_x.begin(), cal.knot_x.end(), std::less_equal<>()));
    }
    SUBCASE("empty input throws") {
        CHECK_THROWS_AS(fit_isotonic({}), std::invalid_argument);
    }
}

TEST_CASE("PAVA matches exhaustive monotone-fit search on small inputs") {
    std::mt19937_64 gen(17);
    auto uniform = [&] { return static_cast<double>(gen() >> 11) * 0x1.0p-53; };
    for (int iter = 0; iter < 300; ++iter) {
        const size_t n = 2 + static_cast<size_t>(uniform() * 5);  // up to 6
        std::vector<TargetPair> pairs;
        for (size_t i = 0; i < n; ++i) {
            pairs.push_back({uniform(), uniform(), 1, 0});
        }
        const double pava = sse_of_fit(fit_isotonic(pairs), pairs);
        const double brute = brute_force_monotone_sse(pairs);
        CHECK(std::abs(pava - brute) <= 1e-9);
    }
}

TEST_CASE("linear fit") {
    SUBCASE("identity line") {
        const LinearCalibrator cal =
            fit_linear(pairs_of({{0.0, 0.0}, {0.5, 0.5}, {1.0, 1.0}}));
        CHECK(cal.a == doctest::Approx(1.0));
        CHECK(cal.b == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("two points fit exactly") {
        const LinearCalibrator cal = fit_linear(pairs_of({{0.0, 0.0}, {1.0, 0.5}}));
        CHECK(cal.a == doctest::Approx(0.5));
        CHECK(cal.b == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(cal(0.8) == doctest::Approx(0.4));
    }
    SUBCASE("degenerate design throws") {
        CHECK_THROWS_AS(fit_linear(pairs_of({{0.5, 0.1}, {0.5, 0.9}})), std::invalid_argument);
    }
    SUBCASE("output is clamped to [0,1]") {
        LinearCalibrator cal;
        cal.a = 2.0;
        cal.b = -0.5;
        CHECK(cal(0.0) == 0.0);
        CHECK(cal(1.0) == 1.0);
    }
}

namespace {

json det(int image, int cls, std::initializer_list<double> xywh, double score) {
    return {{"image_id", image}, {"category_id", cls}, {"bbox", xywh}, {"score", score}};
}

json ann(int image, int cls, std::initializer_list<double> xywh, int id) {
    return {{"image_id", image}, {"category_id", cls}, {"bbox", xywh}, {"id", id},
            {"iscrowd", 0}};
}

}  // namespace

TEST_CASE("calibrator sets") {
    // Two classes, detections exactly on ground truths except for shifted
    // copies that produce intermediate targets.
    const auto dets = detections_from_json(
        json::array({det(1, 1, {0, 0, 10, 10}, 1.0), det(1, 1, {1, 0, 10, 10}, 0.6),
                     det(1, 2, {20, 20, 10, 10}, 0.9), det(1, 2, {22, 20, 10, 10}, 0.4)}),
        GeometryKind::axis_aligned);
    const auto gts = ground_truth_from_json(
        {{"annotations", json::array({ann(1, 1, {0, 0, 10, 10}, 0),
                                      ann(1, 2, {20, 20, 10, 10}, 1)})}},
        GeometryKind::axis_aligned);

    SUBCASE("class-agnostic mode holds one calibrator") {
        const CalibratorSet set = fit_calibrator_set(
            dets, gts, CalibratorMode::class_agnostic, CalibratorMethod::isotonic);
        CHECK(set.per_class.empty());
        CHECK(set.global.kind == Calibrator::Kind::isotonic);
    }
    SUBCASE("class-wise mode fits one per class, identity otherwise") {
        const CalibratorSet set = fit_calibrator_set(
            dets, gts, CalibratorMode::class_wise, CalibratorMethod::isotonic);
        CHECK(set.per_class.size() == 2);
        CHECK(set.for_class(99).kind == Calibrator::Kind::identity);
    }
    SUBCASE("perfectly calibrated input reproduces identity at knots") {
        // Scores equal to the psi targets.
        const auto pairs = match_psi(dets, gts);
        DetectionStore oracle = dets;
        for (size_t i = 0; i < oracle.dets.size(); ++i) {
            oracle.dets[i].score = pairs[i].target_iou;
        }
        oracle.finalize();
        const CalibratorSet set = fit_calibrator_set(
            oracle, gts, CalibratorMode::class_agnostic, CalibratorMethod::isotonic);
        for (size_t i = 0; i < set.global.ir.knot_x.size(); ++i) {
            CHECK(std::abs(set.global.ir.knot_y[i] - set.global.ir.knot_x[i]) <= 1e-9);
        }
    }
    SUBCASE("apply_calibrators substitutes scores and keeps boxes") {
        CalibratorSet set;
        LinearCalibrator lr;
        lr.a = 0.5;
        lr.b = 0.0;
        set.global = Calibrator::from_linear(lr);
        const DetectionStore out = apply_calibrators(dets, set);
        REQUIRE(out.size() == dets.size());
        double max_score = 0.0;
        for (const auto& d : out.dets) max_score = std::max(max_score, d.score);
        CHECK(max_score == doctest::Approx(0.5));
    }
    SUBCASE("identity set leaves the store unchanged") {
        const DetectionStore out = apply_calibrators(dets, CalibratorSet::identity());
        for (size_t i = 0; i < out.size(); ++i) CHECK(out.dets[i].score == dets.dets[i].score);
    }
    SUBCASE("negative LR slope produces a warning") {
        const auto bad = detections_from_json(
            json::array({det(1, 1, {0, 0, 10, 10}, 0.1), det(1, 1, {3, 0, 10, 10}, 0.9)}),
            GeometryKind::axis_aligned);
        const CalibratorSet set = fit_calibrator_set(
            bad, gts, CalibratorMode::class_agnostic, CalibratorMethod::linear);
        CHECK_FALSE(set.warnings.empty());
    }
}

TEST_CASE("calibrator persistence evaluates identically after reload") {
    std::mt19937_64 gen(29);
    auto uniform = [&] { return static_cast<double>(gen() >> 11) * 0x1.0p-53; };
    std::vector<TargetPair> pairs;
    for (int i = 0; i < 40; ++i) pairs.push_back({uniform(), uniform(), 1 + (i % 2), 0});

    CalibratorSet set;
    set.mode = CalibratorMode::class_wise;
    set.method = CalibratorMethod::isotonic;
    set.per_class[1] = Calibrator::from_isotonic(fit_isotonic(pairs));
    LinearCalibrator lr;
    lr.a = 0.7;
    lr.b = 0.1;
    set.per_class[2] = Calibrator::from_linear(lr);

    const auto path = std::filesystem::temp_directory_path() / "mocae_cal.json";
    save_calibrators(set, path.string());
    const CalibratorSet loaded = load_calibrators(path.string());
    for (int i = 0; i <= 10000; ++i) {
        const double x = static_cast<double>(i) / 10000.0;
        CHECK(set.for_class(1)(x) == loaded.for_class(1)(x));
        CHECK(set.for_class(2)(x) == loaded.for_class(2)(x));
        CHECK(set.for_class(3)(x) == loaded.for_class(3)(x));
    }
    std::filesystem::remove(path);
}

TEST_CASE("calibration monotonicity and range properties") {
    std::mt19937_64 gen(41);
    auto uniform = [&] { return static_cast<double>(gen() >> 11) * 0x1.0p-53; };
    for (int iter = 0; iter < 50; ++iter) {
        std::vector<TargetPair> pairs;
        const int n = 2 + static_cast<int>(uniform() * 30);
        for (int i = 0; i < n; ++i) pairs.push_back({uniform(), uniform(), 1, 0});
        const IsotonicCalibrator cal = fit_isotonic(pairs);
        double prev = -1.0;
        for (int i = 0; i <= 100; ++i) {
            const double v = cal(static_cast<double>(i) / 100.0);
            CHECK(v >= prev);
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            prev = v;
        }
    }
}
