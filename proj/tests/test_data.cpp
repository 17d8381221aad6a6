#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "cmscan/dataset.hpp"
#include "cmscan/metrics.hpp"

using namespace cmscan;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("cmscan_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("scene generation is deterministic") {
    const SceneSpec spec = default_scene_spec(32);
    Rng a(5), b(5);
    const SamplePair s1 = generate_scene(spec, a);
    const SamplePair s2 = generate_scene(spec, b);
    REQUIRE(s1.rgb.data == s2.rgb.data);
    REQUIRE(s1.thermal.data == s2.thermal.data);
    REQUIRE(s1.labels == s2.labels);
}

TEST_CASE("ambiguous classes share rgb appearance exactly") {
    const SceneSpec spec = default_scene_spec(32);
    for (const auto& pair : spec.ambiguous_pairs) {
        REQUIRE(spec.classes[pair[0]].rgb == spec.classes[pair[1]].rgb);
        REQUIRE(std::abs(spec.classes[pair[0]].thermal - spec.classes[pair[1]].thermal) >= 0.3);
    }

    SceneSpec bad = spec;
    bad.classes[2].rgb[0] += 1e-9;
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("an rgb-only nearest-color classifier stays near chance on ambiguous pixels") {
    const SceneSpec spec = default_scene_spec(64);
    Rng rng(11);
    std::size_t correct = 0, total = 0;
    for (int scene = 0; scene < 40 && total < 4000; ++scene) {
        Rng child = rng.split();
        const SamplePair s = generate_scene(spec, child);
        const std::size_t hw = s.labels.numel();
        for (std::size_t p = 0; p < hw; ++p) {
            const std::uint8_t g = s.labels.v[p];
            bool ambiguous = false;
            for (const auto& pair : spec.ambiguous_pairs)
                if (g == pair[0] || g == pair[1]) ambiguous = true;
            if (!ambiguous) continue;
            // nearest class color by rgb distance; ties resolved to the
            // lower id, which is what dooms the classifier here
            double best = 1e9;
            std::size_t best_c = 0;
            for (std::size_t c = 0; c < spec.num_classes; ++c) {
                double d = 0;
                for (std::size_t ch = 0; ch < 3; ++ch) {
                    const double diff = s.rgb.data[ch * hw + p] - spec.classes[c].rgb[ch];
                    d += diff * diff;
                }
                if (d < best - 1e-12) {
                    best = d;
                    best_c = c;
                }
            }
            if (best_c == g) ++correct;
            ++total;
        }
    }
    REQUIRE(total >= 1000);
    const double acc = double(correct) / double(total);
    INFO("rgb-only accuracy on ambiguous pixels: " << acc);
    REQUIRE(acc < 0.55);
}

TEST_CASE("zero shapes yields an all-background scene") {
    SceneSpec spec = default_scene_spec(32);
    spec.shapes_min = spec.shapes_max = 0;
    Rng rng(1);
    const SamplePair s = generate_scene(spec, rng);
    for (std::uint8_t v : s.labels.v) REQUIRE(v == 0);
}

TEST_CASE("dataset write/load round trip") {
    const fs::path root = fresh_dir("roundtrip");
    const SceneSpec spec = default_scene_spec(32);
    Rng rng(3);
    const SamplePair s = generate_scene(spec, rng);
    for (const char* sub : {"rgb", "thermal", "labels"}) fs::create_directories(root / "train" / sub);
    write_sample(root / "train", "00000", s);

    const DatasetIndex index = load_dataset(root, "train");
    REQUIRE(index.size() == 1);
    const SamplePair loaded = load_sample(index.entries[0]);
    REQUIRE(loaded.labels == s.labels);
    for (std::size_t i = 0; i < s.rgb.numel(); ++i)
        REQUIRE_THAT(loaded.rgb.data[i], Catch::Matchers::WithinAbs(s.rgb.data[i], 1.0 / 255.0));
    for (std::size_t i = 0; i < s.thermal.numel(); ++i)
        REQUIRE_THAT(loaded.thermal.data[i], Catch::Matchers::WithinAbs(s.thermal.data[i], 1.0 / 255.0));
}

TEST_CASE("dataset loader validation") {
    const fs::path root = fresh_dir("validation");
    for (const char* sub : {"rgb", "thermal", "labels"}) fs::create_directories(root / "train" / sub);

    // empty directory: a valid empty index
    REQUIRE(load_dataset(root, "train").empty());

    // missing counterpart named by stem
    const SceneSpec spec = default_scene_spec(32);
    Rng rng(4);
    const SamplePair s = generate_scene(spec, rng);
    write_sample(root / "train", "aaa", s);
    fs::remove(root / "train" / "thermal" / "aaa.png");
    try {
        load_dataset(root, "train");
        FAIL("expected IoError");
    } catch (const IoError& e) {
        REQUIRE(std::string(e.what()).find("aaa") != std::string::npos);
    }

    // size mismatch within a triple
    const fs::path root2 = fresh_dir("mismatch");
    for (const char* sub : {"rgb", "thermal", "labels"}) fs::create_directories(root2 / "train" / sub);
    write_sample(root2 / "train", "bbb", s);
    SceneSpec small = default_scene_spec(32);
    small.height = small.width = 64;
    Rng rng2(4);
    const SamplePair s64 = generate_scene(small, rng2);
    std::vector<std::uint8_t> lbl(64 * 64, 0);
    write_png((root2 / "train" / "labels" / "bbb.png").string(), 64, 64, 1, lbl.data());
    REQUIRE_THROWS_AS(load_dataset(root2, "train"), IoError);

    // missing directory
    REQUIRE_THROWS_AS(load_dataset(root2, "nope"), IoError);
}

TEST_CASE("augmentation identity, flip and determinism") {
    const SceneSpec spec = default_scene_spec(32);
    Rng rng(6);
    const SamplePair s = generate_scene(spec, rng);

    AugmentPolicy ident{0, 0, 0, 0, 0.0};
    Rng r1(1);
    const SamplePair same = augment(s, r1, ident);
    REQUIRE(same.rgb.data == s.rgb.data);
    REQUIRE(same.labels == s.labels);

    AugmentPolicy flip{0, 0, 0, 0, 1.0};
    Rng r2(1);
    const SamplePair flipped = augment(s, r2, flip);
    for (std::size_t y = 0; y < s.labels.h; ++y)
        for (std::size_t x = 0; x < s.labels.w; ++x)
            REQUIRE(flipped.labels.at(y, x) == s.labels.at(y, s.labels.w - 1 - x));

    AugmentPolicy crop{0, 0, 16, 16, 0.5};
    Rng r3(9), r4(9);
    const SamplePair c1 = augment(s, r3, crop);
    const SamplePair c2 = augment(s, r4, crop);
    REQUIRE(c1.rgb.data == c2.rgb.data);
    REQUIRE(c1.labels == c2.labels);

    AugmentPolicy too_big{0, 0, 64, 64, 0.0};
    Rng r5(1);
    REQUIRE_THROWS_AS(augment(s, r5, too_big), ConfigError);
}

TEST_CASE("augmentation keeps the pixel triple aligned") {
    // encode the label into the red channel; crop+flip must preserve the tie
    SceneSpec spec = default_scene_spec(32);
    spec.rgb_noise = 0.0;
    spec.thermal_noise = 0.0;
    Rng rng(8);
    SamplePair s = generate_scene(spec, rng);
    const std::size_t hw = s.labels.numel();
    for (std::size_t p = 0; p < hw; ++p) s.rgb.data[p] = s.labels.v[p] / 10.0f;

    AugmentPolicy policy{0, 0, 16, 16, 1.0};
    Rng r(3);
    const SamplePair out = augment(s, r, policy);
    for (std::size_t p = 0; p < out.labels.numel(); ++p)
        REQUIRE_THAT(out.rgb.data[p], Catch::Matchers::WithinAbs(out.labels.v[p] / 10.0f, 1e-7));
}

TEST_CASE("class weight formula") {
    Tensor<double> uniform = Tensor<double>::full({10}, 0.1);
    const auto w = class_weights(uniform);
    for (double v : w.data) REQUIRE_THAT(v, Catch::Matchers::WithinAbs(8.823891297168379, 1e-9));

    Tensor<double> zero({1}, {0.0});
    REQUIRE_THAT(class_weights(zero).data[0], Catch::Matchers::WithinAbs(50.4983497918439, 1e-9));

    Tensor<double> one({1}, {1.0});
    REQUIRE_THAT(class_weights(one).data[0], Catch::Matchers::WithinAbs(1.4222778260019158, 1e-9));
}

TEST_CASE("confusion matrix updates") {
    ConfusionMatrix cm(2);
    LabelMap gt(2, 2), pred(2, 2);
    gt.v = {0, 0, 1, 1};
    pred.v = {0, 1, 1, 1};
    cm_update(cm, pred, gt);
    REQUIRE(cm.at(0, 0) == 1);
    REQUIRE(cm.at(0, 1) == 1);
    REQUIRE(cm.at(1, 0) == 0);
    REQUIRE(cm.at(1, 1) == 2);
    REQUIRE(cm.total() == 4);  // conservation: every scored pixel counted once

    // pred == gt grows only the diagonal
    ConfusionMatrix diag(2);
    cm_update(diag, gt, gt);
    REQUIRE(diag.at(0, 1) == 0);
    REQUIRE(diag.at(1, 0) == 0);
    REQUIRE(diag.total() == 4);

    // fully ignored ground truth leaves the matrix unchanged
    ConfusionMatrix untouched(2);
    LabelMap ignored(2, 2, kIgnoreLabel);
    cm_update(untouched, pred, ignored);
    REQUIRE(untouched.total() == 0);

    LabelMap bad(2, 2, 7);
    REQUIRE_THROWS_AS(cm_update(cm, bad, gt), ConfigError);
    LabelMap bad255(2, 2, kIgnoreLabel);
    REQUIRE_THROWS_AS(cm_update(cm, bad255, gt), ConfigError);
}

TEST_CASE("iou from confusion matrix") {
    ConfusionMatrix ident(3);
    ident.at(0, 0) = 5;
    ident.at(1, 1) = 2;
    ident.at(2, 2) = 9;
    const auto perfect = iou_from_cm(ident);
    REQUIRE(perfect.miou == 1.0);
    for (double v : perfect.per_class) REQUIRE(v == 1.0);

    ConfusionMatrix cm(2);
    cm.at(0, 0) = 1;
    cm.at(0, 1) = 1;
    cm.at(1, 1) = 2;
    const auto r = iou_from_cm(cm);
    REQUIRE_THAT(r.per_class[0], Catch::Matchers::WithinAbs(0.5, 1e-12));
    REQUIRE_THAT(r.per_class[1], Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-12));
    REQUIRE_THAT(r.miou, Catch::Matchers::WithinAbs(0.5833, 1e-4));

    // class absent from both gt and prediction is excluded from the mean
    ConfusionMatrix sparse(3);
    sparse.at(0, 0) = 4;
    sparse.at(1, 1) = 4;
    const auto ex = iou_from_cm(sparse);
    REQUIRE_FALSE(ex.valid[2]);
    REQUIRE(ex.miou == 1.0);

    // constant-class predictor on balanced 2-class data
    ConfusionMatrix constant(2);
    constant.at(0, 0) = 50;
    constant.at(1, 0) = 50;
    const auto c = iou_from_cm(constant);
    REQUIRE_THAT(c.per_class[0], Catch::Matchers::WithinAbs(0.5, 1e-12));
    REQUIRE(c.per_class[1] == 0.0);
    REQUIRE_THAT(c.miou, Catch::Matchers::WithinAbs(0.25, 1e-12));

    ConfusionMatrix empty(2);
    REQUIRE_THROWS_AS(iou_from_cm(empty), NumericError);
}
