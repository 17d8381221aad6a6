#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cmscan/data.hpp"
#include "cmscan/png_io.hpp"

namespace cmscan {

namespace fs = std::filesystem;

// Directory layout: root/{split}/{rgb,thermal,labels}/STEM.png with matching
// stems across the three subdirectories.
struct DatasetEntry {
    std::string stem;
    fs::path rgb, thermal, labels;
};

struct DatasetIndex {
    std::vector<DatasetEntry> entries;
    std::size_t size() const { return entries.size(); }
    bool empty() const { return entries.empty(); }
};

inline DatasetIndex load_dataset(const fs::path& root, const std::string& split) {
    const fs::path base = root / split;
    const fs::path rgb_dir = base / "rgb", th_dir = base / "thermal", lb_dir = base / "labels";
    for (const auto& d : {rgb_dir, th_dir, lb_dir})
        if (!fs::is_directory(d)) throw IoError("dataset directory missing: " + d.string());

    std::map<std::string, DatasetEntry> stems;
    for (const auto& e : fs::directory_iterator(rgb_dir)) {
        if (e.path().extension() != ".png") continue;
        const std::string stem = e.path().stem().string();
        stems[stem].stem = stem;
        stems[stem].rgb = e.path();
    }
    DatasetIndex index;
    for (auto& [stem, entry] : stems) {
        entry.thermal = th_dir / (stem + ".png");
        entry.labels = lb_dir / (stem + ".png");
        if (!fs::exists(entry.thermal))
            throw IoError("dataset: missing thermal counterpart for stem '" + stem + "'");
        if (!fs::exists(entry.labels))
            throw IoError("dataset: missing labels counterpart for stem '" + stem + "'");
        const auto [rw, rh] = read_png_size(entry.rgb.string());
        const auto [tw, th] = read_png_size(entry.thermal.string());
        const auto [lw, lh] = read_png_size(entry.labels.string());
        if (rw != tw || rh != th || rw != lw || rh != lh)
            throw IoError("dataset: size mismatch within triple '" + stem + "'");
        index.entries.push_back(std::move(entry));
    }
    return index;
}

// Decode one triple into model form: both images scaled to [0,1], labels as
// raw class ids, single-channel sources replicated to 3 channels.
inline SamplePair load_sample(const DatasetEntry& entry) {
    auto to_tensor = [](const PngImage& img) {
        Tensor<float> t({3, img.height, img.width});
        const std::size_t hw = img.height * img.width;
        for (std::size_t p = 0; p < hw; ++p)
            for (std::size_t c = 0; c < 3; ++c)
                t.data[c * hw + p] =
                    img.pixels[p * img.channels + (img.channels == 3 ? c : 0)] / 255.0f;
        return t;
    };
    SamplePair s;
    s.rgb = to_tensor(read_png(entry.rgb.string()));
    s.thermal = to_tensor(read_png(entry.thermal.string()));
    PngImage lbl = read_png(entry.labels.string());
    if (lbl.channels != 1) throw IoError("dataset: label map must be grayscale: " + entry.labels.string());
    s.labels = LabelMap(lbl.height, lbl.width);
    s.labels.v = lbl.pixels;
    return s;
}

inline void write_sample(const fs::path& base, const std::string& stem, const SamplePair& s) {
    const std::size_t h = s.labels.h, w = s.labels.w, hw = h * w;
    std::vector<std::uint8_t> rgb(hw * 3), th(hw), lb(hw);
    for (std::size_t p = 0; p < hw; ++p) {
        for (std::size_t c = 0; c < 3; ++c)
            rgb[p * 3 + c] = static_cast<std::uint8_t>(
                std::clamp(s.rgb.data[c * hw + p], 0.0f, 1.0f) * 255.0f + 0.5f);
        th[p] = static_cast<std::uint8_t>(std::clamp(s.thermal.data[p], 0.0f, 1.0f) * 255.0f + 0.5f);
        lb[p] = s.labels.v[p];
    }
    write_png((base / "rgb" / (stem + ".png")).string(), w, h, 3, rgb.data());
    write_png((base / "thermal" / (stem + ".png")).string(), w, h, 1, th.data());
    write_png((base / "labels" / (stem + ".png")).string(), w, h, 1, lb.data());
}

// In-memory dataset used by training/eval; either materialized from disk or
// generated synthetically from a master seed.
struct SampleSet {
    std::vector<SamplePair> samples;
    std::size_t size() const { return samples.size(); }
};

inline SampleSet generate_samples(const SceneSpec& spec, std::size_t count, Rng& rng) {
    SampleSet set;
    set.samples.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Rng child = rng.split();
        set.samples.push_back(generate_scene(spec, child));
    }
    return set;
}

inline SampleSet load_samples(const fs::path& root, const std::string& split) {
    SampleSet set;
    for (const auto& e : load_dataset(root, split).entries) set.samples.push_back(load_sample(e));
    return set;
}

// Pixel frequencies over a sample set (ignored pixels excluded).
inline Tensor<float> label_frequencies(const SampleSet& set, std::size_t num_classes) {
    std::vector<double> counts(num_classes, 0.0);
    double total = 0;
    for (const auto& s : set.samples)
        for (std::uint8_t v : s.labels.v) {
            if (v == kIgnoreLabel) continue;
            if (v >= num_classes) throw ConfigError("dataset: label id exceeds num_classes");
            counts[v] += 1;
            total += 1;
        }
    Tensor<float> f({num_classes});
    for (std::size_t c = 0; c < num_classes; ++c)
        f.data[c] = total > 0 ? static_cast<float>(counts[c] / total) : 0.0f;
    return f;
}

}  // namespace cmscan
