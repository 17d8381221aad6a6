#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cmscan/errors.hpp"
#include "cmscan/tensor.hpp"

namespace cmscan {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian; big-endian hosts unsupported");

// On-disk layout: "CMSS" | u32 version | u64 manifest length | manifest JSON
// | raw f32 payloads in manifest order.
struct Checkpoint {
    static constexpr char kMagic[4] = {'C', 'M', 'S', 'S'};
    static constexpr std::uint32_t kVersion = 1;

    std::uint64_t step = 0;
    std::uint64_t rng_seed = 0;
    std::uint64_t rng_counter = 0;
    std::uint64_t optimizer_t = 0;
    nlohmann::ordered_json config;  // resolved run config snapshot
    std::vector<std::pair<std::string, Tensor<float>>> tensors;

    const Tensor<float>* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    nlohmann::ordered_json manifest;
    manifest["format_version"] = Checkpoint::kVersion;
    manifest["step"] = ckpt.step;
    manifest["rng"] = {{"seed", ckpt.rng_seed}, {"counter", ckpt.rng_counter}};
    manifest["optimizer_t"] = ckpt.optimizer_t;
    manifest["config"] = ckpt.config;
    auto& tensors = manifest["tensors"] = nlohmann::ordered_json::array();
    for (const auto& [name, t] : ckpt.tensors) {
        nlohmann::ordered_json entry;
        entry["name"] = name;
        entry["shape"] = t.shape;
        entry["dtype"] = "f32";
        tensors.push_back(std::move(entry));
    }
    const std::string body = manifest.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out.write(Checkpoint::kMagic, 4);
    const std::uint32_t version = Checkpoint::kVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t len = body.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    for (const auto& [name, t] : ckpt.tensors)
        out.write(reinterpret_cast<const char*>(t.ptr()),
                  static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!out) throw IoError("failed writing checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, Checkpoint::kMagic, 4) != 0)
        throw IoError("not a checkpoint file (bad magic): " + path);
    std::uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (version != Checkpoint::kVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string body(len, '\0');
    in.read(body.data(), static_cast<std::streamsize>(len));
    if (!in) throw IoError("truncated checkpoint manifest: " + path);

    nlohmann::ordered_json manifest;
    try {
        manifest = nlohmann::ordered_json::parse(body);
    } catch (const std::exception& e) {
        throw IoError("invalid checkpoint manifest: " + std::string(e.what()));
    }

    Checkpoint ckpt;
    ckpt.step = manifest.at("step").get<std::uint64_t>();
    ckpt.rng_seed = manifest.at("rng").at("seed").get<std::uint64_t>();
    ckpt.rng_counter = manifest.at("rng").at("counter").get<std::uint64_t>();
    ckpt.optimizer_t = manifest.value("optimizer_t", std::uint64_t{0});
    ckpt.config = manifest.at("config");
    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        if (entry.at("dtype").get<std::string>() != "f32")
            throw IoError("checkpoint tensor '" + name + "' has unsupported dtype");
        std::vector<std::size_t> shape = entry.at("shape").get<std::vector<std::size_t>>();
        Tensor<float> t(shape);
        in.read(reinterpret_cast<char*>(t.ptr()),
                static_cast<std::streamsize>(t.numel() * sizeof(float)));
        if (!in) throw IoError("truncated checkpoint payload at tensor '" + name + "'");
        ckpt.tensors.emplace_back(name, std::move(t));
    }
    return ckpt;
}

}  // namespace cmscan
