#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "advnorm/errors.hpp"
#include "advnorm/volume.hpp"

namespace advnorm {

static_assert(std::endian::native == std::endian::little,
              "the .mvol container stores payloads little-endian and this code "
              "assumes a little-endian host");

using ordered_json = nlohmann::ordered_json;

namespace mvol {

inline constexpr const char* kMagic = "mvol";
inline constexpr int kVersion = 1;
// 8 fixed bytes between the header newline and the raw payload.
inline constexpr char kSentinel[8] = {'\0', 'M', 'V', 'O', 'L', 'B', 'I', 'N'};

/// Serialize header + payload. The header is a single JSON line with "magic"
/// first, so files are identifiable by prefix and diffable with text tools.
inline void write_container(const std::filesystem::path& path, const ordered_json& header,
                            const void* payload, std::size_t payload_bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot open '" + path.string() + "' for writing");
    std::string line = header.dump();
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
    out.put('\n');
    out.write(kSentinel, sizeof(kSentinel));
    if (payload_bytes > 0)
        out.write(static_cast<const char*>(payload), static_cast<std::streamsize>(payload_bytes));
    out.flush();
    if (!out) throw ValidationError("write failed for '" + path.string() + "'");
}

inline std::pair<ordered_json, std::vector<char>> read_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line)) throw FormatError("'" + path.string() + "': empty file");
    ordered_json header;
    try {
        header = ordered_json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + path.string() + "': header is not valid JSON: " + e.what());
    }
    if (!header.is_object() || header.value("magic", "") != kMagic)
        throw FormatError("'" + path.string() + "': missing container magic");
    if (header.value("version", 0) != kVersion)
        throw FormatError("'" + path.string() + "': unsupported container version");
    char sentinel[sizeof(kSentinel)];
    in.read(sentinel, sizeof(sentinel));
    if (in.gcount() != sizeof(sentinel) || std::memcmp(sentinel, kSentinel, sizeof(kSentinel)) != 0)
        throw FormatError("'" + path.string() + "': bad header sentinel");
    std::vector<char> payload(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>{});
    return {std::move(header), std::move(payload)};
}

inline ordered_json grid_header(const char* kind, const char* dtype, const Shape3& shape,
                                const Spacing3& spacing) {
    ordered_json h;
    h["magic"] = kMagic;
    h["version"] = kVersion;
    h["kind"] = kind;
    h["dtype"] = dtype;
    h["shape"] = {shape.nx, shape.ny, shape.nz};
    h["spacing"] = {spacing.sx, spacing.sy, spacing.sz};
    return h;
}

inline void parse_grid_header(const ordered_json& h, const std::string& where, Shape3& shape,
                              Spacing3& spacing) {
    try {
        const auto& s = h.at("shape");
        const auto& sp = h.at("spacing");
        if (s.size() != 3 || sp.size() != 3) throw FormatError(where + ": shape/spacing arity");
        shape = {s[0].get<int>(), s[1].get<int>(), s[2].get<int>()};
        spacing = {sp[0].get<double>(), sp[1].get<double>(), sp[2].get<double>()};
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(where + ": malformed grid header: " + e.what());
    }
}

} // namespace mvol

inline void save_volume(const Volume& volume, const std::filesystem::path& path) {
    volume.validate(); // never touch the filesystem with an invalid volume
    ordered_json h = mvol::grid_header("intensity", "float32", volume.shape, volume.spacing);
    mvol::write_container(path, h, volume.data.data(), volume.data.size() * sizeof(float));
}

inline void save_mask(const SegmentationMask& mask, const std::filesystem::path& path) {
    mask.validate();
    ordered_json h = mvol::grid_header("labels", "uint8", mask.shape, mask.spacing);
    h["classes"] = mask.num_classes;
    mvol::write_container(path, h, mask.labels.data(), mask.labels.size());
}

inline Volume load_volume(const std::filesystem::path& path) {
    auto [h, payload] = mvol::read_container(path);
    if (h.value("kind", "") != "intensity")
        throw FormatError("'" + path.string() + "': not an intensity volume");
    if (h.value("dtype", "") != "float32")
        throw FormatError("'" + path.string() + "': unsupported dtype");
    Volume v;
    mvol::parse_grid_header(h, path.string(), v.shape, v.spacing);
    if (v.shape.nx <= 0 || v.shape.ny <= 0 || v.shape.nz <= 0)
        throw FormatError("'" + path.string() + "': non-positive shape in header");
    if (payload.size() != v.shape.voxels() * sizeof(float))
        throw CorruptionError("'" + path.string() + "': payload holds " +
                              std::to_string(payload.size() / sizeof(float)) +
                              " values, header declares " + std::to_string(v.shape.voxels()));
    v.data.resize(v.shape.voxels());
    std::memcpy(v.data.data(), payload.data(), payload.size());
    v.validate();
    return v;
}

inline SegmentationMask load_mask(const std::filesystem::path& path) {
    auto [h, payload] = mvol::read_container(path);
    if (h.value("kind", "") != "labels")
        throw FormatError("'" + path.string() + "': not a label mask");
    SegmentationMask m;
    mvol::parse_grid_header(h, path.string(), m.shape, m.spacing);
    m.num_classes = h.value("classes", 0);
    if (payload.size() != m.shape.voxels())
        throw CorruptionError("'" + path.string() + "': payload holds " +
                              std::to_string(payload.size()) + " labels, header declares " +
                              std::to_string(m.shape.voxels()));
    m.labels.assign(payload.begin(), payload.end());
    m.validate();
    return m;
}

inline constexpr const char* kManifestName = "manifest.json";

inline void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    manifest.validate();
    ordered_json j;
    j["magic"] = "advnorm-manifest";
    j["version"] = 1;
    j["k_domains"] = manifest.k_domains;
    j["classes"] = manifest.num_classes;
    j["seed"] = manifest.seed;
    j["provenance"] = manifest.provenance;
    j["samples"] = ordered_json::array();
    for (const auto& s : manifest.samples) {
        ordered_json e;
        e["id"] = s.id;
        e["image"] = s.image_path;
        e["mask"] = s.mask_path;
        e["domain"] = s.domain;
        j["samples"].push_back(e);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot open '" + path.string() + "' for writing");
    out << j.dump(2) << "\n";
    if (!out) throw ValidationError("write failed for '" + path.string() + "'");
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open '" + path.string() + "'");
    ordered_json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + path.string() + "': " + e.what());
    }
    if (j.value("magic", "") != "advnorm-manifest")
        throw FormatError("'" + path.string() + "': not a dataset manifest");
    DatasetManifest m;
    m.k_domains = j.value("k_domains", 0);
    m.num_classes = j.value("classes", 0);
    m.seed = j.value("seed", std::uint64_t{0});
    m.provenance = j.value("provenance", "");
    for (const auto& e : j.at("samples")) {
        SampleRef s;
        s.id = e.value("id", "");
        s.image_path = e.value("image", "");
        s.mask_path = e.value("mask", "");
        s.domain = e.value("domain", 0);
        m.samples.push_back(std::move(s));
    }
    m.validate();
    return m;
}

/// Load one manifest entry; paths resolve relative to the manifest directory.
inline DomainSample load_sample(const std::filesystem::path& manifest_dir, const SampleRef& ref) {
    DomainSample s;
    s.image = load_volume(manifest_dir / ref.image_path);
    s.mask = load_mask(manifest_dir / ref.mask_path);
    s.domain = ref.domain;
    s.id = ref.id;
    return s;
}

} // namespace advnorm
