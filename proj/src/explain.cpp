#include "hcct/explain.hpp"

#include <cmath>
#include <fstream>

#include "hcct/pgm.hpp"

namespace hcct {

void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               const std::vector<float>& values) {
    if (values.size() != width * height) {
        throw ContractError("write_pgm: expected " + std::to_string(width * height) +
                            " values, got " + std::to_string(values.size()));
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("write_pgm: cannot open " + path.string() + " for writing");
    os << "P5\n" << width << ' ' << height << "\n255\n";
    std::vector<unsigned char> bytes(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        float v = values[i];
        if (v < 0.0f) v = 0.0f;
        if (v > 1.0f) v = 1.0f;
        unsigned gray = static_cast<unsigned>(std::floor(v * 255.0f + 0.5f));
        bytes[i] = static_cast<unsigned char>(gray > 255 ? 255 : gray);
    }
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("write_pgm: write failed for " + path.string());
}

namespace {

// Center slices; voxels are indexed (z, y, x).
std::vector<float> extract_slice(const std::vector<float>& voxels, std::size_t e,
                                 const std::string& axis) {
    std::size_t mid = e / 2;
    std::vector<float> img(e * e);
    for (std::size_t a = 0; a < e; ++a) {
        for (std::size_t b = 0; b < e; ++b) {
            float v;
            if (axis == "axial") { // fixed z: rows y, cols x
                v = voxels[(mid * e + a) * e + b];
            } else if (axis == "coronal") { // fixed y: rows z, cols x
                v = voxels[(a * e + mid) * e + b];
            } else { // sagittal, fixed x: rows z, cols y
                v = voxels[(a * e + b) * e + mid];
            }
            img[a * e + b] = v;
        }
    }
    return img;
}

} // namespace

void export_slices(const Heatmap& heat, const Volume& volume, const std::filesystem::path& out_dir) {
    if (heat.extent != volume.extent || heat.values.size() != volume.voxels.size()) {
        throw ShapeError("export_slices: heatmap extent " + std::to_string(heat.extent) +
                         " does not match volume extent " + std::to_string(volume.extent));
    }
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (!std::filesystem::is_directory(out_dir)) {
        throw IoError("export_slices: cannot create output directory " + out_dir.string());
    }
    std::size_t e = volume.extent;
    for (const char* axis : {"sagittal", "coronal", "axial"}) {
        write_pgm(out_dir / (heat.source_id + "_" + axis + "_scan.pgm"), e, e,
                  extract_slice(volume.voxels, e, axis));
        write_pgm(out_dir / (heat.source_id + "_" + axis + "_heat.pgm"), e, e,
                  extract_slice(heat.values, e, axis));
    }
    Volume heat_volume;
    heat_volume.extent = heat.extent;
    heat_volume.voxels = heat.values;
    heat_volume.source_id = heat.source_id;
    save_volume(heat_volume, out_dir / (heat.source_id + "_heatmap.hvol"));
}

} // namespace hcct
