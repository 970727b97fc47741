#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include "hcct/io_util.hpp"
#include "hcct/model.hpp"

// Checkpoint container, all integers and floats little-endian:
//   "HCCT" magic, u32 format version,
//   ModelConfig: u32 input_extent, u32 block count, u32 per-block channels,
//     u32 conv_kernel, u32 pool_window, u32 embed_dim, u32 num_layers,
//     u32 num_heads, u32 ffn_ratio, f64 dropout_p, u32 num_classes,
//     u8 positional_embedding,
//   u32 tensor count, then per tensor:
//     u32 name length + name bytes, u32 rank, u32 extents, f32 values.
// Tensors cover every learnable parameter plus the batchnorm running
// statistics, in the model's canonical order.

namespace hcct {

namespace detail {

inline constexpr char kCheckpointMagic[4] = {'H', 'C', 'C', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_model_config(std::ostream& os, const ModelConfig& cfg) {
    io::write_u32(os, static_cast<std::uint32_t>(cfg.input_extent));
    io::write_u32(os, static_cast<std::uint32_t>(cfg.conv_channels.size()));
    for (std::size_t c : cfg.conv_channels) io::write_u32(os, static_cast<std::uint32_t>(c));
    io::write_u32(os, static_cast<std::uint32_t>(cfg.conv_kernel));
    io::write_u32(os, static_cast<std::uint32_t>(cfg.pool_window));
    io::write_u32(os, static_cast<std::uint32_t>(cfg.embed_dim));
    io::write_u32(os, static_cast<std::uint32_t>(cfg.num_layers));
    io::write_u32(os, static_cast<std::uint32_t>(cfg.num_heads));
    io::write_u32(os, static_cast<std::uint32_t>(cfg.ffn_ratio));
    io::write_f64(os, cfg.dropout_p);
    io::write_u32(os, static_cast<std::uint32_t>(cfg.num_classes));
    os.put(cfg.positional_embedding ? 1 : 0);
}

inline ModelConfig read_model_config(std::istream& is) {
    ModelConfig cfg;
    cfg.input_extent = io::read_u32(is, "checkpoint config");
    std::uint32_t blocks = io::read_u32(is, "checkpoint config");
    cfg.conv_channels.clear();
    for (std::uint32_t i = 0; i < blocks; ++i) {
        cfg.conv_channels.push_back(io::read_u32(is, "checkpoint config"));
    }
    cfg.conv_kernel = io::read_u32(is, "checkpoint config");
    cfg.pool_window = io::read_u32(is, "checkpoint config");
    cfg.embed_dim = io::read_u32(is, "checkpoint config");
    cfg.num_layers = io::read_u32(is, "checkpoint config");
    cfg.num_heads = io::read_u32(is, "checkpoint config");
    cfg.ffn_ratio = io::read_u32(is, "checkpoint config");
    cfg.dropout_p = io::read_f64(is, "checkpoint config");
    cfg.num_classes = io::read_u32(is, "checkpoint config");
    int flag = is.get();
    if (flag == std::istream::traits_type::eof()) {
        throw ParseError("checkpoint config: truncated");
    }
    cfg.positional_embedding = flag != 0;
    return cfg;
}

template <typename T>
void write_tensor_entry(std::ostream& os, const std::string& name, const Shape& shape,
                        const std::vector<T>& values) {
    io::write_string(os, name);
    io::write_u32(os, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t e : shape) io::write_u32(os, static_cast<std::uint32_t>(e));
    for (const T& v : values) io::write_f32(os, static_cast<float>(v));
}

template <typename T>
struct TensorEntry {
    std::string name;
    Shape shape;
    std::vector<T> values;
};

template <typename T>
TensorEntry<T> read_tensor_entry(std::istream& is) {
    TensorEntry<T> entry;
    entry.name = io::read_string(is, "checkpoint tensor");
    std::uint32_t rank = io::read_u32(is, "checkpoint tensor " + entry.name);
    for (std::uint32_t i = 0; i < rank; ++i) {
        entry.shape.push_back(io::read_u32(is, "checkpoint tensor " + entry.name));
    }
    entry.values.resize(numel(entry.shape));
    for (T& v : entry.values) {
        v = static_cast<T>(io::read_f32(is, "checkpoint tensor " + entry.name));
    }
    return entry;
}

// All serializable state in canonical order: parameters then buffers.
template <typename T>
std::vector<std::pair<std::string, std::pair<Shape, std::vector<T>*>>> state_entries(
    HcctModel<T>& model) {
    std::vector<std::pair<std::string, std::pair<Shape, std::vector<T>*>>> out;
    for (auto& [name, tensor] : model.named_parameters()) {
        out.emplace_back(name, std::make_pair(tensor.shape(), &tensor.raw_data()));
    }
    for (auto& [name, buffer] : model.named_buffers()) {
        out.emplace_back(name, std::make_pair(Shape{buffer->size()}, buffer));
    }
    return out;
}

} // namespace detail

template <typename T>
void save_checkpoint(HcctModel<T>& model, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("save_checkpoint: cannot open " + path.string() + " for writing");
    os.write(detail::kCheckpointMagic, 4);
    io::write_u32(os, detail::kCheckpointVersion);
    detail::write_model_config(os, model.config);
    auto entries = detail::state_entries(model);
    io::write_u32(os, static_cast<std::uint32_t>(entries.size()));
    for (auto& [name, entry] : entries) {
        detail::write_tensor_entry(os, name, entry.first, *entry.second);
    }
    if (!os) throw IoError("save_checkpoint: write failed for " + path.string());
}

template <typename T>
HcctModel<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_checkpoint: cannot open " + path.string());
    char magic[4] = {};
    if (!is.read(magic, 4) || std::memcmp(magic, detail::kCheckpointMagic, 4) != 0) {
        throw ParseError("load_checkpoint: bad magic in " + path.string() + " (expected HCCT)");
    }
    std::uint32_t version = io::read_u32(is, "checkpoint header");
    if (version != detail::kCheckpointVersion) {
        throw ParseError("load_checkpoint: unsupported version " + std::to_string(version));
    }
    ModelConfig cfg = detail::read_model_config(is);
    cfg.validate();
    HcctModel<T> model = HcctModel<T>::init(cfg, 0);

    std::map<std::string, std::pair<Shape, std::vector<T>*>> slots;
    for (auto& [name, entry] : detail::state_entries(model)) slots[name] = entry;

    std::uint32_t count = io::read_u32(is, "checkpoint header");
    std::size_t filled = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        auto entry = detail::read_tensor_entry<T>(is);
        auto it = slots.find(entry.name);
        if (it == slots.end()) {
            throw ParseError("load_checkpoint: unknown tensor '" + entry.name + "'");
        }
        if (it->second.first != entry.shape) {
            throw ParseError("load_checkpoint: tensor '" + entry.name + "' has shape " +
                             shape_str(entry.shape) + ", expected " + shape_str(it->second.first));
        }
        *it->second.second = std::move(entry.values);
        ++filled;
    }
    if (filled != slots.size()) {
        throw ParseError("load_checkpoint: file holds " + std::to_string(filled) +
                         " tensors, model needs " + std::to_string(slots.size()));
    }
    return model;
}

} // namespace hcct
