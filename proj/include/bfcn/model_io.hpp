#pragma once

#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "bfcn/bitpack.hpp"
#include "bfcn/graph.hpp"

// Model file layout (all integers little-endian):
//   "BFCN" u8 version u16 num_classes
//   u16 layer count, per layer:
//     u8 kind, u16 x6 geom (in, out, kh, kw, stride, pad), u8 k_w, u8 k_a,
//     name (u16 length + bytes), u8 first-layer flag,
//     u8 input count, input names
//   u8 scale count, per scale: u8 stride, node name
//   u16 parameter count, per tensor: name, BTSR float32 block (k = 255)
//   u16 buffer count, per tensor: name, BTSR float32 block
namespace bfcn {

inline constexpr std::uint8_t model_version = 1;

namespace detail {

inline void write_tensor_map(std::ostream& os, const ParamMap& m) {
    io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(m.size()));
    for (const auto& [name, t] : m) {
        io::write_string(os, name);
        write_btsr_float(os, t);
    }
}

inline ParamMap read_tensor_map(std::istream& is) {
    ParamMap m;
    const auto n = io::read_le<std::uint16_t>(is);
    for (std::uint16_t i = 0; i < n; ++i) {
        std::string name = io::read_string(is);
        m[name] = read_btsr_float(is);
    }
    return m;
}

} // namespace detail

inline void write_model(std::ostream& os, const SegNet& net) {
    io::write_magic(os, "BFCN");
    io::write_le<std::uint8_t>(os, model_version);
    io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(net.num_classes));
    io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(net.layers.size()));
    for (const auto& l : net.layers) {
        io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(l.kind));
        for (std::size_t v : {l.geom.in_ch, l.geom.out_ch, l.geom.kh, l.geom.kw, l.geom.stride, l.geom.pad})
            io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(v));
        io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(l.quant.k_w));
        io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(l.quant.k_a));
        io::write_string(os, l.name);
        io::write_le<std::uint8_t>(os, l.first_layer ? 1 : 0);
        io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(l.inputs.size()));
        for (const auto& in : l.inputs) io::write_string(os, in);
    }
    io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(net.scales.size()));
    for (const auto& s : net.scales) {
        io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(s.stride));
        io::write_string(os, s.node);
    }
    detail::write_tensor_map(os, net.params);
    detail::write_tensor_map(os, net.buffers);
}

inline SegNet read_model(std::istream& is) {
    io::expect_magic(is, "BFCN");
    const auto version = io::read_le<std::uint8_t>(is);
    require(version == model_version, ErrorKind::format_error, "unsupported model version " + std::to_string(version));
    SegNet net;
    net.num_classes = io::read_le<std::uint16_t>(is);
    const auto n_layers = io::read_le<std::uint16_t>(is);
    for (std::uint16_t i = 0; i < n_layers; ++i) {
        LayerSpec l;
        const auto kind = io::read_le<std::uint8_t>(is);
        require(kind <= static_cast<std::uint8_t>(LayerKind::add), ErrorKind::format_error, "unknown layer kind");
        l.kind = static_cast<LayerKind>(kind);
        std::size_t* fields[] = {&l.geom.in_ch, &l.geom.out_ch, &l.geom.kh, &l.geom.kw, &l.geom.stride, &l.geom.pad};
        for (auto* f : fields) *f = io::read_le<std::uint16_t>(is);
        const int k_w = io::read_le<std::uint8_t>(is);
        const int k_a = io::read_le<std::uint8_t>(is);
        try {
            l.quant = QuantSpec::make(k_w, k_a);
        } catch (const Error& e) {
            fail(ErrorKind::format_error, e.what());
        }
        l.name = io::read_string(is);
        l.first_layer = io::read_le<std::uint8_t>(is) != 0;
        const auto n_in = io::read_le<std::uint8_t>(is);
        for (std::uint8_t j = 0; j < n_in; ++j) l.inputs.push_back(io::read_string(is));
        net.layers.push_back(std::move(l));
    }
    const auto n_scales = io::read_le<std::uint8_t>(is);
    for (std::uint8_t i = 0; i < n_scales; ++i) {
        ScaleOutput s;
        s.stride = io::read_le<std::uint8_t>(is);
        s.node = io::read_string(is);
        net.scales.push_back(std::move(s));
    }
    net.params = detail::read_tensor_map(is);
    net.buffers = detail::read_tensor_map(is);
    try {
        net.validate();
    } catch (const Error& e) {
        fail(ErrorKind::format_error, e.what());
    }
    for (const auto& l : net.layers)
        for (const auto& u : conv_units(l))
            require(net.params.contains(u.prefix + ".w") && net.params.at(u.prefix + ".w").shape() == u.geom.weight_shape(),
                    ErrorKind::format_error, "missing or misshapen weights for " + u.prefix);
    return net;
}

inline void save_model(const std::string& path, const SegNet& net) {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), ErrorKind::io_error, "cannot open " + path + " for writing");
    write_model(os, net);
    require(static_cast<bool>(os), ErrorKind::io_error, "write failed for " + path);
}

inline SegNet load_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), ErrorKind::io_error, "cannot open " + path);
    return read_model(is);
}

} // namespace bfcn
