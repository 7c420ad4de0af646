#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "bfcn/bitconv.hpp"
#include "bfcn/error.hpp"
#include "bfcn/ops.hpp"
#include "bfcn/quantize.hpp"
#include "bfcn/random.hpp"
#include "bfcn/tensor.hpp"

namespace bfcn {

enum class LayerKind : std::uint8_t {
    input = 0,
    conv_bn_act = 1,
    residual_block = 2,
    upsample2x = 3,
    predict_head = 4,
    add = 5,
};

enum class ReconVariant : std::uint8_t { single_conv = 0, wide_conv = 1, residual_block = 2 };

inline std::string to_string(ReconVariant v) {
    switch (v) {
    case ReconVariant::single_conv: return "single";
    case ReconVariant::wide_conv: return "wide";
    case ReconVariant::residual_block: return "residual";
    }
    return "?";
}

inline ReconVariant parse_variant(const std::string& s) {
    if (s == "single") return ReconVariant::single_conv;
    if (s == "wide") return ReconVariant::wide_conv;
    if (s == "residual") return ReconVariant::residual_block;
    fail(ErrorKind::bad_config, "unknown reconstruction variant '" + s + "'");
}

/// One node of the network DAG.
///
/// conv_bn_act: clamp01(bn(conv(x))).
/// residual_block: clamp01(bn2(conv2(clamp01(bn1(conv1(x))))) + shortcut(x)),
///   conv1 uses `geom`, conv2 is 3x3/stride 1 on out_ch, and the shortcut is a
///   1x1 projection + bn whenever stride != 1 or in_ch != out_ch.
/// predict_head: conv(x) + bias, no normalization or clamp (logits).
///
/// Every convolution consumes activations quantized to quant.k_a bits and
/// weights quantized to quant.k_w bits (32 = full precision).
struct LayerSpec {
    LayerKind kind = LayerKind::input;
    std::string name;
    ConvGeom geom{};
    QuantSpec quant{};
    std::vector<std::string> inputs;
    bool first_layer = false;

    bool has_projection() const noexcept {
        return kind == LayerKind::residual_block && (geom.stride != 1 || geom.in_ch != geom.out_ch);
    }
    std::size_t out_channels() const noexcept { return geom.out_ch; }
};

struct ScaleOutput {
    std::size_t stride = 1;
    std::string node;
    friend bool operator==(const ScaleOutput&, const ScaleOutput&) = default;
};

using ParamMap = std::map<std::string, RealTensor>;

struct SegNet {
    std::vector<LayerSpec> layers; // topological order
    std::size_t num_classes = 2;
    std::vector<ScaleOutput> scales; // coarse to fine
    ParamMap params;                 // full-precision master copies
    ParamMap buffers;                // batch-norm running statistics

    const LayerSpec& layer(const std::string& name) const {
        for (const auto& l : layers)
            if (l.name == name) return l;
        fail(ErrorKind::bad_config, "no layer named '" + name + "'");
    }
    LayerSpec& layer(const std::string& name) {
        return const_cast<LayerSpec&>(static_cast<const SegNet&>(*this).layer(name));
    }

    std::size_t in_channels() const { return layers.front().geom.out_ch; }
    std::size_t max_stride() const {
        std::size_t s = 1;
        for (const auto& sc : scales) s = std::max(s, sc.stride);
        return s;
    }

    void validate() const {
        std::set<std::string> seen;
        std::size_t inputs = 0;
        for (const auto& l : layers) {
            require(!seen.contains(l.name), ErrorKind::bad_config, "duplicate layer name '" + l.name + "'");
            if (l.kind == LayerKind::input) ++inputs;
            for (const auto& in : l.inputs)
                require(seen.contains(in), ErrorKind::bad_config,
                        "layer '" + l.name + "' input '" + in + "' does not resolve to an earlier layer");
            seen.insert(l.name);
        }
        require(inputs == 1 && layers.front().kind == LayerKind::input, ErrorKind::bad_config,
                "network needs exactly one input node, first");
        require(!scales.empty(), ErrorKind::bad_config, "network has no prediction scales");
        for (const auto& sc : scales) require(seen.contains(sc.node), ErrorKind::bad_config, "unknown scale output");
    }
};

/// Names of the convolutions a layer owns, with their geometries.
struct ConvUnitDesc {
    std::string prefix; // parameter prefix, "<layer>.conv1" etc.
    ConvGeom geom;
    std::string bn;     // batch-norm prefix, empty for heads
};

inline std::vector<ConvUnitDesc> conv_units(const LayerSpec& l) {
    const ConvGeom& g = l.geom;
    switch (l.kind) {
    case LayerKind::conv_bn_act: return {{l.name, g, l.name + ".bn"}};
    case LayerKind::predict_head: return {{l.name, g, ""}};
    case LayerKind::residual_block: {
        std::vector<ConvUnitDesc> u{{l.name + ".conv1", g, l.name + ".bn1"},
                                    {l.name + ".conv2", ConvGeom{g.out_ch, g.out_ch, 3, 3, 1, 1}, l.name + ".bn2"}};
        if (l.has_projection())
            u.push_back({l.name + ".proj", ConvGeom{g.in_ch, g.out_ch, 1, 1, g.stride, 0}, l.name + ".projbn"});
        return u;
    }
    default: return {};
    }
}

inline std::size_t conv_count(const SegNet& net) {
    std::size_t n = 0;
    for (const auto& l : net.layers) n += conv_units(l).size();
    return n;
}

/// Multiply-accumulates of every convolution in one forward pass at the
/// given input size.
inline std::uint64_t forward_conv_macs(const SegNet& net, std::size_t h, std::size_t w) {
    std::map<std::string, std::pair<std::size_t, std::size_t>> hw;
    std::uint64_t macs = 0;
    for (const auto& l : net.layers) {
        if (l.kind == LayerKind::input) {
            hw[l.name] = {h, w};
            continue;
        }
        const auto [ih, iw] = hw.at(l.inputs.front());
        if (l.kind == LayerKind::upsample2x) {
            hw[l.name] = {ih * 2, iw * 2};
            continue;
        }
        if (l.kind == LayerKind::add) {
            hw[l.name] = {ih, iw};
            continue;
        }
        const std::size_t oh = l.geom.out_h(ih), ow = l.geom.out_w(iw);
        for (const auto& u : conv_units(l)) {
            const std::size_t uh = u.prefix.ends_with(".conv2") ? oh : u.geom.out_h(ih);
            const std::size_t uw = u.prefix.ends_with(".conv2") ? ow : u.geom.out_w(iw);
            macs += static_cast<std::uint64_t>(uh * uw) * u.geom.out_ch * u.geom.taps();
        }
        hw[l.name] = {oh, ow};
    }
    return macs;
}

/// Apply bit-widths to every convolutional layer. The first layer keeps
/// 8-bit weights (and reads the 8-bit image) whenever anything is quantized.
inline void set_bit_widths(SegNet& net, int k_w, int k_a) {
    require_layer_bit_width(k_w);
    require_layer_bit_width(k_a);
    const bool any_quant = !is_full_precision(k_w) || !is_full_precision(k_a);
    for (auto& l : net.layers) {
        if (conv_units(l).empty()) continue;
        if (l.first_layer)
            l.quant = any_quant ? QuantSpec::make(8, 8) : QuantSpec::make(full_precision, full_precision);
        else
            l.quant = QuantSpec::make(k_w, k_a);
    }
}

// --- construction ------------------------------------------------------------

namespace detail {

inline void init_conv(ParamMap& params, const std::string& name, const ConvGeom& g, Rng& rng, double gain) {
    RealTensor w(g.weight_shape());
    const double std = std::sqrt(gain / static_cast<double>(g.taps()));
    for (auto& v : w) v = std * rng.normal();
    params[name + ".w"] = std::move(w);
}

inline void init_bn(ParamMap& params, ParamMap& buffers, const std::string& bn, std::size_t ch) {
    params[bn + ".gamma"] = RealTensor({ch, 1, 1, 1}, 1.0);
    params[bn + ".beta"] = RealTensor({ch, 1, 1, 1}, 0.0);
    buffers[bn + ".mean"] = RealTensor({ch, 1, 1, 1}, 0.0);
    buffers[bn + ".var"] = RealTensor({ch, 1, 1, 1}, 1.0);
}

} // namespace detail

/// Fresh parameters for every layer of `net` (He-normal convolutions, unit
/// batch norm, zero head bias).
inline void init_params(SegNet& net, std::uint64_t seed) {
    Rng rng(seed);
    net.params.clear();
    net.buffers.clear();
    for (const auto& l : net.layers)
        for (const auto& u : conv_units(l)) {
            const bool head = l.kind == LayerKind::predict_head;
            detail::init_conv(net.params, u.prefix, u.geom, rng, head ? 1.0 : 2.0);
            if (head)
                net.params[u.prefix + ".b"] = RealTensor({u.geom.out_ch, 1, 1, 1}, 0.0);
            else
                detail::init_bn(net.params, net.buffers, u.bn, u.geom.out_ch);
        }
}

/// Names of the layers that make up the feature extractor (stem + stages).
inline std::vector<std::string> extractor_layers() { return {"stem", "stage1", "stage2", "stage3"}; }
inline const char* extractor_output() { return "stage3"; }

/// Miniature BFCN: stem conv at full resolution, three stride-2 residual
/// stages (strides 2, 4, 8; widths w, 2w, 4w), and reconstruction branches at
/// strides 8 and 4. The stride-4 logits are head4(recon4(stage2)) plus the
/// 2x-upsampled stride-8 logits.
inline SegNet build_toy_bfcn(std::size_t in_ch, std::size_t num_classes, std::size_t base_width,
                             ReconVariant variant, int k_w, int k_a, std::uint64_t seed = 0) {
    require(base_width >= 4, ErrorKind::bad_config, "base_width must be >= 4");
    require(num_classes >= 2 && num_classes < 255, ErrorKind::bad_config, "num_classes must be in [2,254]");
    require(in_ch >= 1, ErrorKind::bad_config, "in_ch must be >= 1");
    const std::size_t w = base_width;
    SegNet net;
    net.num_classes = num_classes;
    auto conv3 = [](std::size_t ci, std::size_t co, std::size_t stride) { return ConvGeom{ci, co, 3, 3, stride, 1}; };

    net.layers.push_back({LayerKind::input, "image", ConvGeom{in_ch, in_ch, 1, 1, 1, 0}, {}, {}, false});
    net.layers.push_back({LayerKind::conv_bn_act, "stem", conv3(in_ch, w, 1), {}, {"image"}, true});
    net.layers.push_back({LayerKind::residual_block, "stage1", conv3(w, w, 2), {}, {"stem"}, false});
    net.layers.push_back({LayerKind::residual_block, "stage2", conv3(w, 2 * w, 2), {}, {"stage1"}, false});
    net.layers.push_back({LayerKind::residual_block, "stage3", conv3(2 * w, 4 * w, 2), {}, {"stage2"}, false});

    auto branch = [&](const std::string& tag, const std::string& feat, std::size_t ch) {
        const std::string recon = "recon" + tag;
        std::size_t head_in = ch;
        switch (variant) {
        case ReconVariant::single_conv:
            net.layers.push_back({LayerKind::conv_bn_act, recon, conv3(ch, ch, 1), {}, {feat}, false});
            break;
        case ReconVariant::wide_conv:
            net.layers.push_back({LayerKind::conv_bn_act, recon, conv3(ch, 2 * ch, 1), {}, {feat}, false});
            head_in = 2 * ch;
            break;
        case ReconVariant::residual_block:
            net.layers.push_back({LayerKind::residual_block, recon, conv3(ch, ch, 1), {}, {feat}, false});
            break;
        }
        net.layers.push_back(
            {LayerKind::predict_head, "head" + tag, ConvGeom{head_in, num_classes, 1, 1, 1, 0}, {}, {recon}, false});
    };
    branch("8", "stage3", 4 * w);
    branch("4", "stage2", 2 * w);
    const ConvGeom none{num_classes, num_classes, 1, 1, 1, 0};
    net.layers.push_back({LayerKind::upsample2x, "up8", none, {}, {"head8"}, false});
    net.layers.push_back({LayerKind::add, "logits4", none, {}, {"head4", "up8"}, false});
    net.scales = {{8, "head8"}, {4, "logits4"}};

    set_bit_widths(net, k_w, k_a);
    init_params(net, seed);
    net.validate();
    return net;
}

// --- forward / backward --------------------------------------------------------

enum class Mode { train, eval };
enum class ConvBackend { dense, bit_kernels };

/// Records the quantization residual Q(x) - clamp(x) of every quantizer call
/// and can replay it, turning each quantizer into clamp(x) + constant. The
/// replayed network is the smooth surrogate whose gradient the
/// straight-through estimator computes.
struct QuantTape {
    enum class State { record, replay } state = State::record;
    std::vector<RealTensor> residuals;
    std::size_t cursor = 0;
};

struct ForwardOptions {
    Mode mode = Mode::eval;
    ConvBackend backend = ConvBackend::dense;
    std::vector<std::string> targets; // empty: every scale output
    QuantTape* tape = nullptr;
    bool update_running_stats = true;
};

struct ConvUnitCache {
    RealTensor x;  // input before quantization
    RealTensor xq; // input actually convolved
    RealTensor wq; // weights actually convolved
};

struct NodeCache {
    std::vector<ConvUnitCache> convs;
    std::vector<ops::BatchNormCache> bns;
    std::vector<RealTensor> preclamp;
};

struct ForwardResult {
    std::map<std::string, RealTensor> outputs;
    std::map<std::string, NodeCache> cache;
    Mode mode = Mode::eval;

    const RealTensor& logits(const SegNet& net, std::size_t stride) const {
        for (const auto& s : net.scales)
            if (s.stride == stride) return outputs.at(s.node);
        fail(ErrorKind::bad_config, "no scale with stride " + std::to_string(stride));
    }
};

namespace detail {

inline RealTensor quantized_input(const RealTensor& x, int k, QuantTape* tape) {
    if (is_full_precision(k)) return x;
    if (tape && tape->state == QuantTape::State::replay) {
        const RealTensor& r = tape->residuals.at(tape->cursor++);
        RealTensor y = ops::clamp01(x);
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += r[i];
        return y;
    }
    RealTensor q = quantize_activations(x, k).values;
    if (tape) {
        RealTensor r = ops::clamp01(x);
        for (std::size_t i = 0; i < r.size(); ++i) r[i] = q[i] - r[i];
        tape->residuals.push_back(std::move(r));
    }
    return q;
}

inline RealTensor quantized_weights(const RealTensor& w, int k, QuantTape* tape) {
    if (is_full_precision(k)) return w;
    auto clamped = [&] {
        RealTensor c(w.shape());
        for (std::size_t i = 0; i < w.size(); ++i) c[i] = std::clamp(w[i], -1.0, 1.0);
        return c;
    };
    if (tape && tape->state == QuantTape::State::replay) {
        const RealTensor& r = tape->residuals.at(tape->cursor++);
        RealTensor y = clamped();
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += r[i];
        return y;
    }
    RealTensor q = quantize_weights(w, k).values;
    if (tape) {
        RealTensor r = clamped();
        for (std::size_t i = 0; i < r.size(); ++i) r[i] = q[i] - r[i];
        tape->residuals.push_back(std::move(r));
    }
    return q;
}

inline RealTensor conv_unit_forward(const SegNet& net, const ConvUnitDesc& u, const QuantSpec& q, const RealTensor& x,
                                    const ForwardOptions& opt, NodeCache& cache) {
    const RealTensor& w = net.params.at(u.prefix + ".w");
    ConvUnitCache c;
    const bool bit_path = opt.backend == ConvBackend::bit_kernels && q.weights_quantized() && q.acts_quantized() &&
                          (opt.tape == nullptr);
    RealTensor y;
    if (bit_path) {
        y = bit_quantized_conv(x, w, q, u.geom);
    } else {
        c.xq = quantized_input(x, q.k_a, opt.tape);
        c.wq = quantized_weights(w, q.k_w, opt.tape);
        y = ops::conv2d(c.xq, c.wq, u.geom);
    }
    if (opt.mode == Mode::train) {
        c.x = x;
        cache.convs.push_back(std::move(c));
    }
    return y;
}

inline RealTensor conv_unit_backward(const SegNet& net, const ConvUnitDesc& u, const QuantSpec& q,
                                     const ConvUnitCache& c, const RealTensor& dy, ParamMap& grads, bool need_dx) {
    RealTensor dwq, dxq;
    ops::conv2d_backward(c.xq, c.wq, dy, u.geom, need_dx ? &dxq : nullptr, dwq);
    const RealTensor& w = net.params.at(u.prefix + ".w");
    RealTensor dw = q.weights_quantized() ? ste_grad(dwq, w, -1.0, 1.0) : std::move(dwq);
    ops::accumulate(grads[u.prefix + ".w"], dw);
    if (!need_dx) return {};
    return q.acts_quantized() ? ste_grad(dxq, c.x, 0.0, 1.0) : dxq;
}

inline RealTensor bn_forward(SegNet& net, const std::string& bn, const RealTensor& x, const ForwardOptions& opt,
                             NodeCache& cache) {
    const RealTensor& gamma = net.params.at(bn + ".gamma");
    const RealTensor& beta = net.params.at(bn + ".beta");
    if (opt.mode == Mode::eval)
        return ops::batch_norm_eval(x, gamma, beta, net.buffers.at(bn + ".mean"), net.buffers.at(bn + ".var"));
    ops::BatchNormCache bc;
    RealTensor* rm = opt.update_running_stats ? &net.buffers.at(bn + ".mean") : nullptr;
    RealTensor* rv = opt.update_running_stats ? &net.buffers.at(bn + ".var") : nullptr;
    RealTensor y = ops::batch_norm_train(x, gamma, beta, rm, rv, bc);
    cache.bns.push_back(std::move(bc));
    return y;
}

inline RealTensor bn_backward(const SegNet& net, const std::string& bn, const ops::BatchNormCache& bc,
                              const RealTensor& dy, ParamMap& grads) {
    RealTensor dgamma, dbeta;
    RealTensor dx = ops::batch_norm_backward(dy, net.params.at(bn + ".gamma"), bc, dgamma, dbeta);
    ops::accumulate(grads[bn + ".gamma"], dgamma);
    ops::accumulate(grads[bn + ".beta"], dbeta);
    return dx;
}

inline RealTensor clamp_backward(const RealTensor& dy, const RealTensor& pre) {
    return ste_grad(dy, pre, 0.0, 1.0);
}

inline std::set<std::string> required_nodes(const SegNet& net, const std::vector<std::string>& targets) {
    std::set<std::string> need(targets.begin(), targets.end());
    for (auto it = net.layers.rbegin(); it != net.layers.rend(); ++it)
        if (need.contains(it->name))
            for (const auto& in : it->inputs) need.insert(in);
    return need;
}

} // namespace detail

/// Run the network on an NCHW image batch with values in [0,1]. Returns the
/// outputs of every executed node; scale logits are at the nodes listed in
/// net.scales. Train mode uses batch statistics and keeps what backward needs.
inline ForwardResult forward(SegNet& net, const RealTensor& image, const ForwardOptions& opt = {}) {
    const Shape4 s = image.shape();
    require(s.c == net.in_channels(), ErrorKind::shape_mismatch,
            "image has " + std::to_string(s.c) + " channels, network expects " + std::to_string(net.in_channels()));
    const std::size_t ms = net.max_stride();
    require(s.h % ms == 0 && s.w % ms == 0 && s.h > 0 && s.w > 0, ErrorKind::non_divisible_input,
            "image " + s.str() + " not divisible by stride " + std::to_string(ms));
    std::vector<std::string> targets = opt.targets;
    if (targets.empty())
        for (const auto& sc : net.scales) targets.push_back(sc.node);
    const auto need = detail::required_nodes(net, targets);

    ForwardResult r;
    r.mode = opt.mode;
    for (const auto& l : net.layers) {
        if (!need.contains(l.name)) continue;
        NodeCache cache;
        RealTensor out;
        switch (l.kind) {
        case LayerKind::input: out = image; break;
        case LayerKind::conv_bn_act: {
            const auto u = conv_units(l).front();
            RealTensor y = detail::conv_unit_forward(net, u, l.quant, r.outputs.at(l.inputs[0]), opt, cache);
            RealTensor b = detail::bn_forward(net, u.bn, y, opt, cache);
            out = ops::clamp01(b);
            if (opt.mode == Mode::train) cache.preclamp.push_back(std::move(b));
            break;
        }
        case LayerKind::residual_block: {
            const auto units = conv_units(l);
            const RealTensor& x = r.outputs.at(l.inputs[0]);
            RealTensor y1 = detail::conv_unit_forward(net, units[0], l.quant, x, opt, cache);
            RealTensor b1 = detail::bn_forward(net, units[0].bn, y1, opt, cache);
            RealTensor h1 = ops::clamp01(b1);
            RealTensor y2 = detail::conv_unit_forward(net, units[1], l.quant, h1, opt, cache);
            RealTensor b2 = detail::bn_forward(net, units[1].bn, y2, opt, cache);
            RealTensor shortcut = x;
            if (l.has_projection()) {
                RealTensor yp = detail::conv_unit_forward(net, units[2], l.quant, x, opt, cache);
                shortcut = detail::bn_forward(net, units[2].bn, yp, opt, cache);
            }
            RealTensor pre = ops::add(b2, shortcut);
            out = ops::clamp01(pre);
            if (opt.mode == Mode::train) {
                cache.preclamp.push_back(std::move(b1));
                cache.preclamp.push_back(std::move(pre));
            }
            break;
        }
        case LayerKind::predict_head: {
            const auto u = conv_units(l).front();
            out = detail::conv_unit_forward(net, u, l.quant, r.outputs.at(l.inputs[0]), opt, cache);
            ops::add_channel_bias(out, net.params.at(u.prefix + ".b"));
            break;
        }
        case LayerKind::upsample2x: out = ops::upsample2x(r.outputs.at(l.inputs[0])); break;
        case LayerKind::add: out = ops::add(r.outputs.at(l.inputs[0]), r.outputs.at(l.inputs[1])); break;
        }
        r.outputs[l.name] = std::move(out);
        if (opt.mode == Mode::train) r.cache[l.name] = std::move(cache);
    }
    return r;
}

/// Reverse pass from upstream gradients at arbitrary nodes. Quantizers use
/// the straight-through estimator; batch norm uses batch statistics.
inline ParamMap backward(const SegNet& net, const ForwardResult& fwd,
                         const std::map<std::string, RealTensor>& upstream) {
    require(fwd.mode == Mode::train, ErrorKind::bad_config, "backward needs a train-mode forward");
    std::map<std::string, RealTensor> grad = upstream;
    ParamMap grads;
    for (auto it = net.layers.rbegin(); it != net.layers.rend(); ++it) {
        const LayerSpec& l = *it;
        auto g_it = grad.find(l.name);
        if (g_it == grad.end() || !fwd.outputs.contains(l.name)) continue;
        const RealTensor dy = std::move(g_it->second);
        grad.erase(g_it);
        const bool need_dx = !l.inputs.empty() && net.layer(l.inputs[0]).kind != LayerKind::input;
        static const NodeCache no_cache;
        const auto c_it = fwd.cache.find(l.name);
        const NodeCache& cache = c_it == fwd.cache.end() ? no_cache : c_it->second;
        switch (l.kind) {
        case LayerKind::input: break;
        case LayerKind::conv_bn_act: {
            const auto u = conv_units(l).front();
            RealTensor db = detail::clamp_backward(dy, cache.preclamp[0]);
            RealTensor dconv = detail::bn_backward(net, u.bn, cache.bns[0], db, grads);
            RealTensor dx = detail::conv_unit_backward(net, u, l.quant, cache.convs[0], dconv, grads, need_dx);
            if (need_dx) ops::accumulate(grad[l.inputs[0]], dx);
            break;
        }
        case LayerKind::residual_block: {
            const auto units = conv_units(l);
            RealTensor dpre = detail::clamp_backward(dy, cache.preclamp[1]);
            RealTensor dy2 = detail::bn_backward(net, units[1].bn, cache.bns[1], dpre, grads);
            RealTensor dh1 = detail::conv_unit_backward(net, units[1], l.quant, cache.convs[1], dy2, grads, true);
            RealTensor db1 = detail::clamp_backward(dh1, cache.preclamp[0]);
            RealTensor dy1 = detail::bn_backward(net, units[0].bn, cache.bns[0], db1, grads);
            RealTensor dx = detail::conv_unit_backward(net, units[0], l.quant, cache.convs[0], dy1, grads, need_dx);
            RealTensor dshort;
            if (l.has_projection()) {
                RealTensor dyp = detail::bn_backward(net, units[2].bn, cache.bns[2], dpre, grads);
                dshort = detail::conv_unit_backward(net, units[2], l.quant, cache.convs[2], dyp, grads, need_dx);
            } else {
                dshort = dpre;
            }
            if (need_dx) {
                ops::accumulate(grad[l.inputs[0]], dx);
                ops::accumulate(grad[l.inputs[0]], dshort);
            }
            break;
        }
        case LayerKind::predict_head: {
            const auto u = conv_units(l).front();
            ops::accumulate(grads[u.prefix + ".b"], ops::channel_sum(dy));
            RealTensor dx = detail::conv_unit_backward(net, u, l.quant, cache.convs[0], dy, grads, need_dx);
            if (need_dx) ops::accumulate(grad[l.inputs[0]], dx);
            break;
        }
        case LayerKind::upsample2x: ops::accumulate(grad[l.inputs[0]], ops::upsample2x_backward(dy)); break;
        case LayerKind::add:
            ops::accumulate(grad[l.inputs[0]], dy);
            ops::accumulate(grad[l.inputs[1]], dy);
            break;
        }
    }
    for (const auto& [name, p] : net.params)
        if (!grads.contains(name)) grads[name] = RealTensor(p.shape(), 0.0);
    return grads;
}

// --- loss ------------------------------------------------------------------------

struct LossResult {
    double loss = 0.0;
    std::map<std::size_t, RealTensor> grads; // d loss / d logits per active stride
};

/// Class-weighted softmax cross-entropy per active scale, averaged over the
/// labelled pixels of that scale, summed over scales. Labels are downsampled
/// to each scale by nearest sampling; 255 is ignored.
inline LossResult stagewise_loss(const std::map<std::size_t, RealTensor>& logits, const LabelMap& labels,
                                 const std::vector<std::size_t>& active_scales,
                                 const std::vector<double>& class_weights) {
    LossResult res;
    for (std::size_t stride : active_scales) {
        const RealTensor& z = logits.at(stride);
        const Shape4 s = z.shape();
        require(class_weights.size() == s.c, ErrorKind::bad_config, "class weight count does not match classes");
        const LabelMap lab = stride == 1 ? labels : ops::downsample_labels(labels, stride);
        require(lab.shape() == Shape4{s.n, 1, s.h, s.w}, ErrorKind::shape_mismatch,
                "labels " + lab.shape().str() + " do not match logits " + s.str() + " at stride " +
                    std::to_string(stride));
        std::size_t count = 0;
        for (auto t : lab) {
            require(t < s.c || t == ignore_label, ErrorKind::bad_labels, "label " + std::to_string(t) + " out of range");
            if (t != ignore_label) ++count;
        }
        RealTensor g(s, 0.0);
        double sum = 0.0;
        std::vector<double> prob(s.c);
        for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t p = 0; p < s.plane(); ++p) {
                const auto t = lab.at(n, 0, 0, p);
                if (t == ignore_label) continue;
                double mx = z.at(n, 0, 0, p);
                for (std::size_t c = 1; c < s.c; ++c) mx = std::max(mx, z.at(n, c, 0, p));
                double denom = 0;
                for (std::size_t c = 0; c < s.c; ++c) denom += (prob[c] = std::exp(z.at(n, c, 0, p) - mx));
                const double lse = mx + std::log(denom);
                const double wt = class_weights[t];
                sum += wt * (lse - z.at(n, t, 0, p));
                for (std::size_t c = 0; c < s.c; ++c)
                    g.at(n, c, 0, p) = wt * (prob[c] / denom - (c == t ? 1.0 : 0.0)) / static_cast<double>(count);
            }
        if (count > 0) res.loss += sum / static_cast<double>(count);
        res.grads[stride] = std::move(g);
    }
    return res;
}

/// Logits of each active scale keyed by stride.
inline std::map<std::size_t, RealTensor> scale_logits(const SegNet& net, const ForwardResult& fwd,
                                                      const std::vector<std::size_t>& strides) {
    std::map<std::size_t, RealTensor> out;
    for (std::size_t s : strides) out[s] = fwd.logits(net, s);
    return out;
}

/// Upstream gradient map for backward from per-stride logit gradients.
inline std::map<std::string, RealTensor> logit_upstream(const SegNet& net, const LossResult& loss) {
    std::map<std::string, RealTensor> up;
    for (const auto& [stride, g] : loss.grads)
        for (const auto& sc : net.scales)
            if (sc.stride == stride) up[sc.node] = g;
    return up;
}

/// Finest-scale logits, bilinearly resized to the image resolution.
inline RealTensor predict_logits(SegNet& net, const RealTensor& image, ConvBackend backend = ConvBackend::bit_kernels) {
    ForwardOptions opt;
    opt.backend = backend;
    opt.targets = {net.scales.back().node};
    auto fwd = forward(net, image, opt);
    return ops::resize_bilinear(fwd.outputs.at(net.scales.back().node), image.shape().h, image.shape().w);
}

inline LabelMap predict(SegNet& net, const RealTensor& image, ConvBackend backend = ConvBackend::bit_kernels) {
    return ops::argmax_channels(predict_logits(net, image, backend));
}

} // namespace bfcn
