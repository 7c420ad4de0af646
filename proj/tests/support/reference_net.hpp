#pragma once

#include <cmath>
#include <map>
#include <string>

#include "bfcn/bitconv.hpp"
#include "bfcn/graph.hpp"

namespace testutil {

// Independent eval-mode forward of the toy BFCN, written directly from its
// layer description with loop-based primitives: conv2d_reference for every
// convolution, explicit batch norm with running statistics, clamp, nearest
// 2x upsampling. Shares nothing with the library's forward beyond the
// parameter naming and the quantizers.
class ReferenceNet {
public:
    explicit ReferenceNet(const bfcn::SegNet& net) : net_(net) {}

    std::map<std::string, bfcn::RealTensor> run(const bfcn::RealTensor& image) const {
        using namespace bfcn;
        std::map<std::string, RealTensor> out;
        for (const auto& l : net_.layers) {
            switch (l.kind) {
            case LayerKind::input: out[l.name] = image; break;
            case LayerKind::conv_bn_act:
                out[l.name] = clamp(bn(conv(out.at(l.inputs[0]), l.name, l.geom, l.quant), l.name + ".bn"));
                break;
            case LayerKind::residual_block: {
                const RealTensor& x = out.at(l.inputs[0]);
                RealTensor h = clamp(bn(conv(x, l.name + ".conv1", l.geom, l.quant), l.name + ".bn1"));
                ConvGeom g2{l.geom.out_ch, l.geom.out_ch, 3, 3, 1, 1};
                RealTensor y = bn(conv(h, l.name + ".conv2", g2, l.quant), l.name + ".bn2");
                RealTensor sc = x;
                if (l.geom.stride != 1 || l.geom.in_ch != l.geom.out_ch) {
                    ConvGeom gp{l.geom.in_ch, l.geom.out_ch, 1, 1, l.geom.stride, 0};
                    sc = bn(conv(x, l.name + ".proj", gp, l.quant), l.name + ".projbn");
                }
                for (std::size_t i = 0; i < y.size(); ++i) y[i] += sc[i];
                out[l.name] = clamp(y);
                break;
            }
            case LayerKind::predict_head: {
                RealTensor y = conv(out.at(l.inputs[0]), l.name, l.geom, l.quant);
                const RealTensor& b = net_.params.at(l.name + ".b");
                const auto s = y.shape();
                for (std::size_t n = 0; n < s.n; ++n)
                    for (std::size_t c = 0; c < s.c; ++c)
                        for (std::size_t yy = 0; yy < s.h; ++yy)
                            for (std::size_t xx = 0; xx < s.w; ++xx) y.at(n, c, yy, xx) += b[c];
                out[l.name] = y;
                break;
            }
            case LayerKind::upsample2x: {
                const RealTensor& x = out.at(l.inputs[0]);
                const auto s = x.shape();
                RealTensor y({s.n, s.c, 2 * s.h, 2 * s.w});
                for (std::size_t n = 0; n < s.n; ++n)
                    for (std::size_t c = 0; c < s.c; ++c)
                        for (std::size_t yy = 0; yy < 2 * s.h; ++yy)
                            for (std::size_t xx = 0; xx < 2 * s.w; ++xx) y.at(n, c, yy, xx) = x.at(n, c, yy / 2, xx / 2);
                out[l.name] = y;
                break;
            }
            case LayerKind::add: {
                RealTensor y = out.at(l.inputs[0]);
                const RealTensor& b = out.at(l.inputs[1]);
                for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i];
                out[l.name] = y;
                break;
            }
            }
        }
        return out;
    }

private:
    bfcn::RealTensor conv(const bfcn::RealTensor& x, const std::string& prefix, const bfcn::ConvGeom& g,
                          const bfcn::QuantSpec& q) const {
        using namespace bfcn;
        RealTensor xq = q.acts_quantized() ? quantize_activations(x, q.k_a).values : x;
        const RealTensor& w = net_.params.at(prefix + ".w");
        RealTensor wq = q.weights_quantized() ? quantize_weights(w, q.k_w).values : w;
        return conv2d_reference(xq, wq, g);
    }

    bfcn::RealTensor bn(bfcn::RealTensor x, const std::string& prefix) const {
        const auto& gamma = net_.params.at(prefix + ".gamma");
        const auto& beta = net_.params.at(prefix + ".beta");
        const auto& mean = net_.buffers.at(prefix + ".mean");
        const auto& var = net_.buffers.at(prefix + ".var");
        const auto s = x.shape();
        for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t c = 0; c < s.c; ++c)
                for (std::size_t y = 0; y < s.h; ++y)
                    for (std::size_t xx = 0; xx < s.w; ++xx) {
                        double& v = x.at(n, c, y, xx);
                        v = gamma[c] * (v - mean[c]) / std::sqrt(var[c] + 1e-5) + beta[c];
                    }
        return x;
    }

    static bfcn::RealTensor clamp(bfcn::RealTensor x) {
        for (auto& v : x) v = v < 0 ? 0 : (v > 1 ? 1 : v);
        return x;
    }

    const bfcn::SegNet& net_;
};

/// Give batch-norm statistics and affine parameters non-trivial values so
/// reference comparisons exercise them.
inline void randomize_bn(bfcn::SegNet& net, std::uint32_t seed) {
    std::mt19937 g(seed);
    std::uniform_real_distribution<double> u(-0.3, 0.3), pos(0.5, 1.5);
    for (auto& [name, t] : net.buffers)
        for (auto& v : t) v = name.ends_with(".var") ? pos(g) : u(g);
    for (auto& [name, t] : net.params)
        if (name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".b"))
            for (auto& v : t) v = name.ends_with(".gamma") ? pos(g) : u(g);
}

} // namespace testutil
