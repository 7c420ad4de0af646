#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "bfcn/graph.hpp"

namespace testutil {

struct GradCheckResult {
    int checked = 0;
    int skipped = 0; // coordinates whose perturbation crosses a clamp kink
    double max_rel = 0.0;
    std::vector<std::string> failures;
};

/// Compares backward() against central finite differences of the loss on
/// `coords` uniformly sampled parameter coordinates. With `surrogate`, the
/// loss is evaluated on the network whose quantizers are replaced by clamp
/// plus the residual recorded at the unperturbed point (QuantTape replay).
/// Coordinates where the one-sided slopes disagree sit on a clamp kink and
/// are resampled.
inline GradCheckResult check_gradients(bfcn::SegNet& net, const bfcn::RealTensor& image, const bfcn::LabelMap& labels,
                                       bool surrogate, int coords, std::uint32_t seed, double tol = 1e-3,
                                       double h = 1e-5) {
    using namespace bfcn;
    std::vector<std::size_t> strides;
    for (const auto& s : net.scales) strides.push_back(s.stride);
    std::vector<double> cw(net.num_classes);
    for (std::size_t c = 0; c < cw.size(); ++c) cw[c] = 1.0 + 0.25 * static_cast<double>(c);

    QuantTape tape;
    auto loss_at = [&](QuantTape* t) {
        ForwardOptions opt;
        opt.mode = Mode::train;
        opt.update_running_stats = false;
        opt.tape = t;
        if (t) t->cursor = 0;
        auto fwd = forward(net, image, opt);
        return std::pair{fwd, stagewise_loss(scale_logits(net, fwd, strides), labels, strides, cw)};
    };
    auto [fwd, loss] = loss_at(surrogate ? &tape : nullptr);
    const ParamMap grads = backward(net, fwd, logit_upstream(net, loss));
    tape.state = QuantTape::State::replay;
    QuantTape* t = surrogate ? &tape : nullptr;

    std::vector<std::pair<std::string, std::size_t>> all;
    for (const auto& [name, p] : net.params)
        for (std::size_t i = 0; i < p.size(); ++i) all.emplace_back(name, i);
    std::mt19937 g(seed);
    std::uniform_int_distribution<std::size_t> pick(0, all.size() - 1);

    GradCheckResult r;
    const double f0 = loss_at(t).second.loss;
    int attempts = 0;
    while (r.checked < coords && attempts < coords * 20) {
        ++attempts;
        const auto& [name, i] = all[pick(g)];
        double& p = net.params.at(name)[i];
        const double orig = p;
        p = orig + h;
        const double fp = loss_at(t).second.loss;
        p = orig - h;
        const double fm = loss_at(t).second.loss;
        p = orig;
        const double sp = (fp - f0) / h, sm = (f0 - fm) / h;
        if (std::abs(sp - sm) > 1e-2 * std::max({std::abs(sp), std::abs(sm), 1e-6})) {
            ++r.skipped;
            continue;
        }
        const double fd = (fp - fm) / (2 * h);
        const double an = grads.at(name)[i];
        const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-7});
        r.max_rel = std::max(r.max_rel, rel);
        if (rel > tol)
            r.failures.push_back(name + "[" + std::to_string(i) + "] analytic " + std::to_string(an) + " fd " +
                                 std::to_string(fd));
        ++r.checked;
    }
    return r;
}

} // namespace testutil
