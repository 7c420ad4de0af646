#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#if defined(__linux__)
#include <sched.h>
#endif

#include "bfcn/bitconv.hpp"
#include "bfcn/graph.hpp"

namespace bfcn {

enum class Platform { cpu, fpga };

/// How many bitOps one single-precision operation is worth.
struct CostModel {
    Platform platform = Platform::cpu;
    double bitops_per_flop = 18.0;

    static CostModel cpu() { return {Platform::cpu, 18.0}; }
    static CostModel fpga() { return {Platform::fpga, 1024.0}; }
};

/// bitops_per_flop / (k_w * k_a), ignoring overheads.
inline double predicted_speedup(int k_w, int k_a, const CostModel& model) {
    require(k_w >= 1 && k_a >= 1, ErrorKind::bad_bit_width, "bit-widths must be >= 1");
    require(model.bitops_per_flop > 0, ErrorKind::bad_config, "bitops_per_flop must be positive");
    return model.bitops_per_flop / (static_cast<double>(k_w) * static_cast<double>(k_a));
}

/// Storage in bytes: packed conv weights at each layer's k_w (32 = float),
/// plus float32 per-channel affine (batch norm folded to scale and shift) and
/// head biases.
inline std::uint64_t parameter_size(const SegNet& net) {
    std::uint64_t bytes = 0;
    for (const auto& l : net.layers)
        for (const auto& u : conv_units(l)) {
            const std::uint64_t count = u.geom.weight_shape().count();
            const std::uint64_t bits = count * static_cast<std::uint64_t>(l.quant.k_w);
            bytes += (bits + 7) / 8;
            const std::uint64_t per_channel = u.bn.empty() ? 1 : 2;
            bytes += per_channel * u.geom.out_ch * sizeof(float);
        }
    return bytes;
}

/// Share of the network's stored values that are batch-norm or bias terms.
inline double affine_parameter_fraction(const SegNet& net) {
    std::uint64_t conv = 0, affine = 0;
    for (const auto& l : net.layers)
        for (const auto& u : conv_units(l)) {
            conv += u.geom.weight_shape().count();
            affine += (u.bn.empty() ? 1 : 2) * u.geom.out_ch;
        }
    return conv + affine == 0 ? 0.0 : static_cast<double>(affine) / static_cast<double>(conv + affine);
}

// --- timing --------------------------------------------------------------------

struct BenchConfig {
    int k_w = full_precision;
    int k_a = full_precision;

    bool full_precision_baseline() const noexcept { return is_full_precision(k_w); }
    std::string label() const {
        return full_precision_baseline() ? "fp" : std::to_string(k_w) + "x" + std::to_string(k_a);
    }
};

/// "1x1,1x2,2x2,fp" -> configs.
inline std::vector<BenchConfig> parse_bench_configs(const std::string& s) {
    std::vector<BenchConfig> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        if (item == "fp") {
            out.push_back({});
            continue;
        }
        const auto x = item.find('x');
        require(x != std::string::npos, ErrorKind::bad_config, "bench config '" + item + "' is not KWxKA or fp");
        BenchConfig c;
        try {
            c.k_w = std::stoi(item.substr(0, x));
            c.k_a = std::stoi(item.substr(x + 1));
        } catch (const std::exception&) {
            fail(ErrorKind::bad_config, "bench config '" + item + "' is not KWxKA or fp");
        }
        require_bit_width(c.k_w);
        require_bit_width(c.k_a);
        out.push_back(c);
    }
    require(!out.empty(), ErrorKind::bad_config, "no bench configs");
    return out;
}

struct BenchRow {
    std::string config;
    int k_w = full_precision;
    int k_a = full_precision;
    double median_ns = 0.0;
    double speedup_vs_fp = 0.0; // 0 when no baseline was timed
    std::uint64_t kernel_invocations = 0; // binary passes per convolution
    double predicted_speedup = 0.0;
};

struct BenchReport {
    Shape4 shape{};
    ConvGeom geom{};
    std::size_t reps = 0;
    std::string pinning;
    CostModel model{};
    std::vector<BenchRow> rows;

    const BenchRow& row(const std::string& config) const {
        for (const auto& r : rows)
            if (r.config == config) return r;
        fail(ErrorKind::bad_config, "no bench row '" + config + "'");
    }

    void write_tsv(std::ostream& os) const {
        os << "config\tmedian_ns\tspeedup_vs_fp\tkernel_invocations\tpredicted_speedup\n";
        for (const auto& r : rows)
            os << r.config << '\t' << std::fixed << std::setprecision(0) << r.median_ns << '\t'
               << std::setprecision(3) << r.speedup_vs_fp << '\t' << r.kernel_invocations << '\t' << r.predicted_speedup
               << '\n';
        os.unsetf(std::ios::floatfield);
    }

    void write_table(std::ostream& os) const {
        os << "input " << shape.str() << ", kernel " << geom.kh << "x" << geom.kw << ", " << geom.out_ch
           << " filters, " << reps << " reps (median), " << pinning << "\n";
        os << std::left << std::setw(8) << "config" << std::right << std::setw(16) << "median_ns" << std::setw(16)
           << "speedup_vs_fp" << std::setw(20) << "kernel_invocations" << std::setw(19) << "predicted_speedup" << '\n';
        for (const auto& r : rows) {
            os << std::left << std::setw(8) << r.config << std::right << std::fixed << std::setprecision(0)
               << std::setw(16) << r.median_ns << std::setprecision(2) << std::setw(16);
            if (r.speedup_vs_fp > 0)
                os << r.speedup_vs_fp;
            else
                os << "-";
            os << std::setw(20) << r.kernel_invocations << std::setw(19) << r.predicted_speedup << '\n';
        }
        os.unsetf(std::ios::floatfield);
    }
};

namespace detail {

/// Restrict the calling thread to the CPU it is running on.
inline std::string pin_to_one_core() {
#if defined(__linux__)
    const int cpu = sched_getcpu();
    if (cpu >= 0) {
        cpu_set_t set;
        CPU_ZERO(&set);
        CPU_SET(cpu, &set);
        if (sched_setaffinity(0, sizeof(set), &set) == 0) return "pinned to cpu " + std::to_string(cpu);
    }
    return "pinning unavailable";
#else
    return "pinning unavailable on this platform";
#endif
}

inline double median(std::vector<double> t) {
    const auto mid = t.begin() + static_cast<std::ptrdiff_t>(t.size() / 2);
    std::nth_element(t.begin(), mid, t.end());
    double m = *mid;
    if (t.size() % 2 == 0) m = (m + *std::max_element(t.begin(), mid)) / 2;
    return m;
}

/// Median wall time of each job. Every job gets `warmups` untimed runs, then
/// the timed runs go round-robin over the jobs so slow drift on a shared core
/// affects all of them alike.
inline std::vector<double> interleaved_median_ns(const std::vector<std::function<void()>>& jobs, std::size_t reps,
                                                 std::size_t warmups = 3) {
    for (const auto& f : jobs)
        for (std::size_t i = 0; i < warmups; ++i) f();
    std::vector<std::vector<double>> t(jobs.size());
    for (auto& v : t) v.reserve(reps);
    for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < jobs.size(); ++j) {
            const auto a = std::chrono::steady_clock::now();
            jobs[j]();
            const auto b = std::chrono::steady_clock::now();
            t[j].push_back(std::chrono::duration<double, std::nano>(b - a).count());
        }
    std::vector<double> out;
    for (auto& v : t) out.push_back(median(std::move(v)));
    return out;
}

} // namespace detail

/// Single-threaded timing of bitconv2d for each bit config on pre-packed
/// operands and of conv2d_reference (float) for "fp", all on the same input
/// shape and geometry. Each time is the median of `reps` runs after 3 warmups.
/// The bit configs run interleaved with each other; the float baseline is
/// timed on its own afterwards so its large working set does not evict the
/// bit kernels' operands between their runs.
inline BenchReport run_bench(const Shape4& shape, const ConvGeom& geom, const std::vector<BenchConfig>& configs,
                             std::size_t reps, std::uint64_t seed = 0, const CostModel& model = CostModel::cpu()) {
    require(reps >= 20, ErrorKind::bad_config, "bench needs at least 20 reps");
    require(!configs.empty(), ErrorKind::bad_config, "no bench configs");
    require(shape.c == geom.in_ch, ErrorKind::shape_mismatch, "bench shape channels do not match geometry");
    geom.validate();
    BenchReport rep;
    rep.shape = shape;
    rep.geom = geom;
    rep.reps = reps;
    rep.model = model;
    rep.pinning = detail::pin_to_one_core();

    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<float> ua(0.0f, 1.0f), uw(-1.0f, 1.0f);
    Tensor<float> acts(shape), weights(geom.weight_shape());
    for (auto& v : acts) v = ua(gen);
    for (auto& v : weights) v = uw(gen);

    std::vector<std::function<void()>> jobs, fp_jobs;
    std::vector<std::size_t> job_row, fp_row;
    std::vector<BitPlaneTensor> packed;
    packed.reserve(2 * configs.size());
    volatile float fsink = 0;
    volatile std::int64_t isink = 0;
    for (const auto& c : configs) {
        BenchRow row;
        row.config = c.label();
        row.k_w = c.k_w;
        row.k_a = c.k_a;
        if (c.full_precision_baseline()) {
            fp_jobs.emplace_back([&] { fsink = conv2d_reference(acts, weights, geom)[0]; });
            fp_row.push_back(rep.rows.size());
            row.predicted_speedup = 1.0;
        } else {
            packed.push_back(pack(quantize_activations(acts, c.k_a).codes, c.k_a));
            packed.push_back(pack(quantize_weights(weights, c.k_w).codes, c.k_w));
            const auto& pa = packed[packed.size() - 2];
            const auto& pw = packed.back();
            kernel_counters().reset();
            isink = bitconv2d(pa, pw, geom)[0];
            row.kernel_invocations = kernel_counters().binary_passes.load();
            row.predicted_speedup = predicted_speedup(c.k_w, c.k_a, model);
            jobs.emplace_back([&isink, &pa, &pw, &geom] { isink = bitconv2d(pa, pw, geom)[0]; });
            job_row.push_back(rep.rows.size());
        }
        rep.rows.push_back(row);
    }
    const auto times = detail::interleaved_median_ns(jobs, reps);
    for (std::size_t i = 0; i < jobs.size(); ++i) rep.rows[job_row[i]].median_ns = times[i];
    double fp_ns = 0.0;
    for (std::size_t i = 0; i < fp_jobs.size(); ++i) {
        fp_ns = detail::interleaved_median_ns({fp_jobs[i]}, reps)[0];
        rep.rows[fp_row[i]].median_ns = fp_ns;
    }
    if (fp_ns > 0)
        for (auto& r : rep.rows) r.speedup_vs_fp = fp_ns / r.median_ns;
    return rep;
}

} // namespace bfcn
