#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bfcn/error.hpp"
#include "bfcn/random.hpp"
#include "bfcn/tensor.hpp"

namespace bfcn {

struct SegSample {
    RealTensor image; // (1, 3, H, W), values on the 8-bit grid in [0,1]
    LabelMap labels;  // (1, 1, H, W), class ids or ignore_label
};

struct SceneOptions {
    int min_shapes = 1;
    int max_shapes = 5;
    double pixel_noise = 0.12;   // per-pixel gaussian sigma
    double color_jitter = 0.08;  // per-shape colour offset range
};

namespace detail {

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
    const double c = v * s;
    const double hp = std::fmod(h, 1.0) * 6.0;
    const double x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
    std::array<double, 3> rgb{};
    if (hp < 1) rgb = {c, x, 0};
    else if (hp < 2) rgb = {x, c, 0};
    else if (hp < 3) rgb = {0, c, x};
    else if (hp < 4) rgb = {0, x, c};
    else if (hp < 5) rgb = {x, 0, c};
    else rgb = {c, 0, x};
    const double m = v - c;
    for (auto& ch : rgb) ch += m;
    return rgb;
}

inline double to_8bit_grid(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

} // namespace detail

/// Mean colour of a foreground class: evenly spaced hues.
inline std::array<double, 3> class_color(std::size_t cls, std::size_t num_classes) {
    const double hue = static_cast<double>(cls - 1) / static_cast<double>(num_classes - 1);
    return detail::hsv_to_rgb(hue, 0.75, 0.85);
}

/// Synthetic scene: grey background (class 0) with 1-5 rectangles, circles and
/// triangles of random foreground classes painted back to front. Each class
/// has its own colour distribution; pixels carry gaussian noise and are
/// rounded to the 8-bit grid so PPM export is lossless.
inline SegSample generate_toy_scene(std::uint64_t seed, std::size_t h, std::size_t w, std::size_t num_classes,
                                    const SceneOptions& opt = {}) {
    require(num_classes >= 2 && num_classes < 255, ErrorKind::bad_config, "num_classes must be in [2,254]");
    require(h >= 32 && w >= 32, ErrorKind::bad_config, "scene must be at least 32x32");
    require(opt.min_shapes >= 0 && opt.max_shapes >= opt.min_shapes, ErrorKind::bad_config, "bad shape count range");
    Rng rng(seed);
    SegSample s{RealTensor({1, 3, h, w}), LabelMap({1, 1, h, w}, 0)};

    const double grey = rng.uniform(0.35, 0.65);
    std::array<double, 3> bg{};
    for (auto& c : bg) c = grey + rng.uniform(-0.05, 0.05);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < h * w; ++p) s.image.at(0, c, 0, p) = bg[c];

    const auto n_shapes = rng.uniform_int(opt.min_shapes, opt.max_shapes);
    const double fh = static_cast<double>(h), fw = static_cast<double>(w);
    const double min_dim = std::min(fh, fw);
    for (std::int64_t i = 0; i < n_shapes; ++i) {
        const auto cls = static_cast<std::uint8_t>(rng.uniform_int(1, static_cast<std::int64_t>(num_classes) - 1));
        const int kind = static_cast<int>(rng.uniform_int(0, 2));
        const double cy = rng.uniform(0, fh), cx = rng.uniform(0, fw);
        const double ry = rng.uniform(min_dim / 10, min_dim / 4), rx = rng.uniform(min_dim / 10, min_dim / 4);
        auto color = class_color(cls, num_classes);
        for (auto& c : color) c += rng.uniform(-opt.color_jitter, opt.color_jitter);
        // triangle: apex above centre, base below
        const double ax = cx, ay = cy - ry, bx = cx - rx, by = cy + ry, qx = cx + rx, qy = cy + ry;
        auto edge = [](double x0, double y0, double x1, double y1, double px, double py) {
            return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
        };
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double py = static_cast<double>(y) + 0.5, px = static_cast<double>(x) + 0.5;
                bool inside = false;
                if (kind == 0) {
                    inside = std::abs(py - cy) <= ry && std::abs(px - cx) <= rx;
                } else if (kind == 1) {
                    const double dy = (py - cy) / ry, dx = (px - cx) / rx;
                    inside = dy * dy + dx * dx <= 1.0;
                } else {
                    const double e0 = edge(ax, ay, bx, by, px, py), e1 = edge(bx, by, qx, qy, px, py),
                                 e2 = edge(qx, qy, ax, ay, px, py);
                    inside = (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
                }
                if (!inside) continue;
                s.labels.at(0, 0, y, x) = cls;
                for (std::size_t c = 0; c < 3; ++c) s.image.at(0, c, y, x) = color[c];
            }
    }
    for (auto& v : s.image) v = detail::to_8bit_grid(v + opt.pixel_noise * rng.normal());
    return s;
}

// --- augmentation -------------------------------------------------------------

enum class AugmentMode { reflect, resize, random_crop };

struct AugmentParams {
    std::size_t out_h = 0, out_w = 0; // resize target or crop size
};

namespace detail {

inline SegSample resize_nearest(const SegSample& s, std::size_t oh, std::size_t ow) {
    const Shape4 is = s.image.shape();
    SegSample out{RealTensor({1, is.c, oh, ow}), LabelMap({1, 1, oh, ow})};
    for (std::size_t y = 0; y < oh; ++y) {
        const std::size_t sy = std::min(is.h - 1, (2 * y + 1) * is.h / (2 * oh));
        for (std::size_t x = 0; x < ow; ++x) {
            const std::size_t sx = std::min(is.w - 1, (2 * x + 1) * is.w / (2 * ow));
            for (std::size_t c = 0; c < is.c; ++c) out.image.at(0, c, y, x) = s.image.at(0, c, sy, sx);
            out.labels.at(0, 0, y, x) = s.labels.at(0, 0, sy, sx);
        }
    }
    return out;
}

inline SegSample crop(const SegSample& s, std::size_t y0, std::size_t x0, std::size_t ch, std::size_t cw) {
    const Shape4 is = s.image.shape();
    SegSample out{RealTensor({1, is.c, ch, cw}), LabelMap({1, 1, ch, cw})};
    for (std::size_t y = 0; y < ch; ++y)
        for (std::size_t x = 0; x < cw; ++x) {
            for (std::size_t c = 0; c < is.c; ++c) out.image.at(0, c, y, x) = s.image.at(0, c, y0 + y, x0 + x);
            out.labels.at(0, 0, y, x) = s.labels.at(0, 0, y0 + y, x0 + x);
        }
    return out;
}

} // namespace detail

/// Geometric augmentation applied identically to image and labels. Labels
/// are only ever resampled by nearest neighbour.
inline SegSample augment(const SegSample& s, std::uint64_t seed, AugmentMode mode, const AugmentParams& params = {}) {
    const Shape4 is = s.image.shape();
    switch (mode) {
    case AugmentMode::reflect: {
        SegSample out = s;
        for (std::size_t y = 0; y < is.h; ++y)
            for (std::size_t x = 0; x < is.w; ++x) {
                for (std::size_t c = 0; c < is.c; ++c) out.image.at(0, c, y, x) = s.image.at(0, c, y, is.w - 1 - x);
                out.labels.at(0, 0, y, x) = s.labels.at(0, 0, y, is.w - 1 - x);
            }
        return out;
    }
    case AugmentMode::resize:
        require(params.out_h > 0 && params.out_w > 0, ErrorKind::bad_config, "resize target must be positive");
        return detail::resize_nearest(s, params.out_h, params.out_w);
    case AugmentMode::random_crop: {
        require(params.out_h > 0 && params.out_w > 0 && params.out_h <= is.h && params.out_w <= is.w,
                ErrorKind::bad_crop, "crop " + std::to_string(params.out_h) + "x" + std::to_string(params.out_w) +
                                         " does not fit " + std::to_string(is.h) + "x" + std::to_string(is.w));
        Rng rng(seed);
        const auto y0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(is.h - params.out_h)));
        const auto x0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(is.w - params.out_w)));
        return detail::crop(s, y0, x0, params.out_h, params.out_w);
    }
    }
    return s;
}

/// Training-time augmentation: random reflection, then an upscale by a
/// factor in [1, max_scale] followed by a random crop back to the original size.
inline SegSample augment_for_training(const SegSample& s, std::uint64_t seed, double max_scale = 1.25) {
    Rng rng(seed);
    SegSample out = rng.bernoulli(0.5) ? augment(s, 0, AugmentMode::reflect) : s;
    const Shape4 is = s.image.shape();
    const double f = rng.uniform(1.0, max_scale);
    const auto rh = std::max(is.h, static_cast<std::size_t>(std::lround(static_cast<double>(is.h) * f)));
    const auto rw = std::max(is.w, static_cast<std::size_t>(std::lround(static_cast<double>(is.w) * f)));
    if (rh != is.h || rw != is.w) {
        out = augment(out, 0, AugmentMode::resize, {rh, rw});
        out = augment(out, rng.next(), AugmentMode::random_crop, {is.h, is.w});
    }
    return out;
}

// --- evaluation -----------------------------------------------------------------

/// C x C pixel counts, rows = ground truth, columns = prediction.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t num_classes) : n_(num_classes), counts_(num_classes * num_classes, 0) {}

    std::size_t num_classes() const noexcept { return n_; }
    std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * n_ + pred]; }
    std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts_[truth * n_ + pred]; }
    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (auto v : counts_) t += v;
        return t;
    }

    /// IoU per class; nullopt where the class is absent from truth and prediction.
    std::vector<std::optional<double>> class_iou() const {
        std::vector<std::optional<double>> out(n_);
        for (std::size_t c = 0; c < n_; ++c) {
            std::uint64_t row = 0, col = 0;
            for (std::size_t k = 0; k < n_; ++k) {
                row += at(c, k);
                col += at(k, c);
            }
            const std::uint64_t denom = row + col - at(c, c);
            if (denom > 0) out[c] = static_cast<double>(at(c, c)) / static_cast<double>(denom);
        }
        return out;
    }

    void write_tsv(std::ostream& os) const {
        os << "truth\\pred";
        for (std::size_t c = 0; c < n_; ++c) os << '\t' << c;
        os << '\n';
        for (std::size_t t = 0; t < n_; ++t) {
            os << t;
            for (std::size_t p = 0; p < n_; ++p) os << '\t' << at(t, p);
            os << '\n';
        }
    }

    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

private:
    std::size_t n_;
    std::vector<std::uint64_t> counts_;
};

/// Count (truth, pred) pairs, skipping pixels whose truth is ignore_label.
inline ConfusionMatrix& accumulate_confusion(const LabelMap& pred, const LabelMap& truth, ConfusionMatrix& cm) {
    require_same_shape(pred.shape(), truth.shape(), "accumulate_confusion");
    const std::size_t n = cm.num_classes();
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const auto t = truth[i];
        if (t == ignore_label) continue;
        require(t < n && pred[i] < n, ErrorKind::bad_labels, "label outside confusion matrix");
        ++cm.at(t, pred[i]);
    }
    return cm;
}

/// Mean over classes of TP / (TP + FP + FN); classes with a zero denominator
/// are left out of the mean.
inline double mean_iou(const ConfusionMatrix& cm) {
    double sum = 0;
    std::size_t n = 0;
    for (const auto& iou : cm.class_iou())
        if (iou) {
            sum += *iou;
            ++n;
        }
    require(n > 0, ErrorKind::empty_matrix, "no class has a non-zero IoU denominator");
    return sum / static_cast<double>(n);
}

/// Fraction of labelled pixels per class.
inline std::vector<double> class_frequencies(const std::vector<SegSample>& samples, std::size_t num_classes) {
    std::vector<double> counts(num_classes, 0.0);
    double total = 0;
    for (const auto& s : samples)
        for (auto t : s.labels)
            if (t != ignore_label && t < num_classes) {
                counts[t] += 1;
                total += 1;
            }
    for (auto& c : counts) c = total > 0 ? c / total : 0.0;
    return counts;
}

// --- file formats -----------------------------------------------------------------

namespace detail {

inline std::string read_pnm_token(std::istream& is) {
    std::string tok;
    while (true) {
        const int ch = is.get();
        require(ch != std::char_traits<char>::eof(), ErrorKind::format_error, "truncated PNM header");
        if (ch == '#') {
            std::string skip;
            std::getline(is, skip);
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
}

inline std::vector<std::uint8_t> read_pnm(const std::filesystem::path& path, const char* magic, std::size_t channels,
                                          std::size_t& h, std::size_t& w) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), ErrorKind::io_error, "cannot open " + path.string());
    require(read_pnm_token(is) == magic, ErrorKind::format_error, path.string() + ": expected " + magic);
    w = std::stoul(read_pnm_token(is));
    h = std::stoul(read_pnm_token(is));
    require(read_pnm_token(is) == "255", ErrorKind::format_error, path.string() + ": only maxval 255 supported");
    std::vector<std::uint8_t> data(h * w * channels);
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()));
    require(is.gcount() == static_cast<std::streamsize>(data.size()), ErrorKind::format_error,
            path.string() + ": truncated pixel data");
    return data;
}

inline void write_pnm(const std::filesystem::path& path, const char* magic, std::size_t h, std::size_t w,
                      const std::vector<std::uint8_t>& data) {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), ErrorKind::io_error, "cannot open " + path.string() + " for writing");
    os << magic << '\n' << w << ' ' << h << "\n255\n";
    os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    require(static_cast<bool>(os), ErrorKind::io_error, "write failed for " + path.string());
}

} // namespace detail

/// Binary PPM (P6) from a (1, 3, H, W) image in [0,1].
inline void write_ppm(const std::filesystem::path& path, const RealTensor& image) {
    const Shape4 s = image.shape();
    require(s.n == 1 && s.c == 3, ErrorKind::shape_mismatch, "write_ppm expects (1,3,H,W)");
    std::vector<std::uint8_t> data(s.h * s.w * 3);
    for (std::size_t p = 0; p < s.h * s.w; ++p)
        for (std::size_t c = 0; c < 3; ++c)
            data[p * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(image.at(0, c, 0, p), 0.0, 1.0) * 255.0));
    detail::write_pnm(path, "P6", s.h, s.w, data);
}

inline RealTensor read_ppm(const std::filesystem::path& path) {
    std::size_t h = 0, w = 0;
    const auto data = detail::read_pnm(path, "P6", 3, h, w);
    RealTensor image({1, 3, h, w});
    for (std::size_t p = 0; p < h * w; ++p)
        for (std::size_t c = 0; c < 3; ++c) image.at(0, c, 0, p) = data[p * 3 + c] / 255.0;
    return image;
}

/// Binary PGM (P5) of a (1, 1, H, W) label map.
inline void write_pgm(const std::filesystem::path& path, const LabelMap& labels) {
    const Shape4 s = labels.shape();
    require(s.n == 1 && s.c == 1, ErrorKind::shape_mismatch, "write_pgm expects (1,1,H,W)");
    detail::write_pnm(path, "P5", s.h, s.w, labels.values());
}

inline LabelMap read_pgm(const std::filesystem::path& path) {
    std::size_t h = 0, w = 0;
    auto data = detail::read_pnm(path, "P5", 1, h, w);
    return LabelMap({1, 1, h, w}, std::move(data));
}

// --- datasets ------------------------------------------------------------------------

struct Dataset {
    std::size_t num_classes = 5;
    std::vector<SegSample> train;
    std::vector<SegSample> val;
};

struct DatasetConfig {
    std::size_t train = 512;
    std::size_t val = 128;
    std::size_t h = 64, w = 64;
    std::size_t num_classes = 5;
    SceneOptions scene{};
};

/// Sample i of the train split uses sub-seed ("train", i), val uses ("val", i).
inline Dataset generate_dataset(std::uint64_t seed, const DatasetConfig& cfg) {
    Dataset d;
    d.num_classes = cfg.num_classes;
    for (std::size_t i = 0; i < cfg.train; ++i)
        d.train.push_back(generate_toy_scene(sub_seed(seed, "train", i), cfg.h, cfg.w, cfg.num_classes, cfg.scene));
    for (std::size_t i = 0; i < cfg.val; ++i)
        d.val.push_back(generate_toy_scene(sub_seed(seed, "val", i), cfg.h, cfg.w, cfg.num_classes, cfg.scene));
    return d;
}

inline std::string sample_id(std::size_t i) {
    std::ostringstream os;
    os << std::setw(4) << std::setfill('0') << i;
    return os.str();
}

/// Layout: images/NNNN.ppm, labels/NNNN.pgm, manifest.tsv (id, split) and
/// classes.txt holding the class count.
inline void write_dataset(const std::filesystem::path& dir, const Dataset& d) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir / "images", ec);
    fs::create_directories(dir / "labels", ec);
    require(!ec, ErrorKind::io_error, "cannot create " + dir.string() + ": " + ec.message());
    std::ofstream manifest(dir / "manifest.tsv");
    require(static_cast<bool>(manifest), ErrorKind::io_error, "cannot write manifest in " + dir.string());
    manifest << "id\tsplit\n";
    std::size_t id = 0;
    auto emit = [&](const std::vector<SegSample>& split, const char* name) {
        for (const auto& s : split) {
            const std::string sid = sample_id(id++);
            write_ppm(dir / "images" / (sid + ".ppm"), s.image);
            write_pgm(dir / "labels" / (sid + ".pgm"), s.labels);
            manifest << sid << '\t' << name << '\n';
        }
    };
    emit(d.train, "train");
    emit(d.val, "val");
    std::ofstream classes(dir / "classes.txt");
    classes << d.num_classes << '\n';
    require(static_cast<bool>(manifest) && static_cast<bool>(classes), ErrorKind::io_error, "dataset write failed");
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
    std::ifstream manifest(dir / "manifest.tsv");
    require(static_cast<bool>(manifest), ErrorKind::io_error, "no manifest.tsv in " + dir.string());
    Dataset d;
    std::ifstream classes(dir / "classes.txt");
    require(static_cast<bool>(classes >> d.num_classes), ErrorKind::io_error, "no classes.txt in " + dir.string());
    std::string line;
    std::getline(manifest, line); // header
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        require(tab != std::string::npos, ErrorKind::format_error, "bad manifest line '" + line + "'");
        const std::string id = line.substr(0, tab), split = line.substr(tab + 1);
        SegSample s{read_ppm(dir / "images" / (id + ".ppm")), read_pgm(dir / "labels" / (id + ".pgm"))};
        require(s.image.shape().h == s.labels.shape().h && s.image.shape().w == s.labels.shape().w,
                ErrorKind::format_error, "image/label size mismatch for " + id);
        if (split == "train")
            d.train.push_back(std::move(s));
        else if (split == "val")
            d.val.push_back(std::move(s));
        else
            fail(ErrorKind::format_error, "unknown split '" + split + "'");
    }
    return d;
}

} // namespace bfcn
