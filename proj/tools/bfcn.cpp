// bfcn: generate toy data, train, evaluate and benchmark bit fully
// convolutional networks from the command line.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "bfcn/bench.hpp"
#include "bfcn/dataset.hpp"
#include "bfcn/model_io.hpp"
#include "bfcn/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* tool_version = "bfcn 1.0.0";

enum Exit { ok = 0, bad_config = 2, diverged = 3, io_failure = 4 };

int exit_code_for(bfcn::ErrorKind k) {
    switch (k) {
    case bfcn::ErrorKind::divergence_detected: return diverged;
    case bfcn::ErrorKind::io_error:
    case bfcn::ErrorKind::format_error: return io_failure;
    default: return bad_config;
    }
}

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

/// key = value lines; '#' starts a comment, values may be quoted.
std::vector<std::string> config_file_args(const std::string& path) {
    std::ifstream is(path);
    bfcn::require(static_cast<bool>(is), bfcn::ErrorKind::io_error, "cannot open config " + path);
    std::vector<std::string> args;
    std::string line;
    for (int n = 1; std::getline(is, line); ++n) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty() || line.front() == '[') continue;
        const auto eq = line.find('=');
        bfcn::require(eq != std::string::npos, bfcn::ErrorKind::bad_config,
                      path + ":" + std::to_string(n) + ": expected key = value");
        std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        if (value.size() >= 2 && (value.front() == '"' || value.front() == '\'') && value.back() == value.front())
            value = value.substr(1, value.size() - 2);
        for (auto& c : key)
            if (c == '_') c = '-';
        args.push_back("--" + key);
        args.push_back(value);
    }
    return args;
}

/// Insert the contents of `--config FILE` right after the subcommand name so
/// that flags given on the command line (parsed later) take precedence.
std::vector<std::string> expand_config(std::vector<std::string> args) {
    for (std::size_t i = 1; i < args.size(); ++i) {
        std::string file;
        std::size_t span = 0;
        if (args[i] == "--config" && i + 1 < args.size()) {
            file = args[i + 1];
            span = 2;
        } else if (args[i].rfind("--config=", 0) == 0) {
            file = args[i].substr(9);
            span = 1;
        }
        if (span == 0) continue;
        args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + span));
        const auto extra = config_file_args(file);
        args.insert(args.begin() + 2, extra.begin(), extra.end());
        break;
    }
    return args;
}

json resolved_config(const CLI::App& cmd) {
    json cfg = json::object();
    for (const auto* o : cmd.get_options()) {
        if (o->get_lnames().empty()) continue;
        const std::string name = o->get_lnames().front();
        if (name == "help" || name == "config") continue;
        cfg[name] = o->count() > 0 ? o->as<std::string>() : o->get_default_str();
    }
    return cfg;
}

void write_manifest(const fs::path& path, const std::string& command, const CLI::App& cmd, std::uint64_t seed,
                    const json& artifacts, const json& results = json::object()) {
    json m;
    m["command"] = command;
    m["config"] = resolved_config(cmd);
    m["seed"] = seed;
    m["artifacts"] = artifacts;
    m["tool_version"] = tool_version;
    if (!results.empty()) m["results"] = results;
    std::ofstream os(path);
    bfcn::require(static_cast<bool>(os), bfcn::ErrorKind::io_error, "cannot write " + path.string());
    os << m.dump(2) << '\n';
}

std::pair<std::size_t, std::size_t> parse_size(const std::string& s) {
    const auto x = s.find('x');
    try {
        if (x != std::string::npos) return {std::stoul(s.substr(0, x)), std::stoul(s.substr(x + 1))};
    } catch (const std::exception&) {
    }
    bfcn::fail(bfcn::ErrorKind::bad_config, "size '" + s + "' is not HxW");
}

bfcn::Shape4 parse_shape(const std::string& s) {
    std::vector<std::size_t> d;
    std::stringstream ss(s);
    std::string item;
    try {
        while (std::getline(ss, item, ',')) d.push_back(std::stoul(item));
    } catch (const std::exception&) {
        d.clear();
    }
    bfcn::require(d.size() == 4 && d[0] && d[1] && d[2] && d[3], bfcn::ErrorKind::bad_config,
                  "shape '" + s + "' is not N,C,H,W");
    return {d[0], d[1], d[2], d[3]};
}

// --- gen ----------------------------------------------------------------------------

struct GenArgs {
    std::string out;
    std::size_t train = 512, val = 128, classes = 5;
    std::string size = "64x64";
    std::uint64_t seed = 0;
};

void add_gen(CLI::App& app, GenArgs& a) {
    app.add_option("--out", a.out, "output directory")->required();
    app.add_option("--train", a.train, "training samples");
    app.add_option("--val", a.val, "validation samples");
    app.add_option("--size", a.size, "sample size HxW");
    app.add_option("--classes", a.classes, "number of classes including background");
    app.add_option("--seed", a.seed, "dataset seed");
}

int run_gen(const CLI::App& cmd, const GenArgs& a) {
    bfcn::DatasetConfig cfg;
    cfg.train = a.train;
    cfg.val = a.val;
    std::tie(cfg.h, cfg.w) = parse_size(a.size);
    cfg.num_classes = a.classes;
    const auto data = bfcn::generate_dataset(bfcn::sub_seed(a.seed, "data"), cfg);
    bfcn::write_dataset(a.out, data);
    write_manifest(fs::path(a.out) / "run_manifest.json", "gen", cmd, a.seed,
                   {{"dataset", a.out}, {"manifest", (fs::path(a.out) / "manifest.tsv").string()}},
                   {{"train", data.train.size()}, {"val", data.val.size()}, {"classes", data.num_classes}});
    std::cout << "wrote " << data.train.size() << " train / " << data.val.size() << " val samples ("
              << cfg.h << "x" << cfg.w << ", " << cfg.num_classes << " classes) to " << a.out << '\n';
    return ok;
}

// --- train ----------------------------------------------------------------------------

struct TrainArgs {
    std::string data, out;
    int kw = 2, ka = 2;
    std::string route = "p1-8bit";
    int decay_rate = 1;
    std::size_t decay_iters = bfcn::DecaySchedule{}.fine_tune_iters;
    std::string variant = "residual";
    double lr = 0.05, finetune_lr = 0.02, momentum = 0.9;
    std::size_t iters = 600, batch = 8, width = 8;
    bool no_augment = false;
    std::uint64_t seed = 0;
};

void add_train(CLI::App& app, TrainArgs& a) {
    app.add_option("--data", a.data, "dataset directory")->required();
    app.add_option("--out", a.out, "model file to write")->required();
    app.add_option("--kw", a.kw, "weight bit-width (1-8, 32 = full precision)");
    app.add_option("--ka", a.ka, "activation bit-width (1-8, 32 = full precision)");
    app.add_option("--route", a.route, "p1, p2 or p1-8bit");
    app.add_option("--decay-rate", a.decay_rate, "bits dropped per decay step, 0 = jump from 8 straight to target");
    app.add_option("--decay-iters", a.decay_iters, "fine-tuning iterations per decay step");
    app.add_option("--variant", a.variant, "reconstruction branch: single, wide or residual");
    app.add_option("--lr", a.lr, "learning rate of the full-precision or classifier phase");
    app.add_option("--finetune-lr", a.finetune_lr, "learning rate of the low bit-width steps");
    app.add_option("--momentum", a.momentum, "SGD momentum");
    app.add_option("--iters", a.iters, "iterations of the full-precision or classifier phase");
    app.add_option("--batch", a.batch, "batch size");
    app.add_option("--width", a.width, "base channel width of the network");
    app.add_flag("--no-augment", a.no_augment, "disable reflection/resize/crop augmentation");
    app.add_option("--seed", a.seed, "run seed (init, batching, augmentation)");
}

int run_train(const CLI::App& cmd, const TrainArgs& a) {
    bfcn::TrainConfig cfg;
    cfg.lr = a.lr;
    cfg.finetune_lr = a.finetune_lr;
    cfg.momentum = a.momentum;
    cfg.iters = a.iters;
    cfg.batch = a.batch;
    cfg.augment = !a.no_augment;
    cfg.route = bfcn::parse_route(a.route);
    cfg.validate();
    bfcn::require_layer_bit_width(a.kw);
    bfcn::require_layer_bit_width(a.ka);
    bfcn::require(a.decay_rate >= 0, bfcn::ErrorKind::bad_schedule, "decay rate must be >= 0");
    const auto variant = bfcn::parse_variant(a.variant);
    const auto data = bfcn::read_dataset(a.data);
    bfcn::require(!data.train.empty(), bfcn::ErrorKind::bad_config, "dataset has no training samples");

    const fs::path model = a.out;
    const fs::path log_path = model.string() + ".log.tsv";
    std::ofstream log(log_path);
    bfcn::require(static_cast<bool>(log), bfcn::ErrorKind::io_error, "cannot write " + log_path.string());
    log << "iter\tbits\tscales\tloss\tlr\n";

    const auto steps = bfcn::route_steps(cfg.route, a.kw, a.ka, a.decay_rate);
    std::cout << "route " << a.route << ", bit-width steps:";
    if (steps.empty()) std::cout << " none (full precision)";
    for (const auto& [w, k] : steps) std::cout << ' ' << w << '-' << k;
    std::cout << '\n';

    auto init = bfcn::build_toy_bfcn(3, data.num_classes, a.width, variant, 32, 32, bfcn::sub_seed(a.seed, "init"));
    json step_log = json::array();
    auto res = bfcn::train_route(init, data, cfg, a.kw, a.ka, a.decay_rate, a.decay_iters,
                                 bfcn::sub_seed(a.seed, "train"), &log, [&](const bfcn::StepMetrics& m) {
                                     std::cout << "step " << m.k_w << '-' << m.k_a << "  loss " << m.train_loss
                                               << "  val mIoU " << m.val_miou << std::endl;
                                     step_log.push_back({{"k_w", m.k_w},
                                                         {"k_a", m.k_a},
                                                         {"iters", m.iters},
                                                         {"train_loss", m.train_loss},
                                                         {"val_miou", m.val_miou}});
                                 });
    double final_miou = res.steps.empty() ? 0.0 : res.steps.back().val_miou;
    if (res.steps.empty() && !data.val.empty()) final_miou = bfcn::mean_iou(bfcn::evaluate(res.net, data.val));
    bfcn::save_checkpoint(model.string(), res.net, res.velocity);
    log.close();
    write_manifest(model.string() + ".manifest.json", "train", cmd, a.seed,
                   {{"model", model.string()}, {"log", log_path.string()}, {"data", a.data}},
                   {{"pretrain_loss", res.fp_loss}, {"steps", step_log}, {"final_val_miou", final_miou}});
    std::cout << "final val mIoU " << final_miou << ", model written to " << model.string() << '\n';
    return ok;
}

// --- eval ------------------------------------------------------------------------------

struct EvalArgs {
    std::string model, data, split = "val", out, backend = "bit";
};

void add_eval(CLI::App& app, EvalArgs& a) {
    app.add_option("--model", a.model, "model file")->required();
    app.add_option("--data", a.data, "dataset directory")->required();
    app.add_option("--split", a.split, "train or val");
    app.add_option("--out", a.out, "TSV to write (default: <model>.<split>.iou.tsv)");
    app.add_option("--backend", a.backend, "bit (bit kernels) or dense (float convolution)");
}

int run_eval(const CLI::App& cmd, const EvalArgs& a) {
    bfcn::require(a.split == "train" || a.split == "val", bfcn::ErrorKind::bad_config, "split must be train or val");
    bfcn::require(a.backend == "bit" || a.backend == "dense", bfcn::ErrorKind::bad_config,
                  "backend must be bit or dense");
    auto net = bfcn::load_model(a.model);
    const auto data = bfcn::read_dataset(a.data);
    bfcn::require(net.num_classes == data.num_classes, bfcn::ErrorKind::bad_config,
                  "model has " + std::to_string(net.num_classes) + " classes, dataset has " +
                      std::to_string(data.num_classes));
    const auto& samples = a.split == "train" ? data.train : data.val;
    const auto cm = bfcn::evaluate(net, samples,
                                   a.backend == "bit" ? bfcn::ConvBackend::bit_kernels : bfcn::ConvBackend::dense);
    const double miou = bfcn::mean_iou(cm);
    std::ostringstream tsv;
    tsv << "class\tiou\n";
    const auto per_class = cm.class_iou();
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        tsv << c << '\t';
        if (per_class[c])
            tsv << *per_class[c];
        else
            tsv << "nan";
        tsv << '\n';
    }
    tsv << "mean\t" << miou << '\n';
    std::cout << tsv.str();

    const std::string out = a.out.empty() ? a.model + "." + a.split + ".iou.tsv" : a.out;
    std::ofstream os(out);
    bfcn::require(static_cast<bool>(os), bfcn::ErrorKind::io_error, "cannot write " + out);
    os << tsv.str();
    std::ofstream cm_os(out + ".confusion.tsv");
    cm.write_tsv(cm_os);
    write_manifest(out + ".manifest.json", "eval", cmd, 0,
                   {{"model", a.model}, {"data", a.data}, {"iou", out}, {"confusion", out + ".confusion.tsv"}},
                   {{"mean_iou", miou}, {"pixels", cm.total()}});
    return ok;
}

// --- bench -------------------------------------------------------------------------------

struct BenchArgs {
    std::string configs = "1x1,1x2,2x2,4x4,8x8,fp";
    std::string shape = "1,64,32,32";
    std::size_t reps = 20, kernel = 3, filters = 0;
    std::string platform = "cpu", out = ".";
    std::uint64_t seed = 0;
};

void add_bench(CLI::App& app, BenchArgs& a) {
    app.add_option("--configs", a.configs, "comma separated KWxKA configs and fp");
    app.add_option("--shape", a.shape, "input shape N,C,H,W");
    app.add_option("--reps", a.reps, "timed repetitions per config (>= 20)");
    app.add_option("--kernel", a.kernel, "square kernel size (padding keeps the spatial size)");
    app.add_option("--filters", a.filters, "output channels (default: input channels)");
    app.add_option("--platform", a.platform, "cost model for predicted speedups: cpu or fpga");
    app.add_option("--out", a.out, "directory for bench.tsv, bench.txt and the manifest");
    app.add_option("--seed", a.seed, "seed of the random operands");
}

int run_bench(const CLI::App& cmd, const BenchArgs& a) {
    const auto shape = parse_shape(a.shape);
    bfcn::require(a.platform == "cpu" || a.platform == "fpga", bfcn::ErrorKind::bad_config,
                  "platform must be cpu or fpga");
    bfcn::require(a.kernel >= 1, bfcn::ErrorKind::bad_config, "kernel must be >= 1");
    const bfcn::ConvGeom g{shape.c, a.filters ? a.filters : shape.c, a.kernel, a.kernel, 1, a.kernel / 2};
    const auto model = a.platform == "cpu" ? bfcn::CostModel::cpu() : bfcn::CostModel::fpga();
    const auto rep = bfcn::run_bench(shape, g, bfcn::parse_bench_configs(a.configs), a.reps, a.seed, model);
    rep.write_table(std::cout);
    std::error_code ec;
    fs::create_directories(a.out, ec);
    const fs::path dir = a.out;
    std::ofstream tsv(dir / "bench.tsv"), txt(dir / "bench.txt");
    bfcn::require(tsv && txt, bfcn::ErrorKind::io_error, "cannot write bench report in " + a.out);
    rep.write_tsv(tsv);
    rep.write_table(txt);
    json rows = json::array();
    for (const auto& r : rep.rows)
        rows.push_back({{"config", r.config},
                        {"median_ns", r.median_ns},
                        {"kernel_invocations", r.kernel_invocations},
                        {"predicted_speedup", r.predicted_speedup}});
    write_manifest(dir / "bench.manifest.json", "bench", cmd, a.seed,
                   {{"tsv", (dir / "bench.tsv").string()}, {"table", (dir / "bench.txt").string()}},
                   {{"pinning", rep.pinning}, {"rows", rows}});
    return ok;
}

int run(std::vector<std::string> args);

/// Re-run the command recorded in a manifest with its resolved configuration.
int run_replay(const std::string& manifest_path) {
    std::ifstream is(manifest_path);
    bfcn::require(static_cast<bool>(is), bfcn::ErrorKind::io_error, "cannot open " + manifest_path);
    json m;
    try {
        is >> m;
    } catch (const json::exception& e) {
        bfcn::fail(bfcn::ErrorKind::format_error, manifest_path + ": " + e.what());
    }
    bfcn::require(m.contains("command") && m.contains("config"), bfcn::ErrorKind::format_error,
                  manifest_path + " is not a run manifest");
    std::vector<std::string> args{"bfcn", m["command"].get<std::string>()};
    for (const auto& [key, value] : m["config"].items()) {
        const std::string v = value.get<std::string>();
        if (key == "no-augment") {
            if (v == "1" || v == "true") args.push_back("--no-augment");
            continue;
        }
        if (v.empty()) continue;
        args.push_back("--" + key);
        args.push_back(v);
    }
    return run(args);
}

int run(std::vector<std::string> args) {
    CLI::App app{"Bit fully convolutional networks: data, training, evaluation, benchmarks", "bfcn"};
    app.set_version_flag("--version", tool_version);
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    const auto with_config = [](CLI::App* sub) {
        sub->add_option("--config", "key = value file of flags; command-line flags override it");
        return sub;
    };

    GenArgs gen;
    TrainArgs train;
    EvalArgs eval;
    BenchArgs bench;
    std::string manifest;
    auto* gen_cmd = with_config(app.add_subcommand("gen", "write a synthetic segmentation dataset"));
    add_gen(*gen_cmd, gen);
    auto* train_cmd = with_config(app.add_subcommand("train", "train a network along one route"));
    add_train(*train_cmd, train);
    auto* eval_cmd = with_config(app.add_subcommand("eval", "per-class IoU and mean IoU of a model"));
    add_eval(*eval_cmd, eval);
    auto* bench_cmd = with_config(app.add_subcommand("bench", "time bit kernels against float convolution"));
    add_bench(*bench_cmd, bench);
    auto* replay_cmd = app.add_subcommand("replay", "re-run the command recorded in a run manifest");
    replay_cmd->add_option("manifest", manifest, "run manifest JSON")->required();

    try {
        args = expand_config(std::move(args));
        std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : bad_config;
    } catch (const bfcn::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code_for(e.kind());
    }

    try {
        if (gen_cmd->parsed()) return run_gen(*gen_cmd, gen);
        if (train_cmd->parsed()) return run_train(*train_cmd, train);
        if (eval_cmd->parsed()) return run_eval(*eval_cmd, eval);
        if (bench_cmd->parsed()) return run_bench(*bench_cmd, bench);
        if (replay_cmd->parsed()) return run_replay(manifest);
    } catch (const bfcn::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code_for(e.kind());
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return io_failure;
    }
    return bad_config;
}

} // namespace

int main(int argc, char** argv) { return run(std::vector<std::string>(argv, argv + argc)); }
