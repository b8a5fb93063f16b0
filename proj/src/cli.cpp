#include "bhn/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "bhn/experiments.hpp"
#include "bhn/imageio.hpp"

namespace fs = std::filesystem;

namespace bhn {

namespace {

std::map<std::string, std::string> parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) fail("cannot open config file '" + path + "'");
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            const auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        const std::string t = trim(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            fail("config '" + path + "' line " + std::to_string(lineno) +
                 ": expected key = value");
        kv[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
    }
    return kv;
}

DensitySign parse_sign(const std::string& s) {
    if (s == "paper") return DensitySign::kPaper;
    if (s == "flipped") return DensitySign::kFlipped;
    fail("density-sign must be paper|flipped, got '" + s + "'");
}

void apply_file_values(TrainConfig& cfg, const std::map<std::string, std::string>& kv) {
    auto geti = [&](const char* key, int& out) {
        auto it = kv.find(key);
        if (it != kv.end()) out = std::stoi(it->second);
    };
    auto getd = [&](const char* key, double& out) {
        auto it = kv.find(key);
        if (it != kv.end()) out = std::stod(it->second);
    };
    auto gets = [&](const char* key, std::string& out) {
        auto it = kv.find(key);
        if (it != kv.end()) out = it->second;
    };
    if (auto it = kv.find("group"); it != kv.end()) cfg.group = parse_group(it->second);
    if (auto it = kv.find("seed"); it != kv.end())
        cfg.seed = static_cast<std::uint64_t>(std::stoull(it->second));
    if (auto it = kv.find("density-sign"); it != kv.end())
        cfg.density_sign = parse_sign(it->second);
    geti("units", cfg.units);
    geti("batch", cfg.batch);
    geti("epochs", cfg.epochs);
    getd("noise-std", cfg.noise_std);
    getd("dropout", cfg.dropout);
    getd("sgd-lr", cfg.sgd.lr);
    getd("sgd-momentum", cfg.sgd.momentum);
    getd("sgd-weight-decay", cfg.sgd.weight_decay);
    getd("adam-lr", cfg.adam.lr);
    geti("patch-count", cfg.patch_count);
    geti("fold-count", cfg.fold_count);
    geti("fold-length", cfg.fold_length);
    geti("update-stride", cfg.update_stride);
    geti("probe-epochs", cfg.probe.epochs);
    geti("probe-max-samples", cfg.probe_max_samples);
    geti("wm-boundary", cfg.wm_boundary);
    gets("patches", cfg.patches_path);
    gets("data", cfg.data_path);
}

/// Common train-ish options; flags override config-file values which
/// override profile defaults.
struct RunOptions {
    std::string config_path;
    std::string profile;
    std::string group;
    std::string density_sign;
    std::uint64_t seed = 0;
    int epochs = -1;
    int batch = -1;
    std::string run_dir;
    bool force = false;

    CLI::Option* profile_opt = nullptr;
    CLI::Option* group_opt = nullptr;
    CLI::Option* sign_opt = nullptr;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* epochs_opt = nullptr;
    CLI::Option* batch_opt = nullptr;

    void attach(CLI::App* app) {
        app->add_option("--config", config_path, "config file (key = value lines)");
        profile_opt = app->add_option("--profile", profile, "paper|desk")->check(
            CLI::IsMember({"paper", "desk"}));
        group_opt = app->add_option("--group", group, "experimental|control1|control2");
        sign_opt = app->add_option("--density-sign", density_sign, "paper|flipped");
        seed_opt = app->add_option("--seed", seed, "master seed");
        epochs_opt = app->add_option("--epochs", epochs, "training epochs");
        batch_opt = app->add_option("--batch", batch, "batch size (= memory pool size)");
        app->add_option("--run-dir", run_dir, "output directory")->required();
        app->add_flag("--force", force, "redo a completed run directory");
    }

    TrainConfig build(TaskMode task) const {
        std::map<std::string, std::string> kv;
        if (!config_path.empty()) kv = parse_config_file(config_path);
        std::string prof = "desk";
        if (auto it = kv.find("profile"); it != kv.end()) prof = it->second;
        if (profile_opt && profile_opt->count()) prof = profile;
        TrainConfig cfg = task == TaskMode::kImage ? TrainConfig::image_profile(prof)
                                                   : TrainConfig::video_profile(prof);
        apply_file_values(cfg, kv);
        if (group_opt && group_opt->count()) cfg.group = parse_group(group);
        if (sign_opt && sign_opt->count()) cfg.density_sign = parse_sign(density_sign);
        if (seed_opt && seed_opt->count()) cfg.seed = seed;
        if (epochs_opt && epochs_opt->count()) cfg.epochs = epochs;
        if (batch_opt && batch_opt->count()) cfg.batch = batch;
        cfg.run_dir = run_dir;
        return cfg;
    }
};

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) fail("cannot open '" + path + "'");
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!cells.empty()) rows.push_back(std::move(cells));
    }
    if (rows.size() < 2) fail("'" + path + "' has no data rows");
    return rows;
}

int dispatch(int argc, const char* const* argv) {
    CLI::App app{"Gradient-isolated units with an adversarial attention network: "
                 "data preparation, training, probing and evaluation"};
    app.require_subcommand(1);

    // ---- prepare-patches ----
    auto* prep = app.add_subcommand("prepare-patches",
                                    "crop and standardize image patches into a BHNP cache");
    std::string prep_images, prep_out = "patches.bhnp";
    int prep_synth = 0, prep_count = 2000, prep_size = 16;
    std::uint64_t prep_seed = 0;
    prep->add_option("--images", prep_images, "directory of grayscale .pgm photographs");
    prep->add_option("--synth", prep_synth, "generate N synthetic landscape images instead");
    prep->add_option("--count", prep_count, "number of patches");
    prep->add_option("--size", prep_size, "patch side length");
    prep->add_option("--seed", prep_seed, "crop seed");
    prep->add_option("--out", prep_out, "output BHNP file");
    prep->callback([&] {
        if (prep_images.empty() == (prep_synth == 0))
            fail("prepare-patches: give exactly one of --images or --synth");
        std::vector<Tensor> images;
        if (prep_synth > 0) {
            Rng rng(derive_seed(prep_seed, "synth-images"));
            images = synth_images(prep_synth, 128, 128, rng);
        } else {
            std::vector<std::string> files;
            for (const auto& e : fs::directory_iterator(prep_images))
                if (e.path().extension() == ".pgm") files.push_back(e.path().string());
            std::sort(files.begin(), files.end());
            if (files.empty()) fail("no .pgm images under '" + prep_images + "'");
            for (const auto& f : files) images.push_back(read_pgm(f));
        }
        Rng rng(derive_seed(prep_seed, "patches"));
        PatchSet ps = extract_patches(images, prep_count, prep_size, rng);
        save_patches(prep_out, ps);
        std::printf("wrote %d patches of %dx%d to %s\n", ps.count(), prep_size, prep_size,
                    prep_out.c_str());
    });

    // ---- synth-video ----
    auto* synth = app.add_subcommand("synth-video", "generate BHNV episodes plus a manifest");
    int sv_episodes = 8, sv_frames = 256;
    std::uint64_t sv_seed = 0;
    std::string sv_dir = "episodes";
    synth->add_option("--episodes", sv_episodes, "episode count");
    synth->add_option("--frames", sv_frames, "frames per episode");
    synth->add_option("--seed", sv_seed, "generator seed");
    synth->add_option("--out-dir", sv_dir, "output directory");
    synth->callback([&] {
        Rng rng(derive_seed(sv_seed, "synth-video"));
        EpisodeSet set = synth_video_generate(sv_episodes, sv_frames, rng);
        fs::create_directories(sv_dir);
        std::vector<std::string> names;
        char buf[32];
        for (std::size_t i = 0; i < set.episodes.size(); ++i) {
            std::snprintf(buf, sizeof buf, "ep_%03zu.bhnv", i);
            save_episode((fs::path(sv_dir) / buf).string(), set.episodes[i]);
            names.emplace_back(buf);
        }
        save_manifest((fs::path(sv_dir) / "manifest.txt").string(), names);
        std::printf("wrote %d episodes of %d frames to %s\n", sv_episodes, sv_frames,
                    sv_dir.c_str());
    });

    // ---- train-image ----
    auto* ti = app.add_subcommand("train-image", "run the image-patch experiment");
    RunOptions ti_opts;
    std::string ti_patches;
    ti_opts.attach(ti);
    ti->add_option("--patches", ti_patches, "BHNP patch cache");
    ti->callback([&] {
        TrainConfig cfg = ti_opts.build(TaskMode::kImage);
        if (!ti_patches.empty()) cfg.patches_path = ti_patches;
        if (cfg.patches_path.empty())
            fail("train-image: no patch cache (use --patches or config 'patches')");
        if (cfg.group == Group::kControl2) fail("control2 is defined for the video task only");
        ensure_run_dir(cfg.run_dir, ti_opts.force);
        auto res = run_image_experiment(cfg);
        mark_run_done(cfg.run_dir);
        std::printf("image run complete: %zu+%zu epochs logged under %s\n",
                    res.epoch_loss_normal.size(), res.epoch_loss_control.size(),
                    cfg.run_dir.c_str());
    });

    // ---- train-video ----
    auto* tv = app.add_subcommand("train-video", "run the video CPC experiment");
    RunOptions tv_opts;
    std::string tv_data;
    tv_opts.attach(tv);
    tv->add_option("--data", tv_data, "episode manifest or directory of .bhnv files");
    tv->callback([&] {
        TrainConfig cfg = tv_opts.build(TaskMode::kVideo);
        if (!tv_data.empty()) cfg.data_path = tv_data;
        if (cfg.data_path.empty()) fail("train-video: no data (use --data or config 'data')");
        ensure_run_dir(cfg.run_dir, tv_opts.force);
        auto res = run_video_experiment(cfg);
        mark_run_done(cfg.run_dir);
        for (const auto& [phase, reprs] : res.scores)
            for (const auto& [repr, s] : reprs)
                std::printf("score %s/%s: %.4f (mse %.6f)\n", phase.c_str(), repr.c_str(),
                            s.score, s.mse);
    });

    // ---- probe ----
    auto* pr = app.add_subcommand("probe", "train a reconstruction probe on a checkpoint");
    std::string pr_checkpoint, pr_data, pr_repr = "z", pr_group = "experimental";
    std::uint64_t pr_seed = 0;
    std::string pr_profile = "desk";
    pr->add_option("--checkpoint", pr_checkpoint, "model checkpoint (BHNC)")->required();
    pr->add_option("--data", pr_data, "episode manifest or directory")->required();
    pr->add_option("--repr", pr_repr, "z|c|a")->check(CLI::IsMember({"z", "c", "a"}));
    pr->add_option("--group", pr_group, "group the checkpoint was trained as");
    pr->add_option("--seed", pr_seed, "probe seed");
    pr->add_option("--profile", pr_profile, "paper|desk");
    pr->callback([&] {
        const Group g = parse_group(pr_group);
        if (pr_repr == "a" && g != Group::kExperimental)
            fail("probe: controls have no attention representation a");
        TrainConfig cfg = TrainConfig::video_profile(pr_profile);
        cfg.group = g;
        cfg.seed = pr_seed;
        cfg.data_path = pr_data;
        ModelSpec spec = ModelSpec::video_defaults(g);
        BhnModel model = BhnModel::make(spec, cfg.seed);
        model.load(pr_checkpoint);
        ProbeScore s = probe_checkpoint(model, cfg, pr_repr);
        std::printf("repr=%s mse=%.6f score=%.4f\n", pr_repr.c_str(), s.mse, s.score);
    });

    // ---- visualize ----
    auto* vz = app.add_subcommand("visualize", "activation-maximization images for all units");
    std::string vz_checkpoint, vz_out = "viz", vz_group = "experimental";
    std::uint64_t vz_seed = 0;
    int vz_iters = 200;
    double vz_step = 0.1;
    vz->add_option("--checkpoint", vz_checkpoint, "image-model checkpoint")->required();
    vz->add_option("--out-dir", vz_out, "output directory");
    vz->add_option("--group", vz_group, "experimental|control1");
    vz->add_option("--seed", vz_seed, "init seed");
    vz->add_option("--iterations", vz_iters, "ascent iterations");
    vz->add_option("--step", vz_step, "ascent step size");
    vz->callback([&] {
        ModelSpec spec = ModelSpec::image_defaults(parse_group(vz_group));
        BhnModel model = BhnModel::make(spec, vz_seed);
        model.load(vz_checkpoint);
        fs::create_directories(vz_out);
        std::vector<Tensor> viz;
        char name[32];
        for (int i = 0; i < spec.n_units; ++i) {
            Rng rng(derive_seed(vz_seed, "viz-unit-" + std::to_string(i)));
            viz.push_back(visualize_unit(model, i, vz_iters, vz_step, rng));
            std::snprintf(name, sizeof name, "unit_%02d.pgm", i);
            write_pgm((fs::path(vz_out) / name).string(), viz.back());
        }
        const int cols = 8;
        const int rows = (spec.n_units + cols - 1) / cols;
        write_png((fs::path(vz_out) / "montage.png").string(), montage(viz, rows, cols));
        std::printf("wrote %d visualizations to %s\n", spec.n_units, vz_out.c_str());
    });

    // ---- working-memory ----
    auto* wm = app.add_subcommand("working-memory",
                                  "train with mixed z/e inputs and measure e persistence");
    RunOptions wm_opts;
    std::string wm_data;
    int wm_boundary = -1;
    wm_opts.attach(wm);
    wm->add_option("--data", wm_data, "episode manifest or directory");
    wm->add_option("--boundary", wm_boundary, "testing-phase boundary step");
    wm->callback([&] {
        TrainConfig cfg = wm_opts.build(TaskMode::kVideo);
        if (!wm_data.empty()) cfg.data_path = wm_data;
        if (cfg.data_path.empty()) fail("working-memory: no data given");
        if (wm_boundary >= 0) cfg.wm_boundary = wm_boundary;
        ensure_run_dir(cfg.run_dir, wm_opts.force);
        auto res = run_working_memory(cfg);
        mark_run_done(cfg.run_dir);
        std::printf("working memory: e stays positive for %d frames (zero ablation: %d)\n",
                    res.duration_e, res.duration_ablation);
    });

    // ---- plot ----
    auto* pl = app.add_subcommand("plot", "render a CSV column as a line plot PNG");
    std::string pl_input, pl_out = "plot.png", pl_x, pl_y;
    pl->add_option("--input", pl_input, "CSV file")->required();
    pl->add_option("--out", pl_out, "output PNG");
    pl->add_option("--x", pl_x, "x column (default: first)");
    pl->add_option("--y", pl_y, "comma-separated y columns (default: all numeric)");
    pl->callback([&] {
        auto rows = read_csv(pl_input);
        const auto& header = rows[0];
        auto col_index = [&](const std::string& name) {
            for (std::size_t i = 0; i < header.size(); ++i)
                if (header[i] == name) return static_cast<int>(i);
            fail("plot: no column '" + name + "' in " + pl_input);
            return -1;
        };
        const int xi = pl_x.empty() ? 0 : col_index(pl_x);
        std::vector<int> yis;
        if (!pl_y.empty()) {
            std::stringstream ss(pl_y);
            std::string name;
            while (std::getline(ss, name, ',')) yis.push_back(col_index(name));
        } else {
            for (std::size_t i = 0; i < header.size(); ++i) {
                if (static_cast<int>(i) == xi) continue;
                try {
                    (void)std::stod(rows[1][i]);
                    yis.push_back(static_cast<int>(i));
                } catch (...) {
                }
            }
            if (yis.empty()) fail("plot: no numeric columns in " + pl_input);
        }
        std::vector<double> xs;
        std::vector<std::vector<double>> series(yis.size());
        for (std::size_t r = 1; r < rows.size(); ++r) {
            xs.push_back(std::stod(rows[r][static_cast<std::size_t>(xi)]));
            for (std::size_t k = 0; k < yis.size(); ++k) {
                double v = 0;
                try {
                    v = std::stod(rows[r][static_cast<std::size_t>(yis[k])]);
                } catch (...) {
                    v = 0;
                }
                series[k].push_back(v);
            }
        }
        write_png(pl_out, plot_series(xs, series));
        std::printf("wrote %s\n", pl_out.c_str());
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    try {
        return dispatch(argc, argv);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

}  // namespace bhn
