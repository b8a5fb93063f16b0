#include "bhn/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>

#include "bhn/imageio.hpp"

#ifdef BHN_USE_CBLAS
extern "C" void openblas_set_num_threads(int);
#endif

namespace fs = std::filesystem;

namespace bhn {

void configure_threads() {
#ifdef BHN_USE_CBLAS
    if (const char* env = std::getenv("BHN_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) openblas_set_num_threads(n);
    }
#endif
}

void ensure_run_dir(const std::string& dir, bool force) {
    if (dir.empty()) fail("run directory not set");
    const fs::path done = fs::path(dir) / "DONE";
    if (fs::exists(done)) {
        if (!force)
            fail("run directory '" + dir + "' holds a completed run; pass --force to redo it");
        fs::remove(done);
    }
    fs::create_directories(dir);
}

void mark_run_done(const std::string& dir) {
    std::ofstream os(fs::path(dir) / "DONE");
    os << "complete\n";
}

TrainConfig TrainConfig::image_profile(const std::string& profile) {
    TrainConfig c;
    c.task = TaskMode::kImage;
    c.profile = profile;
    c.units = 64;
    c.batch = 512;
    c.epochs = 40;
    c.patch_count = 8000;
    c.sgd = SgdConfig{0.1, 0.9, 1e-3};
    c.noise_std = 0.1;
    c.dropout = 0.2;
    if (profile == "desk") {
        c.batch = 128;
        c.epochs = 10;
        c.patch_count = 2000;
    } else if (profile != "paper") {
        fail("unknown profile '" + profile + "' (expected paper|desk)");
    }
    return c;
}

TrainConfig TrainConfig::video_profile(const std::string& profile) {
    TrainConfig c;
    c.task = TaskMode::kVideo;
    c.profile = profile;
    c.units = 16;
    c.batch = 256;
    c.epochs = 20;
    c.adam = AdamConfig{};
    c.fold_count = 16;
    c.fold_length = 256;
    c.update_stride = 1;
    c.wm_boundary = 128;
    c.probe.epochs = 10;
    if (profile == "desk") {
        c.batch = 64;
        c.epochs = 5;
        c.fold_count = 8;
        c.fold_length = 64;
        c.update_stride = 2;
        c.probe.epochs = 6;
        c.probe_max_samples = 1280;
        c.wm_boundary = 24;
    } else if (profile != "paper") {
        fail("unknown profile '" + profile + "' (expected paper|desk)");
    }
    return c;
}

DensityCfg TrainConfig::density_cfg() const {
    DensityCfg d;
    d.kind = task == TaskMode::kImage ? DensityKind::kAbsClamp : DensityKind::kNegCosine;
    d.sign = density_sign;
    return d;
}

void write_config_snapshot(const TrainConfig& cfg, const std::string& path) {
    std::ofstream os(path);
    if (!os) fail("cannot write config snapshot '" + path + "'");
    os << "task = " << (cfg.task == TaskMode::kImage ? "image" : "video") << "\n";
    os << "group = " << group_name(cfg.group) << "\n";
    os << "profile = " << cfg.profile << "\n";
    os << "seed = " << cfg.seed << "\n";
    os << "density-sign = " << (cfg.density_sign == DensitySign::kPaper ? "paper" : "flipped")
       << "\n";
    os << "units = " << cfg.units << "\n";
    os << "batch = " << cfg.batch << "\n";
    os << "epochs = " << cfg.epochs << "\n";
    os << "noise-std = " << cfg.noise_std << "\n";
    os << "dropout = " << cfg.dropout << "\n";
    os << "delay = " << cfg.delay << "\n";
    os << "sgd-lr = " << cfg.sgd.lr << "\n";
    os << "sgd-momentum = " << cfg.sgd.momentum << "\n";
    os << "sgd-weight-decay = " << cfg.sgd.weight_decay << "\n";
    os << "adam-lr = " << cfg.adam.lr << "\n";
    os << "patch-count = " << cfg.patch_count << "\n";
    os << "fold-count = " << cfg.fold_count << "\n";
    os << "fold-length = " << cfg.fold_length << "\n";
    os << "update-stride = " << cfg.update_stride << "\n";
    os << "probe-epochs = " << cfg.probe.epochs << "\n";
    os << "probe-max-samples = " << cfg.probe_max_samples << "\n";
    os << "wm-boundary = " << cfg.wm_boundary << "\n";
    os << "patches = " << cfg.patches_path << "\n";
    os << "data = " << cfg.data_path << "\n";
}

EpisodeSet load_episode_set(const std::string& data_path) {
    if (data_path.empty()) fail("no episode data path given");
    std::vector<std::string> files;
    if (fs::is_directory(data_path)) {
        for (const auto& e : fs::directory_iterator(data_path))
            if (e.path().extension() == ".bhnv") files.push_back(e.path().string());
        std::sort(files.begin(), files.end());
        if (files.empty()) fail("no .bhnv episodes under '" + data_path + "'");
    } else {
        files = load_manifest(data_path);
    }
    EpisodeSet set;
    for (const auto& f : files) set.episodes.push_back(load_episode(f));
    return set;
}

namespace {

struct Csv {
    std::FILE* f = nullptr;
    explicit Csv(const std::string& path, const char* header) {
        f = std::fopen(path.c_str(), "w");
        if (!f) fail("cannot open '" + path + "' for writing");
        std::fputs(header, f);
        std::fputs("\n", f);
    }
    ~Csv() {
        if (f) std::fclose(f);
    }
    Csv(const Csv&) = delete;
    Csv& operator=(const Csv&) = delete;
};

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

void shuffle_indices(std::vector<int>& idx, Rng& rng) {
    for (int i = static_cast<int>(idx.size()) - 1; i > 0; --i)
        std::swap(idx[static_cast<std::size_t>(i)],
                  idx[static_cast<std::size_t>(rng.uniform_int(0, i))]);
}

Tensor gather_rows(const Tensor& src, const std::vector<int>& idx, int lo, int hi) {
    const int w = src.shape[1];
    Tensor out = Tensor::zeros({hi - lo, w});
    for (int r = lo; r < hi; ++r)
        std::copy_n(src.data.data() + static_cast<std::size_t>(idx[static_cast<std::size_t>(r)]) * w,
                    w, out.data.data() + static_cast<std::size_t>(r - lo) * w);
    return out;
}

/// Concatenate per-unit [N x d] values into [N x units*d].
Tensor hcat(const std::vector<Tensor>& parts) {
    const int n = parts[0].shape[0];
    int total = 0;
    for (const auto& p : parts) total += p.shape[1];
    Tensor out = Tensor::zeros({n, total});
    int off = 0;
    for (const auto& p : parts) {
        const int w = p.shape[1];
        for (int r = 0; r < n; ++r)
            std::copy_n(p.data.data() + static_cast<std::size_t>(r) * w, w,
                        out.data.data() + static_cast<std::size_t>(r) * total + off);
        off += w;
    }
    return out;
}

/// Grows a [cap x w] matrix row block by row block.
struct RowSink {
    Tensor rows;
    int filled = 0;
    RowSink(int cap, int w) : rows(Tensor::zeros({cap, w})) {}
    int capacity() const { return rows.shape[0]; }
    bool full() const { return filled >= capacity(); }
    void append(const Tensor& block) {
        const int w = rows.shape[1];
        const int take = std::min(block.shape[0], capacity() - filled);
        for (int r = 0; r < take; ++r)
            std::copy_n(block.data.data() + static_cast<std::size_t>(r) * w, w,
                        rows.data.data() + static_cast<std::size_t>(filled + r) * w);
        filled += take;
    }
    Tensor take() {
        if (filled == 0) return Tensor{};
        if (filled == capacity()) return std::move(rows);
        Tensor out = Tensor::zeros({filled, rows.shape[1]});
        std::copy_n(rows.data.data(), static_cast<std::size_t>(filled) * rows.shape[1],
                    out.data.data());
        return out;
    }
};

// ---------------------------------------------------------------- image

void write_viz_outputs(const std::vector<Tensor>& viz, const std::string& images_dir,
                       const std::string& label) {
    const fs::path unit_dir = fs::path(images_dir) / label;
    fs::create_directories(unit_dir);
    char name[32];
    for (std::size_t i = 0; i < viz.size(); ++i) {
        std::snprintf(name, sizeof name, "unit_%02zu.pgm", i);
        write_pgm((unit_dir / name).string(), viz[i]);
    }
    const int cols = 8;
    const int rows = (static_cast<int>(viz.size()) + cols - 1) / cols;
    write_png((fs::path(images_dir) / ("montage_" + label + ".png")).string(),
              montage(viz, rows, cols));
}

std::vector<Tensor> visualize_all(BhnModel& model, const TrainConfig& cfg) {
    std::vector<Tensor> out;
    out.reserve(static_cast<std::size_t>(model.spec.n_units));
    for (int i = 0; i < model.spec.n_units; ++i) {
        Rng rng(derive_seed(cfg.seed, "viz-unit-" + std::to_string(i)));
        out.push_back(visualize_unit(model, i, cfg.viz_iterations, cfg.viz_step, rng));
    }
    return out;
}

}  // namespace

ImageRunResult run_image_experiment(const TrainConfig& cfg) {
    configure_threads();
    if (cfg.task != TaskMode::kImage) fail("run_image_experiment: config is not an image task");
    PatchSet ps = load_patches(cfg.patches_path);
    const int m = ps.count();
    if (m < 2) fail("run_image_experiment: need at least 2 patches");

    const fs::path run(cfg.run_dir);
    const fs::path images = run / "images";
    fs::create_directories(images);
    write_config_snapshot(cfg, (run / "config.txt").string());
    Csv metrics((run / "metrics.csv").string(),
                "epoch,step,group,loss_total,loss_unit_mean,mi_diag_mean,tau,T");

    ImageRunResult result;

    {  // untrained panel
        ModelSpec spec = ModelSpec::image_defaults(
            cfg.group == Group::kControl1 ? Group::kControl1 : Group::kExperimental);
        spec.n_units = cfg.units;
        BhnModel fresh = BhnModel::make(spec, cfg.seed);
        result.viz_untrained = visualize_all(fresh, cfg);
        write_viz_outputs(result.viz_untrained, images.string(), "untrained");
    }

    std::vector<Group> groups;
    if (cfg.group == Group::kExperimental)
        groups = {Group::kExperimental, Group::kControl1};
    else
        groups = {cfg.group};

    const DensityCfg density = cfg.density_cfg();
    for (Group g : groups) {
        ModelSpec spec = ModelSpec::image_defaults(g);
        spec.n_units = cfg.units;
        spec.dropout_p = cfg.dropout;
        BhnModel model = BhnModel::make(spec, cfg.seed);
        Sgd cortex_opt(cfg.sgd);
        Sgd att_opt(cfg.sgd);
        Rng shuffle_rng(derive_seed(cfg.seed, std::string("image-shuffle-") + group_name(g)));
        Rng noise_rng(derive_seed(cfg.seed, std::string("image-noise-") + group_name(g)));
        Rng drop_rng(derive_seed(cfg.seed, std::string("image-dropout-") + group_name(g)));

        std::vector<int> idx(static_cast<std::size_t>(m));
        std::iota(idx.begin(), idx.end(), 0);
        long total_steps = 0;
        for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
            shuffle_indices(idx, shuffle_rng);
            double loss_acc = 0, mi_acc = 0;
            int batches = 0;
            double tau = std::nan("");
            for (int start = 0; start + 1 < m; start += cfg.batch) {
                const int stop = std::min(m, start + cfg.batch);
                if (stop - start < 2) break;
                Tensor base = gather_rows(ps.patches, idx, start, stop);
                ImageBatch batch;
                batch.view_a = add_gaussian_noise(base, 0.0, cfg.noise_std, noise_rng);
                batch.view_b = add_gaussian_noise(base, 0.0, cfg.noise_std, noise_rng);
                LossReport rep = minimax_step_image(model, batch, g, cortex_opt,
                                                    g == Group::kControl1 ? nullptr : &att_opt,
                                                    drop_rng, density);
                loss_acc += rep.total;
                mi_acc += rep.mi_mean;
                tau = rep.tau;
                ++batches;
                ++total_steps;
            }
            const double loss = loss_acc / std::max(1, batches);
            const double mi = mi_acc / std::max(1, batches);
            std::fprintf(metrics.f, "%d,%ld,%s,%s,%s,%s,%s,%s\n", epoch, total_steps,
                         group_name(g), fmt(loss).c_str(), fmt(loss / cfg.units).c_str(),
                         fmt(mi).c_str(), fmt(tau).c_str(), fmt(std::nan("")).c_str());
            if (g == Group::kExperimental)
                result.epoch_loss_normal.push_back(loss);
            else
                result.epoch_loss_control.push_back(loss);
        }
        model.save((run / (std::string("checkpoint_") + group_name(g) + ".bhnc")).string());
        auto viz = visualize_all(model, cfg);
        const std::string label = g == Group::kExperimental ? "normal" : "control";
        write_viz_outputs(viz, images.string(), label);
        if (g == Group::kExperimental)
            result.viz_normal = std::move(viz);
        else
            result.viz_control = std::move(viz);
    }
    return result;
}

// ---------------------------------------------------------------- video

namespace {

struct StepView {
    int t = 0;
    const std::vector<Tensor>* z = nullptr;
    const std::vector<Tensor>* c = nullptr;
    const std::vector<Tensor>* e = nullptr;  // e_{t-4}; null when unavailable
    const Tensor* frames = nullptr;          // clean frames at t, [N x 9216]
};

enum class Mix { kNone, kAlternate, kBoundary };

struct PassCfg {
    bool update = false;
    Mix mix = Mix::kNone;
    int boundary = -1;
    bool zero_e = false;
    bool need_e = false;
    std::function<void(const StepView&)> collect;
};

/// Drives one batch of segments through local time with the 4-step
/// delayed pairing; optionally runs the minimax updates and/or the
/// working-memory input mixing.
void run_segment_batch(BhnModel& model, const TrainConfig& cfg, const EpisodeSet& eps,
                       const std::vector<Segment>& segbatch, Adam* cortex_opt, Adam* att_opt,
                       Rng& noise_rng, const PassCfg& pass, std::vector<LossReport>* reports) {
    const int n = static_cast<int>(segbatch.size());
    const int len = segbatch[0].length;
    const int units = model.spec.n_units;
    const int zdim = model.spec.z_dim;
    const int hdim = model.spec.gru_hidden;
    const int delay = cfg.delay;
    const int fpx = 96 * 96;
    const DensityCfg density = cfg.density_cfg();
    const bool has_attention = model.attention.has_value();

    auto zero_units = [&](int d) {
        return std::vector<Tensor>(static_cast<std::size_t>(units), Tensor::zeros({n, d}));
    };
    std::vector<Tensor> h_prev = zero_units(hdim);
    // ring buffers indexed by absolute step
    const int ring = delay + 2;
    std::vector<std::vector<Tensor>> in_hist(static_cast<std::size_t>(ring));
    std::vector<std::vector<Tensor>> h_hist(static_cast<std::size_t>(ring));
    std::vector<std::vector<Tensor>> c_hist(static_cast<std::size_t>(ring));
    auto slot = [&](int t) { return static_cast<std::size_t>(((t % ring) + ring) % ring); };

    Tensor window = Tensor::zeros({n, model.spec.input_dim});
    Tensor frames_t = Tensor::zeros({n, fpx});
    for (int t = 0; t < len; ++t) {
        // assemble the batch inputs at local time t
        for (int r = 0; r < n; ++r) {
            const Segment& seg = segbatch[static_cast<std::size_t>(r)];
            const Episode& ep = eps.episodes[static_cast<std::size_t>(seg.episode)];
            Tensor w = stack_frames(ep, seg.start + t, cfg.noise_std, noise_rng);
            std::copy_n(w.data.data(), w.data.size(),
                        window.data.data() + static_cast<std::size_t>(r) * w.data.size());
            std::copy_n(ep.frames.data.data() +
                            static_cast<std::size_t>(seg.start + t) * fpx,
                        fpx, frames_t.data.data() + static_cast<std::size_t>(r) * fpx);
        }
        const int s = t - delay;
        const bool can_pair = s >= 0;
        const bool do_update = pass.update && can_pair && (s % cfg.update_stride == 0);

        std::vector<Tensor> z_t;
        std::vector<Tensor> e_s;
        if (do_update) {
            VideoStepInputs in;
            in.window = window;
            in.gru_in_prev = in_hist[slot(s)];
            in.hidden_prev = s >= 1 ? h_hist[slot(s - 1)] : zero_units(hdim);
            VideoStepResult out = minimax_step_video(model, in, model.spec.group, *cortex_opt,
                                                     has_attention ? att_opt : nullptr, density);
            z_t = std::move(out.z_t);
            e_s = std::move(out.e_s);
            if (reports) reports->push_back(std::move(out.report));
        } else {
            z_t = encode_video_values(model, window);
            if (pass.need_e && can_pair && has_attention && !pass.zero_e) {
                Rng unused(0);
                auto att = attention_values(model, c_hist[slot(s)], unused, false);
                const double tau =
                    std::exp(static_cast<double>(model.attention->log_tau.value.data[0]));
                for (int i = 0; i < units; ++i) {
                    Tensor w = attention_weights(att.keys[static_cast<std::size_t>(i)],
                                                 att.keys[static_cast<std::size_t>(i)], tau,
                                                 SimilarityKind::kCosine, i);
                    e_s.push_back(expectation(w, z_t[static_cast<std::size_t>(i)]));
                }
            }
        }
        if (pass.zero_e && can_pair) e_s = zero_units(zdim);

        // aggregator input for this step
        const std::vector<Tensor>* in_t = &z_t;
        if (pass.mix == Mix::kAlternate && can_pair && (t % 2 == 1) && !e_s.empty())
            in_t = &e_s;
        else if (pass.mix == Mix::kBoundary && t >= pass.boundary && can_pair && !e_s.empty())
            in_t = &e_s;

        std::vector<Tensor> h_t, c_t;
        advance_aggregator(model, *in_t, h_prev, &h_t, &c_t);

        if (pass.collect) {
            StepView view;
            view.t = t;
            view.z = &z_t;
            view.c = &c_t;
            view.e = e_s.empty() ? nullptr : &e_s;
            view.frames = &frames_t;
            pass.collect(view);
        }
        in_hist[slot(t)] = *in_t;
        h_hist[slot(t)] = h_t;
        c_hist[slot(t)] = c_t;
        h_prev = std::move(h_t);
    }
}

std::vector<std::vector<Segment>> segment_batches(const std::vector<Segment>& segments,
                                                  int batch, const std::vector<int>& order) {
    std::vector<std::vector<Segment>> out;
    const int m = static_cast<int>(segments.size());
    for (int start = 0; start + 1 < m; start += batch) {
        const int stop = std::min(m, start + batch);
        if (stop - start < 2) break;
        std::vector<Segment> b;
        b.reserve(static_cast<std::size_t>(stop - start));
        for (int r = start; r < stop; ++r)
            b.push_back(segments[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])]);
        out.push_back(std::move(b));
    }
    return out;
}

struct CollectedReps {
    Tensor z, c, a, frames;
};

/// Frozen pass over the segment set gathering (representation, frame)
/// rows for the probes.
CollectedReps collect_representations(BhnModel& model, const TrainConfig& cfg,
                                      const EpisodeSet& eps,
                                      const std::vector<Segment>& segments,
                                      const std::string& rng_tag) {
    const int units = model.spec.n_units;
    const bool want_a =
        model.attention.has_value() && model.spec.group == Group::kExperimental;
    const int cap = cfg.probe_max_samples;
    RowSink zs(cap, units * model.spec.z_dim);
    RowSink cs(cap, units * model.spec.c_dim);
    RowSink as(cap, model.spec.att_hidden);
    RowSink fr(cap, 96 * 96);
    Rng noise_rng(derive_seed(cfg.seed, "collect-noise-" + rng_tag));
    Rng drop_rng(derive_seed(cfg.seed, "collect-drop-" + rng_tag));

    std::vector<int> order(segments.size());
    std::iota(order.begin(), order.end(), 0);
    auto batches = segment_batches(segments, cfg.batch, order);
    for (const auto& b : batches) {
        if (fr.full()) break;
        PassCfg pass;
        pass.collect = [&](const StepView& v) {
            if (v.t < cfg.collect_warmup || fr.full()) return;
            zs.append(hcat(*v.z));
            cs.append(hcat(*v.c));
            if (want_a) {
                auto att = attention_values(model, *v.c, drop_rng, false);
                as.append(att.a);
            }
            fr.append(*v.frames);
        };
        run_segment_batch(model, cfg, eps, b, nullptr, nullptr, noise_rng, pass, nullptr);
    }
    CollectedReps out;
    out.z = zs.take();
    out.c = cs.take();
    out.a = as.take();
    out.frames = fr.take();
    return out;
}

void probe_phase(BhnModel& model, const TrainConfig& cfg, const EpisodeSet& eps,
                 const std::vector<Segment>& segments, const std::string& phase, Csv& scores,
                 VideoRunResult& result) {
    CollectedReps reps = collect_representations(model, cfg, eps, segments, "probe-" + phase);
    auto run_one = [&](const char* name, const Tensor& r) {
        ProbeCfg pc = cfg.probe;
        pc.seed = derive_seed(cfg.seed, std::string("probe-") + phase + "-" + name);
        ProbeResult pr = train_probe(r, reps.frames, pc);
        std::fprintf(scores.f, "%s,%s,%s,%s\n", phase.c_str(), name,
                     fmt(pr.held_out.mse).c_str(), fmt(pr.held_out.score).c_str());
        result.scores[phase][name] = pr.held_out;
    };
    run_one("z", reps.z);
    run_one("c", reps.c);
    if (!reps.a.shape.empty() && model.spec.group == Group::kExperimental) run_one("a", reps.a);
}

/// Segments start at frame 3 so every local step has a full 4-frame
/// window behind it.
std::vector<Segment> fold_all(const EpisodeSet& eps, int count, int length) {
    std::vector<Segment> segments;
    for (int e = 0; e < static_cast<int>(eps.episodes.size()); ++e) {
        const int usable = eps.episodes[static_cast<std::size_t>(e)].length() - 3;
        if (usable < length)
            fail("episode " + std::to_string(e) + " of " +
                 std::to_string(eps.episodes[static_cast<std::size_t>(e)].length()) +
                 " frames is too short for segments of " + std::to_string(length) +
                 " frames plus the 4-frame stacking window");
        auto segs = fold_segments(usable, count, length, e);
        for (auto& s : segs) s.start += 3;
        segments.insert(segments.end(), segs.begin(), segs.end());
    }
    return segments;
}

}  // namespace

ProbeScore probe_checkpoint(BhnModel& model, const TrainConfig& cfg, const std::string& repr) {
    configure_threads();
    if (repr == "a" && model.spec.group != Group::kExperimental)
        fail("probe: controls have no attention representation a");
    EpisodeSet eps = load_episode_set(cfg.data_path);
    std::vector<Segment> segments = fold_all(eps, cfg.fold_count, cfg.fold_length);
    CollectedReps reps = collect_representations(model, cfg, eps, segments, "probe-" + repr);
    const Tensor* r = nullptr;
    if (repr == "z") r = &reps.z;
    else if (repr == "c") r = &reps.c;
    else if (repr == "a") r = &reps.a;
    else fail("probe: unknown representation '" + repr + "' (expected z|c|a)");
    if (r->shape.empty()) fail("probe: representation '" + repr + "' was not collected");
    ProbeCfg pc = cfg.probe;
    pc.seed = derive_seed(cfg.seed, "probe-cli-" + repr);
    return train_probe(*r, reps.frames, pc).held_out;
}

VideoRunResult run_video_experiment(const TrainConfig& cfg) {
    configure_threads();
    if (cfg.task != TaskMode::kVideo) fail("run_video_experiment: config is not a video task");
    EpisodeSet eps = load_episode_set(cfg.data_path);
    std::vector<Segment> segments = fold_all(eps, cfg.fold_count, cfg.fold_length);

    const fs::path run(cfg.run_dir);
    fs::create_directories(run);
    write_config_snapshot(cfg, (run / "config.txt").string());
    Csv metrics((run / "metrics.csv").string(),
                "epoch,step,group,loss_total,loss_unit_mean,mi_diag_mean,tau,T");
    Csv scores((run / "scores.csv").string(), "phase,repr,mse,score");

    ModelSpec spec = ModelSpec::video_defaults(cfg.group);
    spec.n_units = cfg.units;
    BhnModel model = BhnModel::make(spec, cfg.seed);
    VideoRunResult result;

    probe_phase(model, cfg, eps, segments, "before", scores, result);

    Adam cortex_opt(cfg.adam);
    Adam att_opt(cfg.adam);
    Rng shuffle_rng(derive_seed(cfg.seed, "video-shuffle"));
    Rng noise_rng(derive_seed(cfg.seed, "video-noise"));
    std::vector<int> order(segments.size());
    std::iota(order.begin(), order.end(), 0);
    long total_steps = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle_indices(order, shuffle_rng);
        auto batches = segment_batches(segments, cfg.batch, order);
        std::vector<LossReport> reports;
        PassCfg pass;
        pass.update = true;
        for (const auto& b : batches)
            run_segment_batch(model, cfg, eps, b, &cortex_opt, &att_opt, noise_rng, pass,
                              &reports);
        double loss = 0, mi = 0, tau = std::nan(""), temp = std::nan("");
        for (const auto& r : reports) {
            loss += r.total;
            mi += r.mi_mean;
            tau = r.tau;
            temp = r.T;
        }
        const int k = std::max(1, static_cast<int>(reports.size()));
        loss /= k;
        mi /= k;
        total_steps += static_cast<long>(reports.size());
        std::fprintf(metrics.f, "%d,%ld,%s,%s,%s,%s,%s,%s\n", epoch, total_steps,
                     group_name(cfg.group), fmt(loss).c_str(), fmt(loss / cfg.units).c_str(),
                     fmt(mi).c_str(), fmt(tau).c_str(), fmt(temp).c_str());
        result.epoch_loss.push_back(loss);
    }
    model.save((run / "checkpoint.bhnc").string());

    probe_phase(model, cfg, eps, segments, group_name(cfg.group), scores, result);
    return result;
}

WorkingMemoryResult run_working_memory(const TrainConfig& cfg) {
    configure_threads();
    if (cfg.task != TaskMode::kVideo) fail("run_working_memory: config is not a video task");
    if (cfg.group != Group::kExperimental)
        fail("run_working_memory: the protocol needs the attention expectations "
             "(group experimental)");
    if (cfg.wm_boundary < 8) fail("run_working_memory: boundary must be >= 8");
    if (cfg.wm_boundary >= cfg.fold_length)
        fail("run_working_memory: boundary " + std::to_string(cfg.wm_boundary) +
             " beyond segment length " + std::to_string(cfg.fold_length));

    EpisodeSet eps = load_episode_set(cfg.data_path);
    std::vector<Segment> segments = fold_all(eps, cfg.fold_count, cfg.fold_length);

    const fs::path run(cfg.run_dir);
    fs::create_directories(run);
    write_config_snapshot(cfg, (run / "config.txt").string());
    Csv metrics((run / "metrics.csv").string(),
                "epoch,step,group,loss_total,loss_unit_mean,mi_diag_mean,tau,T");
    Csv scores((run / "scores.csv").string(), "phase,repr,mse,score");

    ModelSpec spec = ModelSpec::video_defaults(Group::kExperimental);
    spec.n_units = cfg.units;
    BhnModel model = BhnModel::make(spec, cfg.seed);
    Adam cortex_opt(cfg.adam);
    Adam att_opt(cfg.adam);
    TrainConfig wm_cfg = cfg;
    wm_cfg.update_stride = 1;  // e_{t-4} must exist at every odd step

    Rng shuffle_rng(derive_seed(cfg.seed, "wm-shuffle"));
    Rng noise_rng(derive_seed(cfg.seed, "wm-noise"));
    std::vector<int> order(segments.size());
    std::iota(order.begin(), order.end(), 0);
    const int e_width = cfg.units * spec.z_dim;
    RowSink e_rows(cfg.probe_max_samples, e_width);
    RowSink e_frames(cfg.probe_max_samples, 96 * 96);
    long total_steps = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle_indices(order, shuffle_rng);
        auto batches = segment_batches(segments, cfg.batch, order);
        std::vector<LossReport> reports;
        PassCfg pass;
        pass.update = true;
        pass.mix = Mix::kAlternate;
        pass.need_e = true;
        const bool last_epoch = epoch == cfg.epochs;
        if (last_epoch) {
            pass.collect = [&](const StepView& v) {
                // e_{t-4} approximates z_t, so its target is the frame at t
                if (v.e == nullptr || v.t < cfg.collect_warmup || e_rows.full()) return;
                e_rows.append(hcat(*v.e));
                e_frames.append(*v.frames);
            };
        }
        for (const auto& b : batches)
            run_segment_batch(model, wm_cfg, eps, b, &cortex_opt, &att_opt, noise_rng, pass,
                              &reports);
        double loss = 0, mi = 0, tau = std::nan(""), temp = std::nan("");
        for (const auto& r : reports) {
            loss += r.total;
            mi += r.mi_mean;
            tau = r.tau;
            temp = r.T;
        }
        const int k = std::max(1, static_cast<int>(reports.size()));
        total_steps += static_cast<long>(reports.size());
        std::fprintf(metrics.f, "%d,%ld,%s,%s,%s,%s,%s,%s\n", epoch, total_steps,
                     group_name(cfg.group), fmt(loss / k).c_str(),
                     fmt(loss / k / cfg.units).c_str(), fmt(mi / k).c_str(), fmt(tau).c_str(),
                     fmt(temp).c_str());
    }
    model.save((run / "checkpoint.bhnc").string());

    ProbeCfg pc = cfg.probe;
    pc.seed = derive_seed(cfg.seed, "probe-e");
    ProbeResult eprobe = train_probe(e_rows.take(), e_frames.take(), pc);
    std::fprintf(scores.f, "wm_train,e,%s,%s\n", fmt(eprobe.held_out.mse).c_str(),
                 fmt(eprobe.held_out.score).c_str());

    // testing phase: frozen model, z before the boundary, e_{t-4} after
    WorkingMemoryResult result;
    std::vector<int> test_order(segments.size());
    std::iota(test_order.begin(), test_order.end(), 0);
    auto test_batches = segment_batches(segments, cfg.batch, test_order);
    if (test_batches.empty()) fail("run_working_memory: no test batch");
    const auto& test_batch = test_batches.front();

    auto run_test = [&](bool zero_e, std::vector<double>* series) {
        PassCfg pass;
        pass.mix = Mix::kBoundary;
        pass.boundary = cfg.wm_boundary;
        pass.need_e = true;
        pass.zero_e = zero_e;
        pass.collect = [&](const StepView& v) {
            if (v.t < cfg.wm_boundary || v.e == nullptr) return;
            ProbeScore s = probe_score(eprobe.probe, hcat(*v.e), *v.frames);
            series->push_back(s.score);
        };
        Rng test_noise(derive_seed(cfg.seed, "wm-test-noise"));
        run_segment_batch(model, wm_cfg, eps, test_batch, nullptr, nullptr, test_noise, pass,
                          nullptr);
    };
    run_test(false, &result.score_e);
    run_test(true, &result.score_ablation);

    auto duration = [](const std::vector<double>& s) {
        int d = 0;
        for (double v : s) {
            if (v > 0)
                ++d;
            else
                break;
        }
        return d;
    };
    result.duration_e = duration(result.score_e);
    result.duration_ablation = duration(result.score_ablation);
    for (std::size_t i = 0; i < result.score_e.size(); ++i)
        result.steps.push_back(cfg.wm_boundary + static_cast<int>(i));

    Csv series((run / "wm_series.csv").string(), "t,score_e,score_ablation");
    for (std::size_t i = 0; i < result.score_e.size(); ++i)
        std::fprintf(series.f, "%d,%s,%s\n", result.steps[i], fmt(result.score_e[i]).c_str(),
                     i < result.score_ablation.size() ? fmt(result.score_ablation[i]).c_str()
                                                      : "nan");
    std::vector<double> xs(result.steps.begin(), result.steps.end());
    write_png((run / "wm_plot.png").string(),
              plot_series(xs, {result.score_e, result.score_ablation}));
    return result;
}

}  // namespace bhn
