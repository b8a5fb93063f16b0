#pragma once

#include <map>
#include <string>
#include <vector>

#include "bhn/data.hpp"
#include "bhn/objective.hpp"
#include "bhn/probes.hpp"

namespace bhn {

/// Full run configuration. The paper profile reproduces the published
/// settings; the desk profile is a separate small-scale default set and
/// never silently replaces them.
struct TrainConfig {
    TaskMode task = TaskMode::kImage;
    Group group = Group::kExperimental;
    std::string profile = "desk";
    std::uint64_t seed = 0;
    DensitySign density_sign = DensitySign::kPaper;

    int units = 64;
    int batch = 512;
    int epochs = 40;
    double noise_std = 0.1;
    double dropout = 0.2;
    int delay = 4;
    SgdConfig sgd;    // image optimizer
    AdamConfig adam;  // video optimizer

    int patch_count = 8000;  // image preparation default
    int fold_count = 16;     // video segment folding
    int fold_length = 256;
    int update_stride = 1;   // minimax update every k-th delayed pair

    ProbeCfg probe;
    int probe_max_samples = 2048;
    int collect_warmup = 8;  // steps skipped before probe rows are taken

    int viz_iterations = 200;
    double viz_step = 0.1;

    int wm_boundary = 24;

    std::string patches_path;
    std::string data_path;
    std::string run_dir;

    static TrainConfig image_profile(const std::string& profile);
    static TrainConfig video_profile(const std::string& profile);

    DensityCfg density_cfg() const;
};

struct ImageRunResult {
    std::vector<double> epoch_loss_normal;
    std::vector<double> epoch_loss_control;
    std::vector<Tensor> viz_untrained;
    std::vector<Tensor> viz_normal;
    std::vector<Tensor> viz_control;
};

/// Image protocol: train (experimental plus, by default, the plain-InfoNCE
/// control), then visualize every unit of the untrained, normal and
/// control models. Emits metrics.csv, checkpoints, unit pgms and the
/// three montages under cfg.run_dir.
ImageRunResult run_image_experiment(const TrainConfig& cfg);

struct VideoRunResult {
    std::vector<double> epoch_loss;
    /// phase ("before" or the trained group) -> repr ("z","c","a") -> score
    std::map<std::string, std::map<std::string, ProbeScore>> scores;
};

/// Video protocol: train cfg.group on the episode set, then probe z, c
/// (and a for the experimental group) of both the untrained and trained
/// model. Emits metrics.csv, scores.csv and a checkpoint.
VideoRunResult run_video_experiment(const TrainConfig& cfg);

struct WorkingMemoryResult {
    int duration_e = 0;
    int duration_ablation = 0;
    std::vector<int> steps;
    std::vector<double> score_e;
    std::vector<double> score_ablation;
};

/// Working-memory protocol: train with aggregator inputs alternating
/// between z_t (even steps) and e_{t-4} (odd steps), fit an e-probe in
/// that phase, then test with e_{t-4} fed exclusively past the boundary
/// and report how long its score stays positive.
WorkingMemoryResult run_working_memory(const TrainConfig& cfg);

/// Trains a fresh reconstruction probe for one representation kind
/// ("z", "c" or "a") of an already-built video model.
ProbeScore probe_checkpoint(BhnModel& model, const TrainConfig& cfg, const std::string& repr);

// ---- run-directory plumbing shared with the CLI ----

void configure_threads();
void ensure_run_dir(const std::string& dir, bool force);
void mark_run_done(const std::string& dir);
void write_config_snapshot(const TrainConfig& cfg, const std::string& path);
EpisodeSet load_episode_set(const std::string& data_path);

}  // namespace bhn
