#pragma once

#include <string>
#include <vector>

#include "bhn/model.hpp"

namespace bhn {

/// score = (0.0225 - mse) * 255; zero for the information-free predictor.
double probe_score_formula(double mse);

struct ProbeScore {
    double mse = 0;
    double score = 0;
};

/// Deconvolutional reconstruction probe: linear d -> 16*12*12, then three
/// transposed-conv stages 16->8->4->1 (kernel 4, stride 2, padding 1;
/// 12->24->48->96) with leaky-relu between stages and tanh output.
struct DeconvProbe {
    Linear input;            // d -> 2304
    Parameter w1, w2, w3;    // [Ci, Co, 4, 4]

    static DeconvProbe make(int rep_dim, std::uint64_t seed);

    /// reps [N x d] -> flattened frames [N x 9216] in (-1, 1).
    Var forward(Tape& tape, Var reps, bool bind);

    std::vector<Parameter*> parameters();
};

struct ProbeCfg {
    int epochs = 10;
    int batch = 64;
    double lr = 1e-3;
    double train_fraction = 0.8;
    std::uint64_t seed = 0;
};

struct ProbeResult {
    DeconvProbe probe;
    ProbeScore held_out;
};

/// Trains a fresh probe on detached representations against target
/// frames [M x 9216]; scores on the held-out split.
ProbeResult train_probe(const Tensor& reps, const Tensor& targets, const ProbeCfg& cfg);

/// Mean squared error over all pixels and frames, and the paper score.
ProbeScore probe_score(DeconvProbe& probe, const Tensor& reps, const Tensor& targets);

/// Gradient-ascent visualization of one image-task unit: maximizes z^i
/// over a noise-initialized patch, re-standardizing after every accepted
/// step and backtracking on overshoot. Returns the [16 x 16] input.
Tensor visualize_unit(BhnModel& model, int unit, int iterations, double step_size, Rng& rng);

}  // namespace bhn
