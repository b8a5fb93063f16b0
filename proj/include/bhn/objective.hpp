#pragma once

#include <cmath>
#include <vector>

#include "bhn/model.hpp"

namespace bhn {

enum class DensityKind { kAbsClamp, kNegCosine };

/// The printed video density ratio gives aligned pairs the lowest value;
/// kFlipped negates it. Kept as a switch so the ambiguity is testable.
enum class DensitySign { kPaper, kFlipped };

struct DensityCfg {
    DensityKind kind = DensityKind::kAbsClamp;
    DensitySign sign = DensitySign::kPaper;
    double clamp_cap = 5.0;
    double temperature = 1.0;  // T, used by the cosine form
};

// ---- scalar reference operations (double precision) ----

double density_ratio(const DensityCfg& cfg, const std::vector<double>& z,
                     const std::vector<double>& partner);

/// -log( exp f(z,z+) / sum_{p in pool} exp f(z,p) ).
double infonce_plain(const DensityCfg& cfg, const std::vector<double>& z,
                     const std::vector<double>& z_pos,
                     const std::vector<std::vector<double>>& pool);

/// -log( exp f(z,z+) / sum_j w_j exp f(z,pool_j) ).
double infonce_weighted(const DensityCfg& cfg, const std::vector<double>& z,
                        const std::vector<double>& z_pos,
                        const std::vector<std::vector<double>>& pool,
                        const std::vector<double>& weights);

/// log( sum_j w_j exp f(z,pool_j) / sum_j exp f(z,pool_j) ); diagnostic
/// only, never back-propagated.
double mutual_info_diag(const DensityCfg& cfg, const std::vector<double>& z,
                        const std::vector<std::vector<double>>& pool,
                        const std::vector<double>& weights);

// ---- batched builders on the tape (training path) ----

/// All-pairs density matrix F[j,k] = f(pool_k, anchor_j). inv_T is a
/// positive scalar var (ignored by the abs-clamp form).
Var density_matrix_on_tape(Tape& tape, Var anchors, Var pool, const DensityCfg& cfg,
                           Var inv_T);

/// Paired positives f(a_j, b_j), returned as [N].
Var density_pairs_on_tape(Tape& tape, Var a, Var b, const DensityCfg& cfg, Var inv_T);

/// Per-row losses [N]: -f_pos + log(sum_k W[j,k] exp F[j,k]).
Var infonce_weighted_rows(Tape& tape, Var f_pos, Var f_matrix, Var weights);
/// Per-row losses [N]: -f_pos + log(sum_k exp F[j,k]).
Var infonce_plain_rows(Tape& tape, Var f_pos, Var f_matrix);
/// Mean over rows of log(sum_k W[j,k] exp F[j,k]); the term the attention
/// side maximizes on a frozen F.
Var weighted_denominator_mean(Tape& tape, Var weights, Var f_matrix);

// ---- the minimax training step ----

struct LossReport {
    Group group = Group::kExperimental;
    std::vector<double> unit_loss;  // mean over the batch, one per unit
    double total = 0;               // sum of unit_loss
    std::vector<double> unit_mi;    // Eq.-8-style diagnostic; empty without attention
    double mi_mean = 0;
    double tau = std::nan("");  // snapshot after the step; nan without attention
    double T = std::nan("");    // nan for the image task
};

struct ImageBatch {
    Tensor view_a;  // anchors; also feeds the attention network
    Tensor view_b;  // positives; the pool holds these
};

/// One alternating minimax update on an image batch: weights from the
/// attention side (cortex inputs detached), cortex descent with weights
/// held constant, then attention descent with densities held constant.
LossReport minimax_step_image(BhnModel& model, const ImageBatch& batch, Group group,
                              Sgd& cortex_opt, Sgd* att_opt, Rng& dropout_rng,
                              const DensityCfg& cfg);

struct VideoStepInputs {
    Tensor window;                   // x_t, [N x input_dim]
    std::vector<Tensor> gru_in_prev; // per-unit aggregator input at s = t-4
    std::vector<Tensor> hidden_prev; // per-unit hidden state at s-1
};

struct VideoStepResult {
    LossReport report;
    std::vector<Tensor> z_t;  // detached encoder outputs at t (the pool)
    std::vector<Tensor> c_s;  // detached contexts at s (the anchors)
    std::vector<Tensor> e_s;  // attention expectations of the pool; empty without attention
};

/// One minimax update for the delayed video pair (c_s, z_{s+4}) with
/// s = t-4: encodes the current window, recomputes the aggregator step
/// at s from stored values, and alternates the two optimizers.
VideoStepResult minimax_step_video(BhnModel& model, const VideoStepInputs& in, Group group,
                                   Adam& cortex_opt, Adam* att_opt, const DensityCfg& cfg);

}  // namespace bhn
