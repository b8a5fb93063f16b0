#include "bhn/objective.hpp"

#include <cmath>

namespace bhn {

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double sign_of(DensitySign s) { return s == DensitySign::kPaper ? -1.0 : 1.0; }

}  // namespace

double density_ratio(const DensityCfg& cfg, const std::vector<double>& z,
                     const std::vector<double>& partner) {
    if (z.size() != partner.size())
        fail("density_ratio: dims differ, " + std::to_string(z.size()) + " vs " +
             std::to_string(partner.size()));
    if (cfg.kind == DensityKind::kAbsClamp) {
        double acc = 0;
        for (std::size_t i = 0; i < z.size(); ++i) acc += std::fabs(z[i] - partner[i]);
        return -std::min(acc, cfg.clamp_cap);
    }
    const double nz = std::sqrt(dot(z, z));
    const double np = std::sqrt(dot(partner, partner));
    if (nz == 0 || np == 0) fail("density_ratio: zero-norm vector under cosine");
    return sign_of(cfg.sign) * dot(z, partner) / (nz * np) / cfg.temperature;
}

double infonce_plain(const DensityCfg& cfg, const std::vector<double>& z,
                     const std::vector<double>& z_pos,
                     const std::vector<std::vector<double>>& pool) {
    if (pool.empty()) fail("infonce_plain: empty pool");
    const double f_pos = density_ratio(cfg, z, z_pos);
    double den = 0;
    for (const auto& p : pool) den += std::exp(density_ratio(cfg, z, p));
    return -std::log(std::exp(f_pos) / den);
}

double infonce_weighted(const DensityCfg& cfg, const std::vector<double>& z,
                        const std::vector<double>& z_pos,
                        const std::vector<std::vector<double>>& pool,
                        const std::vector<double>& weights) {
    if (pool.size() != weights.size())
        fail("infonce_weighted: pool size " + std::to_string(pool.size()) +
             " != weight count " + std::to_string(weights.size()));
    double wsum = 0;
    for (double w : weights) wsum += w;
    if (std::fabs(wsum - 1.0) > 1e-4)
        fail("infonce_weighted: weights sum to " + std::to_string(wsum) + ", expected 1");
    const double f_pos = density_ratio(cfg, z, z_pos);
    double den = 0;
    for (std::size_t j = 0; j < pool.size(); ++j)
        den += weights[j] * std::exp(density_ratio(cfg, z, pool[j]));
    return -std::log(std::exp(f_pos) / den);
}

double mutual_info_diag(const DensityCfg& cfg, const std::vector<double>& z,
                        const std::vector<std::vector<double>>& pool,
                        const std::vector<double>& weights) {
    if (pool.size() != weights.size())
        fail("mutual_info_diag: pool size " + std::to_string(pool.size()) +
             " != weight count " + std::to_string(weights.size()));
    double wsum = 0;
    for (double w : weights) wsum += w;
    if (std::fabs(wsum - 1.0) > 1e-4)
        fail("mutual_info_diag: weights sum to " + std::to_string(wsum) + ", expected 1");
    double num = 0, den = 0;
    for (std::size_t j = 0; j < pool.size(); ++j) {
        const double e = std::exp(density_ratio(cfg, z, pool[j]));
        num += weights[j] * e;
        den += e;
    }
    return std::log(num / den);
}

Var density_matrix_on_tape(Tape& tape, Var anchors, Var pool, const DensityCfg& cfg,
                           Var inv_T) {
    const int n = tape.shape(anchors)[0];
    const int m = tape.shape(pool)[0];
    if (cfg.kind == DensityKind::kAbsClamp) {
        Var tiled_a = tape.matmul(anchors, tape.constant(Tensor::full({1, m}, 1.0f)));
        Var tiled_p =
            tape.matmul(tape.constant(Tensor::full({n, 1}, 1.0f)), pool, false, true);
        Var diff = tape.abs(tape.add(tiled_a, tape.negate(tiled_p)));
        return tape.negate(tape.clamp_max(diff, cfg.clamp_cap));
    }
    const int d = tape.shape(anchors).back();
    auto inv_norm = [&](Var v, int rows) {
        Var sq = tape.elementwise_mul(v, v);
        Var rs = tape.matmul(sq, tape.constant(Tensor::full({d}, 1.0f)));
        return tape.reshape(tape.exp(tape.scale(tape.log(rs), -0.5)), {rows, 1});
    };
    Var num = tape.matmul(anchors, pool, false, true);  // [n x m] of dots
    Var outer = tape.matmul(inv_norm(anchors, n), inv_norm(pool, m), false, true);
    Var cos = tape.elementwise_mul(num, outer);
    Var scaled = tape.elementwise_mul(cos, inv_T);
    return cfg.sign == DensitySign::kPaper ? tape.negate(scaled) : scaled;
}

Var density_pairs_on_tape(Tape& tape, Var a, Var b, const DensityCfg& cfg, Var inv_T) {
    const int n = tape.shape(a)[0];
    if (cfg.kind == DensityKind::kAbsClamp) {
        Var diff = tape.abs(tape.add(a, tape.negate(b)));
        if (tape.shape(a).back() > 1)
            diff = tape.matmul(diff, tape.constant(Tensor::full({tape.shape(a).back()}, 1.0f)));
        Var f = tape.negate(tape.clamp_max(diff, cfg.clamp_cap));
        return tape.reshape(f, {n});
    }
    Var cos = tape.cosine_similarity_rows(a, b);  // [n]
    Var scaled = tape.elementwise_mul(cos, inv_T);
    return cfg.sign == DensitySign::kPaper ? tape.negate(scaled) : scaled;
}

Var infonce_weighted_rows(Tape& tape, Var f_pos, Var f_matrix, Var weights) {
    const int m = tape.shape(f_matrix).back();
    Var den = tape.matmul(tape.elementwise_mul(weights, tape.exp(f_matrix)),
                          tape.constant(Tensor::full({m}, 1.0f)));
    return tape.add(tape.negate(f_pos), tape.log(den));
}

Var infonce_plain_rows(Tape& tape, Var f_pos, Var f_matrix) {
    const int m = tape.shape(f_matrix).back();
    Var den = tape.matmul(tape.exp(f_matrix), tape.constant(Tensor::full({m}, 1.0f)));
    return tape.add(tape.negate(f_pos), tape.log(den));
}

Var weighted_denominator_mean(Tape& tape, Var weights, Var f_matrix) {
    const int n = tape.shape(f_matrix)[0];
    const int m = tape.shape(f_matrix).back();
    Var den = tape.matmul(tape.elementwise_mul(weights, tape.exp(f_matrix)),
                          tape.constant(Tensor::full({m}, 1.0f)));
    return tape.scale(tape.sum(tape.log(den)), 1.0 / n);
}

namespace {

void validate_group(const BhnModel& model, Group group) {
    if (model.spec.group != group)
        fail(std::string("minimax_step: model was built for group ") +
             group_name(model.spec.group) + ", step requested " + group_name(group));
    if (group != Group::kControl1 && !model.attention)
        fail("minimax_step: model has no attention network");
    if (group == Group::kControl1 && model.attention)
        fail("minimax_step: control1 model must not carry an attention network");
}

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0;
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

/// Eq.-8 diagnostic from detached weight and density values.
double mi_from_values(const Tensor& w, const Tensor& f) {
    const int n = f.shape[0], m = f.shape[1];
    double acc = 0;
    for (int j = 0; j < n; ++j) {
        double num = 0, den = 0;
        for (int k = 0; k < m; ++k) {
            const double e = std::exp(static_cast<double>(f.data[static_cast<std::size_t>(j) * m + k]));
            num += w.data[static_cast<std::size_t>(j) * m + k] * e;
            den += e;
        }
        acc += std::log(num / den);
    }
    return acc / n;
}

}  // namespace

LossReport minimax_step_image(BhnModel& model, const ImageBatch& batch, Group group,
                              Sgd& cortex_opt, Sgd* att_opt, Rng& dropout_rng,
                              const DensityCfg& cfg) {
    validate_group(model, group);
    const int n = batch.view_a.shape[0];
    if (n < 2) fail("minimax_step: batch of " + std::to_string(n) + " has no negatives");
    const int units = model.spec.n_units;
    const bool with_attention = group != Group::kControl1;

    // (1) cortex forward on both views
    Tape tc;
    Var va = tc.constant(batch.view_a);
    Var vb = tc.constant(batch.view_b);
    std::vector<Var> za = model.cortex.forward_image(tc, va, true);
    std::vector<Var> zb = model.cortex.forward_image(tc, vb, true);

    // (2) attention weights from detached anchor representations
    Tape ta;
    std::vector<Var> w_vars(static_cast<std::size_t>(units));
    std::vector<Tensor> w_vals;
    w_vals.reserve(static_cast<std::size_t>(units));
    if (with_attention) {
        std::vector<Tensor> za_vals;
        za_vals.reserve(static_cast<std::size_t>(units));
        for (Var z : za) za_vals.push_back(tc.value(z));
        auto fwd = model.attention->forward(ta, za_vals, dropout_rng, true);
        Var inv_tau = model.attention->inv_tau(ta, true);
        for (int i = 0; i < units; ++i) {
            w_vars[static_cast<std::size_t>(i)] = attention_weights_on_tape(
                ta, fwd.keys[static_cast<std::size_t>(i)], fwd.keys[static_cast<std::size_t>(i)],
                inv_tau, SimilarityKind::kAbsolute, i);
            w_vals.push_back(ta.value(w_vars[static_cast<std::size_t>(i)]));
        }
    }

    // (3) cortex loss with weights held constant
    LossReport rep;
    rep.group = group;
    Var inv_T{};  // unused by the abs-clamp density
    std::vector<Tensor> f_vals;
    f_vals.reserve(static_cast<std::size_t>(units));
    Var total{};
    for (int i = 0; i < units; ++i) {
        Var f_pos = density_pairs_on_tape(tc, za[static_cast<std::size_t>(i)],
                                          zb[static_cast<std::size_t>(i)], cfg, inv_T);
        Var f_mat = density_matrix_on_tape(tc, za[static_cast<std::size_t>(i)],
                                           zb[static_cast<std::size_t>(i)], cfg, inv_T);
        f_vals.push_back(tc.value(f_mat));
        Var rows = with_attention
                       ? infonce_weighted_rows(tc, f_pos, f_mat,
                                               tc.constant(w_vals[static_cast<std::size_t>(i)]))
                       : infonce_plain_rows(tc, f_pos, f_mat);
        Var unit_loss = tc.scale(tc.sum(rows), 1.0 / n);
        rep.unit_loss.push_back(static_cast<double>(tc.data(unit_loss)[0]));
        total = i == 0 ? unit_loss : tc.add(total, unit_loss);
    }
    rep.total = 0;
    for (double l : rep.unit_loss) rep.total += l;
    tc.backward(total);
    cortex_opt.step(model.cortex_parameters());

    // (4) attention ascent on the frozen densities
    if (with_attention) {
        Var att_total{};
        for (int i = 0; i < units; ++i) {
            Var f_const = ta.constant(f_vals[static_cast<std::size_t>(i)]);
            Var term = weighted_denominator_mean(ta, w_vars[static_cast<std::size_t>(i)], f_const);
            att_total = i == 0 ? term : ta.add(att_total, term);
            rep.unit_mi.push_back(mi_from_values(w_vals[static_cast<std::size_t>(i)],
                                                 f_vals[static_cast<std::size_t>(i)]));
        }
        if (att_opt) {
            ta.backward(ta.negate(att_total));
            att_opt->step(model.attention_parameters());
        }
        rep.mi_mean = mean_of(rep.unit_mi);
        rep.tau = std::exp(static_cast<double>(model.attention->log_tau.value.data[0]));
    }
    return rep;
}

VideoStepResult minimax_step_video(BhnModel& model, const VideoStepInputs& in, Group group,
                                   Adam& cortex_opt, Adam* att_opt, const DensityCfg& cfg) {
    validate_group(model, group);
    const int n = in.window.shape[0];
    if (n < 2) fail("minimax_step: batch of " + std::to_string(n) + " has no negatives");
    const int units = model.spec.n_units;
    const bool with_attention = group != Group::kControl1;
    if (static_cast<int>(in.gru_in_prev.size()) != units ||
        static_cast<int>(in.hidden_prev.size()) != units)
        fail("minimax_step: per-unit history does not match the unit count");

    VideoStepResult out;

    // (1) cortex forward: z_t plus the recomputed aggregator step at s
    Tape tc;
    Var window = tc.constant(in.window);
    std::vector<Var> z_t = model.cortex.encode_video(tc, window, true);
    std::vector<Var> c_s(static_cast<std::size_t>(units));
    for (int i = 0; i < units; ++i) {
        auto& unit = model.cortex.units[static_cast<std::size_t>(i)];
        auto step = unit.aggregate(tc, tc.constant(in.gru_in_prev[static_cast<std::size_t>(i)]),
                                   tc.constant(in.hidden_prev[static_cast<std::size_t>(i)]), true);
        c_s[static_cast<std::size_t>(i)] = step.c;
    }
    for (int i = 0; i < units; ++i) {
        out.z_t.push_back(tc.value(z_t[static_cast<std::size_t>(i)]));
        out.c_s.push_back(tc.value(c_s[static_cast<std::size_t>(i)]));
    }

    // (2) attention weights from the detached contexts
    Tape ta;
    std::vector<Var> w_vars(static_cast<std::size_t>(units));
    std::vector<Tensor> w_vals;
    if (with_attention) {
        Rng unused(0);
        auto fwd = model.attention->forward(ta, out.c_s, unused, true);
        Var inv_tau = model.attention->inv_tau(ta, true);
        for (int i = 0; i < units; ++i) {
            w_vars[static_cast<std::size_t>(i)] = attention_weights_on_tape(
                ta, fwd.keys[static_cast<std::size_t>(i)], fwd.keys[static_cast<std::size_t>(i)],
                inv_tau, SimilarityKind::kCosine, i);
            w_vals.push_back(ta.value(w_vars[static_cast<std::size_t>(i)]));
        }
        for (int i = 0; i < units; ++i)
            out.e_s.push_back(expectation(w_vals[static_cast<std::size_t>(i)],
                                          out.z_t[static_cast<std::size_t>(i)]));
    }

    // (3) cortex loss with weights held constant
    LossReport rep;
    rep.group = group;
    Var inv_T = tc.exp(tc.negate(tc.param(model.cortex.log_T)));
    std::vector<Tensor> f_vals;
    Var total{};
    for (int i = 0; i < units; ++i) {
        Var f_pos = density_pairs_on_tape(tc, z_t[static_cast<std::size_t>(i)],
                                          c_s[static_cast<std::size_t>(i)], cfg, inv_T);
        Var f_mat = density_matrix_on_tape(tc, c_s[static_cast<std::size_t>(i)],
                                           z_t[static_cast<std::size_t>(i)], cfg, inv_T);
        f_vals.push_back(tc.value(f_mat));
        Var rows = with_attention
                       ? infonce_weighted_rows(tc, f_pos, f_mat,
                                               tc.constant(w_vals[static_cast<std::size_t>(i)]))
                       : infonce_plain_rows(tc, f_pos, f_mat);
        Var unit_loss = tc.scale(tc.sum(rows), 1.0 / n);
        rep.unit_loss.push_back(static_cast<double>(tc.data(unit_loss)[0]));
        total = i == 0 ? unit_loss : tc.add(total, unit_loss);
    }
    for (double l : rep.unit_loss) rep.total += l;
    tc.backward(total);
    cortex_opt.step(model.cortex_parameters());
    rep.T = std::exp(static_cast<double>(model.cortex.log_T.value.data[0]));

    // (4) attention ascent on the frozen densities
    if (with_attention) {
        Var att_total{};
        for (int i = 0; i < units; ++i) {
            Var f_const = ta.constant(f_vals[static_cast<std::size_t>(i)]);
            Var term = weighted_denominator_mean(ta, w_vars[static_cast<std::size_t>(i)], f_const);
            att_total = i == 0 ? term : ta.add(att_total, term);
            rep.unit_mi.push_back(mi_from_values(w_vals[static_cast<std::size_t>(i)],
                                                 f_vals[static_cast<std::size_t>(i)]));
        }
        if (att_opt) {
            ta.backward(ta.negate(att_total));
            att_opt->step(model.attention_parameters());
        }
        rep.mi_mean = mean_of(rep.unit_mi);
        rep.tau = std::exp(static_cast<double>(model.attention->log_tau.value.data[0]));
    }
    out.report = std::move(rep);
    return out;
}

}  // namespace bhn
