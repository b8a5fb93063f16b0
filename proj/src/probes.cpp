#include "bhn/probes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace bhn {

double probe_score_formula(double mse) { return (0.0225 - mse) * 255.0; }

DeconvProbe DeconvProbe::make(int rep_dim, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "probe-init"));
    DeconvProbe p;
    p.input = Linear("probe.in", rep_dim, 16 * 12 * 12, true, rng);
    auto kernel = [&](const char* name, int ci, int co) {
        Parameter w(std::string("probe.") + name, Tensor::zeros({ci, co, 4, 4}));
        init_uniform_fan_in(w.value, ci * 16, rng);
        return w;
    };
    p.w1 = kernel("w1", 16, 8);
    p.w2 = kernel("w2", 8, 4);
    p.w3 = kernel("w3", 4, 1);
    return p;
}

Var DeconvProbe::forward(Tape& tape, Var reps, bool bind) {
    const int n = tape.shape(reps)[0];
    Var h = bind ? input.forward(tape, reps) : input.forward_frozen(tape, reps);
    Var x = tape.reshape(h, {n, 16, 12, 12});
    auto stage = [&](Var v, Parameter& w) {
        Var k = bind ? tape.param(w) : tape.constant(w.value);
        return tape.transposed_conv2d(v, k, 2, 1);
    };
    x = tape.leaky_relu(stage(x, w1));
    x = tape.leaky_relu(stage(x, w2));
    x = tape.tanh(stage(x, w3));  // [n, 1, 96, 96]
    return tape.reshape(x, {n, 96 * 96});
}

std::vector<Parameter*> DeconvProbe::parameters() {
    auto ps = input.parameters();
    ps.push_back(&w1);
    ps.push_back(&w2);
    ps.push_back(&w3);
    return ps;
}

ProbeResult train_probe(const Tensor& reps, const Tensor& targets, const ProbeCfg& cfg) {
    if (reps.shape.size() != 2 || targets.shape.size() != 2 ||
        reps.shape[0] != targets.shape[0])
        fail("train_probe: reps " + shape_str(reps.shape) + " vs targets " +
             shape_str(targets.shape));
    if (targets.shape[1] != 96 * 96) fail("train_probe: targets must be [M x 9216]");
    const int m = reps.shape[0];
    const int d = reps.shape[1];
    const int n_train = std::max(1, static_cast<int>(m * cfg.train_fraction));
    if (n_train >= m) fail("train_probe: no held-out rows from " + std::to_string(m));

    Rng rng(derive_seed(cfg.seed, "probe-split"));
    std::vector<int> order(static_cast<std::size_t>(m));
    std::iota(order.begin(), order.end(), 0);
    for (int i = m - 1; i > 0; --i)
        std::swap(order[static_cast<std::size_t>(i)],
                  order[static_cast<std::size_t>(rng.uniform_int(0, i))]);

    auto gather = [&](int lo, int hi, const Tensor& src) {
        const int w = src.shape[1];
        Tensor out = Tensor::zeros({hi - lo, w});
        for (int r = lo; r < hi; ++r)
            std::copy_n(src.data.data() + static_cast<std::size_t>(order[static_cast<std::size_t>(r)]) * w,
                        w, out.data.data() + static_cast<std::size_t>(r - lo) * w);
        return out;
    };
    Tensor train_x = gather(0, n_train, reps);
    Tensor train_y = gather(0, n_train, targets);
    Tensor held_x = gather(n_train, m, reps);
    Tensor held_y = gather(n_train, m, targets);

    ProbeResult res;
    res.probe = DeconvProbe::make(d, cfg.seed);
    AdamConfig ac;
    ac.lr = cfg.lr;
    Adam opt(ac);
    Rng shuffle_rng(derive_seed(cfg.seed, "probe-shuffle"));
    std::vector<int> idx(static_cast<std::size_t>(n_train));
    std::iota(idx.begin(), idx.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int i = n_train - 1; i > 0; --i)
            std::swap(idx[static_cast<std::size_t>(i)],
                      idx[static_cast<std::size_t>(shuffle_rng.uniform_int(0, i))]);
        for (int start = 0; start + 1 < n_train; start += cfg.batch) {
            const int stop = std::min(n_train, start + cfg.batch);
            Tensor bx = Tensor::zeros({stop - start, d});
            Tensor by = Tensor::zeros({stop - start, 96 * 96});
            for (int r = start; r < stop; ++r) {
                const int src = idx[static_cast<std::size_t>(r)];
                std::copy_n(train_x.data.data() + static_cast<std::size_t>(src) * d, d,
                            bx.data.data() + static_cast<std::size_t>(r - start) * d);
                std::copy_n(train_y.data.data() + static_cast<std::size_t>(src) * 96 * 96,
                            96 * 96,
                            by.data.data() + static_cast<std::size_t>(r - start) * 96 * 96);
            }
            Tape tape;
            Var out = res.probe.forward(tape, tape.constant(std::move(bx)), true);
            Var loss = tape.mean_square_error(out, tape.constant(std::move(by)));
            tape.backward(loss);
            opt.step(res.probe.parameters());
        }
    }
    res.held_out = probe_score(res.probe, held_x, held_y);
    return res;
}

ProbeScore probe_score(DeconvProbe& probe, const Tensor& reps, const Tensor& targets) {
    if (reps.shape.empty() || reps.shape[0] == 0) fail("probe_score: empty evaluation set");
    if (reps.shape[0] != targets.shape[0])
        fail("probe_score: reps " + shape_str(reps.shape) + " vs targets " +
             shape_str(targets.shape));
    const int m = reps.shape[0];
    double acc = 0;
    const int chunk = 64;
    for (int start = 0; start < m; start += chunk) {
        const int stop = std::min(m, start + chunk);
        const int d = reps.shape[1];
        Tensor bx = Tensor::zeros({stop - start, d});
        std::copy_n(reps.data.data() + static_cast<std::size_t>(start) * d,
                    static_cast<std::size_t>(stop - start) * d, bx.data.data());
        Tape tape;
        Var out = probe.forward(tape, tape.constant(std::move(bx)), false);
        const auto& o = tape.data(out);
        for (int r = start; r < stop; ++r)
            for (int j = 0; j < 96 * 96; ++j) {
                const double diff =
                    static_cast<double>(o[static_cast<std::size_t>(r - start) * 96 * 96 + j]) -
                    targets.data[static_cast<std::size_t>(r) * 96 * 96 + j];
                acc += diff * diff;
            }
    }
    ProbeScore s;
    s.mse = acc / (static_cast<double>(m) * 96 * 96);
    s.score = probe_score_formula(s.mse);
    return s;
}

namespace {

bool standardize(std::vector<float>& v) {
    double mean = 0;
    for (float x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0;
    for (float x : v) {
        const double d = x - mean;
        var += d * d;
    }
    var /= static_cast<double>(v.size());
    if (var < 1e-12) return false;
    const double inv = 1.0 / std::sqrt(var);
    for (auto& x : v) x = static_cast<float>((x - mean) * inv);
    return true;
}

}  // namespace

Tensor visualize_unit(BhnModel& model, int unit, int iterations, double step_size, Rng& rng) {
    if (model.spec.mode != TaskMode::kImage)
        fail("visualize_unit: defined for the image task only");
    if (unit < 0 || unit >= model.spec.n_units)
        fail("visualize_unit: unit " + std::to_string(unit) + " out of range");
    const int dim = model.spec.input_dim;
    std::vector<float> x(static_cast<std::size_t>(dim));
    for (auto& v : x) v = static_cast<float>(rng.normal(0.0, 1.0));
    standardize(x);

    auto& cu = model.cortex.units[static_cast<std::size_t>(unit)];
    auto eval = [&](const std::vector<float>& in, std::vector<float>* grad_out) {
        Tape tape;
        Var leaf = tape.leaf(Tensor({1, dim}, in), grad_out != nullptr);
        Var z = cu.encode(tape, leaf, false);
        if (grad_out) {
            tape.backward(z);
            *grad_out = tape.grad(leaf);
        }
        return static_cast<double>(tape.data(z)[0]);
    };

    std::vector<float> grad;
    double best = eval(x, nullptr);
    double step = step_size;
    for (int it = 0; it < iterations; ++it) {
        eval(x, &grad);
        bool accepted = false;
        while (step > 1e-6) {
            std::vector<float> cand = x;
            for (std::size_t i = 0; i < cand.size(); ++i)
                cand[i] += static_cast<float>(step) * grad[i];
            if (!standardize(cand)) {
                step *= 0.5;
                continue;
            }
            const double v = eval(cand, nullptr);
            if (v >= best) {
                x = std::move(cand);
                best = v;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;  // no uphill move left at the smallest step
    }
    const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(dim))));
    return Tensor({side, side}, std::move(x));
}

}  // namespace bhn
