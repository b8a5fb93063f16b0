#pragma once

// Randomized finite-difference checks for every primitive and layer.
// Shared by the unit tests and the acceptance suite; all reference
// gradients come from fd_check.hpp, never from the tape.

#include <functional>
#include <string>
#include <vector>

#include "bhn/nets.hpp"
#include "bhn/tape.hpp"
#include "fd_check.hpp"

namespace bhn::testing {

struct OracleCase {
    std::string name;
    double max_rel_err = 0;
    long checked = 0;
};

struct OracleResult {
    std::vector<OracleCase> cases;
    double max_rel_err = 0;
    long checked = 0;
};

namespace detail {

using DTape = TapeT<double>;
using DT = TensorT<double>;
using Builder = std::function<Var(DTape&, const std::vector<Var>&)>;

inline void run_case(OracleResult& res, const std::string& name, int instances,
                     std::uint64_t seed, const std::function<std::vector<DT>(Rng&)>& sample,
                     const Builder& build) {
    OracleCase oc;
    oc.name = name;
    Rng rng(derive_seed(seed, "fd-" + name));
    for (int inst = 0; inst < instances; ++inst) {
        std::vector<DT> inputs = sample(rng);
        // one extra constant weighting tensor so output grads are non-uniform
        auto eval = [&](const std::vector<DT>& ins) {
            DTape t;
            t.check_finite = false;
            std::vector<Var> vs;
            vs.reserve(ins.size());
            for (const auto& in : ins) vs.push_back(t.leaf(in, false));
            return static_cast<double>(t.data(build(t, vs))[0]);
        };
        DTape t;
        t.check_finite = false;
        std::vector<Var> vs;
        vs.reserve(inputs.size());
        for (const auto& in : inputs) vs.push_back(t.leaf(in, true));
        Var root = build(t, vs);
        t.backward(root);
        std::vector<DT> analytic;
        analytic.reserve(inputs.size());
        for (Var v : vs) analytic.push_back(t.grad_tensor(v));
        FdReport rep = fd_gradients(eval, inputs, analytic);
        oc.max_rel_err = std::max(oc.max_rel_err, rep.max_rel_err);
        oc.checked += rep.checked;
    }
    res.cases.push_back(oc);
    res.max_rel_err = std::max(res.max_rel_err, oc.max_rel_err);
    res.checked += oc.checked;
}

/// Reduce any output to a scalar against a fixed weighting pattern.
inline Var weighed(DTape& t, Var out) {
    const auto& shape = t.shape(out);
    DT w = DT::zeros(shape);
    double v = 0.35;
    for (auto& x : w.data) {
        x = std::sin(v) + 1.2;
        v += 0.73;
    }
    return t.sum(t.elementwise_mul(out, t.leaf(w)));
}

}  // namespace detail

inline OracleResult run_autodiff_oracle(int instances, std::uint64_t seed) {
    using namespace detail;
    OracleResult res;
    auto one = [&](const char* name, const std::function<std::vector<DT>(Rng&)>& sample,
                   const Builder& build) { run_case(res, name, instances, seed, sample, build); };

    one("matmul_nn",
        [](Rng& r) { return std::vector<DT>{random_tensor({3, 4}, r), random_tensor({4, 2}, r)}; },
        [](DTape& t, const std::vector<Var>& v) { return weighed(t, t.matmul(v[0], v[1])); });
    one("matmul_nt",
        [](Rng& r) { return std::vector<DT>{random_tensor({3, 4}, r), random_tensor({2, 4}, r)}; },
        [](DTape& t, const std::vector<Var>& v) {
            return weighed(t, t.matmul(v[0], v[1], false, true));
        });
    one("matmul_tn",
        [](Rng& r) { return std::vector<DT>{random_tensor({4, 3}, r), random_tensor({4, 2}, r)}; },
        [](DTape& t, const std::vector<Var>& v) {
            return weighed(t, t.matmul(v[0], v[1], true, false));
        });
    one("matmul_tt",
        [](Rng& r) { return std::vector<DT>{random_tensor({4, 3}, r), random_tensor({2, 4}, r)}; },
        [](DTape& t, const std::vector<Var>& v) {
            return weighed(t, t.matmul(v[0], v[1], true, true));
        });
    one("matmul_vec",
        [](Rng& r) { return std::vector<DT>{random_tensor({3, 4}, r), random_tensor({4}, r)}; },
        [](DTape& t, const std::vector<Var>& v) { return weighed(t, t.matmul(v[0], v[1])); });
    one("add",
        [](Rng& r) { return std::vector<DT>{random_tensor({2, 3}, r), random_tensor({2, 3}, r)}; },
        [](DTape& t, const std::vector<Var>& v) { return weighed(t, t.add(v[0], v[1])); });
    one("add_bias",
        [](Rng& r) { return std::vector<DT>{random_tensor({2, 3}, r), random_tensor({3}, r)}; },
        [](DTape& t, const std::vector<Var>& v) { return weighed(t, t.add(v[0], v[1])); });
    one("add_scalar",
        [](Rng& r) { return std::vector<DT>{random_tensor({2, 3}, r), random_tensor({1}, r)}; },
        [](DTape& t, const std::vector<Var>& v) { return weighed(t, t.add(v[0], v[1])); });
    one("scale", [](Rng& r) { return std::vector<DT>{random_tensor({2, 3}, r)}; },
        [](DTape& t, const std::vector<Var>& v) { return weighed(t, t.scale(v[0], -1.7)); });
    one("leaky_relu",
        [](Rng& r) { return std::vector<DT>{random_tensor_avoiding({3, 3}, r, 0.0, 0.05)}; },
        [](DTape& t, const std::vector<Var>& v) { return weighed(t, t.leaky_relu(v[0])); });
    one("sigmoid", [](Rng& r) { return std::vector<DT>{random_tensor({3, 3}, r)}; },
        [](DTape& t, const std::vector<Var>& v) { return weighed(t, t.sigmoid(v[0])); });
    one("tanh", [](Rng& r) { return std::vector<DT>{random_tensor({3, 3}, r)}; },
        [](DTape& t, const std::vector<Var>& v) { return weighed(t, t.tanh(v[0])); });
    one("softmax_lastdim", [](Rng& r) { return std::vector<DT>{random_tensor({3, 4}, r)}; },
        [](DTape& t, const std::vector<Var>& v) { return weighed(t, t.softmax_lastdim(v[0])); });
    one("abs",
        [](Rng& r) { return std::vector<DT>{random_tensor_avoiding({3, 3}, r, 0.0, 0.05)}; },
        [](DTape& t, const std::vector<Var>& v) { return weighed(t, t.abs(v[0])); });
    one("clamp_max",
        [](Rng& r) { return std::vector<DT>{random_tensor_avoiding({3, 3}, r, 0.5, 0.05)}; },
        [](DTape& t, const std::vector<Var>& v) { return weighed(t, t.clamp_max(v[0], 0.5)); });
    one("negate", [](Rng& r) { return std::vector<DT>{random_tensor({3, 3}, r)}; },
        [](DTape& t, const std::vector<Var>& v) { return weighed(t, t.negate(v[0])); });
    one("mean_square_error",
        [](Rng& r) { return std::vector<DT>{random_tensor({2, 4}, r), random_tensor({2, 4}, r)}; },
        [](DTape& t, const std::vector<Var>& v) {
            return t.mean_square_error(v[0], v[1]);
        });
    one("cosine_similarity_rows",
        [](Rng& r) {
            auto a = random_tensor({3, 4}, r);
            auto b = random_tensor({3, 4}, r);
            a.data[0] += 3.0;  // keep row norms comfortably away from zero
            b.data[0] += 3.0;
            return std::vector<DT>{a, b};
        },
        [](DTape& t, const std::vector<Var>& v) {
            return weighed(t, t.cosine_similarity_rows(v[0], v[1]));
        });
    one("concat",
        [](Rng& r) {
            return std::vector<DT>{random_tensor({2, 2}, r), random_tensor({2, 3}, r),
                                   random_tensor({2, 1}, r)};
        },
        [](DTape& t, const std::vector<Var>& v) {
            return weighed(t, t.concat({v[0], v[1], v[2]}));
        });
    one("slice", [](Rng& r) { return std::vector<DT>{random_tensor({2, 5}, r)}; },
        [](DTape& t, const std::vector<Var>& v) { return weighed(t, t.slice(v[0], 1, 4)); });
    one("elementwise_mul",
        [](Rng& r) { return std::vector<DT>{random_tensor({3, 3}, r), random_tensor({3, 3}, r)}; },
        [](DTape& t, const std::vector<Var>& v) {
            return weighed(t, t.elementwise_mul(v[0], v[1]));
        });
    one("elementwise_mul_scalar",
        [](Rng& r) { return std::vector<DT>{random_tensor({3, 3}, r), random_tensor({1}, r)}; },
        [](DTape& t, const std::vector<Var>& v) {
            return weighed(t, t.elementwise_mul(v[0], v[1]));
        });
    one("transposed_conv2d",
        [](Rng& r) {
            return std::vector<DT>{random_tensor({1, 2, 3, 3}, r),
                                   random_tensor({2, 2, 4, 4}, r)};
        },
        [](DTape& t, const std::vector<Var>& v) {
            return weighed(t, t.transposed_conv2d(v[0], v[1], 2, 1));
        });
    one("conv2d_grad_helper",
        [](Rng& r) {
            return std::vector<DT>{random_tensor({1, 2, 6, 6}, r),
                                   random_tensor({3, 2, 4, 4}, r)};
        },
        [](DTape& t, const std::vector<Var>& v) {
            return weighed(t, t.conv2d(v[0], v[1], 2, 1));
        });
    one("log", [](Rng& r) { return std::vector<DT>{random_tensor({3, 3}, r, 0.1, 3.0)}; },
        [](DTape& t, const std::vector<Var>& v) { return weighed(t, t.log(v[0])); });
    one("exp", [](Rng& r) { return std::vector<DT>{random_tensor({3, 3}, r)}; },
        [](DTape& t, const std::vector<Var>& v) { return weighed(t, t.exp(v[0])); });
    one("sum", [](Rng& r) { return std::vector<DT>{random_tensor({3, 3}, r)}; },
        [](DTape& t, const std::vector<Var>& v) { return t.sum(t.elementwise_mul(v[0], v[0])); });
    one("reshape", [](Rng& r) { return std::vector<DT>{random_tensor({2, 6}, r)}; },
        [](DTape& t, const std::vector<Var>& v) {
            return weighed(t, t.reshape(v[0], {3, 4}));
        });

    // ---- layers ----
    one("linear_layer",
        [](Rng& r) {
            return std::vector<DT>{random_tensor({3, 4}, r), random_tensor({3}, r),
                                   random_tensor({2, 4}, r)};
        },
        [](DTape& t, const std::vector<Var>& v) {
            return weighed(t, t.add(t.matmul(v[2], v[0], false, true), v[1]));
        });
    one("gru_cell",
        [](Rng& r) {
            std::vector<DT> ins;
            for (int k = 0; k < 3; ++k) ins.push_back(random_tensor({4, 3}, r, -1, 1));  // W
            for (int k = 0; k < 3; ++k) ins.push_back(random_tensor({4, 4}, r, -1, 1));  // U
            for (int k = 0; k < 3; ++k) ins.push_back(random_tensor({4}, r, -1, 1));     // b
            ins.push_back(random_tensor({2, 3}, r, -1, 1));  // x
            ins.push_back(random_tensor({2, 4}, r, -1, 1));  // h
            return ins;
        },
        [](DTape& t, const std::vector<Var>& v) {
            Var x = v[9], h = v[10];
            auto gate = [&](int wi, Var hh) {
                return t.add(t.add(t.matmul(x, v[static_cast<std::size_t>(wi)], false, true),
                                   t.matmul(hh, v[static_cast<std::size_t>(wi + 3)], false, true)),
                             v[static_cast<std::size_t>(wi + 6)]);
            };
            Var r = t.sigmoid(gate(0, h));
            Var u = t.sigmoid(gate(1, h));
            Var n = t.tanh(gate(2, t.elementwise_mul(r, h)));
            Var keep = t.add(t.negate(u), t.constant(DT::scalar(1.0)));
            Var hn = t.add(t.elementwise_mul(keep, n), t.elementwise_mul(u, h));
            return weighed(t, hn);
        });
    one("softmax_attention_path",
        [](Rng& r) {
            return std::vector<DT>{random_tensor({4, 1}, r), random_tensor({4, 1}, r),
                                   random_tensor({1}, r, 0.2, 1.5),   // inv_tau
                                   random_tensor({4, 2}, r)};         // pool reps
        },
        [](DTape& t, const std::vector<Var>& v) {
            const int n = 4, m = 4;
            Var tiled_a = t.matmul(v[0], t.constant(DT::full({1, m}, 1.0)));
            Var tiled_p = t.matmul(t.constant(DT::full({n, 1}, 1.0)), v[1], false, true);
            Var sim = t.negate(t.abs(t.add(tiled_a, t.negate(tiled_p))));
            Var w = t.softmax_lastdim(t.elementwise_mul(sim, v[2]));
            Var e = t.matmul(w, v[3]);  // expectations over the pool
            return weighed(t, e);
        });
    return res;
}

}  // namespace bhn::testing
