#pragma once

#include <string>
#include <vector>

#include "bhn/rng.hpp"
#include "bhn/tape.hpp"

namespace bhn {

/// Affine (or pure linear, when bias-free) map. Weight is [out x in];
/// forward on a batch computes x * W^T (+ b).
template <typename T>
struct LinearT {
    ParameterT<T> weight;
    ParameterT<T> bias;  // empty tensor when the layer is unbiased
    bool biased = true;

    LinearT() = default;
    LinearT(const std::string& name, int in, int out, bool with_bias, Rng& rng)
        : biased(with_bias) {
        weight = ParameterT<T>(name + ".w", TensorT<T>::zeros({out, in}));
        init_uniform_fan_in(weight.value, in, rng);
        if (with_bias) {
            bias = ParameterT<T>(name + ".b", TensorT<T>::zeros({out}));
            init_uniform_fan_in(bias.value, in, rng);
        }
    }

    int in_features() const { return weight.value.shape[1]; }
    int out_features() const { return weight.value.shape[0]; }

    Var forward(TapeT<T>& tape, Var x) {
        if (last_dim_of(tape.shape(x)) != in_features())
            fail("linear '" + weight.name + "': input width " +
                 std::to_string(last_dim_of(tape.shape(x))) + " != " +
                 std::to_string(in_features()));
        Var w = tape.param(weight);
        Var y = tape.matmul(x, w, false, true);
        if (biased) y = tape.add(y, tape.param(bias));
        return y;
    }

    /// Forward with frozen weights (no parameter binding); used where a
    /// value is needed but no gradient may reach this layer.
    Var forward_frozen(TapeT<T>& tape, Var x) const {
        Var w = tape.constant(weight.value);
        Var y = tape.matmul(x, w, false, true);
        if (biased) y = tape.add(y, tape.constant(bias.value));
        return y;
    }

    std::vector<ParameterT<T>*> parameters() {
        std::vector<ParameterT<T>*> ps = {&weight};
        if (biased) ps.push_back(&bias);
        return ps;
    }

private:
    static int last_dim_of(const Shape& s) { return s.empty() ? 1 : s.back(); }
};

using Linear = LinearT<float>;

/// GRU cell, reset gate applied inside the candidate:
///   r = sig(W_r x + U_r h + b_r)
///   u = sig(W_u x + U_u h + b_u)
///   n = tanh(W_n x + U_n (r*h) + b_n)
///   h' = (1-u)*n + u*h
template <typename T>
struct GruCellT {
    ParameterT<T> w_r, w_u, w_n;  // [hidden x in]
    ParameterT<T> u_r, u_u, u_n;  // [hidden x hidden]
    ParameterT<T> b_r, b_u, b_n;  // [hidden]

    GruCellT() = default;
    GruCellT(const std::string& name, int in, int hidden, Rng& rng) {
        auto mat = [&](const char* tag, int rows, int cols, int fan) {
            ParameterT<T> p(name + "." + tag, TensorT<T>::zeros({rows, cols}));
            init_uniform_fan_in(p.value, fan, rng);
            return p;
        };
        auto vec = [&](const char* tag, int rows, int fan) {
            ParameterT<T> p(name + "." + tag, TensorT<T>::zeros({rows}));
            init_uniform_fan_in(p.value, fan, rng);
            return p;
        };
        w_r = mat("w_r", hidden, in, in);
        w_u = mat("w_u", hidden, in, in);
        w_n = mat("w_n", hidden, in, in);
        u_r = mat("u_r", hidden, hidden, hidden);
        u_u = mat("u_u", hidden, hidden, hidden);
        u_n = mat("u_n", hidden, hidden, hidden);
        b_r = vec("b_r", hidden, hidden);
        b_u = vec("b_u", hidden, hidden);
        b_n = vec("b_n", hidden, hidden);
    }

    int input_size() const { return w_r.value.shape[1]; }
    int hidden_size() const { return w_r.value.shape[0]; }

    /// One step: x is [N x in] (or [in]), h is [N x hidden]; returns h'.
    Var step(TapeT<T>& tape, Var x, Var h) {
        auto gate = [&](ParameterT<T>& w, ParameterT<T>& u, ParameterT<T>& b, Var hh) {
            Var s = tape.add(tape.matmul(x, tape.param(w), false, true),
                             tape.matmul(hh, tape.param(u), false, true));
            return tape.add(s, tape.param(b));
        };
        Var r = tape.sigmoid(gate(w_r, u_r, b_r, h));
        Var u = tape.sigmoid(gate(w_u, u_u, b_u, h));
        Var rh = tape.elementwise_mul(r, h);
        Var n = tape.tanh(gate(w_n, u_n, b_n, rh));
        Var keep = tape.add(tape.negate(u), tape.constant(TensorT<T>::scalar(T(1))));
        return tape.add(tape.elementwise_mul(keep, n), tape.elementwise_mul(u, h));
    }

    std::vector<ParameterT<T>*> parameters() {
        return {&w_r, &w_u, &w_n, &u_r, &u_u, &u_n, &b_r, &b_u, &b_n};
    }
};

using GruCell = GruCellT<float>;

/// Drops whole unit output vectors. In train mode each unit is zeroed
/// i.i.d. with probability p and survivors are scaled by 1/(1-p), so the
/// expected output equals the input and eval mode needs no rescale.
struct UnitDropout {
    double p = 0.0;
    bool train = true;
    std::vector<bool> last_mask;  // true = dropped; recorded per apply()

    UnitDropout() = default;
    UnitDropout(double prob, bool training) : p(prob), train(training) {
        if (prob < 0.0 || prob >= 1.0)
            fail("unit_dropout: p must be in [0,1), got " + std::to_string(prob));
    }

    /// Applies the mask on-tape to a list of per-unit vars.
    template <typename T>
    std::vector<Var> apply(TapeT<T>& tape, const std::vector<Var>& units, Rng& rng) {
        last_mask.assign(units.size(), false);
        if (!train || p == 0.0) return units;
        std::vector<Var> out(units.size());
        const double keep_scale = 1.0 / (1.0 - p);
        for (std::size_t i = 0; i < units.size(); ++i) {
            if (rng.bernoulli(p)) {
                last_mask[i] = true;
                out[i] = tape.scale(units[i], 0.0);
            } else {
                out[i] = tape.scale(units[i], keep_scale);
            }
        }
        return out;
    }

    /// Plain-tensor variant for detached inputs.
    template <typename T>
    std::vector<TensorT<T>> apply_values(const std::vector<TensorT<T>>& units, Rng& rng) {
        last_mask.assign(units.size(), false);
        std::vector<TensorT<T>> out = units;
        if (!train || p == 0.0) return out;
        const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
        for (std::size_t i = 0; i < units.size(); ++i) {
            if (rng.bernoulli(p)) {
                last_mask[i] = true;
                std::fill(out[i].data.begin(), out[i].data.end(), T(0));
            } else {
                for (auto& v : out[i].data) v *= keep_scale;
            }
        }
        return out;
    }
};

}  // namespace bhn
