#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "bhn/rng.hpp"
#include "bhn/tensor.hpp"

namespace bhn {

/// A named trainable tensor. The gradient accumulator is flushed into by
/// Tape::backward and consumed (then cleared) by an optimizer step.
template <typename T>
struct ParameterT {
    std::string name;
    TensorT<T> value;
    TensorT<T> grad;
    bool has_grad = false;
    bool decay = true;  // temperatures are excluded from weight decay

    ParameterT() = default;
    ParameterT(std::string n, TensorT<T> v)
        : name(std::move(n)), value(std::move(v)), grad(TensorT<T>::zeros(value.shape)) {}

    void clear_grad() {
        std::fill(grad.data.begin(), grad.data.end(), T(0));
        has_grad = false;
    }
};

using Parameter = ParameterT<float>;

/// Fills a weight matrix with the fan-in uniform init, seeded.
template <typename T>
void init_uniform_fan_in(TensorT<T>& w, int fan_in, Rng& rng) {
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : w.data) v = static_cast<T>(rng.uniform(-bound, bound));
}

struct SgdConfig {
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-3;
};

/// SGD with momentum:  v <- momentum*v + (g + wd*p);  p <- p - lr*v.
template <typename T>
class SgdT {
public:
    explicit SgdT(SgdConfig cfg) : cfg_(cfg) {}

    void step(const std::vector<ParameterT<T>*>& params) {
        if (velocity_.size() != params.size()) {
            velocity_.clear();
            for (auto* p : params) velocity_.push_back(TensorT<T>::zeros(p->value.shape));
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            ParameterT<T>& p = *params[i];
            if (!p.has_grad) fail("sgd_step: no gradient for parameter '" + p.name + "'");
            const T wd = static_cast<T>(p.decay ? cfg_.weight_decay : 0.0);
            const T mom = static_cast<T>(cfg_.momentum);
            const T lr = static_cast<T>(cfg_.lr);
            auto& v = velocity_[i].data;
            for (std::size_t j = 0; j < v.size(); ++j) {
                v[j] = mom * v[j] + (p.grad.data[j] + wd * p.value.data[j]);
                p.value.data[j] -= lr * v[j];
            }
            p.clear_grad();
        }
        ++step_count_;
    }

    std::int64_t step_count() const { return step_count_; }

private:
    SgdConfig cfg_;
    std::vector<TensorT<T>> velocity_;
    std::int64_t step_count_ = 0;
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

template <typename T>
class AdamT {
public:
    explicit AdamT(AdamConfig cfg) : cfg_(cfg) {}

    void step(const std::vector<ParameterT<T>*>& params) {
        if (m_.size() != params.size()) {
            m_.clear();
            v_.clear();
            for (auto* p : params) {
                m_.push_back(TensorT<T>::zeros(p->value.shape));
                v_.push_back(TensorT<T>::zeros(p->value.shape));
            }
        }
        ++step_count_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            ParameterT<T>& p = *params[i];
            if (!p.has_grad) fail("adam_step: no gradient for parameter '" + p.name + "'");
            const T wd = static_cast<T>(p.decay ? cfg_.weight_decay : 0.0);
            for (std::size_t j = 0; j < p.value.data.size(); ++j) {
                const double g = static_cast<double>(p.grad.data[j]) + wd * p.value.data[j];
                const double m_new = cfg_.beta1 * m_[i].data[j] + (1.0 - cfg_.beta1) * g;
                const double v_new = cfg_.beta2 * v_[i].data[j] + (1.0 - cfg_.beta2) * g * g;
                m_[i].data[j] = static_cast<T>(m_new);
                v_[i].data[j] = static_cast<T>(v_new);
                const double m_hat = m_new / bc1;
                const double v_hat = v_new / bc2;
                p.value.data[j] -= static_cast<T>(cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps));
            }
            p.clear_grad();
        }
    }

    std::int64_t step_count() const { return step_count_; }

private:
    AdamConfig cfg_;
    std::vector<TensorT<T>> m_, v_;
    std::int64_t step_count_ = 0;
};

using Sgd = SgdT<float>;
using Adam = AdamT<float>;

}  // namespace bhn
