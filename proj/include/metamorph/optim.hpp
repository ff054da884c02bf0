#pragma once

#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "metamorph/errors.hpp"
#include "metamorph/tensor.hpp"

namespace metamorph {

// AdamW with decoupled weight decay: the decay is applied directly to the
// parameter, scaled by the learning rate, and never enters the moments.
template <typename T>
struct AdamWOptions {
    T learning_rate = T(1e-3);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    T weight_decay = T(0);
};

template <typename T>
class AdamWT {
public:
    using Options = AdamWOptions<T>;

    explicit AdamWT(Options opts = {}) : opts_(opts) {}

    void add_param(const TensorT<T>& p) {
        auto* node = p.node();
        if (slots_.count(node)) return;
        Slot slot;
        slot.first_moment.assign(p.data().size(), T(0));
        slot.second_moment.assign(p.data().size(), T(0));
        slots_.emplace(node, std::move(slot));
        params_.push_back(p);
    }

    void add_params(const std::vector<TensorT<T>>& ps) {
        for (const auto& p : ps) add_param(p);
    }

    void set_learning_rate(T lr) { opts_.learning_rate = lr; }
    T learning_rate() const { return opts_.learning_rate; }
    const Options& options() const { return opts_; }
    size_t num_params() const { return params_.size(); }
    const std::vector<TensorT<T>>& params() const { return params_; }

    // One AdamW update over every registered parameter that has a gradient.
    void step() {
        for (auto& p : params_) {
            if (!p.has_grad()) continue;
            Slot& slot = slots_.at(p.node());
            slot.step_count += 1;
            T bc1 = T(1) - T(std::pow(double(opts_.beta1), double(slot.step_count)));
            T bc2 = T(1) - T(std::pow(double(opts_.beta2), double(slot.step_count)));
            auto& data = p.data();
            auto& grad = p.grad();
            for (size_t i = 0; i < data.size(); ++i) {
                T g = grad[i];
                slot.first_moment[i] = opts_.beta1 * slot.first_moment[i] + (T(1) - opts_.beta1) * g;
                slot.second_moment[i] =
                    opts_.beta2 * slot.second_moment[i] + (T(1) - opts_.beta2) * g * g;
                T mhat = slot.first_moment[i] / bc1;
                T vhat = slot.second_moment[i] / bc2;
                data[i] -= opts_.learning_rate *
                           (mhat / (T(std::sqrt(double(vhat))) + opts_.eps) +
                            opts_.weight_decay * data[i]);
            }
            if (numeric_checks_enabled() && !p.all_finite())
                throw NumericError("adamw_step: non-finite parameter after update");
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void scale_grads(T factor) {
        for (auto& p : params_) {
            if (!p.has_grad()) continue;
            for (auto& g : p.grad()) g *= factor;
        }
    }

    uint64_t step_count(const TensorT<T>& p) const {
        auto it = slots_.find(p.node());
        return it == slots_.end() ? 0 : it->second.step_count;
    }

private:
    struct Slot {
        std::vector<T> first_moment;
        std::vector<T> second_moment;
        uint64_t step_count = 0;
    };

    Options opts_;
    std::unordered_map<detail::Node<T>*, Slot> slots_;
    std::vector<TensorT<T>> params_;
};

using AdamW = AdamWT<float>;

}  // namespace metamorph
