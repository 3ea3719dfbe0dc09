#pragma once

// SGD with momentum, L2 weight decay, and multi-step learning-rate decay.

#include <map>

#include "tensor.hpp"

namespace dskd {

struct OptimSpec {
    double lr0 = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::vector<int> milestones{30, 45, 55};
    double decay_factor = 0.1;

    void validate() const {
        if (lr0 <= 0.0) throw std::invalid_argument("OptimSpec: lr0 must be positive");
        if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("OptimSpec: momentum must be in [0,1)");
        if (weight_decay < 0.0) throw std::invalid_argument("OptimSpec: weight_decay must be nonnegative");
        if (decay_factor <= 0.0) throw std::invalid_argument("OptimSpec: decay_factor must be positive");
        for (std::size_t i = 1; i < milestones.size(); ++i)
            if (milestones[i] <= milestones[i - 1])
                throw std::invalid_argument("OptimSpec: milestones must be strictly increasing");
    }

    double lr_at_epoch(int epoch) const {
        double lr = lr0;
        for (int m : milestones)
            if (m <= epoch) lr *= decay_factor;
        return lr;
    }
};

class SgdOptimizer {
public:
    SgdOptimizer(std::vector<Parameter> params, OptimSpec spec) : params_(std::move(params)), spec_(std::move(spec)) {
        spec_.validate();
        for (const auto& p : params_) buffers_[p.name].assign(p.value.data().size(), 0.0);
    }

    // v <- momentum*v + (grad + wd*param); param <- param - lr*v
    void step(double lr) {
        for (auto& p : params_) {
            auto& buf = buffers_[p.name];
            const auto& g = p.value.node()->grad;
            if (g.empty()) throw std::runtime_error("sgd_step: missing gradient for parameter '" + p.name + "'");
            auto& v = p.value.data();
            for (std::size_t i = 0; i < v.size(); ++i) {
                buf[i] = spec_.momentum * buf[i] + g[i] + spec_.weight_decay * v[i];
                v[i] -= lr * buf[i];
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.value.zero_grad();
    }

    // New tensors picked up mid-run (lazily created projections).
    void extend(const std::vector<Parameter>& params) {
        for (const auto& p : params)
            if (!buffers_.count(p.name)) {
                params_.push_back(p);
                buffers_[p.name].assign(p.value.data().size(), 0.0);
            }
    }

    const OptimSpec& spec() const { return spec_; }
    const std::vector<Parameter>& params() const { return params_; }

private:
    std::vector<Parameter> params_;
    OptimSpec spec_;
    std::map<std::string, std::vector<double>> buffers_;
};

}  // namespace dskd
