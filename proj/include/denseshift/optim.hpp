#pragma once

#include "denseshift/nn.hpp"

namespace denseshift {

// v' = momentum*v + grad + weight_decay*param; param' = param - lr*v'.
// Throws NumericError on a non-finite gradient so the caller can abort the epoch.
void sgd_momentum_step(Tensor& param, const Tensor& grad, Tensor& velocity, double lr,
                       double momentum, double weight_decay);

// Half-cosine decay from base_lr at epoch 0 to 0 at total_epochs.
double cosine_lr_at(double base_lr, int64_t epoch, int64_t total_epochs);

struct OptimConfig {
    double base_lr = 1e-3;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    bool wd_on_latents = true; // apply weight decay to dense-shift latents
};

// SGD with momentum over every trainable tensor of a network. Velocity slots
// mirror the parameter enumeration order, which is fixed per network spec.
class SgdOptimizer {
public:
    SgdOptimizer(const Network& net, OptimConfig cfg);
    void step(Network& net, const std::vector<ParamGrads>& grads, double lr);
    const OptimConfig& config() const { return cfg_; }

private:
    OptimConfig cfg_;
    std::vector<std::vector<Tensor>> velocity_; // [layer][slot]
};

} // namespace denseshift
