#include "denseshift/optim.hpp"

#include <cmath>
#include <numbers>

namespace denseshift {

void sgd_momentum_step(Tensor& param, const Tensor& grad, Tensor& velocity, double lr,
                       double momentum, double weight_decay) {
    if (!param.same_shape(grad) || !param.same_shape(velocity))
        throw ShapeError("sgd step: param/grad/velocity shapes differ");
    for (int64_t i = 0; i < param.numel(); ++i) {
        if (!std::isfinite(grad[i])) throw NumericError("non-finite gradient in sgd step");
        const double v = momentum * velocity[i] + grad[i] + weight_decay * param[i];
        velocity[i] = v;
        param[i] -= lr * v;
    }
}

double cosine_lr_at(double base_lr, int64_t epoch, int64_t total_epochs) {
    if (total_epochs <= 0) throw ConfigError("cosine schedule needs total_epochs > 0");
    if (epoch < 0 || epoch > total_epochs) throw ConfigError("epoch outside [0, total_epochs]");
    return 0.5 * base_lr *
           (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) /
                           static_cast<double>(total_epochs)));
}

namespace {

// Fixed slot order per layer: weight | w_sign, w_scale[0..T) | bias | gamma | beta.
template <typename StateT, typename Fn>
void for_each_param_slot(StateT& st, const LayerSpec& l, Fn&& fn) {
    size_t slot = 0;
    if (l.has_weights()) {
        if (l.provider.kind == ProviderKind::dense_shift) {
            fn(slot++, st.latents.w_sign, true);
            for (auto& t : st.latents.w_scale) fn(slot++, t, true);
        } else {
            fn(slot++, st.weight, false);
        }
        if (l.has_bias) fn(slot++, st.bias, false);
    } else if (l.kind == LayerKind::batchnorm) {
        fn(slot++, st.gamma, false);
        fn(slot++, st.beta, false);
    }
}

} // namespace

SgdOptimizer::SgdOptimizer(const Network& net, OptimConfig cfg) : cfg_(cfg) {
    velocity_.resize(net.states.size());
    for (size_t li = 0; li < net.states.size(); ++li) {
        for_each_param_slot(net.states[li], net.spec.layers[li],
                            [&](size_t, const Tensor& p, bool) {
                                velocity_[li].push_back(Tensor(p.shape));
                            });
    }
}

void SgdOptimizer::step(Network& net, const std::vector<ParamGrads>& grads, double lr) {
    if (grads.size() != net.states.size()) throw Error("optimizer: grads do not match network");
    for (size_t li = 0; li < net.states.size(); ++li) {
        const auto& l = net.spec.layers[li];
        const auto& g = grads[li];
        auto grad_for_slot = [&](size_t slot) -> const Tensor& {
            size_t cursor = 0;
            if (l.has_weights()) {
                if (l.provider.kind == ProviderKind::dense_shift) {
                    const auto& lat = *g.latents;
                    if (slot == cursor) return lat.g_sign;
                    ++cursor;
                    for (const auto& t : lat.g_scale) {
                        if (slot == cursor) return t;
                        ++cursor;
                    }
                } else {
                    if (slot == cursor) return *g.weight;
                    ++cursor;
                }
                if (l.has_bias && slot == cursor) return *g.bias;
                ++cursor;
            } else if (l.kind == LayerKind::batchnorm) {
                if (slot == cursor) return *g.gamma;
                ++cursor;
                if (slot == cursor) return *g.beta;
            }
            throw Error("optimizer: bad parameter slot");
        };
        for_each_param_slot(net.states[li], l, [&](size_t slot, Tensor& p, bool is_latent) {
            const double wd = is_latent && !cfg_.wd_on_latents ? 0.0 : cfg_.weight_decay;
            sgd_momentum_step(p, grad_for_slot(slot), velocity_[li][slot], lr, cfg_.momentum, wd);
        });
    }
}

} // namespace denseshift
