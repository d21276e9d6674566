#include "msom/optim.hpp"

#include <cmath>

namespace msom {

StepReport adam_step(std::span<Tensor> params, AdamState& state, const AdamConfig& config) {
    if (state.m.size() != params.size()) {
        if (state.step != 0 || !state.m.empty())
            throw ShapeError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) +
                             " parameters, got " + std::to_string(params.size()));
        for (const auto& p : params) {
            state.m.emplace_back(p.numel(), 0.0);
            state.v.emplace_back(p.numel(), 0.0);
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.m[i].size() != params[i].numel())
            throw ShapeError("adam_step: state shape mismatch for parameter " + std::to_string(i) + " " +
                             to_string(params[i].shape()));
        for (float g : params[i].grad())
            if (!std::isfinite(g)) return {false, "non-finite gradient in parameter " + std::to_string(i)};
    }

    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(config.beta1, t);
    const double c2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto value = params[i].mutable_data();
        auto grad = params[i].grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < value.size(); ++j) {
            const double g = grad.empty() ? 0.0 : static_cast<double>(grad[j]);
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g * g;
            const double m_hat = m[j] / c1;
            const double v_hat = v[j] / c2;
            value[j] = static_cast<float>(static_cast<double>(value[j]) - config.lr * m_hat / (std::sqrt(v_hat) + config.eps));
        }
    }
    return {};
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params)
        for (float g : p.grad()) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    if (norm > max_norm && std::isfinite(norm)) {
        const float factor = static_cast<float>(max_norm / norm);
        for (auto& p : params) {
            if (!p.has_grad()) continue;
            auto& g = p.node()->grad;
            for (float& x : g) x *= factor;
        }
    }
    return norm;
}

void zero_grads(std::span<Tensor> params) {
    for (auto& p : params) p.zero_grad();
}

}  // namespace msom
