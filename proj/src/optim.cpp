#include "instructtime/optim.hpp"

#include <cmath>

#include "instructtime/common.hpp"

namespace instructtime::nn {

void adamw_step(const std::vector<Parameter*>& params, const AdamConfig& cfg, int step) {
    if (step < 1) throw Error(ErrKind::argument, "optimizer step must be 1-indexed");
    const Real bc1 = 1.0 - std::pow(cfg.beta1, step);
    const Real bc2 = 1.0 - std::pow(cfg.beta2, step);
    for (Parameter* p : params) {
        if (p->adam_m.v.size() != p->value.v.size()) p->adam_m = Tensor::zeros(p->value.shape);
        if (p->adam_v.v.size() != p->value.v.size()) p->adam_v = Tensor::zeros(p->value.shape);
        for (size_t i = 0; i < p->value.v.size(); ++i) {
            const Real g = p->grad.v[i];
            p->adam_m.v[i] = cfg.beta1 * p->adam_m.v[i] + (1.0 - cfg.beta1) * g;
            p->adam_v.v[i] = cfg.beta2 * p->adam_v.v[i] + (1.0 - cfg.beta2) * g * g;
            const Real mhat = p->adam_m.v[i] / bc1;
            const Real vhat = p->adam_v.v[i] / bc2;
            p->value.v[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) +
                                       cfg.weight_decay * p->value.v[i]);
        }
    }
}

Real clip_global_norm(const std::vector<Parameter*>& params, Real max_norm) {
    Real sq = 0;
    for (const Parameter* p : params)
        for (Real g : p->grad.v) sq += g * g;
    const Real norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
        const Real s = max_norm / norm;
        for (Parameter* p : params)
            for (Real& g : p->grad.v) g *= s;
    }
    return norm;
}

Real warmup_cosine_lr(Real peak, int step, int warmup, int total) {
    if (step < 1 || step > total) throw Error(ErrKind::argument, "schedule step out of range");
    if (warmup > 0 && step <= warmup)
        return peak * static_cast<Real>(step) / static_cast<Real>(warmup);
    if (total == warmup) return peak;
    const Real progress = static_cast<Real>(step - warmup) / static_cast<Real>(total - warmup);
    return peak * 0.5 * (1.0 + std::cos(M_PI * progress));
}

int warmup_steps_for(Real ratio, int total) {
    if (ratio < 0 || ratio >= 1) throw Error(ErrKind::argument, "warmup ratio must lie in [0,1)");
    const Real x = ratio * static_cast<Real>(total);
    const Real r = std::round(x);
    if (std::abs(x - r) < 1e-9) return static_cast<int>(r);
    return static_cast<int>(std::floor(x));
}

}  // namespace instructtime::nn
