#include "ftlab/optim.hpp"

#include <cmath>
#include <numbers>

namespace ftlab {

double CosineSchedule::at(std::int64_t step) const {
    if (warmup_steps > 0 && step < warmup_steps)
        return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    const double span = static_cast<double>(std::max<std::int64_t>(1, total_steps - warmup_steps));
    const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / span);
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
void AdamW<T>::update(ParamGroup<T>& group, const Binding<T>& binding, double lr) {
    if (t_ == 0) throw ConfigError("AdamW::update called before begin_step");
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (auto& a : group.arrays) {
        const std::string key = group.id + "/" + a.name;
        const Tensor<T>* g = binding.grad(group.id, a.name);
        auto& m = m_[key];
        auto& v = v_[key];
        if (m.empty()) {
            m.assign(static_cast<std::size_t>(a.value.numel()), 0.0);
            v.assign(m.size(), 0.0);
        }
        const bool decay = a.value.rank() >= 2 && config_.weight_decay > 0.0;
        T* p = a.value.data();
        for (std::size_t i = 0; i < m.size(); ++i) {
            const double gi = g ? static_cast<double>((*g)[static_cast<std::int64_t>(i)]) : 0.0;
            m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
            v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
            double x = static_cast<double>(p[i]);
            if (decay) x -= lr * config_.weight_decay * x;
            x -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
            p[i] = static_cast<T>(x);
        }
    }
}

template <typename T>
bool AdamW<T>::has_state(const std::string& group_id) const {
    const std::string prefix = group_id + "/";
    for (const auto& [k, _] : m_)
        if (k.starts_with(prefix)) return true;
    return false;
}

template class AdamW<float>;
template class AdamW<double>;

int selection_window(int epochs, double window_fraction) {
    if (epochs < 1) throw InputError("selection window needs at least one epoch");
    if (!(window_fraction > 0.0) || window_fraction > 1.0) throw ConfigError("window fraction must lie in (0, 1]");
    // Guard against 0.05 * 100 evaluating to 5.000000000000001.
    const double w = std::ceil(window_fraction * epochs - 1e-9);
    return std::clamp(static_cast<int>(w), 1, epochs);
}

int select_pretrain_checkpoint(const std::vector<double>& h, double window_fraction) {
    if (h.empty()) throw InputError("select_pretrain_checkpoint: empty loss history");
    const int e = static_cast<int>(h.size());
    const int w = selection_window(e, window_fraction);
    int best = e - w;
    for (int i = e - w; i < e; ++i)
        if (h[i] <= h[best]) best = i;
    return best + 1;
}

}  // namespace ftlab
