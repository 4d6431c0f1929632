#pragma once

#include <functional>
#include <vector>

#include "ftlab/params.hpp"
#include "support/gradcheck.hpp"

namespace ftlab::testkit {

/// Finite-difference check of every array in `groups` for a scalar loss built from a
/// binding in which all of `groups` are trainable.
inline GradCheckResult check_group_gradients(const std::vector<ParamGroup<double>*>& groups,
                                             const std::function<ag::Var<double>(const Binding<double>&)>& build,
                                             double h = 1e-5) {
    Binding<double> live;
    for (auto* g : groups) live.bind(*g, true);
    auto loss = build(live);
    ag::backward(loss);
    std::vector<Tensor<double>*> inputs;
    std::vector<const Tensor<double>*> grads;
    std::vector<std::string> names;
    for (auto* g : groups)
        for (auto& a : g->arrays) {
            inputs.push_back(&a.value);
            grads.push_back(live.grad(g->id, a.name));
            names.push_back(g->id + "/" + a.name);
        }
    auto eval = [&] {
        Binding<double> b;
        for (auto* g : groups) b.bind(*g, false);
        return build(b).item();
    };
    return check_gradients(inputs, grads, names, eval, h);
}

}  // namespace ftlab::testkit
