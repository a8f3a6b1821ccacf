#pragma once

// Central finite-difference gradient checking. This is the test oracle used
// by every gradient-bearing module; it deliberately re-evaluates the target
// function from scratch and never reuses the autodiff path it is checking.

#include <cmath>
#include <functional>
#include <vector>

#include "bridge/tensor.hpp"

namespace bridge {

/// Builds a scalar loss from leaves created on the given tape. Called once
/// per evaluation; must be deterministic.
using LossBuilder = std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>;

struct FdOptions {
    double step = 1e-5;
    double denom_floor = 1e-8;
};

namespace detail {

inline double eval_loss(const LossBuilder& f, const std::vector<Tensor<double>>& inputs) {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    leaves.reserve(inputs.size());
    for (auto in : inputs) {
        in.requires_grad = false;
        leaves.push_back(tape.constant(std::move(in)));
    }
    const Var<double> root = f(tape, leaves);
    if (!root.value().is_scalar()) throw Error("finite_difference_check: loss is not scalar");
    const double v = root.value().data[0];
    if (!std::isfinite(v)) throw Error("finite_difference_check: non-finite loss value");
    return v;
}

}  // namespace detail

/// Max over all coordinates of all inputs of |g_autodiff - g_fd| / (|g_fd| + floor).
/// Throws if the function is non-deterministic (detected by double evaluation)
/// or produces non-finite values.
inline double finite_difference_check(const LossBuilder& f, std::vector<Tensor<double>> inputs,
                                      const FdOptions& opt = {}) {
    if (opt.step <= 0.0) throw Error("finite_difference_check: step must be > 0");

    const double probe1 = detail::eval_loss(f, inputs);
    const double probe2 = detail::eval_loss(f, inputs);
    if (probe1 != probe2)
        throw Error("finite_difference_check: non-deterministic function (double evaluation differs)");

    // Autodiff pass with requires_grad leaves.
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    leaves.reserve(inputs.size());
    for (auto in : inputs) {
        in.requires_grad = true;
        leaves.push_back(tape.leaf(std::move(in)));
    }
    const Var<double> root = f(tape, leaves);
    if (!root.value().is_scalar()) throw Error("finite_difference_check: loss is not scalar");
    if (!std::isfinite(root.value().data[0])) throw Error("finite_difference_check: non-finite loss value");
    tape.backward(root);
    std::vector<Tensor<double>> auto_grads;
    auto_grads.reserve(leaves.size());
    for (const auto& leaf : leaves) auto_grads.push_back(leaf.grad());

    double max_rel = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::size_t i = 0; i < inputs[k].data.size(); ++i) {
            const double saved = inputs[k].data[i];
            inputs[k].data[i] = saved + opt.step;
            const double up = detail::eval_loss(f, inputs);
            inputs[k].data[i] = saved - opt.step;
            const double down = detail::eval_loss(f, inputs);
            inputs[k].data[i] = saved;
            const double fd = (up - down) / (2.0 * opt.step);
            if (!std::isfinite(fd)) throw Error("finite_difference_check: non-finite finite-difference value");
            const double rel = std::abs(auto_grads[k].data[i] - fd) / (std::abs(fd) + opt.denom_floor);
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

/// Single-input convenience overload.
inline double finite_difference_check(const std::function<Var<double>(Tape<double>&, Var<double>&)>& f,
                                      Tensor<double> x, double step = 1e-5) {
    return finite_difference_check(
        [&f](Tape<double>& tape, std::vector<Var<double>>& leaves) { return f(tape, leaves[0]); },
        {std::move(x)}, FdOptions{step, 1e-8});
}

}  // namespace bridge
