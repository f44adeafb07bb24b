#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hk/autodiff.hpp"
#include "hk/rng.hpp"
#include "hk/tensor.hpp"

namespace hk::autodiff {

enum class Activation { identity, relu, tanh, softplus };

inline Activation activation_from_string(const std::string& s) {
    if (s == "identity") return Activation::identity;
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    if (s == "softplus") return Activation::softplus;
    throw std::invalid_argument("unknown activation: " + s);
}

inline std::string to_string(Activation a) {
    switch (a) {
        case Activation::identity: return "identity";
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
        case Activation::softplus: return "softplus";
    }
    return "identity";
}

// Layer widths include the input width: {d_in, h1, ..., d_out}. One
// activation per weight layer; the last is usually identity so features
// do not saturate.
struct MlpSpec {
    std::vector<std::size_t> widths;
    std::vector<Activation> acts;
    std::string init = "xavier";
    double output_gain = 1.0;  // scales the last layer's weights at init

    static MlpSpec make(std::vector<std::size_t> widths, Activation hidden = Activation::tanh,
                        Activation last = Activation::identity) {
        MlpSpec s;
        s.widths = std::move(widths);
        if (s.widths.size() < 2) throw std::invalid_argument("MlpSpec: need >= 1 layer");
        for (auto w : s.widths)
            if (w == 0) throw std::invalid_argument("MlpSpec: zero width");
        s.acts.assign(s.widths.size() - 1, hidden);
        s.acts.back() = last;
        return s;
    }

    std::size_t layers() const { return widths.size() - 1; }
    std::size_t input_dim() const { return widths.front(); }
    std::size_t output_dim() const { return widths.back(); }
};

// Flat collection of named parameter tensors with matching gradient slots.
struct ParamStore {
    std::vector<std::pair<std::string, Tensor>> values;
    std::vector<std::pair<std::string, Tensor>> grads;

    Tensor& add(const std::string& name, Tensor t) {
        for (auto& [n, v] : values)
            if (n == name) throw std::invalid_argument("duplicate param: " + name);
        grads.emplace_back(name, Tensor::zeros(t.shape));
        values.emplace_back(name, std::move(t));
        return values.back().second;
    }

    Tensor& get(const std::string& name) {
        for (auto& [n, v] : values)
            if (n == name) return v;
        throw std::invalid_argument("no such param: " + name);
    }
    const Tensor& get(const std::string& name) const {
        for (auto& [n, v] : values)
            if (n == name) return v;
        throw std::invalid_argument("no such param: " + name);
    }
    Tensor& grad(const std::string& name) {
        for (auto& [n, v] : grads)
            if (n == name) return v;
        throw std::invalid_argument("no such grad: " + name);
    }
    bool has(const std::string& name) const {
        for (auto& [n, v] : values)
            if (n == name) return true;
        return false;
    }

    void zero_grads() {
        for (auto& [n, g] : grads) g.fill(0.0);
    }

    std::size_t total_size() const {
        std::size_t s = 0;
        for (auto& [n, v] : values) s += v.numel();
        return s;
    }
};

inline void init_mlp(ParamStore& store, const std::string& prefix, const MlpSpec& spec,
                     Rng& rng) {
    for (std::size_t l = 0; l < spec.layers(); ++l) {
        std::size_t in = spec.widths[l], out = spec.widths[l + 1];
        double scale = std::sqrt(2.0 / double(in + out));  // xavier
        if (spec.acts[l] == Activation::relu) scale = std::sqrt(2.0 / double(in));
        if (l + 1 == spec.layers()) scale *= spec.output_gain;
        Tensor W = Tensor::zeros({in, out});
        for (auto& w : W.data) w = scale * rng.normal();
        store.add(prefix + ".W" + std::to_string(l), std::move(W));
        store.add(prefix + ".b" + std::to_string(l), Tensor::zeros({out}));
    }
}

// Parameter nodes of one MLP bound onto a tape.
struct MlpVars {
    std::vector<Var> W, b;
};

inline MlpVars bind_mlp(Tape& tape, ParamStore& store, const std::string& prefix,
                        const MlpSpec& spec) {
    MlpVars m;
    for (std::size_t l = 0; l < spec.layers(); ++l) {
        m.W.push_back(tape.param(prefix + ".W" + std::to_string(l),
                                 store.get(prefix + ".W" + std::to_string(l))));
        m.b.push_back(tape.param(prefix + ".b" + std::to_string(l),
                                 store.get(prefix + ".b" + std::to_string(l))));
    }
    return m;
}

inline Var apply_activation(Var z, Activation a) {
    switch (a) {
        case Activation::identity: return z;
        case Activation::relu: return relu(z);
        case Activation::tanh: return tanh(z);
        case Activation::softplus: return softplus(z);
    }
    return z;
}

//

// Batched forward pass: X is (n x d_in), result (n x d_out).
inline Var mlp_apply(const MlpSpec& spec, const MlpVars& vars, Var X) {
    Var h = X;
    for (std::size_t l = 0; l < spec.layers(); ++l) {
        Var z = add_rowvec(matmul(h, vars.W[l]), vars.b[l]);
        h = apply_activation(z, spec.acts[l]);
    }
    return h;
}

namespace detail {
// derivative of the activation expressed with tape ops, evaluated at
// pre-activation z (with a = act(z) available to reuse)
inline Var activation_deriv(Var z, Var a, Activation act) {
    Tape& t = *z.tape;
    switch (act) {
        case Activation::identity:
            return t.constant(Tensor::full(t.value(z).shape, 1.0));
        case Activation::relu: {
            Tensor m = t.value(z);
            for (auto& v : m.data) v = v > 0.0 ? 1.0 : 0.0;
            return t.constant(std::move(m));  // piecewise-constant mask
        }
        case Activation::tanh:
            return add_scalar(neg(mul(a, a)), 1.0);
        case Activation::softplus: {
            // sigmoid(z)
            Var ez = exp(neg(z));
            return div(t.constant(Tensor::full(t.value(z).shape, 1.0)), add_scalar(ez, 1.0));
        }
    }
    throw std::invalid_argument("activation_deriv: bad activation");
}
}  // namespace detail

// Jacobian dh/dx for a single input x (1 x d_in), built from tape ops so it
// stays differentiable with respect to the weights. Result is (d_out x d_in).
inline Var mlp_jacobian(const MlpSpec& spec, const MlpVars& vars, Var x_row) {
    Tape& t = *x_row.tape;
    std::size_t d = spec.input_dim();
    Tensor eye = Tensor::zeros({d, d});
    for (std::size_t i = 0; i < d; ++i) eye.at(i, i) = 1.0;
    Var J = t.constant(std::move(eye));  // (d x d), running da_l/dx transposed chain
    Var h = x_row;
    for (std::size_t l = 0; l < spec.layers(); ++l) {
        Var z = add_rowvec(matmul(h, vars.W[l]), vars.b[l]);
        Var a = apply_activation(z, spec.acts[l]);
        // da_l/dx = diag(act'(z)) W_l^T (da_{l-1}/dx); carry as (out_l x d)
        Var JW = matmul(transpose(vars.W[l]), J);
        Var dvec = detail::activation_deriv(z, a, spec.acts[l]);  // (1 x out_l)
        Var dcolv = rowsum(transpose(dvec));                      // length out_l
        J = mul_colvec(JW, dcolv);
        h = a;
    }
    return J;  // (d_out x d_in)
}

// squared Frobenius norm of the feature-map Jacobian at x, differentiable
// with respect to the network parameters
inline Var mlp_jacobian_frob2(const MlpSpec& spec, const MlpVars& vars, Var x_row) {
    Var J = mlp_jacobian(spec, vars, x_row);
    return sum(mul(J, J));
}

// ---- Adam ----

struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.5;    // Adam momentum defaults follow the GAN setup
    double beta2 = 0.999;
    double eps = 1e-8;
    long step = 0;
    std::vector<std::pair<std::string, Tensor>> m, v;

    Tensor& moment(std::vector<std::pair<std::string, Tensor>>& vec, const std::string& name,
                   const Tensor& like) {
        for (auto& [n, t] : vec)
            if (n == name) {
                if (!t.same_shape(like))
                    throw std::invalid_argument("adam: moment shape mismatch for " + name);
                return t;
            }
        vec.emplace_back(name, Tensor::zeros(like.shape));
        return vec.back().second;
    }

    void reset() {
        step = 0;
        m.clear();
        v.clear();
    }
};

// Standard bias-corrected Adam update reading gradients from the store.
inline void adam_step(ParamStore& store, AdamState& st) {
    st.step += 1;
    double b1t = 1.0 - std::pow(st.beta1, double(st.step));
    double b2t = 1.0 - std::pow(st.beta2, double(st.step));
    for (auto& [name, p] : store.values) {
        Tensor& g = store.grad(name);
        if (!g.same_shape(p)) throw std::invalid_argument("adam: grad shape mismatch");
        Tensor& m = st.moment(st.m, name, p);
        Tensor& v = st.moment(st.v, name, p);
        for (std::size_t k = 0; k < p.data.size(); ++k) {
            m.data[k] = st.beta1 * m.data[k] + (1.0 - st.beta1) * g.data[k];
            v.data[k] = st.beta2 * v.data[k] + (1.0 - st.beta2) * g.data[k] * g.data[k];
            double mhat = m.data[k] / b1t;
            double vhat = v.data[k] / b2t;
            p.data[k] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
        }
    }
}

// Copies tape gradients into the store's gradient slots (zero for params the
// loss never touched).
inline void collect_grads(Tape& tape, ParamStore& store) {
    store.zero_grads();
    for (const auto& [name, id] : tape.params()) {
        if (!store.has(name)) continue;
        Tensor g = tape.grad(Var{&tape, id});
        Tensor& dst = store.grad(name);
        for (std::size_t k = 0; k < g.data.size(); ++k) dst.data[k] += g.data[k];
    }
}

inline double apply_activation_scalar(double z, Activation a) {
    switch (a) {
        case Activation::identity: return z;
        case Activation::relu: return z > 0.0 ? z : 0.0;
        case Activation::tanh: return std::tanh(z);
        case Activation::softplus: return z > 30.0 ? z : std::log1p(std::exp(z));
    }
    return z;
}

// Tape-free batched forward pass, for hot paths and plain evaluation.
inline Tensor plain_mlp_apply(const ParamStore& store, const std::string& prefix,
                              const MlpSpec& spec, const Tensor& X) {
    if (X.rank() != 2 || X.cols() != spec.input_dim())
        throw std::invalid_argument("plain_mlp_apply: bad input shape");
    Tensor h = X;
    for (std::size_t l = 0; l < spec.layers(); ++l) {
        const Tensor& W = store.get(prefix + ".W" + std::to_string(l));
        const Tensor& b = store.get(prefix + ".b" + std::to_string(l));
        std::size_t n = h.rows(), in = W.rows(), out = W.cols();
        Tensor z = Tensor::zeros({n, out});
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < out; ++j) z.at(i, j) = b.data[j];
            for (std::size_t k = 0; k < in; ++k) {
                double hv = h.at(i, k);
                if (hv == 0.0) continue;
                for (std::size_t j = 0; j < out; ++j) z.at(i, j) += hv * W.at(k, j);
            }
        }
        for (auto& v : z.data) v = apply_activation_scalar(v, spec.acts[l]);
        h = std::move(z);
    }
    check_finite(h, "plain_mlp_apply");
    return h;
}

// sum_i d^2 k(y,z) / dy_i dz_i at y = z = x, by a central finite-difference
// stencil on the kernel's two inputs. Works for any twice-differentiable
// kernel; used directly for random-feature kernels and as the oracle for the
// closed form of the deep RBF family.
inline double hessian_trace_cross(const std::function<double(std::span<const double>,
                                                             std::span<const double>)>& kernel,
                                  std::span<const double> x, double h = 1e-4) {
    std::size_t d = x.size();
    std::vector<double> yp(x.begin(), x.end()), ym(x.begin(), x.end());
    std::vector<double> zp(x.begin(), x.end()), zm(x.begin(), x.end());
    double tr = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        yp[i] = x[i] + h;
        ym[i] = x[i] - h;
        zp[i] = x[i] + h;
        zm[i] = x[i] - h;
        double kpp = kernel(yp, zp);
        double kpm = kernel(yp, zm);
        double kmp = kernel(ym, zp);
        double kmm = kernel(ym, zm);
        tr += (kpp - kpm - kmp + kmm) / (4.0 * h * h);
        yp[i] = ym[i] = zp[i] = zm[i] = x[i];
    }
    if (!std::isfinite(tr)) throw std::runtime_error("hessian_trace_cross: non-finite");
    return tr;
}

}  // namespace hk::autodiff
