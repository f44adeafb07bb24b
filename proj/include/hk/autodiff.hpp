#pragma once

#include <array>
#include <deque>
#include <cstddef>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hk/tensor.hpp"

namespace hk::autodiff {

class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;
};

struct Node {
    Tensor value;
    Tensor grad;
    std::vector<int> in;
    std::function<void(Tape&, Node&)> fwd;  // recompute value from inputs; null for leaves
    std::function<void(Tape&, Node&)> bwd;  // scatter grad into inputs; null for leaves
    bool requires_grad = true;
    bool is_param = false;
    bool grad_live = false;  // grad tensor allocated for current backward pass
};

// Recorded computation graph. Values are computed eagerly as ops are built;
// leaves can be rebound and the whole graph recomputed, which is what the
// finite-difference harness uses.
class Tape {
  public:
    Node& node(int id) { return nodes_[id]; }
    const Node& node(int id) const { return nodes_[id]; }
    std::size_t size() const { return nodes_.size(); }

    Var constant(Tensor t) {
        check_finite(t, "constant");
        return push(std::move(t), false, false);
    }

    Var input(Tensor t) {
        check_finite(t, "input");
        return push(std::move(t), true, false);
    }

    Var param(const std::string& name, Tensor t) {
        check_finite(t, "param");
        Var v = push(std::move(t), true, true);
        params_.emplace_back(name, v.id);
        return v;
    }

    const std::vector<std::pair<std::string, int>>& params() const { return params_; }

    const Tensor& value(Var v) const { return nodes_[v.id].value; }

    void set_value(Var v, Tensor t) {
        Node& n = nodes_[v.id];
        if (n.fwd) throw std::invalid_argument("set_value: not a leaf node");
        if (!n.value.same_shape(t))
            throw std::invalid_argument("set_value: shape mismatch");
        check_finite(t, "set_value");
        n.value = std::move(t);
    }

    // Recompute every non-leaf node in recording order and return the value
    // at `output`. Leaves keep whatever values they currently hold.
    const Tensor& forward(Var output) {
        for (auto& n : nodes_)
            if (n.fwd) {
                n.fwd(*this, n);
                check_finite(n.value, "forward");
            }
        return nodes_[output.id].value;
    }

    // Reverse sweep from a scalar loss. Populates gradients for every
    // parameter reachable from the loss; unreached parameters report zeros.
    void backward(Var loss) {
        Node& ln = nodes_[loss.id];
        if (ln.value.numel() != 1)
            throw std::invalid_argument("backward: loss must be scalar");
        for (auto& n : nodes_) n.grad_live = false;
        std::vector<char> needed(nodes_.size(), 0);
        needed[loss.id] = 1;
        for (int i = loss.id; i >= 0; --i) {
            if (!needed[i]) continue;
            for (int j : nodes_[i].in)
                if (nodes_[j].requires_grad) needed[j] = 1;
        }
        ensure_grad(loss.id).data[0] = 1.0;
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (!needed[i] || !n.bwd || !n.grad_live) continue;
            n.bwd(*this, n);
        }
    }

    Tensor grad(Var v) const {
        const Node& n = nodes_[v.id];
        if (n.grad_live) return n.grad;
        return Tensor::zeros(n.value.shape);
    }

    std::map<std::string, Tensor> grad_map() const {
        std::map<std::string, Tensor> g;
        for (const auto& [name, id] : params_) g[name] = grad(Var{nullptr, id});
        return g;
    }

    Tensor& ensure_grad(int id) {
        Node& n = nodes_[id];
        if (!n.grad_live) {
            if (!n.grad.same_shape(n.value)) n.grad = Tensor::zeros(n.value.shape);
            else n.grad.fill(0.0);
            n.grad_live = true;
        }
        return n.grad;
    }

    Var emit(Tensor value, std::vector<int> in,
             std::function<void(Tape&, Node&)> fwd,
             std::function<void(Tape&, Node&)> bwd) {
        check_finite(value, "op");
        Node n;
        n.value = std::move(value);
        n.in = std::move(in);
        n.fwd = std::move(fwd);
        n.bwd = std::move(bwd);
        bool rg = false;
        for (int j : n.in) rg = rg || nodes_[j].requires_grad;
        n.requires_grad = rg;
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<int>(nodes_.size() - 1)};
    }

  private:
    Var push(Tensor t, bool requires_grad, bool is_param) {
        Node n;
        n.value = std::move(t);
        n.requires_grad = requires_grad;
        n.is_param = is_param;
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<int>(nodes_.size() - 1)};
    }

    std::deque<Node> nodes_;  // stable element references while the tape grows
    std::vector<std::pair<std::string, int>> params_;
};

// spec'd entry point: recompute the recorded graph against freshly bound
// leaf values and return the output tensor.
inline Tensor forward(Tape& tape, Var output) { return tape.forward(output); }

inline std::map<std::string, Tensor> backward(Tape& tape, Var loss) {
    tape.backward(loss);
    return tape.grad_map();
}

namespace detail {

inline void accum(Tape& t, int id, const Tensor& g) {
    if (!t.node(id).requires_grad) return;
    Tensor& dst = t.ensure_grad(id);
    for (std::size_t k = 0; k < g.data.size(); ++k) dst.data[k] += g.data[k];
}

template <class F>
Var unary(Var a, F f, std::function<void(Tape&, Node&)> bwd) {
    Tape& t = *a.tape;
    auto fwd = [aid = a.id, f](Tape& tp, Node& n) {
        const Tensor& x = tp.node(aid).value;
        if (!n.value.same_shape(x)) n.value = Tensor::zeros(x.shape);
        for (std::size_t k = 0; k < x.data.size(); ++k) n.value.data[k] = f(x.data[k]);
    };
    Tensor v = Tensor::zeros(t.node(a.id).value.shape);
    for (std::size_t k = 0; k < v.data.size(); ++k)
        v.data[k] = f(t.node(a.id).value.data[k]);
    return t.emit(std::move(v), {a.id}, fwd, std::move(bwd));
}

}  // namespace detail

// ---- elementwise ----

inline Var add(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor &x = t.value(a), &y = t.value(b);
    if (!x.same_shape(y)) throw std::invalid_argument("add: shape mismatch");
    auto fwd = [ai = a.id, bi = b.id](Tape& tp, Node& n) {
        const Tensor &x = tp.node(ai).value, &y = tp.node(bi).value;
        n.value = x;
        for (std::size_t k = 0; k < y.data.size(); ++k) n.value.data[k] += y.data[k];
    };
    auto bwd = [ai = a.id, bi = b.id](Tape& tp, Node& n) {
        detail::accum(tp, ai, n.grad);
        detail::accum(tp, bi, n.grad);
    };
    Tensor v = x;
    for (std::size_t k = 0; k < y.data.size(); ++k) v.data[k] += y.data[k];
    return t.emit(std::move(v), {a.id, b.id}, fwd, bwd);
}

inline Var sub(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor &x = t.value(a), &y = t.value(b);
    if (!x.same_shape(y)) throw std::invalid_argument("sub: shape mismatch");
    auto fwd = [ai = a.id, bi = b.id](Tape& tp, Node& n) {
        const Tensor &x = tp.node(ai).value, &y = tp.node(bi).value;
        n.value = x;
        for (std::size_t k = 0; k < y.data.size(); ++k) n.value.data[k] -= y.data[k];
    };
    auto bwd = [ai = a.id, bi = b.id](Tape& tp, Node& n) {
        detail::accum(tp, ai, n.grad);
        if (tp.node(bi).requires_grad) {
            Tensor& dst = tp.ensure_grad(bi);
            for (std::size_t k = 0; k < n.grad.data.size(); ++k)
                dst.data[k] -= n.grad.data[k];
        }
    };
    Tensor v = x;
    for (std::size_t k = 0; k < y.data.size(); ++k) v.data[k] -= y.data[k];
    return t.emit(std::move(v), {a.id, b.id}, fwd, bwd);
}

inline Var mul(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor &x = t.value(a), &y = t.value(b);
    if (!x.same_shape(y)) throw std::invalid_argument("mul: shape mismatch");
    auto fwd = [ai = a.id, bi = b.id](Tape& tp, Node& n) {
        const Tensor &x = tp.node(ai).value, &y = tp.node(bi).value;
        n.value = x;
        for (std::size_t k = 0; k < y.data.size(); ++k) n.value.data[k] *= y.data[k];
    };
    auto bwd = [ai = a.id, bi = b.id](Tape& tp, Node& n) {
        const Tensor &x = tp.node(ai).value, &y = tp.node(bi).value;
        if (tp.node(ai).requires_grad) {
            Tensor& da = tp.ensure_grad(ai);
            for (std::size_t k = 0; k < y.data.size(); ++k)
                da.data[k] += n.grad.data[k] * y.data[k];
        }
        if (tp.node(bi).requires_grad) {
            Tensor& db = tp.ensure_grad(bi);
            for (std::size_t k = 0; k < x.data.size(); ++k)
                db.data[k] += n.grad.data[k] * x.data[k];
        }
    };
    Tensor v = x;
    for (std::size_t k = 0; k < y.data.size(); ++k) v.data[k] *= y.data[k];
    return t.emit(std::move(v), {a.id, b.id}, fwd, bwd);
}

// b may be a scalar, in which case it divides every element of a.
inline Var div(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor &x = t.value(a), &y = t.value(b);
    bool scalar_b = y.numel() == 1;
    if (!scalar_b && !x.same_shape(y)) throw std::invalid_argument("div: shape mismatch");
    auto compute = [scalar_b](const Tensor& x, const Tensor& y, Tensor& out) {
        out = x;
        if (scalar_b) {
            double d = y.data[0];
            for (auto& v : out.data) v /= d;
        } else {
            for (std::size_t k = 0; k < y.data.size(); ++k) out.data[k] /= y.data[k];
        }
    };
    auto fwd = [ai = a.id, bi = b.id, compute](Tape& tp, Node& n) {
        compute(tp.node(ai).value, tp.node(bi).value, n.value);
    };
    auto bwd = [ai = a.id, bi = b.id, scalar_b](Tape& tp, Node& n) {
        const Tensor &x = tp.node(ai).value, &y = tp.node(bi).value;
        if (tp.node(ai).requires_grad) {
            Tensor& da = tp.ensure_grad(ai);
            for (std::size_t k = 0; k < x.data.size(); ++k)
                da.data[k] += n.grad.data[k] / (scalar_b ? y.data[0] : y.data[k]);
        }
        if (tp.node(bi).requires_grad) {
            Tensor& db = tp.ensure_grad(bi);
            if (scalar_b) {
                double s = 0.0, d = y.data[0];
                for (std::size_t k = 0; k < x.data.size(); ++k)
                    s += n.grad.data[k] * (-x.data[k] / (d * d));
                db.data[0] += s;
            } else {
                for (std::size_t k = 0; k < x.data.size(); ++k)
                    db.data[k] += n.grad.data[k] * (-x.data[k] / (y.data[k] * y.data[k]));
            }
        }
    };
    Tensor v;
    compute(x, y, v);
    return t.emit(std::move(v), {a.id, b.id}, fwd, bwd);
}

inline Var add_scalar(Var a, double c) {
    return detail::unary(a, [c](double x) { return x + c; },
                         [ai = a.id](Tape& tp, Node& n) { detail::accum(tp, ai, n.grad); });
}

inline Var mul_scalar(Var a, double c) {
    auto bwd = [ai = a.id, c](Tape& tp, Node& n) {
        if (!tp.node(ai).requires_grad) return;
        Tensor& da = tp.ensure_grad(ai);
        for (std::size_t k = 0; k < n.grad.data.size(); ++k)
            da.data[k] += c * n.grad.data[k];
    };
    return detail::unary(a, [c](double x) { return x * c; }, bwd);
}

inline Var neg(Var a) { return mul_scalar(a, -1.0); }

inline Var exp(Var a) {
    auto bwd = [ai = a.id](Tape& tp, Node& n) {
        if (!tp.node(ai).requires_grad) return;
        Tensor& da = tp.ensure_grad(ai);
        for (std::size_t k = 0; k < n.grad.data.size(); ++k)
            da.data[k] += n.grad.data[k] * n.value.data[k];
    };
    return detail::unary(a, [](double x) { return std::exp(x); }, bwd);
}

inline Var log(Var a) {
    auto bwd = [ai = a.id](Tape& tp, Node& n) {
        if (!tp.node(ai).requires_grad) return;
        const Tensor& x = tp.node(ai).value;
        Tensor& da = tp.ensure_grad(ai);
        for (std::size_t k = 0; k < n.grad.data.size(); ++k)
            da.data[k] += n.grad.data[k] / x.data[k];
    };
    return detail::unary(a, [](double x) { return std::log(x); }, bwd);
}

// sqrt with the 0-subgradient convention at exactly zero, so that norms of
// identical points do not poison gradients
inline Var sqrt(Var a) {
    auto bwd = [ai = a.id](Tape& tp, Node& n) {
        if (!tp.node(ai).requires_grad) return;
        Tensor& da = tp.ensure_grad(ai);
        for (std::size_t k = 0; k < n.grad.data.size(); ++k)
            if (n.value.data[k] > 0.0)
                da.data[k] += n.grad.data[k] * 0.5 / n.value.data[k];
    };
    return detail::unary(a, [](double x) { return std::sqrt(x); }, bwd);
}

inline Var tanh(Var a) {
    auto bwd = [ai = a.id](Tape& tp, Node& n) {
        if (!tp.node(ai).requires_grad) return;
        Tensor& da = tp.ensure_grad(ai);
        for (std::size_t k = 0; k < n.grad.data.size(); ++k)
            da.data[k] += n.grad.data[k] * (1.0 - n.value.data[k] * n.value.data[k]);
    };
    return detail::unary(a, [](double x) { return std::tanh(x); }, bwd);
}

inline Var relu(Var a) {
    auto bwd = [ai = a.id](Tape& tp, Node& n) {
        if (!tp.node(ai).requires_grad) return;
        const Tensor& x = tp.node(ai).value;
        Tensor& da = tp.ensure_grad(ai);
        for (std::size_t k = 0; k < n.grad.data.size(); ++k)
            if (x.data[k] > 0.0) da.data[k] += n.grad.data[k];
    };
    return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, bwd);
}

inline Var softplus(Var a) {
    auto f = [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); };
    auto bwd = [ai = a.id](Tape& tp, Node& n) {
        if (!tp.node(ai).requires_grad) return;
        const Tensor& x = tp.node(ai).value;
        Tensor& da = tp.ensure_grad(ai);
        for (std::size_t k = 0; k < n.grad.data.size(); ++k) {
            double s = 1.0 / (1.0 + std::exp(-x.data[k]));
            da.data[k] += n.grad.data[k] * s;
        }
    };
    return detail::unary(a, f, bwd);
}

inline Var sin(Var a) {
    auto bwd = [ai = a.id](Tape& tp, Node& n) {
        if (!tp.node(ai).requires_grad) return;
        const Tensor& x = tp.node(ai).value;
        Tensor& da = tp.ensure_grad(ai);
        for (std::size_t k = 0; k < n.grad.data.size(); ++k)
            da.data[k] += n.grad.data[k] * std::cos(x.data[k]);
    };
    return detail::unary(a, [](double x) { return std::sin(x); }, bwd);
}

inline Var cos(Var a) {
    auto bwd = [ai = a.id](Tape& tp, Node& n) {
        if (!tp.node(ai).requires_grad) return;
        const Tensor& x = tp.node(ai).value;
        Tensor& da = tp.ensure_grad(ai);
        for (std::size_t k = 0; k < n.grad.data.size(); ++k)
            da.data[k] -= n.grad.data[k] * std::sin(x.data[k]);
    };
    return detail::unary(a, [](double x) { return std::cos(x); }, bwd);
}

// ---- reductions ----

inline Var sum(Var a) {
    Tape& t = *a.tape;
    auto fwd = [ai = a.id](Tape& tp, Node& n) {
        const Tensor& x = tp.node(ai).value;
        double s = 0.0;
        for (double v : x.data) s += v;
        n.value = Tensor::scalar(s);
    };
    auto bwd = [ai = a.id](Tape& tp, Node& n) {
        if (!tp.node(ai).requires_grad) return;
        Tensor& da = tp.ensure_grad(ai);
        double g = n.grad.data[0];
        for (auto& v : da.data) v += g;
    };
    double s = 0.0;
    for (double v : t.value(a).data) s += v;
    return t.emit(Tensor::scalar(s), {a.id}, fwd, bwd);
}

inline Var mean(Var a) {
    std::size_t n = a.tape->value(a).numel();
    return mul_scalar(sum(a), 1.0 / static_cast<double>(n));
}

inline Var rowsum(Var a) {
    Tape& t = *a.tape;
    const Tensor& x = t.value(a);
    if (x.rank() != 2) throw std::invalid_argument("rowsum: matrix required");
    auto fwd = [ai = a.id](Tape& tp, Node& n) {
        const Tensor& x = tp.node(ai).value;
        std::size_t r = x.rows(), c = x.cols();
        if (n.value.numel() != r) n.value = Tensor::zeros({r});
        for (std::size_t i = 0; i < r; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < c; ++j) s += x.at(i, j);
            n.value.data[i] = s;
        }
    };
    auto bwd = [ai = a.id](Tape& tp, Node& n) {
        if (!tp.node(ai).requires_grad) return;
        const Tensor& x = tp.node(ai).value;
        Tensor& da = tp.ensure_grad(ai);
        std::size_t r = x.rows(), c = x.cols();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) da.at(i, j) += n.grad.data[i];
    };
    Tensor v = Tensor::zeros({x.rows()});
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) s += x.at(i, j);
        v.data[i] = s;
    }
    return t.emit(std::move(v), {a.id}, fwd, bwd);
}

inline Var colsum(Var a) {
    Tape& t = *a.tape;
    const Tensor& x = t.value(a);
    if (x.rank() != 2) throw std::invalid_argument("colsum: matrix required");
    auto fwd = [ai = a.id](Tape& tp, Node& n) {
        const Tensor& x = tp.node(ai).value;
        std::size_t r = x.rows(), c = x.cols();
        if (n.value.numel() != c) n.value = Tensor::zeros({c});
        else n.value.fill(0.0);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) n.value.data[j] += x.at(i, j);
    };
    auto bwd = [ai = a.id](Tape& tp, Node& n) {
        if (!tp.node(ai).requires_grad) return;
        const Tensor& x = tp.node(ai).value;
        Tensor& da = tp.ensure_grad(ai);
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < x.cols(); ++j) da.at(i, j) += n.grad.data[j];
    };
    Tensor v = Tensor::zeros({x.cols()});
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) v.data[j] += x.at(i, j);
    return t.emit(std::move(v), {a.id}, fwd, bwd);
}

// ---- matrix ops ----

inline Var matmul(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor &x = t.value(a), &y = t.value(b);
    if (x.rank() != 2 || y.rank() != 2 || x.cols() != y.rows())
        throw std::invalid_argument("matmul: incompatible shapes");
    auto compute = [](const Tensor& x, const Tensor& y, Tensor& out) {
        std::size_t r = x.rows(), k = x.cols(), c = y.cols();
        if (out.numel() != r * c || out.rank() != 2) out = Tensor::zeros({r, c});
        else out.fill(0.0);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                double xv = x.at(i, p);
                if (xv == 0.0) continue;
                for (std::size_t j = 0; j < c; ++j) out.at(i, j) += xv * y.at(p, j);
            }
    };
    auto fwd = [ai = a.id, bi = b.id, compute](Tape& tp, Node& n) {
        compute(tp.node(ai).value, tp.node(bi).value, n.value);
    };
    auto bwd = [ai = a.id, bi = b.id](Tape& tp, Node& n) {
        const Tensor &x = tp.node(ai).value, &y = tp.node(bi).value;
        std::size_t r = x.rows(), k = x.cols(), c = y.cols();
        if (tp.node(ai).requires_grad) {
            Tensor& da = tp.ensure_grad(ai);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < c; ++j) s += n.grad.at(i, j) * y.at(p, j);
                    da.at(i, p) += s;
                }
        }
        if (tp.node(bi).requires_grad) {
            Tensor& db = tp.ensure_grad(bi);
            for (std::size_t p = 0; p < k; ++p)
                for (std::size_t i = 0; i < r; ++i) {
                    double xv = x.at(i, p);
                    if (xv == 0.0) continue;
                    for (std::size_t j = 0; j < c; ++j) db.at(p, j) += xv * n.grad.at(i, j);
                }
        }
    };
    Tensor v;
    compute(x, y, v);
    return t.emit(std::move(v), {a.id, b.id}, fwd, bwd);
}

inline Var transpose(Var a) {
    Tape& t = *a.tape;
    const Tensor& x = t.value(a);
    if (x.rank() != 2) throw std::invalid_argument("transpose: matrix required");
    auto compute = [](const Tensor& x, Tensor& out) {
        std::size_t r = x.rows(), c = x.cols();
        if (out.rank() != 2 || out.rows() != c || out.cols() != r) out = Tensor::zeros({c, r});
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out.at(j, i) = x.at(i, j);
    };
    auto fwd = [ai = a.id, compute](Tape& tp, Node& n) { compute(tp.node(ai).value, n.value); };
    auto bwd = [ai = a.id](Tape& tp, Node& n) {
        if (!tp.node(ai).requires_grad) return;
        Tensor& da = tp.ensure_grad(ai);
        std::size_t r = da.rows(), c = da.cols();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) da.at(i, j) += n.grad.at(j, i);
    };
    Tensor v;
    compute(x, v);
    return t.emit(std::move(v), {a.id}, fwd, bwd);
}

// M (r x c) + v (len c), broadcast over rows
inline Var add_rowvec(Var m, Var v) {
    Tape& t = *m.tape;
    const Tensor &x = t.value(m), &y = t.value(v);
    if (x.rank() != 2 || y.numel() != x.cols())
        throw std::invalid_argument("add_rowvec: shape mismatch");
    auto compute = [](const Tensor& x, const Tensor& y, Tensor& out) {
        out = x;
        std::size_t r = x.rows(), c = x.cols();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out.at(i, j) += y.data[j];
    };
    auto fwd = [mi = m.id, vi = v.id, compute](Tape& tp, Node& n) {
        compute(tp.node(mi).value, tp.node(vi).value, n.value);
    };
    auto bwd = [mi = m.id, vi = v.id](Tape& tp, Node& n) {
        detail::accum(tp, mi, n.grad);
        if (tp.node(vi).requires_grad) {
            Tensor& dv = tp.ensure_grad(vi);
            std::size_t r = n.grad.rows(), c = n.grad.cols();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) dv.data[j] += n.grad.at(i, j);
        }
    };
    Tensor out;
    compute(x, y, out);
    return t.emit(std::move(out), {m.id, v.id}, fwd, bwd);
}

// M (r x c) + v (len r), broadcast over columns
inline Var add_colvec(Var m, Var v) {
    Tape& t = *m.tape;
    const Tensor &x = t.value(m), &y = t.value(v);
    if (x.rank() != 2 || y.numel() != x.rows())
        throw std::invalid_argument("add_colvec: shape mismatch");
    auto compute = [](const Tensor& x, const Tensor& y, Tensor& out) {
        out = x;
        std::size_t r = x.rows(), c = x.cols();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out.at(i, j) += y.data[i];
    };
    auto fwd = [mi = m.id, vi = v.id, compute](Tape& tp, Node& n) {
        compute(tp.node(mi).value, tp.node(vi).value, n.value);
    };
    auto bwd = [mi = m.id, vi = v.id](Tape& tp, Node& n) {
        detail::accum(tp, mi, n.grad);
        if (tp.node(vi).requires_grad) {
            Tensor& dv = tp.ensure_grad(vi);
            std::size_t r = n.grad.rows(), c = n.grad.cols();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) dv.data[i] += n.grad.at(i, j);
        }
    };
    Tensor out;
    compute(x, y, out);
    return t.emit(std::move(out), {m.id, v.id}, fwd, bwd);
}

// out_ij = M_ij * v_j (scales columns)
inline Var mul_rowvec(Var m, Var v) {
    Tape& t = *m.tape;
    const Tensor &x = t.value(m), &y = t.value(v);
    if (x.rank() != 2 || y.numel() != x.cols())
        throw std::invalid_argument("mul_rowvec: shape mismatch");
    auto compute = [](const Tensor& x, const Tensor& y, Tensor& out) {
        out = x;
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < x.cols(); ++j) out.at(i, j) *= y.data[j];
    };
    auto fwd = [mi = m.id, vi = v.id, compute](Tape& tp, Node& n) {
        compute(tp.node(mi).value, tp.node(vi).value, n.value);
    };
    auto bwd = [mi = m.id, vi = v.id](Tape& tp, Node& n) {
        const Tensor &x = tp.node(mi).value, &y = tp.node(vi).value;
        if (tp.node(mi).requires_grad) {
            Tensor& dm = tp.ensure_grad(mi);
            for (std::size_t i = 0; i < x.rows(); ++i)
                for (std::size_t j = 0; j < x.cols(); ++j)
                    dm.at(i, j) += n.grad.at(i, j) * y.data[j];
        }
        if (tp.node(vi).requires_grad) {
            Tensor& dv = tp.ensure_grad(vi);
            for (std::size_t i = 0; i < x.rows(); ++i)
                for (std::size_t j = 0; j < x.cols(); ++j)
                    dv.data[j] += n.grad.at(i, j) * x.at(i, j);
        }
    };
    Tensor out;
    compute(x, y, out);
    return t.emit(std::move(out), {m.id, v.id}, fwd, bwd);
}

// out_ij = M_ij * v_i (scales rows)
inline Var mul_colvec(Var m, Var v) {
    Tape& t = *m.tape;
    const Tensor &x = t.value(m), &y = t.value(v);
    if (x.rank() != 2 || y.numel() != x.rows())
        throw std::invalid_argument("mul_colvec: shape mismatch");
    auto compute = [](const Tensor& x, const Tensor& y, Tensor& out) {
        out = x;
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < x.cols(); ++j) out.at(i, j) *= y.data[i];
    };
    auto fwd = [mi = m.id, vi = v.id, compute](Tape& tp, Node& n) {
        compute(tp.node(mi).value, tp.node(vi).value, n.value);
    };
    auto bwd = [mi = m.id, vi = v.id](Tape& tp, Node& n) {
        const Tensor &x = tp.node(mi).value, &y = tp.node(vi).value;
        if (tp.node(mi).requires_grad) {
            Tensor& dm = tp.ensure_grad(mi);
            for (std::size_t i = 0; i < x.rows(); ++i)
                for (std::size_t j = 0; j < x.cols(); ++j)
                    dm.at(i, j) += n.grad.at(i, j) * y.data[i];
        }
        if (tp.node(vi).requires_grad) {
            Tensor& dv = tp.ensure_grad(vi);
            for (std::size_t i = 0; i < x.rows(); ++i)
                for (std::size_t j = 0; j < x.cols(); ++j)
                    dv.data[i] += n.grad.at(i, j) * x.at(i, j);
        }
    };
    Tensor out;
    compute(x, y, out);
    return t.emit(std::move(out), {m.id, v.id}, fwd, bwd);
}

// stable log-sum-exp over each row: M (r x c) -> vector (r)
inline Var logsumexp_rows(Var m) {
    Tape& t = *m.tape;
    const Tensor& x = t.value(m);
    if (x.rank() != 2) throw std::invalid_argument("logsumexp_rows: matrix required");
    auto compute = [](const Tensor& x, Tensor& out) {
        std::size_t r = x.rows(), c = x.cols();
        if (out.numel() != r) out = Tensor::zeros({r});
        for (std::size_t i = 0; i < r; ++i) {
            double mx = x.at(i, 0);
            for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x.at(i, j));
            double s = 0.0;
            for (std::size_t j = 0; j < c; ++j) s += std::exp(x.at(i, j) - mx);
            out.data[i] = mx + std::log(s);
        }
    };
    auto fwd = [mi = m.id, compute](Tape& tp, Node& n) { compute(tp.node(mi).value, n.value); };
    auto bwd = [mi = m.id](Tape& tp, Node& n) {
        if (!tp.node(mi).requires_grad) return;
        const Tensor& x = tp.node(mi).value;
        Tensor& dm = tp.ensure_grad(mi);
        for (std::size_t i = 0; i < x.rows(); ++i) {
            double g = n.grad.data[i], lse = n.value.data[i];
            for (std::size_t j = 0; j < x.cols(); ++j)
                dm.at(i, j) += g * std::exp(x.at(i, j) - lse);
        }
    };
    Tensor out;
    compute(x, out);
    return t.emit(std::move(out), {m.id}, fwd, bwd);
}

inline Var logsumexp_cols(Var m) { return logsumexp_rows(transpose(m)); }

// D_ij = ||U_i - V_j||^2 for U (n x p), V (m x p)
inline Var pairwise_sqdist(Var u, Var v) {
    Tape& t = *u.tape;
    const Tensor &x = t.value(u), &y = t.value(v);
    if (x.rank() != 2 || y.rank() != 2 || x.cols() != y.cols())
        throw std::invalid_argument("pairwise_sqdist: shape mismatch");
    auto compute = [](const Tensor& x, const Tensor& y, Tensor& out) {
        std::size_t n = x.rows(), m = y.rows(), p = x.cols();
        if (out.rank() != 2 || out.rows() != n || out.cols() != m) out = Tensor::zeros({n, m});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < p; ++k) {
                    double d = x.at(i, k) - y.at(j, k);
                    s += d * d;
                }
                out.at(i, j) = s;
            }
    };
    auto fwd = [ui = u.id, vi = v.id, compute](Tape& tp, Node& n) {
        compute(tp.node(ui).value, tp.node(vi).value, n.value);
    };
    auto bwd = [ui = u.id, vi = v.id](Tape& tp, Node& n) {
        const Tensor &x = tp.node(ui).value, &y = tp.node(vi).value;
        std::size_t nn = x.rows(), m = y.rows(), p = x.cols();
        bool gu = tp.node(ui).requires_grad, gv = tp.node(vi).requires_grad;
        Tensor* du = gu ? &tp.ensure_grad(ui) : nullptr;
        Tensor* dv = gv ? &tp.ensure_grad(vi) : nullptr;
        for (std::size_t i = 0; i < nn; ++i)
            for (std::size_t j = 0; j < m; ++j) {
                double g2 = 2.0 * n.grad.at(i, j);
                if (g2 == 0.0) continue;
                for (std::size_t k = 0; k < p; ++k) {
                    double d = x.at(i, k) - y.at(j, k);
                    if (gu) du->at(i, k) += g2 * d;
                    if (gv) dv->at(j, k) -= g2 * d;
                }
            }
    };
    Tensor out;
    compute(x, y, out);
    return t.emit(std::move(out), {u.id, v.id}, fwd, bwd);
}

inline Var concat_cols(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor &x = t.value(a), &y = t.value(b);
    if (x.rank() != 2 || y.rank() != 2 || x.rows() != y.rows())
        throw std::invalid_argument("concat_cols: shape mismatch");
    auto compute = [](const Tensor& x, const Tensor& y, Tensor& out) {
        std::size_t r = x.rows(), cx = x.cols(), cy = y.cols();
        if (out.rank() != 2 || out.rows() != r || out.cols() != cx + cy)
            out = Tensor::zeros({r, cx + cy});
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < cx; ++j) out.at(i, j) = x.at(i, j);
            for (std::size_t j = 0; j < cy; ++j) out.at(i, cx + j) = y.at(i, j);
        }
    };
    auto fwd = [ai = a.id, bi = b.id, compute](Tape& tp, Node& n) {
        compute(tp.node(ai).value, tp.node(bi).value, n.value);
    };
    auto bwd = [ai = a.id, bi = b.id](Tape& tp, Node& n) {
        const Tensor& x = tp.node(ai).value;
        std::size_t r = x.rows(), cx = x.cols(), cy = n.grad.cols() - cx;
        if (tp.node(ai).requires_grad) {
            Tensor& da = tp.ensure_grad(ai);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < cx; ++j) da.at(i, j) += n.grad.at(i, j);
        }
        if (tp.node(bi).requires_grad) {
            Tensor& db = tp.ensure_grad(bi);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < cy; ++j) db.at(i, j) += n.grad.at(i, cx + j);
        }
    };
    Tensor out;
    compute(x, y, out);
    return t.emit(std::move(out), {a.id, b.id}, fwd, bwd);
}

inline Var dot(Var a, Var b) { return sum(mul(a, b)); }

// contiguous sub-matrix copy: rows [r0, r0+nr), cols [c0, c0+nc)
inline Var block(Var a, std::size_t r0, std::size_t nr, std::size_t c0, std::size_t nc) {
    Tape& t = *a.tape;
    const Tensor& x = t.value(a);
    if (x.rank() != 2 || r0 + nr > x.rows() || c0 + nc > x.cols())
        throw std::invalid_argument("block: out of range");
    auto compute = [r0, nr, c0, nc](const Tensor& x, Tensor& out) {
        if (out.rank() != 2 || out.rows() != nr || out.cols() != nc)
            out = Tensor::zeros({nr, nc});
        for (std::size_t i = 0; i < nr; ++i)
            for (std::size_t j = 0; j < nc; ++j) out.at(i, j) = x.at(r0 + i, c0 + j);
    };
    auto fwd = [ai = a.id, compute](Tape& tp, Node& n) { compute(tp.node(ai).value, n.value); };
    auto bwd = [ai = a.id, r0, nr, c0, nc](Tape& tp, Node& n) {
        if (!tp.node(ai).requires_grad) return;
        Tensor& da = tp.ensure_grad(ai);
        for (std::size_t i = 0; i < nr; ++i)
            for (std::size_t j = 0; j < nc; ++j) da.at(r0 + i, c0 + j) += n.grad.at(i, j);
    };
    Tensor out;
    compute(x, out);
    return t.emit(std::move(out), {a.id}, fwd, bwd);
}

// vector -> (r x c) matrix view (row-major), sharing no storage
inline Var as_matrix(Var a, std::size_t r, std::size_t c) {
    Tape& t = *a.tape;
    const Tensor& x = t.value(a);
    if (x.numel() != r * c) throw std::invalid_argument("as_matrix: size mismatch");
    auto fwd = [ai = a.id, r, c](Tape& tp, Node& n) {
        n.value = Tensor({r, c}, tp.node(ai).value.data);
    };
    auto bwd = [ai = a.id](Tape& tp, Node& n) {
        if (!tp.node(ai).requires_grad) return;
        Tensor& da = tp.ensure_grad(ai);
        for (std::size_t k = 0; k < da.data.size(); ++k) da.data[k] += n.grad.data[k];
    };
    return t.emit(Tensor({r, c}, x.data), {a.id}, fwd, bwd);
}

}  // namespace hk::autodiff
