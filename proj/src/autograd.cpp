#include "ftlab/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

namespace ftlab::ag {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapM = Eigen::Map<const RowMat<T>>;
template <typename T>
using StrideMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStrideMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> fn) {
    auto n = std::make_shared<Node<T>>();
    n->owned = std::move(value);
    for (auto& p : parents) {
        if (!p.valid()) continue;
        n->requires_grad = n->requires_grad || p.requires_grad();
        n->parents.push_back(p.shared());
    }
    if (n->requires_grad) n->backward_fn = std::move(fn);
    return Var<T>(std::move(n));
}

template <typename T>
bool wants(const Var<T>& v) {
    return v.valid() && v.requires_grad();
}

template <typename T>
Tensor<T>& gbuf(const Var<T>& v) {
    return v.node()->grad_buf();
}

void require(bool ok, const std::string& what) {
    if (!ok) throw InputError(what);
}

template <typename T>
Tensor<T> scalar_tensor(T v) {
    return Tensor<T>(Shape{}, std::vector<T>{v});
}

}  // namespace

template <typename T>
void backward(const Var<T>& root) {
    require(root.value().numel() == 1, "backward() needs a single-element root");
    if (!root.requires_grad()) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node<T>* p = n->parents[i++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root.node()->grad_buf()[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
    return make_result<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
        for (const auto* v : {&a, &b}) {
            if (!wants(*v)) continue;
            auto& g = gbuf(*v);
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
    });
}

template <typename T>
Var<T> add_broadcast(const Var<T>& x, const Var<T>& p) {
    const auto& xs = x.shape();
    const auto& ps = p.shape();
    require(ps.size() <= xs.size() && std::equal(ps.rbegin(), ps.rend(), xs.rbegin()),
            "add_broadcast: " + shape_str(ps) + " is not a suffix of " + shape_str(xs));
    const std::int64_t inner = p.value().numel();
    Tensor<T> out = x.value();
    const auto& pv = p.value();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += pv[i % inner];
    return make_result<T>(std::move(out), {x, p}, [x, p, inner](Node<T>& n) {
        if (wants(x)) {
            auto& g = gbuf(x);
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
        if (wants(p)) {
            auto& g = gbuf(p);
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i % inner] += n.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    return make_result<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
        if (wants(a)) {
            auto& g = gbuf(a);
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * b.value()[i];
        }
        if (wants(b)) {
            auto& g = gbuf(b);
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * a.value()[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
    Tensor<T> out = x.value();
    for (auto& v : out.vec()) v *= s;
    return make_result<T>(std::move(out), {x}, [x, s](Node<T>& n) {
        auto& g = gbuf(x);
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += s * n.grad[i];
    });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
    Tensor<T> out = x.value();
    for (auto& v : out.vec()) v = T(0.5) * v * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
    return make_result<T>(std::move(out), {x}, [x](Node<T>& n) {
        auto& g = gbuf(x);
        const auto& xv = x.value();
        const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            const T u = xv[i];
            const T cdf = T(0.5) * (T(1) + std::erf(u / std::numbers::sqrt2_v<T>));
            const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * u * u);
            g[i] += n.grad[i] * (cdf + u * pdf);
        }
    });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    Tensor<T> out = x.value();
    for (auto& v : out.vec()) v = v > T(0) ? v : T(0);
    return make_result<T>(std::move(out), {x}, [x](Node<T>& n) {
        auto& g = gbuf(x);
        const auto& xv = x.value();
        for (std::int64_t i = 0; i < g.numel(); ++i)
            if (xv[i] > T(0)) g[i] += n.grad[i];
    });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    require(w.value().rank() == 2, "linear: weight must be 2-D");
    const std::int64_t in = w.dim(0), outd = w.dim(1);
    require(x.value().cols() == in,
            "linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
    if (b.valid()) require(b.value().numel() == outd, "linear: bias size mismatch");
    const std::int64_t rows = x.value().rows();
    Shape os = x.shape();
    os.back() = outd;
    Tensor<T> out(os);
    MapM<T> Y(out.data(), rows, outd);
    Y.noalias() = CMapM<T>(x.value().data(), rows, in) * CMapM<T>(w.value().data(), in, outd);
    if (b.valid()) Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value().data(), outd);
    return make_result<T>(std::move(out), {x, w, b}, [x, w, b, rows, in, outd](Node<T>& n) {
        CMapM<T> dY(n.grad.data(), rows, outd);
        if (wants(x)) MapM<T>(gbuf(x).data(), rows, in).noalias() += dY * CMapM<T>(w.value().data(), in, outd).transpose();
        if (wants(w))
            MapM<T>(gbuf(w).data(), in, outd).noalias() += CMapM<T>(x.value().data(), rows, in).transpose() * dY;
        if (wants(b)) {
            auto& g = gbuf(b);
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t c = 0; c < outd; ++c) g[c] += n.grad[r * outd + c];
        }
    });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
    const std::int64_t d = x.value().cols(), rows = x.value().rows();
    require(gamma.value().numel() == d && beta.value().numel() == d, "layer_norm: affine size mismatch");
    Tensor<T> out(x.shape());
    auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows * d));
    auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
    const T* xv = x.value().data();
    const T* gv = gamma.value().data();
    const T* bv = beta.value().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = xv + r * d;
        T mean = 0;
        for (std::int64_t c = 0; c < d; ++c) mean += xr[c];
        mean /= T(d);
        T var = 0;
        for (std::int64_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
        var /= T(d);
        const T rs = T(1) / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        for (std::int64_t c = 0; c < d; ++c) {
            const T h = (xr[c] - mean) * rs;
            (*xhat)[r * d + c] = h;
            out[r * d + c] = h * gv[c] + bv[c];
        }
    }
    return make_result<T>(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, rstd, d, rows](Node<T>& n) {
        const T* gv = gamma.value().data();
        if (wants(gamma) || wants(beta)) {
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t c = 0; c < d; ++c) {
                    const T dy = n.grad[r * d + c];
                    if (wants(gamma)) gbuf(gamma)[c] += dy * (*xhat)[r * d + c];
                    if (wants(beta)) gbuf(beta)[c] += dy;
                }
        }
        if (!wants(x)) return;
        auto& gx = gbuf(x);
        for (std::int64_t r = 0; r < rows; ++r) {
            T m1 = 0, m2 = 0;
            for (std::int64_t c = 0; c < d; ++c) {
                const T dh = n.grad[r * d + c] * gv[c];
                m1 += dh;
                m2 += dh * (*xhat)[r * d + c];
            }
            m1 /= T(d);
            m2 /= T(d);
            for (std::int64_t c = 0; c < d; ++c) {
                const T dh = n.grad[r * d + c] * gv[c];
                gx[r * d + c] += (*rstd)[r] * (dh - m1 - (*xhat)[r * d + c] * m2);
            }
        }
    });
}

template <typename T>
Var<T> attention(const Var<T>& qkv, int heads) {
    const auto& s = qkv.shape();
    require(s.size() == 3 && s[2] % 3 == 0, "attention: expected [B, T, 3d], got " + shape_str(s));
    const std::int64_t B = s[0], Tn = s[1], d = s[2] / 3;
    require(heads > 0 && d % heads == 0, "attention: width not divisible by heads");
    const std::int64_t dh = d / heads;
    const T sc = T(1) / std::sqrt(T(dh));
    Tensor<T> out(Shape{B, Tn, d});
    auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(B * heads * Tn * Tn));
    const T* in = qkv.value().data();
    for (std::int64_t b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h) {
            const T* base = in + b * Tn * 3 * d + h * dh;
            CStrideMap<T> Q(base, Tn, dh, Eigen::OuterStride<>(3 * d));
            CStrideMap<T> K(base + d, Tn, dh, Eigen::OuterStride<>(3 * d));
            CStrideMap<T> V(base + 2 * d, Tn, dh, Eigen::OuterStride<>(3 * d));
            MapM<T> P(probs->data() + (b * heads + h) * Tn * Tn, Tn, Tn);
            P.noalias() = (Q * K.transpose()) * sc;
            for (std::int64_t i = 0; i < Tn; ++i) {
                const T mx = P.row(i).maxCoeff();
                P.row(i) = (P.row(i).array() - mx).exp();
                P.row(i) /= P.row(i).sum();
            }
            StrideMap<T> O(out.data() + b * Tn * d + h * dh, Tn, dh, Eigen::OuterStride<>(d));
            O.noalias() = P * V;
        }
    return make_result<T>(std::move(out), {qkv}, [qkv, probs, B, Tn, d, dh, heads, sc](Node<T>& n) {
        auto& g = gbuf(qkv);
        const T* in = qkv.value().data();
        RowMat<T> dP(Tn, Tn), dS(Tn, Tn);
        for (std::int64_t b = 0; b < B; ++b)
            for (int h = 0; h < heads; ++h) {
                const T* base = in + b * Tn * 3 * d + h * dh;
                CStrideMap<T> Q(base, Tn, dh, Eigen::OuterStride<>(3 * d));
                CStrideMap<T> K(base + d, Tn, dh, Eigen::OuterStride<>(3 * d));
                CStrideMap<T> V(base + 2 * d, Tn, dh, Eigen::OuterStride<>(3 * d));
                CMapM<T> P(probs->data() + (b * heads + h) * Tn * Tn, Tn, Tn);
                CStrideMap<T> dO(n.grad.data() + b * Tn * d + h * dh, Tn, dh, Eigen::OuterStride<>(d));
                T* gbase = g.data() + b * Tn * 3 * d + h * dh;
                StrideMap<T> dQ(gbase, Tn, dh, Eigen::OuterStride<>(3 * d));
                StrideMap<T> dK(gbase + d, Tn, dh, Eigen::OuterStride<>(3 * d));
                StrideMap<T> dV(gbase + 2 * d, Tn, dh, Eigen::OuterStride<>(3 * d));
                dV.noalias() += P.transpose() * dO;
                dP.noalias() = dO * V.transpose();
                for (std::int64_t i = 0; i < Tn; ++i) {
                    const T dot = P.row(i).dot(dP.row(i));
                    dS.row(i) = P.row(i).array() * (dP.row(i).array() - dot);
                }
                dQ.noalias() += (dS * K) * sc;
                dK.noalias() += (dS.transpose() * Q) * sc;
            }
    });
}

template <typename T>
Var<T> prepend_token(const Var<T>& x, const Var<T>& token) {
    const auto& s = x.shape();
    require(s.size() == 3 && token.value().numel() == s[2], "prepend_token: shape mismatch");
    const std::int64_t B = s[0], Tn = s[1], d = s[2];
    Tensor<T> out(Shape{B, Tn + 1, d});
    for (std::int64_t b = 0; b < B; ++b) {
        std::copy_n(token.value().data(), d, out.data() + b * (Tn + 1) * d);
        std::copy_n(x.value().data() + b * Tn * d, Tn * d, out.data() + b * (Tn + 1) * d + d);
    }
    return make_result<T>(std::move(out), {x, token}, [x, token, B, Tn, d](Node<T>& n) {
        for (std::int64_t b = 0; b < B; ++b) {
            const T* gb = n.grad.data() + b * (Tn + 1) * d;
            if (wants(token))
                for (std::int64_t c = 0; c < d; ++c) gbuf(token)[c] += gb[c];
            if (wants(x)) {
                T* gx = gbuf(x).data() + b * Tn * d;
                for (std::int64_t i = 0; i < Tn * d; ++i) gx[i] += gb[d + i];
            }
        }
    });
}

template <typename T>
Var<T> concat_tokens(const Var<T>& a, const Var<T>& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    require(sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0] && sa[2] == sb[2], "concat_tokens: shape mismatch");
    const std::int64_t B = sa[0], Ta = sa[1], Tb = sb[1], d = sa[2];
    Tensor<T> out(Shape{B, Ta + Tb, d});
    for (std::int64_t i = 0; i < B; ++i) {
        std::copy_n(a.value().data() + i * Ta * d, Ta * d, out.data() + i * (Ta + Tb) * d);
        std::copy_n(b.value().data() + i * Tb * d, Tb * d, out.data() + i * (Ta + Tb) * d + Ta * d);
    }
    return make_result<T>(std::move(out), {a, b}, [a, b, B, Ta, Tb, d](Node<T>& n) {
        for (std::int64_t i = 0; i < B; ++i) {
            const T* g = n.grad.data() + i * (Ta + Tb) * d;
            if (wants(a)) {
                T* ga = gbuf(a).data() + i * Ta * d;
                for (std::int64_t j = 0; j < Ta * d; ++j) ga[j] += g[j];
            }
            if (wants(b)) {
                T* gb = gbuf(b).data() + i * Tb * d;
                for (std::int64_t j = 0; j < Tb * d; ++j) gb[j] += g[Ta * d + j];
            }
        }
    });
}

template <typename T>
Var<T> slice_tokens(const Var<T>& x, std::int64_t start, std::int64_t count) {
    const auto& s = x.shape();
    require(s.size() == 3 && start >= 0 && count >= 0 && start + count <= s[1], "slice_tokens: range out of bounds");
    const std::int64_t B = s[0], Tn = s[1], d = s[2];
    Tensor<T> out(Shape{B, count, d});
    for (std::int64_t b = 0; b < B; ++b)
        std::copy_n(x.value().data() + (b * Tn + start) * d, count * d, out.data() + b * count * d);
    return make_result<T>(std::move(out), {x}, [x, B, Tn, d, start, count](Node<T>& n) {
        auto& g = gbuf(x);
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t j = 0; j < count * d; ++j) g[(b * Tn + start) * d + j] += n.grad[b * count * d + j];
    });
}

template <typename T>
Var<T> gather_tokens(const Var<T>& x, const std::vector<std::vector<std::int64_t>>& index) {
    const auto& s = x.shape();
    require(s.size() == 3 && static_cast<std::int64_t>(index.size()) == s[0], "gather_tokens: batch mismatch");
    const std::int64_t B = s[0], Tn = s[1], d = s[2];
    const std::int64_t K = index.empty() ? 0 : static_cast<std::int64_t>(index[0].size());
    Tensor<T> out(Shape{B, K, d});
    for (std::int64_t b = 0; b < B; ++b) {
        require(static_cast<std::int64_t>(index[b].size()) == K, "gather_tokens: ragged index");
        for (std::int64_t j = 0; j < K; ++j) {
            const std::int64_t t = index[b][j];
            require(t >= 0 && t < Tn, "gather_tokens: index out of range");
            std::copy_n(x.value().data() + (b * Tn + t) * d, d, out.data() + (b * K + j) * d);
        }
    }
    return make_result<T>(std::move(out), {x}, [x, index, B, Tn, K, d](Node<T>& n) {
        auto& g = gbuf(x);
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t j = 0; j < K; ++j)
                for (std::int64_t c = 0; c < d; ++c) g[(b * Tn + index[b][j]) * d + c] += n.grad[(b * K + j) * d + c];
    });
}

template <typename T>
Var<T> scatter_tokens(const Var<T>& x, const Var<T>& fill, const std::vector<std::vector<std::int64_t>>& index,
                      std::int64_t total) {
    const auto& s = x.shape();
    require(s.size() == 3 && static_cast<std::int64_t>(index.size()) == s[0], "scatter_tokens: batch mismatch");
    const std::int64_t B = s[0], K = s[1], d = s[2];
    require(fill.value().numel() == d, "scatter_tokens: fill token width mismatch");
    Tensor<T> out(Shape{B, total, d});
    auto filled = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(B * total), 1);
    for (std::int64_t b = 0; b < B; ++b) {
        require(static_cast<std::int64_t>(index[b].size()) == K, "scatter_tokens: ragged index");
        for (std::int64_t j = 0; j < K; ++j) {
            const std::int64_t t = index[b][j];
            require(t >= 0 && t < total, "scatter_tokens: index out of range");
            std::copy_n(x.value().data() + (b * K + j) * d, d, out.data() + (b * total + t) * d);
            (*filled)[b * total + t] = 0;
        }
        for (std::int64_t t = 0; t < total; ++t)
            if ((*filled)[b * total + t]) std::copy_n(fill.value().data(), d, out.data() + (b * total + t) * d);
    }
    return make_result<T>(std::move(out), {x, fill}, [x, fill, index, filled, B, K, d, total](Node<T>& n) {
        if (wants(x)) {
            auto& g = gbuf(x);
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t j = 0; j < K; ++j)
                    for (std::int64_t c = 0; c < d; ++c)
                        g[(b * K + j) * d + c] += n.grad[(b * total + index[b][j]) * d + c];
        }
        if (wants(fill)) {
            auto& g = gbuf(fill);
            for (std::int64_t i = 0; i < B * total; ++i)
                if ((*filled)[i])
                    for (std::int64_t c = 0; c < d; ++c) g[c] += n.grad[i * d + c];
        }
    });
}

template <typename T>
Var<T> mean_tokens(const Var<T>& x, std::int64_t start) {
    const auto& s = x.shape();
    require(s.size() == 3 && start >= 0 && start < s[1], "mean_tokens: no tokens to average");
    const std::int64_t B = s[0], Tn = s[1], d = s[2];
    const T inv = T(1) / T(Tn - start);
    Tensor<T> out(Shape{B, d});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t t = start; t < Tn; ++t)
            for (std::int64_t c = 0; c < d; ++c) out[b * d + c] += x.value()[(b * Tn + t) * d + c];
    for (auto& v : out.vec()) v *= inv;
    return make_result<T>(std::move(out), {x}, [x, B, Tn, d, start, inv](Node<T>& n) {
        auto& g = gbuf(x);
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t t = start; t < Tn; ++t)
                for (std::int64_t c = 0; c < d; ++c) g[(b * Tn + t) * d + c] += n.grad[b * d + c] * inv;
    });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    Tensor<T> out = x.value().reshaped(std::move(shape));
    return make_result<T>(std::move(out), {x}, [x](Node<T>& n) {
        auto& g = gbuf(x);
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    });
}

template <typename T>
Var<T> concat_last(const Var<T>& a, const Var<T>& b) {
    require(a.value().rows() == b.value().rows(), "concat_last: row count mismatch");
    const std::int64_t R = a.value().rows(), da = a.value().cols(), db = b.value().cols();
    Tensor<T> out(Shape{R, da + db});
    for (std::int64_t r = 0; r < R; ++r) {
        std::copy_n(a.value().data() + r * da, da, out.data() + r * (da + db));
        std::copy_n(b.value().data() + r * db, db, out.data() + r * (da + db) + da);
    }
    return make_result<T>(std::move(out), {a, b}, [a, b, R, da, db](Node<T>& n) {
        for (std::int64_t r = 0; r < R; ++r) {
            if (wants(a))
                for (std::int64_t c = 0; c < da; ++c) gbuf(a)[r * da + c] += n.grad[r * (da + db) + c];
            if (wants(b))
                for (std::int64_t c = 0; c < db; ++c) gbuf(b)[r * db + c] += n.grad[r * (da + db) + da + c];
        }
    });
}

template <typename T>
Var<T> l2_normalize(const Var<T>& x, T eps) {
    const std::int64_t R = x.value().rows(), d = x.value().cols();
    Tensor<T> out(x.shape());
    auto norms = std::make_shared<std::vector<T>>(static_cast<std::size_t>(R));
    for (std::int64_t r = 0; r < R; ++r) {
        T ss = 0;
        for (std::int64_t c = 0; c < d; ++c) ss += x.value()[r * d + c] * x.value()[r * d + c];
        const T nr = std::max(std::sqrt(ss), eps);
        (*norms)[r] = nr;
        for (std::int64_t c = 0; c < d; ++c) out[r * d + c] = x.value()[r * d + c] / nr;
    }
    auto y = make_result<T>(std::move(out), {x}, nullptr);
    if (y.requires_grad()) {
        Node<T>* self = y.node();
        y.node()->backward_fn = [x, norms, R, d, self](Node<T>& n) {
            auto& g = gbuf(x);
            const auto& yv = self->owned;
            for (std::int64_t r = 0; r < R; ++r) {
                T dot = 0;
                for (std::int64_t c = 0; c < d; ++c) dot += n.grad[r * d + c] * yv[r * d + c];
                for (std::int64_t c = 0; c < d; ++c)
                    g[r * d + c] += (n.grad[r * d + c] - yv[r * d + c] * dot) / (*norms)[r];
            }
        };
    }
    return y;
}

template <typename T>
Var<T> tokens_to_grid(const Var<T>& x, std::int64_t grid) {
    const auto& s = x.shape();
    require(s.size() == 3 && s[1] == grid * grid, "tokens_to_grid: token count is not grid^2");
    const std::int64_t B = s[0], P = s[1], C = s[2];
    Tensor<T> out(Shape{B, C, grid, grid});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t p = 0; p < P; ++p)
            for (std::int64_t c = 0; c < C; ++c) out[(b * C + c) * P + p] = x.value()[(b * P + p) * C + c];
    return make_result<T>(std::move(out), {x}, [x, B, P, C](Node<T>& n) {
        auto& g = gbuf(x);
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t p = 0; p < P; ++p)
                for (std::int64_t c = 0; c < C; ++c) g[(b * P + p) * C + c] += n.grad[(b * C + c) * P + p];
    });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const auto& s = x.shape();
    const auto& ws = w.shape();
    require(s.size() == 4 && ws.size() == 4 && ws[1] == s[1] && ws[2] == ws[3] && ws[2] % 2 == 1,
            "conv2d: incompatible input " + shape_str(s) + " / weight " + shape_str(ws));
    const std::int64_t B = s[0], Ci = s[1], H = s[2], W = s[3], Co = ws[0], k = ws[2], pad = k / 2;
    const std::int64_t HW = H * W, KK = Ci * k * k;
    auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(B * KK * HW), T(0));
    for (std::int64_t bi = 0; bi < B; ++bi)
        for (std::int64_t c = 0; c < Ci; ++c)
            for (std::int64_t ky = 0; ky < k; ++ky)
                for (std::int64_t kx = 0; kx < k; ++kx) {
                    T* row = cols->data() + (bi * KK + (c * k + ky) * k + kx) * HW;
                    const T* src = x.value().data() + (bi * Ci + c) * HW;
                    for (std::int64_t y = 0; y < H; ++y) {
                        const std::int64_t sy = y + ky - pad;
                        if (sy < 0 || sy >= H) continue;
                        for (std::int64_t xx = 0; xx < W; ++xx) {
                            const std::int64_t sx = xx + kx - pad;
                            if (sx >= 0 && sx < W) row[y * W + xx] = src[sy * W + sx];
                        }
                    }
                }
    Tensor<T> out(Shape{B, Co, H, W});
    CMapM<T> Wm(w.value().data(), Co, KK);
    for (std::int64_t bi = 0; bi < B; ++bi) {
        MapM<T> Y(out.data() + bi * Co * HW, Co, HW);
        Y.noalias() = Wm * CMapM<T>(cols->data() + bi * KK * HW, KK, HW);
        if (b.valid())
            for (std::int64_t o = 0; o < Co; ++o) Y.row(o).array() += b.value()[o];
    }
    return make_result<T>(std::move(out), {x, w, b}, [x, w, b, cols, B, Ci, H, W, Co, k, pad, HW, KK](Node<T>& n) {
        CMapM<T> Wm(w.value().data(), Co, KK);
        RowMat<T> dcol(KK, HW);
        for (std::int64_t bi = 0; bi < B; ++bi) {
            CMapM<T> dY(n.grad.data() + bi * Co * HW, Co, HW);
            if (wants(w))
                MapM<T>(gbuf(w).data(), Co, KK).noalias() += dY * CMapM<T>(cols->data() + bi * KK * HW, KK, HW).transpose();
            if (wants(b))
                for (std::int64_t o = 0; o < Co; ++o) gbuf(b)[o] += dY.row(o).sum();
            if (!wants(x)) continue;
            dcol.noalias() = Wm.transpose() * dY;
            T* gx = gbuf(x).data();
            for (std::int64_t c = 0; c < Ci; ++c)
                for (std::int64_t ky = 0; ky < k; ++ky)
                    for (std::int64_t kx = 0; kx < k; ++kx) {
                        const T* row = dcol.data() + ((c * k + ky) * k + kx) * HW;
                        T* dst = gx + (bi * Ci + c) * HW;
                        for (std::int64_t y = 0; y < H; ++y) {
                            const std::int64_t sy = y + ky - pad;
                            if (sy < 0 || sy >= H) continue;
                            for (std::int64_t xx = 0; xx < W; ++xx) {
                                const std::int64_t sx = xx + kx - pad;
                                if (sx >= 0 && sx < W) dst[sy * W + sx] += row[y * W + xx];
                            }
                        }
                    }
        }
    });
}

template <typename T>
Var<T> upsample2x(const Var<T>& x) {
    const auto& s = x.shape();
    require(s.size() == 4, "upsample2x: expected [B, C, H, W]");
    const std::int64_t BC = s[0] * s[1], H = s[2], W = s[3];
    Tensor<T> out(Shape{s[0], s[1], 2 * H, 2 * W});
    for (std::int64_t i = 0; i < BC; ++i)
        for (std::int64_t y = 0; y < 2 * H; ++y)
            for (std::int64_t xx = 0; xx < 2 * W; ++xx)
                out[(i * 2 * H + y) * 2 * W + xx] = x.value()[(i * H + y / 2) * W + xx / 2];
    return make_result<T>(std::move(out), {x}, [x, BC, H, W](Node<T>& n) {
        auto& g = gbuf(x);
        for (std::int64_t i = 0; i < BC; ++i)
            for (std::int64_t y = 0; y < 2 * H; ++y)
                for (std::int64_t xx = 0; xx < 2 * W; ++xx)
                    g[(i * H + y / 2) * W + xx / 2] += n.grad[(i * 2 * H + y) * 2 * W + xx];
    });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    require(sa.size() == 4 && sb.size() == 4 && sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3],
            "concat_channels: shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
    const std::int64_t B = sa[0], Ca = sa[1], Cb = sb[1], HW = sa[2] * sa[3];
    Tensor<T> out(Shape{B, Ca + Cb, sa[2], sa[3]});
    for (std::int64_t i = 0; i < B; ++i) {
        std::copy_n(a.value().data() + i * Ca * HW, Ca * HW, out.data() + i * (Ca + Cb) * HW);
        std::copy_n(b.value().data() + i * Cb * HW, Cb * HW, out.data() + (i * (Ca + Cb) + Ca) * HW);
    }
    return make_result<T>(std::move(out), {a, b}, [a, b, B, Ca, Cb, HW](Node<T>& n) {
        for (std::int64_t i = 0; i < B; ++i) {
            if (wants(a))
                for (std::int64_t j = 0; j < Ca * HW; ++j) gbuf(a)[i * Ca * HW + j] += n.grad[i * (Ca + Cb) * HW + j];
            if (wants(b))
                for (std::int64_t j = 0; j < Cb * HW; ++j)
                    gbuf(b)[i * Cb * HW + j] += n.grad[(i * (Ca + Cb) + Ca) * HW + j];
        }
    });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
    T s = 0;
    for (auto v : x.value().vec()) s += v;
    return make_result<T>(scalar_tensor(s), {x}, [x](Node<T>& n) {
        auto& g = gbuf(x);
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[0];
    });
}

namespace {

// Stable -log softmax of logits[0] over the row; also writes softmax probabilities.
template <typename T>
T neg_log_softmax_first(std::span<const T> logits, std::span<T> prob) {
    const T mx = *std::max_element(logits.begin(), logits.end());
    T z = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        prob[i] = std::exp(logits[i] - mx);
        z += prob[i];
    }
    for (auto& p : prob) p /= z;
    return -(logits[0] - mx - std::log(z));
}

}  // namespace

template <typename T>
Var<T> infonce(const Var<T>& q, const Var<T>& k_pos, const Var<T>& k_neg, T tau) {
    if (!(tau > T(0))) throw ConfigError("infonce: temperature must be positive");
    require(q.shape() == k_pos.shape() && q.value().rank() == 2, "infonce: query/positive shape mismatch");
    require(k_neg.value().rank() == 2 && k_neg.dim(1) == q.dim(1) && k_neg.dim(0) >= 1,
            "infonce: negatives must be [N >= 1, dim]");
    const std::int64_t B = q.dim(0), d = q.dim(1), N = k_neg.dim(0);
    const T* qv = q.value().data();
    const T* pv = k_pos.value().data();
    const T* nv = k_neg.value().data();
    auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(B * (N + 1)));
    std::vector<T> logits(static_cast<std::size_t>(N + 1));
    T loss = 0;
    for (std::int64_t i = 0; i < B; ++i) {
        T dot = 0;
        for (std::int64_t c = 0; c < d; ++c) dot += qv[i * d + c] * pv[i * d + c];
        logits[0] = dot / tau;
        for (std::int64_t j = 0; j < N; ++j) {
            dot = 0;
            for (std::int64_t c = 0; c < d; ++c) dot += qv[i * d + c] * nv[j * d + c];
            logits[j + 1] = dot / tau;
        }
        loss += neg_log_softmax_first<T>(logits, std::span<T>(probs->data() + i * (N + 1), N + 1));
    }
    loss /= T(B);
    return make_result<T>(scalar_tensor(loss), {q, k_pos, k_neg}, [q, k_pos, k_neg, probs, B, d, N, tau](Node<T>& n) {
        const T go = n.grad[0] / (T(B) * tau);
        const T* qv = q.value().data();
        const T* pv = k_pos.value().data();
        const T* nv = k_neg.value().data();
        for (std::int64_t i = 0; i < B; ++i) {
            const T* p = probs->data() + i * (N + 1);
            // dL/dlogit_0 = p0 - 1, dL/dlogit_j = p_j.
            const T a0 = (p[0] - T(1)) * go;
            for (std::int64_t c = 0; c < d; ++c) {
                if (wants(q)) {
                    T acc = a0 * pv[i * d + c];
                    for (std::int64_t j = 0; j < N; ++j) acc += p[j + 1] * go * nv[j * d + c];
                    gbuf(q)[i * d + c] += acc;
                }
                if (wants(k_pos)) gbuf(k_pos)[i * d + c] += a0 * qv[i * d + c];
                if (wants(k_neg))
                    for (std::int64_t j = 0; j < N; ++j) gbuf(k_neg)[j * d + c] += p[j + 1] * go * qv[i * d + c];
            }
        }
    });
}

template <typename T>
Var<T> infonce_in_batch(const Var<T>& q, const Var<T>& k, T tau) {
    if (!(tau > T(0))) throw ConfigError("infonce: temperature must be positive");
    require(q.shape() == k.shape() && q.value().rank() == 2, "infonce_in_batch: shape mismatch");
    const std::int64_t B = q.dim(0), d = q.dim(1);
    require(B >= 2, "infonce_in_batch: needs at least two keys");
    auto S = std::make_shared<RowMat<T>>(B, B);
    *S = (CMapM<T>(q.value().data(), B, d) * CMapM<T>(k.value().data(), B, d).transpose()) / tau;
    // Row i: positive is column i; reorder so the positive comes first.
    auto probs = std::make_shared<RowMat<T>>(B, B);
    std::vector<T> row(static_cast<std::size_t>(B)), pr(static_cast<std::size_t>(B));
    T loss = 0;
    for (std::int64_t i = 0; i < B; ++i) {
        row[0] = (*S)(i, i);
        for (std::int64_t j = 0, o = 1; j < B; ++j)
            if (j != i) row[o++] = (*S)(i, j);
        loss += neg_log_softmax_first<T>(row, pr);
        (*probs)(i, i) = pr[0];
        for (std::int64_t j = 0, o = 1; j < B; ++j)
            if (j != i) (*probs)(i, j) = pr[o++];
    }
    loss /= T(B);
    return make_result<T>(scalar_tensor(loss), {q, k}, [q, k, probs, B, d, tau](Node<T>& n) {
        RowMat<T> dS = *probs;
        dS.diagonal().array() -= T(1);
        dS *= n.grad[0] / (T(B) * tau);
        if (wants(q)) MapM<T>(gbuf(q).data(), B, d).noalias() += dS * CMapM<T>(k.value().data(), B, d);
        if (wants(k)) MapM<T>(gbuf(k).data(), B, d).noalias() += dS.transpose() * CMapM<T>(q.value().data(), B, d);
    });
}

template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& targets) {
    require(logits.shape() == targets.shape(), "bce_with_logits: target shape mismatch");
    const std::int64_t n = logits.value().numel();
    require(n > 0, "bce_with_logits: empty input");
    T loss = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const T x = logits.value()[i], y = targets[i];
        loss += std::max(x, T(0)) - x * y + std::log1p(std::exp(-std::abs(x)));
    }
    loss /= T(n);
    return make_result<T>(scalar_tensor(loss), {logits}, [logits, targets, n](Node<T>& nd) {
        auto& g = gbuf(logits);
        const T go = nd.grad[0] / T(n);
        for (std::int64_t i = 0; i < n; ++i) {
            const T x = logits.value()[i];
            const T sig = x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
            g[i] += go * (sig - targets[i]);
        }
    });
}

template <typename T>
Var<T> masked_mse(const Var<T>& pred, const Tensor<T>& target, const std::vector<std::uint8_t>& mask) {
    require(pred.shape() == target.shape() && pred.value().rank() == 3, "masked_mse: prediction/target shape mismatch");
    const std::int64_t B = pred.dim(0), P = pred.dim(1), D = pred.dim(2);
    require(static_cast<std::int64_t>(mask.size()) == B * P, "masked_mse: mask size mismatch");
    std::vector<std::int64_t> counts(static_cast<std::size_t>(B), 0);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t p = 0; p < P; ++p) counts[b] += mask[b * P + p] ? 1 : 0;
    for (auto c : counts)
        if (c == 0) throw ConfigError("masked_mse: a sample has no masked patches");
    T loss = 0;
    for (std::int64_t b = 0; b < B; ++b) {
        T s = 0;
        for (std::int64_t p = 0; p < P; ++p) {
            if (!mask[b * P + p]) continue;
            for (std::int64_t c = 0; c < D; ++c) {
                const T e = pred.value()[(b * P + p) * D + c] - target[(b * P + p) * D + c];
                s += e * e;
            }
        }
        loss += s / T(counts[b] * D);
    }
    loss /= T(B);
    return make_result<T>(scalar_tensor(loss), {pred}, [pred, target, mask, counts, B, P, D](Node<T>& n) {
        auto& g = gbuf(pred);
        for (std::int64_t b = 0; b < B; ++b) {
            const T w = n.grad[0] * T(2) / (T(B) * T(counts[b] * D));
            for (std::int64_t p = 0; p < P; ++p) {
                if (!mask[b * P + p]) continue;
                for (std::int64_t c = 0; c < D; ++c) {
                    const std::int64_t i = (b * P + p) * D + c;
                    g[i] += w * (pred.value()[i] - target[i]);
                }
            }
        }
    });
}

template <typename T>
Var<T> dice_loss(const Var<T>& logits, const Tensor<T>& target, T smooth) {
    require(logits.shape() == target.shape() && logits.value().rank() >= 2, "dice_loss: target shape mismatch");
    const std::int64_t B = logits.dim(0), M = logits.value().numel() / B;
    auto sig = std::make_shared<std::vector<T>>(static_cast<std::size_t>(B * M));
    auto inter = std::make_shared<std::vector<T>>(static_cast<std::size_t>(B), T(0));
    auto denom = std::make_shared<std::vector<T>>(static_cast<std::size_t>(B), T(0));
    T loss = 0;
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t i = 0; i < M; ++i) {
            const T x = logits.value()[b * M + i];
            const T s = x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
            (*sig)[b * M + i] = s;
            (*inter)[b] += s * target[b * M + i];
            (*denom)[b] += s + target[b * M + i];
        }
        loss += T(1) - (T(2) * (*inter)[b] + smooth) / ((*denom)[b] + smooth);
    }
    loss /= T(B);
    return make_result<T>(scalar_tensor(loss), {logits}, [logits, target, sig, inter, denom, B, M, smooth](Node<T>& n) {
        auto& g = gbuf(logits);
        for (std::int64_t b = 0; b < B; ++b) {
            const T num = T(2) * (*inter)[b] + smooth, den = (*denom)[b] + smooth;
            for (std::int64_t i = 0; i < M; ++i) {
                const T s = (*sig)[b * M + i];
                // d/ds of -(num/den)
                const T dds = -(T(2) * target[b * M + i] * den - num) / (den * den);
                g[b * M + i] += n.grad[0] / T(B) * dds * s * (T(1) - s);
            }
        }
    });
}

#define FTLAB_INSTANTIATE(T)                                                                                     \
    template void backward<T>(const Var<T>&);                                                                    \
    template Var<T> add<T>(const Var<T>&, const Var<T>&);                                                        \
    template Var<T> add_broadcast<T>(const Var<T>&, const Var<T>&);                                              \
    template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                                        \
    template Var<T> scale<T>(const Var<T>&, T);                                                                  \
    template Var<T> gelu<T>(const Var<T>&);                                                                      \
    template Var<T> relu<T>(const Var<T>&);                                                                      \
    template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                                      \
    template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);                               \
    template Var<T> attention<T>(const Var<T>&, int);                                                            \
    template Var<T> prepend_token<T>(const Var<T>&, const Var<T>&);                                              \
    template Var<T> concat_tokens<T>(const Var<T>&, const Var<T>&);                                              \
    template Var<T> slice_tokens<T>(const Var<T>&, std::int64_t, std::int64_t);                                  \
    template Var<T> gather_tokens<T>(const Var<T>&, const std::vector<std::vector<std::int64_t>>&);              \
    template Var<T> scatter_tokens<T>(const Var<T>&, const Var<T>&, const std::vector<std::vector<std::int64_t>>&, \
                                      std::int64_t);                                                             \
    template Var<T> mean_tokens<T>(const Var<T>&, std::int64_t);                                                 \
    template Var<T> reshape<T>(const Var<T>&, Shape);                                                            \
    template Var<T> concat_last<T>(const Var<T>&, const Var<T>&);                                                \
    template Var<T> l2_normalize<T>(const Var<T>&, T);                                                           \
    template Var<T> tokens_to_grid<T>(const Var<T>&, std::int64_t);                                              \
    template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&);                                      \
    template Var<T> upsample2x<T>(const Var<T>&);                                                                \
    template Var<T> concat_channels<T>(const Var<T>&, const Var<T>&);                                            \
    template Var<T> sum<T>(const Var<T>&);                                                                       \
    template Var<T> infonce<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);                                  \
    template Var<T> infonce_in_batch<T>(const Var<T>&, const Var<T>&, T);                                        \
    template Var<T> bce_with_logits<T>(const Var<T>&, const Tensor<T>&);                                         \
    template Var<T> masked_mse<T>(const Var<T>&, const Tensor<T>&, const std::vector<std::uint8_t>&);            \
    template Var<T> dice_loss<T>(const Var<T>&, const Tensor<T>&, T);

FTLAB_INSTANTIATE(float)
FTLAB_INSTANTIATE(double)

#undef FTLAB_INSTANTIATE

}  // namespace ftlab::ag
