#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "metamorph/errors.hpp"
#include "metamorph/rng.hpp"

// Dense row-major tensors with reverse-mode automatic differentiation.
// The engine is templated on the scalar type: the pipeline runs on float,
// while gradient-check tests instantiate the same operations on double.

namespace metamorph {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// ---------------------------------------------------------------------------
// Grad mode

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
inline bool& numeric_checks_flag() {
    // NaN/Inf detection after ops and optimizer steps; on by default.
    static bool enabled = true;
    return enabled;
}
}  // namespace detail

struct GradMode {
    static bool enabled() { return detail::grad_mode_flag(); }
    static void set_enabled(bool on) { detail::grad_mode_flag() = on; }
};

struct NoGradGuard {
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
    ~NoGradGuard() { GradMode::set_enabled(prev_); }
    bool prev_;
};

inline void set_numeric_checks(bool on) { detail::numeric_checks_flag() = on; }
inline bool numeric_checks_enabled() { return detail::numeric_checks_flag(); }

// ---------------------------------------------------------------------------
// Node and tensor handle

namespace detail {

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // allocated lazily, same length as data
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;  // propagates this->grad to parents

    int64_t numel() const { return int64_t(data.size()); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

template <typename T>
void accumulate(std::vector<T>& dst, const std::vector<T>& src) {
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

template <typename T>
class TensorT {
public:
    using Node = detail::Node<T>;

    TensorT() : n_(std::make_shared<Node>()) { n_->shape = {1}; n_->data = {T(0)}; }

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), T(0), requires_grad);
    }
    static TensorT ones(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), T(1), requires_grad);
    }
    static TensorT filled(Shape shape, T value, bool requires_grad = false) {
        TensorT t;
        t.n_->shape = std::move(shape);
        t.n_->data.assign(size_t(shape_numel(t.n_->shape)), value);
        t.n_->requires_grad = requires_grad;
        return t;
    }
    static TensorT from_data(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (int64_t(values.size()) != shape_numel(shape))
            throw ShapeError("from_data: value count does not match shape " + shape_str(shape));
        TensorT t;
        t.n_->shape = std::move(shape);
        t.n_->data = std::move(values);
        t.n_->requires_grad = requires_grad;
        return t;
    }
    static TensorT scalar(T value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }
    static TensorT uniform(Shape shape, RngStream& rng, T lo, T hi, bool requires_grad = false) {
        TensorT t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.n_->data) v = T(rng.uniform(double(lo), double(hi)));
        return t;
    }
    static TensorT normal(Shape shape, RngStream& rng, T mean, T stddev, bool requires_grad = false) {
        TensorT t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.n_->data) v = T(mean + stddev * rng.normal());
        return t;
    }

    const Shape& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape[size_t(i)]; }
    int ndim() const { return int(n_->shape.size()); }
    int64_t numel() const { return n_->numel(); }

    std::vector<T>& data() { return n_->data; }
    const std::vector<T>& data() const { return n_->data; }

    bool requires_grad() const { return n_->requires_grad; }
    TensorT& set_requires_grad(bool on) {
        n_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return n_->grad.size() == n_->data.size(); }
    std::vector<T>& grad() {
        n_->ensure_grad();
        return n_->grad;
    }
    void zero_grad() { n_->grad.assign(n_->data.size(), T(0)); }

    T item() const {
        if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return n_->data[0];
    }

    // element access for tests and small utilities
    T at(const std::vector<int>& idx) const { return n_->data[size_t(flat_index(idx))]; }
    void set(const std::vector<int>& idx, T v) { n_->data[size_t(flat_index(idx))] = v; }

    // value copy detached from any graph
    TensorT clone() const {
        TensorT t;
        t.n_->shape = n_->shape;
        t.n_->data = n_->data;
        return t;
    }

    void copy_values_from(const TensorT& other) {
        if (other.shape() != shape())
            throw ShapeError("copy_values_from: shape mismatch " + shape_str(shape()) + " vs " +
                             shape_str(other.shape()));
        n_->data = other.n_->data;
    }

    bool all_finite() const {
        for (T v : n_->data)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

    Node* node() const { return n_.get(); }
    std::shared_ptr<Node> node_ptr() const { return n_; }

private:
    int64_t flat_index(const std::vector<int>& idx) const {
        if (idx.size() != n_->shape.size()) throw ShapeError("index rank mismatch");
        int64_t flat = 0;
        for (size_t d = 0; d < idx.size(); ++d) {
            if (idx[d] < 0 || idx[d] >= n_->shape[d]) throw ShapeError("index out of range");
            flat = flat * n_->shape[d] + idx[d];
        }
        return flat;
    }

    std::shared_ptr<Node> n_;
};

using Tensor = TensorT<float>;

// ---------------------------------------------------------------------------
// Graph construction helpers

namespace detail {

template <typename T>
bool track_grad(std::initializer_list<const TensorT<T>*> inputs) {
    if (!GradMode::enabled()) return false;
    for (const auto* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <typename T>
TensorT<T> make_result(Shape shape, std::vector<T> values,
                       std::vector<std::shared_ptr<Node<T>>> parents,
                       std::function<void(Node<T>&)> backward) {
    TensorT<T> out = TensorT<T>::from_data(std::move(shape), std::move(values));
    if (backward) {
        out.node()->requires_grad = true;
        out.node()->parents = std::move(parents);
        out.node()->backward = std::move(backward);
    }
    return out;
}

template <typename T>
void check_finite(const TensorT<T>& t, const char* what) {
    if (!numeric_checks_enabled()) return;
    if (!t.all_finite()) throw NumericError(std::string(what) + ": non-finite value produced");
}

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + int64_t(i) * k;
        T* crow = c + int64_t(i) * n;
        for (int p = 0; p < k; ++p) {
            T av = arow[p];
            const T* brow = b + int64_t(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T  (rows of A dotted with rows of B)
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int m, int k, int n) {
    constexpr int kLanes = 16;
    for (int i = 0; i < m; ++i) {
        const T* arow = a + int64_t(i) * k;
        T* crow = c + int64_t(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* brow = b + int64_t(j) * k;
            // fixed multi-accumulator reduction: vectorizable without
            // reassociation, bitwise deterministic
            T acc[kLanes] = {};
            int p = 0;
            for (; p + kLanes <= k; p += kLanes)
                for (int l = 0; l < kLanes; ++l) acc[l] += arow[p + l] * brow[p + l];
            T tail = T(0);
            for (; p < k; ++p) tail += arow[p] * brow[p];
            T sum = tail;
            for (int l = 0; l < kLanes; ++l) sum += acc[l];
            crow[j] += sum;
        }
    }
}

// C[K,N] += A[M,K]^T * B[M,N]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + int64_t(i) * k;
        const T* brow = b + int64_t(i) * n;
        for (int p = 0; p < k; ++p) {
            T av = arow[p];
            T* crow = c + int64_t(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    if (!detail::track_grad<T>({&a, &b})) return TensorT<T>::from_data(a.shape(), std::move(out));
    auto an = a.node_ptr(), bn = b.node_ptr();
    return detail::make_result<T>(
        a.shape(), std::move(out), {an, bn}, [an, bn](detail::Node<T>& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                detail::accumulate(an->grad, self.grad);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                detail::accumulate(bn->grad, self.grad);
            }
        });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    if (!detail::track_grad<T>({&a, &b})) return TensorT<T>::from_data(a.shape(), std::move(out));
    auto an = a.node_ptr(), bn = b.node_ptr();
    return detail::make_result<T>(
        a.shape(), std::move(out), {an, bn}, [an, bn](detail::Node<T>& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                detail::accumulate(an->grad, self.grad);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] -= self.grad[i];
            }
        });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    if (!detail::track_grad<T>({&a, &b})) return TensorT<T>::from_data(a.shape(), std::move(out));
    auto an = a.node_ptr(), bn = b.node_ptr();
    return detail::make_result<T>(
        a.shape(), std::move(out), {an, bn}, [an, bn](detail::Node<T>& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += self.grad[i] * bn->data[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += self.grad[i] * an->data[i];
            }
        });
}

// multiply by compile-time-known constant
template <typename T>
TensorT<T> scale(const TensorT<T>& a, T s) {
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
    if (!detail::track_grad<T>({&a})) return TensorT<T>::from_data(a.shape(), std::move(out));
    auto an = a.node_ptr();
    return detail::make_result<T>(a.shape(), std::move(out), {an}, [an, s](detail::Node<T>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += self.grad[i] * s;
    });
}

// multiply every element of a by a learnable 1-element tensor
template <typename T>
TensorT<T> scale_by(const TensorT<T>& a, const TensorT<T>& s) {
    if (s.numel() != 1) throw ShapeError("scale_by: scale must be a 1-element tensor");
    T sv = s.data()[0];
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * sv;
    if (!detail::track_grad<T>({&a, &s})) return TensorT<T>::from_data(a.shape(), std::move(out));
    auto an = a.node_ptr(), sn = s.node_ptr();
    return detail::make_result<T>(
        a.shape(), std::move(out), {an, sn}, [an, sn](detail::Node<T>& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                T sv = sn->data[0];
                for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += self.grad[i] * sv;
            }
            if (sn->requires_grad) {
                sn->ensure_grad();
                T acc = T(0);
                for (size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * an->data[i];
                sn->grad[0] += acc;
            }
        });
}

template <typename T>
TensorT<T> relu(const TensorT<T>& a) {
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
    if (!detail::track_grad<T>({&a})) return TensorT<T>::from_data(a.shape(), std::move(out));
    auto an = a.node_ptr();
    return detail::make_result<T>(a.shape(), std::move(out), {an}, [an](detail::Node<T>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < an->grad.size(); ++i)
            if (an->data[i] > T(0)) an->grad[i] += self.grad[i];
    });
}

template <typename T>
TensorT<T> elu(const TensorT<T>& a) {
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        T x = a.data()[i];
        out[i] = x > T(0) ? x : T(std::expm1(double(x)));
    }
    if (!detail::track_grad<T>({&a})) return TensorT<T>::from_data(a.shape(), std::move(out));
    auto an = a.node_ptr();
    auto saved = std::make_shared<std::vector<T>>(out);
    return detail::make_result<T>(a.shape(), std::move(out), {an}, [an, saved](detail::Node<T>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < an->grad.size(); ++i) {
            T d = an->data[i] > T(0) ? T(1) : (*saved)[i] + T(1);  // d/dx (e^x - 1) = e^x
            an->grad[i] += self.grad[i] * d;
        }
    });
}

// ---------------------------------------------------------------------------
// Shape operations

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel())
        throw ShapeError("reshape: element count mismatch " + shape_str(a.shape()) + " -> " +
                         shape_str(new_shape));
    std::vector<T> out = a.data();
    if (!detail::track_grad<T>({&a})) return TensorT<T>::from_data(std::move(new_shape), std::move(out));
    auto an = a.node_ptr();
    return detail::make_result<T>(std::move(new_shape), std::move(out), {an},
                                  [an](detail::Node<T>& self) {
                                      if (!an->requires_grad) return;
                                      an->ensure_grad();
                                      detail::accumulate(an->grad, self.grad);
                                  });
}

template <typename T>
TensorT<T> permute_axes(const TensorT<T>& a, const std::vector<int>& perm) {
    const Shape& s = a.shape();
    int nd = int(s.size());
    if (int(perm.size()) != nd) throw ShapeError("permute_axes: rank mismatch");
    std::vector<bool> seen(size_t(nd), false);
    Shape out_shape(size_t(nd), 0);
    for (int d = 0; d < nd; ++d) {
        if (perm[d] < 0 || perm[d] >= nd || seen[perm[d]]) throw ContractError("permute_axes: invalid permutation");
        seen[perm[d]] = true;
        out_shape[d] = s[perm[d]];
    }
    std::vector<int64_t> in_strides(size_t(nd), 1);
    for (int d = nd - 2; d >= 0; --d) in_strides[d] = in_strides[d + 1] * s[d + 1];
    std::vector<int64_t> gather(size_t(nd), 0);
    for (int d = 0; d < nd; ++d) gather[d] = in_strides[perm[d]];

    int64_t n = a.numel();
    std::vector<T> out(size_t(n), T(0));
    std::vector<int> idx(size_t(nd), 0);
    int64_t src = 0;
    for (int64_t i = 0; i < n; ++i) {
        out[size_t(i)] = a.data()[size_t(src)];
        for (int d = nd - 1; d >= 0; --d) {
            idx[d]++;
            src += gather[d];
            if (idx[d] < out_shape[d]) break;
            src -= gather[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    if (!detail::track_grad<T>({&a})) return TensorT<T>::from_data(std::move(out_shape), std::move(out));
    auto an = a.node_ptr();
    Shape oshape = out_shape;
    return detail::make_result<T>(
        std::move(out_shape), std::move(out), {an}, [an, gather, oshape, nd](detail::Node<T>& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            std::vector<int> idx(size_t(nd), 0);
            int64_t src = 0;
            int64_t n = self.numel();
            for (int64_t i = 0; i < n; ++i) {
                an->grad[size_t(src)] += self.grad[size_t(i)];
                for (int d = nd - 1; d >= 0; --d) {
                    idx[d]++;
                    src += gather[d];
                    if (idx[d] < oshape[d]) break;
                    src -= gather[d] * oshape[d];
                    idx[d] = 0;
                }
            }
        });
}

template <typename T>
TensorT<T> slice(const TensorT<T>& a, int axis, int start, int len) {
    const Shape& s = a.shape();
    if (axis < 0 || axis >= int(s.size())) throw ShapeError("slice: axis out of range");
    if (start < 0 || len <= 0 || start + len > s[axis]) throw ShapeError("slice: range out of bounds");
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s[d];
    for (int d = axis + 1; d < int(s.size()); ++d) inner *= s[d];
    Shape out_shape = s;
    out_shape[axis] = len;
    std::vector<T> out(size_t(outer * len * inner));
    for (int64_t o = 0; o < outer; ++o) {
        const T* src = a.data().data() + (o * s[axis] + start) * inner;
        T* dst = out.data() + o * len * inner;
        std::copy(src, src + len * inner, dst);
    }
    if (!detail::track_grad<T>({&a})) return TensorT<T>::from_data(std::move(out_shape), std::move(out));
    auto an = a.node_ptr();
    int in_axis = s[axis];
    return detail::make_result<T>(
        std::move(out_shape), std::move(out), {an},
        [an, outer, inner, len, start, in_axis](detail::Node<T>& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (int64_t o = 0; o < outer; ++o) {
                const T* src = self.grad.data() + o * len * inner;
                T* dst = an->grad.data() + (o * in_axis + start) * inner;
                for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
TensorT<T> sum(const TensorT<T>& a) {
    T acc = T(0);
    for (T v : a.data()) acc += v;
    if (!detail::track_grad<T>({&a})) return TensorT<T>::scalar(acc);
    auto an = a.node_ptr();
    return detail::make_result<T>({1}, {acc}, {an}, [an](detail::Node<T>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        T g = self.grad[0];
        for (auto& v : an->grad) v += g;
    });
}

template <typename T>
TensorT<T> sum_of_squares(const TensorT<T>& a) {
    T acc = T(0);
    for (T v : a.data()) acc += v * v;
    if (!detail::track_grad<T>({&a})) return TensorT<T>::scalar(acc);
    auto an = a.node_ptr();
    return detail::make_result<T>({1}, {acc}, {an}, [an](detail::Node<T>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        T g = self.grad[0];
        for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += T(2) * an->data[i] * g;
    });
}

template <typename T>
TensorT<T> l2_norm(const TensorT<T>& a) {
    T acc = T(0);
    for (T v : a.data()) acc += v * v;
    T nrm = T(std::sqrt(double(acc)));
    if (!detail::track_grad<T>({&a})) return TensorT<T>::scalar(nrm);
    auto an = a.node_ptr();
    return detail::make_result<T>({1}, {nrm}, {an}, [an, nrm](detail::Node<T>& self) {
        if (!an->requires_grad || nrm == T(0)) return;
        an->ensure_grad();
        T g = self.grad[0] / nrm;
        for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += an->data[i] * g;
    });
}

// elementwise sqrt; inputs must be non-negative
template <typename T>
TensorT<T> sqrt_elem(const TensorT<T>& a) {
    std::vector<T> out(a.data().size());
    for (size_t i = 0; i < out.size(); ++i) {
        if (a.data()[i] < T(0)) throw ContractError("sqrt_elem: negative input");
        out[i] = T(std::sqrt(double(a.data()[i])));
    }
    if (!detail::track_grad<T>({&a})) return TensorT<T>::from_data(a.shape(), std::move(out));
    auto an = a.node_ptr();
    auto saved = std::make_shared<std::vector<T>>(out);
    return detail::make_result<T>(a.shape(), std::move(out), {an}, [an, saved](detail::Node<T>& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < an->grad.size(); ++i)
            if ((*saved)[i] > T(0)) an->grad[i] += self.grad[i] / (T(2) * (*saved)[i]);
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> out(size_t(int64_t(m) * n), T(0));
    detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    if (!detail::track_grad<T>({&a, &b})) return TensorT<T>::from_data({m, n}, std::move(out));
    auto an = a.node_ptr(), bn = b.node_ptr();
    return detail::make_result<T>(
        {m, n}, std::move(out), {an, bn}, [an, bn, m, k, n](detail::Node<T>& self) {
            if (an->requires_grad) {
                an->ensure_grad();  // dA += dC * B^T
                detail::gemm_nt(self.grad.data(), bn->data.data(), an->grad.data(), m, n, k);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();  // dB += A^T * dC
                detail::gemm_tn(an->data.data(), self.grad.data(), bn->grad.data(), m, k, n);
            }
        });
}

// y[N,O] = x[N,F] * w[O,F]^T + b[O]
template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
    if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(1))
        throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
    int n = x.dim(0), f = x.dim(1), o = w.dim(0);
    if (b.numel() != o) throw ShapeError("linear: bias length mismatch");
    std::vector<T> out(size_t(int64_t(n) * o), T(0));
    detail::gemm_nt(x.data().data(), w.data().data(), out.data(), n, f, o);
    for (int i = 0; i < n; ++i) {
        T* row = out.data() + int64_t(i) * o;
        for (int j = 0; j < o; ++j) row[j] += b.data()[j];
    }
    if (!detail::track_grad<T>({&x, &w, &b})) return TensorT<T>::from_data({n, o}, std::move(out));
    auto xn = x.node_ptr(), wn = w.node_ptr(), bn = b.node_ptr();
    return detail::make_result<T>(
        {n, o}, std::move(out), {xn, wn, bn}, [xn, wn, bn, n, f, o](detail::Node<T>& self) {
            if (xn->requires_grad) {
                xn->ensure_grad();  // dX += dY * W
                detail::gemm_nn(self.grad.data(), wn->data.data(), xn->grad.data(), n, o, f);
            }
            if (wn->requires_grad) {
                wn->ensure_grad();  // dW += dY^T * X
                detail::gemm_tn(self.grad.data(), xn->data.data(), wn->grad.data(), n, o, f);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int i = 0; i < n; ++i) {
                    const T* row = self.grad.data() + int64_t(i) * o;
                    for (int j = 0; j < o; ++j) bn->grad[j] += row[j];
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Convolution (im2col lowering; the single gradient path for conv)

namespace detail {

// input [B,C,H,W] -> patches [B*OH*OW, C*K*K]
template <typename T>
void im2col(const T* x, int b, int c, int h, int w, int k, int stride, int pad, int oh, int ow,
            T* patches) {
    int ckk = c * k * k;
    for (int bi = 0; bi < b; ++bi) {
        const T* img = x + int64_t(bi) * c * h * w;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                T* row = patches + (int64_t(bi) * oh * ow + int64_t(oy) * ow + ox) * ckk;
                int iy0 = oy * stride - pad;
                int ix0 = ox * stride - pad;
                int col = 0;
                for (int ci = 0; ci < c; ++ci) {
                    const T* chan = img + int64_t(ci) * h * w;
                    for (int ky = 0; ky < k; ++ky) {
                        int iy = iy0 + ky;
                        for (int kx = 0; kx < k; ++kx, ++col) {
                            int ix = ix0 + kx;
                            row[col] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                           ? chan[int64_t(iy) * w + ix]
                                           : T(0);
                        }
                    }
                }
            }
        }
    }
}

// scatter-add of patch gradients back to input layout
template <typename T>
void col2im(const T* patches, int b, int c, int h, int w, int k, int stride, int pad, int oh,
            int ow, T* dx) {
    int ckk = c * k * k;
    for (int bi = 0; bi < b; ++bi) {
        T* img = dx + int64_t(bi) * c * h * w;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                const T* row = patches + (int64_t(bi) * oh * ow + int64_t(oy) * ow + ox) * ckk;
                int iy0 = oy * stride - pad;
                int ix0 = ox * stride - pad;
                int col = 0;
                for (int ci = 0; ci < c; ++ci) {
                    T* chan = img + int64_t(ci) * h * w;
                    for (int ky = 0; ky < k; ++ky) {
                        int iy = iy0 + ky;
                        for (int kx = 0; kx < k; ++kx, ++col) {
                            int ix = ix0 + kx;
                            if (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                chan[int64_t(iy) * w + ix] += row[col];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace detail

template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& kernel, const TensorT<T>& bias,
                  int stride, int padding) {
    if (input.ndim() != 4) throw ShapeError("conv2d: input must be [B,C,H,W]");
    if (kernel.ndim() != 4) throw ShapeError("conv2d: kernel must be [Cout,Cin,K,K]");
    if (stride < 1) throw ContractError("conv2d: stride must be positive");
    if (padding < 0) throw ContractError("conv2d: padding must be non-negative");
    int b = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    int cout = kernel.dim(0), cin = kernel.dim(1), k = kernel.dim(2);
    if (kernel.dim(3) != k) throw ShapeError("conv2d: kernel must be square");
    if (k % 2 == 0) throw ContractError("conv2d: kernel size must be odd");
    if (cin != c)
        throw ShapeError("conv2d: channel mismatch, input " + shape_str(input.shape()) +
                         " kernel " + shape_str(kernel.shape()));
    if (bias.numel() != cout) throw ShapeError("conv2d: bias length mismatch");
    int oh = (h + 2 * padding - k) / stride + 1;
    int ow = (w + 2 * padding - k) / stride + 1;
    if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: empty output");

    int ckk = c * k * k;
    int64_t np = int64_t(b) * oh * ow;
    auto patches = std::make_shared<std::vector<T>>(size_t(np * ckk));
    detail::im2col(input.data().data(), b, c, h, w, k, stride, padding, oh, ow, patches->data());

    // ymat [np, cout] = patches * kernel^T
    std::vector<T> ymat(size_t(np * cout), T(0));
    detail::gemm_nt(patches->data(), kernel.data().data(), ymat.data(), int(np), ckk, cout);

    std::vector<T> out(size_t(np * cout));
    int64_t hw = int64_t(oh) * ow;
    for (int bi = 0; bi < b; ++bi)
        for (int64_t p = 0; p < hw; ++p) {
            const T* row = ymat.data() + (int64_t(bi) * hw + p) * cout;
            for (int co = 0; co < cout; ++co)
                out[size_t(((int64_t(bi) * cout + co) * hw) + p)] = row[co] + bias.data()[co];
        }

    TensorT<T> result;
    if (!detail::track_grad<T>({&input, &kernel, &bias})) {
        result = TensorT<T>::from_data({b, cout, oh, ow}, std::move(out));
    } else {
        auto xn = input.node_ptr(), kn = kernel.node_ptr(), bn = bias.node_ptr();
        result = detail::make_result<T>(
            {b, cout, oh, ow}, std::move(out), {xn, kn, bn},
            [xn, kn, bn, patches, b, c, h, w, k, stride, padding, oh, ow, cout,
             ckk](detail::Node<T>& self) {
                int64_t hw = int64_t(oh) * ow;
                int64_t np = int64_t(b) * hw;
                // regroup dY [B,Cout,OH,OW] -> dYmat [np, cout]
                std::vector<T> dymat(size_t(np * cout));
                for (int bi = 0; bi < b; ++bi)
                    for (int co = 0; co < cout; ++co) {
                        const T* src = self.grad.data() + (int64_t(bi) * cout + co) * hw;
                        for (int64_t p = 0; p < hw; ++p)
                            dymat[size_t((int64_t(bi) * hw + p) * cout + co)] = src[p];
                    }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (int64_t p = 0; p < np; ++p) {
                        const T* row = dymat.data() + p * cout;
                        for (int co = 0; co < cout; ++co) bn->grad[co] += row[co];
                    }
                }
                if (kn->requires_grad) {
                    kn->ensure_grad();  // dK += dYmat^T * patches
                    detail::gemm_tn(dymat.data(), patches->data(), kn->grad.data(), int(np), cout,
                                    ckk);
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();  // dPatches = dYmat * K, then scatter
                    std::vector<T> dpatches(size_t(np * ckk), T(0));
                    detail::gemm_nn(dymat.data(), kn->data.data(), dpatches.data(), int(np), cout,
                                    ckk);
                    detail::col2im(dpatches.data(), b, c, h, w, k, stride, padding, oh, ow,
                                   xn->grad.data());
                }
            });
    }
    detail::check_finite(result, "conv2d");
    return result;
}

// ---------------------------------------------------------------------------
// Pooling, normalization, loss

template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& x) {
    if (x.ndim() != 4) throw ShapeError("global_avg_pool: input must be [B,C,H,W]");
    int b = x.dim(0), c = x.dim(1);
    int64_t hw = int64_t(x.dim(2)) * x.dim(3);
    std::vector<T> out(size_t(int64_t(b) * c));
    for (int64_t i = 0; i < int64_t(b) * c; ++i) {
        const T* src = x.data().data() + i * hw;
        T acc = T(0);
        for (int64_t p = 0; p < hw; ++p) acc += src[p];
        out[size_t(i)] = acc / T(hw);
    }
    if (!detail::track_grad<T>({&x})) return TensorT<T>::from_data({b, c}, std::move(out));
    auto xn = x.node_ptr();
    return detail::make_result<T>({b, c}, std::move(out), {xn}, [xn, b, c, hw](detail::Node<T>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int64_t i = 0; i < int64_t(b) * c; ++i) {
            T g = self.grad[size_t(i)] / T(hw);
            T* dst = xn->grad.data() + i * hw;
            for (int64_t p = 0; p < hw; ++p) dst[p] += g;
        }
    });
}

// Batch normalization over [B,C,H,W] per channel. In training mode batch
// statistics are used and running statistics are updated in place; in
// inference mode the provided running statistics are used.
template <typename T>
TensorT<T> batchnorm2d(const TensorT<T>& x, const TensorT<T>& scale_p, const TensorT<T>& shift_p,
                       std::vector<T>& running_mean, std::vector<T>& running_var, bool training,
                       T momentum, T eps) {
    if (x.ndim() != 4) throw ShapeError("batchnorm2d: input must be [B,C,H,W]");
    int b = x.dim(0), c = x.dim(1);
    int64_t hw = int64_t(x.dim(2)) * x.dim(3);
    int64_t m = int64_t(b) * hw;
    if (scale_p.numel() != c || shift_p.numel() != c || int(running_mean.size()) != c ||
        int(running_var.size()) != c)
        throw ShapeError("batchnorm2d: per-channel parameter length mismatch");

    std::vector<T> mean(size_t(c), T(0)), invstd(size_t(c), T(0));
    if (training) {
        for (int ci = 0; ci < c; ++ci) {
            T acc = T(0);
            for (int bi = 0; bi < b; ++bi) {
                const T* src = x.data().data() + (int64_t(bi) * c + ci) * hw;
                for (int64_t p = 0; p < hw; ++p) acc += src[p];
            }
            T mu = acc / T(m);
            T vacc = T(0);
            for (int bi = 0; bi < b; ++bi) {
                const T* src = x.data().data() + (int64_t(bi) * c + ci) * hw;
                for (int64_t p = 0; p < hw; ++p) {
                    T d = src[p] - mu;
                    vacc += d * d;
                }
            }
            T var = vacc / T(m);
            if (var + eps <= T(0)) throw ContractError("batchnorm2d: non-positive variance");
            mean[size_t(ci)] = mu;
            invstd[size_t(ci)] = T(1) / T(std::sqrt(double(var + eps)));
            running_mean[size_t(ci)] = (T(1) - momentum) * running_mean[size_t(ci)] + momentum * mu;
            running_var[size_t(ci)] = (T(1) - momentum) * running_var[size_t(ci)] + momentum * var;
        }
    } else {
        for (int ci = 0; ci < c; ++ci) {
            if (running_var[size_t(ci)] + eps <= T(0))
                throw ContractError("batchnorm2d: non-positive running variance");
            mean[size_t(ci)] = running_mean[size_t(ci)];
            invstd[size_t(ci)] = T(1) / T(std::sqrt(double(running_var[size_t(ci)] + eps)));
        }
    }

    auto xhat = std::make_shared<std::vector<T>>(x.data().size());
    std::vector<T> out(x.data().size());
    for (int bi = 0; bi < b; ++bi)
        for (int ci = 0; ci < c; ++ci) {
            const T* src = x.data().data() + (int64_t(bi) * c + ci) * hw;
            T* xh = xhat->data() + (int64_t(bi) * c + ci) * hw;
            T* dst = out.data() + (int64_t(bi) * c + ci) * hw;
            T mu = mean[size_t(ci)], is = invstd[size_t(ci)];
            T g = scale_p.data()[size_t(ci)], s = shift_p.data()[size_t(ci)];
            for (int64_t p = 0; p < hw; ++p) {
                xh[p] = (src[p] - mu) * is;
                dst[p] = g * xh[p] + s;
            }
        }

    if (!detail::track_grad<T>({&x, &scale_p, &shift_p}))
        return TensorT<T>::from_data(x.shape(), std::move(out));
    auto xn = x.node_ptr(), gn = scale_p.node_ptr(), sn = shift_p.node_ptr();
    auto invstd_s = std::make_shared<std::vector<T>>(std::move(invstd));
    return detail::make_result<T>(
        x.shape(), std::move(out), {xn, gn, sn},
        [xn, gn, sn, xhat, invstd_s, b, c, hw, m, training](detail::Node<T>& self) {
            for (int ci = 0; ci < c; ++ci) {
                // channel-wise reductions of dy and dy*xhat
                T sum_dy = T(0), sum_dyxh = T(0);
                for (int bi = 0; bi < b; ++bi) {
                    const T* dy = self.grad.data() + (int64_t(bi) * c + ci) * hw;
                    const T* xh = xhat->data() + (int64_t(bi) * c + ci) * hw;
                    for (int64_t p = 0; p < hw; ++p) {
                        sum_dy += dy[p];
                        sum_dyxh += dy[p] * xh[p];
                    }
                }
                if (sn->requires_grad) {
                    sn->ensure_grad();
                    sn->grad[size_t(ci)] += sum_dy;
                }
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    gn->grad[size_t(ci)] += sum_dyxh;
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    T g = gn->data[size_t(ci)], is = (*invstd_s)[size_t(ci)];
                    if (training) {
                        T mean_dy = sum_dy / T(m), mean_dyxh = sum_dyxh / T(m);
                        for (int bi = 0; bi < b; ++bi) {
                            const T* dy = self.grad.data() + (int64_t(bi) * c + ci) * hw;
                            const T* xh = xhat->data() + (int64_t(bi) * c + ci) * hw;
                            T* dx = xn->grad.data() + (int64_t(bi) * c + ci) * hw;
                            for (int64_t p = 0; p < hw; ++p)
                                dx[p] += g * is * (dy[p] - mean_dy - xh[p] * mean_dyxh);
                        }
                    } else {
                        for (int bi = 0; bi < b; ++bi) {
                            const T* dy = self.grad.data() + (int64_t(bi) * c + ci) * hw;
                            T* dx = xn->grad.data() + (int64_t(bi) * c + ci) * hw;
                            for (int64_t p = 0; p < hw; ++p) dx[p] += g * is * dy[p];
                        }
                    }
                }
            }
        });
}

// Mean cross-entropy of logits [N,K] against integer labels, with a fused
// numerically stable softmax.
template <typename T>
TensorT<T> softmax_cross_entropy(const TensorT<T>& logits, const std::vector<int>& labels) {
    if (logits.ndim() != 2) throw ShapeError("softmax_cross_entropy: logits must be [N,K]");
    int n = logits.dim(0), k = logits.dim(1);
    if (int(labels.size()) != n) throw ShapeError("softmax_cross_entropy: label count mismatch");
    auto probs = std::make_shared<std::vector<T>>(size_t(int64_t(n) * k));
    T loss = T(0);
    for (int i = 0; i < n; ++i) {
        if (labels[i] < 0 || labels[i] >= k)
            throw ContractError("softmax_cross_entropy: label out of range");
        const T* row = logits.data().data() + int64_t(i) * k;
        T mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        T denom = T(0);
        for (int j = 0; j < k; ++j) denom += T(std::exp(double(row[j] - mx)));
        T log_denom = T(std::log(double(denom)));
        T* prow = probs->data() + int64_t(i) * k;
        for (int j = 0; j < k; ++j) prow[j] = T(std::exp(double(row[j] - mx))) / denom;
        loss += log_denom - (row[labels[i]] - mx);
    }
    loss /= T(n);
    if (!detail::track_grad<T>({&logits})) return TensorT<T>::scalar(loss);
    auto ln = logits.node_ptr();
    auto labels_copy = std::make_shared<std::vector<int>>(labels);
    return detail::make_result<T>({1}, {loss}, {ln}, [ln, probs, labels_copy, n, k](detail::Node<T>& self) {
        if (!ln->requires_grad) return;
        ln->ensure_grad();
        T g = self.grad[0] / T(n);
        for (int i = 0; i < n; ++i) {
            const T* prow = probs->data() + int64_t(i) * k;
            T* drow = ln->grad.data() + int64_t(i) * k;
            for (int j = 0; j < k; ++j) drow[j] += g * prow[j];
            drow[(*labels_copy)[i]] -= g;
        }
    });
}

// ---------------------------------------------------------------------------
// Backward pass

template <typename T>
void backward(const TensorT<T>& loss) {
    if (loss.numel() != 1) throw ContractError("backward: loss must be a scalar tensor");
    using Node = detail::Node<T>;
    Node* root = loss.node();
    if (!root->requires_grad) return;

    // iterative post-order topological sort over parents
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // interior grads are per-pass scratch; only leaf grads accumulate across
    // repeated backward calls
    for (Node* node : order)
        if (node->backward) node->grad.assign(node->data.size(), T(0));
    root->ensure_grad();
    root->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward) node->backward(*node);
    }
}

}  // namespace metamorph
