#pragma once

// Minimal deterministic tensor engine with reverse-mode differentiation.
// Tensors are immutable values (shared payload); operations execute eagerly
// and, when an input is tape-tracked, push a backward rule onto the tape.
// The engine is templated on the scalar type: float for training/inference,
// double for gradient checking.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mafnet {

using Shape = std::vector<int>;

class DimensionError : public std::runtime_error {
public:
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

class ContractError : public std::runtime_error {
public:
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

inline int shape_numel(const Shape& s) {
    int n = 1;
    for (int e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

inline void check_shape_valid(const Shape& s) {
    if (s.empty() || s.size() > 4)
        throw DimensionError("tensor rank must be 1..4, got shape " + shape_str(s));
    for (int e : s)
        if (e < 1) throw DimensionError("tensor extents must be >= 1, got shape " + shape_str(s));
}

// Activation-kink probe used by the gradient checker. While registered it
// observes every relu input and every maxpool window, so a finite-difference
// evaluation can be rejected when a perturbation crosses a kink.
struct KinkProbe {
    double min_margin = std::numeric_limits<double>::infinity();
    uint64_t signature = 1469598103934665603ull;  // FNV-1a offset basis

    void mix(uint64_t v) {
        signature ^= v;
        signature *= 1099511628211ull;
    }
    void note_relu(double x) {
        double m = std::fabs(x);
        if (m < min_margin) min_margin = m;
        mix(x > 0 ? 1u : 0u);
    }
    void note_pool(double gap, int argmax) {
        if (gap < min_margin) min_margin = gap;
        mix(static_cast<uint64_t>(argmax) + 2u);
    }
};

namespace detail {
inline KinkProbe*& active_probe() {
    thread_local KinkProbe* probe = nullptr;
    return probe;
}
}  // namespace detail

class ScopedKinkProbe {
public:
    explicit ScopedKinkProbe(KinkProbe* p) : prev_(detail::active_probe()) {
        detail::active_probe() = p;
    }
    ~ScopedKinkProbe() { detail::active_probe() = prev_; }
    ScopedKinkProbe(const ScopedKinkProbe&) = delete;
    ScopedKinkProbe& operator=(const ScopedKinkProbe&) = delete;

private:
    KinkProbe* prev_;
};

template <typename T>
class Tape;

template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        check_shape_valid(shape_);
        data_ = std::make_shared<const std::vector<T>>(shape_numel(shape_), T(0));
    }

    Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
        check_shape_valid(shape_);
        if (static_cast<int>(values.size()) != shape_numel(shape_))
            throw DimensionError("value count " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(shape_));
        data_ = std::make_shared<const std::vector<T>>(std::move(values));
    }

    static Tensor full(const Shape& shape, T value) {
        return Tensor(shape, std::vector<T>(shape_numel(shape), value));
    }

    static Tensor scalar(T value) { return Tensor({1}, {value}); }

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int size() const { return data_ ? static_cast<int>(data_->size()) : 0; }
    const std::vector<T>& values() const { return *data_; }
    const T* data() const { return data_->data(); }
    std::shared_ptr<const std::vector<T>> payload() const { return data_; }

    T operator[](int flat) const { return (*data_)[flat]; }

    T at(std::initializer_list<int> idx) const {
        int flat = 0;
        int i = 0;
        for (int v : idx) flat = flat * shape_[i++] + v;
        return (*data_)[flat];
    }

    // Copy with one element replaced; used by the finite-difference checker.
    Tensor with_value(int flat, T v) const {
        std::vector<T> vals = *data_;
        vals[flat] = v;
        return Tensor(shape_, std::move(vals));
    }

    bool tracked() const { return node_ >= 0; }
    bool requires_grad() const { return requires_grad_; }
    int node() const { return node_; }
    Tape<T>* tape() const { return tape_; }

    Tensor detached() const {
        Tensor t = *this;
        t.tape_ = nullptr;
        t.node_ = -1;
        t.requires_grad_ = false;
        return t;
    }

private:
    Shape shape_;
    std::shared_ptr<const std::vector<T>> data_;
    Tape<T>* tape_ = nullptr;
    int node_ = -1;
    bool requires_grad_ = false;

    friend class Tape<T>;
    template <typename U>
    friend Tensor<U> attach_node(Tensor<U> result, Tape<U>* tape, std::vector<int> in_nodes,
                                 typename Tape<U>::BackFn back);
};

template <typename T>
using GradientMap = std::map<std::string, Tensor<T>>;

// Ordered record of executed operations. Inputs always precede the
// operations that consume them, so one reverse sweep propagates gradients.
template <typename T>
class Tape {
public:
    using BackFn = std::function<void(Tape<T>&, const std::vector<T>& gy)>;

    // Registers a named differentiable leaf (a parameter).
    Tensor<T> leaf(const Tensor<T>& value, const std::string& name) {
        if (name.empty()) throw ContractError("leaf name must be non-empty");
        if (leaves_.count(name)) throw ContractError("duplicate leaf name on tape: " + name);
        Tensor<T> t = value.detached();
        t.tape_ = this;
        t.node_ = push_node(t.size(), {}, nullptr, name);
        nodes_.back().shape = t.shape();
        t.requires_grad_ = true;
        leaves_[name] = t.node_;
        return t;
    }

    int node_count() const { return static_cast<int>(nodes_.size()); }
    const std::vector<int>& node_inputs(int i) const { return nodes_[i].inputs; }
    int backward_visits(int i) const { return nodes_[i].visits; }

    std::vector<T>& grad_buffer(int node) {
        if (grads_[node].empty()) grads_[node].assign(nodes_[node].size, T(0));
        return grads_[node];
    }

private:
    struct Node {
        std::vector<int> inputs;
        BackFn back;
        int size = 0;
        Shape shape;       // recorded for leaves; gradients mirror it
        std::string name;  // non-empty for named leaves
        int visits = 0;
    };

    int push_node(int size, std::vector<int> inputs, BackFn back, std::string name) {
        for (int in : inputs)
            if (in >= static_cast<int>(nodes_.size()))
                throw ContractError("tape inputs must precede their consumers");
        Node n;
        n.inputs = std::move(inputs);
        n.back = std::move(back);
        n.size = size;
        n.name = std::move(name);
        nodes_.push_back(std::move(n));
        grads_.emplace_back();
        return static_cast<int>(nodes_.size()) - 1;
    }

    std::vector<Node> nodes_;
    std::vector<std::vector<T>> grads_;
    std::map<std::string, int> leaves_;

    template <typename U>
    friend Tensor<U> attach_node(Tensor<U> result, Tape<U>* tape, std::vector<int> in_nodes,
                                 typename Tape<U>::BackFn back);
    template <typename U>
    friend GradientMap<U> backward(const Tensor<U>& loss, Tape<U>& tape);
};

// Registers a result tensor as a tape node with explicit input node ids.
template <typename T>
Tensor<T> attach_node(Tensor<T> result, Tape<T>* tape, std::vector<int> in_nodes,
                      typename Tape<T>::BackFn back) {
    result.tape_ = tape;
    result.node_ = tape->push_node(result.size(), std::move(in_nodes), std::move(back), "");
    result.requires_grad_ = true;
    return result;
}

// Attaches a freshly computed result to the tape of its tracked inputs (if
// any). Backward closures capture what they need from the forward pass.
template <typename T>
Tensor<T> record(Tensor<T> result, std::initializer_list<const Tensor<T>*> inputs,
                 typename Tape<T>::BackFn back) {
    Tape<T>* tape = nullptr;
    for (const Tensor<T>* in : inputs) {
        if (!in->tracked()) continue;
        if (tape && tape != in->tape())
            throw ContractError("operands belong to different tapes");
        tape = in->tape();
    }
    if (!tape) return result;
    std::vector<int> in_nodes;
    for (const Tensor<T>* in : inputs) in_nodes.push_back(in->node());
    return attach_node(std::move(result), tape, std::move(in_nodes), std::move(back));
}

// Reverse sweep from a scalar loss. Every named leaf receives a gradient;
// leaves the loss does not reach get zeros, and a loss detached from the
// tape yields all-zero gradients.
template <typename T>
GradientMap<T> backward(const Tensor<T>& loss, Tape<T>& tape) {
    if (loss.size() != 1)
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (loss.tracked() && loss.tape() != &tape)
        throw ContractError("backward: loss was recorded on a different tape");
    for (auto& g : tape.grads_) g.clear();
    for (auto& n : tape.nodes_) n.visits = 0;
    if (loss.tracked()) {
        tape.grad_buffer(loss.node())[0] = T(1);
        for (int i = loss.node(); i >= 0; --i) {
            if (tape.grads_[i].empty()) continue;
            if (tape.nodes_[i].back) {
                tape.nodes_[i].visits++;
                tape.nodes_[i].back(tape, tape.grads_[i]);
            }
        }
    }
    GradientMap<T> out;
    for (const auto& [name, node] : tape.leaves_) {
        const Shape& gshape = tape.nodes_[node].shape;
        if (!tape.grads_[node].empty())
            out.emplace(name, Tensor<T>(gshape, tape.grads_[node]));
        else
            out.emplace(name, Tensor<T>(gshape));
    }
    return out;
}

namespace detail {

template <typename T>
void require_equal_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations. Shapes must match exactly; the only broadcast is a
// scalar (single-element) operand.

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    const bool sa = a.size() == 1, sb = b.size() == 1;
    if (!sa && !sb) detail::require_equal_shape(a, b, "add");
    const Shape out_shape = (sa && !sb) ? b.shape() : a.shape();
    const int n = shape_numel(out_shape);
    std::vector<T> y(n);
    const T* pa = a.data();
    const T* pb = b.data();
    for (int i = 0; i < n; ++i) y[i] = (sa ? pa[0] : pa[i]) + (sb ? pb[0] : pb[i]);
    return record<T>(Tensor<T>(out_shape, std::move(y)), {&a, &b},
                     [an = a.node(), bn = b.node(), sa, sb, n](Tape<T>& t, const std::vector<T>& gy) {
                         if (an >= 0) {
                             auto& ga = t.grad_buffer(an);
                             for (int i = 0; i < n; ++i) ga[sa ? 0 : i] += gy[i];
                         }
                         if (bn >= 0) {
                             auto& gb = t.grad_buffer(bn);
                             for (int i = 0; i < n; ++i) gb[sb ? 0 : i] += gy[i];
                         }
                     });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    const bool sa = a.size() == 1, sb = b.size() == 1;
    if (!sa && !sb) detail::require_equal_shape(a, b, "sub");
    const Shape out_shape = (sa && !sb) ? b.shape() : a.shape();
    const int n = shape_numel(out_shape);
    std::vector<T> y(n);
    const T* pa = a.data();
    const T* pb = b.data();
    for (int i = 0; i < n; ++i) y[i] = (sa ? pa[0] : pa[i]) - (sb ? pb[0] : pb[i]);
    return record<T>(Tensor<T>(out_shape, std::move(y)), {&a, &b},
                     [an = a.node(), bn = b.node(), sa, sb, n](Tape<T>& t, const std::vector<T>& gy) {
                         if (an >= 0) {
                             auto& ga = t.grad_buffer(an);
                             for (int i = 0; i < n; ++i) ga[sa ? 0 : i] += gy[i];
                         }
                         if (bn >= 0) {
                             auto& gb = t.grad_buffer(bn);
                             for (int i = 0; i < n; ++i) gb[sb ? 0 : i] -= gy[i];
                         }
                     });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    const bool sa = a.size() == 1, sb = b.size() == 1;
    if (!sa && !sb) detail::require_equal_shape(a, b, "mul");
    const Shape out_shape = (sa && !sb) ? b.shape() : a.shape();
    const int n = shape_numel(out_shape);
    std::vector<T> y(n);
    const T* pa = a.data();
    const T* pb = b.data();
    for (int i = 0; i < n; ++i) y[i] = (sa ? pa[0] : pa[i]) * (sb ? pb[0] : pb[i]);
    return record<T>(Tensor<T>(out_shape, std::move(y)), {&a, &b},
                     [an = a.node(), bn = b.node(), da = a.payload(), db = b.payload(), sa, sb,
                      n](Tape<T>& t, const std::vector<T>& gy) {
                         if (an >= 0) {
                             auto& ga = t.grad_buffer(an);
                             for (int i = 0; i < n; ++i)
                                 ga[sa ? 0 : i] += gy[i] * (*db)[sb ? 0 : i];
                         }
                         if (bn >= 0) {
                             auto& gb = t.grad_buffer(bn);
                             for (int i = 0; i < n; ++i)
                                 gb[sb ? 0 : i] += gy[i] * (*da)[sa ? 0 : i];
                         }
                     });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double s) {
    const int n = a.size();
    std::vector<T> y(n);
    const T* pa = a.data();
    const T k = static_cast<T>(s);
    for (int i = 0; i < n; ++i) y[i] = pa[i] * k;
    return record<T>(Tensor<T>(a.shape(), std::move(y)), {&a},
                     [an = a.node(), k, n](Tape<T>& t, const std::vector<T>& gy) {
                         if (an < 0) return;
                         auto& ga = t.grad_buffer(an);
                         for (int i = 0; i < n; ++i) ga[i] += gy[i] * k;
                     });
}

// Subgradient at 0 is 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    const int n = a.size();
    std::vector<T> y(n);
    const T* pa = a.data();
    KinkProbe* probe = detail::active_probe();
    for (int i = 0; i < n; ++i) {
        if (probe) probe->note_relu(static_cast<double>(pa[i]));
        y[i] = pa[i] > T(0) ? pa[i] : T(0);
    }
    return record<T>(Tensor<T>(a.shape(), std::move(y)), {&a},
                     [an = a.node(), da = a.payload(), n](Tape<T>& t, const std::vector<T>& gy) {
                         if (an < 0) return;
                         auto& ga = t.grad_buffer(an);
                         for (int i = 0; i < n; ++i)
                             if ((*da)[i] > T(0)) ga[i] += gy[i];
                     });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    const int n = a.size();
    const T* pa = a.data();
    T acc = T(0);
    for (int i = 0; i < n; ++i) acc += pa[i];
    return record<T>(Tensor<T>::scalar(acc), {&a},
                     [an = a.node(), n](Tape<T>& t, const std::vector<T>& gy) {
                         if (an < 0) return;
                         auto& ga = t.grad_buffer(an);
                         for (int i = 0; i < n; ++i) ga[i] += gy[0];
                     });
}

// ---------------------------------------------------------------------------
// matmul: [m,k] x [k,n] -> [m,n]; dA = dY.B^T, dB = A^T.dY

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<T> y(static_cast<size_t>(m) * n, T(0));
    const T* pa = a.data();
    const T* pb = b.data();
    for (int i = 0; i < m; ++i) {
        T* yrow = y.data() + static_cast<size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const T av = pa[static_cast<size_t>(i) * k + kk];
            const T* brow = pb + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) yrow[j] += av * brow[j];
        }
    }
    return record<T>(Tensor<T>({m, n}, std::move(y)), {&a, &b},
                     [an = a.node(), bn = b.node(), da = a.payload(), db = b.payload(), m, k,
                      n](Tape<T>& t, const std::vector<T>& gy) {
                         if (an >= 0) {
                             auto& ga = t.grad_buffer(an);
                             for (int i = 0; i < m; ++i) {
                                 const T* gyrow = gy.data() + static_cast<size_t>(i) * n;
                                 for (int kk = 0; kk < k; ++kk) {
                                     const T* brow = db->data() + static_cast<size_t>(kk) * n;
                                     T acc = T(0);
                                     for (int j = 0; j < n; ++j) acc += gyrow[j] * brow[j];
                                     ga[static_cast<size_t>(i) * k + kk] += acc;
                                 }
                             }
                         }
                         if (bn >= 0) {
                             auto& gb = t.grad_buffer(bn);
                             for (int i = 0; i < m; ++i) {
                                 const T* gyrow = gy.data() + static_cast<size_t>(i) * n;
                                 for (int kk = 0; kk < k; ++kk) {
                                     const T av = (*da)[static_cast<size_t>(i) * k + kk];
                                     T* gbrow = gb.data() + static_cast<size_t>(kk) * n;
                                     for (int j = 0; j < n; ++j) gbrow[j] += av * gyrow[j];
                                 }
                             }
                         }
                     });
}

// ---------------------------------------------------------------------------
// softmax along an axis, with per-slice max subtraction.

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    if (axis < 0 || axis >= x.rank())
        throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for shape " +
                             shape_str(x.shape()));
    const int n = x.size();
    const T* px = x.data();
    for (int i = 0; i < n; ++i)
        if (!std::isfinite(static_cast<double>(px[i])))
            throw NumericError("softmax: non-finite input");
    const Shape& s = x.shape();
    const int axis_len = s[axis];
    int inner = 1;
    for (int i = axis + 1; i < x.rank(); ++i) inner *= s[i];
    const int outer = n / (axis_len * inner);
    std::vector<T> y(n);
    for (int o = 0; o < outer; ++o) {
        for (int in = 0; in < inner; ++in) {
            const int base = o * axis_len * inner + in;
            T mx = px[base];
            for (int j = 1; j < axis_len; ++j) mx = std::max(mx, px[base + j * inner]);
            T denom = T(0);
            for (int j = 0; j < axis_len; ++j) {
                T e = std::exp(px[base + j * inner] - mx);
                y[base + j * inner] = e;
                denom += e;
            }
            for (int j = 0; j < axis_len; ++j) y[base + j * inner] /= denom;
        }
    }
    Tensor<T> out(x.shape(), std::move(y));
    auto y_vals = out.payload();
    return record<T>(std::move(out), {&x},
                     [xn = x.node(), y_vals, axis_len, inner, outer](Tape<T>& t,
                                                                     const std::vector<T>& gy) {
                         if (xn < 0) return;
                         auto& gx = t.grad_buffer(xn);
                         const std::vector<T>& yv = *y_vals;
                         // dx_j = y_j * (gy_j - sum_k gy_k y_k) per slice
                         for (int o = 0; o < outer; ++o) {
                             for (int in = 0; in < inner; ++in) {
                                 const int base = o * axis_len * inner + in;
                                 T dot = T(0);
                                 for (int j = 0; j < axis_len; ++j)
                                     dot += gy[base + j * inner] * yv[base + j * inner];
                                 for (int j = 0; j < axis_len; ++j) {
                                     const int idx = base + j * inner;
                                     gx[idx] += yv[idx] * (gy[idx] - dot);
                                 }
                             }
                         }
                     });
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation semantics, zero padding, configurable
// stride/dilation. Dilation inserts (dilation-1) gaps between kernel taps.

inline int conv_out_extent(int in, int pad, int dil, int k, int stride) {
    return (in + 2 * pad - dil * (k - 1) - 1) / stride + 1;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride = 1,
                 int padding = 0, int dilation = 1) {
    if (x.rank() != 4 || w.rank() != 4)
        throw DimensionError("conv2d: expected rank-4 input and weight, got " +
                             shape_str(x.shape()) + " and " + shape_str(w.shape()));
    const int N = x.shape()[0], Cin = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const int Cout = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    if (w.shape()[1] != Cin)
        throw DimensionError("conv2d: input channels " + std::to_string(Cin) +
                             " do not match weight " + shape_str(w.shape()));
    if (bias.rank() != 1 || bias.shape()[0] != Cout)
        throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()) + " must be [" +
                             std::to_string(Cout) + "]");
    if (stride < 1 || dilation < 1 || padding < 0)
        throw ContractError("conv2d: stride/dilation must be >= 1 and padding >= 0");
    const int Ho = conv_out_extent(H, padding, dilation, kh, stride);
    const int Wo = conv_out_extent(W, padding, dilation, kw, stride);
    if (Ho < 1 || Wo < 1)
        throw DimensionError("conv2d: output extent < 1 for input " + shape_str(x.shape()) +
                             " kernel " + shape_str(w.shape()));

    std::vector<T> y(static_cast<size_t>(N) * Cout * Ho * Wo);
    const T* px = x.data();
    const T* pw = w.data();
    const T* pbias = bias.data();
    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Cout; ++co) {
            T* yplane = y.data() + (static_cast<size_t>(n) * Cout + co) * Ho * Wo;
            std::fill(yplane, yplane + static_cast<size_t>(Ho) * Wo, pbias[co]);
            for (int ci = 0; ci < Cin; ++ci) {
                const T* xplane = px + (static_cast<size_t>(n) * Cin + ci) * H * W;
                for (int r = 0; r < kh; ++r) {
                    for (int c = 0; c < kw; ++c) {
                        const T wv = pw[((static_cast<size_t>(co) * Cin + ci) * kh + r) * kw + c];
                        for (int oh = 0; oh < Ho; ++oh) {
                            const int ih = oh * stride - padding + r * dilation;
                            if (ih < 0 || ih >= H) continue;
                            const T* xrow = xplane + static_cast<size_t>(ih) * W;
                            T* yrow = yplane + static_cast<size_t>(oh) * Wo;
                            for (int ow = 0; ow < Wo; ++ow) {
                                const int iw = ow * stride - padding + c * dilation;
                                if (iw < 0 || iw >= W) continue;
                                yrow[ow] += wv * xrow[iw];
                            }
                        }
                    }
                }
            }
        }
    }
    return record<T>(
        Tensor<T>({N, Cout, Ho, Wo}, std::move(y)), {&x, &w, &bias},
        [xn = x.node(), wn = w.node(), bn = bias.node(), dx = x.payload(), dw = w.payload(), N,
         Cin, H, W, Cout, kh, kw, Ho, Wo, stride, padding,
         dilation](Tape<T>& t, const std::vector<T>& gy) {
            if (bn >= 0) {
                auto& gb = t.grad_buffer(bn);
                for (int n = 0; n < N; ++n)
                    for (int co = 0; co < Cout; ++co) {
                        const T* gyp = gy.data() + (static_cast<size_t>(n) * Cout + co) * Ho * Wo;
                        T acc = T(0);
                        for (int i = 0; i < Ho * Wo; ++i) acc += gyp[i];
                        gb[co] += acc;
                    }
            }
            if (wn >= 0) {
                auto& gw = t.grad_buffer(wn);
                for (int n = 0; n < N; ++n) {
                    for (int co = 0; co < Cout; ++co) {
                        const T* gyp = gy.data() + (static_cast<size_t>(n) * Cout + co) * Ho * Wo;
                        for (int ci = 0; ci < Cin; ++ci) {
                            const T* xplane = dx->data() + (static_cast<size_t>(n) * Cin + ci) * H * W;
                            for (int r = 0; r < kh; ++r) {
                                for (int c = 0; c < kw; ++c) {
                                    T acc = T(0);
                                    for (int oh = 0; oh < Ho; ++oh) {
                                        const int ih = oh * stride - padding + r * dilation;
                                        if (ih < 0 || ih >= H) continue;
                                        const T* xrow = xplane + static_cast<size_t>(ih) * W;
                                        const T* gyrow = gyp + static_cast<size_t>(oh) * Wo;
                                        for (int ow = 0; ow < Wo; ++ow) {
                                            const int iw = ow * stride - padding + c * dilation;
                                            if (iw < 0 || iw >= W) continue;
                                            acc += gyrow[ow] * xrow[iw];
                                        }
                                    }
                                    gw[((static_cast<size_t>(co) * Cin + ci) * kh + r) * kw + c] +=
                                        acc;
                                }
                            }
                        }
                    }
                }
            }
            if (xn >= 0) {
                auto& gx = t.grad_buffer(xn);
                for (int n = 0; n < N; ++n) {
                    for (int co = 0; co < Cout; ++co) {
                        const T* gyp = gy.data() + (static_cast<size_t>(n) * Cout + co) * Ho * Wo;
                        for (int ci = 0; ci < Cin; ++ci) {
                            T* gxplane = gx.data() + (static_cast<size_t>(n) * Cin + ci) * H * W;
                            for (int r = 0; r < kh; ++r) {
                                for (int c = 0; c < kw; ++c) {
                                    const T wv =
                                        (*dw)[((static_cast<size_t>(co) * Cin + ci) * kh + r) * kw + c];
                                    if (wv == T(0)) continue;
                                    for (int oh = 0; oh < Ho; ++oh) {
                                        const int ih = oh * stride - padding + r * dilation;
                                        if (ih < 0 || ih >= H) continue;
                                        T* gxrow = gxplane + static_cast<size_t>(ih) * W;
                                        const T* gyrow = gyp + static_cast<size_t>(oh) * Wo;
                                        for (int ow = 0; ow < Wo; ++ow) {
                                            const int iw = ow * stride - padding + c * dilation;
                                            if (iw < 0 || iw >= W) continue;
                                            gxrow[iw] += wv * gyrow[ow];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// maxpool2d with fixed 2x2 window and stride 2. Ties route the gradient to
// the first element in row-major window order.

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x) {
    if (x.rank() != 4)
        throw DimensionError("maxpool2d: expected rank-4 input, got " + shape_str(x.shape()));
    const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    if (H % 2 != 0 || W % 2 != 0)
        throw DimensionError("maxpool2d: extents must be even, got " + shape_str(x.shape()));
    const int Ho = H / 2, Wo = W / 2;
    std::vector<T> y(static_cast<size_t>(N) * C * Ho * Wo);
    auto argmax = std::make_shared<std::vector<int>>(y.size());
    const T* px = x.data();
    KinkProbe* probe = detail::active_probe();
    size_t oi = 0;
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const size_t plane_off = (static_cast<size_t>(n) * C + c) * H * W;
            const T* plane = px + plane_off;
            for (int oh = 0; oh < Ho; ++oh) {
                for (int ow = 0; ow < Wo; ++ow, ++oi) {
                    const int h0 = oh * 2, w0 = ow * 2;
                    const int idx[4] = {h0 * W + w0, h0 * W + w0 + 1, (h0 + 1) * W + w0,
                                        (h0 + 1) * W + w0 + 1};
                    int best = 0;
                    for (int j = 1; j < 4; ++j)
                        if (plane[idx[j]] > plane[idx[best]]) best = j;
                    if (probe) {
                        T second = -std::numeric_limits<T>::infinity();
                        for (int j = 0; j < 4; ++j)
                            if (j != best) second = std::max(second, plane[idx[j]]);
                        probe->note_pool(static_cast<double>(plane[idx[best]] - second), best);
                    }
                    y[oi] = plane[idx[best]];
                    (*argmax)[oi] = static_cast<int>(plane_off) + idx[best];
                }
            }
        }
    }
    return record<T>(Tensor<T>({N, C, Ho, Wo}, std::move(y)), {&x},
                     [xn = x.node(), argmax](Tape<T>& t, const std::vector<T>& gy) {
                         if (xn < 0) return;
                         auto& gx = t.grad_buffer(xn);
                         for (size_t i = 0; i < gy.size(); ++i) gx[(*argmax)[i]] += gy[i];
                     });
}

// ---------------------------------------------------------------------------
// Bilinear upsampling. Destination pixel i samples source coordinate
// (i + 0.5) * h / H - 0.5, clamped to [0, h-1]; interpolation is separable.

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int H, int W) {
    if (x.rank() != 4)
        throw DimensionError("upsample_bilinear: expected rank-4 input, got " +
                             shape_str(x.shape()));
    const int N = x.shape()[0], C = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    if (H < h || W < w)
        throw DimensionError("upsample_bilinear: target " + std::to_string(H) + "x" +
                             std::to_string(W) + " smaller than source " + std::to_string(h) +
                             "x" + std::to_string(w));
    struct Lerp {
        int lo, hi;
        T wlo, whi;
    };
    auto make_axis = [](int src, int dst) {
        std::vector<Lerp> v(dst);
        for (int i = 0; i < dst; ++i) {
            double coord = (i + 0.5) * static_cast<double>(src) / dst - 0.5;
            coord = std::min(std::max(coord, 0.0), static_cast<double>(src - 1));
            int lo = static_cast<int>(std::floor(coord));
            int hi = std::min(lo + 1, src - 1);
            T frac = static_cast<T>(coord - lo);
            v[i] = {lo, hi, T(1) - frac, frac};
        }
        return v;
    };
    auto rows = std::make_shared<std::vector<Lerp>>(make_axis(h, H));
    auto cols = std::make_shared<std::vector<Lerp>>(make_axis(w, W));
    std::vector<T> y(static_cast<size_t>(N) * C * H * W);
    const T* px = x.data();
    size_t oi = 0;
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const T* plane = px + (static_cast<size_t>(n) * C + c) * h * w;
            for (int i = 0; i < H; ++i) {
                const Lerp& ri = (*rows)[i];
                for (int j = 0; j < W; ++j, ++oi) {
                    const Lerp& cj = (*cols)[j];
                    y[oi] = ri.wlo * (cj.wlo * plane[ri.lo * w + cj.lo] +
                                      cj.whi * plane[ri.lo * w + cj.hi]) +
                            ri.whi * (cj.wlo * plane[ri.hi * w + cj.lo] +
                                      cj.whi * plane[ri.hi * w + cj.hi]);
                }
            }
        }
    }
    return record<T>(Tensor<T>({N, C, H, W}, std::move(y)), {&x},
                     [xn = x.node(), rows, cols, N, C, h, w, H, W](Tape<T>& t,
                                                                   const std::vector<T>& gy) {
                         if (xn < 0) return;
                         auto& gx = t.grad_buffer(xn);
                         size_t oi = 0;
                         for (int n = 0; n < N; ++n) {
                             for (int c = 0; c < C; ++c) {
                                 T* plane = gx.data() + (static_cast<size_t>(n) * C + c) * h * w;
                                 for (int i = 0; i < H; ++i) {
                                     const auto& ri = (*rows)[i];
                                     for (int j = 0; j < W; ++j, ++oi) {
                                         const auto& cj = (*cols)[j];
                                         const T g = gy[oi];
                                         plane[ri.lo * w + cj.lo] += g * ri.wlo * cj.wlo;
                                         plane[ri.lo * w + cj.hi] += g * ri.wlo * cj.whi;
                                         plane[ri.hi * w + cj.lo] += g * ri.whi * cj.wlo;
                                         plane[ri.hi * w + cj.hi] += g * ri.whi * cj.whi;
                                     }
                                 }
                             }
                         }
                     });
}

// ---------------------------------------------------------------------------
// Layout transforms: pure relabelings with exact inverse backward rules.

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    check_shape_valid(shape);
    if (shape_numel(shape) != x.size())
        throw DimensionError("reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
                             shape_str(shape));
    return record<T>(Tensor<T>(std::move(shape), x.values()), {&x},
                     [xn = x.node()](Tape<T>& t, const std::vector<T>& gy) {
                         if (xn < 0) return;
                         auto& gx = t.grad_buffer(xn);
                         for (size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
                     });
}

namespace detail {

inline std::vector<int> strides_of(const Shape& s) {
    std::vector<int> st(s.size());
    int acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

// Iterates destination flat indices of an axis-swapped view together with
// the matching source flat index.
template <typename Fn>
void for_each_transposed(const Shape& in_shape, int a, int b, Fn&& fn) {
    Shape out_shape = in_shape;
    std::swap(out_shape[a], out_shape[b]);
    auto in_strides = strides_of(in_shape);
    std::swap(in_strides[a], in_strides[b]);  // source strides in destination order
    const int rank = static_cast<int>(in_shape.size());
    std::vector<int> idx(rank, 0);
    const int n = shape_numel(in_shape);
    int src = 0;
    for (int flat = 0; flat < n; ++flat) {
        fn(flat, src);
        for (int d = rank - 1; d >= 0; --d) {
            src += in_strides[d];
            if (++idx[d] < out_shape[d]) break;
            src -= out_shape[d] * in_strides[d];
            idx[d] = 0;
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int a, int b) {
    if (a < 0 || b < 0 || a >= x.rank() || b >= x.rank())
        throw DimensionError("transpose: axes " + std::to_string(a) + "," + std::to_string(b) +
                             " out of range for shape " + shape_str(x.shape()));
    Shape out_shape = x.shape();
    std::swap(out_shape[a], out_shape[b]);
    std::vector<T> y(x.size());
    const T* px = x.data();
    detail::for_each_transposed(x.shape(), a, b, [&](int dst, int src) { y[dst] = px[src]; });
    return record<T>(Tensor<T>(std::move(out_shape), std::move(y)), {&x},
                     [xn = x.node(), in_shape = x.shape(), a, b](Tape<T>& t,
                                                                 const std::vector<T>& gy) {
                         if (xn < 0) return;
                         auto& gx = t.grad_buffer(xn);
                         detail::for_each_transposed(in_shape, a, b,
                                                     [&](int dst, int src) { gx[src] += gy[dst]; });
                     });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: no operands");
    const Shape& s0 = parts[0].shape();
    if (axis < 0 || axis >= static_cast<int>(s0.size()))
        throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for shape " +
                             shape_str(s0));
    int axis_total = 0;
    for (const auto& p : parts) {
        if (p.rank() != static_cast<int>(s0.size()))
            throw DimensionError("concat: rank mismatch " + shape_str(s0) + " vs " +
                                 shape_str(p.shape()));
        for (int d = 0; d < p.rank(); ++d)
            if (d != axis && p.shape()[d] != s0[d])
                throw DimensionError("concat: extent mismatch " + shape_str(s0) + " vs " +
                                     shape_str(p.shape()));
        axis_total += p.shape()[axis];
    }
    Shape out_shape = s0;
    out_shape[axis] = axis_total;
    int outer = 1;
    for (int d = 0; d < axis; ++d) outer *= s0[d];
    int inner = 1;
    for (int d = axis + 1; d < static_cast<int>(s0.size()); ++d) inner *= s0[d];
    std::vector<T> y(static_cast<size_t>(outer) * axis_total * inner);
    std::vector<int> offsets;
    std::vector<int> in_nodes;
    std::vector<int> alens;
    int off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        in_nodes.push_back(p.node());
        alens.push_back(p.shape()[axis]);
        const T* pp = p.data();
        const int alen = p.shape()[axis];
        for (int o = 0; o < outer; ++o) {
            std::copy(pp + static_cast<size_t>(o) * alen * inner,
                      pp + static_cast<size_t>(o + 1) * alen * inner,
                      y.begin() + (static_cast<size_t>(o) * axis_total + off) * inner);
        }
        off += alen;
    }
    Tensor<T> result(std::move(out_shape), std::move(y));
    Tape<T>* tape = nullptr;
    for (const auto& p : parts) {
        if (!p.tracked()) continue;
        if (tape && tape != p.tape()) throw ContractError("operands belong to different tapes");
        tape = p.tape();
    }
    if (!tape) return result;
    return attach_node<T>(
        std::move(result), tape, in_nodes,
        [in_nodes, alens, offsets, outer, inner, axis_total](Tape<T>& t,
                                                             const std::vector<T>& gy) {
            for (size_t pi = 0; pi < in_nodes.size(); ++pi) {
                if (in_nodes[pi] < 0) continue;
                auto& gp = t.grad_buffer(in_nodes[pi]);
                const int alen = alens[pi];
                for (int o = 0; o < outer; ++o) {
                    const T* src =
                        gy.data() + (static_cast<size_t>(o) * axis_total + offsets[pi]) * inner;
                    T* dst = gp.data() + static_cast<size_t>(o) * alen * inner;
                    for (int i = 0; i < alen * inner; ++i) dst[i] += src[i];
                }
            }
        });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, const std::vector<int>& starts, const std::vector<int>& stops) {
    if (static_cast<int>(starts.size()) != x.rank() || static_cast<int>(stops.size()) != x.rank())
        throw DimensionError("slice: range rank mismatch for shape " + shape_str(x.shape()));
    Shape out_shape(x.rank());
    for (int d = 0; d < x.rank(); ++d) {
        if (starts[d] < 0 || stops[d] > x.shape()[d] || starts[d] >= stops[d])
            throw DimensionError("slice: invalid range [" + std::to_string(starts[d]) + "," +
                                 std::to_string(stops[d]) + ") on axis " + std::to_string(d) +
                                 " of shape " + shape_str(x.shape()));
        out_shape[d] = stops[d] - starts[d];
    }
    const auto in_strides = detail::strides_of(x.shape());
    const int rank = x.rank();
    const int n = shape_numel(out_shape);
    std::vector<T> y(n);
    const T* px = x.data();
    std::vector<int> idx(rank, 0);
    for (int flat = 0; flat < n; ++flat) {
        int src = 0;
        for (int d = 0; d < rank; ++d) src += (starts[d] + idx[d]) * in_strides[d];
        y[flat] = px[src];
        for (int d = rank - 1; d >= 0; --d) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
        }
    }
    return record<T>(Tensor<T>(out_shape, std::move(y)), {&x},
                     [xn = x.node(), starts, in_strides, out_shape, rank,
                      n](Tape<T>& t, const std::vector<T>& gy) {
                         if (xn < 0) return;
                         auto& gx = t.grad_buffer(xn);
                         std::vector<int> idx(rank, 0);
                         for (int flat = 0; flat < n; ++flat) {
                             int src = 0;
                             for (int d = 0; d < rank; ++d)
                                 src += (starts[d] + idx[d]) * in_strides[d];
                             gx[src] += gy[flat];
                             for (int d = rank - 1; d >= 0; --d) {
                                 if (++idx[d] < out_shape[d]) break;
                                 idx[d] = 0;
                             }
                         }
                     });
}

// ---------------------------------------------------------------------------
// Patch layout transforms for attention: [C,H,W] <-> [N, P*P*C] with patches
// enumerated row-major over the patch grid and the channel varying fastest
// within a patch.

template <typename T>
Tensor<T> patchify(const Tensor<T>& x, int P) {
    if (x.rank() != 3)
        throw DimensionError("patchify: expected rank-3 input, got " + shape_str(x.shape()));
    const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    if (P < 1 || H % P != 0 || W % P != 0)
        throw DimensionError("patchify: extents H=" + std::to_string(H) + " W=" +
                             std::to_string(W) + " not divisible by patch size P=" +
                             std::to_string(P));
    const int gh = H / P, gw = W / P;
    const int N = gh * gw, D = P * P * C;
    std::vector<T> y(static_cast<size_t>(N) * D);
    const T* px = x.data();
    size_t oi = 0;
    for (int pr = 0; pr < gh; ++pr)
        for (int pc = 0; pc < gw; ++pc)
            for (int r = 0; r < P; ++r)
                for (int c = 0; c < P; ++c)
                    for (int ch = 0; ch < C; ++ch, ++oi)
                        y[oi] = px[(static_cast<size_t>(ch) * H + pr * P + r) * W + pc * P + c];
    return record<T>(Tensor<T>({N, D}, std::move(y)), {&x},
                     [xn = x.node(), C, H, W, P, gh, gw](Tape<T>& t, const std::vector<T>& gy) {
                         if (xn < 0) return;
                         auto& gx = t.grad_buffer(xn);
                         size_t oi = 0;
                         for (int pr = 0; pr < gh; ++pr)
                             for (int pc = 0; pc < gw; ++pc)
                                 for (int r = 0; r < P; ++r)
                                     for (int c = 0; c < P; ++c)
                                         for (int ch = 0; ch < C; ++ch, ++oi)
                                             gx[(static_cast<size_t>(ch) * H + pr * P + r) * W +
                                                pc * P + c] += gy[oi];
                     });
}

template <typename T>
Tensor<T> unpatchify(const Tensor<T>& x, int C, int H, int W, int P) {
    if (x.rank() != 2)
        throw DimensionError("unpatchify: expected rank-2 input, got " + shape_str(x.shape()));
    const int gh = P >= 1 ? H / P : 0, gw = P >= 1 ? W / P : 0;
    if (P < 1 || H % P != 0 || W % P != 0 || x.shape()[0] != gh * gw || x.shape()[1] != P * P * C)
        throw DimensionError("unpatchify: token shape " + shape_str(x.shape()) +
                             " inconsistent with C=" + std::to_string(C) + " H=" +
                             std::to_string(H) + " W=" + std::to_string(W) + " P=" +
                             std::to_string(P));
    std::vector<T> y(static_cast<size_t>(C) * H * W);
    const T* px = x.data();
    size_t oi = 0;
    for (int pr = 0; pr < gh; ++pr)
        for (int pc = 0; pc < gw; ++pc)
            for (int r = 0; r < P; ++r)
                for (int c = 0; c < P; ++c)
                    for (int ch = 0; ch < C; ++ch, ++oi)
                        y[(static_cast<size_t>(ch) * H + pr * P + r) * W + pc * P + c] = px[oi];
    return record<T>(Tensor<T>({C, H, W}, std::move(y)), {&x},
                     [xn = x.node(), C, H, W, P, gh, gw](Tape<T>& t, const std::vector<T>& gy) {
                         if (xn < 0) return;
                         auto& gx = t.grad_buffer(xn);
                         size_t oi = 0;
                         for (int pr = 0; pr < gh; ++pr)
                             for (int pc = 0; pc < gw; ++pc)
                                 for (int r = 0; r < P; ++r)
                                     for (int c = 0; c < P; ++c)
                                         for (int ch = 0; ch < C; ++ch, ++oi)
                                             gx[oi] +=
                                                 gy[(static_cast<size_t>(ch) * H + pr * P + r) * W +
                                                    pc * P + c];
                     });
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x) {
    std::vector<To> y(x.size());
    const From* px = x.data();
    for (int i = 0; i < x.size(); ++i) y[i] = static_cast<To>(px[i]);
    return Tensor<To>(x.shape(), std::move(y));
}

}  // namespace mafnet
