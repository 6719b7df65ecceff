#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sessrec/common.hpp"
#include "sessrec/rng.hpp"

namespace sessrec {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << " x ";
        os << s[i];
    }
    os << "]";
    return os.str();
}

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// Dense f64 tensor. Value-semantic handle over shared storage: copies alias
// the same buffer, which is what the tape relies on to reach gradients.
// By convention a tensor is never mutated after an op has produced it.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        std::size_t n = numel(shape);
        t.d_ = std::make_shared<Data>();
        t.d_->shape = std::move(shape);
        t.d_->values.assign(n, 0.0);
        return t;
    }

    static Tensor full(Shape shape, double v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.d_->values.begin(), t.d_->values.end(), v);
        return t;
    }

    static Tensor from_values(Shape shape, std::vector<double> values) {
        if (numel(shape) != values.size()) {
            throw ShapeError("tensor: " + std::to_string(values.size()) +
                             " values do not fill shape " + shape_str(shape));
        }
        Tensor t;
        t.d_ = std::make_shared<Data>();
        t.d_->shape = std::move(shape);
        t.d_->values = std::move(values);
        return t;
    }

    static Tensor scalar(double v) { return from_values({1}, {v}); }

    static Tensor randn(Shape shape, Rng& rng, double sigma = 1.0) {
        Tensor t = zeros(std::move(shape));
        for (double& x : t.d_->values) x = rng.normal(0.0, sigma);
        return t;
    }

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t dim(std::size_t i) const { return d_->shape[i]; }
    std::size_t size() const { return d_->values.size(); }

    std::vector<double>& values() { return d_->values; }
    const std::vector<double>& values() const { return d_->values; }
    double* data() { return d_->values.data(); }
    const double* data() const { return d_->values.data(); }

    // Scalar accessor; the tensor must hold exactly one element.
    double value() const {
        if (size() != 1) throw ShapeError("value(): tensor " + shape_str(shape()) + " is not scalar");
        return d_->values[0];
    }

    // Rank-2 accessors.
    double& at(std::size_t r, std::size_t c) { return d_->values[r * d_->shape[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return d_->values[r * d_->shape[1] + c]; }

    bool requires_grad() const { return d_ && d_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        d_->requires_grad = rg;
        return *this;
    }

    bool has_grad() const { return d_ && !d_->grad.empty(); }

    // Gradient buffer, allocated (zero-filled) on first touch.
    std::vector<double>& grad() {
        if (d_->grad.empty()) d_->grad.assign(d_->values.size(), 0.0);
        return d_->grad;
    }

    void zero_grad() {
        if (d_ && !d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
    }

    void assert_finite(const std::string& what) const {
        for (std::size_t i = 0; i < d_->values.size(); ++i) {
            if (!std::isfinite(d_->values[i])) {
                throw NumericError(what + ": non-finite value at flat index " + std::to_string(i) +
                                   " in tensor " + shape_str(shape()));
            }
        }
    }

    // Deep copy of values (gradient and flags are not carried over).
    Tensor clone_values() const { return from_values(d_->shape, d_->values); }

    bool same_storage(const Tensor& o) const { return d_ == o.d_; }

  private:
    struct Data {
        Shape shape;
        std::vector<double> values;
        std::vector<double> grad;
        bool requires_grad = false;
    };
    std::shared_ptr<Data> d_;
};

// Record of the executed differentiable ops, in execution order. backward()
// replays it in exact reverse. One tape per training thread; cleared after
// every optimizer step.
class Tape {
  public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    void set_recording(bool r) { recording_ = r; }

    void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    void backward(Tensor& loss) {
        if (loss.size() != 1) {
            throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        }
        loss.grad()[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

  private:
    bool recording_;
    std::vector<std::function<void()>> nodes_;
};

namespace detail {

inline bool want_grad(const Tape& tape, std::initializer_list<const Tensor*> inputs) {
    if (!tape.recording()) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

inline void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
    }
}

// c += a (m x k) * b (k x n)
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                     std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            double av = arow[l];
            const double* brow = b + l * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c += a (m x n) * b^T, with b stored (k x n); result (m x k)
inline void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                        std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        double* crow = c + i * k;
        for (std::size_t l = 0; l < k; ++l) {
            const double* brow = b + l * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
            crow[l] += acc;
        }
    }
}

// c += a^T * b, with a stored (m x k), b (m x n); result (k x n)
inline void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                        std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            double av = arow[l];
            double* crow = c + l * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable ops. Each validates shapes, computes the forward value and,
// when recording and some input requires grad, pushes a backward closure.
// Backward closures use raw loops only; they never touch the tape.
// ---------------------------------------------------------------------------

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    if (a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    detail::gemm_acc(a.data(), b.data(), out.data(), m, k, n);
    if (detail::want_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.record([a, b, out]() mutable {
            std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
            const double* g = out.grad().data();
            if (a.requires_grad()) detail::gemm_nt_acc(g, b.data(), a.grad().data(), m, n, k);
            if (b.requires_grad()) detail::gemm_tn_acc(a.data(), g, b.grad().data(), m, k, n);
        });
    }
    return out;
}

inline Tensor transpose(Tape& tape, const Tensor& x) {
    detail::require_rank2(x, "transpose");
    std::size_t r = x.dim(0), c = x.dim(1);
    Tensor out = Tensor::zeros({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(j, i) = x.at(i, j);
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record([x, out]() mutable {
            std::size_t r = x.dim(0), c = x.dim(1);
            const double* g = out.grad().data();
            double* xg = x.grad().data();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) xg[i * c + j] += g[j * r + i];
        });
    }
    return out;
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add: shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (detail::want_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.record([a, b, out]() mutable {
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                double* ag = a.grad().data();
                for (std::size_t i = 0; i < a.size(); ++i) ag[i] += g[i];
            }
            if (b.requires_grad()) {
                double* bg = b.grad().data();
                for (std::size_t i = 0; i < b.size(); ++i) bg[i] += g[i];
            }
        });
    }
    return out;
}

// out[i, j] = a[i, j] + v[j]; v broadcast over rows.
inline Tensor add_rowvec(Tape& tape, const Tensor& a, const Tensor& v) {
    detail::require_rank2(a, "add_rowvec");
    std::size_t m = a.dim(0), n = a.dim(1);
    if (v.size() != n) {
        throw ShapeError("add_rowvec: " + shape_str(a.shape()) + " vs vector " +
                         shape_str(v.shape()));
    }
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) = a.at(i, j) + v.data()[j];
    if (detail::want_grad(tape, {&a, &v})) {
        out.set_requires_grad(true);
        tape.record([a, v, out]() mutable {
            std::size_t m = a.dim(0), n = a.dim(1);
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                double* ag = a.grad().data();
                for (std::size_t i = 0; i < m * n; ++i) ag[i] += g[i];
            }
            if (v.requires_grad()) {
                double* vg = v.grad().data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) vg[j] += g[i * n + j];
            }
        });
    }
    return out;
}

inline Tensor scale(Tape& tape, const Tensor& x, double c) {
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = c * x.data()[i];
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record([x, out, c]() mutable {
            const double* g = out.grad().data();
            double* xg = x.grad().data();
            for (std::size_t i = 0; i < x.size(); ++i) xg[i] += c * g[i];
        });
    }
    return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul: shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (detail::want_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.record([a, b, out]() mutable {
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                double* ag = a.grad().data();
                for (std::size_t i = 0; i < a.size(); ++i) ag[i] += g[i] * b.data()[i];
            }
            if (b.requires_grad()) {
                double* bg = b.grad().data();
                for (std::size_t i = 0; i < b.size(); ++i) bg[i] += g[i] * a.data()[i];
            }
        });
    }
    return out;
}

inline Tensor sum(Tape& tape, const Tensor& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x.data()[i];
    Tensor out = Tensor::scalar(acc);
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record([x, out]() mutable {
            double g = out.grad()[0];
            double* xg = x.grad().data();
            for (std::size_t i = 0; i < x.size(); ++i) xg[i] += g;
        });
    }
    return out;
}

inline Tensor mean(Tape& tape, const Tensor& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x.data()[i];
    double inv = 1.0 / static_cast<double>(x.size());
    Tensor out = Tensor::scalar(acc * inv);
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record([x, out, inv]() mutable {
            double g = out.grad()[0] * inv;
            double* xg = x.grad().data();
            for (std::size_t i = 0; i < x.size(); ++i) xg[i] += g;
        });
    }
    return out;
}

// Rows [r0, r1) of a rank-2 tensor, as a copy on the tape.
inline Tensor slice_rows(Tape& tape, const Tensor& x, std::size_t r0, std::size_t r1) {
    detail::require_rank2(x, "slice_rows");
    if (r0 > r1 || r1 > x.dim(0)) {
        throw ShapeError("slice_rows: range [" + std::to_string(r0) + ", " + std::to_string(r1) +
                         ") out of " + shape_str(x.shape()));
    }
    std::size_t c = x.dim(1);
    Tensor out = Tensor::zeros({r1 - r0, c});
    std::copy(x.data() + r0 * c, x.data() + r1 * c, out.data());
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record([x, out, r0]() mutable {
            std::size_t c = x.dim(1);
            const double* g = out.grad().data();
            double* xg = x.grad().data() + r0 * c;
            for (std::size_t i = 0; i < out.size(); ++i) xg[i] += g[i];
        });
    }
    return out;
}

inline Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t c0, std::size_t c1) {
    detail::require_rank2(x, "slice_cols");
    if (c0 > c1 || c1 > x.dim(1)) {
        throw ShapeError("slice_cols: range [" + std::to_string(c0) + ", " + std::to_string(c1) +
                         ") out of " + shape_str(x.shape()));
    }
    std::size_t r = x.dim(0), c = x.dim(1), w = c1 - c0;
    Tensor out = Tensor::zeros({r, w});
    for (std::size_t i = 0; i < r; ++i)
        std::copy(x.data() + i * c + c0, x.data() + i * c + c1, out.data() + i * w);
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record([x, out, c0]() mutable {
            std::size_t r = x.dim(0), c = x.dim(1), w = out.dim(1);
            const double* g = out.grad().data();
            double* xg = x.grad().data();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < w; ++j) xg[i * c + c0 + j] += g[i * w + j];
        });
    }
    return out;
}

inline Tensor concat_rows(Tape& tape, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no parts");
    std::size_t c = parts[0].dim(1), rows = 0;
    for (const Tensor& p : parts) {
        detail::require_rank2(p, "concat_rows");
        if (p.dim(1) != c) {
            throw ShapeError("concat_rows: column mismatch: " + shape_str(parts[0].shape()) +
                             " vs " + shape_str(p.shape()));
        }
        rows += p.dim(0);
    }
    Tensor out = Tensor::zeros({rows, c});
    std::size_t r = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        std::copy(p.data(), p.data() + p.size(), out.data() + r * c);
        r += p.dim(0);
        rg = rg || p.requires_grad();
    }
    if (tape.recording() && rg) {
        out.set_requires_grad(true);
        tape.record([parts, out]() mutable {
            std::size_t c = out.dim(1), r = 0;
            const double* g = out.grad().data();
            for (Tensor& p : parts) {
                if (p.requires_grad()) {
                    double* pg = p.grad().data();
                    for (std::size_t i = 0; i < p.size(); ++i) pg[i] += g[r * c + i];
                }
                r += p.dim(0);
            }
        });
    }
    return out;
}

inline Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    std::size_t r = parts[0].dim(0), cols = 0;
    for (const Tensor& p : parts) {
        detail::require_rank2(p, "concat_cols");
        if (p.dim(0) != r) {
            throw ShapeError("concat_cols: row mismatch: " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        }
        cols += p.dim(1);
    }
    Tensor out = Tensor::zeros({r, cols});
    std::size_t c = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        std::size_t w = p.dim(1);
        for (std::size_t i = 0; i < r; ++i)
            std::copy(p.data() + i * w, p.data() + (i + 1) * w, out.data() + i * cols + c);
        c += w;
        rg = rg || p.requires_grad();
    }
    if (tape.recording() && rg) {
        out.set_requires_grad(true);
        tape.record([parts, out]() mutable {
            std::size_t r = out.dim(0), cols = out.dim(1), c = 0;
            const double* g = out.grad().data();
            for (Tensor& p : parts) {
                std::size_t w = p.dim(1);
                if (p.requires_grad()) {
                    double* pg = p.grad().data();
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < w; ++j) pg[i * w + j] += g[i * cols + c + j];
                }
                c += w;
            }
        });
    }
    return out;
}

// Softmax over one axis, max-subtracted for stability. Slices along the axis
// each sum to 1.
inline Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis) {
    if (axis >= x.rank() || x.dim(axis) == 0) {
        throw ShapeError("softmax: invalid axis " + std::to_string(axis) + " for " +
                         shape_str(x.shape()));
    }
    std::size_t n = x.dim(axis);
    std::size_t inner = 1, outer = 1;
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const double* xs = x.data() + o * n * inner + in;
            double* ys = out.data() + o * n * inner + in;
            double mx = xs[0];
            for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, xs[i * inner]);
            double z = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                double e = std::exp(xs[i * inner] - mx);
                ys[i * inner] = e;
                z += e;
            }
            double invz = 1.0 / z;
            for (std::size_t i = 0; i < n; ++i) ys[i * inner] *= invz;
        }
    }
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record([x, out, n, inner, outer]() mutable {
            const double* y = out.data();
            const double* g = out.grad().data();
            double* xg = x.grad().data();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    std::size_t base = o * n * inner + in;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < n; ++i)
                        dot += g[base + i * inner] * y[base + i * inner];
                    for (std::size_t i = 0; i < n; ++i) {
                        std::size_t k = base + i * inner;
                        xg[k] += (g[k] - dot) * y[k];
                    }
                }
            }
        });
    }
    return out;
}

// Per-row layer normalization with learnable gain/bias over the last axis of
// a rank-2 input.
inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    detail::require_rank2(x, "layer_norm");
    std::size_t m = x.dim(0), d = x.dim(1);
    if (gain.size() != d || bias.size() != d) {
        throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match " + shape_str(x.shape()));
    }
    Tensor out = Tensor::zeros({m, d});
    std::vector<double> inv_sigma(m), mu(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = x.data() + i * d;
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += row[j];
        double u = s / static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double c = row[j] - u;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double is = 1.0 / std::sqrt(var + eps);
        mu[i] = u;
        inv_sigma[i] = is;
        double* orow = out.data() + i * d;
        for (std::size_t j = 0; j < d; ++j)
            orow[j] = (row[j] - u) * is * gain.data()[j] + bias.data()[j];
    }
    if (detail::want_grad(tape, {&x, &gain, &bias})) {
        out.set_requires_grad(true);
        tape.record([x, gain, bias, out, mu, inv_sigma]() mutable {
            std::size_t m = x.dim(0), d = x.dim(1);
            const double* g = out.grad().data();
            for (std::size_t i = 0; i < m; ++i) {
                const double* row = x.data() + i * d;
                const double* grow = g + i * d;
                double is = inv_sigma[i], u = mu[i];
                // dxhat = g * gain; dx = (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat)) * is
                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    double xhat = (row[j] - u) * is;
                    double dxhat = grow[j] * gain.data()[j];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat;
                }
                mean_dxhat /= static_cast<double>(d);
                mean_dxhat_xhat /= static_cast<double>(d);
                if (x.requires_grad()) {
                    double* xg = x.grad().data() + i * d;
                    for (std::size_t j = 0; j < d; ++j) {
                        double xhat = (row[j] - u) * is;
                        double dxhat = grow[j] * gain.data()[j];
                        xg[j] += (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * is;
                    }
                }
                if (gain.requires_grad()) {
                    double* gg = gain.grad().data();
                    for (std::size_t j = 0; j < d; ++j) gg[j] += grow[j] * (row[j] - u) * is;
                }
                if (bias.requires_grad()) {
                    double* bg = bias.grad().data();
                    for (std::size_t j = 0; j < d; ++j) bg[j] += grow[j];
                }
            }
        });
    }
    return out;
}

inline Tensor gelu(Tape& tape, const Tensor& x) {
    static constexpr double kInvSqrt2 = 0.70710678118654752440;
    static constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        double v = x.data()[i];
        out.data()[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    }
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record([x, out]() mutable {
            const double* g = out.grad().data();
            double* xg = x.grad().data();
            for (std::size_t i = 0; i < x.size(); ++i) {
                double v = x.data()[i];
                double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                xg[i] += g[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

// Inverted dropout: zero with probability rho and scale survivors by
// 1/(1-rho) at training time; identity in evaluation. The (scaled) mask is
// recorded for backward.
inline Tensor dropout(Tape& tape, const Tensor& x, double rho, bool training, Rng& rng) {
    if (rho < 0.0 || rho >= 1.0) {
        throw ConfigError("dropout: probability must be in [0, 1), got " + std::to_string(rho));
    }
    if (!training || rho == 0.0) return x;
    Tensor out = Tensor::zeros(x.shape());
    auto mask = std::make_shared<std::vector<double>>(x.size());
    double keep_scale = 1.0 / (1.0 - rho);
    for (std::size_t i = 0; i < x.size(); ++i) {
        double m = rng.uniform() < rho ? 0.0 : keep_scale;
        (*mask)[i] = m;
        out.data()[i] = x.data()[i] * m;
    }
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record([x, out, mask]() mutable {
            const double* g = out.grad().data();
            double* xg = x.grad().data();
            for (std::size_t i = 0; i < x.size(); ++i) xg[i] += g[i] * (*mask)[i];
        });
    }
    return out;
}

// Row gather: out[r] = table[ids[r]]. Backward scatter-adds, so repeated ids
// accumulate.
inline Tensor embedding_lookup(Tape& tape, const Tensor& table,
                               std::span<const std::int32_t> ids) {
    detail::require_rank2(table, "embedding_lookup");
    std::size_t m = table.dim(0), d = table.dim(1);
    Tensor out = Tensor::zeros({ids.size(), d});
    for (std::size_t r = 0; r < ids.size(); ++r) {
        std::int32_t id = ids[r];
        if (id < 0 || static_cast<std::size_t>(id) >= m) {
            throw IndexError("embedding_lookup: id " + std::to_string(id) + " out of range [0, " +
                             std::to_string(m) + ")");
        }
        std::copy(table.data() + static_cast<std::size_t>(id) * d,
                  table.data() + (static_cast<std::size_t>(id) + 1) * d, out.data() + r * d);
    }
    if (detail::want_grad(tape, {&table})) {
        out.set_requires_grad(true);
        std::vector<std::int32_t> ids_copy(ids.begin(), ids.end());
        tape.record([table, out, ids_copy]() mutable {
            std::size_t d = table.dim(1);
            const double* g = out.grad().data();
            double* tg = table.grad().data();
            for (std::size_t r = 0; r < ids_copy.size(); ++r) {
                double* row = tg + static_cast<std::size_t>(ids_copy[r]) * d;
                const double* grow = g + r * d;
                for (std::size_t j = 0; j < d; ++j) row[j] += grow[j];
            }
        });
    }
    return out;
}

// Pairwise cosine similarity between the rows of a (p x d) and b (q x d).
// Denominator norms are clamped at eps_norm so zero rows stay finite.
inline Tensor cosine_rows(Tape& tape, const Tensor& a, const Tensor& b, double eps_norm = 1e-12) {
    detail::require_rank2(a, "cosine_rows");
    detail::require_rank2(b, "cosine_rows");
    if (a.dim(1) != b.dim(1)) {
        throw ShapeError("cosine_rows: feature dimensions disagree: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
    std::size_t p = a.dim(0), q = b.dim(0), d = a.dim(1);
    auto na = std::make_shared<std::vector<double>>(p);
    auto nb = std::make_shared<std::vector<double>>(q);
    for (std::size_t i = 0; i < p; ++i) {
        double s = 0.0;
        const double* row = a.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) s += row[j] * row[j];
        (*na)[i] = std::max(std::sqrt(s), eps_norm);
    }
    for (std::size_t i = 0; i < q; ++i) {
        double s = 0.0;
        const double* row = b.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) s += row[j] * row[j];
        (*nb)[i] = std::max(std::sqrt(s), eps_norm);
    }
    Tensor out = Tensor::zeros({p, q});
    for (std::size_t i = 0; i < p; ++i) {
        const double* arow = a.data() + i * d;
        double* crow = out.data() + i * q;
        double inva = 1.0 / (*na)[i];
        for (std::size_t j = 0; j < q; ++j) {
            const double* brow = b.data() + j * d;
            double dot = 0.0;
            for (std::size_t l = 0; l < d; ++l) dot += arow[l] * brow[l];
            crow[j] = dot * inva / (*nb)[j];
        }
    }
    if (detail::want_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape.record([a, b, out, na, nb, eps_norm]() mutable {
            std::size_t p = a.dim(0), q = b.dim(0), d = a.dim(1);
            const double* g = out.grad().data();
            const double* c = out.data();
            if (a.requires_grad()) {
                double* ag = a.grad().data();
                for (std::size_t i = 0; i < p; ++i) {
                    double inva = 1.0 / (*na)[i];
                    // clamped norms are constants, no gradient through them
                    bool active = (*na)[i] > eps_norm;
                    double gc = 0.0;
                    double* agrow = ag + i * d;
                    const double* arow = a.data() + i * d;
                    for (std::size_t j = 0; j < q; ++j) {
                        double w = g[i * q + j] * inva / (*nb)[j];
                        const double* brow = b.data() + j * d;
                        for (std::size_t l = 0; l < d; ++l) agrow[l] += w * brow[l];
                        gc += g[i * q + j] * c[i * q + j];
                    }
                    if (active) {
                        double coef = gc * inva * inva;
                        for (std::size_t l = 0; l < d; ++l) agrow[l] -= coef * arow[l];
                    }
                }
            }
            if (b.requires_grad()) {
                double* bg = b.grad().data();
                for (std::size_t j = 0; j < q; ++j) {
                    double invb = 1.0 / (*nb)[j];
                    bool active = (*nb)[j] > eps_norm;
                    double gc = 0.0;
                    double* bgrow = bg + j * d;
                    const double* brow = b.data() + j * d;
                    for (std::size_t i = 0; i < p; ++i) {
                        double w = g[i * q + j] * invb / (*na)[i];
                        const double* arow = a.data() + i * d;
                        for (std::size_t l = 0; l < d; ++l) bgrow[l] += w * arow[l];
                        gc += g[i * q + j] * c[i * q + j];
                    }
                    if (active) {
                        double coef = gc * invb * invb;
                        for (std::size_t l = 0; l < d; ++l) bgrow[l] -= coef * brow[l];
                    }
                }
            }
        });
    }
    return out;
}

// Mean negative log softmax probability of the target class, computed via
// log-sum-exp. Backward is (softmax - onehot) / batch.
inline Tensor cross_entropy_from_logits(Tape& tape, const Tensor& logits,
                                        std::span<const std::int32_t> targets) {
    detail::require_rank2(logits, "cross_entropy_from_logits");
    std::size_t batch = logits.dim(0), m = logits.dim(1);
    if (targets.size() != batch) {
        throw ShapeError("cross_entropy_from_logits: " + std::to_string(targets.size()) +
                         " targets for batch " + shape_str(logits.shape()));
    }
    for (std::int32_t t : targets) {
        if (t < 0 || static_cast<std::size_t>(t) >= m) {
            throw IndexError("cross_entropy_from_logits: target " + std::to_string(t) +
                             " out of range [0, " + std::to_string(m) + ")");
        }
    }
    auto probs = std::make_shared<std::vector<double>>(batch * m);
    double total = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
        const double* row = logits.data() + i * m;
        double mx = row[0];
        for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            double e = std::exp(row[j] - mx);
            (*probs)[i * m + j] = e;
            z += e;
        }
        double invz = 1.0 / z;
        for (std::size_t j = 0; j < m; ++j) (*probs)[i * m + j] *= invz;
        double lse = mx + std::log(z);
        total += lse - row[static_cast<std::size_t>(targets[i])];
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(batch));
    if (detail::want_grad(tape, {&logits})) {
        out.set_requires_grad(true);
        std::vector<std::int32_t> tcopy(targets.begin(), targets.end());
        tape.record([logits, out, probs, tcopy]() mutable {
            std::size_t batch = logits.dim(0), m = logits.dim(1);
            double g = out.grad()[0] / static_cast<double>(batch);
            double* lg = logits.grad().data();
            for (std::size_t i = 0; i < batch; ++i) {
                for (std::size_t j = 0; j < m; ++j) lg[i * m + j] += g * (*probs)[i * m + j];
                lg[i * m + static_cast<std::size_t>(tcopy[i])] -= g;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t step = 0;
    std::vector<std::vector<double>> m;  // first moments, one buffer per parameter
    std::vector<std::vector<double>> v;  // second moments
};

// Standard bias-corrected Adam over a fixed parameter list. Moment buffers
// are allocated on first use and must keep matching shapes afterwards.
// Gradients are consumed: cleared back to zero after the update.
inline void adam_step(std::vector<Tensor>& params, AdamState& state) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].size(), 0.0);
            state.v[i].assign(params[i].size(), 0.0);
        }
    }
    if (state.m.size() != params.size()) {
        throw ShapeError("adam_step: state tracks " + std::to_string(state.m.size()) +
                         " parameters, got " + std::to_string(params.size()));
    }
    state.step += 1;
    double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        if (state.m[i].size() != p.size()) {
            throw ShapeError("adam_step: moment buffer size " + std::to_string(state.m[i].size()) +
                             " does not match parameter " + shape_str(p.shape()));
        }
        if (!p.has_grad()) continue;
        double* w = p.data();
        double* g = p.grad().data();
        double* mi = state.m[i].data();
        double* vi = state.v[i].data();
        for (std::size_t j = 0; j < p.size(); ++j) {
            mi[j] = state.beta1 * mi[j] + (1.0 - state.beta1) * g[j];
            vi[j] = state.beta2 * vi[j] + (1.0 - state.beta2) * g[j] * g[j];
            double mhat = mi[j] / bc1;
            double vhat = vi[j] / bc2;
            w[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
            g[j] = 0.0;
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

// Central-difference check of d f / d x against the tape gradient. `forward`
// must rebuild the whole graph on the given tape and return a scalar; it has
// to be deterministic across calls (fix any dropout seed inside). Returns the
// max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|).
inline double grad_check(const std::function<Tensor(Tape&)>& forward, Tensor x, double h = 1e-5) {
    if (h <= 0.0) throw ConfigError("grad_check: step must be positive");
    x.zero_grad();
    Tape tape;
    Tensor loss = forward(tape);
    tape.backward(loss);
    std::vector<double> analytic = x.grad();
    x.zero_grad();

    double max_rel = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double orig = x.values()[i];
        x.values()[i] = orig + h;
        Tape tp(false);
        double fp = forward(tp).value();
        x.values()[i] = orig - h;
        Tape tm(false);
        double fm = forward(tm).value();
        x.values()[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("grad_check: non-finite loss while probing coordinate " +
                               std::to_string(i));
        }
        double numeric = (fp - fm) / (2.0 * h);
        double rel = std::abs(analytic[i] - numeric) /
                     std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace sessrec
