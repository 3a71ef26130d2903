#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hybridlm/errors.hpp"
#include "hybridlm/rng.hpp"

namespace hybridlm {

// ---------------------------------------------------------------------------
// Precision
// ---------------------------------------------------------------------------

enum class DType { f32, f64 };

// Process-wide default element type for newly created tensors. Training and
// gradient checks run at f64; the inference benchmarks run at f32.
DType default_dtype();
void set_default_dtype(DType dt);
size_t dtype_size(DType dt);
const char* dtype_name(DType dt);

// ---------------------------------------------------------------------------
// Storage
// ---------------------------------------------------------------------------

// Flat typed buffer. Exactly one of the two vectors is in use.
struct Buffer {
    DType dtype = DType::f64;
    std::vector<float> f32;
    std::vector<double> f64;

    static Buffer zeros(DType dt, size_t n);
    size_t size() const { return dtype == DType::f32 ? f32.size() : f64.size(); }

    template <class T> std::span<T> as();
    template <class T> std::span<const T> as() const;

    double get(size_t i) const { return dtype == DType::f32 ? static_cast<double>(f32[i]) : f64[i]; }
    void set(size_t i, double v) {
        if (dtype == DType::f32) f32[i] = static_cast<float>(v);
        else f64[i] = v;
    }
    void add(size_t i, double v) {
        if (dtype == DType::f32) f32[i] += static_cast<float>(v);
        else f64[i] += v;
    }
    void fill(double v);
};

template <> inline std::span<float> Buffer::as<float>() { return {f32.data(), f32.size()}; }
template <> inline std::span<double> Buffer::as<double>() { return {f64.data(), f64.size()}; }
template <> inline std::span<const float> Buffer::as<float>() const { return {f32.data(), f32.size()}; }
template <> inline std::span<const double> Buffer::as<double>() const { return {f64.data(), f64.size()}; }

class Tape;

struct TensorImpl {
    std::vector<size_t> shape;
    Buffer data;
    bool requires_grad = false;
    std::unique_ptr<Buffer> grad; // allocated lazily, zero-initialized
    Tape* tape = nullptr;         // tape that produced this tensor, if any
};

// ---------------------------------------------------------------------------
// Reverse-mode tape
// ---------------------------------------------------------------------------

// Records backward closures in forward execution order (a topological order
// by construction). backward() replays them once, in reverse, then marks the
// tape consumed; a second backward over the same tape is a StateError.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

private:
    friend class TapeScope;
    friend void backward(const class Tensor& loss);
    friend void record_node(std::function<void()> fn);

    std::vector<std::function<void()>> nodes_;
    bool consumed_ = false;
};

// RAII activation of a tape on the current thread. Operations executed while
// a tape is active record their backward closures on it; without an active
// tape the same operations run as plain value computations.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

    static Tape* current();

private:
    Tape* previous_;
};

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

// Dense row-major tensor value. Copies share the underlying storage; ops
// always allocate fresh outputs. A tensor is confined to one thread while it
// participates in an active graph; detached values are treated as immutable
// and are safe to share across threads.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<size_t> shape, std::optional<DType> dt = {});
    static Tensor full(std::vector<size_t> shape, double value, std::optional<DType> dt = {});
    static Tensor scalar(double value, std::optional<DType> dt = {});
    static Tensor from(std::vector<size_t> shape, std::span<const double> values,
                       std::optional<DType> dt = {});
    static Tensor randn(std::vector<size_t> shape, Rng& rng, double stddev = 1.0,
                        std::optional<DType> dt = {});

    bool defined() const { return impl_ != nullptr; }
    const std::vector<size_t>& shape() const { return impl_->shape; }
    size_t ndim() const { return impl_->shape.size(); }
    size_t numel() const { return impl_->data.size(); }
    size_t rows() const; // rank-2 only
    size_t cols() const; // rank-2 only
    DType dtype() const { return impl_->data.dtype; }

    double item() const; // scalar tensors only
    double get(size_t flat_index) const { return impl_->data.get(flat_index); }
    void set(size_t flat_index, double v) { impl_->data.set(flat_index, v); }
    double at2(size_t i, size_t j) const; // rank-2 convenience

    template <class T> std::span<T> data() { return impl_->data.as<T>(); }
    template <class T> std::span<const T> data() const
    { return static_cast<const Buffer&>(impl_->data).as<T>(); }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool flag);

    bool has_grad() const { return impl_->grad != nullptr; }
    Tensor grad() const; // copy of the accumulated gradient
    double grad_get(size_t flat_index) const;
    template <class T> std::span<T> grad_data() { return impl_->grad->as<T>(); }
    void zero_grad();

    Tensor clone() const;        // deep copy, detached leaf
    Tensor to(DType dt) const;   // casting copy, detached leaf

    std::vector<double> to_vector() const;

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    static Tensor make(std::vector<size_t> shape, DType dt);
    friend Tensor make_tensor(std::vector<size_t> shape, DType dt);

    std::shared_ptr<TensorImpl> impl_;
};

// Internal helpers shared with the fused attention kernels.
Tensor make_tensor(std::vector<size_t> shape, DType dt);
void record_node(std::function<void()> fn);
Buffer& ensure_grad(TensorImpl& impl);
bool grad_enabled();

// ---------------------------------------------------------------------------
// Masks
// ---------------------------------------------------------------------------

// Boolean keep-mask over a [rows, cols] grid; 1 marks an attended entry.
struct RowMask {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<uint8_t> keep;

    static RowMask causal(size_t n);
    // Causal window: row i keeps columns max(0, i-w+1) .. i.
    static RowMask band(size_t n, size_t window);
    static RowMask all(size_t rows, size_t cols);

    bool at(size_t i, size_t j) const { return keep[i * cols + j] != 0; }
    void set(size_t i, size_t j, bool v) { keep[i * cols + j] = v ? 1 : 0; }
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

// c[m,n] = a[m,k] . b[k,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// c[m,n] = a[m,k] . b[n,k]^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);

// Row-stabilized softmax. Masked-out entries are exactly zero in the output;
// a fully masked row raises DegenerateRowError.
Tensor softmax_rows(const Tensor& x, const RowMask* mask = nullptr);

// Mean negative log-likelihood of targets under row-wise softmax(logits).
Tensor cross_entropy(const Tensor& logits, std::span<const int32_t> targets);

// Mean over rows of KL(p_row || q_row), with 0 * log(0/q) = 0 and q clamped
// below by kKlClampEpsilon before the log. Gradients flow into q only; p is
// treated as a constant reference distribution.
Tensor kl_rows(const Tensor& p, const Tensor& q);
inline constexpr double kKlClampEpsilon = 1e-9;

// y_row = gain * x_row / sqrt(mean(x_row^2) + eps)
Tensor rmsnorm_rows(const Tensor& x, const Tensor& gain);
inline constexpr double kRmsNormEpsilon = 1e-6;

Tensor silu(const Tensor& x);

// out[t, :] = table[ids[t], :]
Tensor embedding_lookup(const Tensor& table, std::span<const int32_t> ids);

Tensor slice_cols(const Tensor& x, size_t col_begin, size_t col_end);
Tensor concat_cols(std::span<const Tensor> parts);
// k tensors of shape [m,n] -> [k,m,n]
Tensor stack_rows(std::span<const Tensor> parts);
Tensor reshape(const Tensor& x, std::vector<size_t> shape);

Tensor sum_all(const Tensor& x);

// Inverted-dropout on the forward path; the sampled mask is reused by the
// backward closure. rate must be in [0, 1).
Tensor dropout(const Tensor& x, double rate, Rng& rng);

// Propagates d(loss)/d(leaf) onto every requires_grad leaf of the tape that
// produced `loss`, then consumes the tape.
void backward(const Tensor& loss);

bool all_finite(const Tensor& x);

} // namespace hybridlm
