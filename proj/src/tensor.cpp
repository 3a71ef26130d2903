#include "hybridlm/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

namespace hybridlm {

namespace {

std::atomic<DType> g_default_dtype{DType::f64};
thread_local Tape* g_current_tape = nullptr;

std::string shape_str(const std::vector<size_t>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

size_t shape_numel(const std::vector<size_t>& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    if (a.dtype() != b.dtype())
        throw DimensionError(std::string(op) + ": dtype mismatch");
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.ndim() != 2)
        throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " +
                             shape_str(t.shape()));
}

template <class F>
decltype(auto) dispatch(DType dt, F&& f) {
    if (dt == DType::f32) return f(float{});
    return f(double{});
}

// --- raw kernels ------------------------------------------------------------

template <class T>
void gemm_nn_acc(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        T* ci = c + i * n;
        const T* ai = a + i * k;
        for (size_t p = 0; p < k; ++p) {
            const T av = ai[p];
            const T* bp = b + p * n;
            for (size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c[m,n] += a[m,k] . b[n,k]^T
template <class T>
void gemm_nt_acc(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        T* ci = c + i * n;
        for (size_t j = 0; j < n; ++j) {
            const T* bj = b + j * k;
            T acc = 0;
            for (size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

// c[k,n] += a[m,k]^T . b[m,n]
template <class T>
void gemm_tn_acc(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        const T* bi = b + i * n;
        for (size_t p = 0; p < k; ++p) {
            const T av = ai[p];
            T* cp = c + p * n;
            for (size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (TapeScope::current() == nullptr) return false;
    for (const Tensor* t : inputs)
        if (t->impl()->requires_grad) return true;
    return false;
}

void mark_output(Tensor& out) {
    out.impl()->requires_grad = true;
    out.impl()->tape = TapeScope::current();
}

} // namespace

// --- dtype ------------------------------------------------------------------

DType default_dtype() { return g_default_dtype.load(); }
void set_default_dtype(DType dt) { g_default_dtype.store(dt); }
size_t dtype_size(DType dt) { return dt == DType::f32 ? 4 : 8; }
const char* dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }

// --- Buffer -----------------------------------------------------------------

Buffer Buffer::zeros(DType dt, size_t n) {
    Buffer b;
    b.dtype = dt;
    if (dt == DType::f32) b.f32.assign(n, 0.0f);
    else b.f64.assign(n, 0.0);
    return b;
}

void Buffer::fill(double v) {
    if (dtype == DType::f32) std::fill(f32.begin(), f32.end(), static_cast<float>(v));
    else std::fill(f64.begin(), f64.end(), v);
}

// --- Tape -------------------------------------------------------------------

TapeScope::TapeScope(Tape& tape) : previous_(g_current_tape) { g_current_tape = &tape; }
TapeScope::~TapeScope() { g_current_tape = previous_; }
Tape* TapeScope::current() { return g_current_tape; }

void record_node(std::function<void()> fn) {
    g_current_tape->nodes_.push_back(std::move(fn));
}

Buffer& ensure_grad(TensorImpl& impl) {
    if (!impl.grad)
        impl.grad = std::make_unique<Buffer>(Buffer::zeros(impl.data.dtype, impl.data.size()));
    return *impl.grad;
}

bool grad_enabled() { return g_current_tape != nullptr; }

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw DimensionError("backward: loss must be a defined scalar tensor");
    Tape* tape = loss.impl()->tape;
    if (tape == nullptr)
        throw StateError("backward: loss is not attached to a live graph");
    if (tape->consumed_)
        throw StateError("backward: graph already consumed by a previous backward pass");
    ensure_grad(*loss.impl()).fill(1.0);
    for (auto it = tape->nodes_.rbegin(); it != tape->nodes_.rend(); ++it) (*it)();
    tape->consumed_ = true;
}

// --- Tensor -----------------------------------------------------------------

Tensor Tensor::make(std::vector<size_t> shape, DType dt) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data = Buffer::zeros(dt, shape_numel(shape));
    impl->shape = std::move(shape);
    return Tensor(std::move(impl));
}

Tensor make_tensor(std::vector<size_t> shape, DType dt) {
    return Tensor::make(std::move(shape), dt);
}

Tensor Tensor::zeros(std::vector<size_t> shape, std::optional<DType> dt) {
    return make(std::move(shape), dt.value_or(default_dtype()));
}

Tensor Tensor::full(std::vector<size_t> shape, double value, std::optional<DType> dt) {
    Tensor t = make(std::move(shape), dt.value_or(default_dtype()));
    t.impl_->data.fill(value);
    return t;
}

Tensor Tensor::scalar(double value, std::optional<DType> dt) {
    return full({1}, value, dt);
}

Tensor Tensor::from(std::vector<size_t> shape, std::span<const double> values,
                    std::optional<DType> dt) {
    Tensor t = make(std::move(shape), dt.value_or(default_dtype()));
    if (t.numel() != values.size())
        throw DimensionError("Tensor::from: " + std::to_string(values.size()) +
                             " values for shape " + shape_str(t.shape()));
    for (size_t i = 0; i < values.size(); ++i) t.impl_->data.set(i, values[i]);
    return t;
}

Tensor Tensor::randn(std::vector<size_t> shape, Rng& rng, double stddev, std::optional<DType> dt) {
    Tensor t = make(std::move(shape), dt.value_or(default_dtype()));
    const size_t n = t.numel();
    for (size_t i = 0; i < n; ++i) t.impl_->data.set(i, stddev * rng.normal());
    return t;
}

size_t Tensor::rows() const {
    require_rank2(*this, "rows");
    return impl_->shape[0];
}

size_t Tensor::cols() const {
    require_rank2(*this, "cols");
    return impl_->shape[1];
}

double Tensor::item() const {
    if (numel() != 1) throw DimensionError("item: tensor is not scalar");
    return impl_->data.get(0);
}

double Tensor::at2(size_t i, size_t j) const {
    require_rank2(*this, "at2");
    return impl_->data.get(i * impl_->shape[1] + j);
}

Tensor& Tensor::set_requires_grad(bool flag) {
    impl_->requires_grad = flag;
    return *this;
}

Tensor Tensor::grad() const {
    if (!impl_->grad) throw StateError("grad: no gradient accumulated");
    Tensor g = make(impl_->shape, impl_->grad->dtype);
    g.impl_->data = *impl_->grad;
    return g;
}

double Tensor::grad_get(size_t flat_index) const {
    if (!impl_->grad) throw StateError("grad_get: no gradient accumulated");
    return impl_->grad->get(flat_index);
}

void Tensor::zero_grad() {
    if (impl_->grad) impl_->grad->fill(0.0);
}

Tensor Tensor::clone() const {
    Tensor t = make(impl_->shape, impl_->data.dtype);
    t.impl_->data = impl_->data;
    return t;
}

Tensor Tensor::to(DType dt) const {
    Tensor t = make(impl_->shape, dt);
    const size_t n = numel();
    for (size_t i = 0; i < n; ++i) t.impl_->data.set(i, impl_->data.get(i));
    return t;
}

std::vector<double> Tensor::to_vector() const {
    std::vector<double> v(numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = impl_->data.get(i);
    return v;
}

bool all_finite(const Tensor& x) {
    const size_t n = x.numel();
    for (size_t i = 0; i < n; ++i)
        if (!std::isfinite(x.get(i))) return false;
    return true;
}

// --- RowMask ----------------------------------------------------------------

RowMask RowMask::causal(size_t n) {
    RowMask m;
    m.rows = m.cols = n;
    m.keep.assign(n * n, 0);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j <= i; ++j) m.keep[i * n + j] = 1;
    return m;
}

RowMask RowMask::band(size_t n, size_t window) {
    if (window < 1) throw ConfigError("RowMask::band: window must be >= 1");
    RowMask m;
    m.rows = m.cols = n;
    m.keep.assign(n * n, 0);
    for (size_t i = 0; i < n; ++i) {
        size_t lo = i + 1 >= window ? i + 1 - window : 0;
        for (size_t j = lo; j <= i; ++j) m.keep[i * n + j] = 1;
    }
    return m;
}

RowMask RowMask::all(size_t rows, size_t cols) {
    RowMask m;
    m.rows = rows;
    m.cols = cols;
    m.keep.assign(rows * cols, 1);
    return m;
}

// --- elementwise ops ----------------------------------------------------------

namespace {

template <class T>
void ew_add(const T* a, const T* b, T* c, size_t n) { for (size_t i = 0; i < n; ++i) c[i] = a[i] + b[i]; }
template <class T>
void ew_sub(const T* a, const T* b, T* c, size_t n) { for (size_t i = 0; i < n; ++i) c[i] = a[i] - b[i]; }
template <class T>
void ew_mul(const T* a, const T* b, T* c, size_t n) { for (size_t i = 0; i < n; ++i) c[i] = a[i] * b[i]; }
template <class T>
void axpy(T alpha, const T* x, T* y, size_t n) { for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i]; }
template <class T>
void acc_mul(const T* a, const T* b, T* c, size_t n) { for (size_t i = 0; i < n; ++i) c[i] += a[i] * b[i]; }

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = make_tensor(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        ew_add(a.data<T>().data(), b.data<T>().data(), out.data<T>().data(), a.numel());
    });
    if (should_record({&a, &b})) {
        mark_output(out);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        record_node([ai, bi, oi] {
            if (!oi->grad) return;
            dispatch(oi->data.dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = oi->grad->as<T>();
                if (ai->requires_grad) axpy(T(1), og.data(), ensure_grad(*ai).as<T>().data(), og.size());
                if (bi->requires_grad) axpy(T(1), og.data(), ensure_grad(*bi).as<T>().data(), og.size());
            });
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = make_tensor(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        ew_sub(a.data<T>().data(), b.data<T>().data(), out.data<T>().data(), a.numel());
    });
    if (should_record({&a, &b})) {
        mark_output(out);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        record_node([ai, bi, oi] {
            if (!oi->grad) return;
            dispatch(oi->data.dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = oi->grad->as<T>();
                if (ai->requires_grad) axpy(T(1), og.data(), ensure_grad(*ai).as<T>().data(), og.size());
                if (bi->requires_grad) axpy(T(-1), og.data(), ensure_grad(*bi).as<T>().data(), og.size());
            });
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = make_tensor(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        ew_mul(a.data<T>().data(), b.data<T>().data(), out.data<T>().data(), a.numel());
    });
    if (should_record({&a, &b})) {
        mark_output(out);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        record_node([ai, bi, oi] {
            if (!oi->grad) return;
            dispatch(oi->data.dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = oi->grad->as<T>();
                if (ai->requires_grad)
                    acc_mul(og.data(), bi->data.as<T>().data(), ensure_grad(*ai).as<T>().data(), og.size());
                if (bi->requires_grad)
                    acc_mul(og.data(), ai->data.as<T>().data(), ensure_grad(*bi).as<T>().data(), og.size());
            });
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out = make_tensor(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T sv = static_cast<T>(s);
        auto av = a.data<T>();
        auto ov = out.data<T>();
        for (size_t i = 0; i < av.size(); ++i) ov[i] = sv * av[i];
    });
    if (should_record({&a})) {
        mark_output(out);
        auto ai = a.impl(), oi = out.impl();
        record_node([ai, oi, s] {
            if (!oi->grad || !ai->requires_grad) return;
            dispatch(oi->data.dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = oi->grad->as<T>();
                axpy(static_cast<T>(s), og.data(), ensure_grad(*ai).as<T>().data(), og.size());
            });
        });
    }
    return out;
}

// --- matmul -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    if (a.cols() != b.rows() || a.dtype() != b.dtype())
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
    const size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = make_tensor({m, n}, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        gemm_nn_acc(a.data<T>().data(), b.data<T>().data(), out.data<T>().data(), m, k, n);
    });
    if (should_record({&a, &b})) {
        mark_output(out);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        record_node([ai, bi, oi, m, k, n] {
            if (!oi->grad) return;
            dispatch(oi->data.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* og = oi->grad->as<T>().data();
                // dA += dC . B^T, dB += A^T . dC
                if (ai->requires_grad)
                    gemm_nt_acc(og, bi->data.as<T>().data(), ensure_grad(*ai).as<T>().data(), m, n, k);
                if (bi->requires_grad)
                    gemm_tn_acc(ai->data.as<T>().data(), og, ensure_grad(*bi).as<T>().data(), m, k, n);
            });
        });
    }
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul_nt");
    require_rank2(b, "matmul_nt");
    if (a.cols() != b.cols() || a.dtype() != b.dtype())
        throw DimensionError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()) + "^T");
    const size_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor out = make_tensor({m, n}, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        gemm_nt_acc(a.data<T>().data(), b.data<T>().data(), out.data<T>().data(), m, k, n);
    });
    if (should_record({&a, &b})) {
        mark_output(out);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        record_node([ai, bi, oi, m, k, n] {
            if (!oi->grad) return;
            dispatch(oi->data.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* og = oi->grad->as<T>().data();
                // C = A . B^T: dA += dC . B, dB += dC^T . A
                if (ai->requires_grad)
                    gemm_nn_acc(og, bi->data.as<T>().data(), ensure_grad(*ai).as<T>().data(), m, n, k);
                if (bi->requires_grad)
                    gemm_tn_acc(og, ai->data.as<T>().data(), ensure_grad(*bi).as<T>().data(), m, n, k);
            });
        });
    }
    return out;
}

// --- softmax ------------------------------------------------------------------

Tensor softmax_rows(const Tensor& x, const RowMask* mask) {
    require_rank2(x, "softmax_rows");
    const size_t m = x.rows(), n = x.cols();
    if (mask && (mask->rows != m || mask->cols != n))
        throw DimensionError("softmax_rows: mask shape mismatch");
    Tensor out = make_tensor({m, n}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* xv = x.data<T>().data();
        T* ov = out.data<T>().data();
        for (size_t i = 0; i < m; ++i) {
            const T* row = xv + i * n;
            T* orow = ov + i * n;
            T mx = -std::numeric_limits<T>::infinity();
            bool any = false;
            for (size_t j = 0; j < n; ++j) {
                if (mask && !mask->at(i, j)) continue;
                any = true;
                mx = std::max(mx, row[j]);
            }
            if (!any)
                throw DegenerateRowError("softmax_rows: fully masked row " + std::to_string(i));
            T z = 0;
            for (size_t j = 0; j < n; ++j) {
                if (mask && !mask->at(i, j)) { orow[j] = 0; continue; }
                orow[j] = std::exp(row[j] - mx);
                z += orow[j];
            }
            const T inv = T(1) / z;
            for (size_t j = 0; j < n; ++j) orow[j] *= inv;
        }
    });
    if (should_record({&x})) {
        mark_output(out);
        auto xi = x.impl(), oi = out.impl();
        record_node([xi, oi, m, n] {
            if (!oi->grad || !xi->requires_grad) return;
            dispatch(oi->data.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* y = oi->data.as<T>().data();
                const T* dy = oi->grad->as<T>().data();
                T* dx = ensure_grad(*xi).as<T>().data();
                // dx = y * (dy - sum(dy * y)) per row; masked entries have y == 0.
                for (size_t i = 0; i < m; ++i) {
                    const T* yi = y + i * n;
                    const T* di = dy + i * n;
                    T dot = 0;
                    for (size_t j = 0; j < n; ++j) dot += di[j] * yi[j];
                    T* gx = dx + i * n;
                    for (size_t j = 0; j < n; ++j) gx[j] += yi[j] * (di[j] - dot);
                }
            });
        });
    }
    return out;
}

// --- losses -------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::span<const int32_t> targets) {
    require_rank2(logits, "cross_entropy");
    const size_t n = logits.rows(), v = logits.cols();
    if (targets.size() != n)
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                             " targets for " + std::to_string(n) + " rows");
    for (size_t i = 0; i < n; ++i)
        if (targets[i] < 0 || static_cast<size_t>(targets[i]) >= v)
            throw IndexError("cross_entropy: target " + std::to_string(targets[i]) +
                             " out of range at position " + std::to_string(i));
    Tensor out = make_tensor({1}, logits.dtype());
    // Softmax probabilities are kept for the backward pass.
    auto probs = std::make_shared<std::vector<double>>(n * v);
    double loss = 0.0;
    dispatch(logits.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* lv = logits.data<T>().data();
        for (size_t i = 0; i < n; ++i) {
            const T* row = lv + i * v;
            double mx = -std::numeric_limits<double>::infinity();
            for (size_t j = 0; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
            double z = 0;
            for (size_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
            const double logz = std::log(z) + mx;
            loss += logz - static_cast<double>(row[targets[i]]);
            for (size_t j = 0; j < v; ++j)
                (*probs)[i * v + j] = std::exp(static_cast<double>(row[j]) - logz);
        }
    });
    out.set(0, loss / static_cast<double>(n));
    if (should_record({&logits})) {
        mark_output(out);
        auto li = logits.impl(), oi = out.impl();
        std::vector<int32_t> tgt(targets.begin(), targets.end());
        record_node([li, oi, probs, tgt = std::move(tgt), n, v] {
            if (!oi->grad || !li->requires_grad) return;
            const double g = oi->grad->get(0) / static_cast<double>(n);
            Buffer& dl = ensure_grad(*li);
            for (size_t i = 0; i < n; ++i)
                for (size_t j = 0; j < v; ++j) {
                    double p = (*probs)[i * v + j];
                    if (j == static_cast<size_t>(tgt[i])) p -= 1.0;
                    dl.add(i * v + j, g * p);
                }
        });
    }
    return out;
}

Tensor kl_rows(const Tensor& p, const Tensor& q) {
    require_same_shape(p, q, "kl_rows");
    require_rank2(p, "kl_rows");
    const size_t m = p.rows(), n = p.cols();
    // Row-sum tolerance gets a whisker of headroom so probes sitting exactly
    // on the boundary are not rejected by rounding.
    constexpr double kSumTol = 1e-5 * (1.0 + 1e-9);
    for (size_t i = 0; i < m; ++i) {
        double sp = 0, sq = 0;
        for (size_t j = 0; j < n; ++j) {
            const double pv = p.at2(i, j), qv = q.at2(i, j);
            if (pv < 0.0 || qv < 0.0)
                throw DistributionError("kl_rows: negative entry in row " + std::to_string(i));
            sp += pv;
            sq += qv;
        }
        if (std::abs(sp - 1.0) > kSumTol || std::abs(sq - 1.0) > kSumTol)
            throw DistributionError("kl_rows: row " + std::to_string(i) +
                                    " does not sum to 1 within 1e-5");
    }
    Tensor out = make_tensor({1}, p.dtype());
    double total = 0.0;
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) {
            const double pv = p.at2(i, j);
            if (pv == 0.0) continue;
            const double qv = std::max(q.at2(i, j), kKlClampEpsilon);
            total += pv * (std::log(pv) - std::log(qv));
        }
    out.set(0, total / static_cast<double>(m));
    if (should_record({&q})) {
        mark_output(out);
        auto pi = p.impl(), qi = q.impl(), oi = out.impl();
        record_node([pi, qi, oi, m, n] {
            if (!oi->grad || !qi->requires_grad) return;
            const double g = oi->grad->get(0) / static_cast<double>(m);
            Buffer& dq = ensure_grad(*qi);
            for (size_t i = 0; i < m * n; ++i) {
                const double pv = pi->data.get(i);
                if (pv == 0.0) continue;
                const double qv = qi->data.get(i);
                if (qv <= kKlClampEpsilon) continue; // clamp active, flat
                dq.add(i, -g * pv / qv);
            }
        });
    }
    return out;
}

// --- normalization / activation -------------------------------------------------

Tensor rmsnorm_rows(const Tensor& x, const Tensor& gain) {
    require_rank2(x, "rmsnorm_rows");
    const size_t m = x.rows(), n = x.cols();
    if (gain.ndim() != 1 || gain.shape()[0] != n || gain.dtype() != x.dtype())
        throw DimensionError("rmsnorm_rows: gain must be a vector of length " + std::to_string(n));
    Tensor out = make_tensor({m, n}, x.dtype());
    auto inv_rms = std::make_shared<std::vector<double>>(m);
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* xv = x.data<T>().data();
        const T* gv = gain.data<T>().data();
        T* ov = out.data<T>().data();
        for (size_t i = 0; i < m; ++i) {
            const T* row = xv + i * n;
            T ss = 0;
            for (size_t j = 0; j < n; ++j) ss += row[j] * row[j];
            const T r = T(1) / std::sqrt(ss / static_cast<T>(n) + static_cast<T>(kRmsNormEpsilon));
            (*inv_rms)[i] = static_cast<double>(r);
            T* orow = ov + i * n;
            for (size_t j = 0; j < n; ++j) orow[j] = gv[j] * row[j] * r;
        }
    });
    if (should_record({&x, &gain})) {
        mark_output(out);
        auto xi = x.impl(), gi = gain.impl(), oi = out.impl();
        record_node([xi, gi, oi, inv_rms, m, n] {
            if (!oi->grad) return;
            dispatch(oi->data.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* xv = xi->data.as<T>().data();
                const T* gv = gi->data.as<T>().data();
                const T* dy = oi->grad->as<T>().data();
                T* dx = xi->requires_grad ? ensure_grad(*xi).as<T>().data() : nullptr;
                T* dg = gi->requires_grad ? ensure_grad(*gi).as<T>().data() : nullptr;
                for (size_t i = 0; i < m; ++i) {
                    const T r = static_cast<T>((*inv_rms)[i]);
                    const T* row = xv + i * n;
                    const T* di = dy + i * n;
                    if (dg)
                        for (size_t j = 0; j < n; ++j) dg[j] += di[j] * row[j] * r;
                    if (dx) {
                        // dx = r*(g.dy) - x * r^3/n * sum(g.dy.x)
                        T dot = 0;
                        for (size_t j = 0; j < n; ++j) dot += di[j] * gv[j] * row[j];
                        const T coef = r * r * r * dot / static_cast<T>(n);
                        T* gx = dx + i * n;
                        for (size_t j = 0; j < n; ++j) gx[j] += r * gv[j] * di[j] - coef * row[j];
                    }
                }
            });
        });
    }
    return out;
}

Tensor silu(const Tensor& x) {
    Tensor out = make_tensor(x.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xv = x.data<T>();
        auto ov = out.data<T>();
        for (size_t i = 0; i < xv.size(); ++i) {
            const T s = T(1) / (T(1) + std::exp(-xv[i]));
            ov[i] = xv[i] * s;
        }
    });
    if (should_record({&x})) {
        mark_output(out);
        auto xi = x.impl(), oi = out.impl();
        record_node([xi, oi] {
            if (!oi->grad || !xi->requires_grad) return;
            dispatch(oi->data.dtype, [&](auto tag) {
                using T = decltype(tag);
                auto xv = xi->data.as<T>();
                auto og = oi->grad->as<T>();
                T* dx = ensure_grad(*xi).as<T>().data();
                for (size_t i = 0; i < xv.size(); ++i) {
                    const T s = T(1) / (T(1) + std::exp(-xv[i]));
                    dx[i] += og[i] * s * (T(1) + xv[i] * (T(1) - s));
                }
            });
        });
    }
    return out;
}

// --- reshuffling ----------------------------------------------------------------

Tensor embedding_lookup(const Tensor& table, std::span<const int32_t> ids) {
    require_rank2(table, "embedding_lookup");
    const size_t v = table.rows(), d = table.cols(), n = ids.size();
    for (size_t i = 0; i < n; ++i)
        if (ids[i] < 0 || static_cast<size_t>(ids[i]) >= v)
            throw IndexError("embedding_lookup: id " + std::to_string(ids[i]) +
                             " out of range at position " + std::to_string(i));
    Tensor out = make_tensor({n, d}, table.dtype());
    dispatch(table.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* tv = table.data<T>().data();
        T* ov = out.data<T>().data();
        for (size_t i = 0; i < n; ++i)
            std::memcpy(ov + i * d, tv + static_cast<size_t>(ids[i]) * d, d * sizeof(T));
    });
    if (should_record({&table})) {
        mark_output(out);
        auto ti = table.impl(), oi = out.impl();
        std::vector<int32_t> idv(ids.begin(), ids.end());
        record_node([ti, oi, idv = std::move(idv), d] {
            if (!oi->grad || !ti->requires_grad) return;
            dispatch(oi->data.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* og = oi->grad->as<T>().data();
                T* dt = ensure_grad(*ti).as<T>().data();
                for (size_t i = 0; i < idv.size(); ++i)
                    axpy(T(1), og + i * d, dt + static_cast<size_t>(idv[i]) * d, d);
            });
        });
    }
    return out;
}

Tensor slice_cols(const Tensor& x, size_t col_begin, size_t col_end) {
    require_rank2(x, "slice_cols");
    const size_t m = x.rows(), n = x.cols();
    if (col_begin >= col_end || col_end > n)
        throw DimensionError("slice_cols: invalid range [" + std::to_string(col_begin) + "," +
                             std::to_string(col_end) + ") for " + std::to_string(n) + " columns");
    const size_t w = col_end - col_begin;
    Tensor out = make_tensor({m, w}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* xv = x.data<T>().data();
        T* ov = out.data<T>().data();
        for (size_t i = 0; i < m; ++i)
            std::memcpy(ov + i * w, xv + i * n + col_begin, w * sizeof(T));
    });
    if (should_record({&x})) {
        mark_output(out);
        auto xi = x.impl(), oi = out.impl();
        record_node([xi, oi, col_begin, m, n, w] {
            if (!oi->grad || !xi->requires_grad) return;
            dispatch(oi->data.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* og = oi->grad->as<T>().data();
                T* dx = ensure_grad(*xi).as<T>().data();
                for (size_t i = 0; i < m; ++i)
                    axpy(T(1), og + i * w, dx + i * n + col_begin, w);
            });
        });
    }
    return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const size_t m = parts[0].rows();
    size_t total = 0;
    for (const Tensor& p : parts) {
        require_rank2(p, "concat_cols");
        if (p.rows() != m || p.dtype() != parts[0].dtype())
            throw DimensionError("concat_cols: incompatible parts");
        total += p.cols();
    }
    Tensor out = make_tensor({m, total}, parts[0].dtype());
    bool rec = false;
    for (const Tensor& p : parts) rec = rec || should_record({&p});
    dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        T* ov = out.data<T>().data();
        size_t off = 0;
        for (const Tensor& p : parts) {
            const size_t w = p.cols();
            const T* pv = p.data<T>().data();
            for (size_t i = 0; i < m; ++i)
                std::memcpy(ov + i * total + off, pv + i * w, w * sizeof(T));
            off += w;
        }
    });
    if (rec) {
        mark_output(out);
        std::vector<std::shared_ptr<TensorImpl>> impls;
        impls.reserve(parts.size());
        for (const Tensor& p : parts) impls.push_back(p.impl());
        auto oi = out.impl();
        record_node([impls = std::move(impls), oi, m, total] {
            if (!oi->grad) return;
            dispatch(oi->data.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* og = oi->grad->as<T>().data();
                size_t off = 0;
                for (auto& pi : impls) {
                    const size_t w = pi->shape[1];
                    if (pi->requires_grad) {
                        T* dp = ensure_grad(*pi).as<T>().data();
                        for (size_t i = 0; i < m; ++i)
                            axpy(T(1), og + i * total + off, dp + i * w, w);
                    }
                    off += w;
                }
            });
        });
    }
    return out;
}

Tensor stack_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw DimensionError("stack_rows: no inputs");
    const auto base = parts[0].shape();
    size_t chunk = parts[0].numel();
    for (const Tensor& p : parts)
        if (p.shape() != base || p.dtype() != parts[0].dtype())
            throw DimensionError("stack_rows: incompatible parts");
    std::vector<size_t> shape;
    shape.push_back(parts.size());
    shape.insert(shape.end(), base.begin(), base.end());
    Tensor out = make_tensor(shape, parts[0].dtype());
    bool rec = false;
    for (const Tensor& p : parts) rec = rec || should_record({&p});
    dispatch(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        T* ov = out.data<T>().data();
        for (size_t k = 0; k < parts.size(); ++k)
            std::memcpy(ov + k * chunk, parts[k].data<T>().data(), chunk * sizeof(T));
    });
    if (rec) {
        mark_output(out);
        std::vector<std::shared_ptr<TensorImpl>> impls;
        for (const Tensor& p : parts) impls.push_back(p.impl());
        auto oi = out.impl();
        record_node([impls = std::move(impls), oi, chunk] {
            if (!oi->grad) return;
            dispatch(oi->data.dtype, [&](auto tag) {
                using T = decltype(tag);
                const T* og = oi->grad->as<T>().data();
                for (size_t k = 0; k < impls.size(); ++k)
                    if (impls[k]->requires_grad)
                        axpy(T(1), og + k * chunk, ensure_grad(*impls[k]).as<T>().data(), chunk);
            });
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, std::vector<size_t> shape) {
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                             shape_str(shape));
    Tensor out = make_tensor(std::move(shape), x.dtype());
    out.impl()->data = x.impl()->data;
    if (should_record({&x})) {
        mark_output(out);
        auto xi = x.impl(), oi = out.impl();
        record_node([xi, oi] {
            if (!oi->grad || !xi->requires_grad) return;
            dispatch(oi->data.dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = oi->grad->as<T>();
                axpy(T(1), og.data(), ensure_grad(*xi).as<T>().data(), og.size());
            });
        });
    }
    return out;
}

Tensor sum_all(const Tensor& x) {
    Tensor out = make_tensor({1}, x.dtype());
    double acc = 0;
    for (size_t i = 0; i < x.numel(); ++i) acc += x.get(i);
    out.set(0, acc);
    if (should_record({&x})) {
        mark_output(out);
        auto xi = x.impl(), oi = out.impl();
        record_node([xi, oi] {
            if (!oi->grad || !xi->requires_grad) return;
            const double g = oi->grad->get(0);
            dispatch(xi->data.dtype, [&](auto tag) {
                using T = decltype(tag);
                auto dx = ensure_grad(*xi).as<T>();
                for (size_t i = 0; i < dx.size(); ++i) dx[i] += static_cast<T>(g);
            });
        });
    }
    return out;
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0)
        throw ConfigError("dropout: rate must be in [0, 1)");
    if (rate == 0.0) return x;
    const size_t n = x.numel();
    auto mask = std::make_shared<std::vector<uint8_t>>(n);
    for (size_t i = 0; i < n; ++i) (*mask)[i] = rng.uniform01() >= rate ? 1 : 0;
    const double keep_scale = 1.0 / (1.0 - rate);
    Tensor out = make_tensor(x.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xv = x.data<T>();
        auto ov = out.data<T>();
        const T ks = static_cast<T>(keep_scale);
        for (size_t i = 0; i < n; ++i) ov[i] = (*mask)[i] ? xv[i] * ks : T(0);
    });
    if (should_record({&x})) {
        mark_output(out);
        auto xi = x.impl(), oi = out.impl();
        record_node([xi, oi, mask, keep_scale] {
            if (!oi->grad || !xi->requires_grad) return;
            dispatch(oi->data.dtype, [&](auto tag) {
                using T = decltype(tag);
                auto og = oi->grad->as<T>();
                T* dx = ensure_grad(*xi).as<T>().data();
                const T ks = static_cast<T>(keep_scale);
                for (size_t i = 0; i < og.size(); ++i)
                    if ((*mask)[i]) dx[i] += og[i] * ks;
            });
        });
    }
    return out;
}

} // namespace hybridlm
