#include "hybridlm/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace hybridlm {

std::string LayerKind::token() const {
    switch (kind) {
    case Kind::Softmax: return "S";
    case Kind::SlidingWindow: return "W" + std::to_string(window);
    case Kind::Identity: return "I";
    }
    return "?";
}

LayerKind LayerKind::from_token(const std::string& token) {
    if (token == "S") return softmax();
    if (token == "I") return identity();
    if (!token.empty() && token[0] == 'W') {
        size_t w = 0;
        try {
            w = std::stoul(token.substr(1));
        } catch (const std::exception&) {
            throw ConfigError("LayerKind: bad window in token '" + token + "'");
        }
        return sliding_window(w);
    }
    throw ConfigError("LayerKind: unknown token '" + token + "'");
}

void AttentionInputs::validate() const {
    if (!q.defined() || !k.defined() || !v.defined())
        throw DimensionError("attention: undefined input tensor");
    if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2)
        throw DimensionError("attention: q, k, v must be rank-2");
    if (q.shape() != k.shape() || q.shape() != v.shape())
        throw DimensionError("attention: q, k, v must share shape [n, d]");
    if (q.rows() < 1) throw DimensionError("attention: empty sequence");
    if (head_count < 1 || q.cols() < head_count || q.cols() % head_count != 0)
        throw DimensionError("attention: dim " + std::to_string(q.cols()) +
                             " not divisible into " + std::to_string(head_count) + " heads");
}

AttentionResult softmax_attention(const AttentionInputs& in, bool capture_trace) {
    in.validate();
    const size_t n = in.seq_len(), d = in.dim(), h = in.head_count;
    const size_t dh = d / h;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const RowMask causal = RowMask::causal(n);

    std::vector<Tensor> head_outputs;
    std::vector<Tensor> head_weights;
    head_outputs.reserve(h);
    for (size_t head = 0; head < h; ++head) {
        Tensor qh = slice_cols(in.q, head * dh, (head + 1) * dh);
        Tensor kh = slice_cols(in.k, head * dh, (head + 1) * dh);
        Tensor vh = slice_cols(in.v, head * dh, (head + 1) * dh);
        Tensor scores = scale(matmul_nt(qh, kh), att_scale);
        Tensor weights = softmax_rows(scores, &causal);
        head_outputs.push_back(matmul(weights, vh));
        if (capture_trace) head_weights.push_back(weights);
    }
    AttentionResult result;
    result.output = concat_cols(head_outputs);
    if (capture_trace)
        result.trace = AttentionTrace{stack_rows(head_weights)};
    return result;
}

namespace {

template <class T>
struct BandedForward {
    std::vector<T> alpha; // [n, window] row-major, row i holds its support left-padded at offset 0
};

// Support of row i: columns lo(i) .. i with lo(i) = max(0, i - w + 1).
inline size_t band_lo(size_t i, size_t w) { return i + 1 >= w ? i + 1 - w : 0; }

template <class T>
void swa_forward(const T* q, const T* k, const T* v, T* out, std::vector<T>& alpha,
                 size_t n, size_t d, size_t h, size_t w) {
    const size_t dh = d / h;
    const T att_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    alpha.assign(h * n * w, T(0));
    std::vector<T> scores(w);
    for (size_t head = 0; head < h; ++head) {
        const size_t off = head * dh;
        for (size_t i = 0; i < n; ++i) {
            const size_t lo = band_lo(i, w);
            const size_t cnt = i - lo + 1;
            const T* qi = q + i * d + off;
            T mx = -std::numeric_limits<T>::infinity();
            for (size_t c = 0; c < cnt; ++c) {
                const T* kj = k + (lo + c) * d + off;
                T s = 0;
                for (size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
                scores[c] = s * att_scale;
                mx = std::max(mx, scores[c]);
            }
            T z = 0;
            for (size_t c = 0; c < cnt; ++c) {
                scores[c] = std::exp(scores[c] - mx);
                z += scores[c];
            }
            const T inv = T(1) / z;
            T* arow = alpha.data() + (head * n + i) * w;
            T* oi = out + i * d + off;
            for (size_t c = 0; c < cnt; ++c) {
                const T a = scores[c] * inv;
                arow[c] = a;
                const T* vj = v + (lo + c) * d + off;
                for (size_t t = 0; t < dh; ++t) oi[t] += a * vj[t];
            }
        }
    }
}

template <class T>
void swa_backward(const T* q, const T* k, const T* v, const std::vector<T>& alpha,
                  const T* dout, T* dq, T* dk, T* dv, size_t n, size_t d, size_t h, size_t w) {
    const size_t dh = d / h;
    const T att_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<T> dalpha(w);
    for (size_t head = 0; head < h; ++head) {
        const size_t off = head * dh;
        for (size_t i = 0; i < n; ++i) {
            const size_t lo = band_lo(i, w);
            const size_t cnt = i - lo + 1;
            const T* arow = alpha.data() + (head * n + i) * w;
            const T* gi = dout + i * d + off;
            // d(alpha_c) = g . v_c; dv_c += alpha_c * g
            for (size_t c = 0; c < cnt; ++c) {
                const T* vj = v + (lo + c) * d + off;
                T s = 0;
                for (size_t t = 0; t < dh; ++t) s += gi[t] * vj[t];
                dalpha[c] = s;
                if (dv) {
                    T* dvj = dv + (lo + c) * d + off;
                    for (size_t t = 0; t < dh; ++t) dvj[t] += arow[c] * gi[t];
                }
            }
            if (!dq && !dk) continue;
            // softmax jacobian: ds_c = alpha_c * (dalpha_c - sum_e alpha_e dalpha_e)
            T dot = 0;
            for (size_t c = 0; c < cnt; ++c) dot += arow[c] * dalpha[c];
            const T* qi = q + i * d + off;
            for (size_t c = 0; c < cnt; ++c) {
                const T ds = arow[c] * (dalpha[c] - dot) * att_scale;
                const T* kj = k + (lo + c) * d + off;
                if (dq) {
                    T* dqi = dq + i * d + off;
                    for (size_t t = 0; t < dh; ++t) dqi[t] += ds * kj[t];
                }
                if (dk) {
                    T* dkj = dk + (lo + c) * d + off;
                    for (size_t t = 0; t < dh; ++t) dkj[t] += ds * qi[t];
                }
            }
        }
    }
}

template <class T>
Tensor swa_trace_dense(const std::vector<T>& alpha, size_t n, size_t h, size_t w, DType dt) {
    Tensor trace = make_tensor({h, n, n}, dt);
    auto tv = trace.data<T>();
    for (size_t head = 0; head < h; ++head)
        for (size_t i = 0; i < n; ++i) {
            const size_t lo = band_lo(i, w);
            const size_t cnt = i - lo + 1;
            const T* arow = alpha.data() + (head * n + i) * w;
            T* trow = tv.data() + (head * n + i) * n;
            for (size_t c = 0; c < cnt; ++c) trow[lo + c] = arow[c];
        }
    return trace;
}

} // namespace

AttentionResult sliding_window_attention(const AttentionInputs& in, size_t window,
                                         bool capture_trace) {
    if (window < 1) throw ConfigError("sliding_window_attention: window must be >= 1");
    in.validate();
    const size_t n = in.seq_len(), d = in.dim(), h = in.head_count;
    const size_t w = std::min(window, n); // effective band width
    Tensor out = make_tensor({n, d}, in.q.dtype());

    AttentionResult result;
    const bool rec = TapeScope::current() != nullptr &&
                     (in.q.requires_grad() || in.k.requires_grad() || in.v.requires_grad());

    if (in.q.dtype() == DType::f32) {
        auto fwd = std::make_shared<BandedForward<float>>();
        swa_forward<float>(in.q.data<float>().data(), in.k.data<float>().data(),
                           in.v.data<float>().data(), out.data<float>().data(), fwd->alpha,
                           n, d, h, w);
        if (capture_trace)
            result.trace = AttentionTrace{swa_trace_dense<float>(fwd->alpha, n, h, w, DType::f32)};
        if (rec) {
            out.impl()->requires_grad = true;
            out.impl()->tape = TapeScope::current();
            auto qi = in.q.impl(), ki = in.k.impl(), vi = in.v.impl(), oi = out.impl();
            record_node([qi, ki, vi, oi, fwd, n, d, h, w] {
                if (!oi->grad) return;
                swa_backward<float>(qi->data.as<float>().data(), ki->data.as<float>().data(),
                                    vi->data.as<float>().data(), fwd->alpha,
                                    oi->grad->as<float>().data(),
                                    qi->requires_grad ? ensure_grad(*qi).as<float>().data() : nullptr,
                                    ki->requires_grad ? ensure_grad(*ki).as<float>().data() : nullptr,
                                    vi->requires_grad ? ensure_grad(*vi).as<float>().data() : nullptr,
                                    n, d, h, w);
            });
        }
    } else {
        auto fwd = std::make_shared<BandedForward<double>>();
        swa_forward<double>(in.q.data<double>().data(), in.k.data<double>().data(),
                            in.v.data<double>().data(), out.data<double>().data(), fwd->alpha,
                            n, d, h, w);
        if (capture_trace)
            result.trace = AttentionTrace{swa_trace_dense<double>(fwd->alpha, n, h, w, DType::f64)};
        if (rec) {
            out.impl()->requires_grad = true;
            out.impl()->tape = TapeScope::current();
            auto qi = in.q.impl(), ki = in.k.impl(), vi = in.v.impl(), oi = out.impl();
            record_node([qi, ki, vi, oi, fwd, n, d, h, w] {
                if (!oi->grad) return;
                swa_backward<double>(qi->data.as<double>().data(), ki->data.as<double>().data(),
                                     vi->data.as<double>().data(), fwd->alpha,
                                     oi->grad->as<double>().data(),
                                     qi->requires_grad ? ensure_grad(*qi).as<double>().data() : nullptr,
                                     ki->requires_grad ? ensure_grad(*ki).as<double>().data() : nullptr,
                                     vi->requires_grad ? ensure_grad(*vi).as<double>().data() : nullptr,
                                     n, d, h, w);
            });
        }
    }
    result.output = out;
    return result;
}

Tensor identity_attention(const Tensor& x) {
    return x;
}

size_t kv_cache_entries(const LayerKind& kind, size_t seq_len) {
    switch (kind.kind) {
    case LayerKind::Kind::Softmax: return seq_len;
    case LayerKind::Kind::SlidingWindow: return std::min(seq_len, kind.window);
    case LayerKind::Kind::Identity: return 0;
    }
    return 0;
}

} // namespace hybridlm
