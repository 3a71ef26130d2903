#pragma once

#include <optional>
#include <string>

#include "hybridlm/tensor.hpp"

namespace hybridlm {

inline constexpr size_t kDefaultWindow = 64;

// Per-layer attention variant.
struct LayerKind {
    enum class Kind { Softmax, SlidingWindow, Identity };

    Kind kind = Kind::Softmax;
    size_t window = 0; // SlidingWindow only

    static LayerKind softmax() { return {Kind::Softmax, 0}; }
    static LayerKind sliding_window(size_t w) {
        if (w < 1) throw ConfigError("LayerKind: sliding window must be >= 1");
        return {Kind::SlidingWindow, w};
    }
    static LayerKind identity() { return {Kind::Identity, 0}; }

    bool is_softmax() const { return kind == Kind::Softmax; }
    bool is_sliding_window() const { return kind == Kind::SlidingWindow; }
    bool is_identity() const { return kind == Kind::Identity; }

    bool operator==(const LayerKind&) const = default;

    // Token form used in plan files: "S", "W<w>", "I".
    std::string token() const;
    static LayerKind from_token(const std::string& token);
};

// Projected queries, keys and values for one layer, [n, d] each, plus the
// head count the feature dimension is split into.
struct AttentionInputs {
    Tensor q, k, v;
    size_t head_count = 1;

    size_t seq_len() const { return q.rows(); }
    size_t dim() const { return q.cols(); }
    void validate() const;
};

// Per-head row-stochastic attention weights, [h, n, n], zero outside the
// causal (or windowed) support.
struct AttentionTrace {
    Tensor weights;

    size_t head_count() const { return weights.shape()[0]; }
    size_t seq_len() const { return weights.shape()[1]; }
};

struct AttentionResult {
    Tensor output; // [n, d]
    std::optional<AttentionTrace> trace;
};

// Causal scaled dot-product attention over the full prefix, per head, with
// scale 1/sqrt(d/h). The trace, when captured, participates in the graph so
// distillation losses can differentiate through it.
AttentionResult softmax_attention(const AttentionInputs& in, bool capture_trace);

// Causal attention restricted to the last `window` positions (self plus up
// to window-1 predecessors). Computed bandwise in O(n * window * d); no
// [n, n] score buffer is materialized. A requested trace is a dense value
// copy for inspection and carries no gradients.
AttentionResult sliding_window_attention(const AttentionInputs& in, size_t window,
                                         bool capture_trace);

// The attention-free variant: the sublayer input passes through unchanged.
Tensor identity_attention(const Tensor& x);

// Key/value rows a layer of the given kind holds after seq_len tokens.
// Multiply by 2 * d * bytes-per-element for bytes.
size_t kv_cache_entries(const LayerKind& kind, size_t seq_len);

} // namespace hybridlm
