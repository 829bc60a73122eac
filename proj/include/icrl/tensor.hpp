#pragma once

// Dense-tensor numerical core with eager reverse-mode autodiff. Sized for a
// small causal transformer on CPU: float for training, double for gradient
// verification. Parallel kernels use static row partitioning so results are
// bit-identical for any thread count.

#include <algorithm>
#include <array>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "icrl/rng.hpp"
#include "icrl/serialize.hpp"
#include "icrl/threading.hpp"

namespace icrl {

template <typename T>
struct Array {
    std::vector<int64_t> shape;
    std::vector<T> data;

    Array() = default;
    Array(std::vector<int64_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        assert((int64_t)data.size() == shape_numel(shape));
    }

    static int64_t shape_numel(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) n *= d;
        return n;
    }

    static Array zeros(std::vector<int64_t> s) {
        int64_t n = shape_numel(s);
        return Array(std::move(s), std::vector<T>((size_t)n, T(0)));
    }
    static Array full(std::vector<int64_t> s, T v) {
        int64_t n = shape_numel(s);
        return Array(std::move(s), std::vector<T>((size_t)n, v));
    }
    static Array scalar(T v) { return Array({1}, {v}); }

    int64_t numel() const { return (int64_t)data.size(); }
    int64_t dim(int i) const { return shape[i < 0 ? shape.size() + i : (size_t)i]; }
    bool same_shape(const Array& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
        return s + "]";
    }
};

using IArray = Array<int32_t>;

namespace detail {

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw UsageError(msg);
}

// C[M,N] (+)= A[M,K] * B[K,N]; rows of C are independent, k-loop order fixed.
template <typename T>
void gemm_nn_rows(const T* a, const T* b, T* c, int64_t m0, int64_t m1, int64_t n, int64_t k, bool acc) {
    for (int64_t m = m0; m < m1; ++m) {
        T* __restrict cr = c + m * n;
        if (!acc) std::fill(cr, cr + n, T(0));
        const T* ar = a + m * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            const T av = ar[kk];
            if (av == T(0)) continue;
            const T* __restrict br = b + kk * n;
            for (int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

// C[M,N] (+)= A[M,K] * B[N,K]^T; row-dot-row, contiguous both sides.
template <typename T>
void gemm_nt_rows(const T* a, const T* b, T* c, int64_t m0, int64_t m1, int64_t n, int64_t k, bool acc) {
    for (int64_t m = m0; m < m1; ++m) {
        const T* __restrict ar = a + m * k;
        T* cr = c + m * n;
        for (int64_t j = 0; j < n; ++j) {
            const T* __restrict br = b + j * k;
            T s = 0;
            for (int64_t kk = 0; kk < k; ++kk) s += ar[kk] * br[kk];
            cr[j] = acc ? cr[j] + s : s;
        }
    }
}

// C[K,N] (+)= A[M,K]^T * B[M,N]; parallel over K rows of the output.
template <typename T>
void gemm_tn_rows(const T* a, const T* b, T* c, int64_t k0, int64_t k1, int64_t m, int64_t n, int64_t k,
                  bool acc) {
    for (int64_t kk = k0; kk < k1; ++kk) {
        T* __restrict cr = c + kk * n;
        if (!acc) std::fill(cr, cr + n, T(0));
        for (int64_t mm = 0; mm < m; ++mm) {
            const T av = a[mm * k + kk];
            if (av == T(0)) continue;
            const T* __restrict br = b + mm * n;
            for (int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

enum class Gemm { NN, NT, TN };

// Batched GEMM dispatcher. Shapes per batch: NN A[M,K] B[K,N] -> C[M,N];
// NT A[M,K] B[N,K] -> C[M,N]; TN A[M,K] B[M,N] -> C[K,N].
template <typename T>
void gemm_batch(Gemm mode, int64_t batches, int64_t m, int64_t n, int64_t k, const T* a, const T* b, T* c,
                bool acc) {
    const int64_t a_stride = m * k;
    const int64_t b_stride = (mode == Gemm::NN) ? k * n : (mode == Gemm::NT ? n * k : m * n);
    const int64_t c_stride = (mode == Gemm::TN) ? k * n : m * n;
    const int64_t out_rows_per_batch = (mode == Gemm::TN) ? k : m;
    parallel_for(batches * out_rows_per_batch, [&](int64_t lo, int64_t hi) {
        int64_t bi = lo / out_rows_per_batch;
        int64_t row = lo - bi * out_rows_per_batch;
        while (lo < hi) {
            int64_t take = std::min(out_rows_per_batch - row, hi - lo);
            const T* ab = a + bi * a_stride;
            const T* bb = b + bi * b_stride;
            T* cb = c + bi * c_stride;
            switch (mode) {
                case Gemm::NN: gemm_nn_rows(ab, bb, cb, row, row + take, n, k, acc); break;
                case Gemm::NT: gemm_nt_rows(ab, bb, cb, row, row + take, n, k, acc); break;
                case Gemm::TN: gemm_tn_rows(ab, bb, cb, row, row + take, m, n, k, acc); break;
            }
            lo += take;
            row = 0;
            ++bi;
        }
    });
}

}  // namespace detail

// Eager autodiff tape. Ops compute values immediately and register a reverse
// closure; backward() walks nodes in reverse creation order. Nodes whose
// inputs all have needs_grad=false carry no closure, so target-network and
// evaluation forwards cost values only.
template <typename T>
class Tape {
public:
    using Id = int32_t;

    struct Node {
        Array<T> val;
        Array<T> grad;  // allocated on first accumulation
        bool needs_grad = false;
        std::function<void(Tape&)> back;
    };

    const Array<T>& val(Id id) const { return nodes_[(size_t)id].val; }
    Array<T>& grad(Id id) { return nodes_[(size_t)id].grad; }
    bool needs_grad(Id id) const { return nodes_[(size_t)id].needs_grad; }
    size_t size() const { return nodes_.size(); }

    Id leaf(Array<T> v, bool needs_grad = false) {
        Node n;
        n.val = std::move(v);
        n.needs_grad = needs_grad;
        nodes_.push_back(std::move(n));
        return (Id)(nodes_.size() - 1);
    }

    Id constant(Array<T> v) { return leaf(std::move(v), false); }

    // ---- elementwise ----

    Id add(Id a, Id b) {
        shape_match(a, b, "add");
        Array<T> out = val(a);
        const T* pb = val(b).data.data();
        for (int64_t i = 0; i < out.numel(); ++i) out.data[(size_t)i] += pb[i];
        return unary_or_binary(std::move(out), a, b, [](Tape& t, Id self, Id a2, Id b2) {
            const Array<T>& g = t.grad(self);
            t.accumulate(a2, g.data.data(), g.numel());
            t.accumulate(b2, g.data.data(), g.numel());
        });
    }

    Id sub(Id a, Id b) {
        shape_match(a, b, "sub");
        Array<T> out = val(a);
        const T* pb = val(b).data.data();
        for (int64_t i = 0; i < out.numel(); ++i) out.data[(size_t)i] -= pb[i];
        return unary_or_binary(std::move(out), a, b, [](Tape& t, Id self, Id a2, Id b2) {
            const Array<T>& g = t.grad(self);
            t.accumulate(a2, g.data.data(), g.numel());
            t.accumulate_scaled(b2, g.data.data(), g.numel(), T(-1));
        });
    }

    Id mul(Id a, Id b) {
        shape_match(a, b, "mul");
        Array<T> out = val(a);
        const T* pb = val(b).data.data();
        for (int64_t i = 0; i < out.numel(); ++i) out.data[(size_t)i] *= pb[i];
        return unary_or_binary(std::move(out), a, b, [](Tape& t, Id self, Id a2, Id b2) {
            const Array<T>& g = t.grad(self);
            if (t.needs_grad(a2)) {
                const T* pb2 = t.val(b2).data.data();
                Array<T>& ga = t.grad_buf(a2);
                for (int64_t i = 0; i < g.numel(); ++i) ga.data[(size_t)i] += g.data[(size_t)i] * pb2[i];
            }
            if (t.needs_grad(b2)) {
                const T* pa2 = t.val(a2).data.data();
                Array<T>& gb = t.grad_buf(b2);
                for (int64_t i = 0; i < g.numel(); ++i) gb.data[(size_t)i] += g.data[(size_t)i] * pa2[i];
            }
        });
    }

    // x * c with a constant array (no gradient to c)
    Id mul_const(Id a, Array<T> c) {
        shape_match_arr(a, c, "mul_const");
        Array<T> out = val(a);
        for (int64_t i = 0; i < out.numel(); ++i) out.data[(size_t)i] *= c.data[(size_t)i];
        Id id = leaf(std::move(out), needs_grad(a));
        if (needs_grad(a)) {
            nodes_.back().back = [a, id, c = std::move(c)](Tape& t) {
                const Array<T>& g = t.grad(id);
                Array<T>& ga = t.grad_buf(a);
                for (int64_t i = 0; i < g.numel(); ++i) ga.data[(size_t)i] += g.data[(size_t)i] * c.data[(size_t)i];
            };
        }
        return id;
    }

    Id add_const(Id a, Array<T> c) {
        shape_match_arr(a, c, "add_const");
        Array<T> out = val(a);
        for (int64_t i = 0; i < out.numel(); ++i) out.data[(size_t)i] += c.data[(size_t)i];
        Id id = leaf(std::move(out), needs_grad(a));
        if (needs_grad(a)) {
            nodes_.back().back = [a, id](Tape& t) {
                const Array<T>& g = t.grad(id);
                t.accumulate(a, g.data.data(), g.numel());
            };
        }
        return id;
    }

    Id scale(Id a, T c) {
        Array<T> out = val(a);
        for (auto& v : out.data) v *= c;
        Id id = leaf(std::move(out), needs_grad(a));
        if (needs_grad(a)) {
            nodes_.back().back = [a, id, c](Tape& t) {
                const Array<T>& g = t.grad(id);
                t.accumulate_scaled(a, g.data.data(), g.numel(), c);
            };
        }
        return id;
    }

    Id detach(Id a) { return leaf(val(a), false); }

    Id reshape(Id a, std::vector<int64_t> new_shape) {
        detail::check(Array<T>::shape_numel(new_shape) == val(a).numel(),
                      "reshape: numel mismatch " + val(a).shape_str());
        Array<T> out(std::move(new_shape), val(a).data);
        Id id = leaf(std::move(out), needs_grad(a));
        if (needs_grad(a)) {
            nodes_.back().back = [a, id](Tape& t) {
                const Array<T>& g = t.grad(id);
                t.accumulate(a, g.data.data(), g.numel());
            };
        }
        return id;
    }

    // ---- activations / normalization ----

    Id gelu(Id a) {
        static const T inv_sqrt2 = T(0.7071067811865475244);
        static const T inv_sqrt2pi = T(0.3989422804014326779);
        Array<T> out = val(a);
        for (auto& v : out.data) v = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
        Id id = leaf(std::move(out), needs_grad(a));
        if (needs_grad(a)) {
            nodes_.back().back = [a, id](Tape& t) {
                const Array<T>& g = t.grad(id);
                const Array<T>& x = t.val(a);
                Array<T>& ga = t.grad_buf(a);
                for (int64_t i = 0; i < g.numel(); ++i) {
                    T xv = x.data[(size_t)i];
                    T cdf = T(0.5) * (T(1) + std::erf(xv * inv_sqrt2));
                    T pdf = inv_sqrt2pi * std::exp(T(-0.5) * xv * xv);
                    ga.data[(size_t)i] += g.data[(size_t)i] * (cdf + xv * pdf);
                }
            };
        }
        return id;
    }

    Id leaky_relu(Id a, T slope) {
        Array<T> out = val(a);
        for (auto& v : out.data) v = v >= T(0) ? v : slope * v;
        Id id = leaf(std::move(out), needs_grad(a));
        if (needs_grad(a)) {
            nodes_.back().back = [a, id, slope](Tape& t) {
                const Array<T>& g = t.grad(id);
                const Array<T>& x = t.val(a);
                Array<T>& ga = t.grad_buf(a);
                for (int64_t i = 0; i < g.numel(); ++i)
                    ga.data[(size_t)i] += g.data[(size_t)i] * (x.data[(size_t)i] >= T(0) ? T(1) : slope);
            };
        }
        return id;
    }

    // Normalizes the last dimension; gain/bias are [D].
    Id layer_norm(Id x, Id gain, Id bias, T eps = T(1e-5)) {
        const Array<T>& xv = val(x);
        int64_t d = xv.dim(-1);
        detail::check(val(gain).numel() == d && val(bias).numel() == d, "layer_norm: gain/bias size");
        int64_t rows = xv.numel() / d;
        Array<T> out = xv;
        std::vector<T> mu((size_t)rows), istd((size_t)rows);
        const T* g = val(gain).data.data();
        const T* b = val(bias).data.data();
        for (int64_t r = 0; r < rows; ++r) {
            T* row = out.data.data() + r * d;
            double m = 0;
            for (int64_t i = 0; i < d; ++i) m += row[i];
            m /= (double)d;
            double var = 0;
            for (int64_t i = 0; i < d; ++i) {
                double c = row[i] - m;
                var += c * c;
            }
            var /= (double)d;
            T is = T(1) / std::sqrt((T)var + eps);
            mu[(size_t)r] = (T)m;
            istd[(size_t)r] = is;
            for (int64_t i = 0; i < d; ++i) row[i] = ((row[i] - (T)m) * is) * g[i] + b[i];
        }
        bool ng = needs_grad(x) || needs_grad(gain) || needs_grad(bias);
        Id id = leaf(std::move(out), ng);
        if (ng) {
            nodes_.back().back = [x, gain, bias, id, d, rows, mu = std::move(mu),
                                  istd = std::move(istd)](Tape& t) {
                const Array<T>& gy = t.grad(id);
                const Array<T>& xv2 = t.val(x);
                const T* gw = t.val(gain).data.data();
                for (int64_t r = 0; r < rows; ++r) {
                    const T* xr = xv2.data.data() + r * d;
                    const T* gyr = gy.data.data() + r * d;
                    T m = mu[(size_t)r], is = istd[(size_t)r];
                    if (t.needs_grad(gain)) {
                        Array<T>& gg = t.grad_buf(gain);
                        for (int64_t i = 0; i < d; ++i) gg.data[(size_t)i] += gyr[i] * (xr[i] - m) * is;
                    }
                    if (t.needs_grad(bias)) {
                        Array<T>& gb = t.grad_buf(bias);
                        for (int64_t i = 0; i < d; ++i) gb.data[(size_t)i] += gyr[i];
                    }
                    if (t.needs_grad(x)) {
                        Array<T>& gx = t.grad_buf(x);
                        double s1 = 0, s2 = 0;  // mean(dxhat), mean(dxhat * xhat)
                        for (int64_t i = 0; i < d; ++i) {
                            T xh = (xr[i] - m) * is;
                            T dxh = gyr[i] * gw[i];
                            s1 += dxh;
                            s2 += (double)dxh * xh;
                        }
                        s1 /= (double)d;
                        s2 /= (double)d;
                        T* gxr = gx.data.data() + r * d;
                        for (int64_t i = 0; i < d; ++i) {
                            T xh = (xr[i] - m) * is;
                            T dxh = gyr[i] * gw[i];
                            gxr[i] += is * (dxh - (T)s1 - xh * (T)s2);
                        }
                    }
                }
            };
        }
        return id;
    }

    // ---- linear algebra ----

    // x [.., K] @ w [K, N] -> [.., N]; leading dims flattened to rows.
    Id matmul(Id x, Id w) {
        const Array<T>& xv = val(x);
        const Array<T>& wv = val(w);
        detail::check(wv.shape.size() == 2, "matmul: weight must be 2-d, got " + wv.shape_str());
        int64_t k = wv.shape[0], n = wv.shape[1];
        detail::check(xv.dim(-1) == k,
                      "matmul: inner dims differ, " + xv.shape_str() + " vs " + wv.shape_str());
        int64_t rows = xv.numel() / k;
        std::vector<int64_t> oshape(xv.shape.begin(), xv.shape.end() - 1);
        oshape.push_back(n);
        Array<T> out = Array<T>::zeros(oshape);
        detail::gemm_batch(detail::Gemm::NN, 1, rows, n, k, xv.data.data(), wv.data.data(), out.data.data(),
                           false);
        bool ng = needs_grad(x) || needs_grad(w);
        Id id = leaf(std::move(out), ng);
        if (ng) {
            nodes_.back().back = [x, w, id, rows, n, k](Tape& t) {
                const Array<T>& g = t.grad(id);
                if (t.needs_grad(x)) {
                    Array<T>& gx = t.grad_buf(x);
                    detail::gemm_batch(detail::Gemm::NT, 1, rows, k, n, g.data.data(), t.val(w).data.data(),
                                       gx.data.data(), true);
                }
                if (t.needs_grad(w)) {
                    Array<T>& gw = t.grad_buf(w);
                    detail::gemm_batch(detail::Gemm::TN, 1, rows, n, k, t.val(x).data.data(), g.data.data(),
                                       gw.data.data(), true);
                }
            };
        }
        return id;
    }

    // x [.., D] + b [D]
    Id add_bias(Id x, Id b) {
        const Array<T>& xv = val(x);
        int64_t d = xv.dim(-1);
        detail::check(val(b).numel() == d, "add_bias: size mismatch");
        Array<T> out = xv;
        const T* bp = val(b).data.data();
        int64_t rows = xv.numel() / d;
        for (int64_t r = 0; r < rows; ++r) {
            T* row = out.data.data() + r * d;
            for (int64_t i = 0; i < d; ++i) row[i] += bp[i];
        }
        bool ng = needs_grad(x) || needs_grad(b);
        Id id = leaf(std::move(out), ng);
        if (ng) {
            nodes_.back().back = [x, b, id, rows, d](Tape& t) {
                const Array<T>& g = t.grad(id);
                if (t.needs_grad(x)) t.accumulate(x, g.data.data(), g.numel());
                if (t.needs_grad(b)) {
                    Array<T>& gb = t.grad_buf(b);
                    for (int64_t r = 0; r < rows; ++r) {
                        const T* row = g.data.data() + r * d;
                        for (int64_t i = 0; i < d; ++i) gb.data[(size_t)i] += row[i];
                    }
                }
            };
        }
        return id;
    }

    Id linear(Id x, Id w, Id b) { return add_bias(matmul(x, w), b); }

    // a [B,M,K] @ b [B,K,N] -> [B,M,N]
    Id bmm_nn(Id a, Id b) { return bmm(a, b, false); }
    // a [B,M,K] @ b [B,N,K]^T -> [B,M,N]
    Id bmm_nt(Id a, Id b) { return bmm(a, b, true); }

    // ---- embeddings / gather ----

    // table [V, D], ids [..] -> [.., D]
    Id embedding(Id table, const IArray& ids) {
        const Array<T>& tv = val(table);
        detail::check(tv.shape.size() == 2, "embedding: table must be 2-d");
        int64_t v = tv.shape[0], d = tv.shape[1];
        for (int32_t ix : ids.data)
            detail::check(ix >= 0 && ix < v,
                          "embedding: index " + std::to_string(ix) + " out of range [0," + std::to_string(v) + ")");
        std::vector<int64_t> oshape = ids.shape;
        oshape.push_back(d);
        Array<T> out = Array<T>::zeros(oshape);
        for (int64_t i = 0; i < ids.numel(); ++i)
            std::copy_n(tv.data.data() + (int64_t)ids.data[(size_t)i] * d, d, out.data.data() + i * d);
        Id id = leaf(std::move(out), needs_grad(table));
        if (needs_grad(table)) {
            nodes_.back().back = [table, id, ids, d](Tape& t) {
                const Array<T>& g = t.grad(id);
                Array<T>& gt = t.grad_buf(table);
                for (int64_t i = 0; i < ids.numel(); ++i) {
                    T* dst = gt.data.data() + (int64_t)ids.data[(size_t)i] * d;
                    const T* src = g.data.data() + i * d;
                    for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
                }
            };
        }
        return id;
    }

    // x [.., A], idx [..] -> [..]; picks x[..., idx]
    Id gather_last(Id x, const IArray& idx) {
        const Array<T>& xv = val(x);
        int64_t a = xv.dim(-1);
        int64_t rows = xv.numel() / a;
        detail::check(idx.numel() == rows, "gather_last: index count mismatch");
        std::vector<int64_t> oshape(xv.shape.begin(), xv.shape.end() - 1);
        if (oshape.empty()) oshape.push_back(1);
        Array<T> out = Array<T>::zeros(oshape);
        for (int64_t r = 0; r < rows; ++r) {
            int32_t ix = idx.data[(size_t)r];
            detail::check(ix >= 0 && ix < a, "gather_last: index out of range");
            out.data[(size_t)r] = xv.data[(size_t)(r * a + ix)];
        }
        Id id = leaf(std::move(out), needs_grad(x));
        if (needs_grad(x)) {
            nodes_.back().back = [x, id, idx, a, rows](Tape& t) {
                const Array<T>& g = t.grad(id);
                Array<T>& gx = t.grad_buf(x);
                for (int64_t r = 0; r < rows; ++r)
                    gx.data[(size_t)(r * a + idx.data[(size_t)r])] += g.data[(size_t)r];
            };
        }
        return id;
    }

    // Concatenate along the last dimension.
    Id concat_last(const std::vector<Id>& parts) {
        detail::check(!parts.empty(), "concat_last: empty input");
        int64_t rows = -1, total = 0;
        for (Id p : parts) {
            const Array<T>& pv = val(p);
            int64_t d = pv.dim(-1);
            int64_t r = pv.numel() / d;
            detail::check(rows < 0 || rows == r, "concat_last: leading dims differ");
            rows = r;
            total += d;
        }
        std::vector<int64_t> oshape = val(parts[0]).shape;
        oshape.back() = total;
        Array<T> out = Array<T>::zeros(oshape);
        int64_t off = 0;
        bool ng = false;
        for (Id p : parts) {
            const Array<T>& pv = val(p);
            int64_t d = pv.dim(-1);
            for (int64_t r = 0; r < rows; ++r)
                std::copy_n(pv.data.data() + r * d, d, out.data.data() + r * total + off);
            off += d;
            ng = ng || needs_grad(p);
        }
        Id id = leaf(std::move(out), ng);
        if (ng) {
            nodes_.back().back = [parts, id, rows, total](Tape& t) {
                const Array<T>& g = t.grad(id);
                int64_t off2 = 0;
                for (Id p : parts) {
                    int64_t d = t.val(p).dim(-1);
                    if (t.needs_grad(p)) {
                        Array<T>& gp = t.grad_buf(p);
                        for (int64_t r = 0; r < rows; ++r) {
                            const T* src = g.data.data() + r * total + off2;
                            T* dst = gp.data.data() + r * d;
                            for (int64_t i = 0; i < d; ++i) dst[i] += src[i];
                        }
                    }
                    off2 += d;
                }
            };
        }
        return id;
    }

    // x [B, S, ...] -> [B, hi-lo, ...] along dim 1.
    Id slice_seq(Id x, int64_t lo, int64_t hi) {
        const Array<T>& xv = val(x);
        detail::check(xv.shape.size() >= 2, "slice_seq: rank must be >= 2");
        int64_t b = xv.shape[0], s = xv.shape[1];
        detail::check(0 <= lo && lo <= hi && hi <= s, "slice_seq: bad range");
        int64_t inner = xv.numel() / (b * s);
        std::vector<int64_t> oshape = xv.shape;
        oshape[1] = hi - lo;
        Array<T> out = Array<T>::zeros(oshape);
        for (int64_t bi = 0; bi < b; ++bi)
            std::copy_n(xv.data.data() + (bi * s + lo) * inner, (hi - lo) * inner,
                        out.data.data() + bi * (hi - lo) * inner);
        Id id = leaf(std::move(out), needs_grad(x));
        if (needs_grad(x)) {
            nodes_.back().back = [x, id, b, s, lo, hi, inner](Tape& t) {
                const Array<T>& g = t.grad(id);
                Array<T>& gx = t.grad_buf(x);
                for (int64_t bi = 0; bi < b; ++bi) {
                    const T* src = g.data.data() + bi * (hi - lo) * inner;
                    T* dst = gx.data.data() + (bi * s + lo) * inner;
                    for (int64_t i = 0; i < (hi - lo) * inner; ++i) dst[i] += src[i];
                }
            };
        }
        return id;
    }

    // ---- softmax family ----

    Id softmax_last(Id x) {
        const Array<T>& xv = val(x);
        int64_t a = xv.dim(-1);
        int64_t rows = xv.numel() / a;
        Array<T> out = xv;
        for (int64_t r = 0; r < rows; ++r) softmax_row(out.data.data() + r * a, a);
        Id id = leaf(std::move(out), needs_grad(x));
        if (needs_grad(x)) {
            nodes_.back().back = [x, id, a, rows](Tape& t) {
                const Array<T>& g = t.grad(id);
                const Array<T>& y = t.val(id);
                Array<T>& gx = t.grad_buf(x);
                for (int64_t r = 0; r < rows; ++r) {
                    const T* yr = y.data.data() + r * a;
                    const T* gr = g.data.data() + r * a;
                    double dot = 0;
                    for (int64_t i = 0; i < a; ++i) dot += (double)yr[i] * gr[i];
                    T* gxr = gx.data.data() + r * a;
                    for (int64_t i = 0; i < a; ++i) gxr[i] += yr[i] * (gr[i] - (T)dot);
                }
            };
        }
        return id;
    }

    Id log_sum_exp_last(Id x) {
        const Array<T>& xv = val(x);
        int64_t a = xv.dim(-1);
        int64_t rows = xv.numel() / a;
        std::vector<int64_t> oshape(xv.shape.begin(), xv.shape.end() - 1);
        if (oshape.empty()) oshape.push_back(1);
        Array<T> out = Array<T>::zeros(oshape);
        for (int64_t r = 0; r < rows; ++r) {
            const T* row = xv.data.data() + r * a;
            T mx = row[0];
            for (int64_t i = 1; i < a; ++i) mx = std::max(mx, row[i]);
            double s = 0;
            for (int64_t i = 0; i < a; ++i) s += std::exp((double)(row[i] - mx));
            out.data[(size_t)r] = mx + (T)std::log(s);
        }
        Id id = leaf(std::move(out), needs_grad(x));
        if (needs_grad(x)) {
            nodes_.back().back = [x, id, a, rows](Tape& t) {
                const Array<T>& g = t.grad(id);
                const Array<T>& xv2 = t.val(x);
                const Array<T>& lse = t.val(id);
                Array<T>& gx = t.grad_buf(x);
                for (int64_t r = 0; r < rows; ++r) {
                    const T* row = xv2.data.data() + r * a;
                    T* gxr = gx.data.data() + r * a;
                    T l = lse.data[(size_t)r], gr = g.data[(size_t)r];
                    for (int64_t i = 0; i < a; ++i) gxr[i] += gr * std::exp(row[i] - l);
                }
            };
        }
        return id;
    }

    // Causal softmax over scores [B*H, S, S]: query row r attends to columns
    // [fv(b), r]; rows before fv(b) are zeroed. first_valid has one entry per
    // batch row (before head expansion); empty means 0 for all.
    Id causal_softmax(Id scores, int heads, const std::vector<int>& first_valid = {}) {
        const Array<T>& sv = val(scores);
        detail::check(sv.shape.size() == 3 && sv.shape[1] == sv.shape[2], "causal_softmax: need [BH,S,S]");
        int64_t bh = sv.shape[0], s = sv.shape[1];
        detail::check(bh % heads == 0, "causal_softmax: batch not divisible by heads");
        detail::check(first_valid.empty() || (int64_t)first_valid.size() == bh / heads,
                      "causal_softmax: first_valid size");
        Array<T> out = sv;
        parallel_for(bh, [&](int64_t lo, int64_t hi) {
            for (int64_t m = lo; m < hi; ++m) {
                int fv = first_valid.empty() ? 0 : first_valid[(size_t)(m / heads)];
                T* mat = out.data.data() + m * s * s;
                for (int64_t r = 0; r < s; ++r) {
                    T* row = mat + r * s;
                    if (r < fv) {
                        std::fill(row, row + s, T(0));
                        continue;
                    }
                    T mx = row[fv];
                    for (int64_t i = fv + 1; i <= r; ++i) mx = std::max(mx, row[i]);
                    double sum = 0;
                    for (int64_t i = fv; i <= r; ++i) {
                        row[i] = std::exp(row[i] - mx);
                        sum += row[i];
                    }
                    T inv = T(1.0 / sum);
                    for (int64_t i = 0; i < fv; ++i) row[i] = T(0);
                    for (int64_t i = fv; i <= r; ++i) row[i] *= inv;
                    for (int64_t i = r + 1; i < s; ++i) row[i] = T(0);
                }
            }
        });
        Id id = leaf(std::move(out), needs_grad(scores));
        if (needs_grad(scores)) {
            nodes_.back().back = [scores, id, heads, first_valid, bh, s](Tape& t) {
                const Array<T>& g = t.grad(id);
                const Array<T>& y = t.val(id);
                Array<T>& gx = t.grad_buf(scores);
                parallel_for(bh, [&](int64_t lo, int64_t hi) {
                    for (int64_t m = lo; m < hi; ++m) {
                        int fv = first_valid.empty() ? 0 : first_valid[(size_t)(m / heads)];
                        for (int64_t r = fv; r < s; ++r) {
                            const T* yr = y.data.data() + (m * s + r) * s;
                            const T* gr = g.data.data() + (m * s + r) * s;
                            T* gxr = gx.data.data() + (m * s + r) * s;
                            double dot = 0;
                            for (int64_t i = fv; i <= r; ++i) dot += (double)yr[i] * gr[i];
                            for (int64_t i = fv; i <= r; ++i) gxr[i] += yr[i] * (gr[i] - (T)dot);
                        }
                    }
                });
            };
        }
        return id;
    }

    // ---- attention head plumbing ----

    // qkv [B, S, 3*D] -> {q, k, v} each [B*H, S, D/H]
    std::array<Id, 3> split_qkv(Id qkv, int heads) {
        const Array<T>& xv = val(qkv);
        detail::check(xv.shape.size() == 3 && xv.shape[2] % 3 == 0, "split_qkv: need [B,S,3D]");
        int64_t b = xv.shape[0], s = xv.shape[1], d = xv.shape[2] / 3;
        detail::check(d % heads == 0, "split_qkv: d_model not divisible by heads");
        int64_t hd = d / heads;
        std::array<Id, 3> out_ids;
        for (int part = 0; part < 3; ++part) {
            Array<T> out = Array<T>::zeros({b * heads, s, hd});
            for (int64_t bi = 0; bi < b; ++bi)
                for (int64_t h = 0; h < heads; ++h)
                    for (int64_t si = 0; si < s; ++si)
                        std::copy_n(xv.data.data() + (bi * s + si) * 3 * d + part * d + h * hd, hd,
                                    out.data.data() + ((bi * heads + h) * s + si) * hd);
            Id id = leaf(std::move(out), needs_grad(qkv));
            if (needs_grad(qkv)) {
                nodes_.back().back = [qkv, id, part, b, s, d, heads, hd](Tape& t) {
                    const Array<T>& g = t.grad(id);
                    Array<T>& gx = t.grad_buf(qkv);
                    for (int64_t bi = 0; bi < b; ++bi)
                        for (int64_t h = 0; h < heads; ++h)
                            for (int64_t si = 0; si < s; ++si) {
                                const T* src = g.data.data() + ((bi * heads + h) * s + si) * hd;
                                T* dst = gx.data.data() + (bi * s + si) * 3 * d + part * d + h * hd;
                                for (int64_t i = 0; i < hd; ++i) dst[i] += src[i];
                            }
                };
            }
            out_ids[(size_t)part] = id;
        }
        return out_ids;
    }

    // x [B*H, S, D/H] -> [B, S, D]
    Id merge_heads(Id x, int heads) {
        const Array<T>& xv = val(x);
        detail::check(xv.shape.size() == 3 && xv.shape[0] % heads == 0, "merge_heads: need [B*H,S,hd]");
        int64_t b = xv.shape[0] / heads, s = xv.shape[1], hd = xv.shape[2];
        Array<T> out = Array<T>::zeros({b, s, heads * hd});
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t si = 0; si < s; ++si)
                    std::copy_n(xv.data.data() + ((bi * heads + h) * s + si) * hd, hd,
                                out.data.data() + (bi * s + si) * heads * hd + h * hd);
        Id id = leaf(std::move(out), needs_grad(x));
        if (needs_grad(x)) {
            nodes_.back().back = [x, id, b, s, hd, heads](Tape& t) {
                const Array<T>& g = t.grad(id);
                Array<T>& gx = t.grad_buf(x);
                for (int64_t bi = 0; bi < b; ++bi)
                    for (int64_t h = 0; h < heads; ++h)
                        for (int64_t si = 0; si < s; ++si) {
                            const T* src = g.data.data() + (bi * s + si) * heads * hd + h * hd;
                            T* dst = gx.data.data() + ((bi * heads + h) * s + si) * hd;
                            for (int64_t i = 0; i < hd; ++i) dst[i] += src[i];
                        }
            };
        }
        return id;
    }

    // ---- dropout ----

    // Keep-probability semantics; mask is derived from (salt, index) and
    // regenerated in the backward pass. keep >= 1 is the identity.
    Id dropout(Id x, T keep, uint64_t salt) {
        if (keep >= T(1)) return x;
        detail::check(keep > T(0), "dropout: keep probability must be > 0");
        const uint64_t thresh = (uint64_t)((double)keep * 18446744073709551616.0);
        Array<T> out = val(x);
        const T inv = T(1) / keep;
        for (int64_t i = 0; i < out.numel(); ++i)
            out.data[(size_t)i] = (mix64(salt, (uint64_t)i) < thresh) ? out.data[(size_t)i] * inv : T(0);
        Id id = leaf(std::move(out), needs_grad(x));
        if (needs_grad(x)) {
            nodes_.back().back = [x, id, thresh, salt, inv](Tape& t) {
                const Array<T>& g = t.grad(id);
                Array<T>& gx = t.grad_buf(x);
                for (int64_t i = 0; i < g.numel(); ++i)
                    if (mix64(salt, (uint64_t)i) < thresh) gx.data[(size_t)i] += g.data[(size_t)i] * inv;
            };
        }
        return id;
    }

    // ---- reductions / losses ----

    Id sum(Id x) {
        double s = 0;
        for (T v : val(x).data) s += v;
        Id id = leaf(Array<T>::scalar((T)s), needs_grad(x));
        if (needs_grad(x)) {
            nodes_.back().back = [x, id](Tape& t) {
                T g = t.grad(id).data[0];
                Array<T>& gx = t.grad_buf(x);
                for (auto& v : gx.data) v += g;
            };
        }
        return id;
    }

    // sum(x * m) / sum(m) with a constant mask; sum(m) must be positive.
    Id masked_mean(Id x, Array<T> mask) {
        shape_match_arr(x, mask, "masked_mean");
        double wsum = 0;
        for (T v : mask.data) wsum += v;
        detail::check(wsum > 0, "masked_mean: empty mask");
        double s = 0;
        const Array<T>& xv = val(x);
        for (int64_t i = 0; i < xv.numel(); ++i) s += (double)xv.data[(size_t)i] * mask.data[(size_t)i];
        Id id = leaf(Array<T>::scalar((T)(s / wsum)), needs_grad(x));
        if (needs_grad(x)) {
            nodes_.back().back = [x, id, mask = std::move(mask), wsum](Tape& t) {
                T g = t.grad(id).data[0];
                Array<T>& gx = t.grad_buf(x);
                for (int64_t i = 0; i < gx.numel(); ++i)
                    gx.data[(size_t)i] += g * mask.data[(size_t)i] / (T)wsum;
            };
        }
        return id;
    }

    Id mean(Id x) { return masked_mean(x, Array<T>::full(val(x).shape, T(1))); }

    // Mean masked cross-entropy against label-smoothed one-hot targets.
    // logits [.., A]; targets/mask flattened per row.
    Id cross_entropy(Id logits, const IArray& targets, T label_smoothing, const Array<T>& mask) {
        const Array<T>& lv = val(logits);
        int64_t a = lv.dim(-1);
        int64_t rows = lv.numel() / a;
        detail::check(targets.numel() == rows && mask.numel() == rows, "cross_entropy: row count mismatch");
        double wsum = 0;
        for (T v : mask.data) wsum += v;
        detail::check(wsum > 0, "cross_entropy: empty mask");
        const T off_prob = label_smoothing / (T)a;
        const T on_prob = T(1) - label_smoothing + off_prob;
        double loss = 0;
        for (int64_t r = 0; r < rows; ++r) {
            if (mask.data[(size_t)r] == T(0)) continue;
            const T* row = lv.data.data() + r * a;
            T mx = row[0];
            for (int64_t i = 1; i < a; ++i) mx = std::max(mx, row[i]);
            double se = 0;
            for (int64_t i = 0; i < a; ++i) se += std::exp((double)(row[i] - mx));
            double lse = mx + std::log(se);
            double ce = 0;
            int32_t tgt = targets.data[(size_t)r];
            detail::check(tgt >= 0 && tgt < a, "cross_entropy: target out of range");
            for (int64_t i = 0; i < a; ++i) {
                T p = (i == tgt) ? on_prob : off_prob;
                if (p != T(0)) ce += (double)p * (lse - row[i]);
            }
            loss += ce * mask.data[(size_t)r];
        }
        Id id = leaf(Array<T>::scalar((T)(loss / wsum)), needs_grad(logits));
        if (needs_grad(logits)) {
            nodes_.back().back = [logits, id, targets, mask, a, rows, on_prob, off_prob, wsum](Tape& t) {
                T g = t.grad(id).data[0];
                const Array<T>& lv2 = t.val(logits);
                Array<T>& gx = t.grad_buf(logits);
                for (int64_t r = 0; r < rows; ++r) {
                    if (mask.data[(size_t)r] == T(0)) continue;
                    const T* row = lv2.data.data() + r * a;
                    T* gxr = gx.data.data() + r * a;
                    T mx = row[0];
                    for (int64_t i = 1; i < a; ++i) mx = std::max(mx, row[i]);
                    double se = 0;
                    for (int64_t i = 0; i < a; ++i) se += std::exp((double)(row[i] - mx));
                    T w = g * mask.data[(size_t)r] / (T)wsum;
                    int32_t tgt = targets.data[(size_t)r];
                    for (int64_t i = 0; i < a; ++i) {
                        T sm = (T)(std::exp((double)(row[i] - mx)) / se);
                        T p = (i == tgt) ? on_prob : off_prob;
                        gxr[i] += w * (sm - p);
                    }
                }
            };
        }
        return id;
    }

    // Mean squared error, optionally masked.
    Id mse(Id a, Id b, Array<T> mask) {
        Id d = sub(a, b);
        return masked_mean(mul(d, d), std::move(mask));
    }

    // ---- driver ----

    void backward(Id root) {
        detail::check(val(root).numel() == 1, "backward: root must be scalar");
        grad_buf(root).data[0] = T(1);
        for (Id i = root; i >= 0; --i) {
            Node& n = nodes_[(size_t)i];
            if (!n.needs_grad || n.grad.data.empty() || !n.back) continue;
            n.back(*this);
        }
    }

    Array<T>& grad_buf(Id id) {
        Node& n = nodes_[(size_t)id];
        if (n.grad.data.empty()) n.grad = Array<T>::zeros(n.val.shape);
        return n.grad;
    }

    void accumulate(Id id, const T* g, int64_t n) {
        if (!needs_grad(id)) return;
        Array<T>& dst = grad_buf(id);
        for (int64_t i = 0; i < n; ++i) dst.data[(size_t)i] += g[i];
    }
    void accumulate_scaled(Id id, const T* g, int64_t n, T c) {
        if (!needs_grad(id)) return;
        Array<T>& dst = grad_buf(id);
        for (int64_t i = 0; i < n; ++i) dst.data[(size_t)i] += c * g[i];
    }

private:
    static void softmax_row(T* row, int64_t a) {
        T mx = row[0];
        for (int64_t i = 1; i < a; ++i) mx = std::max(mx, row[i]);
        double s = 0;
        for (int64_t i = 0; i < a; ++i) {
            row[i] = std::exp(row[i] - mx);
            s += row[i];
        }
        T inv = T(1.0 / s);
        for (int64_t i = 0; i < a; ++i) row[i] *= inv;
    }

    Id bmm(Id a, Id b, bool transpose_b) {
        const Array<T>& av = val(a);
        const Array<T>& bv = val(b);
        detail::check(av.shape.size() == 3 && bv.shape.size() == 3 && av.shape[0] == bv.shape[0],
                      "bmm: need matching 3-d batches, " + av.shape_str() + " vs " + bv.shape_str());
        int64_t batches = av.shape[0], m = av.shape[1], k = av.shape[2];
        int64_t n = transpose_b ? bv.shape[1] : bv.shape[2];
        detail::check(transpose_b ? bv.shape[2] == k : bv.shape[1] == k, "bmm: inner dim mismatch");
        Array<T> out = Array<T>::zeros({batches, m, n});
        detail::gemm_batch(transpose_b ? detail::Gemm::NT : detail::Gemm::NN, batches, m, n, k,
                           av.data.data(), bv.data.data(), out.data.data(), false);
        bool ng = needs_grad(a) || needs_grad(b);
        Id id = leaf(std::move(out), ng);
        if (ng) {
            nodes_.back().back = [a, b, id, transpose_b, batches, m, n, k](Tape& t) {
                const Array<T>& g = t.grad(id);
                if (!transpose_b) {
                    // dA = dC @ B^T ; dB = A^T @ dC
                    if (t.needs_grad(a))
                        detail::gemm_batch(detail::Gemm::NT, batches, m, k, n, g.data.data(),
                                           t.val(b).data.data(), t.grad_buf(a).data.data(), true);
                    if (t.needs_grad(b))
                        detail::gemm_batch(detail::Gemm::TN, batches, m, n, k, t.val(a).data.data(),
                                           g.data.data(), t.grad_buf(b).data.data(), true);
                } else {
                    // C = A @ B^T: dA = dC @ B ; dB = dC^T @ A
                    if (t.needs_grad(a))
                        detail::gemm_batch(detail::Gemm::NN, batches, m, k, n, g.data.data(),
                                           t.val(b).data.data(), t.grad_buf(a).data.data(), true);
                    if (t.needs_grad(b))
                        detail::gemm_batch(detail::Gemm::TN, batches, m, k, n, g.data.data(),
                                           t.val(a).data.data(), t.grad_buf(b).data.data(), true);
                }
            };
        }
        return id;
    }

    template <typename F>
    Id unary_or_binary(Array<T> out, Id a, Id b, F&& back_fn) {
        bool ng = needs_grad(a) || needs_grad(b);
        Id id = leaf(std::move(out), ng);
        if (ng) {
            nodes_.back().back = [a, b, id, back_fn](Tape& t) { back_fn(t, id, a, b); };
        }
        return id;
    }

    void shape_match(Id a, Id b, const char* op) {
        detail::check(val(a).same_shape(val(b)), std::string(op) + ": shape mismatch " + val(a).shape_str() +
                                                     " vs " + val(b).shape_str());
    }
    void shape_match_arr(Id a, const Array<T>& c, const char* op) {
        detail::check(val(a).shape == c.shape, std::string(op) + ": shape mismatch " + val(a).shape_str() +
                                                   " vs const " + c.shape_str());
    }

    std::vector<Node> nodes_;
};

// ---- parameters and optimizer ----

template <typename T>
struct Param {
    std::string name;
    Array<T> value;
    Array<T> grad;
};

template <typename T>
struct ParamStore {
    std::vector<Param<T>> items;

    Param<T>& add(const std::string& name, Array<T> init) {
        items.push_back(Param<T>{name, std::move(init), {}});
        auto& p = items.back();
        p.grad = Array<T>::zeros(p.value.shape);
        return p;
    }
    Param<T>* find(const std::string& name) {
        for (auto& p : items)
            if (p.name == name) return &p;
        return nullptr;
    }
    void zero_grads() {
        for (auto& p : items) std::fill(p.grad.data.begin(), p.grad.data.end(), T(0));
    }
    int64_t total_size() const {
        int64_t n = 0;
        for (auto& p : items) n += p.value.numel();
        return n;
    }
};

// Adam with bias correction; betas default to the training setup (0.9, 0.99).
template <typename T>
struct AdamState {
    T lr = T(3e-4);
    T beta1 = T(0.9);
    T beta2 = T(0.99);
    T eps = T(1e-8);
    int64_t step_count = 0;
    std::vector<Array<T>> m, v;

    void init(const ParamStore<T>& params) {
        m.clear();
        v.clear();
        for (auto& p : params.items) {
            m.push_back(Array<T>::zeros(p.value.shape));
            v.push_back(Array<T>::zeros(p.value.shape));
        }
        step_count = 0;
    }
};

template <typename T>
void adam_step(ParamStore<T>& params, AdamState<T>& st) {
    detail::check(st.m.size() == params.items.size(), "adam_step: state not initialized");
    ++st.step_count;
    const T bc1 = T(1) - std::pow(st.beta1, (T)st.step_count);
    const T bc2 = T(1) - std::pow(st.beta2, (T)st.step_count);
    for (size_t pi = 0; pi < params.items.size(); ++pi) {
        auto& p = params.items[pi];
        T* m = st.m[pi].data.data();
        T* v = st.v[pi].data.data();
        const T* g = p.grad.data.data();
        T* w = p.value.data.data();
        for (int64_t i = 0; i < p.value.numel(); ++i) {
            m[i] = st.beta1 * m[i] + (T(1) - st.beta1) * g[i];
            v[i] = st.beta2 * v[i] + (T(1) - st.beta2) * g[i] * g[i];
            T mhat = m[i] / bc1;
            T vhat = v[i] / bc2;
            w[i] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
        }
    }
}

// Global-norm clipping; returns the applied scale (1 when within bound).
template <typename T>
T clip_grad_norm(ParamStore<T>& params, T max_norm) {
    detail::check(max_norm > T(0), "clip_grad_norm: max_norm must be positive");
    double sq = 0;
    for (auto& p : params.items)
        for (T g : p.grad.data) sq += (double)g * g;
    double norm = std::sqrt(sq);
    if (norm <= (double)max_norm || norm == 0.0) return T(1);
    T scale = (T)((double)max_norm / norm);
    for (auto& p : params.items)
        for (auto& g : p.grad.data) g *= scale;
    return scale;
}

// ---- verification harness ----

// Central-difference check of d(build)/d(params) against the tape gradient.
// build must construct the scalar loss from leaf ids in the given order.
template <typename T>
double grad_check(const std::function<typename Tape<T>::Id(Tape<T>&, const std::vector<typename Tape<T>::Id>&)>& build,
                  std::vector<Array<T>> params, T eps) {
    detail::check(eps > T(0), "grad_check: eps must be positive");
    auto eval = [&](const std::vector<Array<T>>& pv) {
        Tape<T> tape;
        std::vector<typename Tape<T>::Id> ids;
        ids.reserve(pv.size());
        for (auto& p : pv) ids.push_back(tape.leaf(p, false));
        auto root = build(tape, ids);
        T out = tape.val(root).data[0];
        if (!std::isfinite((double)out)) throw NumericalError("grad_check: non-finite loss value");
        return out;
    };

    Tape<T> tape;
    std::vector<typename Tape<T>::Id> ids;
    for (auto& p : params) ids.push_back(tape.leaf(p, true));
    auto root = build(tape, ids);
    tape.backward(root);

    double max_rel = 0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        const Array<T>& g = tape.grad(ids[pi]).data.empty() ? Array<T>::zeros(params[pi].shape)
                                                            : tape.grad(ids[pi]);
        for (int64_t i = 0; i < params[pi].numel(); ++i) {
            T saved = params[pi].data[(size_t)i];
            params[pi].data[(size_t)i] = saved + eps;
            double fp = eval(params);
            params[pi].data[(size_t)i] = saved - eps;
            double fm = eval(params);
            params[pi].data[(size_t)i] = saved;
            double fd = (fp - fm) / (2.0 * (double)eps);
            double ad = (double)g.data[(size_t)i];
            if (!std::isfinite(fd) || !std::isfinite(ad)) throw NumericalError("grad_check: non-finite gradient");
            double denom = std::max({1.0, std::abs(fd), std::abs(ad)});
            max_rel = std::max(max_rel, std::abs(fd - ad) / denom);
        }
    }
    return max_rel;
}

}  // namespace icrl
