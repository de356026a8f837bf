#include "tensor/ops.hpp"

#include "common/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace bimors {

namespace {

using detail::Node;
using BackwardFn = std::function<void(Node&)>;

Tensor make_result(const char* op, Shape shape, std::vector<float> value, std::initializer_list<const Tensor*> inputs,
                   BackwardFn fn) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    node->is_leaf = false;
    bool needs = false;
    if (grad_enabled())
        for (const Tensor* t : inputs) needs = needs || t->requires_grad();
    if (needs) {
        node->requires_grad = true;
        for (const Tensor* t : inputs) node->inputs.push_back(t->node());
        node->backward = std::move(fn);
    }
    return Tensor::from_node(std::move(node));
}

Tensor make_result_n(const char* op, Shape shape, std::vector<float> value, std::span<const Tensor> inputs,
                     BackwardFn fn) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    node->is_leaf = false;
    bool needs = false;
    if (grad_enabled())
        for (const Tensor& t : inputs) needs = needs || t.requires_grad();
    if (needs) {
        node->requires_grad = true;
        for (const Tensor& t : inputs) node->inputs.push_back(t.node());
        node->backward = std::move(fn);
    }
    return Tensor::from_node(std::move(node));
}

// Gradient sink for input i, or nullptr when that input is frozen.
float* sink(Node& self, std::size_t i) {
    Node& in = *self.inputs[i];
    return in.requires_grad ? in.grad_buffer() : nullptr;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        fail(ErrorCode::shape, std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_rank(const char* op, const Tensor& x, std::size_t rank) {
    if (x.rank() != rank)
        fail(ErrorCode::shape, std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(x.shape()));
}

std::size_t last_dim(const Tensor& x) { return x.shape().back(); }

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    auto mismatch = [&] {
        fail(ErrorCode::shape, "matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
    };
    if (sa.size() < 2 || sb.size() < 2 || sa.size() != sb.size()) mismatch();
    const std::size_t r = sa.size();
    if (!std::equal(sa.begin(), sa.end() - 2, sb.begin())) mismatch();
    const std::size_t m = sa[r - 2], k = sa[r - 1], n = sb[r - 1];
    if (sb[r - 2] != k) mismatch();
    const std::size_t batch = shape_numel(Shape(sa.begin(), sa.end() - 2));

    Shape out_shape(sa.begin(), sa.end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<float> out(batch * m * n, 0.0f);
    const float* A = a.data().data();
    const float* B = b.data().data();
    for (std::size_t t = 0; t < batch; ++t) {
        const float* At = A + t * m * k;
        const float* Bt = B + t * k * n;
        float* Ct = out.data() + t * m * n;
        for (std::size_t i = 0; i < m; ++i) {
            float* crow = Ct + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const float av = At[i * k + p];
                const float* brow = Bt + p * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
    return make_result("matmul", std::move(out_shape), std::move(out), {&a, &b}, [batch, m, k, n](Node& self) {
        const float* G = self.grad.data();
        const float* A = self.inputs[0]->value.data();
        const float* B = self.inputs[1]->value.data();
        if (float* dA = sink(self, 0)) {
            for (std::size_t t = 0; t < batch; ++t)
                for (std::size_t i = 0; i < m; ++i) {
                    const float* grow = G + t * m * n + i * n;
                    for (std::size_t p = 0; p < k; ++p) {
                        const float* brow = B + t * k * n + p * n;
                        float acc = 0.0f;
                        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        dA[t * m * k + i * k + p] += acc;
                    }
                }
        }
        if (float* dB = sink(self, 1)) {
            for (std::size_t t = 0; t < batch; ++t)
                for (std::size_t i = 0; i < m; ++i) {
                    const float* grow = G + t * m * n + i * n;
                    for (std::size_t p = 0; p < k; ++p) {
                        const float av = A[t * m * k + i * k + p];
                        float* drow = dB + t * k * n + p * n;
                        for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
                    }
                }
        }
    });
}

Tensor transpose(const Tensor& x) {
    if (x.rank() < 2) fail(ErrorCode::shape, "transpose: rank < 2 for " + shape_str(x.shape()));
    Shape s = x.shape();
    const std::size_t r = s.size();
    const std::size_t rows = s[r - 2], cols = s[r - 1];
    const std::size_t batch = x.numel() / (rows * cols);
    std::swap(s[r - 2], s[r - 1]);
    std::vector<float> out(x.numel());
    const float* X = x.data().data();
    for (std::size_t t = 0; t < batch; ++t)
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) out[t * rows * cols + j * rows + i] = X[t * rows * cols + i * cols + j];
    return make_result("transpose", std::move(s), std::move(out), {&x}, [batch, rows, cols](Node& self) {
        float* dX = sink(self, 0);
        const float* G = self.grad.data();
        for (std::size_t t = 0; t < batch; ++t)
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j)
                    dX[t * rows * cols + i * cols + j] += G[t * rows * cols + j * rows + i];
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        fail(ErrorCode::shape, "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    for (auto d : shape)
        if (d == 0) fail(ErrorCode::shape, "reshape: zero dimension in " + shape_str(shape));
    std::vector<float> out(x.data().begin(), x.data().end());
    return make_result("reshape", std::move(shape), std::move(out), {&x}, [](Node& self) {
        float* dX = sink(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) dX[i] += self.grad[i];
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return make_result("add", a.shape(), std::move(out), {&a, &b}, [](Node& self) {
        for (std::size_t k = 0; k < 2; ++k)
            if (float* d = sink(self, k))
                for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return make_result("sub", a.shape(), std::move(out), {&a, &b}, [](Node& self) {
        if (float* d = sink(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
        if (float* d = sink(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] -= self.grad[i];
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<float> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return make_result("mul", a.shape(), std::move(out), {&a, &b}, [](Node& self) {
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        if (float* d = sink(self, 0))
            for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * bv[i];
        if (float* d = sink(self, 1))
            for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * av[i];
    });
}

Tensor neg(const Tensor& x) {
    std::vector<float> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = -x.data()[i];
    return make_result("neg", x.shape(), std::move(out), {&x}, [](Node& self) {
        float* d = sink(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] -= self.grad[i];
    });
}

Tensor scale(const Tensor& x, float factor) {
    std::vector<float> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
    return make_result("scale", x.shape(), std::move(out), {&x}, [factor](Node& self) {
        float* d = sink(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * factor;
    });
}

Tensor add_row(const Tensor& x, const Tensor& row) {
    const std::size_t n = last_dim(x);
    if (row.numel() != n || last_dim(row) != n)
        fail(ErrorCode::shape, "add_row: row " + shape_str(row.shape()) + " does not match last dim of " + shape_str(x.shape()));
    const std::size_t rows = x.numel() / n;
    std::vector<float> out(x.numel());
    const float* X = x.data().data();
    const float* R = row.data().data();
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = X[i * n + j] + R[j];
    return make_result("add_row", x.shape(), std::move(out), {&x, &row}, [rows, n](Node& self) {
        const float* G = self.grad.data();
        if (float* d = sink(self, 0))
            for (std::size_t i = 0; i < rows * n; ++i) d[i] += G[i];
        if (float* d = sink(self, 1))
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < n; ++j) d[j] += G[i * n + j];
    });
}

Tensor relu(const Tensor& x) {
    std::vector<float> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > 0.0f ? x.data()[i] : 0.0f;
    return make_result("relu", x.shape(), std::move(out), {&x}, [](Node& self) {
        float* d = sink(self, 0);
        const auto& xv = self.inputs[0]->value;
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (xv[i] > 0.0f) d[i] += self.grad[i];
    });
}

Tensor gelu_quick(const Tensor& x) {
    constexpr float kAlpha = 1.702f;
    std::vector<float> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const float v = x.data()[i];
        out[i] = v / (1.0f + std::exp(-kAlpha * v));
    }
    return make_result("gelu_quick", x.shape(), std::move(out), {&x}, [](Node& self) {
        float* d = sink(self, 0);
        const auto& xv = self.inputs[0]->value;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const float s = 1.0f / (1.0f + std::exp(-kAlpha * xv[i]));
            d[i] += self.grad[i] * (s + kAlpha * xv[i] * s * (1.0f - s));
        }
    });
}

Tensor softmax_lastdim(const Tensor& x) {
    const std::size_t n = last_dim(x);
    const std::size_t rows = x.numel() / n;
    std::vector<float> out(x.numel());
    const float* X = x.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xr = X + r * n;
        float* yr = out.data() + r * n;
        const float mx = *std::max_element(xr, xr + n);
        float total = 0.0f;
        for (std::size_t j = 0; j < n; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            total += yr[j];
        }
        const float inv = 1.0f / total;
        for (std::size_t j = 0; j < n; ++j) yr[j] *= inv;
    }
    return make_result("softmax", x.shape(), std::move(out), {&x}, [rows, n](Node& self) {
        float* d = sink(self, 0);
        const float* Y = self.value.data();
        const float* G = self.grad.data();
        for (std::size_t r = 0; r < rows; ++r) {
            float dot = 0.0f;
            for (std::size_t j = 0; j < n; ++j) dot += G[r * n + j] * Y[r * n + j];
            for (std::size_t j = 0; j < n; ++j) d[r * n + j] += Y[r * n + j] * (G[r * n + j] - dot);
        }
    });
}

Tensor causal_mask(const Tensor& x) {
    if (x.rank() < 2 || x.dim(-1) != x.dim(-2))
        fail(ErrorCode::shape, "causal_mask: trailing block must be square, got " + shape_str(x.shape()));
    const std::size_t L = x.dim(-1);
    const std::size_t batch = x.numel() / (L * L);
    std::vector<float> out(x.data().begin(), x.data().end());
    for (std::size_t t = 0; t < batch; ++t)
        for (std::size_t i = 0; i < L; ++i)
            for (std::size_t j = i + 1; j < L; ++j) out[t * L * L + i * L + j] = -std::numeric_limits<float>::infinity();
    return make_result("causal_mask", x.shape(), std::move(out), {&x}, [batch, L](Node& self) {
        float* d = sink(self, 0);
        for (std::size_t t = 0; t < batch; ++t)
            for (std::size_t i = 0; i < L; ++i)
                for (std::size_t j = 0; j <= i; ++j) d[t * L * L + i * L + j] += self.grad[t * L * L + i * L + j];
    });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
    const std::size_t n = last_dim(x);
    if (gain.numel() != n || bias.numel() != n)
        fail(ErrorCode::shape, "layernorm: gain " + shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()) +
                                   " do not match last dim of " + shape_str(x.shape()));
    const std::size_t rows = x.numel() / n;
    std::vector<float> out(x.numel());
    std::vector<float> xhat(x.numel());
    std::vector<float> rstd(rows);
    const float* X = x.data().data();
    const float* Gm = gain.data().data();
    const float* Bs = bias.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xr = X + r * n;
        float mean = 0.0f;
        for (std::size_t j = 0; j < n; ++j) mean += xr[j];
        mean /= static_cast<float>(n);
        float var = 0.0f;
        for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<float>(n);
        rstd[r] = 1.0f / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[r * n + j] = (xr[j] - mean) * rstd[r];
            out[r * n + j] = xhat[r * n + j] * Gm[j] + Bs[j];
        }
    }
    return make_result("layernorm", x.shape(), std::move(out), {&x, &gain, &bias},
                       [rows, n, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                           const float* G = self.grad.data();
                           const float* Gm = self.inputs[1]->value.data();
                           if (float* dX = sink(self, 0)) {
                               const float inv_n = 1.0f / static_cast<float>(n);
                               for (std::size_t r = 0; r < rows; ++r) {
                                   float mean_dxh = 0.0f, mean_dxh_xh = 0.0f;
                                   for (std::size_t j = 0; j < n; ++j) {
                                       const float dxh = G[r * n + j] * Gm[j];
                                       mean_dxh += dxh;
                                       mean_dxh_xh += dxh * xhat[r * n + j];
                                   }
                                   mean_dxh *= inv_n;
                                   mean_dxh_xh *= inv_n;
                                   for (std::size_t j = 0; j < n; ++j) {
                                       const float dxh = G[r * n + j] * Gm[j];
                                       dX[r * n + j] += rstd[r] * (dxh - mean_dxh - xhat[r * n + j] * mean_dxh_xh);
                                   }
                               }
                           }
                           if (float* dG = sink(self, 1))
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < n; ++j) dG[j] += G[r * n + j] * xhat[r * n + j];
                           if (float* dB = sink(self, 2))
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < n; ++j) dB[j] += G[r * n + j];
                       });
}

Tensor sum(const Tensor& x) {
    float total = 0.0f;
    for (float v : x.data()) total += v;
    return make_result("sum", {1}, {total}, {&x}, [](Node& self) {
        float* d = sink(self, 0);
        const float g = self.grad[0];
        for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) d[i] += g;
    });
}

Tensor mean_rows(const Tensor& x) {
    require_rank("mean_rows", x, 2);
    const std::size_t rows = x.dim(0), n = x.dim(1);
    std::vector<float> out(n, 0.0f);
    const float* X = x.data().data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) out[j] += X[r * n + j];
    const float inv = 1.0f / static_cast<float>(rows);
    for (auto& v : out) v *= inv;
    return make_result("mean_rows", {1, n}, std::move(out), {&x}, [rows, n, inv](Node& self) {
        float* d = sink(self, 0);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) d[r * n + j] += self.grad[j] * inv;
    });
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) fail(ErrorCode::shape, "concat_rows: no inputs");
    const std::size_t n = parts.front().dim(-1);
    std::size_t rows = 0;
    std::vector<std::size_t> offsets;
    for (const Tensor& p : parts) {
        require_rank("concat_rows", p, 2);
        if (p.dim(1) != n)
            fail(ErrorCode::shape, "concat_rows: width " + std::to_string(p.dim(1)) + " differs from " + std::to_string(n));
        offsets.push_back(rows * n);
        rows += p.dim(0);
    }
    std::vector<float> out;
    out.reserve(rows * n);
    for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return make_result_n("concat_rows", {rows, n}, std::move(out), parts, [offsets = std::move(offsets)](Node& self) {
        for (std::size_t k = 0; k < self.inputs.size(); ++k)
            if (float* d = sink(self, k)) {
                const std::size_t count = self.inputs[k]->value.size();
                for (std::size_t i = 0; i < count; ++i) d[i] += self.grad[offsets[k] + i];
            }
    });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
    require_rank("slice_rows", x, 2);
    if (begin >= end || end > x.dim(0))
        fail(ErrorCode::index, "slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                                   ") invalid for " + shape_str(x.shape()));
    const std::size_t n = x.dim(1);
    std::vector<float> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
                           x.data().begin() + static_cast<std::ptrdiff_t>(end * n));
    return make_result("slice_rows", {end - begin, n}, std::move(out), {&x}, [begin, n](Node& self) {
        float* d = sink(self, 0) + begin * n;
        for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
    });
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
    require_rank("split_heads", x, 2);
    const std::size_t L = x.dim(0), width = x.dim(1);
    if (heads == 0 || width % heads != 0)
        fail(ErrorCode::shape, "split_heads: width " + std::to_string(width) + " not divisible by " + std::to_string(heads));
    const std::size_t dh = width / heads;
    std::vector<float> out(x.numel());
    const float* X = x.data().data();
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t k = 0; k < dh; ++k) out[(h * L + l) * dh + k] = X[l * width + h * dh + k];
    return make_result("split_heads", {heads, L, dh}, std::move(out), {&x}, [heads, L, dh, width](Node& self) {
        float* d = sink(self, 0);
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t l = 0; l < L; ++l)
                for (std::size_t k = 0; k < dh; ++k) d[l * width + h * dh + k] += self.grad[(h * L + l) * dh + k];
    });
}

Tensor merge_heads(const Tensor& x) {
    require_rank("merge_heads", x, 3);
    const std::size_t heads = x.dim(0), L = x.dim(1), dh = x.dim(2);
    const std::size_t width = heads * dh;
    std::vector<float> out(x.numel());
    const float* X = x.data().data();
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t k = 0; k < dh; ++k) out[l * width + h * dh + k] = X[(h * L + l) * dh + k];
    return make_result("merge_heads", {L, width}, std::move(out), {&x}, [heads, L, dh, width](Node& self) {
        float* d = sink(self, 0);
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t l = 0; l < L; ++l)
                for (std::size_t k = 0; k < dh; ++k) d[(h * L + l) * dh + k] += self.grad[l * width + h * dh + k];
    });
}

Tensor l2_normalize_rows(const Tensor& x) {
    const std::size_t n = last_dim(x);
    const std::size_t rows = x.numel() / n;
    std::vector<float> out(x.numel());
    std::vector<float> norms(rows);
    const float* X = x.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        float ss = 0.0f;
        for (std::size_t j = 0; j < n; ++j) ss += X[r * n + j] * X[r * n + j];
        norms[r] = std::max(std::sqrt(ss), 1e-12f);
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = X[r * n + j] / norms[r];
    }
    return make_result("l2_normalize", x.shape(), std::move(out), {&x}, [rows, n, norms = std::move(norms)](Node& self) {
        float* d = sink(self, 0);
        const float* Y = self.value.data();
        const float* G = self.grad.data();
        for (std::size_t r = 0; r < rows; ++r) {
            float dot = 0.0f;
            for (std::size_t j = 0; j < n; ++j) dot += Y[r * n + j] * G[r * n + j];
            for (std::size_t j = 0; j < n; ++j) d[r * n + j] += (G[r * n + j] - Y[r * n + j] * dot) / norms[r];
        }
    });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
    require_rank("gather_rows", table, 2);
    if (ids.empty()) fail(ErrorCode::shape, "gather_rows: empty id list");
    const std::size_t vocab = table.dim(0), n = table.dim(1);
    std::vector<float> out;
    out.reserve(ids.size() * n);
    const float* T = table.data().data();
    for (auto id : ids) {
        if (id >= vocab)
            fail(ErrorCode::index, "gather_rows: id " + std::to_string(id) + " outside table of " + std::to_string(vocab) + " rows");
        out.insert(out.end(), T + id * n, T + (id + 1) * n);
    }
    std::vector<std::size_t> saved(ids.begin(), ids.end());
    return make_result("gather_rows", {ids.size(), n}, std::move(out), {&table}, [n, saved = std::move(saved)](Node& self) {
        float* d = sink(self, 0);
        for (std::size_t r = 0; r < saved.size(); ++r)
            for (std::size_t j = 0; j < n; ++j) d[saved[r] * n + j] += self.grad[r * n + j];
    });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
    require_rank("cross_entropy", logits, 2);
    const std::size_t B = logits.dim(0), C = logits.dim(1);
    if (labels.size() != B)
        fail(ErrorCode::shape, "cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(B));
    for (auto y : labels)
        if (y >= C) fail(ErrorCode::index, "cross_entropy: label " + std::to_string(y) + " outside [0," + std::to_string(C) + ")");
    const float* X = logits.data().data();
    std::vector<float> probs(B * C);
    float total = 0.0f;
    for (std::size_t b = 0; b < B; ++b) {
        const float* xr = X + b * C;
        const float mx = *std::max_element(xr, xr + C);
        float z = 0.0f;
        for (std::size_t c = 0; c < C; ++c) {
            probs[b * C + c] = std::exp(xr[c] - mx);
            z += probs[b * C + c];
        }
        for (std::size_t c = 0; c < C; ++c) probs[b * C + c] /= z;
        total += (mx + std::log(z)) - xr[labels[b]];
    }
    const float inv_b = 1.0f / static_cast<float>(B);
    std::vector<std::size_t> saved(labels.begin(), labels.end());
    return make_result("cross_entropy", {1}, {total * inv_b}, {&logits},
                       [B, C, inv_b, probs = std::move(probs), saved = std::move(saved)](Node& self) {
                           float* d = sink(self, 0);
                           const float g = self.grad[0] * inv_b;
                           for (std::size_t b = 0; b < B; ++b)
                               for (std::size_t c = 0; c < C; ++c)
                                   d[b * C + c] += g * (probs[b * C + c] - (c == saved[b] ? 1.0f : 0.0f));
                       });
}

} // namespace bimors
