#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mamlab/tensor.hpp"

// Differentiable primitives. Every function returns a fresh tensor; when recording is on and an
// input requires a gradient, the result carries the adjoint rule for the operation.

namespace mamlab {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using MatrixMap = Eigen::Map<RowMatrix>;

// Gradient buffer of parent `i`, or nullptr when that parent is a constant.
inline double* parent_grad(Node& self, std::size_t i) {
    Node& p = *self.parents[i];
    return p.requires_grad ? p.grad_buffer().data() : nullptr;
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                             shape_str(t.shape()));
    }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

// Elementwise unary op with derivative computed from (input, output).
template <class F, class D>
Tensor unary(const Tensor& x, F f, D dfdx) {
    std::vector<double> out(x.numel());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
    return Tensor::make_result(x.shape(), std::move(out), {x}, [dfdx](Node& self) {
        double* gx = parent_grad(self, 0);
        if (!gx) return;
        const auto& xin = self.parents[0]->value;
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * dfdx(xin[i], self.value[i]);
    });
}

} // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::vector<double> out(m * n);
    detail::MatrixMap(out.data(), m, n).noalias() =
        detail::ConstMatrixMap(a.data().data(), m, k) * detail::ConstMatrixMap(b.data().data(), k, n);
    return Tensor::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
        detail::ConstMatrixMap dc(self.grad.data(), m, n);
        if (double* ga = detail::parent_grad(self, 0)) {
            detail::ConstMatrixMap bv(self.parents[1]->value.data(), k, n);
            detail::MatrixMap(ga, m, k).noalias() += dc * bv.transpose();
        }
        if (double* gb = detail::parent_grad(self, 1)) {
            detail::ConstMatrixMap av(self.parents[0]->value.data(), m, k);
            detail::MatrixMap(gb, k, n).noalias() += av.transpose() * dc;
        }
    });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        for (std::size_t p = 0; p < 2; ++p) {
            if (double* g = detail::parent_grad(self, p)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
            }
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        if (double* g = detail::parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
        if (double* g = detail::parent_grad(self, 1)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        if (double* g = detail::parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
        }
        if (double* g = detail::parent_grad(self, 1)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
        }
    });
}

inline Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x.data()[i];
    return Tensor::make_result(x.shape(), std::move(out), {x}, [c](detail::Node& self) {
        if (double* g = detail::parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += c * self.grad[i];
        }
    });
}

inline Tensor square(const Tensor& x) {
    return detail::unary(
        x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// x[N×D] + bias broadcast over rows; bias has shape [D] or [1×D].
inline Tensor add_row(const Tensor& x, const Tensor& bias) {
    detail::require_rank(x, 2, "add_row");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (bias.numel() != d || bias.rank() > 2 || (bias.rank() == 2 && bias.dim(0) != 1)) {
        throw DimensionError("add_row: bias " + shape_str(bias.shape()) + " does not broadcast over " +
                             shape_str(x.shape()));
    }
    std::vector<double> out(x.values());
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) out[r * d + c] += bias.data()[c];
    }
    return Tensor::make_result(x.shape(), std::move(out), {x, bias}, [n, d](detail::Node& self) {
        if (double* g = detail::parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
        if (double* g = detail::parent_grad(self, 1)) {
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t c = 0; c < d; ++c) g[c] += self.grad[r * d + c];
            }
        }
    });
}

inline Tensor transpose(const Tensor& x) {
    detail::require_rank(x, 2, "transpose");
    const std::size_t r = x.dim(0), c = x.dim(1);
    std::vector<double> out(r * c);
    detail::MatrixMap(out.data(), c, r) = detail::ConstMatrixMap(x.data().data(), r, c).transpose();
    return Tensor::make_result({c, r}, std::move(out), {x}, [r, c](detail::Node& self) {
        if (double* g = detail::parent_grad(self, 0)) {
            detail::MatrixMap(g, r, c) += detail::ConstMatrixMap(self.grad.data(), c, r).transpose();
        }
    });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    return Tensor::make_result(std::move(shape), x.values(), {x}, [](detail::Node& self) {
        if (double* g = detail::parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
    });
}

// Stacks 2-D tensors with equal column counts. Zero-row parts are allowed.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    const std::size_t d = parts[0].dim(1);
    std::size_t rows = 0;
    for (const Tensor& p : parts) {
        detail::require_rank(p, 2, "concat_rows");
        if (p.dim(1) != d) {
            throw DimensionError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " +
                                 shape_str(p.shape()));
        }
        rows += p.dim(0);
    }
    std::vector<double> out;
    out.reserve(rows * d);
    for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return Tensor::make_result({rows, d}, std::move(out), parts, [](detail::Node& self) {
        std::size_t offset = 0;
        for (std::size_t p = 0; p < self.parents.size(); ++p) {
            const std::size_t n = self.parents[p]->value.size();
            if (double* g = detail::parent_grad(self, p)) {
                for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
            }
            offset += n;
        }
    });
}

// Selects rows by index; repeated indices accumulate their adjoints.
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& indices) {
    detail::require_rank(x, 2, "gather_rows");
    const std::size_t n = x.dim(0), d = x.dim(1);
    std::vector<double> out(indices.size() * d);
    for (std::size_t r = 0; r < indices.size(); ++r) {
        if (indices[r] >= n) {
            throw DimensionError("gather_rows: index " + std::to_string(indices[r]) + " out of range for " +
                                 shape_str(x.shape()));
        }
        std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(indices[r] * d), d, out.begin() + r * d);
    }
    return Tensor::make_result({indices.size(), d}, std::move(out), {x}, [indices, d](detail::Node& self) {
        if (double* g = detail::parent_grad(self, 0)) {
            for (std::size_t r = 0; r < indices.size(); ++r) {
                for (std::size_t c = 0; c < d; ++c) g[indices[r] * d + c] += self.grad[r * d + c];
            }
        }
    });
}

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return Tensor::make_result({}, {s}, {x}, [](detail::Node& self) {
        if (double* g = detail::parent_grad(self, 0)) {
            const std::size_t n = self.parents[0]->value.size();
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
        }
    });
}

inline Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw DimensionError("mean: empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

// Column means of a 2-D tensor: [N×D] -> [1×D].
inline Tensor mean_rows(const Tensor& x) {
    detail::require_rank(x, 2, "mean_rows");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (n == 0) throw DimensionError("mean_rows: no rows");
    std::vector<double> out(d, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) out[c] += x.data()[r * d + c];
    }
    for (double& v : out) v /= static_cast<double>(n);
    return Tensor::make_result({1, d}, std::move(out), {x}, [n, d](detail::Node& self) {
        if (double* g = detail::parent_grad(self, 0)) {
            const double inv = 1.0 / static_cast<double>(n);
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t c = 0; c < d; ++c) g[r * d + c] += self.grad[c] * inv;
            }
        }
    });
}

inline Tensor relu(const Tensor& x) {
    return detail::unary(
        x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

// tanh approximation.
inline Tensor gelu(const Tensor& x) {
    constexpr double c = 0.7978845608028654; // sqrt(2/pi)
    constexpr double k = 0.044715;
    return detail::unary(
        x,
        [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + k * v * v * v))); },
        [](double v, double) {
            const double t = std::tanh(c * (v + k * v * v * v));
            return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * k * v * v);
        });
}

// log(1 + e^x), stable for large |x|.
inline Tensor softplus(const Tensor& x) {
    return detail::unary(
        x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
        [](double v, double) { return 1.0 / (1.0 + std::exp(-v)); });
}

namespace detail {

inline void row_softmax(const double* in, double* out, std::size_t d) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < d; ++c) mx = std::max(mx, in[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
        out[c] = std::exp(in[c] - mx);
        z += out[c];
    }
    for (std::size_t c = 0; c < d; ++c) out[c] /= z;
}

} // namespace detail

// Softmax over the last axis.
inline Tensor softmax_rows(const Tensor& x) {
    const std::size_t d = x.cols();
    const std::size_t n = x.numel() / d;
    std::vector<double> out(x.numel());
    for (std::size_t r = 0; r < n; ++r) detail::row_softmax(x.data().data() + r * d, out.data() + r * d, d);
    return Tensor::make_result(x.shape(), std::move(out), {x}, [n, d](detail::Node& self) {
        if (double* g = detail::parent_grad(self, 0)) {
            for (std::size_t r = 0; r < n; ++r) {
                const double* y = self.value.data() + r * d;
                const double* dy = self.grad.data() + r * d;
                double dot = 0.0;
                for (std::size_t c = 0; c < d; ++c) dot += dy[c] * y[c];
                for (std::size_t c = 0; c < d; ++c) g[r * d + c] += y[c] * (dy[c] - dot);
            }
        }
    });
}

// Log-softmax over the last axis.
inline Tensor log_softmax_rows(const Tensor& x) {
    const std::size_t d = x.cols();
    const std::size_t n = x.numel() / d;
    std::vector<double> out(x.numel());
    for (std::size_t r = 0; r < n; ++r) {
        const double* in = x.data().data() + r * d;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < d; ++c) mx = std::max(mx, in[c]);
        double z = 0.0;
        for (std::size_t c = 0; c < d; ++c) z += std::exp(in[c] - mx);
        const double lse = mx + std::log(z);
        for (std::size_t c = 0; c < d; ++c) out[r * d + c] = in[c] - lse;
    }
    return Tensor::make_result(x.shape(), std::move(out), {x}, [n, d](detail::Node& self) {
        if (double* g = detail::parent_grad(self, 0)) {
            for (std::size_t r = 0; r < n; ++r) {
                const double* y = self.value.data() + r * d;
                const double* dy = self.grad.data() + r * d;
                double total = 0.0;
                for (std::size_t c = 0; c < d; ++c) total += dy[c];
                for (std::size_t c = 0; c < d; ++c) g[r * d + c] += dy[c] - std::exp(y[c]) * total;
            }
        }
    });
}

// Normalizes each row over the last axis, then applies gain and bias (both length D).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
    const std::size_t d = x.cols();
    if (gain.numel() != d || bias.numel() != d) {
        throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                             " do not match last axis of " + shape_str(x.shape()));
    }
    const std::size_t n = x.numel() / d;
    std::vector<double> out(x.numel());
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(n);
    for (std::size_t r = 0; r < n; ++r) {
        const double* in = x.data().data() + r * d;
        double mu = 0.0;
        for (std::size_t c = 0; c < d; ++c) mu += in[c];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t c = 0; c < d; ++c) var += (in[c] - mu) * (in[c] - mu);
        var /= static_cast<double>(d);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < d; ++c) {
            xhat[r * d + c] = (in[c] - mu) * inv_std[r];
            out[r * d + c] = xhat[r * d + c] * gain.data()[c] + bias.data()[c];
        }
    }
    return Tensor::make_result(
        x.shape(), std::move(out), {x, gain, bias},
        [n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
            const auto& g = self.parents[1]->value;
            double* gx = detail::parent_grad(self, 0);
            double* gg = detail::parent_grad(self, 1);
            double* gb = detail::parent_grad(self, 2);
            std::vector<double> dxhat(d);
            for (std::size_t r = 0; r < n; ++r) {
                const double* dy = self.grad.data() + r * d;
                const double* xh = xhat.data() + r * d;
                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                for (std::size_t c = 0; c < d; ++c) {
                    dxhat[c] = dy[c] * g[c];
                    mean_dxhat += dxhat[c];
                    mean_dxhat_xhat += dxhat[c] * xh[c];
                    if (gg) gg[c] += dy[c] * xh[c];
                    if (gb) gb[c] += dy[c];
                }
                mean_dxhat /= static_cast<double>(d);
                mean_dxhat_xhat /= static_cast<double>(d);
                if (gx) {
                    for (std::size_t c = 0; c < d; ++c) {
                        gx[r * d + c] += inv_std[r] * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
                    }
                }
            }
        });
}

// Running statistics carried by a batch-norm layer between calls.
struct BatchNormStats {
    std::vector<double> mean;
    std::vector<double> var;

    explicit BatchNormStats(std::size_t d = 0) : mean(d, 0.0), var(d, 1.0) {}
};

// Normalizes each column over the batch (row) axis. Training mode uses batch statistics and
// advances `stats` with the given momentum; eval mode uses `stats` as-is.
inline Tensor batch_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, BatchNormStats& stats,
                         bool training, double eps = 1e-5, double momentum = 0.1) {
    detail::require_rank(x, 2, "batch_norm");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (gain.numel() != d || bias.numel() != d || stats.mean.size() != d) {
        throw DimensionError("batch_norm: parameters do not match " + shape_str(x.shape()));
    }
    if (training && n < 2) throw ContractError("batch_norm: training mode needs at least 2 rows, got " +
                                               std::to_string(n));
    std::vector<double> mu(d, 0.0), var(d, 0.0);
    if (training) {
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < d; ++c) mu[c] += x.data()[r * d + c];
        }
        for (double& m : mu) m /= static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < d; ++c) {
                const double dv = x.data()[r * d + c] - mu[c];
                var[c] += dv * dv;
            }
        }
        for (std::size_t c = 0; c < d; ++c) {
            const double biased = var[c] / static_cast<double>(n);
            const double unbiased = var[c] / static_cast<double>(n - 1);
            var[c] = biased;
            stats.mean[c] = (1.0 - momentum) * stats.mean[c] + momentum * mu[c];
            stats.var[c] = (1.0 - momentum) * stats.var[c] + momentum * unbiased;
        }
    } else {
        mu = stats.mean;
        var = stats.var;
    }
    std::vector<double> inv_std(d), xhat(n * d), out(n * d);
    for (std::size_t c = 0; c < d; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
            const std::size_t i = r * d + c;
            xhat[i] = (x.data()[i] - mu[c]) * inv_std[c];
            out[i] = xhat[i] * gain.data()[c] + bias.data()[c];
        }
    }
    return Tensor::make_result(
        x.shape(), std::move(out), {x, gain, bias},
        [n, d, training, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
            const auto& g = self.parents[1]->value;
            double* gx = detail::parent_grad(self, 0);
            double* gg = detail::parent_grad(self, 1);
            double* gb = detail::parent_grad(self, 2);
            std::vector<double> sum_dxhat(d, 0.0), sum_dxhat_xhat(d, 0.0);
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t c = 0; c < d; ++c) {
                    const std::size_t i = r * d + c;
                    const double dy = self.grad[i];
                    if (gg) gg[c] += dy * xhat[i];
                    if (gb) gb[c] += dy;
                    sum_dxhat[c] += dy * g[c];
                    sum_dxhat_xhat[c] += dy * g[c] * xhat[i];
                }
            }
            if (!gx) return;
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t c = 0; c < d; ++c) {
                    const std::size_t i = r * d + c;
                    const double dxhat = self.grad[i] * g[c];
                    if (training) {
                        gx[i] += inv_std[c] * (dxhat - sum_dxhat[c] * inv_n - xhat[i] * sum_dxhat_xhat[c] * inv_n);
                    } else {
                        gx[i] += inv_std[c] * dxhat;
                    }
                }
            }
        });
}

// Boolean N×N matrix; allowed[i*N + j] != 0 lets query i attend to key j.
using AttentionMask = std::shared_ptr<const std::vector<std::uint8_t>>;

// Multi-head scaled dot-product attention over the rows of q, k, v (each N×D, D split evenly
// into `heads` column groups). Returns N×D, heads concatenated in column order.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                        const AttentionMask& mask = nullptr) {
    detail::require_rank(q, 2, "attention");
    detail::require_same_shape(q, k, "attention");
    detail::require_same_shape(q, v, "attention");
    const std::size_t n = q.dim(0), d = q.dim(1);
    if (heads == 0 || d % heads != 0) {
        throw DimensionError("attention: width " + std::to_string(d) + " not divisible into " +
                             std::to_string(heads) + " heads");
    }
    if (mask && mask->size() != n * n) {
        throw DimensionError("attention: mask size " + std::to_string(mask->size()) + " does not match " +
                             std::to_string(n) + " tokens");
    }
    const std::size_t dh = d / heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    using Stride = Eigen::OuterStride<>;
    using ConstBlock = Eigen::Map<const detail::RowMatrix, 0, Stride>;
    using Block = Eigen::Map<detail::RowMatrix, 0, Stride>;

    auto probs = std::make_shared<std::vector<detail::RowMatrix>>(heads);
    std::vector<double> out(n * d);
    for (std::size_t h = 0; h < heads; ++h) {
        ConstBlock qh(q.data().data() + h * dh, n, dh, Stride(d));
        ConstBlock kh(k.data().data() + h * dh, n, dh, Stride(d));
        ConstBlock vh(v.data().data() + h * dh, n, dh, Stride(d));
        detail::RowMatrix s = (qh * kh.transpose()) * inv_scale;
        if (mask) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    if (!(*mask)[i * n + j]) s(i, j) = -std::numeric_limits<double>::infinity();
                }
            }
        }
        for (std::size_t i = 0; i < n; ++i) detail::row_softmax(s.data() + i * n, s.data() + i * n, n);
        Block(out.data() + h * dh, n, dh, Stride(d)).noalias() = s * vh;
        (*probs)[h] = std::move(s);
    }
    return Tensor::make_result({n, d}, std::move(out), {q, k, v}, [n, d, dh, heads, inv_scale, probs](detail::Node& self) {
        double* gq = detail::parent_grad(self, 0);
        double* gk = detail::parent_grad(self, 1);
        double* gv = detail::parent_grad(self, 2);
        const double* qv = self.parents[0]->value.data();
        const double* kv = self.parents[1]->value.data();
        const double* vv = self.parents[2]->value.data();
        for (std::size_t h = 0; h < heads; ++h) {
            const detail::RowMatrix& p = (*probs)[h];
            ConstBlock dout(self.grad.data() + h * dh, n, dh, Stride(d));
            ConstBlock vh(vv + h * dh, n, dh, Stride(d));
            if (gv) Block(gv + h * dh, n, dh, Stride(d)).noalias() += p.transpose() * dout;
            if (!gq && !gk) continue;
            detail::RowMatrix dp = dout * vh.transpose();
            // dS = P ⊙ (dP - rowsum(dP ⊙ P))
            for (std::size_t i = 0; i < n; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += dp(i, j) * p(i, j);
                for (std::size_t j = 0; j < n; ++j) dp(i, j) = p(i, j) * (dp(i, j) - dot) * inv_scale;
            }
            if (gq) {
                ConstBlock kh(kv + h * dh, n, dh, Stride(d));
                Block(gq + h * dh, n, dh, Stride(d)).noalias() += dp * kh;
            }
            if (gk) {
                ConstBlock qh(qv + h * dh, n, dh, Stride(d));
                Block(gk + h * dh, n, dh, Stride(d)).noalias() += dp.transpose() * qh;
            }
        }
    });
}

} // namespace mamlab
