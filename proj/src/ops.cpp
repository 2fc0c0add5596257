#include "csl/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "csl/error.hpp"

namespace csl {

namespace {

using detail::TensorNode;
using detail::make_op;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

ConstMatMap as_mat(const TensorNode& n, std::size_t rows, std::size_t cols) {
    return ConstMatMap(n.data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MatMap grad_mat(TensorNode& n, std::size_t rows, std::size_t cols) {
    n.ensure_grad();
    return MatMap(n.grad.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " differ");
}

enum class Bin { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, Bin op) {
    const bool a_scalar = a.numel() == 1;
    const bool b_scalar = b.numel() == 1;
    if (!a_scalar && !b_scalar) check_same_shape(a, b, "elementwise op");

    const Shape& out_shape = a_scalar && !b_scalar ? b.shape() : a.shape();
    const std::size_t n = shape_numel(out_shape);
    std::vector<double> out(n);
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double x = a_scalar ? ad[0] : ad[i];
        const double y = b_scalar ? bd[0] : bd[i];
        out[i] = op == Bin::Add ? x + y : op == Bin::Sub ? x - y : x * y;
    }
    return make_op(out_shape, std::move(out), {a, b}, [op, a_scalar, b_scalar](TensorNode& self) {
        TensorNode& pa = *self.parents[0];
        TensorNode& pb = *self.parents[1];
        const std::size_t n = self.numel();
        if (pa.needs_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                double g = self.grad[i];
                if (op == Bin::Mul) g *= b_scalar ? pb.data[0] : pb.data[i];
                pa.grad[a_scalar ? 0 : i] += g;
            }
        }
        if (pb.needs_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                double g = self.grad[i];
                if (op == Bin::Sub) g = -g;
                if (op == Bin::Mul) g = self.grad[i] * (a_scalar ? pa.data[0] : pa.data[i]);
                pb.grad[b_scalar ? 0 : i] += g;
            }
        }
    });
}

Tensor unary(const Tensor& x, double (*f)(double), double (*df)(double out, double in)) {
    const std::size_t n = x.numel();
    std::vector<double> out(n);
    const auto& xd = x.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = f(xd[i]);
    return make_op(x.shape(), std::move(out), {x}, [df](TensorNode& self) {
        TensorNode& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < self.numel(); ++i)
            p.grad[i] += self.grad[i] * df(self.data[i], p.data[i]);
    });
}

Tensor affine_scalar(const Tensor& x, double scale, double shift) {
    const std::size_t n = x.numel();
    std::vector<double> out(n);
    const auto& xd = x.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = xd[i] * scale + shift;
    return make_op(x.shape(), std::move(out), {x}, [scale](TensorNode& self) {
        TensorNode& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < self.numel(); ++i) p.grad[i] += self.grad[i] * scale;
    });
}

void require_2d(const Tensor& x, const char* what) {
    if (x.ndim() != 2) throw DimensionError(std::string(what) + ": expected a 2-d tensor, got " + shape_str(x.shape()));
}

}  // namespace

Tensor operator+(const Tensor& a, const Tensor& b) { return binary(a, b, Bin::Add); }
Tensor operator-(const Tensor& a, const Tensor& b) { return binary(a, b, Bin::Sub); }
Tensor operator*(const Tensor& a, const Tensor& b) { return binary(a, b, Bin::Mul); }
Tensor operator+(const Tensor& a, double b) { return affine_scalar(a, 1.0, b); }
Tensor operator+(double a, const Tensor& b) { return affine_scalar(b, 1.0, a); }
Tensor operator-(const Tensor& a, double b) { return affine_scalar(a, 1.0, -b); }
Tensor operator-(double a, const Tensor& b) { return affine_scalar(b, -1.0, a); }
Tensor operator*(const Tensor& a, double b) { return affine_scalar(a, b, 0.0); }
Tensor operator*(double a, const Tensor& b) { return affine_scalar(b, a, 0.0); }
Tensor operator/(const Tensor& a, double b) { return affine_scalar(a, 1.0 / b, 0.0); }
Tensor operator-(const Tensor& a) { return affine_scalar(a, -1.0, 0.0); }

Tensor add_n(std::span<const Tensor> terms) {
    if (terms.empty()) throw DimensionError("add_n: empty term list");
    for (const Tensor& t : terms) check_same_shape(terms[0], t, "add_n");
    std::vector<double> out(terms[0].numel(), 0.0);
    for (const Tensor& t : terms) {
        const auto& d = t.data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += d[i];
    }
    std::vector<Tensor> parents(terms.begin(), terms.end());
    return make_op(terms[0].shape(), std::move(out), std::move(parents), [](TensorNode& self) {
        for (auto& p : self.parents) {
            if (!p->needs_grad) continue;
            p->ensure_grad();
            for (std::size_t i = 0; i < self.numel(); ++i) p->grad[i] += self.grad[i];
        }
    });
}

Tensor relu(const Tensor& x) {
    return unary(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double, double in) { return in > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
    return unary(
        x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
        [](double out, double) { return out * (1.0 - out); });
}

Tensor exp(const Tensor& x) {
    return unary(
        x, [](double v) { return std::exp(v); }, [](double out, double) { return out; });
}

Tensor log(const Tensor& x) {
    return unary(
        x, [](double v) { return std::log(v); }, [](double, double in) { return 1.0 / in; });
}

Tensor sqrt(const Tensor& x) {
    return unary(
        x, [](double v) { return std::sqrt(v); },
        [](double out, double) { return 0.5 / std::max(out, 1e-150); });
}

Tensor reciprocal(const Tensor& x) {
    return unary(
        x, [](double v) { return 1.0 / v; }, [](double out, double) { return -out * out; });
}

Tensor clamp_min(const Tensor& x, double floor) {
    const std::size_t n = x.numel();
    std::vector<double> out(n);
    const auto& xd = x.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = std::max(xd[i], floor);
    return make_op(x.shape(), std::move(out), {x}, [floor](TensorNode& self) {
        TensorNode& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < self.numel(); ++i)
            if (p.data[i] > floor) p.grad[i] += self.grad[i];
    });
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return make_op({1}, {s}, {x}, [](TensorNode& self) {
        TensorNode& p = *self.parents[0];
        p.ensure_grad();
        for (double& g : p.grad) g += self.grad[0];
    });
}

Tensor mean(const Tensor& x) {
    const double inv = 1.0 / static_cast<double>(x.numel());
    double s = 0.0;
    for (double v : x.data()) s += v;
    return make_op({1}, {s * inv}, {x}, [inv](TensorNode& self) {
        TensorNode& p = *self.parents[0];
        p.ensure_grad();
        for (double& g : p.grad) g += self.grad[0] * inv;
    });
}

Tensor row_sum(const Tensor& x) {
    require_2d(x, "row_sum");
    const std::size_t n = x.dim(0), m = x.dim(1);
    std::vector<double> out(n, 0.0);
    const auto& xd = x.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out[i] += xd[i * m + j];
    return make_op({n}, std::move(out), {x}, [m](TensorNode& self) {
        TensorNode& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < self.numel(); ++i)
            for (std::size_t j = 0; j < m; ++j) p.grad[i * m + j] += self.grad[i];
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    std::vector<double> out(x.data().begin(), x.data().end());
    return make_op(std::move(shape), std::move(out), {x}, [](TensorNode& self) {
        TensorNode& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < self.numel(); ++i) p.grad[i] += self.grad[i];
    });
}

Tensor flatten_rows(const Tensor& x) {
    if (x.ndim() < 2) throw DimensionError("flatten_rows: need at least 2 dims, got " + shape_str(x.shape()));
    return reshape(x, {x.dim(0), x.numel() / x.dim(0)});
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
    require_2d(x, "gather_rows");
    const std::size_t m = x.dim(1);
    std::vector<double> out(rows.size() * m);
    const auto& xd = x.data();
    for (std::size_t t = 0; t < rows.size(); ++t) {
        if (rows[t] >= x.dim(0))
            throw DimensionError("gather_rows: row index " + std::to_string(rows[t]) + " out of range");
        std::copy_n(xd.data() + rows[t] * m, m, out.data() + t * m);
    }
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return make_op({rows.size(), m}, std::move(out), {x}, [idx = std::move(idx), m](TensorNode& self) {
        TensorNode& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t t = 0; t < idx.size(); ++t)
            for (std::size_t j = 0; j < m; ++j) p.grad[idx[t] * m + j] += self.grad[t * m + j];
    });
}

Tensor take_per_row(const Tensor& x, std::span<const std::size_t> cols) {
    require_2d(x, "take_per_row");
    const std::size_t n = x.dim(0), m = x.dim(1);
    if (cols.size() != n) throw DimensionError("take_per_row: need one column index per row");
    std::vector<double> out(n);
    const auto& xd = x.data();
    for (std::size_t i = 0; i < n; ++i) {
        if (cols[i] >= m) throw DimensionError("take_per_row: column index " + std::to_string(cols[i]) + " out of range");
        out[i] = xd[i * m + cols[i]];
    }
    std::vector<std::size_t> idx(cols.begin(), cols.end());
    return make_op({n}, std::move(out), {x}, [idx = std::move(idx), m](TensorNode& self) {
        TensorNode& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i) p.grad[i * m + idx[i]] += self.grad[i];
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<double> out(m * n);
    {
        MatMap o(out.data(), m, n);
        o.noalias() = as_mat(*a.node(), m, k) * as_mat(*b.node(), k, n);
    }
    return make_op({m, n}, std::move(out), {a, b}, [m, k, n](TensorNode& self) {
        TensorNode& pa = *self.parents[0];
        TensorNode& pb = *self.parents[1];
        ConstMatMap go(self.grad.data(), m, n);
        if (pa.needs_grad) grad_mat(pa, m, k).noalias() += go * as_mat(pb, k, n).transpose();
        if (pb.needs_grad) grad_mat(pb, k, n).noalias() += as_mat(pa, m, k).transpose() * go;
    });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul_nt");
    require_2d(b, "matmul_nt");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k)
        throw DimensionError("matmul_nt: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
    std::vector<double> out(m * n);
    {
        MatMap o(out.data(), m, n);
        o.noalias() = as_mat(*a.node(), m, k) * as_mat(*b.node(), n, k).transpose();
    }
    return make_op({m, n}, std::move(out), {a, b}, [m, k, n](TensorNode& self) {
        TensorNode& pa = *self.parents[0];
        TensorNode& pb = *self.parents[1];
        ConstMatMap go(self.grad.data(), m, n);
        if (pa.needs_grad) grad_mat(pa, m, k).noalias() += go * as_mat(pb, n, k);
        if (pb.needs_grad) grad_mat(pb, n, k).noalias() += go.transpose() * as_mat(pa, m, k);
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    require_2d(x, "linear");
    require_2d(w, "linear");
    const std::size_t n = x.dim(0), in = x.dim(1), out_w = w.dim(0);
    if (w.dim(1) != in)
        throw DimensionError("linear: input width " + std::to_string(in) + " does not match weight " + shape_str(w.shape()));
    if (b.numel() != out_w) throw DimensionError("linear: bias length does not match output width");
    std::vector<double> out(n * out_w);
    {
        MatMap o(out.data(), n, out_w);
        o.noalias() = as_mat(*x.node(), n, in) * as_mat(*w.node(), out_w, in).transpose();
        const auto& bd = b.data();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < out_w; ++j) out[i * out_w + j] += bd[j];
    }
    return make_op({n, out_w}, std::move(out), {x, w, b}, [n, in, out_w](TensorNode& self) {
        TensorNode& px = *self.parents[0];
        TensorNode& pw = *self.parents[1];
        TensorNode& pb = *self.parents[2];
        ConstMatMap go(self.grad.data(), n, out_w);
        if (px.needs_grad) grad_mat(px, n, in).noalias() += go * as_mat(pw, out_w, in);
        if (pw.needs_grad) grad_mat(pw, out_w, in).noalias() += go.transpose() * as_mat(px, n, in);
        if (pb.needs_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < out_w; ++j) pb.grad[j] += self.grad[i * out_w + j];
        }
    });
}

Tensor mul_rowwise(const Tensor& a, const Tensor& v) {
    require_2d(a, "mul_rowwise");
    const std::size_t n = a.dim(0), m = a.dim(1);
    if (v.numel() != n) throw DimensionError("mul_rowwise: scale vector length does not match row count");
    std::vector<double> out(n * m);
    const auto& ad = a.data();
    const auto& vd = v.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out[i * m + j] = ad[i * m + j] * vd[i];
    return make_op({n, m}, std::move(out), {a, v}, [n, m](TensorNode& self) {
        TensorNode& pa = *self.parents[0];
        TensorNode& pv = *self.parents[1];
        if (pa.needs_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) pa.grad[i * m + j] += self.grad[i * m + j] * pv.data[i];
        }
        if (pv.needs_grad) {
            pv.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < m; ++j) s += self.grad[i * m + j] * pa.data[i * m + j];
                pv.grad[i] += s;
            }
        }
    });
}

Tensor sub_rowvec(const Tensor& a, const Tensor& v) {
    require_2d(a, "sub_rowvec");
    const std::size_t n = a.dim(0), m = a.dim(1);
    if (v.numel() != m) throw DimensionError("sub_rowvec: vector length does not match column count");
    std::vector<double> out(n * m);
    const auto& ad = a.data();
    const auto& vd = v.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out[i * m + j] = ad[i * m + j] - vd[j];
    return make_op({n, m}, std::move(out), {a, v}, [n, m](TensorNode& self) {
        TensorNode& pa = *self.parents[0];
        TensorNode& pv = *self.parents[1];
        if (pa.needs_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < n * m; ++i) pa.grad[i] += self.grad[i];
        }
        if (pv.needs_grad) {
            pv.ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) pv.grad[j] -= self.grad[i * m + j];
        }
    });
}

Tensor softmax_rows(const Tensor& x) {
    require_2d(x, "softmax_rows");
    const std::size_t n = x.dim(0), k = x.dim(1);
    std::vector<double> out(n * k);
    const auto& xd = x.data();
    for (std::size_t i = 0; i < n; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < k; ++j) m = std::max(m, xd[i * k + j]);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += (out[i * k + j] = std::exp(xd[i * k + j] - m));
        for (std::size_t j = 0; j < k; ++j) out[i * k + j] /= s;
    }
    return make_op({n, k}, std::move(out), {x}, [n, k](TensorNode& self) {
        TensorNode& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < k; ++j) dot += self.grad[i * k + j] * self.data[i * k + j];
            for (std::size_t j = 0; j < k; ++j)
                p.grad[i * k + j] += self.data[i * k + j] * (self.grad[i * k + j] - dot);
        }
    });
}

Tensor log_softmax_rows(const Tensor& x) {
    require_2d(x, "log_softmax_rows");
    const std::size_t n = x.dim(0), k = x.dim(1);
    std::vector<double> out(n * k);
    const auto& xd = x.data();
    for (std::size_t i = 0; i < n; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < k; ++j) m = std::max(m, xd[i * k + j]);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += std::exp(xd[i * k + j] - m);
        const double lse = m + std::log(s);
        for (std::size_t j = 0; j < k; ++j) out[i * k + j] = xd[i * k + j] - lse;
    }
    return make_op({n, k}, std::move(out), {x}, [n, k](TensorNode& self) {
        TensorNode& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
            double gsum = 0.0;
            for (std::size_t j = 0; j < k; ++j) gsum += self.grad[i * k + j];
            for (std::size_t j = 0; j < k; ++j)
                p.grad[i * k + j] += self.grad[i * k + j] - std::exp(self.data[i * k + j]) * gsum;
        }
    });
}

namespace {

struct ConvDims {
    std::size_t n, c, h, w, f, kh, kw, stride, pad, hout, wout;
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
    if (input.ndim() != 4 || kernel.ndim() != 4)
        throw DimensionError("conv2d: expected [N,C,H,W] input and [F,C,kh,kw] kernel, got " +
                             shape_str(input.shape()) + " and " + shape_str(kernel.shape()));
    ConvDims d{};
    d.n = input.dim(0);
    d.c = input.dim(1);
    d.h = input.dim(2);
    d.w = input.dim(3);
    d.f = kernel.dim(0);
    d.kh = kernel.dim(2);
    d.kw = kernel.dim(3);
    d.stride = stride;
    d.pad = padding;
    if (kernel.dim(1) != d.c)
        throw DimensionError("conv2d: input has " + std::to_string(d.c) + " channels but kernel expects " +
                             std::to_string(kernel.dim(1)));
    if (d.h + 2 * d.pad < d.kh || d.w + 2 * d.pad < d.kw)
        throw DimensionError("conv2d: spatial extent " + shape_str(input.shape()) +
                             " too small for kernel " + shape_str(kernel.shape()) + " with padding " +
                             std::to_string(padding));
    if (stride == 0) throw DimensionError("conv2d: stride must be positive");
    d.hout = (d.h + 2 * d.pad - d.kh) / d.stride + 1;
    d.wout = (d.w + 2 * d.pad - d.kw) / d.stride + 1;
    return d;
}

// col layout: [C*kh*kw, hout*wout] per image.
void im2col(const double* img, const ConvDims& d, double* col) {
    const std::size_t cols = d.hout * d.wout;
    for (std::size_t c = 0; c < d.c; ++c)
        for (std::size_t ki = 0; ki < d.kh; ++ki)
            for (std::size_t kj = 0; kj < d.kw; ++kj) {
                double* row = col + ((c * d.kh + ki) * d.kw + kj) * cols;
                for (std::size_t ho = 0; ho < d.hout; ++ho) {
                    const std::ptrdiff_t hi = static_cast<std::ptrdiff_t>(ho * d.stride + ki) -
                                              static_cast<std::ptrdiff_t>(d.pad);
                    for (std::size_t wo = 0; wo < d.wout; ++wo) {
                        const std::ptrdiff_t wi = static_cast<std::ptrdiff_t>(wo * d.stride + kj) -
                                                  static_cast<std::ptrdiff_t>(d.pad);
                        const bool inside = hi >= 0 && hi < static_cast<std::ptrdiff_t>(d.h) && wi >= 0 &&
                                            wi < static_cast<std::ptrdiff_t>(d.w);
                        row[ho * d.wout + wo] = inside ? img[(c * d.h + hi) * d.w + wi] : 0.0;
                    }
                }
            }
}

void col2im_add(const double* col, const ConvDims& d, double* img_grad) {
    const std::size_t cols = d.hout * d.wout;
    for (std::size_t c = 0; c < d.c; ++c)
        for (std::size_t ki = 0; ki < d.kh; ++ki)
            for (std::size_t kj = 0; kj < d.kw; ++kj) {
                const double* row = col + ((c * d.kh + ki) * d.kw + kj) * cols;
                for (std::size_t ho = 0; ho < d.hout; ++ho) {
                    const std::ptrdiff_t hi = static_cast<std::ptrdiff_t>(ho * d.stride + ki) -
                                              static_cast<std::ptrdiff_t>(d.pad);
                    if (hi < 0 || hi >= static_cast<std::ptrdiff_t>(d.h)) continue;
                    for (std::size_t wo = 0; wo < d.wout; ++wo) {
                        const std::ptrdiff_t wi = static_cast<std::ptrdiff_t>(wo * d.stride + kj) -
                                                  static_cast<std::ptrdiff_t>(d.pad);
                        if (wi < 0 || wi >= static_cast<std::ptrdiff_t>(d.w)) continue;
                        img_grad[(c * d.h + hi) * d.w + wi] += row[ho * d.wout + wo];
                    }
                }
            }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
    const ConvDims d = conv_dims(input, kernel, stride, padding);
    const std::size_t patch = d.c * d.kh * d.kw;
    const std::size_t cols = d.hout * d.wout;

    // im2col once per image; the column blocks are reused by the backward
    // pass for both the kernel and the input gradient.
    std::vector<double> colbuf(d.n * patch * cols);
    std::vector<double> out(d.n * d.f * cols);
    const auto& xd = input.data();
    ConstMatMap kmat(kernel.data().data(), d.f, patch);
    for (std::size_t i = 0; i < d.n; ++i) {
        double* col = colbuf.data() + i * patch * cols;
        im2col(xd.data() + i * d.c * d.h * d.w, d, col);
        MatMap o(out.data() + i * d.f * cols, d.f, cols);
        o.noalias() = kmat * ConstMatMap(col, patch, cols);
    }

    return make_op({d.n, d.f, d.hout, d.wout}, std::move(out), {input, kernel},
                   [d, patch, cols, colbuf = std::move(colbuf)](TensorNode& self) {
                       TensorNode& px = *self.parents[0];
                       TensorNode& pk = *self.parents[1];
                       const bool need_x = px.needs_grad;
                       const bool need_k = pk.needs_grad;
                       if (need_x) px.ensure_grad();
                       if (need_k) pk.ensure_grad();
                       std::vector<double> dcol(need_x ? patch * cols : 0);
                       ConstMatMap kmat(pk.data.data(), d.f, patch);
                       for (std::size_t i = 0; i < d.n; ++i) {
                           ConstMatMap go(self.grad.data() + i * d.f * cols, d.f, cols);
                           ConstMatMap col(colbuf.data() + i * patch * cols, patch, cols);
                           if (need_k) {
                               MatMap kg(pk.grad.data(), d.f, patch);
                               kg.noalias() += go * col.transpose();
                           }
                           if (need_x) {
                               MatMap dc(dcol.data(), patch, cols);
                               dc.noalias() = kmat.transpose() * go;
                               col2im_add(dcol.data(), d, px.grad.data() + i * d.c * d.h * d.w);
                           }
                       }
                   });
}

Tensor bias_nchw(const Tensor& x, const Tensor& bias) {
    if (x.ndim() != 4) throw DimensionError("bias_nchw: expected [N,F,H,W], got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), f = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (bias.numel() != f) throw DimensionError("bias_nchw: bias length does not match channel count");
    std::vector<double> out(x.data().begin(), x.data().end());
    const auto& bd = bias.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < f; ++c) {
            double* p = out.data() + (i * f + c) * hw;
            for (std::size_t j = 0; j < hw; ++j) p[j] += bd[c];
        }
    return make_op(x.shape(), std::move(out), {x, bias}, [n, f, hw](TensorNode& self) {
        TensorNode& px = *self.parents[0];
        TensorNode& pb = *self.parents[1];
        if (px.needs_grad) {
            px.ensure_grad();
            for (std::size_t i = 0; i < self.numel(); ++i) px.grad[i] += self.grad[i];
        }
        if (pb.needs_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < f; ++c) {
                    const double* g = self.grad.data() + (i * f + c) * hw;
                    double s = 0.0;
                    for (std::size_t j = 0; j < hw; ++j) s += g[j];
                    pb.grad[c] += s;
                }
        }
    });
}

Tensor max_pool2d(const Tensor& x) {
    if (x.ndim() != 4) throw DimensionError("max_pool2d: expected [N,C,H,W], got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h < 2 || w < 2) throw DimensionError("max_pool2d: spatial extent too small for a 2x2 window");
    const std::size_t hout = (h - 2) / 2 + 1, wout = (w - 2) / 2 + 1;
    std::vector<double> out(n * c * hout * wout);
    std::vector<std::size_t> argmax(out.size());
    const auto& xd = x.data();
    for (std::size_t i = 0; i < n * c; ++i) {
        const double* plane = xd.data() + i * h * w;
        for (std::size_t ho = 0; ho < hout; ++ho)
            for (std::size_t wo = 0; wo < wout; ++wo) {
                std::size_t best = (ho * 2) * w + wo * 2;
                double bv = plane[best];
                for (std::size_t di = 0; di < 2; ++di)
                    for (std::size_t dj = 0; dj < 2; ++dj) {
                        const std::size_t idx = (ho * 2 + di) * w + (wo * 2 + dj);
                        if (plane[idx] > bv) {
                            bv = plane[idx];
                            best = idx;
                        }
                    }
                const std::size_t o = (i * hout + ho) * wout + wo;
                out[o] = bv;
                argmax[o] = i * h * w + best;
            }
    }
    return make_op({n, c, hout, wout}, std::move(out), {x}, [argmax = std::move(argmax)](TensorNode& self) {
        TensorNode& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t o = 0; o < argmax.size(); ++o) p.grad[argmax[o]] += self.grad[o];
    });
}

Tensor huber_to_const(const Tensor& x, std::span<const double> target, double delta) {
    if (x.numel() != target.size()) throw DimensionError("huber_to_const: target length does not match input");
    const std::size_t n = x.numel();
    std::vector<double> out(n);
    std::vector<double> tgt(target.begin(), target.end());
    const auto& xd = x.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double r = xd[i] - tgt[i];
        const double a = std::abs(r);
        out[i] = a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
    }
    return make_op(x.shape(), std::move(out), {x}, [tgt = std::move(tgt), delta](TensorNode& self) {
        TensorNode& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t i = 0; i < self.numel(); ++i) {
            const double r = p.data[i] - tgt[i];
            p.grad[i] += self.grad[i] * std::clamp(r, -delta, delta);
        }
    });
}

}  // namespace csl
