#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "anf/parallel.hpp"
#include "anf/tensor.hpp"

namespace anf {

template <typename S>
using MatrixRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapRM = Eigen::Map<MatrixRM<S>>;
template <typename S>
using ConstMapRM = Eigen::Map<const MatrixRM<S>>;

namespace detail {

/// Unfolds one [C, H, W] image into a [C*k*k, Ho*Wo] patch matrix with
/// implicit zero padding.
template <typename S>
void im2col(const S* img, int channels, int height, int width, int k, int stride, int pad,
            int out_h, int out_w, S* col) {
    const std::int64_t out_hw = static_cast<std::int64_t>(out_h) * out_w;
    for (int c = 0; c < channels; ++c) {
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                S* row = col + (static_cast<std::int64_t>(c) * k * k + ki * k + kj) * out_hw;
                for (int oh = 0; oh < out_h; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    S* dst = row + static_cast<std::int64_t>(oh) * out_w;
                    if (ih < 0 || ih >= height) {
                        std::fill(dst, dst + out_w, S(0));
                        continue;
                    }
                    const S* src = img + (static_cast<std::int64_t>(c) * height + ih) * width;
                    for (int ow = 0; ow < out_w; ++ow) {
                        const int iw = ow * stride - pad + kj;
                        dst[ow] = (iw >= 0 && iw < width) ? src[iw] : S(0);
                    }
                }
            }
        }
    }
}

/// Scatters a patch-matrix gradient back onto the [C, H, W] image gradient.
template <typename S>
void col2im_accumulate(const S* col, int channels, int height, int width, int k, int stride,
                       int pad, int out_h, int out_w, S* img_grad) {
    const std::int64_t out_hw = static_cast<std::int64_t>(out_h) * out_w;
    for (int c = 0; c < channels; ++c) {
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                const S* row = col + (static_cast<std::int64_t>(c) * k * k + ki * k + kj) * out_hw;
                for (int oh = 0; oh < out_h; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= height) continue;
                    S* dst = img_grad + (static_cast<std::int64_t>(c) * height + ih) * width;
                    const S* src = row + static_cast<std::int64_t>(oh) * out_w;
                    for (int ow = 0; ow < out_w; ++ow) {
                        const int iw = ow * stride - pad + kj;
                        if (iw >= 0 && iw < width) dst[iw] += src[ow];
                    }
                }
            }
        }
    }
}

template <typename S>
inline void check_rank(const Tensor<S>& t, int rank, const char* what) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(what) + " expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape()));
    }
}

}  // namespace detail

/// 2-D cross-correlation of x [N,Cin,H,W] with weight [Cout,Cin,k,k].
/// Differentiable w.r.t. x, weight and the optional bias [Cout].
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                 int stride, int padding) {
    detail::check_rank(x, 4, "conv2d input");
    detail::check_rank(weight, 4, "conv2d weight");
    if (stride < 1 || padding < 0) {
        throw GeometryError("conv2d requires stride >= 1 and padding >= 0");
    }
    const int batch = x.dim(0), in_ch = x.dim(1), height = x.dim(2), width = x.dim(3);
    const int out_ch = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != in_ch) {
        throw ShapeError("conv2d channel mismatch: input has " + std::to_string(in_ch) +
                         ", weight expects " + std::to_string(weight.dim(1)));
    }
    if (weight.dim(3) != k) throw ShapeError("conv2d weight must be square");
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_ch)) {
        throw ShapeError("conv2d bias must have shape [Cout]");
    }
    if (k > height + 2 * padding || k > width + 2 * padding) {
        throw GeometryError("conv2d kernel " + std::to_string(k) + " exceeds padded input " +
                            shape_str(x.shape()));
    }
    const int out_h = (height + 2 * padding - k) / stride + 1;
    const int out_w = (width + 2 * padding - k) / stride + 1;
    if (out_h < 1 || out_w < 1) {
        throw GeometryError("conv2d produces an empty output for input " + shape_str(x.shape()));
    }

    const std::int64_t patch = static_cast<std::int64_t>(in_ch) * k * k;
    const std::int64_t out_hw = static_cast<std::int64_t>(out_h) * out_w;
    auto out = Tensor<S>::zeros({batch, out_ch, out_h, out_w});
    auto cols = std::make_shared<std::vector<S>>(batch * patch * out_hw);

    const S* xp = x.data();
    const S* wp = weight.data();
    const S* bp = bias.defined() ? bias.data() : nullptr;
    S* op = out.data();
    const std::int64_t in_stride = static_cast<std::int64_t>(in_ch) * height * width;
    const std::int64_t out_stride = static_cast<std::int64_t>(out_ch) * out_hw;

    parallel_for(batch, [&](std::int64_t n) {
        S* col = cols->data() + n * patch * out_hw;
        detail::im2col(xp + n * in_stride, in_ch, height, width, k, stride, padding, out_h, out_w,
                       col);
        ConstMapRM<S> w_mat(wp, out_ch, patch);
        ConstMapRM<S> col_mat(col, patch, out_hw);
        MapRM<S> out_mat(op + n * out_stride, out_ch, out_hw);
        out_mat.noalias() = w_mat * col_mat;
        if (bp) out_mat.colwise() += Eigen::Map<const Eigen::Vector<S, Eigen::Dynamic>>(bp, out_ch);
    });

    if (detail::tracing<S>({&x, &weight, &bias})) {
        out.set_requires_grad();
        auto xn = x.node();
        auto wn = weight.node();
        auto bn = bias.defined() ? bias.node() : nullptr;
        auto on = out.node();
        Tape<S>::current()->record([=] {
            if (on->grad.empty()) return;
            const S* gy = on->grad.data();
            if (wn->requires_grad) {
                wn->ensure_grad();
                S* gw = wn->grad.data();
                ThreadPool::instance().run(out_ch, [&](std::int64_t r0, std::int64_t r1) {
                    MapRM<S> gw_mat(gw, out_ch, patch);
                    for (std::int64_t n = 0; n < batch; ++n) {
                        ConstMapRM<S> gy_mat(gy + n * out_stride, out_ch, out_hw);
                        ConstMapRM<S> col_mat(cols->data() + n * patch * out_hw, patch, out_hw);
                        gw_mat.middleRows(r0, r1 - r0).noalias() +=
                            gy_mat.middleRows(r0, r1 - r0) * col_mat.transpose();
                    }
                });
            }
            if (bn && bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t n = 0; n < batch; ++n) {
                    ConstMapRM<S> gy_mat(gy + n * out_stride, out_ch, out_hw);
                    for (int c = 0; c < out_ch; ++c) bn->grad[c] += gy_mat.row(c).sum();
                }
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                S* gx = xn->grad.data();
                parallel_for(batch, [&](std::int64_t n) {
                    MatrixRM<S> gcol(patch, out_hw);
                    ConstMapRM<S> w_mat(wn->data.data(), out_ch, patch);
                    ConstMapRM<S> gy_mat(gy + n * out_stride, out_ch, out_hw);
                    gcol.noalias() = w_mat.transpose() * gy_mat;
                    detail::col2im_accumulate(gcol.data(), in_ch, height, width, k, stride,
                                              padding, out_h, out_w, gx + n * in_stride);
                });
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, int stride, int padding) {
    return conv2d(x, weight, Tensor<S>{}, stride, padding);
}

template <typename S>
struct MaxPool2d {
    Tensor<S> output;
    /// Flat index into the input tensor of each output element's maximum.
    std::shared_ptr<std::vector<std::int64_t>> argmax;
};

/// Max pooling over m-by-m windows. Backward routes the gradient to the
/// argmax position only; ties go to the lowest flat index in the window.
template <typename S>
MaxPool2d<S> maxpool2d(const Tensor<S>& x, int window, int stride) {
    detail::check_rank(x, 4, "maxpool2d input");
    if (window <= 0 || stride <= 0) {
        throw GeometryError("maxpool2d requires window > 0 and stride > 0");
    }
    const int batch = x.dim(0), channels = x.dim(1), height = x.dim(2), width = x.dim(3);
    if (window > height || window > width) {
        throw GeometryError("maxpool2d window " + std::to_string(window) +
                            " exceeds spatial extent of " + shape_str(x.shape()));
    }
    const int out_h = (height - window) / stride + 1;
    const int out_w = (width - window) / stride + 1;

    MaxPool2d<S> result;
    result.output = Tensor<S>::zeros({batch, channels, out_h, out_w});
    result.argmax = std::make_shared<std::vector<std::int64_t>>(
        static_cast<std::size_t>(batch) * channels * out_h * out_w);

    const S* xp = x.data();
    S* op = result.output.data();
    std::int64_t* am = result.argmax->data();
    const std::int64_t planes = static_cast<std::int64_t>(batch) * channels;

    parallel_for(planes, [&](std::int64_t p) {
        const S* in_plane = xp + p * height * width;
        S* out_plane = op + p * out_h * out_w;
        std::int64_t* am_plane = am + p * out_h * out_w;
        for (int oh = 0; oh < out_h; ++oh) {
            for (int ow = 0; ow < out_w; ++ow) {
                const int h0 = oh * stride, w0 = ow * stride;
                S best = in_plane[static_cast<std::int64_t>(h0) * width + w0];
                std::int64_t best_idx = static_cast<std::int64_t>(h0) * width + w0;
                for (int i = 0; i < window; ++i) {
                    for (int j = 0; j < window; ++j) {
                        const std::int64_t idx =
                            static_cast<std::int64_t>(h0 + i) * width + (w0 + j);
                        if (in_plane[idx] > best) {
                            best = in_plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                out_plane[static_cast<std::int64_t>(oh) * out_w + ow] = best;
                am_plane[static_cast<std::int64_t>(oh) * out_w + ow] =
                    p * height * width + best_idx;
            }
        }
    });

    if (detail::tracing<S>({&x})) {
        result.output.set_requires_grad();
        auto xn = x.node();
        auto on = result.output.node();
        auto argmax = result.argmax;
        Tape<S>::current()->record([=] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            const std::int64_t out_plane = static_cast<std::int64_t>(on->shape[2]) * on->shape[3];
            parallel_for(planes, [&](std::int64_t p) {
                for (std::int64_t i = p * out_plane; i < (p + 1) * out_plane; ++i) {
                    xn->grad[static_cast<std::size_t>((*argmax)[i])] += on->grad[i];
                }
            });
        });
    }
    return result;
}

template <typename S>
struct BatchNormState {
    Tensor<S> running_mean;
    Tensor<S> running_var;

    explicit BatchNormState(int channels = 0) {
        if (channels > 0) {
            running_mean = Tensor<S>::zeros({channels});
            running_var = Tensor<S>::full({channels}, S(1));
        }
    }
};

/// Per-channel batch normalization. Training mode normalizes with batch
/// statistics (biased variance) and folds them into the running estimates
/// with the given momentum; eval mode uses the running estimates and leaves
/// them untouched.
template <typename S>
Tensor<S> batchnorm2d(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                      BatchNormState<S>& state, bool training, double momentum = 0.1,
                      double eps = 1e-5) {
    detail::check_rank(x, 4, "batchnorm2d input");
    const int batch = x.dim(0), channels = x.dim(1), height = x.dim(2), width = x.dim(3);
    if (gamma.rank() != 1 || gamma.dim(0) != channels || beta.rank() != 1 ||
        beta.dim(0) != channels) {
        throw ShapeError("batchnorm2d gamma/beta must have shape [C] with C = " +
                         std::to_string(channels));
    }
    const std::int64_t plane = static_cast<std::int64_t>(height) * width;
    const std::int64_t per_channel = static_cast<std::int64_t>(batch) * plane;

    auto mean = std::make_shared<std::vector<double>>(channels);
    auto invstd = std::make_shared<std::vector<double>>(channels);
    const S* xp = x.data();

    if (training) {
        parallel_for(channels, [&](std::int64_t c) {
            double sum = 0.0, sq = 0.0;
            for (int n = 0; n < batch; ++n) {
                const S* p = xp + (static_cast<std::int64_t>(n) * channels + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    sum += p[i];
                    sq += static_cast<double>(p[i]) * p[i];
                }
            }
            const double mu = sum / static_cast<double>(per_channel);
            const double var = sq / static_cast<double>(per_channel) - mu * mu;
            (*mean)[c] = mu;
            (*invstd)[c] = 1.0 / std::sqrt(std::max(var, 0.0) + eps);
        });
        S* rm = state.running_mean.data();
        S* rv = state.running_var.data();
        for (int c = 0; c < channels; ++c) {
            const double var = 1.0 / ((*invstd)[c] * (*invstd)[c]) - eps;
            rm[c] = static_cast<S>((1.0 - momentum) * rm[c] + momentum * (*mean)[c]);
            rv[c] = static_cast<S>((1.0 - momentum) * rv[c] + momentum * var);
        }
    } else {
        const S* rm = state.running_mean.data();
        const S* rv = state.running_var.data();
        for (int c = 0; c < channels; ++c) {
            (*mean)[c] = rm[c];
            (*invstd)[c] = 1.0 / std::sqrt(std::max(static_cast<double>(rv[c]), 0.0) + eps);
        }
    }

    auto out = Tensor<S>::zeros(x.shape());
    S* op = out.data();
    const S* gp = gamma.data();
    const S* bp = beta.data();
    parallel_for(static_cast<std::int64_t>(batch) * channels, [&](std::int64_t nc) {
        const int c = static_cast<int>(nc % channels);
        const S* src = xp + nc * plane;
        S* dst = op + nc * plane;
        const double mu = (*mean)[c], is = (*invstd)[c];
        const double g = gp[c], b = bp[c];
        for (std::int64_t i = 0; i < plane; ++i) {
            dst[i] = static_cast<S>((static_cast<double>(src[i]) - mu) * is * g + b);
        }
    });

    if (detail::tracing<S>({&x, &gamma, &beta})) {
        out.set_requires_grad();
        auto xn = x.node();
        auto gn = gamma.node();
        auto bn = beta.node();
        auto on = out.node();
        Tape<S>::current()->record([=] {
            if (on->grad.empty()) return;
            const S* gy = on->grad.data();
            const S* xd = xn->data.data();
            // Per-channel reductions of dy and dy * xhat.
            std::vector<double> sum_gy(channels, 0.0), sum_gy_xhat(channels, 0.0);
            parallel_for(channels, [&](std::int64_t c) {
                double s = 0.0, sx = 0.0;
                const double mu = (*mean)[c], is = (*invstd)[c];
                for (int n = 0; n < batch; ++n) {
                    const std::int64_t base = (static_cast<std::int64_t>(n) * channels + c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        const double g = gy[base + i];
                        s += g;
                        sx += g * (static_cast<double>(xd[base + i]) - mu) * is;
                    }
                }
                sum_gy[c] = s;
                sum_gy_xhat[c] = sx;
            });
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (int c = 0; c < channels; ++c) gn->grad[c] += static_cast<S>(sum_gy_xhat[c]);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int c = 0; c < channels; ++c) bn->grad[c] += static_cast<S>(sum_gy[c]);
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                S* gx = xn->grad.data();
                const double m = static_cast<double>(per_channel);
                parallel_for(static_cast<std::int64_t>(batch) * channels, [&](std::int64_t nc) {
                    const int c = static_cast<int>(nc % channels);
                    const double mu = (*mean)[c], is = (*invstd)[c];
                    const double gamma_is = static_cast<double>(gn->data[c]) * is;
                    const std::int64_t base = nc * plane;
                    if (training) {
                        const double mg = sum_gy[c] / m;
                        const double mgx = sum_gy_xhat[c] / m;
                        for (std::int64_t i = 0; i < plane; ++i) {
                            const double xhat = (static_cast<double>(xd[base + i]) - mu) * is;
                            gx[base + i] += static_cast<S>(
                                gamma_is * (static_cast<double>(gy[base + i]) - mg - xhat * mgx));
                        }
                    } else {
                        for (std::int64_t i = 0; i < plane; ++i) {
                            gx[base + i] += static_cast<S>(gamma_is * gy[base + i]);
                        }
                    }
                });
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
    auto out = Tensor<S>::zeros(x.shape());
    const S* xp = x.data();
    S* op = out.data();
    const std::int64_t n = x.size();
    for (std::int64_t i = 0; i < n; ++i) op[i] = xp[i] > S(0) ? xp[i] : S(0);
    if (detail::tracing<S>({&x})) {
        out.set_requires_grad();
        auto xn = x.node();
        auto on = out.node();
        Tape<S>::current()->record([=] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
                if (xn->data[i] > S(0)) xn->grad[i] += on->grad[i];
            }
        });
    }
    return out;
}

namespace detail {
template <typename S>
inline S stable_sigmoid(S v) {
    if (v >= S(0)) {
        return S(1) / (S(1) + std::exp(-v));
    }
    const S e = std::exp(v);
    return e / (S(1) + e);
}
}  // namespace detail

/// swish(x) = x * sigmoid(x), with the exact derivative
/// sigmoid(x) + x * sigmoid(x) * (1 - sigmoid(x)).
template <typename S>
Tensor<S> swish(const Tensor<S>& x) {
    auto out = Tensor<S>::zeros(x.shape());
    const S* xp = x.data();
    S* op = out.data();
    const std::int64_t n = x.size();
    for (std::int64_t i = 0; i < n; ++i) op[i] = xp[i] * detail::stable_sigmoid(xp[i]);
    if (detail::tracing<S>({&x})) {
        out.set_requires_grad();
        auto xn = x.node();
        auto on = out.node();
        Tape<S>::current()->record([=] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
                const S s = detail::stable_sigmoid(xn->data[i]);
                xn->grad[i] += on->grad[i] * (s + xn->data[i] * s * (S(1) - s));
            }
        });
    }
    return out;
}

/// y = x W^T + b for x [N, Din], W [Dout, Din], b [Dout].
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias) {
    detail::check_rank(x, 2, "linear input");
    detail::check_rank(weight, 2, "linear weight");
    const int batch = x.dim(0), d_in = x.dim(1), d_out = weight.dim(0);
    if (weight.dim(1) != d_in) {
        throw ShapeError("linear dimension mismatch: input " + shape_str(x.shape()) +
                         " vs weight " + shape_str(weight.shape()));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != d_out)) {
        throw ShapeError("linear bias must have shape [Dout]");
    }
    auto out = Tensor<S>::zeros({batch, d_out});
    ConstMapRM<S> x_mat(x.data(), batch, d_in);
    ConstMapRM<S> w_mat(weight.data(), d_out, d_in);
    MapRM<S> out_mat(out.data(), batch, d_out);
    out_mat.noalias() = x_mat * w_mat.transpose();
    if (bias.defined()) {
        out_mat.rowwise() +=
            Eigen::Map<const Eigen::RowVector<S, Eigen::Dynamic>>(bias.data(), d_out);
    }
    if (detail::tracing<S>({&x, &weight, &bias})) {
        out.set_requires_grad();
        auto xn = x.node();
        auto wn = weight.node();
        auto bn = bias.defined() ? bias.node() : nullptr;
        auto on = out.node();
        Tape<S>::current()->record([=] {
            if (on->grad.empty()) return;
            ConstMapRM<S> gy(on->grad.data(), batch, d_out);
            if (xn->requires_grad) {
                xn->ensure_grad();
                MapRM<S> gx(xn->grad.data(), batch, d_in);
                ConstMapRM<S> w_mat2(wn->data.data(), d_out, d_in);
                gx.noalias() += gy * w_mat2;
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                MapRM<S> gw(wn->grad.data(), d_out, d_in);
                ConstMapRM<S> x_mat2(xn->data.data(), batch, d_in);
                gw.noalias() += gy.transpose() * x_mat2;
            }
            if (bn && bn->requires_grad) {
                bn->ensure_grad();
                Eigen::Map<Eigen::RowVector<S, Eigen::Dynamic>> gb(bn->grad.data(), d_out);
                gb += gy.colwise().sum();
            }
        });
    }
    return out;
}

enum class Reduction { Mean, Sum };

/// Cross entropy of softmax(logits) against integer labels, stabilized by
/// max subtraction. Mean reduction matches the training loss; Sum is used
/// where per-sample gradients must not depend on batch size.
template <typename S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels,
                                Reduction reduction = Reduction::Mean) {
    detail::check_rank(logits, 2, "softmax_cross_entropy logits");
    const int batch = logits.dim(0), classes = logits.dim(1);
    if (static_cast<int>(labels.size()) != batch) {
        throw ShapeError("softmax_cross_entropy: got " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(batch));
    }
    for (int label : labels) {
        if (label < 0 || label >= classes) {
            throw IndexError("label " + std::to_string(label) + " outside [0, " +
                             std::to_string(classes) + ")");
        }
    }
    auto probs = std::make_shared<std::vector<S>>(static_cast<std::size_t>(batch) * classes);
    const S* lp = logits.data();
    double total = 0.0;
    for (int n = 0; n < batch; ++n) {
        const S* row = lp + static_cast<std::int64_t>(n) * classes;
        S* prow = probs->data() + static_cast<std::int64_t>(n) * classes;
        S max_logit = row[0];
        for (int c = 1; c < classes; ++c) max_logit = std::max(max_logit, row[c]);
        double denom = 0.0;
        for (int c = 0; c < classes; ++c) {
            const double e = std::exp(static_cast<double>(row[c] - max_logit));
            prow[c] = static_cast<S>(e);
            denom += e;
        }
        for (int c = 0; c < classes; ++c) prow[c] = static_cast<S>(prow[c] / denom);
        total += std::log(denom) - static_cast<double>(row[labels[n]] - max_logit);
    }
    if (reduction == Reduction::Mean) total /= batch;
    auto out = Tensor<S>::scalar(static_cast<S>(total));

    if (detail::tracing<S>({&logits})) {
        out.set_requires_grad();
        auto ln = logits.node();
        auto on = out.node();
        auto labels_copy = std::make_shared<std::vector<int>>(labels);
        Tape<S>::current()->record([=] {
            if (on->grad.empty()) return;
            ln->ensure_grad();
            const S scale =
                on->grad[0] * (reduction == Reduction::Mean ? S(1) / S(batch) : S(1));
            for (int n = 0; n < batch; ++n) {
                S* grow = ln->grad.data() + static_cast<std::int64_t>(n) * classes;
                const S* prow = probs->data() + static_cast<std::int64_t>(n) * classes;
                for (int c = 0; c < classes; ++c) {
                    grow[c] += scale * (prow[c] - (c == (*labels_copy)[n] ? S(1) : S(0)));
                }
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    auto out = Tensor<S>::zeros(a.shape());
    const std::int64_t n = a.size();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (detail::tracing<S>({&a, &b})) {
        out.set_requires_grad();
        auto an = a.node();
        auto bn = b.node();
        auto on = out.node();
        Tape<S>::current()->record([=] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i];
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    auto out = Tensor<S>::zeros(a.shape());
    const std::int64_t n = a.size();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (detail::tracing<S>({&a, &b})) {
        out.set_requires_grad();
        auto an = a.node();
        auto bn = b.node();
        auto on = out.node();
        Tape<S>::current()->record([=] {
            if (on->grad.empty()) return;
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * bn->data[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i] * an->data[i];
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S factor) {
    auto out = Tensor<S>::zeros(x.shape());
    const std::int64_t n = x.size();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * factor;
    if (detail::tracing<S>({&x})) {
        out.set_requires_grad();
        auto xn = x.node();
        auto on = out.node();
        Tape<S>::current()->record([=] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) xn->grad[i] += on->grad[i] * factor;
        });
    }
    return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
    double total = 0.0;
    const std::int64_t n = x.size();
    for (std::int64_t i = 0; i < n; ++i) total += x.data()[i];
    auto out = Tensor<S>::scalar(static_cast<S>(total));
    if (detail::tracing<S>({&x})) {
        out.set_requires_grad();
        auto xn = x.node();
        auto on = out.node();
        Tape<S>::current()->record([=] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) xn->grad[i] += on->grad[0];
        });
    }
    return out;
}

/// [N, C, H, W] -> [N, C] spatial mean.
template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
    detail::check_rank(x, 4, "global_avg_pool input");
    const int batch = x.dim(0), channels = x.dim(1);
    const std::int64_t plane = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    auto out = Tensor<S>::zeros({batch, channels});
    for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(batch) * channels; ++nc) {
        double s = 0.0;
        const S* p = x.data() + nc * plane;
        for (std::int64_t i = 0; i < plane; ++i) s += p[i];
        out.data()[nc] = static_cast<S>(s / static_cast<double>(plane));
    }
    if (detail::tracing<S>({&x})) {
        out.set_requires_grad();
        auto xn = x.node();
        auto on = out.node();
        Tape<S>::current()->record([=] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            const S inv = S(1) / static_cast<S>(plane);
            for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(batch) * channels; ++nc) {
                const S g = on->grad[nc] * inv;
                for (std::int64_t i = 0; i < plane; ++i) xn->grad[nc * plane + i] += g;
            }
        });
    }
    return out;
}

/// Channel-wise (x - mean_c) / std_c on [N, C, H, W] input.
template <typename S>
Tensor<S> normalize_channels(const Tensor<S>& x, std::span<const double> mean,
                             std::span<const double> stddev) {
    detail::check_rank(x, 4, "normalize_channels input");
    const int channels = x.dim(1);
    if (static_cast<int>(mean.size()) != channels || static_cast<int>(stddev.size()) != channels) {
        throw ShapeError("normalize_channels statistics must match channel count");
    }
    for (double s : stddev) {
        if (!(s > 0.0)) throw ContractError("normalize_channels requires std > 0");
    }
    const int batch = x.dim(0);
    const std::int64_t plane = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    auto out = Tensor<S>::zeros(x.shape());
    for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(batch) * channels; ++nc) {
        const int c = static_cast<int>(nc % channels);
        const S m = static_cast<S>(mean[c]), inv = static_cast<S>(1.0 / stddev[c]);
        const S* src = x.data() + nc * plane;
        S* dst = out.data() + nc * plane;
        for (std::int64_t i = 0; i < plane; ++i) dst[i] = (src[i] - m) * inv;
    }
    if (detail::tracing<S>({&x})) {
        out.set_requires_grad();
        auto xn = x.node();
        auto on = out.node();
        auto inv_std = std::make_shared<std::vector<S>>(channels);
        for (int c = 0; c < channels; ++c) (*inv_std)[c] = static_cast<S>(1.0 / stddev[c]);
        Tape<S>::current()->record([=] {
            if (on->grad.empty()) return;
            xn->ensure_grad();
            for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(batch) * channels; ++nc) {
                const S inv = (*inv_std)[static_cast<std::size_t>(nc % channels)];
                for (std::int64_t i = 0; i < plane; ++i) {
                    xn->grad[nc * plane + i] += on->grad[nc * plane + i] * inv;
                }
            }
        });
    }
    return out;
}

}  // namespace anf
