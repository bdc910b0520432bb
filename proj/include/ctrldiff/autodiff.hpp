#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "ctrldiff/blas.hpp"
#include "ctrldiff/common.hpp"
#include "ctrldiff/registry.hpp"
#include "ctrldiff/tensor.hpp"

namespace ctrldiff {

// Reverse-mode autodiff over a dynamic tape. Each training step rebuilds the
// graph; parameters persist outside it and collect gradients in
// Parameter::grad. Backward closures receive their own node, so nodes never
// hold a reference to themselves and the tape frees cleanly.
template <typename Real>
struct Node {
    Tensor<Real> value;
    Tensor<Real> grad;  // lazily allocated; empty means "not on the loss path"
    bool requires_grad = false;
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.empty()) grad = Tensor<Real>::zeros(value.shape());
    }
};

template <typename Real>
using Var = std::shared_ptr<Node<Real>>;

namespace detail {

// col[(ci*KH+kh)*KW+kw][oh*WO+ow] = x[ci][oh*s-p+kh][ow*s-p+kw], zero outside
template <typename Real>
void im2col(const Real* x, int C, int H, int W, int KH, int KW, int stride, int pad, int HO,
            int WO, Real* col) {
    for (int ci = 0; ci < C; ++ci) {
        for (int kh = 0; kh < KH; ++kh) {
            for (int kw = 0; kw < KW; ++kw) {
                Real* dst = col + (static_cast<int64_t>((ci * KH + kh) * KW + kw)) * (HO * WO);
                const Real* src = x + static_cast<int64_t>(ci) * H * W;
                for (int oh = 0; oh < HO; ++oh) {
                    int ih = oh * stride - pad + kh;
                    if (ih < 0 || ih >= H) {
                        for (int ow = 0; ow < WO; ++ow) dst[oh * WO + ow] = Real(0);
                        continue;
                    }
                    for (int ow = 0; ow < WO; ++ow) {
                        int iw = ow * stride - pad + kw;
                        dst[oh * WO + ow] =
                            (iw < 0 || iw >= W) ? Real(0) : src[ih * W + iw];
                    }
                }
            }
        }
    }
}

// scatter-add the columns back into the input layout
template <typename Real>
void col2im_add(const Real* col, int C, int H, int W, int KH, int KW, int stride, int pad,
                int HO, int WO, Real* x) {
    for (int ci = 0; ci < C; ++ci) {
        for (int kh = 0; kh < KH; ++kh) {
            for (int kw = 0; kw < KW; ++kw) {
                const Real* src = col + (static_cast<int64_t>((ci * KH + kh) * KW + kw)) * (HO * WO);
                Real* dst = x + static_cast<int64_t>(ci) * H * W;
                for (int oh = 0; oh < HO; ++oh) {
                    int ih = oh * stride - pad + kh;
                    if (ih < 0 || ih >= H) continue;
                    for (int ow = 0; ow < WO; ++ow) {
                        int iw = ow * stride - pad + kw;
                        if (iw >= 0 && iw < W) dst[ih * W + iw] += src[oh * WO + ow];
                    }
                }
            }
        }
    }
}

template <typename Real>
Real sigmoid(Real x) {
    return Real(1) / (Real(1) + std::exp(-x));
}

}  // namespace detail

template <typename Real>
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }

    Var<Real> input(Tensor<Real> v) {
        auto n = std::make_shared<Node<Real>>();
        n->value = std::move(v);
        order_.push_back(n);
        return n;
    }

    // Parameter leaf; memoized so repeated uses share one node.
    Var<Real> use(const ParamPtr<Real>& p) {
        auto it = param_nodes_.find(p.get());
        if (it != param_nodes_.end()) return it->second;
        auto n = std::make_shared<Node<Real>>();
        n->value = p->value;
        n->requires_grad = grad_enabled_ && p->trainable;
        if (n->requires_grad) {
            ParamPtr<Real> ph = p;
            n->backward = [ph](Node<Real>& self) {
                for (int64_t i = 0; i < self.grad.numel(); ++i) ph->grad[i] += self.grad[i];
            };
        }
        order_.push_back(n);
        param_nodes_[p.get()] = n;
        return n;
    }

    Var<Real> add(Var<Real> a, Var<Real> b) {
        require_same_shape(a->value, b->value, "add");
        Tensor<Real> out(a->value.shape());
        for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + b->value[i];
        return make(std::move(out), {a, b}, [a, b](Node<Real>& self) {
            accumulate(a, self.grad, Real(1));
            accumulate(b, self.grad, Real(1));
        });
    }

    Var<Real> axpby(Real alpha, Var<Real> a, Real beta, Var<Real> b) {
        require_same_shape(a->value, b->value, "axpby");
        Tensor<Real> out(a->value.shape());
        for (int64_t i = 0; i < out.numel(); ++i) out[i] = alpha * a->value[i] + beta * b->value[i];
        return make(std::move(out), {a, b}, [a, b, alpha, beta](Node<Real>& self) {
            accumulate(a, self.grad, alpha);
            accumulate(b, self.grad, beta);
        });
    }

    Var<Real> scale(Var<Real> a, Real s) {
        Tensor<Real> out(a->value.shape());
        for (int64_t i = 0; i < out.numel(); ++i) out[i] = s * a->value[i];
        return make(std::move(out), {a}, [a, s](Node<Real>& self) {
            accumulate(a, self.grad, s);
        });
    }

    // out_n = ca[n] * a_n + cb[n] * b_n over the leading (batch) axis
    Var<Real> combine_per_sample(Var<Real> a, Var<Real> b, std::vector<Real> ca,
                                 std::vector<Real> cb) {
        require_same_shape(a->value, b->value, "combine_per_sample");
        int64_t n_batch = a->value.dim(0);
        check(static_cast<int64_t>(ca.size()) == n_batch && ca.size() == cb.size(),
              "combine_per_sample: coefficient count mismatch");
        int64_t per = a->value.numel() / n_batch;
        Tensor<Real> out(a->value.shape());
        for (int64_t n = 0; n < n_batch; ++n) {
            for (int64_t i = 0; i < per; ++i) {
                int64_t j = n * per + i;
                out[j] = ca[static_cast<size_t>(n)] * a->value[j] +
                         cb[static_cast<size_t>(n)] * b->value[j];
            }
        }
        return make(std::move(out), {a, b}, [a, b, ca, cb, n_batch, per](Node<Real>& self) {
            if (a->requires_grad) {
                a->ensure_grad();
                for (int64_t n = 0; n < n_batch; ++n)
                    for (int64_t i = 0; i < per; ++i)
                        a->grad[n * per + i] += ca[static_cast<size_t>(n)] * self.grad[n * per + i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (int64_t n = 0; n < n_batch; ++n)
                    for (int64_t i = 0; i < per; ++i)
                        b->grad[n * per + i] += cb[static_cast<size_t>(n)] * self.grad[n * per + i];
            }
        });
    }

    Var<Real> silu(Var<Real> x) {
        Tensor<Real> out(x->value.shape());
        for (int64_t i = 0; i < out.numel(); ++i) {
            Real v = x->value[i];
            out[i] = v * detail::sigmoid(v);
        }
        return make(std::move(out), {x}, [x](Node<Real>& self) {
            if (!x->requires_grad) return;
            x->ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i) {
                Real v = x->value[i];
                Real s = detail::sigmoid(v);
                x->grad[i] += self.grad[i] * s * (Real(1) + v * (Real(1) - s));
            }
        });
    }

    // x: (N,CI,H,W), w: (CO,CI,KH,KW), b: (CO)
    Var<Real> conv2d(Var<Real> x, Var<Real> w, Var<Real> b, int stride, int pad) {
        const auto& xs = x->value.shape();
        const auto& ws = w->value.shape();
        check(xs.size() == 4 && ws.size() == 4, "conv2d expects 4-axis input and kernel");
        check(xs[1] == ws[1], "conv2d: channel mismatch, input " + x->value.shape_str() +
                                  " vs kernel " + w->value.shape_str());
        int N = static_cast<int>(xs[0]), CI = static_cast<int>(xs[1]);
        int H = static_cast<int>(xs[2]), W = static_cast<int>(xs[3]);
        int CO = static_cast<int>(ws[0]), KH = static_cast<int>(ws[2]), KW = static_cast<int>(ws[3]);
        int HO = (H + 2 * pad - KH) / stride + 1;
        int WO = (W + 2 * pad - KW) / stride + 1;
        check(HO > 0 && WO > 0, "conv2d: empty output");
        int K = CI * KH * KW, NO = HO * WO;

        Tensor<Real> out({xs[0], ws[0], HO, WO});
        std::vector<Real> col(static_cast<size_t>(K) * NO);
        for (int n = 0; n < N; ++n) {
            detail::im2col(x->value.data() + static_cast<int64_t>(n) * CI * H * W, CI, H, W, KH,
                           KW, stride, pad, HO, WO, col.data());
            Real* y = out.data() + static_cast<int64_t>(n) * CO * NO;
            gemm(false, false, CO, NO, K, Real(1), w->value.data(), K, col.data(), NO, Real(0), y,
                 NO);
            for (int co = 0; co < CO; ++co) {
                Real bias = b->value[co];
                for (int i = 0; i < NO; ++i) y[static_cast<int64_t>(co) * NO + i] += bias;
            }
        }
        return make(std::move(out), {x, w, b},
                    [x, w, b, N, CI, H, W, CO, KH, KW, stride, pad, HO, WO, K,
                     NO](Node<Real>& self) {
                        std::vector<Real> col(static_cast<size_t>(K) * NO);
                        std::vector<Real> dcol;
                        if (x->requires_grad) {
                            dcol.resize(static_cast<size_t>(K) * NO);
                            x->ensure_grad();
                        }
                        if (w->requires_grad) w->ensure_grad();
                        if (b->requires_grad) b->ensure_grad();
                        for (int n = 0; n < N; ++n) {
                            const Real* dy = self.grad.data() + static_cast<int64_t>(n) * CO * NO;
                            if (w->requires_grad || x->requires_grad) {
                                detail::im2col(
                                    x->value.data() + static_cast<int64_t>(n) * CI * H * W, CI, H,
                                    W, KH, KW, stride, pad, HO, WO, col.data());
                            }
                            if (w->requires_grad) {
                                // dW += dY * col^T
                                gemm(false, true, CO, K, NO, Real(1), dy, NO, col.data(), NO,
                                     Real(1), w->grad.data(), K);
                            }
                            if (x->requires_grad) {
                                // dcol = W^T * dY, then scatter back
                                gemm(true, false, K, NO, CO, Real(1), w->value.data(), K, dy, NO,
                                     Real(0), dcol.data(), NO);
                                detail::col2im_add(dcol.data(), CI, H, W, KH, KW, stride, pad, HO,
                                                   WO,
                                                   x->grad.data() +
                                                       static_cast<int64_t>(n) * CI * H * W);
                            }
                            if (b->requires_grad) {
                                for (int co = 0; co < CO; ++co) {
                                    Real s = Real(0);
                                    for (int i = 0; i < NO; ++i)
                                        s += dy[static_cast<int64_t>(co) * NO + i];
                                    b->grad[co] += s;
                                }
                            }
                        }
                    });
    }

    // x: (N,FI), w: (FO,FI), b: (FO)
    Var<Real> linear(Var<Real> x, Var<Real> w, Var<Real> b) {
        const auto& xs = x->value.shape();
        const auto& ws = w->value.shape();
        check(xs.size() == 2 && ws.size() == 2 && xs[1] == ws[1],
              "linear: incompatible shapes " + x->value.shape_str() + " and " +
                  w->value.shape_str());
        int N = static_cast<int>(xs[0]), FI = static_cast<int>(xs[1]), FO = static_cast<int>(ws[0]);
        Tensor<Real> out({xs[0], ws[0]});
        gemm(false, true, N, FO, FI, Real(1), x->value.data(), FI, w->value.data(), FI, Real(0),
             out.data(), FO);
        for (int n = 0; n < N; ++n)
            for (int f = 0; f < FO; ++f) out[static_cast<int64_t>(n) * FO + f] += b->value[f];
        return make(std::move(out), {x, w, b}, [x, w, b, N, FI, FO](Node<Real>& self) {
            if (x->requires_grad) {
                x->ensure_grad();
                gemm(false, false, N, FI, FO, Real(1), self.grad.data(), FO, w->value.data(), FI,
                     Real(1), x->grad.data(), FI);
            }
            if (w->requires_grad) {
                w->ensure_grad();
                gemm(true, false, FO, FI, N, Real(1), self.grad.data(), FO, x->value.data(), FI,
                     Real(1), w->grad.data(), FI);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (int n = 0; n < N; ++n)
                    for (int f = 0; f < FO; ++f)
                        b->grad[f] += self.grad[static_cast<int64_t>(n) * FO + f];
            }
        });
    }

    // Per-(sample, group) statistics over (channels-in-group, H, W).
    Var<Real> group_norm(Var<Real> x, Var<Real> gamma, Var<Real> beta, int groups, Real eps) {
        const auto& xs = x->value.shape();
        check(xs.size() == 4, "group_norm expects a feature map");
        int N = static_cast<int>(xs[0]), C = static_cast<int>(xs[1]);
        int HW = static_cast<int>(xs[2] * xs[3]);
        check(C % groups == 0, "group_norm: channels " + std::to_string(C) +
                                   " not divisible by groups " + std::to_string(groups));
        int GS = C / groups;
        int64_t m = static_cast<int64_t>(GS) * HW;

        auto mu = std::make_shared<Tensor<Real>>(Tensor<Real>::zeros({xs[0], groups}));
        auto inv = std::make_shared<Tensor<Real>>(Tensor<Real>::zeros({xs[0], groups}));
        Tensor<Real> out(xs);
        for (int n = 0; n < N; ++n) {
            for (int g = 0; g < groups; ++g) {
                const Real* base = x->value.data() + (static_cast<int64_t>(n) * C + g * GS) * HW;
                Real s = Real(0);
                for (int64_t i = 0; i < m; ++i) s += base[i];
                Real mean = s / static_cast<Real>(m);
                Real v = Real(0);
                for (int64_t i = 0; i < m; ++i) {
                    Real d = base[i] - mean;
                    v += d * d;
                }
                v /= static_cast<Real>(m);
                Real is = Real(1) / std::sqrt(v + eps);
                (*mu)[static_cast<int64_t>(n) * groups + g] = mean;
                (*inv)[static_cast<int64_t>(n) * groups + g] = is;
                Real* dst = out.data() + (static_cast<int64_t>(n) * C + g * GS) * HW;
                for (int c = 0; c < GS; ++c) {
                    Real ga = gamma->value[g * GS + c];
                    Real be = beta->value[g * GS + c];
                    for (int i = 0; i < HW; ++i) {
                        dst[static_cast<int64_t>(c) * HW + i] =
                            ga * (base[static_cast<int64_t>(c) * HW + i] - mean) * is + be;
                    }
                }
            }
        }
        return make(std::move(out), {x, gamma, beta},
                    [x, gamma, beta, mu, inv, N, C, HW, groups, GS, m](Node<Real>& self) {
                        if (x->requires_grad) x->ensure_grad();
                        if (gamma->requires_grad) gamma->ensure_grad();
                        if (beta->requires_grad) beta->ensure_grad();
                        for (int n = 0; n < N; ++n) {
                            for (int g = 0; g < groups; ++g) {
                                int64_t off = (static_cast<int64_t>(n) * C + g * GS) * HW;
                                const Real* xv = x->value.data() + off;
                                const Real* dy = self.grad.data() + off;
                                Real mean = (*mu)[static_cast<int64_t>(n) * groups + g];
                                Real is = (*inv)[static_cast<int64_t>(n) * groups + g];
                                if (gamma->requires_grad || beta->requires_grad) {
                                    for (int c = 0; c < GS; ++c) {
                                        Real dg = Real(0), db = Real(0);
                                        for (int i = 0; i < HW; ++i) {
                                            Real d = dy[static_cast<int64_t>(c) * HW + i];
                                            dg += d * (xv[static_cast<int64_t>(c) * HW + i] - mean) * is;
                                            db += d;
                                        }
                                        if (gamma->requires_grad) gamma->grad[g * GS + c] += dg;
                                        if (beta->requires_grad) beta->grad[g * GS + c] += db;
                                    }
                                }
                                if (!x->requires_grad) continue;
                                Real s1 = Real(0), s2 = Real(0);
                                for (int c = 0; c < GS; ++c) {
                                    Real ga = gamma->value[g * GS + c];
                                    for (int i = 0; i < HW; ++i) {
                                        int64_t j = static_cast<int64_t>(c) * HW + i;
                                        Real gi = dy[j] * ga;
                                        s1 += gi;
                                        s2 += gi * (xv[j] - mean) * is;
                                    }
                                }
                                Real inv_m = Real(1) / static_cast<Real>(m);
                                Real* dx = x->grad.data() + off;
                                for (int c = 0; c < GS; ++c) {
                                    Real ga = gamma->value[g * GS + c];
                                    for (int i = 0; i < HW; ++i) {
                                        int64_t j = static_cast<int64_t>(c) * HW + i;
                                        Real xh = (xv[j] - mean) * is;
                                        dx[j] += is * (dy[j] * ga - s1 * inv_m - xh * s2 * inv_m);
                                    }
                                }
                            }
                        }
                    });
    }

    // Normalizes x_c with per-(sample, channel) statistics taken from x_m,
    // then scales by the per-channel gamma. Gradients flow into x_c, x_m
    // (through the statistics) and gamma.
    Var<Real> cross_norm(Var<Real> x_c, Var<Real> x_m, Var<Real> gamma, Real eps) {
        const auto& cs = x_c->value.shape();
        const auto& ms = x_m->value.shape();
        check(cs.size() == 4 && ms.size() == 4, "cross_norm expects feature maps");
        check(cs[1] == ms[1], "cross_norm: channel mismatch, " + x_c->value.shape_str() + " vs " +
                                  x_m->value.shape_str());
        check(cs[0] == ms[0], "cross_norm: batch mismatch");
        check(gamma->value.numel() == cs[1], "cross_norm: gamma size mismatch");
        int N = static_cast<int>(cs[0]), C = static_cast<int>(cs[1]);
        int HWc = static_cast<int>(cs[2] * cs[3]);
        int HWm = static_cast<int>(ms[2] * ms[3]);

        auto mu = std::make_shared<Tensor<Real>>(Tensor<Real>::zeros({cs[0], cs[1]}));
        auto inv = std::make_shared<Tensor<Real>>(Tensor<Real>::zeros({cs[0], cs[1]}));
        Tensor<Real> out(cs);
        for (int n = 0; n < N; ++n) {
            for (int c = 0; c < C; ++c) {
                const Real* xm = x_m->value.data() + (static_cast<int64_t>(n) * C + c) * HWm;
                Real s = Real(0);
                for (int i = 0; i < HWm; ++i) s += xm[i];
                Real mean = s / static_cast<Real>(HWm);
                Real v = Real(0);
                for (int i = 0; i < HWm; ++i) {
                    Real d = xm[i] - mean;
                    v += d * d;
                }
                v /= static_cast<Real>(HWm);  // biased, divide-by-n
                Real is = Real(1) / std::sqrt(v + eps);
                check(std::isfinite(static_cast<double>(mean)) &&
                          std::isfinite(static_cast<double>(is)),
                      "cross_norm: non-finite statistics");
                (*mu)[static_cast<int64_t>(n) * C + c] = mean;
                (*inv)[static_cast<int64_t>(n) * C + c] = is;
                const Real* xc = x_c->value.data() + (static_cast<int64_t>(n) * C + c) * HWc;
                Real* y = out.data() + (static_cast<int64_t>(n) * C + c) * HWc;
                Real ga = gamma->value[c];
                for (int i = 0; i < HWc; ++i) y[i] = ga * (xc[i] - mean) * is;
            }
        }
        return make(std::move(out), {x_c, x_m, gamma},
                    [x_c, x_m, gamma, mu, inv, N, C, HWc, HWm](Node<Real>& self) {
                        if (x_c->requires_grad) x_c->ensure_grad();
                        if (x_m->requires_grad) x_m->ensure_grad();
                        if (gamma->requires_grad) gamma->ensure_grad();
                        for (int n = 0; n < N; ++n) {
                            for (int c = 0; c < C; ++c) {
                                int64_t oc = (static_cast<int64_t>(n) * C + c) * HWc;
                                int64_t om = (static_cast<int64_t>(n) * C + c) * HWm;
                                Real mean = (*mu)[static_cast<int64_t>(n) * C + c];
                                Real is = (*inv)[static_cast<int64_t>(n) * C + c];
                                Real ga = gamma->value[c];
                                const Real* dy = self.grad.data() + oc;
                                const Real* xc = x_c->value.data() + oc;
                                if (gamma->requires_grad) {
                                    Real dg = Real(0);
                                    for (int i = 0; i < HWc; ++i)
                                        dg += dy[i] * (xc[i] - mean) * is;
                                    gamma->grad[c] += dg;
                                }
                                if (x_c->requires_grad) {
                                    Real* dxc = x_c->grad.data() + oc;
                                    for (int i = 0; i < HWc; ++i) dxc[i] += dy[i] * ga * is;
                                }
                                if (x_m->requires_grad) {
                                    // dmu = -ga*is * sum(dy); dvar = -ga/2 * is^3 * sum(dy*(xc-mu))
                                    Real sum_dy = Real(0), sum_dyd = Real(0);
                                    for (int i = 0; i < HWc; ++i) {
                                        sum_dy += dy[i];
                                        sum_dyd += dy[i] * (xc[i] - mean);
                                    }
                                    Real dmu = -ga * is * sum_dy;
                                    Real dvar = -ga * Real(0.5) * is * is * is * sum_dyd;
                                    const Real* xm = x_m->value.data() + om;
                                    Real* dxm = x_m->grad.data() + om;
                                    Real inv_m = Real(1) / static_cast<Real>(HWm);
                                    for (int i = 0; i < HWm; ++i) {
                                        dxm[i] += dmu * inv_m +
                                                  dvar * Real(2) * (xm[i] - mean) * inv_m;
                                    }
                                }
                            }
                        }
                    });
    }

    Var<Real> upsample_nearest2x(Var<Real> x) {
        const auto& xs = x->value.shape();
        check(xs.size() == 4, "upsample expects a feature map");
        int N = static_cast<int>(xs[0]), C = static_cast<int>(xs[1]);
        int H = static_cast<int>(xs[2]), W = static_cast<int>(xs[3]);
        Tensor<Real> out({xs[0], xs[1], xs[2] * 2, xs[3] * 2});
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) {
                        Real v = x->value.at(n, c, h, w);
                        out.at(n, c, 2 * h, 2 * w) = v;
                        out.at(n, c, 2 * h, 2 * w + 1) = v;
                        out.at(n, c, 2 * h + 1, 2 * w) = v;
                        out.at(n, c, 2 * h + 1, 2 * w + 1) = v;
                    }
        return make(std::move(out), {x}, [x, N, C, H, W](Node<Real>& self) {
            if (!x->requires_grad) return;
            x->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c)
                    for (int h = 0; h < H; ++h)
                        for (int w = 0; w < W; ++w) {
                            x->grad.at(n, c, h, w) += self.grad.at(n, c, 2 * h, 2 * w) +
                                                      self.grad.at(n, c, 2 * h, 2 * w + 1) +
                                                      self.grad.at(n, c, 2 * h + 1, 2 * w) +
                                                      self.grad.at(n, c, 2 * h + 1, 2 * w + 1);
                        }
        });
    }

    Var<Real> concat_ch(Var<Real> a, Var<Real> b) {
        const auto& as = a->value.shape();
        const auto& bs = b->value.shape();
        check(as.size() == 4 && bs.size() == 4 && as[0] == bs[0] && as[2] == bs[2] &&
                  as[3] == bs[3],
              "concat_ch: incompatible shapes " + a->value.shape_str() + " and " +
                  b->value.shape_str());
        int64_t N = as[0], Ca = as[1], Cb = bs[1], HW = as[2] * as[3];
        Tensor<Real> out({N, Ca + Cb, as[2], as[3]});
        for (int64_t n = 0; n < N; ++n) {
            Real* dst = out.data() + n * (Ca + Cb) * HW;
            const Real* pa = a->value.data() + n * Ca * HW;
            const Real* pb = b->value.data() + n * Cb * HW;
            std::copy(pa, pa + Ca * HW, dst);
            std::copy(pb, pb + Cb * HW, dst + Ca * HW);
        }
        return make(std::move(out), {a, b}, [a, b, N, Ca, Cb, HW](Node<Real>& self) {
            if (a->requires_grad) {
                a->ensure_grad();
                for (int64_t n = 0; n < N; ++n) {
                    const Real* g = self.grad.data() + n * (Ca + Cb) * HW;
                    Real* dst = a->grad.data() + n * Ca * HW;
                    for (int64_t i = 0; i < Ca * HW; ++i) dst[i] += g[i];
                }
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (int64_t n = 0; n < N; ++n) {
                    const Real* g = self.grad.data() + n * (Ca + Cb) * HW + Ca * HW;
                    Real* dst = b->grad.data() + n * Cb * HW;
                    for (int64_t i = 0; i < Cb * HW; ++i) dst[i] += g[i];
                }
            }
        });
    }

    // x: (N,C,H,W) + e: (N,C) broadcast over spatial axes
    Var<Real> add_bias_nc(Var<Real> x, Var<Real> e) {
        const auto& xs = x->value.shape();
        const auto& es = e->value.shape();
        check(xs.size() == 4 && es.size() == 2 && xs[0] == es[0] && xs[1] == es[1],
              "add_bias_nc: incompatible shapes");
        int64_t N = xs[0], C = xs[1], HW = xs[2] * xs[3];
        Tensor<Real> out(xs);
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                Real bias = e->value[n * C + c];
                const Real* src = x->value.data() + (n * C + c) * HW;
                Real* dst = out.data() + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) dst[i] = src[i] + bias;
            }
        return make(std::move(out), {x, e}, [x, e, N, C, HW](Node<Real>& self) {
            if (x->requires_grad) accumulate(x, self.grad, Real(1));
            if (e->requires_grad) {
                e->ensure_grad();
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < C; ++c) {
                        const Real* g = self.grad.data() + (n * C + c) * HW;
                        Real s = Real(0);
                        for (int64_t i = 0; i < HW; ++i) s += g[i];
                        e->grad[n * C + c] += s;
                    }
            }
        });
    }

    // (1/N) * sum_n w_n * mean_i((pred - target)_{n,i}^2), a scalar node
    Var<Real> weighted_mse(Var<Real> pred, Tensor<Real> target, std::vector<Real> weights) {
        require_same_shape(pred->value, target, "weighted_mse");
        int64_t n_batch = pred->value.dim(0);
        check(static_cast<int64_t>(weights.size()) == n_batch, "weighted_mse: weight count");
        int64_t per = pred->value.numel() / n_batch;
        auto tgt = std::make_shared<Tensor<Real>>(std::move(target));
        double acc = 0.0;
        for (int64_t n = 0; n < n_batch; ++n) {
            double s = 0.0;
            for (int64_t i = 0; i < per; ++i) {
                int64_t j = n * per + i;
                double d = static_cast<double>(pred->value[j]) - static_cast<double>((*tgt)[j]);
                s += d * d;
            }
            acc += static_cast<double>(weights[static_cast<size_t>(n)]) * s /
                   static_cast<double>(per);
        }
        Tensor<Real> out({1});
        out[0] = static_cast<Real>(acc / static_cast<double>(n_batch));
        return make(std::move(out), {pred}, [pred, tgt, weights, n_batch, per](Node<Real>& self) {
            if (!pred->requires_grad) return;
            pred->ensure_grad();
            Real g = self.grad[0];
            for (int64_t n = 0; n < n_batch; ++n) {
                Real c = g * Real(2) * weights[static_cast<size_t>(n)] /
                         static_cast<Real>(per * n_batch);
                for (int64_t i = 0; i < per; ++i) {
                    int64_t j = n * per + i;
                    pred->grad[j] += c * (pred->value[j] - (*tgt)[j]);
                }
            }
        });
    }

    Var<Real> mse(Var<Real> pred, Tensor<Real> target) {
        int64_t n_batch = pred->value.dim(0);
        return weighted_mse(std::move(pred), std::move(target),
                            std::vector<Real>(static_cast<size_t>(n_batch), Real(1)));
    }

    // Reverse sweep from a scalar loss; gradients land in Parameter::grad.
    void backward(const Var<Real>& loss) {
        check(loss->value.numel() == 1, "backward needs a scalar loss");
        check(grad_enabled_, "backward on an inference tape");
        loss->ensure_grad();
        loss->grad[0] = Real(1);
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            Node<Real>& n = **it;
            if (n.requires_grad && n.backward && !n.grad.empty()) n.backward(n);
        }
    }

private:
    Var<Real> make(Tensor<Real> value, std::initializer_list<Var<Real>> parents,
                   std::function<void(Node<Real>&)> bw) {
        auto n = std::make_shared<Node<Real>>();
        n->value = std::move(value);
        if (grad_enabled_) {
            for (const auto& p : parents) {
                if (p->requires_grad) {
                    n->requires_grad = true;
                    break;
                }
            }
            if (n->requires_grad) n->backward = std::move(bw);
        }
        order_.push_back(n);
        return n;
    }

    static void accumulate(const Var<Real>& dst, const Tensor<Real>& g, Real scale) {
        if (!dst->requires_grad) return;
        dst->ensure_grad();
        if (scale == Real(1)) {
            for (int64_t i = 0; i < g.numel(); ++i) dst->grad[i] += g[i];
        } else {
            for (int64_t i = 0; i < g.numel(); ++i) dst->grad[i] += scale * g[i];
        }
    }

    std::vector<Var<Real>> order_;
    std::unordered_map<Parameter<Real>*, Var<Real>> param_nodes_;
    bool grad_enabled_;
};

}  // namespace ctrldiff
