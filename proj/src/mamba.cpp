#include "msom/mamba.hpp"

#include <cmath>
#include <string>

#include "msom/error.hpp"

namespace msom {

namespace {

std::vector<float>* grad_of(Node& self, std::size_t i) {
    Node& in = *self.inputs[i];
    return in.requires_grad ? &in.ensure_grad() : nullptr;
}

void expect_shape(const Tensor& t, const Shape& shape, const char* what) {
    if (!t.defined()) throw ShapeError(std::string(what) + ": undefined tensor");
    if (t.shape() != shape)
        throw ShapeError(std::string(what) + ": expected " + to_string(shape) + ", got " + to_string(t.shape()));
}

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> d(-bound, bound);
    std::vector<float> v(numel(shape));
    for (auto& x : v) x = static_cast<float>(d(rng));
    return Tensor::from(std::move(shape), std::move(v), true);
}

}  // namespace

Tensor rms_norm(const Tensor& x, const Tensor& weight, float eps) {
    if (!x.defined() || x.rank() == 0) throw ShapeError("rms_norm: input needs at least one axis");
    const std::size_t D = x.shape().back();
    expect_shape(weight, {D}, "rms_norm(weight)");
    const std::size_t rows = x.numel() / D;
    std::vector<float> out(x.numel());
    std::vector<float> inv(rows);
    auto in = x.data();
    auto w = weight.data();
    for (std::size_t r = 0; r < rows; ++r) {
        double ss = 0.0;
        for (std::size_t i = 0; i < D; ++i) ss += static_cast<double>(in[r * D + i]) * in[r * D + i];
        inv[r] = static_cast<float>(1.0 / std::sqrt(ss / static_cast<double>(D) + eps));
        for (std::size_t i = 0; i < D; ++i) out[r * D + i] = in[r * D + i] * inv[r] * w[i];
    }
    const bool rec = detail::should_record({&x, &weight});
    return detail::make_result(x.shape(), std::move(out), rec, {x, weight},
                               [rows, D, inv = std::move(inv)](Node& self) {
                                   auto* gx = grad_of(self, 0);
                                   auto* gw = grad_of(self, 1);
                                   const auto& in = self.inputs[0]->value;
                                   const auto& w = self.inputs[1]->value;
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       const float* g = &self.grad[r * D];
                                       const float* xr = &in[r * D];
                                       double dot = 0.0;
                                       for (std::size_t i = 0; i < D; ++i) dot += static_cast<double>(g[i]) * w[i] * xr[i];
                                       const double r3 = static_cast<double>(inv[r]) * inv[r] * inv[r] / static_cast<double>(D);
                                       for (std::size_t i = 0; i < D; ++i) {
                                           if (gx) (*gx)[r * D + i] += static_cast<float>(g[i] * w[i] * inv[r] - xr[i] * r3 * dot);
                                           if (gw) (*gw)[i] += g[i] * xr[i] * inv[r];
                                       }
                                   }
                               },
                               "rms_norm");
}

Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& A, const Tensor& B_in,
                      const Tensor& C_in, const Tensor& D_skip, TokenMask mask) {
    if (!u.defined() || u.rank() != 3) throw ShapeError("selective_scan: u must be [B, L, D']");
    const std::size_t Bn = u.dim(0), L = u.dim(1), Dp = u.dim(2);
    if (!A.defined() || A.rank() != 2 || A.dim(0) != Dp) throw ShapeError("selective_scan: A must be [D', N]");
    const std::size_t N = A.dim(1);
    expect_shape(delta, {Bn, L, Dp}, "selective_scan(delta)");
    expect_shape(B_in, {Bn, L, N}, "selective_scan(B)");
    expect_shape(C_in, {Bn, L, N}, "selective_scan(C)");
    expect_shape(D_skip, {Dp}, "selective_scan(D)");
    if (!mask.empty() && mask.size() != Bn * L)
        throw ShapeError("selective_scan: mask has " + std::to_string(mask.size()) + " entries, expected " +
                         std::to_string(Bn * L));
    std::vector<std::uint8_t> real(Bn * L, 1);
    if (!mask.empty())
        for (std::size_t i = 0; i < real.size(); ++i) real[i] = mask[i] != 0;

    auto uu = u.data();
    auto dt = delta.data();
    auto a = A.data();
    auto bb = B_in.data();
    auto cc = C_in.data();
    auto dd = D_skip.data();
    std::vector<float> y(Bn * L * Dp, 0.0f);
    std::vector<double> h(N);
    for (std::size_t b = 0; b < Bn; ++b)
        for (std::size_t d = 0; d < Dp; ++d) {
            std::fill(h.begin(), h.end(), 0.0);
            for (std::size_t t = 0; t < L; ++t) {
                if (!real[b * L + t]) continue;
                const std::size_t ti = (b * L + t) * Dp + d;
                const double ut = uu[ti], dtt = dt[ti];
                double acc = static_cast<double>(dd[d]) * ut;
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t si = (b * L + t) * N + n;
                    h[n] = std::exp(dtt * a[d * N + n]) * h[n] + dtt * bb[si] * ut;
                    acc += cc[si] * h[n];
                }
                if (!std::isfinite(acc))
                    throw NumericError("selective_scan: non-finite output at batch " + std::to_string(b) +
                                       ", token " + std::to_string(t) + ", channel " + std::to_string(d));
                y[ti] = static_cast<float>(acc);
            }
        }

    const bool rec = detail::should_record({&u, &delta, &A, &B_in, &C_in, &D_skip});
    return detail::make_result(
        {Bn, L, Dp}, std::move(y), rec, {u, delta, A, B_in, C_in, D_skip},
        [Bn, L, Dp, N, real = std::move(real)](Node& self) {
            auto* gu = grad_of(self, 0);
            auto* gdt = grad_of(self, 1);
            auto* gA = grad_of(self, 2);
            auto* gB = grad_of(self, 3);
            auto* gC = grad_of(self, 4);
            auto* gD = grad_of(self, 5);
            const auto& uu = self.inputs[0]->value;
            const auto& dt = self.inputs[1]->value;
            const auto& a = self.inputs[2]->value;
            const auto& bb = self.inputs[3]->value;
            const auto& cc = self.inputs[4]->value;
            const auto& dd = self.inputs[5]->value;
            const auto& gy = self.grad;
            // hs[t*N+n] = h_t; decay[t*N+n] = exp(delta_t * A)
            std::vector<double> hs(L * N), decay(L * N), gh(N);
            for (std::size_t b = 0; b < Bn; ++b)
                for (std::size_t d = 0; d < Dp; ++d) {
                    std::vector<double> prev(N, 0.0);
                    for (std::size_t t = 0; t < L; ++t) {
                        const std::size_t ti = (b * L + t) * Dp + d;
                        for (std::size_t n = 0; n < N; ++n) {
                            if (!real[b * L + t]) {
                                decay[t * N + n] = 1.0;
                                hs[t * N + n] = prev[n];
                                continue;
                            }
                            const std::size_t si = (b * L + t) * N + n;
                            decay[t * N + n] = std::exp(static_cast<double>(dt[ti]) * a[d * N + n]);
                            hs[t * N + n] = decay[t * N + n] * prev[n] + static_cast<double>(dt[ti]) * bb[si] * uu[ti];
                            prev[n] = hs[t * N + n];
                        }
                    }
                    std::fill(gh.begin(), gh.end(), 0.0);
                    double gD_acc = 0.0;
                    for (std::size_t t = L; t-- > 0;) {
                        const std::size_t ti = (b * L + t) * Dp + d;
                        if (!real[b * L + t]) continue;  // decay 1, no input: gh passes through
                        const double g = gy[ti], ut = uu[ti], dtt = dt[ti];
                        gD_acc += g * ut;
                        double gu_acc = g * dd[d], gdt_acc = 0.0;
                        for (std::size_t n = 0; n < N; ++n) {
                            const std::size_t si = (b * L + t) * N + n;
                            // gh_t = gy_t C_t + decay_{t+1} gh_{t+1}; the second term is already in gh
                            gh[n] += g * cc[si];
                            if (gC) (*gC)[si] += static_cast<float>(g * hs[t * N + n]);
                            const double h_prev = t > 0 ? hs[(t - 1) * N + n] : 0.0;
                            const double g_decay = gh[n] * h_prev * decay[t * N + n];
                            gdt_acc += g_decay * a[d * N + n] + gh[n] * bb[si] * ut;
                            if (gA) (*gA)[d * N + n] += static_cast<float>(g_decay * dtt);
                            if (gB) (*gB)[si] += static_cast<float>(gh[n] * dtt * ut);
                            gu_acc += gh[n] * dtt * bb[si];
                            gh[n] *= decay[t * N + n];
                        }
                        if (gu) (*gu)[ti] += static_cast<float>(gu_acc);
                        if (gdt) (*gdt)[ti] += static_cast<float>(gdt_acc);
                    }
                    if (gD) (*gD)[d] += static_cast<float>(gD_acc);
                }
        },
        "selective_scan");
}

MambaBlockParams MambaBlockParams::init(const MambaConfig& c, std::mt19937_64& rng) {
    if (c.d_model == 0 || c.d_state == 0 || c.conv_kernel == 0) throw UsageError("mamba: dimensions must be positive");
    const std::size_t D = c.d_model, Dp = c.inner(), N = c.d_state, R = c.rank(), k = c.conv_kernel;
    MambaBlockParams p;
    p.config = c;
    p.in_proj = uniform({D, 2 * Dp}, 1.0 / std::sqrt(static_cast<double>(D)), rng);
    p.conv_w = uniform({Dp, k}, 1.0 / std::sqrt(static_cast<double>(k)), rng);
    p.conv_b = uniform({Dp}, 1.0 / std::sqrt(static_cast<double>(k)), rng);
    p.x_proj = uniform({Dp, R + 2 * N}, 1.0 / std::sqrt(static_cast<double>(Dp)), rng);
    p.dt_proj = uniform({R, Dp}, 1.0 / std::sqrt(static_cast<double>(R)), rng);
    // softplus(bias) log-uniform in [1e-3, 1e-1]
    std::uniform_real_distribution<double> logdt(std::log(1e-3), std::log(1e-1));
    std::vector<float> bias(Dp);
    for (auto& v : bias) {
        const double step = std::exp(logdt(rng));
        v = static_cast<float>(step + std::log(-std::expm1(-step)));
    }
    p.dt_bias = Tensor::from({Dp}, std::move(bias), true);
    std::vector<float> alog(Dp * N);
    for (std::size_t d = 0; d < Dp; ++d)
        for (std::size_t n = 0; n < N; ++n) alog[d * N + n] = static_cast<float>(std::log(static_cast<double>(n + 1)));
    p.A_log = Tensor::from({Dp, N}, std::move(alog), true);
    p.D_skip = Tensor::full({Dp}, 1.0f, true);
    p.out_proj = uniform({Dp, D}, 1.0 / std::sqrt(static_cast<double>(Dp)), rng);
    p.rms_weight = Tensor::full({D}, 1.0f, true);
    return p;
}

std::vector<std::pair<std::string, Tensor*>> MambaBlockParams::named() {
    return {{"in_proj", &in_proj}, {"conv_w", &conv_w},   {"conv_b", &conv_b}, {"x_proj", &x_proj},
            {"dt_proj", &dt_proj}, {"dt_bias", &dt_bias}, {"A_log", &A_log},   {"D_skip", &D_skip},
            {"out_proj", &out_proj}, {"rms_weight", &rms_weight}};
}

Tensor mamba_block(const Tensor& G, const MambaBlockParams& p, TokenMask mask) {
    const auto& c = p.config;
    const std::size_t D = c.d_model, Dp = c.inner(), N = c.d_state, R = c.rank();
    if (!G.defined() || G.rank() != 3 || G.dim(2) != D)
        throw ShapeError("mamba_block: expected [B, L, " + std::to_string(D) + "], got " +
                         (G.defined() ? to_string(G.shape()) : std::string("undefined")));
    const Tensor xz = matmul(rms_norm(G, p.rms_weight), p.in_proj);
    const Tensor stream = slice(xz, 2, 0, Dp);
    const Tensor gate = slice(xz, 2, Dp, Dp);
    const Tensor s = silu(depthwise_conv1d(stream, p.conv_w, p.conv_b));
    const Tensor proj = matmul(s, p.x_proj);
    const Tensor dt = softplus(add(matmul(slice(proj, 2, 0, R), p.dt_proj), p.dt_bias));
    const Tensor Bm = slice(proj, 2, R, N);
    const Tensor Cm = slice(proj, 2, R + N, N);
    const Tensor A = scale(exp(p.A_log), -1.0f);
    const Tensor y = selective_scan(s, dt, A, Bm, Cm, p.D_skip, mask);
    return add(G, matmul(mul(y, silu(gate)), p.out_proj));
}

MambaStack init_mamba_stack(const MambaConfig& config, std::mt19937_64& rng) {
    MambaStack s;
    for (auto& b : s) b = MambaBlockParams::init(config, rng);
    return s;
}

Tensor mamba_stack(const Tensor& G, const MambaStack& blocks, TokenMask mask) {
    Tensor x = G;
    for (const auto& b : blocks) x = mamba_block(x, b, mask);
    return x;
}

}  // namespace msom
