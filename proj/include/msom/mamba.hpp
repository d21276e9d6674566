#pragma once

// Selective state-space blocks over token sequences [B, L, D].

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "msom/tensor.hpp"

namespace msom {

// Token mask [B * L]: non-zero marks a real token. An empty span means every
// token is real.
using TokenMask = std::span<const std::uint8_t>;

// y = x / sqrt(mean(x^2) + eps) * weight over the last axis.
Tensor rms_norm(const Tensor& x, const Tensor& weight, float eps = 1e-5f);

// Diagonal selective scan per (batch, channel d, state n):
//   h_t = exp(delta_t * A[d,n]) * h_{t-1} + delta_t * B_t[n] * u_t
//   y_t = sum_n C_t[n] * h_t[n] + D[d] * u_t
// u, delta [B, L, D'], A [D', N], B_in, C_in [B, L, N], D_skip [D'].
// Masked tokens leave the state untouched and output zero. The backward pass
// recomputes states instead of storing them.
Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& A, const Tensor& B_in,
                      const Tensor& C_in, const Tensor& D_skip, TokenMask mask = {});

struct MambaConfig {
    std::size_t d_model = 64;
    std::size_t d_state = 16;
    std::size_t conv_kernel = 4;
    std::size_t dt_rank = 0;  // 0 means ceil(d_model / 16)

    std::size_t inner() const { return 2 * d_model; }
    std::size_t rank() const { return dt_rank ? dt_rank : (d_model + 15) / 16; }
};

// Projection matrices are stored [in, out] so they apply as x @ W.
struct MambaBlockParams {
    MambaConfig config;
    Tensor in_proj;    // [D, 2D']
    Tensor conv_w;     // [D', k]
    Tensor conv_b;     // [D']
    Tensor x_proj;     // [D', R + 2N]
    Tensor dt_proj;    // [R, D']
    Tensor dt_bias;    // [D']
    Tensor A_log;      // [D', N]
    Tensor D_skip;     // [D']
    Tensor out_proj;   // [D', D]
    Tensor rms_weight; // [D]

    static MambaBlockParams init(const MambaConfig& config, std::mt19937_64& rng);
    std::vector<std::pair<std::string, Tensor*>> named();
};

Tensor mamba_block(const Tensor& G, const MambaBlockParams& p, TokenMask mask = {});

inline constexpr std::size_t kMambaDepth = 4;
using MambaStack = std::array<MambaBlockParams, kMambaDepth>;

MambaStack init_mamba_stack(const MambaConfig& config, std::mt19937_64& rng);
Tensor mamba_stack(const Tensor& G, const MambaStack& blocks, TokenMask mask = {});

}  // namespace msom
