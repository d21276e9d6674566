#pragma once

// Dual-branch segmentation model: a full-resolution residual conv branch and
// a superpixel-token branch through the Mamba stack, fused by adding logits.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "msom/mamba.hpp"
#include "msom/superpixel.hpp"
#include "msom/tensor.hpp"

namespace msom {

struct GLocalConfig {
    std::size_t in_channels = 10;
    std::size_t hidden = 64;
    std::size_t classes = 13;
    std::size_t n_max = 600;
    std::size_t d_state = 16;
    std::size_t conv_kernel = 4;

    MambaConfig mamba() const { return {.d_model = hidden, .d_state = d_state, .conv_kernel = conv_kernel}; }
    nlohmann::json to_json() const;
    static GLocalConfig from_json(const nlohmann::json& j);
};

// conv3x3 -> affine -> relu -> conv3x3 -> affine, plus skip, then relu.
// The skip is a 1x1 conv when the channel count changes.
struct ResidualBlock {
    Tensor conv1, scale1, shift1;
    Tensor conv2, scale2, shift2;
    Tensor skip;  // [D, Cin, 1, 1] or undefined

    static ResidualBlock init(std::size_t in, std::size_t out, std::mt19937_64& rng);
    std::vector<std::pair<std::string, Tensor*>> named();
};

struct GLocalParams {
    GLocalConfig config;
    ResidualBlock block1, block2;
    Tensor local_head_w;  // [K, D, 1, 1]
    Tensor local_head_b;  // [K]
    MambaStack mamba;
    Tensor global_w;  // [D, K]
    Tensor global_b;  // [K]

    static GLocalParams init(const GLocalConfig& config, std::uint64_t seed);
    std::vector<std::pair<std::string, Tensor*>> named();
    std::vector<Tensor> parameters();
};

// x [B, C, H, W]; scale, shift [C].
Tensor channel_affine(const Tensor& x, const Tensor& scale, const Tensor& shift);

Tensor residual_block(const Tensor& x, const ResidualBlock& block);

struct LocalOutputs {
    Tensor f_local;  // [B, D, H, W]
    Tensor m_local;  // [B, K, H, W]
};
LocalOutputs local_branch(const Tensor& x, const GLocalParams& params);

struct Tokens {
    Tensor g;                          // [B, N_max, D]
    std::vector<std::uint8_t> mask;    // [B * N_max]
};
// Mean of F over each superpixel; rows past n_sp are zero and masked.
Tokens aggregate_superpixels(const Tensor& f_local, std::span<const SuperpixelMap> maps, std::size_t n_max);

Tensor global_head(const Tensor& g_out, const Tensor& weight, const Tensor& bias);

// out[b, k, y, x] = tokens[b, S_b(y, x), k]
Tensor remap(const Tensor& tokens, std::span<const SuperpixelMap> maps);

Tensor vote(const Tensor& m_local, const Tensor& m_global_up);

struct GLocalOutputs {
    Tensor m_local, m_global_up, m_final;  // [B, K, H, W]
    Tensor g_tokens;                       // [B, N_max, K]
    std::vector<std::uint8_t> token_mask;  // [B * N_max]
};
GLocalOutputs forward(const Tensor& x, std::span<const SuperpixelMap> maps, const GLocalParams& params);

// One file: a JSON header line (config, tensor table, free-form meta) followed
// by every tensor as raw little-endian f32 in table order.
void save_checkpoint(const std::filesystem::path& path, GLocalParams& params, const nlohmann::json& meta = {});
GLocalParams load_checkpoint(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

}  // namespace msom
