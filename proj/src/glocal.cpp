#include "msom/glocal.hpp"

#include <cmath>
#include <map>

#include "msom/error.hpp"
#include "msom/io.hpp"

namespace msom {

namespace {

constexpr const char* kCheckpointFormat = "msom-checkpoint";

std::vector<float>* grad_of(Node& self, std::size_t i) {
    Node& in = *self.inputs[i];
    return in.requires_grad ? &in.ensure_grad() : nullptr;
}

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> d(-bound, bound);
    std::vector<float> v(numel(shape));
    for (auto& x : v) x = static_cast<float>(d(rng));
    return Tensor::from(std::move(shape), std::move(v), true);
}

// He-uniform for convs feeding a relu.
Tensor conv_weight(std::size_t out, std::size_t in, std::size_t k, std::mt19937_64& rng) {
    return uniform({out, in, k, k}, std::sqrt(6.0 / static_cast<double>(in * k * k)), rng);
}

void check_maps(std::span<const SuperpixelMap> maps, std::size_t B, std::size_t H, std::size_t W, std::size_t n_max,
                const char* op) {
    if (maps.size() != B)
        throw ShapeError(std::string(op) + ": " + std::to_string(maps.size()) + " superpixel maps for batch of " +
                         std::to_string(B));
    for (const auto& m : maps) {
        if (m.height != H || m.width != W)
            throw ShapeError(std::string(op) + ": superpixel map is " + std::to_string(m.height) + "x" +
                             std::to_string(m.width) + ", features are " + std::to_string(H) + "x" + std::to_string(W));
        if (m.n_sp > n_max)
            throw DataError(std::string(op) + ": " + std::to_string(m.n_sp) + " superpixels exceed N_max = " +
                            std::to_string(n_max));
        if (m.sizes.size() != m.n_sp) throw DataError(std::string(op) + ": superpixel sizes missing");
        for (std::size_t i = 0; i < m.n_sp; ++i)
            if (m.sizes[i] == 0) throw DataError(std::string(op) + ": empty superpixel " + std::to_string(i));
        for (auto id : m.ids)
            if (id < 0 || static_cast<std::size_t>(id) >= m.n_sp)
                throw DataError(std::string(op) + ": superpixel id " + std::to_string(id) + " out of range");
    }
}

// Row index into the flattened [B * N_max] token table for every pixel.
std::vector<std::int64_t> token_index(std::span<const SuperpixelMap> maps, std::size_t n_max) {
    std::vector<std::int64_t> idx;
    for (std::size_t b = 0; b < maps.size(); ++b)
        for (auto id : maps[b].ids) idx.push_back(static_cast<std::int64_t>(b * n_max) + id);
    return idx;
}

}  // namespace

nlohmann::json GLocalConfig::to_json() const {
    return {{"in_channels", in_channels}, {"hidden", hidden},     {"classes", classes},
            {"n_max", n_max},             {"d_state", d_state},   {"conv_kernel", conv_kernel}};
}

GLocalConfig GLocalConfig::from_json(const nlohmann::json& j) {
    GLocalConfig c;
    c.in_channels = j.value("in_channels", c.in_channels);
    c.hidden = j.value("hidden", c.hidden);
    c.classes = j.value("classes", c.classes);
    c.n_max = j.value("n_max", c.n_max);
    c.d_state = j.value("d_state", c.d_state);
    c.conv_kernel = j.value("conv_kernel", c.conv_kernel);
    return c;
}

ResidualBlock ResidualBlock::init(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    ResidualBlock b;
    b.conv1 = conv_weight(out, in, 3, rng);
    b.scale1 = Tensor::full({out}, 1.0f, true);
    b.shift1 = Tensor::zeros({out}, true);
    b.conv2 = conv_weight(out, out, 3, rng);
    b.scale2 = Tensor::full({out}, 1.0f, true);
    b.shift2 = Tensor::zeros({out}, true);
    if (in != out) b.skip = uniform({out, in, 1, 1}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    return b;
}

std::vector<std::pair<std::string, Tensor*>> ResidualBlock::named() {
    std::vector<std::pair<std::string, Tensor*>> out = {{"conv1", &conv1}, {"scale1", &scale1}, {"shift1", &shift1},
                                                        {"conv2", &conv2}, {"scale2", &scale2}, {"shift2", &shift2}};
    if (skip.defined()) out.emplace_back("skip", &skip);
    return out;
}

GLocalParams GLocalParams::init(const GLocalConfig& c, std::uint64_t seed) {
    if (c.in_channels == 0 || c.hidden == 0 || c.classes == 0 || c.n_max == 0)
        throw UsageError("model: channels, hidden, classes and n_max must be positive");
    std::mt19937_64 rng(seed);
    GLocalParams p;
    p.config = c;
    p.block1 = ResidualBlock::init(c.in_channels, c.hidden, rng);
    p.block2 = ResidualBlock::init(c.hidden, c.hidden, rng);
    p.local_head_w = uniform({c.classes, c.hidden, 1, 1}, 1.0 / std::sqrt(static_cast<double>(c.hidden)), rng);
    p.local_head_b = Tensor::zeros({c.classes}, true);
    p.mamba = init_mamba_stack(c.mamba(), rng);
    p.global_w = uniform({c.hidden, c.classes}, 1.0 / std::sqrt(static_cast<double>(c.hidden)), rng);
    p.global_b = Tensor::zeros({c.classes}, true);
    return p;
}

std::vector<std::pair<std::string, Tensor*>> GLocalParams::named() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (auto& [n, t] : block1.named()) out.emplace_back("block1." + n, t);
    for (auto& [n, t] : block2.named()) out.emplace_back("block2." + n, t);
    out.emplace_back("local_head.w", &local_head_w);
    out.emplace_back("local_head.b", &local_head_b);
    for (std::size_t i = 0; i < mamba.size(); ++i)
        for (auto& [n, t] : mamba[i].named()) out.emplace_back("mamba." + std::to_string(i) + "." + n, t);
    out.emplace_back("global_head.w", &global_w);
    out.emplace_back("global_head.b", &global_b);
    return out;
}

std::vector<Tensor> GLocalParams::parameters() {
    std::vector<Tensor> out;
    for (auto& [n, t] : named()) out.push_back(*t);
    return out;
}

Tensor channel_affine(const Tensor& x, const Tensor& scale, const Tensor& shift) {
    if (!x.defined() || x.rank() != 4) throw ShapeError("channel_affine: expected [B, C, H, W]");
    const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (!scale.defined() || scale.shape() != Shape{C} || !shift.defined() || shift.shape() != Shape{C})
        throw ShapeError("channel_affine: scale and shift must be [" + std::to_string(C) + "]");
    std::vector<float> out(x.numel());
    auto in = x.data();
    auto s = scale.data();
    auto t = shift.data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i) {
                const std::size_t k = (b * C + c) * HW + i;
                out[k] = in[k] * s[c] + t[c];
            }
    const bool rec = detail::should_record({&x, &scale, &shift});
    return detail::make_result(x.shape(), std::move(out), rec, {x, scale, shift},
                               [B, C, HW](Node& self) {
                                   auto* gx = grad_of(self, 0);
                                   auto* gs = grad_of(self, 1);
                                   auto* gt = grad_of(self, 2);
                                   const auto& in = self.inputs[0]->value;
                                   const auto& s = self.inputs[1]->value;
                                   for (std::size_t b = 0; b < B; ++b)
                                       for (std::size_t c = 0; c < C; ++c) {
                                           double acc_s = 0.0, acc_t = 0.0;
                                           for (std::size_t i = 0; i < HW; ++i) {
                                               const std::size_t k = (b * C + c) * HW + i;
                                               const float g = self.grad[k];
                                               if (gx) (*gx)[k] += g * s[c];
                                               acc_s += static_cast<double>(g) * in[k];
                                               acc_t += g;
                                           }
                                           if (gs) (*gs)[c] += static_cast<float>(acc_s);
                                           if (gt) (*gt)[c] += static_cast<float>(acc_t);
                                       }
                               },
                               "channel_affine");
}

Tensor residual_block(const Tensor& x, const ResidualBlock& blk) {
    Tensor h = relu(channel_affine(conv2d(x, blk.conv1), blk.scale1, blk.shift1));
    h = channel_affine(conv2d(h, blk.conv2), blk.scale2, blk.shift2);
    const Tensor skip = blk.skip.defined() ? conv2d(x, blk.skip) : x;
    return relu(add(h, skip));
}

LocalOutputs local_branch(const Tensor& x, const GLocalParams& p) {
    if (!x.defined() || x.rank() != 4 || x.dim(1) != p.config.in_channels)
        throw ShapeError("local_branch: expected [B, " + std::to_string(p.config.in_channels) + ", H, W], got " +
                         (x.defined() ? to_string(x.shape()) : std::string("undefined")));
    LocalOutputs out;
    out.f_local = residual_block(residual_block(x, p.block1), p.block2);
    out.m_local = conv2d(out.f_local, p.local_head_w, p.local_head_b);
    return out;
}

Tokens aggregate_superpixels(const Tensor& f_local, std::span<const SuperpixelMap> maps, std::size_t n_max) {
    if (!f_local.defined() || f_local.rank() != 4) throw ShapeError("aggregate_superpixels: expected [B, D, H, W]");
    const std::size_t B = f_local.dim(0), D = f_local.dim(1), H = f_local.dim(2), W = f_local.dim(3);
    check_maps(maps, B, H, W, n_max, "aggregate_superpixels");
    const Tensor rows = reshape(permute(f_local, {0, 2, 3, 1}), {B * H * W, D});
    Tokens t;
    t.g = reshape(segment_mean(rows, token_index(maps, n_max), B * n_max), {B, n_max, D});
    t.mask.assign(B * n_max, 0);
    for (std::size_t b = 0; b < B; ++b)
        std::fill_n(t.mask.begin() + static_cast<std::ptrdiff_t>(b * n_max), maps[b].n_sp, 1);
    return t;
}

Tensor global_head(const Tensor& g_out, const Tensor& weight, const Tensor& bias) {
    return add(matmul(g_out, weight), bias);
}

Tensor remap(const Tensor& tokens, std::span<const SuperpixelMap> maps) {
    if (!tokens.defined() || tokens.rank() != 3) throw ShapeError("remap: expected tokens [B, N_max, K]");
    const std::size_t B = tokens.dim(0), n_max = tokens.dim(1), K = tokens.dim(2);
    if (maps.empty()) throw ShapeError("remap: no superpixel maps");
    const std::size_t H = maps[0].height, W = maps[0].width;
    check_maps(maps, B, H, W, n_max, "remap");
    const Tensor px = gather_rows(reshape(tokens, {B * n_max, K}), token_index(maps, n_max));
    return permute(reshape(px, {B, H, W, K}), {0, 3, 1, 2});
}

Tensor vote(const Tensor& m_local, const Tensor& m_global_up) {
    if (!m_local.defined() || !m_global_up.defined() || m_local.shape() != m_global_up.shape())
        throw ShapeError("vote: branch maps differ in shape");
    return add(m_local, m_global_up);
}

GLocalOutputs forward(const Tensor& x, std::span<const SuperpixelMap> maps, const GLocalParams& p) {
    auto local = local_branch(x, p);
    auto tokens = aggregate_superpixels(local.f_local, maps, p.config.n_max);
    GLocalOutputs out;
    out.m_local = local.m_local;
    out.g_tokens = global_head(mamba_stack(tokens.g, p.mamba, tokens.mask), p.global_w, p.global_b);
    out.m_global_up = remap(out.g_tokens, maps);
    out.m_final = vote(out.m_local, out.m_global_up);
    out.token_mask = std::move(tokens.mask);
    return out;
}

void save_checkpoint(const std::filesystem::path& path, GLocalParams& params, const nlohmann::json& meta) {
    nlohmann::json table = nlohmann::json::array();
    std::size_t offset = 0;
    auto named = params.named();
    for (auto& [name, t] : named) {
        table.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}});
        offset += t->numel();
    }
    nlohmann::json header = {{"format", kCheckpointFormat},
                             {"version", 1},
                             {"dtype", "f32le"},
                             {"config", params.config.to_json()},
                             {"tensors", table},
                             {"meta", meta.is_null() ? nlohmann::json::object() : meta}};
    auto out = io::open_out(path);
    io::write_header(out, header);
    for (auto& [name, t] : named) io::write_f32(out, t->data());
    if (!out) throw DataError("failed writing checkpoint " + path.string());
}

GLocalParams load_checkpoint(const std::filesystem::path& path, nlohmann::json* meta) {
    auto in = io::open_in(path);
    const auto header = io::read_header(in, path);
    if (header.value("format", std::string()) != kCheckpointFormat)
        throw DataError(path.string() + " is not a checkpoint");
    const auto config = GLocalConfig::from_json(io::field<nlohmann::json>(header, "config", path));
    GLocalParams params = GLocalParams::init(config, 0);
    std::map<std::string, Tensor*> by_name;
    for (auto& [name, t] : params.named()) by_name[name] = t;
    const auto& table = io::field<nlohmann::json>(header, "tensors", path);
    if (table.size() != by_name.size())
        throw DataError(path.string() + ": expected " + std::to_string(by_name.size()) + " tensors, found " +
                        std::to_string(table.size()));
    for (const auto& entry : table) {
        const auto name = entry.at("name").get<std::string>();
        auto it = by_name.find(name);
        if (it == by_name.end()) throw DataError(path.string() + ": unknown tensor " + name);
        const auto shape = entry.at("shape").get<Shape>();
        if (shape != it->second->shape())
            throw DataError(path.string() + ": tensor " + name + " has shape " + to_string(shape) + ", expected " +
                            to_string(it->second->shape()));
        auto values = io::read_f32(in, numel(shape), path);
        *it->second = Tensor::from(shape, std::move(values), true);
    }
    if (in.peek() != std::char_traits<char>::eof()) throw DataError(path.string() + ": trailing bytes after tensors");
    if (meta) *meta = header.value("meta", nlohmann::json::object());
    return params;
}

}  // namespace msom
