#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "msom/error.hpp"
#include "msom/glocal.hpp"
#include "support/end_to_end.hpp"
#include "support/gradcheck.hpp"

using namespace msom;
using msom::testing::gradcheck;
using msom::testing::random_values;
namespace fs = std::filesystem;

namespace {

Tensor rand_tensor(Shape shape, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f) {
    const std::size_t n = numel(shape);
    return Tensor::from(std::move(shape), random_values(n, rng, lo, hi));
}

GLocalConfig tiny(std::size_t C = 4, std::size_t D = 8, std::size_t K = 3, std::size_t n_max = 8) {
    return {.in_channels = C, .hidden = D, .classes = K, .n_max = n_max, .d_state = 4, .conv_kernel = 4};
}

SuperpixelMap from_ids(std::size_t H, std::size_t W, std::vector<std::int32_t> ids) {
    SuperpixelMap m;
    m.height = H;
    m.width = W;
    m.ids = std::move(ids);
    for (auto id : m.ids) m.n_sp = std::max<std::size_t>(m.n_sp, static_cast<std::size_t>(id) + 1);
    m.sizes.assign(m.n_sp, 0);
    for (auto id : m.ids) ++m.sizes[static_cast<std::size_t>(id)];
    return m;
}

// 8x8 split into 2 rows x 3 columns of blocks: 6 superpixels.
SuperpixelMap six_blocks() {
    std::vector<std::int32_t> ids(64);
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) ids[y * 8 + x] = static_cast<std::int32_t>((y / 4) * 3 + std::min<std::size_t>(x / 3, 2));
    return from_ids(8, 8, ids);
}

SuperpixelMap random_map(std::size_t H, std::size_t W, std::size_t n, std::mt19937_64& rng) {
    std::vector<std::int32_t> raw(H * W);
    std::uniform_int_distribution<std::int32_t> lab(0, static_cast<std::int32_t>(n) - 1);
    // blocky random labels then compacted into a valid partition
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) raw[y * W + x] = (y % 2 == 0 && x % 2 == 0) ? lab(rng) : -1;
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            if (raw[y * W + x] < 0) raw[y * W + x] = raw[(y / 2 * 2) * W + x / 2 * 2];
    return enforce_connectivity(raw, H, W, n);
}

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(ChannelAffine, ValuesAndGradient) {
    std::mt19937_64 rng(1);
    Tensor x = rand_tensor({2, 3, 2, 2}, rng);
    Tensor s = rand_tensor({3}, rng), t = rand_tensor({3}, rng);
    Tensor y = channel_affine(x, s, t);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < 2; ++i)
                EXPECT_FLOAT_EQ(y.at({b, c, i, 1}), x.at({b, c, i, 1}) * s.at({c}) + t.at({c}));
    auto r = gradcheck([](const std::vector<Tensor>& in) { return channel_affine(in[0], in[1], in[2]); }, {x, s, t}, rng,
                       0.5, 1e-4, true);
    EXPECT_LT(r.max_tensor_rel, 1e-3);
    EXPECT_THROW(channel_affine(x, rand_tensor({2}, rng), t), ShapeError);
}

TEST(LocalBranch, PreservesSpatialDims) {
    auto p = GLocalParams::init(tiny(3, 4, 2), 1);
    std::mt19937_64 rng(2);
    for (auto [H, W] : {std::pair<std::size_t, std::size_t>{8, 8}, {32, 32}, {128, 128}}) {
        auto out = local_branch(rand_tensor({1, 3, H, W}, rng), p);
        EXPECT_EQ(out.f_local.shape(), (Shape{1, 4, H, W}));
        EXPECT_EQ(out.m_local.shape(), (Shape{1, 2, H, W}));
    }
    EXPECT_THROW(local_branch(rand_tensor({1, 2, 8, 8}, rng), p), ShapeError);
}

TEST(LocalBranch, ZeroHeadGivesBias) {
    auto p = GLocalParams::init(tiny(), 3);
    for (auto& v : p.local_head_w.mutable_data()) v = 0.0f;
    p.local_head_b = Tensor::from({3}, {0.5f, -1.0f, 2.0f});
    std::mt19937_64 rng(3);
    auto out = local_branch(rand_tensor({2, 4, 8, 8}, rng), p);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t k = 0; k < 3; ++k)
            for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(out.m_local.at({b, k, i / 8, i % 8}), p.local_head_b.at({k}));
}

TEST(LocalBranch, ReceptiveFieldIsNineByNine) {
    auto p = GLocalParams::init(tiny(4, 8, 3), 4);
    std::mt19937_64 rng(5);
    const std::size_t H = 17, W = 17;
    Tensor x = rand_tensor({1, 4, H, W}, rng);
    Tensor base = local_branch(x, p).f_local;
    for (auto [py, px] : {std::pair<std::size_t, std::size_t>{8, 8}, {0, 0}, {3, 12}}) {
        Tensor xp = x.clone();
        for (std::size_t c = 0; c < 4; ++c) xp.mutable_data()[(c * H + py) * W + px] += 3.0f;
        Tensor out = local_branch(xp, p).f_local;
        std::size_t changed = 0;
        long reach = 0;
        for (std::size_t d = 0; d < 8; ++d)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x2 = 0; x2 < W; ++x2) {
                    if (out.at({0, d, y, x2}) == base.at({0, d, y, x2})) continue;
                    ++changed;
                    const long dy = std::abs(static_cast<long>(y) - static_cast<long>(py));
                    const long dx = std::abs(static_cast<long>(x2) - static_cast<long>(px));
                    reach = std::max({reach, dy, dx});
                }
        EXPECT_GT(changed, 0u);
        EXPECT_LE(reach, 4) << py << "," << px;
    }
}

TEST(Aggregate, ConstantAndTwoTone) {
    auto m = from_ids(4, 4, {0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1});
    std::vector<SuperpixelMap> maps{m};
    auto t = aggregate_superpixels(Tensor::full({1, 3, 4, 4}, 2.5f), maps, 5);
    EXPECT_EQ(t.g.shape(), (Shape{1, 5, 3}));
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t d = 0; d < 3; ++d) EXPECT_EQ(t.g.at({0, i, d}), 2.5f);
    for (std::size_t i = 2; i < 5; ++i)
        for (std::size_t d = 0; d < 3; ++d) EXPECT_EQ(t.g.at({0, i, d}), 0.0f);
    EXPECT_EQ(t.mask, (std::vector<std::uint8_t>{1, 1, 0, 0, 0}));

    std::vector<float> v(16);
    for (std::size_t i = 0; i < 16; ++i) v[i] = (i % 4) < 2 ? 0.0f : 1.0f;
    auto t2 = aggregate_superpixels(Tensor::from({1, 1, 4, 4}, v), maps, 2);
    EXPECT_EQ(t2.g.at({0, 0, 0}), 0.0f);
    EXPECT_EQ(t2.g.at({0, 1, 0}), 1.0f);
}

TEST(Aggregate, MatchesDirectLoopAndGradient) {
    std::mt19937_64 rng(6);
    std::vector<SuperpixelMap> maps{random_map(8, 8, 5, rng), random_map(8, 8, 5, rng)};
    const std::size_t n_max = 12, D = 3;
    Tensor F = rand_tensor({2, D, 8, 8}, rng);
    auto t = aggregate_superpixels(F, maps, n_max);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t i = 0; i < n_max; ++i)
            for (std::size_t d = 0; d < D; ++d) {
                double sum = 0;
                std::size_t count = 0;
                for (std::size_t px = 0; px < 64; ++px)
                    if (maps[b].ids[px] == static_cast<std::int32_t>(i)) {
                        sum += F.at({b, d, px / 8, px % 8});
                        ++count;
                    }
                EXPECT_NEAR(t.g.at({b, i, d}), count ? sum / count : 0.0, 1e-6);
            }
    auto r = gradcheck([&](const std::vector<Tensor>& in) { return aggregate_superpixels(in[0], maps, n_max).g; }, {F}, rng,
                       0.5, 1e-4, true);
    EXPECT_LT(r.max_tensor_rel, 1e-3);
    // each pixel receives 1/|P_i| of its token's upstream gradient
    Tape tape;
    {
        TapeScope scope(tape);
        F.set_requires_grad(true);
        F.zero_grad();
        tape.backward(sum_all(aggregate_superpixels(F, maps, n_max).g));
    }
    for (std::size_t px = 0; px < 64; ++px)
        EXPECT_FLOAT_EQ(F.grad()[px], 1.0f / static_cast<float>(maps[0].sizes[static_cast<std::size_t>(maps[0].ids[px])]));
}

TEST(Aggregate, RejectsBadMaps) {
    Tensor F = Tensor::zeros({1, 2, 4, 4});
    auto m = SuperpixelMap::pixels(4, 4);
    std::vector<SuperpixelMap> maps{m};
    EXPECT_THROW(aggregate_superpixels(F, maps, 8), DataError);  // 16 > N_max
    auto empty = m;
    empty.sizes[3] = 0;
    maps = {empty};
    EXPECT_THROW(aggregate_superpixels(F, maps, 16), DataError);
    maps = {SuperpixelMap::pixels(4, 3)};
    EXPECT_THROW(aggregate_superpixels(F, maps, 16), ShapeError);
}

TEST(GlobalHead, ZeroWeightsAndDirectLoop) {
    std::mt19937_64 rng(7);
    Tensor G = rand_tensor({2, 5, 4}, rng);
    Tensor b = rand_tensor({3}, rng);
    Tensor z = global_head(G, Tensor::zeros({4, 3}), b);
    for (std::size_t i = 0; i < z.numel(); ++i) EXPECT_EQ(z.data()[i], b.data()[i % 3]);
    std::vector<float> onehot(12, 0.0f);
    onehot[2 * 3 + 0] = onehot[0 * 3 + 1] = onehot[3 * 3 + 2] = 1.0f;
    Tensor c = global_head(G, Tensor::from({4, 3}, onehot), Tensor::zeros({3}));
    for (std::size_t t = 0; t < 5; ++t) {
        EXPECT_EQ(c.at({1, t, 0}), G.at({1, t, 2}));
        EXPECT_EQ(c.at({1, t, 1}), G.at({1, t, 0}));
        EXPECT_EQ(c.at({1, t, 2}), G.at({1, t, 3}));
    }
    Tensor w = rand_tensor({4, 3}, rng);
    Tensor r = global_head(G, w, b);
    for (std::size_t bb = 0; bb < 2; ++bb)
        for (std::size_t t = 0; t < 5; ++t)
            for (std::size_t k = 0; k < 3; ++k) {
                double acc = b.at({k});
                for (std::size_t d = 0; d < 4; ++d) acc += G.at({bb, t, d}) * w.at({d, k});
                EXPECT_NEAR(r.at({bb, t, k}), acc, 1e-6);
            }
}

TEST(Remap, GatherOracleAndGradient) {
    std::mt19937_64 rng(8);
    // one superpixel covering the patch
    std::vector<SuperpixelMap> one{from_ids(3, 3, std::vector<std::int32_t>(9, 0))};
    Tensor tok = rand_tensor({1, 2, 4}, rng);
    Tensor up = remap(tok, one);
    for (std::size_t k = 0; k < 4; ++k)
        for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(up.at({0, k, i / 3, i % 3}), tok.at({0, 0, k}));
    // checkerboard of two ids
    std::vector<std::int32_t> cb(16);
    for (std::size_t i = 0; i < 16; ++i) cb[i] = static_cast<std::int32_t>((i / 4 + i % 4) % 2);
    std::vector<SuperpixelMap> board{from_ids(4, 4, cb)};
    Tensor up2 = remap(tok, board);
    for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(up2.at({0, k, i / 4, i % 4}), tok.at({0, static_cast<std::size_t>(cb[i]), k}));

    std::vector<SuperpixelMap> maps{random_map(6, 6, 4, rng), random_map(6, 6, 4, rng)};
    Tensor T = rand_tensor({2, 9, 3}, rng);
    Tensor U = remap(T, maps);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t k = 0; k < 3; ++k)
            for (std::size_t i = 0; i < 36; ++i)
                EXPECT_EQ(U.at({b, k, i / 6, i % 6}), T.at({b, static_cast<std::size_t>(maps[b].ids[i]), k}));
    auto r = gradcheck([&](const std::vector<Tensor>& in) { return remap(in[0], maps); }, {T}, rng, 0.5, 1e-4, true);
    EXPECT_LT(r.max_tensor_rel, 1e-3);

    auto bad = maps;
    bad[0].ids[0] = static_cast<std::int32_t>(bad[0].n_sp);
    EXPECT_THROW(remap(T, bad), DataError);
}

TEST(Vote, IdentityAndNonDegeneracyWitness) {
    std::mt19937_64 rng(9);
    Tensor a = rand_tensor({1, 3, 2, 2}, rng);
    EXPECT_EQ(values(vote(a, Tensor::zeros({1, 3, 2, 2}))), values(a));
    Tensor twice = vote(a, a);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(twice.data()[i], 2.0f * a.data()[i]);
    EXPECT_THROW(vote(a, Tensor::zeros({1, 3, 2, 1})), ShapeError);

    // search for logits where the fused argmax differs from both branches
    auto argmax = [](const std::vector<float>& v) { return std::max_element(v.begin(), v.end()) - v.begin(); };
    bool found = false;
    for (int trial = 0; trial < 1000 && !found; ++trial) {
        Tensor l = rand_tensor({1, 3, 1, 1}, rng), g = rand_tensor({1, 3, 1, 1}, rng);
        Tensor f = vote(l, g);
        const auto al = argmax(values(l)), ag = argmax(values(g)), af = argmax(values(f));
        found = af != al && af != ag;
    }
    EXPECT_TRUE(found);
}

TEST(Forward, StructuralInvariants) {
    auto p = GLocalParams::init(tiny(4, 8, 3, 40), 10);
    std::mt19937_64 rng(11);
    std::vector<SuperpixelMap> maps{random_map(12, 12, 20, rng), random_map(12, 12, 20, rng)};
    Tensor x = rand_tensor({2, 4, 12, 12}, rng);
    auto out = forward(x, maps, p);
    EXPECT_EQ(out.g_tokens.shape(), (Shape{2, 40, 3}));
    for (std::size_t i = 0; i < out.m_final.numel(); ++i)
        EXPECT_EQ(out.m_final.data()[i], out.m_local.data()[i] + out.m_global_up.data()[i]);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t k = 0; k < 3; ++k) {
            std::vector<float> first(maps[b].n_sp, std::nanf(""));
            for (std::size_t i = 0; i < 144; ++i) {
                const auto id = static_cast<std::size_t>(maps[b].ids[i]);
                const float v = out.m_global_up.at({b, k, i / 12, i % 12});
                if (std::isnan(first[id])) first[id] = v;
                EXPECT_EQ(v, first[id]);
            }
        }

    for (auto& blk : p.mamba)
        for (auto& v : blk.out_proj.mutable_data()) v = 0.0f;
    for (auto& v : p.global_w.mutable_data()) v = 0.0f;
    auto quiet = forward(x, maps, p);
    EXPECT_EQ(values(quiet.m_final), values(quiet.m_local));
}

TEST(Forward, RelabelEquivarianceWithoutStack) {
    std::mt19937_64 rng(12);
    auto m = random_map(10, 10, 12, rng);
    Tensor F = rand_tensor({1, 5, 10, 10}, rng);
    std::vector<std::int32_t> perm(m.n_sp);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto pm = m;
    for (auto& id : pm.ids) id = perm[static_cast<std::size_t>(id)];
    for (std::size_t i = 0; i < m.n_sp; ++i) pm.sizes[static_cast<std::size_t>(perm[i])] = m.sizes[i];
    std::vector<SuperpixelMap> a{m}, b{pm};
    Tensor w = rand_tensor({5, 3}, rng), bias = rand_tensor({3}, rng);
    Tensor ua = remap(global_head(aggregate_superpixels(F, a, 40).g, w, bias), a);
    Tensor ub = remap(global_head(aggregate_superpixels(F, b, 40).g, w, bias), b);
    EXPECT_EQ(values(ua), values(ub));
}

TEST(Forward, NoSuperpixelVariantUsesPixelTokens) {
    auto p = GLocalParams::init(tiny(4, 8, 3, 64), 13);
    std::mt19937_64 rng(14);
    std::vector<SuperpixelMap> maps{SuperpixelMap::pixels(8, 8)};
    auto out = forward(rand_tensor({1, 4, 8, 8}, rng), maps, p);
    EXPECT_EQ(out.g_tokens.dim(1), 64u);
    EXPECT_EQ(std::count(out.token_mask.begin(), out.token_mask.end(), 1), 64);
}

TEST(Forward, EndToEndGradientMatchesFiniteDifferences) {
    auto r = msom::testing::end_to_end_gradcheck();
    EXPECT_EQ(r.names.size(), GLocalParams::init(tiny(4, 8, 3, 8), 0).named().size() + 1);
    EXPECT_LT(r.worst, 1e-2) << r.worst_name;
}

TEST(Checkpoint, RoundTripIsBitwise) {
    const auto dir = fs::temp_directory_path() / "msom_ckpt_test";
    fs::remove_all(dir);
    auto p = GLocalParams::init(tiny(4, 8, 3, 10), 17);
    save_checkpoint(dir / "m.ckpt", p, {{"epoch", 3}});
    nlohmann::json meta;
    auto q = load_checkpoint(dir / "m.ckpt", &meta);
    EXPECT_EQ(meta["epoch"], 3);
    auto pn = p.named(), qn = q.named();
    ASSERT_EQ(pn.size(), qn.size());
    for (std::size_t i = 0; i < pn.size(); ++i) EXPECT_EQ(values(*pn[i].second), values(*qn[i].second)) << pn[i].first;

    std::mt19937_64 rng(18);
    std::vector<SuperpixelMap> maps{six_blocks()};
    Tensor x = rand_tensor({1, 4, 8, 8}, rng);
    EXPECT_EQ(values(forward(x, maps, p).m_final), values(forward(x, maps, q).m_final));

    // truncated file
    const auto size = fs::file_size(dir / "m.ckpt");
    fs::resize_file(dir / "m.ckpt", size - 8);
    EXPECT_THROW(load_checkpoint(dir / "m.ckpt"), DataError);
    EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), DataError);
    fs::remove_all(dir);
}
