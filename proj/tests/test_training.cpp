#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "msom/error.hpp"
#include "msom/optim.hpp"
#include "msom/synth.hpp"
#include "msom/training.hpp"
#include "support/gradcheck.hpp"

using namespace msom;
using msom::testing::gradcheck;
using msom::testing::random_values;
namespace fs = std::filesystem;

namespace {

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

// Small but complete training setup: D = 16, 32 x 32 patches, ~32 superpixels.
TrainConfig small_config() {
    TrainConfig c;
    c.hidden = 16;
    c.d_state = 8;
    c.batch_size = 8;
    c.lr = 3e-3;
    c.n_sp_target = 32;
    c.n_max = 64;
    c.epochs = 2;
    return c;
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("msom_training_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

double direct_ce(const std::vector<float>& logits, std::size_t K, std::size_t inner,
                 const std::vector<std::uint8_t>& t, const std::vector<std::uint8_t>& mask) {
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t p = 0; p < t.size(); ++p) {
        if (t[p] == kUnlabeled || !mask[p]) continue;
        const std::size_t o = p / inner, i = p % inner;
        double z = 0.0;
        for (std::size_t k = 0; k < K; ++k) z += std::exp(static_cast<double>(logits[(o * K + k) * inner + i]));
        total += -std::log(std::exp(static_cast<double>(logits[(o * K + t[p]) * inner + i])) / z);
        ++n;
    }
    return total / static_cast<double>(n);
}

}  // namespace

TEST(CrossEntropy, UniformLogitsGiveLogK) {
    Tensor x = Tensor::zeros({1, 13, 2, 2});
    std::vector<std::uint8_t> t{0, 5, 12, 7};
    EXPECT_NEAR(cross_entropy(x, 1, t).item(), std::log(13.0), 1e-6);
    EXPECT_NEAR(std::log(13.0), 2.5649, 1e-4);
}

TEST(CrossEntropy, ConfidentCorrectLogitsGiveZero) {
    std::vector<float> v(3 * 4, 0.0f);
    std::vector<std::uint8_t> t{2, 0, 1, 1};
    for (std::size_t p = 0; p < 4; ++p) v[p * 3 + t[p]] = 1e6f;
    EXPECT_NEAR(cross_entropy(Tensor::from({4, 3}, v), 1, t).item(), 0.0, 1e-6);
}

TEST(CrossEntropy, MatchesDirectFormulaWithMaskAndUnlabeled) {
    std::mt19937_64 rng(4);
    const std::size_t B = 3, K = 5, L = 7;
    auto v = random_values(B * K * L, rng, -3.0f, 3.0f);
    std::vector<std::uint8_t> t(B * L), mask(B * L);
    for (std::size_t p = 0; p < t.size(); ++p) {
        t[p] = static_cast<std::uint8_t>(rng() % K);
        mask[p] = rng() % 4 != 0;
    }
    t[3] = kUnlabeled;
    const double got = cross_entropy(Tensor::from({B, K, L}, v), 1, t, mask).item();
    EXPECT_NEAR(got, direct_ce(v, K, L, t, mask), 1e-6);

    // class axis last, as for token logits
    std::vector<float> w(B * L * K);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t l = 0; l < L; ++l) w[(b * L + l) * K + k] = v[(b * K + k) * L + l];
    EXPECT_NEAR(cross_entropy(Tensor::from({B, L, K}, w), 2, t, mask).item(), got, 1e-6);
}

TEST(CrossEntropy, Gradient) {
    std::mt19937_64 rng(5);
    std::vector<std::uint8_t> t{0, 2, kUnlabeled, 1, 3, 3}, mask{1, 1, 1, 0, 1, 1};
    auto f = [&](const std::vector<Tensor>& in) { return cross_entropy(in[0], 1, t, mask); };
    auto r = gradcheck(f, {Tensor::from({2, 4, 3}, random_values(24, rng, -2.0f, 2.0f))}, rng, 1e-2, 1e-4, true);
    EXPECT_LT(r.max_tensor_rel, 1e-3);
}

TEST(CrossEntropy, Errors) {
    Tensor x = Tensor::zeros({2, 3});
    std::vector<std::uint8_t> none{kUnlabeled, kUnlabeled};
    EXPECT_THROW(cross_entropy(x, 1, none), DataError);
    std::vector<std::uint8_t> t{0, 1}, off{0, 0};
    EXPECT_THROW(cross_entropy(x, 1, t, off), DataError);
    std::vector<std::uint8_t> bad{0, 3};
    EXPECT_THROW(cross_entropy(x, 1, bad), DataError);
    std::vector<std::uint8_t> short_t{0};
    EXPECT_THROW(cross_entropy(x, 1, short_t), ShapeError);
}

TEST(SuperpixelTargets, MajorityTiesAndMasking) {
    // token 0: pure class 4; token 1: 3 x class 1, 2 x class 6; token 2: tie 2/7;
    // token 3: unlabeled only
    auto m = from_ids(1, 13, {0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3});
    std::vector<std::uint8_t> labels{4, 4, 6, 1, 1, 6, 1, 7, 2, 2, 7, kUnlabeled, kUnlabeled};
    auto t = superpixel_targets(labels, m, 6, 8);
    ASSERT_EQ(t.labels.size(), 6u);
    EXPECT_EQ(t.labels[0], 4);
    EXPECT_EQ(t.labels[1], 1);
    EXPECT_EQ(t.labels[2], 2);
    EXPECT_EQ(t.mask, (std::vector<std::uint8_t>{1, 1, 1, 0, 0, 0}));
    EXPECT_EQ(t.labels[4], kUnlabeled);
}

TEST(SuperpixelTargets, MatchHistogramArgmax) {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t N = 1 + rng() % 9, K = 2 + rng() % 5, HW = 60;
        std::vector<std::int32_t> ids(HW);
        for (std::size_t i = 0; i < HW; ++i) ids[i] = static_cast<std::int32_t>(i < N ? i : rng() % N);
        auto m = from_ids(6, 10, ids);
        std::vector<std::uint8_t> labels(HW);
        for (auto& l : labels) l = rng() % 7 == 0 ? kUnlabeled : static_cast<std::uint8_t>(rng() % K);
        auto t = superpixel_targets(labels, m, N + 2, K);
        for (std::size_t s = 0; s < N; ++s) {
            std::vector<int> h(K, 0);
            for (std::size_t i = 0; i < HW; ++i)
                if (ids[i] == static_cast<std::int32_t>(s) && labels[i] != kUnlabeled) ++h[labels[i]];
            const auto best = std::max_element(h.begin(), h.end());
            if (*best == 0) {
                EXPECT_EQ(t.mask[s], 0);
            } else {
                EXPECT_EQ(t.mask[s], 1);
                EXPECT_EQ(t.labels[s], best - h.begin());
            }
        }
    }
    EXPECT_THROW(superpixel_targets(std::vector<std::uint8_t>(4, 0), from_ids(2, 2, {0, 1, 2, 3}), 3, 2), DataError);
}

TEST(MultitaskLoss, WeightedSumArithmetic) {
    const float v = combine_losses(Tensor::scalar(1.0f), Tensor::scalar(2.0f), 0.7, 0.3).item();
    EXPECT_EQ(v, 1.3f);
    EXPECT_EQ(combine_losses(Tensor::scalar(1.7f), Tensor::scalar(2.3f), 0.4, 0.0).item(), 0.4f * 1.7f);
    EXPECT_THROW(combine_losses(Tensor::scalar(1.0f), Tensor::scalar(1.0f), -0.1, 1.0), UsageError);
}

class ModelLoss : public ::testing::Test {
protected:
    void SetUp() override {
        SynthConfig sc;
        sc.size = 8;
        sc.regions = 3;
        sc.seed = 2;
        auto patches = synth_patches(sc, 2);
        TrainConfig c = small_config();
        c.n_sp_target = 6;
        c.n_max = 16;
        samples = prepare_samples(patches, c);
        norm = Normalizer::fit(patches);
        std::vector<std::size_t> idx{0, 1};
        batch = make_batch(samples, idx, norm, 16, 3);
        params = GLocalParams::init({.in_channels = 4, .hidden = 8, .classes = 3, .n_max = 16, .d_state = 4}, 3);
    }
    LossParts loss(double a, double b) {
        auto out = forward(batch.x, batch.maps, params);
        return multitask_loss(out, batch.pixel_labels, batch.token_labels, batch.token_mask, a, b);
    }
    std::vector<std::vector<float>> grads_of(const std::function<Tensor(const LossParts&)>& pick, double a,
                                             double b) {
        auto ps = params.parameters();
        zero_grads(ps);
        {
            Tape tape;
            TapeScope scope(tape);
            tape.backward(pick(loss(a, b)));
        }
        std::vector<std::vector<float>> g;
        for (auto& t : ps) {
            g.emplace_back(t.grad().begin(), t.grad().end());
            if (g.back().empty()) g.back().assign(t.numel(), 0.0f);
        }
        zero_grads(ps);
        return g;
    }
    std::vector<Sample> samples;
    Normalizer norm;
    Batch batch;
    GLocalParams params;
};

TEST_F(ModelLoss, BetaZeroAndDoubling) {
    auto l = loss(0.7, 0.0);
    EXPECT_EQ(l.total.item(), 0.7f * l.local.item());
    const double a = 0.6, b = 0.2;
    auto l1 = loss(a, b), l2 = loss(a, 2 * b);
    const double local = a * l1.local.item();
    EXPECT_NEAR(l2.total.item() - local, 2.0 * (l1.total.item() - local), 1e-6);
}

TEST_F(ModelLoss, GradientIsWeightedSumOfParts) {
    const double a = 0.7, b = 0.3;
    auto total = grads_of([](const LossParts& l) { return l.total; }, a, b);
    auto local = grads_of([](const LossParts& l) { return l.local; }, a, b);
    auto global = grads_of([](const LossParts& l) { return l.global; }, a, b);
    double worst = 0.0, largest = 0.0;
    for (std::size_t i = 0; i < total.size(); ++i)
        for (std::size_t j = 0; j < total[i].size(); ++j) {
            worst = std::max(worst, std::abs(total[i][j] - (a * local[i][j] + b * global[i][j])));
            largest = std::max(largest, static_cast<double>(std::abs(total[i][j])));
        }
    EXPECT_LT(worst, 1e-5);
    EXPECT_GT(largest, 1e-3);
}

TEST(TrainConfigJson, RoundTripAndRejectsUnknownKeys) {
    TrainConfig c = small_config();
    c.alpha = 0.4;
    c.beta = 0.6;
    c.superpixels = false;
    auto back = TrainConfig::from_json(c.to_json());
    EXPECT_EQ(back.to_json(), c.to_json());
    EXPECT_EQ(TrainConfig::from_json(nlohmann::json::object()).batch_size, 32u);
    EXPECT_THROW(TrainConfig::from_json({{"learning_rate", 0.1}}), UsageError);
    EXPECT_THROW(TrainConfig::from_json({{"lr", "fast"}}), UsageError);
    EXPECT_THROW(TrainConfig::from_json({{"alpha", 0.0}, {"beta", 0.0}}), UsageError);
}

TEST(Normalizer, PerBandStandardization) {
    Patch p;
    p.channels = 2;
    p.height = 1;
    p.width = 4;
    p.bands = {1, 2, 3, 4, 5, 5, 5, 5};
    auto n = Normalizer::fit(std::vector<Patch>{p});
    EXPECT_FLOAT_EQ(n.mean[0], 2.5f);
    EXPECT_NEAR(n.stddev[0], std::sqrt(1.25), 1e-6);
    EXPECT_FLOAT_EQ(n.mean[1], 5.0f);
    EXPECT_FLOAT_EQ(n.stddev[1], 1.0f);  // constant band
    auto back = Normalizer::from_json(n.to_json());
    EXPECT_EQ(back.mean, n.mean);
    EXPECT_EQ(back.stddev, n.stddev);
}

TEST(Batching, NormalizesAndPadsTargets) {
    SynthConfig sc;
    sc.size = 8;
    auto patches = synth_patches(sc, 2);
    patches[1].labels.clear();
    TrainConfig c = small_config();
    c.n_sp_target = 4;
    auto samples = prepare_samples(patches, c);
    Normalizer n{{1, 2, 3, 4}, {2, 2, 2, 2}};
    std::vector<std::size_t> idx{1, 0};
    auto b = make_batch(samples, idx, n, 20, 3);
    EXPECT_EQ(b.x.shape(), (Shape{2, 4, 8, 8}));
    EXPECT_FLOAT_EQ(b.x.data()[64 * 4 + 5], (patches[0].bands[5] - 1.0f) / 2.0f);
    EXPECT_EQ(b.pixel_labels.size(), 128u);
    EXPECT_EQ(b.pixel_labels[0], kUnlabeled);
    EXPECT_EQ(b.pixel_labels[64], patches[0].labels[0]);
    EXPECT_EQ(b.token_mask.size(), 40u);
    EXPECT_EQ(std::accumulate(b.token_mask.begin(), b.token_mask.begin() + 20, 0), 0);
    EXPECT_EQ(std::accumulate(b.token_mask.begin() + 20, b.token_mask.end(), 0),
              static_cast<int>(samples[0].sp.n_sp));
}

TEST(Batching, PixelTokensWhenSuperpixelsOff) {
    SynthConfig sc;
    sc.size = 8;
    TrainConfig c = small_config();
    c.superpixels = false;
    auto s = prepare_samples(synth_patches(sc, 1), c);
    EXPECT_EQ(s[0].sp.n_sp, 64u);
}

TEST(Predict, ArgmaxLowestOnTies) {
    Tensor l = Tensor::from({1, 3, 1, 3}, {1, 0, 5, 1, 2, 5, 0, 2, 1});
    EXPECT_EQ(predict_classes(l), (std::vector<std::uint8_t>{0, 1, 0}));
}

TEST(Fit, EmptySplitsRejected) {
    SynthConfig sc;
    sc.size = 8;
    auto s = prepare_samples(synth_patches(sc, 1), small_config());
    EXPECT_THROW(fit({}, s, small_config(), 3), DataError);
    EXPECT_THROW(fit(s, {}, small_config(), 3), DataError);
}

// 8 patches, 32 x 32, K = 3, well separated spectra: one batch, 200 steps.
TEST(Fit, OverfitsEightPatches) {
    SynthConfig sc;
    sc.noise = 0.5;
    sc.seed = 11;
    auto s = prepare_samples(synth_patches(sc, 8), small_config());
    TrainConfig c = small_config();
    c.epochs = 200;
    c.max_steps = 200;
    auto r = fit(s, s, c, 3);
    ASSERT_EQ(r.step_losses.size(), 200u);
    EXPECT_LT(r.step_losses.back(), 0.25 * r.step_losses.front());
    // Train OA is logged after every step (one batch per epoch). Later steps
    // let the global head grow confident on boundary-straddling superpixels,
    // so the summed map can slip back below the peak; the bound is on reaching it.
    std::size_t first = 0;
    while (first < r.epochs.size() && r.epochs[first].val.oa <= 0.95) ++first;
    EXPECT_LT(first, r.epochs.size());
    EXPECT_GT(r.best_val_oa, 0.95);
    EXPECT_DOUBLE_EQ(overall_accuracy(evaluate(r.best_params, s, r.norm, c).final), r.best_val_oa);
}

TEST(Fit, SameSeedSameLosses) {
    SynthConfig sc;
    auto s = prepare_samples(synth_patches(sc, 10), small_config());
    std::span<const Sample> tr(s.data(), 8), va(s.data() + 8, 2);
    TrainConfig c = small_config();
    c.batch_size = 4;
    c.epochs = 1;
    auto a = fit(tr, va, c, 3), b = fit(tr, va, c, 3);
    EXPECT_NEAR(a.epochs[0].train_loss, b.epochs[0].train_loss, 1e-7);
    EXPECT_EQ(a.step_losses, b.step_losses);
    c.seed = 1;
    EXPECT_NE(fit(tr, va, c, 3).step_losses, a.step_losses);
}

TEST(Fit, CheckpointReplaysLoggedMetrics) {
    SynthConfig sc;
    sc.seed = 4;
    auto s = prepare_samples(synth_patches(sc, 12), small_config());
    std::span<const Sample> tr(s.data(), 8), va(s.data() + 8, 4);
    TrainConfig c = small_config();
    c.epochs = 3;
    const auto dir = scratch("replay");
    auto r = fit(tr, va, c, 3, dir);

    std::ifstream log(dir / "train_log.jsonl");
    std::vector<nlohmann::json> lines;
    for (std::string line; std::getline(log, line);) lines.push_back(nlohmann::json::parse(line));
    ASSERT_EQ(lines.size(), 3u);

    for (const char* name : {"best.ckpt", "final.ckpt"}) {
        nlohmann::json meta;
        auto p = load_checkpoint(dir / name, &meta);
        const auto norm = Normalizer::from_json(meta.at("normalizer"));
        const auto e = evaluate(p, va, norm, c);
        const auto& logged = lines.at(meta.at("epoch").get<std::size_t>()).at("val");
        const auto m = summarize(e.final);
        EXPECT_NEAR(m.oa, logged.at("oa").get<double>(), 1e-6) << name;
        EXPECT_NEAR(m.aa, logged.at("aa").get<double>(), 1e-6) << name;
        EXPECT_NEAR(m.kappa, logged.at("kappa").get<double>(), 1e-6) << name;
        EXPECT_NEAR(m.miou, logged.at("miou").get<double>(), 1e-6) << name;
    }
    nlohmann::json meta;
    load_checkpoint(dir / "best.ckpt", &meta);
    EXPECT_EQ(meta.at("epoch").get<std::size_t>(), r.best_epoch);
    EXPECT_DOUBLE_EQ(meta.at("val").at("oa").get<double>(), r.best_val_oa);
}

TEST(Evaluate, HeadsMatchIndependentConfusionCounts) {
    SynthConfig sc;
    auto s = prepare_samples(synth_patches(sc, 3), small_config());
    TrainConfig c = small_config();
    c.batch_size = 2;
    auto params = GLocalParams::init({.in_channels = 4, .hidden = 8, .classes = 3, .n_max = 64, .d_state = 4}, 9);
    auto norm = Normalizer::fit(std::vector<Patch>{s[0].patch, s[1].patch, s[2].patch});
    auto e = evaluate(params, s, norm, c);

    std::vector<std::size_t> all{0, 1, 2};
    auto b = make_batch(s, all, norm, 64, 3);
    auto out = forward(b.x, b.maps, params);
    const Tensor* heads[3] = {&out.m_local, &out.m_global_up, &out.m_final};
    const ConfusionMatrix* cms[3] = {&e.local, &e.global, &e.final};
    for (int h = 0; h < 3; ++h) {
        auto v = heads[h]->data();
        std::vector<std::vector<std::uint64_t>> counts(3, std::vector<std::uint64_t>(3, 0));
        for (std::size_t bi = 0; bi < 3; ++bi)
            for (std::size_t i = 0; i < 1024; ++i) {
                std::size_t best = 0;
                for (std::size_t k = 1; k < 3; ++k)
                    if (v[(bi * 3 + k) * 1024 + i] > v[(bi * 3 + best) * 1024 + i]) best = k;
                ++counts[s[bi].patch.labels[i]][best];
            }
        for (std::size_t r = 0; r < 3; ++r)
            for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(cms[h]->at(r, k), counts[r][k]);
    }
}

TEST(Sweep, GridStructure) {
    const auto g = standard_ratio_grid();
    const std::vector<std::pair<double, double>> want{{0.7, 0.3}, {0.6, 0.4}, {0.5, 0.5}, {0.4, 0.6},
                                                      {0.3, 0.7}, {1.0, 0.0}, {0.0, 1.0}};
    EXPECT_EQ(g, want);
    for (auto [a, b] : g) EXPECT_DOUBLE_EQ(a + b, 1.0);

    SynthConfig sc;
    sc.size = 8;
    TrainConfig c = small_config();
    c.n_sp_target = 4;
    c.n_max = 16;
    auto s = prepare_samples(synth_patches(sc, 3), c);
    auto r = loss_ratio_sweep(std::span<const Sample>(s.data(), 2), std::span<const Sample>(s.data() + 2, 1), c, 3);
    ASSERT_EQ(r.size(), 7u);
    const char* labels[] = {"70:30", "60:40", "50:50", "40:60", "30:70", "100:0", "0:100"};
    for (std::size_t i = 0; i < 7; ++i) {
        EXPECT_EQ(r[i].label, labels[i]);
        EXPECT_GE(r[i].val.oa, 0.0);
        EXPECT_LE(r[i].val.oa, 1.0);
    }
}

TEST(Ablation, FourVariantsAndPixelTokenLength) {
    SynthConfig sc;
    sc.seed = 8;
    auto p = synth_patches(sc, 6);
    TrainConfig c = small_config();
    c.epochs = 1;
    std::span<const Patch> tr(p.data(), 4), va(p.data() + 4, 1), te(p.data() + 5, 1);
    const auto dir = scratch("ablation");
    auto rows = ablation_suite(tr, va, te, c, 3, dir);
    ASSERT_EQ(rows.size(), 4u);
    EXPECT_EQ(rows[0].variant, "local");
    EXPECT_EQ(rows[1].variant, "global");
    EXPECT_EQ(rows[2].variant, "voting");
    EXPECT_EQ(rows[3].variant, "no-superpixel");
    EXPECT_EQ(rows[0].sequence_length, c.n_max);
    EXPECT_EQ(rows[3].sequence_length, 32u * 32u);
    EXPECT_TRUE(fs::exists(dir / "superpixel" / "best.ckpt"));
    EXPECT_TRUE(fs::exists(dir / "pixel" / "best.ckpt"));
    auto j = ablation_json(rows);
    ASSERT_EQ(j.size(), 4u);
    for (const auto& r : j)
        for (const char* k : {"oa", "miou", "kappa"}) EXPECT_TRUE(r.contains(k));
}

TEST(Synth, SpectraSeparatedAndPatchesLabeled) {
    SynthConfig sc;
    sc.classes = 5;
    sc.separation = 1.5;
    auto s = class_spectra(sc);
    ASSERT_EQ(s.size(), 5u);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < i; ++j) {
            double d = 0.0;
            for (std::size_t c = 0; c < 4; ++c) d += (s[i][c] - s[j][c]) * (s[i][c] - s[j][c]);
            EXPECT_GE(std::sqrt(d), 1.5);
        }
    auto p = synth_patches(sc, 3);
    for (const auto& q : p) {
        q.validate(5);
        EXPECT_EQ(q.bands.size(), 4u * 32 * 32);
    }
    EXPECT_EQ(synth_patches(sc, 3)[2].bands, p[2].bands);
    auto scene = synth_scene(sc, 64, 96);
    EXPECT_EQ(scene.labels.size(), 64u * 96);
}
