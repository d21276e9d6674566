#include "msom/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "msom/error.hpp"
#include "msom/io.hpp"
#include "msom/optim.hpp"

namespace msom {

namespace {

std::vector<float>* grad_of(Node& self, std::size_t i) {
    Node& in = *self.inputs[i];
    return in.requires_grad ? &in.ensure_grad() : nullptr;
}

std::size_t effective_n_max(const TrainConfig& c, std::size_t H, std::size_t W) {
    return c.superpixels ? c.n_max : H * W;
}

GLocalParams clone_params(GLocalParams& p) {
    GLocalParams out = p;
    for (auto& [name, t] : out.named()) {
        *t = t->clone();
        t->set_requires_grad(true);
    }
    return out;
}

void check_same_dims(std::span<const Sample> samples, std::size_t C, std::size_t H, std::size_t W) {
    for (const auto& s : samples)
        if (s.patch.channels != C || s.patch.height != H || s.patch.width != W)
            throw DataError("patch " + s.patch.patch_id + " is " + std::to_string(s.patch.channels) + "x" +
                            std::to_string(s.patch.height) + "x" + std::to_string(s.patch.width) + ", expected " +
                            std::to_string(C) + "x" + std::to_string(H) + "x" + std::to_string(W));
}

std::string ratio_label(double a, double b) {
    return std::to_string(static_cast<int>(std::lround(a * 100))) + ":" +
           std::to_string(static_cast<int>(std::lround(b * 100)));
}

nlohmann::json summary_json(const MetricSummary& m) {
    return {{"oa", m.oa}, {"aa", m.aa}, {"kappa", m.kappa}, {"miou", m.miou}};
}

}  // namespace

TrainConfig TrainConfig::from_json(const nlohmann::json& j, TrainConfig c) {
    if (!j.is_object()) throw UsageError("train config must be a JSON object");
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "batch_size") c.batch_size = v.get<std::size_t>();
            else if (key == "lr") c.lr = v.get<double>();
            else if (key == "epochs") c.epochs = v.get<std::size_t>();
            else if (key == "hidden_dim" || key == "hidden") c.hidden = v.get<std::size_t>();
            else if (key == "alpha") c.alpha = v.get<double>();
            else if (key == "beta") c.beta = v.get<double>();
            else if (key == "n_sp_target") c.n_sp_target = v.get<std::size_t>();
            else if (key == "n_max") c.n_max = v.get<std::size_t>();
            else if (key == "seed") c.seed = v.get<std::uint64_t>();
            else if (key == "compactness") c.compactness = v.get<double>();
            else if (key == "slic_iters") c.slic_iters = v.get<std::size_t>();
            else if (key == "d_state") c.d_state = v.get<std::size_t>();
            else if (key == "grad_clip") c.grad_clip = v.get<double>();
            else if (key == "max_steps") c.max_steps = v.get<std::size_t>();
            else if (key == "superpixels") c.superpixels = v.get<bool>();
            else throw UsageError("unknown train config key '" + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw UsageError(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) { return from_json(j, TrainConfig{}); }

nlohmann::json TrainConfig::to_json() const {
    return {{"batch_size", batch_size}, {"lr", lr},
            {"epochs", epochs},         {"hidden_dim", hidden},
            {"alpha", alpha},           {"beta", beta},
            {"n_sp_target", n_sp_target}, {"n_max", n_max},
            {"seed", seed},             {"compactness", compactness},
            {"slic_iters", slic_iters}, {"d_state", d_state},
            {"grad_clip", grad_clip},   {"max_steps", max_steps},
            {"superpixels", superpixels}};
}

void TrainConfig::validate() const {
    if (batch_size == 0) throw UsageError("batch_size must be positive");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw UsageError("lr must be positive");
    if (epochs == 0) throw UsageError("epochs must be positive");
    if (hidden == 0 || d_state == 0) throw UsageError("hidden_dim and d_state must be positive");
    if (!(alpha >= 0.0) || !(beta >= 0.0) || alpha + beta <= 0.0)
        throw UsageError("alpha and beta must be non-negative and not both zero");
    if (n_sp_target == 0 || n_max == 0) throw UsageError("n_sp_target and n_max must be positive");
    if (!(compactness > 0.0)) throw UsageError("compactness must be positive");
    if (!(grad_clip > 0.0)) throw UsageError("grad_clip must be positive");
}

TokenTargets superpixel_targets(std::span<const std::uint8_t> labels, const SuperpixelMap& map, std::size_t n_max,
                                std::size_t num_classes) {
    if (labels.size() != map.ids.size()) throw ShapeError("superpixel_targets: label raster does not match map");
    if (map.n_sp > n_max)
        throw DataError("superpixel_targets: " + std::to_string(map.n_sp) + " superpixels exceed N_max = " +
                        std::to_string(n_max));
    std::vector<std::uint32_t> hist(map.n_sp * num_classes, 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == kUnlabeled) continue;
        if (labels[i] >= num_classes)
            throw DataError("label " + std::to_string(labels[i]) + " out of range for " + std::to_string(num_classes) +
                            " classes");
        ++hist[static_cast<std::size_t>(map.ids[i]) * num_classes + labels[i]];
    }
    TokenTargets t;
    t.labels.assign(n_max, kUnlabeled);
    t.mask.assign(n_max, 0);
    for (std::size_t s = 0; s < map.n_sp; ++s) {
        std::uint32_t best = 0;
        for (std::size_t k = 0; k < num_classes; ++k)
            if (hist[s * num_classes + k] > best) {
                best = hist[s * num_classes + k];
                t.labels[s] = static_cast<std::uint8_t>(k);
            }
        t.mask[s] = best > 0;
    }
    return t;
}

Tensor cross_entropy(const Tensor& logits, std::size_t class_axis, std::span<const std::uint8_t> targets,
                     std::span<const std::uint8_t> mask) {
    if (!logits.defined() || class_axis >= logits.rank()) throw ShapeError("cross_entropy: bad class axis");
    const Shape& shape = logits.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < class_axis; ++i) outer *= shape[i];
    for (std::size_t i = class_axis + 1; i < shape.size(); ++i) inner *= shape[i];
    const std::size_t K = shape[class_axis];
    if (targets.size() != outer * inner)
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(outer * inner) + " positions");
    if (!mask.empty() && mask.size() != targets.size()) throw ShapeError("cross_entropy: mask size mismatch");

    auto x = logits.data();
    std::size_t count = 0;
    double total = 0.0;
    // softmax per contributing position, kept for backward
    std::vector<float> prob;
    std::vector<std::size_t> positions;
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t p = o * inner + i;
            if (targets[p] == kUnlabeled || (!mask.empty() && !mask[p])) continue;
            if (targets[p] >= K)
                throw DataError("cross_entropy: target " + std::to_string(targets[p]) + " out of range for " +
                                std::to_string(K) + " classes");
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(x[(o * K + k) * inner + i]));
            double z = 0.0;
            for (std::size_t k = 0; k < K; ++k) z += std::exp(x[(o * K + k) * inner + i] - mx);
            const double lse = mx + std::log(z);
            total += lse - x[(o * K + targets[p]) * inner + i];
            for (std::size_t k = 0; k < K; ++k)
                prob.push_back(static_cast<float>(std::exp(x[(o * K + k) * inner + i] - lse)));
            positions.push_back(p);
            ++count;
        }
    if (count == 0) throw DataError("cross_entropy: no labeled, unmasked positions");
    const double loss = total / static_cast<double>(count);
    if (!std::isfinite(loss)) throw NumericError("cross_entropy: non-finite loss");

    std::vector<std::uint8_t> tg(targets.begin(), targets.end());
    const bool rec = detail::should_record({&logits});
    return detail::make_result(
        {}, {static_cast<float>(loss)}, rec, {logits},
        [K, inner, count, prob = std::move(prob), positions = std::move(positions), tg = std::move(tg)](Node& self) {
            auto* gx = grad_of(self, 0);
            if (!gx) return;
            const double g = self.grad[0] / static_cast<double>(count);
            for (std::size_t j = 0; j < positions.size(); ++j) {
                const std::size_t p = positions[j], o = p / inner, i = p % inner;
                for (std::size_t k = 0; k < K; ++k) {
                    const double d = prob[j * K + k] - (k == tg[p] ? 1.0 : 0.0);
                    (*gx)[(o * K + k) * inner + i] += static_cast<float>(g * d);
                }
            }
        },
        "cross_entropy");
}

Tensor combine_losses(const Tensor& local, const Tensor& global, double alpha, double beta) {
    if (alpha < 0.0 || beta < 0.0) throw UsageError("loss weights must be non-negative");
    return add(scale(local, static_cast<float>(alpha)), scale(global, static_cast<float>(beta)));
}

LossParts multitask_loss(const GLocalOutputs& out, std::span<const std::uint8_t> pixel_labels,
                         std::span<const std::uint8_t> token_labels, std::span<const std::uint8_t> token_mask,
                         double alpha, double beta) {
    LossParts l;
    l.local = cross_entropy(out.m_local, 1, pixel_labels);
    l.global = cross_entropy(out.g_tokens, 2, token_labels, token_mask);
    l.total = combine_losses(l.local, l.global, alpha, beta);
    return l;
}

Normalizer Normalizer::fit(std::span<const Patch> patches) {
    if (patches.empty()) throw DataError("normalizer: no patches");
    const std::size_t C = patches[0].channels;
    std::vector<double> sum(C, 0.0), sq(C, 0.0);
    double n = 0.0;
    for (const auto& p : patches) {
        if (p.channels != C) throw DataError("normalizer: patches differ in band count");
        const std::size_t HW = p.pixels();
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i) {
                const double v = p.bands[c * HW + i];
                sum[c] += v;
                sq[c] += v * v;
            }
        n += static_cast<double>(HW);
    }
    Normalizer norm;
    for (std::size_t c = 0; c < C; ++c) {
        const double mu = sum[c] / n;
        const double var = std::max(0.0, sq[c] / n - mu * mu);
        norm.mean.push_back(static_cast<float>(mu));
        norm.stddev.push_back(var > 1e-12 ? static_cast<float>(std::sqrt(var)) : 1.0f);
    }
    return norm;
}

nlohmann::json Normalizer::to_json() const { return {{"mean", mean}, {"std", stddev}}; }

Normalizer Normalizer::from_json(const nlohmann::json& j) {
    Normalizer n;
    try {
        n.mean = j.at("mean").get<std::vector<float>>();
        n.stddev = j.at("std").get<std::vector<float>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("normalizer: ") + e.what());
    }
    if (n.mean.size() != n.stddev.size()) throw DataError("normalizer: mean and std differ in length");
    return n;
}

SuperpixelMap compute_superpixels(const Patch& patch, const TrainConfig& config) {
    if (!config.superpixels) return SuperpixelMap::pixels(patch.height, patch.width);
    SlicOptions o;
    o.n_sp_target = config.n_sp_target;
    o.compactness = config.compactness;
    o.iters = config.slic_iters;
    o.seed = config.seed;
    return slic(pca_project(patch, 3), o);
}

std::vector<Sample> prepare_samples(std::vector<Patch> patches, const TrainConfig& config,
                                    const std::filesystem::path& cache_dir) {
    std::vector<Sample> out;
    out.reserve(patches.size());
    for (auto& p : patches) {
        Sample s;
        const auto cached = cache_dir.empty() ? std::filesystem::path() : cache_dir / (p.patch_id + ".sp");
        if (config.superpixels && !cached.empty() && std::filesystem::exists(cached)) {
            s.sp = read_superpixels(cached);
            if (s.sp.height != p.height || s.sp.width != p.width)
                throw DataError(cached.string() + " does not match patch " + p.patch_id);
        } else {
            s.sp = compute_superpixels(p, config);
        }
        s.patch = std::move(p);
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<Patch> load_split(const DatasetManifest& manifest, const std::filesystem::path& manifest_path, Split split) {
    std::vector<Patch> out;
    const auto base = manifest_path.parent_path();
    for (const auto* e : manifest.split(split)) {
        std::filesystem::path p(e->path);
        if (p.is_relative()) p = base / p;
        out.push_back(read_patch(p));
    }
    return out;
}

Batch make_batch(std::span<const Sample> samples, std::span<const std::size_t> indices, const Normalizer& norm,
                 std::size_t n_max, std::size_t num_classes) {
    if (indices.empty()) throw UsageError("empty batch");
    const Patch& first = samples[indices[0]].patch;
    const std::size_t B = indices.size(), C = first.channels, H = first.height, W = first.width, HW = H * W;
    if (norm.mean.size() != C) throw DataError("normalizer has " + std::to_string(norm.mean.size()) + " bands, patch has " + std::to_string(C));
    Batch b;
    std::vector<float> x(B * C * HW);
    for (std::size_t bi = 0; bi < B; ++bi) {
        const Sample& s = samples[indices[bi]];
        if (s.patch.channels != C || s.patch.height != H || s.patch.width != W)
            throw DataError("patch " + s.patch.patch_id + " differs in shape from the rest of its batch");
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < HW; ++i)
                x[(bi * C + c) * HW + i] = (s.patch.bands[c * HW + i] - norm.mean[c]) / norm.stddev[c];
        b.maps.push_back(s.sp);
        if (s.patch.has_labels()) {
            b.pixel_labels.insert(b.pixel_labels.end(), s.patch.labels.begin(), s.patch.labels.end());
            auto t = superpixel_targets(s.patch.labels, s.sp, n_max, num_classes);
            b.token_labels.insert(b.token_labels.end(), t.labels.begin(), t.labels.end());
            b.token_mask.insert(b.token_mask.end(), t.mask.begin(), t.mask.end());
        } else {
            b.pixel_labels.insert(b.pixel_labels.end(), HW, kUnlabeled);
            b.token_labels.insert(b.token_labels.end(), n_max, kUnlabeled);
            b.token_mask.insert(b.token_mask.end(), n_max, 0);
        }
    }
    b.x = Tensor::from({B, C, H, W}, std::move(x));
    return b;
}

std::vector<std::uint8_t> predict_classes(const Tensor& logits) {
    if (logits.rank() != 4) throw ShapeError("predict_classes: expected [B, K, H, W]");
    const std::size_t B = logits.dim(0), K = logits.dim(1), HW = logits.dim(2) * logits.dim(3);
    std::vector<std::uint8_t> out(B * HW);
    auto v = logits.data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < HW; ++i) {
            std::size_t best = 0;
            for (std::size_t k = 1; k < K; ++k)
                if (v[(b * K + k) * HW + i] > v[(b * K + best) * HW + i]) best = k;
            out[b * HW + i] = static_cast<std::uint8_t>(best);
        }
    return out;
}

Evaluation evaluate(const GLocalParams& params, std::span<const Sample> samples, const Normalizer& norm,
                    const TrainConfig& config) {
    const std::size_t K = params.config.classes;
    Evaluation e{ConfusionMatrix(K), ConfusionMatrix(K), ConfusionMatrix(K)};
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
        const std::size_t n = std::min(config.batch_size, order.size() - start);
        std::span<const std::size_t> idx(order.data() + start, n);
        Batch b = make_batch(samples, idx, norm, params.config.n_max, K);
        auto out = forward(b.x, b.maps, params);
        std::vector<std::uint8_t> valid(b.pixel_labels.size());
        for (std::size_t i = 0; i < valid.size(); ++i) valid[i] = b.pixel_labels[i] != kUnlabeled;
        e.local.accumulate(predict_classes(out.m_local), b.pixel_labels, valid);
        e.global.accumulate(predict_classes(out.m_global_up), b.pixel_labels, valid);
        e.final.accumulate(predict_classes(out.m_final), b.pixel_labels, valid);
    }
    return e;
}

nlohmann::json metrics_json(const ConfusionMatrix& cm, const ClassScheme* scheme) {
    nlohmann::json j = summary_json(summarize(cm));
    const auto acc = per_class_accuracy(cm);
    const auto iou = per_class_iou(cm);
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t k = 0; k < cm.num_classes(); ++k) {
        nlohmann::json r = {{"id", k}, {"support", cm.row_sum(k)}};
        if (scheme && k < scheme->size()) r["name"] = (*scheme)[k].name;
        r["accuracy"] = std::isnan(acc[k]) ? nlohmann::json(nullptr) : nlohmann::json(acc[k]);
        r["iou"] = std::isnan(iou[k]) ? nlohmann::json(nullptr) : nlohmann::json(iou[k]);
        rows.push_back(r);
    }
    j["per_class"] = rows;
    j["confusion"] = to_json(cm);
    j["zero_support_excluded"] = true;
    return j;
}

nlohmann::json EpochLog::to_json() const {
    return {{"epoch", epoch},
            {"steps", steps},
            {"train_loss", train_loss},
            {"train_local", train_local},
            {"train_global", train_global},
            {"val", summary_json(val)},
            {"val_local_oa", val_local_oa},
            {"val_global_oa", val_global_oa}};
}

FitResult fit(std::span<const Sample> train, std::span<const Sample> val, const TrainConfig& config,
              std::size_t num_classes, const std::filesystem::path& out_dir) {
    config.validate();
    if (train.empty()) throw DataError("fit: empty train split");
    if (val.empty()) throw DataError("fit: empty val split");
    const Patch& p0 = train[0].patch;
    const std::size_t C = p0.channels, H = p0.height, W = p0.width;
    check_same_dims(train, C, H, W);
    check_same_dims(val, C, H, W);

    FitResult r;
    {
        std::vector<Patch> patches;
        for (const auto& s : train) patches.push_back(s.patch);
        r.norm = Normalizer::fit(patches);
    }
    GLocalConfig mc;
    mc.in_channels = C;
    mc.hidden = config.hidden;
    mc.classes = num_classes;
    mc.n_max = effective_n_max(config, H, W);
    mc.d_state = config.d_state;
    GLocalParams params = GLocalParams::init(mc, config.seed);
    auto tensors = params.parameters();
    AdamState adam;
    AdamConfig acfg;
    acfg.lr = config.lr;

    std::ofstream log;
    if (!out_dir.empty()) {
        log = io::open_out(out_dir / "train_log.jsonl");
    }
    auto meta = [&](std::size_t epoch, const MetricSummary& v) {
        return nlohmann::json{{"normalizer", r.norm.to_json()},
                              {"train_config", config.to_json()},
                              {"epoch", epoch},
                              {"val", summary_json(v)}};
    };

    std::mt19937_64 rng(config.seed);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t steps = 0;
    bool done = false;
    for (std::size_t epoch = 0; epoch < config.epochs && !done; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double sum_total = 0.0, sum_local = 0.0, sum_global = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t n = std::min(config.batch_size, order.size() - start);
            std::span<const std::size_t> idx(order.data() + start, n);
            Batch b = make_batch(train, idx, r.norm, mc.n_max, num_classes);
            LossParts loss;
            {
                Tape tape;
                TapeScope scope(tape);
                auto out = forward(b.x, b.maps, params);
                loss = multitask_loss(out, b.pixel_labels, b.token_labels, b.token_mask, config.alpha, config.beta);
                if (!std::isfinite(loss.total.item()))
                    throw NumericError("non-finite loss at step " + std::to_string(steps));
                tape.backward(loss.total);
            }
            clip_grad_norm(tensors, config.grad_clip);
            adam_step(tensors, adam, acfg);
            zero_grads(tensors);
            sum_total += loss.total.item();
            sum_local += loss.local.item();
            sum_global += loss.global.item();
            r.step_losses.push_back(loss.total.item());
            ++batches;
            ++steps;
            if (config.max_steps && steps >= config.max_steps) {
                done = true;
                break;
            }
        }
        Evaluation ev = evaluate(params, val, r.norm, config);
        EpochLog e;
        e.epoch = epoch;
        e.steps = steps;
        e.train_loss = sum_total / static_cast<double>(batches);
        e.train_local = sum_local / static_cast<double>(batches);
        e.train_global = sum_global / static_cast<double>(batches);
        e.val = summarize(ev.final);
        e.val_local_oa = overall_accuracy(ev.local);
        e.val_global_oa = overall_accuracy(ev.global);
        r.epochs.push_back(e);
        if (log.is_open()) {
            log << e.to_json().dump() << '\n';
            log.flush();
        }
        if (e.val.oa > r.best_val_oa) {
            r.best_val_oa = e.val.oa;
            r.best_epoch = epoch;
            r.best_params = clone_params(params);
            if (!out_dir.empty()) save_checkpoint(out_dir / "best.ckpt", r.best_params, meta(epoch, e.val));
        }
    }
    r.final_params = params;
    if (!out_dir.empty()) save_checkpoint(out_dir / "final.ckpt", r.final_params, meta(r.epochs.back().epoch, r.epochs.back().val));
    return r;
}

std::vector<std::pair<double, double>> standard_ratio_grid() {
    return {{0.7, 0.3}, {0.6, 0.4}, {0.5, 0.5}, {0.4, 0.6}, {0.3, 0.7}, {1.0, 0.0}, {0.0, 1.0}};
}

std::vector<RatioResult> loss_ratio_sweep(std::span<const Sample> train, std::span<const Sample> val,
                                          const TrainConfig& config, std::size_t num_classes,
                                          const std::vector<std::pair<double, double>>& grid) {
    std::vector<RatioResult> out;
    for (auto [a, b] : grid) {
        TrainConfig c = config;
        c.alpha = a;
        c.beta = b;
        auto r = fit(train, val, c, num_classes);
        out.push_back({ratio_label(a, b), a, b, r.epochs.back().val});
    }
    return out;
}

std::vector<AblationRow> ablation_suite(std::span<const Patch> train, std::span<const Patch> val,
                                        std::span<const Patch> eval, const TrainConfig& config,
                                        std::size_t num_classes, const std::filesystem::path& out_dir) {
    if (eval.empty()) throw DataError("ablation: empty evaluation split");
    auto prep = [](std::span<const Patch> ps, const TrainConfig& c) {
        return prepare_samples(std::vector<Patch>(ps.begin(), ps.end()), c);
    };
    std::vector<AblationRow> rows;
    {
        const auto tr = prep(train, config), va = prep(val, config), ev = prep(eval, config);
        auto r = fit(tr, va, config, num_classes, out_dir.empty() ? out_dir : out_dir / "superpixel");
        const Evaluation e = evaluate(r.best_params, ev, r.norm, config);
        const std::size_t L = r.best_params.config.n_max;
        rows.push_back({"local", summarize(e.local), L});
        rows.push_back({"global", summarize(e.global), L});
        rows.push_back({"voting", summarize(e.final), L});
    }
    {
        TrainConfig pc = config;
        pc.superpixels = false;
        const auto tr = prep(train, pc), va = prep(val, pc), ev = prep(eval, pc);
        auto r = fit(tr, va, pc, num_classes, out_dir.empty() ? out_dir : out_dir / "pixel");
        const Evaluation e = evaluate(r.best_params, ev, r.norm, pc);
        rows.push_back({"no-superpixel", summarize(e.final), r.best_params.config.n_max});
    }
    return rows;
}

nlohmann::json ablation_json(const std::vector<AblationRow>& rows) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json row = summary_json(r.metrics);
        row["variant"] = r.variant;
        row["sequence_length"] = r.sequence_length;
        j.push_back(row);
    }
    return j;
}

}  // namespace msom
