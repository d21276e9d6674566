#include "msom/superpixel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <string>

#include "msom/error.hpp"
#include "msom/io.hpp"

namespace msom {

namespace {

constexpr std::int32_t kNone = -1;

// Row-major 4-connected component labeling. Returns component id per pixel
// and the component count; components are numbered in first-occurrence order.
std::size_t label_components(std::span<const std::int32_t> ids, std::size_t H, std::size_t W,
                             std::vector<std::int32_t>& comp) {
    comp.assign(H * W, kNone);
    std::vector<std::size_t> stack;
    std::size_t n = 0;
    for (std::size_t start = 0; start < H * W; ++start) {
        if (comp[start] != kNone) continue;
        const auto c = static_cast<std::int32_t>(n++);
        comp[start] = c;
        stack.push_back(start);
        while (!stack.empty()) {
            const std::size_t i = stack.back();
            stack.pop_back();
            const std::size_t y = i / W, x = i % W;
            auto visit = [&](std::size_t j) {
                if (comp[j] == kNone && ids[j] == ids[i]) {
                    comp[j] = c;
                    stack.push_back(j);
                }
            };
            if (x > 0) visit(i - 1);
            if (x + 1 < W) visit(i + 1);
            if (y > 0) visit(i - W);
            if (y + 1 < H) visit(i + W);
        }
    }
    return n;
}

std::size_t find_root(std::vector<std::size_t>& parent, std::size_t i) {
    while (parent[i] != i) {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    return i;
}

}  // namespace

void SuperpixelMap::validate() const {
    if (ids.size() != height * width) throw DataError("superpixels: ids do not match [H, W]");
    if (sizes.size() != n_sp) throw DataError("superpixels: sizes do not match n_sp");
    std::vector<std::uint32_t> count(n_sp, 0);
    for (auto id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= n_sp)
            throw DataError("superpixels: id " + std::to_string(id) + " out of range for n_sp = " + std::to_string(n_sp));
        ++count[static_cast<std::size_t>(id)];
    }
    for (std::size_t i = 0; i < n_sp; ++i) {
        if (count[i] == 0) throw DataError("superpixels: empty superpixel " + std::to_string(i));
        if (count[i] != sizes[i]) throw DataError("superpixels: size mismatch for superpixel " + std::to_string(i));
    }
    std::vector<std::int32_t> comp;
    if (label_components(ids, height, width, comp) != n_sp)
        throw DataError("superpixels: some superpixel is not 4-connected");
}

SuperpixelMap SuperpixelMap::pixels(std::size_t height, std::size_t width) {
    SuperpixelMap m;
    m.height = height;
    m.width = width;
    m.n_sp = height * width;
    m.ids.resize(m.n_sp);
    std::iota(m.ids.begin(), m.ids.end(), 0);
    m.sizes.assign(m.n_sp, 1);
    return m;
}

SuperpixelMap enforce_connectivity(std::span<const std::int32_t> ids, std::size_t height, std::size_t width,
                                   std::size_t expected_segments) {
    const std::size_t N = height * width;
    if (ids.size() != N) throw DataError("connectivity: ids do not match [H, W]");
    for (auto v : ids)
        if (v < 0) throw DataError("connectivity: negative superpixel id");
    if (N == 0) return {height, width, 0, {}, {}};
    if (expected_segments == 0) {
        std::vector<std::int32_t> distinct(ids.begin(), ids.end());
        std::sort(distinct.begin(), distinct.end());
        expected_segments = static_cast<std::size_t>(std::unique(distinct.begin(), distinct.end()) - distinct.begin());
    }
    const std::size_t min_size = (N / expected_segments) / 4;

    std::vector<std::int32_t> comp;
    const std::size_t n_comp = label_components(ids, height, width, comp);
    std::vector<std::size_t> size(n_comp, 0);
    for (auto c : comp) ++size[static_cast<std::size_t>(c)];

    // adjacency between components
    std::vector<std::vector<std::size_t>> adj(n_comp);
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
            const auto a = static_cast<std::size_t>(comp[y * width + x]);
            if (x + 1 < width) {
                const auto b = static_cast<std::size_t>(comp[y * width + x + 1]);
                if (a != b) {
                    adj[a].push_back(b);
                    adj[b].push_back(a);
                }
            }
            if (y + 1 < height) {
                const auto b = static_cast<std::size_t>(comp[(y + 1) * width + x]);
                if (a != b) {
                    adj[a].push_back(b);
                    adj[b].push_back(a);
                }
            }
        }

    std::vector<std::size_t> parent(n_comp);
    std::iota(parent.begin(), parent.end(), 0);
    std::vector<std::size_t> merged_size = size;
    for (std::size_t c = 0; c < n_comp; ++c) {
        const std::size_t root = find_root(parent, c);
        if (root != c || merged_size[root] >= min_size) continue;
        // Neighbours of the whole merged group rooted at c. Only c itself can
        // have been absorbed into so far, so scanning its own list suffices.
        std::size_t best = root;
        for (std::size_t nb : adj[c]) {
            const std::size_t r = find_root(parent, nb);
            if (r == root) continue;
            if (best == root || merged_size[r] > merged_size[best] || (merged_size[r] == merged_size[best] && r < best))
                best = r;
        }
        if (best == root) continue;
        parent[root] = best;
        merged_size[best] += merged_size[root];
    }

    SuperpixelMap out;
    out.height = height;
    out.width = width;
    out.ids.resize(N);
    std::vector<std::int32_t> remap(n_comp, kNone);
    for (std::size_t i = 0; i < N; ++i) {
        const std::size_t r = find_root(parent, static_cast<std::size_t>(comp[i]));
        if (remap[r] == kNone) {
            remap[r] = static_cast<std::int32_t>(out.n_sp++);
            out.sizes.push_back(0);
        }
        out.ids[i] = remap[r];
        ++out.sizes[static_cast<std::size_t>(remap[r])];
    }
    return out;
}

SuperpixelMap slic(const PCImage& pc, const SlicOptions& options) {
    const std::size_t H = pc.height, W = pc.width, N = H * W, C = pc.count();
    if (options.n_sp_target == 0 || options.n_sp_target > N)
        throw UsageError("slic: n_sp_target must be in 1.." + std::to_string(N));
    if (!(options.compactness > 0.0)) throw UsageError("slic: compactness must be positive");
    for (double v : pc.components)
        if (!std::isfinite(v)) throw NumericError("slic: non-finite principal component value");

    // Channels standardized to zero mean, unit variance.
    std::vector<double> color(C * N, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
        double mu = 0.0, var = 0.0;
        for (std::size_t i = 0; i < N; ++i) mu += pc.components[c * N + i];
        mu /= static_cast<double>(N);
        for (std::size_t i = 0; i < N; ++i) var += (pc.components[c * N + i] - mu) * (pc.components[c * N + i] - mu);
        var /= static_cast<double>(N);
        const double inv = var > 0.0 ? 1.0 / std::sqrt(var) : 0.0;
        for (std::size_t i = 0; i < N; ++i) color[c * N + i] = (pc.components[c * N + i] - mu) * inv;
    }
    auto color_dist2 = [&](std::size_t i, const std::vector<double>& center) {
        double d = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            const double t = color[c * N + i] - center[c];
            d += t * t;
        }
        return d;
    };

    const double target = static_cast<double>(options.n_sp_target);
    const double step = std::sqrt(static_cast<double>(N) / target);
    const std::size_t ny = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(std::sqrt(target * static_cast<double>(H) / static_cast<double>(W)))), 1, H);
    const std::size_t nx =
        std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(target / static_cast<double>(ny))), 1, W);
    const double step_y = static_cast<double>(H) / static_cast<double>(ny);
    const double step_x = static_cast<double>(W) / static_cast<double>(nx);

    auto gradient = [&](std::size_t y, std::size_t x) {
        const std::size_t y0 = y > 0 ? y - 1 : y, y1 = y + 1 < H ? y + 1 : y;
        const std::size_t x0 = x > 0 ? x - 1 : x, x1 = x + 1 < W ? x + 1 : x;
        double g = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            const double dy = color[c * N + y1 * W + x] - color[c * N + y0 * W + x];
            const double dx = color[c * N + y * W + x1] - color[c * N + y * W + x0];
            g += dy * dy + dx * dx;
        }
        return g;
    };

    struct Center {
        double y, x;
        std::vector<double> color;
    };
    std::vector<Center> centers;
    for (std::size_t gy = 0; gy < ny; ++gy)
        for (std::size_t gx = 0; gx < nx; ++gx) {
            Center c;
            c.y = (static_cast<double>(gy) + 0.5) * step_y - 0.5;
            c.x = (static_cast<double>(gx) + 0.5) * step_x - 0.5;
            auto py = static_cast<std::size_t>(std::clamp(std::lround(c.y), 0L, static_cast<long>(H) - 1));
            auto px = static_cast<std::size_t>(std::clamp(std::lround(c.x), 0L, static_cast<long>(W) - 1));
            // Move off edges: lowest gradient in the 3x3 neighbourhood, only
            // when strictly lower than at the grid position.
            const double g0 = gradient(py, px);
            double best = g0;
            std::size_t by = py, bx = px;
            for (long dy = -1; dy <= 1; ++dy)
                for (long dx = -1; dx <= 1; ++dx) {
                    const long yy = static_cast<long>(py) + dy, xx = static_cast<long>(px) + dx;
                    if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                    const double g = gradient(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
                    if (g < best) {
                        best = g;
                        by = static_cast<std::size_t>(yy);
                        bx = static_cast<std::size_t>(xx);
                    }
                }
            if (best < g0) {
                c.y = static_cast<double>(by);
                c.x = static_cast<double>(bx);
            }
            c.color.resize(C);
            for (std::size_t ch = 0; ch < C; ++ch) c.color[ch] = color[ch * N + by * W + bx];
            centers.push_back(std::move(c));
        }

    const double m2_over_s2 = options.compactness * options.compactness / (step * step);
    std::vector<std::int32_t> label(N, kNone);
    std::vector<double> dist(N);
    const std::size_t iters = std::max<std::size_t>(options.iters, 1);
    for (std::size_t it = 0; it < iters; ++it) {
        std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
        std::fill(label.begin(), label.end(), kNone);
        for (std::size_t k = 0; k < centers.size(); ++k) {
            const auto& c = centers[k];
            const long y0 = std::max(0L, static_cast<long>(std::ceil(c.y - step)));
            const long y1 = std::min(static_cast<long>(H) - 1, static_cast<long>(std::floor(c.y + step)));
            const long x0 = std::max(0L, static_cast<long>(std::ceil(c.x - step)));
            const long x1 = std::min(static_cast<long>(W) - 1, static_cast<long>(std::floor(c.x + step)));
            for (long y = y0; y <= y1; ++y)
                for (long x = x0; x <= x1; ++x) {
                    const std::size_t i = static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x);
                    const double dy = static_cast<double>(y) - c.y, dx = static_cast<double>(x) - c.x;
                    const double d = color_dist2(i, c.color) + (dy * dy + dx * dx) * m2_over_s2;
                    if (d < dist[i]) {
                        dist[i] = d;
                        label[i] = static_cast<std::int32_t>(k);
                    }
                }
        }
        // Pixels outside every search window join the spatially nearest center.
        for (std::size_t i = 0; i < N; ++i) {
            if (label[i] != kNone) continue;
            const double y = static_cast<double>(i / W), x = static_cast<double>(i % W);
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < centers.size(); ++k) {
                const double d = (y - centers[k].y) * (y - centers[k].y) + (x - centers[k].x) * (x - centers[k].x);
                if (d < best) {
                    best = d;
                    label[i] = static_cast<std::int32_t>(k);
                }
            }
        }
        // Update centers to the mean of their members.
        std::vector<double> sy(centers.size(), 0.0), sx(centers.size(), 0.0), cnt(centers.size(), 0.0);
        std::vector<double> sc(centers.size() * C, 0.0);
        for (std::size_t i = 0; i < N; ++i) {
            const auto k = static_cast<std::size_t>(label[i]);
            sy[k] += static_cast<double>(i / W);
            sx[k] += static_cast<double>(i % W);
            cnt[k] += 1.0;
            for (std::size_t ch = 0; ch < C; ++ch) sc[k * C + ch] += color[ch * N + i];
        }
        for (std::size_t k = 0; k < centers.size(); ++k) {
            if (cnt[k] == 0.0) continue;
            centers[k].y = sy[k] / cnt[k];
            centers[k].x = sx[k] / cnt[k];
            for (std::size_t ch = 0; ch < C; ++ch) centers[k].color[ch] = sc[k * C + ch] / cnt[k];
        }
    }
    return enforce_connectivity(label, H, W, centers.size());
}

double boundary_recall(std::span<const std::int32_t> reference, std::span<const std::int32_t> candidate,
                       std::size_t height, std::size_t width, std::size_t tolerance) {
    const std::size_t N = height * width;
    if (reference.size() != N || candidate.size() != N) throw DataError("boundary_recall: raster sizes differ");
    auto boundary = [&](std::span<const std::int32_t> ids) {
        std::vector<std::uint8_t> b(N, 0);
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x) {
                const std::size_t i = y * width + x;
                if ((x + 1 < width && ids[i] != ids[i + 1]) || (y + 1 < height && ids[i] != ids[i + width])) b[i] = 1;
                if ((x > 0 && ids[i] != ids[i - 1]) || (y > 0 && ids[i] != ids[i - width])) b[i] = 1;
            }
        return b;
    };
    const auto ref = boundary(reference);
    const auto cand = boundary(candidate);
    std::size_t total = 0, hit = 0;
    const long t = static_cast<long>(tolerance);
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
            if (!ref[y * width + x]) continue;
            ++total;
            bool found = false;
            for (long dy = -t; dy <= t && !found; ++dy)
                for (long dx = -t; dx <= t && !found; ++dx) {
                    const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
                    if (yy < 0 || xx < 0 || yy >= static_cast<long>(height) || xx >= static_cast<long>(width)) continue;
                    found = cand[static_cast<std::size_t>(yy) * width + static_cast<std::size_t>(xx)] != 0;
                }
            hit += found;
        }
    return total == 0 ? 1.0 : static_cast<double>(hit) / static_cast<double>(total);
}

void write_superpixels(const std::filesystem::path& path, const SuperpixelMap& map) {
    auto out = io::open_out(path);
    io::write_header(out, {{"H", map.height}, {"W", map.width}, {"n_sp", map.n_sp}});
    std::vector<std::uint32_t> raw(map.ids.begin(), map.ids.end());
    io::write_u32(out, raw);
    if (!out) throw DataError("failed writing " + path.string());
}

SuperpixelMap read_superpixels(const std::filesystem::path& path) {
    auto in = io::open_in(path);
    const auto h = io::read_header(in, path);
    SuperpixelMap m;
    m.height = io::field<std::size_t>(h, "H", path);
    m.width = io::field<std::size_t>(h, "W", path);
    m.n_sp = io::field<std::size_t>(h, "n_sp", path);
    const auto raw = io::read_u32(in, m.height * m.width, path);
    m.ids.assign(raw.begin(), raw.end());
    m.sizes.assign(m.n_sp, 0);
    for (auto id : m.ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= m.n_sp)
            throw DataError("superpixel id out of range in " + path.string());
        ++m.sizes[static_cast<std::size_t>(id)];
    }
    m.validate();
    return m;
}

}  // namespace msom
