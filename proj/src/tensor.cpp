#include "msom/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <numeric>
#include <sstream>

namespace msom {

namespace {

thread_local Tape* g_active_tape = nullptr;

bool debug_from_env() {
    const char* v = std::getenv("MSOM_DEBUG_FINITE");
    return v != nullptr && *v != '\0' && std::string(v) != "0";
}

std::atomic<bool> g_debug_checks{debug_from_env()};

void require(bool cond, const std::string& what) {
    if (!cond) throw ShapeError(what);
}

void require_defined(const Tensor& t, const char* op) {
    if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
}

std::string shapes_msg(const char* op, const Shape& a, const Shape& b) {
    return std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b);
}

bool is_suffix(const Shape& small, const Shape& big) {
    if (numel(small) == 1) return true;
    if (small.size() > big.size()) return false;
    return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

// (outer, n, inner) split of a shape around `axis`.
struct AxisSplit {
    std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.n = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

std::vector<float>* grad_of(Node& self, std::size_t i) {
    Node& in = *self.inputs[i];
    return in.requires_grad ? &in.ensure_grad() : nullptr;
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, const char* op, Fwd fwd, Deriv deriv) {
    require_defined(a, op);
    std::vector<float> out(a.numel());
    auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
    const bool rec = detail::should_record({&a});
    return detail::make_result(a.shape(), std::move(out), rec, {a},
                               [deriv](Node& self) {
                                   auto* ga = grad_of(self, 0);
                                   if (!ga) return;
                                   const auto& x = self.inputs[0]->value;
                                   for (std::size_t i = 0; i < x.size(); ++i)
                                       (*ga)[i] += self.grad[i] * deriv(x[i], self.value[i]);
                               },
                               op);
}

enum class BinOp { add, sub, mul, div };

Tensor binary(const Tensor& a, const Tensor& b, BinOp kind, const char* op) {
    require_defined(a, op);
    require_defined(b, op);
    const bool a_big = a.numel() >= b.numel();
    const Tensor& big = a_big ? a : b;
    const Tensor& small = a_big ? b : a;
    if (!is_suffix(small.shape(), big.shape())) throw ShapeError(shapes_msg(op, a.shape(), b.shape()));
    const std::size_t n = big.numel();
    const std::size_t na = a.numel(), nb = b.numel();
    auto x = a.data();
    auto y = b.data();
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const float u = x[i % na], v = y[i % nb];
        switch (kind) {
            case BinOp::add: out[i] = u + v; break;
            case BinOp::sub: out[i] = u - v; break;
            case BinOp::mul: out[i] = u * v; break;
            case BinOp::div: out[i] = u / v; break;
        }
    }
    const bool rec = detail::should_record({&a, &b});
    return detail::make_result(big.shape(), std::move(out), rec, {a, b},
                               [kind, na, nb](Node& self) {
                                   auto* ga = grad_of(self, 0);
                                   auto* gb = grad_of(self, 1);
                                   const auto& x = self.inputs[0]->value;
                                   const auto& y = self.inputs[1]->value;
                                   for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                       const float g = self.grad[i];
                                       const std::size_t ia = i % na, ib = i % nb;
                                       switch (kind) {
                                           case BinOp::add:
                                               if (ga) (*ga)[ia] += g;
                                               if (gb) (*gb)[ib] += g;
                                               break;
                                           case BinOp::sub:
                                               if (ga) (*ga)[ia] += g;
                                               if (gb) (*gb)[ib] -= g;
                                               break;
                                           case BinOp::mul:
                                               if (ga) (*ga)[ia] += g * y[ib];
                                               if (gb) (*gb)[ib] += g * x[ia];
                                               break;
                                           case BinOp::div:
                                               if (ga) (*ga)[ia] += g / y[ib];
                                               if (gb) (*gb)[ib] -= g * x[ia] / (y[ib] * y[ib]);
                                               break;
                                       }
                                   }
                               },
                               op);
}

float stable_sigmoid(float x) {
    if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
    const float e = std::exp(x);
    return e / (1.0f + e);
}

float stable_softplus(float x) {
    if (x > 20.0f) return x;
    if (x < -20.0f) return std::exp(x);
    return std::log1p(std::exp(x));
}

}  // namespace

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
    os << ']';
    return os.str();
}

std::vector<float>& Node::ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0f);
    return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    const std::size_t n = msom::numel(shape);
    return from(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
    if (values.size() != msom::numel(shape))
        throw ShapeError("tensor: " + std::to_string(values.size()) + " values do not fill shape " +
                         to_string(shape));
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(float value) { return from({}, {value}); }

float Tensor::item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
    return node_->value[0];
}

float Tensor::at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw ShapeError("at: index rank mismatch for shape " + to_string(shape()));
    std::size_t flat = 0, i = 0;
    for (std::size_t v : index) {
        if (v >= node_->shape[i]) throw ShapeError("at: index out of range for shape " + to_string(shape()));
        flat = flat * node_->shape[i] + v;
        ++i;
    }
    return node_->value[flat];
}

Tensor& Tensor::set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
}

Tensor Tensor::clone() const { return from(shape(), node_->value, false); }

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ShapeError("backward: loss must be a scalar, got shape " +
                         (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
    if (nodes_.empty()) throw Error("backward: tape is empty");
    if (!loss.requires_grad()) throw Error("backward: loss does not depend on any tensor requiring grad");
    loss.node()->ensure_grad()[0] += 1.0f;
    const bool check = debug_checks();
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& node = **it;
        if (!node.grad.empty() && node.backward) {
            node.backward(node);
            if (check) {
                for (const auto& in : node.inputs) {
                    for (float g : in->grad)
                        if (!std::isfinite(g))
                            throw NumericError(std::string("backward: non-finite gradient from op ") + node.op);
                }
            }
        }
        node.backward = nullptr;
        node.inputs.clear();
    }
    nodes_.clear();
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

void backward(const Tensor& loss) {
    Tape* tape = active_tape();
    if (tape == nullptr) throw Error("backward: no active tape");
    tape->backward(loss);
}

void set_debug_checks(bool on) { g_debug_checks.store(on); }
bool debug_checks() { return g_debug_checks.load(); }

namespace detail {

bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (active_tape() == nullptr) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

bool should_record(std::span<const Tensor> inputs) {
    if (active_tape() == nullptr) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor& t) { return t.defined() && t.requires_grad(); });
}

Tensor make_result(Shape shape, std::vector<float> value, bool record, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward, const char* op) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    if (record) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (auto& t : inputs) {
            // Undefined optional inputs are replaced by an inert placeholder.
            node->inputs.push_back(t.defined() ? t.node() : std::make_shared<Node>());
        }
        node->backward = std::move(backward);
        active_tape()->record(node);
    }
    return Tensor(std::move(node));
}

}  // namespace detail

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::div, "div"); }

Tensor scale(const Tensor& a, float factor) {
    return unary(a, "scale", [factor](float x) { return x * factor; },
                 [factor](float, float) { return factor; });
}

Tensor add_scalar(const Tensor& a, float value) {
    return unary(a, "add_scalar", [value](float x) { return x + value; }, [](float, float) { return 1.0f; });
}

Tensor exp(const Tensor& a) {
    return unary(a, "exp", [](float x) { return std::exp(x); }, [](float, float y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary(a, "log", [](float x) { return std::log(x); }, [](float x, float) { return 1.0f / x; });
}

Tensor softplus(const Tensor& a) {
    return unary(a, "softplus", stable_softplus, [](float x, float) { return stable_sigmoid(x); });
}

Tensor silu(const Tensor& a) {
    return unary(a, "silu", [](float x) { return x * stable_sigmoid(x); },
                 [](float x, float) {
                     const float s = stable_sigmoid(x);
                     return s + x * s * (1.0f - s);
                 });
}

Tensor sigmoid(const Tensor& a) {
    return unary(a, "sigmoid", stable_sigmoid, [](float, float y) { return y * (1.0f - y); });
}

Tensor relu(const Tensor& a) {
    return unary(a, "relu", [](float x) { return x > 0.0f ? x : 0.0f; },
                 [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}

Tensor square(const Tensor& a) {
    return unary(a, "square", [](float x) { return x * x; }, [](float x, float) { return 2.0f * x; });
}

Tensor rsqrt(const Tensor& a) {
    return unary(a, "rsqrt", [](float x) { return 1.0f / std::sqrt(x); },
                 [](float, float y) { return -0.5f * y * y * y; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_defined(a, "matmul");
    require_defined(b, "matmul");
    if (a.rank() < 1 || b.rank() != 2 || a.shape().back() != b.dim(0))
        throw ShapeError(shapes_msg("matmul", a.shape(), b.shape()));
    const std::size_t K = b.dim(0), N = b.dim(1), M = a.numel() / K;
    Shape out_shape = a.shape();
    out_shape.back() = N;
    std::vector<float> out(M * N, 0.0f);
    auto x = a.data();
    auto w = b.data();
    for (std::size_t i = 0; i < M; ++i) {
        float* row = out.data() + i * N;
        for (std::size_t k = 0; k < K; ++k) {
            const float v = x[i * K + k];
            if (v == 0.0f) continue;
            const float* wr = w.data() + k * N;
            for (std::size_t j = 0; j < N; ++j) row[j] += v * wr[j];
        }
    }
    const bool rec = detail::should_record({&a, &b});
    return detail::make_result(std::move(out_shape), std::move(out), rec, {a, b},
                               [M, K, N](Node& self) {
                                   auto* ga = grad_of(self, 0);
                                   auto* gb = grad_of(self, 1);
                                   const auto& x = self.inputs[0]->value;
                                   const auto& w = self.inputs[1]->value;
                                   const float* g = self.grad.data();
                                   if (ga) {
                                       for (std::size_t i = 0; i < M; ++i)
                                           for (std::size_t k = 0; k < K; ++k) {
                                               const float* wr = w.data() + k * N;
                                               const float* gr = g + i * N;
                                               float acc = 0.0f;
                                               for (std::size_t j = 0; j < N; ++j) acc += gr[j] * wr[j];
                                               (*ga)[i * K + k] += acc;
                                           }
                                   }
                                   if (gb) {
                                       for (std::size_t i = 0; i < M; ++i)
                                           for (std::size_t k = 0; k < K; ++k) {
                                               const float v = x[i * K + k];
                                               if (v == 0.0f) continue;
                                               float* gbr = gb->data() + k * N;
                                               const float* gr = g + i * N;
                                               for (std::size_t j = 0; j < N; ++j) gbr[j] += v * gr[j];
                                           }
                                   }
                               },
                               "matmul");
}

Tensor sum(const Tensor& a, std::size_t axis) {
    require_defined(a, "sum");
    require(axis < a.rank(), "sum: axis " + std::to_string(axis) + " out of range for shape " + to_string(a.shape()));
    const AxisSplit s = split_axis(a.shape(), axis);
    Shape out_shape = a.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    std::vector<float> out(s.outer * s.inner);
    auto x = a.data();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
            double acc = 0.0;
            for (std::size_t k = 0; k < s.n; ++k) acc += x[(o * s.n + k) * s.inner + i];
            out[o * s.inner + i] = static_cast<float>(acc);
        }
    const bool rec = detail::should_record({&a});
    return detail::make_result(std::move(out_shape), std::move(out), rec, {a},
                               [s](Node& self) {
                                   auto* ga = grad_of(self, 0);
                                   if (!ga) return;
                                   for (std::size_t o = 0; o < s.outer; ++o)
                                       for (std::size_t k = 0; k < s.n; ++k)
                                           for (std::size_t i = 0; i < s.inner; ++i)
                                               (*ga)[(o * s.n + k) * s.inner + i] += self.grad[o * s.inner + i];
                               },
                               "sum");
}

Tensor mean(const Tensor& a, std::size_t axis) {
    require_defined(a, "mean");
    require(axis < a.rank(), "mean: axis out of range for shape " + to_string(a.shape()));
    return scale(sum(a, axis), 1.0f / static_cast<float>(a.dim(axis)));
}

Tensor sum_all(const Tensor& a) {
    require_defined(a, "sum_all");
    double acc = 0.0;
    for (float v : a.data()) acc += v;
    const bool rec = detail::should_record({&a});
    return detail::make_result({}, {static_cast<float>(acc)}, rec, {a},
                               [](Node& self) {
                                   auto* ga = grad_of(self, 0);
                                   if (!ga) return;
                                   for (float& g : *ga) g += self.grad[0];
                               },
                               "sum_all");
}

Tensor mean_all(const Tensor& a) {
    require_defined(a, "mean_all");
    return scale(sum_all(a), 1.0f / static_cast<float>(a.numel()));
}

Tensor reshape(const Tensor& a, Shape shape) {
    require_defined(a, "reshape");
    if (numel(shape) != a.numel()) throw ShapeError(shapes_msg("reshape", a.shape(), shape));
    std::vector<float> out(a.data().begin(), a.data().end());
    const bool rec = detail::should_record({&a});
    return detail::make_result(std::move(shape), std::move(out), rec, {a},
                               [](Node& self) {
                                   auto* ga = grad_of(self, 0);
                                   if (!ga) return;
                                   for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += self.grad[i];
                               },
                               "reshape");
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& order) {
    require_defined(a, "permute");
    const std::size_t r = a.rank();
    std::vector<bool> seen(r, false);
    require(order.size() == r, "permute: order rank mismatch for shape " + to_string(a.shape()));
    for (std::size_t o : order) {
        require(o < r && !seen[o], "permute: invalid axis order");
        seen[o] = true;
    }
    const Shape& in_shape = a.shape();
    std::vector<std::size_t> in_strides(r, 1);
    for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[order[i]];

    // source[i] = flat input index feeding flat output index i
    const std::size_t n = a.numel();
    auto source = std::make_shared<std::vector<std::size_t>>(n);
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t src = 0;
        for (std::size_t d = 0; d < r; ++d) src += idx[d] * in_strides[order[d]];
        (*source)[i] = src;
        for (std::size_t d = r; d-- > 0;) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
        }
    }
    std::vector<float> out(n);
    auto x = a.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = x[(*source)[i]];
    const bool rec = detail::should_record({&a});
    return detail::make_result(std::move(out_shape), std::move(out), rec, {a},
                               [source](Node& self) {
                                   auto* ga = grad_of(self, 0);
                                   if (!ga) return;
                                   for (std::size_t i = 0; i < source->size(); ++i)
                                       (*ga)[(*source)[i]] += self.grad[i];
                               },
                               "permute");
}

Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1) {
    require_defined(a, "transpose");
    require(axis0 < a.rank() && axis1 < a.rank(), "transpose: axis out of range for shape " + to_string(a.shape()));
    std::vector<std::size_t> order(a.rank());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::swap(order[axis0], order[axis1]);
    return permute(a, order);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    require(!parts.empty(), "concat: no inputs");
    for (const auto& p : parts) require_defined(p, "concat");
    const Shape& ref = parts.front().shape();
    require(axis < ref.size(), "concat: axis out of range for shape " + to_string(ref));
    Shape out_shape = ref;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == ref.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == ref[d];
        if (!ok) throw ShapeError(shapes_msg("concat", ref, s));
        out_shape[axis] += s[axis];
    }
    const AxisSplit total = split_axis(out_shape, axis);
    std::vector<float> out(numel(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        offsets.push_back(offset);
        const std::size_t n = p.dim(axis);
        auto x = p.data();
        for (std::size_t o = 0; o < total.outer; ++o)
            std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(o * n * total.inner), n * total.inner,
                        out.begin() + static_cast<std::ptrdiff_t>((o * total.n + offset) * total.inner));
        offset += n;
    }
    std::vector<std::size_t> lengths;
    for (const auto& p : parts) lengths.push_back(p.dim(axis));
    const bool rec = detail::should_record(std::span<const Tensor>(parts));
    return detail::make_result(std::move(out_shape), std::move(out), rec, parts,
                               [total, offsets, lengths](Node& self) {
                                   for (std::size_t p = 0; p < offsets.size(); ++p) {
                                       auto* gp = grad_of(self, p);
                                       if (!gp) continue;
                                       const std::size_t n = lengths[p];
                                       for (std::size_t o = 0; o < total.outer; ++o)
                                           for (std::size_t j = 0; j < n * total.inner; ++j)
                                               (*gp)[o * n * total.inner + j] +=
                                                   self.grad[(o * total.n + offsets[p]) * total.inner + j];
                                   }
                               },
                               "concat");
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
    require_defined(a, "slice");
    require(axis < a.rank() && start + length <= a.dim(axis),
            "slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                ") out of bounds for shape " + to_string(a.shape()));
    const AxisSplit s = split_axis(a.shape(), axis);
    Shape out_shape = a.shape();
    out_shape[axis] = length;
    std::vector<float> out(s.outer * length * s.inner);
    auto x = a.data();
    for (std::size_t o = 0; o < s.outer; ++o)
        std::copy_n(x.begin() + static_cast<std::ptrdiff_t>((o * s.n + start) * s.inner), length * s.inner,
                    out.begin() + static_cast<std::ptrdiff_t>(o * length * s.inner));
    const bool rec = detail::should_record({&a});
    return detail::make_result(std::move(out_shape), std::move(out), rec, {a},
                               [s, start, length](Node& self) {
                                   auto* ga = grad_of(self, 0);
                                   if (!ga) return;
                                   for (std::size_t o = 0; o < s.outer; ++o)
                                       for (std::size_t j = 0; j < length * s.inner; ++j)
                                           (*ga)[(o * s.n + start) * s.inner + j] += self.grad[o * length * s.inner + j];
                               },
                               "slice");
}

Tensor pad_zeros(const Tensor& a, std::size_t axis, std::size_t before, std::size_t after) {
    require_defined(a, "pad_zeros");
    require(axis < a.rank(), "pad_zeros: axis out of range for shape " + to_string(a.shape()));
    const AxisSplit s = split_axis(a.shape(), axis);
    const std::size_t n_out = s.n + before + after;
    Shape out_shape = a.shape();
    out_shape[axis] = n_out;
    std::vector<float> out(s.outer * n_out * s.inner, 0.0f);
    auto x = a.data();
    for (std::size_t o = 0; o < s.outer; ++o)
        std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(o * s.n * s.inner), s.n * s.inner,
                    out.begin() + static_cast<std::ptrdiff_t>((o * n_out + before) * s.inner));
    const bool rec = detail::should_record({&a});
    return detail::make_result(std::move(out_shape), std::move(out), rec, {a},
                               [s, n_out, before](Node& self) {
                                   auto* ga = grad_of(self, 0);
                                   if (!ga) return;
                                   for (std::size_t o = 0; o < s.outer; ++o)
                                       for (std::size_t j = 0; j < s.n * s.inner; ++j)
                                           (*ga)[o * s.n * s.inner + j] += self.grad[(o * n_out + before) * s.inner + j];
                               },
                               "pad_zeros");
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require_defined(x, "conv2d");
    require_defined(weight, "conv2d");
    if (x.rank() != 4 || weight.rank() != 4 || weight.dim(1) != x.dim(1) || weight.dim(2) != weight.dim(3) ||
        weight.dim(2) % 2 == 0)
        throw ShapeError(shapes_msg("conv2d", x.shape(), weight.shape()));
    const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Co = weight.dim(0), k = weight.dim(2);
    const long pad = static_cast<long>(k / 2);
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Co))
        throw ShapeError(shapes_msg("conv2d(bias)", weight.shape(), bias.shape()));

    // Visits every (output row/column span, input span, weight) triple of the
    // same-padded convolution; inner spans are contiguous along W.
    auto for_each_tap = [=](auto&& fn) {
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t co = 0; co < Co; ++co)
                for (std::size_t ci = 0; ci < Ci; ++ci)
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const long dy = static_cast<long>(ky) - pad;
                            const long dx = static_cast<long>(kx) - pad;
                            const std::size_t x0 = static_cast<std::size_t>(std::max<long>(0, -dx));
                            const std::size_t x1 = static_cast<std::size_t>(
                                std::min<long>(static_cast<long>(W), static_cast<long>(W) - dx));
                            if (x0 >= x1) continue;
                            const std::size_t widx = ((co * Ci + ci) * k + ky) * k + kx;
                            for (std::size_t y = 0; y < H; ++y) {
                                const long sy = static_cast<long>(y) + dy;
                                if (sy < 0 || sy >= static_cast<long>(H)) continue;
                                const std::size_t out_row = ((b * Co + co) * H + y) * W;
                                const std::size_t in_row = ((b * Ci + ci) * H + static_cast<std::size_t>(sy)) * W;
                                fn(out_row + x0, in_row + static_cast<std::size_t>(static_cast<long>(x0) + dx),
                                   x1 - x0, widx);
                            }
                        }
    };

    std::vector<float> out(B * Co * H * W, 0.0f);
    if (bias.defined()) {
        auto bv = bias.data();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t co = 0; co < Co; ++co)
                std::fill_n(out.begin() + static_cast<std::ptrdiff_t>((b * Co + co) * H * W), H * W, bv[co]);
    }
    {
        const float* in = x.data().data();
        const float* w = weight.data().data();
        float* o = out.data();
        for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t len, std::size_t wi) {
            const float wv = w[wi];
            for (std::size_t j = 0; j < len; ++j) o[oi + j] += wv * in[ii + j];
        });
    }
    const bool rec = detail::should_record({&x, &weight, &bias});
    return detail::make_result({B, Co, H, W}, std::move(out), rec, {x, weight, bias},
                               [for_each_tap, B, Co, H, W](Node& self) {
                                   auto* gx = grad_of(self, 0);
                                   auto* gw = grad_of(self, 1);
                                   auto* gbias = grad_of(self, 2);
                                   const float* in = self.inputs[0]->value.data();
                                   const float* w = self.inputs[1]->value.data();
                                   const float* g = self.grad.data();
                                   for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t len, std::size_t wi) {
                                       if (gx) {
                                           float* gxp = gx->data();
                                           const float wv = w[wi];
                                           for (std::size_t j = 0; j < len; ++j) gxp[ii + j] += wv * g[oi + j];
                                       }
                                       if (gw) {
                                           float acc = 0.0f;
                                           for (std::size_t j = 0; j < len; ++j) acc += g[oi + j] * in[ii + j];
                                           (*gw)[wi] += acc;
                                       }
                                   });
                                   if (gbias) {
                                       for (std::size_t b = 0; b < B; ++b)
                                           for (std::size_t co = 0; co < Co; ++co) {
                                               double acc = 0.0;
                                               const float* gp = g + (b * Co + co) * H * W;
                                               for (std::size_t j = 0; j < H * W; ++j) acc += gp[j];
                                               (*gbias)[co] += static_cast<float>(acc);
                                           }
                                   }
                               },
                               "conv2d");
}

Tensor depthwise_conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require_defined(x, "depthwise_conv1d");
    require_defined(weight, "depthwise_conv1d");
    if (x.rank() != 3 || weight.rank() != 2 || weight.dim(0) != x.dim(2))
        throw ShapeError(shapes_msg("depthwise_conv1d", x.shape(), weight.shape()));
    const std::size_t B = x.dim(0), L = x.dim(1), C = x.dim(2), k = weight.dim(1);
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != C))
        throw ShapeError(shapes_msg("depthwise_conv1d(bias)", weight.shape(), bias.shape()));
    std::vector<float> out(B * L * C, 0.0f);
    auto in = x.data();
    auto w = weight.data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < L; ++t)
            for (std::size_t c = 0; c < C; ++c) {
                float acc = bias.defined() ? bias.data()[c] : 0.0f;
                for (std::size_t j = 0; j < k; ++j) {
                    const long s = static_cast<long>(t) - static_cast<long>(k - 1) + static_cast<long>(j);
                    if (s < 0) continue;
                    acc += w[c * k + j] * in[(b * L + static_cast<std::size_t>(s)) * C + c];
                }
                out[(b * L + t) * C + c] = acc;
            }
    const bool rec = detail::should_record({&x, &weight, &bias});
    return detail::make_result({B, L, C}, std::move(out), rec, {x, weight, bias},
                               [B, L, C, k](Node& self) {
                                   auto* gx = grad_of(self, 0);
                                   auto* gw = grad_of(self, 1);
                                   auto* gbias = grad_of(self, 2);
                                   const auto& in = self.inputs[0]->value;
                                   const auto& w = self.inputs[1]->value;
                                   for (std::size_t b = 0; b < B; ++b)
                                       for (std::size_t t = 0; t < L; ++t)
                                           for (std::size_t c = 0; c < C; ++c) {
                                               const float g = self.grad[(b * L + t) * C + c];
                                               if (gbias) (*gbias)[c] += g;
                                               for (std::size_t j = 0; j < k; ++j) {
                                                   const long s = static_cast<long>(t) - static_cast<long>(k - 1) +
                                                                  static_cast<long>(j);
                                                   if (s < 0) continue;
                                                   const std::size_t xi = (b * L + static_cast<std::size_t>(s)) * C + c;
                                                   if (gx) (*gx)[xi] += g * w[c * k + j];
                                                   if (gw) (*gw)[c * k + j] += g * in[xi];
                                               }
                                           }
                               },
                               "depthwise_conv1d");
}

namespace {

Tensor softmax_impl(const Tensor& a, std::size_t axis, bool log_space) {
    const char* op = log_space ? "log_softmax" : "softmax";
    require_defined(a, op);
    require(axis < a.rank(), std::string(op) + ": axis out of range for shape " + to_string(a.shape()));
    const AxisSplit s = split_axis(a.shape(), axis);
    std::vector<float> out(a.numel());
    auto x = a.data();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
            auto at = [&](std::size_t k) { return (o * s.n + k) * s.inner + i; };
            float mx = -std::numeric_limits<float>::infinity();
            for (std::size_t k = 0; k < s.n; ++k) mx = std::max(mx, x[at(k)]);
            double z = 0.0;
            for (std::size_t k = 0; k < s.n; ++k) z += std::exp(static_cast<double>(x[at(k)] - mx));
            const float logz = static_cast<float>(std::log(z));
            for (std::size_t k = 0; k < s.n; ++k) {
                const float shifted = x[at(k)] - mx;
                out[at(k)] = log_space ? shifted - logz : static_cast<float>(std::exp(shifted) / z);
            }
        }
    const bool rec = detail::should_record({&a});
    return detail::make_result(a.shape(), std::move(out), rec, {a},
                               [s, log_space](Node& self) {
                                   auto* ga = grad_of(self, 0);
                                   if (!ga) return;
                                   for (std::size_t o = 0; o < s.outer; ++o)
                                       for (std::size_t i = 0; i < s.inner; ++i) {
                                           auto at = [&](std::size_t k) { return (o * s.n + k) * s.inner + i; };
                                           double dot = 0.0;
                                           for (std::size_t k = 0; k < s.n; ++k)
                                               dot += log_space ? self.grad[at(k)]
                                                                : self.grad[at(k)] * self.value[at(k)];
                                           for (std::size_t k = 0; k < s.n; ++k) {
                                               const float y = self.value[at(k)];
                                               (*ga)[at(k)] += log_space
                                                                   ? self.grad[at(k)] - std::exp(y) * static_cast<float>(dot)
                                                                   : y * (self.grad[at(k)] - static_cast<float>(dot));
                                           }
                                       }
                               },
                               op);
}

}  // namespace

Tensor softmax(const Tensor& a, std::size_t axis) { return softmax_impl(a, axis, false); }
Tensor log_softmax(const Tensor& a, std::size_t axis) { return softmax_impl(a, axis, true); }

Tensor gather_rows(const Tensor& x, std::span<const std::int64_t> index) {
    require_defined(x, "gather_rows");
    require(x.rank() == 2, "gather_rows: expected [N, D], got " + to_string(x.shape()));
    const std::size_t N = x.dim(0), D = x.dim(1), M = index.size();
    std::vector<float> out(M * D);
    auto v = x.data();
    for (std::size_t m = 0; m < M; ++m) {
        if (index[m] < 0 || static_cast<std::size_t>(index[m]) >= N)
            throw DataError("gather_rows: index " + std::to_string(index[m]) + " out of range for " +
                            std::to_string(N) + " rows");
        std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(index[m]) * D), D,
                    out.begin() + static_cast<std::ptrdiff_t>(m * D));
    }
    auto idx = std::make_shared<std::vector<std::int64_t>>(index.begin(), index.end());
    const bool rec = detail::should_record({&x});
    return detail::make_result({M, D}, std::move(out), rec, {x},
                               [idx, D](Node& self) {
                                   auto* gx = grad_of(self, 0);
                                   if (!gx) return;
                                   for (std::size_t m = 0; m < idx->size(); ++m) {
                                       float* dst = gx->data() + static_cast<std::size_t>((*idx)[m]) * D;
                                       const float* src = self.grad.data() + m * D;
                                       for (std::size_t d = 0; d < D; ++d) dst[d] += src[d];
                                   }
                               },
                               "gather_rows");
}

Tensor segment_mean(const Tensor& x, std::span<const std::int64_t> segment, std::size_t n_segments) {
    require_defined(x, "segment_mean");
    require(x.rank() == 2 && x.dim(0) == segment.size(),
            "segment_mean: expected [N, D] with N = " + std::to_string(segment.size()) + ", got " +
                to_string(x.shape()));
    const std::size_t N = x.dim(0), D = x.dim(1);
    auto seg = std::make_shared<std::vector<std::int64_t>>(segment.begin(), segment.end());
    auto inv_count = std::make_shared<std::vector<float>>(n_segments, 0.0f);
    std::vector<double> acc(n_segments * D, 0.0);
    auto v = x.data();
    for (std::size_t n = 0; n < N; ++n) {
        const auto s = (*seg)[n];
        if (s < 0 || static_cast<std::size_t>(s) >= n_segments)
            throw DataError("segment_mean: segment id " + std::to_string(s) + " out of range for " +
                            std::to_string(n_segments) + " segments");
        (*inv_count)[static_cast<std::size_t>(s)] += 1.0f;
        for (std::size_t d = 0; d < D; ++d) acc[static_cast<std::size_t>(s) * D + d] += v[n * D + d];
    }
    for (float& c : *inv_count) c = c > 0.0f ? 1.0f / c : 0.0f;
    std::vector<float> out(n_segments * D);
    for (std::size_t s = 0; s < n_segments; ++s)
        for (std::size_t d = 0; d < D; ++d)
            out[s * D + d] = static_cast<float>(acc[s * D + d] * (*inv_count)[s]);
    const bool rec = detail::should_record({&x});
    return detail::make_result({n_segments, D}, std::move(out), rec, {x},
                               [seg, inv_count, D](Node& self) {
                                   auto* gx = grad_of(self, 0);
                                   if (!gx) return;
                                   for (std::size_t n = 0; n < seg->size(); ++n) {
                                       const auto s = static_cast<std::size_t>((*seg)[n]);
                                       const float w = (*inv_count)[s];
                                       for (std::size_t d = 0; d < D; ++d)
                                           (*gx)[n * D + d] += self.grad[s * D + d] * w;
                                   }
                               },
                               "segment_mean");
}

}  // namespace msom
