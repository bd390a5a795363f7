#include "decomp/graph.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>

#include "decomp/kernels.hpp"

namespace decomp {

namespace {

constexpr std::array<std::string_view, 22> kOpNames{
    "input",  "parameter", "add",   "sub",           "mul",    "matmul",    "conv2d",      "softmax",
    "silu",   "group_norm", "reshape", "mean",        "sum",    "broadcast_add", "square", "scale",
    "avg_pool2", "upsample2", "column", "gather_rows", "concat_rows", "minmax_normalize"};

// Ranges narrower than this are treated as constant maps.
constexpr double kMinMaxFloor = 1e-12;

[[noreturn]] void mismatch(Op op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op_name(op)) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

[[noreturn]] void bad_shape(Op op, const std::string& what, const Shape& s) {
    throw ShapeError(std::string(op_name(op)) + ": " + what + ", got " + shape_str(s));
}

void transpose(const double* src, std::size_t rows, std::size_t cols, double* dst) {
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

std::vector<double> transposed(const Tensor& t) {
    std::vector<double> out(t.numel());
    transpose(t.ptr(), t.dim(0), t.dim(1), out.data());
    return out;
}

// Per-thread reusable buffers; contents are unspecified on return.
double* scratch(std::size_t slot, std::size_t n) {
    thread_local std::vector<double> buffers[3];
    auto& b = buffers[slot];
    if (b.size() < n) b.resize(n);
    return b.data();
}

struct SoftmaxLayout {
    std::size_t outer, extent, inner;
};

SoftmaxLayout softmax_layout(const Shape& s, int axis) {
    const int rank = static_cast<int>(s.size());
    const int ax = axis < 0 ? axis + rank : axis;
    if (ax < 0 || ax >= rank) {
        bad_shape(Op::softmax, "axis " + std::to_string(axis) + " out of range", s);
    }
    SoftmaxLayout l{1, s[static_cast<std::size_t>(ax)], 1};
    for (int i = 0; i < ax; ++i) l.outer *= s[static_cast<std::size_t>(i)];
    for (int i = ax + 1; i < rank; ++i) l.inner *= s[static_cast<std::size_t>(i)];
    return l;
}

// Calls run(i, p, len, step) for each innermost run of `full`: elements
// i..i+len-1 of `full` read the right-aligned broadcast operand at p, p+step, ...
template <class F>
void for_each_broadcast(const Shape& full, const Shape& part, F&& run) {
    const std::size_t rank = full.size();
    const std::size_t offset = rank - part.size();
    std::vector<std::size_t> part_stride(rank, 0);
    std::size_t stride = 1;
    for (std::size_t i = part.size(); i-- > 0;) {
        part_stride[offset + i] = part[i] == 1 ? 0 : stride;
        stride *= part[i];
    }
    const std::size_t len = full[rank - 1], step = part_stride[rank - 1];
    const std::size_t total = shape_numel(full);
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t flat = 0; flat < total; flat += len) {
        std::size_t p = 0;
        for (std::size_t d = 0; d + 1 < rank; ++d) p += idx[d] * part_stride[d];
        run(flat, p, len, step);
        for (std::size_t d = rank - 1; d-- > 0;) {
            if (++idx[d] < full[d]) break;
            idx[d] = 0;
        }
    }
}

struct ConvDims {
    std::size_t batch, cin, h, w, cout;
};

ConvDims conv_dims(const Shape& x, const Shape& w) {
    ConvDims d{};
    if (x.size() == 3) {
        d = {1, x[0], x[1], x[2], 0};
    } else if (x.size() == 4) {
        d = {x[0], x[1], x[2], x[3], 0};
    } else {
        bad_shape(Op::conv2d, "input must be [C,H,W] or [N,C,H,W]", x);
    }
    if (w.size() != 4 || w[2] != 3 || w[3] != 3 || w[1] != d.cin) {
        mismatch(Op::conv2d, x, w);
    }
    d.cout = w[0];
    return d;
}

// col[(c*9 + ky*3 + kx), y*W + x] = img[c, y+ky-1, x+kx-1] with zero padding.
void im2col(const double* img, std::size_t c, std::size_t h, std::size_t w, double* col) {
    const std::size_t hw = h * w;
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double* plane = img + ch * hw;
        for (std::size_t ky = 0; ky < 3; ++ky) {
            for (std::size_t kx = 0; kx < 3; ++kx) {
                double* row = col + (ch * 9 + ky * 3 + kx) * hw;
                for (std::size_t y = 0; y < h; ++y) {
                    double* dst = row + y * w;
                    const long sy = static_cast<long>(y) + static_cast<long>(ky) - 1;
                    if (sy < 0 || sy >= static_cast<long>(h)) {
                        std::fill(dst, dst + w, 0.0);
                        continue;
                    }
                    const double* src = plane + static_cast<std::size_t>(sy) * w;
                    // x + kx - 1 must stay inside [0, w)
                    if (kx == 0) {
                        dst[0] = 0.0;
                        std::copy(src, src + w - 1, dst + 1);
                    } else if (kx == 1) {
                        std::copy(src, src + w, dst);
                    } else {
                        std::copy(src + 1, src + w, dst);
                        dst[w - 1] = 0.0;
                    }
                }
            }
        }
    }
}

void col2im(const double* col, std::size_t c, std::size_t h, std::size_t w, double* img) {
    const std::size_t hw = h * w;
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t ky = 0; ky < 3; ++ky) {
            for (std::size_t kx = 0; kx < 3; ++kx) {
                const double* row = col + (ch * 9 + ky * 3 + kx) * hw;
                for (std::size_t y = 0; y < h; ++y) {
                    const long sy = static_cast<long>(y) + static_cast<long>(ky) - 1;
                    if (sy < 0 || sy >= static_cast<long>(h)) continue;
                    for (std::size_t x = 0; x < w; ++x) {
                        const long sx = static_cast<long>(x) + static_cast<long>(kx) - 1;
                        if (sx < 0 || sx >= static_cast<long>(w)) continue;
                        img[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)] += row[y * w + x];
                    }
                }
            }
        }
    }
}

struct GroupStats {
    std::size_t channels, spatial, per_group;
    std::vector<double> mean, inv_std;
};

GroupStats group_stats(const Tensor& x, std::size_t groups, double eps) {
    GroupStats s{x.dim(0), x.numel() / x.dim(0), x.dim(0) / groups, {}, {}};
    s.mean.resize(groups);
    s.inv_std.resize(groups);
    const std::size_t n = s.per_group * s.spatial;
    for (std::size_t g = 0; g < groups; ++g) {
        const double* p = x.ptr() + g * n;
        double m = 0.0;
        for (std::size_t i = 0; i < n; ++i) m += p[i];
        m /= static_cast<double>(n);
        double v = 0.0;
        for (std::size_t i = 0; i < n; ++i) v += (p[i] - m) * (p[i] - m);
        v /= static_cast<double>(n);
        s.mean[g] = m;
        s.inv_std[g] = 1.0 / std::sqrt(v + eps);
    }
    return s;
}

std::pair<std::size_t, std::size_t> argmin_argmax(const Tensor& x) {
    const auto [lo, hi] = std::minmax_element(x.data().begin(), x.data().end());
    return {static_cast<std::size_t>(lo - x.data().begin()), static_cast<std::size_t>(hi - x.data().begin())};
}

void accumulate(std::optional<Tensor>& slot, const Tensor& g) {
    if (!slot) {
        slot = g;
        return;
    }
    kernels::active().axpy(g.numel(), 1.0, g.ptr(), slot->ptr());
}

void accumulate(std::optional<Tensor>& slot, Tensor&& g) {
    if (!slot) {
        slot = std::move(g);
        return;
    }
    kernels::active().axpy(g.numel(), 1.0, g.ptr(), slot->ptr());
}

void validate(Op op, const std::vector<const Tensor*>& in, const OpAttrs& attrs) {
    auto need = [&](std::size_t n) {
        if (in.size() != n) {
            throw std::invalid_argument(std::string(op_name(op)) + ": expected " + std::to_string(n) +
                                        " inputs, got " + std::to_string(in.size()));
        }
    };
    switch (op) {
        case Op::input:
        case Op::parameter:
            throw std::invalid_argument("leaf nodes are created with Graph::input / Graph::parameter");
        case Op::add:
        case Op::sub:
        case Op::mul:
            need(2);
            if (in[0]->shape() != in[1]->shape()) mismatch(op, in[0]->shape(), in[1]->shape());
            break;
        case Op::matmul: {
            need(2);
            const Shape& a = in[0]->shape();
            const Shape& b = in[1]->shape();
            if (a.size() != 2 || b.size() != 2) mismatch(op, a, b);
            const std::size_t ka = attrs.trans_a ? a[0] : a[1];
            const std::size_t kb = attrs.trans_b ? b[1] : b[0];
            if (ka != kb) mismatch(op, a, b);
            break;
        }
        case Op::conv2d:
            need(2);
            conv_dims(in[0]->shape(), in[1]->shape());
            break;
        case Op::softmax:
            need(1);
            softmax_layout(in[0]->shape(), attrs.axis);
            break;
        case Op::silu:
        case Op::mean:
        case Op::sum:
        case Op::square:
        case Op::scale:
        case Op::minmax_normalize:
            need(1);
            break;
        case Op::group_norm: {
            need(3);
            const Shape& x = in[0]->shape();
            if (x.size() < 2 || attrs.groups == 0 || x[0] % attrs.groups != 0) {
                bad_shape(op, "channel count must be divisible by " + std::to_string(attrs.groups), x);
            }
            const Shape affine{x[0]};
            if (in[1]->shape() != affine) mismatch(op, x, in[1]->shape());
            if (in[2]->shape() != affine) mismatch(op, x, in[2]->shape());
            break;
        }
        case Op::reshape:
            need(1);
            if (shape_numel(attrs.shape) != in[0]->numel() || attrs.shape.empty()) {
                mismatch(op, in[0]->shape(), attrs.shape);
            }
            break;
        case Op::broadcast_add: {
            need(2);
            const Shape& a = in[0]->shape();
            const Shape& b = in[1]->shape();
            if (b.size() > a.size()) mismatch(op, a, b);
            const std::size_t off = a.size() - b.size();
            for (std::size_t i = 0; i < b.size(); ++i) {
                if (b[i] != 1 && b[i] != a[off + i]) mismatch(op, a, b);
            }
            break;
        }
        case Op::avg_pool2: {
            need(1);
            const Shape& x = in[0]->shape();
            if (x.size() != 3 || x[1] % 2 != 0 || x[2] % 2 != 0) bad_shape(op, "expected [C,H,W] with even H,W", x);
            break;
        }
        case Op::upsample2:
            need(1);
            if (in[0]->rank() != 3) bad_shape(op, "expected [C,H,W]", in[0]->shape());
            break;
        case Op::column:
            need(1);
            if (in[0]->rank() != 2 || attrs.index >= in[0]->dim(1)) {
                bad_shape(op, "column " + std::to_string(attrs.index) + " out of range", in[0]->shape());
            }
            break;
        case Op::gather_rows:
            need(1);
            if (in[0]->rank() != 2) bad_shape(op, "expected a 2-D table", in[0]->shape());
            for (std::size_t r : attrs.indices) {
                if (r >= in[0]->dim(0)) bad_shape(op, "row " + std::to_string(r) + " out of range", in[0]->shape());
            }
            if (attrs.indices.empty()) throw std::invalid_argument("gather_rows: no rows requested");
            break;
        case Op::concat_rows: {
            if (in.empty()) throw std::invalid_argument("concat_rows: no inputs");
            const std::size_t cols = in[0]->shape().back();
            for (const Tensor* t : in) {
                if (t->rank() > 2 || t->shape().back() != cols) mismatch(op, in[0]->shape(), t->shape());
            }
            break;
        }
    }
}

}  // namespace

std::string_view op_name(Op op) noexcept { return kOpNames[static_cast<std::size_t>(op)]; }

Op op_from_name(std::string_view name) {
    for (std::size_t i = 0; i < kOpNames.size(); ++i) {
        if (kOpNames[i] == name) {
            return static_cast<Op>(i);
        }
    }
    throw UnknownOpError("unknown op tag '" + std::string(name) + "'");
}

NodeId Graph::input(Tensor value) {
    nodes_.push_back(Node{Op::input, {}, {}, std::move(value), false});
    return nodes_.size() - 1;
}

NodeId Graph::parameter(Tensor value) {
    nodes_.push_back(Node{Op::parameter, {}, {}, std::move(value), true});
    params_.push_back(nodes_.size() - 1);
    return nodes_.size() - 1;
}

NodeId Graph::apply(Op op, std::vector<NodeId> inputs, const OpAttrs& attrs) {
    std::vector<const Tensor*> in;
    in.reserve(inputs.size());
    bool grad = false;
    for (NodeId id : inputs) {
        if (id >= nodes_.size()) {
            throw std::out_of_range(std::string(op_name(op)) + ": unknown input node " + std::to_string(id));
        }
        in.push_back(&nodes_[id].value);
        grad = grad || nodes_[id].requires_grad;
    }
    validate(op, in, attrs);
    Node node{op, std::move(inputs), attrs, Tensor{}, grad};
    node.value = evaluate(node);
    nodes_.push_back(std::move(node));
    return nodes_.size() - 1;
}

void Graph::set_leaf(NodeId id, Tensor value) {
    Node& n = nodes_.at(id);
    if (n.op != Op::input && n.op != Op::parameter) {
        throw std::invalid_argument("set_leaf: node " + std::to_string(id) + " is not a leaf");
    }
    if (value.shape() != n.value.shape()) mismatch(n.op, n.value.shape(), value.shape());
    n.value = std::move(value);
}

void Graph::replay() {
    for (Node& n : nodes_) {
        if (n.op != Op::input && n.op != Op::parameter) {
            n.value = evaluate(n);
        }
    }
}

Tensor Graph::evaluate(const Node& node) const {
    const auto& k = kernels::active();
    auto in = [&](std::size_t i) -> const Tensor& { return nodes_[node.inputs[i]].value; };
    const OpAttrs& at = node.attrs;
    Tensor out;
    switch (node.op) {
        case Op::input:
        case Op::parameter:
            return node.value;
        case Op::add:
            out = Tensor(in(0).shape());
            k.add(out.numel(), in(0).ptr(), in(1).ptr(), out.ptr());
            break;
        case Op::sub:
            out = in(0);
            k.axpy(out.numel(), -1.0, in(1).ptr(), out.ptr());
            break;
        case Op::mul:
            out = Tensor(in(0).shape());
            k.mul(out.numel(), in(0).ptr(), in(1).ptr(), out.ptr());
            break;
        case Op::matmul: {
            const Tensor& a = in(0);
            const Tensor& b = in(1);
            const std::size_t m = at.trans_a ? a.dim(1) : a.dim(0);
            const std::size_t kk = at.trans_a ? a.dim(0) : a.dim(1);
            const std::size_t n = at.trans_b ? b.dim(0) : b.dim(1);
            std::vector<double> ta, tb;
            const double* ap = a.ptr();
            const double* bp = b.ptr();
            if (at.trans_a) {
                ta = transposed(a);
                ap = ta.data();
            }
            if (at.trans_b) {
                tb = transposed(b);
                bp = tb.data();
            }
            out = Tensor(Shape{m, n});
            k.gemm(m, n, kk, ap, bp, out.ptr(), false);
            break;
        }
        case Op::conv2d: {
            const Tensor& x = in(0);
            const Tensor& w = in(1);
            const ConvDims d = conv_dims(x.shape(), w.shape());
            Shape os = x.shape();
            os[os.size() - 3] = d.cout;
            out = Tensor(os);
            const std::size_t hw = d.h * d.w;
            double* col = scratch(0, d.cin * 9 * hw);
            for (std::size_t b = 0; b < d.batch; ++b) {
                im2col(x.ptr() + b * d.cin * hw, d.cin, d.h, d.w, col);
                k.gemm(d.cout, hw, d.cin * 9, w.ptr(), col, out.ptr() + b * d.cout * hw, false);
            }
            break;
        }
        case Op::softmax: {
            const SoftmaxLayout l = softmax_layout(in(0).shape(), at.axis);
            out = Tensor(in(0).shape());
            const double* x = in(0).ptr();
            double* y = out.ptr();
            for (std::size_t o = 0; o < l.outer; ++o) {
                for (std::size_t i = 0; i < l.inner; ++i) {
                    const std::size_t base = o * l.extent * l.inner + i;
                    double mx = x[base];
                    for (std::size_t e = 1; e < l.extent; ++e) mx = std::max(mx, x[base + e * l.inner]);
                    double s = 0.0;
                    for (std::size_t e = 0; e < l.extent; ++e) {
                        const double v = std::exp(x[base + e * l.inner] - mx);
                        y[base + e * l.inner] = v;
                        s += v;
                    }
                    for (std::size_t e = 0; e < l.extent; ++e) y[base + e * l.inner] /= s;
                }
            }
            break;
        }
        case Op::silu: {
            out = Tensor(in(0).shape());
            const double* x = in(0).ptr();
            for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] / (1.0 + std::exp(-x[i]));
            break;
        }
        case Op::group_norm: {
            const Tensor& x = in(0);
            const GroupStats s = group_stats(x, at.groups, at.eps);
            out = Tensor(x.shape());
            for (std::size_t c = 0; c < s.channels; ++c) {
                const std::size_t g = c / s.per_group;
                const double gm = in(1)[c] * s.inv_std[g];
                const double bt = in(2)[c];
                const double* xp = x.ptr() + c * s.spatial;
                double* yp = out.ptr() + c * s.spatial;
                for (std::size_t i = 0; i < s.spatial; ++i) yp[i] = (xp[i] - s.mean[g]) * gm + bt;
            }
            break;
        }
        case Op::reshape:
            out = in(0).reshaped(at.shape);
            break;
        case Op::mean:
        case Op::sum: {
            double s = 0.0;
            for (double v : in(0).data()) s += v;
            if (node.op == Op::mean) s /= static_cast<double>(in(0).numel());
            out = Tensor::scalar(s);
            break;
        }
        case Op::broadcast_add: {
            out = in(0);
            const double* b = in(1).ptr();
            double* o = out.ptr();
            for_each_broadcast(in(0).shape(), in(1).shape(), [&](std::size_t i, std::size_t p, std::size_t len, std::size_t step) {
                for (std::size_t j = 0; j < len; ++j) o[i + j] += b[p + j * step];
            });
            break;
        }
        case Op::square:
            out = Tensor(in(0).shape());
            k.mul(out.numel(), in(0).ptr(), in(0).ptr(), out.ptr());
            break;
        case Op::scale:
            out = in(0);
            for (double& v : out.data()) v *= at.factor;
            break;
        case Op::avg_pool2: {
            const Tensor& x = in(0);
            const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
            out = Tensor(Shape{c, h / 2, w / 2});
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t y = 0; y < h / 2; ++y) {
                    for (std::size_t xx = 0; xx < w / 2; ++xx) {
                        const double* p = x.ptr() + (ch * h + 2 * y) * w + 2 * xx;
                        out[(ch * (h / 2) + y) * (w / 2) + xx] = 0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
                    }
                }
            }
            break;
        }
        case Op::upsample2: {
            const Tensor& x = in(0);
            const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
            out = Tensor(Shape{c, 2 * h, 2 * w});
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t y = 0; y < 2 * h; ++y) {
                    for (std::size_t xx = 0; xx < 2 * w; ++xx) {
                        out[(ch * 2 * h + y) * 2 * w + xx] = x[(ch * h + y / 2) * w + xx / 2];
                    }
                }
            }
            break;
        }
        case Op::column: {
            const Tensor& x = in(0);
            out = Tensor(Shape{x.dim(0)});
            for (std::size_t r = 0; r < x.dim(0); ++r) out[r] = x[r * x.dim(1) + at.index];
            break;
        }
        case Op::gather_rows: {
            const Tensor& t = in(0);
            const std::size_t d = t.dim(1);
            out = Tensor(Shape{at.indices.size(), d});
            for (std::size_t i = 0; i < at.indices.size(); ++i) {
                std::copy_n(t.ptr() + at.indices[i] * d, d, out.ptr() + i * d);
            }
            break;
        }
        case Op::concat_rows: {
            const std::size_t cols = in(0).shape().back();
            std::vector<double> data;
            for (std::size_t i = 0; i < node.inputs.size(); ++i) {
                data.insert(data.end(), in(i).data().begin(), in(i).data().end());
            }
            const std::size_t rows = data.size() / cols;
            out = Tensor(Shape{rows, cols}, std::move(data));
            break;
        }
        case Op::minmax_normalize: {
            const Tensor& x = in(0);
            const auto [lo, hi] = argmin_argmax(x);
            const double range = x[hi] - x[lo];
            out = Tensor(x.shape());
            if (range > kMinMaxFloor) {
                for (std::size_t i = 0; i < x.numel(); ++i) out[i] = (x[i] - x[lo]) / range;
            }
            break;
        }
    }
    if (!out.all_finite()) {
        throw std::runtime_error(std::string(op_name(node.op)) + ": produced non-finite values");
    }
    return out;
}

std::map<NodeId, Tensor> Graph::backward(NodeId loss) const {
    if (loss >= nodes_.size()) {
        throw std::out_of_range("backward: unknown loss node");
    }
    if (nodes_[loss].value.numel() != 1) {
        throw ShapeError("backward: loss must be scalar, got " + shape_str(nodes_[loss].value.shape()));
    }
    const auto& k = kernels::active();
    std::vector<std::optional<Tensor>> grads(loss + 1);
    grads[loss] = Tensor(nodes_[loss].value.shape(), 1.0);

    for (std::size_t id = loss + 1; id-- > 0;) {
        const Node& node = nodes_[id];
        if (!grads[id] || !node.requires_grad || node.op == Op::parameter || node.op == Op::input) {
            continue;
        }
        const Tensor& gy = *grads[id];
        auto in = [&](std::size_t i) -> const Tensor& { return nodes_[node.inputs[i]].value; };
        auto wants = [&](std::size_t i) { return nodes_[node.inputs[i]].requires_grad; };
        auto slot = [&](std::size_t i) -> std::optional<Tensor>& { return grads[node.inputs[i]]; };
        const OpAttrs& at = node.attrs;

        switch (node.op) {
            case Op::input:
            case Op::parameter:
                break;
            case Op::add:
                if (wants(0)) accumulate(slot(0), gy);
                if (wants(1)) accumulate(slot(1), gy);
                break;
            case Op::sub:
                if (wants(0)) accumulate(slot(0), gy);
                if (wants(1)) {
                    Tensor g(gy.shape());
                    k.axpy(g.numel(), -1.0, gy.ptr(), g.ptr());
                    accumulate(slot(1), std::move(g));
                }
                break;
            case Op::mul:
                for (std::size_t i = 0; i < 2; ++i) {
                    if (!wants(i)) continue;
                    Tensor g(gy.shape());
                    k.mul(g.numel(), gy.ptr(), in(1 - i).ptr(), g.ptr());
                    accumulate(slot(i), std::move(g));
                }
                break;
            case Op::matmul: {
                const Tensor& a = in(0);
                const Tensor& b = in(1);
                const std::size_t m = at.trans_a ? a.dim(1) : a.dim(0);
                const std::size_t kk = at.trans_a ? a.dim(0) : a.dim(1);
                const std::size_t n = at.trans_b ? b.dim(0) : b.dim(1);
                if (wants(0)) {
                    // d(op(A)) = dC * op(B)^T, op(B)^T is the stored B when trans_b.
                    std::vector<double> bt;
                    const double* bp = b.ptr();
                    if (!at.trans_b) {
                        bt = transposed(b);
                        bp = bt.data();
                    }
                    std::vector<double> da(m * kk);
                    k.gemm(m, kk, n, gy.ptr(), bp, da.data(), false);
                    Tensor g(a.shape());
                    if (at.trans_a) {
                        transpose(da.data(), m, kk, g.ptr());
                    } else {
                        std::copy(da.begin(), da.end(), g.ptr());
                    }
                    accumulate(slot(0), std::move(g));
                }
                if (wants(1)) {
                    std::vector<double> at_;
                    const double* ap = a.ptr();
                    if (!at.trans_a) {
                        at_ = transposed(a);
                        ap = at_.data();
                    }
                    std::vector<double> db(kk * n);
                    k.gemm(kk, n, m, ap, gy.ptr(), db.data(), false);
                    Tensor g(b.shape());
                    if (at.trans_b) {
                        transpose(db.data(), kk, n, g.ptr());
                    } else {
                        std::copy(db.begin(), db.end(), g.ptr());
                    }
                    accumulate(slot(1), std::move(g));
                }
                break;
            }
            case Op::conv2d: {
                const Tensor& x = in(0);
                const Tensor& w = in(1);
                const ConvDims d = conv_dims(x.shape(), w.shape());
                const std::size_t hw = d.h * d.w;
                const std::size_t kdim = d.cin * 9;
                double* col = scratch(0, kdim * hw);
                double* col_t = nullptr;
                double* wt = nullptr;
                std::optional<Tensor> gw;
                std::optional<Tensor> gx;
                if (wants(1)) {
                    gw = Tensor(w.shape());
                    col_t = scratch(1, kdim * hw);
                }
                if (wants(0)) {
                    gx = Tensor(x.shape());
                    wt = scratch(2, kdim * d.cout);
                    transpose(w.ptr(), d.cout, kdim, wt);
                }
                for (std::size_t b = 0; b < d.batch; ++b) {
                    const double* gyb = gy.ptr() + b * d.cout * hw;
                    if (gw) {
                        im2col(x.ptr() + b * d.cin * hw, d.cin, d.h, d.w, col);
                        transpose(col, kdim, hw, col_t);
                        k.gemm(d.cout, kdim, hw, gyb, col_t, gw->ptr(), true);
                    }
                    if (gx) {
                        k.gemm(kdim, hw, d.cout, wt, gyb, col, false);
                        col2im(col, d.cin, d.h, d.w, gx->ptr() + b * d.cin * hw);
                    }
                }
                if (gx) accumulate(slot(0), std::move(*gx));
                if (gw) accumulate(slot(1), std::move(*gw));
                break;
            }
            case Op::softmax: {
                const SoftmaxLayout l = softmax_layout(node.value.shape(), at.axis);
                const double* y = node.value.ptr();
                Tensor g(node.value.shape());
                for (std::size_t o = 0; o < l.outer; ++o) {
                    for (std::size_t i = 0; i < l.inner; ++i) {
                        const std::size_t base = o * l.extent * l.inner + i;
                        double s = 0.0;
                        for (std::size_t e = 0; e < l.extent; ++e) s += gy[base + e * l.inner] * y[base + e * l.inner];
                        for (std::size_t e = 0; e < l.extent; ++e) {
                            const std::size_t j = base + e * l.inner;
                            g[j] = y[j] * (gy[j] - s);
                        }
                    }
                }
                accumulate(slot(0), std::move(g));
                break;
            }
            case Op::silu: {
                const Tensor& x = in(0);
                Tensor g(x.shape());
                for (std::size_t i = 0; i < x.numel(); ++i) {
                    const double sig = 1.0 / (1.0 + std::exp(-x[i]));
                    g[i] = gy[i] * sig * (1.0 + x[i] * (1.0 - sig));
                }
                accumulate(slot(0), std::move(g));
                break;
            }
            case Op::group_norm: {
                const Tensor& x = in(0);
                const Tensor& gamma = in(1);
                const GroupStats s = group_stats(x, at.groups, at.eps);
                const std::size_t n = s.per_group * s.spatial;
                if (wants(1) || wants(2)) {
                    Tensor gg(gamma.shape());
                    Tensor gb(gamma.shape());
                    for (std::size_t c = 0; c < s.channels; ++c) {
                        const std::size_t g = c / s.per_group;
                        const double* xp = x.ptr() + c * s.spatial;
                        const double* gp = gy.ptr() + c * s.spatial;
                        double a = 0.0, b = 0.0;
                        for (std::size_t i = 0; i < s.spatial; ++i) {
                            a += gp[i] * (xp[i] - s.mean[g]) * s.inv_std[g];
                            b += gp[i];
                        }
                        gg[c] = a;
                        gb[c] = b;
                    }
                    if (wants(1)) accumulate(slot(1), std::move(gg));
                    if (wants(2)) accumulate(slot(2), std::move(gb));
                }
                if (wants(0)) {
                    Tensor g(x.shape());
                    for (std::size_t grp = 0; grp < at.groups; ++grp) {
                        double sum_d = 0.0, sum_dx = 0.0;
                        for (std::size_t c = grp * s.per_group; c < (grp + 1) * s.per_group; ++c) {
                            for (std::size_t i = 0; i < s.spatial; ++i) {
                                const std::size_t j = c * s.spatial + i;
                                const double dxh = gy[j] * gamma[c];
                                sum_d += dxh;
                                sum_dx += dxh * (x[j] - s.mean[grp]) * s.inv_std[grp];
                            }
                        }
                        const double inv_n = 1.0 / static_cast<double>(n);
                        for (std::size_t c = grp * s.per_group; c < (grp + 1) * s.per_group; ++c) {
                            for (std::size_t i = 0; i < s.spatial; ++i) {
                                const std::size_t j = c * s.spatial + i;
                                const double xh = (x[j] - s.mean[grp]) * s.inv_std[grp];
                                const double dxh = gy[j] * gamma[c];
                                g[j] = s.inv_std[grp] * (dxh - inv_n * sum_d - xh * inv_n * sum_dx);
                            }
                        }
                    }
                    accumulate(slot(0), std::move(g));
                }
                break;
            }
            case Op::reshape:
                accumulate(slot(0), gy.reshaped(in(0).shape()));
                break;
            case Op::mean:
            case Op::sum: {
                const double f = node.op == Op::mean ? gy[0] / static_cast<double>(in(0).numel()) : gy[0];
                accumulate(slot(0), Tensor(in(0).shape(), f));
                break;
            }
            case Op::broadcast_add: {
                if (wants(0)) accumulate(slot(0), gy);
                if (wants(1)) {
                    Tensor g(in(1).shape());
                    double* gp = g.ptr();
                    for_each_broadcast(in(0).shape(), in(1).shape(), [&](std::size_t i, std::size_t p, std::size_t len, std::size_t step) {
                        if (step == 0) {
                            double acc = 0.0;
                            for (std::size_t j = 0; j < len; ++j) acc += gy[i + j];
                            gp[p] += acc;
                        } else {
                            for (std::size_t j = 0; j < len; ++j) gp[p + j * step] += gy[i + j];
                        }
                    });
                    accumulate(slot(1), std::move(g));
                }
                break;
            }
            case Op::square: {
                const Tensor& x = in(0);
                Tensor g(x.shape());
                for (std::size_t i = 0; i < x.numel(); ++i) g[i] = 2.0 * x[i] * gy[i];
                accumulate(slot(0), std::move(g));
                break;
            }
            case Op::scale: {
                Tensor g(gy.shape());
                k.axpy(g.numel(), at.factor, gy.ptr(), g.ptr());
                accumulate(slot(0), std::move(g));
                break;
            }
            case Op::avg_pool2: {
                const Tensor& x = in(0);
                const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
                Tensor g(x.shape());
                for (std::size_t ch = 0; ch < c; ++ch) {
                    for (std::size_t y = 0; y < h; ++y) {
                        for (std::size_t xx = 0; xx < w; ++xx) {
                            g[(ch * h + y) * w + xx] = 0.25 * gy[(ch * (h / 2) + y / 2) * (w / 2) + xx / 2];
                        }
                    }
                }
                accumulate(slot(0), std::move(g));
                break;
            }
            case Op::upsample2: {
                const Tensor& x = in(0);
                const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
                Tensor g(x.shape());
                for (std::size_t ch = 0; ch < c; ++ch) {
                    for (std::size_t y = 0; y < 2 * h; ++y) {
                        for (std::size_t xx = 0; xx < 2 * w; ++xx) {
                            g[(ch * h + y / 2) * w + xx / 2] += gy[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                accumulate(slot(0), std::move(g));
                break;
            }
            case Op::column: {
                const Tensor& x = in(0);
                Tensor g(x.shape());
                for (std::size_t r = 0; r < x.dim(0); ++r) g[r * x.dim(1) + at.index] = gy[r];
                accumulate(slot(0), std::move(g));
                break;
            }
            case Op::gather_rows: {
                const Tensor& t = in(0);
                const std::size_t d = t.dim(1);
                Tensor g(t.shape());
                for (std::size_t i = 0; i < at.indices.size(); ++i) {
                    k.axpy(d, 1.0, gy.ptr() + i * d, g.ptr() + at.indices[i] * d);
                }
                accumulate(slot(0), std::move(g));
                break;
            }
            case Op::concat_rows: {
                std::size_t offset = 0;
                for (std::size_t i = 0; i < node.inputs.size(); ++i) {
                    const std::size_t n = in(i).numel();
                    if (wants(i)) {
                        Tensor g(in(i).shape(), std::vector<double>(gy.ptr() + offset, gy.ptr() + offset + n));
                        accumulate(slot(i), std::move(g));
                    }
                    offset += n;
                }
                break;
            }
            case Op::minmax_normalize: {
                const Tensor& x = in(0);
                const auto [lo, hi] = argmin_argmax(x);
                const double range = x[hi] - x[lo];
                Tensor g(x.shape());
                if (range > kMinMaxFloor) {
                    const Tensor& y = node.value;
                    double to_lo = 0.0, to_hi = 0.0;
                    for (std::size_t i = 0; i < x.numel(); ++i) {
                        g[i] = gy[i] / range;
                        to_lo += gy[i] * (y[i] - 1.0);
                        to_hi -= gy[i] * y[i];
                    }
                    g[lo] += to_lo / range;
                    g[hi] += to_hi / range;
                }
                accumulate(slot(0), std::move(g));
                break;
            }
        }
    }

    std::map<NodeId, Tensor> out;
    for (NodeId p : params_) {
        if (p <= loss && grads[p]) {
            out.emplace(p, std::move(*grads[p]));
        } else {
            out.emplace(p, Tensor(nodes_[p].value.shape()));
        }
    }
    return out;
}

double fd_check(Graph& graph, NodeId loss, NodeId param, double h) {
    if (!(h > 0.0)) {
        throw std::invalid_argument("fd_check: step must be positive");
    }
    if (graph.op(param) != Op::parameter) {
        throw std::invalid_argument("fd_check: node " + std::to_string(param) + " is not a parameter");
    }
    const auto grads = graph.backward(loss);
    const Tensor& analytic = grads.at(param);
    const Tensor original = graph.value(param);
    double worst = 0.0;
    for (std::size_t i = 0; i < original.numel(); ++i) {
        Tensor probe = original;
        probe[i] = original[i] + h;
        graph.set_leaf(param, probe);
        graph.replay();
        const double up = graph.value(loss)[0];
        probe[i] = original[i] - h;
        graph.set_leaf(param, probe);
        graph.replay();
        const double down = graph.value(loss)[0];
        const double fd = (up - down) / (2.0 * h);
        worst = std::max(worst, std::abs(analytic[i] - fd) / (std::abs(fd) + 1e-8));
    }
    graph.set_leaf(param, original);
    graph.replay();
    return worst;
}

namespace ops {

NodeId add(Graph& g, NodeId a, NodeId b) { return g.apply(Op::add, {a, b}); }
NodeId sub(Graph& g, NodeId a, NodeId b) { return g.apply(Op::sub, {a, b}); }
NodeId mul(Graph& g, NodeId a, NodeId b) { return g.apply(Op::mul, {a, b}); }

NodeId matmul(Graph& g, NodeId a, NodeId b, bool trans_a, bool trans_b) {
    OpAttrs at;
    at.trans_a = trans_a;
    at.trans_b = trans_b;
    return g.apply(Op::matmul, {a, b}, at);
}

NodeId conv2d(Graph& g, NodeId x, NodeId w) { return g.apply(Op::conv2d, {x, w}); }

NodeId softmax(Graph& g, NodeId x, int axis) {
    OpAttrs at;
    at.axis = axis;
    return g.apply(Op::softmax, {x}, at);
}

NodeId silu(Graph& g, NodeId x) { return g.apply(Op::silu, {x}); }

NodeId group_norm(Graph& g, NodeId x, NodeId gamma, NodeId beta, std::size_t groups, double eps) {
    OpAttrs at;
    at.groups = groups;
    at.eps = eps;
    return g.apply(Op::group_norm, {x, gamma, beta}, at);
}

NodeId reshape(Graph& g, NodeId x, Shape shape) {
    OpAttrs at;
    at.shape = std::move(shape);
    return g.apply(Op::reshape, {x}, at);
}

NodeId mean(Graph& g, NodeId x) { return g.apply(Op::mean, {x}); }
NodeId sum(Graph& g, NodeId x) { return g.apply(Op::sum, {x}); }
NodeId broadcast_add(Graph& g, NodeId x, NodeId b) { return g.apply(Op::broadcast_add, {x, b}); }
NodeId square(Graph& g, NodeId x) { return g.apply(Op::square, {x}); }

NodeId scale(Graph& g, NodeId x, double factor) {
    OpAttrs at;
    at.factor = factor;
    return g.apply(Op::scale, {x}, at);
}

NodeId avg_pool2(Graph& g, NodeId x) { return g.apply(Op::avg_pool2, {x}); }
NodeId upsample2(Graph& g, NodeId x) { return g.apply(Op::upsample2, {x}); }

NodeId column(Graph& g, NodeId x, std::size_t index) {
    OpAttrs at;
    at.index = index;
    return g.apply(Op::column, {x}, at);
}

NodeId gather_rows(Graph& g, NodeId table, std::vector<std::size_t> rows) {
    OpAttrs at;
    at.indices = std::move(rows);
    return g.apply(Op::gather_rows, {table}, at);
}

NodeId concat_rows(Graph& g, std::vector<NodeId> parts) { return g.apply(Op::concat_rows, std::move(parts)); }

NodeId minmax_normalize(Graph& g, NodeId x) { return g.apply(Op::minmax_normalize, {x}); }

}  // namespace ops

}  // namespace decomp
