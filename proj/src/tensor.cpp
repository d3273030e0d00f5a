#include "flowcast/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace flowcast {

namespace {

// C (+)= A * B, row-major [m,k] x [k,n].
void mm_nn(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
           std::size_t n, bool accumulate) {
    if (!accumulate) std::memset(C, 0, sizeof(double) * m * n);
    for (std::size_t i = 0; i < m; ++i) {
        double* c = C + i * n;
        const double* a = A + i * k;
        for (std::size_t l = 0; l < k; ++l) {
            const double av = a[l];
            if (av == 0.0) continue;
            const double* b = B + l * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// C += A * B^T, A [m,k], B [n,k] -> C [m,n].
void mm_nt_acc(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
               std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* a = A + i * k;
        double* c = C + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* b = B + j * k;
            double s = 0.0;
            for (std::size_t l = 0; l < k; ++l) s += a[l] * b[l];
            c[j] += s;
        }
    }
}

// C += A^T * B, A [m,k], B [m,n] -> C [k,n].
void mm_tn_acc(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
               std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* a = A + i * k;
        const double* b = B + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            const double av = a[l];
            if (av == 0.0) continue;
            double* c = C + l * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

void check_same_graph(const Tensor& a, const Tensor& b, const char* op) {
    if (&a.graph() != &b.graph()) raise(op, ": operands belong to different graphs");
}

double stable_softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// outer/inner decomposition around `axis` for concat/slice.
void axis_split(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& inner) {
    outer = 1;
    inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.rank(); ++i) inner *= s[i];
}

} // namespace

const Shape& Tensor::shape() const { return g_->node(id_).shape; }
bool Tensor::requires_grad() const { return g_->node(id_).requires_grad; }
std::span<const double> Tensor::values() const { return g_->node(id_).value; }
std::span<const double> Tensor::grad() const { return g_->node(id_).grad; }

double Tensor::item() const {
    const auto& n = g_->node(id_);
    if (n.value.size() != 1) raise("item: tensor ", n.shape.str(), " is not a scalar");
    return n.value[0];
}

Tensor Graph::finish(Node&& n) {
    if (n.shape.rank() == 0 || n.shape.numel() == 0) raise("tensor: empty shape");
    for (std::size_t i = 0; i < n.shape.rank(); ++i)
        if (n.shape[i] == 0) raise("tensor: zero extent in shape ", n.shape.str());
    nodes_.push_back(std::move(n));
    return Tensor(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Tensor Graph::leaf(const Shape& s, std::span<const double> data, bool requires_grad) {
    if (data.size() != s.numel())
        raise("leaf: ", data.size(), " values for shape ", s.str());
    Node n;
    n.shape = s;
    n.value.assign(data.begin(), data.end());
    n.op = Op::Leaf;
    n.requires_grad = requires_grad;
    return finish(std::move(n));
}

Tensor Graph::constant_fill(const Shape& s, double v) {
    Node n;
    n.shape = s;
    n.value.assign(s.numel(), v);
    n.op = Op::Leaf;
    return finish(std::move(n));
}

Tensor Graph::param(Parameter& p) {
    if (p.value.size() != p.shape.numel())
        raise("param '", p.name, "': ", p.value.size(), " values for shape ", p.shape.str());
    Node n;
    n.shape = p.shape;
    n.value = p.value;
    n.op = Op::Leaf;
    n.requires_grad = true;
    n.bound = &p;
    return finish(std::move(n));
}

void Graph::reset() {
    nodes_.clear();
    extra_inputs_.clear();
    backward_done_ = false;
}

std::vector<double>& Graph::grad_buf(std::uint32_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
}

// ---------------------------------------------------------------------------
// op construction + forward evaluation
// ---------------------------------------------------------------------------

namespace {


void validate_broadcast(const char* op, const Shape& a, const Shape& b) {
    if (a == b) return;
    if (b.numel() == 1) return;
    if (a.has_suffix(b)) return;
    raise(op, ": incompatible shapes ", a.str(), " and ", b.str());
}

} // namespace

static Tensor binary_elementwise(Op op, const char* name, Tensor a, Tensor b) {
    check_same_graph(a, b, name);
    Graph& g = a.graph();
    validate_broadcast(name, a.shape(), b.shape());
    const auto av = a.values();
    const auto bv = b.values();
    const std::size_t m = bv.size();

    Graph::Node n;
    n.shape = a.shape();
    n.op = op;
    n.n_in = 2;
    n.in = {a.id(), b.id(), 0};
    n.requires_grad = a.requires_grad() || b.requires_grad();
    n.value.resize(av.size());
    switch (op) {
    case Op::Add:
        for (std::size_t i = 0; i < av.size(); ++i) n.value[i] = av[i] + bv[i % m];
        break;
    case Op::Sub:
        for (std::size_t i = 0; i < av.size(); ++i) n.value[i] = av[i] - bv[i % m];
        break;
    case Op::Mul:
        for (std::size_t i = 0; i < av.size(); ++i) n.value[i] = av[i] * bv[i % m];
        break;
    default:
        raise(name, ": bad dispatch");
    }
    return g.finish(std::move(n));
}

Tensor add(Tensor a, Tensor b) { return binary_elementwise(Op::Add, "add", a, b); }
Tensor sub(Tensor a, Tensor b) { return binary_elementwise(Op::Sub, "sub", a, b); }
Tensor mul(Tensor a, Tensor b) { return binary_elementwise(Op::Mul, "mul", a, b); }

Tensor matmul(Tensor a, Tensor b) {
    check_same_graph(a, b, "matmul");
    Graph& g = a.graph();
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    std::size_t batch = 1, m = 0, k = 0, n = 0;
    bool shared_rhs = false;
    if (sa.rank() == 2 && sb.rank() == 2) {
        m = sa[0]; k = sa[1];
        if (sb[0] != k) raise("matmul: incompatible shapes ", sa.str(), " and ", sb.str());
        n = sb[1];
    } else if (sa.rank() == 3 && sb.rank() == 3) {
        batch = sa[0]; m = sa[1]; k = sa[2];
        if (sb[0] != batch || sb[1] != k)
            raise("matmul: incompatible shapes ", sa.str(), " and ", sb.str());
        n = sb[2];
    } else if (sa.rank() == 3 && sb.rank() == 2) {
        batch = sa[0]; m = sa[1]; k = sa[2];
        if (sb[0] != k) raise("matmul: incompatible shapes ", sa.str(), " and ", sb.str());
        n = sb[1];
        shared_rhs = true;
    } else {
        raise("matmul: unsupported ranks ", sa.str(), " and ", sb.str());
    }

    Graph::Node node;
    node.shape = (sa.rank() == 2) ? Shape{m, n} : Shape{batch, m, n};
    node.op = Op::MatMul;
    node.n_in = 2;
    node.in = {a.id(), b.id(), 0};
    node.requires_grad = a.requires_grad() || b.requires_grad();
    node.value.resize(node.shape.numel());
    const double* A = a.values().data();
    const double* B = b.values().data();
    for (std::size_t bi = 0; bi < batch; ++bi) {
        mm_nn(A + bi * m * k, shared_rhs ? B : B + bi * k * n, node.value.data() + bi * m * n,
              m, k, n, false);
    }
    return g.finish(std::move(node));
}

Tensor transpose(Tensor x) {
    Graph& g = x.graph();
    const Shape& s = x.shape();
    if (s.rank() < 2) raise("transpose: needs rank >= 2, got ", s.str());
    Shape out = s;
    std::swap(out[s.rank() - 2], out[s.rank() - 1]);
    const std::size_t r = s[s.rank() - 2], c = s[s.rank() - 1];
    const std::size_t batch = s.numel() / (r * c);

    Graph::Node n;
    n.shape = out;
    n.op = Op::Transpose;
    n.n_in = 1;
    n.in = {x.id(), 0, 0};
    n.requires_grad = x.requires_grad();
    n.value.resize(s.numel());
    const double* src = x.values().data();
    for (std::size_t bi = 0; bi < batch; ++bi) {
        const double* in = src + bi * r * c;
        double* o = n.value.data() + bi * r * c;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) o[j * r + i] = in[i * c + j];
    }
    return g.finish(std::move(n));
}

Tensor reshape(Tensor x, const Shape& s) {
    Graph& g = x.graph();
    if (s.numel() != x.numel())
        raise("reshape: cannot view ", x.shape().str(), " as ", s.str());
    Graph::Node n;
    n.shape = s;
    n.op = Op::Reshape;
    n.n_in = 1;
    n.in = {x.id(), 0, 0};
    n.requires_grad = x.requires_grad();
    const auto v = x.values();
    n.value.assign(v.begin(), v.end());
    return g.finish(std::move(n));
}

Tensor map_unary(Op op, Tensor x, double p) {
    Graph& g = x.graph();
    Graph::Node n;
    n.shape = x.shape();
    n.op = op;
    n.n_in = 1;
    n.in = {x.id(), 0, 0};
    n.a = p;
    n.requires_grad = x.requires_grad();
    const auto v = x.values();
    n.value.resize(v.size());
    switch (op) {
    case Op::Exp:
        for (std::size_t i = 0; i < v.size(); ++i) n.value[i] = std::exp(v[i]);
        break;
    case Op::Log:
        for (std::size_t i = 0; i < v.size(); ++i) n.value[i] = std::log(v[i]);
        break;
    case Op::Tanh:
        for (std::size_t i = 0; i < v.size(); ++i) n.value[i] = std::tanh(v[i]);
        break;
    case Op::Sigmoid:
        for (std::size_t i = 0; i < v.size(); ++i) n.value[i] = stable_sigmoid(v[i]);
        break;
    case Op::Softplus:
        for (std::size_t i = 0; i < v.size(); ++i) n.value[i] = stable_softplus(v[i]);
        break;
    case Op::Elu:
        for (std::size_t i = 0; i < v.size(); ++i)
            n.value[i] = v[i] > 0.0 ? v[i] : std::expm1(v[i]);
        break;
    case Op::PowScalar:
        for (std::size_t i = 0; i < v.size(); ++i) n.value[i] = std::pow(v[i], p);
        break;
    default:
        raise("map_unary: bad dispatch");
    }
    return g.finish(std::move(n));
}

Tensor exp(Tensor x) { return map_unary(Op::Exp, x, 0.0); }
Tensor log(Tensor x) { return map_unary(Op::Log, x, 0.0); }
Tensor tanh(Tensor x) { return map_unary(Op::Tanh, x, 0.0); }
Tensor sigmoid(Tensor x) { return map_unary(Op::Sigmoid, x, 0.0); }
Tensor softplus(Tensor x) { return map_unary(Op::Softplus, x, 0.0); }
Tensor elu(Tensor x) { return map_unary(Op::Elu, x, 0.0); }
Tensor pow_scalar(Tensor x, double p) { return map_unary(Op::PowScalar, x, p); }

Tensor affine(Tensor x, double mul, double add) {
    Graph& g = x.graph();
    Graph::Node n;
    n.shape = x.shape();
    n.op = Op::Affine;
    n.n_in = 1;
    n.in = {x.id(), 0, 0};
    n.a = mul;
    n.b = add;
    n.requires_grad = x.requires_grad();
    const auto v = x.values();
    n.value.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) n.value[i] = mul * v[i] + add;
    return g.finish(std::move(n));
}

Tensor softmax_lastaxis(Tensor x) {
    Graph& g = x.graph();
    const std::size_t w = x.shape().last();
    const std::size_t rows = x.numel() / w;
    Graph::Node n;
    n.shape = x.shape();
    n.op = Op::Softmax;
    n.n_in = 1;
    n.in = {x.id(), 0, 0};
    n.requires_grad = x.requires_grad();
    n.value.resize(x.numel());
    const double* v = x.values().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = v + r * w;
        double* out = n.value.data() + r * w;
        double mx = in[0];
        for (std::size_t j = 1; j < w; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < w; ++j) {
            out[j] = std::exp(in[j] - mx);
            sum += out[j];
        }
        if (!(sum > 0.0)) raise("softmax: row ", r, " sums to zero (all entries masked?)");
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < w; ++j) out[j] *= inv;
    }
    return g.finish(std::move(n));
}

Tensor masked_fill(Tensor x, Tensor mask, double value) {
    check_same_graph(x, mask, "masked_fill");
    Graph& g = x.graph();
    validate_broadcast("masked_fill", x.shape(), mask.shape());
    Graph::Node n;
    n.shape = x.shape();
    n.op = Op::MaskedFill;
    n.n_in = 2;
    n.in = {x.id(), mask.id(), 0};
    n.a = value;
    n.requires_grad = x.requires_grad();
    const auto v = x.values();
    const auto mv = mask.values();
    const std::size_t m = mv.size();
    n.value.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
        n.value[i] = (mv[i % m] != 0.0) ? value : v[i];
    return g.finish(std::move(n));
}

Tensor sum_all(Tensor x) {
    Graph& g = x.graph();
    Graph::Node n;
    n.shape = Shape{1};
    n.op = Op::SumAll;
    n.n_in = 1;
    n.in = {x.id(), 0, 0};
    n.requires_grad = x.requires_grad();
    double s = 0.0;
    for (double v : x.values()) s += v;
    n.value = {s};
    return g.finish(std::move(n));
}

Tensor mean_all(Tensor x) {
    Graph& g = x.graph();
    Graph::Node n;
    n.shape = Shape{1};
    n.op = Op::MeanAll;
    n.n_in = 1;
    n.in = {x.id(), 0, 0};
    n.requires_grad = x.requires_grad();
    double s = 0.0;
    for (double v : x.values()) s += v;
    n.value = {s / static_cast<double>(x.numel())};
    return g.finish(std::move(n));
}

Tensor sum_lastaxis(Tensor x) {
    Graph& g = x.graph();
    const std::size_t w = x.shape().last();
    const std::size_t rows = x.numel() / w;
    Graph::Node n;
    n.shape = x.shape().drop_last();
    n.op = Op::SumLast;
    n.n_in = 1;
    n.in = {x.id(), 0, 0};
    n.requires_grad = x.requires_grad();
    n.value.resize(rows);
    const double* v = x.values().data();
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < w; ++j) s += v[r * w + j];
        n.value[r] = s;
    }
    return g.finish(std::move(n));
}

Tensor col_mean(Tensor x) {
    Graph& g = x.graph();
    const Shape& s = x.shape();
    if (s.rank() != 2) raise("col_mean: needs rank 2, got ", s.str());
    const std::size_t rows = s[0], cols = s[1];
    Graph::Node n;
    n.shape = Shape{cols};
    n.op = Op::ColMean;
    n.n_in = 1;
    n.in = {x.id(), 0, 0};
    n.requires_grad = x.requires_grad();
    n.value.assign(cols, 0.0);
    const double* v = x.values().data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) n.value[c] += v[r * cols + c];
    for (std::size_t c = 0; c < cols; ++c) n.value[c] /= static_cast<double>(rows);
    return g.finish(std::move(n));
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
    if (parts.empty()) raise("concat: no inputs");
    Graph& g = parts[0].graph();
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.rank()) raise("concat: axis ", axis, " out of range for ", s0.str());
    Shape out = s0;
    std::size_t total_axis = 0;
    for (const Tensor& t : parts) {
        check_same_graph(parts[0], t, "concat");
        const Shape& s = t.shape();
        if (s.rank() != s0.rank()) raise("concat: rank mismatch ", s0.str(), " vs ", s.str());
        for (std::size_t i = 0; i < s.rank(); ++i)
            if (i != axis && s[i] != s0[i])
                raise("concat: incompatible shapes ", s0.str(), " and ", s.str());
        total_axis += s[axis];
    }
    out[axis] = total_axis;

    Graph::Node n;
    n.shape = out;
    n.op = Op::Concat;
    n.axis = static_cast<std::uint32_t>(axis);
    n.extra_off = static_cast<std::uint32_t>(g.extra_inputs().size());
    n.extra_cnt = static_cast<std::uint32_t>(parts.size());
    for (const Tensor& t : parts) {
        g.extra_inputs().push_back(t.id());
        n.requires_grad = n.requires_grad || t.requires_grad();
    }
    n.value.resize(out.numel());
    std::size_t outer, inner;
    axis_split(out, axis, outer, inner);
    std::size_t off_axis = 0;
    for (const Tensor& t : parts) {
        const std::size_t ext = t.shape()[axis];
        const double* src = t.values().data();
        for (std::size_t o = 0; o < outer; ++o) {
            double* dst = n.value.data() + (o * total_axis + off_axis) * inner;
            std::memcpy(dst, src + o * ext * inner, sizeof(double) * ext * inner);
        }
        off_axis += ext;
    }
    return g.finish(std::move(n));
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
    std::vector<Tensor> v(parts);
    return concat(std::span<const Tensor>(v), axis);
}

Tensor slice(Tensor x, std::size_t axis, std::size_t start, std::size_t len) {
    Graph& g = x.graph();
    const Shape& s = x.shape();
    if (axis >= s.rank()) raise("slice: axis ", axis, " out of range for ", s.str());
    if (start + len > s[axis] || len == 0)
        raise("slice: range [", start, ",", start + len, ") out of bounds for ", s.str(),
              " axis ", axis);
    Shape out = s;
    out[axis] = len;
    Graph::Node n;
    n.shape = out;
    n.op = Op::Slice;
    n.n_in = 1;
    n.in = {x.id(), 0, 0};
    n.axis = static_cast<std::uint32_t>(axis);
    n.start = start;
    n.len = len;
    n.requires_grad = x.requires_grad();
    n.value.resize(out.numel());
    std::size_t outer, inner;
    axis_split(s, axis, outer, inner);
    const double* src = x.values().data();
    const std::size_t ext = s[axis];
    for (std::size_t o = 0; o < outer; ++o) {
        std::memcpy(n.value.data() + o * len * inner, src + (o * ext + start) * inner,
                    sizeof(double) * len * inner);
    }
    return g.finish(std::move(n));
}

Tensor broadcast_rows(Tensor v, std::size_t rows) {
    Graph& g = v.graph();
    if (v.shape().rank() != 1) raise("broadcast_rows: needs rank 1, got ", v.shape().str());
    const std::size_t c = v.shape()[0];
    Graph::Node n;
    n.shape = Shape{rows, c};
    n.op = Op::BroadcastRows;
    n.n_in = 1;
    n.in = {v.id(), 0, 0};
    n.requires_grad = v.requires_grad();
    n.value.resize(rows * c);
    const double* src = v.values().data();
    for (std::size_t r = 0; r < rows; ++r)
        std::memcpy(n.value.data() + r * c, src, sizeof(double) * c);
    return g.finish(std::move(n));
}

Tensor layer_norm(Tensor x, Tensor gain, Tensor bias, double eps) {
    check_same_graph(x, gain, "layer_norm");
    check_same_graph(x, bias, "layer_norm");
    Graph& g = x.graph();
    const std::size_t w = x.shape().last();
    if (gain.shape() != Shape{w} || bias.shape() != Shape{w})
        raise("layer_norm: gain/bias must be [", w, "], got ", gain.shape().str(), " and ",
              bias.shape().str());
    const std::size_t rows = x.numel() / w;
    Graph::Node n;
    n.shape = x.shape();
    n.op = Op::LayerNorm;
    n.n_in = 3;
    n.in = {x.id(), gain.id(), bias.id()};
    n.a = eps;
    n.requires_grad = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
    n.value.resize(x.numel());
    n.aux.resize(2 * rows); // per row: mean, rstd
    const double* v = x.values().data();
    const double* gv = gain.values().data();
    const double* bv = bias.values().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = v + r * w;
        double mean = 0.0;
        for (std::size_t j = 0; j < w; ++j) mean += in[j];
        mean /= static_cast<double>(w);
        double var = 0.0;
        for (std::size_t j = 0; j < w; ++j) {
            const double d = in[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(w);
        const double rstd = 1.0 / std::sqrt(var + eps);
        n.aux[2 * r] = mean;
        n.aux[2 * r + 1] = rstd;
        double* out = n.value.data() + r * w;
        for (std::size_t j = 0; j < w; ++j) out[j] = gv[j] * ((in[j] - mean) * rstd) + bv[j];
    }
    return g.finish(std::move(n));
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void Graph::backward(const Tensor& loss) {
    if (loss.g_ != this) raise("backward: tensor from another graph");
    if (backward_done_) raise("backward: called twice without graph reset");
    const Node& out = nodes_[loss.id()];
    if (out.value.size() != 1)
        raise("backward: output has shape ", out.shape.str(), ", expected a scalar");
    backward_done_ = true;
    if (!out.requires_grad) return; // nothing reachable wants gradients
    grad_buf(loss.id())[0] = 1.0;
    for (std::uint32_t id = loss.id() + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (!n.requires_grad || n.grad.empty()) continue;
        backward_node(id);
        if (n.op == Op::Leaf && n.bound != nullptr) {
            auto& pg = n.bound->grad;
            for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
        }
    }
}

void Graph::backward_node(std::uint32_t id) {
    Node& n = nodes_[id];
    const std::vector<double>& dy = n.grad;
    auto in_val = [&](int k) -> const std::vector<double>& { return nodes_[n.in[k]].value; };
    auto in_rg = [&](int k) { return nodes_[n.in[k]].requires_grad; };
    auto in_grad = [&](int k) -> std::vector<double>& { return grad_buf(n.in[k]); };

    switch (n.op) {
    case Op::Leaf:
        return;
    case Op::Add: {
        if (in_rg(0)) {
            auto& da = in_grad(0);
            for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
        }
        if (in_rg(1)) {
            auto& db = in_grad(1);
            const std::size_t m = db.size();
            for (std::size_t i = 0; i < dy.size(); ++i) db[i % m] += dy[i];
        }
        return;
    }
    case Op::Sub: {
        if (in_rg(0)) {
            auto& da = in_grad(0);
            for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
        }
        if (in_rg(1)) {
            auto& db = in_grad(1);
            const std::size_t m = db.size();
            for (std::size_t i = 0; i < dy.size(); ++i) db[i % m] -= dy[i];
        }
        return;
    }
    case Op::Mul: {
        const auto& av = in_val(0);
        const auto& bv = in_val(1);
        const std::size_t m = bv.size();
        if (in_rg(0)) {
            auto& da = in_grad(0);
            for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bv[i % m];
        }
        if (in_rg(1)) {
            auto& db = in_grad(1);
            for (std::size_t i = 0; i < dy.size(); ++i) db[i % m] += dy[i] * av[i];
        }
        return;
    }
    case Op::MatMul: {
        const Shape& sa = nodes_[n.in[0]].shape;
        const Shape& sb = nodes_[n.in[1]].shape;
        const bool shared_rhs = sa.rank() == 3 && sb.rank() == 2;
        const std::size_t batch = sa.rank() == 3 ? sa[0] : 1;
        const std::size_t m = sa[sa.rank() - 2], k = sa[sa.rank() - 1];
        const std::size_t cols = sb[sb.rank() - 1];
        const double* A = in_val(0).data();
        const double* B = in_val(1).data();
        for (std::size_t bi = 0; bi < batch; ++bi) {
            const double* dC = dy.data() + bi * m * cols;
            if (in_rg(0))
                mm_nt_acc(dC, (shared_rhs ? B : B + bi * k * cols), in_grad(0).data() + bi * m * k,
                          m, cols, k);
            if (in_rg(1))
                mm_tn_acc(A + bi * m * k, dC,
                          in_grad(1).data() + (shared_rhs ? 0 : bi * k * cols), m, k, cols);
        }
        return;
    }
    case Op::Transpose: {
        if (!in_rg(0)) return;
        const Shape& s = nodes_[n.in[0]].shape;
        const std::size_t r = s[s.rank() - 2], c = s[s.rank() - 1];
        const std::size_t batch = s.numel() / (r * c);
        auto& dx = in_grad(0);
        for (std::size_t bi = 0; bi < batch; ++bi) {
            const double* d = dy.data() + bi * r * c; // dy is [.., c, r]
            double* o = dx.data() + bi * r * c;
            for (std::size_t j = 0; j < c; ++j)
                for (std::size_t i = 0; i < r; ++i) o[i * c + j] += d[j * r + i];
        }
        return;
    }
    case Op::Reshape: {
        if (!in_rg(0)) return;
        auto& dx = in_grad(0);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
        return;
    }
    case Op::Exp: {
        if (!in_rg(0)) return;
        auto& dx = in_grad(0);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * n.value[i];
        return;
    }
    case Op::Log: {
        if (!in_rg(0)) return;
        const auto& xv = in_val(0);
        auto& dx = in_grad(0);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] / xv[i];
        return;
    }
    case Op::Tanh: {
        if (!in_rg(0)) return;
        auto& dx = in_grad(0);
        for (std::size_t i = 0; i < dy.size(); ++i)
            dx[i] += dy[i] * (1.0 - n.value[i] * n.value[i]);
        return;
    }
    case Op::Sigmoid: {
        if (!in_rg(0)) return;
        auto& dx = in_grad(0);
        for (std::size_t i = 0; i < dy.size(); ++i)
            dx[i] += dy[i] * n.value[i] * (1.0 - n.value[i]);
        return;
    }
    case Op::Softplus: {
        if (!in_rg(0)) return;
        const auto& xv = in_val(0);
        auto& dx = in_grad(0);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * stable_sigmoid(xv[i]);
        return;
    }
    case Op::Elu: {
        if (!in_rg(0)) return;
        const auto& xv = in_val(0);
        auto& dx = in_grad(0);
        for (std::size_t i = 0; i < dy.size(); ++i)
            dx[i] += dy[i] * (xv[i] > 0.0 ? 1.0 : n.value[i] + 1.0);
        return;
    }
    case Op::PowScalar: {
        if (!in_rg(0)) return;
        const auto& xv = in_val(0);
        auto& dx = in_grad(0);
        for (std::size_t i = 0; i < dy.size(); ++i)
            dx[i] += dy[i] * n.a * std::pow(xv[i], n.a - 1.0);
        return;
    }
    case Op::Affine: {
        if (!in_rg(0)) return;
        auto& dx = in_grad(0);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * n.a;
        return;
    }
    case Op::Softmax: {
        if (!in_rg(0)) return;
        const std::size_t w = n.shape.last();
        const std::size_t rows = n.value.size() / w;
        auto& dx = in_grad(0);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = n.value.data() + r * w;
            const double* d = dy.data() + r * w;
            double dot = 0.0;
            for (std::size_t j = 0; j < w; ++j) dot += d[j] * y[j];
            double* o = dx.data() + r * w;
            for (std::size_t j = 0; j < w; ++j) o[j] += (d[j] - dot) * y[j];
        }
        return;
    }
    case Op::MaskedFill: {
        if (!in_rg(0)) return;
        const auto& mv = in_val(1);
        const std::size_t m = mv.size();
        auto& dx = in_grad(0);
        for (std::size_t i = 0; i < dy.size(); ++i)
            if (mv[i % m] == 0.0) dx[i] += dy[i];
        return;
    }
    case Op::SumAll: {
        if (!in_rg(0)) return;
        auto& dx = in_grad(0);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[0];
        return;
    }
    case Op::MeanAll: {
        if (!in_rg(0)) return;
        auto& dx = in_grad(0);
        const double s = dy[0] / static_cast<double>(dx.size());
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += s;
        return;
    }
    case Op::SumLast: {
        if (!in_rg(0)) return;
        const std::size_t w = nodes_[n.in[0]].shape.last();
        auto& dx = in_grad(0);
        for (std::size_t r = 0; r < dy.size(); ++r)
            for (std::size_t j = 0; j < w; ++j) dx[r * w + j] += dy[r];
        return;
    }
    case Op::ColMean: {
        if (!in_rg(0)) return;
        const Shape& s = nodes_[n.in[0]].shape;
        const std::size_t rows = s[0], cols = s[1];
        const double inv = 1.0 / static_cast<double>(rows);
        auto& dx = in_grad(0);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] += dy[c] * inv;
        return;
    }
    case Op::Concat: {
        std::size_t outer, inner;
        axis_split(n.shape, n.axis, outer, inner);
        const std::size_t total_axis = n.shape[n.axis];
        std::size_t off_axis = 0;
        for (std::uint32_t e = 0; e < n.extra_cnt; ++e) {
            const std::uint32_t src = extra_inputs_[n.extra_off + e];
            const std::size_t ext = nodes_[src].shape[n.axis];
            if (nodes_[src].requires_grad) {
                auto& dx = grad_buf(src);
                for (std::size_t o = 0; o < outer; ++o) {
                    const double* d = dy.data() + (o * total_axis + off_axis) * inner;
                    double* t = dx.data() + o * ext * inner;
                    for (std::size_t i = 0; i < ext * inner; ++i) t[i] += d[i];
                }
            }
            off_axis += ext;
        }
        return;
    }
    case Op::Slice: {
        if (!in_rg(0)) return;
        const Shape& s = nodes_[n.in[0]].shape;
        std::size_t outer, inner;
        axis_split(s, n.axis, outer, inner);
        const std::size_t ext = s[n.axis];
        auto& dx = in_grad(0);
        for (std::size_t o = 0; o < outer; ++o) {
            const double* d = dy.data() + o * n.len * inner;
            double* t = dx.data() + (o * ext + n.start) * inner;
            for (std::size_t i = 0; i < n.len * inner; ++i) t[i] += d[i];
        }
        return;
    }
    case Op::BroadcastRows: {
        if (!in_rg(0)) return;
        const std::size_t c = nodes_[n.in[0]].shape[0];
        const std::size_t rows = n.shape[0];
        auto& dv = in_grad(0);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) dv[j] += dy[r * c + j];
        return;
    }
    case Op::LayerNorm: {
        const std::size_t w = n.shape.last();
        const std::size_t rows = n.value.size() / w;
        const auto& xv = in_val(0);
        const auto& gv = in_val(1);
        for (std::size_t r = 0; r < rows; ++r) {
            const double mean = n.aux[2 * r];
            const double rstd = n.aux[2 * r + 1];
            const double* x = xv.data() + r * w;
            const double* d = dy.data() + r * w;
            if (in_rg(1) || in_rg(2)) {
                for (std::size_t j = 0; j < w; ++j) {
                    const double xh = (x[j] - mean) * rstd;
                    if (in_rg(1)) in_grad(1)[j] += d[j] * xh;
                    if (in_rg(2)) in_grad(2)[j] += d[j];
                }
            }
            if (in_rg(0)) {
                double m1 = 0.0, m2 = 0.0;
                for (std::size_t j = 0; j < w; ++j) {
                    const double xh = (x[j] - mean) * rstd;
                    const double dxh = d[j] * gv[j];
                    m1 += dxh;
                    m2 += dxh * xh;
                }
                m1 /= static_cast<double>(w);
                m2 /= static_cast<double>(w);
                auto& dx = in_grad(0);
                for (std::size_t j = 0; j < w; ++j) {
                    const double xh = (x[j] - mean) * rstd;
                    const double dxh = d[j] * gv[j];
                    dx[r * w + j] += rstd * (dxh - m1 - xh * m2);
                }
            }
        }
        return;
    }
    }
    raise("backward: unhandled op");
}

} // namespace flowcast
