#ifndef FLOWCAST_TENSOR_HPP
#define FLOWCAST_TENSOR_HPP

#include <array>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "flowcast/common.hpp"

namespace flowcast {

// Dense shape, rank 0..4 (rank 0 is not used; scalars are shape {1}).
class Shape {
public:
    static constexpr std::size_t kMaxRank = 4;

    Shape() = default;
    Shape(std::initializer_list<std::size_t> dims) {
        if (dims.size() > kMaxRank) raise("shape: rank ", dims.size(), " exceeds max ", kMaxRank);
        for (std::size_t d : dims) dims_[rank_++] = d;
    }

    std::size_t rank() const { return rank_; }
    std::size_t operator[](std::size_t i) const { return dims_[i]; }
    std::size_t& operator[](std::size_t i) { return dims_[i]; }

    std::size_t numel() const {
        std::size_t n = 1;
        for (std::size_t i = 0; i < rank_; ++i) n *= dims_[i];
        return rank_ == 0 ? 0 : n;
    }

    std::size_t last() const { return dims_[rank_ - 1]; }

    bool operator==(const Shape& o) const {
        if (rank_ != o.rank_) return false;
        for (std::size_t i = 0; i < rank_; ++i)
            if (dims_[i] != o.dims_[i]) return false;
        return true;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    // True when `o` equals the trailing dims of *this (broadcast over leading axes).
    bool has_suffix(const Shape& o) const {
        if (o.rank_ > rank_) return false;
        for (std::size_t i = 0; i < o.rank_; ++i)
            if (o.dims_[o.rank_ - 1 - i] != dims_[rank_ - 1 - i]) return false;
        return true;
    }

    Shape drop_last() const {
        Shape s(*this);
        if (s.rank_ <= 1) { s.rank_ = 1; s.dims_[0] = 1; return s; }
        --s.rank_;
        return s;
    }

    std::string str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < rank_; ++i) {
            if (i) s += ",";
            s += std::to_string(dims_[i]);
        }
        return s + "]";
    }

private:
    std::array<std::size_t, kMaxRank> dims_{1, 1, 1, 1};
    std::uint8_t rank_ = 0;
};

// Persistent learnable leaf. Lives outside any Graph; graphs lease it per
// pass and backward accumulates into `grad`.
struct Parameter {
    std::string name;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;

    Parameter() = default;
    Parameter(std::string n, Shape s)
        : name(std::move(n)), shape(s), value(s.numel(), 0.0), grad(s.numel(), 0.0) {}

    std::size_t size() const { return value.size(); }
    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

class Graph;

// Lightweight handle to a node in a Graph. Valid until Graph::reset().
class Tensor {
public:
    Tensor() = default;

    bool defined() const { return g_ != nullptr; }
    const Shape& shape() const;
    std::size_t numel() const { return shape().numel(); }
    bool requires_grad() const;
    std::span<const double> values() const;
    std::span<const double> grad() const; // empty until backward touches this node
    double item() const;                  // value of a one-element tensor
    Graph& graph() const { return *g_; }
    std::uint32_t id() const { return id_; }

private:
    friend class Graph;
    Tensor(Graph* g, std::uint32_t id) : g_(g), id_(id) {}
    Graph* g_ = nullptr;
    std::uint32_t id_ = 0;
};

enum class Op : std::uint8_t {
    Leaf,
    Add, Sub, Mul,
    MatMul, Transpose, Reshape,
    Exp, Log, Tanh, Sigmoid, Softplus, Elu,
    PowScalar, Affine,
    Softmax, MaskedFill,
    SumAll, MeanAll, SumLast, ColMean,
    Concat, Slice, BroadcastRows,
    LayerNorm,
};

// Define-by-run tape. Records every executed op with what backward needs;
// nodes are appended in execution order, so reverse index order is reverse
// topological order. Rebuilt (reset) every training step.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Tensor leaf(const Shape& s, std::span<const double> data, bool requires_grad = false);
    Tensor constant_fill(const Shape& s, double v);
    Tensor zeros(const Shape& s) { return constant_fill(s, 0.0); }
    // Leased parameter leaf: requires_grad, and backward adds into p.grad.
    Tensor param(Parameter& p);

    // Reverse-mode sweep from a scalar output. Errors if the output is not a
    // one-element tensor or if called twice without reset().
    void backward(const Tensor& loss);

    void reset();
    std::size_t node_count() const { return nodes_.size(); }
    bool backward_done() const { return backward_done_; }

    // Internals below are used by the op catalogue in tensor.cpp; treat as
    // private elsewhere.
    struct Node {
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;    // allocated lazily during backward
        std::vector<double> aux;     // op scratch saved for backward
        Op op = Op::Leaf;
        bool requires_grad = false;
        std::uint8_t n_in = 0;
        std::array<std::uint32_t, 3> in{};
        std::uint32_t extra_off = 0; // extra inputs (Concat) in extra_inputs_
        std::uint32_t extra_cnt = 0;
        double a = 0.0, b = 0.0;     // op scalars
        std::uint32_t axis = 0;
        std::size_t start = 0, len = 0;
        Parameter* bound = nullptr;
    };

    Node& node(std::uint32_t id) { return nodes_[id]; }
    const Node& node(std::uint32_t id) const { return nodes_[id]; }
    Tensor finish(Node&& n);
    std::vector<std::uint32_t>& extra_inputs() { return extra_inputs_; }

private:
    friend class Tensor;
    std::vector<double>& grad_buf(std::uint32_t id);
    void backward_node(std::uint32_t id);

    std::vector<Node> nodes_;
    std::vector<std::uint32_t> extra_inputs_;
    bool backward_done_ = false;
};

// Op catalogue. All functions validate shapes and raise Error with the op
// name and both shapes on mismatch. add/sub/mul broadcast the right operand
// when its shape is a suffix of the left one (or a single element).
Tensor add(Tensor a, Tensor b);
Tensor sub(Tensor a, Tensor b);
Tensor mul(Tensor a, Tensor b);
Tensor matmul(Tensor a, Tensor b); // [m,k]x[k,n], [B,m,k]x[B,k,n], [B,m,k]x[k,n]
Tensor transpose(Tensor x);        // swaps the last two axes
Tensor reshape(Tensor x, const Shape& s);
Tensor exp(Tensor x);
Tensor log(Tensor x);
Tensor tanh(Tensor x);
Tensor sigmoid(Tensor x);
Tensor softplus(Tensor x);
Tensor elu(Tensor x);
Tensor pow_scalar(Tensor x, double p);
Tensor affine(Tensor x, double mul, double add);
Tensor softmax_lastaxis(Tensor x);
Tensor masked_fill(Tensor x, Tensor mask, double value); // fills where mask != 0
Tensor sum_all(Tensor x);
Tensor mean_all(Tensor x);
Tensor sum_lastaxis(Tensor x);
Tensor col_mean(Tensor x); // 2-D [N,D] -> [D], mean over rows
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);
Tensor slice(Tensor x, std::size_t axis, std::size_t start, std::size_t len);
Tensor broadcast_rows(Tensor v, std::size_t rows); // [C] -> [rows,C]
Tensor layer_norm(Tensor x, Tensor gain, Tensor bias, double eps = 1e-5);

inline Tensor operator+(Tensor a, Tensor b) { return add(a, b); }
inline Tensor operator-(Tensor a, Tensor b) { return sub(a, b); }
inline Tensor operator*(Tensor a, Tensor b) { return mul(a, b); }

} // namespace flowcast

#endif
