#ifndef FLOWCAST_NN_HPP
#define FLOWCAST_NN_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "flowcast/random.hpp"
#include "flowcast/tensor.hpp"

namespace flowcast {

void init_glorot(Parameter& p, RandomStream& rng);

// Fully connected layer, weight [in, out] + bias [out]. Accepts [.., in].
struct Dense {
    Parameter weight;
    Parameter bias;

    Dense() = default;
    Dense(const std::string& name, std::size_t in, std::size_t out, RandomStream& rng,
          bool zero_init = false);

    std::size_t in_dim() const { return weight.shape[0]; }
    std::size_t out_dim() const { return weight.shape[1]; }
    Tensor forward(Graph& g, Tensor x);
    void collect(std::vector<Parameter*>& out);
};

// Dense layer with a fixed binary connectivity mask on the weight; used by
// the autoregressive flow nets (MADE-style masking).
struct MaskedDense {
    Parameter weight;
    Parameter bias;
    std::vector<double> mask; // [in, out], 1 = connection allowed

    MaskedDense() = default;
    MaskedDense(const std::string& name, std::size_t in, std::size_t out,
                std::vector<double> mask, RandomStream& rng, bool zero_init = false);

    Tensor forward(Graph& g, Tensor x);
    void collect(std::vector<Parameter*>& out);
};

// One-hidden-layer net with ELU, the function approximator shape used for the
// flow's scale/shift maps: in -> hidden -> out.
struct Mlp {
    Dense hidden;
    Dense output;

    Mlp() = default;
    Mlp(const std::string& name, std::size_t in, std::size_t hidden_dim, std::size_t out,
        RandomStream& rng, bool zero_init_output = false);

    Tensor forward(Graph& g, Tensor x);
    void collect(std::vector<Parameter*>& out);
};

// GRU cell; gate packing r,z,n with separate input/hidden biases.
struct GruCell {
    Parameter w_ih; // [in, 3H]
    Parameter w_hh; // [H, 3H]
    Parameter b_ih; // [3H]
    Parameter b_hh; // [3H]

    GruCell() = default;
    GruCell(const std::string& name, std::size_t in, std::size_t hidden, RandomStream& rng);

    std::size_t hidden_dim() const { return w_hh.shape[0]; }
    Tensor step(Graph& g, Tensor x, Tensor h);
    void collect(std::vector<Parameter*>& out);
};

// LSTM cell; gate packing i,f,g,o, forget-gate bias initialized to 1.
struct LstmCell {
    Parameter w_ih; // [in, 4H]
    Parameter w_hh; // [H, 4H]
    Parameter bias; // [4H]

    LstmCell() = default;
    LstmCell(const std::string& name, std::size_t in, std::size_t hidden, RandomStream& rng);

    std::size_t hidden_dim() const { return w_hh.shape[0]; }
    // Returns {h', c'}.
    std::pair<Tensor, Tensor> step(Graph& g, Tensor x, Tensor h, Tensor c);
    void collect(std::vector<Parameter*>& out);
};

struct LayerNormLayer {
    Parameter gain;
    Parameter bias;

    LayerNormLayer() = default;
    LayerNormLayer(const std::string& name, std::size_t dim);

    Tensor forward(Graph& g, Tensor x);
    void collect(std::vector<Parameter*>& out);
};

// Multi-head scaled dot-product attention over [B, L, d_model] sequences.
// `mask` (optional, [Lq, Lk], 1 = blocked) is applied additively as -1e30
// before the softmax. `score_macs`, when given, accumulates the
// multiply-accumulate count of the score matrices Q K^T.
struct MultiHeadAttention {
    std::size_t d_model = 0;
    std::size_t heads = 0;
    Dense wq, wk, wv, wo;

    MultiHeadAttention() = default;
    MultiHeadAttention(const std::string& name, std::size_t d_model, std::size_t heads,
                       RandomStream& rng);

    std::size_t head_dim() const { return heads == 0 ? 0 : d_model / heads; }
    Tensor forward(Graph& g, Tensor q_in, Tensor kv_in, const Tensor* mask,
                   std::uint64_t* score_macs = nullptr,
                   std::vector<Tensor>* attn_out = nullptr);
    void collect(std::vector<Parameter*>& out);
};

// Trainable embedding table [cardinality, width].
struct Embedding {
    Parameter table;

    Embedding() = default;
    Embedding(const std::string& name, std::size_t cardinality, std::size_t width,
              RandomStream& rng);

    std::size_t width() const { return table.shape[1]; }
    // Concatenated embedding vectors for `ids`, shape [ids.size() * width].
    Tensor lookup_concat(Graph& g, const std::vector<std::size_t>& ids);
    void collect(std::vector<Parameter*>& out);
};

// Inverted dropout; identity when not training or rate == 0.
Tensor dropout(Graph& g, Tensor x, double rate, RandomStream& rng, bool training);

} // namespace flowcast

#endif
