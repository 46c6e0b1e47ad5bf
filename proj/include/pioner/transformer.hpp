#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "pioner/core.hpp"

namespace pioner {

struct DecoderShape {
    int vocab = 0;
    int d_model = 256;
    int n_layer = 4;
    int n_head = 4;
    int n_positions = 65; // prefix slot + max_len tokens
    int prefix_dim = 0;

    bool operator==(const DecoderShape&) const = default;
    json to_json() const;
    static DecoderShape from_json(const json& j);
};

// GPT-2 style pre-LN decoder-only transformer. The prefix embedding enters as
// one projected token at position 0; token logits use the tied input
// embedding. All parameters live in one flat buffer so optimizers and
// serializers can treat them uniformly.
class PrefixDecoder {
public:
    using Mat = Eigen::MatrixXd;
    using MapMat = Eigen::Map<Mat>;
    using ConstMapMat = Eigen::Map<const Mat>;
    using MapVec = Eigen::Map<Eigen::VectorXd>;
    using ConstMapVec = Eigen::Map<const Eigen::VectorXd>;

    PrefixDecoder() = default;
    PrefixDecoder(DecoderShape shape, std::uint64_t seed);
    PrefixDecoder(DecoderShape shape, std::vector<double> params);

    const DecoderShape& shape() const { return shape_; }
    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }
    std::size_t param_count() const { return params_.size(); }

    // Teacher-forced cross entropy of `tokens` followed by end-of-sequence,
    // conditioned on `prefix`. Returns the summed loss over the targets and,
    // when requested, accumulates `weight` * d(sum loss) into `grad`
    // (param layout) and `prefix_grad` (length prefix_dim).
    double loss(const Vector& prefix, std::span<const int> tokens, int eos, double weight = 1.0,
                std::vector<double>* grad = nullptr, Vector* prefix_grad = nullptr) const;

    // Incremental decoding state (per-layer key/value caches).
    struct State {
        std::vector<Mat> keys;
        std::vector<Mat> values;
        int length = 0;
    };
    // Starts decoding; returns next-token log-probabilities after the prefix.
    Eigen::VectorXd start(const Vector& prefix, State& state) const;
    // Appends `token` and returns the following log-probabilities.
    Eigen::VectorXd step(int token, State& state) const;

private:
    struct Offsets {
        std::size_t prefix_w, prefix_b, wte, wpe;
        struct Layer {
            std::size_t ln1_g, ln1_b, attn_w, attn_b, proj_w, proj_b;
            std::size_t ln2_g, ln2_b, fc_w, fc_b, out_w, out_b;
        };
        std::vector<Layer> layers;
        std::size_t lnf_g, lnf_b, total;
    };
    static Offsets layout(const DecoderShape& s);

    ConstMapMat mat(std::size_t off, int rows, int cols) const {
        return ConstMapMat(params_.data() + off, rows, cols);
    }
    ConstMapVec vec(std::size_t off, int n) const { return ConstMapVec(params_.data() + off, n); }

    Eigen::VectorXd forward_row(Eigen::RowVectorXd x, State& state) const;

    DecoderShape shape_;
    Offsets off_{};
    std::vector<double> params_;
};

} // namespace pioner
