#pragma once

// Temporal DAB-style DETR: encoder with a per-position prediction head,
// decoder with anchor-carrying queries refined layer by layer. Every
// attention module records its head-averaged map on the tape so that the
// feedback losses can differentiate through it.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pfdetr/autodiff.hpp"
#include "pfdetr/interval.hpp"
#include "pfdetr/tensor.hpp"

namespace pfdetr {

struct ModelConfig {
    std::size_t input_dim = 16;
    std::size_t model_dim = 128;
    std::size_t heads = 8;
    std::size_t ffn_dim = 256;
    std::size_t encoder_layers = 2;
    std::size_t decoder_layers = 4;
    std::size_t queries = 40;
    std::size_t classes = 3;
    /// Size of the one-to-many query group; 0 disables hybrid matching.
    std::size_t hybrid_queries = 0;
    double anchor_width = 0.1;
    double encoder_anchor_width = 0.05;

    void validate() const;
};

enum class AttnKind { EncoderSelf, DecoderSelf, DecoderCross };

std::string to_string(AttnKind kind);

/// Plain snapshot of a recorded attention map.
struct AttentionMap {
    Tensor matrix;
    AttnKind kind = AttnKind::EncoderSelf;
    std::size_t layer = 0;
    bool head_averaged = true;
};

struct RecordedAttention {
    ad::Var map;
    AttnKind kind = AttnKind::EncoderSelf;
    std::size_t layer = 0;

    AttentionMap snapshot() const { return {map.value(), kind, layer, true}; }
};

/// Predictions of one decoder layer for one query group.
struct LayerPrediction {
    ad::Var logits;     ///< N×C class logits
    ad::Var intervals;  ///< N×2 (start, end), normalized and clamped to [0,1]
    ad::Var anchors;    ///< N×2 refined (center, width) in inverse-sigmoid space
};

struct EncoderPrediction {
    ad::Var confidence_logits;  ///< T×1
    ad::Var intervals;          ///< T×2
};

struct ModelOutput {
    std::vector<LayerPrediction> decoder;  ///< one per decoder layer, main queries
    std::vector<LayerPrediction> hybrid;   ///< one per decoder layer, training only
    std::optional<EncoderPrediction> encoder;  ///< training only
    std::vector<RecordedAttention> encoder_self;
    std::vector<RecordedAttention> decoder_self;
    std::vector<RecordedAttention> decoder_cross;
    ad::Var memory;
};

struct AttentionResult {
    ad::Var output;
    ad::Var map;
};

/// softmax(QKᵀ/√D)·V with D the width of Q.
AttentionResult scaled_attention(ad::Var q, ad::Var k, ad::Var v, const Tensor* mask = nullptr);

/// Projects q/k/v, runs `heads` scaled attentions of width D/heads, concatenates
/// and applies the output projection. The returned map is the head mean.
AttentionResult multi_head_attention(ad::Tape& tape, const ad::ParamStore& store,
                                     const std::string& prefix, ad::Var x_q, ad::Var x_k,
                                     ad::Var x_v, std::size_t heads, const Tensor* mask = nullptr);

/// Sinusoidal features of normalized positions; column 2i is sin(p·f_i) and
/// column 2i+1 is cos(p·f_i) with f_i from positional_frequency().
Tensor positional_encoding(std::span<const double> positions, std::size_t dim);
double positional_frequency(std::size_t i, std::size_t dim);

/// Realizes (center, width) as a clipped interval of width at least 1e-4.
Interval anchor_to_interval(double center, double width);

inline constexpr double kMinIntervalWidth = 1e-4;

double inverse_sigmoid(double p);

class DetrModel {
public:
    DetrModel(ModelConfig config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    ad::ParamStore& params() { return params_; }
    const ad::ParamStore& params() const { return params_; }

    /// Runs the network on a T×input_dim feature matrix. Training passes also
    /// produce encoder predictions and the hybrid group.
    ModelOutput forward(ad::Tape& tape, const Tensor& features, bool training) const;

private:
    void init(std::uint64_t seed);

    ModelConfig config_;
    ad::ParamStore params_;
};

/// Decodes a layer's interval tensor into plain intervals.
std::vector<Interval> intervals_of(const Tensor& se);

}  // namespace pfdetr
