#pragma once

#include <optional>
#include <string>
#include <vector>

#include "instructtime/dataset.hpp"
#include "instructtime/rng.hpp"
#include "instructtime/tensor.hpp"

namespace instructtime::vq {

struct Codebook {
    nn::Tensor vectors;             // [K, d_code], always equal to smoothed EMA state
    std::vector<Real> ema_counts;   // K
    nn::Tensor ema_sums;            // [K, d_code]
    std::vector<long long> usage_counts;  // K, patches quantized since reset
    Real decay = 0.99;
    Real laplace_eps = 1e-5;

    int size() const { return vectors.rows(); }
    int dim() const { return vectors.cols(); }

    static Codebook init(int K, int d_code, Rng& rng, Real decay = 0.99, Real laplace_eps = 1e-5);

    // Recomputes every row as ema_sums / Laplace-smoothed ema_counts.
    void refresh_vectors();
};

// Patch projection into d_code, then dilated causal convolution blocks over
// the patch sequence; the decoder mirrors the encoder and projects back to
// [L, H]. Blocks are residual: x + conv(gelu(conv(x))).
struct VqEncoderDecoder {
    int patch_size = 0;
    int channels = 0;
    int d_code = 0;
    int n_blocks = 3;
    int kernel = 3;
    std::vector<nn::Parameter> params;

    static VqEncoderDecoder init(int patch_size, int channels, int d_code, Rng& rng,
                                 int n_blocks = 3, int kernel = 3);
    std::vector<nn::Parameter*> parameters();
    nn::Parameter& find(const std::string& name);
};

struct VqLossReport {
    Real reconstruction = 0;
    Real codebook_term = 0;
    Real commitment_term = 0;
    Real beta = 0;
    Real total = 0;
};

// Quantization decisions frozen at one forward pass; the contract for
// finite-difference checks of the straight-through gradient.
struct QuantPlan {
    std::vector<int> codes;
    nn::Tensor delta;      // [P, d_code], e_k - z_e at plan time
    nn::Tensor z_frozen;   // [P, d_code], encoder output at plan time
    nn::Tensor e_rows;     // [P, d_code], selected codebook rows
};

struct VqForwardResult {
    nn::Tensor reconstruction;  // [L, H]
    std::vector<int> codes;
    VqLossReport report;
};

struct VqStep {
    VqForwardResult result;
    QuantPlan plan;
    nn::Tensor z_e;  // [P, d_code]
};

// Patch projection only: P rows, each depending solely on its own patch.
nn::Tensor patch_embed(const TimeSeriesInstance& instance, VqEncoderDecoder& model);

// Full encoder (patch projection + causal blocks).
nn::Tensor encode(const TimeSeriesInstance& instance, VqEncoderDecoder& model);

// Nearest row by squared distance, ties to the lowest index.
std::pair<int, nn::Tensor> quantize(const std::vector<Real>& z, const Codebook& codebook);

// Forward (and optionally backward: gradients of reconstruction + beta *
// commitment accumulate into model parameter grads, scaled by grad_scale).
VqStep vq_step(const TimeSeriesInstance& instance, VqEncoderDecoder& model,
               const Codebook& codebook, Real beta, bool with_grad, Real grad_scale = 1.0);

VqForwardResult vq_forward(const TimeSeriesInstance& instance, VqEncoderDecoder& model,
                           const Codebook& codebook, Real beta);

// Total loss under a frozen plan: reconstruction of decode(z + plan.delta),
// constant codebook term, commitment against plan.e_rows. The function whose
// finite differences the straight-through gradient must match.
Real vq_total_with_plan(const TimeSeriesInstance& instance, VqEncoderDecoder& model,
                        const QuantPlan& plan, Real beta);

// One EMA step over a batch of encoder outputs and their assigned codes.
void ema_update(Codebook& codebook, const nn::Tensor& z, const std::vector<int>& codes);

std::vector<int> tokenize(const TimeSeriesInstance& instance, VqEncoderDecoder& model,
                          const Codebook& codebook);

struct VqTrainConfig {
    int epochs = 30;
    int batch_size = 16;
    Real learning_rate = 1e-3;
    Real beta = 0.25;
    Real decay = 0.99;
    Real laplace_eps = 1e-5;
    int codebook_size = 32;
    int d_code = 64;
    int n_blocks = 3;
    int kernel = 3;
    bool dead_code_revival = true;
    Real grad_clip = 1.0;
};

struct TokenizerArtifacts {
    VqEncoderDecoder model;
    Codebook codebook;
    std::vector<VqLossReport> history;  // per-epoch means
    std::optional<int> diverged_at_step;
};

TokenizerArtifacts train_tokenizer(const CorpusSplit& split, const DomainSpec& spec,
                                   const VqTrainConfig& config, uint64_t seed);

// Mean reconstruction MSE over a set of instances.
Real reconstruction_mse(const std::vector<TimeSeriesInstance>& instances, VqEncoderDecoder& model,
                        const Codebook& codebook);

void save_tokenizer(const std::string& path, const TokenizerArtifacts& artifacts,
                    const DomainSpec& spec, const VqTrainConfig& config, uint64_t seed);
TokenizerArtifacts load_tokenizer(const std::string& path, const DomainSpec& spec);

}  // namespace instructtime::vq
