#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "instructtime/dataset.hpp"
#include "instructtime/eval.hpp"
#include "instructtime/lm.hpp"
#include "instructtime/prompting.hpp"
#include "instructtime/vq.hpp"

namespace instructtime::train {

using TokenizerMap = std::map<std::string, vq::TokenizerArtifacts>;

struct TrainConfig {
    std::string phase = "pretrain";  // pretrain | sft
    Real learning_rate = 5e-5;
    int batch_size = 16;
    int epochs = 10;
    Real warmup_ratio = 0.05;
    Real weight_decay = 1e-5;
    Real grad_clip = 1.0;
    Real val_fraction = 0.1;
    bool text_in_pretrain = true;
    uint64_t seed = 0;

    void validate() const;
};

struct RunRecord {
    std::vector<Real> step_losses;       // token-pooled batch losses
    std::vector<Real> epoch_val_losses;  // empty when no holdout
    int best_epoch = -1;                 // 1-indexed; -1 when untracked
    uint64_t data_order_hash = 0;        // over instance visit order, all epochs
    Real wall_seconds = 0;
    std::string checkpoint_path;
};

// Cross-domain autoregressive training on pooled prompts. Every corpus
// domain needs a tokenizer; ends with model.phase == "pretrained".
RunRecord pretrain(const Corpus& corpus, TokenizerMap& tokenizers, lm::DecoderModel& model,
                   const Vocabulary& vocab, const TrainConfig& config);

// Answer-only supervision on one domain, starting from the given model
// (fresh or pretrained); ends with model.phase == "sft:<domain>".
// epochs == 0 leaves the parameters untouched.
RunRecord finetune(const DomainData& domain, vq::TokenizerArtifacts& tokenizer,
                   lm::DecoderModel& model, const Vocabulary& vocab, const TrainConfig& config);

// Generation metrics on every domain's test split from a single pretrained
// model; requires model.phase == "pretrained".
std::vector<eval::MetricsReport> evaluate_universal(const Corpus& corpus,
                                                    TokenizerMap& tokenizers,
                                                    lm::DecoderModel& model,
                                                    const Vocabulary& vocab, int max_new = 0);

struct GridSpec {
    std::vector<int> codebook_sizes = {32};
    std::vector<int> patch_sizes;  // empty keeps each domain's own patch
    std::vector<Real> fractions = {1.0};
    std::vector<bool> text_options = {true};
    std::vector<bool> pretrain_options = {true};
};

struct GridDeps {
    vq::VqTrainConfig tokenizer;
    lm::LmConfig model;
    TrainConfig pretrain_cfg;
    TrainConfig sft_cfg;
    int max_new = 0;
};

// Full cross product; one result row per domain per cell. A failing cell
// contributes rows with setting "failed:<kind>" and empty metrics, and the
// sweep keeps going.
std::vector<eval::ResultRow> run_ablation_grid(const Corpus& corpus, const GridSpec& grid,
                                               const GridDeps& deps, uint64_t seed);

}  // namespace instructtime::train
