#pragma once

#include <map>
#include <string>
#include <vector>

#include "instructtime/prompting.hpp"
#include "instructtime/tape.hpp"
#include "instructtime/vq.hpp"

namespace instructtime::lm {

struct LmConfig {
    int d_model = 256;
    int n_layers = 4;
    int n_heads = 4;
    int context_window = 512;
    Real dropout = 0.1;
    // First width is the codebook dimension, last must equal d_model.
    std::vector<int> projector_hidden = {64, 128, 256};

    void validate() const;
};

// Resolves TS ids to frozen codebook rows through the vocabulary's ranges.
struct BoundCodebooks {
    struct Entry {
        Vocabulary::TsRange range;
        const vq::Codebook* codebook = nullptr;
    };
    std::vector<Entry> entries;

    static BoundCodebooks bind(const Vocabulary& vocab,
                               const std::map<std::string, const vq::Codebook*>& by_domain);
    const Entry* find(int id) const;
};

struct DecoderModel {
    LmConfig config;
    int text_vocab_size = 0;
    int full_vocab_size = 0;
    std::vector<nn::Parameter> params;
    std::string phase = "fresh";  // fresh | pretrained | sft:<domain>
    uint64_t vocab_hash = 0;
    uint64_t seed = 0;
    long long step_count = 0;

    static DecoderModel init(const LmConfig& config, const Vocabulary& vocab, uint64_t seed);
    std::vector<nn::Parameter*> parameters();
    nn::Parameter& find(const std::string& name);
    uint64_t param_hash() const;
};

struct ForwardPass {
    nn::Tape tape;
    nn::Tape::NodeId logits = -1;
    nn::Tape::NodeId hidden = -1;  // post-final-norm states
};

// dropout_rng enables training-mode dropout; null runs deterministic eval.
ForwardPass forward_tape(const PromptSequence& prompt, DecoderModel& model,
                         const BoundCodebooks& codebooks, Rng* dropout_rng);

// Embeddings after the hybrid front end plus positional rows.
nn::Tensor embed_hybrid(const PromptSequence& prompt, DecoderModel& model,
                        const BoundCodebooks& codebooks);

// Eval-mode logits [T, full_vocab].
nn::Tensor forward(const PromptSequence& prompt, DecoderModel& model,
                   const BoundCodebooks& codebooks);

nn::Tensor hidden_states(const PromptSequence& prompt, DecoderModel& model,
                         const BoundCodebooks& codebooks);

// Mean NLL of ids[i] under logits row i-1 over positions with loss_mask 1.
Real ar_loss(const nn::Tensor& logits, const PromptSequence& prompt);
int masked_target_count(const PromptSequence& prompt);

class GenerationOverflow : public Error {
  public:
    GenerationOverflow(const std::string& msg, std::vector<int> partial_ids)
        : Error(ErrKind::overflow, msg), partial(std::move(partial_ids)) {}
    std::vector<int> partial;
};

// Greedy decoding from the prefix; TS ids are masked out, EOS stops. Returns
// generated ids only (EOS included when produced).
std::vector<int> generate(const PromptSequence& prefix, DecoderModel& model,
                          const BoundCodebooks& codebooks, int max_new);

void save_model(const std::string& path, const DecoderModel& model);
DecoderModel load_model(const std::string& path);

}  // namespace instructtime::lm
