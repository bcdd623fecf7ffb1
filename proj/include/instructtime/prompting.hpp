#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "instructtime/dataset.hpp"

namespace instructtime {

// Unified id space: specials first, then word-level text tokens in
// lexicographic order, then one contiguous TS block per domain in declared
// order.
struct Vocabulary {
    static constexpr int kBos = 0;
    static constexpr int kEos = 1;
    static constexpr int kPad = 2;
    static constexpr int kBet = 3;
    static constexpr int kEet = 4;
    static constexpr int kNumSpecials = 5;

    struct TsRange {
        std::string domain;
        int begin = 0;
        int size = 0;
    };

    std::map<std::string, int> text_ids;
    std::vector<std::string> text_by_offset;  // surface for id kNumSpecials + i
    std::vector<TsRange> ts_ranges;

    int text_vocab_size() const { return kNumSpecials + static_cast<int>(text_by_offset.size()); }
    int total_size() const;
    bool is_ts(int id) const;
    const TsRange* range_of(int id) const;
    const TsRange* range_for_domain(const std::string& domain) const;
    int text_id(const std::string& token) const;  // throws on out-of-vocabulary
    std::string surface(int id) const;
    uint64_t hash() const;
};

Vocabulary build_vocabulary(const std::vector<DomainSpec>& domains,
                            const std::vector<std::string>& extra_texts = {});

// Tokenizes text and maps every word to its id; throws on out-of-vocabulary.
std::vector<int> tokenize_text(const std::string& text, const Vocabulary& vocab);

enum class SegTag : uint8_t { special, instruction, context, ts, answer, pad };
const char* seg_tag_name(SegTag tag);

struct PromptSequence {
    std::vector<int> ids;
    std::vector<uint8_t> loss_mask;
    std::vector<SegTag> tags;
    std::string domain;

    size_t size() const { return ids.size(); }
};

enum class PromptMode { pretrain, sft_train, sft_infer };

// Layout: BOS, task description plus candidate-label listing, context pairs,
// <BET> TS tokens <EET>, the answer stem, then (outside sft_infer) the label
// sentence(s) joined by "and" and EOS. Masks: pretrain = every non-PAD
// position after BOS; sft_train = answer segment only; sft_infer = none.
PromptSequence build_prompt(const TimeSeriesInstance& instance, const std::vector<int>& codes,
                            const DomainSpec& spec, const Vocabulary& vocab, PromptMode mode);

// Right-pads with PAD (mask 0) to window; longer prompts are rejected with
// an error naming the segment at the overflow boundary.
PromptSequence pad_or_reject(const PromptSequence& prompt, int window);

// Keeps BOS, <BET>, TS span, <EET>, EOS from a pretrain-mode prompt.
PromptSequence strip_text(const PromptSequence& prompt);

// Debug rendering: one line per position, `pos | id | tag | mask | surface`.
std::string dump_prompt(const PromptSequence& prompt, const Vocabulary& vocab);

}  // namespace instructtime
