#include "instructtime/prompting.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "instructtime/common.hpp"

namespace instructtime {

namespace {

// Words the prompt template itself contributes to the vocabulary.
const char* kTemplateText = "the possible categories are : ; . is answer and";

}  // namespace

int Vocabulary::total_size() const {
    int n = text_vocab_size();
    for (const auto& r : ts_ranges) n += r.size;
    return n;
}

bool Vocabulary::is_ts(int id) const { return range_of(id) != nullptr; }

const Vocabulary::TsRange* Vocabulary::range_of(int id) const {
    for (const auto& r : ts_ranges)
        if (id >= r.begin && id < r.begin + r.size) return &r;
    return nullptr;
}

const Vocabulary::TsRange* Vocabulary::range_for_domain(const std::string& domain) const {
    for (const auto& r : ts_ranges)
        if (r.domain == domain) return &r;
    return nullptr;
}

int Vocabulary::text_id(const std::string& token) const {
    auto it = text_ids.find(token);
    if (it == text_ids.end())
        throw Error(ErrKind::data, "out-of-vocabulary token '" + token + "'");
    return it->second;
}

std::string Vocabulary::surface(int id) const {
    switch (id) {
        case kBos: return "BOS";
        case kEos: return "EOS";
        case kPad: return "PAD";
        case kBet: return "<BET>";
        case kEet: return "<EET>";
        default: break;
    }
    const int off = id - kNumSpecials;
    if (off >= 0 && off < static_cast<int>(text_by_offset.size())) return text_by_offset[off];
    if (const TsRange* r = range_of(id))
        return "ts:" + r->domain + ":" + std::to_string(id - r->begin);
    throw Error(ErrKind::argument, "id " + std::to_string(id) + " outside vocabulary");
}

uint64_t Vocabulary::hash() const {
    uint64_t h = fnv1a("vocab");
    h = hash_combine(h, static_cast<uint64_t>(kNumSpecials));
    for (const auto& t : text_by_offset) h = fnv1a(t, hash_combine(h, 0x1f));
    for (const auto& r : ts_ranges) {
        h = fnv1a(r.domain, h);
        h = hash_combine(h, static_cast<uint64_t>(r.begin));
        h = hash_combine(h, static_cast<uint64_t>(r.size));
    }
    return h;
}

Vocabulary build_vocabulary(const std::vector<DomainSpec>& domains,
                            const std::vector<std::string>& extra_texts) {
    if (domains.empty()) throw Error(ErrKind::argument, "cannot build vocabulary for no domains");
    std::set<std::string> words;
    for (const auto& w : tokenize_words(kTemplateText)) words.insert(w);
    for (const auto& d : domains) {
        for (const auto& w : tokenize_words(d.task_description)) words.insert(w);
        for (const auto& [id, text] : d.labels)
            for (const auto& w : tokenize_words(text)) words.insert(w);
        for (const auto& key : d.context_schema)
            for (const auto& w : tokenize_words(key)) words.insert(w);
    }
    for (const auto& t : extra_texts)
        for (const auto& w : tokenize_words(t)) words.insert(w);

    Vocabulary v;
    int next = Vocabulary::kNumSpecials;
    for (const auto& w : words) {
        v.text_ids.emplace(w, next++);
        v.text_by_offset.push_back(w);
    }
    for (const auto& d : domains) {
        v.ts_ranges.push_back({d.name, next, d.codebook_size});
        next += d.codebook_size;
    }
    return v;
}

std::vector<int> tokenize_text(const std::string& text, const Vocabulary& vocab) {
    std::vector<int> out;
    for (const auto& w : tokenize_words(text)) out.push_back(vocab.text_id(w));
    return out;
}

const char* seg_tag_name(SegTag tag) {
    switch (tag) {
        case SegTag::special: return "special";
        case SegTag::instruction: return "instruction";
        case SegTag::context: return "context";
        case SegTag::ts: return "ts";
        case SegTag::answer: return "answer";
        case SegTag::pad: return "pad";
    }
    return "unknown";
}

PromptSequence build_prompt(const TimeSeriesInstance& instance, const std::vector<int>& codes,
                            const DomainSpec& spec, const Vocabulary& vocab, PromptMode mode) {
    PromptSequence ps;
    ps.domain = spec.name;
    auto push = [&](int id, SegTag tag) {
        ps.ids.push_back(id);
        ps.tags.push_back(tag);
    };
    auto push_text = [&](const std::string& text, SegTag tag) {
        for (int id : tokenize_text(text, vocab)) push(id, tag);
    };

    push(Vocabulary::kBos, SegTag::special);
    push_text(spec.task_description, SegTag::instruction);
    push_text("the possible categories are :", SegTag::instruction);
    for (size_t i = 0; i < spec.labels.size(); ++i) {
        push_text(spec.labels[i].second, SegTag::instruction);
        push_text(i + 1 < spec.labels.size() ? ";" : ".", SegTag::instruction);
    }
    for (const auto& [key, value] : instance.context) {
        push_text(key, SegTag::context);
        push_text("is", SegTag::context);
        push_text(value, SegTag::context);
        push_text(".", SegTag::context);
    }

    const Vocabulary::TsRange* range = vocab.range_for_domain(spec.name);
    if (!range) throw Error(ErrKind::config, "domain '" + spec.name + "' has no TS id range");
    push(Vocabulary::kBet, SegTag::special);
    for (int code : codes) {
        if (code < 0 || code >= range->size)
            throw Error(ErrKind::data,
                        "code " + std::to_string(code) + " outside codebook of " + spec.name);
        push(range->begin + code, SegTag::ts);
    }
    push(Vocabulary::kEet, SegTag::special);
    push_text("the answer is", SegTag::instruction);

    if (mode != PromptMode::sft_infer) {
        for (size_t i = 0; i < instance.labels.size(); ++i) {
            const std::string* sentence = spec.sentence_for(instance.labels[i]);
            if (!sentence)
                throw Error(ErrKind::data, "instance label '" + instance.labels[i] +
                                               "' missing from domain '" + spec.name + "'");
            push_text(*sentence, SegTag::answer);
            if (i + 1 < instance.labels.size()) push_text("and", SegTag::answer);
        }
        push(Vocabulary::kEos, SegTag::answer);
    }

    ps.loss_mask.assign(ps.ids.size(), 0);
    switch (mode) {
        case PromptMode::pretrain:
            for (size_t i = 1; i < ps.ids.size(); ++i)
                ps.loss_mask[i] = ps.ids[i] != Vocabulary::kPad ? 1 : 0;
            break;
        case PromptMode::sft_train:
            for (size_t i = 0; i < ps.ids.size(); ++i)
                ps.loss_mask[i] = ps.tags[i] == SegTag::answer ? 1 : 0;
            break;
        case PromptMode::sft_infer:
            break;
    }
    return ps;
}

PromptSequence pad_or_reject(const PromptSequence& prompt, int window) {
    if (static_cast<int>(prompt.size()) > window)
        throw Error(ErrKind::overflow,
                    "prompt length " + std::to_string(prompt.size()) + " exceeds window " +
                        std::to_string(window) + "; overflow begins in segment '" +
                        seg_tag_name(prompt.tags[window]) + "'");
    PromptSequence out = prompt;
    while (static_cast<int>(out.size()) < window) {
        out.ids.push_back(Vocabulary::kPad);
        out.loss_mask.push_back(0);
        out.tags.push_back(SegTag::pad);
    }
    return out;
}

PromptSequence strip_text(const PromptSequence& prompt) {
    PromptSequence out;
    out.domain = prompt.domain;
    for (size_t i = 0; i < prompt.size(); ++i) {
        const int id = prompt.ids[i];
        const bool keep = id == Vocabulary::kBos || id == Vocabulary::kBet ||
                          id == Vocabulary::kEet || id == Vocabulary::kEos ||
                          prompt.tags[i] == SegTag::ts;
        if (!keep) continue;
        out.ids.push_back(id);
        out.tags.push_back(prompt.tags[i] == SegTag::ts ? SegTag::ts : SegTag::special);
    }
    out.loss_mask.assign(out.ids.size(), 0);
    for (size_t i = 1; i < out.ids.size(); ++i) out.loss_mask[i] = 1;
    return out;
}

std::string dump_prompt(const PromptSequence& prompt, const Vocabulary& vocab) {
    std::ostringstream os;
    for (size_t i = 0; i < prompt.size(); ++i)
        os << i << " | " << prompt.ids[i] << " | " << seg_tag_name(prompt.tags[i]) << " | "
           << static_cast<int>(prompt.loss_mask[i]) << " | " << vocab.surface(prompt.ids[i])
           << '\n';
    return os.str();
}

}  // namespace instructtime
