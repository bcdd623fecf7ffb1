#include "instructtime/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include "instructtime/optim.hpp"

namespace instructtime::train {

void TrainConfig::validate() const {
    if (phase != "pretrain" && phase != "sft")
        throw Error(ErrKind::config, "phase must be pretrain or sft, got '" + phase + "'");
    if (!(learning_rate > 0)) throw Error(ErrKind::config, "learning_rate must be positive");
    if (batch_size < 1) throw Error(ErrKind::config, "batch_size must be at least 1");
    if (epochs < 0) throw Error(ErrKind::config, "epochs must be non-negative");
    if (warmup_ratio < 0 || warmup_ratio > 1)
        throw Error(ErrKind::config, "warmup_ratio must lie in [0, 1]");
    if (weight_decay < 0) throw Error(ErrKind::config, "weight_decay must be non-negative");
    if (!(grad_clip > 0)) throw Error(ErrKind::config, "grad_clip must be positive");
    if (val_fraction < 0 || val_fraction >= 1)
        throw Error(ErrKind::config, "val_fraction must lie in [0, 1)");
}

namespace {

struct TrainItem {
    PromptSequence prompt;
    int masked = 0;
};

// Prompts are trained unpadded; the window check still applies so anything
// that would not batch at full padding is rejected up front.
TrainItem make_item(const TimeSeriesInstance& instance, vq::TokenizerArtifacts& tokenizer,
                    const DomainSpec& spec, const Vocabulary& vocab, PromptMode mode,
                    bool keep_text, int window) {
    const std::vector<int> codes = vq::tokenize(instance, tokenizer.model, tokenizer.codebook);
    PromptSequence prompt = build_prompt(instance, codes, spec, vocab, mode);
    if (!keep_text) prompt = strip_text(prompt);
    pad_or_reject(prompt, window);
    TrainItem item;
    item.masked = lm::masked_target_count(prompt);
    item.prompt = std::move(prompt);
    return item;
}

Real holdout_loss(std::vector<TrainItem>& items, lm::DecoderModel& model,
                  const lm::BoundCodebooks& bound) {
    Real nll_sum = 0;
    long long count = 0;
    for (auto& item : items) {
        if (item.masked == 0) continue;
        const nn::Tensor logits = lm::forward(item.prompt, model, bound);
        nll_sum += lm::ar_loss(logits, item.prompt) * item.masked;
        count += item.masked;
    }
    if (count == 0) return std::numeric_limits<Real>::quiet_NaN();
    return nll_sum / static_cast<Real>(count);
}

RunRecord train_loop(std::vector<TrainItem>& train_items, std::vector<TrainItem>& val_items,
                     lm::DecoderModel& model, const lm::BoundCodebooks& bound,
                     const TrainConfig& config, const std::string& phase_label) {
    const auto t0 = std::chrono::steady_clock::now();
    RunRecord rec;
    rec.data_order_hash = fnv1a("data-order");

    if (train_items.empty()) throw Error(ErrKind::data, "no training prompts");
    const int n = static_cast<int>(train_items.size());
    const int steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
    const int total_steps = steps_per_epoch * config.epochs;

    if (config.epochs > 0) {
        const int warmup = nn::warmup_steps_for(config.warmup_ratio, total_steps);
        auto params = model.parameters();
        nn::AdamConfig adam;
        adam.weight_decay = config.weight_decay;

        Rng order_rng(derive_seed(config.seed, "order:" + phase_label));
        Rng dropout_rng(derive_seed(config.seed, "dropout:" + phase_label));

        Real best_val = std::numeric_limits<Real>::infinity();
        std::vector<nn::Tensor> best_values;
        int adam_t = 0;

        for (int epoch = 1; epoch <= config.epochs; ++epoch) {
            std::vector<int> order(n);
            std::iota(order.begin(), order.end(), 0);
            order_rng.shuffle(order);
            for (int idx : order)
                rec.data_order_hash = hash_combine(rec.data_order_hash, static_cast<uint64_t>(idx));

            for (int start = 0; start < n; start += config.batch_size) {
                const int end = std::min(n, start + config.batch_size);
                long long total_masked = 0;
                for (int i = start; i < end; ++i) total_masked += train_items[order[i]].masked;
                if (total_masked == 0) continue;

                for (auto* p : params) p->zero_grad();
                Real nll_sum = 0;
                for (int i = start; i < end; ++i) {
                    TrainItem& item = train_items[order[i]];
                    if (item.masked == 0) continue;
                    auto fp = lm::forward_tape(item.prompt, model, bound, &dropout_rng);
                    const auto ce = fp.tape.cross_entropy_next_token(fp.logits, item.prompt.ids,
                                                                     item.prompt.loss_mask);
                    nll_sum += fp.tape.scalar(ce);
                    fp.tape.backward(ce, 1.0 / static_cast<Real>(total_masked));
                }
                const Real loss = nll_sum / static_cast<Real>(total_masked);
                if (!std::isfinite(loss))
                    throw Error(ErrKind::divergence, phase_label + " loss diverged at step " +
                                                         std::to_string(adam_t + 1));
                ++adam_t;
                nn::clip_global_norm(params, config.grad_clip);
                adam.lr = nn::warmup_cosine_lr(config.learning_rate, adam_t, warmup, total_steps);
                nn::adamw_step(params, adam, adam_t);
                rec.step_losses.push_back(loss);
            }

            if (!val_items.empty()) {
                const Real vloss = holdout_loss(val_items, model, bound);
                rec.epoch_val_losses.push_back(vloss);
                // Strict improvement keeps the earliest best epoch on ties.
                if (std::isfinite(vloss) && vloss < best_val) {
                    best_val = vloss;
                    rec.best_epoch = epoch;
                    best_values.clear();
                    for (auto* p : params) best_values.push_back(p->value);
                }
            }
        }

        if (rec.best_epoch > 0)
            for (size_t i = 0; i < params.size(); ++i) params[i]->value = best_values[i];
        model.step_count += adam_t;
    }

    rec.wall_seconds =
        std::chrono::duration<Real>(std::chrono::steady_clock::now() - t0).count();
    return rec;
}

// Splits one domain's train instances into (train, holdout) prompt items.
void split_items(const std::vector<TimeSeriesInstance>& instances,
                 vq::TokenizerArtifacts& tokenizer, const DomainSpec& spec,
                 const Vocabulary& vocab, PromptMode mode, const TrainConfig& config,
                 int window, std::vector<TrainItem>& train_out, std::vector<TrainItem>& val_out) {
    const bool keep_text = mode != PromptMode::pretrain || config.text_in_pretrain;
    std::vector<char> in_val(instances.size(), 0);
    if (config.val_fraction > 0 && instances.size() > 1) {
        const auto picked = stratified_pick(instances, config.val_fraction,
                                            derive_seed(config.seed, "val:" + spec.name));
        // A holdout that would swallow the whole domain keeps nothing.
        if (picked.size() < instances.size())
            for (int i : picked) in_val[i] = 1;
    }
    for (size_t i = 0; i < instances.size(); ++i) {
        auto item = make_item(instances[i], tokenizer, spec, vocab, mode, keep_text, window);
        (in_val[i] ? val_out : train_out).push_back(std::move(item));
    }
}

}  // namespace

RunRecord pretrain(const Corpus& corpus, TokenizerMap& tokenizers, lm::DecoderModel& model,
                   const Vocabulary& vocab, const TrainConfig& config) {
    config.validate();
    if (config.phase != "pretrain")
        throw Error(ErrKind::argument, "pretrain called with phase '" + config.phase + "'");
    if (model.vocab_hash != vocab.hash())
        throw Error(ErrKind::incompatible, "model was built against a different vocabulary");
    if (corpus.domains.empty()) throw Error(ErrKind::data, "corpus has no domains");

    std::map<std::string, const vq::Codebook*> by_domain;
    for (const auto& dom : corpus.domains) {
        auto it = tokenizers.find(dom.spec.name);
        if (it == tokenizers.end())
            throw Error(ErrKind::config, "no tokenizer for domain '" + dom.spec.name + "'");
        by_domain[dom.spec.name] = &it->second.codebook;
    }
    const auto bound = lm::BoundCodebooks::bind(vocab, by_domain);

    std::vector<TrainItem> train_items, val_items;
    for (const auto& dom : corpus.domains)
        split_items(dom.split.train, tokenizers.at(dom.spec.name), dom.spec, vocab,
                    PromptMode::pretrain, config, model.config.context_window, train_items,
                    val_items);

    RunRecord rec = train_loop(train_items, val_items, model, bound, config, "pretrain");
    model.phase = "pretrained";
    return rec;
}

RunRecord finetune(const DomainData& domain, vq::TokenizerArtifacts& tokenizer,
                   lm::DecoderModel& model, const Vocabulary& vocab, const TrainConfig& config) {
    config.validate();
    if (config.phase != "sft")
        throw Error(ErrKind::argument, "finetune called with phase '" + config.phase + "'");
    if (model.vocab_hash != vocab.hash())
        throw Error(ErrKind::incompatible, "model was built against a different vocabulary");

    std::map<std::string, const vq::Codebook*> by_domain{
        {domain.spec.name, &tokenizer.codebook}};
    const auto bound = lm::BoundCodebooks::bind(vocab, by_domain);

    std::vector<TrainItem> train_items, val_items;
    split_items(domain.split.train, tokenizer, domain.spec, vocab, PromptMode::sft_train, config,
                model.config.context_window, train_items, val_items);

    RunRecord rec = train_loop(train_items, val_items, model, bound, config,
                               "sft:" + domain.spec.name);
    model.phase = "sft:" + domain.spec.name;
    return rec;
}

std::vector<eval::MetricsReport> evaluate_universal(const Corpus& corpus,
                                                    TokenizerMap& tokenizers,
                                                    lm::DecoderModel& model,
                                                    const Vocabulary& vocab, int max_new) {
    if (model.phase != "pretrained")
        throw Error(ErrKind::incompatible,
                    "universal evaluation needs a pretrained model, got phase '" + model.phase +
                        "'");
    std::vector<eval::MetricsReport> reports;
    for (const auto& dom : corpus.domains) {
        auto it = tokenizers.find(dom.spec.name);
        if (it == tokenizers.end())
            throw Error(ErrKind::config, "no tokenizer for domain '" + dom.spec.name + "'");
        reports.push_back(eval::evaluate_domain(dom, it->second.model, it->second.codebook, model,
                                                vocab, "universal", max_new));
    }
    return reports;
}

namespace {

struct CellConfig {
    int k = 0;
    int patch = 0;  // 0 keeps the domain default
    Real fraction = 1.0;
    bool pretrain_first = true;
    bool text = true;
};

std::vector<eval::ResultRow> run_cell(const Corpus& corpus, const CellConfig& cell,
                                      const GridDeps& deps, uint64_t seed) {
    Corpus shaped = corpus;
    for (auto& dom : shaped.domains) {
        auto& spec = dom.spec;
        if (cell.patch > 0) spec.patch_size = cell.patch;
        spec.codebook_size = cell.k;
        if (spec.patch_size > 0 && spec.length % spec.patch_size == 0)
            spec.token_budget = spec.length / spec.patch_size;
        spec.validate();
    }

    TokenizerMap tokenizers;
    std::vector<DomainSpec> specs;
    for (const auto& dom : shaped.domains) {
        specs.push_back(dom.spec);
        vq::VqTrainConfig tc = deps.tokenizer;
        tc.codebook_size = cell.k;
        tokenizers.emplace(dom.spec.name, vq::train_tokenizer(dom.split, dom.spec, tc, seed));
    }

    const Vocabulary vocab = build_vocabulary(specs, corpus_context_values(shaped));
    lm::DecoderModel model = lm::DecoderModel::init(deps.model, vocab, seed);

    if (cell.pretrain_first) {
        TrainConfig pc = deps.pretrain_cfg;
        pc.phase = "pretrain";
        pc.seed = seed;
        pc.text_in_pretrain = cell.text;
        pretrain(shaped, tokenizers, model, vocab, pc);
    }

    std::vector<eval::ResultRow> rows;
    for (const auto& dom : shaped.domains) {
        lm::DecoderModel adapted = model;
        DomainData subset = dom;
        subset.split = subset_train(dom.split, cell.fraction,
                                    derive_seed(seed, "grid-frac:" + dom.spec.name));
        TrainConfig sc = deps.sft_cfg;
        sc.phase = "sft";
        sc.seed = seed;
        finetune(subset, tokenizers.at(dom.spec.name), adapted, vocab, sc);

        auto& tok = tokenizers.at(dom.spec.name);
        const auto report = eval::evaluate_domain(subset, tok.model, tok.codebook, adapted, vocab,
                                                  "adapt", deps.max_new);
        eval::ResultRow row = eval::row_from_report(report, seed);
        row.k = cell.k;
        row.patch = dom.spec.patch_size;
        row.fraction = cell.fraction;
        row.pretrain = cell.pretrain_first;
        row.text = cell.text;
        rows.push_back(row);
    }
    return rows;
}

std::vector<eval::ResultRow> failed_rows(const Corpus& corpus, const CellConfig& cell,
                                         const std::string& kind, uint64_t seed) {
    std::vector<eval::ResultRow> rows;
    for (const auto& dom : corpus.domains) {
        eval::ResultRow row;
        row.domain = dom.spec.name;
        row.setting = "failed:" + kind;
        row.k = cell.k;
        row.patch = cell.patch > 0 ? cell.patch : dom.spec.patch_size;
        row.fraction = cell.fraction;
        row.pretrain = cell.pretrain_first;
        row.text = cell.text;
        row.seed = seed;
        rows.push_back(row);
    }
    return rows;
}

}  // namespace

std::vector<eval::ResultRow> run_ablation_grid(const Corpus& corpus, const GridSpec& grid,
                                               const GridDeps& deps, uint64_t seed) {
    if (grid.codebook_sizes.empty() || grid.fractions.empty() || grid.text_options.empty() ||
        grid.pretrain_options.empty())
        throw Error(ErrKind::config, "every grid axis needs at least one value");

    std::vector<int> patches = grid.patch_sizes;
    if (patches.empty()) patches.push_back(0);

    std::vector<eval::ResultRow> rows;
    for (int k : grid.codebook_sizes)
        for (int patch : patches)
            for (Real fraction : grid.fractions)
                for (bool pre : grid.pretrain_options)
                    for (bool text : grid.text_options) {
                        CellConfig cell{k, patch, fraction, pre, text};
                        try {
                            auto cell_rows = run_cell(corpus, cell, deps, seed);
                            rows.insert(rows.end(), cell_rows.begin(), cell_rows.end());
                        } catch (const Error& e) {
                            auto failed = failed_rows(corpus, cell, err_kind_name(e.kind()), seed);
                            rows.insert(rows.end(), failed.begin(), failed.end());
                        } catch (const std::exception&) {
                            auto failed = failed_rows(corpus, cell, "internal", seed);
                            rows.insert(rows.end(), failed.begin(), failed.end());
                        }
                    }
    return rows;
}

}  // namespace instructtime::train
