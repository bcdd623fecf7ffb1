// Release gate. Each check prints one pass/FAIL line; the process exits 0
// only when every check passes. Optional argv: a list of check numbers to
// run a subset, e.g. `acceptance 1 4 12`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "instructtime/cli.hpp"
#include "instructtime/common.hpp"
#include "instructtime/dataset.hpp"
#include "instructtime/eval.hpp"
#include "instructtime/lm.hpp"
#include "instructtime/prompting.hpp"
#include "instructtime/rng.hpp"
#include "instructtime/tape.hpp"
#include "instructtime/tensor.hpp"
#include "instructtime/training.hpp"
#include "instructtime/vq.hpp"

namespace fs = std::filesystem;
using namespace instructtime;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double x, int digits = 3) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, x);
    return buf;
}

bool bit_equal(Real a, Real b) { return std::memcmp(&a, &b, sizeof(Real)) == 0; }

struct Outcome {
    bool ok = false;
    std::string detail;
};

// ---------------------------------------------------------------------------
// shared corpus builders

DomainData synth_domain(const std::string& name, std::vector<std::string> classes, int length,
                        int patch, int k, double sigma, int train_pc, int test_pc, uint64_t seed,
                        int ml_train = 0, int ml_test = 0) {
    SyntheticSpec ss;
    ss.name = name;
    ss.classes = std::move(classes);
    ss.length = length;
    ss.patch_size = patch;
    ss.codebook_size = k;
    ss.sigma = sigma;
    ss.train_per_class = train_pc;
    ss.test_per_class = test_pc;
    ss.multilabel_train = ml_train;
    ss.multilabel_test = ml_test;
    return generate_synthetic_domain(ss, derive_seed(seed, "gen:" + name));
}

Vocabulary corpus_vocab(const Corpus& corpus) {
    std::vector<DomainSpec> specs;
    for (const auto& dom : corpus.domains) specs.push_back(dom.spec);
    return build_vocabulary(specs, corpus_context_values(corpus));
}

// Small single-domain fixture shared by the oracle-style checks: a normalized
// two-class corpus, a codebook the vocabulary can bind, and a small LM.
struct SmallRig {
    Corpus corpus;
    Vocabulary vocab;
    vq::Codebook codebook;
    lm::DecoderModel model;
    lm::BoundCodebooks bound;
    Rng rng{0};

    explicit SmallRig(uint64_t seed, const std::string& name = "rig") : rng(derive_seed(seed, "rig")) {
        corpus.domains.push_back(
            synth_domain(name, {"sine", "square"}, 16, 4, 8, 0.1, 4, 2, seed, 2, 1));
        normalize_corpus(corpus);
        vocab = corpus_vocab(corpus);
        codebook = vq::Codebook::init(8, 6, rng);
        lm::LmConfig lc;
        lc.d_model = 16;
        lc.n_layers = 1;
        lc.n_heads = 2;
        lc.context_window = 96;
        lc.dropout = 0.0;
        lc.projector_hidden = {6, 12, 16};
        model = lm::DecoderModel::init(lc, vocab, derive_seed(seed, "model"));
        bound = lm::BoundCodebooks::bind(vocab, {{name, &codebook}});
    }

    const DomainSpec& spec() const { return corpus.domains[0].spec; }

    std::vector<int> random_codes() {
        std::vector<int> codes(size_t(spec().token_count()));
        for (auto& c : codes) c = static_cast<int>(rng.below(8));
        return codes;
    }
};

// ---------------------------------------------------------------------------
// 1. quantizer vs exhaustive scan

Outcome check_quantizer_exactness() {
    const auto t0 = Clock::now();
    Rng rng(derive_seed(7, "acc:quantize"));
    for (int trial = 0; trial < 1000; ++trial) {
        const int K = 1 + static_cast<int>(rng.below(64));
        const int d = 1 + static_cast<int>(rng.below(16));
        vq::Codebook cb;
        cb.vectors = nn::Tensor::randn({K, d}, rng, 1.0 + rng.uniform() * 3.0);
        if (K >= 2 && trial % 3 == 0) {
            // duplicate rows exercise the low-index tie rule
            const int dup = 1 + static_cast<int>(rng.below(uint64_t(K - 1)));
            for (int c = 0; c < d; ++c) cb.vectors.at(dup, c) = cb.vectors.at(0, c);
        }
        std::vector<Real> z(static_cast<size_t>(d));
        if (trial % 5 == 0) {
            const int planted = static_cast<int>(rng.below(uint64_t(K)));
            for (int c = 0; c < d; ++c) z[size_t(c)] = cb.vectors.at(planted, c);
        } else {
            for (auto& x : z) x = rng.normal() * 2.0;
        }
        int best = 0;
        Real best_dist = std::numeric_limits<Real>::infinity();
        for (int k = 0; k < K; ++k) {
            Real dist = 0;
            for (int c = 0; c < d; ++c) {
                const Real diff = z[size_t(c)] - cb.vectors.at(k, c);
                dist += diff * diff;
            }
            if (dist < best_dist) {
                best_dist = dist;
                best = k;
            }
        }
        const auto [got, row] = vq::quantize(z, cb);
        if (got != best)
            return {false, "trial " + std::to_string(trial) + ": got " + std::to_string(got) +
                               ", scan says " + std::to_string(best)};
        for (int c = 0; c < d; ++c)
            if (!bit_equal(row.v[size_t(c)], cb.vectors.at(best, c)))
                return {false, "trial " + std::to_string(trial) + ": returned row differs"};
    }
    const double secs = seconds_since(t0);
    if (secs >= 5.0) return {false, "took " + fmt(secs, 1) + "s, budget 5s"};
    return {true, "1000 pairs, 0 mismatches"};
}

// ---------------------------------------------------------------------------
// 2. loss report consistency and the planted-code zero

Outcome check_loss_report() {
    Rng rng(derive_seed(7, "acc:report"));
    Real worst = 0;
    for (int trial = 0; trial < 12; ++trial) {
        const int patch = 2 + static_cast<int>(rng.below(3));
        const int P = 2 + static_cast<int>(rng.below(4));
        const int H = 1 + static_cast<int>(rng.below(2));
        const int d_code = 4 + static_cast<int>(rng.below(5));
        const int K = 3 + static_cast<int>(rng.below(6));
        TimeSeriesInstance inst;
        inst.instance_id = "report-" + std::to_string(trial);
        inst.domain = "report";
        inst.labels = {"x"};
        inst.values = nn::Tensor::randn({patch * P, H}, rng, 1.0);
        auto model = vq::VqEncoderDecoder::init(patch, H, d_code, rng, 2, 3);
        auto cb = vq::Codebook::init(K, d_code, rng);
        const Real beta = 0.05 + rng.uniform() * 0.5;
        const auto res = vq::vq_forward(inst, model, cb, beta);
        const Real sum = res.report.reconstruction + res.report.codebook_term +
                         beta * res.report.commitment_term;
        worst = std::max(worst, std::abs(res.report.total - sum));
        if (std::abs(res.report.total - sum) > 1e-9)
            return {false, "trial " + std::to_string(trial) + ": total off by " +
                               fmt(std::abs(res.report.total - sum), 12)};
    }

    // Planting the codebook on the encoder outputs collapses both quantization
    // terms to exactly zero.
    TimeSeriesInstance inst;
    inst.instance_id = "planted";
    inst.domain = "report";
    inst.labels = {"x"};
    inst.values = nn::Tensor::randn({16, 1}, rng, 1.0);
    auto model = vq::VqEncoderDecoder::init(4, 1, 6, rng, 2, 3);
    const nn::Tensor z = vq::encode(inst, model);
    auto cb = vq::Codebook::init(z.rows(), z.cols(), rng);
    cb.vectors = z;
    const auto res = vq::vq_forward(inst, model, cb, 0.25);
    if (!bit_equal(res.report.codebook_term, 0.0) || !bit_equal(res.report.commitment_term, 0.0))
        return {false, "planted codes left terms " + fmt(res.report.codebook_term, 12) + " / " +
                           fmt(res.report.commitment_term, 12)};
    if (!bit_equal(res.report.total, res.report.reconstruction))
        return {false, "planted total is not exactly the reconstruction"};
    return {true, "12 random batches within 1e-9, planted terms exactly 0"};
}

// ---------------------------------------------------------------------------
// 3. finite-difference gradient checks

struct FdStats {
    int checked = 0;
    int live = 0;      // entries whose gradient is meaningfully nonzero
    double worst = 0;  // worst relative error over live entries
    std::string first_fail;
};

// Central differences with a relative tolerance and an absolute floor; the
// floor absorbs entries whose true gradient sits at the noise scale of the
// difference quotient itself.
template <class LossFn>
void fd_check(std::vector<nn::Parameter*> params, const LossFn& loss_at, Rng& rng, int samples,
              FdStats& st) {
    const Real h = 1e-5;
    for (int t = 0; t < samples; ++t) {
        const size_t pi = rng.below(params.size());
        nn::Parameter& p = *params[pi];
        const size_t ei = rng.below(p.value.v.size());
        const Real old = p.value.v[ei];
        p.value.v[ei] = old + h;
        const Real up = loss_at();
        p.value.v[ei] = old - h;
        const Real down = loss_at();
        p.value.v[ei] = old;
        const Real fd = (up - down) / (2 * h);
        const Real g = p.grad.v[ei];
        const Real err = std::abs(g - fd);
        const Real tol = std::max(1e-8, 1e-4 * std::max(std::abs(g), std::abs(fd)));
        ++st.checked;
        if (err > tol && st.first_fail.empty())
            st.first_fail = p.name + "[" + std::to_string(ei) + "]: grad " + fmt(g, 8) + " vs fd " +
                            fmt(fd, 8);
        if (std::abs(g) > 1e-6) {
            ++st.live;
            st.worst = std::max(st.worst, double(err / std::max(std::abs(g), std::abs(fd))));
        }
    }
}

Outcome check_gradients() {
    const auto t0 = Clock::now();

    // Next-token loss through the full decoder stack.
    SmallRig rig(11, "fdlm");
    const auto& inst = rig.corpus.domains[0].split.train[0];
    const PromptSequence prompt =
        build_prompt(inst, rig.random_codes(), rig.spec(), rig.vocab, PromptMode::pretrain);
    for (auto* p : rig.model.parameters()) p->grad.fill(0.0);
    auto fp = lm::forward_tape(prompt, rig.model, rig.bound, nullptr);
    const auto loss_id = fp.tape.cross_entropy_next_token(fp.logits, prompt.ids, prompt.loss_mask);
    fp.tape.backward(loss_id, 1.0 / lm::masked_target_count(prompt));

    FdStats lm_stats;
    Rng pick_lm(derive_seed(7, "acc:fd-lm"));
    fd_check(
        rig.model.parameters(),
        [&] { return lm::ar_loss(lm::forward(prompt, rig.model, rig.bound), prompt); }, pick_lm,
        60, lm_stats);
    if (!lm_stats.first_fail.empty()) return {false, "lm: " + lm_stats.first_fail};
    if (lm_stats.live < 15)
        return {false, "lm: only " + std::to_string(lm_stats.live) + " live entries sampled"};

    // Tokenizer loss under a frozen quantization plan.
    Rng vrng(derive_seed(7, "acc:fd-vq"));
    auto vq_model = vq::VqEncoderDecoder::init(4, 1, 6, vrng, 2, 3);
    auto cb = vq::Codebook::init(8, 6, vrng);
    const auto& vinst = rig.corpus.domains[0].split.train[1];
    for (auto* p : vq_model.parameters()) p->grad.fill(0.0);
    const auto step = vq::vq_step(vinst, vq_model, cb, 0.25, true, 1.0);

    FdStats vq_stats;
    Rng pick_vq(derive_seed(7, "acc:fd-vq-pick"));
    fd_check(
        vq_model.parameters(),
        [&] { return vq::vq_total_with_plan(vinst, vq_model, step.plan, 0.25); }, pick_vq, 40,
        vq_stats);
    if (!vq_stats.first_fail.empty()) return {false, "vq: " + vq_stats.first_fail};
    if (vq_stats.live < 15)
        return {false, "vq: only " + std::to_string(vq_stats.live) + " live entries sampled"};

    const double secs = seconds_since(t0);
    if (secs >= 120.0) return {false, "took " + fmt(secs, 1) + "s, budget 120s"};
    return {true, "lm 60 entries (worst rel " + fmt(lm_stats.worst, 7) + "), vq 40 entries (worst rel " +
                      fmt(vq_stats.worst, 7) + ")"};
}

// ---------------------------------------------------------------------------
// 4. EMA recursion against a hand-rolled closed form

Outcome check_ema_recursion() {
    Rng rng(derive_seed(7, "acc:ema"));
    const int K = 2;
    const Real g = 0.99, eps = 1e-5;
    auto cb = vq::Codebook::init(K, 1, rng, g, eps);

    // Mirror of the published update: counts and sums decay toward the batch
    // statistics, rows are sums over Laplace-smoothed counts.
    Real c[2] = {cb.ema_counts[0], cb.ema_counts[1]};
    Real s[2] = {cb.ema_sums.at(0, 0), cb.ema_sums.at(1, 0)};
    auto expected_row = [&](int k) {
        const Real n_total = c[0] + c[1];
        const Real smoothed = (c[k] + eps) * (n_total + K * eps) / n_total;
        return s[k] / smoothed;
    };
    auto apply = [&](const std::vector<Real>& z, const std::vector<int>& codes) {
        Real n[2] = {0, 0}, batch_sum[2] = {0, 0};
        for (size_t i = 0; i < codes.size(); ++i) {
            n[codes[i]] += 1.0;
            batch_sum[codes[i]] += z[i];
        }
        for (int k = 0; k < K; ++k) {
            c[k] = g * c[k] + (1 - g) * n[k];
            s[k] = g * s[k] + (1 - g) * batch_sum[k];
        }
    };
    auto verify = [&](const char* stage) -> std::string {
        for (int k = 0; k < K; ++k) {
            if (std::abs(cb.ema_counts[size_t(k)] - c[k]) > 1e-12)
                return std::string(stage) + ": count[" + std::to_string(k) + "] drifted";
            if (std::abs(cb.ema_sums.at(k, 0) - s[k]) > 1e-12)
                return std::string(stage) + ": sum[" + std::to_string(k) + "] drifted";
            if (std::abs(cb.vectors.at(k, 0) - expected_row(k)) > 1e-9)
                return std::string(stage) + ": row " + std::to_string(k) + " off by " +
                       fmt(std::abs(cb.vectors.at(k, 0) - expected_row(k)), 12);
        }
        return "";
    };

    vq::ema_update(cb, nn::Tensor({2, 1}, {2.0, 4.0}), {0, 0});
    apply({2.0, 4.0}, {0, 0});
    if (auto msg = verify("step 1"); !msg.empty()) return {false, msg};

    vq::ema_update(cb, nn::Tensor({1, 1}, {-1.0}), {1});
    apply({-1.0}, {1});
    if (auto msg = verify("step 2"); !msg.empty()) return {false, msg};

    vq::ema_update(cb, nn::Tensor({0, 1}, {}), {});
    apply({}, {});
    if (auto msg = verify("step 3 (empty batch)"); !msg.empty()) return {false, msg};

    return {true, "3 steps within 1e-9 of the closed form"};
}

// ---------------------------------------------------------------------------
// 5. loss-mask semantics

Outcome check_mask_semantics() {
    SmallRig rig(13, "maskdom");
    const auto& dom = rig.corpus.domains[0];

    // Positions after the last supervised target feed no loss term, so
    // rewriting them cannot move the answer-only loss by even one bit.
    int vandalized = 0;
    for (size_t i = 0; i < dom.split.train.size(); ++i) {
        const auto& inst = dom.split.train[i];
        const auto p = build_prompt(inst, rig.random_codes(), rig.spec(), rig.vocab,
                                    PromptMode::sft_train);
        const auto padded = pad_or_reject(p, 96);
        int last_target = -1;
        for (size_t j = 0; j < padded.size(); ++j)
            if (padded.loss_mask[j]) last_target = static_cast<int>(j);
        if (last_target < 0 || last_target + 2 >= static_cast<int>(padded.size()))
            return {false, "fixture prompt has no pad tail to rewrite"};

        const Real base = lm::ar_loss(lm::forward(padded, rig.model, rig.bound), padded);
        PromptSequence mutated = padded;
        const int ts_id = rig.vocab.range_for_domain(rig.spec().name)->begin;
        for (size_t j = size_t(last_target) + 1; j < mutated.size(); ++j) {
            mutated.ids[j] = (j % 2 == 0) ? Vocabulary::kEos : ts_id;
            ++vandalized;
        }
        const Real after = lm::ar_loss(lm::forward(mutated, rig.model, rig.bound), mutated);
        if (!bit_equal(base, after))
            return {false, "instance " + std::to_string(i) + ": loss moved from " + fmt(base, 12) +
                               " to " + fmt(after, 12)};
    }

    // Pretraining supervises every position except BOS and padding.
    int instances = 0;
    for (const auto* split : {&dom.split.train, &dom.split.test}) {
        for (const auto& inst : *split) {
            const auto p = build_prompt(inst, rig.random_codes(), rig.spec(), rig.vocab,
                                        PromptMode::pretrain);
            for (size_t j = 0; j < p.size(); ++j)
                if (p.loss_mask[j] != (j > 0 ? 1 : 0))
                    return {false, "unpadded pretrain mask wrong at position " + std::to_string(j)};
            const auto padded = pad_or_reject(p, 96);
            int expected = 0;
            for (size_t j = 1; j < padded.size(); ++j) {
                const bool want = padded.ids[j] != Vocabulary::kPad;
                expected += want ? 1 : 0;
                if ((padded.loss_mask[j] != 0) != want)
                    return {false, "padded pretrain mask wrong at position " + std::to_string(j)};
            }
            if (padded.loss_mask[0] != 0) return {false, "BOS position is supervised"};
            if (lm::masked_target_count(padded) != expected)
                return {false, "target count " + std::to_string(lm::masked_target_count(padded)) +
                                   ", expected " + std::to_string(expected)};
            ++instances;
        }
    }
    return {true, std::to_string(vandalized) + " rewritten tail positions, " +
                      std::to_string(instances) + " pretrain prompts covered"};
}

// ---------------------------------------------------------------------------
// 6. causality of the decoder

Outcome check_causality() {
    SmallRig rig(17, "causal");
    Rng rng(derive_seed(7, "acc:causal"));
    const int total = rig.vocab.total_size();
    for (int trial = 0; trial < 100; ++trial) {
        const int T = 8 + static_cast<int>(rng.below(41));
        PromptSequence p;
        p.domain = rig.spec().name;
        p.ids.resize(size_t(T));
        p.loss_mask.assign(size_t(T), 0);
        p.tags.assign(size_t(T), SegTag::instruction);
        p.ids[0] = Vocabulary::kBos;
        for (int j = 1; j < T; ++j) p.ids[size_t(j)] = static_cast<int>(rng.below(uint64_t(total)));

        const nn::Tensor before = lm::forward(p, rig.model, rig.bound);
        const int j = 1 + static_cast<int>(rng.below(uint64_t(T - 1)));
        int replacement = static_cast<int>(rng.below(uint64_t(total - 1)));
        if (replacement >= p.ids[size_t(j)]) ++replacement;
        PromptSequence q = p;
        q.ids[size_t(j)] = replacement;
        const nn::Tensor after = lm::forward(q, rig.model, rig.bound);

        if (before.rows() != T || after.rows() != T) return {false, "unexpected logits shape"};
        if (std::memcmp(before.v.data(), after.v.data(),
                        size_t(j) * size_t(before.cols()) * sizeof(Real)) != 0)
            return {false, "trial " + std::to_string(trial) + ": perturbing position " +
                               std::to_string(j) + " changed an earlier logit"};
    }
    return {true, "100 prompts, no earlier row changed"};
}

// ---------------------------------------------------------------------------
// 7. small-scale end-to-end classification

Outcome check_pipeline() {
    const auto t0 = Clock::now();
    const uint64_t seed = 1;

    Corpus corpus;
    corpus.domains.push_back(synth_domain("pulse", {"sine", "square"}, 64, 4, 32, 0.1, 200, 50, seed));
    corpus.domains.push_back(
        synth_domain("blend", {"sine", "sawtooth", "noise-burst"}, 64, 4, 32, 0.1, 200, 50, seed));
    corpus.domains.push_back(
        synth_domain("strobe", {"sawtooth", "noise-burst"}, 64, 4, 32, 0.1, 200, 50, seed));
    normalize_corpus(corpus);
    const Vocabulary vocab = corpus_vocab(corpus);

    vq::VqTrainConfig tc;
    tc.epochs = 8;
    tc.batch_size = 16;
    tc.learning_rate = 1e-3;
    tc.codebook_size = 32;
    tc.d_code = 16;
    tc.n_blocks = 2;
    train::TokenizerMap toks;
    for (const auto& dom : corpus.domains)
        toks.emplace(dom.spec.name, vq::train_tokenizer(dom.split, dom.spec, tc,
                                                        derive_seed(seed, "tok:" + dom.spec.name)));

    lm::LmConfig lc;
    lc.d_model = 64;
    lc.n_layers = 2;
    lc.n_heads = 4;
    lc.context_window = 128;
    lc.dropout = 0.0;
    lc.projector_hidden = {16, 32, 64};
    lm::DecoderModel base = lm::DecoderModel::init(lc, vocab, derive_seed(seed, "model"));

    train::TrainConfig pc;
    pc.phase = "pretrain";
    pc.learning_rate = 1e-3;
    pc.batch_size = 16;
    pc.epochs = 6;
    pc.val_fraction = 0.0;
    pc.seed = seed;
    train::pretrain(corpus, toks, base, vocab, pc);

    bool ok = true;
    std::string detail;
    for (const auto& dom : corpus.domains) {
        lm::DecoderModel m = base;
        train::TrainConfig sc;
        sc.phase = "sft";
        sc.learning_rate = 1e-3;
        sc.batch_size = 16;
        sc.epochs = 5;
        sc.val_fraction = 0.0;
        sc.seed = seed;
        auto& tok = toks.at(dom.spec.name);
        train::finetune(dom, tok, m, vocab, sc);
        const auto rep = eval::evaluate_domain(dom, tok.model, tok.codebook, m, vocab, "adapt");
        detail += dom.spec.name + " " + fmt(rep.accuracy) + "  ";
        ok = ok && rep.accuracy >= 0.95;
    }
    const double secs = seconds_since(t0);
    if (secs >= 900.0) {
        ok = false;
        detail += "over the 900s budget  ";
    }
    return {ok, detail + "(" + fmt(secs, 0) + "s)"};
}

// ---------------------------------------------------------------------------
// 8-10. shared ablation sweep on a reduced corpus

struct AblationData {
    std::map<std::string, double> pre10, fresh10;  // per-domain means over seeds
    double text_avg = 0, notext_avg = 0;
    double transfer_pre = 0, transfer_fresh = 0;
    double secs = 0;
    std::string error;
};

const AblationData& ablation() {
    static const AblationData data = [] {
        AblationData a;
        const auto t0 = Clock::now();
        try {
            const std::vector<uint64_t> seeds = {1, 2, 3};
            const std::vector<std::string> names = {"alpha", "beta", "gamma"};
            std::map<std::string, double> pre_sum, fresh_sum;
            double text_sum = 0, notext_sum = 0, trans_pre = 0, trans_fresh = 0;
            int cells = 0;

            for (uint64_t s : seeds) {
                Corpus corpus;
                corpus.domains.push_back(
                    synth_domain("alpha", {"sine", "square"}, 32, 4, 16, 0.1, 60, 20, s));
                corpus.domains.push_back(
                    synth_domain("beta", {"sawtooth", "noise-burst"}, 32, 4, 16, 0.1, 60, 20, s));
                corpus.domains.push_back(
                    synth_domain("gamma", {"sine", "sawtooth"}, 32, 4, 16, 0.1, 60, 20, s));
                normalize_corpus(corpus);
                const Vocabulary vocab = corpus_vocab(corpus);

                vq::VqTrainConfig tc;
                tc.epochs = 8;
                tc.batch_size = 16;
                tc.learning_rate = 1e-3;
                tc.codebook_size = 16;
                tc.d_code = 12;
                tc.n_blocks = 2;
                train::TokenizerMap toks;
                for (const auto& dom : corpus.domains)
                    toks.emplace(dom.spec.name,
                                 vq::train_tokenizer(dom.split, dom.spec, tc,
                                                     derive_seed(s, "tok:" + dom.spec.name)));

                lm::LmConfig lc;
                lc.d_model = 48;
                lc.n_layers = 2;
                lc.n_heads = 4;
                lc.context_window = 96;
                lc.dropout = 0.0;
                lc.projector_hidden = {12, 24, 48};
                const lm::DecoderModel base = lm::DecoderModel::init(lc, vocab, derive_seed(s, "model"));

                train::TrainConfig pc;
                pc.phase = "pretrain";
                pc.learning_rate = 1e-3;
                pc.batch_size = 16;
                pc.epochs = 30;
                pc.val_fraction = 0.0;
                pc.seed = s;

                lm::DecoderModel p_text = base;
                train::pretrain(corpus, toks, p_text, vocab, pc);

                train::TrainConfig pn = pc;
                pn.text_in_pretrain = false;
                lm::DecoderModel p_notext = base;
                train::pretrain(corpus, toks, p_notext, vocab, pn);

                Corpus corpus_ab;
                corpus_ab.domains.push_back(*corpus.find("alpha"));
                corpus_ab.domains.push_back(*corpus.find("beta"));
                lm::DecoderModel p_ab = base;
                train::pretrain(corpus_ab, toks, p_ab, vocab, pc);

                auto sft_acc = [&](const lm::DecoderModel& start, const std::string& dname,
                                   double fraction, int epochs) {
                    const DomainData& dom = *corpus.find(dname);
                    DomainData sub = dom;
                    sub.split = subset_train(dom.split, fraction, derive_seed(s, "frac:" + dname));
                    lm::DecoderModel m = start;
                    train::TrainConfig sc;
                    sc.phase = "sft";
                    sc.learning_rate = 1e-3;
                    sc.batch_size = 16;
                    sc.epochs = epochs;
                    sc.val_fraction = 0.0;
                    sc.seed = s;
                    auto& tok = toks.at(dname);
                    train::finetune(sub, tok, m, vocab, sc);
                    return double(
                        eval::evaluate_domain(dom, tok.model, tok.codebook, m, vocab, "adapt")
                            .accuracy);
                };

                for (const auto& d : names) {
                    const double with_pre = sft_acc(p_text, d, 0.10, 60);
                    const double fresh = sft_acc(base, d, 0.10, 60);
                    const double without_text = sft_acc(p_notext, d, 0.10, 60);
                    pre_sum[d] += with_pre;
                    fresh_sum[d] += fresh;
                    text_sum += with_pre;
                    notext_sum += without_text;
                    ++cells;
                }
                trans_pre += sft_acc(p_ab, "gamma", 0.40, 40);
                trans_fresh += sft_acc(base, "gamma", 0.40, 40);
            }

            const double n_seeds = double(seeds.size());
            for (const auto& d : names) {
                a.pre10[d] = pre_sum[d] / n_seeds;
                a.fresh10[d] = fresh_sum[d] / n_seeds;
            }
            a.text_avg = text_sum / cells;
            a.notext_avg = notext_sum / cells;
            a.transfer_pre = trans_pre / n_seeds;
            a.transfer_fresh = trans_fresh / n_seeds;
        } catch (const std::exception& e) {
            a.error = e.what();
        }
        a.secs = seconds_since(t0);
        return a;
    }();
    return data;
}

Outcome check_pretraining_helps() {
    const auto& a = ablation();
    if (!a.error.empty()) return {false, "sweep failed: " + a.error};
    bool ok = true;
    std::string detail;
    for (const auto& [d, pre] : a.pre10) {
        const double fresh = a.fresh10.at(d);
        detail += d + " " + fmt(pre) + " vs " + fmt(fresh) + "  ";
        ok = ok && pre >= fresh;
    }
    return {ok, detail + "(sweep " + fmt(a.secs, 0) + "s)"};
}

Outcome check_text_helps() {
    const auto& a = ablation();
    if (!a.error.empty()) return {false, "sweep failed: " + a.error};
    return {a.text_avg >= a.notext_avg,
            "with text " + fmt(a.text_avg) + " vs without " + fmt(a.notext_avg)};
}

Outcome check_transfer() {
    const auto& a = ablation();
    if (!a.error.empty()) return {false, "sweep failed: " + a.error};
    return {a.transfer_pre >= a.transfer_fresh,
            "pretrained start " + fmt(a.transfer_pre) + " vs fresh " + fmt(a.transfer_fresh)};
}

// ---------------------------------------------------------------------------
// 11. parser round-trip over full corpora

Outcome check_parser_roundtrip() {
    Corpus corpus;
    corpus.domains.push_back(
        synth_domain("tri", {"sine", "square", "sawtooth"}, 32, 4, 16, 0.1, 6, 3, 19, 6, 4));
    corpus.domains.push_back(synth_domain("mono", {"noise-burst"}, 32, 4, 16, 0.1, 4, 2, 19));
    corpus.domains.push_back(
        synth_domain("duo", {"square", "noise-burst"}, 32, 4, 16, 0.1, 6, 3, 19, 0, 2));
    const Vocabulary vocab = corpus_vocab(corpus);

    int n = 0, failures = 0, multilabel = 0;
    for (const auto& dom : corpus.domains) {
        const std::vector<int> codes(size_t(dom.spec.token_count()), 0);
        for (const auto* split : {&dom.split.train, &dom.split.test}) {
            for (const auto& inst : *split) {
                const auto p = build_prompt(inst, codes, dom.spec, vocab, PromptMode::sft_train);
                std::vector<int> answer;
                for (size_t j = 0; j < p.size(); ++j)
                    if (p.loss_mask[j]) answer.push_back(p.ids[j]);
                const auto parsed = eval::parse_labels(answer, vocab, dom.spec);
                const std::set<std::string> truth(inst.labels.begin(), inst.labels.end());
                if (parsed != truth) ++failures;
                if (truth.size() > 1) ++multilabel;
                ++n;
            }
        }
    }
    return {failures == 0, std::to_string(n) + " instances (" + std::to_string(multilabel) +
                               " multi-label), " + std::to_string(failures) + " failures"};
}

// ---------------------------------------------------------------------------
// 12. metric oracles

Outcome check_metric_oracle() {
    using LabelSet = std::set<std::string>;

    const std::vector<LabelSet> preds = {{"a"}, {"a"}};
    const std::vector<LabelSet> truths = {{"a"}, {"b"}};
    const auto rep = eval::score_multiclass(preds, truths);
    if (!bit_equal(rep.accuracy, 0.5)) return {false, "accuracy " + fmt(rep.accuracy, 12)};
    if (rep.per_label_f1.size() != 2 || rep.per_label_f1[0].first != "a" ||
        rep.per_label_f1[1].first != "b")
        return {false, "per-label table has unexpected shape"};
    if (!bit_equal(rep.per_label_f1[0].second, 2.0 / 3.0))
        return {false, "f1(a) " + fmt(rep.per_label_f1[0].second, 12)};
    if (!bit_equal(rep.per_label_f1[1].second, 0.0))
        return {false, "f1(b) " + fmt(rep.per_label_f1[1].second, 12)};
    if (!bit_equal(rep.f1, 1.0 / 3.0)) return {false, "macro f1 " + fmt(rep.f1, 12)};
    if (rep.n_test != 2) return {false, "n_test " + std::to_string(rep.n_test)};

    // Hand-tallied multi-label case: a and b each end at tp=1, fp=1, fn=1.
    const std::vector<LabelSet> mpred = {{"a", "b"}, {"a", "b"}, {}};
    const std::vector<LabelSet> mtruth = {{"a"}, {"b"}, {"a", "b"}};
    const auto ml = eval::score_multilabel(mpred, mtruth);
    if (!bit_equal(ml.accuracy, 0.0)) return {false, "multilabel accuracy " + fmt(ml.accuracy, 12)};
    if (ml.per_label_f1.size() != 2 || !bit_equal(ml.per_label_f1[0].second, 0.5) ||
        !bit_equal(ml.per_label_f1[1].second, 0.5))
        return {false, "multilabel per-label f1 mismatch"};
    if (!bit_equal(ml.f1, 0.5)) return {false, "multilabel macro f1 " + fmt(ml.f1, 12)};

    const auto perfect = eval::score_multilabel(mtruth, mtruth);
    if (!bit_equal(perfect.accuracy, 1.0) || !bit_equal(perfect.f1, 1.0))
        return {false, "perfect multilabel run did not score 1.0"};

    return {true, "two-class and multi-label tallies exact"};
}

// ---------------------------------------------------------------------------
// 13. CLI reproducibility

struct CaptureStreams {
    std::ostringstream out, err;
    std::streambuf* old_out;
    std::streambuf* old_err;
    CaptureStreams() : old_out(std::cout.rdbuf(out.rdbuf())), old_err(std::cerr.rdbuf(err.rdbuf())) {}
    ~CaptureStreams() {
        std::cout.rdbuf(old_out);
        std::cerr.rdbuf(old_err);
    }
};

std::map<std::string, std::string> snapshot_tree(const fs::path& root) {
    std::map<std::string, std::string> tree;
    if (!fs::exists(root)) return tree;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (!entry.is_regular_file()) continue;
        std::ifstream in(entry.path(), std::ios::binary);
        std::ostringstream buf;
        buf << in.rdbuf();
        tree[fs::relative(entry.path(), root).generic_string()] = buf.str();
    }
    return tree;
}

Outcome check_cli_reproducibility() {
    const fs::path root = fs::temp_directory_path() / "instructtime-release-gate";
    fs::remove_all(root);
    fs::create_directories(root);
    const std::string data_root = (root / "data").generic_string();
    const std::string cfg_path = (root / "config.ini").generic_string();
    {
        std::ofstream cfg(cfg_path, std::ios::binary);
        cfg << "[run]\nseed = 5\n\n"
            << "[corpus]\nroot = " << data_root << "\n\n"
            << "[synthetic.waves]\n"
            << "classes = sine, square\nlength = 16\npatch_size = 4\ncodebook_size = 8\n"
            << "sigma = 0.1\ntrain_per_class = 4\ntest_per_class = 2\n"
            << "multilabel_train = 2\nmultilabel_test = 1\n\n"
            << "[tokenizer]\nepochs = 2\nbatch_size = 4\nd_code = 6\nn_blocks = 1\n\n"
            << "[model]\nd_model = 16\nn_layers = 1\nn_heads = 2\ncontext_window = 96\n"
            << "dropout = 0.1\nprojector_hidden = 6, 12, 16\n\n"
            << "[pretrain]\nlearning_rate = 0.001\nbatch_size = 4\nepochs = 2\nval_fraction = 0.25\n\n"
            << "[sft]\nlearning_rate = 0.001\nbatch_size = 4\nepochs = 2\nval_fraction = 0.25\n"
            << "domain = waves\nfrom = fresh\n\n"
            << "[grid]\ncodebook_sizes = 8\n\n"
            << "[eval]\nsample_per_domain = 3\n\n"
            << "[dump]\ndomain = waves\nindex = 0\n";
    }

    std::string tok_dir, pre_ckpt;
    auto run_once = [&](const std::vector<std::string>& args,
                        const fs::path& parent) -> std::pair<int, fs::path> {
        std::set<std::string> before;
        if (fs::exists(parent))
            for (const auto& entry : fs::directory_iterator(parent))
                before.insert(entry.path().filename().string());
        int code = 0;
        {
            CaptureStreams cap;
            code = cli_run(args);
        }
        fs::path fresh;
        int fresh_count = 0;
        if (fs::exists(parent))
            for (const auto& entry : fs::directory_iterator(parent))
                if (!before.count(entry.path().filename().string())) {
                    fresh = entry.path();
                    ++fresh_count;
                }
        if (fresh_count != 1) return {code == 0 ? 3 : code, fresh};
        return {code, fresh};
    };

    int verbs = 0;
    auto run_pair = [&](const std::string& verb, const std::vector<std::string>& extra,
                        const std::string& artifact, bool compare_corpus) -> std::string {
        const fs::path parent = root / ("runs-" + verb);
        std::vector<std::string> args = {verb, "--config", cfg_path, "--out", parent.generic_string()};
        args.insert(args.end(), extra.begin(), extra.end());

        const auto [code1, dir1] = run_once(args, parent);
        if (code1 != 0) return verb + ": first run exited " + std::to_string(code1);
        const auto corpus1 = compare_corpus ? snapshot_tree(data_root) : std::map<std::string, std::string>{};

        const auto [code2, dir2] = run_once(args, parent);
        if (code2 != 0) return verb + ": second run exited " + std::to_string(code2);

        const auto tree1 = snapshot_tree(dir1);
        if (!artifact.empty() && !tree1.count(artifact))
            return verb + ": expected artifact " + artifact + " is missing";
        if (tree1 != snapshot_tree(dir2)) return verb + ": run artifacts differ";
        if (compare_corpus) {
            if (corpus1.empty()) return verb + ": corpus came out empty";
            if (corpus1 != snapshot_tree(data_root)) return verb + ": generated corpus differs";
        }

        if (verb == "train-tokenizer") tok_dir = dir1.generic_string();
        if (verb == "pretrain") pre_ckpt = (dir1 / "lm-pretrained.ckpt").generic_string();
        ++verbs;
        return "";
    };

    const std::vector<std::string> none;
    if (auto m = run_pair("gen-data", none, "", true); !m.empty()) return {false, m};
    if (auto m = run_pair("train-tokenizer", none, "tokenizer-waves.ckpt", false); !m.empty())
        return {false, m};
    const std::vector<std::string> with_tok = {"--set", "paths.tokenizer_dir=" + tok_dir};
    if (auto m = run_pair("pretrain", with_tok, "lm-pretrained.ckpt", false); !m.empty())
        return {false, m};
    if (auto m = run_pair("finetune", with_tok, "lm-sft-waves.ckpt", false); !m.empty())
        return {false, m};
    std::vector<std::string> with_model = with_tok;
    with_model.push_back("--set");
    with_model.push_back("paths.lm_checkpoint=" + pre_ckpt);
    if (auto m = run_pair("evaluate", with_model, "results.csv", false); !m.empty())
        return {false, m};
    if (auto m = run_pair("grid", none, "results.csv", false); !m.empty()) return {false, m};
    if (auto m = run_pair("stats", with_tok, "token_frequency.csv", false); !m.empty())
        return {false, m};
    if (auto m = run_pair("export-embeddings", with_model, "embeddings.csv", false); !m.empty())
        return {false, m};
    if (auto m = run_pair("dump-prompt", with_tok, "prompt.txt", false); !m.empty())
        return {false, m};

    fs::remove_all(root);
    return {true, std::to_string(verbs) + " verbs, both runs byte-identical"};
}

// ---------------------------------------------------------------------------
// 14. tokenizer quality floor on a clean signal

Outcome check_sine_mse() {
    Corpus corpus;
    corpus.domains.push_back(synth_domain("puretone", {"sine"}, 64, 4, 32, 0.0, 100, 50, 1));
    normalize_corpus(corpus);
    auto& dom = corpus.domains[0];

    vq::VqTrainConfig tc;
    tc.epochs = 24;
    tc.batch_size = 16;
    tc.learning_rate = 1e-3;
    tc.codebook_size = 32;
    tc.d_code = 16;
    tc.n_blocks = 2;
    auto art = vq::train_tokenizer(dom.split, dom.spec, tc, derive_seed(1, "tok:puretone"));
    if (art.diverged_at_step) return {false, "tokenizer training diverged"};
    const Real mse = vq::reconstruction_mse(dom.split.test, art.model, art.codebook);
    return {mse < 0.05, "test reconstruction MSE " + fmt(mse, 4)};
}

}  // namespace

int main(int argc, char** argv) {
    struct Check {
        int id;
        const char* name;
        std::function<Outcome()> fn;
    };
    const std::vector<Check> checks = {
        {1, "nearest-code lookup matches an exhaustive scan", check_quantizer_exactness},
        {2, "loss report adds up and vanishes on planted codes", check_loss_report},
        {3, "analytic gradients match central finite differences", check_gradients},
        {4, "codebook EMA follows the closed-form recursion", check_ema_recursion},
        {5, "loss masks supervise exactly the intended positions", check_mask_semantics},
        {6, "perturbing a position never changes earlier logits", check_causality},
        {7, "end-to-end pipeline reaches 0.95 accuracy per domain", check_pipeline},
        {8, "few-shot SFT from a pretrained start beats fresh", check_pretraining_helps},
        {9, "text during pretraining helps downstream accuracy", check_text_helps},
        {10, "pretraining transfers to a held-out domain", check_transfer},
        {11, "label parser round-trips every answer segment", check_parser_roundtrip},
        {12, "classification metrics match hand-computed values", check_metric_oracle},
        {13, "repeated CLI runs are byte-identical", check_cli_reproducibility},
        {14, "clean-sine reconstruction MSE stays under 0.05", check_sine_mse},
    };

    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

    bool all_ok = true;
    int ran = 0;
    for (const auto& check : checks) {
        if (!only.empty() && !only.count(check.id)) continue;
        const auto t0 = Clock::now();
        Outcome outcome;
        try {
            outcome = check.fn();
        } catch (const Error& e) {
            outcome = {false, std::string(err_kind_name(e.kind())) + " error: " + e.what()};
        } catch (const std::exception& e) {
            outcome = {false, std::string("unexpected exception: ") + e.what()};
        }
        std::printf("%s %2d: %s (%.1fs)%s%s\n", outcome.ok ? "pass" : "FAIL", check.id, check.name,
                    seconds_since(t0), outcome.detail.empty() ? "" : " -- ",
                    outcome.detail.c_str());
        std::fflush(stdout);
        all_ok = all_ok && outcome.ok;
        ++ran;
    }
    if (ran == 0) {
        std::fprintf(stderr, "no matching checks\n");
        return 1;
    }
    std::printf("%s\n", all_ok ? "all checks passed" : "CHECKS FAILED");
    return all_ok ? 0 : 1;
}
