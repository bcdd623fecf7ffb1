#include "instructtime/vq.hpp"

#include <cmath>

#include "instructtime/checkpoint.hpp"
#include "instructtime/common.hpp"
#include "instructtime/optim.hpp"
#include "instructtime/tape.hpp"

namespace instructtime::vq {

using nn::Tape;
using nn::Tensor;

Codebook Codebook::init(int K, int d_code, Rng& rng, Real decay, Real laplace_eps) {
    Codebook cb;
    cb.decay = decay;
    cb.laplace_eps = laplace_eps;
    cb.ema_sums = Tensor::randn({K, d_code}, rng, 1.0 / std::sqrt(static_cast<Real>(d_code)));
    cb.ema_counts.assign(K, 1.0);
    cb.usage_counts.assign(K, 0);
    cb.vectors = Tensor::zeros({K, d_code});
    cb.refresh_vectors();
    return cb;
}

void Codebook::refresh_vectors() {
    const int K = ema_sums.rows(), d = ema_sums.cols();
    Real n_total = 0;
    for (Real c : ema_counts) n_total += c;
    for (int k = 0; k < K; ++k) {
        const Real smoothed =
            (ema_counts[k] + laplace_eps) * (n_total + K * laplace_eps) / n_total;
        for (int c = 0; c < d; ++c)
            vectors.v[size_t(k) * d + c] = ema_sums.v[size_t(k) * d + c] / smoothed;
    }
}

namespace {

// Parameter layout: patch projection, encoder blocks, decoder blocks,
// unpatch projection. Each block holds (w1, b1, w2, b2).
int enc_base(int block) { return 2 + 4 * block; }
int dec_base(int n_blocks, int block) { return 2 + 4 * n_blocks + 4 * block; }
int unpatch_index(int n_blocks) { return 2 + 8 * n_blocks; }

}  // namespace

VqEncoderDecoder VqEncoderDecoder::init(int patch_size, int channels, int d_code, Rng& rng,
                                        int n_blocks, int kernel) {
    VqEncoderDecoder m;
    m.patch_size = patch_size;
    m.channels = channels;
    m.d_code = d_code;
    m.n_blocks = n_blocks;
    m.kernel = kernel;
    const int pw = patch_size * channels;
    auto weight = [&](const std::string& name, std::vector<int> shape, int fan_in) {
        m.params.emplace_back(name,
                              Tensor::randn(shape, rng, 1.0 / std::sqrt(static_cast<Real>(fan_in))));
    };
    auto bias = [&](const std::string& name, int n) {
        m.params.emplace_back(name, Tensor::zeros({n}));
    };
    weight("patch_w", {pw, d_code}, pw);
    bias("patch_b", d_code);
    for (const char* stack : {"enc", "dec"})
        for (int b = 0; b < n_blocks; ++b) {
            const std::string p = std::string(stack) + std::to_string(b);
            weight(p + "_w1", {kernel, d_code, d_code}, kernel * d_code);
            bias(p + "_b1", d_code);
            weight(p + "_w2", {kernel, d_code, d_code}, kernel * d_code);
            bias(p + "_b2", d_code);
        }
    weight("unpatch_w", {d_code, pw}, d_code);
    bias("unpatch_b", pw);
    return m;
}

std::vector<nn::Parameter*> VqEncoderDecoder::parameters() {
    std::vector<nn::Parameter*> out;
    out.reserve(params.size());
    for (auto& p : params) out.push_back(&p);
    return out;
}

nn::Parameter& VqEncoderDecoder::find(const std::string& name) {
    for (auto& p : params)
        if (p.name == name) return p;
    throw Error(ErrKind::argument, "no parameter named " + name);
}

namespace {

struct TapeNet {
    Tape& tape;
    VqEncoderDecoder& model;
    std::vector<Tape::NodeId> pn;  // node per parameter, model order

    TapeNet(Tape& t, VqEncoderDecoder& m) : tape(t), model(m) {
        pn.reserve(m.params.size());
        for (auto& p : m.params) pn.push_back(t.param(p));
    }

    Tape::NodeId block(Tape::NodeId h, int base, int dilation) const {
        Tape::NodeId c1 = tape.conv1d_causal(h, pn[base], pn[base + 1], dilation);
        Tape::NodeId a = tape.gelu(c1);
        Tape::NodeId c2 = tape.conv1d_causal(a, pn[base + 2], pn[base + 3], dilation);
        return tape.add(h, c2);
    }

    Tape::NodeId encode(Tape::NodeId patches) const {
        Tape::NodeId h = tape.add_rowvec(tape.matmul(patches, pn[0]), pn[1]);
        for (int b = 0; b < model.n_blocks; ++b) h = block(h, enc_base(b), 1 << b);
        return h;
    }

    Tape::NodeId decode(Tape::NodeId zq, int length) const {
        Tape::NodeId h = zq;
        for (int b = 0; b < model.n_blocks; ++b) h = block(h, dec_base(model.n_blocks, b), 1 << b);
        const int ui = unpatch_index(model.n_blocks);
        Tape::NodeId flat = tape.add_rowvec(tape.matmul(h, pn[ui]), pn[ui + 1]);
        return tape.reshape(flat, {length, model.channels});
    }
};

Tensor patches_of(const TimeSeriesInstance& instance, const VqEncoderDecoder& model) {
    const int L = instance.values.rows(), H = instance.values.cols();
    if (H != model.channels)
        throw Error(ErrKind::config, "instance channel count does not match model");
    if (L % model.patch_size != 0)
        throw Error(ErrKind::config, "length not divisible by patch size");
    Tensor p;
    p.shape = {L / model.patch_size, model.patch_size * H};
    p.v = instance.values.v;
    return p;
}

}  // namespace

Tensor patch_embed(const TimeSeriesInstance& instance, VqEncoderDecoder& model) {
    Tape tape;
    TapeNet net(tape, model);
    Tape::NodeId x = tape.constant(patches_of(instance, model));
    Tape::NodeId h = tape.add_rowvec(tape.matmul(x, net.pn[0]), net.pn[1]);
    return tape.val(h);
}

Tensor encode(const TimeSeriesInstance& instance, VqEncoderDecoder& model) {
    Tape tape;
    TapeNet net(tape, model);
    return tape.val(net.encode(tape.constant(patches_of(instance, model))));
}

std::pair<int, Tensor> quantize(const std::vector<Real>& z, const Codebook& codebook) {
    const int K = codebook.size(), d = codebook.dim();
    if (static_cast<int>(z.size()) != d)
        throw Error(ErrKind::argument, "query dimension does not match codebook");
    int best = 0;
    Real best_dist = std::numeric_limits<Real>::infinity();
    for (int k = 0; k < K; ++k) {
        Real dist = 0;
        for (int c = 0; c < d; ++c) {
            const Real diff = z[c] - codebook.vectors.v[size_t(k) * d + c];
            dist += diff * diff;
        }
        if (dist < best_dist) {
            best_dist = dist;
            best = k;
        }
    }
    Tensor row;
    row.shape = {d};
    row.v.assign(codebook.vectors.v.begin() + size_t(best) * d,
                 codebook.vectors.v.begin() + size_t(best + 1) * d);
    return {best, std::move(row)};
}

VqStep vq_step(const TimeSeriesInstance& instance, VqEncoderDecoder& model,
               const Codebook& codebook, Real beta, bool with_grad, Real grad_scale) {
    Tape tape;
    TapeNet net(tape, model);
    Tape::NodeId x = tape.constant(patches_of(instance, model));
    Tape::NodeId z = net.encode(x);
    // Copy: node storage moves when later ops grow the tape.
    const Tensor z_val = tape.val(z);
    const int P = z_val.rows(), d = z_val.cols();

    VqStep step;
    step.z_e = z_val;
    step.plan.z_frozen = z_val;
    step.plan.codes.resize(P);
    step.plan.e_rows = Tensor::zeros({P, d});
    std::vector<Real> row(d);
    for (int p = 0; p < P; ++p) {
        for (int c = 0; c < d; ++c) row[c] = z_val.v[size_t(p) * d + c];
        auto [k, e] = quantize(row, codebook);
        step.plan.codes[p] = k;
        for (int c = 0; c < d; ++c) step.plan.e_rows.v[size_t(p) * d + c] = e.v[c];
    }
    step.plan.delta = step.plan.e_rows;
    for (size_t i = 0; i < step.plan.delta.v.size(); ++i) step.plan.delta.v[i] -= z_val.v[i];

    Tape::NodeId zq = tape.ste(z, step.plan.e_rows);
    Tape::NodeId recon = net.decode(zq, instance.values.rows());
    Tape::NodeId recon_loss = tape.mse(recon, instance.values);
    Tape::NodeId commit = tape.row_sqnorm_mean(z, step.plan.e_rows);
    Tape::NodeId trained = tape.axpy(recon_loss, commit, beta);

    step.result.reconstruction = tape.val(recon);
    step.result.codes = step.plan.codes;
    VqLossReport& rep = step.result.report;
    rep.reconstruction = tape.scalar(recon_loss);
    rep.commitment_term = tape.scalar(commit);
    // Same value as the commitment distance; only the gradient routing
    // differs, and the codebook learns by EMA rather than by gradient.
    rep.codebook_term = rep.commitment_term;
    rep.beta = beta;
    rep.total = rep.reconstruction + rep.codebook_term + beta * rep.commitment_term;
    if (!std::isfinite(rep.total))
        throw Error(ErrKind::divergence, "non-finite loss in tokenizer forward");

    if (with_grad) tape.backward(trained, grad_scale);
    return step;
}

VqForwardResult vq_forward(const TimeSeriesInstance& instance, VqEncoderDecoder& model,
                           const Codebook& codebook, Real beta) {
    return vq_step(instance, model, codebook, beta, false).result;
}

Real vq_total_with_plan(const TimeSeriesInstance& instance, VqEncoderDecoder& model,
                        const QuantPlan& plan, Real beta) {
    Tape tape;
    TapeNet net(tape, model);
    Tape::NodeId x = tape.constant(patches_of(instance, model));
    Tape::NodeId z = net.encode(x);
    // Copy: node storage moves when later ops grow the tape.
    const Tensor z_val = tape.val(z);

    Tensor zq_val = z_val;
    for (size_t i = 0; i < zq_val.v.size(); ++i) zq_val.v[i] += plan.delta.v[i];
    Tape::NodeId zq = tape.constant(std::move(zq_val));
    Tape::NodeId recon = net.decode(zq, instance.values.rows());

    Real recon_loss = 0;
    {
        const Tensor& rv = tape.val(recon);
        for (size_t i = 0; i < rv.v.size(); ++i) {
            const Real diff = rv.v[i] - instance.values.v[i];
            recon_loss += diff * diff;
        }
        recon_loss /= static_cast<Real>(rv.v.size());
    }
    const int P = z_val.rows();
    Real codebook_term = 0, commitment = 0;
    for (size_t i = 0; i < z_val.v.size(); ++i) {
        const Real dc = plan.z_frozen.v[i] - plan.e_rows.v[i];
        codebook_term += dc * dc;
        const Real dm = z_val.v[i] - plan.e_rows.v[i];
        commitment += dm * dm;
    }
    codebook_term /= P;
    commitment /= P;
    return recon_loss + codebook_term + beta * commitment;
}

void ema_update(Codebook& codebook, const Tensor& z, const std::vector<int>& codes) {
    const int K = codebook.size(), d = codebook.dim();
    if (z.cols() != d || z.rows() != static_cast<int>(codes.size()))
        throw Error(ErrKind::argument, "ema batch shape mismatch");
    std::vector<Real> n_k(K, 0.0);
    Tensor sum_k = Tensor::zeros({K, d});
    for (size_t p = 0; p < codes.size(); ++p) {
        const int k = codes[p];
        if (k < 0 || k >= K) throw Error(ErrKind::argument, "code out of range");
        n_k[k] += 1.0;
        for (int c = 0; c < d; ++c) sum_k.v[size_t(k) * d + c] += z.v[p * d + c];
        codebook.usage_counts[k] += 1;
    }
    const Real g = codebook.decay;
    for (int k = 0; k < K; ++k) {
        codebook.ema_counts[k] = g * codebook.ema_counts[k] + (1.0 - g) * n_k[k];
        for (int c = 0; c < d; ++c)
            codebook.ema_sums.v[size_t(k) * d + c] =
                g * codebook.ema_sums.v[size_t(k) * d + c] + (1.0 - g) * sum_k.v[size_t(k) * d + c];
    }
    codebook.refresh_vectors();
}

std::vector<int> tokenize(const TimeSeriesInstance& instance, VqEncoderDecoder& model,
                          const Codebook& codebook) {
    const Tensor z = encode(instance, model);
    const int P = z.rows(), d = z.cols();
    std::vector<int> codes(P);
    std::vector<Real> row(d);
    for (int p = 0; p < P; ++p) {
        for (int c = 0; c < d; ++c) row[c] = z.v[size_t(p) * d + c];
        codes[p] = quantize(row, codebook).first;
    }
    return codes;
}

namespace {

struct Snapshot {
    std::vector<Tensor> values;
    Codebook codebook;
};

Snapshot take_snapshot(VqEncoderDecoder& model, const Codebook& cb) {
    Snapshot s;
    s.codebook = cb;
    for (auto& p : model.params) s.values.push_back(p.value);
    return s;
}

void restore_snapshot(VqEncoderDecoder& model, Codebook& cb, const Snapshot& s) {
    cb = s.codebook;
    for (size_t i = 0; i < model.params.size(); ++i) model.params[i].value = s.values[i];
}

}  // namespace

TokenizerArtifacts train_tokenizer(const CorpusSplit& split, const DomainSpec& spec,
                                   const VqTrainConfig& config, uint64_t seed) {
    if (config.epochs < 0 || config.batch_size <= 0 || config.learning_rate <= 0)
        throw Error(ErrKind::config, "invalid tokenizer training configuration");
    if (config.codebook_size != spec.codebook_size)
        throw Error(ErrKind::config, "config codebook_size " + std::to_string(config.codebook_size) +
                                         " disagrees with domain '" + spec.name + "' (" +
                                         std::to_string(spec.codebook_size) + ")");
    if (split.train.empty()) throw Error(ErrKind::data, "empty training split");

    Rng rng(derive_seed(seed, "tokenizer:" + spec.name));
    TokenizerArtifacts art;
    art.model = VqEncoderDecoder::init(spec.patch_size, spec.channels, config.d_code, rng,
                                       config.n_blocks, config.kernel);
    art.codebook =
        Codebook::init(config.codebook_size, config.d_code, rng, config.decay, config.laplace_eps);
    auto params = art.model.parameters();
    nn::AdamConfig adam;
    adam.lr = config.learning_rate;

    const int n = static_cast<int>(split.train.size());
    int adam_t = 0;
    int global_step = 0;
    Snapshot snap = take_snapshot(art.model, art.codebook);

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::vector<int> order(n);
        for (int i = 0; i < n; ++i) order[i] = i;
        rng.shuffle(order);

        std::vector<long long> epoch_usage(config.codebook_size, 0);
        VqLossReport epoch_rep;
        epoch_rep.beta = config.beta;
        int seen = 0;
        Tensor last_z;

        for (int start = 0; start < n; start += config.batch_size) {
            const int count = std::min(config.batch_size, n - start);
            for (auto* p : params) p->zero_grad();
            Tensor batch_z = Tensor::zeros({count * spec.token_count(), config.d_code});
            std::vector<int> batch_codes;
            batch_codes.reserve(size_t(count) * spec.token_count());
            ++global_step;
            try {
                for (int i = 0; i < count; ++i) {
                    const auto& inst = split.train[order[start + i]];
                    VqStep step = vq_step(inst, art.model, art.codebook, config.beta, true,
                                          1.0 / count);
                    const int P = step.z_e.rows();
                    for (int p = 0; p < P; ++p)
                        for (int c = 0; c < config.d_code; ++c)
                            batch_z.v[size_t(batch_codes.size() + p) * config.d_code + c] =
                                step.z_e.v[size_t(p) * config.d_code + c];
                    batch_codes.insert(batch_codes.end(), step.plan.codes.begin(),
                                       step.plan.codes.end());
                    epoch_rep.reconstruction += step.result.report.reconstruction;
                    epoch_rep.codebook_term += step.result.report.codebook_term;
                    epoch_rep.commitment_term += step.result.report.commitment_term;
                    epoch_rep.total += step.result.report.total;
                    ++seen;
                }
            } catch (const Error& e) {
                if (e.kind() != ErrKind::divergence) throw;
                restore_snapshot(art.model, art.codebook, snap);
                art.diverged_at_step = global_step;
                return art;
            }
            nn::clip_global_norm(params, config.grad_clip);
            adamw_step(params, adam, ++adam_t);
            ema_update(art.codebook, batch_z, batch_codes);
            for (int c : batch_codes) ++epoch_usage[c];
            last_z = std::move(batch_z);
            snap = take_snapshot(art.model, art.codebook);
        }

        epoch_rep.reconstruction /= seen;
        epoch_rep.codebook_term /= seen;
        epoch_rep.commitment_term /= seen;
        epoch_rep.total /= seen;
        art.history.push_back(epoch_rep);

        if (config.dead_code_revival) {
            bool revived = false;
            for (int k = 0; k < config.codebook_size; ++k) {
                if (epoch_usage[k] != 0) continue;
                const int pick = static_cast<int>(rng.below(uint64_t(last_z.rows())));
                art.codebook.ema_counts[k] = 1.0;
                for (int c = 0; c < config.d_code; ++c)
                    art.codebook.ema_sums.v[size_t(k) * config.d_code + c] =
                        last_z.v[size_t(pick) * config.d_code + c];
                revived = true;
            }
            if (revived) art.codebook.refresh_vectors();
        }
    }
    return art;
}

Real reconstruction_mse(const std::vector<TimeSeriesInstance>& instances, VqEncoderDecoder& model,
                        const Codebook& codebook) {
    if (instances.empty()) throw Error(ErrKind::argument, "no instances for reconstruction");
    Real acc = 0;
    for (const auto& inst : instances)
        acc += vq_forward(inst, model, codebook, 0.0).report.reconstruction;
    return acc / static_cast<Real>(instances.size());
}

void save_tokenizer(const std::string& path, const TokenizerArtifacts& artifacts,
                    const DomainSpec& spec, const VqTrainConfig& config, uint64_t seed) {
    CheckpointData data;
    data.set_meta("kind", "tokenizer");
    data.set_meta("spec_hash", hex64(spec.hash()));
    data.set_meta("domain", spec.name);
    data.set_meta("seed", std::to_string(seed));
    data.set_meta("patch_size", std::to_string(artifacts.model.patch_size));
    data.set_meta("channels", std::to_string(artifacts.model.channels));
    data.set_meta("d_code", std::to_string(artifacts.model.d_code));
    data.set_meta("n_blocks", std::to_string(artifacts.model.n_blocks));
    data.set_meta("kernel", std::to_string(artifacts.model.kernel));
    data.set_meta("codebook_size", std::to_string(config.codebook_size));
    data.set_meta("beta", format_real(config.beta));
    data.set_meta("decay", format_real(artifacts.codebook.decay));
    data.set_meta("laplace_eps", format_real(artifacts.codebook.laplace_eps));
    data.set_meta("epochs", std::to_string(config.epochs));
    if (artifacts.diverged_at_step)
        data.set_meta("diverged_at_step", std::to_string(*artifacts.diverged_at_step));
    for (const auto& p : artifacts.model.params) data.add_tensor(p.name, p.value);
    data.add_tensor("codebook.vectors", artifacts.codebook.vectors);
    data.add_tensor("codebook.ema_sums", artifacts.codebook.ema_sums);
    Tensor counts;
    counts.shape = {artifacts.codebook.size()};
    for (Real c : artifacts.codebook.ema_counts) counts.v.push_back(c);
    data.add_tensor("codebook.ema_counts", std::move(counts));
    Tensor usage;
    usage.shape = {artifacts.codebook.size()};
    for (long long u : artifacts.codebook.usage_counts) usage.v.push_back(static_cast<Real>(u));
    data.add_tensor("codebook.usage_counts", std::move(usage));
    save_checkpoint(path, data);
}

TokenizerArtifacts load_tokenizer(const std::string& path, const DomainSpec& spec) {
    CheckpointData data = load_checkpoint(path);
    const std::string* kind = data.meta_value("kind");
    if (!kind || *kind != "tokenizer")
        throw Error(ErrKind::incompatible, path + " is not a tokenizer checkpoint");
    const std::string* spec_hash = data.meta_value("spec_hash");
    if (!spec_hash || *spec_hash != hex64(spec.hash()))
        throw Error(ErrKind::incompatible,
                    "tokenizer checkpoint was trained for a different domain spec");
    auto meta_int = [&](const char* key) {
        const std::string* v = data.meta_value(key);
        if (!v) throw Error(ErrKind::incompatible, std::string("checkpoint missing ") + key);
        bool ok = false;
        const long long n = parse_int(*v, ok);
        if (!ok) throw Error(ErrKind::incompatible, std::string("bad checkpoint field ") + key);
        return static_cast<int>(n);
    };
    auto meta_real = [&](const char* key) {
        const std::string* v = data.meta_value(key);
        if (!v) throw Error(ErrKind::incompatible, std::string("checkpoint missing ") + key);
        bool ok = false;
        const Real r = parse_real(*v, ok);
        if (!ok) throw Error(ErrKind::incompatible, std::string("bad checkpoint field ") + key);
        return r;
    };

    TokenizerArtifacts art;
    Rng dummy(0);
    art.model = VqEncoderDecoder::init(meta_int("patch_size"), meta_int("channels"),
                                       meta_int("d_code"), dummy, meta_int("n_blocks"),
                                       meta_int("kernel"));
    for (auto& p : art.model.params) {
        const Tensor* t = data.tensor(p.name);
        if (!t || t->shape != p.value.shape)
            throw Error(ErrKind::incompatible, "checkpoint tensor mismatch: " + p.name);
        p.value = *t;
    }
    const Tensor* vecs = data.tensor("codebook.vectors");
    const Tensor* sums = data.tensor("codebook.ema_sums");
    const Tensor* counts = data.tensor("codebook.ema_counts");
    const Tensor* usage = data.tensor("codebook.usage_counts");
    if (!vecs || !sums || !counts || !usage)
        throw Error(ErrKind::incompatible, "checkpoint missing codebook state");
    art.codebook.vectors = *vecs;
    art.codebook.ema_sums = *sums;
    art.codebook.ema_counts.assign(counts->v.begin(), counts->v.end());
    art.codebook.usage_counts.clear();
    for (Real u : usage->v) art.codebook.usage_counts.push_back(static_cast<long long>(u));
    art.codebook.decay = meta_real("decay");
    art.codebook.laplace_eps = meta_real("laplace_eps");
    if (const std::string* d = data.meta_value("diverged_at_step")) {
        bool ok = false;
        art.diverged_at_step = static_cast<int>(parse_int(*d, ok));
    }
    return art;
}

}  // namespace instructtime::vq
