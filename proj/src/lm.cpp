#include "instructtime/lm.hpp"

#include <cmath>
#include <sstream>

#include "instructtime/checkpoint.hpp"

namespace instructtime::lm {

using nn::Tape;
using nn::Tensor;

void LmConfig::validate() const {
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || context_window <= 0)
        throw Error(ErrKind::config, "model sizes must be positive");
    if (d_model % n_heads != 0)
        throw Error(ErrKind::config, "d_model must be divisible by n_heads");
    if (dropout < 0 || dropout >= 1) throw Error(ErrKind::config, "dropout must lie in [0,1)");
    if (projector_hidden.size() < 2)
        throw Error(ErrKind::config, "projector needs at least input and output widths");
    for (int w : projector_hidden)
        if (w <= 0) throw Error(ErrKind::config, "projector widths must be positive");
    if (projector_hidden.back() != d_model)
        throw Error(ErrKind::config, "projector must end at d_model");
}

BoundCodebooks BoundCodebooks::bind(const Vocabulary& vocab,
                                    const std::map<std::string, const vq::Codebook*>& by_domain) {
    BoundCodebooks out;
    for (const auto& range : vocab.ts_ranges) {
        auto it = by_domain.find(range.domain);
        if (it == by_domain.end()) continue;
        if (it->second->size() != range.size)
            throw Error(ErrKind::incompatible,
                        "codebook size does not match TS range of domain " + range.domain);
        out.entries.push_back({range, it->second});
    }
    for (const auto& [domain, cb] : by_domain)
        if (!vocab.range_for_domain(domain))
            throw Error(ErrKind::argument, "no TS range for domain '" + domain + "'");
    return out;
}

const BoundCodebooks::Entry* BoundCodebooks::find(int id) const {
    for (const auto& e : entries)
        if (id >= e.range.begin && id < e.range.begin + e.range.size) return &e;
    return nullptr;
}

namespace {

// Parameter layout: embeddings, 16 per block, final norm, head, projector.
constexpr int kPerLayer = 16;

int layer_base(int layer) { return 2 + kPerLayer * layer; }
int final_base(int n_layers) { return 2 + kPerLayer * n_layers; }

}  // namespace

DecoderModel DecoderModel::init(const LmConfig& config, const Vocabulary& vocab, uint64_t seed) {
    config.validate();
    DecoderModel m;
    m.config = config;
    m.text_vocab_size = vocab.text_vocab_size();
    m.full_vocab_size = vocab.total_size();
    m.vocab_hash = vocab.hash();
    m.seed = seed;
    Rng rng(derive_seed(seed, "lm-init"));
    const int d = config.d_model;
    const Real std0 = 0.02;
    auto weight = [&](const std::string& name, std::vector<int> shape) {
        m.params.emplace_back(name, Tensor::randn(shape, rng, std0));
    };
    auto zeros = [&](const std::string& name, std::vector<int> shape) {
        m.params.emplace_back(name, Tensor::zeros(shape));
    };
    auto ones = [&](const std::string& name, int n) {
        Tensor t = Tensor::zeros({n});
        t.fill(1.0);
        m.params.emplace_back(name, std::move(t));
    };
    weight("text_embedding", {m.text_vocab_size, d});
    weight("pos_embedding", {config.context_window, d});
    for (int l = 0; l < config.n_layers; ++l) {
        const std::string p = "l" + std::to_string(l) + "_";
        ones(p + "ln1_g", d);
        zeros(p + "ln1_b", {d});
        weight(p + "wq", {d, d});
        zeros(p + "bq", {d});
        weight(p + "wk", {d, d});
        zeros(p + "bk", {d});
        weight(p + "wv", {d, d});
        zeros(p + "bv", {d});
        weight(p + "wo", {d, d});
        zeros(p + "bo", {d});
        ones(p + "ln2_g", d);
        zeros(p + "ln2_b", {d});
        weight(p + "ffn_w1", {d, 4 * d});
        zeros(p + "ffn_b1", {4 * d});
        weight(p + "ffn_w2", {4 * d, d});
        zeros(p + "ffn_b2", {d});
    }
    ones("ln_f_g", d);
    zeros("ln_f_b", {d});
    weight("head_w", {d, m.full_vocab_size});
    zeros("head_b", {m.full_vocab_size});
    for (size_t i = 0; i + 1 < config.projector_hidden.size(); ++i) {
        weight("proj" + std::to_string(i) + "_w",
               {config.projector_hidden[i], config.projector_hidden[i + 1]});
        zeros("proj" + std::to_string(i) + "_b", {config.projector_hidden[i + 1]});
    }
    return m;
}

std::vector<nn::Parameter*> DecoderModel::parameters() {
    std::vector<nn::Parameter*> out;
    out.reserve(params.size());
    for (auto& p : params) out.push_back(&p);
    return out;
}

nn::Parameter& DecoderModel::find(const std::string& name) {
    for (auto& p : params)
        if (p.name == name) return p;
    throw Error(ErrKind::argument, "no parameter named " + name);
}

uint64_t DecoderModel::param_hash() const {
    uint64_t h = fnv1a("params");
    for (const auto& p : params) {
        h = fnv1a(p.name, h);
        h = hash_combine(h, p.value.content_hash());
    }
    return h;
}

namespace {

Tape::NodeId dropout_node(Tape& tape, Tape::NodeId x, Real p, Rng* rng) {
    if (!rng || p <= 0) return x;
    Tensor mask = Tensor::zeros(tape.val(x).shape);
    const Real keep = 1.0 - p;
    for (auto& m : mask.v) m = rng->uniform() < p ? 0.0 : 1.0 / keep;
    return tape.mul(x, tape.constant(std::move(mask)));
}

struct ParamNodes {
    std::vector<Tape::NodeId> pn;
};

}  // namespace

ForwardPass forward_tape(const PromptSequence& prompt, DecoderModel& model,
                         const BoundCodebooks& codebooks, Rng* dropout_rng) {
    const int T = static_cast<int>(prompt.size());
    if (T == 0) throw Error(ErrKind::argument, "empty prompt");
    if (T > model.config.context_window)
        throw Error(ErrKind::argument, "prompt length " + std::to_string(T) +
                                           " exceeds context window " +
                                           std::to_string(model.config.context_window));

    ForwardPass fp;
    Tape& tape = fp.tape;
    std::vector<Tape::NodeId> pn;
    pn.reserve(model.params.size());
    for (auto& p : model.params) pn.push_back(tape.param(p));

    // Split positions across the two embedding paths.
    std::vector<int> text_pos, text_ids, ts_pos;
    const int d_in = model.config.projector_hidden.front();
    Tensor ts_rows;
    ts_rows.shape = {0, d_in};
    for (int i = 0; i < T; ++i) {
        const int id = prompt.ids[i];
        if (id < 0 || id >= model.full_vocab_size)
            throw Error(ErrKind::data, "token id " + std::to_string(id) + " outside vocabulary");
        if (id < model.text_vocab_size) {
            text_pos.push_back(i);
            text_ids.push_back(id);
            continue;
        }
        const BoundCodebooks::Entry* entry = codebooks.find(id);
        if (!entry)
            throw Error(ErrKind::data,
                        "TS id " + std::to_string(id) + " has no bound codebook row");
        if (entry->codebook->dim() != d_in)
            throw Error(ErrKind::incompatible, "codebook dimension does not match projector input");
        const int code = id - entry->range.begin;
        ts_pos.push_back(i);
        ++ts_rows.shape[0];
        const auto& cv = entry->codebook->vectors.v;
        ts_rows.v.insert(ts_rows.v.end(), cv.begin() + size_t(code) * d_in,
                         cv.begin() + size_t(code + 1) * d_in);
    }

    Tape::NodeId text_emb = -1;
    if (!text_ids.empty()) text_emb = tape.gather_rows(pn[0], text_ids);
    Tape::NodeId ts_emb = -1;
    if (!ts_pos.empty()) {
        // Codebook rows enter as constants: frozen during both LM phases.
        Tape::NodeId h = tape.constant(std::move(ts_rows));
        const int n_proj = static_cast<int>(model.config.projector_hidden.size()) - 1;
        const int base = final_base(model.config.n_layers) + 4;
        for (int i = 0; i < n_proj; ++i) {
            h = tape.add_rowvec(tape.matmul(h, pn[base + 2 * i]), pn[base + 2 * i + 1]);
            if (i + 1 < n_proj) h = tape.gelu(h);
        }
        ts_emb = h;
    }
    Tape::NodeId emb = tape.interleave_rows(T, text_emb, text_pos, ts_emb, ts_pos);

    std::vector<int> positions(T);
    for (int i = 0; i < T; ++i) positions[i] = i;
    Tape::NodeId x = tape.add(emb, tape.gather_rows(pn[1], positions));
    x = dropout_node(tape, x, model.config.dropout, dropout_rng);

    for (int l = 0; l < model.config.n_layers; ++l) {
        const int b = layer_base(l);
        Tape::NodeId a_in = tape.layer_norm(x, pn[b], pn[b + 1]);
        Tape::NodeId att =
            tape.causal_self_attention(a_in, pn[b + 2], pn[b + 3], pn[b + 4], pn[b + 5], pn[b + 6],
                                       pn[b + 7], pn[b + 8], pn[b + 9], model.config.n_heads);
        x = tape.add(x, dropout_node(tape, att, model.config.dropout, dropout_rng));
        Tape::NodeId f_in = tape.layer_norm(x, pn[b + 10], pn[b + 11]);
        Tape::NodeId h1 = tape.gelu(tape.add_rowvec(tape.matmul(f_in, pn[b + 12]), pn[b + 13]));
        Tape::NodeId h2 = tape.add_rowvec(tape.matmul(h1, pn[b + 14]), pn[b + 15]);
        x = tape.add(x, dropout_node(tape, h2, model.config.dropout, dropout_rng));
    }
    const int fb = final_base(model.config.n_layers);
    fp.hidden = tape.layer_norm(x, pn[fb], pn[fb + 1]);
    fp.logits = tape.add_rowvec(tape.matmul(fp.hidden, pn[fb + 2]), pn[fb + 3]);
    return fp;
}

nn::Tensor embed_hybrid(const PromptSequence& prompt, DecoderModel& model,
                        const BoundCodebooks& codebooks) {
    const int T = static_cast<int>(prompt.size());
    Tape tape;
    Tape::NodeId text_table = tape.param(model.find("text_embedding"));
    Tape::NodeId pos_table = tape.param(model.find("pos_embedding"));

    std::vector<int> text_pos, text_ids, ts_pos;
    const int d_in = model.config.projector_hidden.front();
    Tensor ts_rows;
    ts_rows.shape = {0, d_in};
    for (int i = 0; i < T; ++i) {
        const int id = prompt.ids[i];
        if (id < model.text_vocab_size) {
            text_pos.push_back(i);
            text_ids.push_back(id);
            continue;
        }
        const BoundCodebooks::Entry* entry = codebooks.find(id);
        if (!entry)
            throw Error(ErrKind::data,
                        "TS id " + std::to_string(id) + " has no bound codebook row");
        const int code = id - entry->range.begin;
        ts_pos.push_back(i);
        ++ts_rows.shape[0];
        const auto& cv = entry->codebook->vectors.v;
        ts_rows.v.insert(ts_rows.v.end(), cv.begin() + size_t(code) * d_in,
                         cv.begin() + size_t(code + 1) * d_in);
    }
    Tape::NodeId text_emb = -1;
    if (!text_ids.empty()) text_emb = tape.gather_rows(text_table, text_ids);
    Tape::NodeId ts_emb = -1;
    if (!ts_pos.empty()) {
        Tape::NodeId h = tape.constant(std::move(ts_rows));
        const int n_proj = static_cast<int>(model.config.projector_hidden.size()) - 1;
        for (int i = 0; i < n_proj; ++i) {
            Tape::NodeId w = tape.param(model.find("proj" + std::to_string(i) + "_w"));
            Tape::NodeId b = tape.param(model.find("proj" + std::to_string(i) + "_b"));
            h = tape.add_rowvec(tape.matmul(h, w), b);
            if (i + 1 < n_proj) h = tape.gelu(h);
        }
        ts_emb = h;
    }
    Tape::NodeId emb = tape.interleave_rows(T, text_emb, text_pos, ts_emb, ts_pos);
    std::vector<int> positions(T);
    for (int i = 0; i < T; ++i) positions[i] = i;
    Tape::NodeId out = tape.add(emb, tape.gather_rows(pos_table, positions));
    return tape.val(out);
}

nn::Tensor forward(const PromptSequence& prompt, DecoderModel& model,
                   const BoundCodebooks& codebooks) {
    ForwardPass fp = forward_tape(prompt, model, codebooks, nullptr);
    return fp.tape.val(fp.logits);
}

nn::Tensor hidden_states(const PromptSequence& prompt, DecoderModel& model,
                         const BoundCodebooks& codebooks) {
    ForwardPass fp = forward_tape(prompt, model, codebooks, nullptr);
    return fp.tape.val(fp.hidden);
}

int masked_target_count(const PromptSequence& prompt) {
    int count = 0;
    for (size_t i = 1; i < prompt.size(); ++i)
        if (prompt.loss_mask[i]) ++count;
    return count;
}

Real ar_loss(const nn::Tensor& logits, const PromptSequence& prompt) {
    const int T = static_cast<int>(prompt.size());
    const int V = logits.cols();
    if (logits.rows() != T) throw Error(ErrKind::argument, "logit rows must match prompt length");
    const int count = masked_target_count(prompt);
    if (count == 0)
        throw Error(ErrKind::data, "degenerate sample: loss mask selects no targets");
    Real acc = 0;
    for (int i = 1; i < T; ++i) {
        if (!prompt.loss_mask[i]) continue;
        const int row = i - 1;
        Real mx = logits.v[size_t(row) * V];
        for (int c = 1; c < V; ++c) mx = std::max(mx, logits.v[size_t(row) * V + c]);
        Real z = 0;
        for (int c = 0; c < V; ++c) z += std::exp(logits.v[size_t(row) * V + c] - mx);
        acc += mx + std::log(z) - logits.v[size_t(row) * V + prompt.ids[i]];
    }
    return acc / count;
}

std::vector<int> generate(const PromptSequence& prefix, DecoderModel& model,
                          const BoundCodebooks& codebooks, int max_new) {
    if (max_new < 1) throw Error(ErrKind::argument, "max_new must be at least 1");
    PromptSequence work = prefix;
    std::vector<int> out;
    for (int step = 0; step < max_new; ++step) {
        if (static_cast<int>(work.size()) > model.config.context_window)
            throw GenerationOverflow("generation exceeded the context window", out);
        const Tensor logits = forward(work, model, codebooks);
        const int V = logits.cols();
        const int last = logits.rows() - 1;
        int best = -1;
        Real best_v = -std::numeric_limits<Real>::infinity();
        for (int c = 0; c < V; ++c) {
            if (c >= model.text_vocab_size) continue;  // TS ids never generate
            const Real v = logits.v[size_t(last) * V + c];
            if (v > best_v) {
                best_v = v;
                best = c;
            }
        }
        out.push_back(best);
        if (best == Vocabulary::kEos) break;
        work.ids.push_back(best);
        work.loss_mask.push_back(0);
        work.tags.push_back(SegTag::answer);
    }
    return out;
}

void save_model(const std::string& path, const DecoderModel& model) {
    CheckpointData data;
    data.set_meta("kind", "lm");
    data.set_meta("d_model", std::to_string(model.config.d_model));
    data.set_meta("n_layers", std::to_string(model.config.n_layers));
    data.set_meta("n_heads", std::to_string(model.config.n_heads));
    data.set_meta("context_window", std::to_string(model.config.context_window));
    data.set_meta("dropout", format_real(model.config.dropout));
    {
        std::ostringstream os;
        for (size_t i = 0; i < model.config.projector_hidden.size(); ++i) {
            if (i) os << ',';
            os << model.config.projector_hidden[i];
        }
        data.set_meta("projector_hidden", os.str());
    }
    data.set_meta("text_vocab_size", std::to_string(model.text_vocab_size));
    data.set_meta("full_vocab_size", std::to_string(model.full_vocab_size));
    data.set_meta("vocab_hash", hex64(model.vocab_hash));
    data.set_meta("phase", model.phase);
    data.set_meta("seed", std::to_string(model.seed));
    data.set_meta("step_count", std::to_string(model.step_count));
    for (const auto& p : model.params) data.add_tensor(p.name, p.value);
    save_checkpoint(path, data);
}

DecoderModel load_model(const std::string& path) {
    CheckpointData data = load_checkpoint(path);
    const std::string* kind = data.meta_value("kind");
    if (!kind || *kind != "lm")
        throw Error(ErrKind::incompatible, path + " is not a model checkpoint");
    auto meta_str = [&](const char* key) -> const std::string& {
        const std::string* v = data.meta_value(key);
        if (!v) throw Error(ErrKind::incompatible, std::string("checkpoint missing ") + key);
        return *v;
    };
    auto meta_ll = [&](const char* key) {
        bool ok = false;
        const long long n = parse_int(meta_str(key), ok);
        if (!ok) throw Error(ErrKind::incompatible, std::string("bad checkpoint field ") + key);
        return n;
    };

    DecoderModel m;
    m.config.d_model = static_cast<int>(meta_ll("d_model"));
    m.config.n_layers = static_cast<int>(meta_ll("n_layers"));
    m.config.n_heads = static_cast<int>(meta_ll("n_heads"));
    m.config.context_window = static_cast<int>(meta_ll("context_window"));
    {
        bool ok = false;
        m.config.dropout = parse_real(meta_str("dropout"), ok);
        if (!ok) throw Error(ErrKind::incompatible, "bad checkpoint field dropout");
    }
    m.config.projector_hidden.clear();
    for (const auto& tok : split(meta_str("projector_hidden"), ',')) {
        bool ok = false;
        m.config.projector_hidden.push_back(static_cast<int>(parse_int(tok, ok)));
        if (!ok) throw Error(ErrKind::incompatible, "bad checkpoint field projector_hidden");
    }
    m.text_vocab_size = static_cast<int>(meta_ll("text_vocab_size"));
    m.full_vocab_size = static_cast<int>(meta_ll("full_vocab_size"));
    {
        const std::string& h = meta_str("vocab_hash");
        uint64_t v = 0;
        for (char c : h) {
            v <<= 4;
            if (c >= '0' && c <= '9') v |= uint64_t(c - '0');
            else if (c >= 'a' && c <= 'f') v |= uint64_t(c - 'a' + 10);
            else throw Error(ErrKind::incompatible, "bad checkpoint field vocab_hash");
        }
        m.vocab_hash = v;
    }
    m.phase = meta_str("phase");
    m.seed = static_cast<uint64_t>(meta_ll("seed"));
    m.step_count = meta_ll("step_count");
    m.config.validate();

    for (const auto& [name, t] : data.tensors) m.params.emplace_back(name, t);

    // Forward indexes parameters positionally; verify the layout.
    const size_t expected = 2 + size_t(kPerLayer) * m.config.n_layers + 4 +
                            2 * (m.config.projector_hidden.size() - 1);
    if (m.params.size() != expected || m.params[0].name != "text_embedding" ||
        m.params[1].name != "pos_embedding")
        throw Error(ErrKind::incompatible, "model checkpoint parameter layout mismatch");
    return m;
}

}  // namespace instructtime::lm
