#include "instructtime/dataset.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "instructtime/common.hpp"
#include "instructtime/rng.hpp"

namespace instructtime {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// Integer-valued reals (fraction * count) must not be bumped by ulp noise.
int ceil_guarded(double x) {
    const double r = std::round(x);
    if (std::abs(x - r) < 1e-9) return static_cast<int>(r);
    return static_cast<int>(std::ceil(x));
}

bool contains_token_subseq(const std::vector<std::string>& hay,
                           const std::vector<std::string>& needle) {
    if (needle.empty() || needle.size() > hay.size()) return false;
    for (size_t i = 0; i + needle.size() <= hay.size(); ++i) {
        bool all = true;
        for (size_t j = 0; j < needle.size(); ++j)
            if (hay[i + j] != needle[j]) {
                all = false;
                break;
            }
        if (all) return true;
    }
    return false;
}

}  // namespace

const std::string* DomainSpec::sentence_for(const std::string& label_id) const {
    for (const auto& [id, text] : labels)
        if (id == label_id) return &text;
    return nullptr;
}

void DomainSpec::validate() const {
    if (name.empty()) throw Error(ErrKind::config, "domain name empty");
    if (channels <= 0 || length <= 0 || patch_size <= 0 || codebook_size <= 0)
        throw Error(ErrKind::config, "domain '" + name + "': sizes must be positive");
    if (length % patch_size != 0)
        throw Error(ErrKind::config, "domain '" + name + "': length " + std::to_string(length) +
                                         " not divisible by patch_size " +
                                         std::to_string(patch_size));
    if (token_budget <= 0)
        throw Error(ErrKind::config, "domain '" + name + "': token_budget must be positive");
    const int tokens = token_count();
    if (std::abs(tokens - token_budget) > 0.10 * token_budget + 1e-9)
        throw Error(ErrKind::config, "domain '" + name + "': token count " +
                                         std::to_string(tokens) + " deviates more than 10% from " +
                                         "token_budget " + std::to_string(token_budget));
    if (labels.empty()) throw Error(ErrKind::config, "domain '" + name + "': no labels");
    std::vector<std::vector<std::string>> toks;
    toks.reserve(labels.size());
    for (const auto& [id, text] : labels) {
        if (id.empty() || text.empty())
            throw Error(ErrKind::config, "domain '" + name + "': empty label id or sentence");
        toks.push_back(tokenize_words(text));
    }
    for (size_t i = 0; i < toks.size(); ++i)
        for (size_t j = 0; j < toks.size(); ++j)
            if (i != j && contains_token_subseq(toks[i], toks[j]))
                throw Error(ErrKind::config,
                            "domain '" + name + "': label sentence '" + labels[j].second +
                                "' is contained in '" + labels[i].second +
                                "'; sentences must be pairwise non-substrings");
}

uint64_t DomainSpec::hash() const {
    uint64_t h = fnv1a(name);
    h = hash_combine(h, static_cast<uint64_t>(channels));
    h = hash_combine(h, static_cast<uint64_t>(length));
    h = hash_combine(h, static_cast<uint64_t>(patch_size));
    h = hash_combine(h, static_cast<uint64_t>(codebook_size));
    h = hash_combine(h, static_cast<uint64_t>(token_budget));
    h = fnv1a(task_description, h);
    for (const auto& [id, text] : labels) {
        h = fnv1a(id, h);
        h = fnv1a(text, h);
    }
    for (const auto& key : context_schema) h = fnv1a(key, h);
    return h;
}

const DomainData* Corpus::find(const std::string& name) const {
    for (const auto& d : domains)
        if (d.spec.name == name) return &d;
    return nullptr;
}

DomainData* Corpus::find(const std::string& name) {
    for (auto& d : domains)
        if (d.spec.name == name) return &d;
    return nullptr;
}

namespace {

std::vector<TimeSeriesInstance> load_split_csv(const fs::path& path, const DomainSpec& spec) {
    std::ifstream in(path);
    if (!in) throw Error(ErrKind::io, "cannot open " + path.string());
    std::vector<TimeSeriesInstance> out;
    std::string line;
    int row = 0;
    const size_t want = 3 + size_t(spec.length) * spec.channels;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto fields = split(line, ',');
        if (fields.size() != want)
            throw Error(ErrKind::data, path.string() + " row " + std::to_string(row) + ": got " +
                                           std::to_string(fields.size()) + " fields, expected " +
                                           std::to_string(want));
        TimeSeriesInstance inst;
        inst.instance_id = fields[0];
        inst.domain = spec.name;
        for (const auto& lbl : split(fields[1], '|')) {
            if (lbl.empty()) continue;
            if (!spec.sentence_for(lbl))
                throw Error(ErrKind::data, path.string() + " row " + std::to_string(row) +
                                               ": unknown label '" + lbl + "'");
            inst.labels.push_back(lbl);
        }
        if (inst.labels.empty())
            throw Error(ErrKind::data, path.string() + " row " + std::to_string(row) + ": no labels");
        if (!fields[2].empty()) {
            for (const auto& pair : split(fields[2], ';')) {
                if (pair.empty()) continue;
                const size_t eq = pair.find('=');
                if (eq == std::string::npos)
                    throw Error(ErrKind::data, path.string() + " row " + std::to_string(row) +
                                                   ": malformed context '" + pair + "'");
                inst.context.emplace_back(pair.substr(0, eq), pair.substr(eq + 1));
            }
        }
        inst.values = nn::Tensor::zeros({spec.length, spec.channels});
        for (size_t i = 0; i < inst.values.v.size(); ++i) {
            bool ok = false;
            inst.values.v[i] = parse_real(fields[3 + i], ok);
            if (!ok || !std::isfinite(inst.values.v[i]))
                throw Error(ErrKind::data, path.string() + " row " + std::to_string(row) +
                                               ": bad value '" + fields[3 + i] + "'");
        }
        out.push_back(std::move(inst));
        ++row;
    }
    return out;
}

void write_split_csv(const fs::path& path, const std::vector<TimeSeriesInstance>& instances) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrKind::io, "cannot write " + path.string());
    for (const auto& inst : instances) {
        out << inst.instance_id << ',';
        for (size_t i = 0; i < inst.labels.size(); ++i) {
            if (i) out << '|';
            out << inst.labels[i];
        }
        out << ',';
        for (size_t i = 0; i < inst.context.size(); ++i) {
            if (i) out << ';';
            out << inst.context[i].first << '=' << inst.context[i].second;
        }
        for (Real v : inst.values.v) out << ',' << format_real(v);
        out << '\n';
    }
}

}  // namespace

Corpus load_corpus(const std::string& root_path) {
    const fs::path root(root_path);
    const fs::path manifest_path = root / "manifest.json";
    if (!fs::exists(manifest_path))
        throw Error(ErrKind::config, "missing manifest: " + manifest_path.string());
    std::ifstream in(manifest_path);
    json manifest;
    try {
        in >> manifest;
    } catch (const std::exception& e) {
        throw Error(ErrKind::config, "manifest parse failure: " + std::string(e.what()));
    }
    if (!manifest.contains("domains") || !manifest["domains"].is_array())
        throw Error(ErrKind::config, "manifest lacks a 'domains' array");

    Corpus corpus;
    for (const auto& d : manifest["domains"]) {
        DomainData data;
        DomainSpec& spec = data.spec;
        try {
            spec.name = d.at("name").get<std::string>();
            spec.channels = d.at("channels").get<int>();
            spec.length = d.at("length").get<int>();
            spec.patch_size = d.at("patch_size").get<int>();
            spec.codebook_size = d.at("codebook_size").get<int>();
            spec.token_budget = d.at("token_budget").get<int>();
            spec.task_description = d.at("task_description").get<std::string>();
            for (const auto& l : d.at("labels"))
                spec.labels.emplace_back(l.at("id").get<std::string>(),
                                         l.at("text").get<std::string>());
            if (d.contains("context_schema"))
                for (const auto& k : d["context_schema"])
                    spec.context_schema.push_back(k.get<std::string>());
            if (d.contains("train_fraction"))
                data.split.fraction = d["train_fraction"].get<double>();
        } catch (const json::exception& e) {
            throw Error(ErrKind::config, "manifest domain entry malformed: " + std::string(e.what()));
        }
        spec.validate();
        data.split.train = load_split_csv(root / spec.name / "train.csv", spec);
        data.split.test = load_split_csv(root / spec.name / "test.csv", spec);
        corpus.domains.push_back(std::move(data));
    }
    return corpus;
}

void write_corpus(const std::string& root_path, const Corpus& corpus) {
    const fs::path root(root_path);
    fs::create_directories(root);
    json manifest;
    manifest["domains"] = json::array();
    for (const auto& d : corpus.domains) {
        const DomainSpec& spec = d.spec;
        json entry;
        entry["name"] = spec.name;
        entry["channels"] = spec.channels;
        entry["length"] = spec.length;
        entry["patch_size"] = spec.patch_size;
        entry["codebook_size"] = spec.codebook_size;
        entry["token_budget"] = spec.token_budget;
        entry["task_description"] = spec.task_description;
        entry["labels"] = json::array();
        for (const auto& [id, text] : spec.labels)
            entry["labels"].push_back(json{{"id", id}, {"text", text}});
        entry["context_schema"] = spec.context_schema;
        entry["train_fraction"] = d.split.fraction;
        manifest["domains"].push_back(std::move(entry));
    }
    {
        std::ofstream out(root / "manifest.json", std::ios::trunc);
        if (!out) throw Error(ErrKind::io, "cannot write manifest under " + root_path);
        out << manifest.dump(2) << '\n';
    }
    for (const auto& d : corpus.domains) {
        fs::create_directories(root / d.spec.name);
        write_split_csv(root / d.spec.name / "train.csv", d.split.train);
        write_split_csv(root / d.spec.name / "test.csv", d.split.test);
    }
}

TimeSeriesInstance normalize(const TimeSeriesInstance& instance) {
    TimeSeriesInstance out = instance;
    const int L = instance.values.rows();
    const int H = instance.values.cols();
    for (int c = 0; c < H; ++c) {
        Real mean = 0;
        for (int t = 0; t < L; ++t) mean += instance.values.v[size_t(t) * H + c];
        mean /= L;
        Real var = 0;
        for (int t = 0; t < L; ++t) {
            const Real d = instance.values.v[size_t(t) * H + c] - mean;
            var += d * d;
        }
        var /= L;
        const Real sd = std::sqrt(var);
        if (sd < 1e-12) {
            for (int t = 0; t < L; ++t) out.values.v[size_t(t) * H + c] = 0;
        } else {
            for (int t = 0; t < L; ++t)
                out.values.v[size_t(t) * H + c] =
                    (instance.values.v[size_t(t) * H + c] - mean) / sd;
        }
    }
    return out;
}

void normalize_corpus(Corpus& corpus) {
    for (auto& d : corpus.domains) {
        for (auto& inst : d.split.train) inst = normalize(inst);
        for (auto& inst : d.split.test) inst = normalize(inst);
    }
}

std::vector<int> stratified_pick(const std::vector<TimeSeriesInstance>& instances, double fraction,
                                 uint64_t seed) {
    if (!(fraction > 0.0) || fraction > 1.0)
        throw Error(ErrKind::argument, "fraction must lie in (0, 1]");
    const int n = static_cast<int>(instances.size());
    const int want = ceil_guarded(fraction * n);

    // Strata keyed by first label, iterated in sorted label order; each
    // stratum keeps its members in original train order.
    std::map<std::string, std::vector<int>> strata;
    for (int i = 0; i < n; ++i) strata[instances[i].labels.front()].push_back(i);

    std::vector<std::string> keys;
    std::vector<int> alloc;
    std::vector<double> remainder;
    int base_total = 0;
    for (const auto& [label, members] : strata) {
        const double quota = fraction * static_cast<double>(members.size());
        int base = static_cast<int>(std::floor(quota + 1e-9));
        keys.push_back(label);
        alloc.push_back(base);
        remainder.push_back(quota - base);
        base_total += base;
    }
    int leftover = want - base_total;
    // Largest remainder first; ties resolved by stratum order.
    std::vector<size_t> order(keys.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return remainder[a] > remainder[b]; });
    for (size_t i = 0; i < order.size() && leftover > 0; ++i) {
        const size_t s = order[i];
        if (alloc[s] < static_cast<int>(strata[keys[s]].size())) {
            ++alloc[s];
            --leftover;
        }
    }

    std::vector<int> picked;
    for (size_t s = 0; s < keys.size(); ++s) {
        std::vector<int> members = strata[keys[s]];
        Rng rng(derive_seed(seed, "subset:" + keys[s]));
        rng.shuffle(members);
        for (int i = 0; i < alloc[s]; ++i) picked.push_back(members[i]);
    }
    std::sort(picked.begin(), picked.end());
    return picked;
}

CorpusSplit subset_train(const CorpusSplit& split, double fraction, uint64_t seed) {
    CorpusSplit out;
    out.fraction = fraction;
    out.test = split.test;
    for (int i : stratified_pick(split.train, fraction, seed)) out.train.push_back(split.train[i]);
    return out;
}

std::vector<std::string> corpus_context_values(const Corpus& corpus) {
    std::set<std::string> values;
    for (const auto& dom : corpus.domains)
        for (const auto* side : {&dom.split.train, &dom.split.test})
            for (const auto& inst : *side)
                for (const auto& [key, value] : inst.context) values.insert(value);
    return {values.begin(), values.end()};
}

namespace {

const char* sentence_for_class(const std::string& cls) {
    if (cls == "sine") return "the signal is a sine wave";
    if (cls == "square") return "the signal is a square wave";
    if (cls == "sawtooth") return "the signal is a sawtooth wave";
    if (cls == "noise-burst") return "the signal is a noise burst";
    return nullptr;
}

struct WaveParams {
    double freq = 0;
    std::vector<double> phase;        // per channel, in [0,1)
    std::vector<int> burst_start;     // per channel, noise-burst only
    std::vector<std::vector<Real>> burst_values;
};

WaveParams draw_params(const SyntheticSpec& spec, const std::string& cls, Rng& rng) {
    WaveParams p;
    p.freq = rng.uniform(spec.freq_min, spec.freq_max);
    const int burst_len = std::max(1, spec.length / 4);
    for (int c = 0; c < spec.channels; ++c) {
        p.phase.push_back(rng.uniform());
        if (cls == "noise-burst") {
            p.burst_start.push_back(static_cast<int>(rng.below(uint64_t(spec.length - burst_len + 1))));
            std::vector<Real> vals(burst_len);
            for (auto& v : vals) v = rng.normal();
            p.burst_values.push_back(std::move(vals));
        }
    }
    return p;
}

void add_waveform(nn::Tensor& values, const SyntheticSpec& spec, const std::string& cls,
                  const WaveParams& p, double scale) {
    const int L = spec.length, H = spec.channels;
    for (int c = 0; c < H; ++c) {
        for (int t = 0; t < L; ++t) {
            const double u = p.freq * static_cast<double>(t) / L + p.phase[c];
            double s = 0;
            if (cls == "sine") {
                s = std::sin(2.0 * M_PI * u);
            } else if (cls == "square") {
                s = (u - std::floor(u)) < 0.5 ? 1.0 : -1.0;
            } else if (cls == "sawtooth") {
                s = 2.0 * (u - std::floor(u)) - 1.0;
            } else {  // noise-burst
                const int rel = t - p.burst_start[c];
                if (rel >= 0 && rel < static_cast<int>(p.burst_values[c].size()))
                    s = p.burst_values[c][rel];
            }
            values.v[size_t(t) * H + c] += scale * s;
        }
    }
}

std::string frequency_band(const SyntheticSpec& spec, double freq) {
    const double w = (spec.freq_max - spec.freq_min) / 3.0;
    if (freq < spec.freq_min + w) return "low";
    if (freq < spec.freq_min + 2.0 * w) return "mid";
    return "high";
}

TimeSeriesInstance make_instance(const SyntheticSpec& spec, const std::vector<std::string>& classes,
                                 const std::string& id, Rng& rng) {
    TimeSeriesInstance inst;
    inst.instance_id = id;
    inst.domain = spec.name;
    inst.labels = classes;
    inst.values = nn::Tensor::zeros({spec.length, spec.channels});
    const double scale = 1.0 / static_cast<double>(classes.size());
    double first_freq = 0;
    for (size_t i = 0; i < classes.size(); ++i) {
        WaveParams p = draw_params(spec, classes[i], rng);
        if (i == 0) first_freq = p.freq;
        add_waveform(inst.values, spec, classes[i], p, scale);
    }
    for (auto& v : inst.values.v) v += spec.sigma * rng.normal();
    inst.context.emplace_back("band", frequency_band(spec, first_freq));
    return inst;
}

}  // namespace

DomainData generate_synthetic_domain(const SyntheticSpec& spec, uint64_t seed) {
    if (spec.classes.empty())
        throw Error(ErrKind::argument, "synthetic domain needs at least 1 class");
    for (const auto& cls : spec.classes)
        if (!sentence_for_class(cls))
            throw Error(ErrKind::argument, "unknown waveform class '" + cls + "'");
    if (spec.sigma < 0) throw Error(ErrKind::argument, "sigma must be >= 0");
    if (spec.length <= 0 || spec.channels <= 0 || spec.patch_size <= 0)
        throw Error(ErrKind::argument, "synthetic sizes must be positive");

    DomainData data;
    DomainSpec& ds = data.spec;
    ds.name = spec.name;
    ds.channels = spec.channels;
    ds.length = spec.length;
    ds.patch_size = spec.patch_size;
    ds.codebook_size = spec.codebook_size;
    ds.token_budget = spec.token_budget > 0 ? spec.token_budget : spec.length / spec.patch_size;
    ds.task_description = "identify the waveform present in the signal";
    ds.context_schema = {"band"};
    for (const auto& cls : spec.classes) ds.labels.emplace_back(cls, sentence_for_class(cls));
    ds.validate();

    Rng rng(derive_seed(seed, "synthetic:" + spec.name));
    auto gen_block = [&](std::vector<TimeSeriesInstance>& out, const std::string& tag,
                         int per_class, int multilabel) {
        int idx = 0;
        char buf[32];
        for (const auto& cls : spec.classes)
            for (int i = 0; i < per_class; ++i) {
                std::snprintf(buf, sizeof(buf), "%s-%s-%04d", spec.name.c_str(), tag.c_str(), idx++);
                out.push_back(make_instance(spec, {cls}, buf, rng));
            }
        if (multilabel > 0) {
            if (spec.classes.size() < 2)
                throw Error(ErrKind::argument,
                            "multi-label instances need at least 2 classes");
            std::vector<std::pair<std::string, std::string>> pairs;
            for (size_t a = 0; a < spec.classes.size(); ++a)
                for (size_t b = a + 1; b < spec.classes.size(); ++b)
                    pairs.emplace_back(spec.classes[a], spec.classes[b]);
            for (int i = 0; i < multilabel; ++i) {
                const auto& pr = pairs[size_t(i) % pairs.size()];
                std::snprintf(buf, sizeof(buf), "%s-%s-%04d", spec.name.c_str(), tag.c_str(), idx++);
                out.push_back(make_instance(spec, {pr.first, pr.second}, buf, rng));
            }
        }
    };
    gen_block(data.split.train, "train", spec.train_per_class, spec.multilabel_train);
    gen_block(data.split.test, "test", spec.test_per_class, spec.multilabel_test);
    return data;
}

}  // namespace instructtime
