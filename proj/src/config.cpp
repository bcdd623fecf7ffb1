#include "instructtime/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace instructtime {

std::map<std::string, std::string>* IniDoc::find(const std::string& name) {
    for (auto& [sec, kv] : sections)
        if (sec == name) return &kv;
    return nullptr;
}

const std::map<std::string, std::string>* IniDoc::find(const std::string& name) const {
    for (const auto& [sec, kv] : sections)
        if (sec == name) return &kv;
    return nullptr;
}

std::map<std::string, std::string>& IniDoc::section(const std::string& name) {
    if (auto* kv = find(name)) return *kv;
    sections.emplace_back(name, std::map<std::string, std::string>{});
    return sections.back().second;
}

IniDoc parse_ini(const std::string& text) {
    IniDoc doc;
    std::map<std::string, std::string>* current = nullptr;
    std::istringstream in(text);
    std::string raw;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const std::string line = trim(raw);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw Error(ErrKind::config,
                            "config line " + std::to_string(line_no) + ": unterminated section");
            const std::string name = trim(line.substr(1, line.size() - 2));
            if (name.empty())
                throw Error(ErrKind::config,
                            "config line " + std::to_string(line_no) + ": empty section name");
            current = &doc.section(name);
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw Error(ErrKind::config, "config line " + std::to_string(line_no) +
                                             ": expected key = value, got '" + line + "'");
        if (!current)
            throw Error(ErrKind::config, "config line " + std::to_string(line_no) +
                                             ": key outside any [section]");
        const std::string key = trim(line.substr(0, eq));
        if (key.empty())
            throw Error(ErrKind::config,
                        "config line " + std::to_string(line_no) + ": empty key");
        (*current)[key] = trim(line.substr(eq + 1));
    }
    return doc;
}

void apply_override(IniDoc& doc, const std::string& spec) {
    const size_t eq = spec.find('=');
    if (eq == std::string::npos)
        throw Error(ErrKind::usage, "override '" + spec + "' must look like section.key=value");
    const std::string path = trim(spec.substr(0, eq));
    const size_t dot = path.rfind('.');
    if (dot == std::string::npos || dot == 0 || dot + 1 == path.size())
        throw Error(ErrKind::usage, "override '" + spec + "' must look like section.key=value");
    doc.section(path.substr(0, dot))[path.substr(dot + 1)] = trim(spec.substr(eq + 1));
}

AppConfig::AppConfig() {
    pretrain_cfg.phase = "pretrain";
    sft_cfg.phase = "sft";
    sft_cfg.learning_rate = 1e-5;
    sft_cfg.epochs = 5;
}

namespace {

// Reads one section's keys with type checking; unknown keys are rejected
// when the binder is finished.
class SectionBinder {
  public:
    SectionBinder(const IniDoc& doc, std::string name)
        : name_(std::move(name)), kv_(doc.find(name_)) {}

    bool present() const { return kv_ != nullptr; }

    void bind_string(const std::string& key, std::string& out) {
        if (const auto* raw = fetch(key)) out = *raw;
    }

    void bind_int(const std::string& key, int& out) {
        if (const auto* raw = fetch(key)) out = static_cast<int>(to_int(key, *raw));
    }

    void bind_u64(const std::string& key, uint64_t& out) {
        if (const auto* raw = fetch(key)) {
            const long long v = to_int(key, *raw);
            if (v < 0) fail(key, "a non-negative integer", *raw);
            out = static_cast<uint64_t>(v);
        }
    }

    void bind_real(const std::string& key, Real& out) {
        if (const auto* raw = fetch(key)) out = to_real(key, *raw);
    }

    void bind_bool(const std::string& key, bool& out) {
        if (const auto* raw = fetch(key)) out = to_bool(key, *raw);
    }

    void bind_int_list(const std::string& key, std::vector<int>& out) {
        if (const auto* raw = fetch(key)) {
            out.clear();
            for (const auto& item : list_items(*raw)) out.push_back(static_cast<int>(to_int(key, item)));
        }
    }

    void bind_real_list(const std::string& key, std::vector<Real>& out) {
        if (const auto* raw = fetch(key)) {
            out.clear();
            for (const auto& item : list_items(*raw)) out.push_back(to_real(key, item));
        }
    }

    void bind_bool_list(const std::string& key, std::vector<bool>& out) {
        if (const auto* raw = fetch(key)) {
            out.clear();
            for (const auto& item : list_items(*raw)) out.push_back(to_bool(key, item));
        }
    }

    void bind_string_list(const std::string& key, std::vector<std::string>& out) {
        if (const auto* raw = fetch(key)) {
            out.clear();
            for (const auto& item : list_items(*raw)) out.push_back(item);
        }
    }

    // Rejects any key never bound.
    void finish() const {
        if (!kv_) return;
        for (const auto& [key, value] : *kv_)
            if (!seen_.count(key))
                throw Error(ErrKind::config, "unknown config key '" + name_ + "." + key + "'");
    }

  private:
    const std::string* fetch(const std::string& key) {
        seen_.insert(key);
        if (!kv_) return nullptr;
        auto it = kv_->find(key);
        return it == kv_->end() ? nullptr : &it->second;
    }

    [[noreturn]] void fail(const std::string& key, const std::string& expected,
                           const std::string& raw) const {
        throw Error(ErrKind::config, "config key '" + name_ + "." + key + "' expects " + expected +
                                         ", got '" + raw + "'");
    }

    long long to_int(const std::string& key, const std::string& raw) const {
        bool ok = false;
        const long long v = parse_int(raw, ok);
        if (!ok) fail(key, "an integer", raw);
        return v;
    }

    Real to_real(const std::string& key, const std::string& raw) const {
        bool ok = false;
        const Real v = parse_real(raw, ok);
        if (!ok) fail(key, "a real number", raw);
        return v;
    }

    bool to_bool(const std::string& key, const std::string& raw) const {
        if (raw == "true") return true;
        if (raw == "false") return false;
        fail(key, "true or false", raw);
    }

    static std::vector<std::string> list_items(const std::string& raw) {
        std::vector<std::string> items;
        if (trim(raw).empty()) return items;
        for (const auto& piece : split(raw, ',')) {
            const std::string item = trim(piece);
            if (!item.empty()) items.push_back(item);
        }
        return items;
    }

    std::string name_;
    const std::map<std::string, std::string>* kv_;
    std::set<std::string> seen_;
};

void bind_train(SectionBinder& b, train::TrainConfig& cfg) {
    b.bind_real("learning_rate", cfg.learning_rate);
    b.bind_int("batch_size", cfg.batch_size);
    b.bind_int("epochs", cfg.epochs);
    b.bind_real("warmup_ratio", cfg.warmup_ratio);
    b.bind_real("weight_decay", cfg.weight_decay);
    b.bind_real("grad_clip", cfg.grad_clip);
    b.bind_real("val_fraction", cfg.val_fraction);
}

const char* kSyntheticPrefix = "synthetic.";

}  // namespace

AppConfig bind_app_config(const IniDoc& doc) {
    static const std::set<std::string> known = {"run",  "corpus", "tokenizer", "model", "pretrain",
                                                "sft",  "grid",   "eval",      "dump",  "paths"};
    for (const auto& [name, kv] : doc.sections) {
        if (known.count(name)) continue;
        if (name.rfind(kSyntheticPrefix, 0) == 0 &&
            name.size() > std::string(kSyntheticPrefix).size())
            continue;
        throw Error(ErrKind::config, "unknown config section '" + name + "'");
    }

    AppConfig cfg;

    {
        SectionBinder b(doc, "run");
        b.bind_u64("seed", cfg.seed);
        b.finish();
    }
    {
        SectionBinder b(doc, "corpus");
        b.bind_string("root", cfg.corpus_root);
        b.finish();
    }
    for (const auto& [name, kv] : doc.sections) {
        if (name.rfind(kSyntheticPrefix, 0) != 0) continue;
        SyntheticSpec spec;
        spec.name = name.substr(std::string(kSyntheticPrefix).size());
        SectionBinder b(doc, name);
        b.bind_string_list("classes", spec.classes);
        b.bind_real("freq_min", spec.freq_min);
        b.bind_real("freq_max", spec.freq_max);
        b.bind_real("sigma", spec.sigma);
        b.bind_int("length", spec.length);
        b.bind_int("channels", spec.channels);
        b.bind_int("train_per_class", spec.train_per_class);
        b.bind_int("test_per_class", spec.test_per_class);
        b.bind_int("multilabel_train", spec.multilabel_train);
        b.bind_int("multilabel_test", spec.multilabel_test);
        b.bind_int("patch_size", spec.patch_size);
        b.bind_int("codebook_size", spec.codebook_size);
        b.bind_int("token_budget", spec.token_budget);
        b.finish();
        cfg.synthetic.push_back(std::move(spec));
    }
    {
        SectionBinder b(doc, "tokenizer");
        b.bind_int("epochs", cfg.tokenizer.epochs);
        b.bind_int("batch_size", cfg.tokenizer.batch_size);
        b.bind_real("learning_rate", cfg.tokenizer.learning_rate);
        b.bind_real("beta", cfg.tokenizer.beta);
        b.bind_real("decay", cfg.tokenizer.decay);
        b.bind_real("laplace_eps", cfg.tokenizer.laplace_eps);
        b.bind_int("d_code", cfg.tokenizer.d_code);
        b.bind_int("n_blocks", cfg.tokenizer.n_blocks);
        b.bind_int("kernel", cfg.tokenizer.kernel);
        b.bind_bool("dead_code_revival", cfg.tokenizer.dead_code_revival);
        b.bind_real("grad_clip", cfg.tokenizer.grad_clip);
        b.finish();
    }
    {
        SectionBinder b(doc, "model");
        b.bind_int("d_model", cfg.model.d_model);
        b.bind_int("n_layers", cfg.model.n_layers);
        b.bind_int("n_heads", cfg.model.n_heads);
        b.bind_int("context_window", cfg.model.context_window);
        b.bind_real("dropout", cfg.model.dropout);
        b.bind_int_list("projector_hidden", cfg.model.projector_hidden);
        b.finish();
    }
    {
        SectionBinder b(doc, "pretrain");
        bind_train(b, cfg.pretrain_cfg);
        b.bind_bool("text", cfg.pretrain_cfg.text_in_pretrain);
        b.finish();
    }
    {
        SectionBinder b(doc, "sft");
        bind_train(b, cfg.sft_cfg);
        b.bind_string("domain", cfg.sft_domain);
        b.bind_real("fraction", cfg.sft_fraction);
        b.bind_string("from", cfg.sft_from);
        b.finish();
        if (cfg.sft_from != "pretrained" && cfg.sft_from != "fresh")
            throw Error(ErrKind::config,
                        "config key 'sft.from' expects pretrained or fresh, got '" + cfg.sft_from +
                            "'");
    }
    {
        SectionBinder b(doc, "grid");
        b.bind_int_list("codebook_sizes", cfg.grid.codebook_sizes);
        b.bind_int_list("patch_sizes", cfg.grid.patch_sizes);
        b.bind_real_list("fractions", cfg.grid.fractions);
        b.bind_bool_list("text", cfg.grid.text_options);
        b.bind_bool_list("pretrain", cfg.grid.pretrain_options);
        b.finish();
    }
    {
        SectionBinder b(doc, "eval");
        b.bind_int("max_new", cfg.eval_max_new);
        b.bind_int("sample_per_domain", cfg.sample_per_domain);
        b.finish();
    }
    {
        SectionBinder b(doc, "dump");
        b.bind_string("domain", cfg.dump_domain);
        b.bind_int("index", cfg.dump_index);
        b.bind_string("split", cfg.dump_split);
        b.bind_string("mode", cfg.dump_mode);
        b.bind_bool("pad", cfg.dump_pad);
        b.finish();
        if (cfg.dump_split != "train" && cfg.dump_split != "test")
            throw Error(ErrKind::config,
                        "config key 'dump.split' expects train or test, got '" + cfg.dump_split +
                            "'");
        if (cfg.dump_mode != "pretrain" && cfg.dump_mode != "sft_train" &&
            cfg.dump_mode != "sft_infer")
            throw Error(ErrKind::config,
                        "config key 'dump.mode' expects pretrain, sft_train or sft_infer, got '" +
                            cfg.dump_mode + "'");
    }
    {
        SectionBinder b(doc, "paths");
        b.bind_string("out_dir", cfg.out_dir);
        b.bind_string("tokenizer_dir", cfg.tokenizer_dir);
        b.bind_string("lm_checkpoint", cfg.lm_checkpoint);
        b.finish();
    }
    return cfg;
}

AppConfig parse_app_config(const std::string& text, const std::vector<std::string>& overrides) {
    IniDoc doc = parse_ini(text);
    for (const auto& spec : overrides) apply_override(doc, spec);
    return bind_app_config(doc);
}

AppConfig load_app_config(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrKind::io, "cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_app_config(buf.str(), overrides);
}

namespace {

std::string join_ints(const std::vector<int>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

std::string join_reals(const std::vector<Real>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += format_real(v[i]);
    }
    return out;
}

std::string join_bools(const std::vector<bool>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += v[i] ? "true" : "false";
    }
    return out;
}

std::string join_strings(const std::vector<std::string>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += v[i];
    }
    return out;
}

void emit_train(std::ostringstream& out, const train::TrainConfig& cfg) {
    out << "learning_rate = " << format_real(cfg.learning_rate) << "\n";
    out << "batch_size = " << cfg.batch_size << "\n";
    out << "epochs = " << cfg.epochs << "\n";
    out << "warmup_ratio = " << format_real(cfg.warmup_ratio) << "\n";
    out << "weight_decay = " << format_real(cfg.weight_decay) << "\n";
    out << "grad_clip = " << format_real(cfg.grad_clip) << "\n";
    out << "val_fraction = " << format_real(cfg.val_fraction) << "\n";
}

}  // namespace

std::string serialize_app_config(const AppConfig& cfg) {
    std::ostringstream out;
    out << "[run]\n";
    out << "seed = " << cfg.seed << "\n\n";

    out << "[corpus]\n";
    out << "root = " << cfg.corpus_root << "\n";

    for (const auto& spec : cfg.synthetic) {
        out << "\n[synthetic." << spec.name << "]\n";
        out << "classes = " << join_strings(spec.classes) << "\n";
        out << "freq_min = " << format_real(spec.freq_min) << "\n";
        out << "freq_max = " << format_real(spec.freq_max) << "\n";
        out << "sigma = " << format_real(spec.sigma) << "\n";
        out << "length = " << spec.length << "\n";
        out << "channels = " << spec.channels << "\n";
        out << "train_per_class = " << spec.train_per_class << "\n";
        out << "test_per_class = " << spec.test_per_class << "\n";
        out << "multilabel_train = " << spec.multilabel_train << "\n";
        out << "multilabel_test = " << spec.multilabel_test << "\n";
        out << "patch_size = " << spec.patch_size << "\n";
        out << "codebook_size = " << spec.codebook_size << "\n";
        out << "token_budget = " << spec.token_budget << "\n";
    }

    out << "\n[tokenizer]\n";
    out << "epochs = " << cfg.tokenizer.epochs << "\n";
    out << "batch_size = " << cfg.tokenizer.batch_size << "\n";
    out << "learning_rate = " << format_real(cfg.tokenizer.learning_rate) << "\n";
    out << "beta = " << format_real(cfg.tokenizer.beta) << "\n";
    out << "decay = " << format_real(cfg.tokenizer.decay) << "\n";
    out << "laplace_eps = " << format_real(cfg.tokenizer.laplace_eps) << "\n";
    out << "d_code = " << cfg.tokenizer.d_code << "\n";
    out << "n_blocks = " << cfg.tokenizer.n_blocks << "\n";
    out << "kernel = " << cfg.tokenizer.kernel << "\n";
    out << "dead_code_revival = " << (cfg.tokenizer.dead_code_revival ? "true" : "false") << "\n";
    out << "grad_clip = " << format_real(cfg.tokenizer.grad_clip) << "\n";

    out << "\n[model]\n";
    out << "d_model = " << cfg.model.d_model << "\n";
    out << "n_layers = " << cfg.model.n_layers << "\n";
    out << "n_heads = " << cfg.model.n_heads << "\n";
    out << "context_window = " << cfg.model.context_window << "\n";
    out << "dropout = " << format_real(cfg.model.dropout) << "\n";
    out << "projector_hidden = " << join_ints(cfg.model.projector_hidden) << "\n";

    out << "\n[pretrain]\n";
    emit_train(out, cfg.pretrain_cfg);
    out << "text = " << (cfg.pretrain_cfg.text_in_pretrain ? "true" : "false") << "\n";

    out << "\n[sft]\n";
    emit_train(out, cfg.sft_cfg);
    out << "domain = " << cfg.sft_domain << "\n";
    out << "fraction = " << format_real(cfg.sft_fraction) << "\n";
    out << "from = " << cfg.sft_from << "\n";

    out << "\n[grid]\n";
    out << "codebook_sizes = " << join_ints(cfg.grid.codebook_sizes) << "\n";
    out << "patch_sizes = " << join_ints(cfg.grid.patch_sizes) << "\n";
    out << "fractions = " << join_reals(cfg.grid.fractions) << "\n";
    out << "text = " << join_bools(cfg.grid.text_options) << "\n";
    out << "pretrain = " << join_bools(cfg.grid.pretrain_options) << "\n";

    out << "\n[eval]\n";
    out << "max_new = " << cfg.eval_max_new << "\n";
    out << "sample_per_domain = " << cfg.sample_per_domain << "\n";

    out << "\n[dump]\n";
    out << "domain = " << cfg.dump_domain << "\n";
    out << "index = " << cfg.dump_index << "\n";
    out << "split = " << cfg.dump_split << "\n";
    out << "mode = " << cfg.dump_mode << "\n";
    out << "pad = " << (cfg.dump_pad ? "true" : "false") << "\n";

    out << "\n[paths]\n";
    out << "out_dir = " << cfg.out_dir << "\n";
    out << "tokenizer_dir = " << cfg.tokenizer_dir << "\n";
    out << "lm_checkpoint = " << cfg.lm_checkpoint << "\n";
    return out.str();
}

}  // namespace instructtime
