#include "instructtime/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "instructtime/config.hpp"
#include "instructtime/eval.hpp"
#include "instructtime/training.hpp"

namespace instructtime {

namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kVerbs = {"gen-data", "train-tokenizer",   "pretrain",
                                         "finetune", "evaluate",          "grid",
                                         "stats",    "export-embeddings", "dump-prompt"};

std::string timestamp_utc() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
    return buf;
}

// <parent>/<verb>-<timestamp>-<seed>, suffixed when a same-second run exists.
fs::path make_run_dir(const std::string& parent, const std::string& verb, uint64_t seed) {
    const std::string base = verb + "-" + timestamp_utc() + "-" + std::to_string(seed);
    fs::path dir = fs::path(parent) / base;
    for (int i = 2; fs::exists(dir); ++i) dir = fs::path(parent) / (base + "-" + std::to_string(i));
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error(ErrKind::io, "cannot create run directory '" + dir.string() + "'");
    return dir;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrKind::io, "cannot write '" + path.string() + "'");
    out << text;
}

Corpus load_normalized_corpus(const AppConfig& cfg) {
    Corpus corpus = load_corpus(cfg.corpus_root);
    normalize_corpus(corpus);
    return corpus;
}

std::string tokenizer_path(const AppConfig& cfg, const std::string& domain) {
    if (cfg.tokenizer_dir.empty())
        throw Error(ErrKind::config, "paths.tokenizer_dir is required for this verb");
    return (fs::path(cfg.tokenizer_dir) / ("tokenizer-" + domain + ".ckpt")).string();
}

train::TokenizerMap load_tokenizers(const AppConfig& cfg, const Corpus& corpus) {
    train::TokenizerMap out;
    for (const auto& dom : corpus.domains)
        out.emplace(dom.spec.name, vq::load_tokenizer(tokenizer_path(cfg, dom.spec.name), dom.spec));
    return out;
}

Vocabulary corpus_vocabulary(const Corpus& corpus) {
    std::vector<DomainSpec> specs;
    for (const auto& dom : corpus.domains) specs.push_back(dom.spec);
    return build_vocabulary(specs, corpus_context_values(corpus));
}

lm::DecoderModel load_checked_model(const AppConfig& cfg, const Vocabulary& vocab) {
    if (cfg.lm_checkpoint.empty())
        throw Error(ErrKind::config, "paths.lm_checkpoint is required for this verb");
    lm::DecoderModel model = lm::load_model(cfg.lm_checkpoint);
    if (model.vocab_hash != vocab.hash())
        throw Error(ErrKind::incompatible,
                    "checkpoint '" + cfg.lm_checkpoint + "' was built against a different vocabulary");
    return model;
}

std::string losses_csv(const train::RunRecord& rec) {
    std::ostringstream out;
    out << "step,loss\n";
    for (size_t i = 0; i < rec.step_losses.size(); ++i)
        out << (i + 1) << "," << format_real(rec.step_losses[i]) << "\n";
    return out.str();
}

std::string val_losses_csv(const train::RunRecord& rec) {
    std::ostringstream out;
    out << "epoch,val_loss\n";
    for (size_t i = 0; i < rec.epoch_val_losses.size(); ++i)
        out << (i + 1) << "," << format_real(rec.epoch_val_losses[i]) << "\n";
    return out.str();
}

void report_run(const train::RunRecord& rec) {
    if (!rec.step_losses.empty())
        std::cout << "steps " << rec.step_losses.size() << ", first loss "
                  << format_real(rec.step_losses.front()) << ", last loss "
                  << format_real(rec.step_losses.back()) << "\n";
    if (rec.best_epoch > 0) std::cout << "best validation epoch " << rec.best_epoch << "\n";
    std::cout << "wall seconds " << format_real(rec.wall_seconds) << "\n";
}

int run_gen_data(const AppConfig& cfg, const fs::path& run_dir) {
    if (cfg.synthetic.empty())
        throw Error(ErrKind::config, "gen-data needs at least one [synthetic.<name>] section");
    Corpus corpus;
    for (const auto& spec : cfg.synthetic)
        corpus.domains.push_back(generate_synthetic_domain(spec, cfg.seed));
    write_corpus(cfg.corpus_root, corpus);
    for (const auto& dom : corpus.domains)
        std::cout << dom.spec.name << ": " << dom.split.train.size() << " train / "
                  << dom.split.test.size() << " test\n";
    std::cout << "corpus written to " << cfg.corpus_root << "\n";
    (void)run_dir;
    return 0;
}

int run_train_tokenizer(const AppConfig& cfg, const fs::path& run_dir) {
    const Corpus corpus = load_normalized_corpus(cfg);
    for (const auto& dom : corpus.domains) {
        vq::VqTrainConfig tc = cfg.tokenizer;
        tc.codebook_size = dom.spec.codebook_size;
        auto art = vq::train_tokenizer(dom.split, dom.spec, tc, cfg.seed);
        const std::string path = (run_dir / ("tokenizer-" + dom.spec.name + ".ckpt")).string();
        vq::save_tokenizer(path, art, dom.spec, tc, cfg.seed);
        const Real test_mse = vq::reconstruction_mse(dom.split.test, art.model, art.codebook);
        std::cout << dom.spec.name << ": train recon "
                  << format_real(art.history.empty() ? 0.0 : art.history.back().reconstruction)
                  << ", test recon " << format_real(test_mse);
        if (art.diverged_at_step)
            std::cout << " (diverged at step " << *art.diverged_at_step << ")";
        std::cout << "\n";
    }
    std::cout << "tokenizers written to " << run_dir.string() << "\n";
    return 0;
}

int run_pretrain(const AppConfig& cfg, const fs::path& run_dir) {
    const Corpus corpus = load_normalized_corpus(cfg);
    auto tokenizers = load_tokenizers(cfg, corpus);
    const Vocabulary vocab = corpus_vocabulary(corpus);
    lm::DecoderModel model = lm::DecoderModel::init(cfg.model, vocab, cfg.seed);
    train::TrainConfig tc = cfg.pretrain_cfg;
    tc.seed = cfg.seed;
    const auto rec = train::pretrain(corpus, tokenizers, model, vocab, tc);
    lm::save_model((run_dir / "lm-pretrained.ckpt").string(), model);
    write_text(run_dir / "losses.csv", losses_csv(rec));
    write_text(run_dir / "val_losses.csv", val_losses_csv(rec));
    report_run(rec);
    std::cout << "checkpoint " << (run_dir / "lm-pretrained.ckpt").string() << "\n";
    return 0;
}

int run_finetune(const AppConfig& cfg, const fs::path& run_dir) {
    if (cfg.sft_domain.empty()) throw Error(ErrKind::config, "sft.domain is required for finetune");
    const Corpus corpus = load_normalized_corpus(cfg);
    const DomainData* dom = corpus.find(cfg.sft_domain);
    if (!dom) throw Error(ErrKind::config, "sft.domain '" + cfg.sft_domain + "' is not in the corpus");
    auto tokenizer = vq::load_tokenizer(tokenizer_path(cfg, dom->spec.name), dom->spec);
    const Vocabulary vocab = corpus_vocabulary(corpus);

    lm::DecoderModel model = cfg.sft_from == "fresh"
                                 ? lm::DecoderModel::init(cfg.model, vocab, cfg.seed)
                                 : load_checked_model(cfg, vocab);

    DomainData subset = *dom;
    subset.split =
        subset_train(dom->split, cfg.sft_fraction, derive_seed(cfg.seed, "sft-frac:" + dom->spec.name));
    train::TrainConfig tc = cfg.sft_cfg;
    tc.seed = cfg.seed;
    const auto rec = train::finetune(subset, tokenizer, model, vocab, tc);
    const std::string ckpt = (run_dir / ("lm-sft-" + dom->spec.name + ".ckpt")).string();
    lm::save_model(ckpt, model);
    write_text(run_dir / "losses.csv", losses_csv(rec));
    write_text(run_dir / "val_losses.csv", val_losses_csv(rec));
    report_run(rec);
    std::cout << "checkpoint " << ckpt << "\n";
    return 0;
}

int run_evaluate(const AppConfig& cfg, const fs::path& run_dir) {
    const Corpus corpus = load_normalized_corpus(cfg);
    const Vocabulary vocab = corpus_vocabulary(corpus);
    lm::DecoderModel model = load_checked_model(cfg, vocab);

    std::vector<eval::ResultRow> rows;
    if (model.phase == "pretrained") {
        auto tokenizers = load_tokenizers(cfg, corpus);
        for (const auto& report :
             train::evaluate_universal(corpus, tokenizers, model, vocab, cfg.eval_max_new))
            rows.push_back(eval::row_from_report(report, cfg.seed));
    } else if (model.phase.rfind("sft:", 0) == 0) {
        const std::string name = model.phase.substr(4);
        const DomainData* dom = corpus.find(name);
        if (!dom)
            throw Error(ErrKind::incompatible,
                        "checkpoint domain '" + name + "' is not in the corpus");
        auto tokenizer = vq::load_tokenizer(tokenizer_path(cfg, name), dom->spec);
        const auto report = eval::evaluate_domain(*dom, tokenizer.model, tokenizer.codebook, model,
                                                  vocab, "adapt", cfg.eval_max_new);
        rows.push_back(eval::row_from_report(report, cfg.seed));
    } else {
        throw Error(ErrKind::incompatible,
                    "checkpoint phase '" + model.phase + "' is not evaluable");
    }

    const std::string csv = eval::results_csv(rows);
    write_text(run_dir / "results.csv", csv);
    std::cout << eval::render_summary(csv);
    return 0;
}

int run_grid(const AppConfig& cfg, const fs::path& run_dir) {
    const Corpus corpus = load_normalized_corpus(cfg);
    train::GridDeps deps;
    deps.tokenizer = cfg.tokenizer;
    deps.model = cfg.model;
    deps.pretrain_cfg = cfg.pretrain_cfg;
    deps.sft_cfg = cfg.sft_cfg;
    deps.max_new = cfg.eval_max_new;
    const auto rows = train::run_ablation_grid(corpus, cfg.grid, deps, cfg.seed);
    const std::string csv = eval::results_csv(rows);
    write_text(run_dir / "results.csv", csv);
    std::cout << eval::render_summary(csv);
    return 0;
}

int run_stats(const AppConfig& cfg, const fs::path& run_dir) {
    const Corpus corpus = load_normalized_corpus(cfg);
    auto tokenizers = load_tokenizers(cfg, corpus);
    std::vector<eval::TokenFrequencyTable> tables;
    for (const auto& dom : corpus.domains) {
        auto& tok = tokenizers.at(dom.spec.name);
        tables.push_back(
            eval::token_frequency(dom.split.train, tok.model, tok.codebook, dom.spec.name));
        std::cout << dom.spec.name << ": " << tables.back().total << " codes over "
                  << dom.split.train.size() << " instances\n";
    }
    write_text(run_dir / "token_frequency.csv", eval::token_frequency_csv(tables));
    std::cout << "frequencies written to " << (run_dir / "token_frequency.csv").string() << "\n";
    return 0;
}

int run_export_embeddings(const AppConfig& cfg, const fs::path& run_dir) {
    const Corpus corpus = load_normalized_corpus(cfg);
    auto tokenizers = load_tokenizers(cfg, corpus);
    const Vocabulary vocab = corpus_vocabulary(corpus);
    lm::DecoderModel model = load_checked_model(cfg, vocab);

    std::map<std::string, const vq::Codebook*> by_domain;
    for (const auto& dom : corpus.domains)
        by_domain[dom.spec.name] = &tokenizers.at(dom.spec.name).codebook;
    const auto bound = lm::BoundCodebooks::bind(vocab, by_domain);

    std::vector<PromptSequence> prompts;
    for (const auto& dom : corpus.domains) {
        const auto& pool = dom.split.test;
        std::vector<int> indices(pool.size());
        std::iota(indices.begin(), indices.end(), 0);
        if (static_cast<int>(pool.size()) > cfg.sample_per_domain) {
            Rng rng(derive_seed(cfg.seed, "embed:" + dom.spec.name));
            rng.shuffle(indices);
            indices.resize(cfg.sample_per_domain);
            std::sort(indices.begin(), indices.end());
        }
        auto& tok = tokenizers.at(dom.spec.name);
        for (int i : indices) {
            const auto codes = vq::tokenize(pool[i], tok.model, tok.codebook);
            prompts.push_back(
                build_prompt(pool[i], codes, dom.spec, vocab, PromptMode::sft_infer));
        }
    }
    const auto points = eval::export_pooled_embeddings(prompts, model, bound);
    write_text(run_dir / "embeddings.csv", eval::embeddings_csv(points));
    std::cout << points.size() << " points written to " << (run_dir / "embeddings.csv").string()
              << "\n";
    return 0;
}

int run_dump_prompt(const AppConfig& cfg, const fs::path& run_dir) {
    if (cfg.dump_domain.empty())
        throw Error(ErrKind::config, "dump.domain is required for dump-prompt");
    const Corpus corpus = load_normalized_corpus(cfg);
    const DomainData* dom = corpus.find(cfg.dump_domain);
    if (!dom)
        throw Error(ErrKind::config, "dump.domain '" + cfg.dump_domain + "' is not in the corpus");
    const auto& pool = cfg.dump_split == "test" ? dom->split.test : dom->split.train;
    if (cfg.dump_index < 0 || cfg.dump_index >= static_cast<int>(pool.size()))
        throw Error(ErrKind::argument, "dump.index " + std::to_string(cfg.dump_index) +
                                           " out of range for " + std::to_string(pool.size()) +
                                           " instances");
    auto tokenizer = vq::load_tokenizer(tokenizer_path(cfg, dom->spec.name), dom->spec);
    const Vocabulary vocab = corpus_vocabulary(corpus);

    PromptMode mode = PromptMode::sft_train;
    if (cfg.dump_mode == "pretrain") mode = PromptMode::pretrain;
    if (cfg.dump_mode == "sft_infer") mode = PromptMode::sft_infer;

    const auto& inst = pool[cfg.dump_index];
    const auto codes = vq::tokenize(inst, tokenizer.model, tokenizer.codebook);
    PromptSequence prompt = build_prompt(inst, codes, dom->spec, vocab, mode);
    if (cfg.dump_pad) prompt = pad_or_reject(prompt, cfg.model.context_window);

    const std::string text = dump_prompt(prompt, vocab);
    write_text(run_dir / "prompt.txt", text);
    std::cout << text;
    return 0;
}

}  // namespace

int cli_run(int argc, const char* const* argv) {
    CLI::App app{"instruction-prompted time series classification pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_flag;
    uint64_t seed_flag = 0;
    std::vector<std::string> overrides;

    auto* config_opt =
        app.add_option("--config", config_path, "configuration file (required)")->required();
    auto* seed_opt = app.add_option("--seed", seed_flag, "run seed (overrides [run] seed)");
    app.add_option("--set", overrides, "override section.key=value (repeatable)");
    app.add_option("--out", out_flag, "parent directory for the run directory");
    (void)config_opt;

    for (const auto& verb : kVerbs) {
        auto* sub = app.add_subcommand(verb);
        sub->fallthrough(true);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e) == 0 ? 0 : 2;
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    const std::string verb = app.get_subcommands().front()->get_name();

    try {
        AppConfig cfg = load_app_config(config_path, overrides);
        if (seed_opt->count() > 0) cfg.seed = seed_flag;

        std::string parent = out_flag;
        if (parent.empty())
            if (const char* env = std::getenv("INSTRUCTTIME_OUT")) parent = env;
        if (parent.empty()) parent = cfg.out_dir;
        if (parent.empty()) parent = "runs";

        const fs::path run_dir = make_run_dir(parent, verb, cfg.seed);
        write_text(run_dir / "config.ini", serialize_app_config(cfg));
        std::cout << "run directory " << run_dir.string() << "\n";

        if (verb == "gen-data") return run_gen_data(cfg, run_dir);
        if (verb == "train-tokenizer") return run_train_tokenizer(cfg, run_dir);
        if (verb == "pretrain") return run_pretrain(cfg, run_dir);
        if (verb == "finetune") return run_finetune(cfg, run_dir);
        if (verb == "evaluate") return run_evaluate(cfg, run_dir);
        if (verb == "grid") return run_grid(cfg, run_dir);
        if (verb == "stats") return run_stats(cfg, run_dir);
        if (verb == "export-embeddings") return run_export_embeddings(cfg, run_dir);
        if (verb == "dump-prompt") return run_dump_prompt(cfg, run_dir);
        throw Error(ErrKind::usage, "unknown verb '" + verb + "'");
    } catch (const Error& e) {
        std::cerr << "error [" << err_kind_name(e.kind()) << "] " << e.what() << "\n";
        return e.kind() == ErrKind::usage ? 2 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error [internal] " << e.what() << "\n";
        return 1;
    }
}

int cli_run(const std::vector<std::string>& args) {
    std::vector<std::string> full;
    full.emplace_back("instructtime");
    full.insert(full.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    argv.reserve(full.size());
    for (const auto& s : full) argv.push_back(s.c_str());
    return cli_run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace instructtime
