#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "instructtime/dataset.hpp"
#include "instructtime/lm.hpp"
#include "instructtime/training.hpp"
#include "instructtime/vq.hpp"

namespace instructtime {

// Parsed `key = value` sections in file order; duplicate sections merge into
// the first occurrence and duplicate keys keep the last value.
struct IniDoc {
    std::vector<std::pair<std::string, std::map<std::string, std::string>>> sections;

    std::map<std::string, std::string>* find(const std::string& name);
    const std::map<std::string, std::string>* find(const std::string& name) const;
    std::map<std::string, std::string>& section(const std::string& name);
};

IniDoc parse_ini(const std::string& text);

// `section.key=value`; the key is everything after the last dot before '='.
void apply_override(IniDoc& doc, const std::string& spec);

// Every tunable of the pipeline, with defaults materialized. The echoed form
// (serialize_app_config) parses back to an identical object.
struct AppConfig {
    uint64_t seed = 0;
    std::string corpus_root = "data";
    std::vector<SyntheticSpec> synthetic;
    vq::VqTrainConfig tokenizer;
    lm::LmConfig model;
    train::TrainConfig pretrain_cfg;
    train::TrainConfig sft_cfg;
    std::string sft_domain;
    Real sft_fraction = 1.0;
    std::string sft_from = "pretrained";  // pretrained | fresh
    train::GridSpec grid;
    int eval_max_new = 0;  // 0 derives a cap from the longest answer
    int sample_per_domain = 200;
    std::string dump_domain;
    int dump_index = 0;
    std::string dump_split = "train";
    std::string dump_mode = "sft_train";
    bool dump_pad = false;
    std::string out_dir;
    std::string tokenizer_dir;
    std::string lm_checkpoint;

    AppConfig();
};

AppConfig bind_app_config(const IniDoc& doc);
AppConfig parse_app_config(const std::string& text, const std::vector<std::string>& overrides);
AppConfig load_app_config(const std::string& path, const std::vector<std::string>& overrides);
std::string serialize_app_config(const AppConfig& config);

}  // namespace instructtime
