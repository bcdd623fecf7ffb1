#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "instructtime/tensor.hpp"

namespace instructtime {

struct TimeSeriesInstance {
    std::string instance_id;
    nn::Tensor values;  // [L, H], time-major rows
    std::string domain;
    std::vector<std::string> labels;  // ordered, >=1; >1 means multi-label
    std::vector<std::pair<std::string, std::string>> context;
};

struct DomainSpec {
    std::string name;
    int channels = 0;
    int length = 0;
    int patch_size = 0;
    int codebook_size = 0;
    std::vector<std::pair<std::string, std::string>> labels;  // (id, sentence), declared order
    std::string task_description;
    std::vector<std::string> context_schema;
    int token_budget = 0;

    int token_count() const { return length / patch_size; }
    const std::string* sentence_for(const std::string& label_id) const;
    void validate() const;
    uint64_t hash() const;
};

struct CorpusSplit {
    std::vector<TimeSeriesInstance> train;
    std::vector<TimeSeriesInstance> test;
    double fraction = 1.0;  // applied to train relative to the full corpus
};

struct DomainData {
    DomainSpec spec;
    CorpusSplit split;
};

struct Corpus {
    std::vector<DomainData> domains;  // manifest order

    const DomainData* find(const std::string& name) const;
    DomainData* find(const std::string& name);
};

Corpus load_corpus(const std::string& root_path);
void write_corpus(const std::string& root_path, const Corpus& corpus);

// Per-channel population z-score; constant channels become all-zeros.
TimeSeriesInstance normalize(const TimeSeriesInstance& instance);
void normalize_corpus(Corpus& corpus);

// Indices of a stratified (by first label) subsample of ceil(fraction * n)
// instances, deterministic under seed, in ascending order.
std::vector<int> stratified_pick(const std::vector<TimeSeriesInstance>& instances, double fraction,
                                 uint64_t seed);

// Stratified (by first label) subsample of ceil(fraction * |train|) instances,
// deterministic under seed, preserving original train order.
CorpusSplit subset_train(const CorpusSplit& split, double fraction, uint64_t seed);

// Sorted, deduplicated context values across all instances; feeds the
// vocabulary so context segments tokenize in-vocabulary.
std::vector<std::string> corpus_context_values(const Corpus& corpus);

struct SyntheticSpec {
    std::string name;
    std::vector<std::string> classes;  // subset of {sine, square, sawtooth, noise-burst}, >=1
    double freq_min = 3.0;             // cycles over the full instance
    double freq_max = 6.0;
    double sigma = 0.1;                // additive Gaussian noise level
    int length = 64;
    int channels = 1;
    int train_per_class = 200;
    int test_per_class = 50;
    int multilabel_train = 0;  // extra two-class superposition instances
    int multilabel_test = 0;
    int patch_size = 4;
    int codebook_size = 32;
    int token_budget = 0;  // 0 means derive from length / patch_size
};

DomainData generate_synthetic_domain(const SyntheticSpec& spec, uint64_t seed);

}  // namespace instructtime
