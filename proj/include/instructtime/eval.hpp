#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "instructtime/dataset.hpp"
#include "instructtime/lm.hpp"
#include "instructtime/prompting.hpp"
#include "instructtime/vq.hpp"

namespace instructtime::eval {

struct MetricsReport {
    std::string domain;
    std::string setting;
    Real accuracy = 0;
    Real f1 = 0;
    std::optional<Real> mse;
    int n_test = 0;
    std::vector<std::pair<std::string, Real>> per_label_f1;  // sorted by label
};

struct TokenFrequencyTable {
    std::string domain;
    std::vector<long long> counts;
    long long total = 0;
};

// A label is predicted iff its full sentence occurs as a contiguous token
// subsequence of the generated text; longest sentences claim their tokens
// first and claimed tokens are not reused.
std::set<std::string> parse_labels(const std::vector<int>& generated, const Vocabulary& vocab,
                                   const DomainSpec& spec);

// Truths must all be singletons. A prediction counts as correct only when it
// is exactly the truth singleton; any other prediction set contributes a
// false positive for each predicted label and a false negative for the truth.
MetricsReport score_multiclass(const std::vector<std::set<std::string>>& predictions,
                               const std::vector<std::set<std::string>>& truths);

// Exact-set-match accuracy; per-label F1 from set membership.
MetricsReport score_multilabel(const std::vector<std::set<std::string>>& predictions,
                               const std::vector<std::set<std::string>>& truths);

TokenFrequencyTable token_frequency(const std::vector<TimeSeriesInstance>& instances,
                                    vq::VqEncoderDecoder& model, const vq::Codebook& codebook,
                                    const std::string& domain);

struct EmbeddingPoint {
    Real x = 0;
    Real y = 0;
    std::string domain;
};

// Centered top-2 PCA projection of [n, d] rows; per-axis signs follow a
// fixed convention so the projection is deterministic.
nn::Tensor pca_plane(const nn::Tensor& rows);

// Mean-pools each prompt's final hidden states over non-PAD positions, then
// projects the pooled vectors onto the top-2 principal axes. Signs follow a
// fixed convention so the export is deterministic.
std::vector<EmbeddingPoint> export_pooled_embeddings(const std::vector<PromptSequence>& prompts,
                                                     lm::DecoderModel& model,
                                                     const lm::BoundCodebooks& codebooks);

// Generation-based evaluation of one domain's test split. max_new <= 0
// derives a cap from the longest possible answer.
MetricsReport evaluate_domain(const DomainData& domain, vq::VqEncoderDecoder& tok_model,
                              const vq::Codebook& codebook, lm::DecoderModel& model,
                              const Vocabulary& vocab, const std::string& setting,
                              int max_new = 0);

struct ResultRow {
    std::string domain;
    std::string setting;
    std::optional<int> k;
    std::optional<int> patch;
    std::optional<Real> fraction;
    std::optional<bool> pretrain;
    std::optional<bool> text;
    std::optional<Real> accuracy;
    std::optional<Real> f1;
    std::optional<Real> mse;
    uint64_t seed = 0;
};

ResultRow row_from_report(const MetricsReport& report, uint64_t seed);
std::string results_csv(const std::vector<ResultRow>& rows);
void write_results_csv(const std::string& path, const std::vector<ResultRow>& rows);

// Aligned domain-by-metric table (accuracy before F1) from results CSV text.
std::string render_summary(const std::string& csv_text);

std::string token_frequency_csv(const std::vector<TokenFrequencyTable>& tables);
std::string embeddings_csv(const std::vector<EmbeddingPoint>& points);

}  // namespace instructtime::eval
