#include "instructtime/eval.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "instructtime/common.hpp"

namespace instructtime::eval {

std::set<std::string> parse_labels(const std::vector<int>& generated, const Vocabulary& vocab,
                                   const DomainSpec& spec) {
    // Detokenize, keeping word tokens only.
    std::vector<std::string> words;
    for (int id : generated) {
        if (id < Vocabulary::kNumSpecials || vocab.is_ts(id)) continue;
        words.push_back(vocab.surface(id));
    }

    struct Candidate {
        const std::string* label;
        std::vector<std::string> tokens;
    };
    std::vector<Candidate> candidates;
    for (const auto& [id, text] : spec.labels) candidates.push_back({&id, tokenize_words(text)});
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) {
                         return a.tokens.size() > b.tokens.size();
                     });

    std::set<std::string> out;
    std::vector<char> claimed(words.size(), 0);
    for (const auto& cand : candidates) {
        const size_t n = cand.tokens.size();
        if (n == 0 || n > words.size()) continue;
        for (size_t i = 0; i + n <= words.size(); ++i) {
            bool match = true;
            for (size_t j = 0; j < n; ++j)
                if (claimed[i + j] || words[i + j] != cand.tokens[j]) {
                    match = false;
                    break;
                }
            if (!match) continue;
            for (size_t j = 0; j < n; ++j) claimed[i + j] = 1;
            out.insert(*cand.label);
            break;
        }
    }
    return out;
}

namespace {

struct Tally {
    long long tp = 0, fp = 0, fn = 0;
};

MetricsReport finish_report(const std::map<std::string, Tally>& tallies, Real accuracy, int n) {
    MetricsReport rep;
    rep.accuracy = accuracy;
    rep.n_test = n;
    Real sum = 0;
    for (const auto& [label, t] : tallies) {
        const Real denom = static_cast<Real>(2 * t.tp + t.fp + t.fn);
        const Real f1 = denom > 0 ? 2.0 * t.tp / denom : 0.0;
        rep.per_label_f1.emplace_back(label, f1);
        sum += f1;
    }
    rep.f1 = tallies.empty() ? 0.0 : sum / static_cast<Real>(tallies.size());
    return rep;
}

}  // namespace

MetricsReport score_multiclass(const std::vector<std::set<std::string>>& predictions,
                               const std::vector<std::set<std::string>>& truths) {
    if (predictions.size() != truths.size())
        throw Error(ErrKind::argument, "prediction and truth counts differ");
    std::map<std::string, Tally> tallies;
    long long correct = 0;
    for (size_t i = 0; i < truths.size(); ++i) {
        if (truths[i].size() != 1)
            throw Error(ErrKind::argument, "multiclass truths must be singletons");
        const std::string& truth = *truths[i].begin();
        tallies[truth];
        for (const auto& p : predictions[i]) tallies[p];
        if (predictions[i].size() == 1 && *predictions[i].begin() == truth) {
            ++correct;
            ++tallies[truth].tp;
        } else {
            for (const auto& p : predictions[i]) ++tallies[p].fp;
            ++tallies[truth].fn;
        }
    }
    const int n = static_cast<int>(truths.size());
    return finish_report(tallies, n ? static_cast<Real>(correct) / n : 0.0, n);
}

MetricsReport score_multilabel(const std::vector<std::set<std::string>>& predictions,
                               const std::vector<std::set<std::string>>& truths) {
    if (predictions.size() != truths.size())
        throw Error(ErrKind::argument, "prediction and truth counts differ");
    std::map<std::string, Tally> tallies;
    long long exact = 0;
    for (size_t i = 0; i < truths.size(); ++i) {
        if (predictions[i] == truths[i]) ++exact;
        for (const auto& t : truths[i]) {
            if (predictions[i].count(t)) ++tallies[t].tp;
            else ++tallies[t].fn;
        }
        for (const auto& p : predictions[i])
            if (!truths[i].count(p)) ++tallies[p].fp;
    }
    const int n = static_cast<int>(truths.size());
    return finish_report(tallies, n ? static_cast<Real>(exact) / n : 0.0, n);
}

TokenFrequencyTable token_frequency(const std::vector<TimeSeriesInstance>& instances,
                                    vq::VqEncoderDecoder& model, const vq::Codebook& codebook,
                                    const std::string& domain) {
    TokenFrequencyTable table;
    table.domain = domain;
    table.counts.assign(codebook.size(), 0);
    for (const auto& inst : instances)
        for (int code : vq::tokenize(inst, model, codebook)) {
            ++table.counts[code];
            ++table.total;
        }
    return table;
}

nn::Tensor pca_plane(const nn::Tensor& rows) {
    const int n = rows.rows();
    const int d = rows.cols();
    if (n < 3) throw Error(ErrKind::argument, "need at least 3 samples for the 2-D projection");
    if (d < 2) throw Error(ErrKind::argument, "need at least 2 feature dimensions");

    Eigen::MatrixXd X(n, d);
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < d; ++c) X(i, c) = rows.at(i, c);
    const Eigen::RowVectorXd mean = X.colwise().mean();
    X.rowwise() -= mean;
    const Eigen::MatrixXd cov = (X.transpose() * X) / static_cast<double>(n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    if (solver.info() != Eigen::Success)
        throw Error(ErrKind::divergence, "eigendecomposition failed");

    // Eigenvalues ascend; take the last two columns and fix signs so the
    // largest-magnitude component of each axis is positive.
    Eigen::MatrixXd axes(d, 2);
    axes.col(0) = solver.eigenvectors().col(d - 1);
    axes.col(1) = solver.eigenvectors().col(d - 2);
    for (int a = 0; a < 2; ++a) {
        int arg = 0;
        for (int c = 1; c < d; ++c)
            if (std::abs(axes(c, a)) > std::abs(axes(arg, a))) arg = c;
        if (axes(arg, a) < 0) axes.col(a) = -axes.col(a);
    }
    const Eigen::MatrixXd proj = X * axes;

    nn::Tensor out({n, 2});
    for (int i = 0; i < n; ++i) {
        out.at(i, 0) = proj(i, 0);
        out.at(i, 1) = proj(i, 1);
    }
    return out;
}

std::vector<EmbeddingPoint> export_pooled_embeddings(const std::vector<PromptSequence>& prompts,
                                                     lm::DecoderModel& model,
                                                     const lm::BoundCodebooks& codebooks) {
    const int n = static_cast<int>(prompts.size());
    if (n < 3) throw Error(ErrKind::argument, "need at least 3 samples for the 2-D projection");
    const int d = model.config.d_model;

    nn::Tensor pooled_rows({n, d});
    for (int i = 0; i < n; ++i) {
        const nn::Tensor h = lm::hidden_states(prompts[i], model, codebooks);
        int kept = 0;
        for (int t = 0; t < h.rows(); ++t) {
            if (prompts[i].ids[t] == Vocabulary::kPad) continue;
            for (int c = 0; c < d; ++c) pooled_rows.at(i, c) += h.v[size_t(t) * d + c];
            ++kept;
        }
        for (int c = 0; c < d; ++c) pooled_rows.at(i, c) /= std::max(kept, 1);
    }
    const nn::Tensor proj = pca_plane(pooled_rows);

    std::vector<EmbeddingPoint> out(n);
    for (int i = 0; i < n; ++i) {
        out[i].x = proj.at(i, 0);
        out[i].y = proj.at(i, 1);
        out[i].domain = prompts[i].domain;
    }
    return out;
}

MetricsReport evaluate_domain(const DomainData& domain, vq::VqEncoderDecoder& tok_model,
                              const vq::Codebook& codebook, lm::DecoderModel& model,
                              const Vocabulary& vocab, const std::string& setting, int max_new) {
    if (max_new <= 0) {
        int total = 0;
        for (const auto& [id, text] : domain.spec.labels)
            total += static_cast<int>(tokenize_words(text).size());
        max_new = total + static_cast<int>(domain.spec.labels.size()) + 2;
    }
    std::map<std::string, const vq::Codebook*> by_domain{{domain.spec.name, &codebook}};
    const lm::BoundCodebooks bound = lm::BoundCodebooks::bind(vocab, by_domain);

    std::vector<std::set<std::string>> preds, truths;
    bool multilabel = false;
    for (const auto& inst : domain.split.test) {
        const std::vector<int> codes = vq::tokenize(inst, tok_model, codebook);
        const PromptSequence prompt =
            build_prompt(inst, codes, domain.spec, vocab, PromptMode::sft_infer);
        std::vector<int> generated;
        try {
            generated = lm::generate(prompt, model, bound, max_new);
        } catch (const lm::GenerationOverflow& e) {
            generated = e.partial;
        }
        preds.push_back(parse_labels(generated, vocab, domain.spec));
        truths.emplace_back(inst.labels.begin(), inst.labels.end());
        if (inst.labels.size() > 1) multilabel = true;
    }
    MetricsReport rep = multilabel ? score_multilabel(preds, truths)
                                   : score_multiclass(preds, truths);
    rep.domain = domain.spec.name;
    rep.setting = setting;
    rep.mse = vq::reconstruction_mse(domain.split.test, tok_model, codebook);
    return rep;
}

ResultRow row_from_report(const MetricsReport& report, uint64_t seed) {
    ResultRow row;
    row.domain = report.domain;
    row.setting = report.setting;
    row.accuracy = report.accuracy;
    row.f1 = report.f1;
    row.mse = report.mse;
    row.seed = seed;
    return row;
}

std::string results_csv(const std::vector<ResultRow>& rows) {
    std::ostringstream os;
    os << "domain,setting,K,patch,fraction,pretrain,text,accuracy,f1,mse,seed\n";
    for (const auto& r : rows) {
        os << r.domain << ',' << r.setting << ',';
        if (r.k) os << *r.k;
        os << ',';
        if (r.patch) os << *r.patch;
        os << ',';
        if (r.fraction) os << format_real(*r.fraction);
        os << ',';
        if (r.pretrain) os << (*r.pretrain ? "true" : "false");
        os << ',';
        if (r.text) os << (*r.text ? "true" : "false");
        os << ',';
        if (r.accuracy) os << format_real(*r.accuracy);
        os << ',';
        if (r.f1) os << format_real(*r.f1);
        os << ',';
        if (r.mse) os << format_real(*r.mse);
        os << ',' << r.seed << '\n';
    }
    return os.str();
}

void write_results_csv(const std::string& path, const std::vector<ResultRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrKind::io, "cannot write " + path);
    out << results_csv(rows);
}

std::string render_summary(const std::string& csv_text) {
    std::istringstream in(csv_text);
    std::string line;
    if (!std::getline(in, line)) return "no results\n";
    std::vector<std::vector<std::string>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        rows.push_back(split(line, ','));
    }
    if (rows.empty()) return "no results\n";

    std::vector<std::vector<std::string>> cells;
    cells.push_back({"domain", "setting", "accuracy", "f1", "mse"});
    for (const auto& r : rows) {
        if (r.size() < 11) continue;
        cells.push_back({r[0], r[1], r[7].empty() ? "-" : r[7], r[8].empty() ? "-" : r[8],
                         r[9].empty() ? "-" : r[9]});
    }
    std::vector<size_t> widths(cells[0].size(), 0);
    for (const auto& row : cells)
        for (size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], row[c].size());
    std::ostringstream os;
    for (const auto& row : cells) {
        for (size_t c = 0; c < row.size(); ++c) {
            os << row[c] << std::string(widths[c] - row[c].size(), ' ');
            os << (c + 1 < row.size() ? "  " : "");
        }
        os << '\n';
    }
    return os.str();
}

std::string token_frequency_csv(const std::vector<TokenFrequencyTable>& tables) {
    std::ostringstream os;
    os << "domain,code,count\n";
    for (const auto& t : tables)
        for (size_t k = 0; k < t.counts.size(); ++k)
            os << t.domain << ',' << k << ',' << t.counts[k] << '\n';
    return os.str();
}

std::string embeddings_csv(const std::vector<EmbeddingPoint>& points) {
    std::ostringstream os;
    os << "x,y,domain\n";
    for (const auto& p : points)
        os << format_real(p.x) << ',' << format_real(p.y) << ',' << p.domain << '\n';
    return os.str();
}

}  // namespace instructtime::eval
