#pragma once

// Overlap metrics and micro-averaged set scoring of state-change clauses.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "kiest/error.hpp"
#include "kiest/text.hpp"

namespace kiest {

enum class Overlap { ExactMatch, Bleu2, RougeL };

inline const char* overlap_name(Overlap o) {
    switch (o) {
        case Overlap::ExactMatch: return "exact";
        case Overlap::Bleu2: return "bleu2";
        case Overlap::RougeL: return "rougeL";
    }
    return "?";
}

inline constexpr Overlap kAllOverlaps[] = {Overlap::ExactMatch, Overlap::Bleu2, Overlap::RougeL};

inline double exact_match(std::string_view a, std::string_view b) {
    return normalize_text(a) == normalize_text(b) ? 1.0 : 0.0;
}

inline double bleu2(const std::vector<std::string>& cand, const std::vector<std::string>& ref) {
    if (cand.empty() || ref.empty()) return 0.0;
    auto clipped = [&](std::size_t n) {
        std::map<std::vector<std::string>, std::size_t> rc, cc;
        for (std::size_t i = 0; i + n <= ref.size(); ++i) ++rc[{ref.begin() + i, ref.begin() + i + n}];
        for (std::size_t i = 0; i + n <= cand.size(); ++i) ++cc[{cand.begin() + i, cand.begin() + i + n}];
        std::size_t m = 0;
        for (const auto& [g, c] : cc) {
            auto it = rc.find(g);
            if (it != rc.end()) m += std::min(c, it->second);
        }
        return static_cast<double>(m) / static_cast<double>(cand.size() - n + 1);
    };
    const double p1 = clipped(1);
    double score = cand.size() == 1 ? p1 : std::sqrt(p1 * clipped(2));
    const double c = static_cast<double>(cand.size()), r = static_cast<double>(ref.size());
    if (c < r) score *= std::exp(1.0 - r / c);
    return score;
}

inline std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

inline double rouge_l(const std::vector<std::string>& cand, const std::vector<std::string>& ref) {
    if (cand.empty() || ref.empty()) return 0.0;
    const double l = static_cast<double>(lcs_length(cand, ref));
    if (l == 0.0) return 0.0;
    const double p = l / cand.size(), r = l / ref.size();
    return 2 * p * r / (p + r);
}

inline double overlap_score(Overlap o, const std::string& cand, const std::string& ref) {
    switch (o) {
        case Overlap::ExactMatch: return exact_match(cand, ref);
        case Overlap::Bleu2: return bleu2(split_whitespace(normalize_text(cand)), split_whitespace(normalize_text(ref)));
        case Overlap::RougeL: return rouge_l(split_whitespace(normalize_text(cand)), split_whitespace(normalize_text(ref)));
    }
    return 0.0;
}

inline double f1_of(double p, double r) { return p + r == 0.0 ? 0.0 : 2 * p * r / (p + r); }

struct Prf {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

struct EvalReport {
    std::map<std::string, Prf> scores;  // keyed by overlap_name
    std::size_t examples = 0;
    std::size_t predictions = 0;
    std::size_t golds = 0;

    const Prf& at(Overlap o) const {
        auto it = scores.find(overlap_name(o));
        if (it == scores.end()) throw ContractError(std::string("report lacks metric ") + overlap_name(o));
        return it->second;
    }
};

using ClauseSets = std::vector<std::vector<std::string>>;

// Pooled sums behind the micro scores; examples can be added and removed.
class MicroAccumulator {
public:
    explicit MicroAccumulator(Overlap o) : overlap_(o) {}

    struct Contribution {
        double precision_sum = 0.0;
        std::size_t predictions = 0;
        double recall_sum = 0.0;
        std::size_t golds = 0;
    };

    Contribution contribution(const std::vector<std::string>& pred, const std::vector<std::string>& gold) const {
        Contribution c;
        c.predictions = pred.size();
        c.golds = gold.size();
        for (const auto& p : pred) {
            double best = 0.0;
            for (const auto& g : gold) best = std::max(best, overlap_score(overlap_, p, g));
            c.precision_sum += best;
        }
        for (const auto& g : gold) {
            double best = 0.0;
            for (const auto& p : pred) best = std::max(best, overlap_score(overlap_, p, g));
            c.recall_sum += best;
        }
        return c;
    }

    void add(const Contribution& c) { apply(c, 1.0); }
    void remove(const Contribution& c) { apply(c, -1.0); }

    Prf scores() const {
        Prf out;
        out.precision = predictions_ ? precision_sum_ / static_cast<double>(predictions_) : 0.0;
        out.recall = golds_ ? recall_sum_ / static_cast<double>(golds_) : 0.0;
        out.f1 = f1_of(out.precision, out.recall);
        return out;
    }

    std::size_t predictions() const { return predictions_; }
    std::size_t golds() const { return golds_; }

private:
    void apply(const Contribution& c, double sign) {
        precision_sum_ += sign * c.precision_sum;
        recall_sum_ += sign * c.recall_sum;
        predictions_ = sign > 0 ? predictions_ + c.predictions : predictions_ - c.predictions;
        golds_ = sign > 0 ? golds_ + c.golds : golds_ - c.golds;
    }

    Overlap overlap_;
    double precision_sum_ = 0.0;
    double recall_sum_ = 0.0;
    std::size_t predictions_ = 0;
    std::size_t golds_ = 0;
};

inline EvalReport micro_set_scores(const ClauseSets& predictions, const ClauseSets& golds, Overlap overlap) {
    if (predictions.size() != golds.size()) {
        throw ContractError("predictions and golds are not aligned: " + std::to_string(predictions.size()) + " vs " +
                            std::to_string(golds.size()) + " examples");
    }
    MicroAccumulator acc(overlap);
    for (std::size_t i = 0; i < predictions.size(); ++i) acc.add(acc.contribution(predictions[i], golds[i]));
    EvalReport r;
    r.scores[overlap_name(overlap)] = acc.scores();
    r.examples = predictions.size();
    r.predictions = acc.predictions();
    r.golds = acc.golds();
    return r;
}

inline EvalReport evaluate_all(const ClauseSets& predictions, const ClauseSets& golds) {
    EvalReport r;
    for (Overlap o : kAllOverlaps) {
        EvalReport one = micro_set_scores(predictions, golds, o);
        r.scores.merge(one.scores);
        r.examples = one.examples;
        r.predictions = one.predictions;
        r.golds = one.golds;
    }
    return r;
}

}  // namespace kiest
