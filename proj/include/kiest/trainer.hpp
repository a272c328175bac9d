#pragma once

// Cross-entropy then combined CE + policy-gradient training with per-epoch
// evaluation, best-dev checkpointing and resumable state.

#include <cmath>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "kiest/coherence.hpp"
#include "kiest/numerics/checkpoint.hpp"
#include "kiest/numerics/optim.hpp"
#include "kiest/pipeline.hpp"

namespace kiest {

struct TrainConfig {
    double lr_model = 5e-5;
    double lr_selector = 2e-5;
    double lr_classifier = 2e-5;
    std::size_t batch_model = 6;
    std::size_t batch_classifier = 32;
    double label_smoothing = 0.1;
    double lambda = 0.1;
    double clip_norm = 1.0;
    double weight_decay = 0.01;
    std::size_t epochs = 30;
    std::uint64_t seed = 1;
    std::size_t rl_start_epoch = 0;  // 0 disables the RL phase; epochs are 1-based
    std::size_t rl_samples = 1;
    RewardForm reward_form = RewardForm::LogProb;
    std::size_t patience = 10;
    std::size_t eval_every = 1;
    bool eval_train = false;
    double target_train_exact = 0.0;  // stop once training exact-match F1 reaches it (0 disables)
    double gamma = 0.4;               // decoding threshold for evaluation
    std::size_t max_gen_len = 32;
};

inline Tensor combined_loss(const Tensor& l_ce, const Tensor& l_rl, double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must be in [0, 1], got " + std::to_string(lambda));
    return add(scale(l_ce, 1.0 - lambda), scale(l_rl, lambda));
}

inline void validate(const TrainConfig& c) {
    if (!(c.lr_model > 0 && c.lr_selector > 0 && c.lr_classifier > 0)) throw ConfigError("learning rates must be > 0");
    if (!(c.lambda >= 0.0 && c.lambda <= 1.0)) throw ConfigError("lambda must be in [0, 1]");
    if (c.batch_model < 1 || c.batch_classifier < 1) throw ConfigError("batch sizes must be >= 1");
    if (c.label_smoothing < 0.0 || c.label_smoothing >= 1.0) throw ConfigError("label_smoothing must be in [0, 1)");
    if (c.eval_every < 1) throw ConfigError("eval_every must be >= 1");
}

struct LogRow {
    std::size_t epoch = 0;
    std::string split;
    double exact_f1 = 0.0;
    double bleu2_f1 = 0.0;
    double rougeL_f1 = 0.0;
    double loss = 0.0;
};

inline constexpr const char* kLogHeader = "epoch,split,exact_f1,bleu2_f1,rougeL_f1,loss";

inline std::string log_row_csv(const LogRow& r) {
    std::ostringstream os;
    os.precision(10);
    os << r.epoch << ',' << r.split << ',' << r.exact_f1 << ',' << r.bleu2_f1 << ',' << r.rougeL_f1 << ',' << r.loss;
    return os.str();
}

inline std::string log_csv(const std::vector<LogRow>& rows) {
    std::string out = std::string(kLogHeader) + "\n";
    for (const auto& r : rows) out += log_row_csv(r) + "\n";
    return out;
}

struct TrainState {
    std::size_t epoch = 0;  // last finished epoch
    double best_score = -1.0;
    double best_tiebreak = -1.0;  // dev ROUGE-L F1 (or -loss) when the exact scores tie
    std::size_t best_epoch = 0;
    std::size_t stale = 0;
    std::vector<LogRow> log;
    std::string best_checkpoint;  // encoded parameters at the best epoch
};

struct TrainResult {
    TrainState state;
    bool stopped_early = false;
    bool reached_target = false;
    std::vector<double> train_losses;
    std::vector<double> clipped_norms;  // per step
};

inline EvalReport evaluate_set(const DkgedModel& model, const std::vector<PreparedExample>& set, double gamma,
                               std::size_t max_len, std::vector<Prediction>* out = nullptr, std::size_t threads = 1) {
    std::vector<Prediction> preds =
        parallel_map(set.size(), threads, [&](std::size_t i) { return predict(model, set[i], gamma, max_len); });
    EvalReport r = score_predictions(preds, set);
    if (out) *out = std::move(preds);
    return r;
}

class Trainer {
public:
    Trainer(DkgedModel& model, const TrainConfig& cfg, const CoherenceClassifier* clf = nullptr)
        : model_(model), cfg_(cfg), clf_(clf), opt_(model.params().tensors(), adam_config(cfg)), data_rng_(cfg.seed),
          rl_rng_(cfg.seed ^ 0x5bd1e995ULL) {
        validate(cfg);
        if (cfg.rl_start_epoch > 0 && !clf) throw ConfigError("the RL phase needs a coherence classifier");
    }

    TrainState& state() { return state_; }
    AdamW& optimizer() { return opt_; }

    // Runs epochs state.epoch+1 .. cfg.epochs.
    TrainResult run(const std::vector<PreparedExample>& train, const std::vector<PreparedExample>& dev) {
        if (train.empty()) throw ContractError("empty training set");
        TrainResult res;
        std::vector<std::size_t> order(train.size());
        while (state_.epoch < cfg_.epochs) {
            const std::size_t epoch = state_.epoch + 1;
            const bool rl = cfg_.rl_start_epoch > 0 && epoch >= cfg_.rl_start_epoch;
            // Fresh permutation each epoch so a resumed run only needs the RNG state.
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            std::shuffle(order.begin(), order.end(), data_rng_);
            double total = 0.0;
            for (std::size_t start = 0; start < order.size(); start += cfg_.batch_model) {
                const std::size_t end = std::min(order.size(), start + cfg_.batch_model);
                std::vector<Tensor> ce, rls;
                for (std::size_t b = start; b < end; ++b) {
                    const PreparedExample& p = train[order[b]];
                    const auto ids = model_.source_ids(p.x);
                    const Tensor X = model_.encode_ids(ids);
                    const Knowledge k = model_.knowledge(p.kg);
                    const Tensor logits = model_.forward_teacher_forced(X, p.target, k);
                    const auto tgt = model_.vocab().encode(p.target);
                    ce.push_back(cross_entropy(logits, tgt, cfg_.label_smoothing));
                    if (rl) {
                        const ConstrainedVocab cv =
                            build_constrained_vocab(ids, model_.vocab(), model_.embeddings(), cfg_.gamma);
                        rls.push_back(rl_loss(model_, *clf_, X, k, cv, cfg_.rl_samples, cfg_.reward_form, rl_rng_,
                                              cfg_.max_gen_len)
                                          .loss);
                    }
                }
                const double inv = 1.0 / static_cast<double>(ce.size());
                Tensor loss = scale(sum_scalars(ce), inv);
                if (rl) loss = combined_loss(loss, scale(sum_scalars(rls), inv), cfg_.lambda);
                const double lv = loss.item();
                if (!std::isfinite(lv)) {
                    std::string ids;
                    for (std::size_t b = start; b < end; ++b) ids += (ids.empty() ? "" : ", ") + train[order[b]].example.id;
                    throw Error("non-finite loss " + std::to_string(lv) + " at epoch " + std::to_string(epoch) +
                                " in batch [" + ids + "]");
                }
                total += lv * static_cast<double>(ce.size());
                backward(loss);
                res.clipped_norms.push_back(opt_.step().clipped_norm);
            }
            const double mean_loss = total / static_cast<double>(train.size());
            res.train_losses.push_back(mean_loss);
            state_.epoch = epoch;

            if (epoch % cfg_.eval_every != 0 && epoch != cfg_.epochs) continue;
            double train_exact = -1.0;
            if (cfg_.eval_train) {
                const EvalReport r = evaluate_set(model_, train, cfg_.gamma, cfg_.max_gen_len);
                state_.log.push_back(row(epoch, "train", r, mean_loss));
                train_exact = r.at(Overlap::ExactMatch).f1;
            }
            double score = train_exact, tiebreak = -mean_loss;
            if (!dev.empty()) {
                const EvalReport r = evaluate_set(model_, dev, cfg_.gamma, cfg_.max_gen_len);
                state_.log.push_back(row(epoch, "dev", r, mean_loss));
                score = r.at(Overlap::ExactMatch).f1;
                tiebreak = r.at(Overlap::RougeL).f1;
            } else if (!cfg_.eval_train) {
                state_.log.push_back({epoch, "train", 0.0, 0.0, 0.0, mean_loss});
                score = -mean_loss;
            }
            if (score > state_.best_score || (score == state_.best_score && tiebreak > state_.best_tiebreak)) {
                state_.best_score = score;
                state_.best_tiebreak = tiebreak;
                state_.best_epoch = epoch;
                state_.stale = 0;
                state_.best_checkpoint = encode_checkpoint(snapshot(model_.params(), model_.metadata()));
            } else if (++state_.stale >= cfg_.patience) {
                res.stopped_early = true;
                break;
            }
            if (cfg_.target_train_exact > 0.0 && train_exact >= cfg_.target_train_exact) {
                res.reached_target = true;
                break;
            }
        }
        res.state = state_;
        return res;
    }

    // Parameters, optimizer moments, RNG streams and bookkeeping.
    std::string save_state() const {
        Checkpoint ck = snapshot(model_.params());
        const auto& ps = model_.params().params();
        for (std::size_t i = 0; i < ps.size(); ++i) {
            ck.records.push_back({"opt.m." + ps[i].name, ps[i].tensor.shape(), opt_.first_moments()[i]});
            ck.records.push_back({"opt.v." + ps[i].name, ps[i].tensor.shape(), opt_.second_moments()[i]});
        }
        if (!state_.best_checkpoint.empty())
            for (auto r : decode_checkpoint(state_.best_checkpoint).records) {
                r.name = "best." + r.name;
                ck.records.push_back(std::move(r));
            }
        nlohmann::json j;
        j["model_meta"] = model_.metadata();
        j["epoch"] = state_.epoch;
        j["best_score"] = state_.best_score;
        j["best_tiebreak"] = state_.best_tiebreak;
        j["best_epoch"] = state_.best_epoch;
        j["stale"] = state_.stale;
        j["opt_steps"] = opt_.step_count();
        std::ostringstream a, b;
        a << data_rng_;
        b << rl_rng_;
        j["data_rng"] = a.str();
        j["rl_rng"] = b.str();
        j["log"] = nlohmann::json::array();
        for (const auto& r : state_.log) j["log"].push_back(log_row_csv(r));
        ck.metadata = j.dump();
        return encode_checkpoint(ck);
    }

    void load_state(const std::string& bytes) {
        const Checkpoint ck = decode_checkpoint(bytes);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(ck.metadata);
        } catch (const nlohmann::json::exception& e) {
            throw IoError("training state metadata is not JSON: " + std::string(e.what()));
        }
        restore(model_.params(), ck);
        const auto& ps = model_.params().params();
        for (std::size_t i = 0; i < ps.size(); ++i) {
            const auto* m = ck.find("opt.m." + ps[i].name);
            const auto* v = ck.find("opt.v." + ps[i].name);
            if (!m || !v) throw IoError("training state lacks optimizer moments for " + ps[i].name);
            opt_.first_moments()[i] = m->values;
            opt_.second_moments()[i] = v->values;
        }
        opt_.set_step_count(j.at("opt_steps").get<std::size_t>());
        state_.epoch = j.at("epoch").get<std::size_t>();
        state_.best_score = j.at("best_score").get<double>();
        state_.best_tiebreak = j.value("best_tiebreak", -1.0);
        state_.best_epoch = j.at("best_epoch").get<std::size_t>();
        state_.stale = j.at("stale").get<std::size_t>();
        std::istringstream a(j.at("data_rng").get<std::string>()), b(j.at("rl_rng").get<std::string>());
        a >> data_rng_;
        b >> rl_rng_;
        state_.log.clear();
        for (const auto& line : j.at("log")) state_.log.push_back(parse_log_row(line.get<std::string>()));
        state_.best_checkpoint.clear();
        Checkpoint best;
        best.metadata = j.at("model_meta").get<std::string>();
        for (const auto& r : ck.records)
            if (r.name.rfind("best.", 0) == 0) best.records.push_back({r.name.substr(5), r.shape, r.values});
        if (!best.records.empty()) state_.best_checkpoint = encode_checkpoint(best);
    }

    static LogRow parse_log_row(const std::string& line) {
        LogRow r;
        std::istringstream is(line);
        std::string f;
        std::vector<std::string> fields;
        while (std::getline(is, f, ',')) fields.push_back(f);
        if (fields.size() != 6) throw ParseError("metric log row needs 6 fields: " + line, 0);
        r.epoch = std::stoul(fields[0]);
        r.split = fields[1];
        r.exact_f1 = std::stod(fields[2]);
        r.bleu2_f1 = std::stod(fields[3]);
        r.rougeL_f1 = std::stod(fields[4]);
        r.loss = std::stod(fields[5]);
        return r;
    }

private:
    static AdamWConfig adam_config(const TrainConfig& c) {
        AdamWConfig a;
        a.lr = c.lr_model;
        a.weight_decay = c.weight_decay;
        a.clip_norm = c.clip_norm;
        return a;
    }

    static LogRow row(std::size_t epoch, const char* split, const EvalReport& r, double loss) {
        return {epoch, split, r.at(Overlap::ExactMatch).f1, r.at(Overlap::Bleu2).f1, r.at(Overlap::RougeL).f1, loss};
    }

    DkgedModel& model_;
    TrainConfig cfg_;
    const CoherenceClassifier* clf_;
    AdamW opt_;
    Rng data_rng_;
    Rng rl_rng_;
    TrainState state_;
};

}  // namespace kiest
