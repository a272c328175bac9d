#pragma once

// Vocabulary, template slot tracking and the routed encoder-decoder.

#include <algorithm>
#include <fstream>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "kiest/corpus.hpp"
#include "kiest/graphenc.hpp"
#include "kiest/numerics/checkpoint.hpp"
#include "kiest/numerics/nn.hpp"

namespace kiest {

inline constexpr const char* kPad = "<pad>";
inline constexpr const char* kBos = "<bos>";
inline constexpr const char* kEos = "<eos>";
inline constexpr const char* kUnk = "<unk>";
inline constexpr const char* kSep = "<sep>";
inline constexpr const char* kTemplateTokens[] = {"of", "was", "before", "and", "afterwards"};

class Vocabulary {
public:
    static constexpr std::size_t pad = 0, bos = 1, eos = 2, unk = 3, sep = 4;

    Vocabulary() {
        for (const char* t : {kPad, kBos, kEos, kUnk, kSep}) push(t);
        for (const char* t : kTemplateTokens) push(t);
    }

    // Reserved and template tokens first, then the rest sorted.
    static Vocabulary build(const std::vector<std::string>& tokens) {
        Vocabulary v;
        std::set<std::string> rest(tokens.begin(), tokens.end());
        for (const auto& t : rest)
            if (!v.contains(t)) v.push(t);
        return v;
    }

    // One token per line; line number is the id.
    static Vocabulary from_lines(const std::vector<std::string>& lines) {
        Vocabulary v;
        if (lines.size() < v.size()) throw ParseError("vocabulary shorter than its reserved block", lines.size());
        for (std::size_t i = 0; i < v.size(); ++i)
            if (lines[i] != v.tokens_[i]) throw ParseError("vocabulary line does not hold reserved token " + v.tokens_[i], i + 1);
        for (std::size_t i = v.size(); i < lines.size(); ++i) {
            if (v.contains(lines[i])) throw ParseError("duplicate vocabulary token " + lines[i], i + 1);
            v.push(lines[i]);
        }
        return v;
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw IoError("cannot open vocabulary " + path);
        std::vector<std::string> lines;
        std::string line;
        while (std::getline(f, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            lines.push_back(line);
        }
        return from_lines(lines);
    }

    void save(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw IoError("cannot write vocabulary " + path);
        for (const auto& t : tokens_) f << t << '\n';
    }

    std::size_t size() const { return tokens_.size(); }
    bool contains(const std::string& t) const { return ids_.count(t) > 0; }
    std::size_t id(const std::string& t) const {
        auto it = ids_.find(t);
        return it == ids_.end() ? unk : it->second;
    }
    const std::string& token(std::size_t id) const {
        if (id >= tokens_.size()) throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(tokens_.size()));
        return tokens_[id];
    }
    const std::vector<std::string>& tokens() const { return tokens_; }

    std::vector<std::size_t> encode(const std::vector<std::string>& toks) const {
        std::vector<std::size_t> out;
        out.reserve(toks.size());
        for (const auto& t : toks) out.push_back(id(t));
        return out;
    }
    std::vector<std::string> decode(const std::vector<std::size_t>& ids) const {
        std::vector<std::string> out;
        out.reserve(ids.size());
        for (auto i : ids) out.push_back(token(i));
        return out;
    }

    static bool is_reserved(std::size_t id) { return id <= sep; }
    bool is_template(std::size_t id) const { return id > sep && id <= sep + std::size(kTemplateTokens); }

private:
    void push(const std::string& t) {
        ids_.emplace(t, tokens_.size());
        tokens_.push_back(t);
    }
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::size_t> ids_;
};

// ---------------------------------------------------------------------------
// Template slots

enum class SlotKind { Attribute, Entity, BeforeState, AfterState, TemplateToken };

inline const char* slot_kind_name(SlotKind k) {
    switch (k) {
        case SlotKind::Attribute: return "Attribute";
        case SlotKind::Entity: return "Entity";
        case SlotKind::BeforeState: return "BeforeState";
        case SlotKind::AfterState: return "AfterState";
        case SlotKind::TemplateToken: return "TemplateToken";
    }
    return "?";
}

struct SlotSpan {
    SlotKind kind;
    std::size_t start = 0;
    std::size_t end = 0;  // exclusive
};

// Clause state machine over target tokens (words plus "<sep>"/"<eos>").
class ClauseTracker {
public:
    enum class Phase { Attribute, Entity, Before, After, Closed, Finished };

    Phase phase() const { return phase_; }
    std::size_t content() const { return content_; }
    bool pending_before() const { return pending_before_; }
    bool at_sequence_start() const { return fed_ == 0; }

    // Kind of the next position.
    SlotKind kind() const {
        switch (phase_) {
            case Phase::Attribute: return SlotKind::Attribute;
            case Phase::Entity: return SlotKind::Entity;
            case Phase::Before: return SlotKind::BeforeState;
            case Phase::After: return SlotKind::AfterState;
            default: return SlotKind::TemplateToken;
        }
    }

    // Role of `tok` at the current position, then advances. Throws
    // MalformedTemplate when the prefix cannot extend to a valid clause.
    SlotKind feed(const std::string& tok) {
        const std::size_t pos = fed_++;
        auto fail = [&](const std::string& why) {
            return MalformedTemplate("malformed prefix at position " + std::to_string(pos) + ": " + why, tok);
        };
        if (tok == kBos) {
            reset_clause();
            return SlotKind::TemplateToken;
        }
        const bool before_pending = pending_before_;
        pending_before_ = false;
        switch (phase_) {
            case Phase::Finished: throw fail("token after end of sequence");
            case Phase::Closed:
                if (tok == kSep) {
                    reset_clause();
                    return SlotKind::TemplateToken;
                }
                if (tok == kEos) {
                    phase_ = Phase::Finished;
                    return SlotKind::TemplateToken;
                }
                throw fail("clause is closed; expected <sep> or <eos>");
            case Phase::Attribute:
            case Phase::Entity: {
                const bool attr = phase_ == Phase::Attribute;
                const char* delim = attr ? "of" : "was";
                if (tok == delim) {
                    if (content_ == 0) throw fail(std::string("empty ") + (attr ? "attribute" : "entity"));
                    phase_ = attr ? Phase::Entity : Phase::Before;
                    content_ = 0;
                    return SlotKind::TemplateToken;
                }
                if (attr && tok == kEos && pos == 0) {
                    phase_ = Phase::Finished;
                    return SlotKind::TemplateToken;
                }
                if (tok == "of" || tok == "was" || tok == "afterwards" || tok == kSep || tok == kEos) throw fail("unexpected " + tok);
                if (tok == "and" && before_pending) throw fail("\"before and\" inside attribute or entity");
                pending_before_ = tok == "before";
                ++content_;
                return attr ? SlotKind::Attribute : SlotKind::Entity;
            }
            case Phase::Before:
                if (tok == "and" && before_pending) {
                    if (content_ == 0) throw fail("empty before_state");
                    phase_ = Phase::After;
                    content_ = 0;
                    return SlotKind::TemplateToken;
                }
                if (before_pending) ++content_;  // the held "before" was content
                if (tok == "before") {
                    pending_before_ = true;
                    return SlotKind::TemplateToken;
                }
                if (tok == "afterwards" || tok == kSep || tok == kEos) throw fail("unexpected " + tok);
                ++content_;
                return SlotKind::BeforeState;
            case Phase::After:
                if (tok == "afterwards") {
                    if (content_ == 0) throw fail("empty after_state");
                    phase_ = Phase::Closed;
                    return SlotKind::TemplateToken;
                }
                if (tok == kSep || tok == kEos) throw fail("unexpected " + tok);
                if (tok == "and" && before_pending) throw fail("\"before and\" inside after_state");
                pending_before_ = tok == "before";
                ++content_;
                return SlotKind::AfterState;
        }
        return SlotKind::TemplateToken;
    }

private:
    void reset_clause() {
        phase_ = Phase::Attribute;
        content_ = 0;
        pending_before_ = false;
    }

    Phase phase_ = Phase::Attribute;
    std::size_t content_ = 0;
    bool pending_before_ = false;
    std::size_t fed_ = 0;
};

// Kind of the position following `prefix`.
inline SlotKind slot_of_position(const std::vector<std::string>& prefix) {
    ClauseTracker t;
    for (const auto& tok : prefix) t.feed(tok);
    return t.kind();
}

// Routing kind of every position of a target: kind[i] = slot_of_position(target[0..i)).
inline std::vector<SlotKind> routing_kinds(const std::vector<std::string>& target) {
    ClauseTracker t;
    std::vector<SlotKind> out;
    out.reserve(target.size());
    for (const auto& tok : target) {
        out.push_back(t.kind());
        t.feed(tok);
    }
    return out;
}

// Role of every token of a target. A "before" inside before_state whose role
// is only known one token later is resolved retroactively.
inline std::vector<SlotKind> label_slots(const std::vector<std::string>& target) {
    ClauseTracker t;
    std::vector<SlotKind> out;
    out.reserve(target.size());
    for (const auto& tok : target) {
        const bool was_pending = t.pending_before() && t.phase() == ClauseTracker::Phase::Before;
        const SlotKind k = t.feed(tok);
        if (was_pending && t.phase() == ClauseTracker::Phase::Before) out.back() = SlotKind::BeforeState;
        out.push_back(k);
    }
    return out;
}

inline std::vector<SlotSpan> slot_spans(const std::vector<std::string>& target) {
    const auto labels = label_slots(target);
    std::vector<SlotSpan> out;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == SlotKind::TemplateToken) continue;
        if (!out.empty() && out.back().kind == labels[i] && out.back().end == i) {
            out.back().end = i + 1;
        } else {
            out.push_back({labels[i], i, i + 1});
        }
    }
    return out;
}

// Clauses joined by "<sep>", terminated by "<eos>".
inline std::vector<std::string> target_tokens(const std::vector<StateChange>& scs) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < scs.size(); ++i) {
        if (i) out.push_back(kSep);
        for (auto& t : split_whitespace(serialize_state_change(scs[i]))) out.push_back(std::move(t));
    }
    out.push_back(kEos);
    return out;
}

// Throws MalformedTemplate naming the offending position.
inline void validate_target(const std::vector<std::string>& target) {
    if (target.empty() || target.back() != kEos) throw MalformedTemplate("target must end with <eos>", join(target));
    ClauseTracker t;
    for (const auto& tok : target) t.feed(tok);
    if (t.phase() != ClauseTracker::Phase::Finished) throw MalformedTemplate("target ends inside a clause", join(target));
}

// ---------------------------------------------------------------------------
// Model

struct ModelConfig {
    std::size_t d_model = 32;
    std::size_t n_layers = 1;
    std::size_t n_heads = 1;
    std::size_t d_ff = 64;
    std::size_t max_src_len = 64;
    std::size_t max_tgt_len = 32;
    std::size_t rgcn_layers = 2;
    bool fuse_with_source = false;
    bool swap_routing = false;  // attribute knowledge on entity positions and vice versa
    std::uint64_t seed = 1;
};

inline nlohmann::json model_config_json(const ModelConfig& c) {
    return {{"d_model", c.d_model},         {"n_layers", c.n_layers},
            {"n_heads", c.n_heads},         {"d_ff", c.d_ff},
            {"max_src_len", c.max_src_len}, {"max_tgt_len", c.max_tgt_len},
            {"rgcn_layers", c.rgcn_layers}, {"fuse_with_source", c.fuse_with_source},
            {"swap_routing", c.swap_routing}, {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    auto get = [&](const char* k, auto& field) {
        if (j.contains(k)) field = j.at(k).get<std::decay_t<decltype(field)>>();
    };
    get("d_model", c.d_model);
    get("n_layers", c.n_layers);
    get("n_heads", c.n_heads);
    get("d_ff", c.d_ff);
    get("max_src_len", c.max_src_len);
    get("max_tgt_len", c.max_tgt_len);
    get("rgcn_layers", c.rgcn_layers);
    get("fuse_with_source", c.fuse_with_source);
    get("swap_routing", c.swap_routing);
    get("seed", c.seed);
    return c;
}

struct DecoderLayer {
    MultiHeadAttention self_attn;
    LayerNorm ln_self;
    MultiHeadAttention attr_attn, ent_attn, src_attn;
    LayerNorm ln_attr, ln_ent, ln_src;
    FeedForward ffn;
    LayerNorm ln_ffn;
};

// Per-example knowledge inputs of the decoder.
struct Knowledge {
    Tensor attributes;  // C_a, k x d (k may be 0)
    Tensor entities;    // C_e
};

class DkgedModel {
public:
    DkgedModel(Vocabulary vocab, const ModelConfig& cfg, const std::set<std::string>& relations)
        : vocab_(std::move(vocab)), cfg_(cfg), relations_(relations) {
        if (cfg.n_heads == 0 || cfg.d_model % cfg.n_heads != 0) {
            throw ConfigError("d_model " + std::to_string(cfg.d_model) + " is not divisible by n_heads " + std::to_string(cfg.n_heads));
        }
        if (cfg.max_src_len < 1 || cfg.max_tgt_len < 1) throw ConfigError("max_src_len and max_tgt_len must be >= 1");
        Rng rng(cfg.seed);
        const std::size_t d = cfg.d_model;
        embed_ = ps_.add_uniform("embed", {vocab_.size(), d}, d, rng);
        src_pos_ = ps_.add_uniform("pos.src", {cfg.max_src_len, d}, d, rng);
        tgt_pos_ = ps_.add_uniform("pos.tgt", {cfg.max_tgt_len, d}, d, rng);
        for (std::size_t l = 0; l < cfg.n_layers; ++l)
            encoder_.emplace_back(ps_, "enc" + std::to_string(l), d, cfg.n_heads, cfg.d_ff, rng);
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            const std::string p = "dec" + std::to_string(l);
            DecoderLayer dl;
            dl.self_attn = MultiHeadAttention(ps_, p + ".sa", d, cfg.n_heads, rng);
            dl.ln_self = LayerNorm(ps_, p + ".ln_sa", d);
            dl.attr_attn = MultiHeadAttention(ps_, p + ".ca_attr", d, cfg.n_heads, rng);
            dl.ln_attr = LayerNorm(ps_, p + ".ln_attr", d);
            dl.ent_attn = MultiHeadAttention(ps_, p + ".ca_ent", d, cfg.n_heads, rng);
            dl.ln_ent = LayerNorm(ps_, p + ".ln_ent", d);
            dl.src_attn = MultiHeadAttention(ps_, p + ".ca_src", d, cfg.n_heads, rng);
            dl.ln_src = LayerNorm(ps_, p + ".ln_src", d);
            dl.ffn = FeedForward(ps_, p + ".ffn", d, cfg.d_ff, rng);
            dl.ln_ffn = LayerNorm(ps_, p + ".ln_ffn", d);
            decoder_.push_back(std::move(dl));
        }
        rgcn_ = RgcnEncoder(ps_, "rgcn", d, cfg.rgcn_layers, relations, rng);
        out_ = ps_.add_uniform("out.w", {d, vocab_.size()}, d, rng);
    }

    const Vocabulary& vocab() const { return vocab_; }
    const ModelConfig& config() const { return cfg_; }
    const std::set<std::string>& relations() const { return relations_; }
    ParameterStore& params() { return ps_; }
    const ParameterStore& params() const { return ps_; }
    const Tensor& embeddings() const { return embed_; }
    const RgcnEncoder& rgcn() const { return rgcn_; }
    std::vector<DecoderLayer>& decoder_layers() { return decoder_; }
    const Tensor& output_weight() const { return out_; }

    // Source ids, truncated to max_src_len; a warning is recorded on truncation.
    std::vector<std::size_t> source_ids(const std::vector<std::string>& x, std::vector<std::string>* warnings = nullptr) const {
        if (x.empty()) throw ContractError("empty source sequence");
        std::vector<std::size_t> ids = vocab_.encode(x);
        if (ids.size() > cfg_.max_src_len) {
            if (warnings) {
                warnings->push_back("source of " + std::to_string(ids.size()) + " tokens truncated to " +
                                    std::to_string(cfg_.max_src_len));
            }
            ids.resize(cfg_.max_src_len);
        }
        return ids;
    }

    Tensor encode_ids(const std::vector<std::size_t>& ids) const {
        Tensor h = embed_with_positions(embed_, src_pos_, ids);
        for (const auto& layer : encoder_) h = layer(h);
        return h;
    }

    Tensor encode(const std::vector<std::string>& x, std::vector<std::string>* warnings = nullptr) const {
        return encode_ids(source_ids(x, warnings));
    }

    Knowledge knowledge(const EntityAttributeKG& kg) const {
        GraphEmbedding ge = embed_graph(kg, rgcn_, embed_, [this](const std::string& t) { return vocab_.id(t); });
        return {ge.attributes, ge.entities};
    }

    // Logits [t x |V|] for decoder inputs `in` (BOS + shifted target) with
    // per-position routing `kinds`.
    Tensor decode(const std::vector<std::size_t>& in, const std::vector<SlotKind>& kinds, const Tensor& X,
                  const Knowledge& k) const {
        if (in.size() != kinds.size()) throw DimensionError("decoder inputs and slot kinds differ in length");
        if (in.empty()) throw ContractError("empty decoder input");
        if (in.size() > cfg_.max_tgt_len) {
            throw DimensionError("target of length " + std::to_string(in.size()) + " exceeds max_tgt_len " +
                                 std::to_string(cfg_.max_tgt_len));
        }
        check_context(X, "source encoding");
        check_context(k.attributes, "attribute knowledge");
        check_context(k.entities, "entity knowledge");
        if (decoder_.empty()) return matmul(gather_rows(embed_, in), out_);

        const Tensor& ca = cfg_.swap_routing ? k.entities : k.attributes;
        const Tensor& ce = cfg_.swap_routing ? k.attributes : k.entities;
        Tensor attr_ctx, ent_ctx;
        if (ca.defined() && ca.rows() > 0) attr_ctx = cfg_.fuse_with_source ? concat_two(X, ca) : ca;
        if (ce.defined() && ce.rows() > 0) ent_ctx = cfg_.fuse_with_source ? concat_two(X, ce) : ce;

        // 0 = source path, 1 = attribute path, 2 = entity path
        std::vector<std::size_t> choice(kinds.size(), 0);
        bool any_attr = false, any_ent = false;
        for (std::size_t i = 0; i < kinds.size(); ++i) {
            if (kinds[i] == SlotKind::Attribute && attr_ctx.defined()) {
                choice[i] = 1;
                any_attr = true;
            } else if (kinds[i] == SlotKind::Entity && ent_ctx.defined()) {
                choice[i] = 2;
                any_ent = true;
            }
        }
        const bool any_src = std::find(choice.begin(), choice.end(), 0) != choice.end();

        Tensor h = embed_with_positions(embed_, tgt_pos_, in);
        for (const auto& layer : decoder_) {
            const Tensor ht = layer.ln_self(add(layer.self_attn(h, h, true), h));
            std::vector<Tensor> options(3);
            if (any_src) options[0] = layer.ln_src(add(layer.src_attn(ht, X), ht));
            if (any_attr) options[1] = layer.ln_attr(add(layer.attr_attn(ht, attr_ctx), ht));
            if (any_ent) options[2] = layer.ln_ent(add(layer.ent_attn(ht, ent_ctx), ht));
            for (auto& o : options)
                if (!o.defined()) o = ht;  // never selected
            const Tensor routed = merge_rows(options, choice);
            h = layer.ln_ffn(add(layer.ffn(routed), routed));
        }
        return matmul(h, out_);
    }

    // Teacher-forced logits for `target` (clauses joined by <sep>, ending <eos>).
    Tensor forward_teacher_forced(const std::vector<std::string>& x, const std::vector<std::string>& target,
                                  const Knowledge& k) const {
        validate_target(target);
        return forward_teacher_forced(encode(x), target, k);
    }

    Tensor forward_teacher_forced(const Tensor& X, const std::vector<std::string>& target, const Knowledge& k) const {
        const auto kinds = routing_kinds(target);
        std::vector<std::size_t> in{Vocabulary::bos};
        for (std::size_t i = 0; i + 1 < target.size(); ++i) in.push_back(vocab_.id(target[i]));
        return decode(in, kinds, X, k);
    }

    // Logits of the next token after `prefix` (target tokens so far).
    Tensor decoder_step(const std::vector<std::size_t>& prefix, const Tensor& X, const Knowledge& k, SlotKind kind) const {
        std::vector<std::size_t> in{Vocabulary::bos};
        in.insert(in.end(), prefix.begin(), prefix.end());
        std::vector<std::string> words = vocab_.decode(prefix);
        std::vector<SlotKind> kinds = routing_kinds(words);
        kinds.push_back(kind);
        Tensor logits = decode(in, kinds, X, k);
        const std::size_t last = in.size() - 1;
        return slice_row(logits, last);
    }

    std::string metadata() const {
        nlohmann::json j;
        j["model"] = model_config_json(cfg_);
        j["vocab"] = vocab_.tokens();
        j["relations"] = relations_;
        return j.dump();
    }

    static DkgedModel from_checkpoint(const Checkpoint& ck) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(ck.metadata);
        } catch (const nlohmann::json::exception& e) {
            throw IoError("model checkpoint metadata is not JSON: " + std::string(e.what()));
        }
        auto tokens = j.at("vocab").get<std::vector<std::string>>();
        DkgedModel m(Vocabulary::from_lines(tokens), model_config_from_json(j.at("model")),
                     j.at("relations").get<std::set<std::string>>());
        restore(m.ps_, ck);
        return m;
    }

private:
    void check_context(const Tensor& c, const char* what) const {
        if (c.defined() && (c.ndim() != 2 || c.cols() != cfg_.d_model)) {
            throw ConfigError(std::string(what) + " has shape " + shape_str(c.shape()) + ", model width is " +
                              std::to_string(cfg_.d_model));
        }
    }

    static Tensor concat_two(const Tensor& a, const Tensor& b) {
        const Tensor parts[] = {a, b};
        return concat_rows(parts);
    }

    static Tensor slice_row(const Tensor& m, std::size_t r) {
        const std::size_t ids[] = {r};
        return reshape(gather_rows(m, ids), {m.cols()});
    }

    Vocabulary vocab_;
    ModelConfig cfg_;
    std::set<std::string> relations_;
    ParameterStore ps_;
    Tensor embed_, src_pos_, tgt_pos_, out_;
    std::vector<EncoderLayer> encoder_;
    std::vector<DecoderLayer> decoder_;
    RgcnEncoder rgcn_;
};

}  // namespace kiest
