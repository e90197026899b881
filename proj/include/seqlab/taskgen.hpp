#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "seqlab/rng.hpp"

namespace seqlab {

enum class Variant { Suffix, Prefix, Induction };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::Suffix: return "suffix";
        case Variant::Prefix: return "prefix";
        default: return "induction";
    }
}

inline Variant variant_from(const std::string& s) {
    if (s == "suffix") return Variant::Suffix;
    if (s == "prefix") return Variant::Prefix;
    if (s == "induction") return Variant::Induction;
    throw std::invalid_argument("unknown task variant: " + s);
}

struct TaskConfig {
    int seq_len = 50;
    int n_special = 100;   // >= seq_len; contexts are drawn from a strict superset
    int n_output = 50;     // >= seq_len; one output token per position
    Variant variant = Variant::Suffix;
    int64_t n_train = 1'000'000;
    int64_t n_eval = 100'000;
    uint64_t seed = 7;

    static TaskConfig make(int seq_len, Variant variant, int64_t n_train, int64_t n_eval,
                           uint64_t seed) {
        TaskConfig c;
        c.seq_len = seq_len;
        c.n_special = 2 * seq_len;
        c.n_output = seq_len;
        c.variant = variant;
        c.n_train = n_train;
        c.n_eval = n_eval;
        c.seed = seed;
        return c;
    }

    void validate() const {
        if (seq_len < 1) throw std::invalid_argument("task: seq_len must be >= 1");
        if (variant == Variant::Induction && seq_len < 4)
            throw std::invalid_argument("task: induction needs seq_len >= 4");
        if (n_special < seq_len) throw std::invalid_argument("task: n_special < seq_len");
        if (n_output < seq_len) throw std::invalid_argument("task: n_output < seq_len");
        if (n_train < 1 || n_eval < 1) throw std::invalid_argument("task: empty stream");
    }
};

// Disjoint contiguous id blocks: [output alphabet][special tokens][markers].
struct VocabLayout {
    int n_output = 0;
    int n_special = 0;
    int output_first = 0;
    int special_first = 0;
    int out_tok = 0;       // "<out>" query marker
    int bos_tok = 0;       // reserved, unused in the task layouts
    int sep_tok = 0;       // induction separator
    int img_open_tok = 0;  // "##"
    int img_nl_tok = 0;    // "&&"
    int vocab_size = 0;
};

inline VocabLayout vocab_layout(const TaskConfig& cfg) {
    VocabLayout v;
    v.n_output = cfg.n_output;
    v.n_special = cfg.n_special;
    v.output_first = 0;
    v.special_first = cfg.n_output;
    int next = cfg.n_output + cfg.n_special;
    v.out_tok = next++;
    v.bos_tok = next++;
    v.sep_tok = next++;
    v.img_open_tok = next++;
    v.img_nl_tok = next++;
    v.vocab_size = next;
    return v;
}

// Identity map: position i names the i-th output-alphabet id.
inline int position_to_output_token(int pos, const VocabLayout& layout) {
    if (pos < 0 || pos >= layout.n_output)
        throw std::out_of_range("position_to_output_token: position out of range");
    return layout.output_first + pos;
}

inline int output_token_to_position(int tok, const VocabLayout& layout) {
    int pos = tok - layout.output_first;
    if (pos < 0 || pos >= layout.n_output)
        throw std::out_of_range("output_token_to_position: token outside the output alphabet");
    return pos;
}

struct SyntheticExample {
    std::vector<int> context;  // grounding: distinct specials; induction: the full body
    int query = 0;
    int target_pos = 0;        // index of the answer-defining position
    int target_token = 0;
    std::vector<int> input_ids;
};

// One retrieval instance. The (context, query, target) triple is a function
// of the rng stream only, so suffix and prefix builds of the same stream
// share the triple and differ purely in layout.
inline SyntheticExample gen_example(const TaskConfig& cfg, int target_pos, Rng& rng) {
    if (target_pos < 0 || target_pos >= cfg.seq_len)
        throw std::out_of_range("gen_example: target_pos out of range");
    VocabLayout layout = vocab_layout(cfg);
    SyntheticExample ex;
    ex.target_pos = target_pos;
    ex.target_token = position_to_output_token(target_pos, layout);

    // partial Fisher-Yates over the special alphabet -> distinct draw
    std::vector<int> pool(static_cast<std::size_t>(cfg.n_special));
    std::iota(pool.begin(), pool.end(), 0);
    ex.context.resize(static_cast<std::size_t>(cfg.seq_len));
    for (int i = 0; i < cfg.seq_len; ++i) {
        uint64_t j = static_cast<uint64_t>(i) +
                     rng.next_below(static_cast<uint64_t>(cfg.n_special - i));
        std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
        ex.context[static_cast<std::size_t>(i)] = layout.special_first + pool[static_cast<std::size_t>(i)];
    }
    ex.query = ex.context[static_cast<std::size_t>(target_pos)];

    if (cfg.variant == Variant::Prefix) {
        ex.input_ids.reserve(ex.context.size() + 2);
        ex.input_ids.push_back(layout.out_tok);
        ex.input_ids.push_back(ex.query);
        ex.input_ids.insert(ex.input_ids.end(), ex.context.begin(), ex.context.end());
    } else {
        ex.input_ids = ex.context;
        ex.input_ids.push_back(layout.out_tok);
        ex.input_ids.push_back(ex.query);
    }
    return ex;
}

// Induction-heads probe: one separator mid-sequence, one closing the
// sequence; the answer is the token right after the first separator.
// target_pos points at that token.
inline SyntheticExample gen_induction_heads(const TaskConfig& cfg, int target_pos, Rng& rng) {
    if (cfg.seq_len < 4) throw std::invalid_argument("gen_induction_heads: seq_len < 4");
    if (target_pos < 2 || target_pos > cfg.seq_len - 2)
        throw std::out_of_range("gen_induction_heads: target_pos out of range");
    VocabLayout layout = vocab_layout(cfg);
    SyntheticExample ex;
    int sep_at = target_pos - 1;
    ex.input_ids.resize(static_cast<std::size_t>(cfg.seq_len));
    for (int i = 0; i < cfg.seq_len; ++i)
        ex.input_ids[static_cast<std::size_t>(i)] =
            layout.special_first + static_cast<int>(rng.next_below(static_cast<uint64_t>(cfg.n_special)));
    ex.input_ids[static_cast<std::size_t>(sep_at)] = layout.sep_tok;
    ex.input_ids[static_cast<std::size_t>(cfg.seq_len - 1)] = layout.sep_tok;
    ex.context = ex.input_ids;
    ex.query = layout.sep_tok;
    ex.target_pos = target_pos;
    ex.target_token = ex.input_ids[static_cast<std::size_t>(target_pos)];
    return ex;
}

inline SyntheticExample gen_induction_heads(const TaskConfig& cfg, Rng& rng) {
    int lo = 2, hi = cfg.seq_len - 2;
    int target_pos = lo + static_cast<int>(rng.next_below(static_cast<uint64_t>(hi - lo + 1)));
    return gen_induction_heads(cfg, target_pos, rng);
}

// ---------------------------------------------------------------------------
// Deterministic stratified streams: example i is a pure function of
// (dataset seed, stream, i). Each round of consecutive examples covers every
// valid target position exactly once, in a per-round shuffled order.
// ---------------------------------------------------------------------------

namespace detail {
constexpr uint64_t kTrainStream = 1;
constexpr uint64_t kEvalStream = 2;
constexpr uint64_t kPermStream = 3;

inline int first_valid_pos(const TaskConfig& cfg) {
    return cfg.variant == Variant::Induction ? 2 : 0;
}
}  // namespace detail

inline int positions_per_round(const TaskConfig& cfg) {
    return cfg.variant == Variant::Induction ? cfg.seq_len - 3 : cfg.seq_len;
}

// Streams truncate to whole rounds so stratification is exact.
inline int64_t train_stream_len(const TaskConfig& cfg) {
    int64_t r = positions_per_round(cfg);
    return (cfg.n_train / r) * r;
}

inline int64_t eval_stream_len(const TaskConfig& cfg) {
    int64_t r = positions_per_round(cfg);
    return (cfg.n_eval / r) * r;
}

inline int stream_target_pos(const TaskConfig& cfg, uint64_t stream, int64_t index) {
    int64_t npos = positions_per_round(cfg);
    int64_t round = index / npos;
    int64_t slot = index % npos;
    // per-round permutation via partial Fisher-Yates up to the needed slot
    Rng rng(Rng::combine({cfg.seed, detail::kPermStream, stream, static_cast<uint64_t>(round)}));
    std::vector<int> perm(static_cast<std::size_t>(npos));
    std::iota(perm.begin(), perm.end(), 0);
    for (int64_t i = 0; i <= slot; ++i) {
        uint64_t j = static_cast<uint64_t>(i) + rng.next_below(static_cast<uint64_t>(npos - i));
        std::swap(perm[static_cast<std::size_t>(i)], perm[j]);
    }
    return detail::first_valid_pos(cfg) + perm[static_cast<std::size_t>(slot)];
}

inline SyntheticExample stream_example(const TaskConfig& cfg, uint64_t stream, int64_t index,
                                       uint64_t attempt = 0) {
    int target_pos = stream_target_pos(cfg, stream, index);
    Rng rng(Rng::combine({cfg.seed, stream, static_cast<uint64_t>(index), attempt}));
    if (cfg.variant == Variant::Induction) return gen_induction_heads(cfg, target_pos, rng);
    return gen_example(cfg, target_pos, rng);
}

inline uint64_t pair_hash(const SyntheticExample& ex) {
    uint64_t h = 0x6a09e667f3bcc909ull;
    for (int t : ex.context) h = Rng::mix(h ^ static_cast<uint64_t>(t));
    return Rng::mix(h ^ static_cast<uint64_t>(ex.query));
}

// Sorted hash index of every training (context, query) pair, used to keep the
// eval stream disjoint from training data.
class TrainPairSet {
public:
    TrainPairSet() = default;

    static TrainPairSet build(const TaskConfig& cfg) {
        TrainPairSet s;
        int64_t n = train_stream_len(cfg);
        s.hashes_.reserve(static_cast<std::size_t>(n));
        for (int64_t i = 0; i < n; ++i)
            s.hashes_.push_back(pair_hash(stream_example(cfg, detail::kTrainStream, i)));
        std::sort(s.hashes_.begin(), s.hashes_.end());
        return s;
    }

    bool contains(uint64_t h) const {
        return std::binary_search(hashes_.begin(), hashes_.end(), h);
    }
    std::size_t size() const { return hashes_.size(); }

private:
    std::vector<uint64_t> hashes_;
};

inline SyntheticExample train_example(const TaskConfig& cfg, int64_t index) {
    return stream_example(cfg, detail::kTrainStream, index);
}

// Redraws (bumping the attempt counter) until the example collides with no
// training pair. Stratification is preserved: the target position is fixed
// per index and only the context is redrawn.
inline SyntheticExample eval_example(const TaskConfig& cfg, int64_t index,
                                     const TrainPairSet* train_pairs = nullptr) {
    for (uint64_t attempt = 0; attempt < 64; ++attempt) {
        SyntheticExample ex = stream_example(cfg, detail::kEvalStream, index, attempt);
        if (!train_pairs || !train_pairs->contains(pair_hash(ex))) return ex;
    }
    throw std::runtime_error("eval_example: could not find a train-disjoint draw");
}

// Newline-delimited inspection records.
inline void export_examples(const TaskConfig& cfg, int64_t first, int64_t count, std::ostream& os) {
    int64_t n = train_stream_len(cfg);
    for (int64_t i = first; i < first + count && i < n; ++i) {
        SyntheticExample ex = train_example(cfg, i);
        os << "{\"context\":[";
        for (std::size_t j = 0; j < ex.context.size(); ++j)
            os << (j ? "," : "") << ex.context[j];
        os << "],\"query\":" << ex.query << ",\"target_pos\":" << ex.target_pos
           << ",\"target_token\":" << ex.target_token << "}\n";
    }
}

}  // namespace seqlab
