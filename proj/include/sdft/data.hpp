#pragma once

// Tokenization, corpus ingestion, synthetic corpora and sampling protocols.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sdft/tensor.hpp"

namespace sdft {

// ----------------------------- vocabulary -----------------------------

inline constexpr int kPad = 0;
inline constexpr int kUnk = 1;
inline constexpr int kCls = 2;
inline constexpr int kSep = 3;
inline constexpr int kReservedTokens = 4;

/// Lowercased whitespace split.
inline std::vector<std::string> split_tokens(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const auto uc = static_cast<unsigned char>(ch);
        if (std::isspace(uc)) {
            if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
        } else {
            cur.push_back(uc < 128 ? static_cast<char>(std::tolower(uc)) : ch);
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

class Vocab {
   public:
    Vocab() : tokens_{"[PAD]", "[UNK]", "[CLS]", "[SEP]"} {
        for (int i = 0; i < kReservedTokens; ++i) ids_.emplace(tokens_[i], i);
    }

    int id(const std::string& token) const {
        auto it = ids_.find(token);
        return it == ids_.end() ? kUnk : it->second;
    }
    const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    std::size_t size() const noexcept { return tokens_.size(); }
    const std::vector<std::string>& tokens() const noexcept { return tokens_; }

    /// Appends a token; returns its id (existing id if already present).
    int add(const std::string& token) {
        auto [it, inserted] = ids_.emplace(token, static_cast<int>(tokens_.size()));
        if (inserted) tokens_.push_back(token);
        return it->second;
    }

    friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

   private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
};

/// Frequency-ranked vocabulary; ties broken lexicographically; reserved ids first.
inline Vocab build_vocab(const std::vector<std::string>& corpus, std::size_t max_size, std::size_t min_freq = 1) {
    if (max_size < kReservedTokens + 1) {
        throw ConfigError("vocabulary max_size " + std::to_string(max_size) + " leaves no room beyond the " +
                          std::to_string(kReservedTokens) + " reserved tokens");
    }
    if (corpus.empty()) throw InputError("cannot build a vocabulary from an empty corpus");
    std::map<std::string, std::size_t> counts;
    for (const auto& text : corpus)
        for (auto& tok : split_tokens(text)) ++counts[tok];
    std::vector<std::pair<std::string, std::size_t>> ranked;
    for (auto& [tok, n] : counts) {
        if (n >= min_freq && tok != "[pad]" && tok != "[unk]" && tok != "[cls]" && tok != "[sep]") ranked.emplace_back(tok, n);
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocab v;
    for (const auto& [tok, _] : ranked) {
        if (v.size() >= max_size) break;
        v.add(tok);
    }
    return v;
}

// ----------------------------- examples and splits -----------------------------

struct Example {
    std::vector<std::string> segments;  // one, or two for sentence pairs
    int label = 0;

    friend bool operator==(const Example&, const Example&) = default;
};

enum class SplitRole { train, dev, test };

inline const char* to_string(SplitRole r) {
    switch (r) {
        case SplitRole::train: return "train";
        case SplitRole::dev: return "dev";
        case SplitRole::test: return "test";
    }
    return "?";
}

struct DatasetSplit {
    std::vector<Example> examples;
    SplitRole role = SplitRole::train;
    std::size_t n_classes = 2;

    std::size_t size() const noexcept { return examples.size(); }
    bool empty() const noexcept { return examples.empty(); }

    std::vector<std::string> texts() const {
        std::vector<std::string> out;
        for (const auto& e : examples)
            for (const auto& s : e.segments) out.push_back(s);
        return out;
    }

    friend bool operator==(const DatasetSplit&, const DatasetSplit&) = default;
};

/// Token ids of one example after truncation and padding.
struct EncodedExample {
    std::vector<int> ids;  // exactly max_len entries
    std::size_t length = 0;  // real tokens including specials
    int label = 0;
};

struct EncodedSplit {
    std::vector<EncodedExample> examples;
    std::size_t n_classes = 2;
    std::size_t max_len = 0;

    std::size_t size() const noexcept { return examples.size(); }
    bool empty() const noexcept { return examples.empty(); }
};

/// Token-id matrix (B x L, row-major), attention mask and gold labels.
struct Batch {
    std::size_t size = 0;
    std::size_t seq_len = 0;
    std::vector<int> ids;
    std::vector<std::uint8_t> mask;
    std::vector<int> labels;

    int id(std::size_t row, std::size_t pos) const { return ids[row * seq_len + pos]; }
    bool real(std::size_t row, std::size_t pos) const { return mask[row * seq_len + pos] != 0; }
};

/// Lays out `[CLS] content [SEP]`, where content is seg1 or `seg1 [SEP] seg2`,
/// keeps the head of the content when it exceeds max_len - 2, then pads.
inline EncodedExample tokenize_truncate(const Example& ex, const Vocab& vocab, std::size_t max_len) {
    if (max_len < 3) throw ConfigError("max_len must be at least 3, got " + std::to_string(max_len));
    std::vector<int> content;
    for (std::size_t s = 0; s < ex.segments.size(); ++s) {
        if (s > 0) content.push_back(kSep);
        for (const auto& tok : split_tokens(ex.segments[s])) content.push_back(vocab.id(tok));
    }
    if (content.size() > max_len - 2) content.resize(max_len - 2);
    EncodedExample out;
    out.label = ex.label;
    out.ids.reserve(max_len);
    out.ids.push_back(kCls);
    out.ids.insert(out.ids.end(), content.begin(), content.end());
    out.ids.push_back(kSep);
    out.length = out.ids.size();
    out.ids.resize(max_len, kPad);
    return out;
}

inline EncodedSplit encode_split(const DatasetSplit& split, const Vocab& vocab, std::size_t max_len) {
    EncodedSplit out;
    out.n_classes = split.n_classes;
    out.max_len = max_len;
    out.examples.reserve(split.size());
    for (const auto& e : split.examples) out.examples.push_back(tokenize_truncate(e, vocab, max_len));
    return out;
}

/// Packs the given rows. Rows are trimmed to the longest real length in the batch.
inline Batch make_batch(const EncodedSplit& split, std::span<const std::size_t> rows) {
    Batch b;
    b.size = rows.size();
    for (auto r : rows) b.seq_len = std::max(b.seq_len, split.examples.at(r).length);
    b.ids.assign(b.size * b.seq_len, kPad);
    b.mask.assign(b.size * b.seq_len, 0);
    b.labels.reserve(b.size);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& e = split.examples[rows[i]];
        for (std::size_t p = 0; p < e.length; ++p) {
            b.ids[i * b.seq_len + p] = e.ids[p];
            b.mask[i * b.seq_len + p] = 1;
        }
        b.labels.push_back(e.label);
    }
    return b;
}

inline Batch make_batch(const EncodedSplit& split, std::size_t begin, std::size_t end) {
    std::vector<std::size_t> rows;
    for (std::size_t i = begin; i < end; ++i) rows.push_back(i);
    return make_batch(split, rows);
}

// ----------------------------- CSV ingestion -----------------------------

struct CsvSchema {
    std::size_t label_col = 0;
    std::vector<std::size_t> text_cols{1};
    bool pair = false;  // first two text columns are separate segments
    char delimiter = ',';
    bool has_header = false;
    std::size_t n_classes = 2;
    std::optional<int> label_base;  // unset: 1 when every label lies in [1, n_classes], else 0

    friend bool operator==(const CsvSchema&, const CsvSchema&) = default;
};

namespace detail {

struct CsvRecord {
    std::vector<std::string> fields;
    std::size_t line = 0;
};

/// RFC 4180 style: double-quote quoting, doubled quotes escape, quoted fields may span lines.
inline std::vector<CsvRecord> parse_csv(std::string_view text, char delim) {
    std::vector<CsvRecord> out;
    CsvRecord rec;
    std::string field;
    std::size_t line = 1;
    rec.line = 1;
    bool in_quotes = false, was_quoted = false, after_quote = false, field_started = false;
    auto end_field = [&] {
        rec.fields.push_back(std::move(field));
        field.clear();
        was_quoted = after_quote = field_started = false;
    };
    auto end_record = [&] {
        end_field();
        const bool blank = rec.fields.size() == 1 && rec.fields[0].empty();
        if (!blank) out.push_back(std::move(rec));
        rec = CsvRecord{};
        rec.line = line;
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    in_quotes = false;
                    after_quote = true;
                }
            } else {
                if (c == '\n') ++line;
                field.push_back(c);
            }
            continue;
        }
        if (c == delim) {
            end_field();
        } else if (c == '\n' || c == '\r') {
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            ++line;
            end_record();
        } else if (c == '"') {
            if (field_started || was_quoted) {
                throw InputError("line " + std::to_string(line) + ": unexpected quote inside field");
            }
            in_quotes = was_quoted = field_started = true;
        } else {
            if (after_quote) {
                throw InputError("line " + std::to_string(line) + ": characters after closing quote");
            }
            field.push_back(c);
            field_started = true;
        }
    }
    if (in_quotes) throw InputError("line " + std::to_string(rec.line) + ": unterminated quoted field");
    if (field_started || was_quoted || !rec.fields.empty()) end_record();
    return out;
}

}  // namespace detail

inline DatasetSplit parse_csv_split(std::string_view text, const CsvSchema& schema, SplitRole role = SplitRole::train) {
    if (schema.text_cols.empty()) throw ConfigError("CSV schema declares no text columns");
    if (schema.pair && schema.text_cols.size() != 2) throw ConfigError("pair schema needs exactly two text columns");
    if (schema.n_classes < 1) throw ConfigError("CSV schema needs n_classes >= 1");
    auto records = detail::parse_csv(text, schema.delimiter);
    if (schema.has_header && !records.empty()) records.erase(records.begin());
    std::size_t needed = schema.label_col;
    for (auto c : schema.text_cols) needed = std::max(needed, c);
    std::vector<long> raw_labels;
    DatasetSplit split;
    split.role = role;
    split.n_classes = schema.n_classes;
    std::vector<std::size_t> lines;
    for (auto& r : records) {
        if (r.fields.size() <= needed) {
            throw InputError("line " + std::to_string(r.line) + ": expected at least " + std::to_string(needed + 1) +
                             " columns, found " + std::to_string(r.fields.size()));
        }
        const std::string& lab = r.fields[schema.label_col];
        long value = 0;
        std::size_t used = 0;
        try {
            value = std::stol(lab, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != lab.size()) {
            throw InputError("line " + std::to_string(r.line) + ": label '" + lab + "' is not an integer");
        }
        raw_labels.push_back(value);
        lines.push_back(r.line);
        Example ex;
        if (schema.pair) {
            ex.segments = {r.fields[schema.text_cols[0]], r.fields[schema.text_cols[1]]};
        } else {
            std::string joined;
            for (std::size_t k = 0; k < schema.text_cols.size(); ++k) {
                if (k) joined.push_back(' ');
                joined += r.fields[schema.text_cols[k]];
            }
            ex.segments = {std::move(joined)};
        }
        split.examples.push_back(std::move(ex));
    }
    int base = 0;
    if (schema.label_base) {
        base = *schema.label_base;
    } else if (!raw_labels.empty() && std::all_of(raw_labels.begin(), raw_labels.end(), [&](long v) {
                   return v >= 1 && v <= static_cast<long>(schema.n_classes);
               })) {
        base = 1;
    }
    for (std::size_t i = 0; i < raw_labels.size(); ++i) {
        const long y = raw_labels[i] - base;
        if (y < 0 || y >= static_cast<long>(schema.n_classes)) {
            throw InputError("line " + std::to_string(lines[i]) + ": label " + std::to_string(raw_labels[i]) +
                             " outside the declared " + std::to_string(schema.n_classes) + " classes");
        }
        split.examples[i].label = static_cast<int>(y);
    }
    return split;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline DatasetSplit load_csv(const std::string& path, const CsvSchema& schema, SplitRole role = SplitRole::train) {
    const std::string text = read_text_file(path);
    try {
        return parse_csv_split(text, schema, role);
    } catch (const InputError& e) {
        throw InputError(path + ": " + e.what());
    }
}

// ----------------------------- serialized splits -----------------------------
//
// One example per line: label<TAB>segment[<TAB>segment2]. Whitespace inside
// segments is collapsed to single spaces, which tokenization ignores anyway.

inline std::string normalize_space(std::string_view s) {
    std::string out;
    bool pending = false;
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            pending = !out.empty();
        } else {
            if (pending) out.push_back(' ');
            pending = false;
            out.push_back(c);
        }
    }
    return out;
}

inline void write_split(std::ostream& os, const DatasetSplit& split) {
    for (const auto& e : split.examples) {
        os << e.label;
        for (const auto& s : e.segments) os << '\t' << normalize_space(s);
        os << '\n';
    }
}

inline std::string serialize_split(const DatasetSplit& split) {
    std::ostringstream os;
    write_split(os, split);
    return os.str();
}

inline DatasetSplit parse_split(std::string_view text, std::size_t n_classes, SplitRole role = SplitRole::train) {
    DatasetSplit split;
    split.role = role;
    split.n_classes = n_classes;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t eol = text.find('\n', pos);
        if (eol == std::string_view::npos) eol = text.size();
        std::string_view line = text.substr(pos, eol - pos);
        pos = eol + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::size_t start = 0;
        while (true) {
            std::size_t tab = line.find('\t', start);
            cols.emplace_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
            if (tab == std::string_view::npos) break;
            start = tab + 1;
        }
        if (cols.size() < 2 || cols.size() > 3) {
            throw InputError("line " + std::to_string(line_no) + ": expected label<TAB>text[<TAB>text]");
        }
        Example ex;
        std::size_t used = 0;
        try {
            ex.label = std::stoi(cols[0], &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != cols[0].size()) {
            throw InputError("line " + std::to_string(line_no) + ": bad label '" + cols[0] + "'");
        }
        if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= n_classes) {
            throw InputError("line " + std::to_string(line_no) + ": label " + cols[0] + " outside " +
                             std::to_string(n_classes) + " classes");
        }
        ex.segments.assign(cols.begin() + 1, cols.end());
        split.examples.push_back(std::move(ex));
    }
    return split;
}

inline DatasetSplit load_split(const std::string& path, std::size_t n_classes, SplitRole role = SplitRole::train) {
    const std::string text = read_text_file(path);
    try {
        return parse_split(text, n_classes, role);
    } catch (const InputError& e) {
        throw InputError(path + ": " + e.what());
    }
}

// ----------------------------- sampling -----------------------------

/// Seeded permutation of 0..n-1.
inline std::vector<std::size_t> shuffle_with_seed(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    return perm;
}

/// Exactly n_per_class examples of every class, drawn without replacement, in original order.
inline DatasetSplit stratified_subsample(const DatasetSplit& split, std::size_t n_per_class, std::uint64_t seed) {
    std::vector<std::vector<std::size_t>> by_class(split.n_classes);
    for (std::size_t i = 0; i < split.size(); ++i) {
        const int y = split.examples[i].label;
        if (y < 0 || static_cast<std::size_t>(y) >= split.n_classes) {
            throw InputError("example " + std::to_string(i) + " has label " + std::to_string(y) + " outside " +
                             std::to_string(split.n_classes) + " classes");
        }
        by_class[static_cast<std::size_t>(y)].push_back(i);
    }
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> chosen;
    for (std::size_t c = 0; c < split.n_classes; ++c) {
        auto& idx = by_class[c];
        if (idx.size() < n_per_class) {
            throw InputError("class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                             " examples, fewer than the " + std::to_string(n_per_class) + " requested");
        }
        std::shuffle(idx.begin(), idx.end(), rng);
        chosen.insert(chosen.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_per_class));
    }
    std::sort(chosen.begin(), chosen.end());
    DatasetSplit out;
    out.role = split.role;
    out.n_classes = split.n_classes;
    for (auto i : chosen) out.examples.push_back(split.examples[i]);
    return out;
}

// ----------------------------- synthetic corpora -----------------------------

/// Class-conditional bag-of-words generator.
///
/// Word w<i> for i in [c * topic_words, (c + 1) * topic_words) is a topic word
/// of class c; the remaining words are shared background. Each token comes
/// from the class topic distribution with probability `signal`, otherwise from
/// the background; a fraction `topic_overlap` of topic draws use the next
/// class's topic words instead. Both distributions are Zipf-skewed.
struct SyntheticSpec {
    std::size_t n_classes = 4;
    std::size_t vocab_span = 600;
    std::size_t topic_words = 40;
    std::size_t min_tokens = 12;
    std::size_t max_tokens = 24;
    double signal = 0.2;
    double topic_overlap = 0.0;
    double zipf = 1.0;
    double label_noise = 0.1;       // applied to the train split
    double test_label_noise = 0.0;  // applied to the test split
    std::size_t n_train = 2000;
    std::size_t n_test = 1000;

    void validate() const {
        auto rate = [](double v, const char* name) {
            if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string("synthetic ") + name + " must lie in [0, 1]");
        };
        rate(signal, "signal");
        rate(topic_overlap, "topic_overlap");
        rate(label_noise, "label_noise");
        rate(test_label_noise, "test_label_noise");
        if (n_classes < 2) throw ConfigError("synthetic n_classes must be >= 2");
        if (n_classes * topic_words >= vocab_span) {
            throw ConfigError("synthetic vocab_span must exceed n_classes * topic_words");
        }
        if (min_tokens < 1 || min_tokens > max_tokens) throw ConfigError("synthetic token range is empty");
        if (!(zipf >= 0.0)) throw ConfigError("synthetic zipf exponent must be >= 0");
    }

    friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

struct SyntheticData {
    DatasetSplit train;
    DatasetSplit test;
};

namespace detail {

inline std::vector<double> zipf_weights(std::size_t n, double s) {
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) w[i] = 1.0 / std::pow(double(i + 1), s);
    return w;
}

inline DatasetSplit synth_split(const SyntheticSpec& spec, std::size_t n, double noise, SplitRole role,
                                std::mt19937_64& rng) {
    const std::size_t bg_begin = spec.n_classes * spec.topic_words;
    std::discrete_distribution<std::size_t> topic_pick;
    if (spec.topic_words > 0) {
        auto w = zipf_weights(spec.topic_words, spec.zipf);
        topic_pick = std::discrete_distribution<std::size_t>(w.begin(), w.end());
    }
    auto bw = zipf_weights(spec.vocab_span - bg_begin, spec.zipf);
    std::discrete_distribution<std::size_t> bg_pick(bw.begin(), bw.end());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> len_pick(spec.min_tokens, spec.max_tokens);
    std::uniform_int_distribution<std::size_t> other_class(1, spec.n_classes - 1);

    std::vector<std::size_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = i % spec.n_classes;
    std::shuffle(labels.begin(), labels.end(), rng);

    DatasetSplit split;
    split.role = role;
    split.n_classes = spec.n_classes;
    split.examples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = labels[i];
        const std::size_t len = len_pick(rng);
        std::string text;
        for (std::size_t k = 0; k < len; ++k) {
            std::size_t word;
            if (spec.topic_words > 0 && u(rng) < spec.signal) {
                const std::size_t owner = u(rng) < spec.topic_overlap ? (c + 1) % spec.n_classes : c;
                word = owner * spec.topic_words + topic_pick(rng);
            } else {
                word = bg_begin + bg_pick(rng);
            }
            if (k) text.push_back(' ');
            text += "w" + std::to_string(word);
        }
        std::size_t y = c;
        if (u(rng) < noise) y = (c + other_class(rng)) % spec.n_classes;
        split.examples.push_back(Example{{std::move(text)}, static_cast<int>(y)});
    }
    return split;
}

}  // namespace detail

inline SyntheticData make_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    SyntheticData out;
    out.train = detail::synth_split(spec, spec.n_train, spec.label_noise, SplitRole::train, rng);
    out.test = detail::synth_split(spec, spec.n_test, spec.test_label_noise, SplitRole::test, rng);
    return out;
}

}  // namespace sdft
