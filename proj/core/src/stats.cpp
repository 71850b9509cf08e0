#include "captree/stats.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "captree/error.hpp"
#include "captree/parallel.hpp"
#include "captree/resources.hpp"

namespace captree {

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
bool is_punct(char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; }

std::string_view trim_view(std::string_view s) {
    while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
    while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
    return s;
}

bool is_na(std::string_view s) { return trim_view(s) == kNotApplicable; }

}  // namespace

std::vector<std::string> tokenize_words(std::string_view text, bool lowercase) {
    std::vector<std::string> out;
    if (is_na(text)) return out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && is_space(text[i])) ++i;
        std::size_t j = i;
        while (j < text.size() && !is_space(text[j])) ++j;
        std::string_view run = text.substr(i, j - i);
        while (!run.empty() && is_punct(run.front())) run.remove_prefix(1);
        while (!run.empty() && is_punct(run.back())) run.remove_suffix(1);
        if (!run.empty()) {
            std::string tok(run);
            if (lowercase) {
                for (auto& c : tok) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
            }
            out.push_back(std::move(tok));
        }
        i = j;
    }
    return out;
}

std::size_t word_count(std::string_view text) { return tokenize_words(text).size(); }

std::size_t char_count(std::string_view text) {
    if (is_na(text)) return 0;
    std::size_t n = 0;
    for (char c : trim_view(text)) {
        if ((static_cast<unsigned char>(c) & 0xC0) != 0x80) ++n;
    }
    return n;
}

const Stoplist& Stoplist::english() {
    static const Stoplist list = [] {
        std::set<std::string, std::less<>> words;
        std::istringstream in{std::string(resources::english_stopwords())};
        for (std::string line; std::getline(in, line);) {
            const auto w = trim_view(line);
            if (!w.empty()) words.emplace(w);
        }
        return Stoplist(std::move(words));
    }();
    return list;
}

NgramCounter::NgramCounter(int n) : n_(n) {
    if (n < 1 || n > 3) throw std::invalid_argument("n-gram order must be 1, 2 or 3");
}

void NgramCounter::add_document(std::string_view text, const Stoplist& stoplist) {
    const auto tokens = tokenize_words(text, true);
    const auto n = static_cast<std::size_t>(n_);
    if (tokens.size() < n) return;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
        bool skip = false;
        std::string gram;
        for (std::size_t k = 0; k < n; ++k) {
            if (stoplist.contains(tokens[i + k])) {
                skip = true;
                break;
            }
            if (k) gram += ' ';
            gram += tokens[i + k];
        }
        if (!skip) ++counts_[gram];
    }
}

void NgramCounter::merge(const NgramCounter& other) {
    if (other.n_ != n_) throw std::invalid_argument("cannot merge n-gram tables of different order");
    for (const auto& [gram, c] : other.counts_) counts_[gram] += c;
}

FrequencyTable NgramCounter::table(std::size_t limit) const {
    FrequencyTable t(counts_.begin(), counts_.end());
    auto order = [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    };
    if (limit != 0 && limit < t.size()) {
        std::partial_sort(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(limit), t.end(), order);
        t.resize(limit);
    } else {
        std::sort(t.begin(), t.end(), order);
    }
    return t;
}

FrequencyTable ngrams(std::span<const std::string> corpus, int n, const Stoplist& stoplist) {
    NgramCounter counter(n);
    for (const auto& doc : corpus) counter.add_document(doc, stoplist);
    return counter.table();
}

std::string_view to_string(TextField f) {
    switch (f) {
        case TextField::summary_brief:
            return "summary_brief";
        case TextField::summary_detailed:
            return "summary_detailed";
        case TextField::action_brief:
            return "action_brief";
        case TextField::action_detailed:
            return "action_detailed";
    }
    return "unknown";
}

std::string_view field_text(const AnnotationRecord& rec, TextField f) {
    switch (f) {
        case TextField::summary_brief:
            return rec.summary_brief;
        case TextField::summary_detailed:
            return rec.summary_detailed;
        case TextField::action_brief:
            return rec.action_brief;
        case TextField::action_detailed:
            return rec.action_detailed;
    }
    return {};
}

void LengthStats::add(std::string_view text) {
    const std::size_t words = word_count(text);
    const std::size_t chars = char_count(text);
    ++records;
    ++word_histogram[words];
    ++char_histogram[chars];
    total_words += words;
    total_chars += chars;
    if (words > 0) ++nonzero_records;
}

void LengthStats::merge(const LengthStats& other) {
    for (const auto& [k, v] : other.word_histogram) word_histogram[k] += v;
    for (const auto& [k, v] : other.char_histogram) char_histogram[k] += v;
    records += other.records;
    nonzero_records += other.nonzero_records;
    total_words += other.total_words;
    total_chars += other.total_chars;
}

std::optional<double> LengthStats::mean_words() const {
    if (nonzero_records == 0) return std::nullopt;
    return static_cast<double>(total_words) / static_cast<double>(nonzero_records);
}

std::optional<double> LengthStats::mean_chars() const {
    if (nonzero_records == 0) return std::nullopt;
    return static_cast<double>(total_chars) / static_cast<double>(nonzero_records);
}

void DurationBuckets::add(double duration_s) {
    std::size_t b = 0;
    while (b < kEdges.size() && duration_s >= kEdges[b]) ++b;
    ++counts[b];
}

void DurationBuckets::merge(const DurationBuckets& other) {
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
}

std::uint64_t DurationBuckets::total() const {
    std::uint64_t t = 0;
    for (auto c : counts) t += c;
    return t;
}

std::optional<std::array<double, 4>> DurationBuckets::shares() const {
    const std::uint64_t t = total();
    if (t == 0) return std::nullopt;
    std::array<double, 4> s{};
    for (std::size_t i = 0; i < counts.size(); ++i) s[i] = static_cast<double>(counts[i]) / static_cast<double>(t);
    return s;
}

StatsAccumulator::StatsAccumulator(const Stoplist& stoplist, StatsOptions opts)
    : stoplist_(&stoplist), opts_(std::move(opts)) {
    for (TextField f : opts_.ngram_fields) {
        for (int n = 1; n <= 3; ++n) ngrams_.emplace(std::pair{f, n}, NgramCounter(n));
    }
}

void StatsAccumulator::add(const AnnotationRecord& rec) {
    ++segments_;
    if (rec.na_action) ++na_segments_;
    for (TextField f : kTextFields) lengths_[static_cast<std::size_t>(f)].add(field_text(rec, f));
    for (auto& [key, counter] : ngrams_) counter.add_document(field_text(rec, key.first), *stoplist_);
    annotation_durations_.add(rec.end_s - rec.start_s);
}

void StatsAccumulator::add_tree(const SegmentTree& tree) {
    for (const SegmentNode& n : tree.nodes()) {
        if (n.caption_eligible) segment_durations_.add(n.duration());
    }
}

void StatsAccumulator::merge(const StatsAccumulator& other) {
    segments_ += other.segments_;
    na_segments_ += other.na_segments_;
    malformed_lines_ += other.malformed_lines_;
    for (std::size_t i = 0; i < lengths_.size(); ++i) lengths_[i].merge(other.lengths_[i]);
    annotation_durations_.merge(other.annotation_durations_);
    segment_durations_.merge(other.segment_durations_);
    for (const auto& [key, counter] : other.ngrams_) {
        auto it = ngrams_.find(key);
        if (it == ngrams_.end()) {
            ngrams_.emplace(key, counter);
        } else {
            it->second.merge(counter);
        }
    }
}

std::optional<double> StatsAccumulator::na_fraction() const {
    if (segments_ == 0) return std::nullopt;
    return static_cast<double>(na_segments_) / static_cast<double>(segments_);
}

const NgramCounter& StatsAccumulator::ngram_counter(TextField f, int n) const {
    auto it = ngrams_.find({f, n});
    if (it == ngrams_.end()) throw std::out_of_range("n-grams not tracked for this field");
    return it->second;
}

namespace {

nlohmann::json optional_json(const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

nlohmann::json buckets_json(const DurationBuckets& b) {
    nlohmann::json j{{"edges_s", {0.0, 3.0, 10.0, 60.0}}, {"counts", b.counts}};
    if (auto s = b.shares()) {
        j["shares"] = *s;
    } else {
        j["shares"] = nullptr;
    }
    return j;
}

nlohmann::json histogram_json(const std::map<std::size_t, std::uint64_t>& h) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& [len, count] : h) j.push_back({len, count});
    return j;
}

}  // namespace

nlohmann::json StatsAccumulator::report() const {
    std::uint64_t total_words = 0;
    nlohmann::json fields = nlohmann::json::object();
    for (TextField f : kTextFields) {
        const LengthStats& ls = lengths(f);
        total_words += ls.total_words;
        fields[std::string(to_string(f))] = {{"records", ls.records},
                                             {"nonzero_records", ls.nonzero_records},
                                             {"total_words", ls.total_words},
                                             {"total_chars", ls.total_chars},
                                             {"mean_words", optional_json(ls.mean_words())},
                                             {"mean_chars", optional_json(ls.mean_chars())},
                                             {"word_histogram", histogram_json(ls.word_histogram)},
                                             {"char_histogram", histogram_json(ls.char_histogram)}};
    }

    nlohmann::json grams = nlohmann::json::object();
    for (const auto& [key, counter] : ngrams_) {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& [gram, count] : counter.table(opts_.top_ngrams)) rows.push_back({gram, count});
        grams[std::string(to_string(key.first))][std::to_string(key.second)] = std::move(rows);
    }

    return {{"empty", segments_ == 0},
            {"total_segments", segments_},
            {"na_segments", na_segments_},
            {"na_fraction", optional_json(na_fraction())},
            {"total_words", total_words},
            {"malformed_lines", malformed_lines_},
            {"fields", std::move(fields)},
            {"ngrams", std::move(grams)},
            {"annotation_durations", buckets_json(annotation_durations_)},
            {"segment_durations", buckets_json(segment_durations_)},
            {"stoplist", resources::kStopwordsVersion}};
}

namespace {

std::string csv_quote(std::string_view s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

}  // namespace

void StatsAccumulator::write_csvs(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    auto write_hist = [&](const std::filesystem::path& p, const char* unit,
                          const std::map<std::size_t, std::uint64_t>& h) {
        std::ofstream out(p);
        if (!out) throw StorageError("cannot write " + p.string());
        out << unit << ",count\n";
        for (const auto& [len, count] : h) out << len << ',' << count << '\n';
    };
    for (TextField f : kTextFields) {
        const std::string name(to_string(f));
        write_hist(dir / ("words_" + name + ".csv"), "words", lengths(f).word_histogram);
        write_hist(dir / ("chars_" + name + ".csv"), "chars", lengths(f).char_histogram);
    }
    for (const auto& [key, counter] : ngrams_) {
        const auto p =
            dir / ("ngrams_" + std::string(to_string(key.first)) + "_" + std::to_string(key.second) + ".csv");
        std::ofstream out(p);
        if (!out) throw StorageError("cannot write " + p.string());
        out << "ngram,count\n";
        for (const auto& [gram, count] : counter.table()) out << csv_quote(gram) << ',' << count << '\n';
    }
}

std::vector<std::filesystem::path> list_files(const std::filesystem::path& dir, std::string_view extension) {
    std::vector<std::filesystem::path> out;
    if (dir.empty() || !std::filesystem::exists(dir)) return out;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == extension) out.push_back(entry.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

StatsAccumulator compute_stats(const std::vector<std::filesystem::path>& annotation_files,
                               const std::vector<std::filesystem::path>& tree_files, std::size_t threads,
                               const StatsOptions& opts) {
    const std::size_t total = annotation_files.size() + tree_files.size();
    // One accumulator per worker group keeps memory proportional to the
    // thread count rather than the number of files.
    const std::size_t groups = std::max<std::size_t>(1, std::min(threads, total));
    std::vector<StatsAccumulator> parts(groups, StatsAccumulator(Stoplist::english(), opts));

    auto process = [&](std::size_t i, StatsAccumulator& acc) {
        if (i < annotation_files.size()) {
            std::ifstream in(annotation_files[i]);
            if (!in) throw StorageError("cannot read " + annotation_files[i].string());
            for (std::string line; std::getline(in, line);) {
                if (trim_view(line).empty()) continue;
                try {
                    acc.add(annotation_from_json(nlohmann::json::parse(line)));
                } catch (const nlohmann::json::exception&) {
                    acc.add_malformed();
                } catch (const SchemaViolation&) {
                    acc.add_malformed();
                }
            }
        } else {
            const auto& path = tree_files[i - annotation_files.size()];
            std::ifstream in(path);
            if (!in) throw StorageError("cannot read " + path.string());
            try {
                acc.add_tree(tree_from_json(nlohmann::json::parse(in)));
            } catch (const nlohmann::json::exception&) {
                acc.add_malformed();
            } catch (const SchemaViolation&) {
                acc.add_malformed();
            }
        }
    };
    parallel_for(groups, groups, [&](std::size_t g) {
        for (std::size_t i = g; i < total; i += groups) process(i, parts[g]);
    });

    StatsAccumulator merged(Stoplist::english(), opts);
    for (const auto& p : parts) merged.merge(p);
    return merged;
}

}  // namespace captree
