#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "captree/aggregator.hpp"
#include "captree/segmenter.hpp"

namespace captree {

// Whitespace-delimited runs with leading/trailing ASCII punctuation removed;
// runs that become empty are dropped. "N/A" yields no tokens.
std::vector<std::string> tokenize_words(std::string_view text, bool lowercase = false);

std::size_t word_count(std::string_view text);
// Unicode code points in the trimmed text; 0 for "N/A".
std::size_t char_count(std::string_view text);

class Stoplist {
public:
    Stoplist() = default;
    explicit Stoplist(std::set<std::string, std::less<>> words) : words_(std::move(words)) {}

    // The versioned English list shipped with the library.
    static const Stoplist& english();

    bool contains(std::string_view w) const { return words_.contains(w); }
    std::size_t size() const noexcept { return words_.size(); }

private:
    std::set<std::string, std::less<>> words_;
};

// (n-gram, count), most frequent first, ties in lexicographic order.
using FrequencyTable = std::vector<std::pair<std::string, std::uint64_t>>;

class NgramCounter {
public:
    explicit NgramCounter(int n);

    // Counts the n-grams of one document; an n-gram containing a stopword is
    // skipped. N-grams never span documents.
    void add_document(std::string_view text, const Stoplist& stoplist);
    void merge(const NgramCounter& other);
    FrequencyTable table(std::size_t limit = 0) const;  // limit 0 = all
    int n() const noexcept { return n_; }

private:
    int n_;
    std::unordered_map<std::string, std::uint64_t> counts_;
};

FrequencyTable ngrams(std::span<const std::string> corpus, int n, const Stoplist& stoplist);

enum class TextField { summary_brief, summary_detailed, action_brief, action_detailed };
inline constexpr std::array<TextField, 4> kTextFields = {TextField::summary_brief, TextField::summary_detailed,
                                                         TextField::action_brief, TextField::action_detailed};
std::string_view to_string(TextField f);
std::string_view field_text(const AnnotationRecord& rec, TextField f);

struct LengthStats {
    std::map<std::size_t, std::uint64_t> word_histogram;
    std::map<std::size_t, std::uint64_t> char_histogram;
    std::uint64_t records{0};
    std::uint64_t nonzero_records{0};  // records with at least one word
    std::uint64_t total_words{0};
    std::uint64_t total_chars{0};

    void add(std::string_view text);
    void merge(const LengthStats& other);
    // Means over records with a nonzero word count.
    std::optional<double> mean_words() const;
    std::optional<double> mean_chars() const;
};

// Counts over [0,3), [3,10), [10,60), [60,inf) seconds.
struct DurationBuckets {
    static constexpr std::array<double, 3> kEdges = {3.0, 10.0, 60.0};
    std::array<std::uint64_t, 4> counts{};

    void add(double duration_s);
    void merge(const DurationBuckets& other);
    std::uint64_t total() const;
    std::optional<std::array<double, 4>> shares() const;  // nullopt when empty
};

struct StatsOptions {
    std::size_t top_ngrams{50};
    std::vector<TextField> ngram_fields{TextField::action_brief, TextField::summary_brief};
};

// Mergeable partial report. merge() is associative and commutative.
class StatsAccumulator {
public:
    explicit StatsAccumulator(const Stoplist& stoplist = Stoplist::english(), StatsOptions opts = {});

    void add(const AnnotationRecord& rec);
    // Adds the durations of caption-eligible nodes.
    void add_tree(const SegmentTree& tree);
    void add_malformed(std::uint64_t n = 1) { malformed_lines_ += n; }
    void merge(const StatsAccumulator& other);

    std::uint64_t total_segments() const noexcept { return segments_; }
    std::uint64_t na_segments() const noexcept { return na_segments_; }
    std::uint64_t malformed_lines() const noexcept { return malformed_lines_; }
    std::optional<double> na_fraction() const;
    const LengthStats& lengths(TextField f) const { return lengths_[static_cast<std::size_t>(f)]; }
    const DurationBuckets& annotation_durations() const noexcept { return annotation_durations_; }
    const DurationBuckets& segment_durations() const noexcept { return segment_durations_; }
    const NgramCounter& ngram_counter(TextField f, int n) const;

    nlohmann::json report() const;
    // Per-field word/char histograms and n-gram tables as CSV files.
    void write_csvs(const std::filesystem::path& dir) const;

private:
    const Stoplist* stoplist_;
    StatsOptions opts_;
    std::uint64_t segments_{0};
    std::uint64_t na_segments_{0};
    std::uint64_t malformed_lines_{0};
    std::array<LengthStats, 4> lengths_;
    DurationBuckets annotation_durations_;
    DurationBuckets segment_durations_;
    std::map<std::pair<TextField, int>, NgramCounter> ngrams_;
};

// Streams every *.jsonl file under annotations_dir and every *.json file
// under trees_dir (either may be empty). Malformed lines are skipped and
// counted. Files are processed in parallel and merged.
StatsAccumulator compute_stats(const std::vector<std::filesystem::path>& annotation_files,
                               const std::vector<std::filesystem::path>& tree_files, std::size_t threads = 1,
                               const StatsOptions& opts = {});

std::vector<std::filesystem::path> list_files(const std::filesystem::path& dir, std::string_view extension);

}  // namespace captree
