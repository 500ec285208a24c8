#pragma once

// Corpus manifest loading, per-group detection summaries and the left-join
// that materializes the three per-sample tables next to manifest columns.
//
// Manifest CSV columns (header required): sample_id, language, compiler,
// then optionally payload_id, vt_first_detections, vt_latest_detections,
// capa_verdict, binary_path, trace_path, fmap_path, total_engines. Empty
// numeric cells mean "not collected" and never count as zero.
//
// Quartiles use the Tukey median-of-halves convention. Zero/low detection
// counts are taken over first-submission detections; "low" means fewer
// than `low_threshold` engines (default 5).

#include <algorithm>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "xeno/cfg_metrics.hpp"
#include "xeno/csv.hpp"
#include "xeno/error.hpp"
#include "xeno/fragment.hpp"
#include "xeno/indirection.hpp"
#include "xeno/util.hpp"

namespace xeno::report {

struct ManifestRow {
    std::string sample_id;
    std::string language;
    std::string compiler;
    std::string payload_id;
    std::optional<std::int64_t> vt_first_detections;
    std::optional<std::int64_t> vt_latest_detections;
    std::string capa_verdict;
    std::string binary_path;
    std::string trace_path;
    std::string fmap_path;
    std::optional<std::int64_t> total_engines;
};

struct CorpusManifest {
    std::vector<ManifestRow> rows;
};

struct DetectionStats {
    std::size_t present = 0; // rows with a value
    double min = 0, q1 = 0, median = 0, q3 = 0, max = 0, mean = 0;
};

struct GroupSummary {
    std::string key;
    std::size_t n = 0;
    DetectionStats first;
    DetectionStats latest;
    std::size_t zero_detections = 0;
    std::size_t low_detections = 0;
    std::optional<double> first_rate_mean;  // detections / total_engines, when supplied
    std::optional<double> latest_rate_mean;
};

enum class GroupBy { Language, LanguageCompiler };

inline CorpusManifest load_manifest(std::istream& in) {
    std::string line;
    std::size_t line_no = 0;
    std::vector<std::string> header;
    std::map<std::string, std::size_t> col;
    CorpusManifest manifest;
    std::map<std::string, std::size_t> seen_ids;

    auto cell = [&](const std::vector<std::string>& fields, const char* name) -> std::string {
        auto it = col.find(name);
        if (it == col.end() || it->second >= fields.size()) return "";
        return fields[it->second];
    };
    auto num_cell = [&](const std::vector<std::string>& fields,
                        const char* name) -> std::optional<std::int64_t> {
        std::string v = cell(fields, name);
        if (trim(v).empty()) return std::nullopt;
        auto parsed = parse_addr(trim(v));
        if (!parsed) throw ManifestError(line_no, std::string(name) + " is not a number: " + v);
        return static_cast<std::int64_t>(*parsed);
    };

    while (std::getline(in, line)) {
        ++line_no;
        std::string_view t = trim(line);
        if (t.empty() || t.front() == '#') continue;
        auto fields = csv::split(t);
        if (header.empty()) {
            header = fields;
            for (std::size_t i = 0; i < header.size(); ++i) col[std::string(trim(header[i]))] = i;
            for (const char* required : {"sample_id", "language", "compiler"})
                if (!col.count(required)) throw MissingColumn(required);
            continue;
        }
        ManifestRow row;
        row.sample_id = cell(fields, "sample_id");
        row.language = cell(fields, "language");
        row.compiler = cell(fields, "compiler");
        if (row.sample_id.empty()) throw ManifestError(line_no, "empty sample_id");
        if (row.language.empty()) throw ManifestError(line_no, "empty language");
        if (row.compiler.empty()) throw ManifestError(line_no, "empty compiler");
        if (seen_ids.count(row.sample_id)) throw DuplicateSampleId(row.sample_id);
        seen_ids[row.sample_id] = line_no;
        row.payload_id = cell(fields, "payload_id");
        row.vt_first_detections = num_cell(fields, "vt_first_detections");
        row.vt_latest_detections = num_cell(fields, "vt_latest_detections");
        row.capa_verdict = cell(fields, "capa_verdict");
        row.binary_path = cell(fields, "binary_path");
        row.trace_path = cell(fields, "trace_path");
        row.fmap_path = cell(fields, "fmap_path");
        row.total_engines = num_cell(fields, "total_engines");
        manifest.rows.push_back(std::move(row));
    }
    if (header.empty()) throw MissingColumn("sample_id");
    return manifest;
}

namespace detail {

inline double median_of(const std::vector<double>& sorted, std::size_t lo, std::size_t hi) {
    std::size_t m = hi - lo;
    if (m % 2 == 1) return sorted[lo + m / 2];
    return (sorted[lo + m / 2 - 1] + sorted[lo + m / 2]) / 2.0;
}

inline DetectionStats detection_stats(std::vector<double> values) {
    DetectionStats st;
    st.present = values.size();
    if (values.empty()) return st;
    std::sort(values.begin(), values.end());
    std::size_t m = values.size();
    st.min = values.front();
    st.max = values.back();
    st.median = median_of(values, 0, m);
    if (m == 1) {
        st.q1 = st.q3 = st.median;
    } else {
        // Tukey halves: the middle element of an odd-sized sample belongs
        // to neither half
        st.q1 = median_of(values, 0, m / 2);
        st.q3 = median_of(values, (m + 1) / 2, m);
    }
    double sum = 0;
    for (double v : values) sum += v;
    st.mean = sum / static_cast<double>(m);
    return st;
}

} // namespace detail

/// One summary per group, sorted by group size descending then key
/// ascending. Permutation-invariant in manifest row order.
inline std::vector<GroupSummary> summarize(const CorpusManifest& manifest, GroupBy group_by,
                                           std::int64_t low_threshold = 5) {
    std::map<std::string, std::vector<const ManifestRow*>> groups;
    for (const auto& row : manifest.rows) {
        std::string key = group_by == GroupBy::Language ? row.language
                                                        : row.language + "/" + row.compiler;
        groups[key].push_back(&row);
    }
    std::vector<GroupSummary> out;
    for (const auto& [key, rows] : groups) {
        GroupSummary g;
        g.key = key;
        g.n = rows.size();
        std::vector<double> first, latest, first_rates, latest_rates;
        for (const ManifestRow* row : rows) {
            if (row->vt_first_detections) {
                double v = static_cast<double>(*row->vt_first_detections);
                first.push_back(v);
                if (*row->vt_first_detections == 0) ++g.zero_detections;
                if (*row->vt_first_detections < low_threshold) ++g.low_detections;
                if (row->total_engines && *row->total_engines > 0)
                    first_rates.push_back(v / static_cast<double>(*row->total_engines));
            }
            if (row->vt_latest_detections) {
                latest.push_back(static_cast<double>(*row->vt_latest_detections));
                if (row->total_engines && *row->total_engines > 0)
                    latest_rates.push_back(static_cast<double>(*row->vt_latest_detections) /
                                           static_cast<double>(*row->total_engines));
            }
        }
        g.first = detail::detection_stats(std::move(first));
        g.latest = detail::detection_stats(std::move(latest));
        auto mean_of = [](const std::vector<double>& v) -> std::optional<double> {
            if (v.empty()) return std::nullopt;
            double s = 0;
            for (double x : v) s += x;
            return s / static_cast<double>(v.size());
        };
        g.first_rate_mean = mean_of(first_rates);
        g.latest_rate_mean = mean_of(latest_rates);
        out.push_back(std::move(g));
    }
    std::stable_sort(out.begin(), out.end(), [](const GroupSummary& a, const GroupSummary& b) {
        if (a.n != b.n) return a.n > b.n;
        return a.key < b.key;
    });
    return out;
}

inline std::string summary_csv_header() {
    return "group,n,first_min,first_q1,first_median,first_q3,first_max,first_mean,"
           "latest_min,latest_q1,latest_median,latest_q3,latest_max,latest_mean,"
           "zero_detections,low_detections,first_rate_mean,latest_rate_mean";
}

inline std::string summary_csv_row(const GroupSummary& g) {
    auto stats = [](const DetectionStats& st) -> std::vector<std::string> {
        if (st.present == 0) return {"", "", "", "", "", ""};
        return {fmt_stat(st.min), fmt_stat(st.q1),  fmt_stat(st.median),
                fmt_stat(st.q3),  fmt_stat(st.max), fmt_fixed(st.mean, 2)};
    };
    std::vector<std::string> fields{g.key, std::to_string(g.n)};
    for (auto& f : stats(g.first)) fields.push_back(std::move(f));
    for (auto& f : stats(g.latest)) fields.push_back(std::move(f));
    fields.push_back(std::to_string(g.zero_detections));
    fields.push_back(std::to_string(g.low_detections));
    fields.push_back(g.first_rate_mean ? fmt_fixed(*g.first_rate_mean, 4) : "");
    fields.push_back(g.latest_rate_mean ? fmt_fixed(*g.latest_rate_mean, 4) : "");
    return csv::join(fields);
}

// --- joined tables ---

/// table5.csv cells for one sample; plain counts so rows can be rebuilt from
/// previously emitted JSON as well as from a live graph.
struct IgraphRow {
    std::size_t num_nodes = 0;
    std::size_t num_edges = 0;
    std::uint64_t total_traversals = 0;
    std::uint64_t total_ind_calls = 0;
    std::uint64_t total_ind_jumps = 0;
    double normalized_entropy = 0.0;

    static IgraphRow from(const ig::IndirectionGraph& g, const ig::EntropyStats& st) {
        return {g.nodes.size(), g.edges.size(),     g.total_traversals,
                g.total_ind_calls, g.total_ind_jumps, st.normalized_entropy};
    }
};

struct JoinedTables {
    std::string table3;
    std::string table4;
    std::string table5;
};

/// Left-joins analysis results onto the manifest. Every manifest sample
/// produces one row in each table, with analysis cells left empty where no
/// result exists; a result keyed by an unknown sample throws.
inline JoinedTables join_results(const CorpusManifest& manifest,
                                 const std::map<std::string, frag::FragmentationReport>& scans,
                                 const std::map<std::string, cfg::TraceMetrics>& metrics,
                                 const std::map<std::string, IgraphRow>& igraphs) {
    std::map<std::string, const ManifestRow*> by_id;
    for (const auto& row : manifest.rows) by_id[row.sample_id] = &row;
    for (const auto& [id, r] : scans)
        if (!by_id.count(id)) throw UnknownSampleId(id);
    for (const auto& [id, r] : metrics)
        if (!by_id.count(id)) throw UnknownSampleId(id);
    for (const auto& [id, r] : igraphs)
        if (!by_id.count(id)) throw UnknownSampleId(id);

    JoinedTables tables;
    tables.table3 = frag::table3_csv_header() + "\n";
    tables.table4 = cfg::table4_csv_header() + "\n";
    tables.table5 = ig::table5_csv_header() + "\n";
    for (const auto& row : manifest.rows) {
        if (auto it = scans.find(row.sample_id); it != scans.end()) {
            tables.table3 += frag::table3_csv_row(row.language, row.compiler, it->second);
        } else {
            tables.table3 += csv::join({row.language, row.compiler, "", "", ""});
        }
        tables.table3 += '\n';

        if (auto it = metrics.find(row.sample_id); it != metrics.end()) {
            tables.table4 += cfg::table4_csv_row(row.language, row.compiler, it->second);
        } else {
            tables.table4 += csv::join({row.language, row.compiler, "", "", "", "", "", "", "", ""});
        }
        tables.table4 += '\n';

        if (auto it = igraphs.find(row.sample_id); it != igraphs.end()) {
            const IgraphRow& r = it->second;
            tables.table5 += ig::table5_csv_row_counts(row.language, r.num_nodes, r.num_edges,
                                                       r.total_traversals, r.total_ind_calls,
                                                       r.total_ind_jumps, r.normalized_entropy);
        } else {
            tables.table5 += csv::join({row.language, "", "", "", "", "", ""});
        }
        tables.table5 += '\n';
    }
    return tables;
}

} // namespace xeno::report
