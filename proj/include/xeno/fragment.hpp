#pragma once

// Gap-tolerant payload matcher. A payload ("needle") hidden in a binary
// ("haystack") is modeled as a set of chunks: each chunk covers a
// contiguous needle slice, embedded in the haystack in byte order with at
// most max_gap junk bytes between consecutive matched bytes. Chunks are
// placed independently of each other (compilers reorder fragments freely),
// each needle index is matched at most once, and chunks shorter than
// min_chunk are rejected as incidental matches.
//
// find_fragmented_pattern maximizes the matched ratio over that model
// exactly. Ties are resolved canonically: highest ratio, then fewest
// chunks (longest chunk at the earliest needle index preferred), then per
// chunk the embedding with the smallest total gap and smallest file
// offset. The result is deterministic down to the byte.
//
// The exact search is a frontier DP over per-byte position lists with
// monotonic-deque window maxima, near-linear in the number of (needle
// byte, haystack occurrence) pairs. Verbatim occurrences short-circuit,
// and chunk reconstruction is confined to the optimal chain's span so
// repetitive regions (zero runs, wide-char data) stay cheap.

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "xeno/csv.hpp"
#include "xeno/error.hpp"
#include "xeno/pe.hpp"
#include "xeno/util.hpp"

namespace xeno::frag {

struct ScanParams {
    std::size_t max_gap = 60;
    std::size_t min_chunk = 4;
    bool reverse = false;
    double confidence_threshold = 0.5;
};

struct MatchChunk {
    std::uint64_t file_offset = 0;  // offset of the chunk's lowest matched byte
    std::size_t matched_len = 0;    // needle bytes matched in this chunk
    std::size_t needle_offset = 0;  // lowest needle index the chunk covers
    std::vector<std::uint32_t> internal_gaps; // junk between consecutive matched bytes, file order
};

enum class Fragmentation { None, Medium, Heavy, NA };
enum class Direction { Forward, Reversed };

inline const char* to_string(Fragmentation f) {
    switch (f) {
        case Fragmentation::None: return "None";
        case Fragmentation::Medium: return "Medium";
        case Fragmentation::Heavy: return "Heavy";
        default: return "N/A";
    }
}

inline const char* to_string(Direction d) {
    return d == Direction::Forward ? "forward" : "reversed";
}

inline std::optional<Fragmentation> fragmentation_from_string(std::string_view s) {
    if (s == "None") return Fragmentation::None;
    if (s == "Medium") return Fragmentation::Medium;
    if (s == "Heavy") return Fragmentation::Heavy;
    if (s == "N/A") return Fragmentation::NA;
    return std::nullopt;
}

struct FragmentationReport {
    std::vector<MatchChunk> chunks; // ascending needle_offset
    double matched_ratio = 0.0;
    Fragmentation classification = Fragmentation::NA;
    Direction direction = Direction::Forward;
    std::vector<std::string> section_stored; // filled by scan_binary
};

/// NA below the confidence threshold (or with no surviving chunks at all);
/// None only for a single gapless chunk covering the whole needle; Medium
/// for any other single chunk; Heavy for two or more.
inline Fragmentation classify(const std::vector<MatchChunk>& chunks, double matched_ratio,
                              const ScanParams& params) {
    if (chunks.empty()) return Fragmentation::NA;
    if (matched_ratio < params.confidence_threshold) return Fragmentation::NA;
    if (chunks.size() == 1) {
        const MatchChunk& c = chunks.front();
        bool gapless = std::all_of(c.internal_gaps.begin(), c.internal_gaps.end(),
                                   [](std::uint32_t g) { return g == 0; });
        if (gapless && matched_ratio == 1.0) return Fragmentation::None;
        return Fragmentation::Medium;
    }
    return Fragmentation::Heavy;
}

namespace detail {

inline void validate(const ScanParams& p) {
    if (p.min_chunk < 1) throw InvalidArgument("min_chunk must be >= 1");
    if (!(p.confidence_threshold >= 0.0 && p.confidence_threshold <= 1.0))
        throw InvalidArgument("confidence_threshold must be in [0,1]");
    if (p.max_gap > (1u << 24)) throw InvalidArgument("max_gap too large");
}

using PosLists = std::array<std::vector<std::uint32_t>, 256>;

inline PosLists index_positions(std::span<const std::uint8_t> haystack) {
    PosLists pos;
    for (std::size_t i = 0; i < haystack.size(); ++i)
        pos[haystack[i]].push_back(static_cast<std::uint32_t>(i));
    return pos;
}

/// reach[i] = longest run of consecutive needle bytes starting at i that
/// embeds in the haystack with every inter-byte gap <= max_gap. Backward
/// DP; the window maximum over the next byte's occurrence list is
/// maintained with a monotonic deque.
inline std::vector<std::uint32_t> compute_reach(std::span<const std::uint8_t> needle,
                                                const PosLists& pos, std::uint64_t max_gap) {
    const std::size_t n = needle.size();
    std::vector<std::uint32_t> reach(n, 0);
    std::vector<std::int32_t> f_next, f_cur;
    std::vector<std::uint32_t> dq;
    for (std::size_t i = n; i-- > 0;) {
        const auto& a = pos[needle[i]];
        f_cur.assign(a.size(), 1);
        if (i + 1 < n) {
            const auto& b = pos[needle[i + 1]];
            dq.clear();
            std::size_t dq_head = 0, hi = 0;
            for (std::size_t k = 0; k < a.size(); ++k) {
                std::uint64_t p = a[k];
                while (hi < b.size() && b[hi] <= p + max_gap + 1) {
                    while (dq.size() > dq_head && f_next[dq.back()] <= f_next[hi]) dq.pop_back();
                    dq.push_back(static_cast<std::uint32_t>(hi));
                    ++hi;
                }
                while (dq.size() > dq_head && b[dq[dq_head]] <= p) ++dq_head;
                if (dq.size() > dq_head) f_cur[k] = 1 + f_next[dq[dq_head]];
            }
        }
        std::int32_t best = 0;
        for (std::int32_t f : f_cur) best = std::max(best, f);
        reach[i] = static_cast<std::uint32_t>(best);
        f_next.swap(f_cur);
    }
    return reach;
}

/// Chooses disjoint needle intervals (each >= min_chunk and embeddable per
/// reach[]) maximizing covered bytes, then minimizing chunk count; among
/// remaining ties the longest chunk at the earliest index wins.
inline std::vector<std::pair<std::size_t, std::size_t>> select_intervals(
    const std::vector<std::uint32_t>& reach, std::size_t min_chunk) {
    const std::size_t n = reach.size();
    struct Val {
        std::uint64_t cov = 0;
        std::uint64_t chunks = 0;
    };
    std::vector<Val> dp(n + 1);
    std::vector<std::uint32_t> choice(n + 1, 0);
    for (std::size_t i = n; i-- > 0;) {
        Val best = dp[i + 1];
        std::uint32_t best_len = 0;
        std::size_t lmax = std::min<std::size_t>(reach[i], n - i);
        for (std::size_t len = lmax; len >= min_chunk && len > 0; --len) {
            Val cand{len + dp[i + len].cov, 1 + dp[i + len].chunks};
            bool better = cand.cov > best.cov ||
                          (cand.cov == best.cov && cand.chunks < best.chunks) ||
                          (cand.cov == best.cov && cand.chunks == best.chunks && best_len == 0);
            if (better) {
                best = cand;
                best_len = static_cast<std::uint32_t>(len);
            }
        }
        dp[i] = best;
        choice[i] = best_len;
    }
    std::vector<std::pair<std::size_t, std::size_t>> intervals;
    for (std::size_t i = 0; i < n;) {
        if (choice[i] == 0) {
            ++i;
        } else {
            intervals.emplace_back(i, i + choice[i]);
            i += choice[i];
        }
    }
    return intervals;
}

inline constexpr std::uint64_t kUnreachable = std::numeric_limits<std::uint64_t>::max();

/// Rolling backward pass: minimal total gap of an embedding of
/// needle[a, b) starting at each occurrence of needle[a]. O(levels) memory.
inline std::vector<std::uint64_t> min_gapsum_from_starts(std::span<const std::uint8_t> needle,
                                                         const PosLists& pos, std::size_t a,
                                                         std::size_t b, std::uint64_t max_gap) {
    std::vector<std::uint64_t> g_next, g_cur;
    std::vector<std::uint32_t> dq;
    for (std::size_t i = b; i-- > a;) {
        const auto& cur = pos[needle[i]];
        if (i + 1 == b) {
            g_cur.assign(cur.size(), 0);
        } else {
            g_cur.assign(cur.size(), kUnreachable);
            const auto& nxt = pos[needle[i + 1]];
            dq.clear();
            std::size_t dq_head = 0, hi = 0;
            // minimize g_next[q] + (q - p - 1): the window key is g + q
            for (std::size_t k = 0; k < cur.size(); ++k) {
                std::uint64_t p = cur[k];
                while (hi < nxt.size() && nxt[hi] <= p + max_gap + 1) {
                    if (g_next[hi] != kUnreachable) {
                        std::uint64_t key = g_next[hi] + nxt[hi];
                        while (dq.size() > dq_head && g_next[dq.back()] + nxt[dq.back()] >= key)
                            dq.pop_back();
                        dq.push_back(static_cast<std::uint32_t>(hi));
                    }
                    ++hi;
                }
                while (dq.size() > dq_head && nxt[dq[dq_head]] <= p) ++dq_head;
                if (dq.size() > dq_head) {
                    std::uint32_t qi = dq[dq_head];
                    g_cur[k] = g_next[qi] + nxt[qi] - p - 1;
                }
            }
        }
        g_next.swap(g_cur);
    }
    return g_next;
}

/// Embeds needle[a, b) minimizing (total gap, start offset, end offset).
/// A verbatim occurrence short-circuits; otherwise a backward pass pins the
/// optimal gap sum and earliest start, and the parent-link DP runs only on
/// haystack positions inside that chain's span, which keeps dense inputs
/// (zero runs over UTF-16-style regions) from blowing up memory.
inline MatchChunk embed_interval(std::span<const std::uint8_t> haystack,
                                 std::span<const std::uint8_t> needle, const PosLists& pos,
                                 std::size_t a, std::size_t b, std::uint64_t max_gap) {
    const std::size_t len = b - a;
    MatchChunk chunk;
    chunk.needle_offset = a;
    chunk.matched_len = len;

    auto it = std::search(haystack.begin(), haystack.end(), needle.begin() + a, needle.begin() + b);
    if (it != haystack.end()) {
        chunk.file_offset = static_cast<std::uint64_t>(it - haystack.begin());
        chunk.internal_gaps.assign(len - 1, 0);
        return chunk;
    }

    std::vector<std::uint64_t> from_start = min_gapsum_from_starts(needle, pos, a, b, max_gap);
    const auto& starts = pos[needle[a]];
    std::uint64_t best_gapsum = kUnreachable;
    std::uint64_t best_start = 0;
    for (std::size_t k = 0; k < starts.size(); ++k) {
        if (from_start[k] < best_gapsum) {
            best_gapsum = from_start[k];
            best_start = starts[k];
        }
    }
    if (best_gapsum == kUnreachable)
        throw Error("internal: selected interval has no gap-bounded embedding");
    const std::uint64_t span_end = best_start + (len - 1) + best_gapsum;

    // per-level position slices restricted to the optimal chain's span
    struct Level {
        const std::uint32_t* p = nullptr;
        std::size_t n = 0;
        std::vector<std::uint32_t> best_idx; // parent indices
        std::vector<std::uint64_t> gapsum;
    };
    std::vector<Level> levels(len);
    std::size_t total_cells = 0;
    for (std::size_t j = 0; j < len; ++j) {
        const auto& full = pos[needle[a + j]];
        auto lo = std::lower_bound(full.begin(), full.end(), best_start);
        auto hi = std::upper_bound(full.begin(), full.end(), span_end);
        levels[j].p = full.data() + (lo - full.begin());
        levels[j].n = static_cast<std::size_t>(hi - lo);
        total_cells += levels[j].n;
    }
    if (total_cells > (std::size_t{1} << 27))
        throw InvalidArgument(
            "pattern too repetitive for gap alignment; raise min_chunk or lower max_gap");

    levels[0].gapsum.assign(levels[0].n, 0);
    levels[0].best_idx.assign(levels[0].n, 0);
    std::vector<std::uint32_t> dq;
    for (std::size_t j = 1; j < len; ++j) {
        const Level& prev = levels[j - 1];
        Level& next = levels[j];
        next.gapsum.assign(next.n, kUnreachable);
        next.best_idx.assign(next.n, 0);
        dq.clear();
        std::size_t dq_head = 0, hi = 0;
        // minimize gapsum + (q - p - 1); ties prefer the smaller p, which
        // the push order provides
        auto key = [&](std::uint32_t idx) { return prev.gapsum[idx] + prev.p[idx]; };
        for (std::size_t qi = 0; qi < next.n; ++qi) {
            std::uint64_t qp = next.p[qi];
            while (hi < prev.n && prev.p[hi] < qp) {
                if (prev.gapsum[hi] != kUnreachable) {
                    while (dq.size() > dq_head && key(dq.back()) > key(static_cast<std::uint32_t>(hi)))
                        dq.pop_back();
                    dq.push_back(static_cast<std::uint32_t>(hi));
                }
                ++hi;
            }
            std::int64_t lower =
                static_cast<std::int64_t>(qp) - static_cast<std::int64_t>(max_gap) - 1;
            while (dq.size() > dq_head && static_cast<std::int64_t>(prev.p[dq[dq_head]]) < lower)
                ++dq_head;
            if (dq.size() > dq_head) {
                std::uint32_t pi = dq[dq_head];
                next.gapsum[qi] = prev.gapsum[pi] + (qp - prev.p[pi] - 1);
                next.best_idx[qi] = pi;
            }
        }
    }

    // earliest completion among minimal-gap chains, then walk parents back
    const Level& last = levels[len - 1];
    std::size_t best = last.n;
    for (std::size_t k = 0; k < last.n; ++k) {
        if (last.gapsum[k] != best_gapsum) continue;
        best = k;
        break;
    }
    if (best == last.n) throw Error("internal: embedding reconstruction failed");
    std::vector<std::uint32_t> positions(len);
    std::size_t idx = best;
    for (std::size_t j = len; j-- > 0;) {
        positions[j] = levels[j].p[idx];
        idx = levels[j].best_idx[idx];
    }
    chunk.file_offset = positions.front();
    chunk.internal_gaps.reserve(len - 1);
    for (std::size_t j = 1; j < len; ++j)
        chunk.internal_gaps.push_back(positions[j] - positions[j - 1] - 1);
    return chunk;
}

} // namespace detail

/// Finds the best gap-bounded alignment of `needle` in `haystack` (see the
/// model description at the top of this header). Deterministic; the
/// returned chunks are in needle order and matched_ratio is exact over the
/// model.
inline FragmentationReport find_fragmented_pattern(std::span<const std::uint8_t> haystack,
                                                   std::span<const std::uint8_t> needle,
                                                   const ScanParams& params) {
    detail::validate(params);
    if (needle.size() < params.min_chunk) throw NeedleTooShort(needle.size(), params.min_chunk);
    if (haystack.empty()) throw EmptyHaystack();
    if (haystack.size() > std::numeric_limits<std::uint32_t>::max())
        throw InvalidArgument("haystack larger than 4 GiB is not supported");

    FragmentationReport report;
    report.direction = Direction::Forward;

    auto it = std::search(haystack.begin(), haystack.end(), needle.begin(), needle.end());
    if (it != haystack.end()) {
        MatchChunk chunk;
        chunk.file_offset = static_cast<std::uint64_t>(it - haystack.begin());
        chunk.matched_len = needle.size();
        chunk.needle_offset = 0;
        chunk.internal_gaps.assign(needle.size() - 1, 0);
        report.chunks.push_back(std::move(chunk));
        report.matched_ratio = 1.0;
        report.classification = classify(report.chunks, report.matched_ratio, params);
        return report;
    }

    auto pos = detail::index_positions(haystack);
    auto reach = detail::compute_reach(needle, pos, params.max_gap);
    auto intervals = detail::select_intervals(reach, params.min_chunk);

    std::size_t covered = 0;
    for (auto [a, b] : intervals) {
        report.chunks.push_back(detail::embed_interval(haystack, needle, pos, a, b, params.max_gap));
        covered += b - a;
    }
    report.matched_ratio = static_cast<double>(covered) / static_cast<double>(needle.size());
    report.classification = classify(report.chunks, report.matched_ratio, params);
    return report;
}

/// Matches the needle in reversed byte order (stack-built payloads land in
/// the file back to front). Equivalent to the forward scan of
/// reverse(needle); chunk needle_offsets are reported against the original
/// needle and chunks come back sorted by that offset. For a reversed chunk
/// the file bytes read low-to-high equal the needle slice high-to-low.
inline FragmentationReport find_reversed_pattern(std::span<const std::uint8_t> haystack,
                                                 std::span<const std::uint8_t> needle,
                                                 const ScanParams& params) {
    std::vector<std::uint8_t> reversed(needle.rbegin(), needle.rend());
    FragmentationReport report = find_fragmented_pattern(haystack, reversed, params);
    report.direction = Direction::Reversed;
    for (auto& c : report.chunks)
        c.needle_offset = needle.size() - (c.needle_offset + c.matched_len);
    std::sort(report.chunks.begin(), report.chunks.end(),
              [](const MatchChunk& x, const MatchChunk& y) { return x.needle_offset < y.needle_offset; });
    return report;
}

/// Scans a whole PE file (headers, sections and overlay included). Runs
/// the forward scan, adds the reversed scan when params.reverse is set,
/// keeps the higher matched ratio (forward wins ties) and attributes each
/// chunk to the section storing it.
inline FragmentationReport scan_binary(const pe::PeImage& image,
                                       std::span<const std::uint8_t> needle,
                                       const ScanParams& params) {
    FragmentationReport best = find_fragmented_pattern(image.bytes(), needle, params);
    if (params.reverse) {
        FragmentationReport rev = find_reversed_pattern(image.bytes(), needle, params);
        if (rev.matched_ratio > best.matched_ratio) best = std::move(rev);
    }
    best.section_stored.clear();
    for (const auto& c : best.chunks) {
        std::string label = pe::section_of(image, c.file_offset);
        if (std::find(best.section_stored.begin(), best.section_stored.end(), label) ==
            best.section_stored.end())
            best.section_stored.push_back(std::move(label));
    }
    return best;
}

// --- output schemas ---

inline std::string table3_csv_header() {
    return "language,compiler,fragmentation,section_stored,matched_ratio";
}

inline std::string table3_csv_row(const std::string& language, const std::string& compiler,
                                  const FragmentationReport& report) {
    std::string sections;
    for (std::size_t i = 0; i < report.section_stored.size(); ++i) {
        if (i) sections += ';';
        sections += report.section_stored[i];
    }
    return csv::join({language, compiler, to_string(report.classification), sections,
                      fmt_fixed(report.matched_ratio, 3)});
}

inline nlohmann::ordered_json to_json(const MatchChunk& c) {
    return {{"file_offset", c.file_offset},
            {"matched_len", c.matched_len},
            {"needle_offset", c.needle_offset},
            {"internal_gaps", c.internal_gaps}};
}

inline nlohmann::ordered_json to_json(const FragmentationReport& r) {
    nlohmann::ordered_json chunks = nlohmann::ordered_json::array();
    for (const auto& c : r.chunks) chunks.push_back(to_json(c));
    return {{"matched_ratio", r.matched_ratio},
            {"classification", to_string(r.classification)},
            {"direction", to_string(r.direction)},
            {"section_stored", r.section_stored},
            {"chunks", std::move(chunks)}};
}

} // namespace xeno::frag
