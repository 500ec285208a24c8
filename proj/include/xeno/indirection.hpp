#pragma once

// Indirection CFG: one node per indirect jmp/call site, one weighted edge
// per (site, observed target) pair, counted per execution. Shannon entropy
// over the edge-frequency distribution measures how evenly a binary
// spreads its runtime-resolved control flow; it is normalized by
// log2(#edges) so 1.0 means uniform use and 0 means one dominant edge.

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "xeno/csv.hpp"
#include "xeno/error.hpp"
#include "xeno/trace.hpp"
#include "xeno/util.hpp"

namespace xeno::ig {

struct IndirectionGraph {
    std::set<std::uint64_t> nodes;
    std::map<std::pair<std::uint64_t, std::uint64_t>, std::uint64_t> edges; // (site, target) -> count
    std::uint64_t total_traversals = 0;
    std::uint64_t total_ind_calls = 0;
    std::uint64_t total_ind_jumps = 0;
};

struct EntropyStats {
    double entropy_bits = 0.0;
    double normalized_entropy = 0.0; // entropy_bits / log2(#edges); 0 when #edges <= 1
};

/// Streaming builder. An indirect event with no target is legal only as
/// the final event of its thread (the successor is simply unknown there);
/// it still contributes its node but no edge. Anywhere else it raises
/// MissingTarget.
class GraphBuilder {
public:
    void add(const trace::TraceEvent& ev) {
        if (auto it = pending_.find(ev.thread_id); it != pending_.end()) {
            // a successor exists after all, so the previous indirect event
            // should have carried a target
            throw MissingTarget(it->second.second, it->second.first);
        }
        if (!ev.is_indirect) return;
        if (ev.branch_kind != trace::BranchKind::Jmp && ev.branch_kind != trace::BranchKind::Call)
            return;
        graph_.nodes.insert(ev.address);
        if (!ev.target) {
            pending_.emplace(ev.thread_id, std::make_pair(ev.address, ev.seq));
            return;
        }
        ++graph_.edges[{ev.address, *ev.target}];
        ++graph_.total_traversals;
        if (ev.branch_kind == trace::BranchKind::Call) ++graph_.total_ind_calls;
        else ++graph_.total_ind_jumps;
    }

    IndirectionGraph finish() {
        pending_.clear(); // thread-final indirect events keep their node only
        return std::move(graph_);
    }

private:
    IndirectionGraph graph_;
    std::map<std::uint64_t, std::pair<std::uint64_t, std::uint64_t>> pending_; // thread -> (site, seq)
};

inline IndirectionGraph build_graph(const trace::Trace& t) {
    GraphBuilder b;
    for (const auto& ev : t.events) b.add(ev);
    return b.finish();
}

inline EntropyStats edge_entropy(const IndirectionGraph& g) {
    EntropyStats st;
    if (g.total_traversals == 0) return st;
    double total = static_cast<double>(g.total_traversals);
    for (const auto& [edge, count] : g.edges) {
        double p = static_cast<double>(count) / total;
        st.entropy_bits -= p * std::log2(p);
    }
    if (g.edges.size() > 1)
        st.normalized_entropy = st.entropy_bits / std::log2(static_cast<double>(g.edges.size()));
    return st;
}

/// Deterministic DOT rendering: nodes and edges sorted by address, edges
/// labeled with traversal counts.
inline std::string export_dot(const IndirectionGraph& g) {
    std::ostringstream out;
    out << "digraph indirection {\n";
    out << "  node [shape=box];\n";
    for (std::uint64_t node : g.nodes) out << "  \"" << to_hex(node) << "\";\n";
    for (const auto& [edge, count] : g.edges) {
        out << "  \"" << to_hex(edge.first) << "\" -> \"" << to_hex(edge.second)
            << "\" [label=\"" << count << "\"];\n";
    }
    out << "}\n";
    return out.str();
}

// --- output schemas ---

inline std::string table5_csv_header() {
    return "language,num_nodes,num_edges,total_traversals,indirect_calls,indirect_jumps,normalized_entropy";
}

inline std::string table5_csv_row_counts(const std::string& language, std::size_t num_nodes,
                                         std::size_t num_edges, std::uint64_t total_traversals,
                                         std::uint64_t indirect_calls, std::uint64_t indirect_jumps,
                                         double normalized_entropy) {
    return csv::join({language, std::to_string(num_nodes), std::to_string(num_edges),
                      std::to_string(total_traversals), std::to_string(indirect_calls),
                      std::to_string(indirect_jumps), fmt_fixed(normalized_entropy, 6)});
}

inline std::string table5_csv_row(const std::string& language, const IndirectionGraph& g,
                                  const EntropyStats& st) {
    return table5_csv_row_counts(language, g.nodes.size(), g.edges.size(), g.total_traversals,
                                 g.total_ind_calls, g.total_ind_jumps, st.normalized_entropy);
}

inline nlohmann::ordered_json to_json(const IndirectionGraph& g, const EntropyStats& st) {
    nlohmann::ordered_json edges = nlohmann::ordered_json::array();
    for (const auto& [edge, count] : g.edges) {
        edges.push_back({{"site", to_hex(edge.first)},
                         {"target", to_hex(edge.second)},
                         {"count", count}});
    }
    return {{"num_nodes", g.nodes.size()},
            {"num_edges", g.edges.size()},
            {"total_traversals", g.total_traversals},
            {"total_ind_calls", g.total_ind_calls},
            {"total_ind_jumps", g.total_ind_jumps},
            {"entropy_bits", st.entropy_bits},
            {"normalized_entropy", st.normalized_entropy},
            {"edges", std::move(edges)}};
}

} // namespace xeno::ig
