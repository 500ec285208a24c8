#pragma once

// Reverse-engineering complexity counters over a filtered trace plus a
// function map. Basic blocks are recovered dynamically, leader-style:
// a leader is any trace-observed control transfer target (successor of a
// branch event, a thread's first event, a cross-function entry or any
// non-contiguous step); a block runs from a leader up to the next branch
// instruction or the next leader. Every counter is unique-by-address, so
// re-executing code never inflates a metric.
//
// Two stream irregularities are deliberately inert: a successor at the
// same address is a re-execution (REP-style), not a transfer, and a
// non-branch step to a non-adjacent address splits blocks but records no
// edge (the producer gave no evidence of a real transfer there). Both keep
// the metrics invariant under event duplication and trace
// self-concatenation.
//
// MetricsBuilder is a streaming fold: feed events in file order, read the
// results once at the end. Memory scales with unique addresses, not trace
// length.

#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "xeno/csv.hpp"
#include "xeno/error.hpp"
#include "xeno/trace.hpp"
#include "xeno/util.hpp"

namespace xeno::cfg {

inline constexpr const char* kUnmappedName = "<unmapped>";

struct BasicBlock {
    std::uint64_t start = 0;
    std::uint64_t end = 0; // last instruction address + its size
    std::vector<std::uint64_t> instr_addresses;
};

struct FunctionGraph {
    std::string name;
    std::vector<BasicBlock> blocks; // ascending start
    std::set<std::pair<std::size_t, std::size_t>> edges; // observed (block, successor) pairs
};

struct FunctionMetrics {
    std::string name;
    bool executed = false;
    std::uint64_t size_bytes = 0; // sum of observed instruction sizes (unique addresses)
    std::size_t blocks = 0;
    std::size_t cc = 0;
};

struct TraceMetrics {
    std::size_t num_functions = 0;          // static inventory from the function map
    std::size_t num_functions_executed = 0; // includes "<unmapped>" when hit
    double avg_func_size_bytes = 0.0;
    std::size_t bb_hits = 0;
    std::size_t instr_hits = 0;
    double cc_avg = 0.0;
    std::size_t ind_jmps = 0;  // unique indirect-jump sites
    std::size_t ind_calls = 0; // unique indirect-call sites
    std::size_t threads = 0;
};

/// E - N + 2P over an undirected view of the block graph. Each isolated
/// block is its own component, so a straight-line function scores 1.
inline std::size_t cyclomatic(std::size_t num_blocks,
                              const std::set<std::pair<std::size_t, std::size_t>>& edges) {
    if (num_blocks == 0) return 0;
    std::vector<std::size_t> parent(num_blocks);
    std::iota(parent.begin(), parent.end(), std::size_t{0});
    auto find = [&](std::size_t x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    };
    for (const auto& [a, b] : edges) {
        if (a >= num_blocks || b >= num_blocks)
            throw InvalidArgument("edge references a block outside the graph");
        parent[find(a)] = find(b);
    }
    std::size_t components = 0;
    for (std::size_t i = 0; i < num_blocks; ++i)
        if (find(i) == i) ++components;
    return static_cast<std::size_t>(static_cast<std::int64_t>(edges.size()) -
                                    static_cast<std::int64_t>(num_blocks) +
                                    2 * static_cast<std::int64_t>(components));
}

class MetricsBuilder {
public:
    explicit MetricsBuilder(const trace::FunctionMap& fmap) : fmap_(&fmap) {}

    void add(const trace::TraceEvent& ev) {
        threads_.insert(ev.thread_id);
        std::int64_t fidx = function_of(ev.address);
        FuncAcc& acc = funcs_[fidx];
        acc.instr.emplace(ev.address, ev.size);
        if (ev.branch_kind != trace::BranchKind::None) acc.branch_addrs.insert(ev.address);
        if (ev.is_indirect) {
            if (ev.branch_kind == trace::BranchKind::Jmp) ind_jmp_sites_.insert(ev.address);
            else if (ev.branch_kind == trace::BranchKind::Call) ind_call_sites_.insert(ev.address);
        }
        auto it = last_.find(ev.thread_id);
        if (it == last_.end()) {
            acc.leaders.insert(ev.address);
            last_.emplace(ev.thread_id, LastEvent{fidx, ev.address, ev.size, ev.branch_kind});
        } else {
            const LastEvent& prev = it->second;
            if (prev.address != ev.address) {
                bool contiguous = prev.address + prev.size == ev.address;
                bool branch = prev.kind != trace::BranchKind::None;
                if (prev.fidx != fidx || branch || !contiguous) acc.leaders.insert(ev.address);
                if (prev.fidx == fidx && (branch || contiguous))
                    acc.transitions.emplace(prev.address, ev.address);
            }
            it->second = LastEvent{fidx, ev.address, ev.size, ev.branch_kind};
        }
    }

    /// Block graphs of every executed function, "<unmapped>" last.
    std::vector<FunctionGraph> function_graphs() const {
        std::vector<FunctionGraph> graphs;
        for (const auto& [fidx, acc] : funcs_) {
            if (fidx < 0) continue;
            graphs.push_back(build_graph(name_of(fidx), acc));
        }
        if (auto it = funcs_.find(-1); it != funcs_.end())
            graphs.push_back(build_graph(kUnmappedName, it->second));
        return graphs;
    }

    /// One row per function-map entry (executed or not), plus "<unmapped>"
    /// when the trace ran outside the map.
    std::vector<FunctionMetrics> function_metrics() const {
        std::vector<FunctionMetrics> out;
        auto fill = [&](const std::string& name, const FuncAcc& acc) {
            FunctionGraph g = build_graph(name, acc);
            FunctionMetrics m;
            m.name = name;
            m.executed = true;
            for (const auto& [addr, size] : acc.instr) m.size_bytes += size;
            m.blocks = g.blocks.size();
            m.cc = cyclomatic(g.blocks.size(), g.edges);
            return m;
        };
        for (std::size_t i = 0; i < fmap_->entries.size(); ++i) {
            auto it = funcs_.find(static_cast<std::int64_t>(i));
            if (it == funcs_.end()) {
                FunctionMetrics m;
                m.name = fmap_->entries[i].name;
                out.push_back(std::move(m));
            } else {
                out.push_back(fill(fmap_->entries[i].name, it->second));
            }
        }
        if (auto it = funcs_.find(-1); it != funcs_.end())
            out.push_back(fill(kUnmappedName, it->second));
        return out;
    }

    TraceMetrics metrics() const {
        TraceMetrics tm;
        tm.num_functions = fmap_->entries.size();
        tm.num_functions_executed = funcs_.size();
        tm.threads = threads_.size();
        tm.ind_jmps = ind_jmp_sites_.size();
        tm.ind_calls = ind_call_sites_.size();
        std::uint64_t total_size = 0;
        std::uint64_t total_cc = 0;
        for (const auto& [fidx, acc] : funcs_) {
            FunctionGraph g = build_graph(name_of(fidx), acc);
            tm.bb_hits += g.blocks.size();
            tm.instr_hits += acc.instr.size();
            for (const auto& [addr, size] : acc.instr) total_size += size;
            total_cc += cyclomatic(g.blocks.size(), g.edges);
        }
        if (!funcs_.empty()) {
            tm.avg_func_size_bytes =
                static_cast<double>(total_size) / static_cast<double>(funcs_.size());
            tm.cc_avg = static_cast<double>(total_cc) / static_cast<double>(funcs_.size());
        }
        return tm;
    }

private:
    struct FuncAcc {
        std::map<std::uint64_t, std::uint32_t> instr; // address -> first observed size
        std::set<std::uint64_t> leaders;
        std::set<std::uint64_t> branch_addrs;
        std::set<std::pair<std::uint64_t, std::uint64_t>> transitions; // same-function adjacent pairs
    };
    struct LastEvent {
        std::int64_t fidx;
        std::uint64_t address;
        std::uint32_t size;
        trace::BranchKind kind;
    };

    std::int64_t function_of(std::uint64_t addr) const {
        const trace::FunctionSpan* f = fmap_->find(addr);
        if (!f) return -1;
        return f - fmap_->entries.data();
    }

    std::string name_of(std::int64_t fidx) const {
        return fidx < 0 ? kUnmappedName : fmap_->entries[static_cast<std::size_t>(fidx)].name;
    }

    FunctionGraph build_graph(std::string name, const FuncAcc& acc) const {
        FunctionGraph g;
        g.name = std::move(name);
        const std::uint64_t* prev = nullptr;
        std::uint32_t prev_size = 0;
        for (const auto& [addr, size] : acc.instr) {
            bool new_block = g.blocks.empty() || acc.leaders.count(addr) ||
                             acc.branch_addrs.count(*prev) || *prev + prev_size != addr;
            if (new_block) g.blocks.push_back(BasicBlock{addr, addr + size, {}});
            g.blocks.back().instr_addresses.push_back(addr);
            g.blocks.back().end = addr + size;
            prev = &addr;
            prev_size = size;
        }
        auto block_of = [&](std::uint64_t addr) {
            auto it = std::upper_bound(g.blocks.begin(), g.blocks.end(), addr,
                                       [](std::uint64_t a, const BasicBlock& b) { return a < b.start; });
            return static_cast<std::size_t>(it - g.blocks.begin()) - 1;
        };
        for (const auto& [from, to] : acc.transitions) {
            std::size_t bt = block_of(to);
            if (g.blocks[bt].start == to) g.edges.emplace(block_of(from), bt);
        }
        return g;
    }

    const trace::FunctionMap* fmap_;
    std::map<std::int64_t, FuncAcc> funcs_;
    std::map<std::uint64_t, LastEvent> last_;
    std::set<std::uint64_t> ind_jmp_sites_, ind_call_sites_, threads_;
};

/// Per-function block graphs of a (filtered) trace.
inline std::vector<FunctionGraph> segment_blocks(const trace::Trace& t,
                                                 const trace::FunctionMap& fmap) {
    MetricsBuilder b(fmap);
    for (const auto& ev : t.events) b.add(ev);
    return b.function_graphs();
}

inline TraceMetrics compute_metrics(const trace::Trace& t, const trace::FunctionMap& fmap) {
    MetricsBuilder b(fmap);
    for (const auto& ev : t.events) b.add(ev);
    return b.metrics();
}

// --- output schemas ---

inline std::string table4_csv_header() {
    return "language,compiler,functions,funcs_exec,avg_func_size,bb_hits,inst_hits,cc,ind_jmps,ind_calls";
}

inline std::string table4_csv_row(const std::string& language, const std::string& compiler,
                                  const TraceMetrics& m) {
    return csv::join({language, compiler, std::to_string(m.num_functions),
                      std::to_string(m.num_functions_executed),
                      fmt_fixed(m.avg_func_size_bytes, 2), std::to_string(m.bb_hits),
                      std::to_string(m.instr_hits), fmt_fixed(m.cc_avg, 2),
                      std::to_string(m.ind_jmps), std::to_string(m.ind_calls)});
}

inline nlohmann::ordered_json to_json(const TraceMetrics& m) {
    return {{"num_functions", m.num_functions},
            {"num_functions_executed", m.num_functions_executed},
            {"avg_func_size_bytes", m.avg_func_size_bytes},
            {"bb_hits", m.bb_hits},
            {"instr_hits", m.instr_hits},
            {"cc_avg", m.cc_avg},
            {"ind_jmps", m.ind_jmps},
            {"ind_calls", m.ind_calls},
            {"threads", m.threads}};
}

inline nlohmann::ordered_json to_json(const FunctionMetrics& m) {
    return {{"name", m.name},       {"executed", m.executed}, {"size_bytes", m.size_bytes},
            {"blocks", m.blocks},   {"cc", m.cc}};
}

} // namespace xeno::cfg
