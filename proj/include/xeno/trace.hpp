#pragma once

// Neutral instruction-trace format ("xeno-trace v1") and the module filter
// that strips system-library noise.
//
// A trace file is JSON lines, one event per line, optionally preceded by
// the version comment `# xeno-trace v1`:
//
//   {"seq":0,"thread_id":1,"address":"0x401000","size":3,"module":"app.exe",
//    "branch_kind":"call","is_indirect":true,"target":"0x401800"}
//
// Addresses are JSON integers or strings (hex with 0x, or decimal). seq is
// assigned from line order when absent; size defaults to 1; branch_kind
// defaults to "none"; target is the address of the next instruction this
// thread executed and is absent at the end of a thread's stream. Unknown
// fields are ignored. is_indirect is only meaningful on jmp and call.
//
// The function map sidecar is CSV `name,start,end` (addresses hex or
// decimal, end exclusive), same version comment.
//
// Parsing is a single streaming pass; consumers fold events as they
// arrive, so multi-gigabyte logs never need to fit in memory.

#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <rapidjson/document.h>

#include "json.hpp"
#include "xeno/csv.hpp"
#include "xeno/error.hpp"
#include "xeno/util.hpp"

namespace xeno::trace {

inline constexpr std::string_view kFormatVersion = "# xeno-trace v1";

enum class BranchKind { None, Jmp, Call, Ret, Cond };

inline const char* to_string(BranchKind k) {
    switch (k) {
        case BranchKind::Jmp: return "jmp";
        case BranchKind::Call: return "call";
        case BranchKind::Ret: return "ret";
        case BranchKind::Cond: return "cond";
        default: return "none";
    }
}

struct TraceEvent {
    std::uint64_t seq = 0;
    std::uint64_t thread_id = 0;
    std::uint64_t address = 0;
    std::uint32_t size = 1;
    std::string module;
    BranchKind branch_kind = BranchKind::None;
    bool is_indirect = false;
    std::optional<std::uint64_t> target;
};

struct Trace {
    std::vector<TraceEvent> events;
    std::set<std::string> modules;
    std::string main_module; // module of the first event
};

struct FunctionSpan {
    std::string name;
    std::uint64_t start = 0;
    std::uint64_t end = 0; // exclusive
};

struct FunctionMap {
    std::vector<FunctionSpan> entries; // sorted by start, non-overlapping

    const FunctionSpan* find(std::uint64_t addr) const {
        auto it = std::upper_bound(entries.begin(), entries.end(), addr,
                                   [](std::uint64_t a, const FunctionSpan& f) { return a < f.start; });
        if (it == entries.begin()) return nullptr;
        --it;
        return addr < it->end ? &*it : nullptr;
    }
};

namespace detail {

inline std::optional<std::uint64_t> to_addr(const rapidjson::Value& v) {
    if (v.IsUint64()) return v.GetUint64();
    if (v.IsInt64() && v.GetInt64() >= 0) return static_cast<std::uint64_t>(v.GetInt64());
    if (v.IsString()) return parse_addr({v.GetString(), v.GetStringLength()});
    return std::nullopt;
}

inline std::optional<BranchKind> to_branch_kind(std::string_view s) {
    if (s == "none") return BranchKind::None;
    if (s == "jmp") return BranchKind::Jmp;
    if (s == "call") return BranchKind::Call;
    if (s == "ret") return BranchKind::Ret;
    if (s == "cond") return BranchKind::Cond;
    return std::nullopt;
}

/// Version comments must match exactly; any other comment line is skipped.
inline void check_comment(std::string_view line, std::size_t line_no) {
    std::string_view t = trim(line);
    if (t.rfind("# xeno-trace", 0) == 0 && t != kFormatVersion)
        throw TraceSyntax(line_no, "unsupported format version: " + std::string(t));
}

} // namespace detail

/// Streams events out of a v1 trace, validating as it goes. The sink is
/// invoked once per event in file order. Memory use is independent of the
/// event count.
template <typename Sink>
void read_events(std::istream& in, Sink&& sink) {
    std::string line;
    std::size_t line_no = 0;
    std::uint64_t event_index = 0;
    std::map<std::uint64_t, std::uint64_t> last_seq;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::string_view t = trim(line);
        if (t.empty()) continue;
        if (t.front() == '#') {
            detail::check_comment(t, line_no);
            continue;
        }

        rapidjson::Document doc;
        doc.ParseInsitu(line.data());
        if (doc.HasParseError() || !doc.IsObject())
            throw TraceSyntax(line_no, "not a JSON object");

        TraceEvent ev;
        auto member = [&](const char* name) -> const rapidjson::Value* {
            auto it = doc.FindMember(name);
            return it != doc.MemberEnd() ? &it->value : nullptr;
        };

        const auto* addr = member("address");
        if (!addr) throw TraceSyntax(line_no, "missing address");
        auto addr_v = detail::to_addr(*addr);
        if (!addr_v) throw TraceSyntax(line_no, "bad address");
        ev.address = *addr_v;

        if (const auto* v = member("seq")) {
            auto s = detail::to_addr(*v);
            if (!s) throw TraceSyntax(line_no, "bad seq");
            ev.seq = *s;
        } else {
            ev.seq = event_index;
        }
        if (const auto* v = member("thread_id")) {
            auto tid = detail::to_addr(*v);
            if (!tid) throw TraceSyntax(line_no, "bad thread_id");
            ev.thread_id = *tid;
        }
        if (const auto* v = member("size")) {
            auto s = detail::to_addr(*v);
            if (!s || *s == 0) throw TraceSyntax(line_no, "size must be a positive integer");
            ev.size = static_cast<std::uint32_t>(*s);
        }
        if (const auto* v = member("module")) {
            if (!v->IsString()) throw TraceSyntax(line_no, "module must be a string");
            ev.module.assign(v->GetString(), v->GetStringLength());
        }
        if (const auto* v = member("branch_kind")) {
            if (!v->IsString()) throw TraceSyntax(line_no, "branch_kind must be a string");
            auto k = detail::to_branch_kind({v->GetString(), v->GetStringLength()});
            if (!k) throw TraceSyntax(line_no, "unknown branch_kind");
            ev.branch_kind = *k;
        }
        if (const auto* v = member("is_indirect")) {
            if (!v->IsBool()) throw TraceSyntax(line_no, "is_indirect must be a boolean");
            ev.is_indirect = v->GetBool();
        }
        if (ev.is_indirect && ev.branch_kind != BranchKind::Jmp && ev.branch_kind != BranchKind::Call)
            throw TraceSyntax(line_no, "is_indirect requires branch_kind jmp or call");
        if (const auto* v = member("target")) {
            if (!v->IsNull()) {
                auto tgt = detail::to_addr(*v);
                if (!tgt) throw TraceSyntax(line_no, "bad target");
                ev.target = *tgt;
            }
        }

        auto [it, inserted] = last_seq.try_emplace(ev.thread_id, ev.seq);
        if (!inserted) {
            if (ev.seq <= it->second) throw InconsistentThreadOrder(line_no, ev.thread_id);
            it->second = ev.seq;
        }
        ++event_index;
        sink(std::move(ev));
    }
}

inline Trace parse_trace(std::istream& in) {
    Trace t;
    read_events(in, [&](TraceEvent&& ev) {
        if (t.events.empty()) t.main_module = ev.module;
        t.modules.insert(ev.module);
        t.events.push_back(std::move(ev));
    });
    return t;
}

inline void write_event(std::ostream& out, const TraceEvent& ev) {
    nlohmann::ordered_json j{{"seq", ev.seq},
                             {"thread_id", ev.thread_id},
                             {"address", to_hex(ev.address)},
                             {"size", ev.size},
                             {"module", ev.module},
                             {"branch_kind", to_string(ev.branch_kind)},
                             {"is_indirect", ev.is_indirect}};
    if (ev.target) j["target"] = to_hex(*ev.target);
    out << j.dump() << '\n';
}

inline void write_trace(std::ostream& out, const Trace& t) {
    out << kFormatVersion << '\n';
    for (const auto& ev : t.events) write_event(out, ev);
}

/// Streaming module filter: drops events whose module matches any glob
/// (case-insensitive, `*`/`?`) and re-stitches each surviving event's
/// target to the next surviving event of the same thread. One event per
/// thread is held back until its successor arrives; call finish() to flush
/// the per-thread tails (their target is cleared). With no globs at all
/// the filter is a transparent pass-through.
template <typename Sink>
class ModuleFilter {
public:
    ModuleFilter(std::vector<std::string> exclude_globs, Sink sink)
        : globs_(std::move(exclude_globs)), sink_(std::move(sink)) {}

    void push(TraceEvent&& ev) {
        if (globs_.empty()) {
            sink_(std::move(ev));
            return;
        }
        if (matches_any_glob(globs_, ev.module)) {
            ++excluded_;
            return;
        }
        auto it = pending_.find(ev.thread_id);
        if (it != pending_.end()) {
            it->second.target = ev.address;
            sink_(std::move(it->second));
            it->second = std::move(ev);
        } else {
            pending_.emplace(ev.thread_id, std::move(ev));
        }
    }

    void finish() {
        for (auto& [tid, ev] : pending_) {
            ev.target.reset();
            sink_(std::move(ev));
        }
        pending_.clear();
    }

    std::uint64_t excluded() const { return excluded_; }

private:
    std::vector<std::string> globs_;
    Sink sink_;
    std::map<std::uint64_t, TraceEvent> pending_;
    std::uint64_t excluded_ = 0;
};

/// Materialized variant of ModuleFilter, preserving event order. An empty
/// glob list returns the trace unchanged.
inline Trace filter_modules(const Trace& t, const std::vector<std::string>& exclude_globs) {
    if (exclude_globs.empty()) return t;
    Trace out;
    std::map<std::uint64_t, std::size_t> prev_of_thread;
    for (const auto& ev : t.events) {
        if (matches_any_glob(exclude_globs, ev.module)) continue;
        std::size_t idx = out.events.size();
        out.events.push_back(ev);
        out.events.back().target.reset();
        auto it = prev_of_thread.find(ev.thread_id);
        if (it != prev_of_thread.end()) out.events[it->second].target = ev.address;
        prev_of_thread[ev.thread_id] = idx;
    }
    for (const auto& ev : out.events) out.modules.insert(ev.module);
    if (!out.events.empty()) {
        out.main_module = out.modules.count(t.main_module) ? t.main_module
                                                          : out.events.front().module;
    }
    return out;
}

/// Parses the function-map sidecar. Rows must not overlap; entries come
/// back sorted by start address.
inline FunctionMap parse_function_map(std::istream& in) {
    FunctionMap fmap;
    std::string line;
    std::size_t line_no = 0;
    std::vector<std::pair<FunctionSpan, std::size_t>> rows;
    while (std::getline(in, line)) {
        ++line_no;
        std::string_view t = trim(line);
        if (t.empty()) continue;
        if (t.front() == '#') {
            detail::check_comment(t, line_no);
            continue;
        }
        auto fields = csv::split(t);
        if (line_no == 1 || rows.empty()) {
            // tolerate a literal header row
            if (fields.size() >= 3 && fields[0] == "name" && fields[1] == "start" &&
                fields[2] == "end")
                continue;
        }
        if (fields.size() < 3) throw RangeError(line_no, "expected name,start,end");
        auto start = parse_addr(fields[1]);
        auto end = parse_addr(fields[2]);
        if (!start || !end) throw RangeError(line_no, "bad address");
        if (*start >= *end) throw RangeError(line_no, "start must be below end");
        rows.push_back({FunctionSpan{fields[0], *start, *end}, line_no});
    }
    std::stable_sort(rows.begin(), rows.end(),
                     [](const auto& a, const auto& b) { return a.first.start < b.first.start; });
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i - 1].first.end > rows[i].first.start)
            throw OverlapError(rows[i - 1].first.name, rows[i].first.name);
    }
    fmap.entries.reserve(rows.size());
    for (auto& [span, ln] : rows) fmap.entries.push_back(std::move(span));
    return fmap;
}

} // namespace xeno::trace
