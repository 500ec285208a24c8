#include <catch_amalgamated.hpp>

#include <fstream>
#include <random>
#include <sstream>

#include "support/oracles.hpp"
#include "support/trace_gen.hpp"
#include "xeno/cfg_metrics.hpp"
#include "xeno/trace.hpp"

using namespace xeno;
using testsupport::EventLine;
using testsupport::trace_text;

namespace {

trace::Trace parse_text(const std::string& text) {
    std::istringstream in(text);
    return trace::parse_trace(in);
}

trace::FunctionMap fmap_of(const std::string& csv) {
    std::istringstream in(csv);
    return trace::parse_function_map(in);
}

trace::Trace load_worked_trace() {
    std::ifstream in(std::string(XENO_TEST_DATA_DIR) + "/worked_trace.jsonl");
    REQUIRE(in);
    return trace::parse_trace(in);
}

trace::FunctionMap load_worked_fmap() {
    std::ifstream in(std::string(XENO_TEST_DATA_DIR) + "/worked_functions.csv");
    REQUIRE(in);
    return trace::parse_function_map(in);
}

/// One loop function executed `iterations` times: 0x500,0x504,0x508(cond)
/// looping back, then the fall-through exit 0x50c.
trace::Trace loop_trace(int iterations) {
    std::vector<EventLine> events;
    for (int i = 0; i < iterations; ++i) {
        bool last = i + 1 == iterations;
        events.push_back({1, 0x500, 4, "app.exe", "none", false, 0x504});
        events.push_back({1, 0x504, 4, "app.exe", "none", false, 0x508});
        events.push_back({1, 0x508, 4, "app.exe", "cond", false,
                          last ? std::uint64_t{0x50c} : std::uint64_t{0x500}});
    }
    events.push_back({1, 0x50c, 4, "app.exe", "none", false, std::nullopt});
    return parse_text(trace_text(events));
}

const char* kLoopMap = "loop,0x500,0x520\n";

} // namespace

TEST_CASE("straight-line run is one block with no edges") {
    std::vector<EventLine> events;
    for (int i = 0; i < 5; ++i)
        events.push_back({1, 0x1000 + std::uint64_t(i) * 2, 2, "app.exe", "none", false,
                          0x1000 + std::uint64_t(i + 1) * 2});
    events.back().target.reset();
    auto t = parse_text(trace_text(events));
    auto graphs = cfg::segment_blocks(t, fmap_of("f,0x1000,0x1040\n"));
    REQUIRE(graphs.size() == 1);
    CHECK(graphs[0].name == "f");
    REQUIRE(graphs[0].blocks.size() == 1);
    CHECK(graphs[0].blocks[0].instr_addresses.size() == 5);
    CHECK(graphs[0].blocks[0].start == 0x1000);
    CHECK(graphs[0].blocks[0].end == 0x100a);
    CHECK(graphs[0].edges.empty());
}

TEST_CASE("a conditional observed both ways over two runs: 3 blocks, 2 edges") {
    // caller g invokes f twice; run 1 takes the branch, run 2 falls through
    std::vector<EventLine> events{
        {1, 0xA00, 5, "app.exe", "call", false, 0x100},
        {1, 0x100, 2, "app.exe", "none", false, 0x102},
        {1, 0x102, 2, "app.exe", "cond", false, 0x110},
        {1, 0x110, 2, "app.exe", "none", false, 0x112},
        {1, 0x112, 2, "app.exe", "ret", false, 0xA05},
        {1, 0xA05, 5, "app.exe", "call", false, 0x100},
        {1, 0x100, 2, "app.exe", "none", false, 0x102},
        {1, 0x102, 2, "app.exe", "cond", false, 0x104},
        {1, 0x104, 2, "app.exe", "none", false, 0x106},
        {1, 0x106, 2, "app.exe", "ret", false, 0xA0A},
        {1, 0xA0A, 2, "app.exe", "none", false, 0xA0C},
        {1, 0xA0C, 2, "app.exe", "none", false, std::nullopt},
    };
    REQUIRE(events.size() == 12);
    auto t = parse_text(trace_text(events));
    auto graphs = cfg::segment_blocks(t, fmap_of("f,0x100,0x140\ng,0xA00,0xA10\n"));
    REQUIRE(graphs.size() == 2);
    const auto& f = graphs[0];
    CHECK(f.name == "f");
    REQUIRE(f.blocks.size() == 3);
    CHECK(f.blocks[0].start == 0x100);
    CHECK(f.blocks[1].start == 0x104);
    CHECK(f.blocks[2].start == 0x110);
    CHECK(f.edges == std::set<std::pair<std::size_t, std::size_t>>{{0, 1}, {0, 2}});
    CHECK(cfg::cyclomatic(f.blocks.size(), f.edges) == 1);
}

TEST_CASE("a loop run 100 times equals the 2-iteration run plus nothing new") {
    auto fmap = fmap_of(kLoopMap);
    auto g2 = cfg::segment_blocks(loop_trace(2), fmap);
    auto g100 = cfg::segment_blocks(loop_trace(100), fmap);
    REQUIRE(g2.size() == 1);
    REQUIRE(g100.size() == 1);
    REQUIRE(g2[0].blocks.size() == g100[0].blocks.size());
    for (std::size_t i = 0; i < g2[0].blocks.size(); ++i) {
        CHECK(g2[0].blocks[i].start == g100[0].blocks[i].start);
        CHECK(g2[0].blocks[i].instr_addresses == g100[0].blocks[i].instr_addresses);
    }
    CHECK(g2[0].edges == g100[0].edges);
    // the back edge is a self-edge on the loop body block
    CHECK(g2[0].edges.count({0, 0}) == 1);
    CHECK(g2[0].edges.count({0, 1}) == 1);
    CHECK(cfg::cyclomatic(g2[0].blocks.size(), g2[0].edges) == 2);
    CHECK(cfg::compute_metrics(loop_trace(100), fmap).bb_hits ==
          cfg::compute_metrics(loop_trace(1), fmap).bb_hits);
}

TEST_CASE("cyclomatic: linear, diamond, random graphs against the BFS oracle") {
    CHECK(cfg::cyclomatic(1, {}) == 1);
    std::set<std::pair<std::size_t, std::size_t>> diamond{{0, 1}, {0, 2}, {1, 3}, {2, 3}};
    CHECK(cfg::cyclomatic(4, diamond) == 2);

    std::mt19937 rng(31337);
    for (int trial = 0; trial < 100; ++trial) {
        std::size_t n = 1 + rng() % 12;
        std::set<std::pair<std::size_t, std::size_t>> edges;
        std::size_t nedges = rng() % (2 * n);
        for (std::size_t e = 0; e < nedges; ++e) edges.emplace(rng() % n, rng() % n);
        std::size_t p = testsupport::oracle::components_bfs(n, edges);
        CHECK(cfg::cyclomatic(n, edges) == edges.size() - n + 2 * p);
    }
    CHECK_THROWS_AS(cfg::cyclomatic(2, {{0, 5}}), InvalidArgument);
}

TEST_CASE("empty trace: static inventory only") {
    trace::Trace empty;
    auto m = cfg::compute_metrics(empty, load_worked_fmap());
    CHECK(m.num_functions == 3);
    CHECK(m.num_functions_executed == 0);
    CHECK(m.avg_func_size_bytes == 0.0);
    CHECK(m.bb_hits == 0);
    CHECK(m.instr_hits == 0);
    CHECK(m.cc_avg == 0.0);
    CHECK(m.ind_jmps == 0);
    CHECK(m.ind_calls == 0);
    CHECK(m.threads == 0);
}

TEST_CASE("worked 50-event fixture reproduces the hand-computed answer sheet") {
    // Answer sheet (derived by hand from the event list):
    //   functions alpha/beta/gamma in the map          -> num_functions 3
    //   alpha, beta, gamma and <unmapped> all executed -> executed 4
    //   unique addresses: alpha 12, beta 5, gamma 3, unmapped 2 -> instr_hits 22
    //   observed bytes: 48 + 20 + 12 + 4 = 84; 84/4   -> avg_func_size 21.0
    //   blocks: alpha 7, beta 2, gamma 2, unmapped 1  -> bb_hits 12
    //   cc: alpha 4 (E5 N7 P3), beta 1, gamma 1, unmapped 1 -> cc_avg 1.75
    //   indirect sites: jmp 0x2008; calls 0x1014, 0x101c -> 1 jmp, 2 calls
    //   threads 10 and 20                              -> threads 2
    auto t = load_worked_trace();
    auto fmap = load_worked_fmap();
    auto m = cfg::compute_metrics(t, fmap);
    CHECK(m.num_functions == 3);
    CHECK(m.num_functions_executed == 4);
    CHECK(m.avg_func_size_bytes == 21.0);
    CHECK(m.bb_hits == 12);
    CHECK(m.instr_hits == 22);
    CHECK(m.cc_avg == 1.75);
    CHECK(m.ind_jmps == 1);
    CHECK(m.ind_calls == 2);
    CHECK(m.threads == 2);

    auto features = cfg::segment_blocks(t, fmap);
    REQUIRE(features.size() == 4);
    CHECK(features[0].name == "alpha");
    CHECK(features[0].blocks.size() == 7);
    CHECK(features[0].edges.size() == 5);
    CHECK(features[1].name == "beta");
    CHECK(features[1].blocks.size() == 2);
    CHECK(features[1].edges == std::set<std::pair<std::size_t, std::size_t>>{{0, 1}});
    CHECK(features[2].name == "gamma");
    CHECK(features[2].blocks.size() == 2);
    CHECK(features[3].name == "<unmapped>");
    CHECK(features[3].blocks.size() == 1);

    auto rows = [&] {
        cfg::MetricsBuilder b(fmap);
        for (const auto& ev : t.events) b.add(ev);
        return b.function_metrics();
    }();
    REQUIRE(rows.size() == 4);
    CHECK(rows[0].name == "alpha");
    CHECK(rows[0].cc == 4);
    CHECK(rows[0].size_bytes == 48);
    CHECK(rows[1].cc == 1);
    CHECK(rows[2].cc == 1);
    CHECK(rows[3].name == "<unmapped>");
    CHECK(rows[3].cc == 1);

    CHECK(cfg::table4_csv_row("Haskell", "ghc", m) == "Haskell,ghc,3,4,21.00,12,22,1.75,1,2");
    CHECK(cfg::table4_csv_header() ==
          "language,compiler,functions,funcs_exec,avg_func_size,bb_hits,inst_hits,cc,ind_jmps,ind_calls");
}

namespace {

bool metrics_equal(const cfg::TraceMetrics& a, const cfg::TraceMetrics& b) {
    return a.num_functions == b.num_functions &&
           a.num_functions_executed == b.num_functions_executed &&
           a.avg_func_size_bytes == b.avg_func_size_bytes && a.bb_hits == b.bb_hits &&
           a.instr_hits == b.instr_hits && a.cc_avg == b.cc_avg && a.ind_jmps == b.ind_jmps &&
           a.ind_calls == b.ind_calls && a.threads == b.threads;
}

} // namespace

TEST_CASE("duplicating every event changes nothing", "[property]") {
    auto t = load_worked_trace();
    auto fmap = load_worked_fmap();
    trace::Trace doubled;
    std::uint64_t seq = 0;
    for (const auto& ev : t.events) {
        for (int copy = 0; copy < 2; ++copy) {
            doubled.events.push_back(ev);
            doubled.events.back().seq = seq++;
        }
    }
    CHECK(metrics_equal(cfg::compute_metrics(t, fmap), cfg::compute_metrics(doubled, fmap)));
}

TEST_CASE("self-concatenation leaves every field invariant", "[property]") {
    auto t = load_worked_trace();
    auto fmap = load_worked_fmap();
    trace::Trace looped = t;
    std::uint64_t seq_base = 1000;
    std::map<std::uint64_t, std::uint64_t> first_addr;
    for (const auto& ev : t.events) first_addr.try_emplace(ev.thread_id, ev.address);
    // re-stitch the copy-1 tails into copy 2
    for (auto& ev : looped.events)
        if (!ev.target) ev.target = first_addr[ev.thread_id];
    for (const auto& ev : t.events) {
        looped.events.push_back(ev);
        looped.events.back().seq = seq_base + ev.seq;
    }
    CHECK(metrics_equal(cfg::compute_metrics(t, fmap), cfg::compute_metrics(looped, fmap)));
}

TEST_CASE("instruction addresses partition across functions", "[property]") {
    auto t = load_worked_trace();
    auto fmap = load_worked_fmap();
    auto graphs = cfg::segment_blocks(t, fmap);
    std::size_t total = 0;
    std::set<std::uint64_t> all;
    for (const auto& g : graphs) {
        for (const auto& b : g.blocks) {
            total += b.instr_addresses.size();
            all.insert(b.instr_addresses.begin(), b.instr_addresses.end());
        }
    }
    auto m = cfg::compute_metrics(t, fmap);
    CHECK(total == m.instr_hits);
    CHECK(all.size() == m.instr_hits); // no address counted twice
}

TEST_CASE("all straight-line functions average cc exactly 1.0") {
    std::vector<EventLine> events;
    for (std::uint64_t f = 0; f < 3; ++f) {
        std::uint64_t base = 0x1000 + f * 0x100;
        for (int i = 0; i < 4; ++i)
            events.push_back({1, base + std::uint64_t(i) * 2, 2, "app.exe",
                              i == 3 ? "ret" : "none", false, std::nullopt});
    }
    // stitch the targets: each event's successor is simply the next line
    for (std::size_t i = 0; i + 1 < events.size(); ++i) events[i].target = events[i + 1].addr;
    auto t = parse_text(trace_text(events));
    auto m = cfg::compute_metrics(
        t, fmap_of("f0,0x1000,0x1040\nf1,0x1100,0x1140\nf2,0x1200,0x1240\n"));
    CHECK(m.num_functions_executed == 3);
    CHECK(m.cc_avg == 1.0);
    CHECK(m.bb_hits == 3);
}

TEST_CASE("merging disjoint traces sums every unique counter", "[property]") {
    std::mt19937 rng(777);
    auto make = [&](std::uint64_t thread, std::uint64_t base) {
        std::vector<EventLine> events;
        std::uint64_t addr = base;
        for (int i = 0; i < 40; ++i) {
            bool branch = rng() % 4 == 0;
            EventLine e{thread, addr, 2, "app.exe", "none", false, std::nullopt};
            if (branch) {
                bool call = rng() % 2 == 0;
                e.kind = call ? "call" : "jmp";
                e.indirect = true;
                addr = base + (rng() % 64) * 2;
                e.target = addr;
            } else {
                addr += 2;
                e.target = addr;
            }
            events.push_back(e);
        }
        events.back().target.reset();
        if (events.back().indirect) {
            events.back().kind = "none";
            events.back().indirect = false;
        }
        return events;
    };
    auto ea = make(1, 0x1000);
    auto eb = make(2, 0x8000);
    auto fmap = fmap_of("fa,0x1000,0x1100\nfb,0x8000,0x8100\n");
    auto ma = cfg::compute_metrics(parse_text(trace_text(ea)), fmap);
    auto mb = cfg::compute_metrics(parse_text(trace_text(eb)), fmap);
    // interleave the two threads
    std::vector<EventLine> merged;
    for (std::size_t i = 0; i < std::max(ea.size(), eb.size()); ++i) {
        if (i < ea.size()) merged.push_back(ea[i]);
        if (i < eb.size()) merged.push_back(eb[i]);
    }
    auto mm = cfg::compute_metrics(parse_text(trace_text(merged)), fmap);
    CHECK(mm.num_functions_executed == ma.num_functions_executed + mb.num_functions_executed);
    CHECK(mm.bb_hits == ma.bb_hits + mb.bb_hits);
    CHECK(mm.instr_hits == ma.instr_hits + mb.instr_hits);
    CHECK(mm.ind_jmps == ma.ind_jmps + mb.ind_jmps);
    CHECK(mm.ind_calls == ma.ind_calls + mb.ind_calls);
    CHECK(mm.threads == ma.threads + mb.threads);
}
