// xenoscan: payload fragmentation scanning and trace complexity metrics
// for PE binaries. Subcommands: scan, pestats, metrics, igraph, aggregate.
//
// Exit codes: 0 = analysis completed (whatever the result says),
// 2 = unusable input (unreadable file, malformed PE, bad trace, ...).

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "xeno/xeno.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct GlobalOpts {
    std::string format = "csv";
    std::string out;
    std::size_t jobs = 1;
};

void emit(const GlobalOpts& g, const std::string& text) {
    if (g.out.empty()) {
        std::cout << text;
        if (!text.empty() && text.back() != '\n') std::cout << '\n';
    } else {
        std::string t = text;
        if (!t.empty() && t.back() != '\n') t += '\n';
        xeno::save_file(g.out, t);
    }
}

/// Runs fn(0..count) on up to `jobs` worker threads; results land in input
/// order and the first failure (by input order) is rethrown.
template <typename Fn>
std::vector<std::string> run_jobs(std::size_t jobs, std::size_t count, Fn&& fn) {
    std::vector<std::string> results(count);
    std::vector<std::exception_ptr> errors(count);
    std::size_t nthreads = std::max<std::size_t>(1, std::min(jobs, count));
    if (nthreads <= 1) {
        for (std::size_t i = 0; i < count; ++i) results[i] = fn(i);
        return results;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(nthreads);
    for (std::size_t t = 0; t < nthreads; ++t) {
        pool.emplace_back([&] {
            for (;;) {
                std::size_t i = next.fetch_add(1);
                if (i >= count) return;
                try {
                    results[i] = fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return results;
}

std::vector<std::string> clean_globs(std::vector<std::string> globs) {
    std::erase_if(globs, [](const std::string& g) { return xeno::trim(g).empty(); });
    return globs;
}

std::string join_rows(const std::string& header, const std::vector<std::string>& rows) {
    std::string out = header + "\n";
    for (const auto& r : rows) out += r + "\n";
    return out;
}

std::string render_objects(std::vector<ordered_json> objects) {
    if (objects.size() == 1) return objects.front().dump(2);
    ordered_json arr = ordered_json::array();
    for (auto& o : objects) arr.push_back(std::move(o));
    return arr.dump(2);
}

// --- scan ---

struct ScanOpts {
    std::vector<std::string> binaries;
    std::string payload;
    std::string language, compiler, sample_id;
    xeno::frag::ScanParams params;
    bool dump_config = false;
};

int cmd_scan(const GlobalOpts& g, const ScanOpts& o) {
    if (o.dump_config) {
        ordered_json j{{"max_gap", o.params.max_gap},
                       {"min_chunk", o.params.min_chunk},
                       {"reverse", o.params.reverse},
                       {"confidence_threshold", o.params.confidence_threshold}};
        emit(g, j.dump(2));
        return 0;
    }
    if (o.binaries.empty()) throw xeno::InvalidArgument("scan requires --binary");
    if (o.payload.empty()) throw xeno::InvalidArgument("scan requires --payload");
    auto needle = xeno::load_file(o.payload);

    auto scan_one = [&](std::size_t i) {
        xeno::pe::PeImage image = xeno::pe::parse_pe_file(o.binaries[i]);
        return xeno::frag::scan_binary(image, needle, o.params);
    };
    if (g.format == "json") {
        std::vector<ordered_json> objects(o.binaries.size());
        run_jobs(g.jobs, o.binaries.size(), [&](std::size_t i) {
            xeno::frag::FragmentationReport rep = scan_one(i);
            ordered_json j{{"kind", "scan"}, {"path", o.binaries[i]}};
            if (!o.sample_id.empty()) j["sample_id"] = o.sample_id;
            j["language"] = o.language;
            j["compiler"] = o.compiler;
            j.update(xeno::frag::to_json(rep));
            objects[i] = std::move(j);
            return std::string();
        });
        emit(g, render_objects(std::move(objects)));
    } else {
        auto rows = run_jobs(g.jobs, o.binaries.size(), [&](std::size_t i) {
            return xeno::frag::table3_csv_row(o.language, o.compiler, scan_one(i));
        });
        emit(g, join_rows(xeno::frag::table3_csv_header(), rows));
    }
    return 0;
}

// --- pestats ---

int cmd_pestats(const GlobalOpts& g, const std::vector<std::string>& binaries) {
    auto stats_one = [&](std::size_t i) {
        return xeno::pe::structural_stats(xeno::pe::parse_pe_file(binaries[i]));
    };
    if (g.format == "json") {
        std::vector<ordered_json> objects(binaries.size());
        run_jobs(g.jobs, binaries.size(), [&](std::size_t i) {
            ordered_json j{{"kind", "pestats"}};
            j.update(xeno::pe::to_json(stats_one(i)));
            objects[i] = std::move(j);
            return std::string();
        });
        emit(g, render_objects(std::move(objects)));
    } else {
        auto rows = run_jobs(g.jobs, binaries.size(), [&](std::size_t i) {
            return xeno::pe::stats_csv_row(stats_one(i));
        });
        emit(g, join_rows(xeno::pe::stats_csv_header(), rows));
    }
    return 0;
}

// --- metrics ---

struct TraceOpts {
    std::string trace_path;
    std::string functions_path;
    std::vector<std::string> exclude;
    std::string language, compiler, sample_id;
    bool per_function = false;
    std::string dot_path;
};

template <typename Consumer>
void stream_trace(const std::string& path, const std::vector<std::string>& exclude,
                  Consumer&& consumer) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw xeno::IoError("cannot open " + path);
    xeno::trace::ModuleFilter filter(exclude, std::forward<Consumer>(consumer));
    xeno::trace::read_events(in, [&](xeno::trace::TraceEvent&& ev) { filter.push(std::move(ev)); });
    filter.finish();
}

int cmd_metrics(const GlobalOpts& g, const TraceOpts& o) {
    std::ifstream fin(o.functions_path, std::ios::binary);
    if (!fin) throw xeno::IoError("cannot open " + o.functions_path);
    xeno::trace::FunctionMap fmap = xeno::trace::parse_function_map(fin);

    xeno::cfg::MetricsBuilder builder(fmap);
    stream_trace(o.trace_path, clean_globs(o.exclude),
                 [&](xeno::trace::TraceEvent&& ev) { builder.add(ev); });
    xeno::cfg::TraceMetrics m = builder.metrics();

    if (g.format == "json") {
        ordered_json j{{"kind", "metrics"}};
        if (!o.sample_id.empty()) j["sample_id"] = o.sample_id;
        j["language"] = o.language;
        j["compiler"] = o.compiler;
        j.update(xeno::cfg::to_json(m));
        if (o.per_function) {
            ordered_json funcs = ordered_json::array();
            for (const auto& fm : builder.function_metrics())
                funcs.push_back(xeno::cfg::to_json(fm));
            j["functions"] = std::move(funcs);
        }
        emit(g, j.dump(2));
    } else {
        emit(g, join_rows(xeno::cfg::table4_csv_header(),
                          {xeno::cfg::table4_csv_row(o.language, o.compiler, m)}));
    }
    return 0;
}

// --- igraph ---

int cmd_igraph(const GlobalOpts& g, const TraceOpts& o) {
    xeno::ig::GraphBuilder builder;
    stream_trace(o.trace_path, clean_globs(o.exclude),
                 [&](xeno::trace::TraceEvent&& ev) { builder.add(ev); });
    xeno::ig::IndirectionGraph graph = builder.finish();
    xeno::ig::EntropyStats entropy = xeno::ig::edge_entropy(graph);

    if (!o.dot_path.empty()) xeno::save_file(o.dot_path, xeno::ig::export_dot(graph));

    if (g.format == "dot") {
        emit(g, xeno::ig::export_dot(graph));
    } else if (g.format == "json") {
        ordered_json j{{"kind", "igraph"}};
        if (!o.sample_id.empty()) j["sample_id"] = o.sample_id;
        j["language"] = o.language;
        j.update(xeno::ig::to_json(graph, entropy));
        emit(g, j.dump(2));
    } else {
        emit(g, join_rows(xeno::ig::table5_csv_header(),
                          {xeno::ig::table5_csv_row(o.language, graph, entropy)}));
    }
    return 0;
}

// --- aggregate ---

struct AggregateOpts {
    std::string manifest_path;
    std::string results_dir;
    std::string out_dir = ".";
    std::string group_by = "language";
    std::int64_t low_threshold = 5;
};

struct CollectedResults {
    std::map<std::string, xeno::frag::FragmentationReport> scans;
    std::map<std::string, xeno::cfg::TraceMetrics> metrics;
    std::map<std::string, xeno::report::IgraphRow> igraphs;
};

void ingest_result(CollectedResults& acc, const ordered_json& j, const std::string& file) {
    if (!j.is_object() || !j.contains("kind") || !j.contains("sample_id"))
        throw xeno::Error("result object in " + file + " lacks kind/sample_id");
    std::string kind = j["kind"];
    std::string id = j["sample_id"];
    if (kind == "scan") {
        if (acc.scans.count(id)) throw xeno::Error("duplicate scan result for " + id);
        xeno::frag::FragmentationReport rep;
        auto cls = xeno::frag::fragmentation_from_string(j.value("classification", "N/A"));
        if (!cls) throw xeno::Error("bad classification in " + file);
        rep.classification = *cls;
        rep.matched_ratio = j.value("matched_ratio", 0.0);
        rep.section_stored = j.value("section_stored", std::vector<std::string>{});
        acc.scans.emplace(id, std::move(rep));
    } else if (kind == "metrics") {
        if (acc.metrics.count(id)) throw xeno::Error("duplicate metrics result for " + id);
        xeno::cfg::TraceMetrics m;
        m.num_functions = j.value("num_functions", std::size_t{0});
        m.num_functions_executed = j.value("num_functions_executed", std::size_t{0});
        m.avg_func_size_bytes = j.value("avg_func_size_bytes", 0.0);
        m.bb_hits = j.value("bb_hits", std::size_t{0});
        m.instr_hits = j.value("instr_hits", std::size_t{0});
        m.cc_avg = j.value("cc_avg", 0.0);
        m.ind_jmps = j.value("ind_jmps", std::size_t{0});
        m.ind_calls = j.value("ind_calls", std::size_t{0});
        m.threads = j.value("threads", std::size_t{0});
        acc.metrics.emplace(id, m);
    } else if (kind == "igraph") {
        if (acc.igraphs.count(id)) throw xeno::Error("duplicate igraph result for " + id);
        xeno::report::IgraphRow r;
        r.num_nodes = j.value("num_nodes", std::size_t{0});
        r.num_edges = j.value("num_edges", std::size_t{0});
        r.total_traversals = j.value("total_traversals", std::uint64_t{0});
        r.total_ind_calls = j.value("total_ind_calls", std::uint64_t{0});
        r.total_ind_jumps = j.value("total_ind_jumps", std::uint64_t{0});
        r.normalized_entropy = j.value("normalized_entropy", 0.0);
        acc.igraphs.emplace(id, r);
    } else if (kind == "pestats") {
        // structural stats have no joined table; ignore
    } else {
        throw xeno::Error("unknown result kind '" + kind + "' in " + file);
    }
}

CollectedResults collect_results(const std::string& dir) {
    CollectedResults acc;
    if (dir.empty()) return acc;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".json")
            files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
        std::ifstream in(file);
        if (!in) throw xeno::IoError("cannot open " + file.string());
        ordered_json j = ordered_json::parse(in, nullptr, true, true);
        if (j.is_array()) {
            for (const auto& item : j) ingest_result(acc, item, file.string());
        } else {
            ingest_result(acc, j, file.string());
        }
    }
    return acc;
}

int cmd_aggregate(const AggregateOpts& o) {
    std::ifstream in(o.manifest_path, std::ios::binary);
    if (!in) throw xeno::IoError("cannot open " + o.manifest_path);
    xeno::report::CorpusManifest manifest = xeno::report::load_manifest(in);

    auto group_by = o.group_by == "language_compiler" ? xeno::report::GroupBy::LanguageCompiler
                                                      : xeno::report::GroupBy::Language;
    auto summaries = xeno::report::summarize(manifest, group_by, o.low_threshold);
    std::string summary = xeno::report::summary_csv_header() + "\n";
    for (const auto& s : summaries) summary += xeno::report::summary_csv_row(s) + "\n";

    CollectedResults results = collect_results(o.results_dir);
    xeno::report::JoinedTables tables =
        xeno::report::join_results(manifest, results.scans, results.metrics, results.igraphs);

    fs::path out_dir(o.out_dir);
    fs::create_directories(out_dir);
    xeno::save_file(out_dir / "summary.csv", summary);
    xeno::save_file(out_dir / "table3.csv", tables.table3);
    xeno::save_file(out_dir / "table4.csv", tables.table4);
    xeno::save_file(out_dir / "table5.csv", tables.table5);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Payload fragmentation scanning and trace complexity metrics for PE binaries"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    GlobalOpts g;
    app.add_option("--format", g.format, "Output format")
        ->check(CLI::IsMember({"csv", "json", "dot"}));
    app.add_option("--out", g.out, "Write output to this file instead of stdout");
    app.add_option("--jobs", g.jobs, "Analyze multiple input files concurrently");

    ScanOpts scan;
    auto* scan_cmd = app.add_subcommand("scan", "Locate a payload byte pattern inside binaries");
    scan_cmd->add_option("--binary", scan.binaries, "PE file(s) to scan")->take_all();
    scan_cmd->add_option("--payload", scan.payload, "Raw payload bytes to look for");
    scan_cmd->add_option("--max-gap", scan.params.max_gap,
                         "Maximum junk bytes between consecutive matched payload bytes");
    scan_cmd->add_option("--min-chunk", scan.params.min_chunk,
                         "Smallest run of matched bytes that counts as a chunk");
    scan_cmd->add_flag("--reverse", scan.params.reverse,
                       "Also match the payload in reversed byte order");
    scan_cmd->add_option("--threshold", scan.params.confidence_threshold,
                         "Matched ratio below which the result is N/A");
    scan_cmd->add_option("--language", scan.language, "Language column for the CSV row");
    scan_cmd->add_option("--compiler", scan.compiler, "Compiler column for the CSV row");
    scan_cmd->add_option("--sample-id", scan.sample_id, "Sample id recorded in JSON output");
    scan_cmd->add_flag("--dump-config", scan.dump_config,
                       "Print the effective scan parameters as JSON and exit");

    std::vector<std::string> pestats_binaries;
    auto* pestats_cmd = app.add_subcommand("pestats", "Structural statistics of PE files");
    pestats_cmd->add_option("--binary", pestats_binaries, "PE file(s)")
        ->required()
        ->take_all();

    const std::vector<std::string> default_exclude{"ntdll*", "kernel32*", "kernelbase*",
                                                   "ucrtbase*", "msvcrt*"};
    TraceOpts metrics;
    metrics.exclude = default_exclude;
    auto* metrics_cmd =
        app.add_subcommand("metrics", "Reverse-engineering metrics from an instruction trace");
    metrics_cmd->add_option("--trace", metrics.trace_path, "xeno-trace v1 JSONL file")->required();
    metrics_cmd->add_option("--functions", metrics.functions_path, "Function map CSV (name,start,end)")
        ->required();
    metrics_cmd->add_option("--exclude-module", metrics.exclude,
                            "Module globs to drop before measuring")
        ->delimiter(',');
    metrics_cmd->add_option("--language", metrics.language, "Language column");
    metrics_cmd->add_option("--compiler", metrics.compiler, "Compiler column");
    metrics_cmd->add_option("--sample-id", metrics.sample_id, "Sample id recorded in JSON output");
    metrics_cmd->add_flag("--per-function", metrics.per_function,
                          "Include per-function rows in JSON output");

    TraceOpts igraph;
    igraph.exclude = default_exclude;
    auto* igraph_cmd =
        app.add_subcommand("igraph", "Indirect jmp/call graph and edge entropy from a trace");
    igraph_cmd->add_option("--trace", igraph.trace_path, "xeno-trace v1 JSONL file")->required();
    igraph_cmd->add_option("--exclude-module", igraph.exclude,
                           "Module globs to drop before measuring")
        ->delimiter(',');
    igraph_cmd->add_option("--dot", igraph.dot_path, "Also write the graph as DOT to this file");
    igraph_cmd->add_option("--language", igraph.language, "Language column");
    igraph_cmd->add_option("--sample-id", igraph.sample_id, "Sample id recorded in JSON output");

    AggregateOpts agg;
    auto* agg_cmd =
        app.add_subcommand("aggregate", "Corpus summaries and joined tables from a manifest");
    agg_cmd->add_option("--manifest", agg.manifest_path, "Corpus manifest CSV")->required();
    agg_cmd->add_option("--results", agg.results_dir,
                        "Directory of per-sample JSON results to join");
    agg_cmd->add_option("--out-dir", agg.out_dir, "Directory for summary.csv and table CSVs");
    agg_cmd->add_option("--group-by", agg.group_by, "Summary grouping")
        ->check(CLI::IsMember({"language", "language_compiler"}));
    agg_cmd->add_option("--low-threshold", agg.low_threshold,
                        "Detections below this count as low-detection");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (scan_cmd->parsed()) return cmd_scan(g, scan);
        if (pestats_cmd->parsed()) return cmd_pestats(g, pestats_binaries);
        if (metrics_cmd->parsed()) return cmd_metrics(g, metrics);
        if (igraph_cmd->parsed()) return cmd_igraph(g, igraph);
        if (agg_cmd->parsed()) return cmd_aggregate(agg);
    } catch (const std::exception& e) {
        std::cerr << "xenoscan: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
