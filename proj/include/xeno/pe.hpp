#pragma once

// Structural model of a PE executable: section table, import directory,
// entry point. Parsing is read-only over the raw bytes; the model keeps
// the bytes so later passes (pattern scans, offset attribution) work on
// the same buffer. Malformed-but-loadable files (virtual_size > raw_size,
// raw ranges sticking past EOF) are accepted with ranges clamped to the
// file; only header-level defects raise MalformedPe.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "xeno/csv.hpp"
#include "xeno/error.hpp"
#include "xeno/util.hpp"

namespace xeno::pe {

enum class Machine { x86, x64, other };

inline const char* to_string(Machine m) {
    switch (m) {
        case Machine::x86: return "x86";
        case Machine::x64: return "x64";
        default: return "other";
    }
}

struct Section {
    std::string name; // NUL-trimmed, disambiguated with "#<n>" on duplicates
    std::uint64_t raw_offset = 0;
    std::uint64_t raw_size = 0; // clamped so raw_offset + raw_size <= file_size
    std::uint64_t virtual_address = 0;
    std::uint64_t virtual_size = 0;
    std::uint32_t characteristics = 0;

    bool readable() const { return characteristics & 0x40000000u; }
    bool writable() const { return characteristics & 0x80000000u; }
    bool executable() const { return characteristics & 0x20000000u; }

    /// Loaded extent used for RVA containment; packers routinely declare
    /// virtual_size 0 and rely on raw_size.
    std::uint64_t virtual_span() const { return virtual_size ? virtual_size : raw_size; }
};

struct ImportedLibrary {
    std::string dll_name; // case-folded
    std::vector<std::string> function_names; // ordinal-only imports as "#<ordinal>"
};

struct PeImage {
    std::string path;
    std::vector<std::uint8_t> raw;
    std::vector<Section> sections;
    std::vector<ImportedLibrary> imports;
    std::uint64_t entry_point_rva = 0;
    Machine machine = Machine::other;
    std::uint64_t file_size = 0;

    std::span<const std::uint8_t> bytes() const { return raw; }
};

struct StructuralStats {
    std::string path;
    std::uint64_t num_sections = 0;
    std::uint64_t num_dlls = 0;
    std::uint64_t file_size = 0;
    std::string entry_section; // "none" when the entry RVA is out of section
};

namespace detail {

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

    std::uint16_t u16(std::size_t off) const {
        check(off, 2);
        return static_cast<std::uint16_t>(data_[off]) |
               static_cast<std::uint16_t>(data_[off + 1]) << 8;
    }
    std::uint32_t u32(std::size_t off) const {
        check(off, 4);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = v << 8 | data_[off + static_cast<std::size_t>(i)];
        return v;
    }
    std::uint64_t u64(std::size_t off) const {
        check(off, 8);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = v << 8 | data_[off + static_cast<std::size_t>(i)];
        return v;
    }
    bool in_bounds(std::size_t off, std::size_t len) const {
        return off <= data_.size() && len <= data_.size() - off;
    }
    /// NUL-terminated string, bounded by end of file.
    std::string cstr(std::size_t off, std::size_t max_len = 4096) const {
        std::string out;
        for (std::size_t i = off; i < data_.size() && out.size() < max_len; ++i) {
            if (data_[i] == 0) break;
            out += static_cast<char>(data_[i]);
        }
        return out;
    }
    std::size_t size() const { return data_.size(); }

private:
    void check(std::size_t off, std::size_t len) const {
        if (!in_bounds(off, len)) throw MalformedPe(off, "read past end of file");
    }
    std::span<const std::uint8_t> data_;
};

inline std::string section_name(const std::uint8_t* p) {
    char buf[9] = {};
    std::memcpy(buf, p, 8);
    std::string name(buf, strnlen(buf, 8));
    return name;
}

inline void disambiguate_names(std::vector<Section>& sections) {
    std::set<std::string> seen;
    std::map<std::string, int> count;
    for (auto& s : sections) {
        int n = ++count[s.name];
        if (n == 1 && !seen.count(s.name)) {
            seen.insert(s.name);
            continue;
        }
        std::string candidate;
        do {
            candidate = s.name + "#" + std::to_string(n++);
        } while (seen.count(candidate));
        s.name = candidate;
        seen.insert(candidate);
    }
}

/// RVA -> file offset through the section table; nullopt when the RVA has
/// no backing bytes in the file.
inline std::optional<std::size_t> rva_to_offset(const std::vector<Section>& sections,
                                                std::uint64_t rva) {
    for (const auto& s : sections) {
        if (rva >= s.virtual_address && rva < s.virtual_address + s.virtual_span()) {
            std::uint64_t delta = rva - s.virtual_address;
            if (delta >= s.raw_size) return std::nullopt; // virtual-only tail
            return static_cast<std::size_t>(s.raw_offset + delta);
        }
    }
    return std::nullopt;
}

// Import directory walk. Inconsistencies inside the directory (RVAs with no
// file backing, unterminated tables) end the walk with whatever parsed so
// far; packed files get this wrong constantly and the rest of the model is
// still usable.
inline std::vector<ImportedLibrary> parse_imports(const Reader& r,
                                                  const std::vector<Section>& sections,
                                                  std::uint64_t import_rva, bool pe32plus) {
    std::vector<ImportedLibrary> imports;
    if (import_rva == 0) return imports;
    auto dir = rva_to_offset(sections, import_rva);
    if (!dir) return imports;

    const std::size_t descriptor_size = 20;
    for (std::size_t idx = 0;; ++idx) {
        std::size_t off = *dir + idx * descriptor_size;
        if (!r.in_bounds(off, descriptor_size)) break;
        std::uint32_t original_first_thunk = r.u32(off);
        std::uint32_t name_rva = r.u32(off + 12);
        std::uint32_t first_thunk = r.u32(off + 16);
        if (original_first_thunk == 0 && name_rva == 0 && first_thunk == 0) break;

        auto name_off = rva_to_offset(sections, name_rva);
        if (!name_off) break;
        ImportedLibrary lib;
        lib.dll_name = ascii_lower(r.cstr(*name_off, 512));
        if (lib.dll_name.empty()) break;

        std::uint32_t thunk_rva = original_first_thunk ? original_first_thunk : first_thunk;
        auto thunk_off = rva_to_offset(sections, thunk_rva);
        const std::size_t entry_size = pe32plus ? 8 : 4;
        if (thunk_off) {
            for (std::size_t t = 0;; ++t) {
                std::size_t toff = *thunk_off + t * entry_size;
                if (!r.in_bounds(toff, entry_size)) break;
                std::uint64_t entry = pe32plus ? r.u64(toff) : r.u32(toff);
                if (entry == 0) break;
                std::uint64_t ordinal_flag = pe32plus ? 1ull << 63 : 1ull << 31;
                if (entry & ordinal_flag) {
                    lib.function_names.push_back("#" + std::to_string(entry & 0xffff));
                } else {
                    auto hint_off = rva_to_offset(sections, entry & 0x7fffffff);
                    if (!hint_off) break;
                    lib.function_names.push_back(r.cstr(*hint_off + 2, 512));
                }
            }
        }
        imports.push_back(std::move(lib));
    }
    return imports;
}

} // namespace detail

/// Parses raw file bytes into the structural model. Throws MalformedPe on
/// missing MZ/PE signatures, truncated headers, or a section table that
/// runs past the end of the file.
inline PeImage parse_pe(std::vector<std::uint8_t> bytes, std::string path = "") {
    if (bytes.size() < 64) throw MalformedPe(0, "file smaller than a DOS header");
    detail::Reader r(bytes);
    if (r.u16(0) != 0x5a4d) throw MalformedPe(0, "missing MZ signature");
    std::uint32_t e_lfanew = r.u32(0x3c);
    if (!r.in_bounds(e_lfanew, 4) || r.u32(e_lfanew) != 0x00004550)
        throw MalformedPe(e_lfanew, "missing PE signature");

    std::size_t file_header = e_lfanew + 4;
    if (!r.in_bounds(file_header, 20)) throw MalformedPe(file_header, "truncated file header");
    std::uint16_t machine_raw = r.u16(file_header);
    std::uint16_t num_sections = r.u16(file_header + 2);
    std::uint16_t opt_size = r.u16(file_header + 16);

    std::size_t opt = file_header + 20;
    if (opt_size < 2 || !r.in_bounds(opt, opt_size))
        throw MalformedPe(opt, "truncated optional header");
    std::uint16_t magic = r.u16(opt);
    bool pe32plus;
    if (magic == 0x10b) pe32plus = false;
    else if (magic == 0x20b) pe32plus = true;
    else throw MalformedPe(opt, "unknown optional header magic");
    if (opt_size < (pe32plus ? 0x70u : 0x60u))
        throw MalformedPe(opt, "optional header too small");

    PeImage image;
    image.path = std::move(path);
    image.file_size = bytes.size();
    image.entry_point_rva = r.u32(opt + 0x10);
    switch (machine_raw) {
        case 0x014c: image.machine = Machine::x86; break;
        case 0x8664: image.machine = Machine::x64; break;
        default: image.machine = Machine::other; break;
    }

    std::size_t num_dirs_off = opt + (pe32plus ? 0x6c : 0x5c);
    std::uint32_t num_dirs = r.in_bounds(num_dirs_off, 4) ? r.u32(num_dirs_off) : 0;
    std::uint64_t import_rva = 0;
    if (num_dirs >= 2) {
        std::size_t dirs = opt + (pe32plus ? 0x70 : 0x60);
        if (r.in_bounds(dirs + 8, 4)) import_rva = r.u32(dirs + 8);
    }

    std::size_t table = opt + opt_size;
    for (std::size_t i = 0; i < num_sections; ++i) {
        std::size_t off = table + i * 40;
        if (!r.in_bounds(off, 40)) throw MalformedPe(off, "section table overflows file");
        Section s;
        s.name = detail::section_name(bytes.data() + off);
        s.virtual_size = r.u32(off + 8);
        s.virtual_address = r.u32(off + 12);
        s.raw_size = r.u32(off + 16);
        s.raw_offset = r.u32(off + 20);
        s.characteristics = r.u32(off + 36);
        if (s.raw_offset >= image.file_size) {
            s.raw_size = 0;
        } else if (s.raw_offset + s.raw_size > image.file_size) {
            s.raw_size = image.file_size - s.raw_offset;
        }
        image.sections.push_back(std::move(s));
    }
    detail::disambiguate_names(image.sections);

    image.imports = detail::parse_imports(r, image.sections, import_rva, pe32plus);
    image.raw = std::move(bytes);
    return image;
}

inline PeImage parse_pe_file(const std::filesystem::path& path) {
    return parse_pe(load_file(path), path.string());
}

/// Name of the section containing the entry point RVA, or "none".
inline std::string entry_section(const PeImage& image) {
    for (const auto& s : image.sections) {
        if (image.entry_point_rva >= s.virtual_address &&
            image.entry_point_rva < s.virtual_address + s.virtual_span()) {
            return s.name;
        }
    }
    return "none";
}

inline StructuralStats structural_stats(const PeImage& image) {
    StructuralStats st;
    st.path = image.path;
    st.num_sections = image.sections.size();
    std::set<std::string> dlls;
    for (const auto& lib : image.imports) dlls.insert(lib.dll_name);
    st.num_dlls = dlls.size();
    st.file_size = image.file_size;
    st.entry_section = entry_section(image);
    return st;
}

/// Labels a file offset with the section that stores it. Offsets before
/// the first section's raw data are "header"; offsets past the last
/// section's raw data are "overlay". Slack between two sections is
/// attributed to the preceding section so that every offset in
/// [0, file_size) gets exactly one label.
inline std::string section_of(const PeImage& image, std::uint64_t file_offset) {
    if (file_offset >= image.file_size) throw OffsetOutOfFile(file_offset, image.file_size);

    std::vector<const Section*> stored;
    for (const auto& s : image.sections)
        if (s.raw_size > 0) stored.push_back(&s);
    std::stable_sort(stored.begin(), stored.end(),
                     [](const Section* a, const Section* b) { return a->raw_offset < b->raw_offset; });

    if (stored.empty()) return "header";
    if (file_offset < stored.front()->raw_offset) return "header";

    const Section* preceding = nullptr;
    for (const Section* s : stored) {
        if (s->raw_offset > file_offset) break;
        if (file_offset < s->raw_offset + s->raw_size) return s->name;
        preceding = s;
    }
    if (preceding == stored.back() && file_offset >= preceding->raw_offset + preceding->raw_size)
        return "overlay";
    return preceding->name; // inter-section slack
}

// --- output schemas ---

inline std::string stats_csv_header() {
    return "path,num_sections,num_dlls,file_size,entry_section";
}

inline std::string stats_csv_row(const StructuralStats& st) {
    return csv::join({st.path, std::to_string(st.num_sections), std::to_string(st.num_dlls),
                      std::to_string(st.file_size), st.entry_section});
}

inline nlohmann::ordered_json to_json(const StructuralStats& st) {
    return {{"path", st.path},
            {"num_sections", st.num_sections},
            {"num_dlls", st.num_dlls},
            {"file_size", st.file_size},
            {"entry_section", st.entry_section}};
}

} // namespace xeno::pe
