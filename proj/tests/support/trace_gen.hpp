#pragma once

// Trace fixture helpers: compact event-line construction for handcrafted
// fixtures and a lazy streambuf that synthesizes arbitrarily long looping
// traces without materializing them.

#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <streambuf>

namespace testsupport {

struct EventLine {
    std::uint64_t thread = 1;
    std::uint64_t addr = 0;
    std::uint32_t size = 1;
    const char* module = "app.exe";
    const char* kind = "none";
    bool indirect = false;
    std::optional<std::uint64_t> target;
};

inline std::string event_json(const EventLine& e) {
    char buf[320];
    int len;
    if (e.target) {
        len = std::snprintf(buf, sizeof(buf),
                            "{\"thread_id\":%llu,\"address\":\"0x%llx\",\"size\":%u,"
                            "\"module\":\"%s\",\"branch_kind\":\"%s\",\"is_indirect\":%s,"
                            "\"target\":\"0x%llx\"}",
                            (unsigned long long)e.thread, (unsigned long long)e.addr, e.size,
                            e.module, e.kind, e.indirect ? "true" : "false",
                            (unsigned long long)*e.target);
    } else {
        len = std::snprintf(buf, sizeof(buf),
                            "{\"thread_id\":%llu,\"address\":\"0x%llx\",\"size\":%u,"
                            "\"module\":\"%s\",\"branch_kind\":\"%s\",\"is_indirect\":%s}",
                            (unsigned long long)e.thread, (unsigned long long)e.addr, e.size,
                            e.module, e.kind, e.indirect ? "true" : "false");
    }
    return std::string(buf, static_cast<std::size_t>(len));
}

inline std::string trace_text(const std::vector<EventLine>& events, bool version_line = true) {
    std::string out;
    if (version_line) out += "# xeno-trace v1\n";
    for (const auto& e : events) out += event_json(e) + "\n";
    return out;
}

/// Lazily generates `total` events looping over `loop_len` instruction
/// addresses in one thread: mostly straight-line, an indirect call every
/// 97th slot, and an indirect back-jump closing each loop iteration.
/// Unique addresses stay bounded while the event count grows, which is
/// what makes it useful for memory-scaling checks.
class LoopTraceBuf : public std::streambuf {
public:
    explicit LoopTraceBuf(std::uint64_t total, std::uint32_t loop_len = 1000)
        : total_(total), loop_len_(loop_len) {
        buf_.reserve(1 << 16);
    }

protected:
    int_type underflow() override {
        if (gptr() < egptr()) return traits_type::to_int_type(*gptr());
        if (emitted_ >= total_) return traits_type::eof();
        buf_.clear();
        while (emitted_ < total_ && buf_.size() < (1u << 16)) {
            append_event(emitted_);
            ++emitted_;
        }
        setg(buf_.data(), buf_.data(), buf_.data() + buf_.size());
        return traits_type::to_int_type(*gptr());
    }

private:
    void append_event(std::uint64_t i) {
        std::uint32_t k = static_cast<std::uint32_t>(i % loop_len_);
        std::uint64_t addr = 0x401000 + std::uint64_t{k} * 4;
        char line[224];
        int len;
        if (k + 1 == loop_len_) {
            len = std::snprintf(line, sizeof(line),
                                "{\"thread_id\":1,\"address\":\"0x%llx\",\"size\":4,"
                                "\"module\":\"app.exe\",\"branch_kind\":\"jmp\","
                                "\"is_indirect\":true,\"target\":\"0x401000\"}\n",
                                (unsigned long long)addr);
        } else if (k % 97 == 7) {
            len = std::snprintf(line, sizeof(line),
                                "{\"thread_id\":1,\"address\":\"0x%llx\",\"size\":4,"
                                "\"module\":\"app.exe\",\"branch_kind\":\"call\","
                                "\"is_indirect\":true,\"target\":\"0x%llx\"}\n",
                                (unsigned long long)addr, (unsigned long long)(addr + 4));
        } else {
            len = std::snprintf(line, sizeof(line),
                                "{\"thread_id\":1,\"address\":\"0x%llx\",\"size\":4,"
                                "\"module\":\"app.exe\",\"branch_kind\":\"none\","
                                "\"is_indirect\":false,\"target\":\"0x%llx\"}\n",
                                (unsigned long long)addr, (unsigned long long)(addr + 4));
        }
        buf_.append(line, static_cast<std::size_t>(len));
    }

    std::string buf_;
    std::uint64_t emitted_ = 0;
    std::uint64_t total_;
    std::uint32_t loop_len_;
};

} // namespace testsupport
