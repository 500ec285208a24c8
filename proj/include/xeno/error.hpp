#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace xeno {

/// Base class for every error the toolkit raises on bad input.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Raised for arguments that violate a documented parameter invariant.
class InvalidArgument : public Error {
public:
    explicit InvalidArgument(const std::string& what) : Error(what) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(what) {}
};

// --- PE parsing ---

/// The file is not a structurally sound PE. `offset` is the byte offset
/// of the defect (signature position, truncated header, ...).
class MalformedPe : public Error {
public:
    MalformedPe(std::size_t offset, const std::string& reason)
        : Error("malformed PE at offset " + std::to_string(offset) + ": " + reason),
          offset(offset) {}
    std::size_t offset;
};

class OffsetOutOfFile : public Error {
public:
    OffsetOutOfFile(std::uint64_t offset, std::uint64_t file_size)
        : Error("offset " + std::to_string(offset) + " outside file of " +
                std::to_string(file_size) + " bytes"),
          offset(offset), file_size(file_size) {}
    std::uint64_t offset;
    std::uint64_t file_size;
};

// --- pattern scanning ---

class NeedleTooShort : public Error {
public:
    NeedleTooShort(std::size_t needle_len, std::size_t min_chunk)
        : Error("needle of " + std::to_string(needle_len) +
                " bytes is shorter than min_chunk " + std::to_string(min_chunk)) {}
};

class EmptyHaystack : public Error {
public:
    EmptyHaystack() : Error("haystack is empty") {}
};

// --- trace ingestion ---

class TraceSyntax : public Error {
public:
    TraceSyntax(std::size_t line, const std::string& reason)
        : Error("trace line " + std::to_string(line) + ": " + reason), line(line) {}
    std::size_t line;
};

class InconsistentThreadOrder : public Error {
public:
    InconsistentThreadOrder(std::size_t line, std::uint64_t thread_id)
        : Error("trace line " + std::to_string(line) + ": seq regression on thread " +
                std::to_string(thread_id)),
          line(line), thread_id(thread_id) {}
    std::size_t line;
    std::uint64_t thread_id;
};

class OverlapError : public Error {
public:
    OverlapError(const std::string& a, const std::string& b)
        : Error("function ranges overlap: " + a + " and " + b) {}
};

class RangeError : public Error {
public:
    RangeError(std::size_t line, const std::string& reason)
        : Error("function map line " + std::to_string(line) + ": " + reason), line(line) {}
    std::size_t line;
};

// --- indirection graph ---

/// An indirect branch event other than the last of its thread carried no
/// successor target.
class MissingTarget : public Error {
public:
    MissingTarget(std::uint64_t seq, std::uint64_t site)
        : Error("indirect branch at seq " + std::to_string(seq) +
                " has no successor target"),
          seq(seq), site(site) {}
    std::uint64_t seq;
    std::uint64_t site;
};

// --- manifests / aggregation ---

class DuplicateSampleId : public Error {
public:
    explicit DuplicateSampleId(const std::string& id)
        : Error("duplicate sample_id: " + id), sample_id(id) {}
    std::string sample_id;
};

class MissingColumn : public Error {
public:
    explicit MissingColumn(const std::string& column)
        : Error("manifest is missing required column: " + column), column(column) {}
    std::string column;
};

class ManifestError : public Error {
public:
    ManifestError(std::size_t line, const std::string& reason)
        : Error("manifest line " + std::to_string(line) + ": " + reason), line(line) {}
    std::size_t line;
};

class UnknownSampleId : public Error {
public:
    explicit UnknownSampleId(const std::string& id)
        : Error("result row references unknown sample_id: " + id), sample_id(id) {}
    std::string sample_id;
};

} // namespace xeno
