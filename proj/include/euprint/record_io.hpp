#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "euprint/trace.hpp"

namespace euprint {

/// One NDJSON line (without the trailing newline).
std::string serialize_record(const FingerprintRecord& r);

/// Strict parse: unknown top-level fields, missing fields, wrong types and
/// invalid traces are all rejected (MalformedDocument / SchemaViolation).
FingerprintRecord parse_record(std::string_view line);

struct CorpusReadResult {
    std::vector<FingerprintRecord> records;
    std::size_t corrupt_lines = 0;
};

/// Reads an NDJSON corpus. With skip_corrupt, unparseable lines are counted
/// instead of thrown.
CorpusReadResult read_corpus(std::istream& in, bool skip_corrupt = false);
CorpusReadResult read_corpus(const std::filesystem::path& path, bool skip_corrupt = false);

void write_corpus(std::ostream& out, const std::vector<FingerprintRecord>& records);
void write_corpus(const std::filesystem::path& path, const std::vector<FingerprintRecord>& records);

}  // namespace euprint
