#pragma once

#include <string>
#include <vector>

#include "ebt/model/model.hpp"
#include "ebt/util/ini.hpp"

namespace ebt {

/// On-disk layout:
///
///   EBTCKPT <header bytes>\n
///   <INI header: [checkpoint] version, dtype, kind; caller sections; [tensors] name = "AxB @ offset">
///   <payload: little-endian f64 (f32 in 32-bit mode), offsets in bytes>
///
/// `header` supplies the caller's sections (typically [model]).
void write_checkpoint(const std::string& path, const std::string& kind, ini::Document header,
                      const std::vector<Parameter>& params);

struct CheckpointFile {
    ini::Document header;
    std::string kind;
    std::string payload;
    std::size_t width = 8;

    /// Overwrites every parameter from the payload; shapes must match.
    void restore(const std::vector<Parameter>& params) const;
};

CheckpointFile read_checkpoint(const std::string& path);

}  // namespace ebt
