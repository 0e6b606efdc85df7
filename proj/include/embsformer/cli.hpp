#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "embsformer/ablation.hpp"
#include "embsformer/data.hpp"
#include "embsformer/model.hpp"
#include "embsformer/training.hpp"

namespace embs {

/// Flat `key = value` configuration. Layers are applied in order: command
/// defaults, then the config file, then command-line overrides. Unknown keys
/// are rejected.
class RunConfig {
public:
    /// Defaults for `command` (synth, train, evaluate, predict, gradcheck, ablation).
    static RunConfig defaults(std::string_view command);

    /// Parses `key = value` lines; `#` starts a comment.
    void merge_text(std::string_view text, std::string_view origin);
    void merge_file(const std::filesystem::path& path);
    void set(std::string_view key, std::string value);
    /// `key=value`.
    void set_assignment(std::string_view assignment);

    bool has(std::string_view key) const;
    const std::string& get(std::string_view key) const;
    std::string text() const;

    std::uint64_t get_u64(std::string_view key) const;
    std::size_t get_size(std::string_view key) const;
    double get_double(std::string_view key) const;
    bool get_bool(std::string_view key) const;
    std::vector<double> get_doubles(std::string_view key) const;

private:
    std::map<std::string, std::string, std::less<>> values_;
};

/// m and n from `horizon` (short = 12, long = 36) unless set explicitly.
ModelConfig model_config_from(const RunConfig& config, const RawSeries& series);
TrainConfig train_config_from(const RunConfig& config);
SynthOptions synth_options_from(const RunConfig& config);

/// FNV-1a 64 of the given bytes as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);
/// Hash over the dataset files named in the config (readings, adjacency, holidays).
std::string dataset_hash(const RunConfig& config);

/// Creates `<out>/<prefix>-<UTC timestamp>`, adding a numeric suffix if the
/// name exists. Never reuses a directory.
std::filesystem::path create_run_dir(const std::filesystem::path& out, std::string_view prefix);

/// Entry point behind the executable. Returns the process exit code.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace embs
