#pragma once

// Sweep execution over (method x policy x size x seed) with an append-only
// JSON-lines result store. Each pending cell runs in its own forked process;
// finished cells are skipped on rerun by fingerprint.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ftlab/config.hpp"
#include "ftlab/finetune.hpp"

namespace ftlab {

/// One RunRecord per line. Appends hold an exclusive flock and are a single write(2).
class ResultStore {
public:
    explicit ResultStore(std::filesystem::path path) : path_(std::move(path)) {}

    /// Every complete line, parsed. A torn final line (no newline) is ignored. Throws
    /// InputError naming the line number of any malformed line.
    std::vector<RunRecord> load() const;
    std::set<std::string> fingerprints() const;
    /// Appends unless a record with the same fingerprint and seed is already present;
    /// returns whether a line was written.
    bool append(const RunRecord& record) const;

    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

struct SweepCell {
    std::string method;  // moco, mae, random, or "fusion" for fusion presets
    std::string policy;  // policy label or fusion preset
    std::int64_t size = 0;
    std::uint64_t seed = 0;

    std::string label() const;
};

/// Cells in grid order. Ordinary policies expand over methods; fusion presets use both
/// checkpoints and expand once per (size, seed).
std::vector<SweepCell> plan_cells(const SweepGrid& grid);

/// SHA-256 of the canonical config, the cell axes, and the checksum of the checkpoint(s)
/// the cell starts from.
std::string cell_fingerprint(const ExperimentConfig& config, const SweepCell& cell);

/// Loads data_dir, or generates the synthetic dataset when it is empty.
SyntheticData experiment_data(const ExperimentConfig& config);

/// Fine-tunes one cell and returns its record: fingerprint = cell_fingerprint, tags hold
/// method, policy, size and the inner run fingerprint.
RunRecord run_cell(const ExperimentConfig& config, const SweepCell& cell, const SyntheticData& data);

struct SweepSummary {
    std::size_t total = 0;
    std::size_t skipped = 0;   // already in the store
    std::size_t executed = 0;  // appended by this call
    std::vector<std::string> failed;
};

struct SweepOptions {
    int parallelism = 1;
    bool dry_run = false;
    /// Receives each planned cell (dry run) or each finished cell.
    std::function<void(const SweepCell&, const std::string& status)> on_cell;
};

/// Fails fast (InputError) when a referenced checkpoint is missing. A failing cell does
/// not stop the others; its label is reported in `failed`.
SweepSummary run_sweep(const ExperimentConfig& config, const ResultStore& store, const SweepOptions& options);

}  // namespace ftlab
