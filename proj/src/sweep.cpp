#include "ftlab/sweep.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <sys/prctl.h>
#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

#include <csignal>
#include <cstdio>
#include <iostream>
#include <map>
#include <sstream>

#include "ftlab/checkpoint.hpp"
#include "ftlab/fusion.hpp"

namespace ftlab {

namespace {

class Fd {
public:
    explicit Fd(int fd) : fd_(fd) {}
    ~Fd() {
        if (fd_ >= 0) ::close(fd_);
    }
    Fd(const Fd&) = delete;
    Fd& operator=(const Fd&) = delete;
    int get() const { return fd_; }

private:
    int fd_;
};

std::string read_all(int fd) {
    std::string out;
    char buf[1 << 16];
    off_t off = 0;
    for (;;) {
        const ssize_t n = ::pread(fd, buf, sizeof buf, off);
        if (n < 0) throw std::runtime_error("result store read failed");
        if (n == 0) break;
        out.append(buf, static_cast<std::size_t>(n));
        off += n;
    }
    return out;
}

std::string record_key(const std::string& fingerprint, std::uint64_t seed) {
    return fingerprint + "#" + std::to_string(seed);
}

std::vector<RunRecord> parse_lines(const std::string& text, const std::filesystem::path& path) {
    std::vector<RunRecord> out;
    std::size_t start = 0, line = 0;
    while (start < text.size()) {
        const auto nl = text.find('\n', start);
        if (nl == std::string::npos) break;  // torn tail
        ++line;
        const auto body = text.substr(start, nl - start);
        start = nl + 1;
        if (body.empty()) continue;
        try {
            out.push_back(RunRecord::from_json(nlohmann::json::parse(body)));
        } catch (const std::exception& e) {
            throw InputError(path.string() + ":" + std::to_string(line) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace

std::vector<RunRecord> ResultStore::load() const {
    if (!std::filesystem::exists(path_)) return {};
    Fd fd(::open(path_.c_str(), O_RDONLY));
    if (fd.get() < 0) throw InputError("cannot open result store " + path_.string());
    ::flock(fd.get(), LOCK_SH);
    const auto text = read_all(fd.get());
    ::flock(fd.get(), LOCK_UN);
    return parse_lines(text, path_);
}

std::set<std::string> ResultStore::fingerprints() const {
    std::set<std::string> s;
    for (const auto& r : load()) s.insert(record_key(r.fingerprint, r.seed));
    return s;
}

bool ResultStore::append(const RunRecord& record) const {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    Fd fd(::open(path_.c_str(), O_RDWR | O_CREAT | O_APPEND, 0644));
    if (fd.get() < 0) throw InputError("cannot open result store " + path_.string());
    if (::flock(fd.get(), LOCK_EX) != 0) throw std::runtime_error("cannot lock result store");
    auto text = read_all(fd.get());
    const auto last_nl = text.rfind('\n');
    const std::size_t complete = last_nl == std::string::npos ? 0 : last_nl + 1;
    if (complete != text.size()) {
        // A writer died mid-line; drop the fragment so the file stays line-parsable.
        if (::ftruncate(fd.get(), static_cast<off_t>(complete)) != 0) throw std::runtime_error("cannot repair result store");
        text.resize(complete);
    }
    for (const auto& r : parse_lines(text, path_))
        if (r.fingerprint == record.fingerprint && r.seed == record.seed) return false;
    const std::string line = record.to_json().dump() + "\n";
    std::size_t done = 0;
    while (done < line.size()) {
        const ssize_t n = ::write(fd.get(), line.data() + done, line.size() - done);
        if (n <= 0) throw std::runtime_error("result store write failed");
        done += static_cast<std::size_t>(n);
    }
    ::fsync(fd.get());
    return true;
}

std::string SweepCell::label() const {
    return method + "/" + policy + "/n=" + std::to_string(size) + "/seed=" + std::to_string(seed);
}

std::vector<SweepCell> plan_cells(const SweepGrid& grid) {
    grid.validate();
    std::vector<SweepCell> cells;
    for (const auto& m : grid.methods)
        for (const auto& p : grid.policies) {
            if (is_fusion_preset(p)) continue;
            for (auto n : grid.sizes)
                for (auto s : grid.seeds) cells.push_back({m, p, n, s});
        }
    for (const auto& p : grid.policies) {
        if (!is_fusion_preset(p)) continue;
        for (auto n : grid.sizes)
            for (auto s : grid.seeds) cells.push_back({"fusion", p, n, s});
    }
    return cells;
}

namespace {

std::vector<std::filesystem::path> cell_checkpoints(const ExperimentConfig& c, const SweepCell& cell) {
    if (cell.method == "mae") return {c.mae_checkpoint};
    if (cell.method == "moco") return {c.moco_checkpoint};
    if (cell.method == "fusion") return {c.mae_checkpoint, c.moco_checkpoint};
    return {};
}

}  // namespace

std::string cell_fingerprint(const ExperimentConfig& config, const SweepCell& cell) {
    nlohmann::json j{{"config", config.to_json()},
                     {"method", cell.method},
                     {"policy", cell.policy},
                     {"size", cell.size},
                     {"seed", cell.seed}};
    auto sums = nlohmann::json::array();
    for (const auto& p : cell_checkpoints(config, cell)) sums.push_back(file_sha256(p));
    j["checkpoints"] = sums;
    return sha256_hex(j.dump());
}

SyntheticData experiment_data(const ExperimentConfig& c) {
    if (c.data_dir.empty()) return synth_generate(c.synthetic);
    return load_splits(c.data_dir);
}

RunRecord run_cell(const ExperimentConfig& c, const SweepCell& cell, const SyntheticData& data) {
    const auto idx = subsample_indices(data.train.size(), cell.size, cell.seed);
    const auto train = data.train.subset(idx);
    FinetuneConfig fc = c.finetune;
    fc.seed = cell.seed;
    RunRecord rec;
    if (cell.method == "fusion") {
        auto [a, b] = fusion_preset(cell.policy, c.fusion_truncate_moco);
        a.checkpoint = c.mae_checkpoint;
        b.checkpoint = c.moco_checkpoint;
        const auto model = build_fusion(a, b, static_cast<int>(data.train.classes), cell.seed);
        rec = finetune_fusion(model, train, data.val, data.test, fc).record;
    } else {
        ParamSet encoder;
        if (cell.method == "random") {
            encoder = init_vit<float>(c.model, cell.seed);
        } else {
            encoder = load_checkpoint<float>(cell.method == "mae" ? c.mae_checkpoint : c.moco_checkpoint).params;
            if (encoder.config.image_size != c.model.image_size)
                throw ConfigError("checkpoint image size " + std::to_string(encoder.config.image_size) +
                                  " differs from model.image_size " + std::to_string(c.model.image_size));
        }
        TaskSpec task = c.task;
        if (task.kind == TaskSpec::Kind::classification) task.num_classes = static_cast<int>(data.train.classes);
        const auto policy = FinetunePolicy::parse(cell.policy);
        const auto model = prepare_model(encoder, policy, task, cell.seed);
        rec = finetune(model, build_trainable_mask(policy, encoder.config.depth), train, data.val, data.test, fc).record;
    }
    rec.tags["run_fingerprint"] = rec.fingerprint;
    rec.tags["method"] = cell.method;
    rec.tags["policy"] = cell.policy;
    rec.tags["size"] = std::to_string(cell.size);
    rec.fingerprint = cell_fingerprint(c, cell);
    return rec;
}

SweepSummary run_sweep(const ExperimentConfig& config, const ResultStore& store, const SweepOptions& opt) {
    config.validate();
    if (opt.parallelism < 1) throw ConfigError("parallelism must be >= 1");
    const auto cells = plan_cells(config.grid);
    for (const auto& cell : cells)
        for (const auto& p : cell_checkpoints(config, cell))
            if (p.empty() || !std::filesystem::is_regular_file(p))
                throw InputError("checkpoint for method '" + cell.method + "' not found: '" + p.string() + "'");

    const auto done = store.fingerprints();
    SweepSummary summary;
    summary.total = cells.size();
    std::vector<std::pair<SweepCell, std::string>> pending;
    for (const auto& cell : cells) {
        const auto fp = cell_fingerprint(config, cell);
        if (done.count(record_key(fp, cell.seed))) {
            ++summary.skipped;
            if (opt.dry_run && opt.on_cell) opt.on_cell(cell, "done");
        } else {
            pending.emplace_back(cell, fp);
            if (opt.dry_run && opt.on_cell) opt.on_cell(cell, "pending");
        }
    }
    if (opt.dry_run || pending.empty()) return summary;

    const auto data = experiment_data(config);
    std::map<pid_t, SweepCell> running;
    std::size_t next = 0;
    auto reap = [&] {
        int status = 0;
        const pid_t pid = ::waitpid(-1, &status, 0);
        if (pid < 0) throw std::runtime_error("waitpid failed");
        const auto cell = running.at(pid);
        running.erase(pid);
        const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        if (code == 0)
            ++summary.executed;
        else if (code != 3)
            summary.failed.push_back(cell.label());
        if (opt.on_cell) opt.on_cell(cell, code == 0 ? "ok" : code == 3 ? "duplicate" : "failed");
    };
    while (next < pending.size() || !running.empty()) {
        while (next < pending.size() && static_cast<int>(running.size()) < opt.parallelism) {
            const auto& cell = pending[next++].first;
            std::cout.flush();
            std::cerr.flush();
            std::fflush(nullptr);
            const pid_t pid = ::fork();
            if (pid < 0) throw std::runtime_error("fork failed");
            if (pid == 0) {
                ::prctl(PR_SET_PDEATHSIG, SIGKILL);
                int code = 0;
                try {
                    code = store.append(run_cell(config, cell, data)) ? 0 : 3;
                } catch (const std::exception& e) {
                    std::fprintf(stderr, "{\"error\":\"cell failed\",\"cell\":\"%s\",\"message\":%s}\n",
                                 cell.label().c_str(), nlohmann::json(e.what()).dump().c_str());
                    code = 1;
                }
                std::fflush(nullptr);
                ::_exit(code);
            }
            running.emplace(pid, cell);
        }
        reap();
    }
    return summary;
}

}  // namespace ftlab
