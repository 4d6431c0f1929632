#include "ftlab/pretrain.hpp"

#include <cstdio>
#include <sstream>

namespace ftlab {

void PretrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("pretrain epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("pretrain batch_size must be >= 1");
    if (!(learning_rate > 0)) throw ConfigError("pretrain learning_rate must be positive");
    if (min_learning_rate < 0 || min_learning_rate > learning_rate)
        throw ConfigError("pretrain min_learning_rate must lie in [0, learning_rate]");
    if (warmup_epochs < 0) throw ConfigError("pretrain warmup_epochs must be >= 0");
    if (weight_decay < 0) throw ConfigError("pretrain weight_decay must be >= 0");
    if (!(window_fraction > 0) || window_fraction > 1) throw ConfigError("pretrain window_fraction must lie in (0, 1]");
    augmentation.validate();
}

namespace {

std::string join(const std::vector<double>& v) {
    std::string out;
    char buf[32];
    for (std::size_t i = 0; i < v.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", v[i]);
        out += (i ? "," : "") + std::string(buf);
    }
    return out;
}

std::vector<double> parse(const std::string& s) {
    std::vector<double> out;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, ',')) out.push_back(std::stod(tok));
    return out;
}

}  // namespace

void store_stats(std::map<std::string, std::string>& metadata, const NormalizationStats& stats) {
    metadata["norm_mean"] = join(stats.mean);
    metadata["norm_std"] = join(stats.std);
    metadata["norm_source"] = stats.source;
}

std::optional<NormalizationStats> stored_stats(const std::map<std::string, std::string>& metadata) {
    const auto m = metadata.find("norm_mean"), s = metadata.find("norm_std");
    if (m == metadata.end() || s == metadata.end()) return std::nullopt;
    NormalizationStats out{parse(m->second), parse(s->second), ""};
    if (auto src = metadata.find("norm_source"); src != metadata.end()) out.source = src->second;
    if (out.mean.size() != out.std.size() || out.mean.empty())
        throw InputError("checkpoint normalization statistics are malformed");
    return out;
}

}  // namespace ftlab
