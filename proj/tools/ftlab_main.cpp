// ftlab: pre-training, fine-tuning, fusion and sweep driver.
//
// Every subcommand accepts --config <file.ini> and --seed <n>. Results are printed as
// JSON on stdout; failures print {"error": ..., "message": ...} and exit nonzero.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ftlab/checkpoint.hpp"
#include "ftlab/config.hpp"
#include "ftlab/fusion.hpp"
#include "ftlab/mae.hpp"
#include "ftlab/metrics.hpp"
#include "ftlab/moco.hpp"
#include "ftlab/report.hpp"
#include "ftlab/sweep.hpp"

using namespace ftlab;
using nlohmann::json;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;

    ExperimentConfig load() const {
        auto c = config.empty() ? ExperimentConfig{} : load_config(config);
        if (seed) {
            c.synthetic.seed = *seed;
            c.pretrain.seed = *seed;
            c.finetune.seed = *seed;
        }
        c.validate();
        return c;
    }
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config, "INI experiment config")->check(CLI::ExistingFile);
    app->add_option("--seed", c.seed, "override every seed in the config");
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) out.push_back(item);
    return out;
}

Dataset pick_split(const SyntheticData& d, const std::string& name) {
    if (name == "train") return d.train;
    if (name == "val") return d.val;
    if (name == "test") return d.test;
    throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
}

void print(const json& j) { std::cout << j.dump() << std::endl; }

ParamSet load_encoder(const std::string& path, const ExperimentConfig& c, std::uint64_t seed) {
    if (path.empty()) return init_vit<float>(c.model, seed);
    return load_checkpoint<float>(path).params;
}

TaskSpec task_for(const ExperimentConfig& c, const SyntheticData& data) {
    TaskSpec t = c.task;
    if (t.kind == TaskSpec::Kind::classification) t.num_classes = static_cast<int>(data.train.classes);
    return t;
}

std::vector<RunRecord> load_records(const std::string& store) {
    if (!std::filesystem::exists(store)) throw InputError("result store not found: " + store);
    auto recs = ResultStore(store).load();
    if (recs.empty()) throw InputError("result store is empty: " + store);
    return recs;
}

Tensor<double> pooled_features(const ParamSet& enc, const Dataset& d, const NormalizationStats& stats) {
    const std::int64_t n = d.size(), dim = enc.config.embed_dim;
    Tensor<double> out(Shape{n, dim});
    Rng rng(0);
    for (std::int64_t s = 0; s < n; s += 128) {
        std::vector<std::int64_t> idx;
        for (std::int64_t i = s; i < std::min(n, s + 128); ++i) idx.push_back(i);
        const auto b = load_batch(d, idx, stats, std::nullopt, rng);
        const auto f = pool(forward_features(enc, b.images), enc.config.pooling, enc.config.use_class_token);
        for (std::int64_t i = 0; i < f.numel(); ++i) out[s * dim + i] = f[i];
    }
    return out;
}

void write_montage(const std::filesystem::path& path, const Dataset& test, const Dataset& train,
                   const NeighborReport& r, std::int64_t rows) {
    const auto h = test.images.dim(2), w = test.images.dim(3), gap = std::int64_t{2};
    const auto cols = r.k + 1;
    rows = std::min<std::int64_t>(rows, static_cast<std::int64_t>(r.indices.size()));
    const auto H = rows * (h + gap) - gap, W = cols * (w + gap) - gap + gap * 2;
    std::vector<std::uint8_t> px(static_cast<std::size_t>(H * W), 255);
    auto blit = [&](const Dataset& d, std::int64_t i, std::int64_t row, std::int64_t col) {
        const auto plane = d.images.dim(1) * h * w;
        const auto x0 = col * (w + gap) + (col > 0 ? gap * 2 : 0), y0 = row * (h + gap);
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x) {
                const float v = std::clamp(d.images[i * plane + y * w + x], 0.0f, 1.0f);
                px[static_cast<std::size_t>((y0 + y) * W + x0 + x)] = static_cast<std::uint8_t>(v * 255.0f + 0.5f);
            }
    };
    for (std::int64_t q = 0; q < rows; ++q) {
        blit(test, q, q, 0);
        for (std::int64_t j = 0; j < r.k; ++j) blit(train, r.indices[q][j], q, j + 1);
    }
    write_gray_png(path, px.data(), static_cast<int>(H), static_cast<int>(W));
}

int fail(const std::string& kind, const std::string& message, int code) {
    std::cout.flush();
    std::cerr << json{{"error", kind}, {"message", message}}.dump() << std::endl;
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ViT self-supervised pre-training and fine-tuning lab"};
    app.require_subcommand(1);
    Common common;

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic lesion dataset");
    std::string gen_out;
    gen->add_option("--out", gen_out, "output directory")->required();

    auto* pre = app.add_subcommand("pretrain", "self-supervised pre-training");
    std::string pre_method, pre_out;
    std::optional<int> pre_epochs;
    pre->add_option("--method", pre_method, "mae or moco")->required()->check(CLI::IsMember({"mae", "moco"}));
    pre->add_option("--out", pre_out, "checkpoint path")->required();
    pre->add_option("--epochs", pre_epochs, "override pretrain.epochs");

    auto* ft = app.add_subcommand("finetune", "fine-tune one encoder under a freezing policy");
    std::string ft_ckpt, ft_policy = "e2e", ft_out, ft_record;
    std::optional<std::int64_t> ft_size;
    ft->add_option("--checkpoint", ft_ckpt, "pre-trained encoder (random init when omitted)");
    ft->add_option("--policy", ft_policy, "e2e, shallow:N or surgical:A-B");
    ft->add_option("--size", ft_size, "labelled training subset size");
    ft->add_option("--out", ft_out, "where to save the best model");
    ft->add_option("--record", ft_record, "append the run record to this JSONL store");

    auto* fu = app.add_subcommand("fuse", "fine-tune a two-branch fusion model");
    std::string fu_mae, fu_moco, fu_preset;
    std::optional<std::int64_t> fu_size;
    fu->add_option("--mae", fu_mae, "MAE checkpoint")->required()->check(CLI::ExistingFile);
    fu->add_option("--moco", fu_moco, "MoCo checkpoint")->required()->check(CLI::ExistingFile);
    fu->add_option("--preset", fu_preset, "fusion preset (default from config)");
    fu->add_option("--size", fu_size, "labelled training subset size");

    auto* ev = app.add_subcommand("eval", "evaluate a fine-tuned model");
    std::string ev_model, ev_split = "test";
    ev->add_option("--model", ev_model, "fine-tuned checkpoint")->required()->check(CLI::ExistingFile);
    ev->add_option("--split", ev_split, "train, val or test");

    auto* sw = app.add_subcommand("sweep", "run the configured grid, skipping finished cells");
    bool sw_dry = false;
    std::optional<int> sw_par;
    std::string sw_store;
    sw->add_flag("--dry-run", sw_dry, "list cells and their status without running");
    sw->add_option("--parallelism", sw_par, "concurrent cells");
    sw->add_option("--store", sw_store, "result store (default from config)");

    std::string agg_store, agg_group = "method,policy,size", agg_metric = "test_metric", agg_format = "markdown";
    auto* ag = app.add_subcommand("aggregate", "mean and sample std per group");
    ag->add_option("--store", agg_store, "result store")->required();
    ag->add_option("--group-by", agg_group, "comma-separated fields");
    ag->add_option("--metric", agg_metric, "record metric");
    ag->add_option("--format", agg_format, "markdown or csv")->check(CLI::IsMember({"markdown", "csv"}));

    auto* pl = app.add_subcommand("plot", "SVG plot with a CSV sidecar");
    std::string pl_kind = "lines_vs_size", pl_out, pl_title;
    pl->add_option("--store", agg_store, "result store")->required();
    pl->add_option("--group-by", agg_group, "comma-separated fields");
    pl->add_option("--metric", agg_metric, "record metric");
    pl->add_option("--kind", pl_kind, "lines_vs_size or grouped_bars");
    pl->add_option("--out", pl_out, "output stem")->required();
    pl->add_option("--title", pl_title, "plot title");

    auto* nn = app.add_subcommand("nn-analysis", "k-NN retrieval in encoder feature space");
    std::string nn_ckpt, nn_montage;
    std::int64_t nn_k = 5, nn_rows = 8;
    nn->add_option("--checkpoint", nn_ckpt, "encoder checkpoint")->required()->check(CLI::ExistingFile);
    nn->add_option("-k", nn_k, "neighbours per query")->check(CLI::PositiveNumber);
    nn->add_option("--montage", nn_montage, "write a PNG of queries and their neighbours");
    nn->add_option("--rows", nn_rows, "queries shown in the montage")->check(CLI::PositiveNumber);

    auto* tr = app.add_subcommand("truncate", "keep the first N blocks of a checkpoint");
    std::string tr_in, tr_out;
    int tr_depth = 0;
    tr->add_option("--checkpoint", tr_in, "source checkpoint")->required()->check(CLI::ExistingFile);
    tr->add_option("--depth", tr_depth, "blocks to keep")->required();
    tr->add_option("--out", tr_out, "output checkpoint")->required();

    for (auto* sub : app.get_subcommands([](const CLI::App*) { return true; })) add_common(sub, common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage", e.what(), 2);
    }

    try {
        auto cfg = common.load();

        if (*gen) {
            const auto data = synth_generate(cfg.synthetic);
            synth_write(data, gen_out);
            print({{"out", gen_out},
                   {"train", data.train.size()},
                   {"val", data.val.size()},
                   {"test", data.test.size()},
                   {"classes", data.class_names}});
        } else if (*pre) {
            if (pre_epochs) cfg.pretrain.epochs = *pre_epochs;
            const auto data = experiment_data(cfg);
            auto log = [](int epoch, double loss) {
                std::cerr << json{{"epoch", epoch}, {"loss", loss}}.dump() << std::endl;
            };
            const auto res = pre_method == "mae" ? mae_pretrain(data.train, cfg.model, cfg.mae, cfg.pretrain, log)
                                                 : moco_pretrain(data.train, cfg.model, cfg.moco, cfg.pretrain, log);
            save_checkpoint(pre_out, res.checkpoint);
            print({{"checkpoint", pre_out},
                   {"sha256", file_sha256(pre_out)},
                   {"selected_epoch", res.selected_epoch},
                   {"loss_history", res.loss_history}});
        } else if (*ft) {
            const auto data = experiment_data(cfg);
            const auto seed = cfg.finetune.seed;
            const auto policy = FinetunePolicy::parse(ft_policy);
            const auto encoder = load_encoder(ft_ckpt, cfg, seed);
            const auto model = prepare_model(encoder, policy, task_for(cfg, data), seed);
            const auto train = ft_size ? data.train.subset(subsample_indices(data.train.size(), *ft_size, seed))
                                       : data.train;
            auto res = finetune(model, build_trainable_mask(policy, encoder.config.depth), train, data.val,
                                data.test, cfg.finetune);
            res.record.tags["policy"] = policy.label();
            res.record.tags["method"] = ft_ckpt.empty() ? "random"
                                        : encoder.metadata.count("ssl_method") ? encoder.metadata.at("ssl_method")
                                                                               : "checkpoint";
            res.record.tags["size"] = std::to_string(train.size());
            if (!ft_out.empty()) save_checkpoint(ft_out, Checkpoint{res.best, {}});
            if (!ft_record.empty()) ResultStore(ft_record).append(res.record);
            print(res.record.to_json());
        } else if (*fu) {
            const auto data = experiment_data(cfg);
            const auto seed = cfg.finetune.seed;
            auto [a, b] = fusion_preset(fu_preset.empty() ? cfg.fusion_preset : fu_preset, cfg.fusion_truncate_moco);
            a.checkpoint = fu_mae;
            b.checkpoint = fu_moco;
            const auto model = build_fusion(a, b, static_cast<int>(data.train.classes), seed);
            const auto train = fu_size ? data.train.subset(subsample_indices(data.train.size(), *fu_size, seed))
                                       : data.train;
            print(finetune_fusion(model, train, data.val, data.test, cfg.finetune).record.to_json());
        } else if (*ev) {
            const auto data = experiment_data(cfg);
            const auto model = load_checkpoint<float>(ev_model).params;
            const auto stats = stored_stats(model.metadata);
            if (!stats) throw InputError("model has no stored normalization statistics: " + ev_model);
            const auto task = TaskSpec::from_metadata(model.metadata);
            print({{"split", ev_split},
                   {"metric", task.kind == TaskSpec::Kind::classification ? "mean_auc" : "dice"},
                   {"value", evaluate_model(model, pick_split(data, ev_split), *stats, cfg.finetune.eval_batch_size)}});
        } else if (*sw) {
            if (common.seed) cfg.grid.seeds = {*common.seed};
            SweepOptions opt;
            opt.parallelism = sw_par.value_or(cfg.parallelism);
            opt.dry_run = sw_dry;
            opt.on_cell = [](const SweepCell& c, const std::string& status) {
                print({{"cell", c.label()}, {"status", status}});
            };
            const ResultStore store(sw_store.empty() ? cfg.store : std::filesystem::path(sw_store));
            const auto s = run_sweep(cfg, store, opt);
            print({{"total", s.total}, {"skipped", s.skipped}, {"executed", s.executed}, {"failed", s.failed}});
            if (!s.failed.empty()) return fail("cells_failed", std::to_string(s.failed.size()) + " cell(s) failed", 4);
        } else if (*ag || *pl) {
            const auto agg = aggregate(load_records(agg_store), split_csv(agg_group), agg_metric);
            for (const auto& w : agg.warnings) std::cerr << json{{"warning", w}}.dump() << std::endl;
            if (*ag) {
                agg_format == "csv" ? write_csv(agg, std::cout) : write_markdown(agg, std::cout);
            } else {
                const auto files = emit_plot(agg, plot_kind_from_string(pl_kind), pl_out, pl_title);
                print({{"svg", files.svg.string()}, {"csv", files.csv.string()}});
            }
        } else if (*nn) {
            const auto data = experiment_data(cfg);
            const auto enc = load_checkpoint<float>(nn_ckpt).params;
            const auto stats = stored_stats(enc.metadata).value_or(compute_stats(data.train));
            const auto r = nn_analysis(pooled_features(enc, data.train, stats), data.train.labels,
                                       pooled_features(enc, data.test, stats), data.test.labels, data.train.classes,
                                       nn_k);
            json out{{"k", r.k}, {"queries", r.indices.size()}, {"nn_label_mauc", nullptr}};
            if (r.nn_label_mauc) out["nn_label_mauc"] = *r.nn_label_mauc;
            if (!nn_montage.empty()) {
                write_montage(nn_montage, data.test, data.train, r, nn_rows);
                out["montage"] = nn_montage;
            }
            print(out);
        } else if (*tr) {
            auto ck = load_checkpoint<float>(tr_in);
            const int from = ck.params.config.depth;
            ck.params = truncate(ck.params, tr_depth);
            save_checkpoint(tr_out, ck);
            print({{"checkpoint", tr_out}, {"from_depth", from}, {"depth", tr_depth}, {"sha256", file_sha256(tr_out)}});
        }
    } catch (const ConfigError& e) {
        return fail("config_error", e.what(), 2);
    } catch (const InputError& e) {
        return fail("input_error", e.what(), 3);
    } catch (const std::exception& e) {
        return fail("error", e.what(), 1);
    }
    return 0;
}
