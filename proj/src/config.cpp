#include "ftlab/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "ftlab/checkpoint.hpp"
#include "ftlab/fusion.hpp"

namespace ftlab {

bool is_fusion_preset(const std::string& name) {
    return name == "e2e12+12" || name == "shallow9+9" || name == "surgical_mae9_moco6";
}

void SweepGrid::validate() const {
    if (methods.empty() || policies.empty() || sizes.empty() || seeds.empty())
        throw ConfigError("sweep grid axes must be non-empty");
    for (const auto& m : methods)
        if (m != "moco" && m != "mae" && m != "random") throw ConfigError("unknown sweep method '" + m + "'");
    for (const auto& p : policies)
        if (!is_fusion_preset(p)) FinetunePolicy::parse(p);
    for (auto n : sizes)
        if (n < 1) throw ConfigError("sweep sizes must be >= 1");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
        throw ConfigError("sweep seeds must be pairwise distinct");
}

namespace {

[[noreturn]] void bad(const std::string& key, const std::string& value, const std::string& what) {
    throw ConfigError("config " + key + " = '" + value + "': " + what);
}

template <typename T>
T number(const std::string& key, const std::string& v) {
    std::istringstream is(v);
    T out{};
    is >> out;
    if (!is || !(is >> std::ws).eof()) bad(key, v, "not a number");
    return out;
}

bool boolean(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    bad(key, v, "expected true or false");
}

std::vector<std::string> list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    for (std::string item; std::getline(ss, item, ',');) {
        const auto a = item.find_first_not_of(" \t"), b = item.find_last_not_of(" \t");
        if (a != std::string::npos) out.push_back(item.substr(a, b - a + 1));
    }
    return out;
}

template <typename T>
std::vector<T> number_list(const std::string& key, const std::string& v) {
    std::vector<T> out;
    for (const auto& s : list(v)) out.push_back(number<T>(key, s));
    return out;
}

using Setter = std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)>;

template <typename T, typename Field>
Setter num(Field f) {
    return [f](ExperimentConfig& c, const std::string& k, const std::string& v) { f(c) = number<T>(k, v); };
}

template <typename Field>
Setter flag(Field f) {
    return [f](ExperimentConfig& c, const std::string& k, const std::string& v) { f(c) = boolean(k, v); };
}

const std::map<std::string, Setter>& setters() {
    using C = ExperimentConfig;
    static const std::map<std::string, Setter> table{
        {"model.image_size", num<int>([](C& c) -> auto& { return c.model.image_size; })},
        {"model.patch_size", num<int>([](C& c) -> auto& { return c.model.patch_size; })},
        {"model.depth", num<int>([](C& c) -> auto& { return c.model.depth; })},
        {"model.embed_dim", num<int>([](C& c) -> auto& { return c.model.embed_dim; })},
        {"model.num_heads", num<int>([](C& c) -> auto& { return c.model.num_heads; })},
        {"model.mlp_ratio", num<double>([](C& c) -> auto& { return c.model.mlp_ratio; })},
        {"model.in_channels", num<int>([](C& c) -> auto& { return c.model.in_channels; })},
        {"model.use_class_token", flag([](C& c) -> auto& { return c.model.use_class_token; })},
        {"model.pooling", [](C& c, const std::string&, const std::string& v) { c.model.pooling = pooling_from_string(v); }},

        {"data.dir", [](C& c, const std::string&, const std::string& v) { c.data_dir = v; }},
        {"data.n_train", num<std::int64_t>([](C& c) -> auto& { return c.synthetic.n_train; })},
        {"data.n_val", num<std::int64_t>([](C& c) -> auto& { return c.synthetic.n_val; })},
        {"data.n_test", num<std::int64_t>([](C& c) -> auto& { return c.synthetic.n_test; })},
        {"data.class_prob", num<double>([](C& c) -> auto& { return c.synthetic.class_prob; })},
        {"data.noise", num<double>([](C& c) -> auto& { return c.synthetic.noise; })},
        {"data.seed", num<std::uint64_t>([](C& c) -> auto& { return c.synthetic.seed; })},

        {"pretrain.epochs", num<int>([](C& c) -> auto& { return c.pretrain.epochs; })},
        {"pretrain.batch_size", num<int>([](C& c) -> auto& { return c.pretrain.batch_size; })},
        {"pretrain.learning_rate", num<double>([](C& c) -> auto& { return c.pretrain.learning_rate; })},
        {"pretrain.min_learning_rate", num<double>([](C& c) -> auto& { return c.pretrain.min_learning_rate; })},
        {"pretrain.warmup_epochs", num<int>([](C& c) -> auto& { return c.pretrain.warmup_epochs; })},
        {"pretrain.weight_decay", num<double>([](C& c) -> auto& { return c.pretrain.weight_decay; })},
        {"pretrain.window_fraction", num<double>([](C& c) -> auto& { return c.pretrain.window_fraction; })},
        {"pretrain.hflip_prob", num<double>([](C& c) -> auto& { return c.pretrain.augmentation.hflip_prob; })},
        {"pretrain.rotation_range", num<double>([](C& c) -> auto& { return c.pretrain.augmentation.rotation_range; })},
        {"pretrain.crop_scale_min", num<double>([](C& c) -> auto& { return c.pretrain.augmentation.crop_scale_min; })},

        {"moco.temperature", num<double>([](C& c) -> auto& { return c.moco.temperature; })},
        {"moco.momentum", num<double>([](C& c) -> auto& { return c.moco.momentum; })},
        {"moco.hidden_dim", num<int>([](C& c) -> auto& { return c.moco.hidden_dim; })},
        {"moco.proj_dim", num<int>([](C& c) -> auto& { return c.moco.proj_dim; })},
        {"moco.pred_dim", num<int>([](C& c) -> auto& { return c.moco.pred_dim; })},
        {"moco.proj_layers", num<int>([](C& c) -> auto& { return c.moco.proj_layers; })},
        {"moco.pred_layers", num<int>([](C& c) -> auto& { return c.moco.pred_layers; })},
        {"moco.batch_size", num<int>([](C& c) -> auto& { return c.moco.batch_size; })},

        {"mae.mask_ratio", num<double>([](C& c) -> auto& { return c.mae.mask_ratio; })},
        {"mae.decoder_depth", num<int>([](C& c) -> auto& { return c.mae.decoder_depth; })},
        {"mae.decoder_dim", num<int>([](C& c) -> auto& { return c.mae.decoder_dim; })},
        {"mae.decoder_heads", num<int>([](C& c) -> auto& { return c.mae.decoder_heads; })},
        {"mae.decoder_mlp_ratio", num<double>([](C& c) -> auto& { return c.mae.decoder_mlp_ratio; })},

        {"finetune.task",
         [](C& c, const std::string& k, const std::string& v) {
             if (v == "classification")
                 c.task.kind = TaskSpec::Kind::classification;
             else if (v == "segmentation")
                 c.task.kind = TaskSpec::Kind::segmentation;
             else
                 bad(k, v, "expected classification or segmentation");
         }},
        {"finetune.seg_channels", num<int>([](C& c) -> auto& { return c.task.seg_channels; })},
        {"finetune.learning_rate", num<double>([](C& c) -> auto& { return c.finetune.learning_rate; })},
        {"finetune.min_learning_rate", num<double>([](C& c) -> auto& { return c.finetune.min_learning_rate; })},
        {"finetune.weight_decay", num<double>([](C& c) -> auto& { return c.finetune.weight_decay; })},
        {"finetune.batch_size", num<int>([](C& c) -> auto& { return c.finetune.batch_size; })},
        {"finetune.max_epochs", num<int>([](C& c) -> auto& { return c.finetune.max_epochs; })},
        {"finetune.warmup_epochs", num<int>([](C& c) -> auto& { return c.finetune.warmup_epochs; })},
        {"finetune.patience", num<int>([](C& c) -> auto& { return c.finetune.early_stop_patience; })},
        {"finetune.eval_batch_size", num<int>([](C& c) -> auto& { return c.finetune.eval_batch_size; })},
        {"finetune.normalization_source",
         [](C& c, const std::string&, const std::string& v) {
             c.finetune.normalization_source = normalization_source_from_string(v);
         }},
        {"finetune.pooling",
         [](C& c, const std::string&, const std::string& v) {
             if (v == "model")
                 c.finetune.pooling.reset();
             else
                 c.finetune.pooling = pooling_from_string(v);
         }},
        {"finetune.augment",
         [](C& c, const std::string& k, const std::string& v) {
             if (!boolean(k, v))
                 c.finetune.augmentation.reset();
             else if (!c.finetune.augmentation)
                 c.finetune.augmentation = AugmentationPolicy{64, 0.5, 0.0, 1.0};
         }},
        {"finetune.hflip_prob",
         [](C& c, const std::string& k, const std::string& v) {
             if (c.finetune.augmentation) c.finetune.augmentation->hflip_prob = number<double>(k, v);
         }},
        {"finetune.rotation_range",
         [](C& c, const std::string& k, const std::string& v) {
             if (c.finetune.augmentation) c.finetune.augmentation->rotation_range = number<double>(k, v);
         }},
        {"finetune.crop_scale_min",
         [](C& c, const std::string& k, const std::string& v) {
             if (c.finetune.augmentation) c.finetune.augmentation->crop_scale_min = number<double>(k, v);
         }},

        {"fusion.preset", [](C& c, const std::string&, const std::string& v) { c.fusion_preset = v; }},
        {"fusion.truncate_moco", flag([](C& c) -> auto& { return c.fusion_truncate_moco; })},

        {"sweep.methods", [](C& c, const std::string&, const std::string& v) { c.grid.methods = list(v); }},
        {"sweep.policies", [](C& c, const std::string&, const std::string& v) { c.grid.policies = list(v); }},
        {"sweep.sizes",
         [](C& c, const std::string& k, const std::string& v) { c.grid.sizes = number_list<std::int64_t>(k, v); }},
        {"sweep.seeds",
         [](C& c, const std::string& k, const std::string& v) { c.grid.seeds = number_list<std::uint64_t>(k, v); }},
        {"sweep.mae_checkpoint", [](C& c, const std::string&, const std::string& v) { c.mae_checkpoint = v; }},
        {"sweep.moco_checkpoint", [](C& c, const std::string&, const std::string& v) { c.moco_checkpoint = v; }},
        {"sweep.store", [](C& c, const std::string&, const std::string& v) { c.store = v; }},
        {"sweep.parallelism", num<int>([](C& c) -> auto& { return c.parallelism; })},
    };
    return table;
}

// Sections the table knows about, for a clearer error on misspelled section names.
std::set<std::string> sections() {
    std::set<std::string> s;
    for (const auto& [k, _] : setters()) s.insert(k.substr(0, k.find('.')));
    return s;
}

void sync_sizes(ExperimentConfig& c) {
    c.synthetic.image_size = c.model.image_size;
    c.pretrain.augmentation.crop_size = c.model.image_size;
    if (c.finetune.augmentation) c.finetune.augmentation->crop_size = c.model.image_size;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
    boost::property_tree::ptree tree;
    std::istringstream is(text);
    try {
        boost::property_tree::read_ini(is, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(std::string("config syntax: ") + e.what());
    }
    ExperimentConfig c;
    sync_sizes(c);
    const auto known = sections();
    for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty()) throw ConfigError("config key '" + section + "' outside any section");
        if (!known.count(section)) throw ConfigError("unknown config section [" + section + "]");
        for (const auto& [key, value] : body) {
            const std::string full = section + "." + key;
            auto it = setters().find(full);
            if (it == setters().end()) throw ConfigError("unknown config key [" + section + "] " + key);
            try {
                it->second(c, full, value.data());
            } catch (const ConfigError&) {
                throw;
            } catch (const std::exception& e) {
                throw ConfigError("config " + full + ": " + e.what());
            }
        }
    }
    sync_sizes(c);
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw InputError("cannot open config " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

void ExperimentConfig::validate() const {
    model.validate();
    synthetic.validate();
    pretrain.validate();
    moco.validate();
    mae.validate(model.num_patches());
    task.validate();
    finetune.validate();
    if (!is_fusion_preset(fusion_preset)) throw ConfigError("unknown fusion preset '" + fusion_preset + "'");
    grid.validate();
    if (parallelism < 1) throw ConfigError("sweep parallelism must be >= 1");
}

nlohmann::json ExperimentConfig::to_json() const {
    const auto& a = pretrain.augmentation;
    return {{"model", config_to_json(model)},
            {"data",
             {{"dir", data_dir.string()},
              {"n_train", synthetic.n_train},
              {"n_val", synthetic.n_val},
              {"n_test", synthetic.n_test},
              {"class_prob", synthetic.class_prob},
              {"noise", synthetic.noise},
              {"seed", synthetic.seed}}},
            {"pretrain",
             {{"epochs", pretrain.epochs},
              {"batch_size", pretrain.batch_size},
              {"learning_rate", pretrain.learning_rate},
              {"min_learning_rate", pretrain.min_learning_rate},
              {"warmup_epochs", pretrain.warmup_epochs},
              {"weight_decay", pretrain.weight_decay},
              {"window_fraction", pretrain.window_fraction},
              {"hflip_prob", a.hflip_prob},
              {"rotation_range", a.rotation_range},
              {"crop_scale_min", a.crop_scale_min}}},
            {"moco",
             {{"temperature", moco.temperature},
              {"momentum", moco.momentum},
              {"hidden_dim", moco.hidden_dim},
              {"proj_dim", moco.proj_dim},
              {"pred_dim", moco.pred_dim},
              {"proj_layers", moco.proj_layers},
              {"pred_layers", moco.pred_layers},
              {"batch_size", moco.batch_size}}},
            {"mae",
             {{"mask_ratio", mae.mask_ratio},
              {"decoder_depth", mae.decoder_depth},
              {"decoder_dim", mae.decoder_dim},
              {"decoder_heads", mae.decoder_heads},
              {"decoder_mlp_ratio", mae.decoder_mlp_ratio}}},
            {"task",
             {{"kind", task.kind == TaskSpec::Kind::classification ? "classification" : "segmentation"},
              {"seg_channels", task.seg_channels}}},
            {"finetune", finetune.to_json()},
            {"fusion", {{"preset", fusion_preset}, {"truncate_moco", fusion_truncate_moco}}}};
}

}  // namespace ftlab
