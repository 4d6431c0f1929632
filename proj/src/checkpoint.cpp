#include "ftlab/checkpoint.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace ftlab {
namespace {

constexpr std::array<char, 8> kMagic{'F', 'T', 'L', 'A', 'B', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

template <typename U>
U to_little(U v) {
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<unsigned char, sizeof(U)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<U>(bytes);
    }
    return v;
}

template <typename U>
void put(std::ostream& os, U v) {
    v = to_little(v);
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename U>
U get(std::istream& is) {
    U v{};
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw InputError("checkpoint truncated in header");
    return to_little(v);
}

template <typename T>
constexpr const char* dtype_name() {
    return sizeof(T) == 4 ? "f32" : "f64";
}

}  // namespace

nlohmann::json config_to_json(const ViTConfig& c) {
    return {{"image_size", c.image_size},   {"patch_size", c.patch_size},
            {"depth", c.depth},             {"embed_dim", c.embed_dim},
            {"num_heads", c.num_heads},     {"mlp_ratio", c.mlp_ratio},
            {"in_channels", c.in_channels}, {"use_class_token", c.use_class_token},
            {"pooling", to_string(c.pooling)}};
}

ViTConfig config_from_json(const nlohmann::json& j) {
    ViTConfig c;
    try {
        c.image_size = j.at("image_size").get<int>();
        c.patch_size = j.at("patch_size").get<int>();
        c.depth = j.at("depth").get<int>();
        c.embed_dim = j.at("embed_dim").get<int>();
        c.num_heads = j.at("num_heads").get<int>();
        c.mlp_ratio = j.at("mlp_ratio").get<double>();
        c.in_channels = j.at("in_channels").get<int>();
        c.use_class_token = j.at("use_class_token").get<bool>();
        c.pooling = pooling_from_string(j.at("pooling").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("bad config in manifest: ") + e.what());
    }
    c.validate();
    return c;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const BasicCheckpoint<T>& ckpt) {
    nlohmann::json manifest;
    manifest["config"] = config_to_json(ckpt.params.config);
    manifest["metadata"] = ckpt.params.metadata;
    manifest["groups"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    std::vector<const Tensor<T>*> payloads;
    auto describe = [&](const ParamGroup<T>& g, const char* kind) {
        nlohmann::json gj{{"id", g.id}, {"kind", kind}, {"arrays", nlohmann::json::array()}};
        for (const auto& a : g.arrays) {
            const std::uint64_t nbytes = sizeof(T) * static_cast<std::uint64_t>(a.value.numel());
            gj["arrays"].push_back({{"name", a.name},
                                    {"shape", a.value.shape()},
                                    {"dtype", dtype_name<T>()},
                                    {"offset", offset},
                                    {"nbytes", nbytes}});
            offset += nbytes;
            payloads.push_back(&a.value);
        }
        manifest["groups"].push_back(std::move(gj));
    };
    for (const auto& g : ckpt.params.groups) describe(g, "model");
    for (const auto& g : ckpt.extras) describe(g, "extra");

    const std::string text = manifest.dump();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw InputError("cannot open " + tmp + " for writing");
        os.write(kMagic.data(), kMagic.size());
        put<std::uint32_t>(os, kVersion);
        put<std::uint64_t>(os, text.size());
        os.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto* t : payloads) {
            if constexpr (std::endian::native == std::endian::little) {
                os.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(sizeof(T) * t->numel()));
            } else {
                for (T v : t->vec()) put(os, v);
            }
        }
        if (!os) throw InputError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

namespace {

struct RawFile {
    nlohmann::json manifest;
    std::uint64_t payload_start = 0;
};

RawFile read_header(std::ifstream& is, const std::filesystem::path& path) {
    std::array<char, 8> magic{};
    is.read(magic.data(), magic.size());
    if (!is || magic != kMagic) throw InputError(path.string() + " is not a checkpoint file");
    const auto version = get<std::uint32_t>(is);
    if (version != kVersion) throw InputError("unsupported checkpoint version " + std::to_string(version));
    const auto len = get<std::uint64_t>(is);
    std::string text(len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(len));
    if (!is) throw InputError("checkpoint truncated in manifest");
    RawFile r;
    try {
        r.manifest = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
    }
    r.payload_start = 20 + len;
    return r;
}

}  // namespace

nlohmann::json read_checkpoint_manifest(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open checkpoint " + path.string());
    return read_header(is, path).manifest;
}

template <typename T>
BasicCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open checkpoint " + path.string());
    const auto raw = read_header(is, path);
    const auto& m = raw.manifest;
    BasicCheckpoint<T> ck;
    ck.params.config = config_from_json(m.at("config"));
    ck.params.metadata = m.at("metadata").get<std::map<std::string, std::string>>();
    for (const auto& gj : m.at("groups")) {
        ParamGroup<T> g{gj.at("id").get<std::string>(), {}};
        for (const auto& aj : gj.at("arrays")) {
            if (aj.at("dtype").get<std::string>() != dtype_name<T>())
                throw InputError("checkpoint array dtype " + aj.at("dtype").get<std::string>() + " != requested " +
                                 dtype_name<T>());
            Shape shape = aj.at("shape").get<Shape>();
            Tensor<T> t(shape);
            const auto nbytes = aj.at("nbytes").get<std::uint64_t>();
            if (nbytes != sizeof(T) * static_cast<std::uint64_t>(t.numel()))
                throw InputError("array " + aj.at("name").get<std::string>() + " byte count disagrees with shape");
            is.seekg(static_cast<std::streamoff>(raw.payload_start + aj.at("offset").get<std::uint64_t>()));
            is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(nbytes));
            if (!is) throw InputError("checkpoint truncated in payload of " + g.id);
            if constexpr (std::endian::native == std::endian::big)
                for (auto& v : t.vec()) v = to_little(v);
            g.arrays.push_back({aj.at("name").get<std::string>(), std::move(t)});
        }
        if (gj.at("kind").get<std::string>() == "model")
            ck.params.groups.push_back(std::move(g));
        else
            ck.extras.push_back(std::move(g));
    }
    return ck;
}

namespace {

class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) { EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr); }
    void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_.get(), data, n); }
    std::string hex() {
        std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_.get(), digest.data(), &len);
        std::ostringstream os;
        for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
        return os.str();
    }

private:
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

}  // namespace

std::string file_sha256(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open " + path.string());
    Sha256 h;
    std::array<char, 1 << 16> buf{};
    while (is) {
        is.read(buf.data(), buf.size());
        h.update(buf.data(), static_cast<std::size_t>(is.gcount()));
    }
    return h.hex();
}

std::string sha256_hex(std::string_view bytes) {
    Sha256 h;
    h.update(bytes.data(), bytes.size());
    return h.hex();
}

template void save_checkpoint<float>(const std::filesystem::path&, const BasicCheckpoint<float>&);
template void save_checkpoint<double>(const std::filesystem::path&, const BasicCheckpoint<double>&);
template BasicCheckpoint<float> load_checkpoint<float>(const std::filesystem::path&);
template BasicCheckpoint<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace ftlab
