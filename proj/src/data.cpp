#include "ftlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace ftlab {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_on(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep)) out.push_back(cur);
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

std::vector<std::string> read_lines(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw InputError("cannot open manifest " + path.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) lines.push_back(line);
    }
    return lines;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot write " + path.string());
    os << text;
}

}  // namespace

void write_manifest(const fs::path& path, const ClassificationManifest& m) {
    std::ostringstream os;
    os << "#classification\t";
    for (std::size_t i = 0; i < m.class_names.size(); ++i) os << (i ? "," : "") << m.class_names[i];
    os << '\n';
    for (const auto& e : m.entries) {
        if (e.labels.size() != m.class_names.size())
            throw InputError("manifest entry " + e.image + " has " + std::to_string(e.labels.size()) +
                             " labels, expected " + std::to_string(m.class_names.size()));
        os << e.image << '\t';
        for (std::size_t i = 0; i < e.labels.size(); ++i) os << (i ? "," : "") << int(e.labels[i]);
        os << '\n';
    }
    write_text(path, os.str());
}

void write_manifest(const fs::path& path, const SegmentationManifest& m) {
    std::ostringstream os;
    os << "#segmentation\n";
    for (const auto& e : m.entries) os << e.image << '\t' << e.mask << '\n';
    write_text(path, os.str());
}

ClassificationManifest read_classification_manifest(const fs::path& path) {
    const auto lines = read_lines(path);
    ClassificationManifest m;
    m.root = path.parent_path();
    if (lines.empty() || !lines[0].starts_with("#classification\t"))
        throw InputError(path.string() + ": missing '#classification' header");
    m.class_names = split_on(lines[0].substr(16), ',');
    if (m.class_names.empty()) throw InputError(path.string() + ": no class names in header");
    for (std::size_t ln = 1; ln < lines.size(); ++ln) {
        const auto cols = split_on(lines[ln], '\t');
        if (cols.size() != 2) throw InputError(path.string() + ":" + std::to_string(ln + 1) + ": expected 2 columns");
        ClassificationEntry e{cols[0], {}};
        for (const auto& v : split_on(cols[1], ',')) {
            if (v != "0" && v != "1")
                throw InputError(path.string() + ":" + std::to_string(ln + 1) + ": label '" + v + "' is not 0/1");
            e.labels.push_back(v == "1");
        }
        if (e.labels.size() != m.class_names.size())
            throw InputError(path.string() + ":" + std::to_string(ln + 1) + ": expected " +
                             std::to_string(m.class_names.size()) + " labels");
        m.entries.push_back(std::move(e));
    }
    return m;
}

SegmentationManifest read_segmentation_manifest(const fs::path& path) {
    const auto lines = read_lines(path);
    SegmentationManifest m;
    m.root = path.parent_path();
    if (lines.empty() || lines[0] != "#segmentation") throw InputError(path.string() + ": missing '#segmentation' header");
    for (std::size_t ln = 1; ln < lines.size(); ++ln) {
        const auto cols = split_on(lines[ln], '\t');
        if (cols.size() != 2) throw InputError(path.string() + ":" + std::to_string(ln + 1) + ": expected 2 columns");
        m.entries.push_back({cols[0], cols[1]});
    }
    return m;
}

void SplitSpec::validate() const {
    if (train < 0 || val < 0 || test < 0 || std::abs(train + val + test - 1.0) > 1e-9)
        throw ConfigError("split fractions must be non-negative and sum to 1");
}

SplitIndices split_indices(std::int64_t n, const SplitSpec& spec) {
    spec.validate();
    if (n < 10) throw InputError("split needs at least 10 entries, got " + std::to_string(n));
    Rng rng(spec.seed);
    const auto perm = rng.permutation(n);
    const auto n_train = static_cast<std::int64_t>(std::llround(spec.train * static_cast<double>(n)));
    const auto n_val = std::min(n - n_train, static_cast<std::int64_t>(std::llround(spec.val * static_cast<double>(n))));
    SplitIndices out;
    out.train.assign(perm.begin(), perm.begin() + n_train);
    out.val.assign(perm.begin() + n_train, perm.begin() + n_train + n_val);
    out.test.assign(perm.begin() + n_train + n_val, perm.end());
    return out;
}

std::vector<std::int64_t> subsample_indices(std::int64_t size, std::int64_t n, std::uint64_t seed) {
    if (n < 1) throw InputError("subsample size must be >= 1");
    if (n >= size) {
        std::vector<std::int64_t> all(static_cast<std::size_t>(size));
        for (std::int64_t i = 0; i < size; ++i) all[i] = i;
        return all;
    }
    Rng rng(seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(n)));
    auto perm = rng.permutation(size);
    perm.resize(static_cast<std::size_t>(n));
    return perm;
}

Dataset Dataset::subset(const std::vector<std::int64_t>& indices) const {
    Dataset out;
    out.classes = classes;
    out.id = id;
    const std::int64_t c = images.dim(1), h = images.dim(2), w = images.dim(3);
    const std::int64_t per = c * h * w, hw = h * w;
    out.images = Tensor<float>(Shape{static_cast<std::int64_t>(indices.size()), c, h, w});
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const auto i = indices[k];
        if (i < 0 || i >= size()) throw InputError("subset index " + std::to_string(i) + " out of range");
        std::copy_n(images.data() + i * per, per, out.images.data() + static_cast<std::int64_t>(k) * per);
        if (!labels.empty())
            out.labels.insert(out.labels.end(), labels.begin() + i * classes, labels.begin() + (i + 1) * classes);
        if (!masks.empty()) out.masks.insert(out.masks.end(), masks.begin() + i * hw, masks.begin() + (i + 1) * hw);
    }
    return out;
}

void write_gray_png(const fs::path& path, const std::uint8_t* pixels, int height, int width) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const cv::Mat m(height, width, CV_8UC1, const_cast<std::uint8_t*>(pixels));
    if (!cv::imwrite(path.string(), m)) throw InputError("cannot write image " + path.string());
}

std::vector<std::uint8_t> read_gray_png(const fs::path& path, int& height, int& width) {
    const cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (m.empty()) throw InputError("cannot read image " + path.string());
    height = m.rows;
    width = m.cols;
    std::vector<std::uint8_t> out(static_cast<std::size_t>(height) * width);
    for (int y = 0; y < height; ++y) std::copy_n(m.ptr<std::uint8_t>(y), width, out.data() + std::size_t(y) * width);
    return out;
}

namespace {

/// Reads images listed in order; all must share one size.
Tensor<float> load_images(const fs::path& root, const std::vector<std::string>& paths, int& h, int& w) {
    h = w = -1;
    std::vector<float> data;
    for (const auto& p : paths) {
        int ih, iw;
        const auto px = read_gray_png(root / p, ih, iw);
        if (h < 0) {
            h = ih;
            w = iw;
        } else if (ih != h || iw != w) {
            throw InputError("image " + p + " is " + std::to_string(ih) + "x" + std::to_string(iw) + ", expected " +
                             std::to_string(h) + "x" + std::to_string(w));
        }
        for (auto v : px) data.push_back(static_cast<float>(v) / 255.0f);
    }
    if (paths.empty()) return {};
    return Tensor<float>(Shape{static_cast<std::int64_t>(paths.size()), 1, h, w}, std::move(data));
}

std::vector<std::uint8_t> load_masks(const fs::path& root, const std::vector<SegmentationEntry>& entries, int h,
                                     int w) {
    std::vector<std::uint8_t> out;
    for (const auto& e : entries) {
        int mh, mw;
        const auto px = read_gray_png(root / e.mask, mh, mw);
        if (mh != h || mw != w) throw InputError("mask " + e.mask + " does not match its image dimensions");
        for (auto v : px) {
            if (v != 0 && v != 255 && v != 1) throw InputError("mask " + e.mask + " is not binary");
            out.push_back(v != 0);
        }
    }
    return out;
}

}  // namespace

Dataset load_dataset(const ClassificationManifest& m) {
    std::vector<std::string> paths;
    Dataset d;
    d.classes = static_cast<std::int64_t>(m.class_names.size());
    for (const auto& e : m.entries) {
        paths.push_back(e.image);
        d.labels.insert(d.labels.end(), e.labels.begin(), e.labels.end());
    }
    int h, w;
    d.images = load_images(m.root, paths, h, w);
    d.id = m.root.string();
    return d;
}

Dataset load_dataset(const SegmentationManifest& m) {
    std::vector<std::string> paths;
    for (const auto& e : m.entries) paths.push_back(e.image);
    Dataset d;
    int h, w;
    d.images = load_images(m.root, paths, h, w);
    d.masks = load_masks(m.root, m.entries, h, w);
    d.id = m.root.string();
    return d;
}

NormalizationStats compute_stats(const Dataset& d) {
    if (d.size() == 0) throw InputError("compute_stats: empty dataset");
    const std::int64_t n = d.images.dim(0), c = d.images.dim(1), hw = d.images.dim(2) * d.images.dim(3);
    NormalizationStats s;
    s.source = d.id;
    for (std::int64_t ch = 0; ch < c; ++ch) {
        double sum = 0.0;
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t p = 0; p < hw; ++p) sum += d.images[(i * c + ch) * hw + p];
        const double count = static_cast<double>(n * hw);
        const double mean = sum / count;
        double ss = 0.0;
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t p = 0; p < hw; ++p) {
                const double e = d.images[(i * c + ch) * hw + p] - mean;
                ss += e * e;
            }
        const double sd = std::sqrt(ss / count);
        if (!(sd > 0.0)) throw InputError("compute_stats: channel " + std::to_string(ch) + " is constant (std 0)");
        s.mean.push_back(mean);
        s.std.push_back(sd);
    }
    return s;
}

void AugmentationPolicy::validate() const {
    if (crop_size < 1) throw ConfigError("augmentation crop_size must be >= 1");
    if (hflip_prob < 0 || hflip_prob > 1) throw ConfigError("augmentation hflip_prob must lie in [0, 1]");
    if (rotation_range < 0 || rotation_range > 180) throw ConfigError("augmentation rotation_range must lie in [0, 180]");
    if (!(crop_scale_min > 0) || crop_scale_min > 1) throw ConfigError("augmentation crop_scale_min must lie in (0, 1]");
}

namespace {

struct Geometry {
    cv::Rect crop;
    bool flip = false;
    double angle = 0.0;
};

Geometry sample_geometry(int h, int w, const AugmentationPolicy& p, Rng& rng) {
    p.validate();
    if (h < p.crop_size || w < p.crop_size)
        throw InputError("image " + std::to_string(h) + "x" + std::to_string(w) + " is smaller than crop size " +
                         std::to_string(p.crop_size));
    Geometry g;
    const double scale = rng.uniform(p.crop_scale_min, 1.0);
    const int side = std::clamp(static_cast<int>(std::lround(std::sqrt(scale * h * w))), 1, std::min(h, w));
    const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(h - side + 1)));
    const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(w - side + 1)));
    g.crop = cv::Rect(x0, y0, side, side);
    g.flip = rng.bernoulli(p.hflip_prob);
    g.angle = p.rotation_range > 0 ? rng.uniform(-p.rotation_range, p.rotation_range) : 0.0;
    return g;
}

cv::Mat apply_geometry(const cv::Mat& src, const Geometry& g, int out_size, int interp) {
    cv::Mat m = src(g.crop).clone();
    if (m.rows != out_size) cv::resize(m, m, cv::Size(out_size, out_size), 0, 0, interp);
    if (g.flip) cv::flip(m, m, 1);
    if (g.angle != 0.0) {
        const cv::Point2f centre((out_size - 1) * 0.5f, (out_size - 1) * 0.5f);
        const cv::Mat rot = cv::getRotationMatrix2D(centre, g.angle, 1.0);
        cv::warpAffine(m, m, rot, m.size(), interp, cv::BORDER_REPLICATE);
    }
    return m;
}

Tensor<float> augment_with(const Tensor<float>& image, const Geometry& g, int out_size) {
    const int c = static_cast<int>(image.dim(0)), h = static_cast<int>(image.dim(1)), w = static_cast<int>(image.dim(2));
    Tensor<float> out(Shape{c, out_size, out_size});
    for (int ch = 0; ch < c; ++ch) {
        const cv::Mat src(h, w, CV_32FC1, const_cast<float*>(image.data()) + std::int64_t(ch) * h * w);
        const cv::Mat dst = apply_geometry(src, g, out_size, cv::INTER_LINEAR);
        for (int y = 0; y < out_size; ++y)
            std::copy_n(dst.ptr<float>(y), out_size, out.data() + (std::int64_t(ch) * out_size + y) * out_size);
    }
    return out;
}

}  // namespace

Tensor<float> augment(const Tensor<float>& image, const AugmentationPolicy& policy, Rng& rng) {
    if (image.rank() != 3) throw InputError("augment expects [C, H, W], got " + shape_str(image.shape()));
    const auto g = sample_geometry(static_cast<int>(image.dim(1)), static_cast<int>(image.dim(2)), policy, rng);
    return augment_with(image, g, policy.crop_size);
}

std::pair<Tensor<float>, Tensor<float>> augment_pair(const Tensor<float>& image, const AugmentationPolicy& policy,
                                                     Rng& rng) {
    auto a = augment(image, policy, rng);
    auto b = augment(image, policy, rng);
    return {std::move(a), std::move(b)};
}

Batch load_batch(const Dataset& d, const std::vector<std::int64_t>& indices, const NormalizationStats& stats,
                 const std::optional<AugmentationPolicy>& augmentation, Rng& rng) {
    if (indices.empty()) throw InputError("load_batch: empty batch");
    const std::int64_t c = d.images.dim(1), h = d.images.dim(2), w = d.images.dim(3);
    if (static_cast<std::int64_t>(stats.mean.size()) != c || static_cast<std::int64_t>(stats.std.size()) != c)
        throw InputError("load_batch: normalization stats have " + std::to_string(stats.mean.size()) +
                         " channels, images have " + std::to_string(c));
    const std::int64_t s = augmentation ? augmentation->crop_size : h;
    const std::int64_t b = static_cast<std::int64_t>(indices.size());
    if (!augmentation && h != w) throw InputError("load_batch: images must be square");
    Batch out;
    out.images = Tensor<float>(Shape{b, c, s, s});
    if (d.classes > 0 && !d.labels.empty()) out.labels = Tensor<float>(Shape{b, d.classes});
    if (d.has_masks()) out.masks = Tensor<float>(Shape{b, 1, s, s});
    for (std::int64_t k = 0; k < b; ++k) {
        const auto i = indices[static_cast<std::size_t>(k)];
        if (i < 0 || i >= d.size()) throw InputError("load_batch: index " + std::to_string(i) + " out of range");
        Tensor<float> img(Shape{c, h, w}, std::vector<float>(d.images.data() + i * c * h * w,
                                                             d.images.data() + (i + 1) * c * h * w));
        std::vector<float> mask;
        if (d.has_masks())
            mask.assign(d.masks.begin() + i * h * w, d.masks.begin() + (i + 1) * h * w);
        if (augmentation) {
            const auto g = sample_geometry(static_cast<int>(h), static_cast<int>(w), *augmentation, rng);
            img = augment_with(img, g, static_cast<int>(s));
            if (d.has_masks()) {
                cv::Mat m(static_cast<int>(h), static_cast<int>(w), CV_32FC1, mask.data());
                const cv::Mat t = apply_geometry(m, g, static_cast<int>(s), cv::INTER_NEAREST);
                mask.assign(static_cast<std::size_t>(s * s), 0.0f);
                for (int y = 0; y < s; ++y) std::copy_n(t.ptr<float>(y), s, mask.data() + y * s);
            }
        }
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const float mean = static_cast<float>(stats.mean[ch]);
            const float inv = static_cast<float>(1.0 / stats.std[ch]);
            for (std::int64_t p = 0; p < s * s; ++p)
                out.images[(k * c + ch) * s * s + p] = (img[ch * s * s + p] - mean) * inv;
        }
        if (!out.labels.empty())
            for (std::int64_t j = 0; j < d.classes; ++j) out.labels[k * d.classes + j] = d.labels[i * d.classes + j];
        if (d.has_masks()) std::copy(mask.begin(), mask.end(), out.masks.data() + k * s * s);
    }
    return out;
}

std::string to_string(Primitive p) {
    switch (p) {
        case Primitive::disk: return "disk";
        case Primitive::square: return "square";
        case Primitive::ring: return "ring";
        case Primitive::bar: return "bar";
        case Primitive::cross: return "cross";
        case Primitive::triangle: return "triangle";
    }
    return "?";
}

Primitive primitive_from_string(const std::string& s) {
    for (auto p : {Primitive::disk, Primitive::square, Primitive::ring, Primitive::bar, Primitive::cross,
                   Primitive::triangle})
        if (to_string(p) == s) return p;
    throw ConfigError("unknown lesion primitive '" + s + "'");
}

std::vector<LesionClass> SyntheticConfig::default_lesion_grammar() {
    return {
        {"nodule", Primitive::disk, 3.0, 5.0, 0.35, 0.55},
        {"mass", Primitive::square, 3.0, 5.0, 0.35, 0.55},
        {"cyst", Primitive::ring, 4.0, 6.0, 0.35, 0.55},
        {"streak", Primitive::bar, 5.0, 8.0, 0.35, 0.55},
    };
}

void SyntheticConfig::validate() const {
    if (image_size < 16) throw ConfigError("synthetic image_size must be >= 16");
    if (classes.empty()) throw ConfigError("synthetic grammar needs at least one class");
    if (class_prob <= 0 || class_prob >= 1) throw ConfigError("synthetic class_prob must lie in (0, 1)");
    if (noise < 0) throw ConfigError("synthetic noise must be >= 0");
    if (n_train < 1 || n_val < 0 || n_test < 0) throw ConfigError("synthetic split sizes must be positive");
    for (std::size_t i = 0; i < classes.size(); ++i) {
        const auto& a = classes[i];
        if (a.name.empty() || a.name.find_first_of(",\t\n") != std::string::npos)
            throw ConfigError("lesion class " + std::to_string(i) + " needs a name without ',' or tabs");
        if (a.min_size < 1 || a.max_size < a.min_size || 2 * a.max_size + 2 > image_size)
            throw ConfigError("lesion class '" + a.name + "' has an invalid size range");
        if (a.min_intensity <= 0 || a.max_intensity < a.min_intensity || a.max_intensity > 1)
            throw ConfigError("lesion class '" + a.name + "' has an invalid intensity range");
        for (std::size_t j = 0; j < i; ++j) {
            const auto& b = classes[j];
            if (a.name == b.name) throw ConfigError("duplicate lesion class name '" + a.name + "'");
            if (a.shape == b.shape && a.min_size <= b.max_size && b.min_size <= a.max_size)
                throw ConfigError("lesion classes '" + b.name + "' and '" + a.name + "' use the same primitive (" +
                                  to_string(a.shape) + ") with overlapping sizes");
        }
    }
}

namespace {

void draw_primitive(cv::Mat& mask, Primitive shape, cv::Point2d c, double size, double angle) {
    const auto pt = [&](double dx, double dy) {
        const double ca = std::cos(angle), sa = std::sin(angle);
        return cv::Point(static_cast<int>(std::lround(c.x + ca * dx - sa * dy)),
                         static_cast<int>(std::lround(c.y + sa * dx + ca * dy)));
    };
    const int r = static_cast<int>(std::lround(size));
    const cv::Point centre(static_cast<int>(std::lround(c.x)), static_cast<int>(std::lround(c.y)));
    switch (shape) {
        case Primitive::disk: cv::circle(mask, centre, r, 255, cv::FILLED, cv::LINE_8); break;
        case Primitive::ring: cv::circle(mask, centre, r, 255, 2, cv::LINE_8); break;
        case Primitive::square:
            cv::rectangle(mask, centre - cv::Point(r, r), centre + cv::Point(r, r), 255, cv::FILLED, cv::LINE_8);
            break;
        case Primitive::bar: {
            const std::vector<cv::Point> poly{pt(-size, -1), pt(size, -1), pt(size, 1), pt(-size, 1)};
            cv::fillConvexPoly(mask, poly, 255, cv::LINE_8);
            break;
        }
        case Primitive::cross: {
            cv::line(mask, pt(-size, 0), pt(size, 0), 255, 2, cv::LINE_8);
            cv::line(mask, pt(0, -size), pt(0, size), 255, 2, cv::LINE_8);
            break;
        }
        case Primitive::triangle: {
            const double k = std::numbers::sqrt3 / 2.0;
            const std::vector<cv::Point> poly{pt(0, -size), pt(k * size, size / 2), pt(-k * size, size / 2)};
            cv::fillConvexPoly(mask, poly, 255, cv::LINE_8);
            break;
        }
    }
}

Dataset generate_split(const SyntheticConfig& cfg, std::int64_t n, Rng rng, const std::string& id) {
    const int s = cfg.image_size;
    const auto nc = static_cast<std::int64_t>(cfg.classes.size());
    Dataset d;
    d.id = id;
    d.classes = nc;
    d.images = Tensor<float>(Shape{n, 1, s, s});
    d.labels.assign(static_cast<std::size_t>(n * nc), 0);
    d.masks.assign(static_cast<std::size_t>(n) * s * s, 0);
    cv::Mat canvas(s, s, CV_64FC1), lesion(s, s, CV_8UC1), all(s, s, CV_8UC1);
    for (std::int64_t i = 0; i < n; ++i) {
        // Background: a soft elliptical "body" over a level with a linear gradient.
        const double level = rng.uniform(0.15, 0.3);
        const double gx = rng.uniform(-0.1, 0.1), gy = rng.uniform(-0.1, 0.1);
        const double ex = s * rng.uniform(0.3, 0.45), ey = s * rng.uniform(0.35, 0.5);
        const double body = rng.uniform(0.1, 0.2);
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                const double u = (x - 0.5 * s) / ex, v = (y - 0.5 * s) / ey;
                const double r2 = u * u + v * v;
                canvas.at<double>(y, x) = level + gx * (x - 0.5 * s) / s + gy * (y - 0.5 * s) / s + body * std::exp(-r2);
            }
        all.setTo(0);
        for (std::int64_t c = 0; c < nc; ++c) {
            if (!rng.bernoulli(cfg.class_prob)) continue;
            const auto& lc = cfg.classes[static_cast<std::size_t>(c)];
            d.labels[i * nc + c] = 1;
            const double size = rng.uniform(lc.min_size, lc.max_size);
            const double margin = size + 1.0;
            const cv::Point2d centre(rng.uniform(margin, s - 1 - margin), rng.uniform(margin, s - 1 - margin));
            const double angle = rng.uniform(0.0, std::numbers::pi);
            const double intensity = rng.uniform(lc.min_intensity, lc.max_intensity);
            lesion.setTo(0);
            draw_primitive(lesion, lc.shape, centre, size, angle);
            for (int y = 0; y < s; ++y)
                for (int x = 0; x < s; ++x)
                    if (lesion.at<std::uint8_t>(y, x)) canvas.at<double>(y, x) += intensity;
            all |= lesion;
        }
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                double v = canvas.at<double>(y, x);
                if (cfg.noise > 0) v += rng.normal(0.0, cfg.noise);
                // Quantize to 8 bits so the in-memory data equals what a PNG round trip gives.
                const double q = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
                d.images[(i * s + y) * s + x] = static_cast<float>(q / 255.0);
                d.masks[(static_cast<std::size_t>(i) * s + y) * s + x] = all.at<std::uint8_t>(y, x) != 0;
            }
    }
    return d;
}

}  // namespace

SyntheticData synth_generate(const SyntheticConfig& config) {
    config.validate();
    Rng root(config.seed);
    SyntheticData out;
    for (const auto& c : config.classes) out.class_names.push_back(c.name);
    const std::string tag = "synthetic:seed=" + std::to_string(config.seed);
    out.train = generate_split(config, config.n_train, root.fork(1), tag + ":train");
    out.val = generate_split(config, config.n_val, root.fork(2), tag + ":val");
    out.test = generate_split(config, config.n_test, root.fork(3), tag + ":test");
    return out;
}

void synth_write(const SyntheticData& data, const fs::path& dir) {
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
    const std::pair<const char*, const Dataset*> splits[] = {{"train", &data.train}, {"val", &data.val}, {"test", &data.test}};
    for (const auto& [name, d] : splits) {
        ClassificationManifest cm;
        cm.class_names = data.class_names;
        SegmentationManifest sm;
        if (d->size() == 0) {
            write_manifest(dir / ("cls_" + std::string(name) + ".tsv"), cm);
            write_manifest(dir / ("seg_" + std::string(name) + ".tsv"), sm);
            continue;
        }
        const int h = static_cast<int>(d->images.dim(2)), w = static_cast<int>(d->images.dim(3));
        std::vector<std::uint8_t> px(static_cast<std::size_t>(h) * w);
        for (std::int64_t i = 0; i < d->size(); ++i) {
            char stem[64];
            std::snprintf(stem, sizeof stem, "%s_%05lld.png", name, static_cast<long long>(i));
            const std::string img = std::string("images/") + stem, msk = std::string("masks/") + stem;
            for (std::size_t p = 0; p < px.size(); ++p)
                px[p] = static_cast<std::uint8_t>(std::lround(d->images[i * h * w + static_cast<std::int64_t>(p)] * 255.0f));
            write_gray_png(dir / img, px.data(), h, w);
            for (std::size_t p = 0; p < px.size(); ++p) px[p] = d->masks[i * h * w + p] ? 255 : 0;
            write_gray_png(dir / msk, px.data(), h, w);
            cm.entries.push_back({img, std::vector<std::uint8_t>(d->labels.begin() + i * d->classes,
                                                                 d->labels.begin() + (i + 1) * d->classes)});
            sm.entries.push_back({img, msk});
        }
        write_manifest(dir / ("cls_" + std::string(name) + ".tsv"), cm);
        write_manifest(dir / ("seg_" + std::string(name) + ".tsv"), sm);
    }
}

SyntheticData load_splits(const fs::path& dir) {
    SyntheticData out;
    Dataset* targets[] = {&out.train, &out.val, &out.test};
    const char* names[] = {"train", "val", "test"};
    for (int k = 0; k < 3; ++k) {
        const auto cm = read_classification_manifest(dir / ("cls_" + std::string(names[k]) + ".tsv"));
        out.class_names = cm.class_names;
        *targets[k] = load_dataset(cm);
        const auto seg_path = dir / ("seg_" + std::string(names[k]) + ".tsv");
        if (fs::exists(seg_path)) {
            const auto sm = read_segmentation_manifest(seg_path);
            if (sm.entries.size() != cm.entries.size())
                throw InputError(seg_path.string() + " lists a different number of images than its classification manifest");
            for (std::size_t i = 0; i < sm.entries.size(); ++i)
                if (sm.entries[i].image != cm.entries[i].image)
                    throw InputError(seg_path.string() + ": entry " + std::to_string(i) + " names a different image");
            if (targets[k]->size() > 0)
                targets[k]->masks = load_masks(sm.root, sm.entries, static_cast<int>(targets[k]->images.dim(2)),
                                               static_cast<int>(targets[k]->images.dim(3)));
        }
        targets[k]->id = (dir / names[k]).string();
    }
    return out;
}

}  // namespace ftlab
