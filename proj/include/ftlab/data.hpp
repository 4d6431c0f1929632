#pragma once

// Datasets, manifests, deterministic splits, normalization statistics, the
// augmentation pipeline, and the synthetic lesion generator.
//
// Manifest files are tab-separated text. The first line is a header:
//   classification:  "#classification<TAB>name_1,name_2,...,name_C"
//   segmentation:    "#segmentation"
// followed by one entry per line:
//   classification:  "relative/path.png<TAB>0,1,0,1"
//   segmentation:    "relative/image.png<TAB>relative/mask.png"
// Paths are relative to the directory holding the manifest.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ftlab/rng.hpp"
#include "ftlab/tensor.hpp"

namespace ftlab {

struct ClassificationEntry {
    std::string image;
    std::vector<std::uint8_t> labels;
    friend bool operator==(const ClassificationEntry&, const ClassificationEntry&) = default;
};

struct ClassificationManifest {
    std::vector<std::string> class_names;
    std::vector<ClassificationEntry> entries;
    std::filesystem::path root;
};

struct SegmentationEntry {
    std::string image;
    std::string mask;
    friend bool operator==(const SegmentationEntry&, const SegmentationEntry&) = default;
};

struct SegmentationManifest {
    std::vector<SegmentationEntry> entries;
    std::filesystem::path root;
};

void write_manifest(const std::filesystem::path& path, const ClassificationManifest& m);
void write_manifest(const std::filesystem::path& path, const SegmentationManifest& m);
ClassificationManifest read_classification_manifest(const std::filesystem::path& path);
SegmentationManifest read_segmentation_manifest(const std::filesystem::path& path);

struct SplitSpec {
    double train = 0.7;
    double val = 0.1;
    double test = 0.2;
    std::uint64_t seed = 0;
    void validate() const;
};

struct SplitIndices {
    std::vector<std::int64_t> train, val, test;
};

/// Shuffled partition of 0..n-1. Train and val sizes are round(fraction * n); test takes the rest.
SplitIndices split_indices(std::int64_t n, const SplitSpec& spec);

template <typename Manifest>
struct ManifestSplit {
    Manifest train, val, test;
};

template <typename Manifest>
ManifestSplit<Manifest> split(const Manifest& m, const SplitSpec& spec) {
    const auto idx = split_indices(static_cast<std::int64_t>(m.entries.size()), spec);
    ManifestSplit<Manifest> out{m, m, m};
    auto take = [&](Manifest& dst, const std::vector<std::int64_t>& ids) {
        dst.entries.clear();
        for (auto i : ids) dst.entries.push_back(m.entries[static_cast<std::size_t>(i)]);
    };
    take(out.train, idx.train);
    take(out.val, idx.val);
    take(out.test, idx.test);
    return out;
}

/// Uniform sample of min(n, size) distinct indices without replacement, in sampled order.
/// n >= size returns 0..size-1 unchanged. Different n are sampled independently.
std::vector<std::int64_t> subsample_indices(std::int64_t size, std::int64_t n, std::uint64_t seed);

/// Images in [0, 1] with optional multi-hot labels and binary masks, held in memory.
struct Dataset {
    Tensor<float> images;               // [n, C, H, W]
    std::vector<std::uint8_t> labels;   // [n, classes] (classification)
    std::int64_t classes = 0;
    std::vector<std::uint8_t> masks;    // [n, H, W] (segmentation)
    std::string id;                     // provenance, e.g. "synthetic:seed=0:train"

    std::int64_t size() const { return images.empty() ? 0 : images.dim(0); }
    bool has_masks() const { return !masks.empty(); }
    Dataset subset(const std::vector<std::int64_t>& indices) const;
};

Dataset load_dataset(const ClassificationManifest& m);
Dataset load_dataset(const SegmentationManifest& m);

struct NormalizationStats {
    std::vector<double> mean;  // per channel
    std::vector<double> std;   // per channel, > 0
    std::string source;
};

/// Exact per-channel mean and population standard deviation over every pixel.
/// Throws InputError for an empty or constant-valued dataset.
NormalizationStats compute_stats(const Dataset& d);

struct AugmentationPolicy {
    int crop_size = 64;
    double hflip_prob = 0.5;
    double rotation_range = 7.0;  // degrees, symmetric
    double crop_scale_min = 0.6;  // minimum crop area as a fraction of the image; 1 = full image
    void validate() const;
};

/// One augmented view [C, crop, crop] of a [C, H, W] image: random crop resized to
/// crop_size, horizontal flip, rotation about the centre. Bilinear, border-replicated.
Tensor<float> augment(const Tensor<float>& image, const AugmentationPolicy& policy, Rng& rng);

/// Two independent views of the same image.
std::pair<Tensor<float>, Tensor<float>> augment_pair(const Tensor<float>& image, const AugmentationPolicy& policy,
                                                     Rng& rng);

struct Batch {
    Tensor<float> images;  // normalized [B, C, S, S]
    Tensor<float> labels;  // [B, classes] multi-hot; empty without labels
    Tensor<float> masks;   // [B, 1, S, S] in {0, 1}; empty without masks
};

/// Gathers `indices` from `d`, augments when a policy is given (masks follow the
/// image geometry), then normalizes (x - mean) / std per channel.
Batch load_batch(const Dataset& d, const std::vector<std::int64_t>& indices, const NormalizationStats& stats,
                 const std::optional<AugmentationPolicy>& augmentation, Rng& rng);

enum class Primitive { disk, square, ring, bar, cross, triangle };
std::string to_string(Primitive p);
Primitive primitive_from_string(const std::string& s);

struct LesionClass {
    std::string name;
    Primitive shape = Primitive::disk;
    double min_size = 3.0;  // radius / half-extent in pixels
    double max_size = 5.0;
    double min_intensity = 0.35;
    double max_intensity = 0.55;
};

struct SyntheticConfig {
    int image_size = 64;
    std::vector<LesionClass> classes = default_lesion_grammar();
    double class_prob = 0.3;  // independent per-class activation probability
    double noise = 0.05;      // Gaussian pixel noise stddev
    std::int64_t n_train = 2000, n_val = 250, n_test = 500;
    std::uint64_t seed = 0;

    static std::vector<LesionClass> default_lesion_grammar();
    /// Throws ConfigError for out-of-range values or two classes sharing a primitive with
    /// overlapping size ranges.
    void validate() const;
};

struct SyntheticData {
    std::vector<std::string> class_names;
    Dataset train, val, test;  // labels and masks both populated
};

SyntheticData synth_generate(const SyntheticConfig& config);

/// Writes images/, masks/ and {cls,seg}_{train,val,test}.tsv manifests under `dir`.
void synth_write(const SyntheticData& data, const std::filesystem::path& dir);

/// Reads cls_{train,val,test}.tsv from `dir`, plus masks from seg_*.tsv when present
/// (the two manifests must list the same images in the same order).
SyntheticData load_splits(const std::filesystem::path& dir);

void write_gray_png(const std::filesystem::path& path, const std::uint8_t* pixels, int height, int width);
std::vector<std::uint8_t> read_gray_png(const std::filesystem::path& path, int& height, int& width);

}  // namespace ftlab
