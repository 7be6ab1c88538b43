#pragma once

#include "mlit/rng.hpp"
#include "mlit/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mlit {

/// Missing, truncated or malformed dataset files.
class IngestError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class DatasetSource { cifar10, cifar100, synthetic };
enum class Split { train, test };

std::string_view source_name(DatasetSource source);
DatasetSource parse_source(std::string_view text);

/// Byte images stored channel-major, record after record: [N, C, H, W].
struct Dataset {
    DatasetSource source = DatasetSource::synthetic;
    Split split = Split::train;
    std::int64_t channels = 3;
    std::int64_t height = 32;
    std::int64_t width = 32;
    int classes = 0;
    std::vector<std::uint8_t> pixels;
    std::vector<int> labels;
    std::vector<int> coarse_labels; // CIFAR-100 only

    std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
    std::int64_t image_bytes() const { return channels * height * width; }
    std::span<const std::uint8_t> image(std::int64_t i) const;
};

/// Parses one CIFAR binary file. CIFAR-10 records are 1 label byte + 3072
/// pixels; CIFAR-100 records are coarse + fine label bytes + 3072 pixels.
Dataset read_cifar_file(const std::filesystem::path& file, DatasetSource variant);

/// Serializes back to the same binary layout.
void write_cifar_file(const std::filesystem::path& file, const Dataset& data);
std::vector<std::uint8_t> encode_cifar(const Dataset& data);

/// Loads a split from the standard extracted layout under `root`
/// (cifar-10-batches-bin/ or cifar-100-binary/, or `root` itself), checking
/// the expected record counts.
Dataset load_cifar(const std::filesystem::path& root, DatasetSource variant, Split split);

/// The first `count` records.
Dataset take(const Dataset& data, std::int64_t count);

/// Gaussian-blob images whose blob position and colour are set by the class;
/// per-image jitter and pixel noise are drawn from `seed`.
Dataset make_synthetic(std::int64_t count, int classes, std::uint64_t seed, std::int64_t size = 32);

/// Bilinear resize of one [C, H, W] float image region (top, left, h, w) to
/// [C, out_h, out_w] with half-pixel centres and edge clamping.
std::vector<float> resize_region_bilinear(std::span<const float> image, std::int64_t channels, std::int64_t height,
                                          std::int64_t width, std::int64_t top, std::int64_t left, std::int64_t h,
                                          std::int64_t w, std::int64_t out_h, std::int64_t out_w);

std::vector<float> resize_bilinear(std::span<const float> image, std::int64_t channels, std::int64_t height,
                                   std::int64_t width, std::int64_t out_h, std::int64_t out_w);

/// Flips [C, H, W] left-right in place.
void hflip(std::span<float> image, std::int64_t channels, std::int64_t height, std::int64_t width);

struct AugmentConfig {
    double hflip_p = 0.5;
    double crop_lo = 0.6;
    double crop_hi = 1.0;
    double mean = 0.5;
    double std = 0.5;
    std::int64_t out_size = 36;
};

void validate(const AugmentConfig& cfg);

struct CropBox {
    std::int64_t top, left, h, w;
};

/// Area fraction in [lo, hi] and aspect ratio in [3/4, 4/3] (log-uniform), up
/// to 10 attempts, then a centred crop clamped to that aspect range.
CropBox random_resized_crop_box(std::int64_t height, std::int64_t width, double lo, double hi, RngStream& rng);

/// Byte image [C, H, W] -> normalized float [C, out, out]. Training applies a
/// random resized crop and a horizontal flip; evaluation only resizes.
std::vector<float> augment(std::span<const std::uint8_t> image, std::int64_t channels, std::int64_t height,
                           std::int64_t width, const AugmentConfig& cfg, bool train, RngStream* rng);

struct Batch {
    Tensor images; // [b, C, out, out]
    std::vector<int> labels;
};

Batch make_batch(const Dataset& data, std::span<const std::int64_t> indices, const AugmentConfig& cfg, bool train,
                 RngStream* rng, DType dtype = DType::f32);

/// A shuffled permutation of 0..n-1.
std::vector<std::int64_t> epoch_order(std::int64_t n, RngStream& rng);

} // namespace mlit
