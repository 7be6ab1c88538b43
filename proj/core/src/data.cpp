#include "mlit/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>

namespace mlit {

namespace fs = std::filesystem;

std::string_view source_name(DatasetSource source) {
    switch (source) {
    case DatasetSource::cifar10:
        return "cifar10";
    case DatasetSource::cifar100:
        return "cifar100";
    case DatasetSource::synthetic:
        return "synthetic";
    }
    return "synthetic";
}

DatasetSource parse_source(std::string_view text) {
    if (text == "cifar10")
        return DatasetSource::cifar10;
    if (text == "cifar100")
        return DatasetSource::cifar100;
    if (text == "synthetic")
        return DatasetSource::synthetic;
    throw ConfigError("unknown dataset '" + std::string(text) + "' (expected cifar10, cifar100 or synthetic)");
}

std::span<const std::uint8_t> Dataset::image(std::int64_t i) const {
    if (i < 0 || i >= size())
        throw ContractError("dataset index " + std::to_string(i) + " out of range");
    const auto bytes = static_cast<std::size_t>(image_bytes());
    return {pixels.data() + static_cast<std::size_t>(i) * bytes, bytes};
}

namespace {

constexpr std::int64_t kCifarPixels = 3 * 32 * 32;

std::int64_t label_bytes(DatasetSource variant) {
    switch (variant) {
    case DatasetSource::cifar10:
        return 1;
    case DatasetSource::cifar100:
        return 2;
    case DatasetSource::synthetic:
        break;
    }
    throw ConfigError("CIFAR reader: synthetic datasets have no file format");
}

std::vector<std::uint8_t> read_all(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in)
        throw IngestError("cannot open " + file.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void append(Dataset& into, const Dataset& from) {
    into.pixels.insert(into.pixels.end(), from.pixels.begin(), from.pixels.end());
    into.labels.insert(into.labels.end(), from.labels.begin(), from.labels.end());
    into.coarse_labels.insert(into.coarse_labels.end(), from.coarse_labels.begin(), from.coarse_labels.end());
}

} // namespace

Dataset read_cifar_file(const fs::path& file, DatasetSource variant) {
    const std::int64_t lb = label_bytes(variant);
    const std::int64_t record = lb + kCifarPixels;
    const auto bytes = read_all(file);
    const auto n = static_cast<std::int64_t>(bytes.size());
    if (n == 0 || n % record != 0)
        throw IngestError(file.string() + ": size " + std::to_string(n) + " is not a multiple of the " +
                          std::to_string(record) + "-byte record");
    Dataset d;
    d.source = variant;
    d.classes = variant == DatasetSource::cifar100 ? 100 : 10;
    const std::int64_t count = n / record;
    d.pixels.reserve(static_cast<std::size_t>(count * kCifarPixels));
    for (std::int64_t r = 0; r < count; ++r) {
        const auto* rec = bytes.data() + r * record;
        const int label = rec[lb - 1];
        if (label >= d.classes)
            throw IngestError(file.string() + ": record " + std::to_string(r) + " has label " +
                              std::to_string(label) + " >= " + std::to_string(d.classes));
        if (lb == 2) {
            if (rec[0] >= 20)
                throw IngestError(file.string() + ": record " + std::to_string(r) + " has coarse label " +
                                  std::to_string(rec[0]) + " >= 20");
            d.coarse_labels.push_back(rec[0]);
        }
        d.labels.push_back(label);
        d.pixels.insert(d.pixels.end(), rec + lb, rec + record);
    }
    return d;
}

std::vector<std::uint8_t> encode_cifar(const Dataset& d) {
    const std::int64_t lb = label_bytes(d.source);
    if (d.image_bytes() != kCifarPixels)
        throw ContractError("CIFAR writer: images must be 3x32x32");
    if (lb == 2 && d.coarse_labels.size() != d.labels.size())
        throw ContractError("CIFAR writer: CIFAR-100 records need coarse labels");
    std::vector<std::uint8_t> out;
    out.reserve(static_cast<std::size_t>(d.size() * (lb + kCifarPixels)));
    for (std::int64_t i = 0; i < d.size(); ++i) {
        if (lb == 2)
            out.push_back(static_cast<std::uint8_t>(d.coarse_labels[static_cast<std::size_t>(i)]));
        out.push_back(static_cast<std::uint8_t>(d.labels[static_cast<std::size_t>(i)]));
        auto img = d.image(i);
        out.insert(out.end(), img.begin(), img.end());
    }
    return out;
}

void write_cifar_file(const fs::path& file, const Dataset& d) {
    const auto bytes = encode_cifar(d);
    std::ofstream out(file, std::ios::binary);
    if (!out)
        throw IngestError("cannot write " + file.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw IngestError("short write to " + file.string());
}

Dataset load_cifar(const fs::path& root, DatasetSource variant, Split split) {
    std::vector<fs::path> files;
    std::int64_t expected = 0;
    fs::path dir = root;
    if (variant == DatasetSource::cifar10) {
        if (fs::exists(root / "cifar-10-batches-bin"))
            dir = root / "cifar-10-batches-bin";
        if (split == Split::train)
            for (int i = 1; i <= 5; ++i)
                files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
        else
            files.push_back(dir / "test_batch.bin");
        expected = split == Split::train ? 50000 : 10000;
    } else if (variant == DatasetSource::cifar100) {
        if (fs::exists(root / "cifar-100-binary"))
            dir = root / "cifar-100-binary";
        files.push_back(dir / (split == Split::train ? "train.bin" : "test.bin"));
        expected = split == Split::train ? 50000 : 10000;
    } else {
        throw ConfigError("load_cifar: synthetic datasets are generated, not loaded");
    }
    Dataset all;
    all.source = variant;
    all.split = split;
    all.classes = variant == DatasetSource::cifar100 ? 100 : 10;
    for (const auto& f : files) {
        if (!fs::exists(f))
            throw IngestError("missing dataset file " + f.string());
        append(all, read_cifar_file(f, variant));
    }
    if (all.size() != expected)
        throw IngestError(dir.string() + ": expected " + std::to_string(expected) + " records, found " +
                          std::to_string(all.size()));
    return all;
}

Dataset take(const Dataset& data, std::int64_t count) {
    if (count < 0 || count > data.size())
        throw ConfigError("take: requested " + std::to_string(count) + " of " + std::to_string(data.size()) +
                          " records");
    Dataset d = data;
    d.labels.resize(static_cast<std::size_t>(count));
    if (!d.coarse_labels.empty())
        d.coarse_labels.resize(static_cast<std::size_t>(count));
    d.pixels.resize(static_cast<std::size_t>(count * data.image_bytes()));
    return d;
}

Dataset make_synthetic(std::int64_t count, int classes, std::uint64_t seed, std::int64_t size) {
    if (classes < 2 || count < 1 || size < 8)
        throw ConfigError("make_synthetic: need count >= 1, classes >= 2, size >= 8");
    Dataset d;
    d.source = DatasetSource::synthetic;
    d.classes = classes;
    d.height = d.width = size;
    d.pixels.resize(static_cast<std::size_t>(count * 3 * size * size));
    RngStream rng(seed);
    const double s = static_cast<double>(size);
    const double radius = 0.28 * s, sigma = 0.12 * s;
    for (std::int64_t i = 0; i < count; ++i) {
        const int c = static_cast<int>(i % classes);
        d.labels.push_back(c);
        const double angle = 2.0 * std::numbers::pi * c / classes;
        const double cy = s / 2 + radius * std::sin(angle) + rng.uniform(-0.05, 0.05) * s;
        const double cx = s / 2 + radius * std::cos(angle) + rng.uniform(-0.05, 0.05) * s;
        // Class colour: one of seven channel mixes, so neighbouring classes differ.
        const int mix = c % 7 + 1;
        const double colour[3] = {mix & 1 ? 1.0 : 0.25, mix & 2 ? 1.0 : 0.25, mix & 4 ? 1.0 : 0.25};
        auto* img = d.pixels.data() + i * 3 * size * size;
        for (std::int64_t ch = 0; ch < 3; ++ch)
            for (std::int64_t y = 0; y < size; ++y)
                for (std::int64_t x = 0; x < size; ++x) {
                    const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
                    const double blob = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
                    const double v = 40.0 + 190.0 * colour[ch] * blob + 6.0 * rng.normal();
                    img[(ch * size + y) * size + x] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
                }
    }
    return d;
}

std::vector<float> resize_region_bilinear(std::span<const float> image, std::int64_t channels, std::int64_t height,
                                          std::int64_t width, std::int64_t top, std::int64_t left, std::int64_t h,
                                          std::int64_t w, std::int64_t out_h, std::int64_t out_w) {
    if (channels <= 0 || h <= 0 || w <= 0 || out_h <= 0 || out_w <= 0 || top < 0 || left < 0 ||
        top + h > height || left + w > width ||
        static_cast<std::int64_t>(image.size()) != channels * height * width)
        throw ShapeError("resize: invalid region or image size");
    struct Tap {
        std::int64_t i0, i1;
        float f;
    };
    auto taps = [](std::int64_t in, std::int64_t out) {
        std::vector<Tap> t(static_cast<std::size_t>(out));
        const double scale = static_cast<double>(in) / static_cast<double>(out);
        for (std::int64_t o = 0; o < out; ++o) {
            double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
            src = std::max(src, 0.0);
            auto i0 = std::min(static_cast<std::int64_t>(src), in - 1);
            auto i1 = std::min(i0 + 1, in - 1);
            t[static_cast<std::size_t>(o)] = {i0, i1, static_cast<float>(src - static_cast<double>(i0))};
        }
        return t;
    };
    const auto ty = taps(h, out_h), tx = taps(w, out_w);
    std::vector<float> out(static_cast<std::size_t>(channels * out_h * out_w));
    for (std::int64_t c = 0; c < channels; ++c) {
        const float* plane = image.data() + c * height * width;
        for (std::int64_t oy = 0; oy < out_h; ++oy) {
            const auto& a = ty[static_cast<std::size_t>(oy)];
            const float* r0 = plane + (top + a.i0) * width + left;
            const float* r1 = plane + (top + a.i1) * width + left;
            for (std::int64_t ox = 0; ox < out_w; ++ox) {
                const auto& b = tx[static_cast<std::size_t>(ox)];
                const float top_v = r0[b.i0] + (r0[b.i1] - r0[b.i0]) * b.f;
                const float bot_v = r1[b.i0] + (r1[b.i1] - r1[b.i0]) * b.f;
                out[static_cast<std::size_t>((c * out_h + oy) * out_w + ox)] = top_v + (bot_v - top_v) * a.f;
            }
        }
    }
    return out;
}

std::vector<float> resize_bilinear(std::span<const float> image, std::int64_t channels, std::int64_t height,
                                   std::int64_t width, std::int64_t out_h, std::int64_t out_w) {
    return resize_region_bilinear(image, channels, height, width, 0, 0, height, width, out_h, out_w);
}

void hflip(std::span<float> image, std::int64_t channels, std::int64_t height, std::int64_t width) {
    for (std::int64_t r = 0; r < channels * height; ++r)
        std::reverse(image.begin() + r * width, image.begin() + (r + 1) * width);
}

void validate(const AugmentConfig& cfg) {
    if (!(cfg.crop_lo >= 0.0 && cfg.crop_lo <= cfg.crop_hi && cfg.crop_hi <= 1.0))
        throw ConfigError("augment: crop scale must satisfy 0 <= lo <= hi <= 1");
    if (cfg.hflip_p < 0.0 || cfg.hflip_p > 1.0)
        throw ConfigError("augment: flip probability must be in [0, 1]");
    if (cfg.std <= 0.0 || cfg.out_size <= 0)
        throw ConfigError("augment: std and output size must be positive");
}

CropBox random_resized_crop_box(std::int64_t height, std::int64_t width, double lo, double hi, RngStream& rng) {
    const double area = static_cast<double>(height * width);
    const double log_lo = std::log(3.0 / 4.0), log_hi = std::log(4.0 / 3.0);
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = area * rng.uniform(lo, hi);
        const double ratio = std::exp(rng.uniform(log_lo, log_hi));
        const auto w = static_cast<std::int64_t>(std::lround(std::sqrt(target * ratio)));
        const auto h = static_cast<std::int64_t>(std::lround(std::sqrt(target / ratio)));
        if (w > 0 && h > 0 && w <= width && h <= height) {
            const auto top = rng.below(height - h + 1);
            const auto left = rng.below(width - w + 1);
            return {top, left, h, w};
        }
    }
    const double in_ratio = static_cast<double>(width) / static_cast<double>(height);
    std::int64_t w = width, h = height;
    if (in_ratio < 3.0 / 4.0)
        h = std::lround(static_cast<double>(w) / (3.0 / 4.0));
    else if (in_ratio > 4.0 / 3.0)
        w = std::lround(static_cast<double>(h) * (4.0 / 3.0));
    h = std::min(h, height);
    w = std::min(w, width);
    return {(height - h) / 2, (width - w) / 2, h, w};
}

std::vector<float> augment(std::span<const std::uint8_t> image, std::int64_t channels, std::int64_t height,
                           std::int64_t width, const AugmentConfig& cfg, bool train, RngStream* rng) {
    if (static_cast<std::int64_t>(image.size()) != channels * height * width)
        throw ShapeError("augment: image size does not match dimensions");
    if (train && rng == nullptr)
        throw ContractError("augment: training needs a random stream");
    std::vector<float> src(image.begin(), image.end());
    CropBox box{0, 0, height, width};
    if (train)
        box = random_resized_crop_box(height, width, cfg.crop_lo, cfg.crop_hi, *rng);
    auto out = resize_region_bilinear(src, channels, height, width, box.top, box.left, box.h, box.w, cfg.out_size,
                                      cfg.out_size);
    if (train && rng->uniform() < cfg.hflip_p)
        hflip(out, channels, cfg.out_size, cfg.out_size);
    const float mean = static_cast<float>(cfg.mean), inv_std = static_cast<float>(1.0 / cfg.std);
    for (auto& v : out)
        v = (v / 255.0f - mean) * inv_std;
    return out;
}

Batch make_batch(const Dataset& data, std::span<const std::int64_t> indices, const AugmentConfig& cfg, bool train,
                 RngStream* rng, DType dtype) {
    const auto b = static_cast<std::int64_t>(indices.size());
    const std::int64_t per = data.channels * cfg.out_size * cfg.out_size;
    std::vector<double> values(static_cast<std::size_t>(b * per));
    Batch batch;
    for (std::int64_t s = 0; s < b; ++s) {
        const auto i = indices[static_cast<std::size_t>(s)];
        auto img = augment(data.image(i), data.channels, data.height, data.width, cfg, train, rng);
        std::copy(img.begin(), img.end(), values.begin() + s * per);
        batch.labels.push_back(data.labels[static_cast<std::size_t>(i)]);
    }
    batch.images = Tensor::from_values({b, data.channels, cfg.out_size, cfg.out_size}, values, dtype);
    return batch;
}

std::vector<std::int64_t> epoch_order(std::int64_t n, RngStream& rng) {
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), std::int64_t{0});
    rng.shuffle(order.begin(), order.end());
    return order;
}

} // namespace mlit
