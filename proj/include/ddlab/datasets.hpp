#pragma once

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "ddlab/rng.hpp"
#include "ddlab/tensor.hpp"

namespace ddlab {

/// N labeled images, pixels in [0,1], stored [N,H,W,C] row-major.
struct LabeledImageSet {
    Tensor images;            // [N,H,W,C]
    std::vector<int> labels;  // length N, values in [0, num_classes)
    int num_classes = 0;

    int size() const { return images.rank() == 4 ? images.dim(0) : 0; }
    int height() const { return images.dim(1); }
    int width() const { return images.dim(2); }
    int channels() const { return images.dim(3); }
    std::size_t pixels_per_image() const {
        return static_cast<std::size_t>(height()) * width() * channels();
    }

    double* image_data(int i) { return images.data() + static_cast<std::size_t>(i) * pixels_per_image(); }
    const double* image_data(int i) const {
        return images.data() + static_cast<std::size_t>(i) * pixels_per_image();
    }

    Tensor image(int i) const {
        Tensor out({height(), width(), channels()});
        std::copy(image_data(i), image_data(i) + pixels_per_image(), out.data());
        return out;
    }

    void set_image(int i, const Tensor& img) {
        if (img.size() != pixels_per_image()) throw ContractError("set_image: size mismatch");
        std::copy(img.data(), img.data() + img.size(), image_data(i));
    }

    void validate() const {
        if (size() < 1) throw ContractError("image set must hold at least one image");
        if (labels.size() != static_cast<std::size_t>(size()))
            throw ContractError("label count does not match image count");
        for (int l : labels)
            if (l < 0 || l >= num_classes) throw ContractError("label out of range");
        for (double v : images.vec())
            if (!(v >= 0.0 && v <= 1.0)) throw ContractError("pixel outside [0,1]");
    }

    std::vector<int> indices_of_class(int k) const {
        std::vector<int> out;
        for (int i = 0; i < size(); ++i)
            if (labels[static_cast<std::size_t>(i)] == k) out.push_back(i);
        return out;
    }
};

struct DatasetSpec {
    enum class Source { Synthetic, File };
    Source source = Source::Synthetic;
    int num_classes = 4;
    int height = 16;
    int width = 16;
    int channels = 1;
    int train_size = 2000;
    int test_size = 400;
    std::uint64_t seed = 0;
    double noise_std = 0.1;  // pixel noise of the synthetic generator
    std::string path;        // IDT file prefix for Source::File

    void validate() const {
        if (num_classes < 2) throw ConfigError("dataset: num_classes must be >= 2");
        if (height < 8 || width < 8) throw ConfigError("dataset: height and width must be >= 8");
        if (channels != 1 && channels != 3) throw ConfigError("dataset: channels must be 1 or 3");
        if (train_size < 1 || test_size < 1) throw ConfigError("dataset: sizes must be >= 1");
        if (noise_std < 0.0) throw ConfigError("dataset: noise_std must be >= 0");
    }
};

namespace detail {

// Fixed per-class base frequencies keep the class templates pairwise
// distinguishable regardless of the seed.
inline std::pair<int, int> base_mode(int k) {
    static constexpr std::pair<int, int> table[] = {
        {1, 0}, {0, 1}, {1, 1}, {2, 1}, {1, 2}, {2, 0}, {0, 2}, {2, 2}, {3, 1}, {1, 3},
    };
    constexpr int n = static_cast<int>(std::size(table));
    auto [fy, fx] = table[k % n];
    const int boost = k / n;
    return {fy + boost, fx + boost};
}

/// Smooth per-class template: a fixed base cosine mode plus up to three
/// seeded low-frequency modes, rescaled into [0.15, 0.85].
inline Tensor class_template(const DatasetSpec& spec, int k) {
    Tensor tpl({spec.height, spec.width, spec.channels});
    const double two_pi = 2.0 * std::numbers::pi;
    for (int c = 0; c < spec.channels; ++c) {
        Rng rng(derive_seed(spec.seed, "template", static_cast<std::uint64_t>(k),
                            static_cast<std::uint64_t>(c)));
        auto [bfy, bfx] = base_mode(k);
        struct Mode { double fy, fx, amp, phase; };
        std::vector<Mode> modes;
        modes.push_back({static_cast<double>(bfy), static_cast<double>(bfx), 0.5,
                         rng.uniform(0.0, two_pi)});
        const int extra = 1 + static_cast<int>(rng.below(3));  // 1..3 extra modes
        for (int m = 0; m < extra; ++m)
            modes.push_back({static_cast<double>(rng.below(4)), static_cast<double>(rng.below(4)),
                             rng.uniform(0.08, 0.2), rng.uniform(0.0, two_pi)});

        double lo = 1e300, hi = -1e300;
        std::vector<double> vals(static_cast<std::size_t>(spec.height) * spec.width);
        for (int y = 0; y < spec.height; ++y) {
            for (int x = 0; x < spec.width; ++x) {
                double v = 0.0;
                for (const Mode& m : modes)
                    v += m.amp * std::cos(two_pi * (m.fy * y / spec.height + m.fx * x / spec.width) +
                                          m.phase);
                vals[static_cast<std::size_t>(y) * spec.width + x] = v;
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
        }
        const double span = hi - lo > 1e-12 ? hi - lo : 1.0;
        for (int y = 0; y < spec.height; ++y)
            for (int x = 0; x < spec.width; ++x) {
                const double v = vals[static_cast<std::size_t>(y) * spec.width + x];
                tpl.vec()[(static_cast<std::size_t>(y) * spec.width + x) * spec.channels + c] =
                    0.15 + 0.7 * (v - lo) / span;
            }
    }
    tpl.snap_f32();
    return tpl;
}

inline LabeledImageSet synth_split(const DatasetSpec& spec, int count,
                                   const std::vector<Tensor>& templates, const char* tag) {
    LabeledImageSet set;
    set.num_classes = spec.num_classes;
    set.images = Tensor({count, spec.height, spec.width, spec.channels});
    set.labels.resize(static_cast<std::size_t>(count));
    Rng rng(derive_seed(spec.seed, tag));
    for (int i = 0; i < count; ++i) {
        const int k = i % spec.num_classes;  // balanced within +-1 by construction
        set.labels[static_cast<std::size_t>(i)] = k;
        const Tensor& tpl = templates[static_cast<std::size_t>(k)];
        double* dst = set.image_data(i);
        for (std::size_t p = 0; p < tpl.size(); ++p) {
            double v = tpl[p];
            if (spec.noise_std > 0.0) v += spec.noise_std * rng.normal();
            dst[p] = std::clamp(v, 0.0, 1.0);
        }
    }
    set.images.snap_f32();
    return set;
}

inline void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& buf, std::uint16_t v) {
    for (int i = 0; i < 2; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& buf, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(buf, bits);
}

/// Sequential little-endian reader that tracks the current byte offset for
/// format diagnostics.
class ByteReader {
public:
    ByteReader(std::string data, std::string name)
        : data_(std::move(data)), name_(std::move(name)) {}

    std::size_t offset() const { return pos_; }

    std::uint32_t u32() {
        need(4, "u32 field");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint16_t u16() {
        need(2, "u16 field");
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i)
            v |= static_cast<std::uint16_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 2;
        return v;
    }

    std::uint8_t u8() {
        need(1, "u8 field");
        return static_cast<std::uint8_t>(data_[pos_++]);
    }

    float f32() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }

    void expect_magic(const char* magic) {
        const std::size_t at = pos_;
        need(4, "magic");
        if (std::memcmp(data_.data() + pos_, magic, 4) != 0)
            throw FormatError(name_ + ": bad magic, expected \"" + magic + "\"", at);
        pos_ += 4;
    }

    void expect_end() {
        if (pos_ != data_.size())
            throw FormatError(name_ + ": trailing bytes after payload", pos_);
    }

    void need(std::size_t n, const char* what) const {
        if (pos_ + n > data_.size())
            throw FormatError(name_ + ": truncated payload, expected " + what, pos_);
    }

private:
    std::string data_;
    std::string name_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string(), 0);
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return data;
}

inline void write_file(const std::filesystem::path& path, const std::string& data) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing", 0);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw FormatError("short write to " + path.string(), 0);
}

}  // namespace detail

/// Deterministic synthetic dataset: per-class low-frequency templates plus
/// i.i.d. pixel noise, clipped to [0,1]. Same spec + seed always reproduces
/// bit-identical tensors.
inline std::pair<LabeledImageSet, LabeledImageSet> generate_synthetic(const DatasetSpec& spec) {
    spec.validate();
    if (spec.source != DatasetSpec::Source::Synthetic)
        throw ConfigError("generate_synthetic requires source=synthetic");
    std::vector<Tensor> templates;
    templates.reserve(static_cast<std::size_t>(spec.num_classes));
    for (int k = 0; k < spec.num_classes; ++k)
        templates.push_back(detail::class_template(spec, k));
    LabeledImageSet train = detail::synth_split(spec, spec.train_size, templates, "synth-train");
    LabeledImageSet test = detail::synth_split(spec, spec.test_size, templates, "synth-test");
    return {std::move(train), std::move(test)};
}

// IDT image-set container, little-endian:
//   "IDT1", u32 version=1, u32 N, u32 H, u32 W, u32 C, u32 K,
//   N*H*W*C float32 pixels in N,H,W,C order, N u16 labels.

inline void save_idt(const LabeledImageSet& set, const std::filesystem::path& path) {
    std::string buf;
    buf.reserve(28 + set.images.size() * 4 + set.labels.size() * 2);
    buf.append("IDT1");
    detail::put_u32(buf, 1);
    detail::put_u32(buf, static_cast<std::uint32_t>(set.size()));
    detail::put_u32(buf, static_cast<std::uint32_t>(set.height()));
    detail::put_u32(buf, static_cast<std::uint32_t>(set.width()));
    detail::put_u32(buf, static_cast<std::uint32_t>(set.channels()));
    detail::put_u32(buf, static_cast<std::uint32_t>(set.num_classes));
    for (double v : set.images.vec()) detail::put_f32(buf, static_cast<float>(v));
    for (int l : set.labels) detail::put_u16(buf, static_cast<std::uint16_t>(l));
    detail::write_file(path, buf);
}

inline LabeledImageSet load_idt(const std::filesystem::path& path) {
    detail::ByteReader r(detail::read_file(path), path.string());
    r.expect_magic("IDT1");
    const std::uint32_t version = r.u32();
    if (version != 1) throw FormatError(path.string() + ": unsupported IDT version", r.offset() - 4);
    const std::uint32_t n = r.u32();
    const std::uint32_t h = r.u32();
    const std::uint32_t w = r.u32();
    const std::uint32_t c = r.u32();
    const std::uint32_t k = r.u32();
    if (n == 0) throw FormatError(path.string() + ": empty image set", r.offset() - 20);
    if (k == 0) throw FormatError(path.string() + ": zero classes", r.offset() - 4);

    LabeledImageSet set;
    set.num_classes = static_cast<int>(k);
    set.images = Tensor({static_cast<int>(n), static_cast<int>(h), static_cast<int>(w),
                         static_cast<int>(c)});
    for (std::size_t i = 0; i < set.images.size(); ++i)
        set.images[i] = static_cast<double>(r.f32());
    set.labels.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::size_t at = r.offset();
        const std::uint16_t label = r.u16();
        if (label >= k)
            throw FormatError(path.string() + ": label " + std::to_string(label) +
                                  " >= num_classes " + std::to_string(k),
                              at);
        set.labels[i] = static_cast<int>(label);
    }
    r.expect_end();
    return set;
}

/// Bilinear resize, corner-aligned so that identity sizes reproduce the
/// input exactly and constants stay constant.
inline LabeledImageSet resize(const LabeledImageSet& set, int new_h, int new_w) {
    if (new_h < 1 || new_w < 1) throw ConfigError("resize: target dims must be >= 1");
    const int n = set.size(), h = set.height(), w = set.width(), c = set.channels();
    if (new_h == h && new_w == w) return set;

    LabeledImageSet out;
    out.num_classes = set.num_classes;
    out.labels = set.labels;
    out.images = Tensor({n, new_h, new_w, c});
    const double sy = (new_h == 1) ? 0.0 : static_cast<double>(h - 1) / (new_h - 1);
    const double sx = (new_w == 1) ? 0.0 : static_cast<double>(w - 1) / (new_w - 1);
    for (int i = 0; i < n; ++i) {
        const double* src = set.image_data(i);
        double* dst = out.image_data(i);
        for (int y = 0; y < new_h; ++y) {
            const double fy = y * sy;
            const int y0 = static_cast<int>(fy);
            const int y1 = std::min(y0 + 1, h - 1);
            const double wy = fy - y0;
            for (int x = 0; x < new_w; ++x) {
                const double fx = x * sx;
                const int x0 = static_cast<int>(fx);
                const int x1 = std::min(x0 + 1, w - 1);
                const double wx = fx - x0;
                for (int ch = 0; ch < c; ++ch) {
                    auto px = [&](int yy, int xx) {
                        return src[(static_cast<std::size_t>(yy) * w + xx) * c + ch];
                    };
                    const double top = px(y0, x0) * (1.0 - wx) + px(y0, x1) * wx;
                    const double bot = px(y1, x0) * (1.0 - wx) + px(y1, x1) * wx;
                    dst[(static_cast<std::size_t>(y) * new_w + x) * c + ch] =
                        top * (1.0 - wy) + bot * wy;
                }
            }
        }
    }
    out.images.snap_f32();
    return out;
}

/// Uniform without-replacement draw of ceil(p*N) samples, stratified per
/// class to within +-1 of each class's proportional share. Keeps original
/// sample order.
inline LabeledImageSet subsample(const LabeledImageSet& set, double proportion,
                                 std::uint64_t seed) {
    if (!(proportion > 0.0) || proportion > 1.0)
        throw ConfigError("subsample: proportion must be in (0, 1]");
    const int n = set.size();
    const std::size_t total =
        static_cast<std::size_t>(std::ceil(proportion * static_cast<double>(n)));

    std::vector<std::vector<int>> by_class(static_cast<std::size_t>(set.num_classes));
    for (int i = 0; i < n; ++i) by_class[static_cast<std::size_t>(set.labels[static_cast<std::size_t>(i)])].push_back(i);

    // Largest-remainder allocation of the total across classes.
    std::vector<std::size_t> take(by_class.size(), 0);
    std::vector<std::pair<double, int>> remainders;
    std::size_t allocated = 0;
    for (std::size_t k = 0; k < by_class.size(); ++k) {
        const double ideal = proportion * static_cast<double>(by_class[k].size());
        take[k] = std::min(static_cast<std::size_t>(ideal), by_class[k].size());
        allocated += take[k];
        remainders.push_back({ideal - static_cast<double>(take[k]), static_cast<int>(k)});
    }
    std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (const auto& [frac, k] : remainders) {
        if (allocated >= total) break;
        if (take[static_cast<std::size_t>(k)] < by_class[static_cast<std::size_t>(k)].size()) {
            ++take[static_cast<std::size_t>(k)];
            ++allocated;
        }
    }

    std::vector<int> chosen;
    chosen.reserve(total);
    for (std::size_t k = 0; k < by_class.size(); ++k) {
        Rng rng(derive_seed(seed, "subsample", static_cast<std::uint64_t>(k)));
        for (std::size_t j : rng.sample_without_replacement(by_class[k].size(), take[k]))
            chosen.push_back(by_class[k][j]);
    }
    std::sort(chosen.begin(), chosen.end());

    LabeledImageSet out;
    out.num_classes = set.num_classes;
    out.images = Tensor({static_cast<int>(chosen.size()), set.height(), set.width(),
                         set.channels()});
    out.labels.reserve(chosen.size());
    for (std::size_t i = 0; i < chosen.size(); ++i) {
        const double* src = set.image_data(chosen[i]);
        std::copy(src, src + set.pixels_per_image(),
                  out.images.data() + i * set.pixels_per_image());
        out.labels.push_back(set.labels[static_cast<std::size_t>(chosen[i])]);
    }
    return out;
}

}  // namespace ddlab
