#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace ddlab {

/// Thrown when an operation is called with inputs that violate its contract
/// (shape mismatches, out-of-range arguments discovered at runtime).
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Thrown for invalid user-supplied configuration.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Thrown when a binary artifact file is malformed. Carries the byte offset
/// at which the problem was detected.
struct FormatError : std::runtime_error {
    std::size_t byte_offset;
    FormatError(const std::string& msg, std::size_t offset)
        : std::runtime_error(msg + " (at byte offset " + std::to_string(offset) + ")"),
          byte_offset(offset) {}
};

/// Thrown when an optimization produces non-finite values. `step` is the
/// inner step or outer epoch at which divergence was detected.
struct DivergenceError : std::runtime_error {
    long step;
    DivergenceError(const std::string& msg, long at_step)
        : std::runtime_error(msg + " (step " + std::to_string(at_step) + ")"), step(at_step) {}
};

/// Dense row-major tensor of doubles. All distillation-time math runs in
/// 64-bit so gradients can be checked against central finite differences.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(checked_size(shape_), fill) {}

    Tensor(std::vector<int> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != checked_size(shape_))
            throw ContractError("tensor data size does not match shape");
    }

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // 2-D accessors (rows x cols)
    double& at(int r, int c) { return data_[static_cast<std::size_t>(r) * dim(1) + c]; }
    double at(int r, int c) const { return data_[static_cast<std::size_t>(r) * dim(1) + c]; }

    int rows() const { return rank() >= 1 ? shape_[0] : 0; }
    int cols() const {
        if (rank() == 0) return 0;
        std::size_t c = 1;
        for (int i = 1; i < rank(); ++i) c *= static_cast<std::size_t>(shape_[i]);
        return static_cast<int>(c);
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(std::vector<int> new_shape) const {
        Tensor out(std::move(new_shape));
        if (out.size() != size()) throw ContractError("reshape changes element count");
        out.data_ = data_;
        return out;
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(),
                           [](double v) { return std::isfinite(v); });
    }

    double min() const { return data_.empty() ? 0.0 : *std::min_element(data_.begin(), data_.end()); }
    double max() const { return data_.empty() ? 0.0 : *std::max_element(data_.begin(), data_.end()); }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    void clip(double lo, double hi) {
        for (double& v : data_) v = std::clamp(v, lo, hi);
    }

    /// Snap every value to its nearest float32. Dataset-facing images are
    /// stored as float32 on disk; keeping in-memory pixels on the float32
    /// grid makes save/load round-trips exact.
    void snap_f32() {
        for (double& v : data_) v = static_cast<double>(static_cast<float>(v));
    }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }
    bool operator!=(const Tensor& o) const { return !(*this == o); }

private:
    static std::size_t checked_size(const std::vector<int>& shape) {
        std::size_t n = 1;
        for (int d : shape) {
            if (d < 0) throw ContractError("negative tensor dimension");
            n *= static_cast<std::size_t>(d);
        }
        return shape.empty() ? 0 : n;
    }

    std::vector<int> shape_;
    std::vector<double> data_;
};

inline std::size_t shape_size(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return shape.empty() ? 0 : n;
}

}  // namespace ddlab
