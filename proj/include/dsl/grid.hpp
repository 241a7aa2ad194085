#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dsl {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad caller input: wrong shapes, invalid ranges, malformed config.
struct InvalidArgument : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Wraps a failure with the name of the pipeline stage that raised it.
struct StageError : Error {
    StageError(std::string stage_name, const std::string& what)
        : Error(stage_name + ": " + what), stage(std::move(stage_name)) {}
    std::string stage;
};

struct Index3 {
    int z = 0;
    int y = 0;
    int x = 0;
    auto operator<=>(const Index3&) const = default;
};

struct Dims {
    int z = 0;
    int y = 0;
    int x = 0;

    std::size_t size() const {
        return static_cast<std::size_t>(z) * static_cast<std::size_t>(y) * static_cast<std::size_t>(x);
    }
    std::size_t offset(int zz, int yy, int xx) const {
        return (static_cast<std::size_t>(zz) * static_cast<std::size_t>(y) + static_cast<std::size_t>(yy)) *
                   static_cast<std::size_t>(x) +
               static_cast<std::size_t>(xx);
    }
    bool contains(int zz, int yy, int xx) const {
        return zz >= 0 && yy >= 0 && xx >= 0 && zz < z && yy < y && xx < x;
    }
    bool operator==(const Dims&) const = default;
};

std::string to_string(const Dims& d);

// Dense 3D array, x fastest (same memory order as NIfTI).
template <class T>
class Grid {
public:
    Grid() = default;
    explicit Grid(Dims dims, T fill = T{}) : dims_(dims), data_(dims.size(), fill) {}

    const Dims& dims() const { return dims_; }
    std::size_t size() const { return data_.size(); }

    T& operator()(int z, int y, int x) { return data_[dims_.offset(z, y, x)]; }
    const T& operator()(int z, int y, int x) const { return data_[dims_.offset(z, y, x)]; }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    bool operator==(const Grid&) const = default;

private:
    Dims dims_{};
    std::vector<T> data_;
};

using Vec3 = std::array<double, 3>;  // (z, y, x)

}  // namespace dsl
