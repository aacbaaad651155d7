#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "rgbd/errors.hpp"
#include "rgbd/rng.hpp"

namespace rgbd {

// Dense row-major array of 64-bit reals. Plain value type: copyable,
// movable, no view aliasing. Once a tensor has been recorded on a Tape it
// must be treated as immutable.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    bool requires_grad = false;

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<double> d);

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double value);
    static Tensor from(std::vector<int> shape, std::vector<double> values);
    // uniform in [-sqrt(1/fan_in), +sqrt(1/fan_in)]
    static Tensor uniform_init(std::vector<int> shape, int fan_in, Rng& rng);
    static Tensor random_uniform(std::vector<int> shape, double lo, double hi, Rng& rng);

    int rank() const { return static_cast<int>(shape.size()); }
    size_t numel() const { return data.size(); }
    int size(int axis) const;

    double& at(int i) { return data[static_cast<size_t>(i)]; }
    double at(int i) const { return data[static_cast<size_t>(i)]; }
    double& at(int i, int j);
    double at(int i, int j) const;
    double& at(int i, int j, int k);
    double at(int i, int j, int k) const;

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    bool all_finite() const;
    std::string shape_str() const;
};

size_t shape_numel(const std::vector<int>& shape);
std::string shape_to_string(const std::vector<int>& shape);

// Raw tensor fixture format: magic "TNSR1", rank as u32 little-endian,
// shape entries as u32, data as little-endian IEEE-754 doubles.
void write_tensor(const std::string& path, const Tensor& t);
Tensor read_tensor(const std::string& path);
// stream forms for embedding tensors in container files
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

} // namespace rgbd
