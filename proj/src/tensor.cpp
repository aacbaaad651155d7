#include "rgbd/tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace rgbd {

size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw DimensionError("shape entries must be positive, got " + shape_to_string(shape));
        n *= static_cast<size_t>(d);
    }
    return n;
}

std::string shape_to_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor::Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " + shape_to_string(shape));
    }
}

Tensor Tensor::zeros(std::vector<int> shape) {
    size_t n = shape_numel(shape);
    Tensor t;
    t.shape = std::move(shape);
    t.data.assign(n, 0.0);
    return t;
}

Tensor Tensor::full(std::vector<int> shape, double value) {
    Tensor t = zeros(std::move(shape));
    for (double& x : t.data) x = value;
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values) {
    return Tensor(std::move(shape), std::move(values));
}

Tensor Tensor::uniform_init(std::vector<int> shape, int fan_in, Rng& rng) {
    if (fan_in <= 0) throw ContractError("fan_in must be positive");
    double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    return random_uniform(std::move(shape), -bound, bound, rng);
}

Tensor Tensor::random_uniform(std::vector<int> shape, double lo, double hi, Rng& rng) {
    Tensor t = zeros(std::move(shape));
    for (double& x : t.data) x = rng.uniform(lo, hi);
    return t;
}

int Tensor::size(int axis) const {
    if (axis < 0 || axis >= rank()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str());
    return shape[static_cast<size_t>(axis)];
}

double& Tensor::at(int i, int j) {
    return data[static_cast<size_t>(i) * shape[1] + j];
}
double Tensor::at(int i, int j) const {
    return data[static_cast<size_t>(i) * shape[1] + j];
}
double& Tensor::at(int i, int j, int k) {
    return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
}
double Tensor::at(int i, int j, int k) const {
    return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
}

bool Tensor::all_finite() const {
    for (double x : data) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

std::string Tensor::shape_str() const { return shape_to_string(shape); }

namespace {

void put_u32le(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {
        static_cast<unsigned char>(v & 0xff),
        static_cast<unsigned char>((v >> 8) & 0xff),
        static_cast<unsigned char>((v >> 16) & 0xff),
        static_cast<unsigned char>((v >> 24) & 0xff),
    };
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw FormatError("truncated tensor header");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void put_f64le(std::ostream& os, double v) {
    uint64_t u;
    std::memcpy(&u, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw FormatError("truncated tensor data");
    uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= static_cast<uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &u, 8);
    return v;
}

constexpr char kMagic[] = "TNSR1";

} // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    os.write(kMagic, 5);
    put_u32le(os, static_cast<uint32_t>(t.rank()));
    for (int d : t.shape) put_u32le(os, static_cast<uint32_t>(d));
    for (double v : t.data) put_f64le(os, v);
}

Tensor read_tensor(std::istream& is) {
    char magic[5];
    is.read(magic, 5);
    if (!is || std::memcmp(magic, kMagic, 5) != 0) throw FormatError("bad tensor magic");
    uint32_t rank = get_u32le(is);
    if (rank > 8) throw FormatError("unreasonable tensor rank");
    std::vector<int> shape(rank);
    for (uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int>(get_u32le(is));
    size_t n = shape_numel(shape);
    std::vector<double> data(n);
    for (size_t i = 0; i < n; ++i) data[i] = get_f64le(is);
    return Tensor(std::move(shape), std::move(data));
}

void write_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    write_tensor(os, t);
    if (!os) throw IoError("write failed: " + path);
}

Tensor read_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path);
    Tensor t = [&] {
        try {
            return read_tensor(is);
        } catch (const FormatError& e) {
            throw FormatError(std::string(e.what()) + " in " + path);
        }
    }();
    char extra;
    if (is.read(&extra, 1)) throw FormatError("trailing bytes after tensor data in " + path);
    return t;
}

} // namespace rgbd
