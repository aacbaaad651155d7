#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "rgbd/rng.hpp"
#include "rgbd/tensor.hpp"

namespace rgbd {

// binary mask, row-major
struct Mask {
    int h = 0, w = 0;
    std::vector<uint8_t> data;

    Mask() = default;
    Mask(int height, int width)
        : h(height), w(width), data(static_cast<size_t>(height) * width, 0) {}

    uint8_t& at(int r, int c) { return data[static_cast<size_t>(r) * w + c]; }
    uint8_t at(int r, int c) const { return data[static_cast<size_t>(r) * w + c]; }
    int area() const;
    std::array<int, 4> tight_box() const; // [x, y, w, h]; throws on empty mask
};

enum class ColorMode { Distinct, Ambiguous };
enum class DepthMode { Flat, Gradient };
ColorMode parse_color_mode(const std::string& name);
DepthMode parse_depth_mode(const std::string& name);
std::string color_mode_name(ColorMode m);
std::string depth_mode_name(DepthMode m);

struct GeneratorConfig {
    int height = 64, width = 64;
    int min_instances = 2, max_instances = 4;
    ColorMode color_mode = ColorMode::Distinct;
    DepthMode depth_mode = DepthMode::Flat;
    int min_depth_gap = 2000; // 16-bit depth units, guaranteed pointwise
    int max_retries = 64;     // whole-scene placement attempts
};

struct SceneSample {
    int height = 0, width = 0;
    std::vector<uint8_t> rgb;    // h*w*3, row-major
    std::vector<uint16_t> depth; // h*w, larger = farther
    std::vector<Mask> instance_masks;
    std::vector<int> categories; // 1 = rectangle, 2 = ellipse
    std::vector<std::array<int, 4>> boxes; // tight [x, y, w, h]
};

SceneSample generate_scene(const GeneratorConfig& cfg, uint64_t seed);

// polygons are flat [x0, y0, x1, y1, ...] lists in pixel-corner coordinates:
// pixel (r, c) spans [c, c+1] x [r, r+1]
using Polygon = std::vector<double>;

// outer boundaries counter-clockwise (positive shoelace), holes clockwise
std::vector<Polygon> mask_to_polygon(const Mask& mask);

// even-odd fill of pixel centers
Mask polygon_to_mask(const std::vector<Polygon>& polygons, int height, int width);

// column-major run lengths, zero run first
struct Rle {
    int h = 0, w = 0;
    std::vector<int> counts;
};

Rle mask_to_rle(const Mask& mask);
Mask rle_to_mask(const Rle& rle);

struct CocoImage {
    int id = 0;
    std::string rgb_file, depth_file;
    int width = 0, height = 0;
};

struct CocoAnnotation {
    int id = 0, image_id = 0, category_id = 0;
    std::vector<Polygon> polygons; // segmentation, unless use_rle
    Rle rle;
    bool use_rle = false;
    std::array<double, 4> bbox{}; // [x, y, w, h]
    double area = 0.0;
    int iscrowd = 0;
};

struct CocoCategory {
    int id = 0;
    std::string name;
};

struct CocoDataset {
    std::vector<CocoImage> images;
    std::vector<CocoAnnotation> annotations;
    std::vector<CocoCategory> categories;

    const CocoImage& image_by_id(int id) const; // throws ValidationError if absent
};

std::vector<CocoCategory> shape_categories(); // {1 rectangle, 2 ellipse}

Mask decode_annotation(const CocoDataset& ds, const CocoAnnotation& ann);

// polygon segmentation unless the boundary splinters into many rings, then
// RLE; bbox and area recomputed from the mask
CocoAnnotation annotation_from_mask(const Mask& m, int id, int image_id, int category_id);

std::string coco_to_json(const CocoDataset& ds);
CocoDataset coco_from_json(const std::string& text);
CocoDataset read_coco(const std::string& path);
void write_coco(const CocoDataset& ds, const std::string& path);

// writes PPM/PGM images plus annotations.json into out_dir; drops samples
// with zero instances; areas and boxes recomputed from the masks
CocoDataset build_coco(const std::vector<SceneSample>& samples, const std::string& out_dir);

struct ValidationReport {
    bool ok = true;
    std::vector<std::string> violations;
};

ValidationReport validate_coco(const std::string& path);

// image-level split: floor(fraction * n) train images, remainder val
std::pair<CocoDataset, CocoDataset> split_dataset(const CocoDataset& ds,
                                                  double train_fraction, uint64_t seed);

void write_ppm(const std::string& path, int h, int w, const std::vector<uint8_t>& rgb);
void write_pgm16(const std::string& path, int h, int w, const std::vector<uint16_t>& gray);

struct PpmImage {
    int h = 0, w = 0;
    std::vector<uint8_t> rgb;
};

struct Pgm16Image {
    int h = 0, w = 0;
    std::vector<uint16_t> gray;
};

PpmImage read_ppm(const std::string& path);
Pgm16Image read_pgm16(const std::string& path);

// model-input views: [0,1] scaled, depth replicated to 3 channels
Tensor rgb_tensor(const SceneSample& s);
Tensor depth_tensor(const SceneSample& s);
Tensor rgb_tensor(const PpmImage& img);
Tensor depth_tensor(const Pgm16Image& img);

} // namespace rgbd
