#include "rgbd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "rgbd/errors.hpp"

namespace rgbd {

int Mask::area() const {
    int n = 0;
    for (uint8_t v : data) n += v ? 1 : 0;
    return n;
}

std::array<int, 4> Mask::tight_box() const {
    int rmin = h, rmax = -1, cmin = w, cmax = -1;
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            if (at(r, c)) {
                rmin = std::min(rmin, r);
                rmax = std::max(rmax, r);
                cmin = std::min(cmin, c);
                cmax = std::max(cmax, c);
            }
    if (rmax < 0) throw ContractError("tight_box: empty mask");
    return {cmin, rmin, cmax - cmin + 1, rmax - rmin + 1};
}

ColorMode parse_color_mode(const std::string& name) {
    if (name == "distinct") return ColorMode::Distinct;
    if (name == "ambiguous") return ColorMode::Ambiguous;
    throw ContractError("unknown color mode: " + name);
}

DepthMode parse_depth_mode(const std::string& name) {
    if (name == "flat") return DepthMode::Flat;
    if (name == "gradient") return DepthMode::Gradient;
    throw ContractError("unknown depth mode: " + name);
}

std::string color_mode_name(ColorMode m) {
    return m == ColorMode::Distinct ? "distinct" : "ambiguous";
}

std::string depth_mode_name(DepthMode m) {
    return m == DepthMode::Flat ? "flat" : "gradient";
}

// ---- scene generation --------------------------------------------------------

namespace {

constexpr uint8_t kBackgroundGray = 230;
constexpr uint16_t kBackgroundDepth = 50000;
constexpr int kDepthBudget = 45000; // instance depths must stay below this

struct RawShape {
    int category = 0; // 1 rectangle, 2 ellipse
    Mask mask;
    double cx = 0.0, cy = 0.0; // center in corner coordinates
    int level = 0;             // flat depth value
    double gx = 0.0, gy = 0.0; // gradient slopes
};

struct ShapeExtent {
    int half_w = 0, half_h = 0;
};

RawShape draw_shape(const GeneratorConfig& cfg, Rng& rng, ShapeExtent* ext) {
    const int side = std::min(cfg.height, cfg.width);
    RawShape s;
    s.category = rng.uniform_int(1, 2);
    s.mask = Mask(cfg.height, cfg.width);
    if (s.category == 1) {
        const int lo = std::max(4, side / 6), hi = std::max(lo + 1, 2 * side / 5);
        const int bw = rng.uniform_int(lo, std::min(hi, cfg.width - 2));
        const int bh = rng.uniform_int(lo, std::min(hi, cfg.height - 2));
        ext->half_w = bw / 2;
        ext->half_h = bh / 2;
        s.cx = bw / 2.0;
        s.cy = bh / 2.0;
    } else {
        const int lo = std::max(3, side / 10), hi = std::max(lo + 1, side / 5);
        ext->half_w = rng.uniform_int(lo, std::min(hi, cfg.width / 2 - 1));
        ext->half_h = rng.uniform_int(lo, std::min(hi, cfg.height / 2 - 1));
    }
    return s;
}

void paint_shape(RawShape& s, const ShapeExtent& ext, int center_x, int center_y,
                 const GeneratorConfig& cfg) {
    s.cx = center_x;
    s.cy = center_y;
    if (s.category == 1) {
        const int x0 = center_x - ext.half_w, y0 = center_y - ext.half_h;
        const int x1 = x0 + 2 * ext.half_w, y1 = y0 + 2 * ext.half_h;
        for (int r = std::max(0, y0); r < std::min(cfg.height, y1); ++r)
            for (int c = std::max(0, x0); c < std::min(cfg.width, x1); ++c) s.mask.at(r, c) = 1;
    } else {
        const double rx = ext.half_w, ry = ext.half_h;
        for (int r = std::max(0, center_y - ext.half_h - 1);
             r < std::min(cfg.height, center_y + ext.half_h + 1); ++r)
            for (int c = std::max(0, center_x - ext.half_w - 1);
                 c < std::min(cfg.width, center_x + ext.half_w + 1); ++c) {
                const double dx = (c + 0.5 - center_x) / rx, dy = (r + 0.5 - center_y) / ry;
                if (dx * dx + dy * dy <= 1.0) s.mask.at(r, c) = 1;
            }
    }
}

bool touches_union(const Mask& m, const Mask& occupied) {
    for (int r = 0; r < m.h; ++r)
        for (int c = 0; c < m.w; ++c) {
            if (!m.at(r, c)) continue;
            if (occupied.at(r, c)) return true;
            if (r > 0 && occupied.at(r - 1, c)) return true;
            if (r + 1 < m.h && occupied.at(r + 1, c)) return true;
            if (c > 0 && occupied.at(r, c - 1)) return true;
            if (c + 1 < m.w && occupied.at(r, c + 1)) return true;
        }
    return false;
}

std::array<uint8_t, 3> draw_color(Rng& rng, const std::vector<std::array<uint8_t, 3>>& taken) {
    auto far_from = [](const std::array<uint8_t, 3>& a, const std::array<uint8_t, 3>& b) {
        int d = 0;
        for (int i = 0; i < 3; ++i) d = std::max(d, std::abs(int(a[i]) - int(b[i])));
        return d >= 48;
    };
    const std::array<uint8_t, 3> bg{kBackgroundGray, kBackgroundGray, kBackgroundGray};
    std::array<uint8_t, 3> c{};
    for (int attempt = 0; attempt < 100; ++attempt) {
        for (int i = 0; i < 3; ++i) c[i] = static_cast<uint8_t>(rng.uniform_int(20, 235));
        bool ok = far_from(c, bg);
        for (const auto& t : taken) ok = ok && far_from(c, t);
        if (ok) return c;
    }
    return c;
}

} // namespace

SceneSample generate_scene(const GeneratorConfig& cfg, uint64_t seed) {
    if (cfg.height < 16 || cfg.width < 16)
        throw ContractError("generate_scene: image must be at least 16x16");
    if (cfg.min_instances < 1 || cfg.max_instances < cfg.min_instances)
        throw ContractError("generate_scene: bad instance count range");
    if (cfg.min_depth_gap < 2) throw ContractError("generate_scene: depth gap too small");

    Rng rng(seed);
    for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
        const int n = rng.uniform_int(cfg.min_instances, cfg.max_instances);
        if (8000 + 3 * cfg.min_depth_gap * n >= kDepthBudget)
            throw GenerationError("generate_scene: depth budget exhausted for " +
                                  std::to_string(n) + " instances at gap " +
                                  std::to_string(cfg.min_depth_gap));

        // place raw shapes; in ambiguous mode later shapes hug earlier ones
        std::vector<RawShape> shapes;
        Mask occupied(cfg.height, cfg.width);
        for (int i = 0; i < n; ++i) {
            ShapeExtent ext;
            RawShape s = draw_shape(cfg, rng, &ext);
            const int xlo = ext.half_w, xhi = cfg.width - ext.half_w - 1;
            const int ylo = ext.half_h, yhi = cfg.height - ext.half_h - 1;
            if (xlo > xhi || ylo > yhi)
                throw GenerationError("generate_scene: image too small for the shape palette");
            int cx = rng.uniform_int(xlo, xhi), cy = rng.uniform_int(ylo, yhi);
            if (cfg.color_mode == ColorMode::Ambiguous && i > 0) {
                for (int k = 0; k < 20; ++k) {
                    const RawShape& anchor = shapes[rng.uniform_int(0, i - 1)];
                    const auto abox = anchor.mask.tight_box();
                    const int span_x = abox[2] / 2 + ext.half_w;
                    const int span_y = abox[3] / 2 + ext.half_h;
                    const int ax = abox[0] + abox[2] / 2, ay = abox[1] + abox[3] / 2;
                    cx = std::clamp(ax + rng.uniform_int(-span_x, span_x), xlo, xhi);
                    cy = std::clamp(ay + rng.uniform_int(-span_y, span_y), ylo, yhi);
                    RawShape probe = s;
                    paint_shape(probe, ext, cx, cy, cfg);
                    if (touches_union(probe.mask, occupied)) break;
                }
            }
            paint_shape(s, ext, cx, cy, cfg);
            for (size_t p = 0; p < occupied.data.size(); ++p)
                occupied.data[p] |= s.mask.data[p];
            shapes.push_back(std::move(s));
        }

        // depth levels with pointwise separation >= min_depth_gap
        std::vector<int> order(n);
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        int base = rng.uniform_int(6000, 9000);
        for (int k = 0; k < n; ++k) {
            RawShape& s = shapes[order[k]];
            s.level = base;
            base += 2 * cfg.min_depth_gap + rng.uniform_int(0, cfg.min_depth_gap);
            if (cfg.depth_mode == DepthMode::Gradient) {
                s.gx = rng.uniform(-1.0, 1.0) * cfg.min_depth_gap / (4.0 * cfg.width);
                s.gy = rng.uniform(-1.0, 1.0) * cfg.min_depth_gap / (4.0 * cfg.height);
            }
        }

        auto depth_at = [&](const RawShape& s, int r, int c) {
            return s.level + s.gx * (c + 0.5 - s.cx) + s.gy * (r + 0.5 - s.cy);
        };

        // nearer instance owns each contested pixel
        std::vector<int> owner(static_cast<size_t>(cfg.height) * cfg.width, -1);
        for (int r = 0; r < cfg.height; ++r)
            for (int c = 0; c < cfg.width; ++c) {
                double best = 1e18;
                for (int i = 0; i < n; ++i) {
                    if (!shapes[i].mask.at(r, c)) continue;
                    const double d = depth_at(shapes[i], r, c);
                    if (d < best) {
                        best = d;
                        owner[static_cast<size_t>(r) * cfg.width + c] = i;
                    }
                }
            }

        SceneSample out;
        out.height = cfg.height;
        out.width = cfg.width;
        out.instance_masks.assign(n, Mask(cfg.height, cfg.width));
        for (int r = 0; r < cfg.height; ++r)
            for (int c = 0; c < cfg.width; ++c) {
                const int o = owner[static_cast<size_t>(r) * cfg.width + c];
                if (o >= 0) out.instance_masks[o].at(r, c) = 1;
            }

        bool visible = true;
        for (int i = 0; i < n; ++i) {
            const int raw = shapes[i].mask.area(), fin = out.instance_masks[i].area();
            if (fin < 12 || fin * 10 < raw * 3) visible = false;
        }
        if (!visible) continue;

        std::vector<std::array<uint8_t, 3>> colors;
        if (cfg.color_mode == ColorMode::Ambiguous) {
            const auto shared = draw_color(rng, {});
            colors.assign(n, shared);
        } else {
            for (int i = 0; i < n; ++i) colors.push_back(draw_color(rng, colors));
        }

        out.rgb.assign(static_cast<size_t>(cfg.height) * cfg.width * 3, kBackgroundGray);
        out.depth.assign(static_cast<size_t>(cfg.height) * cfg.width, kBackgroundDepth);
        for (int r = 0; r < cfg.height; ++r)
            for (int c = 0; c < cfg.width; ++c) {
                const size_t px = static_cast<size_t>(r) * cfg.width + c;
                const int o = owner[px];
                if (o < 0) continue;
                for (int ch = 0; ch < 3; ++ch) out.rgb[px * 3 + ch] = colors[o][ch];
                const double d = std::round(depth_at(shapes[o], r, c));
                out.depth[px] = static_cast<uint16_t>(std::clamp(d, 0.0, 65535.0));
            }

        for (int i = 0; i < n; ++i) {
            out.categories.push_back(shapes[i].category);
            out.boxes.push_back(out.instance_masks[i].tight_box());
        }
        return out;
    }
    throw GenerationError("generate_scene: no visible placement after " +
                          std::to_string(cfg.max_retries) + " attempts (seed " +
                          std::to_string(seed) + ")");
}

// ---- polygons ----------------------------------------------------------------

namespace {

struct BoundaryEdge {
    int sx, sy, ex, ey;
    bool used = false;
};

} // namespace

std::vector<Polygon> mask_to_polygon(const Mask& mask) {
    if (mask.area() == 0) throw ContractError("mask_to_polygon: empty mask");

    auto set_at = [&](int r, int c) {
        return r >= 0 && r < mask.h && c >= 0 && c < mask.w && mask.at(r, c) != 0;
    };
    // directed boundary edges keep the interior on the left: outer loops come
    // out with positive shoelace area, holes negative
    std::vector<BoundaryEdge> edges;
    for (int r = 0; r < mask.h; ++r)
        for (int c = 0; c < mask.w; ++c) {
            if (!mask.at(r, c)) continue;
            if (!set_at(r - 1, c)) edges.push_back({c, r, c + 1, r});
            if (!set_at(r, c + 1)) edges.push_back({c + 1, r, c + 1, r + 1});
            if (!set_at(r + 1, c)) edges.push_back({c + 1, r + 1, c, r + 1});
            if (!set_at(r, c - 1)) edges.push_back({c, r + 1, c, r});
        }

    const int stride = mask.w + 1;
    std::unordered_map<int, std::vector<int>> by_start;
    for (size_t i = 0; i < edges.size(); ++i)
        by_start[edges[i].sy * stride + edges[i].sx].push_back(static_cast<int>(i));

    std::vector<int> order(edges.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const BoundaryEdge &ea = edges[a], &eb = edges[b];
        return std::tie(ea.sy, ea.sx, ea.ey, ea.ex) < std::tie(eb.sy, eb.sx, eb.ey, eb.ex);
    });

    std::vector<Polygon> polygons;
    for (int start : order) {
        if (edges[start].used) continue;
        std::vector<std::pair<int, int>> pts;
        int cur = start;
        for (;;) {
            BoundaryEdge& e = edges[cur];
            e.used = true;
            pts.emplace_back(e.sx, e.sy);
            if (e.ex == edges[start].sx && e.ey == edges[start].sy) break;
            const int dxi = e.ex - e.sx, dyi = e.ey - e.sy;
            int next = -1, best_cross = -2;
            for (int cand : by_start[e.ey * stride + e.ex]) {
                if (edges[cand].used) continue;
                const int dxo = edges[cand].ex - edges[cand].sx;
                const int dyo = edges[cand].ey - edges[cand].sy;
                // prefer the sharpest turn into our own pixel so loops that
                // meet at a corner stay separate
                const int cross = dxi * dyo - dyi * dxo;
                if (cross > best_cross) {
                    best_cross = cross;
                    next = cand;
                }
            }
            if (next < 0) throw ContractError("mask_to_polygon: open boundary");
            cur = next;
        }

        Polygon poly;
        const size_t m = pts.size();
        for (size_t i = 0; i < m; ++i) {
            const auto& prev = pts[(i + m - 1) % m];
            const auto& next = pts[(i + 1) % m];
            const int ax = pts[i].first - prev.first, ay = pts[i].second - prev.second;
            const int bx = next.first - pts[i].first, by = next.second - pts[i].second;
            if (ax * by - ay * bx == 0) continue; // collinear, drop
            poly.push_back(pts[i].first);
            poly.push_back(pts[i].second);
        }
        polygons.push_back(std::move(poly));
    }
    return polygons;
}

Mask polygon_to_mask(const std::vector<Polygon>& polygons, int height, int width) {
    if (height <= 0 || width <= 0)
        throw ContractError("polygon_to_mask: non-positive dimensions");
    for (const Polygon& p : polygons) {
        if (p.size() < 6 || p.size() % 2 != 0)
            throw ContractError("polygon_to_mask: polygon needs at least 3 (x, y) pairs");
        for (size_t i = 0; i + 1 < p.size(); i += 2)
            if (p[i] < 0.0 || p[i] > width || p[i + 1] < 0.0 || p[i + 1] > height)
                throw ContractError("polygon_to_mask: coordinate out of bounds");
    }

    Mask out(height, width);
    std::vector<double> xs;
    for (int r = 0; r < height; ++r) {
        const double py = r + 0.5;
        xs.clear();
        for (const Polygon& p : polygons) {
            const size_t m = p.size() / 2;
            for (size_t i = 0; i < m; ++i) {
                const double x1 = p[2 * i], y1 = p[2 * i + 1];
                const double x2 = p[2 * ((i + 1) % m)], y2 = p[2 * ((i + 1) % m) + 1];
                if ((y1 > py) != (y2 > py))
                    xs.push_back(x1 + (py - y1) * (x2 - x1) / (y2 - y1));
            }
        }
        std::sort(xs.begin(), xs.end());
        for (size_t k = 0; k + 1 < xs.size(); k += 2) {
            const int clo = static_cast<int>(std::floor(xs[k] - 0.5)) + 1;
            const int chi = static_cast<int>(std::ceil(xs[k + 1] - 0.5)) - 1;
            for (int c = std::max(0, clo); c <= std::min(width - 1, chi); ++c) out.at(r, c) = 1;
        }
    }
    return out;
}

// ---- run-length encoding -----------------------------------------------------

Rle mask_to_rle(const Mask& mask) {
    if (mask.h <= 0 || mask.w <= 0) throw ContractError("mask_to_rle: empty dimensions");
    Rle rle{mask.h, mask.w, {}};
    uint8_t cur = 0;
    int run = 0;
    for (int c = 0; c < mask.w; ++c)
        for (int r = 0; r < mask.h; ++r) {
            const uint8_t v = mask.at(r, c) ? 1 : 0;
            if (v == cur) {
                ++run;
            } else {
                rle.counts.push_back(run);
                cur = v;
                run = 1;
            }
        }
    rle.counts.push_back(run);
    return rle;
}

Mask rle_to_mask(const Rle& rle) {
    if (rle.h <= 0 || rle.w <= 0) throw FormatError("rle_to_mask: non-positive dimensions");
    long long total = 0;
    for (int c : rle.counts) {
        if (c < 0) throw FormatError("rle_to_mask: negative run length");
        total += c;
    }
    if (total != static_cast<long long>(rle.h) * rle.w)
        throw FormatError("rle_to_mask: counts sum " + std::to_string(total) +
                          " does not cover " + std::to_string(rle.h) + "x" +
                          std::to_string(rle.w));
    Mask out(rle.h, rle.w);
    int idx = 0;
    uint8_t val = 0;
    for (int count : rle.counts) {
        for (int k = 0; k < count; ++k, ++idx) {
            const int c = idx / rle.h, r = idx % rle.h;
            out.at(r, c) = val;
        }
        val = 1 - val;
    }
    return out;
}

// ---- COCO container ----------------------------------------------------------

const CocoImage& CocoDataset::image_by_id(int id) const {
    for (const CocoImage& img : images)
        if (img.id == id) return img;
    throw ValidationError("unknown image id " + std::to_string(id));
}

std::vector<CocoCategory> shape_categories() {
    return {{1, "rectangle"}, {2, "ellipse"}};
}

Mask decode_annotation(const CocoDataset& ds, const CocoAnnotation& ann) {
    const CocoImage& img = ds.image_by_id(ann.image_id);
    if (ann.use_rle) {
        if (ann.rle.h != img.height || ann.rle.w != img.width)
            throw ValidationError("annotation " + std::to_string(ann.id) +
                                  ": RLE size does not match its image");
        return rle_to_mask(ann.rle);
    }
    return polygon_to_mask(ann.polygons, img.height, img.width);
}

std::string coco_to_json(const CocoDataset& ds) {
    nlohmann::json j;
    nlohmann::json images = nlohmann::json::array();
    for (const CocoImage& img : ds.images)
        images.push_back({{"id", img.id},
                          {"file_name", img.rgb_file},
                          {"depth_file_name", img.depth_file},
                          {"width", img.width},
                          {"height", img.height}});
    j["images"] = images;
    nlohmann::json anns = nlohmann::json::array();
    for (const CocoAnnotation& a : ds.annotations) {
        nlohmann::json seg;
        if (a.use_rle)
            seg = {{"size", {a.rle.h, a.rle.w}}, {"counts", a.rle.counts}};
        else
            seg = a.polygons;
        anns.push_back({{"id", a.id},
                        {"image_id", a.image_id},
                        {"category_id", a.category_id},
                        {"segmentation", seg},
                        {"bbox", a.bbox},
                        {"area", a.area},
                        {"iscrowd", a.iscrowd}});
    }
    j["annotations"] = anns;
    nlohmann::json cats = nlohmann::json::array();
    for (const CocoCategory& c : ds.categories)
        cats.push_back({{"id", c.id}, {"name", c.name}});
    j["categories"] = cats;
    return j.dump(2) + "\n";
}

CocoDataset coco_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("JSON parse error at byte " + std::to_string(e.byte) + ": " +
                          e.what());
    }
    try {
        CocoDataset ds;
        for (const auto& img : j.at("images"))
            ds.images.push_back({img.at("id").get<int>(),
                                 img.at("file_name").get<std::string>(),
                                 img.value("depth_file_name", std::string()),
                                 img.at("width").get<int>(), img.at("height").get<int>()});
        for (const auto& a : j.at("annotations")) {
            CocoAnnotation ann;
            ann.id = a.at("id").get<int>();
            ann.image_id = a.at("image_id").get<int>();
            ann.category_id = a.at("category_id").get<int>();
            const auto& seg = a.at("segmentation");
            if (seg.is_object()) {
                ann.use_rle = true;
                ann.rle.h = seg.at("size").at(0).get<int>();
                ann.rle.w = seg.at("size").at(1).get<int>();
                ann.rle.counts = seg.at("counts").get<std::vector<int>>();
            } else {
                ann.polygons = seg.get<std::vector<Polygon>>();
            }
            const auto box = a.at("bbox").get<std::vector<double>>();
            if (box.size() != 4)
                throw FormatError("annotation " + std::to_string(ann.id) +
                                  ": bbox needs 4 entries");
            std::copy(box.begin(), box.end(), ann.bbox.begin());
            ann.area = a.at("area").get<double>();
            ann.iscrowd = a.value("iscrowd", 0);
            ds.annotations.push_back(std::move(ann));
        }
        for (const auto& c : j.at("categories"))
            ds.categories.push_back(
                {c.at("id").get<int>(), c.at("name").get<std::string>()});
        return ds;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("COCO JSON structure: ") + e.what());
    }
}

CocoDataset read_coco(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return coco_from_json(buf.str());
}

void write_coco(const CocoDataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << coco_to_json(ds);
    if (!out) throw IoError("write failed: " + path);
}

// ---- dataset build and validation ----------------------------------------------

namespace {

constexpr size_t kRlePolygonThreshold = 8; // above this, store the mask as RLE

} // namespace

CocoAnnotation annotation_from_mask(const Mask& m, int id, int image_id, int category_id) {
    if (m.area() == 0)
        throw ValidationError("annotation " + std::to_string(id) + ": empty mask");
    CocoAnnotation ann;
    ann.id = id;
    ann.image_id = image_id;
    ann.category_id = category_id;
    ann.polygons = mask_to_polygon(m);
    if (ann.polygons.size() > kRlePolygonThreshold) {
        ann.use_rle = true;
        ann.rle = mask_to_rle(m);
        ann.polygons.clear();
    }
    const auto tb = m.tight_box();
    ann.bbox = {static_cast<double>(tb[0]), static_cast<double>(tb[1]),
                static_cast<double>(tb[2]), static_cast<double>(tb[3])};
    ann.area = m.area();
    return ann;
}

CocoDataset build_coco(const std::vector<SceneSample>& samples, const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);

    CocoDataset ds;
    ds.categories = shape_categories();
    int image_id = 0, ann_id = 0;
    for (size_t si = 0; si < samples.size(); ++si) {
        const SceneSample& s = samples[si];
        const std::string tag = "sample " + std::to_string(si);
        if (s.height <= 0 || s.width <= 0)
            throw ValidationError(tag + ": non-positive dimensions");
        if (s.rgb.size() != static_cast<size_t>(s.height) * s.width * 3 ||
            s.depth.size() != static_cast<size_t>(s.height) * s.width)
            throw ValidationError(tag + ": pixel buffers do not match dimensions");
        if (s.instance_masks.size() != s.categories.size())
            throw ValidationError(tag + ": mask and category counts differ");
        if (s.instance_masks.empty()) continue; // paper-style removal

        ++image_id;
        char rgb_name[32], depth_name[32];
        std::snprintf(rgb_name, sizeof(rgb_name), "rgb_%06d.ppm", image_id);
        std::snprintf(depth_name, sizeof(depth_name), "depth_%06d.pgm", image_id);
        write_ppm((fs::path(out_dir) / rgb_name).string(), s.height, s.width, s.rgb);
        write_pgm16((fs::path(out_dir) / depth_name).string(), s.height, s.width, s.depth);
        ds.images.push_back({image_id, rgb_name, depth_name, s.width, s.height});

        for (size_t k = 0; k < s.instance_masks.size(); ++k) {
            const Mask& m = s.instance_masks[k];
            if (m.h != s.height || m.w != s.width)
                throw ValidationError(tag + " instance " + std::to_string(k) +
                                      ": mask dimensions mismatch");
            const int area = m.area();
            if (area == 0)
                throw ValidationError(tag + " instance " + std::to_string(k) +
                                      ": empty mask");
            bool known = false;
            for (const CocoCategory& c : ds.categories) known |= c.id == s.categories[k];
            if (!known)
                throw ValidationError(tag + " instance " + std::to_string(k) +
                                      ": unknown category " +
                                      std::to_string(s.categories[k]));

            ds.annotations.push_back(
                annotation_from_mask(m, ++ann_id, image_id, s.categories[k]));
        }
    }
    write_coco(ds, (fs::path(out_dir) / "annotations.json").string());
    return ds;
}

ValidationReport validate_coco(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();

    ValidationReport report;
    auto flag = [&report](const std::string& msg) {
        report.ok = false;
        report.violations.push_back(msg);
    };

    CocoDataset ds;
    try {
        ds = coco_from_json(buf.str()); // parse errors with byte offsets propagate
    } catch (const FormatError& e) {
        if (std::string(e.what()).rfind("JSON parse error", 0) == 0) throw;
        flag(e.what());
        return report;
    }

    std::unordered_map<int, const CocoImage*> images;
    for (const CocoImage& img : ds.images) {
        if (!images.emplace(img.id, &img).second)
            flag("duplicate image id " + std::to_string(img.id));
        if (img.width <= 0 || img.height <= 0)
            flag("image " + std::to_string(img.id) + ": non-positive dimensions");
    }
    std::unordered_set<int> categories;
    for (const CocoCategory& c : ds.categories)
        if (!categories.insert(c.id).second)
            flag("duplicate category id " + std::to_string(c.id));

    std::unordered_set<int> ann_ids;
    std::unordered_map<int, int> anns_per_image;
    for (const CocoAnnotation& a : ds.annotations) {
        const std::string tag = "annotation " + std::to_string(a.id);
        if (!ann_ids.insert(a.id).second) flag("duplicate annotation id " + std::to_string(a.id));
        const auto img_it = images.find(a.image_id);
        if (img_it == images.end()) {
            flag(tag + ": references missing image " + std::to_string(a.image_id));
            continue;
        }
        ++anns_per_image[a.image_id];
        if (!categories.count(a.category_id))
            flag(tag + ": references missing category " + std::to_string(a.category_id));

        const CocoImage& img = *img_it->second;
        if (!a.use_rle) {
            bool in_bounds = true;
            for (const Polygon& p : a.polygons)
                for (size_t i = 0; i + 1 < p.size(); i += 2)
                    in_bounds = in_bounds && p[i] >= 0 && p[i] <= img.width &&
                                p[i + 1] >= 0 && p[i + 1] <= img.height;
            if (!in_bounds) {
                flag(tag + ": polygon coordinates outside the image");
                continue;
            }
        }
        Mask mask;
        try {
            mask = decode_annotation(ds, a);
        } catch (const Error& e) {
            flag(tag + ": mask does not decode (" + e.what() + ")");
            continue;
        }
        const int decoded = mask.area();
        if (decoded == 0) {
            flag(tag + ": decoded mask is empty");
            continue;
        }
        if (std::abs(a.area - decoded) > 1.0)
            flag(tag + ": stored area " + std::to_string(a.area) +
                 " is off the decoded mask area " + std::to_string(decoded));
        const auto tb = mask.tight_box();
        const bool box_ok = a.bbox[0] == tb[0] && a.bbox[1] == tb[1] &&
                            a.bbox[2] == tb[2] && a.bbox[3] == tb[3];
        if (!box_ok) flag(tag + ": bbox is not the tight box of the decoded mask");
    }
    for (const CocoImage& img : ds.images)
        if (anns_per_image[img.id] == 0)
            flag("image " + std::to_string(img.id) + ": has zero annotations");
    return report;
}

std::pair<CocoDataset, CocoDataset> split_dataset(const CocoDataset& ds,
                                                  double train_fraction, uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw ContractError("split_dataset: fraction must be in (0, 1)");
    const int n = static_cast<int>(ds.images.size());
    const int n_train = static_cast<int>(std::floor(train_fraction * n));
    if (n_train == 0 || n_train == n)
        throw ContractError("split_dataset: fraction " + std::to_string(train_fraction) +
                            " leaves one side empty for " + std::to_string(n) + " images");

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order);

    std::unordered_set<int> train_ids;
    for (int k = 0; k < n_train; ++k) train_ids.insert(ds.images[order[k]].id);

    CocoDataset train, val;
    train.categories = ds.categories;
    val.categories = ds.categories;
    for (const CocoImage& img : ds.images)
        (train_ids.count(img.id) ? train : val).images.push_back(img);
    for (const CocoAnnotation& a : ds.annotations)
        (train_ids.count(a.image_id) ? train : val).annotations.push_back(a);
    return {std::move(train), std::move(val)};
}

// ---- PPM / PGM ---------------------------------------------------------------

namespace {

// netpbm token: skips whitespace and '#' comments
std::string next_token(std::istream& in) {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {
            }
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    return tok;
}

int parse_dim(const std::string& tok, const std::string& path) {
    try {
        size_t pos = 0;
        const int v = std::stoi(tok, &pos);
        if (pos != tok.size() || v <= 0) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw FormatError(path + ": bad header token '" + tok + "'");
    }
}

} // namespace

void write_ppm(const std::string& path, int h, int w, const std::vector<uint8_t>& rgb) {
    if (rgb.size() != static_cast<size_t>(h) * w * 3)
        throw ContractError("write_ppm: buffer does not match dimensions");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << "P6\n" << w << " " << h << "\n255\n";
    out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (!out) throw IoError("write failed: " + path);
}

void write_pgm16(const std::string& path, int h, int w, const std::vector<uint16_t>& gray) {
    if (gray.size() != static_cast<size_t>(h) * w)
        throw ContractError("write_pgm16: buffer does not match dimensions");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << "P5\n" << w << " " << h << "\n65535\n";
    for (uint16_t v : gray) {
        // PGM samples are big-endian
        out.put(static_cast<char>(v >> 8));
        out.put(static_cast<char>(v & 0xff));
    }
    if (!out) throw IoError("write failed: " + path);
}

PpmImage read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    if (next_token(in) != "P6") throw FormatError(path + ": not a binary PPM");
    PpmImage img;
    img.w = parse_dim(next_token(in), path);
    img.h = parse_dim(next_token(in), path);
    if (parse_dim(next_token(in), path) != 255)
        throw FormatError(path + ": expected maxval 255");
    img.rgb.resize(static_cast<size_t>(img.h) * img.w * 3);
    in.read(reinterpret_cast<char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.rgb.size()))
        throw FormatError(path + ": truncated pixel data");
    if (in.get() != EOF) throw FormatError(path + ": trailing bytes");
    return img;
}

Pgm16Image read_pgm16(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    if (next_token(in) != "P5") throw FormatError(path + ": not a binary PGM");
    Pgm16Image img;
    img.w = parse_dim(next_token(in), path);
    img.h = parse_dim(next_token(in), path);
    if (parse_dim(next_token(in), path) != 65535)
        throw FormatError(path + ": expected maxval 65535");
    std::vector<uint8_t> raw(static_cast<size_t>(img.h) * img.w * 2);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size()))
        throw FormatError(path + ": truncated pixel data");
    if (in.get() != EOF) throw FormatError(path + ": trailing bytes");
    img.gray.resize(static_cast<size_t>(img.h) * img.w);
    for (size_t i = 0; i < img.gray.size(); ++i)
        img.gray[i] = static_cast<uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
    return img;
}

// ---- model-input views ---------------------------------------------------------

namespace {

Tensor rgb_to_tensor(int h, int w, const std::vector<uint8_t>& rgb) {
    Tensor out = Tensor::zeros({3, h, w});
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            for (int ch = 0; ch < 3; ++ch)
                out.at(ch, r, c) = rgb[(static_cast<size_t>(r) * w + c) * 3 + ch] / 255.0;
    return out;
}

Tensor depth_to_tensor(int h, int w, const std::vector<uint16_t>& depth) {
    Tensor out = Tensor::zeros({3, h, w});
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const double v = depth[static_cast<size_t>(r) * w + c] / 65535.0;
            for (int ch = 0; ch < 3; ++ch) out.at(ch, r, c) = v;
        }
    return out;
}

} // namespace

Tensor rgb_tensor(const SceneSample& s) { return rgb_to_tensor(s.height, s.width, s.rgb); }
Tensor depth_tensor(const SceneSample& s) {
    return depth_to_tensor(s.height, s.width, s.depth);
}
Tensor rgb_tensor(const PpmImage& img) { return rgb_to_tensor(img.h, img.w, img.rgb); }
Tensor depth_tensor(const Pgm16Image& img) {
    return depth_to_tensor(img.h, img.w, img.gray);
}

} // namespace rgbd
