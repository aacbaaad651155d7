#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>

#include "rgbd/errors.hpp"
#include "rgbd/train.hpp"

using namespace rgbd;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.input_h = 16;
    cfg.input_w = 16;
    for (auto& s : cfg.stages) s.channels = 4;
    cfg.num_queries = 2;
    cfg.num_classes = 2;
    cfg.seed = 7;
    return cfg;
}

GeneratorConfig tiny_scenes() {
    GeneratorConfig g;
    g.height = 16;
    g.width = 16;
    g.min_instances = 1;
    g.max_instances = 2;
    return g;
}

TrainSample sample_from_scene(const SceneSample& s, int image_id) {
    TrainSample t;
    t.image_id = image_id;
    t.rgb = rgb_tensor(s);
    t.depth = depth_tensor(s);
    for (size_t i = 0; i < s.instance_masks.size(); ++i) {
        GtInstance g;
        g.class_index = s.categories[i] - 1;
        const auto& b = s.boxes[i];
        const double w = s.width, h = s.height;
        g.box = {(b[0] + b[2] / 2.0) / w, (b[1] + b[3] / 2.0) / h, b[2] / w, b[3] / h};
        Tensor full = Tensor::zeros({s.height, s.width});
        for (size_t k = 0; k < s.instance_masks[i].data.size(); ++k)
            full.data[k] = s.instance_masks[i].data[k] ? 1.0 : 0.0;
        g.mask_grid = downsample_mask(full, 2);
        t.gt.push_back(std::move(g));
    }
    return t;
}

std::vector<TrainSample> make_samples(int count, uint64_t first_seed) {
    std::vector<TrainSample> out;
    for (int i = 0; i < count; ++i)
        out.push_back(sample_from_scene(generate_scene(tiny_scenes(), first_seed + i), i + 1));
    return out;
}

CocoDataset gt_from_scenes(int count, uint64_t first_seed) {
    std::vector<SceneSample> scenes;
    for (int i = 0; i < count; ++i) scenes.push_back(generate_scene(tiny_scenes(), first_seed + i));
    CocoDataset ds;
    ds.categories = shape_categories();
    int ann_id = 0;
    for (int i = 0; i < count; ++i) {
        const SceneSample& s = scenes[i];
        ds.images.push_back({i + 1, "", "", s.width, s.height});
        for (size_t k = 0; k < s.instance_masks.size(); ++k) {
            CocoAnnotation a;
            a.id = ++ann_id;
            a.image_id = i + 1;
            a.category_id = s.categories[k];
            a.use_rle = true;
            a.rle = mask_to_rle(s.instance_masks[k]);
            a.bbox = {double(s.boxes[k][0]), double(s.boxes[k][1]), double(s.boxes[k][2]),
                      double(s.boxes[k][3])};
            a.area = s.instance_masks[k].area();
            ds.annotations.push_back(std::move(a));
        }
    }
    return ds;
}

std::vector<double> flat_params(ModelParams& params) {
    ParamRefs refs;
    params.collect(refs);
    std::vector<double> out;
    for (const auto& [name, t] : refs) out.insert(out.end(), t->data.begin(), t->data.end());
    return out;
}

} // namespace

TEST_CASE("zero learning rate leaves parameters untouched") {
    const ModelConfig cfg = tiny_config();
    TrainConfig tc;
    tc.epochs = 2;
    tc.lr = 0.0;
    TrainResult r = train(cfg, tc, make_samples(3, 21), {}, {});
    ModelParams fresh = ModelParams::init(cfg);
    CHECK(flat_params(r.params) == flat_params(fresh));
    CHECK(r.trace.size() == 2);
}

TEST_CASE("same seed reproduces trace and parameters bit for bit") {
    const ModelConfig cfg = tiny_config();
    TrainConfig tc;
    tc.epochs = 3;
    tc.seed = 5;
    const auto train_set = make_samples(4, 31);
    const auto val_set = make_samples(2, 81);
    const CocoDataset val_gt = gt_from_scenes(2, 81);
    TrainResult a = train(cfg, tc, train_set, val_set, val_gt);
    TrainResult b = train(cfg, tc, train_set, val_set, val_gt);
    CHECK(trace_to_csv(a.trace) == trace_to_csv(b.trace));
    CHECK(flat_params(a.params) == flat_params(b.params));
}

TEST_CASE("a single sample is overfit well below its initial loss") {
    const ModelConfig cfg = tiny_config();
    TrainConfig tc;
    tc.epochs = 400;
    tc.lr = 5e-3;
    TrainResult r = train(cfg, tc, make_samples(1, 51), {}, {});
    const auto& tr = r.trace;
    REQUIRE(tr.size() == 400);
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 10; ++i) {
        head += tr[i].loss / 10.0;
        tail += tr[tr.size() - 1 - i].loss / 10.0;
    }
    CHECK(tail < head); // decreasing on average
    CHECK(tail < 0.10 * tr.front().loss);
}

TEST_CASE("non-finite losses abort with epoch and component diagnostics") {
    const ModelConfig cfg = tiny_config();
    TrainConfig tc;
    tc.epochs = 1;
    auto samples = make_samples(1, 61);
    samples[0].rgb.data[0] = std::numeric_limits<double>::quiet_NaN();
    try {
        train(cfg, tc, samples, {}, {});
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("epoch 0") != std::string::npos);
        CHECK(msg.find("batch 0") != std::string::npos);
        CHECK(msg.find("non-finite") != std::string::npos);
    }
}

TEST_CASE("trace csv has the full column set and is byte-stable") {
    const ModelConfig cfg = tiny_config();
    TrainConfig tc;
    tc.epochs = 2;
    const auto val_set = make_samples(1, 81);
    TrainResult r = train(cfg, tc, make_samples(2, 71), val_set, gt_from_scenes(1, 81));
    const std::string csv = trace_to_csv(r.trace);
    CHECK(csv == trace_to_csv(r.trace));
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    CHECK(line == "epoch,loss,cls,l1,giou,mask,ap_seg50,ap_det50");
    int rows = 0;
    while (std::getline(in, line)) {
        CHECK(std::count(line.begin(), line.end(), ',') == 7);
        ++rows;
    }
    CHECK(rows == 2);
}

TEST_CASE("predict_detections speaks the evaluator's language") {
    const ModelConfig cfg = tiny_config();
    ModelParams params = ModelParams::init(cfg);
    const auto val_set = make_samples(3, 81);
    const CocoDataset val_gt = gt_from_scenes(3, 81);
    const auto dets = predict_detections(cfg, params, val_set);
    REQUIRE(dets.size() == val_set.size() * cfg.num_queries);
    for (size_t i = 0; i < dets.size(); ++i) {
        CHECK(dets[i].image_id == val_set[i / cfg.num_queries].image_id);
        CHECK(dets[i].score > 0.0);
        CHECK(dets[i].score < 1.0);
        CHECK(dets[i].mask.h == cfg.input_h);
        CHECK(dets[i].mask.w == cfg.input_w);
        CHECK(dets[i].box[2] > 0.0);
        CHECK(dets[i].box[3] > 0.0);
    }
    const ApReport report = evaluate(val_gt, dets); // dims and ids line up
    CHECK(report.segm.ap50.has_value());
}

TEST_CASE("design D trains through the auxiliary mask path") {
    ModelConfig cfg = tiny_config();
    cfg.routing_design = 'D';
    TrainConfig tc;
    tc.epochs = 1;
    const auto samples = make_samples(2, 91);
    TrainResult with_aux = train(cfg, tc, samples, {}, {});
    TrainConfig no_aux = tc;
    no_aux.aux_weight = 0.0;
    TrainResult without = train(cfg, no_aux, samples, {}, {});
    CHECK(std::isfinite(with_aux.trace[0].loss));
    // identical first forward pass, so the gap is exactly the aux term
    CHECK(with_aux.trace[0].mask > without.trace[0].mask);
    CHECK(with_aux.trace[0].cls == without.trace[0].cls);
}

TEST_CASE("samples_from_coco loads what build_coco wrote") {
    GeneratorConfig g; // 64x64 default
    std::vector<SceneSample> scenes;
    for (uint64_t s = 1; s <= 3; ++s) scenes.push_back(generate_scene(g, s));
    const auto dir = std::filesystem::temp_directory_path() / "rgbd_train_load";
    std::filesystem::remove_all(dir);
    const CocoDataset ds = build_coco(scenes, dir.string());

    ModelConfig cfg; // 64x64 default input
    cfg.num_classes = 2;
    const auto samples = samples_from_coco(ds, dir.string(), cfg);
    REQUIRE(samples.size() == ds.images.size());
    size_t total_gt = 0;
    for (const auto& s : samples) {
        CHECK(s.rgb.shape == std::vector<int>{3, 64, 64});
        CHECK(s.depth.shape == std::vector<int>{3, 64, 64});
        total_gt += s.gt.size();
        for (const auto& gt : s.gt) {
            CHECK(gt.mask_grid.shape == std::vector<int>{32, 32});
            CHECK(gt.class_index >= 0);
            CHECK(gt.class_index < cfg.num_classes);
            for (double b : gt.box) {
                CHECK(b > 0.0);
                CHECK(b <= 1.0);
            }
        }
    }
    CHECK(total_gt == ds.annotations.size());

    ModelConfig wrong = cfg;
    wrong.input_h = wrong.input_w = 32;
    CHECK_THROWS_AS(samples_from_coco(ds, dir.string(), wrong), ConfigError);

    ModelConfig narrow = cfg;
    narrow.num_classes = 1;
    CocoDataset two_cats = ds;
    bool has_second = false;
    for (const auto& a : two_cats.annotations) has_second = has_second || a.category_id == 2;
    if (!has_second) two_cats.annotations[0].category_id = 2;
    CHECK_THROWS_AS(samples_from_coco(two_cats, dir.string(), narrow), ConfigError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("config validation and empty sets are rejected") {
    const ModelConfig cfg = tiny_config();
    TrainConfig tc;
    tc.epochs = 0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    tc.epochs = 1;
    tc.batch_size = 0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    tc.batch_size = 4;
    tc.lr = -1.0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    tc.lr = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    tc.lr = 1e-3;
    CHECK_THROWS_AS(train(cfg, tc, {}, {}, {}), ContractError);
}
