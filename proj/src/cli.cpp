#include "rgbd/cli.hpp"

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "rgbd/errors.hpp"
#include "rgbd/eval.hpp"
#include "rgbd/fmt.hpp"
#include "rgbd/gradcheck.hpp"
#include "rgbd/stats.hpp"
#include "rgbd/train.hpp"

namespace fs = std::filesystem;

namespace rgbd {

namespace {

std::string json_scalar_text(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    return v.dump();
}

// flat JSON object -> config items; flags given on the command line still win
class JsonConfig : public CLI::Config {
  public:
    std::string to_config(const CLI::App*, bool, bool, std::string) const override {
        return "{}\n";
    }
    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        nlohmann::json j;
        try {
            input >> j;
        } catch (const nlohmann::json::exception& e) {
            throw CLI::ConfigError(std::string("config: ") + e.what(),
                                   CLI::ExitCodes::ConfigError);
        }
        if (!j.is_object())
            throw CLI::ConfigError("config: top level must be a JSON object",
                                   CLI::ExitCodes::ConfigError);
        std::vector<CLI::ConfigItem> items;
        for (const auto& [key, value] : j.items()) {
            CLI::ConfigItem item;
            item.name = key;
            if (value.is_array())
                for (const auto& v : value) item.inputs.push_back(json_scalar_text(v));
            else
                item.inputs.push_back(json_scalar_text(value));
            items.push_back(std::move(item));
        }
        return items;
    }
};

const std::vector<std::string>& fusion_names() {
    static const std::vector<std::string> names{"none",  "rgb", "rgb-only", "early", "late",
                                                "intra", "inter", "iam",    "cdf",   "iam+cdf"};
    return names;
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(text);
    while (std::getline(in, item, ',')) out.push_back(item);
    return out;
}

void add_config(CLI::App* sub) {
    sub->config_formatter(std::make_shared<JsonConfig>());
    sub->allow_config_extras(CLI::config_extras_mode::error);
    sub->set_config("--config", "", "JSON config file; explicit flags win over its keys");
}

void add_dataset_flags(CLI::App* sub, RunConfig& rc) {
    sub->add_option("--height", rc.height, "scene height in pixels")
        ->capture_default_str()
        ->check(CLI::Range(16, 4096));
    sub->add_option("--width", rc.width, "scene width in pixels")
        ->capture_default_str()
        ->check(CLI::Range(16, 4096));
    sub->add_option("--min-instances", rc.min_instances, "fewest instances per scene")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    sub->add_option("--max-instances", rc.max_instances, "most instances per scene")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    sub->add_option("--color", rc.color, "instance color scheme")
        ->capture_default_str()
        ->check(CLI::IsMember({"distinct", "ambiguous"}));
    sub->add_option("--depth", rc.depth, "per-instance depth profile")
        ->capture_default_str()
        ->check(CLI::IsMember({"flat", "gradient"}));
    sub->add_option("--depth-gap", rc.depth_gap, "minimum pointwise depth separation")
        ->capture_default_str()
        ->check(CLI::Range(2, 20000));
}

void add_model_flags(CLI::App* sub, RunConfig& rc) {
    sub->add_option("--fusion", rc.fusion, "fusion strategy")
        ->capture_default_str()
        ->check(CLI::IsMember(fusion_names()));
    sub->add_option("--design", rc.design, "feature routing design")
        ->capture_default_str()
        ->check(CLI::IsMember({"A", "B", "C", "D"}));
    sub->add_option("--classes", rc.classes, "number of foreground classes")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    sub->add_option("--queries", rc.queries, "object queries in the head")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    sub->add_option("--epochs", rc.epochs, "training epochs")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    sub->add_option("--batch-size", rc.batch_size, "samples per optimizer step")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    sub->add_option("--lr", rc.lr, "learning rate")
        ->capture_default_str()
        ->check(CLI::NonNegativeNumber);
    sub->add_option("--lr-drop-factor", rc.lr_drop_factor,
                    "rate multiplier for the last third of training")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    sub->add_option("--grad-clip", rc.grad_clip, "global gradient norm cap; 0 disables")
        ->capture_default_str()
        ->check(CLI::NonNegativeNumber);
    sub->add_option("--aux-weight", rc.aux_weight, "auxiliary mask loss weight (design D)")
        ->capture_default_str()
        ->check(CLI::NonNegativeNumber);
    sub->add_option("--val-frac", rc.val_frac, "fraction of images held out for validation")
        ->capture_default_str()
        ->check(CLI::Range(0.0, 0.9));
    sub->add_option("--split-seed", rc.split_seed, "seed for the train/val split")
        ->capture_default_str();
}

GeneratorConfig generator_from(const RunConfig& rc) {
    GeneratorConfig g;
    g.height = rc.height;
    g.width = rc.width;
    g.min_instances = rc.min_instances;
    g.max_instances = rc.max_instances;
    g.color_mode = parse_color_mode(rc.color);
    g.depth_mode = parse_depth_mode(rc.depth);
    g.min_depth_gap = rc.depth_gap;
    return g;
}

ModelConfig model_from(const RunConfig& rc, uint64_t seed) {
    ModelConfig mc;
    mc.input_h = rc.height;
    mc.input_w = rc.width;
    mc.fusion_kind = parse_fusion_kind(rc.fusion);
    mc.routing_design = rc.design.at(0);
    mc.num_classes = rc.classes;
    mc.num_queries = rc.queries;
    mc.seed = seed;
    mc.validate();
    return mc;
}

TrainConfig train_from(const RunConfig& rc) {
    TrainConfig tc;
    tc.epochs = rc.epochs;
    tc.batch_size = rc.batch_size;
    tc.lr = rc.lr;
    tc.lr_drop_factor = rc.lr_drop_factor;
    tc.grad_clip = rc.grad_clip;
    tc.aux_weight = rc.aux_weight;
    tc.seed = rc.seed;
    tc.validate();
    return tc;
}

std::vector<SceneSample> generate_scenes(const GeneratorConfig& g, int count, uint64_t seed,
                                         int threads) {
    std::vector<SceneSample> out(count);
    const int workers = std::max(1, std::min(threads, count));
    if (workers == 1) {
        for (int i = 0; i < count; ++i) out[i] = generate_scene(g, seed + i);
        return out;
    }
    // scene i depends only on (g, seed + i), so any schedule gives one result
    std::atomic<int> next{0};
    std::exception_ptr fail;
    std::mutex fail_mu;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (int i; (i = next.fetch_add(1)) < count;) {
                try {
                    out[i] = generate_scene(g, seed + i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(fail_mu);
                    if (!fail) fail = std::current_exception();
                    return;
                }
            }
        });
    for (std::thread& t : pool) t.join();
    if (fail) std::rethrow_exception(fail);
    return out;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void spill(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << text;
    if (!out) throw IoError("write failed: " + path);
}

int run_gen(const RunConfig& rc) {
    std::cerr << "seed: " << rc.seed << "\n";
    const auto scenes = generate_scenes(generator_from(rc), rc.count, rc.seed, rc.threads);
    const CocoDataset ds = build_coco(scenes, rc.out_dir);
    std::cerr << "wrote " << ds.images.size() << " images, " << ds.annotations.size()
              << " annotations to " << rc.out_dir << "\n";
    return 0;
}

// expects <stem>_rgb.ppm + <stem>_depth.pgm + <stem>_mask<k>_<category>.pgm
int run_convert(const RunConfig& rc) {
    std::vector<std::string> stems;
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(rc.in_dir)) {
        if (!entry.is_regular_file()) continue;
        const std::string name = entry.path().filename().string();
        names.push_back(name);
        if (name.size() > 8 && name.ends_with("_rgb.ppm"))
            stems.push_back(name.substr(0, name.size() - 8));
    }
    std::sort(stems.begin(), stems.end());
    std::sort(names.begin(), names.end());
    if (stems.empty()) throw ValidationError("convert: no *_rgb.ppm files in " + rc.in_dir);

    CocoDataset ds;
    ds.categories = shape_categories();
    std::set<std::string> used;
    int ann_id = 0;
    for (size_t i = 0; i < stems.size(); ++i) {
        const std::string& stem = stems[i];
        const int image_id = static_cast<int>(i) + 1;
        const std::string rgb_name = stem + "_rgb.ppm";
        const std::string depth_name = stem + "_depth.pgm";
        used.insert(rgb_name);
        const PpmImage rgb = read_ppm((fs::path(rc.in_dir) / rgb_name).string());
        if (!fs::exists(fs::path(rc.in_dir) / depth_name))
            throw ValidationError("convert: missing " + depth_name + " for " + rgb_name);
        used.insert(depth_name);
        const Pgm16Image dep = read_pgm16((fs::path(rc.in_dir) / depth_name).string());
        if (dep.h != rgb.h || dep.w != rgb.w)
            throw ValidationError("convert: " + depth_name + " is " + std::to_string(dep.w) +
                                  "x" + std::to_string(dep.h) + ", rgb is " +
                                  std::to_string(rgb.w) + "x" + std::to_string(rgb.h));
        ds.images.push_back({image_id, rgb_name, depth_name, rgb.w, rgb.h});

        // instance index -> (category, file name), ordered by index
        std::map<int, std::pair<int, std::string>> members;
        const std::string prefix = stem + "_mask";
        for (const std::string& name : names) {
            if (!name.starts_with(prefix) || !name.ends_with(".pgm")) continue;
            const std::string tail = name.substr(prefix.size(), name.size() - prefix.size() - 4);
            const size_t sep = tail.find('_');
            if (sep == std::string::npos || sep == 0 || sep + 1 >= tail.size() ||
                tail.find_first_not_of("0123456789", 0) < sep ||
                tail.find_first_not_of("0123456789", sep + 1) != std::string::npos)
                throw ValidationError("convert: cannot parse mask file name " + name);
            const int index = std::stoi(tail.substr(0, sep));
            const int category = std::stoi(tail.substr(sep + 1));
            if (!members.emplace(index, std::make_pair(category, name)).second)
                throw ValidationError("convert: duplicate mask index in " + name);
            used.insert(name);
        }
        if (members.empty())
            throw ValidationError("convert: no mask files for " + rgb_name);
        for (const auto& [index, entry] : members) {
            const auto& [category, name] = entry;
            bool known = false;
            for (const CocoCategory& c : ds.categories) known |= c.id == category;
            if (!known)
                throw ValidationError("convert: unknown category " + std::to_string(category) +
                                      " in " + name);
            const Pgm16Image mi = read_pgm16((fs::path(rc.in_dir) / name).string());
            if (mi.h != rgb.h || mi.w != rgb.w)
                throw ValidationError("convert: " + name + " does not match its image size");
            Mask m(mi.h, mi.w);
            for (size_t p = 0; p < mi.gray.size(); ++p) m.data[p] = mi.gray[p] ? 1 : 0;
            if (m.area() == 0) throw ValidationError("convert: " + name + " is empty");
            ds.annotations.push_back(annotation_from_mask(m, ++ann_id, image_id, category));
        }
    }
    for (const std::string& name : names)
        if (!used.count(name) && (name.find("_mask") != std::string::npos ||
                                  name.ends_with("_depth.pgm") || name.ends_with("_rgb.ppm")))
            throw ValidationError("convert: " + name + " matches no *_rgb.ppm stem");

    write_coco(ds, rc.out_file);
    const ValidationReport report = validate_coco(rc.out_file);
    if (!report.ok)
        throw ValidationError("convert: produced an invalid dataset: " +
                              report.violations.front());
    std::cerr << "converted " << ds.images.size() << " images, " << ds.annotations.size()
              << " annotations to " << rc.out_file << "\n";
    return 0;
}

int run_validate(const RunConfig& rc) {
    const ValidationReport report = validate_coco(rc.in_file);
    if (!report.ok) {
        for (const std::string& v : report.violations) std::cout << v << "\n";
        return 1;
    }
    const CocoDataset ds = read_coco(rc.in_file);
    std::cout << "ok: " << ds.images.size() << " images, " << ds.annotations.size()
              << " annotations, " << ds.categories.size() << " categories\n";
    return 0;
}

int run_stats(const RunConfig& rc) {
    const CocoDataset ds = read_coco(rc.in_file);
    write_stats_csv(ds, rc.out_dir);
    std::cerr << "wrote 5 csv files to " << rc.out_dir << "\n";
    return 0;
}

int run_split(const RunConfig& rc) {
    std::cerr << "seed: " << rc.seed << "\n";
    const CocoDataset ds = read_coco(rc.in_file);
    const auto [train_ds, val_ds] = split_dataset(ds, rc.train_frac, rc.seed);
    fs::create_directories(rc.out_dir);
    write_coco(train_ds, (fs::path(rc.out_dir) / "train.json").string());
    write_coco(val_ds, (fs::path(rc.out_dir) / "val.json").string());

    nlohmann::json manifest;
    manifest["seed"] = rc.seed;
    manifest["train_fraction"] = rc.train_frac;
    auto ids = [](const CocoDataset& d) {
        std::vector<int> out;
        for (const CocoImage& img : d.images) out.push_back(img.id);
        return out;
    };
    manifest["train_images"] = ids(train_ds);
    manifest["val_images"] = ids(val_ds);
    spill((fs::path(rc.out_dir) / "manifest.json").string(), manifest.dump(2) + "\n");
    std::cerr << "split " << ds.images.size() << " images into " << train_ds.images.size()
              << " train / " << val_ds.images.size() << " val\n";
    return 0;
}

int run_train(const RunConfig& rc) {
    std::cerr << "seed: " << rc.seed << "\n";
    const ModelConfig mc = model_from(rc, rc.seed);
    const TrainConfig tc = train_from(rc);
    const CocoDataset ds = read_coco((fs::path(rc.data_dir) / "annotations.json").string());

    CocoDataset train_ds, val_ds;
    if (rc.val_frac == 0.0) {
        train_ds = ds;
    } else {
        std::tie(train_ds, val_ds) = split_dataset(ds, 1.0 - rc.val_frac, rc.split_seed);
    }
    const auto train_set = samples_from_coco(train_ds, rc.data_dir, mc);
    const auto val_set = samples_from_coco(val_ds, rc.data_dir, mc);

    TrainResult result = train(mc, tc, train_set, val_set, val_ds, &std::cerr);
    fs::create_directories(rc.out_dir);
    save_checkpoint((fs::path(rc.out_dir) / "checkpoint").string(), result.params);
    spill((fs::path(rc.out_dir) / "trace.csv").string(), trace_to_csv(result.trace));
    std::cerr << "wrote checkpoint/ and trace.csv to " << rc.out_dir << "\n";
    return 0;
}

int run_eval(const RunConfig& rc) {
    const CocoDataset gt = read_coco(rc.gt_file);
    std::vector<Detection> dets;
    if (!rc.dets_file.empty()) {
        dets = detections_from_json(slurp(rc.dets_file));
    } else {
        ModelParams params = load_checkpoint(rc.checkpoint_dir);
        const std::string dir =
            rc.data_dir.empty() ? fs::path(rc.gt_file).parent_path().string() : rc.data_dir;
        const auto samples = samples_from_coco(gt, dir, params.cfg);
        dets = predict_detections(params.cfg, params, samples);
        if (!rc.dump_dets.empty()) spill(rc.dump_dets, detections_to_json(dets));
    }
    const ApReport report = evaluate(gt, dets);
    const std::string json = ap_report_to_json(report);
    std::cout << json;
    std::cerr << ap_report_table(report);
    if (!rc.out_file.empty()) spill(rc.out_file, json);
    return 0;
}

int run_gradcheck(const RunConfig& rc) {
    std::cerr << "seed: " << rc.seed << "\n";
    const double err = gradcheck_module(rc.module, rc.seed);
    std::cout << "max relative error: " << format_double(err) << "\n";
    return err <= 1e-5 ? 0 : 1;
}

int run_bench(const RunConfig& rc) {
    std::cerr << "seed: " << rc.seed << "\n";
    std::vector<FusionKind> kinds;
    for (const std::string& token : split_list(rc.kinds)) kinds.push_back(parse_fusion_kind(token));
    if (kinds.empty()) throw ValidationError("bench: --kinds is empty");

    const bool cleanup = rc.workdir.empty();
    const std::string work =
        cleanup ? (fs::temp_directory_path() / "rgbd_bench_data").string() : rc.workdir;
    if (cleanup) fs::remove_all(work);

    const auto scenes = generate_scenes(generator_from(rc), rc.count, rc.seed, rc.threads);
    const CocoDataset ds = build_coco(scenes, work);
    const auto [train_ds, val_ds] = split_dataset(ds, 1.0 - rc.val_frac, rc.split_seed);

    RunConfig probe = rc; // fusion flag is irrelevant to sample loading
    const ModelConfig sample_cfg = model_from(probe, rc.seed);
    const auto train_set = samples_from_coco(train_ds, work, sample_cfg);
    const auto val_set = samples_from_coco(val_ds, work, sample_cfg);

    std::ostringstream csv;
    csv << "kind,seed,ap_seg50,ap_det50,loss\n";
    for (const FusionKind kind : kinds) {
        const std::string name = fusion_kind_name(kind);
        double sum_seg = 0.0, sum_det = 0.0, sum_loss = 0.0;
        for (int s = 1; s <= rc.bench_seeds; ++s) {
            RunConfig one = rc;
            one.fusion = name;
            ModelConfig mc = model_from(one, static_cast<uint64_t>(s));
            TrainConfig tc = train_from(rc);
            tc.seed = static_cast<uint64_t>(s);
            const TrainResult result = train(mc, tc, train_set, val_set, val_ds, nullptr);
            const EpochStats& last = result.trace.back();
            csv << name << "," << s << "," << format_double(last.ap_seg50) << ","
                << format_double(last.ap_det50) << "," << format_double(last.loss) << "\n";
            std::cerr << "bench " << name << " seed " << s << ": ap_seg50 "
                      << format_double(last.ap_seg50) << " ap_det50 "
                      << format_double(last.ap_det50) << "\n";
            sum_seg += last.ap_seg50;
            sum_det += last.ap_det50;
            sum_loss += last.loss;
        }
        csv << name << ",mean," << format_double(sum_seg / rc.bench_seeds) << ","
            << format_double(sum_det / rc.bench_seeds) << ","
            << format_double(sum_loss / rc.bench_seeds) << "\n";
    }
    if (cleanup) fs::remove_all(work);
    if (rc.out_file.empty())
        std::cout << csv.str();
    else
        spill(rc.out_file, csv.str());
    return 0;
}

} // namespace

std::unique_ptr<CLI::App> make_cli_app(RunConfig& rc) {
    auto app = std::make_unique<CLI::App>("RGB-D instance segmentation toolkit", "rgbd");
    app->require_subcommand(1);
    app->fallthrough();
    app->add_option("--threads", rc.threads, "cap on worker threads")
        ->capture_default_str()
        ->check(CLI::Range(1, 256));

    CLI::App* gen = app->add_subcommand("gen", "generate a synthetic RGB-D dataset");
    gen->add_option("--out-dir", rc.out_dir, "directory for images and annotations.json")
        ->required();
    gen->add_option("--count", rc.count, "number of scenes")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    gen->add_option("--seed", rc.seed, "scene seed base")->capture_default_str();
    add_dataset_flags(gen, rc);
    add_config(gen);

    CLI::App* convert = app->add_subcommand(
        "convert", "build a COCO-style JSON from an image + mask directory");
    convert->add_option("--in-dir", rc.in_dir, "directory of *_rgb.ppm, *_depth.pgm, *_mask*.pgm")
        ->required();
    convert->add_option("--out", rc.out_file, "output JSON path")->required();
    add_config(convert);

    CLI::App* validate = app->add_subcommand("validate", "check a COCO-style JSON");
    validate->add_option("--in", rc.in_file, "dataset JSON path")->required();
    add_config(validate);

    CLI::App* stats = app->add_subcommand("stats", "write dataset statistics CSVs");
    stats->add_option("--in", rc.in_file, "dataset JSON path")->required();
    stats->add_option("--out-dir", rc.out_dir, "directory for the CSV files")->required();
    add_config(stats);

    CLI::App* split = app->add_subcommand("split", "split a dataset into train and val");
    split->add_option("--in", rc.in_file, "dataset JSON path")->required();
    split->add_option("--out-dir", rc.out_dir, "directory for train.json, val.json, manifest.json")
        ->required();
    split->add_option("--train-frac", rc.train_frac, "fraction of images in the train half")
        ->capture_default_str()
        ->check(CLI::Range(0.0, 1.0));
    split->add_option("--seed", rc.seed, "shuffle seed")->capture_default_str();
    add_config(split);

    CLI::App* train = app->add_subcommand("train", "train a model on a generated dataset");
    train->add_option("--data", rc.data_dir, "dataset directory (with annotations.json)")
        ->required();
    train->add_option("--out-dir", rc.out_dir, "directory for checkpoint/ and trace.csv")
        ->required();
    train->add_option("--seed", rc.seed, "training seed (init, shuffling)")->capture_default_str();
    train->add_option("--height", rc.height, "model input height")
        ->capture_default_str()
        ->check(CLI::Range(16, 4096));
    train->add_option("--width", rc.width, "model input width")
        ->capture_default_str()
        ->check(CLI::Range(16, 4096));
    add_model_flags(train, rc);
    add_config(train);

    CLI::App* eval = app->add_subcommand("eval", "evaluate detections against ground truth");
    eval->add_option("--gt", rc.gt_file, "ground-truth dataset JSON")->required();
    CLI::Option* dets = eval->add_option("--dets", rc.dets_file, "detections JSON to score");
    CLI::Option* ckpt =
        eval->add_option("--checkpoint", rc.checkpoint_dir, "checkpoint to run instead");
    dets->excludes(ckpt);
    ckpt->excludes(dets);
    eval->add_option("--data", rc.data_dir,
                     "image directory for --checkpoint (default: the --gt directory)");
    eval->add_option("--out", rc.out_file, "also write the report JSON here");
    eval->add_option("--dump-dets", rc.dump_dets, "write computed detections JSON here");
    add_config(eval);

    CLI::App* gradcheck =
        app->add_subcommand("gradcheck", "compare analytic gradients to finite differences");
    gradcheck->add_option("--module", rc.module, "scenario to check")
        ->required()
        ->check(CLI::IsMember(gradcheck_module_names()));
    gradcheck->add_option("--seed", rc.seed, "input seed")->capture_default_str();
    add_config(gradcheck);

    CLI::App* bench = app->add_subcommand("bench", "train fusion variants and tabulate AP");
    bench->add_option("--kinds", rc.kinds, "comma-separated fusion kinds")
        ->capture_default_str()
        ->check(CLI::Validator(
            [](std::string& value) {
                for (const std::string& token : split_list(value)) {
                    const auto& known = fusion_names();
                    if (std::find(known.begin(), known.end(), token) == known.end())
                        return "unknown fusion kind: " + token;
                }
                return std::string();
            },
            "KINDS"));
    bench->add_option("--seeds", rc.bench_seeds, "train seeds 1..N per kind")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    bench->add_option("--count", rc.count, "scenes in the generated benchmark")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    bench->add_option("--seed", rc.seed, "scene seed base")->capture_default_str();
    bench->add_option("--out", rc.out_file, "CSV path (default: stdout)");
    bench->add_option("--workdir", rc.workdir, "keep the generated dataset here");
    add_dataset_flags(bench, rc);
    add_model_flags(bench, rc);
    add_config(bench);

    return app;
}

int cli_run(int argc, const char* const* argv) {
    RunConfig rc;
    auto app = make_cli_app(rc);
    try {
        app->parse(argc, argv);
        CLI::App* sub = app->get_subcommands().front();
        // CLI11 reads config files on the root app only, so feed the
        // subcommand's --config through by hand; flags keep precedence
        // because config items never touch an option that already has a value
        if (CLI::Option* conf = sub->get_config_ptr(); conf != nullptr && conf->count() > 0) {
            const std::string path = conf->as<std::string>();
            std::ifstream in(path);
            if (!in) throw CLI::FileError::Missing(path);
            sub->parse_from_stream(in);
        }
        if (sub->get_name() == "eval" && sub->count("--dets") == 0 &&
            sub->count("--checkpoint") == 0)
            throw CLI::RequiredError("eval: one of --dets or --checkpoint");
    } catch (const CLI::CallForHelp&) {
        const auto subs = app->get_subcommands();
        std::cout << (subs.empty() ? app->help() : subs.front()->help());
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    }
    try {
        const std::string name = app->get_subcommands().front()->get_name();
        if (name == "gen") return run_gen(rc);
        if (name == "convert") return run_convert(rc);
        if (name == "validate") return run_validate(rc);
        if (name == "stats") return run_stats(rc);
        if (name == "split") return run_split(rc);
        if (name == "train") return run_train(rc);
        if (name == "eval") return run_eval(rc);
        if (name == "gradcheck") return run_gradcheck(rc);
        return run_bench(rc);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace rgbd
