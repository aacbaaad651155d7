#pragma once

#include <cstdint>
#include <memory>
#include <string>

namespace CLI {
class App;
}

namespace rgbd {

// every flag of every subcommand, JSON config keys included, lands here
struct RunConfig {
    int threads = 1;

    std::string out_dir, in_file, out_file, in_dir;
    std::string data_dir, checkpoint_dir, dets_file, dump_dets, gt_file, workdir;

    // dataset shape (gen, bench)
    int count = 100;
    int height = 64, width = 64;
    int min_instances = 2, max_instances = 4;
    std::string color = "distinct", depth = "flat";
    int depth_gap = 2000;
    uint64_t seed = 1;

    // split
    double train_frac = 0.8;

    // model (train, bench)
    std::string fusion = "iam+cdf", design = "C";
    int classes = 2, queries = 8;
    int epochs = 12, batch_size = 4;
    double lr = 1e-3, lr_drop_factor = 0.1, grad_clip = 10.0, aux_weight = 0.5;
    double val_frac = 0.2;
    uint64_t split_seed = 99;

    // gradcheck
    std::string module;

    // bench
    std::string kinds = "none,iam,cdf,iam+cdf";
    int bench_seeds = 3;
};

// full option tree; the caller owns the app. Exposed so tests can inspect the
// flag table behind --help.
std::unique_ptr<CLI::App> make_cli_app(RunConfig& rc);

// parse + dispatch: 0 success, 1 validation failure, 2 usage error
int cli_run(int argc, const char* const* argv);

} // namespace rgbd
