#pragma once

#include <string>
#include <vector>

#include "kernreg/data_io.hpp"
#include "kernreg/evaluation.hpp"
#include "kernreg/training.hpp"

namespace kernreg {

// Fully resolved run description parsed from a JSON config file plus
// dotted-key overrides. Unknown keys anywhere are rejected.
struct RunConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "runs/out";

    // dataset
    std::string dataset_kind = "gaussian-blobs-2d";
    std::int64_t dataset_n = 300;
    SynthParams synth;
    std::string idx_images, idx_labels;
    std::int64_t split_train = 0, split_val = 0, split_test = 0;
    double augment_mutate_p = 0;

    // model
    NetworkSpec model;
    std::string model_desc;

    LossKind loss = LossKind::cross_entropy;
    TrainConfig train;

    // evaluation block
    std::vector<double> eval_epsilons{0.0};
    int eval_steps = 40;
    Geometry eval_geometry = Geometry::l2;
    std::string eval_split = "val";
    std::int64_t eval_sample = 256;
    double norm_epsilon = 0.25;
    MarginProxy margin_proxy = MarginProxy::f_delta;

    // grid
    struct GridPointSpec {
        std::string label;
        std::vector<std::pair<std::string, std::string>> overrides;  // dotted key -> raw value
    };
    std::vector<GridPointSpec> grid_points;
};

// Parses, applies overrides ("a.b.0.c=value"), validates strictly.
RunConfig parse_run_config(const std::string& path, const std::vector<std::string>& overrides);

Dataset build_dataset(const RunConfig& cfg);

// command in {train, eval-robust, norms, margins, grid}; returns an exit code.
int run_command(const std::string& command, const std::string& config_path,
                const std::vector<std::string>& overrides);

}  // namespace kernreg
