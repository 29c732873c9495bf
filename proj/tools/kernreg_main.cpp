#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kernreg/error.hpp"
#include "kernreg/run_config.hpp"

// kernreg <command> --config <path> [--set key=value]...
// exit codes: 0 ok, 2 config error, 3 divergence, 1 other failure
int main(int argc, char** argv) {
    CLI::App app{"RKHS-norm-motivated regularization experiments"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    const char* names[] = {"train", "eval-robust", "norms", "margins", "grid"};
    const char* descs[] = {"train a model and write metrics.csv + checkpoints",
                           "attack a trained model over an epsilon grid (robust.csv)",
                           "lower/upper norm report on a trained model (norms.csv)",
                           "normalized margin CDF of a trained model (margins.csv)",
                           "run every grid point and summarize (summary.csv)"};
    for (int i = 0; i < 5; ++i) {
        CLI::App* sub = app.add_subcommand(names[i], descs[i]);
        sub->add_option("--config", config_path, "JSON run configuration")->required();
        sub->add_option("--set", overrides, "dotted-key override, e.g. train.lr=0.05")->take_all();
    }

    CLI11_PARSE(app, argc, argv);
    std::string command = app.get_subcommands().front()->get_name();

    try {
        return kernreg::run_command(command, config_path, overrides);
    } catch (const kernreg::Error& e) {
        std::fprintf(stderr, "kernreg %s: %s\n", command.c_str(), e.what());
        switch (e.kind()) {
            case kernreg::Error::Kind::config: return 2;
            case kernreg::Error::Kind::divergence: return 3;
            default: return 1;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "kernreg %s: %s\n", command.c_str(), e.what());
        return 1;
    }
}
