#include <cstdint>
#include <string>

#include <CLI11.hpp>

#include "hk/experiments.hpp"

int main(int argc, char** argv) {
    CLI::App app{"hk: heat-kernel learning experiments"};
    app.require_subcommand(1);

    hk::cli::RunRequest req;

    auto add_common = [&](CLI::App* sub, bool config_required) {
        auto* opt = sub->add_option("--config", req.config_path, "JSON config file");
        if (config_required) opt->required();
        sub->add_option("--seed", req.seed, "seed for the run");
        sub->add_option("--out", req.out_dir, "output directory");
        sub->add_option("--jobs", req.jobs, "number of seeds to fan out");
    };

    add_common(app.add_subcommand("toy1d", "1-D heat-kernel recovery"), true);
    add_common(app.add_subcommand("svgd-gauss", "SVGD with a learned kernel on a gaussian"),
               true);
    add_common(app.add_subcommand("svgd-bnn", "BNN regression with SVGD"), true);
    add_common(app.add_subcommand("gan2d", "2-D generative training"), true);
    app.add_subcommand("validate", "run the oracle and invariant suites");

    CLI11_PARSE(app, argc, argv);

    req.experiment = app.get_subcommands().front()->get_name();
    return hk::cli::run(req);
}
