// Command-line surface of the model-inversion lab: one subcommand per pipeline
// stage plus full-experiment. Errors leave as machine-readable JSON on stderr
// with a nonzero exit code.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "milab/config.hpp"
#include "milab/pipeline.hpp"
#include "milab/tensor.hpp"

int main(int argc, char** argv) {
    CLI::App app{"milab: model-inversion attack laboratory"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand

    std::string config_path;
    std::string out_dir;
    std::string variant;
    std::uint64_t seed = 0;
    bool seed_set = false, out_set = false, variant_set = false;
    bool single_worker = false;
    std::vector<std::string> overrides;

    app.add_option("--config", config_path, "experiment config (JSON)")->required();
    app.add_option("--seed", seed, "master seed override")->each([&](const std::string&) {
        seed_set = true;
    });
    app.add_option("--out", out_dir, "output directory override")->each([&](const std::string&) {
        out_set = true;
    });
    app.add_option("--variant", variant, "attack variant: baseline|lom|ma|lomma")
        ->each([&](const std::string&) { variant_set = true; });
    app.add_flag("--single-worker", single_worker, "single-threaded, bitwise-deterministic mode");
    app.add_option("--set", overrides, "config override as dotted.path=value (repeatable)");

    const std::vector<std::string> stages{"train-target", "train-eval", "distill",
                                          "train-gan",    "invert",     "evaluate",
                                          "analyze-overfit"};
    for (const auto& s : stages) app.add_subcommand(s, "run the " + s + " stage");
    auto* full = app.add_subcommand("full-experiment",
                                    "run all stages for the four loss variants and emit the "
                                    "comparison table");

    CLI11_PARSE(app, argc, argv);

    try {
        std::vector<std::string> all_overrides = overrides;
        if (seed_set) all_overrides.push_back("seed=" + std::to_string(seed));
        if (out_set) all_overrides.push_back("out_dir=" + out_dir);
        if (variant_set) all_overrides.push_back("attack.variant=" + variant);

        milab::set_worker_count(single_worker ? 1 : milab::default_worker_count());

        milab::ExperimentConfig cfg = milab::ExperimentConfig::load(config_path, all_overrides);
        milab::Pipeline pipeline(cfg);

        if (full->parsed()) {
            milab::ComparisonTable table = pipeline.full_experiment();
            std::cout << table.to_text();
            return 0;
        }
        for (const auto& s : stages) {
            if (app.get_subcommand(s)->parsed()) {
                pipeline.run_stage(s);
                return 0;
            }
        }
        return 1;
    } catch (const std::exception& e) {
        nlohmann::json err;
        err["error"] = e.what();
        std::cerr << err.dump() << "\n";
        return 1;
    }
}
