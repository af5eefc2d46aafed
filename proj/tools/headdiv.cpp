// SPDX-License-Identifier: Apache-2.0
//
// headdiv command-line front end. Subcommands train toy attention models and
// regenerate or compare their artifacts.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "headdiv/commands.hpp"

namespace {

std::vector<double> parse_lambdas(const std::string& list) {
    std::vector<double> out;
    for (const auto& item : headdiv::split(list, ',')) {
        if (item.empty()) continue;
        out.push_back(headdiv::parse_double(item, "--lambdas"));
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    using namespace headdiv;

    CLI::App app{"Multi-head attention diversity experiments"};
    app.require_subcommand(1);
    app.footer(config_help());

    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::string lambdas = "0,0.001,1.0";
    std::string run_dir;
    std::string run_dir_b;

    auto* train_cmd = app.add_subcommand("train", "Train one model and write its run artifacts");
    train_cmd->add_option("--config", config_path, "JSON config file")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--out", out_dir, "Artifacts directory")->required();
    train_cmd->add_option("--seed", seed, "Override the config seed");
    train_cmd->footer(config_help());

    auto* gradsim_cmd = app.add_subcommand("gradsim", "Query-gradient similarity for models trained at several lambdas");
    gradsim_cmd->add_option("--config", config_path, "JSON config file")->required()->check(CLI::ExistingFile);
    gradsim_cmd->add_option("--out", out_dir, "Output directory for gradsim.csv")->required();
    gradsim_cmd->add_option("--lambdas", lambdas, "Comma-separated diversity weights")->capture_default_str();
    gradsim_cmd->add_option("--seed", seed, "Override the config seed");
    gradsim_cmd->footer(config_help());

    auto* analyze_cmd = app.add_subcommand("analyze", "Regenerate report.csv from stored artifacts");
    analyze_cmd->add_option("run", run_dir, "Artifacts directory")->required()->check(CLI::ExistingDirectory);
    analyze_cmd->add_option("--out", out_dir, "Output directory (default: the run directory)");
    analyze_cmd->footer(config_help());

    auto* heatmap_cmd = app.add_subcommand("heatmap", "Regenerate head-similarity PGM heatmaps");
    heatmap_cmd->add_option("run", run_dir, "Artifacts directory")->required()->check(CLI::ExistingDirectory);
    heatmap_cmd->add_option("--out", out_dir, "Output directory (default: the run directory)");
    heatmap_cmd->footer(config_help());

    auto* compare_cmd = app.add_subcommand("compare", "Compare a baseline run (a) against another run (b)");
    compare_cmd->add_option("a", run_dir, "Baseline artifacts directory")->required()->check(CLI::ExistingDirectory);
    compare_cmd->add_option("b", run_dir_b, "Second artifacts directory")->required()->check(CLI::ExistingDirectory);
    compare_cmd->add_option("--out", out_dir, "Write comparison.csv and comparison.txt here");
    compare_cmd->footer(config_help());

    CLI11_PARSE(app, argc, argv);

    if (train_cmd->parsed()) return cmd_train(config_path, out_dir, seed, std::cerr);
    if (gradsim_cmd->parsed()) {
        std::vector<double> values;
        try {
            values = parse_lambdas(lambdas);
        } catch (const std::exception& e) {
            std::cerr << "gradsim: " << e.what() << "\n";
            return kConfigError;
        }
        return cmd_gradsim(config_path, values, out_dir, seed, std::cerr);
    }
    if (analyze_cmd->parsed()) return cmd_analyze(run_dir, out_dir.empty() ? run_dir : out_dir, std::cerr);
    if (heatmap_cmd->parsed()) return cmd_heatmap(run_dir, out_dir.empty() ? run_dir : out_dir, std::cerr);
    if (compare_cmd->parsed()) {
        std::optional<fs::path> out;
        if (!out_dir.empty()) out = out_dir;
        return cmd_compare(run_dir, run_dir_b, out, std::cout, std::cerr);
    }
    return kFailure;
}
