// SPDX-License-Identifier: Apache-2.0
//
// Subcommand bodies shared by the command-line tool and the tests. Each
// returns a process exit status and reports diagnostics on `err`.

#pragma once

#include <cmath>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "headdiv/analysis.hpp"
#include "headdiv/config.hpp"
#include "headdiv/training.hpp"

namespace headdiv {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2 };

inline TrainConfig with_seed(TrainConfig c, std::optional<std::uint64_t> seed) {
    if (seed) c.seed = *seed;
    return c;
}

/// One model per lambda, all sharing the seed. Without a configured kind the
/// query representation is trained.
inline std::vector<GradSimRow> gradsim_sweep(const TrainConfig& base, const std::vector<double>& lambdas) {
    if (lambdas.empty()) throw std::invalid_argument("gradsim needs at least one lambda");
    std::vector<GradSimRow> rows;
    for (double lambda : lambdas) {
        TrainConfig c = base;
        if (!c.diversity_kind) c.diversity_kind = DiversityKind::query;
        c.lambda = lambda;
        rows.push_back({lambda, train(c).grad_similarity});
    }
    return rows;
}

inline int cmd_train(const std::string& config_path, const fs::path& out_dir, std::optional<std::uint64_t> seed,
                     std::ostream& err) {
    TrainConfig cfg;
    try {
        cfg = with_seed(load_config(config_path), seed);
    } catch (const std::exception& e) {
        err << "train: " << e.what() << "\n";
        return kConfigError;
    }
    try {
        RunArtifacts run = train(cfg);
        write_run_artifacts(run, out_dir);
    } catch (const std::exception& e) {
        err << "train: " << e.what() << "\n";
        return kFailure;
    }
    return kOk;
}

inline int cmd_gradsim(const std::string& config_path, const std::vector<double>& lambdas, const fs::path& out_dir,
                       std::optional<std::uint64_t> seed, std::ostream& err) {
    TrainConfig cfg;
    try {
        cfg = with_seed(load_config(config_path), seed);
        if (lambdas.empty()) throw ConfigError("--lambdas", "needs at least one value");
        for (double l : lambdas)
            if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("--lambdas", "values must be finite and >= 0");
    } catch (const std::exception& e) {
        err << "gradsim: " << e.what() << "\n";
        return kConfigError;
    }
    try {
        const auto rows = gradsim_sweep(cfg, lambdas);
        for (const auto& r : rows)
            if (!std::isfinite(r.value)) throw std::runtime_error("non-finite gradient similarity");
        fs::create_directories(out_dir);
        TrainConfig echo = cfg;
        if (!echo.diversity_kind) echo.diversity_kind = DiversityKind::query;
        write_file(out_dir / "gradsim.csv", render_gradsim_csv(rows, Provenance::of(echo)));
    } catch (const std::exception& e) {
        err << "gradsim: " << e.what() << "\n";
        return kFailure;
    }
    return kOk;
}

/// Rewrites report.csv from the stored full-precision report.
inline int cmd_analyze(const fs::path& run_dir, const fs::path& out_dir, std::ostream& err) {
    try {
        const StoredRun run = load_run_artifacts(run_dir);
        fs::create_directories(out_dir);
        export_report_csv(run.report, out_dir / "report.csv", Provenance::of(run.config));
    } catch (const std::exception& e) {
        err << "analyze: " << e.what() << "\n";
        return kFailure;
    }
    return kOk;
}

inline int cmd_heatmap(const fs::path& run_dir, const fs::path& out_dir, std::ostream& err) {
    try {
        const StoredRun run = load_run_artifacts(run_dir);
        fs::create_directories(out_dir);
        append_log(out_dir, export_heatmaps(run.report, out_dir, Provenance::of(run.config)));
    } catch (const std::exception& e) {
        err << "heatmap: " << e.what() << "\n";
        return kFailure;
    }
    return kOk;
}

inline int cmd_compare(const fs::path& dir_a, const fs::path& dir_b, const std::optional<fs::path>& out_dir,
                       std::ostream& out, std::ostream& err) {
    try {
        const StoredRun a = load_run_artifacts(dir_a);
        const StoredRun b = load_run_artifacts(dir_b);
        const Comparison c = compare_runs(a, b);
        const std::string text = render_comparison_text(c);
        out << text;
        if (out_dir) {
            fs::create_directories(*out_dir);
            write_file(*out_dir / "comparison.csv", render_comparison_csv(c, a, b));
            write_file(*out_dir / "comparison.txt", text);
        }
    } catch (const std::exception& e) {
        err << "compare: " << e.what() << "\n";
        return kFailure;
    }
    return kOk;
}

}  // namespace headdiv
