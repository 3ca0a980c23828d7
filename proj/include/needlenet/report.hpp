#pragma once

#include "needlenet/eval.hpp"
#include "needlenet/run_config.hpp"

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace needlenet {

// One run's convergence summary for the multi-task comparison table.
struct RunSummary {
    std::string run_dir;
    std::string tasks_trained;
    bool complete = false;
    std::uint64_t iterations_to_converge = 0;
    double plateau_accuracy = 0.0;
};

// Plateau accuracy: mean over the final quarter of evaluation rows.
// Convergence: the first evaluation whose accuracy reaches 95% of it.
inline RunSummary summarize_run(const std::string& run_dir) {
    namespace fs = std::filesystem;
    RunSummary s;
    s.run_dir = run_dir;
    const auto curve_path = fs::path(run_dir) / "curve.csv";
    const auto config_path = fs::path(run_dir) / "run_config.txt";
    if (!fs::exists(curve_path) || !fs::exists(config_path)) return s;  // incomplete

    RunConfig cfg = load_config_file(config_path.string());
    s.tasks_trained = task_set_name(cfg.tasks);
    auto rows = read_learning_curve(curve_path.string());
    if (rows.empty()) return s;
    if (rows.back().iteration != cfg.iterations) return s;  // run stopped early

    const std::size_t tail = std::max<std::size_t>(1, (rows.size() + 3) / 4);
    double plateau = 0;
    for (std::size_t i = rows.size() - tail; i < rows.size(); ++i) plateau += rows[i].accuracy;
    plateau /= static_cast<double>(tail);
    s.plateau_accuracy = plateau;
    s.iterations_to_converge = rows.back().iteration;
    for (const auto& r : rows) {
        if (r.accuracy >= 0.95 * plateau) {
            s.iterations_to_converge = r.iteration;
            break;
        }
    }
    s.complete = true;
    return s;
}

inline std::string render_report_csv(const std::vector<RunSummary>& runs) {
    std::string out = "run,tasks_trained,iterations_to_converge,plateau_accuracy,status\n";
    for (const auto& r : runs) {
        out += r.run_dir + "," + (r.tasks_trained.empty() ? "?" : r.tasks_trained) + ",";
        if (r.complete)
            out += std::to_string(r.iterations_to_converge) + "," + format_g17(r.plateau_accuracy) + ",complete\n";
        else
            out += ",,incomplete\n";
    }
    return out;
}

}  // namespace needlenet
