#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "hypsae/log.hpp"
#include "hypsae/pipeline.hpp"

namespace {

using hypsae::pipeline::RunConfig;
using hypsae::pipeline::Stage;

struct CommonFlags {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::string mock_llm;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool config_required = true) {
    auto* c = cmd->add_option("--config", f.config, "Run configuration (JSON)");
    if (config_required) c->required();
    c->check(CLI::ExistingFile);
    cmd->add_option("--out", f.out, "Run directory (overrides output_dir)");
    cmd->add_option("--seed", f.seed, "Base seed (overrides seed)");
    cmd->add_option("--mock-llm", f.mock_llm, "Mock oracle rules file; replaces every chat endpoint")
        ->check(CLI::ExistingFile);
}

RunConfig load_config(const CommonFlags& f) {
    auto cfg = RunConfig::load(f.config);
    if (!f.out.empty()) cfg.output_dir = f.out;
    if (f.seed) cfg.seed = *f.seed;
    if (!f.mock_llm.empty()) cfg.mock_llm = f.mock_llm;
    return cfg;
}

void print_summary(const hypsae::pipeline::RunSummary& s) {
    std::cout << "run directory: " << s.run_dir.string() << '\n';
    for (auto st : s.executed) std::cout << "  ran     " << to_string(st) << '\n';
    for (auto st : s.skipped) std::cout << "  skipped " << to_string(st) << " (up to date)\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hypothesis generation from sparse autoencoder features over text embeddings"};
    app.require_subcommand(1);
    std::string level = "info";
    app.add_option("--log-level", level, "debug, info, warning or silent")
        ->check(CLI::IsMember({"debug", "info", "warning", "silent"}));

    CommonFlags flags;
    struct StageCmd {
        const char* name;
        Stage until;
        const char* help;
    };
    const StageCmd stage_cmds[] = {
        {"split", Stage::split, "Create the train/validation/heldout split"},
        {"embed", Stage::embed, "Embed every text (cached)"},
        {"train-sae", Stage::train_sae, "Train the sparse autoencoder(s)"},
        {"select", Stage::select, "Select H predictive neurons with an L1 penalty"},
        {"interpret", Stage::interpret, "Interpret the selected neurons"},
        {"annotate", Stage::evaluate, "Annotate heldout texts and fit the hypothesis report"},
        {"run", Stage::evaluate, "Run every stage"},
    };
    std::optional<Stage> chosen;
    for (const auto& sc : stage_cmds) {
        auto* cmd = app.add_subcommand(sc.name, sc.help);
        add_common(cmd, flags);
        const Stage until = sc.until;
        cmd->callback([&chosen, until] { chosen = until; });
    }

    auto* report = app.add_subcommand("report", "Render report.md and report.csv from a finished run");
    add_common(report, flags, false);

    int m_min = 16, m_max = 256, k_min = 2, k_max = 32;
    auto* tune = app.add_subcommand("tune", "Grid-search SAE size M and sparsity k (powers of two)");
    add_common(tune, flags);
    tune->add_option("--m-min", m_min, "Smallest M")->capture_default_str();
    tune->add_option("--m-max", m_max, "Largest M")->capture_default_str();
    tune->add_option("--k-min", k_min, "Smallest k")->capture_default_str();
    tune->add_option("--k-max", k_max, "Largest k")->capture_default_str();

    std::size_t trials = 10000;
    std::uint64_t triangle_seed = 0;
    auto* tri = app.add_subcommand("check-triangle", "Check the separation-score bound on random joint distributions");
    tri->add_option("--trials", trials, "Number of random joints")->capture_default_str();
    tri->add_option("--seed", triangle_seed, "Seed")->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    using hypsae::log::Level;
    hypsae::log::set_level(level == "debug" ? Level::debug
                           : level == "warning" ? Level::warning
                           : level == "silent" ? Level::silent
                                               : Level::info);
    try {
        if (chosen) {
            const auto cfg = load_config(flags);
            print_summary(hypsae::pipeline::run_pipeline(cfg, *chosen));
            if (*chosen == Stage::evaluate) std::cout << '\n' << hypsae::pipeline::emit_report(cfg.output_dir);
        } else if (report->parsed()) {
            std::filesystem::path dir = flags.out;
            if (dir.empty()) {
                if (flags.config.empty()) throw hypsae::ValidationError("report needs --out or --config");
                dir = load_config(flags).output_dir;
            }
            std::cout << hypsae::pipeline::emit_report(dir);
        } else if (tune->parsed()) {
            const auto cfg = load_config(flags);
            const auto res = hypsae::pipeline::tune(cfg, hypsae::pipeline::powers_of_two(m_min, m_max),
                                                    hypsae::pipeline::powers_of_two(k_min, k_max));
            std::cout << res.to_json() << '\n';
        } else if (tri->parsed()) {
            const auto s = hypsae::pipeline::sweep_triangle(trials, triangle_seed);
            std::printf("trials %zu, violations %zu, max(lhs - rhs) %.3e, %.3f s\n", s.trials, s.violations, s.max_gap,
                        s.seconds);
            return s.violations == 0 ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
