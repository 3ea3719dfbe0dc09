// Experiment CLI: teacher pretraining, method runs, ablation grids, and
// per-sample weight export. Configuration comes from a flat key=value file
// plus --set overrides; every run directory receives the fully resolved
// config for reproduction.

#include <CLI11.hpp>

#include <iostream>

#include "dskd/experiment.hpp"

namespace {

std::vector<std::pair<std::string, std::string>> split_overrides(const std::vector<std::string>& sets) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("--set: expected key=value, got '" + s + "'");
        out.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deeply-supervised knowledge distillation experiments"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> sets;
    app.add_option("--config", config_path, "key=value config file");
    app.add_option("--set", sets, "override config entries (key=value, repeatable)");

    auto* cmd_pretrain = app.add_subcommand("pretrain", "train the teacher with cross-entropy and save a checkpoint");
    auto* cmd_run = app.add_subcommand("run", "run one method across the configured seeds");

    auto* cmd_grid = app.add_subcommand("grid", "run a method or shallow-position grid");
    std::string grid_methods;
    std::string grid_positions;
    cmd_grid->add_option("--methods", grid_methods, "comma list, e.g. student_only,kd,dsn,dskd");
    cmd_grid->add_option("--positions", grid_positions, "semicolon list of position sets, e.g. 'none;1;2;1,2'");

    auto* cmd_export = app.add_subcommand("export-weights", "export per-sample shallow KD weights on the test split");
    int export_layer = 1;
    std::string export_checkpoint;
    cmd_export->add_option("--layer", export_layer, "shallow layer index (1..L-1)");
    cmd_export->add_option("--checkpoint", export_checkpoint, "trained student checkpoint")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        dskd::ExperimentConfig cfg = dskd::parse_config(config_path, split_overrides(sets));

        if (cmd_pretrain->parsed()) {
            auto [ckpt, acc] = dskd::pretrain_teacher(cfg);
            std::cout << "teacher checkpoint: " << ckpt << "\n";
            std::cout << "teacher test accuracy: " << acc << "\n";
        } else if (cmd_run->parsed()) {
            auto res = dskd::run_method(cfg);
            std::cout << "method " << dskd::method_name(cfg.method) << ": " << res.mean << " +/- " << res.stddev
                      << " (" << res.seed_accuracies.size() << " seeds)\n";
            std::cout << "results in " << res.run_dir << "\n";
        } else if (cmd_grid->parsed()) {
            if (!grid_methods.empty()) {
                std::vector<dskd::Method> methods;
                std::stringstream ss(grid_methods);
                std::string tok;
                while (std::getline(ss, tok, ',')) methods.push_back(dskd::parse_method(tok));
                auto results = dskd::run_method_grid(cfg, methods);
                for (const auto& [name, r] : results)
                    std::cout << name << ": " << r.mean << " +/- " << r.stddev << "\n";
            } else if (!grid_positions.empty()) {
                std::vector<std::set<int>> sets_of_positions;
                std::stringstream ss(grid_positions);
                std::string group;
                while (std::getline(ss, group, ';')) {
                    std::set<int> pos;
                    if (group != "none" && !group.empty()) {
                        std::stringstream gs(group);
                        std::string tok;
                        while (std::getline(gs, tok, ',')) pos.insert(std::stoi(tok));
                    }
                    sets_of_positions.push_back(pos);
                }
                auto results = dskd::run_position_grid(cfg, sets_of_positions);
                for (const auto& [name, r] : results)
                    std::cout << name << ": " << r.mean << " +/- " << r.stddev << "\n";
            } else {
                std::cerr << "error: grid needs --methods or --positions\n";
                return 2;
            }
        } else if (cmd_export->parsed()) {
            const std::string path = dskd::export_weight_distribution(cfg, export_checkpoint, export_layer);
            std::cout << "weights written to " << path << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
