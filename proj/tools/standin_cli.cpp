// standin <command> --config <path> [--set section.key=value ...]

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "standin/commands.hpp"
#include "standin/errors.hpp"
#include "standin/run_config.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Identity-conditioned video DiT toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    const std::vector<std::pair<std::string, std::string>> commands = {
        {"gen-data", "generate the synthetic glyph dataset"},
        {"train", "train stage A (base) or stage B (LoRA only)"},
        {"sample", "sample a video for a reference image"},
        {"ablate", "train and evaluate full / disable_rsa / disable_cpm"},
        {"bench", "FLOP accounting and cached vs uncached sampling timings"},
    };
    for (const auto& [name, help] : commands) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config_path, "run config file")->required();
        sub->add_option("--set", overrides, "override, section.key=value")->take_all();
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : standin::kExitConfig;
    }

    standin::RunConfig cfg;
    try {
        cfg = standin::load_config(config_path);
        standin::apply_overrides(cfg, overrides);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return standin::exit_code_for(e);
    }
    return standin::run_command(app.get_subcommands().front()->get_name(), cfg, std::cout, std::cerr);
}
