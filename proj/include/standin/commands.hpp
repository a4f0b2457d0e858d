#pragma once

// Command implementations behind the CLI. Each writes human-readable progress
// to `out` and machine-readable events to the run log (JSON lines).

#include <exception>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "standin/run_config.hpp"

namespace standin {

enum ExitCode : int {
    kExitOk = 0,
    kExitFailure = 1,
    kExitConfig = 2,
    kExitData = 3,
    kExitNumeric = 4,
};

int exit_code_for(const std::exception& e);

std::filesystem::path cmd_gen_data(const RunConfig& cfg, std::ostream& out);

struct TrainResult {
    std::filesystem::path checkpoint;
    double first_loss = 0.0;
    double last_loss = 0.0;
};
TrainResult cmd_train(const RunConfig& cfg, std::ostream& out);

struct SampleResult {
    std::filesystem::path latent;
    std::filesystem::path preview;
    std::filesystem::path manifest;
};
SampleResult cmd_sample(const RunConfig& cfg, std::ostream& out);

struct AblationRow {
    std::string variant;
    double identity_similarity = 0.0;  // median over seeds
    std::vector<double> per_seed;
};
std::vector<AblationRow> cmd_ablate(const RunConfig& cfg, std::ostream& out);

std::filesystem::path cmd_bench(const RunConfig& cfg, std::ostream& out);

// Dispatches by name; maps exceptions to exit codes and reports them on err.
int run_command(const std::string& name, const RunConfig& cfg, std::ostream& out, std::ostream& err);

}  // namespace standin
