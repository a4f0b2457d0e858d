#include "standin/checkpoint.hpp"

#include <set>
#include <sstream>

#include "standin/errors.hpp"
#include "standin/run_config.hpp"
#include "standin/stin_io.hpp"

namespace standin {

namespace {

const std::string kStepKey = "adam_step = ";

void append_weights(NamedTensors& archive, const ModelWeights& w, const std::string& prefix) {
    w.for_each([&](const std::string& name, const Tensor& t, ParamGroup) {
        archive.entries.emplace_back(prefix + name, t);
    });
}

void fill_weights(const NamedTensors& archive, ModelWeights& w, const std::string& prefix,
                  const std::filesystem::path& path, std::set<std::string>& used) {
    w.for_each([&](const std::string& name, Tensor& t, ParamGroup) {
        const Tensor* found = archive.find(prefix + name);
        if (!found) throw DataError(path.string() + ": missing tensor " + prefix + name);
        if (found->shape() != t.shape()) {
            throw DataError(path.string() + ": tensor " + prefix + name + " has shape " +
                            shape_string(found->shape()) + ", expected " + shape_string(t.shape()));
        }
        t = *found;
        used.insert(prefix + name);
    });
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const ModelWeights& w,
                     const AdamState* optimizer) {
    validate_weights(cfg, w);
    NamedTensors archive;
    archive.header = serialize_model_config(cfg) + "\n[checkpoint]\n";
    if (optimizer) archive.header += kStepKey + std::to_string(optimizer->step) + "\n";
    append_weights(archive, w, "");
    if (optimizer) {
        append_weights(archive, optimizer->m, "adam.m.");
        append_weights(archive, optimizer->v, "adam.v.");
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    save_archive(path, archive);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const NamedTensors archive = load_archive(path);
    Checkpoint ck;
    try {
        ck.config = parse_model_config(archive.header);
    } catch (const ConfigError& e) {
        throw DataError(path.string() + ": bad checkpoint header: " + e.what());
    }
    Rng scratch(0);
    ck.weights = init_weights(ck.config, scratch);
    std::set<std::string> used;
    fill_weights(archive, ck.weights, "", path, used);

    const auto pos = archive.header.find(kStepKey);
    if (pos != std::string::npos) {
        AdamState state;
        state.m = ck.weights.zeros_like();
        state.v = ck.weights.zeros_like();
        std::istringstream is(archive.header.substr(pos + kStepKey.size()));
        if (!(is >> state.step) || state.step < 0) throw DataError(path.string() + ": bad optimizer step");
        fill_weights(archive, state.m, "adam.m.", path, used);
        fill_weights(archive, state.v, "adam.v.", path, used);
        ck.optimizer = std::move(state);
    }
    for (const auto& [name, t] : archive.entries) {
        if (!used.count(name)) throw DataError(path.string() + ": unexpected tensor " + name);
    }
    return ck;
}

}  // namespace standin
