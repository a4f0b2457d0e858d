#include "standin/run_config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "standin/errors.hpp"

namespace standin {

namespace {

struct Field {
    std::string section;
    std::string key;
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& text, const std::string& what) {
    T value{};
    const char* first = text.data();
    const char* last = first + text.size();
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc() || ptr != last) throw ConfigError(what + ": cannot parse '" + text + "'");
    return value;
}

bool parse_bool(const std::string& text, const std::string& what) {
    if (text == "true" || text == "1" || text == "yes") return true;
    if (text == "false" || text == "0" || text == "no") return false;
    throw ConfigError(what + ": expected true/false, got '" + text + "'");
}

std::string format_float(double v) {
    std::ostringstream os;
    os.precision(9);
    os << v;
    return os.str();
}

class Registry {
public:
    explicit Registry(std::vector<Field>& out) : out_(out) {}

    void integer(const std::string& section, const std::string& key, int& ref) {
        add(section, key, [&ref] { return std::to_string(ref); },
            [&ref, section, key](const std::string& v) { ref = parse_number<int>(v, section + "." + key); });
    }
    void u64(const std::string& section, const std::string& key, std::uint64_t& ref) {
        add(section, key, [&ref] { return std::to_string(ref); },
            [&ref, section, key](const std::string& v) {
                ref = parse_number<std::uint64_t>(v, section + "." + key);
            });
    }
    void real(const std::string& section, const std::string& key, float& ref) {
        add(section, key, [&ref] { return format_float(ref); },
            [&ref, section, key](const std::string& v) { ref = parse_number<float>(v, section + "." + key); });
    }
    void real(const std::string& section, const std::string& key, double& ref) {
        add(section, key, [&ref] { return format_float(ref); },
            [&ref, section, key](const std::string& v) { ref = parse_number<double>(v, section + "." + key); });
    }
    void boolean(const std::string& section, const std::string& key, bool& ref) {
        add(section, key, [&ref] { return std::string(ref ? "true" : "false"); },
            [&ref, section, key](const std::string& v) { ref = parse_bool(v, section + "." + key); });
    }
    void text(const std::string& section, const std::string& key, std::string& ref) {
        add(section, key, [&ref] { return ref; }, [&ref](const std::string& v) { ref = v; });
    }
    void add(const std::string& section, const std::string& key, std::function<std::string()> get,
             std::function<void(const std::string&)> set) {
        out_.push_back({section, key, std::move(get), std::move(set)});
    }

private:
    std::vector<Field>& out_;
};

void register_model(Registry& r, ModelConfig& m) {
    r.integer("model", "d_model", m.d_model);
    r.integer("model", "n_blocks", m.n_blocks);
    r.integer("model", "heads", m.heads);
    r.integer("model", "ffn_mult", m.ffn_mult);
    r.integer("model", "patch_t", m.patch.t);
    r.integer("model", "patch_h", m.patch.h);
    r.integer("model", "patch_w", m.patch.w);
    r.integer("model", "frames", m.frames);
    r.integer("model", "latent_h", m.latent_h);
    r.integer("model", "latent_w", m.latent_w);
    r.integer("model", "channels", m.channels);
    r.integer("model", "ref_h", m.ref_h);
    r.integer("model", "ref_w", m.ref_w);
    r.integer("model", "prompt_vocab", m.prompt_vocab);
    r.integer("model", "prompt_len", m.prompt_len);
    r.integer("model", "lora_rank", m.lora_rank);
    r.real("model", "lora_alpha", m.lora_alpha);
    r.add("model", "position_layout",
          [&m] { return std::string(m.position_layout == PositionLayout::Conditional ? "conditional" : "shared"); },
          [&m](const std::string& v) {
              if (v == "conditional") m.position_layout = PositionLayout::Conditional;
              else if (v == "shared") m.position_layout = PositionLayout::Shared;
              else throw ConfigError("model.position_layout: expected conditional or shared, got '" + v + "'");
          });
    r.boolean("model", "modulate_image_stream", m.modulate_image_stream);
}

void register_rope(Registry& r, ModelConfig& m, bool* rope_auto) {
    r.add("rope", "split",
          [&m, rope_auto] {
              if (rope_auto && *rope_auto) return std::string("auto");
              return std::to_string(m.rope.d_t) + "," + std::to_string(m.rope.d_h) + "," +
                     std::to_string(m.rope.d_w);
          },
          [&m, rope_auto](const std::string& v) {
              if (v == "auto") {
                  if (!rope_auto) throw ConfigError("rope.split: 'auto' is not allowed here");
                  *rope_auto = true;
                  return;
              }
              std::stringstream ss(v);
              std::string part;
              std::vector<int> parts;
              while (std::getline(ss, part, ',')) parts.push_back(parse_number<int>(trim(part), "rope.split"));
              if (parts.size() != 3) throw ConfigError("rope.split: expected 'auto' or three integers t,h,w");
              m.rope.d_t = parts[0];
              m.rope.d_h = parts[1];
              m.rope.d_w = parts[2];
              if (rope_auto) *rope_auto = false;
          });
    r.real("rope", "base", m.rope.base);
}

std::vector<Field> fields(RunConfig& c) {
    std::vector<Field> out;
    Registry r(out);
    register_model(r, c.model);
    register_rope(r, c.model, &c.rope_auto);

    r.text("data", "dir", c.data.dir);
    r.integer("data", "samples", c.data.samples);
    r.u64("data", "seed", c.data.seed);
    r.integer("data", "glyph", c.data.glyph);
    r.integer("data", "downsample", c.data.downsample);

    r.add("train", "stage", [&c] { return std::string(1, c.train.stage); },
          [&c](const std::string& v) {
              if (v != "A" && v != "B") throw ConfigError("train.stage: expected A or B, got '" + v + "'");
              c.train.stage = v[0];
          });
    r.integer("train", "steps", c.train.steps);
    r.integer("train", "batch", c.train.batch);
    r.real("train", "lr", c.train.lr);
    r.u64("train", "seed", c.train.seed);
    r.integer("train", "log_every", c.train.log_every);
    r.text("train", "out", c.train.out);
    r.text("train", "base_checkpoint", c.train.base_checkpoint);
    r.text("train", "resume", c.train.resume);

    r.integer("sampler", "steps", c.sampler.steps);
    r.u64("sampler", "seed", c.sampler.seed);
    r.boolean("sampler", "use_cache", c.sampler.use_cache);
    r.text("sampler", "checkpoint", c.sampler.checkpoint);
    r.text("sampler", "ref", c.sampler.ref);
    r.integer("sampler", "prompt", c.sampler.prompt);
    r.text("sampler", "out", c.sampler.out);

    r.boolean("ablation", "disable_rsa", c.ablation.disable_rsa);
    r.boolean("ablation", "disable_cpm", c.ablation.disable_cpm);
    r.integer("ablation", "seeds", c.ablation.seeds);
    r.integer("ablation", "stage_a_steps", c.ablation.stage_a_steps);
    r.integer("ablation", "stage_b_steps", c.ablation.stage_b_steps);
    r.integer("ablation", "eval_per_identity", c.ablation.eval_per_identity);
    r.integer("ablation", "sample_steps", c.ablation.sample_steps);
    r.text("ablation", "out", c.ablation.out);

    r.integer("bench", "reps", c.bench.reps);
    r.integer("bench", "sample_steps", c.bench.sample_steps);
    r.text("bench", "checkpoint", c.bench.checkpoint);
    r.text("bench", "report", c.bench.report);

    r.text("run", "log", c.run_log);
    return out;
}

Field* find_field(std::vector<Field>& fs, const std::string& section, const std::string& key) {
    for (auto& f : fs)
        if (f.section == section && f.key == key) return &f;
    return nullptr;
}

void parse_into(std::vector<Field>& fs, const std::string& text, const std::string& allowed_prefix_sections) {
    std::istringstream in(text);
    std::string line;
    std::string section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string where = "line " + std::to_string(line_no);
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + ": malformed section header");
            section = trim(line.substr(1, line.size() - 2));
            const bool known = std::any_of(fs.begin(), fs.end(), [&](const Field& f) { return f.section == section; });
            if (!known && allowed_prefix_sections.empty()) throw ConfigError(where + ": unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
        if (section.empty()) throw ConfigError(where + ": key outside of any section");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        Field* f = find_field(fs, section, key);
        if (!f) {
            // Checkpoint headers carry extra sections that a model-only parse skips.
            if (!allowed_prefix_sections.empty() && allowed_prefix_sections.find("|" + section + "|") == std::string::npos)
                continue;
            throw ConfigError(where + ": unknown key " + section + "." + key);
        }
        f->set(value);
    }
}

std::string serialize_fields(std::vector<Field>& fs) {
    std::ostringstream os;
    std::string section;
    for (auto& f : fs) {
        if (f.section != section) {
            if (!section.empty()) os << "\n";
            section = f.section;
            os << "[" << section << "]\n";
        }
        os << f.key << " = " << f.get() << "\n";
    }
    return os.str();
}

}  // namespace

void RunConfig::finalize() {
    if (ablation.disable_cpm) model.position_layout = PositionLayout::Shared;
    if (model.heads > 0 && model.d_model % model.heads == 0) {
        if (rope_auto) {
            model.rope = RoPEConfig::with_default_split(model.head_dim(), model.rope.base);
        } else {
            model.rope.head_dim = model.head_dim();
        }
    }
    try {
        model.validate();
    } catch (const ValidationError& e) {
        throw ConfigError(e.what());
    }
    if (train.steps < 0 || train.batch < 1 || !(train.lr > 0.0f)) throw ConfigError("train: invalid steps/batch/lr");
    if (sampler.steps < 1) throw ConfigError("sampler.steps must be >= 1");
    if (sampler.prompt < 0 || sampler.prompt + 1 >= model.prompt_vocab)
        throw ConfigError("sampler.prompt is outside the motion classes");
    if (data.samples < 1 || data.glyph < 1 || data.downsample < 1) throw ConfigError("data: invalid sizes");
    if (ablation.seeds < 1 || ablation.eval_per_identity < 1 || ablation.sample_steps < 1)
        throw ConfigError("ablation: seeds, eval_per_identity and sample_steps must be >= 1");
    if (bench.reps < 3) throw ConfigError("bench.reps must be >= 3");
}

RunConfig parse_config(const std::string& text) {
    RunConfig cfg;
    auto fs = fields(cfg);
    parse_into(fs, text, "");
    cfg.finalize();
    return cfg;
}

std::string serialize_config(const RunConfig& cfg) {
    RunConfig copy = cfg;
    auto fs = fields(copy);
    return serialize_fields(fs);
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return parse_config(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
        throw ConfigError("override '" + assignment + "': expected section.key=value");
    }
    const std::string section = trim(assignment.substr(0, dot));
    const std::string key = trim(assignment.substr(dot + 1, eq - dot - 1));
    auto fs = fields(cfg);
    Field* f = find_field(fs, section, key);
    if (!f) throw ConfigError("override: unknown key " + section + "." + key);
    f->set(trim(assignment.substr(eq + 1)));
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& assignments) {
    for (const auto& a : assignments) apply_override(cfg, a);
    cfg.finalize();
}

std::string serialize_model_config(const ModelConfig& cfg) {
    ModelConfig copy = cfg;
    std::vector<Field> fs;
    Registry r(fs);
    register_model(r, copy);
    register_rope(r, copy, nullptr);
    return serialize_fields(fs);
}

ModelConfig parse_model_config(const std::string& text) {
    ModelConfig cfg;
    std::vector<Field> fs;
    Registry r(fs);
    register_model(r, cfg);
    register_rope(r, cfg, nullptr);
    parse_into(fs, text, "|model|rope|");
    cfg.rope.head_dim = cfg.head_dim();
    try {
        cfg.validate();
    } catch (const ValidationError& e) {
        throw ConfigError(e.what());
    }
    return cfg;
}

}  // namespace standin
