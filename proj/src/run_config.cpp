#include "crobim/run_config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace crobim {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw ConfigError(key + ": expected a number, got '" + v + "'");
}

std::size_t parse_count(const std::string& key, const std::string& v) {
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
        throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    }
    return static_cast<std::size_t>(std::stoull(v));
}

bool parse_flag(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string format(double v) {
    char buf[32];
    const auto end = std::to_chars(buf, buf + sizeof buf, v).ptr;
    return std::string(buf, end);
}

}  // namespace

RunConfig RunConfig::desk() { return RunConfig{}; }

RunConfig RunConfig::paper_scale() {
    RunConfig r;
    r.model = ModelConfig::paper_scale();
    r.optim = train::OptimConfig::paper_scale();
    return r;
}

void RunConfig::apply(const std::map<std::string, std::string>& kv) {
    std::map<std::string, std::string> model_keys;
    if (const auto it = kv.find("preset"); it != kv.end()) {
        if (it->second == "desk") *this = desk();
        else if (it->second == "paper") *this = paper_scale();
        else throw ConfigError("preset: expected desk or paper, got '" + it->second + "'");
    }
    for (const auto& [key, v] : kv) {
        if (key == "preset") continue;
        else if (key == "learning_rate") optim.learning_rate = parse_double(key, v);
        else if (key == "weight_decay") optim.weight_decay = parse_double(key, v);
        else if (key == "poly_power") optim.poly_power = parse_double(key, v);
        else if (key == "steps") optim.steps = parse_count(key, v);
        else if (key == "batch_size") optim.batch_size = parse_count(key, v);
        else if (key == "checkpoint_every") optim.checkpoint_every = parse_count(key, v);
        else if (key == "manifest") manifest = v;
        else if (key == "synth_count") synth_count = parse_count(key, v);
        else if (key == "synth_seed") synth_seed = parse_count(key, v);
        else if (key == "output_dir") output_dir = v;
        else if (key == "dump_attention") dump_attention = parse_flag(key, v);
        else if (key == "eval_shards") eval_shards = parse_count(key, v);
        else model_keys[key] = v;
    }
    model.apply(model_keys);
}

void RunConfig::validate() const {
    model.validate();
    optim.validate();
    if (manifest.empty() && synth_count == 0) throw ConfigError("synth_count must be >= 1");
    if (eval_shards == 0) throw ConfigError("eval_shards must be >= 1");
}

std::map<std::string, std::string> RunConfig::to_map() const {
    auto m = model.to_map();
    m["learning_rate"] = format(optim.learning_rate);
    m["weight_decay"] = format(optim.weight_decay);
    m["poly_power"] = format(optim.poly_power);
    m["steps"] = std::to_string(optim.steps);
    m["batch_size"] = std::to_string(optim.batch_size);
    m["checkpoint_every"] = std::to_string(optim.checkpoint_every);
    m["manifest"] = manifest;
    m["synth_count"] = std::to_string(synth_count);
    m["synth_seed"] = std::to_string(synth_seed);
    m["output_dir"] = output_dir.string();
    m["dump_attention"] = dump_attention ? "true" : "false";
    m["eval_shards"] = std::to_string(eval_shards);
    return m;
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(number) + ": expected key = value");
        const auto key = trim(line.substr(0, eq));
        if (key.empty()) throw ConfigError("line " + std::to_string(number) + ": empty key");
        if (!kv.emplace(key, trim(line.substr(eq + 1))).second) {
            throw ConfigError("line " + std::to_string(number) + ": repeated key '" + key + "'");
        }
    }
    return kv;
}

std::map<std::string, std::string> read_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_key_values(ss.str());
}

}  // namespace crobim
