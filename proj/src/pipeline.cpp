#include "lindistill/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace lindistill {

namespace {

namespace fs = std::filesystem;

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return d;
    } catch (const std::exception&) {
        throw std::invalid_argument("config key '" + key + "': not a number: '" + value + "'");
    }
}

int parse_int(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const long v = std::stol(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return static_cast<int>(v);
    } catch (const std::exception&) {
        throw std::invalid_argument("config key '" + key + "': not an integer: '" + value + "'");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const unsigned long long v = std::stoull(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return static_cast<std::uint64_t>(v);
    } catch (const std::exception&) {
        throw std::invalid_argument("config key '" + key + "': not an unsigned integer: '" +
                                    value + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw std::invalid_argument("config key '" + key + "': not a boolean: '" + value + "'");
}

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

} // namespace

RunSetup toy_preset() {
    RunSetup s;
    s.teacher.embed_dim = 64;
    s.teacher.mlp_dim = 128;
    s.teacher.num_blocks = 4;
    s.teacher.patch_size = 4;
    s.teacher.image_size = 32;
    s.teacher.channels = 3;
    s.teacher.mixer = MixerKind::kAttention;
    s.teacher.use_class_token = true;
    s.teacher.init_std = 0.2;

    s.student = s.teacher;
    s.student.mixer = MixerKind::kMamba2;

    s.distill.lambda = 1.0;
    s.distill.stages = 2;
    s.distill.mask_ratio = 0.75;
    s.distill.strategy = MaskStrategy::kTokenWise;
    s.distill.scope = MatchingScope::kVisibleOnly;
    s.distill.smooth_l1_beta = 1.0;
    s.distill.optim.peak_lr = 1e-3;
    s.distill.optim.min_lr = 1e-5;
    s.distill.optim.weight_decay = 0.05;
    s.distill.optim.warmup_steps = 25;
    s.distill.optim.total_steps = 500;
    s.distill.batch_size = 16;
    s.distill.log_every = 1;
    s.distill.probe_items = 2;

    s.data = "synthetic";
    s.seed = 0;
    s.teacher_warmup_steps = 300;
    return s;
}

void apply_kv(RunSetup& s, const std::string& key, const std::string& value) {
    if (key == "seed") s.seed = parse_u64(key, value);
    else if (key == "data") s.data = value;
    else if (key == "teacher_warmup_steps") s.teacher_warmup_steps = parse_int(key, value);
    else if (key == "teacher_checkpoint") s.teacher_checkpoint = value;
    else if (key == "image_size") { s.teacher.image_size = s.student.image_size = parse_int(key, value); }
    else if (key == "patch_size") { s.teacher.patch_size = s.student.patch_size = parse_int(key, value); }
    else if (key == "channels") { s.teacher.channels = s.student.channels = parse_int(key, value); }
    else if (key == "use_class_token") {
        s.teacher.use_class_token = s.student.use_class_token = parse_bool(key, value);
    }
    else if (key == "init_std") { s.teacher.init_std = s.student.init_std = parse_double(key, value); }
    else if (key == "teacher_dim") s.teacher.embed_dim = parse_int(key, value);
    else if (key == "teacher_mlp_dim") s.teacher.mlp_dim = parse_int(key, value);
    else if (key == "teacher_blocks") s.teacher.num_blocks = parse_int(key, value);
    else if (key == "student_dim") s.student.embed_dim = parse_int(key, value);
    else if (key == "student_mlp_dim") s.student.mlp_dim = parse_int(key, value);
    else if (key == "student_blocks") s.student.num_blocks = parse_int(key, value);
    else if (key == "stages") s.distill.stages = parse_int(key, value);
    else if (key == "mask_ratio") s.distill.mask_ratio = parse_double(key, value);
    else if (key == "masking") s.distill.strategy = mask_strategy_from_name(value);
    else if (key == "matching_scope") s.distill.scope = matching_scope_from_name(value);
    else if (key == "lambda") s.distill.lambda = parse_double(key, value);
    else if (key == "smooth_l1_beta") s.distill.smooth_l1_beta = parse_double(key, value);
    else if (key == "use_act_loss") s.distill.use_act_loss = parse_bool(key, value);
    else if (key == "use_mask_loss") s.distill.use_mask_loss = parse_bool(key, value);
    else if (key == "peak_lr") s.distill.optim.peak_lr = parse_double(key, value);
    else if (key == "min_lr") s.distill.optim.min_lr = parse_double(key, value);
    else if (key == "weight_decay") s.distill.optim.weight_decay = parse_double(key, value);
    else if (key == "beta1") s.distill.optim.beta1 = parse_double(key, value);
    else if (key == "beta2") s.distill.optim.beta2 = parse_double(key, value);
    else if (key == "adam_eps") s.distill.optim.eps = parse_double(key, value);
    else if (key == "warmup_steps") s.distill.optim.warmup_steps = parse_int(key, value);
    else if (key == "steps") s.distill.optim.total_steps = parse_int(key, value);
    else if (key == "batch_size") s.distill.batch_size = parse_int(key, value);
    else if (key == "log_every") s.distill.log_every = parse_int(key, value);
    else if (key == "probe_items") s.distill.probe_items = parse_int(key, value);
    else throw std::invalid_argument("unknown config key '" + key + "'");
}

std::vector<std::pair<std::string, std::string>> to_kv(const RunSetup& s) {
    std::vector<std::pair<std::string, std::string>> kv;
    kv.emplace_back("seed", std::to_string(s.seed));
    kv.emplace_back("data", s.data);
    kv.emplace_back("teacher_warmup_steps", std::to_string(s.teacher_warmup_steps));
    kv.emplace_back("teacher_checkpoint", s.teacher_checkpoint);
    kv.emplace_back("image_size", std::to_string(s.teacher.image_size));
    kv.emplace_back("patch_size", std::to_string(s.teacher.patch_size));
    kv.emplace_back("channels", std::to_string(s.teacher.channels));
    kv.emplace_back("use_class_token", s.teacher.use_class_token ? "true" : "false");
    kv.emplace_back("init_std", fmt_double(s.teacher.init_std));
    kv.emplace_back("teacher_dim", std::to_string(s.teacher.embed_dim));
    kv.emplace_back("teacher_mlp_dim", std::to_string(s.teacher.mlp_dim));
    kv.emplace_back("teacher_blocks", std::to_string(s.teacher.num_blocks));
    kv.emplace_back("student_dim", std::to_string(s.student.embed_dim));
    kv.emplace_back("student_mlp_dim", std::to_string(s.student.mlp_dim));
    kv.emplace_back("student_blocks", std::to_string(s.student.num_blocks));
    kv.emplace_back("stages", std::to_string(s.distill.stages));
    kv.emplace_back("mask_ratio", fmt_double(s.distill.mask_ratio));
    kv.emplace_back("masking", mask_strategy_name(s.distill.strategy));
    kv.emplace_back("matching_scope", matching_scope_name(s.distill.scope));
    kv.emplace_back("lambda", fmt_double(s.distill.lambda));
    kv.emplace_back("smooth_l1_beta", fmt_double(s.distill.smooth_l1_beta));
    kv.emplace_back("use_act_loss", s.distill.use_act_loss ? "true" : "false");
    kv.emplace_back("use_mask_loss", s.distill.use_mask_loss ? "true" : "false");
    kv.emplace_back("peak_lr", fmt_double(s.distill.optim.peak_lr));
    kv.emplace_back("min_lr", fmt_double(s.distill.optim.min_lr));
    kv.emplace_back("weight_decay", fmt_double(s.distill.optim.weight_decay));
    kv.emplace_back("beta1", fmt_double(s.distill.optim.beta1));
    kv.emplace_back("beta2", fmt_double(s.distill.optim.beta2));
    kv.emplace_back("adam_eps", fmt_double(s.distill.optim.eps));
    kv.emplace_back("warmup_steps", std::to_string(s.distill.optim.warmup_steps));
    kv.emplace_back("steps", std::to_string(s.distill.optim.total_steps));
    kv.emplace_back("batch_size", std::to_string(s.distill.batch_size));
    kv.emplace_back("log_every", std::to_string(s.distill.log_every));
    kv.emplace_back("probe_items", std::to_string(s.distill.probe_items));
    return kv;
}

void apply_config_file(RunSetup& setup, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config file: " + path);
    std::string line;
    int lineno = 0;
    std::vector<std::string> bad_keys;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                        ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            apply_kv(setup, key, value);
        } catch (const std::invalid_argument& e) {
            bad_keys.push_back(e.what());
        }
    }
    if (!bad_keys.empty()) {
        std::string msg = path + ": invalid config entries:";
        for (const std::string& k : bad_keys) msg += " [" + k + "]";
        throw std::invalid_argument(msg);
    }
}

std::string write_manifest(const std::string& out_dir, const std::string& subcommand,
                           std::uint64_t seed,
                           const std::vector<std::pair<std::string, std::string>>& config,
                           const std::vector<std::string>& artifacts) {
    fs::create_directories(out_dir);
    nlohmann::json j;
    j["version"] = kVersionString;
    j["subcommand"] = subcommand;
    j["seed"] = seed;
    nlohmann::json cfg = nlohmann::json::object();
    for (const auto& [k, v] : config) cfg[k] = v;
    j["config"] = std::move(cfg);
    j["artifacts"] = artifacts;
    const std::string path = (fs::path(out_dir) / "manifest.json").string();
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest: " + path);
    out << j.dump(2) << "\n";
    return path;
}

Manifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read manifest: " + path);
    nlohmann::json j;
    in >> j;
    Manifest m;
    m.subcommand = j.at("subcommand").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& [k, v] : j.at("config").items()) {
        m.config.emplace_back(k, v.get<std::string>());
    }
    return m;
}

RunResult run_distill_pipeline(const RunSetup& setup, const std::string& out_dir) {
    setup.teacher.validate();
    setup.student.validate();
    setup.distill.validate();
    write_manifest(out_dir, "distill", setup.seed, to_kv(setup),
                   {"metrics.csv", "student.ckpt.json"});

    Rng root(setup.seed);
    Rng teacher_rng = root.fork(10);
    Rng student_rng = root.fork(11);
    Rng warmup_rng = root.fork(12);

    const auto data = make_image_source(setup.data, setup.teacher.image_size,
                                        setup.teacher.channels, setup.seed);

    Model teacher = Model::init(setup.teacher, teacher_rng);
    if (!setup.teacher_checkpoint.empty()) {
        load_checkpoint(teacher, setup.teacher_checkpoint);
    } else if (setup.teacher_warmup_steps > 0) {
        supervised_warmup(teacher, *data, setup.teacher_warmup_steps, 8, 1e-3, warmup_rng);
    }
    teacher.set_trainable(false);

    Model student = Model::init(setup.student, student_rng);
    student.add_student_extras(setup.teacher.embed_dim, student_rng);

    const StageMap stages =
        stage_partition(setup.teacher.num_blocks, setup.student.num_blocks, setup.distill.stages);
    return distill_run(student, teacher, *data, stages, setup.distill, out_dir, setup.seed);
}

std::vector<std::string> ablate_cells(const std::string& axis) {
    if (axis == "components") return {"mask_only", "act_only", "both"};
    if (axis == "mask_strategy") return {"block_wise", "token_wise"};
    if (axis == "matching_scope") return {"class_only", "visible_only", "all"};
    throw std::invalid_argument("unknown ablation axis '" + axis +
                                "' (components|mask_strategy|matching_scope)");
}

namespace {

RunSetup ablate_cell_setup(const std::string& axis, const std::string& cell, RunSetup base) {
    if (axis == "components") {
        if (cell == "mask_only") {
            base.distill.use_act_loss = false;
        } else if (cell == "act_only") {
            base.distill.use_mask_loss = false;
            base.distill.mask_ratio = 0.0; // nothing hidden: match over the full token set
        }
    } else if (axis == "mask_strategy") {
        base.distill.strategy = mask_strategy_from_name(cell);
    } else if (axis == "matching_scope") {
        base.distill.scope = matching_scope_from_name(cell);
    }
    return base;
}

} // namespace

std::vector<AblateRow> run_ablate_pipeline(const std::string& axis, const RunSetup& base,
                                           const std::vector<std::uint64_t>& seeds,
                                           const std::string& out_dir) {
    if (seeds.empty()) throw std::invalid_argument("ablate: need at least one seed");
    const std::vector<std::string> cells = ablate_cells(axis);
    auto kv = to_kv(base);
    kv.emplace_back("axis", axis);
    write_manifest(out_dir, "ablate", base.seed, kv, {"ablate.csv"});

    std::vector<AblateRow> rows;
    for (const std::string& cell : cells) {
        for (std::uint64_t seed : seeds) {
            RunSetup setup = ablate_cell_setup(axis, cell, base);
            setup.seed = seed;
            const std::string sub_dir =
                (fs::path(out_dir) / (cell + "-seed" + std::to_string(seed))).string();
            const RunResult r = run_distill_pipeline(setup, sub_dir);
            AblateRow row;
            row.cell = cell;
            row.seed = seed;
            row.steps = r.steps_run;
            row.final_loss = r.last_loss;
            row.final_alignment = r.last_alignment;
            rows.push_back(std::move(row));
        }
    }

    const std::string csv_path = (fs::path(out_dir) / "ablate.csv").string();
    std::ofstream csv(csv_path);
    if (!csv) throw std::runtime_error("cannot write " + csv_path);
    csv << "axis,cell,seed,steps,final_loss,final_alignment\n";
    for (const AblateRow& r : rows) {
        csv << axis << "," << r.cell << "," << r.seed << "," << r.steps << ","
            << fmt_double(r.final_loss) << "," << fmt_double(r.final_alignment) << "\n";
    }
    return rows;
}

} // namespace lindistill
