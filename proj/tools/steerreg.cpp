#include "steerreg/basis.hpp"
#include "steerreg/binary_io.hpp"
#include "steerreg/experiment.hpp"
#include "steerreg/kernels.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <iostream>
#include <sstream>

namespace {

using namespace steerreg;
using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

struct Options {
    std::string command;
    fs::path config;
    fs::path checkpoint;
    fs::path out;
};

struct Context {
    exp::ExperimentConfig cfg;
    std::string hash;
    fs::path out;
    fs::path checkpoint;
};

std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    std::ostringstream s;
    s.precision(10);
    s << v;
    return s.str();
}

Json number(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

void write_json(const fs::path& path, const Context& ctx, Json body) {
    Json doc;
    doc["config_hash"] = ctx.hash;
    for (auto& [k, v] : body.items()) doc[k] = v;
    io::write_text_atomic(path, doc.dump(2) + "\n");
}

void write_csv(const fs::path& path, const Context& ctx, const std::string& header,
               const std::vector<std::string>& rows) {
    std::string text = "# config_hash=" + ctx.hash + "\n" + header + "\n";
    for (const auto& r : rows) text += r + "\n";
    io::write_text_atomic(path, text);
}

std::string pair_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "pair_%03zu", i);
    return buf;
}

std::unique_ptr<reg::RegistrationModel> load_model(const Context& ctx) {
    auto model = exp::make_model(ctx.cfg.model);
    std::uint64_t structure = 0;
    const optim::ParameterSet params = optim::load_checkpoint(ctx.checkpoint, &structure);
    if (structure != model->structure_hash())
        throw exp::ConfigError("checkpoint " + ctx.checkpoint.string() + " was trained with a different model structure (" +
                               exp::hex64(structure) + " vs " + exp::hex64(model->structure_hash()) + ")");
    model->load_parameters(params);
    return model;
}

int cmd_gen_data(const Context& ctx) {
    const auto pairs = exp::make_pairs(ctx.cfg.data, ctx.cfg.n_pairs);
    const fs::path dir = ctx.cfg.data_dir.empty() ? ctx.out / "data" : ctx.cfg.data_dir;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        Json info;
        info["config_hash"] = ctx.hash;
        info["seed"] = ctx.cfg.data.seed + i;
        synth::save_pair(dir / pair_name(i), pairs[i], info.dump());
    }
    std::cout << "wrote " << pairs.size() << " pairs to " << dir.string() << "\n";
    return 0;
}

int cmd_train(const Context& ctx) {
    const auto pairs = exp::config_pairs(ctx.cfg);
    std::vector<reg::TrainRecord> curve;
    std::cerr << "training " << reg::variant_name(ctx.cfg.model.variant) << " for " << ctx.cfg.train.steps
              << " steps on " << pairs.size() << " pairs\n";
    auto model = exp::train_model(ctx.cfg.model, exp::pointers(pairs), ctx.cfg.train, &curve, &std::cerr);
    fs::create_directories(ctx.out);
    optim::save_checkpoint(ctx.out / "checkpoint.strg", model->params(), model->structure_hash(), ctx.cfg.hash());
    std::vector<std::string> rows;
    for (const auto& r : curve) rows.push_back(std::to_string(r.step) + "," + fmt(r.loss) + "," + fmt(r.similarity) + "," + fmt(r.regularization));
    write_csv(ctx.out / "train_curve.csv", ctx, "step,loss,similarity,regularization", rows);
    Json summary;
    summary["variant"] = reg::variant_name(ctx.cfg.model.variant);
    summary["structure_hash"] = exp::hex64(model->structure_hash());
    summary["steps"] = ctx.cfg.train.steps;
    summary["parameters"] = model->parameter_count();
    summary["encoder_parameters"] = model->encoder_parameter_count();
    summary["final_loss"] = curve.empty() ? Json(nullptr) : number(curve.back().loss);
    write_json(ctx.out / "train.json", ctx, summary);
    std::cout << "checkpoint " << (ctx.out / "checkpoint.strg").string() << "\n";
    return 0;
}

int cmd_eval(const Context& ctx) {
    auto model = load_model(ctx);
    const auto pairs = exp::config_pairs(ctx.cfg);
    const exp::EvalSummary s = exp::evaluate(*model, pairs, ctx.cfg.train.loss);
    fs::create_directories(ctx.out / "eval");
    std::vector<std::string> rows;
    for (const auto& r : s.rows) {
        Json j;
        j["pair"] = r.pair;
        j["dice"] = number(r.metrics.dice_mean);
        j["unregistered_dice"] = number(r.unregistered_dice);
        j["assd_mm"] = number(r.metrics.assd_mean);
        j["loss"] = number(r.metrics.loss);
        Json per_label = Json::object();
        for (const auto& [label, d] : r.metrics.dice_per_label) per_label[std::to_string(label)] = number(d);
        j["dice_per_label"] = per_label;
        write_json(ctx.out / "eval" / (pair_name(r.pair) + ".json"), ctx, j);
        rows.push_back(std::to_string(r.pair) + "," + fmt(r.metrics.dice_mean) + "," + fmt(r.unregistered_dice) + "," +
                       fmt(r.metrics.assd_mean) + "," + fmt(r.metrics.loss));
    }
    rows.push_back("mean," + fmt(s.mean_dice) + "," + fmt(s.mean_unregistered_dice) + "," + fmt(s.mean_assd) + ",");
    write_csv(ctx.out / "eval.csv", ctx, "pair,dice,unregistered_dice,assd_mm,loss", rows);
    std::cout << "mean dice " << fmt(s.mean_dice) << " (unregistered " << fmt(s.mean_unregistered_dice) << "), assd "
              << fmt(s.mean_assd) << " mm\n";
    return 0;
}

int cmd_equiv_check(const Context& ctx) {
    if (ctx.cfg.data.extent % 2 == 0) throw exp::ConfigError("equiv-check needs an odd data.extent");
    auto model = ctx.checkpoint.empty() ? exp::make_model(ctx.cfg.model) : load_model(ctx);
    const exp::EquivarianceReport rep = exp::equivariance_report(*model, ctx.cfg.data, ctx.cfg.model.seed + 17);
    Json j;
    j["variant"] = reg::variant_name(ctx.cfg.model.variant);
    Json layers_json = Json::array();
    for (const auto& l : rep.layers) {
        layers_json.push_back({{"layer", l.name}, {"octahedral_residual", number(l.octahedral)}});
        std::cout << l.name << ": octahedral residual " << fmt(l.octahedral) << "\n";
    }
    j["layers"] = layers_json;
    j["stack_octahedral_residual"] = number(rep.stack_octahedral);
    std::cout << "stack: octahedral residual " << fmt(rep.stack_octahedral) << "\n";
    Json generic = Json::array();
    for (std::size_t k = 0; k < rep.generic_stack.size(); ++k) {
        const auto [angle, stack] = rep.generic_stack[k];
        generic.push_back({{"angle_deg", angle},
                           {"first_level_residual", number(stack)},
                           {"basis_residual", number(rep.generic_basis[k].second)}});
        std::cout << angle << " deg: first level " << fmt(stack) << ", basis " << fmt(rep.generic_basis[k].second)
                  << "\n";
    }
    j["generic"] = generic;
    fs::create_directories(ctx.out);
    write_json(ctx.out / "equivariance.json", ctx, j);
    return 0;
}

int cmd_rotate_eval(const Context& ctx) {
    auto model = load_model(ctx);
    const auto pairs = exp::config_pairs(ctx.cfg);
    const auto rows = exp::rotate_eval(*model, pairs, ctx.cfg.sweep.angles);
    std::vector<std::string> lines;
    std::map<double, std::pair<double, int>> per_angle;
    for (const auto& r : rows) {
        lines.push_back(fmt(r.angle) + "," + std::to_string(r.pair) + "," + fmt(r.dice) + "," + fmt(r.assd));
        per_angle[r.angle].first += r.dice;
        ++per_angle[r.angle].second;
    }
    fs::create_directories(ctx.out);
    write_csv(ctx.out / "rotate_eval.csv", ctx, "angle_deg,pair,dice,assd_mm", lines);
    Json summary = Json::array();
    for (const auto& [angle, acc] : per_angle) {
        summary.push_back({{"angle_deg", angle}, {"mean_dice", number(acc.first / acc.second)}});
        std::cout << angle << " deg: mean dice " << fmt(acc.first / acc.second) << "\n";
    }
    write_json(ctx.out / "rotate_eval.json", ctx, Json{{"variant", reg::variant_name(ctx.cfg.model.variant)}, {"angles", summary}});
    return 0;
}

std::string channels_string(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "/" : "") + std::to_string(v[i]);
    return s;
}

int cmd_ratio_sweep(const Context& ctx) {
    const auto rows = exp::ratio_sweep(ctx.cfg, &std::cerr);
    std::vector<std::string> lines;
    for (const auto& r : rows) {
        lines.push_back(layers::ratio_string(r.ratio) + "," + (r.mode == layers::RatioMode::budget ? "budget" : "literal") +
                        "," + channels_string(r.level_channels) + "," + std::to_string(r.encoder_parameters) + "," +
                        std::to_string(r.parameters) + "," + std::to_string(r.seed) + "," + fmt(r.dice));
        std::cout << lines.back() << "\n";
    }
    fs::create_directories(ctx.out);
    write_csv(ctx.out / "ratio_sweep.csv", ctx, "ratio,mode,level_channels,encoder_parameters,parameters,seed,dice",
              lines);
    return 0;
}

int cmd_sample_efficiency(const Context& ctx) {
    const auto rows = exp::sample_efficiency(ctx.cfg, &std::cerr);
    std::vector<std::string> lines;
    for (const auto& r : rows) {
        lines.push_back(fmt(r.fraction) + "," + std::to_string(r.train_pairs) + "," + fmt(r.standard_dice) + "," +
                        fmt(r.equivariant_dice) + "," + fmt(r.gap()));
        std::cout << lines.back() << "\n";
    }
    fs::create_directories(ctx.out);
    write_csv(ctx.out / "sample_efficiency.csv", ctx, "fraction,train_pairs,standard_dice,equivariant_dice,gap",
              lines);
    return 0;
}

int cmd_param_count(const Context& ctx) {
    const exp::ParamCounts c = exp::param_counts(ctx.cfg);
    std::cout << "encoder: standard " << c.standard_encoder << ", equivariant " << c.equivariant_encoder << ", ratio "
              << fmt(c.encoder_ratio()) << "\n"
              << "model:   standard " << c.standard_model << ", equivariant " << c.equivariant_model << ", ratio "
              << fmt(c.model_ratio()) << "\n";
    fs::create_directories(ctx.out);
    write_json(ctx.out / "param_count.json", ctx,
               Json{{"standard_encoder", c.standard_encoder},
                    {"equivariant_encoder", c.equivariant_encoder},
                    {"encoder_ratio", c.encoder_ratio()},
                    {"standard_model", c.standard_model},
                    {"equivariant_model", c.equivariant_model},
                    {"model_ratio", c.model_ratio()}});
    return 0;
}

int cmd_dump_basis(const Context& ctx) {
    const fs::path dir = ctx.out / "basis";
    fs::create_directories(dir);
    Json entries = Json::array();
    for (int li = 0; li <= 2; ++li)
        for (int lo = 0; lo <= 2; ++lo) {
            const auto kb = basis::cached_kernel_basis(li, lo, 3);
            const std::string name = "basis_" + std::to_string(li) + "_" + std::to_string(lo) + ".stbk";
            basis::save_basis(dir / name, *kb);
            entries.push_back({{"l_in", li}, {"l_out", lo}, {"count", kb->count()}, {"file", name},
                               {"condition_ratio", basis::basis_condition_ratio(*kb)}});
            std::cout << "(" << li << "," << lo << "): " << kb->count() << " elements\n";
        }
    write_json(dir / "basis.json", ctx, Json{{"size", 3}, {"bases", entries}});
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"steerreg: steerable-encoder registration experiments"};
    app.require_subcommand(1);
    Options opt;
    const std::vector<std::pair<std::string, std::string>> commands{
        {"gen-data", "write the synthetic pairs as SVOL volumes"},
        {"train", "train a model; writes checkpoint.strg and train_curve.csv"},
        {"eval", "score a checkpoint on the configured pairs"},
        {"equiv-check", "octahedral and generic-angle equivariance residuals"},
        {"rotate-eval", "Dice versus rotation angle of the moving image"},
        {"ratio-sweep", "train equivariant encoders over irrep ratios"},
        {"sample-efficiency", "both variants over nested training fractions"},
        {"param-count", "standard versus equivariant parameter counts"},
        {"dump-basis", "write the steerable kernel bases as STBK files"},
    };
    for (const auto& [name, help] : commands) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", opt.config, "experiment config (INI)")->required();
        sub->add_option("--checkpoint", opt.checkpoint, "STRG checkpoint");
        sub->add_option("--out", opt.out, "output directory (overrides [output] dir)");
        sub->callback([&opt, name = name] { opt.command = name; });
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        Context ctx;
        ctx.cfg = exp::ExperimentConfig::load(opt.config);
        ctx.hash = ctx.cfg.hash_hex();
        ctx.out = opt.out.empty() ? ctx.cfg.output_dir : opt.out;
        ctx.checkpoint = opt.checkpoint;
        const bool needs_checkpoint = opt.command == "eval" || opt.command == "rotate-eval";
        if (needs_checkpoint && ctx.checkpoint.empty()) ctx.checkpoint = ctx.out / "checkpoint.strg";
        if (opt.command == "gen-data") return cmd_gen_data(ctx);
        if (opt.command == "train") return cmd_train(ctx);
        if (opt.command == "eval") return cmd_eval(ctx);
        if (opt.command == "equiv-check") return cmd_equiv_check(ctx);
        if (opt.command == "rotate-eval") return cmd_rotate_eval(ctx);
        if (opt.command == "ratio-sweep") return cmd_ratio_sweep(ctx);
        if (opt.command == "sample-efficiency") return cmd_sample_efficiency(ctx);
        if (opt.command == "param-count") return cmd_param_count(ctx);
        if (opt.command == "dump-basis") return cmd_dump_basis(ctx);
        std::cerr << "unknown command " << opt.command << "\n";
        return 2;
    } catch (const exp::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
