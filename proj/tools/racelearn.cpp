// Command-line front end for the experiment harness.
#include "racelearn/experiments.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>

using namespace racelearn;
namespace fs = std::filesystem;
using detail::fmt_double;

namespace {

struct Common {
    std::string spec;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
};

void add_common(CLI::App* cmd, Common& c)
{
    cmd->add_option("spec", c.spec, "experiment spec (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seed, "overrides the spec's seed");
    cmd->add_option("--out", c.out, "output directory (overrides the spec's)");
}

ExperimentSpec resolve(const Common& c)
{
    auto s = load_spec(c.spec);
    if (c.seed) {
        s.seed = *c.seed;
    }
    if (c.out) {
        s.out = *c.out;
    }
    fs::create_directories(s.out);
    return s;
}

void print_mse(const std::string& name, const MseReport& m)
{
    std::cout << name << ": dvx " << m.dvx << "  dvy " << m.dvy << "  dyaw_rate " << m.dyaw_rate << "  mean "
              << m.aggregate << '\n';
}

int cmd_gen_data(const Common& c, bool modified)
{
    const auto s = resolve(c);
    GenDataConfig g;
    g.duration = s.bootstrap_duration;
    g.profile = s.driver;
    g.seed = s.seed;
    const auto plant = modified ? modified_plant(s) : nominal_plant(s);
    const auto res = gen_data(plant, load_track(s.data_track), g);
    const fs::path out(s.out);
    {
        std::ofstream f(out / "raw_log.csv");
        write_raw_log_csv(f, res.raw_log);
    }
    save_dataset((out / "dataset.csv").string(), res.dataset);
    double vmin = 1e9;
    double vmax = -1e9;
    for (const auto& smp : res.dataset) {
        vmin = std::min(vmin, smp.state.vx);
        vmax = std::max(vmax, smp.state.vx);
    }
    const nlohmann::json summary{{"experiment", "gen-data"},
                                 {"seed", s.seed},
                                 {"plant", modified ? "modified" : "nominal"},
                                 {"samples", res.dataset.size()},
                                 {"discarded_chunks", res.discarded_chunks},
                                 {"vx_min", vmin},
                                 {"vx_max", vmax},
                                 {"dataset_hash", dataset_hash(res.dataset)}};
    detail::write_text(out / "summary.json", summary.dump(2) + "\n");
    std::cout << res.dataset.size() << " samples, vx " << vmin << " .. " << vmax << ", " << res.discarded_chunks
              << " chunks regenerated\n";
    return 0;
}

int cmd_fit(const Common& c)
{
    const auto s = resolve(c);
    const auto boot = bootstrap_dataset(s);
    BootstrapOptions o;
    o.train.epochs = s.epochs;
    o.train.seed = mix_seed(s.seed, 4);
    const auto res = bootstrap(boot, VehicleParams{}, o);
    const fs::path out(s.out);
    save_bundle((out / "model").string(), res.model, {dataset_hash(boot), ""});
    std::string loss = "epoch,loss\n";
    for (std::size_t e = 0; e < res.loss_history.size(); ++e) {
        loss += std::to_string(e + 1) + "," + fmt_double(res.loss_history[e]) + "\n";
    }
    detail::write_text(out / "loss.csv", loss);
    for (const auto& w : res.fit.warnings) {
        std::cerr << "warning: " << w << '\n';
    }
    print_mse("parametric", evaluate_mse(res.model.vehicle, boot));
    print_mse("semi-parametric", evaluate_mse(res.model, boot));
    return 0;
}

int cmd_eval(const Common& c)
{
    const auto s = resolve(c);
    if (s.model.empty()) {
        throw std::runtime_error("eval: the spec must name a model bundle");
    }
    const auto m = load_bundle(s.model);
    std::string table = "dataset,hash,dvx,dvy,dyaw_rate,mean\n";
    for (const auto& [name, path] : {std::pair{"bootstrap", s.bootstrap_data},
                                     std::pair{"validation", s.validation_data}, std::pair{"test", s.test_data}}) {
        if (path.empty()) {
            continue;
        }
        const auto ds = load_dataset(path);
        const auto r = evaluate_mse(m, ds);
        print_mse(name, r);
        table += detail::csv_row({name, dataset_hash(ds), fmt_double(r.dvx), fmt_double(r.dvy),
                                  fmt_double(r.dyaw_rate), fmt_double(r.aggregate)});
    }
    detail::write_text(fs::path(s.out) / "eval.csv", table);
    return 0;
}

int cmd_compare(const Common& c)
{
    const auto r = run_model_comparison(resolve(c));
    std::cout << "validation MSE: parametric " << r.parametric.validation.back() << ", network-only "
              << r.nonparametric.validation.back() << ", semi-parametric " << r.semiparametric.validation.back()
              << '\n';
    return 0;
}

int cmd_offline(const Common& c)
{
    const auto r = run_offline_iter(resolve(c));
    std::cout << "model          bootstrap  validation  test\n";
    for (const auto& row : r.rows) {
        std::cout << row.model << "  " << row.bootstrap << "  " << row.validation << "  " << row.test << '\n';
    }
    return 0;
}

int cmd_race(const Common& c)
{
    const auto s = resolve(c);
    const auto r = run_online_iter(s);
    for (const auto& cfg : s.configs) {
        std::cout << cfg << ": mean lap (5-" << s.laps << ") " << r.mean_lap_time(cfg, std::min(5, s.laps), s.laps)
                  << " s, aborted " << r.aborted(cfg) << "/" << s.repetitions << '\n';
    }
    return 0;
}

int cmd_sweep(const Common& c)
{
    const auto r = run_sweep(resolve(c));
    for (const auto& row : r.grid) {
        std::cout << "(" << row.hidden << "," << row.hidden << ") lr " << row.learning_rate << ": "
                  << row.validation_mse << '\n';
    }
    for (const auto& row : r.decays) {
        std::cout << "weight decay " << row.weight_decay << ": " << row.validation_mse << '\n';
    }
    return 0;
}

int cmd_gg(const Common& c)
{
    const auto r = export_gg(resolve(c));
    for (const auto& run : r.runs) {
        std::cout << run.label << ": max |a_lat| " << run.max_abs_lat << (run.aborted ? " (aborted)" : "") << '\n';
    }
    std::cout << "ring: a_lat " << r.ring_measured << " vs v^2/R " << r.ring_expected << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"racelearn: semi-parametric vehicle model, online learner and MPPI experiments"};
    app.require_subcommand(1);

    Common gen, fit, ev, cmp, off, race, sweep, gg;
    bool modified = false;
    auto* g = app.add_subcommand("gen-data", "drive the scripted driver and write a dataset");
    add_common(g, gen);
    g->add_flag("--modified", modified, "use the modified plant");
    add_common(app.add_subcommand("fit", "bootstrap a model bundle"), fit);
    add_common(app.add_subcommand("eval", "score a model bundle on datasets"), ev);
    add_common(app.add_subcommand("compare-models", "parametric vs network-only vs semi-parametric"), cmp);
    add_common(app.add_subcommand("offline-iter", "offline adaptation table"), off);
    add_common(app.add_subcommand("race", "repeated 10-lap races with and without learning"), race);
    add_common(app.add_subcommand("sweep", "hidden size / learning rate / weight decay sweep"), sweep);
    add_common(app.add_subcommand("export-gg", "GG data of model snapshots plus the ring check"), gg);

    CLI11_PARSE(app, argc, argv);
    try {
        const auto name = app.get_subcommands().front()->get_name();
        if (name == "gen-data") {
            return cmd_gen_data(gen, modified);
        }
        if (name == "fit") {
            return cmd_fit(fit);
        }
        if (name == "eval") {
            return cmd_eval(ev);
        }
        if (name == "compare-models") {
            return cmd_compare(cmp);
        }
        if (name == "offline-iter") {
            return cmd_offline(off);
        }
        if (name == "race") {
            return cmd_race(race);
        }
        if (name == "sweep") {
            return cmd_sweep(sweep);
        }
        return cmd_gg(gg);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
