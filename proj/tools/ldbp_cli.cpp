// Command-line runner for the LDBP-PMD experiments.
#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "ldbp/experiment.hpp"

using namespace ldbp;

namespace {

struct Common {
    std::string config;
    std::string profile = "desk";
    std::string out;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::size_t workers = 0;
    bool quiet = false;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config, "experiment config (JSON)");
    app->add_option("--profile", c.profile, "built-in profile used when no config is given")->check(CLI::IsMember({"desk", "paper"}));
    app->add_option("--out", c.out, "output directory");
    app->add_option_function<std::uint64_t>(
        "--seed", [&c](const std::uint64_t& s) { c.seed = s, c.seed_set = true; }, "master seed");
    app->add_option("--workers", c.workers, "worker threads");
    app->add_flag("--quiet", c.quiet, "no progress output");
}

ExperimentConfig resolve(const Common& c) {
    ExperimentConfig cfg = c.config.empty() ? profile_config(c.profile) : load_config(c.config);
    if (c.seed_set) cfg.seed = c.seed;
    if (!c.out.empty()) cfg.output_dir = c.out;
    if (c.workers) cfg.workers = c.workers;
    cfg.validate();
    return cfg;
}

Lab make_lab(const Common& c) {
    auto cfg = resolve(c);
    const bool quiet = c.quiet;
    return Lab(cfg, [quiet](const std::string& s) {
        if (!quiet) std::cerr << s << '\n';
    });
}

int exit_for(const ResultSet& rs) {
    for (const auto& c : rs.cells)
        if (c.diverged) return 3;
    return 0;
}

void print_summary(const std::vector<SummaryRow>& rows) {
    std::printf("%-14s %-22s %-11s %3s %4s %10s %8s %10s %7s %5s %5s\n", "kind", "parameterization", "init", "F", "n",
                "final_dB", "std_dB", "peak_dB", "conv", "DOF", "RM");
    for (const auto& r : rows)
        std::printf("%-14s %-22s %-11s %3zu %4zu %10.3f %8.3f %10.3f %7.1f %5zu %5zu\n", r.kind.c_str(),
                    to_string(r.parameterization).c_str(), to_string(r.rotation_init).c_str(), r.dgd_length, r.count,
                    r.mean_final_snr_db, r.std_final_snr_db, r.peak_mean_snr_db, r.mean_convergence_iterations, r.dof, r.rm);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"LDBP-PMD experiment runner"};
    app.require_subcommand(1);

    Common pre_c, train_c, base_c, power_c, flen_c, init_c, swap_c, rep_c;
    std::string param = "free_dgd_su2star", init = "random_su2";
    std::size_t realization = 0;
    std::vector<std::size_t> lengths;
    std::vector<double> powers;

    auto* pre = app.add_subcommand("pretrain", "stage 1: train CD taps on the PMD-free link");
    add_common(pre, pre_c);

    auto* trn = app.add_subcommand("train", "stage 2: train one parameterization on one realization");
    add_common(trn, train_c);
    trn->add_option("--parameterization", param)->check(CLI::IsMember({"free_mimo", "free_dgd_free_matrix", "free_dgd_su2star",
                                                                       "lagrange_free_matrix", "lagrange_su2star", "lumped_mimo"}));
    trn->add_option("--init", init)->check(CLI::IsMember({"identity", "random_su2"}));
    trn->add_option("--realization", realization);

    auto* base = app.add_subcommand("baselines", "LDBP/DBP baselines with and without PMD");
    add_common(base, base_c);
    base->add_option("--powers", powers, "launch powers in dBm (default: sweep list)");

    auto* pw = app.add_subcommand("sweep-power", "evaluate trained cells over the launch-power grid");
    add_common(pw, power_c);

    auto* fl = app.add_subcommand("sweep-filter-length", "train FreeDgdSu2Star at several DGD filter lengths");
    add_common(fl, flen_c);
    fl->add_option("--lengths", lengths, "filter lengths (default: config list)");

    auto* is = app.add_subcommand("init-study", "all parameterizations x rotation inits x realizations");
    add_common(is, init_c);

    auto* sw = app.add_subcommand("pmd-swap", "retrain converged models on a different realization");
    add_common(sw, swap_c);
    sw->add_option("--parameterization", param)->check(CLI::IsMember({"free_mimo", "free_dgd_free_matrix", "free_dgd_su2star",
                                                                      "lagrange_free_matrix", "lagrange_su2star"}));
    sw->add_option("--init", init)->check(CLI::IsMember({"identity", "random_su2"}));

    auto* rep = app.add_subcommand("report", "summarize every stored cell");
    add_common(rep, rep_c);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*pre) {
            auto lab = make_lab(pre_c);
            lab.pretrained();
            std::cout << "pretrained model: " << (lab.out() / "pretrained.json").string() << '\n';
            return 0;
        }
        if (*trn) {
            auto lab = make_lab(train_c);
            if (realization >= lab.config().realizations) throw ConfigError("realization index out of range");
            CellResult k;
            k.realization = realization;
            k.dgd_length = lab.config().model.dgd_taps;
            if (param == "lumped_mimo") {
                k.kind = "lumped_mimo";
                k.parameterization = Parameterization::FreeMimo;
                k.rotation_init = RotationInit::Identity;
            } else {
                k.kind = "ldbp_pmd";
                k.parameterization = parse_parameterization(param);
                k.rotation_init = parse_rotation_init(init);
            }
            auto c = lab.run_cell(k);
            if (c.diverged) {
                std::cerr << c.message << '\n';
                return 3;
            }
            std::printf("%s: initial %.3f dB, final %.3f dB, convergence %zu iterations\n", c.name().c_str(), c.initial_snr_db,
                        c.final_snr_db, c.convergence_iterations);
            return 0;
        }
        if (*base) {
            auto lab = make_lab(base_c);
            std::vector<std::size_t> rs(lab.config().realizations);
            std::iota(rs.begin(), rs.end(), 0);
            auto p = powers.empty() ? lab.config().power_sweep_dbm : powers;
            if (p.empty()) p = {lab.config().link.power_dbm};
            const auto pts = run_baselines(lab, rs, p);
            std::cout << baselines_csv(pts);
            return 0;
        }
        if (*pw) {
            auto lab = make_lab(power_c);
            const auto rs = run_power_sweep(lab, collect_results(lab));
            print_summary(rs.summary());
            return exit_for(rs);
        }
        if (*fl) {
            auto lab = make_lab(flen_c);
            const auto rs = run_filter_length_sweep(lab, lengths.empty() ? lab.config().filter_lengths : lengths);
            print_summary(rs.summary());
            return exit_for(rs);
        }
        if (*is) {
            auto lab = make_lab(init_c);
            const auto rs = run_initialization_study(lab);
            print_summary(rs.summary());
            return exit_for(rs);
        }
        if (*sw) {
            auto lab = make_lab(swap_c);
            const auto pairs = run_pmd_swap(lab, parse_parameterization(param), parse_rotation_init(init));
            int rc = 0;
            for (const auto& p : pairs) {
                if (p.swapped.diverged || p.fresh.diverged) rc = 3;
                std::printf("realization %zu (from %zu): fresh %.3f dB, swapped %.3f dB, diff %+.3f dB, conv %zu\n",
                            p.fresh.realization, p.swapped.source_realization, p.fresh.final_snr_db, p.swapped.final_snr_db,
                            p.swapped.final_snr_db - p.fresh.final_snr_db, p.swapped.convergence_iterations);
            }
            return rc;
        }
        if (*rep) {
            auto lab = make_lab(rep_c);
            const auto rs = collect_results(lab);
            const auto rows = rs.summary();
            write_text(lab.out() / "report_summary.csv", summary_csv(rows));
            write_text(lab.out() / "report_cells.csv", cells_csv(rs));
            print_summary(rows);
            return exit_for(rs);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const DivergenceError& e) {
        std::cerr << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
