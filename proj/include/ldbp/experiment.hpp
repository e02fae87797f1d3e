#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ldbp/training.hpp"

namespace ldbp {

namespace fs = std::filesystem;

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr int kConfigVersion = 1;

struct ModelConfig {
    int steps_per_span = 4;
    StepSchedule schedule = StepSchedule::ModLogarithmic;
    double schedule_adjustment = 1.0;
    double average_cd_taps = 25.0;
    std::size_t dgd_taps = 5;
    double cd_fit_band_fraction = 0.6;
};

struct StageConfig {
    std::size_t iterations = 300;
    std::size_t minibatch = 16;
    double learning_rate = 1e-3;
    OptimizerKind optimizer = OptimizerKind::Adam;
};

/// Everything that determines a run.
struct ExperimentConfig {
    std::string profile = "desk";
    std::uint64_t seed = 1;
    LinkConfig link;
    ModelConfig model;
    StageConfig pretrain;
    StageConfig train;
    std::size_t validation_sequences = 50;
    bool record_timing = true;
    std::map<Parameterization, double> learning_rates;
    std::vector<Parameterization> parameterizations;
    std::vector<RotationInit> rotation_inits;
    std::size_t realizations = 5;
    std::vector<double> power_sweep_dbm;
    std::vector<std::size_t> filter_lengths{3, 5, 7, 9};
    std::size_t swap_iterations = 300;
    std::size_t lumped_mimo_length = 0; // 0: dgd_taps * number of model steps
    int dbp_steps_per_span = 200;
    std::string output_dir = "results";
    std::size_t workers = 1;

    double learning_rate(Parameterization p) const {
        auto it = learning_rates.find(p);
        return it == learning_rates.end() ? train.learning_rate : it->second;
    }

    std::size_t n_model_steps() const { return static_cast<std::size_t>(model.steps_per_span * link.fiber.n_spans + 1); }

    void validate() const {
        try {
            link.fiber.validate();
            link.fiber.n_sections();
            link.tx_shape.validate();
            link.decimation();
            SsfmPlan::uniform(link.fiber, link.forward_steps_per_span, link.ordering).validate(link.fiber);
        } catch (const std::exception& e) {
            throw ConfigError(e.what());
        }
        if (link.n_sym == 0) throw ConfigError("n_symbols must be positive");
        if (model.steps_per_span < 1) throw ConfigError("model steps_per_span must be positive");
        if (model.dgd_taps < 1) throw ConfigError("dgd_taps must be positive");
        if (!(model.average_cd_taps >= 1.0)) throw ConfigError("average_cd_taps must be >= 1");
        if (train.minibatch == 0 || pretrain.minibatch == 0 || validation_sequences == 0)
            throw ConfigError("minibatch and validation sizes must be positive");
        if (realizations == 0) throw ConfigError("realizations must be positive");
        if (dbp_steps_per_span < 1) throw ConfigError("dbp_steps_per_span must be positive");
        for (auto f : filter_lengths)
            if (f == 0) throw ConfigError("filter lengths must be positive");
    }
};

// ---------------------------------------------------------------------------
// profiles

inline std::map<Parameterization, double> table_learning_rates() {
    return {{Parameterization::FreeMimo, 1e-3},
            {Parameterization::FreeDgdFreeMatrix, 1e-3},
            {Parameterization::FreeDgdSu2Star, 5e-4},
            {Parameterization::LagrangeFreeMatrix, 5e-4},
            {Parameterization::LagrangeSu2Star, 2e-3}};
}

inline ExperimentConfig paper_profile() {
    ExperimentConfig c;
    c.profile = "paper";
    c.link.fiber = FiberParams{};
    c.link.forward_steps_per_span = 1000;
    c.link.n_sym = 512;
    c.link.power_dbm = 8.0;
    c.pretrain = {1500, 50, 1e-3, OptimizerKind::Adam};
    c.train = {1500, 50, 5e-4, OptimizerKind::Adam};
    c.learning_rates = table_learning_rates();
    c.parameterizations.assign(kAllParameterizations.begin(), kAllParameterizations.end());
    c.rotation_inits = {RotationInit::Identity, RotationInit::RandomSu2};
    c.realizations = 40;
    c.power_sweep_dbm = {2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
    c.swap_iterations = 1500;
    c.dbp_steps_per_span = 1000;
    return c;
}

inline ExperimentConfig desk_profile() {
    ExperimentConfig c = paper_profile();
    c.profile = "desk";
    c.link.fiber.n_spans = 2;
    c.link.fiber.correlation_length_km = 0.5;
    c.link.forward_steps_per_span = 200;
    c.pretrain = {300, 16, 1e-2, OptimizerKind::Adam};
    c.train = {300, 16, 1e-2, OptimizerKind::Adam};
    c.learning_rates = table_learning_rates();
    for (auto& [p, lr] : c.learning_rates) lr *= 20.0;
    c.realizations = 5;
    c.power_sweep_dbm = {2, 4, 6, 8, 10, 12};
    c.swap_iterations = 300;
    c.dbp_steps_per_span = 200;
    return c;
}

inline ExperimentConfig profile_config(const std::string& name) {
    if (name == "desk") return desk_profile();
    if (name == "paper") return paper_profile();
    throw ConfigError("unknown profile: " + name);
}

// ---------------------------------------------------------------------------
// JSON

inline std::string to_string(StepSchedule s) { return s == StepSchedule::Uniform ? "uniform" : "mod_logarithmic"; }
inline std::string to_string(StepOrdering o) { return o == StepOrdering::Symmetric ? "symmetric" : "asymmetric"; }

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    using nlohmann::json;
    const auto& f = c.link.fiber;
    json lr = json::object();
    for (const auto& [p, v] : c.learning_rates) lr[to_string(p)] = v;
    json params = json::array(), inits = json::array();
    for (auto p : c.parameterizations) params.push_back(to_string(p));
    for (auto r : c.rotation_inits) inits.push_back(to_string(r));
    auto stage = [](const StageConfig& s) {
        return json{{"iterations", s.iterations}, {"minibatch", s.minibatch}, {"learning_rate", s.learning_rate},
                    {"optimizer", to_string(s.optimizer)}};
    };
    return json{
        {"format", "ldbp-experiment"},
        {"version", kConfigVersion},
        {"profile", c.profile},
        {"seed", c.seed},
        {"fiber",
         {{"alpha_db_per_km", f.alpha_db_per_km},
          {"beta2_ps2_per_km", f.beta2_ps2_per_km},
          {"gamma_per_w_km", f.gamma_per_w_km},
          {"pmd_ps_per_sqrt_km", f.tau_pmd_ps_per_sqrt_km},
          {"correlation_length_km", f.correlation_length_km},
          {"span_length_km", f.span_length_km},
          {"n_spans", f.n_spans},
          {"noise_figure_db", f.noise_figure_db},
          {"wavelength_nm", f.center_wavelength_nm}}},
        {"forward",
         {{"steps_per_span", c.link.forward_steps_per_span},
          {"ordering", to_string(c.link.ordering)},
          {"effective_length_kerr", c.link.effective_length_kerr},
          {"noise", c.link.noise == NoiseMode::On}}},
        {"transceiver",
         {{"symbol_rate_hz", c.link.symbol_rate},
          {"rolloff", c.link.tx_shape.rolloff},
          {"rrc_span_symbols", c.link.tx_shape.span_symbols},
          {"tx_samples_per_symbol", c.link.tx_shape.samples_per_symbol},
          {"rx_samples_per_symbol", c.link.rx_samples_per_symbol},
          {"n_symbols", c.link.n_sym},
          {"launch_power_dbm", c.link.power_dbm}}},
        {"model",
         {{"steps_per_span", c.model.steps_per_span},
          {"schedule", to_string(c.model.schedule)},
          {"schedule_adjustment", c.model.schedule_adjustment},
          {"average_cd_taps", c.model.average_cd_taps},
          {"dgd_taps", c.model.dgd_taps},
          {"cd_fit_band_fraction", c.model.cd_fit_band_fraction}}},
        {"pretrain", stage(c.pretrain)},
        {"train", stage(c.train)},
        {"learning_rates", lr},
        {"validation_sequences", c.validation_sequences},
        {"record_timing", c.record_timing},
        {"parameterizations", params},
        {"rotation_inits", inits},
        {"realizations", c.realizations},
        {"power_sweep_dbm", c.power_sweep_dbm},
        {"filter_lengths", c.filter_lengths},
        {"swap_iterations", c.swap_iterations},
        {"lumped_mimo_length", c.lumped_mimo_length},
        {"dbp_steps_per_span", c.dbp_steps_per_span},
        {"output_dir", c.output_dir},
        {"workers", c.workers},
    };
}

namespace detail {
template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline void check_keys(const nlohmann::json& j, const std::string& section, std::initializer_list<const char*> keys) {
    if (!j.is_object()) throw ConfigError(section + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find_if(keys.begin(), keys.end(), [&](const char* k) { return it.key() == k; }) == keys.end())
            throw ConfigError("unknown config key: " + section + "." + it.key());
}
} // namespace detail

/// Parse a config; missing keys keep the values of the named profile.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    using detail::check_keys;
    using detail::read_opt;
    try {
        if (j.value("format", "ldbp-experiment") != "ldbp-experiment") throw ConfigError("not an experiment config");
        if (j.value("version", kConfigVersion) != kConfigVersion) throw ConfigError("unsupported config version");
        ExperimentConfig c = profile_config(j.value("profile", std::string("desk")));
        static const std::set<std::string> known = {
            "format", "version", "profile", "seed", "fiber", "forward", "transceiver", "model", "pretrain", "train",
            "learning_rates", "validation_sequences", "record_timing", "parameterizations", "rotation_inits", "realizations",
            "power_sweep_dbm", "filter_lengths", "swap_iterations", "lumped_mimo_length", "dbp_steps_per_span",
            "output_dir", "workers"};
        for (auto it = j.begin(); it != j.end(); ++it)
            if (!known.count(it.key())) throw ConfigError("unknown config key: " + it.key());
        read_opt(j, "seed", c.seed);
        if (j.contains("fiber")) {
            const auto& f = j.at("fiber");
            check_keys(f, "fiber", {"alpha_db_per_km", "beta2_ps2_per_km", "gamma_per_w_km", "pmd_ps_per_sqrt_km",
                                    "correlation_length_km", "span_length_km", "n_spans", "noise_figure_db", "wavelength_nm"});
            auto& p = c.link.fiber;
            read_opt(f, "alpha_db_per_km", p.alpha_db_per_km);
            read_opt(f, "beta2_ps2_per_km", p.beta2_ps2_per_km);
            read_opt(f, "gamma_per_w_km", p.gamma_per_w_km);
            read_opt(f, "pmd_ps_per_sqrt_km", p.tau_pmd_ps_per_sqrt_km);
            read_opt(f, "correlation_length_km", p.correlation_length_km);
            read_opt(f, "span_length_km", p.span_length_km);
            read_opt(f, "n_spans", p.n_spans);
            if (f.contains("noise_figure_db")) {
                const auto& v = f.at("noise_figure_db");
                p.noise_figure_db = v.is_null() ? -std::numeric_limits<double>::infinity() : v.get<double>();
            }
            read_opt(f, "wavelength_nm", p.center_wavelength_nm);
        }
        if (j.contains("forward")) {
            const auto& f = j.at("forward");
            check_keys(f, "forward", {"steps_per_span", "ordering", "effective_length_kerr", "noise"});
            read_opt(f, "steps_per_span", c.link.forward_steps_per_span);
            if (f.contains("ordering")) {
                const auto o = f.at("ordering").get<std::string>();
                if (o == "asymmetric") c.link.ordering = StepOrdering::AsymmetricLinearFirst;
                else if (o == "symmetric") c.link.ordering = StepOrdering::Symmetric;
                else throw ConfigError("unknown ordering: " + o);
            }
            read_opt(f, "effective_length_kerr", c.link.effective_length_kerr);
            if (f.contains("noise")) c.link.noise = f.at("noise").get<bool>() ? NoiseMode::On : NoiseMode::Off;
        }
        if (j.contains("transceiver")) {
            const auto& t = j.at("transceiver");
            check_keys(t, "transceiver", {"symbol_rate_hz", "rolloff", "rrc_span_symbols", "tx_samples_per_symbol",
                                          "rx_samples_per_symbol", "n_symbols", "launch_power_dbm"});
            read_opt(t, "symbol_rate_hz", c.link.symbol_rate);
            read_opt(t, "rolloff", c.link.tx_shape.rolloff);
            read_opt(t, "rrc_span_symbols", c.link.tx_shape.span_symbols);
            read_opt(t, "tx_samples_per_symbol", c.link.tx_shape.samples_per_symbol);
            read_opt(t, "rx_samples_per_symbol", c.link.rx_samples_per_symbol);
            read_opt(t, "n_symbols", c.link.n_sym);
            read_opt(t, "launch_power_dbm", c.link.power_dbm);
        }
        if (j.contains("model")) {
            const auto& m = j.at("model");
            check_keys(m, "model", {"steps_per_span", "schedule", "schedule_adjustment", "average_cd_taps", "dgd_taps",
                                    "cd_fit_band_fraction"});
            read_opt(m, "steps_per_span", c.model.steps_per_span);
            if (m.contains("schedule")) {
                const auto s = m.at("schedule").get<std::string>();
                if (s == "uniform") c.model.schedule = StepSchedule::Uniform;
                else if (s == "mod_logarithmic") c.model.schedule = StepSchedule::ModLogarithmic;
                else throw ConfigError("unknown schedule: " + s);
            }
            read_opt(m, "schedule_adjustment", c.model.schedule_adjustment);
            read_opt(m, "average_cd_taps", c.model.average_cd_taps);
            read_opt(m, "dgd_taps", c.model.dgd_taps);
            read_opt(m, "cd_fit_band_fraction", c.model.cd_fit_band_fraction);
        }
        auto stage = [](const nlohmann::json& s, StageConfig& out) {
            check_keys(s, "stage", {"iterations", "minibatch", "learning_rate", "optimizer"});
            read_opt(s, "iterations", out.iterations);
            read_opt(s, "minibatch", out.minibatch);
            read_opt(s, "learning_rate", out.learning_rate);
            if (s.contains("optimizer")) out.optimizer = parse_optimizer(s.at("optimizer").get<std::string>());
        };
        if (j.contains("pretrain")) stage(j.at("pretrain"), c.pretrain);
        if (j.contains("train")) stage(j.at("train"), c.train);
        if (j.contains("learning_rates")) {
            c.learning_rates.clear();
            for (auto it = j.at("learning_rates").begin(); it != j.at("learning_rates").end(); ++it)
                c.learning_rates[parse_parameterization(it.key())] = it.value().get<double>();
        }
        read_opt(j, "validation_sequences", c.validation_sequences);
        read_opt(j, "record_timing", c.record_timing);
        if (j.contains("parameterizations")) {
            c.parameterizations.clear();
            for (const auto& p : j.at("parameterizations")) c.parameterizations.push_back(parse_parameterization(p.get<std::string>()));
        }
        if (j.contains("rotation_inits")) {
            c.rotation_inits.clear();
            for (const auto& r : j.at("rotation_inits")) c.rotation_inits.push_back(parse_rotation_init(r.get<std::string>()));
        }
        read_opt(j, "realizations", c.realizations);
        read_opt(j, "power_sweep_dbm", c.power_sweep_dbm);
        read_opt(j, "filter_lengths", c.filter_lengths);
        read_opt(j, "swap_iterations", c.swap_iterations);
        read_opt(j, "lumped_mimo_length", c.lumped_mimo_length);
        read_opt(j, "dbp_steps_per_span", c.dbp_steps_per_span);
        read_opt(j, "output_dir", c.output_dir);
        read_opt(j, "workers", c.workers);
        c.validate();
        return c;
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    return config_from_json(j);
}

inline void save_config(const ExperimentConfig& c, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << config_to_json(c).dump(2) << '\n';
}

/// FNV-1a of the canonical config text; tags result files so stale cells are not reused.
inline std::string config_digest(const ExperimentConfig& c) {
    auto j = config_to_json(c);
    // fields that change which cells are run or evaluated, not what a cell computes
    for (const char* k : {"output_dir", "workers", "realizations", "parameterizations", "rotation_inits", "power_sweep_dbm",
                          "filter_lengths", "dbp_steps_per_span"})
        j.erase(k);
    const auto s = j.dump();
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---------------------------------------------------------------------------
// results

struct CellResult {
    std::string kind; // "ldbp_pmd", "swap", "lumped_mimo", "filter_length"
    Parameterization parameterization = Parameterization::FreeDgdSu2Star;
    RotationInit rotation_init = RotationInit::RandomSu2;
    std::size_t realization = 0;
    std::size_t source_realization = 0; // swap only
    std::size_t dgd_length = 5;
    double initial_snr_db = 0.0;
    double final_snr_db = 0.0;
    std::size_t convergence_iterations = 0;
    std::size_t dof = 0;
    std::size_t rm = 0;
    double max_reciprocal_error = 0.0;
    bool diverged = false;
    std::string message;
    std::vector<double> curve_db;
    std::map<double, double> power_snr_db;

    std::string name() const {
        std::ostringstream os;
        os << kind << '_' << to_string(parameterization) << '_' << to_string(rotation_init) << "_F" << dgd_length << "_r"
           << realization;
        if (kind == "swap") os << "_from" << source_realization;
        return os.str();
    }
};

inline nlohmann::json cell_to_json(const CellResult& c) {
    nlohmann::json p = nlohmann::json::object();
    for (const auto& [k, v] : c.power_snr_db) p[format_double(k)] = v;
    return {{"kind", c.kind},
            {"parameterization", to_string(c.parameterization)},
            {"rotation_init", to_string(c.rotation_init)},
            {"realization", c.realization},
            {"source_realization", c.source_realization},
            {"dgd_length", c.dgd_length},
            {"initial_snr_db", c.initial_snr_db},
            {"final_snr_db", c.final_snr_db},
            {"convergence_iterations", c.convergence_iterations},
            {"dof", c.dof},
            {"rm", c.rm},
            {"max_reciprocal_error", c.max_reciprocal_error},
            {"diverged", c.diverged},
            {"message", c.message},
            {"curve_db", c.curve_db},
            {"power_snr_db", p}};
}

inline CellResult cell_from_json(const nlohmann::json& j) {
    CellResult c;
    c.kind = j.at("kind").get<std::string>();
    c.parameterization = parse_parameterization(j.at("parameterization").get<std::string>());
    c.rotation_init = parse_rotation_init(j.at("rotation_init").get<std::string>());
    c.realization = j.at("realization").get<std::size_t>();
    c.source_realization = j.at("source_realization").get<std::size_t>();
    c.dgd_length = j.at("dgd_length").get<std::size_t>();
    c.initial_snr_db = j.at("initial_snr_db").get<double>();
    c.final_snr_db = j.at("final_snr_db").get<double>();
    c.convergence_iterations = j.at("convergence_iterations").get<std::size_t>();
    c.dof = j.at("dof").get<std::size_t>();
    c.rm = j.at("rm").get<std::size_t>();
    c.max_reciprocal_error = j.at("max_reciprocal_error").get<double>();
    c.diverged = j.at("diverged").get<bool>();
    c.message = j.at("message").get<std::string>();
    c.curve_db = j.at("curve_db").get<std::vector<double>>();
    for (auto it = j.at("power_snr_db").begin(); it != j.at("power_snr_db").end(); ++it)
        c.power_snr_db[std::stod(it.key())] = it.value().get<double>();
    return c;
}

/// One row of the summary table: statistics over realizations of one setting.
struct SummaryRow {
    std::string kind;
    Parameterization parameterization;
    RotationInit rotation_init;
    std::size_t dgd_length = 5;
    std::size_t count = 0;
    double mean_final_snr_db = 0.0;
    double std_final_snr_db = 0.0;
    double peak_mean_snr_db = 0.0; // over the power sweep (the training power when no sweep)
    double std_at_peak_db = 0.0;
    double peak_power_dbm = 0.0;
    double mean_convergence_iterations = 0.0;
    std::size_t dof = 0;
    std::size_t rm = 0;
};

struct ResultSet {
    std::vector<CellResult> cells;

    std::vector<SummaryRow> summary() const;
};

inline std::pair<double, double> mean_std(std::span<const double> v) {
    if (v.empty()) return {0.0, 0.0};
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return {m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0};
}

inline std::vector<SummaryRow> ResultSet::summary() const {
    std::map<std::string, std::vector<const CellResult*>> groups;
    std::vector<std::string> order;
    for (const auto& c : cells) {
        if (c.diverged) continue;
        const std::string key = c.kind + '|' + to_string(c.parameterization) + '|' + to_string(c.rotation_init) + '|' +
                                std::to_string(c.dgd_length);
        if (!groups.count(key)) order.push_back(key);
        groups[key].push_back(&c);
    }
    std::vector<SummaryRow> rows;
    for (const auto& key : order) {
        const auto& g = groups[key];
        SummaryRow r;
        r.kind = g[0]->kind;
        r.parameterization = g[0]->parameterization;
        r.rotation_init = g[0]->rotation_init;
        r.dgd_length = g[0]->dgd_length;
        r.count = g.size();
        r.dof = g[0]->dof;
        r.rm = g[0]->rm;
        std::vector<double> fin, conv;
        for (auto* c : g) {
            fin.push_back(c->final_snr_db);
            conv.push_back(static_cast<double>(c->convergence_iterations));
        }
        std::tie(r.mean_final_snr_db, r.std_final_snr_db) = mean_std(fin);
        r.mean_convergence_iterations = mean_std(conv).first;
        r.peak_mean_snr_db = r.mean_final_snr_db;
        r.std_at_peak_db = r.std_final_snr_db;
        r.peak_power_dbm = std::numeric_limits<double>::quiet_NaN();
        // peak over powers present in every cell of the group
        std::set<double> powers;
        for (const auto& [p, v] : g[0]->power_snr_db) powers.insert(p);
        bool first = true;
        for (double p : powers) {
            std::vector<double> v;
            for (auto* c : g) {
                auto it = c->power_snr_db.find(p);
                if (it != c->power_snr_db.end()) v.push_back(it->second);
            }
            if (v.size() != g.size()) continue;
            const auto [m, s] = mean_std(v);
            if (first || m > r.peak_mean_snr_db) {
                r.peak_mean_snr_db = m;
                r.std_at_peak_db = s;
                r.peak_power_dbm = p;
                first = false;
            }
        }
        rows.push_back(r);
    }
    return rows;
}

inline std::string summary_csv(const std::vector<SummaryRow>& rows) {
    std::ostringstream os;
    os << "kind,parameterization,rotation_init,dgd_length,count,mean_final_snr_db,std_final_snr_db,peak_mean_snr_db,"
          "std_at_peak_db,peak_power_dbm,mean_convergence_iterations,dof,rm\n";
    for (const auto& r : rows)
        os << r.kind << ',' << to_string(r.parameterization) << ',' << to_string(r.rotation_init) << ',' << r.dgd_length << ','
           << r.count << ',' << format_double(r.mean_final_snr_db) << ',' << format_double(r.std_final_snr_db) << ','
           << format_double(r.peak_mean_snr_db) << ',' << format_double(r.std_at_peak_db) << ','
           << (std::isnan(r.peak_power_dbm) ? std::string() : format_double(r.peak_power_dbm)) << ','
           << format_double(r.mean_convergence_iterations) << ',' << r.dof << ',' << r.rm << '\n';
    return os.str();
}

inline std::string cells_csv(const ResultSet& rs) {
    std::ostringstream os;
    os << "kind,parameterization,rotation_init,dgd_length,realization,source_realization,initial_snr_db,final_snr_db,"
          "convergence_iterations,dof,rm,max_reciprocal_error,diverged\n";
    for (const auto& c : rs.cells)
        os << c.kind << ',' << to_string(c.parameterization) << ',' << to_string(c.rotation_init) << ',' << c.dgd_length << ','
           << c.realization << ',' << c.source_realization << ',' << format_double(c.initial_snr_db) << ','
           << format_double(c.final_snr_db) << ',' << c.convergence_iterations << ',' << c.dof << ',' << c.rm << ','
           << format_double(c.max_reciprocal_error) << ',' << (c.diverged ? 1 : 0) << '\n';
    return os.str();
}

/// Mean and standard deviation across cells of each learning curve position.
inline std::string curves_csv(const std::vector<const CellResult*>& cells) {
    std::ostringstream os;
    os << "iteration,mean_snr_db,std_snr_db,count\n";
    std::size_t len = 0;
    for (auto* c : cells) len = std::max(len, c->curve_db.size());
    for (std::size_t i = 0; i < len; ++i) {
        std::vector<double> v;
        for (auto* c : cells)
            if (i < c->curve_db.size()) v.push_back(c->curve_db[i]);
        const auto [m, s] = mean_std(v);
        os << i << ',' << format_double(m) << ',' << format_double(s) << ',' << v.size() << '\n';
    }
    return os.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw std::runtime_error("cannot write " + tmp);
        f << text;
        if (!f) throw std::runtime_error("write failed: " + tmp);
    }
    fs::rename(tmp, path);
}

inline std::string read_text(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

// ---------------------------------------------------------------------------
// runner

/// Baseline SNRs of one realization at one power.
struct BaselinePoint {
    std::size_t realization = 0;
    double power_dbm = 0.0;
    double ldbp_pmd_free_db = 0.0;     // (a)
    double ldbp_uncompensated_db = 0.0; // (b)
    double ldbp_ideal_inverse_db = 0.0; // (c)
    double dbp_pmd_free_db = 0.0;      // (d) DBP without PMD
    double dbp_ideal_inverse_db = 0.0; // (d) DBP + ideal inverse on the PMD link
};

/// Shared state of an experiment: realizations, datasets, the pretrained
/// model and the output directory. Cells whose result file exists with a
/// matching config digest are loaded instead of recomputed.
class Lab {
public:
    using Log = std::function<void(const std::string&)>;

    explicit Lab(ExperimentConfig cfg, Log log = {}) : cfg_(std::move(cfg)), log_(std::move(log)), digest_(config_digest(cfg_)) {
        cfg_.validate();
        out_ = fs::path(cfg_.output_dir);
        fs::create_directories(out_);
        save_config(cfg_, (out_ / "config.json").string());
    }

    const ExperimentConfig& config() const { return cfg_; }
    const fs::path& out() const { return out_; }
    const std::string& digest() const { return digest_; }

    void log(const std::string& s) const {
        if (log_) log_(s);
    }

    std::uint64_t realization_seed(std::size_t r) const { return derive_seed(cfg_.seed, {1, r}); }
    std::uint64_t data_seed(std::size_t r) const { return derive_seed(cfg_.seed, {2, r}); }
    std::uint64_t pretrain_seed() const { return derive_seed(cfg_.seed, {3}); }

    /// Realization r, sampled from its own seed and stored as JSON.
    const PmdRealization& realization(std::size_t r) {
        std::lock_guard lock(mutex_);
        auto it = pmd_.find(r);
        if (it != pmd_.end()) return it->second;
        const auto path = out_ / "realizations" / ("realization_" + std::to_string(r) + ".json");
        PmdRealization p;
        if (fs::exists(path)) {
            p = PmdRealization::load(path.string());
        } else {
            Rng rng(realization_seed(r));
            p = sample_pmd_realization(cfg_.link.fiber, rng);
            fs::create_directories(path.parent_path());
            p.save(path.string());
        }
        return pmd_.emplace(r, std::move(p)).first->second;
    }

    LinkConfig link_at(double power_dbm) const {
        LinkConfig l = cfg_.link;
        l.power_dbm = power_dbm;
        return l;
    }

    /// Training data on realization r (or the PMD-free link) at the training power.
    Dataset& data(std::size_t r, bool with_pmd = true) {
        const auto& pmd = with_pmd ? realization(r) : empty_;
        std::lock_guard lock(mutex_);
        auto key = std::make_pair(r, with_pmd);
        auto it = data_.find(key);
        if (it == data_.end())
            it = data_.emplace(key, std::make_unique<Dataset>(cfg_.link, pmd, data_seed(r))).first;
        return *it->second;
    }

    void release_data(std::size_t r) {
        std::lock_guard lock(mutex_);
        data_.erase({r, true});
        data_.erase({r, false});
    }

    /// Evaluation batch at a power: same symbol/noise streams as the training
    /// validation batch, so the training power reproduces it exactly.
    std::vector<Example> evaluation_batch(std::size_t r, double power_dbm, bool with_pmd) {
        if (power_dbm == cfg_.link.power_dbm) {
            std::vector<Example> out;
            for (auto* e : data(r, with_pmd).validation(cfg_.validation_sequences, cfg_.workers)) out.push_back(*e);
            return out;
        }
        Dataset d(link_at(power_dbm), with_pmd ? realization(r) : empty_, data_seed(r));
        std::vector<Example> out;
        for (auto* e : d.validation(cfg_.validation_sequences, cfg_.workers)) out.push_back(*e);
        return out;
    }

    StepPlan step_plan(std::size_t dgd_length) const {
        return make_step_plan(cfg_.link.fiber, cfg_.model.steps_per_span, cfg_.model.schedule, cfg_.link.rx_rate(),
                              cfg_.model.average_cd_taps, dgd_length, cfg_.model.schedule_adjustment);
    }

    TrainConfig train_config(const StageConfig& s, double lr, std::size_t iterations) const {
        TrainConfig t;
        t.minibatch_size = s.minibatch;
        t.n_iterations = iterations;
        t.validation_size = cfg_.validation_sequences;
        t.learning_rate = lr;
        t.optimizer = s.optimizer;
        t.record_timing = cfg_.record_timing;
        t.workers = cfg_.workers;
        return t;
    }

    /// Stage-1 model trained without PMD; cached as pretrained.json.
    const LdbpModel& pretrained() {
        std::lock_guard lock(pre_mutex_);
        if (pretrained_) return *pretrained_;
        const auto path = out_ / "pretrained.json";
        const auto tag = out_ / "pretrained.digest";
        if (fs::exists(path) && fs::exists(tag) && read_text(tag) == digest_) {
            pretrained_ = load_model(path.string());
            return *pretrained_;
        }
        log("pretraining stage 1 (" + std::to_string(cfg_.pretrain.iterations) + " iterations)");
        Rng rng(pretrain_seed());
        auto init = init_model(step_plan(cfg_.model.dgd_taps), cfg_.link.fiber, Parameterization::FreeDgdSu2Star,
                               RotationInit::Identity, rng, cfg_.model.cd_fit_band_fraction);
        Dataset d(cfg_.link, PmdRealization{}, pretrain_seed());
        auto res = train_ldbp(std::move(init), train_config(cfg_.pretrain, cfg_.pretrain.learning_rate, cfg_.pretrain.iterations), d);
        write_text(out_ / "pretrain_record.csv", record_csv(res.record));
        save_model(res.model, path.string());
        write_text(tag, digest_);
        log("pretrained: validation SNR " + format_double(res.record.final_snr_db()) + " dB");
        pretrained_ = std::move(res.model);
        return *pretrained_;
    }

    fs::path cell_dir(const CellResult& c) const { return out_ / "cells" / c.name(); }

    std::optional<CellResult> load_cell(const CellResult& key) const {
        const auto dir = cell_dir(key);
        if (!fs::exists(dir / "result.json") || !fs::exists(dir / "digest") || read_text(dir / "digest") != digest_)
            return std::nullopt;
        return cell_from_json(nlohmann::json::parse(read_text(dir / "result.json")));
    }

    std::optional<LdbpModel> load_cell_model(const CellResult& key) const {
        const auto p = cell_dir(key) / "model.json";
        if (!fs::exists(p) || !load_cell(key)) return std::nullopt;
        return load_model(p.string());
    }

    void store_cell(const CellResult& c, const TrainRecord* rec, const LdbpModel* model) const {
        const auto dir = cell_dir(c);
        fs::create_directories(dir);
        if (rec) write_text(dir / "record.csv", record_csv(*rec));
        if (model) save_model(*model, (dir / "model.json").string());
        write_text(dir / "result.json", cell_to_json(c).dump(1) + "\n");
        write_text(dir / "digest", digest_);
    }

    /// Train one stage-2 cell (or load it). `start` overrides the pretrained
    /// starting point (used for swaps).
    CellResult run_cell(CellResult key, const LdbpModel* start = nullptr, std::size_t iterations = 0) {
        if (auto done = load_cell(key)) return *done;
        const auto& pre = pretrained();
        auto& d = data(key.realization, true);
        const std::size_t iters = iterations ? iterations : cfg_.train.iterations;
        Rng rng(derive_seed(cfg_.seed, {4, static_cast<std::uint64_t>(key.parameterization),
                                        static_cast<std::uint64_t>(key.rotation_init), key.realization, key.dgd_length,
                                        key.kind == "swap" ? 1ULL : 0ULL}));
        const auto tc = train_config(cfg_.train, cfg_.learning_rate(key.parameterization), iters);
        log("cell " + key.name());
        TrainResult res;
        try {
            if (key.kind == "lumped_mimo") {
                const std::size_t len = cfg_.lumped_mimo_length ? cfg_.lumped_mimo_length : cfg_.model.dgd_taps * pre.steps.size();
                key.dgd_length = len;
                res = train_lumped_mimo(pre, len, train_config(cfg_.train, cfg_.learning_rate(Parameterization::FreeMimo), iters), d);
            } else if (start) {
                res.model = *start;
                res.record = train(res.model, tc, d);
            } else if (key.dgd_length == pre.dgd_length) {
                res = train_ldbp_pmd(pre, key.parameterization, key.rotation_init, rng, tc, d);
            } else {
                res.model = reparameterize(pre, key.parameterization, key.rotation_init, rng, key.dgd_length);
                res.record = train(res.model, tc, d);
            }
        } catch (const DivergenceError& e) {
            key.diverged = true;
            key.message = e.what();
            store_cell(key, nullptr, nullptr);
            log("diverged: " + key.message);
            return key;
        }
        if (key.kind != "lumped_mimo") {
            const auto cx = complexity(res.model);
            key.dof = cx.dof_per_step * res.model.steps.size();
            key.rm = cx.rm_per_step * res.model.steps.size();
        } else {
            key.dof = 8 * key.dgd_length;
            key.rm = 16 * key.dgd_length;
        }
        key.initial_snr_db = res.record.initial_val_snr_db;
        key.final_snr_db = res.record.final_snr_db();
        key.curve_db = res.record.snr_db_curve();
        key.convergence_iterations = convergence_iterations(res.record);
        key.max_reciprocal_error = res.record.max_reciprocal_error();
        key.power_snr_db[cfg_.link.power_dbm] = key.final_snr_db;
        store_cell(key, &res.record, &res.model);
        log("  final " + format_double(key.final_snr_db) + " dB, conv " + std::to_string(key.convergence_iterations));
        return key;
    }

    /// Evaluate a cell's model over the power sweep and store the values.
    CellResult sweep_cell(CellResult c) {
        if (c.diverged) return c;
        auto model = load_cell_model(c);
        if (!model) return c;
        const auto rx = cfg_.link.rx_shape();
        bool changed = false;
        for (double p : cfg_.power_sweep_dbm) {
            if (c.power_snr_db.count(p)) continue;
            const auto batch = evaluation_batch(c.realization, p, true);
            std::vector<const Example*> ptrs;
            for (const auto& e : batch) ptrs.push_back(&e);
            c.power_snr_db[p] = linear_to_db(evaluate(*model, ptrs, rx, cfg_.workers).snr);
            changed = true;
        }
        if (changed) store_cell(c, nullptr, nullptr);
        return c;
    }

    BaselinePoint baseline(std::size_t r, double power_dbm) {
        const auto& pre = pretrained();
        const auto rx = cfg_.link.rx_shape();
        BaselinePoint b;
        b.realization = r;
        b.power_dbm = power_dbm;
        const auto free = evaluation_batch(r, power_dbm, false);
        const auto pmd = evaluation_batch(r, power_dbm, true);
        const auto& real = realization(r);
        FiberParams fp = cfg_.link.fiber;
        auto pooled = [&](const std::vector<Example>& batch, auto&& fn) {
            std::vector<SymbolSequence> hat, ref;
            for (const auto& e : batch) {
                hat.push_back(genie_phase_correct(matched_filter_downsample(fn(e.v), rx), e.s));
                ref.push_back(e.s);
            }
            return pooled_effective_snr(hat, ref).db();
        };
        b.ldbp_pmd_free_db = pooled(free, [&](const DualPolSignal& v) { return forward(pre, v); });
        b.ldbp_uncompensated_db = pooled(pmd, [&](const DualPolSignal& v) { return forward(pre, v); });
        b.ldbp_ideal_inverse_db = pooled(pmd, [&](const DualPolSignal& v) { return ideal_pmd_inverse(forward(pre, v), real); });
        b.dbp_pmd_free_db = pooled(free, [&](const DualPolSignal& v) { return digital_backpropagation(v, fp, cfg_.dbp_steps_per_span); });
        b.dbp_ideal_inverse_db = pooled(pmd, [&](const DualPolSignal& v) {
            return ideal_pmd_inverse(digital_backpropagation(v, fp, cfg_.dbp_steps_per_span), real);
        });
        return b;
    }

    /// Run jobs on the configured number of workers, in index order when single-threaded.
    template <class Fn>
    void parallel_for(std::size_t n, Fn&& fn) {
        const std::size_t w = std::max<std::size_t>(1, std::min(cfg_.workers, n));
        if (w == 1) {
            for (std::size_t i = 0; i < n; ++i) fn(i);
            return;
        }
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        std::exception_ptr err;
        std::mutex err_mutex;
        for (std::size_t t = 0; t < w; ++t)
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        std::lock_guard lock(err_mutex);
                        if (!err) err = std::current_exception();
                    }
                }
            });
        for (auto& th : pool) th.join();
        if (err) std::rethrow_exception(err);
    }

private:
    ExperimentConfig cfg_;
    Log log_;
    std::string digest_;
    fs::path out_;
    PmdRealization empty_;
    std::mutex mutex_, pre_mutex_;
    std::map<std::size_t, PmdRealization> pmd_;
    std::map<std::pair<std::size_t, bool>, std::unique_ptr<Dataset>> data_;
    std::optional<LdbpModel> pretrained_;
};

// ---------------------------------------------------------------------------
// studies

inline void write_result_files(const Lab& lab, const ResultSet& rs, const std::string& prefix) {
    write_text(lab.out() / (prefix + "_cells.csv"), cells_csv(rs));
    write_text(lab.out() / (prefix + "_summary.csv"), summary_csv(rs.summary()));
    std::map<std::string, std::vector<const CellResult*>> groups;
    for (const auto& c : rs.cells)
        if (!c.diverged)
            groups[c.kind + '_' + to_string(c.parameterization) + '_' + to_string(c.rotation_init) + "_F" + std::to_string(c.dgd_length)]
                .push_back(&c);
    for (const auto& [k, cells] : groups) write_text(lab.out() / "curves" / (prefix + '_' + k + ".csv"), curves_csv(cells));
}

/// Every (parameterization x rotation init) cell over every realization.
/// Cells are ordered realization-major so each realization's data can be
/// released once its cells are done.
inline ResultSet run_initialization_study(Lab& lab) {
    const auto& cfg = lab.config();
    ResultSet rs;
    for (std::size_t r = 0; r < cfg.realizations; ++r) {
        std::vector<CellResult> keys;
        for (auto p : cfg.parameterizations)
            for (auto init : cfg.rotation_inits) {
                CellResult k;
                k.kind = "ldbp_pmd";
                k.parameterization = p;
                k.rotation_init = init;
                k.realization = r;
                k.dgd_length = cfg.model.dgd_taps;
                keys.push_back(k);
            }
        std::vector<CellResult> done(keys.size());
        lab.parallel_for(keys.size(), [&](std::size_t i) { done[i] = lab.run_cell(keys[i]); });
        for (auto& c : done) rs.cells.push_back(std::move(c));
        lab.release_data(r);
    }
    write_result_files(lab, rs, "init_study");
    return rs;
}

/// Evaluate trained cells across the power grid (models are not retrained).
inline ResultSet run_power_sweep(Lab& lab, ResultSet rs) {
    for (auto& c : rs.cells) c = lab.sweep_cell(c);
    std::ostringstream os;
    os << "kind,parameterization,rotation_init,dgd_length,realization,power_dbm,snr_db\n";
    const auto& grid = lab.config().power_sweep_dbm;
    for (const auto& c : rs.cells)
        for (const auto& [p, v] : c.power_snr_db)
            if (std::find(grid.begin(), grid.end(), p) != grid.end())
                os << c.kind << ',' << to_string(c.parameterization) << ',' << to_string(c.rotation_init) << ',' << c.dgd_length << ','
                   << c.realization << ',' << format_double(p) << ',' << format_double(v) << '\n';
    write_text(lab.out() / "power_sweep.csv", os.str());
    write_text(lab.out() / "power_sweep_summary.csv", summary_csv(rs.summary()));
    return rs;
}

inline std::string baselines_csv(const std::vector<BaselinePoint>& pts) {
    std::ostringstream os;
    os << "realization,power_dbm,ldbp_pmd_free_db,ldbp_uncompensated_db,ldbp_ideal_inverse_db,dbp_pmd_free_db,dbp_ideal_inverse_db\n";
    for (const auto& b : pts)
        os << b.realization << ',' << format_double(b.power_dbm) << ',' << format_double(b.ldbp_pmd_free_db) << ','
           << format_double(b.ldbp_uncompensated_db) << ',' << format_double(b.ldbp_ideal_inverse_db) << ','
           << format_double(b.dbp_pmd_free_db) << ',' << format_double(b.dbp_ideal_inverse_db) << '\n';
    return os.str();
}

/// Baselines (a)-(d) for the listed realizations at the given powers.
inline std::vector<BaselinePoint> run_baselines(Lab& lab, const std::vector<std::size_t>& realizations, const std::vector<double>& powers) {
    std::vector<BaselinePoint> pts;
    for (auto r : realizations)
        for (double p : powers) pts.push_back(lab.baseline(r, p));
    write_text(lab.out() / "baselines.csv", baselines_csv(pts));
    return pts;
}

/// FreeDgdSu2Star at each DGD filter length, all realizations.
inline ResultSet run_filter_length_sweep(Lab& lab, const std::vector<std::size_t>& lengths, RotationInit init = RotationInit::RandomSu2) {
    const auto& cfg = lab.config();
    ResultSet rs;
    for (std::size_t r = 0; r < cfg.realizations; ++r) {
        std::vector<CellResult> keys;
        for (auto f : lengths) {
            CellResult k;
            k.kind = f == cfg.model.dgd_taps ? "ldbp_pmd" : "filter_length";
            k.parameterization = Parameterization::FreeDgdSu2Star;
            k.rotation_init = init;
            k.realization = r;
            k.dgd_length = f;
            keys.push_back(k);
        }
        std::vector<CellResult> done(keys.size());
        lab.parallel_for(keys.size(), [&](std::size_t i) { done[i] = lab.run_cell(keys[i]); });
        for (auto& c : done) rs.cells.push_back(std::move(c));
        lab.release_data(r);
    }
    write_result_files(lab, rs, "filter_length");
    return rs;
}

/// Retrain the converged model of realization r on realization (r+1) mod R
/// and pair it with the model trained directly on that realization.
struct SwapPair {
    CellResult fresh;
    CellResult swapped;
};

inline std::vector<SwapPair> run_pmd_swap(Lab& lab, Parameterization param = Parameterization::FreeDgdSu2Star,
                                          RotationInit init = RotationInit::RandomSu2) {
    const auto& cfg = lab.config();
    const std::size_t n = cfg.realizations;
    if (n < 2) throw ConfigError("pmd-swap needs at least 2 realizations");
    auto key = [&](std::size_t r) {
        CellResult k;
        k.kind = "ldbp_pmd";
        k.parameterization = param;
        k.rotation_init = init;
        k.realization = r;
        k.dgd_length = cfg.model.dgd_taps;
        return k;
    };
    std::vector<CellResult> fresh(n);
    for (std::size_t r = 0; r < n; ++r) fresh[r] = lab.run_cell(key(r));
    std::vector<SwapPair> pairs;
    // realization-major: swaps landing on r reuse r's data
    for (std::size_t t = 0; t < n; ++t) {
        const std::size_t src = (t + n - 1) % n;
        auto start = lab.load_cell_model(fresh[src]);
        CellResult k = key(t);
        k.kind = "swap";
        k.source_realization = src;
        CellResult s;
        if (!start || fresh[src].diverged) {
            s = k;
            s.diverged = true;
            s.message = "source model unavailable";
        } else {
            start->set_trainable(pmd_groups(param));
            s = lab.run_cell(k, &*start, cfg.swap_iterations);
        }
        pairs.push_back({fresh[t], s});
        lab.release_data(t);
    }
    std::ostringstream os;
    os << "realization,source_realization,fresh_final_snr_db,swapped_initial_snr_db,swapped_final_snr_db,difference_db,swap_convergence_iterations\n";
    for (const auto& p : pairs)
        os << p.fresh.realization << ',' << p.swapped.source_realization << ',' << format_double(p.fresh.final_snr_db) << ','
           << format_double(p.swapped.initial_snr_db) << ',' << format_double(p.swapped.final_snr_db) << ','
           << format_double(p.swapped.final_snr_db - p.fresh.final_snr_db) << ',' << p.swapped.convergence_iterations << '\n';
    write_text(lab.out() / "pmd_swap.csv", os.str());
    return pairs;
}

/// Collect every stored cell under the output directory.
inline ResultSet collect_results(const Lab& lab) {
    ResultSet rs;
    const auto dir = lab.out() / "cells";
    if (!fs::exists(dir)) return rs;
    std::vector<fs::path> paths;
    for (const auto& e : fs::directory_iterator(dir))
        if (fs::exists(e.path() / "result.json") && fs::exists(e.path() / "digest") && read_text(e.path() / "digest") == lab.digest())
            paths.push_back(e.path());
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths) rs.cells.push_back(cell_from_json(nlohmann::json::parse(read_text(p / "result.json"))));
    return rs;
}

} // namespace ldbp
