#pragma once

// Command-line front end. Needs CLI11.hpp and json.hpp on the include path.

#include "tisc/errors.hpp"
#include "tisc/grid.hpp"
#include "tisc/mild_case.hpp"
#include "tisc/scale.hpp"
#include "tisc/simulator.hpp"
#include "tisc/strong_case.hpp"
#include "tisc/verifier.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace tisc::cli {

using json = nlohmann::ordered_json;

inline constexpr const char* kVersion = "1.0.0";
inline constexpr int kSchemaVersion = 1;

enum ExitCode : int { kOk = 0, kAcceptanceFailure = 1, kInvalidParameters = 2, kUsage = 64 };

// ---------------------------------------------------------------------------
// Data files: x, V, V_prime, u_rate, region.

struct DataRow {
    double x = 0, V = 0, V_prime = 0, u_rate = 0;
    char region = 'W';
};

inline constexpr const char* kCsvHeader = "x,V,V_prime,u_rate,region";

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_csv(std::ostream& os, const std::vector<DataRow>& rows) {
    os << kCsvHeader << '\n';
    for (const auto& r : rows)
        os << format_double(r.x) << ',' << format_double(r.V) << ',' << format_double(r.V_prime) << ','
           << format_double(r.u_rate) << ',' << r.region << '\n';
}

inline std::vector<DataRow> read_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw InsufficientDataError("read_csv: empty input");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kCsvHeader) throw DomainError("read_csv: unexpected header '" + line + "'");
    std::vector<DataRow> rows;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell[5];
        for (int i = 0; i < 5; ++i)
            if (!std::getline(ss, cell[i], ',')) throw DomainError("read_csv: short row at line " + std::to_string(lineno));
        DataRow r;
        try {
            r.x = std::stod(cell[0]);
            r.V = std::stod(cell[1]);
            r.V_prime = std::stod(cell[2]);
            r.u_rate = std::stod(cell[3]);
        } catch (const std::exception&) {
            throw DomainError("read_csv: bad number at line " + std::to_string(lineno));
        }
        if (cell[4].size() != 1 || (cell[4][0] != 'W' && cell[4][0] != 'M' && cell[4][0] != 'S'))
            throw DomainError("read_csv: region must be W, M or S at line " + std::to_string(lineno));
        r.region = cell[4][0];
        rows.push_back(r);
    }
    if (rows.empty()) throw InsufficientDataError("read_csv: no data rows");
    return rows;
}

/// Conditions (I) and (II) evaluated on the rows of a data file.
struct DataChecks {
    ConditionResult I, II;
    double tol = 1e-9;
};

inline DataChecks check_rows(const std::vector<DataRow>& rows, double tol = 1e-9) {
    DataChecks d;
    d.tol = tol;
    d.I.margin = -kInf;
    d.II.margin = 0.0;
    for (const auto& r : rows) {
        if (r.region == 'W') {
            ++d.I.points;
            if (r.V_prime - 1.0 > d.I.margin) {
                d.I.margin = r.V_prime - 1.0;
                d.I.arg = r.x;
            }
        } else if (r.region == 'M') {
            ++d.II.points;
            if (std::abs(r.V_prime - 1.0) > d.II.margin) {
                d.II.margin = std::abs(r.V_prime - 1.0);
                d.II.arg = r.x;
            }
        }
    }
    d.I.pass = d.I.points == 0 || d.I.margin <= tol;
    d.II.pass = d.II.margin <= tol;
    return d;
}

inline std::vector<DataRow> strong_rows(const StrongCandidate& c, std::size_t n) {
    std::vector<DataRow> rows;
    const double bs[] = {c.b_star};
    for (double x : exclude_near(composite_grid(0.0, c.b_star, n), bs, 1e-8))
        rows.push_back({x, V_strong_eval(c, x, 0), V_strong_eval(c, x, 1), 0.0, 'W'});
    for (double x : uniform_grid(c.b_star, 10.0 * c.b_star, std::max<std::size_t>(n / 10, 2)))
        rows.push_back({x, V_strong_eval(c, x, 0), V_strong_eval(c, x, 1), 0.0, 'S'});
    return rows;
}

/// Waiting and mild pieces, a dense zoom around b_low and the strong region up to 2 beta_star.
/// The rate column stops at beta_star - 1e-6, where u* explodes.
inline std::vector<DataRow> mild_rows(const MildCandidate& m, std::size_t n) {
    const double bl = m.b_low, be = m.beta_star;
    std::vector<double> xs = composite_grid(0.0, be - 1e-6, n);
    const double zoom = 0.02 * bl;
    for (double x : uniform_grid(bl - zoom, bl + zoom, 401)) xs.push_back(x);
    std::sort(xs.begin(), xs.end());
    xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
    const double bps[] = {bl, be};
    std::vector<DataRow> rows;
    for (double x : exclude_near(xs, bps, 1e-8)) {
        const char reg = x < bl ? 'W' : 'M';
        rows.push_back({x, V_mild_eval(m, x, 0), V_mild_eval(m, x, 1), u_star_eval(m, x), reg});
    }
    for (double x : uniform_grid(be, 2.0 * be, std::max<std::size_t>(n / 10, 2)))
        rows.push_back({x, V_mild_eval(m, x, 0), V_mild_eval(m, x, 1), 0.0, 'S'});
    return rows;
}

// ---------------------------------------------------------------------------
// Report pieces.

inline json condition_json(const ConditionResult& c, double tol) {
    return json{{"pass", c.pass}, {"margin", c.margin}, {"arg", c.arg}, {"points", c.points}, {"tol", tol}};
}

inline json verdict_json(const VerificationVerdict& v) {
    return json{{"all_pass", v.all_pass()},
                {"I", condition_json(v.I, v.tol)},
                {"II", condition_json(v.II, v.tol)},
                {"III", condition_json(v.III, v.tol)},
                {"smooth_fit", {{"pass", v.smooth_fit_pass}, {"jump", v.smooth_fit}, {"tol", v.smooth_fit_tol}}},
                {"bvp_residual_max_rel", v.bvp_residual_max},
                {"sup_v", v.sup_v},
                {"sup_dv", v.sup_dv},
                {"sup_d2v", v.sup_d2v}};
}

inline json data_checks_json(const DataChecks& d) {
    return json{{"I", condition_json(d.I, d.tol)}, {"II", condition_json(d.II, d.tol)}};
}

inline json boundary_json(const BoundaryReport& r) {
    return json{{"verdict", to_string(r.verdict)},
                {"entrance_integral", to_string(r.entrance_verdict)},
                {"speed_scale_integral", to_string(r.speed_scale_verdict)},
                {"base_point", r.base_point},
                {"truncations", r.truncations},
                {"entrance_integral_estimates", r.entrance_integral_estimates},
                {"speed_scale_integral_estimates", r.speed_scale_integral},
                {"test",
                 {{"ratio_divergent", r.test.ratio_divergent},
                  {"ratio_convergent", r.test.ratio_convergent},
                  {"cauchy_rel", r.test.cauchy_rel},
                  {"window", r.test.window}}},
                {"ode_rel_tol", r.ode_rel_tol},
                {"ode_abs_tol", r.ode_abs_tol}};
}

inline json parameters_json(double sigma2, double q1, double q2) {
    return json{{"sigma2", sigma2}, {"q1", q1}, {"q2", q2}, {"p", {0.5, 0.5}}};
}

inline json provenance_json(std::size_t grid, const VerificationGrid& G, const VerificationVerdict& v) {
    return json{{"version", kVersion},
                {"grid_points", grid},
                {"grid_points_total", v.grid_points},
                {"guard", G.guard},
                {"s_truncation", G.s_truncation},
                {"tol", v.tol},
                {"smooth_fit_tol", v.smooth_fit_tol}};
}

inline VerificationVerdict verify_strong(const StrongCandidate& c, std::size_t n, VerificationGrid* grid = nullptr) {
    const auto B = bundle_from_strong(c);
    auto G = make_verification_grid(B, n);
    auto v = verify_conditions(B, G);
    if (grid) *grid = std::move(G);
    return v;
}

inline VerificationVerdict verify_mild(const MildCandidate& m, std::size_t n, double delta,
                                       VerificationGrid* grid = nullptr) {
    const auto B = bundle_from_mild(m, delta);
    auto G = make_verification_grid(B, n);
    auto v = verify_conditions(B, G);
    if (grid) *grid = std::move(G);
    return v;
}

inline BoundaryReport mild_boundary(const MildCandidate& m) {
    const ScaleFunction sf(DiffusionModel::gbm(std::sqrt(m.sigma2)), mild_rate(m), m.beta_star, 0.5 * m.b_low);
    const auto ladder = default_ladder(sf);
    return feller_classify_upper(sf, m.beta_star, ladder);
}

inline json strong_report(const StrongCandidate& c, std::size_t n) {
    VerificationGrid G;
    const auto v = verify_strong(c, n, &G);
    const auto rows = strong_rows(c, n);
    return json{{"schema_version", kSchemaVersion},
                {"case", "strong"},
                {"parameters", parameters_json(c.sigma2, c.q1, c.q2)},
                {"candidate",
                 {{"gamma", {c.gamma1, c.gamma2}},
                  {"A", {c.A1, c.A2}},
                  {"b_star", c.b_star},
                  {"H", regime_indicator(c.sigma2, c.q1, c.q2)}}},
                {"verification", verdict_json(v)},
                {"data_checks", data_checks_json(check_rows(rows, v.tol))},
                {"boundary", nullptr},
                {"monte_carlo", nullptr},
                {"provenance", provenance_json(n, G, v)}};
}

inline json mild_report(const MildBuild& mb, std::size_t n, double delta) {
    const MildCandidate& m = mb.candidate;
    json r{{"schema_version", kSchemaVersion},
           {"case", "mild"},
           {"parameters", parameters_json(m.sigma2, m.q1, m.q2)},
           {"candidate",
            {{"valid", mb.valid},
             {"reason", mb.reason},
             {"gamma", {m.gamma1, m.gamma2}},
             {"a", {m.a1, m.a2}},
             {"b", {m.b1, m.b2}},
             {"c", {m.c1, m.c2}},
             {"A", {m.A1, m.A2}},
             {"b_low", m.b_low},
             {"beta_star", m.beta_star},
             {"delta", delta}}}};
    if (!mb.valid) {
        r["verification"] = nullptr;
        r["data_checks"] = nullptr;
        r["boundary"] = nullptr;
        r["growth"] = nullptr;
        r["monte_carlo"] = nullptr;
        r["provenance"] = json{{"version", kVersion}, {"grid_points", n}};
        return r;
    }
    VerificationGrid G;
    const auto v = verify_mild(m, n, delta, &G);
    const auto rows = mild_rows(m, n);
    const auto growth = mild_growth_bound(m, composite_grid(m.b_low, m.beta_star - 1e-6, n));
    r["verification"] = verdict_json(v);
    r["data_checks"] = data_checks_json(check_rows(rows, v.tol));
    r["boundary"] = boundary_json(mild_boundary(m));
    r["growth"] = json{{"min_M", growth.min_M},
                       {"argmin_M", growth.argmin_M},
                       {"min_explosion_bound", growth.min_bound},
                       {"argmin_explosion_bound", growth.argmin_bound},
                       {"points", growth.points}};
    r["explosion_marker"] = m.beta_star;
    r["zoom"] = json{{"center", m.b_low}, {"half_width", 0.02 * m.b_low}};
    r["monte_carlo"] = nullptr;
    r["provenance"] = provenance_json(n, G, v);
    return r;
}

// ---------------------------------------------------------------------------
// Regime scan.

struct ScanRow {
    double q2 = 0, H = 0, b_star = 0, strong_I_margin = 0;
    bool strong_pass = false;
    bool mild_valid = false;
    std::string mild_reason;
    bool mild_pass = false;
    double b_low = 0;
};

struct ScanResult {
    std::vector<ScanRow> rows;
    /// Consecutive scan points where the grid verdict of (I) flips from pass to fail.
    std::optional<std::pair<double, double>> flip_bracket;
    /// Consecutive scan points where H changes sign.
    std::optional<std::pair<double, double>> h_bracket;
    RegimeBracket refined;
};

inline ScanResult run_scan(double sigma2, double q1, double q2_min, double q2_max, std::size_t points, std::size_t n,
                           double tol = 1e-9) {
    if (points < 1 || !(q2_max >= q2_min)) throw DomainError("scan: empty q2 range");
    check_gbm_case_parameters(sigma2, q1, q2_min);
    ScanResult res;
    for (std::size_t i = 0; i < points; ++i) {
        const double q2 = points == 1 ? q2_min : q2_min + (q2_max - q2_min) * static_cast<double>(i) / (points - 1);
        ScanRow row;
        row.q2 = q2;
        const auto c = build_strong(sigma2, q1, q2);
        row.H = regime_indicator(sigma2, q1, q2);
        row.b_star = c.b_star;
        row.strong_I_margin = strong_condition_I_margin(c, n);
        row.strong_pass = row.strong_I_margin <= tol;
        const auto mb = build_mild(sigma2, q1, q2);
        row.mild_valid = mb.valid;
        row.mild_reason = mb.reason;
        row.b_low = mb.candidate.b_low;
        if (mb.valid) row.mild_pass = verify_mild(mb.candidate, n, 0.1).all_pass();
        res.rows.push_back(row);
    }
    for (std::size_t i = 1; i < res.rows.size(); ++i) {
        const auto &a = res.rows[i - 1], &b = res.rows[i];
        if (!res.flip_bracket && a.strong_pass && !b.strong_pass) res.flip_bracket = {{a.q2, b.q2}};
        if (!res.h_bracket && (a.H < 0.0) != (b.H < 0.0)) res.h_bracket = {{a.q2, b.q2}};
    }
    if (res.flip_bracket)
        res.refined = strong_regime_crossover(sigma2, q1, res.flip_bracket->first, res.flip_bracket->second, n, tol);
    return res;
}

inline void write_scan_csv(std::ostream& os, const ScanResult& s) {
    os << "q2,H,b_star,strong_I_margin,strong_pass,mild_valid,b_low,mild_pass\n";
    for (const auto& r : s.rows)
        os << format_double(r.q2) << ',' << format_double(r.H) << ',' << format_double(r.b_star) << ','
           << format_double(r.strong_I_margin) << ',' << (r.strong_pass ? 1 : 0) << ',' << (r.mild_valid ? 1 : 0)
           << ',' << format_double(r.b_low) << ',' << (r.mild_pass ? 1 : 0) << '\n';
}

inline json scan_json(const ScanResult& s, double sigma2, double q1, std::size_t n, double tol) {
    json rows = json::array();
    for (const auto& r : s.rows)
        rows.push_back(json{{"q2", r.q2},
                            {"H", r.H},
                            {"b_star", r.b_star},
                            {"strong_I_margin", r.strong_I_margin},
                            {"strong_pass", r.strong_pass},
                            {"mild_valid", r.mild_valid},
                            {"mild_reason", r.mild_reason},
                            {"b_low", r.b_low},
                            {"mild_pass", r.mild_pass}});
    auto bracket = [](const std::optional<std::pair<double, double>>& b) -> json {
        if (!b) return nullptr;
        return json::array({b->first, b->second});
    };
    json refined = nullptr;
    if (s.refined.found)
        refined = json{{"q2_pass", s.refined.q2_pass}, {"q2_fail", s.refined.q2_fail}, {"iterations", s.refined.iterations}};
    return json{{"schema_version", kSchemaVersion},
                {"case", "scan"},
                {"parameters", {{"sigma2", sigma2}, {"q1", q1}}},
                {"rows", rows},
                {"condition_I_flip", bracket(s.flip_bracket)},
                {"H_sign_change", bracket(s.h_bracket)},
                {"brackets_agree", s.flip_bracket.has_value() && s.flip_bracket == s.h_bracket},
                {"refined_crossover", refined},
                {"provenance", {{"version", kVersion}, {"grid_points", n}, {"tol", tol}}}};
}

// ---------------------------------------------------------------------------
// Monte Carlo comparison.

struct McRow {
    double x0 = 0, q = 0, closed_form = 0, estimate = 0, se = 0, z = 0;
    double halving_shift = 0, halving_shift_se = 0;
    double censoring_bias_bound = 0;
};

struct McTable {
    std::vector<McRow> rows;
    bool all_within = true;    ///< every |z| <= 3
    bool halving_ok = true;    ///< every |halving shift| < SE
    std::size_t n_paths = 0, check_paths = 0;
    double dt = 0, t_max = 0;
    std::uint64_t seed = 0;
    bool vectorised = false;
};

/// `v(x, k)` is the closed-form value for atom k.
template <class ClosedForm>
McTable mc_compare(const ThresholdStrategy& strat, double sigma2, double q1, double q2, std::span<const double> x0,
                   const SimConfig& cfg, std::size_t check_paths, ClosedForm&& v) {
    const auto model = DiffusionModel::gbm(std::sqrt(sigma2));
    const auto cost = RunningCost::half_square();
    const double qs[] = {q1, q2}, ws[] = {0.5, 0.5};
    const auto ens = simulate_ensemble(model, strat, x0, qs, ws, cost, cfg);
    McTable t;
    t.n_paths = cfg.n_paths;
    t.check_paths = check_paths;
    t.dt = ens.dt;
    t.t_max = ens.t_max;
    t.seed = cfg.seed;
    t.vectorised = ens.vectorised;
    std::optional<HalvingReport> h;
    if (check_paths > 0) h = halving_check(model, strat, x0, qs, cost, cfg, check_paths);
    for (std::size_t k = 0; k < x0.size(); ++k)
        for (std::size_t q = 0; q < 2; ++q) {
            McRow r;
            r.x0 = x0[k];
            r.q = qs[q];
            r.closed_form = v(x0[k], static_cast<int>(q));
            const auto& e = ens.w[k][q];
            r.estimate = e.estimate;
            r.se = e.se;
            const double diff = e.estimate - r.closed_form;
            r.z = e.se > 0.0 ? diff / e.se : (diff == 0.0 ? 0.0 : kInf);
            r.censoring_bias_bound = e.censoring_bias_bound;
            if (h) {
                r.halving_shift = h->shift[k][q];
                r.halving_shift_se = h->shift_se[k][q];
                if (!(std::abs(r.halving_shift) < r.se)) t.halving_ok = false;
            }
            if (!(std::abs(r.z) <= 3.0)) t.all_within = false;
            t.rows.push_back(r);
        }
    return t;
}

inline json mc_json(const McTable& t) {
    json rows = json::array();
    for (const auto& r : t.rows)
        rows.push_back(json{{"x0", r.x0},
                            {"q", r.q},
                            {"closed_form", r.closed_form},
                            {"estimate", r.estimate},
                            {"se", r.se},
                            {"z", r.z},
                            {"halving_shift", r.halving_shift},
                            {"halving_shift_se", r.halving_shift_se},
                            {"censoring_bias_bound", r.censoring_bias_bound}});
    return json{{"rows", rows},
                {"all_within_3se", t.all_within},
                {"halving_shift_below_se", t.halving_ok},
                {"n_paths", t.n_paths},
                {"halving_check_paths", t.check_paths},
                {"dt", t.dt},
                {"t_max", t.t_max},
                {"seed", t.seed},
                {"vectorised", t.vectorised}};
}

inline void write_mc_csv(std::ostream& os, const McTable& t) {
    os << "x0,q,closed_form,estimate,se,z,halving_shift,halving_shift_se\n";
    for (const auto& r : t.rows)
        os << format_double(r.x0) << ',' << format_double(r.q) << ',' << format_double(r.closed_form) << ','
           << format_double(r.estimate) << ',' << format_double(r.se) << ',' << format_double(r.z) << ','
           << format_double(r.halving_shift) << ',' << format_double(r.halving_shift_se) << '\n';
}

// ---------------------------------------------------------------------------
// Entry point.

namespace detail {

struct CaseFlags {
    double sigma2 = 0, q1 = 0, q2 = 0;
};

inline void add_case_flags(CLI::App* app, CaseFlags& f) {
    app->add_option("--sigma2", f.sigma2, "volatility squared")->required();
    app->add_option("--q1", f.q1, "smaller discount rate")->required();
    app->add_option("--q2", f.q2, "larger discount rate")->required();
}

class Output {
public:
    Output(const std::string& path, std::ostream& fallback) : os_(&fallback) {
        if (!path.empty()) {
            file_.open(path);
            if (!file_) throw DomainError("cannot open output file " + path);
            os_ = &file_;
        }
    }
    std::ostream& operator*() { return *os_; }

private:
    std::ofstream file_;
    std::ostream* os_;
};

}  // namespace detail

/// Runs the command line; returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Equilibrium threshold strategies for singular control under weighted discounting"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);

    detail::CaseFlags cf;
    std::size_t grid = 10000;
    std::string out_path, format = "json";
    double delta = 0.1;
    auto add_output = [&](CLI::App* sub) {
        sub->add_option("--out", out_path, "output file (default stdout)");
        sub->add_option("--format", format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
    };

    auto* strong = app.add_subcommand("strong", "strong-threshold candidate, verification and data");
    detail::add_case_flags(strong, cf);
    strong->add_option("--grid", grid, "points per region")->check(CLI::PositiveNumber);
    add_output(strong);

    auto* mild = app.add_subcommand("mild", "mild-threshold candidate, verification and data");
    detail::add_case_flags(mild, cf);
    mild->add_option("--grid", grid, "points per region")->check(CLI::PositiveNumber);
    mild->add_option("--delta", delta, "initial jump offset below beta");
    add_output(mild);

    std::string in_path, case_name;
    double tol = 1e-9;
    auto* verify = app.add_subcommand("verify", "recheck a data file (--in) or a case from its parameters");
    verify->add_option("--in", in_path, "data file written by strong/mild --format csv");
    verify->add_option("--case", case_name, "strong or mild")->check(CLI::IsMember({"strong", "mild"}));
    verify->add_option("--sigma2", cf.sigma2, "volatility squared");
    verify->add_option("--q1", cf.q1, "smaller discount rate");
    verify->add_option("--q2", cf.q2, "larger discount rate");
    verify->add_option("--grid", grid, "points per region")->check(CLI::PositiveNumber);
    verify->add_option("--tol", tol, "pass tolerance for the conditions");
    add_output(verify);

    std::size_t paths = 10000, check_paths = 1000;
    double dt = 1e-3;
    std::optional<double> tmax;
    std::uint64_t seed = 1;
    std::vector<double> x0;
    auto* simulate = app.add_subcommand("simulate", "Monte Carlo comparison against the closed form");
    simulate->add_option("--case", case_name, "strong or mild")->required()->check(CLI::IsMember({"strong", "mild"}));
    detail::add_case_flags(simulate, cf);
    simulate->add_option("--paths", paths, "paths per estimate");
    simulate->add_option("--check-paths", check_paths, "paths for the dt-halving check (0 skips it)");
    simulate->add_option("--dt", dt, "time step");
    simulate->add_option("--tmax", tmax, "horizon (default: exp(-q1 tmax) = 1e-6)");
    simulate->add_option("--seed", seed, "RNG seed");
    simulate->add_option("--x0", x0, "starting points (default: three interior points)");
    simulate->add_option("--delta", delta, "initial jump offset below beta (mild)");
    add_output(simulate);

    double q2_min = 0, q2_max = 0;
    std::size_t points = 33;
    auto* scan = app.add_subcommand("scan", "regime table over a range of q2");
    scan->add_option("--sigma2", cf.sigma2, "volatility squared")->required();
    scan->add_option("--q1", cf.q1, "smaller discount rate")->required();
    scan->add_option("--q2-min", q2_min, "first q2 of the scan")->required();
    scan->add_option("--q2-max", q2_max, "last q2 of the scan")->required();
    scan->add_option("--points", points, "number of q2 values");
    scan->add_option("--grid", grid, "points per region")->check(CLI::PositiveNumber);
    add_output(scan);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (app.exit(e, out, err) == 0) return kOk;  // --help, --version
        const auto subs = app.get_subcommands();
        err << '\n' << (subs.empty() ? app.help() : subs.front()->help());
        return kUsage;
    }

    try {
        if (strong->parsed()) {
            const auto c = build_strong(cf.sigma2, cf.q1, cf.q2);
            detail::Output o(out_path, out);
            if (format == "csv") write_csv(*o, strong_rows(c, grid));
            else *o << strong_report(c, grid).dump(2) << '\n';
            return kOk;
        }
        if (mild->parsed()) {
            const auto mb = build_mild(cf.sigma2, cf.q1, cf.q2);
            detail::Output o(out_path, out);
            if (format == "csv") {
                if (!mb.valid) {
                    err << "mild candidate is not valid: " << mb.reason << '\n';
                    return kOk;
                }
                write_csv(*o, mild_rows(mb.candidate, grid));
            } else {
                *o << mild_report(mb, grid, delta).dump(2) << '\n';
            }
            return kOk;
        }
        if (verify->parsed()) {
            if (!in_path.empty()) {
                std::ifstream is(in_path);
                if (!is) throw DomainError("cannot open " + in_path);
                const auto d = check_rows(read_csv(is), tol);
                detail::Output o(out_path, out);
                *o << json{{"schema_version", kSchemaVersion},
                           {"case", "data"},
                           {"source", in_path},
                           {"data_checks", data_checks_json(d)},
                           {"all_pass", d.I.pass && d.II.pass}}
                          .dump(2)
                   << '\n';
                return kOk;
            }
            if (case_name.empty() || verify->count("--sigma2") == 0 || verify->count("--q1") == 0 ||
                verify->count("--q2") == 0) {
                err << "error: verify needs --in FILE or --case with --sigma2 --q1 --q2\n\n" << verify->help();
                return kUsage;
            }
            const auto B = case_name == "strong" ? bundle_from_strong(build_strong(cf.sigma2, cf.q1, cf.q2))
                                                 : [&] {
                                                       const auto mb = build_mild(cf.sigma2, cf.q1, cf.q2);
                                                       if (!mb.valid)
                                                           throw ParameterError("mild candidate is not valid: " +
                                                                                mb.reason);
                                                       return bundle_from_mild(mb.candidate, delta);
                                                   }();
            const auto G = make_verification_grid(B, grid);
            const auto v = verify_conditions(B, G, tol);
            detail::Output o(out_path, out);
            *o << json{{"schema_version", kSchemaVersion},
                       {"case", case_name},
                       {"parameters", parameters_json(cf.sigma2, cf.q1, cf.q2)},
                       {"verification", verdict_json(v)},
                       {"provenance", provenance_json(grid, G, v)}}
                      .dump(2)
               << '\n';
            return kOk;
        }
        if (simulate->parsed()) {
            SimConfig cfg;
            cfg.dt = dt;
            cfg.t_max = tmax;
            cfg.n_paths = paths;
            cfg.seed = seed;
            McTable t;
            if (case_name == "strong") {
                const auto c = build_strong(cf.sigma2, cf.q1, cf.q2);
                if (x0.empty()) x0 = {0.25 * c.b_star, 0.5 * c.b_star, 0.75 * c.b_star};
                t = mc_compare(StrongThreshold{c.b_star}, cf.sigma2, cf.q1, cf.q2, x0, cfg, check_paths,
                               [&](double x, int k) { return v_strong_eval(c, x, k, 0); });
            } else {
                const auto mb = build_mild(cf.sigma2, cf.q1, cf.q2);
                if (!mb.valid) throw ParameterError("mild candidate is not valid: " + mb.reason);
                const auto& m = mb.candidate;
                if (x0.empty()) x0 = {0.5 * m.b_low, 0.5 * (m.b_low + m.beta_star), 0.25 * (m.b_low + 3.0 * m.beta_star)};
                t = mc_compare(mild_strategy(m, delta), cf.sigma2, cf.q1, cf.q2, x0, cfg, check_paths,
                               [&](double x, int k) { return v_mild_eval(m, x, k, 0); });
            }
            detail::Output o(out_path, out);
            if (format == "csv") write_mc_csv(*o, t);
            else
                *o << json{{"schema_version", kSchemaVersion},
                           {"case", case_name},
                           {"parameters", parameters_json(cf.sigma2, cf.q1, cf.q2)},
                           {"monte_carlo", mc_json(t)}}
                          .dump(2)
                   << '\n';
            return t.all_within && t.halving_ok ? kOk : kAcceptanceFailure;
        }
        if (scan->parsed()) {
            if (points < 1 || !(q2_max >= q2_min)) {
                err << "error: empty q2 range\n\n" << scan->help();
                return kUsage;
            }
            const auto s = run_scan(cf.sigma2, cf.q1, q2_min, q2_max, points, grid);
            detail::Output o(out_path, out);
            if (format == "csv") write_scan_csv(*o, s);
            else *o << scan_json(s, cf.sigma2, cf.q1, grid, 1e-9).dump(2) << '\n';
            return kOk;
        }
    } catch (const ParameterError& e) {
        err << "error: " << e.what() << '\n';
        return kInvalidParameters;
    } catch (const DomainError& e) {
        err << "error: " << e.what() << '\n';
        return kInvalidParameters;
    } catch (const InsufficientDataError& e) {
        err << "error: " << e.what() << '\n';
        return kInvalidParameters;
    }
    return kUsage;
}

}  // namespace tisc::cli
