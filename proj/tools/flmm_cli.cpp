// Command-line front end: fit, gcv-scan, simulate, and fpca subcommands
// over the flmm library. Exit codes: 0 success, 1 compute failure,
// 2 usage/validation error.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flmm/io.hpp"

namespace {

using namespace flmm;

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

/// Basis spec strings: "bspline:ORDER:N_INTERIOR" or "fourier:N_BASIS[:PERIOD]".
BasisSystem parse_basis(const std::string& spec, Interval domain) {
    const auto f = split(spec, ':');
    try {
        if (f[0] == "bspline" && f.size() == 3)
            return make_bspline_basis(domain, std::stoi(f[1]), std::stoi(f[2]));
        if (f[0] == "fourier" && (f.size() == 2 || f.size() == 3))
            return make_fourier_basis(domain, std::stoi(f[1]),
                                      f.size() == 3 ? std::stod(f[2]) : domain.length());
    } catch (const std::invalid_argument&) {
        // fall through to the usage error below
    }
    throw CLI::ValidationError("--basis", "expected bspline:ORDER:N_INTERIOR or "
                                          "fourier:N_BASIS[:PERIOD], got '" + spec + "'");
}

/// Penalty spec strings: "dK" (K-th derivative) or "harmonic:OMEGA".
RoughnessOperator parse_penalty(const std::string& spec) {
    try {
        if (spec.size() >= 2 && spec[0] == 'd')
            return RoughnessOperator::derivative(std::stoi(spec.substr(1)));
        const auto f = split(spec, ':');
        if (f[0] == "harmonic" && f.size() == 2)
            return RoughnessOperator::harmonic(std::stod(f[1]));
    } catch (const std::invalid_argument&) {
    }
    throw CLI::ValidationError("--penalty",
                               "expected dK or harmonic:OMEGA, got '" + spec + "'");
}

std::vector<double> parse_grid_list(const std::string& spec, const std::string& flag) {
    std::vector<double> out;
    try {
        for (const std::string& tok : split(spec, ',')) out.push_back(std::stod(tok));
    } catch (const std::invalid_argument&) {
        throw CLI::ValidationError(flag, "expected a comma-separated list of numbers, got '" +
                                             spec + "'");
    }
    return out;
}

struct FitArgs {
    std::string data, response, out = ".";
    std::string basis = "bspline:4:26";
    std::string b_basis;  // empty: same as --basis
    std::string penalty = "d2";
    double lambda_beta = 1.0, lambda_b = 1.0;
    bool gcv = false;
    std::string lambda_beta_grid, lambda_b_grid;  // comma lists, used with --gcv
    double tol = 1e-6;
    int max_iter = 500;
    int threads = 1;
    double level = 0.95;
    int grid_size = 101;
    double domain_lo = 0.0, domain_hi = 1.0;
    bool sandwich = false;
};

struct Prepared {
    Dataset data;
    BasisSystem beta_basis;
    BasisSystem b_basis;
    Penalties pen;
    DesignBlocks db;
};

Prepared prepare(const FitArgs& a) {
    const Interval domain{a.domain_lo, a.domain_hi};
    Prepared p{ingest_dataset_files(a.data, a.response, domain), parse_basis(a.basis, domain),
               parse_basis(a.b_basis.empty() ? a.basis : a.b_basis, domain), {}, {}};
    const RoughnessOperator op = parse_penalty(a.penalty);
    p.pen.G_beta = penalty_matrix(p.beta_basis, op);
    p.pen.G_b = penalty_matrix(p.b_basis, op);
    p.db = build_design(p.data, p.beta_basis, p.b_basis);
    std::cout << "ingested " << p.data.n_subjects() << " subjects, " << p.data.n_total()
              << " visits\n";
    return p;
}

GcvGrid make_grid(const FitArgs& a) {
    GcvGrid grid = GcvGrid::default_grid();
    if (!a.lambda_beta_grid.empty())
        grid.lambda_beta = parse_grid_list(a.lambda_beta_grid, "--lambda-beta-grid");
    if (!a.lambda_b_grid.empty())
        grid.lambda_b = parse_grid_list(a.lambda_b_grid, "--lambda-b-grid");
    return grid;
}

void run_fit(const FitArgs& a) {
    Prepared p = prepare(a);
    EmOptions opt;
    opt.tol = a.tol;
    opt.max_iter = a.max_iter;

    const std::filesystem::path out(a.out);
    std::filesystem::create_directories(out);

    FitResult fit;
    if (a.gcv) {
        const GcvSurface surf = gcv_search(p.db, p.pen, make_grid(a), opt, a.threads);
        write_text_atomic(out / "gcv_surface.csv", gcv_surface_csv(surf));
        fit = fit_at_best(p.db, p.pen, surf, opt);
        std::cout << "gcv selected lambda_beta=" << fit.lambdas.beta
                  << " lambda_b=" << fit.lambdas.b << "\n";
    } else {
        fit = run_em(p.db, p.pen, Lambdas{a.lambda_beta, a.lambda_b}, opt);
        finalize_fit(p.db, p.pen, fit);
    }
    fit.cov_theta = cov_theta(p.db, p.pen, fit, a.sandwich);

    const Eigen::VectorXd grid =
        Eigen::VectorXd::LinSpaced(a.grid_size, a.domain_lo, a.domain_hi);
    const PointwiseBand band = beta_band(fit, p.beta_basis, fit.cov_theta, grid, a.level);
    const SlopeCurves curves = coefficients_to_functions(fit, p.beta_basis, p.b_basis, grid);
    std::vector<std::string> ids;
    for (const auto& s : p.data.subjects) ids.push_back(s.subject_id);
    const CovSurface gamma = gamma_surface(penalized_Db(p.db, p.pen, fit), p.b_basis, grid);

    write_text_atomic(out / "fit.json",
                      fit_to_json(fit, p.beta_basis, p.b_basis).dump(2) + "\n");
    write_text_atomic(out / "beta_band.csv", beta_band_csv(band));
    write_text_atomic(out / "individual_slopes.csv", individual_slopes_csv(ids, grid, curves));
    write_text_atomic(out / "gamma_surface.csv", gamma_surface_csv(gamma));

    const IntervalEstimate ci = intercept_ci(fit, fit.cov_theta, a.level);
    std::cout << "alpha0_hat=" << fit.theta[0] << " ci=[" << ci.lower << ", " << ci.upper
              << "] df=" << fit.df << " gcv=" << fit.gcv << " sse=" << fit.sse
              << " iterations=" << fit.convergence.iterations
              << (fit.convergence.converged ? "" : " (not converged)") << "\n";
}

void run_gcv_scan(const FitArgs& a) {
    Prepared p = prepare(a);
    EmOptions opt;
    opt.tol = a.tol;
    opt.max_iter = a.max_iter;
    const GcvSurface surf = gcv_search(p.db, p.pen, make_grid(a), opt, a.threads);
    const std::filesystem::path out(a.out);
    std::filesystem::create_directories(out);
    write_text_atomic(out / "gcv_surface.csv", gcv_surface_csv(surf));
    const GcvPoint& best = surf.points[static_cast<std::size_t>(surf.best)];
    std::cout << "best lambda_beta=" << best.lambdas.beta << " lambda_b=" << best.lambdas.b
              << " gcv=" << best.gcv << " df=" << best.df << "\n";
}

struct SimulateArgs {
    std::string slope_case = "poly";
    int n = 50, m = 5;
    double sigma_e = 0.0, sigma_eps = 0.5;
    int replicates = 100;
    std::uint64_t seed = 1;
    double lambda_beta = 1.0, lambda_b = 1.0;
    bool gcv = false;
    bool inference = false;
    bool no_denoise = false;
    int threads = 1;
    std::string out = ".";
};

void run_simulate(const SimulateArgs& a, bool seed_given) {
    Scenario scn;
    if (a.slope_case == "poly")
        scn.slope_case = Scenario::Case::Poly;
    else if (a.slope_case == "fourier")
        scn.slope_case = Scenario::Case::Fourier;
    else
        throw CLI::ValidationError("--case", "expected poly or fourier, got '" +
                                                 a.slope_case + "'");
    scn.n = a.n;
    scn.m = a.m;
    scn.sigma_e = a.sigma_e;
    scn.sigma_eps = a.sigma_eps;
    scn.seed = a.seed;
    if (!seed_given) {
        if (const char* env = std::getenv("FLMM_SEED")) scn.seed = std::stoull(env);
    }

    StudyFitConfig cfg;
    cfg.use_gcv = a.gcv;
    cfg.lambdas = {a.lambda_beta, a.lambda_b};
    cfg.inference = a.inference;
    cfg.denoise = !a.no_denoise;
    cfg.threads = a.threads;

    const StudyReport rep = run_study(scn, a.replicates, cfg);

    const std::filesystem::path out(a.out);
    std::filesystem::create_directories(out);
    write_text_atomic(out / "study_report.json", study_report_to_json(rep).dump(2) + "\n");
    write_text_atomic(out / "study_report.csv", study_report_csv(rep));
    write_text_atomic(out / "pointwise_curves.csv", pointwise_curves_csv(rep));
    std::cout << "replicates=" << rep.replicates << " failures=" << rep.failures
              << " rmise_beta_mean=" << rep.rmise_beta_mean
              << " rmise_beta_i_mean=" << rep.rmise_beta_i_mean
              << " intercept_std=" << rep.intercept_std << "\n";
}

struct FpcaArgs {
    std::string data, out = ".";
    int grid_size = 101;
    double mean_bandwidth = -1.0, cov_bandwidth = -1.0;
    int max_components = 20;
    double pve = 0.95;
    double domain_lo = 0.0, domain_hi = 1.0;
};

void run_fpca(const FpcaArgs& a) {
    const std::vector<FunctionalSample> curves = ingest_curves_file(a.data);
    std::cout << "ingested " << curves.size() << " curves\n";
    FpcaOptions opt;
    opt.grid_size = a.grid_size;
    opt.mean_bandwidth = a.mean_bandwidth;
    opt.cov_bandwidth = a.cov_bandwidth;
    opt.max_components = a.max_components;
    const FpcaModel model = fit_fpca(curves, {a.domain_lo, a.domain_hi}, opt);
    const int M = choose_num_fpcs_pve(model, a.pve);

    const std::filesystem::path out(a.out);
    std::filesystem::create_directories(out);
    write_text_atomic(out / "fpca_model.json", fpca_model_to_json(model).dump(2) + "\n");
    write_text_atomic(out / "reconstructed_curves.csv",
                      curves_csv(reconstruct_all(curves, model, M)));
    std::cout << "components=" << model.n_components() << " selected M=" << M
              << " noise_var=" << model.noise_var << "\n";
}

void add_common_fit_options(CLI::App* cmd, FitArgs& a, bool with_lambdas) {
    cmd->add_option("--data", a.data, "curves CSV (subject_id,visit_id,t,x)")->required();
    cmd->add_option("--response", a.response, "responses CSV (subject_id,visit_id,y)")
        ->required();
    cmd->add_option("--out", a.out, "output directory");
    cmd->add_option("--basis", a.basis, "population slope basis spec");
    cmd->add_option("--b-basis", a.b_basis, "subject slope basis spec (default: --basis)");
    cmd->add_option("--penalty", a.penalty, "roughness penalty: dK or harmonic:OMEGA");
    cmd->add_option("--tol", a.tol, "EM convergence tolerance");
    cmd->add_option("--max-iter", a.max_iter, "EM iteration cap");
    cmd->add_option("--threads", a.threads, "worker thread cap");
    cmd->add_option("--domain-lo", a.domain_lo, "domain lower endpoint");
    cmd->add_option("--domain-hi", a.domain_hi, "domain upper endpoint");
    cmd->add_option("--lambda-beta-grid", a.lambda_beta_grid,
                    "comma-separated lambda_beta scan values");
    cmd->add_option("--lambda-b-grid", a.lambda_b_grid,
                    "comma-separated lambda_b scan values");
    if (with_lambdas) {
        auto* lb = cmd->add_option("--lambda-beta", a.lambda_beta,
                                   "fixed population smoothing parameter");
        auto* lbb =
            cmd->add_option("--lambda-b", a.lambda_b, "fixed subject smoothing parameter");
        auto* gcv = cmd->add_flag("--gcv", a.gcv, "select smoothing parameters by GCV");
        gcv->excludes(lb);
        gcv->excludes(lbb);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"functional linear mixed-effects model fitting"};
    app.require_subcommand(1);
    app.set_config("--config", "", "flat key=value config file (CLI flags override)");

    FitArgs fit_args;
    CLI::App* fit = app.add_subcommand("fit", "fit the model to a dataset");
    add_common_fit_options(fit, fit_args, true);
    fit->add_option("--level", fit_args.level, "confidence level");
    fit->add_option("--grid-size", fit_args.grid_size, "output curve grid size");
    fit->add_flag("--sandwich", fit_args.sandwich, "sandwich covariance for theta");

    FitArgs scan_args;
    CLI::App* scan = app.add_subcommand("gcv-scan", "scan the GCV surface");
    add_common_fit_options(scan, scan_args, false);

    SimulateArgs sim_args;
    CLI::App* sim = app.add_subcommand("simulate", "Monte Carlo study");
    sim->add_option("--case", sim_args.slope_case, "slope case: poly or fourier");
    sim->add_option("--n", sim_args.n, "subjects");
    sim->add_option("--m", sim_args.m, "visits per subject");
    sim->add_option("--sigma-e", sim_args.sigma_e, "covariate noise SD");
    sim->add_option("--sigma-eps", sim_args.sigma_eps, "response noise SD");
    sim->add_option("--replicates", sim_args.replicates, "Monte Carlo replicates");
    auto* seed_opt = sim->add_option("--seed", sim_args.seed,
                                     "RNG seed (FLMM_SEED env used when absent)");
    auto* sim_lb = sim->add_option("--lambda-beta", sim_args.lambda_beta,
                                   "fixed population smoothing parameter");
    auto* sim_lbb =
        sim->add_option("--lambda-b", sim_args.lambda_b, "fixed subject smoothing parameter");
    auto* sim_gcv = sim->add_flag("--gcv", sim_args.gcv, "per-replicate GCV selection");
    sim_gcv->excludes(sim_lb);
    sim_gcv->excludes(sim_lbb);
    sim->add_flag("--inference", sim_args.inference, "record CI and band coverage");
    sim->add_flag("--no-denoise", sim_args.no_denoise,
                  "fit on raw noisy covariates (skip FPCA reconstruction)");
    sim->add_option("--threads", sim_args.threads, "worker thread cap");
    sim->add_option("--out", sim_args.out, "output directory");

    FpcaArgs fpca_args;
    CLI::App* fpca = app.add_subcommand("fpca", "functional PCA of a curve collection");
    fpca->add_option("--data", fpca_args.data, "curves CSV")->required();
    fpca->add_option("--out", fpca_args.out, "output directory");
    fpca->add_option("--grid-size", fpca_args.grid_size, "working grid size");
    fpca->add_option("--mean-bandwidth", fpca_args.mean_bandwidth,
                     "mean smoother bandwidth (<0: 5% of domain)");
    fpca->add_option("--cov-bandwidth", fpca_args.cov_bandwidth,
                     "covariance smoother bandwidth (<0: 5% of domain)");
    fpca->add_option("--max-components", fpca_args.max_components, "component cap");
    fpca->add_option("--pve", fpca_args.pve, "proportion-of-variance threshold for M");
    fpca->add_option("--domain-lo", fpca_args.domain_lo, "domain lower endpoint");
    fpca->add_option("--domain-hi", fpca_args.domain_hi, "domain upper endpoint");

    try {
        app.parse(argc, argv);
        // echo the fully resolved configuration to the run log
        for (const CLI::App* sub : app.get_subcommands())
            std::cout << "# resolved config [" << sub->get_name() << "]\n"
                      << sub->config_to_str(true, false);
        if (*fit) run_fit(fit_args);
        if (*scan) run_gcv_scan(scan_args);
        if (*sim) run_simulate(sim_args, seed_opt->count() > 0);
        if (*fpca) run_fpca(fpca_args);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
