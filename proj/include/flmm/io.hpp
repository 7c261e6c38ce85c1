#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "flmm/em.hpp"
#include "flmm/fpca.hpp"
#include "flmm/inference.hpp"
#include "flmm/selection.hpp"
#include "flmm/sim.hpp"

namespace flmm {

inline constexpr int kSchemaVersion = 1;

namespace detail {

/// Shortest round-trip decimal form of a double (bit-exact on re-parse).
inline std::string fmt(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

/// JSON value for a double that survives non-finite values (json has no
/// inf/nan literals).
inline nlohmann::json num_to_json(double v) {
    if (std::isfinite(v)) return v;
    if (std::isnan(v)) return "nan";
    return v > 0 ? "inf" : "-inf";
}

inline double num_from_json(const nlohmann::json& j) {
    if (j.is_number()) return j.get<double>();
    if (j.is_string()) {
        const std::string s = j.get<std::string>();
        if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
    }
    throw std::invalid_argument("malformed numeric field in JSON");
}

inline nlohmann::json vector_to_json(const Eigen::VectorXd& v) {
    nlohmann::json a = nlohmann::json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

inline Eigen::VectorXd vector_from_json(const nlohmann::json& a) {
    Eigen::VectorXd v(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) v[static_cast<Eigen::Index>(i)] = a[i];
    return v;
}

inline nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) rows.push_back(vector_to_json(m.row(r)));
    return rows;
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& rows) {
    if (rows.empty()) return {};
    Eigen::MatrixXd m(rows.size(), rows[0].size());
    for (std::size_t r = 0; r < rows.size(); ++r)
        m.row(static_cast<Eigen::Index>(r)) = vector_from_json(rows[r]);
    return m;
}

}  // namespace detail

inline nlohmann::json basis_to_json(const BasisSystem& b) {
    nlohmann::json j;
    j["domain"] = {b.domain().lo, b.domain().hi};
    if (b.kind() == BasisSystem::Kind::BSpline) {
        j["kind"] = "bspline";
        j["order"] = b.order();
        j["interior_knots"] = b.interior_knots();
    } else {
        j["kind"] = "fourier";
        j["n_basis"] = b.size();
        j["period"] = b.period();
    }
    return j;
}

inline BasisSystem basis_from_json(const nlohmann::json& j) {
    const Interval domain{j.at("domain")[0], j.at("domain")[1]};
    const std::string kind = j.at("kind");
    if (kind == "bspline")
        return BasisSystem::bspline(domain, j.at("order"),
                                    j.at("interior_knots").get<std::vector<double>>());
    if (kind == "fourier") return BasisSystem::fourier(domain, j.at("n_basis"), j.at("period"));
    throw std::invalid_argument("unknown basis kind '" + kind + "'");
}

inline nlohmann::json fit_to_json(const FitResult& fit, const BasisSystem& beta_basis,
                                  const BasisSystem& b_basis) {
    nlohmann::json j;
    j["schema_version"] = kSchemaVersion;
    j["beta_basis"] = basis_to_json(beta_basis);
    j["b_basis"] = basis_to_json(b_basis);
    j["theta"] = detail::vector_to_json(fit.theta);
    nlohmann::json xi = nlohmann::json::array();
    for (const auto& x : fit.xi) xi.push_back(detail::vector_to_json(x));
    j["xi"] = xi;
    j["vc"] = {{"sigma2_a", fit.vc.sigma2_a},
               {"sigma2_eps", fit.vc.sigma2_eps},
               {"D", detail::matrix_to_json(fit.vc.D)}};
    j["lambdas"] = {{"beta", fit.lambdas.beta}, {"b", fit.lambdas.b}};
    j["df"] = detail::num_to_json(fit.df);
    j["gcv"] = detail::num_to_json(fit.gcv);
    j["sse"] = detail::num_to_json(fit.sse);
    j["cov_theta"] = detail::matrix_to_json(fit.cov_theta);
    j["convergence"] = {{"iterations", fit.convergence.iterations},
                        {"final_delta", detail::num_to_json(fit.convergence.final_delta)},
                        {"converged", fit.convergence.converged}};
    return j;
}

struct LoadedFit {
    FitResult fit;
    BasisSystem beta_basis;
    BasisSystem b_basis;
};

inline LoadedFit fit_from_json(const nlohmann::json& j) {
    if (!j.contains("schema_version") || j.at("schema_version").get<int>() != kSchemaVersion)
        throw std::invalid_argument("unsupported fit schema version");
    LoadedFit out{FitResult{}, basis_from_json(j.at("beta_basis")),
                  basis_from_json(j.at("b_basis"))};
    FitResult& fit = out.fit;
    fit.theta = detail::vector_from_json(j.at("theta"));
    for (const auto& x : j.at("xi")) fit.xi.push_back(detail::vector_from_json(x));
    fit.vc.sigma2_a = j.at("vc").at("sigma2_a");
    fit.vc.sigma2_eps = j.at("vc").at("sigma2_eps");
    fit.vc.D = detail::matrix_from_json(j.at("vc").at("D"));
    fit.lambdas.beta = j.at("lambdas").at("beta");
    fit.lambdas.b = j.at("lambdas").at("b");
    fit.df = detail::num_from_json(j.at("df"));
    fit.gcv = detail::num_from_json(j.at("gcv"));
    fit.sse = detail::num_from_json(j.at("sse"));
    fit.cov_theta = detail::matrix_from_json(j.at("cov_theta"));
    fit.convergence.iterations = j.at("convergence").at("iterations");
    fit.convergence.final_delta = detail::num_from_json(j.at("convergence").at("final_delta"));
    fit.convergence.converged = j.at("convergence").at("converged");
    return out;
}

/// Atomic text emission: write to a sibling temp file, then rename into
/// place, so readers never observe partial output.
inline void write_text_atomic(const std::filesystem::path& path, const std::string& content) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot open for writing: " + tmp.string());
        os << content;
        if (!os) throw std::runtime_error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

inline double parse_number(const std::string& s, const std::string& what, int line_no) {
    double v;
    const char* b = s.data();
    const char* e = b + s.size();
    const auto res = std::from_chars(b, e, v);
    if (res.ec != std::errc{} || res.ptr != e)
        throw std::invalid_argument("line " + std::to_string(line_no) + ": non-numeric " +
                                    what + " value '" + s + "'");
    return v;
}

struct CurvePoint {
    double t, x;
    int line;
};

struct CurveRows {
    std::map<std::pair<std::string, std::string>, std::vector<CurvePoint>> rows;
    std::vector<std::pair<std::string, std::string>> order;  // first appearance
};

inline CurveRows read_curve_rows(std::istream& curves) {
    CurveRows out;
    std::string line;
    int line_no = 0;
    if (!std::getline(curves, line)) throw std::invalid_argument("curves CSV is empty");
    ++line_no;
    if (split_csv_line(line) != std::vector<std::string>{"subject_id", "visit_id", "t", "x"})
        throw std::invalid_argument("curves CSV must start with header subject_id,visit_id,t,x");
    while (std::getline(curves, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != 4)
            throw std::invalid_argument("line " + std::to_string(line_no) +
                                        ": expected 4 curve columns, got " +
                                        std::to_string(f.size()));
        const double t = parse_number(f[2], "t", line_no);
        const double x = parse_number(f[3], "x", line_no);
        const auto key = std::make_pair(f[0], f[1]);
        auto it = out.rows.find(key);
        if (it == out.rows.end()) {
            out.order.push_back(key);
            it = out.rows.emplace(key, std::vector<CurvePoint>{}).first;
        }
        for (const CurvePoint& p : it->second)
            if (p.t == t)
                throw std::invalid_argument(
                    "line " + std::to_string(line_no) + ": duplicate time point (" + f[0] +
                    ", " + f[1] + ", t=" + f[2] + "), first seen on line " +
                    std::to_string(p.line));
        it->second.push_back({t, x, line_no});
    }
    return out;
}

inline FunctionalSample curve_from_points(const std::pair<std::string, std::string>& key,
                                          std::vector<CurvePoint>& pts) {
    std::sort(pts.begin(), pts.end(),
              [](const CurvePoint& a, const CurvePoint& b) { return a.t < b.t; });
    FunctionalSample s;
    s.subject_id = key.first;
    s.visit_id = key.second;
    s.t.resize(static_cast<Eigen::Index>(pts.size()));
    s.x.resize(static_cast<Eigen::Index>(pts.size()));
    for (std::size_t k = 0; k < pts.size(); ++k) {
        s.t[static_cast<Eigen::Index>(k)] = pts[k].t;
        s.x[static_cast<Eigen::Index>(k)] = pts[k].x;
    }
    return s;
}

}  // namespace detail

/// Curves CSV only (subject_id,visit_id,t,x), e.g. for FPCA where no scalar
/// response exists. First-appearance order, t-sorted within each curve.
inline std::vector<FunctionalSample> ingest_curves(std::istream& curves) {
    detail::CurveRows cr = detail::read_curve_rows(curves);
    std::vector<FunctionalSample> out;
    out.reserve(cr.order.size());
    for (const auto& key : cr.order) {
        out.push_back(detail::curve_from_points(key, cr.rows.at(key)));
        out.back().validate();
    }
    return out;
}

/// Curves CSV (subject_id,visit_id,t,x) + responses CSV (subject_id,visit_id,y)
/// joined into a Dataset. Subjects and visits keep first-appearance order;
/// points are sorted by t within each visit.
inline Dataset ingest_dataset(std::istream& curves, std::istream& responses,
                              Interval domain = {0.0, 1.0}) {
    detail::CurveRows cr = detail::read_curve_rows(curves);
    auto& curve_rows = cr.rows;
    auto& curve_order = cr.order;

    std::string line;
    int line_no = 0;

    std::map<std::pair<std::string, std::string>, double> y_rows;
    std::vector<std::pair<std::string, std::string>> y_order;
    line_no = 0;
    if (!std::getline(responses, line)) throw std::invalid_argument("responses CSV is empty");
    ++line_no;
    if (detail::split_csv_line(line) != std::vector<std::string>{"subject_id", "visit_id", "y"})
        throw std::invalid_argument("responses CSV must start with header subject_id,visit_id,y");
    while (std::getline(responses, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto f = detail::split_csv_line(line);
        if (f.size() != 3)
            throw std::invalid_argument("line " + std::to_string(line_no) +
                                        ": expected 3 response columns, got " +
                                        std::to_string(f.size()));
        const double y = detail::parse_number(f[2], "y", line_no);
        const auto key = std::make_pair(f[0], f[1]);
        if (y_rows.count(key))
            throw std::invalid_argument("line " + std::to_string(line_no) +
                                        ": duplicate response for (" + f[0] + ", " + f[1] + ")");
        y_rows.emplace(key, y);
        y_order.push_back(key);
    }

    for (const auto& key : y_order)
        if (!curve_rows.count(key))
            throw std::invalid_argument("response without matching curve: (" + key.first +
                                        ", " + key.second + ")");
    for (const auto& key : curve_order)
        if (!y_rows.count(key))
            throw std::invalid_argument("curve without matching response: (" + key.first +
                                        ", " + key.second + ")");

    Dataset d;
    d.domain = domain;
    std::map<std::string, std::size_t> subject_index;
    for (const auto& key : curve_order) {
        auto it = subject_index.find(key.first);
        if (it == subject_index.end()) {
            it = subject_index.emplace(key.first, d.subjects.size()).first;
            Subject s;
            s.subject_id = key.first;
            d.subjects.push_back(std::move(s));
        }
        Visit v;
        v.y = y_rows.at(key);
        v.curve = detail::curve_from_points(key, curve_rows.at(key));
        d.subjects[it->second].visits.push_back(std::move(v));
    }
    d.validate();
    return d;
}

inline std::vector<FunctionalSample> ingest_curves_file(const std::filesystem::path& curves_csv) {
    std::ifstream c(curves_csv);
    if (!c) throw std::runtime_error("cannot open curves CSV: " + curves_csv.string());
    return ingest_curves(c);
}

inline Dataset ingest_dataset_files(const std::filesystem::path& curves_csv,
                                    const std::filesystem::path& responses_csv,
                                    Interval domain = {0.0, 1.0}) {
    std::ifstream c(curves_csv);
    if (!c) throw std::runtime_error("cannot open curves CSV: " + curves_csv.string());
    std::ifstream r(responses_csv);
    if (!r) throw std::runtime_error("cannot open responses CSV: " + responses_csv.string());
    return ingest_dataset(c, r, domain);
}

// ---------------------------------------------------------------------------
// CSV emitters (strings; callers pair them with write_text_atomic)
// ---------------------------------------------------------------------------

inline std::string beta_band_csv(const PointwiseBand& band) {
    std::string s = "t,center,lower,upper\n";
    for (Eigen::Index i = 0; i < band.grid.size(); ++i)
        s += detail::fmt(band.grid[i]) + "," + detail::fmt(band.center[i]) + "," +
             detail::fmt(band.lower[i]) + "," + detail::fmt(band.upper[i]) + "\n";
    return s;
}

inline std::string individual_slopes_csv(const std::vector<std::string>& subject_ids,
                                         const Eigen::VectorXd& grid,
                                         const SlopeCurves& curves) {
    if (subject_ids.size() != curves.beta_i.size())
        throw std::invalid_argument("subject id list does not match slope curves");
    std::string s = "subject_id,t,beta_i\n";
    for (std::size_t i = 0; i < subject_ids.size(); ++i)
        for (Eigen::Index k = 0; k < grid.size(); ++k)
            s += subject_ids[i] + "," + detail::fmt(grid[k]) + "," +
                 detail::fmt(curves.beta_i[i][k]) + "\n";
    return s;
}

inline std::string gamma_surface_csv(const CovSurface& surf) {
    std::string s = "s,t,gamma\n";
    for (Eigen::Index a = 0; a < surf.grid.size(); ++a)
        for (Eigen::Index b = 0; b < surf.grid.size(); ++b)
            s += detail::fmt(surf.grid[a]) + "," + detail::fmt(surf.grid[b]) + "," +
                 detail::fmt(surf.values(a, b)) + "\n";
    return s;
}

inline std::string gcv_surface_csv(const GcvSurface& surf) {
    std::string s = "lambda_beta,lambda_b,gcv,df,converged\n";
    for (const GcvPoint& pt : surf.points)
        s += detail::fmt(pt.lambdas.beta) + "," + detail::fmt(pt.lambdas.b) + "," +
             detail::fmt(pt.gcv) + "," + detail::fmt(pt.df) + "," +
             (pt.converged ? "1" : "0") + "\n";
    return s;
}

/// One table row in the report column order:
/// sigma_e, sigma_eps, n, m, bias, std, rmse, rmise_beta, rmise_beta_i.
inline std::string study_report_csv(const StudyReport& rep) {
    std::string s = "sigma_e,sigma_eps,n,m,bias,std,rmse,rmise_beta,rmise_beta_i\n";
    s += detail::fmt(rep.scenario.sigma_e) + "," + detail::fmt(rep.scenario.sigma_eps) + "," +
         std::to_string(rep.scenario.n) + "," + std::to_string(rep.scenario.m) + "," +
         detail::fmt(rep.intercept_bias) + "," + detail::fmt(rep.intercept_std) + "," +
         detail::fmt(rep.intercept_rmse) + "," + detail::fmt(rep.rmise_beta_mean) + "," +
         detail::fmt(rep.rmise_beta_i_mean) + "\n";
    return s;
}

inline std::string pointwise_curves_csv(const StudyReport& rep) {
    std::string s = "t,mean,bias,std,rmse\n";
    for (Eigen::Index k = 0; k < rep.curve_grid.size(); ++k)
        s += detail::fmt(rep.curve_grid[k]) + "," + detail::fmt(rep.pointwise_mean[k]) + "," +
             detail::fmt(rep.pointwise_bias[k]) + "," + detail::fmt(rep.pointwise_std[k]) +
             "," + detail::fmt(rep.pointwise_rmse[k]) + "\n";
    return s;
}

inline nlohmann::json study_report_to_json(const StudyReport& rep) {
    nlohmann::json j;
    j["schema_version"] = kSchemaVersion;
    j["scenario"] = {
        {"case", rep.scenario.slope_case == Scenario::Case::Poly ? "poly" : "fourier"},
        {"n", rep.scenario.n},
        {"m", rep.scenario.m},
        {"sigma_e", rep.scenario.sigma_e},
        {"sigma_eps", rep.scenario.sigma_eps},
        {"n_grid", rep.scenario.n_grid},
        {"seed", rep.scenario.seed}};
    j["replicates"] = rep.replicates;
    j["failures"] = rep.failures;
    j["rng_algorithm"] = rep.rng_algorithm;
    j["intercept"] = {{"bias", rep.intercept_bias},
                      {"std", rep.intercept_std},
                      {"rmse", rep.intercept_rmse}};
    j["rmise_beta"] = {{"mean", rep.rmise_beta_mean}, {"median", rep.rmise_beta_median}};
    j["rmise_beta_i"] = {{"mean", rep.rmise_beta_i_mean},
                         {"median", rep.rmise_beta_i_median}};
    j["ci_coverage"] = rep.ci_coverage;
    j["band_coverage"] = rep.band_coverage;
    return j;
}

inline nlohmann::json fpca_model_to_json(const FpcaModel& model) {
    nlohmann::json j;
    j["schema_version"] = kSchemaVersion;
    j["grid"] = detail::vector_to_json(model.grid);
    j["mean"] = detail::vector_to_json(model.mean);
    j["eigenvalues"] = detail::vector_to_json(model.eigenvalues);
    j["eigenfunctions"] = detail::matrix_to_json(model.eigenfunctions);
    j["noise_var"] = model.noise_var;
    j["pve"] = detail::vector_to_json(model.pve);
    return j;
}

inline std::string curves_csv(const std::vector<FunctionalSample>& curves) {
    std::string s = "subject_id,visit_id,t,x\n";
    for (const auto& c : curves)
        for (Eigen::Index k = 0; k < c.t.size(); ++k)
            s += c.subject_id + "," + c.visit_id + "," + detail::fmt(c.t[k]) + "," +
                 detail::fmt(c.x[k]) + "\n";
    return s;
}

}  // namespace flmm
