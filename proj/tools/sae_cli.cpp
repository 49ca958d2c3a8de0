#include "sae/dataset.hpp"
#include "sae/evalsim.hpp"
#include "sae/gibbs.hpp"
#include "sae/mquantile.hpp"
#include "sae/reblup.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr const char* kCsvSchema = "# sae-csv v1";

std::string g_out_dir;  // for error.json placement once known

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string sha256_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw sae::ValidationError("cannot read " + path);
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 16];
  while (f.good()) {
    f.read(buf, sizeof buf);
    EVP_DigestUpdate(ctx, buf, static_cast<size_t>(f.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out = "sha256:";
  for (unsigned i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::string utc_now() {
  std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

void write_json_file(const json& j, const fs::path& path) {
  std::ofstream f(path);
  if (!f) throw sae::ValidationError("cannot open " + path.string() + " for writing");
  f << j.dump(2) << '\n';
  if (!f.good()) throw sae::ValidationError("write failed for " + path.string());
}

json base_manifest(const std::string& command, const json& config, std::uint64_t seed, int jobs) {
  json m;
  m["schema"] = "sae-manifest v1";
  m["command"] = command;
  m["config"] = config;
  m["seed"] = seed;
  m["jobs"] = jobs;
  m["started_utc"] = utc_now();
  m["versions"] = {{"sae", kVersion},
                   {"compiler", __VERSION__},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                 std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)}};
  return m;
}

// SAE_SEED wins over --seed
std::uint64_t effective_seed(std::uint64_t flag_seed) {
  const char* env = std::getenv("SAE_SEED");
  if (env == nullptr || *env == '\0') return flag_seed;
  char* end = nullptr;
  unsigned long long v = std::strtoull(env, &end, 10);
  if (end == env || *end != '\0')
    throw sae::ValidationError("SAE_SEED must be a decimal unsigned integer, got '" +
                               std::string(env) + "'");
  return static_cast<std::uint64_t>(v);
}

void write_estimates_csv(const fs::path& path, const std::vector<int>& area_ids,
                         const Eigen::VectorXd& est, const Eigen::VectorXd& sd,
                         const Eigen::VectorXd& lo90, const Eigen::VectorXd& hi90,
                         const Eigen::VectorXd& lo95, const Eigen::VectorXd& hi95) {
  std::ofstream f(path);
  if (!f) throw sae::ValidationError("cannot open " + path.string() + " for writing");
  f << kCsvSchema << "\n";
  f << "area,estimate,sd_or_rmse,ci90_lo,ci90_hi,ci95_lo,ci95_hi\n";
  for (size_t i = 0; i < area_ids.size(); ++i)
    f << area_ids[i] << ',' << sae::io::fmt_double(est(i)) << ',' << sae::io::fmt_double(sd(i))
      << ',' << sae::io::fmt_double(lo90(i)) << ',' << sae::io::fmt_double(hi90(i)) << ','
      << sae::io::fmt_double(lo95(i)) << ',' << sae::io::fmt_double(hi95(i)) << '\n';
  if (!f.good()) throw sae::ValidationError("write failed for " + path.string());
}

struct FitOptions {
  std::string method, units, areas, out = ".", config_file, predictand = "theta";
  int iterations = 25000, burn_in = 5000, thin = 1, chains = 4;
  std::uint64_t seed = 20240801u;
  double rhat_gate = 1.05;
  double c = 1.345;
  int boot = 100;
  double tol = 1e-6;
  int max_iter = 200;
  int jobs = 0;
  bool save_draws = false;
};

void write_hb_draws(const fs::path& path, const sae::HbRunResult& run) {
  std::ofstream f(path);
  if (!f) throw sae::ValidationError("cannot open " + path.string() + " for writing");
  f << kCsvSchema << "\n";
  f << "chain,iter";
  for (int j = 0; j < run.p; ++j) f << ",beta" << j;
  f << ",sigma_v2";
  if (run.model == sae::HbModel::dg)
    f << ",sigma_e2";
  else
    f << ",sigma1_2,sigma2_2,p_e";
  for (int i = 0; i < run.m; ++i) f << ",v_" << run.area_ids[i];
  for (int i = 0; i < run.m; ++i) f << ",theta_" << run.area_ids[i];
  f << '\n';
  for (size_t c = 0; c < run.chains.size(); ++c) {
    const auto& d = run.chains[c];
    for (Eigen::Index t = 0; t < d.beta.rows(); ++t) {
      f << c << ',' << t;
      for (int j = 0; j < run.p; ++j) f << ',' << sae::io::fmt_double(d.beta(t, j));
      f << ',' << sae::io::fmt_double(d.sigma_v2(t));
      if (run.model == sae::HbModel::dg)
        f << ',' << sae::io::fmt_double(d.sigma_e2(t));
      else
        f << ',' << sae::io::fmt_double(d.sigma1_2(t)) << ','
          << sae::io::fmt_double(d.sigma2_2(t)) << ',' << sae::io::fmt_double(d.p_e(t));
      for (int i = 0; i < run.m; ++i) f << ',' << sae::io::fmt_double(d.v(t, i));
      for (int i = 0; i < run.m; ++i) f << ',' << sae::io::fmt_double(d.theta(t, i));
      f << '\n';
    }
  }
  if (!f.good()) throw sae::ValidationError("write failed for " + path.string());
}

int run_fit(const FitOptions& opt) {
  auto t0 = Clock::now();
  sae::SurveyDataset data = sae::load_dataset(opt.units, opt.areas);
  double t_load = seconds_since(t0);

  if (opt.predictand != "theta")
    throw sae::ValidationError(
        "fit supports predictand 'theta' only (the finite-population mean needs unit-level "
        "population covariates, which the area file does not carry)");

  fs::create_directories(opt.out);
  g_out_dir = opt.out;
  std::vector<int> area_ids;
  for (const auto& a : data.areas()) area_ids.push_back(a.area_id);

  json params;
  params["schema"] = "sae-params v1";
  params["method"] = opt.method;
  auto t1 = Clock::now();

  if (opt.method == "dg-hb" || opt.method == "nm-hb") {
    sae::GibbsConfig cfg;
    cfg.iterations = opt.iterations;
    cfg.burn_in = opt.burn_in;
    cfg.thin = opt.thin;
    cfg.chains = opt.chains;
    cfg.seed = opt.seed;
    cfg.rhat_gate = opt.rhat_gate;
    sae::HbModel model = opt.method == "dg-hb" ? sae::HbModel::dg : sae::HbModel::nm;
    sae::HbRunResult run = sae::run_chain(data, model, cfg);
    sae::PosteriorSummary s = sae::summarize(run, {0.90, 0.95});
    double t_fit = seconds_since(t1);

    for (const auto& [name, ps] : s.params)
      params["params"][name] = {{"mean", ps.mean}, {"median", ps.median}};
    for (const auto& [name, dgn] : s.diagnostics)
      params["diagnostics"][name] = {{"rhat", dgn.rhat}, {"ess", dgn.ess}};
    params["max_rhat"] = s.max_rhat;
    params["min_ess"] = s.min_ess;
    params["converged"] = s.converged;

    Eigen::VectorXd est(data.m()), sd(data.m()), lo90(data.m()), hi90(data.m()), lo95(data.m()),
        hi95(data.m());
    for (int i = 0; i < data.m(); ++i) {
      est(i) = s.areas[i].mean;
      sd(i) = s.areas[i].sd;
      lo90(i) = s.areas[i].intervals[0].first;
      hi90(i) = s.areas[i].intervals[0].second;
      lo95(i) = s.areas[i].intervals[1].first;
      hi95(i) = s.areas[i].intervals[1].second;
    }
    write_estimates_csv(fs::path(opt.out) / "estimates.csv", area_ids, est, sd, lo90, hi90, lo95,
                        hi95);

    if (model == sae::HbModel::nm) {
      // posterior-mean fit for standardized residuals (Figure-1 style data)
      Eigen::VectorXd beta_hat = Eigen::VectorXd::Zero(data.p());
      Eigen::VectorXd v_hat = Eigen::VectorXd::Zero(data.m());
      long long tot = 0;
      for (const auto& ch : run.chains) {
        beta_hat += ch.beta.colwise().sum().transpose();
        v_hat += ch.v.colwise().sum().transpose();
        tot += ch.beta.rows();
      }
      beta_hat /= static_cast<double>(tot);
      v_hat /= static_cast<double>(tot);
      double s1 = std::sqrt(s.params.at("sigma1_2").mean);
      Eigen::VectorXd r = sae::residual(data, beta_hat, v_hat);

      std::ofstream f(fs::path(opt.out) / "outliers.csv");
      if (!f) throw sae::ValidationError("cannot open outliers.csv for writing");
      f << kCsvSchema << "\n";
      f << "area_id,unit_id,standardized_residual,posterior_outlier_prob\n";
      for (int j = 0; j < data.n(); ++j) {
        const auto& u = data.units()[j];
        f << u.area_id << ',' << u.unit_id << ',' << sae::io::fmt_double(r(j) / s1) << ','
          << sae::io::fmt_double(s.outlier_prob[j]) << '\n';
      }
      if (!f.good()) throw sae::ValidationError("write failed for outliers.csv");
    }
    if (opt.save_draws) write_hb_draws(fs::path(opt.out) / "draws.csv", run);

    if (!s.converged)
      throw sae::ConvergenceError("chains failed the R-hat gate: max R-hat " +
                                  std::to_string(s.max_rhat) + " >= " +
                                  std::to_string(cfg.rhat_gate));

    json manifest = base_manifest("fit", json{{"method", opt.method},
                                              {"units", opt.units},
                                              {"areas", opt.areas},
                                              {"out", opt.out},
                                              {"iterations", opt.iterations},
                                              {"burn_in", opt.burn_in},
                                              {"thin", opt.thin},
                                              {"chains", opt.chains},
                                              {"rhat_gate", opt.rhat_gate},
                                              {"predictand", opt.predictand},
                                              {"save_draws", opt.save_draws}},
                                  opt.seed, opt.jobs);
    manifest["inputs"] = {{opt.units, sha256_file(opt.units)}, {opt.areas, sha256_file(opt.areas)}};
    manifest["timings_sec"] = {{"load", t_load}, {"fit", t_fit}, {"write", seconds_since(t1) - t_fit}};
    write_json_file(params, fs::path(opt.out) / "params.json");
    write_json_file(manifest, fs::path(opt.out) / "manifest.json");
    std::cout << opt.method << ": " << data.m() << " areas, max R-hat "
              << json(s.max_rhat).dump() << ", outputs in " << opt.out << "\n";
    return 0;
  }

  Eigen::VectorXd est, mse;
  if (opt.method == "reblup") {
    sae::HuberPsi psi(opt.c);
    sae::REBLUPFit fit = sae::fit_reblup(data, psi, opt.tol, opt.max_iter);
    if (!fit.converged)
      throw sae::ConvergenceError("reblup did not converge in " +
                                  std::to_string(opt.max_iter) + " iterations");
    mse = sae::bootstrap_mse(fit, data, opt.boot, sae::RngStream(opt.seed, 0), opt.jobs);
    est = fit.theta;
    params["params"] = {{"sigma_v2", fit.delta_M.sigma_v2},
                        {"sigma_e2", fit.delta_M.sigma_e2},
                        {"c", psi.c},
                        {"K", psi.K},
                        {"bootstrap_B", opt.boot},
                        {"iterations_used", fit.iterations_used}};
    for (int j = 0; j < data.p(); ++j) params["params"]["beta" + std::to_string(j)] = fit.beta_M(j);
    params["converged"] = fit.converged;
  } else if (opt.method == "mq") {
    sae::MQResult r = sae::run_mq(data, opt.c, std::max(opt.jobs, 1));
    est = r.areas.estimates;
    mse = r.areas.mse;
    params["params"] = {{"c", r.grid.c}, {"grid_points", r.grid.q_grid.size()}};
    for (int i = 0; i < data.m(); ++i)
      params["params"]["qbar"][std::to_string(area_ids[i])] = r.areas.area_qbar(i);
    params["converged"] = true;
  } else {
    throw sae::ValidationError("unknown method '" + opt.method +
                               "' (expected dg-hb, nm-hb, reblup, or mq)");
  }
  double t_fit = seconds_since(t1);

  Eigen::VectorXd sd = mse.array().max(0.0).sqrt();
  write_estimates_csv(fs::path(opt.out) / "estimates.csv", area_ids, est, sd, est - 1.645 * sd,
                      est + 1.645 * sd, est - 1.96 * sd, est + 1.96 * sd);

  json manifest = base_manifest("fit", json{{"method", opt.method},
                                            {"units", opt.units},
                                            {"areas", opt.areas},
                                            {"out", opt.out},
                                            {"c", opt.c},
                                            {"boot", opt.boot},
                                            {"tol", opt.tol},
                                            {"max_iter", opt.max_iter},
                                            {"predictand", opt.predictand}},
                                opt.seed, opt.jobs);
  manifest["inputs"] = {{opt.units, sha256_file(opt.units)}, {opt.areas, sha256_file(opt.areas)}};
  manifest["timings_sec"] = {{"load", t_load}, {"fit", t_fit}, {"write", seconds_since(t1) - t_fit}};
  write_json_file(params, fs::path(opt.out) / "params.json");
  write_json_file(manifest, fs::path(opt.out) / "manifest.json");
  std::cout << opt.method << ": " << data.m() << " areas, outputs in " << opt.out << "\n";
  return 0;
}

struct SimulateOptions {
  std::string scenario, methods = "dg,nm,sr,mq", out = ".", config_file;
  int S = 50;
  std::uint64_t seed = 20240801u;
  int jobs = 0;
  int m = 40, n = 4;
  long long N = 200;
};

int run_simulate(const SimulateOptions& opt) {
  sae::SimScenario sc;
  sc.law = sae::parse_error_law(opt.scenario);
  sc.S = opt.S;
  sc.seed = opt.seed;
  sc.m = opt.m;
  sc.N = opt.N;
  sc.n = opt.n;

  std::vector<std::string> methods;
  std::stringstream ss(opt.methods);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!tok.empty()) methods.push_back(tok);
  if (methods.empty()) throw sae::ValidationError("no methods requested");

  fs::create_directories(opt.out);
  g_out_dir = opt.out;
  auto t1 = Clock::now();
  sae::SimMetrics mt = sae::run_study(sc, methods, std::max(opt.jobs, 1));
  double t_run = seconds_since(t1);

  sae::write_metrics_csv(mt, (fs::path(opt.out) / "metrics.csv").string());
  sae::write_summary_json(mt, (fs::path(opt.out) / "summary.json").string());

  json manifest = base_manifest("simulate", json{{"scenario", opt.scenario},
                                                 {"S", opt.S},
                                                 {"methods", opt.methods},
                                                 {"out", opt.out},
                                                 {"m", sc.m},
                                                 {"N", sc.N},
                                                 {"n", sc.n}},
                                opt.seed, opt.jobs);
  manifest["inputs"] = json::object();
  manifest["timings_sec"] = {{"run", t_run}};
  write_json_file(manifest, fs::path(opt.out) / "manifest.json");

  for (const auto& [mname, fails] : mt.failures)
    std::cout << mname << ": " << (sc.S - fails) << "/" << sc.S << " replicates ok\n";
  std::cout << "max |theta - ybar| gap: " << mt.max_theta_ybar_gap << "\n";
  for (const auto& [mname, fails] : mt.failures)
    if (fails * 10 > sc.S)
      throw sae::ConvergenceError("method '" + mname + "' failed in " + std::to_string(fails) +
                                  " of " + std::to_string(sc.S) + " replicates");
  return 0;
}

struct ReportOptions {
  std::vector<std::string> inputs;
  std::string format = "csv", out = ".";
};

struct EstimateRow {
  double estimate, sd, lo90, hi90, lo95, hi95;
};

std::map<int, EstimateRow> read_estimates_csv(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw sae::ValidationError("cannot read " + path.string());
  std::string line;
  if (!std::getline(f, line)) throw sae::ValidationError(path.string() + ": empty file");
  if (line != kCsvSchema)
    throw sae::ValidationError(path.string() + ": schema-version mismatch (got '" + line + "')");
  if (!std::getline(f, line) || line.rfind("area,estimate,sd_or_rmse", 0) != 0)
    throw sae::ValidationError(path.string() + ": unexpected header");
  std::map<int, EstimateRow> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string cell;
    std::vector<double> vals;
    int area = 0;
    for (int k = 0; std::getline(ls, cell, ','); ++k) {
      if (k == 0)
        area = std::stoi(cell);
      else
        vals.push_back(std::stod(cell));
    }
    if (vals.size() != 6) throw sae::ValidationError(path.string() + ": ragged row");
    rows[area] = {vals[0], vals[1], vals[2], vals[3], vals[4], vals[5]};
  }
  return rows;
}

int run_report(const ReportOptions& opt) {
  if (opt.inputs.empty()) throw sae::ValidationError("report needs at least one --in directory");
  if (opt.format != "csv" && opt.format != "json")
    throw sae::ValidationError("format must be csv or json");
  fs::create_directories(opt.out);
  g_out_dir = opt.out;

  std::vector<std::string> labels;
  std::vector<std::map<int, EstimateRow>> tables;
  json manifest_inputs = json::object();
  for (const auto& dir : opt.inputs) {
    fs::path mp = fs::path(dir) / "manifest.json";
    std::ifstream mf(mp);
    if (!mf) throw sae::ValidationError("cannot read " + mp.string());
    json mj = json::parse(mf, nullptr, false);
    if (mj.is_discarded() || mj.value("schema", "") != "sae-manifest v1")
      throw sae::ValidationError(mp.string() + ": schema-version mismatch");
    std::string label = mj["config"].value("method", mj.value("command", "run"));
    std::string base = label;
    for (int k = 2; std::find(labels.begin(), labels.end(), label) != labels.end(); ++k)
      label = base + "_" + std::to_string(k);
    labels.push_back(label);
    tables.push_back(read_estimates_csv(fs::path(dir) / "estimates.csv"));
    manifest_inputs[dir] = sha256_file((fs::path(dir) / "estimates.csv").string());
  }

  std::set<int> area_set;
  for (const auto& t : tables)
    for (const auto& [a, _] : t) area_set.insert(a);

  if (opt.format == "csv") {
    std::ofstream f(fs::path(opt.out) / "report.csv");
    if (!f) throw sae::ValidationError("cannot open report.csv for writing");
    f << kCsvSchema << "\narea";
    for (const auto& l : labels) f << ',' << l << "_estimate," << l << "_sd";
    f << '\n';
    for (int a : area_set) {
      f << a;
      for (const auto& t : tables) {
        auto it = t.find(a);
        if (it == t.end())
          f << ",,";
        else
          f << ',' << sae::io::fmt_double(it->second.estimate) << ','
            << sae::io::fmt_double(it->second.sd);
      }
      f << '\n';
    }
    if (!f.good()) throw sae::ValidationError("write failed for report.csv");
  } else {
    json rows = json::array();
    for (int a : area_set) {
      json row;
      row["area"] = a;
      for (size_t k = 0; k < tables.size(); ++k) {
        auto it = tables[k].find(a);
        if (it != tables[k].end())
          row[labels[k]] = {{"estimate", it->second.estimate},
                            {"sd", it->second.sd},
                            {"ci90", {it->second.lo90, it->second.hi90}},
                            {"ci95", {it->second.lo95, it->second.hi95}}};
      }
      rows.push_back(std::move(row));
    }
    json rep;
    rep["schema"] = "sae-report v1";
    rep["columns"] = labels;
    rep["rows"] = std::move(rows);
    write_json_file(rep, fs::path(opt.out) / "report.json");
  }

  json manifest = base_manifest(
      "report", json{{"in", opt.inputs}, {"format", opt.format}, {"out", opt.out}}, 0, 1);
  manifest["inputs"] = manifest_inputs;
  write_json_file(manifest, fs::path(opt.out) / "manifest.json");
  std::cout << "report: " << labels.size() << " inputs, " << area_set.size() << " areas, format "
            << opt.format << ", outputs in " << opt.out << "\n";
  return 0;
}

int fail(int code, const std::string& kind, const std::string& message) {
  json err = {{"schema", "sae-error v1"}, {"kind", kind}, {"message", message},
              {"exit_code", code}};
  std::cerr << err.dump() << "\n";
  if (!g_out_dir.empty()) {
    std::ofstream f(fs::path(g_out_dir) / "error.json");
    if (f) f << err.dump(2) << '\n';
  }
  return code;
}

// pre-parse --config and expand its JSON object into option tokens placed
// BEFORE the explicit flags; TakeLast policy then lets the command line win
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::string cfg_path;
  for (size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size())
      cfg_path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0)
      cfg_path = args[i].substr(9);
  }
  if (cfg_path.empty()) return args;
  std::ifstream f(cfg_path);
  if (!f) throw sae::ValidationError("cannot read config file " + cfg_path);
  json j = json::parse(f, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    throw sae::ValidationError(cfg_path + ": config must be a JSON object");
  std::vector<std::string> out;
  for (const auto& [k, v] : j.items()) {
    if (v.is_boolean()) {
      if (v.get<bool>()) out.push_back("--" + k);
    } else if (v.is_string()) {
      out.push_back("--" + k + "=" + v.get<std::string>());
    } else {
      out.push_back("--" + k + "=" + v.dump());
    }
  }
  out.insert(out.end(), args.begin(), args.end());
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"small-area estimation under the nested error regression model"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  FitOptions fo;
  fo.jobs = std::max(1u, std::thread::hardware_concurrency());
  auto* fit = app.add_subcommand("fit", "fit one method on a survey dataset");
  fit->add_option("--method", fo.method, "dg-hb | nm-hb | reblup | mq")->required();
  fit->add_option("--units", fo.units, "unit-level CSV")->required();
  fit->add_option("--areas", fo.areas, "area-level CSV")->required();
  fit->add_option("--out", fo.out, "output directory");
  fit->add_option("--config", fo.config_file, "JSON config mirroring the flags");
  fit->add_option("--iterations", fo.iterations, "Gibbs iterations per chain");
  fit->add_option("--burn-in", fo.burn_in, "burn-in iterations");
  fit->add_option("--thin", fo.thin, "thinning stride");
  fit->add_option("--chains", fo.chains, "number of chains");
  fit->add_option("--rhat-gate", fo.rhat_gate, "split R-hat convergence gate");
  fit->add_option("--seed", fo.seed, "RNG seed (SAE_SEED env overrides)");
  fit->add_option("--c", fo.c, "Huber tuning constant (reblup, mq)");
  fit->add_option("--boot", fo.boot, "bootstrap replicates (reblup)");
  fit->add_option("--tol", fo.tol, "convergence tolerance (reblup)");
  fit->add_option("--max-iter", fo.max_iter, "max outer iterations (reblup)");
  fit->add_option("--predictand", fo.predictand, "theta | ybar");
  fit->add_option("--jobs", fo.jobs, "worker threads");
  fit->add_flag("--save-draws", fo.save_draws, "write retained draws to draws.csv");

  SimulateOptions so;
  so.jobs = std::max(1u, std::thread::hardware_concurrency());
  auto* sim = app.add_subcommand("simulate", "run the simulation study");
  sim->add_option("--scenario", so.scenario, "none | mixture | t4")->required();
  sim->add_option("--S", so.S, "replicate count");
  sim->add_option("--methods", so.methods, "comma list out of dg,nm,sr,mq");
  sim->add_option("--seed", so.seed, "RNG seed (SAE_SEED env overrides)");
  sim->add_option("--out", so.out, "output directory");
  sim->add_option("--config", so.config_file, "JSON config mirroring the flags");
  sim->add_option("--jobs", so.jobs, "parallel replicates");
  sim->add_option("--m", so.m, "areas");
  sim->add_option("--N", so.N, "population per area");
  sim->add_option("--n", so.n, "sample per area");

  ReportOptions ro;
  auto* rep = app.add_subcommand("report", "merge fit outputs into comparison tables");
  rep->add_option("--in", ro.inputs, "input directories (repeatable)")
      ->required()
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  rep->add_option("--format", ro.format, "csv | json");
  rep->add_option("--out", ro.out, "output directory");

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    // CLI11 parses the reversed token list
    if (!args.empty() && !args[0].empty() && args[0][0] != '-') {
      std::vector<std::string> sub_args(args.begin() + 1, args.end());
      sub_args = expand_config(sub_args);
      args.resize(1);
      args.insert(args.end(), sub_args.begin(), sub_args.end());
    }
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(2, "usage", e.what());
  } catch (const sae::ValidationError& e) {
    return fail(2, "validation", e.what());
  }

  try {
    if (fit->parsed()) {
      fo.seed = effective_seed(fo.seed);
      return run_fit(fo);
    }
    if (sim->parsed()) {
      so.seed = effective_seed(so.seed);
      return run_simulate(so);
    }
    return run_report(ro);
  } catch (const sae::ValidationError& e) {
    return fail(2, "validation", e.what());
  } catch (const sae::ConvergenceError& e) {
    return fail(3, "convergence", e.what());
  } catch (const std::exception& e) {
    return fail(1, "internal", e.what());
  }
}
