#include "sae/evalsim.hpp"

#include "sae/gibbs.hpp"
#include "sae/mquantile.hpp"
#include "sae/reblup.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <future>

namespace sae {

const std::vector<std::string> kSimMethods = {"dg", "nm", "sr", "mq"};

ErrorLaw parse_error_law(const std::string& name) {
  if (name == "none" || name == "normal") return ErrorLaw::normal;
  if (name == "mixture") return ErrorLaw::mixture;
  if (name == "t4") return ErrorLaw::t4;
  throw ValidationError("unknown error law '" + name + "' (expected none, mixture, or t4)");
}

std::string error_law_name(ErrorLaw law) {
  switch (law) {
    case ErrorLaw::normal: return "none";
    case ErrorLaw::mixture: return "mixture";
    case ErrorLaw::t4: return "t4";
  }
  return "?";
}

Eigen::MatrixXd sim_covariates(const SimScenario& sc) {
  RngStream rng(sc.seed, 0);
  Eigen::MatrixXd x(sc.m, sc.N);
  for (int i = 0; i < sc.m; ++i)
    for (long long j = 0; j < sc.N; ++j) x(i, j) = rng.normal(1.0, 1.0);
  return x;
}

Population generate_population(const SimScenario& sc, const Eigen::MatrixXd& x, RngStream& rng) {
  if (x.rows() != sc.m || x.cols() != sc.N)
    throw ValidationError("generate_population: covariate array does not match the scenario");
  Population pop;
  pop.x = x;
  pop.ystar.resize(sc.m, sc.N);
  pop.theta.resize(sc.m);
  pop.ybar.resize(sc.m);
  pop.xbar = x.rowwise().mean();
  for (int i = 0; i < sc.m; ++i) {
    double v = rng.normal(0.0, sc.sigma_v2);
    for (long long j = 0; j < sc.N; ++j) {
      double e;
      switch (sc.law) {
        case ErrorLaw::normal: e = rng.normal(0.0, 1.0); break;
        case ErrorLaw::mixture:
          e = rng.bernoulli(0.9) ? rng.normal(0.0, 1.0) : rng.normal(0.0, 25.0);
          break;
        case ErrorLaw::t4: e = rng.student_t(4.0); break;
        default: e = 0.0;
      }
      pop.ystar(i, j) = sc.beta0 + sc.beta1 * x(i, j) + v + e;
    }
    pop.theta(i) = sc.beta0 + sc.beta1 * pop.xbar(i) + v;
    pop.ybar(i) = pop.ystar.row(i).mean();
  }
  return pop;
}

SurveyDataset draw_srs(const Population& pop, int n, RngStream& rng) {
  const int m = static_cast<int>(pop.x.rows());
  const long long N = pop.x.cols();
  if (n < 1 || n > N) throw ValidationError("draw_srs: need 1 <= n <= N");
  std::vector<UnitRecord> units;
  std::vector<AreaInfo> areas;
  units.reserve(static_cast<size_t>(m) * n);
  for (int i = 0; i < m; ++i) {
    std::vector<int> idx = rng.sample_without_replacement(static_cast<int>(N), n);
    for (int j = 0; j < n; ++j) {
      UnitRecord u;
      u.area_id = i + 1;
      u.unit_id = j + 1;
      u.y = pop.ystar(i, idx[j]);
      u.x = Eigen::Vector2d(1.0, pop.x(i, idx[j]));
      units.push_back(std::move(u));
    }
    AreaInfo a;
    a.area_id = i + 1;
    a.N = N;
    a.xbar = Eigen::Vector2d(1.0, pop.xbar(i));
    areas.push_back(std::move(a));
  }
  return SurveyDataset(std::move(units), std::move(areas));
}

namespace {

MethodEstimate hb_estimate(const SurveyDataset& data, RngStream& rng, HbModel model) {
  GibbsConfig cfg;
  cfg.iterations = 6000;  // reduced in-study budget
  cfg.burn_in = 1000;
  cfg.chains = 2;
  cfg.seed = rng.next_u64();
  HbRunResult run = run_chain(data, model, cfg);
  PosteriorSummary s = summarize(run, {0.90, 0.95});
  MethodEstimate e;
  const int m = data.m();
  e.estimate.resize(m);
  e.uncertainty.resize(m);
  e.lo90.resize(m);
  e.hi90.resize(m);
  e.lo95.resize(m);
  e.hi95.resize(m);
  for (int i = 0; i < m; ++i) {
    e.estimate(i) = s.areas[i].mean;
    e.uncertainty(i) = s.areas[i].sd * s.areas[i].sd;
    e.lo90(i) = s.areas[i].intervals[0].first;
    e.hi90(i) = s.areas[i].intervals[0].second;
    e.lo95(i) = s.areas[i].intervals[1].first;
    e.hi95(i) = s.areas[i].intervals[1].second;
  }
  return e;
}

MethodEstimate wald_intervals(Eigen::VectorXd est, Eigen::VectorXd mse) {
  MethodEstimate e;
  Eigen::VectorXd rmse = mse.array().max(0.0).sqrt();
  e.lo90 = est - 1.645 * rmse;
  e.hi90 = est + 1.645 * rmse;
  e.lo95 = est - 1.96 * rmse;
  e.hi95 = est + 1.96 * rmse;
  e.estimate = std::move(est);
  e.uncertainty = std::move(mse);
  return e;
}

}  // namespace

MethodRunner default_method_runner(const std::string& method) {
  if (method == "dg")
    return [](const SurveyDataset& d, RngStream& r) { return hb_estimate(d, r, HbModel::dg); };
  if (method == "nm")
    return [](const SurveyDataset& d, RngStream& r) { return hb_estimate(d, r, HbModel::nm); };
  if (method == "sr")
    return [](const SurveyDataset& d, RngStream& r) {
      REBLUPFit fit = fit_reblup(d, HuberPsi(1.345));
      if (!fit.converged) throw ConvergenceError("reblup fit did not converge");
      Eigen::VectorXd mse = bootstrap_mse(fit, d, 100, r);
      return wald_intervals(fit.theta, std::move(mse));
    };
  if (method == "mq")
    return [](const SurveyDataset& d, RngStream&) {
      MQResult r = run_mq(d);
      return wald_intervals(r.areas.estimates, r.areas.mse);
    };
  throw ValidationError("unknown method '" + method + "' (expected dg, nm, sr, or mq)");
}

namespace {

struct ReplicateResult {
  Eigen::VectorXd theta;
  double theta_ybar_gap = 0.0;
  std::vector<MethodEstimate> per_method;  // aligned with the requested list
};

}  // namespace

SimMetrics run_study(const SimScenario& sc, const std::vector<std::string>& methods, int jobs,
                     const std::map<std::string, MethodRunner>& overrides) {
  if (sc.S < 1) throw ValidationError("run_study: need S >= 1");
  if (sc.n > sc.N) throw ValidationError("run_study: need n <= N");
  std::vector<MethodRunner> runners;
  std::vector<std::uint64_t> stream_index;
  for (const auto& name : methods) {
    auto pos = std::find(kSimMethods.begin(), kSimMethods.end(), name);
    if (pos == kSimMethods.end())
      throw ValidationError("unknown method '" + name + "' (expected dg, nm, sr, or mq)");
    auto ov = overrides.find(name);
    runners.push_back(ov != overrides.end() ? ov->second : default_method_runner(name));
    stream_index.push_back(static_cast<std::uint64_t>(pos - kSimMethods.begin()));
  }

  const Eigen::MatrixXd x = sim_covariates(sc);
  std::vector<ReplicateResult> results(sc.S);

  auto run_replicate = [&](int s) {
    RngStream rep(sc.seed, static_cast<std::uint64_t>(1 + s));
    Population pop = generate_population(sc, x, rep);
    SurveyDataset data = draw_srs(pop, sc.n, rep);
    ReplicateResult& out = results[s];
    out.theta = pop.theta;
    out.theta_ybar_gap = (pop.theta - pop.ybar).cwiseAbs().maxCoeff();
    out.per_method.resize(methods.size());
    for (size_t k = 0; k < methods.size(); ++k) {
      RngStream mrng = rep.child(stream_index[k]);
      try {
        out.per_method[k] = runners[k](data, mrng);
      } catch (const std::exception& ex) {
        out.per_method[k].ok = false;
        out.per_method[k].error = ex.what();
      }
    }
  };

  jobs = std::max(jobs, 1);
  if (jobs == 1) {
    for (int s = 0; s < sc.S; ++s) run_replicate(s);
  } else {
    std::atomic<int> next{0};
    std::vector<std::future<void>> futs;
    for (int w = 0; w < jobs; ++w)
      futs.push_back(std::async(std::launch::async, [&]() {
        for (int s = next.fetch_add(1); s < sc.S; s = next.fetch_add(1)) run_replicate(s);
      }));
    for (auto& f : futs) f.get();
  }

  SimMetrics out;
  out.scenario = sc;
  out.methods = methods;
  for (const auto& r : results)
    out.max_theta_ybar_gap = std::max(out.max_theta_ybar_gap, r.theta_ybar_gap);

  // ordered reduction over replicate index: bit-identical for any `jobs`
  for (size_t k = 0; k < methods.size(); ++k) {
    std::vector<MetricRow> rows(sc.m);
    int used = 0;
    std::vector<double> sum_err(sc.m, 0.0), sum_sq(sc.m, 0.0), sum_unc(sc.m, 0.0);
    std::vector<double> hits90(sc.m, 0.0), hits95(sc.m, 0.0), len90(sc.m, 0.0), len95(sc.m, 0.0);
    for (const auto& r : results) {
      const MethodEstimate& e = r.per_method[k];
      if (!e.ok) continue;
      ++used;
      for (int i = 0; i < sc.m; ++i) {
        double err = e.estimate(i) - r.theta(i);
        sum_err[i] += err;
        sum_sq[i] += err * err;
        sum_unc[i] += e.uncertainty(i);
        hits90[i] += (e.lo90(i) <= r.theta(i) && r.theta(i) <= e.hi90(i)) ? 1.0 : 0.0;
        hits95[i] += (e.lo95(i) <= r.theta(i) && r.theta(i) <= e.hi95(i)) ? 1.0 : 0.0;
        len90[i] += e.hi90(i) - e.lo90(i);
        len95[i] += e.hi95(i) - e.lo95(i);
      }
    }
    out.failures[methods[k]] = sc.S - used;
    if (used == 0) throw ConvergenceError("method '" + methods[k] + "' failed in every replicate");
    for (int i = 0; i < sc.m; ++i) {
      MetricRow& row = rows[i];
      row.eB = sum_err[i] / used;
      row.eM = sum_sq[i] / used;
      double mean_unc = sum_unc[i] / used;
      // RE undefined when eM is exactly 0 (only a truth oracle can do that)
      row.RE = row.eM > 0.0 ? (mean_unc - row.eM) / row.eM : 0.0;
      row.coverage90 = hits90[i] / used;
      row.coverage95 = hits95[i] / used;
      row.avg_len90 = len90[i] / used;
      row.avg_len95 = len95[i] / used;
    }
    out.by_method[methods[k]] = std::move(rows);
  }
  return out;
}

void write_metrics_csv(const SimMetrics& metrics, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw ValidationError("cannot open " + path + " for writing");
  f << "# sae-csv v1\n";
  f << "area,method,metric,value\n";
  const char* names[7] = {"eB", "eM", "RE", "coverage90", "coverage95", "avg_len90", "avg_len95"};
  for (const auto& method : metrics.methods) {
    const auto& rows = metrics.by_method.at(method);
    for (size_t i = 0; i < rows.size(); ++i) {
      const double vals[7] = {rows[i].eB,         rows[i].eM,         rows[i].RE,
                              rows[i].coverage90, rows[i].coverage95, rows[i].avg_len90,
                              rows[i].avg_len95};
      for (int kk = 0; kk < 7; ++kk)
        f << (i + 1) << ',' << method << ',' << names[kk] << ',' << io::fmt_double(vals[kk])
          << '\n';
    }
  }
  if (!f.good()) throw ValidationError("write failed for " + path);
}

void write_summary_json(const SimMetrics& metrics, const std::string& path) {
  nlohmann::json j;
  j["schema"] = "sae-summary v1";
  j["scenario"] = {{"m", metrics.scenario.m},
                   {"N", metrics.scenario.N},
                   {"n", metrics.scenario.n},
                   {"beta", {metrics.scenario.beta0, metrics.scenario.beta1}},
                   {"sigma_v2", metrics.scenario.sigma_v2},
                   {"error_law", error_law_name(metrics.scenario.law)},
                   {"S", metrics.scenario.S},
                   {"seed", metrics.scenario.seed}};
  j["methods"] = metrics.methods;
  j["failures"] = metrics.failures;
  j["max_theta_ybar_gap"] = metrics.max_theta_ybar_gap;
  for (const auto& method : metrics.methods) {
    const auto& rows = metrics.by_method.at(method);
    double eB = 0, eM = 0, RE = 0, c90 = 0, c95 = 0, l90 = 0, l95 = 0;
    for (const auto& r : rows) {
      eB += r.eB;
      eM += r.eM;
      RE += r.RE;
      c90 += r.coverage90;
      c95 += r.coverage95;
      l90 += r.avg_len90;
      l95 += r.avg_len95;
    }
    double m = static_cast<double>(rows.size());
    j["area_means"][method] = {{"eB", eB / m},          {"eM", eM / m},
                               {"RE", RE / m},          {"coverage90", c90 / m},
                               {"coverage95", c95 / m}, {"avg_len90", l90 / m},
                               {"avg_len95", l95 / m}};
  }
  std::ofstream f(path);
  if (!f) throw ValidationError("cannot open " + path + " for writing");
  f << j.dump(2) << '\n';
  if (!f.good()) throw ValidationError("write failed for " + path);
}

}  // namespace sae
