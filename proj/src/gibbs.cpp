#include "sae/gibbs.hpp"

#include <Eigen/Cholesky>
#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <future>
#include <numeric>

namespace sae {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Eigen::VectorXd draw_mv_normal(RngStream& rng, const MvNormalParams& par, double lo, double hi) {
  Eigen::LLT<Eigen::MatrixXd> llt(par.precision);
  if (llt.info() != Eigen::Success)
    throw ConvergenceError("conditional precision matrix not positive definite");
  const int p = static_cast<int>(par.mean.size());
  Eigen::VectorXd eps(p);
  for (int attempt = 0; attempt < 100000; ++attempt) {
    for (int j = 0; j < p; ++j) eps(j) = rng.normal(0.0, 1.0);
    Eigen::VectorXd draw = par.mean + llt.matrixU().solve(eps);
    bool inside = true;
    for (int j = 0; j < p; ++j) inside = inside && draw(j) >= lo && draw(j) <= hi;
    if (inside) return draw;
  }
  throw ConvergenceError("beta draw rejection against the support box did not terminate");
}

double unit_var(const NMState& s, int record) {
  return s.z[record] ? s.sigma1_2 : s.sigma2_2;
}

}  // namespace

MvNormalParams dg_beta_conditional(const SurveyDataset& data, const DGState& s) {
  const auto& X = data.X();
  Eigen::VectorXd yv = data.y();
  for (int r = 0; r < data.n(); ++r) yv(r) -= s.v(data.record_area()[r]);
  MvNormalParams par;
  Eigen::MatrixXd XtX = X.transpose() * X;
  par.mean = XtX.llt().solve(X.transpose() * yv);
  par.precision = XtX / s.sigma_e2;
  return par;
}

NormalParams dg_v_conditional(const SurveyDataset& data, const DGState& s, int area_index) {
  const auto& recs = data.area_units()[area_index];
  double sum = 0.0;
  for (int r : recs) sum += data.y()(r) - data.X().row(r).dot(s.beta);
  double prec = static_cast<double>(recs.size()) / s.sigma_e2 + 1.0 / s.sigma_v2;
  NormalParams out;
  out.mean = (sum / s.sigma_e2) / prec;
  out.var = 1.0 / prec;
  return out;
}

IgParams dg_sigma_v2_conditional(const DGState& s) {
  return {0.5 * static_cast<double>(s.v.size()) - 1.0, 0.5 * s.v.squaredNorm()};
}

IgParams dg_sigma_e2_conditional(const SurveyDataset& data, const DGState& s) {
  Eigen::VectorXd r = residual(data, s.beta, s.v);
  return {0.5 * static_cast<double>(data.n()), 0.5 * r.squaredNorm()};
}

MvNormalParams nm_beta_conditional(const SurveyDataset& data, const NMState& s) {
  const int p = data.p();
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(p);
  for (int r = 0; r < data.n(); ++r) {
    double w = 1.0 / unit_var(s, r);
    Eigen::VectorXd x = data.X().row(r).transpose();
    A.noalias() += w * x * x.transpose();
    b.noalias() += w * (data.y()(r) - s.v(data.record_area()[r])) * x;
  }
  MvNormalParams par;
  par.mean = A.llt().solve(b);
  par.precision = A;
  return par;
}

NormalParams nm_v_conditional(const SurveyDataset& data, const NMState& s, int area_index) {
  const auto& recs = data.area_units()[area_index];
  double prec = 1.0 / s.sigma_v2;
  double num = 0.0;
  for (int r : recs) {
    double w = 1.0 / unit_var(s, r);
    prec += w;
    num += w * (data.y()(r) - data.X().row(r).dot(s.beta));
  }
  return {num / prec, 1.0 / prec};
}

IgParams nm_sigma_v2_conditional(const NMState& s) {
  return {0.5 * static_cast<double>(s.v.size()) - 1.0, 0.5 * s.v.squaredNorm()};
}

TigParams nm_sigma1_conditional(const SurveyDataset& data, const NMState& s) {
  Eigen::VectorXd r = residual(data, s.beta, s.v);
  double s1 = 0.0;
  int n1 = 0;
  for (int i = 0; i < data.n(); ++i)
    if (s.z[i]) {
      s1 += r(i) * r(i);
      ++n1;
    }
  return {0.5 * n1 - 1.0, 0.5 * s1, 0.0, s.sigma2_2};
}

TigParams nm_sigma2_conditional(const SurveyDataset& data, const NMState& s) {
  Eigen::VectorXd r = residual(data, s.beta, s.v);
  double s2 = 0.0;
  int n2 = 0;
  for (int i = 0; i < data.n(); ++i)
    if (!s.z[i]) {
      s2 += r(i) * r(i);
      ++n2;
    }
  return {0.5 * n2 + 1.0, 0.5 * s2, s.sigma1_2, kInf};
}

double nm_z1_probability(double resid, double p_e, double sigma1_2, double sigma2_2) {
  if (p_e <= 0.0) return 0.0;
  if (p_e >= 1.0) return 1.0;
  double log_ratio = std::log1p(-p_e) - std::log(p_e) + 0.5 * std::log(sigma1_2 / sigma2_2) +
                     0.5 * resid * resid * (1.0 / sigma1_2 - 1.0 / sigma2_2);
  return 1.0 / (1.0 + std::exp(log_ratio));
}

void dg_gibbs_step(const SurveyDataset& data, DGState& s, RngStream& rng,
                   const SupportBounds& bounds) {
  s.beta = draw_mv_normal(rng, dg_beta_conditional(data, s), bounds.beta_lo, bounds.beta_hi);
  for (int i = 0; i < data.m(); ++i) {
    NormalParams vp = dg_v_conditional(data, s, i);
    s.v(i) = rng.normal(vp.mean, vp.var);
  }
  IgParams sv = dg_sigma_v2_conditional(s);
  s.sigma_v2 = rng.trunc_inverse_gamma(sv.shape, sv.rate, bounds.var_v_lo, bounds.var_v_hi);
  IgParams se = dg_sigma_e2_conditional(data, s);
  s.sigma_e2 = rng.trunc_inverse_gamma(se.shape, se.rate, bounds.var_e_lo, bounds.var_e_hi);
}

void nm_gibbs_step(const SurveyDataset& data, NMState& s, RngStream& rng,
                   const SupportBounds& bounds) {
  Eigen::VectorXd r = residual(data, s.beta, s.v);
  int n1 = 0;
  for (int i = 0; i < data.n(); ++i) {
    s.z[i] = static_cast<std::uint8_t>(
        rng.bernoulli(nm_z1_probability(r(i), s.p_e, s.sigma1_2, s.sigma2_2)));
    n1 += s.z[i];
  }
  s.p_e = rng.beta(1.0 + n1, 1.0 + data.n() - n1);
  s.beta = draw_mv_normal(rng, nm_beta_conditional(data, s), bounds.beta_lo, bounds.beta_hi);
  for (int i = 0; i < data.m(); ++i) {
    NormalParams vp = nm_v_conditional(data, s, i);
    s.v(i) = rng.normal(vp.mean, vp.var);
  }
  IgParams sv = nm_sigma_v2_conditional(s);
  s.sigma_v2 = rng.trunc_inverse_gamma(sv.shape, sv.rate, bounds.var_v_lo, bounds.var_v_hi);

  TigParams t1 = nm_sigma1_conditional(data, s);
  double lo1 = std::max(t1.lower, bounds.var1_lo);
  double hi1 = std::min(t1.upper, bounds.var1_hi);
  if (!(lo1 < hi1)) throw ValidationError("empty support for sigma1_2 draw");
  s.sigma1_2 = rng.trunc_inverse_gamma(t1.shape, t1.rate, lo1, hi1);

  TigParams t2 = nm_sigma2_conditional(data, s);
  double lo2 = std::max(t2.lower, bounds.var2_lo);
  double hi2 = std::min(t2.upper, bounds.var2_hi);
  if (!(lo2 < hi2)) throw ValidationError("empty support for sigma2_2 draw");
  s.sigma2_2 = rng.trunc_inverse_gamma(t2.shape, t2.rate, lo2, hi2);
}

namespace {

struct OlsBase {
  Eigen::VectorXd beta, v;
  double resid_var = 1.0, between_var = 1e-6;
  Eigen::VectorXd r;
};

OlsBase ols_base(const SurveyDataset& data) {
  OlsBase b;
  b.beta = data.X().colPivHouseholderQr().solve(data.y());
  b.r = data.y() - data.X() * b.beta;
  b.v = Eigen::VectorXd::Zero(data.m());
  for (int i = 0; i < data.m(); ++i) {
    const auto& recs = data.area_units()[i];
    double sum = 0.0;
    for (int rr : recs) sum += b.r(rr);
    b.v(i) = recs.empty() ? 0.0 : sum / static_cast<double>(recs.size());
  }
  int dof = std::max(data.n() - data.p(), 1);
  b.resid_var = std::max(b.r.squaredNorm() / dof, 1e-12);
  double vm = b.v.mean();
  double sv = (b.v.array() - vm).square().sum() / std::max(data.m() - 1, 1);
  b.between_var = std::max(sv, 1e-6);
  return b;
}

}  // namespace

DGState dg_initial_state(const SurveyDataset& data) {
  OlsBase b = ols_base(data);
  DGState s;
  s.beta = b.beta;
  s.v = b.v;
  s.sigma_e2 = b.resid_var;
  s.sigma_v2 = b.between_var;
  return s;
}

NMState nm_initial_state(const SurveyDataset& data) {
  OlsBase b = ols_base(data);
  NMState s;
  s.beta = b.beta;
  s.v = b.v;
  s.sigma_v2 = b.between_var;
  s.sigma2_2 = b.resid_var;
  s.sigma1_2 = 0.5 * b.resid_var;
  s.p_e = 0.5;
  s.z.resize(data.n());
  double sd = std::sqrt(b.resid_var);
  for (int i = 0; i < data.n(); ++i) s.z[i] = std::abs(b.r(i)) / sd < 2.0 ? 1 : 0;
  return s;
}

void jitter_state(DGState& s, RngStream& rng) {
  s.sigma_v2 *= rng.uniform(0.5, 1.5);
  s.sigma_e2 *= rng.uniform(0.5, 1.5);
}

void jitter_state(NMState& s, RngStream& rng) {
  s.sigma_v2 *= rng.uniform(0.5, 1.5);
  s.sigma1_2 *= rng.uniform(0.5, 1.5);
  s.sigma2_2 *= rng.uniform(0.5, 1.5);
  if (s.sigma1_2 >= s.sigma2_2) s.sigma1_2 = 0.5 * s.sigma2_2;
}

namespace {

ChainDraws run_one_chain(const SurveyDataset& data, HbModel model, const GibbsConfig& cfg,
                         const PopulationCovariates* pop, int chain_index) {
  RngStream rng(cfg.seed, static_cast<std::uint64_t>(chain_index));
  const int T = (cfg.iterations - cfg.burn_in + cfg.thin - 1) / cfg.thin;
  const int p = data.p(), m = data.m(), n = data.n();

  ChainDraws d;
  d.beta.resize(T, p);
  d.v.resize(T, m);
  d.theta.resize(T, m);
  d.sigma_v2.resize(T);
  if (model == HbModel::dg) {
    d.sigma_e2.resize(T);
  } else {
    d.sigma1_2.resize(T);
    d.sigma2_2.resize(T);
    d.p_e.resize(T);
    d.outlier_prob = Eigen::VectorXd::Zero(n);
  }
  const bool want_ybar = cfg.predictand == Predictand::ybar;
  if (want_ybar) d.ybar.resize(T, m);

  std::vector<std::vector<double>> sampled_y(m);
  for (int i = 0; i < m; ++i)
    for (int rr : data.area_units()[i]) sampled_y[i].push_back(data.y()(rr));

  DGState dg;
  NMState nm;
  if (model == HbModel::dg) {
    dg = dg_initial_state(data);
    jitter_state(dg, rng);
  } else {
    nm = nm_initial_state(data);
    jitter_state(nm, rng);
  }

  std::vector<double> unsampled;
  int t = 0;
  for (int it = 1; it <= cfg.iterations; ++it) {
    if (model == HbModel::dg)
      dg_gibbs_step(data, dg, rng);
    else
      nm_gibbs_step(data, nm, rng);
    if (it <= cfg.burn_in || (it - cfg.burn_in - 1) % cfg.thin != 0) continue;

    const Eigen::VectorXd& beta = model == HbModel::dg ? dg.beta : nm.beta;
    const Eigen::VectorXd& v = model == HbModel::dg ? dg.v : nm.v;
    d.beta.row(t) = beta.transpose();
    d.v.row(t) = v.transpose();
    d.theta.row(t) = (data.Xbar() * beta + v).transpose();
    d.sigma_v2(t) = model == HbModel::dg ? dg.sigma_v2 : nm.sigma_v2;
    if (model == HbModel::dg) {
      d.sigma_e2(t) = dg.sigma_e2;
    } else {
      d.sigma1_2(t) = nm.sigma1_2;
      d.sigma2_2(t) = nm.sigma2_2;
      d.p_e(t) = nm.p_e;
      for (int i = 0; i < n; ++i) d.outlier_prob(i) += nm.z[i] ? 0.0 : 1.0;
    }
    if (want_ybar) {
      for (int i = 0; i < m; ++i) {
        const Eigen::MatrixXd& xs = pop->unsampled_x[i];
        unsampled.clear();
        unsampled.reserve(xs.rows());
        for (Eigen::Index k = 0; k < xs.rows(); ++k) {
          double mu = xs.row(k).dot(beta) + v(i);
          double var;
          if (model == HbModel::dg) {
            var = dg.sigma_e2;
          } else {
            var = rng.bernoulli(nm.p_e) ? nm.sigma1_2 : nm.sigma2_2;
          }
          unsampled.push_back(rng.normal(mu, var));
        }
        d.ybar(t, i) = compose_area_mean(sampled_y[i], unsampled, data.areas()[i].N);
      }
    }
    ++t;
  }
  if (model == HbModel::nm && T > 0) d.outlier_prob /= static_cast<double>(T);
  return d;
}

// Split-chain potential scale reduction on per-chain scalar traces.
double split_rhat(const std::vector<Eigen::VectorXd>& chains) {
  std::vector<Eigen::VectorXd> halves;
  for (const auto& c : chains) {
    Eigen::Index h = c.size() / 2;
    if (h < 2) return 1.0;
    halves.push_back(c.head(h));
    halves.push_back(c.segment(h, h));
  }
  const double tn = static_cast<double>(halves.front().size());
  const double j = static_cast<double>(halves.size());
  double grand = 0.0, w = 0.0;
  std::vector<double> mu(halves.size());
  for (size_t k = 0; k < halves.size(); ++k) {
    mu[k] = halves[k].mean();
    grand += mu[k];
    w += (halves[k].array() - mu[k]).square().sum() / (tn - 1.0);
  }
  grand /= j;
  w /= j;
  double b = 0.0;
  for (double mk : mu) b += (mk - grand) * (mk - grand);
  b *= tn / (j - 1.0);
  if (w <= 0.0) return 1.0;
  double var_plus = (tn - 1.0) / tn * w + b / tn;
  return std::sqrt(var_plus / w);
}

// Effective sample size via Geyer's initial positive-pair sequence, summed
// over chains.
double geyer_ess(const std::vector<Eigen::VectorXd>& chains) {
  double total = 0.0;
  for (const auto& c : chains) {
    const Eigen::Index T = c.size();
    if (T < 8) {
      total += static_cast<double>(T);
      continue;
    }
    double mu = c.mean();
    Eigen::VectorXd x = c.array() - mu;
    double g0 = x.squaredNorm() / T;
    if (g0 <= 0.0) {
      total += static_cast<double>(T);
      continue;
    }
    auto gamma_at = [&](Eigen::Index lag) {
      double s = 0.0;
      for (Eigen::Index i = 0; i + lag < T; ++i) s += x(i) * x(i + lag);
      return s / T;
    };
    double sum_pairs = 0.0;
    double prev = kInf;
    for (Eigen::Index lag = 0; lag + 1 < T / 2; lag += 2) {
      double pair = (lag == 0 ? g0 : gamma_at(lag)) + gamma_at(lag + 1);
      if (pair <= 0.0) break;
      pair = std::min(pair, prev);
      prev = pair;
      sum_pairs += pair;
    }
    double tau = std::max(2.0 * sum_pairs / g0 - 1.0, 1.0);
    total += static_cast<double>(T) / tau;
  }
  return total;
}

}  // namespace

HbRunResult run_chain(const SurveyDataset& data, HbModel model, const GibbsConfig& config,
                      const PopulationCovariates* pop) {
  if (data.m() < 3)
    throw ValidationError("hierarchical fit requires at least 3 areas, got " +
                          std::to_string(data.m()));
  if (config.burn_in < 0 || config.iterations <= config.burn_in)
    throw ValidationError("need iterations > burn_in >= 0");
  if (config.thin < 1 || config.chains < 1) throw ValidationError("need thin >= 1 and chains >= 1");
  if (config.predictand == Predictand::ybar) {
    if (pop == nullptr || static_cast<int>(pop->unsampled_x.size()) != data.m())
      throw ValidationError("ybar predictand requires population covariates for every area");
    for (int i = 0; i < data.m(); ++i) {
      const auto& a = data.areas()[i];
      if (pop->unsampled_x[i].rows() != a.N - a.n || pop->unsampled_x[i].cols() != data.p())
        throw ValidationError("population covariate block mismatch for area " +
                              std::to_string(a.area_id));
    }
  }

  HbRunResult out;
  out.model = model;
  out.config = config;
  out.p = data.p();
  out.m = data.m();
  out.n_units = data.n();
  for (const auto& a : data.areas()) out.area_ids.push_back(a.area_id);
  out.chains.resize(config.chains);

  if (config.chains == 1) {
    out.chains[0] = run_one_chain(data, model, config, pop, 0);
  } else {
    std::vector<std::future<ChainDraws>> futs;
    futs.reserve(config.chains);
    for (int c = 0; c < config.chains; ++c)
      futs.push_back(std::async(std::launch::async, run_one_chain, std::cref(data), model,
                                std::cref(config), pop, c));
    for (int c = 0; c < config.chains; ++c) out.chains[c] = futs[c].get();
  }
  return out;
}

double sample_quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ValidationError("quantile of empty sample");
  std::sort(values.begin(), values.end());
  if (q <= 0.0) return values.front();
  if (q >= 1.0) return values.back();
  double h = q * (static_cast<double>(values.size()) - 1.0);
  size_t lo = static_cast<size_t>(h);
  double frac = h - static_cast<double>(lo);
  if (lo + 1 >= values.size()) return values.back();
  return values[lo] * (1.0 - frac) + values[lo + 1] * frac;
}

PosteriorSummary summarize(const HbRunResult& run, std::vector<double> levels) {
  PosteriorSummary s;
  s.levels = levels;
  const int C = static_cast<int>(run.chains.size());
  if (C == 0) throw ValidationError("summarize: no chains");
  const Eigen::Index T = run.chains[0].theta.rows();
  const bool use_ybar = run.config.predictand == Predictand::ybar;

  // per-area predictand summaries over pooled draws
  std::vector<double> buf;
  buf.reserve(static_cast<size_t>(T) * C);
  for (int i = 0; i < run.m; ++i) {
    buf.clear();
    for (const auto& c : run.chains) {
      const Eigen::MatrixXd& mat = use_ybar ? c.ybar : c.theta;
      for (Eigen::Index t = 0; t < mat.rows(); ++t) buf.push_back(mat(t, i));
    }
    AreaSummary a;
    a.area_id = run.area_ids[i];
    double mu = std::accumulate(buf.begin(), buf.end(), 0.0) / buf.size();
    double ss = 0.0;
    for (double vv : buf) ss += (vv - mu) * (vv - mu);
    a.mean = mu;
    a.sd = buf.size() > 1 ? std::sqrt(ss / (buf.size() - 1.0)) : 0.0;
    for (double lvl : levels) {
      double alpha = 0.5 * (1.0 - lvl);
      a.intervals.emplace_back(sample_quantile(buf, alpha), sample_quantile(buf, 1.0 - alpha));
    }
    s.areas.push_back(std::move(a));
  }

  // named scalar parameter traces per chain
  std::map<std::string, std::vector<Eigen::VectorXd>> traces;
  for (const auto& c : run.chains) {
    for (int j = 0; j < run.p; ++j) traces["beta" + std::to_string(j)].push_back(c.beta.col(j));
    traces["sigma_v2"].push_back(c.sigma_v2);
    if (run.model == HbModel::dg) {
      traces["sigma_e2"].push_back(c.sigma_e2);
    } else {
      traces["sigma1_2"].push_back(c.sigma1_2);
      traces["sigma2_2"].push_back(c.sigma2_2);
      traces["p_e"].push_back(c.p_e);
    }
  }
  for (const auto& [name, per_chain] : traces) {
    buf.clear();
    for (const auto& tr : per_chain)
      for (Eigen::Index t = 0; t < tr.size(); ++t) buf.push_back(tr(t));
    ParamSummary ps;
    ps.mean = std::accumulate(buf.begin(), buf.end(), 0.0) / buf.size();
    ps.median = sample_quantile(buf, 0.5);
    s.params[name] = ps;

    // R-hat on log scale for variance parameters (standard for positive params)
    std::vector<Eigen::VectorXd> diag_traces = per_chain;
    if (name.rfind("sigma", 0) == 0)
      for (auto& tr : diag_traces) tr = tr.array().log().matrix();
    Diagnostic dg;
    dg.rhat = split_rhat(diag_traces);
    dg.ess = geyer_ess(diag_traces);
    s.diagnostics[name] = dg;
  }

  if (run.model == HbModel::nm) {
    s.outlier_prob.assign(run.n_units, 0.0);
    for (const auto& c : run.chains)
      for (int i = 0; i < run.n_units; ++i) s.outlier_prob[i] += c.outlier_prob(i) / C;
  }

  s.max_rhat = 0.0;
  s.min_ess = kInf;
  for (const auto& [name, dgn] : s.diagnostics) {
    s.max_rhat = std::max(s.max_rhat, dgn.rhat);
    s.min_ess = std::min(s.min_ess, dgn.ess);
  }
  s.converged = s.max_rhat < run.config.rhat_gate;
  return s;
}

}  // namespace sae
