#include <doctest.h>

#include <Eigen/Dense>
#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "sae/dataset.hpp"
#include "sae/gibbs.hpp"
#include "sae/rng.hpp"
#include "support/geweke.hpp"
#include "support/oracles.hpp"

namespace {

const std::string kDataDir = SAE_DATA_DIR;

sae::SurveyDataset corn() {
  return sae::load_dataset(kDataDir + "/corn_units.csv", kDataDir + "/corn_areas.csv");
}

Eigen::VectorXd vec(std::initializer_list<double> xs) {
  Eigen::VectorXd v(static_cast<int>(xs.size()));
  int i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

// two records in area 1 with x=(1,0), one empty area, plus a filler area
sae::SurveyDataset two_record_data(double y1, double y2) {
  std::vector<sae::UnitRecord> units(3);
  units[0] = {1, 1, y1, vec({1.0, 0.0})};
  units[1] = {1, 2, y2, vec({1.0, 0.0})};
  units[2] = {3, 1, 0.0, vec({1.0, 0.0})};
  std::vector<sae::AreaInfo> areas(3);
  areas[0] = {1, 10, 0, vec({1.0, 0.0})};
  areas[1] = {2, 10, 0, vec({1.0, 0.0})};  // stays empty
  areas[2] = {3, 10, 0, vec({1.0, 0.0})};
  return sae::SurveyDataset(std::move(units), std::move(areas));
}

}  // namespace

TEST_SUITE("gibbs") {

TEST_CASE("dg variance conditionals match closed forms") {
  // m=40, sum v^2 = 40: shape m/2-1 = 19, rate 20, mean 20/18
  sae::DGState s;
  s.v = Eigen::VectorXd::Ones(40);
  auto ig = sae::dg_sigma_v2_conditional(s);
  CHECK(ig.shape == 19.0);
  CHECK(ig.rate == 20.0);
  CHECK(ig.rate / (ig.shape - 1.0) == doctest::Approx(20.0 / 18.0).epsilon(1e-15));
  CHECK(ig.rate / (ig.shape - 1.0) == doctest::Approx(1.1111).epsilon(1e-4));

  // residual-driven sigma_e2 conditional: shape n/2, rate half the residual SS
  auto d = two_record_data(5.0, 7.0);
  sae::DGState st;
  st.beta = vec({1.0, 1.0});
  st.v = vec({0.5, 0.0, -2.0});
  auto se = sae::dg_sigma_e2_conditional(d, st);
  CHECK(se.shape == 1.5);
  // residuals: 5-1-0.5, 7-1-0.5, 0-1+2 -> 3.5^2+5.5^2+1 = 43.5
  CHECK(se.rate == doctest::Approx(0.5 * (3.5 * 3.5 + 5.5 * 5.5 + 1.0)).epsilon(1e-14));
}

TEST_CASE("dg v conditional: data-weighted mean and no-data prior") {
  auto d = two_record_data(3.0, 5.0);
  sae::DGState s;
  s.beta = vec({1.0, 0.0});  // fitted value 1 for every record
  s.v = Eigen::VectorXd::Zero(3);
  s.sigma_e2 = 2.0;
  s.sigma_v2 = 4.0;

  // area 1: sum of (y - xb) = 2 + 4 = 6, precision 2/2 + 1/4 = 1.25
  auto vp = sae::dg_v_conditional(d, s, 0);
  CHECK(vp.mean == doctest::Approx(2.4).epsilon(1e-14));
  CHECK(vp.var == doctest::Approx(0.8).epsilon(1e-14));

  // area 2 has no records: conditional is the N(0, sigma_v2) prior exactly
  auto vp2 = sae::dg_v_conditional(d, s, 1);
  CHECK(vp2.mean == 0.0);
  CHECK(vp2.var == 4.0);
}

TEST_CASE("dg beta conditional solves the normal equations") {
  auto d = corn();
  sae::DGState s;
  s.v = Eigen::VectorXd::Zero(d.m());
  s.beta = Eigen::VectorXd::Zero(d.p());
  s.sigma_e2 = 123.0;
  s.sigma_v2 = 1.0;

  // with v = 0 the conditional mean is the OLS fit
  auto par = sae::dg_beta_conditional(d, s);
  Eigen::VectorXd ols = d.X().colPivHouseholderQr().solve(d.y());
  for (int j = 0; j < d.p(); ++j) CHECK(par.mean(j) == doctest::Approx(ols(j)).epsilon(1e-10));

  // precision is X'X / sigma_e2
  Eigen::MatrixXd want = d.X().transpose() * d.X() / s.sigma_e2;
  CHECK((par.precision - want).norm() / want.norm() < 1e-12);

  // a v offset shifts the target: mean solves X'X b = X'(y - Zv)
  std::mt19937 gen(3);
  std::normal_distribution<double> nd(0.0, 5.0);
  for (int i = 0; i < d.m(); ++i) s.v(i) = nd(gen);
  par = sae::dg_beta_conditional(d, s);
  Eigen::VectorXd yv = d.y();
  for (int r = 0; r < d.n(); ++r) yv(r) -= s.v(d.record_area()[r]);
  Eigen::VectorXd want_mean = d.X().colPivHouseholderQr().solve(yv);
  for (int j = 0; j < d.p(); ++j)
    CHECK(par.mean(j) == doctest::Approx(want_mean(j)).epsilon(1e-10));
}

TEST_CASE("nm z conditional closed forms") {
  // r=0, sigma1=1, sigma2=25, p_e=0.5: density ratio 1 : 1/5
  CHECK(sae::nm_z1_probability(0.0, 0.5, 1.0, 25.0) == doctest::Approx(5.0 / 6.0).epsilon(1e-12));

  // identical components: probability equals p_e for any residual
  for (double r : {0.0, 1.0, -3.0, 10.0})
    for (double pe : {0.1, 0.5, 0.9})
      CHECK(sae::nm_z1_probability(r, pe, 2.0, 2.0) == doctest::Approx(pe).epsilon(1e-12));

  // degenerate mixing weights
  CHECK(sae::nm_z1_probability(1.0, 0.0, 1.0, 25.0) == 0.0);
  CHECK(sae::nm_z1_probability(1.0, 1.0, 1.0, 25.0) == 1.0);

  // P(z=0) non-decreasing in |r| for fixed state
  double prev = 1.0 - sae::nm_z1_probability(0.0, 0.6, 1.5, 20.0);
  for (int k = 1; k <= 100; ++k) {
    double r = 0.1 * k;
    double p0 = 1.0 - sae::nm_z1_probability(r, 0.6, 1.5, 20.0);
    CHECK(p0 >= prev - 1e-15);
    prev = p0;
    CHECK(1.0 - sae::nm_z1_probability(-r, 0.6, 1.5, 20.0) == doctest::Approx(p0).epsilon(1e-12));
  }
}

TEST_CASE("nm v and variance conditionals match closed forms") {
  auto d = two_record_data(3.0, 5.0);
  sae::NMState s;
  s.beta = vec({1.0, 0.0});
  s.v = Eigen::VectorXd::Zero(3);
  s.sigma_v2 = 4.0;
  s.sigma1_2 = 1.0;
  s.sigma2_2 = 4.0;
  s.p_e = 0.5;
  s.z = {1, 0, 1};

  // area 1: weights 1 and 1/4; num = 1*2 + 0.25*4 = 3, prec = 0.25 + 1.25
  auto vp = sae::nm_v_conditional(d, s, 0);
  CHECK(vp.mean == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(vp.var == doctest::Approx(1.0 / 1.5).epsilon(1e-14));

  // empty area falls back to the prior
  auto vp2 = sae::nm_v_conditional(d, s, 1);
  CHECK(vp2.mean == 0.0);
  CHECK(vp2.var == 4.0);

  // sigma_v2 conditional identical in form to DG
  auto ig = sae::nm_sigma_v2_conditional(s);
  CHECK(ig.shape == 0.5);
  CHECK(ig.rate == 0.0);

  // component sums split by z: residuals are (2, 4, 1)
  auto t1 = sae::nm_sigma1_conditional(d, s);
  CHECK(t1.shape == 0.0);  // n1=2 -> 2/2 - 1
  CHECK(t1.rate == doctest::Approx(0.5 * (4.0 + 1.0)).epsilon(1e-14));
  CHECK(t1.lower == 0.0);
  CHECK(t1.upper == 4.0);
  auto t2 = sae::nm_sigma2_conditional(d, s);
  CHECK(t2.shape == 1.5);  // n2=1 -> 1/2 + 1
  CHECK(t2.rate == doctest::Approx(0.5 * 16.0).epsilon(1e-14));
  CHECK(t2.lower == 1.0);
  CHECK(std::isinf(t2.upper));
}

TEST_CASE("nm beta conditional equals weighted least squares") {
  auto d = corn();
  sae::NMState s;
  s.v = Eigen::VectorXd::Zero(d.m());
  std::mt19937 gen(5);
  std::normal_distribution<double> nd(0.0, 3.0);
  for (int i = 0; i < d.m(); ++i) s.v(i) = nd(gen);
  s.beta = Eigen::VectorXd::Zero(d.p());
  s.sigma1_2 = 150.0;
  s.sigma2_2 = 900.0;
  s.p_e = 0.7;
  s.z.resize(d.n());
  std::bernoulli_distribution bern(0.8);
  for (int i = 0; i < d.n(); ++i) s.z[i] = bern(gen) ? 1 : 0;

  auto par = sae::nm_beta_conditional(d, s);

  // oracle: scale rows by sqrt(w) and solve ordinary least squares
  Eigen::MatrixXd Xw = d.X();
  Eigen::VectorXd yw = d.y();
  for (int r = 0; r < d.n(); ++r) {
    double w = s.z[r] ? 1.0 / s.sigma1_2 : 1.0 / s.sigma2_2;
    yw(r) -= s.v(d.record_area()[r]);
    Xw.row(r) *= std::sqrt(w);
    yw(r) *= std::sqrt(w);
  }
  Eigen::VectorXd want = Xw.colPivHouseholderQr().solve(yw);
  for (int j = 0; j < d.p(); ++j) CHECK(par.mean(j) == doctest::Approx(want(j)).epsilon(1e-9));
  Eigen::MatrixXd wantP = Xw.transpose() * Xw;
  CHECK((par.precision - wantP).norm() / wantP.norm() < 1e-12);
}

TEST_CASE("nm sigma1 conditional with no regular units is uniform") {
  auto d = two_record_data(3.0, 5.0);
  sae::NMState s;
  s.beta = vec({1.0, 0.0});
  s.v = Eigen::VectorXd::Zero(3);
  s.sigma_v2 = 1.0;
  s.sigma1_2 = 1.0;
  s.sigma2_2 = 4.0;
  s.p_e = 0.5;
  s.z = {0, 0, 0};  // n1 = 0

  auto t1 = sae::nm_sigma1_conditional(d, s);
  CHECK(t1.shape == -1.0);
  CHECK(t1.rate == 0.0);
  CHECK(t1.lower == 0.0);
  CHECK(t1.upper == 4.0);

  // the resulting density t^(-shape-1) e^0 = 1 is Uniform(0, sigma2_2)
  sae::RngStream rng(991, 0);
  std::vector<double> x;
  x.reserve(20000);
  for (int i = 0; i < 20000; ++i)
    x.push_back(rng.trunc_inverse_gamma(t1.shape, t1.rate, t1.lower, t1.upper));
  double p = oracle::ks_pvalue(x, [](double t) { return t / 4.0; });
  CHECK(p > 0.01);
}

TEST_CASE("frozen z reduces the nm conditionals to the dg conditionals") {
  auto d = corn();
  sae::RngStream rng(777, 0);
  for (int rep = 0; rep < 100; ++rep) {
    sae::DGState dg;
    dg.beta = vec({rng.normal(50.0, 400.0), rng.normal(0.4, 0.01), rng.normal(0.0, 0.01)});
    dg.v.resize(d.m());
    for (int i = 0; i < d.m(); ++i) dg.v(i) = rng.normal(0.0, 100.0);
    dg.sigma_v2 = rng.uniform(20.0, 400.0);
    dg.sigma_e2 = rng.uniform(50.0, 600.0);

    sae::NMState nm;
    nm.beta = dg.beta;
    nm.v = dg.v;
    nm.sigma_v2 = dg.sigma_v2;
    nm.sigma1_2 = dg.sigma_e2;  // component 1 plays sigma_e2
    nm.sigma2_2 = dg.sigma_e2 * rng.uniform(2.0, 10.0);
    nm.p_e = rng.uniform();
    nm.z.assign(d.n(), 1);

    auto bdg = sae::dg_beta_conditional(d, dg);
    auto bnm = sae::nm_beta_conditional(d, nm);
    CHECK((bdg.mean - bnm.mean).norm() / bdg.mean.norm() < 1e-10);
    CHECK((bdg.precision - bnm.precision).norm() / bdg.precision.norm() < 1e-10);

    for (int i = 0; i < d.m(); ++i) {
      auto vdg = sae::dg_v_conditional(d, dg, i);
      auto vnm = sae::nm_v_conditional(d, nm, i);
      CHECK(vdg.mean == doctest::Approx(vnm.mean).epsilon(1e-10));
      CHECK(vdg.var == doctest::Approx(vnm.var).epsilon(1e-10));
    }

    auto svdg = sae::dg_sigma_v2_conditional(dg);
    auto svnm = sae::nm_sigma_v2_conditional(nm);
    CHECK(svdg.shape == svnm.shape);
    CHECK(svdg.rate == svnm.rate);

    // variance step: same rate, shape offset by exactly one (n/2 vs n/2 - 1)
    auto se = sae::dg_sigma_e2_conditional(d, dg);
    auto t1 = sae::nm_sigma1_conditional(d, nm);
    CHECK(t1.shape == doctest::Approx(se.shape - 1.0).epsilon(1e-15));
    CHECK(t1.rate == doctest::Approx(se.rate).epsilon(1e-12));
    CHECK(t1.lower == 0.0);
    CHECK(t1.upper == nm.sigma2_2);
  }
}

TEST_CASE("joint-distribution agreement of the dg scan") {
  auto rep = geweke::run_dg(20240816u, 20000, 30000, 2000);
  INFO("max |z| = " << rep.max_abs_z);
  for (std::size_t k = 0; k < rep.names.size(); ++k) {
    INFO(rep.names[k] << ": mc=" << rep.mc_mean[k] << " sc=" << rep.sc_mean[k]
                      << " z=" << rep.z[k]);
    CHECK(std::abs(rep.z[k]) < 3.0);
  }
}

TEST_CASE("joint-distribution agreement of the nm scan") {
  auto rep = geweke::run_nm(20240816u, 20000, 30000, 2000);
  INFO("max |z| = " << rep.max_abs_z);
  for (std::size_t k = 0; k < rep.names.size(); ++k) {
    INFO(rep.names[k] << ": mc=" << rep.mc_mean[k] << " sc=" << rep.sc_mean[k]
                      << " z=" << rep.z[k]);
    CHECK(std::abs(rep.z[k]) < 3.0);
  }
}

TEST_CASE("sample_quantile uses type-7 interpolation") {
  std::vector<double> x = {4.0, 1.0, 3.0, 2.0};  // sorts to 1..4
  CHECK(sae::sample_quantile(x, 0.5) == doctest::Approx(2.5).epsilon(1e-15));
  CHECK(sae::sample_quantile(x, 0.25) == doctest::Approx(1.75).epsilon(1e-15));
  CHECK(sae::sample_quantile(x, 0.0) == 1.0);
  CHECK(sae::sample_quantile(x, 1.0) == 4.0);
  CHECK(sae::sample_quantile({7.5}, 0.9) == 7.5);
  CHECK_THROWS_AS(sae::sample_quantile({}, 0.5), sae::ValidationError);
}

namespace {

// hand-assembled two-chain DG run with externally supplied theta traces
sae::HbRunResult fake_run(const std::vector<Eigen::MatrixXd>& theta_chains) {
  sae::HbRunResult run;
  run.model = sae::HbModel::dg;
  run.config.predictand = sae::Predictand::theta;
  run.m = static_cast<int>(theta_chains[0].cols());
  run.p = 1;
  run.n_units = 1;
  for (int i = 0; i < run.m; ++i) run.area_ids.push_back(i + 1);
  for (const auto& th : theta_chains) {
    sae::ChainDraws c;
    const Eigen::Index T = th.rows();
    c.theta = th;
    c.beta = Eigen::MatrixXd::Zero(T, 1);
    c.v = Eigen::MatrixXd::Zero(T, run.m);
    c.sigma_v2 = Eigen::VectorXd::Ones(T);
    c.sigma_e2 = Eigen::VectorXd::Ones(T);
    // give the scalar params iid noise so their diagnostics are well defined
    std::mt19937 gen(static_cast<unsigned>(run.chains.size() + 1));
    std::normal_distribution<double> nd(0.0, 1.0);
    for (Eigen::Index t = 0; t < T; ++t) {
      c.beta(t, 0) = nd(gen);
      c.sigma_v2(t) = std::exp(nd(gen));
      c.sigma_e2(t) = std::exp(nd(gen));
    }
    run.chains.push_back(std::move(c));
  }
  return run;
}

}  // namespace

TEST_CASE("summarize: constant draws give degenerate summaries") {
  const double c = 42.5;
  std::vector<Eigen::MatrixXd> th(2, Eigen::MatrixXd::Constant(60, 3, c));
  auto run = fake_run(th);
  auto s = sae::summarize(run);
  REQUIRE(s.areas.size() == 3);
  for (const auto& a : s.areas) {
    CHECK(a.mean == c);
    CHECK(a.sd == 0.0);
    for (auto [lo, hi] : a.intervals) {
      CHECK(lo == c);
      CHECK(hi == c);
    }
  }
}

TEST_CASE("summarize: iid chains converge, divergent chains are flagged") {
  std::mt19937 gen(99);
  std::normal_distribution<double> nd(0.0, 1.0);

  SUBCASE("iid standard normal traces") {
    std::vector<Eigen::MatrixXd> th(4, Eigen::MatrixXd(500, 2));
    for (auto& m : th)
      for (Eigen::Index t = 0; t < 500; ++t)
        for (int i = 0; i < 2; ++i) m(t, i) = nd(gen);
    auto run = fake_run(th);
    auto s = sae::summarize(run);
    CHECK(s.converged);
    CHECK(s.max_rhat < 1.02);
    CHECK(s.min_ess > 1200.0);  // 2000 iid draws per scalar

    // pooled mean/sd against direct computation
    std::vector<double> pooled;
    for (const auto& m : th)
      for (Eigen::Index t = 0; t < 500; ++t) pooled.push_back(m(t, 0));
    CHECK(s.areas[0].mean == doctest::Approx(oracle::mean(pooled)).epsilon(1e-12));
    CHECK(s.areas[0].sd ==
          doctest::Approx(std::sqrt(oracle::variance(pooled))).epsilon(1e-12));

    // equi-tailed interval ordering and nesting (95% contains 90%)
    for (const auto& a : s.areas) {
      REQUIRE(a.intervals.size() == 2);
      CHECK(a.intervals[0].first <= a.intervals[0].second);
      CHECK(a.intervals[1].first <= a.intervals[1].second);
      CHECK(a.intervals[1].first <= a.intervals[0].first);
      CHECK(a.intervals[0].second <= a.intervals[1].second);
      CHECK(a.intervals[0].first <= a.mean);
      CHECK(a.mean <= a.intervals[0].second);
    }
  }

  SUBCASE("location-shifted chain trips the gate") {
    std::vector<Eigen::MatrixXd> th(2, Eigen::MatrixXd(400, 1));
    for (Eigen::Index t = 0; t < 400; ++t) {
      th[0](t, 0) = nd(gen);
      th[1](t, 0) = nd(gen) + 5.0;
    }
    auto run = fake_run(th);
    // the shifted trace enters diagnostics through beta, not theta; shift
    // beta instead so the gate sees it
    run.chains[1].beta.array() += 5.0;
    auto s = sae::summarize(run);
    CHECK(s.max_rhat > 1.3);
    CHECK_FALSE(s.converged);
  }
}

TEST_CASE("run_chain is deterministic in the seed") {
  auto d = corn();
  sae::GibbsConfig cfg;
  cfg.iterations = 400;
  cfg.burn_in = 100;
  cfg.chains = 2;
  cfg.seed = 7;

  for (auto model : {sae::HbModel::dg, sae::HbModel::nm}) {
    auto r1 = sae::run_chain(d, model, cfg);
    auto r2 = sae::run_chain(d, model, cfg);
    REQUIRE(r1.chains.size() == 2);
    for (int c = 0; c < 2; ++c) {
      CHECK((r1.chains[c].beta.array() == r2.chains[c].beta.array()).all());
      CHECK((r1.chains[c].theta.array() == r2.chains[c].theta.array()).all());
      CHECK((r1.chains[c].sigma_v2.array() == r2.chains[c].sigma_v2.array()).all());
    }
    sae::GibbsConfig other = cfg;
    other.seed = 8;
    auto r3 = sae::run_chain(d, model, other);
    CHECK_FALSE((r1.chains[0].beta.array() == r3.chains[0].beta.array()).all());
  }
}

TEST_CASE("nm run keeps component ordering and valid probabilities") {
  auto d = corn();
  sae::GibbsConfig cfg;
  cfg.iterations = 600;
  cfg.burn_in = 100;
  cfg.chains = 2;
  cfg.seed = 42;
  auto run = sae::run_chain(d, sae::HbModel::nm, cfg);
  for (const auto& c : run.chains) {
    for (Eigen::Index t = 0; t < c.sigma1_2.size(); ++t) {
      CHECK(c.sigma1_2(t) > 0.0);
      CHECK(c.sigma1_2(t) < c.sigma2_2(t));
      CHECK(c.p_e(t) > 0.0);
      CHECK(c.p_e(t) < 1.0);
    }
  }
  auto s = sae::summarize(run);
  REQUIRE(s.outlier_prob.size() == static_cast<std::size_t>(d.n()));
  for (double p : s.outlier_prob) {
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
  }
  // parameter table carries every NM scalar
  for (const char* key : {"beta0", "beta1", "beta2", "sigma_v2", "sigma1_2", "sigma2_2", "p_e"})
    CHECK(s.params.count(key) == 1);
  CHECK(s.params.count("sigma_e2") == 0);
  REQUIRE(s.areas.size() == 12);
  CHECK(s.areas[0].area_id == 1);
  CHECK(s.areas[11].area_id == 12);
}

TEST_CASE("ybar predictand composes census areas exactly") {
  // three areas: partial (N=6,n=2), census (N=2,n=2), partial (N=4,n=1)
  std::vector<sae::UnitRecord> units(5);
  units[0] = {1, 1, 4.0, vec({1.0, 0.4})};
  units[1] = {1, 2, 6.0, vec({1.0, 0.8})};
  units[2] = {2, 1, 3.0, vec({1.0, 0.2})};
  units[3] = {2, 2, 9.0, vec({1.0, 0.9})};
  units[4] = {3, 1, 5.5, vec({1.0, 0.5})};
  std::vector<sae::AreaInfo> areas(3);
  areas[0] = {1, 6, 0, vec({1.0, 0.5})};
  areas[1] = {2, 2, 0, vec({1.0, 0.55})};
  areas[2] = {3, 4, 0, vec({1.0, 0.45})};
  sae::SurveyDataset d(std::move(units), std::move(areas));

  sae::PopulationCovariates pop;
  pop.unsampled_x.resize(3);
  pop.unsampled_x[0] = Eigen::MatrixXd(4, 2);
  pop.unsampled_x[0] << 1.0, 0.3, 1.0, 0.6, 1.0, 0.5, 1.0, 0.7;
  pop.unsampled_x[1] = Eigen::MatrixXd(0, 2);
  pop.unsampled_x[2] = Eigen::MatrixXd(3, 2);
  pop.unsampled_x[2] << 1.0, 0.4, 1.0, 0.5, 1.0, 0.35;

  sae::GibbsConfig cfg;
  cfg.iterations = 300;
  cfg.burn_in = 100;
  cfg.chains = 1;
  cfg.predictand = sae::Predictand::ybar;

  for (auto model : {sae::HbModel::dg, sae::HbModel::nm}) {
    auto run = sae::run_chain(d, model, cfg, &pop);
    const auto& c = run.chains[0];
    REQUIRE(c.ybar.rows() == 200);
    REQUIRE(c.ybar.cols() == 3);
    // census area: composed mean is the sample mean every iterate
    for (Eigen::Index t = 0; t < c.ybar.rows(); ++t)
      CHECK(c.ybar(t, 1) == doctest::Approx(6.0).epsilon(1e-14));
    CHECK(c.ybar.allFinite());
    // non-census columns actually vary across iterates
    CHECK(c.ybar.col(0).maxCoeff() > c.ybar.col(0).minCoeff());

    auto s = sae::summarize(run);
    CHECK(s.areas[1].mean == doctest::Approx(6.0).epsilon(1e-12));
    CHECK(s.areas[1].sd == doctest::Approx(0.0).epsilon(1e-12));
  }

  // ybar without covariates, and with a malformed block, is rejected
  CHECK_THROWS_AS(sae::run_chain(d, sae::HbModel::dg, cfg), sae::ValidationError);
  sae::PopulationCovariates bad = pop;
  bad.unsampled_x[2] = Eigen::MatrixXd(2, 2);
  CHECK_THROWS_AS(sae::run_chain(d, sae::HbModel::dg, cfg, &bad), sae::ValidationError);
}

TEST_CASE("run_chain validates configuration") {
  auto d = corn();
  sae::GibbsConfig cfg;
  cfg.iterations = 100;
  cfg.burn_in = 100;  // not strictly less
  CHECK_THROWS_AS(sae::run_chain(d, sae::HbModel::dg, cfg), sae::ValidationError);
  cfg.burn_in = 10;
  cfg.thin = 0;
  CHECK_THROWS_AS(sae::run_chain(d, sae::HbModel::dg, cfg), sae::ValidationError);
  cfg.thin = 1;
  cfg.chains = 0;
  CHECK_THROWS_AS(sae::run_chain(d, sae::HbModel::dg, cfg), sae::ValidationError);

  // m >= 3 gate at fit time
  std::vector<sae::UnitRecord> units(2);
  units[0] = {1, 1, 1.0, vec({1.0})};
  units[1] = {2, 1, 2.0, vec({1.0})};
  std::vector<sae::AreaInfo> areas(2);
  areas[0] = {1, 5, 0, vec({1.0})};
  areas[1] = {2, 5, 0, vec({1.0})};
  sae::SurveyDataset tiny(std::move(units), std::move(areas));
  sae::GibbsConfig ok;
  ok.iterations = 20;
  ok.burn_in = 5;
  ok.chains = 1;
  CHECK_THROWS_AS(sae::run_chain(tiny, sae::HbModel::dg, ok), sae::ValidationError);
}

}  // TEST_SUITE
