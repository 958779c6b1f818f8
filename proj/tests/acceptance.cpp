// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
//   acceptance [--only 1,5,9] [--work DIR] [--verbose]
//
// Criteria 1-4 are numerical property checks. 5-11 train on the synthetic benchmark for three
// seeds; one stage-1 network per seed is shared by every run of that seed.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cssccnn/layers.hpp"
#include "cssccnn/pipeline/run.hpp"
#include "cssccnn/prior.hpp"
#include "cssccnn/transport.hpp"
#include "oracles.hpp"

using namespace cssccnn;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

bool g_verbose = false;

void note(const std::string& s) {
  if (g_verbose) std::cerr << "  .. " << s << std::endl;
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s << std::setprecision(digits) << v;
  return s.str();
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "/" : "") + fmt(v[i]);
  return s;
}

EmpiricalMeasure uniform_measure(std::mt19937_64& rng, std::size_t d) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(d);
  for (double& x : v) x = u(rng);
  return EmpiricalMeasure(std::move(v));
}

// ---- 1. Sinkhorn cost against the exact 1-D EMD ----

Outcome sinkhorn_bound() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> dim(4, 64);
  SinkhornOptions o;
  o.max_iter = 20000;
  o.tol = 1e-10;
  int below = 0, rises = 0;
  double worst_rise = 0.0;
  for (int pair = 0; pair < 200; ++pair) {
    const std::size_t d = dim(rng);
    const auto a = uniform_measure(rng, d), b = uniform_measure(rng, d);
    const double emd = emd_1d_exact(a, b);
    double prev = std::numeric_limits<double>::infinity();
    for (double beta = 1.0; beta <= 256.0; beta *= 2.0) {
      o.beta = beta;
      const double gap = sinkhorn(a, b, o).loss - emd;
      below += gap < -1e-9;
      if (gap > prev + 1e-6) {
        ++rises;
        worst_rise = std::max(worst_rise, gap - prev);
      }
      prev = gap;
    }
  }
  const double secs = seconds_since(t0);
  return {below == 0 && rises == 0 && secs < 10.0,
          "200 pairs x 9 betas: " + std::to_string(below) + " below EMD, " + std::to_string(rises) +
              " gap increases (worst " + fmt(worst_rise) + "), " + fmt(secs, 3) + " s"};
}

// ---- 2. gradients against central differences ----

template <class F>
nn::Mat<double> numeric_grad(nn::Mat<double>& p, F&& loss, double h = 1e-6) {
  nn::Mat<double> g(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double keep = p.data()[i];
    p.data()[i] = keep + h;
    const double up = loss();
    p.data()[i] = keep - h;
    const double dn = loss();
    p.data()[i] = keep;
    g.data()[i] = (up - dn) / (2 * h);
  }
  return g;
}

// As numeric_grad, but coordinates whose one-sided differences disagree (a ReLU or max-pool
// switch within +-h) are reported through `kinked` and copied from `analytic` so they drop out.
template <class F>
nn::Mat<double> numeric_grad_smooth(nn::Mat<double>& p, F&& loss, const nn::Mat<double>& analytic,
                                    std::size_t& kinked, double h = 1e-6) {
  nn::Mat<double> g(p.rows(), p.cols());
  const double f0 = loss();
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double keep = p.data()[i];
    p.data()[i] = keep + h;
    const double up = loss();
    p.data()[i] = keep - h;
    const double dn = loss();
    p.data()[i] = keep;
    const double fwd = (up - f0) / h, bwd = (f0 - dn) / h;
    if (std::abs(fwd - bwd) > 1e-4 * std::max({std::abs(fwd), std::abs(bwd), 1.0})) {
      ++kinked;
      g.data()[i] = analytic.data()[i];
    } else {
      g.data()[i] = (up - dn) / (2 * h);
    }
  }
  return g;
}

double rel_err(const nn::Mat<double>& a, const nn::Mat<double>& b) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), 1e-12});
}

nn::Mat<double> gaussian(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> z(0.0, 1.0);
  nn::Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = z(rng);
  return m;
}

nn::Act<double> gaussian_act(std::mt19937_64& rng, int c, int h, int w) {
  nn::Act<double> a(c, h, w);
  a.x = gaussian(rng, c, static_cast<Eigen::Index>(h) * w);
  return a;
}

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(77);
  std::map<std::string, double> worst;
  auto track = [&](const std::string& k, double e) { worst[k] = std::max(worst[k], e); };

  for (int trial = 0; trial < 50; ++trial) {
    // Sinkhorn: the gradient is exact for the regularised objective.
    {
      const std::size_t d = 4 + trial % 13;
      const auto a = uniform_measure(rng, d), b = uniform_measure(rng, d);
      SinkhornOptions o;
      o.beta = 5.0 + trial;
      o.max_iter = 100000;
      o.tol = 1e-12;
      const auto g = sinkhorn_grad(sinkhorn(a, b, o), a, b);
      nn::Mat<double> bv(static_cast<Eigen::Index>(d), 1), ga(static_cast<Eigen::Index>(d), 1);
      for (std::size_t j = 0; j < d; ++j) {
        bv(static_cast<Eigen::Index>(j)) = b.values()[j];
        ga(static_cast<Eigen::Index>(j)) = g[j];
      }
      auto obj = [&] {
        return sinkhorn(a, EmpiricalMeasure(std::vector<double>(bv.data(), bv.data() + bv.size())), o).objective;
      };
      track("sinkhorn", rel_err(ga, numeric_grad(bv, obj)));
    }
    // Convolution: weights, bias and input.
    {
      const int cin = 1 + trial % 3, cout = 1 + trial % 4, h = 2 + trial % 5, w = 3 + trial % 4;
      auto weight = gaussian(rng, cout, 9 * cin);
      auto bias = gaussian(rng, cout, 1);
      auto in = gaussian_act(rng, cin, h, w);
      const auto up = gaussian(rng, cout, static_cast<Eigen::Index>(h) * w);
      auto loss = [&] { return (nn::conv3_forward<double>(weight, bias.col(0), in).x.array() * up.array()).sum(); };
      nn::Mat<double> dw = nn::Mat<double>::Zero(cout, 9 * cin);
      nn::Vec<double> db = nn::Vec<double>::Zero(cout);
      nn::Act<double> din;
      nn::conv3_backward<double>(weight, in, up, &dw, &db, &din);
      track("conv", rel_err(dw, numeric_grad(weight, loss)));
      track("conv", rel_err(db, numeric_grad(bias, loss)));
      track("conv", rel_err(din.x, numeric_grad(in.x, loss)));
    }
    // Max-pool, ReLU, softmax cross-entropy.
    {
      auto in = gaussian_act(rng, 1 + trial % 3, 2 * (1 + trial % 3), 2 * (1 + trial % 4));
      std::vector<int> am;
      const auto out = nn::maxpool2_forward(in, am);
      const auto up = gaussian(rng, out.c, out.pixels());
      auto pool = [&] {
        std::vector<int> tmp;
        return (nn::maxpool2_forward(in, tmp).x.array() * up.array()).sum();
      };
      track("maxpool", rel_err(nn::maxpool2_backward(in, am, up).x, numeric_grad(in.x, pool)));

      auto r = gaussian_act(rng, 2, 3, 3);
      const auto ur = gaussian(rng, 2, 9);
      auto relu = [&] {
        auto t = r;
        nn::relu_inplace(t);
        return (t.x.array() * ur.array()).sum();
      };
      auto rr = r;
      nn::relu_inplace(rr);
      nn::Mat<double> g = ur;
      nn::relu_backward(rr, g);
      track("relu", rel_err(g, numeric_grad(r.x, relu)));

      auto logits = gaussian(rng, 4, 1);
      const int label = trial % 4;
      nn::Vec<double> dl;
      nn::cross_entropy<double>(logits.col(0), label, &dl);
      track("cross-entropy", rel_err(dl, numeric_grad(logits, [&] { return nn::cross_entropy<double>(logits.col(0), label); })));
    }
  }
  // Whole network, both heads, on a narrow double-precision instance.
  std::size_t kinked = 0, checked = 0;
  {
    const nn::NetConfig tiny{2, 3, 4, 3, 2, 4, 0.1};
    for (int trial = 0; trial < 3; ++trial) {
      nn::Network<double> net(tiny, 100 + trial);
      GrayImage img(16, 16);
      for (auto& v : img.data) v = static_cast<std::uint8_t>(rng() & 0xFF);
      const nn::Vec<double> wr = gaussian(rng, 4, 1).col(0);
      const auto wd = gaussian(rng, 1, 16);
      auto gr = net.zero_gradients(), gd = net.zero_gradients();
      net.backward_rotation(net.forward_rotation(img), wr, gr);
      net.backward_density(net.forward_density(img), wd, gd);
      for (std::size_t i = 0; i < net.params().size(); ++i) {
        auto probe = net;
        auto& v = probe.mutable_param(i).value;
        const auto fr = numeric_grad_smooth(v, [&] { return wr.dot(probe.logits(img)); }, gr.g[i], kinked);
        const auto fdn = numeric_grad_smooth(
            v, [&] { return (probe.forward_density(img).out.x.array() * wd.array()).sum(); }, gd.g[i], kinked);
        checked += 2 * static_cast<std::size_t>(v.size());
        if (fr.norm() > 0 || gr.g[i].norm() > 0) track("network", rel_err(gr.g[i], fr));
        if (fdn.norm() > 0 || gd.g[i].norm() > 0) track("network", rel_err(gd.g[i], fdn));
      }
    }
  }
  const double secs = seconds_since(t0);
  // A handful of kinked coordinates is expected; many would mean the check lost its teeth.
  bool ok = secs < 60.0 && kinked * 100 < checked;
  std::string detail;
  for (const auto& [k, e] : worst) {
    ok = ok && e < 1e-3;
    detail += k + " " + fmt(e, 2) + ", ";
  }
  return {ok, "worst relative error: " + detail + std::to_string(kinked) + " of " + std::to_string(checked) +
                  " network coordinates skipped at a kink, " + fmt(secs, 3) + " s"};
}

// ---- 3. prior calibration ----

Outcome prior_calibration() {
  const std::vector<double> alphas{1.5, 1.75, 1.9, 2.0, 2.1};
  const std::vector<double> c_maxes{10, 25, 50, 83.33, 120};
  const double target = 1.0 - 1.0 / 300.0;
  double worst = 0.0, worst_oracle = 0.0;
  for (double a : alphas) {
    for (double c : c_maxes) {
      const double l = calibrate_lambda(a, c, 300.0);
      worst = std::max(worst, std::abs(power_law_cdf(a, l, c) - target));
      worst_oracle = std::max(worst_oracle, std::abs(oracle::trapezoid_cdf(a, l, c) - target));
    }
  }
  const auto m = sample_prior(make_prior(2.0, 1200.0 / 36.0, 300.0), 100000, 31);
  std::size_t below = 0;
  for (double v : m.values()) below += v < 1.0;
  const double frac = static_cast<double>(below) / 1e5;
  return {worst < 1e-6 && worst_oracle < 1e-6 && std::abs(frac - 0.30) <= 0.01,
          "max |CDF(c_max) - (1 - 1/S)| " + fmt(worst, 2) + " (quadrature oracle " + fmt(worst_oracle, 2) +
              "); mass below 1: " + fmt(frac)};
}

// ---- 4. generative recovery ----

Outcome generative_recovery() {
  auto pure = [](double alpha) {
    auto s = make_prior(alpha, 1200.0 / 36.0, 300.0);
    s.head_mass_fraction = 0.0;
    return s;
  };
  const auto fit = fit_mle(sample_prior(pure(2.0), 10000, 404), Family::TruncatedPowerLaw);
  int best = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto m = sample_prior(pure(2.0), 10000, 5000 + trial);
    const double tpl = fit_mle(m, Family::TruncatedPowerLaw).log_likelihood;
    best += tpl >= fit_mle(m, Family::Pareto).log_likelihood && tpl >= fit_mle(m, Family::Lognormal).log_likelihood;
  }
  return {std::abs(fit.param1 - 2.0) <= 0.15 && best >= 18,
          "alpha fit " + fmt(fit.param1) + " (true 2); truncated power law best in " + std::to_string(best) + "/20"};
}

// ---- 5-11. training on the synthetic benchmark ----

struct Split2 {
  fs::path train, test;
};

struct SeedRuns {
  std::uint64_t seed = 0;
  Split2 plain, bimodal;
  Stage1Result stage1;
  double stage1_seconds = 0.0;
  std::map<std::string, double> mae;  // run name -> test MAE
  EvalReport plain_report;
  std::vector<std::string> plain_log, plus_log, semi_log;
  std::map<std::string, std::vector<double>> sweep_mae;
};

class Benchmark {
 public:
  Benchmark(fs::path work, std::set<int> wanted) : work_(std::move(work)), wanted_(std::move(wanted)) {}

  bool want(int c) const { return wanted_.count(c) > 0; }

  RunConfig config(std::uint64_t seed) const {
    RunConfig c;
    c.seed = seed;
    c.seed_set = true;
    return c;
  }

  void run_seed(std::uint64_t seed) {
    SeedRuns r;
    r.seed = seed;
    const auto t0 = Clock::now();
    const auto dir = work_ / ("seed" + std::to_string(seed));
    r.plain = make_split(dir / "plain", benchmark_spec(), seed);
    const auto cfg = config(seed);

    r.stage1 = train_stage1(load_images(r.plain.train / "manifest.csv"), cfg, {}, [&](const EpochLog& l) {
      note("seed " + std::to_string(seed) + " stage1 epoch " + std::to_string(l.epoch) + " acc " + fmt(l.val_metric));
      return true;
    });
    r.stage1_seconds = seconds_since(t0);
    note("seed " + std::to_string(seed) + " stage1 acc " + fmt(r.stage1.best_val_accuracy) + " after " +
         std::to_string(r.stage1.epochs_run) + " epochs");
    const Net& s1 = r.stage1.net;

    const auto train_manifest = r.plain.train / "manifest.csv";
    const auto images = load_images(train_manifest);
    const auto test = prepare_test(r.plain.test / "manifest.csv", s1, cfg);

    // Plain stage 2, under the access audit.
    if (want(5) || want(7) || want(8) || want(11)) {
      io::AccessLog::instance().start();
      const auto trained = run_stage2(s1, true, load_images(train_manifest), cfg, train_manifest);
      r.plain_log = io::AccessLog::instance().stop();
      r.plain_report = evaluate(trained.net, s1, test.crops, test.gt, cfg);
      r.mae["css"] = r.plain_report["css"].mae;
      r.mae["prior"] = r.plain_report["prior"].mae;
      r.mae["random"] = r.plain_report["random"].mae;
      plain_seconds_ += seconds_since(t0);
      std::string draws;
      for (double m : r.plain_report.random_draw_mae) draws += (draws.empty() ? "" : "/") + fmt(m);
      note("seed " + std::to_string(seed) + " plain css " + fmt(r.mae["css"]) + " prior " + fmt(r.mae["prior"]) +
           " random " + fmt(r.mae["random"]) + " (untrained heads " + draws + ")");
    }

    if (want(6) || want(11)) {
      r.bimodal = make_split(dir / "bimodal", benchmark_spec(1200, 2, 300, true), seed);
      const auto bm = r.bimodal.train / "manifest.csv";
      const auto btest = prepare_test(r.bimodal.test / "manifest.csv", s1, cfg);
      const auto bimages = load_images(bm);
      r.mae["bimodal-plain"] = test_mae(run_stage2(s1, true, bimages, cfg, bm).net, btest);
      auto pp = cfg;
      pp.mode = TrainMode::PlusPlus;
      io::AccessLog::instance().start();
      const auto trained = run_stage2(s1, true, load_images(bm), pp, bm);
      r.plus_log = io::AccessLog::instance().stop();
      r.mae["bimodal-plus-plus"] = test_mae(trained.net, btest);
      note("seed " + std::to_string(seed) + " bimodal plain " + fmt(r.mae["bimodal-plain"]) + " plus-plus " +
           fmt(r.mae["bimodal-plus-plus"]));
    }

    if (want(7)) {
      auto rc = cfg;
      rc.allow_random_fen = true;
      const Net random_fen({}, seed + 99);
      const auto rtest = prepare_test(r.plain.test / "manifest.csv", random_fen, rc);
      r.mae["random-fen"] = test_mae(run_stage2(random_fen, false, images, rc, train_manifest).net, rtest);
      note("seed " + std::to_string(seed) + " random FEN " + fmt(r.mae["random-fen"]));
    }

    if (want(8) || want(11)) {
      for (std::size_t k : {std::size_t{1}, std::size_t{10}}) {
        auto sc = cfg;
        sc.mode = TrainMode::Semi;
        sc.labeled = k;
        io::AccessLog::instance().start();
        const auto trained = run_stage2(s1, true, images, sc, train_manifest);
        auto log = io::AccessLog::instance().stop();
        if (k == 1) r.semi_log = std::move(log);
        r.mae["semi-" + std::to_string(k)] = test_mae(trained.net, test);
        note("seed " + std::to_string(seed) + " semi " + std::to_string(k) + " " + fmt(r.mae["semi-" + std::to_string(k)]));
      }
    }

    if (want(9)) {
      const auto data = prepare_stage2(images, s1, cfg);
      for (const auto& [param, values] :
           std::vector<std::pair<std::string, std::vector<double>>>{{"c_fmax", {1000, 1200, 1400}}, {"alpha", {1.9, 2.0, 2.1}}}) {
        const auto rep = sweep(s1, data, test, cfg, param, values);
        for (const auto& row : rep.rows) r.sweep_mae[param].push_back(row.errors.mae);
        note("seed " + std::to_string(seed) + " sweep " + param + " " + join(r.sweep_mae[param]));
      }
    }
    runs_.push_back(std::move(r));
  }

  const std::vector<SeedRuns>& runs() const { return runs_; }
  double plain_seconds() const { return plain_seconds_; }

  std::vector<double> collect(const std::string& key) const {
    std::vector<double> v;
    for (const auto& r : runs_) v.push_back(r.mae.at(key));
    return v;
  }

 private:
  static Split2 make_split(const fs::path& dir, const SceneSpec& spec, std::uint64_t seed) {
    // 75 training and 25 test images of 2x2 tiles: 300 training and 100 test crops.
    generate_dataset(spec, 75, seed, dir / "train");
    generate_dataset(spec, 25, seed + 100, dir / "test");
    return {dir / "train", dir / "test"};
  }

  static double test_mae(const Net& net, const TestData& t) {
    return mae_mse(predict_image_counts(net, t.crops, t.gt.size()), t.gt).mae;
  }

  fs::path work_;
  std::set<int> wanted_;
  std::vector<SeedRuns> runs_;
  double plain_seconds_ = 0.0;
};

bool opens_density(const std::vector<std::string>& log) {
  return std::any_of(log.begin(), log.end(), [](const std::string& p) { return fs::path(p).extension() == ".dmap"; });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string only, work;
  app.add_option("--only", only, "comma-separated criteria to run (default: all)");
  app.add_option("--work", work, "scratch directory for generated datasets (default: a temp dir, removed)");
  app.add_flag("--verbose", g_verbose, "progress on stderr");
  CLI11_PARSE(app, argc, argv);

  std::set<int> wanted;
  if (only.empty()) {
    for (int i = 1; i <= 11; ++i) wanted.insert(i);
  } else {
    for (const auto& s : io::split(only, ',')) wanted.insert(std::stoi(s));
  }
  const bool keep = !work.empty();
  const fs::path work_dir = keep ? fs::path(work) : fs::temp_directory_path() / ("cssccnn_acceptance_" + std::to_string(::getpid()));

  int failed = 0;
  auto line = [&](int id, const std::string& name, const Outcome& o) {
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << std::setw(2) << id << "  " << name << ": " << o.detail << std::endl;
    failed += !o.pass;
  };
  auto guarded = [&](int id, const std::string& name, const std::function<Outcome()>& f) {
    if (!wanted.count(id)) return;
    try {
      line(id, name, f());
    } catch (const std::exception& e) {
      line(id, name, {false, std::string("threw: ") + e.what()});
    }
  };

  guarded(1, "Sinkhorn cost bounds the exact EMD and tightens with beta", sinkhorn_bound);
  guarded(2, "gradients match central differences", gradient_fidelity);
  guarded(3, "prior calibration and head mass", prior_calibration);
  guarded(4, "power-law fit recovers alpha and wins the likelihood ranking", generative_recovery);

  const std::set<int> training{5, 6, 7, 8, 9, 10, 11};
  if (std::any_of(wanted.begin(), wanted.end(), [&](int c) { return training.count(c); })) {
    Benchmark bench(work_dir, wanted);
    std::string setup_error;
    try {
      for (std::uint64_t seed : {1u, 2u, 3u}) bench.run_seed(seed);
    } catch (const std::exception& e) {
      setup_error = e.what();
    }
    auto train_check = [&](int id, const std::string& name, const std::function<Outcome()>& f) {
      if (!setup_error.empty()) {
        if (wanted.count(id)) line(id, name, {false, "training failed: " + setup_error});
        return;
      }
      guarded(id, name, f);
    };

    train_check(5, "trained model beats the prior baseline, which beats the random head", [&] {
      bool ok = bench.plain_seconds() < 15 * 60;
      std::string d;
      for (const auto& r : bench.runs()) {
        const double css = r.mae.at("css"), prior = r.mae.at("prior"), random = r.mae.at("random");
        ok = ok && css < prior && prior < random && css < 0.85 * prior;
        d += "seed " + std::to_string(r.seed) + " " + fmt(css) + " < " + fmt(prior) + " < " + fmt(random) + " (ratio " +
             fmt(css / prior, 3) + "); ";
      }
      return Outcome{ok, d + fmt(bench.plain_seconds(), 4) + " s"};
    });
    train_check(6, "plus-plus is no worse than plain on bimodal data", [&] {
      const auto plain = bench.collect("bimodal-plain"), pp = bench.collect("bimodal-plus-plus");
      return Outcome{mean(pp) <= mean(plain), "mean MAE " + fmt(mean(pp)) + " vs " + fmt(mean(plain)) + " (per seed " +
                                                  join(pp) + " vs " + join(plain) + ")"};
    });
    train_check(7, "skipping stage 1 is worse", [&] {
      const auto rnd = bench.collect("random-fen"), css = bench.collect("css");
      return Outcome{mean(rnd) > mean(css), "mean MAE " + fmt(mean(rnd)) + " without stage 1 vs " + fmt(mean(css)) +
                                                " (per seed " + join(rnd) + " vs " + join(css) + ")"};
    });
    train_check(8, "labeled images help monotonically over {0, 1, 10}", [&] {
      const double l0 = mean(bench.collect("css")), l1 = mean(bench.collect("semi-1")), l10 = mean(bench.collect("semi-10"));
      return Outcome{l1 < l0 && l10 < l1, "mean MAE " + fmt(l0) + " > " + fmt(l1) + " > " + fmt(l10)};
    });
    train_check(9, "MAE is insensitive to c_fmax and alpha", [&] {
      std::map<std::string, double> spread;
      std::string d;
      for (const std::string p : {"c_fmax", "alpha"}) {
        std::vector<double> per_value(3, 0.0);
        for (const auto& r : bench.runs()) {
          for (std::size_t i = 0; i < 3; ++i) per_value[i] += r.sweep_mae.at(p)[i] / static_cast<double>(bench.runs().size());
        }
        const auto [lo, hi] = std::minmax_element(per_value.begin(), per_value.end());
        spread[p] = (*hi - *lo) / mean(per_value);
        d += p + " MAE " + join(per_value) + " spread " + fmt(100 * spread[p], 3) + "%; ";
      }
      return Outcome{spread["c_fmax"] < 0.15 && spread["alpha"] < 0.10, d};
    });
    train_check(10, "rotation pretext accuracy", [&] {
      bool ok = true;
      std::string d;
      for (const auto& r : bench.runs()) {
        ok = ok && r.stage1.best_val_accuracy > 0.90 && r.stage1.epochs_run <= 30;
        d += "seed " + std::to_string(r.seed) + " " + fmt(r.stage1.best_val_accuracy, 3) + " by epoch " +
             std::to_string(r.stage1.best_epoch) + " (" + fmt(r.stage1_seconds, 3) + " s); ";
      }
      return Outcome{ok, d};
    });
    train_check(11, "stage-2 and plus-plus training never open density files", [&] {
      bool ok = true;
      std::size_t files = 0;
      bool semi_seen = false;
      for (const auto& r : bench.runs()) {
        ok = ok && !r.plain_log.empty() && !r.plus_log.empty() && !opens_density(r.plain_log) && !opens_density(r.plus_log);
        files += r.plain_log.size() + r.plus_log.size();
        semi_seen = semi_seen || opens_density(r.semi_log);
      }
      // The semi run reads labels on purpose; seeing it in the log shows the audit is live.
      ok = ok && semi_seen;
      return Outcome{ok, std::to_string(files) + " audited reads, none a density map; the semi run's density reads were logged"};
    });
  }

  if (!keep) {
    std::error_code ec;
    fs::remove_all(work_dir, ec);
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << std::endl;
  return failed ? 1 : 0;
}
