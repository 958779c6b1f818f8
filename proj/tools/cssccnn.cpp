// cssccnn command-line front end.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cssccnn/checkpoint.hpp"
#include "cssccnn/pipeline/run.hpp"
#include "cssccnn/prior.hpp"
#include "cssccnn/synth.hpp"
#include "cssccnn/transport.hpp"

using namespace cssccnn;
namespace fs = std::filesystem;

namespace {

// Config file plus one --<key> flag per RunConfig key. Flags win over the file; the seed falls
// back to $CSSCCNN_SEED when neither sets it.
struct ConfigArgs {
  std::string file;
  std::map<std::string, std::string> overrides;

  void attach(CLI::App* app) {
    app->add_option("--config", file, "key = value configuration file")->check(CLI::ExistingFile);
    for (const auto& k : RunConfig::keys()) {
      auto* o = app->add_option("--" + k, overrides[k], "override config key " + k);
      o->group("Config keys");
    }
  }

  RunConfig resolve() const {
    RunConfig c;
    if (!file.empty()) c.load_file(file);
    for (const auto& [k, v] : overrides) {
      if (!v.empty()) c.set(k, v);
    }
    c.apply_env_seed();
    c.validate();
    return c;
  }
};

void log_epoch(const char* stage, const EpochLog& l) {
  std::cerr << stage << " epoch " << l.epoch << "  train " << l.train_loss << "  val " << l.val_metric << "  ("
            << l.seconds << " s)\n";
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  io::write_file(p, text);
}

nn::LoadedCheckpoint<float> load_stage(const fs::path& p, const std::string& want) {
  auto ck = nn::load_checkpoint<float>(p);
  if (ck.meta.stage != want) {
    throw InvalidArgument(p.string() + " is a " + ck.meta.stage + " checkpoint, expected " + want);
  }
  return ck;
}

std::vector<double> parse_values(const std::string& list) {
  std::vector<double> v;
  for (const auto& s : io::split(list, ',')) v.push_back(io::parse_double(io::trim(s), "--values"));
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised crowd counting with a power-law prior and Sinkhorn matching"};
  app.require_subcommand(1);

  // synth gen
  auto* synth = app.add_subcommand("synth", "synthetic data")->require_subcommand(1);
  auto* gen = synth->add_subcommand("gen", "write a synthetic benchmark split (P5 images, DMAP densities, manifest)");
  std::string gen_out;
  std::size_t gen_count = 75;
  std::uint64_t gen_seed = 1;
  double gen_cfmax = 1200, gen_alpha = 2, gen_simages = 300;
  bool gen_bimodal = false;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--count", gen_count, "number of images");
  gen->add_option("--seed", gen_seed, "dataset seed");
  gen->add_option("--c-fmax", gen_cfmax, "largest image count the prior allows");
  gen->add_option("--alpha", gen_alpha, "power-law exponent");
  gen->add_option("--s-images", gen_simages, "dataset size used to calibrate the tail");
  gen->add_flag("--bimodal", gen_bimodal, "sparse/dense two-regime crowds");

  // prior fit
  auto* prior = app.add_subcommand("prior", "count priors")->require_subcommand(1);
  auto* fit = prior->add_subcommand("fit", "maximum-likelihood fits of candidate count laws");
  std::string fit_in, fit_out, fit_family = "all", fit_loglog;
  double fit_xmin = 1.0;
  fit->add_option("--input", fit_in, "CSV with one count per line")->required()->check(CLI::ExistingFile);
  fit->add_option("--family", fit_family, "all, truncated-power-law, pareto or lognormal");
  fit->add_option("--out", fit_out, "report CSV (stdout when omitted)");
  fit->add_option("--loglog", fit_loglog, "log-log points CSV (default: <out>.loglog.csv)");
  fit->add_option("--x-min", fit_xmin, "lower cutoff of the fitted tail");

  // ot eval
  auto* ot = app.add_subcommand("ot", "optimal transport")->require_subcommand(1);
  auto* ot_eval = ot->add_subcommand("eval", "Sinkhorn loss between two samples");
  std::string ot_a, ot_b;
  double ot_beta = 10.0;
  int ot_iters = 500;
  ot_eval->add_option("--a", ot_a, "first sample CSV")->required()->check(CLI::ExistingFile);
  ot_eval->add_option("--b", ot_b, "second sample CSV")->required()->check(CLI::ExistingFile);
  ot_eval->add_option("--beta", ot_beta, "entropic regularisation strength");
  ot_eval->add_option("--max-iter", ot_iters, "iteration cap");

  // train
  auto* train = app.add_subcommand("train", "training stages")->require_subcommand(1);
  auto* t1 = train->add_subcommand("stage1", "rotation pretext training of the feature extractor");
  ConfigArgs t1_cfg;
  std::string t1_out = "stage1.ckpt";
  t1_cfg.attach(t1);
  t1->add_option("--out", t1_out, "checkpoint to write");

  auto* t2 = train->add_subcommand("stage2", "fit the density head to the prior");
  ConfigArgs t2_cfg;
  std::string t2_stage1, t2_out = "stage2.ckpt";
  bool t2_pp = false, t2_random = false;
  t2_cfg.attach(t2);
  t2->add_option("--stage1", t2_stage1, "stage-1 checkpoint");
  t2->add_option("--out", t2_out, "checkpoint to write");
  t2->add_flag("--plus-plus", t2_pp, "split matching by edge-derived sparse/dense groups");
  t2->add_flag("--allow-random-fen", t2_random, "train on a randomly initialised extractor (ablation)");

  auto* ts = train->add_subcommand("semi", "stage 2 with a few labeled images mixed in");
  ConfigArgs ts_cfg;
  std::string ts_stage1, ts_out = "semi.ckpt";
  ts_cfg.attach(ts);
  ts->add_option("--stage1", ts_stage1, "stage-1 checkpoint")->required();
  ts->add_option("--out", ts_out, "checkpoint to write");

  // eval
  auto* ev = app.add_subcommand("eval", "count errors of a trained model and the baselines");
  ConfigArgs ev_cfg;
  std::string ev_ckpt, ev_stage1, ev_out, ev_density;
  ev_cfg.attach(ev);
  ev->add_option("--ckpt", ev_ckpt, "trained checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--stage1", ev_stage1, "stage-1 checkpoint for the Random baseline (default: --ckpt's extractor with an untrained head)");
  ev->add_option("--out", ev_out, "report CSV (stdout when omitted)");
  ev->add_option("--density-dir", ev_density, "also write each predicted density map here as DMAP");

  // sweep
  auto* sw = app.add_subcommand("sweep", "retrain stage 2 across prior hyper-parameter values");
  ConfigArgs sw_cfg;
  std::string sw_stage1, sw_param, sw_values, sw_out;
  sw_cfg.attach(sw);
  sw->add_option("--stage1", sw_stage1, "stage-1 checkpoint")->required()->check(CLI::ExistingFile);
  sw->add_option("--parameter", sw_param, "c_fmax or alpha")->required();
  sw->add_option("--values", sw_values, "comma-separated values")->required();
  sw->add_option("--out", sw_out, "CSV (stdout when omitted)");

  // features dump
  auto* feat = app.add_subcommand("features", "feature extractor inspection")->require_subcommand(1);
  auto* dump = feat->add_subcommand("dump", "write channel-mean activation rasters per block as P5");
  std::string dump_ckpt, dump_manifest, dump_image, dump_out = "features";
  std::size_t dump_limit = 4;
  dump->add_option("--ckpt", dump_ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  dump->add_option("--manifest", dump_manifest, "dump the first --limit images of this manifest");
  dump->add_option("--image", dump_image, "dump one P5 image");
  dump->add_option("--limit", dump_limit, "images to dump from the manifest");
  dump->add_option("--out-dir", dump_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      auto spec = benchmark_spec(gen_cfmax, gen_alpha, gen_simages, gen_bimodal);
      const auto m = generate_dataset(spec, gen_count, gen_seed, gen_out);
      std::cout << "wrote " << m.rows.size() << " images to " << gen_out << "\n";
    } else if (fit->parsed()) {
      const EmpiricalMeasure samples(io::read_value_column(fit_in));
      std::vector<Family> families;
      if (fit_family == "all") {
        families.assign(std::begin(kAllFamilies), std::end(kAllFamilies));
      } else if (const auto f = parse_family(fit_family)) {
        families.push_back(*f);
      } else {
        throw InvalidArgument("unknown family " + fit_family);
      }
      FitOptions opts;
      opts.x_min = fit_xmin;
      std::string report = "family,param1,param2,loglik\n";
      std::string loglog = "series,log_count,log_density\n";
      for (const auto& [x, y] : empirical_loglog(samples, fit_xmin)) {
        loglog += "empirical," + io::format_double(x) + "," + io::format_double(y) + "\n";
      }
      for (Family f : families) {
        const auto r = fit_mle(samples, f, opts);
        report += std::string(family_name(f)) + "," + io::format_double(r.param1) + "," +
                  io::format_double(r.param2) + "," + io::format_double(r.log_likelihood) + "\n";
        for (const auto& [x, y] : r.loglog_curve) {
          loglog += std::string(family_name(f)) + "," + io::format_double(x) + "," + io::format_double(y) + "\n";
        }
      }
      if (fit_out.empty()) {
        std::cout << report;
      } else {
        write_text(fit_out, report);
        write_text(fit_loglog.empty() ? fit_out + ".loglog.csv" : fit_loglog, loglog);
      }
    } else if (ot_eval->parsed()) {
      const EmpiricalMeasure a(io::read_value_column(ot_a)), b(io::read_value_column(ot_b));
      SinkhornOptions o;
      o.beta = ot_beta;
      o.max_iter = ot_iters;
      const auto r = sinkhorn(a, b, o);
      std::cout << "loss " << io::format_double(r.loss) << "\n"
                << "iterations " << r.iterations << (r.converged ? "" : " (not converged)") << "\n"
                << "emd " << io::format_double(emd_1d_exact(a, b)) << "\n";
    } else if (t1->parsed()) {
      const auto cfg = t1_cfg.resolve();
      if (cfg.manifest.empty()) throw InvalidArgument("stage 1 needs --manifest");
      const auto r = train_stage1(load_images(cfg.manifest), cfg, {}, [](const EpochLog& l) {
        log_epoch("stage1", l);
        return true;
      });
      nn::save_checkpoint(t1_out, r.net, run_meta("stage1", cfg));
      std::cout << "best validation rotation accuracy " << r.best_val_accuracy << " at epoch " << r.best_epoch
                << "; wrote " << t1_out << "\n";
    } else if (t2->parsed() || ts->parsed()) {
      const bool semi = ts->parsed();
      auto cfg = (semi ? ts_cfg : t2_cfg).resolve();
      if (semi) {
        cfg.mode = TrainMode::Semi;
      } else if (t2_pp) {
        cfg.mode = TrainMode::PlusPlus;
      }
      if (t2_random) cfg.allow_random_fen = true;
      if (cfg.manifest.empty()) throw InvalidArgument("stage 2 needs --manifest");
      const std::string& s1 = semi ? ts_stage1 : t2_stage1;
      Net init;
      bool pretrained = false;
      if (!s1.empty()) {
        init = load_stage(s1, "stage1").net;
        pretrained = true;
      } else if (cfg.allow_random_fen) {
        init = Net({}, cfg.seed);
      } else {
        throw InvalidArgument("stage 2 needs --stage1 (or --allow-random-fen for the ablation)");
      }
      const auto images = load_images(cfg.manifest);
      const auto r = run_stage2(init, pretrained, images, cfg, cfg.manifest, [](const EpochLog& l) {
        log_epoch("stage2", l);
        return true;
      });
      const std::string& out = semi ? ts_out : t2_out;
      nn::save_checkpoint(out, r.net, run_meta(semi ? "semi" : "stage2", cfg));
      std::cout << "validation Sinkhorn loss " << r.initial_val_loss << " -> " << r.calibrated_val_loss
                << " (calibrated) -> " << r.best_val_loss << " (epoch "
                << r.best_epoch << "); wrote " << out << "\n";
    } else if (ev->parsed()) {
      const auto cfg = ev_cfg.resolve();
      const fs::path manifest = cfg.test_manifest.empty() ? cfg.manifest : cfg.test_manifest;
      if (manifest.empty()) throw InvalidArgument("eval needs --test_manifest (or --manifest)");
      const auto trained = nn::load_checkpoint<float>(ev_ckpt).net;
      Net stage1 = trained;
      if (!ev_stage1.empty()) {
        stage1 = load_stage(ev_stage1, "stage1").net;
      } else {
        // Same extractor, head as initialised before stage 2.
        const Net fresh(trained.config(), cfg.seed);
        for (std::size_t i = 0; i < fresh.params().size(); ++i) {
          if (fresh.params()[i].group == nn::Group::Density) stage1.mutable_param(i).value = fresh.params()[i].value;
        }
      }
      const auto test = prepare_test(manifest, trained, cfg);
      const auto rep = evaluate(trained, stage1, test.crops, test.gt, cfg);
      if (ev_out.empty()) std::cout << rep.csv();
      else write_text(ev_out, rep.csv());
      if (!ev_density.empty()) {
        const auto images = load_images(manifest);
        fs::create_directories(ev_density);
        for (std::size_t i = 0; i < images.size(); ++i) {
          const auto stem = fs::path(images.names[i]).stem().string();
          write_dmap(fs::path(ev_density) / (stem + ".dmap"), predict_density_map(trained, images.images[i], cfg.crop_size));
        }
      }
    } else if (sw->parsed()) {
      const auto cfg = sw_cfg.resolve();
      if (cfg.manifest.empty() || cfg.test_manifest.empty()) {
        throw InvalidArgument("sweep needs --manifest and --test_manifest");
      }
      const auto s1 = load_stage(sw_stage1, "stage1").net;
      const auto data = prepare_stage2(load_images(cfg.manifest), s1, cfg);
      const auto test = prepare_test(cfg.test_manifest, s1, cfg);
      const auto rep = sweep(s1, data, test, cfg, sw_param, parse_values(sw_values));
      if (sw_out.empty()) std::cout << rep.csv();
      else write_text(sw_out, rep.csv());
      std::cerr << "MAE spread " << 100.0 * rep.relative_spread() << "% of the mean\n";
    } else if (dump->parsed()) {
      const auto net = nn::load_checkpoint<float>(dump_ckpt).net;
      std::size_t written = 0;
      if (!dump_image.empty()) {
        written += dump_features(net, read_pgm(dump_image), dump_out, fs::path(dump_image).stem().string()).size();
      }
      if (!dump_manifest.empty()) {
        const auto images = load_images(dump_manifest);
        for (std::size_t i = 0; i < images.size() && i < dump_limit; ++i) {
          written += dump_features(net, images.images[i], dump_out, fs::path(images.names[i]).stem().string()).size();
        }
      }
      if (written == 0) throw InvalidArgument("features dump needs --image or --manifest");
      std::cout << "wrote " << written << " rasters to " << dump_out << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
