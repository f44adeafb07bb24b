#pragma once

#include <chrono>
#include <cstdio>
#include <limits>
#include <filesystem>
#include <string>
#include <thread>
#include <vector>

#include "hk/bnn.hpp"
#include "hk/genmodel.hpp"
#include "hk/hklearn.hpp"
#include "hk/io.hpp"
#include "hk/oracles.hpp"
#include "hk/svgd.hpp"
#include "hk/validate.hpp"

namespace hk::cli {

using io::json;

inline constexpr int exit_ok = 0;
inline constexpr int exit_validation_failure = 1;
inline constexpr int exit_config_error = 2;

namespace detail {

template <class T>
T get_or(const json& j, const std::string& key, T fallback) {
    if (j.contains(key)) return j.at(key).get<T>();
    return fallback;
}

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create output directory " + dir);
}

inline hklearn::HkConfig hk_config_from(const json& j) {
    hklearn::HkConfig cfg;
    cfg.alpha = get_or(j, "alpha", cfg.alpha);
    cfg.beta = get_or(j, "beta", cfg.beta);
    cfg.lambda = get_or(j, "lambda", cfg.lambda);
    cfg.outer_steps = get_or(j, "outer_steps", cfg.outer_steps);
    cfg.inner_opt_steps = get_or(j, "inner_opt_steps", cfg.inner_opt_steps);
    cfg.batch_size = get_or(j, "batch_size", std::size_t(cfg.batch_size));
    cfg.lr = get_or(j, "lr", cfg.lr);
    cfg.adam_beta1 = get_or(j, "adam_beta1", cfg.adam_beta1);
    cfg.adam_beta2 = get_or(j, "adam_beta2", cfg.adam_beta2);
    cfg.reset_adam_each_outer = get_or(j, "reset_adam_each_outer", cfg.reset_adam_each_outer);
    cfg.keep_best_inner = get_or(j, "keep_best_inner", cfg.keep_best_inner);
    cfg.sinkhorn_eps_scale = get_or(j, "sinkhorn_eps_scale", cfg.sinkhorn_eps_scale);
    cfg.sinkhorn_iters = get_or(j, "sinkhorn_iters", cfg.sinkhorn_iters);
    cfg.plain_sgd = get_or(j, "plain_sgd", cfg.plain_sgd);
    cfg.normalized_sgd = get_or(j, "normalized_sgd", cfg.normalized_sgd);
    cfg.penalty_rate_target = get_or(j, "penalty_rate_target", cfg.penalty_rate_target);
    std::string est = get_or<std::string>(j, "entropy_estimator", "A");
    cfg.estimator = est == "B" ? hklearn::EntropyEstimator::B : hklearn::EntropyEstimator::A;
    std::string mode = get_or<std::string>(j, "measure_mode", "normalized");
    if (mode == "uniform-init") cfg.mode = hklearn::MeasureMode::uniform_init;
    else if (mode == "unnormalized") cfg.mode = hklearn::MeasureMode::unnormalized;
    else cfg.mode = hklearn::MeasureMode::normalized;
    cfg.validate();
    return cfg;
}

}  // namespace detail

// ---- toy 1-D heat-kernel recovery ----

// Implied bandwidth time of a fresh kernel: the slice exp(-||h(x)-h(y)||^2)
// behaves like exp(-(x-y)^2 / (4 t0)) for nearby points, so the local
// feature slope s gives t0 = 1 / (4 s^2).
inline double initial_bandwidth(const kernels::DeepRbfKernel& kernel,
                                double probe_gap = 0.25) {
    std::size_t d = kernel.input_dim();
    Tensor probes = Tensor::zeros({2, d});
    probes.at(1, 0) = probe_gap;
    Tensor H = kernel.features(probes);
    double slope = std::sqrt(sqdist(H.row_span(0), H.row_span(1))) / probe_gap;
    if (slope <= 0.0) return std::numeric_limits<double>::infinity();
    return 1.0 / (4.0 * slope * slope);
}

struct Toy1dResult {
    std::vector<int> checkpoints;
    std::vector<double> l2;   // trapezoid integral of the squared gap
    std::vector<double> mse;  // grid-mean squared gap
    bool aborted = false;
};

// Trains the kernel on uniform samples of the interval and compares the
// scaled slice a_t * k(0, .) against the closed-form line kernel at the
// checkpoint iterations (time = tau * iteration).
inline Toy1dResult run_toy1d_core(const json& cfg, std::uint64_t seed,
                                  const std::string& out_dir) {
    using kernels::DeepRbfKernel;
    detail::ensure_dir(out_dir);
    Rng rng(seed);

    std::size_t n_points = detail::get_or(cfg, "points", std::size_t(512));
    double lo = detail::get_or(cfg, "domain_lo", -10.0);
    double hi = detail::get_or(cfg, "domain_hi", 10.0);
    double grid_step = detail::get_or(cfg, "grid_step", 0.02);
    std::vector<int> checkpoints =
        detail::get_or(cfg, "checkpoints", std::vector<int>{1, 5, 20, 50});

    json hkj = {{"alpha", 1.0},   {"beta", 10.0},          {"lambda", 0.1},
                {"lr", 0.02},     {"inner_opt_steps", 1},  {"sinkhorn_eps_scale", 0.005},
                {"sinkhorn_iters", 100}, {"batch_size", 256}, {"plain_sgd", true}};
    if (cfg.contains("hk"))
        for (auto& [key, val] : cfg.at("hk").items()) hkj[key] = val;
    hklearn::HkConfig hk = detail::hk_config_from(hkj);

    std::size_t hidden = detail::get_or(cfg, "feature_hidden", std::size_t(32));
    std::size_t feat_out = detail::get_or(cfg, "feature_out", std::size_t(8));
    double init_gain = detail::get_or(cfg, "init_gain", 4.0);
    double t0_lo = detail::get_or(cfg, "init_bandwidth_lo", 0.012);
    double t0_hi = detail::get_or(cfg, "init_bandwidth_hi", 0.05);

    Tensor X = Tensor::zeros({n_points, 1});
    for (std::size_t i = 0; i < n_points; ++i) X.at(i, 0) = rng.uniform(lo, hi);

    auto spec = autodiff::MlpSpec::make({1, hidden, hidden, feat_out});
    spec.output_gain = init_gain;
    // rejection-sample the initialization until the starting bandwidth lands
    // in a workable band; rescaling instead would distort the layer scales
    DeepRbfKernel kernel = DeepRbfKernel::create(spec, rng.next_u64());
    for (int tries = 0; tries < 32; ++tries) {
        if (initial_bandwidth(kernel) >= t0_lo && initial_bandwidth(kernel) <= t0_hi) break;
        kernel = DeepRbfKernel::create(spec, rng.next_u64());
    }

    // Each update advances diffusion time by a fixed increment; the step-size
    // controller targets the matching per-step growth of the mean kernel
    // value, estimated from the batch pair distances alone.
    double time_per_iter = detail::get_or(cfg, "time_per_iteration", 0.01);
    auto pen_at = [&X, n_points](double t) {
        double s = 0.0;
        std::size_t cnt = 0, stride = n_points > 256 ? n_points / 256 : 1;
        for (std::size_t i = 0; i < X.rows(); i += stride)
            for (std::size_t j = 0; j < X.rows(); j += stride) {
                if (i == j) continue;
                double d = X.at(i, 0) - X.at(j, 0);
                s += std::exp(-d * d / (4.0 * t));
                ++cnt;
            }
        return s / double(cnt);
    };
    double t_anchor = std::max(initial_bandwidth(kernel), 1e-4);

    std::vector<double> grid = oracles::make_grid(lo, hi, grid_step);
    std::vector<double> zero = {0.0};

    Toy1dResult result;
    io::Csv summary;
    summary.header = {"iteration", "t", "l2", "mse"};
    hklearn::Trajectory full_traj;

    hklearn::HkConfig step_cfg = hk;
    step_cfg.outer_steps = 1;
    hklearn::HkState opt_state;
    int done = 0;
    std::vector<std::string> files;
    for (int target : checkpoints) {
        for (; done < target; ++done) {
            if (hk.penalty_rate_target == 0.0) {
                // per-iteration setpoint follows the schedule's own pace
                double t_cur = std::max(t_anchor, time_per_iter * double(done));
                double t_next = std::max(t_anchor, time_per_iter * double(done + 1));
                step_cfg.penalty_rate_target =
                    std::max(pen_at(t_next) - pen_at(t_cur), 1e-5);
            }
            auto traj = hklearn::heat_kernel_learning(X, kernel, step_cfg, rng, &opt_state);
            if (traj.aborted) {
                result.aborted = true;
                break;
            }
            for (auto& p : traj.points) {
                p.outer = done + 1;
                full_traj.points.push_back(p);
            }
            for (auto& o : traj.outer) full_traj.outer.push_back({done + 1, o.start_objective,
                                                                  o.end_objective});
        }
        if (result.aborted) break;
        double t = time_per_iter * double(target);
        double at = oracles::a_t_line(t);
        io::Csv curve;
        curve.header = {"x", "learned", "oracle"};
        for (double x : grid) {
            std::vector<double> xv = {x};
            double learned = at * kernel.eval(zero, xv);
            double truth = oracles::heat_kernel_line(t, 0.0, x);
            curve.rows.push_back({x, learned, truth});
        }
        std::string path = out_dir + "/kernel_it" + std::to_string(target) + ".csv";
        curve.write(path);
        files.push_back(path);

        auto learned_fn = [&](double x) {
            std::vector<double> xv = {x};
            return at * kernel.eval(zero, xv);
        };
        auto oracle_fn = [&](double x) { return oracles::heat_kernel_line(t, 0.0, x); };
        double l2 = oracles::l2_kernel_distance(learned_fn, oracle_fn, grid);
        double mse = 0.0;
        for (double x : grid) {
            double d = learned_fn(x) - oracle_fn(x);
            mse += d * d;
        }
        mse /= double(grid.size());
        result.checkpoints.push_back(target);
        result.l2.push_back(l2);
        result.mse.push_back(mse);
        summary.rows.push_back({double(target), t, l2, mse});
    }

    summary.write(out_dir + "/l2.csv");
    files.push_back(out_dir + "/l2.csv");
    io::write_trajectory_csv(full_traj, out_dir + "/trajectory.csv");
    files.push_back(out_dir + "/trajectory.csv");
    io::save_params(kernel.params, out_dir + "/kernel_params.json");
    files.push_back(out_dir + "/kernel_params.json");

    io::RunManifest manifest;
    manifest.config = cfg;
    manifest.config["seed"] = seed;
    manifest.files = files;
    manifest.write(out_dir + "/manifest.json");
    return result;
}

// ---- SVGD on a 1-D gaussian target ----

struct SvgdGaussResult {
    double mean = 0.0;
    double variance = 0.0;
    double baseline_mean = 0.0;
    double baseline_variance = 0.0;
    bool aborted = false;
};

inline SvgdGaussResult run_svgd_gauss_core(const json& cfg, std::uint64_t seed,
                                           const std::string& out_dir) {
    detail::ensure_dir(out_dir);
    Rng rng(seed);

    std::size_t n = detail::get_or(cfg, "particles", std::size_t(10));
    double init_mean = detail::get_or(cfg, "init_mean", 5.0);
    double init_std = detail::get_or(cfg, "init_std", 1.0);
    int alternations = detail::get_or(cfg, "alternations", 500);

    svgd::HkSvgdConfig hcfg;
    hcfg.hk = detail::hk_config_from(cfg.contains("hk") ? cfg.at("hk") : json::object());
    hcfg.hk.outer_steps = 1;
    hcfg.svgd.step_size = detail::get_or(cfg, "step_size", 0.2);
    hcfg.svgd.adagrad = detail::get_or(cfg, "adagrad", true);
    hcfg.alternations = alternations;
    hcfg.reinit_kernel_each_alt = detail::get_or(cfg, "reinit_kernel_each_alt", false);

    svgd::TargetDensity target = svgd::gaussian_target({0.0}, 1.0);

    svgd::ParticleSet init;
    init.X = Tensor::zeros({n, 1});
    for (std::size_t i = 0; i < n; ++i) init.X.at(i, 0) = init_mean + init_std * rng.normal();

    std::size_t fh = detail::get_or(cfg, "feature_hidden", std::size_t(16));
    std::size_t fo = detail::get_or(cfg, "feature_out", std::size_t(8));
    auto kspec = autodiff::MlpSpec::make({1, fh, fo});
    kernels::DeepRbfKernel kernel = kernels::DeepRbfKernel::create(kspec, rng.next_u64());

    auto hk_res = svgd::hk_svgd(target, init, kernel, hcfg, rng);

    // paired vanilla baseline under the same budget
    Rng rng_b(seed ^ 0xba5eba11ULL);
    svgd::ParticleSet base;
    base.X = Tensor::zeros({n, 1});
    for (std::size_t i = 0; i < n; ++i) base.X.at(i, 0) = init_mean + init_std * rng_b.normal();
    svgd::SvgdState bstate;
    auto med_ops = svgd::rbf_median_ops();
    for (int a = 0; a < alternations; ++a)
        base = svgd::svgd_step(base, target, med_ops, hcfg.svgd, &bstate);

    SvgdGaussResult res;
    res.aborted = hk_res.aborted;
    svgd::particle_moments(hk_res.particles.X, res.mean, res.variance);
    svgd::particle_moments(base.X, res.baseline_mean, res.baseline_variance);

    io::Csv trace;
    trace.header = {"alternation", "kernel_objective", "particle_mean", "particle_var"};
    for (const auto& r : hk_res.trace)
        trace.rows.push_back({double(r.alternation), r.kernel_objective, r.particle_mean,
                              r.particle_var});
    trace.write(out_dir + "/trajectory.csv");

    json metrics;
    metrics["method"] = "hk-svgd";
    metrics["seed"] = seed;
    metrics["mean"] = res.mean;
    metrics["variance"] = res.variance;
    metrics["baseline_mean"] = res.baseline_mean;
    metrics["baseline_variance"] = res.baseline_variance;
    metrics["aborted"] = res.aborted;
    io::write_json(metrics, out_dir + "/metrics.json");

    io::RunManifest manifest;
    manifest.config = cfg;
    manifest.config["seed"] = seed;
    manifest.files = {out_dir + "/trajectory.csv", out_dir + "/metrics.json"};
    manifest.write(out_dir + "/manifest.json");
    return res;
}

// ---- BNN regression ----

inline svgd::Dataset bnn_dataset_from(const json& cfg, std::uint64_t seed) {
    std::string name = detail::get_or<std::string>(cfg, "dataset", "sinusoid");
    std::size_t n = detail::get_or(cfg, "dataset_size", std::size_t(120));
    double noise = detail::get_or(cfg, "dataset_noise", 0.1);
    if (name == "sinusoid") return svgd::make_sinusoid(n, noise, seed);
    if (name == "linear") return svgd::make_linear(n, noise, seed);
    if (name == "heteroscedastic") return svgd::make_heteroscedastic(n, seed);
    // otherwise interpret as a CSV path
    if (!std::filesystem::exists(name))
        throw std::runtime_error("missing dataset file: " + name);
    return io::load_dataset_csv(name);
}

inline std::vector<svgd::BnnMetrics> run_bnn_core(const json& cfg, std::uint64_t seed,
                                                  const std::string& out_dir) {
    detail::ensure_dir(out_dir);
    svgd::BnnSpec spec;
    spec.hidden = detail::get_or(cfg, "hidden", std::size_t(50));
    spec.particles = detail::get_or(cfg, "particles", std::size_t(10));
    spec.obs_noise = detail::get_or(cfg, "obs_noise", 0.2);
    spec.prior_scale = detail::get_or(cfg, "prior_scale", 1.0);

    svgd::BnnTrainConfig tc;
    tc.iterations = detail::get_or(cfg, "iterations", 300);
    tc.svgd.step_size = detail::get_or(cfg, "step_size", 0.05);
    tc.svgd.adagrad = true;
    if (cfg.contains("hk")) tc.hk = detail::hk_config_from(cfg.at("hk"));
    tc.hk.outer_steps = 1;
    tc.feat_hidden = detail::get_or(cfg, "feature_hidden", std::size_t(32));
    tc.feat_out = detail::get_or(cfg, "feature_out", std::size_t(32));

    svgd::Dataset data = bnn_dataset_from(cfg, seed ^ 0xda7a5e7ULL);
    spec.input_dim = data.X.cols();

    std::string method = detail::get_or<std::string>(cfg, "method", "both");
    std::vector<std::string> methods;
    if (method == "both") methods = {"svgd", "hk-svgd"};
    else methods = {method};

    std::vector<svgd::BnnMetrics> all;
    json records = json::array();
    for (const auto& m : methods) {
        auto metrics = svgd::bnn_regression(data, spec, m, tc, seed);
        json rec;
        rec["method"] = metrics.method;
        rec["seed"] = metrics.seed;
        rec["rmse"] = metrics.rmse;
        rec["test_ll"] = metrics.test_ll;
        rec["wallclock_s"] = metrics.wallclock_s;
        records.push_back(rec);
        all.push_back(metrics);
    }
    io::write_json(json{{"runs", records}}, out_dir + "/metrics.json");

    io::RunManifest manifest;
    manifest.config = cfg;
    manifest.config["seed"] = seed;
    manifest.files = {out_dir + "/metrics.json"};
    manifest.write(out_dir + "/manifest.json");
    return all;
}

// ---- 2-D generative training ----

struct Gan2dEval {
    std::vector<double> mode_fractions;
    double min_mode_fraction = 1.0;
    double mmd2_holdout = 0.0;
    bool aborted = false;
};

// fixed evaluation kernel: exp(-||x - y||^2), decoupled from training
inline double eval_rbf1(std::span<const double> a, std::span<const double> b) {
    return std::exp(-sqdist(a, b));
}

inline double mmd2_holdout_rbf1(const Tensor& X, const Tensor& Y) {
    kernels::KernelFn fn = eval_rbf1;
    Tensor Gxx = kernels::gram(fn, X, X).K;
    Tensor Gyy = kernels::gram(fn, Y, Y).K;
    Tensor Gxy = kernels::gram(fn, X, Y).K;
    return genmodel::mmd2_from_grams(Gxx, Gyy, Gxy, genmodel::MmdEstimator::unbiased);
}

inline Gan2dEval gan2d_eval(const genmodel::Generator& gen, double radius, std::size_t modes,
                            std::size_t eval_samples, Rng& rng,
                            const genmodel::DataSampler& data) {
    Gan2dEval ev;
    Tensor Y = gen.sample(eval_samples, rng);
    ev.mode_fractions.assign(modes, 0.0);
    for (std::size_t i = 0; i < eval_samples; ++i) {
        double best = 1e300;
        std::size_t arg = 0;
        for (std::size_t m = 0; m < modes; ++m) {
            double ang = 2.0 * oracles::pi * double(m) / double(modes);
            double dx = Y.at(i, 0) - radius * std::cos(ang);
            double dy = Y.at(i, 1) - radius * std::sin(ang);
            double d = dx * dx + dy * dy;
            if (d < best) {
                best = d;
                arg = m;
            }
        }
        ev.mode_fractions[arg] += 1.0;
    }
    for (auto& f : ev.mode_fractions) {
        f /= double(eval_samples);
        ev.min_mode_fraction = std::min(ev.min_mode_fraction, f);
    }
    Tensor holdout = data(eval_samples, rng);
    Tensor Y2 = gen.sample(eval_samples, rng);
    ev.mmd2_holdout = mmd2_holdout_rbf1(holdout, Y2);
    return ev;
}

inline genmodel::GanConfig gan_config_from(const json& cfg) {
    genmodel::GanConfig g;
    g.gamma1 = detail::get_or(cfg, "gamma1", g.gamma1);
    g.gamma2 = detail::get_or(cfg, "gamma2", g.gamma2);
    g.gamma3 = detail::get_or(cfg, "gamma3", g.gamma3);
    g.gamma4 = detail::get_or(cfg, "gamma4", g.gamma4);
    g.gamma5 = detail::get_or(cfg, "gamma5", g.gamma5);
    g.alpha = detail::get_or(cfg, "alpha", g.alpha);
    g.beta = detail::get_or(cfg, "beta", g.beta);
    g.lambda = detail::get_or(cfg, "lambda", g.lambda);
    g.zeta = detail::get_or(cfg, "zeta", g.zeta);
    g.loss = detail::get_or<std::string>(cfg, "loss", "mmd") == "smmd" ? genmodel::GanLoss::smmd
                                                                       : genmodel::GanLoss::mmd;
    g.family = detail::get_or<std::string>(cfg, "kernel_family", "deep-rbf") == "random-feature"
                   ? genmodel::KernelFamily::random_feature
                   : genmodel::KernelFamily::deep_rbf;
    g.generator_steps = detail::get_or(cfg, "generator_steps", g.generator_steps);
    g.kernel_steps = detail::get_or(cfg, "kernel_steps", g.kernel_steps);
    g.jko_steps = detail::get_or(cfg, "jko_steps", g.jko_steps);
    g.kernel_inner_adam = detail::get_or(cfg, "kernel_inner_adam", g.kernel_inner_adam);
    g.batch_size = detail::get_or(cfg, "batch_size", g.batch_size);
    g.scale_kernel_objective = detail::get_or(cfg, "scale_kernel_objective", false);
    g.spectral_norm = detail::get_or(cfg, "spectral_norm", g.spectral_norm);
    g.spectral_post_scale = detail::get_or(cfg, "spectral_post_scale", g.spectral_post_scale);
    g.lr_gen = detail::get_or(cfg, "lr_gen", g.lr_gen);
    g.lr_kernel = detail::get_or(cfg, "lr_kernel", g.lr_kernel);
    g.sinkhorn_iters = detail::get_or(cfg, "sinkhorn_iters", g.sinkhorn_iters);
    g.sinkhorn_eps_scale = detail::get_or(cfg, "sinkhorn_eps_scale", g.sinkhorn_eps_scale);
    g.validate();
    return g;
}

inline Gan2dEval run_gan2d_core(const json& cfg, std::uint64_t seed,
                                const std::string& out_dir) {
    detail::ensure_dir(out_dir);
    Rng rng(seed);
    genmodel::GanConfig g = gan_config_from(cfg);

    double radius = detail::get_or(cfg, "ring_radius", 2.0);
    double stddev = detail::get_or(cfg, "ring_std", 0.2);
    std::size_t modes = detail::get_or(cfg, "ring_modes", std::size_t(8));
    std::string target = detail::get_or<std::string>(cfg, "target", "ring8");
    genmodel::DataSampler data =
        target == "gauss" ? genmodel::gaussian_sampler({0.0, 0.0}, 1.0)
                          : genmodel::ring_sampler(radius, stddev, modes);

    std::size_t noise_dim = detail::get_or(cfg, "noise_dim", std::size_t(8));
    std::size_t gen_hidden = detail::get_or(cfg, "gen_hidden", std::size_t(64));
    genmodel::Generator gen = genmodel::Generator::create(noise_dim, gen_hidden, 2,
                                                          rng.next_u64());

    std::size_t kh = detail::get_or(cfg, "kernel_hidden", std::size_t(64));
    std::size_t ko = detail::get_or(cfg, "kernel_out", std::size_t(16));

    genmodel::TrainResult tr;
    if (g.family == genmodel::KernelFamily::deep_rbf) {
        auto kspec = autodiff::MlpSpec::make({2, kh, kh, ko});
        kernels::DeepRbfKernel kernel = kernels::DeepRbfKernel::create(kspec, rng.next_u64());
        tr = genmodel::train_dgm(data, gen, kernel, g, rng);
    } else {
        auto kernel = kernels::RandomFeatureKernel::create(2, ko, kh,
                                                           detail::get_or(cfg, "num_freq",
                                                                          std::size_t(16)),
                                                           4, rng.next_u64());
        tr = genmodel::train_dgm(data, gen, kernel, g, rng);
    }

    io::Csv metrics;
    metrics.header = {"epoch", "kernel_objective", "mmd2", "smmd_sigma"};
    for (const auto& r : tr.trace)
        metrics.rows.push_back({double(r.epoch), r.kernel_objective, r.mmd2_train,
                                r.smmd_sigma});
    metrics.write(out_dir + "/metrics.csv");

    std::size_t eval_samples = detail::get_or(cfg, "eval_samples", std::size_t(1000));
    Gan2dEval ev = gan2d_eval(gen, radius, modes, eval_samples, rng, data);
    ev.aborted = tr.aborted;

    Tensor samples = gen.sample(eval_samples, rng);
    io::Csv sample_csv;
    sample_csv.header = {"x", "y"};
    for (std::size_t i = 0; i < samples.rows(); ++i)
        sample_csv.rows.push_back({samples.at(i, 0), samples.at(i, 1)});
    sample_csv.write(out_dir + "/samples.csv");

    json ev_json;
    ev_json["mode_fractions"] = ev.mode_fractions;
    ev_json["min_mode_fraction"] = ev.min_mode_fraction;
    ev_json["mmd2_holdout"] = ev.mmd2_holdout;
    ev_json["aborted"] = ev.aborted;
    io::write_json(ev_json, out_dir + "/eval.json");

    io::RunManifest manifest;
    manifest.config = cfg;
    manifest.config["seed"] = seed;
    manifest.files = {out_dir + "/metrics.csv", out_dir + "/samples.csv",
                      out_dir + "/eval.json"};
    manifest.write(out_dir + "/manifest.json");
    return ev;
}

// ---- validation report ----

inline int run_validate(bool perturb = false, std::FILE* out = stdout) {
    validate::Options opts;
    opts.perturb_line_kernel = perturb;
    auto checks = validate::validate_suite(opts);
    std::fprintf(out, "%-32s %14s %14s  %s\n", "check", "value", "tolerance", "status");
    for (const auto& c : checks)
        std::fprintf(out, "%-32s %14.6g %14.6g  %s\n", c.name.c_str(), c.value, c.tolerance,
                     c.pass ? "pass" : "FAIL");
    bool ok = validate::all_pass(checks);
    std::fprintf(out, "%zu checks, %s\n", checks.size(), ok ? "all passed" : "FAILURES");
    return ok ? exit_ok : exit_validation_failure;
}

// ---- seeded fan-out driver shared by the CLI ----

struct RunRequest {
    std::string experiment;  // toy1d | svgd-gauss | svgd-bnn | gan2d | validate
    std::string config_path;
    std::string out_dir = "out";
    std::uint64_t seed = 0;
    int jobs = 1;
};

inline int run_one(const std::string& experiment, const json& cfg, std::uint64_t seed,
                   const std::string& out_dir) {
    if (experiment == "toy1d") {
        run_toy1d_core(cfg, seed, out_dir);
        return exit_ok;
    }
    if (experiment == "svgd-gauss") {
        run_svgd_gauss_core(cfg, seed, out_dir);
        return exit_ok;
    }
    if (experiment == "svgd-bnn") {
        run_bnn_core(cfg, seed, out_dir);
        return exit_ok;
    }
    if (experiment == "gan2d") {
        run_gan2d_core(cfg, seed, out_dir);
        return exit_ok;
    }
    throw std::runtime_error("unknown experiment: " + experiment);
}

inline int run(const RunRequest& req) {
    try {
        if (req.experiment == "validate") return run_validate();
        json cfg = json::object();
        if (!req.config_path.empty()) {
            if (!std::filesystem::exists(req.config_path)) {
                std::fprintf(stderr, "error: missing config file: %s\n",
                             req.config_path.c_str());
                return exit_config_error;
            }
            cfg = io::load_json(req.config_path);
        }
        if (req.jobs <= 1) return run_one(req.experiment, cfg, req.seed, req.out_dir);
        // seed sweep: independent jobs in subdirectories
        std::vector<int> codes(req.jobs, exit_ok);
        std::vector<std::thread> threads;
        for (int j = 0; j < req.jobs; ++j) {
            threads.emplace_back([&, j] {
                try {
                    std::string sub = req.out_dir + "/seed_" + std::to_string(req.seed + j);
                    codes[j] = run_one(req.experiment, cfg, req.seed + j, sub);
                } catch (const std::exception& e) {
                    std::fprintf(stderr, "error (seed %llu): %s\n",
                                 static_cast<unsigned long long>(req.seed + j), e.what());
                    codes[j] = exit_config_error;
                }
            });
        }
        for (auto& t : threads) t.join();
        for (int c : codes)
            if (c != exit_ok) return c;
        return exit_ok;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_config_error;
    }
}

}  // namespace hk::cli
