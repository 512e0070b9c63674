#pragma once

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "varfilter/checkpoint.hpp"
#include "varfilter/config.hpp"
#include "varfilter/dataset.hpp"
#include "varfilter/filtering.hpp"
#include "varfilter/gradcheck.hpp"
#include "varfilter/kalman.hpp"

namespace varfilter {

inline int default_thread_count() {
    if (const char* env = std::getenv("VARFILTER_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    return 1;
}

namespace cli_detail {

inline SequenceDataset dataset_for(const nlohmann::json& cfg, const std::string& key,
                                   const std::string& override_path) {
    std::string path = override_path;
    if (path.empty()) {
        if (!cfg.contains("data") || !cfg["data"].contains(key)) {
            throw ConfigError("config: data." + key + " is required for this command");
        }
        path = cfg["data"][key].get<std::string>();
    }
    require_path_exists(path, "dataset");
    return load_dataset(path);
}

inline nlohmann::json metrics_line(int epoch, const std::string& split, const EpochMetrics& m,
                                   double kl_weight, double lr) {
    return nlohmann::json{{"epoch", epoch},
                          {"split", split},
                          {"mean_free_energy_per_step", m.mean_free_energy_per_step},
                          {"mean_recon", m.mean_recon},
                          {"mean_kl", m.mean_kl},
                          {"kl_weight", kl_weight},
                          {"lr", lr}};
}

inline double data_bin_width(const std::vector<std::vector<Tensor>>& sequences) {
    double lo = 1e300, hi = -1e300;
    for (const auto& seq : sequences) {
        for (const Tensor& x : seq) {
            for (std::size_t i = 0; i < x.size(); ++i) {
                lo = std::min(lo, x[i]);
                hi = std::max(hi, x[i]);
            }
        }
    }
    const double width = (hi - lo) / 256.0;
    return width > 0.0 ? width : 1.0 / 256.0;
}

}  // namespace cli_detail

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline int cmd_generate(const nlohmann::json& cfg) {
    if (!cfg.contains("data") || !cfg["data"].contains("generator")) {
        throw ConfigError("config: data.generator is required for generate");
    }
    const nlohmann::json& g = cfg["data"]["generator"];
    const std::string kind = g.at("kind").get<std::string>();
    const std::size_t n_train = g.value("n_train", std::size_t{500});
    const std::size_t n_val = g.value("n_val", std::size_t{100});
    const std::size_t T = g.value("T", std::size_t{40});
    const std::uint64_t seed = g.value("seed", std::uint64_t{0});

    auto make = [&](std::size_t n, std::uint64_t stream_seed) {
        if (kind == "lgssm") {
            if (!cfg.contains("model") || cfg["model"].value("kind", std::string()) != "lgssm") {
                throw ConfigError("config: lgssm generator needs an lgssm model section");
            }
            auto model = build_model(cfg["model"]);
            return generate_lgssm_data(dynamic_cast<const LinearGaussianSSM&>(*model), n, T,
                                       stream_seed);
        }
        if (kind == "oscillator") {
            return generate_oscillator_data(n, T, g.value("obs_dim", std::size_t{8}),
                                            g.value("process_noise", 0.05),
                                            g.value("obs_noise", 0.1), stream_seed);
        }
        return generate_binary_sequences(n, T, g.value("obs_dim", std::size_t{8}),
                                         g.value("flip_prob", 0.1), stream_seed);
    };

    nlohmann::json report = nlohmann::json::array();
    const std::string train_path = cfg["data"].value("train_path", std::string());
    if (train_path.empty()) throw ConfigError("config: data.train_path is required for generate");
    save_dataset(make(n_train, Rng::sub_seed(seed, 1)), train_path);
    report.push_back({{"path", train_path}, {"sequences", n_train}, {"T", T}});
    if (n_val > 0) {
        const std::string val_path = cfg["data"].value("val_path", std::string());
        if (val_path.empty()) {
            throw ConfigError("config: data.val_path is required when n_val > 0");
        }
        save_dataset(make(n_val, Rng::sub_seed(seed, 2)), val_path);
        report.push_back({{"path", val_path}, {"sequences", n_val}, {"T", T}});
    }
    std::cout << nlohmann::json{{"generated", report}}.dump() << '\n';
    return 0;
}

inline int cmd_train(const nlohmann::json& cfg, int threads) {
    const SequenceDataset train_ds = cli_detail::dataset_for(cfg, "train_path", "");
    std::vector<std::vector<Tensor>> val_data;
    if (cfg.contains("data") && cfg["data"].contains("val_path")) {
        val_data = cli_detail::dataset_for(cfg, "val_path", "").sequences;
    }

    nlohmann::json model_cfg = cfg.at("model");
    // Discretized outputs default their bin width to the data range / 256.
    if (model_cfg.value("kind", std::string()) == "deep" &&
        model_cfg.value("output_family", std::string("gaussian")) == "discretized_gaussian" &&
        model_cfg.value("bin_width", 0.0) <= 0.0) {
        model_cfg["bin_width"] = cli_detail::data_bin_width(train_ds.sequences);
    }
    auto model = build_model(model_cfg);
    if (model->obs_dim() != train_ds.obs_dim()) {
        throw ConfigError("config: model obs_dim " + std::to_string(model->obs_dim()) +
                          " does not match dataset obs_dim " +
                          std::to_string(train_ds.obs_dim()));
    }

    const nlohmann::json inf = cfg.value("inference", nlohmann::json::object());
    const InferenceSpec spec = build_inference_spec(inf);
    std::unique_ptr<IterativeInferenceModel> infnet;
    if (spec.kind == InferenceSpec::Kind::Avf) {
        infnet = std::make_unique<IterativeInferenceModel>(
            build_infnet_config(inf, *model), inf.value("infnet_seed", std::uint64_t{1}));
    }

    const TrainConfig train_cfg =
        build_train_config(cfg.value("training", nlohmann::json::object()), threads);

    const nlohmann::json out = cfg.value("output", nlohmann::json::object());
    const std::string metrics_path = out.value("metrics_path", std::string("metrics.jsonl"));
    const std::string checkpoint_path =
        out.value("checkpoint_path", std::string("checkpoint.json"));

    std::ofstream metrics(metrics_path);
    if (!metrics) throw IoError("cmd_train: cannot open '" + metrics_path + "' for writing");
    TrainHooks hooks;
    hooks.on_metrics = [&](int epoch, const std::string& split, const EpochMetrics& m,
                           double kl_w, double lr) {
        metrics << cli_detail::metrics_line(epoch, split, m, kl_w, lr).dump() << '\n';
    };
    train(*model, spec, infnet.get(), train_ds.sequences, val_data, train_cfg, hooks);
    metrics.close();

    save_checkpoint(checkpoint_path, *model, infnet.get());
    std::cout << nlohmann::json{{"checkpoint", checkpoint_path}, {"metrics", metrics_path}}.dump()
              << '\n';
    return 0;
}

inline int cmd_eval(const nlohmann::json& cfg, const std::string& checkpoint_path,
                    const std::string& input_override, int threads) {
    require_path_exists(checkpoint_path, "checkpoint");
    LoadedCheckpoint loaded = load_checkpoint(checkpoint_path);
    const SequenceDataset ds = cli_detail::dataset_for(cfg, "val_path", input_override);
    if (loaded.model->obs_dim() != ds.obs_dim()) {
        throw ConfigError("checkpoint model obs_dim " + std::to_string(loaded.model->obs_dim()) +
                          " does not match dataset obs_dim " + std::to_string(ds.obs_dim()));
    }
    const nlohmann::json inf = cfg.value("inference", nlohmann::json::object());
    const InferenceSpec spec = build_inference_spec(inf);
    if (spec.kind == InferenceSpec::Kind::Avf && loaded.infnet == nullptr) {
        throw ConfigError("cmd_eval: AVF strategy but the checkpoint has no inference model");
    }
    const std::uint64_t seed =
        cfg.value("training", nlohmann::json::object()).value("seed", std::uint64_t{0});
    const EpochMetrics m =
        evaluate(*loaded.model, spec, loaded.infnet.get(), ds.sequences, seed, threads);
    std::cout << nlohmann::json{{"split", "eval"},
                                {"sequences", ds.sequences.size()},
                                {"mean_free_energy_per_step", m.mean_free_energy_per_step},
                                {"mean_recon", m.mean_recon},
                                {"mean_kl", m.mean_kl}}
                     .dump()
              << '\n';
    return 0;
}

inline int cmd_filter(const nlohmann::json& cfg, const std::string& checkpoint_path,
                      const std::string& input_path, const std::string& output_override,
                      int threads) {
    (void)threads;  // filtering traces are written in sequence order
    require_path_exists(checkpoint_path, "checkpoint");
    LoadedCheckpoint loaded = load_checkpoint(checkpoint_path);
    require_path_exists(input_path, "sequence file");
    const SequenceDataset ds = load_dataset(input_path);
    if (loaded.model->obs_dim() != ds.obs_dim()) {
        throw ConfigError("checkpoint model obs_dim " + std::to_string(loaded.model->obs_dim()) +
                          " does not match dataset obs_dim " + std::to_string(ds.obs_dim()));
    }
    const nlohmann::json inf = cfg.value("inference", nlohmann::json::object());
    const InferenceSpec spec = build_inference_spec(inf);
    if (spec.kind == InferenceSpec::Kind::Avf && loaded.infnet == nullptr) {
        throw ConfigError("cmd_filter: AVF strategy but the checkpoint has no inference model");
    }

    std::string output_path = output_override;
    if (output_path.empty()) {
        output_path = cfg.value("output", nlohmann::json::object())
                          .value("filter_output_path", std::string());
    }
    if (output_path.empty()) {
        throw ConfigError("cmd_filter: no output path (flag or output.filter_output_path)");
    }
    std::ofstream out(output_path);
    if (!out) throw IoError("cmd_filter: cannot open '" + output_path + "' for writing");

    const std::uint64_t seed =
        cfg.value("training", nlohmann::json::object()).value("seed", std::uint64_t{0});
    for (std::size_t i = 0; i < ds.sequences.size(); ++i) {
        Rng rng(sequence_stream_seed(seed, -1, i));
        const FilterTrace trace =
            filter_sequence(*loaded.model, spec, loaded.infnet.get(), ds.sequences[i], rng);
        for (std::size_t t = 0; t < trace.per_step.size(); ++t) {
            nlohmann::json mean = nlohmann::json::array();
            nlohmann::json log_var = nlohmann::json::array();
            for (std::size_t k = 0; k < trace.posterior_params[t].first.size(); ++k) {
                mean.push_back(trace.posterior_params[t].first[k]);
                log_var.push_back(trace.posterior_params[t].second[k]);
            }
            out << nlohmann::json{{"sequence", i},
                                  {"t", t + 1},
                                  {"reconstruction", trace.per_step[t].reconstruction},
                                  {"kl", trace.per_step[t].kl},
                                  {"total", trace.per_step[t].total},
                                  {"posterior_mean", mean},
                                  {"posterior_log_var", log_var}}
                       .dump()
                << '\n';
        }
    }
    std::cout << nlohmann::json{{"filtered", ds.sequences.size()}, {"output", output_path}}.dump()
              << '\n';
    return 0;
}

inline int cmd_gradcheck(const nlohmann::json& cfg) {
    constexpr double kTol = 1e-4;
    const std::uint64_t seed =
        cfg.value("training", nlohmann::json::object()).value("seed", std::uint64_t{17});
    bool all_pass = true;
    auto report = [&](const std::string& name, double err) {
        const bool pass = err < kTol;
        all_pass = all_pass && pass;
        std::cout << nlohmann::json{{"check", name}, {"max_rel_error", err}, {"pass", pass}}.dump()
                  << '\n';
    };

    // Primitive op kinds.
    {
        Rng rng(Rng::sub_seed(seed, 1));
        double worst = 0.0;
        for (OpKind kind : all_op_kinds()) {
            auto input = [&](std::size_t n) {
                Tensor t({n});
                for (std::size_t i = 0; i < n; ++i) {
                    double v = rng.uniform(0.15, 2.2);
                    t[i] = rng.bernoulli(0.5) ? v : -v;
                }
                return t;
            };
            double err = 0.0;
            switch (kind) {
                case OpKind::Matmul: {
                    const Tensor v = input(3);
                    const Tensor w = Tensor::matrix(2, 3, input(6).data());
                    err = finite_difference_check(
                        [&](const Var& p) { return sum(matmul(Var::constant(w), p)); }, v, 1e-5);
                    break;
                }
                case OpKind::Add:
                case OpKind::Sub:
                case OpKind::Mul: {
                    const Tensor other = input(4);
                    err = finite_difference_check(
                        [&](const Var& p) {
                            return sum(mul(forward_op(kind, {p, Var::constant(other)}), p));
                        },
                        input(4), 1e-5);
                    break;
                }
                case OpKind::Concat:
                    err = finite_difference_check(
                        [&](const Var& p) {
                            Var c = concat({p, p});
                            return sum(mul(c, c + 0.5));
                        },
                        input(3), 1e-5);
                    break;
                case OpKind::Broadcast: {
                    const Tensor w = input(5);
                    err = finite_difference_check(
                        [&](const Var& p) {
                            return sum(mul(broadcast(p, {5}), Var::constant(w)));
                        },
                        Tensor::scalar(0.6), 1e-5);
                    break;
                }
                case OpKind::Log:
                    err = finite_difference_check(
                        [&](const Var& p) { return sum(log(p)); },
                        rng.uniform_vector(4, 0.4, 2.5), 1e-5);
                    break;
                default:
                    err = finite_difference_check(
                        [&](const Var& p) {
                            Var out = forward_op(kind, {p});
                            return out.size() == 1 ? out : sum(mul(out, out + 0.25));
                        },
                        input(4), 1e-5);
            }
            worst = std::max(worst, err);
        }
        report("primitive_ops", worst);
    }

    // Small fixtures shared by the remaining checks.
    auto lgssm = make_lgssm(Tensor::matrix(1, 1, {1.0}), Tensor::vector({0.1}),
                            Tensor::matrix(1, 1, {1.0}), Tensor::vector({0.0}),
                            Tensor::vector({1.0}), Tensor::vector({0.0}),
                            Tensor::vector({1.0}));
    DeepModelDims dims;
    dims.latent_dim = 2;
    dims.obs_dim = 3;
    dims.hidden_dim = 4;
    dims.mlp_width = 4;
    auto deep = make_deep_model(dims, OutputFamily::Gaussian, Rng::sub_seed(seed, 2));

    // Lambda gradient of the step free energy, analytic expectations.
    {
        const Tensor x = Tensor::vector({1.0});
        const ModelState state = lgssm->init_state();
        const DiagonalGaussian prior = lgssm->prior(state);
        const Tensor lv0 = Tensor::vector({-0.3});
        const double err_mean = finite_difference_check(
            [&](const Var& v) {
                ApproxPosterior q;
                q.lambda = DiagonalGaussian(v, Var::constant(lv0));
                return step_free_energy(*lgssm, state, prior, x, q,
                                        {ExpectationMode::Analytic}, {})
                    .objective;
            },
            Tensor::vector({0.2}), 1e-5);
        const double err_lv = finite_difference_check(
            [&](const Var& v) {
                ApproxPosterior q;
                q.lambda = DiagonalGaussian(Var::constant(Tensor::vector({0.2})), v);
                return step_free_energy(*lgssm, state, prior, x, q,
                                        {ExpectationMode::Analytic}, {})
                    .objective;
            },
            lv0, 1e-5);
        report("lambda_gradient_analytic", std::max(err_mean, err_lv));
    }

    // Lambda gradient, Monte Carlo with common random numbers on the deep model.
    {
        Rng rng(Rng::sub_seed(seed, 3));
        const ModelState state = deep->init_state();
        const DiagonalGaussian prior = deep->prior(state);
        const Tensor x = rng.normal_vector(3);
        const std::vector<Tensor> noise = draw_step_noise(rng, 2, 2);
        const ExpectationConfig ecfg{ExpectationMode::MonteCarlo, 2};
        const Tensor mu0 = rng.normal_vector(2);
        const Tensor lv0 = rng.uniform_vector(2, -1.0, 0.5);
        const double err_mean = finite_difference_check(
            [&](const Var& v) {
                ApproxPosterior q;
                q.lambda = DiagonalGaussian(v, Var::constant(lv0));
                return step_free_energy(*deep, state, prior, x, q, ecfg, noise).objective;
            },
            mu0, 1e-5);
        const double err_lv = finite_difference_check(
            [&](const Var& v) {
                ApproxPosterior q;
                q.lambda = DiagonalGaussian(Var::constant(mu0), v);
                return step_free_energy(*deep, state, prior, x, q, ecfg, noise).objective;
            },
            lv0, 1e-5);
        report("lambda_gradient_monte_carlo", std::max(err_mean, err_lv));
    }

    // Theta gradient of a full filtering pass at fixed posteriors.
    {
        Rng data_rng(Rng::sub_seed(seed, 4));
        const SampledSequence seq = sample_sequence(*deep, 3, data_rng);
        std::vector<std::pair<Tensor, Tensor>> lambdas;
        Rng lrng(Rng::sub_seed(seed, 5));
        for (int t = 0; t < 3; ++t) {
            lambdas.emplace_back(lrng.normal_vector(2), lrng.uniform_vector(2, -1.0, 0.0));
        }
        auto build = [&] {
            Rng rng(Rng::sub_seed(seed, 6));
            return filter_with_posteriors(*deep, seq.observations, lambdas,
                                          {ExpectationMode::MonteCarlo, 1}, rng, true)
                .theta_objective;
        };
        report("theta_gradient_filter_trace",
               finite_difference_check_params(build, deep->params(), 1e-5));
    }

    // Phi gradient of the post-update step free energy.
    {
        InferenceNetConfig netcfg;
        netcfg.latent_dim = 2;
        netcfg.width = 4;
        IterativeInferenceModel net(netcfg, Rng::sub_seed(seed, 7));
        Rng rng(Rng::sub_seed(seed, 8));
        const ModelState state = deep->init_state();
        const DiagonalGaussian prior = deep->prior(state);
        const Tensor x = rng.normal_vector(3);
        const std::vector<Tensor> noise = draw_step_noise(rng, 2, 1);
        const ExpectationConfig ecfg{ExpectationMode::MonteCarlo, 1};
        auto build = [&] {
            ApproxPosterior q0 = init_at_prior(prior);
            const StepEnergy e0 = step_free_energy(*deep, state, prior, x, q0, ecfg, noise);
            GradientMap grads = backward_detached(e0.objective);
            const LambdaGradient g{grads.at(q0.lambda.mean.id()),
                                   grads.at(q0.lambda.log_var.id())};
            const ApproxPosterior q1 = avf_update(net, q0, g);
            return step_free_energy(*deep, state, prior, x, q1, ecfg, noise).objective;
        };
        report("phi_gradient_post_update",
               finite_difference_check_params(build, net.params(), 1e-5));
    }

    std::cout << nlohmann::json{{"all_pass", all_pass}, {"tolerance", kTol}}.dump() << '\n';
    return all_pass ? 0 : 1;
}

inline int cmd_verify_kalman(const nlohmann::json& cfg, int threads) {
    (void)threads;
    if (!cfg.contains("model") || cfg["model"].value("kind", std::string()) != "lgssm") {
        throw ConfigError("cmd_verify_kalman: an lgssm model section is required");
    }
    auto model_base = build_model(cfg["model"]);
    const auto& model = dynamic_cast<const LinearGaussianSSM&>(*model_base);

    const nlohmann::json gen =
        cfg.value("data", nlohmann::json::object()).value("generator", nlohmann::json::object());
    const std::size_t T = gen.value("T", std::size_t{50});
    const std::uint64_t seed = gen.value("seed", std::uint64_t{7});

    Rng data_rng(Rng::sub_seed(seed, 0xacceULL));
    const SampledSequence seq = sample_sequence(model, T, data_rng);
    const KalmanResult oracle = kalman_filter_sequence(model, seq.observations);

    const nlohmann::json inf = cfg.value("inference", nlohmann::json::object());
    InferenceSpec spec;
    spec.kind = InferenceSpec::Kind::GradientEStep;
    spec.gradient.iterations = inf.value("iterations", 500);
    spec.gradient.step_size = inf.value("step_size", 0.05);
    spec.gradient.optimizer = OptimizerKind::AdaptiveMoments;
    spec.gradient.expectation = {ExpectationMode::Analytic};

    Rng rng(Rng::sub_seed(seed, 0xf117ULL));
    const FilterTrace trace =
        filter_sequence(model, spec, nullptr, seq.observations, rng);

    double max_mean_error = 0.0;
    double max_gap = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
        double mean_error = 0.0;
        for (std::size_t i = 0; i < model.latent_dim(); ++i) {
            mean_error = std::max(
                mean_error,
                std::fabs(trace.posterior_params[t].first[i] - oracle.posteriors[t].mean[i]));
        }
        const double gap = std::fabs(trace.per_step[t].total - (-oracle.step_loglik[t]));
        max_mean_error = std::max(max_mean_error, mean_error);
        max_gap = std::max(max_gap, gap);
        std::cout << nlohmann::json{{"t", t + 1},
                                    {"mean_abs_error", mean_error},
                                    {"free_energy_gap", gap}}
                         .dump()
                  << '\n';
    }
    const bool pass = max_mean_error < 1e-3 && max_gap < 1e-4;
    std::cout << nlohmann::json{{"max_mean_error", max_mean_error},
                                {"max_free_energy_gap", max_gap},
                                {"pass", pass}}
                     .dump()
              << '\n';
    return pass ? 0 : 1;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"Variational filtering EM for dynamical latent variable models"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    int threads = default_thread_count();
    std::string checkpoint, input, output;

    auto add_common = [&](CLI::App* sub, bool with_threads = true) {
        sub->add_option("--config", config_path, "Path to the JSON run configuration")
            ->required();
        sub->add_option("--set", overrides,
                        "Override a scalar config key, e.g. --set training.epochs=5");
        if (with_threads) {
            sub->add_option("--threads", threads,
                            "Worker threads (default: VARFILTER_THREADS or 1)");
        }
    };

    CLI::App* generate = app.add_subcommand("generate", "Write synthetic datasets");
    add_common(generate);
    CLI::App* train = app.add_subcommand("train", "Train a model by variational filtering EM");
    add_common(train);
    CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    add_common(eval);
    eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    eval->add_option("--input", input, "Dataset path (defaults to data.val_path)");
    CLI::App* filter = app.add_subcommand("filter", "Filter sequences and dump per-step traces");
    add_common(filter);
    filter->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    filter->add_option("--input", input, "Sequence dataset to filter")->required();
    filter->add_option("--output", output, "Trace output path (JSONL)");
    CLI::App* gradcheck =
        app.add_subcommand("gradcheck", "Finite-difference checks of every gradient path");
    add_common(gradcheck, false);
    CLI::App* verify =
        app.add_subcommand("verify-kalman", "Compare converged filtering with the exact filter");
    add_common(verify);

    // CLI11 parses argv-style reversed vectors.
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        const nlohmann::json cfg = load_config(config_path, overrides);
        if (generate->parsed()) return cmd_generate(cfg);
        if (train->parsed()) return cmd_train(cfg, threads);
        if (eval->parsed()) return cmd_eval(cfg, checkpoint, input, threads);
        if (filter->parsed()) return cmd_filter(cfg, checkpoint, input, output, threads);
        if (gradcheck->parsed()) return cmd_gradcheck(cfg);
        if (verify->parsed()) return cmd_verify_kalman(cfg, threads);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}

}  // namespace varfilter
