#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "varfilter/deep_model.hpp"
#include "varfilter/filtering.hpp"
#include "varfilter/lgssm.hpp"

namespace varfilter {

namespace detail {

inline void check_known_keys(const nlohmann::json& obj, const std::set<std::string>& known,
                             const std::string& prefix) {
    if (!obj.is_object()) throw ConfigError("config: '" + prefix + "' must be an object");
    for (const auto& item : obj.items()) {
        if (!known.count(item.key())) {
            throw ConfigError("config: unknown key '" + prefix + item.key() + "'");
        }
    }
}

inline Tensor tensor_from_json(const nlohmann::json& j, const std::string& where) {
    if (!j.is_array() || j.empty()) {
        throw ConfigError("config: '" + where + "' must be a non-empty array");
    }
    if (j.front().is_array()) {
        const std::size_t rows = j.size();
        const std::size_t cols = j.front().size();
        std::vector<double> values;
        values.reserve(rows * cols);
        for (const auto& row : j) {
            if (!row.is_array() || row.size() != cols) {
                throw ConfigError("config: ragged matrix in '" + where + "'");
            }
            for (const auto& v : row) values.push_back(v.get<double>());
        }
        return Tensor::matrix(rows, cols, std::move(values));
    }
    std::vector<double> values;
    values.reserve(j.size());
    for (const auto& v : j) values.push_back(v.get<double>());
    return Tensor::vector(std::move(values));
}

}  // namespace detail

/// Parse and strictly validate a config document: every key must be known,
/// every enum value legal. Misspelled keys never fall back to defaults.
inline void validate_config(const nlohmann::json& cfg) {
    detail::check_known_keys(cfg, {"model", "inference", "training", "data", "output"}, "");

    if (cfg.contains("model")) {
        const auto& m = cfg["model"];
        detail::check_known_keys(m,
                                 {"kind", "A", "Q_diag", "C", "b", "R_diag", "init_mean",
                                  "init_var_diag", "latent_dim", "obs_dim", "hidden_dim",
                                  "mlp_width", "output_family", "seed", "bin_width"},
                                 "model.");
        const std::string kind = m.value("kind", std::string());
        if (kind != "lgssm" && kind != "deep") {
            throw ConfigError("config: model.kind must be 'lgssm' or 'deep', got '" + kind + "'");
        }
        if (m.contains("output_family")) {
            const std::string fam = m["output_family"].get<std::string>();
            if (fam != "gaussian" && fam != "bernoulli" && fam != "discretized_gaussian") {
                throw ConfigError("config: unknown model.output_family '" + fam + "'");
            }
        }
    }
    if (cfg.contains("inference")) {
        const auto& inf = cfg["inference"];
        detail::check_known_keys(inf,
                                 {"strategy", "expectation_mode", "n_samples", "iterations",
                                  "step_size", "optimizer", "line_search", "avf_iterations",
                                  "encode_data", "infnet_width", "infnet_seed"},
                                 "inference.");
        const std::string strategy = inf.value("strategy", std::string("gradient"));
        if (strategy != "gradient" && strategy != "avf") {
            throw ConfigError("config: inference.strategy must be 'gradient' or 'avf', got '" +
                              strategy + "'");
        }
        const std::string mode = inf.value("expectation_mode", std::string("monte_carlo"));
        if (mode != "monte_carlo" && mode != "analytic") {
            throw ConfigError("config: unknown inference.expectation_mode '" + mode + "'");
        }
        const std::string opt = inf.value("optimizer", std::string("adaptive_moments"));
        if (opt != "adaptive_moments" && opt != "plain_sgd") {
            throw ConfigError("config: unknown inference.optimizer '" + opt + "'");
        }
    }
    if (cfg.contains("training")) {
        detail::check_known_keys(cfg["training"],
                                 {"epochs", "learning_rate", "lr_decay_per_epoch",
                                  "kl_anneal_epochs", "batch_size", "seed", "optimizer",
                                  "train_model", "eval_every"},
                                 "training.");
        const std::string opt =
            cfg["training"].value("optimizer", std::string("adaptive_moments"));
        if (opt != "adaptive_moments" && opt != "plain_sgd") {
            throw ConfigError("config: unknown training.optimizer '" + opt + "'");
        }
    }
    if (cfg.contains("data")) {
        const auto& d = cfg["data"];
        detail::check_known_keys(d, {"train_path", "val_path", "generator"}, "data.");
        if (d.contains("generator")) {
            const auto& g = d["generator"];
            detail::check_known_keys(g,
                                     {"kind", "n_train", "n_val", "T", "seed", "obs_dim",
                                      "process_noise", "obs_noise", "flip_prob"},
                                     "data.generator.");
            const std::string kind = g.value("kind", std::string());
            if (kind != "lgssm" && kind != "oscillator" && kind != "binary") {
                throw ConfigError("config: unknown data.generator.kind '" + kind + "'");
            }
        }
    }
    if (cfg.contains("output")) {
        detail::check_known_keys(cfg["output"],
                                 {"metrics_path", "checkpoint_path", "filter_output_path"},
                                 "output.");
    }
}

/// Apply one `path.to.key=value` override; the value text is parsed as JSON
/// when possible and treated as a bare string otherwise.
inline void apply_override(nlohmann::json& cfg, const std::string& assignment) {
    const std::size_t eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("config: override '" + assignment + "' is not of the form key=value");
    }
    const std::string path = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    nlohmann::json value;
    try {
        value = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception&) {
        value = text;  // unquoted string
    }
    if (value.is_object() || value.is_array()) {
        throw ConfigError("config: override '" + path + "' must be a scalar");
    }
    nlohmann::json* node = &cfg;
    std::size_t begin = 0;
    while (true) {
        const std::size_t dot = path.find('.', begin);
        const std::string key = path.substr(begin, dot - begin);
        if (key.empty()) throw ConfigError("config: empty key segment in '" + path + "'");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            break;
        }
        node = &(*node)[key];
        begin = dot + 1;
    }
}

inline nlohmann::json load_config(const std::string& path,
                                  const std::vector<std::string>& overrides = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    nlohmann::json cfg;
    try {
        in >> cfg;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: malformed JSON in '" + path + "': " + e.what());
    }
    for (const std::string& o : overrides) apply_override(cfg, o);
    validate_config(cfg);
    return cfg;
}

// ---------------------------------------------------------------------------
// Builders from validated sections
// ---------------------------------------------------------------------------

inline std::unique_ptr<DynamicalModel> build_model(const nlohmann::json& m) {
    const std::string kind = m.at("kind").get<std::string>();
    if (kind == "lgssm") {
        for (const char* field : {"A", "Q_diag", "C", "b", "R_diag", "init_mean",
                                  "init_var_diag"}) {
            if (!m.contains(field)) {
                throw ConfigError(std::string("config: model.") + field +
                                  " is required for lgssm");
            }
        }
        return make_lgssm(detail::tensor_from_json(m["A"], "model.A"),
                          detail::tensor_from_json(m["Q_diag"], "model.Q_diag"),
                          detail::tensor_from_json(m["C"], "model.C"),
                          detail::tensor_from_json(m["b"], "model.b"),
                          detail::tensor_from_json(m["R_diag"], "model.R_diag"),
                          detail::tensor_from_json(m["init_mean"], "model.init_mean"),
                          detail::tensor_from_json(m["init_var_diag"], "model.init_var_diag"));
    }
    DeepModelDims dims;
    dims.latent_dim = m.value("latent_dim", std::size_t{8});
    dims.obs_dim = m.value("obs_dim", std::size_t{8});
    dims.hidden_dim = m.value("hidden_dim", std::size_t{64});
    dims.mlp_width = m.value("mlp_width", std::size_t{64});
    const std::string fam = m.value("output_family", std::string("gaussian"));
    OutputFamily family = OutputFamily::Gaussian;
    if (fam == "bernoulli") family = OutputFamily::Bernoulli;
    if (fam == "discretized_gaussian") family = OutputFamily::DiscretizedGaussian;
    const double bin_width = m.value("bin_width", 0.0);
    return make_deep_model(dims, family, m.value("seed", std::uint64_t{0}),
                           bin_width > 0.0 ? bin_width : 1.0 / 256.0);
}

inline InferenceSpec build_inference_spec(const nlohmann::json& inf) {
    InferenceSpec spec;
    const std::string strategy = inf.value("strategy", std::string("gradient"));
    spec.kind = strategy == "avf" ? InferenceSpec::Kind::Avf
                                  : InferenceSpec::Kind::GradientEStep;
    ExpectationConfig expectation;
    expectation.mode = inf.value("expectation_mode", std::string("monte_carlo")) == "analytic"
                           ? ExpectationMode::Analytic
                           : ExpectationMode::MonteCarlo;
    expectation.n_samples = inf.value("n_samples", 1);
    spec.gradient.iterations = inf.value("iterations", 16);
    spec.gradient.step_size = inf.value("step_size", 0.05);
    spec.gradient.optimizer =
        inf.value("optimizer", std::string("adaptive_moments")) == "plain_sgd"
            ? OptimizerKind::PlainSgd
            : OptimizerKind::AdaptiveMoments;
    spec.gradient.line_search = inf.value("line_search", false);
    spec.gradient.expectation = expectation;
    spec.avf_iterations = inf.value("avf_iterations", 1);
    spec.avf_expectation = expectation;
    return spec;
}

inline InferenceNetConfig build_infnet_config(const nlohmann::json& inf,
                                              const DynamicalModel& model) {
    InferenceNetConfig cfg;
    cfg.latent_dim = model.latent_dim();
    cfg.obs_dim = model.obs_dim();
    cfg.width = inf.value("infnet_width", std::size_t{128});
    cfg.encode_data = inf.value("encode_data", false);
    return cfg;
}

inline TrainConfig build_train_config(const nlohmann::json& t, int threads) {
    TrainConfig cfg;
    cfg.epochs = t.value("epochs", 100);
    cfg.learning_rate = t.value("learning_rate", 1e-3);
    cfg.lr_decay_per_epoch = t.value("lr_decay_per_epoch", 0.999);
    cfg.kl_anneal_epochs = t.value("kl_anneal_epochs", 0);
    cfg.batch_size = t.value("batch_size", 32);
    cfg.seed = t.value("seed", std::uint64_t{0});
    cfg.optimizer = t.value("optimizer", std::string("adaptive_moments")) == "plain_sgd"
                        ? OptimizerKind::PlainSgd
                        : OptimizerKind::AdaptiveMoments;
    cfg.train_model = t.value("train_model", true);
    cfg.eval_every = t.value("eval_every", 1);
    cfg.threads = threads;
    cfg.validate();
    return cfg;
}

inline void require_path_exists(const std::string& path, const std::string& what) {
    if (!std::filesystem::exists(path)) {
        throw ConfigError("config: " + what + " '" + path + "' does not exist");
    }
}

}  // namespace varfilter
