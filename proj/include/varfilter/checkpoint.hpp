#pragma once

#include <fstream>
#include <memory>
#include <string>

#include <json.hpp>

#include "varfilter/deep_model.hpp"
#include "varfilter/inference.hpp"
#include "varfilter/lgssm.hpp"

namespace varfilter {

constexpr const char* kCheckpointFormat = "varfilter-checkpoint-v1";

namespace detail {

inline nlohmann::json params_to_json(const ParamSet& params) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& e : params.entries()) {
        nlohmann::json shape = nlohmann::json::array();
        for (std::size_t s : e.var.shape()) shape.push_back(s);
        nlohmann::json values = nlohmann::json::array();
        for (std::size_t i = 0; i < e.var.size(); ++i) values.push_back(e.var.value()[i]);
        out.push_back({{"name", e.name}, {"shape", shape}, {"values", values}});
    }
    return out;
}

inline void params_from_json(const nlohmann::json& source, ParamSet& params,
                             const std::string& what) {
    if (!source.is_array() || source.size() != params.size()) {
        throw IoError("checkpoint: " + what + " holds " +
                      std::to_string(source.is_array() ? source.size() : 0) +
                      " tensors, model expects " + std::to_string(params.size()));
    }
    std::string conflicts;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& entry = params.entries()[i];
        const nlohmann::json& item = source[i];
        const std::string name = item.value("name", std::string("?"));
        std::vector<std::size_t> shape;
        for (const auto& s : item["shape"]) shape.push_back(s.get<std::size_t>());
        if (name != entry.name || shape != entry.var.shape()) {
            conflicts += "\n  expected " + entry.name + " " +
                         Tensor::shape_string(entry.var.shape()) + ", file has " + name + " " +
                         Tensor::shape_string(shape);
            continue;
        }
        const auto& values = item["values"];
        if (!values.is_array() || values.size() != entry.var.size()) {
            conflicts += "\n  " + entry.name + ": value count mismatch";
            continue;
        }
        Tensor& dst = const_cast<Var&>(entry.var).mutable_value();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = values[k].get<double>();
    }
    if (!conflicts.empty()) {
        throw IoError("checkpoint: " + what + " does not match the model:" + conflicts);
    }
}

}  // namespace detail

/// Serialize model hyperparameters + named parameter tensors (and optionally
/// the inference network) as one self-describing JSON document.
inline void save_checkpoint(const std::string& path, const DynamicalModel& model,
                            const IterativeInferenceModel* infnet = nullptr) {
    nlohmann::json doc;
    doc["format"] = kCheckpointFormat;
    nlohmann::json m{{"kind", model.kind()},
                     {"latent_dim", model.latent_dim()},
                     {"obs_dim", model.obs_dim()},
                     {"hidden_dim", model.hidden_dim()},
                     {"output_family", output_family_name(model.output_family())}};
    if (const auto* deep = dynamic_cast<const DeepSequenceModel*>(&model)) {
        m["mlp_width"] = deep->dims().mlp_width;
        m["seed"] = deep->seed();
        m["bin_width"] = deep->bin_width();
    }
    doc["model"] = std::move(m);
    doc["params"] = detail::params_to_json(model.params());
    if (infnet != nullptr) {
        doc["inference_model"] = {{"latent_dim", infnet->config().latent_dim},
                                  {"obs_dim", infnet->config().obs_dim},
                                  {"width", infnet->config().width},
                                  {"encode_data", infnet->config().encode_data},
                                  {"seed", infnet->seed()},
                                  {"params", detail::params_to_json(infnet->params())}};
    }
    std::ofstream out(path);
    if (!out) throw IoError("save_checkpoint: cannot open '" + path + "' for writing");
    out << doc.dump(2) << '\n';
    if (!out) throw IoError("save_checkpoint: write failed for '" + path + "'");
}

struct LoadedCheckpoint {
    std::unique_ptr<DynamicalModel> model;
    std::unique_ptr<IterativeInferenceModel> infnet;  // null when absent
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_checkpoint: cannot open '" + path + "'");
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("load_checkpoint: malformed JSON in '" + path + "': " + e.what());
    }
    if (doc.value("format", std::string()) != kCheckpointFormat) {
        throw IoError("load_checkpoint: '" + path + "' is not a " +
                      std::string(kCheckpointFormat) + " file");
    }
    const nlohmann::json& m = doc.at("model");
    const std::string kind = m.at("kind").get<std::string>();
    const std::size_t latent = m.at("latent_dim").get<std::size_t>();
    const std::size_t obs = m.at("obs_dim").get<std::size_t>();

    LoadedCheckpoint out;
    if (kind == "lgssm") {
        // Shape placeholders; every value is overwritten from the file.
        out.model = make_lgssm(Tensor({latent, latent}), Tensor::full({latent}, 1.0),
                               Tensor({obs, latent}), Tensor({obs}), Tensor::full({obs}, 1.0),
                               Tensor({latent}), Tensor::full({latent}, 1.0));
    } else if (kind == "deep") {
        DeepModelDims dims;
        dims.latent_dim = latent;
        dims.obs_dim = obs;
        dims.hidden_dim = m.at("hidden_dim").get<std::size_t>();
        dims.mlp_width = m.at("mlp_width").get<std::size_t>();
        const std::string family = m.at("output_family").get<std::string>();
        OutputFamily fam = OutputFamily::Gaussian;
        if (family == "bernoulli") fam = OutputFamily::Bernoulli;
        else if (family == "discretized_gaussian") fam = OutputFamily::DiscretizedGaussian;
        else if (family != "gaussian") throw IoError("load_checkpoint: unknown family " + family);
        out.model = make_deep_model(dims, fam, m.value("seed", std::uint64_t{0}),
                                    m.value("bin_width", 1.0 / 256.0));
    } else {
        throw IoError("load_checkpoint: unknown model kind '" + kind + "'");
    }
    detail::params_from_json(doc.at("params"), out.model->params(), "model params");

    if (doc.contains("inference_model")) {
        const nlohmann::json& f = doc["inference_model"];
        InferenceNetConfig cfg;
        cfg.latent_dim = f.at("latent_dim").get<std::size_t>();
        cfg.obs_dim = f.at("obs_dim").get<std::size_t>();
        cfg.width = f.at("width").get<std::size_t>();
        cfg.encode_data = f.at("encode_data").get<bool>();
        out.infnet = std::make_unique<IterativeInferenceModel>(
            cfg, f.value("seed", std::uint64_t{0}));
        detail::params_from_json(f.at("params"), out.infnet->params(), "inference params");
    }
    return out;
}

}  // namespace varfilter
