#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "varfilter/lgssm.hpp"
#include "varfilter/model.hpp"
#include "varfilter/rng.hpp"

namespace varfilter {

/// A collection of observation sequences plus the provenance needed to
/// regenerate it.
struct SequenceDataset {
    enum class Kind { Real, Binary };

    Kind kind = Kind::Real;
    std::vector<std::vector<Tensor>> sequences;
    std::string generator;
    std::uint64_t seed = 0;
    nlohmann::json parameters = nlohmann::json::object();

    std::size_t obs_dim() const {
        if (sequences.empty() || sequences.front().empty()) return 0;
        return sequences.front().front().size();
    }

    void validate() const {
        if (sequences.empty()) throw InvalidArgument("SequenceDataset: no sequences");
        const std::size_t dim = obs_dim();
        if (dim == 0) throw InvalidArgument("SequenceDataset: zero obs dim");
        for (const auto& seq : sequences) {
            if (seq.empty()) throw InvalidArgument("SequenceDataset: empty sequence");
            for (const Tensor& x : seq) {
                if (x.size() != dim) {
                    throw InvalidArgument("SequenceDataset: inconsistent obs dims");
                }
                if (kind == Kind::Binary) {
                    for (std::size_t i = 0; i < x.size(); ++i) {
                        if (x[i] != 0.0 && x[i] != 1.0) {
                            throw InvalidArgument("SequenceDataset: non-binary value in "
                                                  "binary dataset");
                        }
                    }
                }
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Generators (pure functions of parameters and seed)
// ---------------------------------------------------------------------------

/// Ancestral samples from a linear Gaussian model; latents are discarded.
inline SequenceDataset generate_lgssm_data(const LinearGaussianSSM& model,
                                           std::size_t n_sequences, std::size_t T,
                                           std::uint64_t seed) {
    if (T < 1 || n_sequences < 1) throw InvalidArgument("generate_lgssm_data: empty request");
    SequenceDataset ds;
    ds.kind = SequenceDataset::Kind::Real;
    ds.generator = "lgssm";
    ds.seed = seed;
    ds.parameters = {{"n_sequences", n_sequences},
                     {"T", T},
                     {"latent_dim", model.latent_dim()},
                     {"obs_dim", model.obs_dim()}};
    ds.sequences.reserve(n_sequences);
    for (std::size_t i = 0; i < n_sequences; ++i) {
        Rng rng(Rng::sub_seed(seed, 0x19551ULL, i));
        ds.sequences.push_back(sample_sequence(model, T, rng).observations);
    }
    return ds;
}

/**
 * Sinusoidal sequences driven by a latent phase/frequency random walk:
 * each dimension observes the same oscillator at a fixed phase offset, with
 * additive Gaussian observation noise. Amplitude is 1.
 */
inline SequenceDataset generate_oscillator_data(std::size_t n_sequences, std::size_t T,
                                                std::size_t obs_dim, double process_noise,
                                                double obs_noise, std::uint64_t seed) {
    if (T < 1 || n_sequences < 1 || obs_dim < 1) {
        throw InvalidArgument("generate_oscillator_data: empty request");
    }
    if (process_noise < 0.0 || obs_noise < 0.0) {
        throw InvalidArgument("generate_oscillator_data: negative noise level");
    }
    constexpr double kTwoPi = 6.283185307179586;
    SequenceDataset ds;
    ds.kind = SequenceDataset::Kind::Real;
    ds.generator = "oscillator";
    ds.seed = seed;
    ds.parameters = {{"n_sequences", n_sequences}, {"T", T},
                     {"obs_dim", obs_dim},         {"process_noise", process_noise},
                     {"obs_noise", obs_noise}};
    ds.sequences.reserve(n_sequences);
    for (std::size_t i = 0; i < n_sequences; ++i) {
        Rng rng(Rng::sub_seed(seed, 0x05c1ULL, i));
        double omega = rng.uniform(0.25, 0.9);
        double phase = rng.uniform(0.0, kTwoPi);
        std::vector<Tensor> seq;
        seq.reserve(T);
        for (std::size_t t = 0; t < T; ++t) {
            omega += 0.1 * process_noise * rng.normal();
            phase += omega + process_noise * rng.normal();
            Tensor x({obs_dim});
            for (std::size_t j = 0; j < obs_dim; ++j) {
                const double offset = kTwoPi * static_cast<double>(j) /
                                      static_cast<double>(obs_dim);
                x[j] = std::sin(phase + offset) + obs_noise * rng.normal();
            }
            seq.push_back(std::move(x));
        }
        ds.sequences.push_back(std::move(seq));
    }
    return ds;
}

/// Correlated binary strips: each dimension is an independent two-state
/// Markov chain that flips with the given probability at each step.
inline SequenceDataset generate_binary_sequences(std::size_t n_sequences, std::size_t T,
                                                 std::size_t obs_dim, double flip_prob,
                                                 std::uint64_t seed) {
    if (T < 1 || n_sequences < 1 || obs_dim < 1) {
        throw InvalidArgument("generate_binary_sequences: empty request");
    }
    if (flip_prob < 0.0 || flip_prob > 1.0) {
        throw InvalidArgument("generate_binary_sequences: flip_prob outside [0, 1]");
    }
    SequenceDataset ds;
    ds.kind = SequenceDataset::Kind::Binary;
    ds.generator = "binary_markov";
    ds.seed = seed;
    ds.parameters = {{"n_sequences", n_sequences},
                     {"T", T},
                     {"obs_dim", obs_dim},
                     {"transition_flip_prob", flip_prob}};
    ds.sequences.reserve(n_sequences);
    for (std::size_t i = 0; i < n_sequences; ++i) {
        Rng rng(Rng::sub_seed(seed, 0xb17aULL, i));
        std::vector<double> bits(obs_dim);
        for (double& b : bits) b = rng.bernoulli(0.5) ? 1.0 : 0.0;
        std::vector<Tensor> seq;
        seq.reserve(T);
        for (std::size_t t = 0; t < T; ++t) {
            if (t > 0) {
                for (double& b : bits) {
                    if (rng.bernoulli(flip_prob)) b = 1.0 - b;
                }
            }
            seq.push_back(Tensor::vector(bits));
        }
        ds.sequences.push_back(std::move(seq));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// JSONL persistence
// ---------------------------------------------------------------------------

namespace detail {

inline void append_number(std::string& out, double v, bool binary) {
    if (binary) {
        out += (v == 0.0) ? '0' : '1';
        return;
    }
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out += buf;
}

}  // namespace detail

/**
 * Line-delimited JSON: a single header object (kind and generator metadata)
 * followed by one {"obs": [[...], ...]} object per sequence. Real values are
 * written with 17 significant digits so the round trip is bit-exact; binary
 * datasets serialize as 0/1 integers.
 */
inline void save_dataset(const SequenceDataset& ds, const std::string& path) {
    ds.validate();
    std::ofstream out(path);
    if (!out) throw IoError("save_dataset: cannot open '" + path + "' for writing");
    const bool binary = ds.kind == SequenceDataset::Kind::Binary;
    nlohmann::json header{{"kind", binary ? "binary" : "real"},
                          {"generator", ds.generator},
                          {"seed", ds.seed},
                          {"parameters", ds.parameters},
                          {"obs_dim", ds.obs_dim()}};
    out << header.dump() << '\n';
    std::string line;
    for (const auto& seq : ds.sequences) {
        line.clear();
        line += "{\"obs\": [";
        for (std::size_t t = 0; t < seq.size(); ++t) {
            if (t) line += ", ";
            line += '[';
            for (std::size_t i = 0; i < seq[t].size(); ++i) {
                if (i) line += ", ";
                detail::append_number(line, seq[t][i], binary);
            }
            line += ']';
        }
        line += "]}";
        out << line << '\n';
    }
    if (!out) throw IoError("save_dataset: write failed for '" + path + "'");
}

inline SequenceDataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_dataset: cannot open '" + path + "'");
    std::string line;
    std::size_t line_no = 0;

    SequenceDataset ds;
    if (!std::getline(in, line) || line.empty()) {
        throw IoError("load_dataset: '" + path + "' is empty (missing header)");
    }
    ++line_no;
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("load_dataset: malformed header at line 1: " + std::string(e.what()));
    }
    if (!header.is_object() || !header.contains("kind") || !header.contains("obs_dim")) {
        throw IoError("load_dataset: header at line 1 lacks kind/obs_dim");
    }
    const std::string kind = header["kind"].get<std::string>();
    if (kind != "real" && kind != "binary") {
        throw IoError("load_dataset: unknown dataset kind '" + kind + "'");
    }
    ds.kind = kind == "binary" ? SequenceDataset::Kind::Binary : SequenceDataset::Kind::Real;
    ds.generator = header.value("generator", std::string());
    ds.seed = header.value("seed", std::uint64_t{0});
    ds.parameters = header.value("parameters", nlohmann::json::object());
    const std::size_t obs_dim = header["obs_dim"].get<std::size_t>();

    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() && in.peek() == EOF) break;  // trailing newline
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw IoError("load_dataset: malformed line " + std::to_string(line_no) + ": " +
                          std::string(e.what()));
        }
        if (!obj.is_object() || !obj.contains("obs") || !obj["obs"].is_array() ||
            obj["obs"].empty()) {
            throw IoError("load_dataset: line " + std::to_string(line_no) +
                          " is not a sequence object");
        }
        std::vector<Tensor> seq;
        seq.reserve(obj["obs"].size());
        for (const auto& row : obj["obs"]) {
            if (!row.is_array() || row.size() != obs_dim) {
                throw IoError("load_dataset: line " + std::to_string(line_no) +
                              " has a row not matching obs_dim " + std::to_string(obs_dim));
            }
            Tensor x({obs_dim});
            for (std::size_t i = 0; i < obs_dim; ++i) x[i] = row[i].get<double>();
            seq.push_back(std::move(x));
        }
        ds.sequences.push_back(std::move(seq));
    }
    if (ds.sequences.empty()) {
        throw IoError("load_dataset: '" + path + "' contains a header but no sequences");
    }
    ds.validate();
    return ds;
}

}  // namespace varfilter
