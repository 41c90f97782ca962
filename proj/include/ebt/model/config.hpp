#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "ebt/util/ini.hpp"

namespace ebt {

enum class Variant { S1, S2 };
enum class Modality { Discrete, Continuous };
/// Causal: autoregressive next-element energies. Bidirectional: whole-sequence
/// (denoising) energies with all-to-all attention.
enum class Architecture { Causal, Bidirectional };

std::string to_string(Variant v);
std::string to_string(Modality m);
std::string to_string(Architecture a);

struct EBTConfig {
    Variant variant = Variant::S1;
    Modality modality = Modality::Discrete;
    Architecture architecture = Architecture::Causal;

    std::int64_t layers = 2;
    std::int64_t embed_dim = 64;
    std::int64_t heads = 2;
    double ffn_multiplier = 1.0;
    double rotary_base = 10000.0;
    std::int64_t vocab_size = 16;  // discrete mode
    std::int64_t feature_dim = 0;  // continuous mode

    // Inner optimization
    std::int64_t num_steps = 2;
    double alpha = 500.0;
    bool alpha_learnable = true;
    double alpha_lr_multiplier = 1500.0;
    double alpha_random_factor = 1.0;
    double langevin_sigma = 0.0;
    bool detach_between_steps = true;
    bool truncate_loss_to_last_step = false;
    bool replay_buffer_enabled = false;
    bool randomize_steps = false;
    std::int64_t min_steps = 2;
    std::int64_t max_steps = 2;
    std::optional<double> grad_clamp;

    // Architecture details
    bool use_step_embedding = true;
    bool shared_step_index = false;  // every step uses step embedding 0
    bool tie_embeddings = true;
    bool separate_prediction_attention = false;
    bool normalize_input_distribution = true;

    std::int64_t ffn_dim() const;
    std::int64_t head_dim() const { return embed_dim / heads; }
    /// Rows in the step-embedding table.
    std::int64_t step_table_size() const;
    /// Width of one prediction element (vocab for discrete, features otherwise).
    std::int64_t prediction_dim() const;

    static EBTConfig s1_preset();
    /// Thinking-oriented defaults: randomized step size and count, Langevin
    /// noise, replay, loss on the final step only.
    static EBTConfig s2_preset();
    /// Size presets: "xxs" (6 layers / 384 / 6 heads) and "toy" (2 / 64 / 2).
    EBTConfig& apply_size(const std::string& preset);

    void validate() const;
    void write(ini::Section& section) const;
    static EBTConfig read(const ini::Section& section);
};

}  // namespace ebt
