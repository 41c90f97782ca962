#include "ebt/model/config.hpp"

#include <cmath>

#include "ebt/errors.hpp"

namespace ebt {

std::string to_string(Variant v) { return v == Variant::S1 ? "S1" : "S2"; }
std::string to_string(Modality m) { return m == Modality::Discrete ? "discrete" : "continuous"; }
std::string to_string(Architecture a) { return a == Architecture::Causal ? "causal" : "bidirectional"; }

std::int64_t EBTConfig::ffn_dim() const {
    return static_cast<std::int64_t>(std::llround(ffn_multiplier * static_cast<double>(embed_dim)));
}

std::int64_t EBTConfig::step_table_size() const {
    if (shared_step_index) return 1;
    return randomize_steps ? max_steps : num_steps;
}

std::int64_t EBTConfig::prediction_dim() const { return modality == Modality::Discrete ? vocab_size : feature_dim; }

EBTConfig EBTConfig::s1_preset() {
    EBTConfig c;
    c.variant = Variant::S1;
    c.num_steps = 2;
    c.alpha = 500.0;
    c.alpha_learnable = true;
    c.alpha_lr_multiplier = 1500.0;
    c.alpha_random_factor = 1.0;
    c.langevin_sigma = 0.0;
    c.detach_between_steps = true;
    c.truncate_loss_to_last_step = false;
    c.replay_buffer_enabled = false;
    c.randomize_steps = false;
    c.min_steps = c.max_steps = 2;
    c.shared_step_index = false;
    return c;
}

EBTConfig EBTConfig::s2_preset() {
    EBTConfig c;
    c.variant = Variant::S2;
    c.num_steps = 2;
    c.alpha = 5.0;
    c.alpha_learnable = false;
    c.alpha_lr_multiplier = 0.0;
    c.alpha_random_factor = 2.0;
    c.langevin_sigma = 3.0;
    c.detach_between_steps = false;
    c.truncate_loss_to_last_step = true;
    c.replay_buffer_enabled = true;
    c.randomize_steps = true;
    c.min_steps = 2;
    c.max_steps = 3;
    c.shared_step_index = true;
    return c;
}

EBTConfig& EBTConfig::apply_size(const std::string& preset) {
    if (preset == "xxs") {
        layers = 6;
        embed_dim = 384;
        heads = 6;
    } else if (preset == "toy") {
        layers = 2;
        embed_dim = 64;
        heads = 2;
    } else {
        throw ConfigError("unknown size preset '" + preset + "'");
    }
    return *this;
}

void EBTConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (layers < 1) fail("layers must be >= 1");
    if (embed_dim < 2 || heads < 1 || embed_dim % heads != 0) fail("embed_dim must be a positive multiple of heads");
    if (head_dim() % 2 != 0) fail("head_dim must be even for rotary encoding");
    if (ffn_dim() < 1) fail("ffn_multiplier too small");
    if (modality == Modality::Discrete && vocab_size < 2) fail("discrete mode needs vocab_size >= 2");
    if (modality == Modality::Continuous && feature_dim < 1) fail("continuous mode needs feature_dim >= 1");
    if (architecture == Architecture::Bidirectional && modality != Modality::Continuous)
        fail("bidirectional models operate on continuous features");
    if (num_steps < 1) fail("num_steps must be >= 1");
    if (randomize_steps && (min_steps < 1 || max_steps < min_steps)) fail("need 1 <= min_steps <= max_steps");
    if (!(alpha > 0.0)) fail("alpha must be > 0");
    if (alpha_random_factor < 1.0) fail("alpha_random_factor must be >= 1");
    if (langevin_sigma < 0.0) fail("langevin_sigma must be >= 0");
    if (grad_clamp && !(*grad_clamp > 0.0)) fail("grad_clamp must be > 0");
}

void EBTConfig::write(ini::Section& s) const {
    using ini::format_double;
    s.set("variant", to_string(variant));
    s.set("modality", to_string(modality));
    s.set("architecture", to_string(architecture));
    s.set("layers", std::to_string(layers));
    s.set("embed_dim", std::to_string(embed_dim));
    s.set("heads", std::to_string(heads));
    s.set("ffn_multiplier", format_double(ffn_multiplier));
    s.set("rotary_base", format_double(rotary_base));
    s.set("vocab_size", std::to_string(vocab_size));
    s.set("feature_dim", std::to_string(feature_dim));
    s.set("num_steps", std::to_string(num_steps));
    s.set("alpha", format_double(alpha));
    s.set("alpha_learnable", alpha_learnable ? "true" : "false");
    s.set("alpha_lr_multiplier", format_double(alpha_lr_multiplier));
    s.set("alpha_random_factor", format_double(alpha_random_factor));
    s.set("langevin_sigma", format_double(langevin_sigma));
    s.set("detach_between_steps", detach_between_steps ? "true" : "false");
    s.set("truncate_loss_to_last_step", truncate_loss_to_last_step ? "true" : "false");
    s.set("replay_buffer_enabled", replay_buffer_enabled ? "true" : "false");
    s.set("randomize_steps", randomize_steps ? "true" : "false");
    s.set("min_steps", std::to_string(min_steps));
    s.set("max_steps", std::to_string(max_steps));
    s.set("grad_clamp", grad_clamp ? format_double(*grad_clamp) : "none");
    s.set("use_step_embedding", use_step_embedding ? "true" : "false");
    s.set("shared_step_index", shared_step_index ? "true" : "false");
    s.set("tie_embeddings", tie_embeddings ? "true" : "false");
    s.set("separate_prediction_attention", separate_prediction_attention ? "true" : "false");
    s.set("normalize_input_distribution", normalize_input_distribution ? "true" : "false");
}

EBTConfig EBTConfig::read(const ini::Section& s) {
    EBTConfig c;
    if (auto v = s.get("preset")) c = (*v == "s2") ? s2_preset() : (*v == "s1" ? s1_preset() : throw ConfigError("unknown preset '" + *v + "'"));
    if (auto v = s.get("size")) c.apply_size(*v);
    for (const auto& [key, value] : s.entries) {
        if (key == "preset" || key == "size") continue;
        if (key == "variant") {
            if (value != "S1" && value != "S2") throw ConfigError("variant must be S1 or S2");
            c.variant = value == "S1" ? Variant::S1 : Variant::S2;
        } else if (key == "modality") {
            if (value != "discrete" && value != "continuous") throw ConfigError("modality must be discrete|continuous");
            c.modality = value == "discrete" ? Modality::Discrete : Modality::Continuous;
        } else if (key == "architecture") {
            if (value != "causal" && value != "bidirectional") throw ConfigError("architecture must be causal|bidirectional");
            c.architecture = value == "causal" ? Architecture::Causal : Architecture::Bidirectional;
        } else if (key == "layers") {
            c.layers = ini::parse_int(key, value);
        } else if (key == "embed_dim") {
            c.embed_dim = ini::parse_int(key, value);
        } else if (key == "heads") {
            c.heads = ini::parse_int(key, value);
        } else if (key == "ffn_multiplier") {
            c.ffn_multiplier = ini::parse_double(key, value);
        } else if (key == "rotary_base") {
            c.rotary_base = ini::parse_double(key, value);
        } else if (key == "vocab_size") {
            c.vocab_size = ini::parse_int(key, value);
        } else if (key == "feature_dim") {
            c.feature_dim = ini::parse_int(key, value);
        } else if (key == "num_steps") {
            c.num_steps = ini::parse_int(key, value);
        } else if (key == "alpha") {
            c.alpha = ini::parse_double(key, value);
        } else if (key == "alpha_learnable") {
            c.alpha_learnable = ini::parse_bool(key, value);
        } else if (key == "alpha_lr_multiplier") {
            c.alpha_lr_multiplier = ini::parse_double(key, value);
        } else if (key == "alpha_random_factor") {
            c.alpha_random_factor = ini::parse_double(key, value);
        } else if (key == "langevin_sigma") {
            c.langevin_sigma = ini::parse_double(key, value);
        } else if (key == "detach_between_steps") {
            c.detach_between_steps = ini::parse_bool(key, value);
        } else if (key == "truncate_loss_to_last_step") {
            c.truncate_loss_to_last_step = ini::parse_bool(key, value);
        } else if (key == "replay_buffer_enabled") {
            c.replay_buffer_enabled = ini::parse_bool(key, value);
        } else if (key == "randomize_steps") {
            c.randomize_steps = ini::parse_bool(key, value);
        } else if (key == "min_steps") {
            c.min_steps = ini::parse_int(key, value);
        } else if (key == "max_steps") {
            c.max_steps = ini::parse_int(key, value);
        } else if (key == "grad_clamp") {
            if (value == "none") c.grad_clamp.reset();
            else c.grad_clamp = ini::parse_double(key, value);
        } else if (key == "use_step_embedding") {
            c.use_step_embedding = ini::parse_bool(key, value);
        } else if (key == "shared_step_index") {
            c.shared_step_index = ini::parse_bool(key, value);
        } else if (key == "tie_embeddings") {
            c.tie_embeddings = ini::parse_bool(key, value);
        } else if (key == "separate_prediction_attention") {
            c.separate_prediction_attention = ini::parse_bool(key, value);
        } else if (key == "normalize_input_distribution") {
            c.normalize_input_distribution = ini::parse_bool(key, value);
        } else {
            throw ConfigError("unknown model key '" + key + "'");
        }
    }
    c.validate();
    return c;
}

}  // namespace ebt
