#include "convctx/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace convctx {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t");
    return s.substr(a, b - a + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const std::string& want) {
    throw ConfigError("config key '" + key + "': cannot read '" + value + "' as " + want);
}

int parse_int(const std::string& key, const std::string& value) {
    int v = 0;
    auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc() || p != value.data() + value.size()) bad_value(key, value, "an integer");
    return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc() || p != value.data() + value.size()) {
        bad_value(key, value, "an unsigned integer");
    }
    return v;
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) bad_value(key, value, "a number");
        return v;
    } catch (const std::logic_error&) {
        bad_value(key, value, "a number");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    bad_value(key, value, "a boolean (true/false)");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
    std::vector<int> out;
    if (trim(value).empty()) return out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_int(key, trim(item)));
    return out;
}

std::string format_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    (void)ec;
    return std::string(buf, p);
}

std::string format_int_list(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(v[i]);
    }
    return s;
}

bool apply_enc_conv_key(ModelConfig& m, const std::string& key, const std::string& rest,
                        const std::string& value) {
    // rest looks like "<index>.<field>".
    std::size_t dot = rest.find('.');
    if (dot == std::string::npos || dot == 0) return false;
    const std::string idx_text = rest.substr(0, dot);
    const std::string field = rest.substr(dot + 1);
    int idx = 0;
    auto [p, ec] = std::from_chars(idx_text.data(), idx_text.data() + idx_text.size(), idx);
    if (ec != std::errc() || p != idx_text.data() + idx_text.size() || idx < 0) return false;
    if (static_cast<std::size_t>(idx) >= m.encoder_conv_blocks.size()) {
        m.encoder_conv_blocks.resize(static_cast<std::size_t>(idx) + 1);
    }
    ConvBlockConfig& b = m.encoder_conv_blocks[static_cast<std::size_t>(idx)];
    if (field == "kernels") {
        b.kernels = parse_int_list(key, value);
    } else if (field == "channels") {
        b.channels = parse_int_list(key, value);
    } else if (field == "pool") {
        b.pool = parse_int(key, value);
    } else {
        return false;
    }
    return true;
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    features.validate();
    if (train.epochs < 0) throw ConfigError("train.epochs must be >= 0");
    if (train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (train.rho <= 0.0 || train.rho >= 1.0) throw ConfigError("train.rho outside (0, 1)");
    if (train.eps <= 0.0) throw ConfigError("train.eps must be positive");
    if (train.lr <= 0.0) throw ConfigError("train.lr must be positive");
    if (train.clip <= 0.0) throw ConfigError("train.clip must be positive");
    if (train.checkpoint_retention < 0) {
        throw ConfigError("train.checkpoint_retention must be >= 0");
    }
    if (data.kind != "synthetic" && data.kind != "features" && data.kind != "pcm") {
        throw ConfigError("data.kind '" + data.kind +
                          "' is not one of synthetic, features, pcm");
    }
    if (data.kind == "synthetic") {
        data.synthetic.validate();
        if (data.synthetic_utts < 1) throw ConfigError("data.synthetic.utts must be >= 1");
    } else if (data.path.empty()) {
        throw ConfigError("data.path is required for data.kind=" + data.kind);
    }
    if (decode.beam < 1) throw ConfigError("decode.beam must be >= 1");
    if (decode.max_len < 0) throw ConfigError("decode.max_len must be >= 0");
}

void apply_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "precision") {
        if (value == "f32") {
            cfg.precision = Precision::f32;
        } else if (value == "f64") {
            cfg.precision = Precision::f64;
        } else {
            bad_value(key, value, "f32 or f64");
        }
        return;
    }
    if (key == "seed") { cfg.seed = parse_u64(key, value); return; }

    ModelConfig& m = cfg.model;
    if (key == "model.preset") { m = preset(value); return; }
    if (key == "model.input_dim") { m.input_dim = parse_int(key, value); return; }
    if (key == "model.d_model") { m.d_model = parse_int(key, value); return; }
    if (key == "model.heads") { m.heads = parse_int(key, value); return; }
    if (key == "model.ffn_width") { m.ffn_width = parse_int(key, value); return; }
    if (key == "model.enc_layers") { m.enc_layers = parse_int(key, value); return; }
    if (key == "model.dec_layers") { m.dec_layers = parse_int(key, value); return; }
    if (key == "model.vocab_size") { m.vocab_size = parse_int(key, value); return; }
    if (key == "model.emb_dim") { m.emb_dim = parse_int(key, value); return; }
    if (key == "model.dropout") { m.dropout = parse_double(key, value); return; }
    if (key == "model.positional_mode") {
        m.positional_mode = positional_mode_from_string(value);
        return;
    }
    if (key == "model.enc_attention_mode") {
        m.enc_attention_mode = enc_attention_mode_from_string(value);
        return;
    }
    if (key == "model.dec_conv.kernels") {
        m.decoder_conv.kernels = parse_int_list(key, value);
        return;
    }
    if (key == "model.dec_conv.channels") {
        m.decoder_conv.channels = parse_int_list(key, value);
        return;
    }
    if (key.rfind("model.enc_conv", 0) == 0 &&
        apply_enc_conv_key(m, key, key.substr(14), value)) {
        return;
    }

    FeatureConfig& f = cfg.features;
    if (key == "features.sample_rate") { f.sample_rate = parse_int(key, value); return; }
    if (key == "features.window_ms") { f.window_ms = parse_double(key, value); return; }
    if (key == "features.hop_ms") { f.hop_ms = parse_double(key, value); return; }
    if (key == "features.mel_bins") { f.mel_bins = parse_int(key, value); return; }
    if (key == "features.fft_size") { f.fft_size = parse_int(key, value); return; }
    if (key == "features.log_floor") { f.log_floor = parse_double(key, value); return; }
    if (key == "features.fmin") { f.fmin = parse_double(key, value); return; }
    if (key == "features.fmax") { f.fmax = parse_double(key, value); return; }
    if (key == "features.normalize") { f.normalize = parse_bool(key, value); return; }

    TrainConfig& t = cfg.train;
    if (key == "train.epochs") { t.epochs = parse_int(key, value); return; }
    if (key == "train.batch_size") { t.batch_size = parse_int(key, value); return; }
    if (key == "train.shuffle") { t.shuffle = parse_bool(key, value); return; }
    if (key == "train.rho") { t.rho = parse_double(key, value); return; }
    if (key == "train.eps") { t.eps = parse_double(key, value); return; }
    if (key == "train.lr") { t.lr = parse_double(key, value); return; }
    if (key == "train.clip") { t.clip = parse_double(key, value); return; }
    if (key == "train.checkpoint_dir") { t.checkpoint_dir = value; return; }
    if (key == "train.checkpoint_retention") {
        t.checkpoint_retention = parse_int(key, value);
        return;
    }
    if (key == "train.metrics_log") { t.metrics_log = value; return; }

    DataConfig& d = cfg.data;
    if (key == "data.kind") { d.kind = value; return; }
    if (key == "data.path") { d.path = value; return; }
    if (key == "data.vocab") { d.vocab = value; return; }
    if (key == "data.synthetic.utts") { d.synthetic_utts = parse_int(key, value); return; }
    if (key == "data.synthetic.seed") { d.synthetic_seed = parse_u64(key, value); return; }
    if (key == "data.synthetic.alphabet") {
        d.synthetic.alphabet_size = parse_int(key, value);
        return;
    }
    if (key == "data.synthetic.template_frames") {
        d.synthetic.template_frames = parse_int(key, value);
        return;
    }
    if (key == "data.synthetic.feat_dim") {
        d.synthetic.feat_dim = parse_int(key, value);
        return;
    }
    if (key == "data.synthetic.noise") { d.synthetic.noise = parse_double(key, value); return; }
    if (key == "data.synthetic.min_tokens") {
        d.synthetic.min_tokens = parse_int(key, value);
        return;
    }
    if (key == "data.synthetic.max_tokens") {
        d.synthetic.max_tokens = parse_int(key, value);
        return;
    }
    if (key == "data.synthetic.min_template_distance") {
        d.synthetic.min_template_distance = parse_double(key, value);
        return;
    }
    if (key == "data.synthetic.template_seed") {
        d.synthetic.template_seed = parse_u64(key, value);
        return;
    }

    if (key == "decode.beam") { cfg.decode.beam = parse_int(key, value); return; }
    if (key == "decode.max_len") { cfg.decode.max_len = parse_int(key, value); return; }

    throw ConfigError("unknown config key '" + key + "'");
}

void apply_override(RunConfig& cfg, const std::string& key_equals_value) {
    const std::size_t eq = key_equals_value.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("override '" + key_equals_value + "' is not key=value");
    }
    apply_key(cfg, trim(key_equals_value.substr(0, eq)),
              trim(key_equals_value.substr(eq + 1)));
}

RunConfig parse_config(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": expected key=value, got '" + line + "'");
        }
        apply_key(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open config file '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

std::string serialize_config(const RunConfig& cfg) {
    std::map<std::string, std::string> kv;
    kv["precision"] = cfg.precision == Precision::f32 ? "f32" : "f64";
    kv["seed"] = std::to_string(cfg.seed);

    const ModelConfig& m = cfg.model;
    kv["model.input_dim"] = std::to_string(m.input_dim);
    kv["model.d_model"] = std::to_string(m.d_model);
    kv["model.heads"] = std::to_string(m.heads);
    kv["model.ffn_width"] = std::to_string(m.ffn_width);
    kv["model.enc_layers"] = std::to_string(m.enc_layers);
    kv["model.dec_layers"] = std::to_string(m.dec_layers);
    kv["model.vocab_size"] = std::to_string(m.vocab_size);
    kv["model.emb_dim"] = std::to_string(m.emb_dim);
    kv["model.dropout"] = format_double(m.dropout);
    kv["model.positional_mode"] = to_string(m.positional_mode);
    kv["model.enc_attention_mode"] = to_string(m.enc_attention_mode);
    for (std::size_t i = 0; i < m.encoder_conv_blocks.size(); ++i) {
        const std::string p = "model.enc_conv" + std::to_string(i);
        kv[p + ".kernels"] = format_int_list(m.encoder_conv_blocks[i].kernels);
        kv[p + ".channels"] = format_int_list(m.encoder_conv_blocks[i].channels);
        kv[p + ".pool"] = std::to_string(m.encoder_conv_blocks[i].pool);
    }
    kv["model.dec_conv.kernels"] = format_int_list(m.decoder_conv.kernels);
    kv["model.dec_conv.channels"] = format_int_list(m.decoder_conv.channels);

    const FeatureConfig& f = cfg.features;
    kv["features.sample_rate"] = std::to_string(f.sample_rate);
    kv["features.window_ms"] = format_double(f.window_ms);
    kv["features.hop_ms"] = format_double(f.hop_ms);
    kv["features.mel_bins"] = std::to_string(f.mel_bins);
    kv["features.fft_size"] = std::to_string(f.fft_size);
    kv["features.log_floor"] = format_double(f.log_floor);
    kv["features.fmin"] = format_double(f.fmin);
    kv["features.fmax"] = format_double(f.fmax);
    kv["features.normalize"] = f.normalize ? "true" : "false";

    const TrainConfig& t = cfg.train;
    kv["train.epochs"] = std::to_string(t.epochs);
    kv["train.batch_size"] = std::to_string(t.batch_size);
    kv["train.shuffle"] = t.shuffle ? "true" : "false";
    kv["train.rho"] = format_double(t.rho);
    kv["train.eps"] = format_double(t.eps);
    kv["train.lr"] = format_double(t.lr);
    kv["train.clip"] = format_double(t.clip);
    kv["train.checkpoint_dir"] = t.checkpoint_dir;
    kv["train.checkpoint_retention"] = std::to_string(t.checkpoint_retention);
    kv["train.metrics_log"] = t.metrics_log;

    const DataConfig& d = cfg.data;
    kv["data.kind"] = d.kind;
    kv["data.path"] = d.path;
    kv["data.vocab"] = d.vocab;
    kv["data.synthetic.utts"] = std::to_string(d.synthetic_utts);
    kv["data.synthetic.seed"] = std::to_string(d.synthetic_seed);
    kv["data.synthetic.alphabet"] = std::to_string(d.synthetic.alphabet_size);
    kv["data.synthetic.template_frames"] = std::to_string(d.synthetic.template_frames);
    kv["data.synthetic.feat_dim"] = std::to_string(d.synthetic.feat_dim);
    kv["data.synthetic.noise"] = format_double(d.synthetic.noise);
    kv["data.synthetic.min_tokens"] = std::to_string(d.synthetic.min_tokens);
    kv["data.synthetic.max_tokens"] = std::to_string(d.synthetic.max_tokens);
    kv["data.synthetic.min_template_distance"] =
        format_double(d.synthetic.min_template_distance);
    kv["data.synthetic.template_seed"] = std::to_string(d.synthetic.template_seed);

    kv["decode.beam"] = std::to_string(cfg.decode.beam);
    kv["decode.max_len"] = std::to_string(cfg.decode.max_len);

    std::string out;
    for (const auto& [k, v] : kv) {
        out += k;
        out += '=';
        out += v;
        out += '\n';
    }
    return out;
}

}  // namespace convctx
