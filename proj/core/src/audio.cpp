#include "convctx/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

namespace convctx {

namespace {

constexpr double kPi = std::numbers::pi;

bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

}  // namespace

int FeatureConfig::window_samples() const {
    return static_cast<int>(std::lround(window_ms * sample_rate / 1000.0));
}

int FeatureConfig::hop_samples() const {
    return static_cast<int>(std::lround(hop_ms * sample_rate / 1000.0));
}

void FeatureConfig::validate() const {
    if (sample_rate < 1) throw ConfigError("features: sample_rate must be positive");
    if (hop_samples() < 1) throw ConfigError("features: hop shorter than one sample");
    if (window_samples() < hop_samples()) {
        throw ConfigError("features: window must be at least one hop");
    }
    if (mel_bins < 1) throw ConfigError("features: mel_bins must be >= 1");
    if (!is_power_of_two(fft_size)) {
        throw ConfigError("features: fft_size " + std::to_string(fft_size) +
                          " is not a power of two");
    }
    if (fft_size < window_samples()) {
        throw ConfigError("features: fft_size " + std::to_string(fft_size) +
                          " shorter than the " + std::to_string(window_samples()) +
                          "-sample window");
    }
    if (log_floor <= 0.0) throw ConfigError("features: log floor must be positive");
    const double nyquist = sample_rate / 2.0;
    const double hi = fmax > 0.0 ? fmax : nyquist;
    if (fmin < 0.0 || hi <= fmin || hi > nyquist) {
        throw ConfigError("features: invalid band [" + std::to_string(fmin) + ", " +
                          std::to_string(hi) + "] Hz");
    }
}

void fft_inplace(std::vector<std::complex<double>>& a) {
    const std::size_t n = a.size();
    if (!is_power_of_two(static_cast<int>(n))) {
        throw DimensionError("fft: size " + std::to_string(n) + " is not a power of two");
    }
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * kPi / static_cast<double>(len);
        const std::complex<double> wn(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (std::size_t k = 0; k < len / 2; ++k) {
                const std::complex<double> u = a[i + k];
                const std::complex<double> v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wn;
            }
        }
    }
}

std::vector<double> mel_center_frequencies(const FeatureConfig& cfg) {
    cfg.validate();
    const double hi = cfg.fmax > 0.0 ? cfg.fmax : cfg.sample_rate / 2.0;
    const double mel_lo = hz_to_mel(cfg.fmin);
    const double mel_hi = hz_to_mel(hi);
    std::vector<double> centers(static_cast<std::size_t>(cfg.mel_bins));
    for (int m = 0; m < cfg.mel_bins; ++m) {
        const double mel = mel_lo + (mel_hi - mel_lo) * (m + 1) / (cfg.mel_bins + 1);
        centers[static_cast<std::size_t>(m)] = mel_to_hz(mel);
    }
    return centers;
}

std::vector<std::vector<double>> mel_filterbank(const FeatureConfig& cfg) {
    cfg.validate();
    const double hi = cfg.fmax > 0.0 ? cfg.fmax : cfg.sample_rate / 2.0;
    const double mel_lo = hz_to_mel(cfg.fmin);
    const double mel_hi = hz_to_mel(hi);
    const int bins = cfg.fft_size / 2 + 1;
    std::vector<double> edge(static_cast<std::size_t>(cfg.mel_bins) + 2);
    for (std::size_t m = 0; m < edge.size(); ++m) {
        edge[m] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(m) /
                            (cfg.mel_bins + 1));
    }
    std::vector<std::vector<double>> bank(
        static_cast<std::size_t>(cfg.mel_bins),
        std::vector<double>(static_cast<std::size_t>(bins), 0.0));
    const double hz_per_bin = static_cast<double>(cfg.sample_rate) / cfg.fft_size;
    for (int m = 0; m < cfg.mel_bins; ++m) {
        const double left = edge[static_cast<std::size_t>(m)];
        const double center = edge[static_cast<std::size_t>(m) + 1];
        const double right = edge[static_cast<std::size_t>(m) + 2];
        double sum = 0.0;
        for (int j = 0; j < bins; ++j) {
            const double f = j * hz_per_bin;
            double w = 0.0;
            if (f > left && f < center) {
                w = (f - left) / (center - left);
            } else if (f >= center && f < right) {
                w = (right - f) / (right - center);
            }
            bank[static_cast<std::size_t>(m)][static_cast<std::size_t>(j)] = w;
            sum += w;
        }
        if (sum <= 0.0) {
            throw ConfigError("features: mel filter " + std::to_string(m) +
                              " covers no FFT bin; reduce mel_bins or raise fft_size");
        }
    }
    return bank;
}

Tensor logmel(const std::vector<double>& samples, const FeatureConfig& cfg) {
    cfg.validate();
    const int win = cfg.window_samples();
    const int hop = cfg.hop_samples();
    const int len = static_cast<int>(samples.size());
    if (len < win) {
        throw InputError("logmel: signal of " + std::to_string(len) +
                         " samples is shorter than one " + std::to_string(win) +
                         "-sample window");
    }
    const int T = 1 + (len - win) / hop;
    const auto bank = mel_filterbank(cfg);
    const int bins = cfg.fft_size / 2 + 1;

    std::vector<double> hann(static_cast<std::size_t>(win));
    for (int n = 0; n < win; ++n) {
        hann[static_cast<std::size_t>(n)] =
            0.5 - 0.5 * std::cos(2.0 * kPi * n / (win - 1));
    }

    std::vector<double> out(static_cast<std::size_t>(T) * cfg.mel_bins);
    std::vector<std::complex<double>> frame(static_cast<std::size_t>(cfg.fft_size));
    std::vector<double> power(static_cast<std::size_t>(bins));
    for (int t = 0; t < T; ++t) {
        const int start = t * hop;
        for (int n = 0; n < cfg.fft_size; ++n) {
            const double v = n < win ? samples[static_cast<std::size_t>(start + n)] *
                                           hann[static_cast<std::size_t>(n)]
                                     : 0.0;
            frame[static_cast<std::size_t>(n)] = {v, 0.0};
        }
        fft_inplace(frame);
        for (int j = 0; j < bins; ++j) {
            power[static_cast<std::size_t>(j)] = std::norm(frame[static_cast<std::size_t>(j)]);
        }
        for (int m = 0; m < cfg.mel_bins; ++m) {
            double energy = 0.0;
            const auto& filt = bank[static_cast<std::size_t>(m)];
            for (int j = 0; j < bins; ++j) {
                energy += filt[static_cast<std::size_t>(j)] * power[static_cast<std::size_t>(j)];
            }
            out[static_cast<std::size_t>(t) * cfg.mel_bins + m] =
                std::log(std::max(energy, cfg.log_floor));
        }
    }
    return Tensor::from({T, cfg.mel_bins}, std::move(out));
}

Tensor normalize_features(const Tensor& feats) {
    if (feats.ndim() != 2) {
        throw DimensionError("normalize_features: expected [T, F], got " +
                             shape_str(feats.shape()));
    }
    const int T = feats.extent(0), F = feats.extent(1);
    auto v = feats.values();
    std::vector<double> out(v.begin(), v.end());
    for (int f = 0; f < F; ++f) {
        double mean = 0.0;
        for (int t = 0; t < T; ++t) mean += v[static_cast<std::size_t>(t) * F + f];
        mean /= T;
        double var = 0.0;
        for (int t = 0; t < T; ++t) {
            const double d = v[static_cast<std::size_t>(t) * F + f] - mean;
            var += d * d;
        }
        var /= T;
        const double inv = 1.0 / std::sqrt(var + 1e-8);
        for (int t = 0; t < T; ++t) {
            out[static_cast<std::size_t>(t) * F + f] =
                (v[static_cast<std::size_t>(t) * F + f] - mean) * inv;
        }
    }
    return Tensor::from({T, F}, std::move(out));
}

std::vector<double> read_pcm_s16le(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open PCM file '" + path + "'");
    std::vector<char> raw((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
    if (raw.size() % 2 != 0) {
        throw InputError("PCM file '" + path + "' has an odd byte count");
    }
    std::vector<double> samples(raw.size() / 2);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto lo = static_cast<std::uint8_t>(raw[2 * i]);
        const auto hi = static_cast<std::uint8_t>(raw[2 * i + 1]);
        const auto s =
            static_cast<std::int16_t>(static_cast<std::uint16_t>(lo) |
                                      (static_cast<std::uint16_t>(hi) << 8));
        samples[i] = static_cast<double>(s) / 32768.0;
    }
    return samples;
}

// ---------------------------------------------------------------------------
// Synthetic task
// ---------------------------------------------------------------------------

void SyntheticTask::validate() const {
    if (alphabet_size < 2) throw ConfigError("synthetic: alphabet_size must be >= 2");
    if (template_frames < 1) throw ConfigError("synthetic: template_frames must be >= 1");
    if (feat_dim < 1) throw ConfigError("synthetic: feat_dim must be >= 1");
    if (noise < 0.0) throw ConfigError("synthetic: noise must be >= 0");
    if (min_tokens < 1 || max_tokens < min_tokens) {
        throw ConfigError("synthetic: need 1 <= min_tokens <= max_tokens");
    }
    if (min_template_distance <= 0.0) {
        throw ConfigError("synthetic: min_template_distance must be positive");
    }
}

std::vector<Tensor> synthetic_templates(const SyntheticTask& task) {
    task.validate();
    Rng rng(task.template_seed);
    const std::int64_t n = static_cast<std::int64_t>(task.template_frames) * task.feat_dim;
    std::vector<std::vector<double>> raw;
    int attempts = 0;
    while (static_cast<int>(raw.size()) < task.alphabet_size) {
        if (++attempts > task.alphabet_size * 1000) {
            throw ConfigError("synthetic: cannot place " +
                              std::to_string(task.alphabet_size) +
                              " templates at pairwise distance " +
                              std::to_string(task.min_template_distance));
        }
        std::vector<double> cand(static_cast<std::size_t>(n));
        for (double& v : cand) v = rng.uniform(-1.0, 1.0);
        bool ok = true;
        for (const auto& prev : raw) {
            double d2 = 0.0;
            for (std::size_t i = 0; i < cand.size(); ++i) {
                const double d = cand[i] - prev[i];
                d2 += d * d;
            }
            if (d2 < task.min_template_distance * task.min_template_distance) {
                ok = false;
                break;
            }
        }
        if (ok) raw.push_back(std::move(cand));
    }
    std::vector<Tensor> templates;
    for (auto& t : raw) {
        templates.push_back(Tensor::from({task.template_frames, task.feat_dim}, std::move(t)));
    }
    return templates;
}

std::vector<std::string> synthetic_units(int alphabet_size) {
    std::vector<std::string> units;
    for (int i = 0; i < alphabet_size; ++i) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "w%02d", i);
        units.push_back("▁" + std::string(buf));
    }
    return units;
}

Dataset make_synthetic(const SyntheticTask& task, int n_utts, std::uint64_t seed) {
    task.validate();
    if (n_utts < 1) throw ConfigError("synthetic: n_utts must be >= 1");
    const std::vector<Tensor> templates = synthetic_templates(task);
    Rng rng(seed);
    Dataset data;
    for (int u = 0; u < n_utts; ++u) {
        const int n_tok = task.min_tokens +
                          static_cast<int>(rng.below(
                              static_cast<std::uint64_t>(task.max_tokens - task.min_tokens + 1)));
        Utterance utt;
        char buf[32];
        std::snprintf(buf, sizeof buf, "synth-%04d", u);
        utt.id = buf;
        std::vector<double> feats(static_cast<std::size_t>(n_tok) * task.template_frames *
                                  task.feat_dim);
        for (int i = 0; i < n_tok; ++i) {
            const int sym = static_cast<int>(rng.below(static_cast<std::uint64_t>(task.alphabet_size)));
            utt.tokens.push_back(kNumReservedIds + sym);
            const auto tv = templates[static_cast<std::size_t>(sym)].values();
            double* dst = feats.data() +
                          static_cast<std::size_t>(i) * task.template_frames * task.feat_dim;
            for (std::int64_t j = 0; j < templates[static_cast<std::size_t>(sym)].size(); ++j) {
                dst[j] = tv[j] + task.noise * rng.normal();
            }
        }
        utt.features = Tensor::from({n_tok * task.template_frames, task.feat_dim},
                                    std::move(feats));
        data.push_back(std::move(utt));
    }
    return data;
}

// ---------------------------------------------------------------------------
// Dataset container
// ---------------------------------------------------------------------------

namespace {

constexpr char kDatasetMagic[4] = {'C', 'C', 'D', 'S'};

void put_u32(std::ostream& out, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 8);
}

void put_f32(std::ostream& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

std::uint32_t get_u32(std::istream& in, const std::string& path) {
    char b[4];
    if (!in.read(b, 4)) throw InputError("truncated dataset file '" + path + "'");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(b[i])) << (8 * i);
    }
    return v;
}

std::uint64_t get_u64(std::istream& in, const std::string& path) {
    char b[8];
    if (!in.read(b, 8)) throw InputError("truncated dataset file '" + path + "'");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(b[i])) << (8 * i);
    }
    return v;
}

float get_f32(std::istream& in, const std::string& path) {
    const std::uint32_t bits = get_u32(in, path);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace

void save_dataset(const std::string& path, const Dataset& data) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write dataset file '" + path + "'");
    out.write(kDatasetMagic, 4);
    put_u32(out, 1);  // version
    const int feat_dim = data.empty() ? 0 : data.front().features.extent(1);
    put_u32(out, static_cast<std::uint32_t>(feat_dim));
    put_u64(out, data.size());
    for (const Utterance& u : data) {
        if (u.features.ndim() != 2 || u.features.extent(1) != feat_dim) {
            throw InputError("dataset: utterance '" + u.id + "' feature shape " +
                             shape_str(u.features.shape()) + " inconsistent with width " +
                             std::to_string(feat_dim));
        }
        put_u64(out, u.id.size());
        out.write(u.id.data(), static_cast<std::streamsize>(u.id.size()));
        put_u32(out, static_cast<std::uint32_t>(u.features.extent(0)));
        for (double v : u.features.values()) put_f32(out, static_cast<float>(v));
        put_u32(out, static_cast<std::uint32_t>(u.tokens.size()));
        for (int t : u.tokens) put_u32(out, static_cast<std::uint32_t>(t));
    }
    if (!out) throw InputError("failed writing dataset file '" + path + "'");
}

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open dataset file '" + path + "'");
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kDatasetMagic, 4) != 0) {
        throw InputError("'" + path + "' is not a dataset file");
    }
    const std::uint32_t version = get_u32(in, path);
    if (version != 1) {
        throw InputError("dataset file '" + path + "' has unsupported version " +
                         std::to_string(version));
    }
    const int feat_dim = static_cast<int>(get_u32(in, path));
    const std::uint64_t n = get_u64(in, path);
    Dataset data;
    for (std::uint64_t i = 0; i < n; ++i) {
        Utterance u;
        const std::uint64_t id_len = get_u64(in, path);
        u.id.resize(id_len);
        if (id_len > 0 && !in.read(u.id.data(), static_cast<std::streamsize>(id_len))) {
            throw InputError("truncated dataset file '" + path + "'");
        }
        const int T = static_cast<int>(get_u32(in, path));
        std::vector<double> vals(static_cast<std::size_t>(T) * feat_dim);
        for (double& v : vals) v = static_cast<double>(get_f32(in, path));
        u.features = Tensor::from({T, feat_dim}, std::move(vals));
        const std::uint32_t n_tok = get_u32(in, path);
        for (std::uint32_t t = 0; t < n_tok; ++t) {
            u.tokens.push_back(static_cast<int>(get_u32(in, path)));
        }
        data.push_back(std::move(u));
    }
    return data;
}

}  // namespace convctx
