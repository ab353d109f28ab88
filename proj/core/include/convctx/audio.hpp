#pragma once

#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "convctx/data.hpp"
#include "convctx/rng.hpp"
#include "convctx/tensor.hpp"

namespace convctx {

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

struct FeatureConfig {
    int sample_rate = 16000;
    double window_ms = 25.0;
    double hop_ms = 10.0;
    int mel_bins = 80;
    int fft_size = 512;
    double log_floor = 1e-10;
    double fmin = 0.0;
    double fmax = 0.0;  // 0 means Nyquist
    bool normalize = true;  // per-utterance mean/variance, applied by the pipeline

    int window_samples() const;
    int hop_samples() const;
    void validate() const;

    bool operator==(const FeatureConfig&) const = default;
};

// In-place radix-2 FFT; size must be a power of two.
void fft_inplace(std::vector<std::complex<double>>& a);

// Triangular mel filters on the HTK scale (2595 log10(1 + f/700)), peak 1,
// rows indexed [mel_bin][fft_bin] with fft_bin in [0, fft_size/2].
std::vector<std::vector<double>> mel_filterbank(const FeatureConfig& cfg);
std::vector<double> mel_center_frequencies(const FeatureConfig& cfg);

// Hann window -> power spectrum -> mel bank -> log(max(energy, floor)).
// Frame count: 1 + floor((len - window) / hop).
Tensor logmel(const std::vector<double>& samples, const FeatureConfig& cfg);

// Per-dimension mean/variance normalization over time.
Tensor normalize_features(const Tensor& feats);

// Mono 16-bit little-endian PCM in [-1, 1).
std::vector<double> read_pcm_s16le(const std::string& path);

// ---------------------------------------------------------------------------
// Synthetic desk-scale task
// ---------------------------------------------------------------------------

struct SyntheticTask {
    int alphabet_size = 12;
    int template_frames = 6;
    int feat_dim = 20;
    double noise = 0.05;
    int min_tokens = 2;
    int max_tokens = 6;
    double min_template_distance = 2.0;
    std::uint64_t template_seed = 99;

    void validate() const;

    bool operator==(const SyntheticTask&) const = default;
};

// One fixed spectral template per alphabet symbol, deterministic given the
// task; pairwise L2 distance at least min_template_distance.
std::vector<Tensor> synthetic_templates(const SyntheticTask& task);

// Subword-style unit strings for the synthetic alphabet ("▁w00", ...).
std::vector<std::string> synthetic_units(int alphabet_size);

// Each utterance: uniformly drawn token sequence, features = concatenated
// templates plus Gaussian noise. Token ids start at the first non-reserved id.
Dataset make_synthetic(const SyntheticTask& task, int n_utts, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Dataset container (features + token ids), binary, little-endian.
// ---------------------------------------------------------------------------

void save_dataset(const std::string& path, const Dataset& data);
Dataset load_dataset(const std::string& path);

}  // namespace convctx
