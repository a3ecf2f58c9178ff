#pragma once

#include "pixelwave/data.hpp"
#include "pixelwave/rng.hpp"

namespace pixelwave {

// Normalizes linear backscatter acquired at incidence angle theta to the
// reference angle: sigma_ref = sigma * cos^2(theta_ref) / cos^2(theta).
double s1_cosine_correction(double sigma_linear, double theta_deg, double theta_ref_deg = 40.0);

struct SynthConfig {
    uint64_t seed = 0;
    int64_t tiles = 64;
    int64_t height = 32, width = 32, channels = 6;
    int64_t frames = 3;
    int64_t classes = 6;
    double waveform_rate = 26.0;  // expected records per 64 x 64 tile

    void validate() const {
        if (tiles < 1 || height < 8 || width < 8) throw config_error("scene needs >= 1 tile of >= 8 x 8 pixels");
        if (channels < 3 || channels > 16) throw config_error("synthetic channels must lie in [3, 16]");
        if (frames < 1 || classes < 2 || waveform_rate <= 0) throw config_error("bad synthetic scene parameters");
    }
};

// Deterministic synthetic scene: smooth latent terrain fields (height,
// cover, class) drive both the pixel channels and the co-located
// waveforms, so every retrieval target has an analytic ground truth.
struct SynthScene {
    SynthConfig cfg;
    std::vector<TileSample> tiles;
};

SynthScene synth_scene(const SynthConfig& cfg);

// Tile-file round trip: tiles/tile_NNNN.dtil plus a manifest.
void save_scene(const std::string& dir, const SynthScene& scene);
SynthScene load_scene(const std::string& dir);

// Deterministic 80/20 split by tile index.
inline bool is_test_tile(int64_t index) { return index % 5 == 4; }

}  // namespace pixelwave
