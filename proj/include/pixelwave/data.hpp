#pragma once

#include <string>
#include <vector>

#include "pixelwave/tensor.hpp"

namespace pixelwave {

inline constexpr int64_t kWaveformBins = 256;

// One LiDAR-style return profile with its pixel coordinates and targets.
// Amplitudes are min-max normalized to [0, 1].
struct WaveformRecord {
    double lat = 0, lon = 0;  // pixel row / column within the tile
    int32_t signal_start = 0, signal_end = kWaveformBins;
    float rh = 0;     // height of the tallest object (m)
    float cover = 0;  // fractional canopy cover (%)
    float pai = 0;    // plant area index
    std::vector<float> samples;  // kWaveformBins amplitudes

    Tensor<float> tensor() const { return Tensor<float>({kWaveformBins, 1}, std::vector<float>(samples)); }
};

// One training example: composite image, temporal stack, sparse waveforms
// and the dense synthetic ground-truth maps used for labels.
struct TileSample {
    int64_t index = 0;
    Tensor<float> image;   // H x W x C
    Tensor<float> stack;   // T x H x W x C
    std::vector<WaveformRecord> waveforms;
    Tensor<float> height_map;  // H x W
    Tensor<float> cover_map;   // H x W
    Tensor<float> pai_map;     // H x W
    Tensor<float> class_map;   // H x W, integer-valued class ids
};

// "DWAV" waveform record file.
void save_waveforms(std::ostream& os, const std::vector<WaveformRecord>& records);
std::vector<WaveformRecord> load_waveforms(std::istream& is);
void save_waveforms_file(const std::string& path, const std::vector<WaveformRecord>& records);
std::vector<WaveformRecord> load_waveforms_file(const std::string& path);

// "DTIL" tile container: the composite tensor, the temporal stack, the
// waveform block and the label maps.
void save_tile(const std::string& path, const TileSample& tile);
TileSample load_tile(const std::string& path);

// Crops a raw record to [signal_start, signal_end], linearly resamples to
// kWaveformBins bins and min-max normalizes to [0, 1].
std::vector<float> preprocess_waveform(const std::vector<float>& raw, int64_t signal_start, int64_t signal_end);

}  // namespace pixelwave
