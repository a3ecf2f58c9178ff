#pragma once

#include <string>
#include <vector>

#include "pixelwave/tensor.hpp"

namespace pixelwave {

// 8-bit binary PGM of a scalar field, min-max scaled.
void write_pgm(const std::string& path, const Tensor<float>& field);

struct WaveformTrace {
    std::string label;
    std::string color;  // SVG color
    std::vector<float> samples;
};

// Overlay chart of waveform traces as an SVG polyline plot.
void write_waveform_svg(const std::string& path, const std::vector<WaveformTrace>& traces);

}  // namespace pixelwave
