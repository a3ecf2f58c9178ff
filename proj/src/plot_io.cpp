#include "pixelwave/plot_io.hpp"

#include <fstream>

namespace pixelwave {

void write_pgm(const std::string& path, const Tensor<float>& field) {
    if (field.rank() != 2) throw dimension_error("write_pgm expects a 2-D field");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw state_error("cannot open for writing: " + path);
    int64_t h = field.shape[0], w = field.shape[1];
    float mn = field[0], mx = field[0];
    for (int64_t i = 0; i < field.numel(); ++i) {
        mn = std::min(mn, field[i]);
        mx = std::max(mx, field[i]);
    }
    float span = mx > mn ? mx - mn : 1.0f;
    os << "P5\n" << w << " " << h << "\n255\n";
    for (int64_t i = 0; i < field.numel(); ++i) {
        auto v = static_cast<unsigned char>(255.0f * (field[i] - mn) / span);
        os.write(reinterpret_cast<const char*>(&v), 1);
    }
}

void write_waveform_svg(const std::string& path, const std::vector<WaveformTrace>& traces) {
    std::ofstream os(path);
    if (!os) throw state_error("cannot open for writing: " + path);
    const int width = 640, height = 240, pad = 10;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    for (const auto& tr : traces) {
        if (tr.samples.empty()) continue;
        float mn = tr.samples[0], mx = tr.samples[0];
        for (float v : tr.samples) {
            mn = std::min(mn, v);
            mx = std::max(mx, v);
        }
        float span = mx > mn ? mx - mn : 1.0f;
        os << "<polyline fill=\"none\" stroke=\"" << tr.color << "\" stroke-width=\"1.2\" points=\"";
        for (size_t i = 0; i < tr.samples.size(); ++i) {
            double x = pad + (width - 2.0 * pad) * static_cast<double>(i) / static_cast<double>(tr.samples.size() - 1);
            double y = height - pad - (height - 2.0 * pad) * (tr.samples[i] - mn) / span;
            os << x << "," << y << " ";
        }
        os << "\"/>\n";
    }
    int y = 16;
    for (const auto& tr : traces) {
        os << "<text x=\"" << pad << "\" y=\"" << y << "\" fill=\"" << tr.color << "\" font-size=\"12\">" << tr.label
           << "</text>\n";
        y += 14;
    }
    os << "</svg>\n";
}

}  // namespace pixelwave
