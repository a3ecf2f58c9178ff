#include "pixelwave/data.hpp"

#include <fstream>

namespace pixelwave {

void save_waveforms(std::ostream& os, const std::vector<WaveformRecord>& records) {
    io::write_magic(os, "DWAV");
    io::write_pod<uint64_t>(os, records.size());
    for (const auto& r : records) {
        if (static_cast<int64_t>(r.samples.size()) != kWaveformBins)
            throw dimension_error("waveform record must hold " + std::to_string(kWaveformBins) + " amplitudes");
        io::write_pod<double>(os, r.lat);
        io::write_pod<double>(os, r.lon);
        io::write_pod<int32_t>(os, r.signal_start);
        io::write_pod<int32_t>(os, r.signal_end);
        io::write_pod<float>(os, r.rh);
        io::write_pod<float>(os, r.cover);
        io::write_pod<float>(os, r.pai);
        io::write_bytes(os, r.samples.data(), r.samples.size() * sizeof(float));
    }
}

std::vector<WaveformRecord> load_waveforms(std::istream& is) {
    io::expect_magic(is, "DWAV", "waveform block");
    uint64_t n = io::read_pod<uint64_t>(is);
    std::vector<WaveformRecord> out(n);
    for (auto& r : out) {
        r.lat = io::read_pod<double>(is);
        r.lon = io::read_pod<double>(is);
        r.signal_start = io::read_pod<int32_t>(is);
        r.signal_end = io::read_pod<int32_t>(is);
        r.rh = io::read_pod<float>(is);
        r.cover = io::read_pod<float>(is);
        r.pai = io::read_pod<float>(is);
        r.samples.resize(static_cast<size_t>(kWaveformBins));
        io::read_bytes(is, r.samples.data(), r.samples.size() * sizeof(float));
    }
    return out;
}

void save_waveforms_file(const std::string& path, const std::vector<WaveformRecord>& records) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw state_error("cannot open for writing: " + path);
    save_waveforms(os, records);
}

std::vector<WaveformRecord> load_waveforms_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw state_error("cannot open for reading: " + path);
    return load_waveforms(is);
}

void save_tile(const std::string& path, const TileSample& tile) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw state_error("cannot open for writing: " + path);
    io::write_magic(os, "DTIL");
    io::write_pod<uint32_t>(os, 1);  // version
    io::write_pod<int64_t>(os, tile.index);
    save_tensor(os, tile.image);
    save_tensor(os, tile.stack);
    save_waveforms(os, tile.waveforms);
    save_tensor(os, tile.height_map);
    save_tensor(os, tile.cover_map);
    save_tensor(os, tile.pai_map);
    save_tensor(os, tile.class_map);
}

TileSample load_tile(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw state_error("cannot open for reading: " + path);
    io::expect_magic(is, "DTIL", "tile");
    uint32_t version = io::read_pod<uint32_t>(is);
    if (version != 1) throw state_error("unsupported tile version " + std::to_string(version));
    TileSample t;
    t.index = io::read_pod<int64_t>(is);
    t.image = load_tensor<float>(is);
    t.stack = load_tensor<float>(is);
    t.waveforms = load_waveforms(is);
    t.height_map = load_tensor<float>(is);
    t.cover_map = load_tensor<float>(is);
    t.pai_map = load_tensor<float>(is);
    t.class_map = load_tensor<float>(is);
    return t;
}

std::vector<float> preprocess_waveform(const std::vector<float>& raw, int64_t signal_start, int64_t signal_end) {
    int64_t n = static_cast<int64_t>(raw.size());
    if (signal_start < 0 || signal_end > n || signal_start >= signal_end)
        throw input_error("invalid signal window [" + std::to_string(signal_start) + ", " +
                          std::to_string(signal_end) + ") for " + std::to_string(n) + " bins");
    int64_t span = signal_end - signal_start;
    std::vector<float> out(static_cast<size_t>(kWaveformBins));
    for (int64_t i = 0; i < kWaveformBins; ++i) {
        double pos = static_cast<double>(i) * static_cast<double>(span - 1) /
                     static_cast<double>(kWaveformBins - 1);
        int64_t lo = static_cast<int64_t>(pos);
        int64_t hi = std::min(lo + 1, span - 1);
        double f = pos - static_cast<double>(lo);
        out[static_cast<size_t>(i)] = static_cast<float>((1.0 - f) * raw[static_cast<size_t>(signal_start + lo)] +
                                                         f * raw[static_cast<size_t>(signal_start + hi)]);
    }
    float mn = out[0], mx = out[0];
    for (float v : out) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    if (mx > mn)
        for (auto& v : out) v = (v - mn) / (mx - mn);
    return out;
}

}  // namespace pixelwave
