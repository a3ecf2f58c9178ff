#include "pixelwave/synth.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace pixelwave {

double s1_cosine_correction(double sigma_linear, double theta_deg, double theta_ref_deg) {
    if (theta_deg < 0.0 || theta_deg >= 90.0)
        throw input_error("incidence angle must lie in [0, 90) degrees, got " + std::to_string(theta_deg));
    if (sigma_linear < 0.0) throw input_error("linear backscatter must be non-negative");
    constexpr double deg = 3.14159265358979323846 / 180.0;
    double cr = std::cos(theta_ref_deg * deg);
    double ct = std::cos(theta_deg * deg);
    return sigma_linear * (cr * cr) / (ct * ct);
}

namespace {

// Smooth random field: a fixed sum of low-frequency cosines over global
// pixel coordinates, squashed to [0, 1].
struct SmoothField {
    std::vector<double> amp, fu, fv, phase;

    static SmoothField make(Rng& rng, int waves, double max_freq) {
        SmoothField f;
        for (int j = 0; j < waves; ++j) {
            f.amp.push_back(rng.uniform(0.4, 1.0));
            f.fu.push_back(rng.uniform(-max_freq, max_freq));
            f.fv.push_back(rng.uniform(-max_freq, max_freq));
            f.phase.push_back(rng.uniform(0.0, 6.283185307179586));
        }
        return f;
    }

    double raw(double x, double y) const {
        double s = 0;
        for (size_t j = 0; j < amp.size(); ++j)
            s += amp[j] * std::cos(6.283185307179586 * (fu[j] * x + fv[j] * y) + phase[j]);
        return s / std::sqrt(static_cast<double>(amp.size()));
    }

    double unit(double x, double y) const { return 0.5 * (1.0 + std::tanh(1.2 * raw(x, y))); }
};

struct Terrain {
    SmoothField height_f, cover_f;
    std::vector<SmoothField> class_f;

    static Terrain make(Rng rng, int64_t classes) {
        Terrain t;
        t.height_f = SmoothField::make(rng, 6, 1.0 / 24.0);
        t.cover_f = SmoothField::make(rng, 6, 1.0 / 20.0);
        for (int64_t k = 0; k < classes; ++k) t.class_f.push_back(SmoothField::make(rng, 4, 1.0 / 28.0));
        return t;
    }

    double height(double x, double y) const { return 30.0 * height_f.unit(x, y); }

    double cover(double x, double y) const {
        return 100.0 * std::min(1.0, std::max(0.0, 0.7 * cover_f.unit(x, y) + 0.3 * height_f.unit(x, y)));
    }

    double pai(double x, double y) const {
        return 0.05 * cover(x, y) * (0.5 + height(x, y) / 30.0);
    }

    int32_t cls(double x, double y) const {
        int32_t best = 0;
        double best_v = -1e300;
        for (size_t k = 0; k < class_f.size(); ++k) {
            double v = class_f[k].raw(x, y);
            if (v > best_v) {
                best_v = v;
                best = static_cast<int32_t>(k);
            }
        }
        return best;
    }
};

constexpr double kBinsPerMeter = 4.0;
constexpr double kGroundBin = 200.0;

WaveformRecord make_waveform(double row, double col, double h, double c, double p) {
    WaveformRecord r;
    r.lat = row;
    r.lon = col;
    r.rh = static_cast<float>(h);
    r.cover = static_cast<float>(c);
    r.pai = static_cast<float>(p);
    double sigma_g = 6.0;
    double amp_g = 1.0 - 0.5 * c / 100.0;
    double canopy_bin = kGroundBin - h * kBinsPerMeter;
    double sigma_c = 5.0 + 3.0 * c / 100.0;
    double amp_c = h > 0.25 ? (0.3 + 0.7 * c / 100.0) * std::min(1.0, h / 2.0) : 0.0;
    r.samples.resize(static_cast<size_t>(kWaveformBins));
    double mn = 1e300, mx = -1e300;
    for (int64_t b = 0; b < kWaveformBins; ++b) {
        double dg = (b - kGroundBin) / sigma_g;
        double v = amp_g * std::exp(-0.5 * dg * dg);
        if (amp_c > 0) {
            double dc = (b - canopy_bin) / sigma_c;
            v += amp_c * std::exp(-0.5 * dc * dc);
        }
        r.samples[static_cast<size_t>(b)] = static_cast<float>(v);
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    if (mx > mn)
        for (auto& v : r.samples) v = static_cast<float>((v - mn) / (mx - mn));
    double top = amp_c > 0 ? canopy_bin - 3.0 * sigma_c : kGroundBin - 3.0 * sigma_g;
    r.signal_start = static_cast<int32_t>(std::max(0.0, top));
    r.signal_end = static_cast<int32_t>(std::min<double>(kWaveformBins, kGroundBin + 3.0 * sigma_g));
    return r;
}

}  // namespace

SynthScene synth_scene(const SynthConfig& cfg) {
    cfg.validate();
    SynthScene scene;
    scene.cfg = cfg;
    Rng master(cfg.seed);
    Terrain terr = Terrain::make(master.stream(1), cfg.classes);
    int64_t grid = static_cast<int64_t>(std::ceil(std::sqrt(static_cast<double>(cfg.tiles))));
    double p_wave = cfg.waveform_rate / 4096.0;  // per-pixel rate calibrated to a 64 x 64 tile

    scene.tiles.reserve(static_cast<size_t>(cfg.tiles));
    for (int64_t t = 0; t < cfg.tiles; ++t) {
        Rng rng = master.stream(100 + t);
        TileSample tile;
        tile.index = t;
        double ox = static_cast<double>(t % grid) * static_cast<double>(cfg.width);
        double oy = static_cast<double>(t / grid) * static_cast<double>(cfg.height);
        tile.image = Tensor<float>({cfg.height, cfg.width, cfg.channels});
        tile.stack = Tensor<float>({cfg.frames, cfg.height, cfg.width, cfg.channels});
        tile.height_map = Tensor<float>({cfg.height, cfg.width});
        tile.cover_map = Tensor<float>({cfg.height, cfg.width});
        tile.pai_map = Tensor<float>({cfg.height, cfg.width});
        tile.class_map = Tensor<float>({cfg.height, cfg.width});

        for (int64_t i = 0; i < cfg.height; ++i)
            for (int64_t j = 0; j < cfg.width; ++j) {
                double x = ox + static_cast<double>(j), y = oy + static_cast<double>(i);
                double h = terr.height(x, y), c = terr.cover(x, y), p = terr.pai(x, y);
                int32_t k = terr.cls(x, y);
                tile.height_map.at(i, j) = static_cast<float>(h);
                tile.cover_map.at(i, j) = static_cast<float>(c);
                tile.pai_map.at(i, j) = static_cast<float>(p);
                tile.class_map.at(i, j) = static_cast<float>(k);

                double hn = h / 30.0, cn = c / 100.0;
                double ang = 6.283185307179586 * static_cast<double>(k) / static_cast<double>(cfg.classes);
                std::vector<double> mix = {
                    0.2 + 0.6 * cn,
                    0.9 - 0.5 * std::pow(hn, 0.7),
                    0.3 + 0.4 * std::sin(3.141592653589793 * hn) * cn,
                    0.5 + 0.35 * std::cos(ang),
                    0.5 + 0.35 * std::sin(ang),
                    0.25 + 0.25 * hn + 0.25 * (1.0 - cn),
                };
                for (int64_t ch = 0; ch < cfg.channels; ++ch) {
                    double base = mix[static_cast<size_t>(ch % 6)];
                    if (ch >= 6) base = 0.5 * (mix[static_cast<size_t>(ch % 6)] + mix[static_cast<size_t>((ch + 1) % 6)]);
                    tile.image[(i * cfg.width + j) * cfg.channels + ch] =
                        static_cast<float>(base + rng.normal(0.0, 0.02));
                }
                // class-phased seasonal modulation keeps the temporal
                // stack informative about the class field
                for (int64_t f = 0; f < cfg.frames; ++f) {
                    double season = std::sin(6.283185307179586 *
                                             (static_cast<double>(f) / static_cast<double>(cfg.frames) +
                                              static_cast<double>(k) / static_cast<double>(cfg.classes)));
                    for (int64_t ch = 0; ch < cfg.channels; ++ch) {
                        double base = tile.image[(i * cfg.width + j) * cfg.channels + ch];
                        tile.stack[((f * cfg.height + i) * cfg.width + j) * cfg.channels + ch] =
                            static_cast<float>(base * (1.0 + 0.25 * season) + rng.normal(0.0, 0.02));
                    }
                }
            }

        for (int64_t i = 0; i < cfg.height; ++i)
            for (int64_t j = 0; j < cfg.width; ++j)
                if (rng.bernoulli(p_wave))
                    tile.waveforms.push_back(make_waveform(static_cast<double>(i), static_cast<double>(j),
                                                           tile.height_map.at(i, j), tile.cover_map.at(i, j),
                                                           tile.pai_map.at(i, j)));
        scene.tiles.push_back(std::move(tile));
    }
    return scene;
}

void save_scene(const std::string& dir, const SynthScene& scene) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "tiles");
    nlohmann::json manifest;
    manifest["seed"] = scene.cfg.seed;
    manifest["tiles"] = scene.cfg.tiles;
    manifest["height"] = scene.cfg.height;
    manifest["width"] = scene.cfg.width;
    manifest["channels"] = scene.cfg.channels;
    manifest["frames"] = scene.cfg.frames;
    manifest["classes"] = scene.cfg.classes;
    manifest["waveform_rate"] = scene.cfg.waveform_rate;
    std::ofstream mf(fs::path(dir) / "scene.json");
    if (!mf) throw state_error("cannot write scene manifest in " + dir);
    mf << manifest.dump(2) << "\n";
    char name[32];
    for (const auto& tile : scene.tiles) {
        std::snprintf(name, sizeof(name), "tile_%04lld.dtil", static_cast<long long>(tile.index));
        save_tile((fs::path(dir) / "tiles" / name).string(), tile);
    }
}

SynthScene load_scene(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream mf(fs::path(dir) / "scene.json");
    if (!mf) throw state_error("no scene manifest in " + dir);
    nlohmann::json manifest = nlohmann::json::parse(mf);
    SynthScene scene;
    scene.cfg.seed = manifest.at("seed").get<uint64_t>();
    scene.cfg.tiles = manifest.at("tiles").get<int64_t>();
    scene.cfg.height = manifest.at("height").get<int64_t>();
    scene.cfg.width = manifest.at("width").get<int64_t>();
    scene.cfg.channels = manifest.at("channels").get<int64_t>();
    scene.cfg.frames = manifest.at("frames").get<int64_t>();
    scene.cfg.classes = manifest.at("classes").get<int64_t>();
    scene.cfg.waveform_rate = manifest.at("waveform_rate").get<double>();
    char name[32];
    for (int64_t t = 0; t < scene.cfg.tiles; ++t) {
        std::snprintf(name, sizeof(name), "tile_%04lld.dtil", static_cast<long long>(t));
        scene.tiles.push_back(load_tile((fs::path(dir) / "tiles" / name).string()));
    }
    return scene;
}

}  // namespace pixelwave
