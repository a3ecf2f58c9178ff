#include <doctest.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

namespace {

namespace fs = std::filesystem;

std::string cli_path() {
    const char* p = std::getenv("PIXELWAVE_CLI");
    REQUIRE_MESSAGE(p != nullptr, "PIXELWAVE_CLI must point at the built binary");
    return p;
}

struct RunResult {
    int exit_code;
    std::string output;  // stdout + stderr
};

RunResult run(const std::string& args) {
    std::string cmd = cli_path() + " " + args + " 2>&1";
    std::array<char, 4096> buf{};
    std::string out;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    while (fgets(buf.data(), buf.size(), pipe)) out += buf.data();
    int status = pclose(pipe);
    return {WEXITSTATUS(status), out};
}

struct Workspace {
    fs::path dir;
    Workspace() : dir(fs::temp_directory_path() / "pixelwave_cli_test") {
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    ~Workspace() { fs::remove_all(dir); }
    std::string p(const std::string& name) const { return (dir / name).string(); }
};

}  // namespace

TEST_CASE("unknown flags exit with the usage code") {
    auto r = run("synth --no-such-flag");
    CHECK(r.exit_code == 2);
}

TEST_CASE("runtime failures emit one machine-parsable error line") {
    auto r = run("eval --ckpt /nonexistent.dckp --data /nowhere --task rh");
    CHECK(r.exit_code == 1);
    CHECK(r.output.find("{\"error\":{") != std::string::npos);
    CHECK(r.output.find("\"kind\":") != std::string::npos);
    // exactly one line
    CHECK(std::count(r.output.begin(), r.output.end(), '\n') == 1);
}

TEST_CASE("subcommand pipeline: synth, pretrain, embed, build-db, retrieve, eval, plot") {
    Workspace ws;
    auto scene = ws.p("scene");
    auto ckpt = ws.p("model.dckp");

    auto r = run("synth --seed 7 --tiles 10 --height 16 --width 16 --frames 2 --rate 120 --out " + scene);
    REQUIRE(r.exit_code == 0);
    CHECK(fs::exists(fs::path(scene) / "scene.json"));
    CHECK(fs::exists(fs::path(scene) / "tiles" / "tile_0000.dtil"));

    // identical seeds give identical scene files
    auto scene2 = ws.p("scene2");
    run("synth --seed 7 --tiles 10 --height 16 --width 16 --frames 2 --rate 120 --out " + scene2);
    std::ifstream f1(fs::path(scene) / "tiles" / "tile_0003.dtil", std::ios::binary);
    std::ifstream f2(fs::path(scene2) / "tiles" / "tile_0003.dtil", std::ios::binary);
    std::string c1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string c2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(c1 == c2);

    r = run("pretrain --data " + scene + " --out " + ckpt +
            " --steps 6 --warmup 1 --batch 2 --seed 3 --embed-dim 8 --log " + ws.p("loss.csv") +
            " --diffusion-steps 3 --diffusion-batch 2");
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);
    CHECK(fs::exists(ckpt));
    {
        std::ifstream csv(ws.p("loss.csv"));
        std::string header;
        std::getline(csv, header);
        CHECK(header == "step,L_Ins,L_Fea,L_var,L_inv,L_cov,L_rec");
    }

    r = run("embed --ckpt " + ckpt + " --data " + scene + " --what ov --split test --out " + ws.p("emb"));
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);
    CHECK(fs::exists(fs::path(ws.p("emb")) / "ov_0004.dten"));

    r = run("build-db --ckpt " + ckpt + " --data " + scene + " --keys ow --label rh --split train --out " +
            ws.p("rh.dedb"));
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);

    r = run("retrieve --ckpt " + ckpt + " --data " + scene + " --db " + ws.p("rh.dedb") +
            " --query ov --k 3 --out " + ws.p("ret.csv"));
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);
    {
        std::ifstream csv(ws.p("ret.csv"));
        std::string header;
        std::getline(csv, header);
        CHECK(header == "query,indices,similarities,prediction");
        std::string row;
        std::getline(csv, row);
        CHECK(!row.empty());
    }

    // eval --task rh prints RMSE and r
    r = run("eval --ckpt " + ckpt + " --data " + scene + " --db " + ws.p("rh.dedb") + " --task rh --k 5");
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);
    CHECK(r.output.find("RMSE ") != std::string::npos);
    CHECK(r.output.find("\nr ") != std::string::npos);

    // waveform retrieval uses KNN = 1 and prints the correlation
    run("build-db --ckpt " + ckpt + " --data " + scene + " --keys ow --label waveform --split train --out " +
        ws.p("wf.dedb"));
    r = run("eval --ckpt " + ckpt + " --data " + scene + " --db " + ws.p("wf.dedb") + " --task waveform");
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);
    CHECK(r.output.find("r ") != std::string::npos);

    // generation defaults are part of the interface: --seed and --steps
    r = run("generate --ckpt " + ckpt + " --data " + scene + " --seed 7 --steps 4 --count 2 --out " + ws.p("gen"));
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);
    CHECK(fs::exists(fs::path(ws.p("gen")) / "generated.csv"));
    CHECK(fs::exists(fs::path(ws.p("gen")) / "generated.dwav"));

    // identical generate invocations are bit-identical
    run("generate --ckpt " + ckpt + " --data " + scene + " --seed 7 --steps 4 --count 2 --out " + ws.p("gen2"));
    std::ifstream g1(fs::path(ws.p("gen")) / "generated.dwav", std::ios::binary);
    std::ifstream g2(fs::path(ws.p("gen2")) / "generated.dwav", std::ios::binary);
    std::string gc1((std::istreambuf_iterator<char>(g1)), std::istreambuf_iterator<char>());
    std::string gc2((std::istreambuf_iterator<char>(g2)), std::istreambuf_iterator<char>());
    CHECK(gc1 == gc2);

    r = run("plot --data " + scene + " --ckpt " + ckpt + " --db " + ws.p("wf.dedb") + " --count 2 --out " +
            ws.p("plots"));
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);
    CHECK(fs::exists(fs::path(ws.p("plots")) / "scene_summary.csv"));
    CHECK(fs::exists(fs::path(ws.p("plots")) / "tile_0000_height.pgm"));
    {
        // PGM header sanity
        std::ifstream pgm(fs::path(ws.p("plots")) / "tile_0000_height.pgm", std::ios::binary);
        std::string magic;
        pgm >> magic;
        CHECK(magic == "P5");
    }
    bool found_svg = false;
    for (auto& e : fs::directory_iterator(ws.p("plots")))
        if (e.path().extension() == ".svg") found_svg = true;
    CHECK(found_svg);

    // finetune then evaluate the head
    r = run("finetune --ckpt " + ckpt + " --data " + scene + " --task height --steps 3 --eval-every 2 --out " +
            ws.p("ft.dckp"));
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);
    r = run("eval --ckpt " + ws.p("ft.dckp") + " --data " + scene + " --task height-head");
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);
    CHECK(r.output.find("RMSE ") != std::string::npos);
}

TEST_CASE("pretrain resume reproduces the uninterrupted run bit-exactly") {
    Workspace ws;
    auto scene = ws.p("scene");
    run("synth --seed 9 --tiles 6 --height 16 --width 16 --frames 2 --rate 120 --out " + scene);

    std::string base = " --data " + scene + " --batch 2 --seed 3 --embed-dim 8 --warmup 1";
    auto r = run("pretrain" + base + " --steps 6 --out " + ws.p("full.dckp"));
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);
    r = run("pretrain" + base + " --steps 3 --out " + ws.p("half.dckp"));
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);
    r = run("pretrain" + base + " --steps 6 --resume " + ws.p("half.dckp") + " --out " + ws.p("resumed.dckp"));
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);

    std::ifstream a(ws.p("full.dckp"), std::ios::binary);
    std::ifstream b(ws.p("resumed.dckp"), std::ios::binary);
    std::string ca((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string cb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(ca == cb);
}
