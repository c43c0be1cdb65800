#include <doctest.h>

#include "hemosbi/cli.hpp"
#include "hemosbi/common.hpp"
#include "hemosbi/network_io.hpp"
#include "hemosbi/npe.hpp"
#include "support.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <unistd.h>

using namespace hemosbi;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = 0;
    std::string out;
    std::string err;
};

Run cli(std::vector<std::string> args)
{
    args.insert(args.begin(), "hemosbi");
    std::vector<const char*> argv;
    for (const auto& a : args)
        argv.push_back(a.c_str());
    std::ostringstream out, err;
    Run r;
    r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

struct Scratch {
    fs::path root;
    Scratch() : root(fs::temp_directory_path() / ("hemosbi_cli_" + std::to_string(::getpid())))
    {
        fs::remove_all(root);
        fs::create_directories(root);
    }
    ~Scratch() { fs::remove_all(root); }
    std::string operator()(const std::string& rel) const { return (root / rel).string(); }
};

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

/// Content hash of every file under dir, keyed by relative path.
std::map<std::string, std::uint64_t> tree_hashes(const fs::path& dir)
{
    std::map<std::string, std::uint64_t> h;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file())
            h[fs::relative(e.path(), dir).string()] = fnv1a(slurp(e.path()));
    return h;
}

std::vector<std::map<std::string, std::string>> read_csv(const fs::path& p)
{
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);
    std::vector<std::string> header;
    std::stringstream hs(line);
    for (std::string c; std::getline(hs, c, ',');)
        header.push_back(c);
    std::vector<std::map<std::string, std::string>> rows;
    while (std::getline(in, line)) {
        std::stringstream ls(line);
        std::map<std::string, std::string> row;
        std::string c;
        for (std::size_t i = 0; i < header.size() && std::getline(ls, c, ','); ++i)
            row[header[i]] = c;
        rows.push_back(row);
    }
    return rows;
}

const std::string tube = testing::source_path("networks/tube_1seg.json");

Run train_toy(const Scratch& s, const std::string& dir, int seed, const std::string& snr = "")
{
    std::vector<std::string> a = {"--seed", std::to_string(seed), "train", "--toy", "linear-gaussian", "--n", "1000",
                                  "--data-seed", "1", "--epochs", "15", "-o", s(dir)};
    if (!snr.empty()) {
        a.push_back("--snr");
        a.push_back(snr);
    }
    return cli(a);
}

} // namespace

TEST_CASE("usage errors")
{
    CHECK(cli({}).code == 1);
    CHECK(cli({"frobnicate"}).code == 1);
    CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("simulate")
{
    Scratch s;
    const auto a = cli({"--seed", "4", "simulate", "--network", tube, "-o", s("a")});
    CHECK(a.code == 0);
    CHECK(fs::exists(s("a") + "/waveforms/mid_pressure.f32"));
    CHECK(fs::exists(s("a") + "/config.json"));

    SUBCASE("no silent overwrite")
    {
        const auto again = cli({"simulate", "--network", tube, "-o", s("a")});
        CHECK(again.code == 1);
        CHECK(again.err.find("--force") != std::string::npos);
        CHECK(cli({"--force", "--seed", "4", "simulate", "--network", tube, "-o", s("a")}).code == 0);
    }
    SUBCASE("repeated seed gives identical artifacts")
    {
        CHECK(cli({"simulate", "--network", tube, "--prior-draw", "--seed", "9", "-o", s("p1")}).code == 0);
        CHECK(cli({"simulate", "--network", tube, "--prior-draw", "--seed", "9", "-o", s("p2")}).code == 0);
        CHECK(tree_hashes(s("p1")) == tree_hashes(s("p2")));
        CHECK(cli({"simulate", "--network", tube, "--prior-draw", "--seed", "10", "-o", s("p3")}).code == 0);
        CHECK(tree_hashes(s("p1")) != tree_hashes(s("p3")));
    }
    SUBCASE("rerun from the persisted config")
    {
        CHECK(cli({"--seed", "4", "simulate", "--config", s("a") + "/config.json", "-o", s("b")}).code == 0);
        CHECK(tree_hashes(s("a")) == tree_hashes(s("b")));
    }
    SUBCASE("cyclic network")
    {
        auto j = read_json_file(testing::source_path("networks/bifurcation_3seg.json"));
        j["segments"][1]["children"] = {"aorta"};
        std::ofstream(s("cyclic.json")) << j.dump();
        const auto r = cli({"simulate", "--network", s("cyclic.json"), "-o", s("c")});
        CHECK(r.code == 1);
        CHECK(r.err.find("not a tree") != std::string::npos);
    }
    SUBCASE("non-convergence is a warning")
    {
        std::ofstream(s("short.json")) << R"({"solver": {"max_cycles": 1, "tolerance": 1e-12}})";
        const auto r = cli({"simulate", "--network", tube, "--config", s("short.json"), "-o", s("w")});
        CHECK(r.code == 2);
        CHECK(fs::exists(s("w") + "/diagnostics.json"));
    }
}

TEST_CASE("dataset")
{
    Scratch s;
    const auto a = cli({"--seed", "3", "dataset", "--network", tube, "--n", "10", "-o", s("a")});
    CHECK(a.code == 0);
    CHECK(a.out.find("7 / 1 / 2") != std::string::npos);
    CHECK(cli({"--seed", "3", "dataset", "--network", tube, "--n", "10", "-o", s("b")}).code == 0);
    CHECK(slurp(s("a") + "/manifest.json") == slurp(s("b") + "/manifest.json"));

    const auto small = cli({"dataset", "--network", tube, "--n", "5", "-o", s("c")});
    CHECK(small.code == 1);
    CHECK(small.err.find("n too small") != std::string::npos);
}

TEST_CASE("train, analyze and report")
{
    Scratch s;
    REQUIRE(train_toy(s, "r1", 1).code == 0);
    for (const char* f : {"config.json", "history.csv", "model.ckpt", "summary.csv"})
        CHECK(fs::exists(s("r1") + "/" + f));
    CHECK(read_csv(s("r1") + "/history.csv").size() == 15);

    SUBCASE("train matches the library")
    {
        TrainConfig cfg;
        cfg.seed = 1;
        cfg.epochs = 15;
        cfg.snr_db = std::nullopt;
        const auto direct = train(linear_gaussian_toy(1000, 1), cfg);
        const auto rows = read_csv(s("r1") + "/history.csv");
        CHECK(std::stod(rows.back().at("validation_loss")) ==
              doctest::Approx(direct.history.validation_loss.back()).epsilon(1e-12));
    }
    SUBCASE("empty metrics list")
    {
        const auto r = cli({"analyze", s("r1"), "-o", s("an")});
        CHECK(r.code == 1);
        CHECK(r.err.find("--help") != std::string::npos);
    }
    SUBCASE("rows keyed by checkpoint")
    {
        REQUIRE(train_toy(s, "r2", 2).code == 0);
        REQUIRE(cli({"analyze", s("r1"), s("r2"), "--metrics", "sci,calibration,laplace", "--laplace-count", "2", "-o",
                     s("an")})
                    .code == 0);
        const auto rows = read_csv(s("an") + "/report.csv");
        CHECK(rows.size() == 2 * 200);
        CHECK(rows.front().at("checkpoint") == "r1");
        CHECK(rows.back().at("checkpoint") == "r2");
        CHECK(read_csv(s("an") + "/fig3_laplace.csv").size() == 4);
        const auto j = read_json_file(s("an") + "/report.json");
        CHECK(j["checkpoints"][0]["report"]["parameters"][0].contains("calibration"));
        CHECK_FALSE(j["checkpoints"][0]["report"]["parameters"][0].contains("mae"));
    }
    SUBCASE("hash mismatch")
    {
        auto cfg = read_json_file(s("r1") + "/config.json");
        cfg["data"]["data_seed"] = 2;
        std::ofstream(s("r1") + "/config.json") << cfg.dump();
        CHECK(cli({"analyze", s("r1"), "--metrics", "sci", "-o", s("an")}).code == 1);
        CHECK(cli({"--force", "analyze", s("r1"), "--metrics", "sci", "-o", s("an")}).code == 0);
    }
    SUBCASE("report aggregation")
    {
        REQUIRE(train_toy(s, "r2", 2).code == 0);
        REQUIRE(train_toy(s, "r3", 3).code == 0);
        REQUIRE(train_toy(s, "same", 1).code == 0);

        REQUIRE(cli({"analyze", s("r1"), "--metrics", "sci", "-o", s("single")}).code == 0);
        REQUIRE(cli({"report", s("single"), "-o", s("rep1")}).code == 0);
        const auto single = read_json_file(s("single") + "/report.json");
        const auto one = read_csv(s("rep1") + "/summary.csv");
        REQUIRE(one.size() == 2);
        CHECK(std::stod(one[0].at("sci_mean")) ==
              doctest::Approx(single["checkpoints"][0]["report"]["parameters"][0]["sci"][0]["sci_mean"].get<double>()));
        CHECK(std::stod(one[0].at("sci_std")) == 0.0);

        REQUIRE(cli({"analyze", s("r1"), s("same"), "--metrics", "sci", "-o", s("dup")}).code == 0);
        REQUIRE(cli({"report", s("dup"), "-o", s("rep2")}).code == 0);
        for (const auto& row : read_csv(s("rep2") + "/summary.csv"))
            CHECK(std::stod(row.at("sci_std")) == 0.0);

        REQUIRE(cli({"analyze", s("r1"), s("r2"), s("r3"), "--metrics", "sci", "-o", s("three")}).code == 0);
        REQUIRE(cli({"report", s("three"), "-o", s("rep3")}).code == 0);
        const auto j = read_json_file(s("three") + "/report.json");
        Vec v;
        for (const auto& c : j["checkpoints"])
            v.push_back(c["report"]["parameters"][0]["sci"][1]["sci_mean"].get<double>());
        const double m = (v[0] + v[1] + v[2]) / 3.0;
        const double sd = std::sqrt(((v[0] - m) * (v[0] - m) + (v[1] - m) * (v[1] - m) + (v[2] - m) * (v[2] - m)) / 2.0);
        const auto rows = read_csv(s("rep3") + "/summary.csv");
        REQUIRE(rows.size() == 2);
        CHECK(rows[1].at("n") == "3");
        CHECK(std::stod(rows[1].at("sci_mean")) == doctest::Approx(m).epsilon(1e-9));
        CHECK(std::stod(rows[1].at("sci_std")) == doctest::Approx(sd).epsilon(1e-8));
        CHECK(sd > 0.0);

        const auto missing = cli({"report", s("three"), s("nowhere"), "-o", s("rep4")});
        CHECK(missing.code == 2);
        CHECK(missing.err.find("nowhere") != std::string::npos);
    }
}

TEST_CASE("toy pipeline: SCI shrinks with SNR")
{
    Scratch s;
    std::vector<std::string> runs;
    for (const char* snr : {"0", "10", "20"}) {
        REQUIRE(train_toy(s, std::string("snr") + snr, 5, snr).code == 0);
        runs.push_back(s(std::string("snr") + snr));
    }
    std::vector<std::string> args = {"analyze"};
    args.insert(args.end(), runs.begin(), runs.end());
    args.insert(args.end(), {"--metrics", "sci", "-o", s("an")});
    REQUIRE(cli(args).code == 0);
    std::map<double, double> sci95;
    for (const auto& row : read_csv(s("an") + "/fig2_sci.csv"))
        if (row.at("level") == "0.95")
            sci95[std::stod(row.at("snr_db"))] = std::stod(row.at("sci_mean"));
    REQUIRE(sci95.size() == 3);
    CHECK(sci95[0.0] > sci95[10.0]);
    CHECK(sci95[10.0] > sci95[20.0]);
}
