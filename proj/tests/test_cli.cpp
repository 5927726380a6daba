#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

#include "doctest.h"
#include "msic/data.hpp"
#include "msic/image.hpp"
#include "msic/weights.hpp"

using namespace msic;
namespace fs = std::filesystem;

namespace {

struct Workspace {
  fs::path dir;
  Workspace() {
    dir = fs::temp_directory_path() / ("msic_cli_" + std::to_string(::getpid()));
    fs::create_directories(dir);
  }
  ~Workspace() { fs::remove_all(dir); }
  std::string operator/(const std::string& name) const { return (dir / name).string(); }
};

// Exit status of `msic <args>`, with stdout captured into `out`.
int run(const std::string& args, std::string* out = nullptr, const Workspace* ws = nullptr) {
  std::string cmd = std::string(MSIC_CLI_PATH) + " " + args;
  std::string capture;
  if (out && ws) {
    capture = *ws / "stdout.txt";
    cmd += " > " + capture;
  } else {
    cmd += " > /dev/null";
  }
  cmd += " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  if (out && ws) {
    std::ifstream f(capture);
    std::stringstream ss;
    ss << f.rdbuf();
    *out = ss.str();
  }
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("train, encode and decode through the command line") {
  Workspace ws;
  const std::string model = ws / "m.msiw";
  REQUIRE(run("train --synthetic --steps 0 --out-model " + model) == 0);
  CHECK(fs::exists(model));
  CHECK(WeightsFile::load(model).contains("__config__"));

  Rng rng(3);
  const Image img = synthetic_image(37, 21, rng);
  write_ppm(ws / "in.ppm", img);
  std::string out;
  REQUIRE(run("encode --model " + model + " --input " + (ws / "in.ppm") + " --q 2.5 --output " + (ws / "a.bin"), &out,
              &ws) == 0);
  CHECK(out.find("bpp") != std::string::npos);
  CHECK(out.find("scale5_bits") != std::string::npos);
  REQUIRE(run("decode --model " + model + " --input " + (ws / "a.bin") + " --output " + (ws / "out.ppm")) == 0);
  const Image dec = read_ppm(ws / "out.ppm");
  CHECK(dec.width == 37);
  CHECK(dec.height == 21);

  // Same inputs, same outputs.
  REQUIRE(run("encode --model " + model + " --input " + (ws / "in.ppm") + " --q 2.5 --output " + (ws / "b.bin")) == 0);
  CHECK(read_file(ws / "a.bin") == read_file(ws / "b.bin"));

  CHECK(run("encode --model " + model + " --input " + (ws / "in.ppm") + " --q 11.0 --output " + (ws / "c.bin")) == 0);
  CHECK(run("encode --model " + model + " --input " + (ws / "in.ppm") + " --q 12 --output " + (ws / "d.bin")) == 1);
  CHECK_FALSE(fs::exists(ws / "d.bin"));
  CHECK(run("encode --model " + model + " --input " + (ws / "missing.ppm") + " --q 1 --output " + (ws / "e.bin")) == 2);
  CHECK(run("decode --model " + model + " --input " + (ws / "in.ppm") + " --output " + (ws / "f.ppm")) == 2);
  CHECK(run("encode --model " + model + " --bogus") == 1);
  CHECK(run("nosuchcommand") == 1);
}

TEST_CASE("training with a fixed seed is reproducible") {
  Workspace ws;
  std::ofstream(ws / "cfg.json") << R"({"train": {"batch": 2, "patch": 32, "log_every": 1}})";
  std::string log;
  REQUIRE(run("train --config " + (ws / "cfg.json") + " --synthetic --steps 2 --seed 5 --out-model " + (ws / "a.msiw"),
              &log, &ws) == 0);
  CHECK(log.find("step,loss,rate_bits,bpp,mse,lambda") != std::string::npos);
  REQUIRE(run("train --config " + (ws / "cfg.json") + " --synthetic --steps 2 --seed 5 --out-model " + (ws / "b.msiw")) == 0);
  CHECK(read_file(ws / "a.msiw") == read_file(ws / "b.msiw"));
  CHECK(run("train --synthetic --data-dir " + ws.dir.string() + " --out-model " + (ws / "c.msiw")) == 1);
}

TEST_CASE("evaluate and reencode write their CSV files") {
  Workspace ws;
  const std::string model = ws / "m.msiw";
  REQUIRE(run("train --synthetic --steps 0 --out-model " + model) == 0);
  fs::create_directories(ws.dir / "imgs");
  Rng rng(4);
  write_ppm((ws.dir / "imgs" / "a.ppm").string(), synthetic_image(16, 16, rng));
  REQUIRE(run("evaluate --model " + model + " --data-dir " + (ws / "imgs") + " --q 0,11 --csv " + (ws / "e.csv")) == 0);
  const std::string csv = slurp(ws / "e.csv");
  CHECK(csv.rfind("file,q,bpp,psnr,status\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);

  std::ofstream(ws.dir / "imgs" / "broken.ppm") << "P3\n";
  CHECK(run("evaluate --model " + model + " --data-dir " + (ws / "imgs") + " --q 5 --csv " + (ws / "e2.csv")) == 2);
  CHECK(slurp(ws / "e2.csv").find("broken.ppm") != std::string::npos);

  REQUIRE(run("reencode --model " + model + " --input " + (ws / "imgs/a.ppm") + " --q 4 --n 3 --csv " +
              (ws / "r.csv")) == 0);
  const std::string r = slurp(ws / "r.csv");
  CHECK(r.rfind("iteration,bpp,psnr\n1,", 0) == 0);
  CHECK(std::count(r.begin(), r.end(), '\n') == 4);
}

TEST_CASE("selftest and diagnostics") {
  Workspace ws;
  std::string out;
  CHECK(run("selftest --level fast", &out, &ws) == 0);
  CHECK(out.find("FAIL") == std::string::npos);
  CHECK(run("selftest --level fast --corrupt-mask", &out, &ws) == 3);
  CHECK(out.find("FAIL") != std::string::npos);
  CHECK(run("selftest --level nope") == 1);

  REQUIRE(run("rf-map --output " + (ws / "rf.csv")) == 0);
  const std::string rf = slurp(ws / "rf.csv");
  CHECK(std::count(rf.begin(), rf.end(), '\n') == 15);
}
