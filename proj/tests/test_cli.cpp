#include <newton_cnn/cli.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

using namespace newton_cnn;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("newton_cnn_cli_" + std::to_string(::getpid()) + "_" +
            std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

int run(const std::vector<std::string>& args, std::string* out_text = nullptr,
        std::string* err_text = nullptr) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// toy task: 4x4 images, left/right halves lit by class
void write_toy_files(const TempDir& dir) {
  {
    std::ofstream cfg(dir.file("toy.cfg"));
    cfg << "input a=4 b=4 d=1\n"
           "conv h=3 out=2 stride=1 pad=0 pool=0\n"
           "fc out=2\n";
  }
  std::mt19937_64 gen(77);
  std::normal_distribution<double> noise(0.0, 0.3);
  std::ofstream csv(dir.file("toy.csv"));
  for (int i = 0; i < 20; ++i) {
    const int cls = i % 2;
    csv << cls;
    // row-major pixel order; columns 0-1 carry +1 for class 0, -1 for class 1
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) {
        const double base = (c < 2) == (cls == 0) ? 1.0 : -1.0;
        csv << ',' << base + noise(gen);
      }
    csv << '\n';
  }
}

}  // namespace

TEST_CASE("self-check subcommand reports success", "[cli]") {
  std::string out;
  const int code = run({"check"}, &out);
  CHECK(code == 0);
  CHECK(out.find("all checks passed") != std::string::npos);
  CHECK(out.find("FAIL") == std::string::npos);
}

TEST_CASE("usage errors exit with code 2", "[cli]") {
  std::string out, err;
  CHECK(run({"frobnicate"}, &out, &err) == 2);
  CHECK(run({"train"}, &out, &err) == 2);  // missing required options
  CHECK(run({}, &out, &err) == 2);
}

TEST_CASE("training writes a log and a checkpoint", "[cli]") {
  TempDir dir;
  write_toy_files(dir);
  std::string out;
  const int code = run({"train", "--config", dir.file("toy.cfg"), "--train-data",
                        dir.file("toy.csv"), "--iters", "2", "--sample-rate", "0.5",
                        "--seed", "3", "--C", "1", "--out", dir.file("run")},
                       &out);
  REQUIRE(code == 0);
  CHECK(out.find("resource estimate") != std::string::npos);
  CHECK(out.find("iter 2") != std::string::npos);

  const std::string log = slurp(dir.file("run/log.csv"));
  CHECK(log.rfind("iter,f,train_acc,test_acc,lambda,cg_iters,alpha,seconds\n", 0) == 0);
  CHECK(std::count(log.begin(), log.end(), '\n') == 3);  // header + 2 iterations

  ResumeState ckpt = load_checkpoint(dir.file("run/model.ckpt"));
  CHECK(ckpt.iteration == 2);
  CHECK(ckpt.theta.size() == 38);  // 2*9+2 conv + 2*8+2 fc
}

TEST_CASE("reproducible runs emit byte-identical logs", "[cli]") {
  TempDir dir;
  write_toy_files(dir);
  auto args = [&](const std::string& out_dir) {
    return std::vector<std::string>{
        "train",      "--config", dir.file("toy.cfg"), "--train-data", dir.file("toy.csv"),
        "--iters",    "3",        "--sample-rate",     "0.5",          "--seed",
        "9",          "--C",      "1",                 "--out",        dir.file(out_dir),
        "--reproducible"};
  };
  REQUIRE(run(args("a")) == 0);
  REQUIRE(run(args("b")) == 0);
  const std::string la = slurp(dir.file("a/log.csv"));
  CHECK(la == slurp(dir.file("b/log.csv")));
  // the seconds column is pinned to zero
  CHECK(la.find(",0\n") != std::string::npos);
}

TEST_CASE("evaluation reloads the checkpoint and scores the data", "[cli]") {
  TempDir dir;
  write_toy_files(dir);
  REQUIRE(run({"train", "--config", dir.file("toy.cfg"), "--train-data",
               dir.file("toy.csv"), "--iters", "4", "--sample-rate", "0.5", "--seed",
               "3", "--C", "1", "--out", dir.file("run")}) == 0);
  std::string out;
  const int code =
      run({"eval", "--config", dir.file("toy.cfg"), "--model", dir.file("run/model.ckpt"),
           "--test-data", dir.file("toy.csv"), "--train-data", dir.file("toy.csv")},
          &out);
  REQUIRE(code == 0);
  CHECK(out.find("accuracy") != std::string::npos);
  CHECK(out.find("instances 20") != std::string::npos);
}

TEST_CASE("resume continues exactly where the log stopped", "[cli]") {
  TempDir dir;
  write_toy_files(dir);
  auto base = [&](const std::string& out_dir) {
    return std::vector<std::string>{
        "train",   "--config",      dir.file("toy.cfg"),
        "--train-data", dir.file("toy.csv"),
        "--sample-rate", "0.5",     "--seed", "13", "--C", "1",
        "--reproducible", "--out",  dir.file(out_dir)};
  };
  auto straight = base("full");
  straight.insert(straight.end(), {"--iters", "4"});
  REQUIRE(run(straight) == 0);

  auto half = base("half");
  half.insert(half.end(), {"--iters", "2"});
  REQUIRE(run(half) == 0);
  auto rest = base("rest");
  rest.insert(rest.end(), {"--iters", "4", "--resume", dir.file("half/model.ckpt")});
  REQUIRE(run(rest) == 0);

  // resumed log holds iterations 3..4 with values identical to the full run
  const std::string full = slurp(dir.file("full/log.csv"));
  const std::string tail = slurp(dir.file("rest/log.csv"));
  std::istringstream fs(full);
  std::string line, row3, row4;
  std::getline(fs, line);  // header
  std::getline(fs, line);
  std::getline(fs, line);
  std::getline(fs, row3);
  std::getline(fs, row4);
  CHECK(tail.find(row3 + "\n" + row4 + "\n") != std::string::npos);

  ResumeState end_a = load_checkpoint(dir.file("full/model.ckpt"));
  ResumeState end_b = load_checkpoint(dir.file("rest/model.ckpt"));
  CHECK(end_a.theta == end_b.theta);
}

TEST_CASE("geometry mismatches and unreadable files exit with code 2", "[cli]") {
  TempDir dir;
  write_toy_files(dir);
  {
    std::ofstream cfg(dir.file("big.cfg"));
    cfg << "input a=28 b=28 d=1\nconv h=5 out=4 stride=1 pad=0 pool=2\nfc out=2\n";
  }
  std::string err;
  CHECK(run({"train", "--config", dir.file("big.cfg"), "--train-data", dir.file("toy.csv"),
             "--iters", "1", "--out", dir.file("x")},
            nullptr, &err) == 2);
  CHECK(err.find("error") != std::string::npos);

  CHECK(run({"train", "--config", dir.file("missing.cfg"), "--train-data",
             dir.file("toy.csv"), "--iters", "1", "--out", dir.file("x")},
            nullptr, &err) == 2);

  CHECK(run({"eval", "--config", dir.file("toy.cfg"), "--model", dir.file("nope.ckpt"),
             "--test-data", dir.file("toy.csv")},
            nullptr, &err) == 2);
}
