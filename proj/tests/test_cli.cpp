#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

namespace {

std::string cli_path() {
#ifdef VMP_CLI_PATH
  return VMP_CLI_PATH;
#else
  const char* p = std::getenv("VMP_CLI_PATH");
  REQUIRE_MESSAGE(p != nullptr, "VMP_CLI_PATH must point at the CLI binary");
  return p;
#endif
}

// Runs the CLI with stdout/stderr captured; returns the exit status.
int run(const std::string& args) {
  const std::string cmd =
      cli_path() + " " + args + " >/tmp/vmp_cli_out.txt 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string last_output() {
  std::ifstream is("/tmp/vmp_cli_out.txt");
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::string file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  os << text;
}

// A tiny corpus + fast training config shared across the test cases.
struct Fixture {
  Fixture() {
    write_file("/tmp/vmp_cli_gen.json",
               "{\"canvas\": 32, \"classes\": 2, \"count\": 12, \"seed\": 5, "
               "\"shapes_per_image\": 1}");
    REQUIRE(run("gen --config /tmp/vmp_cli_gen.json --out "
                "/tmp/vmp_cli_train.vmpd") == 0);
    REQUIRE(run("gen --config /tmp/vmp_cli_gen.json --seed 6 --out "
                "/tmp/vmp_cli_test.vmpd") == 0);
    write_file("/tmp/vmp_cli_train.json",
               "{\"encoder_kernels\": [4, 6], \"decoder_kernels\": [4], "
               "\"epochs\": 2, \"batch_size\": 4, \"learning_rate\": 0.001, "
               "\"seed\": 2}");
    REQUIRE(run("train --data /tmp/vmp_cli_train.vmpd --config "
                "/tmp/vmp_cli_train.json --out /tmp/vmp_cli_model.vmp "
                "--history /tmp/vmp_cli_hist.csv") == 0);
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("gen is deterministic: same seed gives byte-identical files") {
  fixture();
  REQUIRE(run("gen --config /tmp/vmp_cli_gen.json --out "
              "/tmp/vmp_cli_again.vmpd") == 0);
  CHECK(file_bytes("/tmp/vmp_cli_train.vmpd") ==
        file_bytes("/tmp/vmp_cli_again.vmpd"));
  // A --seed override must change the bytes.
  REQUIRE(run("gen --config /tmp/vmp_cli_gen.json --seed 99 --out "
              "/tmp/vmp_cli_again.vmpd") == 0);
  CHECK(file_bytes("/tmp/vmp_cli_train.vmpd") !=
        file_bytes("/tmp/vmp_cli_again.vmpd"));
  std::remove("/tmp/vmp_cli_again.vmpd");
}

TEST_CASE("train writes a checkpoint and a history CSV") {
  fixture();
  CHECK(!file_bytes("/tmp/vmp_cli_model.vmp").empty());
  std::ifstream is("/tmp/vmp_cli_hist.csv");
  std::string line;
  std::getline(is, line);
  CHECK(line == "epoch,elbo,nll,kl,val_dice");
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    if (!line.empty()) ++rows;
  }
  CHECK(rows == 2);
}

TEST_CASE("eval writes one row per sample") {
  fixture();
  REQUIRE(run("eval --model /tmp/vmp_cli_model.vmp --data "
              "/tmp/vmp_cli_test.vmpd --report /tmp/vmp_cli_eval.csv") == 0);
  std::ifstream is("/tmp/vmp_cli_eval.csv");
  std::string line;
  std::getline(is, line);
  CHECK(line == "sample,dice,avg_predictive_variance");
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    if (!line.empty()) ++rows;
  }
  CHECK(rows == 12);
  std::remove("/tmp/vmp_cli_eval.csv");
}

TEST_CASE("attack sweep writes one row per requested level") {
  fixture();
  REQUIRE(run("attack --model /tmp/vmp_cli_model.vmp --data "
              "/tmp/vmp_cli_test.vmpd --kind gaussian --snr-db 30 --snr-db 10 "
              "--report /tmp/vmp_cli_attack.csv") == 0);
  std::ifstream is("/tmp/vmp_cli_attack.csv");
  std::string line;
  std::getline(is, line);
  CHECK(line == "snr_or_eps,dice,avg_predictive_variance");
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    if (!line.empty()) ++rows;
  }
  CHECK(rows == 2);
  std::remove("/tmp/vmp_cli_attack.csv");
}

TEST_CASE("usage errors exit with status 1") {
  fixture();
  // pgd without --source/--target
  CHECK(run("attack --model /tmp/vmp_cli_model.vmp --data "
            "/tmp/vmp_cli_test.vmpd --kind pgd --eps 0.05 --report "
            "/tmp/vmp_cli_bad.csv") == 1);
  CHECK(last_output().find("--source") != std::string::npos);
  // gaussian without --snr-db
  CHECK(run("attack --model /tmp/vmp_cli_model.vmp --data "
            "/tmp/vmp_cli_test.vmpd --kind gaussian --report "
            "/tmp/vmp_cli_bad.csv") == 1);
  // unknown attack kind is a parse error
  CHECK(run("attack --model /tmp/vmp_cli_model.vmp --data "
            "/tmp/vmp_cli_test.vmpd --kind warp --report "
            "/tmp/vmp_cli_bad.csv") == 1);
  // malformed config
  write_file("/tmp/vmp_cli_broken.json", "{not json");
  CHECK(run("gen --config /tmp/vmp_cli_broken.json --out /tmp/x.vmpd") == 1);
  // missing file
  CHECK(run("eval --model /tmp/does_not_exist.vmp --data "
            "/tmp/vmp_cli_test.vmpd --report /tmp/vmp_cli_bad.csv") == 1);
  std::remove("/tmp/vmp_cli_broken.json");
}

TEST_CASE("maps exports a segmentation and an uncertainty PGM") {
  fixture();
  REQUIRE(run("maps --model /tmp/vmp_cli_model.vmp --data "
              "/tmp/vmp_cli_test.vmpd --index 0 --out-prefix "
              "/tmp/vmp_cli_maps") == 0);
  const std::string seg = file_bytes("/tmp/vmp_cli_maps_seg.pgm");
  const std::string unc = file_bytes("/tmp/vmp_cli_maps_unc.pgm");
  CHECK(seg.substr(0, 3) == "P5\n");
  CHECK(unc.substr(0, 3) == "P5\n");
  CHECK(seg.find("32 32\n255\n") != std::string::npos);
  // Binary task: segmentation pixels are exactly 0 or 255.
  const std::size_t off = seg.size() - 32 * 32;
  for (std::size_t i = off; i < seg.size(); ++i) {
    const unsigned char v = static_cast<unsigned char>(seg[i]);
    CHECK((v == 0 || v == 255));
  }
  CHECK(run("maps --model /tmp/vmp_cli_model.vmp --data "
            "/tmp/vmp_cli_test.vmpd --index 999 --out-prefix /tmp/x") == 1);
  std::remove("/tmp/vmp_cli_maps_seg.pgm");
  std::remove("/tmp/vmp_cli_maps_unc.pgm");
}

TEST_CASE("train is deterministic end to end") {
  fixture();
  REQUIRE(run("train --data /tmp/vmp_cli_train.vmpd --config "
              "/tmp/vmp_cli_train.json --out /tmp/vmp_cli_model2.vmp") == 0);
  CHECK(file_bytes("/tmp/vmp_cli_model.vmp") ==
        file_bytes("/tmp/vmp_cli_model2.vmp"));
  std::remove("/tmp/vmp_cli_model2.vmp");
}

TEST_CASE("verify exits 0 with all checks passing") {
  CHECK(run("verify") == 0);
  const std::string out = last_output();
  CHECK(out.find("FAIL") == std::string::npos);
  CHECK(out.find("all checks passed") != std::string::npos);
}
