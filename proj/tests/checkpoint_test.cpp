#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "ctsft/checkpoint.hpp"
#include "ctsft/errors.hpp"
#include "test_helpers.hpp"

using namespace ctsft;
namespace fs = std::filesystem;

TEST_CASE("checkpoint round-trip is bit exact") {
  const auto dir = fs::temp_directory_path() / "ctsft_checkpoint_test";
  fs::remove_all(dir);
  auto p = Parameters::initialize(testing::small_config(2, 2, 8, true), 99);
  p.values()[3] = -0.0F;
  p.values()[4] = 1e-40F;  // denormal survives
  save_checkpoint(p, dir / "model.manifest");
  CHECK(fs::exists(dir / "model.manifest.bin"));
  const auto q = load_checkpoint(dir / "model.manifest");
  CHECK(q == p);
  CHECK(std::signbit(q.values()[3]));
  CHECK(checkpoint_hash(q) == checkpoint_hash(p));
  CHECK(fs::file_size(dir / "model.manifest.bin") == p.size() * 4);
}

TEST_CASE("checkpoint hash changes with a single bit") {
  auto p = Parameters::initialize(testing::small_config(), 1);
  const auto before = checkpoint_hash(p);
  p.values()[0] = std::nextafter(p.values()[0], 10.0F);
  CHECK(checkpoint_hash(p) != before);
}

TEST_CASE("corrupt manifests are rejected") {
  const auto dir = fs::temp_directory_path() / "ctsft_checkpoint_bad";
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "x.manifest");
    out << "blob x.manifest.bin\nbogus line\n";
  }
  CHECK_THROWS_AS(read_tensor_file(dir / "x.manifest"), IoError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.manifest"), IoError);
}
