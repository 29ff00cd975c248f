#include <unistd.h>

#include <gtest/gtest.h>

#include "support/scenarios.hpp"

namespace tido {
namespace {

namespace fs = std::filesystem;

fs::path work_dir(const std::string& name) {
  return fs::temp_directory_path() / ("tido_it_" + name + "_" + std::to_string(::getpid()));
}

nlohmann::json small_patch() {
  return {{"data", {{"samples_per_class", 40}}},
          {"foresight", {{"epochs", 20}, {"latent_dim", 4}}},
          {"increment", {{"epochs", 10}, {"ae_epochs", 10}, {"proxy_per_class", 16}}},
          {"probe", {{"epochs", 30}}},
          {"risk_proxy_per_class", 20}};
}

TEST(Pipeline, StageTwoRunsWithSourceFilesDeleted) {
  const auto dir = work_dir("tripwire");
  const auto o = testing::source_free_tripwire(dir, small_patch(), 3);
  EXPECT_TRUE(o.stage2_ok) << o.detail;
  EXPECT_EQ(o.blocked_reads, 0u);
  EXPECT_TRUE(o.direct_read_failed);
  EXPECT_FALSE(fs::exists(dir / "stream" / "step_0" / "source.csv"));
  fs::remove_all(dir);
}

TEST(Pipeline, RepeatedRunIsByteIdentical) {
  const auto dir = work_dir("repeat");
  const auto o = testing::repeat_run_identical(dir, small_patch(), 4);
  EXPECT_TRUE(o.ok) << o.first_difference;
  // config, foresight (3), per step (4 x 3), report, metrics
  EXPECT_EQ(o.files, 18u);
  fs::remove_all(dir);
}

TEST(Pipeline, CsvStreamMatchesSyntheticStream) {
  const auto dir = work_dir("csv");
  fs::remove_all(dir);
  auto base = small_patch();
  base["out"] = (dir / "runs").string();
  base["mode"] = "stream";
  const auto synth_cfg = [&] {
    cli::Flags f;
    f.seed = 6;
    io::write_text_file(dir / "s.json", base.dump());
    f.config_path = (dir / "s.json").string();
    return f;
  }();
  const cli::EnvLookup no_env = [](const std::string&) -> const char* { return nullptr; };
  std::ostringstream err;
  const auto a = cli::run(synth_cfg, no_env, err);
  ASSERT_EQ(a.exit_code, cli::kOk) << err.str();

  const auto rc = cli::parse_run_config(cli::resolve_config(synth_cfg, no_env));
  write_stream(cli::synthetic_stream(rc), dir / "stream");
  auto csv = base;
  csv["data"]["source"] = "csv";
  csv["data"]["stream_dir"] = (dir / "stream").string();
  io::write_text_file(dir / "c.json", csv.dump());
  cli::Flags cf = synth_cfg;
  cf.config_path = (dir / "c.json").string();
  const auto b = cli::run(cf, no_env, err);
  ASSERT_EQ(b.exit_code, cli::kOk) << err.str();

  const auto ra = nlohmann::json::parse(io::read_text_file(a.run_dir / "report.json"));
  const auto rb = nlohmann::json::parse(io::read_text_file(b.run_dir / "report.json"));
  EXPECT_EQ(ra["steps"], rb["steps"]);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace tido
