// Drives the installed command-line tools as subprocesses.

#include "autodet/annotate.hpp"
#include "autodet/backends/client.hpp"
#include "autodet/common.hpp"
#include "autodet/evaluate.hpp"

#include "support.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <csignal>
#include <cstdio>
#include <sys/wait.h>
#include <unistd.h>

using namespace autodet;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;  // stdout and stderr interleaved
};

Result run(const std::vector<std::string>& args) {
  std::string cmd = AUTODET_CLI;
  for (const auto& a : args) cmd += " '" + a + "'";
  cmd += " 2>&1";
  Result r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) r.output.append(buf, n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

// The mock server in a child process; the port is read from its banner.
class MockServer {
 public:
  MockServer(const fs::path& catalog, const std::vector<fs::path>& roots, const fs::path& work_dir) {
    int fds[2];
    if (::pipe(fds) != 0) return;
    pid_ = ::fork();
    if (pid_ == 0) {
      ::dup2(fds[1], STDOUT_FILENO);
      ::close(fds[0]);
      std::vector<std::string> args{AUTODET_MOCK_SERVER, "--catalog", catalog.string(), "--port", "0", "--seed", "7",
                                    "--work-dir", work_dir.string()};
      for (const auto& r : roots) {
        args.push_back("--root");
        args.push_back(r.string());
      }
      std::vector<char*> argv;
      for (auto& a : args) argv.push_back(a.data());
      argv.push_back(nullptr);
      ::execv(argv[0], argv.data());
      ::_exit(127);
    }
    ::close(fds[1]);
    std::string line;
    char c;
    while (::read(fds[0], &c, 1) == 1 && c != '\n') line += c;
    ::close(fds[0]);
    const auto colon = line.rfind(':');
    if (line.starts_with("listening on ") && colon != std::string::npos) {
      url_ = line.substr(13);
    }
  }
  ~MockServer() {
    if (pid_ > 0) {
      ::kill(pid_, SIGTERM);
      int status = 0;
      ::waitpid(pid_, &status, 0);
    }
  }
  const std::string& url() const { return url_; }

 private:
  pid_t pid_ = -1;
  std::string url_;
};

json small_config(const fs::path& out) {
  auto doc = json::parse(read_file(testing_support::source_dir() / "data" / "configs" / "synthetic.json"));
  doc["catalog"] = (testing_support::source_dir() / "data" / "configs" / "synthetic_catalog.json").string();
  doc["diversify"]["prompts"] = (testing_support::source_dir() / "data" / "prompts" / "inference_prompts.json").string();
  doc["synthetic_world"]["images_per_class"] = 5;
  doc["output_dir"] = out.string();
  return doc;
}

fs::path write_config(const testing_support::TempDir& dir, const std::string& name, const json& doc) {
  write_file(dir / name, doc.dump(2));
  return dir / name;
}

}  // namespace

TEST(Cli, UsageErrors) {
  EXPECT_NE(run({}).code, 0);
  const auto r = run({"annotate"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("--config"), std::string::npos);
  testing_support::TempDir dir;
  write_file(dir / "bad.json", "{\"thresholds\": ");
  EXPECT_EQ(run({"--config", (dir / "bad.json").string(), "ingest"}).code, 2);
}

TEST(Cli, MissingPredecessorExitsWithThree) {
  testing_support::TempDir dir;
  const auto cfg = write_config(dir, "c.json", small_config(dir / "out"));
  const auto r = run({"--config", cfg.string(), "annotate"});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.output.find("`ingest`"), std::string::npos) << r.output;
}

TEST(Cli, DryRunListsEveryStage) {
  testing_support::TempDir dir;
  const auto cfg = write_config(dir, "c.json", small_config(dir / "out"));
  const auto r = run({"--config", cfg.string(), "--dry-run", "pipeline"});
  ASSERT_EQ(r.code, 0) << r.output;
  for (const char* s : {"ingest", "dedup", "split", "diversify", "annotate", "review", "mix", "train", "eval"}) {
    EXPECT_NE(r.output.find(s), std::string::npos) << s;
  }
  EXPECT_FALSE(fs::exists(dir / "out" / "ingest"));
}

TEST(Cli, PipelineExportAndOfflineEval) {
  testing_support::TempDir dir;
  const auto cfg = write_config(dir, "c.json", small_config(dir / "out"));
  auto r = run({"--config", cfg.string(), "pipeline"});
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(dir / "out" / "eval" / "CURRENT"));

  r = run({"--config", cfg.string(), "--resume", "mix", "--ratio", "0:1"});
  ASSERT_EQ(r.code, 0) << r.output;

  for (const char* fmt : {"yolo_txt", "coco_json", "jsonl"}) {
    r = run({"--config", cfg.string(), "export", "--format", fmt, "--output", (dir / fmt).string()});
    ASSERT_EQ(r.code, 0) << r.output;
  }
  EXPECT_TRUE(fs::exists(dir / "yolo_txt" / "classes.txt"));
  const auto coco = json::parse(read_file(dir / "coco_json" / "annotations.json"));
  EXPECT_FALSE(coco["annotations"].empty());
  const auto labels = dir / "jsonl" / "annotations.jsonl";
  for (const auto& a : read_annotations(labels)) EXPECT_EQ(a.stage, Stage::approved);

  // Scoring the labels against themselves gives a perfect report.
  r = run({"eval", "--detections", labels.string(), "--ground-truth", labels.string(), "--report-dir",
           (dir / "self").string()});
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_DOUBLE_EQ(json::parse(read_file(dir / "self" / "ap_report.json"))["ap50_95"].get<double>(), 1.0);

  EXPECT_EQ(run({"--config", cfg.string(), "export", "--format", "voc"}).code, 2);
}

TEST(Cli, SeedOverrideChangesKeys) {
  testing_support::TempDir dir;
  const auto cfg = write_config(dir, "c.json", small_config(dir / "out"));
  const auto a = run({"--config", cfg.string(), "--dry-run", "split"});
  const auto b = run({"--config", cfg.string(), "--seed", "8", "--dry-run", "split"});
  ASSERT_EQ(a.code, 0);
  ASSERT_EQ(b.code, 0);
  EXPECT_NE(a.output, b.output);
}

TEST(MockServerBinary, ServesTheWireProtocol) {
  testing_support::TempDir dir;
  MockServer server(testing_support::source_dir() / "data" / "configs" / "synthetic_catalog.json", {dir.path()},
                    dir / "work");
  ASSERT_FALSE(server.url().empty());
  auto c = backends::EndpointConfig::defaults(backends::Role::train);
  c.base_url = server.url();
  backends::BackendClient trainer(c, std::make_shared<backends::HttpTransport>(c.base_url, c.timeout));
  try {
    trainer.poll("nothing");
    FAIL();
  } catch (const backends::BackendError& e) {
    EXPECT_EQ(e.status(), 404);
  }
}

TEST(MockServerBinary, PipelineOverHttpMatchesInProcess) {
  testing_support::TempDir dir;
  const auto in_proc = write_config(dir, "local.json", small_config(dir / "local"));
  ASSERT_EQ(run({"--config", in_proc.string(), "pipeline"}).code, 0);

  MockServer server(testing_support::source_dir() / "data" / "configs" / "synthetic_catalog.json",
                    {dir / "remote"}, dir / "remote" / "backend");
  ASSERT_FALSE(server.url().empty());
  auto doc = small_config(dir / "remote");
  for (const char* role : {"detect", "generate", "review", "train"}) doc["endpoints"][role]["base_url"] = server.url();
  const auto remote = write_config(dir, "remote.json", doc);
  const auto r = run({"--config", remote.string(), "pipeline"});
  ASSERT_EQ(r.code, 0) << r.output;

  auto report = [&](const std::string& run_name) {
    const auto eval = dir / run_name / "eval";
    return json::parse(read_file(eval / std::string(trim(read_file(eval / "CURRENT"))) / "ap_report.json"));
  };
  const auto local_report = report("local");
  const auto remote_report = report("remote");
  EXPECT_EQ(local_report["classes"], remote_report["classes"]);
  EXPECT_GT(remote_report["ap50"].get<double>(), 0.3);
}
