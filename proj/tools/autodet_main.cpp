#include "autodet/backends/protocol.hpp"
#include "autodet/evaluate.hpp"
#include "autodet/export.hpp"
#include "autodet/pipeline.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace autodet;

namespace {

// Exit codes beyond CLI11's own usage errors.
enum Exit { kOk = 0, kFailure = 1, kInvalid = 2, kMissingArtifact = 3, kBackend = 4 };

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool dry_run = false;
  bool resume = false;
  bool verbose = false;
};

RunConfig load_config(const Flags& f) {
  if (f.config.empty()) throw ValidationError("--config is required");
  RunConfig c = RunConfig::load(f.config, f.seed);
  if (!f.out.empty()) c.output_dir = fs::absolute(f.out);
  return c;
}

int run_stages(const Flags& f, RunConfig config, std::optional<StageId> only) {
  Pipeline p(std::move(config), {f.resume, f.dry_run});
  if (f.dry_run) {
    for (auto s : kStages) {
      if (only && s != *only) continue;
      std::cout << p.plan()[static_cast<std::size_t>(s)] << '\n';
    }
    return kOk;
  }
  if (only) {
    p.run(*only);
  } else {
    p.run_all();
  }
  std::cout << "artifacts: " << p.config().output_dir.string() << '\n';
  return kOk;
}

int offline_eval(const std::string& dets_path, const std::string& gt_path, const std::string& out) {
  const auto dets = load_detections(dets_path);
  const auto gts = load_ground_truth(gt_path);
  const auto report = ap_summary(dets, gts);
  const auto cm = confusion_matrix(dets, gts);
  std::cout << report.to_text() << '\n' << cm.to_text();
  if (!out.empty()) {
    write_file(fs::path(out) / "ap_report.json", report.to_json().dump(2) + "\n");
    write_file(fs::path(out) / "ap_report.txt", report.to_text());
    write_file(fs::path(out) / "confusion.json", cm.to_json().dump(2) + "\n");
    write_file(fs::path(out) / "confusion.txt", cm.to_text());
  }
  return kOk;
}

int run_export(const Flags& f, const std::string& format_name, const std::string& output) {
  const ExportFormat format = parse_export_format(format_name);
  Pipeline p(load_config(f));
  if (!p.complete(StageId::review)) {
    throw MissingArtifactError(StageId::review, "export needs the output of `review`; run `autodet review` first");
  }
  std::vector<Annotation> labels;
  for (auto& a : read_annotations(p.stage_dir(StageId::review) / "labels.jsonl")) {
    if (a.stage == Stage::approved) labels.push_back(std::move(a));
  }
  std::vector<ImageRecord> images;
  if (p.complete(StageId::mix)) {
    images = read_images(p.stage_dir(StageId::mix) / "manifest.jsonl");
  } else {
    const auto by_image = group_by_image(labels);
    for (auto& im : read_images(p.stage_dir(StageId::annotate) / "images.jsonl")) {
      if (by_image.count(im.id)) images.push_back(std::move(im));
    }
  }
  std::set<std::string> ids;
  for (const auto& im : images) ids.insert(im.id);
  std::erase_if(labels, [&](const Annotation& a) { return !ids.count(a.image_id); });

  const fs::path dest = output.empty() ? p.config().output_dir / "export" / std::string(to_string(format)) : fs::path(output);
  switch (format) {
    case ExportFormat::yolo_txt: export_yolo(images, group_by_image(labels), p.catalog(), dest); break;
    case ExportFormat::coco_json: export_coco(images, group_by_image(labels), p.catalog(), dest / "annotations.json"); break;
    case ExportFormat::jsonl: export_jsonl(labels, dest / "annotations.jsonl"); break;
  }
  std::cout << "exported " << images.size() << " images, " << labels.size() << " annotations to " << dest.string()
            << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"autodet: open-vocabulary auto-labeling and dataset curation"};
  app.require_subcommand(1);
  app.fallthrough();

  Flags flags;
  app.add_option("--config", flags.config, "Run configuration (JSON)");
  app.add_option("--seed", flags.seed, "Overrides the configured seed");
  app.add_option("--out", flags.out, "Overrides the configured output directory");
  app.add_flag("--dry-run", flags.dry_run, "Print the stage plan without running anything");
  app.add_flag("--resume", flags.resume, "Skip stages whose outputs already exist");
  app.add_flag("-v,--verbose", flags.verbose, "Debug logging");

  std::map<CLI::App*, StageId> stage_cmds;
  for (auto s : kStages) {
    std::string name(to_string(s));
    auto* sub = app.add_subcommand(name, "Run the " + name + " stage");
    stage_cmds[sub] = s;
  }
  auto* mix_cmd = app.get_subcommand("mix");
  std::string ratio;
  mix_cmd->add_option("--ratio", ratio, "generated:original ratio, e.g. 3:1");

  auto* eval_cmd = app.get_subcommand("eval");
  std::string dets_path, gt_path, eval_out;
  eval_cmd->add_option("--detections", dets_path, "Score an annotation JSON-lines file instead of the trained model");
  eval_cmd->add_option("--ground-truth", gt_path, "Ground truth (JSON-lines or COCO) for --detections");
  eval_cmd->add_option("--report-dir", eval_out, "Where --detections mode writes its reports");

  auto* pipeline_cmd = app.add_subcommand("pipeline", "Run every stage in order");

  auto* export_cmd = app.add_subcommand("export", "Export approved labels");
  std::string format = "jsonl", output;
  export_cmd->add_option("--format", format, "yolo_txt, coco_json or jsonl");
  export_cmd->add_option("--output", output, "Destination directory");

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(flags.verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    if (export_cmd->parsed()) return run_export(flags, format, output);
    if (eval_cmd->parsed() && !dets_path.empty()) {
      if (gt_path.empty()) throw ValidationError("--detections needs --ground-truth");
      return offline_eval(dets_path, gt_path, eval_out);
    }
    RunConfig config = load_config(flags);
    if (!ratio.empty()) config.mix.ratio = Ratio::parse(ratio);
    if (pipeline_cmd->parsed()) return run_stages(flags, std::move(config), std::nullopt);
    for (const auto& [cmd, stage] : stage_cmds) {
      if (cmd->parsed()) return run_stages(flags, std::move(config), stage);
    }
  } catch (const MissingArtifactError& e) {
    spdlog::error("{}", e.what());
    return kMissingArtifact;
  } catch (const backends::BackendError& e) {
    spdlog::error("backend: {}", e.what());
    return kBackend;
  } catch (const ValidationError& e) {
    spdlog::error("{}", e.what());
    return kInvalid;
  } catch (const ParseError& e) {
    spdlog::error("{}", e.what());
    return kInvalid;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kFailure;
  }
  return kFailure;
}
