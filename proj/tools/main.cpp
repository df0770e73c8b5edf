#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "pstconv/data.hpp"
#include "pstconv/gradcheck_suite.hpp"
#include "pstconv/net.hpp"
#include "pstconv/net_io.hpp"
#include "pstconv/train.hpp"

namespace fs = std::filesystem;
using namespace pstconv;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumerical = 2;

std::string resolve_manifest(const std::string& path) {
  if (fs::is_directory(path)) return (fs::path(path) / "manifest.json").string();
  return path;
}

std::string format_index(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "seq_%05d.pcsq", i);
  return buf;
}

int cmd_generate(const std::string& task, const std::string& out_dir, int count,
                 std::uint64_t seed, const std::string& digits, const std::string& label_mode) {
  fs::create_directories(out_dir);
  DigitSource source;
  if (digits != "builtin") source.images = load_digit_images(digits, hash_combine(seed, 0xD161u));

  DatasetManifest manifest;
  manifest.task = task;
  manifest.seed = seed;

  if (task == "cls") {
    const LabelMode mode = label_mode == "velocity" ? LabelMode::VelocityOnly : LabelMode::FullTaxonomy;
    manifest.num_classes = num_classes_for(mode);
    for (int i = 0; i < count; ++i) {
      const SequenceRecord record = generate_classification_record(i, seed, mode, source);
      const std::string name = format_index(i);
      write_sequence((fs::path(out_dir) / name).string(), record);
      manifest.records.emplace_back(name, record.label);
    }
  } else if (task == "seg") {
    manifest.num_classes = 2;
    for (int i = 0; i < count; ++i) {
      const SequenceRecord record =
          generate_two_digit_segmentation(hash_combine(seed, static_cast<std::uint64_t>(i)), source);
      const std::string name = format_index(i);
      write_sequence((fs::path(out_dir) / name).string(), record);
      manifest.records.emplace_back(name, record.label);
    }
  } else {
    throw std::invalid_argument("generate: task must be cls or seg");
  }

  write_manifest((fs::path(out_dir) / "manifest.json").string(), manifest);
  std::cout << "wrote " << count << " " << task << " records (" << manifest.num_classes
            << " classes) to " << out_dir << "\n";
  return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& data, const std::string& val_data,
              int epochs, int batch, std::uint64_t seed, const std::string& out_dir, int clip_len,
              int frame_stride, int clips_per_seq, double lr, double momentum, bool verbose) {
  const NetConfig config = load_net_config(config_path);
  auto train_records = load_dataset(resolve_manifest(data));

  std::vector<SequenceRecord> val_records;
  if (!val_data.empty()) {
    val_records = load_dataset(resolve_manifest(val_data));
  } else {
    // hold out a deterministic fifth of the training data
    Rng rng(hash_combine(seed, 0x5011Du));
    std::vector<std::size_t> order(train_records.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t j = order.size() - 1; j > 0; --j) std::swap(order[j], order[rng.next_below(j + 1)]);
    const std::size_t held = std::max<std::size_t>(1, train_records.size() / 5);
    std::vector<SequenceRecord> keep;
    for (std::size_t i = 0; i < order.size(); ++i) {
      if (i < held)
        val_records.push_back(std::move(train_records[order[i]]));
      else
        keep.push_back(std::move(train_records[order[i]]));
    }
    train_records = std::move(keep);
  }

  fs::create_directories(out_dir);
  {
    nlohmann::json run;
    run["config"] = config_path;
    run["dataset"] = data;
    run["val_dataset"] = val_data;
    run["seed"] = seed;
    run["epochs"] = epochs;
    run["batch_size"] = batch;
    run["output_dir"] = out_dir;
    std::ofstream manifest_out((fs::path(out_dir) / "run.json").string(), std::ios::trunc);
    if (!manifest_out) throw std::runtime_error("train: cannot write run manifest");
    manifest_out << run.dump(2) << "\n";
  }

  Network net(config);
  net.init_params(seed);

  TrainOptions options;
  options.epochs = epochs;
  options.batch_size = batch;
  options.seed = seed;
  options.clip_len = clip_len;
  options.frame_stride = frame_stride;
  options.clips_per_sequence = clips_per_seq;
  options.out_dir = out_dir;
  options.schedule.base_lr = lr;
  options.schedule.momentum = momentum;
  options.verbose = verbose;

  const TrainResult result = train(net, train_records, val_records, options);
  std::cout << "best val metric " << result.best_metric << " at epoch " << result.best_epoch
            << "; final train loss " << result.final_loss << "\n";
  if (!result.best_checkpoint.empty()) std::cout << "checkpoint: " << result.best_checkpoint << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, int clip_len,
             int frame_stride, int hop) {
  Network net = load_checkpoint(checkpoint);
  const auto records = load_dataset(resolve_manifest(data));
  if (net.config().task == NetConfig::Task::Classification) {
    const EvalMetrics m = evaluate_classification(net, records, clip_len, frame_stride);
    std::cout << "sequences " << records.size() << " loss " << m.loss << " accuracy " << m.accuracy
              << "\n";
  } else {
    const EvalMetrics m =
        evaluate_segmentation(net, records, clip_len, frame_stride, hop > 0 ? hop : clip_len);
    std::cout << "sequences " << records.size() << " loss " << m.loss << " point_accuracy "
              << m.accuracy << " mIoU " << m.mean_iou << "\n";
  }
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, double tol) {
  const auto reports = run_gradcheck_suite(seed);
  bool all_ok = true;
  for (const auto& [name, report] : reports) {
    const bool ok = report.passed(tol);
    all_ok = all_ok && ok;
    std::printf("%-28s max_rel_err %.3e  %s", name.c_str(), report.max_rel_error,
                ok ? "PASS" : "FAIL");
    if (!ok) std::printf("  (worst: %s[%td])", report.worst_entry.c_str(), report.worst_index);
    std::printf("\n");
  }
  return all_ok ? kExitOk : kExitUsage;
}

int cmd_inspect(const std::string& config_path, int frames, Index points, Index channels,
                const std::string& data) {
  const NetConfig config = load_net_config(config_path);
  const auto entries = audit_shapes(config, frames, points, channels);

  std::printf("%-12s %-11s %7s %8s %9s\n", "layer", "kind", "frames", "points", "channels");
  std::printf("%-12s %-11s %7d %8" PRId64 " %9" PRId64 "\n", "(input)", "-", frames,
              static_cast<std::int64_t>(points), static_cast<std::int64_t>(channels));
  for (const auto& e : entries)
    std::printf("%-12s %-11s %7d %8" PRId64 " %9" PRId64 "\n", e.name.c_str(), e.kind.c_str(),
                e.frames, static_cast<std::int64_t>(e.points), static_cast<std::int64_t>(e.channels));

  // Tube statistics: anchor counts and the fraction of taps that fall into
  // the temporal padding, from the shape law alone.
  std::printf("\n%-12s %7s %8s %7s %12s\n", "tube", "frames", "anchors", "taps", "valid_taps");
  int cur_frames = frames;
  Index cur_points = points;
  for (std::size_t i = 0; i < config.layers.size(); ++i) {
    const LayerConfig& lc = config.layers[i];
    if (lc.kind == LayerKind::PstConv) {
      const auto anchor_frames = select_anchor_frames(cur_frames, lc.tube);
      int valid = 0;
      for (int af : anchor_frames)
        for (int k = 0; k < lc.tube.temporal_kernel; ++k)
          if (af + lc.tube.offset(k) >= 0 && af + lc.tube.offset(k) < cur_frames) ++valid;
      const int total = static_cast<int>(anchor_frames.size()) * lc.tube.temporal_kernel;
      std::printf("%-12s %7d %8" PRId64 " %7d %11.1f%%\n", lc.name.c_str(),
                  static_cast<int>(anchor_frames.size()),
                  static_cast<std::int64_t>(lc.tube.out_points(cur_points)), total,
                  100.0 * valid / total);
    }
    cur_frames = entries[i].frames > 0 ? entries[i].frames : cur_frames;
    cur_points = entries[i].points > 0 ? entries[i].points : cur_points;
  }

  if (!data.empty()) {
    // Neighborhood statistics measured on the first record of a dataset.
    const auto records = load_dataset(resolve_manifest(data));
    if (records.empty()) throw std::invalid_argument("inspect: dataset is empty");
    Clip clip;
    const int want = std::min(frames, records.front().sequence.num_frames());
    for (int t = 0; t < want; ++t)
      clip.frames.push_back(records.front().sequence.frames[static_cast<std::size_t>(t)]);

    Network net(config);
    net.init_params(0);
    Network::Cache cache;
    net.forward({clip}, Network::BnMode::Eval, Sampling::deterministic(), &cache);

    std::printf("\n%-12s %10s %12s\n", "tube", "clamped", "repeats");
    for (std::size_t i = 0; i < config.layers.size(); ++i) {
      if (config.layers[i].kind != LayerKind::PstConv) continue;
      const auto& io = cache.layers[i].pst.front();
      std::size_t lists = 0, clamped = 0, repeats = 0;
      for (const auto& taps : io.tube.slices)
        for (const auto& lists_of_tap : taps)
          for (const auto& nb : lists_of_tap) {
            ++lists;
            if (nb.clamped) ++clamped;
            auto idx = nb.indices;
            std::sort(idx.begin(), idx.end());
            if (std::adjacent_find(idx.begin(), idx.end()) != idx.end()) ++repeats;
          }
      if (lists == 0) continue;
      std::printf("%-12s %9.1f%% %11.1f%%\n", config.layers[i].name.c_str(),
                  100.0 * static_cast<double>(clamped) / static_cast<double>(lists),
                  100.0 * static_cast<double>(repeats) / static_cast<double>(lists));
    }
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Point spatio-temporal convolution toolkit"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("generate", "Generate a moving-digit point cloud dataset");
  std::string gen_task = "cls", gen_out, gen_digits = "builtin", gen_label_mode = "full";
  int gen_count = 16;
  std::uint64_t gen_seed = 0;
  gen->add_option("--task", gen_task, "cls|seg")->check(CLI::IsMember({"cls", "seg"}));
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--count", gen_count, "number of sequences")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--digits", gen_digits, "IDX image file path, or 'builtin'");
  gen->add_option("--label-mode", gen_label_mode, "full|velocity (cls only)")
      ->check(CLI::IsMember({"full", "velocity"}));

  auto* tr = app.add_subcommand("train", "Train a network on a generated dataset");
  std::string tr_config, tr_data, tr_val, tr_out = "run";
  int tr_epochs = 35, tr_batch = 16, tr_clip = 16, tr_stride = 1, tr_clips_per_seq = 1;
  std::uint64_t tr_seed = 0;
  double tr_lr = 0.01, tr_momentum = 0.9;
  bool tr_verbose = false;
  tr->add_option("--config", tr_config, "network config JSON")->required();
  tr->add_option("--data", tr_data, "dataset directory or manifest")->required();
  tr->add_option("--val-data", tr_val, "validation dataset (default: 20% holdout)");
  tr->add_option("--epochs", tr_epochs)->check(CLI::PositiveNumber);
  tr->add_option("--batch", tr_batch)->check(CLI::PositiveNumber);
  tr->add_option("--seed", tr_seed);
  tr->add_option("--out", tr_out, "run output directory");
  tr->add_option("--clip-len", tr_clip)->check(CLI::PositiveNumber);
  tr->add_option("--frame-stride", tr_stride)->check(CLI::PositiveNumber);
  tr->add_option("--clips-per-seq", tr_clips_per_seq)->check(CLI::PositiveNumber);
  tr->add_option("--lr", tr_lr);
  tr->add_option("--momentum", tr_momentum);
  tr->add_flag("--verbose", tr_verbose);

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  std::string ev_ckpt, ev_data;
  int ev_clip = 16, ev_stride = 1, ev_hop = 0;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--clip-len", ev_clip)->check(CLI::PositiveNumber);
  ev->add_option("--frame-stride", ev_stride)->check(CLI::PositiveNumber);
  ev->add_option("--hop", ev_hop, "segmentation clip hop (default clip-len)");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference checks of every operation");
  std::uint64_t gc_seed = 0;
  double gc_tol = 1e-4;
  gc->add_option("--seed", gc_seed);
  gc->add_option("--tol", gc_tol, "max relative error allowed");

  auto* in = app.add_subcommand("inspect", "Print per-layer shapes and tube statistics");
  std::string in_config, in_data;
  int in_frames = 16;
  std::int64_t in_points = 128, in_channels = 0;
  in->add_option("--config", in_config)->required();
  in->add_option("--L", in_frames, "input frames")->check(CLI::PositiveNumber);
  in->add_option("--N", in_points, "points per frame")->check(CLI::PositiveNumber);
  in->add_option("--C", in_channels, "input feature channels");
  in->add_option("--data", in_data, "dataset for neighborhood statistics");

  try {
    app.parse(argc, argv);
    if (gen->parsed())
      return cmd_generate(gen_task, gen_out, gen_count, gen_seed, gen_digits, gen_label_mode);
    if (tr->parsed())
      return cmd_train(tr_config, tr_data, tr_val, tr_epochs, tr_batch, tr_seed, tr_out, tr_clip,
                       tr_stride, tr_clips_per_seq, tr_lr, tr_momentum, tr_verbose);
    if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_clip, ev_stride, ev_hop);
    if (gc->parsed()) return cmd_gradcheck(gc_seed, gc_tol);
    if (in->parsed()) return cmd_inspect(in_config, in_frames, in_points, in_channels, in_data);
    return kExitUsage;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}
