#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pstconv/data.hpp"
#include "pstconv/net.hpp"
#include "pstconv/nn.hpp"

namespace pstconv {

struct TrainOptions {
  int epochs = 35;
  int batch_size = 16;
  std::uint64_t seed = 0;
  SgdSchedule schedule;
  int clip_len = 16;
  int frame_stride = 1;
  int clips_per_sequence = 1;  // training clips drawn per sequence per epoch
  std::string out_dir;         // empty: no metrics/checkpoint files
  bool deterministic_tubes = false;
  int eval_clip_hop = 0;       // 0: clip_len
  bool verbose = false;
};

struct EpochLog {
  int epoch;
  std::string split;
  double loss;
  double metric;  // accuracy (classification) or mIoU (segmentation)
  double lr;
};

struct EvalMetrics {
  double loss = 0.0;
  double accuracy = 0.0;
  double mean_iou = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> logs;
  double best_metric = 0.0;
  int best_epoch = -1;
  std::string best_checkpoint;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  EvalMetrics final_val;
};

/// SGD training with the step-decay schedule, per-epoch CSV metrics
/// (out_dir/metrics.csv) and best-validation checkpointing
/// (out_dir/best.ckpt, plus last.ckpt). Aborts with NumericalError when the
/// loss or any parameter stops being finite.
TrainResult train(Network& net, const std::vector<SequenceRecord>& train_data,
                  const std::vector<SequenceRecord>& val_data, const TrainOptions& options);

EvalMetrics evaluate_classification(Network& net, const std::vector<SequenceRecord>& data,
                                    int clip_len, int frame_stride,
                                    const Sampling& sampling = Sampling::deterministic());

EvalMetrics evaluate_segmentation(Network& net, const std::vector<SequenceRecord>& data,
                                  int clip_len, int frame_stride, int hop,
                                  const Sampling& sampling = Sampling::deterministic());

}  // namespace pstconv
