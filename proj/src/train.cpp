#include "pstconv/train.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "pstconv/metrics.hpp"
#include "pstconv/net_io.hpp"

namespace pstconv {

namespace {

Clip extract_clip(const PointCloudSequence<double>& seq, const std::vector<int>& frame_idx) {
  Clip clip;
  clip.frames.reserve(frame_idx.size());
  for (int t : frame_idx) clip.frames.push_back(seq.frames[static_cast<std::size_t>(t)]);
  return clip;
}

double clamped_log(double p) { return std::log(std::max(p, 1e-12)); }

void write_csv_row(std::ofstream& csv, const EpochLog& log) {
  if (!csv.is_open()) return;
  csv << log.epoch << "," << log.split << "," << log.loss << "," << log.metric << "," << log.lr
      << "\n";
  csv.flush();
}

}  // namespace

EvalMetrics evaluate_classification(Network& net, const std::vector<SequenceRecord>& data,
                                    int clip_len, int frame_stride, const Sampling& sampling) {
  ConfusionMatrix cm(net.config().num_classes);
  double loss = 0.0;
  for (const auto& record : data) {
    const SequenceEval eval = evaluate_sequence(net, record.sequence, clip_len, frame_stride, sampling);
    cm.add(record.label, eval.predicted);
    loss -= clamped_log(eval.mean_probs(record.label));
  }
  EvalMetrics m;
  m.loss = data.empty() ? 0.0 : loss / static_cast<double>(data.size());
  m.accuracy = cm.accuracy();
  m.mean_iou = cm.mean_iou();
  return m;
}

EvalMetrics evaluate_segmentation(Network& net, const std::vector<SequenceRecord>& data,
                                  int clip_len, int frame_stride, int hop,
                                  const Sampling& sampling) {
  ConfusionMatrix cm(net.config().num_classes);
  double loss = 0.0;
  std::size_t total = 0;
  for (const auto& record : data) {
    if (!record.has_point_labels())
      throw std::invalid_argument("evaluate_segmentation: record without point labels");
    const auto probs =
        predict_point_probabilities(net, record.sequence, clip_len, frame_stride, hop, sampling);
    for (std::size_t t = 0; t < probs.size(); ++t) {
      const auto& labels = record.point_labels[t];
      for (Index q = 0; q < probs[t].cols(); ++q) {
        const int truth = labels[static_cast<std::size_t>(q)];
        Index pred;
        probs[t].col(q).maxCoeff(&pred);
        cm.add(truth, static_cast<int>(pred));
        loss -= clamped_log(probs[t](truth, q));
        ++total;
      }
    }
  }
  EvalMetrics m;
  m.loss = total == 0 ? 0.0 : loss / static_cast<double>(total);
  m.accuracy = cm.accuracy();
  m.mean_iou = cm.mean_iou();
  return m;
}

TrainResult train(Network& net, const std::vector<SequenceRecord>& train_data,
                  const std::vector<SequenceRecord>& val_data, const TrainOptions& options) {
  if (train_data.empty()) throw std::invalid_argument("train: empty training set");
  if (options.batch_size < 1) throw std::invalid_argument("train: batch size must be >= 1");
  const bool segmentation = net.config().task == NetConfig::Task::Segmentation;
  const int hop = options.eval_clip_hop > 0 ? options.eval_clip_hop : options.clip_len;

  auto all_tensors = net.tensors();
  std::vector<Network::Tensor> params;
  for (auto& t : all_tensors)
    if (t.trainable) params.push_back(t);
  auto grads = net.grad_tensors();
  if (grads.size() != params.size()) throw std::logic_error("train: tensor bookkeeping mismatch");
  std::vector<std::vector<double>> velocity(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    velocity[i].assign(static_cast<std::size_t>(params[i].size()), 0.0);

  std::ofstream csv;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    csv.open(options.out_dir + "/metrics.csv", std::ios::trunc);
    if (!csv) throw std::runtime_error("train: cannot open metrics.csv");
    csv << "epoch,split,loss,metric,lr\n";
  }

  TrainResult result;
  const int classes = net.config().num_classes;
  const int clips_per_seq = std::max(1, options.clips_per_sequence);

  struct Item {
    int seq;
    int offset;
  };

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    const double lr = options.schedule.lr(epoch);
    Rng erng(hash_combine(options.seed, 0xE70c00u + static_cast<std::uint64_t>(epoch)));

    std::vector<Item> items;
    for (std::size_t s = 0; s < train_data.size(); ++s) {
      const int frames = train_data[s].sequence.num_frames();
      const int count = frames - (options.clip_len - 1) * options.frame_stride;
      if (count < 1) throw std::invalid_argument("train: sequence shorter than one clip");
      for (int c = 0; c < clips_per_seq; ++c)
        items.push_back({static_cast<int>(s),
                         count == 1 ? 0 : static_cast<int>(erng.next_below(static_cast<std::uint64_t>(count)))});
    }
    for (std::size_t j = items.size() - 1; j > 0; --j)
      std::swap(items[j], items[erng.next_below(j + 1)]);

    double loss_sum = 0.0;
    std::size_t loss_weight = 0;
    ConfusionMatrix cm(classes);

    for (std::size_t start = 0; start < items.size(); start += static_cast<std::size_t>(options.batch_size)) {
      const std::size_t end = std::min(items.size(), start + static_cast<std::size_t>(options.batch_size));
      const int b_count = static_cast<int>(end - start);

      std::vector<Clip> clips(static_cast<std::size_t>(b_count));
      std::vector<int> labels(static_cast<std::size_t>(b_count), -1);
      std::vector<std::vector<const std::vector<std::int32_t>*>> point_labels(
          static_cast<std::size_t>(b_count));
      for (int b = 0; b < b_count; ++b) {
        const Item& item = items[start + static_cast<std::size_t>(b)];
        const auto& record = train_data[static_cast<std::size_t>(item.seq)];
        const auto frame_idx = clip_frame_indices(record.sequence.num_frames(), options.clip_len,
                                                  options.frame_stride, item.offset);
        clips[static_cast<std::size_t>(b)] = extract_clip(record.sequence, frame_idx);
        labels[static_cast<std::size_t>(b)] = record.label;
        if (segmentation) {
          for (int t : frame_idx)
            point_labels[static_cast<std::size_t>(b)].push_back(
                &record.point_labels[static_cast<std::size_t>(t)]);
        }
      }

      const Sampling sampling =
          options.deterministic_tubes
              ? Sampling::deterministic()
              : Sampling::seeded(hash_combine(options.seed,
                                              static_cast<std::uint64_t>(epoch) * 1000003u + start));
      Network::Cache cache;
      const auto out = net.forward(clips, Network::BnMode::Train, sampling, &cache);

      Network::Output grad;
      double batch_loss = 0.0;
      std::size_t batch_weight = 0;
      if (!segmentation) {
        grad.logits.resize(classes, b_count);
        for (int b = 0; b < b_count; ++b) {
          auto [l, g] = softmax_cross_entropy<double>(out.logits.col(b), labels[static_cast<std::size_t>(b)]);
          batch_loss += l;
          grad.logits.col(b) = g / static_cast<double>(b_count);
          Index pred;
          out.logits.col(b).maxCoeff(&pred);
          cm.add(labels[static_cast<std::size_t>(b)], static_cast<int>(pred));
        }
        batch_weight = static_cast<std::size_t>(b_count);
        batch_loss /= static_cast<double>(b_count);
      } else {
        std::size_t total_points = 0;
        for (const auto& pl : out.point_logits)
          for (const auto& frame : pl) total_points += static_cast<std::size_t>(frame.cols());
        grad.point_logits.resize(static_cast<std::size_t>(b_count));
        for (int b = 0; b < b_count; ++b) {
          const auto& pl = out.point_logits[static_cast<std::size_t>(b)];
          auto& gb = grad.point_logits[static_cast<std::size_t>(b)];
          gb.resize(pl.size());
          for (std::size_t t = 0; t < pl.size(); ++t) {
            gb[t].resize(pl[t].rows(), pl[t].cols());
            const auto& truth = *point_labels[static_cast<std::size_t>(b)][t];
            for (Index q = 0; q < pl[t].cols(); ++q) {
              auto [l, g] = softmax_cross_entropy<double>(pl[t].col(q),
                                                          truth[static_cast<std::size_t>(q)]);
              batch_loss += l;
              gb[t].col(q) = g / static_cast<double>(total_points);
              Index pred;
              pl[t].col(q).maxCoeff(&pred);
              cm.add(truth[static_cast<std::size_t>(q)], static_cast<int>(pred));
            }
          }
        }
        batch_weight = total_points;
        batch_loss /= static_cast<double>(total_points);
      }

      if (!std::isfinite(batch_loss))
        throw NumericalError("train: non-finite loss at epoch " + std::to_string(epoch));
      if (start == 0 && epoch == 0) result.initial_loss = batch_loss;

      net.zero_grads();
      net.backward(cache, grad);
      for (std::size_t i = 0; i < params.size(); ++i)
        sgd_step(params[i].data, grads[i].data, velocity[i].data(),
                 static_cast<std::size_t>(params[i].size()), lr, options.schedule.momentum);
      if (!net.params_finite())
        throw NumericalError("train: non-finite parameters after step at epoch " +
                             std::to_string(epoch));

      loss_sum += batch_loss * static_cast<double>(batch_weight);
      loss_weight += batch_weight;
    }

    const double train_loss = loss_sum / static_cast<double>(loss_weight);
    const double train_metric = segmentation ? cm.mean_iou() : cm.accuracy();
    result.logs.push_back({epoch, "train", train_loss, train_metric, lr});
    write_csv_row(csv, result.logs.back());
    result.final_loss = train_loss;
    if (options.verbose)
      std::cout << "epoch " << epoch << " train loss " << train_loss << " metric " << train_metric
                << " lr " << lr << "\n";

    if (!val_data.empty()) {
      const EvalMetrics m =
          segmentation
              ? evaluate_segmentation(net, val_data, options.clip_len, options.frame_stride, hop)
              : evaluate_classification(net, val_data, options.clip_len, options.frame_stride);
      const double metric = segmentation ? m.mean_iou : m.accuracy;
      result.logs.push_back({epoch, "val", m.loss, metric, lr});
      write_csv_row(csv, result.logs.back());
      result.final_val = m;
      if (options.verbose)
        std::cout << "epoch " << epoch << " val loss " << m.loss << " metric " << metric << "\n";
      if (result.best_epoch < 0 || metric > result.best_metric) {
        result.best_metric = metric;
        result.best_epoch = epoch;
        if (!options.out_dir.empty()) {
          result.best_checkpoint = options.out_dir + "/best.ckpt";
          save_checkpoint(result.best_checkpoint, net);
        }
      }
    }
    if (!options.out_dir.empty()) save_checkpoint(options.out_dir + "/last.ckpt", net);
  }
  return result;
}

}  // namespace pstconv
