#pragma once

#include <array>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "pstconv/nn.hpp"
#include "pstconv/pst_conv.hpp"
#include "pstconv/pst_trans_conv.hpp"
#include "pstconv/random.hpp"
#include "pstconv/types.hpp"

namespace pstconv {

enum class LayerKind { PstConv, PstTransConv, BatchNorm, Relu, Pool, FullyConnected, Conv1d };

constexpr int kFromInput = -1;  // skip / coordinate source: the network input

struct LayerConfig {
  LayerKind kind = LayerKind::PstConv;
  std::string name;
  TubeSpec tube;            // pst layers only
  int in_channels = 0;
  int mid_channels = 0;     // pst layers: C_m / C'_m
  int out_channels = 0;
  bool bias = true;
  SpatialForm spatial_form = SpatialForm::Full;
  int coords_from = -2;     // PstTransConv: layer whose output coords are the target
};

/// Declarative description of a PSTNet. Layer order is execution order;
/// skips concatenate a source layer's features (kFromInput = the raw input)
/// onto a transposed layer's output along the channel axis.
struct NetConfig {
  enum class Task { Classification, Segmentation };

  Task task = Task::Classification;
  int num_classes = 0;
  double init_scale = 1.0;
  double radius_multiplier = 2.0;
  std::vector<LayerConfig> layers;
  std::vector<std::array<int, 2>> skips;  // {source, destination}

  int skip_source_for(int layer) const {
    for (const auto& s : skips)
      if (s[1] == layer) return s[0];
    return -2;
  }
  void validate() const;
};

struct ShapeEntry {
  std::string name;
  std::string kind;
  int frames = 0;       // 0 once pooled
  Index points = 0;
  Index channels = 0;
};

/// Closed-form shape propagation through the whole config. Throws on any
/// inconsistency (channel chaining, skip endpoint mismatch, shrunken-away
/// frames or points).
std::vector<ShapeEntry> audit_shapes(const NetConfig& config, int frames, Index points,
                                     Index channels);

struct ClassificationNetOptions {
  std::vector<int> widths{64, 128, 128, 256, 256, 1024};
  std::vector<int> mid_widths;  // empty: same as widths
  int neighbors = 9;
  double radius_multiplier = 2.0;
  double init_scale = 1.0;
  bool bias = true;
};

/// The 6-layer classification network (conv1, 2a, 2b, 3a, 3b, 4 + pooling and
/// an FC head). Spatial subsampling x2 at conv1/2a/3a/4, temporal stride 2 at
/// 2a/3a, temporal kernel 3 at 2a-3b, search radius doubled after every
/// spatially subsampling layer.
NetConfig build_classification_net(int num_classes, double base_radius,
                                   const ClassificationNetOptions& options = {});

struct SegmentationNetOptions {
  std::vector<int> encoder_widths{32, 64, 128, 256};
  std::vector<int> decoder_widths;  // empty: {enc[2], enc[1], enc[0], enc[0]}
  int input_channels = 0;
  int neighbors = 32;
  double radius_multiplier = 2.0;
  double init_scale = 1.0;
  bool bias = true;
};

/// The 4+4 encoder-decoder segmentation network with skip connections
/// (input->trans1, conv1->trans2, conv2->trans3, conv3->trans4) and a 1D
/// convolution head. Clips keep their frame count throughout: the temporal
/// kernel-3 layers (conv3, trans2) are padded [1, 1].
NetConfig build_segmentation_net(int num_classes, double base_radius,
                                 const SegmentationNetOptions& options = {});

using Clip = PointCloudSequence<double>;

/// A PSTNet with parameters: forward/backward over one batch of clips plus
/// named access to every tensor for the optimizer and checkpoints.
class Network {
 public:
  explicit Network(NetConfig config);

  const NetConfig& config() const { return config_; }

  void init_params(std::uint64_t seed);

  struct Tensor {
    std::string name;
    double* data;
    std::vector<Index> shape;
    bool trainable;
    Index size() const;
  };
  /// Parameters and buffers in a stable order (buffers are the BN running
  /// stats, flagged non-trainable).
  std::vector<Tensor> tensors();
  /// Gradient storage for every trainable tensor, same order and shapes.
  std::vector<Tensor> grad_tensors();

  enum class BnMode {
    Eval,           // running statistics
    Train,          // batch statistics, running stats updated
    TrainFrozen,    // batch statistics, running stats untouched (pure function)
  };

  struct Output {
    Eigen::MatrixXd logits;                                   // classification: classes x B
    std::vector<std::vector<Eigen::MatrixXd>> point_logits;   // segmentation: [item][frame]
  };

  struct Cache;

  Output forward(const std::vector<Clip>& batch, BnMode bn_mode,
                 const Sampling& sampling = Sampling::deterministic(), Cache* cache = nullptr);

  void zero_grads();

  /// Accumulates parameter gradients for the given output gradient. The cache
  /// must come from the immediately preceding forward call.
  void backward(const Cache& cache, const Output& grad);

  bool params_finite() const;

  /// Per-layer kind helpers used by serialization and the CLI.
  static const char* kind_name(LayerKind kind);

 private:
  friend struct NetworkAccess;

  struct PstConvState {
    SpatialKernel<double> spatial;
    TemporalKernel<double> temporal;
    Eigen::MatrixXd g_theta_d, g_theta_s;
    std::vector<Eigen::MatrixXd> g_taps;
    Eigen::VectorXd g_bias;
  };
  struct PstTransState {
    TransKernel<double> kernel;
    std::vector<Eigen::MatrixXd> g_taps;
    Eigen::MatrixXd g_sharing;
  };
  struct BnState {
    BatchNorm<double> bn;
    Eigen::VectorXd g_gamma, g_beta;
  };
  struct DenseState {
    Dense<double> dense;
    Eigen::MatrixXd g_weight;
    Eigen::VectorXd g_bias;
  };
  using LayerState =
      std::variant<std::monostate, PstConvState, PstTransState, BnState, DenseState>;

  NetConfig config_;
  std::vector<LayerState> states_;

 public:
  struct Cache {
    std::vector<Clip> input;
    std::vector<std::vector<Clip>> acts;  // acts[layer][item]
    struct PerLayer {
      std::vector<LayerIO<double>> pst;
      std::vector<TransLayerIO<double>> trans;
      BatchNorm<double>::Cache bn;
      std::vector<PoolCache<double>> pool;
      Eigen::MatrixXd dense_in;
    };
    std::vector<PerLayer> layers;
    Eigen::MatrixXd pooled;
    BnMode bn_mode = BnMode::Eval;
  };
};

struct SequenceEval {
  int predicted = -1;
  Eigen::VectorXd mean_probs;
};

/// Sequence-level prediction: split into clips, average the clip softmax
/// probabilities, argmax.
SequenceEval evaluate_sequence(Network& net, const Clip& sequence, int clip_len, int frame_stride,
                               const Sampling& sampling = Sampling::deterministic());

/// Per-point class probabilities over a whole sequence: clips slide with the
/// given hop, per-point softmax probabilities average across overlapping
/// clips. Returns [frame] matrices of classes x N.
std::vector<Eigen::MatrixXd> predict_point_probabilities(Network& net, const Clip& sequence,
                                                         int clip_len, int frame_stride, int hop,
                                                         const Sampling& sampling = Sampling::deterministic());

}  // namespace pstconv
