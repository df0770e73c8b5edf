#include "pstconv/net.hpp"

#include <algorithm>
#include <cmath>

#include "pstconv/data.hpp"
#include "pstconv/parallel.hpp"

namespace pstconv {

namespace {

LayerConfig make_bn(const std::string& name, int channels) {
  LayerConfig lc;
  lc.kind = LayerKind::BatchNorm;
  lc.name = name;
  lc.in_channels = channels;
  lc.out_channels = channels;
  return lc;
}

LayerConfig make_relu(const std::string& name, int channels) {
  LayerConfig lc;
  lc.kind = LayerKind::Relu;
  lc.name = name;
  lc.in_channels = channels;
  lc.out_channels = channels;
  return lc;
}

bool is_pst(LayerKind kind) {
  return kind == LayerKind::PstConv || kind == LayerKind::PstTransConv;
}

}  // namespace

const char* Network::kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::PstConv: return "pstconv";
    case LayerKind::PstTransConv: return "psttrans";
    case LayerKind::BatchNorm: return "batch_norm";
    case LayerKind::Relu: return "relu";
    case LayerKind::Pool: return "pool";
    case LayerKind::FullyConnected: return "fc";
    case LayerKind::Conv1d: return "conv1d";
  }
  return "?";
}

void NetConfig::validate() const {
  if (num_classes < 1) throw std::invalid_argument("NetConfig: num_classes must be >= 1");
  if (layers.empty()) throw std::invalid_argument("NetConfig: no layers");
  if (init_scale <= 0.0) throw std::invalid_argument("NetConfig: init_scale must be positive");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerConfig& lc = layers[i];
    if (lc.name.empty()) throw std::invalid_argument("NetConfig: layer without a name");
    for (std::size_t j = 0; j < i; ++j) {
      if (layers[j].name == lc.name)
        throw std::invalid_argument("NetConfig: duplicate layer name " + lc.name);
    }
    if (is_pst(lc.kind)) {
      lc.tube.validate();
      if (lc.out_channels < 1 || lc.mid_channels < 1)
        throw std::invalid_argument("NetConfig: pst layer needs positive channel widths");
      if (lc.spatial_form == SpatialForm::FeatureOnly && lc.in_channels < 1)
        throw std::invalid_argument("NetConfig: feature-only form needs input features");
    }
    if (lc.kind == LayerKind::PstTransConv) {
      if (lc.coords_from < kFromInput || lc.coords_from >= static_cast<int>(i))
        throw std::invalid_argument("NetConfig: transposed layer needs an earlier coordinate source");
    }
    if ((lc.kind == LayerKind::BatchNorm || lc.kind == LayerKind::Relu) &&
        lc.in_channels != lc.out_channels)
      throw std::invalid_argument("NetConfig: width-preserving layer declared with a width change");
  }
  for (const auto& s : skips) {
    if (s[1] < 0 || s[1] >= static_cast<int>(layers.size()) ||
        layers[static_cast<std::size_t>(s[1])].kind != LayerKind::PstTransConv)
      throw std::invalid_argument("NetConfig: skip destination must be a transposed layer");
    if (s[0] < kFromInput || s[0] >= s[1])
      throw std::invalid_argument("NetConfig: skip source must precede its destination");
  }
}

std::vector<ShapeEntry> audit_shapes(const NetConfig& config, int frames, Index points,
                                     Index channels) {
  config.validate();
  struct Dims {
    int frames;
    Index points;
    Index channels;
    bool pooled;
  };
  const Dims input{frames, points, channels, false};
  std::vector<Dims> per_layer;
  std::vector<ShapeEntry> out;
  Dims cur = input;

  for (std::size_t i = 0; i < config.layers.size(); ++i) {
    const LayerConfig& lc = config.layers[i];
    const auto require_seq = [&] {
      if (cur.pooled)
        throw std::invalid_argument("audit_shapes: " + lc.name + " cannot follow pooling");
    };
    const auto require_width = [&](Index expected) {
      if (expected != cur.channels)
        throw std::invalid_argument("audit_shapes: " + lc.name + " expects " +
                                    std::to_string(lc.in_channels) + " channels, gets " +
                                    std::to_string(cur.channels));
    };
    switch (lc.kind) {
      case LayerKind::PstConv:
        require_seq();
        require_width(lc.in_channels);
        cur.frames = lc.tube.out_frames(cur.frames);
        cur.points = lc.tube.out_points(cur.points);
        cur.channels = lc.out_channels;
        break;
      case LayerKind::PstTransConv: {
        require_seq();
        require_width(lc.in_channels);
        const Dims target =
            lc.coords_from == kFromInput ? input : per_layer[static_cast<std::size_t>(lc.coords_from)];
        if (target.pooled)
          throw std::invalid_argument("audit_shapes: coordinate source of " + lc.name + " is pooled");
        if (lc.tube.out_frames(target.frames) != cur.frames)
          throw std::invalid_argument("audit_shapes: " + lc.name +
                                      " temporal geometry inconsistent with its target frames");
        Index skip_channels = 0;
        const int src = config.skip_source_for(static_cast<int>(i));
        if (src != -2) {
          const Dims sdims = src == kFromInput ? input : per_layer[static_cast<std::size_t>(src)];
          if (sdims.frames != target.frames || sdims.points != target.points)
            throw std::invalid_argument("audit_shapes: skip endpoints of " + lc.name +
                                        " disagree on frame/point counts");
          skip_channels = sdims.channels;
        }
        cur.frames = target.frames;
        cur.points = target.points;
        cur.channels = lc.out_channels + skip_channels;
        break;
      }
      case LayerKind::BatchNorm:
      case LayerKind::Relu:
        require_seq();
        require_width(lc.in_channels);
        break;
      case LayerKind::Pool:
        require_seq();
        cur = Dims{0, 0, cur.channels, true};
        break;
      case LayerKind::FullyConnected:
        if (!cur.pooled)
          throw std::invalid_argument("audit_shapes: fc layer before pooling");
        require_width(lc.in_channels);
        cur.channels = lc.out_channels;
        break;
      case LayerKind::Conv1d:
        require_seq();
        require_width(lc.in_channels);
        cur.channels = lc.out_channels;
        break;
    }
    per_layer.push_back(cur);
    out.push_back({lc.name, Network::kind_name(lc.kind), cur.pooled ? 0 : cur.frames,
                   cur.pooled ? 0 : cur.points, cur.channels});
  }
  if (out.back().channels != config.num_classes)
    throw std::invalid_argument("audit_shapes: final width does not match num_classes");
  return out;
}

NetConfig build_classification_net(int num_classes, double base_radius,
                                   const ClassificationNetOptions& options) {
  if (num_classes < 1) throw std::invalid_argument("build_classification_net: bad class count");
  if (!(base_radius > 0.0)) throw std::invalid_argument("build_classification_net: bad radius");
  if (options.widths.size() != 6)
    throw std::invalid_argument("build_classification_net: six layer widths required");
  std::vector<int> mids = options.mid_widths.empty() ? options.widths : options.mid_widths;
  if (mids.size() != 6)
    throw std::invalid_argument("build_classification_net: six mid widths required");

  NetConfig cfg;
  cfg.task = NetConfig::Task::Classification;
  cfg.num_classes = num_classes;
  cfg.init_scale = options.init_scale;
  cfg.radius_multiplier = options.radius_multiplier;

  struct ConvDef {
    const char* name;
    bool subsample;
    int temporal_stride;
    int temporal_kernel;
  };
  const ConvDef defs[6] = {
      {"conv1", true, 1, 1},  {"conv2a", true, 2, 3}, {"conv2b", false, 1, 3},
      {"conv3a", true, 2, 3}, {"conv3b", false, 1, 3}, {"conv4", true, 1, 1},
  };

  double radius = base_radius;
  int channels = 0;
  for (int i = 0; i < 6; ++i) {
    LayerConfig lc;
    lc.kind = LayerKind::PstConv;
    lc.name = defs[i].name;
    lc.tube.temporal_kernel = defs[i].temporal_kernel;
    lc.tube.temporal_stride = defs[i].temporal_stride;
    lc.tube.temporal_padding = defs[i].temporal_kernel == 3 ? std::array<int, 2>{1, 1}
                                                            : std::array<int, 2>{0, 0};
    lc.tube.spatial_stride = defs[i].subsample ? 2 : 1;
    lc.tube.radius = radius;
    lc.tube.neighbors = options.neighbors;
    lc.in_channels = channels;
    lc.mid_channels = mids[static_cast<std::size_t>(i)];
    lc.out_channels = options.widths[static_cast<std::size_t>(i)];
    lc.bias = options.bias;
    cfg.layers.push_back(lc);
    cfg.layers.push_back(make_bn(std::string(defs[i].name) + "_bn", lc.out_channels));
    cfg.layers.push_back(make_relu(std::string(defs[i].name) + "_relu", lc.out_channels));
    if (defs[i].subsample) radius *= options.radius_multiplier;
    channels = lc.out_channels;
  }

  LayerConfig pool;
  pool.kind = LayerKind::Pool;
  pool.name = "pool";
  pool.in_channels = channels;
  pool.out_channels = channels;
  cfg.layers.push_back(pool);

  LayerConfig fc;
  fc.kind = LayerKind::FullyConnected;
  fc.name = "fc";
  fc.in_channels = channels;
  fc.out_channels = num_classes;
  fc.bias = true;
  cfg.layers.push_back(fc);
  return cfg;
}

NetConfig build_segmentation_net(int num_classes, double base_radius,
                                 const SegmentationNetOptions& options) {
  if (num_classes < 1) throw std::invalid_argument("build_segmentation_net: bad class count");
  if (!(base_radius > 0.0)) throw std::invalid_argument("build_segmentation_net: bad radius");
  if (options.encoder_widths.size() != 4)
    throw std::invalid_argument("build_segmentation_net: four encoder widths required");
  const auto& enc = options.encoder_widths;
  std::vector<int> dec = options.decoder_widths;
  if (dec.empty()) dec = {enc[2], enc[1], enc[0], enc[0]};
  if (dec.size() != 4)
    throw std::invalid_argument("build_segmentation_net: four decoder widths required");

  NetConfig cfg;
  cfg.task = NetConfig::Task::Segmentation;
  cfg.num_classes = num_classes;
  cfg.init_scale = options.init_scale;
  cfg.radius_multiplier = options.radius_multiplier;

  struct ConvDef {
    const char* name;
    int spatial_stride;
    int temporal_kernel;
  };
  const ConvDef enc_defs[4] = {{"conv1", 4, 1}, {"conv2", 4, 1}, {"conv3", 4, 3}, {"conv4", 2, 1}};

  double radius = base_radius;
  double enc_radius[4];
  int block_out[4];  // index of each encoder block's relu
  int channels = options.input_channels;
  for (int i = 0; i < 4; ++i) {
    LayerConfig lc;
    lc.kind = LayerKind::PstConv;
    lc.name = enc_defs[i].name;
    lc.tube.temporal_kernel = enc_defs[i].temporal_kernel;
    lc.tube.temporal_stride = 1;
    lc.tube.temporal_padding = enc_defs[i].temporal_kernel == 3 ? std::array<int, 2>{1, 1}
                                                                : std::array<int, 2>{0, 0};
    lc.tube.spatial_stride = enc_defs[i].spatial_stride;
    lc.tube.radius = radius;
    lc.tube.neighbors = options.neighbors;
    lc.in_channels = channels;
    lc.mid_channels = enc[static_cast<std::size_t>(i)];
    lc.out_channels = enc[static_cast<std::size_t>(i)];
    lc.bias = options.bias;
    enc_radius[i] = radius;
    cfg.layers.push_back(lc);
    cfg.layers.push_back(make_bn(std::string(enc_defs[i].name) + "_bn", lc.out_channels));
    cfg.layers.push_back(make_relu(std::string(enc_defs[i].name) + "_relu", lc.out_channels));
    block_out[i] = static_cast<int>(cfg.layers.size()) - 1;
    radius *= options.radius_multiplier;
    channels = lc.out_channels;
  }

  // Decoder in application order: trans4 inverts conv4, ..., trans1 lands on
  // the input coordinates. Interpolation radius mirrors the paired encoder
  // layer; temporal kernel 3 sits at trans2.
  struct TransDef {
    const char* name;
    int paired;  // encoder index
    int temporal_kernel;
  };
  const TransDef dec_defs[4] = {{"trans4", 3, 1}, {"trans3", 2, 1}, {"trans2", 1, 3}, {"trans1", 0, 1}};
  for (int d = 0; d < 4; ++d) {
    LayerConfig lc;
    lc.kind = LayerKind::PstTransConv;
    lc.name = dec_defs[d].name;
    lc.tube.temporal_kernel = dec_defs[d].temporal_kernel;
    lc.tube.temporal_stride = 1;
    lc.tube.temporal_padding = dec_defs[d].temporal_kernel == 3 ? std::array<int, 2>{1, 1}
                                                                : std::array<int, 2>{0, 0};
    lc.tube.spatial_stride = 1;
    lc.tube.radius = enc_radius[dec_defs[d].paired];
    lc.tube.neighbors = options.neighbors;
    lc.in_channels = channels;
    lc.mid_channels = dec[static_cast<std::size_t>(d)];
    lc.out_channels = dec[static_cast<std::size_t>(d)];
    lc.bias = options.bias;
    const int skip_src = dec_defs[d].paired == 0 ? kFromInput : block_out[dec_defs[d].paired - 1];
    lc.coords_from = skip_src;
    const int layer_index = static_cast<int>(cfg.layers.size());
    cfg.layers.push_back(lc);
    cfg.skips.push_back({skip_src, layer_index});
    const int skip_channels =
        skip_src == kFromInput ? options.input_channels
                               : cfg.layers[static_cast<std::size_t>(skip_src)].out_channels;
    channels = lc.out_channels + skip_channels;
    cfg.layers.push_back(make_bn(std::string(dec_defs[d].name) + "_bn", channels));
    cfg.layers.push_back(make_relu(std::string(dec_defs[d].name) + "_relu", channels));
  }

  LayerConfig head;
  head.kind = LayerKind::Conv1d;
  head.name = "head";
  head.in_channels = channels;
  head.out_channels = num_classes;
  head.bias = true;
  cfg.layers.push_back(head);
  return cfg;
}

Network::Network(NetConfig config) : config_(std::move(config)) {
  config_.validate();
  states_.reserve(config_.layers.size());
  for (const LayerConfig& lc : config_.layers) {
    switch (lc.kind) {
      case LayerKind::PstConv: {
        PstConvState st;
        st.spatial.form = lc.spatial_form;
        const bool with_disp = lc.spatial_form != SpatialForm::FeatureOnly;
        const bool with_share = lc.spatial_form != SpatialForm::DisplacementOnly && lc.in_channels > 0;
        if (with_disp) st.spatial.theta_d = Eigen::MatrixXd::Zero(lc.mid_channels, 3);
        if (with_share) st.spatial.theta_s = Eigen::MatrixXd::Zero(lc.mid_channels, lc.in_channels);
        st.temporal.taps.assign(static_cast<std::size_t>(lc.tube.temporal_kernel),
                                Eigen::MatrixXd::Zero(lc.out_channels, lc.mid_channels));
        if (lc.bias) st.temporal.bias = Eigen::VectorXd::Zero(lc.out_channels);
        st.g_theta_d = st.spatial.theta_d;
        st.g_theta_s = st.spatial.theta_s;
        st.g_taps = st.temporal.taps;
        st.g_bias = st.temporal.bias;
        states_.emplace_back(std::move(st));
        break;
      }
      case LayerKind::PstTransConv: {
        PstTransState st;
        st.kernel.taps.assign(static_cast<std::size_t>(lc.tube.temporal_kernel),
                              Eigen::MatrixXd::Zero(lc.mid_channels, lc.in_channels));
        st.kernel.sharing = Eigen::MatrixXd::Zero(lc.out_channels, lc.mid_channels);
        st.g_taps = st.kernel.taps;
        st.g_sharing = st.kernel.sharing;
        states_.emplace_back(std::move(st));
        break;
      }
      case LayerKind::BatchNorm: {
        BnState st;
        st.bn = BatchNorm<double>(lc.out_channels);
        st.g_gamma = Eigen::VectorXd::Zero(lc.out_channels);
        st.g_beta = Eigen::VectorXd::Zero(lc.out_channels);
        states_.emplace_back(std::move(st));
        break;
      }
      case LayerKind::FullyConnected:
      case LayerKind::Conv1d: {
        DenseState st;
        st.dense = Dense<double>(lc.out_channels, lc.in_channels, lc.bias);
        st.g_weight = Eigen::MatrixXd::Zero(lc.out_channels, lc.in_channels);
        if (lc.bias) st.g_bias = Eigen::VectorXd::Zero(lc.out_channels);
        states_.emplace_back(std::move(st));
        break;
      }
      default:
        states_.emplace_back(std::monostate{});
        break;
    }
  }
}

namespace {

void fill_uniform(Eigen::MatrixXd& m, Rng& rng, double bound) {
  for (Index j = 0; j < m.cols(); ++j)
    for (Index i = 0; i < m.rows(); ++i) m(i, j) = rng.uniform(-bound, bound);
}

}  // namespace

void Network::init_params(std::uint64_t seed) {
  // Kaiming-style uniform fan-in bounds; the displacement kernel is scaled by
  // 1/radius so responses to in-radius displacements start at unit order.
  for (std::size_t i = 0; i < states_.size(); ++i) {
    const LayerConfig& lc = config_.layers[i];
    Rng rng(hash_combine(seed, static_cast<std::uint64_t>(i)));
    const double scale = config_.init_scale;
    if (auto* st = std::get_if<PstConvState>(&states_[i])) {
      if (st->spatial.theta_d.size() > 0)
        fill_uniform(st->spatial.theta_d, rng, scale * std::sqrt(6.0 / 3.0) / lc.tube.radius);
      if (st->spatial.theta_s.size() > 0)
        fill_uniform(st->spatial.theta_s, rng, scale * std::sqrt(6.0 / lc.in_channels));
      const double tap_bound =
          scale * std::sqrt(6.0 / (static_cast<double>(lc.mid_channels) * lc.tube.temporal_kernel));
      for (auto& tap : st->temporal.taps) fill_uniform(tap, rng, tap_bound);
      if (st->temporal.has_bias()) st->temporal.bias.setZero();
    } else if (auto* st = std::get_if<PstTransState>(&states_[i])) {
      const double tap_bound =
          scale * std::sqrt(6.0 / (static_cast<double>(lc.in_channels) * lc.tube.temporal_kernel));
      for (auto& tap : st->kernel.taps) fill_uniform(tap, rng, tap_bound);
      fill_uniform(st->kernel.sharing, rng, scale * std::sqrt(6.0 / lc.mid_channels));
    } else if (auto* st = std::get_if<BnState>(&states_[i])) {
      st->bn.gamma.setOnes();
      st->bn.beta.setZero();
      st->bn.running_mean.setZero();
      st->bn.running_var.setOnes();
    } else if (auto* st = std::get_if<DenseState>(&states_[i])) {
      fill_uniform(st->dense.weight, rng, scale * std::sqrt(6.0 / lc.in_channels));
      if (st->dense.has_bias()) st->dense.bias.setZero();
    }
  }
}

Index Network::Tensor::size() const {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

namespace {

Network::Tensor tensor_of(const std::string& name, Eigen::MatrixXd& m, bool trainable) {
  return {name, m.data(), {m.rows(), m.cols()}, trainable};
}
Network::Tensor tensor_of(const std::string& name, Eigen::VectorXd& v, bool trainable) {
  return {name, v.data(), {v.size()}, trainable};
}

}  // namespace

std::vector<Network::Tensor> Network::tensors() {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < states_.size(); ++i) {
    const std::string& name = config_.layers[i].name;
    if (auto* st = std::get_if<PstConvState>(&states_[i])) {
      if (st->spatial.theta_d.size() > 0) out.push_back(tensor_of(name + ".theta_d", st->spatial.theta_d, true));
      if (st->spatial.theta_s.size() > 0) out.push_back(tensor_of(name + ".theta_s", st->spatial.theta_s, true));
      for (std::size_t k = 0; k < st->temporal.taps.size(); ++k)
        out.push_back(tensor_of(name + ".tap" + std::to_string(k), st->temporal.taps[k], true));
      if (st->temporal.has_bias()) out.push_back(tensor_of(name + ".bias", st->temporal.bias, true));
    } else if (auto* st = std::get_if<PstTransState>(&states_[i])) {
      for (std::size_t k = 0; k < st->kernel.taps.size(); ++k)
        out.push_back(tensor_of(name + ".tap" + std::to_string(k), st->kernel.taps[k], true));
      out.push_back(tensor_of(name + ".sharing", st->kernel.sharing, true));
    } else if (auto* st = std::get_if<BnState>(&states_[i])) {
      out.push_back(tensor_of(name + ".gamma", st->bn.gamma, true));
      out.push_back(tensor_of(name + ".beta", st->bn.beta, true));
      out.push_back(tensor_of(name + ".running_mean", st->bn.running_mean, false));
      out.push_back(tensor_of(name + ".running_var", st->bn.running_var, false));
    } else if (auto* st = std::get_if<DenseState>(&states_[i])) {
      out.push_back(tensor_of(name + ".weight", st->dense.weight, true));
      if (st->dense.has_bias()) out.push_back(tensor_of(name + ".bias", st->dense.bias, true));
    }
  }
  return out;
}

std::vector<Network::Tensor> Network::grad_tensors() {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < states_.size(); ++i) {
    const std::string& name = config_.layers[i].name;
    if (auto* st = std::get_if<PstConvState>(&states_[i])) {
      if (st->g_theta_d.size() > 0) out.push_back(tensor_of(name + ".theta_d", st->g_theta_d, true));
      if (st->g_theta_s.size() > 0) out.push_back(tensor_of(name + ".theta_s", st->g_theta_s, true));
      for (std::size_t k = 0; k < st->g_taps.size(); ++k)
        out.push_back(tensor_of(name + ".tap" + std::to_string(k), st->g_taps[k], true));
      if (st->g_bias.size() > 0) out.push_back(tensor_of(name + ".bias", st->g_bias, true));
    } else if (auto* st = std::get_if<PstTransState>(&states_[i])) {
      for (std::size_t k = 0; k < st->g_taps.size(); ++k)
        out.push_back(tensor_of(name + ".tap" + std::to_string(k), st->g_taps[k], true));
      out.push_back(tensor_of(name + ".sharing", st->g_sharing, true));
    } else if (auto* st = std::get_if<BnState>(&states_[i])) {
      out.push_back(tensor_of(name + ".gamma", st->g_gamma, true));
      out.push_back(tensor_of(name + ".beta", st->g_beta, true));
    } else if (auto* st = std::get_if<DenseState>(&states_[i])) {
      out.push_back(tensor_of(name + ".weight", st->g_weight, true));
      if (st->g_bias.size() > 0) out.push_back(tensor_of(name + ".bias", st->g_bias, true));
    }
  }
  return out;
}

void Network::zero_grads() {
  for (auto& state : states_) {
    if (auto* st = std::get_if<PstConvState>(&state)) {
      st->g_theta_d.setZero();
      st->g_theta_s.setZero();
      for (auto& t : st->g_taps) t.setZero();
      st->g_bias.setZero();
    } else if (auto* st = std::get_if<PstTransState>(&state)) {
      for (auto& t : st->g_taps) t.setZero();
      st->g_sharing.setZero();
    } else if (auto* st = std::get_if<BnState>(&state)) {
      st->g_gamma.setZero();
      st->g_beta.setZero();
    } else if (auto* st = std::get_if<DenseState>(&state)) {
      st->g_weight.setZero();
      st->g_bias.setZero();
    }
  }
}

bool Network::params_finite() const {
  for (const auto& state : states_) {
    if (const auto* st = std::get_if<PstConvState>(&state)) {
      if (!st->spatial.theta_d.allFinite() || !st->spatial.theta_s.allFinite()) return false;
      for (const auto& t : st->temporal.taps)
        if (!t.allFinite()) return false;
      if (!st->temporal.bias.allFinite()) return false;
    } else if (const auto* st = std::get_if<PstTransState>(&state)) {
      for (const auto& t : st->kernel.taps)
        if (!t.allFinite()) return false;
      if (!st->kernel.sharing.allFinite()) return false;
    } else if (const auto* st = std::get_if<BnState>(&state)) {
      if (!st->bn.gamma.allFinite() || !st->bn.beta.allFinite()) return false;
      if (!st->bn.running_mean.allFinite() || !st->bn.running_var.allFinite()) return false;
    } else if (const auto* st = std::get_if<DenseState>(&state)) {
      if (!st->dense.weight.allFinite() || !st->dense.bias.allFinite()) return false;
    }
  }
  return true;
}

namespace {

// Gathers every feature column of a batch of clips into one channels x M
// matrix; traversal order is items, frames, columns.
Eigen::MatrixXd gather_feats(const std::vector<Clip>& items, Index channels) {
  Index total = 0;
  for (const auto& item : items)
    for (const auto& f : item.frames) total += f.feats.cols();
  Eigen::MatrixXd out(channels, total);
  Index col = 0;
  for (const auto& item : items)
    for (const auto& f : item.frames) {
      out.middleCols(col, f.feats.cols()) = f.feats;
      col += f.feats.cols();
    }
  return out;
}

void scatter_feats(std::vector<Clip>& items, const Eigen::MatrixXd& gathered) {
  Index col = 0;
  for (auto& item : items)
    for (auto& f : item.frames) {
      f.feats = gathered.middleCols(col, f.feats.cols());
      col += f.feats.cols();
    }
}

}  // namespace

Network::Output Network::forward(const std::vector<Clip>& batch, BnMode bn_mode,
                                 const Sampling& sampling, Cache* cache) {
  if (batch.empty()) throw std::invalid_argument("Network::forward: empty batch");
  const int b_count = static_cast<int>(batch.size());

  Cache local;
  Cache& c = cache ? *cache : local;
  c = Cache{};
  c.bn_mode = bn_mode;
  c.input = batch;
  c.acts.resize(config_.layers.size());
  c.layers.resize(config_.layers.size());

  std::vector<Clip> cur = batch;
  bool pooled_stage = false;
  Eigen::MatrixXd pooled;

  for (std::size_t i = 0; i < config_.layers.size(); ++i) {
    const LayerConfig& lc = config_.layers[i];
    auto& per = c.layers[i];
    switch (lc.kind) {
      case LayerKind::PstConv: {
        auto& st = std::get<PstConvState>(states_[i]);
        per.pst.resize(static_cast<std::size_t>(b_count));
        std::vector<Clip> next(static_cast<std::size_t>(b_count));
        parallel_for(b_count, [&](int b) {
          const Sampling s = sampling.fork(0xAAu + i, static_cast<std::uint64_t>(b));
          auto io = pst_conv_forward(cur[static_cast<std::size_t>(b)], lc.tube, st.spatial,
                                     st.temporal, s);
          Clip out;
          out.frames.resize(io.out_coords.size());
          for (std::size_t t = 0; t < io.out_coords.size(); ++t) {
            out.frames[t].coords = io.out_coords[t];
            out.frames[t].feats = io.out_feats[t];
          }
          next[static_cast<std::size_t>(b)] = std::move(out);
          per.pst[static_cast<std::size_t>(b)] = std::move(io);
        });
        cur = std::move(next);
        break;
      }
      case LayerKind::PstTransConv: {
        auto& st = std::get<PstTransState>(states_[i]);
        per.trans.resize(static_cast<std::size_t>(b_count));
        std::vector<Clip> next(static_cast<std::size_t>(b_count));
        const auto& target_acts =
            lc.coords_from == kFromInput ? c.input : c.acts[static_cast<std::size_t>(lc.coords_from)];
        const int src = config_.skip_source_for(static_cast<int>(i));
        const std::vector<Clip>* skip_acts = nullptr;
        if (src == kFromInput)
          skip_acts = &c.input;
        else if (src >= 0)
          skip_acts = &c.acts[static_cast<std::size_t>(src)];
        parallel_for(b_count, [&](int b) {
          const Clip& enc = cur[static_cast<std::size_t>(b)];
          std::vector<Eigen::MatrixXd> enc_feats;
          std::vector<Eigen::Matrix3Xd> anchor_coords;
          for (const auto& f : enc.frames) {
            enc_feats.push_back(f.feats);
            anchor_coords.push_back(f.coords);
          }
          const Clip& target = target_acts[static_cast<std::size_t>(b)];
          std::vector<Eigen::Matrix3Xd> original_coords;
          for (const auto& f : target.frames) original_coords.push_back(f.coords);
          auto io = pst_trans_conv_forward(enc_feats, anchor_coords, original_coords, st.kernel,
                                           lc.tube);
          Clip out;
          out.frames.resize(target.frames.size());
          for (std::size_t t = 0; t < target.frames.size(); ++t) {
            out.frames[t].coords = target.frames[t].coords;
            if (skip_acts) {
              const auto& skip_f = (*skip_acts)[static_cast<std::size_t>(b)].frames[t].feats;
              Eigen::MatrixXd stacked(io.out_feats[t].rows() + skip_f.rows(), io.out_feats[t].cols());
              stacked.topRows(io.out_feats[t].rows()) = io.out_feats[t];
              stacked.bottomRows(skip_f.rows()) = skip_f;
              out.frames[t].feats = std::move(stacked);
            } else {
              out.frames[t].feats = io.out_feats[t];
            }
          }
          next[static_cast<std::size_t>(b)] = std::move(out);
          per.trans[static_cast<std::size_t>(b)] = std::move(io);
        });
        cur = std::move(next);
        break;
      }
      case LayerKind::BatchNorm: {
        auto& st = std::get<BnState>(states_[i]);
        const Eigen::MatrixXd gathered = gather_feats(cur, lc.in_channels);
        const bool training = bn_mode != BnMode::Eval;
        const bool update = bn_mode == BnMode::Train;
        const Eigen::MatrixXd y = st.bn.forward(gathered, training, update, &per.bn);
        scatter_feats(cur, y);
        break;
      }
      case LayerKind::Relu: {
        for (auto& item : cur)
          for (auto& f : item.frames) f.feats = relu(f.feats);
        break;
      }
      case LayerKind::Pool: {
        per.pool.resize(static_cast<std::size_t>(b_count));
        pooled.resize(lc.in_channels, b_count);
        for (int b = 0; b < b_count; ++b) {
          std::vector<Eigen::MatrixXd> feats;
          for (const auto& f : cur[static_cast<std::size_t>(b)].frames) feats.push_back(f.feats);
          pooled.col(b) = pool_sequence(feats, &per.pool[static_cast<std::size_t>(b)]);
        }
        pooled_stage = true;
        cur.clear();
        cur.resize(static_cast<std::size_t>(b_count));  // sequence stage ends here
        break;
      }
      case LayerKind::FullyConnected: {
        auto& st = std::get<DenseState>(states_[i]);
        per.dense_in = pooled;
        pooled = st.dense.forward(pooled);
        break;
      }
      case LayerKind::Conv1d: {
        auto& st = std::get<DenseState>(states_[i]);
        for (auto& item : cur)
          for (auto& f : item.frames) f.feats = st.dense.forward(f.feats);
        break;
      }
    }
    c.acts[i] = cur;
  }
  c.pooled = pooled;

  Output out;
  if (config_.task == NetConfig::Task::Classification) {
    if (!pooled_stage) throw std::logic_error("Network::forward: classification net never pooled");
    out.logits = pooled;
  } else {
    out.point_logits.resize(static_cast<std::size_t>(b_count));
    for (int b = 0; b < b_count; ++b)
      for (const auto& f : cur[static_cast<std::size_t>(b)].frames)
        out.point_logits[static_cast<std::size_t>(b)].push_back(f.feats);
  }
  return out;
}

void Network::backward(const Cache& c, const Output& grad) {
  const int b_count = static_cast<int>(c.input.size());
  const int n_layers = static_cast<int>(config_.layers.size());

  // Per-item, per-frame gradients of the current layer output.
  std::vector<std::vector<Eigen::MatrixXd>> gseq;
  Eigen::MatrixXd gpool;
  bool pooled_stage = config_.task == NetConfig::Task::Classification;
  if (pooled_stage) {
    gpool = grad.logits;
  } else {
    gseq.resize(static_cast<std::size_t>(b_count));
    for (int b = 0; b < b_count; ++b) gseq[static_cast<std::size_t>(b)] = grad.point_logits[static_cast<std::size_t>(b)];
  }

  // Skip contributions accumulate here until the reverse walk reaches the
  // source layer.
  std::vector<std::vector<std::vector<Eigen::MatrixXd>>> skip_acc(
      static_cast<std::size_t>(n_layers));

  const auto input_act_of = [&](int layer, int b) -> const Clip& {
    return layer == 0 ? c.input[static_cast<std::size_t>(b)]
                      : c.acts[static_cast<std::size_t>(layer - 1)][static_cast<std::size_t>(b)];
  };

  for (int i = n_layers - 1; i >= 0; --i) {
    const LayerConfig& lc = config_.layers[static_cast<std::size_t>(i)];
    const auto& per = c.layers[static_cast<std::size_t>(i)];

    if (!pooled_stage && !skip_acc[static_cast<std::size_t>(i)].empty()) {
      const auto& acc = skip_acc[static_cast<std::size_t>(i)];
      for (int b = 0; b < b_count; ++b)
        for (std::size_t t = 0; t < acc[static_cast<std::size_t>(b)].size(); ++t)
          gseq[static_cast<std::size_t>(b)][t] += acc[static_cast<std::size_t>(b)][t];
    }

    switch (lc.kind) {
      case LayerKind::FullyConnected: {
        auto& st = std::get<DenseState>(states_[static_cast<std::size_t>(i)]);
        gpool = st.dense.backward(per.dense_in, gpool, st.g_weight, st.g_bias);
        break;
      }
      case LayerKind::Pool: {
        gseq.assign(static_cast<std::size_t>(b_count), {});
        for (int b = 0; b < b_count; ++b) {
          const Eigen::VectorXd g = gpool.col(b);
          gseq[static_cast<std::size_t>(b)] =
              pool_sequence_backward<double>(g, per.pool[static_cast<std::size_t>(b)]);
        }
        pooled_stage = false;
        break;
      }
      case LayerKind::Relu: {
        for (int b = 0; b < b_count; ++b) {
          const Clip& in = input_act_of(i, b);
          for (std::size_t t = 0; t < in.frames.size(); ++t)
            gseq[static_cast<std::size_t>(b)][t] =
                relu_backward(in.frames[t].feats, gseq[static_cast<std::size_t>(b)][t]);
        }
        break;
      }
      case LayerKind::BatchNorm: {
        auto& st = std::get<BnState>(states_[static_cast<std::size_t>(i)]);
        Index total = 0;
        for (int b = 0; b < b_count; ++b)
          for (const auto& g : gseq[static_cast<std::size_t>(b)]) total += g.cols();
        Eigen::MatrixXd gathered(lc.in_channels, total);
        Index col = 0;
        for (int b = 0; b < b_count; ++b)
          for (const auto& g : gseq[static_cast<std::size_t>(b)]) {
            gathered.middleCols(col, g.cols()) = g;
            col += g.cols();
          }
        const Eigen::MatrixXd dx = st.bn.backward(gathered, per.bn, st.g_gamma, st.g_beta);
        col = 0;
        for (int b = 0; b < b_count; ++b)
          for (auto& g : gseq[static_cast<std::size_t>(b)]) {
            g = dx.middleCols(col, g.cols());
            col += g.cols();
          }
        break;
      }
      case LayerKind::Conv1d: {
        auto& st = std::get<DenseState>(states_[static_cast<std::size_t>(i)]);
        for (int b = 0; b < b_count; ++b) {
          const Clip& in = input_act_of(i, b);
          for (std::size_t t = 0; t < in.frames.size(); ++t)
            gseq[static_cast<std::size_t>(b)][t] = st.dense.backward(
                in.frames[t].feats, gseq[static_cast<std::size_t>(b)][t], st.g_weight, st.g_bias);
        }
        break;
      }
      case LayerKind::PstConv: {
        auto& st = std::get<PstConvState>(states_[static_cast<std::size_t>(i)]);
        std::vector<PstConvGrads<double>> grads(static_cast<std::size_t>(b_count));
        std::vector<std::vector<Eigen::MatrixXd>> next(static_cast<std::size_t>(b_count));
        parallel_for(b_count, [&](int b) {
          grads[static_cast<std::size_t>(b)] =
              pst_conv_backward(per.pst[static_cast<std::size_t>(b)], lc.tube, st.spatial,
                                st.temporal, gseq[static_cast<std::size_t>(b)]);
          const Clip& in = input_act_of(i, b);
          auto& n = next[static_cast<std::size_t>(b)];
          if (!grads[static_cast<std::size_t>(b)].input_feats.empty()) {
            n = std::move(grads[static_cast<std::size_t>(b)].input_feats);
          } else {
            n.reserve(in.frames.size());
            for (const auto& f : in.frames)
              n.push_back(Eigen::MatrixXd::Zero(f.feats.rows(), f.feats.cols()));
          }
        });
        for (int b = 0; b < b_count; ++b) {
          const auto& g = grads[static_cast<std::size_t>(b)];
          if (g.theta_d.size() > 0) st.g_theta_d += g.theta_d;
          if (g.theta_s.size() > 0) st.g_theta_s += g.theta_s;
          for (std::size_t k = 0; k < g.taps.size(); ++k) st.g_taps[k] += g.taps[k];
          if (g.bias.size() > 0) st.g_bias += g.bias;
        }
        gseq = std::move(next);
        break;
      }
      case LayerKind::PstTransConv: {
        auto& st = std::get<PstTransState>(states_[static_cast<std::size_t>(i)]);
        const int src = config_.skip_source_for(i);
        std::vector<PstTransGrads<double>> grads(static_cast<std::size_t>(b_count));
        std::vector<std::vector<Eigen::MatrixXd>> next(static_cast<std::size_t>(b_count));
        std::vector<std::vector<Eigen::MatrixXd>> skip_part(static_cast<std::size_t>(b_count));
        parallel_for(b_count, [&](int b) {
          const auto& io = per.trans[static_cast<std::size_t>(b)];
          std::vector<Eigen::MatrixXd> gtop(io.out_feats.size());
          auto& gskip = skip_part[static_cast<std::size_t>(b)];
          gskip.resize(io.out_feats.size());
          for (std::size_t t = 0; t < io.out_feats.size(); ++t) {
            const Eigen::MatrixXd& g = gseq[static_cast<std::size_t>(b)][t];
            gtop[t] = g.topRows(lc.out_channels);
            if (g.rows() > lc.out_channels) gskip[t] = g.bottomRows(g.rows() - lc.out_channels);
          }
          grads[static_cast<std::size_t>(b)] = pst_trans_conv_backward(io, st.kernel, gtop);
          next[static_cast<std::size_t>(b)] = std::move(grads[static_cast<std::size_t>(b)].encoded_feats);
        });
        for (int b = 0; b < b_count; ++b) {
          const auto& g = grads[static_cast<std::size_t>(b)];
          for (std::size_t k = 0; k < g.taps.size(); ++k) st.g_taps[k] += g.taps[k];
          st.g_sharing += g.sharing;
        }
        if (src >= 0) {
          auto& acc = skip_acc[static_cast<std::size_t>(src)];
          if (acc.empty()) acc.resize(static_cast<std::size_t>(b_count));
          for (int b = 0; b < b_count; ++b) {
            auto& dst = acc[static_cast<std::size_t>(b)];
            auto& add = skip_part[static_cast<std::size_t>(b)];
            if (dst.empty()) {
              dst = std::move(add);
            } else {
              for (std::size_t t = 0; t < dst.size(); ++t) dst[t] += add[t];
            }
          }
        }
        gseq = std::move(next);
        break;
      }
    }
  }
}

SequenceEval evaluate_sequence(Network& net, const Clip& sequence, int clip_len, int frame_stride,
                               const Sampling& sampling) {
  const auto clips = split_clips(sequence, clip_len, frame_stride);
  const auto out = net.forward(clips, Network::BnMode::Eval, sampling, nullptr);
  SequenceEval eval;
  eval.mean_probs = Eigen::VectorXd::Zero(out.logits.rows());
  for (Index j = 0; j < out.logits.cols(); ++j)
    eval.mean_probs += softmax<double>(out.logits.col(j));
  eval.mean_probs /= static_cast<double>(out.logits.cols());
  eval.mean_probs.maxCoeff(&eval.predicted);
  return eval;
}

std::vector<Eigen::MatrixXd> predict_point_probabilities(Network& net, const Clip& sequence,
                                                         int clip_len, int frame_stride, int hop,
                                                         const Sampling& sampling) {
  if (hop < 1) hop = clip_len;
  const int frames = sequence.num_frames();
  const int count = frames - (clip_len - 1) * frame_stride;
  if (count < 1) throw std::invalid_argument("predict_point_probabilities: sequence too short");

  std::vector<int> offsets;
  for (int o = 0; o < count; o += hop) offsets.push_back(o);
  if (offsets.back() != count - 1) offsets.push_back(count - 1);

  std::vector<Clip> clips;
  for (int o : offsets) {
    Clip clip;
    for (int idx : clip_frame_indices(frames, clip_len, frame_stride, o))
      clip.frames.push_back(sequence.frames[static_cast<std::size_t>(idx)]);
    clips.push_back(std::move(clip));
  }
  const auto out = net.forward(clips, Network::BnMode::Eval, sampling, nullptr);

  const int classes = net.config().num_classes;
  const Index points = sequence.points_per_frame();
  std::vector<Eigen::MatrixXd> sums(static_cast<std::size_t>(frames),
                                    Eigen::MatrixXd::Zero(classes, points));
  std::vector<int> hits(static_cast<std::size_t>(frames), 0);
  for (std::size_t cidx = 0; cidx < offsets.size(); ++cidx) {
    const auto idxs = clip_frame_indices(frames, clip_len, frame_stride, offsets[cidx]);
    for (std::size_t t = 0; t < idxs.size(); ++t) {
      const Eigen::MatrixXd& logits = out.point_logits[cidx][t];
      auto& sum = sums[static_cast<std::size_t>(idxs[t])];
      for (Index q = 0; q < logits.cols(); ++q) sum.col(q) += softmax<double>(logits.col(q));
      ++hits[static_cast<std::size_t>(idxs[t])];
    }
  }
  for (int t = 0; t < frames; ++t) {
    if (hits[static_cast<std::size_t>(t)] > 0)
      sums[static_cast<std::size_t>(t)] /= static_cast<double>(hits[static_cast<std::size_t>(t)]);
    else
      sums[static_cast<std::size_t>(t)].setConstant(1.0 / classes);
  }
  return sums;
}

}  // namespace pstconv
