#include "pstconv/gradcheck_suite.hpp"

#include "pstconv/net.hpp"
#include "pstconv/pst_conv.hpp"
#include "pstconv/pst_trans_conv.hpp"
#include "pstconv/random.hpp"

namespace pstconv {

namespace {

Eigen::MatrixXd random_mat(Rng& rng, Index rows, Index cols, double lo = -1.0, double hi = 1.0) {
  Eigen::MatrixXd m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = rng.uniform(lo, hi);
  return m;
}

Eigen::VectorXd random_vec(Rng& rng, Index n, double lo = -1.0, double hi = 1.0) {
  Eigen::VectorXd v(n);
  for (Index i = 0; i < n; ++i) v(i) = rng.uniform(lo, hi);
  return v;
}

Clip random_clip(Rng& rng, int frames, Index points, Index channels, double extent) {
  Clip clip;
  clip.frames.resize(static_cast<std::size_t>(frames));
  for (auto& f : clip.frames) {
    f.coords = random_mat(rng, 3, points, 0.0, extent);
    f.feats = random_mat(rng, channels, points);
  }
  return clip;
}

GradCheckEntry entry(const std::string& name, Eigen::MatrixXd& values,
                     const Eigen::MatrixXd& analytic) {
  return {name, values.data(), analytic.data(), values.size()};
}
GradCheckEntry entry(const std::string& name, Eigen::VectorXd& values,
                     const Eigen::VectorXd& analytic) {
  return {name, values.data(), analytic.data(), values.size()};
}

using Named = std::pair<std::string, GradCheckReport>;

Named check_relu(std::uint64_t seed, double eps) {
  Rng rng(seed);
  Eigen::MatrixXd x = random_mat(rng, 4, 7);
  x = x.unaryExpr([](double v) { return v >= 0 ? v + 0.1 : v - 0.1; });  // keep away from the kink
  const Eigen::MatrixXd r = random_mat(rng, 4, 7);
  const Eigen::MatrixXd dx = relu_backward(x, r);
  auto loss = [&] { return (relu(x).array() * r.array()).sum(); };
  return {"relu", grad_check(loss, {entry("x", x, dx)}, eps)};
}

Named check_dense(std::uint64_t seed, double eps) {
  Rng rng(seed);
  Dense<double> dense(3, 5);
  dense.weight = random_mat(rng, 3, 5);
  dense.bias = random_vec(rng, 3);
  Eigen::MatrixXd x = random_mat(rng, 5, 6);
  const Eigen::MatrixXd r = random_mat(rng, 3, 6);
  Eigen::MatrixXd dw = Eigen::MatrixXd::Zero(3, 5);
  Eigen::VectorXd db = Eigen::VectorXd::Zero(3);
  const Eigen::MatrixXd dx = dense.backward(x, r, dw, db);
  auto loss = [&] { return (dense.forward(x).array() * r.array()).sum(); };
  return {"dense", grad_check(loss, {entry("weight", dense.weight, dw), entry("bias", dense.bias, db),
                                     entry("x", x, dx)},
                              eps)};
}

Named check_batch_norm(std::uint64_t seed, double eps, bool training) {
  Rng rng(seed);
  BatchNorm<double> bn(4);
  bn.gamma = random_vec(rng, 4, 0.5, 1.5);
  bn.beta = random_vec(rng, 4);
  bn.running_mean = random_vec(rng, 4);
  bn.running_var = random_vec(rng, 4, 0.5, 2.0);
  Eigen::MatrixXd x = random_mat(rng, 4, 9);
  const Eigen::MatrixXd r = random_mat(rng, 4, 9);
  BatchNorm<double>::Cache cache;
  bn.forward(x, training, false, &cache);
  Eigen::VectorXd dgamma = Eigen::VectorXd::Zero(4);
  Eigen::VectorXd dbeta = Eigen::VectorXd::Zero(4);
  Eigen::MatrixXd dx = bn.backward(r, cache, dgamma, dbeta);
  auto loss = [&] {
    return (bn.forward(x, training, false, nullptr).array() * r.array()).sum();
  };
  return {training ? "batch_norm_train" : "batch_norm_eval",
          grad_check(loss, {entry("gamma", bn.gamma, dgamma), entry("beta", bn.beta, dbeta),
                            entry("x", x, dx)},
                     eps)};
}

Named check_pool(std::uint64_t seed, double eps) {
  Rng rng(seed);
  std::vector<Eigen::MatrixXd> frames = {random_mat(rng, 3, 5), random_mat(rng, 3, 5),
                                         random_mat(rng, 3, 5)};
  const Eigen::VectorXd r = random_vec(rng, 3);
  PoolCache<double> cache;
  pool_sequence(frames, &cache);
  const auto dframes = pool_sequence_backward(r, cache);
  auto loss = [&] { return pool_sequence<double>(frames).dot(r); };
  std::vector<GradCheckEntry> entries;
  for (std::size_t t = 0; t < frames.size(); ++t)
    entries.push_back(entry("frame" + std::to_string(t), frames[t], dframes[t]));
  return {"pool_sequence", grad_check(loss, entries, eps)};
}

Named check_softmax_ce(std::uint64_t seed, double eps) {
  Rng rng(seed);
  Eigen::VectorXd logits = random_vec(rng, 5, -2.0, 2.0);
  const Index label = 2;
  const Eigen::VectorXd dlogits = softmax_cross_entropy(logits, label).second;
  auto loss = [&] { return softmax_cross_entropy(logits, label).first; };
  return {"softmax_cross_entropy", grad_check(loss, {entry("logits", logits, dlogits)}, eps)};
}

Named check_pst_conv(std::uint64_t seed, double eps, SpatialForm form, Index in_channels,
                     const std::string& name) {
  Rng rng(seed);
  TubeSpec spec;
  spec.temporal_kernel = 3;
  spec.temporal_stride = 2;
  spec.temporal_padding = {1, 1};
  spec.spatial_stride = 2;
  spec.radius = 0.7;
  spec.neighbors = 4;

  Clip clip = random_clip(rng, 4, 8, in_channels, 1.0);
  const PointTube<double> tube = build_tube(clip, spec);

  SpatialKernel<double> spatial;
  spatial.form = form;
  const Index mid = 4;
  if (form != SpatialForm::FeatureOnly) spatial.theta_d = random_mat(rng, mid, 3);
  if (form != SpatialForm::DisplacementOnly && in_channels > 0)
    spatial.theta_s = random_mat(rng, mid, in_channels);
  TemporalKernel<double> temporal;
  temporal.taps = {random_mat(rng, 5, mid), random_mat(rng, 5, mid), random_mat(rng, 5, mid)};
  temporal.bias = random_vec(rng, 5);

  auto forward = [&] { return pst_conv_forward(clip, tube, spec, spatial, temporal); };
  LayerIO<double> io = forward();
  std::vector<Eigen::MatrixXd> r;
  for (const auto& f : io.out_feats) r.push_back(random_mat(rng, f.rows(), f.cols()));
  const auto grads = pst_conv_backward(io, spec, spatial, temporal, r);

  auto loss = [&] {
    const auto out = forward();
    double sum = 0.0;
    for (std::size_t i = 0; i < out.out_feats.size(); ++i)
      sum += (out.out_feats[i].array() * r[i].array()).sum();
    return sum;
  };

  std::vector<GradCheckEntry> entries;
  if (spatial.theta_d.size() > 0) entries.push_back(entry("theta_d", spatial.theta_d, grads.theta_d));
  if (spatial.theta_s.size() > 0) entries.push_back(entry("theta_s", spatial.theta_s, grads.theta_s));
  for (std::size_t k = 0; k < temporal.taps.size(); ++k)
    entries.push_back(entry("tap" + std::to_string(k), temporal.taps[k], grads.taps[k]));
  entries.push_back(entry("bias", temporal.bias, grads.bias));
  if (!grads.input_feats.empty()) {
    for (std::size_t t = 0; t < clip.frames.size(); ++t)
      entries.push_back(entry("in_feats" + std::to_string(t), clip.frames[t].feats,
                              grads.input_feats[t]));
  }
  return {name, grad_check(loss, entries, eps)};
}

Named check_pst_trans(std::uint64_t seed, double eps) {
  Rng rng(seed);
  TubeSpec spec;
  spec.temporal_kernel = 3;
  spec.temporal_stride = 2;
  spec.temporal_padding = {1, 1};
  spec.radius = 0.8;
  spec.neighbors = 4;

  const int target_frames = 5;
  const Index n_points = 7, n_anchors = 3, c_in = 4, c_mid = 3, c_out = 2;
  const int encoded = spec.out_frames(target_frames);

  std::vector<Eigen::Matrix3Xd> original(static_cast<std::size_t>(target_frames));
  for (auto& f : original) f = random_mat(rng, 3, n_points);
  std::vector<Eigen::Matrix3Xd> anchors(static_cast<std::size_t>(encoded));
  for (auto& a : anchors) a = random_mat(rng, 3, n_anchors);
  std::vector<Eigen::MatrixXd> feats(static_cast<std::size_t>(encoded));
  for (auto& f : feats) f = random_mat(rng, c_in, n_anchors);

  TransKernel<double> kernel;
  kernel.taps = {random_mat(rng, c_mid, c_in), random_mat(rng, c_mid, c_in),
                 random_mat(rng, c_mid, c_in)};
  kernel.sharing = random_mat(rng, c_out, c_mid);

  auto forward = [&] { return pst_trans_conv_forward(feats, anchors, original, kernel, spec); };
  TransLayerIO<double> io = forward();
  std::vector<Eigen::MatrixXd> r;
  for (const auto& f : io.out_feats) r.push_back(random_mat(rng, f.rows(), f.cols()));
  const auto grads = pst_trans_conv_backward(io, kernel, r);

  auto loss = [&] {
    const auto out = forward();
    double sum = 0.0;
    for (std::size_t t = 0; t < out.out_feats.size(); ++t)
      sum += (out.out_feats[t].array() * r[t].array()).sum();
    return sum;
  };

  std::vector<GradCheckEntry> entries;
  for (std::size_t k = 0; k < kernel.taps.size(); ++k)
    entries.push_back(entry("tap" + std::to_string(k), kernel.taps[k], grads.taps[k]));
  entries.push_back(entry("sharing", kernel.sharing, grads.sharing));
  for (std::size_t t = 0; t < feats.size(); ++t)
    entries.push_back(entry("encoded" + std::to_string(t), feats[t], grads.encoded_feats[t]));
  return {"pst_trans_conv", grad_check(loss, entries, eps)};
}

NetConfig micro_net_config() {
  NetConfig cfg;
  cfg.task = NetConfig::Task::Classification;
  cfg.num_classes = 3;

  LayerConfig c1;
  c1.kind = LayerKind::PstConv;
  c1.name = "micro1";
  c1.tube.temporal_kernel = 1;
  c1.tube.spatial_stride = 2;
  c1.tube.radius = 0.8;
  c1.tube.neighbors = 4;
  c1.in_channels = 0;
  c1.mid_channels = 4;
  c1.out_channels = 4;
  cfg.layers.push_back(c1);
  LayerConfig bn1;
  bn1.kind = LayerKind::BatchNorm;
  bn1.name = "micro1_bn";
  bn1.in_channels = bn1.out_channels = 4;
  cfg.layers.push_back(bn1);
  LayerConfig relu1;
  relu1.kind = LayerKind::Relu;
  relu1.name = "micro1_relu";
  relu1.in_channels = relu1.out_channels = 4;
  cfg.layers.push_back(relu1);

  LayerConfig c2;
  c2.kind = LayerKind::PstConv;
  c2.name = "micro2";
  c2.tube.temporal_kernel = 3;
  c2.tube.temporal_stride = 2;
  c2.tube.temporal_padding = {1, 1};
  c2.tube.radius = 1.2;
  c2.tube.neighbors = 3;
  c2.in_channels = 4;
  c2.mid_channels = 5;
  c2.out_channels = 5;
  cfg.layers.push_back(c2);
  LayerConfig bn2;
  bn2.kind = LayerKind::BatchNorm;
  bn2.name = "micro2_bn";
  bn2.in_channels = bn2.out_channels = 5;
  cfg.layers.push_back(bn2);
  LayerConfig relu2;
  relu2.kind = LayerKind::Relu;
  relu2.name = "micro2_relu";
  relu2.in_channels = relu2.out_channels = 5;
  cfg.layers.push_back(relu2);

  LayerConfig pool;
  pool.kind = LayerKind::Pool;
  pool.name = "pool";
  pool.in_channels = pool.out_channels = 5;
  cfg.layers.push_back(pool);
  LayerConfig fc;
  fc.kind = LayerKind::FullyConnected;
  fc.name = "fc";
  fc.in_channels = 5;
  fc.out_channels = 3;
  cfg.layers.push_back(fc);
  return cfg;
}

Named check_micro_net(std::uint64_t seed, double eps) {
  Rng rng(seed);
  Network net(micro_net_config());
  net.init_params(seed);

  std::vector<Clip> batch = {random_clip(rng, 3, 8, 0, 1.0), random_clip(rng, 3, 8, 0, 1.0)};
  const std::vector<Index> labels = {1, 2};

  auto loss = [&] {
    const auto out = net.forward(batch, Network::BnMode::TrainFrozen);
    double sum = 0.0;
    for (Index b = 0; b < out.logits.cols(); ++b)
      sum += softmax_cross_entropy<double>(out.logits.col(b), labels[static_cast<std::size_t>(b)]).first;
    return sum / static_cast<double>(out.logits.cols());
  };

  Network::Cache cache;
  const auto out = net.forward(batch, Network::BnMode::TrainFrozen, Sampling::deterministic(), &cache);
  Network::Output grad;
  grad.logits.resize(out.logits.rows(), out.logits.cols());
  for (Index b = 0; b < out.logits.cols(); ++b)
    grad.logits.col(b) = softmax_cross_entropy<double>(out.logits.col(b), labels[static_cast<std::size_t>(b)]).second /
                         static_cast<double>(out.logits.cols());
  net.zero_grads();
  net.backward(cache, grad);

  auto params = net.tensors();
  auto grads = net.grad_tensors();
  std::vector<GradCheckEntry> entries;
  std::size_t g = 0;
  for (auto& t : params) {
    if (!t.trainable) continue;
    entries.push_back({t.name, t.data, grads[g].data, t.size()});
    ++g;
  }
  return {"micro_net", grad_check(loss, entries, eps)};
}

}  // namespace

std::vector<std::pair<std::string, GradCheckReport>> run_gradcheck_suite(std::uint64_t seed,
                                                                         double eps) {
  std::vector<std::pair<std::string, GradCheckReport>> out;
  out.push_back(check_relu(hash_combine(seed, 1), eps));
  out.push_back(check_dense(hash_combine(seed, 2), eps));
  out.push_back(check_batch_norm(hash_combine(seed, 3), eps, true));
  out.push_back(check_batch_norm(hash_combine(seed, 4), eps, false));
  out.push_back(check_pool(hash_combine(seed, 5), eps));
  out.push_back(check_softmax_ce(hash_combine(seed, 6), eps));
  out.push_back(check_pst_conv(hash_combine(seed, 7), eps, SpatialForm::Full, 0, "pst_conv_featureless"));
  out.push_back(check_pst_conv(hash_combine(seed, 8), eps, SpatialForm::Full, 3, "pst_conv_full"));
  out.push_back(check_pst_conv(hash_combine(seed, 9), eps, SpatialForm::DisplacementOnly, 3,
                               "pst_conv_displacement_only"));
  out.push_back(check_pst_conv(hash_combine(seed, 10), eps, SpatialForm::FeatureOnly, 3,
                               "pst_conv_feature_only"));
  out.push_back(check_pst_trans(hash_combine(seed, 11), eps));
  out.push_back(check_micro_net(hash_combine(seed, 12), eps));
  return out;
}

}  // namespace pstconv
