#include "pstconv/net_io.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace pstconv {

namespace {

using nlohmann::json;

const char* task_name(NetConfig::Task task) {
  return task == NetConfig::Task::Classification ? "classification" : "segmentation";
}

NetConfig::Task task_from(const std::string& s) {
  if (s == "classification") return NetConfig::Task::Classification;
  if (s == "segmentation") return NetConfig::Task::Segmentation;
  throw ParseError("unknown task: " + s);
}

LayerKind kind_from(const std::string& s) {
  if (s == "pstconv") return LayerKind::PstConv;
  if (s == "psttrans") return LayerKind::PstTransConv;
  if (s == "batch_norm") return LayerKind::BatchNorm;
  if (s == "relu") return LayerKind::Relu;
  if (s == "pool") return LayerKind::Pool;
  if (s == "fc") return LayerKind::FullyConnected;
  if (s == "conv1d") return LayerKind::Conv1d;
  throw ParseError("unknown layer kind: " + s);
}

const char* form_name(SpatialForm form) {
  switch (form) {
    case SpatialForm::Full: return "full";
    case SpatialForm::DisplacementOnly: return "displacement";
    case SpatialForm::FeatureOnly: return "feature";
  }
  return "?";
}

SpatialForm form_from(const std::string& s) {
  if (s == "full") return SpatialForm::Full;
  if (s == "displacement") return SpatialForm::DisplacementOnly;
  if (s == "feature") return SpatialForm::FeatureOnly;
  throw ParseError("unknown spatial form: " + s);
}

json tube_to_json(const TubeSpec& t) {
  return json{{"temporal_kernel", t.temporal_kernel},
              {"temporal_stride", t.temporal_stride},
              {"temporal_padding", {t.temporal_padding[0], t.temporal_padding[1]}},
              {"spatial_stride", t.spatial_stride},
              {"radius", t.radius},
              {"neighbors", t.neighbors},
              {"anchor_mode", t.anchor_mode == AnchorMode::Centered ? "centered" : "trailing"}};
}

TubeSpec tube_from_json(const json& j) {
  TubeSpec t;
  t.temporal_kernel = j.at("temporal_kernel").get<int>();
  t.temporal_stride = j.value("temporal_stride", 1);
  if (j.contains("temporal_padding")) {
    t.temporal_padding[0] = j.at("temporal_padding").at(0).get<int>();
    t.temporal_padding[1] = j.at("temporal_padding").at(1).get<int>();
  }
  t.spatial_stride = j.value("spatial_stride", 1);
  t.radius = j.at("radius").get<double>();
  t.neighbors = j.at("neighbors").get<int>();
  const std::string mode = j.value("anchor_mode", "centered");
  if (mode == "centered")
    t.anchor_mode = AnchorMode::Centered;
  else if (mode == "trailing")
    t.anchor_mode = AnchorMode::Trailing;
  else
    throw ParseError("unknown anchor mode: " + mode);
  return t;
}

json config_to_json_obj(const NetConfig& config) {
  json j;
  j["task"] = task_name(config.task);
  j["num_classes"] = config.num_classes;
  j["init_scale"] = config.init_scale;
  j["radius_multiplier"] = config.radius_multiplier;
  json layers = json::array();
  for (const auto& lc : config.layers) {
    json l;
    l["kind"] = Network::kind_name(lc.kind);
    l["name"] = lc.name;
    l["in"] = lc.in_channels;
    l["out"] = lc.out_channels;
    if (lc.kind == LayerKind::PstConv || lc.kind == LayerKind::PstTransConv) {
      l["mid"] = lc.mid_channels;
      l["bias"] = lc.bias;
      l["tube"] = tube_to_json(lc.tube);
      if (lc.kind == LayerKind::PstConv) l["form"] = form_name(lc.spatial_form);
      if (lc.kind == LayerKind::PstTransConv) l["coords_from"] = lc.coords_from;
    }
    if (lc.kind == LayerKind::FullyConnected || lc.kind == LayerKind::Conv1d) l["bias"] = lc.bias;
    layers.push_back(std::move(l));
  }
  j["layers"] = std::move(layers);
  json skips = json::array();
  for (const auto& s : config.skips) skips.push_back({s[0], s[1]});
  j["skips"] = std::move(skips);
  return j;
}

NetConfig config_from_json_obj(const json& j) {
  if (j.contains("preset")) {
    const std::string preset = j.at("preset").get<std::string>();
    if (preset == "classification") {
      ClassificationNetOptions o;
      if (j.contains("widths")) o.widths = j.at("widths").get<std::vector<int>>();
      if (j.contains("mid_widths")) o.mid_widths = j.at("mid_widths").get<std::vector<int>>();
      o.neighbors = j.value("neighbors", o.neighbors);
      o.radius_multiplier = j.value("radius_multiplier", o.radius_multiplier);
      o.init_scale = j.value("init_scale", o.init_scale);
      o.bias = j.value("bias", o.bias);
      return build_classification_net(j.at("num_classes").get<int>(),
                                      j.at("base_radius").get<double>(), o);
    }
    if (preset == "segmentation") {
      SegmentationNetOptions o;
      if (j.contains("encoder_widths")) o.encoder_widths = j.at("encoder_widths").get<std::vector<int>>();
      if (j.contains("decoder_widths")) o.decoder_widths = j.at("decoder_widths").get<std::vector<int>>();
      o.input_channels = j.value("input_channels", o.input_channels);
      o.neighbors = j.value("neighbors", o.neighbors);
      o.radius_multiplier = j.value("radius_multiplier", o.radius_multiplier);
      o.init_scale = j.value("init_scale", o.init_scale);
      o.bias = j.value("bias", o.bias);
      return build_segmentation_net(j.at("num_classes").get<int>(),
                                    j.at("base_radius").get<double>(), o);
    }
    throw ParseError("unknown preset: " + preset);
  }

  NetConfig config;
  config.task = task_from(j.at("task").get<std::string>());
  config.num_classes = j.at("num_classes").get<int>();
  config.init_scale = j.value("init_scale", 1.0);
  config.radius_multiplier = j.value("radius_multiplier", 2.0);
  for (const auto& l : j.at("layers")) {
    LayerConfig lc;
    lc.kind = kind_from(l.at("kind").get<std::string>());
    lc.name = l.at("name").get<std::string>();
    lc.in_channels = l.at("in").get<int>();
    lc.out_channels = l.at("out").get<int>();
    if (lc.kind == LayerKind::PstConv || lc.kind == LayerKind::PstTransConv) {
      lc.mid_channels = l.value("mid", lc.out_channels);
      lc.bias = l.value("bias", true);
      lc.tube = tube_from_json(l.at("tube"));
      if (lc.kind == LayerKind::PstConv && l.contains("form"))
        lc.spatial_form = form_from(l.at("form").get<std::string>());
      if (lc.kind == LayerKind::PstTransConv) lc.coords_from = l.at("coords_from").get<int>();
    }
    if (lc.kind == LayerKind::FullyConnected || lc.kind == LayerKind::Conv1d)
      lc.bias = l.value("bias", true);
    config.layers.push_back(std::move(lc));
  }
  if (j.contains("skips")) {
    for (const auto& s : j.at("skips"))
      config.skips.push_back({s.at(0).get<int>(), s.at(1).get<int>()});
  }
  config.validate();
  return config;
}

}  // namespace

std::string net_config_to_json(const NetConfig& config) { return config_to_json_obj(config).dump(2); }

NetConfig net_config_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("config JSON: ") + e.what());
  }
  try {
    return config_from_json_obj(j);
  } catch (const json::exception& e) {
    throw ParseError(std::string("config JSON: ") + e.what());
  }
}

NetConfig load_net_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return net_config_from_json(text);
}

void save_net_config(const std::string& path, const NetConfig& config) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("save_net_config: cannot open " + path);
  out << net_config_to_json(config) << "\n";
}

namespace {

constexpr char kCheckpointMagic[8] = {'P', 'S', 'T', 'C', 'K', 'P', 'T', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_f64(std::string& out, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(out, v);
}

double get_f64(const unsigned char* p) {
  const std::uint64_t v = get_u64(p);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

}  // namespace

void save_checkpoint(const std::string& path, Network& net) {
  const auto tensors = net.tensors();
  json manifest;
  manifest["config"] = json::parse(net_config_to_json(net.config()));
  json entries = json::array();
  for (const auto& t : tensors) {
    json e;
    e["name"] = t.name;
    e["shape"] = t.shape;
    e["trainable"] = t.trainable;
    entries.push_back(std::move(e));
  }
  manifest["tensors"] = std::move(entries);
  const std::string manifest_text = manifest.dump();

  std::string buf;
  buf.append(kCheckpointMagic, 8);
  put_u64(buf, manifest_text.size());
  buf += manifest_text;
  for (const auto& t : tensors)
    for (Index i = 0; i < t.size(); ++i) put_f64(buf, t.data[i]);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Network load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw ParseError(path + ": not a checkpoint file");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t manifest_len = get_u64(p + 8);
  if (bytes.size() < 16 + manifest_len) throw ParseError(path + ": truncated manifest");

  json manifest;
  try {
    manifest = json::parse(bytes.substr(16, manifest_len));
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }

  Network net(net_config_from_json(manifest.at("config").dump()));
  auto tensors = net.tensors();
  const auto& entries = manifest.at("tensors");
  if (entries.size() != tensors.size()) throw ParseError(path + ": tensor list mismatch");

  std::size_t off = 16 + manifest_len;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto& t = tensors[i];
    const auto& e = entries[i];
    if (e.at("name").get<std::string>() != t.name)
      throw ParseError(path + ": tensor name mismatch at " + t.name);
    const auto shape = e.at("shape").get<std::vector<Index>>();
    if (shape != t.shape) throw ParseError(path + ": tensor shape mismatch at " + t.name);
    if (off + static_cast<std::size_t>(t.size()) * 8 > bytes.size())
      throw ParseError(path + ": truncated payload");
    for (Index k = 0; k < t.size(); ++k, off += 8) t.data[k] = get_f64(p + off);
  }
  if (off != bytes.size()) throw ParseError(path + ": payload size does not match the manifest");
  return net;
}

}  // namespace pstconv
