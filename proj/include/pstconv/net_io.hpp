#pragma once

#include <string>

#include "pstconv/net.hpp"

namespace pstconv {

/// NetConfig <-> JSON. The document either lists layers explicitly or names a
/// preset ("classification" / "segmentation") with builder arguments; see the
/// README for the schema.
std::string net_config_to_json(const NetConfig& config);
NetConfig net_config_from_json(const std::string& json_text);
NetConfig load_net_config(const std::string& path);
void save_net_config(const std::string& path, const NetConfig& config);

/// Flat binary checkpoint: magic "PSTCKPT1", a JSON manifest (embedded config
/// plus tensor names/shapes) and the float64 payload in manifest order.
void save_checkpoint(const std::string& path, Network& net);
Network load_checkpoint(const std::string& path);

}  // namespace pstconv
