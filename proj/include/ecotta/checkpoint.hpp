#pragma once

#include <string>

#include "ecotta/net.hpp"

namespace ecotta::ckpt {

// Binary container: magic "ECOTTA1", version, model metadata (classes, K,
// variant, kernel, partition plan), an entry table (name, shape, offset) and
// little-endian f32 payloads. Save -> load is bitwise identity.
void save_checkpoint(net::EcoModel& eco, const std::string& path);
net::EcoModel load_checkpoint(const std::string& path);

}  // namespace ecotta::ckpt
