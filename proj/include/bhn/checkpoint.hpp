#pragma once

#include <string>
#include <utility>
#include <vector>

#include "bhn/optim.hpp"
#include "bhn/tensor.hpp"

namespace bhn {

/// BHNC checkpoint file:
///   magic "BHNC", u32 version=1, u32 count,
///   per parameter: u16 name_len, utf-8 name, u8 rank, u32 dims..., f32 data...
/// All integers and floats little-endian.
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor>>& params);

std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path);

/// Convenience for a parameter list gathered from a model.
void save_checkpoint(const std::string& path, const std::vector<Parameter*>& params);
void load_checkpoint(const std::string& path, const std::vector<Parameter*>& params);

}  // namespace bhn
