// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "tprune/tensor.hpp"

namespace tprune {

/// Voxel extents of a volume plus the patch edge and in-plane merge stride.
/// Depth is patchified but never merged.
struct VolumeSpec {
  std::size_t depth = 28;
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t patch = 14;
  std::size_t stride = 1;

  /// Throws ConfigError on indivisible extents.
  void validate() const;

  std::size_t grid_depth() const { return depth / patch; }
  std::size_t grid_rows() const { return height / patch / stride; }
  std::size_t grid_cols() const { return width / patch / stride; }
  std::size_t n_visual() const { return grid_depth() * grid_rows() * grid_cols(); }
  /// Voxels feeding one merged visual token.
  std::size_t token_voxels() const { return patch * (patch * stride) * (patch * stride); }

  friend bool operator==(const VolumeSpec&, const VolumeSpec&) = default;
};

struct TokenPosition {
  bool visual = false;
  std::array<std::uint32_t, 3> grid{};  // (depth, row, col) for visual tokens
  std::uint32_t seq = 0;                // sequential index for instruction tokens

  friend bool operator==(const TokenPosition&, const TokenPosition&) = default;
};

/// Visual tokens enumerate the grid depth-major; instruction tokens continue
/// sequentially after the visual block.
std::vector<TokenPosition> positional_indices(const VolumeSpec& spec, std::size_t n_instruction);

/// Drops the positions of removed visual tokens; survivors keep their values.
std::vector<TokenPosition> drop_positions(const std::vector<TokenPosition>& positions,
                                          const std::vector<std::size_t>& keep_visual,
                                          std::size_t n_visual);

/// Raw voxels of each merged token: [N_v, token_voxels].
Tensor extract_patches(const Tensor& volume, const VolumeSpec& spec);

/// Linear patch embedding: weight [token_voxels, d], bias [d].
struct LinearMap {
  Tensor weight;
  Tensor bias;
};
Tensor patchify(const Tensor& volume, const VolumeSpec& spec, const LinearMap& embed);

}  // namespace tprune
