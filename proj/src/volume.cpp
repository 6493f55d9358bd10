// SPDX-License-Identifier: Apache-2.0
#include "tprune/volume.hpp"

#include <string>

namespace tprune {

void VolumeSpec::validate() const {
  if (patch == 0 || stride == 0) throw ConfigError("patch and stride must be positive");
  if (depth == 0 || height == 0 || width == 0) throw ConfigError("volume extents must be positive");
  if (depth % patch || height % patch || width % patch) {
    throw ConfigError("volume " + std::to_string(depth) + "x" + std::to_string(height) + "x" +
                      std::to_string(width) + " not divisible by patch " + std::to_string(patch));
  }
  if ((height / patch) % stride || (width / patch) % stride) {
    throw ConfigError("in-plane patch grid not divisible by merge stride " + std::to_string(stride));
  }
}

std::vector<TokenPosition> positional_indices(const VolumeSpec& spec, std::size_t n_instruction) {
  spec.validate();
  std::vector<TokenPosition> out;
  out.reserve(spec.n_visual() + n_instruction);
  for (std::uint32_t d = 0; d < spec.grid_depth(); ++d)
    for (std::uint32_t r = 0; r < spec.grid_rows(); ++r)
      for (std::uint32_t c = 0; c < spec.grid_cols(); ++c) {
        TokenPosition p;
        p.visual = true;
        p.grid = {d, r, c};
        p.seq = static_cast<std::uint32_t>(out.size());
        out.push_back(p);
      }
  const auto nv = static_cast<std::uint32_t>(spec.n_visual());
  for (std::uint32_t t = 0; t < n_instruction; ++t) {
    TokenPosition p;
    p.seq = nv + t;
    out.push_back(p);
  }
  return out;
}

std::vector<TokenPosition> drop_positions(const std::vector<TokenPosition>& positions,
                                          const std::vector<std::size_t>& keep_visual,
                                          std::size_t n_visual) {
  std::vector<TokenPosition> out;
  out.reserve(keep_visual.size() + positions.size() - n_visual);
  for (auto j : keep_visual) out.push_back(positions.at(j));
  for (std::size_t i = n_visual; i < positions.size(); ++i) out.push_back(positions[i]);
  return out;
}

Tensor extract_patches(const Tensor& volume, const VolumeSpec& spec) {
  spec.validate();
  if (volume.shape() != std::vector<std::size_t>{spec.depth, spec.height, spec.width}) {
    throw ShapeError("volume shape " + shape_string(volume.shape()) + " does not match spec");
  }
  const auto p = spec.patch;
  const auto edge = p * spec.stride;
  const auto n = spec.n_visual();
  Tensor out({n, spec.token_voxels()});
  const auto src = volume.data();
  std::size_t token = 0;
  for (std::size_t gd = 0; gd < spec.grid_depth(); ++gd)
    for (std::size_t gr = 0; gr < spec.grid_rows(); ++gr)
      for (std::size_t gc = 0; gc < spec.grid_cols(); ++gc, ++token) {
        auto dst = out.row(token);
        std::size_t k = 0;
        for (std::size_t z = gd * p; z < (gd + 1) * p; ++z)
          for (std::size_t y = gr * edge; y < (gr + 1) * edge; ++y) {
            const std::size_t base = (z * spec.height + y) * spec.width + gc * edge;
            for (std::size_t x = 0; x < edge; ++x) dst[k++] = src[base + x];
          }
      }
  return out;
}

Tensor patchify(const Tensor& volume, const VolumeSpec& spec, const LinearMap& embed) {
  Tensor tokens = matmul(extract_patches(volume, spec), embed.weight);
  add_row_vector(tokens, embed.bias);
  return tokens;
}

}  // namespace tprune
