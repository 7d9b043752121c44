#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "unitmod/tensor.hpp"

UNITMOD_BEGIN_NAMESPACE

/// Reads an 8-bit PNG as a [3,H,W] tensor in [0,1]. Gray and alpha images
/// are expanded/stripped to RGB.
Tensor read_png(const std::filesystem::path& path);

/// Writes a [3,H,W] (or [1,3,H,W]) tensor as 8-bit RGB, clipping to [0,1].
void write_png(const std::filesystem::path& path, const Tensor& image);

/// Maps a single plane of values in [0,1] to a blue-to-yellow false-color
/// [3,H,W] image.
Tensor false_color(const Tensor& plane);

/// Rounds to the nearest 8-bit level, as a PNG round trip would.
Tensor quantize8(const Tensor& image);

UNITMOD_END_NAMESPACE
