#pragma once

#include <filesystem>

#include "mrus/volume.hpp"

namespace mrus::io {

namespace fs = std::filesystem;

/// SVOL: a text header (`<name>.svol`) next to a raw little-endian float32
/// data file, x-fastest voxel order.
void write_svol(const fs::path& header, const ScalarVolume& v);
ScalarVolume read_svol(const fs::path& header);

/// Masks use the same layout with uint8 voxels (0/1).
void write_mask(const fs::path& header, const BinaryMask& m);
BinaryMask read_mask(const fs::path& header);

/// ASCII cloud: '#'-prefixed header naming the frame, then one
/// "x y z nx ny nz" line per point (normals 0 0 0 when absent).
void write_cloud(const fs::path& path, const PointCloud& cloud);
PointCloud read_cloud(const fs::path& path);

/// Reads a whole file into a string; throws Io.
std::string read_text(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);

}  // namespace mrus::io
