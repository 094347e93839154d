#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aop/tensor.hpp"

namespace aop {

/// Tensor container: "AOPT", u8 version, u8 rank, u32 LE extents, f32 LE payload.
void write_tensor(const std::string& path, const Tensor<float>& t);
Tensor<float> read_tensor(const std::string& path);
std::string encode_tensor(const Tensor<float>& t);
Tensor<float> decode_tensor(const std::string& bytes);

struct Point {
  float x = 0, y = 0, z = 0, intensity = 0;
};
using PointCloud = std::vector<Point>;

struct PointLabel {
  std::uint16_t semantic = 0;
  std::uint32_t instance = 0;
};

/// Point-cloud file: "AOPC", u32 N, then N x (x, y, z, intensity) f32.
void write_point_cloud(const std::string& path, const PointCloud& pc);
PointCloud read_point_cloud(const std::string& path);

/// Label sidecar: u32 N, then N x (u16 semantic, u32 instance).
void write_labels(const std::string& path, const std::vector<PointLabel>& labels);
std::vector<PointLabel> read_labels(const std::string& path);

/// Binary 8-bit grayscale PGM (P5).
void write_pgm(const std::string& path, int width, int height, const std::vector<std::uint8_t>& pixels);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

}  // namespace aop
