#include "aop/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace aop {

namespace {

constexpr std::uint8_t kTensorVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>(v >> 8));
}
void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  Reader(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError(what_ + ": truncated file");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint8_t>(bytes_[pos_]) | (static_cast<std::uint8_t>(bytes_[pos_ + 1]) << 8);
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  void magic(const char* m) {
    need(4);
    if (bytes_.compare(pos_, 4, m) != 0) throw IoError(what_ + ": bad magic, expected " + m);
    pos_ += 4;
  }
  void finish() const {
    if (pos_ != bytes_.size()) throw IoError(what_ + ": trailing bytes");
  }

 private:
  const std::string& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

std::string encode_tensor(const Tensor<float>& t) {
  if (t.rank() > 255) throw DimensionError("tensor rank exceeds container limit");
  std::string out = "AOPT";
  out.push_back(static_cast<char>(kTensorVersion));
  out.push_back(static_cast<char>(t.rank()));
  for (int e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
  out.reserve(out.size() + 4 * t.numel());
  for (float v : t.data()) put_f32(out, v);
  return out;
}

Tensor<float> decode_tensor(const std::string& bytes) {
  Reader r(bytes, "tensor");
  r.magic("AOPT");
  const std::uint8_t version = r.u8();
  if (version != kTensorVersion) throw IoError("tensor: unsupported version " + std::to_string(version));
  const int rank = r.u8();
  Shape shape(rank);
  for (auto& e : shape) e = static_cast<int>(r.u32());
  std::vector<float> data(shape_numel(shape));
  r.need(4 * data.size());
  for (auto& v : data) v = r.f32();
  r.finish();
  return Tensor<float>::from_data(std::move(shape), std::move(data));
}

void write_tensor(const std::string& path, const Tensor<float>& t) { write_file(path, encode_tensor(t)); }
Tensor<float> read_tensor(const std::string& path) { return decode_tensor(read_file(path)); }

void write_point_cloud(const std::string& path, const PointCloud& pc) {
  std::string out = "AOPC";
  put_u32(out, static_cast<std::uint32_t>(pc.size()));
  for (const auto& p : pc) {
    put_f32(out, p.x);
    put_f32(out, p.y);
    put_f32(out, p.z);
    put_f32(out, p.intensity);
  }
  write_file(path, out);
}

PointCloud read_point_cloud(const std::string& path) {
  const std::string bytes = read_file(path);
  Reader r(bytes, path);
  r.magic("AOPC");
  PointCloud pc(r.u32());
  r.need(16 * pc.size());
  for (auto& p : pc) {
    p.x = r.f32();
    p.y = r.f32();
    p.z = r.f32();
    p.intensity = r.f32();
  }
  r.finish();
  return pc;
}

void write_labels(const std::string& path, const std::vector<PointLabel>& labels) {
  std::string out;
  put_u32(out, static_cast<std::uint32_t>(labels.size()));
  for (const auto& l : labels) {
    put_u16(out, l.semantic);
    put_u32(out, l.instance);
  }
  write_file(path, out);
}

std::vector<PointLabel> read_labels(const std::string& path) {
  const std::string bytes = read_file(path);
  Reader r(bytes, path);
  std::vector<PointLabel> labels(r.u32());
  r.need(6 * labels.size());
  for (auto& l : labels) {
    l.semantic = r.u16();
    l.instance = r.u32();
  }
  r.finish();
  return labels;
}

void write_pgm(const std::string& path, int width, int height, const std::vector<std::uint8_t>& pixels) {
  if (width <= 0 || height <= 0 || pixels.size() != static_cast<std::size_t>(width) * height) {
    throw DimensionError("write_pgm: pixel count does not match " + std::to_string(width) + "x" + std::to_string(height));
  }
  std::string bytes = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  bytes.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
  write_file(path, bytes);
}

}  // namespace aop
