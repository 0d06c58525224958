#include "mpbm/data.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mpbm {

LabeledBatch Dataset::gather(const std::vector<size_t>& rows) const {
  size_t rowlen = inputs.size() / size();
  size_t K = num_classes();
  std::vector<size_t> bshape = inputs.shape();
  bshape[0] = rows.size();
  Tensor bx(bshape);
  Tensor by({rows.size(), K});
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= size()) throw std::runtime_error("gather: row index out of range");
    std::memcpy(bx.data() + i * rowlen, inputs.data() + rows[i] * rowlen, rowlen * sizeof(double));
    std::memcpy(by.data() + i * K, labels.data() + rows[i] * K, K * sizeof(double));
  }
  return {std::move(bx), std::move(by)};
}

// ---------------------------------------------------------------------------
// sha256

namespace {

struct Sha256 {
  uint32_t h[8] = {0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a,
                   0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19};
  uint64_t total = 0;
  unsigned char buf[64];
  size_t fill = 0;

  static uint32_t rotr(uint32_t x, int n) { return (x >> n) | (x << (32 - n)); }

  void block(const unsigned char* p) {
    static const uint32_t K[64] = {
        0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4,
        0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe,
        0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f,
        0x4a7484aa, 0x5cb0a9dc, 0x76f988da, 0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7,
        0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc,
        0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
        0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070, 0x19a4c116,
        0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
        0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7,
        0xc67178f2};
    uint32_t w[64];
    for (int i = 0; i < 16; ++i)
      w[i] = (uint32_t(p[4 * i]) << 24) | (uint32_t(p[4 * i + 1]) << 16) |
             (uint32_t(p[4 * i + 2]) << 8) | uint32_t(p[4 * i + 3]);
    for (int i = 16; i < 64; ++i) {
      uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
      uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
      w[i] = w[i - 16] + s0 + w[i - 7] + s1;
    }
    uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4], f = h[5], g = h[6], hh = h[7];
    for (int i = 0; i < 64; ++i) {
      uint32_t S1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
      uint32_t ch = (e & f) ^ (~e & g);
      uint32_t t1 = hh + S1 + ch + K[i] + w[i];
      uint32_t S0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
      uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
      uint32_t t2 = S0 + maj;
      hh = g; g = f; f = e; e = d + t1;
      d = c; c = b; b = a; a = t1 + t2;
    }
    h[0] += a; h[1] += b; h[2] += c; h[3] += d;
    h[4] += e; h[5] += f; h[6] += g; h[7] += hh;
  }

  void update(const unsigned char* p, size_t n) {
    total += n;
    while (n > 0) {
      size_t take = std::min(n, 64 - fill);
      std::memcpy(buf + fill, p, take);
      fill += take;
      p += take;
      n -= take;
      if (fill == 64) {
        block(buf);
        fill = 0;
      }
    }
  }

  std::string hex() {
    uint64_t bits = total * 8;
    unsigned char pad = 0x80;
    update(&pad, 1);
    unsigned char zero = 0;
    while (fill != 56) update(&zero, 1);
    unsigned char len[8];
    for (int i = 0; i < 8; ++i) len[i] = static_cast<unsigned char>((bits >> (8 * (7 - i))) & 0xff);
    update(len, 8);
    static const char* digits = "0123456789abcdef";
    std::string out;
    out.reserve(64);
    for (uint32_t v : h)
      for (int i = 3; i >= 0; --i) {
        unsigned char byte = (v >> (8 * i)) & 0xff;
        out.push_back(digits[byte >> 4]);
        out.push_back(digits[byte & 0xf]);
      }
    return out;
  }
};

}  // namespace

std::string sha256_bytes(const void* data, size_t len) {
  Sha256 s;
  s.update(static_cast<const unsigned char*>(data), len);
  return s.hex();
}

std::string sha256_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("sha256: cannot open '" + path + "'");
  Sha256 s;
  char chunk[1 << 16];
  while (f) {
    f.read(chunk, sizeof(chunk));
    s.update(reinterpret_cast<const unsigned char*>(chunk), static_cast<size_t>(f.gcount()));
  }
  return s.hex();
}

// ---------------------------------------------------------------------------
// IDX

IdxFile read_idx(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_idx: cannot open '" + path + "'");
  std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (raw.size() < 4) throw std::runtime_error("load_idx: '" + path + "' too short for a header");
  const auto* p = reinterpret_cast<const unsigned char*>(raw.data());
  auto be32 = [&](size_t off) {
    return (uint32_t(p[off]) << 24) | (uint32_t(p[off + 1]) << 16) | (uint32_t(p[off + 2]) << 8) |
           uint32_t(p[off + 3]);
  };
  IdxFile out;
  out.magic = be32(0);
  uint32_t dtype = (out.magic >> 8) & 0xff;
  uint32_t ndims = out.magic & 0xff;
  if ((out.magic >> 16) != 0 || dtype != 0x08 || ndims == 0 || ndims > 4)
    throw std::runtime_error("load_idx: bad magic in '" + path + "'");
  if (raw.size() < 4 + 4 * static_cast<size_t>(ndims))
    throw std::runtime_error("load_idx: truncated dimension table in '" + path + "'");
  size_t total = 1;
  for (uint32_t i = 0; i < ndims; ++i) {
    out.dims.push_back(be32(4 + 4 * i));
    total *= out.dims.back();
  }
  size_t off = 4 + 4 * ndims;
  if (raw.size() != off + total)
    throw std::runtime_error("load_idx: '" + path + "' payload is " +
                             std::to_string(raw.size() - off) + " bytes, header promises " +
                             std::to_string(total));
  out.payload.assign(p + off, p + raw.size());
  return out;
}

void write_idx(const std::string& path, const IdxFile& file) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_idx: cannot open '" + path + "' for writing");
  auto put_be32 = [&](uint32_t v) {
    char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                 static_cast<char>(v)};
    f.write(b, 4);
  };
  put_be32(file.magic);
  for (uint32_t d : file.dims) put_be32(d);
  f.write(reinterpret_cast<const char*>(file.payload.data()),
          static_cast<std::streamsize>(file.payload.size()));
  if (!f) throw std::runtime_error("write_idx: short write to '" + path + "'");
}

namespace {

// bilinear resample with half-pixel centers; exact copy when sizes match
void resize_bilinear(const double* src, size_t sh, size_t sw, double* dst, size_t dh, size_t dw) {
  for (size_t y = 0; y < dh; ++y) {
    double fy = (static_cast<double>(y) + 0.5) * static_cast<double>(sh) / static_cast<double>(dh) -
                0.5;
    double cy = std::min(std::max(fy, 0.0), static_cast<double>(sh - 1));
    size_t y0 = static_cast<size_t>(cy);
    size_t y1 = std::min(y0 + 1, sh - 1);
    double wy = cy - static_cast<double>(y0);
    for (size_t x = 0; x < dw; ++x) {
      double fx = (static_cast<double>(x) + 0.5) * static_cast<double>(sw) /
                      static_cast<double>(dw) -
                  0.5;
      double cx = std::min(std::max(fx, 0.0), static_cast<double>(sw - 1));
      size_t x0 = static_cast<size_t>(cx);
      size_t x1 = std::min(x0 + 1, sw - 1);
      double wx = cx - static_cast<double>(x0);
      double top = src[y0 * sw + x0] * (1.0 - wx) + src[y0 * sw + x1] * wx;
      double bot = src[y1 * sw + x0] * (1.0 - wx) + src[y1 * sw + x1] * wx;
      dst[y * dw + x] = top * (1.0 - wy) + bot * wy;
    }
  }
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const std::vector<size_t>& input_shape, size_t num_classes,
                 const std::string& name, const std::string& domain) {
  IdxFile images = read_idx(images_path);
  IdxFile labels = read_idx(labels_path);
  if (images.dims.size() != 3)
    throw std::runtime_error("load_idx: '" + images_path + "' is not an image file (ndims " +
                             std::to_string(images.dims.size()) + ")");
  if (labels.dims.size() != 1)
    throw std::runtime_error("load_idx: '" + labels_path + "' is not a label file");
  if (images.dims[0] != labels.dims[0])
    throw std::runtime_error("load_idx: " + std::to_string(images.dims[0]) + " images vs " +
                             std::to_string(labels.dims[0]) + " labels");
  if (input_shape.size() != 3)
    throw std::runtime_error("load_idx: input shape must be {C,H,W}, got " +
                             shape_to_string(input_shape));
  size_t N = images.dims[0], sh = images.dims[1], sw = images.dims[2];
  size_t C = input_shape[0], dh = input_shape[1], dw = input_shape[2];

  Dataset d;
  d.name = name;
  d.domain = domain;
  d.inputs = Tensor({N, C, dh, dw});
  d.labels = Tensor({N, num_classes});
  d.classes.resize(N);
  std::vector<double> gray(sh * sw), chan(dh * dw);
  for (size_t i = 0; i < N; ++i) {
    const uint8_t* px = images.payload.data() + i * sh * sw;
    for (size_t k = 0; k < sh * sw; ++k) gray[k] = static_cast<double>(px[k]) / 255.0;
    resize_bilinear(gray.data(), sh, sw, chan.data(), dh, dw);
    for (size_t c = 0; c < C; ++c)
      std::memcpy(d.inputs.data() + (i * C + c) * dh * dw, chan.data(),
                  dh * dw * sizeof(double));
    uint8_t lab = labels.payload[i];
    if (lab >= num_classes)
      throw std::runtime_error("load_idx: label " + std::to_string(lab) + " out of range for " +
                               std::to_string(num_classes) + " classes");
    d.classes[i] = lab;
    d.labels[i * num_classes + lab] = 1.0;
  }
  return d;
}

Dataset synth_blobs(size_t num_classes, size_t per_class, double separation, double sigma,
                    uint64_t seed, const std::string& name, const std::string& domain) {
  if (num_classes == 0 || per_class == 0 || separation <= 0.0 || sigma <= 0.0)
    throw std::runtime_error("synth_blobs: parameters must be positive");
  Rng rng(seed);
  size_t N = num_classes * per_class;
  Dataset d;
  d.name = name;
  d.domain = domain;
  d.inputs = Tensor({N, 2});
  d.labels = Tensor({N, num_classes});
  d.classes.resize(N);
  for (size_t k = 0; k < num_classes; ++k) {
    double ang = 2.0 * M_PI * static_cast<double>(k) / static_cast<double>(num_classes);
    double cx = 0.5 + separation * std::cos(ang);
    double cy = 0.5 + separation * std::sin(ang);
    for (size_t i = 0; i < per_class; ++i) {
      size_t r = k * per_class + i;
      double x = cx + sigma * rng.normal();
      double y = cy + sigma * rng.normal();
      d.inputs[r * 2] = std::min(1.0, std::max(0.0, x));
      d.inputs[r * 2 + 1] = std::min(1.0, std::max(0.0, y));
      d.classes[r] = static_cast<int>(k);
      d.labels[r * num_classes + k] = 1.0;
    }
  }
  return d;
}

namespace {

double cos_deg(double deg) {
  double m = std::fmod(std::abs(deg), 360.0);
  if (m == 0.0) return 1.0;
  if (m == 90.0 || m == 270.0) return 0.0;
  if (m == 180.0) return -1.0;
  return std::cos(deg * M_PI / 180.0);
}

double sin_deg(double deg) {
  double s = deg < 0.0 ? -1.0 : 1.0;
  double m = std::fmod(std::abs(deg), 360.0);
  if (m == 0.0 || m == 180.0) return 0.0;
  if (m == 90.0) return s;
  if (m == 270.0) return -s;
  return std::sin(deg * M_PI / 180.0);
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

// inverse-map one image plane through a 2x2 matrix + translation about center
void warp_plane(const double* src, size_t h, size_t w, double ia, double ib, double ic, double id,
                double tx, double ty, double* dst) {
  double cyc = (static_cast<double>(h) - 1.0) / 2.0;
  double cxc = (static_cast<double>(w) - 1.0) / 2.0;
  for (size_t y = 0; y < h; ++y)
    for (size_t x = 0; x < w; ++x) {
      double dy = static_cast<double>(y) - cyc - ty;
      double dx = static_cast<double>(x) - cxc - tx;
      double sy = ia * dy + ib * dx + cyc;
      double sx = ic * dy + id * dx + cxc;
      double v = 0.0;
      if (sy >= 0.0 && sx >= 0.0 && sy <= static_cast<double>(h - 1) &&
          sx <= static_cast<double>(w - 1)) {
        size_t y0 = static_cast<size_t>(sy), x0 = static_cast<size_t>(sx);
        size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
        double wy = sy - static_cast<double>(y0), wx = sx - static_cast<double>(x0);
        double top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
        double bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
        v = top * (1.0 - wy) + bot * wy;
      }
      dst[y * w + x] = v;
    }
}

}  // namespace

Dataset apply_shift(const Dataset& d, const ShiftSpec& s, const std::string& name) {
  Dataset out;
  out.name = name;
  out.domain = name;
  out.labels = d.labels;
  out.classes = d.classes;
  out.inputs = d.inputs;
  size_t N = d.size();
  bool is_image = d.inputs.ndim() == 4;
  bool is_plane = d.inputs.ndim() == 2 && d.inputs.cols() == 2;
  Rng rng(s.seed);

  if (s.kind == "intensity-invert") {
    // magnitude 1 flips around 0.5; magnitude 0 is the identity
    for (size_t i = 0; i < out.inputs.size(); ++i)
      out.inputs[i] = clamp01(d.inputs[i] + s.magnitude * (1.0 - 2.0 * d.inputs[i]));
    return out;
  }

  if (s.kind == "gaussian-noise") {
    for (size_t i = 0; i < out.inputs.size(); ++i)
      out.inputs[i] = clamp01(d.inputs[i] + s.magnitude * rng.normal());
    return out;
  }

  if (s.kind == "rotate") {
    double c = cos_deg(s.magnitude), n = sin_deg(s.magnitude);
    if (is_plane) {
      for (size_t i = 0; i < N; ++i) {
        double x = d.inputs[i * 2] - 0.5, y = d.inputs[i * 2 + 1] - 0.5;
        out.inputs[i * 2] = clamp01(c * x - n * y + 0.5);
        out.inputs[i * 2 + 1] = clamp01(n * x + c * y + 0.5);
      }
      return out;
    }
    if (!is_image) throw std::runtime_error("apply_shift: rotate unsupported for shape " +
                                            d.inputs.shape_str());
    size_t C = d.inputs.extent(1), H = d.inputs.extent(2), W = d.inputs.extent(3);
    if (H != W) throw std::runtime_error("apply_shift: rotate needs square images");
    // inverse rotation: sample source at R(-theta) of the output coordinate
    for (size_t i = 0; i < N; ++i)
      for (size_t ch = 0; ch < C; ++ch)
        warp_plane(d.inputs.data() + (i * C + ch) * H * W, H, W, c, n, -n, c, 0.0, 0.0,
                   out.inputs.data() + (i * C + ch) * H * W);
    return out;
  }

  if (s.kind == "affine-warp") {
    if (!is_image && !is_plane)
      throw std::runtime_error("apply_shift: affine-warp unsupported for shape " +
                               d.inputs.shape_str());
    double a = s.magnitude * (2.0 * rng.uniform() - 1.0);
    double b = s.magnitude * (2.0 * rng.uniform() - 1.0);
    double cpp = s.magnitude * (2.0 * rng.uniform() - 1.0);
    double dd = s.magnitude * (2.0 * rng.uniform() - 1.0);
    double tx = 0.25 * s.magnitude * (2.0 * rng.uniform() - 1.0);
    double ty = 0.25 * s.magnitude * (2.0 * rng.uniform() - 1.0);
    if (is_plane) {
      for (size_t i = 0; i < N; ++i) {
        double x = d.inputs[i * 2] - 0.5, y = d.inputs[i * 2 + 1] - 0.5;
        out.inputs[i * 2] = clamp01((1.0 + a) * x + b * y + tx + 0.5);
        out.inputs[i * 2 + 1] = clamp01(cpp * x + (1.0 + dd) * y + ty + 0.5);
      }
      return out;
    }
    size_t C = d.inputs.extent(1), H = d.inputs.extent(2), W = d.inputs.extent(3);
    double scale = static_cast<double>(std::min(H, W));
    for (size_t i = 0; i < N; ++i)
      for (size_t ch = 0; ch < C; ++ch)
        warp_plane(d.inputs.data() + (i * C + ch) * H * W, H, W, 1.0 + dd, cpp, b, 1.0 + a,
                   tx * scale, ty * scale, out.inputs.data() + (i * C + ch) * H * W);
    return out;
  }

  if (s.kind == "channel-drop") {
    if (!is_image) throw std::runtime_error("apply_shift: channel-drop unsupported for shape " +
                                            d.inputs.shape_str());
    size_t C = d.inputs.extent(1), plane = d.inputs.extent(2) * d.inputs.extent(3);
    size_t drop = rng.index(C);
    for (size_t i = 0; i < N; ++i)
      std::memset(out.inputs.data() + (i * C + drop) * plane, 0, plane * sizeof(double));
    return out;
  }

  throw std::runtime_error("apply_shift: unknown transform '" + s.kind + "'");
}

// ---------------------------------------------------------------------------
// manifests

namespace {

namespace fs = std::filesystem;

Dataset dataset_from_json(const nlohmann::json& j, const fs::path& base,
                          const std::vector<size_t>& input_shape, size_t num_classes);

Dataset idx_from_json(const nlohmann::json& j, const fs::path& base,
                      const std::vector<size_t>& input_shape, size_t num_classes) {
  std::string name = j.at("name").get<std::string>();
  fs::path images = base / j.at("images").get<std::string>();
  fs::path labels = base / j.at("labels").get<std::string>();
  for (const char* key : {"sha256_images", "sha256_labels"}) {
    if (!j.contains(key)) continue;
    fs::path p = std::strcmp(key, "sha256_images") == 0 ? images : labels;
    std::string want = j.at(key).get<std::string>();
    std::string got = sha256_file(p.string());
    if (got != want)
      throw std::runtime_error("manifest: checksum mismatch for '" + p.string() + "': expected " +
                               want + ", got " + got);
  }
  return load_idx(images.string(), labels.string(), input_shape, num_classes, name, name);
}

Dataset dataset_from_json(const nlohmann::json& j, const fs::path& base,
                          const std::vector<size_t>& input_shape, size_t num_classes) {
  std::string kind = j.at("kind").get<std::string>();
  if (kind == "idx") return idx_from_json(j, base, input_shape, num_classes);
  if (kind == "blobs") {
    size_t classes = j.at("classes").get<size_t>();
    if (classes != num_classes)
      throw std::runtime_error("manifest: blobs classes " + std::to_string(classes) +
                               " disagree with num_classes " + std::to_string(num_classes));
    return synth_blobs(classes, j.at("per_class").get<size_t>(),
                       j.at("separation").get<double>(), j.at("sigma").get<double>(),
                       j.at("seed").get<uint64_t>(), j.at("name").get<std::string>(),
                       j.at("name").get<std::string>());
  }
  if (kind == "shift") {
    Dataset baseset = dataset_from_json(j.at("base"), base, input_shape, num_classes);
    ShiftSpec spec;
    spec.kind = j.at("transform").get<std::string>();
    spec.magnitude = j.value("magnitude", 0.0);
    spec.seed = j.value("seed", uint64_t{0});
    return apply_shift(baseset, spec, j.at("name").get<std::string>());
  }
  throw std::runtime_error("manifest: unknown dataset kind '" + kind + "'");
}

}  // namespace

DomainSet load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("manifest: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const std::exception& e) {
    throw std::runtime_error("manifest: '" + path + "' is not valid JSON: " + e.what());
  }
  fs::path base = fs::path(path).parent_path();
  DomainSet ds;
  try {
    ds.name = j.at("name").get<std::string>();
    ds.input_shape = j.at("input_shape").get<std::vector<size_t>>();
    ds.num_classes = j.at("num_classes").get<size_t>();
    ds.source = dataset_from_json(j.at("source"), base, ds.input_shape, ds.num_classes);
    for (const auto& t : j.at("targets"))
      ds.targets.push_back(dataset_from_json(t, base, ds.input_shape, ds.num_classes));
  } catch (const nlohmann::json::out_of_range& e) {
    throw std::runtime_error("manifest: '" + path + "' missing field: " + e.what());
  }
  return ds;
}

}  // namespace mpbm
