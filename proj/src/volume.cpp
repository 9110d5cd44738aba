#include "mcl3d/volume.hpp"

#include <cstdio>
#include <cstring>
#include <stdexcept>

namespace mcl3d {

bool orientation_valid(const std::string& code) {
  if (code.size() != 3) return false;
  auto group = [](char c) -> int {
    switch (c) {
      case 'R':
      case 'L':
        return 0;
      case 'A':
      case 'P':
        return 1;
      case 'S':
      case 'I':
        return 2;
      default:
        return -1;
    }
  };
  int seen[3] = {0, 0, 0};
  for (char c : code) {
    int g = group(c);
    if (g < 0) return false;
    seen[g]++;
  }
  return seen[0] == 1 && seen[1] == 1 && seen[2] == 1;
}

void Volume::validate() const {
  if (data.ndim() != 3) throw std::invalid_argument("Volume: data must be 3D");
  for (double s : spacing)
    if (!(s > 0)) throw std::invalid_argument("Volume: spacing must be positive");
  if (!orientation_valid(orientation))
    throw std::invalid_argument("Volume: invalid orientation code '" + orientation + "'");
  if (brain_mask && !brain_mask->same_shape(data))
    throw std::invalid_argument("Volume: mask shape differs from data shape");
}

Tensor Volume::derive_mask_nonzero() const {
  Tensor m(data.shape);
  for (int64_t i = 0; i < data.numel(); ++i) m[i] = data[i] != 0.f ? 1.f : 0.f;
  return m;
}

namespace {

std::string ext_of(const std::string& path) {
  if (path.size() > 7 && path.compare(path.size() - 7, 7, ".nii.gz") == 0) return ".nii.gz";
  auto p = path.rfind('.');
  return p == std::string::npos ? "" : path.substr(p);
}

constexpr char kRawMagic[8] = {'M', 'C', 'L', '3', 'D', 'V', 'O', 'L'};

}  // namespace

void write_raw_volume(const std::string& path, const Volume& v) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  std::fwrite(kRawMagic, 1, 8, f);
  int64_t shape[3] = {v.dim(0), v.dim(1), v.dim(2)};
  std::fwrite(shape, sizeof(int64_t), 3, f);
  std::fwrite(v.spacing.data(), sizeof(double), 3, f);
  std::fwrite(v.orientation.data(), 1, 3, f);
  uint32_t mlen = static_cast<uint32_t>(v.modality.size());
  std::fwrite(&mlen, sizeof(uint32_t), 1, f);
  std::fwrite(v.modality.data(), 1, mlen, f);
  std::fwrite(v.data.ptr(), sizeof(float), static_cast<size_t>(v.data.numel()), f);
  std::fclose(f);
}

Volume read_raw_volume(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open " + path);
  char magic[8];
  if (std::fread(magic, 1, 8, f) != 8 || std::memcmp(magic, kRawMagic, 8) != 0) {
    std::fclose(f);
    throw std::runtime_error(path + ": not a raw volume file");
  }
  int64_t shape[3];
  Volume v;
  auto need = [&](void* dst, size_t sz, size_t n) {
    if (std::fread(dst, sz, n, f) != n) {
      std::fclose(f);
      throw std::runtime_error(path + ": truncated raw volume");
    }
  };
  need(shape, sizeof(int64_t), 3);
  need(v.spacing.data(), sizeof(double), 3);
  char ori[3];
  need(ori, 1, 3);
  v.orientation.assign(ori, 3);
  uint32_t mlen = 0;
  need(&mlen, sizeof(uint32_t), 1);
  v.modality.resize(mlen);
  if (mlen) need(v.modality.data(), 1, mlen);
  v.data = Tensor({shape[0], shape[1], shape[2]});
  size_t n = static_cast<size_t>(v.data.numel());
  if (std::fread(v.data.ptr(), sizeof(float), n, f) != n) {
    std::fclose(f);
    throw std::runtime_error(path + ": truncated payload");
  }
  std::fclose(f);
  v.validate();
  return v;
}

Volume read_volume(const std::string& path) {
  auto e = ext_of(path);
  if (e == ".nii" || e == ".nii.gz") return read_nifti(path);
  if (e == ".mvol") return read_raw_volume(path);
  throw std::invalid_argument("unsupported volume format: " + path);
}

void write_volume(const std::string& path, const Volume& v) {
  auto e = ext_of(path);
  if (e == ".nii" || e == ".nii.gz")
    write_nifti(path, v);
  else if (e == ".mvol")
    write_raw_volume(path, v);
  else
    throw std::invalid_argument("unsupported volume format: " + path);
}

}  // namespace mcl3d
