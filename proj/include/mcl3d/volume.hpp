#pragma once

#include <array>
#include <optional>
#include <string>

#include "mcl3d/tensor.hpp"

namespace mcl3d {

// Orientation code: one letter per array axis giving the anatomical
// direction that axis points toward (R/L, A/P, S/I). "RAS" is canonical.
bool orientation_valid(const std::string& code);

// A 3D scan with spacing (mm/voxel), orientation, modality label and an
// optional brain mask of identical shape.
struct Volume {
  Tensor data;  // shape [n0, n1, n2], axis 2 fastest
  std::array<double, 3> spacing{1, 1, 1};
  std::string orientation = "RAS";
  std::string modality;
  std::optional<Tensor> brain_mask;  // 0/1 values

  int64_t dim(int i) const { return data.dim(i); }

  void validate() const;

  // data != 0 fallback used when no explicit mask was supplied.
  Tensor derive_mask_nonzero() const;
};

// NIfTI-1 single-file I/O; ".nii.gz" is handled transparently.
Volume read_nifti(const std::string& path);
void write_nifti(const std::string& path, const Volume& v);

// Raw fallback format for tests: magic + shape + spacing + orientation +
// modality + float32 payload.
Volume read_raw_volume(const std::string& path);
void write_raw_volume(const std::string& path, const Volume& v);

Volume read_volume(const std::string& path);  // dispatch on extension
void write_volume(const std::string& path, const Volume& v);

}  // namespace mcl3d
