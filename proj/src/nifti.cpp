#include <zlib.h>

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

#include "mcl3d/volume.hpp"

namespace mcl3d {

namespace {

#pragma pack(push, 1)
struct Nifti1Header {
  int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  int32_t extents;
  int16_t session_error;
  char regular;
  char dim_info;
  int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  int16_t intent_code;
  int16_t datatype;
  int16_t bitpix;
  int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  int16_t qform_code;
  int16_t sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)

static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

constexpr int16_t DT_UINT8 = 2, DT_INT16 = 4, DT_FLOAT32 = 16;

// RAS direction vector for an orientation letter.
void letter_dir(char c, double out[3]) {
  out[0] = out[1] = out[2] = 0;
  switch (c) {
    case 'R': out[0] = 1; break;
    case 'L': out[0] = -1; break;
    case 'A': out[1] = 1; break;
    case 'P': out[1] = -1; break;
    case 'S': out[2] = 1; break;
    case 'I': out[2] = -1; break;
    default: throw std::invalid_argument("bad orientation letter");
  }
}

char dir_letter(const double d[3]) {
  int k = 0;
  for (int i = 1; i < 3; ++i)
    if (std::abs(d[i]) > std::abs(d[k])) k = i;
  const char pos[3] = {'R', 'A', 'S'}, neg[3] = {'L', 'P', 'I'};
  return d[k] >= 0 ? pos[k] : neg[k];
}

}  // namespace

void write_nifti(const std::string& path, const Volume& v) {
  v.validate();
  Nifti1Header h;
  std::memset(&h, 0, sizeof(h));
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  // disk axis x is our fastest axis (2)
  h.dim[1] = static_cast<int16_t>(v.dim(2));
  h.dim[2] = static_cast<int16_t>(v.dim(1));
  h.dim[3] = static_cast<int16_t>(v.dim(0));
  for (int i = 4; i < 8; ++i) h.dim[i] = 1;
  h.datatype = DT_FLOAT32;
  h.bitpix = 32;
  h.pixdim[0] = 1.f;
  h.pixdim[1] = static_cast<float>(v.spacing[2]);
  h.pixdim[2] = static_cast<float>(v.spacing[1]);
  h.pixdim[3] = static_cast<float>(v.spacing[0]);
  h.vox_offset = 352.f;
  h.scl_slope = 1.f;
  h.xyzt_units = 2;  // millimetres
  h.sform_code = 1;
  std::strncpy(h.descrip, v.modality.c_str(), sizeof(h.descrip) - 1);
  double cols[3][3];  // cols[d] = world direction of disk axis d
  for (int d = 0; d < 3; ++d) {
    int our_axis = 2 - d;
    letter_dir(v.orientation[static_cast<size_t>(our_axis)], cols[d]);
    for (int i = 0; i < 3; ++i) cols[d][i] *= v.spacing[static_cast<size_t>(our_axis)];
  }
  for (int d = 0; d < 3; ++d) {
    h.srow_x[d] = static_cast<float>(cols[d][0]);
    h.srow_y[d] = static_cast<float>(cols[d][1]);
    h.srow_z[d] = static_cast<float>(cols[d][2]);
  }
  std::memcpy(h.magic, "n+1", 4);

  bool gz = path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
  const char pad[4] = {0, 0, 0, 0};
  if (gz) {
    gzFile f = gzopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("cannot open " + path);
    gzwrite(f, &h, sizeof(h));
    gzwrite(f, pad, 4);
    gzwrite(f, v.data.ptr(), static_cast<unsigned>(v.data.numel() * sizeof(float)));
    gzclose(f);
  } else {
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("cannot open " + path);
    std::fwrite(&h, sizeof(h), 1, f);
    std::fwrite(pad, 1, 4, f);
    std::fwrite(v.data.ptr(), sizeof(float), static_cast<size_t>(v.data.numel()), f);
    std::fclose(f);
  }
}

Volume read_nifti(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");  // reads plain files too
  if (!f) throw std::runtime_error("cannot open " + path);
  Nifti1Header h;
  if (gzread(f, &h, sizeof(h)) != sizeof(h)) {
    gzclose(f);
    throw std::runtime_error(path + ": truncated NIfTI header");
  }
  if (h.sizeof_hdr != 348 || std::strncmp(h.magic, "n+1", 3) != 0) {
    gzclose(f);
    throw std::runtime_error(path + ": not a NIfTI-1 file");
  }
  if (h.dim[0] < 3) {
    gzclose(f);
    throw std::runtime_error(path + ": expected a 3D image");
  }
  int64_t nx = h.dim[1], ny = h.dim[2], nz = h.dim[3];
  int64_t nvox = nx * ny * nz;

  Volume v;
  v.data = Tensor({nz, ny, nx});
  v.modality.assign(h.descrip, strnlen(h.descrip, sizeof(h.descrip)));

  if (h.sform_code > 0) {
    for (int d = 0; d < 3; ++d) {
      double col[3] = {h.srow_x[d], h.srow_y[d], h.srow_z[d]};
      double norm = std::sqrt(col[0] * col[0] + col[1] * col[1] + col[2] * col[2]);
      int our_axis = 2 - d;
      v.spacing[static_cast<size_t>(our_axis)] = norm > 0 ? norm : 1.0;
      v.orientation[static_cast<size_t>(our_axis)] = dir_letter(col);
    }
  } else {
    v.spacing = {h.pixdim[3] > 0 ? h.pixdim[3] : 1.0, h.pixdim[2] > 0 ? h.pixdim[2] : 1.0,
                 h.pixdim[1] > 0 ? h.pixdim[1] : 1.0};
    v.orientation = "SAR";  // disk x,y,z = R,A,S with identity affine
  }
  if (!orientation_valid(v.orientation))
    throw std::runtime_error(path + ": affine is not axis-aligned enough to orient");

  // skip to the payload
  int64_t off = static_cast<int64_t>(h.vox_offset);
  for (int64_t skip = off - static_cast<int64_t>(sizeof(h)); skip > 0;) {
    char buf[512];
    int n = gzread(f, buf, static_cast<unsigned>(std::min<int64_t>(skip, 512)));
    if (n <= 0) break;
    skip -= n;
  }

  double slope = h.scl_slope != 0.f ? h.scl_slope : 1.0;
  double inter = h.scl_inter;
  auto read_all = [&](void* dst, size_t bytes) {
    if (gzread(f, dst, static_cast<unsigned>(bytes)) != static_cast<int>(bytes)) {
      gzclose(f);
      throw std::runtime_error(path + ": truncated NIfTI payload");
    }
  };
  switch (h.datatype) {
    case DT_FLOAT32:
      read_all(v.data.ptr(), static_cast<size_t>(nvox) * 4);
      if (slope != 1.0 || inter != 0.0)
        for (auto& x : v.data.data) x = static_cast<float>(x * slope + inter);
      break;
    case DT_INT16: {
      std::vector<int16_t> buf(static_cast<size_t>(nvox));
      read_all(buf.data(), buf.size() * 2);
      for (int64_t i = 0; i < nvox; ++i)
        v.data[i] = static_cast<float>(buf[static_cast<size_t>(i)] * slope + inter);
      break;
    }
    case DT_UINT8: {
      std::vector<uint8_t> buf(static_cast<size_t>(nvox));
      read_all(buf.data(), buf.size());
      for (int64_t i = 0; i < nvox; ++i)
        v.data[i] = static_cast<float>(buf[static_cast<size_t>(i)] * slope + inter);
      break;
    }
    default:
      gzclose(f);
      throw std::runtime_error(path + ": unsupported NIfTI datatype " + std::to_string(h.datatype));
  }
  gzclose(f);
  v.validate();
  return v;
}

}  // namespace mcl3d
