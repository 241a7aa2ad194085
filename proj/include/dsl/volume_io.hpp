#pragma once

#include <string>

#include "dsl/ct_data.hpp"

namespace dsl {

// Supported on-disk formats, chosen by extension:
//   .nii / .nii.gz  NIfTI-1 single file, slope/intercept honored on read
//   .raw            little-endian samples + "<stem>.json" sidecar
//                   {shape, spacing, origin, dtype[, config_hash]}
// Axis order everywhere is (z, y, x) with x fastest, matching NIfTI i-j-k.

enum class VolumeFormat { Nifti, NiftiGz, Raw };

VolumeFormat format_from_path(const std::string& path);

CtVolume load_volume(const std::string& path);
LabelVolume load_labels(const std::string& path, Vec3* spacing = nullptr);

// `tag` lands in the NIfTI descrip field / the raw sidecar, typically the config hash.
void save_volume(const std::string& path, const CtVolume& v, const std::string& tag = {});
void save_labels(const std::string& path, const LabelVolume& labels, const Vec3& spacing, const Vec3& origin,
                 const std::string& tag = {});
void save_float_volume(const std::string& path, const Grid<float>& values, const Vec3& spacing, const Vec3& origin,
                       const std::string& tag = {});
Grid<float> load_float_volume(const std::string& path);

// The tag stored with a volume: NIfTI descrip field or raw sidecar config_hash.
std::string read_volume_tag(const std::string& path);

}  // namespace dsl
