#pragma once

#include <array>
#include <filesystem>
#include <stdexcept>

#include "msunlearn/core.hpp"

namespace msu::nifti {

class NiftiError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Single-file NIfTI-1 (.nii or .nii.gz). Both byte orders are accepted on
// read; files are written little-endian. Only 3D scalar volumes are supported.

/// Voxel values with scl_slope/scl_inter applied.
Image read_image(const std::filesystem::path& path, std::array<float, 3>* spacing = nullptr);

/// Any voxel with value > 0.5 is foreground.
Mask read_mask(const std::filesystem::path& path);

void write_image(const std::filesystem::path& path, const Image& img, std::array<float, 3> spacing = {1, 1, 1});
void write_mask(const std::filesystem::path& path, const Mask& mask, std::array<float, 3> spacing = {1, 1, 1});

bool has_nifti_extension(const std::filesystem::path& path);
/// File name without .nii / .nii.gz.
std::string stem(const std::filesystem::path& path);

}  // namespace msu::nifti
