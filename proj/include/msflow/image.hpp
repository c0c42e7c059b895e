#pragma once

#include <filesystem>

#include "msflow/tensor.hpp"

// Image I/O and plain (non-differentiable) pixel-space transforms. Images
// live in Tensors of shape [3,H,W] with values in [0,1]; the disk codecs
// are an implementation detail of this module.
namespace msf::img {

// PNG/JPEG by extension. Grayscale files are replicated to three channels.
Tensor load_image(const std::filesystem::path& path);
void save_image(const std::filesystem::path& path, const Tensor& image);

// Clamped to [0,1] and quantized exactly like save_image + load_image
// would, so a saved tensor round-trips bitwise.
Tensor quantize_unit(const Tensor& image);

Tensor resize(const Tensor& image, int oh, int ow);  // align-corners bilinear
Tensor hflip(const Tensor& image);
// Pads with edge replication; pads may be zero.
Tensor pad_replicate(const Tensor& image, int top, int bottom, int left, int right);
Tensor crop(const Tensor& image, int y0, int x0, int h, int w);
// Rotation about the image center, bilinear taps, edge pixels replicated
// outside the frame. Angle in degrees, counterclockwise positive.
Tensor rotate(const Tensor& image, double degrees);

// Bilinear shift by a (possibly fractional) pixel offset: output(y,x) reads
// input(y - dy, x - dx) with edge replication, so content moves by (dx,dy).
Tensor translate(const Tensor& image, double dx, double dy);

double mean_pixel(const Tensor& image);

}  // namespace msf::img
