#pragma once

#include "msflow/tensor.hpp"

// Differentiable operations. Forward results are float32; every reduction
// (conv inner products, sums, norms, softmax denominators) accumulates in
// double before the final rounding, and the backward rules do the same.
namespace msf::ops {

// Two forward routes for conv2d that must agree elementwise exactly. Both
// accumulate in (c, ky, kx) order so they round identically.
enum class ConvBackend { kDirect, kIm2col };
void set_conv_backend(ConvBackend backend);
ConvBackend conv_backend();

// x [N,Ci,H,W], kernel [Co,Ci,kh,kw], bias [Co]. Zero padding. Output
// height is (H + 2*padding - dilation*(kh-1) - 1) / stride + 1.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              int stride = 1, int padding = 0, int dilation = 1);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax(const Tensor& x);  // rank 1

Tensor max_pool2(const Tensor& x);         // 2x2 window, stride 2, even H and W
Tensor upsample2_nearest(const Tensor& x);
// Align-corners bilinear resize of [N,C,H,W] to [N,C,oh,ow]. Differentiable
// with respect to x.
Tensor bilinear_resize(const Tensor& x, int oh, int ow);
Tensor global_avg_pool(const Tensor& x);   // [N,C,H,W] -> [N,C]

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // [N,di],[do,di],[do]
Tensor concat_channels(const Tensor& a, const Tensor& b);

// Bilinear sampling of x [N,C,H,W] at grid [N,Ho,Wo,2]. Grid coordinates
// are normalized so -1 and +1 land on the centers of the border pixels
// (align corners). Taps outside the image read zero. Sampling positions
// within 1e-5 px of a lattice point snap to it, so grids built from exact
// lattice coordinates resample losslessly despite float32 grid storage.
// Differentiable with respect to both x and grid.
Tensor grid_sample(const Tensor& x, const Tensor& grid);

// theta [6] row major 2x3; output [1,h,w,2] of sampling locations over the
// normalized mesh of the output. Same coordinate convention as grid_sample.
Tensor affine_grid(const Tensor& theta, int h, int w);

// Maps points through the inverse of the 2x3 affine map. pts [K,2] is
// treated as constant; gradients flow to theta only. The linear part must
// be invertible.
Tensor affine_inverse_points(const Tensor& theta, const Tensor& pts);

// grid [N,h,w,2] + flow [N,2,h,w] -> [N,h,w,2]; flow values are offsets in
// normalized grid units.
Tensor add_flow_to_grid(const Tensor& grid, const Tensor& flow);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor square(const Tensor& a);
Tensor sqrt_eps(const Tensor& a, double eps);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor log(const Tensor& a);

// out = x * w[index]; gradients reach both x and the picked weight. Lets a
// softmax-weighted sum of branches backpropagate into the mixture logits.
Tensor scale_by_index(const Tensor& x, const Tensor& w, int index);

Tensor sum_all(const Tensor& a);   // -> [1]
Tensor mean_all(const Tensor& a);  // -> [1]
Tensor sum_channels(const Tensor& x);                    // [N,C,H,W] -> [N,1,H,W]
Tensor channel_l2_norm(const Tensor& x, double eps);     // [N,C,H,W] -> [N,1,H,W]
Tensor row_l2_norm(const Tensor& x, double eps);         // [m,n] -> [m]
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose2d(const Tensor& x);                     // [m,n] -> [n,m]
// Unit-normalizes the channel vector at every spatial site.
Tensor l2_normalize_sites(const Tensor& x, double eps = 1e-12);
// [m,d],[n,d] -> [m,n] of pairwise Euclidean distances.
Tensor l2_pairwise_distance(const Tensor& a, const Tensor& b);
// out[:,0] = x[:,0]*sx + bx, out[:,1] = x[:,1]*sy + by for [K,2] points.
Tensor colwise_affine(const Tensor& x, double sx, double sy, double bx, double by);

}  // namespace msf::ops
