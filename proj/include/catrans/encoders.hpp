#pragma once

#include <array>
#include <string>

#include "catrans/config.hpp"
#include "catrans/nn.hpp"
#include "catrans/tensor.hpp"

namespace catrans {

// Conv, per-channel affine normalization, relu. The conv carries no
// trainable bias of its own: the affine's beta is the per-channel shift, so
// a separate bias would be redundant.
template <typename T>
struct ConvLayer {
  Tensor<T> w;             // 3x3 kernel
  Tensor<T> gamma, beta;   // per-channel affine (frozen-BN equivalent)
};

template <typename T>
ConvLayer<T> make_conv_layer(int cin, int cout, Rng& rng) {
  ConvLayer<T> l;
  l.w = he_normal<T>({3, 3, cin, cout}, 9 * cin, rng);
  l.gamma = Tensor<T>::full({cout}, T(1), true);
  l.beta = Tensor<T>::zeros({cout}, true);
  return l;
}

template <typename T>
Tensor<T> conv_norm_relu(const Tensor<T>& x, const ConvLayer<T>& l, int stride) {
  Tensor<T> zero_bias = Tensor<T>::zeros({l.w.shape[3]});
  return relu(channel_affine(conv2d_3x3(x, l.w, zero_bias, stride), l.gamma, l.beta));
}

template <typename T>
void collect(NamedParams<T>& out, const std::string& prefix, const ConvLayer<T>& l) {
  collect(out, prefix + ".w", l.w);
  collect(out, prefix + ".gamma", l.gamma);
  collect(out, prefix + ".beta", l.beta);
}

template <typename T>
struct FeaturePyramid {
  std::array<Tensor<T>, 4> level;  // level[l-1] has shape [H/2^l x W/2^l x C_l]
};

template <typename T>
struct MaskPyramid {
  std::array<Tensor<T>, 4> level;
};

// Backbone stand-in: four stages of (conv s2, norm, relu, conv s1, norm,
// relu); level l is the stage-l activation. Shared between support and
// query images.
template <typename T>
struct ImageEncoderParams {
  std::array<ConvLayer<T>, 4> down;
  std::array<ConvLayer<T>, 4> same;
};

template <typename T>
ImageEncoderParams<T> make_image_encoder(const ModelConfig& cfg, Rng& rng) {
  ImageEncoderParams<T> p;
  int cin = 3;
  for (int l = 0; l < 4; ++l) {
    const int cout = cfg.channels[static_cast<std::size_t>(l)];
    p.down[static_cast<std::size_t>(l)] = make_conv_layer<T>(cin, cout, rng);
    p.same[static_cast<std::size_t>(l)] = make_conv_layer<T>(cout, cout, rng);
    cin = cout;
  }
  return p;
}

template <typename T>
void collect(NamedParams<T>& out, const std::string& prefix, const ImageEncoderParams<T>& p) {
  for (int l = 0; l < 4; ++l) {
    collect(out, prefix + ".s" + std::to_string(l + 1) + ".down", p.down[static_cast<std::size_t>(l)]);
    collect(out, prefix + ".s" + std::to_string(l + 1) + ".same", p.same[static_cast<std::size_t>(l)]);
  }
}

template <typename T>
FeaturePyramid<T> image_encoder(const Tensor<T>& img, const ImageEncoderParams<T>& p) {
  if (img.ndim() != 3 || img.shape[2] != 3)
    throw ShapeError("image_encoder: expected [h x w x 3], got " + shape_str(img.shape));
  if (img.shape[0] % 16 != 0 || img.shape[1] % 16 != 0)
    throw ShapeError("image_encoder: spatial size " + shape_str(img.shape) +
                     " not divisible by 16");
  FeaturePyramid<T> out;
  Tensor<T> x = img;
  for (int l = 0; l < 4; ++l) {
    x = conv_norm_relu(x, p.down[static_cast<std::size_t>(l)], 2);
    x = conv_norm_relu(x, p.same[static_cast<std::size_t>(l)], 1);
    out.level[static_cast<std::size_t>(l)] = x;
  }
  return out;
}

// Four light-weight layers, each conv s2 + norm + relu, on the binary
// support mask.
template <typename T>
struct MaskEncoderParams {
  std::array<ConvLayer<T>, 4> layer;
};

template <typename T>
MaskEncoderParams<T> make_mask_encoder(const ModelConfig& cfg, Rng& rng) {
  MaskEncoderParams<T> p;
  int cin = 1;
  for (int l = 0; l < 4; ++l) {
    const int cout = cfg.mask_channels[static_cast<std::size_t>(l)];
    ConvLayer<T> layer = make_conv_layer<T>(cin, cout, rng);
    // channel 0 starts as a pure box filter over the previous occupancy
    // channel, so level l's first feature is the downsampled mask occupancy
    // and the context branch has something meaningful to transfer from step
    // one
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx)
        for (int ci = 0; ci < cin; ++ci)
          (*layer.w.data)[((static_cast<std::size_t>(ky) * 3 + kx) * cin + ci) * cout + 0] =
              ci == 0 ? T(1.0 / 9.0) : T(0);
    p.layer[static_cast<std::size_t>(l)] = layer;
    cin = cout;
  }
  return p;
}

template <typename T>
void collect(NamedParams<T>& out, const std::string& prefix, const MaskEncoderParams<T>& p) {
  for (int l = 0; l < 4; ++l)
    collect(out, prefix + ".l" + std::to_string(l + 1), p.layer[static_cast<std::size_t>(l)]);
}

template <typename T>
MaskPyramid<T> mask_encoder(const Tensor<T>& mask, const MaskEncoderParams<T>& p) {
  if (mask.ndim() != 2)
    throw ShapeError("mask_encoder: expected [h x w], got " + shape_str(mask.shape));
  for (T v : *mask.data)
    if (v != T(0) && v != T(1)) throw ValueError("mask_encoder: non-binary input");
  MaskPyramid<T> out;
  Tensor<T> x = reshape(mask, {mask.shape[0], mask.shape[1], 1});
  for (int l = 0; l < 4; ++l) {
    x = conv_norm_relu(x, p.layer[static_cast<std::size_t>(l)], 2);
    out.level[static_cast<std::size_t>(l)] = x;
  }
  return out;
}

}  // namespace catrans
