#pragma once

#include "msic/layers.hpp"

namespace msic {

// Residual U-Net: two stride-2 down stages, two nearest-upsample up stages
// with skip concatenation, and a zero-initialized output conv so an
// untrained net is the identity. Input extents must be multiples of 4.
template <typename T>
class PostProcessNet {
 public:
  PostProcessNet() = default;
  PostProcessNet(int width, Rng& rng);

  Var<T> operator()(Tape<T>* tape, const Var<T>& x) const;
  void collect(ParamList<T>& out);

  Conv2d<T> enc0a, enc0b, down1, enc1, down2, enc2, up1, dec1, up2, dec0, out;
};

}  // namespace msic
