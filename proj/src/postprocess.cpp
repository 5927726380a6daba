#include "msic/postprocess.hpp"

namespace msic {

template <typename T>
PostProcessNet<T>::PostProcessNet(int w, Rng& rng)
    : enc0a("post.enc0a", 3, w, 3, rng),
      enc0b("post.enc0b", w, w, 3, rng),
      down1("post.down1", w, 2 * w, 3, rng, ConvSpec{.stride = 2}),
      enc1("post.enc1", 2 * w, 2 * w, 3, rng),
      down2("post.down2", 2 * w, 4 * w, 3, rng, ConvSpec{.stride = 2}),
      enc2("post.enc2", 4 * w, 4 * w, 3, rng),
      up1("post.up1", 4 * w, 2 * w, 3, rng),
      dec1("post.dec1", 4 * w, 2 * w, 3, rng),
      up2("post.up2", 2 * w, w, 3, rng),
      dec0("post.dec0", 2 * w, w, 3, rng),
      out("post.out", w, 3, 3, rng, ConvSpec{.zero_init = true}) {}

template <typename T>
Var<T> PostProcessNet<T>::operator()(Tape<T>* tape, const Var<T>& x) const {
  if (x.shape().h % 4 != 0 || x.shape().w % 4 != 0) {
    throw ShapeError("post-processing input extents must be multiples of 4, got " + x.shape().str());
  }
  const Var<T> e0 = relu(enc0b(tape, relu(enc0a(tape, x))));
  const Var<T> e1 = relu(enc1(tape, relu(down1(tape, e0))));
  const Var<T> e2 = relu(enc2(tape, relu(down2(tape, e1))));
  const Var<T> d1 = relu(dec1(tape, concat_channels<T>({relu(up1(tape, upsample_nearest2x(e2))), e1})));
  const Var<T> d0 = relu(dec0(tape, concat_channels<T>({relu(up2(tape, upsample_nearest2x(d1))), e0})));
  return add(x, out(tape, d0));
}

template <typename T>
void PostProcessNet<T>::collect(ParamList<T>& o) {
  for (Conv2d<T>* c : {&enc0a, &enc0b, &down1, &enc1, &down2, &enc2, &up1, &dec1, &up2, &dec0, &out}) {
    c->collect(o);
  }
}

template class PostProcessNet<float>;
template class PostProcessNet<double>;

}  // namespace msic
