#include "msy/backend/tensor_map.hpp"

namespace msy {

Footprint sub_footprint(const Footprint& f, int map_h, int map_w, int top, int left, int h, int w) {
  const double cw = f.extent_x / map_w, ch = f.extent_y / map_h;
  return {f.x0 + left * cw, f.y0 + top * ch, w * cw, h * ch};
}

template <typename T>
TensorMap<T> center_crop(const TensorMap<T>& t, int out_h, int out_w) {
  const int h = t.height(), w = t.width();
  TensorMap<T> out{ops::center_crop(t.data, out_h, out_w), {}};
  const int top = (h - out_h) / 2, left = (w - out_w) / 2;
  for (const auto& f : t.footprints) out.footprints.push_back(sub_footprint(f, h, w, top, left, out_h, out_w));
  return out;
}

template <typename T>
TensorMap<T> bilinear_upsample(const TensorMap<T>& t, int factor_h, int factor_w) {
  if (factor_h < 1 || factor_w < 1) throw ContractError("bilinear_upsample: factors must be >= 1");
  if (factor_h == 1 && factor_w == 1) return t;
  return {ops::upsample_bilinear(t.data, factor_h, factor_w), t.footprints};
}

template <typename T>
TensorMap<T> upsample_center_crop(const TensorMap<T>& t, int factor, int out_h, int out_w) {
  const int h = t.height() * factor, w = t.width() * factor;
  if (out_h > h || out_w > w) throw ContractError("upsample_center_crop: crop larger than upsampled map");
  const int top = (h - out_h) / 2, left = (w - out_w) / 2;
  TensorMap<T> out{ops::resize_bilinear(t.data, out_h, out_w, factor, factor, top, left), {}};
  for (const auto& f : t.footprints) out.footprints.push_back(sub_footprint(f, h, w, top, left, out_h, out_w));
  return out;
}

template TensorMap<float> center_crop(const TensorMap<float>&, int, int);
template TensorMap<double> center_crop(const TensorMap<double>&, int, int);
template TensorMap<float> bilinear_upsample(const TensorMap<float>&, int, int);
template TensorMap<double> bilinear_upsample(const TensorMap<double>&, int, int);
template TensorMap<float> upsample_center_crop(const TensorMap<float>&, int, int, int);
template TensorMap<double> upsample_center_crop(const TensorMap<double>&, int, int, int);

}  // namespace msy
