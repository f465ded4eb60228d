#pragma once

#include <vector>

#include "msy/backend/ops.hpp"

namespace msy {

// Axis-aligned rectangle in scale-1 slide pixel coordinates.
struct Footprint {
  double x0 = 0.0;
  double y0 = 0.0;
  double extent_x = 1.0;
  double extent_y = 1.0;

  double center_x() const { return x0 + extent_x / 2.0; }
  double center_y() const { return y0 + extent_y / 2.0; }
  bool contains(const Footprint& o, double tol = 1e-9) const {
    return o.x0 >= x0 - tol && o.y0 >= y0 - tol && o.x0 + o.extent_x <= x0 + extent_x + tol &&
           o.y0 + o.extent_y <= y0 + extent_y + tol;
  }
  bool operator==(const Footprint&) const = default;
};

// Feature map with the slide region each batch item covers. The footprint of
// cell (i, j) follows from the map size, so geometric ops only need to update
// the outer rectangle.
template <typename T>
struct TensorMap {
  Var<T> data;
  std::vector<Footprint> footprints;  // one per batch item

  int height() const { return data.shape().h; }
  int width() const { return data.shape().w; }
  int channels() const { return data.shape().c; }

  Footprint cell(int item, int i, int j) const {
    const Footprint& f = footprints.at(item);
    const double cw = f.extent_x / width(), ch = f.extent_y / height();
    return {f.x0 + j * cw, f.y0 + i * ch, cw, ch};
  }
};

// Footprint of the window [top, top+h) x [left, left+w) of a map of size map_h x map_w.
Footprint sub_footprint(const Footprint& f, int map_h, int map_w, int top, int left, int h, int w);

template <typename T>
TensorMap<T> center_crop(const TensorMap<T>& t, int out_h, int out_w);

template <typename T>
TensorMap<T> bilinear_upsample(const TensorMap<T>& t, int factor_h, int factor_w);

// Equivalent to bilinear_upsample followed by center_crop, but computes only
// the cells that survive the crop.
template <typename T>
TensorMap<T> upsample_center_crop(const TensorMap<T>& t, int factor, int out_h, int out_w);

}  // namespace msy
