#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace fskt {

// Axis-aligned box in continuous image coordinates (corners).
struct Box {
  double xmin = 0.0;
  double ymin = 0.0;
  double xmax = 0.0;
  double ymax = 0.0;

  double width() const { return xmax - xmin; }
  double height() const { return ymax - ymin; }
  double area() const { return width() * height(); }
  bool well_ordered() const { return xmin < xmax && ymin < ymax; }

  friend bool operator==(const Box&, const Box&) = default;
};

// One scored box emitted by the detector.
struct Detection {
  Box box;
  std::size_t category = 0;
  double confidence = 0.0;
};

// Support exemplar: a grid x grid feature map of `dim`-vectors (cell-major)
// and a binary location mask over the cells.
struct SupportEntry {
  std::size_t category = 0;
  std::size_t grid = 0;
  std::size_t dim = 0;
  std::vector<double> features;
  std::vector<std::uint8_t> mask;
};

}  // namespace fskt
