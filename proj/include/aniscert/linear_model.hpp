#pragma once

#include <span>
#include <vector>

namespace aniscert {

// Halfspace classifier: class 1 iff w.x + b > 0.
struct LinearModel {
  std::vector<double> w;
  double b = 0.0;

  // Throws unless ||w||_2 > 0.
  void validate() const;
  double score(std::span<const double> x) const;
  int classify(std::span<const double> x) const { return score(x) > 0.0 ? 1 : 0; }
};

}  // namespace aniscert
