#pragma once

#include <initializer_list>
#include <vector>

#include "tudp/actionspace.hpp"

namespace tudp::test {

inline Vec vec(std::initializer_list<double> xs) {
  Vec v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

inline Scene scene_of(std::initializer_list<Vec> positions, int id = 0) {
  Scene s;
  s.id = id;
  for (const auto& p : positions) s.modes.push_back({p, 0.0});
  s.context = raw_context(s.modes, s.dim(), s.k());
  return s;
}

}  // namespace tudp::test
