#include "reffeat/random.hpp"

namespace reffeat {

Tensor random_uniform(const Shape& shape, Rng& rng, double lo, double hi) {
  Tensor t(shape);
  for (float& v : t.data()) v = static_cast<float>(uniform(rng, lo, hi));
  return t;
}

}  // namespace reffeat
