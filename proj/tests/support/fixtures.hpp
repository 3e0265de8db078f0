#pragma once

#include <random>
#include <vector>

#include "depthart/var.hpp"

namespace depthart::testing {

inline std::vector<TokenMap> random_maps(const ScaleSchedule& s, std::size_t vocab, std::mt19937_64& rng,
                                         std::size_t count) {
  std::uniform_int_distribution<int> ui(0, static_cast<int>(vocab) - 1);
  std::vector<TokenMap> maps;
  for (std::size_t k = 0; k < count; ++k) {
    TokenMap m{k, s[k].first, s[k].second, {}};
    for (std::size_t i = 0; i < s.tokens(k); ++i) m.indices.push_back(ui(rng));
    maps.push_back(m);
  }
  return maps;
}

/// Small transformer for fast tests; same layout as the default one.
inline VarConfig tiny_var_config() {
  VarConfig c;
  c.width = 32;
  c.layers = 2;
  c.heads = 2;
  return c;
}

}  // namespace depthart::testing
