#include "ccvim/maps.hpp"

#include <deque>

namespace ccvim {

IntMap threshold_map(const RealMap& p, double thr) {
  IntMap out(p.h, p.w);
  for (size_t i = 0; i < p.v.size(); ++i) out.v[i] = p.v[i] > thr ? 1 : 0;
  return out;
}

IntMap label_components(const IntMap& m) {
  IntMap out(m.h, m.w);
  int32_t next = 0;
  std::deque<int64_t> queue;
  for (int64_t start = 0; start < m.h * m.w; ++start) {
    if (m.v[start] == 0 || out.v[start] != 0) continue;
    int32_t id = ++next;
    int32_t value = m.v[start];
    out.v[start] = id;
    queue.push_back(start);
    while (!queue.empty()) {
      int64_t p = queue.front();
      queue.pop_front();
      int64_t y = p / m.w, x = p % m.w;
      const int64_t ny[4] = {y - 1, y + 1, y, y};
      const int64_t nx[4] = {x, x, x - 1, x + 1};
      for (int k = 0; k < 4; ++k) {
        if (ny[k] < 0 || ny[k] >= m.h || nx[k] < 0 || nx[k] >= m.w) continue;
        int64_t q = ny[k] * m.w + nx[k];
        if (m.v[q] == value && out.v[q] == 0) {
          out.v[q] = id;
          queue.push_back(q);
        }
      }
    }
  }
  return out;
}

}  // namespace ccvim
