#include "dlbl/tensor.hpp"

#include <atomic>
#include <sstream>

namespace dlbl {

namespace {
std::atomic<bool> g_deterministic{false};
}

std::string Shape::str() const {
  std::ostringstream os;
  os << *this;
  return os.str();
}

std::ostream& operator<<(std::ostream& os, const Shape& s) {
  return os << s.batch << "x" << s.channels << "x" << s.height << "x"
            << s.width;
}

void set_deterministic(bool on) { g_deterministic = on; }
bool deterministic() { return g_deterministic; }

}  // namespace dlbl
