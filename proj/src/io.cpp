#include "symkfcv/io.hpp"

#include <array>
#include <charconv>

namespace symkfcv {

std::string format_double(double v) {
  std::array<char, 64> buf{};
  const auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  (void)ec;
  return std::string(buf.data(), ptr);
}

}  // namespace symkfcv
