#include "csaw/rng.hpp"

#include <cmath>
#include <sstream>

#include "csaw/tensor.hpp"

namespace csaw {

namespace {
std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
}  // namespace

std::uint64_t Rng::mix(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t x = 0x2545f4914f6cdd1dULL;
  std::uint64_t h = 0;
  for (std::uint64_t p : parts) {
    x ^= p;
    h ^= splitmix64(x);
    x += h;
  }
  return splitmix64(x);
}

double Rng::normal() {
  // Box-Muller; u1 in (0,1] to keep log finite.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw Error("Rng::below(0)");
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = eng_();
  } while (x >= limit);
  return x % n;
}

std::string Rng::state() const {
  std::ostringstream os;
  os << eng_;
  return os.str();
}

void Rng::set_state(const std::string& s) {
  std::istringstream is(s);
  is >> eng_;
  if (is.fail()) throw Error("Rng::set_state: malformed state string");
}

}  // namespace csaw
