#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

namespace acme {

// Unsigned big integer, base 1e9 limbs, little-endian. Only what the
// architecture counter needs: small-factor products and printing.
struct BigUint {
  std::vector<std::uint32_t> limbs{0};

  static BigUint from_u64(std::uint64_t v) {
    BigUint b;
    b.limbs.clear();
    do {
      b.limbs.push_back(static_cast<std::uint32_t>(v % 1000000000ull));
      v /= 1000000000ull;
    } while (v);
    return b;
  }

  BigUint& mul_u32(std::uint32_t m) {
    std::uint64_t carry = 0;
    for (std::uint32_t& limb : limbs) {
      std::uint64_t cur = std::uint64_t(limb) * m + carry;
      limb = static_cast<std::uint32_t>(cur % 1000000000ull);
      carry = cur / 1000000000ull;
    }
    while (carry) {
      limbs.push_back(static_cast<std::uint32_t>(carry % 1000000000ull));
      carry /= 1000000000ull;
    }
    if (limbs.empty()) limbs.push_back(0);
    if (limbs.size() > 1 && limbs.back() == 0) limbs.assign(1, 0);  // 0 * m stays canonical
    return *this;
  }

  std::string to_string() const {
    std::string s = std::to_string(limbs.back());
    char buf[10];
    for (std::size_t i = limbs.size() - 1; i-- > 0;) {
      std::snprintf(buf, sizeof(buf), "%09u", limbs[i]);
      s += buf;
    }
    return s;
  }

  bool operator==(const BigUint& o) const { return limbs == o.limbs; }
};

}  // namespace acme
