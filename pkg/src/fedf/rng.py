"""Portable 64-bit pseudo-random generator used for shuffling and initialization.

The stream is fully defined by the constants below so that another
implementation can reproduce it bit for bit:

* seeds are expanded with SplitMix64 (increment 0x9E3779B97F4A7C15,
  multipliers 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB);
* draws come from xorshift64* (shifts 12, 25, 27; multiplier
  0x2545F4914F6CDD1D);
* ``uniform`` maps the top 53 bits to [0, 1);
* ``below(n)`` uses the multiply-shift reduction ``(x * n) >> 64``.
"""

MASK64 = (1 << 64) - 1

_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x):
    """One SplitMix64 step: returns (next_state, output)."""
    x = (x + _GOLDEN) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def derive_seed(*parts):
    """Hash a tuple of integers into one 64-bit seed."""
    state = 0
    out = 0
    for part in parts:
        state, out = splitmix64(state ^ (int(part) & MASK64))
    return out


class XorShift64Star:
    def __init__(self, seed):
        _, state = splitmix64(int(seed) & MASK64)
        self.state = state or _GOLDEN

    def next_u64(self):
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & MASK64

    def uniform(self):
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def below(self, n):
        return (self.next_u64() * n) >> 64

    def permutation(self, n):
        """Fisher-Yates permutation of range(n), last slot first."""
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            order[i], order[j] = order[j], order[i]
        return order
