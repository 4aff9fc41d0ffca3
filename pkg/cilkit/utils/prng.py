"""
Documented 64-bit linear congruential generator for class-order shuffling

state_{k+1} = (A * state_k + C) mod 2^64 with Knuth's MMIX constants.
Draws use the high 32 bits; ``below(n)`` rejects the biased tail so every
value in [0, n) is equally likely. The same seed yields the same class
order on every platform and in any language that reimplements these
three lines.
"""

LCG_MULTIPLIER = 6364136223846793005
LCG_INCREMENT = 1442695040888963407
MASK64 = (1 << 64) - 1


class LCG64:
    def __init__(self, seed):
        self.state = int(seed) & MASK64

    def next_u64(self):
        self.state = (LCG_MULTIPLIER * self.state + LCG_INCREMENT) & MASK64
        return self.state

    def next_u32(self):
        return self.next_u64() >> 32

    def below(self, n):
        """Uniform integer in [0, n)"""
        if n <= 0:
            raise ValueError(f"n must be positive, got {n}")
        limit = (1 << 32) - ((1 << 32) % n)
        while True:
            draw = self.next_u32()
            if draw < limit:
                return draw % n


def shuffled(items, seed):
    """Fisher-Yates shuffle (from the back) driven by LCG64(seed)"""
    items = list(items)
    rng = LCG64(seed)
    for i in range(len(items) - 1, 0, -1):
        j = rng.below(i + 1)
        items[i], items[j] = items[j], items[i]
    return items
