"""Portable counter-based random number generation.

Every stochastic operation in the package draws from Philox4x64-10, a named
counter-based generator, keyed by a 64-bit seed plus a 64-bit stream id.  The
full sampling pipeline is specified here so that a given (seed, stream) pair
reproduces bit-exactly on any platform and in any faithful reimplementation:

* raw words: Philox4x64-10 applied to counter (block, 0, 0, 0) with key
  (seed, stream); blocks are consumed in increasing order and each draw call
  consumes whole 4-word blocks.
* uniforms in [0, 1): ``(word >> 11) * 2**-53``.
* Gaussians: Box-Muller on consecutive word pairs.  The even word maps to
  u1 in (0, 1] via ``((word >> 11) + 1) * 2**-53``, the odd word to u2 in
  [0, 1); the pair yields ``r*cos(2*pi*u2)`` then ``r*sin(2*pi*u2)`` with
  ``r = sqrt(-2*ln(u1))``.
* bounded integers: ``floor(uniform * bound)``.
* permutations: Fisher-Yates driven by the bounded-integer scheme.
* derangements: rejection-sample permutations until none has a fixed point.
* Bernoulli keep-masks (dropout): each raw word supplies four 16-bit lanes,
  least significant first; lane i keeps its unit when
  ``lane >= round(rate * 65536)``.

Exactness is limited only by the platform's libm (log/cos/sin); the integer
stream itself is bit-exact everywhere.
"""

from __future__ import annotations

import numpy as np

from padkit.errors import ConfigError

_MASK64 = (1 << 64) - 1
_MASK32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)

# Philox4x64 round multipliers and Weyl key increments (Random123 constants).
_M0 = 0xD2E7470EE14C6C93
_M1 = 0xCA5A826395121157
_W0 = 0x9E3779B97F4A7C15
_W1 = 0xBB67AE8584CAA73B

# Stream-derivation purposes. Values are part of the reproducibility contract.
PURPOSE_INIT = 1
PURPOSE_SHUFFLE = 2
PURPOSE_DISTORT = 3
PURPOSE_DROPOUT = 4
PURPOSE_SYNTH = 5
PURPOSE_SUBSAMPLE = 6
PURPOSE_DERIVE = 7


def philox4x64_scalar(
    counter: tuple[int, int, int, int], key0: int, key1: int
) -> tuple[int, int, int, int]:
    """One Philox4x64-10 block on Python integers (reference path)."""
    c0, c1, c2, c3 = (c & _MASK64 for c in counter)
    k0, k1 = key0 & _MASK64, key1 & _MASK64
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (
            ((p1 >> 64) ^ c1 ^ k0) & _MASK64,
            p1 & _MASK64,
            ((p0 >> 64) ^ c3 ^ k1) & _MASK64,
            p0 & _MASK64,
        )
        k0 = (k0 + _W0) & _MASK64
        k1 = (k1 + _W1) & _MASK64
    return c0, c1, c2, c3


def _mulhilo_into(
    a: int, b: np.ndarray, hi: np.ndarray, lo: np.ndarray, t: np.ndarray, u: np.ndarray
) -> None:
    """128-bit product of scalar ``a`` with uint64 vector ``b`` into hi/lo.

    ``b`` is only read; ``t`` and ``u`` are scratch.
    """
    a_lo = np.uint64(a & 0xFFFFFFFF)
    a_hi = np.uint64(a >> 32)
    np.bitwise_and(b, _MASK32, out=t)  # b_lo
    np.multiply(a_lo, t, out=lo)  # p00
    np.multiply(a_hi, t, out=hi)  # p10
    np.right_shift(b, _S32, out=t)  # b_hi
    np.multiply(a_lo, t, out=u)  # p01
    # mid = p10 + (p00 >> 32) + (p01 & M32)
    np.right_shift(lo, _S32, out=lo)
    hi += lo
    np.bitwise_and(u, _MASK32, out=lo)
    hi += lo
    # hi = p11 + (mid >> 32) + (p01 >> 32)
    np.right_shift(hi, _S32, out=hi)
    np.right_shift(u, _S32, out=u)
    hi += u
    np.multiply(a_hi, t, out=t)  # p11
    hi += t
    np.multiply(np.uint64(a), b, out=lo)  # low 64 bits of the full product


def philox4x64_blocks(block_indices: np.ndarray, key0: int, key1: int) -> np.ndarray:
    """Run Philox4x64-10 on counters (i, 0, 0, 0) for each block index i.

    Returns the output words as a flat uint64 array of length 4*len(indices),
    block by block in word order.
    """
    n = block_indices.shape[0]
    state = [
        block_indices.astype(np.uint64, copy=True),
        np.zeros(n, dtype=np.uint64),
        np.zeros(n, dtype=np.uint64),
        np.zeros(n, dtype=np.uint64),
    ]
    nxt = [np.empty(n, dtype=np.uint64) for _ in range(4)]
    s0 = np.empty(n, dtype=np.uint64)
    s1 = np.empty(n, dtype=np.uint64)
    k0, k1 = key0 & _MASK64, key1 & _MASK64
    with np.errstate(over="ignore"):
        for _ in range(10):
            c0, c1, c2, c3 = state
            # next state: (hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0)
            _mulhilo_into(_M0, c0, nxt[2], nxt[3], s0, s1)
            _mulhilo_into(_M1, c2, nxt[0], nxt[1], s0, s1)
            np.bitwise_xor(nxt[0], c1, out=nxt[0])
            np.bitwise_xor(nxt[0], np.uint64(k0), out=nxt[0])
            np.bitwise_xor(nxt[2], c3, out=nxt[2])
            np.bitwise_xor(nxt[2], np.uint64(k1), out=nxt[2])
            state, nxt = nxt, state
            k0 = (k0 + _W0) & _MASK64
            k1 = (k1 + _W1) & _MASK64
    return np.stack(state, axis=1).reshape(-1)


class CounterRng:
    """Deterministic random stream keyed by (seed, stream).

    Instances are cheap; derive one per independent sampling site with
    :meth:`spawn` rather than sharing a single stream across call sites.
    Not thread-safe; use one instance per thread.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = seed & _MASK64
        self.stream = stream & _MASK64
        self._block = 0

    def spawn(self, purpose: int, index: int = 0) -> "CounterRng":
        """Derive an independent child stream for (purpose, index).

        The child's stream id is the first Philox word of counter
        (purpose, index, parent_stream, PURPOSE_DERIVE) under the parent key,
        which decorrelates children from each other and from the parent.
        Spawning does not consume parent state.
        """
        word0, _, _, _ = philox4x64_scalar(
            (purpose, index, self.stream, PURPOSE_DERIVE), self.seed, self.stream
        )
        return CounterRng(self.seed, word0)

    def raw64(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit words."""
        if n < 0:
            raise ConfigError(f"cannot draw {n} words")
        n_blocks = (n + 3) // 4
        idx = np.arange(self._block, self._block + n_blocks, dtype=np.uint64)
        self._block += n_blocks
        return philox4x64_blocks(idx, self.seed, self.stream)[:n]

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 uniforms in [0, 1)."""
        return (self.raw64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def gaussian(self, n: int) -> np.ndarray:
        """``n`` standard normal float64 samples via Box-Muller."""
        n_pairs = (n + 1) // 2
        words = self.raw64(2 * n_pairs)
        u1 = ((words[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (words[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        out = np.empty(2 * n_pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def gaussian_matrix(self, shape: tuple[int, ...], scale: float = 1.0) -> np.ndarray:
        size = int(np.prod(shape))
        return (self.gaussian(size) * scale).reshape(shape)

    def bernoulli_keep(self, n: int, rate: float) -> np.ndarray:
        """Boolean mask of length ``n``: True with probability ~(1 - rate).

        The drop threshold is round(rate * 65536) on 16-bit lanes, so the
        rate is honored to a granularity of ~1.5e-5; lanes are the
        little-endian 16-bit quarters of each raw word.
        """
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"rate must be in [0, 1), got {rate}")
        threshold = int(round(rate * 65536.0))
        n_words = (n + 3) // 4
        lanes = self.raw64(n_words).view(np.uint16)
        if not lanes.flags.c_contiguous:  # view requires contiguity; raw64 output is
            lanes = np.ascontiguousarray(lanes)
        return lanes[:n] >= np.uint16(min(threshold, 65535))

    def integers(self, bound: int, n: int) -> np.ndarray:
        """``n`` integers uniform on {0, ..., bound-1} (floor of scaled uniforms)."""
        if bound <= 0:
            raise ConfigError(f"integer bound must be positive, got {bound}")
        v = np.floor(self.uniform(n) * bound).astype(np.int64)
        # floor(u * bound) == bound cannot occur for u < 1, but guard rounding.
        return np.minimum(v, bound - 1)

    def integer(self, bound: int) -> int:
        return int(self.integers(bound, 1)[0])

    def uniform_in(self, low: float, high: float) -> float:
        return float(low + (high - low) * self.uniform(1)[0])

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for i in range(n - 1, 0, -1):
            j = min(int(u[n - 1 - i] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def derangement(self, n: int) -> np.ndarray:
        """Uniform fixed-point-free permutation of range(n); requires n >= 2."""
        if n < 2:
            raise ConfigError(f"derangement needs n >= 2, got {n}")
        while True:
            perm = self.permutation(n)
            if not np.any(perm == np.arange(n)):
                return perm

    def choose(self, n: int, m: int) -> np.ndarray:
        """``m`` distinct indices from range(n), uniform without replacement."""
        if not 0 <= m <= n:
            raise ConfigError(f"cannot choose {m} of {n}")
        return self.permutation(n)[:m]
