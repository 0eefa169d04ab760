"""Carry-propagating range coder (32-bit range, byte-wise renormalization).

Frequencies are integer counts with ``total <= 2**16``. The encoder keeps a
33-bit ``low`` plus a cached byte and a run of pending 0xFF bytes so carries
can ripple into already-determined output. The always-zero leading byte of
the classic scheme is dropped, so the decoder consumes exactly the bytes
the encoder produced; reading past the end or leaving bytes unread is a
:class:`CorruptPayload`.
"""
from __future__ import annotations

from .errors import CorruptPayload

TOP = 1 << 24
MASK32 = 0xFFFFFFFF
MAX_TOTAL = 1 << 16


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self._out = bytearray()
        self._first = True

    def _shift_low(self):
        low = self.low
        if low < 0xFF000000 or low > MASK32:
            carry = low >> 32
            temp = self.cache
            while True:
                if self._first:
                    self._first = False  # leading byte is provably zero
                else:
                    self._out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (low << 8) & MASK32

    def encode(self, start: int, size: int, total: int):
        r = self.range // total
        self.low += r * start
        self.range = r * size
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bits(self, value: int, nbits: int = 16):
        """Raw ``nbits`` (<= 16) value coded with a flat distribution."""
        self.encode(value, 1, 1 << nbits)

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()
        self._r = 0

    def _next(self) -> int:
        if self.pos >= len(self.data):
            raise CorruptPayload("range decoder ran out of bytes")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def get_freq(self, total: int) -> int:
        self._r = self.range // total
        v = self.code // self._r
        if v >= total:
            raise CorruptPayload("decoded value outside the frequency table")
        return v

    def consume(self, start: int, size: int):
        r = self._r
        self.code -= r * start
        self.range = r * size
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next()) & MASK32
            self.range <<= 8

    def decode_bits(self, nbits: int = 16) -> int:
        v = self.get_freq(1 << nbits)
        self.consume(v, 1)
        return v

    def finish(self):
        if self.pos != len(self.data):
            raise CorruptPayload(f"{len(self.data) - self.pos} trailing bytes after payload")


class AdaptiveByteModel:
    """Order-0 adaptive model over 256 symbols.

    Counts start at 1 and grow by ``increment``; when the total would pass
    ``2**16`` every count is halved (floor, minimum 1). Cumulative counts live
    in a Fenwick tree.
    """

    def __init__(self, nsym: int = 256, increment: int = 32, limit: int = MAX_TOTAL):
        self.nsym = nsym
        self.increment = increment
        self.limit = limit
        self.freq = [1] * nsym
        self.total = nsym
        self._top = 1 << (nsym.bit_length() - 1)
        self._rebuild()

    def _rebuild(self):
        n = self.nsym
        tree = [0] * (n + 1)
        for i, f in enumerate(self.freq):
            j = i + 1
            tree[j] += f
            k = j + (j & -j)
            if k <= n:
                tree[k] += tree[j]
        self.tree = tree

    def cum(self, sym: int) -> int:
        """Sum of counts of symbols ``< sym``."""
        s = 0
        tree = self.tree
        while sym > 0:
            s += tree[sym]
            sym -= sym & -sym
        return s

    def find(self, target: int) -> tuple[int, int]:
        """Symbol whose cumulative interval contains ``target``, and its start."""
        pos = 0
        rem = target
        tree = self.tree
        step = self._top
        n = self.nsym
        while step:
            nxt = pos + step
            if nxt <= n and tree[nxt] <= rem:
                pos = nxt
                rem -= tree[nxt]
            step >>= 1
        return pos, target - rem

    def update(self, sym: int):
        if self.total + self.increment > self.limit:
            self.freq = [max(1, f >> 1) for f in self.freq]
            self.total = sum(self.freq)
            self._rebuild()
        inc = self.increment
        self.freq[sym] += inc
        self.total += inc
        j = sym + 1
        tree = self.tree
        n = self.nsym
        while j <= n:
            tree[j] += inc
            j += j & -j

    def encode(self, enc: RangeEncoder, sym: int):
        enc.encode(self.cum(sym), self.freq[sym], self.total)
        self.update(sym)

    def decode(self, dec: RangeDecoder) -> int:
        target = dec.get_freq(self.total)
        sym, start = self.find(target)
        dec.consume(start, self.freq[sym])
        self.update(sym)
        return sym
