"""Latent quantization, the learned factorized prior and feature range coding.

The prior models each latent channel with its own monotone cumulative
``c(x) = sigmoid(g(x))`` where ``g`` is a small stack of positive-weight
affine maps interleaved with ``h + tanh(a) * tanh(h)`` gates. The
probability of integer symbol ``n`` is ``c(n + 1/2) - c(n - 1/2)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptPayload, NonFiniteInput, ShapeMismatch
from .rangecoder import RangeDecoder, RangeEncoder

PROB_BITS = 16
PROB_TOTAL = 1 << PROB_BITS
LIKELIHOOD_FLOOR = 1e-12
TAIL_MASS = 1e-6
MAX_TABLE_SYMBOLS = 4095
ESCAPE_BITS = 32


# ------------------------------------------------------------ quantization


def _finite(f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise NonFiniteInput("quantizer input contains NaN or Inf")
    return f


def quantize_round(f) -> np.ndarray:
    """Round half away from zero."""
    f = _finite(f)
    return (np.sign(f) * np.floor(np.abs(f) + 0.5)).astype(np.int64)


def quantize_noise(f, rng) -> np.ndarray:
    """Additive ``Uniform(-1/2, 1/2)`` noise, the training proxy for rounding."""
    f = _finite(f)
    rng = np.random.default_rng(rng)
    return f + rng.uniform(-0.5, 0.5, size=f.shape)


# ---------------------------------------------------------- factorized prior


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    # split by sign for accuracy in both tails
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class FactorizedPrior:
    """Per-channel parameters of the cumulative stack.

    ``matrices[i]`` has shape ``(C, out, in)`` and is passed through softplus
    before use, ``biases[i]`` is ``(C, out, 1)`` and ``factors[i]`` (one per
    gated stage) is ``(C, out, 1)``.
    """

    channels: int
    filters: tuple[int, ...] = (3, 3, 3)
    matrices: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)
    factors: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def init(cls, channels: int, rng, filters=(3, 3, 3), init_scale: float = 1.0):
        rng = np.random.default_rng(rng)
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1.0 / (len(filters) + 1))
        prior = cls(channels, tuple(filters))
        for i in range(len(filters) + 1):
            value = np.log(np.expm1(1.0 / scale / dims[i + 1]))
            prior.matrices.append(np.full((channels, dims[i + 1], dims[i]), value))
            prior.biases.append(rng.uniform(-0.5, 0.5, size=(channels, dims[i + 1], 1)))
            if i < len(filters):
                prior.factors.append(np.zeros((channels, dims[i + 1], 1)))
        return prior

    def parameters(self) -> list[np.ndarray]:
        """Flat list in the fixed order matrices, biases, factors."""
        return [*self.matrices, *self.biases, *self.factors]

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        names = [f"prior.matrix{i}" for i in range(len(self.matrices))]
        names += [f"prior.bias{i}" for i in range(len(self.biases))]
        names += [f"prior.factor{i}" for i in range(len(self.factors))]
        return list(zip(names, self.parameters()))

    @classmethod
    def from_parameters(cls, channels, filters, params):
        n = len(filters) + 1
        return cls(channels, tuple(filters), list(params[:n]), list(params[n : 2 * n]), list(params[2 * n :]))


def cumulative_logits(prior: FactorizedPrior, x: np.ndarray, with_cache: bool = False):
    """Logits of the cumulative for values ``x`` of shape ``(C, n)``."""
    h = x[:, None, :]
    cache = []
    last = len(prior.matrices) - 1
    for i, (m, b) in enumerate(zip(prior.matrices, prior.biases)):
        s = _softplus(m)
        z = np.matmul(s, h) + b
        if i < last:
            tz = np.tanh(z)
            ta = np.tanh(prior.factors[i])
            cache.append((h, s, tz, ta))
            h = z + ta * tz
        else:
            cache.append((h, s, None, None))
            h = z
    logits = h[:, 0, :]
    return (logits, cache) if with_cache else logits


def cumulative_logits_backward(prior: FactorizedPrior, cache, grad: np.ndarray):
    """Backprop ``grad`` (``(C, n)``) through :func:`cumulative_logits`.

    Returns ``(d_x, d_params)`` with ``d_params`` ordered like
    :meth:`FactorizedPrior.parameters`.
    """
    nstage = len(prior.matrices)
    d_m = [None] * nstage
    d_b = [None] * nstage
    d_a = [None] * (nstage - 1)
    g = grad[:, None, :]
    for i in reversed(range(nstage)):
        h, s, tz, ta = cache[i]
        if tz is not None:
            d_a[i] = np.sum(g * tz, axis=2, keepdims=True) * (1.0 - ta**2)
            g = g * (1.0 + ta * (1.0 - tz**2))
        d_b[i] = np.sum(g, axis=2, keepdims=True)
        d_s = np.matmul(g, h.transpose(0, 2, 1))
        d_m[i] = d_s * _sigmoid(prior.matrices[i])
        g = np.matmul(s.transpose(0, 2, 1), g)
    return g[:, 0, :], [*d_m, *d_b, *d_a]


def likelihood(prior: FactorizedPrior, values: np.ndarray, with_cache: bool = False):
    """Bin masses ``c(v + 1/2) - c(v - 1/2)`` for ``values`` of shape ``(N, C)``."""
    n = values.shape[0]
    x = values.T
    both = np.concatenate([x - 0.5, x + 0.5], axis=1)
    logits, cache = cumulative_logits(prior, both, with_cache=True)
    lower, upper = logits[:, :n], logits[:, n:]
    # evaluate on the side of the median where sigmoid differences stay accurate
    sign = np.where(lower + upper > 0, -1.0, 1.0)
    lik = np.abs(_sigmoid(sign * upper) - _sigmoid(sign * lower)).T
    if with_cache:
        return lik, (cache, lower, upper)
    return lik


def bits_from_likelihood(lik: np.ndarray) -> np.ndarray:
    return -np.log2(np.maximum(lik, LIKELIHOOD_FLOOR))


def rate_bits_with_grad(prior: FactorizedPrior, values: np.ndarray):
    """Total bits for real-valued ``values`` plus gradients w.r.t. values and prior."""
    lik, (cache, lower, upper) = likelihood(prior, values, with_cache=True)
    total = float(bits_from_likelihood(lik).sum())
    d_lik = np.where(lik > LIKELIHOOD_FLOOR, -1.0 / (np.maximum(lik, LIKELIHOOD_FLOOR) * np.log(2.0)), 0.0).T
    # d/du [sigmoid(u) - sigmoid(l)] = sigmoid'(u); sigmoid' is even so sign drops out
    d_upper = d_lik * _sigmoid(upper) * _sigmoid(-upper)
    d_lower = -d_lik * _sigmoid(lower) * _sigmoid(-lower)
    d_both, d_params = cumulative_logits_backward(prior, cache, np.concatenate([d_lower, d_upper], axis=1))
    n = values.shape[0]
    d_values = (d_both[:, :n] + d_both[:, n:]).T
    return total, d_values, d_params


def cdf(prior: FactorizedPrior, channel: int, x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    xs = np.zeros((prior.channels, len(x)))
    xs[channel] = x
    return _sigmoid(cumulative_logits(prior, xs)[channel])


def prior_pmf(prior: FactorizedPrior, channel: int, n) -> np.ndarray | float:
    """Probability of integer symbol(s) ``n`` in ``channel``, floored at 1e-12."""
    scalar = np.ndim(n) == 0
    vals = np.atleast_1d(np.asarray(n, dtype=np.float64))
    full = np.zeros((len(vals), prior.channels))
    full[:, channel] = vals
    p = np.maximum(likelihood(prior, full)[:, channel], LIKELIHOOD_FLOOR)
    return float(p[0]) if scalar else p


def rate_bits(fhat, prior: FactorizedPrior) -> float:
    """Sum of ``-log2 pmf`` over every element of the ``N x C`` symbol matrix."""
    fhat = np.asarray(fhat, dtype=np.float64)
    if fhat.ndim != 2 or fhat.shape[1] != prior.channels:
        raise ShapeMismatch(f"expected N x {prior.channels} symbols, got {fhat.shape}")
    if fhat.shape[0] == 0:
        return 0.0
    return float(bits_from_likelihood(likelihood(prior, fhat)).sum())


# ----------------------------------------------------------------- tables


@dataclass(frozen=True, eq=False)
class PmfTable:
    """Integer frequencies for symbols ``n_min..n_max`` plus a trailing escape."""

    channel: int
    n_min: int
    n_max: int
    freq: np.ndarray

    @property
    def escape(self) -> int:
        return self.n_max - self.n_min + 1

    @property
    def cum(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.freq)])

    def equals(self, other: "PmfTable") -> bool:
        return (
            self.channel == other.channel
            and self.n_min == other.n_min
            and self.n_max == other.n_max
            and np.array_equal(self.freq, other.freq)
        )


def _upper_tail(prior, channel, n):
    """Mass above ``n + 1/2``."""
    xs = np.zeros((prior.channels, 1))
    xs[channel] = n + 0.5
    return float(_sigmoid(-cumulative_logits(prior, xs)[channel])[0])


def _lower_tail(prior, channel, n):
    """Mass below ``n - 1/2``."""
    xs = np.zeros((prior.channels, 1))
    xs[channel] = n - 0.5
    return float(_sigmoid(cumulative_logits(prior, xs)[channel])[0])


def _first_true(pred, start, step):
    """First integer from ``start`` stepping by ``step`` where monotone ``pred`` holds."""
    if pred(start):
        return start
    prev, jump = start, 1
    while True:
        cur = start + step * jump
        if pred(cur):
            break
        prev = cur
        jump *= 2
        if jump > 1 << 31:
            raise ValueError("prior cumulative never reaches the tail target")
    while abs(cur - prev) > 1:
        mid = (prev + cur) // 2
        if pred(mid):
            cur = mid
        else:
            prev = mid
    return cur


def apportion(probs: np.ndarray, total: int = PROB_TOTAL) -> np.ndarray:
    """Integer frequencies summing to ``total``, each >= 1.

    Floors of ``p * total`` (raised to 1), then the remaining units go to the
    largest fractional remainders; any surplus is taken from the mode.
    """
    raw = np.asarray(probs, dtype=np.float64) * total
    freq = np.maximum(np.floor(raw).astype(np.int64), 1)
    deficit = total - int(freq.sum())
    if deficit > 0:
        rem = raw - np.floor(raw)
        rem[raw < 1.0] = -1.0  # already raised to 1
        order = np.lexsort((np.arange(len(rem)), -rem))
        give = min(deficit, len(order))
        freq[order[:give]] += 1
        deficit -= give
        freq[int(np.argmax(freq))] += deficit
    while deficit < 0:
        mode = int(np.argmax(freq))
        take = min(-deficit, int(freq[mode]) - 1)
        if take <= 0:
            raise ValueError("cannot apportion: too many symbols for the total")
        freq[mode] -= take
        deficit += take
    return freq


def build_pmf_table(prior: FactorizedPrior, channel: int) -> PmfTable:
    half = TAIL_MASS / 2

    def at_or_above_median(n):
        return _lower_tail(prior, channel, n + 1) >= 0.5

    if at_or_above_median(0):
        median = _first_true(lambda n: not at_or_above_median(n), 0, -1) + 1
    else:
        median = _first_true(at_or_above_median, 0, 1)
    n_min = _first_true(lambda n: _lower_tail(prior, channel, n) <= half, median, -1)
    n_max = _first_true(lambda n: _upper_tail(prior, channel, n) <= half, median, 1)
    if n_max - n_min + 1 > MAX_TABLE_SYMBOLS:
        n_min = max(n_min, median - MAX_TABLE_SYMBOLS // 2)
        n_max = n_min + MAX_TABLE_SYMBOLS - 1
    ns = np.arange(n_min, n_max + 1)
    p = np.atleast_1d(prior_pmf(prior, channel, ns))
    escape = max(0.0, 1.0 - float(p.sum()))
    freq = apportion(np.concatenate([p, [escape]]))
    return PmfTable(channel, int(n_min), int(n_max), freq)


def build_pmf_tables(prior: FactorizedPrior) -> list[PmfTable]:
    return [build_pmf_table(prior, c) for c in range(prior.channels)]


# ------------------------------------------------------------- range coding


def range_encode(symbols, tables) -> bytes:
    """Code ``symbols[i]`` with ``tables[i]``; out-of-range values escape to 32 raw bits."""
    enc = RangeEncoder()
    cums = {}
    for s, t in zip(np.asarray(symbols, dtype=np.int64).tolist(), tables):
        cum = cums.get(id(t))
        if cum is None:
            cum = cums[id(t)] = t.cum.tolist()
        if t.n_min <= s <= t.n_max:
            i = s - t.n_min
        else:
            i = t.escape
        enc.encode(cum[i], cum[i + 1] - cum[i], PROB_TOTAL)
        if i == t.escape:
            if not -(1 << 31) <= s < 1 << 31:
                raise ValueError(f"symbol {s} does not fit the 32-bit escape payload")
            raw = s & 0xFFFFFFFF
            enc.encode_bits(raw >> 16, 16)
            enc.encode_bits(raw & 0xFFFF, 16)
    return enc.finish()


def range_decode(data: bytes, count: int, tables) -> np.ndarray:
    if count == 0:
        if len(data) not in (0, 4):
            # an empty stream still carries the 4 flush bytes
            raise CorruptPayload("non-empty payload for zero symbols")
        return np.zeros(0, dtype=np.int64)
    dec = RangeDecoder(data)
    out = np.empty(count, dtype=np.int64)
    cums = {}
    for k in range(count):
        t = tables[k]
        cum = cums.get(id(t))
        if cum is None:
            cum = cums[id(t)] = t.cum.tolist()
        target = dec.get_freq(PROB_TOTAL)
        i = int(np.searchsorted(cum, target, side="right")) - 1
        dec.consume(cum[i], cum[i + 1] - cum[i])
        if i == t.escape:
            raw = (dec.decode_bits(16) << 16) | dec.decode_bits(16)
            out[k] = raw - (1 << 32) if raw & 0x80000000 else raw
        else:
            out[k] = t.n_min + i
    dec.finish()
    return out


def table_cost_bits(symbols, tables) -> float:
    """Ideal cost of ``symbols`` under the integer tables (escape payload included)."""
    bits = 0.0
    for s, t in zip(np.asarray(symbols, dtype=np.int64).tolist(), tables):
        if t.n_min <= s <= t.n_max:
            bits -= np.log2(t.freq[s - t.n_min] / PROB_TOTAL)
        else:
            bits -= np.log2(t.freq[t.escape] / PROB_TOTAL)
            bits += ESCAPE_BITS
    return float(bits)


def feature_symbol_order(fhat: np.ndarray, tables: list[PmfTable]):
    """Channel-major flattening (all rows of channel 0, then channel 1, ...)."""
    fhat = np.asarray(fhat, dtype=np.int64)
    n, c = fhat.shape
    symbols = fhat.T.reshape(-1)
    per_symbol = [tables[ch] for ch in range(c) for _ in range(n)]
    return symbols, per_symbol


def encode_features(fhat, tables) -> bytes:
    symbols, per_symbol = feature_symbol_order(fhat, tables)
    return range_encode(symbols, per_symbol)


def decode_features(data: bytes, rows: int, tables) -> np.ndarray:
    c = len(tables)
    per_symbol = [tables[ch] for ch in range(c) for _ in range(rows)]
    flat = range_decode(data, rows * c, per_symbol)
    return flat.reshape(c, rows).T.copy()
