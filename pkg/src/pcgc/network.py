"""Multiscale sparse-convolutional autoencoder.

Encoder: ``num_scales`` stages of conv 3^3 -> ReLU -> stride-2 conv -> ReLU ->
IRN block, then a 3^3 conv to the latent width. Decoder: per scale, a
stride-2 transposed conv -> ReLU -> IRN block -> conv 3^3 -> ReLU, followed
by a one-channel 3^3 classification head. In inference the top-k candidates
survive to the next scale; in training every candidate is carried forward.

All forward code runs on a :class:`~pcgc.autodiff.Tape`; the plain-array
entry points below use a gradient-free tape.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .autodiff import Node, Tape
from .entropy import FactorizedPrior
from .errors import ChannelMismatch, EmptyInput, ShapeMismatch
from .tensor import SparseTensor

CONV_WIDTH = 3


@dataclass(frozen=True)
class NetConfig:
    num_scales: int = 3
    channels: tuple[int, ...] = (16, 32, 64)
    latent_channels: int = 8
    irn_units_per_block: int = 3
    prior_filters: tuple[int, ...] = (3, 3, 3)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "prior_filters", tuple(int(c) for c in self.prior_filters))
        if self.num_scales < 1:
            raise ValueError("num_scales must be >= 1")
        if len(self.channels) != self.num_scales:
            raise ValueError(f"need {self.num_scales} channel widths, got {len(self.channels)}")
        if any(c < 1 for c in self.channels):
            raise ValueError("channel widths must be positive")
        if self.irn_units_per_block and any(c % 4 for c in self.channels):
            raise ValueError("IRN blocks need channel widths that are multiples of 4")
        if self.latent_channels < 1:
            raise ValueError("latent_channels must be >= 1")
        if self.irn_units_per_block < 0:
            raise ValueError("irn_units_per_block must be >= 0")


def _conv_shapes(cfg: NetConfig) -> list[tuple[str, int, int, int]]:
    """(name, kernel width, cin, cout) for every convolution, in parameter order."""
    shapes = []

    def irn(prefix, c):
        for u in range(cfg.irn_units_per_block):
            shapes.append((f"{prefix}.irn{u}.a", 1, c, c // 2))
            shapes.append((f"{prefix}.irn{u}.b1", 3, c, c // 4))
            shapes.append((f"{prefix}.irn{u}.b2", 3, c // 4, c // 2))

    cin = 1
    for j, c in enumerate(cfg.channels):
        shapes.append((f"enc{j}.conv", CONV_WIDTH, cin, c))
        shapes.append((f"enc{j}.down", 2, c, c))
        irn(f"enc{j}", c)
        cin = c
    shapes.append(("enc.latent", CONV_WIDTH, cin, cfg.latent_channels))
    cin = cfg.latent_channels
    for j in reversed(range(cfg.num_scales)):
        c = cfg.channels[j]
        shapes.append((f"dec{j}.up", 2, cin, c))
        irn(f"dec{j}", c)
        shapes.append((f"dec{j}.conv", CONV_WIDTH, c, c))
        shapes.append((f"dec{j}.cls", CONV_WIDTH, c, 1))
        cin = c
    return shapes


@dataclass
class CodecModel:
    """Network weights plus factorized-prior parameters, in a fixed order."""

    config: NetConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: NetConfig | None = None, seed=0) -> "CodecModel":
        config = config or NetConfig()
        rng = np.random.default_rng(seed)
        params = {}
        for name, width, cin, cout in _conv_shapes(config):
            fan_in = width**3 * cin
            bound = 1.0 / np.sqrt(fan_in)
            params[f"{name}.w"] = rng.uniform(-bound, bound, size=(width**3, cin, cout))
            params[f"{name}.b"] = np.zeros(cout)
        prior = FactorizedPrior.init(config.latent_channels, rng, config.prior_filters)
        params.update(prior.named_parameters())
        return cls(config, params)

    def prior(self) -> FactorizedPrior:
        vals = [v for k, v in self.params.items() if k.startswith("prior.")]
        return FactorizedPrior.from_parameters(self.config.latent_channels, self.config.prior_filters, vals)

    def prior_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("prior.")]

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "CodecModel":
        return CodecModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def equals(self, other: "CodecModel") -> bool:
        return (
            self.config == other.config
            and list(self.params) == list(other.params)
            and all(np.array_equal(self.params[k], other.params[k]) for k in self.params)
        )

    def conv_weights(self, name: str, stride_kind: str = "same") -> tensor.ConvWeights:
        w = self.params[f"{name}.w"]
        width = round(w.shape[0] ** (1 / 3))
        return tensor.ConvWeights(w, self.params[f"{name}.b"], width, stride_kind)


def bind(model: CodecModel, tape: Tape) -> dict[str, Node]:
    """Register every parameter on ``tape``."""
    if tape.grad_enabled:
        return {k: tape.param(v) for k, v in model.params.items()}
    return {k: tape.const(v) for k, v in model.params.items()}


# ----------------------------------------------------------- building blocks


class _Maps:
    """Neighbor maps cached per coordinate array, shared by every conv at that scale."""

    def __init__(self):
        self._same = {}

    def same(self, coords: np.ndarray, width: int) -> tuple[np.ndarray, np.ndarray]:
        """``(nbr, reversed nbr)``; the reversed copy feeds the adjoint gather."""
        key = (id(coords), width)
        hit = self._same.get(key)
        if hit is None or hit[0] is not coords:
            nbr = tensor.neighbor_map(coords, width)
            hit = (coords, nbr, np.ascontiguousarray(nbr[:, ::-1]))
            self._same[key] = hit
        return hit[1], hit[2]


def _conv(tape, P, name, x, coords, maps: _Maps):
    w = P[f"{name}.w"]
    width = round(w.value.shape[0] ** (1 / 3))
    return tape.conv_same(x, w, P[f"{name}.b"], *maps.same(coords, width))


def irn_unit_node(tape: Tape, P, prefix: str, x: Node, coords: np.ndarray, maps: _Maps) -> Node:
    a = tape.relu(_conv(tape, P, f"{prefix}.a", x, coords, maps))
    b = tape.relu(_conv(tape, P, f"{prefix}.b1", x, coords, maps))
    b = tape.relu(_conv(tape, P, f"{prefix}.b2", b, coords, maps))
    return tape.add(tape.concat([a, b]), x)


def irn_block_node(tape, P, prefix, cfg: NetConfig, x, coords, maps):
    for u in range(cfg.irn_units_per_block):
        x = irn_unit_node(tape, P, f"{prefix}.irn{u}", x, coords, maps)
    return x


def encode_latent_node(tape: Tape, P, cfg: NetConfig, coords: np.ndarray, maps: _Maps | None = None):
    """Returns (latent coordinates, latent feature node)."""
    if len(coords) == 0:
        raise EmptyInput("cannot encode an empty point cloud")
    maps = maps or _Maps()
    h = tape.const(np.ones((len(coords), 1)))
    for j in range(cfg.num_scales):
        h = tape.relu(_conv(tape, P, f"enc{j}.conv", h, coords, maps))
        dmap = tensor.down_map(coords)
        h = tape.relu(tape.conv_down(h, P[f"enc{j}.down.w"], P[f"enc{j}.down.b"], dmap))
        coords = dmap.out_coords
        h = irn_block_node(tape, P, f"enc{j}", cfg, h, coords, maps)
    return coords, _conv(tape, P, "enc.latent", h, coords, maps)


@dataclass
class ScaleResult:
    """One decoder scale: candidates after upsampling, their occupancy probabilities, survivors."""

    candidates: SparseTensor
    probabilities: np.ndarray
    kept: np.ndarray
    prob_node: Node | None = None


def topk_select(candidates, p, k: int) -> np.ndarray:
    """Indices of the ``min(k, n)`` highest ``p``; ties go to the canonically smaller coordinate."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    n = len(p)
    if len(candidates) != n:
        raise ShapeMismatch(f"{len(candidates)} candidates, {n} probabilities")
    k = max(0, min(int(k), n))
    order = np.lexsort((np.arange(n), -p))
    return np.sort(order[:k])


def decode_hierarchical_node(
    tape: Tape,
    P,
    cfg: NetConfig,
    c_y: np.ndarray,
    f_hat: Node,
    k_list=None,
    mode: str = "infer",
    maps: _Maps | None = None,
    keep_candidate_feats: bool = False,
) -> list[ScaleResult]:
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if len(c_y) == 0:
        raise EmptyInput("no latent coordinates to decode")
    if f_hat.value.shape[0] != len(c_y):
        raise ShapeMismatch(f"{len(c_y)} latent coordinates, {f_hat.value.shape[0]} feature rows")
    if f_hat.value.shape[1] != cfg.latent_channels:
        raise ChannelMismatch(f"expected {cfg.latent_channels} latent channels, got {f_hat.value.shape[1]}")
    if mode == "infer" and (k_list is None or len(k_list) != cfg.num_scales):
        raise ShapeMismatch(f"k_list must hold {cfg.num_scales} values in infer mode")
    maps = maps or _Maps()
    coords, h = c_y, f_hat
    results = []
    for step, j in enumerate(reversed(range(cfg.num_scales))):
        umap = tensor.up_map(coords)
        h = tape.relu(tape.conv_up(h, P[f"dec{j}.up.w"], P[f"dec{j}.up.b"], umap))
        coords = umap.out_coords
        h = irn_block_node(tape, P, f"dec{j}", cfg, h, coords, maps)
        h = tape.relu(_conv(tape, P, f"dec{j}.conv", h, coords, maps))
        prob = tape.sigmoid(_conv(tape, P, f"dec{j}.cls", h, coords, maps))
        p = prob.value[:, 0]
        cand = SparseTensor(coords, h.value if keep_candidate_feats else np.zeros((len(coords), 0)))
        if mode == "infer":
            idx = topk_select(coords, p, k_list[step])
            kept = coords[idx]
            h = tape.take_rows(h, idx)
            coords = kept
        else:
            kept = coords
        results.append(ScaleResult(cand, p, kept, prob))
    return results


def ground_truth_at_scale(c_x, j: int) -> np.ndarray:
    """Unique ``floor(c / 2**j)`` in canonical order."""
    return tensor.downsample_coords(tensor.as_coords(c_x), j)


def occupancy_labels(candidates: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return (tensor.lookup(gt, candidates) >= 0).astype(np.float64)


# -------------------------------------------------------- plain-array API


def _weights_node(tape, w: tensor.ConvWeights):
    return tape.const(w.kernel), tape.const(w.bias)


def irn_unit(t: SparseTensor, params: dict[str, tensor.ConvWeights]) -> SparseTensor:
    """IRN unit on a sparse tensor. ``params`` maps ``a``, ``b1``, ``b2`` to weights."""
    c = t.channels
    if c % 4:
        raise ChannelMismatch("IRN units need a channel count divisible by 4")
    for key, cin in (("a", c), ("b1", c), ("b2", c // 4)):
        if params[key].cin != cin:
            raise ChannelMismatch(f"IRN branch {key} expects {params[key].cin} channels, got {cin}")
    tape = Tape(grad_enabled=False)
    P = {}
    for key, w in params.items():
        P[f"u.{key}.w"], P[f"u.{key}.b"] = _weights_node(tape, w)
    out = irn_unit_node(tape, P, "u", tape.const(t.feats), t.coords, _Maps())
    return SparseTensor(t.coords, out.value)


def encode_latent(x: SparseTensor, model: CodecModel) -> SparseTensor:
    tape = Tape(grad_enabled=False)
    coords, f = encode_latent_node(tape, bind(model, tape), model.config, x.coords)
    return SparseTensor(coords, f.value)


def classify(t: SparseTensor, head: tensor.ConvWeights) -> np.ndarray:
    if head.cout != 1:
        raise ChannelMismatch("classification head must output one channel")
    logits = tensor.conv_same(t, head).feats[:, 0]
    return 1.0 / (1.0 + np.exp(-logits))


def decode_hierarchical(c_y, f_hat, k_list, model: CodecModel, mode: str = "infer") -> list[ScaleResult]:
    tape = Tape(grad_enabled=False)
    c_y = tensor.as_coords(c_y)
    f = np.asarray(f_hat, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] != len(c_y):
        raise ShapeMismatch(f"{len(c_y)} latent coordinates, feature shape {f.shape}")
    return decode_hierarchical_node(tape, bind(model, tape), model.config, c_y, tape.const(f), k_list, mode)


def bce_loss(p, labels) -> float:
    """Mean binary cross-entropy in nats with probabilities clamped to [1e-12, 1 - 1e-12]."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ShapeMismatch(f"{p.shape[0]} probabilities, {y.shape[0]} labels")
    return float(Tape(grad_enabled=False).bce(Node(p), y).value)


def multiscale_distortion(results: list[ScaleResult], gt_per_scale) -> float:
    """Unweighted mean of per-scale BCE; ``gt_per_scale[i]`` pairs with ``results[i]``."""
    if len(results) != len(gt_per_scale):
        raise ShapeMismatch(f"{len(results)} scales but {len(gt_per_scale)} ground-truth sets")
    losses = [
        bce_loss(r.probabilities, occupancy_labels(r.candidates.coords, tensor.as_coords(gt)))
        for r, gt in zip(results, gt_per_scale)
    ]
    return float(np.mean(losses))
