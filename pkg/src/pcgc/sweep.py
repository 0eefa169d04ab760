"""Toy-scale training runs and the lambda rate-distortion sweep.

Trained models are cached in a directory next to a JSON manifest holding
the run configuration, a fingerprint of the training source, wall time and
model hash. A cached model is reused only if configuration and fingerprint
match and its file still hashes to the recorded value.
"""
from __future__ import annotations

import hashlib
import inspect
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff, entropy, io, network, tensor, training
from .codec import decode_coords, encode_coords, reference_reconstruction
from .io import Bitstream, VoxelFrame, gen_toy_dataset, load_model, save_model
from .metrics import RDPoint, d1_psnr, d2_psnr
from .network import CodecModel, NetConfig
from .training import TOY_NET, TrainConfig, evaluate_loss, train

log = logging.getLogger(__name__)

SWEEP_LAMBDAS = (0.25, 1.0, 4.0, 10.0)


@dataclass(frozen=True)
class ToyRun:
    steps: int = 2000
    batch_size: int = 8
    seed: int = 7
    toy_seed: int = 0
    toy_count: int = 1024
    heldout_seed: int = 1
    heldout_count: int = 32
    bitdepth: int = 6
    lr_start: float = 8e-4
    lr_end: float = 2e-5
    compute_dtype: str = "float32"
    net: NetConfig = field(default_factory=lambda: TOY_NET)

    def train_config(self, lam: float) -> TrainConfig:
        return TrainConfig(
            lam=lam, steps=self.steps, batch_size=self.batch_size, lr_start=self.lr_start,
            lr_end=self.lr_end, seed=self.seed, net=self.net, log_every=100,
            compute_dtype=self.compute_dtype,
        )

    def as_dict(self) -> dict:
        d = asdict(self)
        d["net"] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.net).items()}
        return d


def code_fingerprint() -> str:
    """Hash of the source that determines a trained model: the training stack and the toy generator."""
    parts = [tensor, autodiff, entropy, network, training]
    parts += [io._random_rotation, io._surface_samples, io.toy_cloud, io.gen_toy_dataset]
    h = hashlib.sha256()
    for obj in parts:
        h.update(inspect.getsource(obj).encode())
    return h.hexdigest()[:16]


def training_set(run: ToyRun) -> list[np.ndarray]:
    return gen_toy_dataset(run.toy_seed, run.toy_count, run.bitdepth)


def heldout_set(run: ToyRun) -> list[np.ndarray]:
    return gen_toy_dataset(run.heldout_seed, run.heldout_count, run.bitdepth)


def _paths(out_dir: Path, lam: float) -> tuple[Path, Path]:
    tag = f"lambda_{lam:g}"
    return out_dir / f"{tag}.pcgm", out_dir / f"{tag}.json"


def load_cached(lam: float, run: ToyRun, out_dir) -> tuple[CodecModel, dict] | None:
    model_path, manifest_path = _paths(Path(out_dir), lam)
    if not (model_path.exists() and manifest_path.exists()):
        return None
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("run") != run.as_dict() or manifest.get("lambda") != lam:
        return None
    if manifest.get("code") != code_fingerprint():
        return None
    model, digest = load_model(model_path)
    if f"{digest:016x}" != manifest.get("model_hash"):
        return None
    return model, manifest


def train_lambda(lam: float, run: ToyRun, out_dir, retrain: bool = False, clouds=None) -> tuple[CodecModel, dict]:
    """Train (or reuse) the toy model for one lambda; returns the model and its manifest."""
    out_dir = Path(out_dir)
    if not retrain:
        hit = load_cached(lam, run, out_dir)
        if hit is not None:
            return hit
    out_dir.mkdir(parents=True, exist_ok=True)
    clouds = clouds if clouds is not None else training_set(run)
    t0 = time.perf_counter()
    model, history = train(clouds, run.train_config(lam))
    seconds = time.perf_counter() - t0
    model_path, manifest_path = _paths(out_dir, lam)
    digest = save_model(model, model_path)
    window = 10
    manifest = {
        "lambda": lam,
        "run": run.as_dict(),
        "code": code_fingerprint(),
        "seconds": seconds,
        "model_hash": f"{digest:016x}",
        "loss_first": float(np.mean(history.loss[:window])),
        "loss_last": float(np.mean(history.loss[-window:])),
        "scale_bce_last": np.mean(history.scale_bce[-window:], axis=0).tolist(),
        "loss_every_100": [float(np.mean(history.loss[i : i + window])) for i in range(0, run.steps, 100)],
    }
    manifest_path.write_text(json.dumps(manifest, indent=1))
    log.info("lambda %g trained in %.0fs", lam, seconds)
    return model, manifest


def init_model(run: ToyRun) -> CodecModel:
    """The initialization ``train`` starts from for this run."""
    seeds = np.random.SeedSequence(run.seed).spawn(3)
    return CodecModel.init(run.net, np.random.default_rng(seeds[0]))


def progress(model: CodecModel, run: ToyRun, lam: float = 1.0, clouds=None) -> dict:
    """J and per-scale BCE over the training set, at initialization and for ``model``."""
    clouds = clouds if clouds is not None else training_set(run)
    before = evaluate_loss(clouds, init_model(run), lam, seed=0)
    after = evaluate_loss(clouds, model, lam, seed=0)
    return {"before": before, "after": after, "ratio": after["loss"] / before["loss"]}


def rd_point(model: CodecModel, clouds, bitdepth: int, label: str = "") -> tuple[RDPoint, dict]:
    """Encode and decode every cloud through the bitstream; pooled bpp, mean PSNRs."""
    peak = 2**bitdepth - 1
    bits = {"total": 0, "coords": 0, "features": 0}
    points = 0
    p1, p2 = [], []
    frame = VoxelFrame((0.0, 0.0, 0.0), 1.0)
    for x in clouds:
        stream = encode_coords(x, model, bitdepth, frame)
        data = stream.to_bytes()
        rec = decode_coords(Bitstream.from_bytes(data), model)
        sections = stream.section_bits()
        bits["total"] += 8 * len(data)
        bits["coords"] += sections["coords"]
        bits["features"] += sections["features"]
        points += len(x)
        p1.append(d1_psnr(rec, x, peak)[1])
        p2.append(d2_psnr(rec, x, peak=peak)[1])
    extra = {
        "feature_bpp": bits["features"] / points,
        "coord_bpp": bits["coords"] / points,
        "points": points,
    }
    return RDPoint(bits["total"] / points, float(np.mean(p1)), float(np.mean(p2)), label), extra


def consistent(model: CodecModel, x, bitdepth: int) -> bool:
    """Bitstream decode equals in-process inference on rounded latents."""
    frame = VoxelFrame((0.0, 0.0, 0.0), 1.0)
    data = encode_coords(x, model, bitdepth, frame).to_bytes()
    rec = decode_coords(Bitstream.from_bytes(data), model)
    return len(rec) == len(x) and np.array_equal(rec, reference_reconstruction(x, model))


def monotone_with_slack(values, tol: float, increasing: bool = True) -> bool:
    """Monotone along the sequence, tolerating one adjacent violation of at most ``tol``."""
    steps = np.diff(np.asarray(values, dtype=float))
    if not increasing:
        steps = -steps
    bad = steps[steps < 0]
    return len(bad) == 0 or (len(bad) == 1 and -bad[0] <= tol)
