"""Command-line interface: ``pcgc {train,encode,decode,eval,bdrate,selftest}``.

Option values resolve as command-line flag, then ``--config`` file
(``key = value`` lines), then built-in default. ``PCGC_SEED`` supplies the
seed default.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .errors import PCGCError

DEFAULTS = {
    "train": {
        "lambda": 1.0,
        "steps": 2000,
        "batch_size": 8,
        "lr_start": 8e-4,
        "lr_end": 2e-5,
        "seed": 0,
        "toy_count": 128,
        "toy_seed": 0,
        "bitdepth": 6,
        "channels": "8,32,64",
        "latent_channels": 8,
        "irn_units": 1,
        "dtype": "float32",
        "checkpoint_every": 0,
        "log_every": 100,
    },
    "encode": {"bitdepth": 6, "k_multiplier": 1.0},
    "decode": {"format": "binary"},
    "eval": {"bitdepth": 6, "label": "", "normal_k": 12},
    "bdrate": {"metric": "d1"},
    "selftest": {"seed": 0},
}

# per-command keys that must resolve to a value (flag or config file)
REQUIRED = {
    "train": ("out",),
    "encode": ("input", "model", "out"),
    "decode": ("input", "model", "out"),
    "eval": ("rec", "ref"),
    "bdrate": ("curve_a", "curve_b"),
    "selftest": (),
}

CASTS = {
    "lambda": float, "steps": int, "batch_size": int, "lr_start": float, "lr_end": float,
    "seed": int, "toy_count": int, "toy_seed": int, "bitdepth": int, "latent_channels": int,
    "irn_units": int, "checkpoint_every": int, "log_every": int, "k_multiplier": float,
    "normal_k": int, "toy": lambda v: str(v).lower() in ("1", "true", "yes", "on"),
}


class UsageError(Exception):
    pass


def read_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment, dashes in keys become underscores."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(command: str, flags: dict) -> dict:
    """Merge built-in defaults, the environment seed, the config file and flags."""
    merged = dict(DEFAULTS[command])
    if "seed" in merged and os.environ.get("PCGC_SEED"):
        merged["seed"] = os.environ["PCGC_SEED"]
    if flags.get("config"):
        merged.update(read_config(flags["config"]))
    merged.update({k: v for k, v in flags.items() if v is not None and k not in ("command", "config")})
    for key, cast in CASTS.items():
        if key in merged and merged[key] is not None:
            try:
                merged[key] = cast(merged[key])
            except ValueError as exc:
                raise UsageError(f"invalid value for {key}: {merged[key]!r}") from exc
    missing = [k for k in REQUIRED[command] if merged.get(k) in (None, "")]
    if missing:
        raise UsageError(f"{command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return merged


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcgc", description="Learned point cloud geometry codec")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, argument_default=None)
        sp.add_argument("--config", help="file of key = value lines")
        return sp

    t = add("train", "train a model on the toy dataset or a directory of PLY files")
    t.add_argument("--toy", action="store_const", const="true", help="generate the synthetic toy dataset")
    t.add_argument("--data", help="directory of PLY files")
    t.add_argument("--toy-count", type=int)
    t.add_argument("--toy-seed", type=int)
    t.add_argument("--bitdepth", type=int)
    t.add_argument("--lambda", dest="lambda", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr-start", type=float)
    t.add_argument("--lr-end", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--channels", help="comma-separated widths, finest first")
    t.add_argument("--latent-channels", type=int)
    t.add_argument("--irn-units", type=int)
    t.add_argument("--dtype", choices=("float32", "float64"))
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--log-every", type=int)
    t.add_argument("--out", help="output model file")

    e = add("encode", "compress a PLY file")
    e.add_argument("input", nargs="?")
    e.add_argument("--model")
    e.add_argument("--out")
    e.add_argument("--bitdepth", type=int)
    e.add_argument("--k-multiplier", type=float)

    d = add("decode", "decompress a bitstream to PLY")
    d.add_argument("input", nargs="?")
    d.add_argument("--model")
    d.add_argument("--out")
    d.add_argument("--format", choices=("binary", "ascii"))

    v = add("eval", "D1/D2 PSNR of a reconstruction as one CSV row")
    v.add_argument("--rec")
    v.add_argument("--ref")
    v.add_argument("--bitstream", help="bitstream whose size gives the bpp column")
    v.add_argument("--bitdepth", type=int)
    v.add_argument("--label")
    v.add_argument("--normal-k", type=int)
    v.add_argument("--csv", help="append the row to this CSV file")

    b = add("bdrate", "BD-Rate of curve B against curve A")
    b.add_argument("curve_a", nargs="?")
    b.add_argument("curve_b", nargs="?")
    b.add_argument("--metric", choices=("d1", "d2"))

    s = add("selftest", "run the built-in oracle checks")
    s.add_argument("--seed", type=int)
    return p


# ---------------------------------------------------------------- commands


def cmd_train(o: dict) -> int:
    import numpy as np

    from .io import gen_toy_dataset, read_ply, save_model, voxelize
    from .network import NetConfig
    from .training import TrainConfig, train

    if bool(o.get("toy")) == bool(o.get("data")):
        raise UsageError("train: give exactly one of --toy or --data")
    if o.get("toy"):
        dataset = gen_toy_dataset(o["toy_seed"], o["toy_count"], o["bitdepth"])
    else:
        files = sorted(Path(o["data"]).glob("*.ply"))
        dataset = [voxelize(read_ply(f), o["bitdepth"]) for f in files]
    channels = tuple(int(c) for c in str(o["channels"]).split(","))
    net = NetConfig(len(channels), channels, o["latent_channels"], o["irn_units"])
    cfg = TrainConfig(
        lam=o["lambda"], steps=o["steps"], batch_size=o["batch_size"], lr_start=o["lr_start"],
        lr_end=o["lr_end"], seed=o["seed"], net=net, checkpoint_every=o["checkpoint_every"],
        checkpoint_path=o["out"], log_every=o["log_every"], compute_dtype=o["dtype"],
    )
    model, log = train(dataset, cfg)
    digest = save_model(model, o["out"])
    first = float(np.mean(log.loss[:10])) if log.loss else float("nan")
    last = float(np.mean(log.loss[-10:])) if log.loss else float("nan")
    print(f"trained {model.num_parameters()} parameters on {len(dataset)} clouds in {log.seconds:.1f}s; "
          f"J {first:.4f} -> {last:.4f}; model {o['out']} hash {digest:016x}")
    return 0


def cmd_encode(o: dict) -> int:
    from .codec import encode_file

    stats = encode_file(o["input"], o["model"], o["out"], o["bitdepth"], o["k_multiplier"])
    print(stats.summary())
    return 0


def cmd_decode(o: dict) -> int:
    from .codec import decode_file

    stats = decode_file(o["input"], o["model"], o["out"], o["format"])
    print(f"decoded {stats.n_points} points to {o['out']}")
    return 0


def cmd_eval(o: dict) -> int:
    from .io import Bitstream, read_ply, voxel_frame, voxelize
    from .metrics import RDPoint, append_rd_csv, bpp, d1_psnr, d2_psnr

    ref_cloud = read_ply(o["ref"])
    frame = voxel_frame(ref_cloud, o["bitdepth"])
    ref = voxelize(ref_cloud, o["bitdepth"], frame)
    rec = voxelize(read_ply(o["rec"]), o["bitdepth"], frame)
    peak = 2 ** o["bitdepth"] - 1
    rate = 0.0
    if o.get("bitstream"):
        data = Path(o["bitstream"]).read_bytes()
        rate = bpp(8 * len(data), Bitstream.from_bytes(data).n_input_points)
    _, p1 = d1_psnr(rec, ref, peak)
    _, p2 = d2_psnr(rec, ref, peak=peak, k=o["normal_k"])
    point = RDPoint(rate, p1, p2, o["label"])
    if o.get("csv"):
        append_rd_csv(point, o["csv"])
    print(f"{point.label},{point.bpp!r},{point.d1_psnr!r},{point.d2_psnr!r}")
    return 0


def cmd_bdrate(o: dict) -> int:
    from .metrics import RDCurve, bd_rate, read_rd_csv

    a = RDCurve(tuple(read_rd_csv(o["curve_a"])))
    b = RDCurve(tuple(read_rd_csv(o["curve_b"])))
    print(f"BD-Rate ({o['metric'].upper()}): {bd_rate(a, b, o['metric']):+.3f}%")
    return 0


def cmd_selftest(o: dict) -> int:
    from .selftest import run

    return 0 if run(o["seed"]) else 1


COMMANDS = {
    "train": cmd_train, "encode": cmd_encode, "decode": cmd_decode,
    "eval": cmd_eval, "bdrate": cmd_bdrate, "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on malformed usage
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        opts = resolve(args.command, vars(args))
        return COMMANDS[args.command](opts)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"pcgc: error: {exc}", file=sys.stderr)
        return 2
    except (PCGCError, OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"pcgc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
