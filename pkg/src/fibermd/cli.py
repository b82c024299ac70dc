"""Command-line interface: gen, train, decompose, eval, bench.

Every command takes ``--config`` (key=value file, see ``formats.RunConfig``).
Checkpoints store only the network; the fiber always comes from the config, and
the mode count and resolution from the network.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .cnn import ConvNet, NetworkConfig, read_checkpoint, write_checkpoint
from .decompose import decompose
from .errors import ConfigError, FiberMDError
from .fiber_modes import ModeBasis, basis_for
from .field_synth import (
    add_noise, encode_label, preprocess_frame, quantize_8bit, render, sample_coefficients,
)
from .formats import (
    DatasetHeader, RunConfig, atomic_write_bytes, atomic_write_text, encode_dataset, encode_pgm,
    load_config, read_image, write_image,
)
from .metrics import error_stats, residual
from .training import TrainConfig, evaluate, train

log = logging.getLogger("fibermd")

# RNG stream tags, disjoint from the training streams
_GEN_STREAM = 11
_FRAME_STREAM = 12
_EVAL_STREAM = 13
_BENCH_STREAM = 14

FRAME_SHAPE = (768, 1024)
FRAME_NOISE = 0.05
FRAME_MAX_SHIFT = 100  # px; the centroid crop can follow up to 128 on a 768x1024 frame

SWEEPS = ("mode_count", "noise", "resolution")


def _basis(cfg: RunConfig, n_modes: int, resolution: int) -> ModeBasis:
    return basis_for(cfg.fiber, resolution, n_modes, cfg.window_factor)


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


# ----------------------------------------------------------------------------
# gen


def generate_dataset(cfg: RunConfig, count: int) -> bytes:
    """Dataset bytes; sample i uses its own RNG stream, so output is seed-determined."""
    basis = _basis(cfg, cfg.modes, cfg.resolution)
    labels = np.empty((count, 2 * cfg.modes - 1))
    images = np.empty((count, cfg.resolution, cfg.resolution))
    for i in range(count):
        rng = np.random.default_rng([cfg.seed, _GEN_STREAM, i])
        c = sample_coefficients(rng, cfg.modes)
        img = render(basis, c)
        if cfg.noise_sigma > 0:
            img = render_noisy(img, cfg.noise_sigma, rng)
        labels[i], images[i] = encode_label(c), img
    header = DatasetHeader(cfg.fiber, basis.grid, cfg.modes, count, cfg.resolution)
    return encode_dataset(header, labels, images)


def render_noisy(img, sigma, rng):
    out = add_noise(img, sigma, rng)
    peak = out.max()
    return out / peak if peak > 0 else out


def experimental_frames(cfg: RunConfig, count: int, n_modes: int | None = None):
    """Synthetic camera frames: 768x1024, shifted, sigma=0.05 noise, 8-bit.

    The pattern is rendered at the crop scale (768 px across the sampling
    window), with the fiber axis on the frame's vertical centre line and a
    random horizontal shift. Yields (frame, coefficients).
    """
    n_modes = n_modes or cfg.modes
    side = FRAME_SHAPE[0]
    basis = _basis(cfg, n_modes, side)
    for i in range(count):
        rng = np.random.default_rng([cfg.seed, _FRAME_STREAM, i])
        c = sample_coefficients(rng, n_modes)
        shift = int(rng.integers(-FRAME_MAX_SHIFT, FRAME_MAX_SHIFT + 1))
        frame = np.zeros(FRAME_SHAPE)
        left = (FRAME_SHAPE[1] - side) // 2 + shift
        frame[:, left:left + side] = render(basis, c)
        yield quantize_8bit(add_noise(frame, FRAME_NOISE, rng)), c


def cmd_gen(args, cfg: RunConfig) -> int:
    count = cfg.eval_count if args.count is None else args.count
    if count < 0:
        raise ConfigError("--count must be nonnegative")
    if args.frames:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        for i, (frame, c) in enumerate(experimental_frames(cfg, count)):
            name = f"frame_{i:04d}.pgm"
            atomic_write_bytes(out / name, encode_pgm(frame))
            rows.append([name, *map(_fmt, c.weights), *map(_fmt, c.phases)])
        header = ["frame", *[f"w{k + 1}" for k in range(cfg.modes)],
                  *[f"theta{k + 2}" for k in range(cfg.modes - 1)]]
        atomic_write_text(out / "truth.csv", _csv_text(header, rows))
        print(f"wrote {count} frames to {out}")
    else:
        atomic_write_bytes(args.out, generate_dataset(cfg, count))
        print(f"wrote {count} samples to {args.out}")
    return 0


# ----------------------------------------------------------------------------
# train


def history_path(checkpoint: str | Path) -> Path:
    p = Path(checkpoint)
    return p.with_name(p.stem + "_history.csv")


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(cfg.samples_per_epoch, cfg.batch_size, cfg.epochs, cfg.lr_schedule,
                       cfg.seed, cfg.noise_sigma, cfg.holdout_size)


def cmd_train(args, cfg: RunConfig) -> int:
    net_cfg = NetworkConfig.preset(cfg.preset, cfg.modes, cfg.resolution)
    basis = _basis(cfg, cfg.modes, cfg.resolution)
    net, history = train(basis, net_cfg, train_config(cfg))
    buf = io.BytesIO()
    write_checkpoint(net, buf)
    atomic_write_bytes(args.out, buf.getvalue())
    rows = [[r.epoch, _fmt(r.loss), _fmt(r.holdout_correlation)] for r in history]
    hist = history_path(args.out)
    atomic_write_text(hist, _csv_text(["epoch", "loss", "holdout_correlation"], rows))
    print(f"wrote {args.out} and {hist}")
    return 0


# ----------------------------------------------------------------------------
# decompose


def _frame_paths(target: Path) -> list[Path]:
    if target.is_dir():
        paths = sorted(target.glob("*.pgm"))
        if not paths:
            raise FileNotFoundError(f"no .pgm frames in {target}")
        return paths
    if not target.exists():
        raise FileNotFoundError(f"no such file or directory: {target}")
    return [target]


def cmd_decompose(args, cfg: RunConfig) -> int:
    net = read_checkpoint(_need(args.checkpoint, "--checkpoint"))
    n, res = net.config.n_modes, net.config.input_resolution
    basis = _basis(cfg, n, res)
    paths = _frame_paths(Path(_need(args.input, "input")))
    rows, extra = [], {}
    for path in paths:
        t0 = time.perf_counter()
        image = preprocess_frame(read_image(path), res)
        result = decompose(net, basis, image)
        latency = (time.perf_counter() - t0) * 1e3
        c = result.coefficients
        rows.append([path.name, *map(_fmt, c.weights), *map(_fmt, c.phases),
                     _fmt(result.correlation), _fmt(latency)])
        if args.write_recon:
            extra[path.stem + "_recon.pgm"] = encode_pgm(result.reconstructed)
            extra[path.stem + "_residual.pgm"] = encode_pgm(residual(image, result.reconstructed))
    header = ["frame", *[f"w{k + 1}" for k in range(n)],
              *[f"theta{k + 2}" for k in range(n - 1)], "correlation", "latency_ms"]
    text = _csv_text(header, rows)
    out = Path(args.out) if args.out else None
    if out is not None:
        atomic_write_text(out, text)
        for name, data in extra.items():
            atomic_write_bytes(out.parent / name, data)
    else:
        sys.stdout.write(text)
    mean = np.mean([float(r[-2]) for r in rows])
    print(f"decomposed {len(rows)} frames, mean correlation {mean:.5f}",
          file=sys.stderr if out is None else sys.stdout)
    return 0


# ----------------------------------------------------------------------------
# eval


def evaluate_point(net: ConvNet, cfg: RunConfig, count: int, sigma: float = 0.0):
    """Mean correlation (against clean truth) and ErrorReport on fresh samples.

    Coefficients depend only on the seed, so every sweep point sees the same
    patterns; noise draws come from their own stream.
    """
    n, res = net.config.n_modes, net.config.input_resolution
    basis = _basis(cfg, n, res)
    coef_rng = np.random.default_rng([cfg.seed, _EVAL_STREAM, n])
    noise_rng = np.random.default_rng([cfg.seed, _EVAL_STREAM, n, int(round(sigma * 1e6))])
    truth = [sample_coefficients(coef_rng, n) for _ in range(count)]
    clean = np.stack([render(basis, c) for c in truth])
    noisy = clean if sigma == 0 else np.stack([render_noisy(i, sigma, noise_rng) for i in clean])
    corr, report, _ = evaluate(net, basis, noisy, truth, references=clean)
    return corr, report


def eval_rows(nets: list[ConvNet], cfg: RunConfig, sweep: str, count: int):
    if sweep not in SWEEPS:
        raise ConfigError(f"unknown sweep {sweep!r}; choose from {', '.join(SWEEPS)}")
    points = []
    if sweep == "noise":
        if len(nets) != 1:
            raise ConfigError("the noise sweep takes exactly one checkpoint")
        points = [(s, nets[0], s) for s in cfg.noise_levels]
    else:
        for net in nets:
            value = net.config.n_modes if sweep == "mode_count" else net.config.input_resolution
            points.append((value, net, 0.0))
    n_max = max(net.config.n_modes for net in nets)
    header = ["sweep", "value", "count", "correlation", "weight_error", "phase_error",
              *[f"weight_error_{k + 1}" for k in range(n_max)],
              *[f"phase_error_{k + 2}" for k in range(n_max - 1)]]
    rows = []
    for value, net, sigma in points:
        corr, rep = evaluate_point(net, cfg, count, sigma)
        n = net.config.n_modes
        w = [_fmt(x) for x in rep.per_mode_weight_error] + [""] * (n_max - n)
        p = [_fmt(x) for x in rep.per_mode_phase_error] + [""] * (n_max - n)
        rows.append([sweep, _fmt(value), count, _fmt(corr), _fmt(rep.weight_error),
                     _fmt(rep.phase_error), *w, *p])
        log.info("%s=%s correlation %.5f", sweep, value, corr)
    return header, rows


def cmd_eval(args, cfg: RunConfig) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs at least one --checkpoint")
    nets = [read_checkpoint(p) for p in args.checkpoint]
    count = cfg.eval_count if args.count is None else args.count
    header, rows = eval_rows(nets, cfg, args.sweep or "noise", count)
    text = _csv_text(header, rows)
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


# ----------------------------------------------------------------------------
# bench

BENCH_FIELDS = ("count", "total_ms", "mean_ms", "forward_ms", "disambiguation_ms")


def bench(net: ConvNet, cfg: RunConfig, count: int) -> dict[str, float]:
    """Decompose ``count`` synthetic frames one at a time; per-frame means in ms."""
    n, res = net.config.n_modes, net.config.input_resolution
    basis = _basis(cfg, n, res)
    rng = np.random.default_rng([cfg.seed, _BENCH_STREAM])
    images = [render(basis, sample_coefficients(rng, n)) for _ in range(count)]
    decompose(net, basis, images[0])  # warm-up
    total = fwd = dis = 0.0
    for img in images:
        r = decompose(net, basis, img)
        total += r.elapsed_ms
        fwd += r.forward_ms
        dis += r.disambiguation_ms
    return {"count": count, "total_ms": total, "mean_ms": total / count,
            "forward_ms": fwd / count, "disambiguation_ms": dis / count}


def cmd_bench(args, cfg: RunConfig) -> int:
    net = read_checkpoint(_need(args.checkpoint, "--checkpoint"))
    count = 1000 if args.count is None else args.count
    if count < 1:
        raise ConfigError("--count must be positive")
    report = bench(net, cfg, count)
    text = _csv_text(list(BENCH_FIELDS), [[_fmt(report[k]) for k in BENCH_FIELDS]])
    if args.out:
        atomic_write_text(args.out, text)
    sys.stdout.write(text)
    return 0


# ----------------------------------------------------------------------------
# entry point


def _need(value, name: str):
    if value is None or value == []:
        raise ConfigError(f"missing {name}")
    return value[0] if isinstance(value, list) else value


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fibermd", description="CNN-based fiber mode decomposition")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_help):
        p.add_argument("--config", required=True, help="key=value run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help=out_help)

    p = sub.add_parser("gen", help="generate a synthetic dataset or camera frames")
    common(p, "dataset file, or frame directory with --frames")
    p.add_argument("--count", type=int)
    p.add_argument("--frames", action="store_true",
                   help="write 768x1024 8-bit PGM frames and truth.csv instead")

    p = sub.add_parser("train", help="train a network from scratch")
    common(p, "checkpoint path; history goes to <stem>_history.csv")

    p = sub.add_parser("decompose", help="decompose PGM frames")
    common(p, "CSV path (stdout if omitted)")
    p.add_argument("input", nargs="?", help="PGM file or directory of PGM files")
    p.add_argument("--checkpoint", action="append")
    p.add_argument("--write-recon", action="store_true",
                   help="also write <frame>_recon.pgm and <frame>_residual.pgm next to --out")

    p = sub.add_parser("eval", help="evaluation sweeps as CSV")
    common(p, "CSV path (stdout if omitted)")
    p.add_argument("--checkpoint", action="append", help="repeat for mode_count/resolution")
    p.add_argument("--sweep", choices=SWEEPS)
    p.add_argument("--count", type=int)

    p = sub.add_parser("bench", help="per-frame latency report")
    common(p, "optional CSV copy of the report")
    p.add_argument("--checkpoint", action="append")
    p.add_argument("--count", type=int)
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "decompose": cmd_decompose,
            "eval": cmd_eval, "bench": cmd_bench}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        if args.command in ("gen", "train") and not args.out:
            raise ConfigError("--out is required")
        return COMMANDS[args.command](args, cfg)
    except (FiberMDError, OSError, ValueError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"fibermd: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
