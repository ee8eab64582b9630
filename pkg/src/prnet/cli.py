"""Command-line entry point: ``prnet train|infer|eval|inspect``.

Diagnostics go to stderr as one line ``prnet: error: <kind>: <message>``
(or ``prnet: warning: ...``); the exit code is 0 only on success. Every run
writes one manifest: ``<out>/manifest.json`` when ``--out`` is given,
otherwise a ``prnet: manifest: {...}`` line on stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import hashlib
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import imageio, metrics
from .checkpoint import CheckpointFormatError, ConfigMismatchError, load_checkpoint
from .data import SynthConfig, load_triplets, make_synthetic_dataset
from .model import ModelConfig, count_flops, count_params, flop_terms, forward, init_params, param_breakdown
from .tensor import DimensionError, GeometryError
from .train import TrainConfig, TrainingAborted, train_loop

PROG = "prnet"


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: dict


_SECTIONS = {"preset", "model", "train", "data"}
_DATA_KEYS = {"train_dir", "val_dir", "synthetic"}
_SYNTH_EXTRA = {"count", "val_count", "seed"}


def parse_config(raw: dict) -> RunConfig:
    """Build configs from a parsed JSON document; unknown keys are errors."""
    if not isinstance(raw, dict):
        raise CliError("config", "top level must be an object")
    extra = set(raw) - _SECTIONS
    if extra:
        raise CliError("config", f"unknown key(s): {', '.join(sorted(extra))}")
    preset = raw.get("preset", "default")
    if preset not in ("default", "tiny"):
        raise CliError("config", f"unknown preset {preset!r}")
    try:
        overrides = dict(raw.get("model", {}))
        if "widths" in overrides:
            overrides["widths"] = tuple(overrides["widths"])
        base = ModelConfig.tiny(**overrides) if preset == "tiny" else ModelConfig.from_dict(overrides)
        train = TrainConfig.from_dict(raw.get("train", {}))
    except KeyError as err:
        raise CliError("config", f"unknown key {err.args[0]}") from err
    except (TypeError, ValueError) as err:
        raise CliError("config", str(err)) from err
    data = raw.get("data", {})
    bad = set(data) - _DATA_KEYS
    if bad:
        raise CliError("config", f"unknown key(s) in data: {', '.join(sorted(bad))}")
    synth = data.get("synthetic")
    if synth is not None:
        known = {f.name for f in dataclasses.fields(SynthConfig)} | _SYNTH_EXTRA
        bad = set(synth) - known
        if bad:
            raise CliError("config", f"unknown key(s) in data.synthetic: {', '.join(sorted(bad))}")
    return RunConfig(train.model_config(base), train, data)


def load_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as err:
        raise CliError("io", f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise CliError("config", f"{path}: {err}") from err
    return parse_config(raw)


def build_datasets(data: dict, seed: int):
    """(train, val) sample lists from a data section."""
    if "synthetic" in data:
        synth = dict(data["synthetic"])
        count = synth.pop("count", 500)
        val_count = synth.pop("val_count", 50)
        base_seed = synth.pop("seed", seed)
        cfg = SynthConfig(**synth)
        train = make_synthetic_dataset(count, np.random.default_rng([base_seed, 0]), cfg)
        val = make_synthetic_dataset(val_count, np.random.default_rng([base_seed, 1]), cfg) if val_count else []
        return train, val
    if "train_dir" not in data:
        raise CliError("data", "config has no data.train_dir or data.synthetic section")
    train = _triplets(data["train_dir"])
    val = _triplets(data["val_dir"]) if data.get("val_dir") else []
    return train, val


def _triplets(root):
    try:
        samples = load_triplets(root)
    except FileNotFoundError as err:
        raise CliError("data", str(err)) from err
    if not samples:
        raise CliError("data", f"no samples under {root}")
    return samples


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


class Manifest:
    def __init__(self, command: str, args: argparse.Namespace):
        self.record = {
            "command": command,
            "argv": sys.argv[1:],
            "config": getattr(args, "config", None),
            "seed": getattr(args, "seed", None),
            "git": _git_revision(),
            "checkpoint": None,
            "timings": {},
        }
        self._t = time.perf_counter()

    @contextlib.contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.record["timings"][name] = round(time.perf_counter() - t0, 6)

    def note_checkpoint(self, path) -> None:
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        self.record["checkpoint"] = {"path": str(path), "sha256": digest}

    def emit(self, out_dir: Path | None, status: str) -> None:
        self.record["status"] = status
        self.record["timings"]["total"] = round(time.perf_counter() - self._t, 6)
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "manifest.json").write_text(json.dumps(self.record, indent=2) + "\n")
        else:
            print(f"{PROG}: manifest: {json.dumps(self.record)}", file=sys.stderr)


def _git_revision() -> str | None:
    try:
        res = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).parent)
    except (OSError, subprocess.SubprocessError):
        return None
    return res.stdout.strip() or None if res.returncode == 0 else None


def _warn(msg: str) -> None:
    print(f"{PROG}: warning: {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _load_ckpt(path, manifest: Manifest, expect: ModelConfig | None = None):
    if not Path(path).exists():
        raise CliError("io", f"checkpoint not found: {path}")
    ck = load_checkpoint(path, expect)
    manifest.note_checkpoint(path)
    return ck


def cmd_train(args, manifest: Manifest) -> None:
    if args.config is None:
        raise CliError("usage", "train needs --config")
    if args.out is None:
        raise CliError("usage", "train needs --out")
    run = load_config(args.config)
    tcfg = run.train
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    with manifest.phase("data"):
        train_set, val_set = build_datasets(run.data, tcfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    adam, start = None, 0
    if args.checkpoint is not None:
        ck = _load_ckpt(args.checkpoint, manifest, run.model)
        params, adam, start = ck.params, ck.adam, ck.epoch
    else:
        params = init_params(run.model, seed=tcfg.seed)
    log_path = out / "metrics.jsonl"
    with open(log_path, "a" if start else "w") as log:
        def on_epoch(rec):
            log.write(json.dumps(rec) + "\n")
            log.flush()

        with manifest.phase("train"):
            result = train_loop(train_set, tcfg, params, val_set, out, adam, start, on_epoch)
    manifest.record["steps"] = result.steps
    manifest.record["epochs"] = result.epoch
    manifest.note_checkpoint(out / "final.prnc")
    if result.history:
        last = result.history[-1]
        print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in last.items()))


def _read_pair(image_path, mask_path):
    for p in (image_path, mask_path):
        if not Path(p).exists():
            raise CliError("io", f"file not found: {p}")
    img, mask = imageio.read_rgb(image_path), imageio.read_mask(mask_path)
    if img.shape[2:] != mask.shape[2:]:
        raise CliError("input", f"mask {mask_path} is {mask.shape[2:]} but image is {img.shape[2:]}")
    return img, mask


def _iterations(args, ck) -> int:
    trained = ck.train_config.T if ck.train_config is not None else ck.model_config.iterations
    T = args.iterations or trained
    if T > trained:
        _warn(f"iterating past the trained T={trained}")
    return T


def cmd_infer(args, manifest: Manifest) -> None:
    if args.checkpoint is None or args.image is None or args.mask is None or args.out is None:
        raise CliError("usage", "infer needs --checkpoint, --image, --mask and --out")
    ck = _load_ckpt(args.checkpoint, manifest)
    img, mask = _read_pair(args.image, args.mask)
    T = _iterations(args, ck)
    with manifest.phase("forward"):
        trace = forward(img, mask, ck.params, T)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    with manifest.phase("write"):
        imageio.write_rgb(out / f"{stem}.png", trace.final)
        if args.emit_per_iteration:
            for k, pred in enumerate(trace.predictions, 1):
                imageio.write_rgb(out / f"{stem}_iter{k}.png", pred)
    manifest.record["iterations"] = T


def cmd_eval(args, manifest: Manifest) -> None:
    if args.data is None:
        raise CliError("usage", "eval needs --data")
    if (args.checkpoint is None) == (args.predictions is None):
        raise CliError("usage", "eval needs exactly one of --checkpoint or --predictions")
    samples = _triplets(args.data)
    per_iter: list[list[dict]] = []
    records = []
    with manifest.phase("score"):
        if args.checkpoint is not None:
            ck = _load_ckpt(args.checkpoint, manifest)
            T = _iterations(args, ck)
            for s in samples:
                trace = forward(s.shadow, s.mask, ck.params, T)
                reps = [metrics.evaluate(p, s.free, s.mask) for p in trace.predictions]
                per_iter.append(reps)
                records.extend((s.name, k, r) for k, r in enumerate(reps, 1))
        else:
            T = 1
            for s in samples:
                path = Path(args.predictions) / f"{s.name}.png"
                if not path.exists():
                    raise CliError("io", f"prediction not found: {path}")
                rep = metrics.evaluate(imageio.read_rgb(path), s.free, s.mask)
                per_iter.append([rep])
                records.append((s.name, 1, rep))
    summaries = [metrics.summarize(reps[k] for reps in per_iter) for k in range(T)]
    print(metrics.format_table(summaries[-1]))
    trend = [round(s["all"].rmse_lab, 6) for s in summaries]
    print("rmse_by_iteration " + " ".join(f"{v:.4f}" for v in trend))
    manifest.record["rmse_by_iteration"] = trend
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "records.jsonl", "w") as f:
            for name, k, rep in records:
                metrics.write_records(f, name, rep, iteration=k)
        summary = {str(k + 1): {r: metrics.report_dict(v) for r, v in s.items()}
                   for k, s in enumerate(summaries)}
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


def cmd_inspect(args, manifest: Manifest) -> None:
    if args.checkpoint is not None:
        params = _load_ckpt(args.checkpoint, manifest).params
    elif args.config is not None:
        params = init_params(load_config(args.config).model)
    else:
        params = init_params(ModelConfig())
    cfg = params.config
    T = args.iterations or cfg.iterations
    fixed, per_iter = flop_terms(args.height, args.width, cfg)
    total = count_params(params)
    lines = ["module          params"]
    lines += [f"{name:<15} {n:>10,d}" for name, n in param_breakdown(params).items()]
    lines.append(f"{'total':<15} {total:>10,d}")
    lines.append(f"update blocks   {len(params.blocks)} ({'shared' if cfg.shared_update else 'independent'})")
    lines.append(f"flops @ {args.height}x{args.width}: {fixed / 1e9:.2f}G + {per_iter / 1e9:.2f}G x T"
                 f" = {count_flops(args.height, args.width, T, cfg) / 1e9:.2f}G at T={T}")
    print("\n".join(lines))
    manifest.record.update(params=total, flops_fixed=fixed, flops_per_iteration=per_iter)


COMMANDS = {"train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "inspect": cmd_inspect}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{PROG}: error: usage: {message}", file=sys.stderr)
        raise SystemExit(2)


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description="Progressive recurrent shadow removal.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--checkpoint", help="PRNC checkpoint (train: resume from it)")
    parser.add_argument("--iterations", type=_positive, help="inference iterations T")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="override train.seed")
    parser.add_argument("--emit-per-iteration", action="store_true",
                        help="infer: also write every intermediate prediction")
    parser.add_argument("--threads", type=_positive, help="BLAS thread cap")
    parser.add_argument("--image", help="infer: shadow image PNG")
    parser.add_argument("--mask", help="infer: shadow mask PNG")
    parser.add_argument("--data", help="eval: directory with shadow/, free/, mask/")
    parser.add_argument("--predictions", help="eval: score PNGs from this directory instead of a model")
    parser.add_argument("--height", type=_positive, default=256, help="inspect: FLOP resolution")
    parser.add_argument("--width", type=_positive, default=256, help="inspect: FLOP resolution")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    manifest = Manifest(args.command, args)
    out = Path(args.out) if args.out else None
    limits = threadpool_limits(limits=args.threads) if args.threads else contextlib.nullcontext()
    try:
        with limits:
            COMMANDS[args.command](args, manifest)
    except CliError as err:
        kind, msg = err.kind, str(err)
    except (CheckpointFormatError, ConfigMismatchError) as err:
        kind, msg = "checkpoint", str(err)
    except TrainingAborted as err:
        kind, msg = "training", str(err)
    except (DimensionError, GeometryError) as err:
        kind, msg = "input", str(err)
    except OSError as err:
        kind, msg = "io", str(err)
    else:
        manifest.emit(out, "ok")
        return 0
    manifest.record["error"] = {"kind": kind, "message": msg}
    manifest.emit(out if out is None or out.exists() else None, "error")
    print(f"{PROG}: error: {kind}: {msg}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
