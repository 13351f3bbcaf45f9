"""Command-line front end: featurize, train, eval, predict, quantize, sweep, synth, bench."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .imagestream import (
    AugmentSpec,
    FeaturizeConfig,
    ImageDecodeError,
    featurize_batch,
    featurize_dataset,
    load_image,
)
from .nn import ModelSpec, build_model, count_flops, count_params, save_model
from .quant import AlreadyQuantized, load_any, predict_fn, quantize, save_qmodel, size_report
from .rng import substream
from .synth import write_synthetic
from .train_eval import (
    TrainConfig,
    evaluate,
    metrics_from_probs,
    predict_proba,
    split_indices,
    train,
    write_history_csv,
    write_roc_csv,
)

log = logging.getLogger("imagesig")

MODEL_FILE = "model.imgsig"


class CLIError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment. Keys use flag names."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def parse_resolution(text) -> tuple[int, int]:
    if isinstance(text, (tuple, list)):
        return int(text[0]), int(text[1])
    parts = str(text).lower().replace(",", "x").split("x")
    if len(parts) == 1:
        return int(parts[0]), int(parts[0])
    if len(parts) == 2:
        return int(parts[0]), int(parts[1])
    raise argparse.ArgumentTypeError(f"bad resolution {text!r}; use 64 or 64x64")


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    return str(text).strip().lower() in ("1", "true", "yes", "on")


_FEATURIZE_KEYS = ("resolution", "depth", "log_sig", "two_direction")
_CASTS = {
    "resolution": parse_resolution,
    "depth": int,
    "log_sig": _bool,
    "two_direction": _bool,
    "augment": _bool,
    "neurons": int,
    "batch": int,
    "epochs": int,
    "gamma": float,
    "lr": float,
    "seed": int,
    "threads": int,
    "val_fraction": float,
}


@dataclass
class RunConfig:
    """Merged view of every tunable, with defaults for the main 64x64, depth-4 setting."""

    resolution: tuple[int, int] = (64, 64)
    depth: int = 4
    log_sig: bool = False
    two_direction: bool = False
    encoder: str = "cnn1d"
    neurons: int = 50
    batch: int = 3000
    epochs: int = 300
    gamma: float = 2.0
    lr: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.2
    augment: bool = False
    threads: int = 1
    data: str | None = None
    out: str | None = None
    cache_dir: str | None = None
    test: str | None = None
    explicit: set = field(default_factory=set)

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfig":
        values = {}
        if getattr(args, "config", None):
            for key, raw in read_config_file(args.config).items():
                if key not in cls.__dataclass_fields__ or key == "explicit":
                    raise CLIError(f"{args.config}: unknown key {key!r}")
                values[key] = _CASTS.get(key, str)(raw)
        explicit = set(values)
        for key in cls.__dataclass_fields__:
            v = getattr(args, key, None)
            if v is not None and key != "explicit":
                values[key] = _CASTS.get(key, lambda x: x)(v)
                explicit.add(key)
        return cls(**values, explicit=explicit)

    def featurize_config(self) -> FeaturizeConfig:
        return FeaturizeConfig(self.resolution, self.depth, self.log_sig, self.two_direction)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.batch, self.epochs, self.lr, self.gamma, self.seed, self.val_fraction, self.augment)

    def model_spec(self, classes: int = 2) -> ModelSpec:
        cfg = self.featurize_config()
        return ModelSpec(self.encoder, cfg.rows, cfg.width, self.neurons, classes)

    def cache_path(self) -> Path | None:
        if self.cache_dir:
            return Path(self.cache_dir)
        if self.out:
            return Path(self.out) / "cache"
        return None


def _shared_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("shared options")
    g.add_argument("--config", help="key=value file; command-line flags take precedence")
    g.add_argument("--data", help="dataset root laid out as <root>/<class>/*.png|jpg")
    g.add_argument("--out", help="output directory (or file, where noted)")
    g.add_argument("--cache-dir", dest="cache_dir", help="feature cache directory (default: <out>/cache)")
    g.add_argument("--resolution", help="image resize target, e.g. 64 or 64x64 (default 64x64)")
    g.add_argument("--depth", type=int, help="signature truncation depth (default 4)")
    g.add_argument("--log-sig", dest="log_sig", action="store_const", const=True, help="use log signatures")
    g.add_argument("--two-direction", dest="two_direction", action="store_const", const=True,
                   help="append column-stream signatures after the row-stream block")
    g.add_argument("--encoder", choices=("fc", "cnn1d"), help="classifier head (default cnn1d)")
    g.add_argument("--neurons", type=int, help="hidden dense units (default 50)")
    g.add_argument("--batch", type=int, help="mini-batch size (default 3000)")
    g.add_argument("--epochs", type=int, help="training epochs (default 300)")
    g.add_argument("--gamma", type=float, help="focal-loss focusing parameter (default 2)")
    g.add_argument("--lr", type=float, help="Adam learning rate (default 1e-3)")
    g.add_argument("--seed", type=int, help="root seed for every random sub-stream (default 0)")
    g.add_argument("--threads", type=int, help="featurization worker threads (default 1)")
    g.add_argument("--augment", action="store_const", const=True,
                   help="add one flipped/brightened copy per training image")
    return p


def build_parser() -> argparse.ArgumentParser:
    shared = _shared_flags()
    parser = argparse.ArgumentParser(prog="imagesig", description="Signature-feature image classifiers.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("featurize", parents=[shared], help="compute and cache dataset features")

    p = sub.add_parser("train", parents=[shared], help="train a model on a dataset")
    p.add_argument("--test", help="held-out dataset root for the final metrics (default: validation split)")

    p = sub.add_parser("eval", parents=[shared], help="evaluate a model on a test dataset")
    p.add_argument("--model", required=True)

    p = sub.add_parser("predict", parents=[shared], help="classify image files")
    p.add_argument("--model", required=True)
    p.add_argument("images", nargs="+")

    p = sub.add_parser("quantize", parents=[shared], help="int8 post-training quantization")
    p.add_argument("--model", required=True)

    p = sub.add_parser("sweep", parents=[shared], help="parameter/FLOP (and optionally accuracy) grid")
    p.add_argument("--resolutions", default="32,64,128")
    p.add_argument("--depths", default="1,2,3,4")
    p.add_argument("--sig-types", dest="sig_types", default="sig", help="comma list of sig,logsig")
    p.add_argument("--neuron-grid", dest="neuron_grid", help="comma list (default: --neurons)")
    p.add_argument("--batch-grid", dest="batch_grid", help="comma list (default: --batch)")

    p = sub.add_parser("synth", parents=[shared], help="write a synthetic two-class dataset")
    p.add_argument("--n", type=int, default=500, help="images per class")
    p.add_argument("--start", type=int, default=0, help="index of the first image (disjoint sets)")

    p = sub.add_parser("bench", parents=[shared], help="latency of the model and of the full pipeline")
    p.add_argument("--model", required=True)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--image", help="image to time (default: a generated one)")
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _require_dir(path, what="dataset") -> Path:
    if not path:
        raise CLIError(f"--data is required ({what} root)")
    p = Path(path)
    if not p.is_dir():
        raise CLIError(f"{what} directory not found: {p}")
    return p


def _featurize(rc: RunConfig, root: Path, cfg: FeaturizeConfig, augment: AugmentSpec | None = None, cache=True):
    cache_dir = rc.cache_path() if cache else None
    fs = featurize_dataset(root, cfg, augment, cache_dir=cache_dir, threads=rc.threads)
    if fs.skipped:
        log.warning("%d unreadable images skipped", fs.skipped)
    return fs


def _model_featurize_config(rc: RunConfig, header: dict) -> FeaturizeConfig:
    stored = FeaturizeConfig.from_dict(header["featurize"])
    overrides = {k: getattr(rc, k) for k in _FEATURIZE_KEYS if k in rc.explicit}
    if not overrides:
        return stored
    return FeaturizeConfig.from_dict({**stored.to_dict(), **overrides})


def _check_width(spec: ModelSpec, cfg: FeaturizeConfig):
    if (spec.rows, spec.width) != (cfg.rows, cfg.width):
        raise CLIError(
            f"model expects {spec.rows}x{spec.width} features but the featurization "
            f"settings give {cfg.rows}x{cfg.width}"
        )


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _floats(d: dict) -> dict:
    return {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in d.items()}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args, rc: RunConfig) -> int:
    if not rc.out:
        raise CLIError("--out is required")
    files = write_synthetic(rc.out, args.n, seed=rc.seed, start=args.start)
    print(f"wrote {len(files)} images to {rc.out} (2 classes)")
    return 0


def cmd_featurize(args, rc: RunConfig) -> int:
    root = _require_dir(rc.data)
    cfg = rc.featurize_config()
    fs = _featurize(rc, root, cfg)
    if fs.cache_path is not None:
        print(f"{'cache hit' if fs.from_cache else 'cache written'}: {fs.cache_path}")
    counts = ", ".join(f"{n}={c}" for n, c in zip(fs.class_names, fs.class_counts()))
    print(f"{len(fs)} images, {cfg.rows}x{cfg.width} features, {len(fs.class_names)} classes ({counts})")
    return 0


def cmd_train(args, rc: RunConfig) -> int:
    root = _require_dir(rc.data)
    out = Path(rc.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    cfg = rc.featurize_config()
    augment = AugmentSpec.flip_brightness(seed=rc.seed) if rc.augment else None
    fs = _featurize(rc, root, cfg, augment)
    spec = rc.model_spec(classes=len(fs.class_names))
    tcfg = rc.train_config()
    log.info("training %s: %d samples, %s params, %s FLOPs", spec.encoder, len(fs), f"{count_params(spec):,}",
             f"{count_flops(spec):,}")
    t0 = time.perf_counter()
    result = train(fs.features, fs.labels, spec, tcfg, groups=fs.origins)
    train_seconds = time.perf_counter() - t0

    if args.test:
        test = _featurize(rc, _require_dir(args.test, "test dataset"), cfg)
        if test.class_names != fs.class_names:
            raise CLIError(f"test classes {test.class_names} differ from training classes {fs.class_names}")
        metrics = evaluate(result.model, test.features, test.labels)
        evaluated_on = "test"
    else:
        _, va = split_indices(fs.labels, tcfg.val_fraction, tcfg.seed, fs.origins)
        metrics = evaluate(result.model, fs.features[va], fs.labels[va])
        evaluated_on = "validation"

    snapshot = _floats({**metrics.summary(), "best_epoch": result.best_epoch, "evaluated_on": evaluated_on})
    meta = {"featurize": cfg.to_dict(), "class_names": fs.class_names, "metrics": snapshot}
    model_bytes = save_model(out / MODEL_FILE, result.model, meta)
    write_history_csv(out / "history.csv", result.history)
    write_roc_csv(out / "roc.csv", metrics)
    report = {
        **_floats(metrics.summary()),
        "params": count_params(spec),
        "flops": count_flops(spec),
        "model_bytes": model_bytes,
        "train_seconds": train_seconds,
        "best_epoch": result.best_epoch,
        "evaluated_on": evaluated_on,
    }
    _write_json(out / "metrics.json", report)
    log.info("params %s, FLOPs %s, model %s bytes, %.1f s", f"{report['params']:,}", f"{report['flops']:,}",
             f"{model_bytes:,}", train_seconds)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_eval(args, rc: RunConfig) -> int:
    model, header = load_any(args.model)
    root = _require_dir(rc.data, "test dataset")
    cfg = _model_featurize_config(rc, header)
    _check_width(model.spec, cfg)
    fs = _featurize(rc, root, cfg)
    metrics = metrics_from_probs(predict_proba(model, fs.features, fwd=predict_fn(model)), fs.labels)
    out = Path(rc.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    report = _floats({**metrics.summary(), "n": len(fs), "confusion": metrics.confusion.tolist()})
    _write_json(out / "metrics.json", report)
    write_roc_csv(out / "roc.csv", metrics)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_predict(args, rc: RunConfig) -> int:
    model, header = load_any(args.model)
    cfg = _model_featurize_config(rc, header)
    _check_width(model.spec, cfg)
    names = header.get("class_names") or [str(i) for i in range(model.spec.classes)]
    fwd = predict_fn(model)
    status = 0
    for path in args.images:
        try:
            img = load_image(path, cfg.resolution)
        except (ImageDecodeError, FileNotFoundError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            status = 1
            continue
        probs = fwd(model, featurize_batch(img[None], cfg))[0]
        k = int(np.argmax(probs))
        print(f"{path},{names[k]},{probs[k]:.6f}")
    return status


def _fmt_sizes(label: str, sizes: dict) -> str:
    parts = ", ".join(f"{k} {v:,}" for k, v in sizes.items() if k != "total")
    return f"{label}: {sizes['total']:,} bytes ({sizes['total'] / 1000:.1f} KB; {parts})"


def cmd_quantize(args, rc: RunConfig) -> int:
    model, header = load_any(args.model)
    meta = {k: v for k, v in header.items() if k not in ("format", "version", "spec", "tensors")}
    try:
        qmodel = quantize(model)
    except AlreadyQuantized:
        raise CLIError(f"{args.model} is already quantized; refusing to quantize again") from None
    dest = Path(rc.out) if rc.out else Path(args.model).with_suffix(".imgsigq")
    if dest.is_dir():
        dest = dest / (Path(args.model).stem + ".imgsigq")
    save_qmodel(dest, qmodel, meta)
    print(_fmt_sizes("float", size_report(model, meta)))
    print(_fmt_sizes("quantized", size_report(qmodel, meta)))
    print(f"wrote {dest}")
    return 0


SWEEP_FIELDS = ("resolution", "depth", "sig_type", "neurons", "batch", "encoder",
                "params", "flops", "model_bytes", "val_acc", "train_seconds")


def _int_list(text) -> list[int]:
    return [int(x) for x in str(text).split(",") if x.strip()]


def cmd_sweep(args, rc: RunConfig) -> int:
    resolutions = [parse_resolution(r) for r in args.resolutions.split(",") if r.strip()]
    depths = _int_list(args.depths)
    sig_types = [s.strip() for s in args.sig_types.split(",") if s.strip()]
    for s in sig_types:
        if s not in ("sig", "logsig"):
            raise CLIError(f"unknown signature type {s!r}; use sig or logsig")
    neuron_grid = _int_list(args.neuron_grid) if args.neuron_grid else [rc.neurons]
    batch_grid = _int_list(args.batch_grid) if args.batch_grid else [rc.batch]
    encoder = rc.encoder if "encoder" in rc.explicit else "fc"
    root = _require_dir(rc.data) if rc.data else None

    rows = []
    for res in resolutions:
        for depth in depths:
            for sig_type in sig_types:
                cfg = FeaturizeConfig(res, depth, log_sig=(sig_type == "logsig"), two_direction=rc.two_direction)
                # --out names the CSV here, so only an explicit --cache-dir is used
                fs = _featurize(rc, root, cfg, cache=bool(rc.cache_dir)) if root else None
                for neurons in neuron_grid:
                    spec = ModelSpec(encoder, cfg.rows, cfg.width, neurons, len(fs.class_names) if fs else 2)
                    meta = {"featurize": cfg.to_dict(), "class_names": fs.class_names if fs else ["0", "1"]}
                    for batch in batch_grid:
                        row = {
                            "resolution": f"{res[0]}x{res[1]}",
                            "depth": depth,
                            "sig_type": sig_type,
                            "neurons": neurons,
                            "batch": batch,
                            "encoder": encoder,
                            "params": count_params(spec),
                            "flops": count_flops(spec),
                            "model_bytes": size_report(build_model(spec, rc.seed), meta)["total"],
                            "val_acc": "",
                            "train_seconds": "",
                        }
                        if fs is not None:
                            tcfg = TrainConfig(batch, rc.epochs, rc.lr, rc.gamma, rc.seed, rc.val_fraction)
                            t0 = time.perf_counter()
                            result = train(fs.features, fs.labels, spec, tcfg, groups=fs.origins)
                            row["train_seconds"] = f"{time.perf_counter() - t0:.3f}"
                            best = max((h["val_acc"] for h in result.history), default=float("nan"))
                            row["val_acc"] = f"{best:.6f}"
                        rows.append(row)
    sink = open(rc.out, "w", newline="") if rc.out else sys.stdout
    try:
        w = csv.DictWriter(sink, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if sink is not sys.stdout:
            sink.close()
    return 0


def _latency(samples: list[float]) -> dict:
    a = np.asarray(samples) * 1000.0
    mean = float(a.mean())
    return {"mean_ms": mean, "p50_ms": float(np.percentile(a, 50)), "p99_ms": float(np.percentile(a, 99)),
            "fps": 1000.0 / mean if mean > 0 else float("inf")}


def cmd_bench(args, rc: RunConfig) -> int:
    if not Path(args.model).is_file():
        raise CLIError(f"model file not found: {args.model}")
    if args.iterations < 1:
        raise CLIError("--iterations must be >= 1")
    model, header = load_any(args.model)
    cfg = _model_featurize_config(rc, header)
    _check_width(model.spec, cfg)
    fwd = predict_fn(model)
    if args.image:
        image_path = Path(args.image)
    else:
        from PIL import Image

        image_path = Path(rc.out or ".") / "bench_input.png"
        image_path.parent.mkdir(parents=True, exist_ok=True)
        pixels = substream(rc.seed, "bench").integers(0, 256, size=cfg.resolution + (3,), dtype=np.uint8)
        Image.fromarray(pixels).save(image_path)

    features = featurize_batch(load_image(image_path, cfg.resolution)[None], cfg)
    fwd(model, features)  # warm-up
    model_only, end_to_end = [], []
    for _ in range(args.iterations):
        t0 = time.perf_counter()
        fwd(model, features)
        model_only.append(time.perf_counter() - t0)
    for _ in range(args.iterations):
        t0 = time.perf_counter()
        img = load_image(image_path, cfg.resolution)
        fwd(model, featurize_batch(img[None], cfg))
        end_to_end.append(time.perf_counter() - t0)
    report = {"iterations": args.iterations, "model_only": _latency(model_only), "end_to_end": _latency(end_to_end)}
    for key in ("model_only", "end_to_end"):
        r = report[key]
        print(f"{key}: mean {r['mean_ms']:.3f} ms, p50 {r['p50_ms']:.3f} ms, p99 {r['p99_ms']:.3f} ms, {r['fps']:.1f} FPS")
    if rc.out:
        _write_json(Path(rc.out) / "bench.json", report)
    return 0


COMMANDS = {
    "featurize": cmd_featurize,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "quantize": cmd_quantize,
    "sweep": cmd_sweep,
    "synth": cmd_synth,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        rc = RunConfig.from_args(args)
        return COMMANDS[args.command](args, rc)
    except (CLIError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
