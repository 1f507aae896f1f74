"""``dotfactor`` command line: gen-data, train, eval, traverse, report.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags, missing
input files, non-empty output directory without ``--force``).
"""

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import synthdata
from .diffcore import Tensor, no_grad, sigmoid
from .dotvae import VARIANTS, load_checkpoint
from .metrics import MetricError, MetricReport, ProtocolSizes, evaluate
from .trainer import TrainConfig, TrainingAborted, fit

REPORT_ROWS = (("FactorVAE", "factorvae"), ("DCI", "dci_d"), ("MIG", "mig"),
               ("BetaVAE", "betavae"), ("Modularity", "modularity"),
               ("Explicitness", "explicitness"))
TRAVERSE_POINTS = 7
TRAVERSE_RANGE = 2.5


class UsageError(Exception):
    pass


def _threads():
    raw = os.environ.get("DOTFACTOR_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"DOTFACTOR_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("DOTFACTOR_THREADS must be >= 1")
    return n


def _prepare_out(path, force):
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"{path} exists and is not empty (use --force)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _need(path, what):
    if path is None or not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _int_list(text):
    return [int(t) for t in text.split(",") if t.strip()]


def _float_list(text):
    return [float(t) for t in text.split(",") if t.strip()]


def _load_data(args):
    if args.data is not None:
        try:
            return synthdata.load_dataset(_need(args.data, "dataset directory"))
        except (FileNotFoundError, synthdata.GridError) as err:
            raise UsageError(f"cannot read dataset {args.data}: {err}") from None
    return synthdata.GENERATORS[args.kind]()


# ---- gen-data ----

def cmd_gen_data(args):
    kwargs = {}
    if args.resolution is not None:
        kwargs["resolution"] = args.resolution
    if args.channels is not None:
        if args.kind != "shapes3d-mini":
            raise UsageError("--channels applies to shapes3d-mini only")
        kwargs["channels"] = args.channels
    try:
        ds = synthdata.GENERATORS[args.kind](**kwargs)
    except synthdata.GridError as err:
        raise UsageError(str(err)) from None
    out = _prepare_out(args.out, args.force)
    ds.save(out)
    print(f"{args.kind}: {len(ds)} images -> {out}")
    return 0


# ---- train ----

def train_config_from_args(args):
    obj = {}
    if args.config is not None:
        try:
            obj = json.loads(_need(args.config, "config file").read_text())
        except json.JSONDecodeError as err:
            raise UsageError(f"bad config JSON: {err}") from None
    for flag, name in (("seed", "seed"), ("lam", "lam"), ("gamma", "gamma"),
                       ("variant", "variant"), ("epochs", "epochs")):
        value = getattr(args, flag)
        if value is not None:
            obj[name] = value
    try:
        return TrainConfig.from_json(obj)
    except (TypeError, ValueError) as err:
        raise UsageError(f"bad training config: {err}") from None


def cmd_train(args):
    config = train_config_from_args(args)
    dataset = _load_data(args)
    out = _prepare_out(args.out, args.force)
    try:
        result = fit(config, dataset, out_dir=out)
    except TrainingAborted as err:
        print(f"training aborted: {err}", file=sys.stderr)
        return 1
    last = result.log[-1]
    print(f"{len(result.log)} epochs, stop: {result.schedule.stop_reason}, "
          f"active set 1..{result.schedule.m}, kl_z {last['kl_z']:.3f} -> {result.checkpoint}")
    return 0


# ---- eval / report ----

def cmd_eval(args):
    ckpt = _need(args.checkpoint, "checkpoint")
    dataset = _load_data(args)
    seeds = list(range(args.seed, args.seed + args.n_seeds))
    sizes = ProtocolSizes(L=args.L, M=args.M)
    try:
        model, _ = load_checkpoint(ckpt)
    except (FileNotFoundError, ValueError) as err:
        raise UsageError(f"cannot load checkpoint: {err}") from None
    try:
        report = evaluate(model, dataset, sizes, seeds, workers=_threads() or 1,
                          label=args.label or str(ckpt))
    except MetricError as err:
        print(f"evaluation failed: {err}", file=sys.stderr)
        return 1
    text = json.dumps(report.to_json(), indent=2) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cell(report, key):
    s = report.scores[key]
    return f"{s['mean']:.3f} ± {s['std']:.3f}"


def _table(header, rows):
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()  # noqa: E731
    return "\n".join([fmt(header), fmt(["-" * w for w in widths]), *map(fmt, rows)])


def render_report(reports):
    """Single report: one row per metric. Several: one row per report, by MIG descending."""
    if len(reports) == 1:
        rows = [[name, _cell(reports[0], key)] for name, key in REPORT_ROWS]
        return _table(["metric", reports[0].label or "value"], rows)
    ordered = sorted(reports, key=lambda r: -r.mean("mig"))
    rows = [[r.label or f"report {i}"] + [_cell(r, key) for _, key in REPORT_ROWS]
            for i, r in enumerate(ordered)]
    return _table(["model"] + [name for name, _ in REPORT_ROWS], rows)


def cmd_report(args):
    reports = []
    for path in args.reports:
        try:
            reports.append(MetricReport.load(_need(path, "report")))
        except (json.JSONDecodeError, MetricError) as err:
            raise UsageError(f"bad report {path}: {err}") from None
    print(render_report(reports))
    return 0


# ---- traverse ----

def _tile(pixels, shape):
    return np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(
        np.uint8).reshape(shape)


def traversal_grid(model, image, dims=None, values=None, image_shape=None):
    """``uint8`` grid: row 1 original, row 2 reconstruction, then one row per
    dim in ``dims`` (1-based) sweeping ``c_j`` over ``values``.

    Rows 1 and 2 repeat their tile in every column; tiles are separated by
    1-pixel black lines.
    """
    K = model.config.K
    dims = list(range(1, K + 1)) if dims is None else list(dims)
    if any(not 1 <= j <= K for j in dims):
        raise UsageError(f"traversal dims must lie in [1, {K}]")
    values = np.linspace(-TRAVERSE_RANGE, TRAVERSE_RANGE, TRAVERSE_POINTS) if values is None \
        else np.asarray(values, dtype=np.float64)
    if values.size == 0 or not np.isfinite(values).all():
        raise UsageError("traversal values must be finite and non-empty")
    shape = image_shape or image.shape
    flat = np.asarray(image, dtype=np.float32).reshape(1, -1)
    with no_grad():
        post = model.encode(Tensor(flat))
        mu_c, mu_z = post.mu_c.data, post.mu_z.data
        recon = sigmoid(model.decode(post.mu_c, post.mu_z)).data
        rows = [[_tile(flat, shape)] * len(values), [_tile(recon, shape)] * len(values)]
        for j in dims:
            c = np.repeat(mu_c, len(values), axis=0)
            c[:, j - 1] = values
            out = sigmoid(model.decode(Tensor(c), Tensor(np.repeat(mu_z, len(values), axis=0))))
            rows.append([_tile(o, shape) for o in out.data])
    H, W = shape[:2]
    extra = shape[2:]
    grid = np.zeros((len(rows) * (H + 1) - 1, len(values) * (W + 1) - 1, *extra), dtype=np.uint8)
    for r, row in enumerate(rows):
        for col, tile in enumerate(row):
            grid[r * (H + 1):r * (H + 1) + H, col * (W + 1):col * (W + 1) + W] = tile
    return grid


def write_pnm(path, grid):
    """Binary PGM (P5) for 2-D grids, PPM (P6) for RGB; maxval 255."""
    grid = np.ascontiguousarray(grid, dtype=np.uint8)
    magic = b"P5" if grid.ndim == 2 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (grid.shape[1], grid.shape[0])
    Path(path).write_bytes(header + grid.tobytes())


def read_pnm(path):
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    w, h = map(int, dims.split())
    if maxval != b"255" or magic not in (b"P5", b"P6"):
        raise ValueError("unsupported PNM file")
    shape = (h, w) if magic == b"P5" else (h, w, 3)
    return np.frombuffer(body, dtype=np.uint8).reshape(shape)


def cmd_traverse(args):
    ckpt = _need(args.checkpoint, "checkpoint")
    dataset = _load_data(args)
    try:
        model, _ = load_checkpoint(ckpt)
    except (FileNotFoundError, ValueError) as err:
        raise UsageError(f"cannot load checkpoint: {err}") from None
    if model.config.n_pixels != dataset.n_pixels:
        raise UsageError("dataset does not match the checkpoint's input size")
    indices = _int_list(args.images) if args.images else [args.seed % len(dataset)]
    if any(not 0 <= i < len(dataset) for i in indices):
        raise UsageError(f"image index outside [0, {len(dataset)})")
    dims = _int_list(args.dims) if args.dims else None
    values = _float_list(args.values) if args.values else None
    if values is not None and len(values) < 2:
        raise UsageError("--values needs at least two points")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = "pgm" if dataset.grid.channels == 1 else "ppm"
    for i in indices:
        grid = traversal_grid(model, dataset.images[i], dims, values, dataset.grid.image_shape)
        write_pnm(out / f"traverse_{i}.{ext}", grid)
    print(f"wrote {len(indices)} traversal grid(s) to {out}")
    return 0


# ---- parser ----

def build_parser():
    p = argparse.ArgumentParser(prog="dotfactor", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_flags(sp):
        sp.add_argument("--data", help="dataset directory written by gen-data")
        sp.add_argument("--kind", choices=sorted(synthdata.GENERATORS), default="dsprites-mini",
                        help="generate this dataset in memory when --data is not given")

    g = sub.add_parser("gen-data", help="render a factored dataset to disk")
    g.add_argument("--kind", choices=sorted(synthdata.GENERATORS), required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0, help="accepted for symmetry; rendering is exact")
    g.add_argument("--resolution", type=int)
    g.add_argument("--channels", type=int, choices=(1, 3))
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write checkpoint + log")
    data_flags(t)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint; writes a MetricReport JSON")
    data_flags(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", help="report path (default: stdout)")
    e.add_argument("--seed", type=int, default=0, help="first metric seed")
    e.add_argument("--n-seeds", type=int, default=3)
    e.add_argument("--L", type=int, default=64)
    e.add_argument("--M", type=int, default=800)
    e.add_argument("--label")
    e.set_defaults(func=cmd_eval)

    tv = sub.add_parser("traverse", help="render latent traversal grids")
    data_flags(tv)
    tv.add_argument("--checkpoint", required=True)
    tv.add_argument("--out", required=True)
    tv.add_argument("--seed", type=int, default=0, help="picks the image when --images is absent")
    tv.add_argument("--images", help="comma-separated dataset indices")
    tv.add_argument("--dims", help="comma-separated 1-based c dims (default: all)")
    tv.add_argument("--values", help="comma-separated traversal values")
    tv.set_defaults(func=cmd_traverse)

    r = sub.add_parser("report", help="render MetricReport JSON files as a table")
    r.add_argument("reports", nargs="+")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = _threads()
        with threadpool_limits(limits=threads):
            return args.func(args)
    except UsageError as err:
        print(f"dotfactor {args.command}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
