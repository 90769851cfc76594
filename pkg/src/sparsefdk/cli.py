"""Command-line frontend: phantom, project, reconstruct, train, eval, export-slice.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numeric
failure. Every command reads its geometry from a single JSON file.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .core import ContainerError, Geometry, GeometryError, load_projections, load_volume, save_projections, save_volume
from .fdk import classical_fdk
from .metrics import take_slice, view_metrics
from .model import forward, load_model, save_model, init_from_classical
from .projector import forward_project, set_threads
from .sim import NoiseConfig, add_poisson_noise, load_specs, phantom_volume, shepp3d
from .training import NumericalError, TrainConfig, train, write_log_csv
from .wavelet import WaveletShapeError

log = logging.getLogger("sparsefdk")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _geometry(path) -> Geometry:
    return Geometry.load(path)


def _same_geometry(expected: Geometry, got: Geometry, what: str) -> None:
    if got != expected:
        raise DataError(f"{what}: geometry differs from --geom")


def cmd_phantom(args) -> int:
    geom = _geometry(args.geom)
    specs = shepp3d(geom) if args.preset == "shepp3d" else load_specs(args.spec)
    save_volume(args.out, phantom_volume(geom, specs))
    return EXIT_OK


def cmd_project(args) -> int:
    geom = _geometry(args.geom)
    vol = load_volume(args.inp)
    vol.check(geom)
    stack = forward_project(geom, vol)
    if args.noise_i0 is not None:
        stack = add_poisson_noise(stack, NoiseConfig(args.noise_i0, args.seed))
    save_projections(args.out, stack)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    geom = _geometry(args.geom)
    stack = load_projections(args.inp)
    _same_geometry(geom, stack.geometry, str(args.inp))
    if args.model:
        model = load_model(args.model)
        _same_geometry(geom, model.geom, str(args.model))
        if args.plain_backprojection or args.pad2x:
            model = type(model)(model.geom, model.params,
                                model.plain_backprojection or args.plain_backprojection,
                                model.pad2x or args.pad2x)
        _, out = forward(model, stack)
    else:
        _, out = classical_fdk(geom, stack, plain_backprojection=args.plain_backprojection, pad2x=args.pad2x)
    save_volume(args.out, out)
    return EXIT_OK


def _pairs(directory, geom: Geometry):
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    projs = {p.name[: -len("_proj.cbct")]: p for p in directory.glob("*_proj.cbct")}
    gts = {p.name[: -len("_gt.cbct")]: p for p in directory.glob("*_gt.cbct")}
    for name in sorted(set(projs) ^ set(gts)):
        raise DataError(f"unpaired file: {projs.get(name) or gts.get(name)}")
    if not projs:
        raise DataError(f"{directory}: no *_proj.cbct / *_gt.cbct pairs")
    samples = []
    for name in sorted(projs):
        stack = load_projections(projs[name])
        _same_geometry(geom, stack.geometry, str(projs[name]))
        vol = load_volume(gts[name])
        vol.check(geom)
        samples.append((stack, vol))
    return samples


def cmd_train(args) -> int:
    geom = _geometry(args.geom)
    dataset = _pairs(args.train_dir, geom)
    val = _pairs(args.val_dir, geom) if args.val_dir else []
    model = init_from_classical(geom, plain_backprojection=args.plain_backprojection, pad2x=args.pad2x)
    config = TrainConfig(epochs=args.epochs, learning_rate=args.lr, seed=args.seed)
    result = train(model, dataset, val, config)
    save_model(args.out, result.model)
    if args.log:
        write_log_csv(args.log, result.log)
    log.info("best epoch %d, validation loss %.6g", result.best_epoch, result.best_val_loss)
    return EXIT_OK


def cmd_eval(args) -> int:
    recon, gt = load_volume(args.recon), load_volume(args.gt)
    if recon.data.shape != gt.data.shape:
        raise DataError(f"shape mismatch: {recon.shape} vs {gt.shape}")
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["view", "slice_index", "psnr_db", "ssim"])
        for r in view_metrics(recon.data, gt.data):
            writer.writerow([r.view, "" if r.slice_index is None else r.slice_index,
                             f"{r.psnr_db:.6f}", f"{r.ssim:.6f}"])
    return EXIT_OK


def slice_to_pgm(image: np.ndarray, window: tuple[float, float] | None = None) -> bytes:
    """Binary 16-bit PGM (P5, big-endian, maxval 65535).

    ``window`` defaults to the slice min and max. A degenerate window
    (hi <= lo) maps every pixel to full scale.
    """
    image = np.asarray(image, dtype=np.float64)
    lo, hi = window if window is not None else (float(image.min()), float(image.max()))
    if hi > lo:
        scaled = np.rint(np.clip((image - lo) / (hi - lo), 0.0, 1.0) * 65535.0)
    else:
        scaled = np.full(image.shape, 65535.0)
    rows, cols = image.shape
    return f"P5\n{cols} {rows}\n65535\n".encode("ascii") + scaled.astype(">u2").tobytes()


def _window(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo,hi but got {text!r}") from None
    return lo, hi


def cmd_export_slice(args) -> int:
    vol = load_volume(args.inp)
    try:
        _, image = take_slice(vol.data, args.view, args.index)
    except IndexError as exc:
        raise DataError(str(exc)) from exc
    Path(args.out).write_bytes(slice_to_pgm(image, args.window))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sparsefdk", description="Wavelet-sparse trainable FDK for cone-beam CT.")
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    p.add_argument("--deterministic", action="store_true",
                   help="fixed reduction order (kernels always partition work deterministically)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="voxelize an ellipsoid phantom")
    s.add_argument("--geom", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=["shepp3d"])
    src.add_argument("--spec")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("project", help="forward-project a volume, optionally with Poisson noise")
    s.add_argument("--geom", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--noise-i0", type=float, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("reconstruct", help="classical FDK or a trained model")
    s.add_argument("--geom", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--model")
    s.add_argument("--plain-backprojection", action="store_true")
    s.add_argument("--pad2x", action="store_true")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("train", help="train the sparse weights and filters")
    s.add_argument("--geom", required=True)
    s.add_argument("--train-dir", required=True)
    s.add_argument("--val-dir")
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--lr", type=float, default=0.001)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.add_argument("--plain-backprojection", action="store_true")
    s.add_argument("--pad2x", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="PSNR/SSIM per view")
    s.add_argument("--recon", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export-slice", help="write one slice as a 16-bit PGM")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--view", required=True, choices=["axial", "sagittal", "coronal"])
    s.add_argument("--index", type=int, default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--window", type=_window, default=None)
    s.set_defaults(func=cmd_export_slice)
    return p


def main(argv=None) -> int:
    # numba notes an old TBB once per process and falls back to another threading layer
    warnings.filterwarnings("ignore", message=".*TBB threading layer.*")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    set_threads(args.threads)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, GeometryError, ContainerError, WaveletShapeError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
