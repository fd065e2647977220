"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
input).  Reports are printed as ``key=value`` lines.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import numcore as nc
from .flops import count_flops
from .geometry import build_mask, gen_group_mask, read_pgm, read_ppm, write_pgm, write_ppm
from .network import StageConfig
from .pipeline import LAMBDAS, Model, decompress, encode, masked_psnr
from .rangecoder import BitstreamContainer
from .train import TOY_CONFIG, synthetic_images, train, training_masks

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _threads() -> int:
    raw = os.environ.get("EMIC_THREADS", "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"EMIC_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise UsageError(f"EMIC_THREADS must be a positive integer, got {raw!r}")
    return n


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"no such file: {p}")
    return p


def _load(fn, path: str, what: str):
    p = _existing(path)
    try:
        return fn(p)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read {what} {p}: {exc}") from exc


def _emit(**kv) -> None:
    for k, v in kv.items():
        if isinstance(v, float):
            v = f"{v:.6f}"
        print(f"{k}={v}")


def _lambda_index(i: int) -> int:
    if not 0 <= i < len(LAMBDAS):
        raise UsageError(f"--lambda-index must be in 0..{len(LAMBDAS) - 1}")
    return i


def _image_and_mask(args):
    image = _load(read_ppm, args.input, "image")
    if args.mask:
        pm = _load(read_pgm, args.mask, "mask")
        if pm.shape != image.shape[:2]:
            raise DataError(f"mask {args.mask} is {pm.shape[1]}x{pm.shape[0]}, "
                            f"image {args.input} is {image.shape[1]}x{image.shape[0]}")
    else:
        pm = np.ones(image.shape[:2], dtype=bool)
    return image, pm


# ---------------------------------------------------------------------------
# verbs


def cmd_encode(args) -> int:
    model = _load(Model.load, args.model, "model")
    image, pm = _image_and_mask(args)
    res = _encode(image, pm, model, _lambda_index(args.lambda_index))
    blob = res.container.serialize()
    Path(args.output).write_bytes(blob)
    n_pix = int(pm.sum())
    _emit(output=args.output, bytes=len(blob), header_bytes=res.container.header_size(),
          payload_bits=res.container.payload_bits(), visible_pixels=n_pix,
          bpp=res.container.payload_bits() / n_pix, bpp_estimate=res.estimate_bits / n_pix)
    return EXIT_OK


def _encode(image, pm, model, lam_idx):
    try:
        return encode(image, pm, model, lam_idx)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _decode(blob: bytes, model: Model, path: str):
    try:
        return decompress(BitstreamContainer.parse(blob), model)
    except ValueError as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc


def cmd_decode(args) -> int:
    model = _load(Model.load, args.model, "model")
    blob = _load(Path.read_bytes, args.input, "bitstream")
    rec = _decode(blob, model, args.input)
    write_ppm(args.output, rec)
    _emit(output=args.output, width=rec.shape[1], height=rec.shape[0])
    return EXIT_OK


def cmd_roundtrip(args) -> int:
    model = _load(Model.load, args.model, "model")
    image, pm = _image_and_mask(args)
    res = _encode(image, pm, model, _lambda_index(args.lambda_index))
    blob = res.container.serialize()
    rec = _decode(blob, model, "<memory>")
    n_pix = int(pm.sum())
    exact = np.array_equal(rec, res.reconstruction) and not np.any(rec[~pm])
    _emit(bytes=len(blob), bpp=res.container.payload_bits() / n_pix,
          bpp_header=8 * res.container.header_size() / n_pix,
          psnr_masked=masked_psnr(image, np.clip(rec, 0.0, 1.0), pm))
    print(f"BITEXACT: {'yes' if exact else 'no'}")
    return EXIT_OK if exact else EXIT_DATA


def cmd_maskgen(args) -> int:
    if not 0.0 < args.ratio <= 1.0:
        raise UsageError("--ratio must be in (0, 1]")
    mask = gen_group_mask(args.height, args.width, args.ratio, args.seed)
    write_pgm(args.output, mask.pixel_mask())
    _emit(output=args.output, units=mask.units.size, visible_units=mask.n_visible,
          visible_ratio=mask.visible_ratio)
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = _load(Model.load, args.model, "model").cfg if args.model else StageConfig()
    if args.mask:
        mask = build_mask(_load(read_pgm, args.mask, "mask"))
    else:
        if args.visible_ratio is None or not 0.0 < args.visible_ratio <= 1.0:
            raise UsageError("give --mask or --visible-ratio in (0, 1]")
        mask = gen_group_mask(args.height, args.width, args.visible_ratio, args.seed)
    rep = count_flops(cfg, mask)
    print(rep.as_text(detail=args.detail))
    return EXIT_OK


def cmd_train(args) -> int:
    lam = args.__dict__["lambda"]
    if not any(np.isclose(lam, l) for l in LAMBDAS):
        raise UsageError(f"--lambda must be one of {LAMBDAS}")
    if args.data:
        d = Path(args.data)
        if not d.is_dir():
            raise DataError(f"no such directory: {d}")
        files = sorted(d.glob("*.ppm"))
        if not files:
            raise DataError(f"no .ppm files in {d}")
        images = [_load(read_ppm, str(f), "image") for f in files]
    else:
        images = synthetic_images(16, args.seed)
    h, w = images[0].shape[:2]
    if any(im.shape != images[0].shape for im in images):
        raise DataError("training images must share one size")
    masks = training_masks(len(images), h, w, args.seed)
    res = train(images, masks, steps=args.steps, batch=args.batch, lam=lam, seed=args.seed, lr=args.lr,
                cfg=StageConfig(**TOY_CONFIG), log=print)
    if args.output:
        res.model.save(args.output)
    _emit(steps=res.state.step, epochs=res.state.epoch, initial_loss=res.initial_loss,
          final_loss=res.final_loss, ratio=res.ratio, lr=res.state.lr, seconds=res.seconds)
    if args.output:
        _emit(model=args.output, model_id=f"{res.model.model_id:08x}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    results = run_selftest(_threads())
    for name, ok, detail in results:
        print(f"{name}={'pass' if ok else 'FAIL'}" + (f" ({detail})" if detail else ""))
    ok = all(r[1] for r in results)
    print(f"selftest={'pass' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_DATA


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="emic", description="Masked-image codec: encode, decode and analyse.")
    sub = p.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)
    sub.required = True

    def coding(sp, output: bool):
        sp.add_argument("--input", required=True)
        sp.add_argument("--mask", help="PGM; nonzero pixels are visible (default: all visible)")
        sp.add_argument("--model", required=True)
        sp.add_argument("--lambda-index", type=int, default=0)
        if output:
            sp.add_argument("--output", required=True)

    coding(sub.add_parser("encode", help="image + mask -> .emic"), True)
    s = sub.add_parser("decode", help=".emic -> PPM")
    s.add_argument("--input", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--output", required=True)
    coding(sub.add_parser("roundtrip", help="encode, decode and compare"), False)

    s = sub.add_parser("maskgen", help="random group mask as PGM")
    s.add_argument("--ratio", type=float, required=True, help="visible ratio")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--width", type=int, default=512)
    s.add_argument("--height", type=int, default=512)
    s.add_argument("--output", required=True)

    s = sub.add_parser("flops", help="analytic FLOPs report")
    s.add_argument("--width", type=int, default=512)
    s.add_argument("--height", type=int, default=512)
    s.add_argument("--visible-ratio", type=float)
    s.add_argument("--mask")
    s.add_argument("--model", help="take widths from a parameter file")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--detail", action="store_true", help="list every module")

    s = sub.add_parser("train", help="toy training run")
    s.add_argument("--data", help="directory of same-size PPM images (default: synthetic)")
    s.add_argument("--lambda", type=float, default=0.01)
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--batch", type=int, default=4)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output", help="write the trained parameter file here")

    sub.add_parser("selftest", help="run the invariant suite")
    return p


COMMANDS = {"encode": cmd_encode, "decode": cmd_decode, "roundtrip": cmd_roundtrip,
            "maskgen": cmd_maskgen, "flops": cmd_flops, "train": cmd_train, "selftest": cmd_selftest}


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _threads()
        return COMMANDS[args.verb](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"emic: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (nc.NonFiniteError, RuntimeError) as exc:
        print(f"emic: error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
