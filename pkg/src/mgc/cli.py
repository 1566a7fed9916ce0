"""``mgc`` command line: pretrain, dump-corr, localize, gradcheck, match.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .augment import resample
from .config import ConfigError, RunConfig, load_config
from .contrast import total_loss
from .data import ImageFormatError, read_ppm
from .geometry import NoOverlapError, correspondence_weights, localize
from .oracle import GradCheckReport, brute_correspondences, fd_gradient_check
from .trainer import build_model, fit, load_checkpoint, prepare_batch
from .types import CropBox, PatchGrid, validate_granularities

GRADCHECK_TOLERANCE = 1e-5
# Gradients below this magnitude are compared absolutely (|a - n| <= tol * floor).
# Some are exactly zero, e.g. the final LayerNorm bias, which the projector's
# BatchNorm cancels, so a relative comparison would only measure rounding noise.
GRADCHECK_FLOOR = 1e-5


class UsageError(Exception):
    pass


def _crop(spec: str) -> CropBox:
    try:
        return CropBox.parse(spec)
    except ValueError as e:
        raise UsageError(f"bad crop spec: {e}") from None


def _int_list(text: str) -> List[int]:
    try:
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


@contextmanager
def _output(path: Optional[str]):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w") as fh:
            yield fh


def _run_config(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    return load_config(args.config, overrides)


# -- pretrain ------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    run = _run_config(args)
    out = args.out or "runs/pretrain"
    result = fit(run.dataset(), run.train, out, resume=args.resume)
    last = result.losses[-1] if result.losses else float("nan")
    print(json.dumps({"steps": result.steps, "final_loss": last,
                      "checkpoint": str(result.checkpoints[-1]) if result.checkpoints else None,
                      "metrics": str(result.metrics_path)}))
    return 0


# -- correspondences and localization --------------------------------------------

def cmd_dump_corr(args) -> int:
    c1, c2 = _crop(args.crop1), _crop(args.crop2)
    grid = PatchGrid(args.grid, args.grid)
    try:
        grans = validate_granularities(_int_list(args.granularities), grid)
    except ValueError as e:
        raise UsageError(str(e)) from None
    build = brute_correspondences if args.oracle else correspondence_weights
    count = 0
    with _output(args.out) as fh:
        for c in grans:
            for line in build(c1, c2, grid, c).to_jsonl():
                fh.write(line + "\n")
                count += 1
    if count == 0:
        print("warning: crops do not overlap; no correspondences written", file=sys.stderr)
    return 0


def cmd_localize(args) -> int:
    c1, c2 = _crop(args.crop1), _crop(args.crop2)
    key = _int_list(args.key)
    if len(key) != 2:
        raise UsageError("--key needs two integers u,v")
    grid = PatchGrid(args.grid, args.grid)
    try:
        cells = localize(c1, c2, grid, args.c, (key[0], key[1]))
    except NoOverlapError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, IndexError) as e:
        raise UsageError(str(e)) from None
    if args.jsonl:
        for cell in cells:
            rec = dataclasses.asdict(cell)
            rec.update(error_x=cell.error_x, error_y=cell.error_y)
            print(json.dumps(rec))
        return 0
    print(f"{'k':>3} {'l':>3} {'x':>12} {'true_x':>12} {'err_x':>10} {'ok_x':>5} "
          f"{'y':>12} {'true_y':>12} {'err_y':>10} {'ok_y':>5}")
    for cell in cells:
        print(f"{cell.k:>3} {cell.l:>3} {cell.x:>12.6f} {cell.true_x:>12.6f} {cell.error_x:>10.2e} "
              f"{str(cell.valid_x):>5} {cell.y:>12.6f} {cell.true_y:>12.6f} {cell.error_y:>10.2e} "
              f"{str(cell.valid_y):>5}")
    return 0


# -- gradient check ----------------------------------------------------------------

def gradient_check(run: RunConfig, batch: int = 2, n_samples: int = 200, eps: float = 1e-3,
                   order: int = 4, floor: float = GRADCHECK_FLOOR,
                   corrupt: bool = False) -> GradCheckReport:
    """Finite-difference check of ``total_loss`` on the base-branch parameters at float64."""
    config = dataclasses.replace(run.train, dtype="float64")
    dataset = run.data.build(config.seed)
    if len(dataset) < batch:
        raise ValueError(f"gradient check needs {batch} images, dataset has {len(dataset)}")
    model = build_model(config)
    model.train()
    x1, x2, samples, swapped = prepare_batch([dataset[i] for i in range(batch)], config, 0)

    # ReLU sign patterns of the current evaluation; an entry whose +-eps
    # stencil changes any of them straddles a kink and is redrawn.
    signs: List[torch.Tensor] = []
    relus = [m for head in (model.projector, model.predictor) for m in head.modules()
             if isinstance(m, torch.nn.ReLU)]
    hooks = [m.register_forward_hook(lambda mod, inp, out: signs.append(inp[0] > 0)) for m in relus]

    def loss_fn() -> float:
        signs.clear()
        with torch.no_grad():
            return total_loss(model, x1, x2, samples, config.loss, swapped).total.item()

    loss_fn()
    baseline = list(signs)

    def smooth() -> bool:
        return all(torch.equal(a, b) for a, b in zip(signs, baseline))

    named = list(model.named_base_parameters())
    params = [p for _, p in named]
    model.zero_grad(set_to_none=True)
    total_loss(model, x1, x2, samples, config.loss, swapped).total.backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    if corrupt:
        grads = [g * 1.01 + 1e-3 for g in grads]
    try:
        return fd_gradient_check(loss_fn, params, grads, eps=eps, n_samples=n_samples,
                                 rng=np.random.default_rng([config.seed, 7]),
                                 names=[n for n, _ in named], accept=smooth, order=order,
                                 floor=floor)
    finally:
        for h in hooks:
            h.remove()


def cmd_gradcheck(args) -> int:
    run = _run_config(args)
    report = gradient_check(run, batch=args.batch, n_samples=args.samples, corrupt=args.corrupt)
    ok = report.max_rel_error <= GRADCHECK_TOLERANCE
    print(f"checked {report.checked} entries ({report.skipped} redrawn at ReLU kinks); "
          f"max relative error {report.max_rel_error:.3e} at {report.worst_name}[{report.worst_index[1]}]")
    if ok:
        print(f"PASS (<= {GRADCHECK_TOLERANCE:g})")
        return 0
    print(f"FAIL (> {GRADCHECK_TOLERANCE:g}); worst parameter {report.worst_name}", file=sys.stderr)
    print("FAIL")
    return 1


# -- feature matching --------------------------------------------------------------

def _load_view(path: str, side: int) -> np.ndarray:
    img = read_ppm(path)
    if img.shape[:2] == (side, side):
        return img
    h, w = img.shape[:2]
    return resample(img, CropBox(0, 0, w, h), side)


def match_patches(model, image_a: torch.Tensor, image_b: torch.Tensor, attention: bool = False):
    """Best view-b patch for every view-a patch, as (a index, b index, score) rows."""
    model.eval()
    with torch.no_grad():
        if attention:
            qa, _ = model.backbone.last_block_qk(image_a)
            _, kb = model.backbone.last_block_qk(image_b)
            scale = qa.shape[-1] ** -0.5
            scores = torch.softmax((qa[0] @ kb[0].transpose(-2, -1)) * scale, dim=-1).mean(0)
        else:
            fa = model.backbone(image_a)[0].flatten(0, 1)
            fb = model.backbone(image_b)[0].flatten(0, 1)
            fa = torch.nn.functional.normalize(fa, dim=-1)
            fb = torch.nn.functional.normalize(fb, dim=-1)
            scores = fa @ fb.T
    best = scores.argmax(dim=1)
    return [(i, int(j), float(scores[i, j])) for i, j in enumerate(best.tolist())]


def cmd_match(args) -> int:
    from .model import prepare_images

    try:
        model, _, config, _, _ = load_checkpoint(args.checkpoint, optimizer_too=False)
    except (OSError, ValueError, KeyError) as e:
        print(f"error: cannot load checkpoint: {e}", file=sys.stderr)
        return 1
    side = config.vit.image_side
    try:
        a = prepare_images([_load_view(args.image_a, side)], config.vit, config.torch_dtype)
        b = prepare_images([_load_view(args.image_b, side)], config.vit, config.torch_dtype)
    except (OSError, ImageFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    n = config.grid.V
    with _output(args.out) as fh:
        for i, j, score in match_patches(model, a, b, attention=args.attention):
            fh.write(json.dumps({"a": i, "b": j, "a_cell": [i // n, i % n],
                                 "b_cell": [j // n, j % n], "similarity": score}) + "\n")
    return 0


# -- entry point ---------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file (defaults to the desk preset)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgc", description="Multi-grained contrastive pretraining tools")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run pretraining")
    _add_config_flags(p)
    p.add_argument("--out", help="output directory for checkpoints and metrics")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("dump-corr", help="print correspondence tables as JSONL")
    p.add_argument("crop1", help="x,y,w,h[,flip]")
    p.add_argument("crop2", help="x,y,w,h[,flip]")
    p.add_argument("--granularities", default="1,2,7,14")
    p.add_argument("--grid", type=int, default=14)
    p.add_argument("--oracle", action="store_true", help="emit the brute-force oracle table instead")
    p.add_argument("--out", help="output file (default stdout)")
    p.set_defaults(func=cmd_dump_corr)

    p = sub.add_parser("localize", help="recover view-1 cell positions inside one key cell")
    p.add_argument("crop1")
    p.add_argument("crop2")
    p.add_argument("--c", type=int, default=1)
    p.add_argument("--key", default="0,0", help="key cell u,v")
    p.add_argument("--grid", type=int, default=14)
    p.add_argument("--jsonl", action="store_true")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradient")
    _add_config_flags(p)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("match", help="nearest patch of image b for every patch of image a")
    p.add_argument("checkpoint")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--attention", action="store_true", help="use last-block attention scores")
    p.add_argument("--out", help="output file (default stdout)")
    p.set_defaults(func=cmd_match)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure: report, don't dump a traceback
        logging.getLogger("mgc").debug("command failed", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
