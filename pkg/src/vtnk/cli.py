"""Command-line surface: one subcommand per pipeline stage plus a full run.

Exit codes: 0 success, 1 bad input (including usage errors), 2 internal
failure. Every failure prints a single diagnostic line starting with
``error:``. Verbosity via the VTNK_LOG env var (error, info, debug). All
randomness is seeded, so identical invocations produce identical bytes.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import geometry as geo
from . import io as vio
from . import pipeline, spectral
from .errors import VtnkError

log = logging.getLogger("vtnk")

_INPUT_ERRORS = (VtnkError, FileNotFoundError, IsADirectoryError, PermissionError, ValueError, KeyError)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; the CLI contract reserves
    # 2 for internal failures, so usage problems are rerouted to exit 1.
    def error(self, message):
        raise _UsageError(message)


def _configure_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("VTNK_LOG", "error").lower(), logging.ERROR
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _load_pose(path, image_size) -> geo.Skeleton:
    skeletons = vio.read_keypoints(path, image_size=image_size)
    if not skeletons:
        raise VtnkError(f"{path}: document contains no people")
    return skeletons[0]


def _toy_denoiser(name: str) -> pipeline.DenoiserContract:
    if name == "toy":
        return pipeline.ToyConvDenoiser()
    if name == "zero":
        return pipeline.ZeroDenoiser()
    raise VtnkError(f"unknown denoiser {name!r} (expected 'toy' or 'zero')")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_morph(args) -> int:
    source_parsing = vio.read_parsing(args.pseudo_parse)
    target_parsing = vio.read_parsing(args.target_parse)
    source_skeleton = _load_pose(args.pseudo_pose, source_parsing.shape)
    target_skeleton = _load_pose(args.target_pose, target_parsing.shape)
    image = vio.read_image(args.pseudo_img)
    if image.shape[:2] != source_parsing.shape:
        raise VtnkError("pseudo image and pseudo parsing dimensions differ")
    config = pipeline.TryOnConfig.for_category(
        args.category, confidence_threshold=args.confidence_threshold
    )
    warp = pipeline.morph_for_config(
        image, source_skeleton, source_parsing, target_skeleton, target_parsing, config
    )
    log.info("morph: %s", ", ".join(f"region {r}: {s}" for r, s in warp.per_region_status))
    vio.write_image(args.out, warp.image)
    out_mask = args.out_mask or str(Path(args.out).with_suffix(".coverage.png"))
    vio.write_mask(out_mask, warp.coverage_mask)
    return 0


def _cmd_spi(args) -> int:
    z_inv = vio.read_tensor(args.inv_noise)
    if z_inv.ndim != 3:
        raise VtnkError(f"{args.inv_noise}: expected a rank-3 latent, got rank {z_inv.ndim}")
    fresh = np.random.default_rng(args.seed).standard_normal(z_inv.shape)
    mixed = spectral.spectral_pose_inject(z_inv.astype(float), fresh, args.tau)
    vio.write_tensor(args.out, mixed)
    return 0


def _cmd_pseudo(args) -> int:
    garment = vio.read_image(args.garment)
    garment_mask = vio.read_mask(args.garment_mask)
    agnostic = vio.read_image(args.agnostic)
    agnostic_mask = vio.read_mask(args.agnostic_mask)
    relocated, relocated_mask = geo.relocate_garment(garment, garment_mask, agnostic_mask)
    config = pipeline.TryOnConfig(random_seed=args.seed, num_steps=args.steps)
    result = pipeline.generate_pseudo_person(
        relocated, relocated_mask, agnostic, agnostic_mask, _toy_denoiser(args.denoiser), config
    )
    vio.write_image(args.out, result)
    return 0


_CONFIG_PATHS = (
    "garment_image", "garment_mask", "person_image", "agnostic_image",
    "agnostic_mask", "target_pose", "target_parsing", "source_pose",
    "source_parsing", "prompt_embedding",
)


def _cmd_tryon(args) -> int:
    cfg_path = Path(args.config)
    try:
        cfg = json.loads(cfg_path.read_text())
    except json.JSONDecodeError as exc:
        raise VtnkError(f"{cfg_path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise VtnkError(f"{cfg_path}: config must be a JSON object")

    def path_of(key, required=True):
        if key not in cfg or cfg[key] is None:
            if required:
                raise VtnkError(f"{cfg_path}: missing required key {key!r}")
            return None
        return str(cfg_path.parent / cfg[key])

    # flags override file values
    tau = args.tau if args.tau is not None else float(cfg.get("tau", 0.1))
    steps = args.steps if args.steps is not None else int(cfg.get("num_steps", 50))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    category = args.category or cfg.get("category", "upper")
    denoiser_name = args.denoiser or cfg.get("denoiser", "toy")
    mode = cfg.get("mode", "shop")
    if mode not in ("shop", "worn"):
        raise VtnkError(f"{cfg_path}: mode must be 'shop' or 'worn', got {mode!r}")

    target_parsing = vio.read_parsing(path_of("target_parsing"))
    source_parsing = vio.read_parsing(path_of("source_parsing"))
    prompt_path = path_of("prompt_embedding", required=False)
    inputs = pipeline.TryOnInputs(
        garment_image=vio.read_image(path_of("garment_image")),
        garment_mask=vio.read_mask(path_of("garment_mask")),
        person_image=vio.read_image(path_of("person_image")),
        agnostic_image=vio.read_image(path_of("agnostic_image")),
        agnostic_mask=vio.read_mask(path_of("agnostic_mask")),
        target_skeleton=_load_pose(path_of("target_pose"), target_parsing.shape),
        target_parsing=target_parsing,
        source_skeleton=_load_pose(path_of("source_pose"), source_parsing.shape),
        source_parsing=source_parsing,
        prompt_embedding=vio.read_tensor(prompt_path) if prompt_path else None,
        shop_mode=(mode == "shop"),
    )
    config = pipeline.TryOnConfig.for_category(
        category,
        tau=tau,
        num_steps=steps,
        random_seed=seed,
        spi_noise_seed=cfg.get("spi_noise_seed"),
        cbs_enabled=not args.no_cbs and bool(cfg.get("cbs", True)),
        spi_enabled=not args.no_spi and bool(cfg.get("spi", True)),
        morph_enabled=bool(cfg.get("morph", True)),
    )
    result = pipeline.run_tryon(inputs, _toy_denoiser(denoiser_name), config)
    vio.write_image(args.out, result)
    return 0


def _cmd_inspect(args) -> int:
    tensor = vio.read_tensor(args.tensor)
    dims = "x".join(str(d) for d in tensor.shape)
    print(f"dims={dims} dtype=f32")
    print(f"min={tensor.min():.6g} max={tensor.max():.6g} mean={tensor.mean():.6g}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vtnk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("morph", help="warp a worn garment onto a target body")
    p.add_argument("--pseudo-img", required=True, help="image of the garment wearer")
    p.add_argument("--pseudo-pose", required=True, help="keypoint JSON for the wearer")
    p.add_argument("--pseudo-parse", required=True, help="part-id PNG for the wearer")
    p.add_argument("--target-pose", required=True, help="keypoint JSON for the target")
    p.add_argument("--target-parse", required=True, help="part-id PNG for the target")
    p.add_argument("--category", required=True, choices=["upper", "lower", "dress"])
    p.add_argument("--confidence-threshold", type=float, default=0.3)
    p.add_argument("--out", required=True, help="warped garment PNG")
    p.add_argument("--out-mask", help="coverage PNG (default: <out>.coverage.png)")
    p.set_defaults(func=_cmd_morph)

    p = sub.add_parser("spi", help="blend inversion noise with seeded fresh noise")
    p.add_argument("--inv-noise", required=True, help="rank-3 tensor file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_spi)

    p = sub.add_parser("pseudo", help="synthesize a person wearing the garment")
    p.add_argument("--garment", required=True)
    p.add_argument("--garment-mask", required=True)
    p.add_argument("--agnostic", required=True)
    p.add_argument("--agnostic-mask", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--denoiser", default="toy", choices=["toy", "zero"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_pseudo)

    p = sub.add_parser("tryon", help="full try-on run from a JSON config")
    p.add_argument("--config", required=True, help="JSON config (see README schema)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--category", choices=["upper", "lower", "dress"])
    p.add_argument("--denoiser", choices=["toy", "zero"])
    p.add_argument("--no-cbs", action="store_true", help="disable boundary stitching")
    p.add_argument("--no-spi", action="store_true", help="use fresh noise only")
    p.set_defaults(func=_cmd_tryon)

    p = sub.add_parser("inspect", help="print tensor file dims and stats")
    p.add_argument("tensor")
    p.set_defaults(func=_cmd_inspect)

    return parser


def dispatch(argv: list[str]) -> int:
    """Run one CLI invocation; returns the process exit code."""
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except _INPUT_ERRORS as exc:
        log.debug("input error", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is a bug, not bad input
        log.debug("internal error", exc_info=True)
        print(f"error: internal: {exc!r}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
