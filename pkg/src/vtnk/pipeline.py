"""Two-step try-on workflow against an abstract per-step denoiser.

Step 1 builds a garment prior: a pseudo wearer is synthesized for shop
garments (dual-branch denoising with extended attention), then the garment
is morphed region-by-region onto the target body and composited into the
cloth-agnostic image.

Step 2 inpaints: the target person is DDIM-inverted, its low-frequency
structure blended into fresh noise, and a dual-branch sampler denoises the
garment-infused image with bidirectional boundary-stitching attention.

The denoiser is any object honoring DenoiserContract; a deterministic toy
convolutional denoiser is provided so the whole chain runs at desk scale.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import attention as attn
from . import geometry as geo
from . import spectral
from .errors import (
    DegenerateCorners,
    DimensionMismatch,
    HookMismatch,
    InvalidSteps,
    PipelineStageError,
    AllRegionsAbsent,
)

LATENT_CHANNELS = 4
LATENT_STRIDE = 8
COND_CHANNELS = LATENT_CHANNELS + 1  # encoded image + pooled mask
TRAIN_TIMESTEPS = 1000

# Hook callbacks receive (layer_id, AttentionTensors) and either return a
# replacement (tokens, dim) attention output or None to keep the default.
AttentionHook = Callable[[str, attn.AttentionTensors], Optional[np.ndarray]]


@dataclass(frozen=True)
class LayerInfo:
    tokens: int
    dim: int
    grid: tuple[int, int]


@dataclass(frozen=True, eq=False)
class ConditioningBundle:
    """Channels concatenated to the latent plus an opaque prompt vector."""

    concat_channels: np.ndarray      # (COND_CHANNELS, h, w)
    prompt_embedding: np.ndarray     # 1-D, opaque

    def __post_init__(self):
        c = np.asarray(self.concat_channels, dtype=float)
        p = np.asarray(self.prompt_embedding, dtype=float).ravel()
        if c.ndim != 3:
            raise DimensionMismatch("concat_channels must be (C, h, w)")
        object.__setattr__(self, "concat_channels", c)
        object.__setattr__(self, "prompt_embedding", p)


class DenoiserContract:
    """Abstract per-step noise predictor with attention tap/inject hooks.

    ``attention_hooks`` maps layer_id -> callback; during predict() the
    denoiser offers each registered layer's (q, k, v) to its callback and
    substitutes the returned output when one is given. Predictions must be
    deterministic given identical inputs and hook state.
    """

    def __init__(self):
        self.attention_hooks: dict[str, AttentionHook] = {}

    def predict(
        self, latent: np.ndarray, timestep_index: int, conditioning: ConditioningBundle
    ) -> np.ndarray:
        raise NotImplementedError

    def layer_registry(self, latent_shape: tuple[int, int, int]) -> dict[str, LayerInfo]:
        """Self-attention layers available for tapping/injecting at this size."""
        raise NotImplementedError

    @contextmanager
    def hooked(self, hooks: dict[str, AttentionHook]):
        previous = self.attention_hooks
        self.attention_hooks = hooks
        try:
            yield self
        finally:
            self.attention_hooks = previous

    def _offer_hook(self, layer_id: str, tensors: attn.AttentionTensors) -> Optional[np.ndarray]:
        hook = self.attention_hooks.get(layer_id)
        if hook is None:
            return None
        return hook(layer_id, tensors)


class ZeroDenoiser(DenoiserContract):
    """Predicts zero noise; the DDIM chain collapses to pure rescaling."""

    def predict(self, latent, timestep_index, conditioning):
        return np.zeros_like(np.asarray(latent, dtype=float))

    def layer_registry(self, latent_shape):
        return {}


class ToyConvDenoiser(DenoiserContract):
    """Fixed-weight conv/attention denoiser with one hookable attention layer.

    A small network predicts a bounded clean latent from the current latent,
    the conditioning channels, and a constant plane encoding timestep and
    prompt; the noise prediction is ``noise_fraction`` of the implied noise
    (x - sqrt(abar_t) * clean) / sqrt(1 - abar_t). Keeping that fraction
    below 1 leaves the per-step update invertible, so DDIM inversion can
    recover arbitrary latents, while sampling still contracts toward the
    conditioning-driven prediction. Fully deterministic given the seed.
    """

    LAYER_ID = "attn0"

    def __init__(
        self,
        hidden: int = 8,
        weight_seed: int = 1234,
        noise_fraction: float = 0.7,
        latent_weight: float = 0.2,
        position_scale: float = 3.5,
        alpha_profile: np.ndarray | None = None,
    ):
        super().__init__()
        rng = np.random.default_rng(weight_seed)
        cin = LATENT_CHANNELS + COND_CHANNELS + 1
        self.hidden = hidden
        self.noise_fraction = float(noise_fraction)
        self.latent_weight = float(latent_weight)
        self.position_scale = float(position_scale)
        self.alphas = default_alpha_profile() if alpha_profile is None else np.asarray(alpha_profile, dtype=float)
        self.w1 = rng.standard_normal((hidden, cin, 3, 3))
        self.w1 /= np.linalg.norm(self.w1.reshape(hidden, -1), axis=1)[:, None, None, None]
        self.b1 = rng.standard_normal(hidden) * 0.1
        # shared q/k projection (Gram attention): tokens attend to tokens with
        # similar content and, through the positional encoding, position
        self.wq = rng.standard_normal((hidden, hidden)) / np.sqrt(hidden)
        self.wk = self.wq
        self.wv = rng.standard_normal((hidden, hidden)) / np.sqrt(hidden)
        self.w2 = rng.standard_normal((LATENT_CHANNELS, hidden, 3, 3))
        self.w2 /= np.linalg.norm(self.w2.reshape(LATENT_CHANNELS, -1), axis=1)[:, None, None, None]
        self.b2 = rng.standard_normal(LATENT_CHANNELS) * 0.05

    def _positional_encoding(self, hgrid: int, wgrid: int) -> np.ndarray:
        n = hgrid * wgrid
        ys, xs = np.divmod(np.arange(n), wgrid)
        feats = []
        for f in (1.0, 2.0):
            feats += [
                np.sin(2 * np.pi * f * ys / hgrid),
                np.cos(2 * np.pi * f * ys / hgrid),
                np.sin(2 * np.pi * f * xs / wgrid),
                np.cos(2 * np.pi * f * xs / wgrid),
            ]
        base = np.stack(feats, axis=1)
        reps = int(np.ceil(self.hidden / base.shape[1]))
        return self.position_scale * np.tile(base, (1, reps))[:, : self.hidden]

    @staticmethod
    def _conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
        cout = w.shape[0]
        _, h, wd = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        out = np.broadcast_to(b[:, None, None], (cout, h, wd)).copy()
        for dy in range(3):
            for dx in range(3):
                out += np.tensordot(w[:, :, dy, dx], xp[:, dy:dy + h, dx:dx + wd], axes=1)
        return out

    def _predict_clean(self, z, timestep_index, conditioning):
        cond = conditioning.concat_channels
        scalar = timestep_index / TRAIN_TIMESTEPS
        if conditioning.prompt_embedding.size:
            scalar += 0.1 * float(np.tanh(conditioning.prompt_embedding.mean()))
        plane = np.full((1,) + z.shape[1:], scalar)
        x = np.concatenate([self.latent_weight * z, cond, plane], axis=0)
        h1 = np.tanh(self._conv3x3(x, self.w1, self.b1))

        hgrid, wgrid = h1.shape[1], h1.shape[2]
        tokens = h1.reshape(self.hidden, hgrid * wgrid).T
        addressed = tokens + self._positional_encoding(hgrid, wgrid)
        tensors = attn.AttentionTensors(addressed @ self.wq, addressed @ self.wk, tokens @ self.wv)
        out = self._offer_hook(self.LAYER_ID, tensors)
        if out is None:
            out = attn.scaled_attention_map(tensors.q, tensors.k) @ tensors.v
        h2 = np.tanh(out.T.reshape(self.hidden, hgrid, wgrid))
        return 0.5 + 0.5 * np.tanh(self._conv3x3(h2, self.w2, self.b2))

    def predict(self, latent, timestep_index, conditioning):
        z = np.asarray(latent, dtype=float)
        cond = conditioning.concat_channels
        if cond.shape[0] != COND_CHANNELS or cond.shape[1:] != z.shape[1:]:
            raise DimensionMismatch(
                f"conditioning channels {cond.shape} do not match latent {z.shape}"
            )
        clean = self._predict_clean(z, timestep_index, conditioning)
        abar = self.alphas[int(timestep_index)]
        return self.noise_fraction * (z - np.sqrt(abar) * clean) / np.sqrt(1.0 - abar)

    def layer_registry(self, latent_shape):
        _, h, w = latent_shape
        return {self.LAYER_ID: LayerInfo(h * w, self.hidden, (h, w))}


# ---------------------------------------------------------------------------
# desk-scale image <-> latent codec (real backends replace this via adapters)


def encode_image(image: np.ndarray) -> np.ndarray:
    """(H, W, 3) image -> (4, H/8, W/8) latent: pooled RGB plus luminance."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionMismatch("image must be (H, W, 3)")
    h, w = img.shape[:2]
    if h % LATENT_STRIDE or w % LATENT_STRIDE:
        raise DimensionMismatch(f"image dims must be multiples of {LATENT_STRIDE}")
    s = LATENT_STRIDE
    pooled = img.reshape(h // s, s, w // s, s, 3).mean(axis=(1, 3))
    luma = pooled @ np.array([0.299, 0.587, 0.114])
    return np.concatenate([np.moveaxis(pooled, 2, 0), luma[None]], axis=0)


def decode_latent(latent: np.ndarray) -> np.ndarray:
    """(4, h, w) latent -> (8h, 8w, 3) image by block upsampling, clipped."""
    z = np.asarray(latent, dtype=float)
    if z.ndim != 3 or z.shape[0] != LATENT_CHANNELS:
        raise DimensionMismatch(f"latent must be ({LATENT_CHANNELS}, h, w)")
    rgb = np.moveaxis(z[:3], 0, 2)
    up = np.repeat(np.repeat(rgb, LATENT_STRIDE, axis=0), LATENT_STRIDE, axis=1)
    return np.clip(up, 0.0, 1.0)


def encode_mask(mask: np.ndarray) -> np.ndarray:
    """(H, W) mask -> (1, H/8, W/8) soft occupancy channel."""
    m = np.asarray(mask, dtype=float)
    if m.ndim != 2:
        raise DimensionMismatch("mask must be 2-D")
    h, w = m.shape
    if h % LATENT_STRIDE or w % LATENT_STRIDE:
        raise DimensionMismatch(f"mask dims must be multiples of {LATENT_STRIDE}")
    s = LATENT_STRIDE
    return m.reshape(h // s, s, w // s, s).mean(axis=(1, 3))[None]


def make_conditioning(
    image: np.ndarray, mask: np.ndarray, prompt_embedding: np.ndarray | None = None
) -> ConditioningBundle:
    prompt = np.zeros(8) if prompt_embedding is None else prompt_embedding
    return ConditioningBundle(
        np.concatenate([encode_image(image), encode_mask(mask)], axis=0), prompt
    )


# ---------------------------------------------------------------------------
# deterministic DDIM


@dataclass(frozen=True, eq=False)
class DdimSchedule:
    """Sub-sampled diffusion schedule; eta = 0 everywhere (deterministic).

    ``alphas_cumprod`` is strictly decreasing, aligned with ascending
    timesteps; ``timestep_indices`` lists the same steps in sampling
    (descending) order.
    """

    num_steps: int
    alphas_cumprod: np.ndarray     # decreasing, alphas_cumprod[i] at ascending step i
    timestep_indices: np.ndarray   # descending raw timesteps

    def __post_init__(self):
        a = np.asarray(self.alphas_cumprod, dtype=float)
        t = np.asarray(self.timestep_indices, dtype=int)
        if len(a) != self.num_steps or len(t) != self.num_steps:
            raise InvalidSteps("schedule arrays must have num_steps entries")
        if np.any(a <= 0) or np.any(a > 1):
            raise InvalidSteps("alphas_cumprod must lie in (0, 1]")
        if self.num_steps > 1 and not np.all(np.diff(a) < 0):
            raise InvalidSteps("alphas_cumprod must be strictly decreasing")
        object.__setattr__(self, "alphas_cumprod", a)
        object.__setattr__(self, "timestep_indices", t)

    def sampling_steps(self):
        """Yield (timestep, alpha_t, alpha_prev) from noisiest to cleanest;
        the terminal alpha_prev is 1 (fully denoised)."""
        for i in range(self.num_steps - 1, -1, -1):
            a_prev = self.alphas_cumprod[i - 1] if i > 0 else 1.0
            yield int(self.timestep_indices[self.num_steps - 1 - i]), float(
                self.alphas_cumprod[i]
            ), float(a_prev)

    def inversion_steps(self):
        """Same triples in ascending-noise order (clean latent to noise)."""
        for i in range(self.num_steps):
            a_prev = self.alphas_cumprod[i - 1] if i > 0 else 1.0
            yield int(self.timestep_indices[self.num_steps - 1 - i]), float(
                self.alphas_cumprod[i]
            ), float(a_prev)

    @property
    def terminal_alpha(self) -> float:
        return float(self.alphas_cumprod[-1])


def default_alpha_profile() -> np.ndarray:
    """Cumulative alphas of a 1000-step linear-beta (1e-4 to 2e-2) diffusion."""
    betas = np.linspace(1e-4, 2e-2, TRAIN_TIMESTEPS)
    return np.cumprod(1.0 - betas)


def make_ddim_schedule(num_steps: int = 50, alpha_profile: np.ndarray | None = None) -> DdimSchedule:
    """Uniform sub-sampling of the training profile into num_steps steps."""
    if not isinstance(num_steps, (int, np.integer)) or num_steps < 1:
        raise InvalidSteps(f"num_steps must be a positive integer, got {num_steps}")
    profile = default_alpha_profile() if alpha_profile is None else np.asarray(alpha_profile, dtype=float)
    total = len(profile)
    if num_steps > total:
        raise InvalidSteps(f"num_steps {num_steps} exceeds profile length {total}")
    stride = total // num_steps
    ts = np.arange(0, stride * num_steps, stride)
    return DdimSchedule(
        num_steps=num_steps,
        alphas_cumprod=profile[ts],
        timestep_indices=ts[::-1].copy(),
    )


def _ddim_step(x: np.ndarray, eps: np.ndarray, a_t: float, a_prev: float) -> np.ndarray:
    x0 = (x - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
    return np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * eps


def _ddim_step_inverse(x_prev: np.ndarray, eps: np.ndarray, a_t: float, a_prev: float) -> np.ndarray:
    x0 = (x_prev - np.sqrt(1.0 - a_prev) * eps) / np.sqrt(a_prev)
    return np.sqrt(a_t) * x0 + np.sqrt(1.0 - a_t) * eps


def ddim_sample(
    initial_noise: np.ndarray,
    denoiser: DenoiserContract,
    schedule: DdimSchedule,
    conditioning: ConditioningBundle,
) -> np.ndarray:
    """Deterministic denoising from noise to a clean latent."""
    x = np.asarray(initial_noise, dtype=float).copy()
    for t, a_t, a_prev in schedule.sampling_steps():
        eps = denoiser.predict(x, t, conditioning)
        x = _ddim_step(x, eps, a_t, a_prev)
    return x


def ddim_invert(
    latent0: np.ndarray,
    denoiser: DenoiserContract,
    schedule: DdimSchedule,
    conditioning: ConditioningBundle,
    refine_iterations: int = 30,
) -> np.ndarray:
    """Reverse the sampler: map a clean latent to the noise that produces it.

    Each step solves the implicit inverse of the sampling update by
    fixed-point iteration on the noise prediction (up to
    ``refine_iterations`` rounds, early exit below 1e-12, keeping the
    iterate with the smallest step residual so refinement never does worse
    than the one-shot approximation, which is what 0 rounds gives).
    """
    x = np.asarray(latent0, dtype=float).copy()
    for t, a_t, a_prev in schedule.inversion_steps():
        eps = denoiser.predict(x, t, conditioning)
        current = _ddim_step_inverse(x, eps, a_t, a_prev)
        best, best_gap = current, np.inf
        for _ in range(refine_iterations):
            eps = denoiser.predict(current, t, conditioning)
            refined = _ddim_step_inverse(x, eps, a_t, a_prev)
            gap = float(np.max(np.abs(refined - current)))
            if gap < best_gap:
                best_gap, best = gap, refined
            if gap < 1e-12:
                break
            current = refined
        x = best
    return x


# ---------------------------------------------------------------------------
# try-on configuration and stages


@dataclass
class TryOnConfig:
    tau: float = 0.1
    num_steps: int = 50
    region_spec: geo.RegionSpec = field(default_factory=lambda: geo.default_region_spec("upper"))
    extra_region_spec: geo.RegionSpec | None = None  # dress lower section
    confidence_threshold: float = 0.3
    hook_layer_selection: tuple[str, ...] | None = None  # None = all layers
    random_seed: int = 0
    spi_noise_seed: int | None = None  # None -> random_seed + 1
    spi_enabled: bool = True
    cbs_enabled: bool = True
    morph_enabled: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")

    @classmethod
    def for_category(cls, category: str, **kwargs) -> "TryOnConfig":
        if category == "dress":
            upper, lower = geo.dress_region_specs()
            return cls(region_spec=upper, extra_region_spec=lower, **kwargs)
        return cls(region_spec=geo.default_region_spec(category), **kwargs)


def _selected_layers(
    denoiser: DenoiserContract,
    latent_shape: tuple[int, int, int],
    selection: tuple[str, ...] | None,
) -> dict[str, LayerInfo]:
    registry = denoiser.layer_registry(latent_shape)
    if selection is None:
        return registry
    missing = [lid for lid in selection if lid not in registry]
    if missing:
        raise HookMismatch(f"selected layers {missing} not in denoiser registry")
    return {lid: registry[lid] for lid in selection}


def generate_pseudo_person(
    garment_image: np.ndarray,
    garment_mask: np.ndarray,
    person_agnostic_image: np.ndarray,
    agnostic_mask: np.ndarray,
    denoiser: DenoiserContract,
    config: TryOnConfig,
    prompt_embedding: np.ndarray | None = None,
    inject_person_features: bool = True,
) -> np.ndarray:
    """Synthesize a person wearing the (already relocated) garment.

    Two trajectories share one initial noise: the garment branch is
    conditioned on the garment image and its inverted mask (the region to
    complete), the person branch on the cloth-agnostic image and mask. At
    every step the person branch's keys/values are folded into the garment
    branch's self-attention, and the garment branch's final latent is
    decoded.
    """
    h, w = np.asarray(garment_image).shape[:2]
    cond_garment = make_conditioning(garment_image, 1 - np.asarray(garment_mask), prompt_embedding)
    cond_person = make_conditioning(person_agnostic_image, agnostic_mask, prompt_embedding)

    schedule = make_ddim_schedule(config.num_steps)
    rng = np.random.default_rng(config.random_seed)
    shape = (LATENT_CHANNELS, h // LATENT_STRIDE, w // LATENT_STRIDE)
    noise = rng.standard_normal(shape)
    x_person = noise.copy()
    x_garment = noise.copy()

    layers = _selected_layers(denoiser, shape, config.hook_layer_selection)

    for t, a_t, a_prev in schedule.sampling_steps():
        taps: dict[str, attn.AttentionTensors] = {}

        def tap(layer_id, tensors):
            taps[layer_id] = tensors
            return None

        with denoiser.hooked({lid: tap for lid in layers}):
            eps_person = denoiser.predict(x_person, t, cond_person)

        if inject_person_features and layers:

            def inject(layer_id, tensors):
                if layer_id not in taps:
                    raise HookMismatch(f"person branch never reached layer {layer_id}")
                tapped = taps[layer_id]
                return attn.extended_attention(tensors, (tapped.k, tapped.v))

            with denoiser.hooked({lid: inject for lid in layers}):
                eps_garment = denoiser.predict(x_garment, t, cond_garment)
        else:
            eps_garment = denoiser.predict(x_garment, t, cond_garment)

        x_person = _ddim_step(x_person, eps_person, a_t, a_prev)
        x_garment = _ddim_step(x_garment, eps_garment, a_t, a_prev)

    return decode_latent(x_garment)


def morph_garment(
    source_image: np.ndarray,
    source_skeleton: geo.Skeleton,
    source_parsing: geo.SegmentationMap,
    target_skeleton: geo.Skeleton,
    target_parsing: geo.SegmentationMap,
    config: TryOnConfig,
    region_spec: geo.RegionSpec | None = None,
) -> geo.WarpResult:
    """Region-wise perspective morph of the worn garment onto the target body.

    Boxes are built on both skeletons; regions present on both sides get a
    homography fitted from corresponding box corners (TL, TR, BR, BL) and are
    warped; regions absent on either side, or with degenerate boxes, are
    skipped and reported in per_region_status.
    """
    spec = region_spec or config.region_spec
    src_boxes = dict(geo.build_region_boxes(source_skeleton, spec, config.confidence_threshold))
    dst_boxes = dict(geo.build_region_boxes(target_skeleton, spec, config.confidence_threshold))
    common = [r.region_id for r in spec.regions if r.region_id in src_boxes and r.region_id in dst_boxes]
    if not common:
        raise AllRegionsAbsent("source and target share no usable region")

    homographies: list[tuple[int, geo.Homography]] = []
    statuses: list[tuple[int, str]] = []
    usable: list[int] = []
    for rid in common:
        try:
            hom = geo.estimate_homography(src_boxes[rid].corners(), dst_boxes[rid].corners())
        except DegenerateCorners:
            statuses.append((rid, "degenerate"))
            continue
        homographies.append((rid, hom))
        usable.append(rid)

    if target_skeleton.image_size is not None:
        out_size = target_skeleton.image_size
    else:
        out_size = target_parsing.shape

    if not usable:
        h_out, w_out = out_size
        return geo.WarpResult(
            np.zeros((h_out, w_out, 3)), np.zeros((h_out, w_out), bool), statuses
        )

    masks = geo.region_masks(source_parsing, [(rid, src_boxes[rid]) for rid in usable], spec)
    result = geo.piecewise_warp(source_image, masks, homographies, out_size)
    return geo.WarpResult(result.image, result.coverage_mask, statuses + result.per_region_status)


def morph_for_config(
    source_image: np.ndarray,
    source_skeleton: geo.Skeleton,
    source_parsing: geo.SegmentationMap,
    target_skeleton: geo.Skeleton,
    target_parsing: geo.SegmentationMap,
    config: TryOnConfig,
) -> geo.WarpResult:
    """morph_garment over the config's region spec(s); dresses run both
    sections and merge them by coverage union."""
    warp = morph_garment(
        source_image, source_skeleton, source_parsing, target_skeleton, target_parsing, config
    )
    if config.extra_region_spec is not None:
        warp = merge_warp_results(
            warp,
            morph_garment(
                source_image,
                source_skeleton,
                source_parsing,
                target_skeleton,
                target_parsing,
                config,
                region_spec=config.extra_region_spec,
            ),
        )
    return warp


def merge_warp_results(first: geo.WarpResult, second: geo.WarpResult) -> geo.WarpResult:
    """Union of two warps (dress sections); the second wins where both cover."""
    if first.image.shape != second.image.shape:
        raise DimensionMismatch("warp results live on different canvases")
    image = np.where(second.coverage_mask[..., None], second.image, first.image)
    coverage = first.coverage_mask | second.coverage_mask
    return geo.WarpResult(image, coverage, first.per_region_status + second.per_region_status)


def compose_garment_infused(agnostic_image: np.ndarray, warp: geo.WarpResult) -> np.ndarray:
    """Agnostic image with the warped garment pasted where coverage is set."""
    agn = np.asarray(agnostic_image, dtype=float)
    if agn.shape != warp.image.shape:
        raise DimensionMismatch(
            f"agnostic image {agn.shape} vs warp canvas {warp.image.shape}"
        )
    return np.where(warp.coverage_mask[..., None], warp.image, agn)


@dataclass(eq=False)
class TryOnInputs:
    """In-memory bundle for one try-on run (loaders live in the CLI)."""

    garment_image: np.ndarray
    garment_mask: np.ndarray
    person_image: np.ndarray
    agnostic_image: np.ndarray
    agnostic_mask: np.ndarray
    target_skeleton: geo.Skeleton
    target_parsing: geo.SegmentationMap
    source_skeleton: geo.Skeleton
    source_parsing: geo.SegmentationMap
    prompt_embedding: np.ndarray | None = None
    shop_mode: bool = True


@contextmanager
def _stage(name: str):
    try:
        yield
    except PipelineStageError:
        raise
    except Exception as exc:
        raise PipelineStageError(name, exc) from exc


def _dual_branch_inpaint(
    mixed_noise: np.ndarray,
    denoiser: DenoiserContract,
    schedule: DdimSchedule,
    cond_person: ConditioningBundle,
    cond_garment: ConditioningBundle,
    garment_token_masks: dict[str, np.ndarray],
    layers: dict[str, LayerInfo],
    stitch: bool,
) -> np.ndarray:
    """Lockstep dual-branch sampling with bidirectional boundary stitching.

    Per step the garment branch runs first: its self-attention is rescored
    against the previous step's person keys (none at the first step, where it
    falls back to plain self-attention). The person branch then runs with the
    garment branch's same-step keys and mask-gated values appended. With
    ``stitch`` False both branches run untouched, which makes the dual pass
    identical to two independent samplings.
    """
    x_person = mixed_noise.copy()
    x_garment = mixed_noise.copy()
    person_keys_prev: dict[str, np.ndarray] = {}

    for t, a_t, a_prev in schedule.sampling_steps():
        garment_taps: dict[str, attn.AttentionTensors] = {}

        def garment_hook(layer_id, tensors):
            garment_taps[layer_id] = tensors
            if stitch and layer_id in person_keys_prev:
                return attn.cbs_garment_path(tensors, person_keys_prev[layer_id])
            return None

        with denoiser.hooked({lid: garment_hook for lid in layers}):
            eps_garment = denoiser.predict(x_garment, t, cond_garment)

        person_taps: dict[str, attn.AttentionTensors] = {}

        def person_hook(layer_id, tensors):
            person_taps[layer_id] = tensors
            if stitch:
                if layer_id not in garment_taps:
                    raise HookMismatch(f"garment branch never reached layer {layer_id}")
                return attn.cbs_person_path(
                    tensors, garment_taps[layer_id], garment_token_masks[layer_id]
                )
            return None

        with denoiser.hooked({lid: person_hook for lid in layers}):
            eps_person = denoiser.predict(x_person, t, cond_person)

        person_keys_prev = {lid: tap.k for lid, tap in person_taps.items()}
        x_garment = _ddim_step(x_garment, eps_garment, a_t, a_prev)
        x_person = _ddim_step(x_person, eps_person, a_t, a_prev)

    return x_person


def run_tryon(
    inputs: TryOnInputs, denoiser: DenoiserContract, config: TryOnConfig
) -> np.ndarray:
    """Full chain from garment + person inputs to the final try-on image.

    Shop mode synthesizes a pseudo wearer first (the provided source
    skeleton/parsing must describe it); otherwise the garment image itself is
    the worn source. Any failure is re-raised as PipelineStageError naming
    the stage.
    """
    prompt = inputs.prompt_embedding

    with _stage("pseudo_person"):
        if inputs.shop_mode:
            relocated_image, relocated_mask = geo.relocate_garment(
                inputs.garment_image, inputs.garment_mask, inputs.agnostic_mask
            )
            garment_cond_image, garment_cond_mask = relocated_image, relocated_mask
            source_image = generate_pseudo_person(
                relocated_image,
                relocated_mask,
                inputs.agnostic_image,
                inputs.agnostic_mask,
                denoiser,
                config,
                prompt,
            )
        else:
            garment_cond_image = inputs.garment_image
            garment_cond_mask = np.asarray(inputs.garment_mask)
            source_image = inputs.garment_image

    with _stage("morph"):
        h, w = np.asarray(inputs.person_image).shape[:2]
        if config.morph_enabled:
            warp = morph_for_config(
                source_image,
                inputs.source_skeleton,
                inputs.source_parsing,
                inputs.target_skeleton,
                inputs.target_parsing,
                config,
            )
        else:
            warp = geo.WarpResult(np.zeros((h, w, 3)), np.zeros((h, w), bool), [])

    with _stage("compose"):
        infused = compose_garment_infused(inputs.agnostic_image, warp)

    with _stage("invert"):
        schedule = make_ddim_schedule(config.num_steps)
        z0 = encode_image(inputs.person_image)
        cond_invert = make_conditioning(
            inputs.person_image, np.zeros(np.asarray(inputs.person_image).shape[:2]), prompt
        )
        z_inv = ddim_invert(z0, denoiser, schedule, cond_invert)

    with _stage("spi"):
        seed = config.spi_noise_seed if config.spi_noise_seed is not None else config.random_seed + 1
        fresh = np.random.default_rng(seed).standard_normal(z_inv.shape)
        if config.spi_enabled:
            mixed = spectral.spectral_pose_inject(z_inv, fresh, config.tau)
        else:
            mixed = fresh

    with _stage("inpaint"):
        cond_person = make_conditioning(infused, inputs.agnostic_mask, prompt)
        cond_garment = make_conditioning(garment_cond_image, 1 - garment_cond_mask, prompt)
        layers = _selected_layers(denoiser, mixed.shape, config.hook_layer_selection)
        token_masks = {
            lid: attn.downsample_token_mask(garment_cond_mask, info.grid)
            for lid, info in layers.items()
        }
        z_out = _dual_branch_inpaint(
            mixed,
            denoiser,
            schedule,
            cond_person,
            cond_garment,
            token_masks,
            layers,
            stitch=config.cbs_enabled,
        )
        decoded = decode_latent(z_out)

    with _stage("composite"):
        person = np.asarray(inputs.person_image, dtype=float)
        keep = np.asarray(inputs.agnostic_mask) > 0
        final = np.where(keep[..., None], decoded, person)
    return np.clip(final, 0.0, 1.0)
