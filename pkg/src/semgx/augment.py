"""Stochastic window augmentation for the multi-subject training stage.

Five transforms, applied in a fixed order when their independent activation
coins land: additive Gaussian jitter, per-channel amplitude scaling, time
warping (random crop, linearly resampled back to full length), contiguous
time masking across both channels, and mixup against another window in the
same set. Each original window yields exactly one compound augmented copy,
so augmenting a training set doubles its cardinality.

Every random decision is drawn from a named stream keyed by the window's
provenance (subject, gesture, trial, offset) and the transform name, so the
augmented copy of a given window is a pure function of (window, config,
seed) — independent of batch composition, set ordering, or which other
transforms fired. Mixup partners come from a seeded permutation over the
provenance-sorted set and always mix against the partner's raw samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AugmentError, WarpError
from .seeding import derive_rng
from .windowing import Window


@dataclass(frozen=True)
class AugmentConfig:
    p_jitter: float = 0.5
    jitter_sigma_scale: float = 0.05  # sigma = scale * std(window)
    p_scale: float = 0.5
    scale_range: tuple[float, float] = (0.8, 1.2)
    p_warp: float = 0.5
    crop_range: tuple[float, float] = (0.7, 1.0)
    p_mask: float = 0.5
    mask_fraction_range: tuple[float, float] = (0.05, 0.15)
    p_mixup: float = 0.5
    mixup_alpha: float = 0.2

    def validate(self) -> None:
        for name in ("p_jitter", "p_scale", "p_warp", "p_mask", "p_mixup"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise AugmentError(f"{name}={p} outside [0, 1]")
        if self.jitter_sigma_scale < 0:
            raise AugmentError("jitter_sigma_scale must be >= 0")
        lo, hi = self.crop_range
        if not (0.0 < lo <= hi <= 1.0):
            raise AugmentError(f"crop_range {self.crop_range} outside (0, 1]")
        lo, hi = self.mask_fraction_range
        if not (0.0 <= lo <= hi < 1.0):
            raise AugmentError(f"mask_fraction_range {self.mask_fraction_range} outside [0, 1)")
        if self.mixup_alpha <= 0:
            raise AugmentError("mixup_alpha must be > 0")


# ---------------------------------------------------------------------------
# Pure transforms
# ---------------------------------------------------------------------------

def gaussian_jitter(samples: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add zero-mean Gaussian noise with absolute standard deviation `sigma`."""
    if sigma < 0:
        raise AugmentError(f"jitter sigma must be >= 0, got {sigma}")
    noise = rng.normal(0.0, sigma, size=samples.shape)
    return (samples.astype(np.float64) + noise).astype(np.float32)


def channel_scaling(samples: np.ndarray, factors: np.ndarray) -> np.ndarray:
    """Multiply each channel by its own gain factor."""
    factors = np.asarray(factors, dtype=np.float64)
    if factors.shape != (samples.shape[1],):
        raise AugmentError(
            f"expected {samples.shape[1]} scale factors, got shape {factors.shape}"
        )
    return (samples.astype(np.float64) * factors).astype(np.float32)


def time_warp(samples: np.ndarray, crop_fraction: float, offset: int) -> np.ndarray:
    """Crop a contiguous fraction and linearly resample it to full length.

    The crop keeps ``round(crop_fraction * T)`` samples starting at `offset`;
    a full-length crop at offset 0 is the identity.
    """
    t_total = samples.shape[0]
    crop_len = int(round(crop_fraction * t_total))
    if crop_len < 2:
        raise WarpError(
            f"crop of {crop_len} samples (fraction {crop_fraction}) is too short to resample"
        )
    if crop_len > t_total:
        raise WarpError(f"crop of {crop_len} samples exceeds window length {t_total}")
    if not (0 <= offset <= t_total - crop_len):
        raise WarpError(f"crop offset {offset} out of range for length {crop_len}")
    crop = samples[offset : offset + crop_len].astype(np.float64)
    positions = np.linspace(0.0, crop_len - 1.0, t_total)
    out = np.empty_like(samples, dtype=np.float64)
    base = np.arange(crop_len, dtype=np.float64)
    for c in range(samples.shape[1]):
        out[:, c] = np.interp(positions, base, crop[:, c])
    return out.astype(np.float32)


def time_mask(samples: np.ndarray, fraction: float, start: int) -> np.ndarray:
    """Zero a contiguous span of ``round(fraction * T)`` samples on all channels."""
    t_total = samples.shape[0]
    mask_len = int(round(fraction * t_total))
    if mask_len == 0:
        return samples.astype(np.float32).copy()
    if not (0.0 <= fraction < 1.0):
        raise AugmentError(f"mask fraction {fraction} outside [0, 1)")
    if not (0 <= start <= t_total - mask_len):
        raise AugmentError(f"mask start {start} out of range for length {mask_len}")
    out = samples.astype(np.float32).copy()
    out[start : start + mask_len, :] = 0.0
    return out


def mixup(
    samples_a: np.ndarray,
    target_a: np.ndarray,
    samples_b: np.ndarray,
    target_b: np.ndarray,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Convex combination of two windows and their target distributions."""
    if not (0.0 <= lam <= 1.0):
        raise AugmentError(f"mixup weight {lam} outside [0, 1]")
    mixed = lam * samples_a.astype(np.float64) + (1.0 - lam) * samples_b.astype(np.float64)
    mixed_target = lam * target_a + (1.0 - lam) * target_b
    return mixed.astype(np.float32), mixed_target


# ---------------------------------------------------------------------------
# Set-level pipeline
# ---------------------------------------------------------------------------

_TRANSFORM_ORDER = ("jitter", "scale", "warp", "mask", "mixup")


def augment_window(
    window: Window,
    partner: Window,
    config: AugmentConfig,
    master_seed: int,
) -> Window:
    """Produce the compound augmented copy of one window.

    `partner` supplies the raw mixup counterpart; it is only consulted when
    the mixup coin fires.
    """
    prov = window.provenance()
    coins = derive_rng(master_seed, "augment", *prov, "coins").uniform(size=5)
    active = {
        name: coins[i] < getattr(config, f"p_{name}")
        for i, name in enumerate(_TRANSFORM_ORDER)
    }

    x = window.samples.astype(np.float32).copy()
    target = window.target.copy()

    if active["jitter"]:
        sigma = config.jitter_sigma_scale * float(np.std(window.samples))
        x = gaussian_jitter(x, sigma, derive_rng(master_seed, "augment", *prov, "jitter"))
    if active["scale"]:
        rng = derive_rng(master_seed, "augment", *prov, "scale")
        factors = rng.uniform(*config.scale_range, size=x.shape[1])
        x = channel_scaling(x, factors)
    if active["warp"]:
        rng = derive_rng(master_seed, "augment", *prov, "warp")
        crop_fraction = rng.uniform(*config.crop_range)
        crop_len = int(round(crop_fraction * x.shape[0]))
        offset = int(rng.integers(0, x.shape[0] - crop_len + 1))
        x = time_warp(x, crop_fraction, offset)
    if active["mask"]:
        rng = derive_rng(master_seed, "augment", *prov, "mask")
        fraction = rng.uniform(*config.mask_fraction_range)
        mask_len = int(round(fraction * x.shape[0]))
        start = int(rng.integers(0, x.shape[0] - mask_len + 1))
        x = time_mask(x, fraction, start)
    if active["mixup"]:
        rng = derive_rng(master_seed, "augment", *prov, "mixup")
        lam = float(rng.beta(config.mixup_alpha, config.mixup_alpha))
        x, target = mixup(x, target, partner.samples, partner.target, lam)

    return Window(
        samples=x,
        target=target,
        subject_id=window.subject_id,
        gesture=window.gesture,
        trial_index=window.trial_index,
        offset=window.offset,
        is_augmented=True,
    )


def augment_set(
    windows: list[Window], config: AugmentConfig, master_seed: int
) -> list[Window]:
    """One compound augmented copy per input window, in input order.

    The result is a pure function of (window provenances, config, seed):
    reordering the input list permutes the output identically but changes
    no sample values, because every draw is keyed by provenance and mixup
    partners are assigned over the provenance-sorted set.
    """
    config.validate()
    if config.p_mixup > 0.0 and len(windows) < 2:
        raise AugmentError("mixup requires at least two windows in the set")

    order = sorted(range(len(windows)), key=lambda i: windows[i].provenance())
    rank_of = {idx: rank for rank, idx in enumerate(order)}
    perm = derive_rng(master_seed, "augment", "pairing").permutation(len(order))

    copies: list[Window] = []
    for idx, window in enumerate(windows):
        rank = rank_of[idx]
        partner_rank = int(perm[rank])
        if partner_rank == rank:
            partner_rank = (rank + 1) % len(order)
        partner = windows[order[partner_rank]] if windows else window
        copies.append(augment_window(window, partner, config, master_seed))
    return copies


def doubled_training_set(
    windows: list[Window], config: AugmentConfig, master_seed: int
) -> list[Window]:
    """Originals followed by their augmented copies (2x cardinality)."""
    return list(windows) + augment_set(windows, config, master_seed)
