"""Seeded synthetic slide generator.

Slides are near-white rasters with stained elliptical blobs. Texture is
class-dependent along three monotone axes, loosely mimicking how nucleus
density grows with grade on real stains:

* stained-pixel coverage rises with the grade (so does the slide-level
  blue-ratio statistic);
* the stain shifts from eosin-like pink toward hematoxylin-like violet;
* blobs shrink while their count grows, so higher grades look speckled at
  patch scale while lower grades show large solid regions. Cell-mean color
  statistics barely see this axis; patch-level features do.

All randomness comes from numpy's PCG64 generator seeded with the spec's
64-bit seed, drawn in a fixed order, so identical specs regenerate
bit-identical images on any platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .validation import ContractError, require

# Stain endpoints: eosin-like pink for the lowest grade, hematoxylin-like
# blue-violet for the highest.
_STAIN_LIGHT = np.array([205.0, 130.0, 170.0])
_STAIN_DARK = np.array([95.0, 60.0, 155.0])

# Grade-0 blob radius range; each grade shrinks radii by _RADIUS_SHRINK
# while the blob count grows to hold the coverage trend. Blob size is the
# dominant class cue and lives below the patch scale.
_BASE_RADIUS = (13.0, 24.0)
_RADIUS_SHRINK = 0.54
_COVERAGE_BASE = 0.30
_COVERAGE_STEP = 0.08

# Blobs are ellipses with the minor axis squashed by U(0.6, 1.0).
_MEAN_SQUASH = 0.8


@dataclass(frozen=True)
class SyntheticSlideSpec:
    """Everything needed to regenerate one slide bit-for-bit.

    Texture fields hold the values for this slide's class; use
    ``class_texture`` for the per-class defaults.
    """

    class_id: int
    n_classes: int = 3
    width: int = 192
    height: int = 192
    background: tuple[int, int, int] = (246, 244, 247)
    blob_density: float | None = None                 # blobs per pixel
    blob_radius: tuple[float, float] | None = None
    stain_color: tuple[float, float, float] | None = None
    color_jitter: float = 12.0
    noise_amplitude: int = 5
    seed: int = 0

    def resolved(self) -> "SyntheticSlideSpec":
        """Fill class-dependent texture defaults for unset fields."""
        texture = class_texture(self.class_id, self.n_classes)
        updates = {}
        for name in ("blob_density", "blob_radius", "stain_color"):
            if getattr(self, name) is None:
                updates[name] = texture[name]
        if not updates:
            return self
        from dataclasses import replace

        return replace(self, **updates)


def class_stain_color(class_id: int, n_classes: int) -> tuple[float, float, float]:
    """Class stain mean, interpolated pink -> blue-violet by grade."""
    f = 0.0 if n_classes <= 1 else class_id / (n_classes - 1)
    return tuple((1.0 - f) * _STAIN_LIGHT + f * _STAIN_DARK)


def class_texture(class_id: int, n_classes: int) -> dict:
    """Per-class texture defaults: density, radius range and stain color.

    Coverage targets grow linearly with the grade while blob radii shrink
    geometrically; the density follows from the Poisson coverage identity
    coverage = 1 - exp(-density * mean_blob_area).
    """
    require(0 <= class_id < max(n_classes, 1), "class_id out of range")
    coverage = _COVERAGE_BASE + _COVERAGE_STEP * class_id
    require(coverage < 1.0, "coverage target must stay below 1")
    shrink = _RADIUS_SHRINK**class_id
    lo, hi = _BASE_RADIUS[0] * shrink, _BASE_RADIUS[1] * shrink
    mean_sq_radius = (lo * lo + lo * hi + hi * hi) / 3.0
    mean_area = math.pi * mean_sq_radius * _MEAN_SQUASH
    density = -math.log(1.0 - coverage) / mean_area
    return {
        "blob_density": density,
        "blob_radius": (lo, hi),
        "stain_color": class_stain_color(class_id, n_classes),
    }


def generate_synthetic_slide(spec: SyntheticSlideSpec) -> tuple[np.ndarray, int]:
    """Render the slide for ``spec``; returns (image, class label)."""
    require(spec.width >= 1 and spec.height >= 1, "slide must have positive area")
    require(0 <= spec.class_id < spec.n_classes, "class_id out of range")
    spec = spec.resolved()
    lo, hi = spec.blob_radius
    require(0 < lo <= hi, "blob radius range must satisfy 0 < lo <= hi")

    rng = np.random.Generator(np.random.PCG64(spec.seed))
    h, w = spec.height, spec.width
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = np.asarray(spec.background, dtype=np.float64)

    stain = np.asarray(spec.stain_color, dtype=np.float64)

    # At least a few blobs even in unlucky draws, so no slide is blank.
    n_blobs = max(4, int(rng.poisson(spec.blob_density * w * h)))
    ys, xs = np.mgrid[0:h, 0:w]
    for _ in range(n_blobs):
        cx = rng.uniform(0, w)
        cy = rng.uniform(0, h)
        radius = rng.uniform(lo, hi)
        squash = rng.uniform(0.6, 1.0)
        color = stain + rng.uniform(-spec.color_jitter, spec.color_jitter, size=3)
        inside = ((xs - cx) / radius) ** 2 + ((ys - cy) / (radius * squash)) ** 2 <= 1.0
        img[inside] = color

    if spec.noise_amplitude > 0:
        amp = int(spec.noise_amplitude)
        img += rng.integers(-amp, amp + 1, size=img.shape)
    label = spec.class_id
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), label


@dataclass(frozen=True)
class CorpusSpec:
    """A labeled corpus of synthetic slides with a train/val split."""

    n_slides: int = 150
    n_classes: int = 3
    width: int = 192
    height: int = 192
    val_fraction: float = 0.2
    seed: int = 0
    slide: dict = field(default_factory=dict)  # overrides for SyntheticSlideSpec


def corpus_slide_specs(corpus: CorpusSpec) -> list[SyntheticSlideSpec]:
    """Per-slide specs: labels round-robin over classes, per-slide seeds
    derived from (corpus seed, slide index) via SeedSequence."""
    require(corpus.n_slides >= 1, "corpus must contain at least one slide")
    require(corpus.n_classes >= 2, "corpus needs at least two classes")
    specs = []
    for i in range(corpus.n_slides):
        entropy = np.random.SeedSequence(
            entropy=int(corpus.seed), spawn_key=(0, i)
        ).generate_state(1)[0]
        specs.append(
            SyntheticSlideSpec(
                class_id=i % corpus.n_classes,
                n_classes=corpus.n_classes,
                width=corpus.width,
                height=corpus.height,
                seed=int(entropy),
                **corpus.slide,
            ).resolved()
        )
    return specs


def corpus_split(corpus: CorpusSpec) -> list[str]:
    """Stratified train/val tags aligned with ``corpus_slide_specs`` order."""
    specs = corpus_slide_specs(corpus)
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=int(corpus.seed), spawn_key=(1,)))
    )
    tags = ["train"] * len(specs)
    for c in range(corpus.n_classes):
        members = [i for i, s in enumerate(specs) if s.class_id == c]
        n_val = int(round(len(members) * corpus.val_fraction))
        chosen = rng.permutation(len(members))[:n_val]
        for j in chosen:
            tags[members[j]] = "val"
    return tags
