"""Periodic two-phase RVE generation.

Latin-hypercube sampling of the (N_p, A_r, v_f) descriptor space,
random sequential adsorption of elliptical fibers (or fixed-radius
circles) on the periodic unit square, and rasterization to binary
grayscale images (matrix = 0, inclusion = 255).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .manifest import DatasetManifest, ManifestRecord
from .imageio import write_pgm

# Descriptor ranges for the short-fiber family.
FIBER_N_PARTICLES = (15, 35)
FIBER_ASPECT_RATIO = (1.0, 4.0)
FIBER_VOLUME_FRACTION = (0.10, 0.40)

# Circular family: fixed radius (domain-edge units) is a config value,
# volume fraction sampled uniformly over the same range.
DEFAULT_CIRCLE_RADIUS = 0.04

_N_BOUNDARY_SAMPLES = 64
_FULL_RETRIES = 8


class PlacementError(RuntimeError):
    """RSA could not place all inclusions within the attempt budget."""

    def __init__(self, descriptor, attempts: int):
        super().__init__(
            f"placement failed after {attempts} attempts for descriptor {descriptor}"
        )
        self.descriptor = descriptor
        self.attempts = attempts


@dataclass(frozen=True)
class DescriptorPoint:
    n_particles: int
    aspect_ratio: float
    volume_fraction: float

    def __post_init__(self):
        if not 0.0 < self.volume_fraction < 1.0:
            raise ValueError(f"volume fraction {self.volume_fraction} outside (0, 1)")
        if self.n_particles < 1:
            raise ValueError("need at least one particle")
        if self.aspect_ratio < 1.0:
            raise ValueError("aspect ratio must be >= 1")


@dataclass(frozen=True)
class Ellipse:
    """Inclusion on the periodic unit square; circles have a == b."""

    cx: float
    cy: float
    a: float
    b: float
    theta: float

    @property
    def area(self) -> float:
        return math.pi * self.a * self.b


@dataclass
class Rve:
    inclusions: list[Ellipse] = field(default_factory=list)


def lhs_sample(n: int, ranges: list[tuple[float, float]], seed: int) -> np.ndarray:
    """Latin hypercube: one point per equal-width stratum in each dimension.

    Returns an (n, len(ranges)) array.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    out = np.empty((n, len(ranges)))
    for j, (lo, hi) in enumerate(ranges):
        if not hi > lo:
            raise ValueError(f"degenerate range ({lo}, {hi})")
        strata = rng.permutation(n)
        offsets = rng.uniform(0.0, 1.0, size=n)
        out[:, j] = lo + (strata + offsets) * (hi - lo) / n
    return out


def sample_fiber_descriptors(n: int, seed: int) -> list[DescriptorPoint]:
    """LHS over the short-fiber descriptor box; N_p rounded after sampling."""
    pts = lhs_sample(n, [FIBER_N_PARTICLES, FIBER_ASPECT_RATIO, FIBER_VOLUME_FRACTION], seed)
    return [
        DescriptorPoint(
            n_particles=int(round(p[0])),
            aspect_ratio=float(p[1]),
            volume_fraction=float(p[2]),
        )
        for p in pts
    ]


def size_fibers(d: DescriptorPoint) -> tuple[float, float]:
    """Semi-axes giving each fiber area v_f / N_p at the given aspect ratio."""
    a = math.sqrt(d.volume_fraction * d.aspect_ratio / (math.pi * d.n_particles))
    return a, a / d.aspect_ratio


# -- geometry -----------------------------------------------------------


def _min_image(d: np.ndarray) -> np.ndarray:
    return d - np.round(d)


def _boundary_points(e: Ellipse, n: int = _N_BOUNDARY_SAMPLES) -> np.ndarray:
    t = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    x = e.a * np.cos(t)
    y = e.b * np.sin(t)
    ct, st = math.cos(e.theta), math.sin(e.theta)
    return np.column_stack([e.cx + ct * x - st * y, e.cy + st * x + ct * y])


def _points_inside(points: np.ndarray, e: Ellipse) -> np.ndarray:
    """Periodic (minimum-image) point-in-ellipse test for an (n, 2) array."""
    d = _min_image(points - np.array([e.cx, e.cy]))
    ct, st = math.cos(e.theta), math.sin(e.theta)
    u = ct * d[:, 0] + st * d[:, 1]
    v = -st * d[:, 0] + ct * d[:, 1]
    return (u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0


def ellipses_overlap(e1: Ellipse, e2: Ellipse) -> bool:
    """Conservative periodic overlap test.

    Bounding-circle rejection, then dense boundary sampling checked in
    both directions plus mutual center containment. Conservative only in
    the sense that the boundary sampling is finite; at 64 samples and
    the fiber sizes used here it never admits an overlap.
    """
    d = _min_image(np.array([e2.cx - e1.cx, e2.cy - e1.cy]))
    if float(np.hypot(d[0], d[1])) > e1.a + e2.a:
        return False
    if _points_inside(np.array([[e2.cx, e2.cy]]), e1)[0]:
        return True
    if _points_inside(np.array([[e1.cx, e1.cy]]), e2)[0]:
        return True
    if bool(np.any(_points_inside(_boundary_points(e1), e2))):
        return True
    return bool(np.any(_points_inside(_boundary_points(e2), e1)))


def _rsa(rng: np.random.Generator, count: int, a: float, b: float,
         max_attempts: int, descriptor) -> Rve:
    placed: list[Ellipse] = []
    centers = np.empty((0, 2))
    total_attempts = 0
    for _ in range(count):
        for attempt in range(max_attempts):
            total_attempts += 1
            cx, cy = rng.uniform(0.0, 1.0, size=2)
            theta = rng.uniform(0.0, math.pi) if a != b else 0.0
            cand = Ellipse(cx, cy, a, b, theta)
            if len(placed):
                d = _min_image(centers - np.array([cx, cy]))
                near = np.hypot(d[:, 0], d[:, 1]) <= 2.0 * a
                if any(ellipses_overlap(cand, placed[i]) for i in np.nonzero(near)[0]):
                    continue
            placed.append(cand)
            centers = np.vstack([centers, [cx, cy]])
            break
        else:
            raise PlacementError(descriptor, total_attempts)
    return Rve(inclusions=placed)


def rsa_place(d: DescriptorPoint, seed: int, max_attempts: int = 20_000) -> Rve:
    """Place N_p equal-area elliptical fibers with random centers/orientations."""
    a, b = size_fibers(d)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    return _rsa(rng, d.n_particles, a, b, max_attempts, d)


def rsa_place_circles(v_f: float, radius: float = DEFAULT_CIRCLE_RADIUS,
                      seed: int = 0, max_attempts: int = 20_000) -> Rve:
    """Fixed-radius circles; count chosen so the analytic fraction rounds to v_f."""
    if not 0.0 < v_f < 1.0:
        raise ValueError(f"v_f {v_f} outside (0, 1)")
    circle_area = math.pi * radius * radius
    count = max(1, int(round(v_f / circle_area)))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    return _rsa(rng, count, radius, radius, max_attempts, ("circles", v_f, radius))


def place_with_retries(place, seed_key: list[int], max_attempts: int) -> tuple[Rve, int]:
    """Full-RVE reseed-and-retry wrapper around an RSA placement call.

    ``place(seed)`` is invoked with seeds derived from ``seed_key`` plus
    a retry counter; returns (rve, retries_used).
    """
    last: PlacementError | None = None
    for retry in range(_FULL_RETRIES + 1):
        seed = np.random.SeedSequence(seed_key + [retry]).generate_state(1)[0]
        try:
            return place(int(seed)), retry
        except PlacementError as exc:
            last = exc
    raise last


# -- rasterization ------------------------------------------------------


def rasterize(rve: Rve, resolution: int) -> np.ndarray:
    """Binary grayscale image; a pixel is 255 iff its center lies in an inclusion."""
    if resolution < 16:
        raise ValueError("resolution must be >= 16")
    coords = (np.arange(resolution) + 0.5) / resolution
    xx, yy = np.meshgrid(coords, coords)  # row index = y
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    inside = np.zeros(resolution * resolution, dtype=bool)
    for e in rve.inclusions:
        inside |= _points_inside(pts, e)
    img = np.zeros((resolution, resolution), dtype=np.uint8)
    img.ravel()[inside] = 255
    return img


def inclusion_fraction(image: np.ndarray) -> float:
    return float(np.mean(image >= 128))


# -- dataset generation -------------------------------------------------


@dataclass
class GenerationStats:
    retries: int = 0
    records: int = 0


def generate_dataset(kind: str, n: int, resolution: int, seed: int, out_dir,
                     circle_radius: float = DEFAULT_CIRCLE_RADIUS,
                     max_attempts: int = 20_000) -> tuple[DatasetManifest, GenerationStats]:
    """Generate ``n`` RVE images plus a JSON-Lines manifest.

    Short-fiber descriptors come from a single LHS draw keyed by the
    base seed; each record's placement is keyed by (seed, index, retry)
    so generation order does not matter.
    """
    if kind not in ("fiber", "circle"):
        raise ValueError(f"unknown dataset kind {kind!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = GenerationStats()
    records: list[ManifestRecord] = []

    if kind == "fiber":
        descriptors = sample_fiber_descriptors(n, seed)
    else:
        vf_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))
        fractions = vf_rng.uniform(*FIBER_VOLUME_FRACTION, size=n)
        descriptors = [
            DescriptorPoint(
                n_particles=max(1, int(round(v / (math.pi * circle_radius ** 2)))),
                aspect_ratio=1.0,
                volume_fraction=float(v),
            )
            for v in fractions
        ]

    for i, d in enumerate(descriptors):
        if kind == "fiber":
            rve, retries = place_with_retries(
                lambda s: rsa_place(d, s, max_attempts), [seed, i], max_attempts)
        else:
            rve, retries = place_with_retries(
                lambda s: rsa_place_circles(d.volume_fraction, circle_radius, s, max_attempts),
                [seed, i], max_attempts)
        stats.retries += retries
        image = rasterize(rve, resolution)
        name = f"{kind}_{i:06d}.pgm"
        write_pgm(out_dir / name, image)
        records.append(ManifestRecord(
            id=f"{kind}-{i:06d}",
            path=name,
            n_particles=d.n_particles,
            aspect_ratio=d.aspect_ratio,
            volume_fraction=d.volume_fraction,
        ))
        stats.records += 1

    manifest = DatasetManifest(records=records, root=out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest, stats
