"""Homogenized plane-strain stiffness of rasterized two-phase RVEs.

Primary path: matrix-free FFT-preconditioned Richardson iteration on
the periodic unit cell, one bilinear-quad element per pixel, with the
preconditioner built from the exact Fourier symbol of a phase-average
reference medium. A dense periodic bilinear-quad FEM assembles and
solves the same three cell problems directly for small grids and
doubles as the independent oracle. Units are GPa throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .manifest import DatasetManifest, ManifestRecord, with_labels
from .imageio import read_pgm

# Phase constants used for every label in this project.
MATRIX = None  # set below once Material is defined
INCLUSION = None

_PHASE_THRESHOLD = 128


class ConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"no equilibrium after {iterations} iterations (residual {residual:.3e})")
        self.residual = residual
        self.iterations = iterations


class ConsistencyError(RuntimeError):
    """Solved stiffness violates the Voigt-Reuss bounds beyond tolerance."""


@dataclass(frozen=True)
class Material:
    young_modulus: float  # GPa
    poisson_ratio: float

    def __post_init__(self):
        if self.young_modulus <= 0:
            raise ValueError("Young's modulus must be positive")
        if not -1.0 < self.poisson_ratio < 0.5:
            raise ValueError("Poisson's ratio must lie in (-1, 0.5)")

    def lame(self, plane_strain: bool = True) -> tuple[float, float]:
        e, nu = self.young_modulus, self.poisson_ratio
        mu = e / (2.0 * (1.0 + nu))
        lam = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
        if not plane_strain:
            lam = 2.0 * lam * mu / (lam + 2.0 * mu)
        return lam, mu


@dataclass(frozen=True)
class StiffnessTensor2D:
    """3x3 stiffness in Voigt order (11, 22, 12), engineering shear."""

    matrix: tuple  # nested tuples; kept hashable/immutable

    @classmethod
    def from_array(cls, m: np.ndarray) -> "StiffnessTensor2D":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"expected a 3x3 matrix, got {m.shape}")
        return cls(tuple(tuple(float(x) for x in row) for row in m))

    def as_array(self) -> np.ndarray:
        return np.array(self.matrix)

    @property
    def c1111(self) -> float:
        return self.matrix[0][0]

    @property
    def c2222(self) -> float:
        return self.matrix[1][1]

    @property
    def c1212(self) -> float:
        return self.matrix[2][2]

    @property
    def c1122(self) -> float:
        return self.matrix[0][1]

    def is_positive_definite(self) -> bool:
        return bool(np.all(np.linalg.eigvalsh(self.as_array()) > 0))


@dataclass(frozen=True)
class SolverConfig:
    scheme: str = "spectral"  # or "fem"
    tolerance: float = 1e-8
    max_iterations: int = 10_000
    plane_strain: bool = True

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.scheme not in ("spectral", "fem"):
            raise ValueError(f"unknown scheme {self.scheme!r}")


def phase_stiffness(m: Material, plane_strain: bool = True) -> StiffnessTensor2D:
    lam, mu = m.lame(plane_strain)
    c = np.array([
        [lam + 2.0 * mu, lam, 0.0],
        [lam, lam + 2.0 * mu, 0.0],
        [0.0, 0.0, mu],
    ])
    return StiffnessTensor2D.from_array(c)


def mixture_bounds(v_f: float, matrix: Material, inclusion: Material,
                   plane_strain: bool = True) -> tuple[StiffnessTensor2D, StiffnessTensor2D]:
    """(Reuss, Voigt) bounds: compliance average and stiffness average."""
    if not 0.0 <= v_f <= 1.0:
        raise ValueError("v_f must lie in [0, 1]")
    cm = phase_stiffness(matrix, plane_strain).as_array()
    ci = phase_stiffness(inclusion, plane_strain).as_array()
    voigt = (1.0 - v_f) * cm + v_f * ci
    reuss = np.linalg.inv((1.0 - v_f) * np.linalg.inv(cm) + v_f * np.linalg.inv(ci))
    return StiffnessTensor2D.from_array(reuss), StiffnessTensor2D.from_array(voigt)


def phase_map_from_image(image: np.ndarray) -> np.ndarray:
    """Threshold a grayscale image at 128 into {0 matrix, 1 inclusion}."""
    return (np.asarray(image) >= _PHASE_THRESHOLD).astype(np.int8)


def resample_phase(pm: np.ndarray, resolution: int) -> np.ndarray:
    """Nearest-neighbor resampling of a phase map."""
    n = pm.shape[0]
    if n == resolution:
        return pm
    idx = (np.arange(resolution) * n) // resolution
    return pm[np.ix_(idx, idx)]


# -- spectral solver ----------------------------------------------------

# The three imposed macroscopic strains (tensor components e11, e22, e12):
# unit axial strains and a unit *engineering* shear (e12 = 1/2).
_MACRO_STRAINS = (
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 0.5),
)


# Element node slots in pixel offsets (dx, dy), counterclockwise.
_NODE_OFFSETS = ((0, 0), (1, 0), (1, 1), (0, 1))


def _gauss_b_matrices(h: float) -> np.ndarray:
    """Strain-displacement matrices (4, 3, 8) at the 2x2 Gauss points."""
    g = 1.0 / math.sqrt(3.0)
    signs = ((-1, -1), (1, -1), (1, 1), (-1, 1))
    bs = np.zeros((4, 3, 8))
    for p, (gx, gy) in enumerate(((-g, -g), (g, -g), (g, g), (-g, g))):
        for a, (sx, sy) in enumerate(signs):
            dn_dx = sx * (1.0 + sy * gy) / 4.0 * (2.0 / h)
            dn_dy = sy * (1.0 + sx * gx) / 4.0 * (2.0 / h)
            bs[p, 0, 2 * a] = dn_dx
            bs[p, 1, 2 * a + 1] = dn_dy
            bs[p, 2, 2 * a] = dn_dy
            bs[p, 2, 2 * a + 1] = dn_dx
    return bs


def _reference_symbol_inverse(ke0: np.ndarray, n: int) -> np.ndarray:
    """Inverse Fourier symbol (n, n, 2, 2) of the periodic reference operator.

    The operator assembled from one element stiffness repeated over the grid
    is a convolution in the node displacements; its symbol is a Hermitian
    2x2 matrix per frequency.  The zero frequency (rigid translations) is
    projected out.
    """
    alpha = 2.0 * math.pi * np.fft.fftfreq(n)
    a1, a2 = np.meshgrid(alpha, alpha, indexing="xy")  # a1 varies along columns
    sym = np.zeros((n, n, 2, 2), dtype=complex)
    for a, (ax, ay) in enumerate(_NODE_OFFSETS):
        for b, (bx, by) in enumerate(_NODE_OFFSETS):
            phase = np.exp(1j * (a1 * (bx - ax) + a2 * (by - ay)))
            sym += phase[:, :, None, None] * ke0[2 * a:2 * a + 2, 2 * b:2 * b + 2]
    det = sym[..., 0, 0] * sym[..., 1, 1] - sym[..., 0, 1] * sym[..., 1, 0]
    det[0, 0] = 1.0
    inv = np.empty_like(sym)
    inv[..., 0, 0] = sym[..., 1, 1] / det
    inv[..., 1, 1] = sym[..., 0, 0] / det
    inv[..., 0, 1] = -sym[..., 0, 1] / det
    inv[..., 1, 0] = -sym[..., 1, 0] / det
    inv[0, 0] = 0.0
    return inv


def _solve_spectral_case(c_map, bs, detw, kinv, macro_voigt, cfg):
    """One macroscopic-strain cell problem; returns the mean stress (Voigt)."""
    n = c_map.shape[0]
    npix = n * n
    h = 1.0 / n
    u = np.zeros((n, n, 2))

    residual = math.inf
    for _ in range(cfg.max_iterations):
        # element displacement vectors (n, n, 8) gathered from the node grid
        ue = np.empty((n, n, 8))
        for a, (dx, dy) in enumerate(_NODE_OFFSETS):
            ue[:, :, 2 * a:2 * a + 2] = np.roll(u, (-dy, -dx), axis=(0, 1))

        # strain and stress at each Gauss point (n, n, 4, 3)
        eps = np.einsum("gce,ije->ijgc", bs, ue) + macro_voigt
        sig = np.einsum("ijcd,ijgd->ijgc", c_map, eps)

        # internal nodal forces: the discrete divergence of the stress field
        fel = np.einsum("gce,ijgc->ije", bs, sig) * detw
        force = np.zeros((n, n, 2))
        for a, (dx, dy) in enumerate(_NODE_OFFSETS):
            force += np.roll(fel[:, :, 2 * a:2 * a + 2], (dy, dx), axis=(0, 1))

        fh = np.fft.fft2(force, axes=(0, 1))
        sbar = sig.mean(axis=(0, 1, 2))
        mean_mag = math.hypot(sbar[0], sbar[1], math.sqrt(2.0) * sbar[2])
        residual = math.sqrt(float(np.sum(np.abs(fh) ** 2))) / npix / h / max(
            mean_mag, 1e-30
        )
        if residual < cfg.tolerance:
            return sbar

        # preconditioned correction: u <- u - K0^{-1} f, per frequency
        du = np.einsum("ijcd,ijd->ijc", kinv, fh)
        u = u - np.real(np.fft.ifft2(du, axes=(0, 1)))
    raise ConvergenceError(residual, cfg.max_iterations)


def _check_bounds(c: np.ndarray, v_f: float, matrix: Material, inclusion: Material,
                  plane_strain: bool) -> None:
    reuss, voigt = mixture_bounds(v_f, matrix, inclusion, plane_strain)
    r, v = reuss.as_array(), voigt.as_array()
    for i in range(3):
        lo, hi = r[i, i], v[i, i]
        if c[i, i] < lo * (1.0 - 1e-3) or c[i, i] > hi * (1.0 + 1e-3):
            raise ConsistencyError(
                f"component ({i},{i}) = {c[i, i]:.6g} outside Voigt-Reuss "
                f"interval [{lo:.6g}, {hi:.6g}]"
            )


def effective_stiffness(pm: np.ndarray, matrix: Material, inclusion: Material,
                        cfg: SolverConfig = SolverConfig()) -> StiffnessTensor2D:
    """Effective stiffness of a phase map under periodic boundary conditions."""
    pm = np.asarray(pm)
    if pm.ndim != 2 or pm.shape[0] != pm.shape[1] or pm.shape[0] < 16:
        raise ValueError(f"phase map must be square and at least 16x16, got {pm.shape}")
    if cfg.scheme == "fem":
        raw = _effective_stiffness_fem_raw(pm, matrix, inclusion, cfg.plane_strain)
    else:
        raw = _effective_stiffness_spectral_raw(pm, matrix, inclusion, cfg)
    c = 0.5 * (raw + raw.T)
    v_f = float(np.mean(pm == 1))
    _check_bounds(c, v_f, matrix, inclusion, cfg.plane_strain)
    return StiffnessTensor2D.from_array(c)


def _effective_stiffness_spectral_raw(pm, matrix, inclusion, cfg):
    n = pm.shape[0]
    h = 1.0 / n
    cm = phase_stiffness(matrix, cfg.plane_strain).as_array()
    ci = phase_stiffness(inclusion, cfg.plane_strain).as_array()
    c_map = np.where((pm == 1)[:, :, None, None], ci, cm)
    # reference medium: mean of the two phase stiffnesses, which keeps the
    # fixed-point iteration contractive for any phase arrangement
    ke0, _ = _element_matrices(0.5 * (cm + ci), h)
    kinv = _reference_symbol_inverse(ke0, n)
    bs = _gauss_b_matrices(h)
    detw = (h / 2.0) ** 2
    cols = []
    for macro in _MACRO_STRAINS:
        voigt = np.array([macro[0], macro[1], 2.0 * macro[2]])
        cols.append(_solve_spectral_case(c_map, bs, detw, kinv, voigt, cfg))
    return np.array(cols).T


# -- dense periodic FEM (oracle / small-grid fallback) ------------------


def _element_matrices(c_voigt: np.ndarray, h: float):
    """Bilinear quad stiffness (8x8) and macro-strain load coupling (8x3)."""
    gauss = (-1.0 / math.sqrt(3.0), 1.0 / math.sqrt(3.0))
    ke = np.zeros((8, 8))
    fe = np.zeros((8, 3))
    # nodes counterclockwise: (0,0), (h,0), (h,h), (0,h) in (x, y)
    signs = ((-1, -1), (1, -1), (1, 1), (-1, 1))
    for gx in gauss:
        for gy in gauss:
            b = np.zeros((3, 8))
            for a, (sx, sy) in enumerate(signs):
                dn_dx = sx * (1.0 + sy * gy) / 4.0 * (2.0 / h)
                dn_dy = sy * (1.0 + sx * gx) / 4.0 * (2.0 / h)
                b[0, 2 * a] = dn_dx
                b[1, 2 * a + 1] = dn_dy
                b[2, 2 * a] = dn_dy
                b[2, 2 * a + 1] = dn_dx
            detw = (h / 2.0) ** 2
            ke += b.T @ c_voigt @ b * detw
            fe += b.T @ c_voigt * detw
    return ke, fe


def _effective_stiffness_fem_raw(pm, matrix, inclusion, plane_strain):
    n = pm.shape[0]
    h = 1.0 / n
    cm = phase_stiffness(matrix, plane_strain).as_array()
    ci = phase_stiffness(inclusion, plane_strain).as_array()
    ke = {0: _element_matrices(cm, h), 1: _element_matrices(ci, h)}

    # periodic node grid: node (i, j) -> i * n + j, wrapped
    node = lambda i, j: (i % n) * n + (j % n)
    ndof = 2 * n * n

    rows, cols, vals = [], [], []
    f = np.zeros((ndof, 3))
    for i in range(n):
        for j in range(n):
            phase = int(pm[i, j])
            kmat, fmat = ke[phase]
            nodes = (node(i, j), node(i, j + 1), node(i + 1, j + 1), node(i + 1, j))
            dofs = np.array([d for nn in nodes for d in (2 * nn, 2 * nn + 1)])
            rows.extend(np.repeat(dofs, 8))
            cols.extend(np.tile(dofs, 8))
            vals.extend(kmat.ravel())
            f[dofs] -= fmat
    k = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(ndof, ndof))

    # pin node 0 to remove the translation nullspace
    pinned = np.array([0, 1])
    keep = np.setdiff1d(np.arange(ndof), pinned)
    k_red = k[keep][:, keep]
    u = np.zeros((ndof, 3))
    solve = scipy.sparse.linalg.factorized(k_red.tocsc())
    for case in range(3):
        u[keep, case] = solve(f[keep, case])

    # volume-averaged stress per macro-strain case (unit Voigt strains)
    macro = np.eye(3)
    sbar = np.zeros((3, 3))
    gauss = (-1.0 / math.sqrt(3.0), 1.0 / math.sqrt(3.0))
    signs = ((-1, -1), (1, -1), (1, 1), (-1, 1))
    bs = []
    for gx in gauss:
        for gy in gauss:
            b = np.zeros((3, 8))
            for a, (sx, sy) in enumerate(signs):
                dn_dx = sx * (1.0 + sy * gy) / 4.0 * (2.0 / h)
                dn_dy = sy * (1.0 + sx * gx) / 4.0 * (2.0 / h)
                b[0, 2 * a] = dn_dx
                b[1, 2 * a + 1] = dn_dy
                b[2, 2 * a] = dn_dy
                b[2, 2 * a + 1] = dn_dx
            bs.append(b)
    bmean = sum(bs) / len(bs)
    for i in range(n):
        for j in range(n):
            c = ci if pm[i, j] == 1 else cm
            nodes = (node(i, j), node(i, j + 1), node(i + 1, j + 1), node(i + 1, j))
            dofs = np.array([d for nn in nodes for d in (2 * nn, 2 * nn + 1)])
            for case in range(3):
                strain = macro[:, case] + bmean @ u[dofs, case]
                sbar[:, case] += c @ strain
    return sbar / (n * n)


# -- dataset labeling ---------------------------------------------------


@dataclass
class LabelingReport:
    labeled: int = 0
    failed_ids: list[str] = field(default_factory=list)


def label_dataset(manifest: DatasetManifest, matrix: Material, inclusion: Material,
                  cfg: SolverConfig = SolverConfig(),
                  resolution: int | None = None) -> tuple[DatasetManifest, LabelingReport]:
    """Attach the three stiffness components (GPa) to every manifest record.

    Solver failures are recorded per id and the run continues.
    """
    report = LabelingReport()
    out: list[ManifestRecord] = []
    for record in manifest.records:
        image = read_pgm(manifest.resolve(record))
        pm = phase_map_from_image(image)
        if resolution is not None:
            pm = resample_phase(pm, resolution)
        try:
            c = effective_stiffness(pm, matrix, inclusion, cfg)
        except (ConvergenceError, ConsistencyError):
            report.failed_ids.append(record.id)
            out.append(record)
            continue
        out.append(with_labels(record, c.c1111, c.c2222, c.c1212))
        report.labeled += 1
    return DatasetManifest(records=out, root=manifest.root), report


MATRIX = Material(100.0, 0.30)
INCLUSION = Material(500.0, 0.19)
