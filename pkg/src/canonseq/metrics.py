"""Set-level generative metrics: MMD, COV, 1-NNA and TMD.

Every cloud is normalized to the unit sphere before measuring unless
``normalize=False``. Nearest-neighbor ties always go to the lower index,
so reports are deterministic.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError
from .geometry import EXACT_EMD_LIMIT, chamfer_distance, emd
from .pcio import normalize_unit_sphere

logger = logging.getLogger(__name__)

DISTANCES = ("CD", "EMD")


def _prepare(clouds, normalize):
    clouds = [np.asarray(c, dtype=np.float64) for c in clouds]
    return [normalize_unit_sphere(c) for c in clouds] if normalize else clouds


def _pair_fn(dist, emd_mode):
    if dist == "CD":
        return chamfer_distance
    if dist == "EMD":
        return lambda a, b: emd(a, b, emd_mode)
    raise ValueError(f"unknown distance {dist!r}; choose from {DISTANCES}")


def emd_mode_for(clouds, requested="auto"):
    if requested != "auto":
        return requested
    n = max(len(c) for c in clouds)
    mode = "exact" if n <= EXACT_EMD_LIMIT else "approximate"
    if mode == "approximate":
        logger.info("metrics: clouds have %d points; EMD uses the auction solver", n)
    return mode


def distance_matrix(a, b, dist="CD", emd_mode="exact", symmetric=False) -> np.ndarray:
    """``D[i, j] = dist(a[i], b[j])`` over already prepared clouds."""
    fn = _pair_fn(dist, emd_mode)
    D = np.zeros((len(a), len(b)))
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            if symmetric and j < i:
                D[i, j] = D[j, i]
            elif symmetric and j == i:
                D[i, j] = 0.0
            else:
                D[i, j] = fn(x, y)
    return D


def _check_nonempty(gen, ref):
    if len(gen) == 0 or len(ref) == 0:
        raise DomainError("generated and reference sets must be non-empty")


def mmd_from_matrix(D_gen_ref) -> float:
    return float(D_gen_ref.min(axis=0).mean())


def cov_from_matrix(D_gen_ref) -> float:
    matched = np.unique(np.argmin(D_gen_ref, axis=1))
    return len(matched) / D_gen_ref.shape[1]


def one_nna_from_matrices(D_gg, D_rr, D_gr) -> float:
    n_g, n_r = D_gr.shape
    full = np.block([[D_gg, D_gr], [D_gr.T, D_rr]])
    np.fill_diagonal(full, np.inf)
    labels = np.r_[np.zeros(n_g, bool), np.ones(n_r, bool)]
    nearest = np.argmin(full, axis=1)
    return float(np.mean(labels[nearest] == labels))


def mmd(gen, ref, dist="CD", normalize=True, emd_mode="auto") -> float:
    """Mean over reference clouds of the distance to the closest generated cloud."""
    _check_nonempty(gen, ref)
    g, r = _prepare(gen, normalize), _prepare(ref, normalize)
    return mmd_from_matrix(distance_matrix(g, r, dist, emd_mode_for(g + r, emd_mode)))


def cov(gen, ref, dist="CD", normalize=True, emd_mode="auto") -> float:
    """Fraction of reference clouds that are the nearest reference of some generated cloud."""
    _check_nonempty(gen, ref)
    g, r = _prepare(gen, normalize), _prepare(ref, normalize)
    return cov_from_matrix(distance_matrix(g, r, dist, emd_mode_for(g + r, emd_mode)))


def one_nna(gen, ref, dist="CD", normalize=True, emd_mode="auto") -> float:
    """Leave-one-out 1-NN accuracy of telling generated from reference clouds."""
    if len(gen) < 2 or len(ref) < 2:
        raise DomainError("1-NNA needs at least two clouds in each set")
    g, r = _prepare(gen, normalize), _prepare(ref, normalize)
    mode = emd_mode_for(g + r, emd_mode)
    return one_nna_from_matrices(
        distance_matrix(g, g, dist, mode, symmetric=True),
        distance_matrix(r, r, dist, mode, symmetric=True),
        distance_matrix(g, r, dist, mode),
    )


def tmd(shapes, normalize=True) -> float:
    """Sum over shapes of their mean Chamfer distance to the other shapes."""
    k = len(shapes)
    if k < 2:
        raise DomainError("TMD needs at least two shapes")
    s = _prepare(shapes, normalize)
    D = distance_matrix(s, s, "CD", symmetric=True)
    return float(D.sum() / (k - 1))


@dataclass
class MetricReport:
    mmd_cd: float = float("nan")
    mmd_emd: float = float("nan")
    cov_cd: float = float("nan")
    cov_emd: float = float("nan")
    nna_cd: float = float("nan")
    nna_emd: float = float("nan")
    tmd: float = float("nan")
    n_gen: int = 0
    n_ref: int = 0
    emd_mode: str = "exact"
    normalized: bool = True
    extra: dict = field(default_factory=dict)

    def to_text(self) -> str:
        items = {k: v for k, v in asdict(self).items() if k != "extra"}
        items.update(self.extra)
        return "".join(f"{k}={v}\n" for k, v in items.items())

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text):
        report = cls()
        types = {k: type(v) for k, v in asdict(report).items()}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            if key in types and key != "extra":
                kind = types[key]
                if kind is bool:
                    setattr(report, key, value == "True")
                else:
                    setattr(report, key, kind(value))
            else:
                report.extra[key] = value
        return report

    def table(self) -> str:
        """Fixed-order table; MMD-CD scaled by 1e3, MMD-EMD by 1e2, COV/1-NNA in %."""
        rows = [
            ("MMD-CD (x1e3)", self.mmd_cd * 1e3),
            ("MMD-EMD (x1e2)", self.mmd_emd * 1e2),
            ("COV-CD (%)", self.cov_cd * 100),
            ("COV-EMD (%)", self.cov_emd * 100),
            ("1-NNA-CD (%)", self.nna_cd * 100),
            ("1-NNA-EMD (%)", self.nna_emd * 100),
        ]
        if not np.isnan(self.tmd):
            rows.append(("TMD (x1e2)", self.tmd * 1e2))
        width = max(len(r[0]) for r in rows)
        lines = [f"{name:<{width}}  {value:10.4f}" for name, value in rows]
        lines.append(f"{'samples':<{width}}  gen={self.n_gen} ref={self.n_ref} emd={self.emd_mode}")
        return "\n".join(lines)


def evaluate(gen, ref, normalize=True, emd_mode="auto", with_nna=True) -> MetricReport:
    _check_nonempty(gen, ref)
    g, r = _prepare(gen, normalize), _prepare(ref, normalize)
    mode = emd_mode_for(g + r, emd_mode)
    report = MetricReport(n_gen=len(g), n_ref=len(r), emd_mode=mode, normalized=normalize)
    for dist in DISTANCES:
        D_gr = distance_matrix(g, r, dist, mode)
        key = dist.lower()
        setattr(report, f"mmd_{key}", mmd_from_matrix(D_gr))
        setattr(report, f"cov_{key}", cov_from_matrix(D_gr))
        if with_nna and len(g) >= 2 and len(r) >= 2:
            D_gg = distance_matrix(g, g, dist, mode, symmetric=True)
            D_rr = distance_matrix(r, r, dist, mode, symmetric=True)
            setattr(report, f"nna_{key}", one_nna_from_matrices(D_gg, D_rr, D_gr))
    return report
