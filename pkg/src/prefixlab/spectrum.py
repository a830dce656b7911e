"""SVD spectrum diagnostics of encoder attention matrices.

Singular values come from a one-sided Jacobi sweep (desk-scale sizes only).
The normalized cumulative singular-value curve summarizes how concentrated
an attention slice's spectrum is; its mean (the area under the curve) is
the per-band skewness scalar: rank-1 slices give 1.0, flat spectra give
(n+1)/(2n).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateRowError, InputError, NumericError

JACOBI_MAX_SWEEPS = 100
JACOBI_TOLERANCE = 1e-12


def svd_small(matrix: np.ndarray, want_vectors: bool = False):
    """Singular values (descending) of a small dense matrix via one-sided Jacobi.

    With ``want_vectors`` returns (u, s, vt) with ``u @ diag(s) @ vt``
    reconstructing the input; zero singular directions get zero columns in
    ``u``. Raises NumericError if the off-diagonal residual has not fallen
    below 1e-12 after 100 sweeps.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ConfigError("svd_small expects a matrix")
    transposed = m.shape[0] < m.shape[1]
    a = (m.T if transposed else m).copy()
    n = a.shape[1]
    v = np.eye(n)

    residual = 0.0
    for _ in range(JACOBI_MAX_SWEEPS):
        residual = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                ai = a[:, i]
                aj = a[:, j]
                aii = ai @ ai
                ajj = aj @ aj
                aij = ai @ aj
                norm = np.sqrt(aii * ajj)
                off = abs(aij) / norm if norm > 0.0 else 0.0
                residual = max(residual, off)
                if off <= JACOBI_TOLERANCE:
                    continue
                theta = 0.5 * np.arctan2(2.0 * aij, aii - ajj)
                c, s = np.cos(theta), np.sin(theta)
                rot_i = c * ai + s * aj
                rot_j = -s * ai + c * aj
                a[:, i], a[:, j] = rot_i, rot_j
                vi = v[:, i].copy()
                vj = v[:, j].copy()
                v[:, i] = c * vi + s * vj
                v[:, j] = -s * vi + c * vj
        if residual <= JACOBI_TOLERANCE:
            break
    else:
        raise NumericError(f"jacobi sweep did not converge "
                           f"(residual {residual:.3e} after {JACOBI_MAX_SWEEPS} sweeps)")

    sigma = np.sqrt((a * a).sum(axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    if not want_vectors:
        return sigma
    a = a[:, order]
    v = v[:, order]
    u = np.zeros_like(a)
    nonzero = sigma > 0.0
    u[:, nonzero] = a[:, nonzero] / sigma[nonzero]
    if transposed:
        return v, sigma, u.T
    return u, sigma, v.T


def cumulative_spectrum(sigma: np.ndarray) -> np.ndarray:
    """Normalized cumulative curve c_k = (sum of top-k values) / (total)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(np.diff(sigma) > 0.0):
        raise ConfigError("singular values must be sorted descending")
    total = sigma.sum()
    if total <= 0.0:
        raise DegenerateRowError("all singular values are zero")
    return np.cumsum(sigma) / total


def curve_auc(curve: np.ndarray) -> float:
    """Mean of the cumulative curve; 1.0 for rank-1, (n+1)/(2n) for flat."""
    return float(np.asarray(curve).mean())


@dataclass
class SpectrumReport:
    """Per-band averaged cumulative singular-value curves of attention slices."""

    curves: dict[str, np.ndarray]
    sample_counts: dict[str, int]
    auc: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.auc:
            self.auc = {band: curve_auc(c) for band, c in self.curves.items()}

    def to_csv_rows(self) -> list[dict]:
        bands = sorted(self.curves)
        length = max(len(self.curves[b]) for b in bands)
        rows = []
        for k in range(length):
            row = {"k": k + 1}
            for band in bands:
                curve = self.curves[band]
                row[band] = repr(float(curve[k])) if k < len(curve) else ""
            rows.append(row)
        return rows


def attention_spectrum_curves(attn_slices: list[np.ndarray]) -> np.ndarray:
    """Average the cumulative spectra of equally-shaped attention slices."""
    if not attn_slices:
        raise InputError("no attention slices to analyze")
    curves = [cumulative_spectrum(svd_small(s)) for s in attn_slices]
    return np.mean(curves, axis=0)


def band_spectrum(
    per_layer_attn: list[list[np.ndarray]],
    lower_band_layers: int,
    prefix_length: int,
    prefix_slice: bool = True,
) -> SpectrumReport:
    """Split per-layer attention matrices into lower/higher bands and average.

    ``per_layer_attn[layer]`` holds [T, P+T] (or per-head [H, T, P+T])
    matrices collected over examples. With ``prefix_slice`` only the prefix
    columns [0, P) enter the SVD.
    """
    if prefix_slice and prefix_length <= 0:
        raise ConfigError("prefix-slice analysis needs a positive prefix length")
    slices: dict[str, list[np.ndarray]] = {"lower": [], "higher": []}
    for layer, mats in enumerate(per_layer_attn):
        band = "lower" if layer + 1 <= lower_band_layers else "higher"
        for mat in mats:
            mat = np.asarray(mat, dtype=np.float64)
            heads = mat[None] if mat.ndim == 2 else mat
            for head_mat in heads:
                sliced = head_mat[:, :prefix_length] if prefix_slice else head_mat
                slices[band].append(sliced)
    curves = {}
    counts = {}
    for band, mats in slices.items():
        if not mats:
            continue
        curves[band] = attention_spectrum_curves(mats)
        counts[band] = len(mats)
    if not curves:
        raise InputError("no attention matrices supplied")
    return SpectrumReport(curves=curves, sample_counts=counts)


def write_pgm(path, matrix: np.ndarray, invert: bool = False) -> Path:
    """Write a grayscale portable graymap (binary P5) of a matrix heatmap.

    Values are min-max scaled to 0..255; the maximum maps to white unless
    ``invert``.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ConfigError("heatmap expects a matrix")
    lo, hi = m.min(), m.max()
    span = hi - lo
    scaled = np.zeros_like(m) if span == 0.0 else (m - lo) / span
    if invert:
        scaled = 1.0 - scaled
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    """Read back a binary P5 graymap (for round-trip checks)."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise InputError("not a binary PGM file")
    width, height = (int(x) for x in parts[1].split())
    data = np.frombuffer(parts[3][: width * height], dtype=np.uint8)
    return data.reshape(height, width)
