"""Solvers for the three-matrix stage color pipeline.

The pipeline uses three 3x3 transforms plus an offset:

  M  pre-corrects out-of-frustum (lighting) content so displayed primaries
     match the camera's observation of them,
  Q  post-corrects recorded footage to repair the color rendition of
     materials lit by the stage,
  N  = M Q^-1 pre-corrects in-frustum (background) content so that after Q
     the background still lands on the intended colors,

and a black-level offset removes stage light bounced off the in-frustum
panels. All solves operate on linear camera-raw RGB.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .imaging import CHART_PATCHES, ChartSamples

DEFAULT_COND_LIMIT_SL = 1e6
DEFAULT_COND_LIMIT_Q = 1e4

BLACK_LEVEL_FLAG_THRESHOLD = 0.2

MODES = ("out_of_frustum", "in_frustum", "post")


class CalibrationError(ValueError):
    """Base class for calibration solve failures."""


class IllConditionedError(CalibrationError):
    """A matrix is too ill-conditioned to invert reliably."""


class DegenerateLightingError(CalibrationError):
    """The predicted chart responses do not span three dimensions."""


def _as_mat3(m, name: str = "matrix") -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"{name} must be 3x3, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError(f"{name} has non-finite entries")
    return m


def _as_rgb(v, name: str = "value") -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (3,):
        raise ValueError(f"{name} must be an RGB triple, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise ValueError(f"{name} has non-finite components")
    return v


def condition_number(m) -> float:
    """Ratio of largest to smallest singular value (inf if singular)."""
    s = np.linalg.svd(_as_mat3(m), compute_uv=False)
    if s[-1] == 0.0:
        return float("inf")
    return float(s[0] / s[-1])


@dataclass(frozen=True)
class SRLSet:
    """Per-patch camera responses to the three stage channels.

    matrices[j][:, c] is the RGB value of chart patch j photographed under
    stage channel c, at raw calibration-geometry scale (no panel-coverage
    rescaling applied).
    """

    matrices: np.ndarray  # (24, 3, 3) float64
    white_index: int = 18

    def __post_init__(self):
        matrices = np.asarray(self.matrices, dtype=np.float64)
        if matrices.shape != (CHART_PATCHES, 3, 3):
            raise ValueError(f"expected ({CHART_PATCHES}, 3, 3), got {matrices.shape}")
        if not np.isfinite(matrices).all():
            raise ValueError("non-finite patch response")
        if (matrices < 0).any():
            raise ValueError("negative patch response")
        object.__setattr__(self, "matrices", matrices)


@dataclass(frozen=True)
class CalibrationBundle:
    """The solved pipeline: all transforms plus diagnostics."""

    m: np.ndarray
    q: np.ndarray
    n: np.ndarray | None
    beta: float
    black_offset: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "m", _as_mat3(self.m, "M"))
        object.__setattr__(self, "q", _as_mat3(self.q, "Q"))
        if self.n is not None:
            object.__setattr__(self, "n", _as_mat3(self.n, "N"))
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must be in (0, 1], got {self.beta}")
        offset = _as_rgb(self.black_offset, "black_offset")
        if (offset < 0).any():
            raise ValueError("black_offset components must be >= 0")
        object.__setattr__(self, "black_offset", offset)

    @property
    def n_effective(self) -> np.ndarray:
        """N when available, otherwise the fallback M."""
        return self.n if self.n is not None else self.m

    def to_json(self) -> str:
        doc = {
            "M": self.m.tolist(),
            "Q": self.q.tolist(),
            "N": None if self.n is None else self.n.tolist(),
            "beta": self.beta,
            "black_offset": self.black_offset.tolist(),
            "diagnostics": self.diagnostics,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationBundle":
        doc = json.loads(text)
        return cls(
            m=np.array(doc["M"], dtype=np.float64),
            q=np.array(doc["Q"], dtype=np.float64),
            n=None if doc["N"] is None else np.array(doc["N"], dtype=np.float64),
            beta=float(doc["beta"]),
            black_offset=np.array(doc["black_offset"], dtype=np.float64),
            diagnostics=doc.get("diagnostics", {}),
        )


class GamutCounter:
    """Tallies pixels clamped at the display maximum by transform_content."""

    def __init__(self):
        self.total = 0
        self.out_of_gamut = 0

    @property
    def fraction(self) -> float:
        return self.out_of_gamut / self.total if self.total else 0.0


def build_sl(red, green, blue) -> np.ndarray:
    """Stack the camera's view of the three stage primaries as columns."""
    cols = [_as_rgb(v, name) for v, name in ((red, "red"), (green, "green"), (blue, "blue"))]
    sl = np.stack(cols, axis=1)
    if (sl < 0).any():
        raise ValueError("primary responses must be non-negative")
    return sl


def solve_m(sl, cond_limit: float = DEFAULT_COND_LIMIT_SL) -> np.ndarray:
    """Invert the primary-response matrix; the out-of-frustum pre-correction."""
    sl = _as_mat3(sl, "SL")
    cond = condition_number(sl)
    if cond > cond_limit:
        raise IllConditionedError(
            f"primary matrix condition number {cond:.3e} exceeds limit {cond_limit:.3e}"
        )
    return np.linalg.inv(sl)


def build_srl(red_chart: ChartSamples, green_chart: ChartSamples, blue_chart: ChartSamples) -> SRLSet:
    """Assemble per-patch response matrices from the three channel captures."""
    charts = (red_chart, green_chart, blue_chart)
    if len({c.white_index for c in charts}) != 1:
        raise ValueError("channel charts disagree on white_index")
    matrices = np.stack([c.patches for c in charts], axis=2)  # (24, 3, 3)
    return SRLSet(matrices, white_index=red_chart.white_index)


def predict_lit_chart(srl: SRLSet, m, w_avg, beta: float) -> np.ndarray:
    """Unclamped per-patch prediction (1/beta) * SRL_j * M * w_avg."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    m = _as_mat3(m, "M")
    w_avg = _as_rgb(w_avg, "w_avg")
    return srl.matrices @ (m @ w_avg) / beta


def simulate_lit_chart(srl: SRLSet, m, w_avg, beta: float) -> ChartSamples:
    """Simulate the chart as lit by the stage reproducing an environment.

    The stage shows the environment pre-corrected by M; each patch then
    responds with its per-channel calibration matrix, rescaled from panel
    geometry to the full sphere by 1/beta. Negative predictions are clamped
    to zero with a warning.
    """
    predicted = predict_lit_chart(srl, m, w_avg, beta)
    negatives = int((predicted < 0).sum())
    if negatives:
        warnings.warn(f"{negatives} negative simulated components clamped to 0", stacklevel=2)
        predicted = np.maximum(predicted, 0.0)
    return ChartSamples(predicted, white_index=srl.white_index)


def _check_weights(weights) -> np.ndarray:
    if weights is None:
        return np.ones(CHART_PATCHES)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (CHART_PATCHES,):
        raise ValueError(f"weights must have {CHART_PATCHES} entries, got {weights.shape}")
    if (weights < 0).any() or not np.isfinite(weights).all():
        raise ValueError("weights must be finite and >= 0")
    if int((weights > 0).sum()) < 3:
        raise ValueError("need at least 3 patches with positive weight")
    return weights


# Relative singular-value cutoff for the Q solve: response-spread directions
# weaker than this fraction of the dominant one carry no usable signal
# (a spectrally flat chart plus capture noise) and are left uncorrected.
Q_SPREAD_RCOND = 1e-6

# A rank-deficient system is acceptable only if the anchored fit explains the
# targets to this relative tolerance (the flat-chart metamer case).
Q_DEGENERATE_RTOL = 1e-10


def solve_q(
    srl: SRLSet,
    m,
    w_avg,
    targets: ChartSamples,
    beta: float,
    weights=None,
) -> np.ndarray:
    """Least-squares post-correction matrix.

    Minimizes sum_j weight_j * ||(1/beta) Q SRL_j M w_avg - p_j||^2. The
    objective decouples by output channel, so each row of Q is its own
    3-unknown linear least-squares problem over the 24 predicted responses,
    solved by SVD and anchored at the identity: rows are corrections to I,
    and spread directions below Q_SPREAD_RCOND of the dominant singular
    value are left at the identity. A spectrally flat chart (all responses
    collinear) therefore returns Q = I exactly when the identity already
    fits; if a rank-deficient system cannot be fit, the capture does not
    constrain Q and DegenerateLightingError is raised.
    """
    weights = _check_weights(weights)
    predicted = predict_lit_chart(srl, m, w_avg, beta)
    sw = np.sqrt(weights)[:, None]
    wx = predicted * sw
    wt = targets.patches * sw
    s = np.linalg.svd(wx, compute_uv=False)
    rank = int((s > s[0] * Q_SPREAD_RCOND).sum()) if s[0] > 0 else 0

    q = np.eye(3)
    for r in range(3):
        delta, *_ = np.linalg.lstsq(wx, wt[:, r] - wx[:, r], rcond=Q_SPREAD_RCOND)
        q[r] += delta

    if rank < 3:
        fit = float(((wx @ q.T - wt) ** 2).sum())
        scale = float((wt**2).sum())
        if fit > Q_DEGENERATE_RTOL * max(scale, np.finfo(float).tiny):
            raise DegenerateLightingError(
                f"predicted chart responses span rank {rank} < 3 "
                "and do not explain the targets"
            )
    return q


def q_objective(q, srl: SRLSet, m, w_avg, targets: ChartSamples, beta: float, weights=None) -> float:
    """Weighted squared-error objective that solve_q minimizes."""
    weights = _check_weights(weights)
    q = _as_mat3(q, "Q")
    predicted = predict_lit_chart(srl, m, w_avg, beta)
    residual = predicted @ q.T - targets.patches
    return float((weights[:, None] * residual**2).sum())


def solve_n(m, q, cond_limit: float = DEFAULT_COND_LIMIT_Q) -> np.ndarray | None:
    """In-frustum pre-correction N = M Q^-1, or None when Q resists inversion.

    A near-singular Q (monochromatic target lighting collapses the chart's
    color spread) makes Q^-1 meaningless; the pipeline then falls back to
    N := M. Unavailability is a value, not an error.
    """
    m = _as_mat3(m, "M")
    q = _as_mat3(q, "Q")
    if condition_number(q) > cond_limit:
        return None
    return m @ np.linalg.inv(q)


def compute_black_level(b_camera, w_camera) -> np.ndarray:
    """Offset to subtract from in-frustum content: bounce over white response.

    b_camera is the camera's view of the switched-off in-frustum panels lit
    by the rest of the stage; w_camera is its view of full white (the sum of
    the three primary captures).
    """
    b = _as_rgb(b_camera, "b_camera")
    w = _as_rgb(w_camera, "w_camera")
    if (b < 0).any():
        raise ValueError("b_camera components must be >= 0")
    if (w <= 0).any():
        raise ValueError("w_camera components must be > 0")
    offset = b / w
    if (offset > BLACK_LEVEL_FLAG_THRESHOLD).any():
        warnings.warn(
            f"black level {offset.tolist()} exceeds {BLACK_LEVEL_FLAG_THRESHOLD}; "
            "check the capture",
            stacklevel=2,
        )
    return offset


def transform_content(pixels, mode: str, bundle: CalibrationBundle, counter: GamutCounter | None = None) -> np.ndarray:
    """Apply one pipeline stage to content pixels (any (..., 3) array).

    out_of_frustum: M . p
    in_frustum:     clamp_0(N_eff . p - black_offset), then clamped to [0, 1]
                    with pixels clamped at the top counted as out-of-gamut
    post:           Q . p
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.shape[-1] != 3:
        raise ValueError(f"pixels must have a trailing RGB axis, got shape {pixels.shape}")
    if mode == "out_of_frustum":
        return pixels @ bundle.m.T
    if mode == "post":
        return pixels @ bundle.q.T
    if mode != "in_frustum":
        raise ValueError(f"unknown mode {mode!r}")
    out = pixels @ bundle.n_effective.T - bundle.black_offset
    out = np.maximum(out, 0.0)
    over = (out > 1.0).any(axis=-1)
    if counter is not None:
        counter.total += int(np.size(over))
        counter.out_of_gamut += int(np.count_nonzero(over))
    return np.minimum(out, 1.0)


def chart_error(target: ChartSamples, measured: ChartSamples) -> np.ndarray:
    """Mean per-channel absolute error relative to the target white intensity.

    error_c = (1/24) * sum_j |measured_jc - target_jc| / target_white_c,
    computed in whatever linear space the inputs share (camera raw here).
    """
    white = target.white
    if (white <= 0).any():
        raise ValueError("target white patch components must be > 0")
    return np.abs(measured.patches - target.patches).mean(axis=0) / white
