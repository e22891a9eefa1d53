"""2D raster autoregressive micrograph generator and Monte Carlo power studies.

Latent field::

    U[r, c] = c0 + sum_{a,b} phi[a, b] * U[r - a, c - b] + eps[r, c],   phi[0, 0] = 0
    X[r, c] = h(U[r, c])

Each pixel depends only on pixels above and to the left, so generation runs
in raster order over a grid padded by ``burn_margin`` rows on top and columns
on the left; the padding is cropped before ``h`` is applied.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import kernels
from .image import Micrograph
from .rng import derive_seed, normal_field

__all__ = [
    "ArSpec",
    "GammaSweep",
    "PRESET_MODELS",
    "CHARTS",
    "preset_spec",
    "generate",
    "interpolate",
    "paste_quadrant",
    "power_study",
    "power_table_csv",
    "summarize_powers",
]

log = logging.getLogger(__name__)

CHARTS = ("SWMA-theta", "SWMA-sigma", "SWMA-M", "RWMA")

_NOISE_STREAM = 0
_EDGE_STREAM = 1
# noise is keyed by post-crop coordinates (offset so the burn band stays nonnegative),
# so changing the burn margin leaves the cropped region's noise unchanged
_ORIGIN = 1 << 20
_EXPLOSION_FACTOR = 1e6

# Coefficient pairs (reference, changed), row-by-row over the 3x3 lag window.
PRESET_MODELS = {
    "a": {
        "phi0": [0, 3.59e-01, 1.07e-02, 3.90e-01, 4.21e-02, 1.76e-03, 9.98e-02, -1.82e-03, 1.72e-05],
        "phi1": [0, 2.74e-1, 2.93e-2, -2.41e-1, 1.50e-1, -1.17e-2, 4.31e-1, 4.52e-2, -2.96e-2],
        "transform": "clamped-exp",
        # exp of the raw latent level (~10) saturates the clamp everywhere
        "center_latent": True,
    },
    "b": {
        "phi0": [0, 3.59e-01, 1.07e-01, 9.98e-03, -1.82e-03, 1.72e-05, 3.51e-01, 4.21e-02, 1.76e-03],
        "phi1": [0, 3.59e-01, 1.07e-01, 9.98e-03, -1.82e-03, 1.72e-05, 3.12e-1, 4.21e-02, 1.76e-03],
        "transform": "identity",
        "center_latent": False,
    },
}


@dataclass(frozen=True)
class ArSpec:
    phi: tuple
    c0: float = 1.0
    sigma_ar: float = 0.01
    transform: str = "identity"
    seed: int = 0
    burn_margin: int = 64
    center_latent: bool = False

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=np.float64)
        if phi.ndim == 1:
            side = int(round(np.sqrt(phi.size)))
            if side * side != phi.size:
                raise ValueError("flat phi must have a square number of entries")
            phi = phi.reshape(side, side)
        if phi.ndim != 2 or phi.shape[0] != phi.shape[1]:
            raise ValueError("phi must be square")
        if phi[0, 0] != 0:
            raise ValueError("phi[0][0] must be 0")
        if self.sigma_ar < 0:
            raise ValueError("sigma_ar must be nonnegative")
        if self.transform not in ("identity", "clamped-exp"):
            raise ValueError(f"unknown transform {self.transform!r}")
        if self.burn_margin < phi.shape[0] - 1:
            raise ValueError("burn_margin must be >= l_g")
        object.__setattr__(self, "phi", tuple(tuple(float(v) for v in row) for row in phi))

    @property
    def l_g(self) -> int:
        return len(self.phi) - 1

    @property
    def phi_matrix(self) -> np.ndarray:
        return np.array(self.phi)

    @property
    def stationary_mean(self) -> float:
        s = 1.0 - float(np.sum(self.phi))
        return self.c0 / s if abs(s) > 1e-12 else self.c0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phi"] = [list(r) for r in self.phi]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArSpec":
        return cls(**d)


def preset_spec(model: str = "a", which: int = 0, seed: int = 0, **overrides) -> ArSpec:
    """ArSpec for one side of a published coefficient pair (c0 = 1, sigma_AR = 0.01)."""
    p = PRESET_MODELS[model]
    spec = ArSpec(phi=tuple(p["phi1"] if which else p["phi0"]), c0=1.0, sigma_ar=0.01,
                  transform=p["transform"], seed=seed, center_latent=p["center_latent"])
    return replace(spec, **overrides) if overrides else spec


def _h(kind, u):
    if kind == "identity":
        return u
    return np.minimum(5.0, np.maximum(0.05, np.exp(u)))


def generate(spec: ArSpec, height: int, width: int, id: str | None = None,
             backend: str | None = None) -> Micrograph:
    """Unstandardized AR micrograph, deterministic in ``spec.seed``."""
    if height < 1 or width < 1:
        raise ValueError("dims must be >= 1")
    B = spec.burn_margin
    if B >= _ORIGIN:
        raise ValueError("burn_margin too large")
    shape = (height + B, width + B)
    origin = (_ORIGIN - B, _ORIGIN - B)
    mu = spec.stationary_mean
    U = mu + spec.sigma_ar * normal_field(spec.seed, _EDGE_STREAM, shape, origin)
    noise = spec.sigma_ar * normal_field(spec.seed, _NOISE_STREAM, shape, origin)
    with np.errstate(over="ignore", invalid="ignore"):
        kernels.ar_fill(U, spec.phi_matrix, spec.c0, noise, spec.l_g, backend=backend)
        U = U[B:, B:]
        # a stable recursion stays within a few dozen noise scales of its mean
        bound = _EXPLOSION_FACTOR * (spec.sigma_ar + abs(spec.c0) + abs(mu))
        if not np.all(np.abs(U - mu) < bound):
            raise OverflowError("AR recursion diverged: explosive coefficients")
        if spec.center_latent:
            U = U - mu
        X = _h(spec.transform, U)
    if not np.all(np.isfinite(X)):
        raise OverflowError("AR recursion overflowed: explosive coefficients")
    return Micrograph(X, id=id or f"ar-{spec.seed}", standardized=False)


def interpolate(phi0, phi1, gamma: float) -> np.ndarray:
    """(1 - gamma) * phi0 + gamma * phi1, elementwise."""
    a = np.asarray(phi0, dtype=np.float64)
    b = np.asarray(phi1, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("coefficient shape mismatch")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if gamma == 0.0:
        return a.copy()
    if gamma == 1.0:
        return b.copy()
    return (1.0 - gamma) * a + gamma * b


def paste_quadrant(spec_a: ArSpec, spec_b: ArSpec, height: int, width: int,
                   id: str = "pasted", backend: str | None = None):
    """Upper-left quadrant from ``spec_a``, the other three from ``spec_b``.

    Returns (micrograph, mask) with mask 0 on the ``spec_a`` quadrant.
    """
    A = generate(spec_a, height, width, backend=backend).pixels
    Bm = generate(spec_b, height, width, backend=backend).pixels
    mask = np.ones((height, width), dtype=np.int64)
    mask[:height // 2, :width // 2] = 0
    return Micrograph(np.where(mask == 0, A, Bm), id=id), mask


@dataclass(frozen=True)
class GammaSweep:
    """Monte Carlo sweep over gamma for one coefficient pair.

    Each replicate draws fresh reference data (training + CL) from ``phi0``,
    calibrates once, then monitors one fresh micrograph per gamma.
    """

    phi0: tuple
    phi1: tuple
    gammas: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    replicates: int = 10
    height: int = 256
    width: int = 256
    n_train: int = 1
    n_cl: int = 4
    alpha_target: float = 0.01
    c0: float = 1.0
    sigma_ar: float = 0.01
    transform: str = "identity"
    center_latent: bool = False
    burn_margin: int = 64
    seed: int = 0
    direct_limits: bool = False
    direct_limit_images: int = 8

    def __post_init__(self):
        g = tuple(float(v) for v in self.gammas)
        if list(g) != sorted(g) or 0.0 not in g:
            raise ValueError("gamma list must be sorted ascending and contain 0")
        if any(not 0.0 <= v <= 1.0 for v in g):
            raise ValueError("gammas must lie in [0, 1]")
        object.__setattr__(self, "gammas", g)
        object.__setattr__(self, "phi0", tuple(float(v) for v in np.ravel(self.phi0)))
        object.__setattr__(self, "phi1", tuple(float(v) for v in np.ravel(self.phi1)))
        if len(self.phi0) != len(self.phi1):
            raise ValueError("coefficient shape mismatch")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")

    @classmethod
    def preset(cls, model: str = "a", **kw) -> "GammaSweep":
        p = PRESET_MODELS[model]
        return cls(phi0=tuple(p["phi0"]), phi1=tuple(p["phi1"]), transform=p["transform"],
                   center_latent=p["center_latent"], **kw)

    def spec_for(self, phi, seed) -> ArSpec:
        return ArSpec(phi=tuple(np.ravel(phi)), c0=self.c0, sigma_ar=self.sigma_ar,
                      transform=self.transform, seed=seed, burn_margin=self.burn_margin,
                      center_latent=self.center_latent)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("phi0", "phi1", "gammas"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GammaSweep":
        return cls(**d)


@dataclass
class PowerRow:
    gamma: float
    replicate: int
    chart: str
    power: float
    status: str = "ok"


@dataclass
class PowerStudyResult:
    rows: list = field(default_factory=list)
    achieved_alpha: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)


def power_study(sweep: GammaSweep, family=None, l_s: int = 5, l_w: int = 30,
                sigma_w: float | None = None, lam: float = 0.01, train_opts=None,
                backend: str | None = None) -> PowerStudyResult:
    """Per-gamma, per-replicate power of the four charts.

    A replicate that fails (e.g. explosive coefficients) contributes rows with
    ``status`` set to the error and NaN power; the study continues.
    """
    from .charts import calibrate, monitor_images, reference_scores, score_images
    from .image import NeighborhoodSpec, extract_dataset, standardize
    from .model import ModelFamily, TrainOptions, train
    from .smoothing import build_kernel

    family = family or ModelFamily("linear")
    spec = NeighborhoodSpec("non-causal", l_s)
    k = build_kernel(l_w, sigma_w)
    out = PowerStudyResult()
    phi0 = np.reshape(sweep.phi0, (-1, int(round(np.sqrt(len(sweep.phi0))))))
    phi1 = np.reshape(sweep.phi1, phi0.shape)
    for rep in range(sweep.replicates):
        rseed = derive_seed(sweep.seed, "replicate", rep)
        out.seeds[rep] = rseed
        try:
            def ref(kind, i):
                s = sweep.spec_for(phi0, derive_seed(rseed, kind, i))
                return standardize(generate(s, sweep.height, sweep.width, id=f"{kind}{i}",
                                            backend=backend))

            train_ms = [ref("train", i) for i in range(sweep.n_train)]
            opts = train_opts or TrainOptions(seed=derive_seed(rseed, "model") % (2 ** 31))
            model = train(extract_dataset(train_ms, spec), family, lam, opts)
            refstats = reference_scores(model, train_ms, spec)
            n_lim = sweep.direct_limit_images if sweep.direct_limits else sweep.n_cl
            kind = "direct" if sweep.direct_limits else "cl"
            cl_fields = score_images(model, [ref(kind, i) for i in range(n_lim)], spec)
            cal = calibrate(cl_fields, k, sweep.alpha_target, refstats, spec, backend=backend)
            out.achieved_alpha[rep] = cal.achieved_alpha
        except (ValueError, OverflowError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.warning("replicate %d failed: %s", rep, exc)
            for g in sweep.gammas:
                for ch in CHARTS:
                    out.rows.append(PowerRow(g, rep, ch, float("nan"), f"error: {exc}"))
            continue
        for gi, g in enumerate(sweep.gammas):
            try:
                s = sweep.spec_for(interpolate(phi0, phi1, g), derive_seed(rseed, "monitor", gi))
                mon = generate(s, sweep.height, sweep.width, id=f"monitor-g{g}", backend=backend)
                res = monitor_images([mon], model, cal, spec, backend=backend)[0]
                for ch in CHARTS:
                    out.rows.append(PowerRow(g, rep, ch, float(res.power[ch])))
            except (ValueError, OverflowError, FloatingPointError) as exc:
                log.warning("replicate %d gamma %g failed: %s", rep, g, exc)
                for ch in CHARTS:
                    out.rows.append(PowerRow(g, rep, ch, float("nan"), f"error: {exc}"))
    return out


def power_table_csv(result: PowerStudyResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["gamma", "replicate", "chart", "power", "status"])
    for r in result.rows:
        w.writerow([repr(r.gamma), r.replicate, r.chart, repr(r.power), r.status])
    return buf.getvalue()


def summarize_powers(result: PowerStudyResult) -> dict:
    """{gamma: {chart: {min, q1, median, q3, max, n}}} over successful replicates."""
    out = {}
    for g in sorted({r.gamma for r in result.rows}):
        out[g] = {}
        for ch in CHARTS:
            v = np.array([r.power for r in result.rows
                          if r.gamma == g and r.chart == ch and r.status == "ok"])
            if v.size == 0:
                out[g][ch] = {"n": 0}
                continue
            q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
            out[g][ch] = {"min": q[0], "q1": q[1], "median": q[2], "q3": q[3], "max": q[4],
                          "n": int(v.size)}
    return out


def summary_json(result: PowerStudyResult) -> str:
    s = summarize_powers(result)
    return json.dumps({repr(g): v for g, v in s.items()}, indent=1, sort_keys=True)
