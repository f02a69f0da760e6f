"""Noise sweeps and the midpoint-noise-level fit.

A sweep evaluates test accuracy over a sigma grid with several repeats
per point; independent Philox streams indexed by (sigma index, repeat,
site) make each cell reproducible regardless of worker count. Robustness
is summarised by fitting the scaled/shifted logistic

    F(sigma) = 2 / (1 + exp((sigma - mu) / s)) * da + a_min

to the per-sigma mean accuracies, weighted by 1 / std(sigma), via damped
Gauss-Newton (Levenberg-Marquardt) with the analytic Jacobian. `mu` is
the midpoint noise level: the sigma at which accuracy falls to half of
its maximum (F(mu) = da + a_min identically); larger mu = more robust.

Fit details fixed here: positivity of s enforced by optimizing ln s;
a_min clamped to [0, 1] and da to [0, 0.5]; convergence when the relative
SSE change drops below 1e-10; at most 1000 iterations (stretched decay
curves from noise-adapted models crawl along a shallow mu-s valley and
can need a few hundred); parameter
covariance = (J^T J)^{-1} * SSE / (N - 4) in original parameters, and
mu_std is the square root of its (mu, mu) entry. Per-sigma standard
deviations are floored at 1/(2 * N_eval) so zero-variance points cannot
get infinite weight.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from quantnoise import models as M
from quantnoise.errors import ConfigError, FitConvergenceError
from quantnoise.noise import (
    ADDITIVE_ACTIVATION, ADDITIVE_WEIGHT, GLOBAL, NoiseSpec,
    enumerate_injection_sites, perturb_weights_additive,
    perturb_weights_lognormal, site_sigmas,
)
from quantnoise.rng import TAG_EVAL_NOISE, TAG_WEIGHT_NOISE, RngStream
from quantnoise.training import evaluate


@dataclass
class SweepResult:
    """Accuracy observations over a sigma grid with repeat statistics."""
    sigmas: np.ndarray                 # ascending, len >= 2
    repeats: int
    accuracy: np.ndarray               # [n_sigmas, repeats]
    n_eval: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        self.accuracy = np.asarray(self.accuracy, dtype=np.float64)
        if len(self.sigmas) < 1:
            raise ConfigError("sweep needs at least one sigma value")
        if np.any(np.diff(self.sigmas) <= 0):
            raise ConfigError("sigma grid must be strictly increasing")
        if self.accuracy.shape != (len(self.sigmas), self.repeats):
            raise ConfigError(
                f"accuracy shape {self.accuracy.shape} != "
                f"({len(self.sigmas)}, {self.repeats})")

    @property
    def std_floor(self) -> float:
        return 1.0 / (2.0 * self.n_eval)

    def means(self) -> np.ndarray:
        return self.accuracy.mean(axis=1)

    def stds(self) -> np.ndarray:
        """Sample standard deviation per sigma, floored at 1/(2 N_eval)."""
        if self.repeats < 2:
            s = np.zeros(len(self.sigmas))
        else:
            s = self.accuracy.std(axis=1, ddof=1)
        return np.maximum(s, self.std_floor)

    def rows(self):
        """(sigma, repeat, accuracy) in deterministic order."""
        for i, sig in enumerate(self.sigmas):
            for r in range(self.repeats):
                yield float(sig), r, float(self.accuracy[i, r])


def log_sigma_grid(lo: float, hi: float, points: int,
                   include_zero: bool = False) -> np.ndarray:
    """Log-spaced sigma grid (the usual x axis), optionally anchored at 0."""
    if not 0 < lo < hi:
        raise ConfigError(f"need 0 < lo < hi, got lo={lo}, hi={hi}")
    grid = np.geomspace(lo, hi, points)
    if include_zero:
        grid = np.concatenate([[0.0], grid])
    return grid


def noise_sweep(model, params, sigma_grid, repeats: int,
                images: np.ndarray, labels: np.ndarray,
                quantset=None, noise_model: str = ADDITIVE_ACTIVATION,
                placement="global", seed: int = 0, workers: int = 1,
                eval_batch: int = 256, include_input_site: bool = False,
                replicas: Optional[list] = None,
                metadata: Optional[dict] = None) -> SweepResult:
    """Evaluate accuracy for every (sigma, repeat) cell.

    Cells are independent tasks; results are byte-identical for any
    worker count because every random draw is indexed by
    (sigma index, repeat, site). `replicas` optionally supplies one
    (params, quantset) pair per repeat (retrain mode); by default all
    repeats reuse the same trained network with fresh noise streams.
    """
    sigma_grid = np.asarray(sigma_grid, dtype=np.float64)
    if images.shape[0] == 0:
        raise ConfigError("noise_sweep needs a non-empty dataset")
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")
    if replicas is not None and len(replicas) != repeats:
        raise ConfigError("need exactly one replica per repeat")
    base = RngStream(seed)
    n_sites = len(enumerate_injection_sites(model, include_input_site))
    # validate placement eagerly (raises with the valid range)
    NoiseSpec(noise_model, float(sigma_grid[-1]), placement)
    if placement != GLOBAL:
        site_sigmas(NoiseSpec(noise_model, 0.0, placement), n_sites)

    def cell(i: int, r: int) -> float:
        sigma = float(sigma_grid[i])
        p, q = (replicas[r] if replicas is not None else (params, quantset))
        if noise_model == ADDITIVE_ACTIVATION:
            spec = NoiseSpec(noise_model, sigma, placement)
            rt = M.NoiseRuntime.for_model(
                model, spec,
                lambda site: base.derive(TAG_EVAL_NOISE, i, r, site),
                include_input=include_input_site)
            return evaluate(model, p, images, labels, quant=q, noise=rt,
                            eval_batch=eval_batch)
        perturb = (perturb_weights_additive if noise_model == ADDITIVE_WEIGHT
                   else perturb_weights_lognormal)
        noisy = {
            name: perturb(v, sigma, base.derive(TAG_WEIGHT_NOISE, i, r, k))
            for k, (name, v) in enumerate(sorted(p.items()))
        }
        return evaluate(model, noisy, images, labels, quant=q,
                        eval_batch=eval_batch)

    cells = [(i, r) for i in range(len(sigma_grid)) for r in range(repeats)]
    acc = np.zeros((len(sigma_grid), repeats), dtype=np.float64)
    if workers <= 1:
        for i, r in cells:
            acc[i, r] = cell(i, r)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for (i, r), a in zip(cells, pool.map(lambda c: cell(*c), cells)):
                acc[i, r] = a
    meta = dict(metadata or {})
    meta.setdefault("noise_model", noise_model)
    meta.setdefault("placement", str(placement))
    meta.setdefault("seed", seed)
    return SweepResult(sigmas=sigma_grid, repeats=repeats, accuracy=acc,
                       n_eval=images.shape[0], metadata=meta)


# ---------------------------------------------------------------------------
# the logistic fit
# ---------------------------------------------------------------------------

def logistic(sigma, mu: float, s: float, da: float, a_min: float):
    """F(sigma; mu, s, da, a_min) = 2/(1 + e^((sigma-mu)/s)) * da + a_min."""
    t = (np.asarray(sigma, dtype=np.float64) - mu) / s
    return 2.0 * _expit_neg(t) * da + a_min


def _expit_neg(t):
    """1 / (1 + e^t), computed stably for large |t|."""
    t = np.asarray(t, dtype=np.float64)
    out = np.empty_like(t)
    pos = t >= 0
    e = np.exp(-t[pos])
    out[pos] = e / (1.0 + e)
    out[~pos] = 1.0 / (1.0 + np.exp(t[~pos]))
    return out


@dataclass
class LogisticFit:
    """Fitted midpoint parameters with uncertainty and diagnostics."""
    mu: float
    s: float
    da: float
    a_min: float
    cov: np.ndarray          # 4x4, parameter order (mu, s, da, a_min)
    mu_std: float
    sse: float
    iterations: int
    converged: bool

    @property
    def a_max(self) -> float:
        return self.a_min + 2.0 * self.da

    def predict(self, sigma):
        return logistic(sigma, self.mu, self.s, self.da, self.a_min)


def _jacobian(sig, mu, s, da):
    """Columns: dF/d(mu, s, da, a_min). Unweighted."""
    t = (sig - mu) / s
    L = _expit_neg(t)
    core = L * (1.0 - L)
    j_mu = 2.0 * da * core / s
    j_s = 2.0 * da * core * (sig - mu) / (s * s)
    j_da = 2.0 * L
    j_amin = np.ones_like(sig)
    return np.stack([j_mu, j_s, j_da, j_amin], axis=1)


def _initial_guess(sig, y, min_gap):
    a0 = float(np.min(y))
    d0 = float(np.clip((np.max(y) - np.min(y)) / 2.0, 1e-6, 0.5))
    half = a0 + d0
    mu0 = float(sig[np.argmin(np.abs(y - half))])
    # sigma positions where the mean first drops through 80% / 20% height
    h80 = a0 + 2.0 * d0 * 0.8
    h20 = a0 + 2.0 * d0 * 0.2

    def first_crossing(level):
        for i in range(1, len(sig)):
            if (y[i - 1] - level) * (y[i] - level) <= 0 and y[i - 1] != y[i]:
                f = (y[i - 1] - level) / (y[i - 1] - y[i])
                return sig[i - 1] + f * (sig[i] - sig[i - 1])
        return None

    c80, c20 = first_crossing(h80), first_crossing(h20)
    if c80 is not None and c20 is not None and c20 > c80:
        s0 = (c20 - c80) / 4.0
    else:
        s0 = (sig[-1] - sig[0]) / 4.0
    s0 = max(s0, min_gap)
    if mu0 <= 0:
        mu0 = max(min_gap, float(sig[sig > 0][0]) if np.any(sig > 0) else min_gap)
    return mu0, s0, d0, a0


def fit_midpoint(sweep: SweepResult, max_iter: int = 1000,
                 tol: float = 1e-10) -> LogisticFit:
    """Weighted nonlinear least squares per the midpoint definition.

    Raises FitConvergenceError for degenerate sweeps (no half-height
    crossing), fewer than 2 repeats (uncertainty undefined), or
    non-convergence within `max_iter`.
    """
    if sweep.repeats < 2:
        raise ConfigError("fit requires >= 2 repeats per sigma "
                          "(uncertainty undefined otherwise)")
    if len(sweep.sigmas) < 5:
        raise ConfigError("fit requires at least 5 sigma points "
                          "(4 parameters plus residual degrees of freedom)")
    sig = sweep.sigmas.astype(np.float64)
    y = sweep.means()
    dy = sweep.stds()
    lo, hi = float(np.min(y)), float(np.max(y))
    if hi - lo < 0.05:
        raise FitConvergenceError(
            f"degenerate sweep: accuracy span {hi - lo:.4f} has no "
            f"half-height crossing")
    gaps = np.diff(sig)
    min_gap = float(np.min(gaps[gaps > 0]))
    mu, s0, da, a_min = _initial_guess(sig, y, min_gap)
    u = float(np.log(s0))
    w = 1.0 / dy

    def sse_of(mu_, u_, da_, amin_):
        r = (logistic(sig, mu_, np.exp(u_), da_, amin_) - y) * w
        return float(np.dot(r, r)), r

    sse, r = sse_of(mu, u, da, a_min)
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        s = float(np.exp(u))
        J = _jacobian(sig, mu, s, da)
        J[:, 1] *= s                      # chain rule: d/du = s * d/ds
        Jw = J * w[:, None]
        g = Jw.T @ r
        H = Jw.T @ Jw
        stepped = False
        for _ in range(40):
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                delta = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                lam *= 3.0
                continue
            cand = (mu + delta[0], u + delta[1],
                    float(np.clip(da + delta[2], 0.0, 0.5)),
                    float(np.clip(a_min + delta[3], 0.0, 1.0)))
            cand = (cand[0], float(np.clip(cand[1], np.log(1e-10), np.log(1e10))),
                    cand[2], cand[3])
            sse_new, r_new = sse_of(*cand)
            if sse_new < sse:
                rel = abs(sse - sse_new) / max(sse, 1e-30)
                mu, u, da, a_min = cand
                sse, r = sse_new, r_new
                lam = max(lam / 3.0, 1e-14)
                stepped = True
                if rel < tol:
                    converged = True
                break
            lam = min(lam * 3.0, 1e14)
        if not stepped and lam >= 1e14:
            converged = True          # stuck at a (local) minimum
            break
        if converged:
            break
    if not converged:
        raise FitConvergenceError(
            f"logistic fit did not converge in {max_iter} iterations "
            f"(sse={sse:.3e})")
    s = float(np.exp(u))
    if not 0.0 <= mu <= 10.0 * float(sig[-1]):
        raise FitConvergenceError(
            f"fitted mu={mu:.4g} outside the trusted range "
            f"[0, {10.0 * float(sig[-1]):.4g}]")
    J = _jacobian(sig, mu, s, da) * w[:, None]
    dof = len(sig) - 4
    resid_var = sse / dof if dof > 0 else float("nan")
    try:
        cov = np.linalg.inv(J.T @ J) * resid_var
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(J.T @ J) * resid_var
    mu_std = float(np.sqrt(max(cov[0, 0], 0.0)))
    return LogisticFit(mu=float(mu), s=s, da=float(da), a_min=float(a_min),
                       cov=cov, mu_std=mu_std, sse=float(sse),
                       iterations=it, converged=True)


# ---------------------------------------------------------------------------
# comparison table
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TradeoffRow:
    label: str
    peak_accuracy: float
    mu: float
    mu_std: float
    on_front: bool


def pareto_report(entries) -> list[TradeoffRow]:
    """Accuracy/robustness trade-off rows with Pareto-front flags.

    `entries` are (label, peak_accuracy, fit) triples. A row is on the
    front when no other row is at least as good in both peak accuracy
    and mu and strictly better in one.
    """
    items = [(str(lbl), float(acc), float(fit.mu), float(fit.mu_std))
             for lbl, acc, fit in entries]

    def dominated(a, b):
        return (b[1] >= a[1] and b[2] >= a[2]
                and (b[1] > a[1] or b[2] > a[2]))

    rows = []
    for a in items:
        flag = not any(dominated(a, b) for b in items if b is not a)
        rows.append(TradeoffRow(a[0], a[1], a[2], a[3], flag))
    rows.sort(key=lambda r: (-r.peak_accuracy, -r.mu, r.label))
    return rows
