"""Generalized-Pareto tail modeling of reconstruction losses.

The largest tau training losses, in excess of a peaks-over-threshold
cutoff w, are fitted by maximum likelihood; a test loss v is then scored
by the fitted tail CDF of v - w and rejected as unknown when the score
reaches the decision threshold z.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNKNOWN = -1  # sentinel open-set label; rasters store it as code C+1


@dataclass(frozen=True)
class GpdModel:
    xi: float
    mu: float
    w: float
    tau: int

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError(f"scale must be positive, got {self.mu}")
        if self.tau < 2:
            raise ValueError(f"tail size must be >= 2, got {self.tau}")


@dataclass(frozen=True)
class RejectionPolicy:
    z: float = 0.5
    mode: str = "global"  # global | classwise

    def __post_init__(self):
        if not 0.0 < self.z < 1.0:
            raise ValueError(f"threshold z must be in (0,1), got {self.z}")
        if self.mode not in ("global", "classwise"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class ClasswiseGpd:
    models: dict[int, GpdModel]
    fallback_classes: list[int] = field(default_factory=list)

    def model_for(self, cls, global_model: GpdModel) -> GpdModel:
        return self.models.get(int(cls), global_model)


def tail_size(nos, num_classes, mode="global"):
    """Tail count tau: NoS*4*0.05*C floored at 20 globally, NoS*4*0.05
    floored at 2 per class."""
    if nos < 1 or num_classes < 1:
        raise ValueError("nos and num_classes must be >= 1")
    if mode == "global":
        return max(20, round(nos * 4 * 0.05 * num_classes))
    if mode == "classwise":
        return max(2, round(nos * 4 * 0.05))
    raise ValueError(f"unknown mode {mode!r}")


def _profile_xi(theta, e):
    return np.log1p(-theta * e).mean()


def _profile_loglik(theta, e):
    """Log-likelihood of the GPD profiled over the scale, at theta=-xi/mu."""
    n = e.size
    xi = _profile_xi(theta, e)
    if xi == 0.0:
        mu = e.mean()
        return -n * (np.log(mu) + 1.0), 0.0, mu
    mu = -xi / theta
    return -n * (np.log(mu) + xi + 1.0), xi, mu


def _profile_dll(theta, e):
    """Sign-carrying derivative of the profile log-likelihood."""
    xi = _profile_xi(theta, e)
    dxi = (-e / (1.0 - theta * e)).mean()
    if xi == 0.0:
        return 0.0
    return -(dxi / xi - 1.0 / theta + dxi)


def fit_gpd(losses, tau) -> GpdModel:
    """Fit the tail of a loss sample by profile maximum likelihood.

    The exceedance threshold w is the (tau+1)-th largest loss (the
    minimum when tau equals the sample count); the top-tau excesses over
    w feed a one-dimensional search over theta = -xi/mu: a 200-point grid
    bracketed by the excess extrema locates sign changes of the profile
    derivative, each refined by bisection. Degenerate tails fall back to
    the exponential sub-family (xi = 0).
    """
    losses = np.asarray(losses, dtype=np.float64).ravel()
    if tau < 2:
        raise ValueError(f"tail size must be >= 2, got {tau}")
    if losses.size < tau:
        raise ValueError(f"need at least tau={tau} losses, got {losses.size}")
    desc = np.sort(losses)[::-1]
    w = float(desc[tau]) if losses.size > tau else float(desc[-1])
    e = desc[:tau] - w

    emax = e.max()
    if emax <= 1e-12:
        return GpdModel(0.0, 1e-12, w, tau)

    mean_e = e.mean()
    emin_pos = e[e > 0].min()
    theta_hi = (1.0 - 1e-9) / emax
    theta_lo = -1.0 / max(emin_pos, mean_e / 64.0)
    grid = np.linspace(theta_lo, theta_hi, 200)
    grid = grid[np.abs(grid) > 1e-300]

    derivs = np.array([_profile_dll(t, e) for t in grid])
    candidates = []
    for a, b, da, db in zip(grid[:-1], grid[1:], derivs[:-1], derivs[1:]):
        if not (np.isfinite(da) and np.isfinite(db)) or da * db >= 0:
            continue
        lo, hi, dlo = a, b, da
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            dm = _profile_dll(mid, e)
            if dm == 0.0:
                lo = hi = mid
                break
            if (dm > 0) == (dlo > 0):
                lo, dlo = mid, dm
            else:
                hi = mid
        candidates.append(0.5 * (lo + hi))

    # exponential sub-family (theta -> 0) is always a candidate
    ll0 = -e.size * (np.log(mean_e) + 1.0)
    best = (ll0, 0.0, mean_e)
    for theta in candidates:
        ll, xi, mu = _profile_loglik(theta, e)
        if np.isfinite(ll) and ll > best[0] and mu > 0:
            best = (ll, xi, mu)
    _, xi, mu = best
    if mu <= 1e-12:
        xi, mu = 0.0, 1e-12
    return GpdModel(float(xi), float(mu), w, tau)


def gpd_cdf(model: GpdModel, e):
    """Tail CDF of an excess e >= 0, clamped to [0,1]."""
    e = np.maximum(np.asarray(e, dtype=np.float64), 0.0)
    if model.xi == 0.0:
        out = -np.expm1(-e / model.mu)
    else:
        arg = 1.0 + model.xi * e / model.mu
        with np.errstate(divide="ignore", over="ignore"):
            out = np.where(arg > 0.0,
                           1.0 - np.power(np.maximum(arg, 1e-300),
                                          -1.0 / model.xi),
                           1.0)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def unknown_score(model: GpdModel, v):
    """0 at or below the exceedance threshold, else the tail CDF of v-w."""
    v = np.asarray(v, dtype=np.float64)
    score = np.where(v > model.w, gpd_cdf(model, v - model.w), 0.0)
    return float(score) if score.ndim == 0 else score


def decide(closed_label, score, policy: RejectionPolicy):
    """Keep the closed label below z; scores at or above z become UNKNOWN."""
    if score >= policy.z:
        return UNKNOWN
    return closed_label


def fit_classwise(losses_by_class, nos) -> ClasswiseGpd:
    """Fit one tail model per training class with the class-wise tau.

    Classes whose loss group is too small to model (fewer than
    max(2, tau) values) are recorded and fall back to the global model
    at prediction time.
    """
    tau = tail_size(nos, 1, "classwise")
    models: dict[int, GpdModel] = {}
    fallback: list[int] = []
    for cls in sorted(losses_by_class):
        group = np.asarray(losses_by_class[cls]).ravel()
        if group.size < max(2, tau):
            fallback.append(int(cls))
            continue
        models[int(cls)] = fit_gpd(group, tau)
    return ClasswiseGpd(models=models, fallback_classes=fallback)


def softmax_threshold_baseline(probs, threshold=0.5):
    """Argmax label, or UNKNOWN when the top probability is below threshold."""
    probs = np.asarray(probs)
    if probs.ndim == 1:
        return UNKNOWN if probs.max() < threshold else int(probs.argmax()) + 1
    labels = probs.argmax(axis=1) + 1
    return np.where(probs.max(axis=1) < threshold, UNKNOWN, labels)


def save_gpd_models(path, global_model: GpdModel,
                    classwise: ClasswiseGpd | None = None):
    """One text line per model: id, xi, mu, w, tau (9 significant digits)."""
    def line(key, m):
        return f"{key} {m.xi:.9g} {m.mu:.9g} {m.w:.9g} {m.tau}\n"

    with open(path, "w") as f:
        f.write(line("global", global_model))
        if classwise is not None:
            for cls in sorted(classwise.models):
                f.write(line(str(cls), classwise.models[cls]))


def load_gpd_models(path):
    """Returns (global GpdModel, ClasswiseGpd of any per-class lines)."""
    global_model = None
    models: dict[int, GpdModel] = {}
    with open(path) as f:
        for ln in f:
            parts = ln.split()
            if not parts:
                continue
            if len(parts) != 5:
                raise ValueError(f"bad model line in {path}: {ln!r}")
            key, xi, mu, w, tau = parts
            m = GpdModel(float(xi), float(mu), float(w), int(tau))
            if key == "global":
                global_model = m
            else:
                models[int(key)] = m
    if global_model is None:
        raise ValueError(f"no global model in {path}")
    return global_model, ClasswiseGpd(models=models)
