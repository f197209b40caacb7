"""Multimodal exponentially-modified Gaussian oscillator (MEMGO) echo model.

One echo component is

    f(t) = alpha * exp(-(t-mu)^2 / (2 sigma^2))
                 * (1 + erf(eta (t-mu) / (sigma sqrt 2)))
                 * cos(omega (t-mu) + phi)

with the time axis in samples. A channel is modelled as a sum of components
and fitted with damped least squares.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.signal import resample
from scipy.special import erf

from .exceptions import FitDivergedError, ValidationError
from .types import AcquisitionConfig

PARAM_NAMES = ("alpha", "mu", "sigma", "eta", "omega", "phi")
_SQRT2 = math.sqrt(2.0)
_SQRT2_PI = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class EchoComponent:
    alpha: float
    mu: float
    sigma: float
    eta: float = 0.0
    omega: float = math.pi / 4
    phi: float = 0.0

    def __post_init__(self):
        values = self.as_array()
        if not np.all(np.isfinite(values)):
            raise ValidationError(f"echo component has non-finite fields: {self}")
        if self.sigma <= 0:
            raise ValidationError(f"sigma must be positive, got {self.sigma}")
        if self.omega <= 0:
            raise ValidationError(f"omega must be positive, got {self.omega}")

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.mu, self.sigma, self.eta, self.omega, self.phi],
                        dtype=float)

    @classmethod
    def from_array(cls, values) -> "EchoComponent":
        return cls(*(float(v) for v in values))

    def canonical(self) -> "EchoComponent":
        """Same waveform with ``alpha >= 0`` and ``phi`` wrapped to (-pi, pi]."""
        alpha, phi = self.alpha, self.phi
        if alpha < 0:
            alpha, phi = -alpha, phi + math.pi
        phi = math.pi - (math.pi - phi) % (2 * math.pi)
        return replace(self, alpha=alpha, phi=phi)


@dataclass(frozen=True)
class ChannelEchoSet:
    channel_index: int
    components: tuple
    fit_residual: float
    loss_history: tuple = ()

    def __post_init__(self):
        comps = tuple(self.components)
        mus = [c.mu for c in comps]
        if any(b <= a for a, b in zip(mus, mus[1:])):
            raise ValidationError("components must be strictly ordered by mu")
        object.__setattr__(self, "components", comps)

    def __len__(self):
        return len(self.components)

    @property
    def mus(self) -> np.ndarray:
        return np.array([c.mu for c in self.components])


@dataclass(frozen=True)
class FitConfig:
    """Detection and Levenberg-Marquardt settings.

    Defaults follow the standard Marquardt schedule; nothing here is taken
    from measured data. ``noise_floor_factor`` raises the peak floor to a
    multiple of the median envelope and ``noise_stop`` ends iterations whose
    loss gain drops below that multiple of the estimated noise variance;
    both are off by default and matter only for noisy traces. ``geodesic``
    adds a second-order correction to every damped step.
    """

    damping_init: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 10.0
    max_iter: int = 50
    rel_tol: float = 1e-8
    analytic_jacobian: bool = True
    fd_step: float = 1e-6
    num_cycles: float = 3.0
    sigma_fraction: float = 0.2
    gradient_factor: float = 4.0
    gradient_floor: float = 0.02
    min_peak_ratio: float = 0.1
    noise_floor_factor: float = 0.0
    noise_stop: float = 0.0
    geodesic: bool = True
    geodesic_step: float = 0.1
    geodesic_ratio: float = 0.75
    max_components: int = 32
    upsample: int = 8
    refit_rounds: int = 2
    window_sigmas: float = 8.0


# -- model evaluation -----------------------------------------------------

def _as_param_matrix(components) -> np.ndarray:
    if isinstance(components, np.ndarray):
        return components.reshape(-1, 6).astype(float)
    if isinstance(components, EchoComponent):
        return components.as_array()[None, :]
    if len(components) == 0:
        return np.zeros((0, 6))
    return np.vstack([c.as_array() for c in components])


def _terms(p: np.ndarray, t: np.ndarray):
    alpha, mu, sigma, eta, omega, phi = (p[:, i, None] for i in range(6))
    dt = t[None, :] - mu
    u = dt / sigma
    gauss = np.exp(-0.5 * u * u)
    skew = 1.0 + erf(eta * u / _SQRT2)
    arg = omega * dt + phi
    return alpha, sigma, eta, omega, dt, u, gauss, skew, np.cos(arg), np.sin(arg)


def memgo_eval(component: EchoComponent, t) -> np.ndarray:
    """Evaluate one echo component on the sample grid ``t``."""
    t = np.asarray(t, dtype=float)
    if component.sigma <= 0:
        raise ValidationError("sigma must be positive")
    alpha, _, _, _, _, _, gauss, skew, cos, _ = _terms(component.as_array()[None, :], t.ravel())
    return (alpha * gauss * skew * cos)[0].reshape(t.shape)


def memgo_sum(components, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    p = _as_param_matrix(components)
    if len(p) == 0:
        return np.zeros_like(t)
    alpha, _, _, _, _, _, gauss, skew, cos, _ = _terms(p, t.ravel())
    return (alpha * gauss * skew * cos).sum(axis=0).reshape(t.shape)


def memgo_loss(components, waveform, t=None) -> float:
    waveform = np.asarray(waveform, dtype=float)
    if t is None:
        t = np.arange(len(waveform), dtype=float)
    r = waveform - memgo_sum(components, t)
    return float(r @ r)


def memgo_jacobian(params, t) -> np.ndarray:
    """Analytic derivative of the summed model, shape ``(T, 6K)``.

    Columns follow the parameter order alpha, mu, sigma, eta, omega, phi for
    each component in turn.
    """
    p = _as_param_matrix(params)
    t = np.asarray(t, dtype=float)
    alpha, sigma, eta, omega, dt, u, gauss, skew, cos, sin = _terms(p, t)
    dskew_du = eta * _SQRT2_PI * np.exp(-0.5 * (eta * u) ** 2)
    # d(gauss*skew)/du
    denv_du = -u * gauss * skew + gauss * dskew_du
    env = gauss * skew
    jac = np.empty((len(p), 6, len(t)))
    jac[:, 0] = env * cos
    jac[:, 1] = alpha * (-denv_du / sigma * cos + env * omega * sin)
    jac[:, 2] = alpha * (-denv_du * u / sigma) * cos
    jac[:, 3] = alpha * gauss * (u * _SQRT2_PI * np.exp(-0.5 * (eta * u) ** 2)) * cos
    jac[:, 4] = -alpha * env * dt * sin
    jac[:, 5] = -alpha * env * sin
    return jac.reshape(6 * len(p), len(t)).T


def memgo_jacobian_fd(params, t, step: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian, kept for verification."""
    p = _as_param_matrix(params).ravel()
    t = np.asarray(t, dtype=float)
    cols = []
    for i in range(len(p)):
        h = step * max(1.0, abs(p[i]))
        up, dn = p.copy(), p.copy()
        up[i] += h
        dn[i] -= h
        cols.append((memgo_sum(up, t) - memgo_sum(dn, t)) / (2 * h))
    return np.column_stack(cols)


# -- envelope and initial estimates --------------------------------------

def analytic_signal(x) -> np.ndarray:
    """Analytic signal by zeroing negative frequencies (any length)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    spec = np.fft.fft(x, axis=-1)
    h = np.zeros(n)
    if n % 2 == 0:
        h[0] = h[n // 2] = 1.0
        h[1:n // 2] = 2.0
    else:
        h[0] = 1.0
        h[1:(n + 1) // 2] = 2.0
    return np.fft.ifft(spec * h, axis=-1)


def envelope(x) -> np.ndarray:
    return np.abs(analytic_signal(x))


def _detect_peaks(env: np.ndarray, fit_config: FitConfig, floor_height: float):
    """Return (index, height) of envelope peaks preceded by a steep rise."""
    grad = np.diff(env)
    if not np.any(grad > 0):
        return []
    thr = max(fit_config.gradient_factor * np.median(np.abs(grad)),
              fit_config.gradient_floor * grad.max())
    above = grad >= thr
    onsets = np.flatnonzero(above[1:] & ~above[:-1]) + 1
    if above[0]:
        onsets = np.r_[0, onsets]
    peaks = []
    last = -1
    for start in onsets:
        if start <= last:
            continue
        falling = np.flatnonzero(grad[start:] <= 0)
        stop = start + falling[0] if len(falling) else len(env) - 1
        last = stop
        if env[stop] >= floor_height:
            peaks.append((stop, env[stop]))
    return peaks


def _refine_peak(env_up: np.ndarray, idx: int, factor: int) -> float:
    """Sub-sample peak position from an upsampled envelope."""
    lo = max(0, idx * factor - factor)
    hi = min(len(env_up), idx * factor + factor + 1)
    return float(lo + np.argmax(env_up[lo:hi])) / factor


def initial_toa_estimates(waveform, config: AcquisitionConfig,
                          fit_config: FitConfig = FitConfig(),
                          reference_height: float | None = None) -> list:
    """Initial echo components from the Hilbert envelope.

    A peak is kept when the envelope gradient climbs above a robust
    threshold before it and the peak height clears both ``min_peak_ratio``
    of ``reference_height`` (the waveform's own envelope maximum by
    default) and ``noise_floor_factor`` times the median envelope.
    """
    y = np.asarray(waveform, dtype=float)
    if y.ndim != 1 or len(y) < 16:
        raise ValidationError("waveform must be 1-D with at least 16 samples")
    if not np.all(np.isfinite(y)):
        raise ValidationError("waveform must be finite")
    if not np.any(y):
        return []
    env = envelope(y)
    ref = env.max() if reference_height is None else reference_height
    # the median envelope tracks the noise level when echoes are sparse
    floor = max(fit_config.min_peak_ratio * ref, fit_config.noise_floor_factor * np.median(env))
    peaks = _detect_peaks(env, fit_config, floor)
    if not peaks:
        return []
    if len(peaks) > fit_config.max_components:
        peaks = sorted(peaks, key=lambda ph: -ph[1])[:fit_config.max_components]
        peaks.sort()
    factor = max(1, int(fit_config.upsample))
    env_up = envelope(resample(y, len(y) * factor)) if factor > 1 else env
    spp = config.samples_per_period
    sigma0 = fit_config.sigma_fraction * fit_config.num_cycles * spp
    omega0 = 2 * math.pi / spp
    comps = []
    for idx, height in peaks:
        mu = _refine_peak(env_up, idx, factor) if factor > 1 else float(idx)
        if comps and mu - comps[-1].mu < 1e-6:
            continue
        comps.append(EchoComponent(float(height), mu, sigma0, 0.0, omega0, 0.0))
    return comps


# -- Levenberg-Marquardt ------------------------------------------------

def _valid(p: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(p)) and np.all(p[:, 2] > 0) and np.all(p[:, 4] > 0))


def _geodesic_correction(p, step, t, model, jac, system, fit_config: FitConfig):
    """Second-order step correction along the curved solution valley.

    The model's second directional derivative along ``step`` is taken by a
    finite difference and projected through the damped normal equations.
    Corrections larger than ``geodesic_ratio`` times half the step are
    discarded. ``model`` is the model evaluated at ``p``.
    """
    h = fit_config.geodesic_step
    probe = p + h * step.reshape(p.shape)
    if not _valid(probe):
        return np.zeros_like(step)
    fvv = 2.0 / h * ((memgo_sum(probe, t) - model) / h - jac @ step)
    acc = -0.5 * np.linalg.solve(system, jac.T @ fvv)
    if 2 * np.linalg.norm(acc) > fit_config.geodesic_ratio * np.linalg.norm(step):
        return np.zeros_like(step)
    return acc


def levenberg_marquardt(y, t, p0, fit_config: FitConfig = FitConfig(), abs_tol: float = 0.0):
    """Minimise ``||y - memgo_sum(p, t)||^2`` starting from ``p0``.

    Returns ``(params, loss_history)`` where the history holds the loss of
    every accepted iterate, so it is non-increasing by construction.
    Iteration stops once an accepted step improves the loss by less than
    ``rel_tol`` relative or ``abs_tol`` absolute. With ``geodesic`` each
    step gets a second-order correction, which speeds up progress along the
    curved mu/eta/phi valley of weakly skewed echoes.
    """
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    p = _as_param_matrix(p0).copy()
    r = y - memgo_sum(p, t)
    loss = float(r @ r)
    history = [loss]
    lam = fit_config.damping_init
    scale = max(float(y @ y), np.finfo(float).tiny)
    jac_fn = memgo_jacobian if fit_config.analytic_jacobian else (
        lambda q, tt: memgo_jacobian_fd(q, tt, fit_config.fd_step))
    jac = jac_fn(p, t)
    for _ in range(fit_config.max_iter):
        if loss <= 1e-28 * scale:
            break
        jtj = jac.T @ jac
        grad = jac.T @ r
        diag = np.diag(jtj).copy()
        diag = np.maximum(diag, 1e-12 * max(diag.max(), 1e-300))
        system = jtj + lam * np.diag(diag)
        try:
            step = np.linalg.solve(system, grad)
            if fit_config.geodesic:
                step = step + _geodesic_correction(p, step, t, y - r, jac, system, fit_config)
        except np.linalg.LinAlgError:
            lam *= fit_config.damping_up
            continue
        trial = p + step.reshape(p.shape)
        if not np.all(np.isfinite(trial)):
            raise FitDivergedError("non-finite parameters during fit", last_params=p)
        if not _valid(trial):
            lam *= fit_config.damping_up
            continue
        r_trial = y - memgo_sum(trial, t)
        loss_trial = float(r_trial @ r_trial)
        if not np.isfinite(loss_trial):
            raise FitDivergedError("non-finite loss during fit", last_params=p)
        if loss_trial < loss:
            gain = loss - loss_trial
            improvement = gain / loss
            p, r, loss = trial, r_trial, loss_trial
            history.append(loss)
            lam = max(lam / fit_config.damping_down, 1e-15)
            if improvement < fit_config.rel_tol or gain < abs_tol:
                break
            jac = jac_fn(p, t)
        else:
            lam *= fit_config.damping_up
            if lam > 1e16:
                break
    return p, history


def _sorted_components(p: np.ndarray) -> list:
    comps = [EchoComponent.from_array(row).canonical() for row in p]
    comps.sort(key=lambda c: (c.mu, -c.alpha))
    out = []
    for c in comps:
        # exact mu ties keep the larger amplitude; ordering must stay strict
        if out and c.mu <= out[-1].mu:
            continue
        out.append(c)
    return out


def fit_memgo(waveform, initial: Sequence[EchoComponent],
              config: AcquisitionConfig | None = None,
              fit_config: FitConfig = FitConfig(),
              channel_index: int = 0, t=None) -> ChannelEchoSet:
    """Fit all components jointly to one waveform.

    ``t`` defaults to the sample index grid of ``waveform``.
    """
    if len(initial) == 0:
        raise ValidationError("fit_memgo needs at least one initial component")
    y = np.asarray(waveform, dtype=float)
    t = np.arange(len(y), dtype=float) if t is None else np.asarray(t, dtype=float)
    p, history = levenberg_marquardt(y, t, _as_param_matrix(list(initial)), fit_config)
    comps = _sorted_components(p)
    return ChannelEchoSet(channel_index, tuple(comps), memgo_loss(comps, y, t), tuple(history))


# -- whole-channel extraction -------------------------------------------

def _group_windows(comps, fit_config: FitConfig, n: int):
    """Partition components into groups with overlapping support windows."""
    spans = []
    for c in sorted(comps, key=lambda c: c.mu):
        half = fit_config.window_sigmas * c.sigma * (1.0 + 0.5 * abs(c.eta))
        lo, hi = max(0, int(math.floor(c.mu - half))), min(n, int(math.ceil(c.mu + half)) + 1)
        if spans and lo <= spans[-1][1]:
            spans[-1][1] = max(spans[-1][1], hi)
            spans[-1][2].append(c)
        else:
            spans.append([lo, hi, [c]])
    return spans


def _fit_windows(y, comps, fit_config: FitConfig, abs_tol: float = 0.0):
    n = len(y)
    fitted = []
    for lo, hi, group in _group_windows(comps, fit_config, n):
        t = np.arange(lo, hi, dtype=float)
        p0 = _as_param_matrix(group)
        try:
            p, _ = levenberg_marquardt(y[lo:hi], t, p0, fit_config, abs_tol)
        except FitDivergedError as err:
            p = err.last_params
        for row in p:
            # components that wandered outside their window are unreliable
            if lo <= row[1] < hi and row[2] < (hi - lo):
                fitted.append(row)
    return np.array(fitted).reshape(-1, 6)


def _noise_variance(residual) -> float:
    """Robust per-sample noise variance from the median absolute deviation."""
    mad = np.median(np.abs(residual - np.median(residual)))
    return float((1.4826 * mad) ** 2)


def extract_echoes(waveform, config: AcquisitionConfig,
                   fit_config: FitConfig = FitConfig(),
                   channel_index: int = 0) -> ChannelEchoSet:
    """Detect and fit every echo on one channel.

    Separated echoes are fitted in independent windows. Residual peaks left
    after a fit seed additional components, which handles echoes that
    overlapped too much to show as separate envelope peaks.
    """
    y = np.asarray(waveform, dtype=float)
    t = np.arange(len(y), dtype=float)
    init = initial_toa_estimates(y, config, fit_config)
    if not init:
        return ChannelEchoSet(channel_index, (), float(y @ y))
    ref_height = envelope(y).max()
    abs_tol = fit_config.noise_stop * _noise_variance(y)
    p = _fit_windows(y, init, fit_config, abs_tol)
    for _ in range(fit_config.refit_rounds):
        residual = y - memgo_sum(p, t)
        extra = initial_toa_estimates(residual, config, fit_config, reference_height=ref_height)
        if not extra or len(p) + len(extra) > fit_config.max_components:
            break
        candidate = _fit_windows(y, _sorted_components(p) + extra, fit_config, abs_tol)
        if memgo_loss(candidate, y, t) >= memgo_loss(p, y, t):
            break
        p = candidate
    min_alpha = 0.5 * fit_config.min_peak_ratio * ref_height
    comps = [c for c in _sorted_components(p) if c.alpha >= min_alpha]
    return ChannelEchoSet(channel_index, tuple(comps), memgo_loss(comps, y, t))
