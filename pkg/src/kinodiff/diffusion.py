"""Diffusion core: noise schedules, forward corruption, posterior algebra,
reverse sampling (ancestral and eta-parameterized), the composite training
objective, the training loop, and partial-noising reconstruction.

Sampling-time code works on plain numpy arrays and treats the denoiser as a
callable `model(x_t, abar, ctx_feats, ctx_mask) -> (eps_hat, kin)`; the
training loop builds gradient graphs through the same loss functions, which
accept engine tensors and numpy arrays interchangeably.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import engine as en
from .engine import Rng, Tensor
from .optim import AdamState, OptimError, adam_step


class DiffusionError(ValueError):
    pass


# -- noise schedule ------------------------------------------------------


@dataclass
class NoiseSchedule:
    """beta/alpha/alpha-bar arrays; alpha_bar has T+1 entries with
    alpha_bar[0] = 1 so index t matches diffusion step t."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        if self.T < 1 or len(self.beta) != self.T or len(self.alpha_bar) != self.T + 1:
            raise DiffusionError("schedule arrays inconsistent with T")
        if np.any(self.beta <= 0.0) or np.any(self.beta >= 1.0):
            raise DiffusionError("beta values must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0.0):
            raise DiffusionError("alpha_bar must be strictly decreasing")

    def digest(self):
        h = hashlib.sha256()
        h.update(np.int64(self.T).tobytes())
        h.update(self.beta.tobytes())
        return h.hexdigest()[:16]


def linear_schedule(T, beta1=1e-4, betaT=0.02):
    """Linear beta ramp; computed in fp64 so alpha-bar products stay tight."""
    if not (0.0 < beta1 <= betaT < 1.0):
        raise DiffusionError(f"invalid beta bounds ({beta1}, {betaT})")
    if T < 1:
        raise DiffusionError("T must be >= 1")
    beta = np.linspace(beta1, betaT, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.empty(T + 1, dtype=np.float64)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def desk_schedule(T=50):
    """Short schedule with the beta endpoints scaled by 1000/T so the
    terminal alpha-bar stays near the full-length default."""
    scale = 1000.0 / T
    return linear_schedule(T, 1e-4 * scale, min(0.02 * scale, 0.999))


@dataclass
class SamplerConfig:
    """Reverse-process knobs: eta scales the per-step noise (0 keeps the
    chain deterministic), stride skips steps, t_star is the partial-noising
    depth for reconstruction."""

    eta: float = 0.0
    stride: int = 4
    t_star: int | None = None

    def __post_init__(self):
        if self.eta < 0.0:
            raise DiffusionError("eta must be >= 0")
        if self.stride < 1:
            raise DiffusionError("stride must be >= 1")
        if self.t_star is not None and self.t_star < 0:
            raise DiffusionError("t_star must be >= 0")


@dataclass
class LossWeights:
    gamma1: float = 1.0
    gamma2: float = 1.0
    gamma3: float = 0.1
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    w4: float = 1.0

    def __post_init__(self):
        for name in ("gamma1", "gamma2", "gamma3", "w1", "w2", "w3", "w4"):
            if getattr(self, name) < 0.0:
                raise DiffusionError(f"{name} must be >= 0")


# -- forward process and algebra ------------------------------------------


def sample_t_alpha_bar(schedule, rng):
    """Piecewise rule: t uniform on {1..T}, then alpha-bar uniform on the
    segment [alpha_bar[t], alpha_bar[t-1]]."""
    t = int(rng.integers(1, schedule.T + 1))
    lo = schedule.alpha_bar[t]
    hi = schedule.alpha_bar[t - 1]
    return t, float(rng.uniform(lo, hi))


def q_sample(x0, abar, eps):
    """Closed-form forward corruption x_t = sqrt(ab) x0 + sqrt(1-ab) eps.

    Works on numpy arrays or engine tensors; `abar` may be a scalar or a
    broadcastable array of per-sample values.
    """
    abar = np.asarray(abar, dtype=np.float64)
    return x0 * np.sqrt(abar) + eps * np.sqrt(1.0 - abar)


def posterior_params(x0, xt, t, schedule):
    """Mean and variance of the forward-process posterior q(x_{t-1} | x0, x_t)."""
    if not (1 <= t <= schedule.T):
        raise DiffusionError(f"t={t} outside [1, {schedule.T}]")
    ab_t = schedule.alpha_bar[t]
    ab_prev = schedule.alpha_bar[t - 1]
    a_t = schedule.alpha[t - 1]
    denom = 1.0 - ab_t
    c_x0 = np.sqrt(ab_prev) * (1.0 - a_t) / denom
    c_xt = np.sqrt(a_t) * (1.0 - ab_prev) / denom
    mu = c_x0 * np.asarray(x0) + c_xt * np.asarray(xt)
    var = (1.0 - ab_prev) * (1.0 - a_t) / denom
    return mu, var


def predict_x0(xt, eps_hat, abar):
    """Invert the closed-form corruption: x0_hat = (x_t - sqrt(1-ab) eps) / sqrt(ab)."""
    abar = np.asarray(abar, dtype=np.float64)
    if np.any(abar <= 0.0) or np.any(abar > 1.0):
        raise DiffusionError("abar must lie in (0, 1]")
    return xt * (1.0 / np.sqrt(abar)) - eps_hat * (np.sqrt(1.0 - abar) / np.sqrt(abar))


def _tilde_beta(schedule, t, t_prev):
    """Posterior variance generalized to strided jumps; equals the
    single-step posterior variance when t_prev = t-1."""
    ab_t = schedule.alpha_bar[t]
    ab_prev = schedule.alpha_bar[t_prev]
    return (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)


def reverse_step(xt, eps_hat, t, schedule, mode="ancestral", rng=None,
                 eta=0.0, t_prev=None):
    """One reverse-diffusion update from step t to t_prev (default t-1).

    "ancestral": single-step posterior refinement with fresh noise for
    t > 1 and none at t = 1 (requires stride 1).
    "eta": deterministic-to-stochastic interpolation
        x_prev = sqrt(ab_prev) x0_hat + sqrt(1 - ab_prev - sigma^2) eps_hat
                 + sigma z,  sigma^2 = eta * tilde_beta.
    """
    if t_prev is None:
        t_prev = t - 1
    if not (0 <= t_prev < t <= schedule.T):
        raise DiffusionError(f"invalid step pair t={t}, t_prev={t_prev}")
    if mode == "ancestral":
        if t_prev != t - 1:
            raise DiffusionError("ancestral mode requires stride 1")
        a_t = schedule.alpha[t - 1]
        ab_t = schedule.alpha_bar[t]
        mean = (xt - (1.0 - a_t) / math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(a_t)
        if t > 1:
            if rng is None:
                raise DiffusionError("ancestral mode needs an rng for t > 1")
            z = rng.normal(np.shape(xt))
            return mean + math.sqrt(1.0 - a_t) * z
        return mean
    if mode == "eta":
        ab_t = schedule.alpha_bar[t]
        ab_prev = schedule.alpha_bar[t_prev]
        sigma2 = eta * _tilde_beta(schedule, t, t_prev)
        if sigma2 > 1.0 - ab_prev + 1e-15:
            raise DiffusionError(f"eta={eta} makes sigma^2 exceed 1 - alpha_bar_prev")
        x0_hat = predict_x0(xt, eps_hat, ab_t)
        out = math.sqrt(ab_prev) * x0_hat + math.sqrt(max(1.0 - ab_prev - sigma2, 0.0)) * eps_hat
        if sigma2 > 0.0:
            if rng is None:
                raise DiffusionError("eta > 0 needs an rng")
            out = out + math.sqrt(sigma2) * rng.normal(np.shape(xt))
        return out
    raise DiffusionError(f"unknown reverse mode {mode!r}")


# -- losses ---------------------------------------------------------------


def _mean_all(x):
    return x.mean() if isinstance(x, Tensor) else float(np.mean(x))


def simple_loss(eps, eps_hat):
    """Mean squared error between real and predicted noise."""
    d = eps - eps_hat
    return _mean_all(d * d)


def recon_loss(x0_hat, x0):
    """Cumulative squared position error over all steps.

    Uses the first two feature channels (x, y). Sums over time for one
    trajectory; batched input averages the per-trajectory sums.
    """
    d = x0_hat[..., :2] - x0[..., :2]
    sq = d * d
    if isinstance(sq, Tensor):
        total = sq.sum()
        batch = int(np.prod(sq.shape[:-2])) if len(sq.shape) > 2 else 1
        return total * (1.0 / batch)
    total = np.sum(sq)
    batch = int(np.prod(sq.shape[:-2])) if sq.ndim > 2 else 1
    return float(total / batch)


def physics_loss(x0_hat, kin, normalizer, dt, weights):
    """Weighted mean-square violations of the bicycle-model ODE.

    `x0_hat` is the reconstructed (…, n, 4) feature block in normalized
    units; `kin` is the (…, n, 2) kinematic head (curvature 1/m, compass
    convention, and acceleration m/s^2) already in physical units. The
    heading residual is scaled by the fleet's mid-range speed to balance
    units. Returns an engine tensor when the inputs are tensors.
    """
    n = (x0_hat.shape[-2] if isinstance(x0_hat, Tensor) else np.shape(x0_hat)[-2])
    if n < 3:
        raise DiffusionError("physics loss needs >= 3 steps")
    scale, offset = normalizer.affine()
    dt = np.asarray(dt, dtype=np.float64)
    inv2dt = 1.0 / (2.0 * dt)
    if inv2dt.ndim > 0:
        inv2dt = inv2dt.reshape(inv2dt.shape + (1,))

    x = x0_hat[..., 0] * scale[0] + offset[0]
    y = x0_hat[..., 1] * scale[1] + offset[1]
    v = x0_hat[..., 2] * scale[2] + offset[2]
    psi = x0_hat[..., 3] * scale[3] + offset[3]
    kappa = kin[..., 0]
    acc = kin[..., 1]

    mid = (Ellipsis, slice(1, -1))
    dx = (x[..., 2:] - x[..., :-2]) * inv2dt
    dy = (y[..., 2:] - y[..., :-2]) * inv2dt
    dv = (v[..., 2:] - v[..., :-2]) * inv2dt
    dpsi_raw = psi[..., 2:] - psi[..., :-2]
    dpsi = (en.wrap_angle(dpsi_raw) if isinstance(dpsi_raw, Tensor)
            else np.pi - np.mod(np.pi - dpsi_raw, 2.0 * np.pi)) * inv2dt

    sin_psi = en.sin(psi[mid]) if isinstance(psi, Tensor) else np.sin(psi[mid])
    cos_psi = en.cos(psi[mid]) if isinstance(psi, Tensor) else np.cos(psi[mid])
    # compass heading: east component rides on sin, north on cos
    r1 = dx - v[mid] * sin_psi
    r2 = dy - v[mid] * cos_psi
    r3 = dpsi - v[mid] * kappa[mid]
    r4 = dv - acc[mid]

    v_bar = abs(float(offset[2]))
    if v_bar == 0.0:
        v_bar = 1.0
    total = (weights.w1 * _mean_all(r1 * r1)
             + weights.w2 * _mean_all(r2 * r2)
             + weights.w3 * _mean_all(r3 * r3) * (v_bar * v_bar)
             + weights.w4 * _mean_all(r4 * r4))
    return total


def total_loss(vlb, rec, phy, weights):
    """gamma1 * L_vlb + gamma2 * L_rec + gamma3 * L_phy."""
    return vlb * weights.gamma1 + rec * weights.gamma2 + phy * weights.gamma3


# -- training ---------------------------------------------------------------


@dataclass
class TrainResult:
    params: dict
    opt_state: AdamState
    trace: list            # per-step dicts: step, total, vlb, rec, phy
    step: int
    aborted: bool = False
    abort_reason: str | None = None


def train(canons, contexts, normalizer, schedule, model_config, weights, rng,
          epochs=None, steps=None, batch_size=16, lr=1e-3, lr_final=None,
          trim_frac=0.0, params=None, opt_state=None, start_step=0,
          checkpoint_every=0, checkpoint_cb=None):
    """Optimize the denoiser on normalized trajectories.

    Per step: draw a batch, sample a (t, alpha_bar) pair per trajectory via
    the piecewise rule, corrupt with fresh noise, run the denoiser with
    neighbor context, and descend the combined objective. A non-finite loss
    aborts immediately, leaving the last finite parameters intact.

    `trim_frac` caps the per-batch fraction of samples that may be dropped
    before the gradient step; a sample is dropped when its noise loss runs
    far above the running average for its noise level. With unlabeled
    anomaly-contaminated data this keeps the model from fitting the
    contaminants, which would erase their reconstruction-error signal at
    detection time.
    """
    from . import denoiser as dn

    n_data = len(canons)
    if n_data == 0:
        raise DiffusionError("empty training set")
    if steps is None:
        if epochs is None:
            raise DiffusionError("give either epochs or steps")
        steps = int(epochs * math.ceil(n_data / batch_size))

    feats = np.stack([c.features for c in canons])
    dts = np.array([c.dt for c in canons])
    from .geodata import pad_contexts
    ctx_feats, ctx_mask = pad_contexts(contexts, k_max=model_config.max_context)

    if params is None:
        params = dn.init_params(model_config, rng.derive("init"))
    if opt_state is None:
        opt_state = AdamState(params, lr=lr)
    else:
        opt_state.lr = lr

    trace = []
    b = min(batch_size, n_data)
    use_phy = weights.gamma3 > 0.0
    use_rec = weights.gamma2 > 0.0

    # running mean of the noise loss per alpha-bar decile, for the
    # outlier-trimming rule
    ema = np.ones(10)
    ema_warm = np.zeros(10, dtype=bool)

    for local in range(steps):
        step = start_step + local + 1
        if lr_final is not None and steps > 1:
            opt_state.lr = lr + (lr_final - lr) * (local / (steps - 1))
        idx = np.sort(rng.choice(n_data, size=b, replace=False))
        pairs = [sample_t_alpha_bar(schedule, rng) for _ in range(b)]
        abar = np.array([p[1] for p in pairs])
        eps = rng.normal((b,) + feats.shape[1:])
        x0b = feats[idx]
        xt = q_sample(x0b, abar[:, None, None], eps)

        eps_hat, kin = dn.denoise_forward(params, model_config, xt, abar,
                                          ctx_feats[idx], ctx_mask[idx])
        keep = np.arange(b)
        if trim_frac > 0.0:
            per = ((eps - eps_hat) * (eps - eps_hat)).mean(axis=(1, 2)).data
            bins = np.clip((abar * 10).astype(int), 0, 9)
            ratio = np.where(ema_warm[bins], per / ema[bins], 1.0)
            order = np.argsort(ratio)[::-1]
            max_drop = int(math.ceil(trim_frac * b))
            drop = [i for i in order[:max_drop] if ratio[i] > 2.0]
            if drop:
                keep = np.sort(np.setdiff1d(keep, drop))
            for i in keep:
                if ema_warm[bins[i]]:
                    ema[bins[i]] = 0.99 * ema[bins[i]] + 0.01 * per[i]
                else:
                    ema[bins[i]] = per[i]
                    ema_warm[bins[i]] = True
        if len(keep) < b:
            eps_hat = eps_hat[keep]
            kin = kin[keep]
            eps = eps[keep]
            x0b = x0b[keep]
            xt = xt[keep]
            abar_k = abar[keep]
            dts_b = dts[idx][keep]
        else:
            abar_k = abar
            dts_b = dts[idx]
        vlb = simple_loss(eps, eps_hat)
        x0_hat = None
        if use_rec or use_phy:
            x0_hat = predict_x0(xt, eps_hat, abar_k[:, None, None])
        if use_rec:
            # weight each sample by alpha_bar: predict_x0 amplifies noise
            # by 1/sqrt(alpha_bar), so unweighted deep-step terms would
            # swamp the informative shallow-step ones
            w = np.sqrt(abar_k)[:, None, None]
            rec = recon_loss(x0_hat * w, x0b * w)
        else:
            rec = Tensor(0.0)
        if use_phy:
            # kinematic consistency is only meaningful where the
            # reconstruction is trustworthy
            sel = abar_k > 0.3
            if np.any(sel):
                phy = physics_loss(x0_hat[sel], kin[sel], normalizer,
                                   dts_b[sel], weights)
            else:
                phy = Tensor(0.0)
        else:
            phy = Tensor(0.0)
        loss = total_loss(vlb, rec, phy, weights)

        row = {"step": step, "total": float(loss.data), "vlb": float(vlb.data),
               "rec": float(rec.data), "phy": float(phy.data)}
        if not math.isfinite(row["total"]):
            return TrainResult(params=params, opt_state=opt_state, trace=trace,
                               step=step - 1, aborted=True,
                               abort_reason=f"non-finite loss at step {step}")
        leaf_grads = en.backward(loss)
        grads = {name: leaf_grads[p] for name, p in params.items() if p in leaf_grads}
        try:
            adam_step(params, grads, opt_state)
        except OptimError as err:
            return TrainResult(params=params, opt_state=opt_state, trace=trace,
                               step=step - 1, aborted=True, abort_reason=str(err))
        trace.append(row)
        if checkpoint_every and checkpoint_cb and step % checkpoint_every == 0:
            checkpoint_cb(step, params, opt_state)

    return TrainResult(params=params, opt_state=opt_state, trace=trace,
                       step=start_step + steps)


# -- sampling and reconstruction --------------------------------------------


def step_sequence(t_start, stride):
    """Strided reverse-step pairs [(t, t_prev), ...] from t_start down to 0."""
    ts = list(range(t_start, 0, -stride))
    return [(t, max(t - stride, 0)) for t in ts]


def sample_full(model, schedule, sampler, shape, rng, ctx_feats=None,
                ctx_mask=None, mode="eta", x_init=None):
    """Draw from pure noise and run the strided reverse chain to x0_hat.

    `model(x_t, abar, ctx_feats, ctx_mask) -> (eps_hat, kin)` on numpy
    arrays. `x_init` replaces the initial noise draw (useful for
    reproducible generation). Returns (x0_hat, n_evals).
    """
    x = rng.normal(shape) if x_init is None else np.array(x_init, copy=True)
    n_evals = 0
    lead = shape[0] if len(shape) == 3 else None
    for t, t_prev in step_sequence(schedule.T, sampler.stride):
        abar = schedule.alpha_bar[t]
        ab_in = np.full(lead, abar) if lead is not None else abar
        eps_hat, _ = model(x, ab_in, ctx_feats, ctx_mask)
        n_evals += 1
        x = reverse_step(x, eps_hat, t, schedule, mode=mode, rng=rng,
                         eta=sampler.eta, t_prev=t_prev if mode == "eta" else None)
    return x, n_evals


def reconstruct(x0, model, schedule, sampler, rng, ctx_feats=None, ctx_mask=None):
    """Partial-noising reconstruction: corrupt t_star steps forward, then
    reverse-denoise back to x0_hat. Deterministic for eta = 0 given the rng
    that fixes the forward noise."""
    t_star = sampler.t_star if sampler.t_star is not None else max(1, schedule.T // 4)
    if t_star > schedule.T:
        raise DiffusionError(f"t_star={t_star} exceeds T={schedule.T}")
    if t_star == 0:
        return np.array(x0, copy=True)
    x = q_sample(x0, schedule.alpha_bar[t_star], rng.normal(np.shape(x0)))
    lead = np.shape(x0)[0] if np.ndim(x0) == 3 else None
    for t, t_prev in step_sequence(t_star, sampler.stride):
        abar = schedule.alpha_bar[t]
        ab_in = np.full(lead, abar) if lead is not None else abar
        eps_hat, _ = model(x, ab_in, ctx_feats, ctx_mask)
        x = reverse_step(x, eps_hat, t, schedule, mode="eta", rng=rng,
                         eta=sampler.eta, t_prev=t_prev)
    return x


def reconstruct_dataset(canons, contexts, model, schedule, sampler, seed):
    """Reconstruct every trajectory with a per-id derived noise stream, so
    scores do not depend on batch composition or ordering.

    Returns (N, n, d) reconstructions aligned with `canons`.
    """
    from .geodata import pad_contexts

    feats = np.stack([c.features for c in canons])
    ctx_feats, ctx_mask = pad_contexts(contexts)
    base = Rng(seed)
    rngs = [base.derive(c.id) for c in canons]
    t_star = sampler.t_star if sampler.t_star is not None else max(1, schedule.T // 4)
    if t_star == 0:
        return feats.copy()
    eps = np.stack([r.normal(feats.shape[1:]) for r in rngs])
    x = q_sample(feats, schedule.alpha_bar[t_star], eps)
    n = feats.shape[0]
    for t, t_prev in step_sequence(t_star, sampler.stride):
        eps_hat, _ = model(x, np.full(n, schedule.alpha_bar[t]), ctx_feats, ctx_mask)
        ab_prev = schedule.alpha_bar[t_prev]
        sigma2 = sampler.eta * _tilde_beta(schedule, t, t_prev)
        x0h = predict_x0(x, eps_hat, schedule.alpha_bar[t])
        x = (math.sqrt(ab_prev) * x0h
             + math.sqrt(max(1.0 - ab_prev - sigma2, 0.0)) * eps_hat)
        if sigma2 > 0.0:
            z = np.stack([r.normal(feats.shape[1:]) for r in rngs])
            x = x + math.sqrt(sigma2) * z
    return x
