#!/usr/bin/env python3
"""
flowgen.py - Flow-Matching Policy for PaCo Lab

Conditional generator over Signals:
- FlowModel: a per-point MLP predicting velocity, so one parameter set
  serves every resolution
- Flow-matching pretraining (t=0 data, t=1 noise, velocity = noise - data)
- ODE sampling for evaluation, partial-SDE sampling for RL exploration
- Exact Gaussian transition log-probabilities for policy ratios

Time runs from t_max=0.96 down to t_min=0.04 on a uniform grid, then one
deterministic Euler step lands the output at t=0.

Version: 1.0.0
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from numcore import (
    AdamState,
    DataError,
    DimensionError,
    DivergenceError,
    DomainError,
    RngStream,
    Tape,
    Tensor,
    adam_step,
    add,
    as_tensor,
    backward,
    concat,
    forward_mlp,
    gaussian,
    gradients,
    init_mlp,
    load_checkpoint,
    mean,
    mlp_layer_sizes,
    reshape,
    save_checkpoint,
    scale,
    square,
    sub,
    tsum,
    uniform,
)
from toyworld import DEFAULT_WORLD, PromptSpec, Signal, WorldConstants, render, template

logger = logging.getLogger(__name__)

T_MAX = 0.96
T_MIN = 0.04
N_FOURIER = 8
NOISE_MODES = 16

# ============================================================================
# DATA STRUCTURES
# ============================================================================

@dataclass
class Condition:
    """One image of a prompt's set: the prompt plus which content it shows"""
    prompt: PromptSpec
    content_index: int

    def vector(self) -> np.ndarray:
        return np.concatenate([
            np.asarray(self.prompt.identity),
            np.asarray(self.prompt.style),
            np.asarray(self.prompt.contents[self.content_index]),
        ])


def set_conditions(prompt: PromptSpec) -> List[Condition]:
    """All M conditions of an image set, in content order"""
    return [Condition(prompt, i) for i in range(prompt.set_size)]


@dataclass
class FlowModel:
    params: Dict[str, Tensor]
    world: WorldConstants = DEFAULT_WORLD
    optimizer: AdamState = field(default_factory=AdamState)

    @property
    def layer_sizes(self) -> List[int]:
        return mlp_layer_sizes(self.params)


@dataclass
class Trajectory:
    """
    One sampling run over a batch of rows (B conditions sampled together).

    latents[k] has shape (B, d) and sits at times[k]; sde_steps lists the
    steps that drew noise, logprobs[s] holds the per-row log-density of the
    transition at sde_steps[s].
    """
    times: np.ndarray
    latents: List[np.ndarray]
    conditions: List[Condition]
    sde_steps: List[int]
    sigmas: List[float]
    logprobs: List[np.ndarray]
    output: np.ndarray
    seed: int = 0
    stream_id: int = 0

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    @property
    def resolution(self) -> int:
        return int(self.output.shape[1])

    def outputs(self) -> List[Signal]:
        return [Signal(row) for row in self.output]

    def total_logprob(self) -> float:
        """Log-density of the whole row batch summed over recorded steps"""
        return float(sum(lp.sum() for lp in self.logprobs))


# ============================================================================
# FEATURES & VELOCITY
# ============================================================================

def input_width(world: WorldConstants = DEFAULT_WORLD) -> int:
    coords = 2 * N_FOURIER
    cond = 1 + world.k_id + world.k_st + world.k_ct
    context = 1 + 2 * N_FOURIER
    return coords + 1 + 3 + cond + context


@lru_cache(maxsize=32)
def _coordinate_features(d: int) -> np.ndarray:
    u = np.arange(d) / d
    phase = 2.0 * np.pi * np.outer(u, np.arange(1, N_FOURIER + 1))
    return np.concatenate([np.cos(phase), np.sin(phase)], axis=1)


def _context_features(xs: np.ndarray) -> np.ndarray:
    """Mean plus cosine/sine coefficients of modes 1..N_FOURIER per row"""
    d = xs.shape[1]
    spectrum = np.fft.rfft(xs, axis=1)
    coeffs = np.zeros((xs.shape[0], N_FOURIER + 1), dtype=np.complex128)
    n = min(spectrum.shape[1], N_FOURIER + 1)
    coeffs[:, :n] = spectrum[:, :n]
    cos = (2.0 / d) * coeffs.real[:, 1:]
    sin = -(2.0 / d) * coeffs.imag[:, 1:]
    return np.concatenate([xs.mean(axis=1, keepdims=True), cos, sin], axis=1)


def point_features(xs: np.ndarray, t: Union[float, np.ndarray], conditions: Sequence[Condition],
                   world: WorldConstants = DEFAULT_WORLD) -> np.ndarray:
    """(B, d) latents -> (B*d, input_width) per-point network inputs"""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[0] != len(conditions):
        raise DimensionError(f"latents {xs.shape} do not match {len(conditions)} conditions")
    rows, d = xs.shape
    u = np.arange(d) / d
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (rows,))

    coords = np.broadcast_to(_coordinate_features(d), (rows, d, 2 * N_FOURIER))
    temb = np.stack([t, np.sin(np.pi * t), np.cos(np.pi * t)], axis=1)
    cond_vec = np.stack([c.vector() for c in conditions])
    cond_val = np.stack([template(c.prompt, c.content_index, u, world) for c in conditions])
    context = _context_features(xs)

    def per_row(block: np.ndarray) -> np.ndarray:
        return np.broadcast_to(block[:, None, :], (rows, d, block.shape[1]))

    feats = np.concatenate([
        coords,
        xs[:, :, None],
        per_row(temb),
        cond_val[:, :, None],
        per_row(cond_vec),
        per_row(context),
    ], axis=2)
    return feats.reshape(rows * d, feats.shape[2])


def velocity(model: FlowModel, xs: np.ndarray, t: Union[float, np.ndarray],
             conditions: Sequence[Condition]) -> Tensor:
    """Velocity field as a (B, d) Tensor; tracked when a Tape is active"""
    xs = np.asarray(xs, dtype=np.float64)
    feats = point_features(xs, t, conditions, model.world)
    out = forward_mlp(model.params, Tensor(feats))
    return reshape(out, xs.shape)


def init_flow_model(stream: RngStream, hidden: Sequence[int] = (64, 64),
                    world: WorldConstants = DEFAULT_WORLD, out_scale: float = 0.1) -> FlowModel:
    sizes = [input_width(world), *hidden, 1]
    return FlowModel(params=init_mlp(sizes, stream, out_scale=out_scale), world=world)


# ============================================================================
# NOISE
# ============================================================================

def band_limited_noise(stream: RngStream, rows: int, d: int) -> np.ndarray:
    """
    Unit-variance noise functions built from modes 0..NOISE_MODES.

    The coefficients are drawn independently of d, so the same stream
    position yields the same underlying function at every resolution.
    """
    z = gaussian(stream, (rows, 2 * NOISE_MODES + 1)).data
    u = np.arange(d) / d
    phase = 2.0 * np.pi * np.outer(u, np.arange(1, NOISE_MODES + 1))
    basis = np.concatenate([np.ones((d, 1)), np.sqrt(2.0) * np.cos(phase), np.sqrt(2.0) * np.sin(phase)], axis=1)
    return z @ basis.T / np.sqrt(2 * NOISE_MODES + 1)


def time_grid(steps: int) -> np.ndarray:
    """steps+1 times from T_MAX down to T_MIN"""
    if steps < 2:
        raise ValueError(f"need at least 2 sampling steps, got {steps}")
    return np.linspace(T_MAX, T_MIN, steps + 1)


def noise_scale(t: float, a: float) -> float:
    """sigma_t = a * sqrt(t / (1 - t))"""
    if not 0.0 < t < 1.0:
        raise DomainError(f"noise scale is defined on the open interval (0, 1), got t={t}")
    return a * float(np.sqrt(t / (1.0 - t)))


# ============================================================================
# SDE TRANSITION
# ============================================================================

def transition_mean(x: np.ndarray, v: Tensor, t: float, dt: float, sigma: float) -> Tensor:
    """x + [v + sigma^2/(2t) * (x + (1-t) v)] dt, differentiable in v"""
    if t == 0.0:
        raise DomainError("SDE drift is singular at t=0")
    c = sigma * sigma / (2.0 * t)
    x_const = as_tensor(x)
    correction = scale(add(x_const, scale(v, 1.0 - t)), c)
    return add(x_const, scale(add(v, correction), dt))


def gaussian_logpdf(x_next: np.ndarray, mu: Tensor, std: float) -> Tensor:
    """Sum over the last axis of univariate normal log-densities"""
    if not std > 0.0:
        raise DomainError(f"degenerate transition density (std={std})")
    diff = sub(as_tensor(x_next), mu)
    axis = diff.data.ndim - 1
    quad = tsum(square(diff), axis=axis)
    d = diff.shape[-1]
    norm = -d * np.log(std * np.sqrt(2.0 * np.pi))
    return add(scale(quad, -0.5 / (std * std)), Tensor(np.full(quad.shape, norm)))


def sde_step(x_t: Signal, v: Signal, t: float, dt: float, sigma: float, eps: Tensor,
             with_logprob: bool = True) -> Tuple[Signal, Optional[float]]:
    """One stochastic update; returns the next latent and its log-density"""
    if not 0.0 < t < 1.0:
        raise DomainError(f"SDE step needs 0 < t < 1, got t={t}")
    if dt == 0.0:
        raise ValueError("SDE step needs a non-zero dt")
    eps = as_tensor(eps)
    if eps.shape != x_t.samples.shape:
        raise DimensionError(f"noise shape {eps.shape} does not match latent shape {x_t.samples.shape}")
    std = sigma * float(np.sqrt(abs(dt)))
    mu = transition_mean(x_t.samples, Tensor(v.samples), t, dt, sigma)
    x_next = mu.data + std * eps.data
    logprob = gaussian_logpdf(x_next, mu, std).item() if with_logprob else None
    return Signal(x_next), logprob


# ============================================================================
# SAMPLING
# ============================================================================

def sample_trajectory(
    model: FlowModel,
    conditions: Sequence[Condition],
    d: int,
    steps: int,
    sde_steps: Iterable[int],
    a: float,
    stream: RngStream,
) -> Trajectory:
    """Integrate noise -> data; stochastic transitions only at sde_steps"""
    times = time_grid(steps)
    sde_set = sorted(set(int(k) for k in sde_steps))
    for k in sde_set:
        if not 0 <= k < steps:
            raise IndexError(f"SDE step index {k} outside 0..{steps - 1}")
    conditions = list(conditions)
    seed, stream_id = stream.seed, stream.stream_id

    x = band_limited_noise(stream, len(conditions), d)
    latents = [x]
    recorded: List[int] = []
    sigmas: List[float] = []
    logprobs: List[np.ndarray] = []
    for k in range(steps):
        t, dt = float(times[k]), float(times[k + 1] - times[k])
        v = velocity(model, x, t, conditions)
        std = 0.0
        if k in sde_set:
            sigma = noise_scale(t, a)
            std = sigma * float(np.sqrt(abs(dt)))
        if std > 0.0:
            mu = transition_mean(x, v, t, dt, sigma)
            x_next = mu.data + std * gaussian(stream, x.shape).data
            recorded.append(k)
            sigmas.append(sigma)
            logprobs.append(gaussian_logpdf(x_next, mu, std).data.copy())
        else:
            x_next = x + v.data * dt
        latents.append(x_next)
        x = x_next

    t_last = float(times[-1])
    output = x + velocity(model, x, t_last, conditions).data * (0.0 - t_last)
    return Trajectory(times=times, latents=latents, conditions=conditions, sde_steps=recorded,
                      sigmas=sigmas, logprobs=logprobs, output=output, seed=seed, stream_id=stream_id)


def sample_ode(model: FlowModel, conditions: Sequence[Condition], d: int, steps: int,
               stream: RngStream) -> List[Signal]:
    """Deterministic evaluation sampling (no SDE steps)"""
    return sample_trajectory(model, conditions, d, steps, (), 0.0, stream).outputs()


def transition_logprobs(model: FlowModel, trajectory: Trajectory) -> Tensor:
    """(n_sde_steps, B) log-densities of stored transitions under the model's current parameters"""
    if not trajectory.sde_steps:
        raise ValueError("trajectory has no recorded SDE steps")
    rows = []
    for k, sigma in zip(trajectory.sde_steps, trajectory.sigmas):
        t = float(trajectory.times[k])
        dt = float(trajectory.times[k + 1] - trajectory.times[k])
        x, x_next = trajectory.latents[k], trajectory.latents[k + 1]
        v = velocity(model, x, t, trajectory.conditions)
        mu = transition_mean(x, v, t, dt, sigma)
        lp = gaussian_logpdf(x_next, mu, sigma * float(np.sqrt(abs(dt))))
        rows.append(reshape(lp, (1, lp.shape[0])))
    return rows[0] if len(rows) == 1 else concat(rows, axis=0)


def logprob_under(model: FlowModel, trajectory: Trajectory) -> np.ndarray:
    return transition_logprobs(model, trajectory).data.copy()


def dump_trajectory(trajectory: Trajectory, path: Union[str, Path]) -> Path:
    """JSONL, one line per step: t, dt, sde flag, latent mean, std, per-row logprob"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    logs = dict(zip(trajectory.sde_steps, zip(trajectory.sigmas, trajectory.logprobs)))
    with open(path, "w") as f:
        for k in range(trajectory.steps):
            t = float(trajectory.times[k])
            dt = float(trajectory.times[k + 1] - t)
            sigma, lp = logs.get(k, (0.0, None))
            record = {
                "step": k,
                "t": t,
                "dt": dt,
                "sde": k in logs,
                "mean": float(trajectory.latents[k + 1].mean()),
                "std": sigma * float(np.sqrt(abs(dt))),
                "logprob": None if lp is None else [float(v) for v in lp],
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return path


# ============================================================================
# FLOW-MATCHING TRAINING
# ============================================================================

def fm_train_step(
    model: FlowModel,
    batch: Sequence[Tuple[Signal, Condition]],
    stream: RngStream,
    lr: float = 1e-3,
) -> float:
    """One flow-matching regression step; returns the pre-update loss"""
    if not batch:
        raise ValueError("flow-matching batch is empty")
    resolutions = {s.d for s, _ in batch}
    if len(resolutions) != 1:
        raise DimensionError(f"flow-matching batch mixes resolutions {sorted(resolutions)}")
    d = resolutions.pop()
    x1 = np.stack([s.samples for s, _ in batch])
    conditions = [c for _, c in batch]

    t = uniform(stream, len(batch))
    noise = band_limited_noise(stream, len(batch), d)
    x_t = (1.0 - t)[:, None] * x1 + t[:, None] * noise
    target = noise - x1

    with Tape():
        v = velocity(model, x_t, t, conditions)
        loss = mean(square(sub(v, Tensor(target))))
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(
            "flow-matching loss is not finite",
            diagnostics={"batch_size": len(batch), "resolution": d,
                         "t_min": float(t.min()), "t_max": float(t.max())},
        )
    backward(loss, model.params)
    model.params, model.optimizer = adam_step(model.params, gradients(model.params), model.optimizer, lr)
    return value


def policy_example(prompt: PromptSpec, content_index: int, identity_jitter: float,
                   stream: RngStream, d: int) -> Tuple[Signal, Condition]:
    """Training target whose identity scatters around the prompt's identity"""
    if identity_jitter:
        shifted = np.asarray(prompt.identity) + identity_jitter * gaussian(stream, len(prompt.identity)).data
        target_prompt = prompt.with_identity(shifted)
    else:
        target_prompt = prompt
    return render(target_prompt, content_index, 0.0, stream, d), Condition(prompt, content_index)


def pretrain_policy(
    model: FlowModel,
    prompts: Sequence[PromptSpec],
    stream: RngStream,
    steps: int = 1500,
    batch_size: int = 32,
    lr: float = 2e-3,
    identity_jitter: float = 0.25,
    resolutions: Sequence[int] = (32, 64, 128),
    progress: bool = False,
) -> List[Dict]:
    """Flow-matching pretraining; resolutions cycle per step. Returns a per-step log"""
    if not prompts:
        raise ValueError("pretraining needs at least one prompt")
    log: List[Dict] = []
    for step in tqdm(range(steps), desc="pretrain", disable=not progress):
        d = int(resolutions[step % len(resolutions)])
        step_stream = stream.child(step)
        picks = uniform(step_stream, (batch_size, 2))
        batch = []
        for pi, ci in picks:
            prompt = prompts[int(pi * len(prompts)) % len(prompts)]
            content = int(ci * prompt.set_size) % prompt.set_size
            batch.append(policy_example(prompt, content, identity_jitter, step_stream, d))
        loss = fm_train_step(model, batch, step_stream, lr)
        log.append({"step": step, "resolution": d, "loss": loss})
        if step % 100 == 0:
            logger.info("pretrain step %d d=%d loss=%.5f", step, d, loss)
    return log


# ============================================================================
# PERSISTENCE
# ============================================================================

def save_flow_model(model: FlowModel, path: Union[str, Path], extra: Optional[Dict] = None) -> Path:
    meta = {"kind": "flow_model", "world": asdict(model.world), **(extra or {})}
    return save_checkpoint(path, model.params, meta)


def load_flow_model(path: Union[str, Path]) -> FlowModel:
    params, meta = load_checkpoint(path)
    if meta.get("kind") != "flow_model":
        raise DataError(f"checkpoint holds a '{meta.get('kind')}', expected a flow_model", path=str(path))
    world = WorldConstants(**meta["world"]) if "world" in meta else DEFAULT_WORLD
    if mlp_layer_sizes(params)[0] != input_width(world):
        raise DataError("policy input width does not match its world constants", path=str(path))
    return FlowModel(params=params, world=world)
