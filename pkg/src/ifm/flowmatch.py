"""Flow-matching losses and samplers for the two denoising paths.

Velocity fields are trained on linear interpolants: x_tau = (1-tau) x0 +
tau x1 with constant target velocity x1 - x0. The image path supports two
noise initializations: pure standard normal ("naive") and normal centered
on the current frame's latent ("rfg"), which turns the flow into a
residual from the current observation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ifm.errors import ContractError, NumericError, ParameterError
from ifm.numerics import Array, gather_rows, mse
from ifm.numerics.random import RngStream

SCHEMES = ("complete", "joint", "single")
INIT_MODES = ("naive", "rfg")


@dataclass(frozen=True)
class FlowSample:
    """One interpolated training point for a velocity field."""

    x0: np.ndarray
    x1: np.ndarray
    tau: float
    interp: np.ndarray  # (1-tau) x0 + tau x1
    velocity: np.ndarray  # x1 - x0, independent of tau
    init_mode: str


def make_flow_sample(
    target: np.ndarray,
    tau: float,
    init_mode: str,
    anchor: np.ndarray | None = None,
    rng: RngStream | None = None,
    sigma: float = 1.0,
    zero_noise: bool = False,
) -> FlowSample:
    """Draw x0 per the init mode and interpolate toward the target.

    rfg centers the noise on `anchor` (the current frame's latent); pass
    zero_noise=True to suppress the noise term for deterministic checks.
    """
    if init_mode not in INIT_MODES:
        raise ParameterError(f"init mode must be one of {INIT_MODES}, got {init_mode!r}")
    x1 = np.asarray(target, dtype=np.float32)
    if init_mode == "rfg" and anchor is None:
        raise ContractError("rfg init requires the current frame's latent as anchor")
    if zero_noise:
        eps = np.zeros_like(x1)
    else:
        if rng is None:
            raise ContractError("make_flow_sample needs an rng unless zero_noise is set")
        eps = rng.normal(x1.shape, sigma=sigma)
    if init_mode == "rfg":
        base = np.asarray(anchor, dtype=np.float32)
        if base.shape != x1.shape:
            raise ContractError(f"anchor shape {base.shape} != target shape {x1.shape}")
        x0 = base + eps
    else:
        x0 = eps
    tau = float(tau)
    interp = (np.float32(1.0 - tau) * x0 + np.float32(tau) * x1).astype(np.float32)
    return FlowSample(x0=x0, x1=x1, tau=tau, interp=interp, velocity=(x1 - x0), init_mode=init_mode)


@dataclass(frozen=True)
class SamplerPlan:
    """Euler integration plan on a uniform tau grid from 0 to 1."""

    steps: int
    scheme: str = "single"
    init_mode: str = "rfg"

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError(f"sampler needs >= 1 step, got {self.steps}")
        if self.scheme not in SCHEMES:
            raise ParameterError(f"unknown scheme {self.scheme!r}")
        if self.init_mode not in INIT_MODES:
            raise ParameterError(f"unknown init mode {self.init_mode!r}")

    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.steps + 1, dtype=np.float32)


def euler_sample(velocity_fn, plan: SamplerPlan, x0: np.ndarray) -> np.ndarray:
    """Integrate dx/dtau = v(x, tau) from tau=0 to 1."""
    x = np.asarray(x0, dtype=np.float32)
    taus = plan.grid()
    for i in range(plan.steps):
        v = np.asarray(velocity_fn(x, float(taus[i])), dtype=np.float32)
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite velocity at integration step {i}")
        x = x + (taus[i + 1] - taus[i]) * v
    return x


def init_image_noise(
    shape: tuple[int, ...],
    init_mode: str,
    rng: RngStream,
    anchor: np.ndarray | None = None,
    sigma: float = 1.0,
    zero_noise: bool = False,
) -> np.ndarray:
    """x0 for the image path at inference time."""
    if init_mode not in INIT_MODES:
        raise ParameterError(f"unknown init mode {init_mode!r}")
    eps = np.zeros(shape, np.float32) if zero_noise else rng.normal(shape, sigma=sigma)
    if init_mode == "rfg":
        if anchor is None:
            raise ContractError("rfg init requires the current frame's latent as anchor")
        return (np.asarray(anchor, dtype=np.float32) + eps).astype(np.float32)
    return eps.astype(np.float32)


# -- training losses ------------------------------------------------------------


def image_velocity_loss(model, packed, hidden: Array) -> Array:
    """MSE between the image-velocity head on noisy-keyframe rows and the target."""
    from ifm.sequence import SegmentKind

    rows = packed.rows_of(SegmentKind.NOISY_KEY)
    if rows.size == 0 or packed.image_target is None:
        raise ContractError("sequence has no noisy-keyframe segment")
    pred = model.image_velocity(gather_rows(hidden, rows))
    return mse(pred, Array(packed.image_target))


def action_velocity_loss(model, packed, hidden: Array) -> Array:
    from ifm.sequence import SegmentKind

    rows = packed.rows_of(SegmentKind.NOISY_ACT)
    if rows.size == 0 or packed.action_target is None:
        raise ContractError("sequence has no noisy-action segment")
    pred = model.action_velocity(gather_rows(hidden, rows))
    return mse(pred, Array(packed.action_target))


def loss_v(model, packed) -> Array:
    """Standalone image flow-matching loss (runs its own forward)."""
    return image_velocity_loss(model, packed, model.forward_full(packed))


def loss_a(model, packed, scheme: str | None = None) -> Array:
    """Standalone action flow-matching loss; scheme must match the sequence."""
    if scheme is not None and scheme != packed.scheme:
        raise ContractError(f"sequence built for scheme {packed.scheme!r}, loss asked for {scheme!r}")
    return action_velocity_loss(model, packed, model.forward_full(packed))


# -- inference-time sampling ------------------------------------------------------


def sample_keyframe(model, cache, plan: SamplerPlan, x0: np.ndarray, collect: list | None = None) -> np.ndarray:
    """Fully denoise a keyframe latent against a frozen context cache.

    Returns the final latent; `collect` (if given) receives the latent after
    every Euler step, for step-count sweeps.
    """

    def velocity(x, tau):
        v = model.image_velocity_rows(cache, x, tau)
        if collect is not None:
            collect.append((tau, x.copy()))
        return v

    return euler_sample(velocity, plan, x0)


def sample_actions(model, cache, plan: SamplerPlan, rng: RngStream, horizon: int, action_dim: int = 3) -> np.ndarray:
    """Denoise one action chunk against a cache that already holds every
    row the action block may attend (context, proprio, and the per-scheme
    image rows). Output is clipped to the actuator range."""
    a0 = rng.normal((horizon, action_dim))

    def velocity(a, tau):
        return model.action_velocity_rows(cache, a, tau)

    a1 = euler_sample(velocity, plan, a0)
    return np.clip(a1, -1.0, 1.0)


def sample_joint(
    model,
    cache,
    plan: SamplerPlan,
    rng: RngStream,
    image_x0: np.ndarray,
    horizon: int,
    action_dim: int = 3,
) -> tuple[np.ndarray, np.ndarray]:
    """Co-evolve keyframe and action denoising on a shared tau grid.

    Each step runs one fused pass over [noisy image rows; action rows] (the
    action rows attend the image rows at the same tau, as in training) and
    applies one Euler update to each path.
    """
    x = np.asarray(image_x0, dtype=np.float32)
    a = rng.normal((horizon, action_dim))
    taus = plan.grid()
    for i in range(plan.steps):
        tau = float(taus[i])
        v_img, v_act = model.joint_velocity_rows(cache, x, a, tau)
        if not (np.all(np.isfinite(v_img)) and np.all(np.isfinite(v_act))):
            raise NumericError(f"non-finite velocity at joint step {i}")
        dt = taus[i + 1] - taus[i]
        x = x + dt * v_img
        a = a + dt * v_act
    return np.clip(a, -1.0, 1.0), x


# -- image dump -------------------------------------------------------------------


def write_ppm(image: np.ndarray, path: str) -> None:
    """Binary PPM (P6) dump of a [-1, 1] RGB image."""
    img = np.clip((np.asarray(image) + 1.0) * 127.5, 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())
