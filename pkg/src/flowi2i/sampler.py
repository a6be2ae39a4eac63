"""Guided ODE integration from noise to image.

Sampling starts at t=1 from seeded standard Gaussian noise and integrates
dx/dt = v(x, t) down to t=0 over a uniform time grid, where v is the
classifier-free-guided velocity

    v = v_uncond + g * (v_cond - v_uncond).

The conditional branch uses (y=encode(source), control=encode(source)); the
unconditional branch keeps control active for PRIMARY and drops it for BIS.
At g=1 the unconditional branch is skipped entirely; cfg_velocity returns
v_cond verbatim in that case, so the fast path and the explicit two-branch
path are bit-identical.

Solvers: EULER (first order) and HEUN2 (explicit trapezoid, second order),
the latter standing in for heavier multistep flow solvers, which matters
little in the few-step regime this model targets.
"""

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
import torch

from .errors import ContractError, ParameterError, ShapeError
from .model import ConditioningBundle, Variant


class SolverKind(str, Enum):
    EULER = "euler"
    HEUN2 = "heun2"


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 5
    guidance: float = 1.0
    solver: SolverKind = SolverKind.EULER
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if self.guidance < 0:
            raise ParameterError(f"guidance must be >= 0, got {self.guidance}")


def cfg_velocity(v_cond, v_uncond, guidance):
    """Classifier-free-guided velocity; exactly v_cond when guidance == 1."""
    if tuple(v_cond.shape) != tuple(v_uncond.shape):
        raise ShapeError(
            f"cfg_velocity: shape mismatch {tuple(v_cond.shape)} vs {tuple(v_uncond.shape)}"
        )
    if guidance == 1.0:
        return v_cond
    return v_uncond + guidance * (v_cond - v_uncond)


def sample(model, source, config, model_config, codec, force_two_branch=False, return_latent=False):
    """Generate one image, optionally conditioned on a source image.

    Args:
        model: callable (x_t, t, bundle) -> velocity; usually a VelocityModel.
        source: 2-D array in [-1, 1], or None (BIS unconditional generation).
        config: SampleConfig (steps, guidance, solver, seed).
        model_config: ModelConfig of the velocity network.
        codec: Codec mapping images to latents and back.
        force_two_branch: evaluate both CFG branches even at guidance 1
            (testing hook; the result is defined to be identical).
        return_latent: return the raw terminal latent instead of decoding
            (testing hook; skips the decode-time clamp).

    Returns:
        Restored/generated image as a 2-D float array in [-1, 1], or the
        (C, h, w) terminal latent when return_latent is set.
    """
    shape = (1, model_config.latent_channels, model_config.latent_size, model_config.latent_size)
    rng = np.random.default_rng(config.seed)
    x = torch.from_numpy(rng.standard_normal(shape).astype(np.float32))

    if source is not None:
        latent = codec.encode(np.asarray(source))
        if latent.shape != shape[1:]:
            raise ShapeError(f"encoded source shape {latent.shape} != model latent {shape[1:]}")
        src = torch.from_numpy(latent.astype(np.float32))[None]
        cond = ConditioningBundle.conditional(src)
        uncond = ConditioningBundle.unconditional(src, model_config.variant)
    elif model_config.variant == Variant.PRIMARY:
        raise ContractError("PRIMARY sampling requires a source image")
    else:
        # BIS unconditional generation: both branches are the no-signal bundle
        cond = uncond = ConditioningBundle(y=torch.zeros_like(x), control=None)

    single_eval = config.guidance == 1.0 and not force_two_branch

    def velocity(state, t_val):
        t = torch.full((1,), float(t_val), dtype=state.dtype)
        v_cond = model(state, t, cond)
        if single_eval:
            return v_cond
        v_uncond = model(state, t, uncond)
        return cfg_velocity(v_cond, v_uncond, config.guidance)

    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    times = np.linspace(1.0, 0.0, config.steps + 1)
    with torch.no_grad():
        for t_now, t_next in zip(times[:-1], times[1:]):
            dt = float(t_next - t_now)
            k1 = velocity(x, t_now)
            if config.solver == SolverKind.EULER:
                x = x + dt * k1
            else:
                k2 = velocity(x + dt * k1, t_next)
                x = x + dt * 0.5 * (k1 + k2)
    if was_training and hasattr(model, "train"):
        model.train()
    if return_latent:
        return x[0].numpy()
    return codec.decode(x[0].numpy())


def restore_batch(model, sources, config, model_config, codec):
    """Restore a list of source images with per-item derived seeds (seed + i)."""
    if len(sources) == 0:
        raise ParameterError("restore_batch: empty source list")
    out = []
    for i, source in enumerate(sources):
        item_config = replace(config, seed=config.seed + i)
        out.append(sample(model, source, item_config, model_config, codec))
    return out


def generate_batch(model, count, config, model_config, codec):
    """Draw `count` images without a real source.

    BIS runs truly unconditionally (control ABSENT). PRIMARY cannot drop its
    control branch, so a zero source stands in; that configuration is
    expected to be degenerate and callers should flag it.
    """
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    out = []
    for i in range(count):
        item_config = replace(config, seed=config.seed + i)
        if model_config.variant == Variant.BIS:
            out.append(sample(model, None, item_config, model_config, codec))
        else:
            side = model_config.latent_size * codec.spec.spatial_factor
            zero_source = np.zeros((side, side), dtype=np.float32)
            out.append(sample(model, zero_source, item_config, model_config, codec))
    return out
