"""Linear flow-matching path and training objective.

Convention pinned for the whole package: t=0 is data, t=1 is noise.

    x_t = (1 - t) * x_data + t * noise
    u   = d x_t / dt = noise - x_data          (constant along the path)

The model regresses u with a plain MSE, and the sampler integrates the
learned field from t=1 down to t=0. Training timesteps are drawn from a
logit-normal: t = logistic(z), z ~ Normal(mean, std^2), which concentrates
mass at mid-path times.

All array ops are elementwise and work on numpy arrays and torch tensors
alike; for torch inputs `fm_loss` returns a scalar tensor that supports
backward().
"""

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError

# sampled t is clamped into [T_EPS, 1 - T_EPS]: the endpoints carry no
# training signal and t=0/t=1 are reserved for the sampler's grid
T_EPS = 1e-5


@dataclass(frozen=True)
class FlowTimestep:
    """A single training time in the open interval (0, 1)."""

    t: float

    def __post_init__(self):
        if not (0.0 < self.t < 1.0):
            raise ParameterError(f"flow timestep must lie in (0, 1), got {self.t}")


@dataclass
class FlowSample:
    """One supervised point on the path: x_t plus its constant velocity target."""

    x_t: object
    t: FlowTimestep
    target_v: object

    def __post_init__(self):
        if tuple(self.x_t.shape) != tuple(self.target_v.shape):
            raise ShapeError(
                f"x_t and target_v must share a shape, got {tuple(self.x_t.shape)} "
                f"vs {tuple(self.target_v.shape)}"
            )


def sample_timesteps(count, mean=0.0, std=1.0, rng=None):
    """Draw `count` logit-normal timesteps.

    Args:
        count: number of draws, >= 1.
        mean: mean of the underlying normal.
        std: standard deviation of the underlying normal, > 0.
        rng: np.random.Generator (required for reproducibility).

    Returns:
        List of FlowTimestep, each strictly inside (0, 1).
    """
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    if std <= 0:
        raise ParameterError(f"std must be > 0, got {std}")
    if rng is None:
        rng = np.random.default_rng()
    z = rng.normal(loc=mean, scale=std, size=count)
    t = 1.0 / (1.0 + np.exp(-z))
    t = np.clip(t, T_EPS, 1.0 - T_EPS)
    return [FlowTimestep(float(v)) for v in t]


def timestep_array(timesteps):
    """Pack a list of FlowTimestep into a float array (for batched model calls)."""
    return np.asarray([ts.t for ts in timesteps], dtype=np.float64)


def _t_value(t):
    if isinstance(t, FlowTimestep):
        return t.t
    return t


def _check_same_shape(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def interpolate(x_data, noise, t):
    """Point on the linear path: (1 - t) * x_data + t * noise.

    `t` may be a FlowTimestep, a scalar, or an array broadcastable against
    x_data (e.g. shape (B, 1, 1, 1) for a batch).
    """
    _check_same_shape(x_data, noise, "interpolate")
    tv = _t_value(t)
    return (1.0 - tv) * x_data + tv * noise


def target_velocity(x_data, noise):
    """Constant path velocity u = noise - x_data."""
    _check_same_shape(x_data, noise, "target_velocity")
    return noise - x_data


def fm_loss(predicted_v, target_v):
    """Mean squared error between predicted and target velocity."""
    _check_same_shape(predicted_v, target_v, "fm_loss")
    diff = predicted_v - target_v
    return (diff * diff).mean()
