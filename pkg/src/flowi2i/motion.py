"""Retrospective k-space rigid-motion corruption with SSIM-gated acceptance.

The corruption model is inter-segment rigid motion under Cartesian row-wise
acquisition: k-space rows are split into contiguous segments, each segment is
"acquired" from a rigidly moved copy of the image (rotation about the center
via bilinear resampling, translation as the exact linear phase ramp
exp(-i 2 pi (kx dx + ky dy) / N)), and the composite k-space is inverted. The
magnitude image, clipped and mapped back to the declared value range, is the
corrupted output.

Rows are indexed in fftshifted order so "central rows" means low frequencies;
the segment containing the k-space center keeps zero motion with probability
0.5, which preserves gross contrast.

Pair generation retries with multiplicative severity adaptation until the
clean/corrupted SSIM falls strictly inside the configured gate interval.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import GateFailure, ParameterError, ShapeError, TrajectoryError
from .metrics import DEFAULT_SSIM, ssim, to_unit_range

DEFAULT_DMAX_PIXELS = 8.0
DEFAULT_THETA_MAX_RAD = 0.1


@dataclass(frozen=True)
class Segment:
    """One contiguous block of k-space rows acquired at a fixed pose."""

    row_start: int
    row_stop: int  # half-open
    dx: float
    dy: float
    theta: float

    def is_static(self):
        return self.dx == 0.0 and self.dy == 0.0 and self.theta == 0.0


@dataclass(frozen=True)
class MotionTrajectory:
    segments: tuple

    def validate(self, rows):
        spans = sorted((s.row_start, s.row_stop) for s in self.segments)
        cursor = 0
        for start, stop in spans:
            if start != cursor or stop <= start:
                raise TrajectoryError(
                    f"segments must tile rows [0, {rows}) contiguously, got spans {spans}"
                )
            cursor = stop
        if cursor != rows:
            raise TrajectoryError(f"segments cover [0, {cursor}) but the image has {rows} rows")

    def is_identity(self):
        return all(s.is_static() for s in self.segments)

    @classmethod
    def identity(cls, rows):
        return cls(segments=(Segment(0, rows, 0.0, 0.0, 0.0),))

    def to_json(self):
        return {
            "segments": [
                [s.row_start, s.row_stop, s.dx, s.dy, s.theta] for s in self.segments
            ]
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            segments=tuple(Segment(int(a), int(b), dx, dy, th) for a, b, dx, dy, th in obj["segments"])
        )


@dataclass(frozen=True)
class GateSpec:
    s0: float = 0.6
    s1: float = 0.9
    max_retries: int = 50

    def __post_init__(self):
        if not (0.0 < self.s0 < self.s1 < 1.0):
            raise ParameterError(f"gate requires 0 < s0 < s1 < 1, got ({self.s0}, {self.s1})")
        if self.max_retries < 1:
            raise ParameterError(f"max_retries must be >= 1, got {self.max_retries}")


@dataclass
class PairRecord:
    """One aligned (clean, corrupted) sample with its gate SSIM and provenance."""

    clean_path: str | None
    corrupted_path: str | None
    gate_ssim: float
    trajectory: MotionTrajectory
    seed: int
    split: str | None = None
    corrupted: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_json(self):
        return {
            "clean": self.clean_path,
            "corrupted": self.corrupted_path,
            "gate_ssim": self.gate_ssim,
            "trajectory": self.trajectory.to_json(),
            "seed": self.seed,
            "split": self.split,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            clean_path=obj["clean"],
            corrupted_path=obj["corrupted"],
            gate_ssim=obj["gate_ssim"],
            trajectory=MotionTrajectory.from_json(obj["trajectory"]),
            seed=obj["seed"],
            split=obj.get("split"),
        )


def _phase_ramp(n, dx, dy):
    fy = np.fft.fftfreq(n)[:, None]
    fx = np.fft.fftfreq(n)[None, :]
    return np.exp(-2j * np.pi * (fx * dx + fy * dy))


def corrupt(image, trajectory, value_range=(-1.0, 1.0)):
    """Apply a motion trajectory to an image through composite k-space.

    Args:
        image: square 2-D array in the declared value range.
        trajectory: MotionTrajectory tiling all k-space rows.
        value_range: (lo, hi) range of the input; the output is mapped back
            into it and clipped.

    Returns:
        Corrupted image, same shape and dtype as the input.
    """
    img = np.asarray(image)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ShapeError(f"corrupt expects a square 2-D image, got {img.shape}")
    n = img.shape[0]
    trajectory.validate(n)

    work = to_unit_range(img, value_range)
    kspace = np.zeros((n, n), dtype=np.complex128)
    for seg in trajectory.segments:
        if seg.theta != 0.0:
            moved = ndimage.rotate(
                work, math.degrees(seg.theta), reshape=False, order=1, mode="constant", cval=0.0
            )
        else:
            moved = work
        spec = np.fft.fft2(moved)
        if seg.dx != 0.0 or seg.dy != 0.0:
            spec = spec * _phase_ramp(n, seg.dx, seg.dy)
        shifted = np.fft.fftshift(spec, axes=0)
        kspace[seg.row_start : seg.row_stop] = shifted[seg.row_start : seg.row_stop]

    out = np.abs(np.fft.ifft2(np.fft.ifftshift(kspace, axes=0)))
    np.clip(out, 0.0, 1.0, out=out)
    lo, hi = value_range
    return (out * (hi - lo) + lo).astype(img.dtype, copy=False)


def draw_trajectory(severity, rng, rows, dmax=DEFAULT_DMAX_PIXELS, theta_max=DEFAULT_THETA_MAX_RAD):
    """Draw a random trajectory whose motion amplitude scales with severity.

    Rows are partitioned into 2-8 contiguous segments (more at higher
    severity); per segment dx, dy ~ U(+-severity*dmax) pixels and
    theta ~ U(+-severity*theta_max) radians. The segment holding the central
    k-space row is zeroed with probability 0.5.
    """
    if rows < 2:
        raise ParameterError(f"rows must be >= 2, got {rows}")
    if not (0.0 <= severity <= 1.0):
        raise ParameterError(f"severity must lie in [0, 1], got {severity}")

    n_seg = 2 + int(round(severity * 6))
    n_seg = min(n_seg, rows)
    cuts = np.sort(rng.choice(np.arange(1, rows), size=n_seg - 1, replace=False))
    bounds = [0, *cuts.tolist(), rows]

    segments = []
    for start, stop in zip(bounds[:-1], bounds[1:]):
        dx = float(rng.uniform(-severity * dmax, severity * dmax))
        dy = float(rng.uniform(-severity * dmax, severity * dmax))
        theta = float(rng.uniform(-severity * theta_max, severity * theta_max))
        segments.append(Segment(int(start), int(stop), dx, dy, theta))

    if rng.random() < 0.5:
        center = rows // 2
        for i, seg in enumerate(segments):
            if seg.row_start <= center < seg.row_stop:
                segments[i] = Segment(seg.row_start, seg.row_stop, 0.0, 0.0, 0.0)
                break
    return MotionTrajectory(segments=tuple(segments))


def generate_pair(
    clean,
    gate,
    seed,
    value_range=(-1.0, 1.0),
    dmax=DEFAULT_DMAX_PIXELS,
    theta_max=DEFAULT_THETA_MAX_RAD,
    severity_init=0.5,
    ssim_spec=DEFAULT_SSIM,
):
    """Corrupt `clean` until the gate SSIM interval is hit.

    Severity adapts multiplicatively: x1.5 when the draw was too mild
    (ssim >= s1), x0.67 when too harsh (ssim <= s0). Deterministic given
    (clean, gate, seed).

    Returns:
        PairRecord with the accepted trajectory, gate SSIM, seed, and the
        corrupted image attached in-memory (paths are filled in when the
        record is persisted by the dataset builder).

    Raises:
        GateFailure: after gate.max_retries misses, carrying the closest
            achieved SSIM.
    """
    rng = np.random.default_rng(seed)
    severity = float(severity_init)
    clean01 = to_unit_range(clean, value_range)
    best_ssim = None
    best_gap = math.inf
    for _ in range(gate.max_retries):
        traj = draw_trajectory(severity, rng, clean.shape[0], dmax=dmax, theta_max=theta_max)
        corrupted = corrupt(clean, traj, value_range=value_range)
        s = ssim(clean01, to_unit_range(corrupted, value_range), ssim_spec)
        if gate.s0 < s < gate.s1:
            return PairRecord(
                clean_path=None,
                corrupted_path=None,
                gate_ssim=s,
                trajectory=traj,
                seed=seed,
                corrupted=corrupted,
            )
        gap = max(gate.s0 - s, s - gate.s1)
        if gap < best_gap:
            best_gap, best_ssim = gap, s
        if s >= gate.s1:
            # too mild; escape the zero fixed point so escalation always bites
            severity = min(1.0, max(severity * 1.5, 0.05))
        else:
            severity = max(severity * 0.67, 1e-3)
    raise GateFailure(
        f"gate ({gate.s0}, {gate.s1}) not reached in {gate.max_retries} tries "
        f"(closest SSIM {best_ssim:.4f})",
        best_ssim=best_ssim,
    )


def recompute_gate_ssim(clean, corrupted, value_range=(-1.0, 1.0), ssim_spec=DEFAULT_SSIM):
    """Independent recomputation of the gate SSIM for persisted pairs."""
    return ssim(
        to_unit_range(clean, value_range), to_unit_range(corrupted, value_range), ssim_spec
    )
