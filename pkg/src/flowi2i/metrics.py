"""Full-reference (SSIM, MAE) and distribution-based (FID, KID) evaluation.

SSIM follows the canonical formulation: an 11x11 Gaussian window (sigma 1.5),
biased weighted local moments, and the mean of the luminance-contrast-structure
product over *valid* window positions only (no padding).

FID is computed from Gaussian fits (mean, unbiased covariance) of feature
rows:

    ||mu_p - mu_q||^2 + tr(S_p) + tr(S_q) - 2 * tr((S_p^1/2 S_q S_p^1/2)^1/2)

with the matrix square roots taken by eigendecomposition and tiny negative
eigenvalues clamped to zero.

KID is the unbiased squared MMD under the polynomial kernel
k(x, y) = (x.y / d + 1)^3, averaged over random subset pairs and reported as
mean +/- std, mirroring the usual "value ± std" table format.

The default feature extractor is a frozen, seed-initialized random conv
encoder with global average pooling (d=64). Absolute FID/KID values under it
are not comparable to pretrained-feature numbers; only orderings and the
metric mathematics are meaningful, which is what the test suite checks.
"""

import json
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import NumericalError, ParameterError, ShapeError


@dataclass(frozen=True)
class SsimSpec:
    window_size: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def __post_init__(self):
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ParameterError(f"window_size must be odd and positive, got {self.window_size}")
        if self.window_sigma <= 0 or self.data_range <= 0:
            raise ParameterError("window_sigma and data_range must be positive")
        if (self.k1 * self.data_range) ** 2 <= 0 or (self.k2 * self.data_range) ** 2 <= 0:
            raise ParameterError("stability constants C1, C2 must be strictly positive")


DEFAULT_SSIM = SsimSpec()


def _gaussian_window(size, sigma):
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def _windowed_sums(img, win):
    # valid-mode weighted local sums via a sliding view; exact, no padding
    w = win.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(img, (w, w))
    return np.einsum("ijkl,kl->ij", view, win)


def ssim(a, b, spec=DEFAULT_SSIM):
    """Structural similarity between two grayscale images.

    Args:
        a, b: 2-D arrays with values spanning at most spec.data_range.
        spec: window and constant configuration.

    Returns:
        Mean SSIM over all valid window positions, in [-1, 1].
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ShapeError(f"ssim expects 2-D images, got ndim={a.ndim}")
    w = spec.window_size
    if w > min(a.shape):
        raise ParameterError(f"window {w} larger than image {a.shape}")

    win = _gaussian_window(w, spec.window_sigma)
    c1 = (spec.k1 * spec.data_range) ** 2
    c2 = (spec.k2 * spec.data_range) ** 2

    mu_a = _windowed_sums(a, win)
    mu_b = _windowed_sums(b, win)
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    mu_ab = mu_a * mu_b
    # biased weighted moments, as in the reference formulation
    var_a = _windowed_sums(a * a, win) - mu_aa
    var_b = _windowed_sums(b * b, win) - mu_bb
    cov_ab = _windowed_sums(a * b, win) - mu_ab

    num = (2.0 * mu_ab + c1) * (2.0 * cov_ab + c2)
    den = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def to_unit_range(image, value_range):
    """Linearly map an image from a declared (lo, hi) range to [0, 1]."""
    lo, hi = value_range
    if hi <= lo:
        raise ParameterError(f"invalid value range {value_range}")
    return (np.asarray(image, dtype=np.float64) - lo) / (hi - lo)


def mae_normed(a, b, value_range=(-1.0, 1.0)):
    """Mean absolute error after mapping both images to [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"mae_normed: shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(to_unit_range(a, value_range) - to_unit_range(b, value_range))))


@dataclass(frozen=True)
class FeatureStats:
    """Gaussian sufficient statistics of a feature matrix."""

    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise ParameterError(f"need at least 2 samples, got {self.count}")
        if self.cov.shape != (self.mean.shape[0], self.mean.shape[0]):
            raise ShapeError(f"cov shape {self.cov.shape} inconsistent with mean {self.mean.shape}")
        asym = float(np.max(np.abs(self.cov - self.cov.T))) if self.cov.size else 0.0
        if asym > 1e-8:
            raise NumericalError(f"covariance asymmetric by {asym:.3e}")


def fit_stats(features):
    """Sample mean and unbiased covariance of an (n, d) feature matrix."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"features must be 2-D, got ndim={x.ndim}")
    n = x.shape[0]
    if n < 2:
        raise ParameterError(f"need at least 2 feature rows, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    cov = 0.5 * (cov + cov.T)
    return FeatureStats(mean=mean, cov=cov, count=n)


_EIG_CLAMP_REL = 1e-6


def _sqrtm_psd(mat, what):
    vals, vecs = np.linalg.eigh(mat)
    scale = max(float(np.trace(mat)), 1.0)
    if vals.min() < -_EIG_CLAMP_REL * scale:
        raise NumericalError(
            f"{what}: strongly non-PSD matrix (min eigenvalue {vals.min():.3e}, trace {scale:.3e})"
        )
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T, vals


def frechet_distance(p, q):
    """Frechet distance between two Gaussian feature fits."""
    if p.mean.shape != q.mean.shape:
        raise ShapeError(f"dimension mismatch {p.mean.shape} vs {q.mean.shape}")
    dmu = p.mean - q.mean
    sp_root, _ = _sqrtm_psd(p.cov, "frechet_distance: cov p")
    inner = sp_root @ q.cov @ sp_root
    inner = 0.5 * (inner + inner.T)
    _, vals = _sqrtm_psd(inner, "frechet_distance: cross term")
    trace_sqrt = float(np.sqrt(vals).sum())
    fid = float(dmu @ dmu + np.trace(p.cov) + np.trace(q.cov) - 2.0 * trace_sqrt)
    # exact-zero case can land a hair negative through the eigensolver
    return max(fid, 0.0)


def _poly_kernel(x, y):
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x, y):
    """Unbiased squared MMD under the cubic polynomial kernel.

    Diagonal terms are excluded from the within-set sums.
    """
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise ParameterError("need at least 2 rows per set for the unbiased estimate")
    k_xx = _poly_kernel(x, x)
    k_yy = _poly_kernel(y, y)
    k_xy = _poly_kernel(x, y)
    sum_xx = (k_xx.sum() - np.trace(k_xx)) / (m * (m - 1))
    sum_yy = (k_yy.sum() - np.trace(k_yy)) / (n * (n - 1))
    sum_xy = k_xy.sum() / (m * n)
    return float(sum_xx + sum_yy - 2.0 * sum_xy)


def kid(features_a, features_b, subset_size=None, n_subsets=100, rng=None):
    """Kernel distance between two feature sets.

    Args:
        features_a, features_b: (n, d) and (m, d) feature matrices.
        subset_size: rows drawn per subset; defaults to min(100, n, m).
        n_subsets: number of subset pairs averaged over.
        rng: np.random.Generator or int seed; split deterministically per
            subset index.

    Returns:
        (mean, std) of the unbiased MMD^2 across subsets.
    """
    x = np.asarray(features_a, dtype=np.float64)
    y = np.asarray(features_b, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(f"feature matrices incompatible: {x.shape} vs {y.shape}")
    if n_subsets < 1:
        raise ParameterError(f"n_subsets must be >= 1, got {n_subsets}")
    if subset_size is None:
        subset_size = min(100, x.shape[0], y.shape[0])
    if subset_size > min(x.shape[0], y.shape[0]):
        raise ParameterError(
            f"subset_size {subset_size} exceeds set sizes {x.shape[0]}/{y.shape[0]}"
        )
    if subset_size < 2:
        raise ParameterError(f"subset_size must be >= 2, got {subset_size}")

    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    children = rng.spawn(n_subsets)
    scores = np.empty(n_subsets, dtype=np.float64)
    for i, child in enumerate(children):
        ia = child.choice(x.shape[0], size=subset_size, replace=False)
        ib = child.choice(y.shape[0], size=subset_size, replace=False)
        scores[i] = mmd2_unbiased(x[ia], y[ib])
    return float(scores.mean()), float(scores.std())


def format_kid(mean, std):
    """Render a KID estimate in the conventional 'mean ± std' table format."""
    return f"{mean:.6f} ± {std:.6f}"


class RandomConvFeatures(nn.Module):
    """Frozen random conv encoder used as the default desk-scale extractor.

    Weights are drawn once from a seeded generator and never trained, so
    features are bit-reproducible for a given (seed, dim).
    """

    def __init__(self, dim=64, seed=0, value_range=(-1.0, 1.0)):
        super().__init__()
        self.dim = dim
        self.value_range = value_range
        widths = [1, 16, 32, dim]
        layers = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            layers.append(nn.Conv2d(cin, cout, kernel_size=3, stride=2, padding=1))
            layers.append(nn.SiLU())
        self.net = nn.Sequential(*layers)
        gen = torch.Generator().manual_seed(seed)
        for mod in self.net:
            if isinstance(mod, nn.Conv2d):
                fan_in = mod.in_channels * mod.kernel_size[0] * mod.kernel_size[1]
                mod.weight.data.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
                mod.bias.data.zero_()
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def __call__(self, images):
        lo, hi = self.value_range
        x = (np.asarray(images, dtype=np.float32) - lo) / (hi - lo)
        out = []
        # fixed internal batching keeps outputs independent of caller chunking
        for start in range(0, x.shape[0], 32):
            chunk = torch.from_numpy(x[start : start + 32]).unsqueeze(1)
            feats = self.net(chunk).mean(dim=(2, 3))
            out.append(feats.numpy())
        return np.concatenate(out, axis=0)


def extract_features(images, extractor):
    """Apply a feature extractor to a stack of images.

    Args:
        images: list/array of 2-D images with one common shape.
        extractor: callable mapping an (n, H, W) stack to an (n, d) matrix.

    Returns:
        (n, d) float array, one row per image.
    """
    if len(images) == 0:
        raise ParameterError("extract_features: empty image list")
    shapes = {tuple(np.asarray(im).shape) for im in images}
    if len(shapes) != 1:
        raise ShapeError(f"images must share one shape, got {sorted(shapes)}")
    stack = np.stack([np.asarray(im) for im in images], axis=0)
    feats = np.asarray(extractor(stack))
    if feats.shape[0] != stack.shape[0]:
        raise ShapeError("extractor returned a row count different from the image count")
    return feats


def write_eval_report(out_dir, mode, entries, fingerprint):
    """Persist an evaluation as a text table plus a machine-readable record.

    Args:
        out_dir: directory receiving report.txt / report.json.
        mode: 'paired' or 'distribution'.
        entries: list of dicts with keys name, value and optional std.
        fingerprint: short string identifying the metric configuration.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"mode: {mode}", f"config: {fingerprint}", ""]
    lines.append(f"{'metric':<12} value")
    lines.append("-" * 32)
    for e in entries:
        if e.get("std") is not None:
            lines.append(f"{e['name']:<12} {format_kid(e['value'], e['std'])}")
        else:
            lines.append(f"{e['name']:<12} {e['value']:.6f}")
    (out_dir / "report.txt").write_text("\n".join(lines) + "\n")
    record = {"mode": mode, "config": fingerprint, "metrics": entries}
    (out_dir / "report.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return out_dir / "report.json"
