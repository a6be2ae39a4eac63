"""Flat key-value run configuration.

A config file is plain text, one `key = value` per line, `#` comments
allowed. Unknown keys are rejected; missing keys take the documented
defaults below. Every command echoes its fully resolved configuration into
its output directory so runs are self-describing and repeatable.
"""

from pathlib import Path

from .codec import Codec, CodecKind, CodecSpec
from .data import Interpolation, PreprocessSpec
from .errors import ConfigError
from .metrics import SsimSpec
from .model import ModelConfig, Variant
from .motion import GateSpec
from .sampler import SampleConfig, SolverKind
from .training import TrainConfig

SCHEMA_VERSION = 1

ECHO_NAME = "config_resolved.txt"


def _parse_bool(v):
    if v.lower() in ("true", "1", "yes"):
        return True
    if v.lower() in ("false", "0", "no"):
        return False
    raise ValueError(v)


# key -> (parser, default)
KNOWN_KEYS = {
    "schema_version": (int, SCHEMA_VERSION),
    # dataset build
    "data.phantom_count": (int, 64),
    "data.source_dir": (str, ""),
    "data.target_size": (int, 128),
    "data.interpolation": (Interpolation, Interpolation.BILINEAR),
    "data.gate_s0": (float, 0.6),
    "data.gate_s1": (float, 0.9),
    "data.max_retries": (int, 50),
    "data.pairs_per_clean": (int, 1),
    "data.split_train": (float, 0.8),
    "data.split_val": (float, 0.1),
    "data.split_test": (float, 0.1),
    "data.failure_tolerance": (float, 0.0),
    "data.seed": (int, 0),
    # motion simulator
    "motion.dmax_pixels": (float, 8.0),
    "motion.theta_max_rad": (float, 0.1),
    "motion.severity_init": (float, 0.5),
    # codec
    "codec.kind": (CodecKind, CodecKind.IDENTITY),
    "codec.spatial_factor": (int, 1),
    "codec.latent_channels": (int, 1),
    "codec.checkpoint": (str, ""),
    # velocity network
    "model.patch_size": (int, 16),
    "model.hidden_dim": (int, 128),
    "model.depth": (int, 4),
    "model.heads": (int, 4),
    "model.control_depth": (int, 2),
    "model.variant": (Variant, Variant.PRIMARY),
    "model.p_drop": (float, 0.1),
    # training
    "train.epochs": (int, 100),
    "train.batch_size": (int, 16),
    "train.lr": (float, 1e-4),
    "train.warmup_steps": (int, 30),
    "train.grad_clip_norm": (float, 0.1),
    "train.seed": (int, 1),
    "train.eval_every": (int, 0),
    "train.t_mean": (float, 0.0),
    "train.t_std": (float, 1.0),
    # sampling
    "sample.steps": (int, 5),
    "sample.guidance": (float, 1.0),
    "sample.solver": (SolverKind, SolverKind.EULER),
    "sample.seed": (int, 0),
    # metrics
    "metrics.ssim_window": (int, 11),
    "metrics.ssim_sigma": (float, 1.5),
    "metrics.ssim_k1": (float, 0.01),
    "metrics.ssim_k2": (float, 0.03),
    "metrics.kid_subset_size": (int, 0),  # 0 -> min(100, n, m)
    "metrics.kid_subsets": (int, 100),
    "metrics.feature_dim": (int, 64),
    "metrics.feature_seed": (int, 0),
}


class RunConfig:
    """Resolved configuration: every known key bound to a typed value."""

    def __init__(self, values):
        self.values = values

    def __getitem__(self, key):
        return self.values[key]

    def echo(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        lines = []
        for key in sorted(self.values):
            value = self.values[key]
            text = value.value if hasattr(value, "value") else repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{key} = {text}")
        (out_dir / ECHO_NAME).write_text("\n".join(lines) + "\n")

    # typed views -----------------------------------------------------------

    def preprocess_spec(self):
        return PreprocessSpec(
            target_size=self["data.target_size"], interpolation=self["data.interpolation"]
        )

    def gate_spec(self):
        return GateSpec(
            s0=self["data.gate_s0"], s1=self["data.gate_s1"], max_retries=self["data.max_retries"]
        )

    def codec_spec(self):
        return CodecSpec(
            kind=self["codec.kind"],
            spatial_factor=self["codec.spatial_factor"],
            latent_channels=self["codec.latent_channels"],
        )

    def codec(self):
        from .codec import load_codec

        if self["codec.kind"] == CodecKind.IDENTITY:
            return Codec(self.codec_spec())
        path = self["codec.checkpoint"]
        if not path:
            raise ConfigError("codec.kind=strided_ae requires codec.checkpoint")
        return load_codec(path)

    def model_config(self, variant=None):
        factor = self["codec.spatial_factor"]
        return ModelConfig(
            latent_channels=self["codec.latent_channels"],
            latent_size=self["data.target_size"] // factor,
            patch_size=self["model.patch_size"],
            hidden_dim=self["model.hidden_dim"],
            depth=self["model.depth"],
            heads=self["model.heads"],
            control_depth=self["model.control_depth"],
            variant=variant or self["model.variant"],
            p_drop=self["model.p_drop"],
        )

    def train_config(self, variant=None):
        return TrainConfig(
            epochs=self["train.epochs"],
            batch_size=self["train.batch_size"],
            lr=self["train.lr"],
            warmup_steps=self["train.warmup_steps"],
            grad_clip_norm=self["train.grad_clip_norm"],
            p_drop=self["model.p_drop"],
            seed=self["train.seed"],
            variant=variant or self["model.variant"],
            eval_every=self["train.eval_every"],
            t_mean=self["train.t_mean"],
            t_std=self["train.t_std"],
        )

    def sample_config(self):
        return SampleConfig(
            steps=self["sample.steps"],
            guidance=self["sample.guidance"],
            solver=self["sample.solver"],
            seed=self["sample.seed"],
        )

    def ssim_spec(self):
        return SsimSpec(
            window_size=self["metrics.ssim_window"],
            window_sigma=self["metrics.ssim_sigma"],
            k1=self["metrics.ssim_k1"],
            k2=self["metrics.ssim_k2"],
        )

    def split_fractions(self):
        return (self["data.split_train"], self["data.split_val"], self["data.split_test"])


def _parse_value(key, raw):
    parser, _ = KNOWN_KEYS[key]
    try:
        return parser(raw)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def load_config(path=None, overrides=None):
    """Resolve a RunConfig from an optional file plus typed overrides.

    Args:
        path: config file path or None for pure defaults.
        overrides: mapping key -> raw string (e.g. from CLI flags), applied
            after the file.

    Raises:
        ConfigError: unknown key, unparsable value, or schema mismatch.
    """
    values = {key: default for key, (_, default) in KNOWN_KEYS.items()}
    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, raw = stripped.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in KNOWN_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, raw)
    for key, raw in (overrides or {}).items():
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, raw) if isinstance(raw, str) else raw
    if values["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(
            f"schema_version {values['schema_version']} unsupported (expected {SCHEMA_VERSION})"
        )
    return RunConfig(values)
