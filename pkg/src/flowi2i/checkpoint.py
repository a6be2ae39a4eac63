"""Deterministic checkpoint archives.

A checkpoint is a single zip archive holding

    config.txt        flat "key = value" text (sorted keys)
    arrays/<name>.npy one entry per named parameter array (sorted names)

Zip entries carry a fixed timestamp and no compression, so save -> load ->
save is byte-stable. Loading rebuilds the module from the config and
validates every array name and shape against it.
"""

import io
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import ShapeError
from .model import ModelConfig, Variant, VelocityModel

FORMAT_FIELD = "format"
MODEL_FORMAT = "flowi2i-velocity-1"
CODEC_FORMAT = "flowi2i-codec-1"

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_archive(path, fields, arrays):
    """Write fields + named arrays as one deterministic archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:

        def add(name, payload):
            info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
            zf.writestr(info, payload)

        text = "".join(f"{key} = {fields[key]}\n" for key in sorted(fields))
        add("config.txt", text.encode())
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[name]))
            add(f"arrays/{name}.npy", buf.getvalue())
    return path


def load_archive(path):
    """Read back (fields, arrays) from an archive written by save_archive."""
    fields, arrays = {}, {}
    with zipfile.ZipFile(path, "r") as zf:
        for line in zf.read("config.txt").decode().splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition(" = ")
            fields[key] = value
        for name in zf.namelist():
            if name.startswith("arrays/"):
                arrays[name[len("arrays/") : -len(".npy")]] = np.load(io.BytesIO(zf.read(name)))
    return fields, arrays


_MODEL_INT_KEYS = (
    "latent_channels",
    "latent_size",
    "patch_size",
    "hidden_dim",
    "depth",
    "heads",
    "control_depth",
)


def model_config_fields(config):
    fields = {key: str(getattr(config, key)) for key in _MODEL_INT_KEYS}
    fields["variant"] = config.variant.value
    fields["p_drop"] = repr(config.p_drop)
    return fields


def parse_model_config(fields):
    kwargs = {key: int(fields[key]) for key in _MODEL_INT_KEYS}
    kwargs["variant"] = Variant(fields["variant"])
    kwargs["p_drop"] = float(fields["p_drop"])
    return ModelConfig(**kwargs)


def save_model(path, model, extra=None):
    """Persist a VelocityModel plus free-form metadata (prefixed 'meta.')."""
    fields = {FORMAT_FIELD: MODEL_FORMAT, **model_config_fields(model.config)}
    for key, value in (extra or {}).items():
        fields[f"meta.{key}"] = str(value)
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    return save_archive(path, fields, arrays)


def load_model(path):
    """Load a VelocityModel; returns (model, config, meta dict).

    Raises ShapeError if the stored arrays do not match the configuration.
    """
    fields, arrays = load_archive(path)
    if fields.get(FORMAT_FIELD) != MODEL_FORMAT:
        raise ShapeError(f"{path} is not a velocity-model checkpoint ({fields.get(FORMAT_FIELD)})")
    config = parse_model_config(fields)
    model = VelocityModel(config)
    expected = {name: tuple(t.shape) for name, t in model.state_dict().items()}
    got = {name: arr.shape for name, arr in arrays.items()}
    if set(expected) != set(got):
        missing = sorted(set(expected) ^ set(got))
        raise ShapeError(f"checkpoint arrays do not match the config (mismatched: {missing[:5]})")
    for name, shape in expected.items():
        if got[name] != shape:
            raise ShapeError(f"array {name} has shape {got[name]}, config implies {shape}")
    model.load_state_dict({name: torch.from_numpy(arr) for name, arr in arrays.items()})
    model.eval()
    meta = {k[len("meta.") :]: v for k, v in fields.items() if k.startswith("meta.")}
    return model, config, meta
