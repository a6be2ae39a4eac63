"""Optimization loop with CFG conditioning drop.

Each step: encode the clean target and the corrupted source, draw noise and a
logit-normal timestep per sample, apply the per-sample conditioning drop,
regress the constant path velocity with MSE, clip the global gradient norm,
and take one Adam step under a linear-warmup-then-constant learning rate.

Adam stands in for the memory-optimized optimizer used at scale; learning
rate, clipping, and warmup are what shape the result at desk scale and are
preserved exactly. The substitution is recorded in the checkpoint metadata.

Determinism contract: with a fixed seed and the single-threaded loader (the
only loader there is), two runs produce bit-identical loss curves. All
randomness flows from one numpy Generator plus the seeded weight init.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .errors import ContractError, NumericalError, ParameterError
from .flow import fm_loss, interpolate, sample_timesteps, target_velocity, timestep_array
from .metrics import mae_normed, ssim, to_unit_range
from .model import Variant, apply_condition_drop, build_model, ConditioningBundle
from .sampler import SampleConfig, sample


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    warmup_steps: int = 30
    grad_clip_norm: float = 0.1
    p_drop: float = 0.1
    seed: int = 1
    variant: Variant = Variant.PRIMARY
    eval_every: int = 0
    t_mean: float = 0.0
    t_std: float = 1.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ParameterError(f"lr must be > 0, got {self.lr}")
        if self.grad_clip_norm <= 0:
            raise ParameterError(f"grad_clip_norm must be > 0, got {self.grad_clip_norm}")
        if not (0.0 <= self.p_drop <= 1.0):
            raise ParameterError(f"p_drop must lie in [0, 1], got {self.p_drop}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be >= 1")


def lr_at(step, config):
    """Learning rate at 1-based optimization step: linear ramp, then constant."""
    if config.warmup_steps > 0 and step < config.warmup_steps:
        return config.lr * step / config.warmup_steps
    return config.lr


def _grad_norm(parameters):
    total = 0.0
    for p in parameters:
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def train_step(batch, model, optimizer, config, step, codec, rng, on_bundle=None, stats=None):
    """One optimization step over a (clean, corrupted) batch.

    Args:
        batch: dict with 'clean' and 'corrupted' (B, 1, S, S) tensors in [-1, 1].
        step: 1-based global step index (drives the warmup schedule).
        codec: frozen Codec for both encodings.
        rng: numpy Generator driving noise, timesteps, and the drop draws.
        on_bundle: optional hook receiving the post-drop ConditioningBundle
            (instrumentation only).
        stats: optional dict; receives extras like the pre-clip gradient norm.

    Returns:
        (loss, grad_norm): scalar loss and the post-clip global gradient norm.
    """
    clean, corrupted = batch["clean"], batch["corrupted"]
    x_data = codec.encode_batch(clean)
    cond_latent = codec.encode_batch(corrupted)

    noise = torch.from_numpy(rng.standard_normal(tuple(x_data.shape)).astype(np.float32))
    ts = sample_timesteps(x_data.shape[0], config.t_mean, config.t_std, rng)
    t_flat = torch.from_numpy(timestep_array(ts).astype(np.float32))
    x_t = interpolate(x_data, noise, t_flat.view(-1, 1, 1, 1))
    target = target_velocity(x_data, noise)

    bundle = ConditioningBundle.conditional(cond_latent)
    bundle = apply_condition_drop(bundle, config.p_drop, config.variant, rng)
    if on_bundle is not None:
        on_bundle(bundle)

    predicted = model(x_t, t_flat, bundle)
    loss = fm_loss(predicted, target)
    loss_value = float(loss.detach())
    if not math.isfinite(loss_value):
        raise NumericalError(
            f"non-finite loss at step {step}",
            snapshot={"step": step, "loss": loss_value, "lr": lr_at(step, config)},
        )

    optimizer.zero_grad()
    loss.backward()
    preclip = float(torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm))
    for group in optimizer.param_groups:
        group["lr"] = lr_at(step, config)
    grad_norm = _grad_norm(model.parameters())
    optimizer.step()
    if stats is not None:
        stats["grad_norm_preclip"] = preclip
    return loss_value, grad_norm


def _load_split(manifest, split):
    records = manifest.records_for(split)
    clean = [np.load(manifest.resolve(r.clean_path)) for r in records]
    corrupted = [np.load(manifest.resolve(r.corrupted_path)) for r in records]
    return clean, corrupted


def _eval_on_val(model, model_config, codec, val_clean, val_corrupted, seed):
    ssims, maes = [], []
    cfg = SampleConfig(steps=5, guidance=1.0, seed=seed)
    for clean, corrupted in zip(val_clean, val_corrupted):
        restored = sample(model, corrupted, cfg, model_config, codec)
        ssims.append(ssim(to_unit_range(clean, (-1, 1)), to_unit_range(restored, (-1, 1))))
        maes.append(mae_normed(clean, restored))
    return float(np.mean(ssims)), float(np.mean(maes))


def fit(manifest, model_config, train_config, codec, out_dir):
    """Train a velocity model on the manifest's TRAIN split.

    Writes a line-delimited training log (step, loss, grad_norm, lr, dropped)
    plus periodic VAL records, and persists the final checkpoint.

    Returns:
        Path of the written checkpoint archive.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_clean, train_corrupted = _load_split(manifest, "train")
    if not train_clean:
        raise ContractError("manifest has no TRAIN records")
    val_clean, val_corrupted = _load_split(manifest, "val")

    clean_t = torch.from_numpy(np.stack(train_clean)).unsqueeze(1)
    corr_t = torch.from_numpy(np.stack(train_corrupted)).unsqueeze(1)

    model = build_model(model_config, train_config.seed)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=train_config.lr, weight_decay=0.0)
    rng = np.random.default_rng(train_config.seed)

    n = clean_t.shape[0]
    step = 0
    log_path = out_dir / "train_log.jsonl"
    with log_path.open("w") as log:
        for epoch in range(train_config.epochs):
            order = rng.permutation(n)
            for start in range(0, n, train_config.batch_size):
                idx = torch.from_numpy(order[start : start + train_config.batch_size].copy())
                batch = {"clean": clean_t[idx], "corrupted": corr_t[idx]}
                step += 1
                dropped = 0

                def count_drops(bundle):
                    nonlocal dropped
                    flat = bundle.y.flatten(1).abs().sum(dim=1)
                    dropped = int((flat == 0).sum())

                stats = {}
                try:
                    loss, grad_norm = train_step(
                        batch, model, optimizer, train_config, step, codec, rng,
                        on_bundle=count_drops, stats=stats,
                    )
                except NumericalError as exc:
                    (out_dir / "diagnostic.json").write_text(
                        json.dumps(exc.snapshot, indent=2) + "\n"
                    )
                    raise
                log.write(
                    json.dumps(
                        {
                            "step": step,
                            "epoch": epoch,
                            "loss": loss,
                            "grad_norm": grad_norm,
                            "grad_norm_preclip": stats.get("grad_norm_preclip"),
                            "lr": lr_at(step, train_config),
                            "dropped": dropped,
                            "batch": int(idx.shape[0]),
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
                if (
                    train_config.eval_every > 0
                    and step % train_config.eval_every == 0
                    and val_clean
                ):
                    val_ssim, val_mae = _eval_on_val(
                        model, model_config, codec, val_clean, val_corrupted, train_config.seed
                    )
                    model.train()
                    log.write(
                        json.dumps(
                            {"step": step, "val_ssim": val_ssim, "val_mae": val_mae},
                            sort_keys=True,
                        )
                        + "\n"
                    )

    path = out_dir / "model.ckpt"
    ckpt.save_model(
        path,
        model,
        extra={
            "optimizer": "adam (CAME-class optimizer substituted at desk scale)",
            "lr": repr(train_config.lr),
            "warmup_steps": train_config.warmup_steps,
            "grad_clip_norm": repr(train_config.grad_clip_norm),
            "epochs": train_config.epochs,
            "batch_size": train_config.batch_size,
            "train_seed": train_config.seed,
            "steps_total": step,
        },
    )
    return path
