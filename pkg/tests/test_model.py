from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import perturb_parameters
from flowi2i.checkpoint import load_archive, load_model, save_archive, save_model
from flowi2i.errors import ContractError, ParameterError, ShapeError
from flowi2i.model import (
    ConditioningBundle,
    ModelConfig,
    Variant,
    apply_condition_drop,
    build_model,
)


class TestConfig:
    def test_divisibility_checks(self):
        with pytest.raises(ParameterError):
            ModelConfig(latent_size=30, patch_size=8)
        with pytest.raises(ParameterError):
            ModelConfig(hidden_dim=30, heads=4)
        with pytest.raises(ParameterError):
            ModelConfig(depth=2, control_depth=3)
        with pytest.raises(ParameterError):
            ModelConfig(p_drop=1.5)

    def test_token_count(self):
        cfg = ModelConfig(latent_size=16, patch_size=2, hidden_dim=32, heads=4,
                          depth=1, control_depth=1)
        assert cfg.tokens == 64


class TestPatchEmbed:
    def test_token_count_and_shape(self, tiny_model, tiny_config):
        grid = torch.randn(3, 1, 32, 32)
        tokens = tiny_model.patch_tokens(grid)
        assert tokens.shape == (3, tiny_config.tokens, tiny_config.hidden_dim)

    def test_zero_grid_zero_bias_gives_zero_tokens(self, tiny_model):
        with torch.no_grad():
            tiny_model.patch.bias.zero_()
        tokens = tiny_model.patch_tokens(torch.zeros(1, 1, 32, 32))
        assert torch.equal(tokens, torch.zeros_like(tokens))

    def test_matches_flatten_and_project_oracle(self, tiny_model, tiny_config):
        grid = torch.randn(1, 1, 32, 32)
        tokens = tiny_model.patch_tokens(grid)
        p = tiny_config.patch_size
        weight = tiny_model.patch.weight.detach().reshape(tiny_config.hidden_dim, -1)
        bias = tiny_model.patch.bias.detach()
        side = 32 // p
        for idx in (0, 5, side * side - 1):
            r, c = divmod(idx, side)
            patch = grid[0, :, r * p : (r + 1) * p, c * p : (c + 1) * p].reshape(-1)
            expected = weight @ patch + bias
            assert torch.allclose(tokens[0, idx], expected, atol=1e-5)

    def test_shape_mismatch(self, tiny_model):
        with pytest.raises(ShapeError):
            tiny_model.patch_tokens(torch.zeros(1, 1, 16, 16))


class TestTimeEmbed:
    def test_deterministic_and_sized(self, tiny_model, tiny_config):
        t = torch.tensor([0.3])
        a = tiny_model.time(t)
        b = tiny_model.time(t)
        assert torch.equal(a, b)
        assert a.shape == (1, tiny_config.hidden_dim)

    @torch.no_grad()
    def test_smoothness_via_finite_difference_lipschitz(self, tiny_model):
        perturb_parameters(tiny_model, seed=1)
        h = 1e-3
        probes = torch.tensor([0.2, 0.3, 0.4, 0.5])
        lip = 0.0
        for t in probes:
            d = tiny_model.time(t.view(1) + h) - tiny_model.time(t.view(1))
            lip = max(lip, float(d.abs().max()) / h)
        tiny_step = 1e-5
        d = tiny_model.time(torch.tensor([0.3 + tiny_step])) - tiny_model.time(torch.tensor([0.3]))
        assert float(d.abs().max()) <= 3.0 * lip * tiny_step


class TestConditionDrop:
    def _bundle(self, batch=6, seed=0):
        gen = torch.Generator().manual_seed(seed)
        latent = torch.randn(batch, 1, 32, 32, generator=gen)
        return ConditioningBundle.conditional(latent)

    def test_no_drop_returns_bundle_unchanged(self):
        bundle = self._bundle()
        out = apply_condition_drop(bundle, 0.0, Variant.PRIMARY, np.random.default_rng(0))
        assert torch.equal(out.y, bundle.y)
        assert torch.equal(out.control, bundle.control)
        out = apply_condition_drop(bundle, 0.0, Variant.BIS, np.random.default_rng(0))
        assert not out.control_absent()

    def test_primary_full_drop_keeps_control(self):
        bundle = self._bundle()
        out = apply_condition_drop(bundle, 1.0, Variant.PRIMARY, np.random.default_rng(1))
        assert torch.equal(out.y, torch.zeros_like(out.y))
        assert torch.equal(out.control, bundle.control)
        assert not out.control_absent()

    def test_bis_full_drop_disables_control(self):
        bundle = self._bundle()
        out = apply_condition_drop(bundle, 1.0, Variant.BIS, np.random.default_rng(1))
        assert torch.equal(out.y, torch.zeros_like(out.y))
        assert out.control_absent()

    def test_primary_without_control_rejected(self):
        bundle = ConditioningBundle(y=torch.zeros(2, 1, 32, 32), control=None)
        with pytest.raises(ContractError):
            apply_condition_drop(bundle, 0.5, Variant.PRIMARY, np.random.default_rng(0))

    def test_drop_frequency_matches_probability(self):
        p = 0.3
        n = 4000
        bundle = ConditioningBundle.conditional(torch.ones(n, 1, 4, 4))
        out = apply_condition_drop(bundle, p, Variant.PRIMARY, np.random.default_rng(3))
        dropped = int((out.y.flatten(1).abs().sum(dim=1) == 0).sum())
        assert abs(dropped / n - p) <= 4.0 * np.sqrt(p * (1 - p) / n)


class TestForward:
    def _inputs(self, batch=2, size=32, seed=0):
        gen = torch.Generator().manual_seed(seed)
        x = torch.randn(batch, 1, size, size, generator=gen)
        t = torch.rand(batch, generator=gen) * 0.8 + 0.1
        src = torch.randn(batch, 1, size, size, generator=gen)
        return x, t, src

    def test_output_shape(self, tiny_model):
        x, t, src = self._inputs()
        out = tiny_model(x, t, ConditioningBundle.conditional(src))
        assert out.shape == x.shape

    def test_zero_init_control_neutrality_is_bitwise(self, tiny_model):
        x, t, src = self._inputs()
        a = tiny_model(x, t, ConditioningBundle(y=src, control=torch.randn(2, 1, 32, 32)))
        b = tiny_model(x, t, ConditioningBundle(y=src, control=torch.randn(2, 1, 32, 32) * 5))
        assert torch.equal(a, b)

    def test_absent_control_semantics(self, tiny_config):
        # BIS: at zero init ABSENT equals a zero control latent; once the
        # injection projections are live they differ (ABSENT = branch off)
        cfg = replace(tiny_config, variant=Variant.BIS)
        model = build_model(cfg, seed=0)
        x, t, _ = self._inputs()
        zero_y = torch.zeros_like(x)
        absent = ConditioningBundle(y=zero_y, control=None)
        zeroed = ConditioningBundle(y=zero_y, control=torch.zeros_like(x))
        assert torch.equal(model(x, t, absent), model(x, t, zeroed))
        perturb_parameters(model, seed=2)
        assert not torch.equal(model(x, t, absent), model(x, t, zeroed))

    def test_primary_requires_control(self, tiny_model):
        x, t, _ = self._inputs()
        with pytest.raises(ContractError):
            tiny_model(x, t, ConditioningBundle(y=torch.zeros_like(x), control=None))

    def test_shape_mismatch_rejected(self, tiny_model):
        x, t, src = self._inputs()
        small = src[:, :, :16, :16]
        with pytest.raises(ShapeError):
            tiny_model(x, t, ConditioningBundle(y=small, control=small))

    def test_shared_patch_projection_feeds_all_three_inputs(self, tiny_model):
        # one projection module; perturbing it moves x, y, and control embeddings
        x, t, src = self._inputs()
        control = torch.randn(2, 1, 32, 32)
        grids = {"x": x, "y": src, "control": control}
        before = {k: tiny_model.patch_tokens(g).clone() for k, g in grids.items()}
        with torch.no_grad():
            tiny_model.patch.weight.add_(0.1)
        after = {k: tiny_model.patch_tokens(g) for k, g in grids.items()}
        for key in grids:
            assert not torch.equal(before[key], after[key])

    def test_per_sample_control_mask_matches_split_batches(self, tiny_config):
        cfg = replace(tiny_config, variant=Variant.BIS)
        model = perturb_parameters(build_model(cfg, seed=0), seed=3)
        x, t, src = self._inputs(batch=2)
        mask = torch.tensor([1.0, 0.0])
        mixed = model(x, t, ConditioningBundle(y=src, control=src, control_active=mask))
        live = model(x[:1], t[:1], ConditioningBundle(y=src[:1], control=src[:1]))
        off = model(x[1:], t[1:], ConditioningBundle(y=src[1:], control=None))
        assert torch.allclose(mixed[0], live[0], atol=1e-5)
        assert torch.allclose(mixed[1], off[0], atol=1e-5)


class TestGradientFlow:
    def test_autograd_matches_finite_differences(self):
        cfg = ModelConfig(latent_channels=1, latent_size=4, patch_size=2, hidden_dim=8,
                          depth=1, heads=2, control_depth=1)
        model = perturb_parameters(build_model(cfg, seed=0), scale=0.05, seed=1).double()
        gen = torch.Generator().manual_seed(4)
        x = torch.randn(1, 1, 4, 4, generator=gen, dtype=torch.float64)
        t = torch.tensor([0.4], dtype=torch.float64)
        src = torch.randn(1, 1, 4, 4, generator=gen, dtype=torch.float64)
        bundle = ConditioningBundle.conditional(src)

        def loss_fn():
            out = model(x, t, bundle)
            return (out * out).sum()

        loss = loss_fn()
        loss.backward()
        h = 1e-6
        rng = np.random.default_rng(0)
        checked = 0
        for p in model.parameters():
            if p.grad is None:
                continue
            flat = p.detach().reshape(-1)
            grad = p.grad.reshape(-1)
            for idx in rng.choice(flat.shape[0], size=min(3, flat.shape[0]), replace=False):
                if abs(float(grad[idx])) < 1e-4:
                    continue
                with torch.no_grad():
                    flat[idx] += h
                    up = float(loss_fn())
                    flat[idx] -= 2 * h
                    down = float(loss_fn())
                    flat[idx] += h
                numeric = (up - down) / (2 * h)
                rel = abs(numeric - float(grad[idx])) / max(abs(float(grad[idx])), 1e-12)
                assert rel <= 1e-3, f"grad mismatch: {numeric} vs {float(grad[idx])}"
                checked += 1
        assert checked >= 10


class TestCheckpoint:
    def test_save_load_save_is_byte_stable(self, tiny_model, tmp_path):
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_model(p1, tiny_model, extra={"note": "unit"})
        model, config, meta = load_model(p1)
        assert meta["note"] == "unit"
        assert config == tiny_model.config
        save_model(p2, model, extra={"note": "unit"})
        assert p1.read_bytes() == p2.read_bytes()

    def test_loaded_parameters_bit_identical(self, tiny_model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_model(path, tiny_model)
        model, _, _ = load_model(path)
        for (na, a), (nb, b) in zip(
            tiny_model.state_dict().items(), model.state_dict().items()
        ):
            assert na == nb and torch.equal(a, b)

    def test_config_array_mismatch_rejected(self, tiny_model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_model(path, tiny_model)
        fields, arrays = load_archive(path)
        fields["hidden_dim"] = "64"  # arrays no longer fit this config
        bad = tmp_path / "bad.ckpt"
        save_archive(bad, fields, arrays)
        with pytest.raises(ShapeError):
            load_model(bad)

    def test_forward_preserved_through_round_trip(self, tiny_model, tmp_path):
        perturb_parameters(tiny_model, seed=5)
        path = tmp_path / "m.ckpt"
        save_model(path, tiny_model)
        model, config, _ = load_model(path)
        gen = torch.Generator().manual_seed(0)
        x = torch.randn(1, 1, 32, 32, generator=gen)
        t = torch.tensor([0.5])
        src = torch.randn(1, 1, 32, 32, generator=gen)
        bundle = ConditioningBundle.conditional(src)
        assert torch.equal(tiny_model(x, t, bundle), model(x, t, bundle))
