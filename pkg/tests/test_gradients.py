"""Gradient-flow and finite-difference checks on the full network."""

import numpy as np
import torch

from histoseg.losses import combined_loss
from histoseg.model import build_model
from histoseg.train import make_optimizer
from histoseg.config import TrainConfig

from conftest import reduced_model_config


def _random_batch(seed: int, size: int = 32, batch: int = 2,
                  dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    images = torch.randn(batch, 3, size, size, generator=g, dtype=dtype)
    masks = (torch.rand(batch, 1, size, size, generator=g) > 0.5).to(dtype)
    return images, masks


def test_every_parameter_receives_a_gradient():
    # window 2 at 64x64 keeps every map at least window-sized, so all
    # relative-offset bias entries participate and no window saturates
    model = build_model(reduced_model_config(window_size=2), seed=0)
    # one optimizer step moves the attention scale off zero so the whole
    # graph (including the position-attention projections) is exercised
    cfg = TrainConfig(learning_rate=1e-3, epochs=1, batch_size=4)
    optimizer = make_optimizer(model, cfg)
    images, masks = _random_batch(0, size=64, batch=4)
    for _ in range(2):
        optimizer.zero_grad(set_to_none=True)
        loss = combined_loss(model(images), masks, 1.0, 1.0)
        loss.backward()
        optimizer.step()

    total = 0
    zeros = 0
    for name, param in model.named_parameters():
        assert param.grad is not None, f"{name} got no gradient"
        total += param.numel()
        zeros += int((param.grad == 0).sum())
    assert zeros / total <= 0.01, f"{zeros}/{total} gradient elements are zero"


def test_zero_scale_shadows_only_position_attention_projections():
    # with the residual scale at its zero init, the projections feeding it
    # are the only tensors whose gradients vanish identically
    model = build_model(reduced_model_config(window_size=2), seed=0)
    images, masks = _random_batch(1, size=64, batch=4)
    combined_loss(model(images), masks, 1.0, 1.0).backward()
    dead = {
        name
        for name, param in model.named_parameters()
        if param.grad is not None and (param.grad == 0).all()
    }
    assert dead == {
        "decoder.position_attn.query.weight",
        "decoder.position_attn.query.bias",
        "decoder.position_attn.key.weight",
        "decoder.position_attn.key.bias",
        "decoder.position_attn.value.weight",
        "decoder.position_attn.value.bias",
    }
    gamma = dict(model.named_parameters())["decoder.position_attn.gamma"]
    assert gamma.grad is not None and not torch.all(gamma.grad == 0)


def test_finite_difference_agreement():
    torch.manual_seed(0)
    model = build_model(reduced_model_config(), seed=3).double()
    # give the position-attention branch signal so its projections are
    # checkable too
    with torch.no_grad():
        dict(model.named_parameters())["decoder.position_attn.gamma"].fill_(0.1)

    images, masks = _random_batch(2, dtype=torch.float64)

    def loss_value() -> torch.Tensor:
        return combined_loss(model(images), masks, 1.0, 1.0)

    model.zero_grad(set_to_none=True)
    loss_value().backward()

    params = list(model.named_parameters())
    rng = np.random.default_rng(0)
    step = 1e-3
    checked = 0
    attempts = 0
    while checked < 10 and attempts < 200:
        attempts += 1
        name, param = params[int(rng.integers(len(params)))]
        flat_index = int(rng.integers(param.numel()))
        analytic = float(param.grad.reshape(-1)[flat_index])
        if abs(analytic) < 1e-6:
            continue  # relative error is meaningless at the noise floor
        with torch.no_grad():
            original = float(param.reshape(-1)[flat_index])
            param.reshape(-1)[flat_index] = original + step
            upper = float(loss_value())
            param.reshape(-1)[flat_index] = original - step
            lower = float(loss_value())
            param.reshape(-1)[flat_index] = original
        numeric = (upper - lower) / (2 * step)
        rel_err = abs(numeric - analytic) / max(abs(analytic), abs(numeric))
        assert rel_err < 1e-2, (
            f"{name}[{flat_index}]: analytic {analytic:.6g} vs "
            f"numeric {numeric:.6g} (rel err {rel_err:.3g})"
        )
        checked += 1
    assert checked >= 10
