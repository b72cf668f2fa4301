"""Central-difference gradient verification against autograd.

Everything runs in double precision with the model in evaluation mode, so
each forward pass is a pure function and per-sample outputs are independent.
That independence lets the input-pixel sweep batch many one-pixel
perturbations into a single forward pass; parameters are perturbed one
coordinate at a time.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .counter import RegressionHead, pool_correlation
from .dass import (
    AnisotropicEncoder,
    DirectionGate,
    TokenWeightHead,
    gram_matrix,
    integrate_features,
    recalibrate_token,
    similarity_map,
)
from .exemplar import ExemplarTokenizer
from .backbone import FeatureBranch
from .model import build_model

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
ERROR_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    target: str
    max_rel_error: float
    per_tensor: dict[str, float]
    step_size: float
    n_coordinates: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < DEFAULT_TOLERANCE


def relative_error(analytic: float, numeric: float, floor: float = ERROR_FLOOR) -> float:
    """|a - n| scaled by max(|a|, |n|, floor); the floor absorbs near-zero gradients."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(loss_fn, tensors: dict[str, torch.Tensor], h: float = DEFAULT_STEP) -> GradCheckReport:
    """Compare autograd gradients of ``loss_fn()`` against central differences.

    ``tensors`` maps names to double-precision leaf tensors that ``loss_fn``
    reads; every coordinate of every tensor is perturbed by +-h.
    """
    for name, t in tensors.items():
        if t.dtype != torch.float64:
            raise ValueError(f"gradient check requires float64 tensors, {name} is {t.dtype}")
        t.requires_grad_(True)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(tensors.values()))
    per_tensor = {}
    n_coords = 0
    with torch.no_grad():
        for (name, tensor), grad in zip(tensors.items(), grads):
            data = tensor.view(-1)
            flat_grad = grad.reshape(-1)
            worst = 0.0
            for j in range(data.numel()):
                orig = data[j].item()
                data[j] = orig + h
                plus = loss_fn().item()
                data[j] = orig - h
                minus = loss_fn().item()
                data[j] = orig
                numeric = (plus - minus) / (2.0 * h)
                worst = max(worst, relative_error(flat_grad[j].item(), numeric))
            per_tensor[name] = worst
            n_coords += data.numel()
    return GradCheckReport(
        target="custom",
        max_rel_error=max(per_tensor.values()),
        per_tensor=per_tensor,
        step_size=h,
        n_coordinates=n_coords,
    )


def model_gradient_check(
    config: ModelConfig | None = None,
    *,
    image_size: int | None = None,
    h: float = DEFAULT_STEP,
    chunk: int = 128,
    seed: int = 0,
) -> GradCheckReport:
    """Check every parameter and every input pixel of the full counting model.

    The loss is the squared count error against a fixed target. Input pixels
    use batched central differences (one perturbed image per batch row);
    parameters are swept coordinate by coordinate.
    """
    cfg = config or ModelConfig.tiny()
    model = build_model(cfg).double()
    model.eval()
    gen = torch.Generator().manual_seed(seed + 1)
    size = image_size or cfg.stride * 4
    image = torch.rand(1, 3, size, size, generator=gen, dtype=torch.float64)
    target = torch.tensor([3.0], dtype=torch.float64)

    def sample_losses(batch: torch.Tensor) -> torch.Tensor:
        return (model(batch).counts - target) ** 2

    leaf = image.clone().requires_grad_(True)
    loss = sample_losses(leaf).sum()
    params = list(model.named_parameters())
    grads = torch.autograd.grad(loss, [leaf] + [p for _, p in params])

    per_tensor = {}
    n_coords = 0
    with torch.no_grad():
        analytic = grads[0].view(-1)
        n_pixels = analytic.numel()
        worst = 0.0
        for start in range(0, n_pixels, chunk):
            idx = torch.arange(start, min(start + chunk, n_pixels))
            m = idx.numel()
            rows = torch.arange(m)
            plus = image.repeat(m, 1, 1, 1)
            plus.view(m, -1)[rows, idx] += h
            minus = image.repeat(m, 1, 1, 1)
            minus.view(m, -1)[rows, idx] -= h
            numeric = (sample_losses(plus) - sample_losses(minus)) / (2.0 * h)
            for k in range(m):
                worst = max(
                    worst, relative_error(analytic[idx[k]].item(), numeric[k].item())
                )
        per_tensor["input"] = worst
        n_coords += n_pixels

        for (name, param), grad in zip(params, grads[1:]):
            data = param.view(-1)
            flat_grad = grad.reshape(-1)
            worst = 0.0
            for j in range(data.numel()):
                orig = data[j].item()
                data[j] = orig + h
                plus = sample_losses(image).sum().item()
                data[j] = orig - h
                minus = sample_losses(image).sum().item()
                data[j] = orig
                numeric = (plus - minus) / (2.0 * h)
                worst = max(worst, relative_error(flat_grad[j].item(), numeric))
            per_tensor[name] = worst
            n_coords += data.numel()

    return GradCheckReport(
        target="full",
        max_rel_error=max(per_tensor.values()),
        per_tensor=per_tensor,
        step_size=h,
        n_coordinates=n_coords,
    )


def _backbone_case(gen):
    branch = FeatureBranch((2, 4)).double().eval()
    image = torch.rand(1, 3, 8, 8, generator=gen, dtype=torch.float64)
    tensors = {"input": image}
    tensors.update({f"param.{n}": p for n, p in branch.named_parameters()})

    def loss_fn():
        return branch(image).square().sum()

    return loss_fn, tensors


def _exemplar_case(gen):
    tok = ExemplarTokenizer(channels=4, kernel=4, sub_patch=2).double().eval()
    grid = torch.rand(1, 4, 6, 6, generator=gen, dtype=torch.float64)
    tensors = {"grid": grid}
    tensors.update({f"param.{n}": p for n, p in tok.named_parameters()})

    def loss_fn():
        return tok(grid).square().sum()

    return loss_fn, tensors


def _dass_case(gen):
    channels, token_count = 4, 4
    encoder = AnisotropicEncoder(channels).double().eval()
    gate = DirectionGate(token_count, channels, hidden=8).double().eval()
    mix = nn.Conv2d(channels, channels, 3, padding=1).double().eval()
    token_head = TokenWeightHead(channels, token_count).double().eval()
    features = torch.rand(1, channels, 4, 4, generator=gen, dtype=torch.float64)
    tokens = torch.rand(1, token_count, channels, generator=gen, dtype=torch.float64)

    modules = {"encoder": encoder, "gate": gate, "mix": mix, "token_head": token_head}
    tensors = {"features": features, "tokens": tokens}
    for mod_name, module in modules.items():
        tensors.update({f"param.{mod_name}.{n}": p for n, p in module.named_parameters()})

    def loss_fn():
        integrated = integrate_features(features, encoder(features), gate(tokens), mix)
        weights = token_head(gram_matrix(features))
        recal = recalibrate_token(tokens, weights)
        return similarity_map(integrated, recal).square().sum()

    return loss_fn, tensors


def _counter_case(gen):
    head = RegressionHead(4, (8, 4, 1)).double().eval()
    features = torch.rand(1, 4, 3, 3, generator=gen, dtype=torch.float64)
    sim = torch.rand(1, 3, 3, generator=gen, dtype=torch.float64)
    tensors = {"features": features, "sim": sim}
    tensors.update({f"param.{n}": p for n, p in head.named_parameters()})

    def loss_fn():
        return head(pool_correlation(features, sim)).square().sum()

    return loss_fn, tensors


MODULE_CASES = {
    "backbone": _backbone_case,
    "exemplar": _exemplar_case,
    "dass": _dass_case,
    "counter": _counter_case,
}


def gradient_check(target: str = "full", h: float = DEFAULT_STEP, seed: int = 0) -> GradCheckReport:
    """Run the gradient check for one target: 'full' or a component name."""
    if target == "full":
        return model_gradient_check(h=h, seed=seed)
    if target not in MODULE_CASES:
        raise ValueError(f"unknown gradcheck target {target!r}; expected full or {sorted(MODULE_CASES)}")
    gen = torch.Generator().manual_seed(seed + 1)
    loss_fn, tensors = MODULE_CASES[target](gen)
    report = check_gradients(loss_fn, tensors, h=h)
    report.target = target
    return report
