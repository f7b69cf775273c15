"""Central finite-difference verification of autodiff gradients."""

from dataclasses import dataclass, field

import numpy as np

from .tensor import no_grad, record_kinks


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: list = field(default_factory=list)  # (param name, flat index, rel error)
    skipped: list = field(default_factory=list)  # (param name, flat index) straddling a kink


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def _same_side(p1, p2):
    return len(p1) == len(p2) and all(np.array_equal(a, b) for a, b in zip(p1, p2))


def grad_check_report(params, loss_fn, h=1e-5, sample_fraction=1.0, rng=None, analytic=None):
    """Compare autodiff gradients against (L(x+h) - L(x-h)) / 2h.

    `params` is a list of tensors or (name, tensor) pairs; `loss_fn()` builds
    the scalar loss from their current values.  A seeded sample of
    ``ceil(sample_fraction * total)`` scalar entries is checked; an entry whose
    perturbation flips the branch of a relu or clip somewhere in the graph is
    skipped and replaced by another draw.

    `analytic` optionally supplies the gradients to verify, one array per
    parameter.  Passing the gradients of a 32-bit model while `params` and
    `loss_fn` describe a 64-bit copy checks the low-precision backward pass
    against differences that float32 round-off would otherwise swamp.
    """
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    if not 0.0 < sample_fraction <= 1.0:
        raise ValueError(f"sample_fraction must be in (0, 1], got {sample_fraction}")
    rng = np.random.default_rng(0) if rng is None else rng
    named = [p if isinstance(p, tuple) else (f"param{i}", p) for i, p in enumerate(params)]

    if analytic is None:
        for _, p in named:
            p.zero_grad()
        loss_fn().backward()
        analytic = [p.grad.copy() for _, p in named]
    else:
        analytic = [np.asarray(g) for g in analytic]
        for (name, p), g in zip(named, analytic, strict=True):
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")

    sizes = np.array([p.size for _, p in named])
    total = int(sizes.sum())
    want = int(np.ceil(sample_fraction * total))
    order = rng.permutation(total)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    report = GradCheckReport(0.0)
    for flat in order:
        if len(report.checked) >= want:
            break
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, p = named[k]
        idx = int(flat - offsets[k])
        view = p.data.reshape(-1)
        orig = view[idx]
        with no_grad():
            view[idx] = orig + p.dtype.type(h)
            up = view[idx]
            with record_kinks() as kinks_up:
                f_up = float(loss_fn().data)
            view[idx] = orig - p.dtype.type(h)
            down = view[idx]
            with record_kinks() as kinks_down:
                f_down = float(loss_fn().data)
            view[idx] = orig
        if not _same_side(kinks_up, kinks_down):
            report.skipped.append((name, idx))
            continue
        numeric = (f_up - f_down) / (float(up) - float(down))
        err = _rel(float(analytic[k].reshape(-1)[idx]), numeric)
        report.checked.append((name, idx, err))
        report.max_rel_error = max(report.max_rel_error, err)
    return report


def grad_check(model, inputs, loss_fn, h=1e-5, sample_fraction=1.0, rng=None):
    """Max relative gradient error of `loss_fn(model, inputs)` over a seeded
    sample of the model's trainable parameters.

    `model` may be a Module or a plain list of parameter tensors.
    """
    if hasattr(model, "named_parameters"):
        params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    else:
        params = list(model)
    report = grad_check_report(params, lambda: loss_fn(model, inputs), h, sample_fraction, rng)
    return report.max_rel_error
