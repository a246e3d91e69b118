"""Differentiable loss terms for response, feature and relation distillation.

All functions accept either a single instance or a leading batch dimension:

* logits: ``(C,)`` or ``(N, C)``
* feature maps: ``(C, H, W)`` or ``(N, C, H, W)``
* FSP matrices: ``(C_in, C_out)`` or ``(N, C_in, C_out)``

Batched results are averaged over the batch. Every ``*_term`` function
returns the distillation-only part of a substage loss (no cross-entropy), and
the matching ``*_loss`` function adds the supervised cross-entropy on top.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Optional, Sequence

import torch
import torch.nn.functional as F

from .errors import InputError, NonFiniteError, ParameterError

KL_EPS = 1e-12
NORM_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Hyperparameters of every substage loss and of the RSKD combination.

    ``tau_w`` weights the relation consistency term of the combined loss;
    ``temperature`` softens logits for the KL term. They are unrelated.
    """

    lambda_: float = 0.9
    alpha: float = 200.0
    beta: float = 300.0
    gamma: float = 0.9
    eta: float = 1.0
    xi: float = 1.0
    tau_w: float = 1.0
    temperature: float = 4.0
    k_channels: int = 16

    def __post_init__(self):
        for name in ("lambda_", "alpha", "beta", "gamma", "eta", "xi", "tau_w"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ParameterError(f"{name} must be finite and >= 0, got {value}")
        if not math.isfinite(self.temperature) or self.temperature <= 0:
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")
        if int(self.k_channels) != self.k_channels or self.k_channels < 1:
            raise ParameterError(f"k_channels must be a positive integer, got {self.k_channels}")

    def replace(self, **changes) -> "LossWeights":
        return LossWeights(**{**asdict(self), **changes})

    def as_dict(self) -> dict:
        return asdict(self)


def _batched(x: torch.Tensor, ndim: int) -> torch.Tensor:
    if x.dim() == ndim:
        return x.unsqueeze(0)
    if x.dim() == ndim + 1:
        return x
    raise InputError(f"expected a {ndim}-d tensor or a batch of them, got shape {tuple(x.shape)}")


def _check_finite(x: torch.Tensor, what: str):
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"{what} contains non-finite entries")


def _check_temperature(temperature: float):
    if not temperature > 0 or not math.isfinite(temperature):
        raise ParameterError(f"temperature must be > 0, got {temperature}")


# ---------------------------------------------------------------------------
# response-based substage


def soften(logits: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Temperature softmax over the last dimension."""
    _check_temperature(temperature)
    _check_finite(logits, "logits")
    if logits.shape[-1] < 2:
        raise InputError("logits need at least two classes")
    return torch.softmax(logits / temperature, dim=-1)


def cross_entropy(student_logits: torch.Tensor, label) -> torch.Tensor:
    """Natural-log cross-entropy against a class index or a soft label.

    ``label`` may be an int, a long tensor of indices (one per sample), or a
    float tensor holding a distribution per sample.
    """
    logits = _batched(student_logits, 1)
    _check_finite(logits, "logits")
    num_classes = logits.shape[-1]
    log_probs = torch.log_softmax(logits, dim=-1)
    target = torch.as_tensor(label, device=logits.device)
    if target.is_floating_point():
        target = _batched(target.to(log_probs.dtype), 1)
        if target.shape != log_probs.shape:
            raise InputError(f"soft label shape {tuple(target.shape)} does not match logits {tuple(logits.shape)}")
        if (target < 0).any() or not torch.allclose(target.sum(-1), torch.ones_like(target[:, 0]), atol=1e-6):
            raise InputError("soft label is not a valid distribution")
        return -(target * log_probs).sum(-1).mean()
    target = target.reshape(-1).long()
    if target.numel() != logits.shape[0]:
        raise InputError(f"{target.numel()} labels for {logits.shape[0]} samples")
    if (target < 0).any() or (target >= num_classes).any():
        raise InputError(f"label out of range [0, {num_classes})")
    return F.nll_loss(log_probs, target)


def kl_divergence(teacher: torch.Tensor, student: torch.Tensor, eps: float = KL_EPS) -> torch.Tensor:
    """KL(teacher || student) for probability vectors, batch-averaged.

    Student probabilities are clamped at ``eps`` before the log; teacher zeros
    contribute nothing (0 log 0 = 0).
    """
    p_t = _batched(teacher, 1)
    p_s = _batched(student, 1)
    if p_t.shape != p_s.shape:
        raise InputError(f"distribution shapes differ: {tuple(p_t.shape)} vs {tuple(p_s.shape)}")
    per_sample = (torch.xlogy(p_t, p_t) - p_t * torch.log(p_s.clamp_min(eps))).sum(-1)
    return per_sample.mean().clamp_min(0.0)


def _kl_from_logits(student_logits, teacher_logits, temperature, eps=KL_EPS):
    # log-softmax path; identical to kl_divergence(soften(t), soften(s)) but stabler
    log_s = torch.log_softmax(student_logits / temperature, dim=-1).clamp_min(math.log(eps))
    log_t = torch.log_softmax(teacher_logits / temperature, dim=-1)
    p_t = log_t.exp()
    return (p_t * (log_t - log_s)).sum(-1).mean().clamp_min(0.0)


def response_term(student_logits, teacher_logits, weights: LossWeights, t2_scaling: bool = True):
    """lambda * KL(soft teacher || soft student), optionally scaled by T^2."""
    s = _batched(student_logits, 1)
    t = _batched(teacher_logits, 1)
    if s.shape != t.shape:
        raise InputError(f"logit shapes differ: {tuple(s.shape)} vs {tuple(t.shape)}")
    _check_finite(s, "student logits")
    _check_finite(t, "teacher logits")
    T = weights.temperature
    kl = _kl_from_logits(s, t.detach(), T)
    scale = T * T if t2_scaling else 1.0
    return weights.lambda_ * scale * kl


def response_loss(student_logits, teacher_logits, label, weights: LossWeights, t2_scaling: bool = True):
    return cross_entropy(student_logits, label) + response_term(
        student_logits, teacher_logits, weights, t2_scaling
    )


# ---------------------------------------------------------------------------
# feature-based substage (AT + DF)


def attention_map(f: torch.Tensor) -> torch.Tensor:
    """Sum of squares over the channel axis: ``(.., C, H, W) -> (.., H, W)``."""
    if f.dim() not in (3, 4):
        raise InputError(f"feature map must be CxHxW or NxCxHxW, got {tuple(f.shape)}")
    return f.pow(2).sum(dim=-3)


def _unit(v: torch.Tensor) -> torch.Tensor:
    return v / torch.linalg.vector_norm(v, dim=-1, keepdim=True).clamp_min(NORM_EPS)


def _match_spatial(f_t, f_s, resize: bool):
    if f_t.shape[-2:] == f_s.shape[-2:]:
        return f_t, f_s
    if not resize:
        raise InputError(
            f"spatial size mismatch {tuple(f_t.shape[-2:])} vs {tuple(f_s.shape[-2:])}; enable resize"
        )
    # upsample the smaller map to the larger one
    if f_t.shape[-2] * f_t.shape[-1] < f_s.shape[-2] * f_s.shape[-1]:
        f_t = F.interpolate(f_t, size=f_s.shape[-2:], mode="bilinear", align_corners=False)
    else:
        f_s = F.interpolate(f_s, size=f_t.shape[-2:], mode="bilinear", align_corners=False)
    return f_t, f_s


def at_distance(f_t: torch.Tensor, f_s: torch.Tensor, resize: bool = False) -> torch.Tensor:
    """L2 distance between L2-normalized attention maps."""
    f_t, f_s = _match_spatial(_batched(f_t, 3), _batched(f_s, 3), resize)
    a_t = _unit(attention_map(f_t).flatten(1))
    a_s = _unit(attention_map(f_s).flatten(1))
    return torch.linalg.vector_norm(a_t - a_s, dim=-1).mean()


def df_topk_select(f: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` channels with the largest L2 norm.

    Sorted by descending norm; equal norms keep the lower channel index first.
    Returns shape ``(k,)`` for a single map or ``(N, k)`` for a batch.
    """
    single = f.dim() == 3
    fb = _batched(f, 3)
    channels = fb.shape[1]
    if int(k) != k or k < 1 or k > channels:
        raise ParameterError(f"k must be in [1, {channels}], got {k}")
    norms = torch.linalg.vector_norm(fb.detach().flatten(2), dim=-1)
    order = torch.sort(norms, dim=1, descending=True, stable=True).indices[:, :k]
    return order[0] if single else order


def df_distance(
    f_t: torch.Tensor,
    f_s: torch.Tensor,
    k: int,
    adapter: Optional[torch.nn.Module] = None,
    resize: bool = False,
) -> torch.Tensor:
    """Summed per-channel distance over the teacher's top-k channels.

    Each selected teacher channel j is compared with student channel j after
    squaring, flattening and L2 normalization. When channel counts differ the
    student map goes through ``adapter`` (a 1x1 projection to teacher width).
    """
    f_t = _batched(f_t, 3)
    f_s = _batched(f_s, 3)
    c_t, c_s = f_t.shape[1], f_s.shape[1]
    if int(k) != k or k < 1 or k > min(c_t, c_s):
        raise ParameterError(f"k must be in [1, {min(c_t, c_s)}], got {k}")
    if adapter is not None:
        f_s = adapter(f_s)
    elif c_t != c_s:
        raise ParameterError(f"channel mismatch {c_t} vs {c_s} requires a channel adapter")
    if f_s.shape[1] != c_t:
        raise InputError(f"adapter produced {f_s.shape[1]} channels, teacher has {c_t}")
    f_t, f_s = _match_spatial(f_t, f_s, resize)
    idx = df_topk_select(f_t, k)
    gather_idx = idx[:, :, None].expand(-1, -1, f_t.shape[-2] * f_t.shape[-1])
    a_t = torch.gather(f_t.pow(2).flatten(2), 1, gather_idx)
    a_s = torch.gather(f_s.pow(2).flatten(2), 1, gather_idx)
    per_channel = torch.linalg.vector_norm(_unit(a_t) - _unit(a_s), dim=-1)
    return per_channel.sum(-1).mean()


def feature_term(
    tap_pairs: Sequence[tuple],
    weights: LossWeights,
    adapters: Optional[Sequence[Optional[torch.nn.Module]]] = None,
    resize: bool = False,
):
    """sum over tap pairs of ``alpha * AT + beta * DF``.

    ``tap_pairs`` holds ``(teacher_map, student_map)`` tuples.
    """
    if not tap_pairs:
        raise InputError("feature distillation needs at least one tap pair")
    adapters = list(adapters) if adapters is not None else [None] * len(tap_pairs)
    total = 0.0
    for (f_t, f_s), adapter in zip(tap_pairs, adapters):
        f_t = f_t.detach()
        term = 0.0
        if weights.alpha:
            term = term + weights.alpha * at_distance(f_t, f_s, resize)
        if weights.beta:
            term = term + weights.beta * df_distance(f_t, f_s, weights.k_channels, adapter, resize)
        total = total + term
    if not torch.is_tensor(total):
        total = torch.zeros((), dtype=tap_pairs[0][1].dtype)
    return total


def feature_loss(tap_pairs, student_logits, label, weights: LossWeights, adapters=None, resize=False):
    return cross_entropy(student_logits, label) + feature_term(tap_pairs, weights, adapters, resize)


# ---------------------------------------------------------------------------
# relation-based substage (FSP)


def fsp_matrix(f_in: torch.Tensor, f_out: torch.Tensor, resize: bool = False) -> torch.Tensor:
    """Spatially averaged channel inner products, shape ``(.., C_in, C_out)``."""
    single = f_in.dim() == 3 and f_out.dim() == 3
    a, b = _match_spatial(_batched(f_in, 3), _batched(f_out, 3), resize)
    if a.shape[0] != b.shape[0]:
        raise InputError("batch sizes differ")
    h, w = a.shape[-2:]
    g = torch.einsum("nihw,njhw->nij", a, b) / (h * w)
    return g[0] if single else g


def relation_term(teacher_fsp: Sequence[torch.Tensor], student_fsp: Sequence[torch.Tensor], weights: LossWeights):
    """gamma * sum over FSP pairs of the mean squared difference."""
    if len(teacher_fsp) != len(student_fsp) or not teacher_fsp:
        raise InputError(f"need matching nonempty FSP lists, got {len(teacher_fsp)} and {len(student_fsp)}")
    total = 0.0
    for g_t, g_s in zip(teacher_fsp, student_fsp):
        if g_t.shape != g_s.shape:
            raise InputError(f"FSP shape mismatch {tuple(g_t.shape)} vs {tuple(g_s.shape)}")
        total = total + (g_t.detach() - g_s).pow(2).mean()
    return weights.gamma * total


def relation_loss(teacher_fsp, student_fsp, student_logits, label, weights: LossWeights):
    return cross_entropy(student_logits, label) + relation_term(teacher_fsp, student_fsp, weights)


# ---------------------------------------------------------------------------
# combination stage


def rskd_total_loss(base: Mapping[str, object], weights: LossWeights):
    """``ce + eta * response + xi * feature + tau_w * relation``.

    ``base`` maps ``"ce"`` and any of ``"response"``, ``"feature"``,
    ``"relation"`` to the distillation-only terms of one minibatch. Missing
    branches count as zero. Works on tensors and plain floats alike.
    """
    if "ce" not in base:
        raise InputError("combined loss needs the cross-entropy component 'ce'")
    total = base["ce"]
    for key, w in (("response", weights.eta), ("feature", weights.xi), ("relation", weights.tau_w)):
        if key in base and w:
            total = total + w * base[key]
    return total
