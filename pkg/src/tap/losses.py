"""Training objectives: per-attribute contrastive classification plus the
three consistency regularizers that anchor prompted features to the frozen
backbone (L1 on the vision CLS feature, symmetric InfoNCE on description
embeddings, and per-attribute KL to the frozen zero-shot prediction).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

PROB_FLOOR = 1e-12


@dataclass
class RegCoefficients:
    """Weights of the three regularizers; ``enabled=False`` turns them off
    so the total objective is exactly the classification loss."""

    mu1: float = 10.0    # L1 vision consistency
    mu2: float = 2.5     # per-attribute KL to the frozen zero-shot prediction
    mu3: float = 1.5     # text embedding consistency (3.0 for low-attribute datasets)
    enabled: bool = True

    def __post_init__(self):
        if self.mu1 < 0 or self.mu2 < 0 or self.mu3 < 0:
            raise ValueError("regularization coefficients must be nonnegative")


@dataclass
class LossBreakdown:
    l_class: torch.Tensor
    l_l1_v: torch.Tensor
    l_kl_attr: torch.Tensor
    l_con_t: torch.Tensor
    l_total: torch.Tensor
    per_attribute_class_losses: dict[str, torch.Tensor] = field(default_factory=dict)

    def scalars(self) -> dict[str, float]:
        out = {
            "l_class": float(self.l_class.detach()),
            "l_l1_v": float(self.l_l1_v.detach()),
            "l_kl_attr": float(self.l_kl_attr.detach()),
            "l_con_t": float(self.l_con_t.detach()),
            "l_total": float(self.l_total.detach()),
        }
        for name, v in self.per_attribute_class_losses.items():
            out[f"l_class/{name}"] = float(v.detach())
        return out


def cosine(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Cosine similarity along the last dim with broadcasting."""
    num = (a * b).sum(-1)
    return num / (a.norm(dim=-1) * b.norm(dim=-1)).clamp_min(eps)


def contrastive_loss(expert_features: torch.Tensor, pooled_features: torch.Tensor,
                     labels: torch.Tensor, tau: torch.Tensor | float) -> torch.Tensor:
    """Mean cross-entropy over classes with logits cos(p, v_c)/tau.

    expert_features: (B, d); pooled_features: (B, C, d) -- one pooled vector
    per class, conditioned on each sample's own expert feature.
    """
    logits = cosine(expert_features.unsqueeze(1), pooled_features) / tau  # (B, C)
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite similarity logits")
    return torch.nn.functional.cross_entropy(logits, labels)


def class_loss(per_attribute_losses: dict[str, torch.Tensor],
               attribute_names: list[str] | tuple[str, ...]) -> torch.Tensor:
    """Arithmetic mean of the per-attribute contrastive losses."""
    missing = [a for a in attribute_names if a not in per_attribute_losses]
    if missing:
        raise ValueError(f"missing contrastive loss for attributes: {missing}")
    terms = [per_attribute_losses[a] for a in attribute_names]
    return torch.stack(terms).mean()


def l1_vision_reg(trained_cls: torch.Tensor, frozen_cls: torch.Tensor) -> torch.Tensor:
    """Elementwise L1 distance; batched inputs are averaged over the batch."""
    if trained_cls.shape != frozen_cls.shape:
        raise ValueError(f"shape mismatch: {tuple(trained_cls.shape)} vs "
                         f"{tuple(frozen_cls.shape)}")
    diff = (trained_cls - frozen_cls).abs().sum(-1)
    return diff.mean() if diff.ndim else diff


def text_alignment_loss(frozen: torch.Tensor, trained: torch.Tensor) -> torch.Tensor:
    """Symmetric InfoNCE pairing row i of ``trained`` with row i of ``frozen``.

    Summed (not averaged) over the description set; similarities are raw
    cosines with no temperature.
    """
    if frozen.shape != trained.shape:
        raise ValueError("frozen/trained embedding shapes differ")
    sim = cosine(frozen.unsqueeze(1), trained.unsqueeze(0))  # (n, n); rows frozen
    log_rows = torch.log_softmax(sim, dim=1).diagonal()      # frozen anchors
    log_cols = torch.log_softmax(sim, dim=0).diagonal()      # trained anchors
    return -0.5 * (log_rows + log_cols).sum()


def text_contrastive_reg(frozen_text: dict[str, torch.Tensor],
                         trained_text: dict[str, torch.Tensor]) -> torch.Tensor:
    """Dict-keyed wrapper over ``text_alignment_loss``; keys are description
    strings and both maps must cover the same set."""
    if set(frozen_text) != set(trained_text):
        raise ValueError("mismatched description sets")
    keys = sorted(frozen_text)
    if not keys:
        raise ValueError("empty description set")
    return text_alignment_loss(torch.stack([frozen_text[k] for k in keys]),
                               torch.stack([trained_text[k] for k in keys]))


def kl_divergence(teacher: torch.Tensor, student: torch.Tensor) -> torch.Tensor:
    """KL(teacher || student) over the last dim, probabilities floored at
    1e-12 inside the logs; batched inputs are averaged over leading dims."""
    log_p = teacher.clamp_min(PROB_FLOOR).log()
    log_q = student.clamp_min(PROB_FLOOR).log()
    kl = (teacher * (log_p - log_q)).sum(-1)
    return kl.mean() if kl.ndim else kl


def kl_attr_reg(frozen_zeroshot_logits: torch.Tensor,
                per_attribute_logits: dict[str, torch.Tensor],
                tau: torch.Tensor | float = 1.0) -> torch.Tensor:
    """Mean over attributes of KL(teacher || student-per-attribute).

    Logits become distributions through softmax at temperature ``tau``,
    applied to teacher and students alike.
    """
    if not per_attribute_logits:
        raise ValueError("no attribute logits")
    teacher = torch.softmax(frozen_zeroshot_logits / tau, dim=-1)
    terms = [kl_divergence(teacher, torch.softmax(logits / tau, dim=-1))
             for logits in per_attribute_logits.values()]
    return torch.stack(terms).mean()


def total_loss(l_class: torch.Tensor, l_l1_v: torch.Tensor, l_kl_attr: torch.Tensor,
               l_con_t: torch.Tensor, coefficients: RegCoefficients,
               per_attribute_class_losses: dict[str, torch.Tensor] | None = None,
               ) -> LossBreakdown:
    """Assemble the full objective.

    With regularization disabled the total IS the classification loss (the
    same tensor, so the no-reg ablation is bit-identical to skipping the
    regularizers entirely).
    """
    if coefficients.enabled:
        total = (l_class + coefficients.mu1 * l_l1_v
                 + coefficients.mu2 * l_kl_attr + coefficients.mu3 * l_con_t)
    else:
        total = l_class
    return LossBreakdown(
        l_class=l_class, l_l1_v=l_l1_v, l_kl_attr=l_kl_attr, l_con_t=l_con_t,
        l_total=total,
        per_attribute_class_losses=dict(per_attribute_class_losses or {}),
    )
