"""Alternating vision/text prompt training with Gaussian snapshot aggregation.

The backbone stays frozen throughout.  Vision phases update expert tokens,
their per-layer residuals, and the pooling projections against a description
bank cached at the phase boundary; text phases update the shared context
tokens, re-embedding descriptions inside the graph every step.  After every
epoch the prompt parameters are snapshotted into a Gaussian-weighted running
aggregate whose weight peaks near the end of the run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .backends import (DualEncoder, EmbeddingBank, PromptState,
                       build_embedding_bank)
from .inference import attribute_similarity_logits, pooled_class_features
from .losses import (LossBreakdown, RegCoefficients, class_loss, contrastive_loss,
                     cosine, kl_attr_reg, l1_vision_reg, text_alignment_loss,
                     total_loss)
from .tree import GLOBAL_CONTEXT_NAME, AttributeTree, instantiate_global_context

TASK_EPOCHS = {"b2n": 60, "xd": 24, "fewshot": 120}

# (text_lr, vision_lr, mu3) per dataset group
LR_GROUPS = {
    "low-attr": (0.002, 0.006, 3.0),
    "high-attr": (0.004, 0.004, 1.5),
}

VISION_PHASE = "vision"
TEXT_PHASE = "text"


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, breakdown: dict[str, float]):
        super().__init__(f"{message}; loss breakdown: {breakdown}")
        self.breakdown = breakdown


@dataclass
class ScheduleConfig:
    total_epochs: int
    vision_phase_len: int = 5
    text_phase_len: int = 1
    lr_group: str = "high-attr"
    batch_size: int = 32
    warmup_epochs: int = 1
    warmup_factor: float = 0.1
    vision_first: bool = True
    use_gpa: bool = True

    def __post_init__(self):
        if self.total_epochs <= 0:
            raise ValueError("total_epochs must be positive")
        if self.vision_phase_len <= 0 or self.text_phase_len <= 0:
            raise ValueError("phase lengths must be positive")
        if self.lr_group not in LR_GROUPS:
            raise ValueError(f"unknown lr group {self.lr_group!r}")

    @property
    def text_lr(self) -> float:
        return LR_GROUPS[self.lr_group][0]

    @property
    def vision_lr(self) -> float:
        return LR_GROUPS[self.lr_group][1]

    @property
    def mu3(self) -> float:
        return LR_GROUPS[self.lr_group][2]

    @classmethod
    def for_task(cls, task: str, **overrides) -> "ScheduleConfig":
        if task not in TASK_EPOCHS:
            raise ValueError(f"unknown task {task!r}; expected one of {sorted(TASK_EPOCHS)}")
        overrides.setdefault("total_epochs", TASK_EPOCHS[task])
        return cls(**overrides)


def phase_sequence(config: ScheduleConfig) -> list[str]:
    """Per-epoch phase labels; any cycle remainder lands on vision epochs."""
    if config.vision_first:
        cycle = [VISION_PHASE] * config.vision_phase_len + [TEXT_PHASE] * config.text_phase_len
    else:
        cycle = [TEXT_PHASE] * config.text_phase_len + [VISION_PHASE] * config.vision_phase_len
    return [cycle[e % len(cycle)] for e in range(config.total_epochs)]


def epoch_lr(base_lr: float, epoch_index: int, config: ScheduleConfig) -> float:
    """Cosine decay after a short constant warmup; ``epoch_index`` is 0-based."""
    if epoch_index < config.warmup_epochs:
        return base_lr * config.warmup_factor
    span = max(1, config.total_epochs - config.warmup_epochs)
    t = (epoch_index - config.warmup_epochs) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


# --- Gaussian prompt aggregation --------------------------------------------


def gpa_weights(total_epochs: int) -> np.ndarray:
    """Normalized Gaussian weights over epochs 1..N (index t-1 is epoch t);
    the density is centered at 0.9*N with std 0.1*N."""
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    t = np.arange(1, total_epochs + 1, dtype=np.float64)
    mean, std = 0.9 * total_epochs, 0.1 * total_epochs
    w = np.exp(-0.5 * ((t - mean) / std) ** 2)
    return w / w.sum()


class GpaState:
    """Running Gaussian-weighted mean of per-epoch prompt snapshots.

    Uses the incremental convex-combination update, so aggregating identical
    snapshots returns that snapshot bit-for-bit.
    """

    def __init__(self, total_epochs: int):
        self.total_epochs = total_epochs
        self.weights = gpa_weights(total_epochs)
        self._mean: dict[str, torch.Tensor] | None = None
        self._cum_weight = 0.0
        self._epochs_seen = 0

    def add(self, epoch: int, snapshot: dict[str, torch.Tensor]) -> None:
        """Fold in the snapshot taken after ``epoch`` (1-based)."""
        if not 1 <= epoch <= self.total_epochs:
            raise ValueError(f"epoch {epoch} outside 1..{self.total_epochs}")
        w = float(self.weights[epoch - 1])
        self._epochs_seen += 1
        if self._mean is None:
            self._mean = {k: v.detach().clone() for k, v in snapshot.items()}
            self._cum_weight = w
            return
        self._cum_weight += w
        coef = w / self._cum_weight
        for k, v in snapshot.items():
            self._mean[k] += coef * (v.detach() - self._mean[k])

    def aggregate(self) -> dict[str, torch.Tensor]:
        if self._epochs_seen != self.total_epochs:
            raise ValueError(
                f"expected {self.total_epochs} snapshots, saw {self._epochs_seen}")
        return {k: v.clone() for k, v in self._mean.items()}


def gpa_aggregate(snapshots: list[dict[str, torch.Tensor]],
                  total_epochs: int) -> dict[str, torch.Tensor]:
    """Aggregate one snapshot per epoch; rejects a wrong snapshot count."""
    if len(snapshots) != total_epochs:
        raise ValueError(
            f"need exactly {total_epochs} snapshots, got {len(snapshots)}")
    state = GpaState(total_epochs)
    for epoch, snap in enumerate(snapshots, start=1):
        state.add(epoch, snap)
    return state.aggregate()


# --- teacher assets ----------------------------------------------------------


@dataclass
class TeacherAssets:
    """Everything the regularizers need from the frozen backbone."""

    frozen_backend: DualEncoder
    zeroshot_features: torch.Tensor            # (C, d) template-mean per class
    frozen_bank: EmbeddingBank                 # description embeddings, no ctx


def build_teacher_assets(backend: DualEncoder, tree: AttributeTree,
                         class_names: tuple[str, ...]) -> TeacherAssets:
    frozen = backend.frozen_clone()
    with torch.no_grad():
        feats = []
        for c in class_names:
            emb = frozen.encode_texts(instantiate_global_context(tree, c))
            mean = emb.mean(dim=0)
            feats.append(mean / mean.norm())
        zeroshot = torch.stack(feats)
        frozen_bank = build_embedding_bank(frozen, tree, None, class_names)
    return TeacherAssets(frozen_backend=frozen, zeroshot_features=zeroshot,
                         frozen_bank=frozen_bank)


# --- loss assembly ------------------------------------------------------------


def compute_batch_loss(backend: DualEncoder, tree: AttributeTree,
                       prompt_state: PromptState, bank: EmbeddingBank,
                       teacher: TeacherAssets, images: torch.Tensor,
                       labels: torch.Tensor, class_names: tuple[str, ...],
                       reg: RegCoefficients, pooling_mode: str = "vcp",
                       alignment_mode: str = "experts") -> LossBreakdown:
    """One batch's full loss breakdown.

    ``bank`` carries the description embeddings to pool against; during text
    phases it must have been built inside the current graph so gradients
    reach the context tokens.
    """
    tau = backend.tau()
    out = backend.encode_image(images, prompt_state)
    attributes = tree.attribute_names + (GLOBAL_CONTEXT_NAME,)

    per_attr_losses: dict[str, torch.Tensor] = {}
    per_attr_logits: dict[str, torch.Tensor] = {}
    for attr in attributes:
        if attr == GLOBAL_CONTEXT_NAME or alignment_mode == "cls_only":
            feat = out.cls_feature
        else:
            feat = out.expert_features[attr]
        pooled = pooled_class_features(feat, bank, attr, class_names,
                                       prompt_state, mode=pooling_mode)
        per_attr_losses[attr] = contrastive_loss(feat, pooled, labels, tau)
        per_attr_logits[attr] = cosine(feat.unsqueeze(1), pooled)
    l_class = class_loss(per_attr_losses, attributes)

    if reg.enabled:
        with torch.no_grad():
            frozen_out = teacher.frozen_backend.encode_image(images)
            teacher_logits = cosine(frozen_out.cls_feature.unsqueeze(1),
                                    teacher.zeroshot_features.unsqueeze(0))
        l_l1 = l1_vision_reg(out.cls_feature, frozen_out.cls_feature)
        l_kl = kl_attr_reg(teacher_logits, per_attr_logits, tau)

        batch_classes = sorted({class_names[int(i)] for i in labels})
        trained_rows, frozen_rows = [], []
        for attr in attributes:
            for c in batch_classes:
                trained_rows.append(bank.matrix(attr, c))
                frozen_rows.append(teacher.frozen_bank.matrix(attr, c))
        l_con_t = text_alignment_loss(torch.cat(frozen_rows), torch.cat(trained_rows))
    else:
        zero = torch.zeros((), dtype=out.cls_feature.dtype)
        l_l1 = l_kl = l_con_t = zero

    return total_loss(l_class, l_l1, l_kl, l_con_t, reg,
                      per_attribute_class_losses=per_attr_losses)


# --- the training loop ---------------------------------------------------------


@dataclass
class TrainOutput:
    prompt_last: PromptState
    prompt_gpa: PromptState
    history: list[dict] = field(default_factory=list)
    phases: list[str] = field(default_factory=list)


def _set_phase(prompt_state: PromptState, phase: str) -> None:
    vision = phase == VISION_PHASE
    for p in prompt_state.vision_parameters():
        p.requires_grad_(vision)
    for p in prompt_state.text_parameters():
        p.requires_grad_(not vision)


def train(backend: DualEncoder, tree: AttributeTree, images: torch.Tensor,
          labels: torch.Tensor, class_names: tuple[str, ...],
          schedule: ScheduleConfig, reg: RegCoefficients | None = None,
          seed: int = 0, pooling_mode: str = "vcp",
          alignment_mode: str = "experts",
          prompt_state: PromptState | None = None) -> TrainOutput:
    """Prompt-tune a frozen backend on (images, labels) over ``class_names``.

    Aborts with a diagnostic breakdown on a non-finite loss.  Two calls with
    identical inputs and seed produce identical outputs.
    """
    if reg is None:
        reg = RegCoefficients(mu3=schedule.mu3)
    backend.freeze()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)

    if prompt_state is None:
        prompt_state = PromptState.create(backend, tree.attribute_names, seed=seed)
    teacher = build_teacher_assets(backend, tree, class_names)

    vision_opt = torch.optim.SGD(list(prompt_state.vision_parameters()),
                                 lr=schedule.vision_lr, momentum=0.9)
    text_opt = torch.optim.SGD(list(prompt_state.text_parameters()),
                               lr=schedule.text_lr, momentum=0.9)

    phases = phase_sequence(schedule)
    gpa = GpaState(schedule.total_epochs)
    history: list[dict] = []
    n = images.shape[0]
    step = 0
    cached_bank: EmbeddingBank | None = None

    for epoch_idx, phase in enumerate(phases):
        _set_phase(prompt_state, phase)
        opt = vision_opt if phase == VISION_PHASE else text_opt
        base_lr = schedule.vision_lr if phase == VISION_PHASE else schedule.text_lr
        lr = epoch_lr(base_lr, epoch_idx, schedule)
        for group in opt.param_groups:
            group["lr"] = lr

        if phase == VISION_PHASE and cached_bank is None:
            with torch.no_grad():
                cached_bank = build_embedding_bank(backend, tree, prompt_state,
                                                   class_names)

        order = rng.permutation(n)
        for start in range(0, n, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            batch = images[torch.from_numpy(idx)]
            batch_labels = labels[torch.from_numpy(idx)]

            if phase == TEXT_PHASE:
                bank = build_embedding_bank(backend, tree, prompt_state, class_names)
            else:
                bank = cached_bank
            breakdown = compute_batch_loss(
                backend, tree, prompt_state, bank, teacher, batch, batch_labels,
                class_names, reg, pooling_mode=pooling_mode,
                alignment_mode=alignment_mode)
            if not torch.isfinite(breakdown.l_total):
                raise TrainingDiverged("non-finite training loss",
                                       breakdown.scalars())
            opt.zero_grad()
            breakdown.l_total.backward()
            opt.step()
            step += 1
            record = {"step": step, "epoch": epoch_idx + 1, "phase": phase,
                      "lr": lr}
            record.update(breakdown.scalars())
            history.append(record)

        if phase == TEXT_PHASE:
            cached_bank = None  # text changed; vision phases need a fresh bank
        gpa.add(epoch_idx + 1,
                {k: v.detach().clone() for k, v in prompt_state.state_dict().items()})

    prompt_gpa = PromptState(
        prompt_state.attribute_names, prompt_state.vision_width,
        prompt_state.num_vision_layers, prompt_state.ctx_tokens.detach().clone(),
        prompt_state.embed_dim)
    aggregated = gpa.aggregate() if schedule.use_gpa else {
        k: v.detach().clone() for k, v in prompt_state.state_dict().items()}
    prompt_gpa.load_state_dict(aggregated)
    for p in prompt_gpa.parameters():
        p.requires_grad_(False)
    _set_phase(prompt_state, VISION_PHASE)

    return TrainOutput(prompt_last=prompt_state, prompt_gpa=prompt_gpa,
                       history=history, phases=phases)
