"""Per-attribute logits, weighted prediction fusion, and the metric layer.

Each attribute contributes one cosine-similarity logit vector over classes:
its vision feature (an expert token's output, or the CLS feature for the
global-context attribute) against the class's pooled description feature.
The fused prediction gives the global-context term weight ``alpha`` and
splits the remainder evenly over the other attributes.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .backends import DualEncoder, EmbeddingBank, PromptState, text_version_stamp
from .losses import cosine
from .pooling import pool, pool_mode
from .tree import GLOBAL_CONTEXT_NAME, AttributeTree

ALIGNMENT_MODES = ("experts", "cls_only")


class StaleBankError(RuntimeError):
    """The embedding bank was built from different text parameters."""


@dataclass
class AttributeLogits:
    """Per-attribute class-similarity vectors plus their fusion."""

    per_attribute: dict[str, torch.Tensor]   # attr -> (B, C)
    fused: torch.Tensor                      # (B, C)
    alpha: float
    class_names: tuple[str, ...] = ()


def fusion_weights(alpha: float, num_attributes: int) -> tuple[float, float]:
    """(weight of the global-context term, weight of each other attribute)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if num_attributes < 2:
        if alpha < 1.0:
            raise ValueError("fusion with alpha < 1 needs at least 2 attributes")
        return 1.0, 0.0
    return alpha, (1.0 - alpha) / (num_attributes - 1)


def fuse_logits(per_attribute: dict[str, torch.Tensor], alpha: float) -> torch.Tensor:
    """alpha-weighted sum of the global-context logits with the mean of the
    attribute logits."""
    if GLOBAL_CONTEXT_NAME not in per_attribute:
        raise ValueError("fusion requires the global-context logits")
    w_cls, w_attr = fusion_weights(alpha, len(per_attribute))
    fused = w_cls * per_attribute[GLOBAL_CONTEXT_NAME]
    for name, logits in per_attribute.items():
        if name != GLOBAL_CONTEXT_NAME:
            fused = fused + w_attr * logits
    return fused


def argmax_lowest_index(scores: torch.Tensor) -> torch.Tensor:
    """Row-wise argmax with ties broken by the lowest class index."""
    top = scores.max(dim=-1, keepdim=True).values
    n = scores.shape[-1]
    positions = torch.arange(n, device=scores.device)
    masked = torch.where(scores == top, positions, torch.full_like(positions, n))
    return masked.min(dim=-1).values


def pooled_class_features(cond_feature: torch.Tensor, bank: EmbeddingBank,
                          attribute: str, class_names: tuple[str, ...],
                          prompt_state: PromptState, mode: str = "vcp",
                          ) -> torch.Tensor:
    """Stack per-class pooled description features: (B, C, d)."""
    w_q, w_k = prompt_state.vcp_weights(attribute)
    vectors = [pool_mode(cond_feature, bank.matrix(attribute, c), w_q, w_k, mode).vector
               for c in class_names]
    return torch.stack(vectors, dim=1)


def attribute_similarity_logits(vision_out, bank: EmbeddingBank,
                                prompt_state: PromptState,
                                class_names: tuple[str, ...],
                                attribute_names: tuple[str, ...],
                                pooling_mode: str = "vcp",
                                alignment_mode: str = "experts",
                                ) -> dict[str, torch.Tensor]:
    """Raw cosine logits per attribute (global context included).

    ``alignment_mode="cls_only"`` substitutes the CLS feature for every
    expert token, both as the pooling condition and the similarity side.
    """
    if alignment_mode not in ALIGNMENT_MODES:
        raise ValueError(f"unknown alignment mode {alignment_mode!r}")
    logits: dict[str, torch.Tensor] = {}
    for attr in attribute_names + (GLOBAL_CONTEXT_NAME,):
        if attr == GLOBAL_CONTEXT_NAME or alignment_mode == "cls_only":
            feat = vision_out.cls_feature
        else:
            feat = vision_out.expert_features[attr]
        pooled = pooled_class_features(feat, bank, attr, class_names,
                                       prompt_state, mode=pooling_mode)
        logits[attr] = cosine(feat.unsqueeze(1), pooled)
    return logits


def predict(backend: DualEncoder, images: torch.Tensor, prompt_state: PromptState,
            bank: EmbeddingBank, tree: AttributeTree, alpha: float = 0.4,
            pooling_mode: str = "vcp", alignment_mode: str = "experts",
            class_names: tuple[str, ...] | None = None,
            check_bank: bool = True) -> tuple[AttributeLogits, torch.Tensor]:
    """Full prediction path: encode, pool per attribute, fuse, argmax.

    Returns the logit bundle and the predicted class indices (ties broken by
    lowest index).  Refuses to run against a bank whose text version does not
    match the current prompt state.
    """
    if check_bank:
        expected = text_version_stamp(tree, backend, prompt_state)
        if bank.text_version != expected:
            raise StaleBankError(
                "embedding bank is stale: rebuild it with the current text "
                "parameters before predicting")
    classes = tuple(class_names) if class_names is not None else bank.class_names
    with torch.no_grad():
        out = backend.encode_image(images, prompt_state)
        per_attr = attribute_similarity_logits(
            out, bank, prompt_state, classes, tree.attribute_names,
            pooling_mode=pooling_mode, alignment_mode=alignment_mode)
        fused = fuse_logits(per_attr, alpha)
    bundle = AttributeLogits(per_attribute=per_attr, fused=fused, alpha=alpha,
                             class_names=classes)
    return bundle, argmax_lowest_index(fused)


def export_attention(backend: DualEncoder, image: torch.Tensor,
                     prompt_state: PromptState, bank: EmbeddingBank,
                     class_name: str, attribute_names: tuple[str, ...],
                     alignment_mode: str = "experts",
                     ) -> dict[str, list[tuple[str, float]]]:
    """Per-attribute description attention weights for one image and class,
    sorted by weight (the interpretability readout)."""
    if image.ndim == 3:
        image = image.unsqueeze(0)
    out = backend.encode_image(image, prompt_state)
    result: dict[str, list[tuple[str, float]]] = {}
    for attr in attribute_names + (GLOBAL_CONTEXT_NAME,):
        if attr == GLOBAL_CONTEXT_NAME or alignment_mode == "cls_only":
            feat = out.cls_feature
        else:
            feat = out.expert_features[attr]
        w_q, w_k = prompt_state.vcp_weights(attr)
        pooled = pool(feat, bank.matrix(attr, class_name), w_q, w_k)
        weights = pooled.attention_weights[0].tolist()
        pairs = list(zip(bank.descriptions[attr][class_name], weights))
        pairs.sort(key=lambda p: -p[1])
        result[attr] = [(d, float(w)) for d, w in pairs]
    return result


# --- metrics -----------------------------------------------------------------


def harmonic_mean(base_acc: float, novel_acc: float) -> float:
    """Harmonic mean of two accuracies in percent; 0 when both are 0."""
    if not (0.0 <= base_acc <= 100.0 and 0.0 <= novel_acc <= 100.0):
        raise ValueError("accuracies must be in [0, 100]")
    if base_acc == 0.0 and novel_acc == 0.0:
        return 0.0
    return 2.0 * base_acc * novel_acc / (base_acc + novel_acc)


def accuracy(predictions: torch.Tensor, labels: torch.Tensor) -> float:
    """Top-1 accuracy in percent."""
    if predictions.shape != labels.shape:
        raise ValueError("prediction/label shapes differ")
    if predictions.numel() == 0:
        raise ValueError("empty evaluation set")
    return 100.0 * float((predictions == labels).sum()) / predictions.numel()


# --- unstructured-description baseline --------------------------------------


def description_set_scores(cls_feature: torch.Tensor,
                           class_embeddings: dict[str, torch.Tensor],
                           ) -> tuple[torch.Tensor, tuple[str, ...]]:
    """Mean cosine between the image CLS feature and each class's flat
    description embeddings: (B, C) scores plus the class order."""
    names = tuple(class_embeddings)
    cols = []
    for name in names:
        emb = class_embeddings[name]
        if emb.ndim != 2 or emb.shape[0] == 0:
            raise ValueError(f"empty description list for class {name!r}")
        cols.append(cosine(cls_feature.unsqueeze(1), emb.unsqueeze(0)).mean(dim=1))
    return torch.stack(cols, dim=1), names


def classify_description_set_baseline(backend: DualEncoder, images: torch.Tensor,
                                      descriptions_per_class: dict[str, list[str]],
                                      ctx_tokens: torch.Tensor | None = None,
                                      ) -> tuple[torch.Tensor, torch.Tensor, tuple[str, ...]]:
    """Unstructured baseline: argmax over classes of the mean cosine between
    the image feature and every description of the class."""
    embeddings = {}
    for name, texts in descriptions_per_class.items():
        if not texts:
            raise ValueError(f"empty description list for class {name!r}")
        embeddings[name] = backend.encode_texts(texts, ctx_tokens=ctx_tokens)
    with torch.no_grad():
        feats = backend.encode_image(images).cls_feature
        scores, names = description_set_scores(feats, embeddings)
    return scores, argmax_lowest_index(scores), names
