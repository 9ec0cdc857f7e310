"""Dual-encoder contract, learnable prompt state, and description embedding
banks.

A backend bundles a vision tower and a text tower sharing one output space.
All prompt learning happens in ``PromptState``; backbone weights are owned by
the backend and stay frozen during prompt training.  Expert tokens ride the
vision tower's input sequence (between CLS and the patch tokens) with
zero-initialized per-layer residuals; the text tower sees a shared block of
context tokens prepended to every description.
"""

from __future__ import annotations

import abc
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from .pooling import init_projection
from .tree import GLOBAL_CONTEXT_NAME, AttributeTree, tree_hash

CTX_INIT_TEXT = "a photo of a."


@dataclass
class VisionForwardOutput:
    """Joint-space features from one vision forward pass."""

    cls_feature: torch.Tensor                  # (B, d), unit rows
    expert_features: dict[str, torch.Tensor]   # attr -> (B, d), unit rows
    patch_features: torch.Tensor | None = None


class DualEncoder(nn.Module, abc.ABC):
    """Contract shared by the toy backend and pretrained adapters."""

    backend_id: str = "abstract"
    embed_dim: int
    vision_width: int
    text_width: int
    num_vision_layers: int

    @abc.abstractmethod
    def encode_image(self, images: torch.Tensor,
                     prompt_state: "PromptState | None" = None,
                     return_patches: bool = False) -> VisionForwardOutput:
        """Encode a (B, C, H, W) batch; with a prompt state, also return the
        per-attribute expert features."""

    @abc.abstractmethod
    def encode_texts(self, texts: list[str],
                     ctx_tokens: torch.Tensor | None = None) -> torch.Tensor:
        """Encode texts to a (n, embed_dim) matrix of unit rows; ``ctx_tokens``
        (m, text_width) are prepended to every token sequence."""

    @abc.abstractmethod
    def embed_words(self, text: str) -> torch.Tensor:
        """Token embeddings of ``text`` (context-token initialization)."""

    @abc.abstractmethod
    def tau(self) -> torch.Tensor:
        """Softmax temperature used whenever similarities become logits."""

    @abc.abstractmethod
    def text_fingerprint(self) -> str:
        """Digest of the text tower's backbone parameters."""

    def freeze(self) -> "DualEncoder":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def frozen_clone(self) -> "DualEncoder":
        """Structural copy with training disabled (the regularization teacher)."""
        import copy

        clone = copy.deepcopy(self)
        return clone.freeze()


def conformance_errors(backend: DualEncoder) -> list[str]:
    """Cheap runtime check that an object honors the DualEncoder surface."""
    errors = []
    for name in ("encode_image", "encode_texts", "embed_words", "tau",
                 "text_fingerprint", "freeze", "frozen_clone"):
        if not callable(getattr(backend, name, None)):
            errors.append(f"missing method {name}")
    for attr in ("embed_dim", "vision_width", "text_width", "num_vision_layers",
                 "backend_id"):
        if getattr(backend, attr, None) is None:
            errors.append(f"missing attribute {attr}")
    return errors


# --- prompt state ----------------------------------------------------------


class PromptState(nn.Module):
    """All learnable prompt parameters.

    Per non-global attribute: one expert token plus one zero-initialized
    residual per vision layer.  One shared context-token block for the text
    tower.  One query/key projection pair per attribute, global context
    included (its pooling is conditioned on the CLS feature).
    """

    def __init__(self, attribute_names: tuple[str, ...], vision_width: int,
                 num_vision_layers: int, ctx_tokens: torch.Tensor,
                 embed_dim: int, seed: int = 0):
        super().__init__()
        if len(set(attribute_names)) != len(attribute_names):
            raise ValueError("attribute names must be unique")
        self.attribute_names = tuple(attribute_names)
        self.vision_width = vision_width
        self.num_vision_layers = num_vision_layers
        self.embed_dim = embed_dim

        gen = torch.Generator().manual_seed(seed)
        dtype = ctx_tokens.dtype
        self.expert_tokens = nn.ParameterList([
            nn.Parameter(torch.randn(vision_width, generator=gen, dtype=dtype) * 0.02)
            for _ in self.attribute_names
        ])
        self.expert_residuals = nn.ParameterList([
            nn.Parameter(torch.zeros(num_vision_layers, vision_width, dtype=dtype))
            for _ in self.attribute_names
        ])
        self.ctx_tokens = nn.Parameter(ctx_tokens.detach().clone())
        # q/k projections indexed by attribute order; global context last
        self.vcp_q = nn.ParameterList([
            nn.Parameter(init_projection(embed_dim, gen, dtype=dtype))
            for _ in range(len(self.attribute_names) + 1)
        ])
        self.vcp_k = nn.ParameterList([
            nn.Parameter(init_projection(embed_dim, gen, dtype=dtype))
            for _ in range(len(self.attribute_names) + 1)
        ])

    @property
    def num_ctx(self) -> int:
        return self.ctx_tokens.shape[0]

    def attribute_index(self, name: str) -> int:
        if name == GLOBAL_CONTEXT_NAME:
            return len(self.attribute_names)
        return self.attribute_names.index(name)

    def vcp_weights(self, name: str) -> tuple[torch.Tensor, torch.Tensor]:
        i = self.attribute_index(name)
        return self.vcp_q[i], self.vcp_k[i]

    def vision_parameters(self):
        """Expert tokens, their residuals, and the pooling projections."""
        yield from self.expert_tokens
        yield from self.expert_residuals
        yield from self.vcp_q
        yield from self.vcp_k

    def text_parameters(self):
        yield self.ctx_tokens

    def ctx_fingerprint(self) -> str:
        return hashlib.sha256(
            self.ctx_tokens.detach().cpu().numpy().tobytes()).hexdigest()

    @classmethod
    def create(cls, backend: DualEncoder, attribute_names: tuple[str, ...],
               seed: int = 0) -> "PromptState":
        ctx = backend.embed_words(CTX_INIT_TEXT)
        return cls(attribute_names, backend.vision_width,
                   backend.num_vision_layers, ctx, backend.embed_dim, seed=seed)


# --- embedding bank --------------------------------------------------------


@dataclass
class EmbeddingBank:
    """Per-(attribute, class) description embedding matrices with provenance.

    ``text_version`` changes whenever the tree, the context tokens, or the
    text tower parameters change, so stale banks are detectable.
    """

    matrices: dict[str, dict[str, torch.Tensor]]
    descriptions: dict[str, dict[str, list[str]]]
    tree_hash: str
    text_version: str
    class_names: tuple[str, ...] = ()
    attribute_names: tuple[str, ...] = field(default_factory=tuple)

    def matrix(self, attribute: str, class_name: str) -> torch.Tensor:
        return self.matrices[attribute][class_name]

    def num_matrices(self) -> int:
        return sum(len(v) for v in self.matrices.values())


def text_version_stamp(tree: AttributeTree, backend: DualEncoder,
                       prompt_state: PromptState | None) -> str:
    h = hashlib.sha256()
    h.update(tree_hash(tree).encode())
    h.update(backend.text_fingerprint().encode())
    h.update(prompt_state.ctx_fingerprint().encode() if prompt_state else b"frozen")
    return h.hexdigest()


def encode_class_attribute(backend: DualEncoder, tree: AttributeTree,
                           prompt_state: PromptState | None,
                           attribute: str, class_name: str) -> torch.Tensor:
    """Embed the leaves of one (class, attribute) pair; rows are unit-norm."""
    texts = tree.descriptions(class_name, attribute)
    ctx = prompt_state.ctx_tokens if prompt_state is not None else None
    return backend.encode_texts(texts, ctx_tokens=ctx)


def build_embedding_bank(backend: DualEncoder, tree: AttributeTree,
                         prompt_state: PromptState | None,
                         class_names: tuple[str, ...] | None = None,
                         ) -> EmbeddingBank:
    """Materialize embedding matrices for every (class, attribute) pair,
    global context included."""
    classes = tuple(class_names) if class_names is not None else tree.class_names
    attributes = tree.attribute_names + (GLOBAL_CONTEXT_NAME,)
    matrices: dict[str, dict[str, torch.Tensor]] = {}
    descriptions: dict[str, dict[str, list[str]]] = {}
    for attr in attributes:
        matrices[attr] = {}
        descriptions[attr] = {}
        for c in classes:
            try:
                matrices[attr][c] = encode_class_attribute(
                    backend, tree, prompt_state, attr, c)
            except Exception as e:
                raise RuntimeError(
                    f"failed to embed class {c!r}, attribute {attr!r}: {e}") from e
            descriptions[attr][c] = tree.descriptions(c, attr)
    return EmbeddingBank(
        matrices=matrices,
        descriptions=descriptions,
        tree_hash=tree_hash(tree),
        text_version=text_version_stamp(tree, backend, prompt_state),
        class_names=classes,
        attribute_names=tree.attribute_names,
    )


# --- registry --------------------------------------------------------------

_REGISTRY: dict[str, object] = {}


def register_backend(backend_id: str, factory) -> None:
    _REGISTRY[backend_id] = factory


def create_backend(backend_id: str, **kwargs) -> DualEncoder:
    if backend_id not in _REGISTRY:
        raise KeyError(f"unknown backend {backend_id!r}; "
                       f"registered: {sorted(_REGISTRY)}")
    backend = _REGISTRY[backend_id](**kwargs)
    errors = conformance_errors(backend)
    if errors:
        raise TypeError(f"backend {backend_id!r} violates the encoder "
                        f"contract: {errors}")
    return backend


def available_backends() -> list[str]:
    return sorted(_REGISTRY)


# --- checkpoints -----------------------------------------------------------


def save_checkpoint(directory: str | Path, backend: DualEncoder,
                    prompt_last: PromptState, prompt_gpa: PromptState | None,
                    manifest: dict) -> Path:
    """Write parameter blobs plus a manifest.

    The manifest records backend id, output dimension, the attribute list,
    the tree hash, and the final epoch so stale or mismatched checkpoints are
    detectable at load time.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = {
        "backend_state": backend.state_dict(),
        "backend_config": getattr(backend, "config_dict", lambda: {})(),
        "prompt_last": prompt_last.state_dict(),
        "prompt_gpa": prompt_gpa.state_dict() if prompt_gpa is not None else None,
        "attribute_names": list(prompt_last.attribute_names),
        "num_ctx": prompt_last.num_ctx,
    }
    torch.save(blob, directory / "params.pt")
    manifest = dict(manifest)
    manifest.setdefault("backend_id", backend.backend_id)
    manifest.setdefault("embed_dim", backend.embed_dim)
    manifest["attribute_names"] = list(prompt_last.attribute_names)
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory: str | Path):
    """Load (backend, prompt_last, prompt_gpa, manifest) from a directory."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    blob = torch.load(directory / "params.pt", weights_only=False)
    backend = create_backend(manifest["backend_id"], **blob["backend_config"])
    backend.load_state_dict(blob["backend_state"])
    backend.freeze()

    def build_prompt(state):
        ps = PromptState(
            tuple(blob["attribute_names"]), backend.vision_width,
            backend.num_vision_layers,
            torch.zeros(blob["num_ctx"], backend.text_width,
                        dtype=next(iter(state.values())).dtype),
            backend.embed_dim)
        ps.load_state_dict(state)
        return ps

    prompt_last = build_prompt(blob["prompt_last"])
    prompt_gpa = build_prompt(blob["prompt_gpa"]) if blob["prompt_gpa"] else None
    return backend, prompt_last, prompt_gpa, manifest
