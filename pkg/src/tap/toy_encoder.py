"""Desk-scale dual encoder: a small vision transformer and a word-level text
transformer sharing one output space.

The backend is a stand-in for a large pretrained image/text model: it can be
briefly contrastively pretrained on a dataset's own train split (so that its
zero-shot predictions and frozen features are meaningful teachers) and is
then frozen for prompt learning.  Every forward is deterministic -- there is
no dropout anywhere -- and the whole stack runs in float64 when asked, which
is what the finite-difference gradient tests rely on.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .backends import (DualEncoder, PromptState, VisionForwardOutput,
                       register_backend)
from .tree import AttributeTree, instantiate_global_context

_TOKEN_RE = re.compile(r"[a-z0-9]+")

UNK, EOT = "<unk>", "<eot>"


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class WordTokenizer:
    """Word-level tokenizer over a fixed vocabulary; unknown words map to
    a single <unk> id."""

    def __init__(self, vocab: list[str]):
        self.words = [UNK, EOT] + [w for w in vocab if w not in (UNK, EOT)]
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str, append_eot: bool = True) -> list[int]:
        ids = [self.index.get(w, 0) for w in tokenize(text)]
        if append_eot:
            ids.append(self.index[EOT])
        return ids


def build_vocab(*trees: AttributeTree, extra_texts: tuple[str, ...] = ()) -> list[str]:
    """Word vocabulary covering every description, template instantiation,
    and class name in the given trees."""
    words: set[str] = set()
    for tree in trees:
        for c, attrs in tree.per_class.items():
            words.update(tokenize(c))
            for descs in attrs.values():
                for d in descs:
                    words.update(tokenize(d))
            for t in instantiate_global_context(tree, c):
                words.update(tokenize(t))
    for t in extra_texts:
        words.update(tokenize(t))
    words.update(tokenize("a photo of a."))
    return sorted(words)


@dataclass
class ToyEncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    vision_layers: int = 4
    vision_width: int = 64
    vision_heads: int = 4
    text_layers: int = 2
    text_width: int = 64
    text_heads: int = 4
    embed_dim: int = 64
    max_text_len: int = 64
    dtype: str = "float32"
    seed: int = 0

    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be a multiple of patch_size")
        if self.vision_width % self.vision_heads or self.text_width % self.text_heads:
            raise ValueError("width must be a multiple of the head count")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None):
        B, L, W = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        shape = (B, L, self.heads, self.head_dim)
        q = q.view(shape).transpose(1, 2)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, L, W))


class Block(nn.Module):
    """Pre-norm transformer block with a GELU MLP (smooth everywhere, which
    keeps finite-difference checks clean)."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(),
                                 nn.Linear(4 * width, width))

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None):
        x = x + self.attn(self.ln1(x), key_mask)
        return x + self.mlp(self.ln2(x))


class ToyDualEncoder(DualEncoder):
    backend_id = "toy"

    def __init__(self, vocab: list[str], config: ToyEncoderConfig | None = None,
                 **config_kwargs):
        super().__init__()
        self.config = config or ToyEncoderConfig(**config_kwargs)
        cfg = self.config
        dtype = cfg.torch_dtype()
        torch.manual_seed(cfg.seed)

        self.tokenizer = WordTokenizer(vocab)
        self.embed_dim = cfg.embed_dim
        self.vision_width = cfg.vision_width
        self.text_width = cfg.text_width
        self.num_vision_layers = cfg.vision_layers
        self.num_patches = (cfg.image_size // cfg.patch_size) ** 2

        w = cfg.vision_width
        self.patch_embed = nn.Linear(cfg.channels * cfg.patch_size ** 2, w)
        self.cls_token = nn.Parameter(torch.randn(w) * 0.02)
        self.vision_pos = nn.Parameter(torch.randn(1 + self.num_patches, w) * 0.02)
        self.vision_blocks = nn.ModuleList(
            Block(w, cfg.vision_heads) for _ in range(cfg.vision_layers))
        self.vision_ln = nn.LayerNorm(w)
        self.vision_proj = nn.Linear(w, cfg.embed_dim, bias=False)

        tw = cfg.text_width
        self.token_embed = nn.Embedding(len(self.tokenizer), tw)
        nn.init.normal_(self.token_embed.weight, std=0.02)
        self.text_pos = nn.Parameter(torch.randn(cfg.max_text_len, tw) * 0.02)
        self.text_blocks = nn.ModuleList(
            Block(tw, cfg.text_heads) for _ in range(cfg.text_layers))
        self.text_ln = nn.LayerNorm(tw)
        self.text_proj = nn.Linear(tw, cfg.embed_dim, bias=False)

        # log of the inverse softmax temperature, CLIP-style init (tau=0.07)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1.0 / 0.07)))

        self.to(dtype)

    # -- housekeeping ------------------------------------------------------

    def config_dict(self) -> dict:
        return {"vocab": self.tokenizer.words[2:], "config": asdict(self.config)}

    def tau(self) -> torch.Tensor:
        return torch.exp(-self.logit_scale)

    def text_fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(",".join(self.tokenizer.words).encode())
        text_modules = {"token_embed": self.token_embed, "text_pos": self.text_pos,
                        "text_ln": self.text_ln, "text_proj": self.text_proj,
                        "text_blocks": self.text_blocks}
        for name, mod in sorted(text_modules.items()):
            if isinstance(mod, nn.Parameter):
                h.update(mod.detach().cpu().numpy().tobytes())
            else:
                for pname, p in sorted(mod.named_parameters()):
                    h.update(pname.encode())
                    h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def _check_prompt_state(self, prompt_state: PromptState):
        if (prompt_state.vision_width != self.vision_width
                or prompt_state.num_vision_layers != self.num_vision_layers
                or prompt_state.embed_dim != self.embed_dim
                or prompt_state.ctx_tokens.shape[1] != self.text_width):
            raise ValueError(
                "prompt state dimensions do not match this backend: "
                f"vision_width {prompt_state.vision_width} vs {self.vision_width}, "
                f"layers {prompt_state.num_vision_layers} vs {self.num_vision_layers}")

    # -- vision ------------------------------------------------------------

    def _patchify(self, images: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        B, C, H, W = images.shape
        if C != cfg.channels or H != cfg.image_size or W != cfg.image_size:
            raise ValueError(
                f"expected (B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}) "
                f"images, got {tuple(images.shape)}")
        p = cfg.patch_size
        # center [0, 1] pixels to [-1, 1]; all-positive inputs would squeeze
        # every patch embedding into a narrow cone
        x = images.to(self.cls_token.dtype) * 2.0 - 1.0
        x = x.reshape(B, C, H // p, p, W // p, p)
        return x.permute(0, 2, 4, 1, 3, 5).reshape(B, self.num_patches, C * p * p)

    def encode_image(self, images: torch.Tensor,
                     prompt_state: PromptState | None = None,
                     return_patches: bool = False) -> VisionForwardOutput:
        patches = self.patch_embed(self._patchify(images)) + self.vision_pos[1:]
        B = patches.shape[0]
        cls = (self.cls_token + self.vision_pos[0]).expand(B, 1, -1)

        names: tuple[str, ...] = ()
        k = 0
        if prompt_state is not None:
            self._check_prompt_state(prompt_state)
            names = prompt_state.attribute_names
            k = len(names)
            experts = torch.stack(list(prompt_state.expert_tokens))  # (k, w)
            seq = torch.cat([cls, experts.expand(B, k, -1), patches], dim=1)
        else:
            seq = torch.cat([cls, patches], dim=1)

        for i, block in enumerate(self.vision_blocks):
            if k:
                res = torch.stack([r[i] for r in prompt_state.expert_residuals])
                seq = torch.cat([seq[:, :1], seq[:, 1:1 + k] + res, seq[:, 1 + k:]],
                                dim=1)
            seq = block(seq)
        seq = self.vision_ln(seq)

        def out_proj(h):
            z = self.vision_proj(h)
            return z / z.norm(dim=-1, keepdim=True)

        cls_feature = out_proj(seq[:, 0])
        expert_features = {name: out_proj(seq[:, 1 + i]) for i, name in enumerate(names)}
        patch_features = self.vision_proj(seq[:, 1 + k:]) if return_patches else None
        return VisionForwardOutput(cls_feature=cls_feature,
                                   expert_features=expert_features,
                                   patch_features=patch_features)

    # -- text ----------------------------------------------------------------

    def embed_words(self, text: str) -> torch.Tensor:
        ids = self.tokenizer.encode(text, append_eot=False)
        return self.token_embed.weight[ids].detach().clone()

    def encode_texts(self, texts: list[str],
                     ctx_tokens: torch.Tensor | None = None) -> torch.Tensor:
        if not texts:
            raise ValueError("no texts to encode")
        cfg = self.config
        m = 0 if ctx_tokens is None else ctx_tokens.shape[0]
        id_lists = []
        for t in texts:
            ids = self.tokenizer.encode(t)
            if m + len(ids) > cfg.max_text_len:
                raise ValueError(
                    f"text exceeds backend maximum length {cfg.max_text_len}: {t!r}")
            id_lists.append(ids)

        B = len(texts)
        L = m + max(len(ids) for ids in id_lists)
        dtype = self.text_pos.dtype
        seq = torch.zeros(B, L, cfg.text_width, dtype=dtype)
        mask = torch.zeros(B, L, dtype=torch.bool)
        eot_pos = []
        for b, ids in enumerate(id_lists):
            tok = self.token_embed(torch.tensor(ids, dtype=torch.long))
            if m:
                tok = torch.cat([ctx_tokens.to(dtype), tok], dim=0)
            seq[b, : tok.shape[0]] = tok
            mask[b, : tok.shape[0]] = True
            eot_pos.append(tok.shape[0] - 1)
        seq = seq + self.text_pos[:L]

        for block in self.text_blocks:
            seq = block(seq, key_mask=mask)
        seq = self.text_ln(seq)
        readout = seq[torch.arange(B), torch.tensor(eot_pos)]
        z = self.text_proj(readout)
        return z / z.norm(dim=-1, keepdim=True)


# --- contrastive warmup of the backbone -------------------------------------


@dataclass
class PretrainConfig:
    steps: int = 600
    batch_size: int = 32
    lr: float = 3e-3
    aug_noise: float = 0.02  # fresh per-step pixel noise; cheap augmentation
    seed: int = 0


@dataclass
class ContrastGroup:
    """One attribute's caption alternatives for warmup contrast.

    ``captions_per_value[v]`` holds interchangeable phrasings describing
    value v; ``value_per_image[i]`` is the value image i actually shows.
    """

    captions_per_value: list[list[str]]
    value_per_image: np.ndarray


def clip_style_pretrain(backend: ToyDualEncoder, images: torch.Tensor,
                        labels: torch.Tensor,
                        class_caption_pools: list[list[str]],
                        config: PretrainConfig | None = None,
                        attribute_groups: list[ContrastGroup] | None = None,
                        ) -> list[float]:
    """Contrastive warmup that stands in for large-scale pretraining.

    Two terms per step: (1) class-anchored cross-entropy -- one caption is
    sampled per class and each image must pick its own class's caption;
    anchoring on classes avoids the duplicate-caption collisions plain
    in-batch InfoNCE suffers with a handful of classes.  (2) optional
    attribute contrast -- for each group, images must pick the caption of
    their true attribute value among the value alternatives, which forces
    value words to mean something visually and keeps the joint space
    compositional instead of a pure class-name lookup.

    Returns the per-step loss trace; the caller freezes the backend after.
    """
    cfg = config or PretrainConfig()
    if images.shape[0] != labels.shape[0]:
        raise ValueError("one label per image is required")
    if int(labels.max()) >= len(class_caption_pools):
        raise ValueError("label outside the caption-pool range")
    groups = attribute_groups or []
    for g in groups:
        if len(g.value_per_image) != images.shape[0]:
            raise ValueError("contrast group does not cover every image")
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(backend.parameters(), lr=cfg.lr)
    n = images.shape[0]
    losses = []
    backend.train()
    for _ in range(cfg.steps):
        size = min(cfg.batch_size, n)
        idx = rng.choice(n, size=size, replace=False)
        batch_labels = labels[idx]
        batch = images[idx]
        if cfg.aug_noise > 0:
            jitter = rng.normal(0.0, cfg.aug_noise, size=tuple(batch.shape))
            batch = (batch + torch.from_numpy(jitter).to(batch.dtype)).clamp(0, 1)
        img_f = backend.encode_image(batch).cls_feature
        scale = 1.0 / backend.tau()

        # one text-tower pass covers the class captions and every group
        caps = [pool[rng.integers(len(pool))] for pool in class_caption_pools]
        offsets = [len(caps)]
        for group in groups:
            caps.extend(phr[rng.integers(len(phr))]
                        for phr in group.captions_per_value)
            offsets.append(len(caps))
        txt_f = backend.encode_texts(caps)

        loss = torch.nn.functional.cross_entropy(
            (img_f @ txt_f[: offsets[0]].T) * scale, batch_labels)
        for gi, group in enumerate(groups):
            val_f = txt_f[offsets[gi]: offsets[gi + 1]]
            targets = torch.from_numpy(group.value_per_image[idx]).long()
            loss = loss + torch.nn.functional.cross_entropy(
                (img_f @ val_f.T) * scale, targets)

        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            backend.logit_scale.clamp_(max=math.log(100.0))
        losses.append(loss.item())
    backend.eval()
    return losses


def _toy_factory(vocab: list[str], **kwargs) -> ToyDualEncoder:
    if "config" in kwargs and isinstance(kwargs["config"], dict):
        kwargs["config"] = ToyEncoderConfig(**kwargs["config"])
    return ToyDualEncoder(vocab=vocab, **kwargs)


def _adapter_factory(provider, **kwargs) -> DualEncoder:
    """Adapter slot for pretrained weights: ``provider`` is a callable (or
    "module:function" path) returning an object that satisfies the
    DualEncoder contract; the registry conformance check runs on the result.
    """
    if isinstance(provider, str):
        mod_name, _, fn_name = provider.partition(":")
        import importlib

        provider = getattr(importlib.import_module(mod_name), fn_name)
    return provider(**kwargs)


register_backend("toy", _toy_factory)
register_backend("pretrained-clip-adapter", _adapter_factory)
