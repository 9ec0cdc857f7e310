"""Datasets, splits, the synthetic desk-scale dataset, and protocol runs.

The synthetic dataset renders images whose horizontal bands each encode one
latent attribute value; its ground-truth attribute tree describes those
values (plus, optionally, a plausible-but-absent distractor per pair, which
gives the description-pooling layer something real to suppress).  Band
textures are keyed by (attribute, value) independently of the dataset, so a
value means the same thing visually across datasets and cross-dataset
transfer is possible.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backends import PromptState, build_embedding_bank, create_backend
from .inference import accuracy, argmax_lowest_index, harmonic_mean, predict
from .losses import RegCoefficients
from .toy_encoder import (ContrastGroup, PretrainConfig, ToyEncoderConfig,
                          build_vocab, clip_style_pretrain)
from .training import LR_GROUPS, TASK_EPOCHS, ScheduleConfig, train
from .tree import (DEFAULT_GLOBAL_TEMPLATES, AttributeTree, flatten_tree,
                   instantiate_global_context, restrict_tree, validate_tree)

FIXED_XD_ATTRIBUTES = ("Pattern", "Texture", "Shape", "Context")

TASKS = ("b2n", "xd", "fewshot")

_CLASS_NAME_POOL = (
    "varen", "tolix", "murid", "selda", "quorn", "pimlo", "draven", "koris",
    "felun", "brint", "oswit", "marek", "nivex", "talpa", "gorrim", "ystra",
)

_VALUE_WORDS = (
    "crimson", "azure", "amber", "violet", "emerald", "ivory", "teal", "coral",
    "slate", "ochre", "indigo", "russet", "jade", "plum", "saffron", "pewter",
)


# --- runtime dataset container ----------------------------------------------


@dataclass
class LoadedDataset:
    """In-memory dataset: images, integer labels, and designated sample pools."""

    name: str
    class_names: tuple[str, ...]
    images: torch.Tensor            # (N, C, H, W), float32 in [0, 1]
    labels: torch.Tensor            # (N,) long, indices into class_names
    sample_ids: tuple[str, ...]
    train_pool: np.ndarray          # indices eligible for training draws
    test_pool: np.ndarray           # indices eligible for evaluation
    # optional dedicated warmup pool (never used for prompt training or eval)
    pretrain_pool: np.ndarray | None = None
    # optional ground-truth caption pools for backbone warmup; classes
    # without an entry fall back to tree-derived captions
    caption_pools: dict[str, list[str]] | None = None
    # optional warmup contrast structure: nameless caption phrasings per
    # (attribute, value) and the per-sample values actually rendered
    attribute_captions: dict[str, list[list[str]]] | None = None
    sample_values: np.ndarray | None = None     # (N, k)

    def __post_init__(self):
        if int(self.labels.max()) >= len(self.class_names) or int(self.labels.min()) < 0:
            raise ValueError("labels outside the class list range")


# --- splits -------------------------------------------------------------------


@dataclass
class Splits:
    task: str
    seed: int
    shots: int
    base_classes: tuple[str, ...]
    novel_classes: tuple[str, ...]
    train_idx: np.ndarray
    base_test_idx: np.ndarray
    novel_test_idx: np.ndarray


def make_splits(dataset: LoadedDataset, task: str, shots: int = 16,
                seed: int = 0) -> Splits:
    """Build the split for one task.

    base-to-novel: the ordered class list is split equally (first half base,
    ceil on odd counts); training draws ``shots`` samples per base class.
    few-shot (and the cross-dataset source role): ``shots`` per class over
    all classes.  Test sets never overlap the drawn training samples.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    rng = np.random.default_rng(seed)
    names = dataset.class_names
    if task == "b2n":
        half = (len(names) + 1) // 2
        base, novel = names[:half], names[half:]
    else:
        base, novel = names, ()

    labels = dataset.labels.numpy()
    train_parts = []
    for c in base:
        ci = names.index(c)
        candidates = np.sort(dataset.train_pool[labels[dataset.train_pool] == ci])
        if len(candidates) < shots:
            raise ValueError(
                f"insufficient samples for class {c!r}: have {len(candidates)}, "
                f"need {shots}")
        train_parts.append(rng.choice(candidates, size=shots, replace=False))
    train_idx = np.sort(np.concatenate(train_parts)) if train_parts else np.array([], int)

    chosen = set(train_idx.tolist())
    base_set = {names.index(c) for c in base}
    novel_set = {names.index(c) for c in novel}
    base_test = np.array(sorted(i for i in dataset.test_pool
                                if labels[i] in base_set and i not in chosen), int)
    novel_test = np.array(sorted(i for i in dataset.test_pool
                                 if labels[i] in novel_set and i not in chosen), int)
    return Splits(task=task, seed=seed, shots=shots, base_classes=tuple(base),
                  novel_classes=tuple(novel), train_idx=train_idx,
                  base_test_idx=base_test, novel_test_idx=novel_test)


def write_split_file(path: str | Path, dataset: LoadedDataset, splits: Splits) -> None:
    lines = [f"# task={splits.task} seed={splits.seed} shots={splits.shots}"]
    for section, idx in (("train", splits.train_idx),
                         ("base_test", splits.base_test_idx),
                         ("novel_test", splits.novel_test_idx)):
        lines.append(f"[{section}]")
        lines.extend(dataset.sample_ids[i] for i in idx)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


# --- synthetic dataset ---------------------------------------------------------


@dataclass
class SyntheticConfig:
    num_classes: int = 8
    attribute_names: tuple[str, ...] = ("upper band", "middle band", "lower band")
    values_per_attribute: int = 3
    image_size: int = 32
    channels: int = 3
    train_per_class: int = 16
    test_per_class: int = 12
    # extra per-class images reserved for backbone warmup, the desk-scale
    # analog of the large pretraining corpus; disjoint from train and test
    pretrain_per_class: int = 48
    noise: float = 0.05
    # per image and attribute, render a different value with this probability;
    # instance variation is what gives image-conditioned pooling real work,
    # and it stops the encoder from fitting cross-band lookup shortcuts
    value_flip_prob: float = 0.1
    # band heights snap to multiples of this so attribute regions align with
    # an 8-pixel patch grid instead of straddling patch boundaries
    band_align: int = 8
    seed: int = 0
    dataset_name: str = "synthetic"
    class_names: tuple[str, ...] | None = None
    value_table: tuple[tuple[int, ...], ...] | None = None
    # attr -> per value: list of "which ..." completions; first one keys the texture
    value_lexicon: dict[str, list[list[str]]] | None = None
    include_distractors: bool = True

    def __post_init__(self):
        if len(self.attribute_names) < 2:
            raise ValueError("need at least 2 attributes")
        if self.num_classes < 4:
            raise ValueError("need at least 4 classes")
        if self.image_size < 2 * len(self.attribute_names):
            raise ValueError("image too small for one band per attribute")
        if not 0.0 <= self.value_flip_prob < 0.5:
            raise ValueError("value_flip_prob must be in [0, 0.5)")


@dataclass
class SyntheticAttributeDataset:
    config: SyntheticConfig
    class_names: tuple[str, ...]
    value_table: tuple[tuple[int, ...], ...]
    tree: AttributeTree
    images: torch.Tensor
    labels: torch.Tensor
    sample_ids: tuple[str, ...]
    train_idx: np.ndarray
    test_idx: np.ndarray
    pretrain_idx: np.ndarray | None = None
    rendered_values: np.ndarray | None = None   # (N, k) values actually drawn

    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.numpy().tobytes())
        h.update(self.labels.numpy().tobytes())
        h.update(json.dumps(self.class_names).encode())
        from .tree import serialize_tree

        h.update(serialize_tree(self.tree))
        return h.hexdigest()

    def caption_pools(self) -> dict[str, list[str]]:
        """True-value captions per class (named and nameless), mirroring a
        web-scale corpus: captions describe what is actually in the image, so
        the tree's deliberate distractor leaves are not included here."""
        lexicon = self._lexicon()
        pools: dict[str, list[str]] = {}
        for c, values in zip(self.class_names, self.value_table):
            pool = [f"a photo of a {c}."]
            pool.extend(instantiate_global_context(self.tree, c))
            for ai, attr in enumerate(self.config.attribute_names):
                for phrase in lexicon[attr][values[ai]]:
                    pool.append(f"{c}, which {phrase}")
                    pool.append(f"a photo of something which {phrase}")
            pools[c] = pool
        return pools

    def _lexicon(self) -> dict[str, list[list[str]]]:
        return self.config.value_lexicon or _default_lexicon(
            self.config.attribute_names,
            max(max(t) for t in self.value_table) + 1)

    def attribute_captions(self) -> dict[str, list[list[str]]]:
        lexicon = self._lexicon()
        return {attr: [[f"a photo of something which {ph}" for ph in phrasings]
                       for phrasings in lexicon[attr]]
                for attr in self.config.attribute_names}

    def to_loaded(self) -> LoadedDataset:
        return LoadedDataset(
            name=self.config.dataset_name, class_names=self.class_names,
            images=self.images, labels=self.labels, sample_ids=self.sample_ids,
            train_pool=self.train_idx, test_pool=self.test_idx,
            pretrain_pool=self.pretrain_idx,
            caption_pools=self.caption_pools(),
            attribute_captions=self.attribute_captions(),
            sample_values=self.rendered_values)


def _stable_seed(*parts: str) -> int:
    digest = hashlib.sha256("|".join(parts).encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _default_lexicon(attribute_names, values_per_attribute) -> dict[str, list[list[str]]]:
    lexicon: dict[str, list[list[str]]] = {}
    for ai, attr in enumerate(attribute_names):
        values = []
        for v in range(values_per_attribute):
            word = _VALUE_WORDS[(ai * values_per_attribute + v) % len(_VALUE_WORDS)]
            values.append([
                f"has a {word} toned {attr}",
                f"shows a {word} cast across the {attr}",
                f"carries a clearly {word} colored {attr}",
            ])
        lexicon[attr] = values
    return lexicon


# Hand-picked table for the default 8-class/3-attribute/3-value dataset.
# The base half covers every value of every attribute, the novel half uses
# only seen values in unseen combinations, and no single value flip of any
# class lands on another class's canonical tuple, so rendering flips never
# manufacture a clean image of a different class.
_DEFAULT_TABLE_8X3X3 = (
    (0, 0, 0), (1, 1, 1), (2, 2, 2), (0, 1, 2),
    (2, 1, 0), (1, 2, 0), (0, 2, 1), (1, 0, 2),
)


def _default_value_table(num_classes, k, values) -> tuple[tuple[int, ...], ...]:
    """Distinct value tuples; the default geometry uses a curated layout and
    other shapes fall back to weight order (pass an explicit table for tighter
    control over value coverage)."""
    if (num_classes, k, values) == (8, 3, 3):
        return _DEFAULT_TABLE_8X3X3
    import itertools

    combos = sorted(itertools.product(range(values), repeat=k),
                    key=lambda t: (sum(t), t))
    if num_classes > len(combos):
        raise ValueError(
            f"cannot place {num_classes} distinct classes with "
            f"{values} values over {k} attributes")
    return tuple(combos[:num_classes])


# well-separated base colors, one per (attribute, value) slot, so no two
# bands are accidental near-duplicates and no color repeats across bands
_PALETTE = np.array([
    [0.95, 0.15, 0.15], [0.15, 0.85, 0.20], [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.10], [0.85, 0.15, 0.90], [0.10, 0.90, 0.90],
    [0.95, 0.55, 0.10], [0.45, 0.25, 0.05], [0.60, 0.95, 0.30],
    [0.30, 0.45, 0.60], [0.90, 0.45, 0.65], [0.25, 0.60, 0.25],
])


def _band_texture(attr: str, value_key: str, slot_index: int, height: int,
                  width: int, channels: int) -> np.ndarray:
    """Deterministic texture for one (attribute, value); dataset-independent.

    A palette color keyed by the (attribute, value) slot dominates; a coarse
    random pattern keyed by (attribute, phrase) adds within-value structure.
    """
    rng = np.random.default_rng(_stable_seed("texture", attr, value_key))
    gh, gw = max(1, height // 4), max(1, width // 8)
    coarse = rng.uniform(0.0, 1.0, size=(channels, gh, gw))
    tile = np.kron(coarse, np.ones((height // gh + 1, width // gw + 1)))
    color = _PALETTE[slot_index % len(_PALETTE)][:channels, None, None]
    return 0.65 * color + 0.35 * tile[:, :height, :width]


def _synthetic_tree(cfg: SyntheticConfig, class_names, value_table,
                    lexicon) -> AttributeTree:
    per_class: dict[str, dict[str, list[str]]] = {}
    for c, values in zip(class_names, value_table):
        attrs: dict[str, list[str]] = {}
        for ai, attr in enumerate(cfg.attribute_names):
            v = values[ai]
            descs = [f"{c}, which {ph}" for ph in lexicon[attr][v]]
            if cfg.include_distractors:
                other = (v + 1) % len(lexicon[attr])
                descs.append(f"{c}, which {lexicon[attr][other][0]}")
            attrs[attr] = descs[:5]
        per_class[c] = attrs
    return AttributeTree(
        dataset_name=cfg.dataset_name,
        attribute_names=tuple(cfg.attribute_names),
        per_class=per_class,
        global_context_templates=DEFAULT_GLOBAL_TEMPLATES,
    )


def generate_synthetic(config: SyntheticConfig) -> SyntheticAttributeDataset:
    """Render the dataset and author its ground-truth tree.

    Identical configs produce byte-identical datasets; classes sharing a full
    value tuple are rejected as non-separable.
    """
    cfg = config
    k = len(cfg.attribute_names)
    names = cfg.class_names or _CLASS_NAME_POOL[: cfg.num_classes]
    if len(names) < cfg.num_classes:
        raise ValueError("not enough class names")
    names = tuple(names[: cfg.num_classes])
    if len(set(names)) != len(names):
        raise ValueError("class names must be unique")

    table = cfg.value_table or _default_value_table(
        cfg.num_classes, k, cfg.values_per_attribute)
    table = tuple(tuple(t) for t in table[: cfg.num_classes])
    if len(set(table)) != len(table):
        raise ValueError("non-separable classes: two classes share every "
                         "attribute value")
    n_values = max(max(t) for t in table) + 1
    lexicon = cfg.value_lexicon or _default_lexicon(cfg.attribute_names, n_values)
    for attr in cfg.attribute_names:
        if attr not in lexicon or len(lexicon[attr]) < n_values:
            raise ValueError(f"lexicon does not cover attribute {attr!r}")

    H = W = cfg.image_size
    unit = cfg.band_align if cfg.image_size % cfg.band_align == 0 else 1
    rows = H // unit
    if rows < k:
        unit, rows = 1, H
    band_rows = [rows // k] * k
    band_rows[-1] += rows - sum(band_rows)
    heights = [r * unit for r in band_rows]
    prototypes: dict[tuple[int, int], np.ndarray] = {}
    for ai, attr in enumerate(cfg.attribute_names):
        for v in range(n_values):
            prototypes[(ai, v)] = _band_texture(
                attr, lexicon[attr][v][0], ai * n_values + v,
                heights[ai], W, cfg.channels)

    rng = np.random.default_rng(cfg.seed)
    images, labels, ids, rendered = [], [], [], []
    pools = {"train": [], "test": [], "pretrain": []}
    plan = (["train"] * cfg.train_per_class + ["test"] * cfg.test_per_class
            + ["pretrain"] * cfg.pretrain_per_class)
    pos = 0
    for ci, (c, values) in enumerate(zip(names, table)):
        for j, split in enumerate(plan):
            drawn = list(values)
            for ai in range(k):
                if n_values > 1 and rng.random() < cfg.value_flip_prob:
                    drawn[ai] = int(rng.choice(
                        [v for v in range(n_values) if v != values[ai]]))
            sample = np.concatenate(
                [prototypes[(ai, drawn[ai])] for ai in range(k)], axis=1)
            sample = np.clip(
                sample + rng.normal(0.0, cfg.noise, size=sample.shape), 0.0, 1.0)
            images.append(sample.astype(np.float32))
            labels.append(ci)
            rendered.append(drawn)
            ids.append(f"{c}/{split}/{j:04d}")
            pools[split].append(pos)
            pos += 1

    tree = _synthetic_tree(cfg, names, table, lexicon)
    report = validate_tree(tree)
    if not report.ok:
        raise AssertionError(f"generated tree failed validation: {report.messages()}")
    return SyntheticAttributeDataset(
        config=cfg, class_names=names, value_table=table, tree=tree,
        images=torch.from_numpy(np.stack(images)),
        labels=torch.tensor(labels, dtype=torch.long),
        sample_ids=tuple(ids),
        train_idx=np.array(pools["train"], int),
        test_idx=np.array(pools["test"], int),
        pretrain_idx=np.array(pools["pretrain"], int),
        rendered_values=np.array(rendered, int))


def food_synthetic_config(seed: int = 0, **overrides) -> SyntheticConfig:
    """A food-flavored synthetic preset whose Shape leaves include the
    round-vs-crescent pair used by the attention-export smoke checks."""
    lexicon = {
        "Color": [
            ["has a golden brown surface", "shows a toasted golden color"],
            ["has a pale ivory color", "shows an unbrowned pale surface"],
        ],
        "Shape": [
            ["is round with a pleated edge", "has a plump rounded body"],
            ["is crescent-shaped", "has a long curved profile"],
        ],
        "Texture": [
            ["has a soft and chewy texture", "shows a smooth steamed skin"],
            ["has a crispy texture from pan-frying", "shows a crackled fried crust"],
        ],
    }
    defaults = dict(
        num_classes=4,
        attribute_names=("Color", "Shape", "Texture"),
        values_per_attribute=2,
        class_names=("dumplings", "croissants", "pancakes", "springrolls"),
        value_table=((1, 0, 0), (0, 1, 1), (0, 0, 1), (1, 1, 0)),
        value_lexicon=lexicon,
        dataset_name="toyfood",
        seed=seed,
    )
    defaults.update(overrides)
    return SyntheticConfig(**defaults)


# --- index-file datasets --------------------------------------------------------


def load_index_dataset(root: str | Path, name: str,
                       image_size: int = 32) -> LoadedDataset:
    """Load ``<root>/<name>/{classes.txt,index.txt}``.

    index.txt lines are ``relative_path label [train|test]``; images may be
    .npy arrays (C, H, W) or anything PIL can open (resized to
    ``image_size``).  Without a split column every sample lands in both
    pools and split construction keeps train/test disjoint by exclusion.
    """
    base = Path(root) / name
    classes = tuple(line.strip() for line in
                    (base / "classes.txt").read_text().splitlines() if line.strip())
    images, labels, ids = [], [], []
    train_pool, test_pool = [], []
    for i, line in enumerate((base / "index.txt").read_text().splitlines()):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise ValueError(f"bad index line: {line!r}")
        rel, label = parts[0], int(parts[1])
        if not 0 <= label < len(classes):
            raise ValueError(f"label {label} out of range in line {line!r}")
        split = parts[2] if len(parts) == 3 else "both"
        path = base / rel
        if path.suffix == ".npy":
            arr = np.load(path).astype(np.float32)
        else:
            from PIL import Image

            with Image.open(path) as im:
                im = im.convert("RGB").resize((image_size, image_size))
                arr = np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0
        images.append(arr)
        labels.append(label)
        ids.append(rel)
        pos = len(images) - 1
        if split in ("train", "both"):
            train_pool.append(pos)
        if split in ("test", "both"):
            test_pool.append(pos)
    if not images:
        raise ValueError(f"dataset {name!r} has no samples")
    return LoadedDataset(
        name=name, class_names=classes,
        images=torch.from_numpy(np.stack(images)),
        labels=torch.tensor(labels, dtype=torch.long), sample_ids=tuple(ids),
        train_pool=np.array(train_pool, int), test_pool=np.array(test_pool, int))


def save_synthetic_dataset(dataset: SyntheticAttributeDataset,
                           root: str | Path) -> Path:
    """Write a synthetic dataset in the index-file layout plus its tree."""
    from .tree import serialize_tree

    base = Path(root) / dataset.config.dataset_name
    (base / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    train_set = set(dataset.train_idx.tolist())
    for i, sid in enumerate(dataset.sample_ids):
        rel = f"images/{i:05d}.npy"
        np.save(base / rel, dataset.images[i].numpy())
        split = "train" if i in train_set else "test"
        lines.append(f"{rel} {int(dataset.labels[i])} {split}")
    (base / "index.txt").write_text("\n".join(lines) + "\n")
    (base / "classes.txt").write_text("\n".join(dataset.class_names) + "\n")
    (base / "tree.json").write_bytes(serialize_tree(dataset.tree))
    (base / "dataset.json").write_text(json.dumps(
        {"name": dataset.config.dataset_name, "hash": dataset.hash(),
         "seed": dataset.config.seed,
         "attributes": list(dataset.config.attribute_names)}, indent=2) + "\n")
    return base


# --- protocol orchestration ------------------------------------------------------


@dataclass
class ProtocolConfig:
    task: str = "b2n"
    seeds: tuple[int, ...] = (0,)
    shots: int = 16
    epochs: int | None = None
    alpha: float = 0.4
    pooling_mode: str = "vcp"
    alignment_mode: str = "experts"
    des_org: str = "tree"            # "tree" | "unstructured"
    reg_enabled: bool = True
    mu1: float = 10.0
    mu2: float = 2.5
    mu3: float | None = None
    lr_group: str = "high-attr"
    attrs_fixed: int | None = None
    batch_size: int = 32
    use_gpa: bool = True
    vision_first: bool = True
    pretrain_steps: int = 1200
    pretrain_lr: float = 3e-3
    backend_id: str = "toy"
    backend_options: dict = field(default_factory=dict)

    def echo(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "task", "seeds", "shots", "epochs", "alpha", "pooling_mode",
            "alignment_mode", "des_org", "reg_enabled", "mu1", "mu2", "mu3",
            "lr_group", "attrs_fixed", "batch_size", "use_gpa", "vision_first",
            "pretrain_steps", "pretrain_lr", "backend_id")}
        d["seeds"] = list(self.seeds)
        return d

    def reg(self) -> RegCoefficients:
        mu3 = self.mu3 if self.mu3 is not None else LR_GROUPS[self.lr_group][2]
        return RegCoefficients(mu1=self.mu1, mu2=self.mu2, mu3=mu3,
                               enabled=self.reg_enabled)

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(
            total_epochs=self.epochs or TASK_EPOCHS[self.task],
            lr_group=self.lr_group, batch_size=self.batch_size,
            use_gpa=self.use_gpa, vision_first=self.vision_first)


def working_tree(tree: AttributeTree, config: ProtocolConfig) -> AttributeTree:
    """Apply the ablation transforms a run asks for."""
    if config.attrs_fixed is not None:
        tree = restrict_tree(tree, config.attrs_fixed)
    if config.des_org == "unstructured":
        tree = flatten_tree(tree)
    elif config.des_org != "tree":
        raise ValueError(f"unknown description organization {config.des_org!r}")
    return tree


def caption_pool(tree: AttributeTree, class_name: str) -> list[str]:
    """Pretraining captions for one class.

    Mixes name-bearing captions (plain prompts, template instantiations, the
    class's leaf descriptions) with nameless rewrites of every description
    ("a photo of something which ...").  Without the nameless half a handful
    of training classes lets the text tower fit by name lookup alone and
    attribute words never acquire meaning.
    """
    pool = [f"a photo of a {class_name}."]
    pool.extend(instantiate_global_context(tree, class_name))
    for attr in tree.attribute_names:
        for desc in tree.per_class[class_name][attr]:
            pool.append(desc)
            which = desc.find("which")
            if which >= 0:
                pool.append(f"a photo of something {desc[which:]}")
    return pool


def prepare_backend(dataset: LoadedDataset, tree: AttributeTree, splits: Splits,
                    config: ProtocolConfig, seed: int,
                    extra_trees: tuple[AttributeTree, ...] = (),
                    cache: dict | None = None):
    """Create and contrastively warm up a frozen backend for one seed.

    Pretraining sees only the split's training images and their classes'
    texts, so held-out classes stay zero-shot.  Passing ``cache`` lets
    ablation arms that share (dataset, seed, warmup config) reuse one frozen
    backbone instead of re-deriving the deterministic result.
    """
    if cache is not None:
        key = (id(dataset), id(tree), tuple(id(t) for t in extra_trees), seed,
               config.pretrain_steps, config.pretrain_lr, config.backend_id,
               repr(sorted(config.backend_options.items())),
               splits.train_idx.tobytes())
        if key in cache:
            return cache[key]
    options = dict(config.backend_options)
    enc_cfg = options.pop("config", {})
    if isinstance(enc_cfg, ToyEncoderConfig):
        enc_cfg = dict(enc_cfg.__dict__)
    enc_cfg = dict(enc_cfg)
    enc_cfg.setdefault("seed", seed)
    if config.backend_id == "toy":
        vocab = build_vocab(tree, *extra_trees)
        backend = create_backend("toy", vocab=vocab, config=enc_cfg, **options)
    else:
        backend = create_backend(config.backend_id, **options)
    if config.pretrain_steps > 0:
        # warm up on the dedicated pretrain pool where the dataset has one
        # (restricted to the split's training classes, so held-out classes
        # stay unseen); otherwise fall back to the split's own train images
        if dataset.pretrain_pool is not None and len(dataset.pretrain_pool):
            base_ids = {dataset.class_names.index(c) for c in splits.base_classes}
            warm_idx = np.array([i for i in dataset.pretrain_pool
                                 if int(dataset.labels[i]) in base_ids], int)
        else:
            warm_idx = splits.train_idx
        images = dataset.images[torch.from_numpy(warm_idx)]
        labels = _remap(dataset.labels[torch.from_numpy(warm_idx)],
                        dataset, splits.base_classes)
        provided = dataset.caption_pools or {}
        pools = [provided.get(c) or caption_pool(tree, c)
                 for c in splits.base_classes]
        groups = []
        if dataset.attribute_captions is not None and dataset.sample_values is not None:
            # attribute_captions preserves the dataset's attribute order,
            # matching the columns of the per-sample value matrix
            warm_values = dataset.sample_values[warm_idx]
            for ai, captions in enumerate(dataset.attribute_captions.values()):
                groups.append(ContrastGroup(
                    captions_per_value=captions,
                    value_per_image=warm_values[:, ai]))
        clip_style_pretrain(backend, images, labels, pools, PretrainConfig(
            steps=config.pretrain_steps, lr=config.pretrain_lr, seed=seed),
            attribute_groups=groups)
    backend.freeze()
    if cache is not None:
        cache[key] = backend
    return backend


def _remap(labels: torch.Tensor, dataset: LoadedDataset,
           subset: tuple[str, ...]) -> torch.Tensor:
    table = {dataset.class_names.index(c): i for i, c in enumerate(subset)}
    return torch.tensor([table[int(x)] for x in labels], dtype=torch.long)


def evaluate_split(backend, tree: AttributeTree, prompts: PromptState,
                   dataset: LoadedDataset, indices: np.ndarray,
                   class_subset: tuple[str, ...], alpha: float,
                   pooling_mode: str, alignment_mode: str,
                   with_per_attribute: bool = True) -> dict:
    """Accuracy of the fused prediction over one index set, with optional
    per-attribute diagnostic accuracies."""
    images = dataset.images[torch.from_numpy(indices)]
    labels = _remap(dataset.labels[torch.from_numpy(indices)], dataset, class_subset)
    bank = build_embedding_bank(backend, tree, prompts, class_subset)
    bundle, preds = predict(backend, images, prompts, bank, tree, alpha=alpha,
                            pooling_mode=pooling_mode,
                            alignment_mode=alignment_mode,
                            class_names=class_subset)
    out = {"accuracy": accuracy(preds, labels), "count": int(len(indices))}
    if with_per_attribute and alignment_mode == "experts":
        out["per_attribute_accuracy"] = {
            attr: accuracy(argmax_lowest_index(logits), labels)
            for attr, logits in bundle.per_attribute.items()}
    return out


@dataclass
class SeedArtifacts:
    """Trained state kept around so ablation evaluations can reuse it."""

    seed: int
    backend: object
    prompts: PromptState
    prompt_last: PromptState
    tree: AttributeTree
    splits: Splits
    history: list[dict]


def run_seed(dataset: LoadedDataset, tree: AttributeTree, config: ProtocolConfig,
             seed: int, backend=None,
             extra_trees: tuple[AttributeTree, ...] = (),
             backend_cache: dict | None = None) -> SeedArtifacts:
    """Train one seed of the protocol and return its artifacts."""
    splits = make_splits(dataset, config.task, shots=config.shots, seed=seed)
    wtree = working_tree(tree, config)
    if backend is None:
        backend = prepare_backend(dataset, tree, splits, config, seed,
                                  extra_trees=extra_trees, cache=backend_cache)
    train_images = dataset.images[torch.from_numpy(splits.train_idx)]
    train_labels = _remap(dataset.labels[torch.from_numpy(splits.train_idx)],
                          dataset, splits.base_classes)
    result = train(backend, wtree, train_images, train_labels,
                   splits.base_classes, config.schedule(), reg=config.reg(),
                   seed=seed, pooling_mode=config.pooling_mode,
                   alignment_mode=config.alignment_mode)
    prompts = result.prompt_gpa if config.use_gpa else result.prompt_last
    return SeedArtifacts(seed=seed, backend=backend, prompts=prompts,
                         prompt_last=result.prompt_last, tree=wtree,
                         splits=splits, history=result.history)


def _mean_std(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()),
            "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0}


def run_protocol(dataset: LoadedDataset, tree: AttributeTree,
                 config: ProtocolConfig,
                 targets: list[tuple[LoadedDataset, AttributeTree]] | None = None,
                 keep_artifacts: bool = False,
                 backend_cache: dict | None = None,
                 ) -> tuple[dict, list[SeedArtifacts]]:
    """Train+evaluate the named task over the configured seeds.

    Returns (metrics document, per-seed artifacts).  The document contains
    only reproducible fields: a config echo, per-seed metrics, and their
    mean/std -- no wall-clock anywhere.
    """
    if config.task not in TASKS:
        raise ValueError(f"unknown task {config.task!r}")
    targets = targets or []
    if config.task == "xd":
        if tuple(tree.attribute_names) != FIXED_XD_ATTRIBUTES:
            raise ValueError(
                "cross-dataset runs require the fixed attribute set "
                f"{list(FIXED_XD_ATTRIBUTES)}, got {list(tree.attribute_names)}")
        for _, ttree in targets:
            if tuple(ttree.attribute_names) != FIXED_XD_ATTRIBUTES:
                raise ValueError(
                    "attribute-set mismatch between checkpoint and target tree: "
                    f"{list(ttree.attribute_names)}")

    per_seed = []
    artifacts: list[SeedArtifacts] = []
    extra_trees = tuple(t for _, t in targets)
    for seed in config.seeds:
        art = run_seed(dataset, tree, config, seed, extra_trees=extra_trees,
                       backend_cache=backend_cache)
        entry: dict = {"seed": seed}
        if config.task == "b2n":
            base = evaluate_split(art.backend, art.tree, art.prompts, dataset,
                                  art.splits.base_test_idx, art.splits.base_classes,
                                  config.alpha, config.pooling_mode,
                                  config.alignment_mode)
            novel = evaluate_split(art.backend, art.tree, art.prompts, dataset,
                                   art.splits.novel_test_idx, art.splits.novel_classes,
                                   config.alpha, config.pooling_mode,
                                   config.alignment_mode)
            entry.update(base_acc=base["accuracy"], novel_acc=novel["accuracy"],
                         hm=harmonic_mean(base["accuracy"], novel["accuracy"]))
            if "per_attribute_accuracy" in base:
                entry["per_attribute_accuracy"] = base["per_attribute_accuracy"]
        elif config.task == "fewshot":
            res = evaluate_split(art.backend, art.tree, art.prompts, dataset,
                                 art.splits.base_test_idx, art.splits.base_classes,
                                 config.alpha, config.pooling_mode,
                                 config.alignment_mode)
            entry.update(accuracy=res["accuracy"])
            if "per_attribute_accuracy" in res:
                entry["per_attribute_accuracy"] = res["per_attribute_accuracy"]
        else:  # xd
            res = evaluate_split(art.backend, art.tree, art.prompts, dataset,
                                 art.splits.base_test_idx, art.splits.base_classes,
                                 config.alpha, config.pooling_mode,
                                 config.alignment_mode)
            entry["source_acc"] = res["accuracy"]
            target_accs = {}
            for tdata, ttree in targets:
                tsplits = make_splits(tdata, "fewshot", shots=0, seed=seed)
                teval = evaluate_split(
                    art.backend, ttree, art.prompts, tdata,
                    tsplits.base_test_idx, tsplits.base_classes, config.alpha,
                    config.pooling_mode, config.alignment_mode,
                    with_per_attribute=False)
                target_accs[tdata.name] = teval["accuracy"]
            entry["target_acc"] = target_accs
            if target_accs:
                entry["target_mean"] = float(np.mean(list(target_accs.values())))
        per_seed.append(entry)
        if keep_artifacts:
            artifacts.append(art)

    doc: dict = {"task": config.task, "dataset": dataset.name,
                 "config": config.echo(), "per_seed": per_seed}
    summary: dict = {}
    for key in ("base_acc", "novel_acc", "hm", "accuracy", "source_acc",
                "target_mean"):
        values = [e[key] for e in per_seed if key in e]
        if values:
            summary[key] = _mean_std(values)
    doc["summary"] = summary
    if config.task == "b2n" and "base_acc" in summary:
        doc["summary"]["hm_of_means"] = harmonic_mean(
            summary["base_acc"]["mean"], summary["novel_acc"]["mean"])
    return doc, artifacts
