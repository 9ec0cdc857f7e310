"""Single command-line entry point: generation, training, evaluation, and
attention export.

Every command resolves its options as CLI flag > --config file > default,
then writes the resolved set back out as a config echo so any run can be
replayed exactly.  Exit codes: 0 ok, 2 bad arguments, 3 io/backend, 4
numeric failure; failures also emit one machine-readable JSON record on
stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import backends as bk
from . import data as dt
from . import generation as gen
from . import inference as inf
from . import training as tr
from .tree import (TreeParseError, parse_tree, serialize_tree, tree_hash,
                   validate_tree)


class UsageError(ValueError):
    pass


# --- option plumbing ---------------------------------------------------------


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """CLI flag > config file > default."""
    file_cfg = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        file_cfg = json.loads(path.read_text())
    out = {}
    for key, default in defaults.items():
        value = getattr(args, key, None)
        if value is None:
            value = file_cfg.get(key, default)
        out[key] = value
    return out


def _echo_config(output: Path, command: str, resolved: dict) -> None:
    output.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, **resolved}
    (output / "run_config.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require(resolved: dict, *keys: str) -> None:
    missing = [k for k in keys if resolved.get(k) in (None, "")]
    if missing:
        raise UsageError(f"missing required options: {', '.join(missing)}")


def _load_tree(path: str):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"tree file not found: {p}")
    return parse_tree(p.read_bytes())


def _load_image(path: str, image_size: int) -> torch.Tensor:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"image not found: {p}")
    if p.suffix == ".npy":
        arr = np.load(p).astype(np.float32)
    else:
        from PIL import Image

        with Image.open(p) as im:
            im = im.convert("RGB").resize((image_size, image_size))
            arr = np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0
    return torch.from_numpy(arr)


# --- gen-toa -------------------------------------------------------------------

GEN_DEFAULTS = dict(dataset=None, classes=None, backend="fixture", fixture=None,
                    dataset_description="", seed=0, temperature=0.0,
                    max_retries=1, concurrency=1, output="runs/gen-toa")


def _resolve_llm_backend(backend_id: str, fixture: str | None,
                         temperature: float):
    if fixture:
        fdir = Path(fixture)
        if not fdir.is_dir():
            raise UsageError(f"fixture directory not found: {fdir}")
        return gen.FixtureBackend(fdir, backend_id=backend_id)
    if backend_id.startswith("openai:"):
        inner = gen.OpenAiChatBackend(model=backend_id.split(":", 1)[1],
                                      temperature=temperature)
        cache = gen.default_cache_dir()
        if cache is not None:
            return gen.CachingBackend(cache, inner, backend_id=inner.backend_id)
        return inner
    raise gen.BackendUnavailable(
        f"backend {backend_id!r} is not reachable and no --fixture directory "
        "was given")


def cmd_gen_toa(args: argparse.Namespace) -> int:
    cfg = _resolve(args, GEN_DEFAULTS)
    _require(cfg, "dataset", "classes")
    classes_path = Path(cfg["classes"])
    if not classes_path.exists():
        raise UsageError(f"classes file not found: {classes_path}")
    class_names = [ln.strip() for ln in classes_path.read_text().splitlines()
                   if ln.strip()]
    desc = cfg["dataset_description"]
    if desc.startswith("@"):
        desc = Path(desc[1:]).read_text().strip()

    backend = _resolve_llm_backend(cfg["backend"], cfg["fixture"],
                                   cfg["temperature"])
    job = gen.GenerationJob(
        dataset_name=cfg["dataset"], dataset_description=desc,
        class_names=class_names, llm_backend_id=cfg["backend"],
        seed=cfg["seed"], temperature=cfg["temperature"],
        max_retries=cfg["max_retries"], concurrency=cfg["concurrency"])
    result = gen.run_generation(job, backend)

    output = Path(cfg["output"])
    output.mkdir(parents=True, exist_ok=True)
    (output / "tree.json").write_bytes(serialize_tree(result.tree))
    (output / "transcript.json").write_text(result.transcript.to_json())
    _echo_config(output, "gen-toa", cfg)
    report = validate_tree(result.tree)
    print(f"wrote {output / 'tree.json'} "
          f"({len(result.tree.class_names)} classes, "
          f"{len(result.attributes)} attributes, "
          f"{len(report.violations)} violations)")
    return 0 if report.ok else 3


# --- train ----------------------------------------------------------------------

TRAIN_DEFAULTS = dict(
    task="b2n", dataset=None, data_root="data", toa=None, backend="toy",
    seed=0, alpha=0.4, pooling="vcp", alignment="experts", des_org="tree",
    attrs_fixed=None, reg_enabled=True, mu1=10.0, mu2=2.5, mu3=None,
    lr_group="high-attr", epochs=None, shots=16, batch_size=32,
    pretrain_steps=1200, pretrain_lr=3e-3, use_gpa=True,
    output="runs/train")


def _protocol_config(cfg: dict, seeds: tuple[int, ...]) -> dt.ProtocolConfig:
    return dt.ProtocolConfig(
        task=cfg["task"], seeds=seeds, shots=cfg["shots"], epochs=cfg["epochs"],
        alpha=cfg["alpha"], pooling_mode=cfg["pooling"],
        alignment_mode=cfg["alignment"], des_org=cfg["des_org"],
        reg_enabled=cfg["reg_enabled"], mu1=cfg["mu1"], mu2=cfg["mu2"],
        mu3=cfg["mu3"], lr_group=cfg["lr_group"], attrs_fixed=cfg["attrs_fixed"],
        batch_size=cfg["batch_size"], use_gpa=cfg["use_gpa"],
        pretrain_steps=cfg["pretrain_steps"], pretrain_lr=cfg["pretrain_lr"],
        backend_id=cfg["backend"])


def _validate_run_flags(cfg: dict, tree) -> None:
    if cfg["task"] not in dt.TASKS:
        raise UsageError(f"unknown task {cfg['task']!r}")
    if cfg["pooling"] not in ("vcp", "average", "attn_max"):
        raise UsageError(f"unknown pooling mode {cfg['pooling']!r}")
    if cfg["alignment"] not in ("experts", "cls_only"):
        raise UsageError(f"unknown alignment mode {cfg['alignment']!r}")
    if not 0.0 <= cfg["alpha"] <= 1.0:
        raise UsageError("alpha must be in [0, 1]")
    if cfg["attrs_fixed"] is not None and not (
            1 <= cfg["attrs_fixed"] <= len(tree.attribute_names)):
        raise UsageError(
            f"attrs_fixed must be in [1, {len(tree.attribute_names)}]")


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve(args, TRAIN_DEFAULTS)
    _require(cfg, "dataset", "toa")
    tree = _load_tree(cfg["toa"])
    report = validate_tree(tree)
    if not report.ok:
        raise TreeParseError("tree fails validation: "
                             + "; ".join(report.messages()))
    _validate_run_flags(cfg, tree)

    dataset = dt.load_index_dataset(cfg["data_root"], cfg["dataset"])
    config = _protocol_config(cfg, seeds=(cfg["seed"],))
    art = dt.run_seed(dataset, tree, config, cfg["seed"])

    output = Path(cfg["output"])
    output.mkdir(parents=True, exist_ok=True)
    manifest = {
        "task": cfg["task"], "dataset": cfg["dataset"], "seed": cfg["seed"],
        "shots": cfg["shots"], "alpha": cfg["alpha"], "pooling": cfg["pooling"],
        "alignment": cfg["alignment"], "des_org": cfg["des_org"],
        "attrs_fixed": cfg["attrs_fixed"], "lr_group": cfg["lr_group"],
        "reg_enabled": cfg["reg_enabled"],
        "epochs": config.schedule().total_epochs,
        "tree_hash": tree_hash(art.tree),
        "use_gpa": cfg["use_gpa"],
    }
    bk.save_checkpoint(output / "checkpoint", art.backend, art.prompt_last,
                       art.prompts, manifest)
    (output / "checkpoint" / "tree.json").write_bytes(serialize_tree(art.tree))
    with (output / "loss_log.jsonl").open("w") as fh:
        for record in art.history:
            fh.write(json.dumps(record) + "\n")
    dt.write_split_file(output / "split.txt", dataset, art.splits)
    _echo_config(output, "train", cfg)
    print(f"checkpoint written to {output / 'checkpoint'} "
          f"({len(art.history)} steps)")
    return 0


# --- eval -----------------------------------------------------------------------

EVAL_DEFAULTS = dict(checkpoint=None, dataset=None, data_root="data",
                     alpha=None, pooling=None, alignment=None, shots=None,
                     seed=None, per_attribute_metrics=None,
                     output="runs/eval")


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _resolve(args, EVAL_DEFAULTS)
    _require(cfg, "checkpoint")
    ckpt_dir = Path(cfg["checkpoint"])
    if not ckpt_dir.is_dir():
        raise UsageError(f"checkpoint directory not found: {ckpt_dir}")
    backend, prompt_last, prompt_gpa, manifest = bk.load_checkpoint(ckpt_dir)
    tree = parse_tree((ckpt_dir / "tree.json").read_bytes())

    alpha = cfg["alpha"] if cfg["alpha"] is not None else manifest["alpha"]
    pooling = cfg["pooling"] or manifest["pooling"]
    alignment = cfg["alignment"] or manifest["alignment"]
    shots = cfg["shots"] if cfg["shots"] is not None else manifest["shots"]
    seed = cfg["seed"] if cfg["seed"] is not None else manifest["seed"]
    dataset_name = cfg["dataset"] or manifest["dataset"]
    if alignment == "cls_only" and cfg["per_attribute_metrics"]:
        raise UsageError("per-attribute diagnostics require alignment=experts")
    if not 0.0 <= alpha <= 1.0:
        raise UsageError("alpha must be in [0, 1]")

    dataset = dt.load_index_dataset(cfg["data_root"], dataset_name)
    splits = dt.make_splits(dataset, manifest["task"], shots=shots, seed=seed)
    prompts = prompt_gpa if (manifest.get("use_gpa", True) and prompt_gpa) \
        else prompt_last

    with_diag = alignment == "experts"
    doc = {"task": manifest["task"], "dataset": dataset_name, "seed": seed,
           "alpha": alpha, "pooling": pooling, "alignment": alignment,
           "shots": shots, "tree_hash": manifest["tree_hash"]}
    if manifest["task"] == "b2n":
        base = dt.evaluate_split(backend, tree, prompts, dataset,
                                 splits.base_test_idx, splits.base_classes,
                                 alpha, pooling, alignment, with_diag)
        novel = dt.evaluate_split(backend, tree, prompts, dataset,
                                  splits.novel_test_idx, splits.novel_classes,
                                  alpha, pooling, alignment, with_diag)
        doc["metrics"] = {
            "base_acc": base["accuracy"], "novel_acc": novel["accuracy"],
            "hm": inf.harmonic_mean(base["accuracy"], novel["accuracy"])}
        if "per_attribute_accuracy" in base:
            doc["per_attribute_accuracy"] = base["per_attribute_accuracy"]
    else:
        res = dt.evaluate_split(backend, tree, prompts, dataset,
                                splits.base_test_idx, splits.base_classes,
                                alpha, pooling, alignment, with_diag)
        doc["metrics"] = {"accuracy": res["accuracy"]}
        if "per_attribute_accuracy" in res:
            doc["per_attribute_accuracy"] = res["per_attribute_accuracy"]

    output = Path(cfg["output"])
    output.mkdir(parents=True, exist_ok=True)
    (output / "metrics.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _echo_config(output, "eval", {**cfg, "alpha": alpha, "pooling": pooling,
                                  "alignment": alignment, "seed": seed,
                                  "shots": shots, "dataset": dataset_name})
    print(json.dumps(doc["metrics"], indent=2))
    return 0


# --- export-attn ------------------------------------------------------------------

EXPORT_DEFAULTS = dict(checkpoint=None, image=None, class_name=None,
                       output="runs/export-attn")


def cmd_export_attn(args: argparse.Namespace) -> int:
    cfg = _resolve(args, EXPORT_DEFAULTS)
    _require(cfg, "checkpoint", "image", "class_name")
    ckpt_dir = Path(cfg["checkpoint"])
    if not ckpt_dir.is_dir():
        raise UsageError(f"checkpoint directory not found: {ckpt_dir}")
    backend, prompt_last, prompt_gpa, manifest = bk.load_checkpoint(ckpt_dir)
    tree = parse_tree((ckpt_dir / "tree.json").read_bytes())
    if cfg["class_name"] not in tree.class_names:
        raise UsageError(f"unknown class {cfg['class_name']!r}")
    if manifest.get("alignment") == "cls_only":
        alignment = "cls_only"
    else:
        alignment = "experts"

    prompts = prompt_gpa if (manifest.get("use_gpa", True) and prompt_gpa) \
        else prompt_last
    image = _load_image(cfg["image"], backend.config.image_size
                        if hasattr(backend, "config") else 32)
    bank = bk.build_embedding_bank(backend, tree, prompts,
                                   (cfg["class_name"],))
    weights = inf.export_attention(backend, image, prompts, bank,
                                   cfg["class_name"], tree.attribute_names,
                                   alignment_mode=alignment)
    doc = {"class": cfg["class_name"], "image": str(cfg["image"]),
           "attention": {attr: [{"description": d, "weight": w}
                                for d, w in pairs]
                         for attr, pairs in weights.items()}}
    output = Path(cfg["output"])
    output.mkdir(parents=True, exist_ok=True)
    (output / "attention.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _echo_config(output, "export-attn", cfg)
    print(json.dumps(doc["attention"], indent=2))
    return 0


# --- synth-data ---------------------------------------------------------------------

SYNTH_DEFAULTS = dict(preset="bands8", seed=0, output="data",
                      train_per_class=16, test_per_class=8)


def cmd_synth_data(args: argparse.Namespace) -> int:
    cfg = _resolve(args, SYNTH_DEFAULTS)
    if cfg["preset"] == "bands8":
        sc = dt.SyntheticConfig(seed=cfg["seed"],
                                train_per_class=cfg["train_per_class"],
                                test_per_class=cfg["test_per_class"])
    elif cfg["preset"] == "food":
        sc = dt.food_synthetic_config(seed=cfg["seed"],
                                      train_per_class=cfg["train_per_class"],
                                      test_per_class=cfg["test_per_class"])
    elif cfg["preset"] == "xd":
        sc = dt.SyntheticConfig(
            seed=cfg["seed"], attribute_names=dt.FIXED_XD_ATTRIBUTES,
            dataset_name=f"synthetic-xd-{cfg['seed']}",
            train_per_class=cfg["train_per_class"],
            test_per_class=cfg["test_per_class"])
    else:
        raise UsageError(f"unknown preset {cfg['preset']!r}")
    dataset = dt.generate_synthetic(sc)
    path = dt.save_synthetic_dataset(dataset, cfg["output"])
    _echo_config(path, "synth-data", cfg)
    print(f"wrote {path} (hash {dataset.hash()[:12]})")
    return 0


# --- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tap",
        description="Tree-of-attribute prompt learning toolkit")
    sub = parser.add_subparsers(dest="cmd", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--output")

    p = sub.add_parser("gen-toa", help="distill an attribute tree from an LLM")
    add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--classes", help="file with one class name per line")
    p.add_argument("--backend")
    p.add_argument("--fixture", help="replay-only transcript directory")
    p.add_argument("--dataset-description", dest="dataset_description")
    p.add_argument("--seed", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-retries", dest="max_retries", type=int)
    p.add_argument("--concurrency", type=int)
    p.set_defaults(func=cmd_gen_toa)

    p = sub.add_parser("train", help="prompt-tune on one dataset")
    add_common(p)
    p.add_argument("--task", choices=["b2n", "xd", "fewshot"])
    p.add_argument("--dataset")
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("--toa", help="attribute tree file")
    p.add_argument("--backend")
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--pooling", choices=["vcp", "average", "attn_max"])
    p.add_argument("--alignment", choices=["experts", "cls_only"])
    p.add_argument("--des-org", dest="des_org", choices=["tree", "unstructured"])
    p.add_argument("--attrs-fixed", dest="attrs_fixed", type=int)
    p.add_argument("--no-reg", dest="reg_enabled", action="store_const",
                   const=False)
    p.add_argument("--mu1", type=float)
    p.add_argument("--mu2", type=float)
    p.add_argument("--mu3", type=float)
    p.add_argument("--lr-group", dest="lr_group",
                   choices=["low-attr", "high-attr"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--shots", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--pretrain-steps", dest="pretrain_steps", type=int)
    p.add_argument("--no-gpa", dest="use_gpa", action="store_const", const=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("--alpha", type=float)
    p.add_argument("--pooling", choices=["vcp", "average", "attn_max"])
    p.add_argument("--alignment", choices=["experts", "cls_only"])
    p.add_argument("--shots", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--per-attribute-metrics", dest="per_attribute_metrics",
                   action="store_const", const=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-attn",
                       help="dump per-description pooling weights")
    add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.add_argument("--class", dest="class_name")
    p.set_defaults(func=cmd_export_attn)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    add_common(p)
    p.add_argument("--preset", choices=["bands8", "food", "xd"])
    p.add_argument("--seed", type=int)
    p.add_argument("--train-per-class", dest="train_per_class", type=int)
    p.add_argument("--test-per-class", dest="test_per_class", type=int)
    p.set_defaults(func=cmd_synth_data)

    return parser


def _error_record(code: int, kind: str, exc: Exception) -> int:
    sys.stderr.write(json.dumps(
        {"error": kind, "exit_code": code, "message": str(exc)}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        return _error_record(2, "bad-args", e)
    except gen.BackendUnavailable as e:
        return _error_record(3, "backend", e)
    except gen.GenerationError as e:
        return _error_record(3, e.kind, e)
    except tr.TrainingDiverged as e:
        return _error_record(4, "numeric", e)
    except TreeParseError as e:
        return _error_record(3, "tree", e)
    except (OSError, KeyError) as e:
        return _error_record(3, "io", e)
    except ValueError as e:
        return _error_record(2, "bad-args", e)


if __name__ == "__main__":
    sys.exit(main())
