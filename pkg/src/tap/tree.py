"""Tree-of-Attribute data model.

A tree holds, for one dataset, the "concept - attribute - description"
hierarchy: class names at the root, a shared attribute layer, and short
description strings as leaves.  A pseudo-attribute called "global context"
is stored as 7 class-name templates rather than expanded descriptions.

Trees are plain immutable values.  Validation never raises; it returns a
report so callers decide how to react.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field

GLOBAL_CONTEXT_NAME = "global context"
NUM_GLOBAL_TEMPLATES = 7

# the 7 standard zero-shot templates backing the global-context attribute
DEFAULT_GLOBAL_TEMPLATES: tuple[str, ...] = (
    "itap of a {class}.",
    "a bad photo of the {class}.",
    "a origami {class}.",
    "a photo of the large {class}.",
    "a {class} in a video game.",
    "art of the {class}.",
    "a photo of the small {class}.",
)
MIN_DESCRIPTIONS = 2
MAX_DESCRIPTIONS = 5

# rule identifiers used in validation reports
RULE_COVERAGE = "coverage"
RULE_MIN_2 = "min-2"
RULE_MAX_5 = "max-5"
RULE_GRAMMAR = "grammar"
RULE_EMPTY = "empty-string"
RULE_UNIQUE_ATTRIBUTES = "unique-attributes"
RULE_TEMPLATES_ARITY = "templates-arity"
RULE_TEMPLATE_PLACEHOLDER = "template-placeholder"
RULE_UNKNOWN_ATTRIBUTE = "unknown-attribute"
RULE_DUPLICATE_DESCRIPTION = "duplicate-description"

_WORD_RE = re.compile(r"[a-z0-9]+")


class TreeParseError(ValueError):
    """Raised when a serialized tree document is structurally malformed."""


@dataclass(frozen=True)
class AttributeTree:
    """One dataset's attribute tree.

    ``attribute_names`` excludes the global-context pseudo-attribute, which
    is carried by ``global_context_templates`` instead.
    """

    dataset_name: str
    attribute_names: tuple[str, ...]
    per_class: dict[str, dict[str, list[str]]]
    global_context_templates: tuple[str, ...]

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(self.per_class.keys())

    def descriptions(self, class_name: str, attribute: str) -> list[str]:
        """Leaf descriptions for (class, attribute); the global-context
        pseudo-attribute yields the instantiated templates."""
        if attribute == GLOBAL_CONTEXT_NAME:
            return instantiate_global_context(self, class_name)
        if class_name not in self.per_class:
            raise KeyError(f"unknown class: {class_name!r}")
        if attribute not in self.per_class[class_name]:
            raise KeyError(f"unknown attribute {attribute!r} for class {class_name!r}")
        return list(self.per_class[class_name][attribute])

    def attribute_ids(self) -> tuple[AttributeId, ...]:
        """All attributes in order, with the global-context one last."""
        ids = [
            AttributeId(index=i, name=name, is_global_context=False)
            for i, name in enumerate(self.attribute_names)
        ]
        ids.append(
            AttributeId(
                index=len(self.attribute_names),
                name=GLOBAL_CONTEXT_NAME,
                is_global_context=True,
            )
        )
        return tuple(ids)


@dataclass(frozen=True)
class AttributeId:
    index: int
    name: str
    is_global_context: bool


@dataclass(frozen=True)
class Violation:
    rule: str
    class_name: str | None
    attribute: str | None
    offending: str
    message: str = ""


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)
    warnings: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def messages(self) -> list[str]:
        out = []
        for v in self.violations:
            loc = "/".join(x for x in (v.class_name, v.attribute) if x)
            out.append(f"[{v.rule}] {loc}: {v.message or v.offending!r}")
        return out


def _canon_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def description_grammar_ok(class_name: str, description: str) -> bool:
    """Check the ``classname, which ...`` surface form.

    Matching is case-insensitive and punctuation-insensitive on the class
    name: the description's leading words must equal the class name's words,
    immediately followed by the word "which".
    """
    words = _canon_words(description)
    cls_words = _canon_words(class_name)
    if not cls_words or len(words) < len(cls_words) + 2:
        return False  # needs the class, "which", and at least one more word
    return words[: len(cls_words)] == cls_words and words[len(cls_words)] == "which"


def validate_tree(tree: AttributeTree) -> ValidationReport:
    """Check every tree invariant; never raises.

    Duplicate descriptions shared by several classes under one attribute are
    reported as warnings only: generators sometimes emit identical text for
    look-alike classes and that is not a structural defect.
    """
    report = ValidationReport()

    def bad(rule, class_name, attribute, offending, message=""):
        report.violations.append(Violation(rule, class_name, attribute, offending, message))

    if not tree.dataset_name:
        bad(RULE_EMPTY, None, None, "", "dataset name is empty")
    if len(set(tree.attribute_names)) != len(tree.attribute_names):
        bad(RULE_UNIQUE_ATTRIBUTES, None, None, ",".join(tree.attribute_names),
            "attribute names are not unique")
    for name in tree.attribute_names:
        if not name:
            bad(RULE_EMPTY, None, None, name, "empty attribute name")
    if GLOBAL_CONTEXT_NAME in tree.attribute_names:
        bad(RULE_UNIQUE_ATTRIBUTES, None, GLOBAL_CONTEXT_NAME, GLOBAL_CONTEXT_NAME,
            "the global-context name is reserved")

    if len(tree.global_context_templates) != NUM_GLOBAL_TEMPLATES:
        bad(RULE_TEMPLATES_ARITY, None, GLOBAL_CONTEXT_NAME,
            str(len(tree.global_context_templates)),
            f"expected {NUM_GLOBAL_TEMPLATES} templates")
    for tpl in tree.global_context_templates:
        if tpl.count("{class}") != 1:
            bad(RULE_TEMPLATE_PLACEHOLDER, None, GLOBAL_CONTEXT_NAME, tpl,
                "template must contain '{class}' exactly once")

    for class_name, attrs in tree.per_class.items():
        if not class_name:
            bad(RULE_EMPTY, class_name, None, class_name, "empty class name")
        for attr in tree.attribute_names:
            if attr not in attrs:
                bad(RULE_COVERAGE, class_name, attr, "",
                    "class has no entry for this attribute")
        for attr, descs in attrs.items():
            if attr not in tree.attribute_names:
                bad(RULE_UNKNOWN_ATTRIBUTE, class_name, attr, attr,
                    "attribute not declared in the attribute layer")
                continue
            if len(descs) < MIN_DESCRIPTIONS:
                bad(RULE_MIN_2, class_name, attr, str(len(descs)),
                    f"fewer than {MIN_DESCRIPTIONS} descriptions")
            if len(descs) > MAX_DESCRIPTIONS:
                bad(RULE_MAX_5, class_name, attr, str(len(descs)),
                    f"more than {MAX_DESCRIPTIONS} descriptions")
            for d in descs:
                if not d:
                    bad(RULE_EMPTY, class_name, attr, d, "empty description")
                elif not description_grammar_ok(class_name, d):
                    bad(RULE_GRAMMAR, class_name, attr, d,
                        "description does not start with 'classname, which'")

    # duplicated content across classes under the same attribute: warning
    # only; compared with the class-name prefix stripped, since the grammar
    # forces each class's own name onto otherwise identical text
    for attr in tree.attribute_names:
        seen: dict[tuple, str] = {}
        for class_name, attrs in tree.per_class.items():
            n_cls = len(_canon_words(class_name))
            for d in attrs.get(attr, []):
                key = tuple(_canon_words(d)[n_cls:])
                if not key:
                    continue
                if key in seen and seen[key] != class_name:
                    report.warnings.append(Violation(
                        RULE_DUPLICATE_DESCRIPTION, class_name, attr, d,
                        f"same content as a description of {seen[key]!r}"))
                else:
                    seen.setdefault(key, class_name)
    return report


def instantiate_global_context(tree: AttributeTree, class_name: str) -> list[str]:
    """Instantiate the 7 global-context templates for one class.

    Substitution is a single literal pass: a class name containing braces is
    inserted verbatim with no recursive expansion.
    """
    if class_name not in tree.per_class:
        raise KeyError(f"unknown class: {class_name!r}")
    return [tpl.replace("{class}", class_name) for tpl in tree.global_context_templates]


# --- serialization --------------------------------------------------------

_TOP_LEVEL_KEYS = {"dataset", "attributes", "global_context_templates", "classes"}


def serialize_tree(tree: AttributeTree) -> bytes:
    """Encode a tree as a human-diffable UTF-8 JSON document.

    Attribute order, class order, and description order are preserved.
    The caller is expected to pass a valid tree.
    """
    doc = {
        "dataset": tree.dataset_name,
        "attributes": list(tree.attribute_names),
        "global_context_templates": list(tree.global_context_templates),
        "classes": {c: {a: list(ds) for a, ds in attrs.items()}
                    for c, attrs in tree.per_class.items()},
    }
    return (json.dumps(doc, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def parse_tree(data: bytes) -> AttributeTree:
    """Parse a serialized tree document; strict about structure.

    Unknown top-level keys, missing fields, a wrong template count, an empty
    class map, and non-string leaves are all rejected.  Semantic rules
    (coverage, description counts, grammar) are validate_tree's job.
    """
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise TreeParseError(f"not a UTF-8 JSON document: {e}") from None
    if not isinstance(doc, dict):
        raise TreeParseError("top level must be an object")
    unknown = set(doc) - _TOP_LEVEL_KEYS
    if unknown:
        raise TreeParseError(f"unknown top-level keys: {sorted(unknown)}")
    missing = _TOP_LEVEL_KEYS - set(doc)
    if missing:
        raise TreeParseError(f"missing top-level keys: {sorted(missing)}")

    dataset = doc["dataset"]
    attributes = doc["attributes"]
    templates = doc["global_context_templates"]
    classes = doc["classes"]
    if not isinstance(dataset, str):
        raise TreeParseError("'dataset' must be a string")
    if not isinstance(attributes, list) or not all(isinstance(a, str) for a in attributes):
        raise TreeParseError("'attributes' must be a list of strings")
    if not isinstance(templates, list) or not all(isinstance(t, str) for t in templates):
        raise TreeParseError("'global_context_templates' must be a list of strings")
    if len(templates) != NUM_GLOBAL_TEMPLATES:
        raise TreeParseError(
            f"templates arity: expected {NUM_GLOBAL_TEMPLATES}, got {len(templates)}")
    if not isinstance(classes, dict):
        raise TreeParseError("'classes' must be an object")
    if not classes:
        raise TreeParseError("no classes")

    per_class: dict[str, dict[str, list[str]]] = {}
    for class_name, attrs in classes.items():
        if not isinstance(attrs, dict):
            raise TreeParseError(f"class {class_name!r} must map attributes to lists")
        entry: dict[str, list[str]] = {}
        for attr, descs in attrs.items():
            if attr not in attributes:
                raise TreeParseError(
                    f"class {class_name!r} uses undeclared attribute {attr!r}")
            if not isinstance(descs, list) or not all(isinstance(d, str) for d in descs):
                raise TreeParseError(
                    f"descriptions for ({class_name!r}, {attr!r}) must be a list of strings")
            entry[attr] = list(descs)
        per_class[class_name] = entry

    return AttributeTree(
        dataset_name=dataset,
        attribute_names=tuple(attributes),
        per_class=per_class,
        global_context_templates=tuple(templates),
    )


def tree_hash(tree: AttributeTree) -> str:
    """Stable content hash used to stamp embedding banks and checkpoints."""
    return hashlib.sha256(serialize_tree(tree)).hexdigest()


# --- ablation transforms --------------------------------------------------

UNSTRUCTURED_NAME = "unstructured"


def flatten_tree(tree: AttributeTree) -> AttributeTree:
    """Merge all attribute leaves into one flat description set per class.

    Used by the unstructured-description ablation; the result intentionally
    breaks the per-attribute description-count bounds and is an in-memory
    construct only, never written to disk.
    """
    per_class = {
        c: {UNSTRUCTURED_NAME: [d for a in tree.attribute_names for d in attrs[a]]}
        for c, attrs in tree.per_class.items()
    }
    return AttributeTree(
        dataset_name=tree.dataset_name,
        attribute_names=(UNSTRUCTURED_NAME,),
        per_class=per_class,
        global_context_templates=tree.global_context_templates,
    )


def restrict_tree(tree: AttributeTree, num_attributes: int) -> AttributeTree:
    """Keep only the first ``num_attributes`` attributes (fixed-size ablation)."""
    if not 1 <= num_attributes <= len(tree.attribute_names):
        raise ValueError(
            f"num_attributes must be in [1, {len(tree.attribute_names)}], "
            f"got {num_attributes}")
    kept = tree.attribute_names[:num_attributes]
    per_class = {c: {a: list(attrs[a]) for a in kept if a in attrs}
                 for c, attrs in tree.per_class.items()}
    return AttributeTree(
        dataset_name=tree.dataset_name,
        attribute_names=kept,
        per_class=per_class,
        global_context_templates=tree.global_context_templates,
    )
