"""Three-step attribute-tree distillation from a chat LLM.

Step 1 asks for the dataset's visual attributes, step 2 elicits a fully
worked example for one randomly chosen class (in the same chat session), and
step 3 queries every remaining class independently with the step-1/2
exchange embedded as an in-context example.

Everything is replayable: requests are keyed by a hash of (backend id,
message list) and served from a disk cache, and a cache directory with no
live backend behind it doubles as a fixture store for tests and CI.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .tree import (AttributeTree, description_grammar_ok, validate_tree,
                   DEFAULT_GLOBAL_TEMPLATES, MAX_DESCRIPTIONS, MIN_DESCRIPTIONS)

MAX_ATTRIBUTES = 9  # the step-1 prompt asks for fewer than 10

CACHE_ENV_VAR = "TAP_CACHE_DIR"

# --- prompt templates -------------------------------------------------------

STEP1_PROMPT = """\
{dataset_description}

Visual attributes refer to observable, describable features of the images \
that can include color, shape, size, texture, and any specific patterns or \
markings, which can help differentiate between classes for the dataset. They \
should be consistently observable across multiple images of the same class. \
Your task is to generate a list of visual attributes (less than 10) for the \
{dataset_name} dataset. Ensure this list is clear, concise, and specific to \
the dataset's needs. Avoid generic attributes that do not contribute to \
distinguishing between classes."""

RULES_BLOCK = """\
You must follow the following rules:

1. For each visual attribute, describe all possible variations as separate \
sentences. This approach allows for a detailed and clear presentation of \
each attribute's range.

2. Provide a maximum of five descriptions for each visual attribute to \
maintain focus and relevance. Also, aim to provide at least two descriptions \
to ensure a comprehensive overview of the attribute.

3. The descriptions should provide clear, distinguishable features of each \
class to support image classification tasks.

4. Descriptions for each attribute are independent from each other, and they \
should not serve as context for each other.

5. Each description describes an image independetly. If certain description \
is possible for a class, please just list that description, and do not use \
words like "may have" or "sometimes have".

6. Reply descriptions only. Do not include any explanation before and after \
the description.

7. The descriptions should follow the format of "classname, which ...", \
where "..." is the description of the visual attribute."""

STEP2_PROMPT = """\
Describe describe what a "{seed_class}" class in the {dataset_name} dataset \
look like using the generated visual attributes.

""" + RULES_BLOCK

STEP3_PROMPT = """\
{dataset_description}

Your task is to write detailed descriptions for various classes within the \
{dataset_name} dataset, using the provided visual attributes such as color \
and shape. These descriptions will help in accurately classifying and \
understanding the unique features of each class.

""" + RULES_BLOCK + """

Q: Describe what a "{seed_class}" in the {dataset_name} look like using the \
following visual attributes: {attributes}

A: {seed_answer}

Q: Describe what a "{target_class}" in the {dataset_name} look like using \
the following visual attributes: {attributes}

A:"""


def step1_prompt(dataset_name: str, dataset_description: str) -> str:
    return STEP1_PROMPT.format(dataset_name=dataset_name,
                               dataset_description=dataset_description)


def step2_prompt(dataset_name: str, seed_class: str) -> str:
    return STEP2_PROMPT.format(dataset_name=dataset_name, seed_class=seed_class)


def step3_prompt(dataset_name: str, dataset_description: str, seed_class: str,
                 seed_answer: str, target_class: str,
                 attributes: list[str]) -> str:
    return STEP3_PROMPT.format(
        dataset_name=dataset_name, dataset_description=dataset_description,
        seed_class=seed_class, seed_answer=seed_answer,
        target_class=target_class, attributes=", ".join(attributes))


# --- errors ------------------------------------------------------------------


class GenerationError(RuntimeError):
    def __init__(self, kind: str, message: str):
        super().__init__(f"[{kind}] {message}")
        self.kind = kind


class BackendUnavailable(GenerationError):
    def __init__(self, message: str):
        super().__init__("backend", message)


# --- chat backends -----------------------------------------------------------


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str


def request_key(backend_id: str, messages: list[ChatMessage]) -> str:
    payload = json.dumps(
        [backend_id] + [[m.role, m.content] for m in messages],
        ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class CallableBackend:
    """Wrap a plain function (messages -> text); handy for scripted tests."""

    def __init__(self, fn, backend_id: str = "scripted-llm"):
        self._fn = fn
        self.backend_id = backend_id

    def send(self, messages: list[ChatMessage]) -> str:
        return self._fn(messages)


class CachingBackend:
    """Disk cache in front of another backend.

    Entries are one JSON file per request, written atomically
    (temp-then-rename), keyed by the request hash.  With ``inner=None`` the
    cache is the only source and a miss is a backend failure -- that is
    fixture mode.
    """

    def __init__(self, cache_dir: str | Path, inner=None,
                 backend_id: str | None = None):
        self.cache_dir = Path(cache_dir)
        self.inner = inner
        if backend_id is None:
            backend_id = inner.backend_id if inner is not None else "fixture"
        self.backend_id = backend_id
        self.cache_dir.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.cache_dir / f"{key}.json"

    def send(self, messages: list[ChatMessage]) -> str:
        key = request_key(self.backend_id, messages)
        path = self._path(key)
        if path.exists():
            return json.loads(path.read_text())["response"]
        if self.inner is None:
            raise BackendUnavailable(
                f"no cached response for request {key[:12]}... and no live "
                "backend configured")
        response = self.inner.send(messages)
        record = {"backend_id": self.backend_id,
                  "messages": [[m.role, m.content] for m in messages],
                  "response": response}
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(record, ensure_ascii=False, indent=2) + "\n")
        os.replace(tmp, path)
        return response


class FixtureBackend(CachingBackend):
    """Replay-only backend over a committed transcript directory."""

    def __init__(self, fixture_dir: str | Path, backend_id: str = "fixture"):
        super().__init__(fixture_dir, inner=None, backend_id=backend_id)


class OpenAiChatBackend:
    """Minimal OpenAI-compatible chat client (live generation is opt-in)."""

    def __init__(self, model: str, base_url: str | None = None,
                 api_key: str | None = None, temperature: float = 0.0,
                 timeout: float = 60.0, transport=None):
        import httpx

        self.model = model
        self.temperature = temperature
        self.backend_id = f"openai:{model}"
        base_url = base_url or os.environ.get("TAP_OPENAI_BASE_URL",
                                              "https://api.openai.com/v1")
        api_key = api_key or os.environ.get("OPENAI_API_KEY", "")
        self._client = httpx.Client(
            base_url=base_url, timeout=timeout, transport=transport,
            headers={"Authorization": f"Bearer {api_key}"} if api_key else {})

    def send(self, messages: list[ChatMessage]) -> str:
        try:
            resp = self._client.post("/chat/completions", json={
                "model": self.model,
                "temperature": self.temperature,
                "messages": [{"role": m.role, "content": m.content}
                             for m in messages],
            })
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except Exception as e:  # network/protocol problems are backend errors
            raise BackendUnavailable(str(e)) from e


def default_cache_dir() -> Path | None:
    value = os.environ.get(CACHE_ENV_VAR)
    return Path(value) if value else None


# --- transcripts ---------------------------------------------------------------


@dataclass(frozen=True)
class TranscriptRecord:
    step: int
    prompt: str
    response: str
    timestamp: int  # monotonic event counter, deterministic under replay
    backend_id: str


class LlmTranscript:
    """Append-only record of every exchange; step-3 records may only follow
    the step-1/2 session."""

    def __init__(self):
        self._records: list[TranscriptRecord] = []
        self._lock = threading.Lock()

    def append(self, step: int, prompt: str, response: str, backend_id: str) -> None:
        with self._lock:
            if step == 3 and not any(r.step == 2 for r in self._records):
                raise ValueError("step-3 records must follow steps 1 and 2")
            if step in (1, 2) and any(r.step == 3 for r in self._records):
                raise ValueError("steps 1 and 2 must precede any step-3 record")
            self._records.append(TranscriptRecord(
                step=step, prompt=prompt, response=response,
                timestamp=len(self._records), backend_id=backend_id))

    @property
    def records(self) -> tuple[TranscriptRecord, ...]:
        return tuple(self._records)

    def to_json(self) -> str:
        return json.dumps([r.__dict__ for r in self._records],
                          ensure_ascii=False, indent=2) + "\n"


# --- response parsing ------------------------------------------------------------

_LIST_MARKER_RE = re.compile(r"^\s*(?:[-*•]+|\d+[.)])\s*")


def _strip_marker(line: str) -> str:
    return _LIST_MARKER_RE.sub("", line).strip().strip("*_`").strip()


def parse_attribute_list(text: str) -> list[str]:
    """One attribute per line, list markers tolerated; enforces the
    fewer-than-10, non-empty, unique contract."""
    names = []
    for raw in text.splitlines():
        name = _strip_marker(raw)
        if name:
            names.append(name.rstrip(":").strip())
    if not names:
        raise GenerationError("unparsable", "no attribute names in response")
    if len(names) != len(set(n.lower() for n in names)):
        raise GenerationError("attribute-count", "duplicate attribute names")
    if len(names) > MAX_ATTRIBUTES:
        raise GenerationError(
            "attribute-count",
            f"{len(names)} attributes exceed the fewer-than-10 contract")
    return names


def parse_description_block(text: str, attributes: list[str],
                            class_name: str) -> dict[str, list[str]]:
    """Parse a per-class response into attribute -> description lists.

    Expected shape: an attribute-name header line (with or without a list
    marker / trailing colon) followed by one description per line.
    """
    lower_map = {a.lower(): a for a in attributes}
    current: str | None = None
    out: dict[str, list[str]] = {a: [] for a in attributes}
    for raw in text.splitlines():
        line = _strip_marker(raw)
        if not line:
            continue
        head = line.rstrip(":").strip().lower()
        if head in lower_map:
            current = lower_map[head]
            continue
        if current is not None:
            out[current].append(line)
    missing = [a for a in attributes if not out[a]]
    if missing:
        raise GenerationError(
            "attribute-coverage",
            f"response for {class_name!r} covers no descriptions for: {missing}")
    return out


def description_violations(class_name: str,
                           by_attr: dict[str, list[str]]) -> list[str]:
    """Count and grammar problems phrased for a retry prompt."""
    problems = []
    for attr, descs in by_attr.items():
        if len(descs) < MIN_DESCRIPTIONS:
            problems.append(f"{attr}: provide at least {MIN_DESCRIPTIONS} "
                            "descriptions")
        if len(descs) > MAX_DESCRIPTIONS:
            problems.append(f"{attr}: provide at most {MAX_DESCRIPTIONS} "
                            "descriptions")
        for d in descs:
            if not description_grammar_ok(class_name, d):
                problems.append(
                    f'{attr}: "{d}" must follow the format '
                    f'"{class_name}, which ..."')
    return problems


# --- the generation job -----------------------------------------------------------


@dataclass
class GenerationJob:
    dataset_name: str
    dataset_description: str
    class_names: list[str]
    llm_backend_id: str = "fixture"
    seed: int = 0
    seed_class: str | None = None
    temperature: float = 0.0
    max_retries: int = 1   # re-prompts per query after the first failure
    concurrency: int = 1

    def __post_init__(self):
        if not self.class_names:
            raise ValueError("class_names must be non-empty")
        if self.seed_class is None:
            import random

            self.seed_class = random.Random(self.seed).choice(self.class_names)
        if self.seed_class not in self.class_names:
            raise ValueError(f"seed class {self.seed_class!r} not in class list")


@dataclass
class GenerationResult:
    tree: AttributeTree
    transcript: LlmTranscript
    attributes: list[str]
    exemplar: dict[str, list[str]]
    session: list[ChatMessage] = field(default_factory=list)


def _ask_with_retries(backend, messages: list[ChatMessage], job: GenerationJob,
                      transcript: LlmTranscript, step: int, class_name: str,
                      attributes: list[str], records_out: list | None = None):
    """Send, parse, validate; on violation append the validator messages and
    re-prompt up to ``job.max_retries`` times."""
    convo = list(messages)
    last_problems: list[str] = []
    for attempt in range(job.max_retries + 1):
        response = backend.send(convo)
        record = (step, convo[-1].content, response, backend.backend_id)
        if records_out is None:
            transcript.append(*record)
        else:
            records_out.append(record)
        try:
            by_attr = parse_description_block(response, attributes, class_name)
            problems = description_violations(class_name, by_attr)
        except GenerationError as e:
            problems = [str(e)]
        if not problems:
            return by_attr, response
        last_problems = problems
        feedback = ("Your previous reply violated these rules:\n"
                    + "\n".join(f"- {p}" for p in problems)
                    + "\nPlease answer again and follow every rule.")
        convo = convo + [ChatMessage("assistant", response),
                         ChatMessage("user", feedback)]
    raise GenerationError(
        "grammar", f"class {class_name!r} still violates the description "
                   f"rules after {job.max_retries} re-prompt(s): {last_problems}")


def generate_attributes(job: GenerationJob, backend,
                        transcript: LlmTranscript) -> tuple[list[str], list[ChatMessage]]:
    """Step 1: ask for the dataset's attribute list."""
    prompt = step1_prompt(job.dataset_name, job.dataset_description)
    messages = [ChatMessage("user", prompt)]
    response = backend.send(messages)
    transcript.append(1, prompt, response, backend.backend_id)
    attributes = parse_attribute_list(response)
    session = messages + [ChatMessage("assistant", response)]
    return attributes, session


def generate_example(job: GenerationJob, backend, attributes: list[str],
                     session: list[ChatMessage],
                     transcript: LlmTranscript) -> tuple[dict[str, list[str]], str]:
    """Step 2: a full description set for the sampled seed class, asked in
    the same session as step 1."""
    prompt = step2_prompt(job.dataset_name, job.seed_class)
    messages = session + [ChatMessage("user", prompt)]
    by_attr, response = _ask_with_retries(
        backend, messages, job, transcript, step=2, class_name=job.seed_class,
        attributes=attributes)
    return by_attr, response


def generate_all_classes(job: GenerationJob, backend, attributes: list[str],
                         exemplar_answer: str,
                         exemplar: dict[str, list[str]],
                         transcript: LlmTranscript,
                         templates: tuple[str, ...] = DEFAULT_GLOBAL_TEMPLATES,
                         ) -> AttributeTree:
    """Step 3: one independent query per remaining class; failures are
    collected and reported together."""
    remaining = [c for c in job.class_names if c != job.seed_class]

    def query(class_name: str):
        prompt = step3_prompt(job.dataset_name, job.dataset_description,
                              job.seed_class, exemplar_answer, class_name,
                              attributes)
        records: list = []
        by_attr, _ = _ask_with_retries(
            backend, [ChatMessage("user", prompt)], job, transcript, step=3,
            class_name=class_name, attributes=attributes, records_out=records)
        return by_attr, records

    results: dict[str, dict[str, list[str]]] = {}
    failures: dict[str, str] = {}
    collected: dict[str, list] = {}
    if remaining:
        with ThreadPoolExecutor(max_workers=max(1, job.concurrency)) as pool:
            futures = {c: pool.submit(query, c) for c in remaining}
        for c in remaining:  # transcript appended in class order: deterministic
            try:
                results[c], collected[c] = futures[c].result()
            except GenerationError as e:
                failures[c] = str(e)
            except Exception as e:  # pragma: no cover - defensive
                failures[c] = f"[backend] {e}"
        for c in remaining:
            for record in collected.get(c, []):
                transcript.append(*record)
    if failures:
        raise GenerationError(
            "grammar", "description generation failed for classes: "
                       + "; ".join(f"{c}: {m}" for c, m in sorted(failures.items())))

    per_class = {}
    for c in job.class_names:
        per_class[c] = exemplar if c == job.seed_class else results[c]
    tree = AttributeTree(
        dataset_name=job.dataset_name,
        attribute_names=tuple(attributes),
        per_class={c: {a: list(ds) for a, ds in attrs.items()}
                   for c, attrs in per_class.items()},
        global_context_templates=tuple(templates),
    )
    report = validate_tree(tree)
    if not report.ok:
        raise GenerationError("grammar", "assembled tree fails validation: "
                              + "; ".join(report.messages()))
    return tree


def run_generation(job: GenerationJob, backend,
                   templates: tuple[str, ...] = DEFAULT_GLOBAL_TEMPLATES,
                   ) -> GenerationResult:
    """The full three-step pipeline."""
    transcript = LlmTranscript()
    attributes, session = generate_attributes(job, backend, transcript)
    exemplar, exemplar_answer = generate_example(
        job, backend, attributes, session, transcript)
    tree = generate_all_classes(job, backend, attributes, exemplar_answer,
                                exemplar, transcript, templates=templates)
    return GenerationResult(tree=tree, transcript=transcript,
                            attributes=attributes, exemplar=exemplar,
                            session=session)
