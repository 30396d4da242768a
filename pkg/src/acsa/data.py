"""Corpus parsing, vocabularies, embeddings, encoding and batching."""

from __future__ import annotations

import json
import math
import re
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1
TOKENIZERS = ("whitespace_punct", "char")


class DataError(ValueError):
    pass


@dataclass
class RawReview:
    id: str
    text: str
    opinions: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        collapsed: dict[str, str] = {}
        for category, polarity in self.opinions:
            if category.count("#") != 1:
                raise DataError(f"review {self.id}: category {category!r} is not of the form ENTITY#ATTRIBUTE")
            collapsed.pop(category, None)  # last occurrence wins and takes the last slot
            collapsed[category] = polarity
        self.opinions = list(collapsed.items())


# ---------------------------------------------------------------------------
# parsers


def _opinions(elem, owner_id):
    out = []
    for op in elem.iter("Opinion"):
        category, polarity = op.get("category"), op.get("polarity")
        if category is None or polarity is None:
            missing = "category" if category is None else "polarity"
            raise DataError(f"review {owner_id}: Opinion without {missing}")
        out.append((category.strip(), polarity.strip()))
    return out


def parse_semeval_xml(path, level: str = "auto") -> list[RawReview]:
    """Read SemEval-2016 ABSA XML.

    ``level="review"`` yields one record per ``Review`` whose opinions sit
    directly under the review (the text is the review's ``text`` element or
    its sentences joined by spaces).  ``level="sentence"`` yields one record
    per ``sentence``.  ``auto`` picks review level when any review carries
    its own ``Opinions``.
    """
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        line, col = exc.position
        raise DataError(f"{path}: malformed XML at line {line}, column {col}") from exc
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from exc

    reviews = [root] if root.tag == "Review" else list(root.iter("Review"))
    if level == "auto":
        has_review_opinions = any(r.find("Opinions") is not None for r in reviews)
        level = "review" if has_review_opinions else "sentence"

    records = []
    if level == "review":
        for r in reviews:
            rid = r.get("rid") or r.get("id") or str(len(records))
            text_el = r.find("text")
            if text_el is not None:
                text = text_el.text or ""
            else:
                text = " ".join((s.findtext("text") or "").strip() for s in r.iter("sentence"))
            ops_el = r.find("Opinions")
            records.append(RawReview(rid, text, _opinions(ops_el, rid) if ops_el is not None else []))
    elif level == "sentence":
        for s in root.iter("sentence"):
            sid = s.get("id") or str(len(records))
            ops_el = s.find("Opinions")
            records.append(RawReview(sid, s.findtext("text") or "", _opinions(ops_el, sid) if ops_el is not None else []))
    else:
        raise ValueError(f"unknown level {level!r}")
    return records


def parse_jsonl(path) -> list[RawReview]:
    """One JSON object per line: ``{"id", "text", "opinions": [[cat, pol], ...]}``."""
    records = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise DataError("record is not an object")
                if "text" not in obj:
                    raise DataError('missing "text"')
                ops = [(str(c), str(p)) for c, p in obj.get("opinions", [])]
                records.append(RawReview(str(obj.get("id", lineno)), str(obj["text"]), ops))
            except (json.JSONDecodeError, DataError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return records


def write_jsonl(path, reviews) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in reviews:
            fh.write(json.dumps({"id": r.id, "text": r.text, "opinions": [list(o) for o in r.opinions]}) + "\n")


def load_corpus(path, fmt: str | None = None) -> list[RawReview]:
    fmt = fmt or ("xml" if str(path).endswith(".xml") else "jsonl")
    if fmt == "xml":
        return parse_semeval_xml(path)
    if fmt == "jsonl":
        return parse_jsonl(path)
    raise ValueError(f"unknown corpus format {fmt!r}")


# ---------------------------------------------------------------------------
# labels and tokens


@dataclass(frozen=True)
class LabelSpace:
    aspects: tuple[str, ...]
    polarities: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "aspects", tuple(self.aspects))
        object.__setattr__(self, "polarities", tuple(self.polarities))
        for name, items in (("aspect", self.aspects), ("polarity", self.polarities)):
            if not items:
                raise DataError(f"label space has no {name} entries")
            dupes = [k for k, v in Counter(items).items() if v > 1]
            if dupes:
                raise DataError(f"duplicate {name} labels: {dupes}")

    @property
    def n_aspects(self):
        return len(self.aspects)

    @property
    def n_polarities(self):
        return len(self.polarities)

    def describe(self) -> str:
        return f"aspects={list(self.aspects)} polarities={list(self.polarities)}"

    def to_text(self) -> str:
        return "[aspects]\n" + "\n".join(self.aspects) + "\n\n[polarities]\n" + "\n".join(self.polarities) + "\n"


def load_label_space(path) -> LabelSpace:
    """Read a file with ``[aspects]`` and ``[polarities]`` sections, one label per line."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: cannot read label space ({exc.strerror})") from exc
    sections: dict[str, list[str]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith(";"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().lower()
            if current not in ("aspects", "polarities"):
                raise DataError(f"{path}:{lineno}: unknown section [{current}]")
            sections.setdefault(current, [])
        elif current is None:
            raise DataError(f"{path}:{lineno}: label outside of a section")
        else:
            sections[current].append(line)
    for name in ("aspects", "polarities"):
        if not sections.get(name):
            raise DataError(f"{path}: section [{name}] is missing or empty")
    return LabelSpace(sections["aspects"], sections["polarities"])


_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(text: str, mode: str = "whitespace_punct") -> list[str]:
    if not text or not text.strip():
        raise DataError("cannot tokenize empty text")
    if mode == "whitespace_punct":
        return _TOKEN_RE.findall(text.lower())
    if mode == "char":
        return [ch for ch in text if not ch.isspace()]
    raise ValueError(f"unknown tokenizer mode {mode!r}; expected one of {TOKENIZERS}")


@dataclass
class Vocabulary:
    tokens: list[str]
    frozen: bool = True

    def __post_init__(self):
        if self.tokens[:2] != [PAD, UNK]:
            raise DataError("vocabulary must start with the padding and unknown tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id(self, token) -> int:
        return self.index.get(token, UNK_ID)

    def encode(self, tokens) -> list[int]:
        return [self.index.get(t, UNK_ID) for t in tokens]


def build_vocab(token_sequences, min_count: int = 1) -> Vocabulary:
    counts = Counter(t for seq in token_sequences for t in seq)
    counts.pop(PAD, None)
    counts.pop(UNK, None)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary([PAD, UNK] + kept)


@dataclass
class LoadedEmbeddings:
    matrix: np.ndarray
    coverage: float
    found: int


def load_embeddings(path, vocab: Vocabulary, d_w: int, seed: int = 0, scale: float = 0.05) -> LoadedEmbeddings:
    """Build a ``(|V|, d_w)`` matrix from a GloVe/word2vec-style text file.

    Tokens missing from the file get uniform ``[-scale, scale]`` vectors;
    the padding row is always zero.  Coverage counts non-reserved tokens.
    """
    rng = np.random.default_rng(seed)
    matrix = rng.uniform(-scale, scale, size=(len(vocab), d_w))
    seen = np.zeros(len(vocab), dtype=bool)
    try:
        fh = open(path, encoding="utf-8", errors="replace")
    except OSError as exc:
        raise DataError(f"{path}: cannot read embeddings ({exc.strerror})") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").rstrip().split(" ")
            if not parts or parts == [""]:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue  # word2vec header
            token = parts[0]
            if len(parts) - 1 != d_w:
                raise DataError(f"{path}:{lineno}: token {token!r} has {len(parts) - 1} values, expected {d_w}")
            idx = vocab.index.get(token)
            if idx is None or idx == PAD_ID:
                continue
            try:
                matrix[idx] = np.array(parts[1:], dtype=np.float64)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: token {token!r} has a non-numeric value") from exc
            seen[idx] = True
    matrix[PAD_ID] = 0.0
    n_real = len(vocab) - 2
    found = int(seen[2:].sum())
    return LoadedEmbeddings(matrix, found / n_real if n_real else 1.0, found)


# ---------------------------------------------------------------------------
# examples and batches


@dataclass
class Example:
    token_ids: np.ndarray
    mask: np.ndarray
    y_A: np.ndarray
    y_S: np.ndarray
    source_id: str = ""

    def __len__(self):
        return len(self.token_ids)


def encode(raw: RawReview, vocab: Vocabulary, labels: LabelSpace, tokenizer: str = "whitespace_punct") -> Example:
    aspect_idx = {a: j for j, a in enumerate(labels.aspects)}
    polarity_idx = {p: k for k, p in enumerate(labels.polarities)}
    y_A = np.zeros(labels.n_aspects)
    y_S = np.zeros((labels.n_aspects, labels.n_polarities))
    for category, polarity in raw.opinions:
        if category not in aspect_idx:
            raise DataError(f"review {raw.id}: aspect category {category!r} is not in the label space")
        if polarity not in polarity_idx:
            raise DataError(f"review {raw.id}: polarity {polarity!r} is not in the label space")
        j = aspect_idx[category]
        y_A[j] = 1.0
        y_S[j] = 0.0
        y_S[j, polarity_idx[polarity]] = 1.0
    ids = np.array(vocab.encode(tokenize(raw.text, tokenizer)), dtype=np.int64)
    return Example(ids, np.ones(len(ids), dtype=bool), y_A, y_S, raw.id)


def split_train_val(examples, ratio: float = 0.9, seed: int = 0):
    """Seeded shuffle, then the first ``ceil(ratio * n)`` go to training."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    n = len(examples)
    if n < 2:
        raise DataError("need at least two examples to split")
    order = np.random.default_rng(seed).permutation(n)
    # round before ceil so 0.9 * 10 stays 9
    n_train = min(max(math.ceil(round(ratio * n, 9)), 1), n - 1)
    return [examples[i] for i in order[:n_train]], [examples[i] for i in order[n_train:]]


@dataclass
class Batch:
    token_ids: np.ndarray  # (B, L) int64, 0-padded
    mask: np.ndarray  # (B, L) bool
    y_A: np.ndarray  # (B, N)
    y_S: np.ndarray  # (B, N, M)
    examples: list[Example]

    def __len__(self):
        return len(self.examples)


def collate(examples) -> Batch:
    width = max(len(e) for e in examples)
    ids = np.full((len(examples), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(examples), width), dtype=bool)
    for b, e in enumerate(examples):
        ids[b, : len(e)] = e.token_ids
        mask[b, : len(e)] = True
    return Batch(ids, mask, np.stack([e.y_A for e in examples]), np.stack([e.y_S for e in examples]), list(examples))


def make_batches(examples, batch_size: int, seed: int | None = None, shuffle: bool = False) -> list[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = np.arange(len(examples))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(examples))
    return [collate([examples[i] for i in order[s : s + batch_size]]) for s in range(0, len(examples), batch_size)]
