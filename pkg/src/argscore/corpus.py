"""Corpus ingestion, discourse-marker preprocessing, and token labeling.

Essays arrive as text plus annotated discourse-element spans. Each
element is wrapped in type-specific start/end marker tokens, the marked
text is word-tokenized, and every token belonging to an element carries
the element's effectiveness rating as its label (markers included, since
they delimit the element). Tokens outside any element get IGNORE.

File formats:
  corpus: UTF-8 JSONL, one essay object per line, '#' header comment
  vocab:  plain text, one token per line, line index = id, '#' header
"""

import json
import re
from dataclasses import dataclass, field

from .errors import ContractError, ParseError, ValidationError

IGNORE = -1
NUM_CLASSES = 3

DISCOURSE_TYPES = (
    "Lead",
    "Position",
    "Claim",
    "Counterclaim",
    "Rebuttal",
    "Evidence",
    "ConcludingStatement",
)

RATING_NAMES = ("Ineffective", "Adequate", "Effective")

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
MASK_TOKEN = "[MASK]"

_CAMEL_SPLIT = re.compile(r"(?<=[a-z])(?=[A-Z])")


def _marker_base(dtype: str) -> str:
    return _CAMEL_SPLIT.sub("_", dtype).upper()


def start_marker(dtype: str) -> str:
    return f"[{_marker_base(dtype)}_START]"


def end_marker(dtype: str) -> str:
    return f"[{_marker_base(dtype)}_END]"


MARKER_TOKENS = tuple(
    m for t in DISCOURSE_TYPES for m in (start_marker(t), end_marker(t))
)

_END_TO_TYPE = {end_marker(t): t for t in DISCOURSE_TYPES}
_START_TO_TYPE = {start_marker(t): t for t in DISCOURSE_TYPES}

# markers, words (letters/digits/underscore/apostrophe), single punctuation
_TOKEN_RE = re.compile(r"\[[A-Z_]+\]|[A-Za-z0-9_']+|[^\sA-Za-z0-9_]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


# ---------------------------------------------------------------------------
# records


@dataclass
class DiscourseElement:
    element_id: str
    dtype: str
    start: int
    end: int
    rating: int | None = None


@dataclass
class Essay:
    essay_id: str
    text: str
    elements: list[DiscourseElement] = field(default_factory=list)


def validate_essay(essay: Essay) -> None:
    eid = essay.essay_id
    if not essay.elements:
        raise ValidationError(f"essay {eid}: needs at least one discourse element")
    prev_end = -1
    prev_start = -1
    for el in essay.elements:
        where = f"essay {eid}, element {el.element_id}"
        if el.dtype not in DISCOURSE_TYPES:
            raise ValidationError(f"{where}: unknown discourse type {el.dtype!r}")
        if not 0 <= el.start < el.end <= len(essay.text):
            raise ValidationError(
                f"{where}: span ({el.start}, {el.end}) out of range for text "
                f"of length {len(essay.text)}"
            )
        if el.start < prev_end:
            raise ValidationError(f"{where}: span overlaps the previous element")
        if el.start < prev_start:
            raise ValidationError(f"{where}: elements not in ascending start order")
        if el.rating is not None and el.rating not in (0, 1, 2):
            raise ValidationError(f"{where}: rating must be 0, 1, 2, or null")
        prev_end = el.end
        prev_start = el.start


# ---------------------------------------------------------------------------
# corpus files


_CORPUS_HEADER = "# argscore-corpus v1"
_VOCAB_HEADER = "# argscore-vocab v1"


def load_corpus(path) -> list[Essay]:
    essays = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}:{lineno}: not valid JSON ({e.msg})") from e
            try:
                elements = [
                    DiscourseElement(
                        element_id=el["element_id"],
                        dtype=el["type"],
                        start=el["start"],
                        end=el["end"],
                        rating=el.get("rating"),
                    )
                    for el in obj["elements"]
                ]
                essay = Essay(obj["essay_id"], obj["text"], elements)
            except (KeyError, TypeError) as e:
                raise ParseError(f"{path}:{lineno}: missing or malformed field ({e})") from e
            validate_essay(essay)
            essays.append(essay)
    return essays


def write_corpus(essays, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_CORPUS_HEADER + "\n")
        for essay in essays:
            validate_essay(essay)
            obj = {
                "essay_id": essay.essay_id,
                "text": essay.text,
                "elements": [
                    {
                        "element_id": el.element_id,
                        "type": el.dtype,
                        "start": el.start,
                        "end": el.end,
                        "rating": el.rating,
                    }
                    for el in essay.elements
                ],
            }
            fh.write(json.dumps(obj, sort_keys=True, ensure_ascii=False,
                                separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# marker insertion


def insert_discourse_markers(essay: Essay, keep_gap_text: bool = False):
    """Wrap each element as "[T_START] text [T_END]", joined by single spaces.

    Returns (marked_text, updated_elements); the updated spans cover the
    element text only (markers excluded), so
    ``marked_text[el.start:el.end]`` equals the original span text.
    Gap text between elements is dropped unless ``keep_gap_text``.
    """
    validate_essay(essay)
    parts: list[str] = []
    new_elements: list[DiscourseElement] = []
    pos = 0  # length of text emitted so far
    cursor = 0

    def emit(piece: str):
        nonlocal pos
        if parts:
            parts.append(" ")
            pos += 1
        parts.append(piece)
        pos += len(piece)

    for el in essay.elements:
        gap = essay.text[cursor:el.start]
        if keep_gap_text and gap.strip():
            emit(gap.strip())
        emit(start_marker(el.dtype))
        span_text = essay.text[el.start:el.end]
        emit(span_text)
        new_start = pos - len(span_text)
        new_elements.append(
            DiscourseElement(el.element_id, el.dtype, new_start, pos, el.rating)
        )
        emit(end_marker(el.dtype))
        cursor = el.end
    tail = essay.text[cursor:]
    if keep_gap_text and tail.strip():
        emit(tail.strip())
    return "".join(parts), new_elements


def parse_marked_text(marked: str):
    """Invert marker insertion: yield (dtype, element_text) per element."""
    out = []
    pos = 0
    while True:
        starts = [(marked.find(start_marker(t), pos), t) for t in DISCOURSE_TYPES]
        starts = [(i, t) for i, t in starts if i >= 0]
        if not starts:
            break
        i, t = min(starts)
        begin = i + len(start_marker(t)) + 1
        j = marked.find(end_marker(t), begin)
        if j < 0:
            raise ValidationError(f"unbalanced {start_marker(t)} in marked text")
        out.append((t, marked[begin:j - 1]))
        pos = j + len(end_marker(t))
    return out


# ---------------------------------------------------------------------------
# vocabulary


class Vocab:
    def __init__(self, tokens: list[str]):
        self.tokens = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ValidationError("vocab contains duplicate tokens")
        for required in (PAD_TOKEN, UNK_TOKEN):
            if required not in self.token_to_id:
                raise ValidationError(f"vocab is missing {required}")

    def __len__(self):
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD_TOKEN]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK_TOKEN]

    @property
    def mask_id(self) -> int | None:
        return self.token_to_id.get(MASK_TOKEN)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, self.token_to_id[UNK_TOKEN])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(_VOCAB_HEADER + "\n")
            for t in self.tokens:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        tokens = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                tokens.append(line)
        if not tokens:
            raise ParseError(f"{path}: vocab file has no tokens")
        return cls(tokens)


def reserved_tokens(include_mask: bool) -> list[str]:
    out = [PAD_TOKEN, UNK_TOKEN]
    if include_mask:
        out.append(MASK_TOKEN)
    out.extend(MARKER_TOKENS)
    return out


def build_vocab(corpus, max_size: int, include_mask: bool = False,
                keep_gap_text: bool = False) -> Vocab:
    """Frequency-ranked word vocab (ties lexicographic), reserved ids first."""
    reserved = reserved_tokens(include_mask)
    if max_size <= len(reserved):
        raise ContractError(
            f"max_size {max_size} must exceed the {len(reserved)} reserved tokens"
        )
    marker_set = set(MARKER_TOKENS)
    freq: dict[str, int] = {}
    for essay in corpus:
        marked, _ = insert_discourse_markers(essay, keep_gap_text=keep_gap_text)
        for tok in tokenize(marked):
            if tok in marker_set:
                continue
            freq[tok] = freq.get(tok, 0) + 1
    ranked = sorted(freq, key=lambda t: (-freq[t], t))
    room = max_size - len(reserved)
    return Vocab(reserved + ranked[:room])


# ---------------------------------------------------------------------------
# encoding


@dataclass
class EncodedEssay:
    essay_id: str
    token_ids: list[int]
    token_labels: list[int]
    token_element_index: list[int]  # -1 where the token belongs to no element
    n_tokens: int                   # real tokens before padding
    truncated: bool
    element_ids: list[str]
    element_ratings: list[int | None]
    tail_truncated_elements: list[int]  # element indices that lost their tail
    dropped_elements: list[int]         # element indices with no surviving token


def encode(essay: Essay, vocab: Vocab, max_len: int = 512,
           keep_gap_text: bool = False, exclude_markers_from_labels: bool = False,
           use_markers: bool = True) -> EncodedEssay:
    """Marker insertion, tokenization, truncation to max_len, PAD to max_len.

    Truncation keeps the prefix. An element whose end is cut keeps its
    surviving tokens (recorded in tail_truncated_elements); one with no
    surviving tokens lands in dropped_elements. ``use_markers=False``
    skips marker insertion for ablation runs; labels are unaffected.
    With ``exclude_markers_from_labels`` the markers carry IGNORE and no
    element index, leaving span averaging to the interior tokens.
    """
    if max_len < 8:
        raise ContractError(f"max_len must be at least 8, got {max_len}")
    validate_essay(essay)

    tokens: list[str] = []
    labels: list[int] = []
    el_index: list[int] = []

    def emit(text: str, label: int, idx: int):
        for tok in tokenize(text):
            tokens.append(tok)
            labels.append(label)
            el_index.append(idx)

    cursor = 0
    el_token_count = [0] * len(essay.elements)
    for i, el in enumerate(essay.elements):
        gap = essay.text[cursor:el.start]
        if keep_gap_text and gap.strip():
            emit(gap.strip(), IGNORE, -1)
        label = el.rating if el.rating is not None else IGNORE
        marker_label = IGNORE if exclude_markers_from_labels else label
        marker_idx = -1 if exclude_markers_from_labels else i
        before = len(tokens)
        if use_markers:
            emit(start_marker(el.dtype), marker_label, marker_idx)
        emit(essay.text[el.start:el.end], label, i)
        if use_markers:
            emit(end_marker(el.dtype), marker_label, marker_idx)
        el_token_count[i] = len(tokens) - before
        cursor = el.end
    tail = essay.text[cursor:]
    if keep_gap_text and tail.strip():
        emit(tail.strip(), IGNORE, -1)

    truncated = len(tokens) > max_len
    tail_truncated = []
    dropped = []
    if truncated:
        cut_index = el_index[max_len:]
        kept_index = el_index[:max_len]
        for i in range(len(essay.elements)):
            if i in cut_index:
                if i in kept_index:
                    tail_truncated.append(i)
                else:
                    dropped.append(i)
        tokens = tokens[:max_len]
        labels = labels[:max_len]
        el_index = kept_index
    n_tokens = len(tokens)

    ids = [vocab.id_of(t) for t in tokens]
    pad = vocab.pad_id
    while len(ids) < max_len:
        ids.append(pad)
        labels.append(IGNORE)
        el_index.append(-1)

    return EncodedEssay(
        essay_id=essay.essay_id,
        token_ids=ids,
        token_labels=labels,
        token_element_index=el_index,
        n_tokens=n_tokens,
        truncated=truncated,
        element_ids=[el.element_id for el in essay.elements],
        element_ratings=[el.rating for el in essay.elements],
        tail_truncated_elements=tail_truncated,
        dropped_elements=dropped,
    )


_ENCODED_HEADER = "# argscore-encoded v1"


def write_encoded(encoded, path) -> None:
    """JSONL dump of encoded essays (one object per line, sorted keys)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_ENCODED_HEADER + "\n")
        for e in encoded:
            doc = {
                "essay_id": e.essay_id,
                "token_ids": e.token_ids,
                "token_labels": e.token_labels,
                "token_element_index": e.token_element_index,
                "n_tokens": e.n_tokens,
                "truncated": e.truncated,
                "element_ids": e.element_ids,
                "element_ratings": e.element_ratings,
                "tail_truncated_elements": e.tail_truncated_elements,
                "dropped_elements": e.dropped_elements,
            }
            fh.write(json.dumps(doc, sort_keys=True, ensure_ascii=False,
                                separators=(",", ":")) + "\n")


def load_encoded(path) -> list[EncodedEssay]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                doc = json.loads(line)
                out.append(EncodedEssay(
                    essay_id=doc["essay_id"],
                    token_ids=[int(v) for v in doc["token_ids"]],
                    token_labels=[int(v) for v in doc["token_labels"]],
                    token_element_index=[int(v) for v in doc["token_element_index"]],
                    n_tokens=int(doc["n_tokens"]),
                    truncated=bool(doc["truncated"]),
                    element_ids=[str(v) for v in doc["element_ids"]],
                    element_ratings=[None if v is None else int(v)
                                     for v in doc["element_ratings"]],
                    tail_truncated_elements=[int(v) for v
                                             in doc["tail_truncated_elements"]],
                    dropped_elements=[int(v) for v in doc["dropped_elements"]],
                ))
            except (ValueError, KeyError, TypeError) as e:
                raise ParseError(f"{path}:{lineno}: malformed encoded essay "
                                 f"({e})") from e
    return out
