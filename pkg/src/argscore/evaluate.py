"""Metrics, element-level inference, and the attention heatmap export.

Element predictions average the per-token class probabilities over each
element's surviving tokens and renormalize; elements whose tokens were
all truncated away fall back to the uniform triple and are flagged.
"""

import csv
import html
import math
from dataclasses import dataclass, field

from .corpus import NUM_CLASSES, RATING_NAMES, EncodedEssay, Vocab
from .engine.core import no_grad
from .engine.kernels import kernels as K
from .errors import ContractError, ParseError

_CLIP = 1e-15


@dataclass
class PredictionRecord:
    element_id: str
    essay_id: str
    p: tuple
    y: tuple | None = None  # one-hot truth when the element is rated
    uniform_fallback: bool = False

    def __post_init__(self):
        if len(self.p) != NUM_CLASSES:
            raise ContractError(f"expected {NUM_CLASSES} probabilities, "
                                f"got {len(self.p)}")
        s = sum(self.p)
        if not math.isfinite(s) or abs(s - 1.0) > 1e-9 \
                or any(v < 0.0 or v > 1.0 for v in self.p):
            raise ContractError(
                f"element {self.element_id}: probabilities must lie in [0,1] "
                f"and sum to 1 (got sum {s!r})")
        if self.y is not None and sorted(self.y) != [0] * (NUM_CLASSES - 1) + [1]:
            raise ContractError(f"element {self.element_id}: truth must be one-hot")


def one_hot(rating: int) -> tuple:
    if not 0 <= rating < NUM_CLASSES:
        raise ContractError(f"rating {rating} outside [0, {NUM_CLASSES})")
    return tuple(1 if j == rating else 0 for j in range(NUM_CLASSES))


def log_loss(records) -> float:
    """Mean negative log-likelihood of the truth, probabilities clipped
    into [1e-15, 1 - 1e-15]. Lower is better."""
    if not records:
        raise ContractError("log_loss needs at least one record")
    total = 0.0
    for r in records:
        if r.y is None:
            raise ContractError(f"element {r.element_id} carries no truth label")
        for yj, pj in zip(r.y, r.p):
            if yj:
                total -= math.log(min(max(pj, _CLIP), 1.0 - _CLIP))
    return total / len(records)


# ---------------------------------------------------------------------------
# element-level inference


def _token_probs(model, ids, average_logits: bool):
    hid = model.forward_hidden(ids)
    logits = model.classification_logits(hid)
    if average_logits:
        return logits.data, logits.shape
    n, c = logits.shape
    return K.softmax_rows(logits.data, n, c), logits.shape


def _element_rows(enc: EncodedEssay):
    """element index -> list of token positions (markers included)."""
    rows = {i: [] for i in range(len(enc.element_ids))}
    for t in range(enc.n_tokens):
        e = enc.token_element_index[t]
        if e >= 0:
            rows[e].append(t)
    return rows


def predict_discourse(model_or_members, enc: EncodedEssay,
                      average_logits: bool = False):
    """Per-element probability triples for one encoded essay.

    Accepts a single model or a list of bagged members (probabilities
    averaged across members). Token probabilities are averaged over
    each element's tokens and renormalized; an element with no
    surviving tokens gets the uniform triple with uniform_fallback set.
    """
    members = (model_or_members if isinstance(model_or_members, (list, tuple))
               else [model_or_members])
    if not members:
        raise ContractError("need at least one model")
    classes = {m.config.num_classes for m in members}
    if len(classes) != 1:
        raise ContractError(f"members disagree on class count: {sorted(classes)}")
    rows = _element_rows(enc)
    if all(not toks for toks in rows.values()):
        raise ContractError(f"essay {enc.essay_id}: no element has surviving tokens")
    ids = list(enc.token_ids[:enc.n_tokens])
    c = NUM_CLASSES
    per_member = []
    with no_grad():
        for m in members:
            scores, _ = _token_probs(m, ids, average_logits)
            elem_probs = {}
            for i, toks in rows.items():
                if not toks:
                    elem_probs[i] = None
                    continue
                acc = [0.0] * c
                for t in toks:
                    for j in range(c):
                        acc[j] += scores[t * c + j]
                if average_logits:
                    mx = max(acc)
                    exps = [math.exp((v - mx) / len(toks)) for v in acc]
                    s = sum(exps)
                    elem_probs[i] = [v / s for v in exps]
                else:
                    s = sum(acc)
                    elem_probs[i] = [v / s for v in acc]
            per_member.append(elem_probs)

    records = []
    m_count = len(members)
    for i, eid in enumerate(enc.element_ids):
        if per_member[0][i] is None:
            p = tuple(1.0 / c for _ in range(c))
            fallback = True
        else:
            p = tuple(sum(pm[i][j] for pm in per_member) / m_count
                      for j in range(c))
            fallback = False
        rating = enc.element_ratings[i]
        records.append(PredictionRecord(
            element_id=eid, essay_id=enc.essay_id, p=p,
            y=one_hot(rating) if rating is not None else None,
            uniform_fallback=fallback))
    return records


def predict_corpus(model_or_members, encoded_list, average_logits: bool = False):
    out = []
    for enc in encoded_list:
        out.extend(predict_discourse(model_or_members, enc, average_logits))
    return out


# ---------------------------------------------------------------------------
# prediction interchange file

_PRED_HEADER = "element_id,p0,p1,p2"


def write_predictions(records, path) -> None:
    """CSV, one line per element; floats written via repr (round-trip exact)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(_PRED_HEADER + "\n")
        for r in records:
            fh.write(",".join([r.element_id] + [repr(float(v)) for v in r.p]) + "\n")


def read_predictions(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != _PRED_HEADER:
            raise ParseError(f"{path}: expected header {_PRED_HEADER!r}, "
                             f"got {header!r}")
        for lineno, line in enumerate(fh, 2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 1 + NUM_CLASSES:
                raise ParseError(f"{path}:{lineno}: expected "
                                 f"{1 + NUM_CLASSES} comma-separated fields")
            try:
                p = tuple(float(v) for v in parts[1:])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric probability") from None
            records.append(PredictionRecord(element_id=parts[0], essay_id="", p=p))
    return records


def attach_truth(records, corpus):
    """Join predictions with gold ratings by element_id; unrated elements
    are dropped (they cannot be scored)."""
    gold = {}
    for essay in corpus:
        for el in essay.elements:
            gold[el.element_id] = (essay.essay_id, el.rating)
    out = []
    for r in records:
        if r.element_id not in gold:
            raise ContractError(f"element {r.element_id} absent from the gold corpus")
        essay_id, rating = gold[r.element_id]
        if rating is None:
            continue
        out.append(PredictionRecord(element_id=r.element_id, essay_id=essay_id,
                                    p=r.p, y=one_hot(rating)))
    return out


# ---------------------------------------------------------------------------
# attention heatmap


@dataclass
class HeatmapDocument:
    essay_id: str
    tokens: list
    salience: list  # per token, in [0, 1], max 1 per essay
    element_of: list  # element_id or "" per token
    predicted_rating: list  # rating name or "" per token
    element_summary: list = field(default_factory=list)  # (element_id, rating, p)


def attention_salience(attn_layers, layer: int, aggregation: str = "column"):
    """Per-token salience from collected attention probabilities.

    'column' averages attention received by each token over heads;
    'row' averages attention emitted (constant 1/n under row-softmax,
    kept for comparison). Min-max normalized; a constant vector maps
    to all ones.
    """
    L = len(attn_layers)
    if not -L <= layer < L:
        raise ContractError(f"layer index {layer} outside [{-L}, {L})")
    heads = attn_layers[layer]
    n = int(math.isqrt(len(heads[0])))
    sal = [0.0] * n
    for probs in heads:
        for i in range(n):
            for j in range(n):
                if aggregation == "column":
                    sal[j] += probs[i * n + j]
                else:
                    sal[i] += probs[i * n + j]
    lo, hi = min(sal), max(sal)
    if hi - lo == 0.0:
        return [1.0] * n
    return [(v - lo) / (hi - lo) for v in sal]


_HTML_STYLE = """
body { font-family: Georgia, serif; max-width: 48em; margin: 2em auto; }
.tok { padding: 0.1em 0.05em; border-radius: 2px; }
.legend { color: #555; font-size: 0.85em; margin-bottom: 1.5em; }
table { border-collapse: collapse; margin-top: 2em; }
td, th { border: 1px solid #ccc; padding: 0.3em 0.6em; font-size: 0.9em; }
"""


def export_heatmap(model, enc: EncodedEssay, vocab: Vocab, layer: int = -1,
                   path=None, aggregation: str = "column") -> HeatmapDocument:
    """Render attention salience over an essay as HTML plus a CSV sidecar.

    The sidecar (path + '.csv') has one row per surviving token:
    token, salience, element_id, predicted rating.
    """
    if aggregation not in ("column", "row"):
        raise ContractError(f"unknown aggregation {aggregation!r}")
    collected = []
    ids = list(enc.token_ids[:enc.n_tokens])
    with no_grad():
        model.forward_hidden(ids, collect_attn=collected)
    sal = attention_salience(collected, layer, aggregation)
    records = predict_discourse(model, enc)
    by_index = {i: r for i, r in enumerate(records)}

    tokens = [vocab.tokens[t] for t in ids]
    element_of = []
    predicted = []
    for t in range(enc.n_tokens):
        e = enc.token_element_index[t]
        if e < 0:
            element_of.append("")
            predicted.append("")
        else:
            r = by_index[e]
            element_of.append(r.element_id)
            best = max(range(NUM_CLASSES), key=lambda j: r.p[j])
            predicted.append(RATING_NAMES[best])
    summary = [(r.element_id,
                RATING_NAMES[max(range(NUM_CLASSES), key=lambda j: r.p[j])],
                r.p) for r in records]
    doc = HeatmapDocument(enc.essay_id, tokens, sal, element_of, predicted, summary)
    if path is not None:
        _write_heatmap_html(doc, path)
        _write_heatmap_csv(doc, str(path) + ".csv")
    return doc


def _write_heatmap_html(doc: HeatmapDocument, path) -> None:
    spans = []
    for tok, s in zip(doc.tokens, doc.salience):
        alpha = f"{s:.6f}"
        spans.append(f'<span class="tok" style="background:rgba(230,120,30,'
                     f'{alpha})" title="{alpha}">{html.escape(tok)}</span>')
    rows = []
    for eid, rating, p in doc.element_summary:
        cells = "".join(f"<td>{v:.6f}</td>" for v in p)
        rows.append(f"<tr><td>{html.escape(eid)}</td>"
                    f"<td>{html.escape(rating)}</td>{cells}</tr>")
    body = (
        f"<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
        f"<title>{html.escape(doc.essay_id)}</title>"
        f"<style>{_HTML_STYLE}</style></head><body>\n"
        f"<h1>{html.escape(doc.essay_id)}</h1>\n"
        f"<p class=\"legend\">Background intensity = attention received "
        f"(min-max scaled per essay).</p>\n"
        f"<p>{' '.join(spans)}</p>\n"
        f"<table><tr><th>element</th><th>predicted</th>"
        f"<th>p(Ineffective)</th><th>p(Adequate)</th><th>p(Effective)</th></tr>\n"
        + "\n".join(rows) + "\n</table>\n</body></html>\n"
    )
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(body)


def _write_heatmap_csv(doc: HeatmapDocument, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["token", "salience", "element_id", "predicted_rating"])
        for tok, s, eid, rating in zip(doc.tokens, doc.salience,
                                       doc.element_of, doc.predicted_rating):
            w.writerow([tok, f"{s:.12f}", eid, rating])
