"""Acceptance gate: one test per shipped guarantee.

Each test prints a single [criterion NN] PASS line with the measured
margin, so a verbose run doubles as the acceptance report. The checks
restate their oracles locally rather than importing the per-module
test helpers, to keep each criterion self-contained and readable.
"""

import math
import random
import time
from array import array

import pytest

from argscore.cli import main
from argscore.corpus import IGNORE, EncodedEssay, build_vocab, encode, write_corpus
from argscore.engine import ops
from argscore.engine.check import finite_diff_check
from argscore.engine.core import Precision, RngStream, Tape, backward
from argscore.ensemble import MetaModel, bag_records, stack_train
from argscore.errors import ContractError
from argscore.evaluate import PredictionRecord, log_loss
from argscore.model import Model, ModelConfig, make_pretrain_pair, rtd_detection_accuracy, rtd_pretrain_step
from argscore.training import (TrainConfig, batch_backward, checkpointed_backward,
                               corpus_token_loss, estimate_memory, train_classifier,
                               train_pretrainer)

from synthdata import cycle_encoded, overfit_corpus, rated_corpus
from test_autodiff import OP_CASES

MASK_ID = 2


def _report(n, detail):
    print(f"[criterion {n:02d}] PASS {detail}")


def _softmax3(a, b, c):
    m = max(a, b, c)
    e = [math.exp(v - m) for v in (a, b, c)]
    s = sum(e)
    return tuple(v / s for v in e)


def _labeled(eid, ids, labels):
    return EncodedEssay(essay_id=eid, token_ids=list(ids),
                        token_labels=list(labels),
                        token_element_index=[-1] * len(ids),
                        n_tokens=len(ids), truncated=False, element_ids=[],
                        element_ratings=[], tail_truncated_elements=[],
                        dropped_elements=[])


def _batch(num, length, labeled_per_essay, seed, vocab=14):
    rng = random.Random(seed)
    out = []
    for e in range(num):
        ids = [rng.randrange(4, vocab) for _ in range(length)]
        labels = [IGNORE] * length
        for t in rng.sample(range(length), labeled_per_essay):
            labels[t] = rng.randrange(3)
        out.append(_labeled(f"e{e}", ids, labels))
    return out


def _grad_bytes(model):
    return [None if p.grad is None else p.grad.tobytes()
            for _, p in model.named_parameters()]


# -- 1: analytic gradients vs central differences ----------------------------


def test_criterion_01_gradients_match_finite_differences():
    """Every op and a whole 2-layer/width-32 model, 100+ seeded cases."""
    t0 = time.perf_counter()
    worst = 0.0
    cases = 0
    for name in sorted(OP_CASES):
        make = OP_CASES[name]
        for s in range(5):
            params, loss_fn = make(random.Random(s * 211 + 13))
            tape = Tape()
            with tape:
                backward(tape, loss_fn())
            tape.close()
            w = finite_diff_check(lambda: loss_fn().item(), params, step=1e-6)
            assert w < 1e-5, (name, s, w)
            worst = max(worst, w)
            cases += 1

    for s in range(3):
        cfg = ModelConfig(vocab_size=12, num_layers=2, hidden_size=32,
                          num_heads=2, relative_window=2, max_len=16,
                          hidden_dropout=0.0, dropout_rates=(0.0,), seed=s)
        model = Model(cfg)
        rng = random.Random(100 + s)
        ids = [rng.randrange(12) for _ in range(5)]
        labels = [rng.choice([IGNORE, 0, 1, 2]) for _ in range(4)] + [1]

        def loss_fn():
            hid = model.forward_hidden(ids)
            return ops.token_ce(model.classification_logits(hid), labels)

        tape = Tape()
        with tape:
            backward(tape, loss_fn())
        tape.close()
        params = [p for _, p in model.named_parameters() if p.grad is not None]
        assert len(params) > 10
        w = finite_diff_check(lambda: loss_fn().item(), params, step=1e-6)
        assert w < 1e-5, (s, w)
        worst = max(worst, w)
        cases += 1

    elapsed = time.perf_counter() - t0
    assert cases >= 100
    assert elapsed < 60.0
    _report(1, f"{cases} cases, worst rel err {worst:.2e}, {elapsed:.1f}s")


# -- 2: disentangled attention vs a three-term loop oracle --------------------


def _bucket(i, j, k):
    d = max(-k, min(k - 1, i - j))
    return d + k


def _rows(t):
    r, c = t.shape
    return [[t.data[i * c + j] for j in range(c)] for i in range(r)]


def _mm_nt(x, w):
    return [[sum(a * b for a, b in zip(row, wrow)) for wrow in w] for row in x]


def _oracle_scores(h, lp, cfg, n, content_only=False):
    """c2c + c2p + p2c score matrices per head, plain list arithmetic."""
    k, dh = cfg.relative_window, cfg.head_dim
    qc = _mm_nt(h, _rows(lp.w_qc))
    kc = _mm_nt(h, _rows(lp.w_kc))
    kr = _mm_nt(_rows(lp.p_table), _rows(lp.w_kr))
    qr = _mm_nt(_rows(lp.p_table), _rows(lp.w_qr))
    heads = []
    for hd in range(cfg.num_heads):
        c0 = hd * dh
        rows = []
        for i in range(n):
            scores = []
            for j in range(n):
                s = sum(qc[i][c0 + c] * kc[j][c0 + c] for c in range(dh))
                if not content_only:
                    s += sum(qc[i][c0 + c] * kr[_bucket(j, i, k)][c0 + c]
                             for c in range(dh))
                    s += sum(kc[j][c0 + c] * qr[_bucket(i, j, k)][c0 + c]
                             for c in range(dh))
                scores.append(s * cfg.scale)
            rows.append(scores)
        heads.append(rows)
    return heads


def _captured_scores(model, ids, monkeypatch):
    """Run a forward pass and grab each softmax input (the score matrix)."""
    caught = []
    real = ops.softmax

    def spy(x):
        caught.append((x.shape, array("d", x.data)))
        return real(x)

    monkeypatch.setattr(ops, "softmax", spy)
    model.forward_hidden(ids)
    monkeypatch.undo()
    return caught


def test_criterion_02_attention_matches_three_term_oracle(monkeypatch):
    rng = random.Random(53)
    worst = 0.0
    for trial in range(20):
        n = rng.randint(2, 8)
        heads = rng.choice([1, 2, 4])
        dh = rng.choice([2, 4]) if heads < 4 else rng.choice([2, 3, 4])
        cfg = ModelConfig(vocab_size=11, num_layers=1, hidden_size=heads * dh,
                          num_heads=heads, relative_window=rng.randint(1, 4),
                          max_len=16, hidden_dropout=0.0, seed=trial)
        assert cfg.hidden_size <= 16
        model = Model(cfg)
        ids = [rng.randrange(11) for _ in range(n)]
        h = _rows(model.embed_ids(ids))
        want = _oracle_scores(h, model.layers[0], cfg, n)
        got = _captured_scores(model, ids, monkeypatch)
        assert len(got) == heads
        for hd in range(heads):
            assert got[hd][0] == (n, n)
            for i in range(n):
                for j in range(n):
                    d = abs(got[hd][1][i * n + j] - want[hd][i][j])
                    assert d < 1e-10, (trial, hd, i, j, d)
                    worst = max(worst, d)

    # no position-to-position term: a zeroed position table leaves pure
    # content scores, so both relative paths carry the whole difference
    cfg = ModelConfig(vocab_size=9, num_layers=1, hidden_size=8, num_heads=2,
                      relative_window=3, max_len=16, hidden_dropout=0.0, seed=77)
    model = Model(cfg)
    lp = model.layers[0]
    for i in range(len(lp.p_table.data)):
        lp.p_table.data[i] = 0.0
    ids = [1, 3, 5, 7, 2]
    h = _rows(model.embed_ids(ids))
    want = _oracle_scores(h, lp, cfg, 5, content_only=True)
    got = _captured_scores(model, ids, monkeypatch)
    for hd in range(2):
        for i in range(5):
            for j in range(5):
                assert abs(got[hd][1][i * 5 + j] - want[hd][i][j]) < 1e-10
    _report(2, f"20 configs, worst score gap {worst:.2e}; zero-P leaves c2c")


# -- 3: gradient accumulation is a no-op split --------------------------------


def test_criterion_03_accumulation_split_is_exact():
    """Equal micro-batches, dropout off: any split matches the big batch."""
    cfg = ModelConfig(vocab_size=14, num_layers=2, hidden_size=8, num_heads=2,
                      relative_window=2, max_len=16, hidden_dropout=0.0,
                      dropout_rates=(0.0,), seed=6)
    batch = _batch(8, 10, labeled_per_essay=4, seed=5)
    results = {}
    for micro, steps in ((8, 1), (4, 2), (2, 4), (1, 8)):
        model = Model(cfg)
        tc = TrainConfig(micro_batch_size=micro, accumulation_steps=steps)
        model.zero_grad()
        loss, _, _ = batch_backward(model, batch, tc, RngStream(11).child("s0"))
        grads = {name: array("d", p.grad)
                 for name, p in model.named_parameters() if p.grad is not None}
        results[(micro, steps)] = (loss, grads)
    base_loss, base = results[(8, 1)]
    worst = 0.0
    for key, (loss, grads) in results.items():
        assert loss == base_loss, key
        assert grads.keys() == base.keys()
        for name in base:
            for a, b in zip(grads[name], base[name]):
                d = abs(a - b)
                assert d < 1e-10, (key, name, d)
                worst = max(worst, d)
    _report(3, f"splits 8x1/4x2/2x4/1x8, worst grad gap {worst:.1e}")


# -- 4: activation checkpointing and byte accounting --------------------------


def test_criterion_04_checkpointing_bitwise_and_smaller():
    """Dropout on, frozen seeds: recompute replays the exact masks."""
    layers = 4
    cfg = ModelConfig(vocab_size=14, num_layers=layers, hidden_size=8,
                      num_heads=2, relative_window=2, max_len=16,
                      hidden_dropout=0.1, dropout_rates=(0.1, 0.3), seed=8)
    batch = _batch(3, 9, labeled_per_essay=3, seed=7)
    baseline = None
    fwd = {}
    for seg in (None, 1, 2, layers):
        model = Model(cfg)
        model.zero_grad()
        stream = RngStream(21).child("s0")
        if seg is None:
            loss, b, _ = batch_backward(model, batch, TrainConfig(), stream)
        else:
            loss, b, _ = checkpointed_backward(model, batch, seg,
                                               TrainConfig(), stream)
        fwd[seg] = b
        if baseline is None:
            baseline = (loss, _grad_bytes(model))
        else:
            assert loss == baseline[0], seg
            assert _grad_bytes(model) == baseline[1], seg
    assert fwd[layers] < fwd[2] < fwd[1] < fwd[None]

    sizes = {}
    for prec in (Precision.FULL64, Precision.HALF16):
        model = Model(cfg)
        model.zero_grad()
        tc = TrainConfig(precision=prec)
        _, f, peak = batch_backward(model, batch, tc, RngStream(4).child("s0"))
        sizes[prec] = (f, peak)
    full, half = sizes[Precision.FULL64], sizes[Precision.HALF16]
    assert half[0] * 2 == full[0]
    assert half[1] * 2 == full[1]
    _report(4, f"grads bitwise for segments 1/2/{layers}; stored bytes "
               f"{fwd[None]}>{fwd[1]}>{fwd[2]}>{fwd[layers]}; half16 exact")


# -- 5: marker-disambiguated overfit -------------------------------------------


def test_criterion_05_marker_overfit_beats_unmarked():
    """Twenty twin essays, 300 epochs: markers reach <0.05, no markers can't."""
    t0 = time.perf_counter()
    corpus = overfit_corpus(10)
    assert len(corpus) == 20
    vocab = build_vocab(corpus, max_size=300)
    assert len(vocab) <= 300
    cfg = ModelConfig(vocab_size=len(vocab), num_layers=2, hidden_size=16,
                      num_heads=2, relative_window=4, max_len=32,
                      hidden_dropout=0.0, dropout_rates=(0.0,), seed=0)
    tc = TrainConfig(learning_rate=1e-2, epochs=300, micro_batch_size=20, seed=1)

    marked = [encode(e, vocab, max_len=32) for e in corpus]
    model = Model(cfg)
    train_classifier(model, marked, tc)
    loss_marked = corpus_token_loss(model, marked)

    plain = [encode(e, vocab, max_len=32, use_markers=False) for e in corpus]
    twin = Model(cfg)
    train_classifier(twin, plain, tc)
    loss_plain = corpus_token_loss(twin, plain)

    elapsed = time.perf_counter() - t0
    assert loss_marked < 0.05, loss_marked
    assert loss_plain > loss_marked
    assert elapsed < 120.0
    _report(5, f"marked {loss_marked:.4f} < 0.05 < unmarked {loss_plain:.4f}, "
               f"{elapsed:.0f}s")


# -- 6: bagging ----------------------------------------------------------------


def _members_sharing_labels(labels, num_members, seed, sharp=1.0):
    rng = random.Random(seed)
    members = []
    for _ in range(num_members):
        recs = []
        for i, lab in enumerate(labels):
            z = [rng.gauss(0.0, 1.0) for _ in range(3)]
            z[lab] += sharp
            y = tuple(1.0 if j == lab else 0.0 for j in range(3))
            recs.append(PredictionRecord(element_id=f"el{i}", essay_id=f"h{i}",
                                         p=_softmax3(*z), y=y))
        members.append(recs)
    return members


def test_criterion_06_bagging_jensen_and_variance_win():
    # probability averaging never loses to the mean member (Jensen)
    for seed in range(10):
        rng = random.Random(seed * 17 + 3)
        labels = [rng.randrange(3) for _ in range(30)]
        members = _members_sharing_labels(labels, 5, seed=seed * 31 + 1)
        bagged = log_loss(bag_records(members))
        mean = sum(log_loss(m) for m in members) / len(members)
        assert bagged <= mean + 1e-12, (seed, bagged, mean)

    # five members, each confidently wrong on its own fifth of the data:
    # every member is bad, the average is still right everywhere
    rng = random.Random(5)
    labels = [rng.randrange(3) for _ in range(40)]
    members = []
    for m in range(5):
        recs = []
        for i, lab in enumerate(labels):
            target = (lab + 1) % 3 if i % 5 == m else lab
            z = [4.0 if j == target else 0.0 for j in range(3)]
            y = tuple(1.0 if j == lab else 0.0 for j in range(3))
            recs.append(PredictionRecord(element_id=f"el{i}", essay_id=f"h{i}",
                                         p=_softmax3(*z), y=y))
        members.append(recs)
    worst = max(log_loss(m) for m in members)
    bagged = log_loss(bag_records(members))
    assert bagged <= worst - 0.05, (bagged, worst)
    _report(6, f"Jensen holds on 10 sets; variance case bagged {bagged:.3f} "
               f"vs worst member {worst:.3f}")


# -- 7: stacking down-weights an uninformative member --------------------------


def test_criterion_07_stacking_silences_weak_member():
    n = 60
    rng = random.Random(27)
    labels = [rng.randrange(3) for _ in range(n)]
    members = []
    for _ in range(5):
        recs = []
        for i, lab in enumerate(labels):
            z = [rng.gauss(0.0, 0.4) for _ in range(3)]
            z[lab] += 1.6
            y = tuple(1.0 if j == lab else 0.0 for j in range(3))
            recs.append(PredictionRecord(element_id=f"el{i}", essay_id=f"h{i}",
                                         p=_softmax3(*z), y=y))
        members.append(recs)
    # the bag-of-words block carries pure noise
    bow = [list(_softmax3(*(rng.gauss(0.0, 1.0) for _ in range(3))))
           for _ in range(n)]
    meta = stack_train(members, bow, labels, num_members=5, seed=3)
    blocks = meta.block_l1()
    assert len(blocks) == 6
    member_mean = sum(blocks[:5]) / 5
    assert blocks[5] < 0.1 * member_mean, blocks
    _report(7, f"noise block L1 {blocks[5]:.4f} vs member mean "
               f"{member_mean:.4f}")


# -- 8: embedding sharing with a gradient-disentangled discriminator -----------


def test_criterion_08_gdes_blocks_rtd_embedding_gradient():
    cfg = ModelConfig(vocab_size=12, num_layers=1, hidden_size=16,
                      num_heads=2, relative_window=4, max_len=32,
                      hidden_dropout=0.0, seed=2)
    gen, disc = make_pretrain_pair(cfg)
    assert disc.embed_table is gen.embed_table

    batch = cycle_encoded(2, 12, 12, seed=9)
    gen.zero_grad()
    disc.zero_grad()
    tape = Tape()
    with tape:
        _, rtd, _ = rtd_pretrain_step(batch, gen, disc, 0.4, MASK_ID,
                                      RngStream(7))
        backward(tape, rtd)
    tape.close()
    for name, p in gen.named_parameters():
        if p.grad is not None:
            assert all(v == 0.0 for v in p.grad), name
    assert disc.embed_delta.grad is not None
    assert any(v != 0.0 for v in disc.embed_delta.grad)

    # and the detector actually learns: held-out accuracy beats chance
    t0 = time.perf_counter()
    gen2, disc2 = make_pretrain_pair(cfg)
    train_batch = cycle_encoded(6, 16, 12, seed=3)
    held_out = cycle_encoded(3, 16, 12, seed=301)
    tc = TrainConfig(learning_rate=1e-2, epochs=150, seed=6)
    train_pretrainer(gen2, disc2, train_batch, tc, mask_rate=0.5,
                     mask_id=MASK_ID, rtd_weight=1.0, mode="rtd")
    acc = rtd_detection_accuracy(held_out, gen2, disc2, 0.5, MASK_ID,
                                 RngStream(42))
    elapsed = time.perf_counter() - t0
    assert acc > 0.7, acc
    assert elapsed < 300.0
    _report(8, f"shared-table grads all zero; held-out detection {acc:.3f}, "
               f"{elapsed:.0f}s")


# -- 9: memory arithmetic -------------------------------------------------------


def test_criterion_09_memory_estimate_goldens(capsys):
    est = estimate_memory(10 ** 9)
    assert est == {"weights": 4 * 10 ** 9, "gradients": 4 * 10 ** 9,
                   "moments": 8 * 10 ** 9, "total": 16 * 10 ** 9}
    assert main(["memest", "--params", "1000000000"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out == ["weights=4 GB", "gradients=4 GB", "moments=8 GB",
                   "total=16 GB"]
    _report(9, "1e9 params -> 4/4/8 GB, total 16 GB")


# -- 10: log-loss goldens -------------------------------------------------------


def test_criterion_10_log_loss_goldens():
    third = 1.0 / 3.0
    uniform = [PredictionRecord(element_id=f"u{i}", essay_id="a",
                                p=(third, third, third),
                                y=tuple(1 if i % 3 == j else 0 for j in range(3)))
               for i in range(6)]
    gap_uniform = abs(log_loss(uniform) - math.log(3.0))
    assert gap_uniform < 1e-12

    perfect = [PredictionRecord(element_id=f"p{i}", essay_id="a",
                                p=tuple(1.0 if j == i % 3 else 0.0
                                        for j in range(3)),
                                y=tuple(1 if j == i % 3 else 0 for j in range(3)))
               for i in range(6)]
    assert log_loss(perfect) < 1e-12

    half = [PredictionRecord(element_id="h", essay_id="a", p=(0.5, 0.3, 0.2),
                             y=(1, 0, 0))]
    gap_half = abs(log_loss(half) - 0.6931471805599453)
    assert gap_half < 1e-12
    _report(10, f"uniform ln3 gap {gap_uniform:.1e}, perfect "
                f"{log_loss(perfect):.1e}, half gap {gap_half:.1e}")


# -- 11: run-to-run determinism of the full pipeline ---------------------------


def test_criterion_11_pipeline_reruns_byte_identical(tmp_path, capsys):
    train = rated_corpus(6, seed=1)
    hold = rated_corpus(3, seed=2)
    for e in hold:
        e.essay_id = "h_" + e.essay_id
        for el in e.elements:
            el.element_id = "h_" + el.element_id
    write_corpus(train, tmp_path / "train.jsonl")
    write_corpus(hold, tmp_path / "hold.jsonl")

    def chain(out):
        out.mkdir()
        assert main(["preprocess", "--corpus", str(tmp_path / "train.jsonl"),
                     "--out", str(out / "train.enc"),
                     "--vocab-out", str(out / "vocab.txt"),
                     "--vocab-size", "200", "--max-len", "48"]) == 0
        assert main(["train", "--corpus", str(tmp_path / "train.jsonl"),
                     "--vocab", str(out / "vocab.txt"),
                     "--out", str(out / "model.ckpt"), "--max-len", "48",
                     "--layers", "1", "--hidden", "8", "--heads", "2",
                     "--window", "2", "--epochs", "2", "--lr", "0.005",
                     "--seed", "3"]) == 0
        assert main(["predict", "--corpus", str(tmp_path / "hold.jsonl"),
                     "--vocab", str(out / "vocab.txt"),
                     "--model", str(out / "model.ckpt"),
                     "--out", str(out / "pred.csv"), "--max-len", "48"]) == 0
        return ((out / "train.enc").read_bytes(),
                (out / "model.ckpt").read_bytes(),
                (out / "pred.csv").read_bytes())

    first = chain(tmp_path / "run1")
    second = chain(tmp_path / "run2")
    capsys.readouterr()
    assert first[0] == second[0]
    assert first[1] == second[1]
    assert first[2] == second[2]
    _report(11, f"encodings/checkpoint/predictions byte-equal "
                f"({len(first[1])}-byte ckpt, {len(first[2])}-byte csv)")
