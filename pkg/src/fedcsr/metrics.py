"""Greedy CTC decoding, edit-distance metrics and the phoneme confusion matrix."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class RoundMetrics:
    round: int
    method: str
    seed: int
    cer: float
    wer: float
    losses: dict = field(default_factory=dict)
    local_epochs: int = 1
    wall_s: float = 0.0


def greedy_decode(log_probs, blank: int | None = None) -> list:
    """Per-frame argmax (ties -> lowest index), collapse repeats, drop blanks."""
    lp = np.asarray(getattr(log_probs, "data", log_probs))
    blank = lp.shape[-1] - 1 if blank is None else blank
    best = np.argmax(lp, axis=-1)
    out, prev = [], None
    for k in best.tolist():
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def _dp(a, b):
    n, m = len(a), len(b)
    D = np.zeros((n + 1, m + 1), dtype=np.int64)
    D[:, 0] = np.arange(n + 1)
    D[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        ai = a[i - 1]
        for j in range(1, m + 1):
            D[i, j] = min(D[i - 1, j - 1] + (ai != b[j - 1]), D[i - 1, j] + 1, D[i, j - 1] + 1)
    return D


def edit_distance(a, b) -> int:
    return int(_dp(list(a), list(b))[len(a), len(b)])


def align(ref, hyp) -> list:
    """Minimal-edit alignment as (op, ref_index, hyp_index) with op in M/S/D/I.

    Backtrace preference on ties: diagonal (match/substitution), then
    deletion, then insertion. Indices are None where not applicable.
    """
    ref, hyp = list(ref), list(hyp)
    D = _dp(ref, hyp)
    i, j = len(ref), len(hyp)
    ops = []
    while i > 0 or j > 0:
        if i > 0 and j > 0 and D[i, j] == D[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append(("M" if ref[i - 1] == hyp[j - 1] else "S", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and D[i, j] == D[i - 1, j] + 1:
            ops.append(("D", i - 1, None))
            i -= 1
        else:
            ops.append(("I", None, j - 1))
            j -= 1
    ops.reverse()
    return ops


def cer(preds, refs) -> float:
    if len(preds) != len(refs):
        raise ValueError("preds and refs must have equal length")
    total = sum(len(r) for r in refs)
    if total == 0:
        raise ValueError("reference corpus is empty")
    return sum(edit_distance(p, r) for p, r in zip(preds, refs)) / total


def word_errors(pred, ref, words) -> int:
    """Number of reference words touched by an edit in the minimal alignment.

    A word is wrong if one of its phonemes is substituted or deleted, or if an
    insertion lands strictly between two of its phonemes.
    """
    words = list(words)
    if sum(words) != len(ref) or any(w <= 0 for w in words):
        raise ValueError(f"word lengths {words} do not partition a reference of length {len(ref)}")
    word_of = np.repeat(np.arange(len(words)), words)
    wrong = np.zeros(len(words), dtype=bool)
    last_ref = -1
    for op, ri, _ in align(ref, pred):
        if op in ("S", "D"):
            wrong[word_of[ri]] = True
        if op == "I" and 0 <= last_ref < len(ref) - 1 and word_of[last_ref] == word_of[last_ref + 1]:
            wrong[word_of[last_ref]] = True
        if ri is not None:
            last_ref = ri
    return int(wrong.sum())


def wer(preds, refs, word_lengths) -> float:
    if not (len(preds) == len(refs) == len(word_lengths)):
        raise ValueError("preds, refs and word_lengths must have equal length")
    total = sum(len(w) for w in word_lengths)
    if total == 0:
        raise ValueError("reference corpus has no words")
    return sum(word_errors(p, r, w) for p, r, w in zip(preds, refs, word_lengths)) / total


def confusion_matrix(preds, refs, vocab: int) -> np.ndarray:
    """(V+1)^2 counts; rows are reference, columns prediction, index V is blank."""
    M = np.zeros((vocab + 1, vocab + 1), dtype=np.int64)
    for p, r in zip(preds, refs):
        for op, ri, hi in align(r, p):
            if op in ("M", "S"):
                M[r[ri], p[hi]] += 1
            elif op == "D":
                M[r[ri], vocab] += 1
            else:
                M[vocab, p[hi]] += 1
    return M


def write_confusion(M: np.ndarray, path) -> None:
    np.savetxt(path, M, fmt="%d", delimiter=",")


def export_features(bundle, samples, destination, batch_size: int = 32) -> int:
    """Write one CSV row per frame: cuer_id, phoneme_id, v_lin[0..d-1]. Returns row count."""
    from .models import make_batch, visual_forward_batch

    cb = bundle.codebook_params()
    d = bundle.config.d
    rows = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        out = visual_forward_batch(make_batch(chunk), bundle.w, cb, bundle.config)
        for b, s in enumerate(chunk):
            pids = s.frame_phonemes if s.frame_phonemes is not None else np.full(s.frames, -1)
            for t in range(s.frames):
                rows.append([s.cuer_id, int(pids[t])] + out.v_lin.data[b, t].tolist())
    header = "cuer_id,phoneme_id," + ",".join(f"v{i}" for i in range(d))
    with Path(destination).open("w") as fh:
        fh.write(header + "\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]}," + ",".join(repr(float(v)) for v in r[2:]) + "\n")
    return len(rows)
