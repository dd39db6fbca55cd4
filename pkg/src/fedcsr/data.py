"""Synthetic multi-cuer cued-speech data.

Each of the 40 phonemes is a unique (hand shape, hand position) pair plus a
lip shape id. A cuer renders a sentence by holding each phoneme for
``round(3 * speed)`` frames; the hand streams lead the lips by ``hand_lag``
frames. Cuer appearance enters as per-stream offsets and a global feature
scale, so clients are Non-IID by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_SHAPES = 8
N_POSITIONS = 5
BASE_DURATION = 3


@dataclass(frozen=True)
class PhonemeInventory:
    shape_id: np.ndarray       # [V] in 1..8
    position_id: np.ndarray    # [V] in 1..5
    lip_id: np.ndarray         # [V] in 1..n_lips
    shape_protos: np.ndarray   # [8, d_g]
    position_protos: np.ndarray  # [5, 2]
    lip_protos: np.ndarray     # [n_lips, d_l]
    seed: int

    @property
    def size(self) -> int:
        return len(self.shape_id)


def _unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def build_inventory(seed: int = 0, n_phonemes: int = 40, n_lips: int = 10,
                    lip_dim: int = 8, shape_dim: int = 8) -> PhonemeInventory:
    if not 1 <= n_phonemes <= N_SHAPES * N_POSITIONS:
        raise ValueError(f"n_phonemes must be in [1, {N_SHAPES * N_POSITIONS}]")
    rng = np.random.default_rng([seed, 0xC5])
    combos = rng.permutation(N_SHAPES * N_POSITIONS)[:n_phonemes]
    shape_id = combos // N_POSITIONS + 1
    position_id = combos % N_POSITIONS + 1
    lip_id = rng.integers(1, n_lips + 1, size=n_phonemes)
    angle0 = rng.uniform(0, 2 * np.pi)
    angles = angle0 + 2 * np.pi * np.arange(N_POSITIONS) / N_POSITIONS
    pos = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return PhonemeInventory(shape_id, position_id, lip_id,
                            _unit_rows(rng, N_SHAPES, shape_dim), pos,
                            _unit_rows(rng, n_lips, lip_dim), seed)


@dataclass(frozen=True)
class CuerProfile:
    cuer_id: int
    lip_offset: np.ndarray
    shape_offset: np.ndarray
    pos_offset: np.ndarray
    scale: float = 1.0
    speed: float = 1.0
    hand_lag: int = 0
    sigma: float = 0.0

    def __post_init__(self):
        if self.hand_lag < 0:
            raise ValueError("hand_lag must be >= 0 (hands lead the lips)")


def make_cuers(n: int, inventory: PhonemeInventory, seed: int = 0, offset_scale: float = 0.3,
               sigma: float = 0.1, lag_set=(0, 1, 2), scale_range=(0.8, 1.2),
               speed_range=(0.8, 1.2)) -> list:
    out = []
    dl = inventory.lip_protos.shape[1]
    dg = inventory.shape_protos.shape[1]
    for k in range(n):
        rng = np.random.default_rng([seed, 0xCE, k])
        out.append(CuerProfile(
            cuer_id=k,
            lip_offset=offset_scale * rng.standard_normal(dl) / math.sqrt(dl),
            shape_offset=offset_scale * rng.standard_normal(dg) / math.sqrt(dg),
            pos_offset=offset_scale * rng.standard_normal(2) / math.sqrt(2),
            scale=float(rng.uniform(*scale_range)),
            speed=float(rng.uniform(*speed_range)),
            hand_lag=int(rng.choice(np.asarray(lag_set))),
            sigma=sigma,
        ))
    return out


@dataclass
class Sentence:
    label: tuple
    words: tuple  # word lengths, summing to len(label)


@dataclass
class CuedSample:
    lip: np.ndarray         # [T, d_l]
    hand_shape: np.ndarray  # [T, d_g]
    hand_pos: np.ndarray    # [T, 2]
    label: tuple
    words: tuple
    cuer_id: int
    frame_phonemes: np.ndarray = field(default=None)  # lip-aligned phoneme id per frame

    @property
    def frames(self) -> int:
        return self.lip.shape[0]


def generate_corpus(n: int, length_range=(4, 10), word_range=(1, 3), seed: int = 0,
                    n_phonemes: int = 40, lexicon_size: int = 24) -> list:
    """``n`` distinct sentences built from a small per-length word lexicon."""
    lo, hi = length_range
    wlo, whi = word_range
    if not (1 <= lo <= hi and 1 <= wlo <= whi):
        raise ValueError("invalid length or word-length range")
    rng = np.random.default_rng([seed, 0x5E])
    lexicon = {k: [tuple(int(p) for p in rng.integers(0, n_phonemes, size=k)) for _ in range(lexicon_size)]
               for k in range(wlo, whi + 1)}
    seen, out = set(), []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 1000 * n:
            raise RuntimeError("could not draw enough distinct sentences; widen the ranges")
        L = int(rng.integers(lo, hi + 1))
        words, label = [], []
        while len(label) < L:
            k = min(int(rng.integers(wlo, whi + 1)), L - len(label))
            # the last word may be truncated below wlo to hit L exactly
            word = lexicon[max(k, wlo)][int(rng.integers(lexicon_size))][:k]
            words.append(k)
            label.extend(word)
        label = tuple(label)
        if label in seen:
            continue
        seen.add(label)
        out.append(Sentence(label, tuple(words)))
    return out


def phoneme_durations(n_phonemes: int, cuer: CuerProfile, base: int = BASE_DURATION) -> list:
    dur = max(1, int(math.floor(base * cuer.speed + 0.5)))  # half-up rounding
    return [dur] * n_phonemes


def render_sample(sentence: Sentence, cuer: CuerProfile, inventory: PhonemeInventory,
                  seed: int = 0) -> CuedSample:
    label = np.asarray(sentence.label, dtype=np.int64)
    if label.size and (label.min() < 0 or label.max() >= inventory.size):
        raise ValueError("phoneme id outside the inventory")
    durs = phoneme_durations(len(label), cuer)
    lip_pid = np.repeat(label, durs)
    T = lip_pid.size
    hand_pid = lip_pid[np.minimum(np.arange(T) + cuer.hand_lag, T - 1)]
    rng = np.random.default_rng([seed, cuer.cuer_id])

    def stream(protos, ids, offset):
        clean = cuer.scale * protos[ids] + offset
        if cuer.sigma > 0:
            clean = clean + cuer.sigma * rng.standard_normal(clean.shape)
        return clean

    lip = stream(inventory.lip_protos, inventory.lip_id[lip_pid] - 1, cuer.lip_offset)
    shp = stream(inventory.shape_protos, inventory.shape_id[hand_pid] - 1, cuer.shape_offset)
    pos = stream(inventory.position_protos, inventory.position_id[hand_pid] - 1, cuer.pos_offset)
    return CuedSample(lip, shp, pos, tuple(int(x) for x in label), tuple(sentence.words),
                      cuer.cuer_id, lip_pid)


@dataclass
class DatasetSplit:
    train: dict            # client id -> list[CuedSample]
    test: list             # pooled held-out sentences rendered by every cuer
    corpus: list           # server text corpus: label sequences only
    train_sentences: list
    test_sentences: list


def _render_seed(seed, cuer_id, index, part):
    return int(np.random.SeedSequence([seed, cuer_id, index, part]).generate_state(1)[0])


def make_split(corpus: list, cuers: list, inventory: PhonemeInventory, ratio: float = 0.8,
               seed: int = 0) -> DatasetSplit:
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must be in (0, 1)")
    rng = np.random.default_rng([seed, 0x5B])
    order = rng.permutation(len(corpus))
    n_train = int(round(ratio * len(corpus)))
    train_s = [corpus[i] for i in sorted(order[:n_train])]
    test_s = [corpus[i] for i in sorted(order[n_train:])]
    train = {c.cuer_id: [render_sample(s, c, inventory, _render_seed(seed, c.cuer_id, i, 0))
                         for i, s in enumerate(train_s)] for c in cuers}
    test = [render_sample(s, c, inventory, _render_seed(seed, c.cuer_id, i, 1))
            for c in cuers for i, s in enumerate(test_s)]
    return DatasetSplit(train, test, [tuple(s.label) for s in train_s], train_s, test_s)


def cuer_full_data(split: DatasetSplit, cuer_id: int) -> list:
    """Every sample (train and test sentences) rendered by one cuer."""
    return list(split.train[cuer_id]) + [s for s in split.test if s.cuer_id == cuer_id]


def dump_client(samples: list, path) -> None:
    """One record per line: ``ids|word_lengths|T|lip|shape|pos`` with space-separated numbers.

    Streams are flattened row-major and printed with ``repr`` precision.
    """
    lines = ["# label_ids|word_lengths|frames|lip(T*d_l)|hand_shape(T*d_g)|hand_pos(T*2)"]
    for s in samples:
        fields = [" ".join(map(str, s.label)), " ".join(map(str, s.words)), str(s.frames)]
        fields += [" ".join(repr(float(v)) for v in arr.ravel()) for arr in (s.lip, s.hand_shape, s.hand_pos)]
        lines.append("|".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def load_client(path, cuer_id: int = -1) -> list:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        ids, words, T, lip, shp, pos = line.split("|")
        T = int(T)
        out.append(CuedSample(np.array(lip.split(), float).reshape(T, -1),
                              np.array(shp.split(), float).reshape(T, -1),
                              np.array(pos.split(), float).reshape(T, -1),
                              tuple(int(x) for x in ids.split()), tuple(int(x) for x in words.split()),
                              cuer_id))
    return out
