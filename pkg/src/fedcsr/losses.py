"""Training objectives: CTC (plus an enumeration oracle), cross-entropy, feature KD,
the server and client composite objectives, and the FedProx proximal term."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, record_op
from .models import (ModelBundle, detached, embed_text_batch, length_mask,
                     linguistic_forward_batch, make_batch, pad_ids,
                     teacher_text_forward_batch, visual_forward_batch)


class CTCInfeasibleError(ValueError):
    """The label cannot be emitted in the available number of frames."""


def ctc_min_frames(label) -> int:
    repeats = int(np.sum(np.asarray(label[1:]) == np.asarray(label[:-1]))) if len(label) > 1 else 0
    return len(label) + repeats


def _check_feasible(T, label):
    if len(label) < 1:
        raise ValueError("CTC label must be non-empty")
    need = ctc_min_frames(label)
    if T < need:
        raise CTCInfeasibleError(f"{T} frames cannot emit label of length {len(label)} "
                                 f"(needs {need} frames)")


def _extended(labels, blank):
    S = max(2 * len(l) + 1 for l in labels)
    ext = np.full((len(labels), S), blank, dtype=np.int64)
    skip = np.zeros((len(labels), S), dtype=bool)
    for b, l in enumerate(labels):
        ext[b, 1:2 * len(l):2] = l
        e = ext[b, :2 * len(l) + 1]
        skip[b, 2:2 * len(l) + 1] = (e[2:] != blank) & (e[2:] != e[:-2])
    return ext, skip


def _alpha(lp, frames, ext, skip, ext_len):
    """Log forward variables A[B, T, S] (emissions included), frozen after each row's end."""
    B, T, _ = lp.shape
    S = ext.shape[1]
    rows = np.arange(B)[:, None]
    valid_s = np.arange(S)[None, :] < np.asarray(ext_len)[:, None]
    emit = np.where(valid_s[:, None, :], lp[rows[:, :, None], np.arange(T)[None, :, None], ext[:, None, :]], -np.inf)
    A = np.full((B, T, S), -np.inf)
    a = np.full((B, S), -np.inf)
    a[:, 0] = emit[:, 0, 0]
    a[:, 1] = emit[:, 0, 1]
    A[:, 0] = a
    frames = np.asarray(frames)
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            s1 = np.concatenate([np.full((B, 1), -np.inf), a[:, :-1]], axis=1)
            s2 = np.concatenate([np.full((B, 2), -np.inf), a[:, :-2]], axis=1)
            s2 = np.where(skip, s2, -np.inf)
            new = np.logaddexp(np.logaddexp(a, s1), s2) + emit[:, t]
            a = np.where((t < frames)[:, None], new, a)
            A[:, t] = a
    return A, emit


def _ctc_forward_backward(lp, frames, labels, blank):
    B, T, C = lp.shape
    ext, skip = _extended(labels, blank)
    ext_len = [2 * len(l) + 1 for l in labels]
    A, emit = _alpha(lp, frames, ext, skip, ext_len)
    rows = np.arange(B)
    last = np.array(frames) - 1
    S_last = np.array(ext_len) - 1
    logp = np.logaddexp(A[rows, last, S_last], A[rows, last, S_last - 1])

    # beta = alpha of the within-length reversed problem
    S = ext.shape[1]
    t_rev = np.tile(np.arange(T), (B, 1))
    s_rev = np.tile(np.arange(S), (B, 1))
    for b in range(B):
        t_rev[b, :frames[b]] = np.arange(frames[b] - 1, -1, -1)
        s_rev[b, :ext_len[b]] = np.arange(ext_len[b] - 1, -1, -1)
    lp_rev = lp[rows[:, None], t_rev]
    ext_r = ext[rows[:, None], s_rev]
    skip_r = np.zeros_like(skip)
    for b, l in enumerate(labels):
        e = ext_r[b, :ext_len[b]]
        skip_r[b, 2:ext_len[b]] = (e[2:] != blank) & (e[2:] != e[:-2])
    Ar, _ = _alpha(lp_rev, frames, ext_r, skip_r, ext_len)
    Bt = Ar[rows[:, None, None], t_rev[:, :, None], s_rev[:, None, :]]

    with np.errstate(invalid="ignore"):
        log_occ = A + Bt - emit - logp[:, None, None]
    occ = np.where(np.isfinite(log_occ), np.exp(log_occ), 0.0)
    occ *= length_mask(frames, T)[:, :, None]
    post = np.zeros((B, T, C))
    np.add.at(post, (rows[:, None, None], np.arange(T)[None, :, None],
                     np.broadcast_to(ext[:, None, :], (B, T, S))), occ)
    return -logp, post


def ctc_loss_batch(log_probs: Tensor, frames, labels, blank: int) -> Tensor:
    """Per-row CTC negative log-likelihoods [B] for padded log_probs[B, T, C].

    Inputs are treated as free log-scores; the gradient w.r.t. log_probs[b, t, k]
    is minus the posterior occupancy of class k at frame t.
    """
    for n, l in zip(frames, labels):
        _check_feasible(n, l)
    lp = log_probs.data
    nll, post = _ctc_forward_backward(lp, list(frames), [list(l) for l in labels], blank)
    return record_op("ctc", nll, (log_probs,), lambda g, n: (-g[:, None, None] * post,))


def ctc_loss(log_probs: Tensor, label, blank: int | None = None) -> Tensor:
    """CTC loss for one sequence log_probs[T, V+1]; blank defaults to the last class."""
    T, C = log_probs.data.shape
    blank = C - 1 if blank is None else blank
    lp3 = ad.reshape(log_probs, (1, T, C))
    return ctc_loss_batch(lp3, [T], [list(label)], blank)


@lru_cache(maxsize=64)
def _paths_by_label(T: int, C: int, blank: int):
    groups: dict[tuple, list] = {}
    for path in itertools.product(range(C), repeat=T):
        out, prev = [], None
        for k in path:
            if k != prev and k != blank:
                out.append(k)
            prev = k
        groups.setdefault(tuple(out), []).append(path)
    return {k: np.array(v, dtype=np.int64) for k, v in groups.items()}


def ctc_oracle(probs, label, blank: int | None = None) -> float:
    """Exact -log sum over every frame path that collapses to ``label`` (T <= 8)."""
    p = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    T, C = p.shape
    if T > 8:
        raise ValueError("ctc_oracle enumerates (V+1)^T paths; T must be <= 8")
    blank = C - 1 if blank is None else blank
    _check_feasible(T, list(label))
    paths = _paths_by_label(T, C, blank).get(tuple(label))
    if paths is None:
        return float("inf")
    total = np.prod(p[np.arange(T)[None, :], paths], axis=1).sum()
    return float(-np.log(total)) if total > 0 else float("inf")


def kd_loss(z: Tensor, v: Tensor) -> Tensor:
    """(1 / 2T) * sum_i ||z_i - v_i||^2 for z, v [T, d]."""
    if z.data.shape != v.data.shape:
        raise ValueError(f"kd_loss shape mismatch {z.data.shape} vs {v.data.shape}")
    diff = ad.sub(z, v)
    T = z.data.shape[0]
    return ad.scale(ad.sum(ad.mul(diff, diff)), 0.5 / T)


def kd_loss_batch(z: Tensor, v: Tensor, lengths) -> Tensor:
    """Batch mean of per-row KD over the first ``lengths[b]`` rows of z, v [B, n, d]."""
    if z.data.shape != v.data.shape:
        raise ValueError(f"kd_loss shape mismatch {z.data.shape} vs {v.data.shape}")
    B, n, d = z.data.shape
    weight = length_mask(lengths, n) / (2.0 * np.asarray(lengths, dtype=np.float64)[:, None] * B)
    diff = ad.sub(z, v)
    sq = ad.sum(ad.mul(diff, diff), axis=2)
    return ad.sum(ad.mul(sq, weight))


def frame_ce(logits: Tensor, targets) -> Tensor:
    """Mean over positions of -log_softmax(logits)[target] for logits [L, C]."""
    L, C = logits.data.shape
    if len(targets) != L:
        raise ValueError(f"frame_ce length mismatch: {L} logits rows vs {len(targets)} targets")
    return frame_ce_batch(ad.reshape(logits, (1, L, C)), [list(targets)])


def frame_ce_batch(logits: Tensor, targets) -> Tensor:
    B, L, C = logits.data.shape
    pick = np.zeros((B, L, C))
    for b, y in enumerate(targets):
        if len(y) > L:
            raise ValueError("frame_ce length mismatch")
        pick[b, np.arange(len(y)), y] = -1.0 / (len(y) * B)
    return ad.sum(ad.mul(ad.log_softmax(logits), pick))


def fedprox_penalty(w_flat, w_ref_flat, mu: float) -> Tensor:
    """(mu / 2) * ||w - w_ref||^2 on flat vectors."""
    w = w_flat if isinstance(w_flat, Tensor) else ad.tensor(w_flat)
    ref = np.asarray(w_ref_flat.data if isinstance(w_ref_flat, Tensor) else w_ref_flat, dtype=np.float64)
    if w.data.size != ref.size:
        raise ValueError(f"fedprox length mismatch {w.data.size} vs {ref.size}")
    diff = ad.sub(w, ref.reshape(w.data.shape))
    return ad.scale(ad.sum(ad.mul(diff, diff)), 0.5 * mu)


def _prox_over(params: dict, ref: dict, mu: float) -> Tensor:
    total = None
    for k, p in params.items():
        term = fedprox_penalty(p, ref[k], mu)
        total = term if total is None else ad.add(total, term)
    return total


# ----------------------------------------------------------------------------
# composite objectives

@dataclass
class LossBreakdown:
    total: float
    components: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def weighted_sum(self) -> float:
        return float(np.sum([self.weights.get(k, 1.0) * v for k, v in self.components.items()]))


@dataclass
class ObjectiveResult:
    breakdown: LossBreakdown
    grads: dict  # parameter name -> gradient array, keyed by partition-local names
    loss: Tensor


def _weighted(terms):
    """Sum of (weight, Tensor) pairs, skipping zero weights."""
    total = None
    for wt, t in terms:
        if wt == 0.0:
            continue
        t = t if wt == 1.0 else ad.scale(t, wt)
        total = t if total is None else ad.add(total, t)
    return total


def _collect(gmap, groups):
    grads = {}
    for prefix, params in groups:
        for k, p in params.items():
            g = gmap.get(p)
            if g is not None:
                grads[prefix + k] = g
    return grads


def server_objective(sentences, bundle: ModelBundle, w_agg: dict, beta: float, *,
                     w_agg_codebook: dict | None = None, teacher_phi: dict | None = None) -> ObjectiveResult:
    """Frame CE of the text autoencoder plus beta * KD to the visual teacher.

    Gradients are returned for theta ('theta.*') and phi ('phi.*') only. The
    teacher features are a constant target; ``teacher_phi`` pins the phi they
    are computed from (defaults to the current phi).
    """
    cfg = bundle.config
    ids, _ = pad_ids(sentences, cfg.vocab)
    lengths = [len(s) for s in sentences]
    t_phi = detached(bundle.phi if teacher_phi is None else teacher_phi)
    teacher_cb = detached(w_agg_codebook) if w_agg_codebook is not None else t_phi
    v_teacher = None
    if beta != 0.0:
        v_teacher, _ = teacher_text_forward_batch(ids, lengths, w_agg, t_phi, teacher_cb, cfg)
    with Tape() as tape:
        z_txt = embed_text_batch(ids, bundle.phi)
        z_lin, logits = linguistic_forward_batch(z_txt, lengths, bundle.theta, lengths, cfg)
        ce = frame_ce_batch(logits, sentences)
        comps = {"ce": ce}
        terms = [(1.0, ce)]
        if v_teacher is not None:
            kd = kd_loss_batch(z_lin, ad.detach(v_teacher), lengths)
            comps["kd"] = kd
            terms.append((beta, kd))
        loss = _weighted(terms)
        gmap = tape.backward(loss)
    grads = _collect(gmap, [("theta.", bundle.theta), ("phi.", bundle.phi)])
    weights = {"ce": 1.0, "kd": beta}
    return ObjectiveResult(LossBreakdown(loss.item(), {k: v.item() for k, v in comps.items()}, weights),
                           grads, loss)


def _offtape_linguistic(ids, lengths, theta, out_lens, phi, cfg):
    return linguistic_forward_batch(embed_text_batch(ids, phi), lengths, theta, out_lens, cfg)


def client_objective(samples, bundle: ModelBundle, alpha: float, gamma: float, *,
                     method: str = "fedcsr", mu: float = 0.0, w_ref: dict | None = None,
                     gamma_trains_phi: bool = True, freeze_phi: bool = False,
                     teacher_phi: dict | None = None) -> ObjectiveResult:
    """Two visual CTC terms, gamma * CTC on the frozen linguistic decoder, alpha * KD.

    theta is always frozen here. For fedavg/fedbn/fedprox/centralized the
    linguistic path is absent. FedProx adds (mu/2)||(w, phi) - ref||^2.
    The KD target z_lin is a constant; pass ``teacher_phi`` to compute it from
    a pinned phi instead of reusing the gamma-path forward.
    """
    cfg = bundle.config
    batch = make_batch(samples)
    labels = batch.labels
    frames = batch.frames
    use_ling = method == "fedcsr" and (alpha != 0.0 or gamma != 0.0)
    phi = detached(bundle.phi) if freeze_phi else bundle.phi
    cb = phi if cfg.shared_embedding else {k[len("codebook."):]: v for k, v in bundle.w.items()
                                           if k.startswith("codebook.")}
    theta = detached(bundle.theta)
    with Tape() as tape:
        out = visual_forward_batch(batch, bundle.w, cb, cfg)
        B = batch.size
        ctc_vis = ad.scale(ad.sum(ctc_loss_batch(ad.log_softmax(out.logits_vis), frames, labels, cfg.blank)), 1.0 / B)
        ctc_lin = ad.scale(ad.sum(ctc_loss_batch(ad.log_softmax(out.logits_lin), frames, labels, cfg.blank)), 1.0 / B)
        comps = {"ctc_vis": ctc_vis, "ctc_lin": ctc_lin}
        weights = {"ctc_vis": 1.0, "ctc_lin": 1.0}
        terms = [(1.0, ctc_vis), (1.0, ctc_lin)]
        if use_ling:
            ids, _ = pad_ids(labels, cfg.vocab)
            lengths = [len(l) for l in labels]
            text_phi = phi if gamma_trains_phi else detached(phi)
            z_txt = embed_text_batch(ids, text_phi)
            z_lin, logits_z = linguistic_forward_batch(z_txt, lengths, theta, frames, cfg)
            if gamma != 0.0:
                g_term = ad.scale(ad.sum(ctc_loss_batch(ad.log_softmax(logits_z), frames, labels, cfg.blank)), 1.0 / B)
                comps["gamma"] = g_term
                weights["gamma"] = gamma
                terms.append((gamma, g_term))
            if alpha != 0.0:
                target = z_lin
                if teacher_phi is not None:
                    target, _ = _offtape_linguistic(ids, lengths, theta, frames, detached(teacher_phi), cfg)
                kd = kd_loss_batch(out.v_lin, ad.detach(target), frames)
                comps["kd"] = kd
                weights["kd"] = alpha
                terms.append((alpha, kd))
        if method == "fedprox":
            if w_ref is None:
                raise ValueError("fedprox needs the broadcast reference parameters")
            trainable = dict(bundle.w)
            if not freeze_phi:
                trainable.update({"phi." + k: v for k, v in bundle.phi.items()})
            prox = _prox_over(trainable, w_ref, mu)
            comps["prox"] = prox
            weights["prox"] = 1.0
            terms.append((1.0, prox))
        loss = _weighted(terms)
        gmap = tape.backward(loss)
    groups = [("w.", bundle.w)] + ([] if freeze_phi else [("phi.", bundle.phi)])
    grads = _collect(gmap, groups)
    return ObjectiveResult(LossBreakdown(loss.item(), {k: v.item() for k, v in comps.items()}, weights),
                           grads, loss)
