"""Round protocol: broadcast -> local training -> aggregation -> global training -> evaluation.

Server and clients only talk through :class:`Channel`, which carries
serialized bytes. Nothing but parameter vectors, a sample count and scalar
loss traces ever crosses it.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import detach, log_softmax
from .losses import client_objective, server_objective
from .metrics import RoundMetrics, cer, greedy_decode, wer
from .models import (ModelBundle, flat_slices, from_bytes, init_bundle,
                     is_norm_param, make_batch, serialize_params, deserialize_params,
                     to_bytes, visual_forward_batch, ModelConfig)
from .optim import AdamHyper, AdamState, adam_step

METHODS = ("fedcsr", "fedavg", "fedprox", "fedbn", "centralized")


@dataclass(frozen=True)
class RoundConfig:
    rounds: int = 30
    local_epochs: int = 1
    global_epochs: int = 10
    batch_size: int = 8
    global_batch_size: int = 0       # server minibatch; 0 reuses batch_size
    local_lr: float = 1e-3
    global_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 0.05
    alpha: float = 0.005
    beta: float = 0.005
    gamma: float = 0.5
    mu: float = 0.0
    method: str = "fedcsr"
    seed: int = 0
    global_training: str = "auto"    # auto | on | off
    decode_head: str = "mean"        # vis | lin | mean
    freeze_phi_locally: bool = False
    gamma_trains_phi: bool = True
    weighted_aggregation: bool = False

    def __post_init__(self):
        for k in ("rounds", "local_epochs", "global_epochs", "batch_size"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1, got {getattr(self, k)}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.global_batch_size < 0:
            raise ValueError("global_batch_size must be >= 0 (0 reuses batch_size)")
        if self.global_training not in ("auto", "on", "off"):
            raise ValueError("global_training must be auto, on or off")
        if self.decode_head not in ("vis", "lin", "mean"):
            raise ValueError("decode_head must be vis, lin or mean")
        for k in ("local_lr", "global_lr", "mu", "eps"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")

    @property
    def runs_global_training(self) -> bool:
        if self.method != "fedcsr" or self.global_training == "off":
            return False
        if self.global_training == "on":
            return True
        # with every distillation weight at zero nothing consumes the linguistic model
        return not (self.alpha == 0.0 and self.beta == 0.0 and self.gamma == 0.0)

    @property
    def server_batch_size(self) -> int:
        return self.global_batch_size or self.batch_size

    def local_hyper(self) -> AdamHyper:
        return AdamHyper(self.local_lr, self.beta1, self.beta2, self.eps)

    def global_hyper(self) -> AdamHyper:
        return AdamHyper(self.global_lr, self.beta1, self.beta2, self.eps)


# ----------------------------------------------------------------------------
# wire format: u32 header length | JSON header | little-endian float64 slots

def _pack(kind: str, meta: dict, slots: dict) -> bytes:
    header = dict(meta, kind=kind, slots=[[k, len(v) // 8] for k, v in slots.items()])
    hb = json.dumps(header, sort_keys=True).encode()
    return struct.pack("<I", len(hb)) + hb + b"".join(slots.values())


def _unpack(raw: bytes):
    (n,) = struct.unpack_from("<I", raw, 0)
    header = json.loads(raw[4:4 + n].decode())
    pos = 4 + n
    slots = {}
    for name, count in header.pop("slots"):
        slots[name] = raw[pos:pos + 8 * count]
        pos += 8 * count
    if pos != len(raw):
        raise ValueError("trailing bytes in message")
    return header.pop("kind"), header, slots


@dataclass(frozen=True)
class BroadcastMessage:
    round: int
    phi: bytes
    theta: bytes
    w: bytes

    def to_bytes(self) -> bytes:
        return _pack("broadcast", {"round": self.round}, {"phi": self.phi, "theta": self.theta, "w": self.w})

    @classmethod
    def from_bytes(cls, raw: bytes) -> "BroadcastMessage":
        kind, meta, slots = _unpack(raw)
        if kind != "broadcast":
            raise ValueError(f"expected broadcast message, got {kind}")
        return cls(meta["round"], slots["phi"], slots["theta"], slots["w"])


@dataclass(frozen=True)
class UpdateMessage:
    client_id: int
    w: bytes
    phi: bytes
    n_samples: int
    loss_trace: tuple = ()   # one {component: mean} dict per local epoch

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ValueError("update must report a positive sample count")

    def to_bytes(self) -> bytes:
        meta = {"client_id": self.client_id, "n_samples": self.n_samples,
                "loss_trace": [dict(e) for e in self.loss_trace]}
        return _pack("update", meta, {"w": self.w, "phi": self.phi})

    @classmethod
    def from_bytes(cls, raw: bytes) -> "UpdateMessage":
        kind, meta, slots = _unpack(raw)
        if kind != "update":
            raise ValueError(f"expected update message, got {kind}")
        return cls(meta["client_id"], slots["w"], slots["phi"], meta["n_samples"],
                   tuple(meta["loss_trace"]))


class Channel:
    """In-process message log; every payload is bytes."""

    def __init__(self):
        self.log: list = []   # (round, direction, peer, raw bytes)

    def send(self, round_idx: int, direction: str, peer: int, raw: bytes) -> bytes:
        if not isinstance(raw, (bytes, bytearray)):
            raise TypeError("channel only carries serialized bytes")
        self.log.append((round_idx, direction, peer, bytes(raw)))
        return bytes(raw)

    def count(self, round_idx=None, direction=None) -> int:
        return sum(1 for r, d, _, _ in self.log
                   if (round_idx is None or r == round_idx) and (direction is None or d == direction))


# ----------------------------------------------------------------------------
# state machines

def _trainable(bundle: ModelBundle, include_phi: bool) -> dict:
    params = {"w." + k: v for k, v in bundle.w.items()}
    if include_phi:
        params.update({"phi." + k: v for k, v in bundle.phi.items()})
    return params


class Client:
    def __init__(self, client_id: int, samples: list, model_config: ModelConfig, config: RoundConfig):
        if not samples:
            raise ValueError("a client needs at least one sample")
        self.client_id = client_id
        self.samples = list(samples)
        self.config = config
        self.bundle = init_bundle(model_config, config.seed)
        self.adam = AdamState()
        self.local_norm: dict | None = None
        self.steps = 0

    def install(self, msg: BroadcastMessage) -> None:
        deserialize_params(self.bundle, "phi", from_bytes(msg.phi))
        deserialize_params(self.bundle, "theta", from_bytes(msg.theta))
        deserialize_params(self.bundle, "w", from_bytes(msg.w))

    def local_train(self, msg: BroadcastMessage) -> UpdateMessage:
        cfg = self.config
        self.install(msg)
        fedbn = cfg.method == "fedbn"
        if fedbn and self.local_norm is not None:
            for k, arr in self.local_norm.items():
                self.bundle.w[k].data[...] = arr
        include_phi = not cfg.freeze_phi_locally
        params = _trainable(self.bundle, include_phi)
        w_ref = None
        if cfg.method == "fedprox":
            w_ref = {k: p.data.copy() for k, p in self.bundle.w.items()}
            w_ref.update({"phi." + k: p.data.copy() for k, p in self.bundle.phi.items()})
        alpha, gamma = (cfg.alpha, cfg.gamma) if cfg.method == "fedcsr" else (0.0, 0.0)
        hyper = cfg.local_hyper()
        trace = []
        n = len(self.samples)
        for epoch in range(cfg.local_epochs):
            rng = np.random.default_rng([cfg.seed, self.client_id, msg.round, epoch])
            order = rng.permutation(n)
            sums: dict = {}
            batches = 0
            for start in range(0, n, cfg.batch_size):
                chunk = [self.samples[i] for i in order[start:start + cfg.batch_size]]
                res = client_objective(chunk, self.bundle, alpha, gamma, method=cfg.method,
                                       mu=cfg.mu, w_ref=w_ref, gamma_trains_phi=cfg.gamma_trains_phi,
                                       freeze_phi=cfg.freeze_phi_locally)
                adam_step(params, res.grads, self.adam, hyper)
                self.steps += 1
                batches += 1
                for k, v in res.breakdown.components.items():
                    sums[k] = sums.get(k, 0.0) + v
                sums["total"] = sums.get("total", 0.0) + res.breakdown.total
            trace.append({k: v / batches for k, v in sums.items()})
        w_flat = serialize_params(self.bundle, "w")
        if fedbn:
            self.local_norm = {k: p.data.copy() for k, p in self.bundle.w.items() if is_norm_param(k)}
            # local normalisation never leaves the client: upload the broadcast values in those slots
            ref = from_bytes(msg.w)
            for k, sl in flat_slices(self.bundle, "w").items():
                if is_norm_param(k):
                    w_flat[sl] = ref[sl]
        return UpdateMessage(self.client_id, to_bytes(w_flat), to_bytes(serialize_params(self.bundle, "phi")),
                             n, tuple(trace))


def aggregate(updates: list, weighted: bool = False, keep_mask=None, previous=None):
    """Coordinate-wise mean of (w, phi) payloads in client-id order.

    Computed as first + mean(x_i - first), so N identical updates are an exact
    fixed point. ``keep_mask`` (bool over w) marks coordinates taken from
    ``previous`` instead of being averaged (FedBN normalisation layers).
    """
    if not updates:
        raise ValueError("aggregate needs at least one update")
    updates = sorted(updates, key=lambda u: u.client_id)
    ws = [from_bytes(u.w) for u in updates]
    phis = [from_bytes(u.phi) for u in updates]
    if len({w.size for w in ws}) != 1 or len({p.size for p in phis}) != 1:
        raise ValueError("length mismatch between update payloads")
    if weighted:
        wts = np.array([u.n_samples for u in updates], dtype=np.float64)
        wts = wts / wts.sum()
    else:
        wts = np.full(len(updates), 1.0 / len(updates))

    def mean(vecs):
        base = vecs[0]
        acc = np.zeros_like(base)
        for wt, v in zip(wts, vecs):
            acc += wt * (v - base) if weighted else (v - base)
        return base + (acc if weighted else acc / len(vecs))

    w_agg, phi_agg = mean(ws), mean(phis)
    if keep_mask is not None:
        w_agg = np.where(keep_mask, previous, w_agg)
    return w_agg, phi_agg


class Server:
    def __init__(self, bundle: ModelBundle, corpus: list, config: RoundConfig):
        self.bundle = bundle
        self.corpus = [tuple(s) for s in corpus]
        self.config = config
        self.adam = AdamState()
        self.round = 0
        norm = np.zeros(serialize_params(bundle, "w").size, dtype=bool)
        for k, sl in flat_slices(bundle, "w").items():
            if is_norm_param(k):
                norm[sl] = True
        self.norm_mask = norm

    def broadcast(self) -> BroadcastMessage:
        return BroadcastMessage(self.round, to_bytes(serialize_params(self.bundle, "phi")),
                                to_bytes(serialize_params(self.bundle, "theta")),
                                to_bytes(serialize_params(self.bundle, "w")))

    def aggregate(self, updates: list):
        fedbn = self.config.method == "fedbn"
        prev = serialize_params(self.bundle, "w") if fedbn else None
        w_agg, phi_agg = aggregate(updates, self.config.weighted_aggregation,
                                   self.norm_mask if fedbn else None, prev)
        deserialize_params(self.bundle, "w", w_agg)
        deserialize_params(self.bundle, "phi", phi_agg)
        return w_agg, phi_agg

    def global_train(self, epochs: int | None = None) -> dict:
        """tau epochs of Adam on (theta, phi) with the aggregated w as a fixed teacher."""
        cfg = self.config
        epochs = cfg.global_epochs if epochs is None else epochs
        params = {"theta." + k: v for k, v in self.bundle.theta.items()}
        params.update({"phi." + k: v for k, v in self.bundle.phi.items()})
        w_teacher = {k: p.data.copy() for k, p in self.bundle.w.items()}
        teacher = {k: detach(v) for k, v in w_teacher.items()}
        cb = None
        if not self.bundle.config.shared_embedding:
            cb = {k[len("codebook."):]: v for k, v in teacher.items() if k.startswith("codebook.")}
        hyper = cfg.global_hyper()
        n = len(self.corpus)
        trace = []
        for epoch in range(epochs):
            rng = np.random.default_rng([cfg.seed, 0x5EE, self.round, epoch])
            order = rng.permutation(n)
            sums, batches = {}, 0
            bs = cfg.server_batch_size
            for start in range(0, n, bs):
                chunk = [list(self.corpus[i]) for i in order[start:start + bs]]
                res = server_objective(chunk, self.bundle, teacher, cfg.beta, w_agg_codebook=cb)
                adam_step(params, res.grads, self.adam, hyper)
                batches += 1
                for k, v in res.breakdown.components.items():
                    sums[k] = sums.get(k, 0.0) + v
            trace.append({k: v / batches for k, v in sums.items()})
        return {"trace": trace, "teacher": w_teacher}


def decode_log_probs(out, decode_head: str):
    lv = log_softmax(out.logits_vis).data
    ll = log_softmax(out.logits_lin).data
    if decode_head == "vis":
        return lv
    if decode_head == "lin":
        return ll
    return 0.5 * (lv + ll)


def evaluate(bundle: ModelBundle, samples: list, decode_head: str = "mean", batch_size: int = 32):
    """Greedy-decode every sample; returns (cer, wer, predictions)."""
    preds = []
    cb = bundle.codebook_params()
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        batch = make_batch(chunk)
        lp = decode_log_probs(visual_forward_batch(batch, bundle.w, cb, bundle.config), decode_head)
        for b, T in enumerate(batch.frames):
            preds.append(greedy_decode(lp[b, :T], blank=bundle.config.blank))
    refs = [list(s.label) for s in samples]
    return cer(preds, refs), wer(preds, refs, [list(s.words) for s in samples]), preds


@dataclass
class Federation:
    server: Server
    clients: list
    test: list
    channel: Channel = field(default_factory=Channel)

    def run_round(self) -> RoundMetrics:
        cfg = self.server.config
        t0 = time.perf_counter()
        r = self.server.round
        raw = self.server.broadcast().to_bytes()
        updates = []
        for c in self.clients:
            msg = BroadcastMessage.from_bytes(self.channel.send(r, "down", c.client_id, raw))
            up = c.local_train(msg)
            updates.append(UpdateMessage.from_bytes(self.channel.send(r, "up", c.client_id, up.to_bytes())))
        self.server.aggregate(updates)
        losses = _mean_components([u.loss_trace[-1] for u in updates])
        if cfg.runs_global_training:
            info = self.server.global_train()
            last = info["trace"][-1]
            losses["ce_server"] = last.get("ce", 0.0)
            losses["kd_server"] = last.get("kd", 0.0)
        c, w, _ = evaluate(self.server.bundle, self.test, cfg.decode_head)
        self.server.round += 1
        return RoundMetrics(round=r + 1, method=cfg.method, seed=cfg.seed, cer=c, wer=w, losses=losses,
                            local_epochs=cfg.local_epochs, wall_s=time.perf_counter() - t0)


def _mean_components(entries):
    keys = sorted({k for e in entries for k in e})
    return {k: float(np.mean([e.get(k, 0.0) for e in entries])) for k in keys}


def build_federation(model_config: ModelConfig, config: RoundConfig, client_data: dict,
                     test: list, corpus: list) -> Federation:
    """Server bundle from the master seed; one client per entry of ``client_data``.

    The centralized method pools every client's samples into one pseudo-client.
    """
    bundle = init_bundle(model_config, config.seed)
    server = Server(bundle, corpus, config)
    if config.method == "centralized":
        pooled = [s for cid in sorted(client_data) for s in client_data[cid]]
        clients = [Client(0, pooled, model_config, config)]
    else:
        clients = [Client(cid, client_data[cid], model_config, config) for cid in sorted(client_data)]
    return Federation(server, clients, test)


def with_method(config: RoundConfig, **changes) -> RoundConfig:
    return replace(config, **changes)
