"""Linguistic model (shared embedding + Bi-LSTM seq2seq) and the CMML-lite visual model.

Parameters live in three ordered dicts on a :class:`ModelBundle`:

* ``phi``   shared embedding: ``emb`` [V, d], ``proj.W`` [d, d], ``proj.b`` [d]
* ``theta`` Bi-LSTM encoder/decoder, feature projection, output head
* ``w``     visual front-ends, fusion, attention blocks, codebook
  cross-attention, visual and linguistic heads

Insertion order of each dict is the serialization order (see README).
Output heads are V+1 wide; class V is the CTC blank.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (bilstm, dense, affine_norm, glorot, key_mask_bias,
                     positional_encoding, self_attention)

STREAMS = ("lip", "shape", "pos")
PARTITIONS = ("phi", "theta", "w")


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 40
    d: int = 16
    hidden: int = 32
    lip_dim: int = 8
    shape_dim: int = 8
    pos_dim: int = 2
    enc_layers: int = 2
    dec_layers: int = 4
    attn_blocks: int = 2
    ffn_mult: int = 2
    shared_embedding: bool = True
    residual: bool = True  # skip connections around same-width Bi-LSTM layers
    emb_init: str = "glorot"  # glorot | normal (unit Gaussian rows)

    def __post_init__(self):
        for k, v in asdict(self).items():
            if isinstance(v, int) and not isinstance(v, bool) and v <= 0:
                raise ValueError(f"model dimension {k} must be positive, got {v}")
        if self.emb_init not in ("glorot", "normal"):
            raise ValueError(f"emb_init must be glorot or normal, got {self.emb_init!r}")

    @property
    def n_classes(self) -> int:
        return self.vocab + 1

    @property
    def blank(self) -> int:
        return self.vocab

    def stream_dims(self):
        return {"lip": self.lip_dim, "shape": self.shape_dim, "pos": self.pos_dim}


def _param_specs(cfg: ModelConfig):
    """(partition, name, shape, init) in canonical order.

    init is one of 'glorot', 'normal' (unit Gaussian), 'zeros', 'ones'.
    """
    V, d, h, C = cfg.vocab, cfg.d, cfg.hidden, cfg.n_classes
    specs = [
        ("phi", "emb", (V, d), cfg.emb_init),
        ("phi", "proj.W", (d, d), "glorot"),
        ("phi", "proj.b", (d,), "zeros"),
    ]
    for l in range(cfg.enc_layers):
        width = d if l == 0 else 2 * h
        for direction in ("fwd", "bwd"):
            specs += [("theta", f"enc{l}.{direction}.W", (width + h, 4 * h), "glorot"),
                      ("theta", f"enc{l}.{direction}.b", (4 * h,), "zeros")]
    for l in range(cfg.dec_layers):
        for direction in ("fwd", "bwd"):
            specs += [("theta", f"dec{l}.{direction}.W", (3 * h, 4 * h), "glorot"),
                      ("theta", f"dec{l}.{direction}.b", (4 * h,), "zeros")]
    specs += [("theta", "zproj.W", (2 * h, d), "glorot"), ("theta", "zproj.b", (d,), "zeros"),
              ("theta", "head.W", (d, C), "glorot"), ("theta", "head.b", (C,), "zeros")]

    for s, width in cfg.stream_dims().items():
        specs += [("w", f"{s}.l1.W", (width, d), "glorot"), ("w", f"{s}.l1.b", (d,), "zeros"),
                  ("w", f"{s}.norm.gain", (d,), "ones"), ("w", f"{s}.norm.shift", (d,), "zeros"),
                  ("w", f"{s}.l2.W", (d, d), "glorot"), ("w", f"{s}.l2.b", (d,), "zeros")]
    specs += [("w", "fuse.W", (3 * d, d), "glorot"), ("w", "fuse.b", (d,), "zeros")]
    f = cfg.ffn_mult * d
    for j in range(cfg.attn_blocks):
        for lin in ("q", "k", "v", "o"):
            specs += [("w", f"att{j}.{lin}.W", (d, d), "glorot"), ("w", f"att{j}.{lin}.b", (d,), "zeros")]
        specs += [("w", f"att{j}.ff1.W", (d, f), "glorot"), ("w", f"att{j}.ff1.b", (f,), "zeros"),
                  ("w", f"att{j}.ff2.W", (f, d), "glorot"), ("w", f"att{j}.ff2.b", (d,), "zeros")]
    specs += [("w", "cross.q.W", (d, d), "glorot"), ("w", "cross.q.b", (d,), "zeros"),
              ("w", "cross.k.W", (d, d), "glorot"), ("w", "cross.k.b", (d,), "zeros"),
              ("w", "vis_head.W", (d, C), "glorot"), ("w", "vis_head.b", (C,), "zeros"),
              ("w", "lin_head.W", (d, C), "glorot"), ("w", "lin_head.b", (C,), "zeros")]
    return specs


NORM_SUFFIXES = (".norm.gain", ".norm.shift")


def is_norm_param(name: str) -> bool:
    return name.endswith(NORM_SUFFIXES)


@dataclass
class ModelBundle:
    config: ModelConfig
    seed: int
    phi: dict = field(default_factory=dict)
    theta: dict = field(default_factory=dict)
    w: dict = field(default_factory=dict)

    def partition(self, name: str) -> dict:
        if name not in PARTITIONS:
            raise ValueError(f"unknown partition {name!r}")
        return getattr(self, name)

    def codebook_params(self) -> dict:
        """The (emb, proj.W, proj.b) triple the visual model projects as its codebook."""
        return self.phi if self.config.shared_embedding else {
            k[len("codebook."):]: v for k, v in self.w.items() if k.startswith("codebook.")}

    def copy(self) -> "ModelBundle":
        out = ModelBundle(self.config, self.seed)
        for part in PARTITIONS:
            setattr(out, part, {k: ad.parameter(p.data.copy(), name=k)
                                for k, p in self.partition(part).items()})
        return out


def init_bundle(config: ModelConfig, seed: int) -> ModelBundle:
    """Glorot-uniform weights (embedding per ``emb_init``), zero biases, unit norm gains; a pure function of seed."""
    rng = np.random.default_rng(seed)
    bundle = ModelBundle(config, seed)
    for part, name, shape, init in _param_specs(config):
        if init == "glorot":
            arr = glorot(rng, shape[0], shape[1], shape)
        elif init == "normal":
            arr = rng.standard_normal(shape)
        elif init == "zeros":
            arr = np.zeros(shape)
        else:
            arr = np.ones(shape)
        bundle.partition(part)[name] = ad.parameter(arr, name=name)
    if not config.shared_embedding:
        # unshared ablation: the visual model owns a private copy of the codebook
        for name in ("emb", "proj.W", "proj.b"):
            bundle.w["codebook." + name] = ad.parameter(bundle.phi[name].data.copy(), name="codebook." + name)
    return bundle


# ----------------------------------------------------------------------------
# serialization

def partition_names(bundle: ModelBundle, partition: str) -> list:
    if partition == "all":
        return [(p, k) for p in PARTITIONS for k in bundle.partition(p)]
    return [(partition, k) for k in bundle.partition(partition)]


def serialize_params(bundle: ModelBundle, partition: str = "all") -> np.ndarray:
    parts = [bundle.partition(p)[k].data.ravel() for p, k in partition_names(bundle, partition)]
    return np.concatenate(parts).astype(np.float64) if parts else np.zeros(0)


def deserialize_params(bundle: ModelBundle, partition: str, flat) -> None:
    """Write a flat vector back into the bundle's parameters in place."""
    flat = np.asarray(flat, dtype=np.float64)
    names = partition_names(bundle, partition)
    total = sum(bundle.partition(p)[k].data.size for p, k in names)
    if flat.size != total:
        raise ValueError(f"length mismatch: expected {total} values for {partition!r}, got {flat.size}")
    pos = 0
    for p, k in names:
        t = bundle.partition(p)[k]
        n = t.data.size
        t.data[...] = flat[pos:pos + n].reshape(t.data.shape)
        pos += n


def flat_slices(bundle: ModelBundle, partition: str) -> dict:
    """name -> slice into the serialized vector of ``partition``."""
    out, pos = {}, 0
    for p, k in partition_names(bundle, partition):
        n = bundle.partition(p)[k].data.size
        out[k] = slice(pos, pos + n)
        pos += n
    return out


def to_bytes(flat: np.ndarray) -> bytes:
    return np.asarray(flat, dtype="<f8").tobytes()


def from_bytes(raw: bytes) -> np.ndarray:
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


# ----------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    """Padded minibatch of cued samples (streams [B, T, *], mask [B, T])."""
    lip: np.ndarray
    shape: np.ndarray
    pos: np.ndarray
    mask: np.ndarray
    frames: list
    labels: list

    @property
    def size(self):
        return len(self.frames)


def make_batch(samples) -> Batch:
    frames = [s.lip.shape[0] for s in samples]
    for s in samples:
        if not (s.lip.shape[0] == s.hand_shape.shape[0] == s.hand_pos.shape[0]):
            raise ValueError("lip, hand-shape and hand-position streams must share the frame count")
    T = max(frames)
    B = len(samples)

    def pad(attr):
        width = getattr(samples[0], attr).shape[1]
        out = np.zeros((B, T, width))
        for i, s in enumerate(samples):
            arr = getattr(s, attr)
            out[i, :arr.shape[0]] = arr
        return out

    mask = np.zeros((B, T))
    for i, n in enumerate(frames):
        mask[i, :n] = 1.0
    return Batch(pad("lip"), pad("hand_shape"), pad("hand_pos"), mask, frames,
                 [list(s.label) for s in samples])


def pad_ids(seqs, vocab):
    L = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), L), dtype=np.int64)
    mask = np.zeros((len(seqs), L))
    for i, s in enumerate(seqs):
        s = np.asarray(s, dtype=np.int64)
        if s.size == 0:
            raise ValueError("empty phoneme sequence")
        if s.min() < 0 or s.max() >= vocab:
            raise ValueError(f"phoneme id out of vocabulary [0, {vocab})")
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return ids, mask


def length_mask(lengths, T=None):
    T = max(lengths) if T is None else T
    m = np.zeros((len(lengths), T))
    for i, n in enumerate(lengths):
        m[i, :n] = 1.0
    return m


# ----------------------------------------------------------------------------
# forward passes

def _project_rows(rows: Tensor, p: dict) -> Tensor:
    return dense(ad.relu(rows), p["proj.W"], p["proj.b"])


def embed_text_batch(ids: np.ndarray, phi: dict) -> Tensor:
    """Projection(ReLU(Embedding(y))) for padded ids[B, L] -> [B, L, d]."""
    return _project_rows(ad.take_rows(phi["emb"], ids), phi)


def embed_text(y, phi: dict) -> Tensor:
    """z_txt [L, d] for one phoneme sequence."""
    y = np.asarray(y, dtype=np.int64)
    V = phi["emb"].data.shape[0]
    if y.size and (y.min() < 0 or y.max() >= V):
        raise ValueError(f"phoneme id out of vocabulary [0, {V})")
    return _project_rows(ad.take_rows(phi["emb"], y), phi)


def codebook(cb: dict) -> Tensor:
    """Projected codebook rows [V, d]."""
    return _project_rows(cb["emb"], cb)


def decoder_positions(lengths, out_lens) -> np.ndarray:
    """Encoder position floor(i * L / n) fed to decoder step i."""
    n_max = max(out_lens)
    idx = np.zeros((len(lengths), n_max), dtype=np.int64)
    for r, (L, n) in enumerate(zip(lengths, out_lens)):
        idx[r, :n] = (np.arange(n) * L) // n
    return idx


def linguistic_forward_batch(z_txt: Tensor, lengths, theta: dict, out_lens, cfg: ModelConfig):
    """Encoder over L rows, decoder unrolled to each row's requested length."""
    h = cfg.hidden
    mask = length_mask(lengths, z_txt.data.shape[1])
    x = z_txt
    for l in range(cfg.enc_layers):
        y = bilstm(x, mask, lengths,
                   (theta[f"enc{l}.fwd.W"], theta[f"enc{l}.fwd.b"]),
                   (theta[f"enc{l}.bwd.W"], theta[f"enc{l}.bwd.b"]))
        x = ad.add(x, y) if cfg.residual and l > 0 else y
    # decoder initial state: per-direction mean of encoder outputs (pads are zero)
    inv_len = np.repeat((1.0 / np.asarray(lengths, dtype=np.float64))[:, None], 2 * h, axis=1)
    summary = ad.mul(ad.sum(x, axis=1), inv_len)
    h0 = (ad.slice_last(summary, 0, h), ad.slice_last(summary, h, 2 * h))
    dec_mask = length_mask(out_lens)
    y = ad.gather_time(x, decoder_positions(lengths, out_lens))
    for l in range(cfg.dec_layers):
        out = bilstm(y, dec_mask, out_lens,
                     (theta[f"dec{l}.fwd.W"], theta[f"dec{l}.fwd.b"]),
                     (theta[f"dec{l}.bwd.W"], theta[f"dec{l}.bwd.b"]), h0=h0)
        y = ad.add(y, out) if cfg.residual else out
    z_lin = dense(y, theta["zproj.W"], theta["zproj.b"])
    logits = dense(z_lin, theta["head.W"], theta["head.b"])
    return z_lin, logits


def linguistic_forward(z_txt: Tensor, theta: dict, out_len: int, cfg: ModelConfig):
    """(z_lin [n, d], logits [n, V+1]) for a single z_txt [L, d]."""
    L = z_txt.data.shape[0]
    if L < 1 or out_len < 1:
        raise ValueError("linguistic_forward needs L >= 1 and out_len >= 1")
    d = z_txt.data.shape[1]
    z, logits = linguistic_forward_batch(ad.reshape(z_txt, (1, L, d)), [L], theta, [out_len], cfg)
    return ad.reshape(z, (out_len, -1)), ad.reshape(logits, (out_len, -1))


def _attention_stack(x: Tensor, mask: np.ndarray, w: dict, cfg: ModelConfig) -> Tensor:
    B, T, d = x.data.shape
    x = ad.add(x, np.broadcast_to(positional_encoding(T, d), (B, T, d)).copy())
    bias = key_mask_bias(mask, T)
    for j in range(cfg.attn_blocks):
        x = self_attention(x, bias, w, f"att{j}.")
    return x


def _codebook_attention(v_vis: Tensor, w: dict, cb: dict):
    C = codebook(cb)
    d = C.data.shape[1]
    q = dense(v_vis, w["cross.q.W"], w["cross.q.b"])
    k = dense(C, w["cross.k.W"], w["cross.k.b"])
    attn = ad.softmax(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d)))
    return ad.matmul(attn, C), attn


@dataclass
class VisualOutputs:
    v_vis: Tensor
    v_lin: Tensor
    logits_vis: Tensor
    logits_lin: Tensor
    attention: Tensor


def visual_forward_batch(batch: Batch, w: dict, cb: dict, cfg: ModelConfig) -> VisualOutputs:
    feats = []
    for s, arr in zip(STREAMS, (batch.lip, batch.shape, batch.pos)):
        hdn = dense(ad.constant(arr), w[f"{s}.l1.W"], w[f"{s}.l1.b"])
        hdn = ad.relu(affine_norm(hdn, w[f"{s}.norm.gain"], w[f"{s}.norm.shift"]))
        feats.append(dense(hdn, w[f"{s}.l2.W"], w[f"{s}.l2.b"]))
    fused = dense(ad.concat(feats, axis=-1), w["fuse.W"], w["fuse.b"])
    v_vis = _attention_stack(fused, batch.mask, w, cfg)
    v_lin, attn = _codebook_attention(v_vis, w, cb)
    return VisualOutputs(v_vis, v_lin,
                         dense(v_vis, w["vis_head.W"], w["vis_head.b"]),
                         dense(v_lin, w["lin_head.W"], w["lin_head.b"]),
                         attn)


def visual_forward(sample, w: dict, cb: dict, cfg: ModelConfig):
    """(v_vis, v_lin, logits_vis, logits_lin), each [T, *], for one sample."""
    out = visual_forward_batch(make_batch([sample]), w, cb, cfg)
    T = sample.lip.shape[0]
    return tuple(ad.reshape(t, (T, -1)) for t in (out.v_vis, out.v_lin, out.logits_vis, out.logits_lin))


def detached(params: dict) -> dict:
    return {k: ad.detach(v) for k, v in params.items()}


def teacher_text_forward_batch(ids: np.ndarray, lengths, w_agg: dict, phi: dict, cb: dict, cfg: ModelConfig):
    """Route text embeddings through the visual attention stack and codebook attention."""
    w_fixed = detached(w_agg)
    z_txt = embed_text_batch(ids, phi)
    mask = length_mask(lengths, ids.shape[1])
    v = _attention_stack(z_txt, mask, w_fixed, cfg)
    v_lin, _ = _codebook_attention(v, w_fixed, cb)
    return v_lin, dense(v_lin, w_fixed["lin_head.W"], w_fixed["lin_head.b"])


def teacher_text_forward(y, w_agg: dict, phi: dict, cfg: ModelConfig, cb: dict | None = None):
    """(v_lin_teacher [L, d], logits [L, V+1]) for one phoneme sequence; w_agg is never tracked."""
    ids, _ = pad_ids([y], phi["emb"].data.shape[0])
    L = len(y)
    v, logits = teacher_text_forward_batch(ids, [L], w_agg, phi, phi if cb is None else cb, cfg)
    return ad.reshape(v, (L, -1)), ad.reshape(logits, (L, -1))
