"""Central finite-difference gradient checks and the full check suite.

Relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
A coordinate whose one-sided differences disagree badly is a kink (e.g.
ReLU at 0) and is skipped rather than scored.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape

KINK_TOL = 1e-2


@dataclass
class FDResult:
    max_rel_error: float
    checked: int
    skipped: list = field(default_factory=list)


def _fd_coords(f_value, arr, coords, h, analytic):
    worst, checked, skipped = 0.0, 0, []
    for idx in coords:
        orig = arr[idx]
        arr[idx] = orig + h
        fp = f_value()
        arr[idx] = orig - h
        fm = f_value()
        arr[idx] = orig
        f0 = f_value()
        central = (fp - fm) / (2 * h)
        fwd, bwd = (fp - f0) / h, (f0 - fm) / h
        if abs(fwd - bwd) > KINK_TOL * max(1.0, abs(central)):
            skipped.append(idx)
            continue
        a = analytic[idx]
        worst = max(worst, abs(a - central) / max(1.0, abs(a)))
        checked += 1
    return worst, checked, skipped


def finite_difference_check(f, x, h: float = 1e-5, details: bool = False):
    """Compare the tape gradient of scalar ``f(x)`` with central differences.

    ``x`` is a Tensor or array; it is perturbed in place and restored.
    Returns the max relative error, or an :class:`FDResult` when ``details``.
    """
    p = x if isinstance(x, ad.Tensor) and x.requires_grad else ad.parameter(np.asarray(getattr(x, "data", x)))
    with Tape() as tape:
        loss = f(p)
        grads = tape.backward(loss)
    analytic = grads.grad_of(p)

    def value():
        return f(p).item()

    worst, checked, skipped = _fd_coords(value, p.data, list(np.ndindex(p.data.shape)), h, analytic)
    res = FDResult(worst, checked, skipped)
    return res if details else res.max_rel_error


def check_params(loss_fn, params: dict, h: float = 1e-5, max_coords: int | None = 12,
                 seed: int = 0, grads_fn=None) -> FDResult:
    """Finite-difference check of ``loss_fn()`` over every tensor in ``params``.

    ``loss_fn`` must rebuild its forward pass on each call. ``grads_fn``
    optionally supplies analytic gradients (name -> array) instead of taping
    ``loss_fn`` directly; names absent from it count as zero gradient.
    ``max_coords`` caps the coordinates sampled per tensor.
    """
    if grads_fn is None:
        with Tape() as tape:
            loss = loss_fn()
            gmap = tape.backward(loss)
        analytic = {k: gmap.grad_of(p) for k, p in params.items()}
    else:
        g = grads_fn()
        analytic = {k: g.get(k, np.zeros_like(p.data)) for k, p in params.items()}
    rng = np.random.default_rng(seed)

    def value():
        out = loss_fn()
        return out if isinstance(out, float) else out.item()

    worst, checked, skipped = 0.0, 0, []
    for k, p in params.items():
        coords = list(np.ndindex(p.data.shape))
        if max_coords is not None and len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        w, c, s = _fd_coords(value, p.data, coords, h, analytic[k])
        worst = max(worst, w)
        checked += c
        skipped += [(k, i) for i in s]
    return FDResult(worst, checked, skipped)


# ----------------------------------------------------------------------------
# the suite

@dataclass
class CheckReport:
    name: str
    max_rel_error: float
    passed: bool
    checked: int
    skipped: int
    seconds: float


def _tiny_setup(seed=0):
    from .data import build_inventory, generate_corpus, make_cuers, render_sample
    from .models import ModelConfig, init_bundle

    cfg = ModelConfig(vocab=4, d=6, hidden=4, lip_dim=3, shape_dim=3, enc_layers=2, dec_layers=2,
                      attn_blocks=1)
    bundle = init_bundle(cfg, seed)
    for part in (bundle.phi, bundle.theta, bundle.w):
        rng = np.random.default_rng(seed + 7)
        for p in part.values():
            # non-zero biases so every parameter has a generic gradient
            if p.data.ndim == 1:
                p.data[...] = rng.uniform(-0.5, 0.5, p.data.shape) + (1.0 if p.name and "gain" in p.name else 0.0)
    inv = build_inventory(seed, n_phonemes=4, n_lips=3, lip_dim=3, shape_dim=3)
    cuers = make_cuers(2, inv, seed, sigma=0.1, speed_range=(0.6, 0.6))
    sents = generate_corpus(2, length_range=(2, 3), word_range=(1, 2), seed=seed, n_phonemes=4, lexicon_size=3)
    samples = [render_sample(s, c, inv, seed + i) for i, (s, c) in enumerate(zip(sents, cuers))]
    return cfg, bundle, samples


def _op_checks(rng):
    u = lambda *s: rng.uniform(-2, 2, size=s)
    checks = {}
    A, B = u(3, 4), u(4, 2)
    checks["matmul"] = (lambda x: ad.sum(ad.matmul(x, ad.constant(B))), A)
    G3 = u(2, 3, 3)
    checks["matmul.batched"] = (lambda x: ad.sum(ad.mul(ad.matmul(x, ad.transpose(x)), G3)), u(2, 3, 4))
    M = u(3, 4)
    for op in ("add", "sub", "mul"):
        checks[f"elementwise.{op}"] = (lambda x, op=op: ad.sum(ad.mul(ad.elementwise(op, x, ad.constant(M)), M)), u(3, 4))
    checks["elementwise.bias"] = (lambda x: ad.sum(ad.mul(ad.add(ad.constant(M), x), M)), u(4))
    for op in ("tanh", "sigmoid", "relu", "exp"):
        checks[f"elementwise.{op}"] = (lambda x, op=op: ad.sum(ad.mul(ad.elementwise(op, x), M)), u(3, 4))
    checks["elementwise.log"] = (lambda x: ad.sum(ad.mul(ad.log(x), M)), rng.uniform(0.5, 2, (3, 4)))
    r4, r3 = u(4), u(3)
    checks["reduce.sum.axis"] = (lambda x: ad.sum(ad.mul(ad.sum(x, axis=0), r4)), u(3, 4))
    checks["reduce.mean.axis"] = (lambda x: ad.sum(ad.mul(ad.mean(x, axis=1), r3)), u(3, 4))
    checks["log_softmax"] = (lambda x: ad.sum(ad.mul(ad.log_softmax(x), M)), u(3, 4))
    checks["softmax"] = (lambda x: ad.sum(ad.mul(ad.softmax(x), M)), u(3, 4))
    M8, M2 = u(3, 8), u(3, 2)
    checks["concat"] = (lambda x: ad.sum(ad.mul(ad.concat([x, ad.tanh(x)], axis=-1), M8)), u(3, 4))
    checks["slice"] = (lambda x: ad.sum(ad.mul(ad.slice_last(x, 1, 3), M2)), u(3, 4))
    G4, G5 = u(2, 3, 4), u(2, 3, 4)
    checks["take_rows"] = (lambda x: ad.sum(ad.mul(ad.take_rows(x, np.array([[0, 2, 2], [1, 0, 3]])), G4)), u(4, 4))
    checks["gather_time"] = (lambda x: ad.sum(ad.mul(ad.gather_time(x, np.array([[2, 0, 0], [1, 1, 2]])), G5)), u(2, 3, 4))
    return checks


def default_checks(seed: int = 0) -> dict:
    """name -> zero-arg callable returning an FDResult."""
    from .layers import bilstm, lstm_scan, self_attention
    from .losses import (client_objective, ctc_loss, fedprox_penalty, frame_ce, kd_loss,
                         server_objective)
    from .models import (embed_text, length_mask, linguistic_forward, teacher_text_forward,
                         visual_forward)

    rng = np.random.default_rng(seed)
    checks = {}
    for name, (f, x) in _op_checks(rng).items():
        checks["op." + name] = (lambda f=f, x=x: finite_difference_check(f, x, details=True))

    # layers
    x = ad.parameter(rng.uniform(-2, 2, (2, 4, 3)))
    W = ad.parameter(rng.uniform(-1, 1, (3 + 2, 8)))
    b = ad.parameter(rng.uniform(-1, 1, 8))
    h0 = ad.parameter(rng.uniform(-1, 1, (2, 2)))
    mask = length_mask([4, 3], 4)
    G = rng.uniform(-1, 1, (2, 4, 2))
    checks["layer.lstm_scan"] = lambda: check_params(
        lambda: ad.sum(ad.mul(lstm_scan(x, mask, W, b, h0=h0), G)), {"x": x, "W": W, "b": b, "h0": h0}, max_coords=None)
    W2 = ad.parameter(rng.uniform(-1, 1, (3 + 2, 8)))
    b2 = ad.parameter(rng.uniform(-1, 1, 8))
    G2 = rng.uniform(-1, 1, (2, 4, 4))
    checks["layer.bilstm"] = lambda: check_params(
        lambda: ad.sum(ad.mul(bilstm(x, mask, [4, 3], (W, b), (W2, b2)), G2)),
        {"x": x, "W": W, "b": b, "W2": W2, "b2": b2}, max_coords=None)
    att = {f"a.{n}.{k}": ad.parameter(rng.uniform(-0.7, 0.7, shape))
           for n, (wi, wo) in {"q": (3, 3), "k": (3, 3), "v": (3, 3), "o": (3, 3), "ff1": (3, 6), "ff2": (6, 3)}.items()
           for k, shape in (("W", (wi, wo)), ("b", (wo,)))}
    xa = ad.parameter(rng.uniform(-2, 2, (2, 4, 3)))
    bias = np.where(mask > 0, 0.0, -1e9)[:, None, :].repeat(4, axis=1)
    Ga = rng.uniform(-1, 1, (2, 4, 3))
    checks["layer.self_attention"] = lambda: check_params(
        lambda: ad.sum(ad.mul(self_attention(xa, bias, att, "a."), Ga)), dict(att, x=xa), max_coords=None)

    # losses
    lp_in = rng.uniform(-2, 2, (5, 4))
    checks["loss.ctc"] = lambda: finite_difference_check(lambda z: ctc_loss(ad.log_softmax(z), [0, 1, 1]), lp_in, details=True)
    checks["loss.frame_ce"] = lambda: finite_difference_check(lambda z: frame_ce(z, [0, 2, 1]), rng.uniform(-2, 2, (3, 4)), details=True)
    vt = ad.constant(rng.uniform(-2, 2, (4, 3)))
    checks["loss.kd"] = lambda: finite_difference_check(lambda z: kd_loss(z, vt), rng.uniform(-2, 2, (4, 3)), details=True)
    prox_ref = rng.uniform(-2, 2, 6)
    checks["loss.fedprox"] = lambda: finite_difference_check(lambda z: fedprox_penalty(z, prox_ref, 0.7), rng.uniform(-2, 2, 6), details=True)

    # model paths on the tiny instance
    cfg, bundle, samples = _tiny_setup(seed)
    y = list(samples[0].label)
    phi, theta, w = bundle.phi, bundle.theta, bundle.w
    C = cfg.n_classes

    def weighted_sum(ts, shapes_seed):
        r = np.random.default_rng(shapes_seed)
        out = None
        for t in ts:
            term = ad.sum(ad.mul(t, r.uniform(-1, 1, t.data.shape)))
            out = term if out is None else ad.add(out, term)
        return out

    checks["model.embed_text"] = lambda: check_params(lambda: weighted_sum([embed_text(y, phi)], 1), phi)
    checks["model.linguistic_forward"] = lambda: check_params(
        lambda: weighted_sum(linguistic_forward(embed_text(y, phi), theta, 5, cfg), 2), dict(theta, **{"phi." + k: v for k, v in phi.items()}), max_coords=6)
    checks["model.visual_forward"] = lambda: check_params(
        lambda: weighted_sum(visual_forward(samples[0], w, phi, cfg), 3), dict(w, **{"phi." + k: v for k, v in phi.items()}), max_coords=6)
    checks["model.teacher_text_forward"] = lambda: check_params(
        lambda: weighted_sum(teacher_text_forward(y, w, phi, cfg), 4), phi)

    # teachers are constants: pin the phi they are computed from
    phi_pin = {k: ad.constant(p.data.copy()) for k, p in phi.items()}
    w_pin = {k: ad.constant(p.data.copy()) for k, p in w.items()}
    sents = [list(s.label) for s in samples]
    server_params = {f"{p}.{k}": v for p in ("theta", "phi") for k, v in bundle.partition(p).items()}
    client_params = {f"{p}.{k}": v for p in ("w", "phi") for k, v in bundle.partition(p).items()}

    def server():
        return server_objective(sents, bundle, w_pin, 0.7, teacher_phi=phi_pin)

    checks["objective.server"] = lambda: check_params(
        lambda: server().breakdown.total, server_params, max_coords=4, grads_fn=lambda: server().grads)

    ref = {k: p.data + 0.1 for k, p in w.items()}
    ref.update({"phi." + k: p.data - 0.1 for k, p in phi.items()})

    def client(method="fedcsr", mu=0.0):
        return client_objective(samples, bundle, 0.7, 0.5, method=method, mu=mu, w_ref=ref,
                                teacher_phi=phi_pin)

    checks["objective.client"] = lambda: check_params(
        lambda: client().breakdown.total, client_params, max_coords=4, grads_fn=lambda: client().grads)
    checks["objective.client_fedprox"] = lambda: check_params(
        lambda: client("fedprox", 0.3).breakdown.total, client_params, max_coords=4,
        grads_fn=lambda: client("fedprox", 0.3).grads)
    return checks


def run_suite(checks: dict | None = None, tol: float = 1e-4) -> list:
    checks = default_checks() if checks is None else checks
    out = []
    for name, fn in checks.items():
        t0 = time.perf_counter()
        res = fn()
        out.append(CheckReport(name, res.max_rel_error, res.max_rel_error <= tol and res.checked > 0,
                               res.checked, len(res.skipped), time.perf_counter() - t0))
    return out


def format_report(reports: list) -> str:
    lines = [f"{'check':36s} {'max_rel_err':>12s} {'coords':>7s} {'skip':>5s}  status"]
    for r in reports:
        lines.append(f"{r.name:36s} {r.max_rel_error:12.3e} {r.checked:7d} {r.skipped:5d}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
