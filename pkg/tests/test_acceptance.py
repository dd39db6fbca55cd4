"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The directional criteria (5-7) train the full synthetic setting from
``configs/acceptance.ini`` and take most of the runtime (tens of minutes on a
single core). Set ``FEDCSR_THREADS`` to spread seeds over worker processes.
"""

import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from fedcsr import autodiff as ad
from fedcsr import cli
from fedcsr.config import AblationCell, load
from fedcsr.data import CuedSample
from fedcsr.experiment import ablate, build_data, lodo, run_experiment, train_run
from fedcsr.federation import BroadcastMessage, UpdateMessage, aggregate, build_federation
from fedcsr.gradcheck import run_suite
from fedcsr.losses import ctc_loss, ctc_min_frames, ctc_oracle
from fedcsr.metrics import cer, confusion_matrix, edit_distance, greedy_decode, wer
from fedcsr.models import from_bytes, serialize_params, to_bytes

ROOT = Path(__file__).resolve().parents[1]
ACCEPTANCE_INI = ROOT / "configs" / "acceptance.ini"
SMOKE_INI = ROOT / "configs" / "smoke.ini"
THREADS = int(os.environ.get("FEDCSR_THREADS", "1"))
BUDGET_S = 15 * 60


def _series(res):
    return [(m.cer, m.wer, m.losses) for m in res.rounds]


def _same_series(res, ref):
    """Bitwise-equal CER, WER and shared loss terms; terms only ``res`` reports
    (e.g. a proximal penalty at mu=0) must be exactly zero."""
    if len(res.rounds) != len(ref.rounds):
        return False
    for m, r in zip(res.rounds, ref.rounds):
        extra = set(m.losses) - set(r.losses)
        if (m.cer, m.wer) != (r.cer, r.wer) or set(r.losses) - set(m.losses):
            return False
        if any(m.losses[k] != r.losses[k] for k in r.losses) or any(m.losses[k] != 0.0 for k in extra):
            return False
    return True


# -- 1. CTC oracle ------------------------------------------------------------

def test_criterion_1_ctc_oracle(acceptance_report):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, n = 0.0, 0
    while n < 500:
        T, V, L = int(rng.integers(1, 7)), int(rng.integers(2, 5)), int(rng.integers(1, 4))
        label = [int(k) for k in rng.integers(0, V, L)]
        if ctc_min_frames(label) > T:
            continue
        lp = ad.log_softmax(ad.tensor(rng.normal(scale=2.0, size=(T, V + 1))))
        worst = max(worst, abs(ctc_loss(lp, label).item() - ctc_oracle(np.exp(lp.data), label)))
        n += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 30
    acceptance_report(1, "CTC oracle equivalence", ok, f"500 instances, max |diff| {worst:.2e} (<= 1e-10), "
                      f"{elapsed:.1f} s (< 30 s)")
    assert ok


# -- 2. gradient suite --------------------------------------------------------

def test_criterion_2_gradient_suite(acceptance_report):
    t0 = time.perf_counter()
    reports = run_suite(tol=1e-4)
    elapsed = time.perf_counter() - t0
    failed = [r.name for r in reports if not r.passed]
    worst = max(r.max_rel_error for r in reports)
    ok = not failed and elapsed < 60
    acceptance_report(2, "gradient suite", ok, f"{len(reports)} checks, max rel err {worst:.2e} (<= 1e-4), "
                      f"{elapsed:.1f} s (< 60 s){', failed: ' + ', '.join(failed) if failed else ''}")
    assert ok


# -- 3. protocol exactness ----------------------------------------------------

def test_criterion_3_protocol(acceptance_report):
    def upd(cid, w):
        return UpdateMessage(cid, to_bytes(np.asarray(w, float)), to_bytes(np.zeros(1)), 1)

    checks = {}
    w, _ = aggregate([upd(0, [1, 3]), upd(1, [3, 5])])
    checks["mean [1,3],[3,5] = [2,4]"] = w.tolist() == [2.0, 4.0]
    x = np.random.default_rng(0).normal(size=11)
    checks["identical updates fixed point"] = np.array_equal(aggregate([upd(i, x) for i in range(4)])[0], x)

    cfg = load(SMOKE_INI)
    split = build_data(cfg)
    fed = build_federation(cfg.model, cfg.federation, split.train, split.test, split.corpus)
    fed.run_round()
    fed.run_round()
    msg = fed.server.broadcast()
    phi_ok = True
    for c in fed.clients:
        c.install(msg)
        phi_ok &= np.array_equal(serialize_params(c.bundle, "phi"), serialize_params(fed.server.bundle, "phi"))
    checks["post-broadcast client phi == server phi"] = bool(phi_ok)

    sizes = {p: serialize_params(fed.server.bundle, p).size * 8 for p in ("phi", "theta", "w")}
    structural = True
    for _, direction, _, raw in fed.channel.log:
        m = (BroadcastMessage if direction == "down" else UpdateMessage).from_bytes(raw)
        slots = {"phi": m.phi, "w": m.w} if direction == "up" else {"phi": m.phi, "theta": m.theta, "w": m.w}
        structural &= all(len(v) == sizes[k] for k, v in slots.items())
        structural &= not any(isinstance(v, CuedSample) for v in vars(m).values())
        for s in (s for ss in split.train.values() for s in ss):
            structural &= s.lip.tobytes()[:64] not in raw
    checks["channel carries only parameter payloads"] = bool(structural)
    ok = all(checks.values())
    acceptance_report(3, "protocol exactness", ok, "; ".join(f"{k}: {'ok' if v else 'BROKEN'}"
                                                               for k, v in checks.items()))
    assert ok


# -- 8. metric unit suite -----------------------------------------------------

def test_criterion_8_metrics(acceptance_report):
    def frames(path, C=3):
        lp = np.full((len(path), C), -3.0)
        lp[np.arange(len(path)), path] = 0.0
        return lp

    ten = [list(range(10))]
    checks = {
        "all-blank -> []": greedy_decode(frames([2, 2, 2])) == [],
        "[a,a,-,a] -> [a,a]": greedy_decode(frames([0, 0, 2, 0])) == [0, 0],
        "[a,b,b] -> [a,b]": greedy_decode(frames([0, 1, 1])) == [0, 1],
        "ed(abc,abc)=0": edit_distance("abc", "abc") == 0,
        "ed(kitten,sitting)=3": edit_distance("kitten", "sitting") == 3,
        "ed('',ab)=2": edit_distance("", "ab") == 2,
        "CER perfect=0": cer(ten, ten) == 0.0,
        "CER 1 sub / 10 = 0.1": cer([[0, 1, 2, 3, 4, 5, 6, 7, 8, 0]], ten) == pytest.approx(0.1, abs=1e-15),
        "WER perfect=0": wer(ten, ten, [(2, 2, 2, 2, 2)]) == 0.0,
        "WER 1 sub in 2-phoneme word / 5 words = 0.2":
            wer([[0, 9, 2, 3, 4, 5, 6, 7, 8, 9]], ten, [(2, 2, 2, 2, 2)]) == pytest.approx(0.2, abs=1e-15),
        "confusion perfect diagonal": np.array_equal(confusion_matrix([[0, 1]], [[0, 1]], 2), np.diag([1, 1, 0])),
        "confusion ref a pred b": confusion_matrix([[1]], [[0]], 2)[0, 1] == 1,
    }
    ok = all(checks.values())
    bad = [k for k, v in checks.items() if not v]
    acceptance_report(8, "metric unit suite", ok, f"{sum(checks.values())}/{len(checks)} examples exact"
                      + (f"; broken: {bad}" if bad else ""))
    assert ok


# -- 9. determinism -----------------------------------------------------------

def test_criterion_9_determinism(acceptance_report, tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [cli.main(["run", "--config", str(SMOKE_INI), "--out", str(o)]) for o in outs]
    same = {f: (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in ("metrics.csv", "summary.csv")}
    ok = codes == [0, 0] and all(same.values())
    acceptance_report(9, "determinism", ok, f"exit codes {codes}; " + ", ".join(
        f"{f} {'identical' if v else 'DIFFERS'}" for f, v in same.items()))
    assert ok


# -- directional criteria on the full synthetic setting -----------------------

@pytest.fixture(scope="module")
def directional(tmp_path_factory):
    cfg = load(ACCEPTANCE_INI)
    out = tmp_path_factory.mktemp("acceptance")
    seeds = cfg.experiment.seeds
    t0 = time.perf_counter()
    runs = {m: run_experiment(cfg.replace("federation", method=m), out / m, seeds, THREADS)
            for m in ("fedcsr", "fedavg")}
    return {"cfg": cfg, "out": out, "runs": runs, "seconds": time.perf_counter() - t0, "memo": {}}


def test_criterion_5_fedcsr_beats_fedavg(directional, acceptance_report):
    runs = directional["runs"]
    csr = np.mean([r.final_cer for r in runs["fedcsr"]])
    avg = np.mean([r.final_cer for r in runs["fedavg"]])
    learn = [(r.seed, r.final_cer, r.rounds[0].cer) for r in runs["fedcsr"]]
    learns = all(f < 0.5 * r1 for _, f, r1 in learn)
    fast = directional["seconds"] <= BUDGET_S
    ok = csr < avg and learns and fast
    per_seed = ", ".join(f"seed {s}: {f:.3f} vs round-1 {r1:.3f}" for s, f, r1 in learn)
    acceptance_report(5, "FedCSR < FedAvg (3 seeds, 30 rounds)", ok,
                      f"mean final CER FedCSR {csr:.4f} vs FedAvg {avg:.4f}; final < 0.5 x round-1 ({per_seed}); "
                      f"{directional['seconds']:.0f} s with {THREADS} worker(s) (<= {BUDGET_S} s)")
    assert ok


def test_criterion_6_ablation(directional, acceptance_report):
    cfg = directional["cfg"]
    memo = directional["memo"]
    from fedcsr.config import dumps
    from fedcsr.experiment import cell_config

    best, zero = AblationCell(0.005, 0.005, 0.5), AblationCell(0.0, 0.0, 0.0)
    for r in directional["runs"]["fedcsr"]:  # the best cell is the FedCSR run of criterion 5
        memo[(dumps(cell_config(cfg, best)), r.seed)] = r
    rows = ablate(cfg, directional["out"] / "ablation", cells=(best, zero), memo=memo, threads=THREADS)
    mean = {c.label: np.mean([r["final_cer"] for r in rows if r["cell"] == c.label]) for c in (best, zero)}
    ok = mean[best.label] <= mean[zero.label]
    acceptance_report(6, "ablation best cell <= all-zero cell", ok,
                      f"mean final CER (0.005,0.005,0.5) {mean[best.label]:.4f} vs (0,0,0) {mean[zero.label]:.4f}")
    assert ok


def test_criterion_4_reductions(directional, acceptance_report):
    cfg = directional["cfg"]
    memo = directional["memo"]
    from fedcsr.config import dumps
    from fedcsr.experiment import cell_config

    fedavg = {r.seed: r for r in directional["runs"]["fedavg"]}
    zero_cfg = cell_config(cfg, AblationCell(0.0, 0.0, 0.0))
    zero = {s: memo.get((dumps(zero_cfg), s)) or train_run(zero_cfg, s) for s in cfg.experiment.seeds}
    csr_equal = all(_series(zero[s]) == _series(fedavg[s]) for s in fedavg)
    prox = train_run(cfg.replace("federation", method="fedprox", mu=0.0), 0)
    prox_equal = _same_series(prox, fedavg[0])
    ok = csr_equal and prox_equal
    acceptance_report(4, "reduction identities", ok,
                      f"FedProx(mu=0) == FedAvg bitwise (seed 0, {len(prox.rounds)} rounds; prox term 0.0): {prox_equal}; "
                      f"FedCSR(0,0,0) == FedAvg bitwise (seeds {list(fedavg)}): {csr_equal}")
    assert ok


def test_criterion_7_lodo(directional, acceptance_report):
    cfg = directional["cfg"].replace("federation", method="fedcsr")
    seed = 0
    rows = lodo(cfg, directional["out"] / "lodo", seeds=(seed,), threads=THREADS)
    held = rows[-1]["cer"]
    pooled = next(r.final_cer for r in directional["runs"]["fedcsr"] if r.seed == seed)
    ok = held >= pooled
    per_cuer = ", ".join(f"{r['cer']:.3f}" for r in rows[:-1])
    acceptance_report(7, "leave-one-cuer-out drop", ok,
                      f"mean held-out CER {held:.4f} ({per_cuer}) "
                      f">= pooled-test CER {pooled:.4f} (FedCSR, seed {seed})")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
