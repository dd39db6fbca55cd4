"""Experiment drivers: multi-seed runs, the distillation-weight ablation and
leave-one-cuer-out evaluation, with CSV outputs rewritten whole on every call."""

from __future__ import annotations

import csv
import dataclasses
import math
import multiprocessing as mp
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import NumericError
from .config import AblationCell, ConfigError, ExperimentConfig, dumps
from .data import build_inventory, cuer_full_data, generate_corpus, make_cuers, make_split
from .federation import build_federation, evaluate
from .metrics import RoundMetrics

CSV_COLUMNS = ("round", "method", "local_epochs", "seed", "cer", "wer", "loss_ctc_vis", "loss_ctc_lin",
               "loss_gamma", "loss_kd", "loss_ce_server", "wall_s")
_LOSS_COLUMNS = {"loss_ctc_vis": "ctc_vis", "loss_ctc_lin": "ctc_lin", "loss_gamma": "gamma",
                 "loss_kd": "kd", "loss_ce_server": "ce_server"}


class TrainingDiverged(RuntimeError):
    """A non-finite value appeared during training."""


@dataclass
class RunResult:
    seed: int
    method: str
    initial_cer: float
    initial_wer: float
    rounds: list = field(default_factory=list)  # RoundMetrics, round = 1..T

    @property
    def final_cer(self) -> float:
        return self.rounds[-1].cer

    @property
    def final_wer(self) -> float:
        return self.rounds[-1].wer


def build_data(cfg: ExperimentConfig):
    """The synthetic split described by ``cfg.data`` (seeded by ``data_seed``, not the run seed)."""
    d, m = cfg.data, cfg.model
    inv = build_inventory(d.data_seed, n_phonemes=m.vocab, n_lips=d.n_lips, lip_dim=m.lip_dim,
                          shape_dim=m.shape_dim)
    cuers = make_cuers(d.cuers, inv, d.data_seed, offset_scale=d.offset_scale, sigma=d.sigma,
                       lag_set=d.lag_set, scale_range=(d.scale_min, d.scale_max),
                       speed_range=(d.speed_min, d.speed_max))
    corpus = generate_corpus(d.sentences, length_range=(d.min_len, d.max_len),
                             word_range=(d.min_word, d.max_word), seed=d.data_seed,
                             n_phonemes=m.vocab, lexicon_size=d.lexicon_size)
    return make_split(corpus, cuers, inv, ratio=d.split_ratio, seed=d.data_seed)


def _check_finite(metrics: RoundMetrics):
    for k, v in metrics.losses.items():
        if not math.isfinite(v):
            raise TrainingDiverged(f"round {metrics.round}: loss term {k!r} is {v}")


def train_run(cfg: ExperimentConfig, seed: int, client_data: dict | None = None, test: list | None = None,
              split=None, keep_federation: bool = False):
    """One federated run. Round-0 (untrained) metrics are kept apart from the T round rows."""
    split = build_data(cfg) if split is None else split
    client_data = split.train if client_data is None else client_data
    test = split.test if test is None else test
    rc = dataclasses.replace(cfg.federation, seed=seed)
    fed = build_federation(cfg.model, rc, client_data, test, split.corpus)
    c0, w0, _ = evaluate(fed.server.bundle, test, rc.decode_head)
    result = RunResult(seed, rc.method, c0, w0)
    for _ in range(rc.rounds):
        try:
            m = fed.run_round()
        except NumericError as exc:
            raise TrainingDiverged(f"round {fed.server.round + 1} ({rc.method}, seed {seed}): {exc}") from exc
        _check_finite(m)
        if not cfg.experiment.record_timing:
            m.wall_s = 0.0
        result.rounds.append(m)
    return (result, fed) if keep_federation else result


def _fmt(v) -> str:
    return repr(float(v))


def csv_rows(results) -> list:
    rows = []
    for res in results:
        for m in res.rounds:
            row = {"round": m.round, "method": m.method, "local_epochs": m.local_epochs, "seed": m.seed,
                   "cer": _fmt(m.cer), "wer": _fmt(m.wer), "wall_s": _fmt(m.wall_s)}
            for col, key in _LOSS_COLUMNS.items():
                row[col] = _fmt(m.losses[key]) if key in m.losses else ""
            rows.append(row)
    return rows


def write_csv(path, rows, columns) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _pool_map(fn, jobs, threads: int):
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with mp.get_context("spawn").Pool(min(threads, len(jobs))) as pool:
        return pool.map(fn, jobs)


def _run_job(job):
    cfg, seed = job
    return train_run(cfg, seed)


def run_experiment(cfg: ExperimentConfig, out_dir=None, seeds=None, threads: int = 1) -> list:
    """Run every (local-epoch setting, seed); write ``metrics.csv``, ``summary.csv``
    and ``config.ini`` to ``out_dir``."""
    seeds = tuple(cfg.experiment.seeds if seeds is None else seeds)
    grid = cfg.experiment.local_epochs_grid or (cfg.federation.local_epochs,)
    jobs = [(cfg.replace("federation", local_epochs=m), s) for m in grid for s in seeds]
    results = _pool_map(_run_job, jobs, threads)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(dumps(cfg))
        write_csv(out / "metrics.csv", csv_rows(results), CSV_COLUMNS)
        summary = [{"method": r.method, "local_epochs": r.rounds[-1].local_epochs, "seed": r.seed, "initial_cer": _fmt(r.initial_cer),
                    "initial_wer": _fmt(r.initial_wer), "final_cer": _fmt(r.final_cer),
                    "final_wer": _fmt(r.final_wer)} for r in results]
        summary.append({"method": cfg.federation.method, "local_epochs": "all", "seed": "mean",
                        "initial_cer": _fmt(np.mean([r.initial_cer for r in results])),
                        "initial_wer": _fmt(np.mean([r.initial_wer for r in results])),
                        "final_cer": _fmt(np.mean([r.final_cer for r in results])),
                        "final_wer": _fmt(np.mean([r.final_wer for r in results]))})
        write_csv(out / "summary.csv", summary, summary[0].keys())
    return results


# ----------------------------------------------------------------------------
# ablation

def cell_config(cfg: ExperimentConfig, cell: AblationCell) -> ExperimentConfig:
    cfg = cfg.replace("federation", method="fedcsr", alpha=cell.alpha, beta=cell.beta, gamma=cell.gamma)
    return cfg.replace("model", shared_embedding=cell.shared)


def ablate(cfg: ExperimentConfig, out_dir=None, seeds=None, threads: int = 1, cells=None,
           memo: dict | None = None) -> list:
    """Final CER/WER for every (cell, seed), sorted by (cell order, seed).

    ``memo`` maps (serialized config, seed) to a finished RunResult so callers
    can share runs that are pure functions of the same inputs.
    """
    cells = tuple(cfg.ablation if cells is None else cells)
    seeds = tuple(sorted(cfg.experiment.seeds if seeds is None else seeds))
    jobs = [(cell_config(cfg, c), s) for c in cells for s in seeds]
    todo = [j for j in jobs if memo is None or (dumps(j[0]), j[1]) not in memo]
    done = dict(zip([(dumps(c), s) for c, s in todo], _pool_map(_run_job, todo, threads)))
    if memo is not None:
        memo.update(done)
        done = {k: memo[k] for k in [(dumps(c), s) for c, s in jobs]}
    rows = []
    for (c_cfg, s), cell in zip(jobs, [c for c in cells for _ in seeds]):
        res = done[(dumps(c_cfg), s)]
        rows.append({"cell": cell.label, "alpha": cell.alpha, "beta": cell.beta, "gamma": cell.gamma,
                     "shared": cell.shared, "seed": s, "final_cer": res.final_cer, "final_wer": res.final_wer})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(dumps(cfg))
        write_csv(out / "ablation.csv", [dict(r, final_cer=_fmt(r["final_cer"]), final_wer=_fmt(r["final_wer"]),
                                             shared=str(r["shared"]).lower()) for r in rows],
                  ("cell", "alpha", "beta", "gamma", "shared", "seed", "final_cer", "final_wer"))
    return rows


# ----------------------------------------------------------------------------
# leave one cuer out

def _lodo_job(job):
    cfg, seed, held = job
    split = build_data(cfg)
    clients = {cid: s for cid, s in split.train.items() if cid != held}
    res = train_run(cfg, seed, client_data=clients, test=cuer_full_data(split, held), split=split)
    return {"held_out": held, "seed": seed, "cer": res.final_cer, "wer": res.final_wer}


def lodo(cfg: ExperimentConfig, out_dir=None, seeds=None, threads: int = 1) -> list:
    """Per held-out cuer (and seed) final CER/WER, then one averaged row."""
    if cfg.data.cuers < 2:
        raise ConfigError("leave-one-out needs at least two cuers")
    seeds = tuple(sorted(cfg.experiment.seeds if seeds is None else seeds))
    jobs = [(cfg, s, c) for s in seeds for c in range(cfg.data.cuers)]
    rows = _pool_map(_lodo_job, jobs, threads)
    rows.append({"held_out": "avg", "seed": "all", "cer": float(np.mean([r["cer"] for r in rows])),
                 "wer": float(np.mean([r["wer"] for r in rows]))})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(dumps(cfg))
        write_csv(out / "lodo.csv", [dict(r, cer=_fmt(r["cer"]), wer=_fmt(r["wer"])) for r in rows],
                  ("held_out", "seed", "cer", "wer"))
    return rows
