"""FedCSR vs FedAvg on a mid-size synthetic setting, printing CER per round.

    python demos/quick_federation.py [config.ini]      # about 30 s on one core
"""
import sys
from pathlib import Path

from fedcsr.config import load
from fedcsr.experiment import train_run

cfg = load(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).with_name("demo.ini"))
for method in ("fedcsr", "fedavg"):
    res = train_run(cfg.replace("federation", method=method), seed=0)
    curve = " ".join(f"{m.cer:.2f}" for m in res.rounds)
    print(f"{method:>7}: CER {res.initial_cer:.3f} -> {res.final_cer:.3f} | per round {curve}")
