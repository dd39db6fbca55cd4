"""CTC loss against brute-force path enumeration, plus the error-rate metrics.

    python demos/ctc_and_metrics.py
"""
import numpy as np

from fedcsr import autodiff as ad
from fedcsr.losses import ctc_loss, ctc_oracle
from fedcsr.metrics import cer, edit_distance, greedy_decode, wer

rng = np.random.default_rng(0)
T, C, label = 5, 4, (0, 2, 2)  # blank is the last class
logits = rng.normal(size=(T, C))
lp = ad.log_softmax(ad.tensor(logits))
fast = ctc_loss(lp, label).item()
slow = ctc_oracle(np.exp(lp.data), label)
print(f"CTC  forward-backward {fast:.12f}  enumeration {slow:.12f}  |diff| {abs(fast - slow):.2e}")

print("decode [a,a,blank,a,b,b] ->", greedy_decode(np.log(np.eye(3)[[0, 0, 2, 0, 1, 1]] + 1e-9)))
print("edit distance kitten/sitting =", edit_distance("kitten", "sitting"))
ref = [tuple(range(10))]
hyp = [tuple(range(9))]
print(f"CER with one deletion in ten: {cer(hyp, ref):.3f}")
print(f"WER of that deletion over 5 two-phoneme words: {wer(hyp, ref, [(2,) * 5]):.3f}")
