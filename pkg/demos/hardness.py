"""How hard are the negatives each sampling mode picks?

Pre-trains briefly, then replays batch construction under each mode against
the same parameters and reports the mean cosine of the selected negatives.
Larger candidate pools give harder negatives; the global scan is the ceiling.

    python demos/hardness.py
"""

import numpy as np

from userbert.data import SynthConfig, generate_synthetic
from userbert.experiments import inspect_pool
from userbert.pretrain import PretrainCorpus, TrainConfig, run_pretraining

synth = SynthConfig(n_users=500, vocab_size=400, n_topics=8, events_per_user=40)
logs, _ = generate_synthetic(synth)
base = dict(vocab_size=400, max_len=40, u=60, steps=300)
res = run_pretraining(logs, TrainConfig(**base, m=200))
corpus = PretrainCorpus.build(logs, 40)

print(f"{'mode':16}{'m':>6}{'mbp':>9}{'bsm':>9}")
for mode, m in (("random", 200), ("medium_hard", 20), ("medium_hard", 200), ("global_hardest", 200)):
    recs = inspect_pool(res.params, corpus, TrainConfig(**base, m=m, sampling_mode=mode), n_steps=5)
    sims = {t: np.mean([r["score"] for r in recs if r["task"] == t]) for t in ("mbp", "bsm")}
    print(f"{mode:16}{m:>6}{sims['mbp']:9.4f}{sims['bsm']:9.4f}")
