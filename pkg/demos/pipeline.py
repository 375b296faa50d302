"""Generate a small corpus, pre-train, fine-tune with 10% of labels, and compare
against fine-tuning the same architecture from scratch.

Runs in about a minute:  python demos/pipeline.py
"""

from userbert.data import SynthConfig, generate_synthetic
from userbert.downstream import FinetuneConfig
from userbert.experiments import DownstreamData, finetune_and_eval, scratch_params
from userbert.pretrain import TrainConfig, run_pretraining

synth = SynthConfig(n_users=600, vocab_size=400, n_topics=8, events_per_user=40)
logs, truth = generate_synthetic(synth)
data = DownstreamData.build(logs, truth, vocab_size=synth.vocab_size, n_topics=synth.n_topics, max_len=40)
print(f"{len(logs)} users, {len(data.train_rows)} for pre-training, {len(data.test_rows)} held out")

for mode in ("random", "medium_hard"):
    cfg = TrainConfig(vocab_size=400, max_len=40, m=200, u=60, steps=600, sampling_mode=mode)
    res = run_pretraining(data.pretrain_logs, cfg)
    first, last = res.metrics[0], res.metrics[-1]
    print(f"\n[{mode}] loss {first['loss_total']:.3f} -> {last['loss_total']:.3f}, "
          f"negative similarity mbp {last['mbp_neg_sim']:.3f} bsm {last['bsm_neg_sim']:.3f}")
    for lf in (0.1, 1.0):
        ft = FinetuneConfig(label_fraction=lf)
        pre = finetune_and_eval(res.params, data, ft).auc
        scratch = finetune_and_eval(scratch_params(cfg), data, ft).auc
        print(f"  label fraction {lf:.1f}: pretrained AUC {pre:.4f}  scratch {scratch:.4f}  gap {pre - scratch:+.4f}")
