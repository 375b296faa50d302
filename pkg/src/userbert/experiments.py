"""End-to-end experiment plumbing: user split, pre-train, fine-tune, evaluate,
ablation grids and negative-selection dumps.

The user split and click labels depend only on the corpus (and a split seed),
so scratch and pre-trained runs of the same seed see identical labeled data.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import numkit as nk
from .data import BehaviorLog, LabeledSet, make_downstream_labels
from .downstream import EvalReport, FinetuneConfig, evaluate, finetune, label_subset, split_users
from .model import ModelParams, init_params
from .pretrain import (
    PretrainCorpus,
    TrainConfig,
    build_bsm_batch,
    build_mbp_batch,
    draw_bsm_rows,
    run_pretraining,
)
from .sampling import SamplingMode, refresh_behavior_pool, refresh_sequence_pool

log = logging.getLogger(__name__)

RESULTS_HEADER = "# userbert-ablate v1"
TIMING_HEADER = "# userbert-ablate-timing v1"
DUMP_HEADER = "# userbert-pool-dump v1"


@dataclass
class DownstreamData:
    """Held-out split plus click labels for every user of a corpus."""

    logs: list[BehaviorLog]
    train_rows: np.ndarray
    test_rows: np.ndarray
    labels: LabeledSet

    @classmethod
    def build(cls, logs: list[BehaviorLog], truth: dict, *, vocab_size: int, n_topics: int, max_len: int,
              test_fraction: float = 0.2, per_side: int = 5, split_seed: int = 0) -> "DownstreamData":
        train_rows, test_rows = split_users(len(logs), test_fraction, split_seed)
        labels = make_downstream_labels(logs, truth, nk.make_rng(split_seed, "labels"), vocab_size=vocab_size,
                                        n_topics=n_topics, per_side=per_side, max_len=max_len)
        return cls(logs, train_rows, test_rows, labels)

    @property
    def pretrain_logs(self) -> list[BehaviorLog]:
        """Pre-training never sees held-out users."""
        return [self.logs[i] for i in self.train_rows]

    def train_labels(self, fraction: float, seed: int) -> LabeledSet:
        return self.labels.subset(self.train_rows[label_subset(len(self.train_rows), fraction, seed)])

    @property
    def test_labels(self) -> LabeledSet:
        return self.labels.subset(self.test_rows)


def scratch_params(cfg: TrainConfig) -> ModelParams:
    """The initialization pre-training itself would start from."""
    return init_params(cfg.dims(), nk.make_rng(cfg.seed, "init"), cfg.init_scale)


def finetune_and_eval(params: ModelParams, data: DownstreamData, ft: FinetuneConfig, **report_kw) -> EvalReport:
    tuned, _ = finetune(params, data.train_labels(ft.label_fraction, ft.seed), ft)
    return evaluate(tuned, data.test_labels, **report_kw)


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

GRID_KEYS = {
    "m": int, "u": int, "interval": int, "K": int, "P": int, "steps": int, "seed": int,
    "mode": str, "tasks": str, "label_fraction": float,
}


def parse_grid(specs: Iterable[str]) -> dict[str, list]:
    """``["m=10,1000", "mode=random,medium_hard"]`` -> ordered grid dict."""
    grid: dict[str, list] = {}
    for spec in specs:
        key, sep, vals = spec.partition("=")
        key = key.strip()
        if not sep or key not in GRID_KEYS:
            raise nk.ConfigError(f"bad grid entry {spec!r}; keys are {sorted(GRID_KEYS)}")
        try:
            grid[key] = [GRID_KEYS[key](v) for v in vals.split(",") if v != ""]
        except ValueError:
            raise nk.ConfigError(f"bad value in grid entry {spec!r}") from None
        if not grid[key]:
            raise nk.ConfigError(f"grid entry {spec!r} has no values")
    return grid


def grid_cells(grid: dict[str, list]) -> list[dict]:
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def cell_key(cell: dict) -> str:
    return ",".join(f"{k}={cell[k]}" for k in sorted(cell))


def cell_configs(cell: dict, base_train: TrainConfig, base_ft: FinetuneConfig) -> tuple[TrainConfig, FinetuneConfig]:
    tr = dataclasses.asdict(base_train)
    ft = dataclasses.asdict(base_ft)
    for k, v in cell.items():
        if k == "mode":
            tr["sampling_mode"] = v
        elif k == "label_fraction":
            ft["label_fraction"] = v
        elif k == "seed":
            tr["seed"] = v
            ft["seed"] = v
        else:
            tr[k] = v
    train_cfg, ft_cfg = TrainConfig(**tr), FinetuneConfig(**ft)
    train_cfg.validate()
    ft_cfg.validate()
    return train_cfg, ft_cfg


def run_cell(cell: dict, data: DownstreamData, base_train: TrainConfig, base_ft: FinetuneConfig) -> tuple[dict, dict]:
    """One pretrain -> finetune -> eval run. Returns (result record, timing record)."""
    train_cfg, ft_cfg = cell_configs(cell, base_train, base_ft)
    res = run_pretraining(data.pretrain_logs, train_cfg)
    rep = finetune_and_eval(res.params, data, ft_cfg)

    def mean_of(field):
        vals = [r[field] for r in res.metrics if r[field] is not None]
        return float(np.mean(vals)) if vals else None

    record = {
        "cell": cell_key(cell),
        "params": cell,
        "config_fingerprint": train_cfg.fingerprint(),
        "auc": rep.auc,
        "ndcg_at_10": rep.ndcg_at_10,
        "ap": rep.ap,
        "n_examples": rep.n_examples,
        "mbp_neg_sim": mean_of("mbp_neg_sim"),
        "bsm_neg_sim": mean_of("bsm_neg_sim"),
        "final_loss": res.metrics[-1]["loss_total"] if res.metrics else None,
    }
    timing = {"cell": cell_key(cell), **res.timing}
    return record, timing


def read_done_cells(path) -> set[str]:
    p = Path(path)
    if not p.exists():
        return set()
    done = set()
    for line in p.read_text(encoding="utf-8").splitlines():
        if line and not line.startswith("#"):
            done.add(json.loads(line)["cell"])
    return done


def run_ablation(grid: dict[str, list], data: DownstreamData, base_train: TrainConfig, base_ft: FinetuneConfig,
                 out_path, *, progress=None) -> list[dict]:
    """Run every cell not already present in ``out_path``; append one line per finished cell.

    Per-step timings go to ``<out_path>.timing`` so the results file itself
    stays byte-reproducible.
    """
    cells = grid_cells(grid)
    for cell in cells:  # validate the whole grid before spending any compute
        cell_configs(cell, base_train, base_ft)
    out_path = Path(out_path)
    timing_path = out_path.with_name(out_path.name + ".timing")
    done = read_done_cells(out_path)
    if not out_path.exists():
        out_path.write_text(RESULTS_HEADER + "\n", encoding="utf-8")
    if not timing_path.exists():
        timing_path.write_text(TIMING_HEADER + "\n", encoding="utf-8")
    new = []
    for cell in cells:
        key = cell_key(cell)
        if key in done:
            log.info("skipping finished cell %s", key)
            continue
        record, timing = run_cell(cell, data, base_train, base_ft)
        with open(out_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        with open(timing_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(timing, sort_keys=True) + "\n")
        done.add(key)
        new.append(record)
        if progress is not None:
            progress(record, timing)
    return new


# ---------------------------------------------------------------------------
# Negative-selection dump
# ---------------------------------------------------------------------------


def inspect_pool(params: ModelParams, corpus: PretrainCorpus, cfg: TrainConfig, n_steps: int) -> list[dict]:
    """Replay ``n_steps`` of batch construction against fixed ``params``.

    Nothing is updated. Returns one record per selected negative.
    """
    cfg.validate()
    rng = nk.make_rng(cfg.seed, "train")
    mode = SamplingMode(cfg.sampling_mode)
    emb = params["id_embedding"]
    records = []
    seq_pool = schedule = None
    for step in range(1, n_steps + 1):
        pool = refresh_behavior_pool(rng, cfg.vocab_size, cfg.m, mode)
        mbp = build_mbp_batch(corpus, cfg, pool, emb, rng)
        targets = mbp.true_ids
        neg_mask = np.arange(cfg.K + 1)[None, :] != mbp.labels[:, None]
        negs = mbp.candidates[neg_mask].reshape(len(targets), cfg.K)
        for slot in range(len(targets)):
            for j in range(cfg.K):
                records.append({
                    "step": step, "task": "mbp", "slot": slot,
                    "positive": int(targets[slot]), "negative": int(negs[slot, j]),
                    "score": float(mbp.neg_scores[slot, j]),
                })
        if seq_pool is None or seq_pool.due(step):
            seq_pool = refresh_sequence_pool(
                step, corpus.bsm_keys, [corpus.user_ids[k] for k in corpus.bsm_keys],
                corpus.b_ids, corpus.b_len, params, cfg.u, rng, cfg.interval, mode,
            )
            schedule = draw_bsm_rows(corpus, cfg, rng, min(cfg.interval, n_steps - step + 1))
        bsm = build_bsm_batch(corpus, cfg, seq_pool, rng, schedule[step - seq_pool.snapshot_step])
        for pair in range(bsm.n_pairs):
            for j in range(cfg.P):
                records.append({
                    "step": step, "task": "bsm", "slot": pair,
                    "positive": corpus.user_ids[int(bsm.a_keys[pair])],
                    "negative": corpus.user_ids[int(bsm.neg_keys[pair, j])],
                    "score": float(bsm.neg_scores[pair, j]),
                })
    return records
