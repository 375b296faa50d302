"""Session-wide experiment cache and the acceptance summary printed at the end of a run.

Pre-training runs on the default corpus take about a minute each, and several
criteria share them (the seed-s default run serves criteria 4-7), so they are
computed once per session. Set ``USERBERT_TEST_CACHE`` to a directory to also
keep them on disk between sessions while iterating.
"""

import os
import pickle
import re
import time
from pathlib import Path

import pytest

from userbert.data import SynthConfig, generate_synthetic
from userbert.downstream import FinetuneConfig
from userbert.experiments import DownstreamData, finetune_and_eval, scratch_params
from userbert.pretrain import TrainConfig, run_pretraining

CRITERIA: dict[int, dict] = {}


class Lab:
    """Default synthetic corpus plus memoised pretrain / fine-tune / eval runs."""

    def __init__(self, disk=None):
        self.synth = SynthConfig()
        logs, truth = generate_synthetic(self.synth)
        base = TrainConfig()
        self.data = DownstreamData.build(logs, truth, vocab_size=self.synth.vocab_size,
                                         n_topics=self.synth.n_topics, max_len=base.max_len, split_seed=0)
        self.disk = Path(disk) if disk else None
        self._runs = {}
        self._evals = {}

    @staticmethod
    def train_config(seed=0, **overrides) -> TrainConfig:
        return TrainConfig(**{"seed": seed, **overrides})

    def pretrain(self, seed=0, **overrides):
        cfg = self.train_config(seed, **overrides)
        key = cfg.fingerprint()
        if key in self._runs:
            return self._runs[key]
        path = self.disk / f"run-{key}.pkl" if self.disk else None
        if path is not None and path.exists():
            res = pickle.loads(path.read_bytes())
        else:
            t0 = time.perf_counter()
            res = run_pretraining(self.data.pretrain_logs, cfg)
            res.wall = time.perf_counter() - t0
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_bytes(pickle.dumps(res))
        self._runs[key] = res
        return res

    def evaluate(self, init, seed=0, label_fraction=0.1, **pretrain_overrides):
        """AUC report after fine-tuning from ``init`` ("scratch" or "pretrained")."""
        key = (init, seed, label_fraction, tuple(sorted(pretrain_overrides.items())))
        if key not in self._evals:
            if init == "scratch":
                params = scratch_params(self.train_config(seed))
            else:
                params = self.pretrain(seed, **pretrain_overrides).params
            ft = FinetuneConfig(seed=seed, label_fraction=label_fraction)
            self._evals[key] = finetune_and_eval(params, self.data, ft)
        return self._evals[key]


@pytest.fixture(scope="session")
def lab():
    return Lab(os.environ.get("USERBERT_TEST_CACHE"))


@pytest.fixture
def criterion():
    """``criterion(n, passed, detail)`` records a measured outcome for the summary."""

    def record(n, passed, detail):
        CRITERIA.setdefault(n, {"checks": [], "outcomes": []})["checks"].append((bool(passed), detail))
        print(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")

    return record


_NODE = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")


def pytest_runtest_logreport(report):
    m = _NODE.search(report.nodeid)
    if not m or (report.when != "call" and not report.failed):
        return
    entry = CRITERIA.setdefault(int(m.group(1)), {"checks": [], "outcomes": []})
    entry["outcomes"].append(report.outcome)
    if report.failed and not any(not ok for ok, _ in entry["checks"]):
        last = str(report.longrepr).strip().splitlines()[-1][:200]
        entry["checks"].append((False, f"{report.nodeid.split('::')[-1]}: {last}"))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        e = CRITERIA[n]
        ok = all(c for c, _ in e["checks"]) and all(o == "passed" for o in e["outcomes"])
        detail = "; ".join(d for _, d in e["checks"])
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
