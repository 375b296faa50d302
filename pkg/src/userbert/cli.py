"""Command-line entry point: ``userbert <command> [flags]``.

Every setting is a flat key usable both in a JSON ``--config`` file and as a
``--flag`` (underscores become dashes). Precedence: flags > file > stored
checkpoint settings > defaults. Exit codes: 0 success, 1 IO / format error or
aborted run, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import numkit as nk
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, file_digest
from .data import LogFormatError, SynthConfig, generate_synthetic, load_logs, load_truth, save_logs, save_truth
from .downstream import FinetuneConfig, evaluate, finetune, params_hash
from .experiments import DUMP_HEADER, DownstreamData, inspect_pool, parse_grid, run_ablation, scratch_params
from .model import N_SPECIAL
from .pretrain import PretrainCorpus, TrainConfig, run_pretraining

log = logging.getLogger("userbert")

METRICS_HEADER = "# userbert-metrics v1"
FINETUNE_METRICS_HEADER = "# userbert-finetune-metrics v1"
EVAL_HEADER = "# userbert-eval v1"

SHAPE_KEYS = ("vocab_size", "hidden_dim", "query_dim", "heads", "max_len", "pooling")


@dataclass
class Key:
    type: type
    default: Any
    targets: list[tuple[str, str]]  # (section, dataclass field)


def _key_table() -> dict[str, Key]:
    renames = {
        ("ft", "steps"): "finetune_steps",
        ("ft", "batch_size"): "finetune_batch_size",
        ("ft", "test_fraction"): "holdout_fraction",
        ("train", "sampling_mode"): "mode",
    }
    table: dict[str, Key] = {}
    for section, cls in (("synth", SynthConfig), ("train", TrainConfig), ("ft", FinetuneConfig)):
        for f in dataclasses.fields(cls):
            name = renames.get((section, f.name), f.name)
            default = getattr(cls(), f.name)
            if name in table:
                if table[name].default != default:
                    raise AssertionError(f"shared key {name} has conflicting defaults")
                table[name].targets.append((section, f.name))
            else:
                table[name] = Key(type(default), default, [(section, f.name)])
    table["split_seed"] = Key(int, 0, [])
    table["max_behaviors"] = Key(int, 100, [])
    return table


KEYS = _key_table()


def _coerce(name: str, value):
    want = KEYS[name].type
    if want is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
    elif want is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
    elif want is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif isinstance(value, str):
        return value
    raise nk.ConfigError(f"setting {name!r} expects {want.__name__}, got {value!r}")


def resolve(config_path=None, flags: dict | None = None, base: dict | None = None) -> dict:
    """Merge defaults, stored settings, a JSON file and flags into one flat dict."""
    out = {k: spec.default for k, spec in KEYS.items()}
    layers = []
    if base:
        layers.append(("checkpoint settings", base))
    if config_path is not None:
        try:
            data = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise nk.ConfigError(f"{config_path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise nk.ConfigError(f"{config_path}: top level must be a JSON object")
        layers.append((str(config_path), data))
    if flags:
        layers.append(("flags", {k: v for k, v in flags.items() if v is not None}))
    for origin, layer in layers:
        unknown = sorted(set(layer) - set(KEYS))
        if unknown:
            raise nk.ConfigError(f"{origin}: unknown settings {unknown}")
        for k, v in layer.items():
            out[k] = _coerce(k, v)
    return out


def build_configs(s: dict) -> tuple[SynthConfig, TrainConfig, FinetuneConfig]:
    parts: dict[str, dict] = {"synth": {}, "train": {}, "ft": {}}
    for name, spec in KEYS.items():
        for section, fname in spec.targets:
            parts[section][fname] = s[name]
    synth, train, ft = SynthConfig(**parts["synth"]), TrainConfig(**parts["train"]), FinetuneConfig(**parts["ft"])
    train.validate()
    ft.validate()
    return synth, train, ft


def settings_from_train(cfg: TrainConfig) -> dict:
    """Flat settings implied by a stored TrainConfig (older checkpoints without meta)."""
    d = cfg.to_dict()
    d["mode"] = d.pop("sampling_mode")
    return {k: v for k, v in d.items() if k in KEYS}


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _flag_values(args, names) -> dict:
    return {k: getattr(args, k, None) for k in names}


def _load_data(path, s: dict):
    return load_logs(path, vocab_size=s["vocab_size"], max_behaviors=s["max_behaviors"])


def _downstream(args, s: dict) -> DownstreamData:
    logs = _load_data(args.data, s)
    truth = load_truth(args.truth)
    missing = [lg.user_id for lg in logs if lg.user_id not in truth]
    if missing:
        raise LogFormatError(args.truth, 0, f"no topics for user {missing[0]!r} ({len(missing)} users missing)")
    return DownstreamData.build(logs, truth, vocab_size=s["vocab_size"], n_topics=s["n_topics"],
                                max_len=s["max_len"], test_fraction=s["holdout_fraction"],
                                per_side=s["per_side"], split_seed=s["split_seed"])


def _checkpoint_settings(args):
    """Load ``--checkpoint`` and resolve settings on top of the ones stored in it."""
    ck = load_checkpoint(args.checkpoint)
    stored = ck.meta.get("settings") or settings_from_train(ck.config)
    s = resolve(args.config, _flag_values(args, KEYS), base=stored)
    changed = [k for k in SHAPE_KEYS if s[k] != stored.get(k, KEYS[k].default)]
    if changed:
        raise nk.ConfigError(f"settings {changed} differ from the checkpoint's model shape")
    return ck, s


def _check_data(ck, data_path, force: bool) -> str:
    digest = file_digest(data_path)
    stored = ck.meta.get("data_digest")
    if stored and stored != digest and not force:
        raise nk.ConfigError(
            f"data file digest {digest} does not match the checkpoint's {stored}; pass --force to override"
        )
    return digest


def _write_lines(path, header: str, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    s = resolve(args.config, _flag_values(args, KEYS))
    synth, _, _ = build_configs(s)
    logs, truth = generate_synthetic(synth)
    out = Path(args.out)
    truth_out = Path(args.truth_out) if args.truth_out else out.with_suffix(".truth" + out.suffix)
    save_logs(logs, out)
    save_truth(truth, truth_out)
    n_events = sum(len(lg) for lg in logs)
    seen = np.unique(np.concatenate([lg.behavior_ids for lg in logs])) if logs else np.zeros(0)
    print(f"users={len(logs)} events={n_events} vocab_coverage={len(seen) / synth.vocab_size:.4f} "
          f"({len(seen)}/{synth.vocab_size})")
    print(f"wrote {out} and {truth_out}")
    return 0


def cmd_pretrain(args) -> int:
    s = resolve(args.config, _flag_values(args, KEYS))
    _, cfg, _ = build_configs(s)
    logs = _load_data(args.data, s)
    from .downstream import split_users

    train_rows, _ = split_users(len(logs), s["holdout_fraction"], s["split_seed"])
    corpus = PretrainCorpus.build([logs[i] for i in train_rows], cfg.max_len, cfg.boundary_fraction)
    out = Path(args.out_checkpoint)
    metrics_path = Path(args.metrics) if args.metrics else out.with_name(out.name + ".metrics.jsonl")
    fp = cfg.fingerprint()
    every = max(1, cfg.steps // 20)
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{METRICS_HEADER} config={fp}\n")

        def on_step(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            if rec["step"] % every == 0:
                log.info("step %d loss %.4f", rec["step"], rec["loss_total"])

        res = run_pretraining(corpus, cfg, on_step=on_step)
    timing_path = metrics_path.with_name(metrics_path.name + ".timing.json")
    timing_path.write_text(json.dumps(res.timing, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    meta = {"stage": "pretrain", "data_digest": file_digest(args.data), "settings": s}
    digest = save_checkpoint(out, cfg, res.params, meta)
    last = res.metrics[-1] if res.metrics else None
    print(f"config={fp} params={digest} steps={cfg.steps}" + (
        f" final_loss={last['loss_total']:.4f} mbp_acc={last['mbp_acc']} bsm_acc={last['bsm_acc']}" if last else ""))
    print(f"wrote {out}, {metrics_path} and {timing_path}")
    return 0


def cmd_finetune(args) -> int:
    if args.checkpoint:
        ck, s = _checkpoint_settings(args)
        digest = _check_data(ck, args.data, args.force)
        params, init_hash = ck.params, params_hash(ck.params)
    else:
        s = resolve(args.config, _flag_values(args, KEYS))
        digest, init_hash = file_digest(args.data), "scratch"
    _, cfg, ft = build_configs(s)
    if not args.checkpoint:
        params = scratch_params(cfg)
    data = _downstream(args, s)
    tuned, losses = finetune(params, data.train_labels(ft.label_fraction, ft.seed), ft)
    out = Path(args.out_checkpoint)
    meta = {"stage": "finetune", "data_digest": digest, "settings": s, "init": init_hash}
    save_checkpoint(out, cfg, tuned, meta)
    _write_lines(out.with_name(out.name + ".metrics.jsonl"), f"{FINETUNE_METRICS_HEADER} config={cfg.fingerprint()}",
                 ({"step": i + 1, "loss": loss} for i, loss in enumerate(losses)))
    tail = f" final_loss={losses[-1]:.4f}" if losses else ""
    print(f"init={init_hash} params={params_hash(tuned)} steps={ft.steps}{tail}")
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    ck, s = _checkpoint_settings(args)
    _check_data(ck, args.data, args.force)
    data = _downstream(args, s)
    rep = evaluate(ck.params, data.test_labels, config_fingerprint=ck.fingerprint,
                   checkpoint_hash=params_hash(ck.params))
    if args.out:
        Path(args.out).write_text(f"{EVAL_HEADER}\n{rep.to_json()}\n", encoding="utf-8")
    print(f"auc={rep.auc:.6f} ndcg@10={rep.ndcg_at_10:.6f} ap={rep.ap:.6f} n_examples={rep.n_examples}")
    return 0


def cmd_ablate(args) -> int:
    s = resolve(args.config, _flag_values(args, KEYS))
    _, cfg, ft = build_configs(s)
    grid = parse_grid(args.grid)
    data = _downstream(args, s)

    def progress(rec, timing):
        print(f"{rec['cell']}: auc={rec['auc']:.4f} ndcg@10={rec['ndcg_at_10']:.4f} ap={rec['ap']:.4f} "
              f"step={timing['step_time'] * 1e3:.2f}ms sample={timing['sample_time'] * 1e3:.2f}ms", flush=True)

    new = run_ablation(grid, data, cfg, ft, args.out, progress=progress)
    print(f"{len(new)} new cells written to {args.out}")
    return 0


def cmd_inspect_pool(args) -> int:
    ck, s = _checkpoint_settings(args)
    _check_data(ck, args.data, args.force)
    _, cfg, _ = build_configs(s)
    if args.step_count < 1:
        raise nk.ConfigError("--step-count must be >= 1")
    logs = _load_data(args.data, s)
    from .downstream import split_users

    train_rows, _ = split_users(len(logs), s["holdout_fraction"], s["split_seed"])
    corpus = PretrainCorpus.build([logs[i] for i in train_rows], cfg.max_len, cfg.boundary_fraction)
    records = inspect_pool(ck.params, corpus, cfg, args.step_count)
    _write_lines(args.out, f"{DUMP_HEADER} config={cfg.fingerprint()} mode={cfg.sampling_mode}", records)
    for task in ("mbp", "bsm"):
        sc = [r["score"] for r in records if r["task"] == task]
        print(f"{task}: {len(sc)} negatives, mean similarity {np.mean(sc):.4f}")
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise nk.ConfigError(message)


def _add_settings(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of flat settings")
    g = p.add_argument_group("settings (each also accepted as a config-file key)")
    for name, spec in KEYS.items():
        g.add_argument("--" + name.replace("_", "-"), dest=name, default=None, metavar=spec.type.__name__.upper(),
                       help=f"default {spec.default!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="userbert", description="Contrastive user-model pre-training on behavior logs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic behavior log and its topic truth")
    p.add_argument("--out", required=True, help="behavior log path")
    p.add_argument("--truth-out", help="truth path (default: <out stem>.truth<suffix>)")
    _add_settings(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pre-train on the non-held-out users")
    p.add_argument("--data", required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--metrics", help="metrics log path (default: <checkpoint>.metrics.jsonl)")
    _add_settings(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint (or a fresh init) on click labels")
    p.add_argument("--checkpoint", help="starting checkpoint; omit to start from scratch")
    p.add_argument("--data", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--force", action="store_true", help="accept a data file the checkpoint was not trained on")
    _add_settings(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="AUC / nDCG@10 / AP on held-out users")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", help="report path")
    p.add_argument("--force", action="store_true")
    _add_settings(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="pretrain -> finetune -> eval over a grid, resumable per cell")
    p.add_argument("--data", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--grid", action="append", required=True, help="KEY=V1,V2,... (repeatable)")
    p.add_argument("--out", required=True, help="results table path")
    _add_settings(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect-pool", help="dump selected negatives for N steps without training")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--step-count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    _add_settings(p)
    p.set_defaults(func=cmd_inspect_pool)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except nk.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except nk.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, LogFormatError, CheckpointError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 1
