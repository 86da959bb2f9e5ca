"""Command-line pipeline: data generation, training, evaluation,
explanation export, hyperparameter sweeps, preference fitting, report
generation and study serving.

Every artifact embeds the run-config hash and seed; reruns with the
same config produce byte-identical metrics files. Sweeps are resumable:
finished cells are skipped by hash.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

from . import data as data_mod
from . import model as model_mod
from . import preference
from .config import (
    ConfigError,
    RunConfig,
    config_hash,
    load_run_config,
    to_jsonable,
)
from .estimators import EstimatorConfig, Method
from .nn import load_checkpoint, save_checkpoint


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _nan_to_none(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    return x


def _meta(cfg: RunConfig) -> dict:
    return {"config_hash": config_hash(cfg), "seed": cfg.seed}


# ----------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    out_dir = Path(args.out_dir)
    examples = data_mod.generate(cfg.data)
    path = out_dir / "corpus.jsonl"
    data_mod.write_dataset(examples, path)
    _write_json(out_dir / "corpus.meta.json", {**_meta(cfg), "num_examples": len(examples)})
    print(f"wrote {len(examples)} examples to {path}")
    return 0


# ----------------------------------------------------------------------
# train / eval / explain


def _load_corpus(args, cfg: RunConfig):
    path = Path(args.data) if args.data else Path(args.out_dir) / "corpus.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path} (run gen-data first)")
    examples = data_mod.read_dataset(path)
    train_set, val_set = data_mod.split(
        examples, (cfg.split.train_fraction, cfg.split.val_fraction), seed=cfg.seed
    )
    return train_set, val_set


def _explanation_record(expl, example, method: str) -> dict:
    g = example.graph
    included = [g.nodes[i].label for i in range(g.n) if expl.mask[i]]
    excluded = [g.nodes[i].label for i in range(g.n) if not expl.mask[i]]
    return {
        "id": expl.example_id,
        "question": " ".join(example.question),
        "answer_pred": expl.predicted,
        "answer_gold": example.answer,
        "k": expl.k,
        "node_labels_included": included,
        "node_labels_excluded": excluded,
        "method": method,
        "mask": list(expl.mask),
    }


def _write_explanations(path: Path, result: dict, examples, method: str) -> None:
    by_id = {ex.id: ex for ex in examples}
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for expl in result.get("explanations", ()):
            rec = _explanation_record(expl, by_id[expl.example_id], method)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _metrics_payload(cfg: RunConfig, result: dict, extra: dict | None = None) -> dict:
    payload = {
        **_meta(cfg),
        "method": cfg.model.estimator.method.value,
        "k": cfg.model.k,
        "batch_size": cfg.model.batch_size,
        "epochs": cfg.model.epochs,
        "accuracy": _nan_to_none(result["accuracy"]),
        "at_coo": _nan_to_none(result["at_coo"]),
        "qt_coo": _nan_to_none(result["qt_coo"]),
    }
    if extra:
        payload.update(extra)
    return payload


def _train_once(cfg: RunConfig, train_set, val_set, out_dir: Path, quiet: bool = False):
    model, history = model_mod.train(train_set, cfg.model, val_set)
    result = model_mod.evaluate(val_set, model)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "history.jsonl").open("w", encoding="utf-8") as fh:
        for entry in history:
            fh.write(json.dumps({**_meta(cfg), **entry}, sort_keys=True) + "\n")
    _write_json(out_dir / "metrics.json", _metrics_payload(cfg, result))
    _write_explanations(
        out_dir / "explanations.jsonl", result, val_set, cfg.model.estimator.method.value
    )
    save_checkpoint(
        out_dir / "checkpoint.npz",
        model.params,
        {
            **_meta(cfg),
            "model": to_jsonable(cfg.model),
            "vocab": model.vocab.tokens(),
            "answers": model.answers,
        },
    )
    if not quiet:
        last = history[-1]
        print(
            f"{cfg.model.estimator.method.value}: "
            f"val accuracy {result['accuracy']:.3f}, "
            f"at_coo {result['at_coo']:.3f}, qt_coo {result['qt_coo']:.3f}, "
            f"final loss {last['loss']:.4f}"
        )
    return model, result


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    train_set, val_set = _load_corpus(args, cfg)
    _train_once(cfg, train_set, val_set, Path(args.out_dir) / "train")
    return 0


def _restore_model(checkpoint_path) -> tuple[model_mod.GvqaModel, dict]:
    params, meta = load_checkpoint(checkpoint_path)
    mcfg_raw = dict(meta["model"])
    est = EstimatorConfig(**mcfg_raw.pop("estimator"))
    mcfg = model_mod.ModelConfig(estimator=est, **{
        k: tuple(v) if isinstance(v, list) else v for k, v in mcfg_raw.items()
    })
    vocab = model_mod.Vocab([])
    vocab.id_of = {t: i for i, t in enumerate(meta["vocab"])}
    import numpy as np

    model = model_mod.GvqaModel(vocab, meta["answers"], mcfg, np.random.default_rng(0))
    from .nn import load_into

    load_into(model.params, params)
    return model, meta


def cmd_eval(args) -> int:
    model, meta = _restore_model(args.checkpoint)
    examples = data_mod.read_dataset(args.data)
    result = model_mod.evaluate(examples, model)
    payload = {
        "config_hash": meta.get("config_hash"),
        "seed": meta.get("seed"),
        "method": model.cfg.estimator.method.value,
        "accuracy": _nan_to_none(result["accuracy"]),
        "at_coo": _nan_to_none(result["at_coo"]),
        "qt_coo": _nan_to_none(result["qt_coo"]),
    }
    out_dir = Path(args.out_dir)
    _write_json(out_dir / "eval_metrics.json", payload)
    _write_explanations(
        out_dir / "explanations.jsonl", result, examples, model.cfg.estimator.method.value
    )
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_explain(args) -> int:
    model, _ = _restore_model(args.checkpoint)
    examples = data_mod.read_dataset(args.data)
    result = model_mod.evaluate(examples, model)
    out = Path(args.out) if args.out else Path(args.out_dir) / "explanations.jsonl"
    _write_explanations(out, result, examples, model.cfg.estimator.method.value)
    print(f"wrote {len(result['explanations'])} explanations to {out}")
    return 0


# ----------------------------------------------------------------------
# sweep


def _cell_config(cfg: RunConfig, method: str, k: int, batch: int, seed: int) -> RunConfig:
    est = dataclasses.replace(cfg.model.estimator, method=Method(method))
    model = dataclasses.replace(
        cfg.model, estimator=est, k=k, batch_size=batch, seed=seed
    )
    return dataclasses.replace(cfg, model=model, seed=seed)


def _run_cell(payload) -> dict:
    cell_cfg, corpus_path, cell_dir = payload
    examples = data_mod.read_dataset(corpus_path)
    train_set, val_set = data_mod.split(
        examples,
        (cell_cfg.split.train_fraction, cell_cfg.split.val_fraction),
        seed=cell_cfg.seed,
    )
    _, result = _train_once(cell_cfg, train_set, val_set, cell_dir, quiet=True)
    row = _metrics_payload(cell_cfg, result, extra={"cell_seed": cell_cfg.seed})
    est = cell_cfg.model.estimator
    row["lambda"] = est.lam if est.method in (Method.IMLE,) else None
    row["tau"] = est.tau if est.method is Method.GUMBEL_SOFTSUB_ST else None
    _write_json(cell_dir / "cell.json", row)
    return row


def cmd_sweep(args) -> int:
    cfg = load_run_config(args.config)
    out_dir = Path(args.out_dir)
    corpus_path = Path(args.data) if args.data else out_dir / "corpus.jsonl"
    if not corpus_path.exists():
        raise FileNotFoundError(f"dataset not found: {corpus_path} (run gen-data first)")

    jobs = []
    for method in cfg.sweep.methods:
        ks = [cfg.model.k] if method == "none" else list(cfg.sweep.k_values)
        for k in ks:
            for batch in cfg.sweep.batch_sizes:
                for seed in cfg.sweep.seeds:
                    cell_cfg = _cell_config(cfg, method, k, batch, seed)
                    cell_dir = out_dir / "cells" / config_hash(cell_cfg)
                    jobs.append((cell_cfg, corpus_path, cell_dir))

    pending = [j for j in jobs if not (j[2] / "cell.json").exists()]
    print(f"sweep: {len(jobs)} cells, {len(pending)} to run")
    if pending:
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                list(pool.map(_run_cell, pending))
        else:
            for j in pending:
                _run_cell(j)

    rows = []
    for cell_cfg, _, cell_dir in jobs:
        rows.append(json.loads((cell_dir / "cell.json").read_text(encoding="utf-8")))
    rows.sort(key=lambda r: (r["method"], r["k"], r["batch_size"], r["cell_seed"]))
    results_path = out_dir / "results.jsonl"
    with results_path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    (out_dir / "results.txt").write_text(_format_results_table(rows), encoding="utf-8")
    print(f"wrote {len(rows)} rows to {results_path}")
    return 0


def _fmt(x, width=8):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "--".rjust(width)
    if isinstance(x, float):
        return f"{100 * x:.2f}".rjust(width)
    return str(x).rjust(width)


def _format_results_table(rows) -> str:
    lines = [
        f"{'method':<10}{'k':>4}{'batch':>7}{'seed':>6}"
        f"{'acc':>9}{'at_coo':>9}{'qt_coo':>9}{'lambda':>8}{'tau':>6}"
    ]
    for r in rows:
        lam = "--" if r.get("lambda") is None else f"{r['lambda']:g}"
        tau = "--" if r.get("tau") is None else f"{r['tau']:g}"
        lines.append(
            f"{r['method']:<10}{r['k']:>4}{r['batch_size']:>7}{r['cell_seed']:>6}"
            f"{_fmt(r['accuracy'], 9)}{_fmt(r['at_coo'], 9)}{_fmt(r['qt_coo'], 9)}"
            f"{lam:>8}{tau:>6}"
        )
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------
# fit-bt


def cmd_fit_bt(args) -> int:
    records = preference.read_comparison_log(args.log)
    params = preference.fit_extended_bt(records, tie_weight=args.tie_weight)
    counts = preference.tally(records)
    payload = {
        "theta": params.theta,
        "delta": params.delta,
        "tie_weight": params.tie_weight,
        "tally": counts,
        "num_records": len(records),
        "ranking": params.ranking(),
    }
    out = Path(args.out) if args.out else Path(args.out_dir) / "bt.json"
    _write_json(out, payload)
    print(json.dumps(payload, sort_keys=True, indent=2))
    return 0


# ----------------------------------------------------------------------
# report


def _aggregate_rows(rows):
    """Per-method mean and std over everything else (sweeps aggregate
    over seeds, k and batch size)."""
    import numpy as np

    by_method: dict[str, dict[str, list]] = {}
    for r in rows:
        slot = by_method.setdefault(r["method"], {"accuracy": [], "at_coo": [], "qt_coo": []})
        for key in slot:
            if r.get(key) is not None:
                slot[key].append(r[key])
    out = {}
    for method, slot in by_method.items():
        out[method] = {}
        for key, vals in slot.items():
            if vals:
                out[method][key] = {
                    "mean": float(np.mean(vals)),
                    "std": float(np.std(vals)),
                    "n": len(vals),
                }
            else:
                out[method][key] = None
    return out


def _batch_series(rows):
    import numpy as np

    series: dict[str, dict[int, dict[str, list]]] = {}
    for r in rows:
        per_batch = series.setdefault(r["method"], {})
        slot = per_batch.setdefault(r["batch_size"], {"accuracy": [], "at_coo": [], "qt_coo": []})
        for key in slot:
            if r.get(key) is not None:
                slot[key].append(r[key])
    out = {}
    for method, per_batch in series.items():
        out[method] = [
            {
                "batch_size": b,
                **{
                    key: (float(np.mean(vals)) if vals else None)
                    for key, vals in slots.items()
                },
            }
            for b, slots in sorted(per_batch.items())
        ]
    return out


def load_reference_scores() -> dict:
    with resources.files("sgqa.fixtures").joinpath("reference_scores.json").open(
        "r", encoding="utf-8"
    ) as fh:
        return json.load(fh)


def _correlation_section(methods, at_vals, qt_vals, theta_by_method) -> dict:
    theta = [theta_by_method[m] for m in methods]
    return {
        "methods": methods,
        "theta": theta,
        "rows": preference.correlation_table(
            {"at_coo": at_vals, "qt_coo": qt_vals}, theta
        ),
    }


def cmd_report(args) -> int:
    sections: dict = {}
    if args.results:
        rows = [
            json.loads(line)
            for line in Path(args.results).read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        sections["method_summary"] = _aggregate_rows(rows)
        sections["batch_series"] = _batch_series(rows)
        if rows:
            sections["config_hash"] = rows[0].get("config_hash")
        bt_theta = None
        if args.bt:
            bt = json.loads(Path(args.bt).read_text(encoding="utf-8"))
            sections["bt"] = bt
            bt_theta = bt["theta"]
        if bt_theta:
            methods = [m for m in sections["method_summary"] if m in bt_theta]
            summary = sections["method_summary"]
            usable = [
                m for m in methods
                if summary[m]["at_coo"] and summary[m]["qt_coo"]
            ]
            if len(usable) >= 2:
                sections["correlations"] = _correlation_section(
                    usable,
                    [100 * summary[m]["at_coo"]["mean"] for m in usable],
                    [100 * summary[m]["qt_coo"]["mean"] for m in usable],
                    bt_theta,
                )
    if args.reference:
        ref = load_reference_scores()
        theta_by_method = dict(zip(ref["methods"], ref["bt_theta"]))
        sections["reference_correlations"] = _correlation_section(
            ref["methods"], ref["at_coo"], ref["qt_coo"], theta_by_method
        )
        sections["reference_scores"] = ref
    if not sections:
        print("report: nothing to do (pass --results and/or --reference)", file=sys.stderr)
        return 1
    out = Path(args.out) if args.out else Path(args.out_dir) / "report.json"
    _write_json(out, sections)
    print(_format_report(sections))
    return 0


def _format_report(sections: dict) -> str:
    lines = []
    if "method_summary" in sections:
        lines.append("== Method summary (percent, mean +/- std across cells) ==")
        lines.append(f"{'method':<10}{'accuracy':>16}{'at_coo':>16}{'qt_coo':>16}")
        for method, stats in sorted(sections["method_summary"].items()):
            cells = []
            for key in ("accuracy", "at_coo", "qt_coo"):
                s = stats.get(key)
                cells.append(
                    f"{100 * s['mean']:.2f}+/-{100 * s['std']:.2f}" if s else "--"
                )
            lines.append(f"{method:<10}{cells[0]:>16}{cells[1]:>16}{cells[2]:>16}")
    if "batch_series" in sections:
        lines.append("")
        lines.append("== Accuracy / co-occurrence vs batch size ==")
        for method, series in sorted(sections["batch_series"].items()):
            for point in series:
                acc = point["accuracy"]
                at = point["at_coo"]
                qt = point["qt_coo"]
                lines.append(
                    f"{method:<10} batch={point['batch_size']:<5}"
                    f" acc={100 * acc:.2f}" if acc is not None else f"{method:<10} batch={point['batch_size']:<5} acc=--"
                )
                if at is not None or qt is not None:
                    lines[-1] += (
                        f" at_coo={100 * at:.2f}" if at is not None else " at_coo=--"
                    ) + (f" qt_coo={100 * qt:.2f}" if qt is not None else " qt_coo=--")
    for key, title in (
        ("correlations", "Correlation of co-occurrence metrics with BT theta"),
        ("reference_correlations", "Correlation on bundled reference scores"),
    ):
        if key in sections:
            sec = sections[key]
            lines.append("")
            lines.append(f"== {title} ==")
            lines.append(f"{'metric':<10}{'pearson':>10}{'spearman':>10}{'kendall':>10}")
            for metric, row in sec["rows"].items():
                lines.append(
                    f"{metric:<10}{row['pearson']:>10.3f}{row['spearman']:>10.3f}{row['kendall']:>10.3f}"
                )
    return "\n".join(lines)


# ----------------------------------------------------------------------
# serve


def cmd_serve(args) -> int:
    from .evalserver import build_study, create_app, load_study_plan

    plan = load_study_plan(args.study)
    log_path = Path(args.log) if args.log else Path(args.out_dir) / "comparisons.jsonl"
    study = build_study(plan, args.explanations, log_path)
    ui_dir = Path(args.ui_dir) if args.ui_dir else None
    app = create_app(study, ui_dir=ui_dir, operator_key=args.operator_key)
    import uvicorn

    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sgqa",
        description="Interpretable graph-QA pipeline with top-k subgraph sampling",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        if config_required:
            p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--out-dir", default="runs", help="artifact output directory")

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    common(p)

    p = sub.add_parser("train", help="train one model per the config")
    common(p)
    p.add_argument("--data", help="corpus JSONL (default <out-dir>/corpus.jsonl)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p, config_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("explain", help="export explanations for a dataset")
    common(p, config_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="explanations JSONL path")

    p = sub.add_parser("sweep", help="methods x k x batch x seed grid")
    common(p)
    p.add_argument("--data", help="corpus JSONL (default <out-dir>/corpus.jsonl)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p = sub.add_parser("fit-bt", help="fit the tie-aware Bradley-Terry model")
    common(p, config_required=False)
    p.add_argument("--log", required=True, help="comparison log JSONL")
    p.add_argument("--tie-weight", type=float, default=preference.DEFAULT_TIE_WEIGHT)
    p.add_argument("--out", help="output JSON path")

    p = sub.add_parser("report", help="summaries, batch series and correlations")
    common(p, config_required=False)
    p.add_argument("--results", help="sweep results.jsonl")
    p.add_argument("--bt", help="fit-bt output JSON")
    p.add_argument("--reference", action="store_true",
                   help="also correlate the bundled reference scores")
    p.add_argument("--out", help="report JSON path")

    p = sub.add_parser("serve", help="serve the pairwise evaluation study")
    common(p, config_required=False)
    p.add_argument("--study", required=True, help="study plan JSON")
    p.add_argument("--explanations", nargs="+", required=True,
                   help="explanation JSONL files, one per method")
    p.add_argument("--log", help="comparison log path")
    p.add_argument("--ui-dir", help="static UI bundle directory")
    p.add_argument("--operator-key", help="require this key on /api/export")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "sweep": cmd_sweep,
    "fit-bt": cmd_fit_bt,
    "report": cmd_report,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # surfaced with a diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
