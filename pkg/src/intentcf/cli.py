"""Command-line interface: reproducible train/evaluate/probe/export/dcor runs.

Every command resolves its settings from defaults, an optional flat
key = value config file, and explicit flags (flags win), then records the
resolved values in ``manifest.txt`` next to its artifacts. Re-running a
command with its own manifest as the config file reproduces the outputs on
the same thread configuration (wall-clock columns aside).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .dataset import load_interactions
from .errors import ConfigError, DataError, NumericError
from .evaluator import evaluate, export_intent_graph, temperature_probe
from .graph import build_bipartite
from .independence import measure_table_dcor
from .trainer import (
    Checkpoint,
    OptimizerState,
    TrainingConfig,
    final_embeddings,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train_epoch,
)

_METADATA_PREFIXES = ("engine_", "run_", "stats_", "artifact_")
_CONFIG_FIELDS = [f.name for f in fields(TrainingConfig)]
_DEFAULT_TAUS = [10.0 ** e for e in range(11)]


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse a flat ``key = value`` file, skipping comments and metadata keys."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    settings: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key.startswith(_METADATA_PREFIXES):
            continue
        settings[key] = value.strip()
    return settings


def write_manifest(
    out_dir: Path,
    command: str,
    settings: dict[str, object],
    stats: dict[str, object] | None = None,
    artifacts: dict[str, str] | None = None,
    label: str | None = None,
) -> Path:
    lines = [f"engine_version = {__version__}", f"run_command = {command}"]
    if label:
        lines.append(f"run_label = {label}")
    for key, value in settings.items():
        lines.append(f"{key} = {value}")
    for key, value in (stats or {}).items():
        lines.append(f"stats_{key} = {value}")
    for key, value in (artifacts or {}).items():
        lines.append(f"artifact_{key} = {value}")
    path = out_dir / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def _resolve(
    ns: argparse.Namespace, known: dict[str, type]
) -> dict[str, object]:
    """Merge config-file values and flag overrides for the given keys."""
    merged: dict[str, object] = {}
    if ns.config:
        for key, value in read_config_file(ns.config).items():
            if key not in known:
                raise ConfigError(f"unknown config field {key!r}")
            merged[key] = value
    for key in known:
        flag_value = getattr(ns, key, None)
        if flag_value is not None:
            merged[key] = flag_value
    for key, caster in known.items():
        if key in merged and not isinstance(merged[key], caster):
            try:
                merged[key] = caster(merged[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid value for {key!r}: {merged[key]!r}") from exc
    return merged


def _parse_list(value: object, caster) -> list:
    if isinstance(value, list):
        return [caster(v) for v in value]
    return [caster(v) for v in str(value).split(",") if v != ""]


def _require_dataset_dir(settings: dict[str, object]) -> Path:
    if "dataset_dir" not in settings:
        raise ConfigError("dataset_dir is required (flag --dataset-dir or config file)")
    return Path(str(settings["dataset_dir"]))


def _load_dataset(dataset_dir: Path):
    return load_interactions(dataset_dir / "train.txt", dataset_dir / "test.txt")


def _out_dir(ns: argparse.Namespace) -> Path:
    out = Path(ns.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_compatible_checkpoint(settings, ds) -> Checkpoint:
    if "checkpoint" not in settings:
        raise ConfigError("checkpoint is required")
    ck = load_checkpoint(str(settings["checkpoint"]))
    expected = ds.num_users + ds.num_items
    if ck.params.num_nodes != expected:
        raise DataError(
            f"checkpoint has {ck.params.num_nodes} node rows, dataset needs {expected}"
        )
    if ck.params.embedding_dim != ck.config.d:
        raise DataError("checkpoint table width disagrees with its stored config")
    return ck


def _dataset_stats(ds) -> dict[str, object]:
    return {
        "num_users": ds.num_users,
        "num_items": ds.num_items,
        "num_train_edges": ds.num_train_edges,
        "num_test_edges": ds.num_test_edges,
        "num_interactions": ds.num_interactions,
        "density": f"{ds.density:.5f}",
    }


_TRAIN_KEYS = {
    "dataset_dir": str,
    "K": int,
    "L": int,
    "T": int,
    "d": int,
    "lr": float,
    "l2": float,
    "cor_weight": float,
    "batch_size": int,
    "epochs": int,
    "seed": int,
    "eval_every": int,
    "threads": int,
    "affinity": str,
    "routing_grad": str,
    "cor_sample": int,
}


def cmd_train(ns: argparse.Namespace) -> int:
    settings = _resolve(ns, _TRAIN_KEYS)
    dataset_dir = _require_dataset_dir(settings)
    config = TrainingConfig.from_mapping(
        {k: v for k, v in settings.items() if k in _CONFIG_FIELDS}
    )
    out_dir = _out_dir(ns)
    torch.set_num_threads(config.threads)

    ds = _load_dataset(dataset_dir)
    print(f"dataset: {ds.stats_csv_line()}")
    g = build_bipartite(ds)
    params = init_params(ds.num_users, ds.num_items, config.d, config.K, config.seed)
    assert params.num_parameters == (ds.num_users + ds.num_items) * config.d
    state = OptimizerState.zeros(params)
    rng = np.random.default_rng(config.seed)

    checkpoint_path = out_dir / "checkpoint.bin"
    log_rows: list[str] = []
    best: dict[str, object] | None = None
    exit_code = 0

    def evaluate_and_checkpoint(epoch: int) -> None:
        nonlocal best
        final, _ = final_embeddings(params, g, config)
        metrics = evaluate(ds, final, n=20)
        print(f"eval epoch={epoch} recall@20={metrics.recall_at_n:.6f} "
              f"ndcg@20={metrics.ndcg_at_n:.6f}")
        if best is None or metrics.recall_at_n > float(best["recall_at_20"]):
            best = {
                "best_epoch": epoch,
                "recall_at_20": metrics.recall_at_n,
                "ndcg_at_20": metrics.ndcg_at_n,
            }
            save_checkpoint(checkpoint_path, config, params, state, epoch, extra=best)

    if config.epochs == 0:
        evaluate_and_checkpoint(0)
    for epoch in range(1, config.epochs + 1):
        try:
            report = train_epoch(ds, g, params, state, config, rng)
        except NumericError as exc:
            print(f"numeric abort at epoch {epoch}: {exc}", file=sys.stderr)
            exit_code = 4
            break
        log_rows.append(
            f"{epoch},{report.mean_bpr_loss:.6f},{report.mean_ind_loss:.6f},"
            f"{report.seconds:.3f}"
        )
        print(f"epoch={epoch} bpr={report.mean_bpr_loss:.6f} "
              f"ind={report.mean_ind_loss:.6f} secs={report.seconds:.2f}")
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            evaluate_and_checkpoint(epoch)

    train_log = out_dir / "train_log.csv"
    train_log.write_text("epoch,bpr_loss,ind_loss,seconds\n" + "".join(r + "\n" for r in log_rows))

    label = None
    if config.L == 0 and config.K == 1 and config.cor_weight == 0:
        label = "MF-equivalent"
    manifest_settings: dict[str, object] = {"dataset_dir": dataset_dir}
    manifest_settings.update(config.as_dict())
    for key, value in (best or {}).items():
        manifest_settings[f"run_{key}"] = value  # metadata, skipped on re-read
    write_manifest(
        out_dir,
        "train",
        manifest_settings,
        stats=_dataset_stats(ds),
        artifacts={"checkpoint": str(checkpoint_path), "train_log": str(train_log)},
        label=label,
    )
    return exit_code


_EVAL_KEYS = {"dataset_dir": str, "checkpoint": str, "n": int, "threads": int}


def cmd_evaluate(ns: argparse.Namespace) -> int:
    settings = _resolve(ns, _EVAL_KEYS)
    dataset_dir = _require_dataset_dir(settings)
    out_dir = _out_dir(ns)
    ds = _load_dataset(dataset_dir)
    ck = _load_compatible_checkpoint(settings, ds)
    torch.set_num_threads(int(settings.get("threads", ck.config.threads)))
    n = int(settings.get("n", 20))
    g = build_bipartite(ds)
    final, _ = final_embeddings(ck.params, g, ck.config)
    metrics = evaluate(ds, final, n=n)
    row = metrics.csv_row()
    print(f"n,recall,ndcg,users_evaluated\n{row}")
    metrics_path = out_dir / "metrics.csv"
    metrics_path.write_text(f"n,recall,ndcg,users_evaluated\n{row}\n")
    write_manifest(
        out_dir,
        "evaluate",
        {"dataset_dir": dataset_dir, "checkpoint": settings["checkpoint"], "n": n},
        stats=_dataset_stats(ds),
        artifacts={"metrics": str(metrics_path)},
    )
    return 0


_PROBE_KEYS = {"dataset_dir": str, "checkpoint": str, "taus": str, "n": int, "threads": int}


def cmd_probe(ns: argparse.Namespace) -> int:
    settings = _resolve(ns, _PROBE_KEYS)
    dataset_dir = _require_dataset_dir(settings)
    out_dir = _out_dir(ns)
    ds = _load_dataset(dataset_dir)
    ck = _load_compatible_checkpoint(settings, ds)
    if ck.config.K < 2:
        raise ConfigError(
            "the temperature probe needs a multi-intent checkpoint (K >= 2); "
            f"this one has K={ck.config.K}"
        )
    torch.set_num_threads(int(settings.get("threads", ck.config.threads)))
    taus = _parse_list(settings.get("taus", _DEFAULT_TAUS), float)
    n = int(settings.get("n", 20))
    g = build_bipartite(ds)
    rows = []
    for tau in taus:
        metrics = temperature_probe(ck.params, g, ds, ck.config, tau, n=n)
        rows.append(f"{tau:g},{metrics.recall_at_n:.6f},{metrics.ndcg_at_n:.6f}")
        print(f"tau={tau:g} recall@{n}={metrics.recall_at_n:.6f} "
              f"ndcg@{n}={metrics.ndcg_at_n:.6f}")
    probe_path = out_dir / "probe.csv"
    probe_path.write_text("tau,recall,ndcg\n" + "".join(r + "\n" for r in rows))
    write_manifest(
        out_dir,
        "probe",
        {
            "dataset_dir": dataset_dir,
            "checkpoint": settings["checkpoint"],
            "taus": ",".join(f"{t:g}" for t in taus),
            "n": n,
        },
        stats=_dataset_stats(ds),
        artifacts={"probe": str(probe_path)},
    )
    return 0


_EXPORT_KEYS = {"dataset_dir": str, "checkpoint": str, "users": str, "layer": int, "threads": int}


def cmd_export_intents(ns: argparse.Namespace) -> int:
    settings = _resolve(ns, _EXPORT_KEYS)
    dataset_dir = _require_dataset_dir(settings)
    if "users" not in settings:
        raise ConfigError("users is required (flag --users)")
    out_dir = _out_dir(ns)
    ds = _load_dataset(dataset_dir)
    ck = _load_compatible_checkpoint(settings, ds)
    if ck.config.L < 1:
        raise ConfigError("intent export needs at least one routing layer (L >= 1)")
    torch.set_num_threads(int(settings.get("threads", ck.config.threads)))
    users = _parse_list(settings["users"], int)
    layer = int(settings.get("layer", ck.config.L))
    g = build_bipartite(ds)
    _, state = final_embeddings(ck.params, g, ck.config)
    lines = []
    kept_users = []
    for user in users:
        if not 0 <= user < ds.num_users:
            print(f"warning: unknown user {user}, skipped", file=sys.stderr)
            continue
        kept_users.append(user)
        for u, item, intent, weight in export_intent_graph(state, user, layer, g):
            lines.append(f"{u},{item},{intent},{weight:.8g},{layer}")
    intents_path = out_dir / "intents.csv"
    intents_path.write_text("user,item,intent,weight,layer\n" + "".join(l + "\n" for l in lines))
    print(f"wrote {len(lines)} rows for {len(kept_users)} users to {intents_path}")
    write_manifest(
        out_dir,
        "export-intents",
        {
            "dataset_dir": dataset_dir,
            "checkpoint": settings["checkpoint"],
            "users": ",".join(str(u) for u in users),
            "layer": layer,
        },
        stats=_dataset_stats(ds),
        artifacts={"intents": str(intents_path)},
    )
    return 0


_DCOR_KEYS = {"dataset_dir": str, "checkpoint": str, "sample_size": int, "sample_seed": int, "threads": int}


def cmd_dcor(ns: argparse.Namespace) -> int:
    settings = _resolve(ns, _DCOR_KEYS)
    dataset_dir = _require_dataset_dir(settings)
    out_dir = _out_dir(ns)
    ds = _load_dataset(dataset_dir)
    ck = _load_compatible_checkpoint(settings, ds)
    if ck.config.K < 2:
        raise ConfigError(
            "the correlation diagnostic needs a multi-intent checkpoint (K >= 2); "
            f"this one has K={ck.config.K}"
        )
    torch.set_num_threads(int(settings.get("threads", ck.config.threads)))
    sample_size = int(settings.get("sample_size", ck.config.cor_sample))
    sample_seed = int(settings.get("sample_seed", ck.config.seed))
    g = build_bipartite(ds)
    final, _ = final_embeddings(ck.params, g, ck.config)
    num_nodes = ds.num_users + ds.num_items
    size = min(sample_size, num_nodes)
    sample = np.random.default_rng(sample_seed).choice(num_nodes, size=size, replace=False)
    value = measure_table_dcor(final, np.sort(sample))
    row = f"{size},{sample_seed},{value:.6f}"
    print(f"sample_size,seed,mean_dcor\n{row}")
    dcor_path = out_dir / "dcor.csv"
    dcor_path.write_text(f"sample_size,seed,mean_dcor\n{row}\n")
    write_manifest(
        out_dir,
        "dcor",
        {
            "dataset_dir": dataset_dir,
            "checkpoint": settings["checkpoint"],
            "sample_size": size,
            "sample_seed": sample_seed,
        },
        stats=_dataset_stats(ds),
        artifacts={"dcor": str(dcor_path)},
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="intentcf",
        description="Intent-aware graph collaborative filtering engine",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="flat key = value config file (manifests work)")
        p.add_argument("--out-dir", default="run", help="directory for artifacts")
        p.add_argument("--dataset-dir", dest="dataset_dir",
                       help="directory holding train.txt and test.txt")
        p.add_argument("--threads", type=int, help="torch thread count")

    train = sub.add_parser("train", help="train a model and checkpoint the best state")
    common(train)
    train.add_argument("--K", type=int, help="intent chunks (d must divide by K)")
    train.add_argument("--L", type=int, help="routing layers (0 = plain MF)")
    train.add_argument("--T", type=int, help="routing iterations per layer")
    train.add_argument("--d", type=int, help="total embedding size")
    train.add_argument("--lr", type=float, help="Adam learning rate")
    train.add_argument("--l2", type=float, help="L2 coefficient on touched rows")
    train.add_argument("--cor-weight", dest="cor_weight", type=float,
                       help="independence loss weight (0 disables the step)")
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--epochs", type=int)
    train.add_argument("--seed", type=int)
    train.add_argument("--eval-every", dest="eval_every", type=int)
    train.add_argument("--affinity", choices=["both", "user_only"])
    train.add_argument("--routing-grad", dest="routing_grad", choices=["full", "stop"])
    train.add_argument("--cor-sample", dest="cor_sample", type=int,
                       help="default node sample size for the dcor diagnostic")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="rank all items and report recall/ndcg")
    common(ev)
    ev.add_argument("--checkpoint", help="path to checkpoint.bin")
    ev.add_argument("--n", type=int, help="ranking cutoff (default 20)")
    ev.set_defaults(func=cmd_evaluate)

    probe = sub.add_parser("probe", help="temperature sweep over the weakest intent")
    common(probe)
    probe.add_argument("--checkpoint", help="path to checkpoint.bin")
    probe.add_argument("--tau", dest="taus", nargs="+", type=float,
                       help="temperatures (default 1e0..1e10)")
    probe.add_argument("--n", type=int, help="ranking cutoff (default 20)")
    probe.set_defaults(func=cmd_probe)

    export = sub.add_parser("export-intents", help="dump per-edge intent weights")
    common(export)
    export.add_argument("--checkpoint", help="path to checkpoint.bin")
    export.add_argument("--users", nargs="+", type=int, help="user IDs to export")
    export.add_argument("--layer", type=int, help="routing layer (default: last)")
    export.set_defaults(func=cmd_export_intents)

    dcor = sub.add_parser("dcor", help="mean pairwise distance correlation diagnostic")
    common(dcor)
    dcor.add_argument("--checkpoint", help="path to checkpoint.bin")
    dcor.add_argument("--sample-size", dest="sample_size", type=int)
    dcor.add_argument("--sample-seed", dest="sample_seed", type=int)
    dcor.set_defaults(func=cmd_dcor)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    if getattr(ns, "taus", None) is not None and isinstance(ns.taus, list):
        ns.taus = ",".join(f"{t:g}" for t in ns.taus)
    if getattr(ns, "users", None) is not None and isinstance(ns.users, list):
        ns.users = ",".join(str(u) for u in ns.users)
    try:
        return ns.func(ns)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
