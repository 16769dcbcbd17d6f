"""Command-line entry point: reproducible runs driven by a JSON config.

Subcommands::

    textdistill gen-synthetic --config run.json [--out DIR] [--seed N]
    textdistill distill       --config run.json [--out DIR] [--seed N]
    textdistill eval          --config run.json [--artifact F] [--sweep a,b,c]
    textdistill export        --artifact F [--out FILE]

Exit codes: 0 success, 2 config validation failure, 3 distillation aborted
on divergence, 4 artifact/config mismatch, 5 corrupt artifact.  Every run
writes ``run_manifest.json`` with the resolved config and output hashes;
all files are written to a temporary name and atomically renamed, so a
failed run leaves no partial outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from . import distill as Dst
from . import evaluate as E
from . import model as M
from . import textdata as td

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_MISMATCH = 4
EXIT_CORRUPT = 5


class ConfigError(ValueError):
    pass


_SCHEMA = {
    "seed": int,
    "out_dir": str,
    "data": {
        "train_csv": str,
        "test_csv": str,
        "num_classes": int,
        "embedding_file": (str, type(None)),
        "embedding_sigma": (int, float),
        "vocab_min_count": int,
    },
    "model": {
        "embedding_dim": int,
        "widths": list,
        "channels": int,
        "max_len": int,
    },
    "distill": {
        "per_class": int,
        "alpha_inner": (int, float),
        "alpha_outer": (int, float),
        "inner_epochs": int,
        "inner_batch": int,
        "outer_steps": int,
        "real_batch": int,
        "init_mode": str,
        "theta_init": str,
        "outer_optimizer": str,
    },
    "eval": {
        "epochs": int,
        "batch_size": int,
        "alpha": (int, float),
        "seeds": list,
        "balanced_random": bool,
    },
    "synthetic": {
        "num_classes": int,
        "n_train": int,
        "n_test": int,
        "signature_per_class": int,
        "signature_rate": (int, float),
        "background_vocab": int,
        "min_len": int,
        "max_len": int,
    },
}

_DEFAULTS = {
    "seed": 0,
    "out_dir": "runs/out",
    "data": {"num_classes": None, "embedding_file": None,
             "embedding_sigma": 0.4, "vocab_min_count": 1},
    "model": {"embedding_dim": 32, "widths": [3, 4, 5], "channels": 32, "max_len": 40},
    "distill": {"per_class": 10, "alpha_inner": 0.1, "alpha_outer": 0.05,
                "inner_epochs": 3, "inner_batch": 20, "outer_steps": 200,
                "real_batch": 64, "init_mode": "gaussian", "theta_init": "resample",
                "outer_optimizer": "sgd"},
    "eval": {"epochs": 15, "batch_size": 10, "alpha": 0.1, "seeds": [0, 1, 2],
             "balanced_random": True},
    "synthetic": {"num_classes": 4, "n_train": 2000, "n_test": 400,
                  "signature_per_class": 5, "signature_rate": 0.3,
                  "background_vocab": 500, "min_len": 20, "max_len": 40},
}


def _check_keys(raw: dict, schema: dict, where: str) -> None:
    for key, value in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown key {where}{key!r}")
        want = schema[key]
        if isinstance(want, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key} must be an object")
            _check_keys(value, want, f"{where}{key}.")
            continue
        allowed = want if isinstance(want, tuple) else (want,)
        if not isinstance(value, allowed) or (isinstance(value, bool) and bool not in allowed):
            raise ConfigError(f"{where}{key} has wrong type")


def load_config(path: str | None, overrides: dict) -> dict:
    """Merge defaults < file < flag overrides, rejecting unknown keys."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
    _check_keys(raw, _SCHEMA, "")
    merged = json.loads(json.dumps(_DEFAULTS))
    for key, value in raw.items():
        if isinstance(value, dict):
            merged[key].update(value)
        else:
            merged[key] = value
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged


def _resolve_world(config: dict, need_data: bool = True):
    """Datasets, vocabulary and embedding table per the resolved config."""
    data = config["data"]
    for key in ("train_csv", "test_csv"):
        if key not in data:
            raise ConfigError(f"data.{key} is required")
        if not Path(data[key]).exists():
            raise ConfigError(f"data.{key} path {data[key]!r} does not exist")
    emb_file = data.get("embedding_file")
    if emb_file is not None and not Path(emb_file).exists():
        raise ConfigError(f"data.embedding_file path {emb_file!r} does not exist")

    declared = data.get("num_classes")
    train_texts, train_labels, num_classes = td.load_csv_texts(
        data["train_csv"], num_classes=declared)
    test_texts, test_labels, _ = td.load_csv_texts(
        data["test_csv"], num_classes=num_classes)
    vocab = td.build_vocab(train_texts, min_count=data["vocab_min_count"])
    mc = config["model"]
    if emb_file is not None:
        table = td.load_embeddings(emb_file, vocab, mc["embedding_dim"], config["seed"])
    else:
        table = td.random_embedding_table(vocab, mc["embedding_dim"], config["seed"],
                                          sigma=data["embedding_sigma"])
    model_config = M.ModelConfig(
        embedding_dim=mc["embedding_dim"], num_classes=num_classes,
        widths=tuple(mc["widths"]), channels=mc["channels"],
        max_len=mc["max_len"], seed=config["seed"])
    train = td.Dataset.from_texts(train_texts, train_labels, vocab,
                                  mc["max_len"], num_classes)
    test = td.Dataset.from_texts(test_texts, test_labels, vocab,
                                 mc["max_len"], num_classes)
    return train, test, vocab, table, model_config


def _distill_config(config: dict) -> Dst.DistillConfig:
    d = config["distill"]
    mc = config["model"]
    return Dst.DistillConfig(
        per_class=d["per_class"], seq_len=mc["max_len"],
        embedding_dim=mc["embedding_dim"], alpha_inner=d["alpha_inner"],
        alpha_outer=d["alpha_outer"], inner_epochs=d["inner_epochs"],
        inner_batch=d["inner_batch"], outer_steps=d["outer_steps"],
        real_batch=d["real_batch"], init_mode=d["init_mode"],
        theta_init=d["theta_init"], outer_optimizer=d["outer_optimizer"],
        seed=config["seed"])


def _eval_config(config: dict) -> E.EvalConfig:
    e = config["eval"]
    return E.EvalConfig(epochs=e["epochs"], batch_size=e["batch_size"],
                        alpha=e["alpha"], seeds=tuple(e["seeds"]),
                        balanced_random=e["balanced_random"])


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _atomic_write_text(path: Path, payload: str) -> None:
    _atomic_write_bytes(path, payload.encode("utf-8"))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, outputs) -> None:
    manifest = {
        "command": command,
        "config": config,
        "outputs": {name: _sha256(out_dir / name) for name in outputs},
    }
    _atomic_write_text(out_dir / "run_manifest.json",
                       json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def cmd_gen_synthetic(config: dict) -> int:
    out_dir = Path(config["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = E.SyntheticSpec(seed=config["seed"], **config["synthetic"])
    train_x, train_y, test_x, test_y = E.synthetic_corpus(spec)
    for name, texts, labels in (("train.csv", train_x, train_y),
                                ("test.csv", test_x, test_y)):
        tmp = out_dir / (name + f".tmp{os.getpid()}")
        E.write_corpus_csv(tmp, texts, labels)
        os.replace(tmp, out_dir / name)
    _write_manifest(out_dir, "gen-synthetic", config, ["train.csv", "test.csv"])
    print(f"wrote {out_dir}/train.csv and {out_dir}/test.csv")
    return EXIT_OK


def cmd_distill(config: dict) -> int:
    train, _test, _vocab, table, model_config = _resolve_world(config)
    distill_config = _distill_config(config)
    distill_config.validate_unroll(
        distill_config.per_class * train.num_classes,
        M.init_params(model_config, seed=0).num_values())
    out_dir = Path(config["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = []
    dset = Dst.run_distillation(train, table, model_config, distill_config,
                                callback=metrics.append)
    tmp = out_dir / f"distilled.ddtc.tmp{os.getpid()}"
    Dst.save_distilled(tmp, dset, table.content_hash())
    os.replace(tmp, out_dir / "distilled.ddtc")
    lines = ["step,outer_loss,grad_norm"]
    lines += [f"{m['step']},{m['outer_loss']!r},{m['grad_norm']!r}" for m in metrics]
    _atomic_write_text(out_dir / "distill_metrics.csv", "\n".join(lines) + "\n")
    _write_manifest(out_dir, "distill", config,
                    ["distilled.ddtc", "distill_metrics.csv"])
    print(f"wrote {out_dir}/distilled.ddtc ({len(dset)} samples, "
          f"{distill_config.outer_steps} outer steps)")
    return EXIT_OK


def cmd_eval(config: dict, artifact: str | None, sweep: str | None) -> int:
    train, test, _vocab, table, model_config = _resolve_world(config)
    out_dir = Path(config["out_dir"])
    artifact_path = Path(artifact) if artifact else out_dir / "distilled.ddtc"
    if not artifact_path.exists():
        raise ConfigError(f"artifact {artifact_path} does not exist")
    dset, emb_hash = Dst.load_distilled(artifact_path)

    problems = []
    if dset.seq_len != model_config.max_len:
        problems.append(f"L {dset.seq_len} != {model_config.max_len}")
    if dset.embedding_dim != model_config.embedding_dim:
        problems.append(f"d {dset.embedding_dim} != {model_config.embedding_dim}")
    if dset.num_classes != model_config.num_classes:
        problems.append(f"C {dset.num_classes} != {model_config.num_classes}")
    if emb_hash != table.content_hash():
        problems.append("embedding table hash differs")
    if problems:
        print("artifact/config mismatch: " + "; ".join(problems), file=sys.stderr)
        return EXIT_MISMATCH

    out_dir.mkdir(parents=True, exist_ok=True)
    eval_config = _eval_config(config)
    rows = E.compare_protocol(train, test, dset, eval_config, model_config, table)
    tmp = out_dir / f"comparison.csv.tmp{os.getpid()}"
    E.write_comparison_csv(tmp, rows)
    os.replace(tmp, out_dir / "comparison.csv")

    curve_rows = E.epoch_curves(
        [("full", train),
         ("random", E.random_subset(train, dset.per_class, eval_config.seeds[0],
                                    balanced=eval_config.balanced_random)),
         ("distilled", dset)],
        eval_config, model_config, table, test)
    tmp = out_dir / f"curves.csv.tmp{os.getpid()}"
    E.write_curves_csv(tmp, curve_rows)
    os.replace(tmp, out_dir / "curves.csv")

    outputs = ["comparison.csv", "curves.csv"]
    if sweep:
        m_values = [int(v) for v in sweep.split(",") if v]
        sweep_rows = E.size_sweep(train, test, m_values, _distill_config(config),
                                  eval_config, model_config, table)
        tmp = out_dir / f"sweep.csv.tmp{os.getpid()}"
        E.write_sweep_csv(tmp, sweep_rows)
        os.replace(tmp, out_dir / "sweep.csv")
        outputs.append("sweep.csv")
    _write_manifest(out_dir, "eval", config, outputs)
    summary = E.summarize(rows)
    for name, stats in summary.items():
        print(f"{name}: accuracy {stats['mean_accuracy']:.4f} "
              f"(sd {stats['sd_accuracy']:.4f}, {stats['runs']} seeds)")
    return EXIT_OK


def cmd_export(artifact: str, out: str | None) -> int:
    dset, emb_hash = Dst.load_distilled(artifact)
    payload = json.dumps(Dst.to_json_dict(dset, emb_hash), sort_keys=True)
    if out:
        _atomic_write_text(Path(out), payload + "\n")
        print(f"wrote {out}")
    else:
        print(payload)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="textdistill",
        description="Distill a text corpus into synthetic training matrices")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--out", help="override the output directory")

    sub.add_parser("gen-synthetic", parents=[common],
                   help="emit the built-in synthetic corpus as CSV")
    sub.add_parser("distill", parents=[common],
                   help="run the distillation loop and store the artifact")
    pe = sub.add_parser("eval", parents=[common],
                        help="compare full vs random vs distilled training")
    pe.add_argument("--artifact", help="distilled artifact (default OUT/distilled.ddtc)")
    pe.add_argument("--sweep", help="comma-separated per-class sizes to sweep")
    px = sub.add_parser("export", help="dump an artifact as lossless JSON")
    px.add_argument("--artifact", required=True)
    px.add_argument("--out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export":
            return cmd_export(args.artifact, args.out)
        overrides = {"seed": args.seed, "out_dir": args.out}
        config = load_config(args.config, overrides)
        if args.command == "gen-synthetic":
            return cmd_gen_synthetic(config)
        if args.command == "distill":
            return cmd_distill(config)
        if args.command == "eval":
            return cmd_eval(config, args.artifact, args.sweep)
        raise AssertionError(args.command)
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, Dst.CorruptArtifact):
            print(f"corrupt artifact: {exc}", file=sys.stderr)
            return EXIT_CORRUPT
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Dst.NonFiniteGradient as exc:
        print(f"distillation aborted: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
