"""Operator entry point.

Subcommands: synth (generate synthetic embedding files), partition (split an
embedding file across clients), train (run a federated experiment from a
JSON config), report (best-round table plus ROC/reliability/DCA curve CSVs
from a finished run). Every command is deterministic under a fixed seed;
wall-clock timings live in their own field and never influence seeded
output.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from fedadapt import data, federation, metrics
from fedadapt.data import DatasetFormatError
from fedadapt.numerics import AdamConfig


class ConfigError(Exception):
    """Invalid experiment config; the message names the offending key."""


def _build(cls, block: dict, where: str, coerce=None):
    """Instantiate a dataclass from a dict, rejecting unknown keys."""
    fields = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
    unknown = set(block) - fields
    if unknown:
        raise ConfigError(f"unknown config key '{where}{sorted(unknown)[0]}'")
    kwargs = dict(block)
    if coerce:
        for key, fn in coerce.items():
            if key in kwargs:
                kwargs[key] = fn(kwargs[key])
    try:
        instance = cls(**kwargs)
        validate = getattr(instance, "validate", None)
        if validate is not None:
            validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config block '{where.rstrip('.') or '<root>'}': {exc}") from exc
    return instance


@dataclass
class ExperimentConfig:
    seed: int
    out_dir: str
    run: federation.FLRunConfig
    client_paths: list = None      # type: ignore[assignment]
    target_path: str = None        # type: ignore[assignment]
    synthetic: data.SyntheticConfig = None  # type: ignore[assignment]

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        known = {"seed", "out_dir", "run", "data", "synthetic"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config key '{sorted(unknown)[0]}'")
        if "seed" not in raw:
            raise ConfigError("config key 'seed' is required")
        seed = raw["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError("config key 'seed' must be an integer")
        out_dir = str(raw.get("out_dir", "run_out"))
        run_block = dict(raw.get("run", {}))
        adam_block = run_block.pop("adam", {})
        adam = _build(AdamConfig, adam_block, "run.adam.")
        run = _build(federation.FLRunConfig,
                     {**run_block, "adam": adam, "seed": seed},
                     "run.", coerce={"split_ratios": tuple})
        client_paths = None
        target_path = None
        synthetic = None
        if "data" in raw and "synthetic" in raw:
            raise ConfigError("config keys 'data' and 'synthetic' are exclusive")
        if "data" in raw:
            block = raw["data"]
            for key in ("clients", "target"):
                if key not in block:
                    raise ConfigError(f"config key 'data.{key}' is required")
            unknown = set(block) - {"clients", "target"}
            if unknown:
                raise ConfigError(f"unknown config key 'data.{sorted(unknown)[0]}'")
            client_paths = [str(p) for p in block["clients"]]
            if not client_paths:
                raise ConfigError("config key 'data.clients' must not be empty")
            target_path = str(block["target"])
        elif "synthetic" in raw:
            synthetic = _build(data.SyntheticConfig,
                               {**raw["synthetic"], "seed": raw["synthetic"].get("seed", seed)},
                               "synthetic.")
        else:
            raise ConfigError("config needs either a 'data' or a 'synthetic' block")
        return cls(seed, out_dir, run, client_paths, target_path, synthetic)

    def to_dict(self) -> dict:
        run = asdict(self.run)
        run.pop("seed")
        run["split_ratios"] = list(run["split_ratios"])
        out = {"seed": self.seed, "out_dir": self.out_dir, "run": run}
        if self.synthetic is not None:
            out["synthetic"] = asdict(self.synthetic)
        else:
            out["data"] = {"clients": list(self.client_paths),
                           "target": self.target_path}
        return out


def load_config(path, seed_override=None, out_override=None,
                threads_override=None) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if seed_override is not None:
        raw["seed"] = seed_override
        if isinstance(raw.get("synthetic"), dict):
            raw["synthetic"].pop("seed", None)
    cfg = ExperimentConfig.from_dict(raw)
    if out_override is not None:
        cfg.out_dir = str(out_override)
    if threads_override is not None:
        cfg.run.threads = threads_override
    return cfg


def load_experiment_data(cfg: ExperimentConfig):
    """Client datasets plus the shared target pool, from files or synthesis."""
    if cfg.synthetic is not None:
        domains = data.synth_generate(cfg.synthetic)
        return domains[:-1], domains[-1]
    clients = [data.read_dataset(p) for p in cfg.client_paths]
    target = data.read_dataset(cfg.target_path)
    return clients, target


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: ExperimentConfig, out_dir: Path) -> int:
    if cfg.synthetic is None:
        raise ConfigError("config needs a 'synthetic' block for the synth command")
    domains = data.synth_generate(cfg.synthetic)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, ds in enumerate(domains[:-1]):
        path = out_dir / f"client_{i:02d}.faeb"
        data.write_dataset(ds, path)
        paths.append(path)
    target_path = out_dir / "target.faeb"
    data.write_dataset(domains[-1], target_path)
    paths.append(target_path)
    for path in paths:
        print(path)
    return 0


def cmd_partition(args) -> int:
    ds = data.read_dataset(args.input)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.scheme == "dirichlet":
        shares = data.dirichlet_partition(
            ds.labels, data.DirichletPartitionConfig(args.alpha, args.clients,
                                                     args.seed))
        names = [f"client_{i:02d}.faeb" for i in range(len(shares))]
    elif args.scheme == "pathological":
        shares = data.pathological_partition(ds.labels, args.clients, args.seed)
        names = [f"client_{i:02d}.faeb" for i in range(len(shares))]
    else:
        ratios = tuple(float(x) for x in args.ratios.split(","))
        shares = data.split_train_val_test(np.arange(len(ds)), ratios, args.seed)
        names = ["train.faeb", "val.faeb", "test.faeb"]
    for name, idx in zip(names, shares):
        path = out_dir / name
        data.write_dataset(ds.subset(idx), path)
        print(f"{path}\t{len(idx)} records")
    return 0


def _round_line(record: federation.RoundRecord) -> str:
    return json.dumps(record.to_dict(), sort_keys=True)


def cmd_train(cfg: ExperimentConfig) -> int:
    clients, target = load_experiment_data(cfg)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "metrics.jsonl"

    def progress(record):
        print(f"round {record.round_index}/{cfg.run.rounds} "
              f"target_acc={record.target['acc']:.4f} "
              f"loss={record.train_loss['contrastive']:.4f}",
              file=sys.stderr)

    result = federation.run_federated(cfg.run, clients, target, progress=progress)
    with open(log_path, "w") as log:
        for record in result.rounds:
            log.write(_round_line(record) + "\n")
    np.save(out_dir / "adapter_final.npy", result.final_vector)
    np.save(out_dir / "adapter_best.npy", result.best_vector)
    best = result.best_target_records
    np.savez(out_dir / "best_predictions.npz",
             labels=best.labels, probs=best.probs,
             round=np.int64(result.summary["best_checkpoint_round"]))
    with open(out_dir / "summary.json", "w") as f:
        json.dump({"config": cfg.to_dict(), "summary": result.summary},
                  f, sort_keys=True, indent=2)
        f.write("\n")
    print(out_dir / "metrics.jsonl")
    print(out_dir / "summary.json")
    return 0


def _fmt(value) -> str:
    return "-" if value is None else f"{value:.4f}"


def cmd_report(run_dir: Path, out_dir, ece_bins: int) -> int:
    log_path = run_dir / "metrics.jsonl"
    if not log_path.exists():
        raise ConfigError(f"no metrics log at {log_path}")
    rows = [json.loads(line) for line in log_path.read_text().splitlines() if line]
    if not rows:
        raise ConfigError(f"metrics log {log_path} is empty")
    out_dir = run_dir if out_dir is None else Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def best(series):
        usable = [(i, s) for i, s in enumerate(series)
                  if s is not None and s.get("acc") is not None]
        if not usable:
            return None, None
        return max(usable, key=lambda pair: pair[1]["acc"])

    print(f"{'split':<16}{'best_round':>10}{'acc':>9}{'bacc':>9}"
          f"{'macro_f1':>10}{'auc':>9}{'ece':>9}")
    best_round, stats = best([r["target"] for r in rows])
    print(f"{'target':<16}{best_round:>10}{_fmt(stats['acc']):>9}"
          f"{_fmt(stats['bacc']):>9}{_fmt(stats['macro_f1']):>10}"
          f"{_fmt(stats['auc']):>9}{_fmt(stats['ece']):>9}")
    for client in rows[0]["clients"]:
        cid = client["client_id"]
        series = [next(c["test"] for c in r["clients"] if c["client_id"] == cid)
                  for r in rows]
        best_round, stats = best(series)
        if stats is None:
            continue
        print(f"{f'client_{cid}_test':<16}{best_round:>10}{_fmt(stats['acc']):>9}"
              f"{_fmt(stats['bacc']):>9}{_fmt(stats['macro_f1']):>10}"
              f"{_fmt(stats['auc']):>9}{_fmt(stats['ece']):>9}")

    pred_path = run_dir / "best_predictions.npz"
    if pred_path.exists():
        blob = np.load(pred_path)
        records = metrics.EvalRecords(blob["labels"], blob["probs"])
        _, curves = metrics.roc_auc_macro(records)
        metrics.write_roc_csv(out_dir / "roc.csv", curves)
        _, bins = metrics.ece(records, ece_bins)
        metrics.write_reliability_csv(out_dir / "reliability.csv", bins)
        thresholds, macro_nb, _ = metrics.dca_net_benefit(records)
        metrics.write_dca_csv(out_dir / "dca.csv", thresholds, macro_nb)
        for name in ("roc.csv", "reliability.csv", "dca.csv"):
            print(out_dir / name)
    else:
        print(f"note: {pred_path} missing, curve CSVs skipped", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedadapt",
        description="Federated adversarial adaptation of frozen image features")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate synthetic embedding files")
    synth.add_argument("--config", required=True)
    synth.add_argument("--seed", type=int)
    synth.add_argument("--out", help="output directory (default: <out_dir>/data)")

    part = sub.add_parser("partition", help="split an embedding file across clients")
    part.add_argument("--input", required=True)
    part.add_argument("--scheme", required=True,
                      choices=("dirichlet", "pathological", "split"))
    part.add_argument("--clients", type=int, default=2)
    part.add_argument("--alpha", type=float, default=1.0)
    part.add_argument("--ratios", default="0.6,0.2,0.2")
    part.add_argument("--seed", type=int, default=0)
    part.add_argument("--out", required=True)

    train = sub.add_parser("train", help="run a federated experiment")
    train.add_argument("--config", required=True)
    train.add_argument("--seed", type=int)
    train.add_argument("--out")
    train.add_argument("--threads", type=int)

    report = sub.add_parser("report", help="summarize a finished run")
    report.add_argument("--run", required=True)
    report.add_argument("--out")
    report.add_argument("--ece-bins", type=int, default=metrics.DEFAULT_ECE_BINS)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            cfg = load_config(args.config, args.seed)
            out = Path(args.out) if args.out else Path(cfg.out_dir) / "data"
            return cmd_synth(cfg, out)
        if args.command == "partition":
            return cmd_partition(args)
        if args.command == "train":
            cfg = load_config(args.config, args.seed, args.out, args.threads)
            return cmd_train(cfg)
        if args.command == "report":
            return cmd_report(Path(args.run), args.out, args.ece_bins)
        raise AssertionError(f"unhandled command {args.command}")
    except (ConfigError, DatasetFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
