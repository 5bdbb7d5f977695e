"""Command-line entry point: ``metacal {train,eval,predict,reliability}``.

Every run is driven by one JSON config file.  Outputs go to the config's
``output_dir`` (resolved under ``$METACAL_OUTPUT_ROOT`` when that is set and the
directory is relative).  Files are staged in a scratch directory and moved into
place only when the command succeeds, so a failed run leaves nothing behind.

Exit codes: 0 success, 1 user error (bad config, data or paths), 2 internal error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from .calibration import Variant, adapt, fit_empirical_calibrator, invert_cdf
from .data import (
    ConfigError,
    CsvSchema,
    ParseError,
    SchemaError,
    Standardizer,
    TaskCollection,
    TaskDataset,
)
from .losses import EvalReport, evaluate_task
from .model import load_checkpoint, save_checkpoint
from .trainer import SamplingError, TrainConfig, meta_train, sample_episode

OUTPUT_ROOT_ENV = "METACAL_OUTPUT_ROOT"
PREDICT_LEVELS = np.round(np.arange(1, 20) * 0.05, 2)
RELIABILITY_GRID = np.round(np.arange(1, 20) * 0.05, 2)
CONFIG_KEYS = {"data", "split", "standardize", "train", "variant", "eval", "reliability", "output_dir", "seed"}


class UserError(Exception):
    """Problems the user can fix: bad config, missing files, incompatible data."""


# config

@dataclass(frozen=True)
class RunConfig:
    raw_text: str
    base_dir: Path
    data: dict
    split: dict
    standardize: str
    train: TrainConfig
    variant: Variant
    eval: dict
    reliability: dict
    output_dir: Path
    seed: int


def _variant(spec: dict) -> Variant:
    allowed = {f.name for f in fields(Variant)}
    aliases = {"w/o-net": "identity_encoder", "w/-split": "split_support", "w/-r_emp": "empirical_calibrator"}
    kw = {}
    for key, val in spec.items():
        name = aliases.get(key.lower(), key)
        if key.lower() == "w/o-r":
            name, val = "use_calibrator", not val
        if name not in allowed:
            raise ConfigError(f"unknown variant flag {key!r}")
        kw[name] = val
    return Variant(**kw)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise UserError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UserError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise UserError(f"{path}: top level must be an object")
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "data" not in cfg:
        raise ConfigError("config needs a 'data' section")
    seed = int(cfg.get("seed", 0))
    train_kw = dict(cfg.get("train", {}))
    train_kw.setdefault("seed", seed)
    if "lambda" in train_kw:
        train_kw["lam"] = train_kw.pop("lambda")
    try:
        train = TrainConfig(**train_kw)
        variant = _variant(cfg.get("variant", {}))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(cfg.get("output_dir", "metacal-run"))
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    elif not out.is_absolute():
        out = path.parent / out
    return RunConfig(
        raw_text=text,
        base_dir=path.parent,
        data=cfg["data"],
        split=cfg.get("split", {}),
        standardize=cfg.get("standardize", "global"),
        train=train,
        variant=variant,
        eval=cfg.get("eval", {}),
        reliability=cfg.get("reliability", {}),
        output_dir=out,
        seed=seed,
    )


def _tuples(kw: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in kw.items()}


def csv_schema(spec: dict) -> CsvSchema:
    try:
        return CsvSchema(spec["task_column"], tuple(spec["feature_columns"]), spec["target_column"])
    except KeyError as exc:
        raise ConfigError(f"csv data needs {exc.args[0]!r}") from None


def build_collection(cfg: RunConfig) -> tuple[TaskCollection, Standardizer | None]:
    """Load or generate tasks, split them and standardise (policy from config)."""
    spec = dict(cfg.data)
    source = spec.pop("source", None)
    if source == "csv":
        path = Path(spec.get("path", ""))
        if not path.is_absolute():
            path = cfg.base_dir / path
        if not path.is_file():
            raise UserError(f"CSV file not found: {path}")
        need = cfg.train.support_size + cfg.train.query_size
        coll = data_mod.load_csv_multitask(path, csv_schema(spec), int(spec.get("min_task_size", need)))
    elif source in ("gp", "sine"):
        gen = data_mod.gen_gp_tasks if source == "gp" else data_mod.gen_sine_tasks
        kw = _tuples(spec.get("params", {}))
        kw.setdefault("seed", cfg.seed)
        try:
            coll = gen(**kw)
        except TypeError as exc:
            raise ConfigError(f"bad generator parameters: {exc}") from None
    else:
        raise ConfigError(f"data.source must be 'csv', 'gp' or 'sine', got {source!r}")
    fractions = tuple(cfg.split.get("fractions", (0.6, 0.2, 0.2)))
    coll = data_mod.split_tasks(coll, fractions, int(cfg.split.get("seed", cfg.seed)))
    if cfg.standardize == "none":
        return coll, None
    return data_mod.standardize(coll, cfg.standardize)


# staged output

def resolve_output(cfg: RunConfig) -> Path:
    return cfg.output_dir


@contextlib.contextmanager
def staged(outdir: Path):
    """Yield a scratch directory; on success move its files into ``outdir``."""
    parent = outdir.parent
    parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=".metacal-", dir=parent))
    try:
        yield scratch
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    outdir.mkdir(parents=True, exist_ok=True)
    for item in sorted(scratch.iterdir()):
        os.replace(item, outdir / item.name)
    scratch.rmdir()


def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True) + "\n"


# checkpoint helpers

def _load_model(path, dim: int | None = None):
    path = Path(path)
    if not path.is_file():
        raise UserError(f"checkpoint not found: {path}")
    try:
        params, extra = load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise UserError(f"cannot read checkpoint {path}: {exc}") from None
    if dim is not None and params.feature_dim != dim:
        raise UserError(f"checkpoint expects feature dimension {params.feature_dim}, data has {dim}")
    return params, extra


def _checkpoint_path(cfg: RunConfig, override) -> Path:
    return Path(override) if override else resolve_output(cfg) / "checkpoint.json"


def _episode_rng(cfg: RunConfig, stream: int) -> np.random.Generator:
    seed = int(cfg.eval.get("seed", cfg.seed))
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


# commands

def cmd_train(cfg: RunConfig, checkpoint=None, out=None) -> int:
    out = out or sys.stdout
    coll, st = build_collection(cfg)
    train, val = coll.split("meta-train"), coll.split("meta-val")

    def progress(rec):
        loss = "nan" if rec.train_loss is None else f"{rec.train_loss:.6f}"
        print(f"epoch {rec.epoch} train_loss {loss} val_loss {rec.val_loss:.6f}", file=out, flush=True)

    params, trace = meta_train(train, val, cfg.train, cfg.variant, progress=progress)
    outdir = resolve_output(cfg)
    ck_target = _checkpoint_path(cfg, checkpoint)
    extra = {
        "standardize": cfg.standardize,
        "standardizer": st.to_dict() if st is not None and st.per_task is None else None,
        "best_epoch": trace.best_epoch,
        "best_val_loss": trace.best_val_loss,
    }
    with staged(outdir) as tmp:
        save_checkpoint(tmp / "checkpoint.json", params, extra)
        with open(tmp / "trace.jsonl", "w", encoding="utf-8") as fh:
            for rec in trace.to_records():
                fh.write(_json_line(rec))
            fh.write(_json_line({"best_epoch": trace.best_epoch, "best_val_loss": trace.best_val_loss}))
        with open(tmp / "timings.jsonl", "w", encoding="utf-8") as fh:
            for rec in trace.records:
                fh.write(_json_line({"epoch": rec.epoch, "wall_time": rec.wall_time}))
        (tmp / "config.json").write_text(cfg.raw_text, encoding="utf-8")
        if ck_target != outdir / "checkpoint.json":
            ck_target.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(tmp / "checkpoint.json", ck_target)
    return 0


def _eval_records(params, tasks, cfg: RunConfig, variant: Variant):
    n = int(cfg.eval.get("episodes_per_task", 10))
    rng = _episode_rng(cfg, 1)
    records = []
    for task in tasks:
        for _ in range(n):
            ep = sample_episode(task, cfg.train.support_size, cfg.train.query_size, rng)
            mse, e = evaluate_task(params, ep.support, ep.query, variant)
            records.append((task.task_id, mse, e))
    return records


def cmd_eval(cfg: RunConfig, checkpoint=None, r_emp: bool = False) -> int:
    coll, _ = build_collection(cfg)
    params, _ = _load_model(_checkpoint_path(cfg, checkpoint), coll.dim)
    variant = cfg.variant
    if r_emp:
        variant = Variant(variant.identity_encoder, True, variant.fix_alpha, variant.split_support, True)
    tasks = coll.split("meta-test")
    report = EvalReport.from_episodes(_eval_records(params, tasks, cfg, variant))
    lines = []
    for tid, mse, e in report.per_task:
        lines.append({"task_id": tid, "mse": mse, "ece": e, "te": (mse + e) / 2.0})
    summary = {"task_id": "ALL", "mse": report.mse, "ece": report.ece, "te": report.te,
               "mse_se": report.mse_se, "ece_se": report.ece_se, "te_se": report.te_se,
               "calibrator": "empirical" if variant.empirical_calibrator else (
                   "gmm" if variant.use_calibrator else "none")}
    name = "report_r_emp" if r_emp else "report"
    table = [f"{'task':<16}{'mse':>12}{'ece':>12}{'te':>12}"]
    for row in lines:
        table.append(f"{row['task_id']:<16}{row['mse']:>12.6f}{row['ece']:>12.6f}{row['te']:>12.6f}")
    table.append(f"{'mean':<16}{report.mse:>12.6f}{report.ece:>12.6f}{report.te:>12.6f}")
    table.append(f"{'std. error':<16}{report.mse_se:>12.6f}{report.ece_se:>12.6f}{report.te_se:>12.6f}")
    with staged(resolve_output(cfg)) as tmp:
        with open(tmp / f"{name}.jsonl", "w", encoding="utf-8") as fh:
            for row in lines:
                fh.write(_json_line(row))
            fh.write(_json_line(summary))
        (tmp / f"{name}.txt").write_text("\n".join(table) + "\n", encoding="utf-8")
    return 0


def _read_query_csv(path: Path, schema: CsvSchema):
    """Query rows: feature columns required, task and target columns optional."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path.name} is empty") from None
        missing = [c for c in schema.feature_columns if c not in header]
        if missing:
            raise SchemaError(f"column {missing[0]!r} not found in {path.name} (header: {header})")
        fidx = [header.index(c) for c in schema.feature_columns]
        tidx = header.index(schema.task_column) if schema.task_column in header else None
        ids, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(row[i]) for i in fidx])
            except (ValueError, IndexError):
                raise ParseError(f"{path.name}: non-numeric cell in row {lineno}") from None
            ids.append(row[tidx] if tidx is not None else None)
    return ids, np.array(rows, dtype=np.float64).reshape(-1, len(fidx))


def _standardizer_for(extra: dict, dim: int, support: TaskDataset | None = None) -> Standardizer:
    if extra.get("standardizer"):
        return Standardizer.from_dict(extra["standardizer"])
    if extra.get("standardize") == "per-task" and support is not None:
        _, st = data_mod.standardize(TaskCollection((support,)), "per-task")
        return st
    return Standardizer.identity(dim)


def predict_rows(params, extra, support: TaskDataset, xq: np.ndarray, variant: Variant = Variant()):
    """Mean, variance and quantiles (original units) for each query input."""
    st = _standardizer_for(extra, support.dim, support)
    s = st.apply(support)
    task = adapt(params, s, st.transform_features(xq, support.task_id), variant)
    q = invert_cdf(task.cdf, PREDICT_LEVELS)
    scale = st._stats(support.task_id)[3]
    mean = st.invert_targets(task.mean, support.task_id)
    var = task.variance * scale**2
    quant = st.invert_targets(q, support.task_id).T
    return mean, var, quant


def cmd_predict(cfg: RunConfig, checkpoint, support_csv, query_csv, output=None) -> int:
    spec = dict(cfg.data)
    if spec.get("source") != "csv" and "task_column" not in spec:
        raise ConfigError("predict needs CSV column names in the data section")
    schema = csv_schema(spec)
    for p in (support_csv, query_csv):
        if not Path(p).is_file():
            raise UserError(f"CSV file not found: {p}")
    support = data_mod.load_csv_multitask(Path(support_csv), schema)
    params, extra = _load_model(_checkpoint_path(cfg, checkpoint), support.dim)
    ids, xq = _read_query_csv(Path(query_csv), schema)
    if xq.shape[0] == 0:
        raise UserError(f"{query_csv} has no query rows")
    by_id = {t.task_id: t for t in support}
    if any(i is None for i in ids):
        if len(by_id) != 1:
            raise UserError("query file has no task column but the support file has several tasks")
        ids = [next(iter(by_id))] * len(ids)
    unknown = sorted(set(ids) - set(by_id))
    if unknown:
        raise UserError(f"query tasks without support rows: {unknown}")
    out_rows = [None] * len(ids)
    ids_arr = np.array(ids)
    for tid, task in by_id.items():
        idx = np.flatnonzero(ids_arr == tid)
        if idx.size == 0:
            continue
        mean, var, quant = predict_rows(params, extra, task, xq[idx], cfg.variant)
        for k, i in enumerate(idx):
            out_rows[i] = [tid, int(i), mean[k], var[k], *quant[k]]
    header = ["task_id", "row", "mean", "variance"] + [f"q{p:.2f}" for p in PREDICT_LEVELS]
    target = Path(output) if output else resolve_output(cfg) / "predictions.csv"
    with staged(target.parent) as tmp:
        with open(tmp / target.name, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in out_rows:
                w.writerow(row[:2] + [repr(float(v)) for v in row[2:]])
    return 0


def empirical_cdf(values: np.ndarray, grid=RELIABILITY_GRID) -> np.ndarray:
    """Fraction of ``values`` at or below each grid level."""
    v = np.asarray(values, dtype=np.float64).ravel()
    return np.mean(v[None, :] <= np.asarray(grid)[:, None], axis=1)


def reliability_values(params, support: TaskDataset, query: TaskDataset, variant: Variant = Variant()):
    """Estimated CDF values on support and query points for three variants.

    ``uncalibrated`` is the Gaussian ``hU``; ``calibrated`` the GMM mixture;
    ``empirical`` applies the step calibrator fitted on the support alone.
    """
    xs = np.concatenate([support.features, query.features])
    task = adapt(params, support, xs, variant)
    ns = len(support)
    hu = task.uncalibrated(np.concatenate([support.targets, query.targets]))
    gmm = task.cdf(np.concatenate([support.targets, query.targets]))
    emp = fit_empirical_calibrator(hu[:ns])(hu)
    out = {}
    for name, vals in (("uncalibrated", hu), ("calibrated", gmm), ("empirical", emp)):
        out[(name, "support")] = vals[:ns]
        out[(name, "query")] = vals[ns:]
    return out


def cmd_reliability(cfg: RunConfig, checkpoint=None) -> int:
    coll, _ = build_collection(cfg)
    params, _ = _load_model(_checkpoint_path(cfg, checkpoint), coll.dim)
    grid = np.asarray(cfg.reliability.get("grid", RELIABILITY_GRID), dtype=np.float64)
    n = int(cfg.reliability.get("episodes_per_task", 1))
    rng = _episode_rng(cfg, 2)
    pooled: dict = {}
    for task in coll.split("meta-test"):
        for _ in range(n):
            ep = sample_episode(task, cfg.train.support_size, cfg.train.query_size, rng)
            for key, vals in reliability_values(params, ep.support, ep.query, cfg.variant).items():
                pooled.setdefault(key, []).append(vals)
    with staged(resolve_output(cfg)) as tmp:
        with open(tmp / "reliability.jsonl", "w", encoding="utf-8") as fh:
            for variant in ("uncalibrated", "calibrated", "empirical"):
                for which in ("support", "query"):
                    emp = empirical_cdf(np.concatenate(pooled[(variant, which)]), grid)
                    for level, e in zip(grid, emp):
                        fh.write(_json_line({"variant": variant, "set": which,
                                             "level": float(level), "empirical": float(e)}))
    return 0


# entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage mistakes are user errors (exit 1); 2 is reserved for internal failures
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metacal", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("train", "meta-train and write a checkpoint"),
                        ("eval", "evaluate a checkpoint on the meta-test tasks"),
                        ("predict", "predict means, variances and quantiles for query rows"),
                        ("reliability", "export reliability-diagram data")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--checkpoint", help="checkpoint path (default: <output_dir>/checkpoint.json)")
        if name == "eval":
            p.add_argument("--r-emp", action="store_true", help="swap the GMM calibrator for the empirical one")
        if name == "predict":
            p.add_argument("--support", required=True, help="support CSV")
            p.add_argument("--query", required=True, help="query CSV")
            p.add_argument("--output", help="predictions CSV (default: <output_dir>/predictions.csv)")
    return parser


USER_ERRORS = (UserError, ConfigError, SchemaError, ParseError, SamplingError, FileNotFoundError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "train":
            return cmd_train(cfg, args.checkpoint)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.r_emp)
        if args.command == "predict":
            return cmd_predict(cfg, args.checkpoint, args.support, args.query, args.output)
        return cmd_reliability(cfg, args.checkpoint)
    except USER_ERRORS as exc:
        print(f"metacal {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"metacal {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
