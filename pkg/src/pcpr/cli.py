"""Command line: gen-data, train, eval, selfcheck.

Exit codes: 0 ok, 1 selfcheck failure, 2 bad config, 3 training error, 4 evaluation error.
``PCPR_THREADS`` caps the BLAS thread pool.
"""

import argparse
import dataclasses
import json
import os
import sys
import time
import warnings
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

from . import checks
from .data import SyntheticDomainSpec, ThresholdSpec, default_domain_specs, default_holdout_spec, generate_domain
from .data import load_dataset, save_dataset
from .encoder import load_params
from .errors import PCPRError
from .evaluation import RecallMatrix, build_report, evaluate_domain, mean_recall_curve, zero_shot
from .trainer import EpochRecord, Protocol, RunLog, TrainConfig, load_checkpoint, run_protocol, save_checkpoint

EXIT_OK, EXIT_SELFCHECK, EXIT_CONFIG, EXIT_TRAIN, EXIT_EVAL = 0, 1, 2, 3, 4
DEFAULT_RECALL_N = (1, 5, 10, 25)
INDEX_FILE = "domains.json"


class ConfigError(Exception):
    pass


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


# -- gen-data -----------------------------------------------------------------

GENERATOR_FIELDS = {f.name for f in dataclasses.fields(SyntheticDomainSpec)}
THRESHOLD_FIELDS = {f.name for f in dataclasses.fields(ThresholdSpec)}


def _domain_entry(entry, where):
    _check_keys(entry, {"name", "generator", "thresholds"}, where)
    gen = entry.get("generator", {})
    _check_keys(gen, GENERATOR_FIELDS, f"{where}.generator")
    thr = entry.get("thresholds", {})
    _check_keys(thr, THRESHOLD_FIELDS, f"{where}.thresholds")
    try:
        return entry.get("name"), SyntheticDomainSpec(**gen), ThresholdSpec(**thr)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_generation_spec(raw):
    """``{"preset": "default", "seed": s}`` or ``{"domains": [...], "holdout": {...}}``.

    Each domain entry is ``{"name", "generator": SyntheticDomainSpec fields,
    "thresholds": ThresholdSpec fields}``. Returns ``(domains, holdout)``.
    """
    _check_keys(raw, {"preset", "seed", "domains", "holdout"}, "data spec")
    if "preset" in raw:
        if raw["preset"] != "default" or "domains" in raw:
            raise ConfigError("the only preset is 'default', and it cannot be combined with 'domains'")
        seed = raw.get("seed", 0)
        domains = [(f"domain-{i + 1}", s, ThresholdSpec()) for i, s in enumerate(default_domain_specs(seed))]
        return domains, ("holdout", default_holdout_spec(seed), ThresholdSpec())
    if "seed" in raw:
        raise ConfigError("'seed' only applies to the default preset")
    entries = raw.get("domains")
    if not entries:
        raise ConfigError("data spec needs a nonempty 'domains' list")
    domains = [_domain_entry(e, f"domains[{i}]") for i, e in enumerate(entries)]
    domains = [(name or f"domain-{i + 1}", s, t) for i, (name, s, t) in enumerate(domains)]
    holdout = None
    if raw.get("holdout"):
        name, s, t = _domain_entry(raw["holdout"], "holdout")
        holdout = (name or "holdout", s, t)
    names = [d[0] for d in domains] + ([holdout[0]] if holdout else [])
    if len(set(names)) != len(names):
        raise ConfigError(f"domain names must be unique: {names}")
    return domains, holdout


def cmd_gen_data(spec_path, out):
    domains, holdout = parse_generation_spec(_read_json(spec_path))
    out = Path(out)
    index = {"domains": [], "holdout": None}
    for i, (name, spec, thr) in enumerate(domains):
        ds = generate_domain(spec, domain_id=i, name=name, thresholds=thr)
        index["domains"].append(str(save_dataset(ds, out / name).relative_to(out)))
        print(f"{name}: {len(ds.train)} train, {len(ds.test_database)} db, {len(ds.test_queries)} queries")
    if holdout:
        name, spec, thr = holdout
        ds = generate_domain(spec, domain_id=len(domains), name=name, thresholds=thr)
        index["holdout"] = str(save_dataset(ds, out / name).relative_to(out))
        print(f"{name} (holdout): {len(ds.test_database)} db, {len(ds.test_queries)} queries")
    (out / INDEX_FILE).write_text(json.dumps(index, indent=2) + "\n")
    return index


# -- experiment config --------------------------------------------------------


def _resolve(path, base):
    p = Path(path)
    return str(p if p.is_absolute() else (base / p).resolve())


@dataclass
class ExperimentConfig:
    data: list
    holdout: object = None
    protocol: Protocol = Protocol.FOUR_STEP
    recall_n: tuple = DEFAULT_RECALL_N
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, raw, base=Path(".")):
        """Parse and resolve defaults; ``data`` is a list of manifests or a gen-data index."""
        _check_keys(raw, {f.name for f in dataclasses.fields(cls)}, "experiment config")
        if "data" not in raw:
            raise ConfigError("experiment config needs 'data'")
        data, holdout = raw["data"], raw.get("holdout")
        if isinstance(data, str):
            index_path = Path(_resolve(data, base))
            index = _read_json(index_path)
            _check_keys(index, {"domains", "holdout"}, str(index_path))
            data = [_resolve(p, index_path.parent) for p in index["domains"]]
            if "holdout" not in raw and index.get("holdout"):
                holdout = _resolve(index["holdout"], index_path.parent)
        else:
            data = [_resolve(p, base) for p in data]
        if holdout is not None and "holdout" in raw:
            holdout = _resolve(holdout, base)
        try:
            protocol = Protocol(raw.get("protocol", Protocol.FOUR_STEP))
            recall_n = tuple(int(n) for n in raw.get("recall_n", DEFAULT_RECALL_N))
            train = TrainConfig.from_dict(raw.get("train", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if not recall_n or min(recall_n) < 1 or 1 not in recall_n:
            raise ConfigError(f"recall_n must be positive and include 1, got {list(recall_n)}")
        return cls(data, holdout, protocol, recall_n, train)

    @classmethod
    def from_file(cls, path):
        return cls.from_dict(_read_json(path), Path(path).resolve().parent)

    def to_dict(self):
        return {
            "data": list(self.data),
            "holdout": self.holdout,
            "protocol": self.protocol.value,
            "recall_n": list(self.recall_n),
            "train": self.train.to_dict(),
        }


# -- train --------------------------------------------------------------------


def _load_all(paths):
    return [load_dataset(p) for p in paths]


def _final_report(params, matrix, datasets, holdout, recall_n):
    curve = mean_recall_curve(params, datasets, recall_n)
    zs = zero_shot(params, holdout, 1, datasets) if holdout is not None else None
    return build_report(matrix, curve, zs)


def _latest_step(out):
    steps = sorted(int(p.name.split("_")[1]) for p in (out / "steps").glob("step_*") if (p / "params.bin").exists())
    return steps[-1] if steps else None


def cmd_train(config_path, out, resume=False):
    cfg = ExperimentConfig.from_file(config_path)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    echo = json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
    echo_path = out / "config.echo.json"
    datasets = _load_all(cfg.data)
    holdout = load_dataset(cfg.holdout) if cfg.holdout else None
    sources = {ds.domain_id: path for ds, path in zip(datasets, cfg.data)}

    start, log = None, RunLog(config=cfg.train.to_dict())
    last = _latest_step(out) if resume else None
    if last is not None:
        if echo_path.exists() and echo_path.read_text() != echo:
            raise ConfigError(f"{out} was trained with a different config; refusing to resume")
        state, matrix, saved = load_checkpoint(out / "steps" / f"step_{last}", datasets)
        if saved != cfg.train:
            raise ConfigError("checkpoint train config differs from the requested one")
        start = (state, matrix)
        print(f"resuming after step {last}")
    elif resume:
        print("nothing to resume; starting from scratch")
    echo_path.write_text(echo)
    (out / INDEX_FILE).write_text(json.dumps({"domains": cfg.data, "holdout": cfg.holdout}, indent=2) + "\n")

    def on_step(step, state, matrix, step_log):
        log.extend(step_log)
        save_checkpoint(out / "steps" / f"step_{step}", state, matrix, log, cfg.train, sources)
        print(f"step {step}: recall@1 {[round(x, 2) for x in matrix.rows[-1]]} ({step_log.step_seconds[step]:.1f}s)")

    if start is not None:
        prior = (out / "steps" / f"step_{last}" / "runlog.jsonl").read_text().splitlines()
        log.epochs.extend(_epochs_from_jsonl(prior))
    result = run_protocol(datasets, cfg.train, cfg.protocol, start=start, on_step=on_step)
    save_checkpoint(out, result.state, result.matrix, log, cfg.train, sources)
    report = _final_report(result.state.student, result.matrix, datasets, holdout, cfg.recall_n)
    (out / "report.json").write_text(report.to_json())
    print(report.to_json(), end="")
    return report


def _epochs_from_jsonl(lines):
    out = []
    for line in lines:
        row = json.loads(line)
        if "epoch" in row:
            out.append(EpochRecord(**row))
    return out


# -- eval ---------------------------------------------------------------------


def cmd_eval(checkpoint, manifests, zero_shot_holdout=None, recall_n=DEFAULT_RECALL_N, config_path=None):
    """Evaluate a parameter file (or a checkpoint directory) on the given domains.

    ``zero_shot_holdout`` is a manifest path, ``True`` for the holdout recorded
    next to the checkpoint, or ``None``. A ``recall_matrix.csv`` beside the
    checkpoint supplies the step history for forgetting when its last row
    matches the recomputed recalls.
    """
    checkpoint = Path(checkpoint)
    if checkpoint.is_dir():
        checkpoint = checkpoint / "params.bin"
    here = checkpoint.parent
    expected = None
    if config_path is not None:
        expected = ExperimentConfig.from_file(config_path).train.encoder
    elif (here / "config.json").exists():
        expected = TrainConfig.from_dict(json.loads((here / "config.json").read_text())).encoder
    params = load_params(checkpoint, expected)
    datasets = _load_all(manifests)
    if 1 not in recall_n:
        recall_n = (1,) + tuple(recall_n)
    final = [evaluate_domain(params, ds, (1,))[1] for ds in datasets]
    matrix = RecallMatrix([final])
    if (here / "recall_matrix.csv").exists():
        saved = RecallMatrix.from_csv((here / "recall_matrix.csv").read_text())
        if saved.rows and saved.rows[-1] == final:
            matrix = saved

    zs = None
    if zero_shot_holdout is not None:
        index = json.loads((here / INDEX_FILE).read_text()) if (here / INDEX_FILE).exists() else {}
        path = index.get("holdout") if zero_shot_holdout is True else zero_shot_holdout
        if not path:
            raise ConfigError("no holdout given and none recorded next to the checkpoint")
        trained_on = _load_all(index.get("domains", [])) if index else datasets
        zs = zero_shot(params, load_dataset(path), 1, trained_on)
    return build_report(matrix, mean_recall_curve(params, datasets, recall_n), zs)


# -- selfcheck ----------------------------------------------------------------


def cmd_selfcheck(fns=None):
    started = time.perf_counter()
    results = checks.run_selfcheck(fns)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - started:.1f}s")
    if failed:
        print("failed: " + ", ".join(failed))
    return not failed


# -- entry point --------------------------------------------------------------


def _int_list(text):
    try:
        values = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("N values must be >= 1")
    return values


def build_parser():
    parser = argparse.ArgumentParser(prog="pcpr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic domains from a JSON spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="run an incremental training protocol")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="continue from the last saved step in --out")

    p = sub.add_parser("eval", help="evaluate a parameter file")
    p.add_argument("--checkpoint", required=True, help="params.bin written by train, or its directory")
    p.add_argument("--manifest", required=True, action="append", help="dataset manifest; repeat for several domains")
    p.add_argument(
        "--zero-shot",
        nargs="?",
        const=True,
        default=None,
        metavar="HOLDOUT",
        help="also report Recall@1 on a holdout manifest (default: the one recorded at training time)",
    )
    p.add_argument("--recall-n", type=_int_list, default=DEFAULT_RECALL_N)
    p.add_argument("--config", help="experiment config whose encoder shape the checkpoint must match")
    p.add_argument("--out", help="write the report JSON here as well")

    sub.add_parser("selfcheck", help="gradient, invariance and metric self-tests")
    return parser


def _thread_limit():
    raw = os.environ.get("PCPR_THREADS")
    if not raw:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(raw)))


def main(argv=None):
    args = build_parser().parse_args(argv)
    with _thread_limit(), warnings.catch_warnings():
        warnings.simplefilter("default")
        if args.command == "selfcheck":
            return EXIT_OK if cmd_selfcheck() else EXIT_SELFCHECK
        if args.command == "gen-data":
            try:
                cmd_gen_data(args.spec, args.out)
            except (ConfigError, PCPRError, ValueError) as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_CONFIG
            return EXIT_OK
        if args.command == "train":
            try:
                cmd_train(args.config, args.out, args.resume)
            except ConfigError as exc:
                print(f"config error: {exc}", file=sys.stderr)
                return EXIT_CONFIG
            except PCPRError as exc:
                print(f"training failed: {type(exc).__name__}: {exc}", file=sys.stderr)
                return EXIT_TRAIN
            return EXIT_OK
        try:
            report = cmd_eval(args.checkpoint, args.manifest, args.zero_shot, args.recall_n, args.config)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except (PCPRError, OSError) as exc:
            print(f"evaluation failed: {type(exc).__name__}: {exc}", file=sys.stderr)
            return EXIT_EVAL
        text = report.to_json()
        if args.out:
            Path(args.out).write_text(text)
        print(text, end="")
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
