"""Command-line interface: dataset synthesis/ingestion, pipeline
orchestration, and machine-readable reports.

Configuration is a flat text file of dotted keys (``section.key = value``,
``#`` comments). Every key has a default; the fully resolved configuration is
echoed into ``config_resolved.txt`` in the output directory, and its sha256
hash is embedded in every artifact, so re-running a subcommand with the same
config and seed reproduces byte-identical data files.

Subcommands:
  select     influence scores, preselection, and greedy canary selection
  craft      full pipeline: selection plus bilevel refinement
  audit      one-run audits over several seeds, with aggregate report
  interfere  closed-form interference-gap sweep over canary angles
  report     merge audit run directories into one aggregate report

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .accounting import calibrate_sigma
from .audit import run_audit
from .bilevel import BilevelConfig, CanarySet, ibis_run, load_canaries_csv, save_canaries_csv
from .data import CLASSIFICATION, REGRESSION, DataError, Dataset, ingest_csv, synth_blobs, synth_linear_gaussian
from .influence import InfluenceConfig, InfluenceEngine, SolveError, default_damping, greedy_select, save_matrix_csv
from .lstsq import Canary, LeastSquaresInstance, RankError, interference_gap
from .models import ArchError, LinearArch, LogisticArch, MlpArch, fit_erm
from .training import DivergenceError, DPConfig, TrainConfig, train


class ConfigError(Exception):
    pass


DEFAULTS = {
    "dataset.kind": "blobs",            # blobs | linear-gaussian | csv
    "dataset.n": "2000",
    "dataset.d": "20",
    "dataset.classes": "3",
    "dataset.separation": "6.0",
    "dataset.noise_std": "0.1",
    "dataset.path": "",
    "dataset.seed": "7",
    "arch.kind": "logistic",            # linear | logistic | mlp
    "arch.hidden": "16",
    "arch.l2": "0.001",
    "train.step_size": "0.25",
    "train.batch_size": "64",
    "train.epochs": "30",
    "train.seed": "11",
    "dp.enabled": "false",
    "dp.clip_norm": "1.0",
    "dp.noise_multiplier": "1.0",
    "dp.target_epsilon": "",
    "dp.delta": "1e-5",
    "influence.preselect_p": "256",
    "influence.num_canaries": "64",
    "influence.damping": "auto",
    "influence.cg_tol": "1e-8",
    "influence.cg_max_iters": "2000",
    "influence.denom_floor": "1e-8",
    "bilevel.inner_step": "0.05",
    "bilevel.outer_step": "0.5",
    "bilevel.reg_strength": "0.1",
    "bilevel.epochs": "20",
    "bilevel.batch_size": "64",
    "bilevel.seed": "13",
    "bilevel.v_refresh_epochs": "10",
    "bilevel.box_project": "true",
    "bilevel.trace_every": "50",
    "bilevel.cg_tol": "1e-8",
    "bilevel.cg_max_iters": "2000",
    "audit.runs": "6",
    "audit.seed_base": "100",
    "audit.alphas": "0.01,0.05,0.1",
    "audit.confidence": "0.95",
    "audit.canaries_path": "",
    "audit.workers": "1",
    "interfere.dim": "8",
    "interfere.angles": "19",
    "interfere.kind": "identity",       # identity | gaussian
    "interfere.seed": "3",
    "interfere.residual_scale": "1.0",
}


class Config:
    """Resolved flat configuration with typed accessors."""

    def __init__(self, values: dict):
        self.values = dict(values)

    def get(self, key: str) -> str:
        try:
            return self.values[key]
        except KeyError:
            raise ConfigError(f"unknown config key {key!r}") from None

    def get_int(self, key: str) -> int:
        try:
            return int(self.get(key))
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {self.get(key)!r}") from None

    def get_float(self, key: str) -> float:
        try:
            return float(self.get(key))
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {self.get(key)!r}") from None

    def get_bool(self, key: str) -> bool:
        val = self.get(key).lower()
        if val in ("true", "1", "yes"):
            return True
        if val in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key} must be true/false, got {self.get(key)!r}")

    def get_floats(self, key: str):
        raw = self.get(key)
        try:
            return [float(v) for v in raw.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"{key} must be a comma list of numbers, got {raw!r}") from None

    def canonical_text(self) -> str:
        return "\n".join(f"{k} = {self.values[k]}" for k in sorted(self.values)) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()


def parse_config_file(path) -> dict:
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def resolve_config(path=None, overrides=None) -> Config:
    values = dict(DEFAULTS)
    if path:
        for key, value in parse_config_file(path).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r} in {path}")
            values[key] = value
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown override key {key!r}")
        values[key] = value
    return Config(values)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def build_dataset(cfg: Config) -> Dataset:
    kind = cfg.get("dataset.kind")
    if kind == "blobs":
        return synth_blobs(
            cfg.get_int("dataset.classes"), cfg.get_int("dataset.d"),
            cfg.get_int("dataset.n"), cfg.get_float("dataset.separation"),
            cfg.get_int("dataset.seed"),
        )
    if kind == "linear-gaussian":
        ds, _ = synth_linear_gaussian(
            cfg.get_int("dataset.d"), cfg.get_int("dataset.n"),
            cfg.get_float("dataset.noise_std"), cfg.get_int("dataset.seed"),
        )
        return ds
    if kind == "csv":
        path = cfg.get("dataset.path")
        if not path:
            raise ConfigError("dataset.kind = csv requires dataset.path")
        if not os.path.exists(path):
            raise ConfigError(f"dataset.path {path!r} does not exist")
        task = REGRESSION if cfg.get("arch.kind") == "linear" else CLASSIFICATION
        return ingest_csv(path, task)
    raise ConfigError(f"unknown dataset.kind {kind!r}")


def build_arch(cfg: Config, dataset: Dataset):
    kind = cfg.get("arch.kind")
    l2 = cfg.get_float("arch.l2")
    if kind == "linear":
        if dataset.task != REGRESSION:
            raise ConfigError("linear arch needs a regression dataset")
        return LinearArch(dataset.d, l2)
    if kind == "logistic":
        if dataset.task != CLASSIFICATION:
            raise ConfigError("logistic arch needs a classification dataset")
        return LogisticArch(dataset.d, dataset.num_classes, l2)
    if kind == "mlp":
        hidden = tuple(int(h) for h in cfg.get("arch.hidden").split(",") if h.strip())
        if not hidden:
            raise ConfigError("arch.hidden must list at least one layer width")
        classes = dataset.num_classes if dataset.task == CLASSIFICATION else 0
        return MlpArch(dataset.d, hidden, classes, l2)
    raise ConfigError(f"unknown arch.kind {kind!r}")


def build_train_cfg(cfg: Config) -> TrainConfig:
    return TrainConfig(
        step_size=cfg.get_float("train.step_size"),
        batch_size=cfg.get_int("train.batch_size"),
        epochs=cfg.get_int("train.epochs"),
        seed=cfg.get_int("train.seed"),
    )


def build_dp_cfg(cfg: Config, n: int):
    if not cfg.get_bool("dp.enabled"):
        return None
    delta = cfg.get_float("dp.delta")
    clip_norm = cfg.get_float("dp.clip_norm")
    target = cfg.get("dp.target_epsilon")
    if target:
        batch = cfg.get_int("train.batch_size")
        steps = cfg.get_int("train.epochs") * math.ceil(n / batch)
        sigma = calibrate_sigma(float(target), batch / n, steps, delta)
        return DPConfig(clip_norm, sigma, delta, float(target))
    return DPConfig(clip_norm, cfg.get_float("dp.noise_multiplier"), delta)


def build_influence_cfg(cfg: Config, arch) -> InfluenceConfig:
    damping_raw = cfg.get("influence.damping")
    damping = default_damping(arch) if damping_raw == "auto" else float(damping_raw)
    return InfluenceConfig(
        preselect_p=cfg.get_int("influence.preselect_p"),
        num_canaries_m=cfg.get_int("influence.num_canaries"),
        damping=damping,
        cg_tol=cfg.get_float("influence.cg_tol"),
        cg_max_iters=cfg.get_int("influence.cg_max_iters"),
        denom_floor=cfg.get_float("influence.denom_floor"),
    )


def build_bilevel_cfg(cfg: Config, arch) -> BilevelConfig:
    damping_raw = cfg.get("influence.damping")
    damping = default_damping(arch) if damping_raw == "auto" else float(damping_raw)
    return BilevelConfig(
        outer_step=cfg.get_float("bilevel.outer_step"),
        batch_size=cfg.get_int("bilevel.batch_size"),
        inner_step=cfg.get_float("bilevel.inner_step"),
        reg_strength=cfg.get_float("bilevel.reg_strength"),
        epochs=cfg.get_int("bilevel.epochs"),
        seed=cfg.get_int("bilevel.seed"),
        v_refresh_epochs=cfg.get_int("bilevel.v_refresh_epochs"),
        box_project=cfg.get_bool("bilevel.box_project"),
        trace_every=cfg.get_int("bilevel.trace_every"),
        damping=damping,
        cg_tol=cfg.get_float("bilevel.cg_tol"),
        cg_max_iters=cfg.get_int("bilevel.cg_max_iters"),
    )


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def _json_dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_provenance(out_dir, cfg: Config, subcommand: str, extra=None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config_resolved.txt"), "w") as fh:
        fh.write(cfg.canonical_text())
    record = {
        "config_hash": cfg.hash(),
        "version": __version__,
        "subcommand": subcommand,
    }
    record.update(extra or {})
    with open(os.path.join(out_dir, "provenance.json"), "w") as fh:
        fh.write(_json_dump(record))


def _provenance_comment(cfg: Config, seed) -> str:
    return f"config_hash={cfg.hash()} seed={seed}"


def _select_canaries(cfg: Config, dataset: Dataset, arch, trainer_cfg):
    """Greedy influence selection; returns (CanarySet, InfluenceMatrix, positions)."""
    icfg = build_influence_cfg(cfg, arch)
    if icfg.preselect_p > len(dataset):
        raise ConfigError("influence.preselect_p exceeds the dataset size")
    if isinstance(arch, MlpArch):
        model = train(dataset, arch, trainer_cfg)
    else:
        model = fit_erm(dataset, arch)
    engine = InfluenceEngine(model, dataset, icfg)
    pool = engine.preselect()
    matrix = engine.build_matrix(pool)
    positions = greedy_select(matrix, icfg.num_canaries_m, icfg.denom_floor)
    origin = matrix.indices[positions]
    canaries = CanarySet(dataset.x[origin].copy(), dataset.y[origin].copy(), origin)
    return canaries, matrix, positions


def cmd_select(cfg: Config, out_dir: str) -> int:
    dataset = build_dataset(cfg)
    arch = build_arch(cfg, dataset)
    canaries, matrix, positions = _select_canaries(cfg, dataset, arch, build_train_cfg(cfg))
    write_provenance(out_dir, cfg, "select", {"seed": cfg.get_int("dataset.seed")})
    prov = _provenance_comment(cfg, cfg.get_int("dataset.seed"))
    with open(os.path.join(out_dir, "selected_indices.csv"), "w") as fh:
        fh.write(f"# {prov}\n")
        fh.write("rank,dataset_index,label\n")
        for rank, (idx, lab) in enumerate(zip(canaries.origin_indices, canaries.labels)):
            fh.write(f"{rank},{int(idx)},{repr(float(lab))}\n")
    save_matrix_csv(os.path.join(out_dir, "influence_matrix.csv"), matrix, prov)
    save_canaries_csv(os.path.join(out_dir, "canaries.csv"), canaries, prov)
    print(f"select: wrote {canaries.m} canaries to {out_dir}")
    return 0


def cmd_craft(cfg: Config, out_dir: str) -> int:
    dataset = build_dataset(cfg)
    arch = build_arch(cfg, dataset)
    icfg = build_influence_cfg(cfg, arch)
    bcfg = build_bilevel_cfg(cfg, arch)
    canaries, trace = ibis_run(dataset, arch, icfg, bcfg, build_train_cfg(cfg))
    write_provenance(out_dir, cfg, "craft", {"seed": bcfg.seed})
    save_canaries_csv(
        os.path.join(out_dir, "canaries.csv"), canaries, _provenance_comment(cfg, bcfg.seed)
    )
    with open(os.path.join(out_dir, "trace.jsonl"), "w") as fh:
        for rec in trace:
            fh.write(json.dumps(
                {"t": rec.t, "phi": rec.phi, "reg": rec.reg, "displacement": rec.displacement},
                sort_keys=True,
            ) + "\n")
    print(f"craft: refined {canaries.m} canaries over {bcfg.epochs} epochs -> {out_dir}")
    return 0


def _audit_canaries(cfg: Config, dataset: Dataset) -> CanarySet:
    path = cfg.get("audit.canaries_path")
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"audit.canaries_path {path!r} does not exist")
        canaries = load_canaries_csv(path)
        if canaries.features.shape[1] != dataset.d:
            raise ConfigError("canary dimension does not match the dataset")
        return canaries
    # no canary file: random baseline selection from the dataset
    m = cfg.get_int("influence.num_canaries")
    rng = np.random.default_rng(cfg.get_int("audit.seed_base"))
    origin = np.sort(rng.choice(len(dataset), size=m, replace=False))
    return CanarySet(dataset.x[origin].copy(), dataset.y[origin].copy(), origin)


def _one_audit(args):
    dataset, canaries, arch, train_cfg, dp_cfg, seed, alphas, confidence = args
    result = run_audit(dataset, canaries, arch, train_cfg, dp_cfg, seed, alphas, confidence)
    return {
        "seed": seed,
        "eps_hat": result.eps_hat,
        "k_plus": result.k_plus,
        "k_minus": result.k_minus,
        "gdp_mu": result.gdp_mu,
        "gdp_eps": result.gdp_eps,
        "confidence": result.confidence,
        "mechanism_delta": result.mechanism_delta,
        "tpr": {repr(a): t for a, t in result.tpr_table},
        "scores": [float(s) for s in result.scores],
        "bits": [int(b) for b in result.bits],
    }


def aggregate_records(records):
    """Aggregate per-run audit records: mean, sample std, median."""

    def stats_of(values):
        arr = np.asarray(values, dtype=np.float64)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        return {"mean": float(arr.mean()), "std": std, "median": float(np.median(arr))}

    agg = {
        "runs": len(records),
        "eps_hat": stats_of([r["eps_hat"] for r in records]),
        "gdp_eps": stats_of([r["gdp_eps"] for r in records]),
        "gdp_mu": stats_of([r["gdp_mu"] for r in records]),
        "tpr": {},
    }
    alphas = sorted(records[0]["tpr"], key=float)
    for a in alphas:
        agg["tpr"][a] = stats_of([r["tpr"][a] for r in records])
    return agg


def _report_text(agg) -> str:
    lines = [f"audit report over {agg['runs']} runs", ""]
    lines.append(f"{'metric':<16}{'mean':>12}{'std':>12}{'median':>12}")
    for key in ("eps_hat", "gdp_eps", "gdp_mu"):
        s = agg[key]
        lines.append(f"{key:<16}{s['mean']:>12.4f}{s['std']:>12.4f}{s['median']:>12.4f}")
    for a, s in agg["tpr"].items():
        name = f"tpr@{float(a):g}"
        lines.append(f"{name:<16}{s['mean']:>12.4f}{s['std']:>12.4f}{s['median']:>12.4f}")
    return "\n".join(lines) + "\n"


def cmd_audit(cfg: Config, out_dir: str) -> int:
    dataset = build_dataset(cfg)
    arch = build_arch(cfg, dataset)
    train_cfg = build_train_cfg(cfg)
    canaries = _audit_canaries(cfg, dataset)
    base = dataset.without(canaries.origin_indices)
    # account at the canary-free size: the per-run sampling rate is at most
    # batch/|base|, so the calibrated sigma is valid for every membership draw
    dp_cfg = build_dp_cfg(cfg, len(base))
    runs = cfg.get_int("audit.runs")
    seed_base = cfg.get_int("audit.seed_base")
    alphas = cfg.get_floats("audit.alphas")
    confidence = cfg.get_float("audit.confidence")
    seeds = [seed_base + i for i in range(runs)]
    jobs = [
        (dataset, canaries, arch, train_cfg, dp_cfg, seed, tuple(alphas), confidence)
        for seed in seeds
    ]
    workers = cfg.get_int("audit.workers")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_one_audit, jobs))
    else:
        records = [_one_audit(job) for job in jobs]

    write_provenance(out_dir, cfg, "audit", {"seeds": seeds})
    for i, rec in enumerate(records):
        run_dir = os.path.join(out_dir, f"run_{i:03d}")
        os.makedirs(run_dir, exist_ok=True)
        rec_full = dict(rec)
        rec_full["config_hash"] = cfg.hash()
        with open(os.path.join(run_dir, "result.json"), "w") as fh:
            fh.write(_json_dump(rec_full))
    with open(os.path.join(out_dir, "runs.jsonl"), "w") as fh:
        for rec in records:
            slim = {k: v for k, v in rec.items() if k not in ("scores", "bits")}
            slim["config_hash"] = cfg.hash()
            fh.write(json.dumps(slim, sort_keys=True) + "\n")
    agg = aggregate_records(records)
    agg["config_hash"] = cfg.hash()
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        fh.write(_json_dump(agg))
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(_report_text(agg))
    print(_report_text(agg))
    return 0


def cmd_interfere(cfg: Config, out_dir: str) -> int:
    d = cfg.get_int("interfere.dim")
    kind = cfg.get("interfere.kind")
    seed = cfg.get_int("interfere.seed")
    rng = np.random.default_rng(seed)
    if kind == "identity":
        X = np.eye(d)
        y = np.zeros(d)
    elif kind == "gaussian":
        X = rng.standard_normal((4 * d, d))
        y = rng.standard_normal(4 * d)
    else:
        raise ConfigError(f"unknown interfere.kind {kind!r}")
    inst = LeastSquaresInstance(X, y)
    scale = cfg.get_float("interfere.residual_scale")
    c1 = Canary(np.eye(d)[0] * scale, float(-scale))
    n_angles = cfg.get_int("interfere.angles")
    angles = np.linspace(0.0, 90.0, n_angles)
    write_provenance(out_dir, cfg, "interfere", {"seed": seed})
    path = os.path.join(out_dir, "interference.csv")
    with open(path, "w") as fh:
        fh.write(f"# {_provenance_comment(cfg, seed)}\n")
        fh.write("angle_deg,gap\n")
        for a in angles:
            phi = math.radians(float(a))
            x2 = math.cos(phi) * np.eye(d)[0] + math.sin(phi) * np.eye(d)[1]
            c2 = Canary(x2 * scale, float(-scale))
            fh.write(f"{float(a)!r},{interference_gap(inst, c1, c2)!r}\n")
    print(f"interfere: wrote {n_angles} angles to {path}")
    return 0


def cmd_report(cfg: Config, out_dir: str, run_dirs) -> int:
    records = []
    for d in run_dirs:
        path = os.path.join(d, "runs.jsonl")
        if not os.path.exists(path):
            raise ConfigError(f"{d} has no runs.jsonl (not an audit output directory?)")
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    records.append(json.loads(line))
    if not records:
        raise ConfigError("no run records found")
    agg = aggregate_records(records)
    agg["sources"] = [os.path.abspath(d) for d in sorted(run_dirs)]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        fh.write(_json_dump(agg))
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(_report_text(agg))
    print(_report_text(agg))
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="canaryaudit", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="path to a config file (defaults apply otherwise)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")

    p = sub.add_parser("select", help="influence-based greedy canary selection")
    common(p)
    p = sub.add_parser("craft", help="selection plus bilevel refinement")
    common(p)
    p.add_argument("--iterations", type=int, help="override bilevel.epochs")
    p = sub.add_parser("audit", help="seeded one-run audits with aggregate report")
    common(p)
    p.add_argument("--runs", type=int, help="override audit.runs")
    p.add_argument("--seed", type=int, help="override audit.seed_base")
    p.add_argument("--canaries", help="override audit.canaries_path")
    p = sub.add_parser("interfere", help="interference-gap sweep over canary angles")
    common(p)
    p = sub.add_parser("report", help="merge audit run directories")
    common(p)
    p.add_argument("run_dirs", nargs="+", help="audit output directories to merge")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            print(f"error: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return 2
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if getattr(args, "iterations", None) is not None:
        overrides["bilevel.epochs"] = str(args.iterations)
    if getattr(args, "runs", None) is not None:
        overrides["audit.runs"] = str(args.runs)
    if getattr(args, "seed", None) is not None:
        overrides["audit.seed_base"] = str(args.seed)
    if getattr(args, "canaries", None) is not None:
        overrides["audit.canaries_path"] = args.canaries
    try:
        cfg = resolve_config(args.config, overrides)
        if args.command == "select":
            return cmd_select(cfg, args.out)
        if args.command == "craft":
            return cmd_craft(cfg, args.out)
        if args.command == "audit":
            return cmd_audit(cfg, args.out)
        if args.command == "interfere":
            return cmd_interfere(cfg, args.out)
        if args.command == "report":
            return cmd_report(cfg, args.out, args.run_dirs)
        raise ConfigError(f"unknown command {args.command}")
    except (ConfigError, DataError, ArchError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, SolveError, RankError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
